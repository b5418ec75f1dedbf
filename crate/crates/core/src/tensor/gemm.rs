fn max_index(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not used");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

/// Panics if a strided gemm would read or write out of bounds.
#[allow(clippy::too_many_arguments)]
pub(super) fn check_extents(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a_strides: (isize, isize),
    b_len: usize,
    b_strides: (isize, isize),
    c_len: usize,
) {
    assert!(m > 0 && k > 0 && n > 0, "empty gemm {m}x{k}x{n}");
    assert!(max_index(m, k, a_strides) < a_len, "gemm: lhs out of bounds");
    assert!(max_index(k, n, b_strides) < b_len, "gemm: rhs out of bounds");
    assert!(m * n <= c_len, "gemm: output out of bounds");
}
