use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, padding: usize },
    TransposedConv2d { input: Var, kernel: Var, bias: Option<Var> },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Relu { input: Var },
    SoftmaxChannels { input: Var },
    CrossEntropy { probs: Var, targets: Vec<usize> },
    GlobalAvgPool { input: Var },
    FullyConnected { input: Var, weight: Var, bias: Var },
    ConcatChannels { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op,
    name: Option<String>,
    needs_grad: bool,
}

/// Probabilities below this are clamped inside the cross-entropy log.
pub const CE_CLAMP: f64 = 1e-12;

/// Append-only computation tape. Nodes are stored in creation order, which is
/// a topological order, so the backward pass is a single reverse sweep.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph in checked mode: every op rejects non-finite outputs.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), checked: true }
    }

    pub fn with_checked(checked: bool) -> Self {
        Self { nodes: Vec::new(), checked }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Gradients are reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, Some(name.into()), true)
    }

    /// Non-trainable leaf (data, fixed weights).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient after [`Graph::backward`]; zeros for nodes the loss does not reach.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    /// Named parameters in creation order.
    pub fn params(&self) -> Vec<(String, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.clone().map(|name| (name, Var(i))))
            .collect()
    }

    /// `(name, gradient)` for every named parameter, in creation order.
    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        self.params().into_iter().map(|(name, v)| (name, self.grad(v))).collect()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op, name: Option<String>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, name, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op, parents: &[Var]) -> Result<Var, TensorError> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, None, needs_grad))
    }

    fn bias_vec(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<Option<&[T]>, TensorError> {
        match bias {
            None => Ok(None),
            Some(b) => {
                let t = self.value(b);
                if t.shape() != [channels] {
                    return Err(shape_err(op, format!("bias shape {:?}, expected [{channels}]", t.shape())));
                }
                Ok(Some(t.data()))
            }
        }
    }

    /// Stride-1 2-D convolution (cross-correlation) with symmetric zero padding.
    /// `kernel` is `Cout x Cin x Kh x Kw`, `bias` is `Cout`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var, TensorError> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (n, cin, h, w) = x.dims4("conv2d")?;
        let (cout, kcin, kh, kw) = k.dims4("conv2d")?;
        if kcin != cin {
            return Err(shape_err("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let bias_data = self.bias_vec("conv2d", bias, cout)?;
        let geo = ConvGeometry { cin, h, w, kh, kw, padding };
        let (oh, ow) = geo.out_dims();
        let ohw = oh * ow;
        let ckk = cin * kh * kw;
        let mut out = vec![T::ZERO; n * cout * ohw];
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::ZERO; ckk * ohw] };
        for b in 0..n {
            let xb = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
            let cols: &[T] = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut col);
                &col
            };
            let ob = &mut out[b * cout * ohw..(b + 1) * cout * ohw];
            T::gemm(cout, ckk, ohw, k.data(), (ckk as isize, 1), cols, (ohw as isize, 1), T::ZERO, ob);
            if let Some(bd) = bias_data {
                for (co, row) in ob.chunks_mut(ohw).enumerate() {
                    for v in row {
                        *v += bd[co];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        self.push("conv2d", value, Op::Conv2d { input, kernel, bias, padding }, &parents)
    }

    /// Stride-2 transposed convolution with a `Cin x Cout x 2 x 2` kernel;
    /// doubles both spatial dims exactly.
    pub fn transposed_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let op = "transposed_conv2d";
        if stride != 2 {
            return Err(shape_err(op, format!("only stride 2 is supported, got {stride}")));
        }
        let x = self.value(input);
        let k = self.value(kernel);
        let (n, cin, h, w) = x.dims4(op)?;
        let (kcin, cout, kh, kw) = k.dims4(op)?;
        if kcin != cin {
            return Err(shape_err(op, format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if (kh, kw) != (2, 2) {
            return Err(shape_err(op, format!("kernel must be 2x2 for stride 2, got {kh}x{kw}")));
        }
        let bias_data = self.bias_vec(op, bias, cout)?;
        let hw = h * w;
        let q = cout * 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; n * cout * oh * ow];
        let mut y = vec![T::ZERO; q * hw];
        for b in 0..n {
            let xb = &x.data()[b * cin * hw..(b + 1) * cin * hw];
            T::gemm(q, cin, hw, k.data(), (1, q as isize), xb, (hw as isize, 1), T::ZERO, &mut y);
            let ob = &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
            for co in 0..cout {
                let bv = bias_data.map_or(T::ZERO, |bd| bd[co]);
                for tap in 0..4 {
                    let (dy, dx) = (tap / 2, tap % 2);
                    let yrow = &y[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                    for i in 0..h {
                        for j in 0..w {
                            ob[co * oh * ow + (2 * i + dy) * ow + 2 * j + dx] = yrow[i * w + j] + bv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        self.push(op, value, Op::TransposedConv2d { input, kernel, bias }, &parents)
    }

    /// Non-overlapping max pooling. Ties go to the first element of the window
    /// in row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var, TensorError> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("maxpool2d")?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(shape_err(
                "maxpool2d",
                format!("spatial dims {h}x{w} not divisible by window {window}"),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("maxpool2d", value, Op::MaxPool2d { input, argmax }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    /// Softmax over dim 1 of an `N x C` or `N x C x H x W` tensor, with
    /// per-position max subtraction.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let (n, c, inner) = channel_layout("softmax_channels", x.shape())?;
        if c < 2 {
            return Err(shape_err("softmax_channels", format!("need at least 2 channels, got {c}")));
        }
        let src = x.data();
        let mut out = vec![T::ZERO; src.len()];
        for b in 0..n {
            let base = b * c * inner;
            for s in 0..inner {
                let mut m = src[base + s];
                for ch in 1..c {
                    m = m.max(src[base + ch * inner + s]);
                }
                let mut total = T::ZERO;
                for ch in 0..c {
                    let e = (src[base + ch * inner + s] - m).exp();
                    out[base + ch * inner + s] = e;
                    total += e;
                }
                for ch in 0..c {
                    let v = &mut out[base + ch * inner + s];
                    *v = *v / total;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("softmax_channels", value, Op::SoftmaxChannels { input }, &[input])
    }

    /// Mean over positions of `-ln max(p[target], 1e-12)`. `probs` is `N x C`
    /// (targets length `N`) or `N x C x H x W` (targets length `N*H*W`,
    /// row-major).
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let p = self.value(probs);
        let (n, c, inner) = channel_layout("cross_entropy", p.shape())?;
        if targets.len() != n * inner {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {} positions", targets.len(), n * inner),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Validation(format!("target class {bad} out of range for {c} classes")));
        }
        let clamp = T::of(CE_CLAMP);
        let mut total = T::ZERO;
        for (pos, &t) in targets.iter().enumerate() {
            let (b, s) = (pos / inner, pos % inner);
            let pt = p.data()[b * c * inner + t * inner + s];
            total += -(pt.max(clamp)).ln();
        }
        let loss = total / T::of((n * inner) as f64);
        let value = Tensor::scalar(loss);
        self.push("cross_entropy", value, Op::CrossEntropy { probs, targets: targets.to_vec() }, &[probs])
    }

    /// Spatial mean per channel: `N x C x H x W -> N x C`.
    pub fn global_avg_pool_channels(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("global_avg_pool_channels")?;
        let hw = h * w;
        let denom = T::of(hw as f64);
        let out = x
            .data()
            .chunks(hw)
            .map(|plane| {
                let mut s = T::ZERO;
                for &v in plane {
                    s += v;
                }
                s / denom
            })
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool_channels", value, Op::GlobalAvgPool { input }, &[input])
    }

    /// `input (N x Cin) * weight^T (Cin x Cout) + bias`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let op = "fully_connected";
        let x = self.value(input);
        let wt = self.value(weight);
        let (n, cin) = dims2(op, x.shape())?;
        let (cout, wcin) = dims2(op, wt.shape())?;
        if wcin != cin {
            return Err(shape_err(op, format!("input width {cin}, weight expects {wcin}")));
        }
        let bd = self.bias_vec(op, Some(bias), cout)?.expect("bias present");
        let mut out = vec![T::ZERO; n * cout];
        T::gemm(n, cin, cout, x.data(), (cin as isize, 1), wt.data(), (1, cin as isize), T::ZERO, &mut out);
        for row in out.chunks_mut(cout) {
            for (v, &b) in row.iter_mut().zip(bd) {
                *v += b;
            }
        }
        let value = Tensor::new(vec![n, cout], out)?;
        self.push(op, value, Op::FullyConnected { input, weight, bias }, &[input, weight, bias])
    }

    /// Concatenate along the channel dim.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let op = "concat_channels";
        let (xa, xb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = xa.dims4(op)?;
        let (nb, cb, hb, wb) = xb.dims4(op)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err(op, format!("{:?} vs {:?}", xa.shape(), xb.shape())));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&xa.data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&xb.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        self.push(op, value, Op::ConcatChannels { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push("sum", value, Op::Sum { input }, &[input])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() != xb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", xa.shape(), xb.shape())));
        }
        let data = xa.data().iter().zip(xb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(xa.shape().to_vec(), data)
    }

    /// Reverse sweep from a scalar `loss`. Gradients from any previous sweep
    /// are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed_shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&seed_shape, T::ONE));
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else { continue };
            if !node.needs_grad {
                continue;
            }
            backprop_node(before, node, g.data());
        }
        Ok(())
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match *shape {
        [a, b] => Ok((a, b)),
        _ => Err(shape_err(op, format!("expected rank 2, got {shape:?}"))),
    }
}

/// `(N, C, positions-per-channel)` for rank-2 or rank-4 tensors.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(shape_err(op, format!("expected N x C or N x C x H x W, got {shape:?}"))),
    }
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: usize,
}

impl ConvGeometry {
    fn out_dims(&self) -> (usize, usize) {
        (self.h + 2 * self.padding - self.kh + 1, self.w + 2 * self.padding - self.kw + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.padding == 0
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`.
    fn ox_range(&self, kx: usize, ow: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx);
        let hi = (self.w + self.padding).saturating_sub(kx).min(ow);
        (lo, hi.max(lo))
    }

    /// Rows `(ci, ky, kx)`, columns `(oy, ox)`.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (oh, ow) = self.out_dims();
        let ohw = oh * ow;
        let mut row = 0;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut col[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = self.ox_range(kx, ow);
                    for oy in 0..oh {
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        let iy = (oy + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            drow.fill(T::ZERO);
                            continue;
                        }
                        drow[..lo].fill(T::ZERO);
                        drow[hi..].fill(T::ZERO);
                        let src = iy as usize * self.w + lo + kx - self.padding;
                        drow[lo..hi].copy_from_slice(&plane[src..src + (hi - lo)]);
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatter-add columns back.
    fn col2im_add<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let (oh, ow) = self.out_dims();
        let ohw = oh * ow;
        let mut row = 0;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &col[row * ohw..(row + 1) * ohw];
                    let (lo, hi) = self.ox_range(kx, ow);
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            continue;
                        }
                        let dst = iy as usize * self.w + lo + kx - self.padding;
                        for (d, &s) in plane[dst..dst + (hi - lo)].iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                            *d += s;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn take_grad<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<Tensor<T>> {
    let node = &mut nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(node.grad.take().unwrap_or_else(|| Tensor::zeros(node.value.shape())))
}

/// Run `f` against the gradient buffer of `v` if `v` needs one. Parents are
/// updated one at a time so aliased parents (`mul(x, x)`) accumulate correctly.
fn with_grad<T: Scalar>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&[Node<T>], &mut [T])) {
    if let Some(mut buf) = take_grad(nodes, v) {
        f(nodes, buf.data_mut());
        nodes[v.0].grad = Some(buf);
    }
}

fn backprop_node<T: Scalar>(before: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    match &node.op {
        Op::Leaf => {}
        &Op::Conv2d { input, kernel, bias, padding } => {
            let (n, cin, h, w) = dims4_unchecked(&before[input.0].value);
            let (cout, _, kh, kw) = dims4_unchecked(&before[kernel.0].value);
            let geo = ConvGeometry { cin, h, w, kh, kw, padding };
            let (oh, ow) = geo.out_dims();
            let ohw = oh * ow;
            let ckk = cin * kh * kw;
            let pointwise = geo.is_pointwise();
            with_grad(before, kernel, |nodes, dk| {
                let x = nodes[input.0].value.data();
                let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; ckk * ohw] };
                for b in 0..n {
                    let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
                    let cols: &[T] = if pointwise {
                        xb
                    } else {
                        geo.im2col(xb, &mut col);
                        &col
                    };
                    let gb = &g[b * cout * ohw..(b + 1) * cout * ohw];
                    T::gemm(cout, ohw, ckk, gb, (ohw as isize, 1), cols, (1, ohw as isize), T::ONE, dk);
                }
            });
            with_grad(before, input, |nodes, dx| {
                let k = nodes[kernel.0].value.data();
                let mut dcol = vec![T::ZERO; ckk * ohw];
                for b in 0..n {
                    let gb = &g[b * cout * ohw..(b + 1) * cout * ohw];
                    let dxb = &mut dx[b * cin * h * w..(b + 1) * cin * h * w];
                    if pointwise {
                        T::gemm(ckk, cout, ohw, k, (1, ckk as isize), gb, (ohw as isize, 1), T::ONE, dxb);
                    } else {
                        T::gemm(ckk, cout, ohw, k, (1, ckk as isize), gb, (ohw as isize, 1), T::ZERO, &mut dcol);
                        geo.col2im_add(&dcol, dxb);
                    }
                }
            });
            if let Some(bias) = bias {
                with_grad(before, bias, |_, db| {
                    for b in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let row = &g[(b * cout + co) * ohw..(b * cout + co + 1) * ohw];
                            let mut s = T::ZERO;
                            for &v in row {
                                s += v;
                            }
                            *d += s;
                        }
                    }
                });
            }
        }
        &Op::TransposedConv2d { input, kernel, bias } => {
            let (n, cin, h, w) = dims4_unchecked(&before[input.0].value);
            let cout = before[kernel.0].value.shape()[1];
            let hw = h * w;
            let q = cout * 4;
            let (oh, ow) = (2 * h, 2 * w);
            // Gather the output gradient into the (Cout*4) x (H*W) layout of the forward gemm.
            let mut gy = vec![T::ZERO; n * q * hw];
            for b in 0..n {
                for co in 0..cout {
                    for tap in 0..4 {
                        let (dy, dx) = (tap / 2, tap % 2);
                        let dst = &mut gy[(b * q + co * 4 + tap) * hw..(b * q + co * 4 + tap + 1) * hw];
                        for i in 0..h {
                            for j in 0..w {
                                dst[i * w + j] = g[(b * cout + co) * oh * ow + (2 * i + dy) * ow + 2 * j + dx];
                            }
                        }
                    }
                }
            }
            with_grad(before, kernel, |nodes, dk| {
                let x = nodes[input.0].value.data();
                for b in 0..n {
                    let xb = &x[b * cin * hw..(b + 1) * cin * hw];
                    let gyb = &gy[b * q * hw..(b + 1) * q * hw];
                    T::gemm(cin, hw, q, xb, (hw as isize, 1), gyb, (1, hw as isize), T::ONE, dk);
                }
            });
            with_grad(before, input, |nodes, dxs| {
                let k = nodes[kernel.0].value.data();
                for b in 0..n {
                    let gyb = &gy[b * q * hw..(b + 1) * q * hw];
                    let dxb = &mut dxs[b * cin * hw..(b + 1) * cin * hw];
                    T::gemm(cin, q, hw, k, (q as isize, 1), gyb, (hw as isize, 1), T::ONE, dxb);
                }
            });
            if let Some(bias) = bias {
                with_grad(before, bias, |_, db| {
                    let plane = oh * ow;
                    for b in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let mut s = T::ZERO;
                            for &v in &g[(b * cout + co) * plane..(b * cout + co + 1) * plane] {
                                s += v;
                            }
                            *d += s;
                        }
                    }
                });
            }
        }
        Op::MaxPool2d { input, argmax } => {
            with_grad(before, *input, |_, dx| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
            });
        }
        &Op::Relu { input } => {
            with_grad(before, input, |nodes, dx| {
                let x = nodes[input.0].value.data();
                for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                    if xv > T::ZERO {
                        *d += gv;
                    }
                }
            });
        }
        &Op::SoftmaxChannels { input } => {
            let y = node.value.data();
            let (n, c, inner) = channel_layout("softmax_channels", node.value.shape()).expect("validated in forward");
            with_grad(before, input, |_, dx| {
                for b in 0..n {
                    let base = b * c * inner;
                    for s in 0..inner {
                        let mut dot = T::ZERO;
                        for ch in 0..c {
                            let idx = base + ch * inner + s;
                            dot += g[idx] * y[idx];
                        }
                        for ch in 0..c {
                            let idx = base + ch * inner + s;
                            dx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }
        Op::CrossEntropy { probs, targets } => {
            let probs = *probs;
            let (_, c, inner) = channel_layout("cross_entropy", before[probs.0].value.shape()).expect("validated in forward");
            let scale = g[0] / T::of(targets.len() as f64);
            let clamp = T::of(CE_CLAMP);
            with_grad(before, probs, |nodes, dp| {
                let p = nodes[probs.0].value.data();
                for (pos, &t) in targets.iter().enumerate() {
                    let idx = (pos / inner) * c * inner + t * inner + pos % inner;
                    if p[idx] >= clamp {
                        dp[idx] -= scale / p[idx];
                    }
                }
            });
        }
        &Op::GlobalAvgPool { input } => {
            let (_, _, h, w) = dims4_unchecked(&before[input.0].value);
            let hw = h * w;
            let denom = T::of(hw as f64);
            with_grad(before, input, |_, dx| {
                for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
                    let share = gv / denom;
                    for d in plane {
                        *d += share;
                    }
                }
            });
        }
        &Op::FullyConnected { input, weight, bias } => {
            let shape = before[weight.0].value.shape();
            let (cout, cin) = (shape[0], shape[1]);
            let n = g.len() / cout;
            with_grad(before, input, |nodes, dx| {
                let wt = nodes[weight.0].value.data();
                T::gemm(n, cout, cin, g, (cout as isize, 1), wt, (cin as isize, 1), T::ONE, dx);
            });
            with_grad(before, weight, |nodes, dw| {
                let x = nodes[input.0].value.data();
                T::gemm(cout, n, cin, g, (1, cout as isize), x, (cin as isize, 1), T::ONE, dw);
            });
            with_grad(before, bias, |_, db| {
                for row in g.chunks(cout) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            });
        }
        &Op::ConcatChannels { a, b } => {
            let (n, c, h, w) = dims4_unchecked(&node.value);
            let ca = before[a.0].value.shape()[1];
            let cb = c - ca;
            let hw = h * w;
            with_grad(before, a, |_, da| {
                for i in 0..n {
                    let src = &g[i * c * hw..i * c * hw + ca * hw];
                    for (d, &s) in da[i * ca * hw..(i + 1) * ca * hw].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
            with_grad(before, b, |_, db| {
                for i in 0..n {
                    let src = &g[i * c * hw + ca * hw..(i + 1) * c * hw];
                    for (d, &s) in db[i * cb * hw..(i + 1) * cb * hw].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
        }
        &Op::Add { a, b } => {
            for v in [a, b] {
                with_grad(before, v, |_, d| {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
        }
        &Op::Mul { a, b } => {
            for (v, other) in [(a, b), (b, a)] {
                with_grad(before, v, |nodes, d| {
                    let o = nodes[other.0].value.data();
                    for ((d, &gv), &ov) in d.iter_mut().zip(g).zip(o) {
                        *d += gv * ov;
                    }
                });
            }
        }
        &Op::Sum { input } => {
            with_grad(before, input, |_, d| {
                for v in d {
                    *v += g[0];
                }
            });
        }
    }
}

fn dims4_unchecked<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    t.dims4("backward").expect("validated in forward")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.param("k", t(&[1, 1, 1, 1], &[1.0]));
        let b = g.param("b", t(&[1], &[0.0]));
        let y = g.conv2d(x, k, Some(b), 0).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn conv_all_ones_kernel_sums_window() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.param("k", Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.param("b", t(&[1], &[0.0]));
        let y = g.conv2d(x, k, Some(b), 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f32 * 0.1 - 2.0));
        let k = g.param("k", Tensor::zeros(&[2, 3, 3, 3]));
        let b = g.param("b", Tensor::full(&[2], 5.0));
        let y = g.conv2d(x, k, Some(b), 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 4, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[2, 2, 4, 3], |i| ((i * 7) % 11) as f64 - 5.0));
        let k = g.input(Tensor::from_fn(&[3, 2, 3, 2], |i| ((i * 5) % 7) as f64 - 3.0));
        let y = g.conv2d(x, k, None, 1).unwrap();
        let (xs, ks) = (g.value(x).clone(), g.value(k).clone());
        let ys = g.value(y);
        assert_eq!(ys.shape(), &[2, 3, 4, 4]);
        for b in 0..2 {
            for co in 0..3 {
                for oy in 0..4 {
                    for ox in 0..4 {
                        let mut s = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..2 {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if (0..4).contains(&iy) && (0..3).contains(&ix) {
                                        s += xs.data()[((b * 2 + ci) * 4 + iy as usize) * 3 + ix as usize]
                                            * ks.data()[((co * 2 + ci) * 3 + ky) * 2 + kx];
                                    }
                                }
                            }
                        }
                        assert_eq!(ys.data()[((b * 3 + co) * 4 + oy) * 4 + ox], s);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let k = g.param("k", Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, k, None, 1).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }

    #[test]
    fn transposed_conv_single_pixel_scatter() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let k = g.param("k", Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.transposed_conv2d(x, k, None, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0; 4]);
    }

    #[test]
    fn transposed_conv_places_values_at_even_coordinates() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.param("k", t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let y = g.transposed_conv2d(x, k, None, 2).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 0.0, 2.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            3.0, 0.0, 4.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g.value(y).data(), &want);
    }

    #[test]
    fn transposed_conv_zero_input() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let k = g.param("k", Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32));
        let y = g.transposed_conv2d(x, k, None, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 6, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_conv_rejects_other_strides_and_kernels() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let k = g.param("k", Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.transposed_conv2d(x, k, None, 1).is_err());
        let k3 = g.param("k3", Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.transposed_conv2d(x, k3, None, 2).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let ramp = g.input(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32));
        let y = g.maxpool2d(ramp, 2).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::full(&[1, 1, 4, 4], 3.0));
        let y = g.maxpool2d(x, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            1.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g.grad(x).data(), &want);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(g.maxpool2d(x, 2), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn relu_forward_and_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // Subgradient at zero is zero.
        assert_eq!(g.grad(x).data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::<f32>::new();
        let x = g.param("x", t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1, 4, 2, 3], 0.7));
        let y = g.softmax_channels(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));

        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
        let y = g.softmax_channels(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_is_bit_exact_for_integer_logits() {
        let logits = Tensor::from_fn(&[2, 3, 2, 2], |i| ((i * 13) % 7) as f32 - 3.0);
        let mut shifted = logits.clone();
        // Per-pixel shift k = pixel index.
        for b in 0..2 {
            for ch in 0..3 {
                for s in 0..4 {
                    shifted.data_mut()[(b * 3 + ch) * 4 + s] += (b * 4 + s) as f32;
                }
            }
        }
        let mut g = Graph::<f32>::new();
        let a = g.input(logits);
        let b = g.input(shifted);
        let ya = g.softmax_channels(a).unwrap();
        let yb = g.softmax_channels(b).unwrap();
        assert!(g.value(ya).bit_eq(g.value(yb)));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::full(&[1, 4, 2, 2], 0.25));
        let l = g.cross_entropy(p, &[0, 1, 2, 3]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let mut onehot = Tensor::zeros(&[1, 2, 1, 2]);
        onehot.data_mut()[0] = 1.0; // pixel 0 -> class 0
        onehot.data_mut()[3] = 1.0; // pixel 1 -> class 1
        let p = g.input(onehot);
        let l = g.cross_entropy(p, &[0, 1]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        // Two pixels with p(target) = 0.5 and 0.25.
        let p = g.input(Tensor::new(vec![1, 2, 1, 2], vec![0.5, 0.75, 0.5, 0.25]).unwrap());
        let l = g.cross_entropy(p, &[0, 1]).unwrap();
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::<f32>::new();
        let p = g.input(Tensor::full(&[1, 2, 1, 1], 0.5));
        assert!(matches!(g.cross_entropy(p, &[2]), Err(TensorError::Validation(_))));
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1, 2, 2, 2], &[3.0, 3.0, 3.0, 3.0, 0.0, 1.0, 1.0, 2.0]));
        let y = g.global_avg_pool_channels(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2]);
        assert_eq!(g.value(y).data(), &[3.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 7, 3, 5]));
        let p = g.softmax_channels(x).unwrap();
        let y = g.global_avg_pool_channels(p).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn fully_connected_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = g.param("w", Tensor::full(&[1, 3], 1.0));
        let b = g.param("b", t(&[1], &[1.0]));
        let y = g.fully_connected(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);

        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.param("eye", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = g.param("zb", Tensor::zeros(&[2]));
        let y = g.fully_connected(x, eye, zb).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let zw = g.param("zw", Tensor::zeros(&[3, 2]));
        let bias = g.param("bias", t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.fully_connected(x, zw, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

        let bad = g.param("bad", Tensor::zeros(&[3, 5]));
        assert!(g.fully_connected(x, bad, bias).is_err());
    }

    #[test]
    fn backward_basic_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::from_fn(&[2, 3], |i| i as f32));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0; 6]);

        let mut g = Graph::<f32>::new();
        let x = g.param("x", t(&[2], &[1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let unused = g.param("unused", Tensor::full(&[3], 9.0));
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, -4.0]);
        assert_eq!(g.grad(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(&[2], &[f32::MAX, f32::MAX]));
        assert!(matches!(g.add(x, x), Err(TensorError::NonFinite { op: "add" })));
        let mut g = Graph::<f32>::with_checked(false);
        let x = g.input(t(&[2], &[f32::MAX, f32::MAX]));
        assert!(g.add(x, x).is_ok());
    }

    #[test]
    fn concat_splits_gradient_back() {
        let mut g = Graph::<f32>::new();
        let a = g.param("a", Tensor::from_fn(&[2, 1, 2, 2], |i| i as f32));
        let b = g.param("b", Tensor::from_fn(&[2, 2, 2, 2], |i| -(i as f32)));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 2, 2]);
        assert_eq!(&g.value(c).data()[..6], &[0.0, 1.0, 2.0, 3.0, -0.0, -1.0]);
        let w = g.input(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32));
        let m = g.mul(c, w).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).data(), &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(&g.grad(b).data()[..4], &[4.0, 5.0, 6.0, 7.0]);
    }
}
