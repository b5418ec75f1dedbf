//! Dense and sparse label schemas, label maps, grey images and the
//! operations that move between them.
//!
//! Class indices are stored 0-based; everything written for people (PGM label
//! files, reports) uses 1-based numbering in schema order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("schema error: expected {expected} labels, got {found}")]
    Schema { expected: LabelSchema, found: LabelSchema },
    #[error("validation error: {0}")]
    Validation(String),
}

/// Which label set a map uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSchema {
    Dense,
    Sparse,
}

/// Dense class indices (0-based).
pub mod dense {
    pub const A_LINE: u8 = 0;
    pub const B_LINE: u8 = 1;
    pub const HEALTHY_PLEURAL_LINE: u8 = 2;
    pub const UNHEALTHY_PLEURAL_LINE: u8 = 3;
    pub const HEALTHY_REGION: u8 = 4;
    pub const UNHEALTHY_REGION: u8 = 5;
    pub const BACKGROUND: u8 = 6;
}

/// Sparse class indices (0-based).
pub mod sparse {
    pub const A_LINE: u8 = 0;
    pub const B_LINE: u8 = 1;
    pub const PLEURAL_LINE: u8 = 2;
    pub const BACKGROUND: u8 = 3;
}

const DENSE_NAMES: [&str; 7] = [
    "A-line",
    "B-line",
    "healthy pleural line",
    "unhealthy pleural line",
    "healthy region",
    "unhealthy region",
    "background",
];
const SPARSE_NAMES: [&str; 4] = ["A-line", "B-line", "pleural line", "background"];

/// Dense class -> sparse class. Both pleural-line classes collapse to the
/// pleural line; both regions fold into background.
pub const DENSE_TO_SPARSE: [u8; 7] = [
    sparse::A_LINE,
    sparse::B_LINE,
    sparse::PLEURAL_LINE,
    sparse::PLEURAL_LINE,
    sparse::BACKGROUND,
    sparse::BACKGROUND,
    sparse::BACKGROUND,
];

impl LabelSchema {
    pub fn n_classes(self) -> usize {
        self.class_names().len()
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            LabelSchema::Dense => &DENSE_NAMES,
            LabelSchema::Sparse => &SPARSE_NAMES,
        }
    }

    /// `(1-based index, name)` pairs in schema order.
    pub fn classes(self) -> impl Iterator<Item = (usize, &'static str)> {
        self.class_names().iter().enumerate().map(|(i, &n)| (i + 1, n))
    }

    pub fn background(self) -> u8 {
        match self {
            LabelSchema::Dense => dense::BACKGROUND,
            LabelSchema::Sparse => sparse::BACKGROUND,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelSchema::Dense => "dense",
            LabelSchema::Sparse => "sparse",
        }
    }
}

impl std::fmt::Display for LabelSchema {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LabelSchema {
    type Err = LabelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(LabelSchema::Dense),
            "sparse" => Ok(LabelSchema::Sparse),
            other => Err(LabelError::Validation(format!("unknown schema `{other}` (dense|sparse)"))),
        }
    }
}

/// Per-pixel class indices under a declared schema, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    schema: LabelSchema,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl LabelMap {
    pub fn new(schema: LabelSchema, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, LabelError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(LabelError::Validation(format!(
                "{} pixels for a {height}x{width} label map",
                pixels.len()
            )));
        }
        let n = schema.n_classes() as u8;
        if let Some(bad) = pixels.iter().find(|&&p| p >= n) {
            return Err(LabelError::Validation(format!(
                "class index {} invalid for {schema} schema (1..={n})",
                *bad as usize + 1
            )));
        }
        Ok(Self { schema, height, width, pixels })
    }

    pub fn filled(schema: LabelSchema, height: usize, width: usize, class: u8) -> Result<Self, LabelError> {
        Self::new(schema, height, width, vec![class; height * width])
    }

    pub fn schema(&self) -> LabelSchema {
        self.schema
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.schema.n_classes()];
        for &p in &self.pixels {
            h[p as usize] += 1;
        }
        h
    }

    pub fn flip_lr(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            pixels.extend(row.iter().rev());
        }
        Self { pixels, ..self.clone() }
    }
}

/// Grey intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GreyImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GreyImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, LabelError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(LabelError::Validation(format!("{} values for a {height}x{width} image", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LabelError::Validation(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Build from arbitrary values, clamping into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f32>) -> Result<Self, LabelError> {
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn flip_lr(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..self.clone() }
    }

    /// Multiply by `factor` and clamp to `[0, 1]`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self { data: self.data.iter().map(|&v| (v * factor).clamp(0.0, 1.0)).collect(), ..self.clone() }
    }
}

/// Collapse dense labels to the sparse schema.
pub fn remap_dense_to_sparse(map: &LabelMap) -> Result<LabelMap, LabelError> {
    if map.schema != LabelSchema::Dense {
        return Err(LabelError::Schema { expected: LabelSchema::Dense, found: map.schema });
    }
    Ok(LabelMap {
        schema: LabelSchema::Sparse,
        height: map.height,
        width: map.width,
        pixels: map.pixels.iter().map(|&p| DENSE_TO_SPARSE[p as usize]).collect(),
    })
}

/// Bring a map to `schema`: identity when it already matches, dense -> sparse
/// remap otherwise.
pub fn to_schema(map: &LabelMap, schema: LabelSchema) -> Result<LabelMap, LabelError> {
    match (map.schema, schema) {
        (a, b) if a == b => Ok(map.clone()),
        (LabelSchema::Dense, LabelSchema::Sparse) => remap_dense_to_sparse(map),
        (found, expected) => Err(LabelError::Schema { expected, found }),
    }
}

fn check_target((h, w): (usize, usize)) -> Result<(), LabelError> {
    if h < 2 || w < 2 {
        return Err(LabelError::Validation(format!("resize target {h}x{w} must be at least 2x2")));
    }
    Ok(())
}

/// Corner-aligned bilinear resize: output pixel `(y, x)` samples the source at
/// `(y * (H_in - 1) / (H_out - 1), x * (W_in - 1) / (W_out - 1))`.
pub fn resize_grey(img: &GreyImage, target: (usize, usize)) -> Result<GreyImage, LabelError> {
    check_target(target)?;
    let (oh, ow) = target;
    let (ih, iw) = img.dims();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = o as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (s.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, ih);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow, iw);
            let p = |yy, xx| img.get(yy, xx) as f64;
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    GreyImage::from_clamped(oh, ow, data)
}

/// Nearest-neighbour resize: output `(y, x)` takes source
/// `(floor((2y + 1) * H_in / (2 H_out)), floor((2x + 1) * W_in / (2 W_out)))`.
pub fn resize_labels(map: &LabelMap, target: (usize, usize)) -> Result<LabelMap, LabelError> {
    check_target(target)?;
    let (oh, ow) = target;
    let (ih, iw) = map.dims();
    let src = |o: usize, out: usize, inp: usize| ((2 * o + 1) * inp / (2 * out)).min(inp - 1);
    let mut pixels = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = src(y, oh, ih);
        for x in 0..ow {
            pixels.push(map.get(sy, src(x, ow, iw)));
        }
    }
    LabelMap::new(map.schema, oh, ow, pixels)
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self { height, width, pixels: vec![rgb; height * width] }
    }
}

/// Version of the class colour table below.
pub const PALETTE_VERSION: u32 = 1;

pub const APRICOT: [u8; 3] = [251, 185, 130];
pub const YELLOW: [u8; 3] = [255, 242, 0];
pub const GRAY: [u8; 3] = [148, 150, 152];
pub const NAVY_BLUE: [u8; 3] = [0, 110, 184];
pub const GREEN: [u8; 3] = [0, 166, 79];
pub const ORANGE: [u8; 3] = [245, 129, 55];
pub const AQUAMARINE: [u8; 3] = [0, 181, 190];
pub const CARNATION_PINK: [u8; 3] = [242, 130, 180];

/// Class colours in schema order.
pub fn palette(schema: LabelSchema) -> &'static [[u8; 3]] {
    const DENSE: [[u8; 3]; 7] = [YELLOW, GRAY, GREEN, ORANGE, AQUAMARINE, CARNATION_PINK, APRICOT];
    const SPARSE: [[u8; 3]; 4] = [YELLOW, GRAY, NAVY_BLUE, APRICOT];
    match schema {
        LabelSchema::Dense => &DENSE,
        LabelSchema::Sparse => &SPARSE,
    }
}

pub fn colorize(map: &LabelMap) -> RgbImage {
    let pal = palette(map.schema);
    RgbImage { height: map.height, width: map.width, pixels: map.pixels.iter().map(|&p| pal[p as usize]).collect() }
}

/// Inverse of [`colorize`]; fails on colours outside the schema's palette.
pub fn decolorize(img: &RgbImage, schema: LabelSchema) -> Result<LabelMap, LabelError> {
    let pal = palette(schema);
    let pixels = img
        .pixels
        .iter()
        .map(|rgb| {
            pal.iter()
                .position(|c| c == rgb)
                .map(|i| i as u8)
                .ok_or_else(|| LabelError::Validation(format!("colour {rgb:?} not in the {schema} palette")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    LabelMap::new(schema, img.height, img.width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_map(h: usize, w: usize, px: &[u8]) -> LabelMap {
        LabelMap::new(LabelSchema::Dense, h, w, px.to_vec()).unwrap()
    }

    #[test]
    fn schemas_enumerate_one_based() {
        let dense: Vec<_> = LabelSchema::Dense.classes().collect();
        assert_eq!(dense.len(), 7);
        assert_eq!(dense[0], (1, "A-line"));
        assert_eq!(dense[6], (7, "background"));
        let sparse: Vec<_> = LabelSchema::Sparse.classes().collect();
        assert_eq!(sparse, vec![(1, "A-line"), (2, "B-line"), (3, "pleural line"), (4, "background")]);
    }

    #[test]
    fn label_map_rejects_out_of_schema_class() {
        assert!(LabelMap::new(LabelSchema::Sparse, 1, 2, vec![0, 4]).is_err());
        assert!(LabelMap::new(LabelSchema::Dense, 1, 2, vec![0, 6]).is_ok());
    }

    #[test]
    fn remap_examples() {
        let bg = LabelMap::filled(LabelSchema::Dense, 3, 3, dense::BACKGROUND).unwrap();
        assert_eq!(
            remap_dense_to_sparse(&bg).unwrap(),
            LabelMap::filled(LabelSchema::Sparse, 3, 3, sparse::BACKGROUND).unwrap()
        );

        let m = dense_map(
            2,
            2,
            &[dense::HEALTHY_PLEURAL_LINE, dense::UNHEALTHY_PLEURAL_LINE, dense::HEALTHY_REGION, dense::B_LINE],
        );
        let s = remap_dense_to_sparse(&m).unwrap();
        assert_eq!(s.schema(), LabelSchema::Sparse);
        assert_eq!(s.pixels(), &[sparse::PLEURAL_LINE, sparse::PLEURAL_LINE, sparse::BACKGROUND, sparse::B_LINE]);
    }

    #[test]
    fn remap_rejects_sparse_input() {
        let s = LabelMap::filled(LabelSchema::Sparse, 2, 2, 0).unwrap();
        assert_eq!(
            remap_dense_to_sparse(&s),
            Err(LabelError::Schema { expected: LabelSchema::Dense, found: LabelSchema::Sparse })
        );
    }

    #[test]
    fn remap_fixes_sparse_valued_embedding() {
        // Embed sparse classes in their dense counterparts, then merge back.
        let embed = [dense::A_LINE, dense::B_LINE, dense::HEALTHY_PLEURAL_LINE, dense::BACKGROUND];
        let sparse_px = vec![0, 1, 2, 3, 3, 2, 1, 0];
        let s = LabelMap::new(LabelSchema::Sparse, 2, 4, sparse_px.clone()).unwrap();
        let d = dense_map(2, 4, &sparse_px.iter().map(|&p| embed[p as usize]).collect::<Vec<_>>());
        assert_eq!(remap_dense_to_sparse(&d).unwrap(), s);
    }

    #[test]
    fn remap_is_surjective_over_all_dense_classes() {
        let d = dense_map(1, 7, &[0, 1, 2, 3, 4, 5, 6]);
        let mut seen = remap_dense_to_sparse(&d).unwrap().pixels().to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn resize_grey_examples() {
        let img = GreyImage::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(resize_grey(&img, (2, 2)).unwrap(), img);
        let r = resize_grey(&img, (2, 3)).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);

        let c = GreyImage::new(3, 5, vec![0.3; 15]).unwrap();
        let r = resize_grey(&c, (7, 4)).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn resize_rejects_degenerate_target() {
        let img = GreyImage::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(resize_grey(&img, (1, 4)).is_err());
        let m = LabelMap::filled(LabelSchema::Dense, 2, 2, 0).unwrap();
        assert!(resize_labels(&m, (4, 0)).is_err());
    }

    #[test]
    fn resize_labels_examples() {
        let m = dense_map(2, 2, &[0, 1, 2, 3]);
        assert_eq!(resize_labels(&m, (2, 2)).unwrap(), m);
        let up = resize_labels(&m, (4, 4)).unwrap();
        #[rustfmt::skip]
        let want = [
            0, 0, 1, 1,
            0, 0, 1, 1,
            2, 2, 3, 3,
            2, 2, 3, 3,
        ];
        assert_eq!(up.pixels(), &want);
        let c = LabelMap::filled(LabelSchema::Sparse, 3, 3, 2).unwrap();
        assert!(resize_labels(&c, (5, 8)).unwrap().pixels().iter().all(|&p| p == 2));
    }

    #[test]
    fn colorize_examples() {
        let bg = LabelMap::filled(LabelSchema::Dense, 2, 3, dense::BACKGROUND).unwrap();
        assert_eq!(colorize(&bg), RgbImage::filled(2, 3, APRICOT));

        let all = dense_map(1, 7, &[0, 1, 2, 3, 4, 5, 6]);
        let mut colours = colorize(&all).pixels;
        colours.sort_unstable();
        colours.dedup();
        assert_eq!(colours.len(), 7);
    }

    #[test]
    fn decolorize_rejects_foreign_colour() {
        let img = RgbImage::filled(1, 1, [1, 2, 3]);
        assert!(decolorize(&img, LabelSchema::Dense).is_err());
    }

    fn arb_map(schema: LabelSchema) -> impl Strategy<Value = LabelMap> {
        let n = schema.n_classes() as u8;
        (1usize..9, 1usize..9).prop_flat_map(move |(h, w)| {
            proptest::collection::vec(0..n, h * w).prop_map(move |px| LabelMap::new(schema, h, w, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn remap_commutes_with_pixel_shuffle(m in arb_map(LabelSchema::Dense), seed in any::<u64>()) {
            let mut perm: Vec<usize> = (0..m.pixels().len()).collect();
            crate::rng::SplitMix64::new(seed).shuffle(&mut perm);
            let shuffle = |mm: &LabelMap| {
                let px = perm.iter().map(|&i| mm.pixels()[i]).collect();
                LabelMap::new(mm.schema(), mm.height(), mm.width(), px).unwrap()
            };
            prop_assert_eq!(remap_dense_to_sparse(&shuffle(&m)).unwrap(), shuffle(&remap_dense_to_sparse(&m).unwrap()));
        }

        #[test]
        fn resize_labels_never_invents_classes(m in arb_map(LabelSchema::Dense), h in 2usize..20, w in 2usize..20) {
            let r = resize_labels(&m, (h, w)).unwrap();
            let present = m.histogram();
            for &p in r.pixels() {
                prop_assert!(present[p as usize] > 0);
            }
        }

        #[test]
        fn colour_round_trip(m in arb_map(LabelSchema::Dense)) {
            prop_assert_eq!(decolorize(&colorize(&m), LabelSchema::Dense).unwrap(), m);
        }

        #[test]
        fn resize_grey_stays_in_unit_range(
            vals in proptest::collection::vec(0.0f32..=1.0, 12),
            h in 2usize..15, w in 2usize..15,
        ) {
            let img = GreyImage::new(3, 4, vals).unwrap();
            let r = resize_grey(&img, (h, w)).unwrap();
            prop_assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
