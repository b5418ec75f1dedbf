//! Synthetic lung B-scan phantoms with pixel-exact dense labels.
//!
//! Geometry per column `x` (image `H x W`):
//!
//! * pleura top `t(x) = round(depth * H + curvature * sin(2 pi x / W))`, band
//!   of `pleura_thickness` rows;
//! * A-line echo `k` (k = 2 ..= n_alines + 1) occupies rows
//!   `[k * t(x), k * t(x) + thickness)` in columns without B-line involvement;
//! * each B-line has a core of `width` columns centred on
//!   `center * (W - 1)` and a halo of `max(1, ceil(width / 2))` columns on each
//!   side; core and halo together are the B-line's zone.
//!
//! Labels: rows above the pleura are background; pleural pixels are the
//! unhealthy pleural line inside any zone and healthy elsewhere; below the
//! pleura, core columns are B-line, halo columns unhealthy region, other
//! columns A-line on echo rows and healthy region otherwise.
//!
//! Noise-free intensities (before depth attenuation `exp(-decay * y / H)`):
//! tissue above the pleura 0.30, pleura 0.95, A-line echo `k` `0.70 * 0.6^(k-2)`,
//! healthy region 0.08, B-line core 0.85, unhealthy region 0.35.
//!
//! Speckle multiplies every pixel by `max(0, 1 + s * sqrt(3) * (2u - 1))`,
//! `u` uniform from the sample's SplitMix64 speckle stream in row-major order,
//! then clamps to `[0, 1]`; the factor has mean 1 and standard deviation `s`.
//!
//! The diagnosis-to-geometry rules in [`gen_dataset`] are invented so that the
//! diagnostic task is learnable. They are not clinical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{dense, GreyImage, LabelMap, LabelSchema};
use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid phantom parameters: {0}")]
pub struct PhantomError(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    Normal,
    Pneumonia,
    #[serde(rename = "COVID-19")]
    Covid19,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::Normal, Diagnosis::Pneumonia, Diagnosis::Covid19];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Diagnosis::Normal => "Normal",
            Diagnosis::Pneumonia => "Pneumonia",
            Diagnosis::Covid19 => "COVID-19",
        }
    }

    /// Lower-case token used in sample ids.
    pub fn slug(self) -> &'static str {
        match self {
            Diagnosis::Normal => "normal",
            Diagnosis::Pneumonia => "pneumonia",
            Diagnosis::Covid19 => "covid19",
        }
    }
}

impl std::fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BLine {
    /// Core centre as a fraction of `W - 1`.
    pub center: f64,
    /// Core width in pixels.
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub height: usize,
    pub width: usize,
    /// Pleura depth as a fraction of the image height, in `(0.1, 0.5)`.
    pub pleura_depth: f64,
    pub pleura_thickness: usize,
    /// Amplitude in pixels of the pleura's sinusoidal curvature.
    pub curvature: f64,
    pub n_alines: usize,
    pub b_lines: Vec<BLine>,
    /// Speckle strength in `[0, 1]`.
    pub speckle: f64,
    /// Depth attenuation rate over the full image height.
    pub decay: f64,
    /// Skip speckle entirely.
    pub noise_free: bool,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            height: crate::DESK_IMAGE_SIZE.0,
            width: crate::DESK_IMAGE_SIZE.1,
            pleura_depth: 0.25,
            pleura_thickness: 3,
            curvature: 1.0,
            n_alines: 2,
            b_lines: Vec::new(),
            speckle: 0.25,
            decay: 0.5,
            noise_free: false,
        }
    }
}

const TISSUE: f64 = 0.30;
const PLEURA: f64 = 0.95;
const A_LINE_FIRST: f64 = 0.70;
const A_LINE_RATIO: f64 = 0.6;
const HEALTHY_REGION: f64 = 0.08;
const B_LINE: f64 = 0.85;
const UNHEALTHY_REGION: f64 = 0.35;

const SPECKLE_STREAM: u64 = 0x5EC1;

#[derive(Clone, Copy, PartialEq)]
enum Involvement {
    None,
    Halo,
    Core,
}

impl PhantomParams {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let err = |m: String| Err(PhantomError(m));
        if self.height < 8 || self.width < 8 {
            return err(format!("image {}x{} smaller than 8x8", self.height, self.width));
        }
        if !(self.pleura_depth > 0.1 && self.pleura_depth < 0.5) {
            return err(format!("pleura depth {} outside (0.1, 0.5)", self.pleura_depth));
        }
        if self.pleura_thickness == 0 {
            return err("pleura thickness must be at least 1 px".into());
        }
        if !(self.curvature.is_finite() && self.curvature >= 0.0) {
            return err(format!("curvature {} must be finite and non-negative", self.curvature));
        }
        if self.n_alines > 4 {
            return err(format!("{} A-lines requested, at most 4", self.n_alines));
        }
        for b in &self.b_lines {
            if b.width == 0 || b.width > self.width {
                return err(format!("B-line width {} outside 1..={}", b.width, self.width));
            }
            if !(0.0..=1.0).contains(&b.center) {
                return err(format!("B-line centre {} outside [0, 1]", b.center));
            }
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return err(format!("speckle {} outside [0, 1]", self.speckle));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return err(format!("decay {} must be finite and non-negative", self.decay));
        }
        let h = self.height as f64;
        if self.pleura_depth * h - self.curvature < 1.0 {
            return err("pleura reaches the top row".into());
        }
        if (self.pleura_depth * h + self.curvature).ceil() as usize + self.pleura_thickness >= self.height {
            return err("pleura does not fit inside the image".into());
        }
        Ok(())
    }

    fn pleura_top(&self, x: usize) -> usize {
        let phase = 2.0 * std::f64::consts::PI * x as f64 / self.width as f64;
        (self.pleura_depth * self.height as f64 + self.curvature * phase.sin()).round() as usize
    }

    fn column_involvement(&self) -> Vec<Involvement> {
        let mut inv = vec![Involvement::None; self.width];
        let w = self.width as isize;
        for b in &self.b_lines {
            let centre = b.center * (self.width - 1) as f64;
            let core_lo = (centre - (b.width as f64 - 1.0) / 2.0).round() as isize;
            let core_hi = core_lo + b.width as isize;
            let halo = b.width.div_ceil(2).max(1) as isize;
            for x in (core_lo - halo).max(0)..(core_hi + halo).min(w) {
                let here = if (core_lo..core_hi).contains(&x) { Involvement::Core } else { Involvement::Halo };
                let slot = &mut inv[x as usize];
                if *slot != Involvement::Core {
                    *slot = here;
                }
            }
        }
        inv
    }
}

/// One dataset record: grey image, dense labels and diagnosis, with the
/// grouping key (synthetic patient/video) used for cross-validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub grey: GreyImage,
    pub labels: LabelMap,
    pub diagnosis: Diagnosis,
    pub group_id: String,
    pub frame_index: usize,
    pub seed: u64,
    /// Transform that produced this sample from its source, if any.
    pub augment: Option<String>,
}

/// Render one phantom. `seed` only drives speckle.
pub fn gen_phantom(params: &PhantomParams, seed: u64) -> Result<(GreyImage, LabelMap), PhantomError> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let thick = params.pleura_thickness;
    let involvement = params.column_involvement();
    let mut labels = vec![dense::BACKGROUND; h * w];
    let mut grey = vec![0.0f64; h * w];
    for x in 0..w {
        let top = params.pleura_top(x);
        let inv = involvement[x];
        for y in 0..h {
            let (class, value) = if y < top {
                (dense::BACKGROUND, TISSUE)
            } else if y < top + thick {
                let class =
                    if inv == Involvement::None { dense::HEALTHY_PLEURAL_LINE } else { dense::UNHEALTHY_PLEURAL_LINE };
                (class, PLEURA)
            } else {
                match inv {
                    Involvement::Core => (dense::B_LINE, B_LINE),
                    Involvement::Halo => (dense::UNHEALTHY_REGION, UNHEALTHY_REGION),
                    Involvement::None => {
                        let echo = (2..params.n_alines + 2).find(|&k| (k * top..k * top + thick).contains(&y));
                        match echo {
                            Some(k) => (dense::A_LINE, A_LINE_FIRST * A_LINE_RATIO.powi(k as i32 - 2)),
                            None => (dense::HEALTHY_REGION, HEALTHY_REGION),
                        }
                    }
                }
            };
            labels[y * w + x] = class;
            grey[y * w + x] = value * (-params.decay * y as f64 / h as f64).exp();
        }
    }
    if !params.noise_free && params.speckle > 0.0 {
        let mut rng = SplitMix64::stream(seed, SPECKLE_STREAM);
        let amp = params.speckle * 3f64.sqrt();
        for v in &mut grey {
            let factor = (1.0 + amp * (2.0 * rng.next_f64() - 1.0)).max(0.0);
            *v *= factor;
        }
    }
    let grey = GreyImage::from_clamped(h, w, grey.into_iter().map(|v| v as f32).collect())
        .map_err(|e| PhantomError(e.to_string()))?;
    let labels = LabelMap::new(LabelSchema::Dense, h, w, labels).map_err(|e| PhantomError(e.to_string()))?;
    Ok((grey, labels))
}

/// What to generate: group (patient/video) counts per diagnosis in
/// [`Diagnosis::ALL`] order, frames per group drawn uniformly from an
/// inclusive range, and the shared base parameters (size, speckle, decay).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub groups: [usize; 3],
    pub frames_per_group: (usize, usize),
    pub base: PhantomParams,
    pub seed: u64,
}

impl DatasetSpec {
    /// A handful of small, quick samples.
    pub fn demo(seed: u64) -> Self {
        Self {
            groups: [2, 2, 2],
            frames_per_group: (2, 3),
            base: PhantomParams { height: 48, width: 64, pleura_thickness: 2, ..Default::default() },
            seed,
        }
    }

    /// Four patients with 38 frames each (one negative, three COVID-19
    /// positive): 152 samples.
    pub fn semantic_lung(seed: u64) -> Self {
        Self {
            groups: [1, 0, 3],
            frames_per_group: (38, 38),
            base: PhantomParams { height: 48, width: 64, pleura_thickness: 2, ..Default::default() },
            seed,
        }
    }
}

/// Non-overlapping B-line centres: one per equal slot of `[0.08, 0.92]`.
fn place_b_lines(rng: &mut SplitMix64, count: usize, width_frac: (f64, f64), image_width: usize, min_px: usize) -> Vec<BLine> {
    let (lo, hi) = (0.08, 0.92);
    let slot = (hi - lo) / count as f64;
    (0..count)
        .map(|i| {
            let start = lo + slot * i as f64;
            let center = rng.uniform(start + 0.3 * slot, start + 0.7 * slot);
            let width = ((image_width as f64 * rng.uniform(width_frac.0, width_frac.1)).round() as usize).max(min_px);
            BLine { center, width }
        })
        .collect()
}

fn group_params(base: &PhantomParams, diagnosis: Diagnosis, rng: &mut SplitMix64) -> PhantomParams {
    let mut p = base.clone();
    p.pleura_depth = rng.uniform(0.2, 0.28);
    p.curvature = rng.uniform(0.0, 0.02 * base.height as f64);
    match diagnosis {
        Diagnosis::Normal => {
            p.n_alines = rng.range_inclusive(2, 4);
            p.b_lines = Vec::new();
        }
        Diagnosis::Pneumonia => {
            p.n_alines = rng.range_inclusive(1, 3);
            let n = rng.range_inclusive(1, 2);
            p.b_lines = place_b_lines(rng, n, (0.02, 0.04), base.width, 1);
        }
        Diagnosis::Covid19 => {
            p.pleura_thickness = base.pleura_thickness * 2;
            p.n_alines = rng.range_inclusive(0, 2);
            let n = rng.range_inclusive(3, 5);
            p.b_lines = place_b_lines(rng, n, (0.05, 0.08), base.width, 2);
        }
    }
    p
}

/// Per-frame jitter of a group's geometry.
fn frame_params(group: &PhantomParams, rng: &mut SplitMix64) -> PhantomParams {
    let mut p = group.clone();
    p.pleura_depth = (p.pleura_depth + rng.uniform(-0.005, 0.005)).clamp(0.11, 0.49);
    for b in &mut p.b_lines {
        b.center = (b.center + rng.uniform(-0.01, 0.01)).clamp(0.0, 1.0);
    }
    p
}

/// Generate a grouped, labelled corpus. Groups are enumerated Normal first,
/// then Pneumonia, then COVID-19; group `g` draws from sub-stream `g` of the
/// master seed.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>, PhantomError> {
    spec.base.validate()?;
    let (fmin, fmax) = spec.frames_per_group;
    if fmin == 0 || fmin > fmax {
        return Err(PhantomError(format!("frames per group range {fmin}..={fmax} is empty")));
    }
    if spec.groups.iter().sum::<usize>() == 0 {
        return Err(PhantomError("at least one group is required".into()));
    }
    let mut samples = Vec::new();
    let mut ordinal = 0u64;
    for (diagnosis, &count) in Diagnosis::ALL.iter().zip(&spec.groups) {
        for g in 0..count {
            let mut rng = SplitMix64::stream(spec.seed, ordinal);
            ordinal += 1;
            let group = group_params(&spec.base, *diagnosis, &mut rng);
            group.validate()?;
            let frames = rng.range_inclusive(fmin, fmax);
            let group_id = format!("{}-g{g:03}", diagnosis.slug());
            for frame in 0..frames {
                let params = frame_params(&group, &mut rng);
                let seed = rng.next_u64();
                let (grey, labels) = gen_phantom(&params, seed)?;
                samples.push(Sample {
                    id: format!("{group_id}-f{frame:03}"),
                    grey,
                    labels,
                    diagnosis: *diagnosis,
                    group_id: group_id.clone(),
                    frame_index: frame,
                    seed,
                    augment: None,
                });
            }
        }
    }
    Ok(samples)
}
