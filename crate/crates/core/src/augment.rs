//! Left-right flips and grey-level scaling, the only augmentations used.
//!
//! [`expand_sixfold`] emits `{identity, flip} x {0.8, 1.0, 1.1}` per sample.

use thiserror::Error;

use crate::phantom::Sample;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("intensity scale {0} outside [0.8, 1.1]")]
pub struct ScaleOutOfRange(pub f32);

pub const SCALE_RANGE: (f32, f32) = (0.8, 1.1);
pub const SIXFOLD_SCALES: [f32; 3] = [0.8, 1.0, 1.1];

/// Mirror grey and labels about the vertical axis.
pub fn flip_lr(s: &Sample) -> Sample {
    Sample { grey: s.grey.flip_lr(), labels: s.labels.flip_lr(), ..s.clone() }
}

/// Multiply grey intensities by `factor`, clamping to `[0, 1]`. Labels are untouched.
pub fn intensity_scale(s: &Sample, factor: f32) -> Result<Sample, ScaleOutOfRange> {
    if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&factor) {
        return Err(ScaleOutOfRange(factor));
    }
    Ok(Sample { grey: s.grey.scaled(factor), ..s.clone() })
}

/// Provenance tag, e.g. `flip+scale0.8` or `scale1.0`.
pub fn tag(flipped: bool, factor: f32) -> String {
    let scale = format!("scale{factor:.1}");
    if flipped {
        format!("flip+{scale}")
    } else {
        scale
    }
}

/// Six variants per sample, in source order; each keeps the source's group
/// and diagnosis, gets id `<source id>.<tag>` and records its tag.
pub fn expand_sixfold(samples: &[Sample]) -> Vec<Sample> {
    let mut out = Vec::with_capacity(samples.len() * 6);
    for s in samples {
        for flipped in [false, true] {
            let base = if flipped { flip_lr(s) } else { s.clone() };
            for factor in SIXFOLD_SCALES {
                let mut v = intensity_scale(&base, factor).expect("fixed scales are in range");
                let t = tag(flipped, factor);
                v.id = format!("{}.{t}", s.id);
                v.augment = Some(t);
                out.push(v);
            }
        }
    }
    out
}
