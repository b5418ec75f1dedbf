//! U-Net segmenter and the pooled classification head built on its output.
//!
//! Encoder level `l` (0-based, `depth` levels) has `base * 2^l` channels and
//! applies two 3x3 conv+ReLU blocks (padding 1) before a 2x2 max-pool. The
//! bottleneck has `base * 2^depth` channels. Each decoder level upsamples with
//! a stride-2 transposed conv, concatenates the matching encoder output
//! (skip first, then upsampled) and applies two more 3x3 conv+ReLU blocks. A
//! 1x1 conv produces per-pixel class logits.
//!
//! The classifier runs softmax over those logits, averages each class channel
//! over the image and maps the resulting class-fraction vector to diagnosis
//! probabilities with one fully connected layer and a softmax.
//!
//! Weights are drawn uniformly from `[-sqrt(6/fan_in), sqrt(6/fan_in)]` (He
//! uniform) where `fan_in` is input channels times kernel area (input channels
//! alone for the transposed convs), in parameter order, from the SplitMix64
//! stream `(seed, 0x0417)` for the U-Net and `(seed, 0x4EAD)` for the head.
//! Biases start at zero. Without normalization layers, the narrower
//! `1/sqrt(fan_in)` bound shrinks activations about sixfold per ReLU layer and
//! a depth-3 network barely trains.

mod checkpoint;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_weights, save_weights, weights_from_bytes, weights_to_bytes, CHECKPOINT_MAGIC, FORMAT_VERSION};

use crate::labels::LabelSchema;
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint: unexpected EOF while reading {0}")]
    UnexpectedEof(&'static str),
    #[error("checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint: unsupported format version {0}")]
    Version(u32),
    #[error("checkpoint: malformed header: {0}")]
    Header(String),
    #[error("checkpoint: shape mismatch for parameter `{name}`: header {found:?}, architecture {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub n_seg_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 1, depth: 3, base_channels: 8, n_seg_classes: LabelSchema::Dense.n_classes() }
    }
}

impl UNetConfig {
    pub fn for_schema(schema: LabelSchema, depth: usize, base_channels: usize) -> Self {
        Self { in_channels: 1, depth, base_channels, n_seg_classes: schema.n_classes() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels != 1 {
            return Err(ModelError::Config(format!("in_channels must be 1, got {}", self.in_channels)));
        }
        if self.depth < 2 || self.depth > 8 {
            return Err(ModelError::Config(format!("depth {} outside 2..=8", self.depth)));
        }
        if self.base_channels == 0 || self.base_channels > 256 {
            return Err(ModelError::Config(format!("base_channels {} outside 1..=256", self.base_channels)));
        }
        if self.n_seg_classes < 2 {
            return Err(ModelError::Config(format!("need at least 2 segmentation classes, got {}", self.n_seg_classes)));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn param_count(&self) -> usize {
        param_layout(self, None).iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub n_seg_classes: usize,
    pub n_diag_classes: usize,
}

impl ClassifierConfig {
    pub fn for_unet(unet: &UNetConfig) -> Self {
        Self { n_seg_classes: unet.n_seg_classes, n_diag_classes: 3 }
    }
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec { name: format!("{prefix}.weight"), shape: vec![cout, cin, k, k], fan_in: cin * k * k });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![cout], fan_in: cin * k * k });
}

/// Every parameter of the architecture in canonical order.
pub(crate) fn param_layout(cfg: &UNetConfig, head: Option<&ClassifierConfig>) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let d = cfg.depth;
    for l in 0..d {
        let cin = if l == 0 { cfg.in_channels } else { cfg.channels(l - 1) };
        conv_specs(&mut specs, &format!("enc{l}.conv1"), cin, cfg.channels(l), 3);
        conv_specs(&mut specs, &format!("enc{l}.conv2"), cfg.channels(l), cfg.channels(l), 3);
    }
    conv_specs(&mut specs, "bottleneck.conv1", cfg.channels(d - 1), cfg.channels(d), 3);
    conv_specs(&mut specs, "bottleneck.conv2", cfg.channels(d), cfg.channels(d), 3);
    for l in (0..d).rev() {
        let (cin, cout) = (cfg.channels(l + 1), cfg.channels(l));
        specs.push(ParamSpec { name: format!("dec{l}.up.weight"), shape: vec![cin, cout, 2, 2], fan_in: cin });
        specs.push(ParamSpec { name: format!("dec{l}.up.bias"), shape: vec![cout], fan_in: cin });
        conv_specs(&mut specs, &format!("dec{l}.conv1"), 2 * cout, cout, 3);
        conv_specs(&mut specs, &format!("dec{l}.conv2"), cout, cout, 3);
    }
    conv_specs(&mut specs, "final", cfg.channels(0), cfg.n_seg_classes, 1);
    if let Some(h) = head {
        specs.extend(head_layout(h));
    }
    specs
}

fn head_layout(h: &ClassifierConfig) -> Vec<ParamSpec> {
    vec![
        ParamSpec { name: HEAD_WEIGHT.into(), shape: vec![h.n_diag_classes, h.n_seg_classes], fan_in: h.n_seg_classes },
        ParamSpec { name: HEAD_BIAS.into(), shape: vec![h.n_diag_classes], fan_in: h.n_seg_classes },
    ]
}

pub const HEAD_WEIGHT: &str = "head.fc.weight";
pub const HEAD_BIAS: &str = "head.fc.bias";

/// Whether `name` belongs to the classification head.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Named parameters plus the architecture they instantiate.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    unet: UNetConfig,
    head: Option<ClassifierConfig>,
    params: IndexMap<String, Tensor>,
}

impl PartialEq for ModelWeights {
    /// Bitwise comparison of every parameter.
    fn eq(&self, other: &Self) -> bool {
        self.unet == other.unet
            && self.head == other.head
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

impl ModelWeights {
    pub(crate) fn from_parts(
        unet: UNetConfig,
        head: Option<ClassifierConfig>,
        params: IndexMap<String, Tensor>,
    ) -> Result<Self, ModelError> {
        let layout = param_layout(&unet, head.as_ref());
        if layout.len() != params.len() {
            return Err(ModelError::Shape(format!(
                "{} parameters supplied, architecture has {}",
                params.len(),
                layout.len()
            )));
        }
        for spec in &layout {
            let t = params.get(&spec.name).ok_or_else(|| ModelError::Shape(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name: spec.name.clone(),
                    found: t.shape().to_vec(),
                    expected: spec.shape.clone(),
                });
            }
        }
        Ok(Self { unet, head, params })
    }

    pub fn unet_config(&self) -> &UNetConfig {
        &self.unet
    }

    pub fn classifier_config(&self) -> Option<&ClassifierConfig> {
        self.head.as_ref()
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let slot = self.params.get_mut(name).ok_or_else(|| ModelError::Usage(format!("no parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::ShapeMismatch {
                name: name.into(),
                found: value.shape().to_vec(),
                expected: slot.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Drop the classification head, if any.
    pub fn without_head(&self) -> Self {
        let params = self.params.iter().filter(|(k, _)| !is_head_param(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        Self { unet: self.unet, head: None, params }
    }
}

/// Fresh U-Net weights.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    cfg.validate()?;
    let mut rng = SplitMix64::stream(seed, 0x0417);
    let params = init_params(param_layout(cfg, None), &mut rng);
    Ok(ModelWeights { unet: *cfg, head: None, params })
}

fn init_params(layout: Vec<ParamSpec>, rng: &mut SplitMix64) -> IndexMap<String, Tensor> {
    layout
        .into_iter()
        .map(|spec| {
            let t = if spec.shape.len() == 1 {
                Tensor::zeros(&spec.shape)
            } else {
                let bound = (6.0 / spec.fan_in as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| rng.uniform(-bound, bound) as f32)
            };
            (spec.name, t)
        })
        .collect()
}

/// Add the pooled fully connected head. Segmentation weights are carried over untouched.
pub fn attach_cls_head(w: &ModelWeights, cc: &ClassifierConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    if w.head.is_some() {
        return Err(ModelError::Usage("model already has a classification head".into()));
    }
    if cc.n_seg_classes != w.unet.n_seg_classes {
        return Err(ModelError::Config(format!(
            "head expects {} segmentation classes, U-Net produces {}",
            cc.n_seg_classes, w.unet.n_seg_classes
        )));
    }
    if cc.n_diag_classes < 2 {
        return Err(ModelError::Config("need at least 2 diagnostic classes".into()));
    }
    let mut rng = SplitMix64::stream(seed, 0x4EAD);
    let mut params = w.params.clone();
    params.extend(init_params(head_layout(cc), &mut rng));
    Ok(ModelWeights { unet: w.unet, head: Some(*cc), params })
}

/// Bind parameters into the graph; frozen ones become constants.
struct Bound<'a> {
    w: &'a ModelWeights,
    vars: IndexMap<&'a str, Var>,
}

impl<'a> Bound<'a> {
    fn new(g: &mut Graph, w: &'a ModelWeights, freeze_seg: bool) -> Self {
        let vars = w
            .params
            .iter()
            .map(|(name, t)| {
                let v = if freeze_seg && !is_head_param(name) { g.input(t.clone()) } else { g.param(name.clone(), t.clone()) };
                (name.as_str(), v)
            })
            .collect();
        Self { w, vars }
    }

    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn conv(&self, g: &mut Graph, x: Var, prefix: &str, padding: usize) -> Result<Var, TensorError> {
        g.conv2d(x, self.var(&format!("{prefix}.weight")), Some(self.var(&format!("{prefix}.bias"))), padding)
    }

    fn conv_relu(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var, TensorError> {
        let y = self.conv(g, x, prefix, 1)?;
        g.relu(y)
    }

    fn unet(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let d = self.w.unet.depth;
        let mut skips = Vec::with_capacity(d);
        let mut x = x;
        for l in 0..d {
            x = self.conv_relu(g, x, &format!("enc{l}.conv1"))?;
            x = self.conv_relu(g, x, &format!("enc{l}.conv2"))?;
            skips.push(x);
            x = g.maxpool2d(x, 2)?;
        }
        x = self.conv_relu(g, x, "bottleneck.conv1")?;
        x = self.conv_relu(g, x, "bottleneck.conv2")?;
        for l in (0..d).rev() {
            let up = g.transposed_conv2d(x, self.var(&format!("dec{l}.up.weight")), Some(self.var(&format!("dec{l}.up.bias"))), 2)?;
            x = g.concat_channels(skips[l], up)?;
            x = self.conv_relu(g, x, &format!("dec{l}.conv1"))?;
            x = self.conv_relu(g, x, &format!("dec{l}.conv2"))?;
        }
        self.conv(g, x, "final", 0)
    }
}

fn check_batch(cfg: &UNetConfig, batch: &Tensor) -> Result<(), ModelError> {
    let (_, c, h, w) = batch.dims4("model input").map_err(|e| ModelError::Shape(e.to_string()))?;
    if c != cfg.in_channels {
        return Err(ModelError::Shape(format!("input has {c} channels, model expects {}", cfg.in_channels)));
    }
    let div = cfg.divisor();
    if h % div != 0 || w % div != 0 {
        return Err(ModelError::Shape(format!(
            "input {h}x{w} not divisible by {div} (2^depth for depth {})",
            cfg.depth
        )));
    }
    Ok(())
}

/// Per-pixel logits `N x n_seg_classes x H x W` for an `N x 1 x H x W` batch.
/// A head, if attached, is ignored.
pub fn seg_forward(g: &mut Graph, w: &ModelWeights, batch: &Tensor) -> Result<Var, ModelError> {
    check_batch(&w.unet, batch)?;
    let seg_only = w.without_head_view();
    let bound = Bound::new(g, &seg_only, false);
    let x = g.input(batch.clone());
    Ok(bound.unet(g, x)?)
}

/// Diagnosis probabilities `N x n_diag_classes`.
pub fn cls_forward(g: &mut Graph, w: &ModelWeights, batch: &Tensor) -> Result<Var, ModelError> {
    cls_forward_with(g, w, batch, false)
}

/// As [`cls_forward`]; with `freeze_seg` the U-Net weights enter the graph as
/// constants so only the head receives gradients.
pub fn cls_forward_with(g: &mut Graph, w: &ModelWeights, batch: &Tensor, freeze_seg: bool) -> Result<Var, ModelError> {
    if w.head.is_none() {
        return Err(ModelError::Usage("model has no classification head".into()));
    }
    check_batch(&w.unet, batch)?;
    let bound = Bound::new(g, w, freeze_seg);
    let x = g.input(batch.clone());
    let logits = bound.unet(g, x)?;
    let seg = g.softmax_channels(logits)?;
    let fractions = g.global_avg_pool_channels(seg)?;
    let scores = g.fully_connected(fractions, bound.var(HEAD_WEIGHT), bound.var(HEAD_BIAS))?;
    Ok(g.softmax_channels(scores)?)
}

impl ModelWeights {
    fn without_head_view(&self) -> ModelWeights {
        if self.head.is_none() {
            self.clone()
        } else {
            self.without_head()
        }
    }
}

/// Stack single-channel images into an `N x 1 x H x W` batch.
pub fn stack_images(images: &[&crate::labels::GreyImage]) -> Result<Tensor, ModelError> {
    let first = images.first().ok_or_else(|| ModelError::Usage("empty batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(ModelError::Shape(format!("batch mixes {:?} and {:?} images", (h, w), img.dims())));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UNetConfig {
        UNetConfig { in_channels: 1, depth: 2, base_channels: 4, n_seg_classes: 4 }
    }

    /// Independent count: conv(i, o, k) = o*i*k*k + o per layer of the topology.
    fn closed_form_count(cfg: &UNetConfig) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let c = |l: usize| cfg.base_channels * 2usize.pow(l as u32);
        let mut total = 0;
        for l in 0..cfg.depth {
            let cin = if l == 0 { cfg.in_channels } else { c(l - 1) };
            total += conv(cin, c(l), 3) + conv(c(l), c(l), 3);
            total += c(l + 1) * c(l) * 4 + c(l) + conv(2 * c(l), c(l), 3) + conv(c(l), c(l), 3);
        }
        total += conv(c(cfg.depth - 1), c(cfg.depth), 3) + conv(c(cfg.depth), c(cfg.depth), 3);
        total + conv(c(0), cfg.n_seg_classes, 1)
    }

    #[test]
    fn depth2_base4_parameter_count() {
        // 188 + 880 (encoder) + 3488 (bottleneck) + 2264 + 572 (decoder) + 20 (final).
        assert_eq!(build_unet(&small(), 0).unwrap().param_count(), 7412);
        assert_eq!(small().param_count(), 7412);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for depth in 2..5 {
            for base in [1, 3, 8] {
                for classes in [4, 7] {
                    let cfg = UNetConfig { in_channels: 1, depth, base_channels: base, n_seg_classes: classes };
                    assert_eq!(build_unet(&cfg, 1).unwrap().param_count(), closed_form_count(&cfg));
                }
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(build_unet(&small(), 9).unwrap(), build_unet(&small(), 9).unwrap());
        assert_ne!(build_unet(&small(), 9).unwrap(), build_unet(&small(), 10).unwrap());
    }

    #[test]
    fn rejects_invalid_config() {
        let bad = UNetConfig { depth: 1, ..small() };
        assert!(matches!(build_unet(&bad, 0), Err(ModelError::Config(_))));
        let bad = UNetConfig { n_seg_classes: 1, ..small() };
        assert!(build_unet(&bad, 0).is_err());
    }

    #[test]
    fn seg_forward_preserves_spatial_dims() {
        let w = build_unet(&small(), 0).unwrap();
        for (h, wd) in [(8, 8), (12, 16), (4, 20)] {
            let mut g = Graph::new();
            let batch = Tensor::from_fn(&[2, 1, h, wd], |i| (i % 7) as f32 / 7.0);
            let y = seg_forward(&mut g, &w, &batch).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 4, h, wd]);
        }
    }

    #[test]
    fn seg_forward_rejects_indivisible_input() {
        let w = build_unet(&small(), 0).unwrap();
        let mut g = Graph::new();
        let err = seg_forward(&mut g, &w, &Tensor::zeros(&[1, 1, 6, 8])).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn zero_final_layer_gives_uniform_softmax() {
        let mut w = build_unet(&small(), 0).unwrap();
        w.set("final.weight", Tensor::zeros(&[4, 4, 1, 1])).unwrap();
        w.set("final.bias", Tensor::zeros(&[4])).unwrap();
        let mut g = Graph::new();
        let y = seg_forward(&mut g, &w, &Tensor::from_fn(&[1, 1, 8, 8], |i| i as f32 / 64.0)).unwrap();
        let p = g.softmax_channels(y).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn seg_forward_is_bit_deterministic() {
        let w = build_unet(&small(), 3).unwrap();
        let batch = Tensor::from_fn(&[2, 1, 8, 12], |i| ((i * 31) % 17) as f32 / 17.0);
        let run = || {
            let mut g = Graph::new();
            let y = seg_forward(&mut g, &w, &batch).unwrap();
            g.value(y).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn head_widths_follow_schema() {
        for (schema, width) in [(LabelSchema::Dense, 7), (LabelSchema::Sparse, 4)] {
            let w = build_unet(&UNetConfig::for_schema(schema, 2, 2), 0).unwrap();
            let cc = ClassifierConfig::for_unet(w.unet_config());
            let h = attach_cls_head(&w, &cc, 0).unwrap();
            assert_eq!(h.get(HEAD_WEIGHT).unwrap().shape(), &[3, width]);
        }
    }

    #[test]
    fn attach_keeps_seg_weights_and_refuses_second_head() {
        let w = build_unet(&small(), 5).unwrap();
        let h = attach_cls_head(&w, &ClassifierConfig::for_unet(&small()), 1).unwrap();
        assert_eq!(h.without_head(), w);
        assert!(matches!(attach_cls_head(&h, &ClassifierConfig::for_unet(&small()), 1), Err(ModelError::Usage(_))));
        let mismatched = ClassifierConfig { n_seg_classes: 7, n_diag_classes: 3 };
        assert!(attach_cls_head(&w, &mismatched, 1).is_err());
    }

    #[test]
    fn cls_forward_requires_head() {
        let w = build_unet(&small(), 5).unwrap();
        let mut g = Graph::new();
        assert!(matches!(cls_forward(&mut g, &w, &Tensor::zeros(&[1, 1, 8, 8])), Err(ModelError::Usage(_))));
    }

    #[test]
    fn zero_head_gives_uniform_diagnosis() {
        let w = build_unet(&small(), 5).unwrap();
        let mut h = attach_cls_head(&w, &ClassifierConfig::for_unet(&small()), 1).unwrap();
        h.set(HEAD_WEIGHT, Tensor::zeros(&[3, 4])).unwrap();
        h.set(HEAD_BIAS, Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let p = cls_forward(&mut g, &h, &Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 5) as f32 / 5.0)).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn selecting_head_gives_softmax_of_class_areas() {
        // A zero final conv with a large bias on class 3 makes every pixel
        // class 3, so the head sees area fractions (0, 0, 0, 1).
        let w = build_unet(&small(), 5).unwrap();
        let mut h = attach_cls_head(&w, &ClassifierConfig::for_unet(&small()), 1).unwrap();
        h.set("final.weight", Tensor::zeros(&[4, 4, 1, 1])).unwrap();
        h.set("final.bias", Tensor::new(vec![4], vec![0.0, 0.0, 0.0, 60.0]).unwrap()).unwrap();
        // Rows select seg channels 3, 0 and 1.
        #[rustfmt::skip]
        let select = Tensor::new(vec![3, 4], vec![
            0.0, 0.0, 0.0, 1.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
        ]).unwrap();
        h.set(HEAD_WEIGHT, select).unwrap();
        h.set(HEAD_BIAS, Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let p = cls_forward(&mut g, &h, &Tensor::zeros(&[1, 1, 8, 8])).unwrap();
        // Area fractions are (0, 0, 0, 1) up to e^-60, so scores are (1, 0, 0).
        let e = std::f64::consts::E;
        let want = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (got, want) in g.value(p).data().iter().zip(want) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn cls_rows_are_independent_of_batch_order() {
        let w = build_unet(&small(), 2).unwrap();
        let h = attach_cls_head(&w, &ClassifierConfig::for_unet(&small()), 2).unwrap();
        let a = Tensor::from_fn(&[1, 1, 8, 8], |i| (i % 9) as f32 / 9.0);
        let b = Tensor::from_fn(&[1, 1, 8, 8], |i| (i % 4) as f32 / 4.0);
        let both = |x: &Tensor, y: &Tensor| {
            let data = [x.data(), y.data()].concat();
            let mut g = Graph::new();
            let p = cls_forward(&mut g, &h, &Tensor::new(vec![2, 1, 8, 8], data).unwrap()).unwrap();
            g.value(p).data().to_vec()
        };
        let ab = both(&a, &b);
        let ba = both(&b, &a);
        for i in 0..3 {
            assert!((ab[i] - ba[3 + i]).abs() < 1e-6);
            assert!((ab[3 + i] - ba[i]).abs() < 1e-6);
        }
    }
}
