//! Finite-difference verification of the analytic gradients, run in `f64`.

use super::{Graph, Tensor, TensorError, Var};
use crate::rng::SplitMix64;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare analytic gradients of `build` against central differences.
///
/// `params` names and shapes the trainable leaves; they are filled with
/// uniform values in `[-1, 1)` drawn from `seed`. `build` receives them in the
/// same order and must return a scalar loss. Returns the largest relative
/// error over every parameter element.
pub fn grad_check<F>(build: F, params: &[(&str, &[usize])], seed: u64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if params.is_empty() {
        return Err(TensorError::NoParameters);
    }
    let mut rng = SplitMix64::stream(seed, 0);
    let mut values: Vec<Tensor<f64>> =
        params.iter().map(|(_, shape)| Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var), TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().zip(values).map(|((name, _), v)| g.param(*name, v.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };

    let (mut g, vars, loss) = eval(&values)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for e in 0..values[p].numel() {
            let orig = values[p].data()[e];
            let mut probe = |delta: f64| -> Result<f64, TensorError> {
                values[p].data_mut()[e] = orig + delta;
                let non_finite = || TensorError::GradCheckNonFinite { param: params[p].0.to_string() };
                let (g, _, loss) = eval(&values).map_err(|err| match err {
                    TensorError::NonFinite { .. } => non_finite(),
                    other => other,
                })?;
                let l = g.value(loss).data()[0];
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(non_finite())
                }
            };
            let plus = probe(STEP)?;
            let minus = probe(-STEP)?;
            values[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[p].data()[e], numeric));
        }
    }
    Ok(worst)
}

/// Layer graphs covered by the standard gradient-check suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv2d,
    TransposedConv2d,
    MaxPool2d,
    Relu,
    SoftmaxCrossEntropy,
    GlobalAvgPool,
    FullyConnected,
    ConvReluCrossEntropy,
}

impl Layer {
    pub const ALL: [Layer; 8] = [
        Layer::Conv2d,
        Layer::TransposedConv2d,
        Layer::MaxPool2d,
        Layer::Relu,
        Layer::SoftmaxCrossEntropy,
        Layer::GlobalAvgPool,
        Layer::FullyConnected,
        Layer::ConvReluCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Conv2d => "conv2d",
            Layer::TransposedConv2d => "transposed_conv2d",
            Layer::MaxPool2d => "maxpool2d",
            Layer::Relu => "relu",
            Layer::SoftmaxCrossEntropy => "softmax+cross_entropy",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::FullyConnected => "fully_connected",
            Layer::ConvReluCrossEntropy => "conv2d+relu+cross_entropy",
        }
    }

    /// Max relative gradient error of this layer's test graph for `seed`.
    pub fn check(self, seed: u64) -> Result<f64, TensorError> {
        let mut rng = SplitMix64::stream(seed, 1);
        // Fixed random projection so the scalar loss is not symmetric in its inputs.
        let mut readout = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.uniform(-1.0, 1.0));
        match self {
            Layer::Conv2d => {
                let r = readout(&[2, 3, 4, 5]);
                grad_check(
                    move |g, p| {
                        let y = g.conv2d(p[0], p[1], Some(p[2]), 1)?;
                        project(g, y, &r)
                    },
                    &[("input", &[2, 2, 4, 5]), ("kernel", &[3, 2, 3, 3]), ("bias", &[3])],
                    seed,
                )
            }
            Layer::TransposedConv2d => {
                let r = readout(&[2, 3, 4, 6]);
                grad_check(
                    move |g, p| {
                        let y = g.transposed_conv2d(p[0], p[1], Some(p[2]), 2)?;
                        project(g, y, &r)
                    },
                    &[("input", &[2, 2, 2, 3]), ("kernel", &[2, 3, 2, 2]), ("bias", &[3])],
                    seed,
                )
            }
            Layer::MaxPool2d => {
                let r = readout(&[2, 2, 2, 3]);
                grad_check(
                    move |g, p| {
                        let y = g.maxpool2d(p[0], 2)?;
                        project(g, y, &r)
                    },
                    &[("input", &[2, 2, 4, 6])],
                    seed,
                )
            }
            Layer::Relu => {
                let r = readout(&[3, 5]);
                grad_check(
                    move |g, p| {
                        let y = g.relu(p[0])?;
                        project(g, y, &r)
                    },
                    &[("input", &[3, 5])],
                    seed,
                )
            }
            Layer::SoftmaxCrossEntropy => {
                let targets: Vec<usize> = (0..2 * 3 * 2).map(|_| rng.below(4) as usize).collect();
                grad_check(
                    move |g, p| {
                        let probs = g.softmax_channels(p[0])?;
                        g.cross_entropy(probs, &targets)
                    },
                    &[("logits", &[2, 4, 3, 2])],
                    seed,
                )
            }
            Layer::GlobalAvgPool => {
                let r = readout(&[2, 3]);
                grad_check(
                    move |g, p| {
                        let y = g.global_avg_pool_channels(p[0])?;
                        project(g, y, &r)
                    },
                    &[("input", &[2, 3, 3, 2])],
                    seed,
                )
            }
            Layer::FullyConnected => {
                let r = readout(&[2, 3]);
                grad_check(
                    move |g, p| {
                        let y = g.fully_connected(p[0], p[1], p[2])?;
                        project(g, y, &r)
                    },
                    &[("input", &[2, 4]), ("weight", &[3, 4]), ("bias", &[3])],
                    seed,
                )
            }
            Layer::ConvReluCrossEntropy => {
                let targets: Vec<usize> = (0..2 * 4 * 4).map(|_| rng.below(3) as usize).collect();
                grad_check(
                    move |g, p| {
                        let y = g.conv2d(p[0], p[1], Some(p[2]), 1)?;
                        let y = g.relu(y)?;
                        let probs = g.softmax_channels(y)?;
                        g.cross_entropy(probs, &targets)
                    },
                    &[("input", &[2, 1, 4, 4]), ("kernel", &[3, 1, 3, 3]), ("bias", &[3])],
                    seed,
                )
            }
        }
    }
}

fn project(g: &mut Graph<f64>, y: Var, readout: &Tensor<f64>) -> Result<Var, TensorError> {
    let r = g.input(readout.clone());
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Worst error per layer over `seeds` consecutive seeds starting at `first_seed`.
pub fn run_suite(first_seed: u64, seeds: u64) -> Result<Vec<(Layer, f64)>, TensorError> {
    Layer::ALL
        .iter()
        .map(|&layer| {
            let mut worst = 0.0f64;
            for s in first_seed..first_seed + seeds {
                worst = worst.max(layer.check(s)?);
            }
            Ok((layer, worst))
        })
        .collect()
}
