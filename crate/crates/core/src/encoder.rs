//! Fully connected feature encoder with batch normalization.
//!
//! Layout: `[Linear -> BN -> ReLU] * hidden, Linear -> BN`. The final BN
//! produces the embedding and is the slot MetaBN takes over during
//! meta-test forwards.

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub use_metabn_last: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            embed_dim: 32,
            use_metabn_last: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Array2<f64>,
    /// `1 x out`
    pub bias: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array2::ones((1, width)),
            beta: Array2::zeros((1, width)),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }

    /// Exponential moving update; `stats.var` is the biased batch variance.
    pub fn track(&mut self, stats: &BatchStats) {
        let n = stats.batch_size as f64;
        let unbiased = &stats.var * (n / (n - 1.0));
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + unbiased * BN_MOMENTUM;
    }
}

/// Encoder parameters. Cloning gives a fully independent copy.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub linears: Vec<Linear>,
    pub norms: Vec<BatchNorm>,
}

impl EncoderParams {
    /// He-normal weights for ReLU layers, `1/fan_in` variance for the last.
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let last = widths.len() - 1;
        let mut linears = Vec::new();
        let mut norms = Vec::new();
        for (layer, &(fan_in, fan_out)) in widths.iter().enumerate() {
            let gain = if layer == last { 1.0 } else { 2.0 };
            let std = (gain / fan_in as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            });
            linears.push(Linear {
                weight,
                bias: Array2::zeros((1, fan_out)),
            });
            norms.push(BatchNorm::new(fan_out));
        }
        Ok(Self {
            config: config.clone(),
            linears,
            norms,
        })
    }

    /// Trainable tensors in a fixed order: per layer weight, bias, gamma, beta.
    pub fn trainable(&self) -> Vec<&Array2<f64>> {
        self.linears
            .iter()
            .zip(&self.norms)
            .flat_map(|(l, n)| [&l.weight, &l.bias, &n.gamma, &n.beta])
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.linears
            .iter_mut()
            .zip(self.norms.iter_mut())
            .flat_map(|(l, n)| [&mut l.weight, &mut l.bias, &mut n.gamma, &mut n.beta])
            .collect()
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn n_layers(&self) -> usize {
        self.linears.len()
    }

    pub fn bind(&self, g: &mut Graph) -> EncoderVars {
        let flat: Vec<Var> = self.trainable().into_iter().map(|t| g.param(t.clone())).collect();
        EncoderVars::from_flat(&flat)
    }

    pub fn bind_constant(&self, g: &mut Graph) -> EncoderVars {
        let flat: Vec<Var> = self.trainable().into_iter().map(|t| g.constant(t.clone())).collect();
        EncoderVars::from_flat(&flat)
    }

    /// Applies one batch's statistics per BN layer, in layer order.
    pub fn track_stats(&mut self, stats: &[BatchStats]) {
        for (norm, s) in self.norms.iter_mut().zip(stats) {
            norm.track(s);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    pub const PER_LAYER: usize = 4;

    pub fn from_flat(flat: &[Var]) -> Self {
        assert_eq!(flat.len() % Self::PER_LAYER, 0);
        Self {
            layers: flat
                .chunks(Self::PER_LAYER)
                .map(|c| LayerVars {
                    weight: c[0],
                    bias: c[1],
                    gamma: c[2],
                    beta: c[3],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias, l.gamma, l.beta])
            .collect()
    }

    pub fn last(&self) -> LayerVars {
        *self.layers.last().expect("encoder has at least one layer")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature batch mean and biased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub batch_size: usize,
}

/// Batch normalization with batch statistics.
pub fn batch_norm_train(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
    let (b, _) = g.shape(x);
    if b < 2 {
        return Err(Error::Batch(format!(
            "batch normalization needs at least 2 samples in train mode, got {b}"
        )));
    }
    let sum = g.sum_rows(x);
    let mean = g.scale(sum, 1.0 / b as f64);
    let centered = g.sub_row(x, mean);
    let sq = g.square(centered);
    let sq_sum = g.sum_rows(sq);
    let var = g.scale(sq_sum, 1.0 / b as f64);
    let stats = BatchStats {
        mean: g.value(mean).row(0).to_owned(),
        var: g.value(var).row(0).to_owned(),
        batch_size: b,
    };
    let shifted = g.add_scalar(var, BN_EPS);
    let std = g.sqrt(shifted);
    let inv = g.recip(std);
    let normalized = g.mul_row(centered, inv);
    let scaled = g.mul_row(normalized, gamma);
    Ok((g.add_row(scaled, beta), stats))
}

/// Batch normalization with frozen running statistics.
pub fn batch_norm_eval(g: &mut Graph, x: Var, gamma: Var, beta: Var, bn: &BatchNorm) -> Var {
    let mean = g.constant(bn.running_mean.clone().insert_axis(Axis(0)));
    let inv = g.constant(bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt()).insert_axis(Axis(0)));
    let centered = g.sub_row(x, mean);
    let normalized = g.mul_row(centered, inv);
    let scaled = g.mul_row(normalized, gamma);
    g.add_row(scaled, beta)
}

fn norm(
    g: &mut Graph,
    x: Var,
    layer: usize,
    vars: &LayerVars,
    params: &EncoderParams,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    match mode {
        Mode::Train => {
            let (y, stats) = batch_norm_train(g, x, vars.gamma, vars.beta)?;
            Ok((y, Some(stats)))
        }
        Mode::Eval => Ok((batch_norm_eval(g, x, vars.gamma, vars.beta, &params.norms[layer]), None)),
    }
}

fn linear(g: &mut Graph, x: Var, vars: &LayerVars) -> Var {
    let xw = g.matmul(x, vars.weight);
    g.add_row(xw, vars.bias)
}

/// Everything up to (not including) the final BN.
#[derive(Clone, Debug)]
pub struct Trunk {
    /// Input of the final normalization slot.
    pub last_input: Var,
    /// Batch statistics of the hidden BN layers (train mode only).
    pub stats: Vec<BatchStats>,
}

pub fn forward_trunk(g: &mut Graph, vars: &EncoderVars, params: &EncoderParams, x: Var, mode: Mode) -> Result<Trunk> {
    let width = g.shape(x).1;
    if width != params.config.input_dim {
        return Err(Error::Shape(format!(
            "encoder expects {} input features, got {width}",
            params.config.input_dim
        )));
    }
    let mut h = x;
    let mut stats = Vec::new();
    let last = vars.layers.len() - 1;
    for (layer, lv) in vars.layers[..last].iter().enumerate() {
        let z = linear(g, h, lv);
        let (n, s) = norm(g, z, layer, lv, params, mode)?;
        stats.extend(s);
        h = g.relu(n);
    }
    let last_input = linear(g, h, &vars.layers[last]);
    Ok(Trunk { last_input, stats })
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Raw embedding (output of the final BN).
    pub embedding: Var,
    pub last_input: Var,
    /// Batch statistics of every BN layer, in order (train mode only).
    pub stats: Vec<BatchStats>,
}

/// Plain forward pass; the final slot behaves as ordinary BN.
pub fn forward(g: &mut Graph, vars: &EncoderVars, params: &EncoderParams, x: Var, mode: Mode) -> Result<Forward> {
    let trunk = forward_trunk(g, vars, params, x, mode)?;
    let last = vars.last();
    let (embedding, s) = norm(g, trunk.last_input, vars.layers.len() - 1, &last, params, mode)?;
    let mut stats = trunk.stats;
    stats.extend(s);
    Ok(Forward {
        embedding,
        last_input: trunk.last_input,
        stats,
    })
}

/// Row-wise unit normalization.
pub fn l2_normalize(g: &mut Graph, x: Var) -> Var {
    let sq = g.square(x);
    let ss = g.sum_cols(sq);
    let ss = g.add_scalar(ss, NORM_EPS);
    let norm = g.sqrt(ss);
    let inv = g.recip(norm);
    g.mul_col(x, inv)
}

pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = (row.dot(&row) + NORM_EPS).sqrt();
        row /= n;
    }
    out
}

/// Raw embeddings as plain values (no gradient tracking).
pub fn embed(params: &EncoderParams, features: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let vars = params.bind_constant(&mut g);
    let x = g.constant(features.clone());
    let out = forward(&mut g, &vars, params, x, mode)?;
    Ok(g.value(out.embedding).clone())
}

/// Train-mode embeddings together with the batch statistics they produced.
pub fn embed_train(params: &EncoderParams, features: &Array2<f64>) -> Result<(Array2<f64>, Vec<BatchStats>)> {
    let mut g = Graph::new();
    let vars = params.bind_constant(&mut g);
    let x = g.constant(features.clone());
    let out = forward(&mut g, &vars, params, x, Mode::Train)?;
    Ok((g.value(out.embedding).clone(), out.stats))
}
