//! Feedforward network predicting the currents at `k+1` from observations at `k`.
//!
//! Inputs are standardized per feature and targets per channel; the network
//! is trained on the mean squared error of the standardized targets.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{split_indices, Dataset, Sample};
use crate::error::{Error, Result};
use crate::NUM_SUBSETS;

/// Observation fed to the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub i_d: f64,
    pub i_q: f64,
    pub sin_eps: f64,
    pub cos_eps: f64,
    pub n: u8,
    pub n_prev: u8,
}

impl From<&Sample> for Observation {
    fn from(s: &Sample) -> Self {
        let (sin_eps, cos_eps) = s.eps_k.sin_cos();
        Self {
            i_d: s.i_d_k,
            i_q: s.i_q_k,
            sin_eps,
            cos_eps,
            n: s.n_k,
            n_prev: s.n_k_prev,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Id,
    Iq,
    SinEps,
    CosEps,
    /// One-hot encoding of `n_k` over seven channels.
    OneHotN,
    /// One-hot encoding of `n_{k-1}` over seven channels.
    OneHotNPrev,
}

impl Feature {
    pub fn width(self) -> usize {
        match self {
            Feature::OneHotN | Feature::OneHotNPrev => NUM_SUBSETS,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Id => "i_d",
            Feature::Iq => "i_q",
            Feature::SinEps => "sin_eps",
            Feature::CosEps => "cos_eps",
            Feature::OneHotN => "onehot_n",
            Feature::OneHotNPrev => "onehot_n_prev",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "i_d" => Feature::Id,
            "i_q" => Feature::Iq,
            "sin_eps" => Feature::SinEps,
            "cos_eps" => Feature::CosEps,
            "onehot_n" => Feature::OneHotN,
            "onehot_n_prev" => Feature::OneHotNPrev,
            other => return Err(Error::Config(format!("unknown network feature `{other}`"))),
        })
    }

    /// The default 18-wide input layout.
    pub fn default_set() -> Vec<Feature> {
        vec![
            Feature::Id,
            Feature::Iq,
            Feature::SinEps,
            Feature::CosEps,
            Feature::OneHotN,
            Feature::OneHotNPrev,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Per-feature standardization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_mean: [f64; 2],
    pub target_scale: [f64; 2],
}

impl Normalization {
    pub fn identity(width: usize) -> Self {
        Self {
            input_mean: vec![0.0; width],
            input_scale: vec![1.0; width],
            target_mean: [0.0; 2],
            target_scale: [1.0; 2],
        }
    }

    /// Mean and population standard deviation; constant columns get scale 1.
    pub fn fit(features: &[f64], targets: &[[f64; 2]], width: usize) -> Self {
        let rows = targets.len().max(1) as f64;
        let mut norm = Self::identity(width);
        for j in 0..width {
            let col = features.iter().skip(j).step_by(width);
            let mean = col.clone().sum::<f64>() / rows;
            let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
            norm.input_mean[j] = mean;
            norm.input_scale[j] = scale_of(var);
        }
        for c in 0..2 {
            let mean = targets.iter().map(|t| t[c]).sum::<f64>() / rows;
            let var = targets.iter().map(|t| (t[c] - mean).powi(2)).sum::<f64>() / rows;
            norm.target_mean[c] = mean;
            norm.target_scale[c] = scale_of(var);
        }
        norm
    }

    pub fn normalize_input(&self, raw: &mut [f64]) {
        for ((v, m), s) in raw.iter_mut().zip(&self.input_mean).zip(&self.input_scale) {
            *v = (*v - m) / s;
        }
    }

    pub fn denormalize_input(&self, z: &mut [f64]) {
        for ((v, m), s) in z.iter_mut().zip(&self.input_mean).zip(&self.input_scale) {
            *v = *v * s + m;
        }
    }

    pub fn normalize_target(&self, t: [f64; 2]) -> [f64; 2] {
        [
            (t[0] - self.target_mean[0]) / self.target_scale[0],
            (t[1] - self.target_mean[1]) / self.target_scale[1],
        ]
    }

    pub fn denormalize_target(&self, t: [f64; 2]) -> [f64; 2] {
        [
            t[0] * self.target_scale[0] + self.target_mean[0],
            t[1] * self.target_scale[1] + self.target_mean[1],
        ]
    }

    fn validate(&self, width: usize) -> Result<()> {
        if self.input_mean.len() != width || self.input_scale.len() != width {
            return Err(Error::Config(format!(
                "normalization width {} does not match input width {width}",
                self.input_mean.len()
            )));
        }
        let scales = self.input_scale.iter().chain(&self.target_scale);
        if scales.clone().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("normalization scales must be positive".into()));
        }
        Ok(())
    }
}

fn scale_of(var: f64) -> f64 {
    let sd = var.sqrt();
    if sd > 1e-12 {
        sd
    } else {
        1.0
    }
}

/// Network layout plus normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub features: Vec<Feature>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub norm: Normalization,
}

impl MlpSpec {
    pub fn new(features: Vec<Feature>, hidden: Vec<usize>, activation: Activation) -> Self {
        let width = features.iter().map(|f| f.width()).sum();
        Self {
            features,
            hidden,
            activation,
            norm: Normalization::identity(width),
        }
    }

    pub fn input_width(&self) -> usize {
        self.features.iter().map(|f| f.width()).sum()
    }

    /// Layer widths from input to the two outputs.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(2);
        w
    }

    /// Raw (unnormalized) feature vector for `obs`.
    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.input_width());
        for f in &self.features {
            match f {
                Feature::Id => out.push(obs.i_d),
                Feature::Iq => out.push(obs.i_q),
                Feature::SinEps => out.push(obs.sin_eps),
                Feature::CosEps => out.push(obs.cos_eps),
                Feature::OneHotN => one_hot(&mut out, obs.n),
                Feature::OneHotNPrev => one_hot(&mut out, obs.n_prev),
            }
        }
        out
    }
}

fn one_hot(out: &mut Vec<f64>, n: u8) {
    out.extend((1..=NUM_SUBSETS as u8).map(|k| if k == n { 1.0 } else { 0.0 }));
}

/// Dense layer `z = W a + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Forward-pass cache for backpropagation.
struct Cache {
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

impl Network {
    /// Glorot-uniform weights and zero biases.
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-limit..limit)),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self { spec, layers }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weights: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Self { spec, layers }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.spec.widths();
        if self.layers.len() != widths.len() - 1 {
            return Err(Error::Config("layer count does not match the network spec".into()));
        }
        for (l, w) in self.layers.iter().zip(widths.windows(2)) {
            if l.weights.shape() != (w[1], w[0]) || l.bias.len() != w[1] {
                return Err(Error::Config(format!(
                    "layer shape {:?} does not match widths {w:?}",
                    l.weights.shape()
                )));
            }
        }
        self.spec.norm.validate(self.spec.input_width())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flattened parameters, layer by layer, weights (column-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "parameter vector length");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }

    fn run(&self, x: &DMatrix<f64>) -> Cache {
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = vec![x.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * post.last().expect("input present");
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            let a = if i == last {
                z.clone()
            } else {
                z.map(|v| self.spec.activation.apply(v))
            };
            pre.push(z);
            post.push(a);
        }
        Cache { pre, post }
    }

    /// Outputs in normalized target units for a normalized input batch (columns).
    pub fn forward_normalized(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.run(x).post.pop().expect("output present")
    }

    /// Prediction in amperes from a raw feature vector.
    pub fn forward_features(&self, raw: &[f64]) -> Result<[f64; 2]> {
        if raw.len() != self.spec.input_width() {
            return Err(Error::Config(format!(
                "feature width {} does not match network input width {}",
                raw.len(),
                self.spec.input_width()
            )));
        }
        let mut x = raw.to_vec();
        self.spec.norm.normalize_input(&mut x);
        let y = self.forward_normalized(&DMatrix::from_column_slice(x.len(), 1, &x));
        Ok(self.spec.norm.denormalize_target([y[0], y[1]]))
    }

    pub fn forward(&self, obs: &Observation) -> Result<[f64; 2]> {
        self.forward_features(&self.spec.encode(obs))
    }

    /// Loss `sum ||y_hat - y||^2 / (2 B)` over a normalized batch and its
    /// gradient in [`Network::params`] order.
    pub fn loss_and_gradient(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<f64>) {
        let cache = self.run(x);
        let batch = x.ncols().max(1) as f64;
        let err = cache.post.last().expect("output present") - y;
        let loss = err.norm_squared() / (2.0 * batch);
        let mut delta = err / batch;
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let gw = &delta * cache.post[l].transpose();
            let gb = delta.column_sum();
            if l > 0 {
                let mut back = self.layers[l].weights.transpose() * &delta;
                let act = self.spec.activation;
                back.zip_zip_apply(&cache.pre[l - 1], &cache.post[l], |b, z, a| {
                    *b *= act.derivative(z, a)
                });
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads {
            flat.extend(gw.iter());
            flat.extend(gb.iter());
        }
        (loss, flat)
    }

    pub fn loss(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let out = self.forward_normalized(x);
        (out - y).norm_squared() / (2.0 * x.ncols().max(1) as f64)
    }

    /// Normalized design matrices (features x samples, 2 x samples).
    pub fn batch_matrices<'a, I>(&self, samples: I) -> (DMatrix<f64>, DMatrix<f64>)
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let width = self.spec.input_width();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in samples {
            let mut raw = self.spec.encode(&Observation::from(s));
            self.spec.norm.normalize_input(&mut raw);
            xs.extend(raw);
            ys.extend(self.spec.norm.normalize_target([s.i_d_k1, s.i_q_k1]));
        }
        let cols = ys.len() / 2;
        (
            DMatrix::from_column_slice(width, cols, &xs),
            DMatrix::from_column_slice(2, cols, &ys),
        )
    }

    // --- flat text format ------------------------------------------------

    pub fn to_text(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = f64>| v.map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(",");
        let mut out = String::from("mlp_network v1\n");
        let names: Vec<_> = self.spec.features.iter().map(|f| f.name()).collect();
        let _ = writeln!(out, "features {}", names.join(","));
        let _ = writeln!(out, "activation {}", self.spec.activation.name());
        let widths: Vec<String> = self.spec.widths().iter().map(|w| w.to_string()).collect();
        let _ = writeln!(out, "widths {}", widths.join(","));
        let n = &self.spec.norm;
        let _ = writeln!(out, "input_mean {}", join(&mut n.input_mean.iter().copied()));
        let _ = writeln!(out, "input_scale {}", join(&mut n.input_scale.iter().copied()));
        let _ = writeln!(out, "target_mean {}", join(&mut n.target_mean.iter().copied()));
        let _ = writeln!(out, "target_scale {}", join(&mut n.target_scale.iter().copied()));
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "layer {} weight {} {}", i + 1, l.weights.nrows(), l.weights.ncols());
            for r in l.weights.row_iter() {
                let _ = writeln!(out, "{}", join(&mut r.iter().copied()));
            }
            let _ = writeln!(out, "layer {} bias {}", i + 1, l.bias.len());
            let _ = writeln!(out, "{}", join(&mut l.bias.iter().copied()));
        }
        out
    }

    /// Parses one network block, returning it and the number of lines consumed.
    pub fn parse_block(lines: &[&str], first_line: usize) -> Result<(Self, usize)> {
        let mut pos = 0usize;
        let mut next = |what: &str| -> Result<(usize, &str)> {
            let line = lines.get(pos).copied().ok_or_else(|| Error::Parse {
                line: (first_line + pos) as u64,
                message: format!("unexpected end of network block, expected {what}"),
            })?;
            pos += 1;
            Ok((first_line + pos - 1, line.trim()))
        };
        let err = |line: usize, message: String| Error::Parse {
            line: line as u64,
            message,
        };
        let keyed = |line: (usize, &str), key: &str| -> Result<String> {
            line.1
                .strip_prefix(key)
                .map(|r| r.trim().to_string())
                .ok_or_else(|| err(line.0, format!("expected `{key} ...`, got `{}`", line.1)))
        };
        let floats = |line: usize, s: &str| -> Result<Vec<f64>> {
            s.split(',')
                .filter(|v| !v.trim().is_empty())
                .map(|v| v.trim().parse::<f64>().map_err(|e| err(line, format!("bad number `{v}`: {e}"))))
                .collect()
        };

        let header = next("header")?;
        if header.1 != "mlp_network v1" {
            return Err(err(header.0, format!("expected `mlp_network v1`, got `{}`", header.1)));
        }
        let features = keyed(next("features")?, "features")?
            .split(',')
            .map(Feature::parse)
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::parse(&keyed(next("activation")?, "activation")?)?;
        let wl = next("widths")?;
        let widths: Vec<usize> = keyed(wl, "widths")?
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|e| err(wl.0, format!("bad width: {e}"))))
            .collect::<Result<_>>()?;
        if widths.len() < 2 || *widths.last().expect("non-empty") != 2 {
            return Err(err(wl.0, "network must end in two outputs".into()));
        }
        let mut spec = MlpSpec::new(features, widths[1..widths.len() - 1].to_vec(), activation);
        if spec.input_width() != widths[0] {
            return Err(err(wl.0, "input width does not match the feature list".into()));
        }
        let mut vec_line = |key: &str| -> Result<Vec<f64>> {
            let l = next(key)?;
            floats(l.0, &keyed(l, key)?)
        };
        let input_mean = vec_line("input_mean")?;
        let input_scale = vec_line("input_scale")?;
        let tm = vec_line("target_mean")?;
        let ts = vec_line("target_scale")?;
        if tm.len() != 2 || ts.len() != 2 {
            return Err(err(first_line, "target normalization needs two entries".into()));
        }
        spec.norm = Normalization {
            input_mean,
            input_scale,
            target_mean: [tm[0], tm[1]],
            target_scale: [ts[0], ts[1]],
        };
        let mut net = Network::zeros(spec);
        for i in 0..net.layers.len() {
            let (rows, cols) = net.layers[i].weights.shape();
            let hl = next("layer weight header")?;
            let expect = format!("layer {} weight {} {}", i + 1, rows, cols);
            if hl.1 != expect {
                return Err(err(hl.0, format!("expected `{expect}`, got `{}`", hl.1)));
            }
            for r in 0..rows {
                let l = next("weight row")?;
                let vals = floats(l.0, l.1)?;
                if vals.len() != cols {
                    return Err(err(l.0, format!("expected {cols} weights, got {}", vals.len())));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    net.layers[i].weights[(r, c)] = v;
                }
            }
            let bl = next("layer bias header")?;
            let expect = format!("layer {} bias {}", i + 1, rows);
            if bl.1 != expect {
                return Err(err(bl.0, format!("expected `{expect}`, got `{}`", bl.1)));
            }
            let l = next("bias row")?;
            let vals = floats(l.0, l.1)?;
            if vals.len() != rows {
                return Err(err(l.0, format!("expected {rows} biases, got {}", vals.len())));
            }
            net.layers[i].bias = DVector::from_vec(vals);
        }
        net.validate()?;
        Ok((net, pos))
    }
}

/// Single conditioned network or one network per elementary vector.
#[derive(Debug, Clone, PartialEq)]
pub enum MlpNetworks {
    Single(Network),
    PerVector(Vec<Network>),
}

/// Network predictor bound to a controller cycle time.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub t_s: f64,
    pub networks: MlpNetworks,
}

impl MlpModel {
    pub fn predict(&self, obs: &Observation) -> Result<(f64, f64)> {
        let net = match &self.networks {
            MlpNetworks::Single(net) => net,
            MlpNetworks::PerVector(nets) => nets.get(usize::from(obs.n).wrapping_sub(1)).ok_or_else(|| {
                Error::Config(format!("network ensemble lacks a sub-model for n = {}", obs.n))
            })?,
        };
        let [d, q] = net.forward(obs)?;
        Ok((d, q))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("t_s,{:.16e}\n", self.t_s);
        match &self.networks {
            MlpNetworks::Single(net) => {
                out.push_str("networks,single\n");
                out.push_str(&net.to_text());
            }
            MlpNetworks::PerVector(nets) => {
                let _ = writeln!(out, "networks,per_vector,{}", nets.len());
                for net in nets {
                    out.push_str(&net.to_text());
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        // line numbers are reported relative to the full model file
        let lines: Vec<&str> = text.lines().collect();
        let err = |line: usize, message: String| Error::Parse {
            line: line as u64,
            message,
        };
        let t_s: f64 = lines
            .first()
            .and_then(|l| l.strip_prefix("t_s,"))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| err(2, "expected `t_s,<seconds>`".into()))?;
        let kind = lines.get(1).copied().unwrap_or_default().trim();
        let mut pos = 2;
        let parse_one = |pos: &mut usize| -> Result<Network> {
            let (net, used) = Network::parse_block(&lines[*pos..], *pos + 2)?;
            *pos += used;
            Ok(net)
        };
        let networks = if kind == "networks,single" {
            MlpNetworks::Single(parse_one(&mut pos)?)
        } else if let Some(count) = kind.strip_prefix("networks,per_vector,") {
            let count: usize = count.parse().map_err(|_| err(3, format!("bad network count `{count}`")))?;
            if count != NUM_SUBSETS {
                return Err(Error::Config(format!("ensemble needs {NUM_SUBSETS} networks, got {count}")));
            }
            MlpNetworks::PerVector((0..count).map(|_| parse_one(&mut pos)).collect::<Result<_>>()?)
        } else {
            return Err(err(3, format!("unknown network layout `{kind}`")));
        };
        Ok(Self { t_s, networks })
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 50,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses on standardized targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Minimizes the standardized-target MSE with mini-batches.
///
/// The dataset is split with `cfg.seed` into training and validation parts
/// (see [`split_indices`]); the network's normalization is used as is.
pub fn train(net: &Network, d: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    net.validate()?;
    if d.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    let mut net = net.clone();
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((net, history));
    }
    let (train_idx, val_idx) = split_indices(d.len(), cfg.validation_fraction, cfg.seed);
    let (x_train, y_train) = net.batch_matrices(train_idx.iter().map(|&i| &d.samples[i]));
    let (x_val, y_val) = net.batch_matrices(val_idx.iter().map(|&i| &d.samples[i]));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut params = net.params();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..x_train.ncols()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x_train.select_columns(chunk);
            let yb = y_train.select_columns(chunk);
            let (_, grad) = net.loss_and_gradient(&xb, &yb);
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut params, &grad, cfg.learning_rate),
                Optimizer::Sgd => params
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(p, g)| *p -= cfg.learning_rate * g),
            }
            net.set_params(&params);
        }
        let train_loss = net.loss(&x_train, &y_train);
        let val_loss = if x_val.ncols() > 0 {
            net.loss(&x_val, &y_val)
        } else {
            train_loss
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("loss became non-finite (train {train_loss}, validation {val_loss})"),
            });
        }
        history.train_loss.push(train_loss);
        history.validation_loss.push(val_loss);
    }
    Ok((net, history))
}

/// Layout of a network to be trained from data.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTopology {
    pub features: Vec<Feature>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// One network per elementary vector instead of a single conditioned one.
    pub per_vector: bool,
}

impl Default for MlpTopology {
    fn default() -> Self {
        Self {
            features: Feature::default_set(),
            hidden: vec![64],
            activation: Activation::Tanh,
            per_vector: false,
        }
    }
}

fn fit_network(d: &Dataset, topo: &MlpTopology, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    let mut spec = MlpSpec::new(topo.features.clone(), topo.hidden.clone(), topo.activation);
    let (train_idx, _) = split_indices(d.len(), cfg.validation_fraction, cfg.seed);
    let width = spec.input_width();
    let mut feats = Vec::with_capacity(train_idx.len() * width);
    let mut targets = Vec::with_capacity(train_idx.len());
    for &i in &train_idx {
        let s = &d.samples[i];
        feats.extend(spec.encode(&Observation::from(s)));
        targets.push([s.i_d_k1, s.i_q_k1]);
    }
    spec.norm = Normalization::fit(&feats, &targets, width);
    let net = Network::new(spec, cfg.seed);
    train(&net, d, cfg)
}

/// Standardizes on the training split, initializes and trains.
///
/// Per-vector mode trains seven networks on the subsets of `d` and returns
/// their histories concatenated in `n` order.
pub fn fit_mlp(d: &Dataset, topo: &MlpTopology, cfg: &TrainConfig, t_s: f64) -> Result<(MlpModel, Vec<TrainHistory>)> {
    if d.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    if topo.per_vector {
        let mut nets = Vec::with_capacity(NUM_SUBSETS);
        let mut hist = Vec::with_capacity(NUM_SUBSETS);
        for n in 1..=NUM_SUBSETS as u8 {
            let sub = Dataset {
                samples: d.subset(n).copied().collect(),
            };
            if sub.is_empty() {
                return Err(Error::Fit {
                    n,
                    reason: "no samples for this subset".into(),
                });
            }
            let (net, h) = fit_network(&sub, topo, cfg)?;
            nets.push(net);
            hist.push(h);
        }
        Ok((
            MlpModel {
                t_s,
                networks: MlpNetworks::PerVector(nets),
            },
            hist,
        ))
    } else {
        let (net, h) = fit_network(d, topo, cfg)?;
        Ok((
            MlpModel {
                t_s,
                networks: MlpNetworks::Single(net),
            },
            vec![h],
        ))
    }
}

/// Largest relative deviation between backpropagated gradients and central
/// finite differences with step `eps`, over every parameter.
///
/// The relative error of each entry is `|g - f| / max(|g|, |f|, 1e-6)`.
pub fn gradient_check(net: &Network, batch: &[Sample], eps: f64) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Domain(format!("finite-difference step must lie in [1e-7, 1e-4], got {eps}")));
    }
    let (x, y) = net.batch_matrices(batch);
    let (_, analytic) = net.loss_and_gradient(&x, &y);
    let base = net.params();
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        probe.set_params(&p);
        let up = probe.loss(&x, &y);
        p[i] = base[i] - eps;
        probe.set_params(&p);
        let down = probe.loss(&x, &y);
        let fd = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize) -> Sample {
        let f = i as f64;
        Sample {
            i_d_k: -10.0 - 3.0 * f,
            i_q_k: -50.0 + 2.0 * f,
            eps_k: (0.37 * f).sin() * 3.0,
            n_k: (i % 7) as u8 + 1,
            n_k_prev: ((i * 3) % 7) as u8 + 1,
            i_d_k1: -12.0 - 2.9 * f,
            i_q_k1: -49.0 + 2.1 * f,
        }
    }

    fn small_spec(act: Activation, hidden: Vec<usize>) -> MlpSpec {
        let mut spec = MlpSpec::new(Feature::default_set(), hidden, act);
        let samples: Vec<Sample> = (0..20).map(sample).collect();
        let w = spec.input_width();
        let feats: Vec<f64> = samples.iter().flat_map(|s| spec.encode(&Observation::from(s))).collect();
        let targets: Vec<[f64; 2]> = samples.iter().map(|s| [s.i_d_k1, s.i_q_k1]).collect();
        spec.norm = Normalization::fit(&feats, &targets, w);
        spec
    }

    #[test]
    fn zero_network_outputs_target_mean() {
        let spec = small_spec(Activation::Tanh, vec![8]);
        let mean = spec.norm.target_mean;
        let net = Network::zeros(spec);
        let out = net.forward(&Observation::from(&sample(3))).unwrap();
        assert_eq!(out, mean);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let net = Network::zeros(small_spec(Activation::Tanh, vec![4]));
        assert!(matches!(net.forward_features(&[1.0, 2.0]), Err(Error::Config(_))));
    }

    #[test]
    fn hidden_unit_permutation_is_symmetric() {
        let net = Network::new(small_spec(Activation::Tanh, vec![6]), 4);
        let mut swapped = net.clone();
        swapped.layers[0].weights.swap_rows(1, 4);
        swapped.layers[0].bias.swap_rows(1, 4);
        swapped.layers[1].weights.swap_columns(1, 4);
        for i in 0..10 {
            let obs = Observation::from(&sample(i));
            let a = net.forward(&obs).unwrap();
            let b = swapped.forward(&obs).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_check_small_tanh_net() {
        let net = Network::new(small_spec(Activation::Tanh, vec![10]), 7);
        assert!(net.num_params() <= 500);
        let batch: Vec<Sample> = (0..16).map(sample).collect();
        let err = gradient_check(&net, &batch, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
        assert!(gradient_check(&net, &batch, 1e-2).is_err());
    }

    #[test]
    fn gradient_check_linear_net() {
        let net = Network::new(small_spec(Activation::Identity, vec![]), 2);
        let batch: Vec<Sample> = (0..16).map(sample).collect();
        let err = gradient_check(&net, &batch, 1e-5).unwrap();
        assert!(err <= 1e-8, "max relative error {err}");
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let net = Network::new(small_spec(Activation::Tanh, vec![5]), 1);
        let batch: Vec<Sample> = (0..8).map(sample).collect();
        let doubled: Vec<Sample> = batch.iter().chain(batch.iter()).copied().collect();
        let (x1, y1) = net.batch_matrices(&batch);
        let (x2, y2) = net.batch_matrices(&doubled);
        let (l1, g1) = net.loss_and_gradient(&x1, &y1);
        let (l2, g2) = net.loss_and_gradient(&x2, &y2);
        assert!((l1 - l2).abs() <= 1e-14 * l1.abs());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-12));
        }
        let e1 = gradient_check(&net, &batch, 1e-5).unwrap();
        let e2 = gradient_check(&net, &doubled, 1e-5).unwrap();
        assert!(e1 < 1e-4 && e2 < 1e-4);
    }

    #[test]
    fn normalization_round_trip() {
        let spec = small_spec(Activation::Tanh, vec![3]);
        let raw = spec.encode(&Observation::from(&sample(5)));
        let mut z = raw.clone();
        spec.norm.normalize_input(&mut z);
        spec.norm.denormalize_input(&mut z);
        for (a, b) in raw.iter().zip(&z) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let t = [-123.4, 56.7];
        let back = spec.norm.denormalize_target(spec.norm.normalize_target(t));
        assert!((back[0] - t[0]).abs() < 1e-12 && (back[1] - t[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leave_network_unchanged() {
        let net = Network::new(small_spec(Activation::Tanh, vec![4]), 3);
        let d = Dataset::new((0..30).map(sample).collect()).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, hist) = train(&net, &d, &cfg).unwrap();
        assert_eq!(trained, net);
        assert!(hist.train_loss.is_empty());
        assert!(train(&net, &Dataset::default(), &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let net = Network::new(small_spec(Activation::Identity, vec![]), 3);
        let d = Dataset::new((0..30).map(sample).collect()).unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e6,
            epochs: 50,
            batch_size: 8,
            ..TrainConfig::default()
        };
        match train(&net, &d, &cfg) {
            Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let net = Network::new(small_spec(Activation::Relu, vec![5, 3]), 9);
        let model = MlpModel {
            t_s: 50e-6,
            networks: MlpNetworks::Single(net),
        };
        let back = MlpModel::from_text(&model.to_text()).unwrap();
        assert_eq!(back, model);
        let ens = MlpModel {
            t_s: 50e-6,
            networks: MlpNetworks::PerVector(
                (0..7).map(|s| Network::new(small_spec(Activation::Tanh, vec![2]), s)).collect(),
            ),
        };
        assert_eq!(MlpModel::from_text(&ens.to_text()).unwrap(), ens);
        let broken = model.to_text().replace("layer 1 bias", "layer 1 boas");
        assert!(matches!(MlpModel::from_text(&broken), Err(Error::Parse { .. })));
    }

    #[test]
    fn inactive_one_hot_channels_do_not_leak() {
        let net = Network::new(small_spec(Activation::Tanh, vec![6]), 5);
        let obs = Observation::from(&sample(2));
        let base = net.forward(&obs).unwrap();
        // same observation, different n: output changes only through the n channels
        let mut raw = net.spec.encode(&obs);
        let n_off = 4;
        for k in 0..7 {
            if k + 1 != usize::from(obs.n) {
                assert_eq!(raw[n_off + k], 0.0);
            }
        }
        raw[n_off + usize::from(obs.n) - 1] = 1.0;
        assert_eq!(net.forward_features(&raw).unwrap(), base);
    }
}
