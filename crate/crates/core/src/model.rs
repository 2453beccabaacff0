//! Model configuration, named parameters and the forward-pass context shared
//! by the encoder and decoder.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::decoder::{self, DecoderOutput};
use crate::encoder::{self, Pyramid};
use crate::error::{arg, Result};
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Downsampling attention path + upsampling path + cross-attention fusion.
    Teu,
    /// Upsampling path only, straight into the pyramid-pooling head.
    Tpp,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Teu => "teu",
            DecoderKind::Tpp => "tpp",
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teu" => Ok(DecoderKind::Teu),
            "tpp" => Ok(DecoderKind::Tpp),
            other => arg(format!("unknown decoder {other:?} (expected teu or tpp)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub num_classes: usize,
    /// Channels of encoder levels 1 (blocks 1–4), 2 (5–7) and 3 (8–10).
    pub channels: [usize; 3],
    pub temporal_kernel: usize,
    pub decoder: DecoderKind,
    pub decoder_channels: usize,
    pub embed_dim: usize,
    pub batch_norm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.num_classes == 0 {
            return arg("model needs joints >= 1 and num_classes >= 1");
        }
        if self.channels.contains(&0) || self.decoder_channels == 0 || self.embed_dim == 0 {
            return arg("channel counts must be positive");
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return arg("temporal_kernel must be odd");
        }
        Ok(())
    }
}

/// Named tensors in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self(self.0.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect())
    }

    pub fn quantize_f32(&mut self) {
        for t in self.0.values_mut() {
            t.quantize_f32();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    pub fn total_len(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers.
    Train,
    /// Running statistics in normalisation layers.
    Eval,
}

/// One forward pass: the tape, the parameter leaves bound onto it, and the
/// batch statistics collected from normalisation layers.
pub struct Forward<'a> {
    pub tape: Tape,
    vars: BTreeMap<String, Var>,
    mode: Mode,
    batch_norm: bool,
    buffers: &'a Params,
    pub batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a> Forward<'a> {
    /// Registers every parameter as a gradient-carrying leaf, in name order.
    pub fn new(params: &Params, buffers: &'a Params, mode: Mode, batch_norm: bool) -> Self {
        let mut tape = Tape::new();
        let vars = params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
        Self {
            tape,
            vars,
            mode,
            batch_norm,
            buffers,
            batch_stats: Vec::new(),
        }
    }

    /// Leaf for a named parameter. Panics on an unknown name, which is a
    /// programming error in the layer wiring.
    pub fn p(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Batch normalisation under `prefix` (`.gamma`, `.beta`, and buffers
    /// `.running_mean`, `.running_var`); identity when disabled.
    pub fn norm(&mut self, x: Var, prefix: &str) -> Var {
        if !self.batch_norm {
            return x;
        }
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batch_norm(x, gamma, beta, BN_EPS);
                self.batch_stats.push((prefix.to_string(), mean, var));
                y
            }
            Mode::Eval => {
                let mean = self.buffers.get(&format!("{prefix}.running_mean")).expect("running mean");
                let var = self.buffers.get(&format!("{prefix}.running_var")).expect("running var");
                self.tape.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }

    /// Gradients of `loss` keyed by parameter name.
    pub fn param_grads(&self, loss: Var) -> Params {
        let grads: Grads = self.tape.backward(loss);
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(&self.tape, v)))
            .collect()
    }
}

/// Parameter initialiser: uniform weights in `±1/√fan_in`, zero biases,
/// unit BN gains.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn weight(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn conv(&mut self, params: &mut Params, prefix: &str, c_out: usize, c_in: usize) {
        params.insert(format!("{prefix}.weight"), self.weight(&[c_out, c_in], c_in));
        params.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
    }

    pub fn norm(params: &mut Params, buffers: &mut Params, prefix: &str, c: usize) {
        params.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
        params.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
        buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        buffers.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
    }
}

/// Everything a forward pass produces.
pub struct ModelOutput {
    pub pyramid: Pyramid,
    pub decoder: DecoderOutput,
}

/// Plain-tensor result of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `(N, K, T, 1)`
    pub logits: Tensor,
    /// `(N, d, T, 1)`
    pub embedding_f: Tensor,
    /// `(N, d, T, 1)`
    pub embedding_i: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub buffers: Params,
    graph: SkeletonGraph,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let graph = SkeletonGraph::chain_with_branches(config.joints)?;
        let mut init = Init::new(seed);
        let mut params = Params::new();
        let mut buffers = Params::new();
        encoder::init_params(&config, &mut init, &mut params, &mut buffers);
        decoder::init_params(&config, &mut init, &mut params);
        params.quantize_f32();
        Ok(Self {
            config,
            params,
            buffers,
            graph,
        })
    }

    pub fn from_parts(config: ModelConfig, params: Params, buffers: Params) -> Result<Self> {
        config.validate()?;
        let graph = SkeletonGraph::chain_with_branches(config.joints)?;
        let expected = Self::new(config.clone(), 0)?;
        for (name, t) in expected.params.iter().chain(expected.buffers.iter()) {
            let got = params.get(name).or_else(|| buffers.get(name));
            match got {
                Some(g) if g.shape() == t.shape() => {}
                Some(g) => return arg(format!("tensor {name} has shape {:?}, expected {:?}", g.shape(), t.shape())),
                None => return arg(format!("missing tensor {name}")),
            }
        }
        Ok(Self {
            config,
            params,
            buffers,
            graph,
        })
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    /// Records the full forward pass on a fresh tape. `input` is `(N, 3, T, V)`
    /// with `T` a multiple of 4.
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Forward<'_>, ModelOutput)> {
        self.forward_with(&self.params, input, mode)
    }

    /// Forward pass with substitute parameters (same names and shapes).
    pub fn forward_with<'a>(&'a self, params: &Params, input: &Tensor, mode: Mode) -> Result<(Forward<'a>, ModelOutput)> {
        let (_, c, t, v) = input.dims4();
        if c != 3 || v != self.config.joints {
            return arg(format!("input shape {:?} does not match (N, 3, T, {})", input.shape(), self.config.joints));
        }
        if t % 4 != 0 || t < 4 {
            return arg(format!("padded length {t} must be a positive multiple of 4"));
        }
        let mut fw = Forward::new(params, &self.buffers, mode, self.config.batch_norm);
        let x = fw.tape.constant(input.clone());
        let pyramid = encoder::encode(&mut fw, x, &self.config, &self.graph);
        let decoder = decoder::decode(&mut fw, &pyramid, &self.config)?;
        Ok((fw, ModelOutput { pyramid, decoder }))
    }

    pub fn infer(&self, input: &Tensor) -> Result<Inference> {
        let (fw, out) = self.forward(input, Mode::Eval)?;
        Ok(Inference {
            logits: fw.value(out.decoder.logits).clone(),
            embedding_f: fw.value(out.decoder.embedding_f).clone(),
            embedding_i: fw.value(out.decoder.embedding_i).clone(),
        })
    }

    /// Folds the batch statistics of a training pass into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)]) {
        for (prefix, mean, var) in stats {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let buf = self
                    .buffers
                    .get_mut(&format!("{prefix}.{suffix}"))
                    .expect("buffer for normalisation layer");
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = ((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b) as f32 as f64;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn desk_config(decoder: DecoderKind) -> ModelConfig {
        ModelConfig {
            joints: 4,
            num_classes: 3,
            channels: [4, 6, 8],
            temporal_kernel: 3,
            decoder,
            decoder_channels: 4,
            embed_dim: 5,
            batch_norm: true,
        }
    }

    #[test]
    fn end_to_end_shape_law() {
        for kind in [DecoderKind::Teu, DecoderKind::Tpp] {
            let model = Model::new(desk_config(kind), 3).unwrap();
            let input = Tensor::full(&[2, 3, 16, 4], 0.25);
            let (fw, out) = model.forward(&input, Mode::Train).unwrap();
            assert_eq!(fw.value(out.decoder.logits).shape(), &[2, 3, 16, 1]);
            assert_eq!(fw.value(out.decoder.embedding_f).shape(), &[2, 5, 16, 1]);
            assert_eq!(fw.value(out.decoder.embedding_i).shape(), &[2, 5, 16, 1]);
        }
    }

    #[test]
    fn rejects_unpadded_input() {
        let model = Model::new(desk_config(DecoderKind::Teu), 3).unwrap();
        assert!(model.forward(&Tensor::zeros(&[1, 3, 10, 4]), Mode::Eval).is_err());
        assert!(model.forward(&Tensor::zeros(&[1, 3, 8, 5]), Mode::Eval).is_err());
    }

    #[test]
    fn initial_params_are_f32_exact() {
        let model = Model::new(desk_config(DecoderKind::Teu), 11).unwrap();
        for (_, t) in model.params.iter() {
            assert!(t.data().iter().all(|&x| x == x as f32 as f64));
        }
    }
}
