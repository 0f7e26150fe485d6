//! Tiny pre-norm decoder-only transformer whose residual stream is an exact
//! sum of per-node outputs.
//!
//! Nodes are the input embedding (token + learned position), every attention
//! head, every MLP and the logits head. Layer norms live inside the node that
//! reads from the residual stream, so each sink input is literally the sum of
//! the outputs of all earlier sources. Attention output projections carry no
//! bias so that each head's contribution is self-contained, and keys carry no
//! bias because softmax is invariant to it.

mod forward;
mod graph;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::rng::Rng;

pub use forward::{
    backward, forward, forward_with, node_metric_grads, param_grads, sample_param_grads, ActivationCache,
    Intervention, RunSpec, SinkGrads,
};
pub use graph::{ComputationGraph, Edge, Letter, Node, SinkId};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
    /// Final layer norm inside the logits node. Disabling it makes logits an
    /// affine function of the final residual stream.
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::Config(format!(
                "d_head ({}) x n_heads ({}) must equal d_model ({})",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Indices of the per-layer tensors inside [`Params`].
pub(crate) mod slot {
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;
    pub const GLOBAL: usize = 2;

    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const WV: usize = 5;
    pub const BV: usize = 6;
    pub const WO: usize = 7;
    pub const LN2_G: usize = 8;
    pub const LN2_B: usize = 9;
    pub const W_IN: usize = 10;
    pub const B_IN: usize = 11;
    pub const W_OUT: usize = 12;
    pub const B_OUT: usize = 13;
    pub const PER_LAYER: usize = 14;

    pub const LNF_G: usize = 0;
    pub const LNF_B: usize = 1;
    pub const W_U: usize = 2;
    pub const B_U: usize = 3;
}

const LAYER_NAMES: [&str; slot::PER_LAYER] = [
    "ln1.gamma", "ln1.beta", "attn.w_q", "attn.b_q", "attn.w_k", "attn.w_v", "attn.b_v",
    "attn.w_o", "ln2.gamma", "ln2.beta", "mlp.w_in", "mlp.b_in", "mlp.w_out", "mlp.b_out",
];

/// All trainable tensors in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, h, dh, m, v, s) = (cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp, cfg.vocab_size, cfg.max_seq);
        let mut out = vec![("tok_emb".into(), vec![v, d]), ("pos_emb".into(), vec![s, d])];
        for l in 0..cfg.n_layers {
            let shapes: [Vec<usize>; slot::PER_LAYER] = [
                vec![d],
                vec![d],
                vec![h, d, dh],
                vec![h, dh],
                vec![h, d, dh],
                vec![h, d, dh],
                vec![h, dh],
                vec![h, dh, d],
                vec![d],
                vec![d],
                vec![d, m],
                vec![m],
                vec![m, d],
                vec![d],
            ];
            for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
                out.push((format!("blocks.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.gamma".into(), vec![d]));
        out.push(("ln_f.beta".into(), vec![d]));
        out.push(("unembed.w".into(), vec![d, v]));
        out.push(("unembed.b".into(), vec![v]));
        out
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Params {
            tensors: Self::shapes(cfg).iter().map(|(_, s)| Tensor::zeros(s)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: f64, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn fill(&mut self, v: f64) {
        self.tensors.iter_mut().for_each(|t| t.fill(v));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors.iter().map(|t| t.dot(t)).sum()
    }

    pub fn rms(&self) -> f64 {
        libm::sqrt(self.sum_squares() / self.count().max(1) as f64)
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data().iter())
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data_mut().iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Fresh initialization from `cfg.seed`: N(0, 0.02) weights, residual
    /// output projections scaled by 1/sqrt(2L), unit gains and zero biases.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).fork(0x1417);
        let mut params = Params::zeros(&cfg);
        let resid_scale = 1.0 / libm::sqrt(2.0 * cfg.n_layers as f64);
        for (t, (name, _)) in params.tensors.iter_mut().zip(Params::shapes(&cfg)) {
            let std = if name.ends_with("gamma") {
                t.fill(1.0);
                continue;
            } else if name.ends_with("beta") || name.contains(".b_") || name.ends_with(".b") {
                continue;
            } else if name.ends_with("w_o") || name.ends_with("w_out") {
                0.02 * resid_scale
            } else {
                0.02
            };
            for v in t.data_mut() {
                *v = std * rng.normal();
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn graph(&self) -> ComputationGraph {
        ComputationGraph::build(&self.cfg)
    }

    pub(crate) fn layer(&self, l: usize, which: usize) -> &Tensor {
        &self.params.tensors[slot::GLOBAL + l * slot::PER_LAYER + which]
    }

    pub(crate) fn final_slot(&self, which: usize) -> &Tensor {
        &self.params.tensors[slot::GLOBAL + self.cfg.n_layers * slot::PER_LAYER + which]
    }

    pub fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {t} >= vocab size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }
}

pub(crate) fn layer_index(l: usize, which: usize) -> usize {
    slot::GLOBAL + l * slot::PER_LAYER + which
}

pub(crate) fn final_index(cfg: &ModelConfig, which: usize) -> usize {
    slot::GLOBAL + cfg.n_layers * slot::PER_LAYER + which
}

#[cfg(test)]
pub(crate) mod tests;
