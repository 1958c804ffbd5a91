//! Tiny decoder-only transformer whose FFN exposes its key–value memory view.
//!
//! Each FFN computes `coeffs = f(x Kᵀ)` (or the gated analogue) and outputs
//! `Σ_i coeffs_i · v_i`, where `v_i` are the rows of `ffn_value`. The forward
//! pass records those coefficients per layer so that unlearning code can read
//! them without hooks.

mod forward;
mod io;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KvwError, Result};
use crate::tensor::Matrix;

pub use forward::{ffn_forward, forward, forward_counted, ForwardTrace};
pub(crate) use forward::{last_logits_from, residual_before};
pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};

/// Element-wise FFN non-linearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let x = x as f64;
                let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
                (0.5 * x * (1.0 + inner.tanh())) as f32
            }
            Activation::Silu => {
                let x = x as f64;
                (x / (1.0 + (-x).exp())) as f32
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
        }
    }
}

impl FromStr for Activation {
    type Err = KvwError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "silu" => Ok(Activation::Silu),
            other => Err(KvwError::Version(format!("unknown activation tag `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Plain `f(xKᵀ)V` or gated `(f(x Gᵀ) ⊙ x Kᵀ) V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnVariant {
    Plain,
    Gated,
}

impl FfnVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            FfnVariant::Plain => "plain",
            FfnVariant::Gated => "gated",
        }
    }

    /// Number of `m × d` matrices the FFN multiplies per token.
    pub fn matrices(self) -> usize {
        match self {
            FfnVariant::Plain => 2,
            FfnVariant::Gated => 3,
        }
    }
}

impl FromStr for FfnVariant {
    type Err = KvwError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(FfnVariant::Plain),
            "gated" => Ok(FfnVariant::Gated),
            other => Err(KvwError::Version(format!("unknown ffn variant tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Rmsnorm,
    Layernorm,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::Rmsnorm => "rmsnorm",
            Norm::Layernorm => "layernorm",
        }
    }

    pub const EPS: f64 = 1e-5;

    pub fn apply(self, x: &[f32], scale: &[f32]) -> Vec<f32> {
        let n = x.len() as f64;
        let (mean, denom) = match self {
            Norm::Rmsnorm => {
                let ms = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / n;
                (0.0, (ms + Self::EPS).sqrt())
            }
            Norm::Layernorm => {
                let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = x
                    .iter()
                    .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                    .sum::<f64>()
                    / n;
                (mean, (var + Self::EPS).sqrt())
            }
        };
        x.iter()
            .zip(scale)
            .map(|(&v, &s)| ((v as f64 - mean) / denom * s as f64) as f32)
            .collect()
    }
}

impl FromStr for Norm {
    type Err = KvwError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmsnorm" => Ok(Norm::Rmsnorm),
            "layernorm" => Ok(Norm::Layernorm),
            other => Err(KvwError::Version(format!("unknown norm tag `{other}`"))),
        }
    }
}

/// Architecture of a model. `ffn_dim` is the number of knowledge vectors per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub ffn_variant: FfnVariant,
    pub norm: Norm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            d_model: 64,
            ffn_dim: 256,
            num_heads: 4,
            vocab_size: 512,
            max_seq_len: 16,
            activation: Activation::Relu,
            ffn_variant: FfnVariant::Plain,
            norm: Norm::Rmsnorm,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(KvwError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(KvwError::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Weights of one transformer block. Matrices map `x ↦ W x`, so `ffn_key`
/// row `i` is the key `k_i` and `ffn_value` row `i` is the knowledge vector `v_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub attn_q: Matrix,
    pub attn_k: Matrix,
    pub attn_v: Matrix,
    pub attn_o: Matrix,
    pub ffn_norm: Vec<f32>,
    pub ffn_key: Matrix,
    pub ffn_gate: Option<Matrix>,
    pub ffn_value: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embedding: Matrix,
    /// Learned absolute positions, `max_seq_len × d`.
    pub position: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub unembedding: Matrix,
}

impl ModelWeights {
    /// Gaussian weights with standard deviation `scale`, unit norm scales.
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, scale: f32, rng: &mut R) -> Self {
        let d = config.d_model;
        let m = config.ffn_dim;
        let mut gauss = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f32 = rng.sample(StandardNormal);
                z * scale
            })
        };
        let embedding = gauss(config.vocab_size, d);
        let position = gauss(config.max_seq_len, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                attn_q: gauss(d, d),
                attn_k: gauss(d, d),
                attn_v: gauss(d, d),
                attn_o: gauss(d, d),
                ffn_norm: vec![1.0; d],
                ffn_key: gauss(m, d),
                ffn_gate: (config.ffn_variant == FfnVariant::Gated).then(|| gauss(m, d)),
                ffn_value: gauss(m, d),
            })
            .collect();
        let unembedding = gauss(config.vocab_size, d);
        Self {
            embedding,
            position,
            layers,
            final_norm: vec![1.0; d],
            unembedding,
        }
    }

    /// Every tensor with its canonical name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f32]) {
            (name, m.shape().to_vec(), m.as_slice())
        }
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        out.push(mat("embedding".into(), &self.embedding));
        out.push(mat("position".into(), &self.position));
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}.");
            out.push((format!("{p}attn_norm"), vec![layer.attn_norm.len()], &layer.attn_norm));
            out.push(mat(format!("{p}attn_q"), &layer.attn_q));
            out.push(mat(format!("{p}attn_k"), &layer.attn_k));
            out.push(mat(format!("{p}attn_v"), &layer.attn_v));
            out.push(mat(format!("{p}attn_o"), &layer.attn_o));
            out.push((format!("{p}ffn_norm"), vec![layer.ffn_norm.len()], &layer.ffn_norm));
            out.push(mat(format!("{p}ffn_key"), &layer.ffn_key));
            if let Some(gate) = &layer.ffn_gate {
                out.push(mat(format!("{p}ffn_gate"), gate));
            }
            out.push(mat(format!("{p}ffn_value"), &layer.ffn_value));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        out.push(mat("unembedding".into(), &self.unembedding));
        out
    }

    /// Checks shapes against `config` and that every value is finite.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let d = config.d_model;
        let m = config.ffn_dim;
        let expect = |name: &str, got: [usize; 2], want: [usize; 2]| {
            if got == want {
                Ok(())
            } else {
                Err(KvwError::Config(format!(
                    "tensor {name} has shape {got:?}, expected {want:?}"
                )))
            }
        };
        expect("embedding", self.embedding.shape(), [config.vocab_size, d])?;
        expect("position", self.position.shape(), [config.max_seq_len, d])?;
        expect("unembedding", self.unembedding.shape(), [config.vocab_size, d])?;
        if self.final_norm.len() != d {
            return Err(KvwError::Config("final_norm length differs from d_model".into()));
        }
        if self.layers.len() != config.num_layers {
            return Err(KvwError::Config(format!(
                "model has {} layers, config declares {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_q", &layer.attn_q),
                ("attn_k", &layer.attn_k),
                ("attn_v", &layer.attn_v),
                ("attn_o", &layer.attn_o),
            ] {
                expect(&format!("layers.{l}.{name}"), t.shape(), [d, d])?;
            }
            expect(&format!("layers.{l}.ffn_key"), layer.ffn_key.shape(), [m, d])?;
            expect(&format!("layers.{l}.ffn_value"), layer.ffn_value.shape(), [m, d])?;
            match (config.ffn_variant, &layer.ffn_gate) {
                (FfnVariant::Gated, Some(g)) => {
                    expect(&format!("layers.{l}.ffn_gate"), g.shape(), [m, d])?
                }
                (FfnVariant::Gated, None) => {
                    return Err(KvwError::Config(format!(
                        "layer {l}: gated variant requires ffn_gate"
                    )))
                }
                (FfnVariant::Plain, Some(_)) => {
                    return Err(KvwError::Config(format!(
                        "layer {l}: plain variant must not carry ffn_gate"
                    )))
                }
                (FfnVariant::Plain, None) => {}
            }
            if layer.attn_norm.len() != d || layer.ffn_norm.len() != d {
                return Err(KvwError::Config(format!("layer {l}: norm scale length differs from d_model")));
            }
        }
        self.check_finite()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, _, data) in self.named_tensors() {
            if data.iter().any(|v| !v.is_finite()) {
                let layer = name
                    .strip_prefix("layers.")
                    .and_then(|s| s.split('.').next())
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(0);
                return Err(KvwError::Numeric {
                    layer,
                    msg: format!("tensor {name} contains a non-finite value"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(KvwError::Config(_))));
    }

    #[test]
    fn config_rejects_zero_counts() {
        let cfg = ModelConfig {
            ffn_dim: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plain_variant_rejects_gate_tensor() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = ModelWeights::random(&cfg, 0.1, &mut rng);
        w.validate(&cfg).unwrap();
        w.layers[1].ffn_gate = Some(Matrix::zeros(cfg.ffn_dim, cfg.d_model));
        assert!(matches!(w.validate(&cfg), Err(KvwError::Config(_))));
    }

    #[test]
    fn gated_variant_requires_gate_tensor() {
        let cfg = ModelConfig {
            ffn_variant: FfnVariant::Gated,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = ModelWeights::random(&cfg, 0.1, &mut rng);
        w.validate(&cfg).unwrap();
        w.layers[0].ffn_gate = None;
        assert!(w.validate(&cfg).is_err());
    }

    #[test]
    fn non_finite_weight_is_a_numeric_error_naming_the_layer() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = ModelWeights::random(&cfg, 0.1, &mut rng);
        w.layers[2].ffn_value.set(0, 0, f32::NAN);
        match w.validate(&cfg) {
            Err(KvwError::Numeric { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn activations_vanish_at_origin() {
        for act in [Activation::Relu, Activation::Gelu, Activation::Silu] {
            assert_eq!(act.apply(0.0), 0.0);
        }
        assert!(Activation::Silu.apply(-1.0) < 0.0);
    }

    #[test]
    fn unknown_tags_are_version_errors() {
        assert!(matches!("tanh".parse::<Activation>(), Err(KvwError::Version(_))));
        assert!(matches!("moe".parse::<FfnVariant>(), Err(KvwError::Version(_))));
    }
}
