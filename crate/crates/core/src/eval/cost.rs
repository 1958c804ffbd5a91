//! Analytic FLOP and peak-memory model.
//!
//! Forward FLOPs are `2 ×` the multiply-accumulates of the model-core forward
//! pass, counted the same way as [`crate::tensor::MacCounter`]. Per token at
//! position `t` (0-based) and per layer: `4d²` attention projections,
//! `2d(t+1)` for scores and mixing, `k·m·d` FFN (`k` = 2 plain, 3 gated);
//! plus `V·d` unembedding per token.
//!
//! Training methods pay, per trained pass over a batch:
//!
//! - full fine-tune: forward `F` plus backward `2F`;
//! - LoRA: forward `F + A`, backward `F` for activation gradients through the
//!   frozen weights plus `2A` for adapter weight and input gradients, where
//!   `A` is the adapter forward cost. Adapters sit on every attention
//!   projection and every FFN matrix, in both directions.
//!
//! GA trains on the forget batch only; GD, KL and NPO train on a forget and a
//! retain batch; KL and NPO add one frozen reference forward. MMU computes
//! saliency with two full forward/backward passes (with and without the
//! image prefix) and then takes a full GD step. The oracle is a full
//! fine-tune on the retain set.
//!
//! KVW runs the forget batch forward once, accumulates `|c|` and edits
//! `L·m` value rows, with no backward term at all.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KvwError, Result};
use crate::model::{FfnVariant, ModelConfig};

/// Shape parameters that the cost formulas depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: u64,
    pub d_model: u64,
    pub ffn_dim: u64,
    pub num_heads: u64,
    pub vocab_size: u64,
    pub max_seq_len: u64,
    pub gated: bool,
}

impl From<&ModelConfig> for ModelShape {
    fn from(c: &ModelConfig) -> Self {
        Self {
            num_layers: c.num_layers as u64,
            d_model: c.d_model as u64,
            ffn_dim: c.ffn_dim as u64,
            num_heads: c.num_heads as u64,
            vocab_size: c.vocab_size as u64,
            max_seq_len: c.max_seq_len as u64,
            gated: c.ffn_variant == FfnVariant::Gated,
        }
    }
}

impl ModelShape {
    fn ffn_mats(&self) -> u64 {
        if self.gated {
            3
        } else {
            2
        }
    }

    pub fn parameters(&self) -> u128 {
        let (l, d, m) = (self.num_layers as u128, self.d_model as u128, self.ffn_dim as u128);
        let per_layer = 4 * d * d + self.ffn_mats() as u128 * m * d + 2 * d;
        2 * self.vocab_size as u128 * d + self.max_seq_len as u128 * d + l * per_layer + d
    }

    /// LoRA parameters at rank `r` on every projection and FFN matrix.
    pub fn lora_parameters(&self, r: u64) -> u128 {
        let (l, d, m, r) = (self.num_layers as u128, self.d_model as u128, self.ffn_dim as u128, r as u128);
        l * (4 * r * 2 * d + self.ffn_mats() as u128 * r * (d + m))
    }
}

/// Multiply-accumulates of one forward pass over `seq_len` tokens.
pub fn forward_macs(shape: &ModelShape, seq_len: u64) -> u128 {
    let (l, d, m, n) = (
        shape.num_layers as u128,
        shape.d_model as u128,
        shape.ffn_dim as u128,
        seq_len as u128,
    );
    let dense = n * (4 * d * d + shape.ffn_mats() as u128 * m * d);
    let attention = d * n * (n + 1);
    l * (dense + attention) + n * shape.vocab_size as u128 * d
}

pub fn forward_flops(shape: &ModelShape, seq_len: u64) -> u128 {
    2 * forward_macs(shape, seq_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ga,
    Gd,
    Kl,
    Npo,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Ga, Objective::Gd, Objective::Kl, Objective::Npo];

    fn trained_passes(self) -> u128 {
        match self {
            Objective::Ga => 1,
            _ => 2,
        }
    }

    fn reference_passes(self) -> u128 {
        match self {
            Objective::Kl | Objective::Npo => 1,
            _ => 0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Objective::Ga => "ga",
            Objective::Gd => "gd",
            Objective::Kl => "kl",
            Objective::Npo => "npo",
        }
    }
}

/// Method tags: `kvw`, `ga`, `gd`, `kl`, `npo` (full fine-tune), `mmu`,
/// `oracle_retrain`, and `<objective>_lora:<rank>` such as `gd_lora:8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Kvw,
    Full(Objective),
    Lora { objective: Objective, rank: u64 },
    Mmu,
    OracleRetrain,
}

impl FromStr for Method {
    type Err = KvwError;

    fn from_str(s: &str) -> Result<Self> {
        let objective = |t: &str| Objective::ALL.into_iter().find(|o| o.tag() == t);
        match s {
            "kvw" => return Ok(Method::Kvw),
            "mmu" => return Ok(Method::Mmu),
            "oracle_retrain" => return Ok(Method::OracleRetrain),
            _ => {}
        }
        if let Some(o) = objective(s) {
            return Ok(Method::Full(o));
        }
        if let Some((head, rank)) = s.split_once("_lora:") {
            if let (Some(objective), Ok(rank)) = (objective(head), rank.parse()) {
                return Ok(Method::Lora { objective, rank });
            }
        }
        Err(KvwError::Input(format!("unknown method tag {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Kvw => f.write_str("kvw"),
            Method::Full(o) => f.write_str(o.tag()),
            Method::Lora { objective, rank } => write!(f, "{}_lora:{rank}", objective.tag()),
            Method::Mmu => f.write_str("mmu"),
            Method::OracleRetrain => f.write_str("oracle_retrain"),
        }
    }
}

/// Data and schedule sizes. Every sequence is `seq_len` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub shape: ModelShape,
    pub seq_len: u64,
    pub forget_size: u64,
    pub retain_size: u64,
    pub batch_size: u64,
    pub epochs: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let s = &self.shape;
        let sizes = [
            s.num_layers,
            s.d_model,
            s.ffn_dim,
            s.num_heads,
            s.vocab_size,
            s.max_seq_len,
            self.seq_len,
            self.forget_size,
            self.retain_size,
            self.batch_size,
            self.epochs,
        ];
        if sizes.contains(&0) {
            return Err(KvwError::Input("cost parameters must all be positive".into()));
        }
        if s.d_model < 8 {
            return Err(KvwError::Input("cost model needs d_model >= 8".into()));
        }
        if self.seq_len > s.max_seq_len {
            return Err(KvwError::Input("seq_len exceeds max_seq_len".into()));
        }
        Ok(())
    }

    fn batches(&self, n: u64) -> u128 {
        n.div_ceil(self.batch_size) as u128
    }

    /// `F`: forward FLOPs of one batch.
    fn batch_forward(&self) -> u128 {
        self.batch_size as u128 * forward_flops(&self.shape, self.seq_len)
    }

    /// `A`: adapter forward FLOPs of one batch.
    fn batch_adapter(&self, rank: u64) -> u128 {
        let s = &self.shape;
        let (l, d, m, r) = (s.num_layers as u128, s.d_model as u128, s.ffn_dim as u128, rank as u128);
        let per_token = l * (4 * r * 2 * d + s.ffn_mats() as u128 * r * (d + m));
        2 * self.batch_size as u128 * self.seq_len as u128 * per_token
    }

    /// `|c|` accumulation over every position of a batch.
    fn batch_accumulate(&self) -> u128 {
        let s = &self.shape;
        2 * self.batch_size as u128 * self.seq_len as u128 * s.num_layers as u128 * s.ffn_dim as u128
    }

    /// Accessor, gate and row scaling over all layers.
    fn edit(&self) -> u128 {
        let s = &self.shape;
        s.num_layers as u128 * (s.ffn_dim as u128 * s.d_model as u128 + 4 * s.ffn_dim as u128)
    }

    /// Activations live at once during one inference forward of a batch.
    fn inference_activations(&self) -> u128 {
        let s = &self.shape;
        let (b, n) = (self.batch_size as u128, self.seq_len as u128);
        b * n * (2 * s.d_model as u128 + s.ffn_dim as u128) + b * s.num_heads as u128 * n * n
    }

    /// Activations stored across all layers for a backward pass.
    fn stored_activations(&self) -> u128 {
        let s = &self.shape;
        let (b, n, l) = (self.batch_size as u128, self.seq_len as u128, s.num_layers as u128);
        b * n * l * (6 * s.d_model as u128 + 2 * s.ffn_dim as u128) + b * l * s.num_heads as u128 * n * n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: String,
    /// Forward part of one batch.
    pub batch_forward_flops: u128,
    /// Backward part of one batch.
    pub batch_backward_flops: u128,
    /// Non-matmul editing work per batch (KVW only).
    pub batch_edit_flops: u128,
    pub per_batch_flops: u128,
    pub batches: u128,
    pub total_flops: u128,
    pub total_backward_flops: u128,
    /// Peak resident `f32` words: weights, gradients, optimizer state,
    /// activations and method-specific buffers.
    pub peak_memory_words: u128,
}

pub fn flop_account(params: &CostParams, method: Method) -> Result<CostReport> {
    params.validate()?;
    let f = params.batch_forward();
    let p = params.shape.parameters();
    let nb_f = params.batches(params.forget_size);
    let nb_r = params.batches(params.retain_size);
    let epochs = params.epochs as u128;
    let full_state = 4 * p + params.stored_activations();

    let (fwd, bwd, edit, batches, memory) = match method {
        Method::Kvw => {
            let fwd = f + params.batch_accumulate();
            let memory = p + params.inference_activations() + 3 * params.shape.num_layers as u128 * params.shape.ffn_dim as u128;
            (fwd, 0, params.edit(), nb_f, memory)
        }
        Method::Full(o) => {
            let fwd = o.trained_passes() * f + o.reference_passes() * f;
            let bwd = o.trained_passes() * 2 * f;
            let reference_copy = if o.reference_passes() > 0 { p } else { 0 };
            (fwd, bwd, 0, epochs * nb_f, full_state + reference_copy)
        }
        Method::Lora { objective: o, rank } => {
            if rank == 0 || 8 * rank > params.shape.d_model {
                return Err(KvwError::Input(format!(
                    "LoRA rank {rank} outside 1..=d_model/8 ({})",
                    params.shape.d_model / 8
                )));
            }
            let a = params.batch_adapter(rank);
            let fwd = o.trained_passes() * (f + a) + o.reference_passes() * f;
            let bwd = o.trained_passes() * (f + 2 * a);
            let memory = p + 4 * params.shape.lora_parameters(rank) + params.stored_activations();
            (fwd, bwd, 0, epochs * nb_f, memory)
        }
        Method::Mmu => (4 * f, 8 * f, 0, epochs * nb_f, full_state + p),
        Method::OracleRetrain => (f, 2 * f, 0, epochs * nb_r, full_state),
    };
    let per_batch = fwd + bwd + edit;
    let total_flops = match method {
        // retain coefficients come from one forward sweep over the retain set
        Method::Kvw => {
            let retain = params.retain_size as u128 * forward_flops(&params.shape, params.seq_len)
                + nb_r * params.batch_accumulate();
            retain + batches * per_batch
        }
        _ => batches * per_batch,
    };
    Ok(CostReport {
        method: method.to_string(),
        batch_forward_flops: fwd,
        batch_backward_flops: bwd,
        batch_edit_flops: edit,
        per_batch_flops: per_batch,
        batches,
        total_flops,
        total_backward_flops: batches * bwd,
        peak_memory_words: memory,
    })
}
