//! Knowledge vector weakening.
//!
//! For each forget batch the live model is run forward, forget coefficients
//! `C_f` are extracted and compared against frozen retain coefficients `C_r`:
//!
//! ```text
//! A_i = max(0, ln(max(C_f_i, eps) / max(C_r_i, eps)))
//! g_i = exp(-gamma * A_i)
//! v_i <- g_i * v_i          for every layer in [start_layer, end_layer]
//! ```
//!
//! Rows the forget set does not use more than the retain set get `g = 1`
//! and are left bit-identical.

use serde::{Deserialize, Serialize};

use crate::coeffs::{accumulate, dataset_hash, CoefficientMode, ExtractOptions, KnowledgeCoefficients, Source, TokenExample};
use crate::error::{KvwError, Result};
use crate::model::{ModelConfig, ModelWeights};

pub const DEFAULT_EPS: f64 = 1e-8;

/// Rows whose gate is below this threshold count as weakened in summaries.
const WEAKENED_BELOW: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvwConfig {
    pub gamma: f64,
    pub start_layer: usize,
    pub end_layer: usize,
    pub eps: f64,
    pub ans_only: bool,
    pub use_retain: bool,
    pub batch_size: usize,
    pub mode: CoefficientMode,
}

impl Default for KvwConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            start_layer: 0,
            end_layer: 0,
            eps: DEFAULT_EPS,
            ans_only: true,
            use_retain: true,
            batch_size: 8,
            mode: CoefficientMode::Magnitude,
        }
    }
}

impl KvwConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        check_range(self.start_layer, self.end_layer, num_layers)?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(KvwError::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(KvwError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.batch_size == 0 {
            return Err(KvwError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn extract_options(&self) -> ExtractOptions {
        ExtractOptions {
            ans_only: self.ans_only,
            mode: self.mode,
            source: Source::Forget,
        }
    }
}

fn check_range(start: usize, end: usize, num_layers: usize) -> Result<()> {
    if start > end || end >= num_layers {
        return Err(KvwError::Config(format!(
            "layer range [{start}, {end}] invalid for a {num_layers}-layer model"
        )));
    }
    Ok(())
}

/// Per-layer, per-row nonnegative log-ratio of forget to retain activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetKnowledgeAccessor {
    pub per_layer: Vec<Vec<f64>>,
}

/// Per-layer, per-row multiplicative gates in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub per_layer: Vec<Vec<f64>>,
}

pub fn compute_fka(
    c_f: &KnowledgeCoefficients,
    c_r: &KnowledgeCoefficients,
    eps: f64,
) -> Result<ForgetKnowledgeAccessor> {
    if c_f.num_layers() != c_r.num_layers()
        || c_f.per_layer.iter().zip(&c_r.per_layer).any(|(a, b)| a.len() != b.len())
    {
        return Err(KvwError::Compatibility(format!(
            "forget coefficients are {} layers × {}, retain coefficients {} layers × {}",
            c_f.num_layers(),
            c_f.dim(),
            c_r.num_layers(),
            c_r.dim()
        )));
    }
    let per_layer = c_f
        .per_layer
        .iter()
        .zip(&c_r.per_layer)
        .map(|(f, r)| {
            f.iter()
                .zip(r)
                .map(|(&f, &r)| ((f as f64).max(eps) / (r as f64).max(eps)).ln().max(0.0))
                .collect()
        })
        .collect();
    Ok(ForgetKnowledgeAccessor { per_layer })
}

pub fn gate(a: &ForgetKnowledgeAccessor, gamma: f64) -> GateVector {
    GateVector {
        per_layer: a
            .per_layer
            .iter()
            .map(|l| l.iter().map(|&a| (-gamma * a).exp()).collect())
            .collect(),
    }
}

/// Stand-in for `C_r` when the retain set is disabled: every row of a layer
/// gets that layer's mean forget coefficient.
pub fn layer_mean_substitute(c_f: &KnowledgeCoefficients) -> KnowledgeCoefficients {
    let per_layer = c_f
        .per_layer
        .iter()
        .map(|l| {
            let mean = l.iter().map(|&v| v as f64).sum::<f64>() / l.len().max(1) as f64;
            vec![mean as f32; l.len()]
        })
        .collect();
    KnowledgeCoefficients {
        per_layer,
        source: Source::Retain,
        ..c_f.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEdit {
    pub layer: usize,
    pub rows_weakened: usize,
    pub min_gate: f64,
    pub mean_gate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EditSummary {
    pub layers: Vec<LayerEdit>,
}

impl EditSummary {
    pub fn rows_weakened(&self) -> usize {
        self.layers.iter().map(|l| l.rows_weakened).sum()
    }
}

/// Scales row `i` of each FFN value matrix in `[start, end]` by its gate.
/// Everything is validated before the first write, so a failure leaves the
/// weights untouched.
pub fn apply_weakening(
    weights: &mut ModelWeights,
    g: &GateVector,
    start: usize,
    end: usize,
) -> Result<EditSummary> {
    check_range(start, end, weights.layers.len())?;
    if g.per_layer.len() != weights.layers.len() {
        return Err(KvwError::Compatibility(format!(
            "gate covers {} layers, model has {}",
            g.per_layer.len(),
            weights.layers.len()
        )));
    }
    for l in start..=end {
        let rows = weights.layers[l].ffn_value.rows();
        if g.per_layer[l].len() != rows {
            return Err(KvwError::Compatibility(format!(
                "layer {l}: gate has {} entries, value matrix has {rows} rows",
                g.per_layer[l].len()
            )));
        }
    }

    let mut summary = EditSummary::default();
    for l in start..=end {
        let gates = &g.per_layer[l];
        let value = &mut weights.layers[l].ffn_value;
        let mut weakened = 0;
        for (i, &gi) in gates.iter().enumerate() {
            if gi < WEAKENED_BELOW {
                weakened += 1;
            }
            if gi != 1.0 {
                let s = gi as f32;
                for v in value.row_mut(i) {
                    *v *= s;
                }
            }
        }
        summary.layers.push(LayerEdit {
            layer: l,
            rows_weakened: weakened,
            min_gate: gates.iter().copied().fold(1.0, f64::min),
            mean_gate: gates.iter().sum::<f64>() / gates.len().max(1) as f64,
        });
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub index: usize,
    pub size: usize,
    /// Mean of `A` over the edited layers.
    pub mean_a: f64,
    /// Mean gate over the edited layers.
    pub mean_gate: f64,
    pub rows_weakened: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: KvwConfig,
    pub num_examples: usize,
    pub num_batches: usize,
    /// Hex SHA-256 of the forget examples in processing order.
    pub order_hash: String,
    pub batches: Vec<BatchReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_model: Option<String>,
}

/// Runs the progressive weakening loop and returns the edited copy.
///
/// `retain` must be present when `cfg.use_retain` is set; it is never
/// refreshed between batches.
pub fn kvw_unlearn(
    weights: &ModelWeights,
    config: &ModelConfig,
    forget: &[TokenExample],
    retain: Option<&KnowledgeCoefficients>,
    cfg: &KvwConfig,
) -> Result<(ModelWeights, RunReport)> {
    cfg.validate(config.num_layers)?;
    let retain = if cfg.use_retain {
        let r = retain.ok_or_else(|| KvwError::Config("retain coefficients required unless use_retain is off".into()))?;
        r.check_compatible(config)?;
        if r.ans_only != cfg.ans_only || r.mode != cfg.mode {
            return Err(KvwError::Compatibility(format!(
                "retain coefficients were extracted with ans_only={} mode={:?}, run uses ans_only={} mode={:?}",
                r.ans_only, r.mode, cfg.ans_only, cfg.mode
            )));
        }
        Some(r)
    } else {
        None
    };

    let mut edited = weights.clone();
    let mut batches = Vec::new();
    for (index, batch) in forget.chunks(cfg.batch_size).enumerate() {
        let c_f = accumulate(batch, &edited, config, &cfg.extract_options())?;
        let substitute;
        let c_r = match retain {
            Some(r) => r,
            None => {
                substitute = layer_mean_substitute(&c_f);
                &substitute
            }
        };
        let a = compute_fka(&c_f, c_r, cfg.eps)?;
        let g = gate(&a, cfg.gamma);
        let summary = apply_weakening(&mut edited, &g, cfg.start_layer, cfg.end_layer)?;

        let range = cfg.start_layer..=cfg.end_layer;
        let edited_rows: usize = range.clone().map(|l| a.per_layer[l].len()).sum();
        let mean_a = range.clone().flat_map(|l| a.per_layer[l].iter()).sum::<f64>() / edited_rows as f64;
        let mean_gate = range.flat_map(|l| g.per_layer[l].iter()).sum::<f64>() / edited_rows as f64;
        batches.push(BatchReport {
            index,
            size: batch.len(),
            mean_a,
            mean_gate,
            rows_weakened: summary.layers.iter().map(|l| l.rows_weakened).collect(),
        });
    }
    edited.check_finite()?;

    let report = RunReport {
        config: cfg.clone(),
        num_examples: forget.len(),
        num_batches: batches.len(),
        order_hash: hex::encode(dataset_hash(forget)),
        batches,
        output_model: None,
    };
    Ok((edited, report))
}
