//! Answer-token knowledge coefficients.
//!
//! A forward pass yields, per layer, the vector of FFN coefficients at every
//! position. Extraction keeps the selected positions (answer tokens, or all
//! tokens for the ablation), takes magnitudes, and averages them with equal
//! weight per `(example, position)` pair.

mod cache;
mod dataset;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KvwError, Result};
use crate::model::{forward, ForwardTrace, ModelConfig, ModelWeights};

pub use cache::{load_coeffs, read_coeffs, save_coeffs, write_coeffs};
pub use dataset::{read_dataset, read_dataset_str, write_dataset, write_dataset_string, DatasetRecord};

/// A pre-tokenized sequence with its answer span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenExample {
    pub tokens: Vec<u32>,
    pub answer_mask: Vec<bool>,
}

impl TokenExample {
    /// Example whose answer occupies the half-open span `[start, end)`.
    pub fn with_answer_span(tokens: Vec<u32>, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > tokens.len() {
            return Err(KvwError::Input(format!(
                "answer span [{start}, {end}) invalid for sequence of length {}",
                tokens.len()
            )));
        }
        let answer_mask = (0..tokens.len()).map(|i| i >= start && i < end).collect();
        Ok(Self { tokens, answer_mask })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.tokens.len() != self.answer_mask.len() {
            return Err(KvwError::Input(format!(
                "answer mask length {} differs from sequence length {}",
                self.answer_mask.len(),
                self.tokens.len()
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(KvwError::Input(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Positions that contribute to the coefficient average.
    pub fn selected_positions(&self, ans_only: bool) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| !ans_only || self.answer_mask[i])
            .collect()
    }

    /// `(start, end)` of the answer span if the mask is one contiguous run.
    pub fn answer_span(&self) -> Option<(usize, usize)> {
        let start = self.answer_mask.iter().position(|&b| b)?;
        let len = self.answer_mask[start..].iter().take_while(|&&b| b).count();
        let end = start + len;
        self.answer_mask[end..].iter().all(|&b| !b).then_some((start, end))
    }
}

/// SHA-256 over the examples in order; identifies a dataset and its ordering.
pub fn dataset_hash(examples: &[TokenExample]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((examples.len() as u64).to_le_bytes());
    for ex in examples {
        h.update((ex.tokens.len() as u64).to_le_bytes());
        for &t in &ex.tokens {
            h.update(t.to_le_bytes());
        }
        for &b in &ex.answer_mask {
            h.update([b as u8]);
        }
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Forget,
    Retain,
}

/// How raw (possibly negative) coefficients become nonnegative means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientMode {
    /// Mean of `|c|`.
    #[default]
    Magnitude,
    /// Mean of raw `c`, clamped at zero afterwards.
    ClampedMean,
}

/// Per-layer mean coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeCoefficients {
    pub per_layer: Vec<Vec<f32>>,
    /// Number of `(example, position)` pairs averaged.
    pub token_count: u64,
    pub source: Source,
    pub ans_only: bool,
    pub mode: CoefficientMode,
    pub dataset_hash: [u8; 32],
}

impl KnowledgeCoefficients {
    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn dim(&self) -> usize {
        self.per_layer.first().map_or(0, Vec::len)
    }

    /// Fails unless these coefficients fit a model with `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.num_layers() != config.num_layers || self.dim() != config.ffn_dim {
            return Err(KvwError::Compatibility(format!(
                "coefficients are {} layers × {}, model is {} layers × {}",
                self.num_layers(),
                self.dim(),
                config.num_layers,
                config.ffn_dim
            )));
        }
        if self.token_count == 0 {
            return Err(KvwError::Compatibility("coefficients average zero tokens".into()));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.per_layer.iter().flatten().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Running per-layer sums; merging is associative so partial accumulators
/// from parallel workers can be combined in any grouping.
#[derive(Debug, Clone)]
pub struct CoefficientAccumulator {
    sums: Vec<Vec<f64>>,
    count: u64,
    mode: CoefficientMode,
}

impl CoefficientAccumulator {
    pub fn new(num_layers: usize, dim: usize, mode: CoefficientMode) -> Self {
        Self {
            sums: vec![vec![0.0; dim]; num_layers],
            count: 0,
            mode,
        }
    }

    pub fn add_positions(&mut self, trace: &ForwardTrace, positions: &[usize]) {
        for (sum, coeffs) in self.sums.iter_mut().zip(&trace.coefficients) {
            for &t in positions {
                for (s, &c) in sum.iter_mut().zip(coeffs.row(t)) {
                    *s += match self.mode {
                        CoefficientMode::Magnitude => (c as f64).abs(),
                        CoefficientMode::ClampedMean => c as f64,
                    };
                }
            }
        }
        self.count += positions.len() as u64;
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(
        &self,
        source: Source,
        ans_only: bool,
        dataset_hash: [u8; 32],
    ) -> Result<KnowledgeCoefficients> {
        if self.count == 0 {
            return Err(KvwError::EmptySelection("no positions selected".into()));
        }
        let n = self.count as f64;
        let per_layer = self
            .sums
            .iter()
            .map(|s| s.iter().map(|&v| (v / n).max(0.0) as f32).collect())
            .collect();
        Ok(KnowledgeCoefficients {
            per_layer,
            token_count: self.count,
            source,
            ans_only,
            mode: self.mode,
            dataset_hash,
        })
    }
}

/// Options shared by single-example extraction and dataset accumulation.
#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    pub ans_only: bool,
    pub mode: CoefficientMode,
    pub source: Source,
}

impl ExtractOptions {
    pub fn new(source: Source, ans_only: bool) -> Self {
        Self {
            ans_only,
            mode: CoefficientMode::Magnitude,
            source,
        }
    }
}

fn accumulate_example(
    example: &TokenExample,
    weights: &ModelWeights,
    config: &ModelConfig,
    opts: &ExtractOptions,
) -> Result<CoefficientAccumulator> {
    example.validate(config)?;
    let positions = example.selected_positions(opts.ans_only);
    if positions.is_empty() {
        return Err(KvwError::EmptySelection(
            "example has no answer tokens but answer-only extraction was requested".into(),
        ));
    }
    let trace = forward(&example.tokens, weights, config)?;
    let mut acc = CoefficientAccumulator::new(config.num_layers, config.ffn_dim, opts.mode);
    acc.add_positions(&trace, &positions);
    Ok(acc)
}

/// Mean coefficient magnitudes of one example over its selected positions.
pub fn extract_coefficients(
    example: &TokenExample,
    weights: &ModelWeights,
    config: &ModelConfig,
    opts: &ExtractOptions,
) -> Result<KnowledgeCoefficients> {
    let acc = accumulate_example(example, weights, config, opts)?;
    acc.finish(opts.source, opts.ans_only, dataset_hash(std::slice::from_ref(example)))
}

/// Pooled mean over every selected `(example, position)` pair of a dataset.
///
/// Examples are forwarded in parallel; partial sums are merged in dataset
/// order, so the result does not depend on scheduling.
pub fn accumulate(
    examples: &[TokenExample],
    weights: &ModelWeights,
    config: &ModelConfig,
    opts: &ExtractOptions,
) -> Result<KnowledgeCoefficients> {
    if examples.is_empty() {
        return Err(KvwError::Input("cannot accumulate over an empty dataset".into()));
    }
    let partials: Vec<CoefficientAccumulator> = examples
        .par_iter()
        .map(|ex| accumulate_example(ex, weights, config, opts))
        .collect::<Result<_>>()?;
    let mut total = CoefficientAccumulator::new(config.num_layers, config.ffn_dim, opts.mode);
    for p in &partials {
        total.merge(p);
    }
    total.finish(opts.source, opts.ans_only, dataset_hash(examples))
}
