//! Selection protocol, sweeps, ablations and the analytic cost model.
//!
//! "Retain performance" here is retain-fact recall on a planted-fact suite.
//! A grid point is feasible when forget recall is exactly zero and retain
//! recall is at least `retain_floor` times the unedited model's.

mod cost;
mod report;
mod select;
mod sweep;

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{accumulate, CoefficientMode, ExtractOptions, KnowledgeCoefficients, Source, TokenExample};
use crate::error::{KvwError, Result};
use crate::kvw::{kvw_unlearn, KvwConfig, DEFAULT_EPS};
use crate::model::{ModelConfig, ModelWeights};
use crate::synth::{answer_hits, FactSpec, LoadedSuite, SynthModel};

pub use cost::{flop_account, forward_flops, forward_macs, CostParams, CostReport, Method, ModelShape, Objective};
pub use report::{read_rows_csv, write_json, write_rows_csv};
pub use select::{select_under_constraint, two_fold_protocol, FoldResult, FoldSurface, ScorePoint, Selection, TwoFoldReport};
pub use sweep::{
    ablation_run, gamma_sweep, layer_buckets, layer_candidates, layer_sweep, two_fold_surface, Ablation, GammaSweep,
    LayerSweep,
};

pub const DEFAULT_RETAIN_FLOOR: f64 = 0.95;

/// γ values used by sweeps when none are given.
pub const DEFAULT_GAMMAS: [f64; 17] = [
    0.0, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0, 50.0, 100.0,
];

/// Candidate grid and retain floor for constrained selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub retain_floor: f64,
    pub gammas: Vec<f64>,
    /// `(start_layer, end_layer)` pairs; empty means the whole model.
    pub layer_ranges: Vec<(usize, usize)>,
    pub ans_only: Vec<bool>,
    pub use_retain: Vec<bool>,
    pub batch_size: usize,
    pub eps: f64,
    pub mode: CoefficientMode,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            retain_floor: DEFAULT_RETAIN_FLOOR,
            gammas: DEFAULT_GAMMAS.to_vec(),
            layer_ranges: Vec::new(),
            ans_only: vec![true],
            use_retain: vec![true],
            batch_size: 8,
            eps: DEFAULT_EPS,
            mode: CoefficientMode::Magnitude,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        check_floor(self.retain_floor)?;
        if self.gammas.is_empty() || self.ans_only.is_empty() || self.use_retain.is_empty() {
            return Err(KvwError::Config("candidate grid is empty".into()));
        }
        Ok(())
    }

    /// Every grid point in selection order: γ outermost, then layer range,
    /// `ans_only`, `use_retain`.
    pub fn candidates(&self, num_layers: usize) -> Result<Vec<KvwConfig>> {
        self.validate()?;
        let ranges = if self.layer_ranges.is_empty() {
            vec![(0, num_layers.saturating_sub(1))]
        } else {
            self.layer_ranges.clone()
        };
        let mut out = Vec::new();
        for &gamma in &self.gammas {
            for &(start_layer, end_layer) in &ranges {
                for &ans_only in &self.ans_only {
                    for &use_retain in &self.use_retain {
                        let cfg = KvwConfig {
                            gamma,
                            start_layer,
                            end_layer,
                            eps: self.eps,
                            ans_only,
                            use_retain,
                            batch_size: self.batch_size,
                            mode: self.mode,
                        };
                        cfg.validate(num_layers)?;
                        out.push(cfg);
                    }
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn check_floor(floor: f64) -> Result<()> {
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(KvwError::Config(format!("retain_floor must be in (0, 1], got {floor}")));
    }
    Ok(())
}

/// One evaluated configuration, as written to CSV reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub gamma: f64,
    pub start_layer: usize,
    pub end_layer: usize,
    pub ans_only: bool,
    pub use_retain: bool,
    pub forget_acc: f64,
    pub retain_acc: f64,
    pub feasible: bool,
    pub seed: u64,
}

/// Everything needed to edit and score a model: weights, the facts that are
/// scored, and the datasets that drive unlearning and retain extraction.
///
/// Shared facts (present in both datasets) are scored in neither list.
#[derive(Debug)]
pub struct EvalSuite {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub forget_facts: Vec<FactSpec>,
    pub retain_facts: Vec<FactSpec>,
    pub forget: Vec<TokenExample>,
    pub retain: Vec<TokenExample>,
    pub seed: u64,
    retain_cache: [OnceLock<KnowledgeCoefficients>; 4],
}

/// Forget and retain recall of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactHits {
    pub forget: Vec<bool>,
    pub retain: Vec<bool>,
}

impl FactHits {
    pub fn scores(&self) -> ScorePoint {
        ScorePoint {
            forget: fraction(self.forget.iter()),
            retain: fraction(self.retain.iter()),
        }
    }

    /// Scores restricted to one half of each fact list (`fold` 0 takes even
    /// indices, 1 odd).
    pub fn split_scores(&self, fold: usize) -> ScorePoint {
        let pick = |h: &Vec<bool>| -> Vec<bool> { h.iter().skip(fold).step_by(2).copied().collect() };
        ScorePoint {
            forget: fraction(pick(&self.forget).iter()),
            retain: fraction(pick(&self.retain).iter()),
        }
    }
}

fn fraction<'a>(hits: impl ExactSizeIterator<Item = &'a bool>) -> f64 {
    let n = hits.len();
    if n == 0 {
        return 0.0;
    }
    hits.filter(|h| **h).count() as f64 / n as f64
}

impl EvalSuite {
    pub fn new(
        config: ModelConfig,
        weights: ModelWeights,
        forget_facts: Vec<FactSpec>,
        retain_facts: Vec<FactSpec>,
        forget: Vec<TokenExample>,
        retain: Vec<TokenExample>,
        seed: u64,
    ) -> Self {
        Self {
            config,
            weights,
            forget_facts,
            retain_facts,
            forget,
            retain,
            seed,
            retain_cache: Default::default(),
        }
    }

    pub fn from_synth(model: &SynthModel) -> Self {
        Self::new(
            model.config.clone(),
            model.weights.clone(),
            model.forget_facts.clone(),
            model.retain_facts.clone(),
            model.forget_dataset(),
            model.retain_dataset(),
            model.options.seed,
        )
    }

    pub fn from_loaded(suite: LoadedSuite) -> Self {
        Self::new(
            suite.config,
            suite.weights,
            suite.manifest.forget_facts,
            suite.manifest.retain_facts,
            suite.forget,
            suite.retain,
            suite.manifest.seed,
        )
    }

    /// Retain coefficients for one extraction setting, computed once.
    pub fn retain_coeffs(&self, ans_only: bool, mode: CoefficientMode) -> Result<&KnowledgeCoefficients> {
        let slot = &self.retain_cache[usize::from(ans_only) * 2 + usize::from(mode == CoefficientMode::ClampedMean)];
        if let Some(c) = slot.get() {
            return Ok(c);
        }
        let opts = ExtractOptions {
            ans_only,
            mode,
            source: Source::Retain,
        };
        let c = accumulate(&self.retain, &self.weights, &self.config, &opts)?;
        Ok(slot.get_or_init(|| c))
    }

    pub fn hits(&self, weights: &ModelWeights) -> Result<FactHits> {
        let queries = |facts: &[FactSpec]| facts.iter().map(FactSpec::query).collect::<Vec<_>>();
        Ok(FactHits {
            forget: answer_hits(weights, &self.config, &queries(&self.forget_facts))?,
            retain: answer_hits(weights, &self.config, &queries(&self.retain_facts))?,
        })
    }

    /// Unedited model's hits.
    pub fn vanilla(&self) -> Result<FactHits> {
        self.hits(&self.weights)
    }

    /// Applies one configuration to a private copy of the model.
    pub fn unlearn(&self, cfg: &KvwConfig) -> Result<ModelWeights> {
        let retain = if cfg.use_retain {
            Some(self.retain_coeffs(cfg.ans_only, cfg.mode)?)
        } else {
            None
        };
        Ok(kvw_unlearn(&self.weights, &self.config, &self.forget, retain, cfg)?.0)
    }

    pub fn run(&self, cfg: &KvwConfig) -> Result<FactHits> {
        self.hits(&self.unlearn(cfg)?)
    }

    /// Runs every configuration; results come back in input order.
    pub fn run_grid(&self, configs: &[KvwConfig]) -> Result<Vec<FactHits>> {
        // fill the retain caches up front so workers only read them
        for cfg in configs.iter().filter(|c| c.use_retain) {
            self.retain_coeffs(cfg.ans_only, cfg.mode)?;
        }
        configs.par_iter().map(|cfg| self.run(cfg)).collect()
    }

    pub(crate) fn row(&self, label: &str, cfg: &KvwConfig, s: ScorePoint, vanilla: ScorePoint, floor: f64) -> GridRow {
        GridRow {
            label: label.to_string(),
            gamma: cfg.gamma,
            start_layer: cfg.start_layer,
            end_layer: cfg.end_layer,
            ans_only: cfg.ans_only,
            use_retain: cfg.use_retain,
            forget_acc: s.forget,
            retain_acc: s.retain,
            feasible: is_feasible(s, vanilla, floor),
            seed: self.seed,
        }
    }
}

/// Forget recall exactly zero and retain recall at or above the floor.
pub fn is_feasible(s: ScorePoint, vanilla: ScorePoint, floor: f64) -> bool {
    s.forget == 0.0 && s.retain >= floor * vanilla.retain
}
