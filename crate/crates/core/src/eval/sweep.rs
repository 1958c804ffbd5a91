//! γ and layer-range sweeps, the ablation table, and grid surfaces for the
//! two-fold protocol.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{check_floor, EvalSuite, FoldSurface, GridRow, ProtocolConfig, ScorePoint};
use crate::error::{KvwError, Result};
use crate::kvw::KvwConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSweep {
    pub seed: u64,
    pub retain_floor: f64,
    pub vanilla: ScorePoint,
    pub rows: Vec<GridRow>,
    pub feasible_gammas: Vec<f64>,
    /// Length of the longest run of consecutive feasible grid points.
    pub longest_feasible_run: usize,
    /// Forget recall never increases along the grid.
    pub forget_monotone: bool,
}

impl GammaSweep {
    /// Middle feasible γ (the lower one for an even count).
    pub fn median_feasible_gamma(&self) -> Option<f64> {
        let n = self.feasible_gammas.len();
        (n > 0).then(|| self.feasible_gammas[(n - 1) / 2])
    }

    pub fn retain_spread(&self) -> f64 {
        spread(self.rows.iter().map(|r| r.retain_acc))
    }
}

fn spread(xs: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

pub fn gamma_sweep(suite: &EvalSuite, base: &KvwConfig, gammas: &[f64], floor: f64) -> Result<GammaSweep> {
    check_floor(floor)?;
    if gammas.is_empty() {
        return Err(KvwError::Input("γ list is empty".into()));
    }
    if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(KvwError::Input("γ values must be finite and nonnegative".into()));
    }
    if gammas.windows(2).any(|w| w[0] > w[1]) {
        return Err(KvwError::Input("γ list must be sorted ascending".into()));
    }
    let configs: Vec<KvwConfig> = gammas
        .iter()
        .map(|&gamma| KvwConfig {
            gamma,
            ..base.clone()
        })
        .collect();
    let vanilla = suite.vanilla()?.scores();
    let hits = suite.run_grid(&configs)?;
    let rows: Vec<GridRow> = configs
        .iter()
        .zip(&hits)
        .map(|(c, h)| suite.row("gamma", c, h.scores(), vanilla, floor))
        .collect();
    let feasible_gammas = rows.iter().filter(|r| r.feasible).map(|r| r.gamma).collect();
    let mut longest_feasible_run = 0;
    let mut run = 0;
    for r in &rows {
        run = if r.feasible { run + 1 } else { 0 };
        longest_feasible_run = longest_feasible_run.max(run);
    }
    let forget_monotone = rows.windows(2).all(|w| w[1].forget_acc <= w[0].forget_acc);
    Ok(GammaSweep {
        seed: suite.seed,
        retain_floor: floor,
        vanilla,
        rows,
        feasible_gammas,
        longest_feasible_run,
        forget_monotone,
    })
}

/// Splits `0..num_layers` into `count` contiguous buckets of size
/// `num_layers / count`; the first `num_layers % count` buckets take one
/// extra layer each.
pub fn layer_buckets(num_layers: usize, count: usize) -> Result<Vec<Range<usize>>> {
    if count == 0 || num_layers < count {
        return Err(KvwError::Config(format!(
            "cannot split {num_layers} layers into {count} buckets"
        )));
    }
    let base = num_layers / count;
    let extra = num_layers % count;
    let mut start = 0;
    Ok((0..count)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Start layers from the first bucket crossed with end layers from the last.
/// With a single bucket the inverted pairs are dropped.
pub fn layer_candidates(num_layers: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    let buckets = layer_buckets(num_layers, count)?;
    let first = buckets[0].clone();
    let last = buckets[count - 1].clone();
    Ok(first
        .flat_map(|s| last.clone().map(move |e| (s, e)))
        .filter(|(s, e)| s <= e)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub seed: u64,
    pub retain_floor: f64,
    pub bucket_count: usize,
    pub vanilla: ScorePoint,
    pub rows: Vec<GridRow>,
    pub forget_spread: f64,
    pub retain_spread: f64,
}

pub fn layer_sweep(suite: &EvalSuite, base: &KvwConfig, bucket_count: usize, floor: f64) -> Result<LayerSweep> {
    check_floor(floor)?;
    let configs: Vec<KvwConfig> = layer_candidates(suite.config.num_layers, bucket_count)?
        .into_iter()
        .map(|(start_layer, end_layer)| KvwConfig {
            start_layer,
            end_layer,
            ..base.clone()
        })
        .collect();
    let vanilla = suite.vanilla()?.scores();
    let hits = suite.run_grid(&configs)?;
    let rows: Vec<GridRow> = configs
        .iter()
        .zip(&hits)
        .map(|(c, h)| suite.row("layers", c, h.scores(), vanilla, floor))
        .collect();
    Ok(LayerSweep {
        seed: suite.seed,
        retain_floor: floor,
        bucket_count,
        vanilla,
        forget_spread: spread(rows.iter().map(|r| r.forget_acc)),
        retain_spread: spread(rows.iter().map(|r| r.retain_acc)),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub seed: u64,
    pub retain_floor: f64,
    pub vanilla: ScorePoint,
    /// `ans_only_off`, `use_retain_off`, `both_on`, in that order.
    pub rows: Vec<GridRow>,
}

impl Ablation {
    pub fn row(&self, label: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// `base` with each option switched off in turn, then both on.
pub fn ablation_run(suite: &EvalSuite, base: &KvwConfig, floor: f64) -> Result<Ablation> {
    check_floor(floor)?;
    let variants = [
        ("ans_only_off", false, true),
        ("use_retain_off", true, false),
        ("both_on", true, true),
    ];
    let configs: Vec<KvwConfig> = variants
        .iter()
        .map(|&(_, ans_only, use_retain)| KvwConfig {
            ans_only,
            use_retain,
            ..base.clone()
        })
        .collect();
    let vanilla = suite.vanilla()?.scores();
    let hits = suite.run_grid(&configs)?;
    let rows = variants
        .iter()
        .zip(&configs)
        .zip(&hits)
        .map(|((&(label, _, _), c), h)| suite.row(label, c, h.scores(), vanilla, floor))
        .collect();
    Ok(Ablation {
        seed: suite.seed,
        retain_floor: floor,
        vanilla,
        rows,
    })
}

/// Runs the whole protocol grid and scores each configuration on both
/// halves of the fact lists (even indices form split 1, odd split 2).
pub fn two_fold_surface(suite: &EvalSuite, protocol: &ProtocolConfig) -> Result<FoldSurface> {
    if suite.forget_facts.len() < 2 || suite.retain_facts.len() < 2 {
        return Err(KvwError::Input(
            "two-fold protocol needs at least two forget and two retain facts".into(),
        ));
    }
    let configs = protocol.candidates(suite.config.num_layers)?;
    let vanilla = suite.vanilla()?;
    let hits = suite.run_grid(&configs)?;
    Ok(FoldSurface {
        test1: hits.iter().map(|h| h.split_scores(0)).collect(),
        test2: hits.iter().map(|h| h.split_scores(1)).collect(),
        vanilla1: vanilla.split_scores(0),
        vanilla2: vanilla.split_scores(1),
        configs,
    })
}
