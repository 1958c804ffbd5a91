//! Constrained selection and the two-fold protocol.

use serde::{Deserialize, Serialize};

use super::check_floor;
use crate::error::{KvwError, Result};
use crate::kvw::KvwConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub forget: f64,
    pub retain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Chosen(usize),
    NoFeasible,
}

/// Among points with `retain >= floor * vanilla_retain`, the one with the
/// lowest forget score; ties go to higher retain, then to the earlier point.
pub fn select_under_constraint(points: &[ScorePoint], vanilla_retain: f64, floor: f64) -> Result<Selection> {
    if points.is_empty() {
        return Err(KvwError::Input("selection grid is empty".into()));
    }
    if !(vanilla_retain.is_finite() && vanilla_retain > 0.0) {
        return Err(KvwError::Input(format!("vanilla retain score must be positive, got {vanilla_retain}")));
    }
    check_floor(floor)?;
    let bar = floor * vanilla_retain;
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        if !(p.retain >= bar) || p.forget.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let q = points[b];
                p.forget < q.forget || (p.forget == q.forget && p.retain > q.retain)
            }
        };
        if better {
            best = Some(i);
        }
    }
    Ok(best.map_or(Selection::NoFeasible, Selection::Chosen))
}

/// Scores of every grid configuration on both test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSurface {
    pub configs: Vec<KvwConfig>,
    pub test1: Vec<ScorePoint>,
    pub test2: Vec<ScorePoint>,
    pub vanilla1: ScorePoint,
    pub vanilla2: ScorePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Split used for selection (1 or 2); the other one is held out.
    pub select_on: u8,
    pub chosen: Option<usize>,
    pub config: Option<KvwConfig>,
    pub selected: Option<ScorePoint>,
    pub held_out: Option<ScorePoint>,
    /// `held_out - selected`, per score.
    pub gap: Option<ScorePoint>,
    pub held_out_meets_floor: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoFoldReport {
    pub retain_floor: f64,
    pub folds: Vec<FoldResult>,
}

impl TwoFoldReport {
    pub fn any_infeasible(&self) -> bool {
        self.folds.iter().any(|f| f.chosen.is_none())
    }
}

/// Fold 1 selects on split 1 and reports split 2; fold 2 the reverse.
pub fn two_fold_protocol(surface: &FoldSurface, floor: f64) -> Result<TwoFoldReport> {
    let n = surface.configs.len();
    if n == 0 {
        return Err(KvwError::Input("two-fold protocol needs a nonempty grid".into()));
    }
    if surface.test1.len() != n || surface.test2.len() != n {
        return Err(KvwError::Input("score surfaces do not match the grid".into()));
    }
    let fold = |select_on: u8, sel: &[ScorePoint], sel_vanilla: ScorePoint, held: &[ScorePoint], held_vanilla: ScorePoint| {
        let choice = select_under_constraint(sel, sel_vanilla.retain, floor)?;
        Ok::<_, KvwError>(match choice {
            Selection::Chosen(i) => FoldResult {
                select_on,
                chosen: Some(i),
                config: Some(surface.configs[i].clone()),
                selected: Some(sel[i]),
                held_out: Some(held[i]),
                gap: Some(ScorePoint {
                    forget: held[i].forget - sel[i].forget,
                    retain: held[i].retain - sel[i].retain,
                }),
                held_out_meets_floor: Some(held[i].retain >= floor * held_vanilla.retain),
            },
            Selection::NoFeasible => FoldResult {
                select_on,
                chosen: None,
                config: None,
                selected: None,
                held_out: None,
                gap: None,
                held_out_meets_floor: None,
            },
        })
    };
    Ok(TwoFoldReport {
        retain_floor: floor,
        folds: vec![
            fold(1, &surface.test1, surface.vanilla1, &surface.test2, surface.vanilla2)?,
            fold(2, &surface.test2, surface.vanilla2, &surface.test1, surface.vanilla1)?,
        ],
    })
}
