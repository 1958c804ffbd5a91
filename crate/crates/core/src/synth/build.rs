//! Planted-fact construction.
//!
//! Background weights are small noise around a residual stream that mixes
//! each position with its prefix. In the planted layer, keys are fitted
//! against the actual normalized FFN inputs of every query so each fact slot
//! fires at its own prompt and answer positions (and more weakly on its
//! subject token), one support row per relation fires on every query of that
//! relation, and everything else stays at or below zero. Values are then scaled by a deterministic
//! grid search until recall holds with a margin.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{FactSpec, RelationRow, SynthModel, SynthOptions};
use crate::error::{KvwError, Result};
use crate::model::{forward, last_logits_from, residual_before, FfnVariant, ModelConfig, ModelWeights};
use crate::tensor::argmax;
use rayon::prelude::*;
use crate::tensor::Matrix;

/// Candidate value scales, tried in ascending order.
fn scale_grid() -> Vec<f32> {
    (0..96).map(|k| 0.05 * 1.1f32.powi(k)).collect()
}

struct Layout {
    facts: Vec<FactSpec>,
    n_forget: usize,
    n_retain: usize,
    relation_rows: Vec<RelationRow>,
    n_subjects: usize,
}

fn layout(config: &ModelConfig, opts: &SynthOptions, layer: usize, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let (nf, nr, ns) = (opts.n_forget, opts.n_retain, opts.n_shared);
    let n_facts = nf + nr + ns;
    let rel = opts.n_relations;
    if rel == 0 {
        return Err(KvwError::Config("at least one relation is required".into()));
    }
    if n_facts == 0 {
        return Err(KvwError::Config("suite needs at least one fact".into()));
    }
    if n_facts + rel > config.ffn_dim {
        return Err(KvwError::Config(format!(
            "{n_facts} facts plus {rel} relation rows exceed ffn_dim {}",
            config.ffn_dim
        )));
    }
    // forget fact i shares its subject with retain fact i; other retain facts
    // come in groups of three per subject; shared facts get their own subject
    let paired = nf.min(nr);
    let grouped = nr - paired;
    let n_subjects = nf.max(paired) + grouped.div_ceil(3) + ns;
    let needed = 1 + n_subjects + rel + n_facts;
    if needed > config.vocab_size {
        return Err(KvwError::Config(format!(
            "suite needs {needed} token ids, vocabulary has {}",
            config.vocab_size
        )));
    }
    let subject_tok = |s: usize| (1 + s) as u32;
    let relation_tok = |r: usize| (1 + n_subjects + r) as u32;
    let answer_tok = |f: usize| (1 + n_subjects + rel + f) as u32;

    let slots = sample(rng, config.ffn_dim, n_facts + rel).into_vec();
    let mut facts = Vec::with_capacity(n_facts);
    let mut push = |subject: usize, relation: usize| {
        let id = facts.len();
        facts.push(FactSpec {
            id,
            subject_token: subject_tok(subject),
            relation_token: relation_tok(relation),
            answer_token: answer_tok(id),
            layer,
            slot: slots[id],
            strength: 1.0,
        });
    };
    for i in 0..nf {
        push(i, i % rel);
    }
    for j in 0..nr {
        let subject = if j < paired { j } else { nf.max(paired) + (j - paired) / 3 };
        push(subject, (j + 1) % rel);
    }
    for k in 0..ns {
        push(n_subjects - ns + k, k % rel);
    }
    let relation_rows = (0..rel)
        .map(|r| RelationRow {
            relation_token: relation_tok(r),
            layer,
            slot: slots[n_facts + r],
            strength: 1.0,
        })
        .collect();
    Ok(Layout {
        facts,
        n_forget: nf,
        n_retain: nr,
        relation_rows,
        n_subjects,
    })
}

fn background(config: &ModelConfig, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> (ModelWeights, Vec<f32>) {
    let d = config.d_model;
    let mut noise = |rows: usize, cols: usize, scale: f32| {
        Matrix::from_fn(rows, cols, |_, _| rng.sample::<f32, _>(StandardNormal) * scale)
    };
    let embedding = noise(config.vocab_size, d, 1.0);
    let position = noise(config.max_seq_len, d, 0.5);
    let mix = 2.0 / config.num_layers as f32;
    let layers = (0..config.num_layers)
        .map(|_| {
            let mut attn_v = noise(d, d, opts.noise);
            let mut attn_o = noise(d, d, opts.noise);
            for i in 0..d {
                attn_v.set(i, i, attn_v.get(i, i) + 1.0);
                attn_o.set(i, i, attn_o.get(i, i) + mix);
            }
            crate::model::LayerWeights {
                attn_norm: vec![1.0; d],
                attn_q: noise(d, d, opts.noise),
                attn_k: noise(d, d, opts.noise),
                attn_v,
                attn_o,
                ffn_norm: vec![1.0; d],
                ffn_key: noise(config.ffn_dim, d, opts.noise),
                ffn_gate: None,
                ffn_value: noise(config.ffn_dim, d, opts.noise),
            }
        })
        .collect();
    let class_dir = unit(noise(1, d, 1.0).row(0));
    // every token carries a small push away from the answer class, so an
    // answer only wins when the relation rows cancel it
    let mut embedding = embedding;
    for r in 0..config.vocab_size {
        for (e, c) in embedding.row_mut(r).iter_mut().zip(&class_dir) {
            *e -= opts.class_bias * c;
        }
    }
    let weights = ModelWeights {
        unembedding: embedding.clone(),
        embedding,
        position,
        layers,
        final_norm: vec![1.0; d],
    };
    (weights, class_dir)
}

/// Rewrites answer unembeddings as their embedding with the prompt-token
/// directions projected out, plus a fixed multiple of the class direction. Without this some
/// answers win by chance alignment with their own prompt and never depend on
/// their slot. Returns the unit value direction for each fact.
fn separate_answers(
    weights: &mut ModelWeights,
    facts: &[FactSpec],
    class_dir: &[f32],
    class_scale: f32,
    class_bias: f32,
) -> Vec<Vec<f32>> {
    let strip = |v: &mut Vec<f64>, b: &[f64]| {
        let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    };
    let c: Vec<f64> = class_dir.iter().map(|&x| x as f64).collect();
    let mut prompt: Vec<u32> = facts.iter().flat_map(|f| [f.subject_token, f.relation_token]).collect();
    prompt.sort_unstable();
    prompt.dedup();
    let mut basis: Vec<Vec<f64>> = vec![c.clone()];
    for t in prompt {
        let mut v: Vec<f64> = weights.embedding.row(t as usize).iter().map(|&x| x as f64).collect();
        for b in &basis {
            strip(&mut v, b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    // same class weight on every answer, so relation rows favor none of them
    let lift = (class_scale - class_bias) as f64;
    facts
        .iter()
        .map(|f| {
            let e: Vec<f64> = weights.embedding.row(f.answer_token as usize).iter().map(|&x| x as f64).collect();
            let mut v = e;
            for b in &basis {
                strip(&mut v, b);
            }
            let row = weights.unembedding.row_mut(f.answer_token as usize);
            for ((u, x), y) in row.iter_mut().zip(&v).zip(&c) {
                *u = (x + lift * y) as f32;
            }
            unit(&v.iter().map(|&x| x as f32).collect::<Vec<_>>())
        })
        .collect()
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    v.iter().map(|x| (*x as f64 / n) as f32).collect()
}

/// Fits one key so it responds with the given target on each positive row
/// and stays at or below zero on every other row (the activation clamps
/// those). Minimizes the squared error on positives plus a squared hinge on
/// the other rows plus a small ridge term by damped Newton steps; the
/// objective is convex, so this converges from zero.
fn solve_key(x: &DMatrix<f64>, positives: &[(usize, f64)], lambda: f64) -> Option<Vec<f64>> {
    let (n, d) = x.shape();
    let mut target = vec![None; n];
    for &(r, t) in positives {
        target[r] = Some(t);
    }
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let ridge = lambda * mean_sq;
    let loss = |k: &DMatrix<f64>| -> f64 {
        let resp = x * k;
        let fit: f64 = (0..n)
            .map(|r| match target[r] {
                Some(t) => (resp[r] - t).powi(2),
                None => resp[r].max(0.0).powi(2),
            })
            .sum();
        0.5 * (fit + ridge * k.norm_squared())
    };
    let mut k = DMatrix::<f64>::zeros(d, 1);
    let mut current = loss(&k);
    for _ in 0..200 {
        let resp = x * &k;
        let mut h = DMatrix::<f64>::identity(d, d) * ridge;
        let mut g = &k * ridge;
        for r in 0..n {
            let residual = match target[r] {
                Some(t) => resp[r] - t,
                None if resp[r] > 0.0 => resp[r],
                None => continue,
            };
            let row = x.row(r).transpose();
            h += &row * row.transpose();
            g += row * residual;
        }
        if g.norm() <= 1e-9 * (1.0 + current.sqrt()) {
            break;
        }
        let step = h.cholesky()?.solve(&g);
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let next = &k - &step * t;
            let value = loss(&next);
            if value <= current - 1e-4 * t * slope {
                k = next;
                current = value;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Some(k.iter().copied().collect());
            }
        }
    }
    Some(k.iter().copied().collect())
}

/// Planted-layer keys for every fact slot and relation row.
fn plant_keys(
    weights: &mut ModelWeights,
    config: &ModelConfig,
    lay: &Layout,
    opts: &SynthOptions,
    layer: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = config.d_model;
    // design rows: subject position of each subject, then prompt and answer
    // positions of each fact
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut subject_row = std::collections::BTreeMap::new();
    let mut fact_rows = Vec::with_capacity(lay.facts.len());
    for f in &lay.facts {
        let trace = forward(&f.query().tokens, weights, config)?;
        let x = &trace.ffn_inputs[layer];
        subject_row.entry(f.subject_token).or_insert_with(|| {
            rows.push(x.row(0).to_vec());
            rows.len() - 1
        });
        rows.push(x.row(1).to_vec());
        rows.push(x.row(2).to_vec());
        fact_rows.push((rows.len() - 2, rows.len() - 1));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |r, c| rows[r][c] as f64);
    let tau = opts.slot_strength as f64;
    let mut targets: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    for (k, f) in lay.facts.iter().enumerate() {
        let (p, a) = fact_rows[k];
        let s = subject_row[&f.subject_token];
        targets.push((f.slot, vec![(p, tau), (a, tau), (s, opts.subject_ratio as f64 * tau)]));
    }
    for rel in &lay.relation_rows {
        let g = opts.relation_strength as f64;
        let pos = lay
            .facts
            .iter()
            .zip(&fact_rows)
            .filter(|(f, _)| f.relation_token == rel.relation_token)
            .flat_map(|(_, &(p, a))| [(p, g), (a, g)])
            .collect();
        targets.push((rel.slot, pos));
    }
    let mut failing = Vec::new();
    let mut keys = Vec::with_capacity(targets.len());
    for (i, (slot, pos)) in targets.iter().enumerate() {
        match solve_key(&x, pos, opts.ridge) {
            Some(k) => keys.push((*slot, k)),
            None => failing.push(i),
        }
    }
    if !failing.is_empty() {
        return Err(KvwError::Construction {
            msg: "keys could not be separated on the query inputs".into(),
            failing,
        });
    }
    let key = &mut weights.layers[layer].ffn_key;
    for (slot, k) in keys {
        for (c, kc) in k.iter().enumerate() {
            let jitter: f32 = rng.sample::<f32, _>(StandardNormal) * opts.key_noise;
            key.set(slot, c, *kc as f32 + jitter);
        }
    }
    Ok(())
}

/// A fact must survive with its slot scaled to `SLOT_HOLD` while the
/// relation rows sit at `RELATION_HOLD`, and must be lost with its slot at
/// `SLOT_DROP`. At least a quarter of the facts must also be lost without
/// the relation rows.
const SLOT_HOLD: f32 = 0.6;
const SLOT_DROP: f32 = 0.2;
const RELATION_HOLD: f32 = 0.75;

/// Value scales tried for fact slots, ascending.
fn slot_grid() -> Vec<f32> {
    (0..72).map(|k| 0.05 * 1.1f32.powi(k)).collect()
}

struct ValuePlan<'a> {
    layer: usize,
    fact_dirs: Vec<Vec<f32>>,
    class_dir: &'a [f32],
    facts: &'a [FactSpec],
    relation_rows: &'a [RelationRow],
    /// Residual stream entering the planted layer for each query's prompt.
    /// Every write lands in that layer, so these never go stale.
    prefixes: Vec<Vec<Vec<f32>>>,
}

impl ValuePlan<'_> {
    fn write_slot(&self, w: &mut ModelWeights, k: usize, scale: f32) {
        let row = w.layers[self.layer].ffn_value.row_mut(self.facts[k].slot);
        for (v, u) in row.iter_mut().zip(&self.fact_dirs[k]) {
            *v = scale * u;
        }
    }

    fn write(&self, w: &mut ModelWeights, slot_scales: &[f32], relation_scale: f32) {
        for (k, &s) in slot_scales.iter().enumerate() {
            self.write_slot(w, k, s);
        }
        for r in self.relation_rows {
            let row = w.layers[self.layer].ffn_value.row_mut(r.slot);
            for (v, u) in row.iter_mut().zip(self.class_dir) {
                *v = relation_scale * u;
            }
        }
    }

    fn scale_relations(&self, w: &mut ModelWeights, factor: f32) {
        let value = &mut w.layers[self.layer].ffn_value;
        for r in self.relation_rows {
            for v in value.row_mut(r.slot) {
                *v *= factor;
            }
        }
    }

    fn hit(&self, w: &ModelWeights, config: &ModelConfig, k: usize) -> Result<bool> {
        let logits = last_logits_from(self.prefixes[k].clone(), self.layer, w, config)?;
        Ok(argmax(&logits) == self.facts[k].answer_token as usize)
    }

    fn all_hits(&self, w: &ModelWeights, config: &ModelConfig) -> Result<Vec<bool>> {
        (0..self.facts.len())
            .into_par_iter()
            .map(|k| self.hit(w, config, k))
            .collect()
    }

    /// Smallest slot scale per fact meeting the hold margin, refined over a
    /// few passes because subject-token responses couple facts that share a
    /// subject. Later passes first test whether the previous choice is still
    /// the boundary before searching again.
    fn calibrate(&self, w: &mut ModelWeights, config: &ModelConfig, relation_scale: f32) -> Result<Option<Vec<f32>>> {
        let grid = slot_grid();
        let mut idx = vec![grid.len() / 2; self.facts.len()];
        for pass in 0..3 {
            let mut changed = false;
            for k in 0..self.facts.len() {
                let scales: Vec<f32> = idx.iter().map(|&i| grid[i]).collect();
                self.write(w, &scales, relation_scale);
                self.scale_relations(w, RELATION_HOLD);
                let holds = |i: usize, w: &mut ModelWeights| -> Result<bool> {
                    self.write_slot(w, k, grid[i] * SLOT_HOLD);
                    self.hit(w, config, k)
                };
                let cur = idx[k];
                if pass > 0 && holds(cur, w)? && (cur == 0 || !holds(cur - 1, w)?) {
                    continue;
                }
                let (mut lo, mut hi) = (0, grid.len());
                while lo < hi {
                    let mid = (lo + hi) / 2;
                    if holds(mid, w)? {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
                if lo == grid.len() {
                    return Ok(None);
                }
                changed |= lo != cur;
                idx[k] = lo;
            }
            if pass > 0 && !changed {
                break;
            }
        }
        let scales: Vec<f32> = idx.iter().map(|&i| grid[i]).collect();
        self.write(w, &scales, relation_scale);
        Ok(Some(scales))
    }

    /// Calibrated slot scales at `relation_scale` if they meet every margin.
    fn try_relation_scale(&self, w: &mut ModelWeights, config: &ModelConfig, relation_scale: f32) -> Result<Option<Vec<f32>>> {
        match self.calibrate(w, config, relation_scale)? {
            Some(scales) if self.acceptable(w, config, &scales)? => Ok(Some(scales)),
            _ => Ok(None),
        }
    }

    fn acceptable(&self, w: &ModelWeights, config: &ModelConfig, scales: &[f32]) -> Result<bool> {
        if self.all_hits(w, config)?.iter().any(|h| !h) {
            return Ok(false);
        }
        let mut probe = w.clone();
        self.scale_relations(&mut probe, RELATION_HOLD);
        if self.all_hits(&probe, config)?.iter().any(|h| !h) {
            return Ok(false);
        }
        let mut probe = w.clone();
        self.scale_relations(&mut probe, 0.0);
        let misses = self.all_hits(&probe, config)?.iter().filter(|h| !**h).count();
        if 4 * misses < self.facts.len() {
            return Ok(false);
        }
        let mut probe = w.clone();
        for k in 0..self.facts.len() {
            self.write_slot(&mut probe, k, scales[k] * SLOT_DROP);
            let hit = self.hit(&probe, config, k)?;
            self.write_slot(&mut probe, k, scales[k]);
            if hit {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub(super) fn build(config: &ModelConfig, opts: &SynthOptions, scales: Option<(f32, f32)>) -> Result<SynthModel> {
    config.validate()?;
    if config.ffn_variant != FfnVariant::Plain {
        return Err(KvwError::Config("planted-fact suites use the plain FFN variant".into()));
    }
    if config.max_seq_len < 3 {
        return Err(KvwError::Config("planted-fact queries need max_seq_len >= 3".into()));
    }
    let layer = opts.planted_layer.unwrap_or(config.num_layers / 2);
    if layer >= config.num_layers {
        return Err(KvwError::Config(format!("planted layer {layer} outside the model")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut lay = layout(config, opts, layer, &mut rng)?;
    super::validate_facts(&lay.facts, config)?;

    let (mut weights, class_dir) = background(config, opts, &mut rng);
    let fact_dirs = separate_answers(&mut weights, &lay.facts, &class_dir, opts.class_scale, opts.class_bias);
    plant_keys(&mut weights, config, &lay, opts, layer, &mut rng)?;

    let plan = ValuePlan {
        layer,
        fact_dirs,
        class_dir: &class_dir,
        facts: &lay.facts,
        relation_rows: &lay.relation_rows,
        prefixes: lay
            .facts
            .iter()
            .map(|f| residual_before(&[f.subject_token, f.relation_token], layer, &weights, config))
            .collect::<Result<_>>()?,
    };
    let (slot_scales, relation_scale) = match scales {
        Some((s, r)) => (vec![s; lay.facts.len()], r),
        None => {
            // relation rows become necessary once their scale passes some
            // threshold, so bisect for the first acceptable scale, then fall
            // back to a linear scan if the bisection point does not hold
            let grid = scale_grid();
            let (mut lo, mut hi) = (0, grid.len());
            while lo < hi {
                let mid = (lo + hi) / 2;
                if plan.try_relation_scale(&mut weights, config, grid[mid])?.is_some() {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            let mut chosen = None;
            for &rs in grid[lo.min(grid.len() - 1)..].iter().chain(&grid[..lo.min(grid.len() - 1)]) {
                if let Some(scales) = plan.try_relation_scale(&mut weights, config, rs)? {
                    chosen = Some((scales, rs));
                    break;
                }
            }
            let Some(chosen) = chosen else {
                let failing = plan.all_hits(&weights, config)?
                    .iter()
                    .enumerate()
                    .filter_map(|(i, h)| (!h).then_some(lay.facts[i].id))
                    .collect();
                return Err(KvwError::Construction {
                    msg: "no value scales give full recall with the required margins".into(),
                    failing,
                });
            };
            chosen
        }
    };
    plan.write(&mut weights, &slot_scales, relation_scale);
    drop(plan);
    weights.validate(config)?;

    for (f, s) in lay.facts.iter_mut().zip(&slot_scales) {
        f.strength = *s;
    }
    for r in &mut lay.relation_rows {
        r.strength = relation_scale;
    }
    let mut facts = lay.facts;
    let shared_facts = facts.split_off(lay.n_forget + lay.n_retain);
    let retain_facts = facts.split_off(lay.n_forget);
    let model = SynthModel {
        config: config.clone(),
        weights,
        forget_facts: facts,
        retain_facts,
        shared_facts,
        relation_rows: lay.relation_rows,
        n_subjects: lay.n_subjects,
        options: opts.clone(),
    };
    if scales.is_none() {
        model.verify()?;
    }
    Ok(model)
}
