//! Planted-fact memory models with exactly measurable recall.
//!
//! Every fact is a 3-token query `[subject, relation, answer]` whose answer
//! is stored in one FFN row of a designated layer. Recall is teacher-forced
//! greedy decoding: the fact is a hit when the logits at the relation
//! position put the answer token first.

mod build;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{accumulate, read_dataset, write_dataset, ExtractOptions, Source, TokenExample};
use crate::error::{KvwError, Result};
use crate::model::{forward, load_model, save_model, ModelConfig, ModelWeights};
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactSpec {
    pub id: usize,
    pub subject_token: u32,
    pub relation_token: u32,
    pub answer_token: u32,
    pub layer: usize,
    pub slot: usize,
    /// Norm of the planted value row.
    pub strength: f32,
}

impl FactSpec {
    pub fn query(&self) -> TokenExample {
        TokenExample::with_answer_span(vec![self.subject_token, self.relation_token, self.answer_token], 2, 3)
            .expect("3-token query with answer at the end")
    }
}

/// Support row firing on every query of one relation; it lifts answer
/// tokens as a class above the prompt tokens. `strength` is its value norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub relation_token: u32,
    pub layer: usize,
    pub slot: usize,
    pub strength: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub n_forget: usize,
    pub n_retain: usize,
    /// Facts placed in both the forget and retain datasets.
    pub n_shared: usize,
    pub seed: u64,
    /// Defaults to the middle layer.
    pub planted_layer: Option<usize>,
    pub n_relations: usize,
    /// Key response of a fact slot at its own prompt and answer positions.
    pub slot_strength: f32,
    /// Response on the subject token, relative to `slot_strength`.
    pub subject_ratio: f32,
    pub relation_strength: f32,
    /// Weight of the shared answer-class direction in answer unembeddings.
    pub class_scale: f32,
    /// Offset against the answer class carried by every embedding.
    pub class_bias: f32,
    /// Standard deviation of background weights.
    pub noise: f32,
    /// Standard deviation added to planted keys after the solve.
    pub key_noise: f32,
    /// Ridge strength of the key fit, relative to the mean squared input norm.
    pub ridge: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_forget: 5,
            n_retain: 20,
            n_shared: 0,
            seed: 0,
            planted_layer: None,
            n_relations: 4,
            slot_strength: 8.0,
            subject_ratio: 2.0,
            relation_strength: 4.0,
            class_scale: 4.0,
            class_bias: 2.0,
            noise: 0.02,
            key_noise: 0.02,
            ridge: 1e-4,
        }
    }
}

/// A built planted-fact model and its fact tables.
#[derive(Debug, Clone)]
pub struct SynthModel {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub forget_facts: Vec<FactSpec>,
    pub retain_facts: Vec<FactSpec>,
    pub shared_facts: Vec<FactSpec>,
    pub relation_rows: Vec<RelationRow>,
    pub n_subjects: usize,
    pub options: SynthOptions,
}

pub fn build_synth_model(config: &ModelConfig, opts: &SynthOptions) -> Result<SynthModel> {
    build::build(config, opts, None)
}

/// Plants facts with fixed value scales for fact slots and relation rows,
/// skipping the scale search and the recall verification.
pub fn plant_synth_model(
    config: &ModelConfig,
    opts: &SynthOptions,
    slot_scale: f32,
    relation_scale: f32,
) -> Result<SynthModel> {
    build::build(config, opts, Some((slot_scale, relation_scale)))
}

/// Checks the planting contract: unique `(layer, slot)` pairs, unique
/// queries, answers distinct from prompt tokens, ids inside the model.
pub fn validate_facts(facts: &[FactSpec], config: &ModelConfig) -> Result<()> {
    let mut slots = HashSet::new();
    let mut prompts = HashSet::new();
    for f in facts {
        if f.layer >= config.num_layers || f.slot >= config.ffn_dim {
            return Err(KvwError::Config(format!(
                "fact {} planted at layer {} slot {} outside the model",
                f.id, f.layer, f.slot
            )));
        }
        if !slots.insert((f.layer, f.slot)) {
            return Err(KvwError::Config(format!(
                "fact {} reuses layer {} slot {}",
                f.id, f.layer, f.slot
            )));
        }
        if !prompts.insert((f.subject_token, f.relation_token)) {
            return Err(KvwError::Config(format!("fact {} repeats an existing prompt", f.id)));
        }
        if f.answer_token == f.subject_token || f.answer_token == f.relation_token {
            return Err(KvwError::Config(format!("fact {} answers with a prompt token", f.id)));
        }
        let max = f.subject_token.max(f.relation_token).max(f.answer_token);
        if max as usize >= config.vocab_size {
            return Err(KvwError::Config(format!("fact {} uses token {max} outside the vocabulary", f.id)));
        }
        if !(f.strength.is_finite() && f.strength > 0.0) {
            return Err(KvwError::Config(format!("fact {} has non-positive strength", f.id)));
        }
    }
    Ok(())
}

/// Teacher-forced greedy check per example: every answer token must be the
/// argmax of the logits one position earlier.
pub fn answer_hits(weights: &ModelWeights, config: &ModelConfig, examples: &[TokenExample]) -> Result<Vec<bool>> {
    examples
        .par_iter()
        .map(|ex| {
            // logits at t - 1 only see tokens[..t], so nothing past the last
            // answer position needs to run
            let end = ex.answer_mask.iter().rposition(|&m| m).unwrap_or(0);
            if end == 0 {
                return Ok(true);
            }
            let trace = forward(&ex.tokens[..end], weights, config)?;
            Ok((1..=end)
                .filter(|&t| ex.answer_mask[t])
                .all(|t| argmax(trace.logits.row(t - 1)) == ex.tokens[t] as usize))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub hits: Vec<bool>,
    pub accuracy: f64,
}

impl RecallReport {
    fn from_hits(hits: Vec<bool>) -> Self {
        let accuracy = if hits.is_empty() {
            0.0
        } else {
            hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
        };
        Self { hits, accuracy }
    }
}

pub fn evaluate_recall(weights: &ModelWeights, config: &ModelConfig, facts: &[FactSpec]) -> Result<RecallReport> {
    let queries: Vec<TokenExample> = facts.iter().map(FactSpec::query).collect();
    Ok(RecallReport::from_hits(answer_hits(weights, config, &queries)?))
}

impl SynthModel {
    pub fn all_facts(&self) -> impl Iterator<Item = &FactSpec> {
        self.forget_facts.iter().chain(&self.retain_facts).chain(&self.shared_facts)
    }

    /// Forget queries followed by shared queries.
    pub fn forget_dataset(&self) -> Vec<TokenExample> {
        self.forget_facts.iter().chain(&self.shared_facts).map(FactSpec::query).collect()
    }

    /// Retain queries followed by shared queries.
    pub fn retain_dataset(&self) -> Vec<TokenExample> {
        self.retain_facts.iter().chain(&self.shared_facts).map(FactSpec::query).collect()
    }

    /// Full recall on every fact, and every forget slot more active on the
    /// forget set than on the retain set.
    pub fn verify(&self) -> Result<()> {
        let facts: Vec<FactSpec> = self.all_facts().cloned().collect();
        let report = evaluate_recall(&self.weights, &self.config, &facts)?;
        let failing: Vec<usize> = facts
            .iter()
            .zip(&report.hits)
            .filter_map(|(f, h)| (!h).then_some(f.id))
            .collect();
        if !failing.is_empty() {
            return Err(KvwError::Construction {
                msg: "planted facts are not recalled".into(),
                failing,
            });
        }
        if self.forget_facts.is_empty() || self.retain_facts.is_empty() {
            return Ok(());
        }
        let c_f = accumulate(&self.forget_dataset(), &self.weights, &self.config, &ExtractOptions::new(Source::Forget, true))?;
        let c_r = accumulate(&self.retain_dataset(), &self.weights, &self.config, &ExtractOptions::new(Source::Retain, true))?;
        let failing: Vec<usize> = self
            .forget_facts
            .iter()
            .filter(|f| c_f.per_layer[f.layer][f.slot] <= c_r.per_layer[f.layer][f.slot])
            .map(|f| f.id)
            .collect();
        if !failing.is_empty() {
            return Err(KvwError::Construction {
                msg: "forget slots are not more active on forget queries".into(),
                failing,
            });
        }
        Ok(())
    }

    /// Writes `model.kvwm`, `forget.jsonl`, `retain.jsonl` and `suite.json`.
    pub fn write_suite(&self, dir: &Path) -> Result<SynthSuite> {
        fs::create_dir_all(dir).map_err(|e| KvwError::io(dir, e))?;
        let suite = SynthSuite {
            model: PathBuf::from("model.kvwm"),
            forget_dataset: PathBuf::from("forget.jsonl"),
            retain_dataset: PathBuf::from("retain.jsonl"),
            forget_facts: self.forget_facts.clone(),
            retain_facts: self.retain_facts.clone(),
            shared_facts: self.shared_facts.clone(),
            relation_rows: self.relation_rows.clone(),
            seed: self.options.seed,
            options: self.options.clone(),
        };
        save_model(&self.weights, &self.config, dir.join(&suite.model))?;
        write_dataset(&dir.join(&suite.forget_dataset), &self.forget_dataset())?;
        write_dataset(&dir.join(&suite.retain_dataset), &self.retain_dataset())?;
        let manifest = dir.join(SUITE_MANIFEST);
        fs::write(&manifest, serde_json::to_string_pretty(&suite)? + "\n").map_err(|e| KvwError::io(&manifest, e))?;
        Ok(suite)
    }
}

pub const SUITE_MANIFEST: &str = "suite.json";

/// On-disk suite manifest; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSuite {
    pub model: PathBuf,
    pub forget_dataset: PathBuf,
    pub retain_dataset: PathBuf,
    pub forget_facts: Vec<FactSpec>,
    pub retain_facts: Vec<FactSpec>,
    pub shared_facts: Vec<FactSpec>,
    pub relation_rows: Vec<RelationRow>,
    pub seed: u64,
    pub options: SynthOptions,
}

/// A suite loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSuite {
    pub dir: PathBuf,
    pub manifest: SynthSuite,
    pub weights: ModelWeights,
    pub config: ModelConfig,
    pub forget: Vec<TokenExample>,
    pub retain: Vec<TokenExample>,
}

/// Accepts either the suite directory or its manifest file.
pub fn load_suite(path: &Path) -> Result<LoadedSuite> {
    let manifest_path = if path.is_dir() { path.join(SUITE_MANIFEST) } else { path.to_path_buf() };
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&manifest_path).map_err(|e| KvwError::io(&manifest_path, e))?;
    let manifest: SynthSuite =
        serde_json::from_str(&text).map_err(|e| KvwError::Input(format!("{}: {e}", manifest_path.display())))?;
    let (weights, config) = load_model(dir.join(&manifest.model))?;
    let forget = read_dataset(&dir.join(&manifest.forget_dataset))?;
    let retain = read_dataset(&dir.join(&manifest.retain_dataset))?;
    let all: Vec<FactSpec> = manifest
        .forget_facts
        .iter()
        .chain(&manifest.retain_facts)
        .chain(&manifest.shared_facts)
        .cloned()
        .collect();
    validate_facts(&all, &config)?;
    Ok(LoadedSuite {
        dir,
        manifest,
        weights,
        config,
        forget,
        retain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact(id: usize, slot: usize) -> FactSpec {
        FactSpec {
            id,
            subject_token: 1,
            relation_token: 2 + id as u32,
            answer_token: 10 + id as u32,
            layer: 1,
            slot,
            strength: 8.0,
        }
    }

    #[test]
    fn duplicate_slot_is_config_error() {
        let cfg = ModelConfig::default();
        validate_facts(&[fact(0, 3), fact(1, 4)], &cfg).unwrap();
        assert!(matches!(validate_facts(&[fact(0, 3), fact(1, 3)], &cfg), Err(KvwError::Config(_))));
    }

    #[test]
    fn bad_facts_are_rejected() {
        let cfg = ModelConfig::default();
        let mut f = fact(0, 3);
        f.answer_token = f.subject_token;
        assert!(validate_facts(&[f], &cfg).is_err());
        let mut f = fact(0, 3);
        f.slot = cfg.ffn_dim;
        assert!(validate_facts(&[f], &cfg).is_err());
        let mut g = fact(1, 5);
        g.relation_token = fact(0, 3).relation_token;
        assert!(validate_facts(&[fact(0, 3), g], &cfg).is_err());
    }

    #[test]
    fn capacity_is_checked() {
        let cfg = ModelConfig {
            ffn_dim: 16,
            ..ModelConfig::default()
        };
        let opts = SynthOptions {
            n_forget: 5,
            n_retain: 10,
            ..SynthOptions::default()
        };
        assert!(matches!(build_synth_model(&cfg, &opts), Err(KvwError::Config(_))));
    }
}
