use kvw::coeffs::{accumulate, ExtractOptions, Source};
use kvw::kvw::{kvw_unlearn, KvwConfig};
use kvw::model::ModelConfig;
use kvw::synth::{build_synth_model, evaluate_recall, load_suite, FactSpec, SynthOptions};

fn small() -> (ModelConfig, SynthOptions) {
    (ModelConfig::default(), SynthOptions::default())
}

#[test]
fn fresh_suite_recalls_every_fact() {
    let (cfg, opts) = small();
    let model = build_synth_model(&cfg, &opts).unwrap();
    assert_eq!(model.forget_facts.len(), 5);
    assert_eq!(model.retain_facts.len(), 20);
    let facts: Vec<FactSpec> = model.all_facts().cloned().collect();
    let report = evaluate_recall(&model.weights, &model.config, &facts).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert!(report.hits.iter().all(|h| *h));
}

#[test]
fn same_seed_is_bit_identical() {
    let (cfg, opts) = small();
    let a = build_synth_model(&cfg, &opts).unwrap();
    let b = build_synth_model(&cfg, &opts).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.forget_facts, b.forget_facts);
    assert_eq!(a.retain_facts, b.retain_facts);
    let c = build_synth_model(&cfg, &SynthOptions { seed: 1, ..opts }).unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn zeroing_a_value_row_loses_that_fact() {
    let (cfg, opts) = small();
    let model = build_synth_model(&cfg, &opts).unwrap();
    for f in model.forget_facts.iter().take(3) {
        let mut w = model.weights.clone();
        w.layers[f.layer].ffn_value.row_mut(f.slot).fill(0.0);
        let r = evaluate_recall(&w, &cfg, std::slice::from_ref(f)).unwrap();
        assert_eq!(r.accuracy, 0.0, "fact {} survived its row being zeroed", f.id);
    }
}

#[test]
fn forget_slots_are_separable() {
    let (cfg, opts) = small();
    let model = build_synth_model(&cfg, &opts).unwrap();
    let cf = accumulate(&model.forget_dataset(), &model.weights, &cfg, &ExtractOptions::new(Source::Forget, true)).unwrap();
    let cr = accumulate(&model.retain_dataset(), &model.weights, &cfg, &ExtractOptions::new(Source::Retain, true)).unwrap();
    for f in &model.forget_facts {
        assert!(cf.per_layer[f.layer][f.slot] > cr.per_layer[f.layer][f.slot]);
    }
}

#[test]
fn suite_round_trips_through_disk() {
    let (cfg, opts) = small();
    let model = build_synth_model(&cfg, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let suite = model.write_suite(dir.path()).unwrap();
    let loaded = load_suite(dir.path()).unwrap();
    assert_eq!(loaded.manifest, suite);
    assert_eq!(loaded.weights, model.weights);
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.forget, model.forget_dataset());
    assert_eq!(loaded.retain, model.retain_dataset());
    let via_manifest = load_suite(&dir.path().join("suite.json")).unwrap();
    assert_eq!(via_manifest.weights, model.weights);
}

#[test]
fn shared_facts_sit_in_both_datasets() {
    let (cfg, _) = small();
    let opts = SynthOptions {
        n_shared: 1,
        ..SynthOptions::default()
    };
    let model = build_synth_model(&cfg, &opts).unwrap();
    assert_eq!(model.shared_facts.len(), 1);
    let q = model.shared_facts[0].query();
    assert!(model.forget_dataset().contains(&q));
    assert!(model.retain_dataset().contains(&q));
}

#[test]
fn without_forget_facts_unlearning_is_identity() {
    let (cfg, _) = small();
    let opts = SynthOptions {
        n_forget: 0,
        ..SynthOptions::default()
    };
    let model = build_synth_model(&cfg, &opts).unwrap();
    let cr = accumulate(&model.retain_dataset(), &model.weights, &cfg, &ExtractOptions::new(Source::Retain, true)).unwrap();
    let kcfg = KvwConfig {
        gamma: 5.0,
        start_layer: 0,
        end_layer: cfg.num_layers - 1,
        ..KvwConfig::default()
    };
    let (edited, _) = kvw_unlearn(&model.weights, &cfg, &model.forget_dataset(), Some(&cr), &kcfg).unwrap();
    assert_eq!(edited, model.weights);
}
