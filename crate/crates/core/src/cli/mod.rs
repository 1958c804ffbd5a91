//! Subcommand implementations. Every command validates its input paths
//! before doing any work and writes deterministic artifacts.

pub mod args;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use kvw::coeffs::{accumulate, load_coeffs, read_dataset, save_coeffs, CoefficientMode, ExtractOptions, Source};
use kvw::eval::{
    ablation_run, flop_account, gamma_sweep, layer_sweep, read_rows_csv, two_fold_protocol, two_fold_surface, write_json,
    write_rows_csv, CostParams, CostReport, EvalSuite, GridRow, Method, ModelShape, ProtocolConfig, ScorePoint,
    TwoFoldReport, DEFAULT_GAMMAS, DEFAULT_RETAIN_FLOOR,
};
use kvw::kvw::{kvw_unlearn, KvwConfig, RunReport, DEFAULT_EPS};
use kvw::model::{load_model, save_model, ModelConfig};
use kvw::synth::{build_synth_model, load_suite, SynthOptions, SUITE_MANIFEST};
use kvw::{KvwError, Result};

use args::{
    merge, BuildSynthArgs, Cli, Command, CostArgs, EditArgs, EvalArgs, PrecomputeArgs, ReportArgs, SweepArgs, SweepKind,
    UnlearnArgs,
};

const DEFAULT_REPORT_DIR: &str = "reports";
const DEFAULT_METHODS: &str = "kvw,ga_lora:8,gd_lora:8,kl_lora:8,npo_lora:8,ga,gd,kl,npo,mmu,oracle_retrain";

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| KvwError::io(p, e))?;
            Some(text.parse::<toml::Table>().map_err(|e| KvwError::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let file_seed = match file.as_ref().and_then(|f| f.get("seed")) {
        Some(v) => Some(
            v.as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| KvwError::Config("config file: seed must be a nonnegative integer".into()))?,
        ),
        None => None,
    };
    let seed = cli.seed.or(file_seed).unwrap_or(0);
    let protocol = match file.as_ref().and_then(|f| f.get("protocol")) {
        Some(v) => Some(
            v.clone()
                .try_into::<ProtocolConfig>()
                .map_err(|e| KvwError::Config(format!("config file [protocol]: {e}")))?,
        ),
        None => None,
    };
    let file = file.as_ref();
    match &cli.command {
        Command::BuildSynth(a) => build_synth(merge(a, file)?, seed),
        Command::PrecomputeRetain(a) => precompute_retain(merge(a, file)?, seed),
        Command::Unlearn(a) => unlearn(merge(a, file)?, seed),
        Command::Eval(a) => eval(merge(a, file)?),
        Command::Sweep(a) => sweep(merge(a, file)?, protocol),
        Command::Report(a) => report(merge(a, file)?),
        Command::Cost(a) => cost(merge(a, file)?, seed),
    }
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| KvwError::Config(format!("--{flag} is required")))
}

fn existing_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(KvwError::Input(format!("{} is not a readable file", p.display())));
    }
    Ok(())
}

fn existing_suite(p: &Path) -> Result<()> {
    let manifest = if p.is_dir() { p.join(SUITE_MANIFEST) } else { p.to_path_buf() };
    existing_file(&manifest)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| KvwError::io(p, e))
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => ensure_dir(d),
        _ => Ok(()),
    }
}

fn report_dir(v: &Option<PathBuf>) -> PathBuf {
    v.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_REPORT_DIR))
}

fn mode(edit: &EditArgs) -> CoefficientMode {
    edit.mode.map(Into::into).unwrap_or_default()
}

fn kvw_config(edit: &EditArgs, num_layers: usize) -> KvwConfig {
    KvwConfig {
        gamma: edit.gamma.unwrap_or(1.0),
        start_layer: edit.start_layer.unwrap_or(0),
        end_layer: edit.end_layer.unwrap_or(num_layers.saturating_sub(1)),
        eps: edit.eps.unwrap_or(DEFAULT_EPS),
        ans_only: !edit.all_positions,
        use_retain: !edit.no_retain,
        batch_size: edit.batch_size.unwrap_or(8),
        mode: mode(edit),
    }
}

fn build_synth(a: BuildSynthArgs, seed: u64) -> Result<()> {
    let out = required(&a.out, "out")?.clone();
    let d = ModelConfig::default();
    let s = &a.shape;
    let config = ModelConfig {
        num_layers: s.layers.unwrap_or(d.num_layers),
        d_model: s.d_model.unwrap_or(d.d_model),
        ffn_dim: s.ffn_dim.unwrap_or(d.ffn_dim),
        num_heads: s.heads.unwrap_or(d.num_heads),
        vocab_size: s.vocab_size.unwrap_or(d.vocab_size),
        max_seq_len: s.max_seq_len.unwrap_or(d.max_seq_len),
        ..d
    };
    let defaults = SynthOptions::default();
    let opts = SynthOptions {
        n_forget: a.n_forget.unwrap_or(defaults.n_forget),
        n_retain: a.n_retain.unwrap_or(defaults.n_retain),
        n_shared: a.n_shared.unwrap_or(defaults.n_shared),
        planted_layer: a.planted_layer,
        seed,
        ..defaults
    };
    let model = build_synth_model(&config, &opts)?;
    model.write_suite(&out)?;
    println!("{}", out.join(SUITE_MANIFEST).display());
    Ok(())
}

#[derive(Serialize)]
struct CacheReport<'a> {
    seed: u64,
    model: &'a Path,
    retain: &'a Path,
    cache: &'a Path,
    examples: usize,
    token_count: u64,
    ans_only: bool,
    mode: CoefficientMode,
    dataset_hash: String,
}

fn precompute_retain(a: PrecomputeArgs, seed: u64) -> Result<()> {
    let model = required(&a.model, "model")?;
    let retain = required(&a.retain, "retain")?;
    let out = required(&a.out, "out")?;
    existing_file(model)?;
    existing_file(retain)?;
    let (weights, config) = load_model(model)?;
    let examples = read_dataset(retain)?;
    let opts = ExtractOptions {
        ans_only: !a.all_positions,
        mode: a.mode.map(Into::into).unwrap_or_default(),
        source: Source::Retain,
    };
    let c = accumulate(&examples, &weights, &config, &opts)?;
    ensure_parent(out)?;
    save_coeffs(&c, out)?;
    write_json(
        &sidecar(out, "json"),
        &CacheReport {
            seed,
            model,
            retain,
            cache: out,
            examples: examples.len(),
            token_count: c.token_count,
            ans_only: c.ans_only,
            mode: c.mode,
            dataset_hash: hex::encode(c.dataset_hash),
        },
    )?;
    println!("{}", out.display());
    Ok(())
}

/// `dir/name.ext` → `dir/name.<suffix>`
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Serialize)]
struct UnlearnReport<'a> {
    seed: u64,
    model: &'a Path,
    forget: &'a Path,
    retain_cache: Option<&'a Path>,
    /// No value row changed.
    identity: bool,
    run: RunReport,
}

fn unlearn(a: UnlearnArgs, seed: u64) -> Result<()> {
    let model = required(&a.model, "model")?;
    let forget = required(&a.forget, "forget")?;
    let out = required(&a.out, "out")?;
    if a.retain_cache.is_none() && !a.edit.no_retain {
        return Err(KvwError::Config(
            "--retain-cache is required; pass --no-retain to run without retain coefficients".into(),
        ));
    }
    if a.retain_cache.is_some() && a.edit.no_retain {
        return Err(KvwError::Config("--retain-cache and --no-retain are mutually exclusive".into()));
    }
    existing_file(model)?;
    existing_file(forget)?;
    if let Some(c) = &a.retain_cache {
        existing_file(c)?;
    }
    let (weights, config) = load_model(model)?;
    let examples = read_dataset(forget)?;
    let retain = a.retain_cache.as_deref().map(load_coeffs).transpose()?;
    let cfg = kvw_config(&a.edit, config.num_layers);
    let (edited, mut run) = kvw_unlearn(&weights, &config, &examples, retain.as_ref(), &cfg)?;
    let identity = edited == weights;
    ensure_parent(out)?;
    save_model(&edited, &config, out)?;
    run.output_model = Some(out.display().to_string());
    write_json(
        &sidecar(out, "report.json"),
        &UnlearnReport {
            seed,
            model,
            forget,
            retain_cache: a.retain_cache.as_deref(),
            identity,
            run,
        },
    )?;
    println!("{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    seed: u64,
    model: String,
    forget_acc: f64,
    retain_acc: f64,
    forget_hits: Vec<bool>,
    retain_hits: Vec<bool>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let suite_path = required(&a.suite, "suite")?;
    existing_suite(suite_path)?;
    if let Some(m) = &a.model {
        existing_file(m)?;
    }
    let loaded = load_suite(suite_path)?;
    let model_name = match &a.model {
        Some(m) => m.display().to_string(),
        None => loaded.dir.join(&loaded.manifest.model).display().to_string(),
    };
    let suite = EvalSuite::from_loaded(loaded);
    let weights = match &a.model {
        Some(m) => {
            let (w, c) = load_model(m)?;
            if c != suite.config {
                return Err(KvwError::Compatibility("model config differs from the suite's".into()));
            }
            w
        }
        None => suite.weights.clone(),
    };
    let hits = suite.hits(&weights)?;
    let s = hits.scores();
    let dir = report_dir(&a.report_dir);
    ensure_dir(&dir)?;
    write_json(
        &dir.join("eval.json"),
        &EvalReport {
            seed: suite.seed,
            model: model_name,
            forget_acc: s.forget,
            retain_acc: s.retain,
            forget_hits: hits.forget,
            retain_hits: hits.retain,
        },
    )?;
    println!("forget_acc {} retain_acc {}", s.forget, s.retain);
    Ok(())
}

#[derive(Serialize)]
struct ProtocolReport<'a> {
    seed: u64,
    protocol: &'a ProtocolConfig,
    vanilla1: ScorePoint,
    vanilla2: ScorePoint,
    result: &'a TwoFoldReport,
}

fn sweep(a: SweepArgs, protocol: Option<ProtocolConfig>) -> Result<()> {
    let suite_path = required(&a.suite, "suite")?;
    let kind = a.kind.unwrap_or(SweepKind::Gamma);
    existing_suite(suite_path)?;
    let dir = report_dir(&a.report_dir);
    ensure_dir(&dir)?;
    let gammas = match &a.gamma_list {
        Some(l) => Some(l.values()?),
        None => None,
    };
    let floor = a.floor.unwrap_or(DEFAULT_RETAIN_FLOOR);
    let suite = EvalSuite::from_loaded(load_suite(suite_path)?);
    let base = kvw_config(&a.edit, suite.config.num_layers);
    let stem = format!("{kind}_sweep");
    match kind {
        SweepKind::Gamma => {
            let gammas = gammas.unwrap_or_else(|| DEFAULT_GAMMAS.to_vec());
            let s = gamma_sweep(&suite, &base, &gammas, floor)?;
            write_rows_csv(&dir.join(format!("{stem}.csv")), &s.rows)?;
            write_json(&dir.join(format!("{stem}.json")), &s)?;
            println!("{} points, {} feasible", s.rows.len(), s.feasible_gammas.len());
        }
        SweepKind::Layers => {
            let s = layer_sweep(&suite, &base, a.buckets.unwrap_or(8), floor)?;
            write_rows_csv(&dir.join(format!("{stem}.csv")), &s.rows)?;
            write_json(&dir.join(format!("{stem}.json")), &s)?;
            println!("{} candidates, retain spread {}", s.rows.len(), s.retain_spread);
        }
        SweepKind::Ablation => {
            let s = ablation_run(&suite, &base, floor)?;
            write_rows_csv(&dir.join(format!("{stem}.csv")), &s.rows)?;
            write_json(&dir.join(format!("{stem}.json")), &s)?;
            for r in &s.rows {
                println!("{} forget {} retain {}", r.label, r.forget_acc, r.retain_acc);
            }
        }
        SweepKind::Protocol => {
            let mut p = protocol.unwrap_or_default();
            if let Some(g) = gammas {
                p.gammas = g;
            }
            if a.floor.is_some() {
                p.retain_floor = floor;
            }
            let surface = two_fold_surface(&suite, &p)?;
            let result = two_fold_protocol(&surface, p.retain_floor)?;
            let mut rows = Vec::new();
            for (label, scores, vanilla) in [
                ("test1", &surface.test1, surface.vanilla1),
                ("test2", &surface.test2, surface.vanilla2),
            ] {
                for (cfg, s) in surface.configs.iter().zip(scores) {
                    rows.push(grid_row(label, cfg, *s, vanilla, p.retain_floor, suite.seed));
                }
            }
            write_rows_csv(&dir.join(format!("{stem}.csv")), &rows)?;
            write_json(
                &dir.join(format!("{stem}.json")),
                &ProtocolReport {
                    seed: suite.seed,
                    protocol: &p,
                    vanilla1: surface.vanilla1,
                    vanilla2: surface.vanilla2,
                    result: &result,
                },
            )?;
            for f in &result.folds {
                match (&f.config, f.held_out) {
                    (Some(c), Some(h)) => println!(
                        "fold {}: gamma {} layers {}..={} held-out forget {} retain {}",
                        f.select_on, c.gamma, c.start_layer, c.end_layer, h.forget, h.retain
                    ),
                    _ => println!("fold {}: no feasible configuration", f.select_on),
                }
            }
            if result.any_infeasible() {
                return Err(KvwError::NoFeasible("a fold has no configuration meeting the retain floor".into()));
            }
        }
    }
    Ok(())
}

fn grid_row(label: &str, cfg: &KvwConfig, s: ScorePoint, vanilla: ScorePoint, floor: f64, seed: u64) -> GridRow {
    GridRow {
        label: label.into(),
        gamma: cfg.gamma,
        start_layer: cfg.start_layer,
        end_layer: cfg.end_layer,
        ans_only: cfg.ans_only,
        use_retain: cfg.use_retain,
        forget_acc: s.forget,
        retain_acc: s.retain,
        feasible: kvw::eval::is_feasible(s, vanilla, floor),
        seed,
    }
}

#[derive(Serialize)]
struct FileSummary {
    file: String,
    rows: usize,
    feasible: usize,
    feasible_gammas: Vec<f64>,
    min_forget: Option<f64>,
    max_retain: Option<f64>,
    seeds: Vec<u64>,
}

#[derive(Serialize)]
struct Summary {
    dir: String,
    files: Vec<FileSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<serde_json::Value>,
}

fn report(a: ReportArgs) -> Result<()> {
    let dir = required(&a.dir, "dir")?;
    if !dir.is_dir() {
        return Err(KvwError::Input(format!("{} is not a directory", dir.display())));
    }
    let mut csvs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| KvwError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csvs.sort();
    let mut files = Vec::new();
    for p in &csvs {
        let rows = read_rows_csv(p)?;
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        files.push(FileSummary {
            file: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            rows: rows.len(),
            feasible: rows.iter().filter(|r| r.feasible).count(),
            feasible_gammas: rows.iter().filter(|r| r.feasible).map(|r| r.gamma).collect(),
            min_forget: rows.iter().map(|r| r.forget_acc).reduce(f64::min),
            max_retain: rows.iter().map(|r| r.retain_acc).reduce(f64::max),
            seeds,
        });
    }
    let protocol = dir.join("protocol_sweep.json");
    let folds = if protocol.is_file() {
        let text = fs::read_to_string(&protocol).map_err(|e| KvwError::io(&protocol, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        v.get("result").and_then(|r| r.get("folds")).cloned()
    } else {
        None
    };
    let out = a.report_dir.clone().unwrap_or_else(|| dir.clone());
    ensure_dir(&out)?;
    write_json(
        &out.join("summary.json"),
        &Summary {
            dir: dir.display().to_string(),
            files,
            folds,
        },
    )?;
    println!("{}", out.join("summary.json").display());
    Ok(())
}

#[derive(Serialize)]
struct CostOutput {
    seed: u64,
    params: CostParams,
    reports: Vec<CostReport>,
}

fn cost(a: CostArgs, seed: u64) -> Result<()> {
    let shape = match &a.model {
        Some(m) => {
            existing_file(m)?;
            ModelShape::from(&load_model(m)?.1)
        }
        None => {
            let d = ModelConfig::default();
            let s = &a.shape;
            ModelShape {
                num_layers: s.layers.unwrap_or(d.num_layers) as u64,
                d_model: s.d_model.unwrap_or(d.d_model) as u64,
                ffn_dim: s.ffn_dim.unwrap_or(d.ffn_dim) as u64,
                num_heads: s.heads.unwrap_or(d.num_heads) as u64,
                vocab_size: s.vocab_size.unwrap_or(d.vocab_size) as u64,
                max_seq_len: s.max_seq_len.unwrap_or(d.max_seq_len) as u64,
                gated: a.gated.unwrap_or(false),
            }
        }
    };
    let params = CostParams {
        shape,
        seq_len: a.seq_len.unwrap_or(shape.max_seq_len),
        forget_size: a.forget_size.unwrap_or(40),
        retain_size: a.retain_size.unwrap_or(160),
        batch_size: a.batch_size.unwrap_or(8),
        epochs: a.epochs.unwrap_or(5),
    };
    let methods: Vec<Method> = a
        .methods
        .as_deref()
        .unwrap_or(DEFAULT_METHODS)
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<Result<_>>()?;
    let reports = methods.iter().map(|&m| flop_account(&params, m)).collect::<Result<Vec<_>>>()?;
    let dir = report_dir(&a.report_dir);
    ensure_dir(&dir)?;
    write_json(&dir.join("cost.json"), &CostOutput { seed, params, reports: reports.clone() })?;
    for r in &reports {
        println!("{:<16} per-batch {:>16} total {:>20}", r.method, r.per_batch_flops, r.total_flops);
    }
    Ok(())
}
