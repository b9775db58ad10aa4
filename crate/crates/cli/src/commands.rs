//! Subcommand implementations. Each resolves its configuration (defaults, then
//! the JSON config file, then flags), records it in a run directory and runs
//! one pipeline stage.

use std::path::{Path, PathBuf};
use std::time::Instant;

use eksft::analyze::{
    export_plots, iou_series_from_path, parameter_drift, ratio_sweep, LabeledPath, PlotInputs, SweepInputs,
    DEFAULT_DRIFT_THRESHOLDS, DEFAULT_SWEEP_RHOS,
};
use eksft::eval::{evaluate, EvalConfig};
use eksft::model::{checkpoint_paths, load_checkpoint, save_checkpoint, snapshot_reference, ModelConfig, ParameterSet};
use eksft::tasks::{file_hash, generate_dataset, load_samples, Sample, TaskSpec, Vocabulary};
use eksft::train::{
    csv_columns, pretrain, train_rl, train_sft, write_csv, RlConfig, RlMetrics, RunManifest, SftConfig, SftHooks,
    SftMetrics,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::run_dir::{prepare_output_dir, write_json, RunDirectory};

type CliResult<T> = Result<T, CliError>;

/// Reads a JSON config, or the type's defaults when no file is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

/// Absolute path of an input that must exist.
fn existing_input(path: &Path, what: &str) -> CliResult<PathBuf> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Usage(format!("no {what} given")));
    }
    std::fs::canonicalize(path).map_err(|_| CliError::Usage(format!("{what} not found: {}", path.display())))
}

/// Absolute checkpoint base path whose manifest and weights exist.
fn existing_checkpoint(path: &Path) -> CliResult<PathBuf> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Usage("no checkpoint given".into()));
    }
    let (manifest, blob) = checkpoint_paths(path);
    for file in [&manifest, &blob] {
        if !file.is_file() {
            return Err(CliError::Usage(format!(
                "checkpoint not found: {} (missing {})",
                path.display(),
                file.display()
            )));
        }
    }
    let dir = std::fs::canonicalize(
        path.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new(".")),
    )
    .map_err(|e| CliError::io(path, e))?;
    Ok(dir.join(path.file_name().unwrap_or_default()))
}

fn checkpoint_hash(base: &Path) -> CliResult<String> {
    Ok(file_hash(&checkpoint_paths(base).1)?)
}

fn input_entry(path: &Path) -> CliResult<(String, String)> {
    Ok((path.display().to_string(), file_hash(path)?))
}

fn to_json<T: Serialize>(value: &T) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(value).map_err(eksft::Error::from)?)
}

fn load_set(path: &Path, context_len: usize) -> CliResult<Vec<Sample>> {
    Ok(load_samples(path, &Vocabulary::default(), context_len)?)
}

/// Saves the final weights tagged with the run id.
fn save_final(run: &RunDirectory, mut params: ParameterSet, run_id: &str) -> CliResult<PathBuf> {
    params.run_id = run_id.to_string();
    let base = run.checkpoint("final");
    save_checkpoint(&params, &base)?;
    Ok(base)
}

// ---------------------------------------------------------------- gen-data

pub struct GenDataArgs {
    pub spec: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub force: bool,
}

pub fn gen_data(args: GenDataArgs) -> CliResult<()> {
    let mut spec: TaskSpec = load_config(args.spec.as_deref())?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    prepare_output_dir(&args.out, args.force)?;
    let files = generate_dataset(&spec, &args.out)?;
    write_json(&args.out.join("spec.json"), &spec)?;
    let hashes: serde_json::Map<String, serde_json::Value> = files
        .iter()
        .map(|f| {
            let entry = serde_json::json!({
                "file": f.path.file_name().map(|n| n.to_string_lossy().into_owned()),
                "count": f.count,
                "sha256": f.sha256,
            });
            (f.name.clone(), entry)
        })
        .collect();
    write_json(&args.out.join("hashes.json"), &hashes)?;
    println!("{:<12} {:>7}  sha256", "split", "records");
    for f in &files {
        println!("{:<12} {:>7}  {}", f.name, f.count, f.sha256);
    }
    Ok(())
}

// ---------------------------------------------------------------- pretrain

/// Resolved configuration of a pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainRun {
    pub data: PathBuf,
    pub model: ModelConfig,
    pub train: SftConfig,
}

impl Default for PretrainRun {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            model: ModelConfig::default(),
            train: SftConfig::pretraining(),
        }
    }
}

#[derive(Default)]
pub struct PretrainOverrides {
    pub data: Option<PathBuf>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub context_len: Option<usize>,
    pub train: TrainOverrides,
}

/// Flag overrides shared by the supervised stages.
#[derive(Default)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub grad_accum: Option<usize>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, c: &mut SftConfig) {
        set(&mut c.learning_rate, self.learning_rate);
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.grad_accum, self.grad_accum);
        set(&mut c.weight_decay, self.weight_decay);
        set(&mut c.seed, self.seed);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn sft_metrics_columns() -> CliResult<Vec<String>> {
    Ok(csv_columns(&SftMetrics::default())?)
}

pub fn pretrain_cmd(config: Option<&Path>, o: PretrainOverrides, out: PathBuf, force: bool) -> CliResult<()> {
    let mut cfg: PretrainRun = load_config(config)?;
    set(&mut cfg.data, o.data);
    set(&mut cfg.model.d_model, o.d_model);
    set(&mut cfg.model.n_layers, o.n_layers);
    set(&mut cfg.model.n_heads, o.n_heads);
    set(&mut cfg.model.context_len, o.context_len);
    o.train.apply(&mut cfg.train);
    if o.train.seed.is_some() {
        cfg.model.seed = cfg.train.seed;
    }
    cfg.data = existing_input(&cfg.data, "pretraining data")?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let data = load_set(&cfg.data, cfg.model.context_len)?;

    let run = RunDirectory::create(out, force)?;
    let manifest = RunManifest::new(
        "pretrain",
        to_json(&cfg)?,
        cfg.model.clone(),
        serde_json::json!({ "train": cfg.train.seed, "init": cfg.model.seed }),
        vec![input_entry(&cfg.data)?],
        sft_metrics_columns()?,
    )?;
    run.write_config(&cfg)?;
    manifest.write(&run.manifest_path())?;

    let start = Instant::now();
    let mut init = ParameterSet::init(&cfg.model)?;
    init.run_id = manifest.run_id.clone();
    let mut hooks = SftHooks {
        checkpoint: Some(run.checkpoint("last")),
        ..SftHooks::default()
    };
    let outcome = pretrain(&init, &data, &cfg.train, &mut hooks)?;
    write_csv(&run.metrics_path(), &outcome.metrics)?;
    let ckpt = save_final(&run, outcome.params, &manifest.run_id)?;
    run.write_timing(start.elapsed().as_secs_f64())?;
    let last = outcome.metrics.last();
    println!("run        {}", manifest.run_id);
    println!("steps      {}", outcome.metrics.len());
    println!("final loss {:.6}", last.map_or(f64::NAN, |m| m.loss));
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

// ---------------------------------------------------------------- train-sft

/// Resolved configuration of a supervised fine-tuning run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftRun {
    pub init: PathBuf,
    pub data: PathBuf,
    pub train: SftConfig,
    /// Also write the per-token mask dump (JSONL) under `reports/`.
    pub mask_dump: bool,
}

#[derive(Default)]
pub struct SftOverrides {
    pub init: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub method: Option<eksft::train::Method>,
    pub rho: Option<f64>,
    pub lambda_h: Option<f64>,
    pub lambda_kl: Option<f64>,
    pub drop_fraction: Option<f64>,
    pub mask_dump: bool,
    pub train: TrainOverrides,
}

pub fn train_sft_cmd(config: Option<&Path>, o: SftOverrides, out: PathBuf, force: bool) -> CliResult<()> {
    let mut cfg: SftRun = load_config(config)?;
    set(&mut cfg.init, o.init);
    set(&mut cfg.data, o.data);
    set(&mut cfg.train.method, o.method);
    set(&mut cfg.train.rho, o.rho);
    set(&mut cfg.train.lambda_h, o.lambda_h);
    set(&mut cfg.train.lambda_kl, o.lambda_kl);
    set(&mut cfg.train.drop_fraction, o.drop_fraction);
    cfg.mask_dump |= o.mask_dump;
    o.train.apply(&mut cfg.train);
    cfg.init = existing_checkpoint(&cfg.init)?;
    cfg.data = existing_input(&cfg.data, "training data")?;
    cfg.train.validate()?;
    let init = load_checkpoint(&cfg.init)?;
    let data = load_set(&cfg.data, init.config().context_len)?;

    let run = RunDirectory::create(out, force)?;
    let manifest = RunManifest::new(
        &format!("sft-{}", cfg.train.method.name()),
        to_json(&cfg)?,
        init.config().clone(),
        serde_json::json!({ "train": cfg.train.seed }),
        vec![
            (cfg.init.display().to_string(), checkpoint_hash(&cfg.init)?),
            input_entry(&cfg.data)?,
        ],
        sft_metrics_columns()?,
    )?;
    run.write_config(&cfg)?;
    manifest.write(&run.manifest_path())?;

    let start = Instant::now();
    let reference = snapshot_reference(&init);
    let dump_path = run.report("mask_dump.jsonl");
    let mut dump_file = if cfg.mask_dump {
        let f = std::fs::File::create(&dump_path).map_err(|e| CliError::io(&dump_path, e))?;
        Some(std::io::BufWriter::new(f))
    } else {
        None
    };
    let outcome = {
        let mut hooks = SftHooks {
            mask_dump: dump_file.as_mut().map(|w| w as &mut dyn std::io::Write),
            checkpoint: Some(run.checkpoint("last")),
        };
        train_sft(&init, &reference, &data, &cfg.train, &mut hooks)?
    };
    if let Some(mut w) = dump_file {
        std::io::Write::flush(&mut w).map_err(|e| CliError::io(&dump_path, e))?;
    }
    write_csv(&run.metrics_path(), &outcome.metrics)?;
    write_csv(&run.report("masks.csv"), &outcome.mask_log)?;
    let drift = parameter_drift(&init, &outcome.params, &DEFAULT_DRIFT_THRESHOLDS)?;
    drift.write_json(&run.report("drift.json"))?;
    drift.write_csv(&run.report("drift.csv"))?;
    let ckpt = save_final(&run, outcome.params, &manifest.run_id)?;
    run.write_timing(start.elapsed().as_secs_f64())?;

    let last = outcome.metrics.last();
    println!("run          {}", manifest.run_id);
    println!("method       {}", cfg.train.method.name());
    println!("steps        {}", outcome.metrics.len());
    println!("final loss   {:.6}", last.map_or(f64::NAN, |m| m.loss));
    println!("mean entropy {:.6}", last.map_or(f64::NAN, |m| m.mean_entropy));
    for (t, f) in drift.thresholds.iter().zip(&drift.global.fractions) {
        println!("drift>{t:<7} {f:.6}");
    }
    println!("checkpoint   {}", ckpt.display());
    Ok(())
}

// ---------------------------------------------------------------- train-rl

/// Resolved configuration of an RL run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlRun {
    pub init: PathBuf,
    pub prompts: PathBuf,
    pub rl: RlConfig,
}

#[derive(Default)]
pub struct RlOverrides {
    pub init: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub learning_rate: Option<f64>,
    pub steps: Option<usize>,
    pub group_size: Option<usize>,
    pub prompts_per_step: Option<usize>,
    pub mini_batch_prompts: Option<usize>,
    pub clip_low: Option<f64>,
    pub clip_high: Option<f64>,
    pub temperature: Option<f64>,
    pub max_gen_len: Option<usize>,
    pub seed: Option<u64>,
}

pub fn train_rl_cmd(config: Option<&Path>, o: RlOverrides, out: PathBuf, force: bool) -> CliResult<()> {
    let mut cfg: RlRun = load_config(config)?;
    set(&mut cfg.init, o.init);
    set(&mut cfg.prompts, o.prompts);
    let rl = &mut cfg.rl;
    set(&mut rl.learning_rate, o.learning_rate);
    set(&mut rl.total_steps, o.steps);
    set(&mut rl.rollout_group_size, o.group_size);
    set(&mut rl.prompts_per_step, o.prompts_per_step);
    set(&mut rl.mini_batch_prompts, o.mini_batch_prompts);
    set(&mut rl.clip_low, o.clip_low);
    set(&mut rl.clip_high, o.clip_high);
    set(&mut rl.temperature, o.temperature);
    set(&mut rl.max_gen_len, o.max_gen_len);
    set(&mut rl.seed, o.seed);
    cfg.init = existing_checkpoint(&cfg.init)?;
    cfg.prompts = existing_input(&cfg.prompts, "RL prompts")?;
    cfg.rl.validate()?;
    let init = load_checkpoint(&cfg.init)?;
    let prompts = load_set(&cfg.prompts, init.config().context_len)?;

    let run = RunDirectory::create(out, force)?;
    let manifest = RunManifest::new(
        "rl",
        to_json(&cfg)?,
        init.config().clone(),
        serde_json::json!({ "rl": cfg.rl.seed }),
        vec![
            (cfg.init.display().to_string(), checkpoint_hash(&cfg.init)?),
            input_entry(&cfg.prompts)?,
        ],
        csv_columns(&RlMetrics::default())?,
    )?;
    run.write_config(&cfg)?;
    manifest.write(&run.manifest_path())?;

    let start = Instant::now();
    let outcome = train_rl(&init, &prompts, &Vocabulary::default(), &cfg.rl)?;
    write_csv(&run.metrics_path(), &outcome.metrics)?;
    let ckpt = save_final(&run, outcome.params, &manifest.run_id)?;
    run.write_timing(start.elapsed().as_secs_f64())?;

    let rewards: Vec<f64> = outcome.metrics.iter().map(|m| m.mean_reward).collect();
    let tail = &rewards[rewards.len().saturating_sub(10)..];
    println!("run                  {}", manifest.run_id);
    println!("steps                {}", rewards.len());
    println!(
        "first reward         {:.4}",
        rewards.first().copied().unwrap_or(f64::NAN)
    );
    println!(
        "final reward         {:.4}",
        rewards.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "mean reward (last {:>2}) {:.4}",
        tail.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    );
    println!("checkpoint           {}", ckpt.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

/// Resolved configuration of an evaluation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub eval: EvalConfig,
    pub label: String,
}

#[derive(Default)]
pub struct EvalOverrides {
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub n: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub temperature: Option<f64>,
    pub max_len: Option<usize>,
    pub seed: Option<u64>,
    pub label: Option<String>,
}

pub fn eval_cmd(config: Option<&Path>, o: EvalOverrides, out: PathBuf, force: bool) -> CliResult<()> {
    let mut cfg: EvalRun = load_config(config)?;
    set(&mut cfg.ckpt, o.ckpt);
    set(&mut cfg.data, o.data);
    set(&mut cfg.eval.n_per_prompt, o.n);
    set(&mut cfg.eval.ks, o.ks);
    set(&mut cfg.eval.temperature, o.temperature);
    set(&mut cfg.eval.max_len, o.max_len);
    set(&mut cfg.eval.seed, o.seed);
    set(&mut cfg.label, o.label);
    cfg.ckpt = existing_checkpoint(&cfg.ckpt)?;
    cfg.data = existing_input(&cfg.data, "evaluation data")?;
    if cfg.label.is_empty() {
        cfg.label = cfg.ckpt.display().to_string();
    }
    cfg.eval.validate()?;
    let params = load_checkpoint(&cfg.ckpt)?;
    let data = load_set(&cfg.data, params.config().context_len)?;

    let run = RunDirectory::create(out, force)?;
    let manifest = RunManifest::new(
        "eval",
        to_json(&cfg)?,
        params.config().clone(),
        serde_json::json!({ "eval": cfg.eval.seed }),
        vec![
            (cfg.ckpt.display().to_string(), checkpoint_hash(&cfg.ckpt)?),
            input_entry(&cfg.data)?,
        ],
        [
            "checkpoint",
            "k",
            "pass_at_k",
            "avg_at_n",
            "mean_response_entropy",
            "n_per_prompt",
            "n_prompts",
        ]
        .map(String::from)
        .to_vec(),
    )?;
    run.write_config(&cfg)?;
    manifest.write(&run.manifest_path())?;

    let start = Instant::now();
    let report = evaluate(&params, &data, &cfg.eval, &Vocabulary::default())?;
    report.write_csv(&run.metrics_path(), &cfg.label)?;
    report.write_csv(&run.report("eval.csv"), &cfg.label)?;
    report.write_json(&run.report("eval.json"))?;
    run.write_timing(start.elapsed().as_secs_f64())?;

    println!(
        "prompts {}  samples/prompt {}",
        report.per_prompt.len(),
        cfg.eval.n_per_prompt
    );
    println!("{:>6}  {:>8}", "k", "pass@k");
    for (k, p) in &report.pass_at_k {
        println!("{k:>6}  {p:>8.4}");
    }
    println!("avg@{}  {:.4}", cfg.eval.n_per_prompt, report.avg_at_n);
    println!("mean response entropy {:.4}", report.mean_response_entropy);
    Ok(())
}

// ---------------------------------------------------------------- analyze

/// Resolved configuration of a drift analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftRun {
    pub before: PathBuf,
    pub after: PathBuf,
    pub thresholds: Vec<f64>,
}

pub fn analyze_drift(
    before: &Path,
    after: &Path,
    thresholds: Option<Vec<f64>>,
    out: PathBuf,
    force: bool,
) -> CliResult<()> {
    let cfg = DriftRun {
        before: existing_checkpoint(before)?,
        after: existing_checkpoint(after)?,
        thresholds: thresholds.unwrap_or_else(|| DEFAULT_DRIFT_THRESHOLDS.to_vec()),
    };
    let (b, a) = (load_checkpoint(&cfg.before)?, load_checkpoint(&cfg.after)?);
    let report = parameter_drift(&b, &a, &cfg.thresholds)?;
    let run = RunDirectory::create_analysis(out, force)?;
    run.write_config(&cfg)?;
    report.write_json(&run.report("drift.json"))?;
    report.write_csv(&run.report("drift.csv"))?;
    println!("{:>10}  {:>10}", "threshold", "fraction");
    for (t, f) in report.thresholds.iter().zip(&report.global.fractions) {
        println!("{t:>10}  {f:>10.6}");
    }
    println!("mean relative change {:.6e}", report.global.mean_relative_change);
    Ok(())
}

pub fn analyze_iou(dump: &Path, out: PathBuf, force: bool) -> CliResult<()> {
    let dump = existing_input(dump, "mask dump")?;
    let series = iou_series_from_path(&dump)?;
    let run = RunDirectory::create_analysis(out, force)?;
    run.write_config(&serde_json::json!({ "dump": dump }))?;
    series.write_csv(&run.report("iou_series.csv"))?;
    series.write_summary_csv(&run.report("iou_summary.csv"))?;
    println!("steps {}  skipped lines {}", series.steps.len(), series.skipped_lines);
    println!("{:<10} {:>8} {:>8} {:>8}", "source", "min", "max", "mean");
    if let Some(s) = series.summary {
        println!("{:<10} {:>8.4} {:>8.4} {:>8.4}", "this run", s.min, s.max, s.mean);
    }
    let r = eksft::analyze::LARGE_SCALE_IOU_REFERENCE;
    println!("{:<10} {:>8.4} {:>8.4} {:>8.4}", "reference", r.min, r.max, r.mean);
    Ok(())
}

/// Resolved configuration of a selection-ratio sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepRun {
    pub init: PathBuf,
    pub data: PathBuf,
    pub eval_data: PathBuf,
    pub train: SftConfig,
    pub eval: EvalConfig,
    pub rhos: Vec<f64>,
    pub drift_thresholds: Vec<f64>,
}

impl Default for SweepRun {
    fn default() -> Self {
        Self {
            init: PathBuf::new(),
            data: PathBuf::new(),
            eval_data: PathBuf::new(),
            train: SftConfig {
                method: eksft::train::Method::Eksft,
                ..SftConfig::default()
            },
            eval: EvalConfig::default(),
            rhos: DEFAULT_SWEEP_RHOS.to_vec(),
            drift_thresholds: DEFAULT_DRIFT_THRESHOLDS.to_vec(),
        }
    }
}

#[derive(Default)]
pub struct SweepOverrides {
    pub init: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub rhos: Option<Vec<f64>>,
    pub n: Option<usize>,
    pub train: TrainOverrides,
}

pub fn analyze_sweep(config: Option<&Path>, o: SweepOverrides, out: PathBuf, force: bool) -> CliResult<()> {
    let mut cfg: SweepRun = load_config(config)?;
    set(&mut cfg.init, o.init);
    set(&mut cfg.data, o.data);
    set(&mut cfg.eval_data, o.eval_data);
    set(&mut cfg.rhos, o.rhos);
    set(&mut cfg.eval.n_per_prompt, o.n);
    o.train.apply(&mut cfg.train);
    cfg.init = existing_checkpoint(&cfg.init)?;
    cfg.data = existing_input(&cfg.data, "training data")?;
    cfg.eval_data = existing_input(&cfg.eval_data, "evaluation data")?;
    cfg.train.validate()?;
    cfg.eval.validate()?;
    let base = load_checkpoint(&cfg.init)?;
    let ctx = base.config().context_len;
    let (train_set, eval_set) = (load_set(&cfg.data, ctx)?, load_set(&cfg.eval_data, ctx)?);

    let run = RunDirectory::create(out, force)?;
    run.write_config(&cfg)?;
    let start = Instant::now();
    let reference = snapshot_reference(&base);
    let inputs = SweepInputs {
        base: &base,
        reference: &reference,
        train_set: &train_set,
        eval_set: &eval_set,
        vocab: &Vocabulary::default(),
        sft: cfg.train.clone(),
        eval: cfg.eval.clone(),
        drift_thresholds: cfg.drift_thresholds.clone(),
    };
    let rows = ratio_sweep(&inputs, &cfg.rhos, Some(&run.report("sweep.csv")))?;
    run.write_timing(start.elapsed().as_secs_f64())?;
    println!(
        "{:>5}  {:>8}  {:>8}  {:>8}  {:>8}",
        "rho", "pass@1", "pass@32", "drift", "entropy"
    );
    for r in &rows {
        println!(
            "{:>5}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.rho, r.pass_at_1, r.pass_at_32, r.drift, r.entropy
        );
    }
    Ok(())
}

/// Parses `label=path` pairs; a bare path is labelled by its file stem.
pub fn labeled(spec: &str) -> Result<LabeledPath, String> {
    let (label, path) = match spec.split_once('=') {
        Some((l, p)) if !l.is_empty() && !p.is_empty() => (l.to_string(), PathBuf::from(p)),
        Some(_) => return Err(format!("expected label=path, got {spec:?}")),
        None => {
            let p = PathBuf::from(spec);
            let stem = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (stem, p)
        }
    };
    Ok(LabeledPath { label, path })
}

pub fn analyze_plots(mut inputs: PlotInputs, out: PathBuf, force: bool) -> CliResult<()> {
    for group in [
        &mut inputs.sft_metrics,
        &mut inputs.rl_metrics,
        &mut inputs.eval_reports,
        &mut inputs.drift_reports,
    ] {
        for lp in group.iter_mut() {
            lp.path = existing_input(&lp.path, "metrics CSV")?;
        }
    }
    let run = RunDirectory::create_analysis(out, force)?;
    run.write_config(&inputs)?;
    let written = export_plots(&inputs, &run.root().join("reports"))?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
