//! `eksft`: generate tasks, pretrain a base model, fine-tune it with SFT,
//! EKSFT or a baseline, run the RL stage, evaluate pass@k and analyze runs.
//!
//! Configuration precedence is defaults < `--config` JSON file < flags. Every
//! training, evaluation and analysis command writes a run directory whose
//! `config.json` can be passed back through `--config` to repeat the run.
//! Relative `--out` paths are resolved against `--run-root` (or
//! `EKSFT_RUN_ROOT`). Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

mod commands;
mod error;
mod run_dir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eksft::analyze::LabeledPath;
use eksft::analyze::PlotInputs;
use eksft::train::Method;

use commands::{
    EvalOverrides, GenDataArgs, PretrainOverrides, RlOverrides, SftOverrides, SweepOverrides, TrainOverrides,
};
use error::{CliError, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "eksft", version, about = "Entropy-KL selective fine-tuning pipeline")]
struct Cli {
    /// Directory that relative output paths are resolved against.
    #[arg(long, env = "EKSFT_RUN_ROOT", default_value = ".", global = true)]
    run_root: PathBuf,
    /// Replace an existing, non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the pretrain/sft/rl_prompts/eval JSONL splits.
    GenData {
        /// Task spec JSON (defaults apply to missing fields).
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a base model from scratch with next-token prediction.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Pretraining JSONL.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        n_layers: Option<usize>,
        #[arg(long)]
        n_heads: Option<usize>,
        #[arg(long)]
        context_len: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Supervised fine-tuning with one of the token-level objectives.
    TrainSft {
        #[command(flatten)]
        common: Common,
        /// sft, eksft, dft, random_mask or global_reg.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Checkpoint to start from; also the frozen reference model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Expert demonstrations JSONL.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        lambda_h: Option<f64>,
        #[arg(long)]
        lambda_kl: Option<f64>,
        #[arg(long)]
        drop_fraction: Option<f64>,
        /// Write the per-token mask dump to reports/mask_dump.jsonl.
        #[arg(long)]
        mask_dump: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Clipped group-rollout RL with verifier rewards.
    TrainRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        /// RL prompts JSONL.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        prompts_per_step: Option<usize>,
        #[arg(long)]
        mini_batch_prompts: Option<usize>,
        #[arg(long)]
        clip_low: Option<f64>,
        #[arg(long)]
        clip_high: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_gen_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample, verify and report pass@k.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluation JSONL.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Samples per prompt.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Name written in the checkpoint column of the CSV.
        #[arg(long)]
        label: Option<String>,
    },
    /// Post-hoc analyzers.
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Debug, Subcommand)]
enum Analyze {
    /// Relative parameter change between two checkpoints.
    Drift {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long, default_value = "analysis/drift")]
        out: PathBuf,
    },
    /// Per-step IoU of the entropy and KL masks from a mask dump.
    Iou {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value = "analysis/iou")]
        out: PathBuf,
    },
    /// EKSFT runs over a set of selection ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
        /// Samples per evaluation prompt.
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// SVG charts from metrics CSVs (`label=path` or a bare path).
    Plots {
        #[arg(long, value_parser = commands::labeled)]
        sft: Vec<LabeledPath>,
        #[arg(long, value_parser = commands::labeled)]
        rl: Vec<LabeledPath>,
        #[arg(long, value_parser = commands::labeled)]
        eval: Vec<LabeledPath>,
        #[arg(long, value_parser = commands::labeled)]
        drift: Vec<LabeledPath>,
        #[arg(long, default_value = "analysis/plots")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (relative paths are under the run root).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl From<TrainFlags> for TrainOverrides {
    fn from(f: TrainFlags) -> Self {
        TrainOverrides {
            learning_rate: f.lr,
            epochs: f.epochs,
            batch_size: f.batch_size,
            grad_accum: f.grad_accum,
            weight_decay: f.weight_decay,
            seed: f.seed,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: eksft::Error| e.to_string())
}

fn resolve(root: &Path, out: PathBuf) -> PathBuf {
    if out.is_absolute() {
        out
    } else {
        root.join(out)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (root, force) = (cli.run_root, cli.force);
    match cli.command {
        Command::GenData { spec, seed, out } => commands::gen_data(GenDataArgs {
            spec,
            seed,
            out: resolve(&root, out),
            force,
        }),
        Command::Pretrain {
            common,
            data,
            d_model,
            n_layers,
            n_heads,
            context_len,
            train,
        } => commands::pretrain_cmd(
            common.config.as_deref(),
            PretrainOverrides {
                data,
                d_model,
                n_layers,
                n_heads,
                context_len,
                train: train.into(),
            },
            resolve(&root, common.out),
            force,
        ),
        Command::TrainSft {
            common,
            method,
            init,
            data,
            rho,
            lambda_h,
            lambda_kl,
            drop_fraction,
            mask_dump,
            train,
        } => commands::train_sft_cmd(
            common.config.as_deref(),
            SftOverrides {
                init,
                data,
                method,
                rho,
                lambda_h,
                lambda_kl,
                drop_fraction,
                mask_dump,
                train: train.into(),
            },
            resolve(&root, common.out),
            force,
        ),
        Command::TrainRl {
            common,
            init,
            prompts,
            lr,
            steps,
            group_size,
            prompts_per_step,
            mini_batch_prompts,
            clip_low,
            clip_high,
            temperature,
            max_gen_len,
            seed,
        } => commands::train_rl_cmd(
            common.config.as_deref(),
            RlOverrides {
                init,
                prompts,
                learning_rate: lr,
                steps,
                group_size,
                prompts_per_step,
                mini_batch_prompts,
                clip_low,
                clip_high,
                temperature,
                max_gen_len,
                seed,
            },
            resolve(&root, common.out),
            force,
        ),
        Command::Eval {
            common,
            ckpt,
            data,
            n,
            ks,
            temperature,
            max_len,
            seed,
            label,
        } => commands::eval_cmd(
            common.config.as_deref(),
            EvalOverrides {
                ckpt,
                data,
                n,
                ks,
                temperature,
                max_len,
                seed,
                label,
            },
            resolve(&root, common.out),
            force,
        ),
        Command::Analyze(a) => match a {
            Analyze::Drift {
                before,
                after,
                thresholds,
                out,
            } => commands::analyze_drift(&before, &after, thresholds, resolve(&root, out), force),
            Analyze::Iou { dump, out } => commands::analyze_iou(&dump, resolve(&root, out), force),
            Analyze::Sweep {
                common,
                init,
                data,
                eval_data,
                rhos,
                n,
                train,
            } => commands::analyze_sweep(
                common.config.as_deref(),
                SweepOverrides {
                    init,
                    data,
                    eval_data,
                    rhos,
                    n,
                    train: train.into(),
                },
                resolve(&root, common.out),
                force,
            ),
            Analyze::Plots {
                sft,
                rl,
                eval,
                drift,
                out,
            } => commands::analyze_plots(
                PlotInputs {
                    sft_metrics: sft,
                    rl_metrics: rl,
                    eval_reports: eval,
                    drift_reports: drift,
                },
                resolve(&root, out),
                force,
            ),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
