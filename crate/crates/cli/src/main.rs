use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakgrpo_core::experiment::{self, load_splits, run_eval, run_to_dir, RunConfig};
use weakgrpo_core::policy::PolicyParams;
use weakgrpo_core::stats::{self, AuditTable};
use weakgrpo_core::toyfix::{generate_splits, read_tasks, write_tasks};

#[derive(Parser)]
#[command(
    name = "weakgrpo",
    version,
    about = "GRPO under weak feedback on a toy repair task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Arm preset; overrides the file's `arm`.
    #[arg(long)]
    arm: Option<String>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut text = match &self.config {
            Some(path) => {
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
            }
            None => String::new(),
        };
        if let Some(arm) = &self.arm {
            // the last arm line wins; explicit file keys still apply on top
            text.push_str(&format!("\narm = {arm}\n"));
        }
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate disjoint train and eval task files.
    GenTasks {
        #[arg(long, default_value_t = 64)]
        num_tasks: usize,
        #[arg(long, default_value_t = 32)]
        num_eval: usize,
        #[arg(long, default_value_t = 8)]
        length: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one arm and write metrics, parameters and splits to `--out`.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate saved parameters on the eval split (hint never visible).
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        params: PathBuf,
        /// Task file; defaults to the config's eval split.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Recompute stored losses from a replay file.
    Replay { file: PathBuf },
    /// Judge-audit statistics from labels or a confusion table.
    AuditStats {
        /// Lines of `judge,reference` labels.
        #[arg(long, conflicts_with = "table")]
        labels: Option<PathBuf>,
        /// `tp,fp,fn,tn`.
        #[arg(long)]
        table: Option<String>,
        /// Discordant pair counts `b,c` for McNemar's test.
        #[arg(long)]
        mcnemar: Option<String>,
        /// Observed positive rate to correct with Rogan-Gladen.
        #[arg(long)]
        observed_rate: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn counts<const N: usize>(s: &str) -> Result<[u64; N]> {
    let v: Vec<u64> = s
        .split(',')
        .map(|x| x.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing `{s}`"))?;
    v.try_into()
        .map_err(|_| anyhow::anyhow!("expected {N} comma-separated counts, got `{s}`"))
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::GenTasks {
            num_tasks,
            num_eval,
            length,
            seed,
            out,
        } => {
            fs::create_dir_all(&out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (train, eval) = generate_splits(num_tasks, num_eval, length, &mut rng);
            write_tasks(
                BufWriter::new(File::create(out.join("train_tasks.jsonl"))?),
                &train,
            )?;
            write_tasks(
                BufWriter::new(File::create(out.join("eval_tasks.jsonl"))?),
                &eval,
            )?;
            println!(
                "wrote {} train and {} eval tasks to {}",
                train.len(),
                eval.len(),
                out.display()
            );
        }
        Command::Train { run, out } => {
            let cfg = run.resolve()?;
            let res = run_to_dir(&cfg, &out)?;
            if let Some(last) = res
                .records
                .iter()
                .rev()
                .find(|r| r.kind == experiment::RecordKind::Eval)
            {
                println!(
                    "arm {} seed {}: eval C-rate {:.3}, S-rate {:.3}, mean steps {:.2} after {} updates",
                    cfg.arm, cfg.seed, last.c_rate, last.s_rate, last.mean_steps, last.update
                );
            }
        }
        Command::Eval { run, params, tasks } => {
            let cfg = run.resolve()?;
            let params = PolicyParams::load(&params)
                .with_context(|| format!("loading {}", params.display()))?;
            let tasks = match tasks {
                Some(path) => read_tasks(BufReader::new(File::open(&path)?))?,
                None => load_splits(&cfg)?.eval,
            };
            let summary = run_eval(&params, &tasks, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Replay { file } => {
            let f = File::open(&file).with_context(|| format!("opening {}", file.display()))?;
            let report = experiment::replay(BufReader::new(f))?;
            println!(
                "{} updates, {} groups, {} copies; max loss difference {:.3e}",
                report.updates, report.groups, report.copies, report.max_loss_diff
            );
            for m in report.mismatches.iter().take(20) {
                println!("mismatch: {}", serde_json::to_string(m)?);
            }
            if !report.ok() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::AuditStats {
            labels,
            table,
            mcnemar,
            observed_rate,
            resamples,
            seed,
        } => {
            let labels = match (labels, table) {
                (Some(path), _) => stats::read_labels(BufReader::new(File::open(&path)?))?,
                (None, Some(t)) => {
                    let [tp, fp, fn_, tn] = counts::<4>(&t)?;
                    stats::labels_from_table(&AuditTable::new(tp, fp, fn_, tn))
                }
                (None, None) => bail!("one of --labels or --table is required"),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = stats::audit_report(&labels, resamples, &mut rng)?;
            let mut out = serde_json::to_value(&report)?;
            if let Some(bc) = mcnemar {
                let [b, c] = counts::<2>(&bc)?;
                out["mcnemar"] = serde_json::to_value(stats::mcnemar(b, c)?)?;
            }
            if let Some(p) = observed_rate {
                let m = &report.metrics;
                let t = &report.table;
                let sens = m.recall;
                let specificity = t.tn as f64 / (t.tn + t.fp).max(1) as f64;
                out["rogan_gladen"] =
                    serde_json::to_value(stats::rogan_gladen(p, sens, specificity)?)?;
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
