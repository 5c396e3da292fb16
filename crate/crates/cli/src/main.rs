//! `spss` command-line interface.
//!
//! Exit codes: 0 on success, 2 on a config error (including malformed
//! arguments), 3 when training aborts on a non-finite loss, 1 otherwise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use spss_core::ablation::{run_ablation, AblationTable};
use spss_core::config::{load_config, render_config, TrainConfig};
use spss_core::metrics::{dsc_jaccard, summarize, MetricsRecord, MetricsSummary};
use spss_core::net::read_checkpoint;
use spss_core::synth::{generate_dataset, read_dataset, write_dataset, Dataset, GeneratorConfig};
use spss_core::train::{evaluate, run_training, RunFiles};
use spss_core::uncertainty::{schedule_dump, ScheduleState};
use spss_core::Error;

#[derive(Parser, Debug)]
#[command(name = "spss", version, about = "Barely-supervised volumetric segmentation with self-paced sample selection")]
struct Cli {
    /// Flat key = value config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dataset seed for `gen-data`, run seed for `train` (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving output files [default: spss-out; schedule-dump
    /// writes a file only when this is given].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct DataArgs {
    /// Dataset written by `gen-data`; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Seed of the in-memory dataset.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with registration pseudo labels.
    GenData,
    /// Train one teacher/student run, writing checkpoints and CSV logs.
    Train {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Score a checkpoint on the held-out cases.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train all four variants on every configured seed.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Runs trained concurrently; defaults to the available cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Replay the self-paced schedule as CSV: t, xi, lambda, R_conf, v, K, branch.
    ScheduleDump {
        /// Constant unsupervised loss fed into every step after the first.
        #[arg(long, conflicts_with = "log")]
        lu: Option<f64>,
        /// Training log whose L_u column drives the replay.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Training(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configs(path: Option<&Path>) -> anyhow::Result<(TrainConfig, GeneratorConfig)> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => Ok((TrainConfig::default(), GeneratorConfig::default())),
    }
}

fn load_data(args: &DataArgs, generator: &GeneratorConfig) -> anyhow::Result<Dataset> {
    match &args.data {
        Some(dir) => Ok(read_dataset(dir)?),
        None => Ok(generate_dataset(generator, args.data_seed)?),
    }
}

fn write_file(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe (`spss schedule-dump | head`) is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn summary_line(s: &MetricsSummary) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
    format!(
        "DSC {:.2}%  Jaccard {:.2}%  ASD {}  HD {}  ({} cases)",
        100.0 * s.dsc,
        100.0 * s.jaccard,
        opt(s.asd),
        opt(s.hd),
        s.cases
    )
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (mut train, generator) = configs(cli.config.as_deref())?;
    let out_buf = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("spss-out"));
    let out = out_buf.as_path();
    match cli.command {
        Command::GenData => {
            let seed = cli.seed.unwrap_or(0);
            let data = generate_dataset(&generator, seed)?;
            write_dataset(out, &data)?;
            let mut reg = 0.0;
            for c in &data.labeled {
                let truth = data.truth(&c.id).context("labeled case without ground truth")?;
                reg += dsc_jaccard(&c.registration, truth)?.0;
            }
            println!(
                "wrote {} labeled, {} unlabeled and {} held-out cases of {} to {}",
                data.labeled.len(),
                data.unlabeled.len(),
                data.eval.len(),
                data.dims,
                out.display()
            );
            if !data.labeled.is_empty() {
                println!("mean registration DSC {:.4}", reg / data.labeled.len() as f64);
            }
        }
        Command::Train { data } => {
            if let Some(seed) = cli.seed {
                train.seed = seed;
            }
            let dataset = load_data(&data, &generator)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            write_file(out, "config.toml", &render_config(&train, &generator))?;
            let outcome = run_training(&train, &dataset, train.seed, Some(out))?;
            if let Some(s) = &outcome.final_summary {
                println!("final  {}", summary_line(s));
            }
            if let Some((t, s)) = &outcome.best {
                println!("best   {} at step {t}", summary_line(s));
            }
            println!(
                "wrote {}, {}, config.toml and the checkpoints to {}",
                RunFiles::TRAIN_LOG,
                RunFiles::METRICS,
                out.display()
            );
        }
        Command::Eval { checkpoint, data } => {
            let params = read_checkpoint(&checkpoint)?;
            let dataset = load_data(&data, &generator)?;
            if dataset.eval.is_empty() {
                bail!("the dataset has no held-out cases");
            }
            let records = evaluate(&params, &dataset)?;
            let mut csv = format!("{}\n", MetricsRecord::CSV_HEADER);
            for r in &records {
                let _ = writeln!(csv, "{}", r.csv_row());
            }
            write_file(out, "eval_metrics.csv", &csv)?;
            emit(&csv)?;
            println!("mean   {}", summary_line(&summarize(&records)));
        }
        Command::Ablate { data, threads } => {
            let dataset = load_data(&data, &generator)?;
            let threads = threads
                .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
                .unwrap_or(1);
            let table = run_ablation(&train, &dataset, &train.seeds, threads, |r| {
                eprintln!("{:<8} seed {:<4} DSC {:.4}", r.variant.name(), r.seed, r.summary.dsc);
            })?;
            write_file(out, "ablation.csv", &table.to_csv())?;
            write_file(out, "ablation_runs.csv", &table.runs_csv())?;
            let text = table.to_text();
            write_file(out, "ablation.txt", &format!("{text}\n"))?;
            println!("{text}");
            report_ordering(&table);
        }
        Command::ScheduleDump { lu, log } => {
            let mut start = ScheduleState::new(train.iterations.max(1), train.alpha, train.delta, train.tau_sched)?;
            start.warm_cap = train.warm_cap;
            let losses = match (&log, lu) {
                (Some(path), _) => read_lu_column(path)?,
                (None, Some(v)) => {
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(Error::Config(format!("--lu must be a finite non-negative number, got {v}")).into());
                    }
                    vec![v; train.iterations]
                }
                (None, None) => Vec::new(),
            };
            // step t sees the loss of step t - 1
            let csv = schedule_dump(&start, train.iterations, generator.dims().len(), |t| {
                t.checked_sub(1).and_then(|p| losses.get(p).copied())
            })?;
            emit(&csv)?;
            if let Some(dir) = &cli.out_dir {
                write_file(dir, "schedule.csv", &csv)?;
            }
        }
    }
    Ok(())
}

fn report_ordering(table: &AblationTable) {
    use spss_core::ablation::Variant;
    let mean = |v| table.row(v).map(|r| r.dsc.mean);
    if let (Some(b), Some(f)) = (mean(Variant::Baseline), mean(Variant::Full)) {
        let wins = table
            .seeds
            .iter()
            .filter(|&&s| matches!((table.dsc(Variant::Full, s), table.dsc(Variant::Baseline, s)), (Some(x), Some(y)) if x > y))
            .count();
        println!(
            "full vs baseline: {:+.2} DSC points, full ahead on {wins}/{} seeds",
            100.0 * (f - b),
            table.seeds.len()
        );
    }
}

/// The `L_u` column of a training log written by `train`.
fn read_lu_column(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty training log")?;
    let col = header
        .split(',')
        .position(|h| h == "L_u")
        .with_context(|| format!("{} has no L_u column", path.display()))?;
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let field = l.split(',').nth(col).unwrap_or("");
            field
                .parse::<f64>()
                .with_context(|| format!("{} line {}: bad L_u `{field}`", path.display(), i + 2))
        })
        .collect()
}
