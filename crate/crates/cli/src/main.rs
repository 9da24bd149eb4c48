//! `nmr`: pretrain source models, train adapters and baselines, benchmark
//! epochs and render result tables.
//!
//! Exit status: 0 success, 2 numeric failure, 3 I/O failure, 4 config or
//! schema failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nmr_core::config::ExperimentConfig;
use nmr_core::data::{Split, SyntheticKind};
use nmr_core::harness::{
    bench_epoch, multi_seed_with, read_records, render_tables, BenchRecord, Context, Method, Prepared, Trainee,
    BENCH_SCHEMA,
};
use nmr_core::reprogramming::Adapter;
use nmr_core::source::{build_source, pretrain_source, Arch, Checkpoint, SourceModel};
use nmr_core::{Error, Result};

macro_rules! out {
    ($($arg:tt)*) => {
        emit(format_args!($($arg)*), true)
    };
}

/// Writes to stdout; a closed pipe (`nmr config | head`) ends the process quietly.
fn emit(args: std::fmt::Arguments, newline: bool) {
    let mut stdout = io::stdout().lock();
    let res = stdout.write_fmt(args).and_then(|()| if newline { stdout.write_all(b"\n") } else { Ok(()) });
    match res {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(e) => {
            eprintln!("error: writing to stdout: {e}");
            std::process::exit(3);
        }
        Ok(()) => {}
    }
}

#[derive(Parser)]
#[command(name = "nmr", version, about = "Neural model reprogramming of frozen audio classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON). Omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Attention,
    PatchTransformer,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Attention => Arch::Attention,
            ArchArg::PatchTransformer => Arch::PatchTransformer,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    /// Twelve-class synthetic tone task.
    SyntheticTones,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source model on the source task, freeze it and save it.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `model.arch`.
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        #[arg(long, value_enum, default_value = "synthetic-tones")]
        task: TaskArg,
        /// Overrides `model.seed` and `pretrain.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method for one or more seeds around a frozen source.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `run.method`: ii, id, ids, bl_cnn, bl_ft or bl_rep.
        #[arg(long)]
        method: Option<String>,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma list (`0,3,7`) or inclusive range (`0..4`).
        #[arg(long)]
        seeds: Option<String>,
        /// Source checkpoint written by `pretrain`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory for `<method>.jsonl` and `<method>-seed<s>.rpkt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a trained adapter on one split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long, value_parser = ["train", "val", "test"], default_value = "test")]
        split: String,
    },
    /// Median seconds per training epoch after one warm-up epoch.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the bench line here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render accuracy and parameter/speed tables from report files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Print the full default config, or the single-core desk preset.
    Config {
        #[arg(long, value_enum)]
        desk: Option<ArchArg>,
    },
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::config("--seeds", format!("`{text}` is neither `a,b,c` nor `a..b`"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn load_source(path: &Path) -> Result<SourceModel> {
    let model = SourceModel::from_checkpoint(Checkpoint::load(path)?)?;
    if !model.is_frozen() {
        return Err(Error::format("metadata.frozen", format!("{} is not a frozen source", path.display())));
    }
    Ok(model)
}

fn method_of(cfg: &ExperimentConfig, flag: Option<&str>) -> Result<Method> {
    flag.map_or(Ok(cfg.run.method), str::parse)
}

fn pretrain(cfg: ExperimentConfig, arch: Option<ArchArg>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = cfg;
    if let Some(a) = arch {
        cfg.model.arch = a.into();
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.pretrain.seed = s;
    }
    let data = cfg.source_task.generate(SyntheticKind::Source12Tone)?;
    let model = build_source(&cfg.model, &cfg.mel)?;
    let outcome = pretrain_source(model, &data, &cfg.pretrain)?;
    outcome.model.to_checkpoint().save(out)?;
    out!(
        "source {} val_accuracy {:.4} best_epoch {} checksum {}",
        outcome.model.arch().name(),
        outcome.val_accuracy,
        outcome.best_epoch,
        outcome.model.checksum()
    );
    Ok(())
}

fn train(cfg: ExperimentConfig, method: Option<String>, seed: Option<u64>, seeds: Option<String>, ckpt: &Path, out: &Path) -> Result<()> {
    let mut run = cfg.run.clone();
    run.method = method_of(&cfg, method.as_deref())?;
    if let Some(s) = seed {
        run.seeds = vec![s];
    }
    if let Some(s) = seeds {
        run.seeds = parse_seeds(&s)?;
    }
    run.validate()?;
    let source = load_source(ckpt)?;
    let data = cfg.dataset.load()?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.into(),
        source: e,
    })?;
    let prepared = Prepared::new(&data, &source);
    let ctx = Context {
        prepared: &prepared,
        adapter: &cfg.adapter,
        baselines: &cfg.baselines,
    };
    let checksum = source.checksum();
    let name = run.method.name();
    let report = multi_seed_with(&run, &ctx, source.arch().name(), |o| {
        let path = out.join(format!("{name}-seed{}.rpkt", o.row.seed));
        write(&path, o.trainee.to_checkpoint(&checksum).to_bytes())?;
        out!(
            "{name} seed {} best_epoch {} val {:.4} test {:.4}",
            o.row.seed, o.row.best_epoch, o.row.val_acc, o.row.test_acc
        );
        Ok(())
    })?;
    write(&out.join(format!("{name}.jsonl")), report.to_json_line() + "\n")?;
    match report.std_test_acc {
        Some(s) => out!("{name} mean {:.4} std {:.4}", report.mean_test_acc, s),
        None => out!("{name} mean {:.4}", report.mean_test_acc),
    }
    Ok(())
}

fn evaluate(cfg: ExperimentConfig, ckpt: &Path, adapter: &Path, split: &str) -> Result<()> {
    let source = load_source(ckpt)?;
    let (adapter, trained_on) = Adapter::from_checkpoint(Checkpoint::load(adapter)?)?;
    if trained_on != source.checksum() {
        return Err(Error::Usage(format!(
            "adapter was trained on source {trained_on}, not {}",
            source.checksum()
        )));
    }
    let data = cfg.dataset.load()?;
    if adapter.num_target() != data.num_classes() {
        return Err(Error::config(
            "dataset",
            format!("adapter maps to {} classes, dataset has {}", adapter.num_target(), data.num_classes()),
        ));
    }
    let prepared = Prepared::new(&data, &source);
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    };
    let method = match adapter.method {
        nmr_core::reprogramming::NmrMethod::Ii => Method::Ii,
        nmr_core::reprogramming::NmrMethod::Id => Method::Id,
        nmr_core::reprogramming::NmrMethod::Ids => Method::Ids,
    };
    let clips = prepared.get(method.input(), split)?;
    let trainee = Trainee::Nmr {
        adapter,
        source: &source,
    };
    out!("{} accuracy {:.4} on {} clips", method.name(), trainee.accuracy(clips)?, clips.len());
    Ok(())
}

fn bench(cfg: ExperimentConfig, method: Option<String>, ckpt: &Path, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut run = cfg.run.clone();
    run.method = method_of(&cfg, method.as_deref())?;
    let source = load_source(ckpt)?;
    let data = cfg.dataset.load()?;
    let prepared = Prepared::new(&data, &source);
    let ctx = Context {
        prepared: &prepared,
        adapter: &cfg.adapter,
        baselines: &cfg.baselines,
    };
    let (median, samples) = bench_epoch(&run, &ctx, seed)?;
    let (trainable, total) = Trainee::new(run.method, &ctx, seed)?.param_counts();
    let record = BenchRecord {
        schema: BENCH_SCHEMA.into(),
        method: run.method,
        model: if run.method.uses_source() { source.arch().name().into() } else { "none".into() },
        seconds_per_epoch: median,
        samples,
        trainable_params: trainable,
        total_params: total,
    };
    let line = serde_json::to_string(&record).expect("bench record serializes");
    match out {
        Some(p) => write(p, line + "\n")?,
        None => out!("{line}"),
    }
    Ok(())
}

fn report(inputs: &[PathBuf]) -> Result<()> {
    let mut all = Vec::new();
    for p in inputs {
        all.extend(read_records(&read(p)?).map_err(|e| match e {
            Error::Format { field, detail } => Error::Format {
                field: format!("{}: {field}", p.display()),
                detail,
            },
            other => other,
        })?);
    }
    emit(format_args!("{}", render_tables(&all)), false);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            arch,
            task: TaskArg::SyntheticTones,
            seed,
            out,
        } => pretrain(config.load()?, arch, seed, &out),
        Command::Train {
            config,
            method,
            seed,
            seeds,
            ckpt,
            out,
        } => train(config.load()?, method, seed, seeds, &ckpt, &out),
        Command::Evaluate {
            config,
            ckpt,
            adapter,
            split,
        } => evaluate(config.load()?, &ckpt, &adapter, &split),
        Command::Bench {
            config,
            method,
            ckpt,
            seed,
            out,
        } => bench(config.load()?, method, &ckpt, seed, out.as_deref()),
        Command::Report { inputs } => report(&inputs),
        Command::Config { desk } => {
            let cfg = desk.map_or_else(ExperimentConfig::default, |a| ExperimentConfig::desk(a.into()));
            out!("{}", cfg.to_json_pretty());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
