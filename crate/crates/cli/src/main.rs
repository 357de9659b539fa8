//! `mcl`: generate datasets, run multistage contrastive experiments, and
//! evaluate or inspect their artifacts.
//!
//! Exit codes: 0 success, 2 configuration or constraint error, 3 missing
//! artifact, 4 training failure, 1 anything else.

mod overrides;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mcl_core::data::{save_dataset, TrifeatureConfig};
use mcl_core::evaluation::topk_neighbors;
use mcl_core::pipeline::{
    evaluate_experiment, integrate, read_embeddings, read_frozen_config, run_experiment, DataConfig,
    ExperimentConfig, Progress,
};
use mcl_core::{Error, Matrix};

use overrides::UsageError;

#[derive(Parser)]
#[command(name = "mcl", version, about = "Multistage contrastive learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Composite,
    Trifeature,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML (or .json) config file; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.batch_size=128` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces the base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Built-in dataset description used when no --config is given.
        #[arg(long, value_enum, default_value = "composite")]
        preset: Preset,
        /// Output directory; defaults to `$MCL_DATA_DIR/<dataset name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "MCL_DATA_DIR", hide_env_values = true)]
        data_dir: Option<PathBuf>,
    },
    /// Run all stages of an experiment and write its directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for augmentation and embedding.
        #[arg(long)]
        threads: Option<usize>,
        /// Drop partial batches (`true`/`false`).
        #[arg(long, value_name = "BOOL")]
        drop_last: Option<bool>,
        /// Root for relative dataset directories.
        #[arg(long, env = "MCL_DATA_DIR", hide_env_values = true)]
        data_dir: Option<PathBuf>,
    },
    /// Recompute report.json from a completed experiment directory.
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// List each stage's nearest neighbours of an anchor sample.
    Inspect {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        anchor: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Check an experiment config, including the cluster capacity bound.
    ValidateConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = "MCL_DATA_DIR", hide_env_values = true)]
        data_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Capacity { .. } | Error::Sampling(_) | Error::Data(_) => 2,
                Error::MissingArtifact(_) | Error::Format { .. } => 3,
                Error::Training { .. } => 4,
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                _ => 1,
            };
        }
    }
    1
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            cfg,
            preset,
            out,
            data_dir,
        } => gen_data(&cfg, preset, out, data_dir),
        Command::Run {
            cfg,
            out,
            threads,
            drop_last,
            data_dir,
        } => {
            let mut config = experiment_config(&cfg)?;
            if let Some(t) = threads {
                config.threads = t;
            }
            if let Some(d) = drop_last {
                config.drop_last = d;
            }
            run(config, &out, data_dir.as_deref())
        }
        Command::Eval { out } => {
            let report = evaluate_experiment(&out)?;
            for p in report.per_stage.iter().flat_map(|s| &s.probes).chain(&report.integrated_probes) {
                println!("{:<12} {:<10} {:.4}", p.representation_id, p.factor, p.accuracy);
            }
            println!("wrote {}", out.join("report.json").display());
            Ok(())
        }
        Command::Inspect { out, anchor, k } => inspect(&out, anchor, k),
        Command::ValidateConfig { cfg, data_dir } => {
            let config = experiment_config(&cfg)?;
            let m = dataset_size(&config.data, data_dir.as_deref())?;
            check_capacity(&config, m)?;
            println!("config ok: {} stages, K={}, M={m}, b={}", config.stages, config.clusters, config.train.batch_size);
            Ok(())
        }
    }
}

fn experiment_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = overrides::load(args.config.as_deref())?;
    let mut cfg = overrides::apply(cfg, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed_base = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(args: &ConfigArgs, preset: Preset, out: Option<PathBuf>, data_dir: Option<PathBuf>) -> Result<()> {
    let base = match (&args.config, preset) {
        (Some(path), _) => overrides::load::<DataConfig>(Some(path))?,
        (None, Preset::Composite) => DataConfig::default(),
        (None, Preset::Trifeature) => DataConfig::Trifeature(TrifeatureConfig {
            per_combo: 8,
            ..TrifeatureConfig::default()
        }),
    };
    let mut data = overrides::apply(base, &args.overrides)?;
    if let Some(seed) = args.seed {
        match &mut data {
            DataConfig::Composite { seed: s, .. } => *s = seed,
            DataConfig::Trifeature(t) => t.seed = seed,
            DataConfig::Directory { .. } => bail!(UsageError("--seed has no effect on a directory dataset".into())),
        }
    }
    if matches!(data, DataConfig::Directory { .. }) {
        bail!(UsageError("gen-data needs a generated dataset kind (composite or trifeature)".into()));
    }
    let dataset = data.build(None)?;
    let out = match (out, data_dir) {
        (Some(o), _) => o,
        (None, Some(root)) => root.join(&dataset.name),
        (None, None) => bail!(UsageError("pass --out or set MCL_DATA_DIR".into())),
    };
    let manifest = save_dataset(&dataset, &out, serde_json::to_value(&data)?)?;
    println!("dataset {} -> {}", manifest.name, out.display());
    println!(
        "count {}  shape {}x{}x{}",
        manifest.count, manifest.channels, manifest.height, manifest.width
    );
    for f in &manifest.factors {
        println!("factor {:<10} cardinality {}", f.name, f.cardinality);
    }
    Ok(())
}

fn dataset_size(data: &DataConfig, root: Option<&Path>) -> Result<usize> {
    Ok(match data {
        DataConfig::Composite { count, .. } => *count,
        DataConfig::Trifeature(t) => t.shapes * t.textures * t.colors * t.per_combo,
        DataConfig::Directory { path } => {
            let full = match root {
                Some(r) if path.is_relative() => r.join(path),
                _ => path.clone(),
            };
            let manifest = full.join("manifest.json");
            if !manifest.exists() {
                return Err(Error::MissingArtifact(manifest).into());
            }
            let m: mcl_core::data::DatasetManifest = serde_json::from_slice(&fs::read(&manifest)?)?;
            m.count
        }
    })
}

fn check_capacity(cfg: &ExperimentConfig, m: usize) -> Result<()> {
    cfg.check_capacity(m).with_context(|| {
        format!(
            "K={} N={} M={m} b={} (capacity_check = {:?})",
            cfg.clusters, cfg.stages, cfg.train.batch_size, cfg.capacity_check
        )
    })
}

/// Held for the lifetime of a run; removed on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow::Error::new(UsageError(format!("{} is locked by another run", dir.display())))
            } else {
                anyhow::Error::new(e).context(format!("creating {}", path.display()))
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(RunLock(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn run(cfg: ExperimentConfig, out: &Path, data_dir: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let m = dataset_size(&cfg.data, data_dir)?;
    check_capacity(&cfg, m)?;
    let dataset = cfg.data.build(data_dir)?;
    let _lock = RunLock::acquire(out)?;
    let mut progress = |p: &Progress| {
        if let Ok(line) = serde_json::to_string(p) {
            eprintln!("{line}");
        }
    };
    let outcome = run_experiment(&cfg, &dataset, Some(out), &mut progress)?;
    for p in outcome
        .report
        .per_stage
        .iter()
        .flat_map(|s| &s.probes)
        .chain(&outcome.report.integrated_probes)
    {
        println!("{:<12} {:<10} {:.4}", p.representation_id, p.factor, p.accuracy);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn inspect(dir: &Path, anchor: usize, k: usize) -> Result<()> {
    let cfg = read_frozen_config(dir)?;
    let mut reps: Vec<Matrix> = Vec::new();
    for j in 0..cfg.stages {
        let x = read_embeddings(&dir.join(format!("stage_{j}")).join("representations.bin"))?;
        let nn = topk_neighbors(&x, anchor, k).map_err(|e| UsageError(e.to_string()))?;
        println!("stage_{j}: {}", join(&nn));
        reps.push(x);
    }
    let refs: Vec<&Matrix> = reps.iter().collect();
    let integrated = integrate(&refs, cfg.integration_normalize)?;
    let nn = topk_neighbors(&integrated, anchor, k).map_err(|e| UsageError(e.to_string()))?;
    println!("integrated: {}", join(&nn));
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}
