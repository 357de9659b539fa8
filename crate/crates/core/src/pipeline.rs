//! The multistage loop: train a stage, embed the dataset, cluster, extend the
//! pseudo labels, repeat; then concatenate the per-stage representations and
//! evaluate everything.
//!
//! Experiment directory layout:
//!
//! ```text
//! config.json              frozen configuration
//! factor_labels.csv        ground-truth labels, evaluation only
//! stage_<j>/checkpoint/    encoder manifest + parameter blob
//! stage_<j>/embeddings.bin projection-space embeddings z
//! stage_<j>/representations.bin  pre-projection representations h
//! stage_<j>/clusters.csv   K-means assignment of z
//! stage_<j>/pseudo_labels.csv    labels the stage was trained with
//! stage_<j>/metrics.json   per-epoch losses
//! integrated.bin           concatenated representations
//! report.json, metrics.csv
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{
    extend_pseudo_labels, kmeans, read_assignment_csv, validate_capacity, write_assignment_csv,
    write_pseudo_label_csv, ClusterAssignment, KMeansParams, PseudoLabel,
};
use crate::data::{
    augment_pair, generate_composite, generate_digits, generate_objects, generate_trifeature, load_dataset,
    AugmentationConfig, Dataset, Image, SourceConfig, TrifeatureConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{linear_probe, pseudo_label_histogram, stage_ami_matrix, HistogramEntry, ProbeConfig, Report, StageReport};
use crate::linalg::Matrix;
use crate::model::{init_encoder, load_checkpoint, save_checkpoint, EncoderSpec, EncoderState, InitMode, TrainConfig};
use crate::objective::{build_mask, NegativeMask};
use crate::sampling::{plan_epoch, plan_epoch_uniform, BatchPlan};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FACTOR_LABELS_FILE: &str = "factor_labels.csv";
pub const INTEGRATED_FILE: &str = "integrated.bin";

/// Where an experiment's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Procedural objects (3 channels) stacked with procedural digits (1 channel).
    Composite {
        count: usize,
        size: usize,
        /// Size of each single-factor source pool.
        source_count: usize,
        seed: u64,
    },
    Trifeature(TrifeatureConfig),
    /// A directory written by `save_dataset`; relative paths resolve against
    /// the data root.
    Directory { path: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Composite {
            count: 20_000,
            size: 32,
            source_count: 20_000,
            seed: 0,
        }
    }
}

impl DataConfig {
    /// Generates or loads the dataset. `data_root` resolves relative
    /// directory paths.
    pub fn build(&self, data_root: Option<&Path>) -> Result<Dataset> {
        match self {
            DataConfig::Composite {
                count,
                size,
                source_count,
                seed,
            } => {
                let objects = generate_objects(&SourceConfig {
                    count: *source_count,
                    size: *size,
                    seed: *seed,
                })?;
                let digits = generate_digits(&SourceConfig {
                    count: *source_count,
                    size: *size,
                    seed: seed.wrapping_add(1),
                })?;
                let mut ds = generate_composite(&objects, &digits, *count, seed.wrapping_add(2))?;
                ds.name = "composite".into();
                Ok(ds)
            }
            DataConfig::Trifeature(cfg) => generate_trifeature(cfg),
            DataConfig::Directory { path } => {
                let full = match data_root {
                    Some(root) if path.is_relative() => root.join(path),
                    _ => path.clone(),
                };
                Ok(load_dataset(&full)?.0)
            }
        }
    }
}

/// Which form of the cluster-capacity bound gates a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CapacityCheck {
    /// `K^N * b <= M` with `N` the stage count.
    #[default]
    Strict,
    /// `K^(N-1) * b <= M`: only the clusterings that partition training
    /// batches are counted (the last stage's clustering is never sampled from).
    TrainedStages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub stages: usize,
    pub clusters: usize,
    pub encoder: EncoderSpec,
    /// Batch size, temperature and epochs per stage live here.
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub seed_base: u64,
    /// Explicit per-stage seeds; empty means `seed_base + j`.
    pub seeds: Vec<u64>,
    pub integration_normalize: bool,
    pub drop_last: bool,
    pub capacity_check: CapacityCheck,
    pub kmeans: KMeansParams,
    pub probe: ProbeConfig,
    /// Worker threads for augmentation and embedding; results do not depend on it.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "mcl".into(),
            data: DataConfig::default(),
            stages: 3,
            clusters: 5,
            encoder: EncoderSpec::default(),
            train: TrainConfig::default(),
            augment: AugmentationConfig::default(),
            seed_base: 0,
            seeds: Vec::new(),
            integration_normalize: true,
            drop_last: true,
            capacity_check: CapacityCheck::Strict,
            kmeans: KMeansParams::default(),
            probe: ProbeConfig::default(),
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be positive".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.stages {
            return Err(Error::Config(format!(
                "{} seeds given for {} stages",
                self.seeds.len(),
                self.stages
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.encoder.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.probe.validate()?;
        Ok(())
    }

    pub fn stage_seed(&self, j: usize) -> u64 {
        self.seeds.get(j).copied().unwrap_or(self.seed_base.wrapping_add(j as u64))
    }

    /// Applies the configured capacity bound for a dataset of `m` samples.
    pub fn check_capacity(&self, m: usize) -> Result<()> {
        let n = match self.capacity_check {
            CapacityCheck::Strict => self.stages,
            CapacityCheck::TrainedStages => self.stages - 1,
        };
        validate_capacity(self.clusters as u64, n as u32, m as u64, self.train.batch_size as u64).into_result()
    }

    /// Canonical JSON used for the frozen copy and the config hash.
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything one stage produced.
#[derive(Debug, Clone)]
pub struct StageArtifacts {
    pub stage: usize,
    pub encoder: EncoderState,
    /// Pre-projection representations `h`, `M x representation_dim`.
    pub representations: Matrix,
    /// Unit-norm projections `z`, `M x projection_dim`.
    pub embeddings: Matrix,
    /// K-means assignment of `embeddings`.
    pub assignment: ClusterAssignment,
    pub metrics: StageMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub batches_per_epoch: Vec<usize>,
    /// `(pseudo label, absorbing group)` merges from the last epoch's plan.
    pub merged_groups: Vec<(PseudoLabel, usize)>,
}

/// Line-delimited progress events.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Progress {
    Epoch {
        stage: usize,
        epoch: usize,
        loss: f64,
        batches: usize,
        seconds: f64,
    },
    Stage {
        stage: usize,
        seconds: f64,
        inertia: f64,
        cluster_sizes: Vec<usize>,
    },
}

/// Progress sink that discards everything.
pub fn quiet(_: &Progress) {}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn view_seed(aug: u64, stage: u64, epoch: usize, sample: usize) -> u64 {
    mix(mix(mix(aug ^ mix(stage)) ^ epoch as u64) ^ sample as u64)
}

/// Maps `f` over `0..n` with up to `threads` scoped workers, preserving order.
fn par_map<T: Send>(threads: usize, n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if threads <= 1 || n < 2 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let f = &f;
                s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Un-augmented network inputs: every image resized to the encoder size.
pub fn network_inputs(dataset: &Dataset, spec: &EncoderSpec, threads: usize) -> Vec<Image> {
    par_map(threads, dataset.len(), |i| dataset.images[i].pixels.resized(spec.input_size))
}

/// `(h, z)` for every input, computed in fixed-size batches.
pub fn embed(encoder: &EncoderState, inputs: &[Image], threads: usize) -> Result<(Matrix, Matrix)> {
    const BATCH: usize = 256;
    let chunks: Vec<&[Image]> = inputs.chunks(BATCH).collect();
    let parts = par_map(threads, chunks.len(), |c| encoder.forward(chunks[c]));
    let (r, q) = (encoder.spec.representation_dim, encoder.spec.projection_dim);
    let mut h = Matrix::zeros(0, r);
    let mut z = Matrix::zeros(0, q);
    // Rounded to the on-disk precision so reloaded artifacts match exactly.
    let round = |v: f64| v as f32 as f64;
    for part in parts {
        let (ph, pz) = part?;
        h.rows += ph.rows;
        h.data.extend(ph.data.into_iter().map(round));
        z.rows += pz.rows;
        z.data.extend(pz.data.into_iter().map(round));
    }
    Ok((h, z))
}

/// Inputs shared by every stage of one experiment.
pub struct StageContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dataset: &'a Dataset,
    /// Output of [`network_inputs`].
    pub inputs: &'a [Image],
    /// Experiment directory; nothing is written when `None`.
    pub out_dir: Option<&'a Path>,
}

/// Trains, embeds and clusters stage `j`.
///
/// `pseudo_labels` must have length `j` for every sample. `previous` is the
/// stage `j - 1` artifact set (used for inheritance and group merging).
pub fn run_stage(
    j: usize,
    ctx: &StageContext<'_>,
    pseudo_labels: &[PseudoLabel],
    previous: Option<&StageArtifacts>,
    observer: &mut dyn FnMut(&Progress),
) -> Result<StageArtifacts> {
    let cfg = ctx.cfg;
    let m = ctx.dataset.len();
    if pseudo_labels.len() != m {
        return Err(Error::Contract(format!("{} pseudo labels for {m} samples", pseudo_labels.len())));
    }
    if let Some(i) = pseudo_labels.iter().position(|p| p.len() != j) {
        return Err(Error::Contract(format!(
            "pseudo label of sample {i} has length {}, stage {j} needs {j}",
            pseudo_labels[i].len()
        )));
    }
    if ctx.inputs.len() != m {
        return Err(Error::Contract("network inputs do not match the dataset".into()));
    }
    let started = Instant::now();
    let seed = cfg.stage_seed(j);
    let spec = EncoderSpec {
        seed,
        ..cfg.encoder.clone()
    };
    // Stage 0 has nothing to inherit from and always starts from scratch.
    let init_mode = match (&cfg.train.init_mode, previous) {
        (InitMode::InheritPrevious, None) => InitMode::Scratch,
        (mode, _) => mode.clone(),
    };
    let mut encoder = init_encoder(&spec, &init_mode, previous.map(|p| &p.encoder))?;
    let augment = AugmentationConfig {
        output_size: Some(spec.input_size),
        ..cfg.augment.clone()
    };
    let stage_dir = ctx.out_dir.map(|d| d.join(format!("stage_{j}")));
    if let Some(dir) = &stage_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pseudo_label_csv(pseudo_labels, &dir.join("pseudo_labels.csv"))?;
    }

    let b = cfg.train.batch_size;
    let mut metrics = StageMetrics {
        seed,
        epoch_losses: Vec::new(),
        batches_per_epoch: Vec::new(),
        merged_groups: Vec::new(),
    };
    let mut batch_counter = 0usize;
    for epoch in 0..cfg.train.epochs {
        let epoch_started = Instant::now();
        let plan: BatchPlan = if j == 0 {
            plan_epoch_uniform(m, b, seed, epoch, cfg.drop_last)?
        } else {
            plan_epoch(
                pseudo_labels,
                b,
                seed,
                epoch,
                cfg.drop_last,
                previous.map(|p| &p.embeddings),
            )?
        };
        let mut loss_sum = 0.0;
        for batch in &plan.batches {
            let views = par_map(cfg.threads, batch.len(), |t| {
                let i = batch[t];
                let mut rng = ChaCha8Rng::seed_from_u64(view_seed(augment.seed, seed, epoch, i));
                augment_pair(&ctx.dataset.images[i].pixels, &augment, &mut rng)
            });
            let (v1, v2): (Vec<Image>, Vec<Image>) = views.into_iter().unzip();
            let mask = if j == 0 {
                NegativeMask::all_off_diagonal(batch.len())
            } else {
                let labels: Vec<PseudoLabel> = batch.iter().map(|&i| pseudo_labels[i].clone()).collect();
                build_mask(&labels)?
            };
            let loss = encoder
                .train_step(&v1, &v2, &mask, &cfg.train, batch_counter)
                .map_err(|e| match e {
                    Error::Training { batch, message } => Error::Training {
                        batch,
                        message: format!("stage {j}, epoch {epoch}: {message}"),
                    },
                    other => other,
                })?;
            loss_sum += loss;
            batch_counter += 1;
        }
        let mean = loss_sum / plan.batches.len().max(1) as f64;
        metrics.epoch_losses.push(mean);
        metrics.batches_per_epoch.push(plan.batches.len());
        metrics.merged_groups = plan.merged;
        observer(&Progress::Epoch {
            stage: j,
            epoch,
            loss: mean,
            batches: plan.batches.len(),
            seconds: epoch_started.elapsed().as_secs_f64(),
        });
    }

    let (representations, embeddings) = embed(&encoder, ctx.inputs, cfg.threads)?;
    let mut assignment = kmeans(&embeddings, cfg.clusters.min(m), cfg.kmeans, seed)?;
    assignment.stage = j;

    if let Some(dir) = &stage_dir {
        save_checkpoint(&encoder, &dir.join("checkpoint"))?;
        write_embeddings(&embeddings, &dir.join("embeddings.bin"))?;
        write_embeddings(&representations, &dir.join("representations.bin"))?;
        write_assignment_csv(&assignment, &dir.join("clusters.csv"))?;
        let path = dir.join("metrics.json");
        fs::write(&path, serde_json::to_vec_pretty(&metrics)?).map_err(|e| Error::io(&path, e))?;
    }
    observer(&Progress::Stage {
        stage: j,
        seconds: started.elapsed().as_secs_f64(),
        inertia: assignment.inertia,
        cluster_sizes: assignment.cluster_sizes(),
    });
    Ok(StageArtifacts {
        stage: j,
        encoder,
        representations,
        embeddings,
        assignment,
        metrics,
    })
}

/// Row-wise concatenation of the stage representations, each block
/// L2-normalized first when `normalize` is set.
pub fn integrate(representations: &[&Matrix], normalize: bool) -> Result<Matrix> {
    let Some(first) = representations.first() else {
        return Err(Error::Contract("nothing to integrate".into()));
    };
    let m = first.rows;
    if let Some(bad) = representations.iter().position(|r| r.rows != m) {
        return Err(Error::Contract(format!(
            "stage {bad} has {} rows, stage 0 has {m}",
            representations[bad].rows
        )));
    }
    let width: usize = representations.iter().map(|r| r.cols).sum();
    let mut out = Matrix::zeros(m, width);
    for i in 0..m {
        let row = out.row_mut(i);
        let mut at = 0;
        for r in representations {
            let block = &mut row[at..at + r.cols];
            block.copy_from_slice(r.row(i));
            if normalize {
                let n = crate::linalg::norm(block);
                if n > 0.0 {
                    block.iter_mut().for_each(|v| *v /= n);
                }
            }
            at += r.cols;
        }
    }
    Ok(out)
}

/// Result of a full run.
pub struct ExperimentOutcome {
    pub report: Report,
    pub stages: Vec<StageArtifacts>,
    pub integrated: Matrix,
}

/// Runs all stages, integrates, evaluates, and (with `out_dir`) persists
/// every artifact.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(&Progress),
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let (channels, _, _) = dataset.shape();
    if channels != cfg.encoder.input_channels {
        return Err(Error::Config(format!(
            "dataset has {channels} channels, encoder expects {}",
            cfg.encoder.input_channels
        )));
    }
    cfg.check_capacity(dataset.len())?;
    let frozen = cfg.to_json()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, &frozen).map_err(|e| Error::io(&path, e))?;
        write_factor_labels(dataset, &dir.join(FACTOR_LABELS_FILE))?;
    }

    let inputs = network_inputs(dataset, &cfg.encoder, cfg.threads);
    let ctx = StageContext {
        cfg,
        dataset,
        inputs: &inputs,
        out_dir,
    };
    let mut pseudo_labels = vec![PseudoLabel::empty(); dataset.len()];
    let mut histograms = Vec::new();
    let mut stages: Vec<StageArtifacts> = Vec::new();
    for j in 0..cfg.stages {
        histograms.push(pseudo_label_histogram(&pseudo_labels));
        let artifacts = run_stage(j, &ctx, &pseudo_labels, stages.last(), observer)?;
        pseudo_labels = extend_pseudo_labels(&pseudo_labels, &artifacts.assignment)?;
        stages.push(artifacts);
    }

    let reps: Vec<&Matrix> = stages.iter().map(|s| &s.representations).collect();
    let integrated = integrate(&reps, cfg.integration_normalize)?;
    let factors = factor_columns(dataset);
    let assignments: Vec<ClusterAssignment> = stages.iter().map(|s| s.assignment.clone()).collect();
    let report = build_report(cfg, &sha256_hex(&frozen), &factors, &reps, &assignments, histograms, &integrated)?;
    if let Some(dir) = out_dir {
        write_embeddings(&integrated, &dir.join(INTEGRATED_FILE))?;
        write_report(&report, dir)?;
    }
    Ok(ExperimentOutcome {
        report,
        stages,
        integrated,
    })
}

fn factor_columns(dataset: &Dataset) -> Vec<(String, Vec<usize>)> {
    dataset
        .factors
        .iter()
        .enumerate()
        .map(|(f, spec)| (spec.name.clone(), dataset.images.iter().map(|im| im.factor_labels[f]).collect()))
        .collect()
}

fn build_report(
    cfg: &ExperimentConfig,
    config_hash: &str,
    factors: &[(String, Vec<usize>)],
    reps: &[&Matrix],
    assignments: &[ClusterAssignment],
    histograms: Vec<Vec<HistogramEntry>>,
    integrated: &Matrix,
) -> Result<Report> {
    let probe_all = |x: &Matrix, id: &str| -> Result<Vec<_>> {
        factors
            .iter()
            .map(|(name, labels)| linear_probe(x, labels, name, id, &cfg.probe))
            .collect()
    };
    let mut per_stage = Vec::new();
    for ((j, x), (a, hist)) in reps.iter().enumerate().zip(assignments.iter().zip(histograms)) {
        per_stage.push(StageReport {
            stage: j,
            probes: probe_all(x, &format!("stage_{j}"))?,
            inertia: a.inertia,
            histogram: hist,
            cluster_sizes: a.cluster_sizes(),
        });
    }
    let ami = stage_ami_matrix(assignments)?;
    let ami_matrix = (0..ami.rows).map(|i| ami.row(i).to_vec()).collect();
    Ok(Report {
        config_hash: config_hash.into(),
        per_stage,
        ami_matrix,
        integrated_probes: probe_all(integrated, "integrated")?,
    })
}

fn write_report(report: &Report, dir: &Path) -> Result<()> {
    let path = dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&path, e))?;
    report.write_metrics_csv(&dir.join(METRICS_FILE))
}

/// Recomputes the report of a completed experiment directory from its
/// persisted artifacts alone, and rewrites `report.json` and `metrics.csv`.
pub fn evaluate_experiment(dir: &Path) -> Result<Report> {
    let cfg = read_frozen_config(dir)?;
    let frozen = fs::read(dir.join(CONFIG_FILE)).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    let factors = read_factor_labels(&dir.join(FACTOR_LABELS_FILE))?;
    let m = factors.first().map_or(0, |(_, l)| l.len());
    let mut reps = Vec::new();
    let mut assignments = Vec::new();
    for j in 0..cfg.stages {
        let stage_dir = dir.join(format!("stage_{j}"));
        let r = read_embeddings(&stage_dir.join("representations.bin"))?;
        if r.rows != m {
            return Err(Error::Contract(format!("stage {j} has {} rows, labels have {m}", r.rows)));
        }
        reps.push(r);
        let (stage, labels) = read_assignment_csv(&stage_dir.join("clusters.csv"))?;
        let z = read_embeddings(&stage_dir.join("embeddings.bin"))?;
        let centroids = cluster_means(&z, &labels);
        let inertia = (0..z.rows)
            .map(|i| crate::linalg::squared_distance(z.row(i), centroids.row(labels[i])))
            .sum();
        assignments.push(ClusterAssignment {
            stage,
            k: labels.iter().max().map_or(0, |&l| l + 1),
            labels,
            centroids,
            inertia,
            inertia_history: Vec::new(),
            iterations: 0,
        });
    }
    let mut pseudo = vec![PseudoLabel::empty(); m];
    let mut histograms = Vec::new();
    for a in &assignments {
        histograms.push(pseudo_label_histogram(&pseudo));
        pseudo = extend_pseudo_labels(&pseudo, a)?;
    }
    let refs: Vec<&Matrix> = reps.iter().collect();
    let integrated = integrate(&refs, cfg.integration_normalize)?;
    let report = build_report(&cfg, &sha256_hex(&frozen), &factors, &refs, &assignments, histograms, &integrated)?;
    write_report(&report, dir)?;
    Ok(report)
}

fn cluster_means(x: &Matrix, labels: &[usize]) -> Matrix {
    let k = labels.iter().max().map_or(0, |&l| l + 1);
    let mut out = Matrix::zeros(k, x.cols);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (o, v) in out.row_mut(l).iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            out.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    out
}

pub fn read_frozen_config(dir: &Path) -> Result<ExperimentConfig> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads the encoder of stage `j` from an experiment directory.
pub fn load_stage_encoder(dir: &Path, j: usize) -> Result<EncoderState> {
    load_checkpoint(&dir.join(format!("stage_{j}")).join("checkpoint"))
}

fn write_factor_labels(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_index".to_string()];
    header.extend(dataset.factors.iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    for (i, im) in dataset.images.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(im.factor_labels.iter().map(ToString::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `factor_labels.csv` into `(factor name, labels)` columns.
pub fn read_factor_labels(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        for (f, col) in cols.iter_mut().enumerate() {
            let v = rec
                .get(f + 1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad label on row {row}", path.display())))?;
            col.push(v);
        }
    }
    Ok(names.into_iter().zip(cols).collect())
}

const EMBEDDING_MAGIC: &[u8; 4] = b"MCLE";
const EMBEDDING_VERSION: u32 = 1;
const EMBEDDING_HEADER: usize = 4 + 4 + 8 + 8;

/// Writes `MCLE`, u32 version, u64 rows, u64 cols, then row-major LE f32.
pub fn write_embeddings(x: &Matrix, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(EMBEDDING_HEADER + x.data.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(x.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(x.cols as u64).to_le_bytes());
    for &v in &x.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, message: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    };
    if bytes.len() < EMBEDDING_HEADER {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(fail(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != EMBEDDING_VERSION {
        return Err(fail(4, "unsupported version"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(8, "shape overflows"))?;
    if bytes.len() - EMBEDDING_HEADER != expected {
        return Err(fail(bytes.len(), "payload length does not match shape"));
    }
    let data = bytes[EMBEDDING_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}
