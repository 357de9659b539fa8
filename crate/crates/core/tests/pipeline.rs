//! End-to-end behaviour of the stage loop on small synthetic inputs.

use mcl_core::clustering::{extend_pseudo_labels, read_assignment_csv, PseudoLabel};
use mcl_core::data::{AugmentationConfig, Dataset, FactorSpec, Image, LabeledImage};
use mcl_core::evaluation::ProbeConfig;
use mcl_core::model::load_checkpoint;
use mcl_core::pipeline::{
    embed, evaluate_experiment, integrate, network_inputs, quiet, read_embeddings, run_experiment, run_stage, DataConfig, ExperimentConfig,
    StageContext,
};
use mcl_core::sampling::plan_epoch;
use mcl_core::{init_encoder, EncoderSpec, Error, InitMode, Matrix, NegativeMask, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-channel images whose "lit" factor decides which channel carries the
/// signal; "pattern" is a weaker gradient direction.
fn two_channel(m: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..m)
        .map(|i| {
            let lit = i % 2;
            let pattern = rng.random_range(0..3);
            let mut img = Image::zeros(2, 8, 8);
            for y in 0..8 {
                for x in 0..8 {
                    let g = match pattern {
                        0 => x as f32 / 7.0,
                        1 => y as f32 / 7.0,
                        _ => 0.5,
                    };
                    img.set(lit, y, x, (0.5 + 0.4 * g + rng.random_range(0.0..0.1)).min(1.0));
                    img.set(1 - lit, y, x, rng.random_range(0.0..0.15));
                }
            }
            LabeledImage {
                pixels: img,
                factor_labels: vec![lit, pattern],
                sample_index: i,
            }
        })
        .collect();
    Dataset {
        name: "two-channel".into(),
        factors: vec![FactorSpec::new("lit", 2), FactorSpec::new("pattern", 3)],
        images,
        seed,
    }
}

fn tiny_config(stages: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: "tiny".into(),
        data: DataConfig::Composite {
            count: 96,
            size: 8,
            source_count: 96,
            seed: 0,
        },
        stages,
        clusters: 2,
        encoder: EncoderSpec {
            input_channels: 2,
            input_size: 8,
            conv_widths: vec![4, 8],
            representation_dim: 8,
            projection_dim: 4,
            seed: 0,
        },
        train: TrainConfig {
            epochs: 3,
            batch_size: 8,
            temperature: 0.5,
            ..TrainConfig::default()
        },
        augment: AugmentationConfig {
            crop_scale_range: (0.6, 1.0),
            ..AugmentationConfig::default()
        },
        probe: ProbeConfig {
            epochs: 50,
            seeds: vec![0],
            ..ProbeConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn purity(clusters: &[usize], factor: &[usize]) -> f64 {
    let k = clusters.iter().max().unwrap() + 1;
    let f = factor.iter().max().unwrap() + 1;
    let mut table = vec![0usize; k * f];
    for (&c, &y) in clusters.iter().zip(factor) {
        table[c * f + y] += 1;
    }
    (0..k).map(|c| *table[c * f..(c + 1) * f].iter().max().unwrap()).sum::<usize>() as f64 / clusters.len() as f64
}

#[test]
fn stage_one_batches_follow_the_dominant_factor() {
    let ds = two_channel(96, 1);
    let cfg = tiny_config(2);
    let inputs = network_inputs(&ds, &cfg.encoder, 1);
    let ctx = StageContext {
        cfg: &cfg,
        dataset: &ds,
        inputs: &inputs,
        out_dir: None,
    };
    let empty = vec![PseudoLabel::empty(); ds.len()];
    let stage0 = run_stage(0, &ctx, &empty, None, &mut quiet).unwrap();
    let lit = ds.factor_labels("lit").unwrap();
    let p = purity(&stage0.assignment.labels, &lit);
    assert!(p >= 0.9, "precondition: stage-0 clusters should track the lit channel, purity {p}");

    let labels = extend_pseudo_labels(&empty, &stage0.assignment).unwrap();
    let plan = plan_epoch(&labels, 8, 5, 0, true, Some(&stage0.embeddings)).unwrap();
    let homogeneity: Vec<f64> = plan
        .batches
        .iter()
        .map(|b| {
            let ones = b.iter().filter(|&&i| lit[i] == 1).count();
            ones.max(b.len() - ones) as f64 / b.len() as f64
        })
        .collect();
    let mean = homogeneity.iter().sum::<f64>() / homogeneity.len() as f64;
    assert!(mean >= 0.9, "mean batch homogeneity {mean}");
}

#[test]
fn stage_rejects_wrong_pseudo_label_length() {
    let ds = two_channel(32, 2);
    let cfg = tiny_config(2);
    let inputs = network_inputs(&ds, &cfg.encoder, 1);
    let ctx = StageContext {
        cfg: &cfg,
        dataset: &ds,
        inputs: &inputs,
        out_dir: None,
    };
    let wrong = vec![PseudoLabel::new(vec![0]); ds.len()];
    assert!(matches!(run_stage(0, &ctx, &wrong, None, &mut quiet), Err(Error::Contract(_))));
}

fn as_f32(m: &Matrix) -> Matrix {
    Matrix {
        data: m.data.iter().map(|&v| v as f32 as f64).collect(),
        ..m.clone()
    }
}

#[test]
fn persisted_artifacts_reload_identically() {
    let ds = two_channel(64, 3);
    let cfg = tiny_config(2);
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, &ds, Some(dir.path()), &mut quiet).unwrap();
    for s in &out.stages {
        let stage_dir = dir.path().join(format!("stage_{}", s.stage));
        assert_eq!(read_embeddings(&stage_dir.join("embeddings.bin")).unwrap(), s.embeddings);
        assert_eq!(read_embeddings(&stage_dir.join("representations.bin")).unwrap(), s.representations);
        let (stage, labels) = read_assignment_csv(&stage_dir.join("clusters.csv")).unwrap();
        assert_eq!(stage, s.stage);
        assert_eq!(labels, s.assignment.labels);
        let encoder = load_checkpoint(&stage_dir.join("checkpoint")).unwrap();
        assert_eq!(encoder.params, s.encoder.params);
        let inputs = network_inputs(&ds, &cfg.encoder, 1);
        let (h, z) = embed(&encoder, &inputs, 1).unwrap();
        assert_eq!((h, z), (s.representations.clone(), s.embeddings.clone()));
    }
    let integrated = read_embeddings(&dir.path().join("integrated.bin")).unwrap();
    assert_eq!(integrated.cols, 2 * cfg.encoder.representation_dim);
    // The integrated matrix is normalized in f64 and stored as f32.
    assert_eq!(integrated, as_f32(&out.integrated));
    let reevaluated = evaluate_experiment(dir.path()).unwrap();
    assert_eq!(reevaluated.per_stage.len(), out.report.per_stage.len());
    for (a, b) in reevaluated.per_stage.iter().zip(&out.report.per_stage) {
        assert_eq!(a.probes, b.probes);
        assert_eq!(a.cluster_sizes, b.cluster_sizes);
        assert!((a.inertia - b.inertia).abs() <= 1e-9 * b.inertia.max(1.0));
    }
    assert_eq!(reevaluated.integrated_probes, out.report.integrated_probes);
    assert_eq!(reevaluated.ami_matrix, out.report.ami_matrix);
}

#[test]
fn integrated_block_equals_stage_representation() {
    let ds = two_channel(48, 4);
    let cfg = ExperimentConfig {
        integration_normalize: false,
        ..tiny_config(2)
    };
    let out = run_experiment(&cfg, &ds, None, &mut quiet).unwrap();
    let r = cfg.encoder.representation_dim;
    for i in [0, 17, 47] {
        for (s, stage) in out.stages.iter().enumerate() {
            assert_eq!(&out.integrated.row(i)[s * r..(s + 1) * r], stage.representations.row(i));
        }
    }
}

#[test]
fn single_stage_is_plain_contrastive_learning() {
    let ds = two_channel(48, 5);
    let cfg = tiny_config(1);
    let out = run_experiment(&cfg, &ds, None, &mut quiet).unwrap();
    assert_eq!(out.report.per_stage.len(), 1);
    assert_eq!(out.report.ami_matrix, vec![vec![1.0]]);
    let expected = integrate(&[&out.stages[0].representations], true).unwrap();
    assert_eq!(out.integrated, expected);
    assert_eq!(out.report.per_stage[0].histogram.len(), 1);
    assert_eq!(out.report.per_stage[0].histogram[0].count, 48);
    assert_eq!(out.report.integrated_probes.len(), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let ds = two_channel(64, 6);
    let cfg = tiny_config(2);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, &ds, Some(a.path()), &mut quiet).unwrap();
    run_experiment(&cfg, &ds, Some(b.path()), &mut quiet).unwrap();
    for file in ["report.json", "stage_0/clusters.csv", "stage_1/clusters.csv", "integrated.bin"] {
        assert_eq!(
            std::fs::read(a.path().join(file)).unwrap(),
            std::fs::read(b.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let ds = two_channel(64, 7);
    let one = run_experiment(&tiny_config(2), &ds, None, &mut quiet).unwrap();
    let cfg = ExperimentConfig {
        threads: 3,
        ..tiny_config(2)
    };
    let mut three = run_experiment(&cfg, &ds, None, &mut quiet).unwrap();
    assert_eq!(one.integrated, three.integrated);
    // The config hash covers the thread count; everything else must agree.
    three.report.config_hash = one.report.config_hash.clone();
    assert_eq!(one.report, three.report);
}

#[test]
fn inherit_previous_starts_from_the_last_stage() {
    let ds = two_channel(48, 8);
    let mut cfg = tiny_config(2);
    cfg.train.init_mode = InitMode::InheritPrevious;
    cfg.train.learning_rate = 0.0;
    let out = run_experiment(&cfg, &ds, None, &mut quiet).unwrap();
    assert_eq!(out.stages[0].encoder.params, out.stages[1].encoder.params);
}

#[test]
fn overfitting_a_fixed_batch_lowers_the_loss() {
    let spec = EncoderSpec {
        input_channels: 2,
        input_size: 8,
        conv_widths: vec![8, 16],
        representation_dim: 16,
        projection_dim: 8,
        seed: 3,
    };
    let ds = two_channel(8, 9);
    let v1: Vec<Image> = ds.images.iter().map(|im| im.pixels.clone()).collect();
    let v2: Vec<Image> = v1
        .iter()
        .map(|im| {
            let mut out = im.clone();
            out.data.iter_mut().for_each(|v| *v = (*v * 0.9 + 0.05).min(1.0));
            out
        })
        .collect();
    let mask = NegativeMask::all_off_diagonal(8);
    let cfg = TrainConfig::default();
    let mut state = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
    let losses: Vec<f64> = (0..50).map(|t| state.train_step(&v1, &v2, &mask, &cfg, t).unwrap()).collect();
    assert!(losses[49] < losses[0], "loss went from {} to {}", losses[0], losses[49]);
    assert!(losses[40..].iter().sum::<f64>() < losses[..10].iter().sum::<f64>());
}

#[test]
fn training_is_deterministic() {
    let spec = EncoderSpec {
        input_channels: 2,
        input_size: 8,
        conv_widths: vec![4],
        representation_dim: 4,
        projection_dim: 2,
        seed: 1,
    };
    let ds = two_channel(6, 10);
    let v: Vec<Image> = ds.images.iter().map(|im| im.pixels.clone()).collect();
    let mask = NegativeMask::all_off_diagonal(6);
    let run = || {
        let mut s = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
        for t in 0..2 {
            s.train_step(&v, &v, &mask, &TrainConfig::default(), t).unwrap();
        }
        s.params
    };
    assert_eq!(run(), run());
}
