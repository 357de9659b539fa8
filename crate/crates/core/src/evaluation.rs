//! Linear probes on frozen representations, agreement between stage
//! clusterings, pseudo-label histograms and nearest-neighbour retrieval.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{ami, ClusterAssignment, PseudoLabel};
use crate::error::{Error, Result};
use crate::linalg::{dot, gemm, norm, Matrix, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    /// Split seeds; reported accuracy is the mean over them.
    pub seeds: Vec<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.1,
            train_fraction: 0.8,
            seeds: vec![0, 1, 2],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("probe needs at least one seed".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} not in (0,1)", self.train_fraction)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("probe learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub factor: String,
    /// `stage_<j>` or `integrated`.
    pub representation_id: String,
    /// Held-out accuracy (mean over probe seeds).
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub per_seed: Vec<f64>,
    pub train_size: usize,
    pub test_size: usize,
}

/// Per-class seeded split; each class contributes `round(fraction * n_c)`
/// training samples (at least one stays on each side when `n_c >= 2`).
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut cut = (fraction * n as f64).round() as usize;
        if n >= 2 {
            cut = cut.clamp(1, n - 1);
        }
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Trained multinomial logistic regression on standardized features.
struct Softmax {
    classes: usize,
    dim: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `dim x classes`, then a bias row.
    weights: Vec<f64>,
}

impl Softmax {
    fn standardize(&self, x: &Matrix, rows: &[usize]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; rows.len() * d];
        for (r, &i) in rows.iter().enumerate() {
            for (t, (&v, o)) in x.row(i).iter().zip(&mut out[r * d..(r + 1) * d]).enumerate() {
                *o = (v - self.mean[t]) * self.inv_std[t];
            }
        }
        out
    }

    fn logits(&self, xs: &[f64], n: usize) -> Vec<f64> {
        let (d, c) = (self.dim, self.classes);
        let mut out = vec![0.0; n * c];
        for row in out.chunks_exact_mut(c) {
            row.copy_from_slice(&self.weights[d * c..]);
        }
        gemm(n, d, c, 1.0, View::rm(xs, d), View::rm(&self.weights[..d * c], c), 1.0, &mut out);
        out
    }

    fn accuracy(&self, x: &Matrix, labels: &[usize], rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let xs = self.standardize(x, rows);
        let logits = self.logits(&xs, rows.len());
        let correct = rows
            .iter()
            .enumerate()
            .filter(|&(r, &i)| argmax(&logits[r * self.classes..(r + 1) * self.classes]) == labels[i])
            .count();
        correct as f64 / rows.len() as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn train_softmax(x: &Matrix, labels: &[usize], rows: &[usize], classes: usize, cfg: &ProbeConfig) -> Softmax {
    let d = x.cols;
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in rows {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                0.0
            }
        })
        .collect();
    let mut model = Softmax {
        classes,
        dim: d,
        mean,
        inv_std,
        weights: vec![0.0; (d + 1) * classes],
    };
    let xs = model.standardize(x, rows);
    let m = rows.len();
    let mut grad_logits = vec![0.0; m * classes];
    let mut grad_w = vec![0.0; d * classes];
    for _ in 0..cfg.epochs {
        let logits = model.logits(&xs, m);
        for (r, &i) in rows.iter().enumerate() {
            let z = &logits[r * classes..(r + 1) * classes];
            let g = &mut grad_logits[r * classes..(r + 1) * classes];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (gv, &zv) in g.iter_mut().zip(z) {
                *gv = (zv - max).exp();
                sum += *gv;
            }
            for gv in g.iter_mut() {
                *gv /= sum * n;
            }
            g[labels[i]] -= 1.0 / n;
        }
        gemm(d, m, classes, 1.0, View::rm_t(&xs, d), View::rm(&grad_logits, classes), 0.0, &mut grad_w);
        for (w, g) in model.weights[..d * classes].iter_mut().zip(&grad_w) {
            *w -= cfg.learning_rate * g;
        }
        for c in 0..classes {
            let gb: f64 = grad_logits.iter().skip(c).step_by(classes).sum();
            model.weights[d * classes + c] -= cfg.learning_rate * gb;
        }
    }
    model
}

/// Linear evaluation of one factor on frozen features, averaged over the
/// configured split seeds. `x` is only read.
pub fn linear_probe(
    x: &Matrix,
    labels: &[usize],
    factor: &str,
    representation_id: &str,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    if labels.len() != x.rows {
        return Err(Error::Contract(format!("{} labels for {} rows", labels.len(), x.rows)));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::Evaluation(format!(
            "factor {factor} has a single class; nothing to probe"
        )));
    }
    if !x.is_finite() {
        return Err(Error::Evaluation("non-finite features".into()));
    }
    let mut per_seed = Vec::new();
    let mut train_acc = 0.0;
    let (mut train_size, mut test_size) = (0, 0);
    for &seed in &cfg.seeds {
        let (train, test) = stratified_split(labels, cfg.train_fraction, seed);
        let model = train_softmax(x, labels, &train, classes, cfg);
        per_seed.push(model.accuracy(x, labels, &test));
        train_acc += model.accuracy(x, labels, &train);
        train_size = train.len();
        test_size = test.len();
    }
    let k = cfg.seeds.len() as f64;
    Ok(ProbeResult {
        factor: factor.into(),
        representation_id: representation_id.into(),
        accuracy: per_seed.iter().sum::<f64>() / k,
        train_accuracy: train_acc / k,
        per_seed,
        train_size,
        test_size,
    })
}

/// Pairwise AMI between stage clusterings; the diagonal is exactly 1.
pub fn stage_ami_matrix(assignments: &[ClusterAssignment]) -> Result<Matrix> {
    let n = assignments.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out.data[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = ami(&assignments[i].labels, &assignments[j].labels)?;
            out.data[i * n + j] = v;
            out.data[j * n + i] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub label: String,
    pub count: usize,
}

/// Counts per distinct pseudo label, in label order.
pub fn pseudo_label_histogram(labels: &[PseudoLabel]) -> Vec<HistogramEntry> {
    let mut counts: BTreeMap<&PseudoLabel, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(l, count)| HistogramEntry {
            label: l.to_string(),
            count,
        })
        .collect()
}

/// The `k` rows most cosine-similar to `anchor`, excluding it; ties go to
/// the smaller index. Zero rows have similarity 0 to everything.
pub fn topk_neighbors(x: &Matrix, anchor: usize, k: usize) -> Result<Vec<usize>> {
    if anchor >= x.rows {
        return Err(Error::Contract(format!("anchor {anchor} out of range for {} rows", x.rows)));
    }
    if k >= x.rows {
        return Err(Error::Contract(format!("k = {k} must be below the sample count {}", x.rows)));
    }
    let a = x.row(anchor);
    let na = norm(a);
    let mut scored: Vec<(f64, usize)> = (0..x.rows)
        .filter(|&i| i != anchor)
        .map(|i| {
            let r = x.row(i);
            let d = na * norm(r);
            (if d > 0.0 { dot(a, r) / d } else { 0.0 }, i)
        })
        .collect();
    scored.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub probes: Vec<ProbeResult>,
    pub inertia: f64,
    /// Pseudo-label distribution the stage was trained with.
    pub histogram: Vec<HistogramEntry>,
    pub cluster_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// SHA-256 of the frozen config JSON.
    pub config_hash: String,
    pub per_stage: Vec<StageReport>,
    pub ami_matrix: Vec<Vec<f64>>,
    pub integrated_probes: Vec<ProbeResult>,
}

impl Report {
    /// Held-out accuracy for `factor` on `representation_id`.
    pub fn accuracy(&self, representation_id: &str, factor: &str) -> Option<f64> {
        self.per_stage
            .iter()
            .flat_map(|s| &s.probes)
            .chain(&self.integrated_probes)
            .find(|p| p.representation_id == representation_id && p.factor == factor)
            .map(|p| p.accuracy)
    }

    /// One row per probe: `representation,factor,accuracy,train_accuracy`.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["representation", "factor", "accuracy", "train_accuracy"])?;
        for p in self.per_stage.iter().flat_map(|s| &s.probes).chain(&self.integrated_probes) {
            w.write_record([
                p.representation_id.clone(),
                p.factor.clone(),
                format!("{:.6}", p.accuracy),
                format!("{:.6}", p.train_accuracy),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let shift = if c == 0 { -4.0 } else { 4.0 };
            let r: Vec<f64> = (0..3)
                .map(|t| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g + if t == 0 { shift } else { 0.0 }
                })
                .collect();
            rows.push(r);
            labels.push(c);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn separable_blobs() {
        let (x, y) = blobs(400, 1);
        let r = linear_probe(&x, &y, "f", "stage_0", &ProbeConfig::default()).unwrap();
        assert!(r.accuracy >= 0.99, "{}", r.accuracy);
        assert_eq!(r.train_size + r.test_size, 400);
    }

    #[test]
    fn shuffled_labels_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<usize> = (0..2000).map(|_| rng.random_range(0..10)).collect();
        let r = linear_probe(&x, &y, "f", "stage_0", &ProbeConfig::default()).unwrap();
        assert!((r.accuracy - 0.10).abs() <= 0.05, "{}", r.accuracy);
    }

    #[test]
    fn single_class_is_rejected() {
        let (x, _) = blobs(20, 2);
        let y = vec![3; 20];
        assert!(matches!(
            linear_probe(&x, &y, "f", "s", &ProbeConfig::default()),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn probe_does_not_touch_features() {
        let (x, y) = blobs(100, 3);
        let before = x.clone();
        linear_probe(&x, &y, "f", "s", &ProbeConfig::default()).unwrap();
        assert_eq!(x, before);
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let (train, test) = stratified_split(&labels, 0.8, 9);
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        for c in 0..4 {
            assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
    }

    #[test]
    fn histogram_counts() {
        let l = vec![PseudoLabel::empty(); 7];
        let h = pseudo_label_histogram(&l);
        assert_eq!(h, vec![HistogramEntry { label: "()".into(), count: 7 }]);
        let l: Vec<PseudoLabel> = (0..30).map(|i| PseudoLabel::new(vec![i % 5, i % 3])).collect();
        let h = pseudo_label_histogram(&l);
        assert!(h.len() <= 25);
        assert_eq!(h.iter().map(|e| e.count).sum::<usize>(), 30);
    }

    #[test]
    fn neighbours() {
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 0.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(topk_neighbors(&x, 0, 1).unwrap(), vec![2]);
        assert_eq!(topk_neighbors(&x, 0, 4).unwrap(), vec![2, 3, 4, 1]);
        assert!(topk_neighbors(&x, 0, 5).is_err());
    }
}
