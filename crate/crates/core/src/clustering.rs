//! K-means over stage embeddings, pseudo-label bookkeeping, the cluster
//! capacity check, and adjusted mutual information between partitions.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};

/// Result of clustering one stage's embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub stage: usize,
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    /// Sum of squared distances of points to their assigned centroid.
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once the relative inertia improvement falls below this.
    pub tolerance: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tolerance: 1e-4,
        }
    }
}

/// K-means with k-means++ seeding. Deterministic given `seed`; never returns
/// an empty cluster.
pub fn kmeans(x: &Matrix, k: usize, params: KMeansParams, seed: u64) -> Result<ClusterAssignment> {
    let m = x.rows;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if m < k {
        return Err(Error::Config(format!("cannot form {k} clusters from {m} points")));
    }
    if !x.is_finite() {
        return Err(Error::Contract("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(x, k, &mut rng);
    let mut labels = vec![0usize; m];
    let mut dists = vec![0.0; m];
    assign(x, &centroids, &mut labels, &mut dists);
    repair_empty(x, &mut centroids, &mut labels, &mut dists, k);

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut next = labels.clone();
    loop {
        centroids = means(x, &labels, k);
        let inertia = cost(x, &centroids, &labels);
        history.push(inertia);
        iterations += 1;
        if iterations >= params.max_iter.max(1) {
            break;
        }
        if history.len() >= 2 {
            let prev = history[history.len() - 2];
            if prev - inertia <= params.tolerance * prev {
                break;
            }
        }
        assign(x, &centroids, &mut next, &mut dists);
        repair_empty(x, &mut centroids, &mut next, &mut dists, k);
        if next == labels {
            break;
        }
        std::mem::swap(&mut labels, &mut next);
    }
    let inertia = *history.last().expect("at least one iteration");
    Ok(ClusterAssignment {
        stage: 0,
        k,
        labels,
        centroids,
        inertia,
        inertia_history: history,
        iterations,
    })
}

fn plus_plus_init(x: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let m = x.rows;
    let mut centroids = Matrix::zeros(k, x.cols);
    let first = rng.random_range(0..m);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut best: Vec<f64> = (0..m).map(|i| squared_distance(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(squared_distance(x.row(i), x.row(pick)));
        }
    }
    centroids
}

fn assign(x: &Matrix, centroids: &Matrix, labels: &mut [usize], dists: &mut [f64]) {
    for i in 0..x.rows {
        let row = x.row(i);
        let mut best = (0, f64::INFINITY);
        for c in 0..centroids.rows {
            let d = squared_distance(row, centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        labels[i] = best.0;
        dists[i] = best.1;
    }
}

/// Moves the point farthest from the largest cluster's centroid into each
/// empty cluster, making it that cluster's centroid.
fn repair_empty(x: &Matrix, centroids: &mut Matrix, labels: &mut [usize], dists: &mut [f64], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).expect("k >= 1");
        let far = (0..x.rows)
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .expect("largest cluster is non-empty");
        labels[far] = empty;
        dists[far] = 0.0;
        centroids.row_mut(empty).copy_from_slice(x.row(far));
    }
}

fn means(x: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, x.cols);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    sums
}

fn cost(x: &Matrix, centroids: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_distance(x.row(i), centroids.row(l)))
        .sum()
}

/// A sample's cluster ids from all completed stages, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct PseudoLabel(Vec<usize>);

impl PseudoLabel {
    pub fn new(entries: Vec<usize>) -> Self {
        Self(entries)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for PseudoLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "()");
        }
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// Appends stage `new.stage`'s cluster id to every sample's pseudo label.
pub fn extend_pseudo_labels(existing: &[PseudoLabel], new: &ClusterAssignment) -> Result<Vec<PseudoLabel>> {
    if existing.len() != new.labels.len() {
        return Err(Error::Contract(format!(
            "{} pseudo labels but {} cluster assignments",
            existing.len(),
            new.labels.len()
        )));
    }
    if let Some(i) = existing.iter().position(|p| p.len() != new.stage) {
        return Err(Error::Contract(format!(
            "pseudo label {i} has length {}, expected {} before stage {}",
            existing[i].len(),
            new.stage,
            new.stage
        )));
    }
    Ok(existing
        .iter()
        .zip(&new.labels)
        .map(|(p, &y)| {
            let mut entries = p.0.clone();
            entries.push(y);
            PseudoLabel(entries)
        })
        .collect())
}

/// Outcome of the `K^N <= M / b` check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Capacity {
    Ok,
    Violation {
        /// `K^N`, saturated at `u128::MAX`.
        clusters_total: u128,
        samples_per_batch: f64,
    },
}

impl Capacity {
    pub fn is_ok(&self) -> bool {
        matches!(self, Capacity::Ok)
    }

    pub fn into_result(self) -> Result<()> {
        match self {
            Capacity::Ok => Ok(()),
            Capacity::Violation {
                clusters_total,
                samples_per_batch,
            } => Err(Error::Capacity {
                clusters_total,
                samples_per_batch,
            }),
        }
    }
}

/// Accepts iff `K^N * b <= M`, evaluated in exact integer arithmetic.
pub fn validate_capacity(k: u64, n: u32, m: u64, b: u64) -> Capacity {
    let total = (k as u128).checked_pow(n);
    let fits = total
        .and_then(|t| t.checked_mul(b as u128))
        .is_some_and(|tb| tb <= m as u128);
    if fits {
        Capacity::Ok
    } else {
        Capacity::Violation {
            clusters_total: total.unwrap_or(u128::MAX),
            samples_per_batch: m as f64 / b as f64,
        }
    }
}

/// Adjusted mutual information with arithmetic-mean normalization and the
/// expected mutual information under the permutation model. Returns 0 when
/// the normalizer vanishes (both partitions trivial).
pub fn ami(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::Contract(format!(
            "partitions have lengths {} and {}",
            labels_a.len(),
            labels_b.len()
        )));
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(Error::Contract("AMI needs at least two samples".into()));
    }
    let (ra, ka) = relabel(labels_a);
    let (rb, kb) = relabel(labels_b);
    let mut table = vec![0usize; ka * kb];
    for (&a, &b) in ra.iter().zip(&rb) {
        table[a * kb + b] += 1;
    }
    let row: Vec<usize> = (0..ka).map(|i| (0..kb).map(|j| table[i * kb + j]).sum()).collect();
    let col: Vec<usize> = (0..kb).map(|j| (0..ka).map(|i| table[i * kb + j]).sum()).collect();
    let nf = n as f64;

    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&row);
    let h_b = entropy(&col);

    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let nij = table[i * kb + j];
            if nij > 0 {
                let v = nij as f64;
                mi += v / nf * (nf * v / (row[i] as f64 * col[j] as f64)).ln();
            }
        }
    }
    let emi = expected_mutual_information(&row, &col, n);
    let denom = 0.5 * (h_a + h_b) - emi;
    if denom.abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}

fn relabel(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

fn expected_mutual_information(row: &[usize], col: &[usize], n: usize) -> f64 {
    let mut log_fact = vec![0.0f64; n + 1];
    for k in 1..=n {
        log_fact[k] = log_fact[k - 1] + (k as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in row {
        for &b in col {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = log_fact[a] + log_fact[b] + log_fact[n - a] + log_fact[n - b] - log_fact[n];
            for nij in lo..=hi {
                let v = nij as f64;
                let term = v / nf * (nf * v / (a as f64 * b as f64)).ln();
                let log_p = fixed
                    - log_fact[nij]
                    - log_fact[a - nij]
                    - log_fact[b - nij]
                    - log_fact[n + nij - a - b];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Writes `sample_index,stage,cluster_id` rows.
pub fn write_assignment_csv(assignment: &ClusterAssignment, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_index", "stage", "cluster_id"])?;
    for (i, &c) in assignment.labels.iter().enumerate() {
        w.write_record([i.to_string(), assignment.stage.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_assignment_csv`], returning `(stage, labels)`.
pub fn read_assignment_csv(path: &Path) -> Result<(usize, Vec<usize>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut stage = 0;
    let mut labels = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |field: usize| -> Result<usize> {
            rec.get(field)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad field {field} on row {row}", path.display())))
        };
        let index = parse(0)?;
        if index != row {
            return Err(Error::Data(format!("{}: row {row} has sample index {index}", path.display())));
        }
        stage = parse(1)?;
        labels.push(parse(2)?);
    }
    Ok((stage, labels))
}

/// Writes one row per sample with one column per completed stage.
pub fn write_pseudo_label_csv(labels: &[PseudoLabel], path: &Path) -> Result<()> {
    let stages = labels.first().map_or(0, PseudoLabel::len);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_index".to_string()];
    header.extend((0..stages).map(|s| format!("stage_{s}")));
    w.write_record(&header)?;
    for (i, l) in labels.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(l.entries().iter().map(ToString::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
