//! Cosine similarity and the (feature-aware) masked InfoNCE objective.
//!
//! Positives are in-batch and row-aligned: row `i` of the positive matrix is
//! the positive for anchor `i`. The candidate negatives of anchor `i` are the
//! positive-side rows `k != i` for which the mask allows `(i, k)`. A masked
//! out sample never enters the denominator.

use crate::clustering::PseudoLabel;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// `allowed[i][k]` is true iff sample `k` may serve as a negative for anchor `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeMask {
    n: usize,
    allowed: Vec<bool>,
}

impl NegativeMask {
    /// Every off-diagonal pair allowed: plain InfoNCE.
    pub fn all_off_diagonal(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    /// No negatives anywhere.
    pub fn none(n: usize) -> Self {
        Self::from_fn(n, |_, _| false)
    }

    /// Builds a mask from a predicate; the diagonal is always false.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for k in 0..n {
                allowed[i * n + k] = i != k && f(i, k);
            }
        }
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allowed(&self, i: usize, k: usize) -> bool {
        self.allowed[i * self.n + k]
    }

    pub fn count_allowed(&self, i: usize) -> usize {
        self.allowed[i * self.n..(i + 1) * self.n].iter().filter(|&&a| a).count()
    }

    /// The `(i, k)` pairs that are allowed, row-major.
    pub fn allowed_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| (0..self.n).map(move |k| (i, k)))
            .filter(|&(i, k)| self.allowed(i, k))
            .collect()
    }
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what} contains non-finite values")))
    }
}

fn unit_rows(m: &Matrix, what: &str) -> Result<(Matrix, Vec<f64>)> {
    check_finite(m, what)?;
    let norms = m.row_norms();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Contract(format!("{what} row {i} has zero norm")));
    }
    let mut u = m.clone();
    for (i, &n) in norms.iter().enumerate() {
        u.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok((u, norms))
}

/// Pairwise cosine similarities `s[i][k] = cos(a_i, b_k)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Contract(format!(
            "dimension mismatch: {} vs {} columns",
            a.cols, b.cols
        )));
    }
    let (ua, _) = unit_rows(a, "first operand")?;
    let (ub, _) = unit_rows(b, "second operand")?;
    let mut s = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for k in 0..b.rows {
            s.data[i * b.rows + k] = dot(ua.row(i), ub.row(k)).clamp(-1.0, 1.0);
        }
    }
    Ok(s)
}

fn check_inputs(anchors: &Matrix, positives: &Matrix, mask: &NegativeMask, tau: f64) -> Result<()> {
    if anchors.rows != positives.rows || anchors.cols != positives.cols {
        return Err(Error::Contract(format!(
            "anchors {}x{} and positives {}x{} are not row-aligned",
            anchors.rows, anchors.cols, positives.rows, positives.cols
        )));
    }
    if mask.len() != anchors.rows {
        return Err(Error::Contract(format!(
            "mask is {0}x{0} for a batch of {1}",
            mask.len(),
            anchors.rows
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Per-anchor softmax terms: for anchor `i`, the indices in its denominator
/// (positive first) and their logits.
fn anchor_logits(sim: &Matrix, mask: &NegativeMask, i: usize, tau: f64, idx: &mut Vec<usize>, logits: &mut Vec<f64>) {
    idx.clear();
    logits.clear();
    idx.push(i);
    logits.push(sim.get(i, i) / tau);
    for k in 0..mask.len() {
        if mask.allowed(i, k) {
            idx.push(k);
            logits.push(sim.get(i, k) / tau);
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean over anchors of `-log(e^{s(z,z+)/tau} / (e^{s(z,z+)/tau} + sum_allowed e^{s(z,z-)/tau}))`.
pub fn info_nce(anchors: &Matrix, positives: &Matrix, mask: &NegativeMask, tau: f64) -> Result<f64> {
    check_inputs(anchors, positives, mask, tau)?;
    let sim = cosine_similarity(anchors, positives)?;
    let n = anchors.rows;
    if n == 0 {
        return Ok(0.0);
    }
    let (mut idx, mut logits) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    for i in 0..n {
        anchor_logits(&sim, mask, i, tau, &mut idx, &mut logits);
        total += log_sum_exp(&logits) - logits[0];
    }
    Ok(total / n as f64)
}

/// Plain InfoNCE: every other positive-side row is a negative.
pub fn info_nce_unmasked(anchors: &Matrix, positives: &Matrix, tau: f64) -> Result<f64> {
    let n = anchors.rows;
    check_inputs(anchors, positives, &NegativeMask::all_off_diagonal(n), tau)?;
    let sim = cosine_similarity(anchors, positives)?;
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        logits.clear();
        logits.push(sim.get(i, i) / tau);
        logits.extend((0..n).filter(|&k| k != i).map(|k| sim.get(i, k) / tau));
        total += log_sum_exp(&logits) - logits[0];
    }
    Ok(total / n as f64)
}

/// Loss and gradients with respect to the raw (unnormalized) anchor and
/// positive rows.
pub fn info_nce_with_grad(
    anchors: &Matrix,
    positives: &Matrix,
    mask: &NegativeMask,
    tau: f64,
) -> Result<(f64, Matrix, Matrix)> {
    check_inputs(anchors, positives, mask, tau)?;
    let (ua, na) = unit_rows(anchors, "anchors")?;
    let (up, np) = unit_rows(positives, "positives")?;
    let n = anchors.rows;
    let d = anchors.cols;
    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            sim.data[i * n + k] = dot(ua.row(i), up.row(k)).clamp(-1.0, 1.0);
        }
    }
    // g_sim[i][k] = dL / ds_ik
    let mut g_sim = Matrix::zeros(n, n);
    let (mut idx, mut logits) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    let scale = 1.0 / (n.max(1) as f64 * tau);
    for i in 0..n {
        anchor_logits(&sim, mask, i, tau, &mut idx, &mut logits);
        let lse = log_sum_exp(&logits);
        total += lse - logits[0];
        for (&k, &l) in idx.iter().zip(&logits) {
            g_sim.data[i * n + k] += (l - lse).exp() * scale;
        }
        g_sim.data[i * n + i] -= scale;
    }
    // Gradients w.r.t. the unit rows, then through the row normalization.
    let mut ga = Matrix::zeros(n, d);
    let mut gp = Matrix::zeros(n, d);
    for i in 0..n {
        for k in 0..n {
            let g = g_sim.data[i * n + k];
            if g != 0.0 {
                for t in 0..d {
                    ga.data[i * d + t] += g * up.data[k * d + t];
                    gp.data[k * d + t] += g * ua.data[i * d + t];
                }
            }
        }
    }
    project_tangent(&mut ga, &ua, &na);
    project_tangent(&mut gp, &up, &np);
    Ok((total / n.max(1) as f64, ga, gp))
}

/// `g <- (g - (g . u) u) / |x|` row-wise: backprop through `u = x / |x|`.
fn project_tangent(g: &mut Matrix, unit: &Matrix, norms: &[f64]) {
    for (i, &norm) in norms.iter().enumerate().take(g.rows) {
        let u = unit.row(i);
        let gu = dot(g.row(i), u);
        let inv = 1.0 / norm;
        for (gv, uv) in g.row_mut(i).iter_mut().zip(u) {
            *gv = (*gv - gu * uv) * inv;
        }
    }
}

/// Average of the two directional losses (view 1 anchoring view 2 and the
/// reverse), with gradients for both views.
pub fn symmetric_info_nce_with_grad(
    view1: &Matrix,
    view2: &Matrix,
    mask: &NegativeMask,
    tau: f64,
) -> Result<(f64, Matrix, Matrix)> {
    let (l12, g1a, g2p) = info_nce_with_grad(view1, view2, mask, tau)?;
    let (l21, g2a, g1p) = info_nce_with_grad(view2, view1, mask, tau)?;
    let combine = |a: Matrix, b: Matrix| {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect();
        Matrix { data, ..a }
    };
    Ok((0.5 * (l12 + l21), combine(g1a, g1p), combine(g2a, g2p)))
}

/// Symmetric loss value only.
pub fn symmetric_info_nce(view1: &Matrix, view2: &Matrix, mask: &NegativeMask, tau: f64) -> Result<f64> {
    Ok(0.5 * (info_nce(view1, view2, mask, tau)? + info_nce(view2, view1, mask, tau)?))
}

/// `allowed[i][k] = (label_i == label_k) && i != k`.
pub fn build_mask(labels: &[PseudoLabel]) -> Result<NegativeMask> {
    if let Some(first) = labels.first() {
        if let Some(bad) = labels.iter().position(|l| l.len() != first.len()) {
            return Err(Error::Contract(format!(
                "pseudo label {bad} has length {}, expected {}",
                labels[bad].len(),
                first.len()
            )));
        }
    }
    Ok(NegativeMask::from_fn(labels.len(), |i, k| labels[i] == labels[k]))
}

/// Scale-free sanity helper for tests and diagnostics.
pub fn mean_positive_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    let s = cosine_similarity(a, b)?;
    Ok((0..a.rows).map(|i| s.get(i, i)).sum::<f64>() / a.rows.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straight-line transcription of the loss with explicit sums.
    fn naive_loss(a: &Matrix, p: &Matrix, mask: &NegativeMask, tau: f64) -> f64 {
        let cos = |x: &[f64], y: &[f64]| {
            let mut xy = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            for t in 0..x.len() {
                xy += x[t] * y[t];
                xx += x[t] * x[t];
                yy += y[t] * y[t];
            }
            xy / (xx.sqrt() * yy.sqrt())
        };
        let n = a.rows;
        let mut total = 0.0;
        for i in 0..n {
            let pos = (cos(a.row(i), p.row(i)) / tau).exp();
            let mut denom = pos;
            for k in 0..n {
                if mask.allowed(i, k) {
                    denom += (cos(a.row(i), p.row(k)) / tau).exp();
                }
            }
            total += -(pos / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn identical_unit_rows_have_unit_diagonal() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = cosine_similarity(&m, &m).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(1, 1), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
    }

    #[test]
    fn cosine_matches_per_pair_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(5, 3, &mut rng);
        let b = random_matrix(5, 3, &mut rng);
        let s = cosine_similarity(&a, &b).unwrap();
        for i in 0..5 {
            for k in 0..5 {
                let want = dot(a.row(i), b.row(k)) / (norm(a.row(i)) * norm(b.row(k)));
                assert!((s.get(i, k) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_row_is_a_contract_error() {
        let a = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(cosine_similarity(&a, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_input_is_a_contract_error() {
        let a = Matrix::from_rows(&[vec![f64::NAN, 1.0], vec![1.0, 0.0]]).unwrap();
        let mask = NegativeMask::all_off_diagonal(2);
        assert!(matches!(info_nce(&a, &a, &mask, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn no_negatives_gives_zero_loss() {
        let a = Matrix::from_rows(&[vec![0.3, 0.4]]).unwrap();
        let p = Matrix::from_rows(&[vec![-1.0, 0.2]]).unwrap();
        assert_eq!(info_nce(&a, &p, &NegativeMask::none(1), 0.1).unwrap(), 0.0);
    }

    #[test]
    fn all_equal_vectors_one_negative_is_ln2() {
        let z = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        let mask = NegativeMask::from_fn(2, |i, k| i == 0 && k == 1);
        // Anchor 0 has one negative (ln 2); anchor 1 has none (0).
        let loss = info_nce(&z, &z, &mask, 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
        let single = info_nce(
            &Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap(),
            &Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap(),
            &NegativeMask::none(1),
            1.0,
        )
        .unwrap();
        assert_eq!(single, 0.0);
        let both = info_nce(&z, &z, &NegativeMask::all_off_diagonal(2), 1.0).unwrap();
        assert!((both - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(1..=16);
            let d = rng.random_range(1..=8);
            let a = random_matrix(n, d, &mut rng);
            let p = random_matrix(n, d, &mut rng);
            let bits: Vec<bool> = (0..n * n).map(|_| rng.random()).collect();
            let mask = NegativeMask::from_fn(n, |i, k| bits[i * n + k]);
            let tau = rng.random_range(0.05..2.0);
            let got = info_nce(&a, &p, &mask, tau).unwrap();
            let want = naive_loss(&a, &p, &mask, tau);
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn large_temperature_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(6, 4, &mut rng);
        let p = random_matrix(6, 4, &mut rng);
        let mask = NegativeMask::from_fn(6, |i, k| (i + k) % 2 == 0);
        let loss = info_nce(&a, &p, &mask, 1e6).unwrap();
        let want = (0..6).map(|i| (1.0 + mask.count_allowed(i) as f64).ln()).sum::<f64>() / 6.0;
        assert!((loss - want).abs() < 1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(5, 3, &mut rng);
        let p = random_matrix(5, 3, &mut rng);
        let mask = NegativeMask::from_fn(5, |i, k| (i * k) % 3 != 1);
        let tau = 0.3;
        let (_, ga, gp) = symmetric_info_nce_with_grad(&a, &p, &mask, tau).unwrap();
        let h = 1e-6;
        for (which, g) in [(0, &ga), (1, &gp)] {
            for idx in 0..15 {
                let mut plus = if which == 0 { a.clone() } else { p.clone() };
                let mut minus = plus.clone();
                plus.data[idx] += h;
                minus.data[idx] -= h;
                let f = |m: &Matrix| {
                    if which == 0 {
                        symmetric_info_nce(m, &p, &mask, tau).unwrap()
                    } else {
                        symmetric_info_nce(&a, m, &mask, tau).unwrap()
                    }
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!((fd - g.data[idx]).abs() < 1e-6, "{which}/{idx}: {fd} vs {}", g.data[idx]);
            }
        }
    }

    #[test]
    fn build_mask_cases() {
        let same: Vec<PseudoLabel> = (0..4).map(|_| PseudoLabel::new(vec![1, 2])).collect();
        assert_eq!(build_mask(&same).unwrap(), NegativeMask::all_off_diagonal(4));
        let distinct: Vec<PseudoLabel> = (0..4).map(|i| PseudoLabel::new(vec![i])).collect();
        assert_eq!(build_mask(&distinct).unwrap(), NegativeMask::none(4));
        let aab = vec![PseudoLabel::new(vec![0]), PseudoLabel::new(vec![0]), PseudoLabel::new(vec![1])];
        assert_eq!(build_mask(&aab).unwrap().allowed_pairs(), vec![(0, 1), (1, 0)]);
        let ragged = vec![PseudoLabel::new(vec![0]), PseudoLabel::new(vec![0, 1])];
        assert!(matches!(build_mask(&ragged), Err(Error::Contract(_))));
    }
}
