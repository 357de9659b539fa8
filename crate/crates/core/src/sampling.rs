//! Batch planning: the plain shuffled sampler for the first stage and the
//! pseudo-label-grouped sampler used afterwards.
//!
//! The grouped sampler visits groups round-robin (`k = j mod C`), skips
//! exhausted groups, and stops once every group is traversed, so each batch
//! draws all its members from a single pseudo-label group.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::PseudoLabel;
use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub epoch: usize,
    pub batches: Vec<Vec<usize>>,
    /// Group id of every batch (index into `groups`); all zeros for uniform plans.
    pub group_of_batch: Vec<usize>,
    /// Pseudo label of each group, in group-id order.
    pub groups: Vec<PseudoLabel>,
    /// `(small group label, absorbing group id)` for groups merged because
    /// they had fewer than two members.
    pub merged: Vec<(PseudoLabel, usize)>,
}

impl BatchPlan {
    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64)
}

/// Uniformly shuffled batches over `0..m`.
pub fn plan_epoch_uniform(m: usize, b: usize, seed: u64, epoch: usize, drop_last: bool) -> Result<BatchPlan> {
    if b == 0 {
        return Err(Error::Sampling("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    let batches: Vec<Vec<usize>> = order
        .chunks(b)
        .filter(|c| !drop_last || c.len() == b)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(BatchPlan {
        epoch,
        group_of_batch: vec![0; batches.len()],
        batches,
        groups: vec![PseudoLabel::empty()],
        merged: Vec::new(),
    })
}

/// Pseudo-label-grouped batches.
///
/// `embeddings` (row-aligned with `pseudo_labels`), when given, decides where
/// groups with fewer than two members are merged: into the group with the
/// nearest mean embedding. Without embeddings they join the group sharing the
/// longest label prefix, ties broken by size and then label order.
pub fn plan_epoch(
    pseudo_labels: &[PseudoLabel],
    b: usize,
    seed: u64,
    epoch: usize,
    drop_last: bool,
    embeddings: Option<&Matrix>,
) -> Result<BatchPlan> {
    if b < 2 {
        return Err(Error::Sampling(format!("batch size must be at least 2, got {b}")));
    }
    if let Some(e) = embeddings {
        if e.rows != pseudo_labels.len() {
            return Err(Error::Contract(format!(
                "{} embeddings for {} pseudo labels",
                e.rows,
                pseudo_labels.len()
            )));
        }
    }
    let mut by_label: BTreeMap<&PseudoLabel, Vec<usize>> = BTreeMap::new();
    for (i, l) in pseudo_labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let (big, small): (Vec<_>, Vec<_>) = by_label.into_iter().partition(|(_, m)| m.len() >= 2);
    if big.is_empty() {
        return Err(Error::Sampling(
            "every pseudo-label group has fewer than 2 members; no in-batch negatives possible".into(),
        ));
    }
    let groups: Vec<PseudoLabel> = big.iter().map(|(l, _)| (*l).clone()).collect();
    let mut members: Vec<Vec<usize>> = big.into_iter().map(|(_, m)| m).collect();
    let mut merged = Vec::new();
    if !small.is_empty() {
        let means = embeddings.map(|e| group_means(e, &members));
        for (label, idx) in small {
            let target = match (&means, embeddings) {
                (Some(means), Some(e)) => {
                    let centre = group_means(e, std::slice::from_ref(&idx));
                    (0..groups.len())
                        .min_by(|&a, &c| {
                            squared_distance(centre.row(0), means.row(a))
                                .total_cmp(&squared_distance(centre.row(0), means.row(c)))
                        })
                        .expect("at least one group")
                }
                _ => (0..groups.len())
                    .max_by_key(|&g| {
                        (common_prefix(label, &groups[g]), members[g].len(), std::cmp::Reverse(g))
                    })
                    .expect("at least one group"),
            };
            merged.push((label.clone(), target));
            members[target].extend(idx);
        }
        for m in &mut members {
            m.sort_unstable();
        }
    }
    if drop_last && members.iter().all(|m| m.len() < b) {
        return Err(Error::Sampling(format!(
            "no pseudo-label group has {b} members; every batch would be dropped"
        )));
    }

    let mut rng = epoch_rng(seed, epoch);
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let c = members.len();
    let mut cursor = vec![0usize; c];
    let mut done = vec![false; c];
    let mut remaining = c;
    let mut batches = Vec::new();
    let mut group_of_batch = Vec::new();
    let mut j = 0usize;
    while remaining > 0 {
        let k = j % c;
        j += 1;
        if done[k] {
            continue;
        }
        let start = cursor[k];
        let end = (start + b).min(members[k].len());
        if end - start == b || !drop_last {
            batches.push(members[k][start..end].to_vec());
            group_of_batch.push(k);
        }
        cursor[k] = end;
        if end == members[k].len() || (drop_last && members[k].len() - end < b) {
            done[k] = true;
            remaining -= 1;
        }
    }
    Ok(BatchPlan {
        epoch,
        batches,
        group_of_batch,
        groups,
        merged,
    })
}

fn common_prefix(a: &PseudoLabel, b: &PseudoLabel) -> usize {
    a.entries().iter().zip(b.entries()).take_while(|(x, y)| x == y).count()
}

fn group_means(e: &Matrix, members: &[Vec<usize>]) -> Matrix {
    let mut out = Matrix::zeros(members.len(), e.cols);
    for (g, idx) in members.iter().enumerate() {
        for &i in idx {
            for (o, v) in out.row_mut(g).iter_mut().zip(e.row(i)) {
                *o += v;
            }
        }
        let n = idx.len().max(1) as f64;
        out.row_mut(g).iter_mut().for_each(|v| *v /= n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(spec: &[(usize, usize)]) -> Vec<PseudoLabel> {
        spec.iter()
            .flat_map(|&(id, count)| std::iter::repeat_n(PseudoLabel::new(vec![id]), count))
            .collect()
    }

    #[test]
    fn single_group_covers_everything() {
        let l = labels(&[(0, 6)]);
        let plan = plan_epoch(&l, 2, 1, 0, true, None).unwrap();
        assert_eq!(plan.batches.len(), 3);
        let mut all: Vec<usize> = plan.batches.concat();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn round_robin_sequence_for_six_and_four() {
        let l = labels(&[(0, 6), (1, 4)]);
        let plan = plan_epoch(&l, 2, 9, 0, false, None).unwrap();
        assert_eq!(plan.group_of_batch, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn drop_last_trims_partial_batches() {
        let l = labels(&[(0, 7), (1, 3)]);
        let plan = plan_epoch(&l, 3, 0, 0, true, None).unwrap();
        assert!(plan.batches.iter().all(|b| b.len() == 3));
        assert_eq!(plan.group_of_batch, vec![0, 1, 0]);
        let plan = plan_epoch(&l, 3, 0, 0, false, None).unwrap();
        assert_eq!(plan.group_of_batch, vec![0, 1, 0, 0]);
        assert_eq!(plan.sample_count(), 10);
    }

    #[test]
    fn deterministic_and_epoch_dependent() {
        let l = labels(&[(0, 20), (1, 12)]);
        let a = plan_epoch(&l, 4, 3, 1, true, None).unwrap();
        let b = plan_epoch(&l, 4, 3, 1, true, None).unwrap();
        assert_eq!(a, b);
        let c = plan_epoch(&l, 4, 3, 2, true, None).unwrap();
        assert_ne!(a.batches, c.batches);
    }

    #[test]
    fn singleton_groups_are_merged() {
        let mut l = labels(&[(0, 4), (1, 4)]);
        l.push(PseudoLabel::new(vec![2]));
        let e = Matrix::from_rows(
            &(0..9)
                .map(|i| if i < 4 || i == 8 { vec![0.0] } else { vec![5.0] })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let plan = plan_epoch(&l, 2, 0, 0, false, Some(&e)).unwrap();
        assert_eq!(plan.merged, vec![(PseudoLabel::new(vec![2]), 0)]);
        assert_eq!(plan.sample_count(), 9);
    }

    #[test]
    fn all_singletons_is_an_error() {
        let l = labels(&[(0, 1), (1, 1), (2, 1)]);
        assert!(matches!(plan_epoch(&l, 2, 0, 0, false, None), Err(Error::Sampling(_))));
    }

    #[test]
    fn uniform_counts() {
        let p = plan_epoch_uniform(10, 3, 0, 0, true).unwrap();
        assert_eq!(p.batches.len(), 3);
        assert_eq!(p.sample_count(), 9);
        let p = plan_epoch_uniform(10, 3, 0, 0, false).unwrap();
        assert_eq!(p.batches.len(), 4);
        let mut all = p.batches.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
