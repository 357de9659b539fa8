//! Channel-wise stacking of two independent single-factor sources.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Image, LabeledImage};
use crate::error::{Error, Result};

/// Draws `count` independent index pairs from `source_a` (3 channels) and
/// `source_b` (1 channel) and stacks each pair into a 4-channel image.
///
/// `source_b` is resized to `source_a`'s spatial size when they differ. Each
/// index sequence is a random permutation prefix when the pool is large
/// enough, otherwise uniform draws with replacement; the two sequences use
/// separate streams so the labels are statistically independent.
pub fn generate_composite(
    source_a: &Dataset,
    source_b: &Dataset,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    if source_a.is_empty() || source_b.is_empty() {
        return Err(Error::Data("composite sources must be non-empty".into()));
    }
    if source_a.factors.len() != 1 || source_b.factors.len() != 1 {
        return Err(Error::Data("composite sources must each declare exactly one factor".into()));
    }
    if source_a.factors[0].name == source_b.factors[0].name {
        return Err(Error::Data(format!(
            "both sources declare factor {:?}",
            source_a.factors[0].name
        )));
    }
    let (ca, ha, wa) = source_a.shape();
    if ha != wa {
        return Err(Error::Data(format!("source_a images must be square, got {ha}x{wa}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_a = ChaCha8Rng::seed_from_u64(rng.random());
    let mut rng_b = ChaCha8Rng::seed_from_u64(rng.random());
    let picks_a = draw_indices(source_a.len(), count, &mut rng_a);
    let picks_b = draw_indices(source_b.len(), count, &mut rng_b);

    let mut images = Vec::with_capacity(count);
    for (i, (&ia, &ib)) in picks_a.iter().zip(&picks_b).enumerate() {
        let a = &source_a.images[ia].pixels;
        let b = source_b.images[ib].pixels.resized(ha);
        if a.channels != 3 || b.channels != 1 || b.height != ha || b.width != wa {
            return Err(Error::Data(format!(
                "cannot stack {}x{}x{} with {}x{}x{}: need 3 + 1 channels of equal size",
                a.channels, a.height, a.width, b.channels, b.height, b.width
            )));
        }
        let mut data = Vec::with_capacity(4 * ha * wa);
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        images.push(LabeledImage {
            pixels: Image::from_vec(4, ha, wa, data)?,
            factor_labels: vec![
                source_a.images[ia].factor_labels[0],
                source_b.images[ib].factor_labels[0],
            ],
            sample_index: i,
        });
    }
    debug_assert_eq!(ca, 3);
    Ok(Dataset {
        name: format!("{}+{}", source_a.name, source_b.name),
        factors: vec![source_a.factors[0].clone(), source_b.factors[0].clone()],
        images,
        seed,
    })
}

fn draw_indices(pool: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool >= count {
        let mut idx: Vec<usize> = (0..pool).collect();
        idx.shuffle(rng);
        idx.truncate(count);
        idx
    } else {
        (0..count).map(|_| rng.random_range(0..pool)).collect()
    }
}
