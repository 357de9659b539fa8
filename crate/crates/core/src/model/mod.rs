//! Desk-scale convolutional encoder with a projection head.
//!
//! Architecture: stride-2 3x3 conv blocks (conv, per-sample layer norm,
//! ReLU), global average pooling to the representation `h`, then
//! `Linear -> ReLU -> Linear` and L2 normalization to the embedding `z`.
//! Gradients are computed by a hand-written reverse pass; everything is
//! generic over [`Real`] so the same code runs in `f64` for gradient checks.

mod checkpoint;
mod net;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use net::{LayerEntry, ParamLayout};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};
use crate::objective::{symmetric_info_nce_with_grad, NegativeMask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub conv_widths: Vec<usize>,
    /// Dimension of `h`; must equal the last conv width (pooling output).
    pub representation_dim: usize,
    pub projection_dim: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            input_channels: 4,
            input_size: 32,
            conv_widths: vec![32, 64, 128, 128],
            representation_dim: 128,
            projection_dim: 64,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::Config("conv_widths must be nonempty and positive".into()));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::Config("input channels and size must be positive".into()));
        }
        if self.projection_dim < 2 || self.representation_dim < self.projection_dim {
            return Err(Error::Config(format!(
                "need representation_dim >= projection_dim >= 2, got {} and {}",
                self.representation_dim, self.projection_dim
            )));
        }
        let last = *self.conv_widths.last().expect("nonempty");
        if last != self.representation_dim {
            return Err(Error::Config(format!(
                "last conv width {last} must equal representation_dim {}",
                self.representation_dim
            )));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.input_channels * self.input_size * self.input_size
    }
}

/// How a stage's encoder is initialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Fresh seeded random weights.
    #[default]
    Scratch,
    /// Copy the previous stage's parameters (optimizer state is reset).
    InheritPrevious,
    /// Start every stage from the same saved checkpoint.
    FixedWeights(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub init_mode: InitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            epochs: 50,
            batch_size: 256,
            temperature: 0.5,
            init_mode: InitMode::Scratch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("invalid weight decay {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trainable encoder parameters plus AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub spec: EncoderSpec,
    pub layout: ParamLayout,
    pub params: Vec<f32>,
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub step_count: u64,
}

impl EncoderState {
    fn with_params(spec: EncoderSpec, params: Vec<f32>) -> Self {
        let layout = ParamLayout::for_spec(&spec);
        let n = params.len();
        Self {
            spec,
            layout,
            params,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Parameters of one named layer.
    pub fn layer(&self, name: &str) -> Option<&[f32]> {
        self.layout.get(name).map(|e| &self.params[e.range()])
    }

    /// Representations `h` and unit-norm embeddings `z` for a batch.
    pub fn forward(&self, images: &[Image]) -> Result<(Matrix, Matrix)> {
        let input = pack_images::<f32>(&self.spec, images)?;
        let (out, _) = net::forward(&self.spec, &self.layout, &self.params, &input, images.len(), false);
        let h = to_matrix(&out.h, images.len(), self.spec.representation_dim);
        let mut z = to_matrix(&out.p, images.len(), self.spec.projection_dim);
        z.normalize_rows();
        Ok((h, z))
    }

    /// One AdamW step on the symmetric masked InfoNCE loss of the pair of
    /// views. Returns the loss before the update.
    pub fn train_step(
        &mut self,
        view1: &[Image],
        view2: &[Image],
        mask: &NegativeMask,
        cfg: &TrainConfig,
        batch_index: usize,
    ) -> Result<f64> {
        if view1.len() != view2.len() {
            return Err(Error::Contract(format!(
                "view batches differ in size: {} vs {}",
                view1.len(),
                view2.len()
            )));
        }
        if mask.len() != view1.len() {
            return Err(Error::Contract(format!(
                "mask is {0}x{0}, batch has {1} pairs",
                mask.len(),
                view1.len()
            )));
        }
        let input = pack_pair::<f32>(&self.spec, view1, view2)?;
        // Shapes are checked above; a contract failure past this point means
        // the network produced degenerate (zero or non-finite) projections.
        let (loss, grad) = loss_and_grad(&self.spec, &self.layout, &self.params, &input, view1.len(), mask, cfg.temperature)
            .map_err(|e| Error::Training {
                batch: batch_index,
                message: e.to_string(),
            })?;
        if !loss.is_finite() {
            return Err(Error::Training {
                batch: batch_index,
                message: format!("loss is {loss}"),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                batch: batch_index,
                message: "non-finite gradient".into(),
            });
        }
        self.adamw(&grad, cfg.learning_rate, cfg.weight_decay);
        Ok(loss)
    }

    fn adamw(&mut self, grad: &[f32], lr: f64, wd: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 / (1.0 - BETA1.powi(t));
        let c2 = 1.0 / (1.0 - BETA2.powi(t));
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let (lr, wd, eps, c1, c2) = (lr as f32, wd as f32, ADAM_EPS as f32, c1 as f32, c2 as f32);
        for (((p, m), v), &g) in self
            .params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
            .zip(grad)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m * c1) / ((*v * c2).sqrt() + eps) + wd * *p;
            *p -= lr * update;
        }
    }
}

/// Builds the initial encoder for a stage.
pub fn init_encoder(spec: &EncoderSpec, mode: &InitMode, previous: Option<&EncoderState>) -> Result<EncoderState> {
    spec.validate()?;
    match mode {
        InitMode::Scratch => Ok(EncoderState::with_params(spec.clone(), random_params(spec))),
        InitMode::InheritPrevious => {
            let prev = previous.ok_or_else(|| {
                Error::Config("init_mode inherit_previous needs a previous stage encoder".into())
            })?;
            if prev.spec.conv_widths != spec.conv_widths
                || prev.layout != ParamLayout::for_spec(spec)
            {
                return Err(Error::Config("previous encoder has a different architecture".into()));
            }
            Ok(EncoderState::with_params(spec.clone(), prev.params.clone()))
        }
        InitMode::FixedWeights(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.layout != ParamLayout::for_spec(spec) {
                return Err(Error::Config(format!(
                    "checkpoint {} does not match the encoder spec",
                    path.display()
                )));
            }
            Ok(EncoderState::with_params(spec.clone(), loaded.params))
        }
    }
}

fn random_params(spec: &EncoderSpec) -> Vec<f32> {
    let layout = ParamLayout::for_spec(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = vec![0.0f32; layout.total];
    for e in &layout.entries {
        let slice = &mut params[e.range()];
        if e.name.ends_with(".weight") {
            let fan_in = e.shape[1] as f64;
            // He init for ReLU-fed layers, unit-gain for the final projection.
            let gain = if e.name == "proj2.weight" { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            slice.iter_mut().for_each(|p| *p = normal.sample(&mut rng) as f32);
        } else if e.name.ends_with(".gain") {
            slice.fill(1.0);
        }
    }
    params
}

/// Packs images into the channel-major `C x N x S x S` network input.
pub(crate) fn pack_images<T: Real>(spec: &EncoderSpec, images: &[Image]) -> Result<Vec<T>> {
    let s = spec.input_size;
    let plane = s * s;
    let n = images.len();
    let mut out = vec![T::ZERO; spec.input_channels * n * plane];
    for (i, img) in images.iter().enumerate() {
        if img.channels != spec.input_channels || img.height != s || img.width != s {
            return Err(Error::Contract(format!(
                "image {i} is {}x{}x{}, encoder expects {}x{s}x{s}",
                img.channels, img.height, img.width, spec.input_channels
            )));
        }
        for c in 0..img.channels {
            let dst = &mut out[(c * n + i) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(img.plane(c)) {
                *d = T::from_f64(v as f64);
            }
        }
    }
    Ok(out)
}

fn to_matrix<T: Real>(v: &[T], rows: usize, cols: usize) -> Matrix {
    Matrix {
        rows,
        cols,
        data: v.iter().map(|x| x.to_f64()).collect(),
    }
}

/// Symmetric masked InfoNCE loss and its gradient with respect to every
/// parameter. `input` holds `2n` packed images: view 1 then view 2.
pub fn loss_and_grad<T: Real>(
    spec: &EncoderSpec,
    layout: &ParamLayout,
    params: &[T],
    input: &[T],
    n: usize,
    mask: &NegativeMask,
    temperature: f64,
) -> Result<(f64, Vec<T>)> {
    if params.len() != layout.total {
        return Err(Error::Contract(format!(
            "{} parameters for a layout of {}",
            params.len(),
            layout.total
        )));
    }
    if input.len() != 2 * n * spec.image_len() {
        return Err(Error::Contract("input length does not match 2n images".into()));
    }
    if mask.len() != n {
        return Err(Error::Contract(format!("mask is {0}x{0}, batch has {n} pairs", mask.len())));
    }
    let (out, tape) = net::forward(spec, layout, params, input, 2 * n, true);
    let q = spec.projection_dim;
    let p = to_matrix(&out.p, 2 * n, q);
    if !p.is_finite() {
        return Err(Error::Contract("non-finite projection output".into()));
    }
    let v1 = Matrix::from_vec(n, q, p.data[..n * q].to_vec())?;
    let v2 = Matrix::from_vec(n, q, p.data[n * q..].to_vec())?;
    let (loss, g1, g2) = symmetric_info_nce_with_grad(&v1, &v2, mask, temperature)?;
    let grad_p: Vec<T> = g1.data.iter().chain(&g2.data).map(|&g| T::from_f64(g)).collect();
    let grad = net::backward(spec, layout, params, &tape.expect("recorded"), &grad_p);
    Ok((loss, grad))
}

/// Packs two equally sized view batches for [`loss_and_grad`].
pub fn pack_pair<T: Real>(spec: &EncoderSpec, view1: &[Image], view2: &[Image]) -> Result<Vec<T>> {
    let both: Vec<Image> = view1.iter().chain(view2).cloned().collect();
    pack_images(spec, &both)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_spec() -> EncoderSpec {
        EncoderSpec {
            input_channels: 2,
            input_size: 8,
            conv_widths: vec![4, 6],
            representation_dim: 6,
            projection_dim: 3,
            seed: 5,
        }
    }

    fn random_images(spec: &EncoderSpec, n: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..spec.image_len()).map(|_| rng.random::<f32>()).collect();
                Image::from_vec(spec.input_channels, spec.input_size, spec.input_size, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn projections_are_unit_norm() {
        let spec = tiny_spec();
        let state = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
        let (h, z) = state.forward(&random_images(&spec, 5, 1)).unwrap();
        assert_eq!(h.rows, 5);
        assert_eq!(h.cols, 6);
        for n in z.row_norms() {
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicated_inputs_give_identical_rows() {
        let spec = tiny_spec();
        let state = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
        let img = random_images(&spec, 1, 2).pop().unwrap();
        let (h, z) = state.forward(&[img.clone(), img]).unwrap();
        assert_eq!(h.row(0), h.row(1));
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn wrong_shape_is_a_contract_error() {
        let spec = tiny_spec();
        let state = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
        let bad = vec![Image::zeros(3, 8, 8)];
        assert!(matches!(state.forward(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn init_modes() {
        let spec = tiny_spec();
        let a = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
        let b = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
        assert_eq!(a.params, b.params);
        let other = EncoderSpec { seed: 6, ..spec.clone() };
        let c = init_encoder(&other, &InitMode::Scratch, None).unwrap();
        assert_ne!(a.params, c.params);
        let d = init_encoder(&other, &InitMode::InheritPrevious, Some(&a)).unwrap();
        assert_eq!(d.params, a.params);
        assert_eq!(d.step_count, 0);
        assert!(matches!(
            init_encoder(&spec, &InitMode::InheritPrevious, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec();
        s.projection_dim = 7;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.conv_widths.clear();
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.representation_dim = 8;
        s.projection_dim = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let spec = tiny_spec();
        let mut state = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
        let before = state.params.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let loss = state
            .train_step(&random_images(&spec, 4, 3), &random_images(&spec, 4, 4), &NegativeMask::all_off_diagonal(4), &cfg, 0)
            .unwrap();
        assert!(loss.is_finite());
        assert_eq!(state.params, before);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = tiny_spec();
        let layout = ParamLayout::for_spec(&spec);
        let params: Vec<f64> = random_params(&spec).iter().map(|&p| p as f64).collect();
        let v1 = random_images(&spec, 4, 10);
        let v2 = random_images(&spec, 4, 11);
        let input = pack_pair::<f64>(&spec, &v1, &v2).unwrap();
        let mask = NegativeMask::from_fn(4, |i, k| (i + k) % 3 != 0);
        let (_, grad) = loss_and_grad(&spec, &layout, &params, &input, 4, &mask, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..8 {
            let i = rng.random_range(0..params.len());
            let h = 1e-4;
            let mut p = params.clone();
            p[i] += h;
            let (lp, _) = loss_and_grad(&spec, &layout, &p, &input, 4, &mask, 0.5).unwrap();
            p[i] -= 2.0 * h;
            let (lm, _) = loss_and_grad(&spec, &layout, &p, &input, 4, &mask, 0.5).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-3, "coordinate {i}: fd {fd} analytic {}", grad[i]);
        }
    }
}
