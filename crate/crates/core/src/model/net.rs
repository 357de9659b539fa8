//! Convnet forward and reverse passes over a flat parameter vector.
//!
//! Activations use channel-major `C x (N*H*W)` layout so each 3x3 stride-2
//! convolution is a single GEMM over an im2col buffer.

use serde::{Deserialize, Serialize};

use super::EncoderSpec;
use crate::linalg::{gemm, Real, View};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named offset table into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<LayerEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn for_spec(spec: &EncoderSpec) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let e = LayerEntry { name, offset, shape };
            offset += e.len();
            entries.push(e);
        };
        let mut cin = spec.input_channels;
        for (i, &w) in spec.conv_widths.iter().enumerate() {
            push(format!("conv{i}.weight"), vec![w, cin * 9]);
            push(format!("conv{i}.bias"), vec![w]);
            push(format!("norm{i}.gain"), vec![w]);
            push(format!("norm{i}.bias"), vec![w]);
            cin = w;
        }
        let r = spec.representation_dim;
        push("proj1.weight".into(), vec![r, r]);
        push("proj1.bias".into(), vec![r]);
        push("proj2.weight".into(), vec![spec.projection_dim, r]);
        push("proj2.bias".into(), vec![spec.projection_dim]);
        ParamLayout { entries, total: offset }
    }

    pub fn get(&self, name: &str) -> Option<&LayerEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn range(&self, name: &str) -> std::ops::Range<usize> {
        self.get(name).unwrap_or_else(|| panic!("layout has no {name}")).range()
    }
}

/// Output size of a 3x3 stride-2 convolution with padding 1.
pub(crate) fn downsample(size: usize) -> usize {
    size.div_ceil(2)
}

struct ConvTape<T> {
    cols: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Post-activation output; doubles as the ReLU mask.
    out: Vec<T>,
    in_size: usize,
    out_size: usize,
}

/// Everything the reverse pass needs.
pub(crate) struct Tape<T> {
    n: usize,
    convs: Vec<ConvTape<T>>,
    h: Vec<T>,
    u: Vec<T>,
}

pub(crate) struct Output<T> {
    /// `n x representation_dim`, row-major.
    pub h: Vec<T>,
    /// Unnormalized projection, `n x projection_dim`.
    pub p: Vec<T>,
}

fn im2col<T: Real>(input: &[T], cin: usize, n: usize, size: usize, out: usize, cols: &mut [T]) {
    let plane = out * out;
    let p = n * plane;
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * p..][..p];
                for s in 0..n {
                    let src = &input[(ci * n + s) * size * size..][..size * size];
                    let dst = &mut row[s * plane..][..plane];
                    for oy in 0..out {
                        let iy = (2 * oy + ky) as isize - 1;
                        let drow = &mut dst[oy * out..][..out];
                        if iy < 0 || iy >= size as isize {
                            drow.fill(T::ZERO);
                            continue;
                        }
                        let srow = &src[iy as usize * size..][..size];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            *d = if ix < 0 || ix >= size as isize { T::ZERO } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], cin: usize, n: usize, size: usize, out: usize, grad: &mut [T]) {
    let plane = out * out;
    let p = n * plane;
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * p..][..p];
                for s in 0..n {
                    let dst = &mut grad[(ci * n + s) * size * size..][..size * size];
                    let src = &row[s * plane..][..plane];
                    for oy in 0..out {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= size as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * size..][..size];
                        for (ox, &g) in src[oy * out..][..out].iter().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < size as isize {
                                drow[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass. `input` is `C x N x S x S` (channel-major). With
/// `record`, returns the tape for [`backward`].
pub(crate) fn forward<T: Real>(
    spec: &EncoderSpec,
    layout: &ParamLayout,
    params: &[T],
    input: &[T],
    n: usize,
    record: bool,
) -> (Output<T>, Option<Tape<T>>) {
    let mut act = input.to_vec();
    let mut cin = spec.input_channels;
    let mut size = spec.input_size;
    let mut convs = Vec::new();
    for (l, &cout) in spec.conv_widths.iter().enumerate() {
        let out_size = downsample(size);
        let plane = out_size * out_size;
        let pcols = n * plane;
        let kdim = cin * 9;
        let mut cols = vec![T::ZERO; kdim * pcols];
        im2col(&act, cin, n, size, out_size, &mut cols);
        let w = &params[layout.range(&format!("conv{l}.weight"))];
        let b = &params[layout.range(&format!("conv{l}.bias"))];
        let mut y = vec![T::ZERO; cout * pcols];
        for (c, row) in y.chunks_exact_mut(pcols).enumerate() {
            row.fill(b[c]);
        }
        gemm(cout, kdim, pcols, T::ONE, View::rm(w, kdim), View::rm(&cols, pcols), T::ONE, &mut y);

        // Per-sample layer norm over C x H x W, then per-channel affine and ReLU.
        let gain = &params[layout.range(&format!("norm{l}.gain"))];
        let beta = &params[layout.range(&format!("norm{l}.bias"))];
        let count = T::from_f64((cout * plane) as f64);
        let eps = T::from_f64(1e-5);
        let mut inv_std = vec![T::ZERO; n];
        for s in 0..n {
            let mut sum = T::ZERO;
            for c in 0..cout {
                for &v in &y[c * pcols + s * plane..][..plane] {
                    sum += v;
                }
            }
            let mean = sum / count;
            let mut var = T::ZERO;
            for c in 0..cout {
                for v in &mut y[c * pcols + s * plane..][..plane] {
                    *v -= mean;
                    var += *v * *v;
                }
            }
            let is = T::ONE / (var / count + eps).sqrt();
            inv_std[s] = is;
            for c in 0..cout {
                for v in &mut y[c * pcols + s * plane..][..plane] {
                    *v *= is;
                }
            }
        }
        let mut out = vec![T::ZERO; cout * pcols];
        for c in 0..cout {
            let (g, bb) = (gain[c], beta[c]);
            for (o, &x) in out[c * pcols..][..pcols].iter_mut().zip(&y[c * pcols..][..pcols]) {
                let v = g * x + bb;
                *o = if v > T::ZERO { v } else { T::ZERO };
            }
        }
        act = out;
        if record {
            convs.push(ConvTape {
                cols,
                xhat: y,
                inv_std,
                out: act.clone(),
                in_size: size,
                out_size,
            });
        }
        cin = cout;
        size = out_size;
    }

    // Global average pool -> h (n x r).
    let r = spec.representation_dim;
    let plane = size * size;
    let inv_plane = T::from_f64(1.0 / plane as f64);
    let mut h = vec![T::ZERO; n * r];
    for c in 0..r {
        for s in 0..n {
            let mut sum = T::ZERO;
            for &v in &act[(c * n + s) * plane..][..plane] {
                sum += v;
            }
            h[s * r + c] = sum * inv_plane;
        }
    }

    // Projection head: p = W2 relu(W1 h + b1) + b2.
    let w1 = &params[layout.range("proj1.weight")];
    let b1 = &params[layout.range("proj1.bias")];
    let mut u = vec![T::ZERO; n * r];
    for row in u.chunks_exact_mut(r) {
        row.copy_from_slice(b1);
    }
    gemm(n, r, r, T::ONE, View::rm(&h, r), View::rm_t(w1, r), T::ONE, &mut u);
    for v in &mut u {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
    let q = spec.projection_dim;
    let w2 = &params[layout.range("proj2.weight")];
    let b2 = &params[layout.range("proj2.bias")];
    let mut p = vec![T::ZERO; n * q];
    for row in p.chunks_exact_mut(q) {
        row.copy_from_slice(b2);
    }
    gemm(n, r, q, T::ONE, View::rm(&u, r), View::rm_t(w2, r), T::ONE, &mut p);

    let tape = record.then(|| Tape {
        n,
        convs,
        h: h.clone(),
        u,
    });
    (Output { h, p }, tape)
}

/// Reverse pass from `dL/dp` to the gradient of every parameter.
pub(crate) fn backward<T: Real>(
    spec: &EncoderSpec,
    layout: &ParamLayout,
    params: &[T],
    tape: &Tape<T>,
    grad_p: &[T],
) -> Vec<T> {
    let n = tape.n;
    let r = spec.representation_dim;
    let q = spec.projection_dim;
    let mut grad = vec![T::ZERO; layout.total];

    // Projection head.
    let r2 = layout.range("proj2.weight");
    gemm(q, n, r, T::ONE, View::rm_t(grad_p, q), View::rm(&tape.u, r), T::ZERO, &mut grad[r2.clone()]);
    let rb2 = layout.range("proj2.bias");
    for row in grad_p.chunks_exact(q) {
        for (g, &v) in grad[rb2.clone()].iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut du = vec![T::ZERO; n * r];
    gemm(n, q, r, T::ONE, View::rm(grad_p, q), View::rm(&params[r2], r), T::ZERO, &mut du);
    for (g, &u) in du.iter_mut().zip(&tape.u) {
        if u <= T::ZERO {
            *g = T::ZERO;
        }
    }
    let r1 = layout.range("proj1.weight");
    gemm(r, n, r, T::ONE, View::rm_t(&du, r), View::rm(&tape.h, r), T::ZERO, &mut grad[r1.clone()]);
    let rb1 = layout.range("proj1.bias");
    for row in du.chunks_exact(r) {
        for (g, &v) in grad[rb1.clone()].iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dh = vec![T::ZERO; n * r];
    gemm(n, r, r, T::ONE, View::rm(&du, r), View::rm(&params[r1], r), T::ZERO, &mut dh);

    // Global average pool.
    let last = tape.convs.last().expect("at least one conv layer");
    let plane = last.out_size * last.out_size;
    let inv_plane = T::from_f64(1.0 / plane as f64);
    let mut dact = vec![T::ZERO; r * n * plane];
    for c in 0..r {
        for s in 0..n {
            let g = dh[s * r + c] * inv_plane;
            dact[(c * n + s) * plane..][..plane].fill(g);
        }
    }

    for l in (0..spec.conv_widths.len()).rev() {
        let t = &tape.convs[l];
        let cout = spec.conv_widths[l];
        let cin = if l == 0 { spec.input_channels } else { spec.conv_widths[l - 1] };
        let plane = t.out_size * t.out_size;
        let pcols = n * plane;

        // ReLU, then affine.
        for (g, &o) in dact.iter_mut().zip(&t.out) {
            if o <= T::ZERO {
                *g = T::ZERO;
            }
        }
        let rg = layout.range(&format!("norm{l}.gain"));
        let rb = layout.range(&format!("norm{l}.bias"));
        let gain = &params[rg.clone()];
        for c in 0..cout {
            let mut dg = T::ZERO;
            let mut db = T::ZERO;
            for (&g, &x) in dact[c * pcols..][..pcols].iter().zip(&t.xhat[c * pcols..][..pcols]) {
                dg += g * x;
                db += g;
            }
            grad[rg.start + c] += dg;
            grad[rb.start + c] += db;
            let gc = gain[c];
            for g in &mut dact[c * pcols..][..pcols] {
                *g *= gc;
            }
        }
        // Layer norm: dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
        let count = T::from_f64((cout * plane) as f64);
        for s in 0..n {
            let mut s1 = T::ZERO;
            let mut s2 = T::ZERO;
            for c in 0..cout {
                let o = c * pcols + s * plane;
                for (&g, &x) in dact[o..][..plane].iter().zip(&t.xhat[o..][..plane]) {
                    s1 += g;
                    s2 += g * x;
                }
            }
            let m1 = s1 / count;
            let m2 = s2 / count;
            let is = t.inv_std[s];
            for c in 0..cout {
                let o = c * pcols + s * plane;
                for (g, &x) in dact[o..][..plane].iter_mut().zip(&t.xhat[o..][..plane]) {
                    *g = is * (*g - m1 - x * m2);
                }
            }
        }

        // Convolution.
        let kdim = cin * 9;
        let rw = layout.range(&format!("conv{l}.weight"));
        gemm(cout, pcols, kdim, T::ONE, View::rm(&dact, pcols), View::rm_t(&t.cols, pcols), T::ZERO, &mut grad[rw.clone()]);
        let rcb = layout.range(&format!("conv{l}.bias"));
        for c in 0..cout {
            let mut sum = T::ZERO;
            for &g in &dact[c * pcols..][..pcols] {
                sum += g;
            }
            grad[rcb.start + c] += sum;
        }
        if l > 0 {
            let mut dcols = vec![T::ZERO; kdim * pcols];
            gemm(kdim, cout, pcols, T::ONE, View::rm_t(&params[rw], kdim), View::rm(&dact, pcols), T::ZERO, &mut dcols);
            let mut dinput = vec![T::ZERO; cin * n * t.in_size * t.in_size];
            col2im(&dcols, cin, n, t.in_size, t.out_size, &mut dinput);
            dact = dinput;
        }
    }
    grad
}
