//! Quantization, the learned factorized entropy model, differentiable rate
//! estimation, and the lossless coder that turns latents into actual bits.
//!
//! # Overview
//!
//! Each latent kind (blur residual, motion, frame residual, intra) gets its
//! own [`FactorizedDensity`]: an independent univariate distribution per
//! channel, parameterized as a small stack of monotone nonlinear maps whose
//! composition, squashed through a sigmoid, is the CDF. The probability of
//! integer bin `k` is `CDF(k + 0.5) - CDF(k - 0.5)`, floored at
//! [`P_FLOOR`] so every codeword has bounded length.
//!
//! At train time, quantization is an additive-uniform-noise proxy and the
//! rate term `-Σ log2 p̂` stays differentiable with respect to both the
//! density parameters and the latent values (see [`rate_on_graph`]). At
//! eval time values are rounded half away from zero and coded losslessly by
//! the range coder in [`coder`].

pub mod coder;

use std::rc::Rc;

use ndarray::{Array3, ArrayD, ArrayViewD, IxDyn};
use rand::Rng;

use crate::autodiff::{CustomOp, Graph, Tid};
use crate::error::{Error, Result};

/// Smallest probability any integer bin may take; bounds codeword lengths
/// at 16 bits per symbol and keeps coder tables within precision.
pub const P_FLOOR: f64 = 1.0 / 65536.0;

/// Padding added on each side of the observed latent range to form the
/// coding support.
pub const SUPPORT_PAD: i64 = 2;

/// Identifies which density a latent is coded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct DensityId(pub u32);

/// Quantization behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Add independent uniform noise in (-0.5, 0.5) — the differentiable
    /// train-time proxy.
    TrainNoisy,
    /// Round half away from zero — the eval/coding convention.
    EvalRounded,
}

/// A (possibly noisy) quantized code array tied to its density.
#[derive(Debug, Clone)]
pub struct Latent {
    /// `[C, H', W']`; integral values in `EvalRounded` mode.
    pub values: ArrayD<f64>,
    pub density_id: DensityId,
    pub mode: QuantizeMode,
}

/// Quantize raw code values.
pub fn quantize(
    values: &ArrayD<f64>,
    mode: QuantizeMode,
    density_id: DensityId,
    rng: &mut impl Rng,
) -> Result<Latent> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value passed to quantize".into()));
    }
    let out = match mode {
        QuantizeMode::EvalRounded => values.mapv(f64::round),
        QuantizeMode::TrainNoisy => values.mapv(|v| {
            loop {
                let u = rng.gen_range(-0.5..0.5);
                if u > -0.5 {
                    break v + u;
                }
            }
        }),
    };
    Ok(Latent { values: out, density_id, mode })
}

/// Number of hidden units per density layer.
const DENSITY_WIDTH: usize = 3;
/// Number of affine maps in the CDF stack (hidden layers + final scalar map).
const DENSITY_DEPTH: usize = 4;

/// Learned univariate distribution per channel.
///
/// For channel `c`, the CDF is
/// `sigmoid(f_{K-1}(...f_0(x)...))` where each hidden map is
/// `f_k(z) = lin + tanh(a_k) ⊙ tanh(lin)` with `lin = softplus(h_k) z + b_k`
/// and the final map is affine. `softplus(h) > 0` and `|tanh(a)| < 1` make
/// every map strictly increasing, so the CDF is monotone by construction.
#[derive(Debug, Clone)]
pub struct FactorizedDensity {
    /// Per-layer weight tensors `[C, r_out, r_in]` (pre-softplus).
    pub h: Vec<Array3<f64>>,
    /// Per-layer bias tensors `[C, r_out, 1]`.
    pub b: Vec<Array3<f64>>,
    /// Per-layer gate tensors `[C, r_out, 1]` (pre-tanh); one fewer than `h`.
    pub a: Vec<Array3<f64>>,
    /// Observed integer value range per channel, before padding.
    pub observed_lo: Vec<i64>,
    pub observed_hi: Vec<i64>,
}

/// Layer widths `r_0..r_K` for the CDF stack.
fn layer_dims() -> [usize; DENSITY_DEPTH + 1] {
    [1, DENSITY_WIDTH, DENSITY_WIDTH, DENSITY_WIDTH, 1]
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, for initialization.
fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl FactorizedDensity {
    /// Deterministic initialization: weights chosen so the initial CDF is a
    /// smooth sigmoid spread over roughly ±10, biases jittered per seed.
    pub fn new(channels: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dims = layer_dims();
        let scale = 10f64.powf(1.0 / DENSITY_DEPTH as f64);
        let mut h = Vec::new();
        let mut b = Vec::new();
        let mut a = Vec::new();
        for k in 0..DENSITY_DEPTH {
            let (r_in, r_out) = (dims[k], dims[k + 1]);
            let init = softplus_inv(1.0 / (scale * r_out as f64));
            h.push(Array3::from_elem((channels, r_out, r_in), init));
            b.push(Array3::from_shape_fn((channels, r_out, 1), |_| {
                rng.gen_range(-0.5..0.5)
            }));
            if k + 1 < DENSITY_DEPTH {
                a.push(Array3::zeros((channels, r_out, 1)));
            }
        }
        FactorizedDensity {
            h,
            b,
            a,
            observed_lo: vec![0; channels],
            observed_hi: vec![0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.h[0].dim().0
    }

    /// Coding support for a channel: observed range padded by ±2.
    pub fn support(&self, c: usize) -> (i64, i64) {
        (self.observed_lo[c] - SUPPORT_PAD, self.observed_hi[c] + SUPPORT_PAD)
    }

    /// Clamp integer values into each channel's coding support, in place.
    /// Returns the number of elements that had to move. The coder applies
    /// the same clamp, so a caller that mirrors decoding locally must use
    /// the clamped values.
    pub fn clamp_values_to_support(&self, values: &mut ArrayD<f64>) -> u64 {
        let mut v3 = values
            .view_mut()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("latent is 3-d");
        let mut moved = 0;
        for (c, mut plane) in v3.outer_iter_mut().enumerate() {
            let (lo, hi) = self.support(c);
            for v in plane.iter_mut() {
                let clamped = (*v).clamp(lo as f64, hi as f64);
                if clamped != *v {
                    moved += 1;
                    *v = clamped;
                }
            }
        }
        moved
    }

    /// Fold rounded latent values into the per-channel observed range.
    pub fn update_observed(&mut self, values: &ArrayD<f64>) {
        let v3 = values.view().into_dimensionality::<ndarray::Ix3>().expect("latent is 3-d");
        for (c, plane) in v3.outer_iter().enumerate() {
            for &v in plane.iter() {
                let k = v.round() as i64;
                if k < self.observed_lo[c] {
                    self.observed_lo[c] = k;
                }
                if k > self.observed_hi[c] {
                    self.observed_hi[c] = k;
                }
            }
        }
    }

    /// CDF of channel `c` at `x`.
    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        let mut z = [0.0f64; DENSITY_WIDTH];
        let mut z_len = 1;
        z[0] = x;
        for k in 0..DENSITY_DEPTH {
            let (r_out, r_in) = (self.h[k].dim().1, self.h[k].dim().2);
            debug_assert_eq!(r_in, z_len);
            let mut lin = [0.0f64; DENSITY_WIDTH];
            for o in 0..r_out {
                let mut s = self.b[k][[c, o, 0]];
                for i in 0..r_in {
                    s += softplus(self.h[k][[c, o, i]]) * z[i];
                }
                lin[o] = s;
            }
            if k + 1 < DENSITY_DEPTH {
                for o in 0..r_out {
                    let gate = self.a[k][[c, o, 0]].tanh();
                    z[o] = lin[o] + gate * lin[o].tanh();
                }
            } else {
                z[0] = lin[0];
            }
            z_len = r_out;
        }
        sigmoid(z[0])
    }

    /// Probability mass of integer bin `k` in channel `c`, floored.
    pub fn bin_prob(&self, c: usize, k: i64) -> f64 {
        let p = self.cdf(c, k as f64 + 0.5) - self.cdf(c, k as f64 - 0.5);
        p.max(P_FLOOR)
    }

    /// True when the CDF is non-decreasing across the support of every
    /// channel (checked on a half-integer grid). Training asserts this in
    /// debug builds after each optimizer step.
    pub fn is_monotone(&self) -> bool {
        for c in 0..self.channels() {
            let (lo, hi) = self.support(c);
            let mut prev = 0.0;
            let mut first = true;
            let mut k = lo;
            while k <= hi + 1 {
                let v = self.cdf(c, k as f64 - 0.5);
                if !first && v < prev {
                    return false;
                }
                if !(0.0..=1.0).contains(&v) {
                    return false;
                }
                prev = v;
                first = false;
                k += 1;
            }
        }
        true
    }
}

/// Rate in bits of a latent under an arbitrary per-channel CDF, with the
/// spec's flooring. `clamp_to` optionally clamps each value into a
/// per-channel integer support and counts how many were clamped.
///
/// This is the single scalar-path implementation behind both the plain
/// estimator and the differentiable graph op, so the two cannot drift.
pub fn rate_bits_with_cdf(
    values: &ArrayD<f64>,
    cdf: impl Fn(usize, f64) -> f64,
    clamp_to: Option<&dyn Fn(usize) -> (i64, i64)>,
) -> (f64, u64) {
    let v3 = values.view().into_dimensionality::<ndarray::Ix3>().expect("latent is 3-d");
    let mut bits = 0.0;
    let mut overflow = 0u64;
    for (c, plane) in v3.outer_iter().enumerate() {
        for &raw in plane.iter() {
            let v = match clamp_to {
                Some(sup) => {
                    let (lo, hi) = sup(c);
                    let clamped = raw.clamp(lo as f64, hi as f64);
                    if clamped != raw {
                        overflow += 1;
                    }
                    clamped
                }
                None => raw,
            };
            let p = (cdf(c, v + 0.5) - cdf(c, v - 0.5)).max(P_FLOOR);
            bits -= p.log2();
        }
    }
    (bits, overflow)
}

/// Estimated rate in bits of a latent under its density.
///
/// In `EvalRounded` mode, out-of-support values are clamped into the coding
/// support and counted in the returned overflow counter; in `TrainNoisy`
/// mode values are taken as-is (the noisy proxy must stay differentiable,
/// and the support only exists for the coder).
pub fn rate_bits(latent: &Latent, density: &FactorizedDensity) -> (f64, u64) {
    match latent.mode {
        QuantizeMode::EvalRounded => {
            let sup = |c: usize| density.support(c);
            rate_bits_with_cdf(&latent.values, |c, x| density.cdf(c, x), Some(&sup))
        }
        QuantizeMode::TrainNoisy => {
            rate_bits_with_cdf(&latent.values, |c, x| density.cdf(c, x), None)
        }
    }
}

/// Handles to one density's parameters as graph leaves.
#[derive(Debug, Clone)]
pub struct DensityTids {
    pub h: Vec<Tid>,
    pub b: Vec<Tid>,
    pub a: Vec<Tid>,
}

impl DensityTids {
    /// Insert every parameter tensor of `density` as a differentiable leaf.
    pub fn leaves(g: &mut Graph, density: &FactorizedDensity) -> Self {
        DensityTids {
            h: density.h.iter().map(|t| g.leaf(t.clone().into_dyn())).collect(),
            b: density.b.iter().map(|t| g.leaf(t.clone().into_dyn())).collect(),
            a: density.a.iter().map(|t| g.leaf(t.clone().into_dyn())).collect(),
        }
    }

    fn flat(&self) -> Vec<Tid> {
        let mut v = Vec::new();
        for k in 0..self.h.len() {
            v.push(self.h[k]);
            v.push(self.b[k]);
            if k < self.a.len() {
                v.push(self.a[k]);
            }
        }
        v
    }
}

/// Differentiable `-Σ log2 p̂(latent)` as a graph node.
///
/// Gradients flow into the latent values and into every density parameter.
/// Bins floored at [`P_FLOOR`] contribute zero gradient (the floor is a
/// hard max).
pub fn rate_on_graph(g: &mut Graph, latent: Tid, density: &DensityTids) -> Tid {
    let mut inputs = vec![latent];
    inputs.extend(density.flat());
    g.custom(Rc::new(RateOp { layers: density.h.len() }), &inputs)
}

/// See [`rate_on_graph`].
struct RateOp {
    layers: usize,
}

/// Forward CDF evaluation that records per-layer intermediates for backward.
struct CdfTrace {
    /// `lin` vectors per layer.
    lin: [[f64; DENSITY_WIDTH]; DENSITY_DEPTH],
    /// Layer inputs `z_k` per layer.
    z: [[f64; DENSITY_WIDTH]; DENSITY_DEPTH],
    /// Final pre-sigmoid scalar.
    y: f64,
}

impl RateOp {
    /// inputs layout: `[latent, h0, b0, a0, h1, b1, a1, ..., h_{K-1}, b_{K-1}]`.
    fn split<'a, 'v>(
        &self,
        inputs: &'a [ArrayViewD<'v, f64>],
    ) -> (
        &'a ArrayViewD<'v, f64>,
        Vec<&'a ArrayViewD<'v, f64>>,
        Vec<&'a ArrayViewD<'v, f64>>,
        Vec<&'a ArrayViewD<'v, f64>>,
    ) {
        let latent = &inputs[0];
        let mut h = Vec::new();
        let mut b = Vec::new();
        let mut a = Vec::new();
        let mut idx = 1;
        for k in 0..self.layers {
            h.push(&inputs[idx]);
            b.push(&inputs[idx + 1]);
            idx += 2;
            if k + 1 < self.layers {
                a.push(&inputs[idx]);
                idx += 1;
            }
        }
        assert_eq!(idx, inputs.len(), "rate op input count mismatch");
        (latent, h, b, a)
    }

    fn cdf_forward(
        h: &[&ArrayViewD<f64>],
        b: &[&ArrayViewD<f64>],
        a: &[&ArrayViewD<f64>],
        c: usize,
        x: f64,
    ) -> CdfTrace {
        let layers = h.len();
        let mut trace = CdfTrace {
            lin: [[0.0; DENSITY_WIDTH]; DENSITY_DEPTH],
            z: [[0.0; DENSITY_WIDTH]; DENSITY_DEPTH],
            y: 0.0,
        };
        let mut z = [0.0f64; DENSITY_WIDTH];
        let mut z_len = 1;
        z[0] = x;
        for k in 0..layers {
            let hs = h[k].shape();
            let (r_out, r_in) = (hs[1], hs[2]);
            trace.z[k][..z_len].copy_from_slice(&z[..z_len]);
            let mut lin = [0.0f64; DENSITY_WIDTH];
            for o in 0..r_out {
                let mut s = b[k][[c, o, 0]];
                for i in 0..r_in {
                    s += softplus(h[k][[c, o, i]]) * z[i];
                }
                lin[o] = s;
            }
            trace.lin[k][..r_out].copy_from_slice(&lin[..r_out]);
            if k + 1 < layers {
                for o in 0..r_out {
                    let gate = a[k][[c, o, 0]].tanh();
                    z[o] = lin[o] + gate * lin[o].tanh();
                }
                z_len = r_out;
            } else {
                trace.y = lin[0];
            }
        }
        trace
    }

    /// Backpropagate `d_loss/d_y_pre_sigmoid = dy` through one CDF
    /// evaluation, accumulating parameter gradients and returning `dx`.
    #[allow(clippy::too_many_arguments)]
    fn cdf_backward(
        h: &[&ArrayViewD<f64>],
        a: &[&ArrayViewD<f64>],
        c: usize,
        trace: &CdfTrace,
        dy: f64,
        gh: &mut [ArrayD<f64>],
        gb: &mut [ArrayD<f64>],
        ga: &mut [ArrayD<f64>],
    ) -> f64 {
        let layers = h.len();
        let mut dz = [0.0f64; DENSITY_WIDTH];
        let mut dz_len = 1;
        dz[0] = dy;
        for k in (0..layers).rev() {
            let hs = h[k].shape();
            let (r_out, r_in) = (hs[1], hs[2]);
            debug_assert_eq!(r_out, dz_len);
            let mut dlin = [0.0f64; DENSITY_WIDTH];
            if k + 1 < layers {
                for o in 0..r_out {
                    let gate_raw = a[k][[c, o, 0]];
                    let gate = gate_raw.tanh();
                    let t = trace.lin[k][o].tanh();
                    dlin[o] = dz[o] * (1.0 + gate * (1.0 - t * t));
                    ga[k][[c, o, 0]] += dz[o] * t * (1.0 - gate * gate);
                }
            } else {
                dlin[0] = dz[0];
            }
            let mut dz_prev = [0.0f64; DENSITY_WIDTH];
            for o in 0..r_out {
                gb[k][[c, o, 0]] += dlin[o];
                for i in 0..r_in {
                    let hraw = h[k][[c, o, i]];
                    gh[k][[c, o, i]] += dlin[o] * trace.z[k][i] * sigmoid(hraw);
                    dz_prev[i] += softplus(hraw) * dlin[o];
                }
            }
            dz = dz_prev;
            dz_len = r_in;
        }
        dz[0]
    }
}

impl CustomOp for RateOp {
    fn name(&self) -> &'static str {
        "rate_bits"
    }

    fn forward(&self, inputs: &[ArrayViewD<f64>]) -> ArrayD<f64> {
        let (latent, h, b, a) = self.split(inputs);
        let v3 = latent.view().into_dimensionality::<ndarray::Ix3>().expect("latent is 3-d");
        let mut bits = 0.0;
        for (c, plane) in v3.outer_iter().enumerate() {
            for &v in plane.iter() {
                let hi = Self::cdf_forward(&h, &b, &a, c, v + 0.5);
                let lo = Self::cdf_forward(&h, &b, &a, c, v - 0.5);
                let p = (sigmoid(hi.y) - sigmoid(lo.y)).max(P_FLOOR);
                bits -= p.log2();
            }
        }
        ndarray::arr0(bits).into_dyn()
    }

    fn backward(
        &self,
        inputs: &[ArrayViewD<f64>],
        grad_out: &ArrayViewD<f64>,
    ) -> Vec<Option<ArrayD<f64>>> {
        let g0 = *grad_out.first().expect("scalar grad");
        let (latent, h, b, a) = self.split(inputs);
        let v3 = latent.view().into_dimensionality::<ndarray::Ix3>().expect("latent is 3-d");
        let (cc, hh, ww) = v3.dim();

        let mut glatent = Array3::<f64>::zeros((cc, hh, ww));
        let mut gh: Vec<ArrayD<f64>> = h.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect();
        let mut gb: Vec<ArrayD<f64>> = b.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect();
        let mut ga: Vec<ArrayD<f64>> = a.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect();

        let ln2 = std::f64::consts::LN_2;
        for c in 0..cc {
            for y in 0..hh {
                for x in 0..ww {
                    let v = v3[[c, y, x]];
                    let hi = Self::cdf_forward(&h, &b, &a, c, v + 0.5);
                    let lo = Self::cdf_forward(&h, &b, &a, c, v - 0.5);
                    let chi = sigmoid(hi.y);
                    let clo = sigmoid(lo.y);
                    let p = chi - clo;
                    if p < P_FLOOR {
                        continue; // floored bin: zero gradient
                    }
                    // d(-log2 p)/dp = -1 / (p ln 2); scaled by upstream grad.
                    let dp = -g0 / (p * ln2);
                    let dhi = dp * chi * (1.0 - chi); // through sigmoid
                    let dlo = -dp * clo * (1.0 - clo);
                    let dx_hi =
                        Self::cdf_backward(&h, &a, c, &hi, dhi, &mut gh, &mut gb, &mut ga);
                    let dx_lo =
                        Self::cdf_backward(&h, &a, c, &lo, dlo, &mut gh, &mut gb, &mut ga);
                    glatent[[c, y, x]] = dx_hi + dx_lo;
                }
            }
        }

        let mut out: Vec<Option<ArrayD<f64>>> = vec![Some(glatent.into_dyn())];
        for k in 0..self.layers {
            out.push(Some(std::mem::replace(&mut gh[k], ArrayD::zeros(IxDyn(&[0])))));
            out.push(Some(std::mem::replace(&mut gb[k], ArrayD::zeros(IxDyn(&[0])))));
            if k + 1 < self.layers {
                out.push(Some(std::mem::replace(&mut ga[k], ArrayD::zeros(IxDyn(&[0])))));
            }
        }
        out
    }
}
