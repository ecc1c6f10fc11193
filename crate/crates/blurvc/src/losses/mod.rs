//! Training objectives: warp alignment, region-ranked attention weighting,
//! the context-aware motion loss, the enhancement loss, the motion /
//! compensation / final distortion losses, and multi-scale structural
//! similarity.
//!
//! # Conventions
//!
//! "ℓ2" losses are sums of per-pixel Euclidean norms across channels:
//! `Σ_p ‖d[:, p]‖₂`. ℓ1 losses are plain element sums of absolute values.
//! Rate terms are scalar graph nodes measured in bits and are added to the
//! objective unweighted; the trade-off multipliers scale only the distortion
//! side. All loss builders validate shapes and rate signs and return
//! [`Error::InvalidInput`] on misuse.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Tid};
use crate::flow_warp::warp_on_graph;
use crate::{Error, Result};

/// Default region size for the attention map (one pooling cell per k×k
/// patch; small relative to training crops).
pub const DEFAULT_POOL_K: usize = 8;
/// Default rank label step. Any positive value gives identical attention
/// weights after min-max scaling, so this is a free constant.
pub const DEFAULT_RANK_SCALE: f64 = 1.0;

/// Distortion measure for the final rate-distortion objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistortionKind {
    /// Mean squared error (optimize for PSNR).
    Mse,
    /// `1 − MS-SSIM` (optimize for perceptual similarity).
    OneMinusMsSsim,
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

fn dims3(g: &Graph, t: Tid, what: &str) -> Result<(usize, usize, usize)> {
    let s = g.value(t).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidInput(format!("{what} must be [C, H, W], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

fn expect_same_frames(g: &Graph, a: Tid, b: Tid, what: &str) -> Result<(usize, usize, usize)> {
    let da = dims3(g, a, what)?;
    let db = dims3(g, b, what)?;
    if da != db {
        return Err(Error::InvalidInput(format!(
            "{what}: frame shapes differ ({da:?} vs {db:?})"
        )));
    }
    Ok(da)
}

fn expect_flow(g: &Graph, flow: Tid, h: usize, w: usize) -> Result<()> {
    let d = dims3(g, flow, "flow")?;
    if d != (2, h, w) {
        return Err(Error::InvalidInput(format!(
            "flow must be [2, {h}, {w}], got [{}, {}, {}]",
            d.0, d.1, d.2
        )));
    }
    Ok(())
}

fn expect_rate(g: &Graph, rate: Tid, what: &str) -> Result<()> {
    let v = g.value(rate);
    if v.len() != 1 {
        return Err(Error::InvalidInput(format!("{what} must be a scalar node")));
    }
    let r = v.iter().next().copied().unwrap();
    if !r.is_finite() || r < 0.0 {
        return Err(Error::InvalidInput(format!("{what} must be a finite nonnegative bit count, got {r}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Norm helpers
// ---------------------------------------------------------------------------

/// Sum over pixels of the per-pixel Euclidean norm across channels.
fn pixel_norm_sum(g: &mut Graph, d: Tid) -> Tid {
    let sq = g.square(d);
    let s = g.sum_channels(sq);
    let n = g.sqrt(s);
    g.sum(n)
}

/// Element sum of absolute differences.
fn l1_sum(g: &mut Graph, a: Tid, b: Tid) -> Tid {
    let d = g.sub(a, b);
    let ad = g.abs(d);
    g.sum(ad)
}

// ---------------------------------------------------------------------------
// Warp + attention losses
// ---------------------------------------------------------------------------

/// Alignment loss: sum of per-pixel ℓ2 norms of `x̂_t − W(x_{t−1}, flow)`,
/// where `W` is backward bilinear warping.
pub fn warp_loss(g: &mut Graph, current: Tid, previous: Tid, flow: Tid) -> Result<Tid> {
    let (_, h, w) = expect_same_frames(g, current, previous, "warp_loss")?;
    expect_flow(g, flow, h, w)?;
    let warped = warp_on_graph(g, previous, flow);
    let d = g.sub(current, warped);
    Ok(pixel_norm_sum(g, d))
}

/// Region-ranked error map. Per-pixel squared error is averaged over
/// channels, average-pooled in k×k blocks, and each block is labeled
/// `v · rank` by its ascending rank (1-based; ties broken in raster order).
/// Labels are broadcast back to pixel resolution.
pub fn error_map(
    current: &ArrayView3<f64>,
    reference: &ArrayView3<f64>,
    k: usize,
    v: f64,
) -> Result<Array2<f64>> {
    if current.dim() != reference.dim() {
        return Err(Error::InvalidInput(format!(
            "error_map: frame shapes differ ({:?} vs {:?})",
            current.dim(),
            reference.dim()
        )));
    }
    let (c, h, w) = current.dim();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidInput(format!(
            "error_map: {h}x{w} frame not divisible into {k}x{k} regions"
        )));
    }
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidInput(format!("error_map: rank scale must be positive, got {v}")));
    }
    let mut sq = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = current[[ci, y, x]] - reference[[ci, y, x]];
                sq[[y, x]] += d * d;
            }
        }
    }
    sq.mapv_inplace(|s| s / c as f64);
    if sq.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("error_map: non-finite pixel errors".into()));
    }
    let pooled3 = kernels::avg_pool(&sq.view().insert_axis(Axis(0)), k);
    let pooled = pooled3.index_axis(Axis(0), 0);
    let rw = w / k;
    let flat: Vec<f64> = pooled.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[a].partial_cmp(&flat[b]).unwrap().then(a.cmp(&b)));
    let mut labels = vec![0.0; flat.len()];
    for (pos, &region) in order.iter().enumerate() {
        labels[region] = v * (pos + 1) as f64;
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| labels[(y / k) * rw + (x / k)]))
}

/// Min-max scale an error map into [0, 1] attention weights. A constant map
/// yields all-zero weights (no region is preferentially weighted).
pub fn attention_weights(e: &Array2<f64>) -> Array2<f64> {
    let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Array2::zeros(e.raw_dim());
    }
    e.mapv(|x| (x - lo) / (hi - lo))
}

/// Attention-weighted alignment loss: sum of per-pixel ℓ2 norms of
/// `w · [x̂_t − W(x_{t−1}, flow)]` with `w` broadcast over channels.
///
/// The weights are folded in as constants: they are derived from the ground
/// truth and the enhanced frame, and letting gradients flow into them would
/// let training game the attention map instead of the reconstruction.
pub fn context_aware_loss(
    g: &mut Graph,
    current: Tid,
    previous: Tid,
    flow: Tid,
    weights: &Array2<f64>,
) -> Result<Tid> {
    let (c, h, w) = expect_same_frames(g, current, previous, "context_aware_loss")?;
    expect_flow(g, flow, h, w)?;
    if weights.dim() != (h, w) {
        return Err(Error::InvalidInput(format!(
            "context_aware_loss: weights must be [{h}, {w}], got {:?}",
            weights.dim()
        )));
    }
    let wc = Array3::from_shape_fn((c, h, w), |(_, y, x)| weights[[y, x]]);
    let wt = g.constant(wc.into_dyn());
    let warped = warp_on_graph(g, previous, flow);
    let d = g.sub(current, warped);
    let wd = g.mul(d, wt);
    Ok(pixel_norm_sum(g, wd))
}

// ---------------------------------------------------------------------------
// Stage objectives
// ---------------------------------------------------------------------------

/// Enhancement objective: ℓ1 reconstruction of the sharp frame from both the
/// raw and the quantized blur residual, plus the residual's coding rate.
///
/// `λ_e · [Σ|X_t − (B_t + b_t)| + Σ|X_t − x̂_t|] + rate_u`
pub fn venet_loss(
    g: &mut Graph,
    sharp: Tid,
    blurry: Tid,
    blur_residual: Tid,
    enhanced: Tid,
    rate_u: Tid,
    lambda_e: f64,
) -> Result<Tid> {
    expect_same_frames(g, sharp, blurry, "venet_loss")?;
    expect_same_frames(g, sharp, blur_residual, "venet_loss")?;
    expect_same_frames(g, sharp, enhanced, "venet_loss")?;
    expect_rate(g, rate_u, "rate_u")?;
    let pre = g.add(blurry, blur_residual);
    let l_pre = l1_sum(g, sharp, pre);
    let l_post = l1_sum(g, sharp, enhanced);
    let both = g.add(l_pre, l_post);
    let weighted = g.scale(both, lambda_e);
    Ok(g.add(weighted, rate_u))
}

/// Motion objective: attention-weighted alignment plus motion coding rate.
///
/// `λ_d · L_ca + rate_m`
pub fn motion_loss(g: &mut Graph, context_aware: Tid, rate_m: Tid, lambda_d: f64) -> Result<Tid> {
    if g.value(context_aware).len() != 1 {
        return Err(Error::InvalidInput("motion_loss: context-aware term must be scalar".into()));
    }
    expect_rate(g, rate_m, "rate_m")?;
    let weighted = g.scale(context_aware, lambda_d);
    Ok(g.add(weighted, rate_m))
}

/// Compensation objective: per-pixel ℓ2 between the motion-compensated
/// prediction and the enhanced frame, plus motion coding rate.
///
/// `λ_d · Σ‖x̄_t − x̂_t‖₂ + rate_m`
pub fn mcnet_loss(
    g: &mut Graph,
    predicted: Tid,
    enhanced: Tid,
    rate_m: Tid,
    lambda_d: f64,
) -> Result<Tid> {
    expect_same_frames(g, predicted, enhanced, "mcnet_loss")?;
    expect_rate(g, rate_m, "rate_m")?;
    let d = g.sub(predicted, enhanced);
    let l = pixel_norm_sum(g, d);
    let weighted = g.scale(l, lambda_d);
    Ok(g.add(weighted, rate_m))
}

/// Final rate-distortion objective: distortion between the reconstruction
/// and the enhanced frame, plus both coding rates.
///
/// `λ_d · D(x_t, x̂_t) + rate_m + rate_q` with `D` either MSE or 1 − MS-SSIM.
pub fn distortion_loss(
    g: &mut Graph,
    reconstructed: Tid,
    enhanced: Tid,
    rate_m: Tid,
    rate_q: Tid,
    lambda_d: f64,
    kind: DistortionKind,
) -> Result<Tid> {
    expect_same_frames(g, reconstructed, enhanced, "distortion_loss")?;
    expect_rate(g, rate_m, "rate_m")?;
    expect_rate(g, rate_q, "rate_q")?;
    let d = match kind {
        DistortionKind::Mse => {
            let diff = g.sub(reconstructed, enhanced);
            let sq = g.square(diff);
            g.mean(sq)
        }
        DistortionKind::OneMinusMsSsim => {
            let ms = ms_ssim(g, reconstructed, enhanced)?;
            let neg = g.scale(ms, -1.0);
            g.offset(neg, 1.0)
        }
    };
    let weighted = g.scale(d, lambda_d);
    let with_m = g.add(weighted, rate_m);
    Ok(g.add(with_m, rate_q))
}

// ---------------------------------------------------------------------------
// Multi-scale structural similarity
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (0.01 · dynamic range 1)²
const SSIM_C2: f64 = 9e-4; // (0.03 · dynamic range 1)²
const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Normalized Gaussian taps of length `2·radius + 1`.
fn gaussian_taps(radius: usize, sigma: f64) -> Vec<f64> {
    let mut taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

/// Number of usable scales for an H×W image: the largest count (≤ 5) whose
/// coarsest scale still fits the 11×11 window.
fn msssim_scales(h: usize, w: usize) -> Result<usize> {
    let m = h.min(w);
    if m < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ms_ssim: {h}x{w} image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let mut s = MSSSIM_WEIGHTS.len();
    while s > 1 && m / (1 << (s - 1)) < SSIM_WINDOW {
        s -= 1;
    }
    Ok(s)
}

/// Multi-scale structural similarity on the graph, in [0, 1], as a 0-d node.
///
/// Standard construction: Gaussian-window statistics per scale; the
/// contrast-structure factor at every scale, luminance at the coarsest; 2×2
/// average-pool downsampling between scales; factors combined by weighted
/// geometric mean. When the image is too small for five scales, the scale
/// count shrinks to fit and the remaining weights are renormalized.
pub fn ms_ssim(g: &mut Graph, x: Tid, y: Tid) -> Result<Tid> {
    let (_, h, w) = expect_same_frames(g, x, y, "ms_ssim")?;
    let scales = msssim_scales(h, w)?;
    let div = 1 << (scales - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::InvalidInput(format!(
            "ms_ssim: {h}x{w} image not divisible by 2^{} for {scales}-scale analysis",
            scales - 1
        )));
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let taps = gaussian_taps(SSIM_WINDOW / 2, SSIM_SIGMA);

    let (mut xa, mut ya) = (x, y);
    let mut product: Option<Tid> = None;
    for s in 0..scales {
        let weight = MSSSIM_WEIGHTS[s] / wsum;
        let mux = g.gauss_valid(xa, taps.clone());
        let muy = g.gauss_valid(ya, taps.clone());
        let xx = g.square(xa);
        let yy = g.square(ya);
        let xy = g.mul(xa, ya);
        let gxx = g.gauss_valid(xx, taps.clone());
        let gyy = g.gauss_valid(yy, taps.clone());
        let gxy = g.gauss_valid(xy, taps.clone());
        let mux2 = g.square(mux);
        let muy2 = g.square(muy);
        let muxy = g.mul(mux, muy);
        let varx = g.sub(gxx, mux2);
        let vary = g.sub(gyy, muy2);
        let cov = g.sub(gxy, muxy);

        let cs_num = {
            let t = g.scale(cov, 2.0);
            g.offset(t, SSIM_C2)
        };
        let cs_den = {
            let t = g.add(varx, vary);
            g.offset(t, SSIM_C2)
        };
        let cs_map = g.div(cs_num, cs_den);

        let factor_map = if s + 1 == scales {
            let l_num = {
                let t = g.scale(muxy, 2.0);
                g.offset(t, SSIM_C1)
            };
            let l_den = {
                let t = g.add(mux2, muy2);
                g.offset(t, SSIM_C1)
            };
            let l_map = g.div(l_num, l_den);
            g.mul(l_map, cs_map)
        } else {
            cs_map
        };
        // Clamp negatives (anticorrelated patches) before the geometric
        // combination so fractional powers stay real.
        let pos = g.relu(factor_map);
        let m = g.mean(pos);
        let f = g.pow_const(m, weight);
        product = Some(match product {
            None => f,
            Some(p) => g.mul(p, f),
        });

        if s + 1 < scales {
            xa = g.avg_pool(xa, 2);
            ya = g.avg_pool(ya, 2);
        }
    }
    Ok(product.unwrap())
}

/// Convenience evaluation of [`ms_ssim`] on plain arrays.
pub fn ms_ssim_value(x: &ArrayView3<f64>, y: &ArrayView3<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let xt = g.constant(x.to_owned().into_dyn());
    let yt = g.constant(y.to_owned().into_dyn());
    let m = ms_ssim(&mut g, xt, yt)?;
    Ok(g.scalar(m))
}
