//! Optical flow estimation and differentiable backward warping.
//!
//! Flow fields are `[2, H, W]`: channel 0 holds the horizontal displacement
//! `dx`, channel 1 the vertical displacement `dy`, both in pixels. A flow
//! `f` maps a pixel `p` of the *target* image to the location `p + f(p)` in
//! the *source* image, so `backward_warp(source, f)` approximates the
//! target. Samples falling outside the source are clamped to its edge.
//!
//! The initial flow comes from a classical coarse-to-fine Lucas-Kanade
//! estimator ([`LucasKanade`]) that carries no learned parameters and is
//! never trained; learned refinement happens downstream. Anything that can
//! produce a flow implements [`FlowProvider`], which also gives tests a
//! cheap constant-flow mock.

use std::io::{Read, Write};
use std::rc::Rc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayD, ArrayViewD, Ix3};

use crate::autodiff::{kernels, CustomOp, Graph, Tid};
use crate::error::{Error, Result};
use crate::img::Frame;

/// Anything that estimates flow between two frames.
pub trait FlowProvider {
    /// Flow `f` such that `backward_warp(source, f)` approximates `target`.
    fn flow(&self, target: &Frame, source: &Frame) -> Result<Array3<f64>>;

    /// Short identifier recorded in metric outputs so histograms computed
    /// with different estimators are never compared silently.
    fn id(&self) -> String {
        "unspecified".into()
    }
}

/// Mock provider returning the same displacement everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantFlow {
    pub dx: f64,
    pub dy: f64,
}

impl FlowProvider for ConstantFlow {
    fn flow(&self, target: &Frame, _source: &Frame) -> Result<Array3<f64>> {
        let (_, h, w) = target.dim();
        let mut f = Array3::zeros((2, h, w));
        f.index_axis_mut(ndarray::Axis(0), 0).fill(self.dx);
        f.index_axis_mut(ndarray::Axis(0), 1).fill(self.dy);
        Ok(f)
    }

    fn id(&self) -> String {
        format!("constant({},{})", self.dx, self.dy)
    }
}

/// Sum of the two flow components: a refined field is the initial estimate
/// plus the learned correction.
pub fn compose_refined(initial: &Array3<f64>, refinement: &Array3<f64>) -> Array3<f64> {
    assert_eq!(initial.dim(), refinement.dim(), "flow shapes must match");
    initial + refinement
}

// ---------------------------------------------------------------------------
// Backward warp
// ---------------------------------------------------------------------------

/// Bilinear backward warp of `source` by `flow`; plain (non-graph) path.
pub fn backward_warp(source: &Frame, flow: &Array3<f64>) -> Frame {
    let out = WarpOp.forward(&[source.view().into_dyn(), flow.view().into_dyn()]);
    out.into_dimensionality::<Ix3>().unwrap()
}

/// Differentiable backward warp as a graph node.
/// `source` is `[C, H, W]`, `flow` is `[2, H, W]`.
pub fn warp_on_graph(g: &mut Graph, source: Tid, flow: Tid) -> Tid {
    g.custom(Rc::new(WarpOp), &[source, flow])
}

/// Bilinear sampling with edge clamp; gradients flow into both the source
/// image and the flow field. At clamped samples the flow gradient vanishes
/// (moving further out changes nothing).
struct WarpOp;

#[inline]
fn bilinear_taps(h: usize, w: usize, sy: f64, sx: f64) -> ([usize; 2], [usize; 2], f64, f64) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let ix = [clamp(x0, w), clamp(x0 + 1.0, w)];
    let iy = [clamp(y0, h), clamp(y0 + 1.0, h)];
    (iy, ix, fy, fx)
}

impl CustomOp for WarpOp {
    fn name(&self) -> &'static str {
        "backward_warp"
    }

    fn forward(&self, inputs: &[ArrayViewD<f64>]) -> ArrayD<f64> {
        let src = inputs[0].view().into_dimensionality::<Ix3>().expect("source is [C,H,W]");
        let flow = inputs[1].view().into_dimensionality::<Ix3>().expect("flow is [2,H,W]");
        let (c, h, w) = src.dim();
        assert_eq!(flow.dim(), (2, h, w), "flow/source size mismatch");
        let mut out = Array3::<f64>::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + flow[[0, y, x]];
                let sy = y as f64 + flow[[1, y, x]];
                let (iy, ix, fy, fx) = bilinear_taps(h, w, sy, sx);
                for ci in 0..c {
                    let v00 = src[[ci, iy[0], ix[0]]];
                    let v01 = src[[ci, iy[0], ix[1]]];
                    let v10 = src[[ci, iy[1], ix[0]]];
                    let v11 = src[[ci, iy[1], ix[1]]];
                    out[[ci, y, x]] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        out.into_dyn()
    }

    fn backward(
        &self,
        inputs: &[ArrayViewD<f64>],
        grad_out: &ArrayViewD<f64>,
    ) -> Vec<Option<ArrayD<f64>>> {
        let src = inputs[0].view().into_dimensionality::<Ix3>().unwrap();
        let flow = inputs[1].view().into_dimensionality::<Ix3>().unwrap();
        let g = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = src.dim();
        let mut gsrc = Array3::<f64>::zeros((c, h, w));
        let mut gflow = Array3::<f64>::zeros((2, h, w));
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + flow[[0, y, x]];
                let sy = y as f64 + flow[[1, y, x]];
                let (iy, ix, fy, fx) = bilinear_taps(h, w, sy, sx);
                let mut ddx = 0.0;
                let mut ddy = 0.0;
                for ci in 0..c {
                    let go = g[[ci, y, x]];
                    let v00 = src[[ci, iy[0], ix[0]]];
                    let v01 = src[[ci, iy[0], ix[1]]];
                    let v10 = src[[ci, iy[1], ix[0]]];
                    let v11 = src[[ci, iy[1], ix[1]]];
                    gsrc[[ci, iy[0], ix[0]]] += go * (1.0 - fy) * (1.0 - fx);
                    gsrc[[ci, iy[0], ix[1]]] += go * (1.0 - fy) * fx;
                    gsrc[[ci, iy[1], ix[0]]] += go * fy * (1.0 - fx);
                    gsrc[[ci, iy[1], ix[1]]] += go * fy * fx;
                    // d(out)/d(sx): horizontal differences of the two rows;
                    // cancels to zero when both taps clamp to one texel.
                    ddx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    ddy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                gflow[[0, y, x]] = ddx;
                gflow[[1, y, x]] = ddy;
            }
        }
        vec![Some(gsrc.into_dyn()), Some(gflow.into_dyn())]
    }
}

// ---------------------------------------------------------------------------
// Lucas-Kanade initial flow
// ---------------------------------------------------------------------------

/// Classical dense coarse-to-fine Lucas-Kanade estimator over image luma.
/// No learned parameters; results depend only on the two input frames.
#[derive(Debug, Clone)]
pub struct LucasKanade {
    /// Pyramid levels (automatically reduced for tiny frames).
    pub levels: usize,
    /// Gauss-Newton iterations per level.
    pub iters: usize,
    /// Box-window radius for the local normal equations.
    pub window_radius: usize,
    /// Tikhonov damping added to the 2x2 structure tensor.
    pub epsilon: f64,
}

impl Default for LucasKanade {
    fn default() -> Self {
        LucasKanade { levels: 3, iters: 3, window_radius: 3, epsilon: 1e-3 }
    }
}

/// Channel-mean luma as a single-channel image.
fn luma(frame: &Frame) -> Array2<f64> {
    let (c, h, w) = frame.dim();
    let mut out = Array2::zeros((h, w));
    for ci in 0..c {
        out += &frame.index_axis(ndarray::Axis(0), ci);
    }
    out / c as f64
}

/// 2x2 mean downsampling (floors odd dimensions).
fn downsample(img: &Array2<f64>) -> Array2<f64> {
    let wrapped = img
        .view()
        .insert_axis(ndarray::Axis(0))
        .into_dimensionality::<Ix3>()
        .unwrap()
        .to_owned();
    let pooled = kernels::avg_pool(&wrapped.view(), 2);
    pooled.index_axis(ndarray::Axis(0), 0).to_owned()
}

/// Nearest-neighbor flow upsampling to an exact size, doubling magnitudes.
fn upsample_flow(flow: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (_, h, w) = flow.dim();
    Array3::from_shape_fn((2, out_h, out_w), |(c, y, x)| {
        2.0 * flow[[c, (y / 2).min(h - 1), (x / 2).min(w - 1)]]
    })
}

/// Edge-clamped box sum over a `(2r+1)^2` window, separable.
fn box_sum(img: &Array2<f64>, r: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = r as i64;
    let mut rows = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dx in -r..=r {
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                s += img[[y, xx]];
            }
            rows[[y, x]] = s;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                s += rows[[yy, x]];
            }
            out[[y, x]] = s;
        }
    }
    out
}

/// Central-difference spatial gradients, edge-clamped.
fn gradients(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        let xm = x.saturating_sub(1);
        let xp = (x + 1).min(w - 1);
        (img[[y, xp]] - img[[y, xm]]) / (xp - xm).max(1) as f64
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        (img[[yp, x]] - img[[ym, x]]) / (yp - ym).max(1) as f64
    });
    (gx, gy)
}

/// Warp a single-channel image (wraps the frame warp).
fn warp_scalar(img: &Array2<f64>, flow: &Array3<f64>) -> Array2<f64> {
    let wrapped = img.view().insert_axis(ndarray::Axis(0)).to_owned();
    let warped = backward_warp(&wrapped, flow);
    warped.index_axis(ndarray::Axis(0), 0).to_owned()
}

impl LucasKanade {
    fn refine_level(
        &self,
        target: &Array2<f64>,
        source: &Array2<f64>,
        mut flow: Array3<f64>,
    ) -> Array3<f64> {
        let (h, w) = target.dim();
        for _ in 0..self.iters {
            let warped = warp_scalar(source, &flow);
            let (gx, gy) = gradients(&warped);
            let resid = target - &warped;
            let gxx = box_sum(&(&gx * &gx), self.window_radius);
            let gxy = box_sum(&(&gx * &gy), self.window_radius);
            let gyy = box_sum(&(&gy * &gy), self.window_radius);
            let bx = box_sum(&(&gx * &resid), self.window_radius);
            let by = box_sum(&(&gy * &resid), self.window_radius);
            for y in 0..h {
                for x in 0..w {
                    let a = gxx[[y, x]] + self.epsilon;
                    let b = gxy[[y, x]];
                    let d = gyy[[y, x]] + self.epsilon;
                    let det = a * d - b * b;
                    let rx = bx[[y, x]];
                    let ry = by[[y, x]];
                    flow[[0, y, x]] += (d * rx - b * ry) / det;
                    flow[[1, y, x]] += (a * ry - b * rx) / det;
                }
            }
        }
        flow
    }
}

impl FlowProvider for LucasKanade {
    fn flow(&self, target: &Frame, source: &Frame) -> Result<Array3<f64>> {
        if target.dim() != source.dim() {
            return Err(Error::InvalidInput(format!(
                "flow frames differ in size: {:?} vs {:?}",
                target.dim(),
                source.dim()
            )));
        }
        let (_, h, w) = target.dim();
        if h < 2 || w < 2 {
            return Err(Error::InvalidInput("frames too small for flow estimation".into()));
        }
        // Keep the coarsest level at least 8 px on a side.
        let mut levels = self.levels.max(1);
        while levels > 1 && (h >> (levels - 1)) < 8.min(h) || levels > 1 && (w >> (levels - 1)) < 8.min(w) {
            levels -= 1;
        }
        let mut t_pyr = vec![luma(target)];
        let mut s_pyr = vec![luma(source)];
        for _ in 1..levels {
            t_pyr.push(downsample(t_pyr.last().unwrap()));
            s_pyr.push(downsample(s_pyr.last().unwrap()));
        }
        let (ch, cw) = t_pyr[levels - 1].dim();
        let mut flow = Array3::zeros((2, ch, cw));
        for lvl in (0..levels).rev() {
            let (lh, lw) = t_pyr[lvl].dim();
            if flow.dim().1 != lh || flow.dim().2 != lw {
                flow = upsample_flow(&flow, lh, lw);
            }
            flow = self.refine_level(&t_pyr[lvl], &s_pyr[lvl], flow);
        }
        Ok(flow)
    }

    fn id(&self) -> String {
        format!("lucas-kanade(l{},i{},r{})", self.levels, self.iters, self.window_radius)
    }
}

// ---------------------------------------------------------------------------
// Flow dump format
// ---------------------------------------------------------------------------

/// Write a flow field as `[u32 LE H][u32 LE W]` then row-major
/// `f32 dx, f32 dy` pairs.
pub fn write_flow(w: &mut impl Write, flow: &Array3<f64>) -> Result<()> {
    let (c, h, ww) = flow.dim();
    assert_eq!(c, 2, "flow is [2,H,W]");
    let io = |e| Error::Format(format!("flow write failed: {e}"));
    w.write_u32::<LittleEndian>(h as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(ww as u32).map_err(io)?;
    for y in 0..h {
        for x in 0..ww {
            w.write_f32::<LittleEndian>(flow[[0, y, x]] as f32).map_err(io)?;
            w.write_f32::<LittleEndian>(flow[[1, y, x]] as f32).map_err(io)?;
        }
    }
    Ok(())
}

/// Read a flow field written by [`write_flow`].
pub fn read_flow(r: &mut impl Read) -> Result<Array3<f64>> {
    let io = |e| Error::Format(format!("flow read failed: {e}"));
    let h = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut flow = Array3::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            flow[[0, y, x]] = r.read_f32::<LittleEndian>().map_err(io)? as f64;
            flow[[1, y, x]] = r.read_f32::<LittleEndian>().map_err(io)? as f64;
        }
    }
    Ok(flow)
}
