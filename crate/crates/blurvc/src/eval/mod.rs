//! Quality and rate metrics, temporal-smoothness analysis, and
//! rate-distortion curve assembly.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};

use crate::codec::container::Container;
use crate::flow_warp::FlowProvider;
use crate::img::{Clip, Frame};
use crate::losses::ms_ssim_value;
use crate::{Error, Result};

/// Peak signal-to-noise ratio in dB for unit-range frames:
/// `10·log10(1 / MSE)`. Identical inputs give `+∞`.
pub fn psnr(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!(
            "psnr: shapes differ ({:?} vs {:?})",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Coded bits per pixel of a container: payload bits over all coded pixels.
pub fn bpp(container: &Container) -> f64 {
    container.bpp()
}

/// Mean per-frame PSNR of two aligned frame sequences, in dB.
pub fn video_psnr(a: &[Frame], b: &[Frame]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "video psnr needs equal nonempty sequences, got {} and {} frames",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += psnr(&x.view(), &y.view())?;
    }
    Ok(acc / a.len() as f64)
}

/// Mean per-frame MS-SSIM of two aligned frame sequences.
pub fn video_msssim(a: &[Frame], b: &[Frame]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "video ms-ssim needs equal nonempty sequences, got {} and {} frames",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += ms_ssim_value(&x.view(), &y.view())?;
    }
    Ok(acc / a.len() as f64)
}

/// Rate and quality of one encoded clip against a reference sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipMeasurement {
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

/// Measure decoded frames against a reference, with the rate taken from the
/// container they were decoded from.
pub fn measure_encoding(
    decoded: &[Frame],
    reference: &[Frame],
    container: &Container,
) -> Result<ClipMeasurement> {
    Ok(ClipMeasurement {
        bpp: container.bpp(),
        psnr: video_psnr(decoded, reference)?,
        msssim: video_msssim(decoded, reference)?,
    })
}

// ---------------------------------------------------------------------------
// Temporal smoothness
// ---------------------------------------------------------------------------

/// Log relative frequency histogram of second-order flow differences between
/// a decoded clip and its ground truth.
///
/// For each consecutive frame triple, the flow acceleration of the decoded
/// clip minus the flow acceleration of the ground truth gives one difference
/// vector per pixel; vectors are binned by `⌊‖v‖₂⌋` and each occupied bin
/// stores `T(l) = ln(count_l) − ln(total)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessHistogram {
    /// `T(l)` per occupied integer bin `l`; empty bins are omitted.
    pub bins: BTreeMap<u64, f64>,
    /// Number of difference vectors binned (pixels × triples).
    pub df_size: usize,
    /// Which estimator produced the flows on both clips.
    pub flow_provider_id: String,
}

impl SmoothnessHistogram {
    /// `Σ exp(T(l))` over occupied bins; 1 up to rounding by construction.
    pub fn total_mass(&self) -> f64 {
        self.bins.values().map(|t| t.exp()).sum()
    }
}

/// Compare the motion of a decoded clip against its ground truth.
///
/// Both clips are run through the same flow estimator; second-order flow
/// differences cancel any motion both clips share, so the histogram captures
/// only jitter the codec introduced. Needs at least 3 aligned frames.
pub fn temporal_smoothness(
    decoded: &Clip,
    gt: &Clip,
    provider: &dyn FlowProvider,
) -> Result<SmoothnessHistogram> {
    if decoded.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "temporal smoothness: clip lengths differ ({} vs {})",
            decoded.len(),
            gt.len()
        )));
    }
    if decoded.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "temporal smoothness needs at least 3 frames, got {}",
            decoded.len()
        )));
    }
    let dims = decoded.frames[0].dim();
    for f in decoded.frames.iter().chain(gt.frames.iter()) {
        if f.dim() != dims {
            return Err(Error::InvalidInput(format!(
                "temporal smoothness: frame shape {:?} differs from {:?}",
                f.dim(),
                dims
            )));
        }
    }

    let (_, h, w) = dims;
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    let mut total: u64 = 0;
    for t in 2..decoded.len() {
        let f21 = provider.flow(&decoded.frames[t], &decoded.frames[t - 1])?;
        let f10 = provider.flow(&decoded.frames[t - 1], &decoded.frames[t - 2])?;
        let g21 = provider.flow(&gt.frames[t], &gt.frames[t - 1])?;
        let g10 = provider.flow(&gt.frames[t - 1], &gt.frames[t - 2])?;
        for y in 0..h {
            for x in 0..w {
                let dx = (f21[[0, y, x]] - f10[[0, y, x]]) - (g21[[0, y, x]] - g10[[0, y, x]]);
                let dy = (f21[[1, y, x]] - f10[[1, y, x]]) - (g21[[1, y, x]] - g10[[1, y, x]]);
                let l = (dx * dx + dy * dy).sqrt().floor() as u64;
                *counts.entry(l).or_insert(0) += 1;
                total += 1;
            }
        }
    }
    let ln_total = (total as f64).ln();
    let bins = counts
        .into_iter()
        .map(|(l, c)| (l, (c as f64).ln() - ln_total))
        .collect();
    Ok(SmoothnessHistogram { bins, df_size: total as usize, flow_provider_id: provider.id() })
}

// ---------------------------------------------------------------------------
// Rate-distortion curves
// ---------------------------------------------------------------------------

/// One operating point of a rate sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub lambda_d: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

/// Order operating points by rate into a curve.
///
/// Needs at least two points; two points at exactly the same bpp have no
/// well-defined order (and break the slope metric), so they are rejected.
pub fn rd_curve(points: &[RdPoint]) -> Result<Vec<RdPoint>> {
    if points.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "an RD curve needs at least 2 points, got {}",
            points.len()
        )));
    }
    for p in points {
        if !p.bpp.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite bpp {} in RD point", p.bpp)));
        }
    }
    let mut curve = points.to_vec();
    curve.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).expect("bpp is finite"));
    for pair in curve.windows(2) {
        if pair[0].bpp == pair[1].bpp {
            return Err(Error::InvalidInput(format!(
                "duplicate bpp {} in RD points",
                pair[0].bpp
            )));
        }
    }
    Ok(curve)
}

/// Quality gained per unit of rate: the PSNR spread between the best- and
/// worst-quality points of a curve over their bpp spread.
pub fn db_per_bpp(curve: &[RdPoint]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "dB/bpp needs at least 2 points, got {}",
            curve.len()
        )));
    }
    let cmp_psnr = |a: &&RdPoint, b: &&RdPoint| {
        a.psnr.partial_cmp(&b.psnr).expect("psnr is never NaN")
    };
    let hi = curve.iter().max_by(cmp_psnr).unwrap();
    let lo = curve.iter().min_by(cmp_psnr).unwrap();
    if hi.bpp == lo.bpp {
        return Err(Error::InvalidInput(
            "best- and worst-quality points share one bpp; slope undefined".into(),
        ));
    }
    Ok((hi.psnr - lo.psnr) / (hi.bpp - lo.bpp))
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

/// One measured clip in the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub clip: String,
    pub lambda_d: f64,
    pub mode: String,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

/// Write the per-clip metrics table (`clip,lambda_d,mode,bpp,psnr,msssim`).
pub fn write_metrics_csv(w: &mut impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row).map_err(|e| Error::Format(format!("metrics csv write: {e}")))?;
    }
    wtr.flush().map_err(|e| Error::Format(format!("metrics csv write: {e}")))?;
    Ok(())
}

/// Read a metrics table written by [`write_metrics_csv`].
pub fn read_metrics_csv(r: impl std::io::Read) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec.map_err(|e| Error::Format(format!("metrics csv read: {e}")))?);
    }
    Ok(rows)
}

/// Write a smoothness histogram as a `l,T` table, ordered by `l`.
pub fn write_smoothness_csv(w: &mut impl Write, hist: &SmoothnessHistogram) -> Result<()> {
    let fail = |e: std::io::Error| Error::Format(format!("smoothness csv write: {e}"));
    writeln!(w, "l,T").map_err(fail)?;
    for (l, t) in &hist.bins {
        writeln!(w, "{l},{t}").map_err(fail)?;
    }
    Ok(())
}

/// Write an ordered RD curve as a `lambda_d,bpp,psnr,msssim` table.
pub fn write_rd_csv(w: &mut impl Write, curve: &[RdPoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in curve {
        wtr.serialize(p).map_err(|e| Error::Format(format!("rd csv write: {e}")))?;
    }
    wtr.flush().map_err(|e| Error::Format(format!("rd csv write: {e}")))?;
    Ok(())
}

/// Average rows that share a rate weight into curve points.
///
/// Rows are grouped by exact `lambda_d` value; each group contributes one
/// point with mean bpp/psnr/ms-ssim. The result is unsorted — feed it
/// through [`rd_curve`].
pub fn aggregate_rd_points(rows: &[MetricsRow]) -> Vec<RdPoint> {
    let mut groups: BTreeMap<u64, Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows {
        groups.entry(row.lambda_d.to_bits()).or_default().push(row);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            RdPoint {
                lambda_d: g[0].lambda_d,
                bpp: g.iter().map(|r| r.bpp).sum::<f64>() / n,
                psnr: g.iter().map(|r| r.psnr).sum::<f64>() / n,
                msssim: g.iter().map(|r| r.msssim).sum::<f64>() / n,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 480.0;
const MARGIN: f64 = 56.0;

fn axis_scale(lo: f64, hi: f64, target_lo: f64, target_hi: f64) -> impl Fn(f64) -> f64 {
    // Flat data still needs a usable axis: pad a unit span around it.
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    move |v| target_lo + (v - lo) / (hi - lo) * (target_hi - target_lo)
}

fn svg_open(w: &mut impl Write, title: &str) -> std::io::Result<()> {
    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    )?;
    writeln!(w, "<rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>")?;
    writeln!(
        w,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>",
        PLOT_W / 2.0
    )
}

fn svg_axes(w: &mut impl Write, x_label: &str, y_label: &str) -> std::io::Result<()> {
    let x0 = MARGIN;
    let x1 = PLOT_W - MARGIN;
    let y0 = PLOT_H - MARGIN;
    let y1 = MARGIN;
    writeln!(
        w,
        "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>"
    )?;
    writeln!(
        w,
        "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x0:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>"
    )?;
    writeln!(
        w,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>",
        (x0 + x1) / 2.0,
        PLOT_H - 16.0
    )?;
    writeln!(
        w,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    )
}

/// Render an ordered RD curve as a standalone SVG line plot.
pub fn write_rd_svg(w: &mut impl Write, curve: &[RdPoint]) -> Result<()> {
    if curve.is_empty() {
        return Err(Error::InvalidInput("cannot plot an empty RD curve".into()));
    }
    for p in curve {
        if !p.bpp.is_finite() || !p.psnr.is_finite() {
            return Err(Error::InvalidInput(format!(
                "cannot plot non-finite RD point (bpp {}, psnr {})",
                p.bpp, p.psnr
            )));
        }
    }
    let fail = |e: std::io::Error| Error::Format(format!("rd svg write: {e}"));
    let bpp_lo = curve.iter().map(|p| p.bpp).fold(f64::INFINITY, f64::min);
    let bpp_hi = curve.iter().map(|p| p.bpp).fold(f64::NEG_INFINITY, f64::max);
    let psnr_lo = curve.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
    let psnr_hi = curve.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max);
    let sx = axis_scale(bpp_lo, bpp_hi, MARGIN + 12.0, PLOT_W - MARGIN - 12.0);
    let sy = axis_scale(psnr_lo, psnr_hi, PLOT_H - MARGIN - 12.0, MARGIN + 12.0);

    svg_open(w, "Rate-distortion").map_err(fail)?;
    svg_axes(w, "bpp", "PSNR (dB)").map_err(fail)?;
    if curve.len() > 1 {
        let pts: Vec<String> =
            curve.iter().map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr))).collect();
        writeln!(
            w,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>",
            pts.join(" ")
        )
        .map_err(fail)?;
    }
    for p in curve {
        writeln!(
            w,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#1f77b4\"/>",
            sx(p.bpp),
            sy(p.psnr)
        )
        .map_err(fail)?;
        writeln!(
            w,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{:.3} bpp, {:.2} dB</text>",
            sx(p.bpp) + 6.0,
            sy(p.psnr) - 6.0,
            p.bpp,
            p.psnr
        )
        .map_err(fail)?;
    }
    writeln!(w, "</svg>").map_err(fail)?;
    Ok(())
}

/// Render a smoothness histogram as a standalone SVG point plot of `T(l)`.
pub fn write_smoothness_svg(w: &mut impl Write, hist: &SmoothnessHistogram) -> Result<()> {
    if hist.bins.is_empty() {
        return Err(Error::InvalidInput("cannot plot an empty histogram".into()));
    }
    let fail = |e: std::io::Error| Error::Format(format!("smoothness svg write: {e}"));
    let l_lo = *hist.bins.keys().next().unwrap() as f64;
    let l_hi = *hist.bins.keys().last().unwrap() as f64;
    let t_lo = hist.bins.values().fold(f64::INFINITY, |a, &b| a.min(b));
    let t_hi: f64 = 0.0;
    let sx = axis_scale(l_lo, l_hi, MARGIN + 12.0, PLOT_W - MARGIN - 12.0);
    let sy = axis_scale(t_lo, t_hi, PLOT_H - MARGIN - 12.0, MARGIN + 12.0);

    svg_open(w, "Temporal smoothness").map_err(fail)?;
    svg_axes(w, "pixel error length l", "T(l)").map_err(fail)?;
    if hist.bins.len() > 1 {
        let pts: Vec<String> = hist
            .bins
            .iter()
            .map(|(&l, &t)| format!("{:.2},{:.2}", sx(l as f64), sy(t)))
            .collect();
        writeln!(
            w,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"/>",
            pts.join(" ")
        )
        .map_err(fail)?;
    }
    for (&l, &t) in &hist.bins {
        writeln!(
            w,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#d62728\"/>",
            sx(l as f64),
            sy(t)
        )
        .map_err(fail)?;
        writeln!(
            w,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">l={l}: {t:.3}</text>",
            sx(l as f64) + 6.0,
            sy(t) - 6.0
        )
        .map_err(fail)?;
    }
    writeln!(
        w,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#555\">flows: {}</text>",
        MARGIN,
        PLOT_H - 4.0,
        hist.flow_provider_id
    )
    .map_err(fail)?;
    writeln!(w, "</svg>").map_err(fail)?;
    Ok(())
}
