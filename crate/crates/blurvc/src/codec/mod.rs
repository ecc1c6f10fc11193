//! End-to-end frame and video coding.
//!
//! A predicted frame travels through: blur-residual estimation and coding
//! (enhancement), initial flow from a classical estimator, learned flow
//! refinement, motion coding, backward warping, motion compensation, and
//! residual coding. The decoder mirrors the motion/residual half exactly —
//! both sides run the same code on the same integer latents, which is what
//! makes the previous reconstruction a safe shared reference.
//!
//! Two inference modes:
//! * **enhance** — the coded residual targets the enhanced frame
//!   `x̂_t = B_t + b̂_t`, so the decoded video is deblurred;
//! * **preserve** — the residual targets the blurry input `B_t` itself, the
//!   blur-residual stream is not transmitted (the enhanced frame only steers
//!   encoder-side flow estimation), and the decoded video keeps the source's
//!   look.

pub mod adapters;
pub mod container;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tid};
use crate::blocks::{
    decoder_forward, encoder_forward, frnet_forward, mcnet_forward, venet_forward, LatentKind,
    Model, ParamTids,
};
use crate::entropy::coder::{decode_latent, encode_latent};
use crate::entropy::{quantize, FactorizedDensity, QuantizeMode};
use crate::flow_warp::{warp_on_graph, FlowProvider};
use crate::img::{Clip, Frame};
use crate::losses::ms_ssim_value;
use crate::{Error, Result};

use adapters::{adapter_by_id, decode_iframe, encode_iframe};
use container::{Container, ContainerHeader, FrameSections};

/// What the decoded video should look like.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CodecMode {
    /// Reconstruct the enhanced (deblurred) frames.
    Enhance = 0,
    /// Reconstruct the blurry input as-is, spending no blur-residual bits.
    Preserve = 1,
}

impl CodecMode {
    pub fn from_u8(v: u8) -> Option<CodecMode> {
        match v {
            0 => Some(CodecMode::Enhance),
            1 => Some(CodecMode::Preserve),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CodecMode::Enhance => "enhance",
            CodecMode::Preserve => "preserve",
        }
    }
}

/// Default frames per GOP (one intra anchor plus seven predicted frames).
pub const DEFAULT_GOP_SIZE: u16 = 8;

/// Clamp a frame into the displayable range.
pub fn clamp01(f: &Frame) -> Frame {
    f.mapv(|v| v.clamp(0.0, 1.0))
}

/// Per-frame bit accounting and quality diagnostics.
#[derive(Debug, Clone)]
pub struct FrameDiag {
    pub index: usize,
    pub is_intra: bool,
    /// Coded payload bits per stream. For intra frames the whole payload is
    /// reported under `bits_residual`.
    pub bits_blur: u64,
    pub bits_motion: u64,
    pub bits_residual: u64,
    /// Reconstruction quality versus the *input* (blurry) frame.
    pub psnr_vs_input: f64,
    pub msssim_vs_input: f64,
    /// Latent elements clamped into the coder's support.
    pub support_overflows: u64,
}

/// Encoder output for a whole clip.
pub struct EncodedVideo {
    pub container: Container,
    /// Decoder-identical reconstructions, one per frame.
    pub reconstructions: Vec<Frame>,
    pub diagnostics: Vec<FrameDiag>,
}

pub(crate) fn expect_coded_dims(model: &Model, h: usize, w: usize) -> Result<()> {
    let f = model.config.downsample_factor();
    if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::InvalidInput(format!(
            "frame dims must be nonzero multiples of {f}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Round a raw latent and clamp it into coder support. Returns the integer
/// array plus the number of clamped elements.
pub(crate) fn quantize_for_coding(
    raw: &ArrayD<f64>,
    kind: LatentKind,
    density: &FactorizedDensity,
) -> Result<(ArrayD<f64>, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in rounding mode
    let mut q = quantize(raw, QuantizeMode::EvalRounded, kind.density_id(), &mut rng)?;
    let moved = density.clamp_values_to_support(&mut q.values);
    Ok((q.values, moved))
}

pub(crate) fn code_latent_bytes(
    ints: &ArrayD<f64>,
    kind: LatentKind,
    density: &FactorizedDensity,
) -> Result<Vec<u8>> {
    let latent = crate::entropy::Latent {
        values: ints.clone(),
        density_id: kind.density_id(),
        mode: QuantizeMode::EvalRounded,
    };
    encode_latent(&latent, density)
}

/// Decoder-side motion half: decode the flow from its integer latent, warp
/// the reference, and refine with the compensation network. Shared verbatim
/// by the encoder so both sides compute bit-identical predictions.
pub(crate) fn motion_to_prediction(
    g: &mut Graph,
    p: &ParamTids,
    model: &Model,
    prev_t: Tid,
    motion_ints: &ArrayD<f64>,
) -> (Tid, Tid) {
    let mt = g.constant(motion_ints.clone());
    let fhat = decoder_forward(g, p, LatentKind::Motion, mt, &model.config);
    let warped = warp_on_graph(g, prev_t, fhat);
    let xbar = mcnet_forward(g, p, warped, prev_t, fhat, &model.config);
    (fhat, xbar)
}

/// Decoder-side residual half: decode the residual and add it to the
/// prediction. Returns the pre-clamp reconstruction node.
pub(crate) fn residual_to_reconstruction(
    g: &mut Graph,
    p: &ParamTids,
    model: &Model,
    xbar: Tid,
    residual_ints: &ArrayD<f64>,
) -> Tid {
    let rt = g.constant(residual_ints.clone());
    let rhat = decoder_forward(g, p, LatentKind::Residual, rt, &model.config);
    g.add(xbar, rhat)
}

pub(crate) fn frame_of(g: &Graph, t: Tid) -> Frame {
    g.value(t)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("frame-shaped node")
}

/// Encode one predicted frame against the shared previous reconstruction.
///
/// Returns the coded sections, the reconstruction the decoder will produce
/// (bit-exactly), and diagnostics. `previous` must be the decoder-side
/// reconstruction of the prior frame.
/// Run the enhancement half alone: estimate the blur residual, code it at
/// inference precision, and add the decoded residual back onto the input.
/// This is the frame the predicted-frame coder targets in enhance mode.
pub fn enhance_frame(model: &Model, blurry: &Frame) -> Result<Frame> {
    let (c, h, w) = blurry.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!(
            "enhancement expects a [3, H, W] frame, got {:?}",
            blurry.dim()
        )));
    }
    expect_coded_dims(model, h, w)?;
    let mut g = Graph::new();
    let p = model.store.inject_constants(&mut g);
    let cfg = &model.config;
    let blurry_t = g.constant(blurry.clone().into_dyn());
    let b = venet_forward(&mut g, &p, blurry_t, cfg);
    let blur_raw = encoder_forward(&mut g, &p, LatentKind::Blur, b, cfg);
    let blur_density = model.density(LatentKind::Blur);
    let (blur_ints, _) =
        quantize_for_coding(g.value(blur_raw), LatentKind::Blur, &blur_density)?;
    let blur_ints_t = g.constant(blur_ints);
    let bhat = decoder_forward(&mut g, &p, LatentKind::Blur, blur_ints_t, cfg);
    let enhanced = g.add(blurry_t, bhat);
    Ok(frame_of(&g, enhanced))
}

pub fn encode_pframe(
    model: &Model,
    blurry: &Frame,
    previous: &Frame,
    flow_provider: &dyn FlowProvider,
    mode: CodecMode,
) -> Result<(FrameSections, Frame, FrameDiag)> {
    let (c, h, w) = blurry.dim();
    if c != 3 || previous.dim() != (3, h, w) {
        return Err(Error::InvalidInput(format!(
            "predicted-frame coding expects matching [3, H, W] frames, got {:?} and {:?}",
            blurry.dim(),
            previous.dim()
        )));
    }
    expect_coded_dims(model, h, w)?;

    let mut g = Graph::new();
    let p = model.store.inject_constants(&mut g);
    let cfg = &model.config;
    let blurry_t = g.constant(blurry.clone().into_dyn());
    let prev_t = g.constant(previous.clone().into_dyn());

    // Enhancement: estimate the blur residual, code it, rebuild x̂ from the
    // quantized version (the encoder mirrors its own decoder even though
    // only the encoder ever uses x̂).
    let b = venet_forward(&mut g, &p, blurry_t, cfg);
    let blur_raw = encoder_forward(&mut g, &p, LatentKind::Blur, b, cfg);
    let blur_density = model.density(LatentKind::Blur);
    let (blur_ints, blur_moved) =
        quantize_for_coding(g.value(blur_raw), LatentKind::Blur, &blur_density)?;
    let blur_ints_t = g.constant(blur_ints.clone());
    let bhat = decoder_forward(&mut g, &p, LatentKind::Blur, blur_ints_t, cfg);
    let enhanced = g.add(blurry_t, bhat);

    // Initial flow between the enhanced frame and the reference, refined by
    // the learned network, then coded.
    let enhanced_frame = frame_of(&g, enhanced);
    let initial = flow_provider.flow(&enhanced_frame, previous)?;
    let initial_t = g.constant(initial.into_dyn());
    let refinement = frnet_forward(&mut g, &p, enhanced, prev_t, initial_t, cfg);
    let flow = g.add(initial_t, refinement);
    let motion_raw = encoder_forward(&mut g, &p, LatentKind::Motion, flow, cfg);
    let motion_density = model.density(LatentKind::Motion);
    let (motion_ints, motion_moved) =
        quantize_for_coding(g.value(motion_raw), LatentKind::Motion, &motion_density)?;

    // Decoder-identical prediction.
    let (_fhat, xbar) = motion_to_prediction(&mut g, &p, model, prev_t, &motion_ints);

    // Residual: against the enhanced frame (enhance) or the input (preserve).
    let target = match mode {
        CodecMode::Enhance => enhanced,
        CodecMode::Preserve => blurry_t,
    };
    let residual = g.sub(target, xbar);
    let residual_raw = encoder_forward(&mut g, &p, LatentKind::Residual, residual, cfg);
    let residual_density = model.density(LatentKind::Residual);
    let (residual_ints, residual_moved) =
        quantize_for_coding(g.value(residual_raw), LatentKind::Residual, &residual_density)?;

    let recon_t = residual_to_reconstruction(&mut g, &p, model, xbar, &residual_ints);
    let reconstruction = clamp01(&frame_of(&g, recon_t));

    let blur_bytes = match mode {
        CodecMode::Enhance => code_latent_bytes(&blur_ints, LatentKind::Blur, &blur_density)?,
        CodecMode::Preserve => Vec::new(),
    };
    let motion_bytes = code_latent_bytes(&motion_ints, LatentKind::Motion, &motion_density)?;
    let residual_bytes =
        code_latent_bytes(&residual_ints, LatentKind::Residual, &residual_density)?;

    let diag = FrameDiag {
        index: 0, // caller fills in
        is_intra: false,
        bits_blur: blur_bytes.len() as u64 * 8,
        bits_motion: motion_bytes.len() as u64 * 8,
        bits_residual: residual_bytes.len() as u64 * 8,
        psnr_vs_input: crate::eval::psnr(&reconstruction.view(), &blurry.view())?,
        msssim_vs_input: ms_ssim_value(&reconstruction.view(), &blurry.view())?,
        support_overflows: blur_moved + motion_moved + residual_moved,
    };
    let sections = FrameSections::Predicted {
        blur: blur_bytes,
        motion: motion_bytes,
        residual: residual_bytes,
    };
    Ok((sections, reconstruction, diag))
}

/// Decode one predicted frame. Exact mirror of the encoder's reconstruction.
pub fn decode_pframe(
    model: &Model,
    sections: &FrameSections,
    previous: &Frame,
    mode: CodecMode,
) -> Result<Frame> {
    let FrameSections::Predicted { blur, motion, residual } = sections else {
        return Err(Error::Format("expected a predicted frame, found intra".into()));
    };
    let (c, h, w) = previous.dim();
    if c != 3 {
        return Err(Error::InvalidInput("reference frame must be [3, H, W]".into()));
    }
    expect_coded_dims(model, h, w)?;
    let f = model.config.downsample_factor();
    let latent_shape = [model.config.latent_channels, h / f, w / f];

    // The blur-residual stream reconstructs nothing on the decoder side (the
    // enhanced frame only guides encoder-side flow); decode it anyway to
    // verify integrity when present.
    match mode {
        CodecMode::Enhance => {
            let density = model.density(LatentKind::Blur);
            decode_latent(blur, latent_shape, &density, LatentKind::Blur.density_id())
                .map_err(|e| Error::Format(format!("blur-residual section: {e}")))?;
        }
        CodecMode::Preserve => {
            if !blur.is_empty() {
                return Err(Error::Format(
                    "blur-residual section must be empty in preserve mode".into(),
                ));
            }
        }
    }

    let motion_density = model.density(LatentKind::Motion);
    let motion_ints =
        decode_latent(motion, latent_shape, &motion_density, LatentKind::Motion.density_id())
            .map_err(|e| Error::Format(format!("motion section: {e}")))?;
    let residual_density = model.density(LatentKind::Residual);
    let residual_ints = decode_latent(
        residual,
        latent_shape,
        &residual_density,
        LatentKind::Residual.density_id(),
    )
    .map_err(|e| Error::Format(format!("residual section: {e}")))?;

    let mut g = Graph::new();
    let p = model.store.inject_constants(&mut g);
    let prev_t = g.constant(previous.clone().into_dyn());
    let (_fhat, xbar) = motion_to_prediction(&mut g, &p, model, prev_t, &motion_ints.values);
    let recon_t = residual_to_reconstruction(&mut g, &p, model, xbar, &residual_ints.values);
    Ok(clamp01(&frame_of(&g, recon_t)))
}

/// Encode a clip into a container. Frame 0 of each GOP is coded by the intra
/// adapter; the rest are predicted frames chained on the shared
/// reconstruction.
pub fn encode_video(
    model: &Model,
    clip: &Clip,
    mode: CodecMode,
    gop_size: u16,
    intra_adapter_id: u8,
    flow_provider: &dyn FlowProvider,
) -> Result<EncodedVideo> {
    if clip.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty clip".into()));
    }
    if gop_size == 0 {
        return Err(Error::InvalidInput("gop size must be at least 1".into()));
    }
    let (h, w) = clip.dims();
    expect_coded_dims(model, h, w)?;
    for (i, f) in clip.frames.iter().enumerate() {
        if f.dim() != (3, h, w) {
            return Err(Error::InvalidInput(format!(
                "frame {i} has shape {:?}, expected (3, {h}, {w})",
                f.dim()
            )));
        }
    }
    let adapter = adapter_by_id(intra_adapter_id, model)?;

    let mut frames = Vec::with_capacity(clip.len());
    let mut reconstructions: Vec<Frame> = Vec::with_capacity(clip.len());
    let mut diagnostics = Vec::with_capacity(clip.len());
    for (i, frame) in clip.frames.iter().enumerate() {
        if i % gop_size as usize == 0 {
            let payload = encode_iframe(adapter.as_ref(), frame)?;
            let recon = decode_iframe(&payload, model, h, w)?;
            let bits = payload.len() as u64 * 8;
            diagnostics.push(FrameDiag {
                index: i,
                is_intra: true,
                bits_blur: 0,
                bits_motion: 0,
                bits_residual: bits,
                psnr_vs_input: crate::eval::psnr(&recon.view(), &frame.view())?,
                msssim_vs_input: ms_ssim_value(&recon.view(), &frame.view())?,
                support_overflows: 0,
            });
            frames.push(FrameSections::Intra { payload });
            reconstructions.push(recon);
        } else {
            let previous = reconstructions.last().expect("intra precedes predicted");
            let (sections, recon, mut diag) =
                encode_pframe(model, frame, previous, flow_provider, mode)?;
            diag.index = i;
            frames.push(sections);
            reconstructions.push(recon);
            diagnostics.push(diag);
        }
    }

    let container = Container {
        header: ContainerHeader {
            mode,
            width: w as u32,
            height: h as u32,
            frame_count: clip.len() as u32,
            gop_size,
            model_id: model.id(),
        },
        frames,
    };
    container.validate()?;
    Ok(EncodedVideo { container, reconstructions, diagnostics })
}

/// Decode a container back into frames. The model must be the one that
/// produced the stream.
pub fn decode_video(model: &Model, container: &Container) -> Result<Vec<Frame>> {
    container.validate()?;
    if container.header.model_id != model.id() {
        return Err(Error::ModelMismatch(format!(
            "container was coded by model {:016x}, loaded model is {:016x}",
            container.header.model_id,
            model.id()
        )));
    }
    let h = container.header.height as usize;
    let w = container.header.width as usize;
    expect_coded_dims(model, h, w)?;
    let mode = container.header.mode;

    let mut out: Vec<Frame> = Vec::with_capacity(container.frames.len());
    for (i, sections) in container.frames.iter().enumerate() {
        let frame = match sections {
            FrameSections::Intra { payload } => decode_iframe(payload, model, h, w)
                .map_err(|e| Error::Format(format!("frame {i}: {e}")))?,
            FrameSections::Predicted { .. } => {
                let previous = out.last().expect("validated GOP starts with intra");
                decode_pframe(model, sections, previous, mode)
                    .map_err(|e| match e {
                        Error::Format(m) => Error::Format(format!("frame {i}: {m}")),
                        other => other,
                    })?
            }
        };
        out.push(frame);
    }
    Ok(out)
}

/// Write per-frame diagnostics as CSV. Intra payload bits appear in the
/// `bits_q` column; `psnr`/`msssim` compare the reconstruction to the coder
/// input (the blurry frame).
pub fn write_diagnostics_csv(w: &mut impl std::io::Write, diags: &[FrameDiag]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["frame", "type", "bits_u", "bits_m", "bits_q", "psnr", "msssim"])
        .map_err(|e| Error::Format(format!("diagnostics csv: {e}")))?;
    for d in diags {
        csv.write_record([
            d.index.to_string(),
            if d.is_intra { "I".into() } else { "P".into() },
            d.bits_blur.to_string(),
            d.bits_motion.to_string(),
            d.bits_residual.to_string(),
            format!("{:.6}", d.psnr_vs_input),
            format!("{:.6}", d.msssim_vs_input),
        ])
        .map_err(|e| Error::Format(format!("diagnostics csv: {e}")))?;
    }
    csv.flush().map_err(|e| Error::Format(format!("diagnostics csv: {e}")))?;
    Ok(())
}
