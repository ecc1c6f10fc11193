//! Cascade baselines: a standalone deblurring network chained with a
//! motion/residual codec, in either order, trained off-the-shelf (frozen
//! pieces), jointly (one end-to-end loss), or with intermediate supervision
//! on the hand-off signal between the two components.
//!
//! The deblurrer reuses the enhancement backbone's parameter shapes, and the
//! codec half reuses the pipeline's motion/residual machinery, so a single
//! parameter store carries any cascade variant.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::blocks::{decoder_forward, encoder_forward, frnet_forward, venet_forward, LatentKind, Model};
use crate::codec::adapters::{adapter_by_id, decode_iframe, encode_iframe};
use crate::codec::container::{Container, ContainerHeader, FrameSections};
use crate::codec::{
    clamp01, code_latent_bytes, expect_coded_dims, frame_of, motion_to_prediction,
    quantize_for_coding, residual_to_reconstruction, CodecMode, EncodedVideo, FrameDiag,
};
use crate::entropy::rate_on_graph;
use crate::flow_warp::{warp_on_graph, FlowProvider};
use crate::img::{Clip, Frame};
use crate::losses::ms_ssim_value;
use crate::train::{noisy_latent, Adam, ObservedLatents};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which component runs first at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CascadeOrder {
    DeblurThenCode,
    CodeThenDeblur,
}

/// How the two components are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CascadeRegime {
    /// Frozen pre-trained pieces composed at inference; nothing to train.
    OffTheShelf,
    /// One end-to-end loss against the sharp frame at the cascade output.
    Joint,
    /// Joint loss plus direct supervision of the hand-off between components.
    Intermediate,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CascadeConfig {
    pub order: CascadeOrder,
    pub regime: CascadeRegime,
    /// Weight of the deblurring term (intermediate regime).
    pub lambda_d: f64,
    /// Weight of the codec-fidelity term (intermediate regime).
    pub lambda_c: f64,
    /// Weight of the end-to-end distortion (joint regime).
    pub lambda: f64,
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        match self.regime {
            CascadeRegime::OffTheShelf => Ok(()),
            CascadeRegime::Joint => {
                if self.lambda <= 0.0 {
                    Err(Error::InvalidInput("joint regime needs lambda > 0".into()))
                } else {
                    Ok(())
                }
            }
            CascadeRegime::Intermediate => {
                if self.lambda_d <= 0.0 || self.lambda_c <= 0.0 {
                    Err(Error::InvalidInput(
                        "intermediate regime needs lambda_d > 0 and lambda_c > 0".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Plain (unphased) optimization run: fixed learning rate over `iters` steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CascadeRunConfig {
    pub iters: u64,
    pub lr: f64,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
}

impl CascadeRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.lr <= 0.0 || self.batch == 0 || self.crop == 0 {
            return Err(Error::InvalidInput(
                "cascade run needs positive iters, lr, batch, and crop".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Deblurrer
// ---------------------------------------------------------------------------

/// Value-level single-frame deblurring component.
pub trait Deblurrer {
    fn deblur(&self, frame: &Frame) -> Result<Frame>;
    fn name(&self) -> &'static str;
}

/// Passes frames through untouched (the trivial composition baseline).
pub struct IdentityDeblurrer;

impl Deblurrer for IdentityDeblurrer {
    fn deblur(&self, frame: &Frame) -> Result<Frame> {
        Ok(frame.clone())
    }
    fn name(&self) -> &'static str {
        "identity"
    }
}

/// The learned residual deblurrer: input plus the enhancement backbone's
/// correction, computed without any coding.
pub struct LearnedDeblurrer<'m> {
    pub model: &'m Model,
}

impl Deblurrer for LearnedDeblurrer<'_> {
    fn deblur(&self, frame: &Frame) -> Result<Frame> {
        let (c, h, w) = frame.dim();
        if c != 3 {
            return Err(Error::InvalidInput("deblur expects a [3, H, W] frame".into()));
        }
        expect_coded_dims(self.model, h, w)?;
        let mut g = Graph::new();
        let p = self.model.store.inject_constants(&mut g);
        let bx = g.constant(frame.clone().into_dyn());
        let b = venet_forward(&mut g, &p, bx, &self.model.config);
        let out = g.add(bx, b);
        Ok(frame_of(&g, out))
    }
    fn name(&self) -> &'static str {
        "learned-residual"
    }
}

// ---------------------------------------------------------------------------
// Codec half: motion + residual coding of an arbitrary target stream
// ---------------------------------------------------------------------------

/// Encode one predicted frame of the cascade codec: the frame is coded
/// toward itself (no enhancement stage), producing a blur-free bitstream
/// that decodes through the regular predicted-frame path.
fn encode_pframe_plain(
    model: &Model,
    target: &Frame,
    previous: &Frame,
    provider: &dyn FlowProvider,
) -> Result<(FrameSections, Frame, FrameDiag)> {
    let (c, h, w) = target.dim();
    if c != 3 || previous.dim() != (3, h, w) {
        return Err(Error::InvalidInput(
            "cascade predicted-frame coding expects matching [3, H, W] frames".into(),
        ));
    }
    expect_coded_dims(model, h, w)?;

    let mut g = Graph::new();
    let p = model.store.inject_constants(&mut g);
    let cfg = &model.config;
    let tx = g.constant(target.clone().into_dyn());
    let pv = g.constant(previous.clone().into_dyn());

    let initial = provider.flow(target, previous)?;
    let initial_t = g.constant(initial.into_dyn());
    let refinement = frnet_forward(&mut g, &p, tx, pv, initial_t, cfg);
    let flow = g.add(initial_t, refinement);
    let motion_raw = encoder_forward(&mut g, &p, LatentKind::Motion, flow, cfg);
    let motion_density = model.density(LatentKind::Motion);
    let (motion_ints, motion_moved) =
        quantize_for_coding(g.value(motion_raw), LatentKind::Motion, &motion_density)?;
    let (_fhat, xbar) = motion_to_prediction(&mut g, &p, model, pv, &motion_ints);

    let residual = g.sub(tx, xbar);
    let residual_raw = encoder_forward(&mut g, &p, LatentKind::Residual, residual, cfg);
    let residual_density = model.density(LatentKind::Residual);
    let (residual_ints, residual_moved) =
        quantize_for_coding(g.value(residual_raw), LatentKind::Residual, &residual_density)?;
    let recon_t = residual_to_reconstruction(&mut g, &p, model, xbar, &residual_ints);
    let reconstruction = clamp01(&frame_of(&g, recon_t));

    let motion_bytes = code_latent_bytes(&motion_ints, LatentKind::Motion, &motion_density)?;
    let residual_bytes =
        code_latent_bytes(&residual_ints, LatentKind::Residual, &residual_density)?;
    let diag = FrameDiag {
        index: 0,
        is_intra: false,
        bits_blur: 0,
        bits_motion: motion_bytes.len() as u64 * 8,
        bits_residual: residual_bytes.len() as u64 * 8,
        psnr_vs_input: crate::eval::psnr(&reconstruction.view(), &target.view())?,
        msssim_vs_input: ms_ssim_value(&reconstruction.view(), &target.view())?,
        support_overflows: motion_moved + residual_moved,
    };
    let sections =
        FrameSections::Predicted { blur: Vec::new(), motion: motion_bytes, residual: residual_bytes };
    Ok((sections, reconstruction, diag))
}

/// Cascade inference: deblur-and-code (or code-then-deblur) a blurry clip.
/// The bitstream is a regular prior-preserving container — the standard
/// decoder reproduces the codec half bit-exactly; the final outputs add the
/// deblurrer per the order.
pub fn cascade_encode_video(
    model: &Model,
    deblurrer: &dyn Deblurrer,
    order: CascadeOrder,
    clip: &Clip,
    gop_size: u16,
    intra_adapter_id: u8,
    provider: &dyn FlowProvider,
) -> Result<(EncodedVideo, Vec<Frame>)> {
    if clip.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty clip".into()));
    }
    if gop_size == 0 {
        return Err(Error::InvalidInput("gop size must be at least 1".into()));
    }
    let (h, w) = clip.dims();
    expect_coded_dims(model, h, w)?;
    let adapter = adapter_by_id(intra_adapter_id, model)?;

    // The stream the codec half sees.
    let inputs: Vec<Frame> = match order {
        CascadeOrder::DeblurThenCode => clip
            .frames
            .iter()
            .map(|f| deblurrer.deblur(f))
            .collect::<Result<_>>()?,
        CascadeOrder::CodeThenDeblur => clip.frames.clone(),
    };

    let mut frames = Vec::with_capacity(inputs.len());
    let mut reconstructions: Vec<Frame> = Vec::with_capacity(inputs.len());
    let mut diagnostics = Vec::with_capacity(inputs.len());
    for (i, frame) in inputs.iter().enumerate() {
        if i % gop_size as usize == 0 {
            let payload = encode_iframe(adapter.as_ref(), frame)?;
            let recon = decode_iframe(&payload, model, h, w)?;
            diagnostics.push(FrameDiag {
                index: i,
                is_intra: true,
                bits_blur: 0,
                bits_motion: 0,
                bits_residual: payload.len() as u64 * 8,
                psnr_vs_input: crate::eval::psnr(&recon.view(), &frame.view())?,
                msssim_vs_input: ms_ssim_value(&recon.view(), &frame.view())?,
                support_overflows: 0,
            });
            frames.push(FrameSections::Intra { payload });
            reconstructions.push(recon);
        } else {
            let previous = reconstructions.last().expect("intra precedes predicted");
            let (sections, recon, mut diag) = encode_pframe_plain(model, frame, previous, provider)?;
            diag.index = i;
            frames.push(sections);
            reconstructions.push(recon);
            diagnostics.push(diag);
        }
    }

    let container = Container {
        header: ContainerHeader {
            mode: CodecMode::Preserve,
            width: w as u32,
            height: h as u32,
            frame_count: inputs.len() as u32,
            gop_size,
            model_id: model.id(),
        },
        frames,
    };
    container.validate()?;

    let outputs: Vec<Frame> = match order {
        CascadeOrder::DeblurThenCode => reconstructions.clone(),
        CascadeOrder::CodeThenDeblur => reconstructions
            .iter()
            .map(|f| deblurrer.deblur(f))
            .collect::<Result<_>>()?,
    };
    Ok((EncodedVideo { container, reconstructions, diagnostics }, outputs))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Supervised warm-up of the deblurrer alone: per-pixel ℓ1 toward the sharp
/// frame. Updates only the deblurring backbone's parameters. Returns the
/// per-step loss values.
pub fn pretrain_deblurrer(
    corpus: &[(Clip, Clip)],
    model: &mut Model,
    run: &CascadeRunConfig,
) -> Result<Vec<f64>> {
    run.validate()?;
    super::validate_corpus(corpus, &model.config, run.crop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(run.iters as usize);
    for i in 0..run.iters {
        let mut g = Graph::new();
        let p = model.store.inject(&mut g);
        let mut sample_losses = Vec::with_capacity(run.batch);
        for _ in 0..run.batch {
            let (blurry, sharp) = super::draw_crop_pair(&mut rng, corpus, run.crop);
            let bx = g.constant(blurry.into_dyn());
            let xx = g.constant(sharp.into_dyn());
            let b = venet_forward(&mut g, &p, bx, &model.config);
            let out = g.add(bx, b);
            let d = g.sub(xx, out);
            let a = g.abs(d);
            sample_losses.push(g.sum(a));
        }
        let mut total = sample_losses[0];
        for &l in &sample_losses[1..] {
            total = g.add(total, l);
        }
        let total = g.scale(total, 1.0 / run.batch as f64);
        let val = g.scalar(total);
        if !val.is_finite() {
            return Err(Error::Divergence { iteration: i, loss: val });
        }
        let grads = g.backward(total);
        super::apply_gradients(model, &p, &grads, &mut adam, run.lr);
        losses.push(val);
    }
    Ok(losses)
}

/// Outcome of a cascade training run.
pub struct CascadeOutcome {
    pub model: Model,
    pub log_path: PathBuf,
    /// Per-step mean absolute difference between the deblurrer's output and
    /// its input — the identity-collapse probe.
    pub drift: Vec<f64>,
}

pub const CASCADE_LOG_HEADER: &str = "iteration,loss,bits_m,bits_q,deblur_drift";

/// Train a cascade (joint or intermediate regime) starting from `start`
/// (typically a model whose deblurrer was pre-trained). Single coded step
/// per sample; the reference frame is the deblurred (or raw) previous frame,
/// held constant.
pub fn train_cascade(
    corpus: &[(Clip, Clip)],
    start: Model,
    cfg: &CascadeConfig,
    run: &CascadeRunConfig,
    provider: &dyn FlowProvider,
    out_dir: &Path,
) -> Result<CascadeOutcome> {
    cfg.validate()?;
    run.validate()?;
    if cfg.regime == CascadeRegime::OffTheShelf {
        return Err(Error::InvalidInput(
            "off-the-shelf cascade composes frozen checkpoints; there is nothing to train".into(),
        ));
    }
    super::validate_corpus(corpus, &start.config, run.crop)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("cascade_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{CASCADE_LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;

    let mut model = start;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut adam = Adam::default();
    let mut drift_series = Vec::with_capacity(run.iters as usize);

    for i in 0..run.iters {
        let mut g = Graph::new();
        let p = model.store.inject(&mut g);
        let mut observed = ObservedLatents::default();
        let mut sample_losses = Vec::with_capacity(run.batch);
        let mut bits_m_acc = 0.0;
        let mut bits_q_acc = 0.0;
        let mut drift_acc = 0.0;
        for _ in 0..run.batch {
            let (prev_b, blurry, sharp) = super::draw_crop_window(&mut rng, corpus, run.crop);
            let cfg_b = &model.config;
            let bx = g.constant(blurry.clone().into_dyn());
            let xx = g.constant(sharp.into_dyn());

            // The codec half's input and reference per the order.
            let (codec_in, reference) = match cfg.order {
                CascadeOrder::DeblurThenCode => {
                    let d_cur = venet_forward(&mut g, &p, bx, cfg_b);
                    let xhat = g.add(bx, d_cur);
                    // Deblur the reference too, value-only (cross-time stop).
                    let pb = g.constant(prev_b.clone().into_dyn());
                    let d_prev = venet_forward(&mut g, &p, pb, cfg_b);
                    let ref_node = g.add(pb, d_prev);
                    let ref_frame = frame_of(&g, ref_node);
                    (xhat, ref_frame)
                }
                CascadeOrder::CodeThenDeblur => (bx, prev_b.clone()),
            };
            let pv = g.constant(reference.clone().into_dyn());

            // Motion + residual coding toward `codec_in`.
            let codec_in_frame = frame_of(&g, codec_in);
            let f_i = provider.flow(&codec_in_frame, &reference)?;
            let fi_t = g.constant(f_i.into_dyn());
            let f_r = frnet_forward(&mut g, &p, codec_in, pv, fi_t, cfg_b);
            let f = g.add(fi_t, f_r);
            let m_raw = encoder_forward(&mut g, &p, LatentKind::Motion, f, cfg_b);
            let m_tilde = noisy_latent(&mut g, m_raw, LatentKind::Motion, i, &mut rng, &mut observed)?;
            let motion_tids = model.density_tids(&p, LatentKind::Motion);
            let rate_m = rate_on_graph(&mut g, m_tilde, &motion_tids);
            let f_hat = decoder_forward(&mut g, &p, LatentKind::Motion, m_tilde, cfg_b);
            let warped = warp_on_graph(&mut g, pv, f_hat);
            let x_bar = crate::blocks::mcnet_forward(&mut g, &p, warped, pv, f_hat, cfg_b);
            let r = g.sub(codec_in, x_bar);
            let q_raw = encoder_forward(&mut g, &p, LatentKind::Residual, r, cfg_b);
            let q_tilde = noisy_latent(&mut g, q_raw, LatentKind::Residual, i, &mut rng, &mut observed)?;
            let residual_tids = model.density_tids(&p, LatentKind::Residual);
            let rate_q = rate_on_graph(&mut g, q_tilde, &residual_tids);
            let r_hat = decoder_forward(&mut g, &p, LatentKind::Residual, q_tilde, cfg_b);
            let x_rec = g.add(x_bar, r_hat);

            // The cascade's final output and the drift probe.
            let (final_out, drift) = match cfg.order {
                CascadeOrder::DeblurThenCode => {
                    let d = (&codec_in_frame - &blurry).mapv(f64::abs).mean().unwrap();
                    (x_rec, d)
                }
                CascadeOrder::CodeThenDeblur => {
                    let d_rec = venet_forward(&mut g, &p, x_rec, cfg_b);
                    let out = g.add(x_rec, d_rec);
                    let ov = frame_of(&g, out);
                    let rv = frame_of(&g, x_rec);
                    let d = (&ov - &rv).mapv(f64::abs).mean().unwrap();
                    (out, d)
                }
            };
            drift_acc += drift;

            let loss = match cfg.regime {
                CascadeRegime::Joint => {
                    // λ·MSE(final output, sharp) + rates.
                    let d = g.sub(final_out, xx);
                    let sq = g.square(d);
                    let mse = g.mean(sq);
                    let w = g.scale(mse, cfg.lambda);
                    let wr = g.add(w, rate_m);
                    g.add(wr, rate_q)
                }
                CascadeRegime::Intermediate => {
                    // Supervise the hand-off: the deblurred frame toward the
                    // sharp frame, and the codec toward its own input.
                    let (deblur_term, codec_term) = match cfg.order {
                        CascadeOrder::DeblurThenCode => {
                            let d = g.sub(xx, codec_in);
                            let a = g.abs(d);
                            let l1 = g.sum(a);
                            let dd = g.sub(x_rec, codec_in);
                            let sq = g.square(dd);
                            (l1, g.mean(sq))
                        }
                        CascadeOrder::CodeThenDeblur => {
                            let d = g.sub(xx, final_out);
                            let a = g.abs(d);
                            let l1 = g.sum(a);
                            let dd = g.sub(x_rec, bx);
                            let sq = g.square(dd);
                            (l1, g.mean(sq))
                        }
                    };
                    let wd = g.scale(deblur_term, cfg.lambda_d);
                    let wc = g.scale(codec_term, cfg.lambda_c);
                    let s = g.add(wd, wc);
                    let sr = g.add(s, rate_m);
                    g.add(sr, rate_q)
                }
                CascadeRegime::OffTheShelf => unreachable!("rejected above"),
            };
            bits_m_acc += g.scalar(rate_m);
            bits_q_acc += g.scalar(rate_q);
            sample_losses.push(loss);
        }
        let mut total = sample_losses[0];
        for &l in &sample_losses[1..] {
            total = g.add(total, l);
        }
        let total = g.scale(total, 1.0 / run.batch as f64);
        let val = g.scalar(total);
        if !val.is_finite() {
            return Err(Error::Divergence { iteration: i, loss: val });
        }
        let grads = g.backward(total);
        super::apply_gradients(&mut model, &p, &grads, &mut adam, run.lr);
        for (kind, vals) in &observed.per_kind {
            model.update_observed(*kind, vals);
        }
        let nb = run.batch as f64;
        let drift = drift_acc / nb;
        drift_series.push(drift);
        writeln!(
            log,
            "{i},{:.6e},{:.6e},{:.6e},{:.6e}",
            val,
            bits_m_acc / nb,
            bits_q_acc / nb,
            drift
        )
        .map_err(|e| Error::io(&log_path, e))?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(CascadeOutcome { model, log_path, drift: drift_series })
}
