//! End-to-end acceptance checks for the blurry-video codec.
//!
//! Each test prints exactly one `ACCEPTANCE <n>: <what>: PASS|FAIL` line and
//! then asserts, so a failing run still reports every criterion it reached.
//! Criteria 6 and 7 depend on trained models; their artifacts are generated
//! once into `runs/acceptance/` at the workspace root and reused on later
//! runs (delete that directory to retrain from scratch). Setting
//! `BLURVC_ACCEPT_SMOKE=1` switches both to a minutes-long miniature run in
//! `runs/acceptance_smoke/` that exercises the full pipeline without the
//! multi-hour schedule; the quality assertions are only meaningful for the
//! real run.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blurvc::autodiff::check::check_gradients;
use blurvc::autodiff::Graph;
use blurvc::blocks::{
    checkpoint, decoder_forward, encoder_forward, frnet_forward, mcnet_forward, venet_forward,
    BlockConfig, LatentKind, Model, ParamTids,
};
use blurvc::codec::adapters::RAW_ADAPTER_ID;
use blurvc::codec::container::{Container, FrameSections};
use blurvc::codec::{decode_video, encode_video, enhance_frame, CodecMode};
use blurvc::data_synth::{synthesize_clip, toy, window_centers, BlurSynthesisParams};
use blurvc::entropy::coder::{decode_latent, encode_latent, sample_latent};
use blurvc::entropy::{rate_bits, rate_on_graph, DensityId, FactorizedDensity};
use blurvc::eval::{video_msssim, video_psnr};
use blurvc::flow_warp::{warp_on_graph, ConstantFlow, FlowProvider, LucasKanade};
use blurvc::img::{Clip, Frame};
use blurvc::losses::{
    attention_weights, context_aware_loss, distortion_loss, error_map, mcnet_loss, motion_loss,
    ms_ssim, venet_loss, warp_loss, DistortionKind,
};
use blurvc::train::cascade::{
    cascade_encode_video, pretrain_deblurrer, train_cascade, CascadeConfig, CascadeOrder,
    CascadeRegime, CascadeRunConfig, Deblurrer, LearnedDeblurrer,
};
use blurvc::train::{run_training, ScheduleConfig, TrainOptions};
use blurvc::Result;

// ---------------------------------------------------------------------------
// Pinned tolerances and budgets
// ---------------------------------------------------------------------------

/// Criterion 1: number of random latents to code, and the size bound
/// `estimate <= coded bits <= RATE_FACTOR * estimate + RATE_SLACK_BITS`.
const C1_TRIALS: usize = 1000;
const C1_RATE_FACTOR: f64 = 1.02;
const C1_RATE_SLACK_BITS: f64 = 32.0;
const C1_MAX_SECONDS: f64 = 60.0;

/// Criterion 2: maximum relative error between analytic gradients and
/// central finite differences, and the wall-clock budget.
const C2_MAX_REL_ERR: f64 = 1e-4;
const C2_MAX_SECONDS: f64 = 300.0;
const C2_FD_STEP_SCALE: f64 = 1e-4;

/// Criterion 3: attention weights must not depend on the rank scale, and the
/// context-aware loss with all-ones weights must equal the plain warp loss.
const C3_RANK_SCALES: [f64; 4] = [0.5, 1.0, 7.0, 100.0];
const C3_SCALE_INVARIANCE: f64 = 1e-12;
const C3_ALL_ONES_MATCH: f64 = 1e-9;

/// Criterion 4: frames to push through the bitstream round trip.
const C4_FRAMES: usize = 100;

/// Criterion 5: synthesis configurations (`n` averaged frames, `m` skipped),
/// all with decimation factor 10, checked against a per-pixel mean oracle.
const C5_CONFIGS: [(usize, usize); 3] = [(5, 5), (7, 3), (9, 1)];
const C5_HFR_FPS: f64 = 240.0;
const C5_LFR_FPS: f64 = 24.0;

/// Criterion 6: enhancement gain, rate bounds, and the training budget.
const C6_MIN_GAIN_DB: f64 = 0.5;
const C6_MAX_BPP: f64 = 24.0;
const C6_LOSSLESS_FACTOR: f64 = 5.0;
const C6_MAX_TRAIN_SECONDS: f64 = 8.0 * 3600.0;

/// Criterion 7: the jointly trained deblurrer must collapse (its drift away
/// from identity shrinking below this fraction of the starting drift), and
/// the intermediate-loss cascade must win the rate-distortion comparison.
const C7_DRIFT_DECAY: f64 = 0.75;

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn report(n: u32, what: &str, ok: bool) {
    println!("ACCEPTANCE {n}: {what}: {}", if ok { "PASS" } else { "FAIL" });
}

fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Frame {
    Array3::from_shape_fn((3, h, w), |_| rng.gen_range(lo..hi))
}

/// Bit distance between two finite non-negative doubles (0 means identical).
fn ulp_distance(a: f64, b: f64) -> u64 {
    assert!(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite());
    a.to_bits().abs_diff(b.to_bits())
}

// ---------------------------------------------------------------------------
// Criterion 1: entropy-coder size bound and lossless round trip
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_coder_size_tracks_rate_estimate() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20260819);

    // Four densities with widened observed ranges so the supports (and the
    // sampled symbols) span more than the initial few bins.
    let densities: Vec<FactorizedDensity> = (0..4)
        .map(|i| {
            let channels = 2 + i;
            let mut d = FactorizedDensity::new(channels, 40 + i as u64);
            let spread = 3.0 + 2.0 * i as f64;
            let wide = ArrayD::from_shape_fn(IxDyn(&[channels, 1, 8]), |ix| {
                (ix[2] as f64 - 3.5) / 3.5 * spread
            });
            d.update_observed(&wide.mapv(f64::round));
            d
        })
        .collect();

    let mut ok = true;
    let mut worst = (0.0f64, 0usize);
    for t in 0..C1_TRIALS {
        let di = t % densities.len();
        let d = &densities[di];
        let shape = [d.channels(), rng.gen_range(1..=6), rng.gen_range(1..=6)];
        let latent = sample_latent(d, shape, DensityId(di as u32), &mut rng);

        let bytes = encode_latent(&latent, d).expect("encode failed");
        let back = decode_latent(&bytes, shape, d, DensityId(di as u32)).expect("decode failed");
        if back.values != latent.values {
            ok = false;
        }

        let (estimate, overflow) = rate_bits(&latent, d);
        assert_eq!(overflow, 0, "sampled symbols must stay inside the support");
        let actual = (bytes.len() * 8) as f64;
        let upper = C1_RATE_FACTOR * estimate + C1_RATE_SLACK_BITS;
        if actual < estimate - 1e-9 || actual > upper {
            ok = false;
        }
        let ratio = actual / estimate.max(1.0);
        if ratio > worst.0 {
            worst = (ratio, t);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let in_budget = secs < C1_MAX_SECONDS;

    report(1, "coded size within [1.00, 1.02x + 32 bits] of the rate estimate, lossless", ok && in_budget);
    assert!(ok, "size bound or round trip failed (worst actual/estimate {:.4} at trial {})", worst.0, worst.1);
    assert!(in_budget, "coding {C1_TRIALS} latents took {secs:.1}s, budget {C1_MAX_SECONDS}s");
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic gradients match finite differences
// ---------------------------------------------------------------------------

/// Every stage loss, every network block, both coding rates, and the warp,
/// composed exactly as one training step builds them (identity quantization
/// replaces the additive-noise proxy: the noise enters the graph as a
/// constant, so dropping it leaves the differentiated structure unchanged).
fn full_pipeline_fd_report() -> (f64, usize) {
    let cfg = BlockConfig::tiny();
    let mut model = Model::new(cfg.clone(), 9);
    let (h, w) = (16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // Several layers (decoder heads, biases) initialize to exactly zero, a
    // degenerate point for finite differences: zero decoded flow parks every
    // warp sample on the corner of its bilinear cell. Nudge all parameters
    // to a generic point first; derivatives are only comparable where the
    // objective is locally smooth.
    for (_, arr) in model.store.iter_mut() {
        arr.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
    }

    let sharp = random_frame(&mut rng, h, w, 0.2, 0.8);
    let blurry = random_frame(&mut rng, h, w, 0.2, 0.8);
    let previous = random_frame(&mut rng, h, w, 0.2, 0.8);
    let init_flow = Array3::from_shape_fn((2, h, w), |_| rng.gen_range(-0.7..0.7));

    // Attention weights are rank-based and gradient-stopped during training,
    // so they enter the objective as constants: compute them once from the
    // unperturbed forward pass and keep them fixed across probes.
    let weights = {
        let mut g = Graph::new();
        let p = model.store.inject(&mut g);
        let bx = g.constant(blurry.clone().into_dyn());
        let b = venet_forward(&mut g, &p, bx, &cfg);
        let u = encoder_forward(&mut g, &p, LatentKind::Blur, b, &cfg);
        let b_hat = decoder_forward(&mut g, &p, LatentKind::Blur, u, &cfg);
        let enhanced = g.add(bx, b_hat);
        let enh = g.value3(enhanced);
        let e = error_map(&enh, &sharp.view(), 4, 1.0).expect("error map");
        attention_weights(&e)
    };

    let names: Vec<String> = model.store.names().cloned().collect();
    let mut inputs: Vec<ArrayD<f64>> = vec![
        sharp.clone().into_dyn(),
        blurry.clone().into_dyn(),
        previous.clone().into_dyn(),
    ];
    for n in &names {
        inputs.push(model.store.get(n).clone());
    }

    let lambda_e = 0.7;
    let lambda_d = 0.9;
    let lambda_i = 0.8;
    let report = check_gradients(&inputs, 3, C2_FD_STEP_SCALE, 4242, &mut |g, tids| {
        let (xx, bx, pv) = (tids[0], tids[1], tids[2]);
        let p = ParamTids::from_pairs(
            names.iter().cloned().zip(tids[3..].iter().copied()),
        );

        // Enhancement.
        let b = venet_forward(g, &p, bx, &cfg);
        let u = encoder_forward(g, &p, LatentKind::Blur, b, &cfg);
        let blur_tids = model.density_tids(&p, LatentKind::Blur);
        let rate_u = rate_on_graph(g, u, &blur_tids);
        let b_hat = decoder_forward(g, &p, LatentKind::Blur, u, &cfg);
        let enhanced = g.add(bx, b_hat);
        let l_venet = venet_loss(g, xx, bx, b, enhanced, rate_u, lambda_e).expect("venet loss");

        // Motion: fixed classical flow plus learned refinement, coded.
        let fi = g.constant(init_flow.clone().into_dyn());
        let f_r = frnet_forward(g, &p, enhanced, pv, fi, &cfg);
        let f = g.add(fi, f_r);
        let m = encoder_forward(g, &p, LatentKind::Motion, f, &cfg);
        let motion_tids = model.density_tids(&p, LatentKind::Motion);
        let rate_m = rate_on_graph(g, m, &motion_tids);
        let f_dec = decoder_forward(g, &p, LatentKind::Motion, m, &cfg);
        // Keep the probed sampling positions a fixed fraction of a pixel away
        // from the bilinear corners, where the warp is not differentiable.
        let f_hat = g.offset(f_dec, 0.37);
        let cal = context_aware_loss(g, enhanced, pv, f_hat, &weights).expect("context loss");
        let l_motion = motion_loss(g, cal, rate_m, lambda_d).expect("motion loss");

        // Compensation.
        let warped = warp_on_graph(g, pv, f_hat);
        let x_bar = mcnet_forward(g, &p, warped, pv, f_hat, &cfg);
        let l_mc = mcnet_loss(g, x_bar, enhanced, rate_m, lambda_d).expect("mcnet loss");

        // Residual coding and the final rate-distortion objective.
        let r = g.sub(enhanced, x_bar);
        let q = encoder_forward(g, &p, LatentKind::Residual, r, &cfg);
        let residual_tids = model.density_tids(&p, LatentKind::Residual);
        let rate_q = rate_on_graph(g, q, &residual_tids);
        let r_hat = decoder_forward(g, &p, LatentKind::Residual, q, &cfg);
        let x_rec = g.add(x_bar, r_hat);
        let l_d = distortion_loss(g, x_rec, enhanced, rate_m, rate_q, lambda_d, DistortionKind::Mse)
            .expect("distortion loss");

        // Intra autoencoder, trained on its own reconstruction objective.
        let yi = encoder_forward(g, &p, LatentKind::Intra, bx, &cfg);
        let intra_tids = model.density_tids(&p, LatentKind::Intra);
        let rate_i = rate_on_graph(g, yi, &intra_tids);
        let xi = decoder_forward(g, &p, LatentKind::Intra, yi, &cfg);
        let di = g.sub(xi, bx);
        let sq = g.square(di);
        let mi = g.mean(sq);
        let mi_w = g.scale(mi, lambda_i);
        let l_i = g.add(mi_w, rate_i);

        let s1 = g.add(l_venet, l_motion);
        let s2 = g.add(s1, l_mc);
        let s3 = g.add(s2, l_d);
        let total = g.add(s3, l_i);
        // The rate terms put the objective in the thousands of bits; scale
        // down so central-difference roundoff (~eps * |f| / h) stays well
        // below the comparison floor. Gradient correctness is scale-free.
        g.scale(total, 1e-3)
    });
    if let Some((input, coord, analytic, numeric)) = report.worst {
        let label = if input < 3 {
            ["sharp", "blurry", "previous"][input].to_string()
        } else {
            names[input - 3].clone()
        };
        eprintln!(
            "  worst: {label}[{coord}] analytic {analytic:.6e} vs numeric {numeric:.6e}"
        );
    }
    (report.max_rel_err, report.checked)
}

fn msssim_fd_report() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let x = random_frame(&mut rng, 16, 16, 0.2, 0.8).into_dyn();
    let y = random_frame(&mut rng, 16, 16, 0.2, 0.8).into_dyn();
    check_gradients(&[x, y], 12, C2_FD_STEP_SCALE, 4343, &mut |g, tids| {
        ms_ssim(g, tids[0], tids[1]).expect("ms-ssim")
    })
    .max_rel_err
}

fn warp_fd_report() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let source = random_frame(&mut rng, 8, 8, 0.1, 0.9).into_dyn();
    let flow = Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(-0.6..0.6)).into_dyn();
    check_gradients(&[source, flow], 16, C2_FD_STEP_SCALE, 4444, &mut |g, tids| {
        let warped = warp_on_graph(g, tids[0], tids[1]);
        let sq = g.square(warped);
        g.mean(sq)
    })
    .max_rel_err
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let started = Instant::now();
    let (pipeline_err, checked) = full_pipeline_fd_report();
    let msssim_err = msssim_fd_report();
    let warp_err = warp_fd_report();
    let secs = started.elapsed().as_secs_f64();

    let worst = pipeline_err.max(msssim_err).max(warp_err);
    let ok = worst <= C2_MAX_REL_ERR && secs < C2_MAX_SECONDS;
    report(2, "analytic gradients match finite differences to 1e-4", ok);
    println!(
        "  pipeline {:.3e} ({checked} coords), ms-ssim {:.3e}, warp {:.3e}, {:.1}s",
        pipeline_err, msssim_err, warp_err, secs
    );
    assert!(pipeline_err <= C2_MAX_REL_ERR, "pipeline rel err {pipeline_err:.3e}");
    assert!(msssim_err <= C2_MAX_REL_ERR, "ms-ssim rel err {msssim_err:.3e}");
    assert!(warp_err <= C2_MAX_REL_ERR, "warp rel err {warp_err:.3e}");
    assert!(secs < C2_MAX_SECONDS, "gradient checks took {secs:.1}s, budget {C2_MAX_SECONDS}s");
}

// ---------------------------------------------------------------------------
// Criterion 3: attention-weight invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_attention_weights_are_scale_invariant_and_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let current = random_frame(&mut rng, 24, 24, 0.0, 1.0);
    let reference = random_frame(&mut rng, 24, 24, 0.0, 1.0);

    let base = attention_weights(&error_map(&current.view(), &reference.view(), 4, 1.0).unwrap());
    let mut scale_invariant = true;
    for v in C3_RANK_SCALES {
        let e = error_map(&current.view(), &reference.view(), 4, v).unwrap();
        let w = attention_weights(&e);
        let max_dev = w
            .iter()
            .zip(base.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if max_dev > C3_SCALE_INVARIANCE {
            scale_invariant = false;
        }
    }

    let min = base.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let non_constant = base.iter().any(|&v| v != base[[0, 0]]);
    let normalized = min == 0.0 && max == 1.0 && non_constant;

    // With all-ones weights the context-aware objective must reduce exactly
    // to the unweighted warp loss.
    let mut g = Graph::new();
    let c = g.constant(current.clone().into_dyn());
    let p = g.constant(reference.clone().into_dyn());
    let flow = Array3::from_shape_fn((2, 24, 24), |_| rng.gen_range(-1.5..1.5));
    let f = g.constant(flow.into_dyn());
    let ones = Array2::<f64>::ones((24, 24));
    let cal = context_aware_loss(&mut g, c, p, f, &ones).unwrap();
    let plain = warp_loss(&mut g, c, p, f).unwrap();
    let diff = (g.scalar(cal) - g.scalar(plain)).abs();
    let ones_match = diff <= C3_ALL_ONES_MATCH;

    let ok = scale_invariant && normalized && ones_match;
    report(3, "attention weights scale-invariant, in [0,1], all-ones reduces to warp loss", ok);
    assert!(scale_invariant, "weights changed under rank-scale change");
    assert!(normalized, "weights min {min}, max {max}, non-constant {non_constant}");
    assert!(ones_match, "all-ones context loss differs from warp loss by {diff:.3e}");
}

// ---------------------------------------------------------------------------
// Criterion 4: bitstream round trip
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_bitstream_round_trip_is_bit_exact() {
    let cfg = BlockConfig::tiny();
    let model = Model::new(cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let provider = ConstantFlow { dx: 0.25, dy: -0.5 };

    let frames: Vec<Frame> = (0..C4_FRAMES).map(|_| random_frame(&mut rng, 32, 32, 0.0, 1.0)).collect();
    let clip = Clip::new(frames, 24.0);

    let enc = encode_video(&model, &clip, CodecMode::Enhance, 12, RAW_ADAPTER_ID, &provider)
        .expect("encode");
    enc.container.validate().expect("container must validate");

    // Decoder output must equal the encoder's own reconstructions bit for bit.
    let dec = decode_video(&model, &enc.container).expect("decode");
    assert_eq!(dec.len(), C4_FRAMES);
    let mut bit_exact = true;
    for (a, b) in dec.iter().zip(enc.reconstructions.iter()) {
        if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            bit_exact = false;
        }
    }

    // Serialized container survives a write/read/write cycle unchanged.
    let mut bytes = Vec::new();
    enc.container.write_to(&mut bytes).expect("serialize");
    let reread = Container::read_from(&mut bytes.as_slice()).expect("parse");
    reread.validate().expect("reparsed container must validate");
    let mut bytes2 = Vec::new();
    reread.write_to(&mut bytes2).expect("reserialize");
    let container_stable = bytes == bytes2;

    // Preserve mode: no blur-residual bits on the wire, same closed loop.
    let pframes: Vec<Frame> = (0..20).map(|_| random_frame(&mut rng, 32, 32, 0.0, 1.0)).collect();
    let pclip = Clip::new(pframes, 24.0);
    let penc = encode_video(&model, &pclip, CodecMode::Preserve, 10, RAW_ADAPTER_ID, &provider)
        .expect("encode preserve");
    penc.container.validate().expect("preserve container must validate");
    let pdec = decode_video(&model, &penc.container).expect("decode preserve");
    let preserve_exact = pdec
        .iter()
        .zip(penc.reconstructions.iter())
        .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let blur_sections_empty = penc.container.frames.iter().all(|s| match s {
        FrameSections::Intra { .. } => true,
        FrameSections::Predicted { blur, .. } => blur.is_empty(),
    });

    let ok = bit_exact && container_stable && preserve_exact && blur_sections_empty;
    report(4, "100-frame encode/decode bit-exact, container validates and reserializes", ok);
    assert!(bit_exact, "decoder output differs from encoder reconstruction");
    assert!(container_stable, "container bytes changed across a read/write cycle");
    assert!(preserve_exact, "preserve-mode decode differs from encoder reconstruction");
    assert!(blur_sections_empty, "preserve-mode frames must carry no blur bits");
}

// ---------------------------------------------------------------------------
// Criterion 5: blur synthesis matches a per-pixel mean oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_blur_synthesis_matches_mean_oracle() {
    let mut ok = true;
    for (n, m) in C5_CONFIGS {
        let kappa = n + m;
        assert_eq!(kappa, 10, "all configurations decimate by 10");
        let hfr = toy::generate_hfr_clip(500 + n as u64, 3 * kappa + n, 24, 16, C5_HFR_FPS);
        let params = BlurSynthesisParams::new(n, m).unwrap();
        let (blurry, sharp) = synthesize_clip(&hfr, &params).unwrap();

        // Oracle: centers lie on the stride grid `kappa * t`, kept when the
        // full window `[c - half, c + half]` fits in the clip; each blurry
        // frame is that window's per-pixel mean and each sharp frame is the
        // center frame, untouched.
        let half = (n - 1) / 2;
        let expected_centers: Vec<usize> =
            (0..hfr.len()).step_by(kappa).filter(|&c| c >= half && c + half < hfr.len()).collect();
        let centers = window_centers(hfr.len(), &params);
        assert_eq!(centers, expected_centers, "window center positions");
        assert_eq!(blurry.len(), centers.len());
        assert!(blurry.len() >= 3, "need at least three windows");
        for (j, (bf, sf)) in blurry.frames.iter().zip(sharp.frames.iter()).enumerate() {
            let start = centers[j] - half;
            let mut mean = Array3::<f64>::zeros(bf.raw_dim());
            for t in start..start + n {
                mean = mean + &hfr.frames[t];
            }
            mean.mapv_inplace(|v| v / n as f64);
            let worst_ulp = bf
                .iter()
                .zip(mean.iter())
                .map(|(&a, &b)| ulp_distance(a, b))
                .max()
                .unwrap();
            if worst_ulp > 1 {
                ok = false;
            }
            if sf != &hfr.frames[centers[j]] {
                ok = false;
            }
        }
        if blurry.fps != C5_LFR_FPS || sharp.fps != C5_LFR_FPS {
            ok = false;
        }
    }
    report(5, "synthesized blur equals per-pixel window mean to 1 ulp, 240 fps -> 24 fps", ok);
    assert!(ok, "blur synthesis deviates from the windowed-mean oracle");
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7: trained-model artifacts
// ---------------------------------------------------------------------------

mod artifacts {
    use super::*;
    use serde::{Deserialize, Serialize};
    use std::fs;

    pub const LAMBDA_LOW: f64 = 1.0e5;
    pub const LAMBDA_HIGH: f64 = 4.0e6;
    /// Weight of the squared error in both cascade training and the
    /// rate-distortion comparison `J = bpp + lambda * mse / pixels`.
    pub const CASCADE_LAMBDA: f64 = 1.0e5;
    /// Deblur-fidelity weight of the intermediate-loss cascade; matches the
    /// floor the staged schedule puts on the enhancement weight.
    pub const CASCADE_LAMBDA_D: f64 = 2.5e4;
    pub const MODEL_SEED: u64 = 7;

    #[derive(Serialize, Deserialize, Clone, Copy)]
    pub struct RunMetrics {
        pub lambda_d: f64,
        /// Mean PSNR of the (uncoded) enhanced frames against the sharp
        /// ground truth, and of the blurry input against the same.
        pub psnr_enhanced_vs_sharp: f64,
        pub psnr_blurry_vs_sharp: f64,
        pub enhance_bpp: f64,
        pub enhance_psnr: f64,
        pub enhance_msssim: f64,
        /// All-intra raw (8-bit) coding of the enhanced frames.
        pub lossless_bpp: f64,
        pub preserve_bpp: f64,
        pub preserve_psnr_vs_blurry: f64,
        pub preserve_psnr_vs_sharp: f64,
    }

    #[derive(Serialize, Deserialize, Clone, Copy)]
    pub struct CascadeMetrics {
        pub drift_start: f64,
        pub drift_end: f64,
        pub bpp: f64,
        pub mse: f64,
        pub lagrangian: f64,
    }

    #[derive(Serialize, Deserialize, Clone, Copy)]
    pub struct AcceptanceMetrics {
        pub run_low: RunMetrics,
        pub run_high: RunMetrics,
        pub joint: CascadeMetrics,
        pub intermediate: CascadeMetrics,
        pub total_wall_seconds: f64,
    }

    #[derive(Serialize, Deserialize, Clone, Copy, Default)]
    struct DriftSummary {
        drift_start: f64,
        drift_end: f64,
    }

    fn smoke() -> bool {
        std::env::var("BLURVC_ACCEPT_SMOKE").is_ok()
    }

    fn root_dir() -> PathBuf {
        let name = if smoke() { "acceptance_smoke" } else { "acceptance" };
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join("runs").join(name)
    }

    fn schedule() -> ScheduleConfig {
        if smoke() {
            ScheduleConfig {
                a: 6,
                b: 12,
                c: 18,
                max_iter: 40,
                lr: 1e-4,
                lr_decay_points: vec![20, 32],
                s0: 1.0,
                s_step: 0.25,
                s_every: 8,
                s_floor: 0.25,
                batch: 2,
                crop: 64,
                seed: 1,
            }
        } else {
            ScheduleConfig::desk()
        }
    }

    fn gop() -> u16 {
        if smoke() { 4 } else { 16 }
    }

    fn make_corpus(count: usize, seed0: u64, lfr_frames: usize) -> Vec<(Clip, Clip)> {
        let params = BlurSynthesisParams::new(3, 1).unwrap();
        (0..count)
            .map(|i| {
                let hfr_len = (lfr_frames - 1) * 4 + 3;
                let hfr = toy::generate_hfr_clip(seed0 + i as u64, hfr_len, 64, 64, 96.0);
                synthesize_clip(&hfr, &params).unwrap()
            })
            .collect()
    }

    fn train_corpus() -> Vec<(Clip, Clip)> {
        if smoke() { make_corpus(3, 300, 5) } else { make_corpus(12, 300, 9) }
    }

    fn eval_corpus() -> Vec<(Clip, Clip)> {
        if smoke() { make_corpus(2, 900, 5) } else { make_corpus(4, 900, 17) }
    }

    // ------------------------------------------------------------------
    // Stage bookkeeping: each heavy stage persists its outputs and its wall
    // time, so interrupted generations resume where they stopped.
    // ------------------------------------------------------------------

    struct Stages {
        dir: PathBuf,
        times: BTreeMap<String, f64>,
    }

    impl Stages {
        fn open() -> Stages {
            let dir = root_dir();
            fs::create_dir_all(&dir).expect("create artifact dir");
            let times = fs::read_to_string(dir.join("stage_times.json"))
                .ok()
                .and_then(|s| serde_json::from_str(&s).ok())
                .unwrap_or_default();
            Stages { dir, times }
        }

        fn record(&mut self, stage: &str, secs: f64) {
            self.times.insert(stage.to_string(), secs);
            let body = serde_json::to_string_pretty(&self.times).unwrap();
            fs::write(self.dir.join("stage_times.json"), body).expect("write stage times");
        }

        fn total_seconds(&self) -> f64 {
            self.times.values().sum()
        }
    }

    fn ensure_model(stages: &mut Stages, tag: &str, lambda_d: f64) -> Model {
        let dir = stages.dir.join(tag);
        let ckpt = dir.join("ckpt_final.bvck");
        if ckpt.exists() {
            return checkpoint::load(&ckpt).expect("load trained model");
        }
        eprintln!("[artifacts] training {tag} (lambda_d = {lambda_d:.1e})");
        let started = Instant::now();
        let corpus = train_corpus();
        let opts = TrainOptions {
            schedule: schedule(),
            lambda_d,
            distortion: DistortionKind::Mse,
            pool_k: 8,
            rank_scale: 1.0,
            model_seed: MODEL_SEED,
        };
        let outcome = run_training(&corpus, &BlockConfig::desk(), &opts, &LucasKanade::default(), &dir)
            .expect("training run");
        stages.record(tag, started.elapsed().as_secs_f64());
        outcome.model
    }

    fn ensure_pretrained(stages: &mut Stages) -> Model {
        let path = stages.dir.join("cascade").join("pretrained.bvck");
        if path.exists() {
            return checkpoint::load(&path).expect("load pretrained deblurrer");
        }
        eprintln!("[artifacts] pretraining the cascade deblurrer");
        let started = Instant::now();
        fs::create_dir_all(path.parent().unwrap()).expect("create cascade dir");
        let corpus = train_corpus();
        let mut model = Model::new(BlockConfig::desk(), MODEL_SEED);
        let run = CascadeRunConfig {
            iters: if smoke() { 10 } else { 1500 },
            lr: 1e-4,
            batch: 2,
            crop: 64,
            seed: 11,
        };
        pretrain_deblurrer(&corpus, &mut model, &run).expect("deblurrer pretraining");
        checkpoint::save(&model, &path).expect("save pretrained deblurrer");
        stages.record("cascade_pretrain", started.elapsed().as_secs_f64());
        model
    }

    fn ensure_cascade(
        stages: &mut Stages,
        pretrained: &Model,
        regime: CascadeRegime,
        tag: &str,
        seed: u64,
    ) -> (Model, DriftSummary) {
        let dir = stages.dir.join("cascade").join(tag);
        let model_path = dir.join("model.bvck");
        let summary_path = dir.join("summary.json");
        if model_path.exists() && summary_path.exists() {
            let model = checkpoint::load(&model_path).expect("load cascade model");
            let summary = serde_json::from_str(&fs::read_to_string(&summary_path).unwrap())
                .expect("parse cascade summary");
            return (model, summary);
        }
        eprintln!("[artifacts] training {tag} cascade");
        let started = Instant::now();
        let corpus = train_corpus();
        let cfg = CascadeConfig {
            order: CascadeOrder::DeblurThenCode,
            regime,
            lambda_d: CASCADE_LAMBDA_D,
            lambda_c: CASCADE_LAMBDA,
            lambda: CASCADE_LAMBDA,
        };
        let run = CascadeRunConfig {
            iters: if smoke() { 15 } else { 2500 },
            lr: 1e-4,
            batch: 2,
            crop: 64,
            seed,
        };
        let outcome = train_cascade(&corpus, pretrained.clone(), &cfg, &run, &LucasKanade::default(), &dir)
            .expect("cascade training");
        let window = (outcome.drift.len() / 25).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let summary = DriftSummary {
            drift_start: mean(&outcome.drift[..window]),
            drift_end: mean(&outcome.drift[outcome.drift.len() - window..]),
        };
        checkpoint::save(&outcome.model, &model_path).expect("save cascade model");
        fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap())
            .expect("write cascade summary");
        stages.record(&format!("cascade_{tag}"), started.elapsed().as_secs_f64());
        (outcome.model, summary)
    }

    fn clip_mse(a: &[Frame], b: &[Frame]) -> f64 {
        let total: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| {
                let d = x - y;
                d.mapv(|v| v * v).mean().unwrap()
            })
            .sum();
        total / a.len() as f64
    }

    fn eval_run(model: &Model, corpus: &[(Clip, Clip)], lambda_d: f64) -> RunMetrics {
        let provider = LucasKanade::default();
        let n = corpus.len() as f64;
        let mut m = RunMetrics {
            lambda_d,
            psnr_enhanced_vs_sharp: 0.0,
            psnr_blurry_vs_sharp: 0.0,
            enhance_bpp: 0.0,
            enhance_psnr: 0.0,
            enhance_msssim: 0.0,
            lossless_bpp: 0.0,
            preserve_bpp: 0.0,
            preserve_psnr_vs_blurry: 0.0,
            preserve_psnr_vs_sharp: 0.0,
        };
        for (blurry, sharp) in corpus {
            let enhanced: Vec<Frame> = blurry
                .frames
                .iter()
                .map(|f| enhance_frame(model, f).expect("enhance"))
                .collect();
            m.psnr_enhanced_vs_sharp += video_psnr(&enhanced, &sharp.frames).unwrap() / n;
            m.psnr_blurry_vs_sharp += video_psnr(&blurry.frames, &sharp.frames).unwrap() / n;

            let enc = encode_video(model, blurry, CodecMode::Enhance, gop(), RAW_ADAPTER_ID, &provider)
                .expect("enhance encode");
            m.enhance_bpp += enc.container.bpp() / n;
            m.enhance_psnr += video_psnr(&enc.reconstructions, &sharp.frames).unwrap() / n;
            m.enhance_msssim += video_msssim(&enc.reconstructions, &sharp.frames).unwrap() / n;

            // Rate reference: the same enhanced frames stored losslessly on
            // the 8-bit grid (all-intra raw adapter).
            let clamped: Vec<Frame> = enhanced.iter().map(|f| f.mapv(|v| v.clamp(0.0, 1.0))).collect();
            let lossless_clip = Clip::new(clamped, blurry.fps);
            let lossless =
                encode_video(model, &lossless_clip, CodecMode::Enhance, 1, RAW_ADAPTER_ID, &provider)
                    .expect("all-intra encode");
            m.lossless_bpp += lossless.container.bpp() / n;

            let pres = encode_video(model, blurry, CodecMode::Preserve, gop(), RAW_ADAPTER_ID, &provider)
                .expect("preserve encode");
            m.preserve_bpp += pres.container.bpp() / n;
            m.preserve_psnr_vs_blurry += video_psnr(&pres.reconstructions, &blurry.frames).unwrap() / n;
            m.preserve_psnr_vs_sharp += video_psnr(&pres.reconstructions, &sharp.frames).unwrap() / n;
        }
        m
    }

    fn eval_cascade(model: &Model, corpus: &[(Clip, Clip)], drift: DriftSummary) -> CascadeMetrics {
        let provider = LucasKanade::default();
        let deblurrer = LearnedDeblurrer { model };
        let n = corpus.len() as f64;
        let (mut bpp, mut mse, mut pixels) = (0.0, 0.0, 0.0);
        for (blurry, sharp) in corpus {
            let (enc, finals) = cascade_encode_video(
                model,
                &deblurrer as &dyn Deblurrer,
                CascadeOrder::DeblurThenCode,
                blurry,
                gop(),
                RAW_ADAPTER_ID,
                &provider,
            )
            .expect("cascade encode");
            bpp += enc.container.bpp() / n;
            mse += clip_mse(&finals, &sharp.frames) / n;
            let (h, w) = blurry.dims();
            pixels = (h * w) as f64;
        }
        CascadeMetrics {
            drift_start: drift.drift_start,
            drift_end: drift.drift_end,
            bpp,
            mse,
            lagrangian: bpp + CASCADE_LAMBDA * mse / pixels,
        }
    }

    fn generate() -> AcceptanceMetrics {
        let mut stages = Stages::open();
        let metrics_path = stages.dir.join("metrics.json");
        if let Ok(body) = fs::read_to_string(&metrics_path) {
            if let Ok(m) = serde_json::from_str::<AcceptanceMetrics>(&body) {
                return m;
            }
        }

        let low = ensure_model(&mut stages, "run_lambda_low", LAMBDA_LOW);
        let high = ensure_model(&mut stages, "run_lambda_high", LAMBDA_HIGH);
        let pretrained = ensure_pretrained(&mut stages);
        let (joint_model, joint_drift) =
            ensure_cascade(&mut stages, &pretrained, CascadeRegime::Joint, "joint", 12);
        let (inter_model, inter_drift) =
            ensure_cascade(&mut stages, &pretrained, CascadeRegime::Intermediate, "intermediate", 13);

        eprintln!("[artifacts] measuring on the held-out clips");
        let started = Instant::now();
        let corpus = eval_corpus();
        let metrics = AcceptanceMetrics {
            run_low: eval_run(&low, &corpus, LAMBDA_LOW),
            run_high: eval_run(&high, &corpus, LAMBDA_HIGH),
            joint: eval_cascade(&joint_model, &corpus, joint_drift),
            intermediate: eval_cascade(&inter_model, &corpus, inter_drift),
            total_wall_seconds: 0.0,
        };
        stages.record("evaluation", started.elapsed().as_secs_f64());
        let metrics = AcceptanceMetrics { total_wall_seconds: stages.total_seconds(), ..metrics };

        let tmp = metrics_path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&metrics).unwrap()).expect("write metrics");
        fs::rename(&tmp, &metrics_path).expect("publish metrics");
        metrics
    }

    pub fn get() -> &'static AcceptanceMetrics {
        static METRICS: OnceLock<AcceptanceMetrics> = OnceLock::new();
        METRICS.get_or_init(generate)
    }
}

#[test]
fn criterion_6_training_improves_quality_within_rate_and_time_budgets() {
    let m = artifacts::get();
    let (lo, hi) = (&m.run_low, &m.run_high);

    let gain_lo = lo.psnr_enhanced_vs_sharp - lo.psnr_blurry_vs_sharp;
    let gain_hi = hi.psnr_enhanced_vs_sharp - hi.psnr_blurry_vs_sharp;
    let a = gain_lo >= C6_MIN_GAIN_DB && gain_hi >= C6_MIN_GAIN_DB;

    let under_rate = |r: &artifacts::RunMetrics| {
        r.enhance_bpp < C6_MAX_BPP && r.enhance_bpp <= r.lossless_bpp / C6_LOSSLESS_FACTOR
    };
    let b = under_rate(lo) && under_rate(hi);

    let c = hi.enhance_psnr > lo.enhance_psnr && hi.enhance_bpp > lo.enhance_bpp;

    let d = lo.preserve_psnr_vs_blurry > lo.preserve_psnr_vs_sharp
        && hi.preserve_psnr_vs_blurry > hi.preserve_psnr_vs_sharp;

    let budget = m.total_wall_seconds <= C6_MAX_TRAIN_SECONDS;

    let ok = a && b && c && d && budget;
    report(6, "trained codec gains >= 0.5 dB under rate and wall-clock budgets", ok);
    println!(
        "  gain {:.2}/{:.2} dB | bpp {:.2}/{:.2} (lossless {:.2}/{:.2}) | coded psnr {:.2}/{:.2} dB | preserve {:.2}>{:.2} / {:.2}>{:.2} dB | {:.0}s",
        gain_lo, gain_hi, lo.enhance_bpp, hi.enhance_bpp, lo.lossless_bpp, hi.lossless_bpp,
        lo.enhance_psnr, hi.enhance_psnr,
        lo.preserve_psnr_vs_blurry, lo.preserve_psnr_vs_sharp,
        hi.preserve_psnr_vs_blurry, hi.preserve_psnr_vs_sharp,
        m.total_wall_seconds
    );
    assert!(a, "enhancement gain below {C6_MIN_GAIN_DB} dB: low {gain_lo:.3}, high {gain_hi:.3}");
    assert!(b, "rate bound failed: low {:.3} bpp (lossless {:.3}), high {:.3} bpp (lossless {:.3})",
        lo.enhance_bpp, lo.lossless_bpp, hi.enhance_bpp, hi.lossless_bpp);
    assert!(c, "rate-distortion ordering failed: psnr {:.3} vs {:.3}, bpp {:.4} vs {:.4}",
        hi.enhance_psnr, lo.enhance_psnr, hi.enhance_bpp, lo.enhance_bpp);
    assert!(d, "preserve mode should track the blurry input, not the sharp truth");
    assert!(budget, "artifact generation took {:.0}s, budget {C6_MAX_TRAIN_SECONDS}s", m.total_wall_seconds);
}

#[test]
fn criterion_7_joint_cascade_collapses_and_loses_to_intermediate_loss() {
    let m = artifacts::get();
    let collapse = m.joint.drift_end < C7_DRIFT_DECAY * m.joint.drift_start;
    let ordering = m.intermediate.lagrangian < m.joint.lagrangian;

    let ok = collapse && ordering;
    report(7, "jointly trained deblurrer collapses toward identity and loses the RD comparison", ok);
    println!(
        "  joint drift {:.5} -> {:.5} | J(joint) {:.4} vs J(intermediate) {:.4} (bpp {:.3}/{:.3}, mse {:.5}/{:.5})",
        m.joint.drift_start, m.joint.drift_end, m.joint.lagrangian, m.intermediate.lagrangian,
        m.joint.bpp, m.intermediate.bpp, m.joint.mse, m.intermediate.mse
    );
    assert!(collapse, "joint deblur drift {:.6} -> {:.6} did not decay below {C7_DRIFT_DECAY}x",
        m.joint.drift_start, m.joint.drift_end);
    assert!(ordering, "intermediate-loss cascade should beat the joint cascade: J {:.4} vs {:.4}",
        m.intermediate.lagrangian, m.joint.lagrangian);
}

// ---------------------------------------------------------------------------
// Criterion 8: temporal-smoothness histogram
// ---------------------------------------------------------------------------

/// Flow provider whose displacement is proportional to the brightness change
/// between the frames: an analytically predictable stand-in for real motion.
struct MeanDrivenFlow {
    scale: f64,
}

impl FlowProvider for MeanDrivenFlow {
    fn flow(&self, target: &Frame, source: &Frame) -> Result<Array3<f64>> {
        let (_, h, w) = target.dim();
        let dx = (target.mean().unwrap() - source.mean().unwrap()) * self.scale;
        let mut f = Array3::zeros((2, h, w));
        f.slice_mut(ndarray::s![0, .., ..]).fill(dx);
        Ok(f)
    }

    fn id(&self) -> String {
        format!("mean-driven({})", self.scale)
    }
}

#[test]
fn criterion_8_smoothness_histogram_identity_and_drift_oracles() {
    use blurvc::eval::temporal_smoothness;

    // Identical clips: every flow difference vanishes, so all mass lands in
    // bin zero and the log-mass there is exactly zero.
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let frames: Vec<Frame> = (0..4).map(|_| random_frame(&mut rng, 16, 16, 0.0, 1.0)).collect();
    let clip = Clip::new(frames, 24.0);
    let hist = temporal_smoothness(&clip, &clip, &LucasKanade::default()).unwrap();
    let identity_ok = hist.bins.len() == 1
        && hist.bins.get(&0) == Some(&0.0)
        && hist.df_size == 2 * 16 * 16;

    // Synthetic drift: constant frames at brightnesses k^2/64 turn the
    // mean-driven provider into flows 48 * (k^2 - (k-1)^2)/64, so consecutive
    // flow differences are exactly 1.5 while the constant ground truth
    // contributes none. Every pixel must land in bin floor(1.5) = 1.
    let values = [0.0, 1.0 / 64.0, 4.0 / 64.0, 9.0 / 64.0];
    let dec_frames: Vec<Frame> = values.iter().map(|&v| Array3::from_elem((3, 16, 16), v)).collect();
    let gt_frames: Vec<Frame> = values.iter().map(|_| Array3::from_elem((3, 16, 16), 0.3)).collect();
    let dec = Clip::new(dec_frames, 24.0);
    let gt = Clip::new(gt_frames, 24.0);
    let provider = MeanDrivenFlow { scale: 48.0 };

    let predicted_bin = {
        let f10 = (values[1] - values[0]) * 48.0;
        let f21 = (values[2] - values[1]) * 48.0;
        (f21 - f10).abs().floor() as u64
    };
    let drifted = temporal_smoothness(&dec, &gt, &provider).unwrap();
    let drift_ok = drifted.bins.len() == 1
        && drifted.bins.get(&predicted_bin) == Some(&0.0)
        && predicted_bin == 1;

    let ok = identity_ok && drift_ok;
    report(8, "smoothness histogram: identical clips pin bin 0 at T=0, drift lands in the predicted bin", ok);
    assert!(identity_ok, "identity histogram wrong: {:?}", hist.bins);
    assert!(drift_ok, "drift histogram wrong: predicted bin {predicted_bin}, got {:?}", drifted.bins);
}
