//! Short training probe: runs a compressed schedule at one rate-distortion
//! trade-off on a small toy corpus and reports wall time per step plus the
//! tail of the training log, to help pick lambda values and budget the long
//! runs.
//!
//! Usage: probe <lambda_d> <iters> <out_dir>

use blurvc::blocks::BlockConfig;
use blurvc::data_synth::{synthesize_clip, toy, BlurSynthesisParams};
use blurvc::flow_warp::LucasKanade;
use blurvc::losses::DistortionKind;
use blurvc::train::{run_training, ScheduleConfig, TrainOptions};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 4 {
        eprintln!("usage: probe <lambda_d> <iters> <out_dir>");
        std::process::exit(2);
    }
    let lambda_d: f64 = args[1].parse().expect("lambda_d must be a number");
    let iters: u64 = args[2].parse().expect("iters must be an integer");
    let out_dir = std::path::PathBuf::from(&args[3]);

    let params = BlurSynthesisParams::new(3, 1).unwrap();
    let mut corpus = Vec::new();
    for i in 0..6u64 {
        let hfr = toy::generate_hfr_clip(100 + i, 8 * 4 + 3, 64, 64, 96.0);
        corpus.push(synthesize_clip(&hfr, &params).unwrap());
    }

    let schedule = ScheduleConfig {
        a: iters / 10,
        b: iters / 5,
        c: iters * 3 / 10,
        max_iter: iters,
        lr: 1e-4,
        lr_decay_points: vec![iters / 2, iters * 4 / 5],
        s0: 1.0,
        s_step: 0.25,
        s_every: iters / 5,
        s_floor: 0.25,
        batch: 2,
        crop: 64,
        seed: 1,
    };
    let opts = TrainOptions {
        schedule,
        lambda_d,
        distortion: DistortionKind::Mse,
        pool_k: 8,
        rank_scale: 1.0,
        model_seed: 7,
    };
    let lk = LucasKanade::default();
    let t0 = Instant::now();
    let out = run_training(&corpus, &BlockConfig::desk(), &opts, &lk, &out_dir)
        .unwrap_or_else(|e| panic!("probe run failed: {e}"));
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "lambda_d={lambda_d:.3e} iters={iters} wall={dt:.1}s per_step={:.3}s log={}",
        dt / iters as f64,
        out.log_path.display()
    );

    let log = std::fs::read_to_string(&out.log_path).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    println!("{}", lines[0]);
    for l in lines.iter().skip(lines.len().saturating_sub(5)) {
        println!("{l}");
    }
}
