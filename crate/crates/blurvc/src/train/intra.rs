//! Training for the intra-frame (keyframe) autoencoder: a plain
//! rate-distortion objective on single frames, touching only the intra
//! autoencoder and its coding density. Because no other parameters move,
//! this can run after the main pipeline is trained without disturbing
//! predicted-frame behavior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::blocks::{decoder_forward, encoder_forward, LatentKind, Model};
use crate::entropy::rate_on_graph;
use crate::img::Frame;
use crate::train::{noisy_latent, Adam, ObservedLatents};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntraTrainConfig {
    pub iters: u64,
    pub lr: f64,
    /// Distortion weight against the coding rate (mean squared error scale).
    pub lambda: f64,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
}

impl IntraTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.lr <= 0.0 || self.lambda <= 0.0 || self.batch == 0 || self.crop == 0
        {
            return Err(Error::InvalidInput(
                "intra training needs positive iters, lr, lambda, batch, and crop".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step readout: loss, mean squared error, and rate in bits.
#[derive(Debug, Clone, Copy)]
pub struct IntraStep {
    pub loss: f64,
    pub mse: f64,
    pub bits: f64,
}

/// Train the intra autoencoder on a pool of frames, in place.
pub fn train_intra(
    frames: &[Frame],
    model: &mut Model,
    cfg: &IntraTrainConfig,
) -> Result<Vec<IntraStep>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidInput("intra training needs at least one frame".into()));
    }
    let f = model.config.downsample_factor();
    if cfg.crop % f != 0 {
        return Err(Error::InvalidInput(format!(
            "crop {} must be divisible by the downsampling factor {f}",
            cfg.crop
        )));
    }
    for (i, fr) in frames.iter().enumerate() {
        let (c, h, w) = fr.dim();
        if c != 3 || h < cfg.crop || w < cfg.crop {
            return Err(Error::InvalidInput(format!(
                "frame {i} is {c}x{h}x{w}, needs 3 channels and at least {0}x{0}",
                cfg.crop
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let mut steps = Vec::with_capacity(cfg.iters as usize);
    for i in 0..cfg.iters {
        let mut g = Graph::new();
        let p = model.store.inject(&mut g);
        let mut observed = ObservedLatents::default();
        let mut sample_losses = Vec::with_capacity(cfg.batch);
        let mut mse_acc = 0.0;
        let mut bits_acc = 0.0;
        for _ in 0..cfg.batch {
            let fi = rng.gen_range(0..frames.len());
            let (_, h, w) = frames[fi].dim();
            let y = rng.gen_range(0..=h - cfg.crop);
            let x = rng.gen_range(0..=w - cfg.crop);
            let crop = frames[fi]
                .slice(ndarray::s![.., y..y + cfg.crop, x..x + cfg.crop])
                .to_owned();
            let xx = g.constant(crop.into_dyn());
            let raw = encoder_forward(&mut g, &p, LatentKind::Intra, xx, &model.config);
            let tilde = noisy_latent(&mut g, raw, LatentKind::Intra, i, &mut rng, &mut observed)?;
            let tids = model.density_tids(&p, LatentKind::Intra);
            let rate = rate_on_graph(&mut g, tilde, &tids);
            let rec = decoder_forward(&mut g, &p, LatentKind::Intra, tilde, &model.config);
            let d = g.sub(rec, xx);
            let sq = g.square(d);
            let mse = g.mean(sq);
            let wd = g.scale(mse, cfg.lambda);
            let loss = g.add(wd, rate);
            mse_acc += g.scalar(mse);
            bits_acc += g.scalar(rate);
            sample_losses.push(loss);
        }
        let mut total = sample_losses[0];
        for &l in &sample_losses[1..] {
            total = g.add(total, l);
        }
        let total = g.scale(total, 1.0 / cfg.batch as f64);
        let val = g.scalar(total);
        if !val.is_finite() {
            return Err(Error::Divergence { iteration: i, loss: val });
        }
        let grads = g.backward(total);
        super::apply_gradients(model, &p, &grads, &mut adam, cfg.lr);
        for (kind, vals) in &observed.per_kind {
            model.update_observed(*kind, vals);
        }
        steps.push(IntraStep {
            loss: val,
            mse: mse_acc / cfg.batch as f64,
            bits: bits_acc / cfg.batch as f64,
        });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockConfig;
    use crate::data_synth::toy;

    #[test]
    fn intra_training_moves_only_intra_parameters_and_improves() {
        let clip = toy::generate_hfr_clip(42, 6, 32, 32, 24.0);
        let mut model = Model::new(BlockConfig::tiny(), 9);
        let cfg = IntraTrainConfig { iters: 50, lr: 1e-3, lambda: 5e4, batch: 1, crop: 32, seed: 4 };
        let steps = train_intra(&clip.frames, &mut model, &cfg).unwrap();
        assert_eq!(steps.len(), 50);
        let head: f64 = steps[..10].iter().map(|s| s.loss).sum::<f64>() / 10.0;
        let tail: f64 = steps[40..].iter().map(|s| s.loss).sum::<f64>() / 10.0;
        assert!(tail < head, "intra loss should fall (head {head:.3}, tail {tail:.3})");

        let fresh = Model::new(BlockConfig::tiny(), 9);
        for name in fresh.store.names() {
            let is_intra = name.contains(".intra.");
            let same = fresh.store.get(name) == model.store.get(name);
            if !is_intra {
                assert!(same, "{name} must not move during intra training");
            }
        }
        let moved = fresh
            .store
            .names()
            .filter(|n| n.contains(".intra."))
            .any(|n| fresh.store.get(n) != model.store.get(n));
        assert!(moved, "intra parameters must change");
    }

    #[test]
    fn intra_config_is_validated() {
        let clip = toy::generate_hfr_clip(42, 2, 32, 32, 24.0);
        let mut model = Model::new(BlockConfig::tiny(), 9);
        let bad = IntraTrainConfig { iters: 0, lr: 1e-3, lambda: 1.0, batch: 1, crop: 32, seed: 4 };
        assert!(train_intra(&clip.frames, &mut model, &bad).is_err());
        let bad_crop = IntraTrainConfig { iters: 1, lr: 1e-3, lambda: 1.0, batch: 1, crop: 30, seed: 4 };
        assert!(train_intra(&clip.frames, &mut model, &bad_crop).is_err());
        assert!(train_intra(&[], &mut model, &IntraTrainConfig { iters: 1, lr: 1e-3, lambda: 1.0, batch: 1, crop: 32, seed: 4 }).is_err());
    }
}
