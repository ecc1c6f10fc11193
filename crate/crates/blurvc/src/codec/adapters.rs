//! Intra-frame ("I-frame") codecs.
//!
//! The first byte of every intra payload names the adapter that produced the
//! rest, so a stream records how its anchor frames must be decoded.
//!
//! Two adapters are built in:
//! * **raw** — 8-bit RGB stored verbatim (24 bpp, exact for frames that are
//!   already 8-bit quantized, which everything loaded from PNG is);
//! * **intra-ae** — the model's intra autoencoder plus its entropy coder
//!   (lossy, trained).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::blocks::{decoder_forward, encoder_forward, LatentKind, Model};
use crate::entropy::coder::{decode_latent, encode_latent};
use crate::entropy::{quantize, QuantizeMode};
use crate::img::{frame_from_rgb8, frame_to_rgb8, Frame};
use crate::{Error, Result};

use super::clamp01;

pub const RAW_ADAPTER_ID: u8 = 0;
pub const INTRA_AE_ADAPTER_ID: u8 = 1;

/// An intra-frame codec. Payloads here exclude the adapter-id byte; the
/// caller prepends/strips it.
pub trait IframeAdapter {
    fn id(&self) -> u8;
    fn name(&self) -> &'static str;
    fn encode(&self, frame: &Frame) -> Result<Vec<u8>>;
    fn decode(&self, bytes: &[u8], height: usize, width: usize) -> Result<Frame>;
}

/// Verbatim 8-bit RGB storage.
pub struct RawAdapter;

impl IframeAdapter for RawAdapter {
    fn id(&self) -> u8 {
        RAW_ADAPTER_ID
    }

    fn name(&self) -> &'static str {
        "raw"
    }

    fn encode(&self, frame: &Frame) -> Result<Vec<u8>> {
        Ok(frame_to_rgb8(frame))
    }

    fn decode(&self, bytes: &[u8], height: usize, width: usize) -> Result<Frame> {
        if bytes.len() != 3 * height * width {
            return Err(Error::Format(format!(
                "raw intra payload is {} bytes, expected {}",
                bytes.len(),
                3 * height * width
            )));
        }
        Ok(frame_from_rgb8(bytes, height, width))
    }
}

/// The model's intra autoencoder + entropy coder.
pub struct IntraAeAdapter<'m> {
    pub model: &'m Model,
}

impl IframeAdapter for IntraAeAdapter<'_> {
    fn id(&self) -> u8 {
        INTRA_AE_ADAPTER_ID
    }

    fn name(&self) -> &'static str {
        "intra-ae"
    }

    fn encode(&self, frame: &Frame) -> Result<Vec<u8>> {
        let (_, h, w) = frame.dim();
        let f = self.model.config.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::InvalidInput(format!(
                "intra-ae requires dims divisible by {f}, got {h}x{w}"
            )));
        }
        let mut g = Graph::new();
        let p = self.model.store.inject_constants(&mut g);
        let x = g.constant(frame.clone().into_dyn());
        let latent = encoder_forward(&mut g, &p, LatentKind::Intra, x, &self.model.config);
        let density = self.model.density(LatentKind::Intra);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = quantize(
            g.value(latent),
            QuantizeMode::EvalRounded,
            LatentKind::Intra.density_id(),
            &mut rng,
        )?;
        density.clamp_values_to_support(&mut q.values);
        encode_latent(&q, &density)
    }

    fn decode(&self, bytes: &[u8], height: usize, width: usize) -> Result<Frame> {
        let f = self.model.config.downsample_factor();
        if height % f != 0 || width % f != 0 {
            return Err(Error::InvalidInput(format!(
                "intra-ae requires dims divisible by {f}, got {height}x{width}"
            )));
        }
        let density = self.model.density(LatentKind::Intra);
        let shape = [self.model.config.latent_channels, height / f, width / f];
        let latent = decode_latent(bytes, shape, &density, LatentKind::Intra.density_id())?;
        let mut g = Graph::new();
        let p = self.model.store.inject_constants(&mut g);
        let lt = g.constant(latent.values);
        let out = decoder_forward(&mut g, &p, LatentKind::Intra, lt, &self.model.config);
        let recon = g
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("decoder output is 3-d");
        Ok(clamp01(&recon))
    }
}

/// Look an adapter up by its payload id byte.
pub fn adapter_by_id<'m>(id: u8, model: &'m Model) -> Result<Box<dyn IframeAdapter + 'm>> {
    match id {
        RAW_ADAPTER_ID => Ok(Box::new(RawAdapter)),
        INTRA_AE_ADAPTER_ID => Ok(Box::new(IntraAeAdapter { model })),
        other => Err(Error::Format(format!("unknown intra adapter id {other}"))),
    }
}

/// Encode with the id byte prepended.
pub fn encode_iframe(adapter: &dyn IframeAdapter, frame: &Frame) -> Result<Vec<u8>> {
    let mut payload = vec![adapter.id()];
    payload.extend(adapter.encode(frame)?);
    Ok(payload)
}

/// Decode a payload whose first byte names the adapter.
pub fn decode_iframe(payload: &[u8], model: &Model, height: usize, width: usize) -> Result<Frame> {
    let Some((&id, rest)) = payload.split_first() else {
        return Err(Error::Format("empty intra payload".into()));
    };
    let adapter = adapter_by_id(id, model)?;
    adapter.decode(rest, height, width)
}
