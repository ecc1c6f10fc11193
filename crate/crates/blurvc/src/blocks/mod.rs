//! Network architecture: parameter storage, the restoration backbone, the
//! three compression autoencoders, the flow refiner, the motion-compensation
//! UNet, and the intra-frame autoencoder — plus the per-latent entropy
//! densities, all owned by one [`Model`].
//!
//! # Structure
//!
//! Every learnable tensor lives in a flat, name-addressed [`ParamStore`];
//! forward passes are free functions that take a [`ParamTids`] handle (the
//! store injected into an autodiff [`Graph`]) and build the computation.
//! This keeps one source of truth for parameters, makes optimizer updates
//! uniform, and lets tests finite-difference any subnetwork by perturbing
//! store entries directly.
//!
//! Final projections are zero-initialized throughout, so an untrained model
//! is exactly "copy the reference along the flow": the restoration backbone
//! emits a zero residual, encoders emit zero latents, decoders emit zero
//! reconstructions, and the UNet's correction starts at zero. The training
//! schedule relies on this identity start.

pub mod checkpoint;

use std::collections::BTreeMap;

use ndarray::{Array1, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tid};
use crate::entropy::{DensityId, DensityTids, FactorizedDensity};

/// Architecture hyperparameters. The backbone block counts and the overall
/// 16x autoencoder downsampling are fixed design choices; widths scale
/// between desk and full size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Channels of every coded latent.
    pub latent_channels: usize,
    /// Feature width of the restoration/refinement backbone.
    pub backbone_width: usize,
    /// Residual dense blocks per backbone.
    pub rdb_count: usize,
    /// Convolutions inside each residual dense block.
    pub rdb_layers: usize,
    /// Channels added by each dense layer.
    pub growth: usize,
    /// Hidden width of the autoencoder stages.
    pub ae_width: usize,
    /// UNet widths, finest scale first.
    pub mcnet_widths: [usize; 3],
}

impl BlockConfig {
    /// Desk-scale defaults: trainable on a single CPU core in hours.
    pub fn desk() -> Self {
        BlockConfig {
            latent_channels: 32,
            backbone_width: 24,
            rdb_count: 3,
            rdb_layers: 4,
            growth: 16,
            ae_width: 32,
            mcnet_widths: [12, 24, 48],
        }
    }

    /// Full-scale widths (constructible and shape-correct; training at this
    /// size is out of desk scope).
    pub fn paper_scale() -> Self {
        BlockConfig {
            latent_channels: 128,
            backbone_width: 64,
            rdb_count: 3,
            rdb_layers: 4,
            growth: 16,
            ae_width: 128,
            mcnet_widths: [32, 64, 128],
        }
    }

    /// Minimal config for finite-difference gradient validation.
    pub fn tiny() -> Self {
        BlockConfig {
            latent_channels: 3,
            backbone_width: 6,
            rdb_count: 1,
            rdb_layers: 2,
            growth: 3,
            ae_width: 5,
            mcnet_widths: [4, 5, 6],
        }
    }

    /// Spatial divisibility required of frames (four stride-2 stages).
    pub fn downsample_factor(&self) -> usize {
        16
    }
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Flat, name-addressed parameter tensors with deterministic order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Insert every tensor into a graph as a differentiable leaf.
    pub fn inject(&self, g: &mut Graph) -> ParamTids {
        let map = self.map.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone()))).collect();
        ParamTids { map }
    }

    /// Insert every tensor as a non-differentiable constant, for inference
    /// passes that never run a backward sweep.
    pub fn inject_constants(&self, g: &mut Graph) -> ParamTids {
        let map = self.map.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect();
        ParamTids { map }
    }
}

/// Graph handles for an injected [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamTids {
    map: BTreeMap<String, Tid>,
}

impl ParamTids {
    pub fn t(&self, name: &str) -> Tid {
        *self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tid)> {
        self.map.iter()
    }

    /// Build from parallel name/handle sequences (used by gradient checks
    /// that inject tensors themselves).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Tid)>) -> Self {
        ParamTids { map: pairs.into_iter().collect() }
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

enum Init {
    /// Fan-in scaled uniform, for hidden layers.
    Uniform,
    /// Exact zeros, for final projections.
    Zero,
}

fn register_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    init: Init,
) {
    let w = match init {
        Init::Uniform => {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            Array4::from_shape_fn((cout, cin, k, k), |_| rng.gen_range(-bound..bound))
        }
        Init::Zero => Array4::zeros((cout, cin, k, k)),
    };
    store.insert(&format!("{name}.w"), w.into_dyn());
    store.insert(&format!("{name}.b"), Array1::<f64>::zeros(cout).into_dyn());
}

/// Apply a named convolution (weights `{name}.w`, bias `{name}.b`).
fn conv(g: &mut Graph, p: &ParamTids, name: &str, x: Tid, pad: usize) -> Tid {
    let w = p.t(&format!("{name}.w"));
    let b = p.t(&format!("{name}.b"));
    g.conv2d(x, w, Some(b), pad)
}

// ---------------------------------------------------------------------------
// Backbone (restoration / flow refinement)
// ---------------------------------------------------------------------------

fn register_backbone(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &BlockConfig,
    in_ch: usize,
    out_ch: usize,
) {
    let w = cfg.backbone_width;
    register_conv(store, rng, &format!("{prefix}.entry"), w, in_ch * 4, 3, Init::Uniform);
    for r in 0..cfg.rdb_count {
        for l in 0..cfg.rdb_layers {
            let cin = w + l * cfg.growth;
            register_conv(
                store,
                rng,
                &format!("{prefix}.rdb{r}.conv{l}"),
                cfg.growth,
                cin,
                3,
                Init::Uniform,
            );
        }
        let fused = w + cfg.rdb_layers * cfg.growth;
        register_conv(store, rng, &format!("{prefix}.rdb{r}.fuse"), w, fused, 1, Init::Uniform);
    }
    register_conv(store, rng, &format!("{prefix}.gff"), w, w * cfg.rdb_count, 1, Init::Uniform);
    register_conv(store, rng, &format!("{prefix}.exit"), out_ch * 4, w, 3, Init::Zero);
}

/// Residual dense block: densely connected 3x3 convolutions, 1x1 local
/// fusion, and a local residual connection.
fn rdb_forward(g: &mut Graph, p: &ParamTids, prefix: &str, x: Tid, cfg: &BlockConfig) -> Tid {
    let mut feats = vec![x];
    for l in 0..cfg.rdb_layers {
        let cat = if feats.len() == 1 { feats[0] } else { g.concat(&feats) };
        let c = conv(g, p, &format!("{prefix}.conv{l}"), cat, 1);
        feats.push(g.soft_relu(c));
    }
    let cat = g.concat(&feats);
    let fused = conv(g, p, &format!("{prefix}.fuse"), cat, 0);
    g.add(x, fused)
}

/// Shared backbone: pixel-unshuffle entry, dense blocks with global feature
/// fusion, sub-pixel exit. Zero-initialized exit means the output starts
/// identically zero.
pub fn backbone_forward(g: &mut Graph, p: &ParamTids, prefix: &str, x: Tid, cfg: &BlockConfig) -> Tid {
    let shuffled = g.space_to_depth(x, 2);
    let entry = conv(g, p, &format!("{prefix}.entry"), shuffled, 1);
    let f0 = g.soft_relu(entry);
    let mut cur = f0;
    let mut outs = Vec::new();
    for r in 0..cfg.rdb_count {
        cur = rdb_forward(g, p, &format!("{prefix}.rdb{r}"), cur, cfg);
        outs.push(cur);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs) };
    let gff = conv(g, p, &format!("{prefix}.gff"), cat, 0);
    let fused = g.add(f0, gff);
    let exit = conv(g, p, &format!("{prefix}.exit"), fused, 1);
    g.depth_to_space(exit, 2)
}

/// Blur-residual estimation: maps the degraded input frame to an additive
/// correction (zero at initialization).
pub fn venet_forward(g: &mut Graph, p: &ParamTids, input: Tid, cfg: &BlockConfig) -> Tid {
    backbone_forward(g, p, "venet", input, cfg)
}

/// Flow refinement: current enhanced frame, previous reconstruction, and the
/// initial flow in; flow-shaped correction out (zero at initialization).
pub fn frnet_forward(
    g: &mut Graph,
    p: &ParamTids,
    enhanced: Tid,
    previous: Tid,
    initial_flow: Tid,
    cfg: &BlockConfig,
) -> Tid {
    let cat = g.concat(&[enhanced, previous, initial_flow]);
    backbone_forward(g, p, "frnet", cat, cfg)
}

// ---------------------------------------------------------------------------
// Autoencoders
// ---------------------------------------------------------------------------

/// Which coded stream an autoencoder/density serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LatentKind {
    Blur,
    Motion,
    Residual,
    Intra,
}

impl LatentKind {
    pub fn name(self) -> &'static str {
        match self {
            LatentKind::Blur => "blur",
            LatentKind::Motion => "motion",
            LatentKind::Residual => "residual",
            LatentKind::Intra => "intra",
        }
    }

    pub fn density_id(self) -> DensityId {
        DensityId(match self {
            LatentKind::Blur => 0,
            LatentKind::Motion => 1,
            LatentKind::Residual => 2,
            LatentKind::Intra => 3,
        })
    }

    /// Channel count of the signal this stream codes.
    pub fn signal_channels(self) -> usize {
        match self {
            LatentKind::Motion => 2,
            _ => 3,
        }
    }

    pub fn all() -> [LatentKind; 4] {
        [LatentKind::Blur, LatentKind::Motion, LatentKind::Residual, LatentKind::Intra]
    }
}

fn register_autoencoder(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    kind: LatentKind,
    cfg: &BlockConfig,
) {
    let prefix = format!("ae.{}", kind.name());
    let sig = kind.signal_channels();
    let w = cfg.ae_width;
    let lc = cfg.latent_channels;
    // Encoder: four stride-2 stages; the last projects into the latent and
    // is zero-initialized.
    register_conv(store, rng, &format!("{prefix}.enc0"), w, sig * 4, 3, Init::Uniform);
    register_conv(store, rng, &format!("{prefix}.enc1"), w, w * 4, 3, Init::Uniform);
    register_conv(store, rng, &format!("{prefix}.enc2"), w, w * 4, 3, Init::Uniform);
    register_conv(store, rng, &format!("{prefix}.enc3"), lc, w * 4, 3, Init::Zero);
    // Decoder mirror; the last stage projects back to the signal and is
    // zero-initialized.
    register_conv(store, rng, &format!("{prefix}.dec0"), w * 4, lc, 3, Init::Uniform);
    register_conv(store, rng, &format!("{prefix}.dec1"), w * 4, w, 3, Init::Uniform);
    register_conv(store, rng, &format!("{prefix}.dec2"), w * 4, w, 3, Init::Uniform);
    register_conv(store, rng, &format!("{prefix}.dec3"), sig * 4, w, 3, Init::Zero);
}

/// Encode a signal into its (pre-quantization) latent: spatial dims shrink
/// by `downsample_factor`, channels become `latent_channels`.
pub fn encoder_forward(g: &mut Graph, p: &ParamTids, kind: LatentKind, x: Tid, _cfg: &BlockConfig) -> Tid {
    let prefix = format!("ae.{}", kind.name());
    let mut cur = x;
    for stage in 0..4 {
        let s = g.space_to_depth(cur, 2);
        let c = conv(g, p, &format!("{prefix}.enc{stage}"), s, 1);
        cur = if stage < 3 { g.soft_relu(c) } else { c };
    }
    cur
}

/// Decode a (quantized) latent back to signal shape.
pub fn decoder_forward(g: &mut Graph, p: &ParamTids, kind: LatentKind, latent: Tid, _cfg: &BlockConfig) -> Tid {
    let prefix = format!("ae.{}", kind.name());
    let mut cur = latent;
    for stage in 0..4 {
        let c = conv(g, p, &format!("{prefix}.dec{stage}"), cur, 1);
        let up = g.depth_to_space(c, 2);
        cur = if stage < 3 { g.soft_relu(up) } else { up };
    }
    cur
}

// ---------------------------------------------------------------------------
// Motion compensation UNet
// ---------------------------------------------------------------------------

fn register_mcnet(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &BlockConfig) {
    let [w0, w1, w2] = cfg.mcnet_widths;
    register_conv(store, rng, "mcnet.enc0a", w0, 8, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.enc0b", w0, w0, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.enc1a", w1, w0 * 4, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.enc1b", w1, w1, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.enc2a", w2, w1 * 4, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.enc2b", w2, w2, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.up1", w1 * 4, w2, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.dec1", w1, w1 * 2, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.up0", w0 * 4, w1, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.dec0", w0, w0 * 2, 3, Init::Uniform);
    register_conv(store, rng, "mcnet.head", 3, w0, 3, Init::Zero);
}

/// Motion compensation: refine the warped reference given the reference and
/// the decoded flow. Residual connection from the warped frame, so an
/// untrained network returns the warped frame unchanged.
pub fn mcnet_forward(
    g: &mut Graph,
    p: &ParamTids,
    warped: Tid,
    previous: Tid,
    flow: Tid,
    _cfg: &BlockConfig,
) -> Tid {
    let cat = g.concat(&[warped, previous, flow]);
    let c = conv(g, p, "mcnet.enc0a", cat, 1);
    let c = g.soft_relu(c);
    let c = conv(g, p, "mcnet.enc0b", c, 1);
    let s0 = g.soft_relu(c);

    let d = g.space_to_depth(s0, 2);
    let c = conv(g, p, "mcnet.enc1a", d, 1);
    let c = g.soft_relu(c);
    let c = conv(g, p, "mcnet.enc1b", c, 1);
    let s1 = g.soft_relu(c);

    let d = g.space_to_depth(s1, 2);
    let c = conv(g, p, "mcnet.enc2a", d, 1);
    let c = g.soft_relu(c);
    let c = conv(g, p, "mcnet.enc2b", c, 1);
    let s2 = g.soft_relu(c);

    let u = conv(g, p, "mcnet.up1", s2, 1);
    let u = g.depth_to_space(u, 2);
    let u = g.soft_relu(u);
    let cat1 = g.concat(&[u, s1]);
    let c = conv(g, p, "mcnet.dec1", cat1, 1);
    let d1 = g.soft_relu(c);

    let u = conv(g, p, "mcnet.up0", d1, 1);
    let u = g.depth_to_space(u, 2);
    let u = g.soft_relu(u);
    let cat0 = g.concat(&[u, s0]);
    let c = conv(g, p, "mcnet.dec0", cat0, 1);
    let d0 = g.soft_relu(c);

    let correction = conv(g, p, "mcnet.head", d0, 1);
    g.add(warped, correction)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Which of the two trade-off arms a parameter serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Visual enhancement: restoration backbone + blur-residual coding chain.
    Enhancement,
    /// Everything that reconstructs and codes the video signal itself.
    Compression,
}

/// Classify a parameter name into its trade-off group.
pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("venet.") || name.starts_with("ae.blur.") || name.starts_with("density.blur.")
    {
        ParamGroup::Enhancement
    } else {
        ParamGroup::Compression
    }
}

/// Per-kind observed integer latent range (for coder supports).
pub type ObservedRanges = BTreeMap<String, (Vec<i64>, Vec<i64>)>;

/// The complete learnable state: architecture config, every network
/// parameter, the entropy density parameters, observed latent ranges, and
/// the training iteration counter.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: BlockConfig,
    pub store: ParamStore,
    pub observed: ObservedRanges,
    pub iteration: u64,
}

impl Model {
    /// Deterministic initialization from a seed.
    pub fn new(config: BlockConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        register_backbone(&mut store, &mut rng, "venet", &config, 3, 3);
        register_backbone(&mut store, &mut rng, "frnet", &config, 8, 2);
        register_mcnet(&mut store, &mut rng, &config);
        let mut observed = ObservedRanges::new();
        for kind in LatentKind::all() {
            register_autoencoder(&mut store, &mut rng, kind, &config);
            // Reuse the density's own init so the CDF parameterization has a
            // single authoritative initialization.
            let d = FactorizedDensity::new(config.latent_channels, rng.gen::<u64>());
            for k in 0..d.h.len() {
                store.insert(&format!("density.{}.h{k}", kind.name()), d.h[k].clone().into_dyn());
                store.insert(&format!("density.{}.b{k}", kind.name()), d.b[k].clone().into_dyn());
                if k < d.a.len() {
                    store.insert(
                        &format!("density.{}.a{k}", kind.name()),
                        d.a[k].clone().into_dyn(),
                    );
                }
            }
            observed.insert(kind.name().to_string(), (d.observed_lo.clone(), d.observed_hi.clone()));
        }
        Model { config, store, observed, iteration: 0 }
    }

    /// Materialize the entropy density for one latent kind from the store.
    pub fn density(&self, kind: LatentKind) -> FactorizedDensity {
        let to3 = |a: &ArrayD<f64>| a.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut h = Vec::new();
        let mut b = Vec::new();
        let mut a = Vec::new();
        for k in 0.. {
            let hname = format!("density.{}.h{k}", kind.name());
            if !self.store.map.contains_key(&hname) {
                break;
            }
            h.push(to3(self.store.get(&hname)));
            b.push(to3(self.store.get(&format!("density.{}.b{k}", kind.name()))));
            let aname = format!("density.{}.a{k}", kind.name());
            if self.store.map.contains_key(&aname) {
                a.push(to3(self.store.get(&aname)));
            }
        }
        let (lo, hi) = self.observed[kind.name()].clone();
        FactorizedDensity { h, b, a, observed_lo: lo, observed_hi: hi }
    }

    /// Graph handles for one density's parameters.
    pub fn density_tids(&self, p: &ParamTids, kind: LatentKind) -> DensityTids {
        let mut h = Vec::new();
        let mut b = Vec::new();
        let mut a = Vec::new();
        for k in 0.. {
            let hname = format!("density.{}.h{k}", kind.name());
            if !self.store.map.contains_key(&hname) {
                break;
            }
            h.push(p.t(&hname));
            b.push(p.t(&format!("density.{}.b{k}", kind.name())));
            let aname = format!("density.{}.a{k}", kind.name());
            if self.store.map.contains_key(&aname) {
                a.push(p.t(&aname));
            }
        }
        DensityTids { h, b, a }
    }

    /// Fold rounded latent values into the observed range for a kind.
    pub fn update_observed(&mut self, kind: LatentKind, values: &ArrayD<f64>) {
        let mut d = self.density(kind);
        d.update_observed(values);
        self.observed
            .insert(kind.name().to_string(), (d.observed_lo, d.observed_hi));
    }

    /// 64-bit identity of the current weights (see [`checkpoint::model_id`]).
    pub fn id(&self) -> u64 {
        checkpoint::model_id(self)
    }
}
