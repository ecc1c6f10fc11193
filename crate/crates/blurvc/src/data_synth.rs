//! Blur synthesis: turn high-frame-rate sharp clips into aligned
//! (blurry, sharp ground truth) pairs, plus dataset manifests and a
//! procedural toy-clip generator for desk-scale experiments.
//!
//! A blurry frame is the per-pixel arithmetic mean of `n` consecutive sharp
//! frames; `m` frames are discarded between windows, so the temporal stride
//! is `kappa = n + m` and the output frame rate is `fps / kappa`. The sharp
//! ground truth for a window is its center frame (mid-exposure), which is
//! why `n` must be odd.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::img::{self, Clip, Frame};

/// Averaging-window parameters for blur synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlurSynthesisParams {
    /// Window length (frames averaged into one blurry frame). Must be odd.
    pub n: usize,
    /// Frames discarded between consecutive windows.
    pub m: usize,
}

impl BlurSynthesisParams {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n < 1 || n % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "window length n must be odd and >= 1, got {n}"
            )));
        }
        Ok(BlurSynthesisParams { n, m })
    }

    /// Temporal stride between window centers.
    pub fn kappa(&self) -> usize {
        self.n + self.m
    }
}

/// Per-pixel arithmetic mean of a window of frames.
pub fn synthesize_blurry_frame(window: &[Frame]) -> Result<Frame> {
    let first = window
        .first()
        .ok_or_else(|| Error::InvalidInput("empty averaging window".into()))?;
    for f in window {
        if f.dim() != first.dim() {
            return Err(Error::InvalidInput(format!(
                "window frame shape mismatch: {:?} vs {:?}",
                f.dim(),
                first.dim()
            )));
        }
    }
    let mut acc = window[0].clone();
    for f in &window[1..] {
        acc += f;
    }
    acc /= window.len() as f64;
    Ok(acc)
}

/// Centers of all averaging windows that fit inside a clip of `len` frames.
///
/// Centers sit on the stride grid `kappa * t`; a center is valid when the
/// full window `[c - (n-1)/2, c + (n-1)/2]` lies inside the clip. With
/// `n = 1, m = 0` every frame is its own window, so synthesis is the
/// identity; larger windows drop grid points too close to the clip edges.
pub fn window_centers(len: usize, params: &BlurSynthesisParams) -> Vec<usize> {
    let half = (params.n - 1) / 2;
    let kappa = params.kappa();
    let mut centers = Vec::new();
    let mut c = 0usize;
    while c + half < len {
        if c >= half {
            centers.push(c);
        }
        c += kappa;
    }
    centers
}

/// Synthesize a (blurry, sharp ground truth) clip pair from a high-fps clip.
///
/// Output fps is `input fps / kappa`.
pub fn synthesize_clip(high_fps: &Clip, params: &BlurSynthesisParams) -> Result<(Clip, Clip)> {
    let centers = window_centers(high_fps.len(), params);
    if centers.is_empty() {
        return Err(Error::InvalidInput(format!(
            "clip of {} frames too short for any window with n={}, m={}",
            high_fps.len(),
            params.n,
            params.m
        )));
    }
    let half = (params.n - 1) / 2;
    let mut blurry = Vec::with_capacity(centers.len());
    let mut sharp = Vec::with_capacity(centers.len());
    for &c in &centers {
        let window = &high_fps.frames[c - half..=c + half];
        blurry.push(synthesize_blurry_frame(window)?);
        sharp.push(high_fps.frames[c].clone());
    }
    let fps = high_fps.fps / params.kappa() as f64;
    Ok((Clip::new(blurry, fps), Clip::new(sharp, fps)))
}

/// One synthesized clip pair in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub blurry_dir: String,
    pub sharp_dir: String,
    pub frame_count: usize,
    /// Hex SHA-256 over the PNG bytes of both directories, in frame order
    /// (blurry first).
    pub checksum: String,
}

/// Dataset manifest: synthesis parameters plus the clip pairs they produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: ManifestParams,
    pub pairs: Vec<ManifestEntry>,
}

/// Parameters recorded in a manifest (kappa stored explicitly for readers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestParams {
    pub n: usize,
    pub m: usize,
    pub kappa: usize,
}

fn checksum_pair(blurry_dir: &Path, sharp_dir: &Path, frame_count: usize) -> Result<String> {
    let mut hasher = Sha256::new();
    for dir in [blurry_dir, sharp_dir] {
        for t in 0..frame_count {
            let path = dir.join(img::frame_file_name(t));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            hasher.update(&bytes);
        }
    }
    Ok(hex_digest(&hasher.finalize()))
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build a manifest for already-written clip pair directories.
pub fn build_manifest(
    pairs: &[(PathBuf, PathBuf, usize)],
    params: &BlurSynthesisParams,
) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(pairs.len());
    for (blurry_dir, sharp_dir, frame_count) in pairs {
        entries.push(ManifestEntry {
            blurry_dir: blurry_dir.display().to_string(),
            sharp_dir: sharp_dir.display().to_string(),
            frame_count: *frame_count,
            checksum: checksum_pair(blurry_dir, sharp_dir, *frame_count)?,
        });
    }
    Ok(Manifest {
        params: ManifestParams {
            n: params.n,
            m: params.m,
            kappa: params.kappa(),
        },
        pairs: entries,
    })
}

/// Write a manifest as pretty JSON, atomically.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(tmp.path(), json.as_bytes()).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Read a manifest back.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest {}: {e}", path.display())))
}

/// Re-hash every entry; returns the indices of entries whose checksum no
/// longer matches the files on disk (empty = fully valid).
pub fn validate_manifest(manifest: &Manifest, root: &Path) -> Result<Vec<usize>> {
    let mut corrupted = Vec::new();
    for (i, entry) in manifest.pairs.iter().enumerate() {
        let blurry = root.join(&entry.blurry_dir);
        let sharp = root.join(&entry.sharp_dir);
        let actual = checksum_pair(&blurry, &sharp, entry.frame_count)?;
        if actual != entry.checksum {
            corrupted.push(i);
        }
    }
    Ok(corrupted)
}

pub mod toy {
    //! Procedural moving-texture clips: analytic textures translated at a
    //! constant subpixel velocity, so any frame is an exact resampling of
    //! the same continuous signal. Used for desk-scale training and tests.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::img::{Clip, Frame};
    use ndarray::Array3;

    struct Grating {
        fx: f64,
        fy: f64,
        phase: [f64; 3],
        amp: f64,
    }

    struct Blob {
        cx: f64,
        cy: f64,
        sigma: f64,
        amp: [f64; 3],
    }

    /// Texture + velocity sampled from a seed.
    pub struct ToyScene {
        gratings: Vec<Grating>,
        blobs: Vec<Blob>,
        /// Scene translation per frame, pixels (dx, dy).
        pub velocity: (f64, f64),
    }

    impl ToyScene {
        pub fn from_seed(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gratings = Vec::new();
            for band in 0..4 {
                // Two low-frequency bands for structure, two mid-frequency
                // bands so motion blur visibly attenuates detail.
                let f_lo = [0.015, 0.035, 0.08, 0.16][band];
                let f_hi = f_lo * 1.8;
                let f = rng.gen_range(f_lo..f_hi);
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                gratings.push(Grating {
                    fx: f * theta.cos(),
                    fy: f * theta.sin(),
                    phase: [
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    ],
                    amp: rng.gen_range(0.05..0.16) / (1.0 + band as f64 * 0.25),
                });
            }
            let mut blobs = Vec::new();
            for _ in 0..3 {
                blobs.push(Blob {
                    cx: rng.gen_range(0.0..64.0),
                    cy: rng.gen_range(0.0..64.0),
                    sigma: rng.gen_range(4.0..10.0),
                    amp: [
                        rng.gen_range(-0.25..0.25),
                        rng.gen_range(-0.25..0.25),
                        rng.gen_range(-0.25..0.25),
                    ],
                });
            }
            let speed = rng.gen_range(0.3..1.1);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            ToyScene {
                gratings,
                blobs,
                velocity: (speed * dir.cos(), speed * dir.sin()),
            }
        }

        /// Sample the scene at continuous scene coordinates.
        fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
            let mut v = 0.5;
            for g in &self.gratings {
                v += g.amp * (std::f64::consts::TAU * (g.fx * x + g.fy * y) + g.phase[c]).cos();
            }
            for b in &self.blobs {
                // Tile blob centers so long translations stay textured.
                let dx = (x - b.cx).rem_euclid(64.0) - 32.0;
                let dy = (y - b.cy).rem_euclid(64.0) - 32.0;
                v += b.amp[c] * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
            }
            v.clamp(0.02, 0.98)
        }

        /// Render frame `t`: the scene translated by `t * velocity`.
        pub fn render(&self, t: usize, height: usize, width: usize) -> Frame {
            let (vx, vy) = self.velocity;
            let ox = vx * t as f64;
            let oy = vy * t as f64;
            Array3::from_shape_fn((3, height, width), |(c, y, x)| {
                self.sample(c, x as f64 + ox, y as f64 + oy)
            })
        }
    }

    /// Generate a high-frame-rate sharp clip of a translating texture.
    pub fn generate_hfr_clip(seed: u64, frames: usize, height: usize, width: usize, fps: f64) -> Clip {
        let scene = ToyScene::from_seed(seed);
        let rendered = (0..frames).map(|t| scene.render(t, height, width)).collect();
        Clip::new(rendered, fps)
    }
}
