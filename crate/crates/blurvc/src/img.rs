//! Frame and clip containers plus PNG sequence I/O.
//!
//! Frames are `[C, H, W]` arrays of `f64` in `[0, 1]`. Pixels loaded from
//! 8-bit PNGs are mapped to `k / 255`, which is exact in `f64`, so a
//! load → save round trip is lossless.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};

/// One RGB frame, `[3, H, W]`, values in `[0, 1]`.
pub type Frame = Array3<f64>;

/// An ordered sequence of equally sized frames with a frame rate.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub fps: f64,
}

impl Clip {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Self {
        Clip { frames, fps }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of the first frame.
    pub fn dims(&self) -> (usize, usize) {
        let shape = self.frames[0].shape();
        (shape[1], shape[2])
    }
}

/// Convert an 8-bit RGB buffer (row-major, interleaved) to a `[3, H, W]` frame.
pub fn frame_from_rgb8(data: &[u8], height: usize, width: usize) -> Frame {
    assert_eq!(data.len(), height * width * 3, "rgb8 buffer size mismatch");
    let mut out = Array3::zeros((3, height, width));
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * 3;
            for c in 0..3 {
                out[[c, y, x]] = f64::from(data[base + c]) / 255.0;
            }
        }
    }
    out
}

/// Convert a frame to an 8-bit RGB buffer, rounding half away from zero and
/// clamping to `[0, 255]`.
pub fn frame_to_rgb8(frame: &Frame) -> Vec<u8> {
    let (_, h, w) = frame.dim();
    let mut out = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            for c in 0..3 {
                let v = (frame[[c, y, x]] * 255.0).round();
                out[base + c] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Load a single PNG as an RGB frame.
pub fn load_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("failed to decode {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(frame_from_rgb8(img.as_raw(), h as usize, w as usize))
}

/// Save a frame as an 8-bit RGB PNG, writing atomically (temp file + rename).
pub fn save_png(path: &Path, frame: &Frame) -> Result<()> {
    let (_, h, w) = frame.dim();
    let data = frame_to_rgb8(frame);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size computed above");
    buf.write_to(
        &mut std::io::BufWriter::new(tmp.as_file()),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Format(format!("failed to encode {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))
        .map(|_| ())
}

/// File name used for frame `t` inside a clip directory.
pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

/// Load `frame_00000.png, frame_00001.png, ...` from a directory.
///
/// Frames must be consecutively numbered from zero and share one size.
pub fn load_clip_dir(dir: &Path, fps: f64) -> Result<Clip> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file_name(frames.len()));
        if !path.exists() {
            break;
        }
        let frame = load_png(&path)?;
        if let Some(first) = frames.first() {
            let a: &Frame = first;
            if a.dim() != frame.dim() {
                return Err(Error::Format(format!(
                    "frame size mismatch in {}: {:?} vs {:?}",
                    dir.display(),
                    a.dim(),
                    frame.dim()
                )));
            }
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::Format(format!(
            "no frames found in {} (expected frame_00000.png, ...)",
            dir.display()
        )));
    }
    Ok(Clip::new(frames, fps))
}

/// Save a clip as a numbered PNG sequence inside `dir` (created if missing).
pub fn save_clip_dir(dir: &Path, clip: &Clip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in clip.frames.iter().enumerate() {
        save_png(&dir.join(frame_file_name(t)), frame)?;
    }
    Ok(())
}

/// List immediate subdirectories of `root` in lexicographic order.
pub fn list_clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact() {
        let data: Vec<u8> = (0..48).map(|i| (i * 5 % 256) as u8).collect();
        let frame = frame_from_rgb8(&data, 4, 4);
        assert_eq!(frame_to_rgb8(&frame), data);
    }

    #[test]
    fn png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..192).map(|i| (i * 7 % 256) as u8).collect();
        let frame = frame_from_rgb8(&data, 8, 8);
        let path = dir.path().join("frame_00000.png");
        save_png(&path, &frame).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(frame, back);
    }

    #[test]
    fn clip_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Frame> = (0..3)
            .map(|t| {
                let data: Vec<u8> = (0..48).map(|i| ((i + t * 11) % 256) as u8).collect();
                frame_from_rgb8(&data, 4, 4)
            })
            .collect();
        let clip = Clip::new(frames, 24.0);
        let sub = dir.path().join("clip_000");
        save_clip_dir(&sub, &clip).unwrap();
        let back = load_clip_dir(&sub, 24.0).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in clip.frames.iter().zip(back.frames.iter()) {
            assert_eq!(a, b);
        }
    }
}
