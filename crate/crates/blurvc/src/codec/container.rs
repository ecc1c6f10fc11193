//! The `.bvc` bitstream container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BVC1" | version u8 | mode u8 | width u32 | height u32
//! | frame_count u32 | gop_size u16 | model_id u64          (28-byte header)
//! then per frame:
//!   frame_type u8 (0 = intra, 1 = predicted)
//!   intra:     1 section  [len u32 | bytes]   (first byte = adapter id)
//!   predicted: 3 sections [len u32 | bytes]   (blur-residual, motion, residual)
//! ```
//!
//! The reader consumes exactly the declared lengths and rejects trailing
//! bytes, truncation, and header corruption.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::entropy::coder::{read_latent_section, write_latent_section};
use crate::{Error, Result};

use super::CodecMode;

pub const MAGIC: [u8; 4] = *b"BVC1";
pub const VERSION: u8 = 1;
/// Fixed header size in bytes.
pub const HEADER_BYTES: usize = 28;

/// Fixed-size stream header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerHeader {
    pub mode: CodecMode,
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub gop_size: u16,
    pub model_id: u64,
}

/// Coded payloads of one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameSections {
    /// Single intra payload; its first byte names the adapter.
    Intra { payload: Vec<u8> },
    /// The three predicted-frame streams. `blur` is empty in preserve mode.
    Predicted { blur: Vec<u8>, motion: Vec<u8>, residual: Vec<u8> },
}

impl FrameSections {
    pub fn is_intra(&self) -> bool {
        matches!(self, FrameSections::Intra { .. })
    }

    /// Total payload bytes including the length prefixes and type byte.
    pub fn wire_bytes(&self) -> usize {
        match self {
            FrameSections::Intra { payload } => 1 + 4 + payload.len(),
            FrameSections::Predicted { blur, motion, residual } => {
                1 + 3 * 4 + blur.len() + motion.len() + residual.len()
            }
        }
    }
}

/// A parsed (or under-construction) bitstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub frames: Vec<FrameSections>,
}

impl Container {
    /// Total serialized size in bytes.
    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + self.frames.iter().map(FrameSections::wire_bytes).sum::<usize>()
    }

    /// Coded bits per pixel: everything after the header, over all pixels.
    pub fn bpp(&self) -> f64 {
        let pixels =
            self.header.width as f64 * self.header.height as f64 * self.header.frame_count as f64;
        ((self.total_bytes() - HEADER_BYTES) * 8) as f64 / pixels
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(format!("container write failed: {e}"));
        w.write_all(&MAGIC).map_err(io)?;
        w.write_u8(VERSION).map_err(io)?;
        w.write_u8(self.header.mode as u8).map_err(io)?;
        w.write_u32::<LittleEndian>(self.header.width).map_err(io)?;
        w.write_u32::<LittleEndian>(self.header.height).map_err(io)?;
        w.write_u32::<LittleEndian>(self.header.frame_count).map_err(io)?;
        w.write_u16::<LittleEndian>(self.header.gop_size).map_err(io)?;
        w.write_u64::<LittleEndian>(self.header.model_id).map_err(io)?;
        for f in &self.frames {
            let mut buf = Vec::new();
            match f {
                FrameSections::Intra { payload } => {
                    buf.push(0u8);
                    write_latent_section(&mut buf, payload);
                }
                FrameSections::Predicted { blur, motion, residual } => {
                    buf.push(1u8);
                    write_latent_section(&mut buf, blur);
                    write_latent_section(&mut buf, motion);
                    write_latent_section(&mut buf, residual);
                }
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    /// Parse a container, consuming the reader to exact end-of-stream.
    pub fn read_from(r: &mut impl Read) -> Result<Container> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("container truncated before magic".into()))?;
        if magic != MAGIC {
            return Err(Error::Format("not a coded video stream (bad magic)".into()));
        }
        let version = r.read_u8().map_err(|_| Error::Format("container truncated at version".into()))?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let mode_raw = r.read_u8().map_err(|_| Error::Format("container truncated at mode".into()))?;
        let mode = CodecMode::from_u8(mode_raw)
            .ok_or_else(|| Error::Format(format!("unknown codec mode {mode_raw}")))?;
        let trunc = |what: &str| Error::Format(format!("container truncated at {what}"));
        let width = r.read_u32::<LittleEndian>().map_err(|_| trunc("width"))?;
        let height = r.read_u32::<LittleEndian>().map_err(|_| trunc("height"))?;
        let frame_count = r.read_u32::<LittleEndian>().map_err(|_| trunc("frame count"))?;
        let gop_size = r.read_u16::<LittleEndian>().map_err(|_| trunc("gop size"))?;
        let model_id = r.read_u64::<LittleEndian>().map_err(|_| trunc("model id"))?;
        if width == 0 || height == 0 {
            return Err(Error::Format("container declares zero-sized frames".into()));
        }
        if gop_size == 0 {
            return Err(Error::Format("container declares gop size 0".into()));
        }

        let mut frames = Vec::with_capacity(frame_count as usize);
        for i in 0..frame_count {
            let ftype = r
                .read_u8()
                .map_err(|_| Error::Format(format!("container truncated at frame {i} type")))?;
            let sec = |r: &mut dyn Read, name: &str| {
                read_latent_section(r).map_err(|e| {
                    Error::Format(format!("frame {i} {name} section unreadable: {e}"))
                })
            };
            let f = match ftype {
                0 => FrameSections::Intra { payload: sec(r, "intra")? },
                1 => FrameSections::Predicted {
                    blur: sec(r, "blur-residual")?,
                    motion: sec(r, "motion")?,
                    residual: sec(r, "residual")?,
                },
                other => {
                    return Err(Error::Format(format!("frame {i} has unknown type {other}")))
                }
            };
            frames.push(f);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|_| trunc("end of stream"))? != 0 {
            return Err(Error::Format("trailing bytes after the last frame".into()));
        }
        let c = Container {
            header: ContainerHeader { mode, width, height, frame_count, gop_size, model_id },
            frames,
        };
        c.validate()?;
        Ok(c)
    }

    /// Structural validation: frame count, GOP pattern, per-mode emptiness
    /// rules, and nonempty coded sections where content is mandatory.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.header.frame_count as usize {
            return Err(Error::Format(format!(
                "container declares {} frames but carries {}",
                self.header.frame_count,
                self.frames.len()
            )));
        }
        if self.header.gop_size == 0 {
            return Err(Error::Format("gop size must be at least 1".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let should_be_intra = i % self.header.gop_size as usize == 0;
            if f.is_intra() != should_be_intra {
                return Err(Error::Format(format!(
                    "frame {i} breaks the GOP pattern (gop size {})",
                    self.header.gop_size
                )));
            }
            match f {
                FrameSections::Intra { payload } => {
                    if payload.is_empty() {
                        return Err(Error::Format(format!("frame {i}: empty intra payload")));
                    }
                }
                FrameSections::Predicted { blur, .. } => {
                    if self.header.mode == CodecMode::Preserve && !blur.is_empty() {
                        return Err(Error::Format(format!(
                            "frame {i}: blur-residual bytes present in preserve mode"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
