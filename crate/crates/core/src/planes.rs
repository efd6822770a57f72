//! Little-endian planar `f32` container shared by field dumps and feature
//! sidecars.
//!
//! Layout: `magic[4]`, `version: u32`, `height: u32`, `width: u32`, an
//! optional `channels: u32` (feature sidecars only), then each plane as
//! `height * width` row-major `f32` values.

use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanesError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("implausible dimensions {height}x{width}x{channels}")]
    Dimensions {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("trailing bytes after last plane")]
    Trailing,
}

pub(crate) fn write_planes<W: Write>(
    mut out: W,
    magic: [u8; 4],
    version: u32,
    height: usize,
    width: usize,
    channels: Option<usize>,
    planes: &[&[f64]],
) -> io::Result<()> {
    let mut buf = Vec::with_capacity(20 + planes.len() * height * width * 4);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    if let Some(c) = channels {
        buf.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for p in planes {
        debug_assert_eq!(p.len(), height * width);
        for &x in p.iter() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a container. `fixed_planes` is the plane count for headers without
/// a channel field; `None` means the header carries one.
pub(crate) fn read_planes<R: Read>(
    mut input: R,
    magic: [u8; 4],
    version: u32,
    fixed_planes: Option<usize>,
) -> Result<(usize, usize, Vec<Vec<f64>>), PlanesError> {
    let mut m = [0u8; 4];
    input.read_exact(&mut m)?;
    if m != magic {
        return Err(PlanesError::BadMagic {
            found: m,
            expected: magic,
        });
    }
    let ver = read_u32(&mut input)?;
    if ver != version {
        return Err(PlanesError::Version(ver));
    }
    let height = read_u32(&mut input)? as usize;
    let width = read_u32(&mut input)? as usize;
    let channels = match fixed_planes {
        Some(n) => n,
        None => read_u32(&mut input)? as usize,
    };
    let n = height.saturating_mul(width);
    if height == 0 || width == 0 || channels == 0 || n > 1 << 26 || channels > 1 << 12 {
        return Err(PlanesError::Dimensions {
            height,
            width,
            channels,
        });
    }
    let mut raw = vec![0u8; n * channels * 4];
    input.read_exact(&mut raw)?;
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(PlanesError::Trailing);
    }
    let planes = raw
        .chunks_exact(n * 4)
        .map(|plane| {
            plane
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        })
        .collect();
    Ok((height, width, planes))
}
