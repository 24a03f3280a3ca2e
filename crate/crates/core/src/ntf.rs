//! NTF1 tensor files and PGM previews.
//!
//! NTF1 layout: magic `NTF1`, u32 LE rank, rank x u32 LE dims, then the
//! f32 LE payload in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const MAGIC: &[u8; 4] = b"NTF1";

#[derive(Debug, Clone, PartialEq)]
pub struct NtfTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NtfTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        NtfTensor { dims, data }
    }
}

pub fn encode(dims: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<NtfTensor> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing NTF1 magic"));
    }
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = word(4)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for r in 0..rank {
        dims.push(word(8 + 4 * r)? as usize);
    }
    let start = 8 + 4 * rank;
    let count: usize = dims.iter().product();
    if bytes.len() != start + 4 * count {
        return Err(bad(&format!(
            "payload is {} bytes, dims {:?} need {}",
            bytes.len().saturating_sub(start),
            dims,
            4 * count
        )));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(NtfTensor { dims, data })
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    write_bytes(path, &encode(dims, data))
}

pub fn read_tensor(path: &Path) -> Result<NtfTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_tensor(path, &[img.height, img.width], &img.pixels)
}

/// Reads a rank-2 tensor as an image. Modality and id are left at their
/// defaults; callers that know them set them with [`Image::with_meta`].
pub fn read_image(path: &Path) -> Result<Image> {
    let t = read_tensor(path)?;
    if t.dims.len() != 2 {
        return Err(Error::format(path, format!("expected rank-2 image, got dims {:?}", t.dims)));
    }
    Ok(Image::new(t.dims[0], t.dims[1], t.data, crate::image::Modality::A, 0))
}

pub fn pgm_bytes(height: usize, width: usize, pixels: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[f32]) -> Result<()> {
    write_bytes(path, &pgm_bytes(height, width, pixels))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
