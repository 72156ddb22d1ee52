//! Flat binary image and label files.
//!
//! Images: `b"HCIMIMG1"`, then `n, channels, height, width` as u32 LE, then
//! `n * channels * height * width` u8 pixels in `(image, channel, row, col)` order.
//! Labels: `b"HCIMLBL1"`, then `n` as u32 LE, then `n` u8 labels.

use std::path::Path;

use crate::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 8] = b"HCIMIMG1";
pub const LABEL_MAGIC: &[u8; 8] = b"HCIMLBL1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} pixels for {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// First `n` images (all of them when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let (shape, pixels) = read_images(images)?;
        let lab = read_labels(labels)?;
        if pixels.len() != lab.len() * shape.0 * shape.1 * shape.2 {
            return Err(bad(labels, "label count does not match image count"));
        }
        Self::new(shape, pixels, lab)
    }

    pub fn save(&self, images: &Path, labels: &Path) -> Result<()> {
        write_images(images, (self.channels, self.height, self.width), &self.pixels)?;
        write_labels(labels, &self.labels)
    }
}

fn u32_at(b: &[u8], off: usize) -> usize {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]]) as usize
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_images(path: &Path) -> Result<((usize, usize, usize), Vec<u8>)> {
    let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if b.len() < 24 || &b[..8] != IMAGE_MAGIC {
        return Err(bad(path, "not an image file"));
    }
    let (n, c, h, w) = (u32_at(&b, 8), u32_at(&b, 12), u32_at(&b, 16), u32_at(&b, 20));
    if b.len() != 24 + n * c * h * w {
        return Err(bad(
            path,
            format!("{} pixel bytes, header says {n}x{c}x{h}x{w}", b.len() - 24),
        ));
    }
    Ok(((c, h, w), b[24..].to_vec()))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if b.len() < 12 || &b[..8] != LABEL_MAGIC {
        return Err(bad(path, "not a label file"));
    }
    let n = u32_at(&b, 8);
    if b.len() != 12 + n {
        return Err(bad(path, format!("{} labels, header says {n}", b.len() - 12)));
    }
    Ok(b[12..].to_vec())
}

pub fn write_images(path: &Path, (c, h, w): (usize, usize, usize), pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (c * h * w).max(1);
    let mut b = IMAGE_MAGIC.to_vec();
    for v in [n, c, h, w] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.extend_from_slice(pixels);
    std::fs::write(path, b).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut b = LABEL_MAGIC.to_vec();
    b.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    b.extend_from_slice(labels);
    std::fs::write(path, b).map_err(|e| Error::io(path, e))
}
