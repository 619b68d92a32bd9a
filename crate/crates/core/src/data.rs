//! Procedural object-centric images: one colored shape on a textured
//! background, with its pixel bounding box.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{contract, Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const DATASET_MAGIC: &[u8; 4] = b"AMDS";
pub const DATASET_VERSION: u32 = 1;

const MIN_SIDE: usize = 16;
const MAX_SIDE: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [Self::Circle, Self::Square, Self::Triangle, Self::Cross, Self::Ring];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Whether the pixel centered at `(y, x)` (relative to the box corner)
    /// belongs to the shape inscribed in an `s×s` box.
    fn covers(self, y: usize, x: usize, s: usize) -> bool {
        let sf = s as f64;
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let (dy, dx) = (fy - sf / 2.0, fx - sf / 2.0);
        let r2 = dy * dy + dx * dx;
        match self {
            Self::Circle => r2 <= (sf / 2.0) * (sf / 2.0),
            Self::Square => true,
            Self::Triangle => {
                // Apex at the top center, base along the bottom row.
                dx.abs() <= (fy / 2.0).max(0.5)
            }
            Self::Cross => {
                let arm = sf / 6.0;
                dx.abs() <= arm || dy.abs() <= arm
            }
            Self::Ring => {
                let outer = sf / 2.0;
                let inner = sf / 4.0;
                r2 <= outer * outer && r2 >= inner * inner
            }
        }
    }
}

/// Pixel rectangle, `top/left` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Indices of the `p×p` patches (row-major over a grid `grid_w` wide)
/// whose area intersects `bbox`.
pub fn bbox_to_patches(bbox: &BBox, p: usize, grid_w: usize) -> Vec<usize> {
    if bbox.height == 0 || bbox.width == 0 {
        return Vec::new();
    }
    let (r0, r1) = (bbox.top / p, (bbox.top + bbox.height - 1) / p);
    let (c0, c1) = (bbox.left / p, (bbox.left + bbox.width - 1) / p);
    (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| r * grid_w + c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    /// `[c×h×w]`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: ShapeClass,
    pub bbox: BBox,
}

impl ShapeSample {
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[CHANNELS, IMAGE_SIZE, IMAGE_SIZE], |i| T::of(f64::from(self.image[i])))
    }

    pub fn bbox_patches(&self, p: usize) -> Vec<usize> {
        bbox_to_patches(&self.bbox, p, IMAGE_SIZE / p)
    }
}

/// Renders sample `index` of the dataset identified by `seed`. Also returns
/// the foreground membership grid (`h×w`).
pub fn generate_sample_with_mask(seed: u64, index: usize, noise_level: f64) -> (ShapeSample, Vec<bool>) {
    let mut rng = stream(seed, "data.sample", index as u64);
    let label = ShapeClass::ALL[index % ShapeClass::ALL.len()];
    let side = rng.gen_range(MIN_SIDE..=MAX_SIDE);
    let top = rng.gen_range(0..=IMAGE_SIZE - side);
    let left = rng.gen_range(0..=IMAGE_SIZE - side);
    let bbox = BBox {
        top,
        left,
        height: side,
        width: side,
    };

    // Grey background; the shape carries all of the hue.
    let base = [rng.gen_range(0.25..0.75); CHANNELS];
    let fg: [f64; CHANNELS] = loop {
        let c: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen::<f64>());
        if c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() >= 0.6 {
            break c;
        }
    };
    // Two low-frequency plane waves per channel.
    let waves: Vec<(f64, f64, f64, f64)> = (0..2 * CHANNELS)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.5..2.0) * std::f64::consts::TAU / IMAGE_SIZE as f64;
            (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU), 0.08)
        })
        .collect();

    let hw = IMAGE_SIZE * IMAGE_SIZE;
    let mut mask = vec![false; hw];
    for y in 0..side {
        for x in 0..side {
            if label.covers(y, x, side) {
                mask[(top + y) * IMAGE_SIZE + left + x] = true;
            }
        }
    }
    let mut image = vec![0f32; CHANNELS * hw];
    for c in 0..CHANNELS {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let i = y * IMAGE_SIZE + x;
                let clean = if mask[i] {
                    fg[c]
                } else {
                    let (yf, xf) = (y as f64, x as f64);
                    base[c]
                        + waves[2 * c..2 * c + 2]
                            .iter()
                            .map(|&(ky, kx, phase, amp)| amp * (ky * yf + kx * xf + phase).sin())
                            .sum::<f64>()
                };
                let noise = if noise_level > 0.0 {
                    rng.gen_range(-noise_level..=noise_level)
                } else {
                    0.0
                };
                image[c * hw + i] = (clean + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    (ShapeSample { image, label, bbox }, mask)
}

pub fn generate_sample(seed: u64, index: usize, noise_level: f64) -> ShapeSample {
    generate_sample_with_mask(seed, index, noise_level).0
}

/// `count` samples, classes assigned round-robin.
pub fn generate_dataset(count: usize, seed: u64, noise_level: f64) -> Result<Vec<ShapeSample>> {
    if count == 0 {
        return Err(contract("dataset needs at least one sample"));
    }
    if !(noise_level >= 0.0) {
        return Err(contract(format!("noise level must be non-negative, got {noise_level}")));
    }
    Ok((0..count)
        .into_par_iter()
        .map(|i| generate_sample(seed, i, noise_level))
        .collect())
}

pub fn write_dataset(path: &Path, samples: &[ShapeSample]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + samples.len() * (CHANNELS * IMAGE_SIZE * IMAGE_SIZE * 4 + 9));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for dim in [CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for s in samples {
        for v in &s.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(s.label.index() as u8);
        for v in [s.bbox.top, s.bbox.left, s.bbox.height, s.bbox.width] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ShapeSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Vec<ShapeSample>> {
    let bad = |reason: String| Error::Format { kind: "dataset", reason };
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).map_err(bad)? != DATASET_MAGIC {
        return Err(bad("missing AMDS magic".into()));
    }
    let version = cur.u32().map_err(bad)?;
    if version != DATASET_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = cur.u32().map_err(bad)? as usize;
    let dims = [cur.u32().map_err(bad)?, cur.u32().map_err(bad)?, cur.u32().map_err(bad)?];
    if dims.map(|d| d as usize) != [CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(bad(format!("unsupported image dims {dims:?}")));
    }
    let len = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = cur.take(4 * len).map_err(bad)?;
        let image = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let label_byte = cur.take(1).map_err(bad)?[0];
        let label = ShapeClass::from_index(label_byte as usize).ok_or_else(|| bad(format!("label {label_byte}")))?;
        let mut b = [0usize; 4];
        for v in &mut b {
            *v = cur.u16().map_err(bad)? as usize;
        }
        let bbox = BBox {
            top: b[0],
            left: b[1],
            height: b[2],
            width: b[3],
        };
        if bbox.top + bbox.height > IMAGE_SIZE || bbox.left + bbox.width > IMAGE_SIZE {
            return Err(bad(format!("bbox {bbox:?} outside the image")));
        }
        samples.push(ShapeSample { image, label, bbox });
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    Ok(samples)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| "truncated file".to_string())?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}
