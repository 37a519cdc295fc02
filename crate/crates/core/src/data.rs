//! Training imagery: decoding, normalization to [-1, 1], random patch
//! extraction, and synthetic textures with known periodicity.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// 8-bit channel value to [-1, 1].
#[inline]
pub fn normalize_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// [-1, 1] to the nearest 8-bit channel value (saturating).
#[inline]
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// An RGB image stored row-major as interleaved `f64` channels in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FloatImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| normalize_u8(v)).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| denormalize(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer matches dimensions")
    }

    /// Decode a PNG or JPEG (8-bit sRGB, no color conversion).
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })
    }

    /// Uniformly rescale with a triangle filter.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(config_err("rescale factor must be positive"));
        }
        let h = ((self.height as f64 * factor).round() as u32).max(1);
        let w = ((self.width as f64 * factor).round() as u32).max(1);
        let resized = image::imageops::resize(&self.to_rgb8(), w, h, image::imageops::FilterType::Triangle);
        Ok(Self::from_rgb8(&resized))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        let mut out = Self::new(h, w);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            out.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }

    /// Sample `n` of an (N, 3, H, W) tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let mut img = Self::new(h, w);
        let s = t.sample(n);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.data[(y * w + x) * 3 + ch] = s[(ch * h + y) * w + x];
                }
            }
        }
        Ok(img)
    }

    /// Copy into sample `n` of an (N, 3, H, W) tensor.
    pub fn write_into(&self, t: &mut Tensor, n: usize) {
        let (h, w) = (self.height, self.width);
        let s = t.sample_mut(n);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    s[(ch * h + y) * w + x] = self.data[(y * w + x) * 3 + ch];
                }
            }
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros([1, 3, self.height, self.width]);
        self.write_into(&mut t, 0);
        t
    }

    /// Per-pixel mean over the channels.
    pub fn luminance(&self) -> Vec<f64> {
        self.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    SingleImage,
    Folder,
}

/// Decoded training images, every one at least `patch_size` on each side.
#[derive(Clone, Debug)]
pub struct ImageSource {
    pub kind: SourceKind,
    pub paths: Vec<PathBuf>,
    pub images: Vec<FloatImage>,
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

impl ImageSource {
    /// Load one image file or every PNG/JPEG in a directory (sorted by name).
    pub fn load(path: &Path, patch_size: usize, rescale: Option<f64>) -> Result<Self> {
        let (kind, paths) = if path.is_dir() {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_file(p))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(config_err(format!(
                    "no PNG or JPEG images in {}",
                    path.display()
                )));
            }
            (SourceKind::Folder, paths)
        } else if path.is_file() {
            (SourceKind::SingleImage, vec![path.to_path_buf()])
        } else {
            return Err(config_err(format!("image path {} does not exist", path.display())));
        };
        let mut images = Vec::with_capacity(paths.len());
        for p in &paths {
            let mut img = FloatImage::load(p)?;
            if let Some(f) = rescale {
                img = img.rescaled(f)?;
            }
            images.push(img);
        }
        let source = Self { kind, paths, images };
        source.validate(patch_size)?;
        Ok(source)
    }

    pub fn from_images(images: Vec<FloatImage>, patch_size: usize) -> Result<Self> {
        let kind = if images.len() == 1 {
            SourceKind::SingleImage
        } else {
            SourceKind::Folder
        };
        let source = Self {
            kind,
            paths: Vec::new(),
            images,
        };
        source.validate(patch_size)?;
        Ok(source)
    }

    fn validate(&self, patch_size: usize) -> Result<()> {
        if self.images.is_empty() {
            return Err(config_err("image source is empty"));
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.height() < patch_size || img.width() < patch_size {
                let name = self
                    .paths
                    .get(i)
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| format!("image #{i}"));
                return Err(config_err(format!(
                    "{name} is {}x{}, smaller than the {patch_size}x{patch_size} patch size",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(())
    }
}

/// Where one patch was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

/// Uniformly random image, then uniformly random valid top-left corner.
pub fn sample_patch_origin<R: Rng + ?Sized>(source: &ImageSource, patch_size: usize, rng: &mut R) -> PatchOrigin {
    let image = rng.random_range(0..source.images.len());
    let img = &source.images[image];
    PatchOrigin {
        image,
        y: rng.random_range(0..=img.height() - patch_size),
        x: rng.random_range(0..=img.width() - patch_size),
    }
}

/// A `(batch, 3, patch_size, patch_size)` tensor of random crops.
pub fn sample_patch_batch<R: Rng + ?Sized>(
    source: &ImageSource,
    patch_size: usize,
    batch: usize,
    rng: &mut R,
) -> Tensor {
    let mut out = Tensor::zeros([batch, 3, patch_size, patch_size]);
    for n in 0..batch {
        let o = sample_patch_origin(source, patch_size, rng);
        source.images[o.image]
            .crop(o.y, o.x, patch_size, patch_size)
            .write_into(&mut out, n);
    }
    out
}

/// Synthetic textures with known ground-truth periodicity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SynthKind {
    /// Cosine stripes; `angle` (radians) is the direction of variation,
    /// measured from the column (x) axis toward the row (y) axis.
    Stripes { period: f64, angle: f64 },
    /// Squares of side `period / 2`, repeating every `period` pixels on both axes.
    Checkerboard { period: f64 },
    /// Three-wave hexagonal lattice with spacing `period` along x.
    Hexgrid { period: f64 },
    /// Low-pass filtered white noise.
    ColoredNoise { seed: u64 },
}

pub fn synth_texture(kind: &SynthKind, height: usize, width: usize) -> Result<FloatImage> {
    let period = match kind {
        SynthKind::Stripes { period, .. } | SynthKind::Checkerboard { period } | SynthKind::Hexgrid { period } => {
            Some(*period)
        }
        SynthKind::ColoredNoise { .. } => None,
    };
    if let Some(p) = period {
        if !(p >= 2.0) {
            return Err(config_err("synthetic texture period must be >= 2 pixels"));
        }
    }
    let mut img = FloatImage::new(height, width);
    let gray = |img: &mut FloatImage, f: &dyn Fn(f64, f64) -> f64| {
        for y in 0..height {
            for x in 0..width {
                let v = f(y as f64, x as f64);
                for c in 0..3 {
                    img.set(y, x, c, v);
                }
            }
        }
    };
    match *kind {
        SynthKind::Stripes { period, angle } => {
            let (s, c) = angle.sin_cos();
            gray(&mut img, &|y, x| 0.9 * (TAU * (x * c + y * s) / period).cos());
        }
        SynthKind::Checkerboard { period } => {
            let half = period / 2.0;
            gray(&mut img, &|y, x| {
                let parity = ((y / half).floor() + (x / half).floor()) as i64;
                if parity.rem_euclid(2) == 0 {
                    0.8
                } else {
                    -0.8
                }
            });
        }
        SynthKind::Hexgrid { period } => {
            // reciprocal vectors of a triangular lattice with spacing `period` along x
            let k = 4.0 * PI / (3f64.sqrt() * period);
            let dirs: Vec<(f64, f64)> = [PI / 6.0, PI / 2.0, 5.0 * PI / 6.0]
                .iter()
                .map(|a| (k * a.cos(), k * a.sin()))
                .collect();
            gray(&mut img, &|y, x| {
                let s: f64 = dirs.iter().map(|(kx, ky)| (kx * x + ky * y).cos()).sum();
                // s ranges over [-1.5, 3]
                (s + 1.5) / 4.5 * 1.8 - 0.9
            });
        }
        SynthKind::ColoredNoise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for c in 0..3 {
                let mut plane: Vec<f64> = (0..height * width).map(|_| rng.random_range(-1.0..1.0)).collect();
                for _ in 0..3 {
                    plane = box_blur(&plane, height, width, 2);
                }
                let max = plane.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                for (i, v) in plane.iter().enumerate() {
                    img.data[i * 3 + c] = 0.9 * v / max;
                }
            }
        }
    }
    Ok(img)
}

/// Separable circular box blur of radius `r`.
fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let norm = (2 * r + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in 0..=2 * r {
                s += src[y * w + (x + w * r + d - r) % w];
            }
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in 0..=2 * r {
                s += tmp[((y + h * r + d - r) % h) * w + x];
            }
            out[y * w + x] = s / norm;
        }
    }
    out
}
