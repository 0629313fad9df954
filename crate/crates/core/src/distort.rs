//! Parameterized image distortions, random distortion pipelines, cropping,
//! and synthesis of (reference, A, B) triplet datasets.
//!
//! Every distortion is a pure function of the input image and its spec; the
//! noise kinds draw from a ChaCha stream seeded by the spec's `seed`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::image::RgbImage;
use crate::trainer::TripletRecord;

/// One distortion kind with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Distortion {
    /// Independent N(0, sigma^2) per channel.
    GaussNoiseRgb {
        sigma: f64,
    },
    /// One N(0, sigma^2) sample per pixel, added to all three channels.
    GaussNoiseLuma {
        sigma: f64,
    },
    Blur {
        sigma: f64,
    },
    Posterize {
        levels: u32,
    },
    Gamma {
        gamma: f64,
    },
    /// Maps `[lo, hi]` affinely onto `[0, 255]`, clamping outside.
    ContrastRescale {
        lo: f64,
        hi: f64,
    },
    /// 8x8 block DCT quantization in YCbCr with JPEG tables scaled by quality.
    JpegLike {
        quality: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistortionKind {
    GaussNoiseRgb,
    GaussNoiseLuma,
    Blur,
    Posterize,
    Gamma,
    ContrastRescale,
    JpegLike,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 7] = [
        DistortionKind::GaussNoiseRgb,
        DistortionKind::GaussNoiseLuma,
        DistortionKind::Blur,
        DistortionKind::Posterize,
        DistortionKind::Gamma,
        DistortionKind::ContrastRescale,
        DistortionKind::JpegLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::GaussNoiseRgb => "gauss_noise_rgb",
            DistortionKind::GaussNoiseLuma => "gauss_noise_luma",
            DistortionKind::Blur => "blur",
            DistortionKind::Posterize => "posterize",
            DistortionKind::Gamma => "gamma",
            DistortionKind::ContrastRescale => "contrast_rescale",
            DistortionKind::JpegLike => "jpeg_like",
        }
    }
}

impl Distortion {
    pub fn kind(&self) -> DistortionKind {
        match self {
            Distortion::GaussNoiseRgb { .. } => DistortionKind::GaussNoiseRgb,
            Distortion::GaussNoiseLuma { .. } => DistortionKind::GaussNoiseLuma,
            Distortion::Blur { .. } => DistortionKind::Blur,
            Distortion::Posterize { .. } => DistortionKind::Posterize,
            Distortion::Gamma { .. } => DistortionKind::Gamma,
            Distortion::ContrastRescale { .. } => DistortionKind::ContrastRescale,
            Distortion::JpegLike { .. } => DistortionKind::JpegLike,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Distortion::GaussNoiseRgb { sigma } | Distortion::GaussNoiseLuma { sigma } | Distortion::Blur { sigma } => {
                precondition!(sigma.is_finite() && sigma >= 0.0, "sigma must be >= 0, got {}", sigma);
            }
            Distortion::Posterize { levels } => {
                precondition!(
                    (2..=256).contains(&levels),
                    "posterize levels must be in [2, 256], got {}",
                    levels
                );
            }
            Distortion::Gamma { gamma } => {
                precondition!(gamma > 0.0 && gamma <= 8.0, "gamma must be in (0, 8], got {}", gamma);
            }
            Distortion::ContrastRescale { lo, hi } => {
                precondition!(
                    lo >= 0.0 && lo < hi && hi <= 255.0,
                    "contrast bounds need 0 <= lo < hi <= 255, got [{}, {}]",
                    lo,
                    hi
                );
            }
            Distortion::JpegLike { quality } => {
                precondition!(
                    (1..=100).contains(&quality),
                    "jpeg quality must be in [1, 100], got {}",
                    quality
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    #[serde(flatten)]
    pub distortion: Distortion,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(distortion: Distortion, seed: u64) -> Self {
        DistortionSpec { distortion, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub steps: Vec<DistortionSpec>,
    pub seed: u64,
}

pub fn apply(image: &RgbImage, spec: &DistortionSpec) -> Result<RgbImage> {
    spec.distortion.validate()?;
    let out = match spec.distortion {
        Distortion::GaussNoiseRgb { sigma } => noise_rgb(image, sigma, spec.seed),
        Distortion::GaussNoiseLuma { sigma } => noise_luma(image, sigma, spec.seed),
        Distortion::Blur { sigma } => gaussian_blur(image, sigma),
        Distortion::Posterize { levels } => map_lut(image, &posterize_lut(levels)),
        Distortion::Gamma { gamma } => map_lut(image, &lut(|v| 255.0 * (v / 255.0).powf(gamma))),
        Distortion::ContrastRescale { lo, hi } => map_lut(image, &lut(|v| (v - lo) * 255.0 / (hi - lo))),
        Distortion::JpegLike { quality } => jpeg_like(image, quality),
    };
    Ok(out)
}

pub fn apply_pipeline(image: &RgbImage, pipeline: &PipelineSpec) -> Result<RgbImage> {
    precondition!(!pipeline.steps.is_empty(), "pipeline has no steps");
    let mut img = image.clone();
    for step in &pipeline.steps {
        img = apply(&img, step)?;
    }
    Ok(img)
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn lut(f: impl Fn(f64) -> f64) -> [u8; 256] {
    std::array::from_fn(|v| to_u8(f(v as f64)))
}

fn map_lut(image: &RgbImage, table: &[u8; 256]) -> RgbImage {
    let mut out = image.clone();
    for v in out.as_raw_mut() {
        *v = table[*v as usize];
    }
    out
}

/// Bin `floor(v * L / 256)`, mapped back to the centre of the bin's integer range.
fn posterize_lut(levels: u32) -> [u8; 256] {
    let l = levels as f64;
    std::array::from_fn(|v| {
        let bin = (v as u32 * levels / 256) as f64;
        to_u8((bin + 0.5) * 256.0 / l - 0.5)
    })
}

fn noise_rgb(image: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
    if sigma == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut out = image.clone();
    for v in out.as_raw_mut() {
        *v = to_u8(*v as f64 + normal.sample(&mut rng));
    }
    out
}

fn noise_luma(image: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
    if sigma == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut out = image.clone();
    for px in out.as_raw_mut().chunks_exact_mut(3) {
        let n = normal.sample(&mut rng);
        for v in px {
            *v = to_u8(*v as f64 + n);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, edge-replicate borders.
fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    if sigma == 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = image.dims();
    let src = image.as_raw();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + k as isize - r, w);
                    acc += wt * src[(y * w + sx) * 3 + c] as f64;
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = image.clone();
    let dst = out.as_raw_mut();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + k as isize - r, h);
                    acc += wt * tmp[(sy * w + x) * 3 + c];
                }
                dst[(y * w + x) * 3 + c] = to_u8(acc);
            }
        }
    }
    out
}

#[rustfmt::skip]
const LUMA_QUANT: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA_QUANT: [u32; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// The libjpeg quality scaling of a base quantization table.
pub fn scaled_quant_table(base: &[u32; 64], quality: u32) -> [u32; 64] {
    let q = quality.clamp(1, 100);
    let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
    std::array::from_fn(|i| ((base[i] * s + 50) / 100).max(1))
}

pub fn luma_quant_table(quality: u32) -> [u32; 64] {
    scaled_quant_table(&LUMA_QUANT, quality)
}

pub fn chroma_quant_table(quality: u32) -> [u32; 64] {
    scaled_quant_table(&CHROMA_QUANT, quality)
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    std::array::from_fn(|u| {
        let a = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        std::array::from_fn(|x| a * (((2 * x + 1) * u) as f64 * PI / 16.0).cos())
    })
}

fn quantize_block(block: &mut [f64; 64], table: &[u32; 64], basis: &[[f64; 8]; 8]) {
    // rows then columns
    let mut tmp = [0.0f64; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| basis[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut coef = [0.0f64; 64];
    for v in 0..8 {
        for u in 0..8 {
            coef[v * 8 + u] = (0..8).map(|y| basis[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    for (c, &q) in coef.iter_mut().zip(table) {
        *c = (*c / q as f64).round() * q as f64;
    }
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| basis[v][y] * coef[v * 8 + u]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|u| basis[u][x] * tmp[y * 8 + u]).sum();
        }
    }
}

/// JPEG-style block transform coding without entropy coding or chroma
/// subsampling. Partial edge blocks are padded by edge replication.
fn jpeg_like(image: &RgbImage, quality: u32) -> RgbImage {
    let (w, h) = image.dims();
    let n = w * h;
    // centred YCbCr planes
    let mut planes = vec![vec![0.0f64; n]; 3];
    for (p, px) in image.as_raw().chunks_exact(3).enumerate() {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        planes[0][p] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
        planes[1][p] = -0.168736 * r - 0.331264 * g + 0.5 * b;
        planes[2][p] = 0.5 * r - 0.418688 * g - 0.081312 * b;
    }

    let basis = dct_basis();
    let tables = [
        luma_quant_table(quality),
        chroma_quant_table(quality),
        chroma_quant_table(quality),
    ];
    for (plane, table) in planes.iter_mut().zip(&tables) {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0f64; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = plane[sy * w + sx];
                    }
                }
                quantize_block(&mut block, table, &basis);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        plane[(by + y) * w + bx + x] = block[y * 8 + x];
                    }
                }
            }
        }
    }

    let mut out = image.clone();
    for (p, px) in out.as_raw_mut().chunks_exact_mut(3).enumerate() {
        let (y, cb, cr) = (planes[0][p] + 128.0, planes[1][p], planes[2][p]);
        px[0] = to_u8(y + 1.402 * cr);
        px[1] = to_u8(y - 0.344136 * cb - 0.714136 * cr);
        px[2] = to_u8(y + 1.772 * cb);
    }
    out
}

/// Parameter ranges used when sampling random pipelines.
pub mod ranges {
    pub const NOISE_SIGMA: (f64, f64) = (1.0, 50.0);
    pub const BLUR_SIGMA: (f64, f64) = (0.5, 6.0);
    pub const POSTERIZE_LEVELS: (u32, u32) = (2, 32);
    pub const GAMMA: (f64, f64) = (0.5, 2.2);
    pub const JPEG_QUALITY: (u32, u32) = (10, 95);
    pub const CONTRAST_LO: (f64, f64) = (0.0, 64.0);
    pub const CONTRAST_HI: (f64, f64) = (192.0, 255.0);
}

fn sample_distortion(rng: &mut impl Rng) -> Distortion {
    use ranges::*;
    let kind = DistortionKind::ALL[rng.random_range(0..DistortionKind::ALL.len())];
    match kind {
        DistortionKind::GaussNoiseRgb => Distortion::GaussNoiseRgb {
            sigma: rng.random_range(NOISE_SIGMA.0..=NOISE_SIGMA.1),
        },
        DistortionKind::GaussNoiseLuma => Distortion::GaussNoiseLuma {
            sigma: rng.random_range(NOISE_SIGMA.0..=NOISE_SIGMA.1),
        },
        DistortionKind::Blur => Distortion::Blur {
            sigma: rng.random_range(BLUR_SIGMA.0..=BLUR_SIGMA.1),
        },
        DistortionKind::Posterize => Distortion::Posterize {
            levels: rng.random_range(POSTERIZE_LEVELS.0..=POSTERIZE_LEVELS.1),
        },
        DistortionKind::Gamma => Distortion::Gamma {
            gamma: rng.random_range(GAMMA.0..=GAMMA.1),
        },
        DistortionKind::ContrastRescale => Distortion::ContrastRescale {
            lo: rng.random_range(CONTRAST_LO.0..=CONTRAST_LO.1),
            hi: rng.random_range(CONTRAST_HI.0..=CONTRAST_HI.1),
        },
        DistortionKind::JpegLike => Distortion::JpegLike {
            quality: rng.random_range(JPEG_QUALITY.0..=JPEG_QUALITY.1),
        },
    }
}

/// Draws a pipeline of uniform length in `1..=max_len`, kinds uniform with
/// replacement, parameters uniform over [`ranges`].
pub fn sample_pipeline(seed: u64, max_len: usize) -> Result<PipelineSpec> {
    precondition!(max_len >= 1, "max_len must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(1..=max_len);
    let steps = (0..len)
        .map(|_| {
            let distortion = sample_distortion(&mut rng);
            DistortionSpec::new(distortion, rng.next_u64())
        })
        .collect();
    Ok(PipelineSpec { steps, seed })
}

/// Seeded top-left corner of a `size x size` crop of a `width x height` image.
pub fn crop_offset(width: usize, height: usize, size: usize, seed: u64) -> Result<(usize, usize)> {
    precondition!(
        width >= size && height >= size,
        "image {}x{} is smaller than the {}x{} crop",
        width,
        height,
        size,
        size
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rng.random_range(0..=width - size);
    let y = rng.random_range(0..=height - size);
    Ok((x, y))
}

pub fn random_crop(image: &RgbImage, size: usize, seed: u64) -> Result<RgbImage> {
    let (x, y) = crop_offset(image.width(), image.height(), size, seed)?;
    image.crop(x, y, size, size)
}

#[derive(Debug, Clone)]
pub struct TripletSynthesis {
    pub count: usize,
    pub seed: u64,
    pub max_len: usize,
    pub crop_size: usize,
}

impl Default for TripletSynthesis {
    fn default() -> Self {
        TripletSynthesis {
            count: 1,
            seed: 0,
            max_len: 3,
            crop_size: 224,
        }
    }
}

/// Pipelines used for one synthesized triplet, as written to `pipelines.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletProvenance {
    pub index: usize,
    pub reference: String,
    pub crop: (usize, usize),
    pub a: PipelineSpec,
    pub b: PipelineSpec,
}

pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const PIPELINES_FILE: &str = "pipelines.jsonl";

/// Synthesizes `cfg.count` triplets, cycling through `references`.
///
/// Triplet `i` draws from ChaCha stream `i` of the master seed: two
/// independent pipelines, then one crop position shared by O, A and B.
/// Writes `NNNNN_ref.ppm`, `NNNNN_a.ppm`, `NNNNN_b.ppm`, plus
/// [`TRIPLETS_FILE`] (zeroed votes) and [`PIPELINES_FILE`] into `out_dir`.
pub fn make_triplets(
    references: &[(String, RgbImage)],
    out_dir: &Path,
    cfg: &TripletSynthesis,
) -> Result<Vec<TripletRecord>> {
    precondition!(!references.is_empty(), "no reference images");
    precondition!(cfg.count >= 1, "triplet count must be at least 1");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let made: Vec<(TripletRecord, TripletProvenance)> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let (name, reference) = &references[i % references.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let pa = sample_pipeline(rng.next_u64(), cfg.max_len)?;
            let pb = sample_pipeline(rng.next_u64(), cfg.max_len)?;
            let crop = crop_offset(reference.width(), reference.height(), cfg.crop_size, rng.next_u64())
                .map_err(|e| Error::Data(format!("reference {name}: {e}")))?;

            let a = apply_pipeline(reference, &pa)?;
            let b = apply_pipeline(reference, &pb)?;
            let mut files = Vec::with_capacity(3);
            for (tag, img) in [("ref", reference), ("a", &a), ("b", &b)] {
                let file = format!("{i:05}_{tag}.ppm");
                img.crop(crop.0, crop.1, cfg.crop_size, cfg.crop_size)?
                    .write_ppm(out_dir.join(&file))?;
                files.push(file);
            }
            let [r, a, b]: [String; 3] = files.try_into().expect("three files");
            let record = TripletRecord {
                reference: r,
                a,
                b,
                votes_a: 0,
                votes_b: 0,
                votes_unsure: 0,
            };
            let provenance = TripletProvenance {
                index: i,
                reference: name.clone(),
                crop,
                a: pa,
                b: pb,
            };
            Ok((record, provenance))
        })
        .collect::<Result<_>>()?;

    let (records, provenance): (Vec<_>, Vec<_>) = made.into_iter().unzip();
    TripletRecord::write_jsonl(out_dir.join(TRIPLETS_FILE), &records)?;
    let mut lines = String::new();
    for p in &provenance {
        lines.push_str(&serde_json::to_string(p).expect("serializable"));
        lines.push('\n');
    }
    let path = out_dir.join(PIPELINES_FILE);
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        RgbImage::from_fn(w, h, |x, y| {
            let n: u8 = rng.random_range(0..40);
            [
                ((x * 255) / w) as u8 / 2 + n,
                (((x + y) * 7) % 200) as u8 + n / 2,
                if (x / 5 + y / 3) % 2 == 0 { 30 } else { 220 },
            ]
        })
    }

    fn spec(d: Distortion) -> DistortionSpec {
        DistortionSpec::new(d, 1234)
    }

    #[test]
    fn identity_settings_are_bit_exact() {
        let img = textured(37, 29);
        for d in [
            Distortion::Gamma { gamma: 1.0 },
            Distortion::Posterize { levels: 256 },
            Distortion::GaussNoiseRgb { sigma: 0.0 },
            Distortion::GaussNoiseLuma { sigma: 0.0 },
            Distortion::Blur { sigma: 0.0 },
            Distortion::ContrastRescale { lo: 0.0, hi: 255.0 },
        ] {
            assert_eq!(apply(&img, &spec(d)).unwrap(), img, "{d:?}");
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let img = textured(8, 8);
        for d in [
            Distortion::Gamma { gamma: 0.0 },
            Distortion::Gamma { gamma: 8.5 },
            Distortion::Posterize { levels: 1 },
            Distortion::Posterize { levels: 257 },
            Distortion::GaussNoiseRgb { sigma: -1.0 },
            Distortion::Blur { sigma: f64::NAN },
            Distortion::ContrastRescale { lo: 100.0, hi: 100.0 },
            Distortion::ContrastRescale { lo: 0.0, hi: 300.0 },
            Distortion::JpegLike { quality: 0 },
            Distortion::JpegLike { quality: 101 },
        ] {
            assert!(matches!(apply(&img, &spec(d)), Err(Error::Precondition(_))), "{d:?}");
        }
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let img = textured(20, 20);
        let d = Distortion::GaussNoiseRgb { sigma: 30.0 };
        let a = apply(&img, &DistortionSpec::new(d, 5)).unwrap();
        assert_eq!(a, apply(&img, &DistortionSpec::new(d, 5)).unwrap());
        assert_ne!(a, apply(&img, &DistortionSpec::new(d, 6)).unwrap());
        assert_ne!(a, img);
    }

    #[test]
    fn luma_noise_shifts_channels_together() {
        let img = RgbImage::filled(10, 10, [128, 128, 128]);
        let out = apply(&img, &spec(Distortion::GaussNoiseLuma { sigma: 10.0 })).unwrap();
        for px in out.as_raw().chunks_exact(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
    }

    #[test]
    fn posterize_levels() {
        let img = RgbImage::from_fn(256, 1, |x, _| [x as u8; 3]);
        let out = apply(&img, &spec(Distortion::Posterize { levels: 2 })).unwrap();
        let distinct: std::collections::BTreeSet<u8> = out.as_raw().iter().copied().collect();
        assert_eq!(distinct.into_iter().collect::<Vec<_>>(), vec![64, 192]);
        let out = apply(&img, &spec(Distortion::Posterize { levels: 16 })).unwrap();
        let distinct: std::collections::BTreeSet<u8> = out.as_raw().iter().copied().collect();
        assert_eq!(distinct.len(), 16);
    }

    #[test]
    fn gamma_and_contrast_values() {
        let img = RgbImage::filled(1, 1, [64, 128, 250]);
        let g = apply(&img, &spec(Distortion::Gamma { gamma: 2.0 })).unwrap();
        // 255 * (v/255)^2
        assert_eq!(g.pixel(0, 0), [16, 64, 245]);
        let c = apply(&img, &spec(Distortion::ContrastRescale { lo: 64.0, hi: 192.0 })).unwrap();
        assert_eq!(c.pixel(0, 0), [0, 128, 255]);
    }

    #[test]
    fn blur_preserves_constant_and_smooths_edge() {
        let flat = RgbImage::filled(16, 16, [90, 10, 200]);
        assert_eq!(apply(&flat, &spec(Distortion::Blur { sigma: 2.5 })).unwrap(), flat);
        let edge = RgbImage::from_fn(16, 4, |x, _| if x < 8 { [0; 3] } else { [255; 3] });
        let out = apply(&edge, &spec(Distortion::Blur { sigma: 1.5 })).unwrap();
        assert!(out.pixel(7, 0)[0] > 0 && out.pixel(8, 0)[0] < 255);
        assert_eq!(out.pixel(0, 0)[0], 0);
    }

    #[test]
    fn gaussian_kernel_radius_and_mass() {
        let k = gaussian_kernel(4.5);
        assert_eq!(k.len(), 2 * 14 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quant_table_scaling() {
        assert!(luma_quant_table(100).iter().all(|&q| q == 1));
        assert_eq!(luma_quant_table(50), LUMA_QUANT);
        // s = 5000/10 = 500: 16 -> (16*500+50)/100 = 80
        assert_eq!(luma_quant_table(10)[0], 80);
        // s = 200-180 = 20: 16 -> (320+50)/100 = 3
        assert_eq!(luma_quant_table(90)[0], 3);
    }

    /// Textbook DCT-II straight from the definition.
    fn naive_dct(block: &[f64; 64]) -> [f64; 64] {
        let c = |u: usize| if u == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
        std::array::from_fn(|k| {
            let (v, u) = (k / 8, k % 8);
            let mut s = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    s += block[y * 8 + x]
                        * (((2 * x + 1) * u) as f64 * PI / 16.0).cos()
                        * (((2 * y + 1) * v) as f64 * PI / 16.0).cos();
                }
            }
            0.25 * c(u) * c(v) * s
        })
    }

    #[test]
    fn constant_block_is_dc_only_and_survives_q100() {
        for value in [0.0, 17.3, -128.0, 99.9] {
            let block = [value; 64];
            let coef = naive_dct(&block);
            assert!((coef[0] - 8.0 * value).abs() < 1e-9);
            assert!(coef[1..].iter().all(|c| c.abs() < 1e-9));
        }
        for rgb in [[0, 0, 0], [255, 255, 255], [12, 200, 77], [128, 64, 250], [3, 254, 129]] {
            let img = RgbImage::filled(19, 13, rgb);
            assert_eq!(
                apply(&img, &spec(Distortion::JpegLike { quality: 100 })).unwrap(),
                img,
                "{rgb:?}"
            );
        }
    }

    #[test]
    fn block_transform_matches_naive_dct() {
        let basis = dct_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block: [f64; 64] = std::array::from_fn(|_| rng.random_range(-128.0..128.0));
        // with a unit table only the rounding of coefficients remains
        let mut quantized = block;
        quantize_block(&mut quantized, &[1; 64], &basis);
        let coef = naive_dct(&block);
        let rounded: [f64; 64] = std::array::from_fn(|i| coef[i].round());
        let mut back = rounded;
        // inverse of the orthonormal transform is its transpose
        let mut tmp = [0.0; 64];
        for y in 0..8 {
            for u in 0..8 {
                tmp[y * 8 + u] = (0..8).map(|v| basis[v][y] * rounded[v * 8 + u]).sum();
            }
        }
        for y in 0..8 {
            for x in 0..8 {
                back[y * 8 + x] = (0..8).map(|u| basis[u][x] * tmp[y * 8 + u]).sum();
            }
        }
        for i in 0..64 {
            assert!((back[i] - quantized[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn jpeg_error_non_increasing_in_quality() {
        let img = textured(64, 48);
        let energy = |q| {
            let out = apply(&img, &spec(Distortion::JpegLike { quality: q })).unwrap();
            img.as_raw()
                .iter()
                .zip(out.as_raw())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
        };
        let e: Vec<f64> = [10, 30, 50, 70, 90].into_iter().map(energy).collect();
        assert!(e.windows(2).all(|p| p[1] <= p[0]), "{e:?}");
        assert!(e[0] > 0.0);
    }

    #[test]
    fn spec_json_shape() {
        let s = DistortionSpec::new(Distortion::Blur { sigma: 4.5 }, 9);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"kind":"blur","params":{"sigma":4.5},"seed":9}"#);
        let back: DistortionSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let c: DistortionSpec =
            serde_json::from_str(r#"{"kind":"contrast_rescale","params":{"lo":3,"hi":200},"seed":1}"#).unwrap();
        assert_eq!(c.distortion, Distortion::ContrastRescale { lo: 3.0, hi: 200.0 });
    }

    #[test]
    fn pipeline_sampling() {
        assert_eq!(sample_pipeline(42, 4).unwrap(), sample_pipeline(42, 4).unwrap());
        for seed in 0..50 {
            let p = sample_pipeline(seed, 1).unwrap();
            assert_eq!(p.steps.len(), 1);
            let p = sample_pipeline(seed, 5).unwrap();
            assert!((1..=5).contains(&p.steps.len()));
            for s in &p.steps {
                s.distortion.validate().unwrap();
            }
        }
        assert!(sample_pipeline(0, 0).is_err());
    }

    #[test]
    fn crop_behaviour() {
        let img = textured(224, 224);
        assert_eq!(random_crop(&img, 224, 3).unwrap(), img);
        let big = textured(300, 260);
        let c = random_crop(&big, 224, 8).unwrap();
        let (x, y) = crop_offset(300, 260, 224, 8).unwrap();
        assert_eq!(c, big.crop(x, y, 224, 224).unwrap());
        assert_eq!(c.pixel(10, 20), big.pixel(x + 10, y + 20));
        assert!(random_crop(&textured(223, 300), 224, 0).is_err());
    }
}
