//! Per-pixel decomposition of the metric, overlay rendering, the scale
//! pyramid probe and region scrambling.
//!
//! A heatmap is the metric without its spatial sum: each tap's channel-summed
//! absolute difference is scaled by its weight and spread back to input
//! resolution by block replication, each copy divided by the block area. The
//! pixels of a heatmap therefore sum to the scalar metric.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distort::{apply, Distortion, DistortionSpec};
use crate::error::{precondition, Error, Result};
use crate::image::{decode_pgm16, encode_pgm16, RgbImage};
use crate::metric::{check_same_dims, MetricWeights, Reduction};
use crate::tensor::Tensor;
use crate::vgg::{image_features, FeatureSet, VggWeights, MIN_INPUT_SIZE, TAP_COUNT};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    map: Tensor,
}

impl Heatmap {
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        Ok(Heatmap {
            map: Tensor::new(1, height, width, values)?,
        })
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn values(&self) -> &[f32] {
        self.map.data()
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.map.get(0, y, x)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.map
    }

    pub fn sum(&self) -> f64 {
        self.map.data().iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.map.data().iter().fold(0.0f32, |m, &v| m.max(v))
    }

    /// Quantizes to 16 bits; returns the samples and the factor such that
    /// `value ~= sample * factor`. Negative values clamp to zero.
    pub fn quantize(&self) -> (Vec<u16>, f64) {
        let max = self.max() as f64;
        let factor = if max > 0.0 { max / 65535.0 } else { 1.0 };
        let samples = self
            .values()
            .iter()
            .map(|&v| (v as f64 / factor).round().clamp(0.0, 65535.0) as u16)
            .collect();
        (samples, factor)
    }

    /// Writes a 16-bit P5 graymap plus a `<path>.scale` sidecar with the
    /// dequantization factor.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (samples, factor) = self.quantize();
        let bytes = encode_pgm16(self.width(), self.height(), &samples)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = scale_sidecar(path);
        let text = format!("# value = sample * scale\nscale {:e}\nsum {:e}\n", factor, self.sum());
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    /// Reads a graymap written by [`Heatmap::write_pgm`], dequantized.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Heatmap> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, samples) = decode_pgm16(&bytes)?;
        let sidecar = scale_sidecar(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let factor = text
            .lines()
            .find_map(|l| l.strip_prefix("scale "))
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Format(format!("{}: no scale entry", sidecar.display())))?;
        Heatmap::from_values(w, h, samples.iter().map(|&s| (s as f64 * factor) as f32).collect())
    }
}

pub fn scale_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".scale");
    PathBuf::from(s)
}

/// Number of 2x pooling stages in front of tap `i`.
fn pool_depth(tap: usize) -> u32 {
    tap.div_ceil(2) as u32
}

/// Heatmap at `width x height` from two feature sets of images that size.
pub fn heatmap_from_features(
    fx: &FeatureSet,
    fy: &FeatureSet,
    weights: &MetricWeights,
    width: usize,
    height: usize,
    reduction: Reduction,
) -> Result<Heatmap> {
    let mut acc = vec![0.0f64; width * height];
    for i in 0..TAP_COUNT {
        let (a, b) = (fx.tap(i), fy.tap(i));
        precondition!(a.shape() == b.shape(), "tap {} shapes differ", i);
        let (c, th, tw) = a.shape();
        let factor = 1usize << pool_depth(i);
        precondition!(
            th * factor <= height && tw * factor <= width,
            "tap {} ({}x{}) does not fit a {}x{} image",
            i,
            tw,
            th,
            width,
            height
        );
        let mut scale = weights.values()[i] / (factor * factor) as f64;
        if reduction == Reduction::Mean {
            scale /= (c * th * tw).max(1) as f64;
        }
        if scale == 0.0 {
            continue;
        }

        let mut per_pos = vec![0.0f64; th * tw];
        for ch in 0..c {
            for ((d, p), q) in per_pos.iter_mut().zip(a.plane(ch)).zip(b.plane(ch)) {
                *d += (*p as f64 - *q as f64).abs();
            }
        }
        for ty in 0..th {
            for tx in 0..tw {
                let v = per_pos[ty * tw + tx] * scale;
                for y in ty * factor..(ty + 1) * factor {
                    let row = &mut acc[y * width..(y + 1) * width];
                    for cell in &mut row[tx * factor..(tx + 1) * factor] {
                        *cell += v;
                    }
                }
            }
        }
    }
    Heatmap::from_values(width, height, acc.into_iter().map(|v| v as f32).collect())
}

pub fn heatmap(x: &RgbImage, y: &RgbImage, weights: &MetricWeights, vgg: &VggWeights) -> Result<Heatmap> {
    check_same_dims(x, y)?;
    let fx = image_features(x, vgg)?;
    let fy = image_features(y, vgg)?;
    heatmap_from_features(&fx, &fy, weights, x.width(), x.height(), Reduction::Sum)
}

/// Nearest-rank 99th percentile.
fn percentile99(values: &[f32]) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub const OVERLAY_DIM: f64 = 0.5;

/// Dims red and blue by half and boosts green by `gain * map / p99(map)`.
///
/// When the 99th percentile is zero (sparse maps) the maximum is used instead.
pub fn render_overlay(base: &RgbImage, map: &Heatmap, gain: f64) -> Result<RgbImage> {
    precondition!(
        base.dims() == (map.width(), map.height()),
        "overlay base is {}x{}, heatmap is {}x{}",
        base.width(),
        base.height(),
        map.width(),
        map.height()
    );
    precondition!(gain > 0.0 && gain.is_finite(), "overlay gain must be > 0");
    let mut norm = percentile99(map.values()) as f64;
    if norm <= 0.0 {
        norm = map.max() as f64;
    }
    let mut out = base.clone();
    for (px, &v) in out.as_raw_mut().chunks_exact_mut(3).zip(map.values()) {
        px[0] = (px[0] as f64 * OVERLAY_DIM).round() as u8;
        px[2] = (px[2] as f64 * OVERLAY_DIM).round() as u8;
        if norm > 0.0 {
            let boost = gain * v as f64 / norm;
            px[1] = (px[1] as f64 + boost).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Halves both dimensions by 2x2 box averaging (trailing odd row/column dropped).
pub fn downsample2(image: &RgbImage) -> Result<RgbImage> {
    precondition!(
        image.width() >= 2 && image.height() >= 2,
        "cannot downsample a {}x{} image",
        image.width(),
        image.height()
    );
    let (w, h) = (image.width() / 2, image.height() / 2);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let px = [
            image.pixel(2 * x, 2 * y),
            image.pixel(2 * x + 1, 2 * y),
            image.pixel(2 * x, 2 * y + 1),
            image.pixel(2 * x + 1, 2 * y + 1),
        ];
        std::array::from_fn(|c| ((px.iter().map(|p| p[c] as u32).sum::<u32>() + 2) / 4) as u8)
    }))
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub reference: RgbImage,
    pub noisy: RgbImage,
    pub heatmap: Heatmap,
    pub metric: f64,
}

/// Level `k` downsamples the reference `k` times, then adds Gaussian noise
/// (same seed at every level) and maps it against the clean level image.
pub fn pyramid_heatmaps(
    x: &RgbImage,
    sigma: f64,
    levels: usize,
    seed: u64,
    weights: &MetricWeights,
    vgg: &VggWeights,
) -> Result<Vec<PyramidLevel>> {
    precondition!(levels >= 1, "pyramid needs at least one level");
    let shrink = 1usize << (levels - 1);
    precondition!(
        x.width() / shrink >= MIN_INPUT_SIZE && x.height() / shrink >= MIN_INPUT_SIZE,
        "{}x{} image is too small for {} pyramid levels",
        x.width(),
        x.height(),
        levels
    );
    let noise = DistortionSpec::new(Distortion::GaussNoiseRgb { sigma }, seed);

    let mut out = Vec::with_capacity(levels);
    let mut reference = x.clone();
    for level in 0..levels {
        if level > 0 {
            reference = downsample2(&reference)?;
        }
        let noisy = apply(&reference, &noise)?;
        let fr = image_features(&reference, vgg)?;
        let fnz = image_features(&noisy, vgg)?;
        let heatmap = heatmap_from_features(
            &fr,
            &fnz,
            weights,
            reference.width(),
            reference.height(),
            Reduction::Sum,
        )?;
        let metric = weights.score(&crate::metric::layer_distances(&fr, &fnz)?);
        out.push(PyramidLevel {
            reference: reference.clone(),
            noisy,
            heatmap,
            metric,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl std::str::FromStr for Rect {
    type Err = Error;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("invalid rectangle {s:?}, expected x,y,w,h")))?;
        match parts[..] {
            [x, y, w, h] => Ok(Rect { x, y, w, h }),
            _ => Err(Error::Format(format!("invalid rectangle {s:?}, expected x,y,w,h"))),
        }
    }
}

/// Shuffles the pixels inside `rect` with a seeded permutation. The multiset
/// of pixel values inside the rectangle and every pixel outside it are kept.
pub fn scramble_region(image: &RgbImage, rect: Rect, seed: u64) -> Result<RgbImage> {
    precondition!(
        rect.x + rect.w <= image.width() && rect.y + rect.h <= image.height(),
        "rectangle {:?} exceeds {}x{} image",
        rect,
        image.width(),
        image.height()
    );
    let mut pixels: Vec<[u8; 3]> = Vec::with_capacity(rect.w * rect.h);
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            pixels.push(image.pixel(x, y));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pixels.shuffle(&mut rng);
    let mut out = image.clone();
    let mut it = pixels.into_iter();
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            out.set_pixel(x, y, it.next().expect("same count"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::layer_distances;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FeatureSet {
        let mut taps = Vec::new();
        let (mut th, mut tw) = (h, w);
        for i in 0..TAP_COUNT {
            if i % 2 == 1 {
                th /= 2;
                tw /= 2;
            }
            taps.push(Tensor::from_fn(2, th, tw, |_, _, _| rng.random_range(0.0..3.0)));
        }
        FeatureSet::new(taps).unwrap()
    }

    #[test]
    fn pool_depths() {
        let d: Vec<u32> = (0..TAP_COUNT).map(pool_depth).collect();
        assert_eq!(d, [0, 1, 1, 2, 2, 3, 3, 4, 4, 5]);
    }

    #[test]
    fn conserves_metric_on_synthetic_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (h, w) in [(64, 64), (70, 45), (33, 97)] {
            let fx = random_features(&mut rng, h, w);
            let fy = random_features(&mut rng, h, w);
            let weights = MetricWeights::new("t", std::array::from_fn(|i| 0.1 + i as f64)).unwrap();
            let hm = heatmap_from_features(&fx, &fy, &weights, w, h, Reduction::Sum).unwrap();
            let m = weights.score(&layer_distances(&fx, &fy).unwrap());
            assert!((hm.sum() - m).abs() <= 1e-5 * m);
            let hm = heatmap_from_features(&fx, &fy, &weights, w, h, Reduction::Mean).unwrap();
            let m = weights.score(&crate::metric::layer_distances_with(&fx, &fy, Reduction::Mean).unwrap());
            assert!((hm.sum() - m).abs() <= 1e-5 * m);
        }
    }

    #[test]
    fn first_tap_only_is_per_pixel_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fx = random_features(&mut rng, 40, 36);
        let fy = random_features(&mut rng, 40, 36);
        let hm = heatmap_from_features(&fx, &fy, &MetricWeights::single_tap(0), 36, 40, Reduction::Sum).unwrap();
        for y in 0..40 {
            for x in 0..36 {
                let oracle: f64 = (0..2)
                    .map(|c| (fx.tap(0).get(c, y, x) as f64 - fy.tap(0).get(c, y, x) as f64).abs())
                    .sum();
                assert!((hm.get(x, y) as f64 - oracle).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identical_features_give_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(&mut rng, 32, 32);
        let hm = heatmap_from_features(&f, &f, &MetricWeights::unit(), 32, 32, Reduction::Sum).unwrap();
        assert!(hm.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlay_cases() {
        let base = RgbImage::filled(20, 10, [100, 50, 201]);
        let zero = Heatmap::from_values(20, 10, vec![0.0; 200]).unwrap();
        let out = render_overlay(&base, &zero, 100.0).unwrap();
        assert!(out.as_raw().chunks(3).all(|p| p == [50, 50, 101]));

        let constant = Heatmap::from_values(20, 10, vec![3.0; 200]).unwrap();
        let out = render_overlay(&base, &constant, 100.0).unwrap();
        assert!(out.as_raw().chunks(3).all(|p| p == [50, 150, 101]));

        let mut hot = vec![0.0; 200];
        hot[37] = 9.0;
        let out = render_overlay(&base, &Heatmap::from_values(20, 10, hot).unwrap(), 80.0).unwrap();
        let boosted: Vec<usize> = (0..200).filter(|&i| out.as_raw()[i * 3 + 1] != 50).collect();
        assert_eq!(boosted, [37]);
        assert_eq!(out.as_raw()[37 * 3 + 1], 130);

        assert!(render_overlay(&base, &Heatmap::from_values(10, 20, vec![0.0; 200]).unwrap(), 1.0).is_err());
        assert!(render_overlay(&base, &zero, 0.0).is_err());
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let values: Vec<f32> = (0..48).map(|i| i as f32 * 0.37).collect();
        let hm = Heatmap::from_values(8, 6, values.clone()).unwrap();
        hm.write_pgm(&path).unwrap();
        let back = Heatmap::read_pgm(&path).unwrap();
        let step = hm.max() / 65535.0;
        for (a, b) in back.values().iter().zip(&values) {
            assert!((a - b).abs() <= step);
        }
        assert!(scale_sidecar(&path).exists());
    }

    #[test]
    fn downsample_box_average() {
        let img = RgbImage::from_fn(5, 4, |x, y| [(x * 10 + y) as u8, 0, 255]);
        let d = downsample2(&img).unwrap();
        assert_eq!(d.dims(), (2, 2));
        // (0 + 10 + 1 + 11 + 2) / 4 = 6
        assert_eq!(d.pixel(0, 0), [6, 0, 255]);
    }

    #[test]
    fn scramble_cases() {
        let img = RgbImage::from_fn(12, 9, |x, y| [(x * 20) as u8, (y * 25) as u8, (x * y) as u8]);
        let r = Rect { x: 3, y: 2, w: 1, h: 1 };
        assert_eq!(scramble_region(&img, r, 5).unwrap(), img);

        let r = Rect { x: 2, y: 1, w: 7, h: 6 };
        let s = scramble_region(&img, r, 5).unwrap();
        assert_eq!(s, scramble_region(&img, r, 5).unwrap());
        assert_ne!(s, img);
        let region = |im: &RgbImage| {
            let mut v: Vec<[u8; 3]> = Vec::new();
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    v.push(im.pixel(x, y));
                }
            }
            v.sort();
            v
        };
        assert_eq!(region(&s), region(&img));
        assert!(scramble_region(
            &img,
            Rect {
                x: 10,
                y: 0,
                w: 3,
                h: 1
            },
            0
        )
        .is_err());
    }

    #[test]
    fn rect_parsing() {
        assert_eq!("1,2,3,4".parse::<Rect>().unwrap(), Rect { x: 1, y: 2, w: 3, h: 4 });
        assert!("1,2,3".parse::<Rect>().is_err());
        assert!("a,2,3,4".parse::<Rect>().is_err());
    }
}
