//! The learned perceptual distance: a weighted sum of per-tap L1 distances
//! between VGG feature maps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{precondition, Error, Result};
use crate::image::RgbImage;
use crate::vgg::{image_features, FeatureSet, VggWeights, TAP_COUNT, TAP_NAMES};

/// How a tap's absolute differences are reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Raw sum over all channels and positions. The default.
    #[default]
    Sum,
    /// Sum divided by the tap's element count. Experimental.
    Mean,
}

/// One weight per tap, in [`TAP_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricWeights {
    pub name: String,
    w: [f64; TAP_COUNT],
}

impl MetricWeights {
    pub fn new(name: impl Into<String>, w: [f64; TAP_COUNT]) -> Result<Self> {
        precondition!(w.iter().all(|v| v.is_finite()), "metric weights must be finite");
        Ok(MetricWeights { name: name.into(), w })
    }

    /// All weights 1: the untrained metric.
    pub fn unit() -> Self {
        MetricWeights {
            name: "untrained".into(),
            w: [1.0; TAP_COUNT],
        }
    }

    /// Weight 1 on tap `i`, 0 elsewhere.
    pub fn single_tap(i: usize) -> Self {
        let mut w = [0.0; TAP_COUNT];
        w[i] = 1.0;
        MetricWeights {
            name: format!("{} only", TAP_NAMES[i]),
            w,
        }
    }

    pub fn values(&self) -> &[f64; TAP_COUNT] {
        &self.w
    }

    pub fn dot(&self, phi: &[f64; TAP_COUNT]) -> f64 {
        self.w.iter().zip(phi).map(|(w, p)| w * p).sum()
    }

    pub fn score(&self, d: &LayerDistanceVector) -> f64 {
        self.dot(&d.phi)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut w: MetricWeights = text
            .parse()
            .map_err(|e: Error| Error::Format(format!("{}: {}", path.display(), e)))?;
        if w.name.is_empty() {
            w.name = path.display().to_string();
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

/// Text format: optional `#` comment lines, then one line holding exactly ten
/// whitespace-separated reals. A `# name: ...` comment sets the name.
impl FromStr for MetricWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut name = String::new();
        let mut values: Option<Vec<f64>> = None;
        for line in s.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(n) = comment.trim().strip_prefix("name:") {
                    name = n.trim().to_string();
                }
                continue;
            }
            if values.is_some() {
                return Err(Error::Format("more than one line of weights".into()));
            }
            let parsed = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::Format(format!("invalid weight {tok:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            values = Some(parsed);
        }
        let values = values.ok_or_else(|| Error::Format("no weight line".into()))?;
        let w: [f64; TAP_COUNT] = values
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format(format!("expected {} weights, found {}", TAP_COUNT, values.len())))?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite weight".into()));
        }
        Ok(MetricWeights { name, w })
    }
}

impl fmt::Display for MetricWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.name.is_empty() {
            writeln!(f, "# name: {}", self.name)?;
        }
        writeln!(f, "# taps: {}", TAP_NAMES.join(" "))?;
        let line: Vec<String> = self.w.iter().map(|v| format!("{v:e}")).collect();
        writeln!(f, "{}", line.join(" "))
    }
}

/// Per-tap L1 distances between two feature sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerDistanceVector {
    pub phi: [f64; TAP_COUNT],
}

impl LayerDistanceVector {
    /// `self - other`, the triplet feature when both share a reference.
    pub fn difference(&self, other: &LayerDistanceVector) -> [f64; TAP_COUNT] {
        std::array::from_fn(|i| self.phi[i] - other.phi[i])
    }
}

fn check_compatible(fx: &FeatureSet, fy: &FeatureSet) -> Result<()> {
    for (i, (a, b)) in fx.taps().iter().zip(fy.taps()).enumerate() {
        precondition!(
            a.shape() == b.shape(),
            "tap {} shapes differ: {:?} vs {:?}",
            TAP_NAMES[i],
            a.shape(),
            b.shape()
        );
    }
    Ok(())
}

pub fn layer_distances(fx: &FeatureSet, fy: &FeatureSet) -> Result<LayerDistanceVector> {
    layer_distances_with(fx, fy, Reduction::Sum)
}

pub fn layer_distances_with(fx: &FeatureSet, fy: &FeatureSet, reduction: Reduction) -> Result<LayerDistanceVector> {
    check_compatible(fx, fy)?;
    let mut phi = [0.0f64; TAP_COUNT];
    for (i, (a, b)) in fx.taps().iter().zip(fy.taps()).enumerate() {
        let sum: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&p, &q)| (p as f64 - q as f64).abs())
            .sum();
        phi[i] = match reduction {
            Reduction::Sum => sum,
            Reduction::Mean => sum / a.data().len().max(1) as f64,
        };
    }
    Ok(LayerDistanceVector { phi })
}

/// A VGG trunk paired with tap weights.
#[derive(Debug, Clone)]
pub struct PerceptualMetric {
    pub vgg: VggWeights,
    pub weights: MetricWeights,
    pub reduction: Reduction,
}

impl PerceptualMetric {
    pub fn new(vgg: VggWeights, weights: MetricWeights) -> Self {
        PerceptualMetric {
            vgg,
            weights,
            reduction: Reduction::Sum,
        }
    }

    pub fn features(&self, image: &RgbImage) -> Result<FeatureSet> {
        image_features(image, &self.vgg)
    }

    pub fn distances(&self, x: &RgbImage, y: &RgbImage) -> Result<LayerDistanceVector> {
        check_same_dims(x, y)?;
        let fx = self.features(x)?;
        let fy = self.features(y)?;
        layer_distances_with(&fx, &fy, self.reduction)
    }

    pub fn distance(&self, x: &RgbImage, y: &RgbImage) -> Result<f64> {
        Ok(self.weights.score(&self.distances(x, y)?))
    }
}

pub fn check_same_dims(x: &RgbImage, y: &RgbImage) -> Result<()> {
    precondition!(
        x.dims() == y.dims(),
        "images differ in size: {}x{} vs {}x{}",
        x.width(),
        x.height(),
        y.width(),
        y.height()
    );
    Ok(())
}

/// `f(x, y) = sum_i w_i * ||phi_i(x) - phi_i(y)||_1`.
pub fn metric(x: &RgbImage, y: &RgbImage, weights: &MetricWeights, vgg: &VggWeights) -> Result<f64> {
    check_same_dims(x, y)?;
    let fx = image_features(x, vgg)?;
    let fy = image_features(y, vgg)?;
    Ok(weights.score(&layer_distances(&fx, &fy)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng) -> FeatureSet {
        let taps = (0..TAP_COUNT)
            .map(|i| Tensor::from_fn(1 + i % 3, 2 + i % 4, 3, |_, _, _| rng.random_range(0.0..5.0)))
            .collect();
        FeatureSet::new(taps).unwrap()
    }

    /// Brute-force L1 via explicit indexing.
    fn l1_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (c, h, w) = a.shape();
        let mut s = 0.0;
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    s += (a.get(ci, y, x) as f64 - b.get(ci, y, x) as f64).abs();
                }
            }
        }
        s
    }

    #[test]
    fn identical_features_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_features(&mut rng);
        assert_eq!(layer_distances(&f, &f).unwrap().phi, [0.0; TAP_COUNT]);
    }

    #[test]
    fn single_element_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fx = random_features(&mut rng);
        let mut taps = fx.taps().to_vec();
        let old = taps[3].get(0, 1, 2);
        taps[3].set(0, 1, 2, old + 0.75);
        let fy = FeatureSet::new(taps).unwrap();
        let d = layer_distances(&fx, &fy).unwrap();
        for i in 0..TAP_COUNT {
            if i == 3 {
                assert!((d.phi[i] - 0.75).abs() < 1e-6);
            } else {
                assert_eq!(d.phi[i], 0.0);
            }
        }
    }

    #[test]
    fn matches_bruteforce_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let fx = random_features(&mut rng);
            let fy = random_features(&mut rng);
            let d = layer_distances(&fx, &fy).unwrap();
            assert_eq!(d, layer_distances(&fy, &fx).unwrap());
            for i in 0..TAP_COUNT {
                let o = l1_oracle(fx.tap(i), fy.tap(i));
                assert!((d.phi[i] - o).abs() <= 1e-9 * o.max(1.0));
            }
            let tap1 = MetricWeights::single_tap(0).score(&d);
            assert!((tap1 - l1_oracle(fx.tap(0), fy.tap(0))).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_reduction_divides_by_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fx = random_features(&mut rng);
        let fy = random_features(&mut rng);
        let s = layer_distances(&fx, &fy).unwrap();
        let m = layer_distances_with(&fx, &fy, Reduction::Mean).unwrap();
        for i in 0..TAP_COUNT {
            assert!((m.phi[i] * fx.tap(i).data().len() as f64 - s.phi[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fx = random_features(&mut rng);
        let mut taps = fx.taps().to_vec();
        taps[9] = Tensor::zeros(1, 1, 1);
        let fy = FeatureSet::new(taps).unwrap();
        assert!(layer_distances(&fx, &fy).is_err());
    }

    #[test]
    fn weights_text_format() {
        let w: MetricWeights = "# name: test\n# another comment\n1 2 3 4 5 6 7 8 9 -1.5e-3\n"
            .parse()
            .unwrap();
        assert_eq!(w.name, "test");
        assert_eq!(w.values()[9], -1.5e-3);
        let back: MetricWeights = w.to_string().parse().unwrap();
        assert_eq!(back, w);

        assert!("1 2 3".parse::<MetricWeights>().is_err());
        assert!("1 2 3 4 5 6 7 8 9 10 11".parse::<MetricWeights>().is_err());
        assert!("1 2 3 4 5 6 7 8 9 x".parse::<MetricWeights>().is_err());
        assert!("# only comments\n".parse::<MetricWeights>().is_err());
        assert!("1 2 3 4 5\n6 7 8 9 10".parse::<MetricWeights>().is_err());
        assert!("1 2 3 4 5 6 7 8 9 NaN".parse::<MetricWeights>().is_err());
    }

    #[test]
    fn metric_rejects_dimension_mismatch() {
        let vgg = VggWeights::zeros();
        let a = RgbImage::new(32, 32);
        let b = RgbImage::new(33, 32);
        assert!(metric(&a, &b, &MetricWeights::unit(), &vgg).is_err());
    }
}
