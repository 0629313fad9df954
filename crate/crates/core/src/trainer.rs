//! Fitting the ten tap weights by logistic regression on triplet feature
//! differences.
//!
//! For a triplet (o, a, b) the feature is `X = Phi(o, a) - Phi(o, b)` and the
//! model is `P(b closer than a) = g(W . X)` with the logistic `g` and no bias,
//! so that `F(X) = 1 - F(-X)`. The objective is the vote-weighted mean
//! negative log-likelihood plus `lambda * |W|^2`, minimized by full-batch
//! gradient descent with step halving.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::image::RgbImage;
use crate::metric::{check_same_dims, layer_distances};
use crate::vgg::{image_features, VggWeights, TAP_COUNT};
use crate::MetricWeights;

/// One line of a triplet dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    #[serde(rename = "ref")]
    pub reference: String,
    pub a: String,
    pub b: String,
    pub votes_a: u32,
    pub votes_b: u32,
    pub votes_unsure: u32,
}

impl TripletRecord {
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<TripletRecord>> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {}", path.display(), n + 1, e)))?;
            records.push(rec);
        }
        Ok(records)
    }

    pub fn write_jsonl(path: impl AsRef<Path>, records: &[TripletRecord]) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Resolves a record path against the dataset's directory.
    pub fn resolve(base: &Path, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletFeature {
    pub x: [f64; TAP_COUNT],
    /// 1 when b was judged closer to the reference than a.
    pub label: u8,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnsurePolicy {
    #[default]
    Discard,
    /// Half of each UNSURE vote goes to either label.
    HalfHalf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tolerance: f64,
    pub unsure_policy: UnsurePolicy,
    /// Rescale each feature dimension by its root mean square before fitting
    /// and map the weights back afterwards. Off by default.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_lambda: 1e-3,
            learning_rate: 1.0,
            max_iters: 10_000,
            grad_tolerance: 1e-8,
            unsure_policy: UnsurePolicy::Discard,
            standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        precondition!(
            self.l2_lambda >= 0.0 && self.l2_lambda.is_finite(),
            "l2_lambda must be >= 0"
        );
        precondition!(self.learning_rate > 0.0, "learning_rate must be > 0");
        precondition!(self.grad_tolerance > 0.0, "grad_tolerance must be > 0");
        Ok(())
    }
}

/// Expands one triplet's votes into weighted labelled examples.
pub fn features_from_votes(x: [f64; TAP_COUNT], votes: (u32, u32, u32), policy: UnsurePolicy) -> Vec<TripletFeature> {
    let (na, nb, nu) = votes;
    let extra = match policy {
        UnsurePolicy::Discard => 0.0,
        UnsurePolicy::HalfHalf => 0.5 * nu as f64,
    };
    [(0u8, na as f64 + extra), (1u8, nb as f64 + extra)]
        .into_iter()
        .filter(|&(_, w)| w > 0.0)
        .map(|(label, weight)| TripletFeature { x, label, weight })
        .collect()
}

/// `Phi(o, a) - Phi(o, b)`.
pub fn triplet_difference(o: &RgbImage, a: &RgbImage, b: &RgbImage, vgg: &VggWeights) -> Result<[f64; TAP_COUNT]> {
    check_same_dims(o, a)?;
    check_same_dims(o, b)?;
    let fo = image_features(o, vgg)?;
    let da = layer_distances(&fo, &image_features(a, vgg)?)?;
    let db = layer_distances(&fo, &image_features(b, vgg)?)?;
    Ok(da.difference(&db))
}

fn load_difference(i: usize, rec: &TripletRecord, base_dir: &Path, vgg: &VggWeights) -> Result<[f64; TAP_COUNT]> {
    let context = |e: Error| Error::Data(format!("triplet {} ({}): {}", i, rec.reference, e));
    let load = |p: &str| RgbImage::read_ppm(TripletRecord::resolve(base_dir, p)).map_err(context);
    let (o, a, b) = (load(&rec.reference)?, load(&rec.a)?, load(&rec.b)?);
    triplet_difference(&o, &a, &b, vgg).map_err(context)
}

/// Loads the images of every record (relative to `base_dir`) and builds the
/// training examples. Triplets are processed in parallel; output order
/// follows input order.
pub fn build_features(
    records: &[TripletRecord],
    base_dir: &Path,
    vgg: &VggWeights,
    policy: UnsurePolicy,
) -> Result<Vec<TripletFeature>> {
    let per_triplet: Vec<Vec<TripletFeature>> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let votes = (rec.votes_a, rec.votes_b, rec.votes_unsure);
            if features_from_votes([0.0; TAP_COUNT], votes, policy).is_empty() {
                return Ok(Vec::new());
            }
            let x = load_difference(i, rec, base_dir, vgg)?;
            Ok(features_from_votes(x, votes, policy))
        })
        .collect::<Result<_>>()?;
    Ok(per_triplet.into_iter().flatten().collect())
}

/// `Phi(o, a) - Phi(o, b)` for every record, in input order, regardless of votes.
pub fn triplet_differences(
    records: &[TripletRecord],
    base_dir: &Path,
    vgg: &VggWeights,
) -> Result<Vec<[f64; TAP_COUNT]>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| load_difference(i, rec, base_dir, vgg))
        .collect()
}

/// Logistic function with `g(z) + g(-z) == 1` exactly.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        1.0 - 1.0 / (1.0 + z.exp())
    }
}

/// `ln(1 + e^t)` without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[inline]
fn dot(w: &[f64; TAP_COUNT], x: &[f64; TAP_COUNT]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Probability that b is closer to the reference than a.
pub fn predict_preference(w: &[f64; TAP_COUNT], x: &[f64; TAP_COUNT]) -> f64 {
    logistic(dot(w, x))
}

/// Weight-normalized negative log-likelihood plus `l2_lambda * |W|^2`, and its
/// gradient.
pub fn loss_and_gradient(
    w: &[f64; TAP_COUNT],
    features: &[TripletFeature],
    l2_lambda: f64,
) -> Result<(f64, [f64; TAP_COUNT])> {
    precondition!(!features.is_empty(), "no training examples");
    let total: f64 = features.iter().map(|f| f.weight).sum();
    precondition!(total > 0.0, "training examples have zero total weight");

    let mut loss = 0.0;
    let mut grad = [0.0f64; TAP_COUNT];
    for f in features {
        let z = dot(w, &f.x);
        // -log g(z) for label 1, -log(1 - g(z)) = -log g(-z) for label 0
        let nll = if f.label == 1 { softplus(-z) } else { softplus(z) };
        loss += f.weight * nll;
        let r = f.weight * (logistic(z) - f.label as f64);
        for (g, xi) in grad.iter_mut().zip(&f.x) {
            *g += r * xi;
        }
    }
    loss /= total;
    for (g, wi) in grad.iter_mut().zip(w) {
        *g = *g / total + 2.0 * l2_lambda * wi;
    }
    loss += l2_lambda * w.iter().map(|v| v * v).sum::<f64>();
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub weights: [f64; TAP_COUNT],
    pub loss: f64,
    pub grad_norm_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_learning_rate: f64,
}

impl TrainReport {
    pub fn metric_weights(&self, name: &str) -> MetricWeights {
        MetricWeights::new(name, self.weights).expect("finite weights")
    }
}

fn inf_norm(v: &[f64; TAP_COUNT]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Full-batch gradient descent from `W = 0`. A step that would increase the
/// loss is rejected and the learning rate halved, so accepted iterates have
/// non-increasing loss.
pub fn train(features: &[TripletFeature], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    precondition!(!features.is_empty(), "no training examples");

    let scales: [f64; TAP_COUNT] = if config.standardize {
        let total: f64 = features.iter().map(|f| f.weight).sum();
        std::array::from_fn(|i| {
            let ms = features.iter().map(|f| f.weight * f.x[i] * f.x[i]).sum::<f64>() / total;
            if ms > 0.0 {
                ms.sqrt()
            } else {
                1.0
            }
        })
    } else {
        [1.0; TAP_COUNT]
    };
    let scaled: Vec<TripletFeature>;
    let data = if config.standardize {
        scaled = features
            .iter()
            .map(|f| TripletFeature {
                x: std::array::from_fn(|i| f.x[i] / scales[i]),
                ..*f
            })
            .collect();
        &scaled[..]
    } else {
        features
    };

    let mut w = [0.0f64; TAP_COUNT];
    let (mut loss, mut grad) = loss_and_gradient(&w, data, config.l2_lambda)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { iteration: 0, loss });
    }
    let mut lr = config.learning_rate;
    let mut iterations = 0;
    let mut converged = false;

    'outer: while iterations < config.max_iters {
        if inf_norm(&grad) < config.grad_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        loop {
            let cand: [f64; TAP_COUNT] = std::array::from_fn(|i| w[i] - lr * grad[i]);
            let (cl, cg) = loss_and_gradient(&cand, data, config.l2_lambda)?;
            if !cl.is_finite() || cand.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    iteration: iterations,
                    loss: cl,
                });
            }
            if cl <= loss {
                w = cand;
                loss = cl;
                grad = cg;
                break;
            }
            lr *= 0.5;
            if lr < f64::MIN_POSITIVE {
                // no representable descent step left
                break 'outer;
            }
        }
    }
    if !converged && inf_norm(&grad) < config.grad_tolerance {
        converged = true;
    }

    Ok(TrainReport {
        weights: std::array::from_fn(|i| w[i] / scales[i]),
        loss,
        grad_norm_inf: inf_norm(&grad),
        iterations,
        converged,
        final_learning_rate: lr,
    })
}

/// Weighted fraction of examples whose label agrees with the sign of `W . X`;
/// `W . X == 0` counts one half.
pub fn label_accuracy(w: &[f64; TAP_COUNT], features: &[TripletFeature]) -> Result<f64> {
    let total: f64 = features.iter().map(|f| f.weight).sum();
    precondition!(total > 0.0, "no weighted examples to score");
    let correct: f64 = features
        .iter()
        .map(|f| {
            let z = dot(w, &f.x);
            let hit = if z == 0.0 {
                0.5
            } else if (z > 0.0) == (f.label == 1) {
                1.0
            } else {
                0.0
            };
            hit * f.weight
        })
        .sum();
    Ok(correct / total)
}

pub const FEATURE_CACHE_MAGIC: &[u8; 4] = b"TRIP";
pub const FEATURE_CACHE_VERSION: u32 = 1;

/// Cached features: 16-byte header (`"TRIP"`, u32 version, u32 rows, u32
/// reserved) then per row 10 feature values, label and weight, all f32 LE.
pub fn write_feature_cache(path: impl AsRef<Path>, features: &[TripletFeature]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + features.len() * 48);
    buf.extend_from_slice(FEATURE_CACHE_MAGIC);
    buf.extend_from_slice(&FEATURE_CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.len() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for f in features {
        for v in f.x.iter().copied().chain([f.label as f64, f.weight]) {
            buf.write_all(&(v as f32).to_le_bytes()).expect("vec write");
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<Vec<TripletFeature>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

pub fn decode_feature_cache(bytes: &[u8]) -> Result<Vec<TripletFeature>> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_CACHE_MAGIC {
        return Err(Error::Format("missing TRIP header".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if u32_at(4) != FEATURE_CACHE_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature cache version {}",
            u32_at(4)
        )));
    }
    let rows = u32_at(8) as usize;
    let body = &bytes[16..];
    if body.len() != rows * (TAP_COUNT + 2) * 4 {
        return Err(Error::Format(format!(
            "expected {} rows ({} bytes), found {} bytes",
            rows,
            rows * 48,
            body.len()
        )));
    }
    body.chunks_exact((TAP_COUNT + 2) * 4)
        .enumerate()
        .map(|(r, row)| {
            let vals: Vec<f64> = row
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let l = vals[TAP_COUNT];
            let label = if l == 0.0 {
                0
            } else if l == 1.0 {
                1
            } else {
                return Err(Error::Format(format!("row {r}: label {l} is not 0 or 1")));
            };
            let weight = vals[TAP_COUNT + 1];
            if weight < 0.0 || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("row {r}: invalid values")));
            }
            Ok(TripletFeature {
                x: std::array::from_fn(|i| vals[i]),
                label,
                weight,
            })
        })
        .collect()
}
