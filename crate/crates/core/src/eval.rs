//! Rank correlations against mean opinion scores and triplet agreement
//! scoring.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::image::RgbImage;
use crate::metric::{layer_distances_with, PerceptualMetric};
use crate::trainer::TripletRecord;
use crate::vgg::FeatureSet;

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::UndefinedStatistic(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedStatistic("need at least two observations".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedStatistic("non-finite observation".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing the mean of the ranks they span.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of fractional ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&fractional_ranks(xs), &fractional_ranks(ys))
        .ok_or_else(|| Error::UndefinedStatistic("constant input has no rank variance".into()))
}

/// Number of tied pairs among runs of equal values in a sorted sequence.
fn tied_pairs(sorted: impl Iterator<Item = f64>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<f64> = None;
    for v in sorted {
        if prev == Some(v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

/// Merge sort that returns the number of inversions it removed.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b, O(n log n) (Knight's algorithm).
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as u64;
    let n0 = n * (n - 1) / 2;

    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(ys[a].total_cmp(&ys[b])));

    let tx = tied_pairs(order.iter().map(|&i| xs[i]));
    // pairs tied in both coordinates
    let mut txy = 0u64;
    let mut run = 0u64;
    for w in order.windows(2) {
        if xs[w[0]] == xs[w[1]] && ys[w[0]] == ys[w[1]] {
            run += 1;
        } else {
            txy += run * (run + 1) / 2;
            run = 0;
        }
    }
    txy += run * (run + 1) / 2;

    let mut y_sorted: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    let mut buf = vec![0.0; y_sorted.len()];
    let swaps = sort_counting_swaps(&mut y_sorted, &mut buf);
    let ty = tied_pairs(y_sorted.iter().copied());

    let denom = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedStatistic("all pairs tied in one variable".into()));
    }
    let s = n0 as i64 - tx as i64 - ty as i64 + txy as i64 - 2 * swaps as i64;
    Ok((s as f64 / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletOutcome {
    /// The side predicted to be closer to the reference.
    pub predicted: Side,
    pub votes_a: u32,
    pub votes_b: u32,
    pub votes_unsure: u32,
}

/// Fraction of triplets where the predicted side holds the strict majority of
/// A/B votes. Vote ties score one half; UNSURE-only triplets are excluded.
pub fn triplet_accuracy(outcomes: &[TripletOutcome]) -> Result<f64> {
    let scored: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.votes_a + o.votes_b > 0)
        .map(|o| {
            let (mine, other) = match o.predicted {
                Side::A => (o.votes_a, o.votes_b),
                Side::B => (o.votes_b, o.votes_a),
            };
            majority_score(mine, other)
        })
        .collect();
    if scored.is_empty() {
        return Err(Error::Data("no triplets with A/B votes to score".into()));
    }
    Ok(scored.iter().sum::<f64>() / scored.len() as f64)
}

#[inline]
fn majority_score(mine: u32, other: u32) -> f64 {
    match mine.cmp(&other) {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Equal => 0.5,
        std::cmp::Ordering::Less => 0.0,
    }
}

/// Leave-one-out agreement of a single triplet: the mean, over each recorded
/// A/B vote, of how well that vote matches the majority of the others
/// (1 match, 0 mismatch, 1/2 tie). `None` with fewer than two votes.
pub fn leave_one_out_agreement(votes_a: u32, votes_b: u32) -> Option<f64> {
    let n = votes_a + votes_b;
    if n < 2 {
        return None;
    }
    let held_a = votes_a as f64 * majority_score(votes_a.saturating_sub(1), votes_b);
    let held_b = votes_b as f64 * majority_score(votes_b.saturating_sub(1), votes_a);
    Some((held_a + held_b) / n as f64)
}

/// Mean leave-one-out agreement over triplets with at least two A/B votes.
pub fn human_ceiling(records: &[TripletRecord]) -> Result<f64> {
    let scores: Vec<f64> = records
        .iter()
        .filter_map(|r| leave_one_out_agreement(r.votes_a, r.votes_b))
        .collect();
    if scores.is_empty() {
        return Err(Error::Data("no triplet has two or more A/B votes".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct MosEntry {
    pub reference: String,
    pub distorted: String,
    pub mos: f64,
}

/// Reads a `reference,distorted,mos` CSV manifest.
pub fn read_mos_manifest(path: impl AsRef<Path>) -> Result<Vec<MosEntry>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    if headers.iter().collect::<Vec<_>>() != ["reference", "distorted", "mos"] {
        return Err(Error::Format(format!(
            "{}: header must be reference,distorted,mos",
            path.display()
        )));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Format(format!("{}: row {}: {}", path.display(), i + 1, e))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Larger metric values go with lower MOS, as a distortion measure should.
    Expected,
    Inverted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MosEvaluation {
    /// Spearman correlation of the negated metric with MOS.
    pub srocc: f64,
    /// Kendall tau-b of the negated metric with MOS.
    pub krocc: f64,
    /// Spearman correlation of the raw metric with MOS.
    pub raw_srocc: f64,
    pub orientation: Orientation,
    pub scored: usize,
    pub skipped: Vec<String>,
}

impl MosEvaluation {
    pub fn srocc_magnitude(&self) -> f64 {
        self.srocc.abs()
    }

    pub fn krocc_magnitude(&self) -> f64 {
        self.krocc.abs()
    }
}

/// Largest fraction of unreadable entries tolerated by [`evaluate_mos`].
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

/// Scores every entry with `score`, skipping entries it fails on, and
/// correlates the negated scores with MOS.
pub fn evaluate_mos(entries: &[MosEntry], mut score: impl FnMut(&MosEntry) -> Result<f64>) -> Result<MosEvaluation> {
    precondition!(!entries.is_empty(), "empty MOS dataset");
    let mut metric = Vec::with_capacity(entries.len());
    let mut mos = Vec::with_capacity(entries.len());
    let mut skipped = Vec::new();
    for e in entries {
        match score(e) {
            Ok(v) if v.is_finite() => {
                metric.push(v);
                mos.push(e.mos);
            }
            Ok(v) => skipped.push(format!("{}: non-finite metric {}", e.distorted, v)),
            Err(err) => skipped.push(format!("{}: {}", e.distorted, err)),
        }
    }
    if skipped.len() as f64 > MAX_SKIPPED_FRACTION * entries.len() as f64 {
        return Err(Error::Data(format!(
            "{} of {} entries could not be scored; first: {}",
            skipped.len(),
            entries.len(),
            skipped[0]
        )));
    }
    let negated: Vec<f64> = metric.iter().map(|v| -v).collect();
    let srocc = spearman(&negated, &mos)?;
    let krocc = kendall(&negated, &mos)?;
    let raw_srocc = spearman(&metric, &mos)?;
    Ok(MosEvaluation {
        srocc,
        krocc,
        raw_srocc,
        orientation: if srocc >= 0.0 {
            Orientation::Expected
        } else {
            Orientation::Inverted
        },
        scored: metric.len(),
        skipped,
    })
}

/// Runs the perceptual metric over a manifest whose paths are relative to
/// `base_dir`. Reference features are computed once per distinct reference.
pub fn evaluate_mos_dataset(entries: &[MosEntry], base_dir: &Path, model: &PerceptualMetric) -> Result<MosEvaluation> {
    let mut cache: HashMap<PathBuf, std::result::Result<(RgbImage, FeatureSet), String>> = HashMap::new();
    evaluate_mos(entries, |e| {
        let ref_path = TripletRecord::resolve(base_dir, &e.reference);
        let cached = cache.entry(ref_path.clone()).or_insert_with(|| {
            RgbImage::read_ppm(&ref_path)
                .and_then(|img| model.features(&img).map(|f| (img, f)))
                .map_err(|err| err.to_string())
        });
        let (ref_img, ref_features) = cached.as_ref().map_err(|msg| Error::Data(msg.clone()))?;
        let distorted = RgbImage::read_ppm(TripletRecord::resolve(base_dir, &e.distorted))?;
        crate::metric::check_same_dims(ref_img, &distorted)?;
        let fd = model.features(&distorted)?;
        Ok(model
            .weights
            .score(&layer_distances_with(ref_features, &fd, model.reduction)?))
    })
}
