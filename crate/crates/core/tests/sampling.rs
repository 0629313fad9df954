use std::collections::HashMap;
use std::fs;

use vgg_iqa::distort::{self, make_triplets, ranges, sample_pipeline, TripletProvenance, TripletSynthesis};
use vgg_iqa::{Distortion, DistortionKind, RgbImage, TripletRecord};

#[test]
fn distortion_kinds_are_uniform() {
    let n = 10_000usize;
    let mut counts: HashMap<DistortionKind, usize> = HashMap::new();
    for seed in 0..n as u64 {
        let p = sample_pipeline(seed, 1).unwrap();
        assert_eq!(p.steps.len(), 1);
        *counts.entry(p.steps[0].distortion.kind()).or_default() += 1;
    }
    let k = DistortionKind::ALL.len() as f64;
    let expected = n as f64 / k;
    let sd = (n as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
    for kind in DistortionKind::ALL {
        let c = counts.get(&kind).copied().unwrap_or(0) as f64;
        assert!(
            (c - expected).abs() <= 3.0 * sd,
            "{}: {} vs {}",
            kind.name(),
            c,
            expected
        );
    }
}

#[test]
fn sampled_parameters_stay_in_range() {
    for seed in 0..2_000u64 {
        for step in sample_pipeline(seed, 3).unwrap().steps {
            step.distortion.validate().unwrap();
            let ok = match step.distortion {
                Distortion::GaussNoiseRgb { sigma } | Distortion::GaussNoiseLuma { sigma } => {
                    (ranges::NOISE_SIGMA.0..=ranges::NOISE_SIGMA.1).contains(&sigma)
                }
                Distortion::Blur { sigma } => (ranges::BLUR_SIGMA.0..=ranges::BLUR_SIGMA.1).contains(&sigma),
                Distortion::Posterize { levels } => {
                    (ranges::POSTERIZE_LEVELS.0..=ranges::POSTERIZE_LEVELS.1).contains(&levels)
                }
                Distortion::Gamma { gamma } => (ranges::GAMMA.0..=ranges::GAMMA.1).contains(&gamma),
                Distortion::ContrastRescale { lo, hi } => {
                    (ranges::CONTRAST_LO.0..=ranges::CONTRAST_LO.1).contains(&lo)
                        && (ranges::CONTRAST_HI.0..=ranges::CONTRAST_HI.1).contains(&hi)
                }
                Distortion::JpegLike { quality } => {
                    (ranges::JPEG_QUALITY.0..=ranges::JPEG_QUALITY.1).contains(&quality)
                }
            };
            assert!(ok, "{:?}", step.distortion);
        }
    }
}

fn reference(seed: u8) -> RgbImage {
    RgbImage::from_fn(48, 40, |x, y| {
        [
            (x as u8).wrapping_mul(5).wrapping_add(seed),
            (y as u8).wrapping_mul(6),
            ((x ^ y) as u8).wrapping_mul(9),
        ]
    })
}

fn cfg(count: usize, seed: u64) -> TripletSynthesis {
    TripletSynthesis {
        count,
        seed,
        max_len: 3,
        crop_size: 32,
    }
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn one_reference_one_triplet() {
    let out = tempfile::tempdir().unwrap();
    let refs = vec![("r.ppm".to_string(), reference(0))];
    let records = make_triplets(&refs, out.path(), &cfg(1, 5)).unwrap();
    assert_eq!(records.len(), 1);
    let names: Vec<String> = dir_bytes(out.path()).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        [
            "00000_a.ppm",
            "00000_b.ppm",
            "00000_ref.ppm",
            distort::PIPELINES_FILE,
            distort::TRIPLETS_FILE
        ]
    );
    let read = TripletRecord::read_jsonl(out.path().join(distort::TRIPLETS_FILE)).unwrap();
    assert_eq!(read, records);
    for f in ["00000_a.ppm", "00000_b.ppm", "00000_ref.ppm"] {
        assert_eq!(RgbImage::read_ppm(out.path().join(f)).unwrap().dims(), (32, 32));
    }
}

#[test]
fn same_seed_same_bytes() {
    let refs = vec![
        ("r0.ppm".to_string(), reference(0)),
        ("r1.ppm".to_string(), reference(50)),
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_triplets(&refs, a.path(), &cfg(6, 7)).unwrap();
    make_triplets(&refs, b.path(), &cfg(6, 7)).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    make_triplets(&refs, c.path(), &cfg(6, 8)).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn triplet_members_share_the_crop_and_pipelines_replay() {
    let refs = vec![("r.ppm".to_string(), reference(3))];
    let out = tempfile::tempdir().unwrap();
    make_triplets(&refs, out.path(), &cfg(4, 1)).unwrap();
    let text = fs::read_to_string(out.path().join(distort::PIPELINES_FILE)).unwrap();
    let provenance: Vec<TripletProvenance> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(provenance.len(), 4);
    for p in &provenance {
        let (x, y) = p.crop;
        let o = RgbImage::read_ppm(out.path().join(format!("{:05}_ref.ppm", p.index))).unwrap();
        assert_eq!(o, refs[0].1.crop(x, y, 32, 32).unwrap());
        let a = distort::apply_pipeline(&refs[0].1, &p.a)
            .unwrap()
            .crop(x, y, 32, 32)
            .unwrap();
        assert_eq!(
            a,
            RgbImage::read_ppm(out.path().join(format!("{:05}_a.ppm", p.index))).unwrap()
        );
        let b = distort::apply_pipeline(&refs[0].1, &p.b)
            .unwrap()
            .crop(x, y, 32, 32)
            .unwrap();
        assert_eq!(
            b,
            RgbImage::read_ppm(out.path().join(format!("{:05}_b.ppm", p.index))).unwrap()
        );
    }
}

#[test]
fn reference_smaller_than_crop_is_rejected() {
    let out = tempfile::tempdir().unwrap();
    let refs = vec![("tiny.ppm".to_string(), RgbImage::filled(10, 10, [1, 2, 3]))];
    let err = make_triplets(&refs, out.path(), &cfg(1, 0)).unwrap_err();
    assert!(err.to_string().contains("tiny.ppm"), "{err}");
}
