//! `vgg-iqa`: command-line front end for the perceptual metric.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vgg_iqa::distort::{self, TripletSynthesis};
use vgg_iqa::eval::{self, Side, TripletOutcome};
use vgg_iqa::heatmap::{self, render_overlay};
use vgg_iqa::trainer::{self, TrainReport};
use vgg_iqa::{
    DistortionSpec, Error, MetricWeights, PerceptualMetric, Rect, Reduction, RgbImage, TrainConfig, TripletFeature,
    TripletRecord, UnsurePolicy, VggWeights, TAP_COUNT, TAP_NAMES,
};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(
    name = "vgg-iqa",
    version,
    about = "Full-reference perceptual image metric on VGG-16 features"
)]
#[command(after_help = FORMATS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

const FORMATS_HELP: &str = "\
File formats:
  images        binary PPM (P6), 8-bit RGB
  VGG weights   VGGW: \"VGGW\", u32 version=1, u32 layers=13, then per layer
                u32 out,in,3,3, f32 kernel (out,in,kh,kw), f32 bias; little-endian
  metric W      text: '#' comment lines, then 10 reals (relu1_2 .. pool5)
  triplets      JSON lines: {\"ref\",\"a\",\"b\",\"votes_a\",\"votes_b\",\"votes_unsure\"}
  features      TRIP cache: \"TRIP\", u32 version, u32 rows, u32 reserved, rows of 12 f32 (x[10], label, weight)
  MOS manifest  CSV with header reference,distorted,mos
  heatmaps      16-bit PGM (P5) plus a <file>.scale sidecar";

#[derive(Args, Debug)]
struct VggSource {
    /// VGGW weight file.
    #[arg(long, value_name = "FILE", conflicts_with = "synthetic_vgg")]
    vgg: Option<PathBuf>,
    /// Use randomly initialized trunk weights from this seed instead of a file.
    #[arg(long, value_name = "SEED")]
    synthetic_vgg: Option<u64>,
}

impl VggSource {
    fn load(&self) -> Result<VggWeights, CliError> {
        match (&self.vgg, self.synthetic_vgg) {
            (Some(path), _) => Ok(VggWeights::load(path)?),
            (None, Some(seed)) => Ok(VggWeights::synthetic(seed)),
            (None, None) => Err(CliError::Usage("one of --vgg or --synthetic-vgg is required".into())),
        }
    }
}

#[derive(Args, Debug)]
struct WeightsArg {
    /// Metric weight file; unit weights when omitted.
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
}

impl WeightsArg {
    fn load(&self) -> Result<MetricWeights, CliError> {
        match &self.weights {
            Some(path) => Ok(MetricWeights::load(path)?),
            None => Ok(MetricWeights::unit()),
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum UnsureArg {
    Discard,
    Half,
}

impl From<UnsureArg> for UnsurePolicy {
    fn from(u: UnsureArg) -> Self {
        match u {
            UnsureArg::Discard => UnsurePolicy::Discard,
            UnsureArg::Half => UnsurePolicy::HalfHalf,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print f(ref, img) for each image; for two images also P(second closer).
    Compare {
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        #[arg(long = "img", value_name = "FILE", required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        weights: WeightsArg,
        #[command(flatten)]
        vgg: VggSource,
        /// Also print the ten per-tap distances.
        #[arg(long)]
        taps: bool,
        /// Divide each tap's L1 norm by its element count. Off by default.
        #[arg(long)]
        per_element: bool,
    },
    /// Write the per-pixel metric decomposition and an overlay image.
    Heatmap {
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        #[arg(long = "img", value_name = "FILE")]
        image: PathBuf,
        /// 16-bit PGM output.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// PPM overlay on the distorted image.
        #[arg(long, value_name = "FILE")]
        overlay: Option<PathBuf>,
        /// Green boost at the 99th percentile of the map.
        #[arg(long, default_value_t = 128.0)]
        gain: f64,
        #[command(flatten)]
        weights: WeightsArg,
        #[command(flatten)]
        vgg: VggSource,
    },
    /// Same noise at successively halved resolutions, one heatmap per level.
    Pyramid {
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        levels: u32,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 128.0)]
        gain: f64,
        #[command(flatten)]
        weights: WeightsArg,
        #[command(flatten)]
        vgg: VggSource,
    },
    /// Shuffle the pixels inside a rectangle.
    Scramble {
        #[arg(long = "img", value_name = "FILE")]
        image: PathBuf,
        /// x,y,w,h
        #[arg(long)]
        rect: Rect,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Apply one distortion given as JSON, e.g. '{"kind":"blur","params":{"sigma":2},"seed":1}'.
    Distort {
        #[arg(long = "img", value_name = "FILE")]
        image: PathBuf,
        #[arg(long, value_name = "JSON")]
        spec: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Synthesize reference/A/B triplets from a directory of PPM references.
    MakeTriplets {
        #[arg(long, value_name = "DIR")]
        refs: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Longest distortion pipeline.
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        max_len: u64,
        /// Side of the square crop.
        #[arg(long, default_value_t = 224, value_parser = clap::value_parser!(u64).range(1..))]
        crop: u64,
    },
    /// Fit metric weights by logistic regression on triplet votes.
    Train {
        /// Triplet JSON lines; image paths are relative to its directory.
        #[arg(
            long,
            value_name = "FILE",
            conflicts_with = "features",
            required_unless_present = "features"
        )]
        dataset: Option<PathBuf>,
        /// Precomputed TRIP feature cache.
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
        #[arg(long, value_enum, default_value = "discard")]
        unsure: UnsureArg,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Rescale each feature by its RMS while fitting.
        #[arg(long)]
        standardize: bool,
        /// Also write the built features to this TRIP file.
        #[arg(long, value_name = "FILE")]
        features_cache: Option<PathBuf>,
        #[command(flatten)]
        vgg: VggSource,
    },
    /// Correlate the metric with mean opinion scores.
    EvalMos {
        /// CSV with header reference,distorted,mos; paths relative to it.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[command(flatten)]
        weights: WeightsArg,
        #[command(flatten)]
        vgg: VggSource,
        /// Divide each tap's L1 norm by its element count. Off by default.
        #[arg(long)]
        per_element: bool,
        #[arg(long)]
        json: bool,
    },
    /// Agreement of the metric with triplet votes, and the human ceiling.
    EvalTriplets {
        #[arg(
            long,
            value_name = "FILE",
            conflicts_with = "features",
            required_unless_present = "features"
        )]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        #[command(flatten)]
        weights: WeightsArg,
        #[command(flatten)]
        vgg: VggSource,
        #[arg(long)]
        json: bool,
    },
    /// Write randomly initialized VGGW weights (for testing without a checkpoint).
    SynthVgg {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Diverged { .. } | Error::UndefinedStatistic(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vgg-iqa: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{}: no such file", path.display())).into())
    }
}

fn require_files<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<(), CliError> {
    paths.into_iter().try_for_each(require_file)
}

fn base_dir(file: &Path) -> PathBuf {
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())).into())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Compare {
            reference,
            images,
            weights,
            vgg,
            taps,
            per_element,
        } => {
            require_file(&reference)?;
            require_files(images.iter().map(PathBuf::as_path))?;
            let model = with_reduction(PerceptualMetric::new(vgg.load()?, weights.load()?), per_element);
            let r = RgbImage::read_ppm(&reference)?;
            let fr = model.features(&r)?;
            let mut phis = Vec::with_capacity(images.len());
            for path in &images {
                let img = RgbImage::read_ppm(path)?;
                vgg_iqa::metric::check_same_dims(&r, &img)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                let d = vgg_iqa::metric::layer_distances_with(&fr, &model.features(&img)?, model.reduction)?;
                println!("{}\t{:?}", path.display(), model.weights.score(&d));
                if taps {
                    for (name, v) in TAP_NAMES.iter().zip(d.phi) {
                        println!("  {name}\t{v:?}");
                    }
                }
                phis.push(d);
            }
            if let [da, db] = &phis[..] {
                let x = da.difference(db);
                let p = trainer::predict_preference(model.weights.values(), &x);
                println!("P(second closer)\t{p:?}");
            }
            Ok(())
        }
        Command::Heatmap {
            reference,
            image,
            out,
            overlay,
            gain,
            weights,
            vgg,
        } => {
            require_files([reference.as_path(), image.as_path()])?;
            let (w, v) = (weights.load()?, vgg.load()?);
            let r = RgbImage::read_ppm(&reference)?;
            let x = RgbImage::read_ppm(&image)?;
            let map = heatmap::heatmap(&r, &x, &w, &v)?;
            map.write_pgm(&out)?;
            if let Some(path) = overlay {
                render_overlay(&x, &map, gain)?.write_ppm(path)?;
            }
            println!("sum\t{:?}", map.sum());
            println!("max\t{:?}", map.max());
            Ok(())
        }
        Command::Pyramid {
            reference,
            sigma,
            levels,
            out_dir,
            seed,
            gain,
            weights,
            vgg,
        } => {
            require_file(&reference)?;
            let (w, v) = (weights.load()?, vgg.load()?);
            let r = RgbImage::read_ppm(&reference)?;
            let pyramid = heatmap::pyramid_heatmaps(&r, sigma, levels as usize, seed, &w, &v)?;
            create_dir(&out_dir)?;
            for (k, level) in pyramid.iter().enumerate() {
                level.reference.write_ppm(out_dir.join(format!("level{k}_ref.ppm")))?;
                level.noisy.write_ppm(out_dir.join(format!("level{k}_noisy.ppm")))?;
                level.heatmap.write_pgm(out_dir.join(format!("level{k}_map.pgm")))?;
                render_overlay(&level.noisy, &level.heatmap, gain)?
                    .write_ppm(out_dir.join(format!("level{k}_overlay.ppm")))?;
                println!(
                    "level {k}\t{}x{}\t{:?}",
                    level.reference.width(),
                    level.reference.height(),
                    level.metric
                );
            }
            Ok(())
        }
        Command::Scramble { image, rect, out, seed } => {
            require_file(&image)?;
            let img = RgbImage::read_ppm(&image)?;
            heatmap::scramble_region(&img, rect, seed)?.write_ppm(out)?;
            Ok(())
        }
        Command::Distort { image, spec, out } => {
            require_file(&image)?;
            let spec: DistortionSpec =
                serde_json::from_str(&spec).map_err(|e| CliError::Usage(format!("--spec: {e}")))?;
            let img = RgbImage::read_ppm(&image)?;
            distort::apply(&img, &spec)?.write_ppm(out)?;
            Ok(())
        }
        Command::MakeTriplets {
            refs,
            out,
            count,
            seed,
            max_len,
            crop,
        } => {
            let references = read_reference_dir(&refs)?;
            let cfg = TripletSynthesis {
                count: count as usize,
                seed,
                max_len: max_len as usize,
                crop_size: crop as usize,
            };
            let records = distort::make_triplets(&references, &out, &cfg)?;
            println!("wrote {} triplets to {}", records.len(), out.display());
            Ok(())
        }
        Command::Train {
            dataset,
            features,
            out,
            l2,
            unsure,
            lr,
            max_iters,
            tol,
            standardize,
            features_cache,
            vgg,
        } => {
            let cfg = TrainConfig {
                l2_lambda: l2,
                learning_rate: lr,
                max_iters,
                grad_tolerance: tol,
                unsure_policy: unsure.into(),
                standardize,
            };
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let examples = load_examples(dataset.as_deref(), features.as_deref(), &vgg, cfg.unsure_policy)?;
            if let Some(path) = features_cache {
                trainer::write_feature_cache(path, &examples)?;
            }
            let report = trainer::train(&examples, &cfg)?;
            let name = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            report.metric_weights(&name).save(&out)?;
            print_report(&report, examples.len());
            Ok(())
        }
        Command::EvalMos {
            manifest,
            weights,
            vgg,
            per_element,
            json,
        } => {
            require_file(&manifest)?;
            let entries = eval::read_mos_manifest(&manifest)?;
            let model = with_reduction(PerceptualMetric::new(vgg.load()?, weights.load()?), per_element);
            let ev = eval::evaluate_mos_dataset(&entries, &base_dir(&manifest), &model)?;
            for s in &ev.skipped {
                eprintln!("skipped: {s}");
            }
            let orientation = format!("{:?}", ev.orientation).to_lowercase();
            if json {
                let v = json!({
                    "srocc": ev.srocc,
                    "krocc": ev.krocc,
                    "raw_srocc": ev.raw_srocc,
                    "orientation": orientation,
                    "scored": ev.scored,
                    "skipped": ev.skipped.len(),
                });
                println!("{v}");
            } else {
                println!("srocc\t{:.4}", ev.srocc);
                println!("krocc\t{:.4}", ev.krocc);
                println!("orientation\t{orientation}");
                println!("scored\t{}", ev.scored);
                println!("skipped\t{}", ev.skipped.len());
            }
            Ok(())
        }
        Command::EvalTriplets {
            dataset,
            features,
            weights,
            vgg,
            json,
        } => {
            let w = weights.load()?;
            let (accuracy, ceiling, n) = match (dataset, features) {
                (Some(path), _) => {
                    require_file(&path)?;
                    let records = TripletRecord::read_jsonl(&path)?;
                    let xs = trainer::triplet_differences(&records, &base_dir(&path), &vgg.load()?)?;
                    let outcomes: Vec<TripletOutcome> = records
                        .iter()
                        .zip(&xs)
                        .map(|(r, x)| TripletOutcome {
                            predicted: if w.dot(x) > 0.0 { Side::B } else { Side::A },
                            votes_a: r.votes_a,
                            votes_b: r.votes_b,
                            votes_unsure: r.votes_unsure,
                        })
                        .collect();
                    let ceiling = eval::human_ceiling(&records).ok();
                    (eval::triplet_accuracy(&outcomes)?, ceiling, records.len())
                }
                (None, Some(path)) => {
                    require_file(&path)?;
                    let examples = trainer::read_feature_cache(&path)?;
                    (trainer::label_accuracy(w.values(), &examples)?, None, examples.len())
                }
                (None, None) => unreachable!("clap requires one of --dataset/--features"),
            };
            if json {
                println!(
                    "{}",
                    json!({ "accuracy": accuracy, "human_ceiling": ceiling, "count": n })
                );
            } else {
                println!("accuracy\t{accuracy:.4}");
                match ceiling {
                    Some(c) => println!("human_ceiling\t{c:.4}"),
                    None => println!("human_ceiling\tn/a"),
                }
                println!("count\t{n}");
            }
            Ok(())
        }
        Command::SynthVgg { seed, out } => {
            VggWeights::synthetic(seed).save(&out)?;
            Ok(())
        }
    }
}

fn with_reduction(mut model: PerceptualMetric, per_element: bool) -> PerceptualMetric {
    if per_element {
        model.reduction = Reduction::Mean;
    }
    model
}

fn load_examples(
    dataset: Option<&Path>,
    features: Option<&Path>,
    vgg: &VggSource,
    policy: UnsurePolicy,
) -> Result<Vec<TripletFeature>, CliError> {
    if let Some(path) = features {
        require_file(path)?;
        return Ok(trainer::read_feature_cache(path)?);
    }
    let path = dataset.expect("clap requires one of --dataset/--features");
    require_file(path)?;
    let records = TripletRecord::read_jsonl(path)?;
    let weights = vgg.load()?;
    eprintln!("building features for {} triplets", records.len());
    Ok(trainer::build_features(&records, &base_dir(path), &weights, policy)?)
}

fn print_report(report: &TrainReport, examples: usize) {
    println!("examples\t{examples}");
    println!("iterations\t{}", report.iterations);
    println!("converged\t{}", report.converged);
    println!("loss\t{:e}", report.loss);
    println!("grad_norm_inf\t{:e}", report.grad_norm_inf);
    for (name, w) in TAP_NAMES.iter().zip(report.weights).take(TAP_COUNT) {
        println!("w[{name}]\t{w:e}");
    }
}

fn read_reference_dir(dir: &Path) -> Result<Vec<(String, RgbImage)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no .ppm reference images", dir.display())).into());
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, RgbImage::read_ppm(&p)?))
        })
        .collect()
}
