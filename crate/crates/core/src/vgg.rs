//! The VGG-16 convolutional trunk, its ten activation taps and the VGGW
//! weight format.
//!
//! Only the 13 convolution layers are represented; the classifier head is
//! never loaded. Inputs are mean-subtracted RGB in the 0..255 range (see
//! [`preprocess`]), which is what ImageNet-trained VGG-16 checkpoints expect.
//!
//! # VGGW format
//!
//! Little-endian, no padding:
//!
//! ```text
//! "VGGW"  u32 version = 1  u32 layer_count = 13
//! per layer: u32 out, u32 in, u32 kh = 3, u32 kw = 3,
//!            out*in*3*3 f32 kernel values in (out, in, kh, kw) nesting,
//!            out f32 biases
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{precondition, Error, Result};
use crate::image::RgbImage;
use crate::tensor::{conv2d, maxpool2, relu_in_place, ConvParams, Tensor, KERNEL_SIZE};

pub const MAGIC: &[u8; 4] = b"VGGW";
pub const FORMAT_VERSION: u32 = 1;
pub const LAYER_COUNT: usize = 13;

/// Output width of each convolution layer, in network order.
pub const CHANNEL_SCHEDULE: [usize; LAYER_COUNT] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];

/// Convolutions per block; every block ends with a 2x2 max-pool.
pub const BLOCK_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];

pub const TAP_COUNT: usize = 10;

pub const TAP_NAMES: [&str; TAP_COUNT] = [
    "relu1_2", "pool1", "relu2_2", "pool2", "relu3_3", "pool3", "relu4_3", "pool4", "relu5_3", "pool5",
];

/// Per-channel ImageNet means in RGB order, 0..255 scale.
pub const IMAGENET_MEAN_RGB: [f32; 3] = [123.68, 116.779, 103.939];

/// Smallest side that survives five pooling stages.
pub const MIN_INPUT_SIZE: usize = 32;

/// Input channel count of layer `k` in network order.
pub fn in_channels(layer: usize) -> usize {
    if layer == 0 {
        3
    } else {
        CHANNEL_SCHEDULE[layer - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VggWeights {
    layers: Vec<ConvParams>,
}

impl VggWeights {
    /// Validates `layers` against the fixed VGG-16 schedule.
    pub fn new(layers: Vec<ConvParams>) -> Result<Self> {
        precondition!(
            layers.len() == LAYER_COUNT,
            "VGG-16 has {} conv layers, got {}",
            LAYER_COUNT,
            layers.len()
        );
        for (k, layer) in layers.iter().enumerate() {
            precondition!(
                layer.out_channels() == CHANNEL_SCHEDULE[k] && layer.in_channels() == in_channels(k),
                "layer {} has shape {}x{}, expected {}x{}",
                k,
                layer.out_channels(),
                layer.in_channels(),
                CHANNEL_SCHEDULE[k],
                in_channels(k)
            );
        }
        Ok(VggWeights { layers })
    }

    pub fn zeros() -> Self {
        VggWeights {
            layers: (0..LAYER_COUNT)
                .map(|k| ConvParams::zeros(CHANNEL_SCHEDULE[k], in_channels(k)))
                .collect(),
        }
    }

    /// Random He-normal kernels with small biases. Useful for tests and
    /// benchmarks; carries no perceptual meaning.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias_dist = Normal::new(0.0f32, 0.01).expect("valid normal");
        let layers = (0..LAYER_COUNT)
            .map(|k| {
                let (out, inp) = (CHANNEL_SCHEDULE[k], in_channels(k));
                let std = (2.0 / (inp * KERNEL_SIZE * KERNEL_SIZE) as f32).sqrt();
                let dist = Normal::new(0.0f32, std).expect("valid normal");
                let kernel = (0..out * inp * 9).map(|_| dist.sample(&mut rng)).collect();
                let bias = (0..out).map(|_| bias_dist.sample(&mut rng)).collect();
                ConvParams::new(out, inp, kernel, bias).expect("schedule shapes")
            })
            .collect();
        VggWeights { layers }
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.layers
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_from(mut reader: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut reader, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"VGGW\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(&mut reader, "version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported VGGW version {version}")));
        }
        let count = read_u32(&mut reader, "layer count")? as usize;
        if count != LAYER_COUNT {
            return Err(Error::Format(format!("layer count {count}, expected {LAYER_COUNT}")));
        }

        let mut layers = Vec::with_capacity(LAYER_COUNT);
        for (k, &expected_out) in CHANNEL_SCHEDULE.iter().enumerate() {
            let out = read_u32(&mut reader, "out channels")? as usize;
            let inp = read_u32(&mut reader, "in channels")? as usize;
            let kh = read_u32(&mut reader, "kernel height")? as usize;
            let kw = read_u32(&mut reader, "kernel width")? as usize;
            if out != expected_out || inp != in_channels(k) || kh != KERNEL_SIZE || kw != KERNEL_SIZE {
                return Err(Error::Format(format!(
                    "layer {k}: shape {out}x{inp}x{kh}x{kw}, expected {expected_out}x{}x3x3",
                    in_channels(k)
                )));
            }
            let kernel = read_f32s(&mut reader, out * inp * kh * kw, "kernel")?;
            let bias = read_f32s(&mut reader, out, "bias")?;
            if kernel.iter().chain(&bias).any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("layer {k}: non-finite weight")));
            }
            layers.push(ConvParams::new(out, inp, kernel, bias)?);
        }
        Ok(VggWeights { layers })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(LAYER_COUNT as u32).to_le_bytes())?;
        for layer in &self.layers {
            for dim in [layer.out_channels(), layer.in_channels(), KERNEL_SIZE, KERNEL_SIZE] {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity((layer.kernel().len() + layer.bias().len()) * 4);
            for v in layer.kernel().iter().chain(layer.bias()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated stream while reading {what}")),
        _ => Error::Format(format!("read error in {what}: {e}")),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Converts an 8-bit RGB image to a mean-subtracted `3 x h x w` tensor.
/// No rescaling to unit range and no division by a standard deviation.
pub fn preprocess(image: &RgbImage) -> Result<Tensor> {
    let (w, h) = image.dims();
    precondition!(
        w >= MIN_INPUT_SIZE && h >= MIN_INPUT_SIZE,
        "image is {}x{}, the VGG trunk needs at least {}x{}",
        w,
        h,
        MIN_INPUT_SIZE,
        MIN_INPUT_SIZE
    );
    let raw = image.as_raw();
    let mut data = vec![0.0f32; 3 * w * h];
    for (c, mean) in IMAGENET_MEAN_RGB.iter().enumerate() {
        let plane = &mut data[c * w * h..(c + 1) * w * h];
        for (p, v) in plane.iter_mut().enumerate() {
            *v = raw[p * 3 + c] as f32 - mean;
        }
    }
    Tensor::new(3, h, w, data)
}

/// The ten tapped activations of one image, in [`TAP_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    taps: Vec<Tensor>,
}

impl FeatureSet {
    pub fn new(taps: Vec<Tensor>) -> Result<Self> {
        precondition!(
            taps.len() == TAP_COUNT,
            "feature set needs {} taps, got {}",
            TAP_COUNT,
            taps.len()
        );
        precondition!(
            taps.iter().all(|t| t.data().iter().all(|&v| v >= 0.0)),
            "feature taps must be nonnegative"
        );
        Ok(FeatureSet { taps })
    }

    pub fn taps(&self) -> &[Tensor] {
        &self.taps
    }

    pub fn tap(&self, i: usize) -> &Tensor {
        &self.taps[i]
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.taps.iter().map(Tensor::shape).collect()
    }
}

/// Runs the five conv blocks and records the last ReLU and the pool output of
/// each block.
pub fn extract_features(input: &Tensor, weights: &VggWeights) -> Result<FeatureSet> {
    precondition!(
        input.channels() == 3,
        "VGG input must have 3 channels, got {}",
        input.channels()
    );
    precondition!(
        input.height() >= MIN_INPUT_SIZE && input.width() >= MIN_INPUT_SIZE,
        "VGG input is {}x{}, needs at least {}x{}",
        input.width(),
        input.height(),
        MIN_INPUT_SIZE,
        MIN_INPUT_SIZE
    );

    let mut taps = Vec::with_capacity(TAP_COUNT);
    let mut layers = weights.layers.iter();
    let mut x = input.clone();
    for &depth in &BLOCK_DEPTHS {
        for _ in 0..depth {
            let params = layers.next().expect("13 layers");
            x = conv2d(&x, params)?;
            relu_in_place(&mut x);
        }
        let pooled = maxpool2(&x)?;
        taps.push(std::mem::replace(&mut x, pooled));
        taps.push(x.clone());
    }
    Ok(FeatureSet { taps })
}

/// `preprocess` followed by `extract_features`.
pub fn image_features(image: &RgbImage, weights: &VggWeights) -> Result<FeatureSet> {
    extract_features(&preprocess(image)?, weights)
}
