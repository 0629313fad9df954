//! Dense `channels x height x width` arrays and the three kernels the VGG
//! trunk needs: 3x3 "same" convolution, rectification and 2x2 max-pooling.

use rayon::prelude::*;

use crate::error::{precondition, Result};

/// Channel-major, row-major `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        precondition!(
            data.len() == channels * height * width,
            "tensor data has {} values, expected {}x{}x{}",
            data.len(),
            channels,
            height,
            width
        );
        precondition!(
            data.iter().all(|v| v.is_finite()),
            "tensor data contains non-finite values"
        );
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

/// Weights of one 3x3 convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    out_channels: usize,
    in_channels: usize,
    /// `(out, in, 3, 3)` nesting.
    kernel: Vec<f32>,
    bias: Vec<f32>,
}

pub const KERNEL_SIZE: usize = 3;
const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;

impl ConvParams {
    pub fn new(out_channels: usize, in_channels: usize, kernel: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        precondition!(
            kernel.len() == out_channels * in_channels * TAPS,
            "kernel has {} values, expected {}x{}x3x3",
            kernel.len(),
            out_channels,
            in_channels
        );
        precondition!(
            bias.len() == out_channels,
            "bias has {} values, expected {}",
            bias.len(),
            out_channels
        );
        Ok(ConvParams {
            out_channels,
            in_channels,
            kernel,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        ConvParams {
            out_channels,
            in_channels,
            kernel: vec![0.0; out_channels * in_channels * TAPS],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn kernel(&self) -> &[f32] {
        &self.kernel
    }

    #[inline]
    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, dy: usize, dx: usize) -> f32 {
        self.kernel[((o * self.in_channels + i) * KERNEL_SIZE + dy) * KERNEL_SIZE + dx]
    }
}

// Upper bound on the im2col scratch per row band, in floats.
const BAND_BUDGET: usize = 1 << 20;

/// 3x3 convolution, stride 1, one pixel of zero padding on every border.
///
/// Each band of output rows is lowered to an im2col matrix and multiplied
/// against the kernel matrix. Bands are independent, so the result does not
/// depend on how they are scheduled.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    precondition!(
        input.channels == params.in_channels,
        "conv2d expects {} input channels, got {}",
        params.in_channels,
        input.channels
    );
    precondition!(
        input.height >= 1 && input.width >= 1,
        "conv2d input must be at least 1x1"
    );

    let (h, w) = (input.height, input.width);
    let depth = params.in_channels * TAPS;
    let rows_per_band = (BAND_BUDGET / (depth * w).max(1)).clamp(1, h);
    let bands: Vec<(usize, usize)> = (0..h)
        .step_by(rows_per_band)
        .map(|y0| (y0, (y0 + rows_per_band).min(h)))
        .collect();

    let results: Vec<Vec<f32>> = bands
        .par_iter()
        .map(|&(y0, y1)| conv_band(input, params, y0, y1))
        .collect();

    let plane = h * w;
    let mut out = vec![0.0f32; params.out_channels * plane];
    for (&(y0, y1), band) in bands.iter().zip(&results) {
        let n = (y1 - y0) * w;
        for o in 0..params.out_channels {
            out[o * plane + y0 * w..o * plane + y1 * w].copy_from_slice(&band[o * n..(o + 1) * n]);
        }
    }
    debug_assert!(out.iter().all(|v| v.is_finite()));
    Ok(Tensor {
        channels: params.out_channels,
        height: h,
        width: w,
        data: out,
    })
}

/// Computes output rows `y0..y1` for all output channels, `(out, rows, w)` layout.
fn conv_band(input: &Tensor, params: &ConvParams, y0: usize, y1: usize) -> Vec<f32> {
    let (h, w) = (input.height, input.width);
    let depth = params.in_channels * TAPS;
    let n = (y1 - y0) * w;

    let mut cols = vec![0.0f32; depth * n];
    for i in 0..params.in_channels {
        let src = input.plane(i);
        for dy in 0..KERNEL_SIZE {
            for dx in 0..KERNEL_SIZE {
                let row = &mut cols[((i * KERNEL_SIZE + dy) * KERNEL_SIZE + dx) * n..][..n];
                for y in y0..y1 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    // dst[x] = src_row[x + dx - 1], zero where out of range
                    match dx {
                        0 => dst[1..].copy_from_slice(&src_row[..w - 1]),
                        1 => dst.copy_from_slice(src_row),
                        _ => dst[..w - 1].copy_from_slice(&src_row[1..]),
                    }
                }
            }
        }
    }

    let mut out = Vec::with_capacity(params.out_channels * n);
    for &b in &params.bias {
        out.extend(std::iter::repeat_n(b, n));
    }
    // SAFETY: all three buffers are contiguous row-major matrices whose
    // lengths match the dimensions and strides passed here.
    unsafe {
        matrixmultiply::sgemm(
            params.out_channels,
            depth,
            n,
            1.0,
            params.kernel.as_ptr(),
            depth as isize,
            1,
            cols.as_ptr(),
            n as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in &mut t.data {
        *v = v.max(0.0);
    }
}

/// 2x2 max-pooling with stride 2. A trailing odd row or column is dropped.
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    precondition!(
        input.height >= 2 && input.width >= 2,
        "maxpool2 needs at least 2x2 input, got {}x{}",
        input.height,
        input.width
    );
    let (oh, ow) = (input.height / 2, input.width / 2);
    let mut data = Vec::with_capacity(input.channels * oh * ow);
    for c in 0..input.channels {
        let plane = input.plane(c);
        for y in 0..oh {
            let r0 = &plane[2 * y * input.width..];
            let r1 = &plane[(2 * y + 1) * input.width..];
            for x in 0..ow {
                let m = r0[2 * x].max(r0[2 * x + 1]).max(r1[2 * x]).max(r1[2 * x + 1]);
                data.push(m);
            }
        }
    }
    Ok(Tensor {
        channels: input.channels,
        height: oh,
        width: ow,
        data,
    })
}
