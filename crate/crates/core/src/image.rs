//! 8-bit RGB images and the binary netpbm formats used for all image I/O.
//!
//! Color images are read and written as P6 (maxval 255). Heatmaps are written
//! as 16-bit P5 graymaps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{precondition, Error, Result};

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        precondition!(
            data.len() == width * height * 3,
            "RGB buffer has {} bytes, expected {}x{}x3",
            data.len(),
            width,
            height
        );
        Ok(RgbImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage { width, height, data }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn as_raw_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w x h` region whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RgbImage> {
        precondition!(
            x + w <= self.width && y + h <= self.height,
            "crop {}x{}+{}+{} exceeds {}x{} image",
            w,
            h,
            x,
            y,
            self.width,
            self.height
        );
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data,
        })
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_ppm(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("invalid netpbm {what}")))
    }

    /// Consumes the header, leaving `pos` at the first raster byte.
    fn parse(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, usize)> {
        if bytes.len() < 2 || &bytes[..2] != magic {
            return Err(Error::Format(format!(
                "expected {} magic",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = HeaderReader { bytes, pos: 2 };
        let width = r.number("width")?;
        let height = r.number("height")?;
        let maxval = r.number("maxval")?;
        // exactly one whitespace byte separates the header from the raster
        match r.bytes.get(r.pos) {
            Some(c) if c.is_ascii_whitespace() => r.pos += 1,
            _ => return Err(Error::Format("missing raster separator".into())),
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("maxval {maxval} out of range")));
        }
        Ok((width, height, maxval, r.pos))
    }
}

/// Decodes a binary P6 pixmap. Maxvals below 255 are rescaled to 0..=255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, maxval, offset) = HeaderReader::parse(bytes, b"P6")?;
    if maxval > 255 {
        return Err(Error::Format(format!(
            "16-bit pixmaps are not supported (maxval {maxval})"
        )));
    }
    let len = width * height * 3;
    let raster = bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::Format("truncated raster".into()))?;
    let data = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
            .collect()
    };
    Ok(RgbImage { width, height, data })
}

/// Encodes 16-bit samples as a binary P5 graymap with maxval 65535.
pub fn encode_pgm16(width: usize, height: usize, samples: &[u16]) -> Result<Vec<u8>> {
    precondition!(
        samples.len() == width * height,
        "graymap has {} samples, expected {}",
        samples.len(),
        width * height
    );
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(samples.len() * 2);
    for s in samples {
        out.write_all(&s.to_be_bytes()).expect("vec write");
    }
    Ok(out)
}

/// Decodes a binary P5 graymap with maxval 65535.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (width, height, maxval, offset) = HeaderReader::parse(bytes, b"P5")?;
    if maxval != 65535 {
        return Err(Error::Format(format!("expected maxval 65535, found {maxval}")));
    }
    let raster = bytes
        .get(offset..offset + width * height * 2)
        .ok_or_else(|| Error::Format("truncated raster".into()))?;
    let samples = raster
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((width, height, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| [x as u8 * 40, y as u8 * 70, 200]);
        let back = decode_ppm(&img.encode_ppm()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn ppm_rejects_bad_magic_and_truncation() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\x00\x01"), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_low_maxval_rescaled() {
        let mut bytes = b"P6 1 1 15\n".to_vec();
        bytes.extend_from_slice(&[0, 15, 7]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [0, 255, 119]);
    }

    #[test]
    fn pgm16_round_trip() {
        let samples = vec![0, 1, 65535, 300, 42, 7];
        let bytes = encode_pgm16(3, 2, &samples).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(decode_pgm16(&bytes).unwrap(), (3, 2, samples));
    }

    #[test]
    fn crop_copies_region() {
        let img = RgbImage::from_fn(6, 4, |x, y| [x as u8, y as u8, 0]);
        let c = img.crop(2, 1, 3, 2).unwrap();
        assert_eq!(c.dims(), (3, 2));
        assert_eq!(c.pixel(0, 0), [2, 1, 0]);
        assert_eq!(c.pixel(2, 1), [4, 2, 0]);
        assert!(img.crop(4, 0, 3, 1).is_err());
    }
}
