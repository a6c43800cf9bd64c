//! 8-bit RGB images, binary PPM/PGM files and conversion to model input.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::kernels::resize_forward;
use crate::tensor::{Scalar, Tensor};

/// Interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; 3 * width * height],
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let (fields, offset) = header_fields(bytes, 4)?;
        if fields[0] != "P6" {
            return Err(Error::Data(format!("expected a binary PPM (P6), got `{}`", fields[0])));
        }
        let num = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad PPM header field `{}`", fields[i])))
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
        }
        let body = &bytes[offset..];
        if body.len() < 3 * width * height {
            return Err(Error::Data(format!(
                "truncated PPM: {} of {} bytes",
                body.len(),
                3 * width * height
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels: body[..3 * width * height].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.pixels[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// Planar `[3, H, W]` values in `[0, 1]`.
    pub fn planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        out
    }

    /// Model input `[1, 3, H', W']`: bilinearly rescaled by `scale`,
    /// optionally mirrored, centred at zero and zero-padded on the bottom and
    /// right to a multiple of 32. Returns the tensor and the rescaled size.
    pub fn to_input<T: Scalar>(&self, scale: f64, flip: bool) -> Result<(Tensor<T>, (usize, usize))> {
        let sh = ((self.height as f64 * scale).round() as usize).max(1);
        let sw = ((self.width as f64 * scale).round() as usize).max(1);
        let mut planar = self.planar();
        if flip {
            for row in planar.chunks_mut(self.width) {
                row.reverse();
            }
        }
        let resized = if (sh, sw) == (self.height, self.width) {
            planar
        } else {
            resize_forward(&planar, [1, 3, self.height, self.width], sh, sw)
        };
        let (ph, pw) = (sh.div_ceil(32) * 32, sw.div_ceil(32) * 32);
        let mut data = vec![T::zero(); 3 * ph * pw];
        for c in 0..3 {
            for y in 0..sh {
                for x in 0..sw {
                    data[(c * ph + y) * pw + x] = T::lit(resized[(c * sh + y) * sw + x] - 0.5);
                }
            }
        }
        Ok((Tensor::new([1, 3, ph, pw], data)?, (sh, sw)))
    }
}

/// Single-channel 8-bit image written as binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (fields, offset) = header_fields(bytes, 4)?;
    if fields[0] != "P5" {
        return Err(Error::Data(format!("expected a binary PGM (P5), got `{}`", fields[0])));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Data("bad PGM width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Data("bad PGM height".into()))?;
    let body = bytes
        .get(offset..offset + w * h)
        .ok_or_else(|| Error::Data("truncated PGM".into()))?;
    Ok((w, h, body.to_vec()))
}

/// Whitespace-separated header tokens (with `#` comments) and the offset of
/// the first body byte.
fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::with_capacity(count);
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Data("truncated image header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the body
    Ok((fields, i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::new(3, 2);
        img.set(1, 1, [10, 20, 30]);
        img.set(2, 0, [255, 0, 7]);
        assert_eq!(RgbImage::decode_ppm(&img.encode_ppm()).unwrap(), img);
        assert!(RgbImage::decode_ppm(b"P6\n3 2\n255\n\x00").is_err());
        assert!(RgbImage::decode_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let px = vec![0, 128, 255, 9];
        assert_eq!(decode_pgm(&encode_pgm(2, 2, &px)).unwrap(), (2, 2, px));
    }

    #[test]
    fn input_is_padded_to_multiple_of_32() {
        let img = RgbImage::new(128, 128);
        let (t, size) = img.to_input::<f32>(0.8, false).unwrap();
        assert_eq!(size, (102, 102));
        assert_eq!(t.shape(), &[1, 3, 128, 128]);
        assert_eq!(t.data()[0], -0.5);
        assert_eq!(t.data()[127], 0.0);
        let (t, _) = img.to_input::<f32>(1.0, false).unwrap();
        assert_eq!(t.shape(), &[1, 3, 128, 128]);
    }
}
