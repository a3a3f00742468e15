//! RGB images, label maps, and their binary PPM/PGM files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IGNORE_LABEL: u8 = 255;

/// Planar RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Channel-major (3×H×W).
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(plane));
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.clone()).expect("image shape")
    }

    /// Image `i` of an NCHW batch with three channels.
    pub fn from_tensor(t: &Tensor<f32>, i: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c != 3 || i >= n {
            return Err(Error::Shape(format!(
                "cannot take image {} from {:?}",
                i,
                t.shape()
            )));
        }
        let plane = 3 * h * w;
        Ok(Image {
            height: h,
            width: w,
            data: t.data()[i * plane..(i + 1) * plane].to_vec(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// 8-bit interleaved RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let plane = height * width;
        if rgb.len() != 3 * plane {
            return Err(Error::Format(format!(
                "expected {} RGB bytes, got {}",
                3 * plane,
                rgb.len()
            )));
        }
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = rgb[3 * p + c] as f32 / 255.0;
            }
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }
}

/// Per-pixel class ids; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, fill: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Fails on any value that is neither a class below `num_classes` nor ignore.
    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= num_classes)
        {
            Some(v) => Err(Error::Format(format!(
                "label {} out of range for {} classes",
                v, num_classes
            ))),
            None => Ok(()),
        }
    }
}

/// Parses a binary netpbm header, returning (width, height, payload offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed netpbm header".into()));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed netpbm header".into()))?;
        fields.push(v);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format(
            "netpbm header must end with one whitespace byte".into(),
        ));
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!(
            "only 8-bit netpbm is supported, maxval {}",
            fields[2]
        )));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::Format("netpbm image has a zero extent".into()));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, off) = parse_header(bytes, b"P6")?;
    let need = 3 * w * h;
    if bytes.len() - off < need {
        return Err(Error::Format(format!(
            "truncated PPM payload: {} of {} bytes",
            bytes.len() - off,
            need
        )));
    }
    Image::from_rgb8(h, w, &bytes[off..off + need])
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, off) = parse_header(bytes, b"P5")?;
    let need = w * h;
    if bytes.len() - off < need {
        return Err(Error::Format(format!(
            "truncated PGM payload: {} of {} bytes",
            bytes.len() - off,
            need
        )));
    }
    Ok(LabelMap {
        height: h,
        width: w,
        data: bytes[off..off + need].to_vec(),
    })
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(labels))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_pgm(&fs::read(path)?)
}

/// Maps class ids through `palette`; ignore pixels become black.
pub fn colorize(labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Image> {
    let mut rgb = Vec::with_capacity(3 * labels.data.len());
    for &v in &labels.data {
        let c = if v == IGNORE_LABEL {
            [0, 0, 0]
        } else {
            *palette
                .get(v as usize)
                .ok_or_else(|| Error::Format(format!("label {} has no palette entry", v)))?
        };
        rgb.extend_from_slice(&c);
    }
    Image::from_rgb8(labels.height, labels.width, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn ppm_round_trip_is_exact() {
        let mut rng = SplitMix64::new(1);
        let rgb: Vec<u8> = (0..3 * 5 * 7).map(|_| rng.below(256) as u8).collect();
        let img = Image::from_rgb8(5, 7, &rgb).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_rgb8(), rgb);
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let l = LabelMap {
            height: 2,
            width: 3,
            data: vec![0, 1, 2, 255, 4, 0],
        };
        assert_eq!(decode_pgm(&encode_pgm(&l)).unwrap(), l);
        let mut commented = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&l.data);
        assert_eq!(decode_pgm(&commented).unwrap(), l);
    }

    #[test]
    fn malformed_and_truncated_files_fail() {
        assert!(decode_ppm(b"P3\n1 1\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_pgm(b"P5\nx 1\n255\n\0").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
    }

    #[test]
    fn labels_out_of_range_are_caught() {
        let l = LabelMap {
            height: 1,
            width: 3,
            data: vec![0, 255, 3],
        };
        assert!(l.check_range(3).is_err());
        assert!(l.check_range(4).is_ok());
    }

    #[test]
    fn colorize_uses_palette_and_black_ignore() {
        let l = LabelMap {
            height: 1,
            width: 2,
            data: vec![0, 255],
        };
        let img = colorize(&l, &[[10, 20, 30]]).unwrap();
        assert_eq!(img.to_rgb8(), vec![10, 20, 30, 0, 0, 0]);
    }
}
