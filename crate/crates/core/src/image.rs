//! Small CPU image types (RGB f64 and single-channel planes) plus the
//! file formats used across the pipeline: binary PPM (P6), PNG, and a raw
//! float32 depth dump.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// RGB image, row-major, channels interleaved, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.width, self.height),
                got: format!("{}x{}", other.width, other.height),
            })
        }
    }

    /// `self + s * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Image, s: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a - b).collect();
        Ok(Image { width: self.width, height: self.height, data })
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    /// Root mean square error over all pixel channels.
    pub fn mean_l2(&self, other: &Image) -> Result<f64> {
        Ok(self.mse(other)?.sqrt())
    }

    /// Euclidean norm of the residual image, `||self - other||_2`.
    pub fn l2_distance(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// PSNR in dB against `other`, peak value 1.0.
    pub fn psnr(&self, other: &Image) -> Result<f64> {
        let mse = self.mse(other)?;
        if mse <= 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(-10.0 * mse.log10())
    }
}

/// Single-channel f64 plane (alpha, depth).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self { width, height, data: vec![v; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode as binary PPM (P6, 8-bit).
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len());
    for v in &img.data {
        out.push(to_u8(*v));
    }
    out
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_ppm(img))?;
    Ok(())
}

/// Decode a binary PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<Vec<u8>> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::ImageParse(format!("unexpected end of file reading {what}")));
        }
        Ok(bytes[start..pos].to_vec())
    };

    let magic = token("magic")?;
    if magic != b"P6" {
        return Err(Error::ImageParse("not a binary PPM (P6)".into()));
    }
    let parse_num = |tok: Vec<u8>, what: &str| -> Result<usize> {
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::ImageParse(format!("bad {what}")))
    };
    let width = parse_num(token("width")?, "width")?;
    let height = parse_num(token("height")?, "height")?;
    let maxval = parse_num(token("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(Error::ImageParse(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and payload
    if pos >= bytes.len() {
        return Err(Error::ImageParse("missing payload".into()));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() - pos < need {
        return Err(Error::ImageParse(format!(
            "truncated payload: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image { width, height, data })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.get(x, y);
            buf.put_pixel(x as u32, y as u32, image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]));
        }
    }
    buf.save(path).map_err(|e| Error::ImageParse(format!("png write: {e}")))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::ImageParse(format!("png read: {e}")))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out.set(x, y, [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0]);
        }
    }
    Ok(out)
}

/// Load by extension; `.ppm` and `.png` are supported.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        Some("png") => read_png(path),
        other => Err(Error::ImageParse(format!("unsupported image extension {other:?}"))),
    }
}

const DEPTH_MAGIC: &[u8; 8] = b"DSDEPTH1";

/// Raw float32 depth dump: 16-byte header (8-byte magic, u32 width, u32 height,
/// little-endian) followed by row-major f32 LE samples.
pub fn write_depth_raw(plane: &Plane, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + plane.data.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(plane.width as u32).to_le_bytes());
    out.extend_from_slice(&(plane.height as u32).to_le_bytes());
    for v in &plane.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_depth_raw(path: &Path) -> Result<Plane> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..8] != DEPTH_MAGIC {
        return Err(Error::ImageParse("bad depth header".into()));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let need = width * height * 4;
    if bytes.len() - 16 < need {
        return Err(Error::ImageParse("truncated depth payload".into()));
    }
    let data = bytes[16..16 + need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Plane { width, height, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = Image::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.25]);
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ppm_rejects_truncated() {
        let mut bytes = encode_ppm(&Image::filled(4, 4, [0.5; 3]));
        bytes.truncate(bytes.len() - 5);
        assert!(decode_ppm(&bytes).is_err());
    }

    #[test]
    fn depth_round_trip() {
        let plane = Plane { width: 3, height: 2, data: vec![0.5, 1.5, 2.5, 3.5, 4.5, 100.0] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.raw");
        write_depth_raw(&plane, &p).unwrap();
        let back = read_depth_raw(&p).unwrap();
        assert_eq!(back.width, 3);
        for (a, b) in plane.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
