//! RGB images and binary PPM (P6, 8-bit) I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Height x width x 3 image, channel-interleaved, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("ppm: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
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
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("expected P6 magic"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        pos += 1; // single whitespace before raster
        let n = width * height * 3;
        let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated raster"))?;
        Ok(Self { height, width, data: raster.iter().map(|&b| b as f64 / 255.0).collect() })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm_bytes(&bytes)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_quantizes_to_8_bits() {
        let mut img = Image::new(2, 3);
        img.set_rgb(1, 2, [1.0, 0.5, 0.0]);
        let back = Image::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert_eq!(back.height, 2);
        assert_eq!(back.width, 3);
        assert_eq!(back.get(1, 2, 0), 1.0);
        assert_eq!(back.get(1, 2, 1), 128.0 / 255.0);
        assert_eq!(back.get(0, 0, 0), 0.0);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 0]);
        let img = Image::from_ppm_bytes(&bytes).unwrap();
        assert_eq!(img.data, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_rejects_other_formats() {
        assert!(Image::from_ppm_bytes(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Image::from_ppm_bytes(b"P6\n2 2\n255\n\x00").is_err());
    }
}
