//! Binary 8-bit PGM (P5) and PPM (P6) reading, PGM writing.

use std::io::Write;

use anyhow::{bail, ensure, Context};

/// Decoded image: `channels` is 1 (P5) or 3 (P6); `pixels` is interleaved
/// row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn header_token(bytes: &[u8], pos: &mut usize) -> anyhow::Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => bail!("truncated header"),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    let text = std::str::from_utf8(&bytes[start..*pos])?;
    text.parse().with_context(|| format!("bad header field {text:?}"))
}

pub fn decode(bytes: &[u8]) -> anyhow::Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => bail!("not a binary PGM (P5) or PPM (P6) file"),
    };
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    ensure!(width > 0 && height > 0, "empty image");
    ensure!(maxval == 255, "only 8-bit images (maxval 255) are supported, got maxval {maxval}");
    ensure!(bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()), "missing separator after header");
    pos += 1;
    let n = width * height * channels;
    ensure!(bytes.len() >= pos + n, "pixel data truncated: need {n} bytes, have {}", bytes.len() - pos);
    Ok(Image { width, height, channels, pixels: bytes[pos..pos + n].to_vec() })
}

pub fn read(path: &std::path::Path) -> anyhow::Result<Image> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &std::path::Path, width: usize, height: usize, pixels: &[u8]) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&encode_pgm(width, height, pixels))?;
    Ok(())
}

impl Image {
    /// `(1, 3, H, W)` values in `[0, 1]`; grey images are replicated.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for c in 0..3 {
            let src = c.min(self.channels - 1);
            for i in 0..plane {
                out[c * plane + i] = self.pixels[i * self.channels + src] as f64 / 255.0;
            }
        }
        out
    }
}

/// Maps values in `[0, 1]` to bytes.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let pixels: Vec<u8> = (0..12).collect();
        let img = decode(&encode_pgm(4, 3, &pixels)).unwrap();
        assert_eq!(img, Image { width: 4, height: 3, channels: 1, pixels });
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode(b"P6 # made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.pixels, vec![1, 2, 3]);
        assert_eq!(img.to_chw(), vec![1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
