//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::io::Write;
use std::path::Path;

use agkit::wsl::BoundingBox;
use agkit::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for gray, 3 for RGB.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let bad = |msg: &str| Error::InvalidArgument {
            op: "image",
            msg: msg.to_string(),
        };
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
                if bytes[i] == b'#' {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        i += 1;
                    }
                } else {
                    i += 1;
                }
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ascii header"))?.to_string());
        }
        i += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            _ => return Err(bad("not a binary PGM/PPM")),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        let data = bytes.get(i..).ok_or_else(|| bad("missing pixel data"))?;
        if data.len() != width * height * channels {
            return Err(bad("pixel data length does not match header"));
        }
        Ok(Image {
            width,
            height,
            channels,
            data: data.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        Image::decode(&std::fs::read(path)?)
    }

    /// Draws a one-pixel rectangle outline.
    pub fn draw_box(&mut self, b: &BoundingBox, rgb: [u8; 3]) {
        assert_eq!(self.channels, 3);
        let mut put = |y: usize, x: usize| {
            if y < self.height && x < self.width {
                let i = 3 * (y * self.width + x);
                self.data[i..i + 3].copy_from_slice(&rgb);
            }
        };
        for x in b.x0..=b.x1 {
            put(b.y0, x);
            put(b.y1, x);
        }
        for y in b.y0..=b.y1 {
            put(y, b.x0);
            put(y, b.x1);
        }
    }
}

/// Linear map of `[min, max]` onto `0..=255`; a constant input maps to 0.
/// Returns the bytes with the observed min and max.
pub fn quantize(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let bytes = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    (bytes, min, max)
}

/// Values already in `[0, 1]` (images), clamped.
pub fn to_bytes_unit(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}
