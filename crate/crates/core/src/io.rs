//! PNG images, binary masks and plain-text `key=value` manifests.
//!
//! Pixel values map to `[-1, 1]` as `v = u/127.5 − 1` for 8-bit `u`, and
//! back with rounding, so any tensor on that grid round-trips exactly.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn to_unit(u: u8) -> f32 {
    f32::from(u) / 127.5 - 1.0
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Snaps a value to the nearest representable 8-bit level.
pub fn quantize(v: f32) -> f32 {
    to_unit(to_byte(v))
}

fn image_err(path: &Path, e: impl Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Reads a PNG as a `channels×H×W` tensor (`channels` 1 = luma, 3 = RGB).
pub fn read_image(path: impl AsRef<Path>, channels: usize) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let g = img.to_luma8();
            Tensor::new(vec![1, h, w], g.pixels().map(|p| to_unit(p.0[0])).collect())
        }
        3 => {
            let rgb = img.to_rgb8();
            let mut data = vec![0.0f32; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = to_unit(p.0[c]);
                }
            }
            Tensor::new(vec![3, h, w], data)
        }
        c => Err(Error::config(format!("unsupported channel count {c}"))),
    }
}

/// Writes a `1×H×W` or `3×H×W` tensor in `[-1, 1]` as PNG (values clamped).
pub fn write_image(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = match img.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(Error::dim(format!("cannot write image of shape {s:?}"))),
    };
    let d = img.data();
    let res = if c == 1 {
        let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([to_byte(d[y as usize * w + x as usize])])
        });
        buf.save(path)
    } else {
        let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([to_byte(d[i]), to_byte(d[h * w + i]), to_byte(d[2 * h * w + i])])
        });
        buf.save(path)
    };
    res.map_err(|e| image_err(path, e))
}

/// Reads a grayscale mask: luma > 127 is foreground (1), else 0.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(
        vec![h, w],
        img.pixels().map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 }).collect(),
    )
}

/// Writes a binary `H×W` mask as black/white grayscale PNG.
pub fn write_mask(path: impl AsRef<Path>, mask: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.dims2()?;
    let d = mask.data();
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if d[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Ordered `key=value` text file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.insert(key.into(), value.to_string());
        self
    }

    pub fn extend(&mut self, prefix: &str, entries: impl IntoIterator<Item = (String, String)>) {
        for (k, v) in entries {
            self.entries.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_grid_round_trips() {
        for u in 0..=255u8 {
            assert_eq!(to_byte(to_unit(u)), u);
        }
        assert_eq!(to_byte(-3.0), 0);
        assert_eq!(to_byte(3.0), 255);
    }

    #[test]
    fn rgb_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = Tensor::from_fn(vec![3, 4, 5], |i| quantize((i as f32 * 0.37).sin())).unwrap();
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p, 3).unwrap(), img);
    }

    #[test]
    fn mask_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let buf: GrayImage = ImageBuffer::from_fn(3, 1, |x, _| Luma([[0u8, 127, 128][x as usize]]));
        buf.save(&p).unwrap();
        assert_eq!(read_mask(&p).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn manifest_parse_and_print() {
        let m = Manifest::parse("# c\nb = 2\n\na=x=y\n").unwrap();
        assert_eq!(m.get("a"), Some("x=y"));
        assert_eq!(m.to_text(), "a=x=y\nb=2\n");
        assert!(Manifest::parse("novalue").is_err());
    }

    #[test]
    fn missing_image_is_an_image_error() {
        assert!(matches!(read_image("/nonexistent/x.png", 3), Err(Error::Image { .. })));
    }
}
