//! Dense row-major float images (channel-last) plus the PNG / raw-f64
//! sidecar I/O the dataset format uses.
//!
//! PNG files are 8-bit and exist for humans; the `.f64` sidecars carry the
//! exact in-memory values so tests and deterministic replays never depend on
//! quantization.

use crate::bytesio::{self, Reader};
use crate::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut im = Image::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    im[(y, x, ch)] = f(y, x, ch);
                }
            }
        }
        im
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean squared error against an image of identical shape.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "mse: {}x{}x{} vs {}x{}x{}",
                self.h, self.w, self.c, other.h, other.w, other.c
            )));
        }
        let n = self.data.len().max(1);
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n as f64)
    }

    /// Writes an 8-bit PNG, clamping to [0, 1] and rounding to the nearest
    /// code. Supports 1 (grayscale) and 3 (RGB) channels.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let w = self.w as u32;
        let h = self.h as u32;
        let res = match self.c {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                image::GrayImage::from_raw(w, h, buf).unwrap().save(path)
            }
            3 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                image::RgbImage::from_raw(w, h, buf).unwrap().save(path)
            }
            c => return Err(Error::Shape(format!("save_png supports 1 or 3 channels, got {c}"))),
        };
        res.map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let dynimg = image::open(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })?;
        let (im, c) = match &dynimg {
            image::DynamicImage::ImageLuma8(g) => {
                let mut im = Image::zeros(g.height() as usize, g.width() as usize, 1);
                for (i, p) in g.as_raw().iter().enumerate() {
                    im.data[i] = *p as f64 / 255.0;
                }
                (im, 1)
            }
            _ => {
                let rgb = dynimg.to_rgb8();
                let mut im = Image::zeros(rgb.height() as usize, rgb.width() as usize, 3);
                for (i, p) in rgb.as_raw().iter().enumerate() {
                    im.data[i] = *p as f64 / 255.0;
                }
                (im, 3)
            }
        };
        let _ = c;
        Ok(im)
    }

    /// Raw float sidecar: magic, shape, little-endian f64 payload, CRC32.
    /// Round-trips bitwise.
    pub fn save_f64(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.data.len() * 8);
        buf.extend_from_slice(SIDECAR_MAGIC);
        bytesio::put_u32(&mut buf, self.h as u32);
        bytesio::put_u32(&mut buf, self.w as u32);
        bytesio::put_u32(&mut buf, self.c as u32);
        for &v in &self.data {
            bytesio::put_f64(&mut buf, v);
        }
        let crc = bytesio::crc32(&buf);
        bytesio::put_u32(&mut buf, crc);
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_f64(path: &Path) -> Result<Image> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 4 || &buf[..4] != SIDECAR_MAGIC {
            return Err(Error::Corrupted { path: path.to_path_buf(), reason: "bad magic".into() });
        }
        if buf.len() < 4 {
            return Err(Error::Corrupted { path: path.to_path_buf(), reason: "no checksum".into() });
        }
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        if bytesio::crc32(body) != stored {
            return Err(Error::Corrupted { path: path.to_path_buf(), reason: "checksum mismatch".into() });
        }
        let mut r = Reader::new(&body[4..], path);
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        let n = h * w * c;
        if r.remaining() != n * 8 {
            return Err(r.corrupted(format!("payload is {} bytes, shape wants {}", r.remaining(), n * 8)));
        }
        let mut im = Image::zeros(h, w, c);
        for v in im.data.iter_mut() {
            *v = r.f64()?;
        }
        Ok(im)
    }
}

const SIDECAR_MAGIC: &[u8; 4] = b"IF64";

impl std::ops::Index<(usize, usize, usize)> for Image {
    type Output = f64;
    #[inline]
    fn index(&self, (y, x, ch): (usize, usize, usize)) -> &f64 {
        &self.data[(y * self.w + x) * self.c + ch]
    }
}

impl std::ops::IndexMut<(usize, usize, usize)> for Image {
    #[inline]
    fn index_mut(&mut self, (y, x, ch): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Area-mean downsample by integer factor; each output cell is the mean of
/// its `factor x factor` input block. Input dims must be divisible.
pub fn downsample_mean(im: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || im.h % factor != 0 || im.w % factor != 0 {
        return Err(Error::Shape(format!(
            "downsample_mean: {}x{} not divisible by {}",
            im.h, im.w, factor
        )));
    }
    let (oh, ow) = (im.h / factor, im.w / factor);
    let mut out = Image::zeros(oh, ow, im.c);
    let inv = 1.0 / (factor * factor) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..im.c {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += im[(oy * factor + dy, ox * factor + dx, ch)];
                    }
                }
                out[(oy, ox, ch)] = s * inv;
            }
        }
    }
    Ok(out)
}

/// Bilinear upsample to an arbitrary target size with half-pixel centers
/// (align_corners = false): output center (i + 0.5) maps to input coordinate
/// (i + 0.5) * in/out - 0.5, clamped at the borders. Output values are convex
/// combinations of inputs, so the input range is preserved.
pub fn upsample_bilinear(im: &Image, oh: usize, ow: usize) -> Image {
    let mut out = Image::zeros(oh, ow, im.c);
    let sy = im.h as f64 / oh as f64;
    let sx = im.w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (im.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(im.h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (im.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(im.w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..im.c {
                let a = im[(y0, x0, ch)] * (1.0 - tx) + im[(y0, x1, ch)] * tx;
                let b = im[(y1, x0, ch)] * (1.0 - tx) + im[(y1, x1, ch)] * tx;
                out[(oy, ox, ch)] = a * (1.0 - ty) + b * ty;
            }
        }
    }
    out
}

/// Reflect-pads (edge-mirroring without repeating the border pixel) so that
/// height and width become divisible by `multiple`.
pub fn pad_reflect_to_multiple(im: &Image, multiple: usize) -> Image {
    let ph = (multiple - im.h % multiple) % multiple;
    let pw = (multiple - im.w % multiple) % multiple;
    if ph == 0 && pw == 0 {
        return im.clone();
    }
    let (nh, nw) = (im.h + ph, im.w + pw);
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else {
            // mirror about the last pixel: n-2, n-3, ...
            let over = i - (n - 1);
            n.saturating_sub(1 + over).min(n - 1)
        }
    };
    Image::from_fn(nh, nw, im.c, |y, x, ch| im[(reflect(y, im.h), reflect(x, im.w), ch)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn index_layout_is_row_major_channel_last() {
        let mut im = Image::zeros(2, 3, 3);
        im[(1, 2, 0)] = 5.0;
        assert_eq!(im.data[(1 * 3 + 2) * 3], 5.0);
    }

    #[test]
    fn sidecar_roundtrip_is_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let im = Image::from_fn(7, 5, 3, |_, _, _| rng.gen::<f64>() * 2.0 - 1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f64");
        im.save_f64(&p).unwrap();
        let back = Image::load_f64(&p).unwrap();
        assert_eq!(im.h, back.h);
        for (a, b) in im.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sidecar_detects_corruption() {
        let im = Image::zeros(4, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f64");
        im.save_f64(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(Image::load_f64(&p), Err(Error::Corrupted { .. })));
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let im = Image::from_fn(9, 6, 3, |y, x, ch| ((y * 31 + x * 7 + ch * 3) % 97) as f64 / 96.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        im.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert!(back.same_shape(&im));
        for (a, b) in im.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn downsample_mean_blocks() {
        let im = Image::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64);
        let d = downsample_mean(&im, 2).unwrap();
        // top-left block: 0,1,4,5 -> 2.5
        assert_eq!(d[(0, 0, 0)], 2.5);
        assert_eq!(d[(1, 1, 0)], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
        assert!(downsample_mean(&im, 3).is_err());
    }

    #[test]
    fn upsample_preserves_constant_and_range() {
        let im = Image::from_fn(3, 3, 1, |_, _, _| 0.7);
        let up = upsample_bilinear(&im, 10, 8);
        assert!(up.data.iter().all(|v| (v - 0.7).abs() < 1e-12));

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let im = Image::from_fn(5, 4, 1, |_, _, _| rng.gen::<f64>());
        let lo = im.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = im.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let up = upsample_bilinear(&im, 16, 16);
        assert!(up.data.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn pad_reflect_shapes_and_mirror() {
        let im = Image::from_fn(5, 6, 1, |y, x, _| (y * 6 + x) as f64);
        let p = pad_reflect_to_multiple(&im, 4);
        assert_eq!((p.h, p.w), (8, 8));
        // row 5 mirrors row 3 (mirror about last row 4), row 6 -> row 2.
        assert_eq!(p[(5, 0, 0)], im[(3, 0, 0)]);
        assert_eq!(p[(6, 0, 0)], im[(2, 0, 0)]);
        assert_eq!(p[(0, 7, 0)], im[(0, 3, 0)]);
        // already divisible: clone
        let q = pad_reflect_to_multiple(&im, 1);
        assert_eq!(q, im);
    }
}
