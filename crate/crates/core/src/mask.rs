//! Semantic consistency-guided masking.
//!
//! A reliability scale sigma is predicted per feature-grid cell from fixed
//! image features, supervised by a detached residual target E that is large
//! only where the render and the ground truth disagree both photometrically
//! and semantically. Sigma converts to a consistency score
//! `S = exp(-sigma^2 / c_sigma)` (bilinearly upsampled), and the final
//! reconstruction mask blends the binary prior with S:
//!
//! `M = M_bin * S^eta_s + (1 - M_bin) * S^eta_t`
//!
//! So confidently consistent pixels keep supervision even where the prior
//! flagged them as transient, and inconsistent pixels lose it even where
//! the prior trusted them. During warm-up the trainer bypasses all of this
//! and uses `M = M_bin` directly.
//!
//! The feature backend is a deterministic patch-statistics extractor (per
//! cell: 3 channel means, 3 channel standard deviations, 6 oriented
//! gradient-energy bins of the luminance, each standardized by the fixed
//! constants below). Any external feature source with the same grid layout
//! can be loaded from a file instead.

use crate::bytesio::{self, Reader};
use crate::cloud::softplus;
use crate::img::{downsample_mean, pad_reflect_to_multiple, upsample_bilinear, Image};
use crate::optim::FlatAdam;
use crate::{Error, Result};
use rand::Rng;
use std::path::Path;

/// Offset added before the softplus so a zero-initialized predictor starts
/// at sigma = softplus(ln(e-1)) = 1 exactly.
pub fn delta0() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Epsilon in the predictor loss denominators.
pub const EPS_INC: f64 = 1e-6;
/// Feature channels produced by the built-in extractor.
pub const FEATURE_DIM: usize = 12;
/// Hidden width of the predictor MLP.
pub const HIDDEN: usize = 16;

// Standardization constants for the built-in extractor, chosen once so all
// twelve channels land near unit range on typical content: raw channel
// means sit in [0,1], per-cell standard deviations rarely exceed 0.3, and
// per-bin mean gradient magnitudes rarely exceed 0.5.
pub const MEAN_SHIFT: f64 = 0.5;
pub const MEAN_SCALE: f64 = 0.25;
pub const STD_SHIFT: f64 = 0.1;
pub const STD_SCALE: f64 = 0.1;
pub const GRAD_SHIFT: f64 = 0.1;
pub const GRAD_SCALE: f64 = 0.2;

const GRID_MAGIC: &[u8; 4] = b"FGRD";

/// Per-view feature grid, channel-major `[c][gy][gx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub c: usize,
    pub gh: usize,
    pub gw: usize,
    pub grid_scale: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn at(&self, c: usize, gy: usize, gx: usize) -> f64 {
        self.data[(c * self.gh + gy) * self.gw + gx]
    }

    /// Copies the C-vector at one grid location into `out`.
    pub fn location(&self, gy: usize, gx: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.c);
        for (ch, slot) in out.iter_mut().enumerate() {
            *slot = self.at(ch, gy, gx);
        }
    }

    pub fn cells(&self) -> usize {
        self.gh * self.gw
    }

    /// Binary grid file: magic, version, dims, f64 payload, CRC32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.data.len() * 8);
        buf.extend_from_slice(GRID_MAGIC);
        bytesio::put_u32(&mut buf, 1);
        bytesio::put_u32(&mut buf, self.c as u32);
        bytesio::put_u32(&mut buf, self.gh as u32);
        bytesio::put_u32(&mut buf, self.gw as u32);
        bytesio::put_u32(&mut buf, self.grid_scale as u32);
        bytesio::put_f64_slice(&mut buf, &self.data);
        let crc = bytesio::crc32(&buf);
        bytesio::put_u32(&mut buf, crc);
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FeatureGrid> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 4
            || buf[buf.len() - 4..] != bytesio::crc32(&buf[..buf.len() - 4]).to_le_bytes()
        {
            return Err(Error::Corrupted { path: path.into(), reason: "bad checksum".into() });
        }
        let mut r = Reader::new(&buf[..buf.len() - 4], path);
        if r.take(4)? != GRID_MAGIC {
            return Err(r.corrupted("bad magic"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(r.corrupted(format!("unsupported feature grid version {version}")));
        }
        let c = r.u32()? as usize;
        let gh = r.u32()? as usize;
        let gw = r.u32()? as usize;
        let grid_scale = r.u32()? as usize;
        let data = r.f64_vec()?;
        if data.len() != c * gh * gw {
            return Err(r.corrupted("payload length does not match dimensions"));
        }
        r.finish()?;
        Ok(FeatureGrid { c, gh, gw, grid_scale, data })
    }
}

/// Deterministic patch-statistics features. The image is reflect-padded up
/// to a multiple of `grid_scale`; each cell yields 12 standardized values.
pub fn extract_features(img: &Image, grid_scale: usize) -> FeatureGrid {
    assert_eq!(img.c, 3, "feature extractor expects RGB");
    assert!(grid_scale > 0);
    let padded = pad_reflect_to_multiple(img, grid_scale);
    let gh = padded.h / grid_scale;
    let gw = padded.w / grid_scale;
    let c = FEATURE_DIM;
    let mut data = vec![0.0; c * gh * gw];
    let mut put = |ch: usize, gy: usize, gx: usize, v: f64| {
        data[(ch * gh + gy) * gw + gx] = v;
    };

    // Luminance plane for the orientation bins (Rec. 601 weights).
    let lum: Vec<f64> = (0..padded.h * padded.w)
        .map(|i| {
            let y = i / padded.w;
            let x = i % padded.w;
            0.299 * padded[(y, x, 0)] + 0.587 * padded[(y, x, 1)] + 0.114 * padded[(y, x, 2)]
        })
        .collect();
    let lum_at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, padded.h as isize - 1) as usize;
        let xx = x.clamp(0, padded.w as isize - 1) as usize;
        lum[yy * padded.w + xx]
    };

    let cell_px = (grid_scale * grid_scale) as f64;
    for gy in 0..gh {
        for gx in 0..gw {
            let y0 = gy * grid_scale;
            let x0 = gx * grid_scale;
            // Channel means and standard deviations.
            for ch in 0..3 {
                let mut sum = 0.0;
                let mut sum2 = 0.0;
                for y in y0..y0 + grid_scale {
                    for x in x0..x0 + grid_scale {
                        let v = padded[(y, x, ch)];
                        sum += v;
                        sum2 += v * v;
                    }
                }
                let mean = sum / cell_px;
                let var = (sum2 / cell_px - mean * mean).max(0.0);
                put(ch, gy, gx, (mean - MEAN_SHIFT) / MEAN_SCALE);
                put(3 + ch, gy, gx, (var.sqrt() - STD_SHIFT) / STD_SCALE);
            }
            // Oriented gradient energy: clamped central differences of the
            // luminance, magnitude accumulated into 6 orientation bins over
            // [0, pi), normalized by cell pixel count.
            let mut bins = [0.0f64; 6];
            for y in y0..y0 + grid_scale {
                for x in x0..x0 + grid_scale {
                    let yi = y as isize;
                    let xi = x as isize;
                    let gxv = (lum_at(yi, xi + 1) - lum_at(yi, xi - 1)) * 0.5;
                    let gyv = (lum_at(yi + 1, xi) - lum_at(yi - 1, xi)) * 0.5;
                    let mag = (gxv * gxv + gyv * gyv).sqrt();
                    if mag > 0.0 {
                        let mut theta = gyv.atan2(gxv);
                        if theta < 0.0 {
                            theta += std::f64::consts::PI;
                        }
                        // atan2 lands in [0, pi] after the fold; pi aliases 0.
                        let mut bin = (theta / std::f64::consts::PI * 6.0) as usize;
                        if bin >= 6 {
                            bin = 0;
                        }
                        bins[bin] += mag;
                    }
                }
            }
            for (k, &b) in bins.iter().enumerate() {
                put(6 + k, gy, gx, (b / cell_px - GRAD_SHIFT) / GRAD_SCALE);
            }
        }
    }
    FeatureGrid { c, gh, gw, grid_scale, data }
}

/// Location-wise reliability predictor: a C -> 16 -> 1 MLP with tanh
/// hidden activation. The final layer starts at zero so prediction starts
/// at sigma = 1 everywhere regardless of the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub c: usize,
    /// Row-major `HIDDEN x c`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Predictor {
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (c as f64).sqrt();
        let w1 = (0..HIDDEN * c).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
        Predictor { c, w1, b1: vec![0.0; HIDDEN], w2: vec![0.0; HIDDEN], b2: 0.0 }
    }

    pub fn n_weights(&self) -> usize {
        HIDDEN * self.c + HIDDEN + HIDDEN + 1
    }

    /// Flat layout: w1 row-major, b1, w2, b2.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_weights());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn from_flat(c: usize, flat: &[f64]) -> Result<Predictor> {
        let want = HIDDEN * c + 2 * HIDDEN + 1;
        if flat.len() != want {
            return Err(Error::Shape(format!(
                "predictor weight vector has {} entries, expected {want}",
                flat.len()
            )));
        }
        let (w1, rest) = flat.split_at(HIDDEN * c);
        let (b1, rest) = rest.split_at(HIDDEN);
        let (w2, b2) = rest.split_at(HIDDEN);
        Ok(Predictor {
            c,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2[0],
        })
    }

    pub fn apply_flat(&mut self, flat: &[f64]) -> Result<()> {
        *self = Predictor::from_flat(self.c, flat)?;
        Ok(())
    }

    fn raw_at(&self, feat: &[f64]) -> f64 {
        let mut out = self.b2;
        for j in 0..HIDDEN {
            let mut pre = self.b1[j];
            let row = &self.w1[j * self.c..(j + 1) * self.c];
            for (w, f) in row.iter().zip(feat) {
                pre += w * f;
            }
            out += self.w2[j] * pre.tanh();
        }
        out
    }

    /// Per-cell sigma = softplus(raw + delta0), row-major gh x gw.
    pub fn predict_sigma(&self, grid: &FeatureGrid) -> Result<Vec<f64>> {
        if grid.c != self.c {
            return Err(Error::Shape(format!(
                "feature width {} does not match predictor width {}",
                grid.c, self.c
            )));
        }
        let d0 = delta0();
        let mut feat = vec![0.0; self.c];
        let mut out = Vec::with_capacity(grid.cells());
        for gy in 0..grid.gh {
            for gx in 0..grid.gw {
                grid.location(gy, gx, &mut feat);
                out.push(softplus(self.raw_at(&feat) + d0));
            }
        }
        Ok(out)
    }

    /// Full analytic backward pass: loss over the grid plus the gradient of
    /// every weight, for one (features, E) pair.
    pub fn loss_and_weight_grad(
        &self,
        grid: &FeatureGrid,
        e_target: &[f64],
        lambda_inc: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if grid.c != self.c {
            return Err(Error::Shape("feature width mismatch".into()));
        }
        if e_target.len() != grid.cells() {
            return Err(Error::Shape("residual target size mismatch".into()));
        }
        let sigma = self.predict_sigma(grid)?;
        let (loss, dl_dsigma) = predictor_loss(&sigma, e_target, lambda_inc);

        let d0 = delta0();
        let mut g_w1 = vec![0.0; HIDDEN * self.c];
        let mut g_b1 = vec![0.0; HIDDEN];
        let mut g_w2 = vec![0.0; HIDDEN];
        let mut g_b2 = 0.0;
        let mut feat = vec![0.0; self.c];
        for gy in 0..grid.gh {
            for gx in 0..grid.gw {
                let cell = gy * grid.gw + gx;
                grid.location(gy, gx, &mut feat);
                // Forward again per cell to get the activations.
                let mut hidden = [0.0f64; HIDDEN];
                let mut raw = self.b2;
                for j in 0..HIDDEN {
                    let mut pre = self.b1[j];
                    let row = &self.w1[j * self.c..(j + 1) * self.c];
                    for (w, f) in row.iter().zip(&feat) {
                        pre += w * f;
                    }
                    hidden[j] = pre.tanh();
                    raw += self.w2[j] * hidden[j];
                }
                // d sigma / d raw = sigmoid(raw + delta0).
                let x = raw + d0;
                let sp_grad = if x > 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
                let g_raw = dl_dsigma[cell] * sp_grad;
                g_b2 += g_raw;
                for j in 0..HIDDEN {
                    g_w2[j] += g_raw * hidden[j];
                    let g_pre = g_raw * self.w2[j] * (1.0 - hidden[j] * hidden[j]);
                    g_b1[j] += g_pre;
                    let row = &mut g_w1[j * self.c..(j + 1) * self.c];
                    for (slot, f) in row.iter_mut().zip(&feat) {
                        *slot += g_pre * f;
                    }
                }
            }
        }
        let mut flat = Vec::with_capacity(self.n_weights());
        flat.extend_from_slice(&g_w1);
        flat.extend_from_slice(&g_b1);
        flat.extend_from_slice(&g_w2);
        flat.push(g_b2);
        Ok((loss, flat))
    }
}

/// Predictor plus its optimizer state, stepped once per training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorTrainer {
    pub predictor: Predictor,
    pub opt: FlatAdam,
}

impl PredictorTrainer {
    pub fn new(predictor: Predictor) -> Self {
        let n = predictor.n_weights();
        PredictorTrainer { predictor, opt: FlatAdam::new(n) }
    }

    pub fn update(&mut self, grid: &FeatureGrid, e_target: &[f64], lambda_inc: f64, lr: f64) -> Result<f64> {
        let (loss, grads) = self.predictor.loss_and_weight_grad(grid, e_target, lambda_inc)?;
        let mut flat = self.predictor.flatten();
        self.opt.step(&mut flat, &grads, lr);
        self.predictor.apply_flat(&flat)?;
        Ok(loss)
    }
}

/// Detached residual target per grid cell:
/// `E = min(1, d_cos / s_sem) * mean_ch |D(render) - D(gt)|`
/// where D is area-mean downsampling to the feature grid and d_cos is the
/// cosine distance between the two feature vectors at that cell. Zero-norm
/// feature vectors contribute zero distance (no semantic evidence).
pub fn residual_target(
    render: &Image,
    gt: &Image,
    f_render: &FeatureGrid,
    f_gt: &FeatureGrid,
    s_sem: f64,
) -> Result<Vec<f64>> {
    if !render.same_shape(gt) {
        return Err(Error::Shape("render/gt shape mismatch".into()));
    }
    if f_render.gh != f_gt.gh || f_render.gw != f_gt.gw || f_render.c != f_gt.c {
        return Err(Error::Shape("feature grid mismatch".into()));
    }
    let gs = f_gt.grid_scale;
    let d_render = downsample_mean(&pad_reflect_to_multiple(render, gs), gs)?;
    let d_gt = downsample_mean(&pad_reflect_to_multiple(gt, gs), gs)?;
    if d_render.h != f_gt.gh || d_render.w != f_gt.gw {
        return Err(Error::Shape("feature grid does not match image grid".into()));
    }
    let mut fa = vec![0.0; f_gt.c];
    let mut fb = vec![0.0; f_gt.c];
    let mut out = Vec::with_capacity(f_gt.cells());
    for gy in 0..f_gt.gh {
        for gx in 0..f_gt.gw {
            f_render.location(gy, gx, &mut fa);
            f_gt.location(gy, gx, &mut fb);
            let dot: f64 = fa.iter().zip(&fb).map(|(a, b)| a * b).sum();
            let na: f64 = fa.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = fb.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d_cos = if na < 1e-12 || nb < 1e-12 {
                0.0
            } else {
                1.0 - (dot / (na * nb)).clamp(-1.0, 1.0)
            };
            let gate = (d_cos / s_sem).min(1.0);
            let mut diff = 0.0;
            for ch in 0..d_gt.c {
                diff += (d_render[(gy, gx, ch)] - d_gt[(gy, gx, ch)]).abs();
            }
            out.push(gate * diff / d_gt.c as f64);
        }
    }
    Ok(out)
}

/// `L_inc = mean(E / (2 sigma^2 + eps) + lambda_inc ln(sigma + eps))` and
/// its exact derivative with respect to each sigma.
pub fn predictor_loss(sigma: &[f64], e_target: &[f64], lambda_inc: f64) -> (f64, Vec<f64>) {
    assert_eq!(sigma.len(), e_target.len());
    let n = sigma.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(sigma.len());
    for (&s, &e) in sigma.iter().zip(e_target) {
        let denom = 2.0 * s * s + EPS_INC;
        loss += e / denom + lambda_inc * (s + EPS_INC).ln();
        grad.push((-4.0 * s * e / (denom * denom) + lambda_inc / (s + EPS_INC)) / n);
    }
    (loss / n, grad)
}

/// `S = exp(-sigma^2 / c_sigma)` per cell, bilinearly upsampled to the
/// padded image size and cropped to `h x w`.
pub fn consistency_score(
    sigma: &[f64],
    gh: usize,
    gw: usize,
    grid_scale: usize,
    c_sigma: f64,
    h: usize,
    w: usize,
) -> Result<Image> {
    if sigma.len() != gh * gw {
        return Err(Error::Shape("sigma grid size mismatch".into()));
    }
    let small = Image {
        h: gh,
        w: gw,
        c: 1,
        data: sigma.iter().map(|s| (-s * s / c_sigma).exp()).collect(),
    };
    let up = upsample_bilinear(&small, gh * grid_scale, gw * grid_scale);
    if h > up.h || w > up.w {
        return Err(Error::Shape("consistency grid smaller than target image".into()));
    }
    Ok(Image::from_fn(h, w, 1, |y, x, _| up[(y, x, 0)]))
}

/// `M = M_bin * S^eta_s + (1 - M_bin) * S^eta_t`, all single-channel.
pub fn combine_mask(s: &Image, m_bin: &Image, eta_s: f64, eta_t: f64) -> Result<Image> {
    if !s.same_shape(m_bin) {
        return Err(Error::Shape("score/prior shape mismatch".into()));
    }
    Ok(Image::from_fn(s.h, s.w, 1, |y, x, _| {
        let sv = s[(y, x, 0)].clamp(0.0, 1.0);
        let b = m_bin[(y, x, 0)];
        b * sv.powf(eta_s) + (1.0 - b) * sv.powf(eta_t)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.gen::<f64>())
    }

    fn random_grid(gh: usize, gw: usize, seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureGrid {
            c: FEATURE_DIM,
            gh,
            gw,
            grid_scale: 8,
            data: (0..FEATURE_DIM * gh * gw).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        }
    }

    #[test]
    fn constant_gray_features() {
        let img = Image::from_fn(16, 16, 3, |_, _, _| 0.35);
        let g = extract_features(&img, 8);
        assert_eq!((g.gh, g.gw, g.c), (2, 2, 12));
        for gy in 0..2 {
            for gx in 0..2 {
                for ch in 0..3 {
                    let want = (0.35 - MEAN_SHIFT) / MEAN_SCALE;
                    assert!((g.at(ch, gy, gx) - want).abs() < 1e-12);
                    let want_std = (0.0 - STD_SHIFT) / STD_SCALE;
                    assert!((g.at(3 + ch, gy, gx) - want_std).abs() < 1e-12);
                }
                for k in 0..6 {
                    let want_grad = (0.0 - GRAD_SHIFT) / GRAD_SCALE;
                    assert!((g.at(6 + k, gy, gx) - want_grad).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn features_deterministic_bitwise() {
        let img = random_image(24, 16, 3);
        let a = extract_features(&img, 8);
        let b = extract_features(&img, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn features_match_brute_force_patch_statistics() {
        // Independent reimplementation: raw loops, no shared helpers.
        let img = random_image(16, 24, 9);
        let g = extract_features(&img, 8);
        for gy in 0..2 {
            for gx in 0..3 {
                for ch in 0..3 {
                    let mut vals = Vec::new();
                    for y in gy * 8..gy * 8 + 8 {
                        for x in gx * 8..gx * 8 + 8 {
                            vals.push(img[(y, x, ch)]);
                        }
                    }
                    let mean = vals.iter().sum::<f64>() / 64.0;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
                    let want_mean = (mean - MEAN_SHIFT) / MEAN_SCALE;
                    let want_std = (var.sqrt() - STD_SHIFT) / STD_SCALE;
                    assert!((g.at(ch, gy, gx) - want_mean).abs() < 1e-9, "mean {ch} {gy} {gx}");
                    assert!((g.at(3 + ch, gy, gx) - want_std).abs() < 1e-9, "std {ch} {gy} {gx}");
                }
            }
        }
    }

    #[test]
    fn mean_features_flip_equivariantly() {
        let img = random_image(16, 32, 5);
        let flipped = Image::from_fn(16, 32, 3, |y, x, ch| img[(y, 31 - x, ch)]);
        let a = extract_features(&img, 8);
        let b = extract_features(&flipped, 8);
        for ch in 0..3 {
            for gy in 0..a.gh {
                for gx in 0..a.gw {
                    let mirrored = a.gw - 1 - gx;
                    assert!(
                        (a.at(ch, gy, gx) - b.at(ch, gy, mirrored)).abs() < 1e-12,
                        "mean channel {ch} at {gy},{gx}"
                    );
                }
            }
        }
    }

    #[test]
    fn non_divisible_image_pads_then_crops() {
        let img = random_image(13, 11, 1);
        let g = extract_features(&img, 8);
        assert_eq!((g.gh, g.gw), (2, 2));
        assert!(g.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn grid_file_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.fgrd");
        let g = random_grid(3, 4, 17);
        g.save(&path).unwrap();
        let back = FeatureGrid::load(&path).unwrap();
        assert_eq!(g, back);
        // Flip a payload byte: checksum must catch it.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[30] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(FeatureGrid::load(&path).is_err());
    }

    #[test]
    fn zero_init_predictor_gives_unit_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Predictor::init(FEATURE_DIM, &mut rng);
        let g = random_grid(2, 3, 1);
        let sigma = p.predict_sigma(&g).unwrap();
        assert_eq!(sigma.len(), 6);
        for s in sigma {
            assert!((s - 1.0).abs() < 1e-15, "sigma {s}");
        }
    }

    #[test]
    fn softplus_asymptote() {
        assert!((softplus(40.0) - 40.0).abs() < 1e-15);
    }

    #[test]
    fn predictor_matches_scalar_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = Predictor::init(FEATURE_DIM, &mut rng);
        for w in p.w2.iter_mut() {
            *w = rng.gen::<f64>() - 0.5;
        }
        for b in p.b1.iter_mut() {
            *b = rng.gen::<f64>() - 0.5;
        }
        p.b2 = 0.3;
        let g = random_grid(3, 3, 22);
        let sigma = p.predict_sigma(&g).unwrap();
        // Scalar oracle at 3 probed locations.
        for &(gy, gx) in &[(0usize, 0usize), (1, 2), (2, 1)] {
            let mut f = vec![0.0; FEATURE_DIM];
            g.location(gy, gx, &mut f);
            let mut raw = p.b2;
            for j in 0..HIDDEN {
                let mut pre = p.b1[j];
                for k in 0..FEATURE_DIM {
                    pre += p.w1[j * FEATURE_DIM + k] * f[k];
                }
                raw += p.w2[j] * pre.tanh();
            }
            let want = (1.0 + (raw + delta0()).exp()).ln();
            let got = sigma[gy * 3 + gx];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn predictor_width_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Predictor::init(8, &mut rng);
        let g = random_grid(2, 2, 0);
        assert!(p.predict_sigma(&g).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Predictor::init(FEATURE_DIM, &mut rng);
        p.w2[3] = 0.7;
        p.b2 = -0.1;
        let flat = p.flatten();
        assert_eq!(flat.len(), p.n_weights());
        let q = Predictor::from_flat(FEATURE_DIM, &flat).unwrap();
        assert_eq!(p, q);
        assert!(Predictor::from_flat(FEATURE_DIM, &flat[1..]).is_err());
    }

    #[test]
    fn residual_target_zero_for_identical_inputs() {
        let img = random_image(16, 16, 4);
        let f = extract_features(&img, 8);
        let e = residual_target(&img, &img, &f, &f, 0.5).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_features_gate_out_photometric_offset() {
        let gt = random_image(16, 16, 6);
        let render = Image::from_fn(16, 16, 3, |y, x, ch| gt[(y, x, ch)] + 0.2);
        let f = extract_features(&gt, 8);
        // Same features supplied for both sides: d_cos = 0 gates E to 0.
        let e = residual_target(&render, &gt, &f, &f, 0.5).unwrap();
        assert!(e.iter().all(|&v| v.abs() < 1e-15), "max {:?}", e.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn residual_target_frozen_example() {
        // Orthogonal feature vectors (d_cos = 1), photometric delta 0.3:
        // E = min(1, 1/0.5) * 0.3 = 0.3.
        let gt = Image::from_fn(8, 8, 3, |_, _, _| 0.2);
        let render = Image::from_fn(8, 8, 3, |_, _, _| 0.5);
        let mut fa = FeatureGrid { c: 2, gh: 1, gw: 1, grid_scale: 8, data: vec![1.0, 0.0] };
        let fb = FeatureGrid { c: 2, gh: 1, gw: 1, grid_scale: 8, data: vec![0.0, 1.0] };
        let e = residual_target(&render, &gt, &fa, &fb, 0.5).unwrap();
        assert_eq!(e.len(), 1);
        assert!((e[0] - 0.3).abs() < 1e-12, "E {}", e[0]);
        // Aligned features: gate shuts fully.
        fa.data = vec![0.0, 2.0];
        let e = residual_target(&render, &gt, &fa, &fb, 0.5).unwrap();
        assert!(e[0].abs() < 1e-15);
    }

    #[test]
    fn predictor_loss_frozen_values() {
        let (l, g) = predictor_loss(&[1.0], &[0.0], 0.0);
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0]);
        // Exact evaluation of the single-cell example.
        let (l, _) = predictor_loss(&[1.0], &[1.0], 0.5);
        let want = 1.0 / (2.0 + 1e-6) + 0.5 * (1.0 + 1e-6f64).ln();
        assert!((l - want).abs() < 1e-15, "{l} vs {want}");
        assert!((l - 0.5).abs() < 1e-6);
    }

    #[test]
    fn predictor_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sigma: Vec<f64> = (0..12).map(|_| 0.3 + rng.gen::<f64>() * 2.0).collect();
        let e: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
        let (_, grad) = predictor_loss(&sigma, &e, 0.5);
        let h = 1e-6;
        for i in 0..sigma.len() {
            let mut sp = sigma.clone();
            sp[i] += h;
            let mut sm = sigma.clone();
            sm[i] -= h;
            let (lp, _) = predictor_loss(&sp, &e, 0.5);
            let (lm, _) = predictor_loss(&sm, &e, 0.5);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
                "cell {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn full_predictor_gradient_matches_finite_differences() {
        // features -> sigma -> L_inc, differentiated to every weight.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut p = Predictor::init(FEATURE_DIM, &mut rng);
        for w in p.w2.iter_mut() {
            *w = (rng.gen::<f64>() - 0.5) * 0.8;
        }
        for b in p.b1.iter_mut() {
            *b = (rng.gen::<f64>() - 0.5) * 0.4;
        }
        p.b2 = 0.2;
        let g = random_grid(3, 4, 33);
        let e: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
        let (_, analytic) = p.loss_and_weight_grad(&g, &e, 0.5).unwrap();
        let flat = p.flatten();
        let h = 1e-6;
        // Probe every fourth weight plus all of w2/b2 (final stretch).
        let probes: Vec<usize> = (0..flat.len())
            .filter(|&i| i % 4 == 0 || i >= HIDDEN * FEATURE_DIM + HIDDEN)
            .collect();
        for i in probes {
            let mut fp = flat.clone();
            fp[i] += h;
            let pp = Predictor::from_flat(FEATURE_DIM, &fp).unwrap();
            let (lp, _) = pp.loss_and_weight_grad(&g, &e, 0.5).unwrap();
            let mut fm = flat.clone();
            fm[i] -= h;
            let pm = Predictor::from_flat(FEATURE_DIM, &fm).unwrap();
            let (lm, _) = pm.loss_and_weight_grad(&g, &e, 0.5).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (analytic[i] - fd).abs() / denom <= 1e-4,
                "weight {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn consistency_score_frozen_values() {
        // sigma -> 0 gives S -> 1.
        let s = consistency_score(&[1e-9; 4], 2, 2, 8, 0.2, 16, 16).unwrap();
        assert!(s.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        // sigma = 1, c = 0.2: S = e^-5.
        let s = consistency_score(&[1.0; 4], 2, 2, 8, 0.2, 16, 16).unwrap();
        let want = (-5.0f64).exp();
        assert!((want - 0.0067379).abs() < 1e-6);
        assert!(s.data.iter().all(|&v| (v - want).abs() < 1e-12));
        // Constant grids stay constant through upsampling; crop works.
        let s = consistency_score(&[0.5; 6], 2, 3, 8, 0.2, 13, 17).unwrap();
        assert_eq!((s.h, s.w), (13, 17));
        let want = (-0.25f64 / 0.2).exp();
        assert!(s.data.iter().all(|&v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn combine_mask_frozen_values() {
        let ones = Image::from_fn(4, 4, 1, |_, _, _| 1.0);
        let m = combine_mask(&ones, &Image::zeros(4, 4, 1), 1.2, 3.0).unwrap();
        assert!(m.data.iter().all(|&v| (v - 1.0).abs() < 1e-12), "S=1 restores supervision");

        let s09 = Image::from_fn(4, 4, 1, |_, _, _| 0.9);
        let m1 = combine_mask(&s09, &ones, 1.2, 3.0).unwrap();
        assert!((m1[(0, 0, 0)] - 0.9f64.powf(1.2)).abs() < 1e-12);
        assert!((m1[(0, 0, 0)] - 0.8812).abs() < 1e-4);
        let m0 = combine_mask(&s09, &Image::zeros(4, 4, 1), 1.2, 3.0).unwrap();
        assert!((m0[(0, 0, 0)] - 0.729).abs() < 1e-12);
    }

    #[test]
    fn mask_monotone_in_sigma_and_eta_ordering() {
        let bin = Image::from_fn(2, 2, 1, |_, x, _| if x == 0 { 1.0 } else { 0.0 });
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let sigma = 0.1 + step as f64 * 0.15;
            let s = consistency_score(&[sigma; 4], 2, 2, 1, 0.2, 2, 2).unwrap();
            let m = combine_mask(&s, &bin, 1.2, 3.0).unwrap();
            // Nonincreasing in sigma at fixed prior.
            assert!(m[(0, 0, 0)] <= prev + 1e-15);
            prev = m[(0, 0, 0)];
            // eta_t > eta_s and S < 1: transient region strictly smaller.
            if s[(0, 0, 0)] < 1.0 {
                assert!(m[(0, 1, 0)] < m[(0, 0, 0)]);
            }
        }
    }

    #[test]
    fn predictor_training_raises_sigma_where_e_is_large() {
        // Left half of the grid gets high residual, right half zero; after
        // a few hundred updates sigma must split accordingly.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let g = random_grid(4, 4, 41);
        let e: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
        let mut trainer = PredictorTrainer::new(Predictor::init(FEATURE_DIM, &mut rng));
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for it in 0..400 {
            let l = trainer.update(&g, &e, 0.5, 1e-2).unwrap();
            if it == 0 {
                first = l;
            }
            last = l;
        }
        assert!(last < first, "loss decreased: {first} -> {last}");
        let sigma = trainer.predictor.predict_sigma(&g).unwrap();
        let hi: f64 = (0..16).filter(|i| i % 4 < 2).map(|i| sigma[i]).sum::<f64>() / 8.0;
        let lo: f64 = (0..16).filter(|i| i % 4 >= 2).map(|i| sigma[i]).sum::<f64>() / 8.0;
        assert!(hi > lo + 0.3, "hi {hi} lo {lo}");
    }
}
