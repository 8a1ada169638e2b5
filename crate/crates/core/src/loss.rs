//! Masked reconstruction loss: `(1 - lambda) * L1 + lambda * DSSIM`, with
//! analytic gradients with respect to the rendered image.
//!
//! The mask multiplies both images *before* any windowing, so a zero-mask
//! pixel contributes nothing to either term and receives exactly zero
//! gradient. SSIM uses the standard 11x11 Gaussian window (sigma 1.5,
//! C1 = 0.01^2, C2 = 0.03^2), evaluated on fully valid window positions
//! only (no padding), averaged over positions and channels.
//!
//! DSSIM is `1 - SSIM` by default; `dssim_halved` switches to the
//! `(1 - SSIM) / 2` convention found in some codebases.

use crate::img::Image;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// `mask` (H x W x 1) applied to every channel.
pub fn apply_mask(img: &Image, mask: &Image) -> Result<Image> {
    if mask.h != img.h || mask.w != img.w || mask.c != 1 {
        return Err(Error::Shape(format!(
            "mask {}x{}x{} does not fit image {}x{}x{}",
            mask.h, mask.w, mask.c, img.h, img.w, img.c
        )));
    }
    let mut out = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            let m = mask[(y, x, 0)];
            for ch in 0..img.c {
                out[(y, x, ch)] *= m;
            }
        }
    }
    Ok(out)
}

/// Mean absolute error and its gradient with respect to `a`. The
/// subgradient at exact zeros is zero.
pub fn l1(a: &Image, b: &Image) -> Result<(f64, Image)> {
    if !a.same_shape(b) {
        return Err(Error::Shape("l1: image shapes differ".into()));
    }
    let n = a.data.len().max(1) as f64;
    let mut grad = Image::zeros(a.h, a.w, a.c);
    let mut sum = 0.0;
    for (i, (&x, &y)) in a.data.iter().zip(&b.data).enumerate() {
        let d = x - y;
        sum += d.abs();
        grad.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Valid-only separable convolution with the SSIM window.
/// Input is a single-channel plane of shape h x w.
fn conv_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * plane[y * w + x + k];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of `conv_valid`: scatters a valid-grid field back to the full
/// image grid through the same window.
fn conv_adjoint(field: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = field[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (k, &wk) in win.iter().enumerate() {
                tmp[(y + k) * ow + x] += wk * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (k, &wk) in win.iter().enumerate() {
                out[y * w + x + k] += wk * v;
            }
        }
    }
    out
}

/// SSIM of `a` against `b`, plus the gradient of the mean SSIM with
/// respect to `a`. Images must be at least the window size.
pub fn ssim(a: &Image, b: &Image) -> Result<(f64, Image)> {
    if !a.same_shape(b) {
        return Err(Error::Shape("ssim: image shapes differ".into()));
    }
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim: image {}x{} smaller than the {}x{} window",
            a.h, a.w, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    let win = window();
    let (h, w, c) = (a.h, a.w, a.c);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let n_valid = (oh * ow * c) as f64;

    let mut total = 0.0;
    let mut grad = Image::zeros(h, w, c);
    let mut pa = vec![0.0; h * w];
    let mut pb = vec![0.0; h * w];
    let mut paa = vec![0.0; h * w];
    let mut pbb = vec![0.0; h * w];
    let mut pab = vec![0.0; h * w];

    for ch in 0..c {
        for i in 0..h * w {
            let av = a.data[i * c + ch];
            let bv = b.data[i * c + ch];
            pa[i] = av;
            pb[i] = bv;
            paa[i] = av * av;
            pbb[i] = bv * bv;
            pab[i] = av * bv;
        }
        let mu_a = conv_valid(&pa, h, w, &win);
        let mu_b = conv_valid(&pb, h, w, &win);
        let e_aa = conv_valid(&paa, h, w, &win);
        let e_bb = conv_valid(&pbb, h, w, &win);
        let e_ab = conv_valid(&pab, h, w, &win);

        // Partial derivatives of the per-window SSIM with respect to the
        // window statistics that depend on `a`.
        let mut d_mu = vec![0.0; oh * ow];
        let mut d_eaa = vec![0.0; oh * ow];
        let mut d_eab = vec![0.0; oh * ow];
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + C1;
            let a2 = 2.0 * cov + C2;
            let b1 = ma * ma + mb * mb + C1;
            let b2 = va + vb + C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            d_mu[i] = 2.0 * mb * (a2 - a1) / (b1 * b2) - 2.0 * ma * s * (1.0 / b1 - 1.0 / b2);
            d_eaa[i] = -s / b2;
            d_eab[i] = 2.0 * a1 / (b1 * b2);
        }
        let back_mu = conv_adjoint(&d_mu, h, w, &win);
        let back_eaa = conv_adjoint(&d_eaa, h, w, &win);
        let back_eab = conv_adjoint(&d_eab, h, w, &win);
        for i in 0..h * w {
            grad.data[i * c + ch] =
                (back_mu[i] + 2.0 * pa[i] * back_eaa[i] + pb[i] * back_eab[i]) / n_valid;
        }
    }
    Ok((total / n_valid, grad))
}

/// The full masked reconstruction loss and its gradient with respect to the
/// *rendered* image (mask and ground truth are constants).
pub fn reconstruction_loss(
    render: &Image,
    gt: &Image,
    mask: &Image,
    lambda_rec: f64,
    dssim_halved: bool,
) -> Result<(f64, Image)> {
    if !render.same_shape(gt) {
        return Err(Error::Shape("reconstruction_loss: render/gt shapes differ".into()));
    }
    let rm = apply_mask(render, mask)?;
    let gm = apply_mask(gt, mask)?;
    let (l1_val, l1_grad) = l1(&rm, &gm)?;
    let (ssim_val, ssim_grad) = ssim(&rm, &gm)?;
    let half = if dssim_halved { 0.5 } else { 1.0 };
    let dssim = (1.0 - ssim_val) * half;
    let loss = (1.0 - lambda_rec) * l1_val + lambda_rec * dssim;

    let mut grad = Image::zeros(render.h, render.w, render.c);
    for y in 0..render.h {
        for x in 0..render.w {
            let m = mask[(y, x, 0)];
            for ch in 0..render.c {
                let g_rm = (1.0 - lambda_rec) * l1_grad[(y, x, ch)]
                    - lambda_rec * half * ssim_grad[(y, x, ch)];
                grad[(y, x, ch)] = m * g_rm;
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn l1_basics_and_zero_subgradient() {
        let a = Image::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64);
        let b = Image::from_fn(2, 2, 1, |_, _, _| 1.0);
        let (v, g) = l1(&a, &b).unwrap();
        // |0-1| + |1-1| + |2-1| + |3-1| = 4, mean 1.0
        assert_eq!(v, 1.0);
        assert_eq!(g.data[0], -0.25);
        assert_eq!(g.data[1], 0.0, "exact ties take the zero subgradient");
        assert_eq!(g.data[3], 0.25);
    }

    #[test]
    fn ssim_identical_is_one_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_img(&mut rng, 16, 16, 3);
        let (v, g) = ssim(&a, &a.clone()).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
        assert!(g.data.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn ssim_detects_distortion_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_img(&mut rng, 20, 14, 3);
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v *= 0.5;
        }
        let (v_ab, _) = ssim(&a, &b).unwrap();
        let (v_ba, _) = ssim(&b, &a).unwrap();
        assert!(v_ab < 1.0);
        assert!((v_ab - v_ba).abs() < 1e-12, "value is symmetric");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::zeros(10, 32, 3);
        assert!(matches!(ssim(&a, &a.clone()), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_img(&mut rng, 18, 15, 3);
        let b = rand_img(&mut rng, 18, 15, 3);
        let (_, g) = ssim(&a, &b).unwrap();
        let h = 1e-5;
        // Probe a spread of entries rather than all 810.
        for i in (0..a.data.len()).step_by(7) {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data[i] += h;
            am.data[i] -= h;
            let (vp, _) = ssim(&ap, &b).unwrap();
            let (vm, _) = ssim(&am, &b).unwrap();
            let fd = (vp - vm) / (2.0 * h);
            let scale = fd.abs().max(g.data[i].abs()).max(1e-3);
            assert!(
                (fd - g.data[i]).abs() / scale <= 1e-4,
                "entry {i}: analytic {} vs fd {fd}",
                g.data[i]
            );
        }
    }

    #[test]
    fn reconstruction_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = rand_img(&mut rng, 16, 16, 3);
        let gt = rand_img(&mut rng, 16, 16, 3);
        let mask = Image::from_fn(16, 16, 1, |y, x, _| ((y + x) % 2) as f64);
        let rm = apply_mask(&r, &mask).unwrap();
        let gm = apply_mask(&gt, &mask).unwrap();
        let (l1v, _) = l1(&rm, &gm).unwrap();
        let (sv, _) = ssim(&rm, &gm).unwrap();
        let (loss, _) = reconstruction_loss(&r, &gt, &mask, 0.25, false).unwrap();
        assert!((loss - (0.75 * l1v + 0.25 * (1.0 - sv))).abs() < 1e-12);

        let (loss_h, _) = reconstruction_loss(&r, &gt, &mask, 0.25, true).unwrap();
        assert!((loss_h - (0.75 * l1v + 0.25 * 0.5 * (1.0 - sv))).abs() < 1e-12);
    }

    #[test]
    fn identical_images_give_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = rand_img(&mut rng, 16, 16, 3);
        let mask = Image::from_fn(16, 16, 1, |y, _, _| (y % 2) as f64);
        let (loss, grad) = reconstruction_loss(&r, &r.clone(), &mask, 0.25, false).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_mask_pixels_get_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = rand_img(&mut rng, 16, 16, 3);
        let gt = rand_img(&mut rng, 16, 16, 3);
        let mask = Image::from_fn(16, 16, 1, |y, x, _| if y < 8 && x < 8 { 0.0 } else { 1.0 });
        let (_, grad) = reconstruction_loss(&r, &gt, &mask, 0.25, false).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for ch in 0..3 {
                    assert_eq!(grad[(y, x, ch)], 0.0);
                }
            }
        }
        assert!(grad.data.iter().any(|&v| v != 0.0), "unmasked region still learns");
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = rand_img(&mut rng, 15, 17, 3);
        let gt = rand_img(&mut rng, 15, 17, 3);
        // Soft mask: binary prior times a score would look like this.
        let mask = Image::from_fn(15, 17, 1, |y, x, _| {
            if (y + x) % 3 == 0 {
                0.0
            } else {
                0.3 + 0.1 * ((y * x) % 7) as f64
            }
        });
        let (_, g) = reconstruction_loss(&r, &gt, &mask, 0.25, false).unwrap();
        let h = 1e-5;
        for i in (0..r.data.len()).step_by(11) {
            let mut rp = r.clone();
            let mut rm = r.clone();
            rp.data[i] += h;
            rm.data[i] -= h;
            let (vp, _) = reconstruction_loss(&rp, &gt, &mask, 0.25, false).unwrap();
            let (vm, _) = reconstruction_loss(&rm, &gt, &mask, 0.25, false).unwrap();
            let fd = (vp - vm) / (2.0 * h);
            let scale = fd.abs().max(g.data[i].abs()).max(1e-3);
            assert!(
                (fd - g.data[i]).abs() / scale <= 1e-4,
                "entry {i}: analytic {} vs fd {fd}",
                g.data[i]
            );
        }
    }
}
