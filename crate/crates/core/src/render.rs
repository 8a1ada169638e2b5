//! Differentiable 2D Gaussian rasterizer.
//!
//! Forward: every Gaussian is projected through the view's affine map,
//! its covariance is pushed to pixel space (`Sigma' = B Sigma B^T` with `B`
//! the pixel-scaled affine), and pixels inside `cutoff_sigmas` standard
//! deviations are alpha-composited front to back over a black background:
//!
//! `C = sum_n c_n w_n prod_{m<n} (1 - w_m)`,  `w_n = alpha_n exp(-0.5 d^T Sigma'^-1 d)`
//!
//! Depth order is a fixed per-Gaussian key (smaller = closer), stable-sorted
//! with ties broken by index. Weights are clamped to `W_CLAMP` so
//! transmittance never reaches zero.
//!
//! Backward: analytic gradients for every Gaussian attribute plus the
//! view-space positional gradient (in pixels) that densification consumes.
//! World-position gradients relate to it exactly by the affine chain rule:
//! `dL/dx = B^T dL/dp_pix`.
//!
//! Everything is sequential and pure, so renders and gradients are
//! bit-reproducible for identical inputs.

use crate::cloud::{GaussianCloud, Mat2, View};
use crate::img::Image;

/// Per-sample weights never exceed this, keeping transmittance positive.
pub const W_CLAMP: f64 = 0.999;
/// Covariances with a pixel-space condition number beyond this are skipped.
pub const MAX_CONDITION: f64 = 1e12;
/// Gaussians with opacity below this cannot influence 8-bit output; they
/// are culled and reported as invisible.
const ALPHA_CULL: f64 = 1e-4;
/// Compositing stops once transmittance drops below this; the residual
/// contribution is below any tolerance used in this crate.
const T_STOP: f64 = 1e-9;

const TILE: usize = 16;

/// One projected Gaussian, in pixel coordinates.
#[derive(Debug, Clone)]
struct Splat {
    /// Index into the cloud.
    id: u32,
    /// Projected center in pixels.
    p: [f64; 2],
    /// Inverse of the pixel-space covariance.
    conic: Mat2,
    /// Cull radius in pixels (`cutoff_sigmas * sqrt(lambda_max)`).
    radius: f64,
    alpha: f64,
    /// Clamped to [0,1]; `color_live[k]` tells whether the stored color is
    /// strictly inside the clamp so gradient flows.
    color: [f64; 3],
    color_live: [bool; 3],
}

/// Forward products the trainer keeps: the image plus per-Gaussian
/// visibility and projected radii, and a skipped-degenerate diagnostic.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    pub visible: Vec<bool>,
    /// Projected cull radius in pixels (0 where invisible/degenerate).
    pub radii: Vec<f64>,
    pub skipped_degenerate: u32,
}

/// Gradients with respect to the stored parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub position: Vec<[f64; 2]>,
    pub log_scale: Vec<[f64; 2]>,
    pub rotation: Vec<f64>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        ParamGrads {
            position: vec![[0.0; 2]; n],
            log_scale: vec![[0.0; 2]; n],
            rotation: vec![0.0; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rotation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotation.is_empty()
    }

    /// Flat per-attribute view, the layout the harmonizer works on.
    pub fn attribute(&self, a: Attribute) -> &[f64] {
        match a {
            Attribute::Position => self.position.as_flattened(),
            Attribute::Scale => self.log_scale.as_flattened(),
            Attribute::Rotation => &self.rotation,
            Attribute::Opacity => &self.opacity,
            Attribute::Color => self.color.as_flattened(),
        }
    }

    pub fn attribute_mut(&mut self, a: Attribute) -> &mut [f64] {
        match a {
            Attribute::Position => self.position.as_flattened_mut(),
            Attribute::Scale => self.log_scale.as_flattened_mut(),
            Attribute::Rotation => &mut self.rotation,
            Attribute::Opacity => &mut self.opacity,
            Attribute::Color => self.color.as_flattened_mut(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Position,
    Scale,
    Rotation,
    Opacity,
    Color,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Position,
        Attribute::Scale,
        Attribute::Rotation,
        Attribute::Opacity,
        Attribute::Color,
    ];

    /// Geometric attributes get the conflict attenuation factor.
    pub fn is_geometric(self) -> bool {
        matches!(self, Attribute::Position | Attribute::Scale | Attribute::Rotation)
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Position => "position",
            Attribute::Scale => "scale",
            Attribute::Rotation => "rotation",
            Attribute::Opacity => "opacity",
            Attribute::Color => "color",
        }
    }
}

/// Full gradient set for one rendered view: parameter gradients plus the
/// raw view-space positional gradient (pixels) used by densification.
/// `view_space_pos[n]` and `params.position[n]` describe the same Gaussian;
/// they differ exactly by the transposed pixel affine.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: ParamGrads,
    pub view_space_pos: Vec<[f64; 2]>,
}

impl GradientBundle {
    pub fn zeros(n: usize) -> Self {
        GradientBundle { params: ParamGrads::zeros(n), view_space_pos: vec![[0.0; 2]; n] }
    }
}

/// Projection + ordering state retained between forward and backward.
pub struct Prepared {
    h: usize,
    w: usize,
    pixel_affine: Mat2,
    n_cloud: usize,
    /// Depth-sorted (front first, ties by cloud index).
    splats: Vec<Splat>,
    /// For chaining covariance gradients back to world space.
    per_splat_chain: Vec<SplatChain>,
    tiles_x: usize,
    /// Per tile: indices into `splats`, in compositing order.
    tile_lists: Vec<Vec<u32>>,
    pub skipped_degenerate: u32,
    pub visible: Vec<bool>,
    pub radii: Vec<f64>,
}

/// Cached per-splat quantities for the backward chain rule.
#[derive(Debug, Clone)]
struct SplatChain {
    /// R(phi) of the world covariance factorization.
    rot: Mat2,
    /// dR/dphi.
    drot: Mat2,
    /// exp(2 * log_scale).
    eig: [f64; 2],
}

/// Projects the cloud into a view and fixes the compositing order.
pub fn prepare(cloud: &GaussianCloud, view: &View, cutoff_sigmas: f64) -> Prepared {
    let n = cloud.len();
    let h = view.height();
    let w = view.width();
    let b = view.pixel_affine();
    let mut splats = Vec::with_capacity(n);
    let mut chains = Vec::with_capacity(n);
    let mut visible = vec![false; n];
    let mut radii = vec![0.0; n];
    let mut skipped = 0u32;

    for i in 0..n {
        let p = view.project(cloud.positions[i]);
        let sigma = cloud.covariance(i);
        let sigma_pix = b.mul(&sigma).mul(&b.transpose());
        let (emax, emin) = sigma_pix.sym_eigenvalues();
        let finite = emax.is_finite() && emin.is_finite() && p.iter().all(|v| v.is_finite());
        if !finite || emin <= 0.0 || emax / emin > MAX_CONDITION {
            skipped += 1;
            continue;
        }
        let conic = match sigma_pix.inverse() {
            Some(c) => c,
            None => {
                skipped += 1;
                continue;
            }
        };
        let radius = cutoff_sigmas * emax.sqrt();
        let alpha = crate::cloud::sigmoid(cloud.opacity_logits[i]);
        if alpha < ALPHA_CULL {
            continue;
        }
        // Circle-vs-image-rectangle overlap.
        let inside = p[0] + radius > 0.0
            && p[0] - radius < w as f64
            && p[1] + radius > 0.0
            && p[1] - radius < h as f64;
        if !inside {
            continue;
        }
        visible[i] = true;
        radii[i] = radius;
        let raw = cloud.colors[i];
        let mut color = [0.0; 3];
        let mut live = [false; 3];
        for k in 0..3 {
            color[k] = raw[k].clamp(0.0, 1.0);
            live[k] = (0.0..=1.0).contains(&raw[k]);
        }
        splats.push(Splat { id: i as u32, p, conic, radius, alpha, color, color_live: live });
        let (s, c) = cloud.rotations[i].sin_cos();
        chains.push(SplatChain {
            rot: Mat2::new(c, -s, s, c),
            drot: Mat2::new(-s, -c, c, -s),
            eig: [(2.0 * cloud.log_scales[i][0]).exp(), (2.0 * cloud.log_scales[i][1]).exp()],
        });
    }

    // Front-to-back: ascending depth, stable so ties keep index order.
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        cloud.depths[splats[a].id as usize]
            .partial_cmp(&cloud.depths[splats[b].id as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let splats: Vec<Splat> = order.iter().map(|&i| splats[i].clone()).collect();
    let chains: Vec<SplatChain> = order.iter().map(|&i| chains[i].clone()).collect();

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let x0 = ((s.p[0] - s.radius).floor().max(0.0) as usize).min(w.saturating_sub(1)) / TILE;
        let x1 = ((s.p[0] + s.radius).ceil().min(w as f64 - 1.0).max(0.0) as usize) / TILE;
        let y0 = ((s.p[1] - s.radius).floor().max(0.0) as usize).min(h.saturating_sub(1)) / TILE;
        let y1 = ((s.p[1] + s.radius).ceil().min(h as f64 - 1.0).max(0.0) as usize) / TILE;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tile_lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    Prepared {
        h,
        w,
        pixel_affine: b,
        n_cloud: n,
        splats,
        per_splat_chain: chains,
        tiles_x,
        tile_lists,
        skipped_degenerate: skipped,
        visible,
        radii,
    }
}

impl Prepared {
    /// Weight of splat `s` at pixel center `(qx, qy)`, if within its radius.
    /// The flag reports whether the clamp was hit (no gradient then).
    #[inline]
    fn weight_at(&self, s: &Splat, qx: f64, qy: f64) -> Option<(f64, [f64; 2], bool)> {
        let d = [qx - s.p[0], qy - s.p[1]];
        if d[0] * d[0] + d[1] * d[1] > s.radius * s.radius {
            return None;
        }
        let qd = s.conic.matvec(d);
        let e = -0.5 * (d[0] * qd[0] + d[1] * qd[1]);
        let raw = s.alpha * e.exp();
        if raw > W_CLAMP {
            Some((W_CLAMP, d, true))
        } else {
            Some((raw, d, false))
        }
    }

    pub fn render(&self) -> Image {
        let mut img = Image::zeros(self.h, self.w, 3);
        for py in 0..self.h {
            let qy = py as f64 + 0.5;
            let trow = py / TILE * self.tiles_x;
            for px in 0..self.w {
                let qx = px as f64 + 0.5;
                let list = &self.tile_lists[trow + px / TILE];
                let mut t = 1.0f64;
                let mut c = [0.0f64; 3];
                for &si in list {
                    let s = &self.splats[si as usize];
                    let Some((w, _, _)) = self.weight_at(s, qx, qy) else { continue };
                    for k in 0..3 {
                        c[k] += s.color[k] * w * t;
                    }
                    t *= 1.0 - w;
                    if t < T_STOP {
                        break;
                    }
                }
                let base = (py * self.w + px) * 3;
                img.data[base] = c[0];
                img.data[base + 1] = c[1];
                img.data[base + 2] = c[2];
            }
        }
        img
    }

    pub fn output(&self) -> RenderOutput {
        RenderOutput {
            image: self.render(),
            visible: self.visible.clone(),
            radii: self.radii.clone(),
            skipped_degenerate: self.skipped_degenerate,
        }
    }

    /// Backpropagates `dl_dimage` (same shape as the render) to every
    /// Gaussian attribute. Pixels are walked in row-major order and
    /// accumulation is sequential, so results are bit-reproducible.
    pub fn backward(&self, dl_dimage: &Image) -> GradientBundle {
        assert_eq!((dl_dimage.h, dl_dimage.w, dl_dimage.c), (self.h, self.w, 3));
        let n = self.n_cloud;
        let mut out = GradientBundle::zeros(n);
        // Accumulated dL/dSigma'_pix per splat (full-matrix convention).
        let mut dl_dcov = vec![[0.0f64; 3]; self.splats.len()]; // xx, xy(sym half), yy
        // Per-pixel contribution stack, reused across pixels.
        let mut stack: Vec<(u32, f64, f64, [f64; 2], bool)> = Vec::with_capacity(64);

        for py in 0..self.h {
            let qy = py as f64 + 0.5;
            let trow = py / TILE * self.tiles_x;
            for px in 0..self.w {
                let qx = px as f64 + 0.5;
                let list = &self.tile_lists[trow + px / TILE];
                if list.is_empty() {
                    continue;
                }
                let base = (py * self.w + px) * 3;
                let dl = [dl_dimage.data[base], dl_dimage.data[base + 1], dl_dimage.data[base + 2]];
                if dl == [0.0; 3] {
                    continue;
                }
                stack.clear();
                let mut t = 1.0f64;
                for &si in list {
                    let s = &self.splats[si as usize];
                    let Some((w, d, clamped)) = self.weight_at(s, qx, qy) else { continue };
                    stack.push((si, w, t, d, clamped));
                    t *= 1.0 - w;
                    if t < T_STOP {
                        break;
                    }
                }
                // Reverse sweep: suffix = sum over later splats of c w T,
                // per channel, exactly the quantity behind each splat.
                let mut suffix = [0.0f64; 3];
                for &(si, w, t_before, d, clamped) in stack.iter().rev() {
                    let s = &self.splats[si as usize];
                    let id = s.id as usize;
                    let mut dl_dw = 0.0;
                    for k in 0..3 {
                        let contrib = w * t_before;
                        if s.color_live[k] {
                            out.params.color[id][k] += dl[k] * contrib;
                        }
                        dl_dw += dl[k] * (s.color[k] * t_before - suffix[k] / (1.0 - w));
                        suffix[k] += s.color[k] * contrib;
                    }
                    if clamped {
                        // w sits on the clamp; no gradient through it.
                        continue;
                    }
                    // w = alpha * exp(e), e = -d^T conic d / 2
                    let g = w / s.alpha;
                    out.params.opacity[id] += dl_dw * g * s.alpha * (1.0 - s.alpha);
                    let dl_de = dl_dw * w;
                    let qd = s.conic.matvec(d);
                    // d = q - p  =>  dL/dp_pix = dl_de * conic d
                    out.view_space_pos[id][0] += dl_de * qd[0];
                    out.view_space_pos[id][1] += dl_de * qd[1];
                    // e as a function of conic: de/dConic_ij = -d_i d_j / 2.
                    // Chain through Conic = Sigma'^-1:
                    // dL/dSigma' = (conic d)(conic d)^T * dl_de / 2
                    let half = 0.5 * dl_de;
                    dl_dcov[si as usize][0] += half * qd[0] * qd[0];
                    dl_dcov[si as usize][1] += half * qd[0] * qd[1];
                    dl_dcov[si as usize][2] += half * qd[1] * qd[1];
                }
            }
        }

        // Chain covariance gradients to log-scales and rotation, and finish
        // world-space position gradients.
        let bt = self.pixel_affine.transpose();
        for (si, s) in self.splats.iter().enumerate() {
            let id = s.id as usize;
            let vsp = out.view_space_pos[id];
            let wg = bt.matvec(vsp);
            out.params.position[id][0] += wg[0];
            out.params.position[id][1] += wg[1];

            let m = dl_dcov[si];
            if m == [0.0; 3] {
                continue;
            }
            let dl_dsig_pix = Mat2::new(m[0], m[1], m[1], m[2]);
            // Sigma' = B Sigma B^T  =>  dL/dSigma = B^T dL/dSigma' B
            let dl_dsig = bt.mul(&dl_dsig_pix).mul(&self.pixel_affine);
            let ch = &self.per_splat_chain[si];
            // Sigma = R diag(e1, e2) R^T
            let rt_g_r = ch.rot.transpose().mul(&dl_dsig).mul(&ch.rot);
            out.params.log_scale[id][0] += 2.0 * ch.eig[0] * rt_g_r.m[0][0];
            out.params.log_scale[id][1] += 2.0 * ch.eig[1] * rt_g_r.m[1][1];
            let d = Mat2::diag(ch.eig[0], ch.eig[1]);
            let a = ch.drot.mul(&d).mul(&ch.rot.transpose());
            let b2 = ch.rot.mul(&d).mul(&ch.drot.transpose());
            let mut dphi = 0.0;
            for r in 0..2 {
                for c in 0..2 {
                    dphi += dl_dsig.m[r][c] * (a.m[r][c] + b2.m[r][c]);
                }
            }
            out.params.rotation[id] += dphi;
        }
        out
    }
}

/// Convenience wrapper when only the image is needed.
pub fn render(cloud: &GaussianCloud, view: &View, cutoff_sigmas: f64) -> RenderOutput {
    prepare(cloud, view, cutoff_sigmas).output()
}
