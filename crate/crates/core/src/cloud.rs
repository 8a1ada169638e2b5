//! The 2D Gaussian cloud, camera views, and the small amount of linear
//! algebra both need.
//!
//! Conventions:
//! - World coordinates live in the unit square; positions are free reals
//!   and may drift outside it during optimization.
//! - A Gaussian's covariance is parameterized as `R(phi) * S^2 * R(phi)^T`
//!   with `S = diag(exp(log_scale))`, so it is SPD by construction.
//! - Opacity is stored as a logit; `sigmoid` maps it into (0, 1).
//! - Colors are stored unconstrained and clamped to [0, 1] at render time.
//! - `depth` is a fixed per-Gaussian sort key assigned at creation; it is
//!   not optimized, only inherited (with a tiny deterministic jitter) when
//!   Gaussians are cloned or split.

use crate::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `sigmoid`. Input must be strictly inside (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Numerically stable `ln(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2 {
    pub m: [[f64; 2]; 2],
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2 { m: [[1.0, 0.0], [0.0, 1.0]] };

    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2 { m: [[a, b], [c, d]] }
    }

    pub fn rotation(phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Mat2::new(c, -s, s, c)
    }

    pub fn diag(a: f64, d: f64) -> Self {
        Mat2::new(a, 0.0, 0.0, d)
    }

    pub fn scale(&self, k: f64) -> Self {
        Mat2::new(self.m[0][0] * k, self.m[0][1] * k, self.m[1][0] * k, self.m[1][1] * k)
    }

    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let a = &self.m;
        let b = &o.m;
        Mat2::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2::new(self.m[0][0], self.m[1][0], self.m[0][1], self.m[1][1])
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Mat2> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let inv = 1.0 / d;
        Some(Mat2::new(
            self.m[1][1] * inv,
            -self.m[0][1] * inv,
            -self.m[1][0] * inv,
            self.m[0][0] * inv,
        ))
    }

    pub fn matvec(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * v[0] + self.m[0][1] * v[1],
            self.m[1][0] * v[0] + self.m[1][1] * v[1],
        ]
    }

    pub fn transpose_matvec(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * v[0] + self.m[1][0] * v[1],
            self.m[0][1] * v[0] + self.m[1][1] * v[1],
        ]
    }

    /// Eigenvalues of a symmetric matrix, (max, min).
    pub fn sym_eigenvalues(&self) -> (f64, f64) {
        let tr = self.m[0][0] + self.m[1][1];
        let det = self.det();
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        (tr / 2.0 + disc, tr / 2.0 - disc)
    }
}

/// Covariance from log-scales and a rotation angle:
/// `Sigma = R diag(exp(2 s1), exp(2 s2)) R^T`. SPD for all finite inputs.
pub fn build_covariance(log_scales: [f64; 2], rotation: f64) -> Mat2 {
    let r = Mat2::rotation(rotation);
    let d = Mat2::diag((2.0 * log_scales[0]).exp(), (2.0 * log_scales[1]).exp());
    r.mul(&d).mul(&r.transpose())
}

/// Struct-of-arrays Gaussian cloud. All per-Gaussian arrays stay aligned;
/// `validate` checks that plus finiteness and range invariants.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 2]>,
    pub log_scales: Vec<[f64; 2]>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub depths: Vec<f64>,
    // Densification bookkeeping, reset after every densify event.
    pub r_max: Vec<f64>,
    pub densify_grad_accum: Vec<f64>,
    /// Vector sum of the modulated view-space gradients; its direction
    /// decides where a clone is offset.
    pub densify_dir_accum: Vec<[f64; 2]>,
    pub densify_count: Vec<u32>,
    // EMA of per-Gaussian cross-view conflict, in [0, 1].
    pub conflict_ema: Vec<f64>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn opacity(&self, n: usize) -> f64 {
        sigmoid(self.opacity_logits[n])
    }

    pub fn covariance(&self, n: usize) -> Mat2 {
        build_covariance(self.log_scales[n], self.rotations[n])
    }

    pub fn push(
        &mut self,
        position: [f64; 2],
        log_scale: [f64; 2],
        rotation: f64,
        opacity_logit: f64,
        color: [f64; 3],
        depth: f64,
    ) {
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.colors.push(color);
        self.depths.push(depth);
        self.r_max.push(0.0);
        self.densify_grad_accum.push(0.0);
        self.densify_dir_accum.push([0.0; 2]);
        self.densify_count.push(0);
        self.conflict_ema.push(0.0);
    }

    /// Removes every Gaussian whose index is flagged. Keeps relative order.
    pub fn retain_by_flags(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.len());
        macro_rules! retain_vec {
            ($field:expr) => {{
                let mut i = 0;
                $field.retain(|_| {
                    let k = keep[i];
                    i += 1;
                    k
                });
            }};
        }
        retain_vec!(self.positions);
        retain_vec!(self.log_scales);
        retain_vec!(self.rotations);
        retain_vec!(self.opacity_logits);
        retain_vec!(self.colors);
        retain_vec!(self.depths);
        retain_vec!(self.r_max);
        retain_vec!(self.densify_grad_accum);
        retain_vec!(self.densify_dir_accum);
        retain_vec!(self.densify_count);
        retain_vec!(self.conflict_ema);
    }

    pub fn reset_densify_stats(&mut self) {
        self.r_max.iter_mut().for_each(|v| *v = 0.0);
        self.densify_grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.densify_dir_accum.iter_mut().for_each(|v| *v = [0.0; 2]);
        self.densify_count.iter_mut().for_each(|v| *v = 0);
    }

    /// Returns all invariant violations (empty = valid). Each entry names
    /// the field and, where applicable, the offending index.
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let n = self.len();
        let lens = [
            ("log_scales", self.log_scales.len()),
            ("rotations", self.rotations.len()),
            ("opacity_logits", self.opacity_logits.len()),
            ("colors", self.colors.len()),
            ("depths", self.depths.len()),
            ("r_max", self.r_max.len()),
            ("densify_grad_accum", self.densify_grad_accum.len()),
            ("densify_dir_accum", self.densify_dir_accum.len()),
            ("densify_count", self.densify_count.len()),
            ("conflict_ema", self.conflict_ema.len()),
        ];
        for (name, l) in lens {
            if l != n {
                bad.push(format!("{name} has length {l}, positions has {n}"));
            }
        }
        if !bad.is_empty() {
            // Misaligned arrays make per-index checks meaningless.
            return bad;
        }
        for i in 0..n {
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                bad.push(format!("positions[{i}] not finite"));
            }
            if !self.log_scales[i].iter().all(|v| v.is_finite()) {
                bad.push(format!("log_scales[{i}] not finite"));
            }
            if !self.rotations[i].is_finite() {
                bad.push(format!("rotations[{i}] not finite"));
            }
            if !self.opacity_logits[i].is_finite() {
                bad.push(format!("opacity_logits[{i}] not finite"));
            }
            if !self.colors[i].iter().all(|v| v.is_finite()) {
                bad.push(format!("colors[{i}] not finite"));
            }
            if !self.depths[i].is_finite() {
                bad.push(format!("depths[{i}] not finite"));
            }
            if !self.r_max[i].is_finite() || self.r_max[i] < 0.0 {
                bad.push(format!("r_max[{i}] not finite or negative"));
            }
            if !self.densify_grad_accum[i].is_finite() || self.densify_grad_accum[i] < 0.0 {
                bad.push(format!("densify_grad_accum[{i}] not finite or negative"));
            }
            if !self.conflict_ema[i].is_finite() || !(0.0..=1.0).contains(&self.conflict_ema[i]) {
                bad.push(format!("conflict_ema[{i}] outside [0,1]"));
            }
        }
        bad
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let bad = self.validate();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidCloud(bad.join("; ")))
        }
    }
}

/// One camera view: an affine world-to-view map plus its supervision.
/// View coordinates live in the unit square and are scaled by the image
/// size to obtain pixel coordinates.
#[derive(Debug, Clone)]
pub struct View {
    pub id: String,
    /// World point `x` maps to view point `affine * x + translation`.
    pub affine: Mat2,
    pub translation: [f64; 2],
    /// Ground-truth RGB in [0, 1], shape H x W x 3.
    pub gt_image: crate::img::Image,
    /// Binary prior mask, 1 = stable region usable for supervision.
    pub prior_mask: crate::img::Image,
}

impl View {
    pub fn height(&self) -> usize {
        self.gt_image.h
    }

    pub fn width(&self) -> usize {
        self.gt_image.w
    }

    /// World position to continuous pixel coordinates (x right, y down).
    pub fn project(&self, world: [f64; 2]) -> [f64; 2] {
        let v = self.affine.matvec(world);
        [
            (v[0] + self.translation[0]) * self.width() as f64,
            (v[1] + self.translation[1]) * self.height() as f64,
        ]
    }

    /// The 2x2 Jacobian of `project`, i.e. the affine scaled to pixels.
    pub fn pixel_affine(&self) -> Mat2 {
        let w = self.width() as f64;
        let h = self.height() as f64;
        Mat2::new(
            self.affine.m[0][0] * w,
            self.affine.m[0][1] * w,
            self.affine.m[1][0] * h,
            self.affine.m[1][1] * h,
        )
    }

    pub fn check(&self) -> Result<()> {
        if !self.gt_image.all_finite() {
            return Err(Error::Invalid(format!("view {}: gt image not finite", self.id)));
        }
        if self.gt_image.c != 3 {
            return Err(Error::Shape(format!("view {}: gt image must be RGB", self.id)));
        }
        if self.gt_image.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Invalid(format!("view {}: gt image outside [0,1]", self.id)));
        }
        if self.prior_mask.c != 1
            || self.prior_mask.h != self.gt_image.h
            || self.prior_mask.w != self.gt_image.w
        {
            return Err(Error::Shape(format!("view {}: prior mask shape mismatch", self.id)));
        }
        if self.prior_mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!("view {}: prior mask not binary", self.id)));
        }
        Ok(())
    }
}
