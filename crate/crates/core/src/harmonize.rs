//! Dual-view gradient harmonization.
//!
//! Two views of the same scene produce two gradient fields for every
//! attribute. When those fields point against each other (negative inner
//! product), summing them destroys information: the step direction is
//! dominated by whichever view happens to be louder. Harmonization instead
//! rotates the pair, inside the plane they span, until they are exactly
//! orthogonal, preserving both norms:
//!
//! - `u1 = g1 / |g1|`, `u2` = normalized component of `g2` orthogonal to `u1`
//! - `beta = rho * (theta - pi/2)` where `theta` is the angle between them
//! - `g1~ = |g1| (cos(beta) u1 + sin(beta) u2)`
//! - `g2~ = |g2| (-sin(beta) u1 + cos(beta) u2)`
//!
//! `rho` in [0, 1] splits the correction: `g1~` rotates by `beta`, `g2~` by
//! `(1 - rho)(theta - pi/2)`, and the final angle is exactly `pi/2`.
//!
//! The rotated sum can always be written as `tau1 g1 + tau2 g2` with scalar
//! coefficients (closed form below), which is what the optimizer applies and
//! what densification reuses. Geometric attributes (position, scale,
//! rotation) are additionally attenuated by `exp(-k * max(0, -cos(theta)))`
//! so strongly conflicted geometry moves cautiously.
//!
//! Non-conflicting attributes pass through untouched: the combined gradient
//! is the plain bitwise sum and `tau1 = tau2 = 1`.

use crate::render::{Attribute, GradientBundle, ParamGrads};
use serde::{Deserialize, Serialize};

/// Norms below this are treated as zero gradients: no conflict, no rotation.
pub const NORM_EPS: f64 = 1e-12;
/// Below this sine the pair is numerically antiparallel and `u2` comes from
/// a deterministic probe instead of Gram-Schmidt on `g2`.
pub const SIN_EPS: f64 = 1e-6;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conflict test: strictly negative inner product. Near-zero gradients
/// never conflict.
pub fn detect_conflict(g1: &[f64], g2: &[f64]) -> bool {
    if norm(g1) < NORM_EPS || norm(g2) < NORM_EPS {
        return false;
    }
    dot(g1, g2) < 0.0
}

/// Closed-form recombination coefficients such that
/// `g1~ + g2~ = tau1 g1 + tau2 g2` for a conflicting pair.
pub fn tau_coefficients(theta: f64, beta: f64, norm1: f64, norm2: f64) -> (f64, f64) {
    let sin_t = theta.sin();
    let tau1 = (theta - beta).sin() / sin_t - norm2 * (theta - beta).cos() / (norm1 * sin_t);
    let tau2 = norm1 * beta.sin() / (norm2 * sin_t) + beta.cos() / sin_t;
    (tau1, tau2)
}

/// `exp(-k * max(0, -cos))`: 1 without conflict, shrinking toward
/// `exp(-k)` as the pair approaches antiparallel.
pub fn geometric_attenuation(cos_theta: f64, k: f64) -> f64 {
    (-k * (-cos_theta).max(0.0)).exp()
}

/// Everything the harmonization of one attribute pair produced.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub conflict: bool,
    pub cos_theta: f64,
    pub theta: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Rotated gradients (identical to the inputs when not conflicting).
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

/// Rotates a conflicting pair to orthogonality; passes a non-conflicting
/// pair through bitwise untouched.
pub fn harmonize_pair(g1: &[f64], g2: &[f64], rho: f64) -> PairOutcome {
    assert_eq!(g1.len(), g2.len());
    let n1 = norm(g1);
    let n2 = norm(g2);
    if n1 < NORM_EPS || n2 < NORM_EPS {
        return PairOutcome {
            conflict: false,
            cos_theta: 0.0,
            theta: std::f64::consts::FRAC_PI_2,
            beta: 0.0,
            tau1: 1.0,
            tau2: 1.0,
            g1: g1.to_vec(),
            g2: g2.to_vec(),
        };
    }
    let cos_theta = (dot(g1, g2) / (n1 * n2)).clamp(-1.0, 1.0);
    if cos_theta >= 0.0 {
        return PairOutcome {
            conflict: false,
            cos_theta,
            theta: cos_theta.acos(),
            beta: 0.0,
            tau1: 1.0,
            tau2: 1.0,
            g1: g1.to_vec(),
            g2: g2.to_vec(),
        };
    }
    let theta = cos_theta.acos();
    let beta = rho * (theta - std::f64::consts::FRAC_PI_2);
    let u1: Vec<f64> = g1.iter().map(|v| v / n1).collect();
    let sin_theta = theta.sin();

    // Orthonormal second direction. For a numerically antiparallel pair the
    // residual of g2 is noise, so take a deterministic probe axis instead:
    // the standard basis vector with the smallest |component along u1|,
    // lowest index on ties.
    let u2: Option<Vec<f64>> = if sin_theta >= SIN_EPS {
        let proj = dot(g2, &u1);
        let mut w: Vec<f64> = g2.iter().zip(&u1).map(|(g, u)| g - proj * u).collect();
        let wn = norm(&w);
        w.iter_mut().for_each(|v| *v /= wn);
        Some(w)
    } else {
        let mut best = 0usize;
        let mut best_abs = f64::INFINITY;
        for (i, &u) in u1.iter().enumerate() {
            if u.abs() < best_abs {
                best_abs = u.abs();
                best = i;
            }
        }
        let mut w: Vec<f64> = u1.iter().map(|&u| -u * u1[best]).collect();
        w[best] += 1.0;
        let wn = norm(&w);
        if wn < NORM_EPS {
            // One-dimensional attribute space: no orthogonal direction
            // exists, the conflict cannot be rotated apart.
            None
        } else {
            w.iter_mut().for_each(|v| *v /= wn);
            Some(w)
        }
    };

    let Some(u2) = u2 else {
        return PairOutcome {
            conflict: true,
            cos_theta,
            theta,
            beta,
            tau1: 1.0,
            tau2: 1.0,
            g1: g1.to_vec(),
            g2: g2.to_vec(),
        };
    };

    let (sb, cb) = beta.sin_cos();
    let g1r: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| n1 * (cb * a + sb * b)).collect();
    let g2r: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| n2 * (-sb * a + cb * b)).collect();
    let (tau1, tau2) = if sin_theta >= SIN_EPS {
        tau_coefficients(theta, beta, n1, n2)
    } else {
        // Magnitudes are preserved by the rotation, so 1 is the faithful
        // per-view scaling to report where the closed form diverges.
        (1.0, 1.0)
    };
    PairOutcome { conflict: true, cos_theta, theta, beta, tau1, tau2, g1: g1r, g2: g2r }
}

/// Per-attribute harmonization facts, one record per attribute per
/// iteration; these lines are what conflict statistics are computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationRecord {
    pub attribute: Attribute,
    pub conflict: bool,
    pub cos_theta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub lambda_geo: f64,
}

/// Harmonizes two full gradient bundles attribute by attribute (one tau
/// pair per attribute, applied to the globally flattened vectors) and
/// returns the combined parameter gradient the optimizer consumes.
pub fn harmonize_bundles(
    b1: &GradientBundle,
    b2: &GradientBundle,
    rho: f64,
    k_attenuation: f64,
) -> (ParamGrads, Vec<HarmonizationRecord>) {
    let n = b1.params.len();
    assert_eq!(n, b2.params.len());
    let mut combined = ParamGrads::zeros(n);
    let mut records = Vec::with_capacity(Attribute::ALL.len());

    for attr in Attribute::ALL {
        let g1 = b1.params.attribute(attr);
        let g2 = b2.params.attribute(attr);
        let out = combined.attribute_mut(attr);

        let n1 = norm(g1);
        let n2 = norm(g2);
        let tiny = n1 < NORM_EPS || n2 < NORM_EPS;
        let cos_theta =
            if tiny { 0.0 } else { (dot(g1, g2) / (n1 * n2)).clamp(-1.0, 1.0) };
        let conflict = !tiny && dot(g1, g2) < 0.0;

        if !conflict {
            for ((o, &a), &b) in out.iter_mut().zip(g1).zip(g2) {
                *o = a + b;
            }
            records.push(HarmonizationRecord {
                attribute: attr,
                conflict: false,
                cos_theta,
                tau1: 1.0,
                tau2: 1.0,
                lambda_geo: 1.0,
            });
            continue;
        }

        let lambda_geo = if attr.is_geometric() {
            geometric_attenuation(cos_theta, k_attenuation)
        } else {
            1.0
        };
        let theta = cos_theta.acos();
        let beta = rho * (theta - std::f64::consts::FRAC_PI_2);
        let (tau1, tau2) = if theta.sin() >= SIN_EPS && out.len() > 1 {
            tau_coefficients(theta, beta, n1, n2)
        } else {
            // Degenerate direction: fall back to the rotation construction
            // (or the plain sum in a 1-D attribute space).
            let pair = harmonize_pair(g1, g2, rho);
            for ((o, &a), &b) in out.iter_mut().zip(&pair.g1).zip(&pair.g2) {
                *o = lambda_geo * (a + b);
            }
            records.push(HarmonizationRecord {
                attribute: attr,
                conflict: true,
                cos_theta,
                tau1: pair.tau1,
                tau2: pair.tau2,
                lambda_geo,
            });
            continue;
        };
        for ((o, &a), &b) in out.iter_mut().zip(g1).zip(g2) {
            *o = lambda_geo * (tau1 * a + tau2 * b);
        }
        records.push(HarmonizationRecord {
            attribute: attr,
            conflict: true,
            cos_theta,
            tau1,
            tau2,
            lambda_geo,
        });
    }
    (combined, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;

    /// Independent oracle for the recombination: build the rotated pair
    /// explicitly in the {u1, u2} basis and sum.
    fn rotation_oracle(g1: &[f64], g2: &[f64], rho: f64) -> Vec<f64> {
        let n1 = norm(g1);
        let n2 = norm(g2);
        let cos = (dot(g1, g2) / (n1 * n2)).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let beta = rho * (theta - FRAC_PI_2);
        let u1: Vec<f64> = g1.iter().map(|v| v / n1).collect();
        let proj = dot(g2, &u1);
        let w: Vec<f64> = g2.iter().zip(&u1).map(|(g, u)| g - proj * u).collect();
        let wn = norm(&w);
        let u2: Vec<f64> = w.iter().map(|v| v / wn).collect();
        (0..g1.len())
            .map(|i| {
                n1 * (beta.cos() * u1[i] + beta.sin() * u2[i])
                    + n2 * (-beta.sin() * u1[i] + beta.cos() * u2[i])
            })
            .collect()
    }

    #[test]
    fn worked_example_matches_frozen_values() {
        let g1 = [1.0, 0.0];
        let g2 = [-1.0, 1.0];
        let out = harmonize_pair(&g1, &g2, 0.5);
        assert!(out.conflict);
        assert!((out.theta - 3.0 * std::f64::consts::PI / 4.0).abs() < 1e-12);
        assert!((out.beta - std::f64::consts::PI / 8.0).abs() < 1e-12);
        // Frozen from the closed-form geometry of the pair.
        assert!((out.g1[0] - 0.92388).abs() < 1e-5, "{:?}", out.g1);
        assert!((out.g1[1] - 0.38268).abs() < 1e-5);
        assert!((out.g2[0] + 0.54120).abs() < 1e-5, "{:?}", out.g2);
        assert!((out.g2[1] - 1.30656).abs() < 1e-5);
        assert!((out.tau1 - 2.07193).abs() < 1e-5, "tau1 {}", out.tau1);
        assert!((out.tau2 - 1.68924).abs() < 1e-5, "tau2 {}", out.tau2);
        let comb: Vec<f64> =
            (0..2).map(|i| out.tau1 * g1[i] + out.tau2 * g2[i]).collect();
        assert!((comb[0] - 0.38268).abs() < 1e-5);
        assert!((comb[1] - 1.68924).abs() < 1e-5);
        // The two routes to the combined gradient agree tightly.
        let oracle = rotation_oracle(&g1, &g2, 0.5);
        for i in 0..2 {
            assert!((comb[i] - oracle[i]).abs() <= 1e-9 * oracle[i].abs().max(1.0));
        }
    }

    #[test]
    fn non_conflicting_pair_passes_through_bitwise() {
        let g1 = [0.3, 0.2, -0.1];
        let g2 = [0.25, 0.1, 0.4];
        assert!(!detect_conflict(&g1, &g2));
        let out = harmonize_pair(&g1, &g2, 0.5);
        assert!(!out.conflict);
        assert_eq!(out.tau1, 1.0);
        assert_eq!(out.tau2, 1.0);
        assert!(out.g1.iter().zip(&g1).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(out.g2.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_gradient_never_conflicts() {
        let g1 = [0.0, 0.0];
        let g2 = [-1.0, 0.5];
        assert!(!detect_conflict(&g1, &g2));
        let out = harmonize_pair(&g1, &g2, 0.5);
        assert!(!out.conflict);
        assert_eq!(out.g1, vec![0.0, 0.0]);
    }

    #[test]
    fn antiparallel_uses_deterministic_probe() {
        let g1 = [2.0, 0.0, 0.0, 0.0];
        let g2 = [-3.0, 0.0, 0.0, 0.0];
        let a = harmonize_pair(&g1, &g2, 0.5);
        let b = harmonize_pair(&g1, &g2, 0.5);
        assert!(a.conflict);
        // Deterministic: bitwise identical across calls.
        assert!(a.g1.iter().zip(&b.g1).all(|(x, y)| x.to_bits() == y.to_bits()));
        // Probe resolves ties by lowest index, so the rotation happens in
        // the (e0, e1) plane.
        assert!(a.g1[1] != 0.0);
        assert_eq!(a.g1[2], 0.0);
        // Orthogonal and magnitude-preserving even in the degenerate case.
        assert!(dot(&a.g1, &a.g2).abs() <= 1e-9 * 6.0);
        assert!((norm(&a.g1) - 2.0).abs() < 1e-12);
        assert!((norm(&a.g2) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_conflict_falls_back_to_sum() {
        let out = harmonize_pair(&[1.0], &[-2.0], 0.5);
        assert!(out.conflict);
        assert_eq!(out.g1, vec![1.0]);
        assert_eq!(out.g2, vec![-2.0]);
        assert_eq!((out.tau1, out.tau2), (1.0, 1.0));
    }

    #[test]
    fn rho_zero_keeps_g1_fixed_rho_one_keeps_g2_fixed() {
        let g1 = [1.0, 0.2];
        let g2 = [-0.8, 0.3];
        let at0 = harmonize_pair(&g1, &g2, 0.0);
        // beta = 0: g1 unchanged (up to rounding), g2 rotated onto u2.
        for i in 0..2 {
            assert!((at0.g1[i] - g1[i]).abs() < 1e-12);
        }
        let at1 = harmonize_pair(&g1, &g2, 1.0);
        // beta = theta - pi/2: g2's share of the correction is zero, so its
        // direction is unchanged.
        let cos_g2 = dot(&at1.g2, &g2) / (norm(&at1.g2) * norm(&g2));
        assert!((cos_g2 - 1.0).abs() < 1e-9, "cos {cos_g2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn harmonization_invariants(
            seed in 0u64..1_000_000,
            dim in 2usize..48,
            rho in 0.0f64..1.0,
            scale1 in -2.0f64..2.0,
            scale2 in -2.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g1: Vec<f64> =
                (0..dim).map(|_| (rng.gen::<f64>() - 0.5) * 10f64.powf(scale1)).collect();
            let mut g2: Vec<f64> =
                (0..dim).map(|_| (rng.gen::<f64>() - 0.5) * 10f64.powf(scale2)).collect();
            // Force a conflict.
            if dot(&g1, &g2) >= 0.0 {
                g2.iter_mut().for_each(|v| *v = -*v);
            }
            prop_assume!(norm(&g1) > 1e-9 && norm(&g2) > 1e-9);
            prop_assume!(dot(&g1, &g2) < -1e-12 * norm(&g1) * norm(&g2));

            let out = harmonize_pair(&g1, &g2, rho);
            prop_assert!(out.conflict);
            let n1 = norm(&g1);
            let n2 = norm(&g2);

            // Orthogonality.
            prop_assert!(dot(&out.g1, &out.g2).abs() <= 1e-9 * n1 * n2);
            // Magnitude preservation.
            prop_assert!((norm(&out.g1) - n1).abs() <= 1e-10 * n1);
            prop_assert!((norm(&out.g2) - n2).abs() <= 1e-10 * n2);
            // Plane preservation: rotated vectors stay in span{g1, g2}.
            let u1: Vec<f64> = g1.iter().map(|v| v / n1).collect();
            let p = dot(&g2, &u1);
            let mut u2: Vec<f64> = g2.iter().zip(&u1).map(|(g, u)| g - p * u).collect();
            let wn = norm(&u2);
            prop_assume!(wn > 1e-9 * n2);
            u2.iter_mut().for_each(|v| *v /= wn);
            for v in [&out.g1, &out.g2] {
                let c1 = dot(v, &u1);
                let c2 = dot(v, &u2);
                let mut resid = 0.0f64;
                for i in 0..dim {
                    let r: f64 = v[i] - c1 * u1[i] - c2 * u2[i];
                    resid += r * r;
                }
                prop_assert!(resid.sqrt() <= 1e-9 * norm(v).max(1e-12));
            }
            // Angle accounting: g1 rotated by beta, g2 by (1-rho)(theta-pi/2).
            let rot1 = (dot(&out.g1, &g1) / (n1 * n1)).clamp(-1.0, 1.0).acos();
            let rot2 = (dot(&out.g2, &g2) / (n2 * n2)).clamp(-1.0, 1.0).acos();
            prop_assert!((rot1 - out.beta).abs() < 1e-7, "{rot1} vs beta {}", out.beta);
            let want2 = (1.0 - rho) * (out.theta - FRAC_PI_2);
            prop_assert!((rot2 - want2).abs() < 1e-7, "{rot2} vs {want2}");

            // Recombination: tau route equals rotation route.
            if out.theta.sin() >= SIN_EPS {
                let oracle = rotation_oracle(&g1, &g2, rho);
                let scale = n1.max(n2);
                for i in 0..dim {
                    let tau_route = out.tau1 * g1[i] + out.tau2 * g2[i];
                    prop_assert!(
                        (tau_route - oracle[i]).abs() <= 1e-9 * scale.max(oracle[i].abs()),
                        "i={i}: {tau_route} vs {}", oracle[i]
                    );
                }
            }
        }

        #[test]
        fn scale_equivariance(
            seed in 0u64..100_000,
            rho in 0.0f64..1.0,
            c in 1e-3f64..1e3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g1: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mut g2: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() - 0.5).collect();
            if dot(&g1, &g2) >= 0.0 {
                g2.iter_mut().for_each(|v| *v = -*v);
            }
            prop_assume!(dot(&g1, &g2) < -1e-9);
            let base = harmonize_pair(&g1, &g2, rho);
            let g1c: Vec<f64> = g1.iter().map(|v| v * c).collect();
            let g2c: Vec<f64> = g2.iter().map(|v| v * c).collect();
            let scaled = harmonize_pair(&g1c, &g2c, rho);
            for i in 0..6 {
                prop_assert!((scaled.g1[i] - c * base.g1[i]).abs() <= 1e-9 * c * norm(&g1));
                prop_assert!((scaled.g2[i] - c * base.g2[i]).abs() <= 1e-9 * c * norm(&g2));
            }
            // tau is scale-free.
            prop_assert!((scaled.tau1 - base.tau1).abs() <= 1e-9 * base.tau1.abs().max(1.0));
            prop_assert!((scaled.tau2 - base.tau2).abs() <= 1e-9 * base.tau2.abs().max(1.0));
        }
    }

    #[test]
    fn attenuation_shape() {
        assert_eq!(geometric_attenuation(0.5, 0.5), 1.0);
        assert_eq!(geometric_attenuation(0.0, 0.5), 1.0);
        let half = geometric_attenuation(-1.0, 0.5);
        assert!((half - (-0.5f64).exp()).abs() < 1e-15);
        let weaker = geometric_attenuation(-0.3, 0.5);
        assert!(weaker > half && weaker < 1.0);
    }

    fn bundle_from(params: ParamGrads) -> GradientBundle {
        let n = params.len();
        GradientBundle { params, view_space_pos: vec![[0.0; 2]; n] }
    }

    #[test]
    fn bundles_apply_one_tau_per_attribute_and_attenuate_geometry() {
        let n = 3;
        let mut p1 = ParamGrads::zeros(n);
        let mut p2 = ParamGrads::zeros(n);
        // Conflicting positions (global flattened dot < 0).
        p1.position = vec![[1.0, 0.0], [0.5, 0.2], [0.0, 0.3]];
        p2.position = vec![[-1.0, 0.4], [-0.6, 0.1], [0.1, -0.5]];
        // Agreeing colors.
        p1.color = vec![[0.1; 3]; n];
        p2.color = vec![[0.2; 3]; n];
        // Conflicting opacity (multi-dimensional, not antiparallel).
        p1.opacity = vec![1.0, 0.0, 0.5];
        p2.opacity = vec![-1.0, 0.8, -0.6];
        let b1 = bundle_from(p1.clone());
        let b2 = bundle_from(p2.clone());
        let (combined, records) = harmonize_bundles(&b1, &b2, 0.5, 0.5);
        assert_eq!(records.len(), 5);

        let rec_pos = records.iter().find(|r| r.attribute == Attribute::Position).unwrap();
        assert!(rec_pos.conflict);
        assert!(rec_pos.lambda_geo < 1.0, "geometric attribute attenuates");
        // Combined = lambda * (tau1 g1 + tau2 g2) elementwise with one tau.
        for i in 0..n {
            for d in 0..2 {
                let want = rec_pos.lambda_geo
                    * (rec_pos.tau1 * p1.position[i][d] + rec_pos.tau2 * p2.position[i][d]);
                let got = combined.position[i][d];
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }

        let rec_op = records.iter().find(|r| r.attribute == Attribute::Opacity).unwrap();
        assert!(rec_op.conflict);
        assert_eq!(rec_op.lambda_geo, 1.0, "opacity is not attenuated");

        let rec_col = records.iter().find(|r| r.attribute == Attribute::Color).unwrap();
        assert!(!rec_col.conflict);
        for i in 0..n {
            for k in 0..3 {
                assert_eq!(combined.color[i][k].to_bits(), (0.1f64 + 0.2).to_bits());
            }
        }

        // Zero-gradient attributes: no conflict, plain sum of zeros.
        let rec_rot = records.iter().find(|r| r.attribute == Attribute::Rotation).unwrap();
        assert!(!rec_rot.conflict);
        assert!(combined.rotation.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bundle_records_serialize_roundtrip() {
        let rec = HarmonizationRecord {
            attribute: Attribute::Scale,
            conflict: true,
            cos_theta: -0.4,
            tau1: 1.2,
            tau2: 0.9,
            lambda_geo: 0.8,
        };
        let s = serde_json::to_string(&rec).unwrap();
        assert!(s.contains("\"scale\""), "{s}");
        let back: HarmonizationRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back.attribute, Attribute::Scale);
        assert_eq!(back.tau1, 1.2);
    }
}
