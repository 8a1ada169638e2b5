//! Run analysis: image fidelity metrics, conflict statistics extracted from
//! training logs, and the closed-form view-pair coverage math.

use serde::{Deserialize, Serialize};

use crate::cloud::{GaussianCloud, View};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::render::Attribute;
use crate::train::StepReport;

/// Reported PSNR is capped here so zero-error comparisons stay finite.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images in [0,1], capped at
/// [`PSNR_CAP`]. Symmetric in its arguments; errors on shape mismatch.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// SSIM value between two images (gradient discarded).
pub fn ssim_value(a: &Image, b: &Image) -> Result<f64> {
    Ok(crate::loss::ssim(a, b)?.0)
}

/// Conflict behaviour of one gradient attribute across a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeConflict {
    pub attribute: Attribute,
    /// Steps that carried a harmonization record for this attribute
    /// (single-view steps carry none).
    pub steps: usize,
    pub conflicts: usize,
    /// conflicts / steps, or 0 when no step recorded the attribute.
    pub probability: f64,
    pub mean_cos_theta: f64,
    pub mean_lambda_geo: f64,
}

/// Per-attribute conflict probabilities measured over a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictStats {
    /// One row per attribute, in [`Attribute::ALL`] order.
    pub per_attribute: Vec<AttributeConflict>,
    /// Fraction of dual-view steps with at least one conflicting attribute.
    pub any_probability: f64,
    /// Dual-view steps considered.
    pub steps: usize,
}

/// Fraction of iterations whose per-attribute cross-view gradients
/// conflicted (cos θ < 0), per attribute. The protocol is fixed: every
/// dual-view iteration in the log counts, no warm-up exclusion. Malformed
/// logs are rejected earlier, by the log loader.
pub fn conflict_statistics(reports: &[StepReport]) -> ConflictStats {
    let mut per_attribute = Vec::with_capacity(Attribute::ALL.len());
    for attr in Attribute::ALL {
        let mut steps = 0usize;
        let mut conflicts = 0usize;
        let mut cos_sum = 0.0;
        let mut lambda_sum = 0.0;
        for report in reports {
            if let Some(rec) = report.harmonization.iter().find(|h| h.attribute == attr) {
                steps += 1;
                if rec.conflict {
                    conflicts += 1;
                }
                cos_sum += rec.cos_theta;
                lambda_sum += rec.lambda_geo;
            }
        }
        let n = steps.max(1) as f64;
        per_attribute.push(AttributeConflict {
            attribute: attr,
            steps,
            conflicts,
            probability: conflicts as f64 / n,
            mean_cos_theta: cos_sum / n,
            mean_lambda_geo: lambda_sum / n,
        });
    }
    let steps = reports.iter().filter(|r| !r.harmonization.is_empty()).count();
    let any = reports.iter().filter(|r| r.harmonization.iter().any(|h| h.conflict)).count();
    ConflictStats {
        per_attribute,
        any_probability: any as f64 / steps.max(1) as f64,
        steps,
    }
}

impl ConflictStats {
    pub fn probability(&self, attr: Attribute) -> f64 {
        self.per_attribute
            .iter()
            .find(|row| row.attribute == attr)
            .map_or(0.0, |row| row.probability)
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>7} {:>9} {:>12} {:>10} {:>11}\n",
            "attribute", "steps", "conflicts", "probability", "mean_cos", "mean_lgeo"
        ));
        for row in &self.per_attribute {
            out.push_str(&format!(
                "{:<10} {:>7} {:>9} {:>12.6} {:>10.4} {:>11.4}\n",
                format!("{:?}", row.attribute).to_lowercase(),
                row.steps,
                row.conflicts,
                row.probability,
                row.mean_cos_theta,
                row.mean_lambda_geo,
            ));
        }
        out.push_str(&format!(
            "any-attribute conflict probability: {:.6} over {} dual-view steps\n",
            self.any_probability, self.steps
        ));
        out
    }

    /// Plot-data CSV. Columns: `attribute,steps,conflicts,probability,`
    /// `mean_cos_theta,mean_lambda_geo`; one row per attribute.
    pub fn plot_data(&self) -> String {
        let mut out =
            String::from("attribute,steps,conflicts,probability,mean_cos_theta,mean_lambda_geo\n");
        for row in &self.per_attribute {
            out.push_str(&format!(
                "{:?},{},{},{},{},{}\n",
                row.attribute, row.steps, row.conflicts, row.probability, row.mean_cos_theta,
                row.mean_lambda_geo,
            ));
        }
        out
    }
}

/// Number of unordered view pairs among `num_views` views.
pub fn pair_count(num_views: usize) -> u64 {
    let n = num_views as u64;
    n * n.saturating_sub(1) / 2
}

/// Probability that one fixed pair has been sampled, exact and the
/// exponential approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub exact: f64,
    pub approx: f64,
}

/// Probability that a given unordered pair appears at least once in
/// `iterations` uniform draws over `pairs` pairs.
///
/// exact = 1 - (1 - 1/M)^T, approx = 1 - exp(-T/M). Panics if `pairs` is 0.
pub fn pair_coverage(pairs: u64, iterations: u64) -> Coverage {
    assert!(pairs >= 1, "pair count must be positive");
    let m = pairs as f64;
    let t = iterations as f64;
    // powf(0,0) = 1, so M = 1 and T = 0 fall out correctly.
    Coverage { exact: 1.0 - (1.0 - 1.0 / m).powf(t), approx: 1.0 - (-t / m).exp() }
}

/// Minimal iteration counts reaching a coverage target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageIterations {
    /// ceil(ln(1-q) / ln(1-1/M)), the exact bound.
    pub exact: u64,
    /// ceil(M ln(1/(1-q))), the exponential rule of thumb.
    pub approx: u64,
}

/// Smallest T with pair coverage >= `target`. Errors unless target is in
/// (0,1); panics if `pairs` is 0.
pub fn coverage_iterations(pairs: u64, target: f64) -> Result<CoverageIterations> {
    assert!(pairs >= 1, "pair count must be positive");
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Invalid(format!(
            "coverage target must lie strictly inside (0,1), got {target}"
        )));
    }
    let m = pairs as f64;
    let exact = if pairs == 1 {
        // One pair is covered by the first draw.
        1
    } else {
        ((-target).ln_1p() / (-1.0 / m).ln_1p()).ceil().max(1.0) as u64
    };
    let approx = (m * coverage_multiple(target)).ceil().max(1.0) as u64;
    Ok(CoverageIterations { exact, approx })
}

/// Multiple of M the exponential approximation prescribes for a coverage
/// target: ln(1/(1-q)).
pub fn coverage_multiple(target: f64) -> f64 {
    -(-target).ln_1p()
}

/// Rule-of-thumb coverage milestones: (target, quoted multiple of M,
/// decimals the multiple is conventionally quoted to).
pub const COVERAGE_MILESTONES: [(f64, f64, u32); 5] =
    [(0.5, 0.7, 1), (0.8, 1.6, 1), (0.95, 3.0, 0), (0.99, 4.6, 1), (0.999, 6.9, 1)];

/// One held-out view's fidelity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Always None here; reserved so external tooling can join a learned
    /// perceptual metric computed elsewhere.
    pub lpips: Option<f64>,
}

/// Machine-readable evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Run or ablation tag carried into every serialized report.
    pub label: String,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Renders each held-out view and scores it against the reference stored on
/// the view. Errors when `heldout` is empty.
pub fn evaluate(
    cloud: &GaussianCloud,
    heldout: &[View],
    cutoff_sigmas: f64,
    label: &str,
) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one held-out view".into()));
    }
    let mut rows = Vec::with_capacity(heldout.len());
    for view in heldout {
        let out = crate::render::render(cloud, view, cutoff_sigmas);
        rows.push(EvalRow {
            view: view.id.clone(),
            psnr: psnr(&out.image, &view.gt_image)?,
            ssim: ssim_value(&out.image, &view.gt_image)?,
            lpips: None,
        });
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(EvalReport { label: label.to_string(), rows, mean_psnr, mean_ssim })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    /// Human-readable per-view table with a trailing mean row.
    pub fn table(&self) -> String {
        let mut out = format!("run: {}\n", self.label);
        out.push_str(&format!("{:<14} {:>9} {:>9} {:>7}\n", "view", "psnr", "ssim", "lpips"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>9.4} {:>9.6} {:>7}\n",
                row.view,
                row.psnr,
                row.ssim,
                row.lpips.map_or("-".to_string(), |v| format!("{v:.4}")),
            ));
        }
        out.push_str(&format!(
            "{:<14} {:>9.4} {:>9.6} {:>7}\n",
            "mean", self.mean_psnr, self.mean_ssim, "-"
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonize::HarmonizationRecord;
    use crate::synth::oracle_cloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn psnr_identical_images_hit_the_cap() {
        let a = noise_image(1, 9, 7);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_constant_offset_is_twenty_db() {
        let a = Image::from_fn(8, 8, 3, |y, x, c| 0.2 + 0.3 * ((y + x + c) % 2) as f64);
        let b = Image::from_fn(8, 8, 3, |y, x, c| 0.1 + a.data[a.idx(y, x, c)]);
        // MSE = 0.01 exactly, so PSNR = 20 dB up to rounding in the offset.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_a_direct_reference() {
        let a = noise_image(2, 12, 10);
        let b = noise_image(3, 12, 10);
        let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            / a.data.len() as f64;
        let reference = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - reference).abs() < 1e-12);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric_and_shape_checked() {
        let a = noise_image(4, 16, 16);
        let b = noise_image(5, 16, 16);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let s_ab = ssim_value(&a, &b).unwrap();
        let s_ba = ssim_value(&b, &a).unwrap();
        assert!((s_ab - s_ba).abs() <= 1e-12);
        let c = noise_image(6, 16, 15);
        assert!(psnr(&a, &c).is_err());
    }

    fn fake_report(flags: &[(Attribute, bool)]) -> StepReport {
        StepReport {
            iteration: 0,
            view_i: 0,
            view_j: 1,
            loss_i: 0.0,
            loss_j: 0.0,
            predictor_loss: 0.0,
            mask_mean_i: 1.0,
            mask_mean_j: 1.0,
            score_mask_active: false,
            harmonization: flags
                .iter()
                .map(|&(attribute, conflict)| HarmonizationRecord {
                    attribute,
                    conflict,
                    cos_theta: if conflict { -0.5 } else { 0.5 },
                    tau1: 1.0,
                    tau2: 1.0,
                    lambda_geo: 1.0,
                })
                .collect(),
            n_gaussians: 1,
            clones: 0,
            splits: 0,
            pruned: 0,
            decayed: false,
        }
    }

    #[test]
    fn conflict_statistics_count_flags_per_attribute() {
        let mut reports = Vec::new();
        for i in 0..10 {
            reports.push(fake_report(&[
                (Attribute::Position, i < 3),
                (Attribute::Color, true),
                (Attribute::Opacity, false),
            ]));
        }
        let stats = conflict_statistics(&reports);
        assert_eq!(stats.steps, 10);
        assert_eq!(stats.probability(Attribute::Position), 0.3);
        assert_eq!(stats.probability(Attribute::Color), 1.0);
        assert_eq!(stats.probability(Attribute::Opacity), 0.0);
        // Scale never appears in these logs.
        let scale = &stats.per_attribute[1];
        assert_eq!(scale.attribute, Attribute::Scale);
        assert_eq!((scale.steps, scale.probability), (0, 0.0));
        assert_eq!(stats.any_probability, 1.0);
        assert!(stats.table().contains("position"));
        assert!(stats.plot_data().starts_with("attribute,steps,conflicts"));
    }

    #[test]
    fn identical_dual_views_have_zero_conflict_probability() {
        // Identical views produce identical gradients: no attribute ever
        // conflicts, which the trainer tests verify end to end.
        let reports: Vec<StepReport> = (0..5)
            .map(|_| fake_report(&Attribute::ALL.map(|a| (a, false))))
            .collect();
        let stats = conflict_statistics(&reports);
        for row in &stats.per_attribute {
            assert_eq!(row.probability, 0.0);
        }
        assert_eq!(stats.any_probability, 0.0);
        // Single-view logs carry no records and count no steps.
        assert_eq!(conflict_statistics(&[fake_report(&[])]).steps, 0);
    }

    #[test]
    fn coverage_edges() {
        assert_eq!(pair_coverage(190, 0).exact, 0.0);
        assert_eq!(pair_coverage(190, 0).approx, 0.0);
        assert_eq!(pair_coverage(1, 0).exact, 0.0);
        for t in [1, 2, 50] {
            assert_eq!(pair_coverage(1, t).exact, 1.0);
        }
        assert_eq!(pair_count(20), 190);
        assert_eq!(pair_count(2), 1);
        assert_eq!(pair_count(1), 0);
        assert_eq!(pair_count(0), 0);
    }

    #[test]
    fn coverage_at_t_equals_m_approaches_one_minus_e_inverse() {
        let c = pair_coverage(10_000, 10_000);
        let limit = 1.0 - (-1.0f64).exp();
        assert!((c.exact - limit).abs() < 1e-4, "exact {} vs {}", c.exact, limit);
        assert!((c.approx - limit).abs() < 1e-12);
        assert!((limit - 0.63212).abs() < 1e-5);
    }

    #[test]
    fn coverage_matches_monte_carlo() {
        // Fixed pair hit-rate over T uniform draws from M pairs.
        let (m, t, trials) = (190u64, 380u64, 100_000u32);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0u32;
        for _ in 0..trials {
            if (0..t).any(|_| rng.gen_range(0..m) == 0) {
                hits += 1;
            }
        }
        let empirical = f64::from(hits) / f64::from(trials);
        let formula = pair_coverage(m, t);
        assert!(
            (empirical - formula.exact).abs() < 0.01,
            "empirical {empirical} vs exact {}",
            formula.exact
        );
    }

    #[test]
    fn coverage_iterations_frozen_anchor() {
        let c = coverage_iterations(190, 0.95).unwrap();
        assert_eq!(c.exact, 568);
        assert_eq!(c.approx, 570);
    }

    #[test]
    fn coverage_iterations_edges_and_errors() {
        // A vanishing target still needs one draw.
        let c = coverage_iterations(190, 1e-12).unwrap();
        assert_eq!((c.exact, c.approx), (1, 1));
        assert_eq!(coverage_iterations(1, 0.9).unwrap().exact, 1);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(coverage_iterations(190, bad).is_err());
        }
    }

    #[test]
    fn coverage_is_monotone_and_exact_dominates_approx() {
        for m in [2u64, 3, 10, 190] {
            let mut prev = -1.0;
            for t in 0..200 {
                let c = pair_coverage(m, t);
                assert!(c.exact >= prev);
                prev = c.exact;
                if t >= 1 {
                    // (1 - 1/M)^T <= e^{-T/M} pointwise.
                    assert!(c.exact >= c.approx - 1e-15);
                }
            }
        }
        let mut prev = 2.0;
        for m in [2u64, 5, 20, 100, 1000] {
            let c = pair_coverage(m, 37);
            assert!(c.exact <= prev);
            prev = c.exact;
        }
    }

    #[test]
    fn milestones_match_quoted_multiples() {
        for (target, quoted, decimals) in COVERAGE_MILESTONES {
            let scale = 10f64.powi(decimals as i32);
            let rounded = (coverage_multiple(target) * scale).round();
            assert_eq!(
                rounded as i64,
                (quoted * scale).round() as i64,
                "multiple for target {target}"
            );
        }
    }

    #[test]
    fn oracle_cloud_evaluation_beats_thirty_db_and_is_deterministic() {
        // Generator self-consistency: the oracle cloud rasterizes its own
        // scene, so score it on straight-on views of that scene (held-out
        // affines sample scene content beyond the cloud's unit square).
        let scene = crate::synth::generate_scene(33);
        let cloud = oracle_cloud(&scene, 48, 2);
        let view_at = |res: usize, id: &str| View {
            id: id.into(),
            affine: crate::cloud::Mat2::IDENTITY,
            translation: [0.0, 0.0],
            gt_image: scene.render_through(&crate::cloud::Mat2::IDENTITY, [0.0, 0.0], res),
            prior_mask: Image::from_fn(res, res, 1, |_, _, _| 1.0),
        };
        let heldout = vec![view_at(48, "self_048"), view_at(32, "self_032")];
        let report = evaluate(&cloud, &heldout, 3.0, "oracle").unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.mean_psnr > 30.0, "mean psnr {}", report.mean_psnr);
        assert!(report.rows.iter().all(|r| r.lpips.is_none()));
        assert_eq!(report.label, "oracle");
        let again = evaluate(&cloud, &heldout, 3.0, "oracle").unwrap();
        assert_eq!(report, again);
        assert_eq!(report.to_json(), again.to_json());
        assert!(report.to_json().contains("\"lpips\": null"));
        assert!(report.table().contains("mean"));
        assert!(evaluate(&cloud, &[], 3.0, "oracle").is_err());
    }
}
