//! Conflict-aware density control: densification statistics modulated by
//! the harmonizer's per-view position coefficients, clone/split, a
//! per-Gaussian conflict score with EMA history, scheduled opacity decay,
//! and opacity pruning.
//!
//! The core idea: a Gaussian whose two views persistently pull its position
//! or opacity in opposite directions is explaining view-inconsistent
//! content (a transient). Its conflict history grows, scheduled decay
//! multiplies its opacity by `exp(-lambda_prune * H)`, and the standard
//! opacity prune eventually removes it. Meanwhile densification statistics
//! are accumulated from harmonization-scaled view-space gradients, so
//! conflicted regions densify less aggressively.

use crate::cloud::{logit, sigmoid, GaussianCloud};
use crate::render::{GradientBundle, RenderOutput};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Norms below this make a per-Gaussian cosine undefined; such attributes
/// contribute zero conflict.
const COS_EPS: f64 = 1e-12;
/// Opacity floor applied before re-encoding to logits after decay.
const OPACITY_FLOOR: f64 = 1e-6;
/// Clone offset length as a fraction of the unit scene extent.
const CLONE_OFFSET: f64 = 0.01;
/// Scale divisor for split children.
const SPLIT_SCALE_DIV: f64 = 1.6;
/// Depth jitter applied to densified children.
const DEPTH_JITTER: f64 = 1e-6;

/// Folds one iteration's two views into the densification accumulators.
/// Visibility gates everything; the position-attribute tau of each view
/// scales its view-space gradient norm.
pub fn accumulate_densify_stats(
    cloud: &mut GaussianCloud,
    render1: &RenderOutput,
    render2: &RenderOutput,
    bundle1: &GradientBundle,
    bundle2: &GradientBundle,
    tau1_x: f64,
    tau2_x: f64,
) -> Result<()> {
    let n = cloud.len();
    for (name, len) in [
        ("render1 visibility", render1.visible.len()),
        ("render2 visibility", render2.visible.len()),
        ("bundle1", bundle1.view_space_pos.len()),
        ("bundle2", bundle2.view_space_pos.len()),
    ] {
        if len != n {
            return Err(Error::Shape(format!("{name} has {len} entries, cloud has {n}")));
        }
    }
    for i in 0..n {
        for (render, bundle, tau) in
            [(render1, bundle1, tau1_x), (render2, bundle2, tau2_x)]
        {
            if !render.visible[i] {
                continue;
            }
            cloud.r_max[i] = cloud.r_max[i].max(render.radii[i]);
            let g = bundle.view_space_pos[i];
            let scaled = [tau * g[0], tau * g[1]];
            cloud.densify_grad_accum[i] += (scaled[0] * scaled[0] + scaled[1] * scaled[1]).sqrt();
            cloud.densify_dir_accum[i][0] += scaled[0];
            cloud.densify_dir_accum[i][1] += scaled[1];
            cloud.densify_count[i] += 1;
        }
    }
    Ok(())
}

/// What a densify event did, plus the optimizer remap table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DensifyOutcome {
    pub clones: usize,
    pub splits: usize,
    pub before: usize,
    pub after: usize,
    /// `map[i]` = old index whose optimizer moments the new slot inherits.
    #[serde(skip)]
    pub map: Vec<Option<usize>>,
}

/// Clone/split pass over the accumulated statistics. Selection: mean
/// accumulated gradient above `grad_threshold`; small Gaussians
/// (`r_max <= size_threshold`, in pixels) clone, large ones split. All
/// accumulators reset afterwards.
pub fn densify(
    cloud: &mut GaussianCloud,
    grad_threshold: f64,
    size_threshold: f64,
    rng: &mut ChaCha8Rng,
) -> DensifyOutcome {
    let n = cloud.len();
    let before = n;
    #[derive(Clone, Copy, PartialEq)]
    enum Action {
        Keep,
        Clone,
        Split,
    }
    let actions: Vec<Action> = (0..n)
        .map(|i| {
            if cloud.densify_count[i] == 0 {
                return Action::Keep;
            }
            let mean = cloud.densify_grad_accum[i] / cloud.densify_count[i] as f64;
            if mean <= grad_threshold {
                Action::Keep
            } else if cloud.r_max[i] <= size_threshold {
                Action::Clone
            } else {
                Action::Split
            }
        })
        .collect();

    let mut out = GaussianCloud::default();
    let mut map: Vec<Option<usize>> = Vec::new();
    let mut clones = 0;
    let mut splits = 0;
    // Survivors first (everyone except split parents), original order.
    for i in 0..n {
        if actions[i] != Action::Split {
            copy_gaussian(&mut out, cloud, i);
            map.push(Some(i));
        }
    }
    // Children appended in ascending parent order.
    for i in 0..n {
        match actions[i] {
            Action::Keep => {}
            Action::Clone => {
                clones += 1;
                let dir = cloud.densify_dir_accum[i];
                let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
                let offset = if norm > 0.0 {
                    // Step along descent: where the view-space gradient says
                    // reconstruction still needs mass.
                    [-CLONE_OFFSET * dir[0] / norm, -CLONE_OFFSET * dir[1] / norm]
                } else {
                    [0.0, 0.0]
                };
                out.push(
                    [cloud.positions[i][0] + offset[0], cloud.positions[i][1] + offset[1]],
                    cloud.log_scales[i],
                    cloud.rotations[i],
                    cloud.opacity_logits[i],
                    cloud.colors[i],
                    cloud.depths[i] + DEPTH_JITTER,
                );
                let slot = out.len() - 1;
                out.conflict_ema[slot] = cloud.conflict_ema[i];
                map.push(None);
            }
            Action::Split => {
                splits += 1;
                let ls = cloud.log_scales[i];
                let child_ls = [ls[0] - SPLIT_SCALE_DIV.ln(), ls[1] - SPLIT_SCALE_DIV.ln()];
                let rot = crate::cloud::Mat2::rotation(cloud.rotations[i]);
                for k in 0..2 {
                    // Position sampled from the parent: mu + R diag(s) z.
                    let z = [normal(rng), normal(rng)];
                    let local = [ls[0].exp() * z[0], ls[1].exp() * z[1]];
                    let world = rot.matvec(local);
                    let jitter = if k == 0 { -DEPTH_JITTER } else { DEPTH_JITTER };
                    out.push(
                        [cloud.positions[i][0] + world[0], cloud.positions[i][1] + world[1]],
                        child_ls,
                        cloud.rotations[i],
                        cloud.opacity_logits[i],
                        cloud.colors[i],
                        cloud.depths[i] + jitter,
                    );
                    let slot = out.len() - 1;
                    out.conflict_ema[slot] = cloud.conflict_ema[i];
                    map.push(None);
                }
            }
        }
    }
    out.reset_densify_stats();
    let after = out.len();
    *cloud = out;
    DensifyOutcome { clones, splits, before, after, map }
}

fn copy_gaussian(dst: &mut GaussianCloud, src: &GaussianCloud, i: usize) {
    dst.push(
        src.positions[i],
        src.log_scales[i],
        src.rotations[i],
        src.opacity_logits[i],
        src.colors[i],
        src.depths[i],
    );
    let slot = dst.len() - 1;
    dst.r_max[slot] = src.r_max[i];
    dst.densify_grad_accum[slot] = src.densify_grad_accum[i];
    dst.densify_dir_accum[slot] = src.densify_dir_accum[i];
    dst.densify_count[slot] = src.densify_count[i];
    dst.conflict_ema[slot] = src.conflict_ema[i];
}

/// Box-Muller standard normal, consuming exactly two uniforms.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-Gaussian instantaneous conflict: the stronger of the position and
/// opacity disagreements between the two raw (pre-harmonization) bundles,
/// as `max(0, -cos)`; undefined cosines contribute zero.
pub fn instantaneous_conflict(b1: &GradientBundle, b2: &GradientBundle) -> Result<Vec<f64>> {
    let n = b1.params.len();
    if b2.params.len() != n {
        return Err(Error::Shape("bundle size mismatch".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p1 = b1.params.position[i];
        let p2 = b2.params.position[i];
        let n1 = (p1[0] * p1[0] + p1[1] * p1[1]).sqrt();
        let n2 = (p2[0] * p2[0] + p2[1] * p2[1]).sqrt();
        let pos_term = if n1 < COS_EPS || n2 < COS_EPS {
            0.0
        } else {
            (-(p1[0] * p2[0] + p1[1] * p2[1]) / (n1 * n2)).max(0.0)
        };
        let o1 = b1.params.opacity[i];
        let o2 = b2.params.opacity[i];
        let op_term = if o1.abs() < COS_EPS || o2.abs() < COS_EPS {
            0.0
        } else {
            // Scalar cosine is the sign product.
            (-(o1 * o2).signum()).max(0.0)
        };
        out.push(pos_term.max(op_term).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// `H = gamma H + (1 - gamma) C`, every iteration.
pub fn update_conflict_ema(cloud: &mut GaussianCloud, c: &[f64], gamma: f64) -> Result<()> {
    if c.len() != cloud.len() {
        return Err(Error::Shape("conflict vector size mismatch".into()));
    }
    for (h, &ci) in cloud.conflict_ema.iter_mut().zip(c) {
        *h = gamma * *h + (1.0 - gamma) * ci;
    }
    Ok(())
}

/// Multiplies opacities (probability domain) by `exp(-lambda_prune H)`,
/// floors at 1e-6, re-encodes to logits. Returns how many were decayed.
pub fn apply_opacity_decay(cloud: &mut GaussianCloud, lambda_prune: f64) -> usize {
    for i in 0..cloud.len() {
        let alpha = sigmoid(cloud.opacity_logits[i]);
        let decayed = (alpha * (-lambda_prune * cloud.conflict_ema[i]).exp()).max(OPACITY_FLOOR);
        cloud.opacity_logits[i] = logit(decayed);
    }
    cloud.len()
}

/// EMA update every call; opacity decay only when `iteration` lands on the
/// decay schedule.
pub fn update_conflict_ema_and_decay(
    cloud: &mut GaussianCloud,
    c: &[f64],
    gamma: f64,
    lambda_prune: f64,
    iteration: u64,
    decay_interval: u64,
) -> Result<bool> {
    update_conflict_ema(cloud, c, gamma)?;
    if iteration % decay_interval == 0 {
        apply_opacity_decay(cloud, lambda_prune);
        return Ok(true);
    }
    Ok(false)
}

/// Removes Gaussians whose opacity fell below the threshold. Errors rather
/// than return an empty cloud. Returns the optimizer remap table and how
/// many were removed.
pub fn prune(cloud: &mut GaussianCloud, opacity_threshold: f64) -> Result<(Vec<Option<usize>>, usize)> {
    let keep: Vec<bool> =
        (0..cloud.len()).map(|i| sigmoid(cloud.opacity_logits[i]) >= opacity_threshold).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 {
        return Err(Error::EmptyCloud(format!(
            "all {} Gaussians fell below opacity {opacity_threshold}",
            cloud.len()
        )));
    }
    let removed = cloud.len() - kept;
    let map: Vec<Option<usize>> =
        (0..cloud.len()).filter(|&i| keep[i]).map(Some).collect();
    cloud.retain_by_flags(&keep);
    Ok((map, removed))
}

/// One line per structure event in the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureEvent {
    pub iteration: u64,
    pub kind: String,
    pub clones: usize,
    pub splits: usize,
    pub pruned: usize,
    pub n_before: usize,
    pub n_after: usize,
}
