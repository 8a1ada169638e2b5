//! The dual-view training loop: sample a view pair, render both, build
//! masks, compute masked losses, run two backward passes, harmonize the
//! gradients, step the optimizer, train the mask predictor, and schedule
//! densification / opacity decay / pruning.
//!
//! Per-iteration order (fixed; tests rely on it):
//!   render both -> masks (warm-up: binary prior only) -> losses ->
//!   two backwards -> instantaneous conflict + EMA -> harmonize ->
//!   optimizer applies the combined gradient -> predictor update ->
//!   densify-stat accumulation -> scheduled densify / decay / prune.
//!
//! Everything is sequential and seeded, so a (seed, config, dataset)
//! triple reproduces checkpoints and logs bit for bit.

use crate::checkpoint::Checkpoint;
use crate::cloud::{logit, GaussianCloud, View};
use crate::config::TrainConfig;
use crate::harmonize::{harmonize_bundles, HarmonizationRecord};
use crate::img::Image;
use crate::loss::reconstruction_loss;
use crate::mask::{
    combine_mask, consistency_score, extract_features, FeatureGrid, Predictor, FEATURE_DIM,
};
use crate::optim::{Adam, AttrRates, FlatAdam};
use crate::render::{prepare, Attribute, ParamGrads};
use crate::structure::{
    accumulate_densify_stats, apply_opacity_decay, densify, instantaneous_conflict, prune,
    update_conflict_ema,
};
use crate::synth::Dataset;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Decodes a flat index in [0, N(N-1)/2) into the unordered pair (i, j)
/// with i < j, enumerated row by row: (0,1), (0,2), ..., (1,2), ...
fn pair_from_index(num_views: usize, mut p: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = num_views - 1 - i;
        if p < row {
            return (i, i + 1 + p);
        }
        p -= row;
        i += 1;
    }
}

/// Uniform unordered view pair. Every one of the N(N-1)/2 pairs is equally
/// likely; the sequence is deterministic under a fixed seed.
pub fn sample_view_pair(rng: &mut ChaCha8Rng, num_views: usize) -> Result<(usize, usize)> {
    if num_views < 2 {
        return Err(Error::Invalid(format!(
            "sampling a view pair needs at least 2 views, got {num_views}"
        )));
    }
    let m = num_views * (num_views - 1) / 2;
    Ok(pair_from_index(num_views, rng.gen_range(0..m)))
}

/// How the per-view supervision mask is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MaskMode {
    /// Binary prior during warm-up, combined mask afterwards.
    Full,
    /// Binary prior only, always.
    BinOnly,
    /// Consistency score only (all-ones during warm-up: there is no
    /// binary component to fall back on).
    ScoreOnly,
    /// All-ones; masking disabled.
    NoMask,
}

fn mask_mode(cfg: &TrainConfig) -> MaskMode {
    if cfg.ablate_no_mask {
        MaskMode::NoMask
    } else if cfg.ablate_bin_mask_only {
        MaskMode::BinOnly
    } else if cfg.ablate_score_mask_only {
        MaskMode::ScoreOnly
    } else {
        MaskMode::Full
    }
}

/// One training iteration's log record: both masked losses, per-attribute
/// harmonization outcomes (conflict flag, cos angle, taus, attenuation),
/// mask means, structure events, and the population size after the step.
/// In single-view mode the `_j` fields are zero and `harmonization` is
/// empty (there is no second bundle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub view_i: usize,
    pub view_j: usize,
    pub loss_i: f64,
    pub loss_j: f64,
    pub predictor_loss: f64,
    pub mask_mean_i: f64,
    pub mask_mean_j: f64,
    /// True once the learned consistency score participates in the mask.
    pub score_mask_active: bool,
    pub harmonization: Vec<HarmonizationRecord>,
    pub n_gaussians: usize,
    pub clones: usize,
    pub splits: usize,
    pub pruned: usize,
    pub decayed: bool,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub cloud: GaussianCloud,
    pub cloud_opt: Adam,
    pub predictor: Predictor,
    pub predictor_opt: FlatAdam,
    pub rng: ChaCha8Rng,
    pub rng_seed: u64,
    pub iteration: u64,
    /// Per-view ground-truth feature grids, index-aligned with the views
    /// passed to `train_step`. The views must not change between steps.
    gt_features: Vec<FeatureGrid>,
}

/// Stratified-jittered cloud initialization: positions spread over a grid
/// with one uniform jitter per cell, isotropic scale, uniform opacity, and
/// colors looked up from the first view's ground truth at the projected
/// position. Stands in for SfM-point seeding at this scale.
fn init_cloud(cfg: &TrainConfig, first: &View, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let k0 = cfg.init_count;
    let g = (k0 as f64).sqrt().ceil() as usize;
    let cells = g * g;
    let ls = cfg.init_scale.ln();
    let op = logit(cfg.init_opacity);
    let mut cloud = GaussianCloud::default();
    for i in 0..k0 {
        // When k0 < g^2 the selected cells are spread evenly, not packed
        // into the top rows.
        let cell = i * cells / k0;
        let (cy, cx) = (cell / g, cell % g);
        let pos = [
            (cx as f64 + rng.gen::<f64>()) / g as f64,
            (cy as f64 + rng.gen::<f64>()) / g as f64,
        ];
        let pix = first.project(pos);
        let xi = (pix[0].floor() as i64).clamp(0, first.width() as i64 - 1) as usize;
        let yi = (pix[1].floor() as i64).clamp(0, first.height() as i64 - 1) as usize;
        let color = [
            first.gt_image[(yi, xi, 0)],
            first.gt_image[(yi, xi, 1)],
            first.gt_image[(yi, xi, 2)],
        ];
        let depth = rng.gen::<f64>();
        cloud.push(pos, [ls, ls], 0.0, op, color, depth);
    }
    cloud
}

impl TrainState {
    pub fn init(config: &TrainConfig, views: &[View], seed: u64) -> Result<TrainState> {
        config.validate()?;
        if views.len() < 2 {
            return Err(Error::Invalid(format!(
                "training needs at least 2 views, got {}",
                views.len()
            )));
        }
        for v in views {
            v.check()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = init_cloud(config, &views[0], &mut rng);
        let predictor = Predictor::init(FEATURE_DIM, &mut rng);
        let cloud_opt = Adam::new(cloud.len());
        let predictor_opt = FlatAdam::new(predictor.n_weights());
        let gt_features = views
            .iter()
            .map(|v| extract_features(&v.gt_image, config.grid_scale))
            .collect();
        Ok(TrainState {
            config: config.clone(),
            cloud,
            cloud_opt,
            predictor,
            predictor_opt,
            rng,
            rng_seed: seed,
            iteration: 0,
            gt_features,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            cloud: self.cloud.clone(),
            predictor: self.predictor.clone(),
            predictor_opt: self.predictor_opt.clone(),
            cloud_opt: self.cloud_opt.clone(),
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Rebuilds a resumable state from a checkpoint; the views must be the
    /// same set (in the same order) the checkpoint was trained on.
    pub fn from_checkpoint(ckpt: Checkpoint, config: &TrainConfig, views: &[View]) -> Result<TrainState> {
        config.validate()?;
        ckpt.cloud.ensure_valid()?;
        if ckpt.cloud_opt.len() != ckpt.cloud.len() {
            return Err(Error::Invalid(format!(
                "checkpoint optimizer tracks {} Gaussians, cloud has {}",
                ckpt.cloud_opt.len(),
                ckpt.cloud.len()
            )));
        }
        let rng = ckpt.restore_rng();
        let gt_features = views
            .iter()
            .map(|v| extract_features(&v.gt_image, config.grid_scale))
            .collect();
        Ok(TrainState {
            config: config.clone(),
            cloud: ckpt.cloud,
            cloud_opt: ckpt.cloud_opt,
            predictor: ckpt.predictor,
            predictor_opt: ckpt.predictor_opt,
            rng,
            rng_seed: ckpt.rng_seed,
            iteration: ckpt.iteration,
            gt_features,
        })
    }

    /// Supervision mask for one view at the current iteration. The bool
    /// reports whether the learned score participated.
    fn mask_for(&self, view_idx: usize, view: &View) -> Result<(Image, bool)> {
        let (h, w) = (view.height(), view.width());
        let warm = self.iteration < self.config.warmup_iters;
        let score = |s: &TrainState| -> Result<Image> {
            let grid = &s.gt_features[view_idx];
            let sigma = s.predictor.predict_sigma(grid)?;
            consistency_score(
                &sigma,
                grid.gh,
                grid.gw,
                s.config.grid_scale,
                s.config.c_sigma,
                h,
                w,
            )
        };
        match mask_mode(&self.config) {
            MaskMode::NoMask => Ok((Image::from_fn(h, w, 1, |_, _, _| 1.0), false)),
            MaskMode::BinOnly => Ok((view.prior_mask.clone(), false)),
            MaskMode::Full if warm => Ok((view.prior_mask.clone(), false)),
            MaskMode::Full => {
                let s = score(self)?;
                let m = combine_mask(&s, &view.prior_mask, self.config.eta_s, self.config.eta_t)?;
                Ok((m, true))
            }
            MaskMode::ScoreOnly if warm => Ok((Image::from_fn(h, w, 1, |_, _, _| 1.0), false)),
            MaskMode::ScoreOnly => Ok((score(self)?, true)),
        }
    }
}

/// Elementwise sum of two gradient sets: the no-harmonization path.
fn plain_sum(a: &ParamGrads, b: &ParamGrads) -> ParamGrads {
    let mut out = a.clone();
    for attr in Attribute::ALL {
        for (o, v) in out.attribute_mut(attr).iter_mut().zip(b.attribute(attr)) {
            *o += v;
        }
    }
    out
}

pub fn train_step(state: &mut TrainState, views: &[View]) -> Result<StepReport> {
    if state.cloud.is_empty() {
        return Err(Error::EmptyCloud("train_step on an empty cloud".into()));
    }
    let cfg = state.config.clone();
    let it = state.iteration;
    let single = cfg.ablate_single_view;
    let (vi, vj) = if single {
        let k = state.rng.gen_range(0..views.len());
        (k, k)
    } else {
        sample_view_pair(&mut state.rng, views.len())?
    };

    // Forward pass(es).
    let prep1 = prepare(&state.cloud, &views[vi], cfg.cutoff_sigmas);
    let out1 = prep1.output();
    let (m1, score_active) = state.mask_for(vi, &views[vi])?;
    let (l1, g1img) = reconstruction_loss(
        &out1.image,
        &views[vi].gt_image,
        &m1,
        cfg.lambda_rec,
        cfg.dssim_halved,
    )?;

    let dual = if single {
        None
    } else {
        let prep2 = prepare(&state.cloud, &views[vj], cfg.cutoff_sigmas);
        let out2 = prep2.output();
        let (m2, _) = state.mask_for(vj, &views[vj])?;
        let (l2, g2img) = reconstruction_loss(
            &out2.image,
            &views[vj].gt_image,
            &m2,
            cfg.lambda_rec,
            cfg.dssim_halved,
        )?;
        Some((prep2, out2, m2, l2, g2img))
    };

    let l2 = dual.as_ref().map_or(0.0, |d| d.3);
    if !l1.is_finite() || !l2.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: it,
            detail: format!(
                "view {} loss {l1:e}, view {} loss {l2:e}",
                views[vi].id, views[vj].id
            ),
        });
    }

    // Backward pass(es), then conflict bookkeeping and harmonization on
    // the raw per-view gradients.
    let b1 = prep1.backward(&g1img);
    let mut records: Vec<HarmonizationRecord> = Vec::new();
    let (applied, b2, out2, m2) = match dual {
        None => (b1.params.clone(), None, None, None),
        Some((prep2, out2, m2, _, g2img)) => {
            let b2 = prep2.backward(&g2img);
            if !cfg.ablate_no_conflict_structure {
                let c = instantaneous_conflict(&b1, &b2)?;
                update_conflict_ema(&mut state.cloud, &c, cfg.gamma_conflict)?;
            }
            let (combined, recs) = harmonize_bundles(&b1, &b2, cfg.rho, cfg.k_attenuation);
            records = recs;
            let applied = if cfg.ablate_no_harmonize {
                plain_sum(&b1.params, &b2.params)
            } else {
                combined
            };
            (applied, Some(b2), Some(out2), Some(m2))
        }
    };

    let rates = AttrRates::from_config(&cfg);
    state.cloud_opt.step(&mut state.cloud, &applied, &rates);

    // Predictor update on the incoherence loss, summed over the sampled
    // views. Skipped when the score never feeds the mask.
    let mut predictor_loss = 0.0;
    let trains_predictor =
        matches!(mask_mode(&cfg), MaskMode::Full | MaskMode::ScoreOnly);
    if trains_predictor {
        let mut grad_sum = vec![0.0; state.predictor.n_weights()];
        let mut add_view = |render: &Image, idx: usize| -> Result<f64> {
            let f_render = extract_features(render, cfg.grid_scale);
            let grid = &state.gt_features[idx];
            let e = crate::mask::residual_target(
                render,
                &views[idx].gt_image,
                &f_render,
                grid,
                cfg.s_sem,
            )?;
            let (loss, grad) = state.predictor.loss_and_weight_grad(grid, &e, cfg.lambda_inc)?;
            for (g, v) in grad_sum.iter_mut().zip(grad) {
                *g += v;
            }
            Ok(loss)
        };
        predictor_loss += add_view(&out1.image, vi)?;
        if let Some(o2) = &out2 {
            predictor_loss += add_view(&o2.image, vj)?;
        }
        let mut weights = state.predictor.flatten();
        state.predictor_opt.step(&mut weights, &grad_sum, cfg.lr_predictor);
        state.predictor.apply_flat(&weights)?;
    }

    // Densify statistics. Modulation by the position taus only applies
    // when both harmonization and conflict-aware structure are active.
    let (t1, t2) = if cfg.ablate_no_harmonize || cfg.ablate_no_conflict_structure {
        (1.0, 1.0)
    } else {
        records
            .iter()
            .find(|r| r.attribute == Attribute::Position)
            .map_or((1.0, 1.0), |r| (r.tau1, r.tau2))
    };
    if let (Some(o2), Some(bb2)) = (&out2, &b2) {
        accumulate_densify_stats(&mut state.cloud, &out1, o2, &b1, bb2, t1, t2)?;
    } else {
        // Single-view: both slots see the same pass; sums and counts
        // double together, so means and maxima are unaffected.
        accumulate_densify_stats(&mut state.cloud, &out1, &out1, &b1, &b1, 1.0, 1.0)?;
    }

    // Scheduled structure events, 1-based on completed steps so nothing
    // fires before any training happened.
    let step = it + 1;
    let (mut clones, mut splits, mut pruned, mut decayed) = (0, 0, 0, false);
    let densify_due = step >= cfg.densify_start
        && step < cfg.densify_stop()
        && step % cfg.densify_interval == 0
        && state.cloud.len() < cfg.max_gaussians;
    if densify_due {
        let size_threshold = cfg.densify_size_threshold_frac
            * views[vi].width().min(views[vi].height()) as f64;
        let outcome = densify(
            &mut state.cloud,
            cfg.densify_grad_threshold,
            size_threshold,
            &mut state.rng,
        );
        state.cloud_opt.remap(&outcome.map);
        clones = outcome.clones;
        splits = outcome.splits;
    }
    if step % cfg.decay_interval == 0 {
        if !cfg.ablate_no_conflict_structure {
            apply_opacity_decay(&mut state.cloud, cfg.lambda_prune);
            decayed = true;
        }
        let (map, removed) = prune(&mut state.cloud, cfg.prune_opacity_threshold)?;
        state.cloud_opt.remap(&map);
        pruned = removed;
    }

    state.iteration += 1;
    Ok(StepReport {
        iteration: it,
        view_i: vi,
        view_j: vj,
        loss_i: l1,
        loss_j: l2,
        predictor_loss,
        mask_mean_i: m1.mean(),
        mask_mean_j: m2.as_ref().map_or(0.0, |m| m.mean()),
        score_mask_active: score_active,
        harmonization: records,
        n_gaussians: state.cloud.len(),
        clones,
        splits,
        pruned,
        decayed,
    })
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<StepReport>,
}

/// Full training run over fixed views. When `run_dir` is given, writes the
/// effective config, a JSONL log (one record per iteration), periodic and
/// final checkpoints, and final renders of the held-out views. On a
/// non-finite loss the error propagates after a diagnostic dump
/// (`crash.ckpt` plus the failing views' renders).
pub fn train_views(
    config: &TrainConfig,
    views: &[View],
    heldout: &[View],
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut state = TrainState::init(config, views, seed)?;
    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
            config.write_file(&dir.join("config.txt"))?;
            let path = dir.join("log.jsonl");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(path, e))?;
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(config.total_iters as usize);
    for _ in 0..config.total_iters {
        let report = match train_step(&mut state, views) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = run_dir {
                    dump_crash(&state, views, dir);
                }
                return Err(e);
            }
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&report)
                .map_err(|e| Error::Invalid(format!("log serialization failed: {e}")))?;
            writeln!(w, "{line}")
                .map_err(|e| Error::io(run_dir.unwrap().join("log.jsonl"), e))?;
        }
        if config.checkpoint_interval > 0
            && report.iteration > 0
            && (report.iteration + 1) % config.checkpoint_interval == 0
        {
            if let Some(dir) = run_dir {
                let path = dir.join(format!("checkpoint_{:06}.ckpt", report.iteration + 1));
                state.to_checkpoint().save(&path)?;
            }
        }
        reports.push(report);
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io(run_dir.unwrap().join("log.jsonl"), e))?;
    }
    if let Some(dir) = run_dir {
        state.to_checkpoint().save(&dir.join("final.ckpt"))?;
        let renders = dir.join("renders");
        std::fs::create_dir_all(&renders).map_err(|e| Error::io(renders.clone(), e))?;
        for v in heldout {
            let out = crate::render::render(&state.cloud, v, config.cutoff_sigmas);
            out.image.save_png(&renders.join(format!("{}.png", v.id)))?;
        }
    }
    Ok(TrainOutcome { state, reports })
}

/// Dataset-shaped wrapper: trains on the corrupted views with their prior
/// masks, rendering the clean held-out views at the end.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let views = dataset.training_views();
    let heldout = dataset.heldout_views();
    train_views(config, &views, &heldout, seed, run_dir)
}

/// Best-effort crash dump; never masks the original error.
fn dump_crash(state: &TrainState, views: &[View], dir: &Path) {
    let _ = std::fs::create_dir_all(dir);
    let _ = state.to_checkpoint().save(&dir.join("crash.ckpt"));
    for v in views {
        let out = crate::render::render(&state.cloud, v, state.config.cutoff_sigmas);
        let _ = out.image.save_png(&dir.join(format!("crash_render_{}.png", v.id)));
        let _ = v.gt_image.save_png(&dir.join(format!("crash_gt_{}.png", v.id)));
    }
}

/// Reads a JSONL training log back into step reports.
pub fn load_log(path: &Path) -> Result<Vec<StepReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepReport = serde_json::from_str(line).map_err(|e| Error::Corrupted {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", ln + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}
