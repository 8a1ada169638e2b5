//! Training configuration.
//!
//! On disk this is a plain `key = value` text file (`#` starts a comment).
//! Every field can also be overridden from the command line; the trainer
//! echoes the effective merged config into the run directory so a run is
//! reproducible from its artifacts alone.

use crate::{Error, Result};
use std::path::Path;

trait ConfigValue: Sized {
    fn parse_cv(key: &str, s: &str) -> Result<Self>;
    fn format_cv(&self) -> String;
}

macro_rules! impl_from_str_value {
    ($($ty:ty),+) => {$(
        impl ConfigValue for $ty {
            fn parse_cv(key: &str, s: &str) -> Result<Self> {
                s.parse().map_err(|_| {
                    Error::Config(format!("key '{key}': cannot parse '{s}' as {}", stringify!($ty)))
                })
            }
            fn format_cv(&self) -> String {
                // Debug for floats is the shortest round-trip representation.
                format!("{:?}", self)
            }
        }
    )+};
}

impl_from_str_value!(f64, u64, usize, bool);

macro_rules! config_fields {
    ($($(#[doc = $doc:literal])+ $field:ident : $ty:ty = $default:expr,)+) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct TrainConfig {
            $($(#[doc = $doc])+ pub $field: $ty,)+
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                TrainConfig { $($field: $default,)+ }
            }
        }

        impl TrainConfig {
            /// Sets one field from its text form. Unknown keys are errors so
            /// typos in config files fail loudly.
            pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => self.$field = ConfigValue::parse_cv(key, value)?,)+
                    _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
                }
                Ok(())
            }

            /// Full key-value listing; `parse` of this text reproduces the
            /// config exactly.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(
                    s.push_str(stringify!($field));
                    s.push_str(" = ");
                    s.push_str(&self.$field.format_cv());
                    s.push('\n');
                )+
                s
            }
        }
    };
}

config_fields! {
    /// RNG seed for the whole run.
    seed: u64 = 0,
    /// Total optimization iterations.
    total_iters: u64 = 2000,
    /// Iterations during which the mask is the binary prior only.
    warmup_iters: u64 = 200,
    /// DSSIM weight in the reconstruction loss; L1 gets (1 - lambda_rec).
    lambda_rec: f64 = 0.25,
    /// If true, DSSIM = (1 - SSIM) / 2 instead of 1 - SSIM.
    dssim_halved: bool = false,
    /// Fraction of the conflict angle excess rotated away, in [0, 1].
    /// 0.5 splits the correction symmetrically between the two views.
    rho: f64 = 0.5,
    /// Sensitivity of the geometric attenuation to conflict strength.
    k_attenuation: f64 = 0.5,
    /// Semantic distance saturation scale in the residual target.
    s_sem: f64 = 0.5,
    /// Bandwidth of the sigma-to-consistency-score mapping.
    c_sigma: f64 = 0.2,
    /// Mask exponent inside stable regions.
    eta_s: f64 = 1.2,
    /// Mask exponent inside prior-masked (transient) regions.
    eta_t: f64 = 3.0,
    /// Weight of the log-sigma regularizer in the predictor loss.
    lambda_inc: f64 = 0.5,
    /// Patch size of the feature grid, in pixels.
    grid_scale: usize = 8,
    /// EMA factor for per-Gaussian conflict, in (0, 1).
    gamma_conflict: f64 = 0.99,
    /// Opacity decay strength per decay event.
    lambda_prune: f64 = 0.3,
    /// Iterations between opacity decay events.
    decay_interval: u64 = 100,
    /// Gaussians below this opacity are pruned.
    prune_opacity_threshold: f64 = 0.005,
    /// Iterations between densification events.
    densify_interval: u64 = 100,
    /// First iteration at which densification may run.
    densify_start: u64 = 100,
    /// Densification stops after this fraction of total_iters.
    densify_stop_frac: f64 = 0.6,
    /// Mean view-space positional gradient norm that triggers densification.
    densify_grad_threshold: f64 = 2e-4,
    /// Clone-vs-split size threshold as a fraction of image width (pixels).
    densify_size_threshold_frac: f64 = 0.05,
    /// Hard cap on cloud size; densification is skipped at the cap.
    max_gaussians: usize = 50000,
    /// Number of Gaussians at initialization.
    init_count: usize = 200,
    /// Isotropic initial scale in world units.
    init_scale: f64 = 0.02,
    /// Initial opacity (probability domain).
    init_opacity: f64 = 0.1,
    /// Per-attribute learning rates.
    lr_position: f64 = 2e-3,
    /// Learning rate for log-scales.
    lr_scale: f64 = 5e-3,
    /// Learning rate for rotations.
    lr_rotation: f64 = 2e-3,
    /// Learning rate for opacity logits.
    lr_opacity: f64 = 5e-2,
    /// Learning rate for colors.
    lr_color: f64 = 2.5e-2,
    /// Learning rate for the consistency predictor.
    lr_predictor: f64 = 1e-3,
    /// Gaussians are rasterized out to this many standard deviations.
    cutoff_sigmas: f64 = 3.0,
    /// Iterations between checkpoint writes (0 = only final).
    checkpoint_interval: u64 = 500,
    /// Bit-exact reproducible execution. The only supported mode; exposed
    /// so runs record it and future relaxed modes stay opt-in.
    deterministic: bool = true,
    /// Ablation: no masking at all (mask = 1 everywhere).
    ablate_no_mask: bool = false,
    /// Ablation: binary prior mask only, no consistency score.
    ablate_bin_mask_only: bool = false,
    /// Ablation: consistency score only, binary prior treated as all-stable.
    ablate_score_mask_only: bool = false,
    /// Ablation: plain dual-view gradient summation, no harmonization.
    ablate_no_harmonize: bool = false,
    /// Ablation: no conflict EMA, no opacity decay, raw densify stats.
    ablate_no_conflict_structure: bool = false,
    /// Ablation: single random view per iteration (no dual-view machinery).
    ablate_single_view: bool = false,
}

impl TrainConfig {
    /// Checks every range constraint; the error names each violated field.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                bad.push(msg.to_string());
            }
        };
        // total_iters = 0 is legal: training becomes a no-op. Warm-up may
        // cover the whole run (the combined mask then never activates).
        check((0.0..=1.0).contains(&self.lambda_rec), "lambda_rec must be in [0,1]");
        check((0.0..=1.0).contains(&self.rho), "rho must be in [0,1]");
        check(self.k_attenuation >= 0.0, "k_attenuation must be >= 0");
        check(self.s_sem > 0.0, "s_sem must be > 0");
        check(self.c_sigma > 0.0, "c_sigma must be > 0");
        check(self.eta_s > 0.0, "eta_s must be > 0");
        check(self.eta_t > 0.0, "eta_t must be > 0");
        check(self.lambda_inc >= 0.0, "lambda_inc must be >= 0");
        check(self.grid_scale > 0, "grid_scale must be > 0");
        check(
            self.gamma_conflict > 0.0 && self.gamma_conflict < 1.0,
            "gamma_conflict must be in (0,1)",
        );
        check(self.lambda_prune >= 0.0, "lambda_prune must be >= 0");
        check(self.decay_interval > 0, "decay_interval must be > 0");
        check(
            self.prune_opacity_threshold > 0.0 && self.prune_opacity_threshold < 1.0,
            "prune_opacity_threshold must be in (0,1)",
        );
        check(self.densify_interval > 0, "densify_interval must be > 0");
        check(
            (0.0..=1.0).contains(&self.densify_stop_frac),
            "densify_stop_frac must be in [0,1]",
        );
        check(self.densify_grad_threshold > 0.0, "densify_grad_threshold must be > 0");
        check(self.densify_size_threshold_frac > 0.0, "densify_size_threshold_frac must be > 0");
        check(self.max_gaussians > 0, "max_gaussians must be > 0");
        check(self.init_count > 0, "init_count must be > 0");
        check(self.init_scale > 0.0, "init_scale must be > 0");
        check(
            self.init_opacity > 0.0 && self.init_opacity < 1.0,
            "init_opacity must be in (0,1)",
        );
        check(self.lr_position > 0.0, "lr_position must be > 0");
        check(self.lr_scale > 0.0, "lr_scale must be > 0");
        check(self.lr_rotation > 0.0, "lr_rotation must be > 0");
        check(self.lr_opacity > 0.0, "lr_opacity must be > 0");
        check(self.lr_color > 0.0, "lr_color must be > 0");
        check(self.lr_predictor > 0.0, "lr_predictor must be > 0");
        check(
            !(self.ablate_bin_mask_only && self.ablate_score_mask_only),
            "ablate_bin_mask_only and ablate_score_mask_only are exclusive",
        );
        drop(check);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Parses `key = value` text. Later lines win; unknown keys and
    /// malformed lines are errors with their line number.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            self.set_key(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Iteration after which densification stops.
    pub fn densify_stop(&self) -> u64 {
        (self.densify_stop_frac * self.total_iters as f64).floor() as u64
    }
}
