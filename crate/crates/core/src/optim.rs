//! Adam over the cloud parameters, one learning rate per attribute.
//!
//! A single global step counter drives bias correction for every attribute;
//! moment buffers mirror the parameter layout exactly. Densification and
//! pruning change the number of Gaussians mid-run, so the optimizer can be
//! remapped: surviving Gaussians carry their moments with them, fresh ones
//! start from zero moments, and the step counter is untouched.

use crate::cloud::GaussianCloud;
use crate::config::TrainConfig;
use crate::render::{Attribute, ParamGrads};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-15;

/// Per-attribute learning rates, usually taken from the config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttrRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl AttrRates {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AttrRates {
            position: cfg.lr_position,
            scale: cfg.lr_scale,
            rotation: cfg.lr_rotation,
            opacity: cfg.lr_opacity,
            color: cfg.lr_color,
        }
    }

    pub fn rate(&self, a: Attribute) -> f64 {
        match a {
            Attribute::Position => self.position,
            Attribute::Scale => self.scale,
            Attribute::Rotation => self.rotation,
            Attribute::Opacity => self.opacity,
            Attribute::Color => self.color,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step_count: u64,
    pub m: ParamGrads,
    pub v: ParamGrads,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { step_count: 0, m: ParamGrads::zeros(n), v: ParamGrads::zeros(n) }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update. Gradient layout must match the cloud; the step counter
    /// advances once regardless of how many attributes received signal.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &ParamGrads, rates: &AttrRates) {
        let n = cloud.len();
        assert_eq!(grads.len(), n, "gradient/cloud length mismatch");
        assert_eq!(self.m.len(), n, "optimizer/cloud length mismatch");
        self.step_count += 1;
        let t = self.step_count;
        let bias1 = 1.0 - BETA1.powi(t as i32);
        let bias2 = 1.0 - BETA2.powi(t as i32);

        for attr in Attribute::ALL {
            let lr = rates.rate(attr);
            let g = grads.attribute(attr);
            let m = self.m.attribute_mut(attr);
            let v = self.v.attribute_mut(attr);
            let p: &mut [f64] = match attr {
                Attribute::Position => cloud.positions.as_flattened_mut(),
                Attribute::Scale => cloud.log_scales.as_flattened_mut(),
                Attribute::Rotation => &mut cloud.rotations,
                Attribute::Opacity => &mut cloud.opacity_logits,
                Attribute::Color => cloud.colors.as_flattened_mut(),
            };
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }

    /// Rebuilds the moment buffers for a new cloud layout. `map[i]` names
    /// the old slot whose moments the new Gaussian `i` inherits; `None`
    /// starts from zero moments (fresh clones and split children).
    pub fn remap(&mut self, map: &[Option<usize>]) {
        let old_m = std::mem::replace(&mut self.m, ParamGrads::zeros(map.len()));
        let old_v = std::mem::replace(&mut self.v, ParamGrads::zeros(map.len()));
        for (i, &src) in map.iter().enumerate() {
            let Some(j) = src else { continue };
            assert!(j < old_m.len(), "remap source {j} out of range");
            self.m.position[i] = old_m.position[j];
            self.m.log_scale[i] = old_m.log_scale[j];
            self.m.rotation[i] = old_m.rotation[j];
            self.m.opacity[i] = old_m.opacity[j];
            self.m.color[i] = old_m.color[j];
            self.v.position[i] = old_v.position[j];
            self.v.log_scale[i] = old_v.log_scale[j];
            self.v.rotation[i] = old_v.rotation[j];
            self.v.opacity[i] = old_v.opacity[j];
            self.v.color[i] = old_v.color[j];
        }
    }
}

/// Adam over one flat parameter vector (the mask predictor's weights).
/// Same update rule and constants as the cloud optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatAdam {
    pub step_count: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlatAdam {
    pub fn new(n: usize) -> Self {
        FlatAdam { step_count: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step_count += 1;
        let bias1 = 1.0 - BETA1.powi(self.step_count as i32);
        let bias2 = 1.0 - BETA2.powi(self.step_count as i32);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grads[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}
