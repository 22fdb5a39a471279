//! AdamW with decoupled weight decay and the one-cycle learning-rate
//! schedule. Both presets used by the training pipelines are pinned here.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{Grads, ParamTensors};
use crate::tensor::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient for {tensor} has shape {got_rows}x{got_cols}, parameter is {rows}x{cols}")]
    ShapeMismatch {
        tensor: String,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("step {step} is outside the schedule of {total_steps} steps")]
    StepOutOfRange { step: usize, total_steps: usize },
    #[error("invalid schedule config: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self::fusion_dpo()
    }
}

impl AdamWConfig {
    /// The setting used by both the fusion and preference pipelines:
    /// lr 1e-4, weight decay 1e-2, standard moments.
    pub fn fusion_dpo() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }

    /// The wider full-model setting: beta2 0.98, eps 1e-7, weight decay 0.05.
    pub fn blip2_style() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-7,
            weight_decay: 0.05,
        }
    }
}

/// Per-tensor first/second moments plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
    pub step: u64,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW step over every trainable tensor. Weight decay is decoupled
/// (`p *= 1 - lr*wd` independent of the adaptive term); missing gradients
/// count as zero; frozen tensors are never touched.
pub fn adamw_step(
    params: &mut dyn ParamTensors,
    grads: &Grads,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<(), OptimError> {
    // Validate before mutating anything.
    let mut err: Option<OptimError> = None;
    params.visit_tensors(&mut |name, p, trainable| {
        if !trainable || err.is_some() {
            return;
        }
        if let Some(g) = grads.get(name) {
            if g.rows() != p.rows() || g.cols() != p.cols() {
                err = Some(OptimError::ShapeMismatch {
                    tensor: name.to_string(),
                    rows: p.rows(),
                    cols: p.cols(),
                    got_rows: g.rows(),
                    got_cols: g.cols(),
                });
            } else if !g.is_finite() {
                err = Some(OptimError::NonFiniteGradient {
                    tensor: name.to_string(),
                });
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    let m_map = &mut state.m;
    let v_map = &mut state.v;
    params.visit_tensors_mut(&mut |name, p, trainable| {
        if !trainable {
            return;
        }
        let zero = Matrix::zeros(p.rows(), p.cols());
        let g = grads.get(name).unwrap_or(&zero);
        let m = m_map
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
        let v = v_map
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
        for i in 0..p.data().len() {
            let gi = g.data()[i];
            let pd = p.data_mut();
            pd[i] *= 1.0 - lr * cfg.weight_decay;
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    });
    Ok(())
}

/// One-cycle schedule: cosine warmup from `max_lr / div_factor` up to
/// `max_lr` over the first `pct_start` fraction of steps, then cosine
/// annealing down to `max_lr / final_div_factor` at the last step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneCycleConfig {
    pub max_lr: f64,
    pub total_steps: usize,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub pct_start: f64,
}

impl OneCycleConfig {
    pub fn new(max_lr: f64, total_steps: usize, pct_start: f64) -> Self {
        Self {
            max_lr,
            total_steps,
            div_factor: 100.0,
            final_div_factor: 10_000.0,
            pct_start,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.max_lr.is_nan() || self.max_lr <= 0.0 {
            return Err(OptimError::InvalidSchedule(
                "max_lr must be positive".into(),
            ));
        }
        if self.total_steps < 2 {
            return Err(OptimError::InvalidSchedule(
                "total_steps must be at least 2".into(),
            ));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(OptimError::InvalidSchedule(format!(
                "pct_start must be in (0, 1), got {}",
                self.pct_start
            )));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        let w = (self.pct_start * self.total_steps as f64).round() as usize;
        w.clamp(1, self.total_steps - 1)
    }
}

pub fn onecycle_lr(step: usize, cfg: &OneCycleConfig) -> Result<f64, OptimError> {
    cfg.validate()?;
    if step >= cfg.total_steps {
        return Err(OptimError::StepOutOfRange {
            step,
            total_steps: cfg.total_steps,
        });
    }
    let w = cfg.warmup_steps();
    let start_lr = cfg.max_lr / cfg.div_factor;
    let final_lr = cfg.max_lr / cfg.final_div_factor;
    let lr = if step <= w {
        let phase = step as f64 / w as f64;
        start_lr + (cfg.max_lr - start_lr) * 0.5 * (1.0 - (std::f64::consts::PI * phase).cos())
    } else {
        let span = (cfg.total_steps - 1 - w) as f64;
        let phase = (step - w) as f64 / span;
        final_lr + (cfg.max_lr - final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_matrix, SeededRng};

    /// Minimal parameter holder for optimizer tests.
    struct Pair {
        weight: Matrix,
        frozen: Matrix,
    }

    impl ParamTensors for Pair {
        fn visit_tensors(&self, f: &mut dyn FnMut(&str, &Matrix, bool)) {
            f("weight", &self.weight, true);
            f("frozen", &self.frozen, false);
        }
        fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix, bool)) {
            f("weight", &mut self.weight, true);
            f("frozen", &mut self.frozen, false);
        }
    }

    fn pair() -> Pair {
        Pair {
            weight: gaussian_matrix(3, 4, &mut SeededRng::new(1), 1.0),
            frozen: gaussian_matrix(2, 2, &mut SeededRng::new(2), 1.0),
        }
    }

    #[test]
    fn zero_grads_no_decay_leaves_params() {
        let mut p = pair();
        let before = p.weight.clone();
        let mut state = AdamWState::new();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::fusion_dpo()
        };
        let grads = Grads::new();
        adamw_step(&mut p, &grads, &mut state, &cfg, cfg.lr).unwrap();
        assert_eq!(p.weight, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grads_with_decay_shrinks_params() {
        let mut p = pair();
        let before = p.weight.clone();
        let mut state = AdamWState::new();
        let cfg = AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            ..AdamWConfig::fusion_dpo()
        };
        adamw_step(&mut p, &Grads::new(), &mut state, &cfg, cfg.lr).unwrap();
        for (a, b) in p.weight.data().iter().zip(before.data()) {
            assert!((a - b * (1.0 - 1e-6)).abs() < 1e-18);
        }
    }

    #[test]
    fn scalar_step_matches_hand_rolled_oracle() {
        struct Scalar {
            w: Matrix,
        }
        impl ParamTensors for Scalar {
            fn visit_tensors(&self, f: &mut dyn FnMut(&str, &Matrix, bool)) {
                f("w", &self.w, true);
            }
            fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix, bool)) {
                f("w", &mut self.w, true);
            }
        }
        let mut scalar = Scalar {
            w: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        };
        let cfg = AdamWConfig::fusion_dpo();
        let mut grads = Grads::new();
        grads.insert("w".to_string(), Matrix::from_vec(1, 1, vec![0.5]).unwrap());
        let mut state = AdamWState::new();
        adamw_step(&mut scalar, &grads, &mut state, &cfg, cfg.lr).unwrap();

        // Independent scalar oracle, written out step by step.
        let (lr, b1, b2, eps, wd, g) = (1e-4, 0.9, 0.999, 1e-8, 1e-2, 0.5);
        let mut w = 1.0f64;
        w *= 1.0 - lr * wd;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        w -= lr * m_hat / (v_hat.sqrt() + eps);

        assert!((scalar.w.get(0, 0) - w).abs() < 1e-12);
    }

    #[test]
    fn frozen_tensors_stay_bitwise_identical() {
        let mut p = pair();
        let frozen_before = p.frozen.clone();
        let mut state = AdamWState::new();
        let cfg = AdamWConfig::fusion_dpo();
        let mut grads = Grads::new();
        grads.insert(
            "weight".to_string(),
            gaussian_matrix(3, 4, &mut SeededRng::new(7), 1.0),
        );
        // Even a (spurious) gradient for the frozen tensor must be ignored.
        grads.insert(
            "frozen".to_string(),
            gaussian_matrix(2, 2, &mut SeededRng::new(8), 1.0),
        );
        for _ in 0..100 {
            adamw_step(&mut p, &grads, &mut state, &cfg, cfg.lr).unwrap();
        }
        assert_eq!(p.frozen, frozen_before);
    }

    #[test]
    fn non_finite_gradient_is_a_hard_error() {
        let mut p = pair();
        let mut grads = Grads::new();
        let mut bad = Matrix::zeros(3, 4);
        bad.data_mut()[5] = f64::NAN;
        grads.insert("weight".to_string(), bad);
        let mut state = AdamWState::new();
        let cfg = AdamWConfig::fusion_dpo();
        match adamw_step(&mut p, &grads, &mut state, &cfg, cfg.lr) {
            Err(OptimError::NonFiniteGradient { tensor }) => assert_eq!(tensor, "weight"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
        assert_eq!(state.step, 0, "failed step must not advance the counter");
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut p = pair();
            let mut state = AdamWState::new();
            let cfg = AdamWConfig::fusion_dpo();
            let mut grads = Grads::new();
            grads.insert(
                "weight".to_string(),
                gaussian_matrix(3, 4, &mut SeededRng::new(7), 1.0),
            );
            for _ in 0..10 {
                adamw_step(&mut p, &grads, &mut state, &cfg, cfg.lr).unwrap();
            }
            p.weight
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_gradient_update_bounded_by_lr() {
        struct Scalar {
            w: Matrix,
        }
        impl ParamTensors for Scalar {
            fn visit_tensors(&self, f: &mut dyn FnMut(&str, &Matrix, bool)) {
                f("w", &self.w, true);
            }
            fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix, bool)) {
                f("w", &mut self.w, true);
            }
        }
        let mut s = Scalar {
            w: Matrix::from_vec(1, 1, vec![0.3]).unwrap(),
        };
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::fusion_dpo()
        };
        let mut grads = Grads::new();
        grads.insert("w".to_string(), Matrix::from_vec(1, 1, vec![2.5]).unwrap());
        let mut state = AdamWState::new();
        for _ in 0..50 {
            let before = s.w.get(0, 0);
            adamw_step(&mut s, &grads, &mut state, &cfg, cfg.lr).unwrap();
            let delta = (s.w.get(0, 0) - before).abs();
            assert!(delta <= cfg.lr * (1.0 + 1e-6), "step moved {delta}");
        }
    }

    fn sched(total: usize, pct: f64) -> OneCycleConfig {
        OneCycleConfig::new(1e-2, total, pct)
    }

    #[test]
    fn onecycle_endpoints() {
        let cfg = sched(100, 0.3);
        assert!((onecycle_lr(0, &cfg).unwrap() - 1e-4).abs() < 1e-18);
        let peak_step = (0.3f64 * 100.0).round() as usize;
        assert!((onecycle_lr(peak_step, &cfg).unwrap() - 1e-2).abs() < 1e-9);
        let last = onecycle_lr(99, &cfg).unwrap();
        assert!((last - 1e-6).abs() / 1e-6 < 1e-6);
    }

    #[test]
    fn onecycle_rejects_out_of_range_step() {
        let cfg = sched(10, 0.3);
        assert!(matches!(
            onecycle_lr(10, &cfg),
            Err(OptimError::StepOutOfRange {
                step: 10,
                total_steps: 10
            })
        ));
    }

    #[test]
    fn onecycle_is_continuous() {
        for (total, pct) in [(10usize, 0.15), (64, 0.3), (200, 0.7), (13, 0.05)] {
            let cfg = sched(total, pct);
            let w = (pct * total as f64).round().max(1.0) as usize;
            let anneal = total - 1 - w.min(total - 1);
            let bound = 2.0 * cfg.max_lr / w.min(anneal.max(1)) as f64;
            for s in 0..total - 1 {
                let a = onecycle_lr(s, &cfg).unwrap();
                let b = onecycle_lr(s + 1, &cfg).unwrap();
                assert!(
                    (b - a).abs() <= bound,
                    "jump {} at step {s} exceeds bound {bound} (total={total}, pct={pct})",
                    (b - a).abs()
                );
            }
        }
    }
}
