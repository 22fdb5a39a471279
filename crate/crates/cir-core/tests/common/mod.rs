//! Shared test utilities: the central finite-difference harness used to
//! validate every analytic gradient, independent of the backward passes it
//! checks.

use cir_core::encoders::{Grads, ParamTensors};
use cir_core::tensor::SeededRng;

pub const FD_H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

/// Adds `delta` to one entry of one named tensor.
pub fn nudge(params: &mut dyn ParamTensors, name: &str, idx: usize, delta: f64) {
    params.visit_tensors_mut(&mut |n, m, _| {
        if n == name {
            m.data_mut()[idx] += delta;
        }
    });
}

/// Adds seeded gaussian noise to every tensor so gradients are checked at a
/// generic point (layer-norm gains off exactly one, biases off zero).
pub fn jitter_params(params: &mut dyn ParamTensors, rng: &mut SeededRng, scale: f64) {
    params.visit_tensors_mut(&mut |_, m, _| {
        for v in m.data_mut() {
            *v += scale * rng.next_gaussian();
        }
    });
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn grad_error(analytic: f64, fd: f64) -> f64 {
    let diff = (analytic - fd).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(fd.abs()).max(ABS_FLOOR)
    }
}

/// Central finite differences on sampled coordinates of every tensor that
/// has an analytic gradient entry. Returns the worst relative error seen.
pub fn check_param_grads<M, F>(
    model: &M,
    loss: F,
    analytic: &Grads,
    coords_per_tensor: usize,
    rng: &mut SeededRng,
) -> f64
where
    M: ParamTensors + Clone,
    F: Fn(&M) -> f64,
{
    let mut worst: f64 = 0.0;
    let mut names: Vec<(String, usize)> = Vec::new();
    model.visit_tensors(&mut |name, m, _| {
        if analytic.contains_key(name) {
            names.push((name.to_string(), m.data().len()));
        }
    });
    for (name, len) in names {
        let g = &analytic[&name];
        assert_eq!(g.data().len(), len, "gradient shape for {name}");
        for _ in 0..coords_per_tensor.min(len) {
            let idx = rng.next_range(len);
            let mut plus = model.clone();
            nudge(&mut plus, &name, idx, FD_H);
            let mut minus = model.clone();
            nudge(&mut minus, &name, idx, -FD_H);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_H);
            let err = grad_error(g.data()[idx], fd);
            assert!(
                err <= REL_TOL,
                "{name}[{idx}]: analytic {} vs fd {} (rel err {err:.3e})",
                g.data()[idx],
                fd
            );
            worst = worst.max(err);
        }
    }
    worst
}
