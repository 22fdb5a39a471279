//! The two training objectives — in-batch InfoNCE and the pairwise
//! preference (DPO) loss — with exact analytic gradients, plus the scaled
//! similarity scoring they share.
//!
//! Gradients are taken w.r.t. the (already normalized) inputs; the
//! normalization Jacobian lives in the encoder backward passes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{dot, log_sigmoid, norm, sigmoid, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{which} row {row} has norm {norm}, not unit within 1e-3")]
    NotNormalized {
        which: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("denominator is empty: batch of 1 with the positive excluded")]
    DegenerateBatch,
}

/// Loss hyperparameters shared by both objectives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// InfoNCE temperature.
    pub temperature: f64,
    /// DPO margin sharpness.
    pub beta: f64,
    /// Fixed similarity scaling (CLIP-style logit scale, not learned).
    pub logit_scale: f64,
    /// Literal reading of the contrastive denominator: drop the j == i term.
    pub exclude_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            beta: 0.1,
            logit_scale: 100.0,
            exclude_positive: false,
        }
    }
}

/// Scalar loss value plus gradients keyed by input name.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: BTreeMap<String, Matrix>,
}

fn check_rows_normalized(which: &'static str, m: &Matrix) -> Result<(), LossError> {
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if (n - 1.0).abs() > 1e-3 {
            return Err(LossError::NotNormalized {
                which,
                row: r,
                norm: n,
            });
        }
    }
    Ok(())
}

/// In-batch InfoNCE: each prompt row is contrasted against every target row
/// at temperature `tau`. By default the denominator includes the matching
/// target (the j == i term), which keeps the loss nonnegative and makes a
/// batch of one exactly zero; `exclude_positive` gives the literal variant.
///
/// Gradients are returned for both input matrices under `"prompts"` and
/// `"targets"`.
pub fn info_nce(
    prompts: &Matrix,
    targets: &Matrix,
    tau: f64,
    exclude_positive: bool,
) -> Result<LossOutput, LossError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(LossError::InvalidTemperature(tau));
    }
    if prompts.rows() != targets.rows() || prompts.cols() != targets.cols() {
        return Err(LossError::ShapeMismatch(format!(
            "prompts {}x{} vs targets {}x{}",
            prompts.rows(),
            prompts.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let b = prompts.rows();
    if b == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    if b == 1 && exclude_positive {
        return Err(LossError::DegenerateBatch);
    }
    check_rows_normalized("prompts", prompts)?;
    check_rows_normalized("targets", targets)?;

    // Scaled similarity matrix.
    let mut scores = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            scores.set(i, j, dot(prompts.row(i), targets.row(j)) / tau);
        }
    }

    let mut value = 0.0;
    let mut d_scores = Matrix::zeros(b, b);
    for i in 0..b {
        let row = scores.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| !(exclude_positive && *j == i))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if exclude_positive && j == i {
                continue;
            }
            denom += (v - max).exp();
        }
        let lse = max + denom.ln();
        value += (lse - row[i]) / b as f64;
        for j in 0..b {
            let softmax_j = if exclude_positive && j == i {
                0.0
            } else {
                (row[j] - lse).exp()
            };
            let indicator = if j == i { 1.0 } else { 0.0 };
            d_scores.set(i, j, (softmax_j - indicator) / b as f64);
        }
    }

    // Chain rule through the similarity matrix.
    let mut d_prompts = Matrix::zeros(b, prompts.cols());
    let mut d_targets = Matrix::zeros(b, targets.cols());
    for i in 0..b {
        for j in 0..b {
            let g = d_scores.get(i, j) / tau;
            if g == 0.0 {
                continue;
            }
            crate::tensor::axpy(d_prompts.row_mut(i), targets.row(j), g);
            crate::tensor::axpy(d_targets.row_mut(j), prompts.row(i), g);
        }
    }

    let mut grads = BTreeMap::new();
    grads.insert("prompts".to_string(), d_prompts);
    grads.insert("targets".to_string(), d_targets);
    Ok(LossOutput { value, grads })
}

/// Scaled dot-product similarities of one prompt against its positive and
/// mined negative image embeddings.
pub fn similarity_scores(
    prompt: &[f64],
    pos: &[f64],
    neg: &[f64],
    logit_scale: f64,
) -> Result<(f64, f64), LossError> {
    for (which, v) in [("prompt", prompt), ("pos", pos), ("neg", neg)] {
        if v.len() != prompt.len() {
            return Err(LossError::ShapeMismatch(format!(
                "{which} has dim {}, prompt has {}",
                v.len(),
                prompt.len()
            )));
        }
        let n = norm(v);
        if (n - 1.0).abs() > 1e-3 {
            return Err(LossError::NotNormalized {
                which: "similarity input",
                row: 0,
                norm: n,
            });
        }
    }
    Ok((
        logit_scale * dot(prompt, pos),
        logit_scale * dot(prompt, neg),
    ))
}

/// Pairwise preference loss: `-(1/B) Σ log σ(β (s⁺ - s⁻))`, computed via the
/// stable log-sigmoid. Gradients are returned under `"s_plus"` and
/// `"s_minus"` as 1xB matrices.
pub fn dpo_loss(s_plus: &[f64], s_minus: &[f64], beta: f64) -> Result<LossOutput, LossError> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(LossError::InvalidBeta(beta));
    }
    if s_plus.len() != s_minus.len() || s_plus.is_empty() {
        return Err(LossError::ShapeMismatch(format!(
            "s_plus has {} entries, s_minus has {}",
            s_plus.len(),
            s_minus.len()
        )));
    }
    let b = s_plus.len() as f64;
    let mut value = 0.0;
    let mut d_plus = vec![0.0; s_plus.len()];
    let mut d_minus = vec![0.0; s_minus.len()];
    for i in 0..s_plus.len() {
        let margin = beta * (s_plus[i] - s_minus[i]);
        value -= log_sigmoid(margin) / b;
        // d/ds⁺ [-log σ(β m)] = -β σ(-β m)
        let w = beta * sigmoid(-margin) / b;
        d_plus[i] = -w;
        d_minus[i] = w;
    }
    let mut grads = BTreeMap::new();
    grads.insert(
        "s_plus".to_string(),
        Matrix::from_vec(1, d_plus.len(), d_plus).expect("finite"),
    );
    grads.insert(
        "s_minus".to_string(),
        Matrix::from_vec(1, d_minus.len(), d_minus).expect("finite"),
    );
    Ok(LossOutput { value, grads })
}
