//! The learning workload: multi-class logistic regression with a smooth
//! non-convex penalty, trained under an ℓ1 regularizer.
//!
//! The model is an `m × n` matrix `X` stored row-major in a [`ModelVector`];
//! row `k` scores class `k`. For a sample `(a, label)` the data term is
//! `ln(1 + exp(-x_label · a))`, and the smooth penalty is
//! `β Σ_jk X_jk² / (1 + X_jk²)`. The ℓ1 term `γ‖X‖₁` is never
//! differentiated; it only enters through [`prox_l1`].

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Flattened model, dual variable, or any other `d`-dimensional iterate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        ModelVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ModelVector(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Number of entries that are exactly zero.
    pub fn count_zeros(&self) -> usize {
        self.0.iter().filter(|v| **v == 0.0).count()
    }

    /// Row `k` of the `m × n` matrix view.
    pub fn row(&self, k: usize, n: usize) -> &[f64] {
        &self.0[k * n..(k + 1) * n]
    }

    /// Squared Euclidean distance to `other`.
    pub fn dist_sq(&self, other: &ModelVector) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl Deref for ModelVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        ModelVector(v)
    }
}

/// A labelled feature vector. Features are stored as `f32` and shared, so
/// partitioning a dataset never copies pixel data.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Arc<[f32]>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Vec<f32>, label: usize) -> Self {
        Sample {
            features: features.into(),
            label,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    /// Number of classes `m`.
    pub classes: usize,
    /// Feature dimension `n`, bias included.
    pub features: usize,
    /// Weight of the smooth non-convex penalty.
    pub beta: f64,
    /// Weight of the ℓ1 regularizer.
    pub gamma: f64,
}

impl WorkloadParams {
    pub fn new(classes: usize, features: usize, beta: f64, gamma: f64) -> Result<Self> {
        let p = WorkloadParams {
            classes,
            features,
            beta,
            gamma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.features == 0 {
            return Err(FedError::invalid("class count and feature dimension must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(FedError::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(FedError::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Model dimension `d = m · n`.
    pub fn dim(&self) -> usize {
        self.classes * self.features
    }
}

fn check_shapes(model: &ModelVector, batch: &[Sample], params: &WorkloadParams) -> Result<()> {
    if batch.is_empty() {
        return Err(FedError::invalid("empty batch"));
    }
    if model.len() != params.dim() {
        return Err(FedError::invalid(format!(
            "model length {} does not match m*n = {}",
            model.len(),
            params.dim()
        )));
    }
    for s in batch {
        if s.dim() != params.features {
            return Err(FedError::invalid(format!(
                "sample has {} features, expected {}",
                s.dim(),
                params.features
            )));
        }
        if s.label >= params.classes {
            return Err(FedError::invalid(format!(
                "label {} out of range for {} classes",
                s.label, params.classes
            )));
        }
    }
    Ok(())
}

#[inline]
fn dot(row: &[f64], features: &[f32]) -> f64 {
    row.iter().zip(features).map(|(w, a)| w * f64::from(*a)).sum()
}

/// `ln(1 + e^t)` without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Mean data loss over `batch` plus the non-convex penalty.
pub fn local_loss(model: &ModelVector, batch: &[Sample], params: &WorkloadParams) -> Result<f64> {
    check_shapes(model, batch, params)?;
    let n = params.features;
    let data: f64 = batch
        .iter()
        .map(|s| softplus(-dot(model.row(s.label, n), &s.features)))
        .sum::<f64>()
        / batch.len() as f64;
    let penalty: f64 = model.iter().map(|x| x * x / (1.0 + x * x)).sum();
    Ok(data + params.beta * penalty)
}

/// Exact gradient of [`local_loss`], without clipping.
pub fn full_gradient(
    model: &ModelVector,
    batch: &[Sample],
    params: &WorkloadParams,
) -> Result<ModelVector> {
    check_shapes(model, batch, params)?;
    let n = params.features;
    let mut grad = vec![0.0; model.len()];
    let inv_b = 1.0 / batch.len() as f64;
    for s in batch {
        let z = dot(model.row(s.label, n), &s.features);
        // d/dz ln(1 + e^{-z}) = -1 / (1 + e^{z})
        let coef = -inv_b / (1.0 + z.exp());
        let row = &mut grad[s.label * n..(s.label + 1) * n];
        for (g, a) in row.iter_mut().zip(s.features.iter()) {
            *g += coef * f64::from(*a);
        }
    }
    if params.beta != 0.0 {
        for (g, x) in grad.iter_mut().zip(model.iter()) {
            let denom = 1.0 + x * x;
            *g += 2.0 * params.beta * x / (denom * denom);
        }
    }
    Ok(ModelVector(grad))
}

/// Rescales `v` in place so its ℓ2 norm does not exceed `bound`.
pub fn clip_to_norm(v: &mut ModelVector, bound: f64) {
    let norm = v.norm();
    if norm > bound {
        let scale = bound / norm;
        v.iter_mut().for_each(|g| *g *= scale);
    }
}

/// Mini-batch gradient of the smooth part, clipped to ℓ2 norm `clip_bound`.
pub fn local_gradient(
    model: &ModelVector,
    batch: &[Sample],
    params: &WorkloadParams,
    clip_bound: f64,
) -> Result<ModelVector> {
    if !(clip_bound > 0.0) {
        return Err(FedError::invalid(format!("clip bound must be positive, got {clip_bound}")));
    }
    let mut g = full_gradient(model, batch, params)?;
    clip_to_norm(&mut g, clip_bound);
    Ok(g)
}

/// Proximal operator of `γ‖·‖₁` with penalty `ρ`: element-wise soft
/// thresholding at `γ/ρ`.
pub fn prox_l1(u: &ModelVector, gamma: f64, rho: f64) -> Result<ModelVector> {
    if !(rho > 0.0) {
        return Err(FedError::invalid(format!("rho must be positive, got {rho}")));
    }
    if !(gamma >= 0.0) {
        return Err(FedError::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(u.clone());
    }
    let tau = gamma / rho;
    Ok(ModelVector(
        u.iter()
            .map(|&v| {
                let mag = v.abs() - tau;
                if mag > 0.0 {
                    v.signum() * mag
                } else {
                    0.0
                }
            })
            .collect(),
    ))
}

/// Index of the highest-scoring class; ties go to the lowest index.
pub fn predict(model: &ModelVector, features: &[f32], classes: usize) -> usize {
    let n = features.len();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..classes {
        let score = dot(model.row(k, n), features);
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    best
}

/// Fraction of `test` classified correctly by raw-score argmax.
///
/// Softmax is monotone, so comparing scores gives the same decision as
/// comparing probabilities without ever exponentiating.
pub fn predict_accuracy(model: &ModelVector, test: &[Sample]) -> Result<f64> {
    let Some(first) = test.first() else {
        return Err(FedError::invalid("empty test set"));
    };
    let n = first.dim();
    if n == 0 || !model.len().is_multiple_of(n) {
        return Err(FedError::invalid(format!(
            "model length {} is not a multiple of feature dim {n}",
            model.len()
        )));
    }
    let classes = model.len() / n;
    let correct = test
        .iter()
        .filter(|s| s.dim() == n && predict(model, &s.features, classes) == s.label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}
