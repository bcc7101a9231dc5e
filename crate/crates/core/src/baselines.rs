//! Benchmark predictors: least-squares duration regression on the model's
//! own context vectors, and an additively smoothed first-order location chain.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LocationVocab, StationId, UserHistory};

/// Ridge added only when the design is rank deficient.
pub const RESCUE_RIDGE: f64 = 1e-6;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    /// Aligned with the schema features after the intercept.
    pub coefficients: Vec<f64>,
    pub residual_variance: f64,
    pub observations: usize,
    pub ridge_used: bool,
}

impl LinearModel {
    /// `beta_0 + beta . z[1..]`; the intercept column of `z` is not read.
    pub fn predict(&self, z: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(&z[1..]).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// Least squares on `(z, r)` rows whose first column is the intercept.
pub fn ols(rows: &[(&[f64], f64)], dim: usize) -> Result<LinearModel> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no training activities for regression".into()));
    }
    let n = rows.len();
    let z = DMatrix::from_fn(n, dim, |i, j| rows[i].0[j]);
    let r = DVector::from_iterator(n, rows.iter().map(|(_, y)| *y));
    let sv = z.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > RANK_TOL * smax.max(1.0)).count();
    let ridge_used = rank < dim;
    let mut gram = z.transpose() * &z;
    if ridge_used {
        for j in 0..dim {
            gram[(j, j)] += RESCUE_RIDGE;
        }
    }
    let rhs = z.transpose() * &r;
    let beta = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("regression normal equations".into()))?
        .solve(&rhs);
    let resid = &r - &z * &beta;
    Ok(LinearModel {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        residual_variance: resid.norm_squared() / n as f64,
        observations: n,
        ridge_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRegressionBaseline {
    pub pooled: LinearModel,
    /// Per 1-based activity index (entry `t - 1`), when fitted per index.
    pub per_index: Vec<Option<LinearModel>>,
}

impl LinearRegressionBaseline {
    /// Prediction for the 1-based activity `t` with context `z`.
    pub fn predict(&self, t: usize, z: &[f64]) -> f64 {
        match self.per_index.get(t.wrapping_sub(1)) {
            Some(Some(m)) => m.predict(z),
            _ => self.pooled.predict(z),
        }
    }
}

pub fn fit_lr(train: &UserHistory, per_index: bool) -> Result<LinearRegressionBaseline> {
    let dim = train
        .sequences
        .iter()
        .flat_map(|s| s.contexts.first())
        .map(|z| z.len())
        .next()
        .ok_or_else(|| Error::InsufficientData(format!("user {} has no training activities", train.user)))?;
    let mut rows: Vec<(usize, &[f64], f64)> = Vec::new();
    for seq in &train.sequences {
        for (t, (a, z)) in seq.activities.iter().zip(&seq.contexts).enumerate() {
            if z.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: z.len() });
            }
            rows.push((t, z.as_slice(), a.duration));
        }
    }
    let all: Vec<(&[f64], f64)> = rows.iter().map(|(_, z, r)| (*z, *r)).collect();
    let pooled = ols(&all, dim)?;
    let mut models = Vec::new();
    if per_index {
        let longest = rows.iter().map(|(t, _, _)| t + 1).max().unwrap_or(0);
        for t in 0..longest {
            let sub: Vec<(&[f64], f64)> = rows.iter().filter(|(s, _, _)| *s == t).map(|(_, z, r)| (*z, *r)).collect();
            models.push(if sub.is_empty() { None } else { Some(ols(&sub, dim)?) });
        }
    }
    Ok(LinearRegressionBaseline {
        pooled,
        per_index: models,
    })
}

pub fn predict_lr(model: &LinearRegressionBaseline, t: usize, z: &[f64]) -> f64 {
    model.predict(t, z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChainBaseline {
    pub vocab: LocationVocab,
    pub alpha: f64,
    pub active_days: u64,
    /// First-trip origin counts, indexed like `vocab`.
    pub first_counts: Vec<u64>,
    /// `bigrams[d][o]`: trips ending at `d` followed the same day by a trip from `o`.
    pub bigrams: BTreeMap<usize, BTreeMap<usize, u64>>,
}

/// What the next location is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum McContext<'a> {
    FirstTrip,
    After(&'a StationId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub distribution: Vec<f64>,
    /// The previous destination was outside the vocabulary.
    pub fell_back: bool,
}

pub fn fit_mc(train: &UserHistory, vocab: &LocationVocab, alpha: f64) -> Result<MarkovChainBaseline> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("smoothing alpha must be positive, got {alpha}")));
    }
    if vocab.is_empty() {
        return Err(Error::InvalidInput("empty location vocabulary".into()));
    }
    let mut first_counts = vec![0u64; vocab.len()];
    let mut bigrams: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut active_days = 0;
    for seq in &train.sequences {
        let Some(first) = seq.activities.first() else {
            continue;
        };
        active_days += 1;
        first_counts[vocab.index_of(&first.end_location)?] += 1;
        for a in &seq.activities[1..] {
            let d = vocab.index_of(&a.start_location)?;
            let o = vocab.index_of(&a.end_location)?;
            *bigrams.entry(d).or_default().entry(o).or_default() += 1;
        }
    }
    Ok(MarkovChainBaseline {
        vocab: vocab.clone(),
        alpha,
        active_days,
        first_counts,
        bigrams,
    })
}

pub fn predict_mc(model: &MarkovChainBaseline, ctx: McContext<'_>) -> McPrediction {
    let l = model.vocab.len() as f64;
    let a = model.alpha;
    let first = || -> Vec<f64> {
        let denom = model.active_days as f64 + a;
        model.first_counts.iter().map(|c| (*c as f64 + a / l) / denom).collect()
    };
    match ctx {
        McContext::FirstTrip => McPrediction {
            distribution: first(),
            fell_back: false,
        },
        McContext::After(prev) => match model.vocab.get(prev) {
            Some(d) => {
                let empty = BTreeMap::new();
                let row = model.bigrams.get(&d).unwrap_or(&empty);
                let denom = row.values().sum::<u64>() as f64 + a;
                McPrediction {
                    distribution: (0..model.vocab.len())
                        .map(|o| (row.get(&o).copied().unwrap_or(0) as f64 + a / l) / denom)
                        .collect(),
                    fell_back: false,
                }
            }
            None => {
                warn!("previous destination {prev} unseen in training; using first-trip distribution");
                McPrediction {
                    distribution: first(),
                    fell_back: true,
                }
            }
        },
    }
}
