//! Weighted M-step objectives and their solvers.
//!
//! [`WeightedLogit`] is a ridge-penalised multinomial logit with soft
//! targets; class 0 is the reference. [`WeightedGaussianRegression`] is the
//! weighted linear-Gaussian duration model, solved in closed form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iohmm::params::{dot, log_sum_exp, softmax_in_place};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Problems with more free parameters than this use L-BFGS instead of Newton.
    pub newton_max_params: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            grad_tol: 1e-8,
            max_iter: 200,
            newton_max_params: 300,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub theta: Vec<f64>,
    pub value: f64,
    pub start_value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// `sum_n sum_k w[n,k] log softmax(theta z_n)_k - ridge/2 |theta|^2`.
///
/// `theta` holds the `(n_classes - 1) x dim` free rows for classes `1..n_classes`.
#[derive(Debug, Clone, Copy)]
pub struct WeightedLogit<'a> {
    pub features: &'a [f64],
    pub dim: usize,
    pub weights: &'a [f64],
    pub n_classes: usize,
    pub ridge: f64,
}

impl<'a> WeightedLogit<'a> {
    pub fn new(
        features: &'a [f64],
        dim: usize,
        weights: &'a [f64],
        n_classes: usize,
        ridge: f64,
    ) -> Result<Self> {
        if dim == 0 || n_classes == 0 || !features.len().is_multiple_of(dim) {
            return Err(Error::InvalidInput("malformed logit design".into()));
        }
        let rows = features.len() / dim;
        if weights.len() != rows * n_classes {
            return Err(Error::DimensionMismatch {
                expected: rows * n_classes,
                got: weights.len(),
            });
        }
        Ok(WeightedLogit {
            features,
            dim,
            weights,
            n_classes,
            ridge,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn n_params(&self) -> usize {
        (self.n_classes - 1) * self.dim
    }

    fn row(&self, n: usize) -> (&[f64], &[f64]) {
        (
            &self.features[n * self.dim..(n + 1) * self.dim],
            &self.weights[n * self.n_classes..(n + 1) * self.n_classes],
        )
    }

    fn logits(&self, theta: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        for k in 1..self.n_classes {
            out[k] = dot(&theta[(k - 1) * self.dim..k * self.dim], z);
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let mut s = vec![0.0; self.n_classes];
        let mut total = 0.0;
        for n in 0..self.n_rows() {
            let (z, w) = self.row(n);
            let wsum: f64 = w.iter().sum();
            if wsum == 0.0 {
                continue;
            }
            self.logits(theta, z, &mut s);
            let lse = log_sum_exp(&s);
            total += w.iter().zip(&s).map(|(wk, sk)| wk * (sk - lse)).sum::<f64>();
        }
        total - 0.5 * self.ridge * theta.iter().map(|v| v * v).sum::<f64>()
    }

    /// The objective without its ridge term.
    pub fn unpenalized_value(&self, theta: &[f64]) -> f64 {
        WeightedLogit { ridge: 0.0, ..*self }.value(theta)
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let mut grad: Vec<f64> = theta.iter().map(|v| -self.ridge * v).collect();
        let mut s = vec![0.0; self.n_classes];
        let mut total = 0.0;
        for n in 0..self.n_rows() {
            let (z, w) = self.row(n);
            let wsum: f64 = w.iter().sum();
            if wsum == 0.0 {
                continue;
            }
            self.logits(theta, z, &mut s);
            let lse = log_sum_exp(&s);
            total += w.iter().zip(&s).map(|(wk, sk)| wk * (sk - lse)).sum::<f64>();
            for k in 1..self.n_classes {
                let p = (s[k] - lse).exp();
                let c = w[k] - wsum * p;
                if c != 0.0 {
                    for (g, zj) in grad[(k - 1) * d..k * d].iter_mut().zip(z) {
                        *g += c * zj;
                    }
                }
            }
        }
        (total - 0.5 * self.ridge * theta.iter().map(|v| v * v).sum::<f64>(), grad)
    }

    /// Negative Hessian (positive definite when `ridge > 0`).
    fn neg_hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let m = self.n_classes - 1;
        let np = m * d;
        let mut h = DMatrix::<f64>::zeros(np, np);
        let mut p = vec![0.0; self.n_classes];
        let mut zz = vec![0.0; d * d];
        for n in 0..self.n_rows() {
            let (z, w) = self.row(n);
            let wsum: f64 = w.iter().sum();
            if wsum == 0.0 {
                continue;
            }
            self.logits(theta, z, &mut p);
            softmax_in_place(&mut p);
            for a in 0..d {
                for b in a..d {
                    zz[a * d + b] = z[a] * z[b];
                }
            }
            for ka in 0..m {
                for kb in ka..m {
                    let pa = p[ka + 1];
                    let pb = p[kb + 1];
                    let c = wsum * (if ka == kb { pa } else { 0.0 } - pa * pb);
                    if c == 0.0 {
                        continue;
                    }
                    for a in 0..d {
                        for b in a..d {
                            h[(ka * d + a, kb * d + b)] += c * zz[a * d + b];
                        }
                    }
                }
            }
        }
        // mirror: fill the lower triangles of each block and the lower blocks
        for ka in 0..m {
            for kb in ka..m {
                for a in 0..d {
                    for b in a..d {
                        let v = h[(ka * d + a, kb * d + b)];
                        h[(ka * d + b, kb * d + a)] = v;
                    }
                }
            }
        }
        for r in 0..np {
            for c in 0..r {
                h[(r, c)] = h[(c, r)];
            }
        }
        for r in 0..np {
            h[(r, r)] += self.ridge;
        }
        h
    }

    /// Ascent from `start`; every accepted step increases the objective.
    pub fn maximize(&self, start: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
        if start.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: start.len(),
            });
        }
        if self.n_params() == 0 {
            return Ok(SolveReport {
                theta: Vec::new(),
                value: 0.0,
                start_value: 0.0,
                iterations: 0,
                grad_norm: 0.0,
            });
        }
        if self.n_params() <= cfg.newton_max_params {
            self.newton(start, cfg)
        } else {
            self.lbfgs(start, cfg)
        }
    }

    fn newton(&self, start: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
        let mut theta = start.to_vec();
        let (mut value, mut grad) = self.value_and_gradient(&theta);
        let start_value = value;
        let mut iterations = 0;
        while iterations < cfg.max_iter {
            let gnorm = norm(&grad);
            if gnorm < cfg.grad_tol {
                break;
            }
            iterations += 1;
            let h = self.neg_hessian(&theta);
            let direction = match h.cholesky() {
                Some(ch) => ch.solve(&DVector::from_column_slice(&grad)).as_slice().to_vec(),
                None => grad.clone(),
            };
            match line_search(|x| self.value(x), &theta, value, &grad, &direction) {
                Some((next, v)) => {
                    let stalled = v - value <= 1e-15 * value.abs().max(1.0);
                    theta = next;
                    let (nv, ng) = self.value_and_gradient(&theta);
                    value = nv;
                    grad = ng;
                    if stalled {
                        break;
                    }
                }
                None => break,
            }
        }
        Ok(SolveReport {
            grad_norm: norm(&grad),
            theta,
            value,
            start_value,
            iterations,
        })
    }

    fn lbfgs(&self, start: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
        const MEMORY: usize = 10;
        let mut theta = start.to_vec();
        let (mut value, mut grad) = self.value_and_gradient(&theta);
        let start_value = value;
        let mut s_hist: Vec<Vec<f64>> = Vec::new();
        let mut y_hist: Vec<Vec<f64>> = Vec::new();
        let mut iterations = 0;
        while iterations < cfg.max_iter {
            if norm(&grad) < cfg.grad_tol {
                break;
            }
            iterations += 1;
            // two-loop recursion on the negated objective; direction is an ascent direction
            let mut q = grad.clone();
            let mut alphas = Vec::with_capacity(s_hist.len());
            for (s, y) in s_hist.iter().zip(&y_hist).rev() {
                let rho = 1.0 / dot(y, s);
                let a = rho * dot(s, &q);
                for (qi, yi) in q.iter_mut().zip(y) {
                    *qi -= a * yi;
                }
                alphas.push((rho, a));
            }
            let gamma = match (s_hist.last(), y_hist.last()) {
                (Some(s), Some(y)) => dot(s, y) / dot(y, y),
                _ => 1.0 / (self.ridge.max(1e-8) + norm(&grad)).max(1.0),
            };
            for v in q.iter_mut() {
                *v *= gamma;
            }
            for ((s, y), (rho, a)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
                let b = rho * dot(y, &q);
                for (qi, si) in q.iter_mut().zip(s) {
                    *qi += (a - b) * si;
                }
            }
            let direction = if dot(&q, &grad) > 0.0 { q } else { grad.clone() };
            let Some((next, _)) = line_search(|x| self.value(x), &theta, value, &grad, &direction) else {
                break;
            };
            let (nv, ng) = self.value_and_gradient(&next);
            let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
            // y for the negated objective
            let y: Vec<f64> = grad.iter().zip(&ng).map(|(a, b)| a - b).collect();
            let stalled = nv - value <= 1e-15 * value.abs().max(1.0);
            if dot(&s, &y) > 1e-12 {
                s_hist.push(s);
                y_hist.push(y);
                if s_hist.len() > MEMORY {
                    s_hist.remove(0);
                    y_hist.remove(0);
                }
            }
            theta = next;
            value = nv;
            grad = ng;
            if stalled {
                break;
            }
        }
        Ok(SolveReport {
            grad_norm: norm(&grad),
            theta,
            value,
            start_value,
            iterations,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Armijo backtracking along an ascent direction. Returns `None` when no
/// step increases the objective.
fn line_search<F: Fn(&[f64]) -> f64>(
    f: F,
    x: &[f64],
    fx: f64,
    grad: &[f64],
    direction: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let slope = dot(grad, direction);
    if !(slope > 0.0) {
        return None;
    }
    let mut step = 1.0;
    let mut candidate = vec![0.0; x.len()];
    for _ in 0..60 {
        for ((c, xi), di) in candidate.iter_mut().zip(x).zip(direction) {
            *c = xi + step * di;
        }
        let v = f(&candidate);
        if v.is_finite() && v >= fx + 1e-4 * step * slope {
            return Some((candidate, v));
        }
        step *= 0.5;
    }
    None
}

/// `sum_n w_n log N(r_n; theta . z_n, sigma^2) - ridge |theta|^2 / (2 sigma^2)`.
#[derive(Debug, Clone, Copy)]
pub struct WeightedGaussianRegression<'a> {
    pub features: &'a [f64],
    pub dim: usize,
    pub targets: &'a [f64],
    pub weights: &'a [f64],
    pub ridge: f64,
}

impl<'a> WeightedGaussianRegression<'a> {
    pub fn new(
        features: &'a [f64],
        dim: usize,
        targets: &'a [f64],
        weights: &'a [f64],
        ridge: f64,
    ) -> Result<Self> {
        if dim == 0 || features.len() != targets.len() * dim || weights.len() != targets.len() {
            return Err(Error::InvalidInput("malformed regression design".into()));
        }
        Ok(WeightedGaussianRegression {
            features,
            dim,
            targets,
            weights,
            ridge,
        })
    }

    fn z(&self, n: usize) -> &[f64] {
        &self.features[n * self.dim..(n + 1) * self.dim]
    }

    pub fn value(&self, theta: &[f64], sigma: f64) -> f64 {
        let mut total = 0.0;
        for (n, (&r, &w)) in self.targets.iter().zip(self.weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let u = (r - dot(theta, self.z(n))) / sigma;
            total += w * (-LN_SQRT_2PI - sigma.ln() - 0.5 * u * u);
        }
        total - self.ridge * theta.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma * sigma)
    }

    /// Gradient with respect to `(theta, sigma)`; the last entry is `d/d sigma`.
    pub fn gradient(&self, theta: &[f64], sigma: f64) -> Vec<f64> {
        let d = self.dim;
        let s2 = sigma * sigma;
        let mut g: Vec<f64> = theta.iter().map(|v| -self.ridge * v / s2).collect();
        let mut gs = 0.0;
        for (n, (&r, &w)) in self.targets.iter().zip(self.weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let z = self.z(n);
            let e = r - dot(theta, z);
            for (gj, zj) in g.iter_mut().zip(z) {
                *gj += w * e * zj / s2;
            }
            gs += w * (-1.0 / sigma + e * e / (s2 * sigma));
        }
        gs += self.ridge * theta.iter().map(|v| v * v).sum::<f64>() / (s2 * sigma);
        g.truncate(d);
        g.push(gs);
        g
    }

    /// Closed-form maximiser with `sigma >= sigma_min`. The returned sigma is
    /// `None` when the total weight is zero (sigma is then unidentified).
    pub fn solve(&self, sigma_min: f64) -> Result<(Vec<f64>, Option<f64>)> {
        let d = self.dim;
        let mut a = DMatrix::<f64>::zeros(d, d);
        let mut b = DVector::<f64>::zeros(d);
        let mut wsum = 0.0;
        for (n, (&r, &w)) in self.targets.iter().zip(self.weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            wsum += w;
            let z = self.z(n);
            for i in 0..d {
                b[i] += w * z[i] * r;
                for j in i..d {
                    a[(i, j)] += w * z[i] * z[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                a[(i, j)] = a[(j, i)];
            }
            a[(i, i)] += self.ridge;
        }
        let theta = a
            .cholesky()
            .ok_or_else(|| Error::Singular("weighted duration regression".into()))?
            .solve(&b)
            .as_slice()
            .to_vec();
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("weighted duration regression".into()));
        }
        if wsum <= 1e-300 {
            return Ok((theta, None));
        }
        let mut sse = 0.0;
        for (n, (&r, &w)) in self.targets.iter().zip(self.weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let e = r - dot(&theta, self.z(n));
            sse += w * e * e;
        }
        sse += self.ridge * theta.iter().map(|v| v * v).sum::<f64>();
        let sigma = (sse / wsum).sqrt().max(sigma_min);
        Ok((theta, Some(sigma)))
    }
}
