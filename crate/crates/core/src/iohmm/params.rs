//! Parameter blocks and the three probability functions of the model.
//!
//! Every multinomial logit block keeps its reference row (state 0, or
//! location 0) pinned at zero so the softmax is identified.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::context::FeatureSchema;
use crate::types::{ActivitySequence, LocationVocab, StationId};

pub const MODEL_FORMAT_VERSION: u32 = 1;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// All coefficients of one user's model. Blocks are flat and row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IOHMMParams {
    pub format_version: u32,
    pub n_states: usize,
    pub dim: usize,
    pub schema: FeatureSchema,
    pub vocab: LocationVocab,
    /// `n_states x dim`; row 0 is zero.
    pub theta_in: Vec<f64>,
    /// `n_states x n_states x dim`; `[i][0]` is zero for every source `i`.
    pub theta_tr: Vec<f64>,
    /// `n_states x n_locations x dim`; `[i][0]` is zero for every state `i`.
    pub theta_emq: Vec<f64>,
    /// `n_states x dim`.
    pub theta_emr: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-density of `N(mean, sigma^2)` at `x`.
pub fn gaussian_logpdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let u = (x - mean) / sigma;
    -LN_SQRT_2PI - sigma.ln() - 0.5 * u * u
}

/// Softmax over `rows` logit rows of width `z.len()` stored contiguously in `block`.
fn logit_probs(block: &[f64], rows: usize, z: &[f64]) -> Vec<f64> {
    let d = z.len();
    let mut p: Vec<f64> = (0..rows).map(|k| dot(&block[k * d..(k + 1) * d], z)).collect();
    softmax_in_place(&mut p);
    p
}

impl IOHMMParams {
    /// All-zero parameters with unit standard deviations.
    pub fn zeros(n_states: usize, schema: FeatureSchema, vocab: LocationVocab) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidInput("a model needs at least one state".into()));
        }
        if vocab.is_empty() {
            return Err(Error::InvalidInput("empty location vocabulary".into()));
        }
        let dim = schema.dim();
        let n_loc = vocab.len();
        Ok(IOHMMParams {
            format_version: MODEL_FORMAT_VERSION,
            n_states,
            dim,
            schema,
            vocab,
            theta_in: vec![0.0; n_states * dim],
            theta_tr: vec![0.0; n_states * n_states * dim],
            theta_emq: vec![0.0; n_states * n_loc * dim],
            theta_emr: vec![0.0; n_states * dim],
            sigma: vec![1.0; n_states],
        })
    }

    pub fn n_locations(&self) -> usize {
        self.vocab.len()
    }

    pub fn theta_in_row(&self, j: usize) -> &[f64] {
        &self.theta_in[j * self.dim..(j + 1) * self.dim]
    }

    pub fn theta_in_row_mut(&mut self, j: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.theta_in[j * d..(j + 1) * d]
    }

    pub fn theta_tr_row(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * self.n_states + j) * self.dim;
        &self.theta_tr[off..off + self.dim]
    }

    pub fn theta_tr_row_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let off = (i * self.n_states + j) * self.dim;
        let d = self.dim;
        &mut self.theta_tr[off..off + d]
    }

    /// The `n_states x dim` transition block of source state `i`.
    pub fn theta_tr_block(&self, i: usize) -> &[f64] {
        let w = self.n_states * self.dim;
        &self.theta_tr[i * w..(i + 1) * w]
    }

    pub fn theta_tr_block_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.n_states * self.dim;
        &mut self.theta_tr[i * w..(i + 1) * w]
    }

    pub fn theta_emq_row(&self, i: usize, l: usize) -> &[f64] {
        let off = (i * self.n_locations() + l) * self.dim;
        &self.theta_emq[off..off + self.dim]
    }

    pub fn theta_emq_row_mut(&mut self, i: usize, l: usize) -> &mut [f64] {
        let off = (i * self.n_locations() + l) * self.dim;
        let d = self.dim;
        &mut self.theta_emq[off..off + d]
    }

    /// The `n_locations x dim` location block of state `i`.
    pub fn theta_emq_block(&self, i: usize) -> &[f64] {
        let w = self.n_locations() * self.dim;
        &self.theta_emq[i * w..(i + 1) * w]
    }

    pub fn theta_emq_block_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.n_locations() * self.dim;
        &mut self.theta_emq[i * w..(i + 1) * w]
    }

    pub fn theta_emr_row(&self, i: usize) -> &[f64] {
        &self.theta_emr[i * self.dim..(i + 1) * self.dim]
    }

    pub fn theta_emr_row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.theta_emr[i * d..(i + 1) * d]
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// `P(A_1 = . | z)`.
    pub fn initial_prob(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        Ok(logit_probs(&self.theta_in, self.n_states, z))
    }

    /// `P(A_t = . | A_{t-1} = i, z)`.
    pub fn transition_prob(&self, i: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        if i >= self.n_states {
            return Err(Error::InvalidInput(format!("state {i} out of range")));
        }
        Ok(logit_probs(self.theta_tr_block(i), self.n_states, z))
    }

    /// `P(q = . | A = i, z)` over the vocabulary.
    pub fn location_prob(&self, i: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        if i >= self.n_states {
            return Err(Error::InvalidInput(format!("state {i} out of range")));
        }
        Ok(logit_probs(self.theta_emq_block(i), self.n_locations(), z))
    }

    /// Mean duration of state `i` under context `z`.
    pub fn duration_mean(&self, i: usize, z: &[f64]) -> f64 {
        dot(self.theta_emr_row(i), z)
    }

    pub fn duration_logdensity(&self, r: f64, i: usize, z: &[f64]) -> f64 {
        gaussian_logpdf(r, self.duration_mean(i, z), self.sigma[i])
    }

    pub fn location_logprob(&self, loc: usize, i: usize, z: &[f64]) -> f64 {
        let block = self.theta_emq_block(i);
        let d = self.dim;
        let logits: Vec<f64> = (0..self.n_locations())
            .map(|l| dot(&block[l * d..(l + 1) * d], z))
            .collect();
        logits[loc] - log_sum_exp(&logits)
    }

    /// `log P(q | i, z) + log N(r; theta_emr_i . z, sigma_i^2)`.
    pub fn emission_logdensity(&self, q: &StationId, r: f64, i: usize, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        if !r.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite duration {r}")));
        }
        let loc = self.vocab.index_of(q)?;
        Ok(self.location_logprob(loc, i, z) + self.duration_logdensity(r, i, z))
    }

    /// Checks shapes, finiteness, reference rows and the standard-deviation floor.
    pub fn validate(&self, sigma_min: f64) -> Result<()> {
        let (n, d, l) = (self.n_states, self.dim, self.n_locations());
        if n == 0 || l == 0 {
            return Err(Error::InvalidInput("empty state space or vocabulary".into()));
        }
        if d != self.schema.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.schema.dim(),
                got: d,
            });
        }
        let shapes = [
            ("theta_in", self.theta_in.len(), n * d),
            ("theta_tr", self.theta_tr.len(), n * n * d),
            ("theta_emq", self.theta_emq.len(), n * l * d),
            ("theta_emr", self.theta_emr.len(), n * d),
            ("sigma", self.sigma.len(), n),
        ];
        for (name, got, expected) in shapes {
            if got != expected {
                return Err(Error::InvalidInput(format!(
                    "{name} has {got} entries, expected {expected}"
                )));
            }
        }
        for (name, block) in [
            ("theta_in", &self.theta_in),
            ("theta_tr", &self.theta_tr),
            ("theta_emq", &self.theta_emq),
            ("theta_emr", &self.theta_emr),
            ("sigma", &self.sigma),
        ] {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if self.sigma.iter().any(|&s| s < sigma_min) {
            return Err(Error::InvalidInput(format!(
                "standard deviation below floor {sigma_min}"
            )));
        }
        let zero = |row: &[f64]| row.iter().all(|&v| v == 0.0);
        if !zero(self.theta_in_row(0))
            || (0..n).any(|i| !zero(self.theta_tr_row(i, 0)) || !zero(self.theta_emq_row(i, 0)))
        {
            return Err(Error::InvalidInput("reference logit row is not zero".into()));
        }
        Ok(())
    }

    /// Parameters with state labels reordered: new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> IOHMMParams {
        let n = self.n_states;
        assert_eq!(perm.len(), n);
        let mut out = self.clone();
        // logits are only identified up to a per-row shift; re-reference so
        // the new state 0 row is zero.
        let d = self.dim;
        let ref_in = self.theta_in_row(perm[0]).to_vec();
        for k in 0..n {
            let src = self.theta_in_row(perm[k]);
            for (o, (s, r)) in out.theta_in_row_mut(k).iter_mut().zip(src.iter().zip(&ref_in)) {
                *o = s - r;
            }
        }
        for a in 0..n {
            let ref_tr = self.theta_tr_row(perm[a], perm[0]).to_vec();
            for b in 0..n {
                let src = self.theta_tr_row(perm[a], perm[b]).to_vec();
                for (o, (s, r)) in out.theta_tr_row_mut(a, b).iter_mut().zip(src.iter().zip(&ref_tr)) {
                    *o = s - r;
                }
            }
            let l = self.n_locations();
            let src_q = self.theta_emq_block(perm[a]).to_vec();
            out.theta_emq_block_mut(a).copy_from_slice(&src_q[..l * d]);
            let src_r = self.theta_emr_row(perm[a]).to_vec();
            out.theta_emr_row_mut(a).copy_from_slice(&src_r);
            out.sigma[a] = self.sigma[perm[a]];
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: IOHMMParams = serde_json::from_str(text)?;
        if p.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model format version {}",
                p.format_version
            )));
        }
        p.validate(0.0)?;
        Ok(p)
    }
}

/// One sequence with locations resolved to vocabulary indices and contexts
/// flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub dim: usize,
    pub contexts: Vec<f64>,
    pub locations: Vec<usize>,
    pub durations: Vec<f64>,
}

impl EncodedSequence {
    pub fn encode(seq: &ActivitySequence, vocab: &LocationVocab, dim: usize) -> Result<Self> {
        if seq.is_empty() {
            return Err(Error::InvalidInput(format!("day {} has no activities", seq.day)));
        }
        if seq.contexts.len() != seq.activities.len() {
            return Err(Error::InvalidInput(format!(
                "day {}: {} contexts for {} activities",
                seq.day,
                seq.contexts.len(),
                seq.activities.len()
            )));
        }
        let mut contexts = Vec::with_capacity(seq.len() * dim);
        for z in &seq.contexts {
            if z.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: z.len() });
            }
            if z.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("context of day {}", seq.day)));
            }
            contexts.extend_from_slice(z.as_slice());
        }
        let locations = seq
            .activities
            .iter()
            .map(|a| vocab.index_of(&a.end_location))
            .collect::<Result<_>>()?;
        let durations: Vec<f64> = seq.activities.iter().map(|a| a.duration).collect();
        if durations.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("duration on day {}", seq.day)));
        }
        Ok(EncodedSequence {
            dim,
            contexts,
            locations,
            durations,
        })
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    /// Context of 0-based step `t`.
    pub fn z(&self, t: usize) -> &[f64] {
        &self.contexts[t * self.dim..(t + 1) * self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(names: &[&str]) -> LocationVocab {
        LocationVocab::from_stations(names.iter().map(|s| StationId::new(*s).unwrap()))
    }

    fn params(n: usize, locs: &[&str]) -> IOHMMParams {
        IOHMMParams::zeros(n, FeatureSchema::intercept_only(), vocab(locs)).unwrap()
    }

    #[test]
    fn zero_logits_are_uniform() {
        let p = params(3, &["A"]);
        for v in p.initial_prob(&[1.0]).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for i in 0..3 {
            for v in p.transition_prob(i, &[1.0]).unwrap() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_state_initial_is_one() {
        let p = params(1, &["A"]);
        assert_eq!(p.initial_prob(&[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn two_state_logit_gap_ln3() {
        let mut p = params(2, &["A"]);
        p.theta_in[1] = 3f64.ln();
        let pi = p.initial_prob(&[1.0]).unwrap();
        assert!((pi[0] - 0.25).abs() < 1e-15);
        assert!((pi[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn two_state_transition_gap_ln9() {
        let mut p = params(2, &["A"]);
        p.theta_tr_row_mut(1, 1)[0] = 9f64.ln();
        let row = p.transition_prob(1, &[1.0]).unwrap();
        assert!((row[0] - 0.1).abs() < 1e-15);
        assert!((row[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn emission_at_mode_and_single_location() {
        let mut p = params(1, &["A"]);
        p.theta_emr[0] = 4.0;
        p.sigma[0] = 0.7;
        let a = StationId::new("A").unwrap();
        let lp = p.emission_logdensity(&a, 4.0, 0, &[1.0]).unwrap();
        assert!((lp + ((2.0 * std::f64::consts::PI).sqrt() * 0.7).ln()).abs() < 1e-14);
        assert_eq!(p.location_logprob(0, 0, &[1.0]), 0.0);
        assert!(p.emission_logdensity(&StationId::new("Z").unwrap(), 1.0, 0, &[1.0]).is_err());
        assert!(p.initial_prob(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn two_location_unit_sigma_reference() {
        let schema = FeatureSchema::calendar_schema();
        let d = schema.dim();
        let mut p = IOHMMParams::zeros(2, schema, vocab(&["A", "B"])).unwrap();
        let z: Vec<f64> = (0..d).map(|k| if k == 0 { 1.0 } else { 0.1 * k as f64 }).collect();
        for k in 0..d {
            p.theta_emq_row_mut(1, 1)[k] = 0.05 * (k as f64 - 3.0);
            p.theta_emr_row_mut(1)[k] = 0.3 * k as f64 + 1.0;
        }
        p.sigma[1] = 1.0;
        // reference calculation by hand
        let s: f64 = (0..d).map(|k| 0.05 * (k as f64 - 3.0) * z[k]).sum();
        let pb = s.exp() / (1.0 + s.exp());
        let mean: f64 = (0..d).map(|k| (0.3 * k as f64 + 1.0) * z[k]).sum();
        let r = 5.5;
        let dens = (-(r - mean) * (r - mean) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expected = (pb * dens).ln();
        let got = p.emission_logdensity(&StationId::new("B").unwrap(), r, 1, &z).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut p = params(2, &["A", "B"]);
        p.theta_emr[1] = 2.5;
        let text = p.to_json().unwrap();
        let back = IOHMMParams::from_json(&text).unwrap();
        assert_eq!(back, p);
        p.theta_in[0] = 1.0;
        assert!(p.validate(0.1).is_err());
    }
}
