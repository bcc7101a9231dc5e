//! EM training: M-step solves and the restart loop.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iohmm::inference::{e_step_encoded, SufficientStats};
use crate::iohmm::optim::{SolverConfig, WeightedGaussianRegression, WeightedLogit};
use crate::iohmm::params::{EncodedSequence, IOHMMParams};
use crate::pipeline::context::FeatureSchema;
use crate::seed::derive_seed;
use crate::types::{LocationVocab, UserHistory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when the relative log-likelihood improvement falls below this.
    pub tolerance: f64,
    pub restarts: usize,
    pub ridge_logit: f64,
    pub ridge_duration: f64,
    pub sigma_min: f64,
    /// Standard deviation of the random initial logit coefficients.
    pub init_scale: f64,
    pub solver: SolverConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 100,
            tolerance: 1e-6,
            restarts: 3,
            ridge_logit: 1e-3,
            ridge_duration: 1e-6,
            sigma_min: 0.1,
            init_scale: 0.1,
            solver: SolverConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iter >= 1
            && self.tolerance >= 0.0
            && self.restarts >= 1
            && self.ridge_logit > 0.0
            && self.ridge_duration >= 0.0
            && self.sigma_min > 0.0
            && self.init_scale >= 0.0
            && self.solver.max_iter >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid EM settings {self:?}")))
        }
    }
}

/// Trace of one EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    /// Observed-data log-likelihood at the start of each iteration, plus the final evaluation.
    pub log_likelihood: Vec<f64>,
    /// Expected complete-data log-likelihood after each M-step.
    pub q_values: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final log-likelihood of every restart; the returned model is the best.
    pub restart_log_likelihoods: Vec<f64>,
    pub best_restart: usize,
}

impl EmReport {
    /// Largest drop between consecutive log-likelihood values (0 when monotone).
    pub fn max_decrease(&self) -> f64 {
        self.log_likelihood
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }

    /// Log-likelihood of the returned parameters (the best evaluation).
    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihood.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Training sequences flattened into the designs the M-step needs.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub dim: usize,
    pub sequences: Vec<EncodedSequence>,
    initial_features: Vec<f64>,
    transition_features: Vec<f64>,
    all_features: Vec<f64>,
    durations: Vec<f64>,
    locations: Vec<usize>,
}

impl TrainingData {
    pub fn new(sequences: Vec<EncodedSequence>, dim: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InsufficientData("no training sequences".into()));
        }
        let mut data = TrainingData {
            dim,
            initial_features: Vec::new(),
            transition_features: Vec::new(),
            all_features: Vec::new(),
            durations: Vec::new(),
            locations: Vec::new(),
            sequences: Vec::new(),
        };
        for s in &sequences {
            if s.dim != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: s.dim });
            }
            data.initial_features.extend_from_slice(s.z(0));
            for t in 1..s.len() {
                data.transition_features.extend_from_slice(s.z(t));
            }
            data.all_features.extend_from_slice(&s.contexts);
            data.durations.extend_from_slice(&s.durations);
            data.locations.extend_from_slice(&s.locations);
        }
        data.sequences = sequences;
        Ok(data)
    }

    pub fn from_histories(histories: &[&UserHistory], vocab: &LocationVocab, dim: usize) -> Result<Self> {
        let seqs = histories
            .iter()
            .flat_map(|h| h.sequences.iter())
            .map(|s| EncodedSequence::encode(s, vocab, dim))
            .collect::<Result<Vec<_>>>()?;
        TrainingData::new(seqs, dim)
    }

    pub fn n_activities(&self) -> usize {
        self.durations.len()
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }
}

fn free_rows(block: &[f64], dim: usize) -> Vec<f64> {
    block[dim..].to_vec()
}

fn store_free_rows(block: &mut [f64], dim: usize, theta: &[f64]) {
    block[..dim].iter_mut().for_each(|v| *v = 0.0);
    block[dim..].copy_from_slice(theta);
}

/// Weight designs of the three M-step components.
struct Weights {
    initial: Vec<f64>,
    /// Per source state, `n_transitions x N`.
    transition: Vec<Vec<f64>>,
    /// Per state, posterior weight of every activity.
    state: Vec<Vec<f64>>,
}

fn collect_weights(stats: &SufficientStats, n: usize) -> Weights {
    let mut initial = Vec::new();
    let mut transition = vec![Vec::new(); n];
    let mut state = vec![Vec::new(); n];
    for fb in &stats.results {
        initial.extend_from_slice(fb.gamma_row(0));
        for t in 1..fb.len() {
            let slab = fb.xi_slab(t);
            for (i, w) in transition.iter_mut().enumerate() {
                w.extend_from_slice(&slab[i * n..(i + 1) * n]);
            }
        }
        for t in 0..fb.len() {
            for (i, w) in state.iter_mut().enumerate() {
                w.push(fb.gamma_row(t)[i]);
            }
        }
    }
    Weights {
        initial,
        transition,
        state,
    }
}

/// The weighted objectives of one M-step, built from E-step posteriors.
pub struct MStepDesigns<'a> {
    data: &'a TrainingData,
    weights: Weights,
    /// Per state, `n_activities x n_locations` soft targets.
    location_weights: Vec<Vec<f64>>,
    n_states: usize,
    n_locations: usize,
    ridge_logit: f64,
    ridge_duration: f64,
}

impl<'a> MStepDesigns<'a> {
    pub fn new(stats: &SufficientStats, data: &'a TrainingData, n_states: usize, n_locations: usize, cfg: &EmConfig) -> Self {
        let weights = collect_weights(stats, n_states);
        let location_weights = weights
            .state
            .iter()
            .map(|gamma| {
                let mut w = vec![0.0; data.n_activities() * n_locations];
                for (k, (&g, &l)) in gamma.iter().zip(&data.locations).enumerate() {
                    w[k * n_locations + l] = g;
                }
                w
            })
            .collect();
        MStepDesigns {
            data,
            weights,
            location_weights,
            n_states,
            n_locations,
            ridge_logit: cfg.ridge_logit,
            ridge_duration: cfg.ridge_duration,
        }
    }

    pub fn initial(&self) -> Result<WeightedLogit<'_>> {
        WeightedLogit::new(&self.data.initial_features, self.data.dim, &self.weights.initial, self.n_states, self.ridge_logit)
    }

    /// Transition objective of source state `i`; `None` when no sequence has two steps.
    pub fn transition(&self, i: usize) -> Result<Option<WeightedLogit<'_>>> {
        if self.data.transition_features.is_empty() {
            return Ok(None);
        }
        WeightedLogit::new(
            &self.data.transition_features,
            self.data.dim,
            &self.weights.transition[i],
            self.n_states,
            self.ridge_logit,
        )
        .map(Some)
    }

    /// Location objective of state `i`; `None` for a single-location vocabulary.
    pub fn location(&self, i: usize) -> Result<Option<WeightedLogit<'_>>> {
        if self.n_locations < 2 {
            return Ok(None);
        }
        WeightedLogit::new(
            &self.data.all_features,
            self.data.dim,
            &self.location_weights[i],
            self.n_locations,
            self.ridge_logit,
        )
        .map(Some)
    }

    pub fn duration(&self, i: usize) -> Result<WeightedGaussianRegression<'_>> {
        WeightedGaussianRegression::new(
            &self.data.all_features,
            self.data.dim,
            &self.data.durations,
            &self.weights.state[i],
            self.ridge_duration,
        )
    }
}

/// Largest step `old + s (new - old)`, `s` in `1, 1/2, ...`, that does not
/// lower `value`; `old` itself when none does. The ridge makes the solver's
/// optimum a proposal only: accepting it unconditionally could lower the
/// unpenalised expected log-likelihood and with it the observed likelihood.
fn ascent_step(value: impl Fn(&[f64]) -> f64, old: &[f64], new: &[f64]) -> Vec<f64> {
    let base = value(old);
    let mut s = 1.0;
    for _ in 0..40 {
        let x: Vec<f64> = old.iter().zip(new).map(|(a, b)| a + s * (b - a)).collect();
        if value(&x) >= base {
            return x;
        }
        s *= 0.5;
    }
    old.to_vec()
}

/// Maximises the expected complete-data log-likelihood component by component,
/// warm-started from `current`. Each component moves towards its ridge-penalised
/// optimum only as far as its unpenalised value does not decrease.
pub fn m_step(
    stats: &SufficientStats,
    data: &TrainingData,
    current: &IOHMMParams,
    cfg: &EmConfig,
) -> Result<IOHMMParams> {
    let n = current.n_states;
    let d = current.dim;
    let designs = MStepDesigns::new(stats, data, n, current.n_locations(), cfg);
    let mut next = current.clone();

    let problem = designs.initial()?;
    let start = free_rows(&current.theta_in, d);
    let sol = problem.maximize(&start, &cfg.solver)?;
    let theta = ascent_step(|x| problem.unpenalized_value(x), &start, &sol.theta);
    store_free_rows(&mut next.theta_in, d, &theta);
    for i in 0..n {
        if let Some(problem) = designs.transition(i)? {
            let start = free_rows(current.theta_tr_block(i), d);
            let sol = problem.maximize(&start, &cfg.solver)?;
            let theta = ascent_step(|x| problem.unpenalized_value(x), &start, &sol.theta);
            store_free_rows(next.theta_tr_block_mut(i), d, &theta);
        }
        if let Some(problem) = designs.location(i)? {
            let start = free_rows(current.theta_emq_block(i), d);
            let sol = problem.maximize(&start, &cfg.solver)?;
            let theta = ascent_step(|x| problem.unpenalized_value(x), &start, &sol.theta);
            store_free_rows(next.theta_emq_block_mut(i), d, &theta);
        }
        let problem = designs.duration(i)?;
        if let (theta, Some(sigma)) = problem.solve(cfg.sigma_min)? {
            let mut start = current.theta_emr_row(i).to_vec();
            start.push(current.sigma[i]);
            let mut proposal = theta;
            proposal.push(sigma);
            let unpenalized = WeightedGaussianRegression { ridge: 0.0, ..problem };
            let x = ascent_step(|x| unpenalized.value(&x[..d], x[d]), &start, &proposal);
            next.theta_emr_row_mut(i).copy_from_slice(&x[..d]);
            next.sigma[i] = x[d];
        }
    }
    for block in [&next.theta_in, &next.theta_tr, &next.theta_emq, &next.theta_emr, &next.sigma] {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("M-step output".into()));
        }
    }
    Ok(next)
}

/// Expected complete-data log-likelihood of `params` under the posteriors in `stats`.
pub fn expected_log_likelihood(stats: &SufficientStats, data: &TrainingData, params: &IOHMMParams) -> Result<f64> {
    let n = params.n_states;
    let mut q = 0.0;
    for (fb, seq) in stats.results.iter().zip(&data.sequences) {
        let pi = params.initial_prob(seq.z(0))?;
        q += fb.gamma_row(0).iter().zip(&pi).map(|(g, p)| g * p.ln()).sum::<f64>();
        for t in 1..seq.len() {
            let slab = fb.xi_slab(t);
            for i in 0..n {
                let row = params.transition_prob(i, seq.z(t))?;
                q += (0..n).map(|j| slab[i * n + j] * row[j].ln()).sum::<f64>();
            }
        }
        for t in 0..seq.len() {
            let z = seq.z(t);
            for i in 0..n {
                let g = fb.gamma_row(t)[i];
                if g > 0.0 {
                    q += g
                        * (params.location_logprob(seq.locations[t], i, z)
                            + params.duration_logdensity(seq.durations[t], i, z));
                }
            }
        }
    }
    Ok(q)
}

/// Random starting point: logit coefficients from `N(0, init_scale^2)`, each
/// state's duration intercept at a distinct randomly drawn training duration,
/// remaining duration coefficients from the same normal, and every sigma at
/// the pooled standard deviation.
pub fn initial_params(
    n_states: usize,
    schema: &FeatureSchema,
    vocab: &LocationVocab,
    data: &TrainingData,
    cfg: &EmConfig,
    seed: u64,
) -> Result<IOHMMParams> {
    let mut p = IOHMMParams::zeros(n_states, schema.clone(), vocab.clone())?;
    let d = p.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_scale).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut draw = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
    draw(&mut p.theta_in[d..]);
    for i in 0..n_states {
        draw(&mut p.theta_tr_block_mut(i)[d..]);
        draw(&mut p.theta_emq_block_mut(i)[d..]);
        draw(p.theta_emr_row_mut(i));
    }
    let durations = data.durations();
    let mean = durations.iter().sum::<f64>() / durations.len() as f64;
    let sd = (durations.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / durations.len() as f64).sqrt();
    let mut sorted = durations.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut picks: Vec<f64> = Vec::with_capacity(n_states);
    while picks.len() < n_states {
        let v = sorted[rng.random_range(0..sorted.len())];
        if !picks.contains(&v) || picks.len() >= sorted.len() {
            picks.push(v);
        }
    }
    for (i, v) in picks.into_iter().enumerate() {
        p.theta_emr_row_mut(i)[0] = v;
        p.sigma[i] = sd.max(cfg.sigma_min);
    }
    Ok(p)
}

/// One EM run from a given starting point.
pub fn run_em(data: &TrainingData, start: IOHMMParams, cfg: &EmConfig) -> Result<(IOHMMParams, EmReport)> {
    let mut params = start;
    let mut lls = Vec::new();
    let mut qs = Vec::new();
    let mut best: Option<(f64, IOHMMParams)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let wrap = |iteration: usize| move |e: Error| Error::Em {
        iteration,
        source: Box::new(e),
    };
    loop {
        let stats = e_step_encoded(&data.sequences, &params).map_err(wrap(iterations))?;
        let ll = stats.log_likelihood;
        if let Some(&prev) = lls.last() {
            let prev: f64 = prev;
            if (ll - prev) <= cfg.tolerance * prev.abs() {
                converged = true;
            }
        }
        lls.push(ll);
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, params.clone()));
        }
        if converged || iterations >= cfg.max_iter {
            break;
        }
        iterations += 1;
        let next = m_step(&stats, data, &params, cfg).map_err(wrap(iterations))?;
        qs.push(expected_log_likelihood(&stats, data, &next).map_err(wrap(iterations))?);
        params = next;
        debug!("EM iteration {iterations}: log-likelihood {ll}");
    }
    let (_, params) = best.expect("at least one evaluation");
    Ok((
        params,
        EmReport {
            log_likelihood: lls,
            q_values: qs,
            iterations,
            converged,
            restart_log_likelihoods: Vec::new(),
            best_restart: 0,
        },
    ))
}

/// Fits an `n_states` model to already-encoded training data.
pub fn fit_encoded(
    data: &TrainingData,
    n_states: usize,
    schema: &FeatureSchema,
    vocab: &LocationVocab,
    seed: u64,
    cfg: &EmConfig,
) -> Result<(IOHMMParams, EmReport)> {
    cfg.validate()?;
    if n_states == 0 {
        return Err(Error::InvalidInput("n_states must be at least 1".into()));
    }
    let mut best: Option<(IOHMMParams, EmReport)> = None;
    let mut finals = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let start = initial_params(n_states, schema, vocab, data, cfg, derive_seed(seed, "em-init", r as u64))?;
        let (params, mut report) = run_em(data, start, cfg)?;
        let ll = report.final_log_likelihood();
        finals.push(ll);
        report.best_restart = r;
        if best
            .as_ref()
            .is_none_or(|(_, b)| ll > b.final_log_likelihood())
        {
            best = Some((params, report));
        }
    }
    let (params, mut report) = best.expect("restarts >= 1");
    report.restart_log_likelihoods = finals;
    Ok((params, report))
}

/// Fits a model with `n_states` hidden states to a user's training days.
pub fn fit(
    history: &UserHistory,
    n_states: usize,
    schema: &FeatureSchema,
    seed: u64,
    cfg: &EmConfig,
) -> Result<(IOHMMParams, EmReport)> {
    if history.sequences.is_empty() {
        return Err(Error::InsufficientData(format!("user {} has no training days", history.user)));
    }
    let data = TrainingData::from_histories(&[history], &history.vocab, schema.dim())?;
    fit_encoded(&data, n_states, schema, &history.vocab, seed, cfg)
}
