//! Reference computations for the test suites. Everything here is evaluated
//! straight from the parameter arrays by enumeration or finite differences,
//! without calling the library's probability or inference code.

use mobility_iohmm::iohmm::IOHMMParams;
use mobility_iohmm::pipeline::context::{Feature, FeatureSchema};
use mobility_iohmm::types::{ActivityRecord, ActivitySequence, ClockTime, ContextVector, LocationVocab, StationId};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A schema of dimension `d` (1 to 5) whose first column is the intercept.
pub fn schema_of_dim(d: usize) -> FeatureSchema {
    let all = [
        Feature::Intercept,
        Feature::PrevEndTime,
        Feature::ActivityIndex,
        Feature::Rainy,
        Feature::PublicHoliday,
    ];
    assert!((1..=all.len()).contains(&d), "dimension {d} not supported");
    FeatureSchema::new(all[..d].to_vec()).expect("valid schema")
}

pub fn vocab_of(n: usize) -> LocationVocab {
    LocationVocab::from_stations((0..n).map(|i| StationId::new(format!("L{i}")).expect("non-empty")))
}

/// Parameters with every free coefficient drawn from `N(0, scale^2)` and
/// sigmas uniform in `[0.5, 2]`.
pub fn random_params<R: Rng>(rng: &mut R, n: usize, l: usize, d: usize, scale: f64) -> IOHMMParams {
    let mut p = IOHMMParams::zeros(n, schema_of_dim(d), vocab_of(l)).expect("valid shape");
    let normal = Normal::new(0.0, scale).expect("valid scale");
    let mut fill = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = normal.sample(rng));
    fill(&mut p.theta_in[d..]);
    for i in 0..n {
        fill(&mut p.theta_tr_block_mut(i)[d..]);
        fill(&mut p.theta_emq_block_mut(i)[d..]);
        fill(p.theta_emr_row_mut(i));
    }
    for s in p.sigma.iter_mut() {
        *s = rng.random_range(0.5..2.0);
    }
    p
}

/// A day of `t` activities with random locations, durations and contexts
/// (first context entry fixed at 1).
pub fn random_sequence<R: Rng>(rng: &mut R, params: &IOHMMParams, t: usize) -> ActivitySequence {
    let l = params.vocab.len();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    ActivitySequence {
        user: "u".into(),
        day: "d".into(),
        activities: (0..t)
            .map(|_| ActivityRecord {
                start_location: StationId::null(),
                end_location: params.vocab.station(rng.random_range(0..l)).clone(),
                duration: rng.random_range(0.0..6.0),
                start_time: ClockTime::new(0.0).expect("valid"),
            })
            .collect(),
        contexts: (0..t)
            .map(|_| {
                let mut z: Vec<f64> = (0..params.dim).map(|_| normal.sample(rng)).collect();
                z[0] = 1.0;
                ContextVector(z)
            })
            .collect(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn block_probs(block: &[f64], classes: usize, d: usize, z: &[f64]) -> Vec<f64> {
    softmax(&(0..classes).map(|k| dot(&block[k * d..(k + 1) * d], z)).collect::<Vec<_>>())
}

pub fn ref_initial(p: &IOHMMParams, z: &[f64]) -> Vec<f64> {
    block_probs(&p.theta_in, p.n_states, p.dim, z)
}

pub fn ref_transition(p: &IOHMMParams, i: usize, z: &[f64]) -> Vec<f64> {
    let size = p.n_states * p.dim;
    block_probs(&p.theta_tr[i * size..(i + 1) * size], p.n_states, p.dim, z)
}

pub fn ref_location(p: &IOHMMParams, i: usize, z: &[f64]) -> Vec<f64> {
    let l = p.vocab.len();
    let size = l * p.dim;
    block_probs(&p.theta_emq[i * size..(i + 1) * size], l, p.dim, z)
}

pub fn ref_duration_mean(p: &IOHMMParams, i: usize, z: &[f64]) -> f64 {
    dot(&p.theta_emr[i * p.dim..(i + 1) * p.dim], z)
}

pub fn ref_log_normal_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let u = (x - mean) / sigma;
    -0.5 * u * u - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Which emission terms an enumeration includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terms {
    Joint,
    Duration,
    Location,
}

fn log_emission(p: &IOHMMParams, seq: &ActivitySequence, t: usize, i: usize, terms: Terms) -> f64 {
    let z = &seq.contexts[t].0;
    let a = &seq.activities[t];
    let loc = p.vocab.get(&a.end_location).expect("location in vocab");
    let lq = ref_location(p, i, z)[loc].ln();
    let lr = ref_log_normal_pdf(a.duration, ref_duration_mean(p, i, z), p.sigma[i]);
    match terms {
        Terms::Joint => lq + lr,
        Terms::Duration => lr,
        Terms::Location => lq,
    }
}

/// Every state path of length `t` over `n` states.
pub fn all_paths(n: usize, t: usize) -> Vec<Vec<usize>> {
    let mut paths = vec![Vec::new()];
    for _ in 0..t {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                (0..n).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    paths
}

/// Log prior of a path under the context sequence.
pub fn log_path_prior(p: &IOHMMParams, seq: &ActivitySequence, path: &[usize]) -> f64 {
    let mut lp = ref_initial(p, &seq.contexts[0].0)[path[0]].ln();
    for t in 1..path.len() {
        lp += ref_transition(p, path[t - 1], &seq.contexts[t].0)[path[t]].ln();
    }
    lp
}

pub struct Enumerated {
    pub log_likelihood: f64,
    /// `gamma[t][i]`.
    pub gamma: Vec<Vec<f64>>,
    /// `xi[t - 1][i][j]` for `t >= 1`.
    pub xi: Vec<Vec<Vec<f64>>>,
}

/// Likelihood and posteriors by summing over all `N^T` state paths.
pub fn enumerate(p: &IOHMMParams, seq: &ActivitySequence) -> Enumerated {
    let n = p.n_states;
    let t_len = seq.activities.len();
    let paths = all_paths(n, t_len);
    let logs: Vec<f64> = paths
        .iter()
        .map(|path| {
            log_path_prior(p, seq, path)
                + path.iter().enumerate().map(|(t, &i)| log_emission(p, seq, t, i, Terms::Joint)).sum::<f64>()
        })
        .collect();
    let ll = log_sum_exp(&logs);
    let mut gamma = vec![vec![0.0; n]; t_len];
    let mut xi = vec![vec![vec![0.0; n]; n]; t_len.saturating_sub(1)];
    for (path, lw) in paths.iter().zip(&logs) {
        let w = (lw - ll).exp();
        for t in 0..t_len {
            gamma[t][path[t]] += w;
            if t > 0 {
                xi[t - 1][path[t - 1]][path[t]] += w;
            }
        }
    }
    Enumerated {
        log_likelihood: ll,
        gamma,
        xi,
    }
}

/// `P(A_{t+1} | first t activities)` using only the chosen emission terms,
/// by enumerating paths of length `t + 1`.
pub fn enumerate_next_state(p: &IOHMMParams, seq: &ActivitySequence, t: usize, terms: Terms) -> Vec<f64> {
    let n = p.n_states;
    let mut acc = vec![Vec::new(); n];
    for path in all_paths(n, t + 1) {
        let lw = log_path_prior(p, seq, &path)
            + (0..t).map(|s| log_emission(p, seq, s, path[s], terms)).sum::<f64>();
        acc[path[t]].push(lw);
    }
    let logs: Vec<f64> = acc.iter().map(|v| log_sum_exp(v)).collect();
    let total = log_sum_exp(&logs);
    logs.iter().map(|l| (l - total).exp()).collect()
}

/// Central finite-difference gradient with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            y[k] = x[k] + h;
            let up = f(&y);
            y[k] = x[k] - h;
            let down = f(&y);
            y[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Euclidean distance between two vectors.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Least squares by the normal equations with Gaussian elimination.
pub fn normal_equations(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = rows[0].len();
    let mut a = vec![vec![0.0; d + 1]; d];
    for (r, v) in rows.iter().zip(y) {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += r[i] * r[j];
            }
            a[i][d] += r[i] * v;
        }
    }
    for c in 0..d {
        let piv = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("non-empty");
        a.swap(c, piv);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=d {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

/// Euclidean distance matrix silhouette, straight from the definition.
pub fn brute_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| d(&points[i], &points[j])).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c == labels[i] {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            if members.is_empty() {
                continue;
            }
            let m = members.iter().map(|&j| d(&points[i], &points[j])).sum::<f64>() / members.len() as f64;
            b = b.min(m);
        }
        let s = if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
        total += s;
    }
    total / n as f64
}

/// Gradient ascent with backtracking on `f`, using central differences for
/// the gradient. Slow but shares no code with the library solvers.
pub fn maximize_numerically(f: impl Fn(&[f64]) -> f64, start: &[f64], iterations: usize) -> Vec<f64> {
    let mut x = start.to_vec();
    let mut fx = f(&x);
    let mut step = 1.0;
    for _ in 0..iterations {
        let g = central_difference(&f, &x, 1e-6);
        let gn = g.iter().map(|v| v * v).sum::<f64>();
        if gn.sqrt() < 1e-10 {
            break;
        }
        step *= 2.0;
        loop {
            let y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            let fy = f(&y);
            if fy >= fx + 1e-4 * step * gn {
                x = y;
                fx = fy;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return x;
            }
        }
    }
    x
}

/// Conditional distributions of forward-sampled labels, computed exactly by
/// enumerating `(A_t)` over every day of `days`. Histograms use 0.5 h bins over
/// `[0, 24)` followed by the mass below 0 and at or above 24.
pub struct ExactPattern {
    /// Expected number of activities carrying each label.
    pub state_mass: Vec<f64>,
    pub end_location: Vec<Vec<f64>>,
    /// Vocabulary entries then the null marker.
    pub start_location: Vec<Vec<f64>>,
    pub start_time: Vec<Vec<f64>>,
    pub duration: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<f64>>,
}

const HIST_BINS: usize = 48;
const HIST_WIDTH: f64 = 0.5;

fn gaussian_bins(mean: f64, sigma: f64) -> Vec<f64> {
    use statrs::distribution::{ContinuousCDF, Normal as SNormal};
    let d = SNormal::new(mean, sigma).expect("valid normal");
    let mut out: Vec<f64> = (0..HIST_BINS)
        .map(|b| d.cdf((b + 1) as f64 * HIST_WIDTH) - d.cdf(b as f64 * HIST_WIDTH))
        .collect();
    out.push(d.cdf(0.0));
    out.push(1.0 - d.cdf(HIST_BINS as f64 * HIST_WIDTH));
    out
}

fn point_bins(v: f64) -> Vec<f64> {
    let mut out = vec![0.0; HIST_BINS + 2];
    if v < 0.0 {
        out[HIST_BINS] = 1.0;
    } else if v >= HIST_BINS as f64 * HIST_WIDTH {
        out[HIST_BINS + 1] = 1.0;
    } else {
        out[(v / HIST_WIDTH) as usize] = 1.0;
    }
    out
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
    v
}

pub fn exact_pattern(p: &IOHMMParams, days: &[ActivitySequence]) -> ExactPattern {
    let n = p.n_states;
    let l = p.vocab.len();
    let mut mass = vec![0.0; n];
    let mut end = vec![vec![0.0; l]; n];
    let mut start = vec![vec![0.0; l + 1]; n];
    let mut time = vec![vec![0.0; HIST_BINS + 2]; n];
    let mut dur = vec![vec![0.0; HIST_BINS + 2]; n];
    let mut trans = vec![vec![0.0; n]; n];
    for seq in days {
        let t_len = seq.activities.len();
        for path in all_paths(n, t_len) {
            let w = log_path_prior(p, seq, &path).exp();
            for (t, &i) in path.iter().enumerate() {
                let z = &seq.contexts[t].0;
                let a = &seq.activities[t];
                mass[i] += w;
                for (e, q) in end[i].iter_mut().zip(ref_location(p, i, z)) {
                    *e += w * q;
                }
                start[i][p.vocab.get(&a.start_location).unwrap_or(l)] += w;
                for (h, b) in time[i].iter_mut().zip(point_bins(a.start_time.hours())) {
                    *h += w * b;
                }
                for (h, b) in dur[i].iter_mut().zip(gaussian_bins(ref_duration_mean(p, i, z), p.sigma[i])) {
                    *h += w * b;
                }
                if t > 0 {
                    trans[path[t - 1]][i] += w;
                }
            }
        }
    }
    ExactPattern {
        state_mass: mass,
        end_location: end.into_iter().map(normalized).collect(),
        start_location: start.into_iter().map(normalized).collect(),
        start_time: time.into_iter().map(normalized).collect(),
        duration: dur.into_iter().map(normalized).collect(),
        transitions: trans.into_iter().map(normalized).collect(),
    }
}
