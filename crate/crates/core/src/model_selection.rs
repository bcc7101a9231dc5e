//! Per-user state count chosen by the silhouette of k-means clusterings of
//! the context vectors.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::types::UserHistory;

const LLOYD_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub candidates: Vec<usize>,
    pub restarts: usize,
    /// Append the observed duration to each context before clustering.
    pub augment_duration: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            candidates: (3..=7).collect(),
            restarts: 10,
            augment_duration: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() || self.candidates.contains(&0) {
            return Err(Error::InvalidInput("state-count candidates must be positive and non-empty".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidInput("k-means needs at least one restart".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub m: usize,
    /// `None` when the candidate could not be clustered.
    pub silhouette: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteSelection {
    pub scores: Vec<CandidateScore>,
    pub chosen: usize,
    /// Intra-cluster distances for the chosen clustering.
    pub a: Vec<f64>,
    /// Nearest-other-cluster distances for the chosen clustering.
    pub b: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub sse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteDetail {
    pub score: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Column-wise z-scores; constant columns map to zero.
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(d) = points.first().map(Vec::len) else {
        return Vec::new();
    };
    let n = points.len() as f64;
    let mut out = points.to_vec();
    for j in 0..d {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for p in out.iter_mut() {
            p[j] = if sd > 1e-12 { (p[j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

fn distinct_count(points: &[Vec<f64>], at_least: usize) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() >= at_least {
                break;
            }
        }
    }
    seen.len()
}

/// Greedy k-means++: each new centre is the best of a few `D^2`-weighted
/// candidates by resulting potential.
fn kmeans_pp_init<R: Rng>(points: &[Vec<f64>], m: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let trials = 2 + (m as f64).ln().floor() as usize;
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = d2.iter().rposition(|v| *v > 0.0).unwrap_or(0);
                for (i, v) in d2.iter().enumerate() {
                    if u < *v {
                        pick = i;
                        break;
                    }
                    u -= v;
                }
                pick
            } else {
                rng.random_range(0..points.len())
            };
            let next: Vec<f64> = d2.iter().zip(points).map(|(v, p)| v.min(sq_dist(p, &points[pick]))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| potential < *b) {
                best = Some((potential, next, pick));
            }
        }
        let (_, next, pick) = best.expect("at least one trial");
        d2 = next;
        centers.push(points[pick].clone());
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> Clustering {
    let m = centers.len();
    let d = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..LLOYD_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (k, _) = nearest(p, &centers);
            if labels[i] != k {
                labels[i] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; m];
        let mut counts = vec![0usize; m];
        for (p, &k) in points.iter().zip(&labels) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 0..m {
            if counts[k] == 0 {
                // Re-seed an empty cluster at the point farthest from its centre.
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centers[labels[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                centers[k] = points[far].clone();
                labels[far] = k;
            } else {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
    }
    let sse = points.iter().zip(&labels).map(|(p, &k)| sq_dist(p, &centers[k])).sum();
    Clustering { labels, sse }
}

/// Single-point moves that strictly lower the SSE, applied after Lloyd until
/// none remains; this escapes partitions that are Lloyd-stable but poor.
fn hartigan_refine(points: &[Vec<f64>], mut labels: Vec<usize>, m: usize) -> Clustering {
    let d = points[0].len();
    let mut counts = vec![0usize; m];
    let mut sums = vec![vec![0.0; d]; m];
    for (p, &k) in points.iter().zip(&labels) {
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(p) {
            *s += v;
        }
    }
    let centre = |sums: &[Vec<f64>], counts: &[usize], k: usize| -> Vec<f64> {
        sums[k].iter().map(|s| s / counts[k] as f64).collect()
    };
    for _ in 0..LLOYD_MAX_ITER {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = labels[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let removal = na / (na - 1.0) * sq_dist(p, &centre(&sums, &counts, a));
            let mut best: Option<(usize, f64)> = None;
            for b in (0..m).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let cost = if counts[b] == 0 { 0.0 } else { nb / (nb + 1.0) * sq_dist(p, &centre(&sums, &counts, b)) };
                if cost < removal * (1.0 - 1e-12) && best.is_none_or(|(_, c)| cost < c) {
                    best = Some((b, cost));
                }
            }
            if let Some((b, _)) = best {
                counts[a] -= 1;
                counts[b] += 1;
                for (j, v) in p.iter().enumerate() {
                    sums[a][j] -= v;
                    sums[b][j] += v;
                }
                labels[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    let centers: Vec<Vec<f64>> = (0..m).map(|k| centre(&sums, &counts, k)).collect();
    let sse = points.iter().zip(&labels).map(|(p, &k)| sq_dist(p, &centers[k])).sum();
    Clustering { labels, sse }
}

/// Best of `restarts` k-means runs on `points` as given (no rescaling).
pub fn kmeans(points: &[Vec<f64>], m: usize, restarts: usize, seed: u64) -> Result<Clustering> {
    if m == 0 {
        return Err(Error::InvalidInput("cluster count must be positive".into()));
    }
    if distinct_count(points, m) < m {
        return Err(Error::InsufficientData(format!("fewer than {m} distinct points")));
    }
    if m == 1 {
        let mut mean = vec![0.0; points[0].len()];
        for p in points {
            for (a, v) in mean.iter_mut().zip(p) {
                *a += v / points.len() as f64;
            }
        }
        let sse = points.iter().map(|p| sq_dist(p, &mean)).sum();
        return Ok(Clustering { labels: vec![0; points.len()], sse });
    }
    let mut best: Option<Clustering> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "kmeans", r as u64));
        let c = lloyd(points, kmeans_pp_init(points, m, &mut rng));
        let c = hartigan_refine(points, c.labels, m);
        if best.as_ref().is_none_or(|b| c.sse < b.sse) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// k-means labels on standardized features.
pub fn cluster_contexts(points: &[Vec<f64>], m: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans(&standardize(points), m, 10, seed)?.labels)
}

/// Mean silhouette with per-point `a` and `b`. Singletons score 0, as does
/// any point with `a = b = 0`.
pub fn silhouette_detail(points: &[Vec<f64>], labels: &[usize]) -> Result<SilhouetteDetail> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: labels.len(),
        });
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|s| **s > 0).count() < 2 {
        return Err(Error::InvalidInput("silhouette needs at least two clusters".into()));
    }
    let n = points.len();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(&points[i], &points[j]);
            }
        }
        let own = labels[i];
        a[i] = if sizes[own] > 1 { sums[own] / (sizes[own] - 1) as f64 } else { 0.0 };
        b[i] = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a[i].max(b[i]);
        if sizes[own] > 1 && denom > 0.0 {
            total += (b[i] - a[i]) / denom;
        }
    }
    Ok(SilhouetteDetail {
        score: total / n as f64,
        a,
        b,
    })
}

pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    Ok(silhouette_detail(points, labels)?.score)
}

/// Context vectors pooled over every activity of the history.
pub fn pooled_points(history: &UserHistory, augment_duration: bool) -> Vec<Vec<f64>> {
    history
        .sequences
        .iter()
        .flat_map(|s| s.activities.iter().zip(&s.contexts))
        .map(|(a, z)| {
            let mut p = z.0.clone();
            if augment_duration {
                p.push(a.duration);
            }
            p
        })
        .collect()
}

/// Chooses among `cfg.candidates` by maximal silhouette (first maximum on ties).
pub fn select_from_points(points: &[Vec<f64>], cfg: &SelectionConfig, seed: u64) -> Result<SilhouetteSelection> {
    cfg.validate()?;
    let fallback = *cfg.candidates.iter().min().expect("validated non-empty");
    let need = cfg.candidates.iter().max().expect("validated non-empty") + 1;
    let mut warnings = Vec::new();
    if points.len() < need {
        let msg = format!("{} points, {need} required; using {fallback} states", points.len());
        warn!("{msg}");
        return Ok(SilhouetteSelection {
            scores: cfg.candidates.iter().map(|&m| CandidateScore { m, silhouette: None }).collect(),
            chosen: fallback,
            a: Vec::new(),
            b: Vec::new(),
            warnings: vec![msg],
        });
    }
    let z = standardize(points);
    let mut scores = Vec::with_capacity(cfg.candidates.len());
    let mut best: Option<(f64, usize, SilhouetteDetail)> = None;
    for (idx, &m) in cfg.candidates.iter().enumerate() {
        let sc = if cfg.candidates.len() == 1 {
            None
        } else if m < 2 {
            warnings.push(format!("silhouette undefined for m={m}"));
            None
        } else {
            match kmeans(&z, m, cfg.restarts, derive_seed(seed, "select", idx as u64)) {
                Ok(c) => Some(silhouette_detail(&z, &c.labels)?),
                Err(Error::InsufficientData(msg)) => {
                    warnings.push(format!("m={m}: {msg}"));
                    None
                }
                Err(e) => return Err(e),
            }
        };
        scores.push(CandidateScore {
            m,
            silhouette: sc.as_ref().map(|d| d.score),
        });
        if let Some(d) = sc {
            if best.as_ref().is_none_or(|(s, _, _)| d.score > *s) {
                best = Some((d.score, m, d));
            }
        }
    }
    let (chosen, a, b) = match best {
        Some((_, m, d)) => (m, d.a, d.b),
        None => {
            if cfg.candidates.len() > 1 {
                warnings.push(format!("no candidate could be scored; using {fallback} states"));
            }
            (if cfg.candidates.len() == 1 { cfg.candidates[0] } else { fallback }, Vec::new(), Vec::new())
        }
    };
    Ok(SilhouetteSelection {
        scores,
        chosen,
        a,
        b,
        warnings,
    })
}

pub fn select_state_count(history: &UserHistory, cfg: &SelectionConfig, seed: u64) -> Result<SilhouetteSelection> {
    select_from_points(&pooled_points(history, cfg.augment_duration), cfg, seed)
}
