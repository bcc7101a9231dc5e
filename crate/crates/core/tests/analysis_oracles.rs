use mobility_iohmm::baselines::{fit_lr, fit_mc, predict_mc, McContext};
use mobility_iohmm::evaluation::{ols_inference, score_user, PredictionRow, ScoreOptions};
use mobility_iohmm::model_selection::{kmeans, select_from_points, silhouette, SelectionConfig};
use mobility_iohmm::pipeline::{synthesize, FeatureSchema, SyntheticScenario};
use mobility_iohmm::types::{ActivityRecord, ActivitySequence, ClockTime, ContextVector, LocationVocab, StationId, UserHistory};
use mobility_iohmm_testkit as tk;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn labels_covering(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    labels.shuffle(rng);
    labels
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn silhouette_matches_pairwise_definition(seed in any::<u64>(), k in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random_points(&mut rng, 20, 3);
        let labels = labels_covering(&mut rng, 20, k);
        let got = silhouette(&points, &labels).unwrap();
        prop_assert!((got - tk::brute_silhouette(&points, &labels)).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn silhouette_ignores_relabeling_and_isometries(seed in any::<u64>(), angle in 0.0f64..6.3, dx in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random_points(&mut rng, 15, 2);
        let labels = labels_covering(&mut rng, 15, 3);
        let base = silhouette(&points, &labels).unwrap();
        let relabeled: Vec<usize> = labels.iter().map(|l| (l + 1) % 3).collect();
        prop_assert!((silhouette(&points, &relabeled).unwrap() - base).abs() <= 1e-12);
        let (c, s) = (angle.cos(), angle.sin());
        let moved: Vec<Vec<f64>> = points.iter().map(|p| vec![c * p[0] - s * p[1] + dx, s * p[0] + c * p[1] - dx]).collect();
        prop_assert!((silhouette(&moved, &labels).unwrap() - base).abs() <= 1e-10);
    }

    #[test]
    fn duplicating_a_point_moves_silhouette_little(seed in any::<u64>(), pick in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = random_points(&mut rng, 12, 2);
        let mut labels = labels_covering(&mut rng, 12, 3);
        let n = points.len() as f64;
        let base = silhouette(&points, &labels).unwrap();
        points.push(points[pick].clone());
        labels.push(labels[pick]);
        prop_assert!((silhouette(&points, &labels).unwrap() - base).abs() <= 2.0 / (n + 1.0) + 1e-12);
    }

    #[test]
    fn markov_chain_outputs_are_positive_simplices(counts in proptest::collection::vec(0u64..20, 2..8), alpha in 0.01f64..10.0) {
        let l = counts.len();
        let history = history_from(&[], l);
        let mut model = fit_mc(&history, &history.vocab, alpha).unwrap();
        model.first_counts = counts.clone();
        model.active_days = counts.iter().sum();
        let dist = predict_mc(&model, McContext::FirstTrip).distribution;
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let floor = alpha / (l as f64 * (model.active_days as f64 + alpha));
        for p in &dist {
            prop_assert!(*p >= floor * (1.0 - 1e-12));
        }
    }
}

fn station(s: &str) -> StationId {
    StationId::new(s).unwrap()
}

/// History whose days are lists of `(start, end)` location names; durations
/// and contexts are placeholders.
fn history_from(days: &[&[(&str, &str)]], vocab_size: usize) -> UserHistory {
    let names = ["A", "B", "C", "D", "E", "F", "G", "H"];
    UserHistory {
        user: "u".into(),
        days: Vec::new(),
        sequences: days
            .iter()
            .enumerate()
            .map(|(v, acts)| ActivitySequence {
                user: "u".into(),
                day: format!("d{v}"),
                activities: acts
                    .iter()
                    .map(|(p, q)| ActivityRecord {
                        start_location: if p.is_empty() { StationId::null() } else { station(p) },
                        end_location: station(q),
                        duration: 1.0,
                        start_time: ClockTime::new(0.0).unwrap(),
                    })
                    .collect(),
                contexts: acts.iter().map(|_| ContextVector(vec![1.0])).collect(),
            })
            .collect(),
        vocab: LocationVocab::from_stations(names[..vocab_size].iter().map(|s| station(s))),
    }
}

#[test]
fn markov_chain_matches_hand_tally() {
    let days: [&[(&str, &str)]; 3] = [
        &[("", "A"), ("B", "B"), ("C", "A")],
        &[("", "A"), ("B", "C")],
        &[("", "C")],
    ];
    let h = history_from(&days, 3);
    let m = fit_mc(&h, &h.vocab, 1.0).unwrap();
    assert_eq!(m.first_counts, vec![2, 0, 1]);
    assert_eq!(m.active_days, 3);
    let third = 1.0 / 3.0;
    let expect = |ctx: McContext<'_>, want: [f64; 3]| {
        let got = predict_mc(&m, ctx).distribution;
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-15, "{got:?} vs {want:?}");
        }
    };
    expect(McContext::FirstTrip, [(2.0 + third) / 4.0, third / 4.0, (1.0 + third) / 4.0]);
    expect(McContext::After(&station("B")), [third / 3.0, (1.0 + third) / 3.0, (1.0 + third) / 3.0]);
    expect(McContext::After(&station("A")), [third, third, third]);
    expect(McContext::After(&station("C")), [(1.0 + third) / 2.0, third / 2.0, third / 2.0]);
    let unknown = predict_mc(&m, McContext::After(&station("Z")));
    assert!(unknown.fell_back);
    assert_eq!(unknown.distribution, predict_mc(&m, McContext::FirstTrip).distribution);
}

#[test]
fn markov_chain_with_huge_alpha_is_nearly_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = history_from(&[], 8);
    let mut m = fit_mc(&h, &h.vocab, 1e6).unwrap();
    let mut counts = vec![0u64; 8];
    for _ in 0..1000 {
        counts[rng.random_range(0..8)] += 1;
    }
    m.first_counts = counts;
    m.active_days = 1000;
    for p in predict_mc(&m, McContext::FirstTrip).distribution {
        assert!((p - 1.0 / 8.0).abs() <= 1e-4);
    }
}

fn regression_history(seed: u64, n: usize, d: usize) -> (UserHistory, Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut h = history_from(&[], 2);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for v in 0..n {
        let mut z: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        z[0] = 1.0;
        let y = 2.0 + z[1..].iter().enumerate().map(|(j, x)| (j as f64 - 1.0) * x).sum::<f64>() + normal.sample(&mut rng);
        h.sequences.push(ActivitySequence {
            user: "u".into(),
            day: format!("d{v}"),
            activities: vec![ActivityRecord {
                start_location: StationId::null(),
                end_location: station("A"),
                duration: y,
                start_time: ClockTime::new(0.0).unwrap(),
            }],
            contexts: vec![ContextVector(z.clone())],
        });
        xs.push(z);
        ys.push(y);
    }
    (h, xs, ys)
}

#[test]
fn linear_regression_matches_normal_equations() {
    for seed in 0..10 {
        let (h, xs, ys) = regression_history(seed, 60, 4);
        let lr = fit_lr(&h, false).unwrap();
        let want = tk::normal_equations(&xs, &ys);
        let got: Vec<f64> = std::iter::once(lr.pooled.intercept).chain(lr.pooled.coefficients.iter().copied()).collect();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-8, "{got:?} vs {want:?}");
        }
        let sse = |beta: &[f64]| -> f64 {
            xs.iter().zip(&ys).map(|(x, y)| (y - x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()).powi(2)).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let moved: Vec<f64> = got.iter().zip(&dir).map(|(b, v)| b + 1e-3 * v / norm).collect();
            assert!(sse(&moved) >= sse(&got));
        }
    }
}

#[test]
fn ols_inference_matches_normal_equations_and_flags_noise() {
    let names: Vec<String> = ["intercept", "x1", "x2"].iter().map(|s| s.to_string()).collect();
    let (_, xs, ys) = regression_history(3, 80, 3);
    let report = ols_inference(&xs, &ys, &names).unwrap();
    let want = tk::normal_equations(&xs, &ys);
    for (c, w) in report.coefficients.iter().zip(&want) {
        assert!((c.estimate - w).abs() <= 1e-8);
    }

    let exact: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x[1] - x[2]).collect();
    let report = ols_inference(&xs, &exact, &names).unwrap();
    assert!((report.r_squared - 1.0).abs() <= 1e-12);
    for c in &report.coefficients {
        assert!(c.p_value <= 1e-12, "{c:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x: Vec<Vec<f64>> = (0..500).map(|_| vec![1.0, normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let y: Vec<f64> = (0..500).map(|_| normal.sample(&mut rng)).collect();
    let report = ols_inference(&x, &y, &names).unwrap();
    for c in &report.coefficients[1..] {
        assert!(c.t_value.abs() < 3.3, "{c:?}");
    }
}

fn row(step: usize, pred: f64, truth: f64, pl: &str, tl: &str, rank: usize) -> PredictionRow {
    PredictionRow {
        user_id: "u".into(),
        day: format!("d{step}{pred}"),
        step,
        pred_duration_h: pred,
        true_duration_h: truth,
        pred_location: pl.into(),
        true_location: tl.into(),
        rank_of_truth: Some(rank),
    }
}

#[test]
fn scores_match_hand_computation() {
    let mut rows = vec![
        row(1, 2.0, 3.0, "A", "A", 1),
        row(2, 5.0, 4.0, "B", "C", 2),
        row(3, 1.0, 1.0, "C", "C", 1),
        row(1, 8.0, 7.5, "A", "B", 3),
        row(2, 0.0, 2.0, "A", "A", 1),
    ];
    let s = score_user("u", &rows, &ScoreOptions::default());
    assert!((s.overall.r2.unwrap() - 0.75).abs() <= 1e-12);
    assert!((s.first.r2.unwrap() - (1.0 - 1.25 / 10.125)).abs() <= 1e-12);
    assert!((s.middle.r2.unwrap() - (1.0 - 45.0 / 42.0)).abs() <= 1e-12);
    assert!((s.overall.accuracy.unwrap() - 0.6).abs() <= 1e-12);
    assert!((s.first.accuracy.unwrap() - 0.5).abs() <= 1e-12);
    assert!((s.middle.accuracy.unwrap() - 2.0 / 3.0).abs() <= 1e-12);
    assert_eq!(s.overall.rank_counts, vec![3, 1, 1]);
    let cdf = s.overall.rank_cdf();
    for (c, w) in cdf.iter().zip([0.6, 0.8, 1.0]) {
        assert!((c - w).abs() <= 1e-12);
    }
    let mut errors = vec![0u64; 49];
    errors[0] = 1;
    errors[1] = 1;
    errors[2] = 2;
    errors[4] = 1;
    assert_eq!(s.overall.error_counts, errors);

    rows.reverse();
    let shuffled = score_user("u", &rows, &ScoreOptions::default());
    assert!((shuffled.overall.r2.unwrap() - 0.75).abs() <= 1e-12);
    assert_eq!(shuffled.overall.rank_counts, s.overall.rank_counts);
    assert_eq!(shuffled.overall.error_counts, s.overall.error_counts);
}

#[test]
fn kmeans_with_ten_restarts_matches_a_thousand_restarts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let points = random_points(&mut rng, 100, 2);
    let ten = kmeans(&points, 3, 10, 0).unwrap();
    let thousand = kmeans(&points, 3, 1000, 100).unwrap();
    assert!(ten.sse <= thousand.sse * (1.0 + 1e-12), "{} vs {}", ten.sse, thousand.sse);
}

#[test]
fn kmeans_with_ten_restarts_stays_close_to_a_thousand_restarts() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random_points(&mut rng, 100, 2);
        let ten = kmeans(&points, 3, 10, seed).unwrap();
        let thousand = kmeans(&points, 3, 1000, seed + 100).unwrap();
        assert!(ten.sse <= thousand.sse * 1.01, "seed {seed}: {} vs {}", ten.sse, thousand.sse);
    }
}

#[test]
fn four_blobs_select_four_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let centers = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]];
    let points: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            let c = centers[i % 4];
            vec![1.0, c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
        })
        .collect();
    let a = select_from_points(&points, &SelectionConfig::default(), 5).unwrap();
    let b = select_from_points(&points, &SelectionConfig::default(), 5).unwrap();
    assert_eq!(a.chosen, 4);
    assert_eq!(a, b);
}

#[test]
fn synthetic_state_frequencies_follow_enumerated_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = tk::random_params(&mut rng, 3, 3, 1, 1.0);
    params.schema = FeatureSchema::intercept_only();
    for i in 0..3 {
        params.theta_emr[i] = 1.0;
        params.sigma[i] = 0.2;
    }
    let mut s = SyntheticScenario::commuter(1, 2500, 6);
    s.params = params.clone();
    s.trips_per_day = vec![0.0, 0.0, 0.0, 1.0];
    s.destination_weights = vec![1.0; 3];
    let corpus = synthesize(&s).unwrap();
    let day = &corpus.histories[0].sequences[0];
    let mut marg = vec![vec![0.0; 3]; 4];
    for path in tk::all_paths(3, 4) {
        let w = tk::log_path_prior(&params, day, &path).exp();
        for (t, &i) in path.iter().enumerate() {
            marg[t][i] += w;
        }
    }
    let labels = &corpus.labels[0];
    assert!(labels.iter().all(|d| d.len() == 4));
    let n = labels.len() as f64;
    assert!(n * 4.0 >= 1e4);
    for t in 0..4 {
        for i in 0..3 {
            let freq = labels.iter().filter(|d| d[t] == i).count() as f64 / n;
            let p: f64 = marg[t][i];
            let band = 3.0 * (p * (1.0 - p) / n).sqrt();
            assert!((freq - p).abs() <= band, "step {t} state {i}: {freq} vs {p}");
        }
    }
}
