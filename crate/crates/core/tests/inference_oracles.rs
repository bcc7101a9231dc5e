use mobility_iohmm::iohmm::inference::e_step_encoded;
use mobility_iohmm::iohmm::{forward_backward, log_likelihood, EncodedSequence, Modality};
use mobility_iohmm::pipeline::{synthesize, SyntheticScenario};
use mobility_iohmm::prediction::{
    mixture_mean, next_state_posterior, predict_duration, predict_location, PredictionInput,
};
use mobility_iohmm_testkit as tk;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, n: usize, l: usize, d: usize, t: usize) -> (mobility_iohmm::iohmm::IOHMMParams, mobility_iohmm::types::ActivitySequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = tk::random_params(&mut rng, n, l, d, 1.0);
    let s = tk::random_sequence(&mut rng, &p, t);
    (p, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_backward_matches_enumeration(seed in any::<u64>(), n in 1usize..=4, l in 1usize..=4, d in 1usize..=3, t in 1usize..=6) {
        let (p, s) = instance(seed, n, l, d, t);
        let fb = forward_backward(&s, &p).unwrap();
        let e = tk::enumerate(&p, &s);
        prop_assert!(tk::relative_error(fb.log_likelihood, e.log_likelihood) <= 1e-10);
        for step in 0..t {
            for i in 0..n {
                prop_assert!((fb.gamma_row(step)[i] - e.gamma[step][i]).abs() <= 1e-8);
            }
            let total: f64 = fb.gamma_row(step).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-10);
        }
        for step in 1..t {
            let slab = fb.xi_slab(step);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((slab[i * n + j] - e.xi[step - 1][i][j]).abs() <= 1e-8);
                }
            }
            for j in 0..n {
                let col: f64 = (0..n).map(|i| slab[i * n + j]).sum();
                prop_assert!((col - fb.gamma_row(step)[j]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn relabeling_states_permutes_posteriors(seed in any::<u64>(), t in 1usize..=5) {
        let (p, s) = instance(seed, 3, 3, 2, t);
        let perm = [2, 0, 1];
        let q = p.permuted(&perm);
        let a = forward_backward(&s, &p).unwrap();
        let b = forward_backward(&s, &q).unwrap();
        prop_assert!(tk::relative_error(a.log_likelihood, b.log_likelihood) <= 1e-10);
        for step in 0..t {
            let (ga, gb) = (a.gamma_row(step), b.gamma_row(step));
            for k in 0..3 {
                prop_assert!((gb[k] - ga[perm[k]]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn next_state_posterior_matches_enumeration(seed in any::<u64>(), n in 1usize..=4, l in 2usize..=4, t in 1usize..=5) {
        let (p, s) = instance(seed, n, l, 2, t);
        let input = PredictionInput::new(&s, &p).unwrap();
        for prefix in 0..t {
            for (modality, terms) in [
                (Modality::Joint, tk::Terms::Joint),
                (Modality::DurationOnly, tk::Terms::Duration),
                (Modality::LocationOnly, tk::Terms::Location),
            ] {
                let got = next_state_posterior(&p, &input, prefix, modality).unwrap();
                let want = tk::enumerate_next_state(&p, &s, prefix, terms);
                for i in 0..n {
                    prop_assert!((got[i] - want[i]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn predictive_mixtures_match_enumeration(seed in any::<u64>(), n in 1usize..=4, l in 2usize..=4, t in 1usize..=5) {
        let (p, s) = instance(seed, n, l, 2, t);
        let input = PredictionInput::new(&s, &p).unwrap();
        for prefix in 0..t {
            let z = &s.contexts[prefix].0;
            let wd = tk::enumerate_next_state(&p, &s, prefix, tk::Terms::Duration);
            let wl = tk::enumerate_next_state(&p, &s, prefix, tk::Terms::Location);
            let want_mean: f64 = (0..n).map(|i| wd[i] * tk::ref_duration_mean(&p, i, z)).sum();
            let got = mixture_mean(&predict_duration(&p, &input, prefix, false).unwrap());
            prop_assert!(tk::relative_error(got, want_mean) <= 1e-10);
            let dist = predict_location(&p, &input, prefix, false).unwrap();
            for k in 0..l {
                let want: f64 = (0..n).map(|i| wl[i] * tk::ref_location(&p, i, z)[k]).sum();
                prop_assert!((dist[k] - want).abs() <= 1e-10);
            }
            prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn truncating_the_future_leaves_predictions_unchanged(seed in any::<u64>(), t in 2usize..=6) {
        let (p, s) = instance(seed, 3, 3, 2, t);
        let full = PredictionInput::new(&s, &p).unwrap();
        let mut short = s.clone();
        short.activities.truncate(t - 1);
        short.contexts.truncate(t - 1);
        let cut = PredictionInput::new(&short, &p).unwrap();
        for prefix in 0..t - 1 {
            let a = predict_location(&p, &full, prefix, false).unwrap();
            let b = predict_location(&p, &cut, prefix, false).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn mixture_mean_matches_quadrature() {
    for seed in 0..10 {
        let (p, s) = instance(seed, 2, 2, 2, 3);
        let input = PredictionInput::new(&s, &p).unwrap();
        let mix = predict_duration(&p, &input, 2, false).unwrap();
        let density = |x: f64| -> f64 {
            mix.iter()
                .map(|c| c.weight * tk::ref_log_normal_pdf(x, c.mean, c.sigma).exp())
                .sum()
        };
        let lo = mix.iter().map(|c| c.mean - 12.0 * c.sigma).fold(f64::INFINITY, f64::min);
        let hi = mix.iter().map(|c| c.mean + 12.0 * c.sigma).fold(f64::NEG_INFINITY, f64::max);
        let steps = 200_000;
        let h = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for k in 0..=steps {
            let x = lo + k as f64 * h;
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            integral += w * x * density(x) * h;
        }
        assert!((integral - mixture_mean(&mix)).abs() <= 1e-6, "{integral} vs {}", mixture_mean(&mix));
    }
}

#[test]
fn e_step_total_is_sum_of_sequences() {
    let s = SyntheticScenario::commuter(1, 50, 5);
    let corpus = synthesize(&s).unwrap();
    let seqs: Vec<EncodedSequence> = corpus.histories[0]
        .sequences
        .iter()
        .map(|q| EncodedSequence::encode(q, &s.params.vocab, s.params.dim).unwrap())
        .collect();
    let stats = e_step_encoded(&seqs, &s.params).unwrap();
    let separate: f64 = corpus.histories[0]
        .sequences
        .iter()
        .map(|q| log_likelihood(q, &s.params).unwrap())
        .sum();
    assert!(tk::relative_error(stats.log_likelihood, separate) <= 1e-12);
    let doubled = e_step_encoded(&[seqs[0].clone(), seqs[0].clone()], &s.params).unwrap();
    assert!(tk::relative_error(doubled.log_likelihood, 2.0 * stats.results[0].log_likelihood) <= 1e-12);
}
