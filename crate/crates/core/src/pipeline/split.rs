use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::UserHistory;

/// Splits whole days into train and test sets.
///
/// The test set has `round(fraction * V)` days, clamped to `[1, V - 1]`.
/// Both halves keep the original day order.
pub fn split_train_test(
    history: &UserHistory,
    test_fraction: f64,
    seed: u64,
) -> Result<(UserHistory, UserHistory)> {
    let (train, test) = split_positions(history.active_days(), test_fraction, seed)?;
    Ok((history.subset(&train), history.subset(&test)))
}

/// Day positions of the train and test halves, each ascending.
pub fn split_positions(days: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    if days < 2 {
        return Err(Error::InsufficientData(format!(
            "{days} active day(s); a split needs at least 2"
        )));
    }
    let n_test = ((test_fraction * days as f64).round() as usize).clamp(1, days - 1);
    let mut order: Vec<usize> = (0..days).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn ten_days() {
        let (train, test) = split_positions(10, 0.2, 7).unwrap();
        assert_eq!(test.len(), 2);
        assert_eq!(train.len(), 8);
        assert_eq!(split_positions(10, 0.2, 7).unwrap(), (train, test));
    }

    #[test]
    fn three_hundred_days_disjoint() {
        let (train, test) = split_positions(300, 0.2, 1).unwrap();
        assert_eq!((train.len(), test.len()), (240, 60));
        let a: BTreeSet<_> = train.iter().copied().collect();
        let b: BTreeSet<_> = test.iter().copied().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.union(&b).count(), 300);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(split_positions(1, 0.2, 0).is_err());
        assert!(split_positions(10, 0.0, 0).is_err());
        assert!(split_positions(10, 1.0, 0).is_err());
        // at least one test day
        assert_eq!(split_positions(2, 0.01, 0).unwrap().1.len(), 1);
    }
}
