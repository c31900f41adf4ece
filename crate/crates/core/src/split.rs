//! Seeded, stratified row partitioning shared by the data pipeline, the
//! trainer's early-stopping holdout and cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let p = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); p];
    for (i, &y) in labels.iter().enumerate() {
        groups[y].push(i);
    }
    groups
}

/// Stratified train/test split. Each class contributes
/// `round(count * test_fraction)` rows to the test side, clamped so that both
/// sides keep at least one row of every class. Returned indices are sorted.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(labels.len());
    let mut test = Vec::new();
    for (class, mut rows) in by_class(labels).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(Error::Stratification(format!("class {class} has a single row")));
        }
        rows.shuffle(&mut rng);
        let n_test = ((rows.len() as f64 * test_fraction).round() as usize).clamp(1, rows.len() - 1);
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified k-fold assignment: rows of each class are shuffled and dealt
/// round-robin. Returns the sorted validation indices of each fold.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidInput("cross-validation needs at least two folds".into()));
    }
    if labels.len() < folds {
        return Err(Error::InvalidInput(format!("{} rows cannot fill {folds} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut offset = 0;
    for (class, mut rows) in by_class(labels).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < folds {
            return Err(Error::Stratification(format!(
                "class {class} has {} rows, fewer than {folds} folds",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        for (i, r) in rows.into_iter().enumerate() {
            out[(offset + i) % folds].push(r);
        }
        offset += 1;
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Complement of `held_out` in `0..n`, assuming `held_out` is sorted.
pub fn complement(n: usize, held_out: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - held_out.len());
    let mut it = held_out.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Seeded uniform sample of `n` distinct rows out of `len`; indices sorted.
pub fn subsample(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::InvalidInput(format!("cannot draw {n} rows from {len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rand::seq::index::sample(&mut rng, len, n).into_vec();
    out.sort_unstable();
    Ok(out)
}

/// Seeded unstratified split: `round(len * test_fraction)` rows (at least
/// one, at most `len - 1`) go to the test side. Indices sorted.
pub fn random_split(len: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    if len < 2 {
        return Err(Error::InvalidInput("splitting needs at least two rows".into()));
    }
    let mut rows: Vec<usize> = (0..len).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((len as f64 * test_fraction).round() as usize).clamp(1, len - 1);
    let mut test = rows[..n_test].to_vec();
    let mut train = rows[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<usize> {
        (0..100).map(|i| usize::from(i % 10 < 3)).collect()
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let y = labels();
        let (tr, te) = stratified_split(&y, 0.2, 7).unwrap();
        assert_eq!(tr.len() + te.len(), 100);
        assert_eq!(te.len(), 20);
        assert_eq!(te.iter().filter(|&&i| y[i] == 1).count(), 6);
        assert!(te.windows(2).all(|w| w[0] < w[1]));
        assert!(tr.iter().all(|i| te.binary_search(i).is_err()));
        assert_eq!(stratified_split(&y, 0.2, 7).unwrap(), (tr.clone(), te.clone()));
        assert_ne!(stratified_split(&y, 0.2, 8).unwrap().1, te);
    }

    #[test]
    fn singleton_class_cannot_be_stratified() {
        let y = vec![0, 0, 0, 1];
        assert!(matches!(stratified_split(&y, 0.25, 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn folds_cover_rows_once() {
        let y = labels();
        let folds = stratified_folds(&y, 3, 1).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for f in &folds {
            let pos = f.iter().filter(|&&i| y[i] == 1).count();
            assert!((9..=11).contains(&pos));
        }
        assert!(matches!(stratified_folds(&[0, 0, 0, 1, 1], 3, 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn complement_and_subsample() {
        assert_eq!(complement(5, &[1, 3]), vec![0, 2, 4]);
        let s = subsample(100, 50, 3).unwrap();
        assert_eq!(s.len(), 50);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, subsample(100, 50, 3).unwrap());
        assert_eq!(subsample(100, 100, 3).unwrap(), (0..100).collect::<Vec<_>>());
        assert!(subsample(100, 101, 3).is_err());
    }

    #[test]
    fn random_split_sizes() {
        let (tr, te) = random_split(10, 0.2, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(random_split(10, 0.2, 1).unwrap(), (tr, te));
    }

    #[test]
    fn ninety_ten_split_keeps_rate() {
        let y: Vec<usize> = (0..1000).map(|i| usize::from(i % 10 == 0)).collect();
        let (_, te) = stratified_split(&y, 0.2, 5).unwrap();
        let pos = te.iter().filter(|&&i| y[i] == 1).count() as f64;
        assert!((pos - 0.1 * te.len() as f64).abs() <= 1.0);
    }
}
