//! Contiguous-block cross-validation and grid search.

use std::ops::Range;

use crate::error::{Error, Result};

/// One fold: the validation block and everything else for training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Splits `0..n` into `k` contiguous blocks (no shuffling); the first
/// `n % k` blocks are one longer.
pub fn contiguous_folds(n: usize, k: usize) -> Result<Vec<Fold>> {
    if k < 2 || n < k {
        return Err(Error::Config(format!("cannot make {k} folds from {n} rows")));
    }
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    let mut blocks: Vec<Range<usize>> = Vec::with_capacity(k);
    for f in 0..k {
        let len = base + usize::from(f < extra);
        blocks.push(start..start + len);
        start += len;
    }
    Ok(blocks
        .into_iter()
        .map(|r| Fold {
            train: (0..r.start).chain(r.end..n).collect(),
            valid: r.collect(),
        })
        .collect())
}

/// Result of a grid search: the winner and the mean validation score of
/// every grid point, in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult<P> {
    pub best: P,
    pub best_index: usize,
    pub scores: Vec<f64>,
}

/// Evaluates `score(point, fold)` (lower is better) over every fold and
/// picks the point with the lowest mean. Ties within a relative 1e-12 go
/// to the larger `strength(point)`. A single-point grid is returned without
/// scoring.
pub fn grid_search_cv<P: Clone>(
    grid: &[P],
    folds: &[Fold],
    strength: impl Fn(&P) -> f64,
    mut score: impl FnMut(&P, &Fold) -> Result<f64>,
) -> Result<SearchResult<P>> {
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    if grid.len() == 1 {
        return Ok(SearchResult {
            best: grid[0].clone(),
            best_index: 0,
            scores: vec![f64::NAN],
        });
    }
    if folds.is_empty() {
        return Err(Error::Config("no cross-validation folds".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for point in grid {
        let mut total = 0.0;
        for fold in folds {
            total += score(point, fold)?;
        }
        scores.push(total / folds.len() as f64);
    }
    let mut best = 0;
    for i in 1..grid.len() {
        let (s, b) = (scores[i], scores[best]);
        if !s.is_finite() {
            continue;
        }
        let tie = (s - b).abs() <= 1e-12 * s.abs().max(b.abs());
        if !b.is_finite() || (!tie && s < b) || (tie && strength(&grid[i]) > strength(&grid[best])) {
            best = i;
        }
    }
    if !scores[best].is_finite() {
        return Err(Error::InvalidInput("every grid point failed to score".into()));
    }
    Ok(SearchResult {
        best: grid[best].clone(),
        best_index: best,
        scores,
    })
}

/// Root mean squared difference.
pub fn rmse(pred: &[f64], obs: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn folds_are_contiguous_and_cover() {
        let folds = contiguous_folds(11, 3).unwrap();
        assert_eq!(folds[0].valid, vec![0, 1, 2, 3]);
        assert_eq!(folds[1].valid, vec![4, 5, 6, 7]);
        assert_eq!(folds[2].valid, vec![8, 9, 10]);
        assert_eq!(folds[1].train, vec![0, 1, 2, 3, 8, 9, 10]);
    }

    #[test]
    fn single_point_grid_short_circuits() {
        let folds = contiguous_folds(10, 5).unwrap();
        let r = grid_search_cv(&[7.0], &folds, |p| *p, |_, _| panic!("should not score")).unwrap();
        assert_eq!(r.best, 7.0);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let folds = contiguous_folds(10, 5).unwrap();
        let grid: [f64; 0] = [];
        assert!(grid_search_cv(&grid, &folds, |p| *p, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn ties_prefer_strongest_regularisation() {
        let folds = contiguous_folds(10, 5).unwrap();
        let grid = [0.1, 1.0, 10.0, 100.0];
        let r = grid_search_cv(&grid, &folds, |p| *p, |p, _| Ok(if *p < 5.0 { 2.0 } else { 1.0 })).unwrap();
        assert_eq!(r.best, 100.0);
    }

    #[test]
    fn picks_minimum() {
        let folds = contiguous_folds(20, 4).unwrap();
        let grid = [0.5, 1.5, 2.5, 3.5];
        let r = grid_search_cv(
            &grid,
            &folds,
            |p| *p,
            |p, f| Ok((p - 1.4).powi(2) + f.valid[0] as f64 * 0.0),
        )
        .unwrap();
        assert_eq!(r.best_index, 1);
        let again = grid_search_cv(&grid, &folds, |p| *p, |p, _| Ok((p - 1.4).powi(2))).unwrap();
        assert_eq!(r.scores, again.scores);
    }

    proptest! {
        #[test]
        fn folds_partition(n in 2usize..200, k in 2usize..10) {
            prop_assume!(n >= k);
            let folds = contiguous_folds(n, k).unwrap();
            let mut seen = vec![0u8; n];
            for f in &folds {
                for &i in &f.valid { seen[i] += 1; }
                prop_assert_eq!(f.train.len() + f.valid.len(), n);
                prop_assert!(f.valid.windows(2).all(|w| w[1] == w[0] + 1));
            }
            prop_assert!(seen.iter().all(|s| *s == 1));
        }
    }
}
