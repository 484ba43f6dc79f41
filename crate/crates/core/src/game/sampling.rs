use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{Coalition, Game, MAX_SAMPLED_PLAYERS};
use crate::error::{Error, Result};
use crate::numeric;
use crate::rng::stream_rng;

/// Output of the permutation-sampling estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledShapley {
    pub estimates: Vec<f64>,
    /// Sample standard deviation of each player's marginal contributions
    /// divided by `sqrt(M)`.
    pub std_errors: Vec<f64>,
    pub sample_count: usize,
    pub seed: u64,
}

/// Monte-Carlo Shapley estimator over uniformly random player orderings.
///
/// Permutation `k` is drawn from ChaCha stream `k` of `seed`, so the result
/// depends only on `(game, samples, seed)` and never on the thread count.
#[derive(Debug, Clone)]
pub struct PermutationSampler {
    samples: usize,
    seed: u64,
    relabel: Option<Vec<usize>>,
}

impl PermutationSampler {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            relabel: None,
        }
    }

    /// Applies a fixed player relabelling to every drawn ordering: position
    /// `k` of the walked ordering becomes `map[drawn[k]]`. Used to pair a
    /// stream with its image under a player swap.
    pub fn with_relabel(mut self, map: Vec<usize>) -> Self {
        self.relabel = Some(map);
        self
    }

    fn validate(&self, game: &Game) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument(
                "permutation sample count must be at least 1".into(),
            ));
        }
        let n = game.n_players();
        if n > MAX_SAMPLED_PLAYERS {
            return Err(Error::InvalidGame(format!(
                "{n} players overflow the coalition mask"
            )));
        }
        if let Some(map) = &self.relabel {
            let mut seen = vec![false; n];
            if map.len() != n || map.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::InvalidArgument(
                    "relabelling must be a permutation of the players".into(),
                ));
            }
        }
        Ok(())
    }

    /// Ordering used for sample `index`.
    pub fn ordering(&self, n_players: usize, index: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n_players).collect();
        order.shuffle(&mut stream_rng(self.seed, index as u64));
        if let Some(map) = &self.relabel {
            for p in order.iter_mut() {
                *p = map[*p];
            }
        }
        order
    }

    /// Marginal-contribution vectors `x(O)`, one row of length `n` per
    /// sampled ordering, in sample order.
    pub fn contributions(&self, game: &Game) -> Result<Vec<Vec<f64>>> {
        self.validate(game)?;
        let n = game.n_players();
        Ok((0..self.samples)
            .into_par_iter()
            .map(|k| {
                let mut x = vec![0.0; n];
                let mut mask: Coalition = 0;
                let mut previous = 0.0;
                for p in self.ordering(n, k) {
                    mask |= 1 << p;
                    let v = game.value(mask);
                    x[p] = v - previous;
                    previous = v;
                }
                x
            })
            .collect())
    }

    pub fn estimate(&self, game: &Game) -> Result<SampledShapley> {
        let rows = self.contributions(game)?;
        let n = game.n_players();
        let m = self.samples;
        let mut estimates = Vec::with_capacity(n);
        let mut std_errors = Vec::with_capacity(n);
        let mut column = vec![0.0; m];
        for i in 0..n {
            for (c, row) in column.iter_mut().zip(&rows) {
                *c = row[i];
            }
            estimates.push(numeric::mean(&column));
            std_errors.push(numeric::sample_sd(&column) / (m as f64).sqrt());
        }
        Ok(SampledShapley {
            estimates,
            std_errors,
            sample_count: m,
            seed: self.seed,
        })
    }
}

/// Shorthand for `PermutationSampler::new(samples, seed).estimate(game)`.
pub fn permutation_shapley(game: &Game, samples: usize, seed: u64) -> Result<SampledShapley> {
    PermutationSampler::new(samples, seed).estimate(game)
}

#[cfg(test)]
mod tests {
    use super::super::{exact_shapley, fixtures::example_one};
    use super::*;

    #[test]
    fn rejects_zero_samples() {
        assert!(permutation_shapley(&example_one(), 0, 1).is_err());
    }

    #[test]
    fn orderings_are_permutations() {
        let s = PermutationSampler::new(10, 3);
        for k in 0..10 {
            let mut o = s.ordering(7, k);
            o.sort_unstable();
            assert_eq!(o, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn each_ordering_is_efficient() {
        let g = example_one();
        for row in PermutationSampler::new(50, 9).contributions(&g).unwrap() {
            assert_eq!(row.iter().sum::<f64>(), 8.0);
        }
    }

    #[test]
    fn converges_to_exact_values() {
        let g = example_one();
        let exact = exact_shapley(&g).unwrap();
        let est = permutation_shapley(&g, 20_000, 2024).unwrap();
        for i in 0..3 {
            let gap = (est.estimates[i] - exact[i]).abs();
            assert!(gap <= 3.0 * est.std_errors[i], "player {i}: gap {gap}");
        }
    }

    #[test]
    fn single_sample_has_zero_std_error() {
        let est = permutation_shapley(&example_one(), 1, 5).unwrap();
        assert_eq!(est.std_errors, vec![0.0; 3]);
    }

    #[test]
    fn relabel_must_be_a_permutation() {
        let s = PermutationSampler::new(4, 1).with_relabel(vec![0, 0, 1]);
        assert!(s.estimate(&example_one()).is_err());
    }
}
