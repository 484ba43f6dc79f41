use rayon::prelude::*;

use super::{Allocation, Game, MAX_EXACT_PLAYERS};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// `|S|! (n - |S| - 1)! / n!` for `|S| = 0..n`.
pub(crate) fn shapley_coefficients(n: usize) -> Vec<f64> {
    // 1 / (n * C(n-1, s)), with the binomial built multiplicatively.
    let mut binom = 1.0f64;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        if s > 0 {
            binom = binom * (n - s) as f64 / s as f64;
        }
        out.push(1.0 / (n as f64 * binom));
    }
    out
}

/// Exact Shapley value by enumeration of the `2^(n-1)` coalitions that
/// exclude each player.
pub fn exact_shapley(game: &Game) -> Result<Allocation> {
    let n = game.n_players();
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::InvalidGame(format!(
            "exact Shapley is limited to {MAX_EXACT_PLAYERS} players, got {n}"
        )));
    }
    let table = game.tabulate()?;
    if table[0] != 0.0 {
        return Err(Error::InvalidGame(format!("v(∅) = {}, must be 0", table[0])));
    }
    let coef = shapley_coefficients(n);
    let phi = (0..n)
        .into_par_iter()
        .map(|i| {
            let bit = 1usize << i;
            let mut acc = CompensatedSum::new();
            for s in 0..table.len() {
                if s & bit == 0 {
                    let size = s.count_ones() as usize;
                    acc.add(coef[size] * (table[s | bit] - table[s]));
                }
            }
            acc.value()
        })
        .collect();
    Ok(Allocation(phi))
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::example_one;
    use super::*;

    #[test]
    fn coefficients_sum_to_one_over_subsets() {
        // sum over s of C(n-1, s) * coef[s] = 1
        for n in 1..=12 {
            let c = shapley_coefficients(n);
            let mut binom = 1.0;
            let mut total = 0.0;
            for (s, coef) in c.iter().enumerate() {
                if s > 0 {
                    binom = binom * (n - s) as f64 / s as f64;
                }
                total += binom * coef;
            }
            assert!((total - 1.0).abs() < 1e-14, "n = {n}: {total}");
        }
    }

    #[test]
    fn example_one_matches_enumeration() {
        let phi = exact_shapley(&example_one()).unwrap();
        let expected = [13.0 / 6.0, 8.0 / 3.0, 19.0 / 6.0];
        for (a, b) in phi.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((phi.total() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_player_game_splits_evenly() {
        let g = Game::from_values(2, [(0b01, 1.0), (0b10, 1.0), (0b11, 2.0)]).unwrap();
        assert_eq!(exact_shapley(&g).unwrap().values(), &[1.0, 1.0]);
    }

    #[test]
    fn ignored_player_gets_zero() {
        let g = Game::from_fn(3, |s| {
            let s = s & 0b011;
            (s.count_ones() as f64).powi(2) + (s & 1) as f64
        })
        .unwrap();
        let phi = exact_shapley(&g).unwrap();
        assert_eq!(phi[2], 0.0);
    }

    #[test]
    fn rejects_more_than_twenty_players() {
        let g = Game::from_fn(21, |s| s.count_ones() as f64).unwrap();
        assert!(exact_shapley(&g).is_err());
    }
}
