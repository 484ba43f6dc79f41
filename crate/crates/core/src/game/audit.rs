use super::{Allocation, Game, MAX_EXACT_PLAYERS};
use crate::error::{Error, Result};

/// Inputs for the additivity check: a second game `w` and the rule's
/// allocations for `w` and for `v + w`.
///
/// The combined allocation is supplied by the caller because rules other
/// than Shapley have no canonical way to allocate a summed game.
#[derive(Debug, Clone)]
pub struct AdditivityPeer<'a> {
    pub game: &'a Game,
    pub allocation: &'a Allocation,
    pub combined_allocation: &'a Allocation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricPair {
    pub i: usize,
    pub j: usize,
    /// `|phi_i - phi_j|`.
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DummyPlayer {
    pub player: usize,
    pub allocation: f64,
}

/// Result of checking an allocation against efficiency, symmetry, the
/// dummy-player property and additivity.
#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub efficient: bool,
    /// `sum(phi) - v(N)`, reported even when `efficient` holds.
    pub efficiency_residual: f64,
    pub symmetric_pairs: Vec<SymmetricPair>,
    pub dummy_players: Vec<DummyPlayer>,
    /// `max_i |phi(v+w)_i - phi(v)_i - phi(w)_i|` when a peer was supplied.
    pub additivity_residual: Option<f64>,
}

impl AxiomReport {
    pub fn max_symmetry_deviation(&self) -> f64 {
        self.symmetric_pairs
            .iter()
            .map(|p| p.deviation)
            .fold(0.0, f64::max)
    }

    pub fn max_dummy_allocation(&self) -> f64 {
        self.dummy_players
            .iter()
            .map(|d| d.allocation.abs())
            .fold(0.0, f64::max)
    }

    pub fn symmetric(&self, tol: f64) -> bool {
        self.max_symmetry_deviation() <= tol
    }

    pub fn dummy(&self, tol: f64) -> bool {
        self.max_dummy_allocation() <= tol
    }

    /// `true` when no peer was supplied.
    pub fn additive(&self, tol: f64) -> bool {
        self.additivity_residual.map_or(true, |r| r <= tol)
    }

    pub fn passes_all(&self, tol: f64) -> bool {
        self.efficient && self.symmetric(tol) && self.dummy(tol) && self.additive(tol)
    }
}

/// Audits `allocation` against the four Shapley axioms on `game`.
///
/// Symmetric pairs and dummy players are found by scanning every coalition;
/// two coalition values count as equal when they differ by at most
/// `1e-12 * max(1, max |v|)`.
pub fn audit_allocation(
    game: &Game,
    allocation: &Allocation,
    peer: Option<AdditivityPeer<'_>>,
) -> Result<AxiomReport> {
    let n = game.n_players();
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::InvalidGame(format!(
            "axiom audit scans all coalitions and is limited to {MAX_EXACT_PLAYERS} players"
        )));
    }
    if allocation.len() != n {
        return Err(Error::InvalidArgument(format!(
            "allocation has {} entries for a {n}-player game",
            allocation.len()
        )));
    }
    let table = game.tabulate()?;
    let scale = table.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let value_tol = 1e-12 * scale;

    let grand = table[table.len() - 1];
    let efficiency_residual = allocation.total() - grand;
    let efficient = efficiency_residual.abs() <= 1e-12 * grand.abs().max(1.0);

    let mut symmetric_pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let pair_mask = (1usize << i) | (1usize << j);
            let symmetric = (0..table.len())
                .filter(|s| s & pair_mask == 0)
                .all(|s| (table[s | 1 << i] - table[s | 1 << j]).abs() <= value_tol);
            if symmetric {
                symmetric_pairs.push(SymmetricPair {
                    i,
                    j,
                    deviation: (allocation[i] - allocation[j]).abs(),
                });
            }
        }
    }

    let dummy_players = (0..n)
        .filter(|&i| {
            (0..table.len())
                .filter(|s| s & (1 << i) == 0)
                .all(|s| (table[s | 1 << i] - table[s]).abs() <= value_tol)
        })
        .map(|i| DummyPlayer {
            player: i,
            allocation: allocation[i],
        })
        .collect();

    let additivity_residual = match peer {
        None => None,
        Some(peer) => {
            if peer.game.n_players() != n {
                return Err(Error::InvalidGame(format!(
                    "peer game has {} players, expected {n}",
                    peer.game.n_players()
                )));
            }
            if peer.allocation.len() != n || peer.combined_allocation.len() != n {
                return Err(Error::InvalidArgument(
                    "peer allocations must have one entry per player".into(),
                ));
            }
            Some(
                (0..n)
                    .map(|i| {
                        (peer.combined_allocation[i] - allocation[i] - peer.allocation[i]).abs()
                    })
                    .fold(0.0, f64::max),
            )
        }
    };

    Ok(AxiomReport {
        efficient,
        efficiency_residual,
        symmetric_pairs,
        dummy_players,
        additivity_residual,
    })
}


#[cfg(test)]
mod tests {
    use super::super::{exact_shapley, fixtures::example_one};
    use super::*;

    #[test]
    fn shapley_passes_on_example_one() {
        let g = example_one();
        let phi = exact_shapley(&g).unwrap();
        let report = audit_allocation(&g, &phi, None).unwrap();
        assert!(report.efficient);
        assert!(report.efficiency_residual.abs() < 1e-12);
        assert!(report.symmetric_pairs.is_empty());
        assert!(report.dummy_players.is_empty());
        assert_eq!(report.additivity_residual, None);
    }

    #[test]
    fn printed_values_are_not_efficient() {
        let g = example_one();
        let printed = Allocation(vec![8.0 / 3.0, 17.0 / 6.0, 10.0 / 3.0]);
        let report = audit_allocation(&g, &printed, None).unwrap();
        assert!(!report.efficient);
        assert!((report.efficiency_residual - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn detects_symmetric_pairs_and_dummies() {
        // players 0 and 1 interchangeable, player 2 dummy
        let g = Game::from_fn(3, |s| {
            let k = (s & 0b011).count_ones() as f64;
            k * k
        })
        .unwrap();
        let report = audit_allocation(&g, &Allocation(vec![3.0, 1.0, 0.5]), None).unwrap();
        assert_eq!(
            report.symmetric_pairs,
            vec![SymmetricPair { i: 0, j: 1, deviation: 2.0 }]
        );
        assert_eq!(
            report.dummy_players,
            vec![DummyPlayer { player: 2, allocation: 0.5 }]
        );
        assert!(!report.passes_all(1e-12));
    }

    #[test]
    fn additivity_uses_supplied_allocations() {
        let v = example_one();
        let w = Game::from_fn(3, |s| s.count_ones() as f64).unwrap();
        let vw = v.sum(&w).unwrap();
        let (pv, pw, pvw) = (
            exact_shapley(&v).unwrap(),
            exact_shapley(&w).unwrap(),
            exact_shapley(&vw).unwrap(),
        );
        let peer = AdditivityPeer { game: &w, allocation: &pw, combined_allocation: &pvw };
        let report = audit_allocation(&v, &pv, Some(peer)).unwrap();
        assert!(report.additivity_residual.unwrap() < 1e-12);

        let bogus = Allocation(vec![0.0; 3]);
        let peer = AdditivityPeer { game: &w, allocation: &pw, combined_allocation: &bogus };
        let report = audit_allocation(&v, &pv, Some(peer)).unwrap();
        assert!(report.additivity_residual.unwrap() > 1.0);
    }

    #[test]
    fn rejects_mismatched_peer_and_length() {
        let v = example_one();
        let w = Game::from_fn(2, |s| s.count_ones() as f64).unwrap();
        let pv = exact_shapley(&v).unwrap();
        let pw = exact_shapley(&w).unwrap();
        let peer = AdditivityPeer { game: &w, allocation: &pw, combined_allocation: &pw };
        assert!(audit_allocation(&v, &pv, Some(peer)).is_err());
        assert!(audit_allocation(&v, &Allocation(vec![1.0]), None).is_err());
    }
}
