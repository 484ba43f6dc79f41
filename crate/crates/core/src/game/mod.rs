//! Characteristic-function cooperative games.
//!
//! Coalitions are `u64` bitmasks with player `i` (0-based) at bit `i`.
//! Exact enumeration and axiom audits are limited to [`MAX_EXACT_PLAYERS`]
//! players; permutation sampling works up to [`MAX_SAMPLED_PLAYERS`].

mod audit;
mod exact;
mod sampling;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, RwLock};

pub use audit::{audit_allocation, AdditivityPeer, AxiomReport, DummyPlayer, SymmetricPair};
pub use exact::exact_shapley;
pub use sampling::{permutation_shapley, PermutationSampler, SampledShapley};

use crate::error::{Error, Result};

pub type Coalition = u64;

pub const MAX_EXACT_PLAYERS: usize = 20;
pub const MAX_SAMPLED_PLAYERS: usize = 63;

type ValueFn = dyn Fn(Coalition) -> f64 + Send + Sync;

enum Values {
    Dense(Vec<f64>),
    Sparse(HashMap<Coalition, f64>),
    Func {
        f: Box<ValueFn>,
        cache: RwLock<HashMap<Coalition, f64>>,
    },
}

struct Inner {
    n_players: usize,
    values: Values,
}

/// A transferable-utility game `(N, v)` with `v(∅) = 0`.
///
/// Cloning is cheap; clones share the value source and its memo table.
#[derive(Clone)]
pub struct Game {
    inner: Arc<Inner>,
}

impl fmt::Debug for Game {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.inner.values {
            Values::Dense(_) => "dense",
            Values::Sparse(_) => "sparse",
            Values::Func { .. } => "function",
        };
        f.debug_struct("Game")
            .field("n_players", &self.inner.n_players)
            .field("values", &kind)
            .finish()
    }
}

fn check_players(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidGame("a game needs at least one player".into()));
    }
    if n > MAX_SAMPLED_PLAYERS {
        return Err(Error::InvalidGame(format!(
            "{n} players exceed the {MAX_SAMPLED_PLAYERS}-player coalition mask"
        )));
    }
    Ok(())
}

impl Game {
    /// Game backed by an arbitrary characteristic function. Values are
    /// memoized on first use.
    pub fn from_fn<F>(n_players: usize, f: F) -> Result<Self>
    where
        F: Fn(Coalition) -> f64 + Send + Sync + 'static,
    {
        check_players(n_players)?;
        let empty = f(0);
        if empty != 0.0 {
            return Err(Error::InvalidGame(format!("v(∅) = {empty}, must be 0")));
        }
        Ok(Self::wrap(
            n_players,
            Values::Func {
                f: Box::new(f),
                cache: RwLock::new(HashMap::new()),
            },
        ))
    }

    /// Game given by a full table indexed by coalition mask (`2^n` entries).
    pub fn from_table(n_players: usize, table: Vec<f64>) -> Result<Self> {
        check_players(n_players)?;
        if n_players > MAX_EXACT_PLAYERS {
            return Err(Error::InvalidGame(format!(
                "dense tables are limited to {MAX_EXACT_PLAYERS} players"
            )));
        }
        if table.len() != 1usize << n_players {
            return Err(Error::InvalidGame(format!(
                "table has {} entries, expected 2^{n_players}",
                table.len()
            )));
        }
        if table[0] != 0.0 {
            return Err(Error::InvalidGame(format!("v(∅) = {}, must be 0", table[0])));
        }
        Ok(Self::wrap(n_players, Values::Dense(table)))
    }

    /// Game from explicit coalition values; unlisted coalitions are worth 0.
    pub fn from_values(
        n_players: usize,
        values: impl IntoIterator<Item = (Coalition, f64)>,
    ) -> Result<Self> {
        check_players(n_players)?;
        let full = full_mask(n_players);
        let mut map = HashMap::new();
        for (mask, v) in values {
            if mask & !full != 0 {
                return Err(Error::InvalidGame(format!(
                    "coalition {mask:#b} names a player outside 1..={n_players}"
                )));
            }
            if mask == 0 && v != 0.0 {
                return Err(Error::InvalidGame(format!("v(∅) = {v}, must be 0")));
            }
            if !v.is_finite() {
                return Err(Error::InvalidGame(format!("non-finite value {v}")));
            }
            map.insert(mask, v);
        }
        Ok(Self::wrap(n_players, Values::Sparse(map)))
    }

    fn wrap(n_players: usize, values: Values) -> Self {
        Self {
            inner: Arc::new(Inner { n_players, values }),
        }
    }

    pub fn n_players(&self) -> usize {
        self.inner.n_players
    }

    pub fn grand_coalition(&self) -> Coalition {
        full_mask(self.inner.n_players)
    }

    /// `v(S)`.
    pub fn value(&self, coalition: Coalition) -> f64 {
        match &self.inner.values {
            Values::Dense(t) => t[coalition as usize],
            Values::Sparse(m) => m.get(&coalition).copied().unwrap_or(0.0),
            Values::Func { f, cache } => {
                if let Some(v) = cache.read().expect("game cache poisoned").get(&coalition) {
                    return *v;
                }
                let v = f(coalition);
                cache
                    .write()
                    .expect("game cache poisoned")
                    .insert(coalition, v);
                v
            }
        }
    }

    pub fn grand_value(&self) -> f64 {
        self.value(self.grand_coalition())
    }

    /// Every coalition value, indexed by mask.
    pub fn tabulate(&self) -> Result<Vec<f64>> {
        let n = self.inner.n_players;
        if n > MAX_EXACT_PLAYERS {
            return Err(Error::InvalidGame(format!(
                "{n} players exceed the enumeration limit of {MAX_EXACT_PLAYERS}"
            )));
        }
        if let Values::Dense(t) = &self.inner.values {
            return Ok(t.clone());
        }
        Ok((0..1u64 << n).map(|s| self.value(s)).collect())
    }

    /// The game `(v + w)(S) = v(S) + w(S)`.
    pub fn sum(&self, other: &Game) -> Result<Game> {
        if self.n_players() != other.n_players() {
            return Err(Error::InvalidGame(format!(
                "cannot add a {}-player game to a {}-player game",
                other.n_players(),
                self.n_players()
            )));
        }
        let a = self.clone();
        let b = other.clone();
        Game::from_fn(self.n_players(), move |s| a.value(s) + b.value(s))
    }

    /// Parses the text format: a line `n <count>` followed by lines
    /// `<comma-separated 1-based player ids> <value>`. `{}` or `-` denotes
    /// the empty coalition. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Game> {
        let mut n_players: Option<usize> = None;
        let mut values = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let Some(n) = n_players else {
                let mut it = line.split_whitespace();
                match (it.next(), it.next(), it.next()) {
                    (Some("n"), Some(count), None) => {
                        let count = count
                            .parse::<usize>()
                            .map_err(|e| parse_err(format!("bad player count: {e}")))?;
                        check_players(count)?;
                        n_players = Some(count);
                        continue;
                    }
                    _ => return Err(parse_err("expected `n <count>` header".into())),
                }
            };
            let (members, value) = line
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| parse_err("expected `<players> <value>`".into()))?;
            let value = value
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad value: {e}")))?;
            let members = members.trim();
            let mut mask: Coalition = 0;
            if members != "{}" && members != "-" {
                for id in members.trim_matches(|c| c == '{' || c == '}').split(',') {
                    let id = id
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| parse_err(format!("bad player id `{id}`: {e}")))?;
                    if id == 0 || id > n {
                        return Err(parse_err(format!("player {id} outside 1..={n}")));
                    }
                    mask |= 1 << (id - 1);
                }
            }
            values.push((mask, value));
        }
        let n = n_players.ok_or_else(|| Error::Parse {
            line: 0,
            message: "missing `n <count>` header".into(),
        })?;
        Game::from_values(n, values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Game> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Game::parse(&text)
    }
}

/// Mask containing players `0..n`.
pub fn full_mask(n: usize) -> Coalition {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// An allocation `(phi_1, ..., phi_n)` of a game's worth.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation(pub Vec<f64>);

impl Allocation {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        crate::numeric::sum(self.0.iter().copied())
    }
}

impl std::ops::Index<usize> for Allocation {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for Allocation {
    fn from(v: Vec<f64>) -> Self {
        Allocation(v)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// v({i}) = i, v(pairs) = 4, v(N) = 8 (players numbered from 1).
    pub fn example_one() -> Game {
        Game::from_values(
            3,
            [
                (0b001, 1.0),
                (0b010, 2.0),
                (0b100, 3.0),
                (0b011, 4.0),
                (0b101, 4.0),
                (0b110, 4.0),
                (0b111, 8.0),
            ],
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonzero_empty_coalition() {
        assert!(Game::from_fn(2, |s| s as f64 + 1.0).is_err());
        assert!(Game::from_values(2, [(0, 1.0)]).is_err());
        assert!(Game::from_table(1, vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn rejects_bad_player_counts() {
        assert!(Game::from_fn(0, |_| 0.0).is_err());
        assert!(Game::from_fn(64, |_| 0.0).is_err());
        assert!(Game::from_fn(63, |_| 0.0).is_ok());
    }

    #[test]
    fn parses_text_format() {
        let text = "# example one\nn 3\n1 1\n2 2\n3 3\n1,2 4\n1,3 4\n2,3 4\n1,2,3 8\n{} 0\n";
        let g = Game::parse(text).unwrap();
        let reference = fixtures::example_one();
        for s in 0..8 {
            assert_eq!(g.value(s), reference.value(s));
        }
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = Game::parse("n 2\n1 1\n3 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(Game::parse("1 1\n").is_err());
        assert!(Game::parse("n 2\n- 1\n").is_err());
    }

    #[test]
    fn missing_coalitions_default_to_zero() {
        let g = Game::parse("n 2\n1,2 5\n").unwrap();
        assert_eq!(g.value(0b01), 0.0);
        assert_eq!(g.grand_value(), 5.0);
    }

    #[test]
    fn function_games_memoize_consistently() {
        let g = Game::from_fn(4, |s| (s.count_ones() as f64).powi(2)).unwrap();
        let first = g.value(0b1011);
        assert_eq!(first, 9.0);
        assert_eq!(g.value(0b1011), first);
        let t = g.tabulate().unwrap();
        assert_eq!(t.len(), 16);
        assert_eq!(t[0b1111], 16.0);
    }

    #[test]
    fn sum_of_games_adds_values() {
        let a = fixtures::example_one();
        let b = Game::from_fn(3, |s| s.count_ones() as f64).unwrap();
        let c = a.sum(&b).unwrap();
        assert_eq!(c.value(0b111), 11.0);
        let four = Game::from_fn(4, |_| 0.0).unwrap();
        assert!(a.sum(&four).is_err());
    }
}
