//! Tokens and truncated next-token distributions.
//!
//! Models never hand out full-vocabulary vectors. A [`ProbDist`] is the
//! top-N slice of one, kept in a canonical order (probability descending,
//! token id ascending on ties) so that the argmax and ranks are
//! deterministic. Tokens outside the slice have probability zero.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default depth of a truncated distribution.
pub const DEFAULT_TOP_N: usize = 64;

const MASS_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

pub type TokenSeq = Vec<TokenId>;

/// Wrap raw ids.
pub fn tokens(ids: &[u32]) -> TokenSeq {
    ids.iter().copied().map(TokenId).collect()
}

/// Top-N truncated next-token distribution in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    entries: Vec<(TokenId, f64)>,
    truncation_n: usize,
}

fn canonical_order(a: &(TokenId, f64), b: &(TokenId, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

impl ProbDist {
    /// Build from entries in any order. Zero-probability entries are dropped
    /// (they carry no information under the zero floor); the result keeps at
    /// most `truncation_n` entries.
    pub fn new(entries: Vec<(TokenId, f64)>, truncation_n: usize) -> Result<Self> {
        if truncation_n == 0 {
            return Err(Error::InvalidDistribution("truncation_n must be positive".into()));
        }
        let mut entries: Vec<(TokenId, f64)> = entries.into_iter().filter(|e| e.1 != 0.0).collect();
        for &(t, p) in &entries {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidDistribution(format!("token {t} has probability {p}")));
            }
        }
        entries.sort_by(canonical_order);
        let mut seen: Vec<TokenId> = entries.iter().map(|e| e.0).collect();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidDistribution(format!("token {} listed twice", w[0])));
        }
        let mass: f64 = entries.iter().map(|e| e.1).sum();
        if mass > 1.0 + MASS_SLACK {
            return Err(Error::InvalidDistribution(format!("total mass {mass} exceeds 1")));
        }
        entries.truncate(truncation_n);
        Ok(Self { entries, truncation_n })
    }

    /// Build with the default depth.
    pub fn from_pairs(pairs: &[(u32, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(t, p)| (TokenId(t), p)).collect(), DEFAULT_TOP_N.max(pairs.len()))
    }

    pub fn one_hot(token: TokenId) -> Self {
        Self { entries: vec![(token, 1.0)], truncation_n: DEFAULT_TOP_N }
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn truncation_n(&self) -> usize {
        self.truncation_n
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Argmax with ascending-id tie break.
    pub fn greedy_token(&self) -> Result<TokenId> {
        self.entries.first().map(|e| e.0).ok_or(Error::EmptyDistribution)
    }

    /// 1-based rank of `token`, if present.
    pub fn rank_of(&self, token: TokenId) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == token).map(|i| i + 1)
    }

    /// Probability of `token`; `None` when the token fell outside the slice.
    pub fn prob(&self, token: TokenId) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == token).map(|e| e.1)
    }

    /// Probability under the zero floor.
    pub fn prob_or_zero(&self, token: TokenId) -> f64 {
        self.prob(token).unwrap_or(0.0)
    }

    /// Re-cut to a shallower depth. Depth never grows.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.max(1).min(self.truncation_n);
        let mut entries = self.entries.clone();
        entries.truncate(n);
        Self { entries, truncation_n: n }
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// `[[token, prob], ...]` wire form.
    pub fn to_pairs(&self) -> Vec<(u32, f64)> {
        self.entries.iter().map(|&(t, p)| (t.0, p)).collect()
    }
}

impl Serialize for ProbDist {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_pairs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProbDist {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<(u32, f64)>::deserialize(d)?;
        ProbDist::from_pairs(&pairs).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(pairs: &[(u32, f64)]) -> ProbDist {
        ProbDist::from_pairs(pairs).unwrap()
    }

    #[test]
    fn greedy_is_first_entry() {
        assert_eq!(d(&[(7, 0.6), (2, 0.4)]).greedy_token().unwrap(), TokenId(7));
    }

    #[test]
    fn greedy_tie_breaks_on_smaller_id() {
        assert_eq!(d(&[(3, 0.5), (1, 0.5)]).greedy_token().unwrap(), TokenId(1));
    }

    #[test]
    fn greedy_on_empty_fails() {
        let e = ProbDist::from_pairs(&[]).unwrap();
        assert!(matches!(e.greedy_token(), Err(Error::EmptyDistribution)));
    }

    #[test]
    fn ranks() {
        let p = d(&[(7, 0.6), (2, 0.4)]);
        assert_eq!(p.rank_of(TokenId(2)), Some(2));
        assert_eq!(p.rank_of(TokenId(9)), None);
        assert_eq!(d(&[(7, 1.0)]).rank_of(TokenId(7)), Some(1));
    }

    #[test]
    fn zero_floor_for_absent_tokens() {
        let p = d(&[(7, 0.6)]);
        assert_eq!(p.prob(TokenId(3)), None);
        assert_eq!(p.prob_or_zero(TokenId(3)), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ProbDist::from_pairs(&[(1, 0.5), (1, 0.2)]).is_err());
        assert!(ProbDist::from_pairs(&[(1, 0.8), (2, 0.8)]).is_err());
        assert!(ProbDist::from_pairs(&[(1, -0.1)]).is_err());
        assert!(ProbDist::from_pairs(&[(1, f64::NAN)]).is_err());
        assert!(ProbDist::new(vec![(TokenId(1), 0.5)], 0).is_err());
    }

    #[test]
    fn truncates_to_depth() {
        let p = ProbDist::new(tokens(&[1, 2, 3]).into_iter().zip([0.2, 0.5, 0.3]).collect(), 2).unwrap();
        assert_eq!(p.to_pairs(), vec![(2, 0.5), (3, 0.3)]);
        assert_eq!(p.truncated(1).to_pairs(), vec![(2, 0.5)]);
    }

    fn raw_entries() -> impl Strategy<Value = Vec<(u32, f64)>> {
        prop::collection::btree_map(0u32..200, 1u32..1000, 1..20).prop_map(|m| {
            let total: u32 = m.values().sum();
            m.into_iter().map(|(t, w)| (t, w as f64 / total as f64)).collect()
        })
    }

    proptest! {
        #[test]
        fn construction_is_canonical_and_idempotent(mut raw in raw_entries(), seed in any::<u64>()) {
            // shuffle deterministically
            let n = raw.len();
            for i in 0..n {
                let j = (seed.wrapping_mul(i as u64 + 1) % n as u64) as usize;
                raw.swap(i, j);
            }
            let once = d(&raw);
            let twice = d(&once.to_pairs());
            prop_assert_eq!(&once, &twice);
            for w in once.entries().windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }
        }

        #[test]
        fn greedy_survives_rescaling(raw in raw_entries(), scale in 0.01f64..0.99) {
            let base = d(&raw);
            let scaled: Vec<(u32, f64)> = raw.iter().map(|&(t, p)| (t, p * scale)).collect();
            let total: f64 = scaled.iter().map(|e| e.1).sum();
            let renorm: Vec<(u32, f64)> = scaled.iter().map(|&(t, p)| (t, p / total)).collect();
            prop_assert_eq!(base.greedy_token().unwrap(), d(&renorm).greedy_token().unwrap());
        }
    }
}
