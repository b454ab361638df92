//! Generate phase: the draft model proposes `gamma` tokens, the target scores
//! them in one pass, and a verification strategy decides how many survive.
//!
//! Strategies, from strictest to loosest:
//!
//! - `greedy`: the draft token must be the target's argmax.
//! - `entropy`: the draft token must rank within the target's top-τ, where τ
//!   grows with the normalized entropy of the target's top-k probabilities.
//!   Confident positions (τ = 1) fall back to exact matching.
//! - `topk`: fixed top-n rank test.
//! - `direct`: accept every draft token.
//! - `sd`: stochastic acceptance `ε < p(d)/q(d)`, with a residual correction
//!   on rejection.
//!
//! The scan stops at the first rejection; the target supplies a replacement
//! token there, or a trailing bonus token if every draft token passed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counters::RunCounters;
use crate::dist::{ProbDist, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::model::SyncedSession;

pub const DEFAULT_GAMMA: usize = 7;
pub const DEFAULT_ENTROPY_K: usize = 3;

/// Slack for `ceil` so that k·H landing a hair above an integer through
/// rounding does not bump τ.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Sd,
    Topk,
    Direct,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonMode {
    Sampled,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub strategy: Strategy,
    pub gamma: usize,
    pub k_base: usize,
    pub topk_fixed: usize,
    pub epsilon_mode: EpsilonMode,
    pub epsilon_fixed: f64,
    pub rng_seed: u64,
    /// Emit the target's next token when every draft token is accepted.
    pub trailing_bonus: bool,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            gamma: DEFAULT_GAMMA,
            k_base: DEFAULT_ENTROPY_K,
            topk_fixed: 3,
            epsilon_mode: EpsilonMode::Sampled,
            epsilon_fixed: 0.5,
            rng_seed: 0,
            trailing_bonus: true,
        }
    }
}

impl VerifierConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self { strategy, ..Self::default() }
    }

    pub fn entropy(k_base: usize) -> Self {
        Self { strategy: Strategy::Entropy, k_base, ..Self::default() }
    }

    pub fn topk(n: usize) -> Self {
        Self { strategy: Strategy::Topk, topk_fixed: n, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::InvalidConfig("gamma must be at least 1".into()));
        }
        if self.k_base == 0 {
            return Err(Error::InvalidConfig("entropy k must be at least 1".into()));
        }
        if self.topk_fixed == 0 {
            return Err(Error::InvalidConfig("topk n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_fixed) {
            return Err(Error::InvalidConfig("epsilon must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Strategy name as used on the command line, e.g. `topk:5`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Greedy => "greedy".into(),
            Strategy::Sd => "sd".into(),
            Strategy::Topk => format!("topk:{}", self.topk_fixed),
            Strategy::Direct => "direct".into(),
            Strategy::Entropy => format!("entropy:{}", self.k_base),
        }
    }

    /// Smallest distribution depth this verifier needs from the target.
    pub fn required_top_n(&self) -> usize {
        match self.strategy {
            Strategy::Entropy => self.k_base,
            Strategy::Topk => self.topk_fixed,
            _ => 1,
        }
    }
}

/// Parses `greedy`, `sd`, `direct`, `entropy`, `entropy:<k>`, `topk:<n>`.
impl FromStr for VerifierConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<Option<usize>> {
            a.map(|a| a.parse::<usize>().map_err(|_| Error::InvalidConfig(format!("bad verifier argument in {s:?}"))))
                .transpose()
        };
        let mut cfg = VerifierConfig::default();
        match name.trim() {
            "greedy" => cfg.strategy = Strategy::Greedy,
            "sd" => cfg.strategy = Strategy::Sd,
            "direct" => cfg.strategy = Strategy::Direct,
            "entropy" => {
                cfg.strategy = Strategy::Entropy;
                if let Some(k) = num(arg)? {
                    cfg.k_base = k;
                }
            }
            "topk" => {
                cfg.strategy = Strategy::Topk;
                cfg.topk_fixed =
                    num(arg)?.ok_or_else(|| Error::InvalidConfig("topk needs a size, e.g. topk:3".into()))?;
            }
            other => return Err(Error::InvalidConfig(format!("unknown verifier {other:?}"))),
        }
        if arg.is_some() && !matches!(cfg.strategy, Strategy::Entropy | Strategy::Topk) {
            return Err(Error::InvalidConfig(format!("verifier {name} takes no argument")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for VerifierConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOutcome {
    pub accepted: TokenSeq,
    /// Replacement at the rejection point, or trailing bonus after full acceptance.
    pub fallback_token: Option<TokenId>,
    /// Rank of each examined draft token in the target distribution; the
    /// last entry belongs to the rejected token when there was a rejection.
    pub per_token_rank: Vec<Option<usize>>,
    /// τ at each examined position (entropy strategy only).
    pub per_token_tau: Vec<Option<usize>>,
    /// Index of the rejected draft token.
    pub rejected_at: Option<usize>,
}

/// Run `gamma` greedy steps of the draft model after `stream`.
///
/// Each step is one scoring call; any tokens the draft session has not yet
/// seen ride along in the first call. Proposal stops early after `stop`.
pub fn draft_propose(
    draft: &mut SyncedSession<'_>,
    stream: &[TokenId],
    gamma: usize,
    stop: Option<TokenId>,
    counters: &mut RunCounters,
) -> Result<(TokenSeq, Vec<ProbDist>)> {
    if gamma == 0 {
        return Err(Error::Precondition("gamma must be at least 1".into()));
    }
    let mut ctx = stream.to_vec();
    let mut toks = Vec::with_capacity(gamma);
    let mut qs = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let q = draft
            .score_stream(&ctx, &[])?
            .pop()
            .ok_or_else(|| Error::ProtocolError("draft returned no distribution".into()))?;
        counters.draft_forward_passes += 1;
        let t = q.greedy_token()?;
        toks.push(t);
        qs.push(q);
        ctx.push(t);
        if Some(t) == stop {
            break;
        }
    }
    Ok((toks, qs))
}

/// Acceptance rank threshold τ for one target distribution.
///
/// The top `k_base` probabilities are renormalized, their entropy divided by
/// `ln k_base`, and τ = ⌈k_base · H_norm⌉ clamped to `1..=k_base`.
pub fn entropy_threshold(p: &ProbDist, k_base: usize) -> Result<usize> {
    if p.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    if k_base == 0 {
        return Err(Error::Precondition("k_base must be at least 1".into()));
    }
    if k_base == 1 {
        return Ok(1);
    }
    let h = normalized_entropy(p, k_base);
    let raw = (k_base as f64 * h - CEIL_SLACK).ceil();
    Ok((raw.max(1.0) as usize).min(k_base))
}

/// H_norm of the renormalized top-`k_base` slice of `p`, natural log.
pub fn normalized_entropy(p: &ProbDist, k_base: usize) -> f64 {
    if k_base <= 1 {
        return 0.0;
    }
    let top = &p.entries()[..p.len().min(k_base)];
    let mass: f64 = top.iter().map(|e| e.1).sum();
    let h: f64 = top.iter().map(|e| e.1 / mass).filter(|&q| q > 0.0).map(|q| -q * q.ln()).sum();
    h / (k_base as f64).ln()
}

/// Decide how many of `drafts` the target accepts.
///
/// `target[i]` is the target distribution for `drafts[i]`; `draft_dists[i]`
/// the draft's own (consulted by `sd` only). `trailing` is the target
/// distribution after the last draft token, used for the bonus token.
pub fn verify_drafts<R: Rng + ?Sized>(
    cfg: &VerifierConfig,
    target: &[ProbDist],
    drafts: &[TokenId],
    draft_dists: &[ProbDist],
    trailing: Option<&ProbDist>,
    rng: &mut R,
    counters: &mut RunCounters,
) -> Result<GenerateOutcome> {
    if target.len() != drafts.len() || draft_dists.len() != drafts.len() {
        return Err(Error::VerifierShapeError { p: target.len(), d: drafts.len(), q: draft_dists.len() });
    }
    let mut out = GenerateOutcome {
        accepted: Vec::with_capacity(drafts.len()),
        fallback_token: None,
        per_token_rank: Vec::with_capacity(drafts.len()),
        per_token_tau: Vec::new(),
        rejected_at: None,
    };
    for (i, (&d, p)) in drafts.iter().zip(target).enumerate() {
        let rank = p.rank_of(d);
        out.per_token_rank.push(rank);
        let accept = match cfg.strategy {
            Strategy::Greedy => p.greedy_token()? == d,
            Strategy::Topk => rank.is_some_and(|r| r <= cfg.topk_fixed),
            Strategy::Direct => true,
            Strategy::Entropy => {
                let tau = entropy_threshold(p, cfg.k_base)?;
                out.per_token_tau.push(Some(tau));
                rank.is_some_and(|r| r <= tau)
            }
            Strategy::Sd => {
                let eps = match cfg.epsilon_mode {
                    EpsilonMode::Sampled => rng.gen::<f64>(),
                    EpsilonMode::Fixed => cfg.epsilon_fixed,
                };
                sd_accept(p, &draft_dists[i], d, eps, counters)
            }
        };
        if accept {
            out.accepted.push(d);
            continue;
        }
        out.rejected_at = Some(i);
        out.fallback_token = Some(match cfg.strategy {
            Strategy::Sd => sd_residual_token(p, &draft_dists[i], counters)?,
            _ => p.greedy_token()?,
        });
        return Ok(out);
    }
    if cfg.trailing_bonus {
        if let Some(t) = trailing {
            out.fallback_token = Some(t.greedy_token()?);
        }
    }
    Ok(out)
}

fn floored(d: &ProbDist, t: TokenId, counters: &mut RunCounters) -> f64 {
    d.prob(t).unwrap_or_else(|| {
        counters.zero_floor_lookups += 1;
        0.0
    })
}

fn sd_accept(p: &ProbDist, q: &ProbDist, d: TokenId, eps: f64, counters: &mut RunCounters) -> bool {
    let pd = floored(p, d, counters);
    let qd = floored(q, d, counters);
    if qd > 0.0 {
        eps < pd / qd
    } else {
        pd > 0.0
    }
}

/// Greedy pick from `max(p - q, 0)` over the target's support. Counted as a
/// truncated fallback when the residual vanishes or leans on a token the
/// draft slice did not cover.
fn sd_residual_token(p: &ProbDist, q: &ProbDist, counters: &mut RunCounters) -> Result<TokenId> {
    let mut best: Option<(TokenId, f64, bool)> = None;
    for &(t, pt) in p.entries() {
        let qt = q.prob(t);
        let r = (pt - qt.unwrap_or(0.0)).max(0.0);
        if r <= 0.0 {
            continue;
        }
        // entries come in canonical order, so strict > keeps the lower id on ties
        if best.is_none_or(|b| r > b.1) {
            best = Some((t, r, qt.is_none()));
        }
    }
    match best {
        Some((t, _, floored_q)) => {
            if floored_q && q.mass() < 1.0 - 1e-9 {
                counters.sd_truncated_fallbacks += 1;
            }
            Ok(t)
        }
        None => {
            counters.sd_truncated_fallbacks += 1;
            p.greedy_token()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::tokens;
    use crate::model::{Model, TableModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(pairs: &[(u32, f64)]) -> ProbDist {
        ProbDist::from_pairs(pairs).unwrap()
    }

    /// Straight evaluation of the normalized-entropy threshold, no clamping
    /// tricks beyond the documented max(1, ·).
    fn oracle_tau(probs: &[f64], k: usize) -> usize {
        let s: f64 = probs.iter().sum();
        let h: f64 = probs.iter().map(|p| p / s).map(|p| -p * p.ln()).sum::<f64>();
        let x = k as f64 * h / (k as f64).ln();
        (x.ceil() as usize).max(1)
    }

    #[test]
    fn entropy_reference_values() {
        let third = 1.0 / 3.0;
        assert_eq!(entropy_threshold(&d(&[(1, third), (2, third), (3, third)]), 3).unwrap(), 3);
        assert_eq!(entropy_threshold(&d(&[(1, 1.0)]), 3).unwrap(), 1);
        assert_eq!(entropy_threshold(&d(&[(1, 0.7), (2, 0.2), (3, 0.1)]), 3).unwrap(), 3);
        assert_eq!(entropy_threshold(&d(&[(1, 0.9), (2, 0.07), (3, 0.03)]), 3).unwrap(), 2);
        assert_eq!(oracle_tau(&[0.7, 0.2, 0.1], 3), 3);
        assert_eq!(oracle_tau(&[0.9, 0.07, 0.03], 3), 2);
        let h = normalized_entropy(&d(&[(1, 0.7), (2, 0.2), (3, 0.1)]), 3);
        assert!((h - 0.7298).abs() < 1e-3, "{h}");
        let h = normalized_entropy(&d(&[(1, 0.9), (2, 0.07), (3, 0.03)]), 3);
        assert!((h - 0.3515).abs() < 1e-3, "{h}");
    }

    #[test]
    fn entropy_uniform_top_k_for_several_k() {
        for k in 2..=8usize {
            let pairs: Vec<(u32, f64)> = (0..k as u32).map(|t| (t, 1.0 / k as f64)).collect();
            assert_eq!(entropy_threshold(&d(&pairs), k).unwrap(), k);
        }
    }

    #[test]
    fn entropy_k1_is_always_one() {
        assert_eq!(entropy_threshold(&d(&[(1, 0.5), (2, 0.5)]), 1).unwrap(), 1);
    }

    #[test]
    fn entropy_empty_errors() {
        assert!(matches!(entropy_threshold(&d(&[]), 3), Err(Error::EmptyDistribution)));
    }

    #[test]
    fn parse_verifier_flags() {
        assert_eq!("greedy".parse::<VerifierConfig>().unwrap().strategy, Strategy::Greedy);
        let t: VerifierConfig = "topk:5".parse().unwrap();
        assert_eq!((t.strategy, t.topk_fixed), (Strategy::Topk, 5));
        let e: VerifierConfig = "entropy:5".parse().unwrap();
        assert_eq!((e.strategy, e.k_base), (Strategy::Entropy, 5));
        assert_eq!(e.label(), "entropy:5");
        assert!("topk".parse::<VerifierConfig>().is_err());
        assert!("topk:0".parse::<VerifierConfig>().is_err());
        assert!("greedy:2".parse::<VerifierConfig>().is_err());
        assert!("beam".parse::<VerifierConfig>().is_err());
    }

    fn verify(cfg: &VerifierConfig, p: &[ProbDist], drafts: &[u32], q: &[ProbDist]) -> GenerateOutcome {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        verify_drafts(cfg, p, &tokens(drafts), q, None, &mut rng, &mut RunCounters::default()).unwrap()
    }

    #[test]
    fn entropy_with_confident_target_is_greedy() {
        let p = vec![d(&[(5, 1.0)]), d(&[(6, 1.0)]), d(&[(7, 1.0)])];
        let q = p.clone();
        let out = verify(&VerifierConfig::entropy(3), &p, &[5, 6, 7], &q);
        assert_eq!(out.accepted, tokens(&[5, 6, 7]));
        assert_eq!(out.per_token_tau, vec![Some(1); 3]);
    }

    #[test]
    fn topk_rejects_rank_four() {
        let p = vec![d(&[(1, 0.9), (2, 0.05)]), d(&[(3, 0.4), (4, 0.3), (5, 0.2), (6, 0.1)]), d(&[(7, 1.0)])];
        let q = p.clone();
        let out = verify(&VerifierConfig::topk(3), &p, &[1, 6, 7], &q);
        assert_eq!(out.accepted, tokens(&[1]));
        assert_eq!(out.fallback_token, Some(TokenId(3)));
        assert_eq!(out.rejected_at, Some(1));
        assert_eq!(out.per_token_rank, vec![Some(1), Some(4)]);
    }

    #[test]
    fn sd_with_zero_epsilon_accepts_any_support() {
        let cfg = VerifierConfig {
            strategy: Strategy::Sd,
            epsilon_mode: EpsilonMode::Fixed,
            epsilon_fixed: 0.0,
            ..Default::default()
        };
        let p = vec![d(&[(1, 0.01), (2, 0.99)]), d(&[(3, 1.0)])];
        let q = vec![d(&[(1, 1.0)]), d(&[(4, 1.0)])];
        let out = verify(&cfg, &p, &[1, 4], &q);
        assert_eq!(out.accepted, tokens(&[1]));
        // residual max(p - q, 0) on the second position is p itself
        assert_eq!(out.fallback_token, Some(TokenId(3)));
    }

    #[test]
    fn sd_draft_absent_from_q_but_present_in_p_accepts() {
        let mut c = RunCounters::default();
        assert!(sd_accept(&d(&[(1, 0.5)]), &d(&[(2, 0.5)]), TokenId(1), 0.99, &mut c));
        assert!(!sd_accept(&d(&[(3, 0.5)]), &d(&[(2, 0.5)]), TokenId(1), 0.0, &mut c));
        assert_eq!(c.zero_floor_lookups, 3);
    }

    #[test]
    fn sd_residual_degenerate_falls_back_to_greedy() {
        let mut c = RunCounters::default();
        let p = d(&[(1, 0.6), (2, 0.4)]);
        let q = d(&[(1, 0.7), (2, 0.3)]);
        // residual is 0.1 on token 2 only
        assert_eq!(sd_residual_token(&p, &q, &mut c).unwrap(), TokenId(2));
        assert_eq!(sd_residual_token(&p, &p, &mut c).unwrap(), TokenId(1));
        assert_eq!(c.sd_truncated_fallbacks, 1);
    }

    #[test]
    fn direct_accepts_everything_and_takes_bonus() {
        let p = vec![d(&[(1, 1.0)]), d(&[(2, 1.0)])];
        let cfg = VerifierConfig::with_strategy(Strategy::Direct);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trail = d(&[(9, 1.0)]);
        let out =
            verify_drafts(&cfg, &p, &tokens(&[7, 8]), &p, Some(&trail), &mut rng, &mut RunCounters::default()).unwrap();
        assert_eq!(out.accepted, tokens(&[7, 8]));
        assert_eq!(out.fallback_token, Some(TokenId(9)));
    }

    #[test]
    fn trailing_bonus_can_be_disabled() {
        let p = vec![d(&[(1, 1.0)])];
        let cfg = VerifierConfig { trailing_bonus: false, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trail = d(&[(9, 1.0)]);
        let out =
            verify_drafts(&cfg, &p, &tokens(&[1]), &p, Some(&trail), &mut rng, &mut RunCounters::default()).unwrap();
        assert_eq!(out.fallback_token, None);
    }

    #[test]
    fn shape_mismatch() {
        let p = vec![d(&[(1, 1.0)])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = verify_drafts(
            &VerifierConfig::default(),
            &p,
            &tokens(&[1, 2]),
            &p,
            None,
            &mut rng,
            &mut RunCounters::default(),
        );
        assert!(matches!(err, Err(Error::VerifierShapeError { p: 1, d: 2, q: 1 })));
    }

    fn draft_chain() -> TableModel {
        let mut m = TableModel::new(1, 16, ProbDist::one_hot(TokenId(0)));
        for a in 1..10u32 {
            m.insert_rule(&[TokenId(a)], d(&[(a + 1, 0.6), (0, 0.3)])).unwrap();
        }
        m
    }

    #[test]
    fn propose_follows_draft_chain() {
        let m = draft_chain();
        let mut s = SyncedSession::open(&m).unwrap();
        let mut c = RunCounters::default();
        let (toks, qs) = draft_propose(&mut s, &tokens(&[1]), 4, None, &mut c).unwrap();
        assert_eq!(toks, tokens(&[2, 3, 4, 5]));
        assert_eq!(qs.len(), 4);
        assert_eq!(c.draft_forward_passes, 4);
        let (one, q1) = draft_propose(&mut s, &tokens(&[1]), 1, None, &mut c).unwrap();
        assert_eq!((one.len(), q1.len()), (1, 1));
    }

    #[test]
    fn propose_dists_match_fresh_rescoring() {
        let m = draft_chain();
        let mut s = SyncedSession::open(&m).unwrap();
        let stream = tokens(&[3, 1]);
        let (toks, qs) = draft_propose(&mut s, &stream, 5, None, &mut RunCounters::default()).unwrap();
        let mut full = stream.clone();
        full.extend(&toks);
        let fresh = m.open().unwrap().score(&full).unwrap();
        assert_eq!(&qs[..], &fresh[stream.len() - 1..full.len() - 1]);
    }

    #[test]
    fn propose_stops_at_stop_token() {
        let m = draft_chain();
        let mut s = SyncedSession::open(&m).unwrap();
        let (toks, _) = draft_propose(&mut s, &tokens(&[1]), 7, Some(TokenId(3)), &mut RunCounters::default()).unwrap();
        assert_eq!(toks, tokens(&[2, 3]));
    }
}
