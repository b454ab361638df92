//! Reuse phase: the not-yet-emitted remainder of the original code is a
//! free draft. One target pass checks all of it; the accepted prefix is as
//! long as the target's greedy choice agrees with the draft token for token.

use crate::counters::RunCounters;
use crate::dist::{ProbDist, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::model::SyncedSession;

#[derive(Debug, Clone, PartialEq)]
pub struct ReuseOutcome {
    pub accepted: TokenSeq,
    /// Target's own greedy token at the first mismatch, or after the last
    /// draft token when everything was accepted.
    pub bonus_token: TokenId,
    /// Candidate drafts after the mismatch point. The mismatched token itself
    /// is not included.
    pub remaining_draft: TokenSeq,
    /// Target distributions, one per draft position plus the trailing one.
    pub dists: Vec<ProbDist>,
}

impl ReuseOutcome {
    pub fn fully_accepted(&self) -> bool {
        self.dists.len() == self.accepted.len() + 1
    }
}

/// Verify `draft` as the continuation of `stream` in one target pass.
///
/// Afterwards the session holds `stream ++ accepted`, leaving the bonus token
/// pending for the next pass.
pub fn verify_reuse(
    target: &mut SyncedSession<'_>,
    stream: &[TokenId],
    draft: &[TokenId],
    counters: &mut RunCounters,
) -> Result<ReuseOutcome> {
    if draft.is_empty() {
        return Err(Error::Precondition("reuse draft must be non-empty".into()));
    }
    let dists = target.score_stream(stream, draft)?;
    counters.target_forward_passes += 1;

    let mut j = 0;
    while j < draft.len() && dists[j].greedy_token()? == draft[j] {
        j += 1;
    }
    let bonus_token = dists[j].greedy_token()?;
    let remaining_draft = if j < draft.len() { draft[j + 1..].to_vec() } else { Vec::new() };
    target.rewind(stream.len() + j)?;
    Ok(ReuseOutcome { accepted: draft[..j].to_vec(), bonus_token, remaining_draft, dists })
}
