//! The reuse/generate loop.
//!
//! A session starts in Reuse, offering the rest of the original code as a
//! draft. The first disagreement marks an edit point and switches to
//! Generate, where the draft model produces the new content. After every
//! Generate round the tail of the output is matched against the original
//! code past the edit point; once it lines up again the loop returns to Reuse
//! from just after the match.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counters::RunCounters;
use crate::dist::{ProbDist, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::generate::{draft_propose, verify_drafts, VerifierConfig};
use crate::model::{Model, SyncedSession, Tokenizer};
use crate::reuse::verify_reuse;
use crate::task::EditTask;

pub const PROMPT_TEMPLATE_VERSION: u32 = 1;

/// Prompt shared by target and draft.
pub fn render_prompt(instruction: &str, code_before: &str) -> String {
    format!("INSTRUCTION:\n{instruction}\n\nCODE:\n{code_before}\n\nEDITED CODE:\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Reuse,
    Generate,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub min_match_tokens: usize,
    pub match_window_tokens: usize,
    /// Caps the task's own budget when set.
    pub max_new_tokens: Option<usize>,
    pub stop_token: TokenId,
    pub verifier: VerifierConfig,
    pub reuse_bonus_token: bool,
    /// Longest reuse draft per pass; `None` offers the whole remainder.
    pub max_reuse_draft: Option<usize>,
    /// Keep every Generate round's (p, d, q) for offline analysis.
    #[serde(default)]
    pub record_rounds: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            min_match_tokens: 8,
            match_window_tokens: 32,
            max_new_tokens: None,
            stop_token: crate::model::BYTE_EOS,
            verifier: VerifierConfig::default(),
            reuse_bonus_token: true,
            max_reuse_draft: None,
            record_rounds: false,
        }
    }
}

impl ControllerConfig {
    pub fn with_verifier(verifier: VerifierConfig) -> Self {
        Self { verifier, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.verifier.validate()?;
        if self.min_match_tokens == 0 {
            return Err(Error::InvalidConfig("min_match_tokens must be at least 1".into()));
        }
        if self.match_window_tokens < self.min_match_tokens {
            return Err(Error::InvalidConfig("match_window_tokens must be >= min_match_tokens".into()));
        }
        if self.max_new_tokens == Some(0) || self.max_reuse_draft == Some(0) {
            return Err(Error::InvalidConfig("token budgets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    Reused,
    Draft,
    Target,
}

/// Provenance of one emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAudit {
    pub token: TokenId,
    pub source: TokenSource,
    /// Rank in the target distribution at this position, when known.
    pub rank: Option<usize>,
    /// Entropy threshold at this position (entropy verifier only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRun {
    pub phase: Phase,
    pub rounds: u32,
    pub tokens: u64,
}

/// One Generate round as seen by the verifier.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyTrace {
    pub target: Vec<ProbDist>,
    pub drafts: TokenSeq,
    pub draft_dists: Vec<ProbDist>,
}

/// Live state of an edit session.
#[derive(Debug, Clone)]
pub struct EditSessionState {
    pub phase: Phase,
    pub emitted: TokenSeq,
    pub original_tokens: TokenSeq,
    pub reuse_cursor: usize,
    pub candidate_start: Option<usize>,
    pub counters: RunCounters,
    pub truncated: bool,
    pub trace: Vec<PhaseRun>,
    pub audit: Vec<TokenAudit>,
}

/// Result of a token-level run.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub tokens: TokenSeq,
    pub counters: RunCounters,
    pub phase_trace: Vec<PhaseRun>,
    pub audit: Vec<TokenAudit>,
    pub stopped: bool,
    pub truncated: bool,
    pub rounds: Vec<VerifyTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub task_id: String,
    pub verifier: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub stopped: bool,
    pub truncated: bool,
    pub counters: RunCounters,
    pub reuse_rate: f64,
    pub phase_trace: Vec<PhaseRun>,
    pub audit: Vec<TokenAudit>,
    pub wall_time_s: f64,
}

impl EditResult {
    pub fn phase_trace_digest(&self) -> String {
        digest(&serde_json::to_vec(&self.phase_trace).unwrap_or_default())
    }

    pub fn output_digest(&self) -> String {
        let raw: Vec<u8> = self.tokens.iter().flat_map(|t| t.0.to_le_bytes()).collect();
        digest(&raw)
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Earliest end index `m >= from_index` such that the last `min_match` (or
/// more) tokens of `emitted_suffix` equal `original[m - L..m]`. The window
/// may start before `from_index`, so text shared by the edit and the
/// original just before the rejected token still counts. Reuse resumes at
/// `original[m..]`.
///
/// A match of length L > `min_match` implies a match of length `min_match`
/// at the same end, so the earliest end is found by testing the minimum
/// length only.
pub fn prefix_match(
    emitted_suffix: &[TokenId],
    original: &[TokenId],
    from_index: usize,
    min_match: usize,
) -> Option<usize> {
    if min_match == 0 || emitted_suffix.len() < min_match || from_index > original.len() {
        return None;
    }
    let needle = &emitted_suffix[emitted_suffix.len() - min_match..];
    let base = from_index.saturating_sub(min_match);
    original[base..]
        .windows(min_match)
        .enumerate()
        .filter(|(i, _)| base + i + min_match >= from_index)
        .find(|(_, w)| *w == needle)
        .map(|(i, _)| base + i + min_match)
}

struct Runner<'a> {
    cfg: &'a ControllerConfig,
    budget: usize,
    prompt_len: usize,
    stream: TokenSeq,
    state: EditSessionState,
    stopped: bool,
}

impl Runner<'_> {
    fn emitted(&self) -> &[TokenId] {
        &self.stream[self.prompt_len..]
    }

    fn done(&self) -> bool {
        self.stopped || self.state.truncated
    }

    /// Append tokens until the budget or the stop token ends the session.
    /// Returns how many were taken.
    fn emit(
        &mut self,
        toks: &[TokenId],
        source: TokenSource,
        ranks: &[Option<usize>],
        taus: &[Option<usize>],
    ) -> usize {
        let mut n = 0;
        for (i, &t) in toks.iter().enumerate() {
            if self.done() {
                break;
            }
            self.stream.push(t);
            self.state.emitted.push(t);
            let c = &mut self.state.counters;
            c.tokens_emitted += 1;
            match source {
                TokenSource::Reused => c.tokens_reused += 1,
                TokenSource::Draft => c.tokens_from_draft_accepted += 1,
                TokenSource::Target => c.tokens_from_target_fallback += 1,
            }
            self.state.audit.push(TokenAudit {
                token: t,
                source,
                rank: ranks.get(i).copied().flatten(),
                tau: taus.get(i).copied().flatten(),
            });
            if let Some(run) = self.state.trace.last_mut() {
                run.tokens += 1;
            }
            n += 1;
            if t == self.cfg.stop_token {
                self.stopped = true;
            } else if self.emitted().len() >= self.budget {
                self.state.truncated = true;
            }
        }
        n
    }

    fn enter(&mut self, phase: Phase) {
        match self.state.trace.last_mut() {
            Some(run) if run.phase == phase => run.rounds += 1,
            _ => self.state.trace.push(PhaseRun { phase, rounds: 1, tokens: 0 }),
        }
    }

    fn reuse_step(&mut self, target: &mut SyncedSession<'_>) -> Result<()> {
        let orig_len = self.state.original_tokens.len();
        let cursor = self.state.reuse_cursor;
        if cursor >= orig_len {
            self.state.phase = Phase::Generate;
            self.state.candidate_start = None;
            return Ok(());
        }
        let end = match self.cfg.max_reuse_draft {
            Some(cap) => (cursor + cap).min(orig_len),
            None => orig_len,
        };
        let draft = self.state.original_tokens[cursor..end].to_vec();
        self.enter(Phase::Reuse);
        let out = verify_reuse(target, &self.stream, &draft, &mut self.state.counters)?;
        let j = out.accepted.len();
        let ranks = vec![Some(1); j];
        let taken = self.emit(&out.accepted, TokenSource::Reused, &ranks, &[]);
        self.state.reuse_cursor += taken;
        if self.done() {
            return Ok(());
        }
        let full = out.fully_accepted();
        let bonus = out.bonus_token;
        if self.cfg.reuse_bonus_token {
            self.emit(&[bonus], TokenSource::Target, &[Some(1)], &[]);
        }
        let cursor = self.state.reuse_cursor;
        if full && cursor >= orig_len {
            self.state.candidate_start = None;
            self.state.phase = Phase::Generate;
            return Ok(());
        }
        if full {
            // capped draft: keep reusing unless the bonus token left the original
            if !self.cfg.reuse_bonus_token {
                return Ok(());
            }
            if self.state.original_tokens[cursor] == bonus {
                self.state.reuse_cursor += 1;
                return Ok(());
            }
        }
        self.state.candidate_start = Some(cursor);
        self.state.phase = Phase::Generate;
        Ok(())
    }

    fn generate_step<R: rand::Rng>(
        &mut self,
        target: &mut SyncedSession<'_>,
        draft: &mut SyncedSession<'_>,
        rng: &mut R,
        rounds: &mut Vec<VerifyTrace>,
    ) -> Result<()> {
        self.enter(Phase::Generate);
        let remaining = self.budget - self.emitted().len();
        let gamma = self.cfg.verifier.gamma.min(remaining).max(1);
        let (drafts, qs) =
            draft_propose(draft, &self.stream, gamma, Some(self.cfg.stop_token), &mut self.state.counters)?;
        let mut ps = target.score_stream(&self.stream, &drafts)?;
        self.state.counters.target_forward_passes += 1;
        let trailing = ps.pop();
        let out =
            verify_drafts(&self.cfg.verifier, &ps, &drafts, &qs, trailing.as_ref(), rng, &mut self.state.counters)?;
        let n_acc = out.accepted.len();
        self.emit(&out.accepted, TokenSource::Draft, &out.per_token_rank, &out.per_token_tau);
        if let Some(fb) = out.fallback_token {
            let dist = if n_acc < ps.len() { Some(&ps[n_acc]) } else { trailing.as_ref() };
            let rank = dist.and_then(|d| d.rank_of(fb));
            let tau = out.per_token_tau.get(n_acc).copied().flatten();
            self.emit(&[fb], TokenSource::Target, &[rank], &[tau]);
        }
        if self.cfg.record_rounds {
            rounds.push(VerifyTrace { target: ps, drafts, draft_dists: qs });
        }
        target.rewind(self.stream.len().saturating_sub(1))?;

        if let Some(from) = self.state.candidate_start {
            let emitted = self.emitted();
            let window = &emitted[emitted.len().saturating_sub(self.cfg.match_window_tokens)..];
            if let Some(m) = prefix_match(window, &self.state.original_tokens, from, self.cfg.min_match_tokens) {
                self.state.reuse_cursor = m;
                if m < self.state.original_tokens.len() {
                    self.state.phase = Phase::Reuse;
                } else {
                    self.state.candidate_start = None;
                }
            }
        }
        Ok(())
    }
}

/// Check that two models can share a token stream.
pub fn validate_pair(target: &dyn Model, draft: &dyn Model, cfg: &ControllerConfig) -> Result<()> {
    cfg.validate()?;
    if let (Some(a), Some(b)) = (target.vocab_size(), draft.vocab_size()) {
        if a != b {
            return Err(Error::InvalidConfig(format!("target and draft must share a tokenizer (vocab {a} vs {b})")));
        }
    }
    let need = cfg.verifier.required_top_n();
    if target.top_n() < need {
        return Err(Error::InvalidConfig(format!(
            "verifier {} needs target top_n >= {need}, backend gives {}",
            cfg.verifier.label(),
            target.top_n()
        )));
    }
    Ok(())
}

/// Token-level edit session.
pub fn run_edit_tokens(
    target: &dyn Model,
    draft: &dyn Model,
    prompt: &[TokenId],
    original: &[TokenId],
    max_new_tokens: usize,
    cfg: &ControllerConfig,
) -> Result<EditOutcome> {
    validate_pair(target, draft, cfg)?;
    if prompt.is_empty() {
        return Err(Error::Precondition("prompt must be non-empty".into()));
    }
    let budget = cfg.max_new_tokens.map_or(max_new_tokens, |c| c.min(max_new_tokens));
    if budget == 0 {
        return Err(Error::Precondition("token budget must be positive".into()));
    }
    let started = std::time::Instant::now();
    let mut target_sess = SyncedSession::open(target)?;
    let mut draft_sess = SyncedSession::open(draft)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.verifier.rng_seed);
    let mut rounds = Vec::new();
    let mut r = Runner {
        cfg,
        budget,
        prompt_len: prompt.len(),
        stream: prompt.to_vec(),
        state: EditSessionState {
            phase: if original.is_empty() { Phase::Generate } else { Phase::Reuse },
            emitted: Vec::new(),
            original_tokens: original.to_vec(),
            reuse_cursor: 0,
            candidate_start: None,
            counters: RunCounters::default(),
            truncated: false,
            trace: Vec::new(),
            audit: Vec::new(),
        },
        stopped: false,
    };
    while !r.done() {
        match r.state.phase {
            Phase::Reuse => r.reuse_step(&mut target_sess)?,
            Phase::Generate => r.generate_step(&mut target_sess, &mut draft_sess, &mut rng, &mut rounds)?,
            Phase::Done => break,
        }
    }
    r.state.phase = Phase::Done;
    let mut counters = r.state.counters;
    counters.wall_time = started.elapsed().as_secs_f64();
    Ok(EditOutcome {
        tokens: r.state.emitted,
        counters,
        phase_trace: r.state.trace,
        audit: r.state.audit,
        stopped: r.stopped,
        truncated: r.state.truncated,
        rounds,
    })
}

/// Tokenize `task` through the fixed prompt template and run it.
pub fn run_edit_session(
    target: &dyn Model,
    draft: &dyn Model,
    tokenizer: &dyn Tokenizer,
    task: &EditTask,
    cfg: &ControllerConfig,
) -> Result<EditResult> {
    task.validate()?;
    if let Some(v) = target.vocab_size() {
        if tokenizer.vocab_size() > v {
            return Err(Error::InvalidConfig(format!(
                "tokenizer vocabulary {} exceeds model vocabulary {v}",
                tokenizer.vocab_size()
            )));
        }
    }
    let prompt = tokenizer.encode(&render_prompt(&task.instruction, &task.code_before));
    let original = tokenizer.encode(&task.code_before);
    let out = run_edit_tokens(target, draft, &prompt, &original, task.max_new_tokens, cfg)?;
    let body: &[TokenId] = match out.tokens.last() {
        Some(&t) if out.stopped && t == cfg.stop_token => &out.tokens[..out.tokens.len() - 1],
        _ => &out.tokens,
    };
    let text = tokenizer.decode(body)?;
    Ok(EditResult {
        task_id: task.id.clone(),
        verifier: cfg.verifier.label(),
        reuse_rate: out.counters.reuse_rate(),
        wall_time_s: out.counters.wall_time,
        tokens: out.tokens,
        text,
        stopped: out.stopped,
        truncated: out.truncated,
        counters: out.counters,
        phase_trace: out.phase_trace,
        audit: out.audit,
    })
}
