//! The scoring contract every engine consumes.
//!
//! A [`Model`] hands out [`Session`]s. A session is an incremental context,
//! the moral equivalent of a KV cache: `score` appends tokens and returns one
//! next-token distribution per appended token, `truncate` rolls the context
//! back. One `score` call is one forward pass, however many tokens it carries.

mod table;
mod tokenizer;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use table::{TableModel, TableRule, TableScript, DEFAULT_WINDOW};
pub use tokenizer::{ByteTokenizer, Tokenizer, BYTE_EOS};
pub use wire::{BackendConfig, RemoteModel, Role};

use crate::dist::{ProbDist, TokenId, TokenSeq};
use crate::error::{Error, Result};

pub trait Session: Send {
    /// Tokens currently held in the model context.
    fn committed_len(&self) -> usize;

    /// Consume `tokens`; the i-th returned distribution predicts the token
    /// after `context ++ tokens[..=i]`.
    fn score(&mut self, tokens: &[TokenId]) -> Result<Vec<ProbDist>>;

    /// Drop everything past the first `len` tokens.
    fn truncate(&mut self, len: usize) -> Result<()>;
}

pub trait Model: Send + Sync {
    fn open(&self) -> Result<Box<dyn Session + '_>>;

    fn vocab_size(&self) -> Option<usize>;

    /// Depth of the distributions this model returns.
    fn top_n(&self) -> usize;
}

impl<M: Model + ?Sized> Model for Arc<M> {
    fn open(&self) -> Result<Box<dyn Session + '_>> {
        (**self).open()
    }
    fn vocab_size(&self) -> Option<usize> {
        (**self).vocab_size()
    }
    fn top_n(&self) -> usize {
        (**self).top_n()
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn open(&self) -> Result<Box<dyn Session + '_>> {
        (**self).open()
    }
    fn vocab_size(&self) -> Option<usize> {
        (**self).vocab_size()
    }
    fn top_n(&self) -> usize {
        (**self).top_n()
    }
}

/// Wraps a model and records every `score` call made through any of its
/// sessions. Used to audit forward-pass counters from the outside.
pub struct CountingModel<M> {
    inner: M,
    calls: Arc<AtomicU64>,
    tokens: Arc<AtomicU64>,
}

impl<M: Model> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, calls: Arc::default(), tokens: Arc::default() }
    }

    pub fn score_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn tokens_scored(&self) -> u64 {
        self.tokens.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.tokens.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

struct CountingSession<'a> {
    inner: Box<dyn Session + 'a>,
    calls: Arc<AtomicU64>,
    tokens: Arc<AtomicU64>,
}

impl Session for CountingSession<'_> {
    fn committed_len(&self) -> usize {
        self.inner.committed_len()
    }

    fn score(&mut self, tokens: &[TokenId]) -> Result<Vec<ProbDist>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.tokens.fetch_add(tokens.len() as u64, Ordering::SeqCst);
        self.inner.score(tokens)
    }

    fn truncate(&mut self, len: usize) -> Result<()> {
        self.inner.truncate(len)
    }
}

impl<M: Model> Model for CountingModel<M> {
    fn open(&self) -> Result<Box<dyn Session + '_>> {
        Ok(Box::new(CountingSession {
            inner: self.inner.open()?,
            calls: self.calls.clone(),
            tokens: self.tokens.clone(),
        }))
    }

    fn vocab_size(&self) -> Option<usize> {
        self.inner.vocab_size()
    }

    fn top_n(&self) -> usize {
        self.inner.top_n()
    }
}

/// A session that mirrors its own context so callers can work in terms of
/// the full token stream.
///
/// The last token of a stream is always left *pending*: it is sent along
/// with the next batch instead of being scored on its own, so the
/// distribution that predicts the first new token falls out of the same
/// forward pass that checks a draft.
pub struct SyncedSession<'a> {
    inner: Box<dyn Session + 'a>,
    context: TokenSeq,
}

impl<'a> SyncedSession<'a> {
    pub fn open(model: &'a dyn Model) -> Result<Self> {
        Ok(Self { inner: model.open()?, context: Vec::new() })
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    /// One forward pass over `stream ++ extra`, reusing whatever prefix the
    /// session already holds. Returns `1 + extra.len()` distributions: the one
    /// following `stream`, then one after each `extra` token.
    pub fn score_stream(&mut self, stream: &[TokenId], extra: &[TokenId]) -> Result<Vec<ProbDist>> {
        if stream.is_empty() {
            return Err(Error::Precondition("cannot score an empty stream".into()));
        }
        let keep = common_prefix(&self.context, stream).min(stream.len() - 1);
        self.rewind(keep)?;
        let mut batch: TokenSeq = stream[keep..].to_vec();
        batch.extend_from_slice(extra);
        let dists = self.inner.score(&batch)?;
        if dists.len() != batch.len() {
            return Err(Error::ProtocolError(format!(
                "scored {} tokens but got {} distributions",
                batch.len(),
                dists.len()
            )));
        }
        self.context.extend_from_slice(&batch);
        let skip = stream.len() - 1 - keep;
        Ok(dists.into_iter().skip(skip).collect())
    }

    /// Roll back to `len` tokens if the session holds more.
    pub fn rewind(&mut self, len: usize) -> Result<()> {
        if self.context.len() > len {
            self.inner.truncate(len)?;
            self.context.truncate(len);
        }
        Ok(())
    }
}

fn common_prefix(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Plain greedy decoding, one token per forward pass. This is the reference
/// output every lossless configuration must reproduce.
pub fn autoregressive_decode(
    model: &dyn Model,
    prompt: &[TokenId],
    max_tokens: usize,
    stop: TokenId,
) -> Result<TokenSeq> {
    Ok(autoregressive_decode_counted(model, prompt, max_tokens, stop)?.0)
}

/// [`autoregressive_decode`] plus the number of forward passes it took.
pub fn autoregressive_decode_counted(
    model: &dyn Model,
    prompt: &[TokenId],
    max_tokens: usize,
    stop: TokenId,
) -> Result<(TokenSeq, u64)> {
    if max_tokens == 0 {
        return Err(Error::Precondition("max_tokens must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Precondition("prompt must be non-empty".into()));
    }
    let mut session = model.open()?;
    let mut out = Vec::new();
    let mut passes = 0u64;
    let mut next_input: TokenSeq = prompt.to_vec();
    while out.len() < max_tokens {
        let dists = session.score(&next_input)?;
        passes += 1;
        let last = dists.last().ok_or_else(|| Error::ProtocolError("score returned no distributions".into()))?;
        let tok = last.greedy_token()?;
        out.push(tok);
        if tok == stop {
            break;
        }
        next_input = vec![tok];
    }
    Ok((out, passes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::tokens;

    fn chain() -> TableModel {
        // A=1 -> B=2 -> C=3 -> stop=9
        let mut t = TableModel::new(1, 10, ProbDist::one_hot(TokenId(0)));
        t.insert_rule(&[TokenId(1)], ProbDist::one_hot(TokenId(2))).unwrap();
        t.insert_rule(&[TokenId(2)], ProbDist::one_hot(TokenId(3))).unwrap();
        t.insert_rule(&[TokenId(3)], ProbDist::one_hot(TokenId(9))).unwrap();
        t
    }

    #[test]
    fn ar_follows_chain_to_stop() {
        let m = chain();
        let out = autoregressive_decode(&m, &tokens(&[1]), 10, TokenId(9)).unwrap();
        assert_eq!(out, tokens(&[2, 3, 9]));
    }

    #[test]
    fn ar_respects_budget() {
        let m = chain();
        let (out, passes) = autoregressive_decode_counted(&m, &tokens(&[1]), 2, TokenId(9)).unwrap();
        assert_eq!(out, tokens(&[2, 3]));
        assert_eq!(passes, 2);
    }

    #[test]
    fn ar_rejects_zero_budget() {
        assert!(autoregressive_decode(&chain(), &tokens(&[1]), 0, TokenId(9)).is_err());
    }

    #[test]
    fn counting_model_counts_calls_not_tokens() {
        let m = CountingModel::new(chain());
        let mut s = m.open().unwrap();
        s.score(&tokens(&[1, 2, 3])).unwrap();
        s.score(&tokens(&[1])).unwrap();
        assert_eq!(m.score_calls(), 2);
        assert_eq!(m.tokens_scored(), 4);
    }

    #[test]
    fn synced_session_keeps_last_token_pending() {
        let m = CountingModel::new(chain());
        let mut s = SyncedSession::open(&m).unwrap();
        let d = s.score_stream(&tokens(&[1]), &tokens(&[2, 3])).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d[0].greedy_token().unwrap(), TokenId(2));
        assert_eq!(d[2].greedy_token().unwrap(), TokenId(9));
        // stream grew by one accepted token; the session rewinds to keep it pending
        let d = s.score_stream(&tokens(&[1, 2]), &[]).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].greedy_token().unwrap(), TokenId(3));
        assert_eq!(s.context(), &tokens(&[1, 2])[..]);
        assert_eq!(m.score_calls(), 2);
    }
}
