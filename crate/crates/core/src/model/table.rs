//! Scripted lookup-table model keyed on a fixed-size suffix window.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::{ProbDist, TokenId, TokenSeq, DEFAULT_TOP_N};
use crate::error::{Error, Result};
use crate::model::{Model, Session};

pub const DEFAULT_WINDOW: usize = 4;

/// Deterministic model: the next-token distribution is a pure function of
/// the last `window` context tokens. Contexts shorter than the window are
/// looked up whole; anything without a rule gets `fallback`.
#[derive(Debug, Clone)]
pub struct TableModel {
    window: usize,
    vocab_size: usize,
    top_n: usize,
    fallback: ProbDist,
    rules: HashMap<TokenSeq, ProbDist>,
}

/// On-disk form of a [`TableModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableScript {
    pub window: usize,
    pub vocab_size: usize,
    pub fallback: ProbDist,
    pub rules: Vec<TableRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRule {
    pub ctx: Vec<u32>,
    pub dist: ProbDist,
}

impl TableModel {
    pub fn new(window: usize, vocab_size: usize, fallback: ProbDist) -> Self {
        Self { window: window.max(1), vocab_size, top_n: DEFAULT_TOP_N, fallback, rules: HashMap::new() }
    }

    pub fn with_top_n(mut self, top_n: usize) -> Self {
        self.top_n = top_n.max(1);
        self
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    fn check_dist(&self, d: &ProbDist) -> Result<()> {
        match d.entries().iter().find(|e| e.0.index() >= self.vocab_size) {
            Some(e) => {
                Err(Error::InvalidDistribution(format!("token {} outside vocabulary of {}", e.0, self.vocab_size)))
            }
            None => Ok(()),
        }
    }

    pub fn insert_rule(&mut self, ctx: &[TokenId], dist: ProbDist) -> Result<()> {
        if ctx.is_empty() || ctx.len() > self.window {
            return Err(Error::InvalidConfig(format!("rule context length {} not in 1..={}", ctx.len(), self.window)));
        }
        self.check_dist(&dist)?;
        self.rules.insert(ctx.to_vec(), dist);
        Ok(())
    }

    pub fn rule(&self, ctx: &[TokenId]) -> Option<&ProbDist> {
        self.rules.get(ctx)
    }

    /// Distribution following `context`.
    pub fn lookup(&self, context: &[TokenId]) -> ProbDist {
        let start = context.len().saturating_sub(self.window);
        let d = self.rules.get(&context[start..]).unwrap_or(&self.fallback);
        if d.len() > self.top_n {
            d.truncated(self.top_n)
        } else {
            d.clone()
        }
    }

    pub fn from_script(script: TableScript) -> Result<Self> {
        let mut m = TableModel::new(script.window, script.vocab_size, script.fallback);
        if script.window == 0 {
            return Err(Error::InvalidConfig("window must be positive".into()));
        }
        m.check_dist(&m.fallback.clone())?;
        for r in script.rules {
            let ctx: TokenSeq = r.ctx.into_iter().map(TokenId).collect();
            m.insert_rule(&ctx, r.dist)?;
        }
        Ok(m)
    }

    /// Rules come out sorted by context so the file is stable.
    pub fn to_script(&self) -> TableScript {
        let mut rules: Vec<TableRule> = self
            .rules
            .iter()
            .map(|(k, v)| TableRule { ctx: k.iter().map(|t| t.0).collect(), dist: v.clone() })
            .collect();
        rules.sort_by(|a, b| a.ctx.cmp(&b.ctx));
        TableScript { window: self.window, vocab_size: self.vocab_size, fallback: self.fallback.clone(), rules }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_script(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_script())?)?;
        Ok(())
    }
}

struct TableSession<'a> {
    model: &'a TableModel,
    context: TokenSeq,
}

impl Session for TableSession<'_> {
    fn committed_len(&self) -> usize {
        self.context.len()
    }

    fn score(&mut self, tokens: &[TokenId]) -> Result<Vec<ProbDist>> {
        if tokens.is_empty() {
            return Err(Error::Precondition("score needs at least one token".into()));
        }
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t.index() >= self.model.vocab_size {
                return Err(Error::UnknownToken(t.0));
            }
            self.context.push(t);
            out.push(self.model.lookup(&self.context));
        }
        Ok(out)
    }

    fn truncate(&mut self, len: usize) -> Result<()> {
        if len > self.context.len() {
            return Err(Error::TruncateBeyondContext { requested: len, committed: self.context.len() });
        }
        self.context.truncate(len);
        Ok(())
    }
}

impl Model for TableModel {
    fn open(&self) -> Result<Box<dyn Session + '_>> {
        Ok(Box::new(TableSession { model: self, context: Vec::new() }))
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.vocab_size)
    }

    fn top_n(&self) -> usize {
        self.top_n
    }
}
