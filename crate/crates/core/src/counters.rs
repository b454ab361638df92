use serde::{Deserialize, Serialize};

/// Forward-pass and token accounting for one decoding run.
///
/// Every emitted token comes from exactly one source, so
/// `tokens_emitted == tokens_reused + tokens_from_draft_accepted + tokens_from_target_fallback`.
/// Wall time is kept out of the serialized form; reports carry it separately
/// so that everything serialized here is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub target_forward_passes: u64,
    pub draft_forward_passes: u64,
    pub tokens_emitted: u64,
    pub tokens_reused: u64,
    pub tokens_from_draft_accepted: u64,
    pub tokens_from_target_fallback: u64,
    /// Probability lookups that hit a token outside a truncated distribution.
    #[serde(default)]
    pub zero_floor_lookups: u64,
    /// sd-strategy fallbacks whose residual was computed over truncated support.
    #[serde(default)]
    pub sd_truncated_fallbacks: u64,
    #[serde(skip)]
    pub wall_time: f64,
}

impl RunCounters {
    pub fn is_reconciled(&self) -> bool {
        self.tokens_emitted == self.tokens_reused + self.tokens_from_draft_accepted + self.tokens_from_target_fallback
    }

    /// Fraction of emitted tokens taken from the original code.
    pub fn reuse_rate(&self) -> f64 {
        if self.tokens_emitted == 0 {
            0.0
        } else {
            self.tokens_reused as f64 / self.tokens_emitted as f64
        }
    }

    pub fn tokens_per_second(&self) -> f64 {
        if self.wall_time > 0.0 {
            self.tokens_emitted as f64 / self.wall_time
        } else {
            0.0
        }
    }
}
