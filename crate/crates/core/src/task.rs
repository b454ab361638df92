use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One editing request: an instruction plus the code to rewrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTask {
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub code_before: String,
    /// Reference output, when known. Not used for decoding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_after_ref: Option<String>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
}

fn default_max_new_tokens() -> usize {
    2048
}

impl EditTask {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>, code_before: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            instruction: instruction.into(),
            code_before: code_before.into(),
            code_after_ref: None,
            max_new_tokens: default_max_new_tokens(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidConfig("task id must be non-empty".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig(format!("task {}: max_new_tokens must be positive", self.id)));
        }
        Ok(())
    }

    /// Parse newline-delimited JSON, skipping blank lines.
    pub fn parse_jsonl(text: &str) -> Result<Vec<EditTask>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let t: EditTask = serde_json::from_str(l)?;
                t.validate()?;
                Ok(t)
            })
            .collect()
    }
}
