//! Flat run configuration: defaults, then a config file, then flags.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use editdraft::bench::CostModel;
use editdraft::generate::EpsilonMode;
use editdraft::model::{BackendConfig, RemoteModel, Role};
use editdraft::{ControllerConfig, Model, TableModel, VerifierConfig};
use serde::Deserialize;

/// Every key a config file may set. Flags with the same name override it.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub verifier: Option<String>,
    pub entropy_k: Option<usize>,
    pub gamma: Option<usize>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub min_match: Option<usize>,
    pub match_window: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub max_reuse_draft: Option<usize>,
    pub no_reuse_bonus: Option<bool>,
    pub target: Option<String>,
    pub draft: Option<String>,
    pub top_n: Option<usize>,
    pub timeout_s: Option<f64>,
    pub rho: Option<f64>,
    pub jobs: Option<usize>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        Settings { $($f: $top.$f.clone().or_else(|| $base.$f.clone()),)* }
    };
}

impl Settings {
    /// `top` wins wherever it has a value.
    pub fn overlay(&self, top: &Settings) -> Settings {
        overlay!(
            self,
            top,
            verifier,
            entropy_k,
            gamma,
            seed,
            epsilon,
            min_match,
            match_window,
            max_new_tokens,
            max_reuse_draft,
            no_reuse_bonus,
            target,
            draft,
            top_n,
            timeout_s,
            rho,
            jobs
        )
    }

    /// A JSON object, or `key = value` lines with `#` comments.
    pub fn parse(text: &str) -> Result<Settings> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return serde_json::from_str(text).context("config file is not a valid settings object");
        }
        let mut map = serde_json::Map::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {}: expected key = value", n + 1);
            };
            let v = v.trim().trim_matches('"');
            let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
            map.insert(k.trim().replace('-', "_"), value);
        }
        serde_json::from_value(serde_json::Value::Object(map)).context("invalid config file")
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Settings::parse(&text)
    }

    pub fn entropy_k(&self) -> usize {
        self.entropy_k.unwrap_or(editdraft::generate::DEFAULT_ENTROPY_K)
    }

    /// A verifier spec such as `entropy` or `topk:5`, filled in from the
    /// shared settings.
    pub fn verifier_from(&self, spec: &str) -> Result<VerifierConfig> {
        let mut v: VerifierConfig = spec.parse()?;
        if spec.trim() == "entropy" {
            v.k_base = self.entropy_k();
        }
        if let Some(g) = self.gamma {
            v.gamma = g;
        }
        if let Some(e) = self.epsilon {
            v.epsilon_mode = EpsilonMode::Fixed;
            v.epsilon_fixed = e;
        }
        v.rng_seed = self.seed.unwrap_or(0);
        v.validate()?;
        Ok(v)
    }

    pub fn controller(&self, verifier: VerifierConfig) -> Result<ControllerConfig> {
        let d = ControllerConfig::default();
        let cfg = ControllerConfig {
            min_match_tokens: self.min_match.unwrap_or(d.min_match_tokens),
            match_window_tokens: self.match_window.unwrap_or(d.match_window_tokens),
            max_new_tokens: self.max_new_tokens,
            max_reuse_draft: self.max_reuse_draft,
            reuse_bonus_token: !self.no_reuse_bonus.unwrap_or(false),
            verifier,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cost(&self) -> Result<CostModel> {
        Ok(CostModel::new(self.rho.unwrap_or(editdraft::bench::DEFAULT_RHO))?)
    }

    pub fn target_model(&self) -> Result<Arc<dyn Model>> {
        let spec = self.target.as_deref().context("no target model given (--target)")?;
        self.open_model(spec, Role::Target)
    }

    /// The draft defaults to the target itself when not given.
    pub fn draft_model(&self) -> Result<Arc<dyn Model>> {
        match self.draft.as_deref() {
            Some(spec) => self.open_model(spec, Role::Draft),
            None => self.target_model(),
        }
    }

    fn open_model(&self, spec: &str, role: Role) -> Result<Arc<dyn Model>> {
        if spec.starts_with("tcp://") {
            let mut cfg = BackendConfig::new(spec, role);
            if let Some(n) = self.top_n {
                cfg.top_n = n;
            }
            if let Some(t) = self.timeout_s {
                cfg.timeout_s = t;
            }
            return Ok(Arc::new(RemoteModel::connect(cfg)?));
        }
        let mut m = TableModel::load(Path::new(spec))?;
        if let Some(n) = self.top_n {
            m = m.with_top_n(n);
        }
        Ok(Arc::new(m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_and_json_agree() {
        let kv = Settings::parse("verifier = entropy\nentropy-k = 5 # pairing\n\ngamma=4\n").unwrap();
        let js = Settings::parse(r#"{"verifier": "entropy", "entropy_k": 5, "gamma": 4}"#).unwrap();
        assert_eq!(kv, js);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Settings::parse("colour = blue").is_err());
        assert!(Settings::parse("just words").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let file = Settings { gamma: Some(4), entropy_k: Some(5), ..Default::default() };
        let flags = Settings { gamma: Some(9), ..Default::default() };
        let s = file.overlay(&flags);
        assert_eq!(s.gamma, Some(9));
        assert_eq!(s.entropy_k, Some(5));
        let v = s.verifier_from("entropy").unwrap();
        assert_eq!((v.gamma, v.k_base), (9, 5));
    }

    #[test]
    fn defaults_when_nothing_set() {
        let v = Settings::default().verifier_from("greedy").unwrap();
        assert_eq!(v.gamma, 7);
        let c = Settings::default().controller(v).unwrap();
        assert_eq!(c.min_match_tokens, 8);
    }
}
