//! Built-in invariant suite behind `editdraft selfcheck`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::pass_at_k;
use crate::controller::{run_edit_session, ControllerConfig};
use crate::dist::{ProbDist, TokenId};
use crate::error::Result;
use crate::generate::{entropy_threshold, VerifierConfig};
use crate::model::{autoregressive_decode, ByteTokenizer, CountingModel, BYTE_EOS};
use crate::synth::{synth_edit, Layout, SynthSpec};

/// τ as a function of (distribution, k).
pub type EntropyFn = fn(&ProbDist, usize) -> Result<usize>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfcheckReport {
    pub seed: u64,
    pub checks: Vec<CheckLine>,
}

impl SelfcheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        self.checks
            .iter()
            .map(|c| format!("{:<width$}  {}  {}\n", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail))
            .collect()
    }
}

pub fn run_selfcheck(seed: u64) -> SelfcheckReport {
    run_selfcheck_with(seed, entropy_threshold)
}

/// Same suite with the entropy rule swapped out, so a broken rule can be
/// shown to fail.
pub fn run_selfcheck_with(seed: u64, entropy: EntropyFn) -> SelfcheckReport {
    let mut checks = vec![lossless(seed), entropy_units(entropy), pass_at_k_oracle(seed)];
    checks.push(reconciled(seed));
    SelfcheckReport { seed, checks }
}

fn line(name: &str, passed: bool, detail: String) -> CheckLine {
    CheckLine { name: name.into(), passed, detail }
}

fn lossless(seed: u64) -> CheckLine {
    let mut ok = 0;
    let mut first_bad = None;
    for i in 0..25u64 {
        let spec = SynthSpec {
            size: 50 + (i as usize * 17) % 150,
            reuse_rate: (i % 5) as f64 / 4.0,
            layout: Layout::Split { hunks: 1 + i as usize % 3 },
            draft_noise: 0.2,
            window: 4,
            seed: seed.wrapping_add(i),
        };
        let same = synth_edit(&spec).and_then(|b| {
            let want = autoregressive_decode(&b.target, &b.prompt, b.task.max_new_tokens, BYTE_EOS)?;
            let got = run_edit_session(&b.target, &b.draft, &ByteTokenizer, &b.task, &ControllerConfig::default())?;
            Ok(got.tokens == want)
        });
        match same {
            Ok(true) => ok += 1,
            _ => {
                first_bad.get_or_insert(i);
            }
        }
    }
    let detail = match first_bad {
        None => format!("{ok}/25 pairs match autoregressive output"),
        Some(i) => format!("{ok}/25 pairs match; first mismatch at pair {i}"),
    };
    line("lossless greedy", first_bad.is_none(), detail)
}

fn entropy_units(entropy: EntropyFn) -> CheckLine {
    let d = |p: &[(u32, f64)]| ProbDist::from_pairs(p).expect("valid");
    let cases: Vec<(ProbDist, usize, usize)> = vec![
        (d(&[(0, 0.2), (1, 0.2), (2, 0.2), (3, 0.2), (4, 0.2)]), 5, 5),
        (d(&[(0, 1.0 / 3.0), (1, 1.0 / 3.0), (2, 1.0 / 3.0)]), 3, 3),
        (ProbDist::one_hot(TokenId(7)), 3, 1),
        (d(&[(0, 0.7), (1, 0.2), (2, 0.1)]), 3, 3),
        (d(&[(0, 0.9), (1, 0.07), (2, 0.03)]), 3, 2),
        (d(&[(0, 0.5), (1, 0.5)]), 1, 1),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter_map(|(p, k, want)| match entropy(p, *k) {
            Ok(t) if t == *want => None,
            got => Some(format!("k={k}: want {want}, got {got:?}")),
        })
        .collect();
    let detail = if bad.is_empty() { format!("{} threshold cases", cases.len()) } else { bad.join("; ") };
    line("entropy thresholds", bad.is_empty(), detail)
}

fn pass_at_k_oracle(seed: u64) -> CheckLine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = 20_000;
    let mut worst = 0.0f64;
    for (n, c, k) in [(5u64, 2u64, 1u64), (10, 3, 4), (6, 1, 2)] {
        let hits =
            (0..trials).filter(|_| sample(&mut rng, n as usize, k as usize).iter().any(|i| (i as u64) < c)).count();
        let mc = hits as f64 / trials as f64;
        worst = worst.max((pass_at_k(n, c, k).unwrap_or(f64::NAN) - mc).abs());
    }
    let exact = pass_at_k(4, 0, 2).ok() == Some(0.0) && pass_at_k(4, 4, 2).ok() == Some(1.0);
    line("pass@k oracle", worst < 0.02 && exact, format!("max deviation {worst:.4}"))
}

fn reconciled(seed: u64) -> CheckLine {
    let verifiers = ["greedy", "sd", "topk:3", "direct", "entropy:3"];
    let mut failures = Vec::new();
    if let Ok(b) = synth_edit(&SynthSpec { draft_noise: 0.3, ..SynthSpec::new(150, 0.5, seed) }) {
        for v in verifiers {
            let target = CountingModel::new(&b.target);
            let cfg = ControllerConfig::with_verifier(VerifierConfig { rng_seed: seed, ..v.parse().expect("label") });
            match run_edit_session(&target, &b.draft, &ByteTokenizer, &b.task, &cfg) {
                Ok(r) if r.counters.is_reconciled() && r.counters.target_forward_passes == target.score_calls() => {}
                _ => failures.push(v),
            }
        }
    } else {
        failures.push("synth");
    }
    let detail = if failures.is_empty() {
        format!("{} verifiers reconcile", verifiers.len())
    } else {
        format!("failed: {}", failures.join(", "))
    };
    line("pass accounting", failures.is_empty(), detail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::normalized_entropy;

    #[test]
    fn clean_build_passes() {
        let r = run_selfcheck(0);
        assert!(r.all_passed(), "{}", r.table());
    }

    #[test]
    fn unclamped_entropy_is_caught() {
        // drops the clamp: a one-hot distribution yields tau = 0
        fn broken(p: &ProbDist, k: usize) -> Result<usize> {
            if k == 1 {
                return Ok(1);
            }
            Ok((k as f64 * normalized_entropy(p, k) - 1e-9).ceil() as usize)
        }
        let r = run_selfcheck_with(0, broken);
        assert!(!r.all_passed());
        assert!(!r.checks.iter().find(|c| c.name == "entropy thresholds").unwrap().passed);
    }

    #[test]
    fn repeatable() {
        assert_eq!(run_selfcheck(3), run_selfcheck(3));
    }
}
