//! Scripted (target, draft) pairs with a known edit.
//!
//! The target is a [`TableModel`] whose greedy continuation of the task
//! prompt is exactly a constructed edited sequence: blocks copied from the
//! original code interleaved with new blocks drawn from a disjoint alphabet.
//! The draft shares the target's rule keys but picks a different top token
//! at a controllable fraction of them.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::render_prompt;
use crate::dist::{ProbDist, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{ByteTokenizer, TableModel, Tokenizer, BYTE_EOS, DEFAULT_WINDOW};
use crate::task::EditTask;

const ORIGINAL_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789 _.";
const NEW_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ+-*/=<>(){};,!?";
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// One reused block at the start, the new block after it.
    Head,
    /// `hunks` edit sites spread over the file.
    Split { hunks: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Length of the original code and of the edited output, in tokens.
    pub size: usize,
    pub reuse_rate: f64,
    pub layout: Layout,
    /// Fraction of rules where the draft's top token disagrees with the target,
    /// spaced evenly along the script.
    pub draft_noise: f64,
    pub window: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(size: usize, reuse_rate: f64, seed: u64) -> Self {
        Self { size, reuse_rate, layout: Layout::Head, draft_noise: 0.1, window: DEFAULT_WINDOW, seed }
    }
}

#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub task: EditTask,
    pub target: TableModel,
    pub draft: TableModel,
    pub prompt: TokenSeq,
    pub original: TokenSeq,
    /// The target's greedy output, stop token included.
    pub script: TokenSeq,
    /// Tokens of `script` copied from `original`.
    pub reused_in_script: usize,
}

fn split<R: Rng>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    if parts == 1 {
        return vec![total];
    }
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.gen_range(0..=total)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

fn draw<R: Rng>(alphabet: &[u8], n: usize, rng: &mut R) -> TokenSeq {
    (0..n).map(|_| TokenId(*alphabet.choose(rng).unwrap() as u32)).collect()
}

fn dist(pairs: Vec<(TokenId, f64)>) -> ProbDist {
    ProbDist::new(pairs, crate::dist::DEFAULT_TOP_N).expect("synthetic distribution is valid")
}

/// Target distribution with `top` as a clear argmax and a few alternates.
fn target_dist<R: Rng>(top: TokenId, rng: &mut R) -> ProbDist {
    let p_top: f64 = rng.gen_range(0.35..0.97);
    let n_alt = rng.gen_range(0..=5usize);
    let mut pairs = vec![(top, p_top)];
    let budget = (1.0 - p_top) * rng.gen_range(0.3..1.0);
    let weights: Vec<f64> = (0..n_alt).map(|_| rng.gen_range(0.05..1.0)).collect();
    let wsum: f64 = weights.iter().sum();
    for w in weights {
        let t = loop {
            let c = TokenId(*[ORIGINAL_ALPHABET, NEW_ALPHABET].concat().choose(rng).unwrap() as u32);
            if pairs.iter().all(|p| p.0 != c) {
                break c;
            }
        };
        pairs.push((t, (budget * w / wsum).min(p_top * 0.9)));
    }
    dist(pairs)
}

/// Draft distribution around the target's; its top token differs when `disagree`.
fn draft_dist<R: Rng>(target: &ProbDist, disagree: bool, rng: &mut R) -> ProbDist {
    let want = target.entries()[0].0;
    let top = if disagree {
        if target.len() > 1 && rng.gen_bool(0.6) {
            // a plausible alternative the target itself ranks highly
            target.entries()[rng.gen_range(1..target.len().min(4))].0
        } else {
            loop {
                let c = TokenId(*NEW_ALPHABET.choose(rng).unwrap() as u32);
                if c != want {
                    break c;
                }
            }
        }
    } else {
        want
    };
    let p_top: f64 = rng.gen_range(0.4..0.95);
    let mut pairs = vec![(top, p_top)];
    if top != want {
        pairs.push((want, (1.0 - p_top) * 0.8));
    } else if let Some(&(alt, _)) = target.entries().get(1) {
        pairs.push((alt, (1.0 - p_top) * 0.5));
    }
    dist(pairs)
}

/// Build one scripted pair.
pub fn synth_edit(spec: &SynthSpec) -> Result<SynthBundle> {
    if !(0.0..=1.0).contains(&spec.reuse_rate) {
        return Err(Error::InvalidConfig(format!("reuse rate {} outside [0, 1]", spec.reuse_rate)));
    }
    if spec.size == 0 || spec.window == 0 {
        return Err(Error::InvalidConfig("size and window must be positive".into()));
    }
    let hunks = match spec.layout {
        Layout::Head => 1,
        Layout::Split { hunks } => hunks.max(1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tok = ByteTokenizer;
    let reused = (spec.reuse_rate * spec.size as f64).round() as usize;
    let fresh = spec.size - reused;

    for _ in 0..MAX_ATTEMPTS {
        let original = draw(ORIGINAL_ALPHABET, spec.size, &mut rng);
        let kept = match spec.layout {
            Layout::Head => vec![reused, 0],
            Layout::Split { .. } => split(reused, hunks + 1, &mut rng),
        };
        let gaps = split(spec.size - reused, hunks, &mut rng);
        let inserts = split(fresh, hunks, &mut rng);

        let mut script = Vec::with_capacity(spec.size + 1);
        let mut pos = 0;
        for i in 0..=hunks {
            script.extend_from_slice(&original[pos..pos + kept[i]]);
            pos += kept[i];
            if i < hunks {
                pos += gaps[i];
                script.extend(draw(NEW_ALPHABET, inserts[i], &mut rng));
            }
        }
        script.push(BYTE_EOS);

        let code_before = tok.decode(&original)?;
        let instruction = format!("synthetic edit {}", spec.seed);
        let prompt = tok.encode(&render_prompt(&instruction, &code_before));

        // every position of the output must be predicted by a unique window
        let full: TokenSeq = prompt.iter().chain(&script).copied().collect();
        let mut next_of: HashMap<&[TokenId], TokenId> = HashMap::new();
        let mut order: Vec<&[TokenId]> = Vec::new();
        let consistent = (prompt.len()..full.len()).all(|i| {
            let key = &full[i.saturating_sub(spec.window)..i];
            match next_of.insert(key, full[i]) {
                None => {
                    order.push(key);
                    true
                }
                Some(prev) => prev == full[i],
            }
        });
        if !consistent {
            continue;
        }

        let fallback_t = dist(vec![(BYTE_EOS, 0.6), (TokenId(b'a' as u32), 0.2), (TokenId(b'A' as u32), 0.1)]);
        let fallback_d = dist(vec![(TokenId(*NEW_ALPHABET.choose(&mut rng).unwrap() as u32), 0.5), (BYTE_EOS, 0.2)]);
        let mut target = TableModel::new(spec.window, tok.vocab_size(), fallback_t);
        let mut draft = TableModel::new(spec.window, tok.vocab_size(), fallback_d);
        // disagreements are spread evenly, so every pair gets the same share
        let noise = spec.draft_noise.clamp(0.0, 1.0);
        let phase: f64 = rng.gen();
        for (j, key) in order.into_iter().enumerate() {
            let disagree = ((j + 1) as f64 * noise + phase).floor() > (j as f64 * noise + phase).floor();
            let p = target_dist(next_of[key], &mut rng);
            let q = draft_dist(&p, disagree, &mut rng);
            target.insert_rule(key, p)?;
            draft.insert_rule(key, q)?;
        }

        let task = EditTask {
            id: format!("synth-{}-r{:.2}", spec.seed, spec.reuse_rate),
            instruction,
            code_before,
            code_after_ref: Some(tok.decode(&script)?),
            max_new_tokens: spec.size + 64,
        };
        return Ok(SynthBundle { task, target, draft, prompt, original, script, reused_in_script: reused });
    }
    Err(Error::InvalidConfig(format!("could not build a consistent script for seed {}", spec.seed)))
}

/// One bundle per reuse rate, same size, head layout.
pub fn synth_reuse_sweep(rates: &[f64], size: usize, seed: u64) -> Result<Vec<SynthBundle>> {
    rates
        .iter()
        .enumerate()
        .map(|(i, &rate)| synth_edit(&SynthSpec::new(size, rate, seed.wrapping_add(i as u64))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::autoregressive_decode;

    #[test]
    fn full_reuse_script_is_the_original() {
        let b = synth_edit(&SynthSpec::new(120, 1.0, 3)).unwrap();
        assert_eq!(&b.script[..b.script.len() - 1], &b.original[..]);
        assert_eq!(b.reused_in_script, 120);
    }

    #[test]
    fn zero_reuse_script_is_disjoint() {
        let b = synth_edit(&SynthSpec::new(120, 0.0, 4)).unwrap();
        assert!(b.script.iter().all(|t| !b.original.contains(t)));
    }

    #[test]
    fn target_greedy_output_is_the_script() {
        for (seed, layout) in [(1, Layout::Head), (2, Layout::Split { hunks: 3 })] {
            let spec = SynthSpec { layout, ..SynthSpec::new(200, 0.5, seed) };
            let b = synth_edit(&spec).unwrap();
            let ar = autoregressive_decode(&b.target, &b.prompt, 1000, BYTE_EOS).unwrap();
            assert_eq!(ar, b.script);
        }
    }

    #[test]
    fn split_layout_reuses_requested_count() {
        let spec = SynthSpec { layout: Layout::Split { hunks: 2 }, ..SynthSpec::new(200, 0.5, 9) };
        let b = synth_edit(&spec).unwrap();
        assert_eq!(b.script.len(), 201);
        let from_original = b.script.iter().filter(|t| ORIGINAL_ALPHABET.contains(&(t.0 as u8)) && t.0 < 256).count();
        assert_eq!(from_original, 100);
    }

    #[test]
    fn bad_rate_rejected() {
        assert!(synth_edit(&SynthSpec::new(10, 1.5, 0)).is_err());
    }
}
