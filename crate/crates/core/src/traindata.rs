//! Fine-tuning data for edit models.
//!
//! Lines of the edited code are split into reused (R) lines, copied from the
//! input, and generated (G) lines. Only tokens of G lines contribute to the
//! loss, so the model is not trained to echo code it will get for free at
//! decode time.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::{ProbDist, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::model::Tokenizer;

/// Floor applied to the probability of a label before taking its log.
pub const LOSS_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineTag {
    R,
    G,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineLabel {
    pub line_index: usize,
    /// Line content without its terminator.
    pub text: String,
    pub label: LineTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffMode {
    /// Ordered alignment; duplicates and moved lines are handled.
    #[default]
    Lcs,
    /// A line is reused if it occurs anywhere in the input.
    Set,
}

impl FromStr for DiffMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lcs" => Ok(DiffMode::Lcs),
            "set" => Ok(DiffMode::Set),
            other => Err(Error::InvalidConfig(format!("unknown diff mode {other:?} (expected lcs or set)"))),
        }
    }
}

impl fmt::Display for DiffMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiffMode::Lcs => "lcs",
            DiffMode::Set => "set",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassifyOptions {
    pub mode: DiffMode,
    /// Ignore trailing whitespace when comparing lines.
    pub trim: bool,
}

/// Input pair for data preparation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    #[serde(default)]
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub code_before: String,
    pub code_after: String,
}

impl EditPair {
    pub fn parse_jsonl(text: &str) -> Result<Vec<EditPair>> {
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedRecord {
    pub instruction: String,
    pub code_before: String,
    pub code_after: String,
    pub target_tokens: TokenSeq,
    /// 1 where the token counts towards the loss.
    pub loss_mask: Vec<u8>,
    /// No generated line at all; kept so a pipeline can decide to drop it.
    pub empty_g: bool,
}

/// Lines with their terminators, in order. A trailing newline does not start
/// a new empty line.
pub fn split_lines(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

fn strip_eol(line: &str) -> &str {
    let l = line.strip_suffix('\n').unwrap_or(line);
    l.strip_suffix('\r').unwrap_or(l)
}

fn key<'a>(line: &'a str, opts: &ClassifyOptions) -> &'a str {
    let l = strip_eol(line);
    if opts.trim {
        l.trim_end()
    } else {
        l
    }
}

/// Indices of `b` that take part in one longest common subsequence of `a`
/// and `b`.
fn lcs_matched<T: PartialEq>(a: &[T], b: &[T]) -> Vec<bool> {
    let (n, m) = (a.len(), b.len());
    // suffix table: t[i][j] = LCS of a[i..] and b[j..]
    let w = m + 1;
    let mut t = vec![0u32; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            t[i * w + j] =
                if a[i] == b[j] { t[(i + 1) * w + j + 1] + 1 } else { t[(i + 1) * w + j].max(t[i * w + j + 1]) };
        }
    }
    let mut matched = vec![false; m];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            matched[j] = true;
            i += 1;
            j += 1;
        } else if t[(i + 1) * w + j] >= t[i * w + j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    matched
}

pub fn classify_lines(code_before: &str, code_after: &str) -> Vec<LineLabel> {
    classify_lines_with(code_before, code_after, &ClassifyOptions::default())
}

pub fn classify_lines_with(code_before: &str, code_after: &str, opts: &ClassifyOptions) -> Vec<LineLabel> {
    let before: Vec<&str> = split_lines(code_before).into_iter().map(|l| key(l, opts)).collect();
    let after_raw = split_lines(code_after);
    let after: Vec<&str> = after_raw.iter().map(|l| key(l, opts)).collect();
    let reused = match opts.mode {
        DiffMode::Lcs => lcs_matched(&before, &after),
        DiffMode::Set => {
            let set: std::collections::HashSet<&str> = before.iter().copied().collect();
            after.iter().map(|l| set.contains(l)).collect()
        }
    };
    after_raw
        .iter()
        .zip(reused)
        .enumerate()
        .map(|(i, (line, r))| LineLabel {
            line_index: i,
            text: strip_eol(line).to_string(),
            label: if r { LineTag::R } else { LineTag::G },
        })
        .collect()
}

/// Share of lines labelled R; 0 for empty output.
pub fn line_reuse_fraction(labels: &[LineLabel]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|l| l.label == LineTag::R).count() as f64 / labels.len() as f64
}

/// Byte span of every line of `text`, terminators included.
pub fn line_spans(text: &str) -> Vec<Range<usize>> {
    let mut start = 0;
    split_lines(text)
        .into_iter()
        .map(|l| {
            let r = start..start + l.len();
            start = r.end;
            r
        })
        .collect()
}

/// Tokenize `pair.code_after` and mark the tokens that belong to G lines.
/// A token that straddles lines takes the label of the line holding its
/// first byte.
pub fn build_token_mask(pair: &EditPair, labels: &[LineLabel], tokenizer: &dyn Tokenizer) -> Result<MaskedRecord> {
    let spans = line_spans(&pair.code_after);
    if spans.len() != labels.len() {
        return Err(Error::LengthMismatch(format!("{} lines but {} labels", spans.len(), labels.len())));
    }
    let toks = tokenizer.encode_with_offsets(&pair.code_after)?;
    let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
    let mut target_tokens = Vec::with_capacity(toks.len());
    let mut loss_mask = Vec::with_capacity(toks.len());
    for (t, span) in toks {
        let line = starts.partition_point(|&s| s <= span.start).saturating_sub(1);
        target_tokens.push(t);
        loss_mask.push(u8::from(labels.get(line).is_some_and(|l| l.label == LineTag::G)));
    }
    Ok(MaskedRecord {
        instruction: pair.instruction.clone(),
        code_before: pair.code_before.clone(),
        code_after: pair.code_after.clone(),
        target_tokens,
        loss_mask,
        empty_g: labels.iter().all(|l| l.label == LineTag::R),
    })
}

/// Summed negative log-likelihood over masked-in positions and how many
/// positions were counted.
pub fn masked_loss(dists: &[ProbDist], labels: &[TokenId], mask: &[u8]) -> Result<(f64, usize)> {
    masked_loss_with_floor(dists, labels, mask, LOSS_EPSILON)
}

pub fn masked_loss_with_floor(dists: &[ProbDist], labels: &[TokenId], mask: &[u8], eps: f64) -> Result<(f64, usize)> {
    if dists.len() != labels.len() || labels.len() != mask.len() {
        return Err(Error::LengthMismatch(format!(
            "{} distributions, {} labels, {} mask bits",
            dists.len(),
            labels.len(),
            mask.len()
        )));
    }
    let mut loss = 0.0;
    let mut counted = 0;
    for ((d, &t), &m) in dists.iter().zip(labels).zip(mask) {
        if m != 0 {
            loss -= d.prob_or_zero(t).max(eps).ln();
            counted += 1;
        }
    }
    Ok((loss, counted))
}

/// Classify and mask one pair.
pub fn prepare_record(pair: &EditPair, opts: &ClassifyOptions, tokenizer: &dyn Tokenizer) -> Result<MaskedRecord> {
    let labels = classify_lines_with(&pair.code_before, &pair.code_after, opts);
    build_token_mask(pair, &labels, tokenizer)
}

pub fn prepare_records(
    pairs: &[EditPair],
    opts: &ClassifyOptions,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<MaskedRecord>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        pairs.par_iter().map(|p| prepare_record(p, opts, tokenizer)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        pairs.iter().map(|p| prepare_record(p, opts, tokenizer)).collect()
    }
}

/// Write one JSON record per line. Records are prepared up front, then
/// written in input order through a single writer.
pub fn export_records(
    pairs: &[EditPair],
    opts: &ClassifyOptions,
    tokenizer: &dyn Tokenizer,
    out_path: &Path,
) -> Result<usize> {
    let records = prepare_records(pairs, opts, tokenizer)?;
    let mut w = BufWriter::new(File::create(out_path)?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records.len())
}

pub fn read_records(text: &str) -> Result<Vec<MaskedRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ByteTokenizer;
    use LineTag::{G, R};

    fn tags(labels: &[LineLabel]) -> Vec<LineTag> {
        labels.iter().map(|l| l.label).collect()
    }

    #[test]
    fn identity_edit_is_all_reused() {
        let code = "a\nb\nc\n";
        assert_eq!(tags(&classify_lines(code, code)), vec![R, R, R]);
    }

    #[test]
    fn inserted_line_is_generated() {
        assert_eq!(tags(&classify_lines("A\nB\nC\n", "A\nX\nB\nC\n")), vec![R, G, R, R]);
    }

    #[test]
    fn lcs_and_set_differ_on_moved_lines() {
        let before = "a\nb\n";
        let after = "b\na\n";
        let lcs = classify_lines(before, after);
        assert_eq!(lcs.iter().filter(|l| l.label == G).count(), 1);
        let set = classify_lines_with(before, after, &ClassifyOptions { mode: DiffMode::Set, trim: false });
        assert_eq!(tags(&set), vec![R, R]);
    }

    #[test]
    fn duplicates_are_counted_once_under_lcs() {
        assert_eq!(tags(&classify_lines("}\n", "}\n}\n")), vec![R, G]);
    }

    #[test]
    fn trim_ignores_trailing_whitespace() {
        assert_eq!(tags(&classify_lines("x = 1\n", "x = 1  \n")), vec![G]);
        let opts = ClassifyOptions { trim: true, ..Default::default() };
        assert_eq!(tags(&classify_lines_with("x = 1\n", "x = 1  \n", &opts)), vec![R]);
    }

    #[test]
    fn missing_final_newline_still_matches() {
        assert_eq!(tags(&classify_lines("a\nb\n", "a\nb")), vec![R, R]);
    }

    #[test]
    fn mask_covers_exactly_the_new_line() {
        let pair = EditPair {
            id: "t".into(),
            instruction: "i".into(),
            code_before: "A\nB\nC\n".into(),
            code_after: "A\nX\nB\nC\n".into(),
        };
        let labels = classify_lines(&pair.code_before, &pair.code_after);
        let rec = build_token_mask(&pair, &labels, &ByteTokenizer).unwrap();
        assert_eq!(rec.loss_mask, vec![0, 0, 1, 1, 0, 0, 0, 0]);
        assert!(!rec.empty_g);
    }

    #[test]
    fn tokenizer_without_offsets_is_rejected() {
        struct NoOffsets;
        impl Tokenizer for NoOffsets {
            fn encode(&self, t: &str) -> TokenSeq {
                ByteTokenizer.encode(t)
            }
            fn decode(&self, t: &[TokenId]) -> Result<String> {
                ByteTokenizer.decode(t)
            }
            fn vocab_size(&self) -> usize {
                257
            }
            fn eos(&self) -> TokenId {
                crate::model::BYTE_EOS
            }
        }
        let pair =
            EditPair { id: "t".into(), instruction: "i".into(), code_before: "a\n".into(), code_after: "b\n".into() };
        let labels = classify_lines(&pair.code_before, &pair.code_after);
        assert!(matches!(build_token_mask(&pair, &labels, &NoOffsets), Err(Error::OffsetsUnavailable)));
    }

    #[test]
    fn two_token_loss() {
        let d = vec![
            ProbDist::from_pairs(&[(1, 0.5), (2, 0.5)]).unwrap(),
            ProbDist::from_pairs(&[(1, 0.75), (2, 0.25)]).unwrap(),
        ];
        let (loss, n) = masked_loss(&d, &[TokenId(1), TokenId(2)], &[1, 1]).unwrap();
        let expected = -(0.5f64.ln() + 0.25f64.ln());
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 2.0794).abs() < 1e-4);
        assert_eq!(n, 2);
        assert_eq!(masked_loss(&d, &[TokenId(1), TokenId(2)], &[0, 0]).unwrap(), (0.0, 0));
        assert!(masked_loss(&d, &[TokenId(1)], &[1]).is_err());
    }

    #[test]
    fn missing_label_hits_the_floor() {
        let d = vec![ProbDist::one_hot(TokenId(1))];
        let (loss, _) = masked_loss(&d, &[TokenId(9)], &[1]).unwrap();
        assert!((loss + LOSS_EPSILON.ln()).abs() < 1e-12);
    }
}
