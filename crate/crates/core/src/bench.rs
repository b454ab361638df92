//! Corpus harness and metrics.
//!
//! Speedup is reported two ways. Wall-clock tokens/s depends on the machine
//! and is kept under its own `wall_clock` key. The analytic speedup prices a
//! target pass at 1 and a draft step at `rho`, and compares against plain
//! autoregressive decoding, which costs one target pass per token. It is a
//! pure function of the counters and therefore reproducible.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::controller::{run_edit_session, ControllerConfig, EditOutcome, EditResult};
use crate::counters::RunCounters;
use crate::error::{Error, Result};
use crate::generate::{verify_drafts, VerifierConfig};
use crate::model::{Model, Tokenizer};
use crate::synth::SynthBundle;
use crate::task::EditTask;

pub const REPORT_SCHEMA: &str = "editdraft.run_report/1";
pub const DEFAULT_RHO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Cost of one draft scoring step relative to one target pass.
    pub rho: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { rho: DEFAULT_RHO }
    }
}

impl CostModel {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be positive, got {rho}")));
        }
        Ok(Self { rho })
    }
}

/// Autoregressive cost over modelled cost.
pub fn analytic_speedup(c: &RunCounters, cost: &CostModel) -> Result<f64> {
    if c.tokens_emitted == 0 {
        return Err(Error::Precondition("speedup needs at least one emitted token".into()));
    }
    let spent = c.target_forward_passes as f64 + c.draft_forward_passes as f64 * cost.rho;
    if spent <= 0.0 {
        return Err(Error::Precondition("run recorded no forward passes".into()));
    }
    Ok(c.tokens_emitted as f64 / spent)
}

/// Probability that at least one of `k` samples drawn without replacement
/// from `n` attempts (`c` of them correct) is correct.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::Precondition(format!("pass@k needs 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n-c, k) / C(n, k) = prod_{i=n-c+1}^{n} (1 - k/i)
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// One task with the models that decode it.
#[derive(Clone)]
pub struct BenchCase {
    pub task: EditTask,
    pub target: Arc<dyn Model>,
    pub draft: Arc<dyn Model>,
}

impl BenchCase {
    pub fn from_bundle(b: SynthBundle) -> Self {
        Self { task: b.task, target: Arc::new(b.target), draft: Arc::new(b.draft) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Fan cells out over a pool of `jobs` threads; `None` uses all cores.
    Parallel {
        jobs: Option<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct CorpusSettings {
    pub verifiers: Vec<VerifierConfig>,
    /// Base controller settings; each cell swaps in its verifier.
    pub controller: ControllerConfig,
    pub cost: CostModel,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            verifiers: vec![VerifierConfig::default()],
            controller: ControllerConfig::default(),
            cost: CostModel::default(),
            seed: 0,
            execution: Execution::Parallel { jobs: None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub verifiers: Vec<String>,
    pub rho: f64,
    pub seed: u64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task_id: String,
    pub verifier: String,
    /// `ok`, `truncated` or `error`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub counters: Option<RunCounters>,
    pub reuse_rate: Option<f64>,
    pub analytic_speedup: Option<f64>,
    pub phase_trace_digest: Option<String>,
    pub output_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub verifier: String,
    pub runs: usize,
    pub errors: usize,
    pub mean_speedup: f64,
    pub mean_reuse_rate: f64,
    pub mean_target_passes: f64,
    pub mean_draft_passes: f64,
    pub tokens_emitted: u64,
    pub tokens_from_draft_accepted: u64,
    pub speedup_quantiles: Quantiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKRow {
    pub k: u64,
    /// Tasks with at least `k` recorded attempts.
    pub tasks: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClockRow {
    pub task_id: String,
    pub verifier: String,
    pub wall_time_s: f64,
    pub tokens_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub settings: ReportSettings,
    pub rows: Vec<ReportRow>,
    pub aggregate: Vec<AggregateRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pass_at_k: Vec<PassAtKRow>,
    /// Machine-dependent timings, kept apart from everything reproducible.
    pub wall_clock: Vec<WallClockRow>,
}

/// Per-cell verifier seed, fixed by the corpus seed and the cell position.
fn cell_seed(seed: u64, cell: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Cell<'a> {
    index: usize,
    case: &'a BenchCase,
    verifier: &'a VerifierConfig,
}

fn run_cell(cell: &Cell<'_>, settings: &CorpusSettings, tokenizer: &dyn Tokenizer) -> (ReportRow, WallClockRow) {
    let mut cfg = settings.controller.clone();
    cfg.verifier = VerifierConfig { rng_seed: cell_seed(settings.seed, cell.index), ..cell.verifier.clone() };
    let label = cell.verifier.label();
    let result = run_edit_session(&*cell.case.target, &*cell.case.draft, tokenizer, &cell.case.task, &cfg);
    row_from_result(&cell.case.task.id, &label, result, &settings.cost)
}

fn row_from_result(
    task_id: &str,
    verifier: &str,
    result: Result<EditResult>,
    cost: &CostModel,
) -> (ReportRow, WallClockRow) {
    let mut wall = WallClockRow { task_id: task_id.into(), verifier: verifier.into(), wall_time_s: 0.0, tokens_s: 0.0 };
    let row = match result.and_then(|r| analytic_speedup(&r.counters, cost).map(|s| (r, s))) {
        Ok((r, speedup)) => {
            wall.wall_time_s = r.wall_time_s;
            wall.tokens_s = r.counters.tokens_per_second();
            ReportRow {
                task_id: task_id.into(),
                verifier: verifier.into(),
                status: if r.truncated { "truncated" } else { "ok" }.into(),
                error: None,
                reuse_rate: Some(r.reuse_rate),
                analytic_speedup: Some(speedup),
                phase_trace_digest: Some(r.phase_trace_digest()),
                output_digest: Some(r.output_digest()),
                counters: Some(r.counters),
            }
        }
        Err(e) => ReportRow {
            task_id: task_id.into(),
            verifier: verifier.into(),
            status: "error".into(),
            error: Some(format!("{}: {e}", e.code())),
            counters: None,
            reuse_rate: None,
            analytic_speedup: None,
            phase_trace_digest: None,
            output_digest: None,
        },
    };
    (row, wall)
}

/// Run every (task, verifier) cell. Failing cells become `error` rows.
pub fn run_corpus(cases: &[BenchCase], settings: &CorpusSettings, tokenizer: &dyn Tokenizer) -> Result<RunReport> {
    if settings.verifiers.is_empty() {
        return Err(Error::InvalidConfig("at least one verifier is required".into()));
    }
    CostModel::new(settings.cost.rho)?;
    for v in &settings.verifiers {
        v.validate()?;
    }
    let cells: Vec<Cell<'_>> = cases
        .iter()
        .flat_map(|case| settings.verifiers.iter().map(move |verifier| (case, verifier)))
        .enumerate()
        .map(|(index, (case, verifier))| Cell { index, case, verifier })
        .collect();

    let results: Vec<(ReportRow, WallClockRow)> = match settings.execution {
        Execution::Sequential => cells.iter().map(|c| run_cell(c, settings, tokenizer)).collect(),
        Execution::Parallel { jobs } => run_parallel(&cells, settings, tokenizer, jobs)?,
    };
    let (rows, wall_clock): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(RunReport {
        schema: REPORT_SCHEMA.into(),
        settings: ReportSettings {
            verifiers: settings.verifiers.iter().map(VerifierConfig::label).collect(),
            rho: settings.cost.rho,
            seed: settings.seed,
            tasks: cases.len(),
        },
        aggregate: aggregate(&rows, &settings.verifiers),
        rows,
        pass_at_k: Vec::new(),
        wall_clock,
    })
}

#[cfg(feature = "parallel")]
fn run_parallel(
    cells: &[Cell<'_>],
    settings: &CorpusSettings,
    tokenizer: &dyn Tokenizer,
    jobs: Option<usize>,
) -> Result<Vec<(ReportRow, WallClockRow)>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(|c| run_cell(c, settings, tokenizer)).collect()))
}

#[cfg(not(feature = "parallel"))]
fn run_parallel(
    cells: &[Cell<'_>],
    settings: &CorpusSettings,
    tokenizer: &dyn Tokenizer,
    _jobs: Option<usize>,
) -> Result<Vec<(ReportRow, WallClockRow)>> {
    Ok(cells.iter().map(|c| run_cell(c, settings, tokenizer)).collect())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Linear interpolation between closest ranks.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

/// Per-verifier summary of the successful rows, in verifier order.
pub fn aggregate(rows: &[ReportRow], verifiers: &[VerifierConfig]) -> Vec<AggregateRow> {
    let mut labels: Vec<String> = Vec::new();
    for v in verifiers {
        let l = v.label();
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.verifier == label).collect();
            let ok: Vec<(&RunCounters, f64, f64)> =
                mine.iter().filter_map(|r| Some((r.counters.as_ref()?, r.analytic_speedup?, r.reuse_rate?))).collect();
            let mut speedups: Vec<f64> = ok.iter().map(|x| x.1).collect();
            speedups.sort_by(f64::total_cmp);
            AggregateRow {
                runs: ok.len(),
                errors: mine.len() - ok.len(),
                mean_speedup: mean(&speedups),
                mean_reuse_rate: mean(&ok.iter().map(|x| x.2).collect::<Vec<_>>()),
                mean_target_passes: mean(&ok.iter().map(|x| x.0.target_forward_passes as f64).collect::<Vec<_>>()),
                mean_draft_passes: mean(&ok.iter().map(|x| x.0.draft_forward_passes as f64).collect::<Vec<_>>()),
                tokens_emitted: ok.iter().map(|x| x.0.tokens_emitted).sum(),
                tokens_from_draft_accepted: ok.iter().map(|x| x.0.tokens_from_draft_accepted).sum(),
                speedup_quantiles: Quantiles {
                    p10: quantile(&speedups, 0.1),
                    p50: quantile(&speedups, 0.5),
                    p90: quantile(&speedups, 0.9),
                },
                verifier: label,
            }
        })
        .collect()
}

/// One externally judged attempt at a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub task_id: String,
    pub passed: bool,
}

pub fn parse_outcomes(text: &str) -> Result<Vec<Outcome>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Mean pass@k over tasks for each requested `k`. Tasks with fewer than `k`
/// attempts are left out of that row.
pub fn pass_at_k_summary(outcomes: &[Outcome], ks: &[u64]) -> Result<Vec<PassAtKRow>> {
    let mut per_task: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for o in outcomes {
        let e = per_task.entry(&o.task_id).or_default();
        e.0 += 1;
        e.1 += u64::from(o.passed);
    }
    ks.iter()
        .map(|&k| {
            let vals = per_task
                .values()
                .filter(|(n, _)| *n >= k)
                .map(|&(n, c)| pass_at_k(n, c, k))
                .collect::<Result<Vec<f64>>>()?;
            Ok(PassAtKRow { k, tasks: vals.len(), mean: mean(&vals) })
        })
        .collect()
}

impl RunReport {
    /// The report as JSON without the `wall_clock` key. Two runs with the
    /// same seeds give identical strings.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_clock");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plot-ready rows: task_id, verifier, reuse_rate, speedup, tokens_s,
    /// passes_target, passes_draft. Error rows leave the numbers empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["task_id", "verifier", "reuse_rate", "speedup", "tokens_s", "passes_target", "passes_draft"])
            .map_err(csv_err)?;
        for (row, wall) in self.rows.iter().zip(&self.wall_clock) {
            let opt = |x: Option<String>| x.unwrap_or_default();
            w.write_record([
                row.task_id.clone(),
                row.verifier.clone(),
                opt(row.reuse_rate.map(|x| format!("{x:.6}"))),
                opt(row.analytic_speedup.map(|x| format!("{x:.6}"))),
                opt(row.counters.as_ref().map(|_| format!("{:.3}", wall.tokens_s))),
                opt(row.counters.as_ref().map(|c| c.target_forward_passes.to_string())),
                opt(row.counters.as_ref().map(|c| c.draft_forward_passes.to_string())),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replay the verify rounds recorded by one run under several verifiers and
/// count how many draft tokens each would accept. Every verifier sees the
/// same proposals, so the counts are directly comparable.
pub fn replay_acceptance(outcome: &EditOutcome, verifiers: &[VerifierConfig]) -> Result<Vec<u64>> {
    use rand::SeedableRng;
    verifiers
        .iter()
        .map(|v| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(v.rng_seed);
            let mut scratch = RunCounters::default();
            let mut total = 0u64;
            for r in &outcome.rounds {
                let out = verify_drafts(v, &r.target, &r.drafts, &r.draft_dists, None, &mut rng, &mut scratch)?;
                total += out.accepted.len() as u64;
            }
            Ok(total)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counters(tokens: u64, target: u64, draft: u64) -> RunCounters {
        RunCounters {
            tokens_emitted: tokens,
            target_forward_passes: target,
            draft_forward_passes: draft,
            ..Default::default()
        }
    }

    #[test]
    fn speedup_examples() {
        let cm = CostModel::default();
        assert_eq!(analytic_speedup(&counters(100, 1, 0), &cm).unwrap(), 100.0);
        assert_eq!(analytic_speedup(&counters(100, 100, 0), &cm).unwrap(), 1.0);
        let s = analytic_speedup(&counters(100, 10, 70), &cm).unwrap();
        assert!((s - 100.0 / 17.0).abs() < 1e-12);
        assert!(analytic_speedup(&counters(0, 1, 0), &cm).is_err());
        assert!(CostModel::new(0.0).is_err());
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(1, 1, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(7, 0, 3).unwrap(), 0.0);
        assert!((pass_at_k(5, 2, 1).unwrap() - 0.4).abs() < 1e-12);
        assert!(pass_at_k(3, 4, 1).is_err());
        assert!(pass_at_k(3, 1, 0).is_err());
        assert!(pass_at_k(3, 1, 4).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&xs, 0.5), 3.0);
        assert!((quantile(&xs, 0.1) - 1.4).abs() < 1e-12);
        assert_eq!(quantile(&[], 0.5), 0.0);
    }

    #[test]
    fn pass_at_k_summary_skips_short_tasks() {
        let o = |id: &str, p| Outcome { task_id: id.into(), passed: p };
        let outcomes = vec![o("a", true), o("a", false), o("b", false)];
        let rows = pass_at_k_summary(&outcomes, &[1, 2]).unwrap();
        assert_eq!(rows[0].tasks, 2);
        assert!((rows[0].mean - 0.25).abs() < 1e-12);
        assert_eq!(rows[1].tasks, 1);
        assert_eq!(rows[1].mean, 1.0);
    }

    #[test]
    fn cell_seeds_differ() {
        assert_ne!(cell_seed(0, 0), cell_seed(0, 1));
        assert_eq!(cell_seed(5, 3), cell_seed(5, 3));
    }
}
