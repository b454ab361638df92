use std::sync::Arc;

use editdraft::bench::{
    aggregate, analytic_speedup, pass_at_k, quantile, run_corpus, BenchCase, CorpusSettings, CostModel, Execution,
};
use editdraft::model::{autoregressive_decode_counted, ByteTokenizer, TableModel, BYTE_EOS};
use editdraft::synth::{synth_edit, synth_reuse_sweep, SynthSpec};
use editdraft::{ProbDist, RunCounters, VerifierConfig};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cases(n: u64) -> Vec<BenchCase> {
    (0..n).map(|s| BenchCase::from_bundle(synth_edit(&SynthSpec::new(80 + 20 * s as usize, 0.6, s)).unwrap())).collect()
}

fn settings(execution: Execution) -> CorpusSettings {
    CorpusSettings {
        verifiers: vec![VerifierConfig::default(), "sd".parse().unwrap(), "entropy:3".parse().unwrap()],
        execution,
        seed: 17,
        ..Default::default()
    }
}

#[test]
fn one_task_two_verifiers_two_rows() {
    let s = CorpusSettings {
        verifiers: vec![VerifierConfig::default(), VerifierConfig::entropy(3)],
        execution: Execution::Sequential,
        ..Default::default()
    };
    let report = run_corpus(&cases(1), &s, &ByteTokenizer).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.wall_clock.len(), 2);
    assert_eq!(report.aggregate.len(), 2);
}

#[test]
fn reports_are_reproducible_and_independent_of_execution() {
    let c = cases(4);
    let a = run_corpus(&c, &settings(Execution::Sequential), &ByteTokenizer).unwrap();
    let b = run_corpus(&c, &settings(Execution::Sequential), &ByteTokenizer).unwrap();
    let p = run_corpus(&c, &settings(Execution::Parallel { jobs: Some(3) }), &ByteTokenizer).unwrap();
    assert_eq!(a.deterministic_json().unwrap(), b.deterministic_json().unwrap());
    assert_eq!(a.deterministic_json().unwrap(), p.deterministic_json().unwrap());
    assert!(!a.deterministic_json().unwrap().contains("wall_clock"));
    assert!(a.to_json().unwrap().contains("wall_clock"));
}

#[test]
fn failing_cell_is_recorded_not_fatal() {
    let mut c = cases(2);
    // a draft over a different vocabulary cannot share the stream
    c[0].draft = Arc::new(TableModel::new(2, 300, ProbDist::one_hot(BYTE_EOS)));
    let report = run_corpus(&c, &settings(Execution::Sequential), &ByteTokenizer).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert!(report.rows[..3].iter().all(|r| r.status == "error"));
    assert!(report.rows[0].error.as_deref().unwrap().starts_with("InvalidConfig"));
    assert!(report.rows[3..].iter().all(|r| r.status == "ok"));
    assert_eq!(report.aggregate[0].errors, 1);
}

#[test]
fn aggregate_is_recomputable_from_rows() {
    let s = settings(Execution::Sequential);
    let report = run_corpus(&cases(5), &s, &ByteTokenizer).unwrap();
    assert_eq!(report.aggregate, aggregate(&report.rows, &s.verifiers));
    for agg in &report.aggregate {
        let mut sp: Vec<f64> =
            report.rows.iter().filter(|r| r.verifier == agg.verifier).filter_map(|r| r.analytic_speedup).collect();
        let mean = sp.iter().sum::<f64>() / sp.len() as f64;
        assert!((agg.mean_speedup - mean).abs() < 1e-12);
        sp.sort_by(f64::total_cmp);
        assert_eq!(agg.speedup_quantiles.p50, quantile(&sp, 0.5));
    }
}

#[test]
fn csv_has_plot_columns() {
    let report = run_corpus(&cases(2), &settings(Execution::Sequential), &ByteTokenizer).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "task_id,verifier,reuse_rate,speedup,tokens_s,passes_target,passes_draft");
    assert_eq!(lines.count(), 6);
}

#[test]
fn autoregressive_run_has_unit_speedup() {
    let b = synth_edit(&SynthSpec::new(150, 0.4, 3)).unwrap();
    let (out, passes) = autoregressive_decode_counted(&b.target, &b.prompt, 500, BYTE_EOS).unwrap();
    let c = RunCounters {
        target_forward_passes: passes,
        tokens_emitted: out.len() as u64,
        tokens_from_target_fallback: out.len() as u64,
        ..Default::default()
    };
    assert_eq!(analytic_speedup(&c, &CostModel::default()).unwrap(), 1.0);
}

#[test]
fn pass_at_k_agrees_with_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, c, k) = (5usize, 2usize, 1usize);
    let trials = 100_000;
    let hits = (0..trials).filter(|_| sample(&mut rng, n, k).iter().any(|i| i < c)).count();
    let mc = hits as f64 / trials as f64;
    assert!((pass_at_k(n as u64, c as u64, k as u64).unwrap() - mc).abs() < 0.01);
}

#[test]
fn sweep_half_reuse_measures_half() {
    let b = synth_reuse_sweep(&[0.5], 200, 9).unwrap().remove(0);
    let report = run_corpus(
        &[BenchCase::from_bundle(b)],
        &CorpusSettings { execution: Execution::Sequential, ..Default::default() },
        &ByteTokenizer,
    )
    .unwrap();
    let r = report.rows[0].reuse_rate.unwrap();
    // 200 output tokens plus the stop token
    assert!((r * 201.0 / 200.0 - 0.5).abs() <= 0.05, "{r}");
}
