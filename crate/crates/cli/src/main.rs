//! `editdraft`: run edits, benchmarks, data preparation and self-checks.
//!
//! Exit codes: 0 success, 1 error, 2 output truncated by the token budget.

mod config;

use std::fs;
use std::io::{self, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use editdraft::bench::{parse_outcomes, pass_at_k_summary, run_corpus, BenchCase, CorpusSettings, Execution};
use editdraft::controller::{run_edit_session, ControllerConfig, EditResult};
use editdraft::model::wire::serve;
use editdraft::selfcheck::run_selfcheck;
use editdraft::synth::{synth_edit, Layout, SynthSpec};
use editdraft::traindata::{export_records, ClassifyOptions, DiffMode, EditPair};
use editdraft::{ByteTokenizer, EditTask, TableModel};
use serde::Serialize;

use config::Settings;

#[derive(Parser)]
#[command(name = "editdraft", version, about = "Edit-oriented speculative decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one edit task and print the edited code.
    Edit(EditArgs),
    /// Run a task corpus under several verifiers and write a report.
    Bench(BenchArgs),
    /// Turn (before, after) pairs into loss-masked training records.
    PrepData(PrepArgs),
    /// Run the built-in invariant suite.
    Selfcheck(SelfcheckArgs),
    /// Serve a table model over the line-delimited JSON protocol.
    Serve(ServeArgs),
    /// Write a synthetic task with scripted target and draft models.
    Synth(SynthArgs),
}

/// Settings shared by every decoding command. Each may also come from
/// `--config`; flags take precedence over the file.
#[derive(Args, Debug, Default)]
struct RunFlags {
    /// Config file: a JSON object or `key = value` lines
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// greedy, sd, direct, entropy[:k] or topk:n [default: greedy]
    #[arg(long)]
    verifier: Option<String>,
    /// Base entropy threshold k for the entropy verifier [default: 3]
    #[arg(long)]
    entropy_k: Option<usize>,
    /// Draft tokens proposed per generate round [default: 7]
    #[arg(long)]
    gamma: Option<usize>,
    /// Seed for sampled acceptance tests [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed acceptance threshold for sd instead of sampling it [default: sampled]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Shortest suffix match that resumes reuse [default: 8]
    #[arg(long)]
    min_match: Option<usize>,
    /// Emitted tokens searched when matching back into the original [default: 32]
    #[arg(long)]
    match_window: Option<usize>,
    /// Cap on generated tokens, below the task's own budget [default: task budget]
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Longest stretch of original code offered per reuse pass [default: unlimited]
    #[arg(long)]
    max_reuse_draft: Option<usize>,
    /// Do not emit the target's token after a reuse verification [default: off]
    #[arg(long)]
    no_reuse_bonus: bool,
    /// Target model: table JSON path or tcp://host:port
    #[arg(long)]
    target: Option<String>,
    /// Draft model: table JSON path or tcp://host:port [default: the target]
    #[arg(long)]
    draft: Option<String>,
    /// Distribution depth requested from backends [default: 64]
    #[arg(long)]
    top_n: Option<usize>,
    /// Backend I/O timeout in seconds [default: 30]
    #[arg(long)]
    timeout_s: Option<f64>,
}

impl RunFlags {
    fn settings(&self) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        let flags = Settings {
            verifier: self.verifier.clone(),
            entropy_k: self.entropy_k,
            gamma: self.gamma,
            seed: self.seed,
            epsilon: self.epsilon,
            min_match: self.min_match,
            match_window: self.match_window,
            max_new_tokens: self.max_new_tokens,
            max_reuse_draft: self.max_reuse_draft,
            no_reuse_bonus: self.no_reuse_bonus.then_some(true),
            target: self.target.clone(),
            draft: self.draft.clone(),
            top_n: self.top_n,
            timeout_s: self.timeout_s,
            ..Default::default()
        };
        Ok(file.overlay(&flags))
    }
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Task JSON {id, instruction, code_before, ...}; `-` or absent reads stdin
    #[arg(long, value_name = "FILE")]
    task: Option<PathBuf>,
    /// Write the full result (counters, phase trace, per-token audit) here
    #[arg(long, value_name = "FILE")]
    result: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Newline-delimited task JSON
    #[arg(long, value_name = "FILE")]
    tasks: PathBuf,
    /// Comma-separated verifiers [default: greedy,entropy,sd]
    #[arg(long)]
    verifiers: Option<String>,
    /// Report JSON output [default: stdout]
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Plot-ready CSV output
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Worker threads for corpus cells; 1 runs sequentially [default: all cores]
    #[arg(long)]
    jobs: Option<usize>,
    /// Draft step cost relative to a target pass [default: 0.1]
    #[arg(long)]
    rho: Option<f64>,
    /// Newline-delimited {task_id, passed} results for pass@k
    #[arg(long, value_name = "FILE")]
    outcomes: Option<PathBuf>,
    /// Comma-separated k values for pass@k [default: 1]
    #[arg(long)]
    pass_k: Option<String>,
}

#[derive(Args)]
struct PrepArgs {
    /// Newline-delimited {id, instruction, code_before, code_after}
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Newline-delimited training records
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Ignore trailing whitespace when comparing lines [default: off]
    #[arg(long)]
    trim: bool,
    /// Line classification: lcs or set
    #[arg(long, default_value = "lcs")]
    diff_mode: String,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Seed for the generated pairs and samplers
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the report as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Table model JSON
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Address to bind
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Output length in tokens
    #[arg(long, default_value_t = 200)]
    size: usize,
    /// Share of the output copied from the original
    #[arg(long, default_value_t = 0.5)]
    reuse_rate: f64,
    /// Share of rules where the draft disagrees with the target
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Edit sites; 0 puts one new block after a single reused block
    #[arg(long, default_value_t = 0)]
    hunks: usize,
    /// Seed for the synthetic pair
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for task.json, target.json and draft.json
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let code = e.chain().find_map(|c| c.downcast_ref::<editdraft::Error>()).map(|e| e.code());
            match code {
                Some(code) => eprintln!("error: {code}: {e:#}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Edit(a) => cmd_edit(a),
        Command::Bench(a) => cmd_bench(a),
        Command::PrepData(a) => cmd_prep(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) if p != Path::new("-") => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        _ => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn parse_one_task(text: &str) -> Result<EditTask> {
    if let Ok(t) = serde_json::from_str::<EditTask>(text) {
        t.validate()?;
        return Ok(t);
    }
    let mut tasks = EditTask::parse_jsonl(text).context("task input is neither a JSON object nor JSON lines")?;
    if tasks.len() != 1 {
        bail!("edit takes exactly one task, got {}", tasks.len());
    }
    Ok(tasks.remove(0))
}

#[derive(Serialize)]
struct ResultDoc<'a> {
    #[serde(flatten)]
    result: &'a EditResult,
    per_token_rank: Vec<Option<usize>>,
    per_token_tau: Vec<Option<usize>>,
    phase_trace_digest: String,
    output_digest: String,
    config: &'a ControllerConfig,
}

fn cmd_edit(a: EditArgs) -> Result<ExitCode> {
    let s = a.run.settings()?;
    let cfg = s.controller(s.verifier_from(s.verifier.as_deref().unwrap_or("greedy"))?)?;
    let task = parse_one_task(&read_input(a.task.as_deref())?)?;
    let target = s.target_model()?;
    let draft = s.draft_model()?;
    let r = run_edit_session(&*target, &*draft, &ByteTokenizer, &task, &cfg)?;
    let mut out = io::stdout().lock();
    out.write_all(r.text.as_bytes())?;
    out.flush()?;
    if let Some(path) = &a.result {
        let doc = ResultDoc {
            per_token_rank: r.audit.iter().map(|x| x.rank).collect(),
            per_token_tau: r.audit.iter().map(|x| x.tau).collect(),
            phase_trace_digest: r.phase_trace_digest(),
            output_digest: r.output_digest(),
            result: &r,
            config: &cfg,
        };
        fs::write(path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!(
        "{}: {} tokens, reuse {:.2}, {} target / {} draft passes",
        r.verifier,
        r.counters.tokens_emitted,
        r.reuse_rate,
        r.counters.target_forward_passes,
        r.counters.draft_forward_passes
    );
    if r.truncated {
        eprintln!("warning: output truncated at the token budget");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let mut s = a.run.settings()?;
    s = s.overlay(&Settings { rho: a.rho, jobs: a.jobs, ..Default::default() });
    let verifiers = a
        .verifiers
        .as_deref()
        .unwrap_or("greedy,entropy,sd")
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| s.verifier_from(v.trim()))
        .collect::<Result<Vec<_>>>()?;
    let controller = s.controller(verifiers.first().cloned().unwrap_or_default())?;
    let tasks = EditTask::parse_jsonl(&read_input(Some(&a.tasks))?)?;
    let target = s.target_model()?;
    let draft = s.draft_model()?;
    let cases: Vec<BenchCase> =
        tasks.into_iter().map(|task| BenchCase { task, target: target.clone(), draft: draft.clone() }).collect();
    let execution = match s.jobs {
        Some(1) => Execution::Sequential,
        jobs => Execution::Parallel { jobs },
    };
    let settings = CorpusSettings { verifiers, controller, cost: s.cost()?, seed: s.seed.unwrap_or(0), execution };
    let mut report = run_corpus(&cases, &settings, &ByteTokenizer)?;
    if let Some(path) = &a.outcomes {
        let ks = a
            .pass_k
            .as_deref()
            .unwrap_or("1")
            .split(',')
            .map(|k| k.trim().parse::<u64>().with_context(|| format!("bad pass@k value {k:?}")))
            .collect::<Result<Vec<_>>>()?;
        report.pass_at_k = pass_at_k_summary(&parse_outcomes(&read_input(Some(path))?)?, &ks)?;
    }
    let json = report.to_json()?;
    match &a.report {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.csv {
        report.write_csv(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)?;
    }
    for g in &report.aggregate {
        eprintln!(
            "{:<12} runs {:>4}  errors {:>3}  speedup {:>7.2}x (p50 {:.2})  reuse {:.2}",
            g.verifier, g.runs, g.errors, g.mean_speedup, g.speedup_quantiles.p50, g.mean_reuse_rate
        );
    }
    for p in &report.pass_at_k {
        eprintln!("pass@{} = {:.4} over {} tasks", p.k, p.mean, p.tasks);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_prep(a: PrepArgs) -> Result<ExitCode> {
    let opts = ClassifyOptions { mode: a.diff_mode.parse::<DiffMode>()?, trim: a.trim };
    let pairs = EditPair::parse_jsonl(&read_input(Some(&a.input))?)?;
    let n = export_records(&pairs, &opts, &ByteTokenizer, &a.out)?;
    println!("wrote {n} records to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<ExitCode> {
    let report = run_selfcheck(a.seed);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.table());
    }
    Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_serve(a: ServeArgs) -> Result<ExitCode> {
    let model = TableModel::load(&a.model)?;
    let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
    eprintln!("listening on {}", listener.local_addr()?);
    serve(&model, listener)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let layout = if a.hunks == 0 { Layout::Head } else { Layout::Split { hunks: a.hunks } };
    let spec =
        SynthSpec { size: a.size, reuse_rate: a.reuse_rate, layout, draft_noise: a.noise, window: 4, seed: a.seed };
    let b = synth_edit(&spec)?;
    fs::create_dir_all(&a.out_dir)?;
    let task = a.out_dir.join("task.json");
    fs::write(&task, serde_json::to_string(&b.task)? + "\n")?;
    b.target.save(&a.out_dir.join("target.json"))?;
    b.draft.save(&a.out_dir.join("draft.json"))?;
    println!("{}", a.out_dir.display());
    Ok(ExitCode::SUCCESS)
}
