//! Command implementations behind the `ragplan` binary.
//!
//! Every command reads and writes JSONL, sorts records by id before writing,
//! and with a scripted backend produces byte-identical output across runs.

mod dataset;
mod error;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ragplan_core::backend::{judge_correctness, Backend, HttpBackend, HttpConfig, ScriptedBackend};
use ragplan_core::dpo::{continue_on_policy, train_off_policy, OnPolicyCheckpoint, TrainConfig};
use ragplan_core::dsl::parse_plan_with;
use ragplan_core::eval::{evaluate, Answerer, EvalRecord, EvalSummary};
use ragplan_core::executor::{Executor, ExecutorConfig};
use ragplan_core::policy::PolicyParams;
use ragplan_core::retrieval::{build_index, Corpus, IndexStats, InvertedIndex};
use ragplan_core::reward::{correctness_label_with, max_f1};
use ragplan_core::stats::{read_trace_records, ActionUsageReport, TraceRecord};
use ragplan_core::types::PlanSource;

pub use dataset::{read_dataset, read_jsonl, write_jsonl, DatasetRecord};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ragplan", version, about = "Learned corrective plans for RAG answers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Training config (JSON, keys named as in the config struct).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `scripted:<rules.jsonl>` or `http:<url>`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Overrides the config retrieval depth.
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Fraction of records allowed to fail on the backend before giving up.
    #[arg(long, global = true, default_value_t = 0.5)]
    pub failure_threshold: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index from a `{"id", "text"}` JSONL corpus.
    Ingest {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vanilla RAG pass: attach documents, an initial answer and a correctness label.
    Answer {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label with the judge instead of the golds.
        #[arg(long)]
        judge: bool,
    },
    /// Off-policy phase: teacher proposals, oracle labels.
    TrainOff {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// On-policy phase: policy samples, judge labels.
    TrainOn {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Off-policy checkpoint to refine.
        #[arg(long, required_unless_present = "resume")]
        init: Option<PathBuf>,
        /// Continue from a saved run state instead of `--init`.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Stop after this many further iterations.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint, or the initial answers, against the golds.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, required_unless_present = "vanilla", conflicts_with = "vanilla")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vanilla: bool,
        #[arg(long)]
        traces_out: Option<PathBuf>,
        /// Dataset label written into traces; defaults to the file stem.
        #[arg(long)]
        dataset_name: Option<String>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Run hand-written programs (`{"id", "program"}` JSONL) against a dataset.
    Execute {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        plans: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset_name: Option<String>,
    },
    /// Compare operation counts of two sets of trace files.
    ActionStats {
        #[arg(long, num_args = 1.., required = true)]
        before: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        after: Vec<PathBuf>,
        #[arg(long, default_value = "action usage")]
        label: String,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
}

/// One line of a plans file for `execute`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLine {
    pub id: String,
    pub program: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: String,
    pub summary: EvalSummary,
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Config(e.to_string()))?;
    // output is buffered because the pool may run the command on another thread
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(&cli.global, &cli.command, &mut buf));
    out.write_all(&buf).map_err(|e| CliError::Data(format!("stdout: {e}")))?;
    result
}

fn dispatch(g: &GlobalArgs, cmd: &Command, out: &mut Vec<u8>) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&g.failure_threshold) {
        return Err(CliError::Config("--failure-threshold must lie in [0, 1]".into()));
    }
    match cmd {
        Command::Ingest { corpus, out: path } => cmd_ingest(corpus, path, out).map(|_| ()),
        Command::Answer {
            dataset,
            index,
            out: path,
            judge,
        } => cmd_answer(g, dataset, index, path, *judge, out),
        Command::TrainOff {
            dataset,
            index,
            out: path,
        } => cmd_train_off(g, dataset, index, path, out),
        Command::TrainOn {
            dataset,
            index,
            init,
            resume,
            stop_after,
            out: path,
        } => cmd_train_on(g, dataset, index, init.as_deref(), resume.as_deref(), *stop_after, path, out),
        Command::Evaluate {
            dataset,
            index,
            checkpoint,
            vanilla,
            traces_out,
            dataset_name,
            json_out,
        } => {
            let ckpt = if *vanilla { None } else { checkpoint.as_deref() };
            cmd_evaluate(g, dataset, index, ckpt, traces_out.as_deref(), dataset_name.as_deref(), json_out.as_deref(), out)
        }
        Command::Execute {
            dataset,
            index,
            plans,
            out: path,
            dataset_name,
        } => cmd_execute(g, dataset, index, plans, path, dataset_name.as_deref(), out),
        Command::ActionStats {
            before,
            after,
            label,
            json_out,
        } => cmd_action_stats(before, after, label, json_out.as_deref(), out),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| CliError::Data(format!("stdout: {e}")))
}

/// The config file (or defaults) with command-line overrides applied.
pub fn load_config(g: &GlobalArgs) -> Result<TrainConfig, CliError> {
    let mut config = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json_str(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        config.seed = s;
    }
    if let Some(k) = g.topk {
        config.topk = k;
    }
    config.validate()?;
    Ok(config)
}

pub fn load_backend(g: &GlobalArgs) -> Result<Box<dyn Backend>, CliError> {
    let spec = g
        .backend
        .as_deref()
        .ok_or_else(|| CliError::Config("this command needs --backend".into()))?;
    if let Some(path) = spec.strip_prefix("scripted:") {
        Ok(Box::new(ScriptedBackend::from_path(Path::new(path))?))
    } else if let Some(url) = spec.strip_prefix("http:") {
        Ok(Box::new(HttpBackend::new(HttpConfig::new(url))))
    } else {
        Err(CliError::Config(format!(
            "--backend must be `scripted:<path>` or `http:<url>`, got `{spec}`"
        )))
    }
}

pub fn load_index(path: &Path) -> Result<InvertedIndex, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(InvertedIndex::read_from(BufReader::new(file))?)
}

fn check_failures(failed: usize, total: usize, threshold: f64) -> Result<(), CliError> {
    if total > 0 && failed as f64 > threshold * total as f64 {
        return Err(CliError::Backend(format!(
            "{failed} of {total} records failed on the backend, above the threshold {threshold}"
        )));
    }
    Ok(())
}

/// `<path>.<suffix>`, next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_ingest(corpus: &Path, out_path: &Path, out: &mut dyn Write) -> Result<IndexStats, CliError> {
    let file = File::open(corpus).map_err(|e| CliError::io(corpus, e))?;
    let index = build_index(&Corpus::from_jsonl(BufReader::new(file))?)?;
    let f = File::create(out_path).map_err(|e| CliError::io(out_path, e))?;
    let mut w = BufWriter::new(f);
    index
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(out_path, e))?;
    let stats = index.stats();
    say(out, format_args!("documents: {}", stats.doc_count))?;
    say(out, format_args!("avg_doc_len: {:.4}", stats.avg_doc_len))?;
    say(out, format_args!("terms: {}", stats.term_count))?;
    Ok(stats)
}

fn cmd_answer(
    g: &GlobalArgs,
    dataset: &Path,
    index_path: &Path,
    out_path: &Path,
    judge: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let config = load_config(g)?;
    let records = read_dataset(dataset)?;
    let index = load_index(index_path)?;
    let backend = load_backend(g)?;
    let ex = Executor::new(&index, backend.as_ref(), ExecutorConfig::default());
    let failed = AtomicUsize::new(0);
    let answered: Vec<Option<DatasetRecord>> = records
        .par_iter()
        .map(|r| -> Result<Option<DatasetRecord>, CliError> {
            let fixed = r.fixed_docs(&index)?;
            let mut rec = r.clone();
            let (docs, a0, raw) = match (&r.initial_answer, fixed) {
                (Some(a0), Some(docs)) => (docs, a0.clone(), None),
                (given, fixed) => match ex.vanilla(&r.question, fixed, config.topk) {
                    Ok(v) => match given {
                        Some(a0) => (v.docs, a0.clone(), None),
                        None => (v.docs, v.answer, Some(v.raw)),
                    },
                    Err(e) => {
                        log::warn!("record `{}`: {e}", r.id);
                        failed.fetch_add(1, Ordering::Relaxed);
                        return Ok(None);
                    }
                },
            };
            if judge {
                match judge_correctness(backend.as_ref(), &r.question, &docs, &a0) {
                    Ok(j) => rec.judged = Some(j),
                    Err(e) => {
                        log::warn!("record `{}`: judge failed: {e}", r.id);
                        failed.fetch_add(1, Ordering::Relaxed);
                        return Ok(None);
                    }
                }
            } else if !r.gold_answers.is_empty() {
                let label = correctness_label_with(&a0, &r.gold_answers, config.correctness_rule)
                    .map_err(|e| CliError::Data(e.to_string()))?;
                rec.label = Some(label);
                if !label && rec.reasoning_trace.is_none() {
                    rec.reasoning_trace = raw;
                }
            }
            rec.docs = Some(docs);
            rec.initial_answer = Some(a0);
            Ok(Some(rec))
        })
        .collect::<Result<_, _>>()?;
    let failed = failed.into_inner();
    check_failures(failed, records.len(), g.failure_threshold)?;
    let answered: Vec<DatasetRecord> = answered.into_iter().flatten().collect();
    write_jsonl(out_path, &answered)?;
    let labels: Vec<bool> = answered.iter().filter_map(|r| if judge { r.judged } else { r.label }).collect();
    say(out, format_args!("records: {}", answered.len()))?;
    say(out, format_args!("failed: {failed}"))?;
    say(
        out,
        format_args!(
            "{}: {} of {}",
            if judge { "judged correct" } else { "labeled correct" },
            labels.iter().filter(|l| **l).count(),
            labels.len()
        ),
    )
}

fn cmd_train_off(
    g: &GlobalArgs,
    dataset: &Path,
    index_path: &Path,
    out_path: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let config = load_config(g)?;
    let states = read_dataset(dataset)?
        .iter()
        .map(|r| r.off_policy_state(config.correctness_rule))
        .collect::<Result<Vec<_>, _>>()?;
    let index = load_index(index_path)?;
    let backend = load_backend(g)?;
    let ex = Executor::new(&index, backend.as_ref(), ExecutorConfig::default());
    let (params, manifest) = train_off_policy(&states, &config, &ex)?;
    check_failures(manifest.skipped, states.len(), g.failure_threshold)?;
    params.save(out_path)?;
    manifest.save(&sibling(out_path, "manifest.json"))?;
    say(out, format_args!("instances: {}", manifest.instances))?;
    say(out, format_args!("skipped: {}", manifest.skipped))?;
    say(out, format_args!("triples: {}", manifest.triples))?;
    say(out, format_args!("checkpoint: {}", out_path.display()))
}

fn on_policy_states(records: &[DatasetRecord], judge: &dyn Backend, threshold: f64) -> Result<Vec<ragplan_core::RagState>, CliError> {
    let results: Vec<Result<_, CliError>> = records.par_iter().map(|r| r.on_policy_state(judge)).collect();
    let mut states = Vec::new();
    let mut failed = 0;
    for (r, s) in records.iter().zip(results) {
        match s {
            Ok(s) => states.push(s),
            Err(CliError::Backend(e)) => {
                log::warn!("record `{}`: judge failed: {e}", r.id);
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    check_failures(failed, records.len(), threshold)?;
    Ok(states)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_on(
    g: &GlobalArgs,
    dataset: &Path,
    index_path: &Path,
    init: Option<&Path>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
    out_path: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let index = load_index(index_path)?;
    let backend = load_backend(g)?;
    let states = on_policy_states(&read_dataset(dataset)?, backend.as_ref(), g.failure_threshold)?;
    let checkpoint = match (resume, init) {
        (Some(p), _) => OnPolicyCheckpoint::load(p)?,
        (None, Some(p)) => {
            let config = load_config(g)?;
            let pi_off = PolicyParams::load(p)?;
            if pi_off.max_len() != config.max_plan_len {
                return Err(CliError::Data(format!(
                    "{} has horizon {}, config says {}",
                    p.display(),
                    pi_off.max_len(),
                    config.max_plan_len
                )));
            }
            OnPolicyCheckpoint::start(&pi_off, &config, states.len())
        }
        (None, None) => return Err(CliError::Config("train-on needs --init or --resume".into())),
    };
    let ex = Executor::new(&index, backend.as_ref(), ExecutorConfig::default());
    let done = continue_on_policy(checkpoint, &states, &ex, stop_after)?;
    let state_path = sibling(out_path, "state.json");
    done.save(&state_path)?;
    let total = done.manifest.config.on_policy_iters;
    say(out, format_args!("iterations: {} of {total}", done.iterations_done))?;
    say(out, format_args!("triples: {}", done.manifest.triples))?;
    say(out, format_args!("state: {}", state_path.display()))?;
    if done.is_finished() {
        done.params.save(out_path)?;
        done.manifest.save(&sibling(out_path, "manifest.json"))?;
        say(out, format_args!("checkpoint: {}", out_path.display()))
    } else {
        say(out, format_args!("resume with --resume {}", state_path.display()))
    }
}

fn dataset_label(path: &Path, name: Option<&str>) -> String {
    name.map(str::to_string).unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

fn trace_records(records: &[EvalRecord], dataset: &str) -> Vec<TraceRecord> {
    records
        .iter()
        .map(|r| TraceRecord {
            record_id: r.record_id.clone(),
            dataset: dataset.to_string(),
            plan: r.plan.clone(),
            trace: r.trace.clone(),
            f1: Some(r.f1),
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    g: &GlobalArgs,
    dataset: &Path,
    index_path: &Path,
    checkpoint: Option<&Path>,
    traces_out: Option<&Path>,
    dataset_name: Option<&str>,
    json_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let config = load_config(g)?;
    let records = read_dataset(dataset)?;
    let index = load_index(index_path)?;
    let (records, summary, mode) = match checkpoint {
        None => {
            // the initial answers are scored as they are; no backend involved
            let idle = ScriptedBackend::new(Vec::new())?;
            let ex = Executor::new(&index, &idle, ExecutorConfig::default());
            let states = records.iter().map(DatasetRecord::scored_state).collect::<Result<Vec<_>, _>>()?;
            let (recs, summary) = evaluate(&states, Answerer::Vanilla, &ex).map_err(|e| CliError::Data(e.to_string()))?;
            (recs, summary, "vanilla".to_string())
        }
        Some(p) => {
            let params = PolicyParams::load(p)?;
            let backend = load_backend(g)?;
            let states = on_policy_states(&records, backend.as_ref(), g.failure_threshold)?;
            let ex = Executor::new(&index, backend.as_ref(), ExecutorConfig::default());
            let (recs, summary) = evaluate(&states, Answerer::Policy(&params, config.plan_defaults()), &ex)
                .map_err(|e| CliError::Data(e.to_string()))?;
            (recs, summary, format!("policy:{}", p.display()))
        }
    };
    let name = dataset_label(dataset, dataset_name);
    if let Some(p) = traces_out {
        write_jsonl(p, &trace_records(&records, &name))?;
    }
    let report = EvalReport {
        dataset: name,
        mode,
        summary,
    };
    if let Some(p) = json_out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(p, text + "\n").map_err(|e| CliError::io(p, e))?;
    }
    say(out, format_args!("dataset: {}", report.dataset))?;
    say(out, format_args!("mode: {}", report.mode))?;
    let s = &report.summary;
    say(out, format_args!("records: {}", s.records))?;
    say(out, format_args!("mean_f1: {:.4}", s.mean_f1))?;
    say(out, format_args!("fallback_rate: {:.4}", s.fallback_rate))?;
    say(out, format_args!("mean_plan_len: {:.4}", s.mean_plan_len))
}

fn cmd_execute(
    g: &GlobalArgs,
    dataset: &Path,
    index_path: &Path,
    plans_path: &Path,
    out_path: &Path,
    dataset_name: Option<&str>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let config = load_config(g)?;
    let records = read_dataset(dataset)?;
    let plans: Vec<PlanLine> = read_jsonl(plans_path)?;
    let index = load_index(index_path)?;
    let backend = load_backend(g)?;
    let ex = Executor::new(&index, backend.as_ref(), ExecutorConfig::default());
    let name = dataset_label(dataset, dataset_name);
    let mut jobs = Vec::with_capacity(plans.len());
    for (line, p) in plans.iter().enumerate() {
        let rec = records
            .binary_search_by(|r| r.id.as_str().cmp(&p.id))
            .map(|i| &records[i])
            .map_err(|_| CliError::Data(format!("plans line {}: unknown record `{}`", line + 1, p.id)))?;
        let plan = parse_plan_with(&p.program, PlanSource::Manual, config.max_plan_len)
            .map_err(|e| CliError::Data(format!("plans line {} (`{}`): {e}", line + 1, p.id)))?;
        jobs.push((rec, plan));
    }
    let mut traces: Vec<TraceRecord> = jobs
        .par_iter()
        .map(|(rec, plan)| -> Result<TraceRecord, CliError> {
            let state = rec.inference_state()?;
            let trace = ex.execute(&state, plan);
            let f1 = if rec.gold_answers.is_empty() {
                None
            } else {
                Some(max_f1(&trace.final_answer, &rec.gold_answers).map_err(|e| CliError::Data(e.to_string()))?.value())
            };
            Ok(TraceRecord {
                record_id: rec.id.clone(),
                dataset: name.clone(),
                plan: plan.kinds(),
                trace,
                f1,
            })
        })
        .collect::<Result<_, _>>()?;
    traces.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    write_jsonl(out_path, &traces)?;
    let fell_back = traces.iter().filter(|t| t.trace.fell_back).count();
    say(out, format_args!("executed: {}", traces.len()))?;
    say(out, format_args!("fell_back: {fell_back}"))
}

fn read_traces(paths: &[PathBuf]) -> Result<Vec<TraceRecord>, CliError> {
    let mut all = Vec::new();
    for p in paths {
        let f = File::open(p).map_err(|e| CliError::io(p, e))?;
        all.extend(read_trace_records(BufReader::new(f))?);
    }
    Ok(all)
}

fn cmd_action_stats(
    before: &[PathBuf],
    after: &[PathBuf],
    label: &str,
    json_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let report = ActionUsageReport::from_records(label, &read_traces(before)?, &read_traces(after)?);
    if let Some(p) = json_out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(p, text + "\n").map_err(|e| CliError::io(p, e))?;
    }
    out.write_all(report.render_table().as_bytes())
        .map_err(|e| CliError::Data(format!("stdout: {e}")))
}
