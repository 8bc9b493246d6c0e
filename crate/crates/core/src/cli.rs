//! Command implementations behind the `kvcat` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::compress::{attention_matching_compress, budget, grad_compact_optimize, keep_first_m, load_compact, save_compact};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{dense_suffix_logits, eval_against, run_niah_suite, run_suite, SuffixExample};
use crate::model::{load_checkpoint, ArrayFile, Model};
use crate::theory::{verify_prop1, verify_prop2};
use crate::training::{train_run, TrainState};

#[derive(Parser, Debug)]
#[command(name = "kvcat", version, about = "Compression-aware training and KV-cache compression for a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint, metrics log and config snapshot.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.total_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compress one prefix and write the compact cache plus a JSON report.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        method: CompressMethod,
        #[arg(long)]
        keep: f64,
        /// Text file whose first eval.prefix_len bytes are the prefix and the
        /// following eval.suffix_len bytes the suffix. Without it, a held-out
        /// example from the configured corpus is used.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated steps at which L_KV is recorded (grad only).
        #[arg(long)]
        record_steps: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the cache path with a `.json` extension.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the suffix or NIAH suite and write a CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check both theory constructions and write a JSON report.
    Theory {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a checkpoint, training state or compact cache file.
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CompressMethod {
    Am,
    Grad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Suffix,
    Niah,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Pool size: `KVCAT_WORKERS`, else the config, else one per core.
pub fn init_workers(cfg: &RunConfig) -> Result<()> {
    let n = match std::env::var("KVCAT_WORKERS") {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("KVCAT_WORKERS `{v}` is not a count")))?,
        Err(_) => cfg.workers,
    };
    // A second initialization (in tests) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, steps } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg = cfg.with_override("train.total_steps", &s.to_string())?;
            }
            init_workers(&cfg)?;
            cmd_train(&cfg, &out, |line| println!("{line}")).map(|_| ())
        }
        Command::Compress { checkpoint, method, keep, input, example, config, record_steps, out, report } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(r) = record_steps {
                cfg = cfg.with_override("compact.record_steps", &r)?;
            }
            init_workers(&cfg)?;
            let model = load_checkpoint(&checkpoint)?;
            let ex = match input {
                Some(p) => example_from_text(&cfg, &std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?,
                None => {
                    let all = cfg.suffix_examples()?;
                    all.get(example)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("example {example} not among {} held-out examples", all.len())))?
                }
            };
            let report_path = report.unwrap_or_else(|| out.with_extension("json"));
            let rep = cmd_compress(&model, &cfg, method, keep, &ex, &out, &report_path)?;
            println!("{}", serde_json::to_string_pretty(&rep).expect("json value"));
            Ok(())
        }
        Command::Eval { checkpoint, suite, config, out } => {
            let cfg = load_config(config.as_deref())?;
            init_workers(&cfg)?;
            let model = load_checkpoint(&checkpoint)?;
            for line in cmd_eval(&model, &cfg, suite, &out)? {
                println!("{line}");
            }
            Ok(())
        }
        Command::Theory { config, out } => {
            let cfg = load_config(config.as_deref())?;
            init_workers(&cfg)?;
            let rep = cmd_theory(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&rep).expect("json value"));
            Ok(())
        }
        Command::Inspect { path } => {
            println!("{}", cmd_inspect(&path)?);
            Ok(())
        }
    }
}

/// Writes the config snapshot, then trains from `init_checkpoint` or from
/// fresh weights. `on_log` receives each metrics line.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, mut on_log: impl FnMut(&str)) -> Result<TrainState> {
    cfg.write_snapshot(out_dir)?;
    let (train, val) = cfg.split()?;
    let model = match &cfg.init_checkpoint {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if (crate::model::ModelConfig { seed: cfg.model.seed, ..m.config.clone() }) != cfg.model {
                return Err(Error::Config(format!("`init_checkpoint` {} does not match the model.* keys", p.display())));
            }
            m
        }
        None => Model::init(cfg.model.clone())?,
    };
    let state = TrainState::fresh(model, &cfg.train)?;
    train_run(&cfg.train, state, &train, &val, out_dir, |rec| on_log(&serde_json::to_string(rec).expect("plain record serializes")))
}

/// Prefix is the first `eval.prefix_len` tokens, suffix the next
/// `eval.suffix_len` (or fewer, if the text ends).
pub fn example_from_text(cfg: &RunConfig, bytes: &[u8]) -> Result<SuffixExample> {
    let tokens = crate::eval::tokenizer::encode(bytes);
    let n = cfg.eval.prefix_len;
    if tokens.len() <= n {
        return Err(Error::Precondition(format!("input of {} tokens leaves no suffix after a {n}-token prefix", tokens.len())));
    }
    let end = tokens.len().min(n + cfg.eval.suffix_len);
    Ok(SuffixExample { prefix: tokens[..n].to_vec(), suffix: tokens[n..end].to_vec() })
}

#[derive(Debug, Serialize)]
pub struct CompressReport {
    pub method: String,
    pub keep_ratio: f64,
    pub prefix_len: usize,
    pub budget: usize,
    /// Per-head value-fit residuals (am).
    pub residuals: Option<Vec<Vec<f64>>>,
    /// `(step, L_KV)` at each recorded step (grad).
    pub l_kv: Option<Vec<(usize, f64)>>,
    pub metrics: crate::eval::SuffixMetrics,
    pub baseline_metrics: crate::eval::SuffixMetrics,
    pub wall_time_s: f64,
}

pub fn cmd_compress(
    model: &Model,
    cfg: &RunConfig,
    method: CompressMethod,
    keep: f64,
    ex: &SuffixExample,
    out: &Path,
    report_path: &Path,
) -> Result<CompressReport> {
    let m = budget(keep, ex.prefix.len())?;
    let start = Instant::now();
    let teacher = dense_suffix_logits(model, ex)?;
    let dense = model.forward_dense(&ex.prefix, None)?.cache;
    let first = keep_first_m(&dense, m)?;
    let (cache, residuals, l_kv) = match method {
        CompressMethod::Am => {
            let am = crate::compress::AmConfig { keep_ratio: keep, ..cfg.am.clone() };
            let (c, r) = attention_matching_compress(model, &ex.prefix, &ex.suffix, &am)?;
            (c, Some(r.residuals), None)
        }
        CompressMethod::Grad => {
            let (c, trace) = grad_compact_optimize(model, &first, ex, &teacher, &cfg.compact)?;
            (c, None, Some(trace.records.iter().map(|r| (r.step, r.l_kv)).collect()))
        }
    };
    let wall_time_s = start.elapsed().as_secs_f64();
    save_compact(&cache, out)?;
    let rep = CompressReport {
        method: format!("{method:?}").to_lowercase(),
        keep_ratio: keep,
        prefix_len: ex.prefix.len(),
        budget: cache.slots,
        residuals,
        l_kv,
        metrics: eval_against(model, ex, &teacher, &cache)?,
        baseline_metrics: eval_against(model, ex, &teacher, &first)?,
        wall_time_s,
    };
    let text = serde_json::to_string_pretty(&rep).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(report_path, text + "\n").map_err(|e| Error::io(report_path, e))?;
    Ok(rep)
}

/// Writes the CSV and returns the aggregate lines printed to stdout.
pub fn cmd_eval(model: &Model, cfg: &RunConfig, suite: Suite, out: &Path) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    match suite {
        Suite::Suffix => {
            let outcome = run_suite(model, &cfg.suite_config(), &cfg.suffix_examples()?, Some(out))?;
            lines.push("model_tag,method,keep_ratio,mean_dppl,mean_kl,mean_top1".to_string());
            for (k, dppl, kl, top1) in outcome.means() {
                lines.push(format!("{},{},{k},{dppl:.6},{kl:.6},{top1:.6}", cfg.eval.model_tag, cfg.eval.method));
            }
            lines.extend(outcome.failures.iter().map(|f| format!("# failed: {f}")));
        }
        Suite::Niah => {
            let examples = cfg.niah_examples()?;
            let outcome = run_niah_suite(
                model,
                &cfg.eval.model_tag,
                &cfg.niah.keep_ratios,
                &examples,
                &cfg.compact,
                cfg.component_seed("compress"),
                Some(out),
            )?;
            lines.push(format!("# native retrieval rate {:.6}", outcome.native_rate()));
            lines.push("model_tag,keep_ratio,accuracy,accuracy_native_solved".to_string());
            for &k in &cfg.niah.keep_ratios {
                lines.push(format!("{},{k},{:.6},{:.6}", cfg.eval.model_tag, outcome.accuracy(k, false), outcome.accuracy(k, true)));
            }
            lines.extend(outcome.failures.iter().map(|f| format!("# failed: {f}")));
        }
    }
    Ok(lines)
}

/// Runs both checks; the averaging check is skipped when its budget leaves
/// nothing to compress.
pub fn cmd_theory(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let t = &cfg.theory;
    let prop1 = match verify_prop1(t.m_alb, t.prop1_n_max, t.prop1_budget) {
        Ok(r) => serde_json::to_value(&r).expect("plain record"),
        Err(Error::Precondition(reason)) => json!({ "name": "prop1", "skipped": true, "reason": reason }),
        Err(e) => return Err(e),
    };
    let prop2 = verify_prop2(t.m_alb, t.n_max, t.epsilon, t.trials, t.exhaustive_len, cfg.component_seed("theory"))?;
    let pass = prop1.get("pass").and_then(|v| v.as_bool()).unwrap_or(true) && prop2.pass;
    let rep = json!({ "prop1": prop1, "prop2": prop2, "pass": pass });
    let text = serde_json::to_string_pretty(&rep).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out, text + "\n").map_err(|e| Error::io(out, e))?;
    Ok(rep)
}

pub fn cmd_inspect(path: &Path) -> Result<String> {
    let file = ArrayFile::read(path)?;
    let mut out = String::new();
    for (k, v) in &file.header {
        out.push_str(&format!("{k} = {v}\n"));
    }
    match file.header_value("kind") {
        Some("model") => {
            let m = load_checkpoint(path)?;
            out.push_str(&format!("parameters = {}\nchecksum = {:016x}\n", m.weights.num_params(), m.weights.checksum()));
        }
        Some("train_state") => {
            let s = TrainState::load(path)?;
            out.push_str(&format!("parameters = {}\nchecksum = {:016x}\n", s.model.weights.num_params(), s.model.weights.checksum()));
        }
        Some("compact_cache") => {
            let c = load_compact(path)?;
            out.push_str(&format!("keep_ratio = {}\nbias = {}\n", c.slots as f64 / c.prefix_len as f64, c.has_bias()));
        }
        _ => {}
    }
    let values: usize = file.arrays.iter().map(|a| a.data.len()).sum();
    out.push_str(&format!("arrays = {}\nvalues = {values}", file.arrays.len()));
    Ok(out)
}
