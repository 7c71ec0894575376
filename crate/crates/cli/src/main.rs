//! `moe-offload` command-line tool.

mod config;
mod output;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use moe_offload::bench::{
    ablation_suite, recall_curves, simulate_latency, write_ablation_csv, write_recall_csv,
    AblationPlan,
};
use moe_offload::model::{
    load_checkpoint, train_toy, write_checkpoint, MarkovCorpus, Model, Sampler,
};
use moe_offload::prefetch::{generate, EngineOptions, Generation, SpeculationConfig};
use moe_offload::quant::{
    model_size_report, write_quantized_checkpoint, ArchSpec, MixedQuantConfig,
};
use moe_offload::store::{write_events_jsonl, CacheConfig, StoreEvent};
use moe_offload::trace::{replay, synth, Trace};
use serde::Serialize;
use toml::Value;

use config::{commented, ConfigBuilder, RunConfig};
use output::{sidecar, Outputs};

/// Bad flags, config keys or missing arguments. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "moe-offload",
    version,
    about = "MoE inference with expert offloading"
)]
struct Cli {
    /// Seed for every random stream (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path. Reports go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cache-size preset: 12gb keeps 2 experts per layer, 16gb keeps 4.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Override any config key, e.g. `--set cost.overlap=false`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "12gb")]
    Gb12,
    #[value(name = "16gb")]
    Gb16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Policy {
    /// LRU cache, no speculation.
    Lru,
    /// LRU cache plus speculative staging.
    Full,
    /// Every expert streamed on use.
    NoCache,
}

#[derive(Debug, clap::Args)]
struct EngineArgs {
    /// Checkpoint to load; a freshly initialized model otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    lookahead: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    speculate: Option<bool>,
    #[arg(long)]
    n_new: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Also write the store event log (JSONL).
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train a toy model on the synthetic corpus and save a checkpoint.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate tokens with the offloading engine.
    Generate {
        #[command(flatten)]
        engine: EngineArgs,
        /// Also write the routing trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate and record a routing trace (to --out).
    Trace {
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Write a synthetic routing trace (to --out).
    Synth {
        #[arg(long)]
        n_tokens: Option<usize>,
        #[arg(long)]
        locality: Option<f64>,
    },
    /// Replay a trace through one cache policy and report recall and latency.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "lru")]
        policy: Policy,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        b: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        lookahead: Option<usize>,
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Write a quantized checkpoint (to --out).
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        attn_bits: Option<u8>,
        #[arg(long)]
        expert_bits: Option<u8>,
    },
    /// Model size by role for a quantization config.
    SizeReport {
        /// `mixtral8x7b`, or `toy` for the configured toy model.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        attn_bits: Option<u8>,
        #[arg(long)]
        expert_bits: Option<u8>,
    },
    /// Ablation table: simulated tokens/s for each cache policy.
    Bench {
        #[arg(long)]
        trace: PathBuf,
        /// Needed for the speculative rows.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Recall against cache size and speculation width.
    RecallCurves {
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn overrides(cmd: &Cmd) -> Vec<(&'static str, Value)> {
    let mut v: Vec<(&'static str, Value)> = Vec::new();
    let mut put = |key: &'static str, val: Option<Value>| {
        if let Some(val) = val {
            v.push((key, val));
        }
    };
    let int = |x: Option<usize>| x.map(|x| Value::Integer(x as i64));
    let bits = |x: Option<u8>| x.map(|x| Value::Integer(x as i64));
    match cmd {
        Cmd::Train { steps } => put("train.steps", int(*steps)),
        Cmd::Generate { engine, .. } | Cmd::Trace { engine } => {
            put("cache.k", int(engine.k));
            put("cache.b", int(engine.b));
            put("speculation.m", int(engine.m));
            put("speculation.lookahead", int(engine.lookahead));
            put("speculation.enabled", engine.speculate.map(Value::Boolean));
            put("data.n_new", int(engine.n_new));
            put("data.prompt_len", int(engine.prompt_len));
        }
        Cmd::Synth { n_tokens, locality } => {
            put("synth.n_tokens", int(*n_tokens));
            put("synth.locality", locality.map(Value::Float));
        }
        Cmd::Replay {
            k, b, m, lookahead, ..
        } => {
            put("cache.k", int(*k));
            put("cache.b", int(*b));
            put("speculation.m", int(*m));
            put("speculation.lookahead", int(*lookahead));
        }
        Cmd::Quantize {
            attn_bits,
            expert_bits,
            ..
        }
        | Cmd::SizeReport {
            attn_bits,
            expert_bits,
            ..
        } => {
            put("quant.attn_bits", bits(*attn_bits));
            put("quant.expert_bits", bits(*expert_bits));
        }
        Cmd::Bench { k, m, .. } => {
            put("cache.k", int(*k));
            put("speculation.m", int(*m));
        }
        Cmd::RecallCurves { .. } => {}
    }
    if let Cmd::SizeReport { arch: Some(a), .. } = cmd {
        v.push(("report.arch", Value::String(a.clone())));
    }
    v
}

fn resolve(cli: &Cli) -> Result<RunConfig, UsageError> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &cli.config {
        b.file(path)?;
    }
    if let Some(p) = cli.preset {
        let k = match p {
            Preset::Gb12 => 2,
            Preset::Gb16 => 4,
        };
        b.set_value("cache.k", Value::Integer(k))?;
    }
    for s in &cli.sets {
        b.set(s)?;
    }
    for (key, val) in overrides(&cli.cmd) {
        b.set_value(key, val)?;
    }
    if let Some(seed) = cli.seed {
        b.set_value("seed", Value::Integer(seed as i64))?;
    }
    b.build()
}

fn require_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf, UsageError> {
    out.clone()
        .ok_or_else(|| UsageError(format!("{what} needs --out PATH")))
}

/// Load a checkpoint, or initialize from the config. The resolved config
/// then describes the model actually used.
fn load_model(path: Option<&Path>, cfg: &mut RunConfig) -> Result<Model> {
    let model = match path {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => Model::init(&cfg.model)?,
    };
    cfg.model = model.config().clone();
    Ok(model)
}

fn load_trace(path: &Path) -> Result<Trace> {
    Trace::load(path).with_context(|| format!("loading trace {}", path.display()))
}

fn encode_trace(trace: &Trace, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "moet") {
        trace.write_binary(&mut buf)?;
    } else {
        trace.write_jsonl(&mut buf)?;
    }
    Ok(buf)
}

fn encode_events(events: &[StoreEvent]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_events_jsonl(events, &mut buf)?;
    Ok(buf)
}

/// Stage an artifact plus its `.run.toml` sidecar.
fn stage_artifact(
    outs: &mut Outputs,
    path: &Path,
    bytes: &[u8],
    cfg: &RunConfig,
    command: &str,
) -> Result<()> {
    outs.stage(path, bytes)?;
    let side = format!("# moe-offload {command}\n{}", cfg.to_toml());
    outs.stage(&sidecar(path), side.as_bytes())
}

fn run_generation(
    engine: &EngineArgs,
    cfg: &mut RunConfig,
    record_trace: bool,
) -> Result<(Model, Vec<usize>, Generation)> {
    let model = load_model(engine.model.as_deref(), cfg)?;
    let corpus = MarkovCorpus::new(model.config().vocab_size, cfg.data.corpus_seed);
    let prompt = corpus.sequence(cfg.seed, 0, cfg.data.prompt_len);
    let mut sampler = match cfg.data.sampler.as_str() {
        "categorical" => Sampler::categorical(cfg.seed),
        "greedy" => Sampler::greedy(),
        other => return Err(UsageError(format!("unknown sampler {other:?}")).into()),
    };
    let opts = EngineOptions {
        cache: cfg.cache,
        speculation: cfg.speculation,
        record_trace,
        record_hidden: cfg.engine.record_hidden,
        background_transfers: cfg.engine.background_transfers,
    };
    let gen = generate(&model, opts, &prompt, cfg.data.n_new, &mut sampler)?;
    Ok((model, prompt, gen))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

#[derive(Serialize)]
struct ReplayReport {
    command: &'static str,
    policy: Policy,
    trace_tokens: usize,
    prefill_len: usize,
    recall: f64,
    event_counts: BTreeMap<String, usize>,
    tokens_per_sec: Option<f64>,
    stall_frac: Option<f64>,
    config: RunConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    let mut outs = Outputs::default();
    let out = cli.out.as_deref();
    match &cli.cmd {
        Cmd::Train { .. } => {
            let path = require_out(&cli.out, "train")?;
            let corpus = MarkovCorpus::new(cfg.model.vocab_size, cfg.data.corpus_seed);
            let (model, report) = train_toy(&cfg.model, &corpus, &cfg.train)?;
            eprintln!(
                "trained {} steps: eval loss {:.4} -> {:.4}",
                cfg.train.steps, report.initial_loss, report.final_loss
            );
            let mut buf = Vec::new();
            write_checkpoint(&model, &mut buf)?;
            stage_artifact(&mut outs, &path, &buf, &cfg, "train")?;
        }
        Cmd::Generate { engine, trace } => {
            let (_, prompt, gen) = run_generation(engine, &mut cfg, trace.is_some())?;
            let text = format!(
                "# moe-offload generate\n{}prompt: {}\ntokens: {}\nfinal_logits: {}\n",
                commented(&cfg.generation_echo()),
                join(&prompt),
                join(&gen.tokens),
                join(&gen.final_logits),
            );
            outs.emit(out, text.as_bytes())?;
            if let Some(p) = &engine.events {
                stage_artifact(&mut outs, p, &encode_events(&gen.events)?, &cfg, "generate")?;
            }
            if let (Some(p), Some(t)) = (trace, &gen.trace) {
                stage_artifact(&mut outs, p, &encode_trace(t, p)?, &cfg, "generate")?;
            }
        }
        Cmd::Trace { engine } => {
            let path = require_out(&cli.out, "trace")?;
            let (_, _, gen) = run_generation(engine, &mut cfg, true)?;
            let trace = gen.trace.as_ref().expect("trace recording was requested");
            stage_artifact(
                &mut outs,
                &path,
                &encode_trace(trace, &path)?,
                &cfg,
                "trace",
            )?;
            if let Some(p) = &engine.events {
                stage_artifact(&mut outs, p, &encode_events(&gen.events)?, &cfg, "trace")?;
            }
        }
        Cmd::Synth { .. } => {
            let path = require_out(&cli.out, "synth")?;
            let trace = synth(&cfg.synth)?;
            stage_artifact(
                &mut outs,
                &path,
                &encode_trace(&trace, &path)?,
                &cfg,
                "synth",
            )?;
        }
        Cmd::Replay {
            trace,
            policy,
            model,
            events,
            ..
        } => {
            let t = load_trace(trace)?;
            let m = match (policy, model) {
                (Policy::Full, None) => {
                    return Err(UsageError("--policy full needs --model".into()).into())
                }
                (Policy::Full, Some(p)) => Some(load_model(Some(p), &mut cfg)?),
                _ => None,
            };
            let (cache, spec) = match policy {
                Policy::Lru => (cfg.cache, SpeculationConfig::disabled()),
                Policy::Full => (
                    cfg.cache,
                    SpeculationConfig {
                        enabled: true,
                        ..cfg.speculation
                    },
                ),
                Policy::NoCache => (
                    CacheConfig { k: 0, ..cfg.cache },
                    SpeculationConfig::disabled(),
                ),
            };
            let outcome = replay(&t, cache, &spec, m.as_ref())?;
            let latency = simulate_latency(&outcome.events, t.header.prefill_len, &cfg.cost).ok();
            let mut counts = BTreeMap::new();
            for e in &outcome.events {
                let kind = serde_json::to_value(e.kind)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string();
                *counts.entry(kind).or_insert(0) += 1;
            }
            let report = ReplayReport {
                command: "replay",
                policy: *policy,
                trace_tokens: t.n_tokens(),
                prefill_len: t.header.prefill_len,
                recall: outcome.recall,
                event_counts: counts,
                tokens_per_sec: latency.as_ref().map(|l| l.tokens_per_sec),
                stall_frac: latency.as_ref().map(|l| l.stall_fraction()),
                config: cfg.clone(),
            };
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            outs.emit(out, json.as_bytes())?;
            if let Some(p) = events {
                stage_artifact(
                    &mut outs,
                    p,
                    &encode_events(&outcome.events)?,
                    &cfg,
                    "replay",
                )?;
            }
        }
        Cmd::Quantize { model, .. } => {
            let path = require_out(&cli.out, "quantize")?;
            let m = load_model(Some(model), &mut cfg)?;
            let mixed = MixedQuantConfig::from_bits(cfg.quant.attn_bits, cfg.quant.expert_bits)
                .map_err(|e| UsageError(e.to_string()))?;
            let mut buf = Vec::new();
            let by_role: BTreeMap<_, _> = write_quantized_checkpoint(&m, &mixed, &mut buf)?
                .into_iter()
                .collect();
            for (role, bytes) in by_role {
                eprintln!("{role}: {bytes} bytes");
            }
            stage_artifact(&mut outs, &path, &buf, &cfg, "quantize")?;
        }
        Cmd::SizeReport { .. } => {
            let arch = match cfg.report.arch.as_str() {
                "toy" => ArchSpec::from_model_config(&cfg.model),
                name => ArchSpec::by_name(name)
                    .ok_or_else(|| UsageError(format!("unknown arch {name:?}")))?,
            };
            let mixed = MixedQuantConfig::from_bits(cfg.quant.attn_bits, cfg.quant.expert_bits)
                .map_err(|e| UsageError(e.to_string()))?;
            let r = model_size_report(&arch, &mixed)?;
            let mut text = format!("# moe-offload size-report\n{}", commented(&cfg.to_toml()));
            text.push_str(&format!("# experts_fraction = {}\n", r.experts_fraction));
            text.push_str("role,params,bits_per_param,gib\n");
            for row in &r.rows {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    row.role, row.params, row.bits_per_param, row.gib
                ));
            }
            let total = arch.total();
            let mean_bpp = if total == 0 {
                0.0
            } else {
                r.total_gib * (1u64 << 30) as f64 * 8.0 / total as f64
            };
            text.push_str(&format!("total,{total},{mean_bpp},{}\n", r.total_gib));
            outs.emit(out, text.as_bytes())?;
        }
        Cmd::Bench { trace, model, .. } => {
            let t = load_trace(trace)?;
            let m = match model {
                Some(p) => Some(load_model(Some(p), &mut cfg)?),
                None => None,
            };
            let plan = AblationPlan {
                cache: cfg.cache,
                speculation: cfg.speculation,
                k_values: cfg.report.k_values.clone(),
                m_values: cfg.report.m_values.clone(),
            };
            let rows = ablation_suite(&t, m.as_ref(), &cfg.cost, &plan)?;
            let mut buf =
                format!("# moe-offload bench\n{}", commented(&cfg.to_toml())).into_bytes();
            write_ablation_csv(&rows, &mut buf)?;
            outs.emit(out, &buf)?;
        }
        Cmd::RecallCurves { traces, model } => {
            let ts = traces
                .iter()
                .map(|p| load_trace(p))
                .collect::<Result<Vec<_>>>()?;
            let m = match model {
                Some(p) => Some(load_model(Some(p), &mut cfg)?),
                None => None,
            };
            let r = &cfg.report;
            let pts = recall_curves(&ts, m.as_ref(), &r.k_values, &r.lookaheads, &r.m_values)?;
            let mut buf =
                format!("# moe-offload recall-curves\n{}", commented(&cfg.to_toml())).into_bytes();
            write_recall_csv(&pts, &mut buf)?;
            outs.emit(out, &buf)?;
        }
    }
    outs.commit()
}
