//! `kvblend`: generate seeded models, precompute chunk KV caches into a
//! tiered store, run blended inference with pipelined loading, query the
//! loading controller, and drive workload benchmarks.
//!
//! Exit codes: 0 success, 2 configuration, 3 input parse, 4 store miss,
//! 5 internal invariant violation.

use clap::{Args, Parser, Subcommand};
use kvblend_core::bench::{
    generate_chunk_db, generate_workload, run_experiment, ExperimentConfig, WorkloadSpec,
};
use kvblend_core::blend::precompute_chunk;
use kvblend_core::kvcache::{attention_deviation, ChunkHash};
use kvblend_core::kvstore::{DeviceProfile, KvStore};
use kvblend_core::model::{full_prefill, init_weights, ModelConfig, TokenSequence, Weights};
use kvblend_core::pipeline::{
    estimate_load, estimate_recompute_per_layer, make_plan, pick_device, pick_ratio,
    run_pipelined, CostModel, Method, PipelineRequest, SimParams,
};
use kvblend_core::Error as CoreError;
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_PARSE: u8 = 3;
const EXIT_STORE_MISS: u8 = 4;
const EXIT_INTERNAL: u8 = 5;

#[derive(Parser)]
#[command(name = "kvblend", version, about = "Selective KV-cache recomputation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a self-describing model file (weights regenerate from the seed).
    GenModel(GenModelArgs),
    /// Prefill chunks from a token file and store their KV caches.
    Precompute(PrecomputeArgs),
    /// Reconstruct a KV cache for chunks + suffix and report simulated timing.
    Run(RunArgs),
    /// Controller estimates: per-device plans, picked device and ratio.
    Estimate(EstimateArgs),
    /// Generate a synthetic workload and compare methods end to end.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    heads: usize,
    #[arg(long)]
    head_dim: usize,
    #[arg(long)]
    mlp_dim: usize,
    #[arg(long)]
    vocab: usize,
    #[arg(long, default_value_t = 10000.0)]
    theta: f64,
    #[arg(long, default_value_t = 4096)]
    max_context: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct StoreArgs {
    /// Model file written by gen-model.
    #[arg(long)]
    model: PathBuf,
    /// Store root directory (one subdirectory per tier).
    #[arg(long)]
    store: PathBuf,
    /// Tier spec name=throughput:cost:capacity[:latency_floor], repeatable.
    #[arg(long = "tier", required = true)]
    tiers: Vec<String>,
}

#[derive(Args)]
struct PrecomputeArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Text file: one chunk per line, decimal token ids separated by spaces.
    #[arg(long)]
    chunks: PathBuf,
    /// Tier to write into (fastest tier when omitted).
    #[arg(long)]
    into: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Chunk hash (hex), repeatable, in input order.
    #[arg(long = "chunk", required = true)]
    chunks: Vec<String>,
    /// Suffix token ids, space separated.
    #[arg(long)]
    suffix: String,
    #[arg(long, default_value = "blend")]
    method: String,
    #[arg(long, default_value_t = 0.15)]
    ratio: f64,
    /// Simulated compute speed in multiply-accumulates per second.
    #[arg(long, default_value_t = 1e9)]
    mac_rate: f64,
    /// Also run the full-prefill oracle and report attention deviations.
    #[arg(long)]
    oracle: bool,
    /// Write the fetch/compute timing trace as line-delimited JSON.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Context length the controller plans for.
    #[arg(long)]
    context_len: usize,
    #[arg(long = "tier", required = true)]
    tiers: Vec<String>,
    /// Offline profile "len=seconds,len=seconds"; derived from the model's
    /// operation counts at --mac-rate when omitted.
    #[arg(long)]
    prefill_profile: Option<String>,
    #[arg(long, default_value_t = 1e9)]
    mac_rate: f64,
    /// Quality floor for the recompute ratio.
    #[arg(long, default_value_t = 0.15)]
    floor: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    store: StoreArgs,
    #[arg(long, default_value_t = 16)]
    db_chunks: usize,
    #[arg(long, default_value_t = 32)]
    chunk_len: usize,
    #[arg(long, default_value_t = 4)]
    per_query: usize,
    #[arg(long, default_value_t = 1.0)]
    zipf_s: f64,
    #[arg(long, default_value_t = 8)]
    queries: usize,
    #[arg(long, default_value_t = 8)]
    suffix_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "blend")]
    method: String,
    #[arg(long, default_value_t = 0.15)]
    ratio: f64,
    #[arg(long, default_value_t = 1e9)]
    mac_rate: f64,
    /// Skip the per-query full-prefill oracle (faster, no deviation columns).
    #[arg(long)]
    no_oracle: bool,
    #[arg(long)]
    json: bool,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Config { .. } | CoreError::Io(_) => EXIT_CONFIG,
            CoreError::MissingChunk { .. } | CoreError::PipelineFetch { .. } => EXIT_STORE_MISS,
            _ => EXIT_INTERNAL,
        };
        CliError::new(code, e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn parse_tier(spec: &str) -> CliResult<DeviceProfile> {
    let (name, rest) = spec.split_once('=').ok_or_else(|| {
        CliError::new(
            EXIT_CONFIG,
            format!("tier {spec:?} must look like name=throughput:cost:capacity[:floor]"),
        )
    })?;
    let parts: Vec<&str> = rest.split(':').collect();
    if parts.len() < 3 || parts.len() > 4 {
        return Err(CliError::new(
            EXIT_CONFIG,
            format!("tier {spec:?} must have 3 or 4 fields after '='"),
        ));
    }
    let parse_f64 = |s: &str, what: &str| {
        s.parse::<f64>().map_err(|_| {
            CliError::new(EXIT_CONFIG, format!("tier {spec:?}: bad {what} {s:?}"))
        })
    };
    let throughput = parse_f64(parts[0], "throughput")?;
    let cost = parse_f64(parts[1], "cost")?;
    let capacity = parts[2].parse::<u64>().map_err(|_| {
        CliError::new(EXIT_CONFIG, format!("tier {spec:?}: bad capacity {:?}", parts[2]))
    })?;
    let mut profile = DeviceProfile::new(name, throughput, cost, capacity);
    if parts.len() == 4 {
        profile.simulated_latency_floor = parse_f64(parts[3], "latency floor")?;
    }
    profile.validate()?;
    Ok(profile)
}

fn load_config(path: &Path) -> CliResult<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::new(EXIT_CONFIG, format!("cannot read model file {}: {e}", path.display()))
    })?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::new(EXIT_CONFIG, format!("bad model file {}: {e}", path.display()))
    })?;
    config.validate()?;
    Ok(config)
}

fn load_model(path: &Path) -> CliResult<Weights> {
    Ok(init_weights(&load_config(path)?)?)
}

fn open_store(args: &StoreArgs) -> CliResult<(Weights, KvStore)> {
    let weights = load_model(&args.model)?;
    let profiles = args
        .tiers
        .iter()
        .map(|t| parse_tier(t))
        .collect::<CliResult<Vec<_>>>()?;
    let store = KvStore::open(&args.store, profiles)?;
    Ok((weights, store))
}

fn parse_token_ids(text: &str) -> Result<Vec<u32>, String> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<u32>()
                .map_err(|_| format!("bad token id {tok:?}"))
        })
        .collect()
}

fn cmd_gen_model(args: &GenModelArgs) -> CliResult<()> {
    let config = ModelConfig {
        num_layers: args.layers,
        num_heads: args.heads,
        head_dim: args.head_dim,
        hidden_dim: args.heads * args.head_dim,
        mlp_dim: args.mlp_dim,
        vocab_size: args.vocab,
        rope_theta_base: args.theta,
        max_context: args.max_context,
        seed: args.seed,
    };
    config.validate()?;
    let text = serde_json::to_string_pretty(&config).expect("config serializes");
    fs::write(&args.out, text).map_err(|e| {
        CliError::new(EXIT_CONFIG, format!("cannot write {}: {e}", args.out.display()))
    })?;
    let digest = hex::encode(config.digest());
    if args.json {
        println!("{}", json!({ "path": args.out, "digest": digest }));
    } else {
        println!("model written to {}", args.out.display());
        println!("digest {digest}");
    }
    Ok(())
}

fn cmd_precompute(args: &PrecomputeArgs) -> CliResult<()> {
    let (weights, store) = open_store(&args.store)?;
    let digest = weights.config.digest();
    let tier = match &args.into {
        Some(t) => t.clone(),
        None => store.tier_profiles()[0].name.clone(),
    };
    let text = fs::read_to_string(&args.chunks).map_err(|e| {
        CliError::new(
            EXIT_CONFIG,
            format!("cannot read chunk file {}: {e}", args.chunks.display()),
        )
    })?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            eprintln!("warning: line {} is empty, skipped", lineno + 1);
            continue;
        }
        let ids = parse_token_ids(line).map_err(|e| {
            CliError::new(EXIT_PARSE, format!("line {}: {e}", lineno + 1))
        })?;
        let chunk = precompute_chunk(&weights, &ids)?;
        let entry = store.put(&chunk, &digest, &tier)?;
        rows.push(json!({
            "line": lineno + 1,
            "hash": chunk.chunk_hash.to_hex(),
            "tokens": ids.len(),
            "bytes": entry.size_bytes,
            "tier": entry.tier,
        }));
    }
    if args.json {
        println!("{}", json!(rows));
    } else {
        for r in &rows {
            println!(
                "{}  {} tokens  {} bytes  -> {}",
                r["hash"].as_str().unwrap(),
                r["tokens"],
                r["bytes"],
                r["tier"].as_str().unwrap()
            );
        }
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let (weights, store) = open_store(&args.store)?;
    let method = Method::parse(&args.method)?;
    let hashes = args
        .chunks
        .iter()
        .map(|h| {
            ChunkHash::from_hex(h)
                .map_err(|e| CliError::new(EXIT_PARSE, e.to_string()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let suffix_tokens =
        parse_token_ids(&args.suffix).map_err(|e| CliError::new(EXIT_PARSE, e))?;
    let missing: Vec<String> = hashes
        .iter()
        .filter(|h| !store.contains(h))
        .map(|h| h.to_hex())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::new(
            EXIT_STORE_MISS,
            format!("chunks not in store: {}", missing.join(", ")),
        ));
    }
    let request = PipelineRequest {
        chunk_hashes: hashes.clone(),
        suffix_tokens: suffix_tokens.clone(),
        method,
        ratio: args.ratio,
    };
    let sim = SimParams {
        mac_rate: args.mac_rate,
    };
    let out = run_pipelined(&weights, &store, &request, &sim)?;
    if let Some(path) = &args.trace_out {
        fs::write(path, out.trace.to_ndjson())
            .map_err(|e| CliError::new(EXIT_CONFIG, format!("cannot write trace: {e}")))?;
    }
    let dattn_per_layer = if args.oracle {
        let mut all_tokens = Vec::new();
        for h in &hashes {
            let meta = store.chunk_meta(h)?.ok_or_else(|| {
                CliError::new(EXIT_STORE_MISS, format!("chunk {} vanished", h.to_hex()))
            })?;
            all_tokens.extend_from_slice(&meta.token_ids);
        }
        all_tokens.extend_from_slice(&suffix_tokens);
        let oracle = full_prefill(
            &weights,
            &TokenSequence::contiguous(all_tokens, 0),
            suffix_tokens.len(),
        )?;
        Some(
            out.result
                .attention
                .iter()
                .zip(oracle.attention.iter())
                .map(|(a, o)| attention_deviation(a, o))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    let mut doc = json!({
        "method": method.as_str(),
        "r": args.ratio,
        "ttft_sim": out.ttft_sim,
        "macs": out.result.macs,
        "tokens": out.result.cache.num_tokens(),
    });
    if let Some(d) = &dattn_per_layer {
        doc["dattn_per_layer"] = json!(d);
        doc["dattn_mean"] = json!(d.iter().sum::<f64>() / d.len() as f64);
    }
    if method == Method::Blend {
        doc["selection_trace"] = serde_json::to_value(&out.result.trace).expect("trace serializes");
    }
    if args.json {
        println!("{doc}");
    } else {
        println!("method      {}", method.as_str());
        println!("ratio       {}", args.ratio);
        println!("ttft_sim    {:.6} s", out.ttft_sim);
        println!("macs        {}", out.result.macs);
        if let Some(d) = &dattn_per_layer {
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            println!("dattn_mean  {mean:.6}");
            for (l, v) in d.iter().enumerate() {
                println!("  layer {l}: dattn {v:.6}");
            }
        }
    }
    Ok(())
}

fn parse_profile(text: &str) -> CliResult<Vec<(usize, f64)>> {
    text.split(',')
        .map(|pair| {
            let (l, t) = pair.split_once('=').ok_or_else(|| {
                CliError::new(EXIT_CONFIG, format!("bad profile entry {pair:?}, want len=seconds"))
            })?;
            let len = l.trim().parse::<usize>().map_err(|_| {
                CliError::new(EXIT_CONFIG, format!("bad profile length {l:?}"))
            })?;
            let secs = t.trim().parse::<f64>().map_err(|_| {
                CliError::new(EXIT_CONFIG, format!("bad profile seconds {t:?}"))
            })?;
            Ok((len, secs))
        })
        .collect()
}

fn cmd_estimate(args: &EstimateArgs) -> CliResult<()> {
    // Only the config is needed here; skip weight generation so planning for
    // big hypothetical models stays instant.
    let config = load_config(&args.model)?;
    if args.tiers.is_empty() {
        return Err(CliError::new(EXIT_CONFIG, "at least one --tier is required"));
    }
    let devices = args
        .tiers
        .iter()
        .map(|t| parse_tier(t))
        .collect::<CliResult<Vec<_>>>()?;
    let cost = match &args.prefill_profile {
        Some(text) => {
            let mut table = parse_profile(text)?;
            table.sort_by_key(|e| e.0);
            CostModel::new(
                table,
                2 * config.hidden_dim as u64 * 4,
                args.floor,
                config.num_layers,
            )?
        }
        None => {
            let mut cost = CostModel::from_model(&config, &[args.context_len], args.mac_rate)?;
            cost.quality_floor = args.floor;
            cost
        }
    };
    let l = args.context_len;
    let plans = devices
        .iter()
        .map(|d| make_plan(l, d, &cost))
        .collect::<Result<Vec<_>, _>>()?;
    let pick = pick_device(&devices, l, &cost)?;
    let ratio = pick_ratio(l, &pick.device, &cost)?;
    if args.json {
        println!(
            "{}",
            json!({
                "context_len": l,
                "plans": plans,
                "picked_device": pick.device.name,
                "ratio": ratio,
                "warning": pick.warning,
            })
        );
    } else {
        println!("context length {l}");
        for (d, p) in devices.iter().zip(plans.iter()) {
            println!(
                "  {:10} load/layer {:.6}s recompute/layer {:.6}s ratio {:.3} ttft {:.6}s",
                d.name, p.t_load_per_layer, p.t_recompute_per_layer, p.recompute_ratio,
                p.predicted_ttft
            );
        }
        println!(
            "picked {} ratio {:.3}{}",
            pick.device.name,
            ratio,
            if pick.warning {
                "  (warning: no device hides its load at the floor ratio)"
            } else {
                ""
            }
        );
        let t_rec = estimate_recompute_per_layer(cost.quality_floor, l, &cost)?;
        let loads: Vec<String> = devices
            .iter()
            .map(|d| format!("{}={:.6}s", d.name, estimate_load(l, d, &cost)))
            .collect();
        println!("floor recompute/layer {t_rec:.6}s vs loads {}", loads.join(" "));
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    let (weights, store) = open_store(&args.store)?;
    let method = Method::parse(&args.method)?;
    let spec = WorkloadSpec {
        num_chunks_in_db: args.db_chunks,
        chunk_len: args.chunk_len,
        chunks_per_query: args.per_query,
        zipf_s: args.zipf_s,
        num_queries: args.queries,
        suffix_len: args.suffix_len,
        seed: args.seed,
    };
    let db = generate_chunk_db(&spec, weights.config.vocab_size)?;
    let workload = generate_workload(&spec, weights.config.vocab_size)?;
    let cfg = ExperimentConfig {
        oracle: !args.no_oracle,
        mac_rate: args.mac_rate,
        precompute_tier: None,
    };
    let report = run_experiment(&weights, &store, &db, &workload, method, args.ratio, &cfg)?;
    if args.json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        let a = &report.aggregates;
        println!("method {}  r {}", report.method, report.r);
        println!("queries      {}", report.per_query.len());
        println!("ttft mean    {:.6} s", a.ttft_mean);
        println!("ttft p95     {:.6} s", a.ttft_p95);
        if let Some(d) = a.dattn_mean {
            println!("dattn mean   {d:.6}");
        }
        println!("mac ratio    {:.4}", a.mac_ratio);
        println!("hit rate     {:.3}", a.hit_rate);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenModel(args) => cmd_gen_model(args),
        Command::Precompute(args) => cmd_precompute(args),
        Command::Run(args) => cmd_run(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
