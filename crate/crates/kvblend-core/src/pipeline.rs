//! Loading controller and the layer-wise executor that overlaps KV fetching
//! with selective recompute.
//!
//! The controller picks a recompute ratio so that per-layer recompute time
//! matches per-layer load time (never below the quality floor), and picks the
//! cheapest storage device whose load time is hidden by recompute at the
//! floor ratio.
//!
//! The executor runs two workers per request: a fetcher that loads layer i+1
//! while the fuser computes layer i, joined by a bounded hand-off queue of
//! depth one layer. Timing is recorded under a simulated clock: fetch
//! durations come from the store's device profiles, compute durations from
//! the instrumented operation count divided by `mac_rate`, so traces are
//! deterministic. The trace obeys
//! `compute_end(i) = max(fetch_end(i), compute_end(i-1)) + t_compute(i)`.

use crate::blend::{BlendOptions, BlendResult, BlendRunner, SelectionTrace};
use crate::error::{Error, Result};
use crate::kvcache::{ChunkHash, LayerKV};
use crate::kvstore::{DeviceProfile, KvStore};
use crate::linalg::Matrix;
use crate::model::{full_prefill, TokenSequence, Weights};
use serde::{Deserialize, Serialize};
use std::sync::mpsc;

/// Offline-profiled cost model: full-prefill seconds by input length, KV
/// bytes per token per layer, and the minimum recompute ratio that preserves
/// quality.
#[derive(Debug, Clone, Serialize)]
pub struct CostModel {
    /// (input length, seconds for a full prefill), sorted by length.
    pub prefill_table: Vec<(usize, f64)>,
    /// 2 × hidden_dim × dtype bytes.
    pub per_token_kv_bytes: u64,
    /// Recompute ratio floor r*.
    pub quality_floor: f64,
    pub num_layers: usize,
}

pub const DEFAULT_QUALITY_FLOOR: f64 = 0.15;
pub const DEFAULT_MAC_RATE: f64 = 1e9;

impl CostModel {
    pub fn new(
        prefill_table: Vec<(usize, f64)>,
        per_token_kv_bytes: u64,
        quality_floor: f64,
        num_layers: usize,
    ) -> Result<Self> {
        if prefill_table.is_empty() {
            return Err(Error::config("prefill_table", "must have at least one entry"));
        }
        if !prefill_table.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::config("prefill_table", "lengths must be strictly increasing"));
        }
        if !prefill_table.windows(2).all(|w| w[0].1 <= w[1].1) {
            return Err(Error::config(
                "prefill_table",
                "prefill time must be monotone non-decreasing in length",
            ));
        }
        if !(quality_floor > 0.0 && quality_floor <= 1.0) {
            return Err(Error::config("quality_floor", "must lie in (0, 1]"));
        }
        if num_layers == 0 {
            return Err(Error::config("num_layers", "must be >= 1"));
        }
        Ok(CostModel {
            prefill_table,
            per_token_kv_bytes,
            quality_floor,
            num_layers,
        })
    }

    /// Build the profile analytically from the model's operation counts at
    /// the given lengths, at `mac_rate` multiply-accumulates per second.
    pub fn from_model(
        config: &crate::model::ModelConfig,
        lengths: &[usize],
        mac_rate: f64,
    ) -> Result<Self> {
        if !mac_rate.is_finite() || mac_rate <= 0.0 {
            return Err(Error::config("mac_rate", "must be positive"));
        }
        let mut lengths = lengths.to_vec();
        lengths.sort_unstable();
        lengths.dedup();
        let table = lengths
            .iter()
            .map(|&l| {
                (
                    l,
                    crate::model::full_prefill_mac_count(config, l) as f64 / mac_rate,
                )
            })
            .collect();
        CostModel::new(
            table,
            2 * config.hidden_dim as u64 * 4,
            DEFAULT_QUALITY_FLOOR,
            config.num_layers,
        )
    }

    /// Seconds for a full prefill of `l` tokens: exact table hit, or linear
    /// interpolation between the bracketing entries. Lengths outside the
    /// profiled range are a configuration error.
    pub fn prefill_time_full(&self, l: usize) -> Result<f64> {
        let table = &self.prefill_table;
        if let Ok(i) = table.binary_search_by_key(&l, |e| e.0) {
            return Ok(table[i].1);
        }
        let first = table[0].0;
        let last = table[table.len() - 1].0;
        if l < first || l > last {
            return Err(Error::config(
                "context_length",
                format!("{l} outside profiled range [{first}, {last}]"),
            ));
        }
        let hi = table.partition_point(|e| e.0 < l);
        let (l0, t0) = table[hi - 1];
        let (l1, t1) = table[hi];
        let frac = (l - l0) as f64 / (l1 - l0) as f64;
        Ok(t0 + frac * (t1 - t0))
    }
}

/// Whole-model recompute time at ratio r: r × full prefill time.
pub fn estimate_recompute(r: f64, l: usize, cost: &CostModel) -> Result<f64> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config("ratio", format!("must lie in (0, 1], got {r}")));
    }
    Ok(r * cost.prefill_time_full(l)?)
}

pub fn estimate_recompute_per_layer(r: f64, l: usize, cost: &CostModel) -> Result<f64> {
    Ok(estimate_recompute(r, l, cost)? / cost.num_layers as f64)
}

/// Per-layer load time: per-token KV bytes × tokens / throughput + floor.
pub fn estimate_load(l: usize, device: &DeviceProfile, cost: &CostModel) -> f64 {
    (cost.per_token_kv_bytes * l as u64) as f64 / device.throughput
        + device.simulated_latency_floor
}

/// Ratio at which per-layer recompute time equals per-layer load time,
/// floored at r* and capped at 1.
pub fn pick_ratio(l: usize, device: &DeviceProfile, cost: &CostModel) -> Result<f64> {
    let t_load = estimate_load(l, device, cost);
    let t_full_layer = cost.prefill_time_full(l)? / cost.num_layers as f64;
    let r_eq = if t_full_layer > 0.0 {
        t_load / t_full_layer
    } else {
        1.0
    };
    Ok(r_eq.max(cost.quality_floor).min(1.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct DevicePick {
    pub device: DeviceProfile,
    /// Set when no device's load time is hidden by recompute at the floor
    /// ratio and the fastest device was returned instead.
    pub warning: bool,
}

/// Cheapest device whose per-layer load time does not exceed per-layer
/// recompute time at the floor ratio; the fastest device (with a warning)
/// when none qualifies.
pub fn pick_device(devices: &[DeviceProfile], l: usize, cost: &CostModel) -> Result<DevicePick> {
    if devices.is_empty() {
        return Err(Error::config("devices", "at least one device profile is required"));
    }
    let t_recompute = estimate_recompute_per_layer(cost.quality_floor, l, cost)?;
    let qualified = devices
        .iter()
        .filter(|d| estimate_load(l, d, cost) <= t_recompute)
        .min_by(|a, b| a.storage_cost.total_cmp(&b.storage_cost));
    if let Some(device) = qualified {
        return Ok(DevicePick {
            device: device.clone(),
            warning: false,
        });
    }
    let fastest = devices
        .iter()
        .max_by(|a, b| a.throughput.total_cmp(&b.throughput))
        .expect("non-empty");
    Ok(DevicePick {
        device: fastest.clone(),
        warning: true,
    })
}

/// Storage cost of holding `l` tokens' KV on a device for `hours`.
pub fn estimate_store_cost(l: usize, hours: f64, device: &DeviceProfile, cost: &CostModel) -> f64 {
    (cost.per_token_kv_bytes * cost.num_layers as u64 * l as u64) as f64
        * device.storage_cost
        * hours
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelinePlan {
    pub recompute_ratio: f64,
    pub chosen_device: String,
    pub t_load_per_layer: f64,
    pub t_recompute_per_layer: f64,
    pub predicted_ttft: f64,
    /// Set when the device is so slow that even full recompute cannot hide
    /// its per-layer load time.
    pub load_bound: bool,
}

/// Plan for a single device: controller ratio plus the predicted pipelined
/// TTFT from the trace recurrence with constant per-layer times.
pub fn make_plan(l: usize, device: &DeviceProfile, cost: &CostModel) -> Result<PipelinePlan> {
    let ratio = pick_ratio(l, device, cost)?;
    let t_load = estimate_load(l, device, cost);
    let t_compute = estimate_recompute_per_layer(ratio, l, cost)?;
    let t_full_layer = cost.prefill_time_full(l)? / cost.num_layers as f64;
    let trace = simulate_pipeline(
        &vec![t_load; cost.num_layers],
        &vec![t_compute; cost.num_layers],
    );
    Ok(PipelinePlan {
        recompute_ratio: ratio,
        chosen_device: device.name.clone(),
        t_load_per_layer: t_load,
        t_recompute_per_layer: t_compute,
        predicted_ttft: trace.ttft(),
        load_bound: t_load > t_full_layer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEventKind {
    FetchStart,
    FetchEnd,
    ComputeStart,
    ComputeEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub event: TraceEventKind,
    pub layer: usize,
    pub t: f64,
}

/// Per-layer fetch/compute timeline under the simulated clock.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TimingTrace {
    pub events: Vec<TraceEvent>,
}

impl TimingTrace {
    pub fn event_time(&self, kind: TraceEventKind, layer: usize) -> Option<f64> {
        self.events
            .iter()
            .find(|e| e.event == kind && e.layer == layer)
            .map(|e| e.t)
    }

    /// Simulated time to first token: the last compute_end.
    pub fn ttft(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| e.event == TraceEventKind::ComputeEnd)
            .map(|e| e.t)
            .fold(0.0, f64::max)
    }

    /// One JSON object per line: {"event": ..., "layer": ..., "t": ...}.
    pub fn to_ndjson(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace event serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Barrier safety: no layer's compute starts before its fetch ends, and
    /// compute is serialized across layers.
    pub fn validate_barriers(&self) -> Result<()> {
        let layers: Vec<usize> = self
            .events
            .iter()
            .filter(|e| e.event == TraceEventKind::ComputeStart)
            .map(|e| e.layer)
            .collect();
        let mut prev_end = 0.0f64;
        for &layer in &layers {
            let cs = self
                .event_time(TraceEventKind::ComputeStart, layer)
                .ok_or_else(|| Error::domain(format!("no compute_start for layer {layer}")))?;
            let ce = self
                .event_time(TraceEventKind::ComputeEnd, layer)
                .ok_or_else(|| Error::domain(format!("no compute_end for layer {layer}")))?;
            if let Some(fe) = self.event_time(TraceEventKind::FetchEnd, layer) {
                if cs < fe {
                    return Err(Error::domain(format!(
                        "layer {layer} compute starts at {cs} before fetch ends at {fe}"
                    )));
                }
            }
            if cs < prev_end {
                return Err(Error::domain(format!(
                    "layer {layer} compute starts at {cs} before previous layer ends at {prev_end}"
                )));
            }
            if ce < cs {
                return Err(Error::domain(format!("layer {layer} compute ends before it starts")));
            }
            prev_end = ce;
        }
        Ok(())
    }
}

/// Unroll the two-worker, depth-1-queue schedule for the given per-layer
/// durations:
///
/// ```text
/// fetch_start(0)   = 0
/// fetch_end(i)     = fetch_start(i) + t_load(i)
/// compute_start(i) = max(fetch_end(i), compute_end(i-1))
/// compute_end(i)   = compute_start(i) + t_compute(i)
/// fetch_start(i+1) = max(fetch_end(i), compute_start(i))   // slot frees
/// ```
pub fn simulate_pipeline(t_load: &[f64], t_compute: &[f64]) -> TimingTrace {
    assert_eq!(t_load.len(), t_compute.len());
    let n = t_load.len();
    let mut trace = TimingTrace::default();
    let mut fetch_end_prev = 0.0f64;
    let mut compute_end_prev = 0.0f64;
    let mut fetch_start = 0.0f64;
    for i in 0..n {
        let fetch_end = fetch_start + t_load[i];
        let compute_start = fetch_end.max(compute_end_prev);
        let compute_end = compute_start + t_compute[i];
        trace.events.push(TraceEvent {
            event: TraceEventKind::FetchStart,
            layer: i,
            t: fetch_start,
        });
        trace.events.push(TraceEvent {
            event: TraceEventKind::FetchEnd,
            layer: i,
            t: fetch_end,
        });
        trace.events.push(TraceEvent {
            event: TraceEventKind::ComputeStart,
            layer: i,
            t: compute_start,
        });
        trace.events.push(TraceEvent {
            event: TraceEventKind::ComputeEnd,
            layer: i,
            t: compute_end,
        });
        fetch_start = fetch_end.max(compute_start);
        fetch_end_prev = fetch_end;
        compute_end_prev = compute_end;
    }
    let _ = fetch_end_prev;
    trace
}

/// Compute-only schedule (nothing to fetch).
pub fn simulate_compute_only(t_compute: &[f64]) -> TimingTrace {
    let mut trace = TimingTrace::default();
    let mut t = 0.0f64;
    for (i, &tc) in t_compute.iter().enumerate() {
        trace.events.push(TraceEvent {
            event: TraceEventKind::ComputeStart,
            layer: i,
            t,
        });
        t += tc;
        trace.events.push(TraceEvent {
            event: TraceEventKind::ComputeEnd,
            layer: i,
            t,
        });
    }
    trace
}

/// How a request reconstructs its KV cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Full prefill, nothing reused.
    Full,
    /// First chunk reused as a true prefix, everything else recomputed.
    Prefix,
    /// All chunk KV reused; only the suffix is computed.
    Reuse,
    /// Selective recompute at the requested ratio.
    Blend,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "full" => Ok(Method::Full),
            "prefix" => Ok(Method::Prefix),
            "reuse" => Ok(Method::Reuse),
            "blend" => Ok(Method::Blend),
            other => Err(Error::config(
                "method",
                format!("unknown method {other:?} (expected full|prefix|reuse|blend)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Prefix => "prefix",
            Method::Reuse => "reuse",
            Method::Blend => "blend",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRequest {
    pub chunk_hashes: Vec<ChunkHash>,
    pub suffix_tokens: Vec<u32>,
    pub method: Method,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SimParams {
    /// Multiply-accumulates per simulated second.
    pub mac_rate: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            mac_rate: DEFAULT_MAC_RATE,
        }
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub result: BlendResult,
    pub trace: TimingTrace,
    pub ttft_sim: f64,
}

fn concat_layer_rows(parts: &[LayerKV], hidden: usize) -> LayerKV {
    let total: usize = parts.iter().map(|p| p.num_tokens()).sum();
    let mut k = Matrix::zeros(total, hidden);
    let mut v = Matrix::zeros(total, hidden);
    let mut row = 0;
    for p in parts {
        for t in 0..p.num_tokens() {
            k.set_row(row, p.k.row(t));
            v.set_row(row, p.v.row(t));
            row += 1;
        }
    }
    LayerKV { k, v }
}

fn zero_layer(tokens: usize, hidden: usize) -> LayerKV {
    LayerKV {
        k: Matrix::zeros(tokens, hidden),
        v: Matrix::zeros(tokens, hidden),
    }
}

/// Run a request with fetching pipelined against recompute.
///
/// The fetcher worker loads layer i+1 from the store while the fuser computes
/// layer i; the fuser blocks on the hand-off queue until a layer's KV is
/// resident (the per-layer barrier). Fetch durations on the simulated clock
/// come from device profiles, compute durations from instrumented operation
/// counts at `sim.mac_rate`.
pub fn run_pipelined(
    weights: &Weights,
    store: &KvStore,
    request: &PipelineRequest,
    sim: &SimParams,
) -> Result<PipelineOutput> {
    if !sim.mac_rate.is_finite() || sim.mac_rate <= 0.0 {
        return Err(Error::config("mac_rate", "must be positive"));
    }
    let num_layers = weights.config.num_layers;
    let hidden = weights.config.hidden_dim;

    // Resolve chunk metadata up front; a missing chunk fails fast.
    let mut chunk_tokens: Vec<Vec<u32>> = Vec::with_capacity(request.chunk_hashes.len());
    for hash in &request.chunk_hashes {
        let meta = store.chunk_meta(hash)?.ok_or_else(|| Error::MissingChunk {
            hash: hash.to_hex(),
        })?;
        if meta.num_layers != num_layers || meta.hidden_dim != hidden {
            return Err(Error::domain(format!(
                "chunk {hash} has shape {}x{}, model needs {num_layers}x{hidden}",
                meta.num_layers, meta.hidden_dim
            )));
        }
        chunk_tokens.push(meta.token_ids);
    }
    let n_reused: usize = chunk_tokens.iter().map(|c| c.len()).sum();
    let suffix = TokenSequence::contiguous(request.suffix_tokens.clone(), n_reused);

    if request.method == Method::Full {
        let mut all_tokens: Vec<u32> = chunk_tokens.concat();
        all_tokens.extend_from_slice(&request.suffix_tokens);
        let input = TokenSequence::contiguous(all_tokens, 0);
        let pre = full_prefill(weights, &input, request.suffix_tokens.len())?;
        let per_layer = pre.macs as f64 / num_layers as f64 / sim.mac_rate;
        let trace = simulate_compute_only(&vec![per_layer; num_layers]);
        let ttft = trace.ttft();
        let result = BlendResult {
            cache: pre.cache,
            attention: pre.attention,
            trace: SelectionTrace::default(),
            last_logits: pre.last_logits,
            macs: pre.macs,
            layer_macs: vec![pre.macs / num_layers as u64; num_layers],
        };
        return Ok(PipelineOutput {
            result,
            trace,
            ttft_sim: ttft,
        });
    }

    let mut runner = match request.method {
        Method::Blend => BlendRunner::new_blend(
            weights,
            &chunk_tokens,
            &suffix,
            request.ratio,
            BlendOptions::default(),
        )?,
        Method::Reuse => BlendRunner::new_reuse(weights, &chunk_tokens, &suffix)?,
        Method::Prefix => BlendRunner::new_prefix(weights, &chunk_tokens, &suffix)?,
        Method::Full => unreachable!(),
    };

    // Prefix only ever reads the first chunk's precomputed rows; the rest are
    // recomputed every layer, so fetching them would be wasted IO.
    let fetch_count = match request.method {
        Method::Prefix => 1,
        _ => request.chunk_hashes.len(),
    };
    let chunk_lens: Vec<usize> = chunk_tokens.iter().map(|c| c.len()).collect();

    let (tx, rx) = mpsc::sync_channel::<Result<(LayerKV, f64)>>(1);
    let (result, loads) = std::thread::scope(|scope| -> Result<(BlendResult, Vec<f64>)> {
        scope.spawn(move || {
            for layer in 0..num_layers {
                let mut parts: Vec<LayerKV> = Vec::with_capacity(chunk_lens.len());
                let mut sim_seconds = 0.0f64;
                let mut failed = None;
                for (ci, hash) in request.chunk_hashes.iter().enumerate() {
                    if ci < fetch_count {
                        match store.fetch_layer(hash, layer) {
                            Ok(Some(fetched)) => {
                                sim_seconds += fetched.sim_seconds;
                                parts.push(fetched.kv);
                            }
                            Ok(None) => {
                                failed = Some(Error::PipelineFetch {
                                    hash: hash.to_hex(),
                                    layer,
                                });
                                break;
                            }
                            Err(e) => {
                                failed = Some(e);
                                break;
                            }
                        }
                    } else {
                        parts.push(zero_layer(chunk_lens[ci], hidden));
                    }
                }
                let msg = match failed {
                    Some(e) => Err(e),
                    None => Ok((concat_layer_rows(&parts, hidden), sim_seconds)),
                };
                let stop = msg.is_err();
                if tx.send(msg).is_err() || stop {
                    return;
                }
            }
        });

        let mut loads = Vec::with_capacity(num_layers);
        for layer in 0..num_layers {
            let (pre_layer, sim_seconds) = rx.recv().map_err(|_| Error::PipelineFetch {
                hash: "<fetcher stopped>".to_string(),
                layer,
            })??;
            loads.push(sim_seconds);
            runner.step(&pre_layer)?;
        }
        Ok((runner.finish()?, loads))
    })?;

    let computes: Vec<f64> = result
        .layer_macs
        .iter()
        .map(|&m| m as f64 / sim.mac_rate)
        .collect();
    let trace = simulate_pipeline(&loads, &computes);
    trace.validate_barriers()?;
    let ttft = trace.ttft();
    Ok(PipelineOutput {
        result,
        trace,
        ttft_sim: ttft,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost_7b_like() -> CostModel {
        // Per-layer full recompute 20 time units over 32 layers.
        CostModel::new(vec![(4096, 640.0)], 16_384, 0.15, 32).unwrap()
    }

    #[test]
    fn recompute_estimator_is_linear() {
        let cost = cost_7b_like();
        assert_eq!(estimate_recompute(1.0, 4096, &cost).unwrap(), 640.0);
        let r = estimate_recompute(0.15, 4096, &cost).unwrap();
        assert!((r - 0.15 * 640.0).abs() < 1e-9);
        // 15% per-layer recompute of 3 units implies a 20-unit full layer
        let per_layer = estimate_recompute_per_layer(0.15, 4096, &cost).unwrap();
        assert!((per_layer - 3.0).abs() < 1e-12);
    }

    #[test]
    fn load_estimator_shape() {
        let cost = cost_7b_like();
        // 16 KiB per token per layer × 4096 tokens = 2^26 bytes; throughput
        // 2^22 bytes per unit -> 16 units per layer.
        let dev = DeviceProfile::new("nvme", 4_194_304.0, 1.0, u64::MAX);
        assert_eq!(estimate_load(4096, &dev, &cost), 16.0);
        let double = DeviceProfile::new("nvme2", 8_388_608.0, 1.0, u64::MAX);
        assert_eq!(estimate_load(4096, &double, &cost), 8.0);
        let mut floored = dev.clone();
        floored.simulated_latency_floor = 0.5;
        assert_eq!(estimate_load(0, &floored, &cost), 0.5);
    }

    #[test]
    fn pick_ratio_equalizes_or_floors() {
        let cost = cost_7b_like();
        // Load 16 vs full layer 20 -> recompute 80% hides the load exactly.
        let dev = DeviceProfile::new("nvme", 4_194_304.0, 1.0, u64::MAX);
        assert_eq!(pick_ratio(4096, &dev, &cost).unwrap(), 0.8);
        // Fast device -> floor wins.
        let fast = DeviceProfile::new("ram", 1e15, 10.0, u64::MAX);
        assert_eq!(pick_ratio(4096, &fast, &cost).unwrap(), 0.15);
        // 70B-like: 15% recompute takes 7 units, load 4 -> floor.
        let cost70 = CostModel::new(vec![(4096, 80.0 * (7.0 / 0.15))], 16_384, 0.15, 80).unwrap();
        let dev70 = DeviceProfile::new(
            "nvme",
            (16_384u64 * 4096) as f64 / 4.0,
            1.0,
            u64::MAX,
        );
        assert!((estimate_load(4096, &dev70, &cost70) - 4.0).abs() < 1e-9);
        assert_eq!(pick_ratio(4096, &dev70, &cost70).unwrap(), 0.15);
    }

    #[test]
    fn pick_device_rule() {
        // Recompute at the floor is 3 units per layer.
        let cost = CostModel::new(vec![(1024, 640.0)], 16, 0.15, 32).unwrap();
        let t_rec = estimate_recompute_per_layer(0.15, 1024, &cost).unwrap();
        assert!((t_rec - 3.0).abs() < 1e-12);
        let bytes = 16.0 * 1024.0;
        let ram = DeviceProfile::new("ram", bytes / 1.0, 10.0, u64::MAX);
        let ssd = DeviceProfile::new("ssd", bytes / 2.5, 3.0, u64::MAX);
        let hdd = DeviceProfile::new("hdd", bytes / 9.0, 1.0, u64::MAX);
        let pick = pick_device(&[ram.clone(), ssd.clone(), hdd.clone()], 1024, &cost).unwrap();
        assert_eq!(pick.device.name, "ssd");
        assert!(!pick.warning);
        // All too slow -> fastest with warning.
        let slow1 = DeviceProfile::new("a", bytes / 5.0, 2.0, u64::MAX);
        let slow2 = DeviceProfile::new("b", bytes / 9.0, 1.0, u64::MAX);
        let pick = pick_device(&[slow1, slow2], 1024, &cost).unwrap();
        assert_eq!(pick.device.name, "a");
        assert!(pick.warning);
        // Single device -> itself.
        let pick = pick_device(std::slice::from_ref(&ram), 1024, &cost).unwrap();
        assert_eq!(pick.device.name, "ram");
        assert!(pick_device(&[], 1024, &cost).is_err());
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let cost = CostModel::new(vec![(100, 1.0), (200, 3.0)], 16, 0.15, 4).unwrap();
        assert_eq!(cost.prefill_time_full(100).unwrap(), 1.0);
        assert_eq!(cost.prefill_time_full(150).unwrap(), 2.0);
        assert!(cost.prefill_time_full(50).is_err());
        assert!(cost.prefill_time_full(300).is_err());
    }

    #[test]
    fn pipeline_recurrence_load_bound() {
        // 32 layers, load 5, compute 3: TTFT = 32×5 + 3 = 163.
        let trace = simulate_pipeline(&[5.0; 32], &[3.0; 32]);
        assert_eq!(trace.ttft(), 163.0);
        trace.validate_barriers().unwrap();
    }

    #[test]
    fn pipeline_zero_load_is_compute_bound() {
        let trace = simulate_pipeline(&[0.0; 8], &[3.0; 8]);
        assert_eq!(trace.ttft(), 24.0);
    }

    #[test]
    fn pipeline_hiding_when_compute_dominates() {
        let loads = [4.0, 3.0, 2.0, 4.0];
        let computes = [4.0, 5.0, 4.0, 6.0];
        let trace = simulate_pipeline(&loads, &computes);
        let expected = loads[0] + computes.iter().sum::<f64>();
        assert!((trace.ttft() - expected).abs() < 1e-12);
        trace.validate_barriers().unwrap();
    }

    #[test]
    fn trace_ndjson_shape() {
        let trace = simulate_pipeline(&[1.0], &[2.0]);
        let text = trace.to_ndjson();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["event"], "fetch_start");
        assert_eq!(v["layer"], 0);
        assert_eq!(v["t"], 0.0);
    }

    #[test]
    fn method_parsing() {
        assert_eq!(Method::parse("blend").unwrap(), Method::Blend);
        assert_eq!(Method::parse("full").unwrap(), Method::Full);
        assert!(Method::parse("magic").is_err());
    }
}
