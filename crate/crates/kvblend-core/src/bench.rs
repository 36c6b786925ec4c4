//! Synthetic retrieval workloads and the experiment runner that compares
//! cache-reconstruction methods against the full-prefill oracle.
//!
//! Retrieval is simulated by popularity-skewed id sampling (a Zipf weight per
//! chunk); there is no embedding model here, so workload realism is carried
//! by the skew alone. The default spec matches the documented benchmark
//! profile (512-token chunks, 6 chunks per query); tests shrink it.

use crate::blend::precompute_chunk;
use crate::error::{Error, Result};
use crate::kvcache::{attention_deviation, chunk_hash, DeviationReport};
use crate::kvstore::KvStore;
use crate::model::{full_prefill, full_prefill_mac_count, TokenSequence, Weights};
use crate::pipeline::{run_pipelined, Method, PipelineRequest, SimParams};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub num_chunks_in_db: usize,
    pub chunk_len: usize,
    pub chunks_per_query: usize,
    /// Zipf exponent; 0 is uniform popularity.
    pub zipf_s: f64,
    pub num_queries: usize,
    pub suffix_len: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            num_chunks_in_db: 64,
            chunk_len: 512,
            chunks_per_query: 6,
            zipf_s: 1.0,
            num_queries: 32,
            suffix_len: 32,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_chunks_in_db == 0 {
            return Err(Error::config("num_chunks_in_db", "must be >= 1"));
        }
        if self.chunk_len == 0 {
            return Err(Error::config("chunk_len", "must be >= 1"));
        }
        if self.chunks_per_query == 0 || self.chunks_per_query > self.num_chunks_in_db {
            return Err(Error::config(
                "chunks_per_query",
                format!(
                    "must lie in [1, {}], got {}",
                    self.num_chunks_in_db, self.chunks_per_query
                ),
            ));
        }
        if self.zipf_s < 0.0 {
            return Err(Error::config("zipf_s", "must be non-negative"));
        }
        if self.suffix_len == 0 {
            return Err(Error::config("suffix_len", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Query {
    pub chunk_ids: Vec<usize>,
    pub suffix_tokens: Vec<u32>,
}

fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn uniform_u32(rng: &mut ChaCha8Rng, bound: u32) -> u32 {
    ((rng.next_u32() as u64 * bound as u64) >> 32) as u32
}

/// Deterministic chunk database: `num_chunks_in_db` random token sequences of
/// `chunk_len` tokens each.
pub fn generate_chunk_db(spec: &WorkloadSpec, vocab_size: usize) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    Ok((0..spec.num_chunks_in_db)
        .map(|_| {
            (0..spec.chunk_len)
                .map(|_| uniform_u32(&mut rng, vocab_size as u32))
                .collect()
        })
        .collect())
}

/// Queries drawn per seed: chunk ids without replacement under Zipf weights
/// w_i = (i+1)^-s, suffix tokens uniform over the vocabulary.
pub fn generate_workload(spec: &WorkloadSpec, vocab_size: usize) -> Result<Vec<Query>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base_weights: Vec<f64> = (0..spec.num_chunks_in_db)
        .map(|i| 1.0 / ((i + 1) as f64).powf(spec.zipf_s))
        .collect();
    let mut queries = Vec::with_capacity(spec.num_queries);
    for _ in 0..spec.num_queries {
        let mut weights = base_weights.clone();
        let mut chunk_ids = Vec::with_capacity(spec.chunks_per_query);
        for _ in 0..spec.chunks_per_query {
            let total: f64 = weights.iter().sum();
            let mut u = uniform_f64(&mut rng) * total;
            let mut picked = spec.num_chunks_in_db - 1;
            for (i, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if u < w {
                    picked = i;
                    break;
                }
                u -= w;
            }
            chunk_ids.push(picked);
            weights[picked] = 0.0;
        }
        let suffix_tokens = (0..spec.suffix_len)
            .map(|_| uniform_u32(&mut rng, vocab_size as u32))
            .collect();
        queries.push(Query {
            chunk_ids,
            suffix_tokens,
        });
    }
    Ok(queries)
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryMetrics {
    pub ttft_sim: f64,
    pub macs: u64,
    pub mac_ratio: f64,
    pub store_hits: usize,
    pub store_misses: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dattn_per_layer: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dattn_mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregates {
    pub ttft_mean: f64,
    pub ttft_p95: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dattn_mean: Option<f64>,
    pub mac_ratio: f64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub method: String,
    pub r: f64,
    pub per_query: Vec<QueryMetrics>,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Run the full-prefill oracle per query and report attention deviations.
    pub oracle: bool,
    pub mac_rate: f64,
    /// Tier new chunk KVs are precomputed into (the fastest tier if unset).
    pub precompute_tier: Option<String>,
    /// Opt-in: run independent queries concurrently against the store.
    /// Sequential by default so hit/miss accounting is reproducible.
    pub parallel_queries: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            oracle: true,
            mac_rate: crate::pipeline::DEFAULT_MAC_RATE,
            precompute_tier: None,
            parallel_queries: false,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Execute every query with the given method. Chunk KVs are precomputed into
/// the store on first use (a miss); later queries hit.
pub fn run_experiment(
    weights: &Weights,
    store: &KvStore,
    db: &[Vec<u32>],
    workload: &[Query],
    method: Method,
    ratio: f64,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    if workload.is_empty() {
        return Err(Error::domain("workload has no queries".to_string()));
    }
    let digest = weights.config.digest();
    let tier = match &cfg.precompute_tier {
        Some(t) => t.clone(),
        None => store
            .tier_profiles()
            .first()
            .map(|p| p.name.clone())
            .ok_or_else(|| Error::config("tiers", "store has no tiers"))?,
    };
    let sim = SimParams {
        mac_rate: cfg.mac_rate,
    };
    let mut per_query = Vec::with_capacity(workload.len());
    for query in workload {
        let mut hashes = Vec::with_capacity(query.chunk_ids.len());
        let mut hits = 0usize;
        let mut misses = 0usize;
        for &cid in &query.chunk_ids {
            let tokens = db.get(cid).ok_or_else(|| {
                Error::config("workload", format!("chunk id {cid} outside database"))
            })?;
            let hash = chunk_hash(&digest, tokens);
            if store.contains(&hash) {
                hits += 1;
            } else {
                misses += 1;
                let chunk = precompute_chunk(weights, tokens)?;
                store.put(&chunk, &digest, &tier)?;
            }
            hashes.push(hash);
        }
        let request = PipelineRequest {
            chunk_hashes: hashes,
            suffix_tokens: query.suffix_tokens.clone(),
            method,
            ratio,
        };
        let out = run_pipelined(weights, store, &request, &sim)?;
        let total_tokens =
            query.chunk_ids.len() * db[0].len() + query.suffix_tokens.len();
        let full_macs = full_prefill_mac_count(&weights.config, total_tokens);
        let (dattn_per_layer, dattn_mean) = if cfg.oracle {
            let mut all_tokens: Vec<u32> = Vec::with_capacity(total_tokens);
            for &cid in &query.chunk_ids {
                all_tokens.extend_from_slice(&db[cid]);
            }
            all_tokens.extend_from_slice(&query.suffix_tokens);
            let oracle = full_prefill(
                weights,
                &TokenSequence::contiguous(all_tokens, 0),
                query.suffix_tokens.len(),
            )?;
            let per_layer: Vec<f64> = out
                .result
                .attention
                .iter()
                .zip(oracle.attention.iter())
                .map(|(a, o)| attention_deviation(a, o))
                .collect::<Result<_>>()?;
            let mean = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
            (Some(per_layer), Some(mean))
        } else {
            (None, None)
        };
        per_query.push(QueryMetrics {
            ttft_sim: out.ttft_sim,
            macs: out.result.macs,
            mac_ratio: out.result.macs as f64 / full_macs as f64,
            store_hits: hits,
            store_misses: misses,
            dattn_per_layer,
            dattn_mean,
        });
    }

    let mut ttfts: Vec<f64> = per_query.iter().map(|q| q.ttft_sim).collect();
    ttfts.sort_by(f64::total_cmp);
    let n = per_query.len() as f64;
    let dattn_mean = if cfg.oracle {
        Some(per_query.iter().filter_map(|q| q.dattn_mean).sum::<f64>() / n)
    } else {
        None
    };
    let hits: usize = per_query.iter().map(|q| q.store_hits).sum();
    let misses: usize = per_query.iter().map(|q| q.store_misses).sum();
    let aggregates = Aggregates {
        ttft_mean: per_query.iter().map(|q| q.ttft_sim).sum::<f64>() / n,
        ttft_p95: percentile(&ttfts, 0.95),
        dattn_mean,
        mac_ratio: per_query.iter().map(|q| q.mac_ratio).sum::<f64>() / n,
        hit_rate: hits as f64 / (hits + misses).max(1) as f64,
    };
    Ok(MetricsReport {
        method: method.to_string(),
        r: ratio,
        per_query,
        aggregates,
    })
}

/// Empirical CDF of per-token KV deviation at one layer: sorted
/// (value, quantile) pairs ending at quantile 1.
pub fn deviation_cdf(reports: &[DeviationReport], layer: usize) -> Result<Vec<(f64, f64)>> {
    let mut values: Vec<f64> = reports
        .iter()
        .filter(|r| r.layer == layer)
        .flat_map(|r| r.per_token_kv_dev.iter().copied())
        .collect();
    if values.is_empty() {
        return Err(Error::domain(format!(
            "no deviation entries for layer {layer}"
        )));
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, (i + 1) as f64 / n))
        .collect())
}

/// Ratio of the top-decile deviation to the median; > 1 signals a heavy tail.
pub fn heavy_tail_ratio(cdf: &[(f64, f64)]) -> f64 {
    let value_at = |q: f64| {
        cdf.iter()
            .find(|&&(_, quantile)| quantile >= q)
            .map(|&(v, _)| v)
            .unwrap_or(0.0)
    };
    let median = value_at(0.5);
    let top = value_at(0.9);
    if median > 0.0 {
        top / median
    } else {
        f64::INFINITY
    }
}
