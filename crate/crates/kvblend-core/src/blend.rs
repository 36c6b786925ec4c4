//! Selective KV recomputation: fuse independently precomputed chunk caches
//! into one coherent cache by recomputing only the tokens whose K/V deviate
//! most from what a full prefill would have produced.
//!
//! Layer 1 is a full pass over all tokens. From layer 2 on, the candidate set
//! is the set selected at the previous layer; the layer recomputes the
//! candidates' K/V, measures their deviation against the precomputed entries,
//! keeps the top share given by the per-layer schedule (plus the suffix, which
//! has no precomputed KV and is always recomputed), and runs attention and the
//! MLP only for the kept rows. Attention still spans every token because the
//! key/value store is expanded with the reused entries. Entries not selected
//! at a layer are carried over from the precomputed cache untouched.

use crate::error::{Error, Result};
use crate::kvcache::{
    concat_chunks, chunk_hash, token_deviation, CacheRole, ChunkKV, DeviationMode, KVCache,
    LayerKV,
};
use crate::linalg::{matmul, rms_norm, MacCounter, Matrix};
use crate::model::{
    attention_forward, embed_tokens, final_logits, full_prefill, layer_tail, ForwardAttention,
    TokenSequence, Weights,
};
use crate::rope::RopeParams;
use serde::Serialize;

/// Per-layer recompute ratios for layers 2..=L (layer 1 is a full pass).
/// Monotone non-increasing, each in (0, 1], mean equal to the target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecomputeSchedule {
    pub target_ratio: f64,
    pub per_layer_ratios: Vec<f64>,
}

impl RecomputeSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.per_layer_ratios.is_empty() {
            return Err(Error::config("schedule", "needs at least one layer ratio"));
        }
        if !self
            .per_layer_ratios
            .iter()
            .all(|&r| r > 0.0 && r <= 1.0)
        {
            return Err(Error::config("schedule", "ratios must lie in (0, 1]"));
        }
        if !self.per_layer_ratios.windows(2).all(|w| w[0] >= w[1]) {
            return Err(Error::config("schedule", "ratios must be non-increasing"));
        }
        let mean =
            self.per_layer_ratios.iter().sum::<f64>() / self.per_layer_ratios.len() as f64;
        if (mean - self.target_ratio).abs() > 1e-9 {
            return Err(Error::config(
                "schedule",
                format!("mean {mean} differs from target {}", self.target_ratio),
            ));
        }
        Ok(())
    }
}

/// Linear ramp from 1.2·r down to 0.8·r across layers 2..=L.
pub fn make_schedule(r: f64, num_layers: usize) -> Result<RecomputeSchedule> {
    make_schedule_ramp(r, num_layers, 1.2, 0.8)
}

/// Ramp with configurable endpoint factors. Entries clamp to (0, 1]; mass
/// clipped at 1.0 is redistributed over the unclamped entries (water fill) so
/// the mean stays exactly the target.
pub fn make_schedule_ramp(
    r: f64,
    num_layers: usize,
    high: f64,
    low: f64,
) -> Result<RecomputeSchedule> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(
            "ratio",
            format!("recompute ratio must lie in (0, 1], got {r}"),
        ));
    }
    if num_layers < 2 {
        return Err(Error::config("num_layers", "schedule needs at least 2 layers"));
    }
    if !(high >= low && low > 0.0) {
        return Err(Error::config("schedule", "ramp factors must satisfy high >= low > 0"));
    }
    let n = num_layers - 1;
    let mut ratios: Vec<f64> = if n == 1 {
        vec![r]
    } else {
        (0..n)
            .map(|i| r * (high - (high - low) * i as f64 / (n - 1) as f64))
            .collect()
    };
    // Clamp and water-fill until the mean is back at r. Values within a
    // rounding error of 1.0 snap to it so degenerate ramps end exactly at 1.
    const SNAP: f64 = 1e-12;
    let target_sum = r * n as f64;
    let mut clamped = vec![false; n];
    for (c, v) in clamped.iter_mut().zip(ratios.iter_mut()) {
        if *v >= 1.0 - SNAP {
            *v = 1.0;
            *c = true;
        }
    }
    loop {
        let sum: f64 = ratios.iter().sum();
        let deficit = target_sum - sum;
        if deficit <= SNAP {
            break;
        }
        let free = clamped.iter().filter(|&&c| !c).count();
        if free == 0 {
            break;
        }
        let bump = deficit / free as f64;
        let mut newly_clamped = false;
        for (c, v) in clamped.iter_mut().zip(ratios.iter_mut()) {
            if !*c {
                *v += bump;
                if *v >= 1.0 - SNAP {
                    *v = 1.0;
                    *c = true;
                    newly_clamped = true;
                }
            }
        }
        if !newly_clamped {
            break;
        }
    }
    let schedule = RecomputeSchedule {
        target_ratio: r,
        per_layer_ratios: ratios,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Token indices recomputed at one layer: the high-deviation picks plus the
/// always-on set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionMask {
    pub layer: usize,
    pub selected: Vec<usize>,
}

/// Pick the top ceil(ratio × total_reused) candidates by deviation (ties break
/// toward the lower token index) and union the always-on set.
pub fn select_high_deviation(
    layer: usize,
    deviations: &[f64],
    candidates: &[usize],
    ratio: f64,
    total_reused: usize,
    always_on: &[usize],
) -> Result<SelectionMask> {
    if ratio <= 0.0 {
        return Err(Error::config(
            "ratio",
            format!("selection ratio must be positive, got {ratio}"),
        ));
    }
    if deviations.len() != candidates.len() {
        return Err(Error::shape(
            format!("{} deviations", candidates.len()),
            format!("{}", deviations.len()),
        ));
    }
    let ratio = ratio.min(1.0);
    let count = ((ratio * total_reused as f64).ceil() as usize).min(candidates.len());
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        deviations[b]
            .total_cmp(&deviations[a])
            .then_with(|| candidates[a].cmp(&candidates[b]))
    });
    let mut selected: Vec<usize> = order[..count].iter().map(|&i| candidates[i]).collect();
    selected.extend_from_slice(always_on);
    selected.sort_unstable();
    selected.dedup();
    Ok(SelectionMask { layer, selected })
}

/// How a layer ranks its candidates when selecting.
#[derive(Debug, Clone, Copy)]
pub enum RankBy<'a> {
    /// Deviations measured at this layer against the precomputed entries.
    Measured,
    /// Externally supplied per-token deviations (indexed by token index).
    Provided(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct SelectPolicy<'a> {
    pub ratio: f64,
    pub total_reused: usize,
    pub rank_by: RankBy<'a>,
    /// Rank ascending instead of descending (baseline for comparisons).
    pub take_lowest: bool,
}

#[derive(Debug)]
pub struct PartialLayerOutput {
    pub selection: SelectionMask,
    /// Recomputed K/V rows for the selected tokens, in selection order.
    pub new_kv: LayerKV,
    /// Layer input rows for the next layer, for the selected tokens.
    pub next_inputs: Matrix,
    /// (token index, deviation) for every reused candidate.
    pub deviations: Vec<(usize, f64)>,
    /// Post-softmax head-averaged attention rows of the selected tokens over
    /// all tokens.
    pub attn_rows: Matrix,
    /// The layer as it enters the output cache: precomputed entries, with the
    /// selected rows overwritten by the recomputed values.
    pub blended: LayerKV,
}

/// Recompute one layer for a subset of tokens.
///
/// Candidates' K/V are recomputed from their layer inputs and compared against
/// the precomputed entries; if a policy is given, only the top share continues
/// through attention and the MLP (suffix candidates always continue). The
/// precomputed copies of unselected rows are kept bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn partial_prefill_layer(
    weights: &Weights,
    rope: &RopeParams,
    layer: usize,
    candidates: &[usize],
    inputs: &Matrix,
    pre_kv: &LayerKV,
    positions: &[usize],
    n_reused: usize,
    policy: Option<SelectPolicy<'_>>,
    measure_deviations: bool,
    mode: DeviationMode,
    macs: &MacCounter,
) -> Result<PartialLayerOutput> {
    let t_total = positions.len();
    let hidden = weights.config.hidden_dim;
    if candidates.is_empty() {
        return Err(Error::domain("selected token set must be non-empty".to_string()));
    }
    if !candidates.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::domain("candidate indices must be strictly increasing".to_string()));
    }
    if *candidates.last().unwrap() >= t_total {
        return Err(Error::domain(format!(
            "candidate index {} out of range for {t_total} tokens",
            candidates.last().unwrap()
        )));
    }
    if inputs.rows() != candidates.len() || inputs.cols() != hidden {
        return Err(Error::shape(
            format!("{}x{hidden} inputs", candidates.len()),
            format!("{}x{}", inputs.rows(), inputs.cols()),
        ));
    }
    if pre_kv.num_tokens() != n_reused || pre_kv.hidden_dim() != hidden {
        return Err(Error::shape(
            format!("precomputed layer of {n_reused}x{hidden}"),
            format!("{}x{}", pre_kv.num_tokens(), pre_kv.hidden_dim()),
        ));
    }
    // Suffix tokens have no precomputed KV; any suffix token missing from the
    // candidate set would leave a hole in the expanded K/V store.
    for s in n_reused..t_total {
        if candidates.binary_search(&s).is_err() {
            return Err(Error::domain(format!(
                "suffix token {s} has no precomputed KV and is not a candidate"
            )));
        }
    }

    let lw = &weights.layers[layer];
    let xn = rms_norm(inputs, &lw.attn_norm);
    let k_c = matmul(&xn, &lw.wk, macs);
    let v_c = matmul(&xn, &lw.wv, macs);

    let mut deviations = Vec::new();
    if measure_deviations || policy.is_some() {
        for (local, &tok) in candidates.iter().enumerate() {
            if tok < n_reused {
                deviations.push((
                    tok,
                    token_deviation(
                        k_c.row(local),
                        v_c.row(local),
                        pre_kv.k.row(tok),
                        pre_kv.v.row(tok),
                        mode,
                    ),
                ));
            }
        }
    }

    let selection = match policy {
        None => SelectionMask {
            layer,
            selected: candidates.to_vec(),
        },
        Some(p) => {
            let reused: Vec<usize> = deviations.iter().map(|&(t, _)| t).collect();
            let mut ranked: Vec<f64> = match p.rank_by {
                RankBy::Measured => deviations.iter().map(|&(_, d)| d).collect(),
                RankBy::Provided(all) => {
                    if all.len() < n_reused {
                        return Err(Error::shape(
                            format!("{n_reused} provided deviations"),
                            format!("{}", all.len()),
                        ));
                    }
                    reused.iter().map(|&t| all[t]).collect()
                }
            };
            if p.take_lowest {
                for d in ranked.iter_mut() {
                    *d = -*d;
                }
            }
            let always_on: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&t| t >= n_reused)
                .collect();
            select_high_deviation(layer, &ranked, &reused, p.ratio, p.total_reused, &always_on)?
        }
    };

    let sel_local: Vec<usize> = selection
        .selected
        .iter()
        .map(|t| candidates.binary_search(t).expect("selected from candidates"))
        .collect();

    // Expand the layer store: precomputed rows everywhere, recomputed rows at
    // the selected tokens.
    let mut k_b = Matrix::zeros(t_total, hidden);
    let mut v_b = Matrix::zeros(t_total, hidden);
    for t in 0..n_reused {
        k_b.set_row(t, pre_kv.k.row(t));
        v_b.set_row(t, pre_kv.v.row(t));
    }
    for (&tok, &local) in selection.selected.iter().zip(sel_local.iter()) {
        k_b.set_row(tok, k_c.row(local));
        v_b.set_row(tok, v_c.row(local));
    }
    let blended = LayerKV { k: k_b, v: v_b };

    let q = matmul(&xn.take_rows(&sel_local), &lw.wq, macs);
    let (attn_out, attn_rows) = attention_forward(
        &weights.config,
        rope,
        &q,
        &selection.selected,
        &blended.k,
        &blended.v,
        positions,
        macs,
    );
    let mut next_inputs = inputs.take_rows(&sel_local);
    layer_tail(weights, layer, &mut next_inputs, &attn_out, macs);

    let new_kv = LayerKV {
        k: k_c.take_rows(&sel_local),
        v: v_c.take_rows(&sel_local),
    };
    Ok(PartialLayerOutput {
        selection,
        new_kv,
        next_inputs,
        deviations,
        attn_rows,
        blended,
    })
}

/// Prefill one chunk standalone at positions [0, len) and package it for the
/// store. K stays position-free.
pub fn precompute_chunk(weights: &Weights, token_ids: &[u32]) -> Result<ChunkKV> {
    if token_ids.is_empty() {
        return Err(Error::domain("chunk must be non-empty".to_string()));
    }
    let input = TokenSequence::contiguous(token_ids.to_vec(), 0);
    let result = full_prefill(weights, &input, 0)?;
    Ok(ChunkKV {
        chunk_hash: chunk_hash(&weights.config.digest(), token_ids),
        token_ids: token_ids.to_vec(),
        precompute_length: token_ids.len(),
        layers: result.cache.layers,
    })
}

/// Per-layer record of what the selector saw and kept (reused tokens only).
#[derive(Debug, Clone, Serialize, Default)]
pub struct LayerSelection {
    pub layer: usize,
    pub candidates: Vec<usize>,
    pub deviations: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct SelectionTrace {
    pub layers: Vec<LayerSelection>,
}

/// Where layer selections come from.
#[derive(Debug, Clone, Default)]
pub enum SelectionSource {
    /// Deviations measured against the precomputed entries during the run.
    #[default]
    Measured,
    /// Fixed per-layer, per-token deviations (e.g. from a full-prefill
    /// oracle); outer index is the model layer.
    Oracle(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Default)]
pub struct BlendOptions {
    /// Override the default 1.2r -> 0.8r ramp.
    pub schedule: Option<RecomputeSchedule>,
    pub selection: SelectionSource,
    /// Select the lowest-deviation tokens instead of the highest.
    pub take_lowest: bool,
    pub deviation_mode: DeviationMode,
}

#[derive(Debug)]
pub struct BlendResult {
    pub cache: KVCache,
    pub attention: Vec<ForwardAttention>,
    pub trace: SelectionTrace,
    pub last_logits: Vec<f32>,
    pub macs: u64,
    /// MACs spent per layer, in layer order.
    pub layer_macs: Vec<u64>,
}

enum RunnerMode {
    Blend {
        schedule: RecomputeSchedule,
        options: BlendOptions,
    },
    /// Only the suffix is recomputed; every reused entry comes from the
    /// precomputed caches (with positional realignment at scoring time).
    Reuse,
    /// The first chunk is a true prefix and is reused; everything after it is
    /// recomputed at every layer.
    Prefix,
}

/// Layer-stepped fusor. Feed it one precomputed layer at a time (the
/// pipelined executor hands layers over as they are fetched; `blend_prefill`
/// feeds them from an in-memory cache) and call `finish` after the last layer.
pub struct BlendRunner<'w> {
    weights: &'w Weights,
    rope: RopeParams,
    positions: Vec<usize>,
    n_reused: usize,
    suffix_len: usize,
    mode: RunnerMode,
    active: Vec<usize>,
    x_active: Matrix,
    kv_layers: Vec<LayerKV>,
    attention: Vec<ForwardAttention>,
    trace: SelectionTrace,
    macs: MacCounter,
    layer_macs: Vec<u64>,
    boundaries: Vec<(usize, usize)>,
    next_layer: usize,
}

impl<'w> BlendRunner<'w> {
    fn new(
        weights: &'w Weights,
        chunk_tokens: &[Vec<u32>],
        suffix: &TokenSequence,
        mode: RunnerMode,
    ) -> Result<Self> {
        if chunk_tokens.is_empty() {
            return Err(Error::domain("at least one chunk is required".to_string()));
        }
        if chunk_tokens.iter().any(|c| c.is_empty()) {
            return Err(Error::domain("chunks must be non-empty".to_string()));
        }
        if suffix.is_empty() {
            return Err(Error::domain("suffix must be non-empty".to_string()));
        }
        let num_layers = weights.config.num_layers;
        let n_reused: usize = chunk_tokens.iter().map(|c| c.len()).sum();
        let expected: Vec<usize> = (n_reused..n_reused + suffix.len()).collect();
        if suffix.global_positions != expected {
            return Err(Error::domain(format!(
                "suffix positions must continue the chunks contiguously at {n_reused}"
            )));
        }
        let mut token_ids: Vec<u32> = Vec::with_capacity(n_reused + suffix.len());
        for c in chunk_tokens {
            token_ids.extend_from_slice(c);
        }
        token_ids.extend_from_slice(&suffix.token_ids);
        let t_total = token_ids.len();

        let mut boundaries = Vec::with_capacity(chunk_tokens.len() + 1);
        let mut cursor = 0usize;
        for c in chunk_tokens {
            boundaries.push((cursor, cursor + c.len()));
            cursor += c.len();
        }
        boundaries.push((n_reused, t_total));

        let active: Vec<usize> = match &mode {
            RunnerMode::Blend { .. } => (0..t_total).collect(),
            RunnerMode::Reuse => (n_reused..t_total).collect(),
            RunnerMode::Prefix => (chunk_tokens[0].len()..t_total).collect(),
        };
        let x_all = embed_tokens(weights, &token_ids)?;
        let x_active = x_all.take_rows(&active);

        Ok(BlendRunner {
            weights,
            rope: weights.config.rope()?,
            positions: (0..t_total).collect(),
            n_reused,
            suffix_len: suffix.len(),
            mode,
            active,
            x_active,
            kv_layers: Vec::with_capacity(num_layers),
            attention: Vec::with_capacity(num_layers),
            trace: SelectionTrace::default(),
            macs: MacCounter::new(),
            layer_macs: Vec::with_capacity(num_layers),
            boundaries,
            next_layer: 0,
        })
    }

    pub fn new_blend(
        weights: &'w Weights,
        chunk_tokens: &[Vec<u32>],
        suffix: &TokenSequence,
        r: f64,
        options: BlendOptions,
    ) -> Result<Self> {
        let schedule = match &options.schedule {
            Some(s) => {
                s.validate()?;
                s.clone()
            }
            None => {
                if weights.config.num_layers >= 2 {
                    make_schedule(r, weights.config.num_layers)?
                } else {
                    if !(r > 0.0 && r <= 1.0) {
                        return Err(Error::config("ratio", format!("must lie in (0, 1], got {r}")));
                    }
                    RecomputeSchedule {
                        target_ratio: r,
                        per_layer_ratios: Vec::new(),
                    }
                }
            }
        };
        BlendRunner::new(
            weights,
            chunk_tokens,
            suffix,
            RunnerMode::Blend { schedule, options },
        )
    }

    pub fn new_reuse(
        weights: &'w Weights,
        chunk_tokens: &[Vec<u32>],
        suffix: &TokenSequence,
    ) -> Result<Self> {
        BlendRunner::new(weights, chunk_tokens, suffix, RunnerMode::Reuse)
    }

    pub fn new_prefix(
        weights: &'w Weights,
        chunk_tokens: &[Vec<u32>],
        suffix: &TokenSequence,
    ) -> Result<Self> {
        BlendRunner::new(weights, chunk_tokens, suffix, RunnerMode::Prefix)
    }

    pub fn num_layers(&self) -> usize {
        self.weights.config.num_layers
    }

    pub fn num_tokens(&self) -> usize {
        self.positions.len()
    }

    /// Process one layer using its precomputed K/V (the per-layer barrier:
    /// the caller must not invoke this before the layer's data is resident).
    pub fn step(&mut self, pre_layer: &LayerKV) -> Result<()> {
        let layer = self.next_layer;
        if layer >= self.num_layers() {
            return Err(Error::domain("all layers already processed".to_string()));
        }
        let macs_before = self.macs.get();
        let policy_ratio: Option<(f64, RankBy<'_>, bool)> = match &self.mode {
            RunnerMode::Blend { schedule, options } if layer >= 1 => {
                let ratio = schedule.per_layer_ratios[layer - 1];
                let rank_by = match &options.selection {
                    SelectionSource::Measured => RankBy::Measured,
                    SelectionSource::Oracle(per_layer) => RankBy::Provided(&per_layer[layer]),
                };
                Some((ratio, rank_by, options.take_lowest))
            }
            _ => None,
        };
        let mode = match &self.mode {
            RunnerMode::Blend { options, .. } => options.deviation_mode,
            _ => DeviationMode::default(),
        };
        let policy = policy_ratio.map(|(ratio, rank_by, take_lowest)| SelectPolicy {
            ratio,
            total_reused: self.n_reused,
            rank_by,
            take_lowest,
        });
        let measure = matches!(self.mode, RunnerMode::Blend { .. });
        let out = partial_prefill_layer(
            self.weights,
            &self.rope,
            layer,
            &self.active,
            &self.x_active,
            pre_layer,
            &self.positions,
            self.n_reused,
            policy,
            measure,
            mode,
            &self.macs,
        )?;

        let t_total = self.positions.len();
        let suffix_rows: Vec<usize> = out
            .selection
            .selected
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t >= self.n_reused)
            .map(|(local, _)| local)
            .collect();
        debug_assert_eq!(suffix_rows.len(), t_total - self.n_reused);
        self.attention.push(ForwardAttention {
            layer,
            suffix_len: self.suffix_len,
            rows: out.attn_rows.take_rows(&suffix_rows),
        });
        self.trace.layers.push(LayerSelection {
            layer,
            candidates: out.deviations.iter().map(|&(t, _)| t).collect(),
            deviations: out.deviations.iter().map(|&(_, d)| d).collect(),
            selected: out
                .selection
                .selected
                .iter()
                .copied()
                .filter(|&t| t < self.n_reused)
                .collect(),
        });
        self.kv_layers.push(out.blended);
        self.active = out.selection.selected;
        self.x_active = out.next_inputs;
        self.layer_macs.push(self.macs.get() - macs_before);
        self.next_layer += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<BlendResult> {
        if self.next_layer != self.num_layers() {
            return Err(Error::domain(format!(
                "only {} of {} layers processed",
                self.next_layer,
                self.num_layers()
            )));
        }
        let macs_before = self.macs.get();
        let last_row = self.x_active.rows() - 1;
        debug_assert_eq!(self.active.last(), Some(&(self.positions.len() - 1)));
        let last_logits = final_logits(self.weights, self.x_active.row(last_row), &self.macs);
        let mut layer_macs = self.layer_macs;
        if let Some(last) = layer_macs.last_mut() {
            *last += self.macs.get() - macs_before;
        }
        let cache = KVCache {
            role: CacheRole::New,
            layers: self.kv_layers,
            global_positions: self.positions,
            chunk_boundaries: self.boundaries,
        };
        cache.validate()?;
        Ok(BlendResult {
            cache,
            attention: self.attention,
            trace: self.trace,
            last_logits,
            macs: self.macs.get(),
            layer_macs,
        })
    }
}

fn run_to_completion(mut runner: BlendRunner<'_>, pre: &KVCache) -> Result<BlendResult> {
    for layer in 0..runner.num_layers() {
        runner.step(&pre.layers[layer])?;
    }
    runner.finish()
}

fn check_chunks(weights: &Weights, chunks: &[ChunkKV]) -> Result<Vec<Vec<u32>>> {
    for c in chunks {
        if c.num_layers() != weights.config.num_layers {
            return Err(Error::domain(format!(
                "chunk {} has {} layers, model has {}",
                c.chunk_hash,
                c.num_layers(),
                weights.config.num_layers
            )));
        }
        if c.hidden_dim() != weights.config.hidden_dim {
            return Err(Error::domain(format!(
                "chunk {} hidden dim {} does not match model {}",
                c.chunk_hash,
                c.hidden_dim(),
                weights.config.hidden_dim
            )));
        }
    }
    Ok(chunks.iter().map(|c| c.token_ids.clone()).collect())
}

/// Fuse the chunks' precomputed caches with the given average recompute ratio.
pub fn blend_prefill(
    weights: &Weights,
    chunks: &[ChunkKV],
    suffix: &TokenSequence,
    r: f64,
) -> Result<BlendResult> {
    blend_prefill_with(weights, chunks, suffix, r, BlendOptions::default())
}

pub fn blend_prefill_with(
    weights: &Weights,
    chunks: &[ChunkKV],
    suffix: &TokenSequence,
    r: f64,
    options: BlendOptions,
) -> Result<BlendResult> {
    let tokens = check_chunks(weights, chunks)?;
    let pre = concat_chunks(chunks, 0)?;
    let runner = BlendRunner::new_blend(weights, &tokens, suffix, r, options)?;
    run_to_completion(runner, &pre)
}

/// Reuse every precomputed entry unchanged; recompute only the suffix.
pub fn full_kv_reuse(
    weights: &Weights,
    chunks: &[ChunkKV],
    suffix: &TokenSequence,
) -> Result<BlendResult> {
    let tokens = check_chunks(weights, chunks)?;
    let pre = concat_chunks(chunks, 0)?;
    let runner = BlendRunner::new_reuse(weights, &tokens, suffix)?;
    run_to_completion(runner, &pre)
}

/// Prefix-caching baseline: reuse the first chunk (a true prefix), recompute
/// every other token at every layer.
pub fn prefix_prefill(
    weights: &Weights,
    chunks: &[ChunkKV],
    suffix: &TokenSequence,
) -> Result<BlendResult> {
    let tokens = check_chunks(weights, chunks)?;
    let pre = concat_chunks(chunks, 0)?;
    let runner = BlendRunner::new_prefix(weights, &tokens, suffix)?;
    run_to_completion(runner, &pre)
}

/// Spearman rank correlation between consecutive layers' per-token deviation
/// vectors (average ranks on ties).
pub fn layer_rank_correlation(per_layer_devs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if per_layer_devs.len() < 2 {
        return Err(Error::domain(
            "rank correlation needs at least two layers".to_string(),
        ));
    }
    let n = per_layer_devs[0].len();
    if n < 2 {
        return Err(Error::domain(
            "rank correlation needs at least two tokens".to_string(),
        ));
    }
    if per_layer_devs.iter().any(|l| l.len() != n) {
        return Err(Error::shape(
            format!("{n} deviations per layer"),
            "unequal layer vectors".to_string(),
        ));
    }
    Ok(per_layer_devs
        .windows(2)
        .map(|w| spearman(&w[0], &w[1]))
        .collect())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks. Returns 1 for identical rank
/// vectors; 0 when either side has no rank variance otherwise.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    if ra == rb {
        return 1.0;
    }
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in ra.iter().zip(rb.iter()) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
