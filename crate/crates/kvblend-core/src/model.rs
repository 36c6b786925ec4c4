//! Deterministic miniature decoder-only transformer.
//!
//! Architecture (fixed so oracles stay stable): pre-norm (RMS) -> multi-head
//! causal attention with rotary position embedding -> residual -> pre-norm ->
//! two-layer MLP with GELU -> residual. Embedding and unembedding are untied.
//! All arithmetic is f32; softmax subtracts the row max.
//!
//! Weights are a pure function of (config, seed): every parameter is drawn
//! from uniform [-0.5, 0.5) / sqrt(fan_in), in a fixed order, from a ChaCha8
//! stream (fan_in = 1 for embeddings and norm gains). Regenerating yields
//! bit-identical values.

use crate::error::{Error, Result};
use crate::kvcache::{CacheRole, KVCache, LayerKV};
use crate::linalg::{
    add_assign, for_each_row, gelu_inplace, matmul, rms_norm, rms_norm_row, softmax_row, vecmat,
    MacCounter, Matrix,
};
use crate::rope::{rotate_hidden_row, RopeParams};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_max_context() -> usize {
    4096
}

fn default_theta_base() -> f64 {
    10000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_theta_base")]
    pub rope_theta_base: f64,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Convenience constructor; hidden_dim is derived as heads × head_dim.
    pub fn tiny(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        mlp_dim: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        ModelConfig {
            num_layers,
            num_heads,
            head_dim,
            hidden_dim: num_heads * head_dim,
            mlp_dim,
            vocab_size,
            rope_theta_base: 10000.0,
            max_context: 4096,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("num_layers", "must be >= 1"));
        }
        if self.num_heads == 0 {
            return Err(Error::config("num_heads", "must be >= 1"));
        }
        if self.head_dim == 0 {
            return Err(Error::config("head_dim", "must be >= 1"));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::config(
                "head_dim",
                format!("must be even for paired rotation, got {}", self.head_dim),
            ));
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(Error::config(
                "hidden_dim",
                format!(
                    "must equal num_heads * head_dim = {}, got {}",
                    self.num_heads * self.head_dim,
                    self.hidden_dim
                ),
            ));
        }
        if self.mlp_dim == 0 {
            return Err(Error::config("mlp_dim", "must be >= 1"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be >= 1"));
        }
        if !self.rope_theta_base.is_finite() || self.rope_theta_base <= 0.0 {
            return Err(Error::config("rope_theta_base", "must be positive"));
        }
        if self.max_context == 0 {
            return Err(Error::config("max_context", "must be >= 1"));
        }
        Ok(())
    }

    /// Identity digest over the canonical little-endian field encoding.
    /// Chunk hashes are keyed on this, so caches never cross models.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in [
            self.num_layers as u64,
            self.num_heads as u64,
            self.head_dim as u64,
            self.hidden_dim as u64,
            self.mlp_dim as u64,
            self.vocab_size as u64,
            self.max_context as u64,
            self.seed,
        ] {
            h.update(v.to_le_bytes());
        }
        h.update(self.rope_theta_base.to_le_bytes());
        h.finalize().into()
    }

    pub fn rope(&self) -> Result<RopeParams> {
        RopeParams::new(self.head_dim, self.rope_theta_base)
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_mlp_in: Matrix,
    pub w_mlp_out: Matrix,
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    pub embedding: Matrix,
    pub final_norm: Vec<f32>,
    pub unembed: Matrix,
}

struct WeightStream {
    rng: ChaCha8Rng,
}

impl WeightStream {
    fn new(seed: u64) -> Self {
        WeightStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in [-0.5, 0.5) / sqrt(fan_in), from 24 high bits of the stream.
    fn value(&mut self, fan_in: usize) -> f32 {
        let u = (self.rng.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0);
        (u - 0.5) / (fan_in as f32).sqrt()
    }

    fn matrix(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.value(fan_in)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    }

    fn vector(&mut self, len: usize) -> Vec<f32> {
        (0..len).map(|_| self.value(1)).collect()
    }
}

pub fn init_weights(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let h = config.hidden_dim;
    let mut s = WeightStream::new(config.seed);
    let embedding = s.matrix(config.vocab_size, h, 1);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            wq: s.matrix(h, h, h),
            wk: s.matrix(h, h, h),
            wv: s.matrix(h, h, h),
            wo: s.matrix(h, h, h),
            attn_norm: s.vector(h),
            mlp_norm: s.vector(h),
            w_mlp_in: s.matrix(h, config.mlp_dim, h),
            w_mlp_out: s.matrix(config.mlp_dim, h, config.mlp_dim),
        });
    }
    let final_norm = s.vector(h);
    let unembed = s.matrix(h, config.vocab_size, h);
    Ok(Weights {
        config: config.clone(),
        layers,
        embedding,
        final_norm,
        unembed,
    })
}

/// Token ids paired with strictly increasing global positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub global_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(token_ids: Vec<u32>, global_positions: Vec<usize>) -> Result<Self> {
        if token_ids.len() != global_positions.len() {
            return Err(Error::domain(format!(
                "token_ids ({}) and global_positions ({}) must have equal length",
                token_ids.len(),
                global_positions.len()
            )));
        }
        if !global_positions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::domain(
                "global positions must be strictly increasing".to_string(),
            ));
        }
        Ok(TokenSequence {
            token_ids,
            global_positions,
        })
    }

    /// Positions start..start+len.
    pub fn contiguous(token_ids: Vec<u32>, start: usize) -> Self {
        let positions = (start..start + token_ids.len()).collect();
        TokenSequence {
            token_ids,
            global_positions: positions,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Post-softmax attention of the last `suffix_len` tokens over all input
/// tokens at one layer, averaged over heads. Rows sum to 1; entries at key
/// indices after the row's own token are exactly 0.
#[derive(Debug, Clone)]
pub struct ForwardAttention {
    pub layer: usize,
    pub suffix_len: usize,
    pub rows: Matrix,
}

#[derive(Debug)]
pub struct PrefillResult {
    pub cache: KVCache,
    pub attention: Vec<ForwardAttention>,
    pub last_logits: Vec<f32>,
    pub macs: u64,
}

pub(crate) fn embed_tokens(weights: &Weights, token_ids: &[u32]) -> Result<Matrix> {
    let vocab = weights.config.vocab_size;
    let mut x = Matrix::zeros(token_ids.len(), weights.config.hidden_dim);
    for (row, &id) in token_ids.iter().enumerate() {
        if (id as usize) >= vocab {
            return Err(Error::domain(format!(
                "token id {id} out of vocabulary (size {vocab})"
            )));
        }
        x.set_row(row, weights.embedding.row(id as usize));
    }
    Ok(x)
}

/// Project normalized inputs into Q, K, V. K comes out position-free.
pub(crate) fn project_qkv(
    weights: &Weights,
    layer: usize,
    x: &Matrix,
    macs: &MacCounter,
) -> (Matrix, Matrix, Matrix) {
    let lw = &weights.layers[layer];
    let xn = rms_norm(x, &lw.attn_norm);
    let q = matmul(&xn, &lw.wq, macs);
    let k = matmul(&xn, &lw.wk, macs);
    let v = matmul(&xn, &lw.wv, macs);
    (q, k, v)
}

/// Multi-head causal attention for a set of query rows over the full key/value
/// store. `row_token_indices[r]` is the sequence index of query row r (rows
/// attend to keys at indices <= their own). K is position-free and is rotated
/// here; Q rows are rotated to the position of their token.
///
/// Returns (attention output R×hidden, head-averaged weights R×T).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    config: &ModelConfig,
    rope: &RopeParams,
    q: &Matrix,
    row_token_indices: &[usize],
    k: &Matrix,
    v: &Matrix,
    positions: &[usize],
    macs: &MacCounter,
) -> (Matrix, Matrix) {
    let t_total = k.rows();
    let hidden = config.hidden_dim;
    let head_dim = config.head_dim;
    let num_heads = config.num_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    debug_assert_eq!(q.rows(), row_token_indices.len());
    debug_assert_eq!(positions.len(), t_total);

    // Rotate all keys to their positions once.
    let mut k_rot = Matrix::zeros(t_total, hidden);
    for_each_row(k_rot.data_mut(), hidden, |t, row| {
        rotate_hidden_row(k.row(t), positions[t], rope, row);
    });

    // Score and value products, prorated by the rows actually computed.
    let ctx_sum: u64 = row_token_indices.iter().map(|&i| (i + 1) as u64).sum();
    macs.add(2 * ctx_sum * hidden as u64);

    let rows = q.rows();
    let mut out = Matrix::zeros(rows, hidden);
    let mut weights_avg = Matrix::zeros(rows, t_total);
    crate::linalg::for_each_row2(
        out.data_mut(),
        hidden,
        weights_avg.data_mut(),
        t_total.max(1),
        |r, out_row, w_row| {
            let token_idx = row_token_indices[r];
            let limit = token_idx + 1; // keys 0..limit are visible
            let mut q_rot = vec![0.0f32; hidden];
            rotate_hidden_row(q.row(r), positions[token_idx], rope, &mut q_rot);
            let mut scores = vec![0.0f32; limit];
            for head in 0..num_heads {
                let hs = head * head_dim;
                let he = hs + head_dim;
                let qh = &q_rot[hs..he];
                for (t, s) in scores.iter_mut().enumerate() {
                    let kh = &k_rot.row(t)[hs..he];
                    let mut dot = 0.0f32;
                    for (a, b) in qh.iter().zip(kh.iter()) {
                        dot += a * b;
                    }
                    *s = dot * scale;
                }
                softmax_row(&mut scores);
                for (t, &w) in scores.iter().enumerate() {
                    let vh = &v.row(t)[hs..he];
                    for (o, &vv) in out_row[hs..he].iter_mut().zip(vh.iter()) {
                        *o += w * vv;
                    }
                    w_row[t] += w;
                }
            }
            let inv = 1.0 / num_heads as f32;
            for w in w_row[..limit].iter_mut() {
                *w *= inv;
            }
        },
    );
    (out, weights_avg)
}

/// Output projection + residual, then the MLP block with its own residual.
/// `x` holds the pre-attention residual stream for the same rows as `attn`.
pub(crate) fn layer_tail(
    weights: &Weights,
    layer: usize,
    x: &mut Matrix,
    attn: &Matrix,
    macs: &MacCounter,
) {
    let lw = &weights.layers[layer];
    let proj = matmul(attn, &lw.wo, macs);
    add_assign(x, &proj);
    let hn = rms_norm(x, &lw.mlp_norm);
    let mut mid = matmul(&hn, &lw.w_mlp_in, macs);
    gelu_inplace(&mut mid);
    let mlp = matmul(&mid, &lw.w_mlp_out, macs);
    add_assign(x, &mlp);
}

pub(crate) fn final_logits(weights: &Weights, x_row: &[f32], macs: &MacCounter) -> Vec<f32> {
    let mut xf = vec![0.0f32; x_row.len()];
    rms_norm_row(x_row, &weights.final_norm, &mut xf);
    vecmat(&xf, &weights.unembed, macs)
}

/// Run the full prefill: KV for every (layer, token) with K stored
/// position-free, plus the forward attention matrix of the last `suffix_len`
/// tokens per layer and the last token's logits.
pub fn full_prefill(
    weights: &Weights,
    input: &TokenSequence,
    suffix_len: usize,
) -> Result<PrefillResult> {
    if input.is_empty() {
        return Err(Error::domain("prefill input must be non-empty".to_string()));
    }
    if suffix_len > input.len() {
        return Err(Error::domain(format!(
            "suffix_len {} exceeds input length {}",
            suffix_len,
            input.len()
        )));
    }
    let config = &weights.config;
    let rope = config.rope()?;
    let macs = MacCounter::new();
    let t = input.len();
    let row_indices: Vec<usize> = (0..t).collect();

    let mut x = embed_tokens(weights, &input.token_ids)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    let mut attention = Vec::with_capacity(config.num_layers);
    for layer in 0..config.num_layers {
        let (q, k, v) = project_qkv(weights, layer, &x, &macs);
        let (attn_out, attn_weights) = attention_forward(
            config,
            &rope,
            &q,
            &row_indices,
            &k,
            &v,
            &input.global_positions,
            &macs,
        );
        layer_tail(weights, layer, &mut x, &attn_out, &macs);
        layers.push(LayerKV { k, v });
        let suffix_rows: Vec<usize> = (t - suffix_len..t).collect();
        attention.push(ForwardAttention {
            layer,
            suffix_len,
            rows: attn_weights.take_rows(&suffix_rows),
        });
    }
    let last_logits = final_logits(weights, x.row(t - 1), &macs);
    let cache = KVCache {
        role: CacheRole::Full,
        layers,
        global_positions: input.global_positions.clone(),
        chunk_boundaries: vec![(0, t)],
    };
    Ok(PrefillResult {
        cache,
        attention,
        last_logits,
        macs: macs.get(),
    })
}

/// Append one token to the cache and return its logits.
pub fn decode_step(weights: &Weights, cache: &mut KVCache, next_token: u32) -> Result<Vec<f32>> {
    let config = &weights.config;
    if cache.num_layers() != config.num_layers {
        return Err(Error::shape(
            format!("{} layers", config.num_layers),
            format!("{}", cache.num_layers()),
        ));
    }
    if !cache.global_positions.windows(2).all(|w| w[1] == w[0] + 1) {
        return Err(Error::domain(
            "decode requires contiguous cache positions".to_string(),
        ));
    }
    let new_pos = cache.global_positions.last().map_or(0, |&p| p + 1);
    if new_pos >= config.max_context {
        return Err(Error::domain(format!(
            "position {new_pos} overflows max context {}",
            config.max_context
        )));
    }
    let rope = config.rope()?;
    let macs = MacCounter::new();
    let token_idx = cache.num_tokens();
    cache.global_positions.push(new_pos);

    let mut x = embed_tokens(weights, &[next_token])?;
    for layer in 0..config.num_layers {
        let (q, k, v) = project_qkv(weights, layer, &x, &macs);
        cache.layers[layer].k.push_row(k.row(0));
        cache.layers[layer].v.push_row(v.row(0));
        let (attn_out, _) = attention_forward(
            config,
            &rope,
            &q,
            &[token_idx],
            &cache.layers[layer].k,
            &cache.layers[layer].v,
            &cache.global_positions,
            &macs,
        );
        layer_tail(weights, layer, &mut x, &attn_out, &macs);
    }
    if let Some(last) = cache.chunk_boundaries.last_mut() {
        last.1 += 1;
    } else {
        cache.chunk_boundaries.push((0, 1));
    }
    Ok(final_logits(weights, x.row(0), &macs))
}

/// Exact operation count of `full_prefill` for an input of `t` tokens:
/// QKV+output projections, attention score/value products, the MLP, and the
/// final unembedding.
pub fn full_prefill_mac_count(config: &ModelConfig, t: usize) -> u64 {
    let h = config.hidden_dim as u64;
    let t64 = t as u64;
    let ctx_sum = t64 * (t64 + 1) / 2;
    let per_layer = 4 * t64 * h * h + 2 * ctx_sum * h + 2 * t64 * h * config.mlp_dim as u64;
    config.num_layers as u64 * per_layer + h * config.vocab_size as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config() -> ModelConfig {
        ModelConfig::tiny(2, 2, 4, 16, 32, 7)
    }

    #[test]
    fn q_projection_shape_forced_by_config() {
        let w = init_weights(&test_config()).unwrap();
        assert_eq!(w.layers[0].wq.rows(), 8);
        assert_eq!(w.layers[0].wq.cols(), 8);
    }

    #[test]
    fn weights_are_deterministic() {
        let a = init_weights(&test_config()).unwrap();
        let b = init_weights(&test_config()).unwrap();
        assert_eq!(a.embedding, b.embedding);
        for (la, lb) in a.layers.iter().zip(b.layers.iter()) {
            assert_eq!(la.wq, lb.wq);
            assert_eq!(la.w_mlp_out, lb.w_mlp_out);
            assert_eq!(la.attn_norm, lb.attn_norm);
        }
        assert_eq!(a.unembed, b.unembed);
        let mut other = test_config();
        other.seed = 8;
        let c = init_weights(&other).unwrap();
        assert_ne!(a.embedding, c.embedding);
    }

    #[test]
    fn odd_head_dim_is_config_error() {
        let mut cfg = test_config();
        cfg.head_dim = 3;
        cfg.hidden_dim = 6;
        assert!(matches!(init_weights(&cfg), Err(Error::Config { .. })));
        let mut zero = test_config();
        zero.num_layers = 0;
        assert!(init_weights(&zero).is_err());
    }

    #[test]
    fn single_token_attention_row_is_one() {
        let w = init_weights(&test_config()).unwrap();
        let input = TokenSequence::contiguous(vec![3], 0);
        let r = full_prefill(&w, &input, 1).unwrap();
        for fa in &r.attention {
            assert_eq!(fa.rows.rows(), 1);
            assert_eq!(fa.rows.cols(), 1);
            assert!((fa.rows.row(0)[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cache_shape_contract() {
        let w = init_weights(&test_config()).unwrap();
        let input = TokenSequence::contiguous(vec![1, 2, 3, 4, 5, 6], 0);
        let r = full_prefill(&w, &input, 2).unwrap();
        assert_eq!(r.cache.num_layers(), 2);
        assert_eq!(r.cache.num_tokens(), 6);
        assert_eq!(r.cache.hidden_dim(), 8);
        r.cache.validate().unwrap();
        assert_eq!(r.attention[0].rows.rows(), 2);
        assert_eq!(r.attention[0].rows.cols(), 6);
    }

    #[test]
    fn empty_input_is_domain_error() {
        let w = init_weights(&test_config()).unwrap();
        let input = TokenSequence::contiguous(vec![], 0);
        assert!(full_prefill(&w, &input, 0).is_err());
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let w = init_weights(&test_config()).unwrap();
        let input = TokenSequence::contiguous(vec![3, 1, 4, 1, 5], 0);
        let r = full_prefill(&w, &input, 5).unwrap();
        for fa in &r.attention {
            for row_idx in 0..fa.rows.rows() {
                let row = fa.rows.row(row_idx);
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "row sums to {sum}");
                assert!(row.iter().all(|&w| w >= 0.0));
                // causal zeros after own token
                for &w in &row[row_idx + 1..] {
                    assert_eq!(w, 0.0);
                }
            }
        }
    }

    #[test]
    fn decode_matches_prefill_logits() {
        let w = init_weights(&test_config()).unwrap();
        let r3 = full_prefill(&w, &TokenSequence::contiguous(vec![3, 1, 4], 0), 1).unwrap();
        let mut cache = r3.cache;
        let logits = decode_step(&w, &mut cache, 9).unwrap();
        let r4 = full_prefill(&w, &TokenSequence::contiguous(vec![3, 1, 4, 9], 0), 1).unwrap();
        for (a, b) in logits.iter().zip(r4.last_logits.iter()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        assert_eq!(cache.num_tokens(), 4);
    }

    #[test]
    fn decode_appends_exactly_one_token_and_is_deterministic() {
        let w = init_weights(&test_config()).unwrap();
        let pre = full_prefill(&w, &TokenSequence::contiguous(vec![1, 2], 0), 1).unwrap();
        let mut c1 = pre.cache.clone();
        let mut c2 = pre.cache;
        let before = c1.num_tokens();
        let l1 = decode_step(&w, &mut c1, 5).unwrap();
        let l2 = decode_step(&w, &mut c2, 5).unwrap();
        assert_eq!(c1.num_tokens(), before + 1);
        assert_eq!(l1, l2);
        assert_eq!(c1.layers[0].k, c2.layers[0].k);
    }

    #[test]
    fn decode_position_overflow() {
        let mut cfg = test_config();
        cfg.max_context = 3;
        let w = init_weights(&cfg).unwrap();
        let pre = full_prefill(&w, &TokenSequence::contiguous(vec![1, 2, 3], 0), 1).unwrap();
        let mut cache = pre.cache;
        assert!(decode_step(&w, &mut cache, 1).is_err());
    }

    #[test]
    fn causality_upstream_tokens_unaffected() {
        let w = init_weights(&test_config()).unwrap();
        let a = full_prefill(&w, &TokenSequence::contiguous(vec![3, 1, 4, 1, 5], 0), 1).unwrap();
        let b = full_prefill(&w, &TokenSequence::contiguous(vec![3, 1, 4, 2, 6], 0), 1).unwrap();
        for layer in 0..2 {
            for t in 0..3 {
                assert_eq!(a.cache.layers[layer].k.row(t), b.cache.layers[layer].k.row(t));
                assert_eq!(a.cache.layers[layer].v.row(t), b.cache.layers[layer].v.row(t));
            }
        }
    }

    #[test]
    fn prefix_stability() {
        let w = init_weights(&test_config()).unwrap();
        let prefix = full_prefill(&w, &TokenSequence::contiguous(vec![3, 1, 4], 0), 1).unwrap();
        let full =
            full_prefill(&w, &TokenSequence::contiguous(vec![3, 1, 4, 1, 5], 0), 1).unwrap();
        for layer in 0..2 {
            for t in 0..3 {
                let (pk, fk) = (
                    prefix.cache.layers[layer].k.row(t),
                    full.cache.layers[layer].k.row(t),
                );
                for (a, b) in pk.iter().zip(fk.iter()) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mac_count_matches_analytic_formula() {
        let cfg = test_config();
        let w = init_weights(&cfg).unwrap();
        let input = TokenSequence::contiguous(vec![3, 1, 4, 1, 5, 9, 2, 6], 0);
        let r = full_prefill(&w, &input, 2).unwrap();
        assert_eq!(r.macs, full_prefill_mac_count(&cfg, 8));
    }
}
