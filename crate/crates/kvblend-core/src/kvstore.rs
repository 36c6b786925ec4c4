//! Tiered persistent store mapping chunk hash -> serialized chunk KV, with
//! LRU eviction per tier and layer-granular fetch.
//!
//! On-disk format, little-endian, one `<hex hash>.kvbl` file per chunk under
//! each tier directory:
//!
//! ```text
//! magic        "KVBL" (4 bytes)
//! version      u32 = 1
//! model digest 32 bytes
//! num_layers   u32
//! num_tokens   u32
//! hidden_dim   u32
//! dtype        u8 (1 = f32)
//! token ids    u32 × num_tokens
//! offsets      u64 × num_layers (absolute file offset of each layer's K)
//! layers       per layer: K row-major, then V row-major (f32)
//! checksum     8 bytes: leading bytes of SHA-256 over everything above
//! ```
//!
//! The offset table makes fetching one layer an O(1) seek; a fetch reads only
//! the header and the layer's byte range, so the whole-payload checksum is
//! verified by `get`/`verify`, not per layer. Access order uses a logical
//! clock, not wall time.

use crate::error::{Error, Result};
use crate::kvcache::{chunk_hash, ChunkHash, ChunkKV, LayerKV};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub const MAGIC: &[u8; 4] = b"KVBL";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

/// A storage tier: measured throughput, cost, capacity and a fixed per-fetch
/// latency floor for the simulated clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Bytes per second.
    pub throughput: f64,
    /// Cost units per byte-hour.
    pub storage_cost: f64,
    /// Bytes.
    pub capacity: u64,
    /// Seconds added to every simulated fetch.
    pub simulated_latency_floor: f64,
}

impl DeviceProfile {
    pub fn new(name: &str, throughput: f64, storage_cost: f64, capacity: u64) -> Self {
        DeviceProfile {
            name: name.to_string(),
            throughput,
            storage_cost,
            capacity,
            simulated_latency_floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.throughput.is_finite() || self.throughput <= 0.0 {
            return Err(Error::config("throughput", "must be positive"));
        }
        if self.capacity == 0 {
            return Err(Error::config("capacity", "must be positive"));
        }
        if self.storage_cost < 0.0 || self.simulated_latency_floor < 0.0 {
            return Err(Error::config("tier", "cost and latency floor must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub chunk_hash: ChunkHash,
    pub tier: String,
    pub size_bytes: u64,
    pub last_access: u64,
}

/// A layer fetched from a tier, with its simulated transfer time.
#[derive(Debug)]
pub struct FetchedLayer {
    pub kv: LayerKV,
    pub bytes: u64,
    pub sim_seconds: f64,
}

/// Header fields without tensor data.
#[derive(Debug, Clone)]
pub struct ChunkMeta {
    pub model_digest: [u8; 32],
    pub num_layers: usize,
    pub num_tokens: usize,
    pub hidden_dim: usize,
    pub token_ids: Vec<u32>,
}

pub fn serialize_chunk(chunk: &ChunkKV, model_digest: &[u8; 32]) -> Vec<u8> {
    let num_layers = chunk.num_layers() as u32;
    let num_tokens = chunk.num_tokens() as u32;
    let hidden = chunk.hidden_dim() as u32;
    let header_len = header_len(chunk.num_tokens(), chunk.num_layers());
    let layer_bytes = layer_byte_len(chunk.num_tokens(), chunk.hidden_dim());
    let mut out =
        Vec::with_capacity(header_len + chunk.num_layers() * layer_bytes as usize + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(model_digest);
    out.extend_from_slice(&num_layers.to_le_bytes());
    out.extend_from_slice(&num_tokens.to_le_bytes());
    out.extend_from_slice(&hidden.to_le_bytes());
    out.push(DTYPE_F32);
    for &id in &chunk.token_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for i in 0..chunk.num_layers() as u64 {
        let offset = header_len as u64 + i * layer_bytes;
        out.extend_from_slice(&offset.to_le_bytes());
    }
    for layer in &chunk.layers {
        for m in [&layer.k, &layer.v] {
            for &v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..8]);
    out
}

fn header_len(num_tokens: usize, num_layers: usize) -> usize {
    4 + 4 + 32 + 4 + 4 + 4 + 1 + 4 * num_tokens + 8 * num_layers
}

/// K plus V bytes of one layer.
pub fn layer_byte_len(num_tokens: usize, hidden_dim: usize) -> u64 {
    (num_tokens * hidden_dim * 4 * 2) as u64
}

fn parse_header(bytes: &[u8]) -> Result<ChunkMeta> {
    if bytes.len() < 53 {
        return Err(Error::Integrity("file shorter than fixed header".to_string()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Integrity("bad magic".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!("unsupported version {version}")));
    }
    let mut model_digest = [0u8; 32];
    model_digest.copy_from_slice(&bytes[8..40]);
    let num_layers = u32::from_le_bytes(bytes[40..44].try_into().unwrap()) as usize;
    let num_tokens = u32::from_le_bytes(bytes[44..48].try_into().unwrap()) as usize;
    let hidden_dim = u32::from_le_bytes(bytes[48..52].try_into().unwrap()) as usize;
    if bytes[52] != DTYPE_F32 {
        return Err(Error::Integrity(format!("unsupported dtype {}", bytes[52])));
    }
    let ids_start = 53;
    let ids_end = ids_start + 4 * num_tokens;
    if bytes.len() < ids_end {
        return Err(Error::Integrity("token id block truncated".to_string()));
    }
    let token_ids = bytes[ids_start..ids_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ChunkMeta {
        model_digest,
        num_layers,
        num_tokens,
        hidden_dim,
        token_ids,
    })
}

/// Reconstruct a chunk, verifying the trailing checksum. Returns the chunk
/// and the model digest it was serialized under (the chunk hash is recomputed
/// from digest and token ids).
pub fn deserialize_chunk(bytes: &[u8]) -> Result<(ChunkKV, [u8; 32])> {
    let meta = parse_header(bytes)?;
    let header = header_len(meta.num_tokens, meta.num_layers);
    let layer_bytes = layer_byte_len(meta.num_tokens, meta.hidden_dim) as usize;
    let expected = header + meta.num_layers * layer_bytes + 8;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "file length {} does not match header ({expected})",
            bytes.len()
        )));
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - 8);
    let digest = Sha256::digest(payload);
    if &digest[..8] != checksum {
        return Err(Error::Integrity("payload checksum mismatch".to_string()));
    }
    let mut layers = Vec::with_capacity(meta.num_layers);
    for i in 0..meta.num_layers {
        let off_pos = 53 + 4 * meta.num_tokens + 8 * i;
        let offset = u64::from_le_bytes(bytes[off_pos..off_pos + 8].try_into().unwrap()) as usize;
        if offset + layer_bytes > payload.len() {
            return Err(Error::Integrity(format!("layer {i} offset out of range")));
        }
        layers.push(read_layer(
            &bytes[offset..offset + layer_bytes],
            meta.num_tokens,
            meta.hidden_dim,
        )?);
    }
    let hash = chunk_hash(&meta.model_digest, &meta.token_ids);
    Ok((
        ChunkKV {
            chunk_hash: hash,
            token_ids: meta.token_ids,
            precompute_length: meta.num_tokens,
            layers,
        },
        meta.model_digest,
    ))
}

fn read_layer(bytes: &[u8], num_tokens: usize, hidden: usize) -> Result<LayerKV> {
    let n = num_tokens * hidden;
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if floats.len() != 2 * n {
        return Err(Error::Integrity("layer block truncated".to_string()));
    }
    Ok(LayerKV {
        k: Matrix::from_vec(num_tokens, hidden, floats[..n].to_vec())?,
        v: Matrix::from_vec(num_tokens, hidden, floats[n..].to_vec())?,
    })
}

struct Tier {
    profile: DeviceProfile,
    dir: PathBuf,
    entries: HashMap<ChunkHash, StoreEntry>,
}

impl Tier {
    fn used_bytes(&self) -> u64 {
        self.entries.values().map(|e| e.size_bytes).sum()
    }
}

struct Inner {
    tiers: Vec<Tier>,
    clock: u64,
}

/// Thread-safe tiered store. Lookups search tiers fastest-first (descending
/// throughput). A fetch issued after `put` returns always observes the entry.
pub struct KvStore {
    inner: Mutex<Inner>,
}

impl KvStore {
    /// Open (or create) a store rooted at `root` with one subdirectory per
    /// tier. Existing `.kvbl` files are indexed in filename order.
    pub fn open(root: &Path, profiles: Vec<DeviceProfile>) -> Result<KvStore> {
        if profiles.is_empty() {
            return Err(Error::config("tiers", "at least one device profile is required"));
        }
        let mut tiers = Vec::with_capacity(profiles.len());
        let mut clock = 0u64;
        // Fastest first.
        let mut profiles = profiles;
        profiles.sort_by(|a, b| b.throughput.total_cmp(&a.throughput));
        for profile in profiles {
            profile.validate()?;
            let dir = root.join(&profile.name);
            fs::create_dir_all(&dir)?;
            let mut names: Vec<PathBuf> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "kvbl"))
                .collect();
            names.sort();
            let mut entries = HashMap::new();
            for path in names {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                if let Ok(hash) = ChunkHash::from_hex(stem) {
                    let size = fs::metadata(&path)?.len();
                    clock += 1;
                    entries.insert(
                        hash,
                        StoreEntry {
                            chunk_hash: hash,
                            tier: profile.name.clone(),
                            size_bytes: size,
                            last_access: clock,
                        },
                    );
                }
            }
            tiers.push(Tier {
                profile,
                dir,
                entries,
            });
        }
        Ok(KvStore {
            inner: Mutex::new(Inner { tiers, clock }),
        })
    }

    pub fn tier_profiles(&self) -> Vec<DeviceProfile> {
        let inner = self.inner.lock().unwrap();
        inner.tiers.iter().map(|t| t.profile.clone()).collect()
    }

    pub fn contains(&self, hash: &ChunkHash) -> bool {
        let inner = self.inner.lock().unwrap();
        inner.tiers.iter().any(|t| t.entries.contains_key(hash))
    }

    /// Tier name holding the chunk, fastest tier first.
    pub fn location(&self, hash: &ChunkHash) -> Option<String> {
        let inner = self.inner.lock().unwrap();
        inner
            .tiers
            .iter()
            .find(|t| t.entries.contains_key(hash))
            .map(|t| t.profile.name.clone())
    }

    pub fn entries(&self, tier: &str) -> Vec<StoreEntry> {
        let inner = self.inner.lock().unwrap();
        inner
            .tiers
            .iter()
            .filter(|t| t.profile.name == tier)
            .flat_map(|t| t.entries.values().cloned())
            .collect()
    }

    /// Store a chunk in the named tier, evicting least-recently-used entries
    /// first if needed. The write is durable before this returns.
    pub fn put(&self, chunk: &ChunkKV, model_digest: &[u8; 32], tier: &str) -> Result<StoreEntry> {
        let bytes = serialize_chunk(chunk, model_digest);
        let size = bytes.len() as u64;
        let mut inner = self.inner.lock().unwrap();
        let tier_idx = tier_index(&inner, tier)?;
        if size > inner.tiers[tier_idx].profile.capacity {
            return Err(Error::Capacity {
                needed: size,
                capacity: inner.tiers[tier_idx].profile.capacity,
            });
        }
        // Replacing an entry frees its bytes first.
        if let Some(old) = inner.tiers[tier_idx].entries.remove(&chunk.chunk_hash) {
            let _ = fs::remove_file(entry_path(&inner.tiers[tier_idx].dir, &old.chunk_hash));
        }
        evict_locked(&mut inner, tier_idx, size)?;
        inner.clock += 1;
        let clock = inner.clock;
        let t = &mut inner.tiers[tier_idx];
        let path = entry_path(&t.dir, &chunk.chunk_hash);
        fs::write(&path, &bytes)?;
        let entry = StoreEntry {
            chunk_hash: chunk.chunk_hash,
            tier: t.profile.name.clone(),
            size_bytes: size,
            last_access: clock,
        };
        t.entries.insert(chunk.chunk_hash, entry.clone());
        Ok(entry)
    }

    /// Full chunk retrieval with checksum verification. `None` if absent.
    pub fn get(&self, hash: &ChunkHash) -> Result<Option<ChunkKV>> {
        let mut inner = self.inner.lock().unwrap();
        inner.clock += 1;
        let clock = inner.clock;
        for t in inner.tiers.iter_mut() {
            if let Some(entry) = t.entries.get_mut(hash) {
                entry.last_access = clock;
                let bytes = fs::read(entry_path(&t.dir, hash))?;
                let (chunk, _) = deserialize_chunk(&bytes)?;
                return Ok(Some(chunk));
            }
        }
        Ok(None)
    }

    /// Header fields only (token ids, shapes); no tensor data is read past
    /// the header block.
    pub fn chunk_meta(&self, hash: &ChunkHash) -> Result<Option<ChunkMeta>> {
        let mut inner = self.inner.lock().unwrap();
        for t in inner.tiers.iter_mut() {
            if t.entries.contains_key(hash) {
                let mut file = fs::File::open(entry_path(&t.dir, hash))?;
                let mut fixed = [0u8; 53];
                file.read_exact(&mut fixed)
                    .map_err(|_| Error::Integrity("file shorter than fixed header".to_string()))?;
                let num_tokens =
                    u32::from_le_bytes(fixed[44..48].try_into().unwrap()) as usize;
                let mut rest = vec![0u8; 4 * num_tokens];
                file.read_exact(&mut rest)
                    .map_err(|_| Error::Integrity("token id block truncated".to_string()))?;
                let mut header = fixed.to_vec();
                header.extend_from_slice(&rest);
                return parse_header(&header).map(Some);
            }
        }
        Ok(None)
    }

    /// Fetch one layer's K/V without materializing other layers: reads the
    /// header, the layer's entry in the offset table, and the layer's byte
    /// range. Records the simulated transfer time layer_bytes/throughput +
    /// latency floor and touches the LRU clock.
    pub fn fetch_layer(&self, hash: &ChunkHash, layer: usize) -> Result<Option<FetchedLayer>> {
        let mut inner = self.inner.lock().unwrap();
        inner.clock += 1;
        let clock = inner.clock;
        for t in inner.tiers.iter_mut() {
            let Some(entry) = t.entries.get_mut(hash) else {
                continue;
            };
            entry.last_access = clock;
            let path = entry_path(&t.dir, hash);
            let mut file = fs::File::open(&path)?;
            let file_len = file.metadata()?.len();
            let mut fixed = [0u8; 53];
            file.read_exact(&mut fixed)
                .map_err(|_| Error::Integrity("file shorter than fixed header".to_string()))?;
            let meta_probe = {
                // parse_header wants the id block too; validate fixed fields
                // first, then read ids.
                if &fixed[0..4] != MAGIC {
                    return Err(Error::Integrity("bad magic".to_string()));
                }
                let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
                if version != FORMAT_VERSION {
                    return Err(Error::Integrity(format!("unsupported version {version}")));
                }
                let num_layers = u32::from_le_bytes(fixed[40..44].try_into().unwrap()) as usize;
                let num_tokens = u32::from_le_bytes(fixed[44..48].try_into().unwrap()) as usize;
                let hidden = u32::from_le_bytes(fixed[48..52].try_into().unwrap()) as usize;
                if fixed[52] != DTYPE_F32 {
                    return Err(Error::Integrity(format!("unsupported dtype {}", fixed[52])));
                }
                (num_layers, num_tokens, hidden)
            };
            let (num_layers, num_tokens, hidden) = meta_probe;
            if layer >= num_layers {
                return Err(Error::Domain(format!(
                    "layer {layer} out of range ({num_layers} layers)"
                )));
            }
            let off_pos = (53 + 4 * num_tokens + 8 * layer) as u64;
            file.seek(SeekFrom::Start(off_pos))?;
            let mut off_buf = [0u8; 8];
            file.read_exact(&mut off_buf)
                .map_err(|_| Error::Integrity("offset table truncated".to_string()))?;
            let offset = u64::from_le_bytes(off_buf);
            let layer_bytes = layer_byte_len(num_tokens, hidden);
            if offset + layer_bytes + 8 > file_len {
                return Err(Error::Integrity(format!(
                    "layer {layer} range [{offset}, {}) exceeds file of {file_len} bytes",
                    offset + layer_bytes
                )));
            }
            file.seek(SeekFrom::Start(offset))?;
            let mut buf = vec![0u8; layer_bytes as usize];
            file.read_exact(&mut buf)
                .map_err(|_| Error::Integrity("layer block truncated".to_string()))?;
            let kv = read_layer(&buf, num_tokens, hidden)?;
            let sim_seconds =
                layer_bytes as f64 / t.profile.throughput + t.profile.simulated_latency_floor;
            return Ok(Some(FetchedLayer {
                kv,
                bytes: layer_bytes,
                sim_seconds,
            }));
        }
        Ok(None)
    }

    /// Verify the trailing checksum of a stored chunk.
    pub fn verify(&self, hash: &ChunkHash) -> Result<()> {
        match self.get(hash)? {
            Some(_) => Ok(()),
            None => Err(Error::MissingChunk {
                hash: hash.to_hex(),
            }),
        }
    }

    /// Evict least-recently-used entries from the tier until `needed_bytes`
    /// are free. Returns the evicted hashes in eviction order.
    pub fn evict_to_fit(&self, tier: &str, needed_bytes: u64) -> Result<Vec<ChunkHash>> {
        let mut inner = self.inner.lock().unwrap();
        let tier_idx = tier_index(&inner, tier)?;
        evict_locked(&mut inner, tier_idx, needed_bytes)
    }
}

fn tier_index(inner: &Inner, tier: &str) -> Result<usize> {
    inner
        .tiers
        .iter()
        .position(|t| t.profile.name == tier)
        .ok_or_else(|| Error::config("tier", format!("unknown tier {tier:?}")))
}

fn entry_path(dir: &Path, hash: &ChunkHash) -> PathBuf {
    dir.join(format!("{}.kvbl", hash.to_hex()))
}

fn evict_locked(inner: &mut Inner, tier_idx: usize, needed_bytes: u64) -> Result<Vec<ChunkHash>> {
    let capacity = inner.tiers[tier_idx].profile.capacity;
    if needed_bytes > capacity {
        return Err(Error::Capacity {
            needed: needed_bytes,
            capacity,
        });
    }
    let t = &mut inner.tiers[tier_idx];
    let mut evicted = Vec::new();
    while capacity - t.used_bytes() < needed_bytes {
        let oldest = t
            .entries
            .values()
            .min_by_key(|e| e.last_access)
            .map(|e| e.chunk_hash)
            .expect("used > 0 implies an entry exists");
        t.entries.remove(&oldest);
        let _ = fs::remove_file(entry_path(&t.dir, &oldest));
        evicted.push(oldest);
    }
    Ok(evicted)
}
