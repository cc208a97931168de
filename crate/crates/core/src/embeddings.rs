//! Vocabulary embedding store with exact and approximate nearest-neighbour search.
//!
//! Stores are read from and written to the TDPE binary format:
//!
//! ```text
//! "TDPE" | u32 version = 1 | u32 dim | u64 vocab_count
//! vocab_count x [ u16 token_byte_len | token bytes (UTF-8) | dim x f32 ]
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TDPE";
pub const VERSION: u32 = 1;

/// Uncapped searches over stores this small skip the index.
const SCAN_BELOW: usize = 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"TDPE\"")]
    BadMagic([u8; 4]),
    #[error("unsupported TDPE version {0}")]
    VersionUnsupported(u32),
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("tokens {first:?} and {second:?} have identical embeddings")]
    DuplicateEmbedding { first: String, second: String },
    #[error("token {0:?} has a non-finite embedding value")]
    NonFiniteEmbedding(String),
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("token #{0} is not valid UTF-8")]
    InvalidToken(u64),
    #[error("token {0:?} is longer than 65535 bytes")]
    TokenTooLong(String),
    #[error("invalid store: {0}")]
    Invalid(String),
    #[error("query has dimension {got}, store has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k = {k} exceeds vocabulary size {vocab}")]
    KTooLarge { k: usize, vocab: usize },
}

/// Handling of repeated tokens and of distinct tokens sharing an embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DuplicatePolicy {
    /// Reject the store.
    #[default]
    Strict,
    /// Keep the first token with a given row and drop the rest.
    Dedup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub token_index: usize,
    pub distance: f64,
}

/// Immutable vocabulary embedding matrix.
#[derive(Debug)]
pub struct EmbeddingStore {
    dim: usize,
    vocab: Vec<String>,
    lookup: HashMap<String, usize>,
    matrix: Vec<f32>,
    norms: Vec<f64>,
    index: OnceLock<IvfIndex>,
    index_params: IvfParams,
}

impl EmbeddingStore {
    pub fn new(vocab: Vec<String>, matrix: Vec<f32>, dim: usize) -> Result<Self, StoreError> {
        Self::with_policy(vocab, matrix, dim, DuplicatePolicy::Strict)
    }

    pub fn with_policy(
        vocab: Vec<String>,
        matrix: Vec<f32>,
        dim: usize,
        policy: DuplicatePolicy,
    ) -> Result<Self, StoreError> {
        if dim < 2 {
            return Err(StoreError::Invalid(format!("dimension {dim} < 2")));
        }
        if matrix.len() != vocab.len() * dim {
            return Err(StoreError::Invalid(format!(
                "matrix has {} values, expected {} x {}",
                matrix.len(),
                vocab.len(),
                dim
            )));
        }
        let mut lookup = HashMap::with_capacity(vocab.len());
        let mut token_dup = vec![false; vocab.len()];
        for (i, (tok, row)) in vocab.iter().zip(matrix.chunks_exact(dim)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFiniteEmbedding(tok.clone()));
            }
            if lookup.contains_key(tok) {
                if policy == DuplicatePolicy::Strict {
                    return Err(StoreError::DuplicateToken(tok.clone()));
                }
                warn!("dropping repeated token {tok:?} at row {i}");
                token_dup[i] = true;
            } else {
                lookup.insert(tok.clone(), i);
            }
        }

        let mut seen: HashMap<Vec<u32>, usize> = HashMap::with_capacity(vocab.len());
        let mut keep = Vec::with_capacity(vocab.len());
        for (i, row) in matrix.chunks_exact(dim).enumerate() {
            if token_dup[i] {
                continue;
            }
            // +0.0 and -0.0 compare equal, so normalise before hashing the bits
            let bits: Vec<u32> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            match seen.get(&bits) {
                None => {
                    seen.insert(bits, i);
                    keep.push(i);
                }
                Some(&first) => match policy {
                    DuplicatePolicy::Strict => {
                        return Err(StoreError::DuplicateEmbedding {
                            first: vocab[first].clone(),
                            second: vocab[i].clone(),
                        })
                    }
                    DuplicatePolicy::Dedup => {
                        warn!(
                            "dropping {:?}: same embedding as {:?}",
                            vocab[i], vocab[first]
                        );
                    }
                },
            }
        }
        let (vocab, matrix) = if keep.len() == vocab.len() {
            (vocab, matrix)
        } else {
            let v: Vec<String> = keep.iter().map(|&i| vocab[i].clone()).collect();
            let m: Vec<f32> = keep
                .iter()
                .flat_map(|&i| matrix[i * dim..(i + 1) * dim].iter().copied())
                .collect();
            lookup = v.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
            (v, m)
        };
        if vocab.len() < 2 {
            return Err(StoreError::Invalid(format!(
                "vocabulary has {} token(s), need at least 2",
                vocab.len()
            )));
        }
        let norms = matrix
            .chunks_exact(dim)
            .map(|r| {
                r.iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(EmbeddingStore {
            dim,
            vocab,
            lookup,
            matrix,
            norms,
            index: OnceLock::new(),
            index_params: IvfParams::default(),
        })
    }

    pub fn with_index_params(mut self, params: IvfParams) -> Self {
        self.index_params = params;
        self.index = OnceLock::new();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, index: usize) -> &str {
        &self.vocab[index]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn embedding(&self, index: usize) -> &[f32] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    /// L2 norm of each row.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.matrix.chunks_exact(self.dim)
    }

    fn check_dim(&self, query: &[f32]) -> Result<(), StoreError> {
        if query.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        Ok(())
    }

    /// Closest row to `query` by Euclidean distance; ties go to the lowest index.
    pub fn exact_nearest(
        &self,
        query: &[f32],
        exclude: Option<usize>,
    ) -> Result<Neighbor, StoreError> {
        self.check_dim(query)?;
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, row) in self.rows().enumerate() {
            if Some(i) == exclude {
                continue;
            }
            let d = squared_distance(query, row);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(Neighbor {
            token_index: best.0,
            distance: best.1.sqrt(),
        })
    }

    /// All rows sorted by (distance, index).
    pub fn exact_k_nearest(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>, StoreError> {
        self.check_dim(query)?;
        self.check_k(k)?;
        let mut all: Vec<(f64, usize)> = self
            .rows()
            .enumerate()
            .map(|(i, r)| (squared_distance(query, r), i))
            .collect();
        Ok(take_sorted(&mut all, k))
    }

    fn check_k(&self, k: usize) -> Result<(), StoreError> {
        if k == 0 || k > self.len() {
            return Err(StoreError::KTooLarge {
                k,
                vocab: self.len(),
            });
        }
        Ok(())
    }

    /// k nearest rows in ascending distance, via the IVF index. Exact unless
    /// the index was built with a probe cap.
    pub fn approx_nearest(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>, StoreError> {
        self.check_dim(query)?;
        self.check_k(k)?;
        if self.index_params.max_probes.is_none() && self.len() <= SCAN_BELOW {
            // same answer, and a flat scan is cheaper at this size
            return self.exact_k_nearest(query, k);
        }
        Ok(self.index().search(self, query, k))
    }

    /// The IVF index, built on first use.
    pub fn index(&self) -> &IvfIndex {
        self.index
            .get_or_init(|| IvfIndex::build(self, &self.index_params))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::load_with_policy(path, DuplicatePolicy::Strict)
    }

    pub fn load_with_policy(path: &Path, policy: DuplicatePolicy) -> Result<Self, StoreError> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file), policy)
    }

    pub fn read_from<R: Read>(mut r: R, policy: DuplicatePolicy) -> Result<Self, StoreError> {
        let header = read_header(&mut r)?;
        let dim = header.dim as usize;
        let mut vocab = Vec::new();
        let mut matrix = Vec::new();
        let mut row = vec![0u8; dim * 4];
        for n in 0..header.vocab_count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len, "token length")?;
            let mut bytes = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut bytes, "token bytes")?;
            let tok = String::from_utf8(bytes).map_err(|_| StoreError::InvalidToken(n))?;
            read_exact(&mut r, &mut row, "embedding row")?;
            matrix.extend(
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            );
            vocab.push(tok);
        }
        Self::with_policy(vocab, matrix, dim, policy)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.vocab.len() as u64).to_le_bytes())?;
        for (tok, row) in self.vocab.iter().zip(self.rows()) {
            let len =
                u16::try_from(tok.len()).map_err(|_| StoreError::TokenTooLong(tok.clone()))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(tok.as_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Fixed-size TDPE header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TdpeHeader {
    pub version: u32,
    pub dim: u32,
    pub vocab_count: u64,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => StoreError::TruncatedFile(what),
        _ => StoreError::Io(e),
    })
}

pub fn read_header<R: Read>(r: &mut R) -> Result<TdpeHeader, StoreError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(StoreError::VersionUnsupported(version));
    }
    read_exact(r, &mut b4, "dim")?;
    let dim = u32::from_le_bytes(b4);
    let mut b8 = [0u8; 8];
    read_exact(r, &mut b8, "vocab count")?;
    Ok(TdpeHeader {
        version,
        dim,
        vocab_count: u64::from_le_bytes(b8),
    })
}

/// Squared Euclidean distance accumulated in f64 over eight fixed lanes.
#[inline]
pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..LANES {
            let d = f64::from(x[j]) - f64::from(y[j]);
            acc[j] += d * d;
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        let d = f64::from(x) - f64::from(y);
        tail += d * d;
    }
    acc.iter().sum::<f64>() + tail
}

fn take_sorted(all: &mut [(f64, usize)], k: usize) -> Vec<Neighbor> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
    }
    let head = &mut all[..k];
    head.sort_unstable_by(cmp);
    head.iter()
        .map(|&(d, i)| Neighbor {
            token_index: i,
            distance: d.sqrt(),
        })
        .collect()
}

/// Inverted-file index parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvfParams {
    /// Number of coarse clusters; `None` picks `sqrt(|vocab|)`.
    pub lists: Option<usize>,
    /// Cap on clusters probed per query. `None` probes until the
    /// triangle-inequality bound rules out every unvisited cluster, which
    /// makes the result exact. Probing never stops before k rows are found.
    pub max_probes: Option<usize>,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IvfParams {
    fn default() -> Self {
        IvfParams {
            lists: None,
            max_probes: None,
            kmeans_iters: 12,
            seed: 0x5eed,
        }
    }
}

/// Clustering-based ANN index: k-means coarse quantiser with inverted lists.
#[derive(Debug)]
pub struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>,
    /// Member rows with their distance to the cluster centroid.
    lists: Vec<Vec<(usize, f64)>>,
    radius: Vec<f64>,
    max_probes: Option<usize>,
}

impl IvfIndex {
    pub fn build(store: &EmbeddingStore, params: &IvfParams) -> Self {
        let n = store.len();
        let dim = store.dim();
        let nlists = params
            .lists
            .unwrap_or_else(|| (n as f64).sqrt().round() as usize)
            .clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut centroids = kmeans_pp_init(store, nlists, &mut rng);
        let mut assign = vec![0usize; n];
        for _ in 0..params.kmeans_iters {
            assign =
                crate::par::map_range(n, |i| nearest_centroid(&centroids, dim, store.embedding(i)));
            let mut sums = vec![0f64; nlists * dim];
            let mut counts = vec![0usize; nlists];
            for (i, &c) in assign.iter().enumerate() {
                counts[c] += 1;
                for (s, &v) in sums[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(store.embedding(i))
                {
                    *s += f64::from(v);
                }
            }
            for c in 0..nlists {
                if counts[c] == 0 {
                    // re-seed an empty cluster on a random row
                    let r = rng.random_range(0..n);
                    centroids[c * dim..(c + 1) * dim].copy_from_slice(store.embedding(r));
                    continue;
                }
                for j in 0..dim {
                    centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            }
        }
        assign =
            crate::par::map_range(n, |i| nearest_centroid(&centroids, dim, store.embedding(i)));
        let mut lists = vec![Vec::new(); nlists];
        let mut radius = vec![0f64; nlists];
        for (i, c) in assign.into_iter().enumerate() {
            let r = squared_distance(store.embedding(i), &centroids[c * dim..(c + 1) * dim]).sqrt();
            radius[c] = radius[c].max(r);
            lists[c].push((i, r));
        }
        IvfIndex {
            dim,
            centroids,
            lists,
            radius,
            max_probes: params.max_probes.map(|p| p.max(1)),
        }
    }

    pub fn list_count(&self) -> usize {
        self.lists.len()
    }

    fn search(&self, store: &EmbeddingStore, query: &[f32], k: usize) -> Vec<Neighbor> {
        let mut order: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, cen)| (squared_distance(query, cen).sqrt(), c))
            .collect();
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut best: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        // Anything whose lower bound exceeds the current k-th distance cannot
        // enter the result. The slack keeps exact ties in play.
        let bound = |best: &BinaryHeap<Cand>| match best.peek() {
            Some(c) if best.len() == k => c.0.sqrt() * (1.0 + 1e-9) + 1e-12,
            _ => f64::INFINITY,
        };
        for (probed, &(dq, c)) in order.iter().enumerate() {
            if self.max_probes.is_some_and(|m| probed >= m) && best.len() == k {
                break;
            }
            if dq - self.radius[c] > bound(&best) {
                continue;
            }
            for &(i, r) in &self.lists[c] {
                if (dq - r).abs() > bound(&best) {
                    continue;
                }
                best.push(Cand(squared_distance(query, store.embedding(i)), i));
                if best.len() > k {
                    best.pop();
                }
            }
        }
        let mut out: Vec<(f64, usize)> = best.into_iter().map(|c| (c.0, c.1)).collect();
        let n = out.len();
        take_sorted(&mut out, n)
    }
}

/// Heap entry ordered by (squared distance, row).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn nearest_centroid(centroids: &[f32], dim: usize, row: &[f32]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(row, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn kmeans_pp_init(store: &EmbeddingStore, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = store.len();
    let dim = store.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(store.embedding(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(store.embedding(i), &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(store.embedding(pick));
        let new = &centroids[start..start + dim];
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(store.embedding(i), new));
        }
    }
    centroids
}

/// Random store with i.i.d. standard-normal entries, for tests and benches.
pub fn random_store(vocab_size: usize, dim: usize, seed: u64) -> EmbeddingStore {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = (0..vocab_size).map(|i| format!("tok{i}")).collect();
    let matrix = (0..vocab_size * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    EmbeddingStore::new(vocab, matrix, dim).expect("random rows are distinct")
}
