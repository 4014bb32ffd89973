//! Skill memory: a FIFO of (observation key, expert action chunk) pairs,
//! top-R L1 retrieval and the cross-attention readout over retrieved chunks.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::nn::{init_const, init_matrix, sinusoidal};
use crate::tensor::{DenseArray, NumError, ParamStore, Tape, Var};

pub const MEMORY_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CAPACITY: usize = 2048;

pub const KEY_PROJ: &str = "msm.key_proj";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MsmError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("correlation undefined: {0}")]
    Undefined(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillEntry {
    pub key: Vec<f64>,
    /// Row-major `[H_c × d_a]` action chunk.
    pub value: Vec<f64>,
    pub traj_id: u64,
    pub t: usize,
}

/// Query provenance used to skip entries from the query's own trajectory
/// neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exclusion {
    pub traj_id: u64,
    pub t: usize,
    pub window: usize,
}

impl Exclusion {
    fn blocks(&self, e: &SkillEntry) -> bool {
        e.traj_id == self.traj_id && e.t.abs_diff(self.t) < self.window
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillMemory {
    entries: VecDeque<SkillEntry>,
    capacity: usize,
}

impl SkillMemory {
    pub fn new(capacity: usize) -> Self {
        Self { entries: VecDeque::with_capacity(capacity.min(4096)), capacity }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &SkillEntry> {
        self.entries.iter()
    }

    pub fn insert(&mut self, entry: SkillEntry) -> Result<(), MsmError> {
        if entry.key.iter().chain(&entry.value).any(|v| !v.is_finite()) {
            return Err(MsmError::Contract("non-finite memory entry".into()));
        }
        if let Some(first) = self.entries.front() {
            if first.key.len() != entry.key.len() || first.value.len() != entry.value.len() {
                return Err(MsmError::Contract("entry width differs from memory".into()));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    /// The `r` entries nearest to `query` in L1, ascending; equal distances
    /// keep insertion order.
    pub fn retrieve_top_r(&self, query: &[f64], r: usize, exclude: Option<Exclusion>) -> Vec<&SkillEntry> {
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !exclude.is_some_and(|x| x.blocks(e)))
            .map(|(i, e)| (l1(query, &e.key), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if scored.len() > r && r > 0 {
            scored.select_nth_unstable_by(r - 1, order);
            scored.truncate(r);
        }
        scored.truncate(r);
        scored.sort_unstable_by(order);
        scored.into_iter().map(|(_, i)| &self.entries[i]).collect()
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u32(MEMORY_FORMAT_VERSION);
        w.u64(self.capacity as u64);
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            w.u64(e.key.len() as u64);
            w.f64s(&e.key);
            w.u64(e.value.len() as u64);
            w.f64s(&e.value);
            w.u64(e.traj_id);
            w.u64(e.t as u64);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, NumError> {
        let version = r.u32()?;
        if version != MEMORY_FORMAT_VERSION {
            return Err(NumError::Format(format!("memory format version {version}, expected {MEMORY_FORMAT_VERSION}")));
        }
        let capacity = r.u64()? as usize;
        let n = r.u64()? as usize;
        if n > capacity {
            return Err(NumError::Format(format!("{n} entries exceed capacity {capacity}")));
        }
        let mut mem = Self::new(capacity);
        for _ in 0..n {
            let kn = r.u64()? as usize;
            let key = r.f64s(kn)?;
            let vn = r.u64()? as usize;
            let value = r.f64s(vn)?;
            let traj_id = r.u64()?;
            let t = r.u64()? as usize;
            mem.insert(SkillEntry { key, value, traj_id, t }).map_err(|e| NumError::Format(e.to_string()))?;
        }
        Ok(mem)
    }
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    L1,
    Cosine,
}

impl Metric {
    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => l1(a, b),
            Metric::Cosine => cosine_distance(a, b),
        }
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Pearson correlation between key distances and value distances from
/// `n_probes` sampled anchors to every other entry, averaged over anchors.
pub fn key_value_correlation(mem: &SkillMemory, n_probes: usize, metric: Metric, seed: u64) -> Result<f64, MsmError> {
    if mem.len() < 2 || n_probes == 0 {
        return Err(MsmError::Contract(format!("need ≥ 2 entries and ≥ 1 probe, got {} and {n_probes}", mem.len())));
    }
    let entries: Vec<&SkillEntry> = mem.entries().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = sample(&mut rng, entries.len(), n_probes.min(entries.len()));
    let mut total = 0.0;
    for a in anchors.iter() {
        let (mut kd, mut vd) = (Vec::new(), Vec::new());
        for (j, e) in entries.iter().enumerate() {
            if j != a {
                kd.push(metric.distance(&entries[a].key, &e.key));
                vd.push(metric.distance(&entries[a].value, &e.value));
            }
        }
        total += pearson(&kd, &vd).ok_or_else(|| MsmError::Undefined(format!("zero variance at anchor {a}")))?;
    }
    Ok(total / anchors.len() as f64)
}

/// Shared weights of the memory path.
pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, d_b: usize, d_k: usize, d_a: usize, rng: &mut R) -> Result<(), NumError> {
    init_matrix(store, KEY_PROJ, d_b, d_k, 1.0 / (d_b as f64).sqrt(), true, rng)?;
    let std_a = 1.0 / (d_a as f64).sqrt();
    init_matrix(store, "msm.val_k", d_a, d_k, std_a, true, rng)?;
    init_const(store, "msm.val_k_b", 1, d_k, 0.0, true)?;
    init_matrix(store, "msm.val_v", d_a, d_k, std_a, true, rng)?;
    init_const(store, "msm.val_v_b", 1, d_k, 0.0, true)?;
    Ok(())
}

pub fn query_proj_name(layer: usize) -> String {
    format!("head.l{layer}.msm.wq")
}

pub fn init_layer_params<R: Rng + ?Sized>(store: &mut ParamStore, layer: usize, d_k: usize, rng: &mut R) -> Result<(), NumError> {
    init_matrix(store, &query_proj_name(layer), d_k, d_k, 1.0 / (d_k as f64).sqrt(), true, rng)
}

/// Memory key from mean-pooled visual states of the shallow, middle and deep
/// key layers, each `[1 × d_b]`.
pub fn build_key(pooled: &[DenseArray; 3], key_proj: &DenseArray) -> Result<Vec<f64>, NumError> {
    let mut key = Vec::with_capacity(3 * key_proj.cols());
    for p in pooled {
        key.extend_from_slice(p.matmul(key_proj)?.data());
    }
    Ok(key)
}

/// Mean over rows, as a `[1 × c]` row.
pub fn mean_pool(states: &DenseArray) -> DenseArray {
    let (r, c) = (states.rows(), states.cols());
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(states.row_slice(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= r as f64);
    DenseArray::row(&out)
}

/// Projected keys and values of the retrieved chunks, shared across head
/// layers within one forward pass.
pub struct Retrieved {
    pub keys: Var,
    pub values: Var,
}

/// Projects retrieved chunks per timestep into the latent width; keys carry
/// the chunk's temporal encoding. `None` for an empty retrieval.
pub fn project_retrieved(
    t: &mut Tape,
    params: &ParamStore,
    retrieved: &[&SkillEntry],
    horizon: usize,
    d_a: usize,
) -> Result<Option<Retrieved>, NumError> {
    if retrieved.is_empty() {
        return Ok(None);
    }
    let mut raw = Vec::with_capacity(retrieved.len() * horizon * d_a);
    for e in retrieved {
        if e.value.len() != horizon * d_a {
            return Err(NumError::Shape(format!("stored chunk has {} values, expected {}", e.value.len(), horizon * d_a)));
        }
        raw.extend_from_slice(&e.value);
    }
    let n = retrieved.len() * horizon;
    let vals = t.constant(DenseArray::matrix(n, d_a, raw)?)?;
    let wk = t.param(params, "msm.val_k")?;
    let bk = t.param(params, "msm.val_k_b")?;
    let wv = t.param(params, "msm.val_v")?;
    let bv = t.param(params, "msm.val_v_b")?;
    let d_k = t.value(wk).cols();
    let te = sinusoidal(horizon, d_k);
    let mut te_rows = Vec::with_capacity(n * d_k);
    for _ in 0..retrieved.len() {
        te_rows.extend_from_slice(te.data());
    }
    let te = t.constant(DenseArray::matrix(n, d_k, te_rows)?)?;
    let k = crate::nn::linear(t, vals, wk, Some(bk))?;
    let keys = t.add(k, te)?;
    let values = crate::nn::linear(t, vals, wv, Some(bv))?;
    Ok(Some(Retrieved { keys, values }))
}

/// `softmax(Q Kᵀ/√d_k) V` with `Q = x · W_q`; zero without retrieval.
/// Returns the readout and, when present, the attention matrix.
pub fn refine(t: &mut Tape, x: Var, retrieved: Option<&Retrieved>, wq: Var) -> Result<(Var, Option<Var>), NumError> {
    let Some(r) = retrieved else {
        let (rows, cols) = (t.value(x).rows(), t.value(x).cols());
        return Ok((t.constant(DenseArray::zeros(rows, cols))?, None));
    };
    let q = t.matmul(x, wq)?;
    let d_k = t.value(q).cols();
    let logits = t.matmul_nt(q, r.keys)?;
    let logits = t.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let p = t.softmax_rows(logits)?;
    Ok((t.matmul(p, r.values)?, Some(p)))
}
