//! The complete policy: frozen backbone, action head and skill memory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    self, context_forward, context_input, query_forward, view_descriptors, BackboneConfig, BackboneError, BackboneVars,
    Segment, View, QUERIES,
};
use crate::env::{Action, WorldState, MAX_DELTA};
use crate::head::{self, layer_group, Conditioning, DenoiseOut, HeadConfig, HeadVars};
use crate::mol::GateReport;
use crate::msm::{self, build_key, mean_pool, project_retrieved, Exclusion, SkillEntry, SkillMemory};
use crate::tensor::{DenseArray, NumError, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub retrieve_r: usize,
    pub capacity: usize,
    pub enable_mol: bool,
    pub enable_msm: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            retrieve_r: 4,
            capacity: msm::DEFAULT_CAPACITY,
            enable_mol: true,
            enable_msm: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        self.backbone.validate()?;
        self.head.validate().map_err(BackboneError::Config)?;
        if self.retrieve_r == 0 {
            return Err(BackboneError::Config("retrieve_r must be ≥ 1".into()));
        }
        if self.head.d_a != 3 || self.head.d_p != 3 {
            return Err(BackboneError::Config("the environment needs d_a = d_p = 3".into()));
        }
        Ok(())
    }
}

/// Every parameter of the model, frozen backbone included.
pub fn init_params(cfg: &PolicyConfig) -> Result<ParamStore, BackboneError> {
    cfg.validate()?;
    let mut store = backbone::init_frozen(&cfg.backbone)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.backbone.seed ^ 0x68EA_D000);
    head::init_params(&mut store, &cfg.head, cfg.backbone.d_model, &mut rng)?;
    Ok(store)
}

/// Observation-only backbone outputs: context keys/values per layer, visual
/// states averaged per head layer and pooled visual features at the key
/// layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCache {
    pub keys: Vec<DenseArray>,
    pub values: Vec<DenseArray>,
    pub visual: Vec<DenseArray>,
    pub pooled: [DenseArray; 3],
}

/// Model weights bound on a tape.
pub struct PolicyVars {
    pub backbone: BackboneVars,
    pub head: HeadVars,
    pub queries: Var,
}

impl PolicyVars {
    pub fn bind(t: &mut Tape, params: &ParamStore, cfg: &PolicyConfig) -> Result<Self, NumError> {
        Ok(Self {
            backbone: BackboneVars::bind(t, params, &cfg.backbone)?,
            head: HeadVars::bind(t, params, &cfg.head)?,
            queries: t.param(params, QUERIES)?,
        })
    }
}

fn one_hot(ids: &[u32], vocab: usize) -> Result<DenseArray, BackboneError> {
    if ids.is_empty() {
        return Err(BackboneError::EmptyText);
    }
    let mut a = DenseArray::zeros(ids.len(), vocab);
    for (r, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(BackboneError::Vocabulary { id, vocab });
        }
        a.set(r, id as usize, 1.0);
    }
    Ok(a)
}

/// Differentiable input embedding: descriptor projections and a one-hot
/// table lookup, so an unfrozen backbone also trains its encoders.
fn context_tokens(
    t: &mut Tape,
    params: &ParamStore,
    cfg: &PolicyConfig,
    pv: &PolicyVars,
    state: &WorldState,
    instruction: &[u32],
) -> Result<Var, BackboneError> {
    let type_desc = params.get("backbone.type_desc")?;
    let mut views = Vec::with_capacity(2);
    for (view, name) in [(View::Global, "backbone.vis_global"), (View::Wrist, "backbone.vis_wrist")] {
        let d = t.constant(view_descriptors(state, view, type_desc))?;
        let w = t.param(params, name)?;
        views.push(t.matmul(d, w)?);
    }
    let oh = t.constant(one_hot(instruction, cfg.backbone.vocab_size)?)?;
    let table = t.param(params, "backbone.tok_embed")?;
    let text = t.matmul(oh, table)?;
    Ok(context_input(t, &pv.backbone, views[0], views[1], text)?)
}

fn group_means(t: &mut Tape, states: &[Var], cfg: &PolicyConfig) -> Result<Vec<Var>, NumError> {
    (0..cfg.head.n_layers)
        .map(|j| {
            let g = layer_group(j, cfg.backbone.n_layers, cfg.head.n_layers);
            if g.len() == 1 {
                Ok(states[g.start])
            } else {
                t.mean_stack(&states[g])
            }
        })
        .collect()
}

/// Runs the backbone on the tape end to end. Returns the conditioning and
/// the pooled key features (values only).
pub fn condition_full(
    t: &mut Tape,
    params: &ParamStore,
    cfg: &PolicyConfig,
    pv: &PolicyVars,
    state: &WorldState,
    instruction: &[u32],
) -> Result<(Conditioning, [DenseArray; 3]), BackboneError> {
    let x0 = context_tokens(t, params, cfg, pv, state, instruction)?;
    let trace = context_forward(t, &pv.backbone, x0)?;
    let q0 = pv.backbone.tag(t, pv.queries, Segment::Query)?;
    let qs = query_forward(t, &pv.backbone, q0, &trace.keys, &trace.values)?;
    let n_vis = cfg.backbone.n_visual();
    let vis: Vec<Var> = trace.states.iter().map(|&s| t.slice_rows(s, 0, n_vis)).collect::<Result<_, _>>()?;
    let pooled = cfg.backbone.key_layers().map(|l| mean_pool(t.value(vis[l])));
    let cond = Conditioning { queries: group_means(t, &qs, cfg)?, visual: group_means(t, &vis, cfg)? };
    Ok((cond, pooled))
}

/// Observation-dependent backbone work, computed once without gradients.
pub fn build_context(params: &ParamStore, cfg: &PolicyConfig, state: &WorldState, instruction: &[u32]) -> Result<ContextCache, BackboneError> {
    let mut t = Tape::new();
    let pv = PolicyVars::bind(&mut t, params, cfg)?;
    let x0 = context_tokens(&mut t, params, cfg, &pv, state, instruction)?;
    let trace = context_forward(&mut t, &pv.backbone, x0)?;
    let n_vis = cfg.backbone.n_visual();
    let vis: Vec<Var> = trace.states.iter().map(|&s| t.slice_rows(s, 0, n_vis)).collect::<Result<_, _>>()?;
    let pooled = cfg.backbone.key_layers().map(|l| mean_pool(t.value(vis[l])));
    let groups = group_means(&mut t, &vis, cfg)?;
    Ok(ContextCache {
        keys: trace.keys.iter().map(|&v| t.value(v).clone()).collect(),
        values: trace.values.iter().map(|&v| t.value(v).clone()).collect(),
        visual: groups.iter().map(|&v| t.value(v).clone()).collect(),
        pooled,
    })
}

/// Conditioning from a cached context; only the query stream is recorded.
pub fn condition_cached(t: &mut Tape, cfg: &PolicyConfig, pv: &PolicyVars, cache: &ContextCache) -> Result<Conditioning, NumError> {
    let keys: Vec<Var> = cache.keys.iter().map(|k| t.constant(k.clone())).collect::<Result<_, _>>()?;
    let values: Vec<Var> = cache.values.iter().map(|v| t.constant(v.clone())).collect::<Result<_, _>>()?;
    let q0 = pv.backbone.tag(t, pv.queries, Segment::Query)?;
    let qs = query_forward(t, &pv.backbone, q0, &keys, &values)?;
    let visual = cache.visual.iter().map(|v| t.constant(v.clone())).collect::<Result<_, _>>()?;
    Ok(Conditioning { queries: group_means(t, &qs, cfg)?, visual })
}

/// Memory key of an observation under the current key projection.
pub fn memory_key(params: &ParamStore, pooled: &[DenseArray; 3]) -> Result<Vec<f64>, NumError> {
    build_key(pooled, params.get(msm::KEY_PROJ)?)
}

/// Top-R entries for a key, or nothing when the memory path is disabled.
pub fn retrieve<'m>(cfg: &PolicyConfig, mem: &'m SkillMemory, key: &[f64], exclude: Option<Exclusion>) -> Vec<&'m SkillEntry> {
    if !cfg.enable_msm {
        return Vec::new();
    }
    mem.retrieve_top_r(key, cfg.retrieve_r, exclude)
}

/// Head forward for one sample.
pub fn denoise_sample(
    t: &mut Tape,
    params: &ParamStore,
    cfg: &PolicyConfig,
    pv: &PolicyVars,
    cond: &Conditioning,
    a_n: &DenseArray,
    proprio: [f64; 3],
    retrieved: &[&SkillEntry],
) -> Result<DenoiseOut, NumError> {
    let a_n = t.constant(a_n.clone())?;
    let p = t.constant(DenseArray::row(&proprio))?;
    let r = project_retrieved(t, params, retrieved, cfg.head.horizon, cfg.head.d_a)?;
    head::denoise(t, &pv.head, cond, a_n, p, r.as_ref(), cfg.enable_mol)
}

/// Standard normal chunk from a seeded generator.
pub fn sample_noise(cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> DenseArray {
    DenseArray::randn(cfg.horizon, cfg.d_a, 1.0, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// Clipped `[H_c × d_a]` chunk in environment units.
    pub a_r: DenseArray,
    pub gate_reports: Vec<GateReport>,
    pub retrieved_count: usize,
}

impl PolicyOutput {
    pub fn actions(&self) -> Vec<Action> {
        (0..self.a_r.rows()).map(|r| Action::from_slice(self.a_r.row_slice(r))).collect()
    }
}

/// Per-channel scale between environment actions and the unit range the
/// head is trained in. Without it the grip channel dominates the loss.
pub const ACTION_SCALE: [f64; 3] = [MAX_DELTA, MAX_DELTA, 1.0];

/// Environment actions → model units.
pub fn normalize_chunk(rows: &[[f64; 3]]) -> Vec<[f64; 3]> {
    rows.iter().map(|a| [a[0] / ACTION_SCALE[0], a[1] / ACTION_SCALE[1], a[2] / ACTION_SCALE[2]]).collect()
}

/// Model units → clipped environment actions.
fn to_env_chunk(a: &DenseArray) -> DenseArray {
    let mut out = a.clone();
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            let s = ACTION_SCALE[c];
            out.set(r, c, (out.get(r, c) * s).clamp(-s, s));
        }
    }
    out
}

/// Observation → clipped action chunk, deterministic in `seed`.
pub fn policy_forward(
    params: &ParamStore,
    cfg: &PolicyConfig,
    mem: &SkillMemory,
    state: &WorldState,
    instruction: &[u32],
    seed: u64,
) -> Result<PolicyOutput, BackboneError> {
    let cache = build_context(params, cfg, state, instruction)?;
    let mut t = Tape::new();
    let pv = PolicyVars::bind(&mut t, params, cfg)?;
    let cond = condition_cached(&mut t, cfg, &pv, &cache)?;
    let key = memory_key(params, &cache.pooled)?;
    let retrieved = retrieve(cfg, mem, &key, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_n = sample_noise(&cfg.head, &mut rng);
    let out = denoise_sample(&mut t, params, cfg, &pv, &cond, &a_n, state.proprio(), &retrieved)?;
    Ok(PolicyOutput {
        a_r: to_env_chunk(t.value(out.a_r)),
        gate_reports: out.gate_reports(&t),
        retrieved_count: retrieved.len(),
    })
}
