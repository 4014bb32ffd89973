//! Frozen transformer surrogate for the vision-language encoder, plus the
//! synthetic cell-grid visual encoder and the instruction embedding table.
//!
//! Context tokens (visual and text) attend among themselves only; query
//! tokens attend to every token. The context half of each layer therefore
//! depends on the observation alone and can be cached while training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::vocab::{derived_tokens, NOVEL_TYPES, N_TYPES, TRAINING_TYPES, TYPE_DIM};
use crate::env::WorldState;
use crate::nn::{init_const, init_matrix, linear, multi_head};
use crate::tensor::{DenseArray, NumError, ParamStore, Tape, Var};

pub const GRID: usize = 8;
pub const WRIST_SIDE: f64 = 0.4;
/// type ⊕ occupancy ⊕ cell centre (2) ⊕ gripper flag ⊕ on-table ⊕ type⊗position (2·TYPE_DIM)
pub const DESC_DIM: usize = TYPE_DIM + 1 + 2 + 1 + 1 + 2 * TYPE_DIM;
pub const WEIGHT_STD: f64 = 0.02;
pub const EMBED_STD: f64 = 0.5;
pub const SEGMENT_STD: f64 = 0.5;
pub const PERTURB_STD: f64 = 0.05;
const LN_EPS: f64 = 1e-5;

pub const QUERIES: &str = "queries";
pub const PREFIX: &str = "backbone.";

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },
    #[error("empty instruction")]
    EmptyText,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_queries: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { n_layers: 12, d_model: 64, n_heads: 4, n_queries: 8, vocab_size: 64, seed: 0 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::Config(m));
        if self.n_layers < 3 {
            return bad(format!("n_layers = {} < 3", self.n_layers));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_queries == 0 {
            return bad("n_queries = 0".into());
        }
        let max_id = derived_tokens().iter().map(|p| p.0.max(p.1)).max().unwrap_or(0) as usize;
        if self.vocab_size <= max_id {
            return bad(format!("vocab_size {} cannot hold token id {max_id}", self.vocab_size));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Shallow, middle and deep layer indices used for memory keys.
    pub fn key_layers(&self) -> [usize; 3] {
        let l = self.n_layers;
        [0, (4 * l / 5).min(l - 1), l - 1]
    }

    pub fn n_visual(&self) -> usize {
        2 * GRID * GRID
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Global,
    Wrist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    VisualGlobal = 0,
    VisualWrist = 1,
    Text = 2,
    Query = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub kind: Segment,
    pub embeddings: DenseArray,
}

fn layer_name(l: usize, what: &str) -> String {
    format!("{PREFIX}l{l}.{what}")
}

/// Samples every backbone weight (frozen) and the learnable queries.
pub fn init_frozen(cfg: &BackboneConfig) -> Result<ParamStore, BackboneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let d = cfg.d_model;

    let mut table = DenseArray::randn(cfg.vocab_size, d, EMBED_STD, &mut rng);
    for (derived, base) in derived_tokens() {
        for c in 0..d {
            let v = table.get(base as usize, c) + PERTURB_STD * crate::nn::gauss(&mut rng);
            table.set(derived as usize, c, v);
        }
    }
    store.insert(&format!("{PREFIX}tok_embed"), table, false)?;

    let mut types = DenseArray::zeros(N_TYPES, TYPE_DIM);
    for (i, t) in TRAINING_TYPES.iter().enumerate() {
        types.set(*t as usize, i, 1.0);
    }
    for (novel, base) in NOVEL_TYPES {
        for c in 0..TYPE_DIM {
            let v = types.get(base as usize, c) + PERTURB_STD * crate::nn::gauss(&mut rng);
            types.set(novel as usize, c, v);
        }
    }
    store.insert(&format!("{PREFIX}type_desc"), types, false)?;

    let proj_std = 1.0 / (DESC_DIM as f64).sqrt();
    init_matrix(&mut store, &format!("{PREFIX}vis_global"), DESC_DIM, d, proj_std, false, &mut rng)?;
    init_matrix(&mut store, &format!("{PREFIX}vis_wrist"), DESC_DIM, d, proj_std, false, &mut rng)?;
    init_matrix(&mut store, &format!("{PREFIX}segment"), 4, d, SEGMENT_STD, false, &mut rng)?;

    for l in 0..cfg.n_layers {
        for ln in ["ln1", "ln2"] {
            init_const(&mut store, &layer_name(l, &format!("{ln}_g")), 1, d, 1.0, false)?;
            init_const(&mut store, &layer_name(l, &format!("{ln}_b")), 1, d, 0.0, false)?;
        }
        for w in ["wq", "wk", "wv", "wo"] {
            init_matrix(&mut store, &layer_name(l, w), d, d, WEIGHT_STD, false, &mut rng)?;
        }
        init_matrix(&mut store, &layer_name(l, "w1"), d, cfg.d_ff(), WEIGHT_STD, false, &mut rng)?;
        init_const(&mut store, &layer_name(l, "b1"), 1, cfg.d_ff(), 0.0, false)?;
        init_matrix(&mut store, &layer_name(l, "w2"), cfg.d_ff(), d, WEIGHT_STD, false, &mut rng)?;
        init_const(&mut store, &layer_name(l, "b2"), 1, d, 0.0, false)?;
    }

    init_matrix(&mut store, QUERIES, cfg.n_queries, d, EMBED_STD, true, &mut rng)?;
    Ok(store)
}

/// Order-independent hash over every backbone weight.
pub fn param_checksum(store: &ParamStore, prefix: &str) -> Result<String, NumError> {
    store.checksum(prefix)
}

/// Raw cell descriptors of one view, `[G² × DESC_DIM]`, rows in
/// row-major `(iy, ix)` order.
pub fn view_descriptors(state: &WorldState, view: View, type_desc: &DenseArray) -> DenseArray {
    let g = GRID;
    let (x0, y0, side) = match view {
        View::Global => (0.0, 0.0, 1.0),
        View::Wrist => (state.gripper[0] - WRIST_SIDE / 2.0, state.gripper[1] - WRIST_SIDE / 2.0, WRIST_SIDE),
    };
    // Coordinates are expressed in the view's own frame, scaled to [-1, 1].
    let frame = |x: f64, y: f64| (2.0 * (x - x0) / side - 1.0, 2.0 * (y - y0) / side - 1.0);
    let cell_of = |x: f64, y: f64| -> Option<usize> {
        let u = (x - x0) / side;
        let v = (y - y0) / side;
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return None;
        }
        let ix = ((u * g as f64) as usize).min(g - 1);
        let iy = ((v * g as f64) as usize).min(g - 1);
        Some(iy * g + ix)
    };

    let mut out = DenseArray::zeros(g * g, DESC_DIM);
    let occ = TYPE_DIM;
    let coord = TYPE_DIM + 1;
    let grip = TYPE_DIM + 3;
    let table = TYPE_DIM + 4;
    let tpos = TYPE_DIM + 5;
    for iy in 0..g {
        for ix in 0..g {
            let r = iy * g + ix;
            let cx = x0 + (ix as f64 + 0.5) * side / g as f64;
            let cy = y0 + (iy as f64 + 0.5) * side / g as f64;
            let (fx, fy) = frame(cx, cy);
            out.set(r, coord, fx);
            out.set(r, coord + 1, fy);
            let on_table = (0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy);
            out.set(r, table, if on_table { 1.0 } else { 0.0 });
        }
    }
    for o in &state.objects {
        let Some(r) = cell_of(o.x, o.y) else { continue };
        let (fx, fy) = frame(o.x, o.y);
        let tv = type_desc.row_slice(o.type_id as usize);
        for c in 0..TYPE_DIM {
            out.set(r, c, out.get(r, c) + tv[c]);
            out.set(r, tpos + 2 * c, out.get(r, tpos + 2 * c) + tv[c] * fx);
            out.set(r, tpos + 2 * c + 1, out.get(r, tpos + 2 * c + 1) + tv[c] * fy);
        }
        out.set(r, occ, out.get(r, occ) + 1.0);
    }
    if let Some(r) = cell_of(state.gripper[0], state.gripper[1]) {
        out.set(r, grip, -state.grip.signed());
    }
    out
}

/// Rasterizes one view and maps it through the frozen patch projector.
pub fn encode_view(params: &ParamStore, state: &WorldState, view: View) -> Result<TokenSequence, NumError> {
    let desc = view_descriptors(state, view, params.get(&format!("{PREFIX}type_desc"))?);
    let (name, kind) = match view {
        View::Global => ("vis_global", Segment::VisualGlobal),
        View::Wrist => ("vis_wrist", Segment::VisualWrist),
    };
    let w = params.get(&format!("{PREFIX}{name}"))?;
    Ok(TokenSequence { kind, embeddings: desc.matmul(w)? })
}

/// Looks instruction ids up in the frozen embedding table.
pub fn tokenize_instruction(params: &ParamStore, cfg: &BackboneConfig, ids: &[u32]) -> Result<TokenSequence, BackboneError> {
    if ids.is_empty() {
        return Err(BackboneError::EmptyText);
    }
    let table = params.get(&format!("{PREFIX}tok_embed"))?;
    let rows = ids
        .iter()
        .map(|&id| {
            if id as usize >= cfg.vocab_size || id as usize >= table.rows() {
                Err(BackboneError::Vocabulary { id, vocab: cfg.vocab_size })
            } else {
                Ok(table.row_slice(id as usize).to_vec())
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TokenSequence { kind: Segment::Text, embeddings: DenseArray::from_rows(&rows)? })
}

pub fn query_tokens(params: &ParamStore) -> Result<TokenSequence, NumError> {
    Ok(TokenSequence { kind: Segment::Query, embeddings: params.get(QUERIES)?.clone() })
}

/// Hidden states after one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub visual: DenseArray,
    pub text: DenseArray,
    pub queries: DenseArray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    pub layers: Vec<LayerState>,
}

impl LayerStates {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// One layer's weights bound on a tape.
pub struct LayerVars {
    ln1: (Var, Var),
    ln2: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Backbone weights bound on a tape.
pub struct BackboneVars {
    pub layers: Vec<LayerVars>,
    pub segment: Var,
    pub n_heads: usize,
}

impl BackboneVars {
    pub fn bind(t: &mut Tape, params: &ParamStore, cfg: &BackboneConfig) -> Result<Self, NumError> {
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut p = |w: &str| t.param(params, &layer_name(l, w));
            layers.push(LayerVars {
                ln1: (p("ln1_g")?, p("ln1_b")?),
                ln2: (p("ln2_g")?, p("ln2_b")?),
                wq: p("wq")?,
                wk: p("wk")?,
                wv: p("wv")?,
                wo: p("wo")?,
                w1: p("w1")?,
                b1: p("b1")?,
                w2: p("w2")?,
                b2: p("b2")?,
            });
        }
        let segment = t.param(params, &format!("{PREFIX}segment"))?;
        Ok(Self { layers, segment, n_heads: cfg.n_heads })
    }

    /// Adds the segment embedding of `kind` to every row.
    pub fn tag(&self, t: &mut Tape, x: Var, kind: Segment) -> Result<Var, NumError> {
        let k = kind as usize;
        let row = t.slice_rows(self.segment, k, k + 1)?;
        t.add_row(x, row)
    }
}

/// Per-layer record of the context stream.
pub struct ContextTrace {
    /// Keys and values the context exposes to queries at each layer.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    /// Context hidden state after each layer.
    pub states: Vec<Var>,
}

fn ffn(t: &mut Tape, lv: &LayerVars, x: Var) -> Result<Var, NumError> {
    let h = t.layer_norm(x, Some(lv.ln2.0), Some(lv.ln2.1), LN_EPS)?;
    let h = linear(t, h, lv.w1, Some(lv.b1))?;
    let h = t.gelu(h)?;
    let h = linear(t, h, lv.w2, Some(lv.b2))?;
    t.add(x, h)
}

/// Runs the context rows through every layer.
pub fn context_forward(t: &mut Tape, bv: &BackboneVars, x0: Var) -> Result<ContextTrace, NumError> {
    let n = bv.layers.len();
    let mut trace = ContextTrace { keys: Vec::with_capacity(n), values: Vec::with_capacity(n), states: Vec::with_capacity(n) };
    let mut x = x0;
    for lv in &bv.layers {
        let h = t.layer_norm(x, Some(lv.ln1.0), Some(lv.ln1.1), LN_EPS)?;
        let q = t.matmul(h, lv.wq)?;
        let k = t.matmul(h, lv.wk)?;
        let v = t.matmul(h, lv.wv)?;
        let att = multi_head(t, q, k, v, bv.n_heads, None)?;
        let o = t.matmul(att.out, lv.wo)?;
        let x1 = t.add(x, o)?;
        x = ffn(t, lv, x1)?;
        trace.keys.push(k);
        trace.values.push(v);
        trace.states.push(x);
    }
    Ok(trace)
}

/// Runs the query rows through every layer against cached context keys
/// and values; returns the query state after each layer.
pub fn query_forward(t: &mut Tape, bv: &BackboneVars, q0: Var, keys: &[Var], values: &[Var]) -> Result<Vec<Var>, NumError> {
    if keys.len() != bv.layers.len() || values.len() != bv.layers.len() {
        return Err(NumError::Shape(format!("{} context layers for {} backbone layers", keys.len(), bv.layers.len())));
    }
    let mut out = Vec::with_capacity(bv.layers.len());
    let mut x = q0;
    for (l, lv) in bv.layers.iter().enumerate() {
        let h = t.layer_norm(x, Some(lv.ln1.0), Some(lv.ln1.1), LN_EPS)?;
        let q = t.matmul(h, lv.wq)?;
        let kq = t.matmul(h, lv.wk)?;
        let vq = t.matmul(h, lv.wv)?;
        let k = t.concat_rows(&[keys[l], kq])?;
        let v = t.concat_rows(&[values[l], vq])?;
        let att = multi_head(t, q, k, v, bv.n_heads, None)?;
        let o = t.matmul(att.out, lv.wo)?;
        let x1 = t.add(x, o)?;
        x = ffn(t, lv, x1)?;
        out.push(x);
    }
    Ok(out)
}

/// Tags and stacks the visual and text sequences into the context input.
pub fn context_input(t: &mut Tape, bv: &BackboneVars, global: Var, wrist: Var, text: Var) -> Result<Var, NumError> {
    let g = bv.tag(t, global, Segment::VisualGlobal)?;
    let w = bv.tag(t, wrist, Segment::VisualWrist)?;
    let x = bv.tag(t, text, Segment::Text)?;
    t.concat_rows(&[g, w, x])
}

fn check_width(seq: &TokenSequence, d: usize) -> Result<(), NumError> {
    if seq.embeddings.cols() != d {
        return Err(NumError::Shape(format!("{:?} tokens have width {}, expected {d}", seq.kind, seq.embeddings.cols())));
    }
    Ok(())
}

/// Full forward pass returning every layer's split hidden states.
pub fn encode(
    params: &ParamStore,
    cfg: &BackboneConfig,
    global: &TokenSequence,
    wrist: &TokenSequence,
    text: &TokenSequence,
    queries: &TokenSequence,
) -> Result<LayerStates, BackboneError> {
    for s in [global, wrist, text, queries] {
        check_width(s, cfg.d_model)?;
    }
    let mut t = Tape::new();
    let bv = BackboneVars::bind(&mut t, params, cfg)?;
    let g = t.constant(global.embeddings.clone())?;
    let w = t.constant(wrist.embeddings.clone())?;
    let x = t.constant(text.embeddings.clone())?;
    let q = t.constant(queries.embeddings.clone())?;
    let x0 = context_input(&mut t, &bv, g, w, x)?;
    let trace = context_forward(&mut t, &bv, x0)?;
    let q0 = bv.tag(&mut t, q, Segment::Query)?;
    let qs = query_forward(&mut t, &bv, q0, &trace.keys, &trace.values)?;
    let n_vis = global.embeddings.rows() + wrist.embeddings.rows();
    let n_ctx = n_vis + text.embeddings.rows();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let vis = t.slice_rows(trace.states[l], 0, n_vis)?;
        let txt = t.slice_rows(trace.states[l], n_vis, n_ctx)?;
        layers.push(LayerState {
            visual: t.value(vis).clone(),
            text: t.value(txt).clone(),
            queries: t.value(qs[l]).clone(),
        });
    }
    Ok(LayerStates { layers })
}

/// Encodes an observation end to end.
pub fn encode_observation(
    params: &ParamStore,
    cfg: &BackboneConfig,
    state: &WorldState,
    instruction: &[u32],
) -> Result<LayerStates, BackboneError> {
    let g = encode_view(params, state, View::Global)?;
    let w = encode_view(params, state, View::Wrist)?;
    let x = tokenize_instruction(params, cfg, instruction)?;
    let q = query_tokens(params)?;
    encode(params, cfg, &g, &w, &x, &q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::vocab::{APPLE, TYPE_APPLE, TYPE_BOTTLE};
    use crate::env::{reset, Grip, Object, TaskKind, TaskSpec};

    fn small() -> BackboneConfig {
        BackboneConfig { n_layers: 3, d_model: 16, n_heads: 2, n_queries: 3, vocab_size: 64, seed: 5 }
    }

    fn empty_state(gripper: [f64; 2]) -> WorldState {
        let mut s = reset(&TaskSpec::standard(TaskKind::PickPlace), 1).unwrap();
        s.objects.clear();
        s.gripper = gripper;
        s.grip = Grip::Open;
        s
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        assert!(BackboneConfig { n_layers: 2, ..small() }.validate().is_err());
        assert!(BackboneConfig { d_model: 15, ..small() }.validate().is_err());
        assert!(BackboneConfig { vocab_size: 40, ..small() }.validate().is_err());
        assert_eq!(BackboneConfig { n_layers: 24, ..small() }.key_layers(), [0, 19, 23]);
    }

    #[test]
    fn init_is_seeded_and_frozen() {
        let a = init_frozen(&small()).unwrap();
        let b = init_frozen(&small()).unwrap();
        assert_eq!(param_checksum(&a, PREFIX).unwrap(), param_checksum(&b, PREFIX).unwrap());
        for (name, _, trainable) in a.iter() {
            assert_eq!(trainable, name == QUERIES, "{name}");
        }
        let c = init_frozen(&BackboneConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(param_checksum(&a, PREFIX).unwrap(), param_checksum(&c, PREFIX).unwrap());
    }

    #[test]
    fn empty_table_cells_differ_only_in_coordinates() {
        let p = init_frozen(&small()).unwrap();
        let s = empty_state([0.5, 0.5]);
        let d = view_descriptors(&s, View::Global, p.get("backbone.type_desc").unwrap());
        let grip_cell = 4 * GRID + 4;
        let keep: Vec<usize> = (0..DESC_DIM).filter(|c| ![TYPE_DIM + 1, TYPE_DIM + 2].contains(c)).collect();
        let base: Vec<f64> = keep.iter().map(|&c| d.get(0, c)).collect();
        for r in (0..GRID * GRID).filter(|&r| r != grip_cell) {
            let row: Vec<f64> = keep.iter().map(|&c| d.get(r, c)).collect();
            assert_eq!(row, base, "cell {r}");
        }
    }

    #[test]
    fn object_at_centre_occupies_one_global_cell() {
        let p = init_frozen(&small()).unwrap();
        let mut s = empty_state([0.1, 0.1]);
        s.objects.push(Object { id: 0, type_id: TYPE_APPLE, x: 0.5, y: 0.5 });
        let d = view_descriptors(&s, View::Global, p.get("backbone.type_desc").unwrap());
        let occupied: Vec<usize> = (0..GRID * GRID).filter(|&r| d.get(r, TYPE_DIM) > 0.0).collect();
        assert_eq!(occupied, vec![4 * GRID + 4]);
    }

    #[test]
    fn gripper_motion_changes_wrist_not_global_objects() {
        let p = init_frozen(&small()).unwrap();
        let mut s = empty_state([0.3, 0.3]);
        s.objects.push(Object { id: 0, type_id: TYPE_APPLE, x: 0.35, y: 0.32 });
        let mut moved = s.clone();
        moved.gripper = [0.32, 0.28];
        let w0 = encode_view(&p, &s, View::Wrist).unwrap();
        let w1 = encode_view(&p, &moved, View::Wrist).unwrap();
        assert_ne!(w0, w1);
        let td = p.get("backbone.type_desc").unwrap();
        let g0 = view_descriptors(&s, View::Global, td);
        let g1 = view_descriptors(&moved, View::Global, td);
        let obj_cell = 2 * GRID + 2;
        assert_eq!(g0.row_slice(obj_cell), g1.row_slice(obj_cell));
    }

    #[test]
    fn tokenize_shapes_and_errors() {
        let cfg = small();
        let p = init_frozen(&cfg).unwrap();
        let x = tokenize_instruction(&p, &cfg, &[3, 7]).unwrap();
        assert_eq!(x.embeddings.shape(), &[2, 16]);
        assert!(matches!(tokenize_instruction(&p, &cfg, &[64]), Err(BackboneError::Vocabulary { .. })));
        assert!(matches!(tokenize_instruction(&p, &cfg, &[]), Err(BackboneError::EmptyText)));
    }

    #[test]
    fn synonyms_stay_close_to_their_base() {
        let cfg = BackboneConfig { d_model: 64, ..small() };
        let mut cos_sum = 0.0;
        let mut n = 0;
        for seed in 0..12 {
            let p = init_frozen(&BackboneConfig { seed, ..cfg.clone() }).unwrap();
            for (derived, base) in derived_tokens() {
                let e = tokenize_instruction(&p, &cfg, &[base, derived]).unwrap().embeddings;
                let (a, b) = (e.row_slice(0), e.row_slice(1));
                let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(dist < PERTURB_STD * 64f64.sqrt() * 3.0);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                cos_sum += dot / (na * nb);
                n += 1;
            }
        }
        assert!(n >= 100);
        assert!(cos_sum / n as f64 > 0.9);
        let _ = APPLE;
    }

    #[test]
    fn novel_descriptor_near_base_type() {
        let p = init_frozen(&small()).unwrap();
        let td = p.get("backbone.type_desc").unwrap();
        let (a, b) = (td.row_slice(TYPE_APPLE as usize), td.row_slice(TYPE_BOTTLE as usize));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / nb > 0.9);
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = small();
        let p = init_frozen(&cfg).unwrap();
        let s = reset(&TaskSpec::standard(TaskKind::PickPlace), 4).unwrap();
        let task = TaskSpec::standard(TaskKind::PickPlace);
        let a = encode_observation(&p, &cfg, &s, &task.instruction).unwrap();
        let b = encode_observation(&p, &cfg, &s, &task.instruction).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.n_layers);
        for l in &a.layers {
            assert_eq!(l.visual.shape(), &[2 * GRID * GRID, 16]);
            assert_eq!(l.text.shape(), &[task.instruction.len(), 16]);
            assert_eq!(l.queries.shape(), &[cfg.n_queries, 16]);
        }
    }

    #[test]
    fn swapping_visual_tokens_permutes_states() {
        let cfg = small();
        let p = init_frozen(&cfg).unwrap();
        let s = reset(&TaskSpec::standard(TaskKind::PickPlace), 2).unwrap();
        let mut g = encode_view(&p, &s, View::Global).unwrap();
        let w = encode_view(&p, &s, View::Wrist).unwrap();
        let x = tokenize_instruction(&p, &cfg, &[1, 8, 12]).unwrap();
        let q = query_tokens(&p).unwrap();
        let a = encode(&p, &cfg, &g, &w, &x, &q).unwrap();
        let (i, j) = (3, 40);
        let (ri, rj) = (g.embeddings.row_slice(i).to_vec(), g.embeddings.row_slice(j).to_vec());
        for c in 0..16 {
            g.embeddings.set(i, c, rj[c]);
            g.embeddings.set(j, c, ri[c]);
        }
        let b = encode(&p, &cfg, &g, &w, &x, &q).unwrap();
        let (va, vb) = (&a.layers[0].visual, &b.layers[0].visual);
        for c in 0..16 {
            assert!((va.get(i, c) - vb.get(j, c)).abs() < 1e-12);
            assert!((va.get(j, c) - vb.get(i, c)).abs() < 1e-12);
        }
        assert!(a.layers[2].queries.max_abs_diff(&b.layers[2].queries) < 1e-12);
    }

    #[test]
    fn width_mismatch_is_error() {
        let cfg = small();
        let p = init_frozen(&cfg).unwrap();
        let s = reset(&TaskSpec::standard(TaskKind::PickPlace), 2).unwrap();
        let g = encode_view(&p, &s, View::Global).unwrap();
        let x = TokenSequence { kind: Segment::Text, embeddings: DenseArray::zeros(2, 8) };
        let q = query_tokens(&p).unwrap();
        assert!(encode(&p, &cfg, &g, &g, &x, &q).is_err());
    }
}
