//! Mixture-of-layers fusion: a dynamically gated query/proprio branch, a
//! statically gated visual branch and action self-attention, averaged.

use rand::Rng;

use crate::nn::{init_const, init_matrix, multi_head, split_scalars, Attention};
use crate::tensor::{DenseArray, NumError, ParamStore, Tape, Var};

/// Std of the dynamic-gate projection at init.
pub const GATE_STD: f64 = 0.02;

/// Per-head gate values of one head layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub layer: usize,
    pub alpha_s: Vec<f64>,
    pub alpha_v: Vec<f64>,
}

pub fn name(layer: usize, what: &str) -> String {
    format!("head.l{layer}.mol.{what}")
}

/// Inserts the trainable weights of one head layer's fusion block.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    layer: usize,
    d_b: usize,
    d_k: usize,
    n_h: usize,
    rng: &mut R,
) -> Result<(), NumError> {
    let std_b = 1.0 / (d_b as f64).sqrt();
    let std_k = 1.0 / (d_k as f64).sqrt();
    init_matrix(store, &name(layer, "proj_s"), d_b, d_k, std_b, true, rng)?;
    init_matrix(store, &name(layer, "proj_v"), d_b, d_k, std_b, true, rng)?;
    init_matrix(store, &name(layer, "w_s"), n_h, d_k, GATE_STD, true, rng)?;
    init_const(store, &name(layer, "alpha_v"), 1, n_h, 0.0, true)?;
    for branch in ["s", "v", "a"] {
        for w in ["wq", "wk", "wv", "wo"] {
            init_matrix(store, &name(layer, &format!("{branch}.{w}")), d_k, d_k, std_k, true, rng)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
pub struct BranchVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl BranchVars {
    fn bind(t: &mut Tape, params: &ParamStore, layer: usize, branch: &str) -> Result<Self, NumError> {
        let mut p = |w: &str| t.param(params, &name(layer, &format!("{branch}.{w}")));
        Ok(Self { wq: p("wq")?, wk: p("wk")?, wv: p("wv")?, wo: p("wo")? })
    }
}

/// One layer's fusion weights bound on a tape.
pub struct MolVars {
    pub layer: usize,
    pub n_heads: usize,
    pub proj_s: Var,
    pub proj_v: Var,
    pub w_s: Var,
    pub alpha_v: Var,
    pub s: BranchVars,
    pub v: BranchVars,
    pub a: BranchVars,
    /// `proj_v · v.wk` and `proj_v · v.wv`, split per head.
    vis_keys: Vec<Var>,
    vis_values: Vec<Var>,
}

impl MolVars {
    pub fn bind(t: &mut Tape, params: &ParamStore, layer: usize, n_heads: usize) -> Result<Self, NumError> {
        let proj_s = t.param(params, &name(layer, "proj_s"))?;
        let proj_v = t.param(params, &name(layer, "proj_v"))?;
        let w_s = t.param(params, &name(layer, "w_s"))?;
        let alpha_v = t.param(params, &name(layer, "alpha_v"))?;
        let s = BranchVars::bind(t, params, layer, "s")?;
        let v = BranchVars::bind(t, params, layer, "v")?;
        let a = BranchVars::bind(t, params, layer, "a")?;
        let mk = t.matmul(proj_v, v.wk)?;
        let mv = t.matmul(proj_v, v.wv)?;
        let d_k = t.value(mk).cols();
        if d_k % n_heads != 0 {
            return Err(NumError::Shape(format!("d_k {d_k} not divisible by {n_heads} heads")));
        }
        let dh = d_k / n_heads;
        let mut vis_keys = Vec::with_capacity(n_heads);
        let mut vis_values = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            vis_keys.push(t.slice_cols(mk, h * dh, (h + 1) * dh)?);
            vis_values.push(t.slice_cols(mv, h * dh, (h + 1) * dh)?);
        }
        Ok(Self { layer, n_heads, proj_s, proj_v, w_s, alpha_v, s, v, a, vis_keys, vis_values })
    }
}

/// `sigmoid(W_S · mean_rows(S''))`, one value per head, as `[1 × n_h]`.
pub fn dynamic_gate(t: &mut Tape, s_pp: Var, w_s: Var) -> Result<Var, NumError> {
    if t.value(s_pp).rows() < 1 {
        return Err(NumError::Shape("gate input has no tokens".into()));
    }
    let pooled = t.mean_rows(s_pp)?;
    let logits = t.matmul_nt(pooled, w_s)?;
    t.sigmoid(logits)
}

/// Multi-head attention from `x` onto `kv` with optional per-head logit
/// gates, followed by the output projection.
pub fn gated_cross_attn(
    t: &mut Tape,
    x: Var,
    kv: Var,
    gate: Option<&[Var]>,
    b: &BranchVars,
    n_heads: usize,
) -> Result<Attention, NumError> {
    let q = t.matmul(x, b.wq)?;
    let k = t.matmul(kv, b.wk)?;
    let v = t.matmul(kv, b.wv)?;
    let att = multi_head(t, q, k, v, n_heads, gate)?;
    let out = t.matmul(att.out, b.wo)?;
    Ok(Attention { out, probs: att.probs })
}

/// Ungated self-attention over the action latents.
pub fn self_attn_actions(t: &mut Tape, x: Var, b: &BranchVars, n_heads: usize) -> Result<Attention, NumError> {
    gated_cross_attn(t, x, x, None, b, n_heads)
}

/// Visual branch over raw backbone states `vis` `[n × d_b]`.
///
/// Equal to `gated_cross_attn(x, vis · proj_v, gate, v)` but multiplies in
/// the order that keeps per-sample cost independent of `d_k²`.
pub fn visual_attn(t: &mut Tape, x: Var, vis: Var, m: &MolVars, gate: &[Var]) -> Result<Attention, NumError> {
    if gate.len() != m.n_heads {
        return Err(NumError::Shape(format!("gate has {} entries for {} heads", gate.len(), m.n_heads)));
    }
    let q = t.matmul(x, m.v.wq)?;
    let dh = t.value(q).cols() / m.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(m.n_heads);
    let mut probs = Vec::with_capacity(m.n_heads);
    for h in 0..m.n_heads {
        let qh = t.slice_cols(q, h * dh, (h + 1) * dh)?;
        let qk = t.matmul_nt(qh, m.vis_keys[h])?;
        let logits = t.matmul_nt(qk, vis)?;
        let logits = t.scale(logits, scale)?;
        let logits = t.scale_by(logits, gate[h])?;
        let p = t.softmax_rows(logits)?;
        let ctx = t.matmul(p, vis)?;
        heads.push(t.matmul(ctx, m.vis_values[h])?);
        probs.push(p);
    }
    let cat = if m.n_heads == 1 { heads[0] } else { t.concat_cols(&heads)? };
    let out = t.matmul(cat, m.v.wo)?;
    Ok(Attention { out, probs })
}

/// Result of one fusion block.
pub struct MolOutput {
    pub mix: Var,
    /// `[1 × n_h]` dynamic and effective static gates; `None` when the
    /// block is reduced to the plain query branch.
    pub alpha_s: Option<Var>,
    pub alpha_v: Option<Var>,
    /// Attention matrices of the query, visual and action branches.
    pub probs: Vec<Var>,
}

/// `Mean(A_s, A_v, A_a)` for normalized latents `x`, backbone query states
/// `s` `[n_q × d_b]`, visual states `vis` `[n_vis × d_b]` and the proprio
/// token `p_emb` `[1 × d_k]`. With `enabled = false` only the query branch
/// runs, ungated.
pub fn mol_layer(t: &mut Tape, x: Var, s: Var, vis: Var, p_emb: Var, m: &MolVars, enabled: bool) -> Result<MolOutput, NumError> {
    let sp = t.matmul(s, m.proj_s)?;
    let s_pp = t.concat_rows(&[sp, p_emb])?;
    if !enabled {
        let att = gated_cross_attn(t, x, s_pp, None, &m.s, m.n_heads)?;
        return Ok(MolOutput { mix: att.out, alpha_s: None, alpha_v: None, probs: att.probs });
    }
    let alpha_s = dynamic_gate(t, s_pp, m.w_s)?;
    let gs = split_scalars(t, alpha_s)?;
    let a_s = gated_cross_attn(t, x, s_pp, Some(&gs), &m.s, m.n_heads)?;

    let alpha_v = t.sigmoid(m.alpha_v)?;
    let gv = split_scalars(t, alpha_v)?;
    let a_v = visual_attn(t, x, vis, m, &gv)?;

    let a_a = self_attn_actions(t, x, &m.a, m.n_heads)?;
    let mix = t.mean_stack(&[a_s.out, a_v.out, a_a.out])?;
    let probs = a_s.probs.into_iter().chain(a_v.probs).chain(a_a.probs).collect();
    Ok(MolOutput { mix, alpha_s: Some(alpha_s), alpha_v: Some(alpha_v), probs })
}

impl MolOutput {
    pub fn report(&self, t: &Tape, layer: usize) -> Option<GateReport> {
        let (s, v) = (self.alpha_s?, self.alpha_v?);
        Some(GateReport { layer, alpha_s: t.value(s).data().to_vec(), alpha_v: t.value(v).data().to_vec() })
    }
}

/// Value-level helper used by tests and inspection: the gate for a given
/// pooled input and projection.
pub fn gate_values(pooled: &DenseArray, w_s: &DenseArray) -> Result<Vec<f64>, NumError> {
    let logits = pooled.matmul(&w_s.transpose())?;
    Ok(logits.data().iter().map(|&z| crate::tensor::sigmoid(z)).collect())
}
