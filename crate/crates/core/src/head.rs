//! Denoising action head: embeds a noisy chunk and proprioception, runs the
//! fusion and memory readout per layer with a subtractive residual, and
//! decodes a noise estimate that is subtracted from the input noise.

use rand::Rng;

use crate::mol::{self, GateReport, MolVars};
use crate::msm::{self, Retrieved};
use crate::nn::{init_const, init_matrix, linear, sinusoidal};
use crate::tensor::{DenseArray, NumError, ParamStore, Tape, Var};

pub const DECODE_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub n_layers: usize,
    pub d_k: usize,
    pub n_heads: usize,
    /// Chunk horizon `H_c`.
    pub horizon: usize,
    pub d_a: usize,
    pub d_p: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { n_layers: 4, d_k: 64, n_heads: 4, horizon: 8, d_a: 3, d_p: 3 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_layers == 0 || self.horizon == 0 || self.d_a == 0 || self.d_p == 0 {
            return Err("head extents must be positive".into());
        }
        if self.n_heads == 0 || self.d_k % self.n_heads != 0 {
            return Err(format!("d_k {} not divisible by {} heads", self.d_k, self.n_heads));
        }
        Ok(())
    }
}

/// Backbone layers averaged into head layer `j`.
pub fn layer_group(j: usize, backbone_layers: usize, head_layers: usize) -> std::ops::Range<usize> {
    let start = j * backbone_layers / head_layers;
    let end = ((j + 1) * backbone_layers / head_layers).max(start + 1);
    start..end
}

fn lname(j: usize, what: &str) -> String {
    format!("head.l{j}.{what}")
}

/// Inserts every trainable head weight, the fusion blocks and the memory
/// projections.
pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &HeadConfig, d_b: usize, rng: &mut R) -> Result<(), NumError> {
    let d_k = cfg.d_k;
    init_matrix(store, "head.embed.w", cfg.d_a, d_k, 1.0 / (cfg.d_a as f64).sqrt(), true, rng)?;
    init_const(store, "head.embed.b", 1, d_k, 0.0, true)?;
    init_matrix(store, "head.proprio.w", cfg.d_p, d_k, 1.0 / (cfg.d_p as f64).sqrt(), true, rng)?;
    init_const(store, "head.proprio.b", 1, d_k, 0.0, true)?;
    for j in 0..cfg.n_layers {
        init_const(store, &lname(j, "ln_g"), 1, d_k, 1.0, true)?;
        init_const(store, &lname(j, "ln_b"), 1, d_k, 0.0, true)?;
        mol::init_params(store, j, d_b, d_k, cfg.n_heads, rng)?;
        msm::init_layer_params(store, j, d_k, rng)?;
    }
    msm::init_params(store, d_b, d_k, cfg.d_a, rng)?;
    init_matrix(store, "head.decode.w", d_k, cfg.d_a, DECODE_STD, true, rng)?;
    init_const(store, "head.decode.b", 1, cfg.d_a, 0.0, true)?;
    Ok(())
}

pub struct HeadLayerVars {
    pub ln: (Var, Var),
    pub mol: MolVars,
    pub mem_q: Var,
}

/// Head weights bound on a tape.
pub struct HeadVars {
    pub embed: (Var, Var),
    pub proprio: (Var, Var),
    pub layers: Vec<HeadLayerVars>,
    pub decode: (Var, Var),
    pub temporal: Var,
}

impl HeadVars {
    pub fn bind(t: &mut Tape, params: &ParamStore, cfg: &HeadConfig) -> Result<Self, NumError> {
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for j in 0..cfg.n_layers {
            layers.push(HeadLayerVars {
                ln: (t.param(params, &lname(j, "ln_g"))?, t.param(params, &lname(j, "ln_b"))?),
                mol: MolVars::bind(t, params, j, cfg.n_heads)?,
                mem_q: t.param(params, &msm::query_proj_name(j))?,
            });
        }
        Ok(Self {
            embed: (t.param(params, "head.embed.w")?, t.param(params, "head.embed.b")?),
            proprio: (t.param(params, "head.proprio.w")?, t.param(params, "head.proprio.b")?),
            layers,
            decode: (t.param(params, "head.decode.w")?, t.param(params, "head.decode.b")?),
            temporal: t.constant(sinusoidal(cfg.horizon, cfg.d_k))?,
        })
    }
}

/// `A_0 = a_n W + b + TE` and the proprio token.
pub fn embed_inputs(t: &mut Tape, hv: &HeadVars, a_n: Var, proprio: Var) -> Result<(Var, Var), NumError> {
    let (rows, te_rows) = (t.value(a_n).rows(), t.value(hv.temporal).rows());
    if rows != te_rows {
        return Err(NumError::Shape(format!("chunk has {rows} rows, horizon is {te_rows}")));
    }
    let a = linear(t, a_n, hv.embed.0, Some(hv.embed.1))?;
    let a0 = t.add(a, hv.temporal)?;
    let p = linear(t, proprio, hv.proprio.0, Some(hv.proprio.1))?;
    Ok((a0, p))
}

/// Outputs of one head layer.
pub struct LayerOut {
    pub a: Var,
    pub fused: Var,
    pub readout: Var,
    pub gates: Option<(Var, Var)>,
    pub probs: Vec<Var>,
}

fn tag_layer(j: usize) -> impl Fn(NumError) -> NumError {
    move |e| match e {
        NumError::NonFinite { op } => NumError::NonFinite { op: format!("head layer {j}: {op}") },
        other => other,
    }
}

/// `A_l = A_{l-1} − (A'_l + A_ref)`.
#[allow(clippy::too_many_arguments)]
pub fn head_layer(
    t: &mut Tape,
    hv: &HeadVars,
    j: usize,
    a_prev: Var,
    s: Var,
    vis: Var,
    p_emb: Var,
    retrieved: Option<&Retrieved>,
    enable_mol: bool,
) -> Result<LayerOut, NumError> {
    let lv = hv.layers.get(j).ok_or_else(|| NumError::Contract(format!("head layer {j} not bound")))?;
    let run = |t: &mut Tape| -> Result<LayerOut, NumError> {
        let x = t.layer_norm(a_prev, Some(lv.ln.0), Some(lv.ln.1), LN_EPS)?;
        let m = mol::mol_layer(t, x, s, vis, p_emb, &lv.mol, enable_mol)?;
        let (readout, mem_probs) = msm::refine(t, x, retrieved, lv.mem_q)?;
        let delta = t.add(m.mix, readout)?;
        let a = t.sub(a_prev, delta)?;
        let gates = m.alpha_s.zip(m.alpha_v);
        let mut probs = m.probs;
        probs.extend(mem_probs);
        Ok(LayerOut { a, fused: m.mix, readout, gates, probs })
    };
    run(t).map_err(tag_layer(j))
}

/// Conditioning for one observation: per head layer, the averaged backbone
/// query states and visual states.
pub struct Conditioning {
    pub queries: Vec<Var>,
    pub visual: Vec<Var>,
}

pub struct DenoiseOut {
    pub a_r: Var,
    pub layers: Vec<LayerOut>,
}

impl DenoiseOut {
    pub fn gate_reports(&self, t: &Tape) -> Vec<GateReport> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(j, l)| {
                l.gates.map(|(s, v)| GateReport { layer: j, alpha_s: t.value(s).data().to_vec(), alpha_v: t.value(v).data().to_vec() })
            })
            .collect()
    }
}

/// Full head: embed, layers, linear decode, `a_r = a_n − D`.
pub fn denoise(
    t: &mut Tape,
    hv: &HeadVars,
    cond: &Conditioning,
    a_n: Var,
    proprio: Var,
    retrieved: Option<&Retrieved>,
    enable_mol: bool,
) -> Result<DenoiseOut, NumError> {
    if cond.queries.len() != hv.layers.len() || cond.visual.len() != hv.layers.len() {
        return Err(NumError::Contract(format!(
            "conditioning for {} layers, head has {}",
            cond.queries.len(),
            hv.layers.len()
        )));
    }
    let (mut a, p_emb) = embed_inputs(t, hv, a_n, proprio)?;
    let mut layers = Vec::with_capacity(hv.layers.len());
    for j in 0..hv.layers.len() {
        let out = head_layer(t, hv, j, a, cond.queries[j], cond.visual[j], p_emb, retrieved, enable_mol)?;
        a = out.a;
        layers.push(out);
    }
    let d = linear(t, a, hv.decode.0, Some(hv.decode.1))?;
    let a_r = t.sub(a_n, d)?;
    Ok(DenoiseOut { a_r, layers })
}

/// Mean absolute reconstruction error against the expert chunk.
pub fn loss(t: &mut Tape, a_g: Var, out: &DenoiseOut) -> Result<Var, NumError> {
    t.l1(a_g, out.a_r)
}

/// Row-major chunk as an array.
pub fn chunk_array(rows: &[[f64; 3]]) -> DenseArray {
    DenseArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).expect("non-empty chunk")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msm::{project_retrieved, SkillEntry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> HeadConfig {
        HeadConfig { n_layers: 2, d_k: 4, n_heads: 2, horizon: 2, d_a: 3, d_p: 3 }
    }

    const DB: usize = 6;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_params(&mut s, &cfg(), DB, &mut rng).unwrap();
        s
    }

    struct Fixture {
        s: Vec<DenseArray>,
        v: Vec<DenseArray>,
        a_n: DenseArray,
        p: DenseArray,
        a_g: DenseArray,
        mem: Vec<SkillEntry>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Fixture {
            s: (0..2).map(|_| DenseArray::randn(3, DB, 1.0, &mut rng)).collect(),
            v: (0..2).map(|_| DenseArray::randn(5, DB, 1.0, &mut rng)).collect(),
            a_n: DenseArray::randn(2, 3, 1.0, &mut rng),
            p: DenseArray::row(&[0.3, 0.6, -1.0]),
            a_g: DenseArray::randn(2, 3, 0.1, &mut rng),
            mem: (0..2)
                .map(|i| SkillEntry { key: vec![0.0], value: (0..6).map(|_| rng.gen_range(-0.1..0.1)).collect(), traj_id: i, t: 0 })
                .collect(),
        }
    }

    fn forward(t: &mut Tape, p: &ParamStore, fx: &Fixture, with_mem: bool, enable_mol: bool) -> Result<(DenoiseOut, Var, Var), NumError> {
        let hv = HeadVars::bind(t, p, &cfg())?;
        let cond = Conditioning {
            queries: fx.s.iter().map(|a| t.constant(a.clone())).collect::<Result<_, _>>()?,
            visual: fx.v.iter().map(|a| t.constant(a.clone())).collect::<Result<_, _>>()?,
        };
        let a_n = t.constant(fx.a_n.clone())?;
        let pr = t.constant(fx.p.clone())?;
        let refs: Vec<&SkillEntry> = if with_mem { fx.mem.iter().collect() } else { vec![] };
        let r = project_retrieved(t, p, &refs, 2, 3)?;
        let out = denoise(t, &hv, &cond, a_n, pr, r.as_ref(), enable_mol)?;
        let a_g = t.constant(fx.a_g.clone())?;
        let l = loss(t, a_g, &out)?;
        Ok((out, l, a_n))
    }

    #[test]
    fn group_mapping() {
        let g: Vec<_> = (0..4).map(|j| layer_group(j, 12, 4)).collect();
        assert_eq!(g, vec![0..3, 3..6, 6..9, 9..12]);
        assert_eq!(layer_group(0, 3, 2), 0..1);
        assert_eq!(layer_group(1, 3, 2), 1..3);
        assert_eq!(layer_group(3, 3, 4), 2..3);
    }

    #[test]
    fn embedding_shapes_and_temporal_offsets() {
        let c = HeadConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        init_params(&mut p, &c, 64, &mut rng).unwrap();
        let mut t = Tape::new();
        let hv = HeadVars::bind(&mut t, &p, &c).unwrap();
        let a_n = t.constant(DenseArray::full(8, 3, 0.25)).unwrap();
        let pr = t.constant(DenseArray::row(&[0.1, 0.2, 1.0])).unwrap();
        let (a0, pe) = embed_inputs(&mut t, &hv, a_n, pr).unwrap();
        assert_eq!(t.value(a0).shape(), &[8, 64]);
        assert_eq!(t.value(pe).shape(), &[1, 64]);
        let te = sinusoidal(8, 64);
        for c in 0..64 {
            let d = t.value(a0).get(3, c) - t.value(a0).get(1, c);
            assert!((d - (te.get(3, c) - te.get(1, c))).abs() < 1e-12);
        }
        let bad = t.constant(DenseArray::full(5, 3, 0.0)).unwrap();
        assert!(embed_inputs(&mut t, &hv, bad, pr).is_err());
    }

    #[test]
    fn zero_decode_returns_noise() {
        let mut p = store(2);
        p.values_mut("head.decode.w").unwrap().iter_mut().for_each(|v| *v = 0.0);
        let fx = fixture(3);
        let mut t = Tape::new();
        let (out, _, a_n) = forward(&mut t, &p, &fx, true, true).unwrap();
        assert_eq!(t.value(out.a_r).data(), t.value(a_n).data());
        assert_eq!(t.value(out.a_r).shape(), &[2, 3]);
    }

    #[test]
    fn zero_branches_make_layers_identity() {
        let mut p = store(4);
        for j in 0..2 {
            for b in ["s", "v", "a"] {
                p.values_mut(&mol::name(j, &format!("{b}.wo"))).unwrap().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for w in ["msm.val_v", "msm.val_v_b"] {
            p.values_mut(w).unwrap().iter_mut().for_each(|v| *v = 0.0);
        }
        let fx = fixture(5);
        let mut t = Tape::new();
        let (out, _, _) = forward(&mut t, &p, &fx, true, true).unwrap();
        let hv = HeadVars::bind(&mut t, &p, &cfg()).unwrap();
        let a_n = t.constant(fx.a_n.clone()).unwrap();
        let pr = t.constant(fx.p.clone()).unwrap();
        let (a0, _) = embed_inputs(&mut t, &hv, a_n, pr).unwrap();
        for l in &out.layers {
            assert_eq!(t.value(l.a).data(), t.value(a0).data());
        }
    }

    #[test]
    fn empty_memory_subtracts_fusion_only() {
        let p = store(6);
        let fx = fixture(7);
        let mut t = Tape::new();
        let (out, _, _) = forward(&mut t, &p, &fx, false, true).unwrap();
        let hv = HeadVars::bind(&mut t, &p, &cfg()).unwrap();
        let a_n = t.constant(fx.a_n.clone()).unwrap();
        let pr = t.constant(fx.p.clone()).unwrap();
        let (a0, _) = embed_inputs(&mut t, &hv, a_n, pr).unwrap();
        let l0 = &out.layers[0];
        assert!(t.value(l0.readout).data().iter().all(|&v| v == 0.0));
        let want = t.sub(a0, l0.fused).unwrap();
        assert_eq!(t.value(l0.a).data(), t.value(want).data());
    }

    #[test]
    fn loss_equals_l1_of_reconstruction() {
        let p = store(8);
        let fx = fixture(9);
        let mut t = Tape::new();
        let (out, l, _) = forward(&mut t, &p, &fx, true, true).unwrap();
        let a_r = t.value(out.a_r);
        let n = a_r.len() as f64;
        let manual: f64 = a_r.data().iter().zip(fx.a_g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        assert!((t.scalar(l) - manual).abs() <= 1e-15);
    }

    #[test]
    fn contrived_decode_gives_zero_loss() {
        let mut p = store(10);
        let fx = fixture(11);
        p.values_mut("head.decode.w").unwrap().iter_mut().for_each(|v| *v = 0.0);
        // With a zero weight the decode is its bias, broadcast across rows;
        // pick a_g = a_n − bias for a constant-row chunk.
        let bias = [0.3, -0.2, 0.1];
        p.values_mut("head.decode.b").unwrap().copy_from_slice(&bias);
        let mut fx = fx;
        fx.a_g = DenseArray::from_rows(&(0..2).map(|r| (0..3).map(|c| fx.a_n.get(r, c) - bias[c]).collect()).collect::<Vec<_>>()).unwrap();
        let mut t = Tape::new();
        let (_, l, _) = forward(&mut t, &p, &fx, true, true).unwrap();
        assert!(t.scalar(l).abs() < 1e-15);
    }

    #[test]
    fn folded_gaussian_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 200_000;
        let a = DenseArray::randn(n, 1, 1.0, &mut rng);
        let mean: f64 = a.data().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        assert!((mean - (2.0 / std::f64::consts::PI).sqrt()).abs() < 5e-3);
    }

    #[test]
    fn head_gradcheck_covers_every_group() {
        let mut p = store(13);
        // Move gates off their symmetric init.
        for j in 0..2 {
            p.values_mut(&mol::name(j, "alpha_v")).unwrap().copy_from_slice(&[0.3, -0.5]);
        }
        let fx = fixture(14);
        let f = |t: &mut Tape, p: &ParamStore| forward(t, p, &fx, true, true).map(|r| {
            let _ = r.0;
            r.1
        });
        let only = |n: &str| n != msm::KEY_PROJ;
        let report = crate::tensor::grad_check_with(f, &mut p, 1e-5, 1e-4, Some(&only), 1).unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
        for g in ["head.embed.w", "head.decode.w", "msm.val_k", "msm.val_v", "head.l0.mol.w_s", "head.l1.mol.alpha_v", "head.l0.msm.wq"] {
            assert!(report.get(g).is_some_and(|c| c.checked > 0), "{g}");
        }
    }

    #[test]
    fn reduced_fusion_still_differentiable() {
        let mut p = store(15);
        let fx = fixture(16);
        let f = |t: &mut Tape, p: &ParamStore| forward(t, p, &fx, true, false).map(|r| r.1);
        let only = |n: &str| n.contains(".s.") || n.contains("proj_s") || n.starts_with("head.embed");
        let report = crate::tensor::grad_check_with(f, &mut p, 1e-5, 1e-4, Some(&only), 1).unwrap();
        assert!(report.passed());
    }
}
