//! The subcommands, as library calls. `main` only parses flags and prints.

use std::collections::BTreeMap;
use std::path::Path;

use super::checkpoint::{self, check_compatible, TrainState};
use super::eval::{drop_pct, episode_seed, episode_task, evaluate, run_episode, EvalReport, Variant};
use super::train::{fresh_state, train, TrainSummary};
use super::{HarnessError, RunConfig};
use crate::env::dataset::{generate_dataset, read_dataset, write_dataset, Dataset};
use crate::msm::{key_value_correlation, Metric};

/// Generates and writes the demonstration set; returns the record count.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<usize, HarnessError> {
    cfg.validate()?;
    let data = generate_dataset(cfg.n_traj, &cfg.task_specs(), cfg.seed_data)?;
    write_dataset(&cfg.dataset, &data)?;
    Ok(data.records.len())
}

/// Loads a checkpoint and checks it matches `cfg`'s architecture.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(RunConfig, TrainState), HarnessError> {
    let (ckpt_cfg, state) = checkpoint::load(path)?;
    check_compatible(cfg, &ckpt_cfg)?;
    Ok((ckpt_cfg, state))
}

/// Trains from scratch, or continues from `cfg.checkpoint` when `resume`.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary, HarnessError> {
    cfg.validate()?;
    let data = read_dataset(&cfg.dataset)?;
    train_on(cfg, &data, resume)
}

fn train_on(cfg: &RunConfig, data: &Dataset, resume: bool) -> Result<TrainSummary, HarnessError> {
    let state = if resume {
        let (ckpt_cfg, state) = load_checkpoint(cfg, &cfg.checkpoint)?;
        if ckpt_cfg.unfreeze_backbone != cfg.unfreeze_backbone {
            return Err(HarnessError::Version("checkpoint was trained with a different backbone freezing mode".into()));
        }
        state
    } else {
        fresh_state(cfg)?
    };
    Ok(train(cfg, data, state, resume)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// In-distribution rate and relative drop, for the shifted variants.
    pub reference: Option<(f64, f64)>,
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, variant: Variant, n_episodes: usize) -> Result<EvalOutcome, HarnessError> {
    cfg.validate()?;
    let (_, state) = load_checkpoint(cfg, ckpt)?;
    let pcfg = cfg.policy();
    let report = evaluate(&state.params, &pcfg, &state.memory, cfg, variant, n_episodes)?;
    let reference = if variant == Variant::InDist {
        None
    } else {
        let base = evaluate(&state.params, &pcfg, &state.memory, cfg, Variant::InDist, n_episodes)?;
        Some((base.success_rate, drop_pct(base.success_rate, report.success_rate)))
    };
    Ok(EvalOutcome { report, reference })
}

/// The four module combinations, in table order.
pub const ABLATIONS: [(&str, bool, bool); 4] =
    [("no-mol-no-msm", false, false), ("msm-only", false, true), ("mol-only", true, false), ("full", true, true)];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub enable_mol: bool,
    pub enable_msm: bool,
    /// Success rate per seed, in the order given.
    pub rates: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }

    pub fn range(&self) -> (f64, f64) {
        let lo = self.rates.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Config of one ablation run: seed `s` offsets the model and training
/// seeds; the dataset and evaluation seeds stay fixed.
pub fn seeded(cfg: &RunConfig, s: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed_model = cfg.seed_model.wrapping_add(s);
    c.seed_train = cfg.seed_train.wrapping_add(s);
    c
}

/// Trains and evaluates every flag combination for every seed. Run
/// artifacts go under `out/<name>-seed<s>/`.
pub fn cmd_ablate(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<AblationRow>, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Usage("ablation needs at least one seed".into()));
    }
    cfg.validate()?;
    let data = read_dataset(&cfg.dataset)?;
    let mut rows = Vec::new();
    for (name, mol, msm) in ABLATIONS {
        let mut rates = Vec::new();
        for &s in seeds {
            let mut c = seeded(cfg, s);
            c.enable_mol = mol;
            c.enable_msm = msm;
            let dir = out.join(format!("{name}-seed{s}"));
            std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
            c.checkpoint = dir.join("checkpoint.bin");
            c.metrics = dir.join("metrics.csv");
            let (state, _) = train(&c, &data, fresh_state(&c)?, false)?;
            let r = evaluate(&state.params, &c.policy(), &state.memory, &c, Variant::InDist, c.eval_episodes)?;
            rates.push(r.success_rate);
        }
        rows.push(AblationRow { name, enable_mol: mol, enable_msm: msm, rates });
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,mol,msm,mean_success,min,max\n");
    for r in rows {
        let (lo, hi) = r.range();
        s.push_str(&format!("{},{},{},{:.4},{:.4},{:.4}\n", r.name, r.enable_mol, r.enable_msm, r.mean(), lo, hi));
    }
    s
}

/// Gate values of one evaluation episode, averaged over control ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRow {
    pub layer: usize,
    pub head: usize,
    pub alpha_s: f64,
    pub alpha_v: f64,
}

pub fn cmd_inspect_gates(cfg: &RunConfig, ckpt: &Path, episode: usize) -> Result<Vec<GateRow>, HarnessError> {
    let (_, state) = load_checkpoint(cfg, ckpt)?;
    let pcfg = cfg.policy();
    let task = episode_task(cfg, Variant::InDist, episode)?;
    let mut sums: BTreeMap<(usize, usize), (f64, f64, usize)> = BTreeMap::new();
    run_episode(&state.params, &pcfg, &state.memory, &task, episode_seed(cfg.seed_eval, episode), cfg.exec_horizon, |reports| {
        for r in reports {
            for (h, (s, v)) in r.alpha_s.iter().zip(&r.alpha_v).enumerate() {
                let e = sums.entry((r.layer, h)).or_insert((0.0, 0.0, 0));
                e.0 += s;
                e.1 += v;
                e.2 += 1;
            }
        }
    })?;
    if sums.is_empty() {
        return Err(HarnessError::Usage("this model has no gates (layer mixing disabled)".into()));
    }
    Ok(sums
        .into_iter()
        .map(|((layer, head), (s, v, n))| GateRow { layer, head, alpha_s: s / n as f64, alpha_v: v / n as f64 })
        .collect())
}

pub fn format_gates(rows: &[GateRow]) -> String {
    let mut s = String::from("layer,head,alpha_s,alpha_v\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6}\n", r.layer, r.head, r.alpha_s, r.alpha_v));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryReport {
    pub entries: usize,
    pub l1: f64,
    pub cosine: f64,
}

pub fn cmd_inspect_memory(cfg: &RunConfig, ckpt: &Path, n_probes: usize) -> Result<MemoryReport, HarnessError> {
    let (_, state) = load_checkpoint(cfg, ckpt)?;
    let mem = &state.memory;
    Ok(MemoryReport {
        entries: mem.len(),
        l1: key_value_correlation(mem, n_probes, Metric::L1, cfg.seed_eval)?,
        cosine: key_value_correlation(mem, n_probes, Metric::Cosine, cfg.seed_eval)?,
    })
}
