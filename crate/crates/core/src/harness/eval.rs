//! Seeded closed-loop rollouts of a trained policy.

use super::{HarnessError, RunConfig};
use crate::env::dataset::trajectory_seed;
use crate::env::vocab::{SynonymTable, NOVEL_TYPES};
use crate::env::{reset, rephrase_task, step, success_check, swap_novel_object, TaskSpec};
use crate::mol::GateReport;
use crate::msm::SkillMemory;
use crate::policy::{policy_forward, PolicyConfig};
use crate::tensor::ParamStore;

/// Keeps evaluation episodes away from the dataset's trajectory seeds.
const EVAL_SALT: u64 = 0x00E7_A1E7_A1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    InDist,
    Rephrased,
    NovelObject,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::InDist, Variant::Rephrased, Variant::NovelObject];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::InDist => "in-dist",
            Variant::Rephrased => "rephrased",
            Variant::NovelObject => "novel-object",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub index: usize,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub ticks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub success_rate: f64,
    pub episodes: Vec<EpisodeLog>,
}

/// Relative performance drop in percent; zero when the reference is zero.
pub fn drop_pct(in_dist: f64, variant: f64) -> f64 {
    if in_dist == 0.0 {
        0.0
    } else {
        (in_dist - variant) / in_dist * 100.0
    }
}

/// Seed of evaluation episode `i`.
pub fn episode_seed(seed_eval: u64, i: usize) -> u64 {
    trajectory_seed(seed_eval ^ EVAL_SALT, i as u64)
}

/// Task of episode `i` under a variant.
pub fn episode_task(cfg: &RunConfig, variant: Variant, i: usize) -> Result<TaskSpec, HarnessError> {
    let tasks = cfg.task_specs();
    if tasks.is_empty() {
        return Err(HarnessError::Usage("no tasks configured".into()));
    }
    let base = &tasks[i % tasks.len()];
    Ok(match variant {
        Variant::InDist => base.clone(),
        Variant::Rephrased => rephrase_task(base, &SynonymTable::standard(), episode_seed(cfg.seed_eval, i)),
        Variant::NovelObject => swap_novel_object(base, NOVEL_TYPES[i % NOVEL_TYPES.len()].0)?,
    })
}

/// One rollout: plan a chunk, execute up to `exec_horizon` of it, repeat
/// until success or the step budget runs out. `on_tick` sees every
/// tick's gate reports.
pub fn run_episode(
    params: &ParamStore,
    pcfg: &PolicyConfig,
    mem: &SkillMemory,
    task: &TaskSpec,
    seed: u64,
    exec_horizon: usize,
    mut on_tick: impl FnMut(&[GateReport]),
) -> Result<(bool, usize, usize), HarnessError> {
    let mut state = reset(task, seed)?;
    let (mut steps, mut ticks) = (0, 0);
    while steps < task.max_steps {
        let noise_seed = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(ticks as u64);
        let out = policy_forward(params, pcfg, mem, &state, &task.instruction, noise_seed)?;
        on_tick(&out.gate_reports);
        ticks += 1;
        for a in out.actions().into_iter().take(exec_horizon.max(1)) {
            state = step(&state, a);
            steps += 1;
            if success_check(&state, task) {
                return Ok((true, steps, ticks));
            }
            if steps >= task.max_steps {
                break;
            }
        }
    }
    Ok((false, steps, ticks))
}

pub fn evaluate(
    params: &ParamStore,
    pcfg: &PolicyConfig,
    mem: &SkillMemory,
    cfg: &RunConfig,
    variant: Variant,
    n_episodes: usize,
) -> Result<EvalReport, HarnessError> {
    if n_episodes == 0 {
        return Err(HarnessError::Usage("need at least one episode".into()));
    }
    let mut episodes = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let task = episode_task(cfg, variant, i)?;
        let seed = episode_seed(cfg.seed_eval, i);
        let (success, steps, ticks) = run_episode(params, pcfg, mem, &task, seed, cfg.exec_horizon, |_| {})?;
        episodes.push(EpisodeLog { index: i, seed, success, steps, ticks });
    }
    let wins = episodes.iter().filter(|e| e.success).count();
    Ok(EvalReport { variant, success_rate: wins as f64 / n_episodes as f64, episodes })
}
