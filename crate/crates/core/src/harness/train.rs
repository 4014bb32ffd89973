//! The imitation training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, TrainState};
use super::eval::{evaluate, Variant};
use super::metrics::MetricsWriter;
use super::{HarnessError, RunConfig};
use crate::env::dataset::Dataset;
use crate::head;
use crate::msm::{Exclusion, SkillEntry, SkillMemory};
use crate::policy::{
    self, build_context, condition_cached, condition_full, denoise_sample, memory_key, retrieve, sample_noise, ContextCache,
    PolicyConfig, PolicyVars,
};
use crate::tensor::{Adam, DenseArray, Tape};

/// One dataset position.
struct Sample {
    rec: usize,
    t: usize,
    traj_id: u64,
    proprio: [f64; 3],
    target: DenseArray,
    value: Vec<f64>,
}

/// Initial parameters, optimizer, memory and generator of a run.
pub fn fresh_state(cfg: &RunConfig) -> Result<TrainState, HarnessError> {
    let pcfg = cfg.policy();
    let mut params = policy::init_params(&pcfg)?;
    if cfg.unfreeze_backbone {
        params.set_trainable_prefix(crate::backbone::PREFIX, true);
    }
    Ok(TrainState {
        params,
        adam: Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps),
        memory: SkillMemory::new(cfg.capacity),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed_train),
        step: 0,
    })
}

pub struct Trainer<'d> {
    cfg: RunConfig,
    pcfg: PolicyConfig,
    data: &'d Dataset,
    samples: Vec<Sample>,
    caches: Vec<ContextCache>,
    pub state: TrainState,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &RunConfig, data: &'d Dataset, state: TrainState) -> Result<Self, HarnessError> {
        let pcfg = cfg.policy();
        let mut samples = Vec::with_capacity(data.n_positions());
        for (rec, t) in data.positions() {
            let r = &data.records[rec];
            let chunk = policy::normalize_chunk(&r.chunk(t, cfg.horizon));
            samples.push(Sample {
                rec,
                t,
                traj_id: r.traj_id,
                proprio: r.steps[t].proprio(),
                value: chunk.iter().flatten().copied().collect(),
                target: head::chunk_array(&chunk),
            });
        }
        if samples.is_empty() {
            return Err(HarnessError::Usage("dataset has no positions".into()));
        }
        // A frozen backbone sees each observation the same way at every
        // step, so its observation-only half is computed once.
        let caches = if cfg.unfreeze_backbone {
            Vec::new()
        } else {
            samples
                .iter()
                .map(|s| {
                    let r = &data.records[s.rec];
                    build_context(&state.params, &pcfg, &r.steps[s.t].state, &r.instruction)
                })
                .collect::<Result<_, _>>()?
        };
        Ok(Self { cfg: cfg.clone(), pcfg, data, samples, caches, state })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64, HarnessError> {
        let step_no = self.state.step + 1;
        let TrainState { params, adam, memory, rng, step } = &mut self.state;
        let n = self.samples.len();
        let idx: Vec<usize> = (0..self.cfg.batch).map(|_| rng.gen_range(0..n)).collect();
        let noise: Vec<DenseArray> = idx.iter().map(|_| sample_noise(&self.pcfg.head, rng)).collect();

        let mut t = Tape::new();
        let pv = PolicyVars::bind(&mut t, params, &self.pcfg)?;
        let mut conds = Vec::with_capacity(idx.len());
        let mut keys = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &self.samples[i];
            if self.caches.is_empty() {
                let r = &self.data.records[s.rec];
                let (c, pooled) = condition_full(&mut t, params, &self.pcfg, &pv, &r.steps[s.t].state, &r.instruction)?;
                keys.push(memory_key(params, &pooled)?);
                conds.push(c);
            } else {
                let cache = &self.caches[i];
                conds.push(condition_cached(&mut t, &self.pcfg, &pv, cache)?);
                keys.push(memory_key(params, &cache.pooled)?);
            }
        }
        if self.pcfg.enable_msm {
            for (&i, key) in idx.iter().zip(&keys) {
                let s = &self.samples[i];
                memory.insert(SkillEntry { key: key.clone(), value: s.value.clone(), traj_id: s.traj_id, t: s.t })?;
            }
        }
        let mut losses = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let s = &self.samples[i];
            let ex = Exclusion { traj_id: s.traj_id, t: s.t, window: self.pcfg.head.horizon };
            let got = retrieve(&self.pcfg, memory, &keys[k], Some(ex));
            let out = denoise_sample(&mut t, params, &self.pcfg, &pv, &conds[k], &noise[k], s.proprio, &got)?;
            let a_g = t.constant(s.target.clone())?;
            losses.push(head::loss(&mut t, a_g, &out)?);
        }
        let loss = if losses.len() == 1 { losses[0] } else { t.mean_stack(&losses)? };
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(HarnessError::NanLoss { step: step_no });
        }
        t.backward(loss)?;
        params.zero_grad();
        t.accumulate_into(params)?;
        adam.lr = self.cfg.lr_at(step_no);
        adam.step(params)?;
        params.clear_grad();
        *step = step_no;
        Ok(value)
    }
}

fn tag_nan(step: u64) -> impl Fn(HarnessError) -> HarnessError {
    move |e| match e {
        HarnessError::Num(crate::tensor::NumError::NonFinite { .. }) => HarnessError::NanLoss { step },
        other => other,
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub frozen_before: String,
    pub frozen_after: String,
    pub backbone_before: String,
    pub backbone_after: String,
    pub memory_len: usize,
}

/// Trains from `state` up to `cfg.steps`, writing metrics and checkpoints.
/// `resuming` keeps existing metrics rows up to the state's step.
pub fn train(cfg: &RunConfig, data: &Dataset, state: TrainState, resuming: bool) -> Result<(TrainState, TrainSummary), HarnessError> {
    let backbone_before = state.params.checksum(crate::backbone::PREFIX)?;
    let frozen_before = frozen_checksum(&state)?;
    let mut metrics = MetricsWriter::open(&cfg.metrics, cfg.log_wallclock, resuming.then_some(state.step))?;
    let mut trainer = Trainer::new(cfg, data, state)?;
    let (mut acc, mut count, mut last) = (0.0, 0u64, f64::NAN);
    while trainer.state.step < cfg.steps {
        let step = trainer.state.step + 1;
        let loss = trainer.step().map_err(tag_nan(step))?;
        last = loss;
        acc += loss;
        count += 1;
        let eval = if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let r = evaluate(&trainer.state.params, &cfg.policy(), &trainer.state.memory, cfg, Variant::InDist, cfg.eval_episodes)?;
            Some(r.success_rate)
        } else {
            None
        };
        if step % cfg.log_every == 0 || step == cfg.steps || eval.is_some() {
            metrics.row(step, Some(acc / count as f64), eval.map(|r| (r, Variant::InDist.as_str())))?;
            acc = 0.0;
            count = 0;
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            checkpoint::save(&cfg.checkpoint, cfg, &trainer.state)?;
        }
    }
    if trainer.state.step == 0 || cfg.steps == 0 {
        checkpoint::save(&cfg.checkpoint, cfg, &trainer.state)?;
    }
    let state = trainer.state;
    let summary = TrainSummary {
        steps: state.step,
        final_loss: last,
        frozen_after: frozen_checksum(&state)?,
        frozen_before,
        backbone_after: state.params.checksum(crate::backbone::PREFIX)?,
        backbone_before,
        memory_len: state.memory.len(),
    };
    Ok((state, summary))
}

fn frozen_checksum(state: &TrainState) -> Result<String, HarnessError> {
    if state.params.iter().any(|(_, _, trainable)| !trainable) {
        Ok(state.params.frozen_checksum()?)
    } else {
        Ok(String::new())
    }
}
