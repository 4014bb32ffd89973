use std::collections::BTreeMap;

use super::{NumError, ParamStore};
use crate::codec::{Reader, Writer};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable entry from its gradient. Frozen entries are
    /// not touched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), NumError> {
        let names = params.trainable_names();
        for name in &names {
            if params.grad(name).is_none() {
                return Err(NumError::Contract(format!("trainable `{name}` has no gradient")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for name in names {
            let g = params.grad(&name).expect("checked above").to_vec();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = params.values_mut(&name)?;
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn encode(&self, w: &mut Writer) {
        w.f64(self.lr);
        w.f64(self.beta1);
        w.f64(self.beta2);
        w.f64(self.eps);
        w.u64(self.step);
        w.u64(self.moments.len() as u64);
        for (name, (m, v)) in &self.moments {
            w.str(name);
            w.u64(m.len() as u64);
            w.f64s(m);
            w.f64s(v);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, NumError> {
        let mut opt = Adam::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        opt.step = r.u64()?;
        let n = r.u64()?;
        for _ in 0..n {
            let name = r.str()?;
            let len = r.u64()? as usize;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            opt.moments.insert(name, (m, v));
        }
        Ok(opt)
    }
}
