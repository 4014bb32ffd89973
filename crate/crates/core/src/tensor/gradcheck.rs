//! Central-difference verification of analytic gradients.

use super::{NumError, ParamStore, Tape, Var};

/// Gradients smaller than this are compared against the floor instead of
/// their own magnitude.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !(p.max_rel_err <= self.tol))
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape's gradient of `f` against central differences for
/// every trainable entry of `params`.
///
/// `f` records the loss on the given tape and must be deterministic in
/// `params`. Entries can be restricted with `only`; `stride` > 1 checks
/// every `stride`-th scalar of each entry (the first is always checked).
pub fn grad_check_with<F>(
    f: F,
    params: &mut ParamStore,
    h: f64,
    tol: f64,
    only: Option<&dyn Fn(&str) -> bool>,
    stride: usize,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = tape
        .bound_params()
        .filter(|(name, _)| params.is_trainable(name).unwrap_or(false))
        .map(|(name, v)| {
            let n = tape.value(v).len();
            (name.to_string(), tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]))
        })
        .collect();
    drop(tape);

    let eval = |p: &ParamStore| -> Result<f64, NumError> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        Ok(t.scalar(l))
    };

    let mut report = GradCheckReport { tol, params: Vec::new() };
    for name in params.trainable_names() {
        if let Some(pick) = only {
            if !pick(&name) {
                continue;
            }
        }
        let n = params.get(&name)?.len();
        let grads = analytic
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut check = ParamCheck { name: name.clone(), checked: 0, max_rel_err: 0.0, max_abs_err: 0.0 };
        for i in (0..n).step_by(stride.max(1)) {
            let orig = params.get(&name)?.data()[i];
            params.values_mut(&name)?[i] = orig + h;
            let up = eval(params);
            params.values_mut(&name)?[i] = orig - h;
            let down = eval(params);
            params.values_mut(&name)?[i] = orig;
            let numeric = (up? - down?) / (2.0 * h);
            let a = grads[i];
            check.checked += 1;
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Full check over every scalar of every trainable entry.
pub fn grad_check<F>(f: F, params: &mut ParamStore, h: f64, tol: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumError>,
{
    grad_check_with(f, params, h, tol, None, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseArray;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, r, c) in shapes {
            p.insert(name, DenseArray::randn(*r, *c, 1.0, rng), true).unwrap();
        }
        p
    }

    #[test]
    fn matmul_chain_is_exact_to_1e8() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = store(&mut rng, &[("a", 3, 4), ("b", 4, 2), ("c", 2, 3)]);
        let report = grad_check(
            |t, p| {
                let a = t.param(p, "a")?;
                let b = t.param(p, "b")?;
                let c = t.param(p, "c")?;
                let ab = t.matmul(a, b)?;
                let abc = t.matmul(ab, c)?;
                t.sum(abc)
            },
            &mut p,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err() < 1e-8);
    }

    #[test]
    fn corrupted_rule_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = store(&mut rng, &[("w", 2, 3)]);
        let report = grad_check(
            |t, p| {
                let w = t.param(p, "w")?;
                // x² with a deliberately wrong derivative 3x
                let sq = t.custom_unary(w, |x| x * x, |x, _, dy| x.iter().zip(dy).map(|(x, d)| 3.0 * x * d).collect())?;
                t.sum(sq)
            },
            &mut p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 1);
    }
}
