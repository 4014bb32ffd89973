//! Small building blocks shared by the backbone and the action head.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{DenseArray, NumError, ParamStore, Tape, Var};

/// Inserts a `[rows × cols]` Gaussian matrix.
pub fn init_matrix<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
    trainable: bool,
    rng: &mut R,
) -> Result<(), NumError> {
    store.insert(name, DenseArray::randn(rows, cols, std, rng), trainable)
}

pub fn init_const(store: &mut ParamStore, name: &str, rows: usize, cols: usize, v: f64, trainable: bool) -> Result<(), NumError> {
    store.insert(name, DenseArray::full(rows, cols, v), trainable)
}

/// `x · w + b` with `b` a `[1 × out]` row.
pub fn linear(t: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumError> {
    let y = t.matmul(x, w)?;
    match b {
        Some(b) => t.add_row(y, b),
        None => Ok(y),
    }
}

pub fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Output of a multi-head attention site.
pub struct Attention {
    pub out: Var,
    /// Per-head `[T × n]` attention matrices.
    pub probs: Vec<Var>,
}

/// Scaled dot-product attention split over `n_heads` column blocks.
///
/// With `gate`, head `h`'s logits are multiplied by the `[1 × 1]` value
/// `gate[h]` before the softmax.
pub fn multi_head(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    gate: Option<&[Var]>,
) -> Result<Attention, NumError> {
    let d = t.value(q).cols();
    if d % n_heads != 0 {
        return Err(NumError::Shape(format!("width {d} not divisible by {n_heads} heads")));
    }
    if let Some(g) = gate {
        if g.len() != n_heads {
            return Err(NumError::Shape(format!("gate has {} entries for {n_heads} heads", g.len())));
        }
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                t.slice_cols(q, h * dh, (h + 1) * dh)?,
                t.slice_cols(k, h * dh, (h + 1) * dh)?,
                t.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let logits = t.matmul_nt(qh, kh)?;
        let mut logits = t.scale(logits, scale)?;
        if let Some(g) = gate {
            logits = t.scale_by(logits, g[h])?;
        }
        let p = t.softmax_rows(logits)?;
        heads.push(t.matmul(p, vh)?);
        probs.push(p);
    }
    let out = if n_heads == 1 { heads[0] } else { t.concat_cols(&heads)? };
    Ok(Attention { out, probs })
}

/// Splits a `[1 × n]` row into `n` scalar handles.
pub fn split_scalars(t: &mut Tape, row: Var) -> Result<Vec<Var>, NumError> {
    let n = t.value(row).cols();
    (0..n).map(|i| t.slice_cols(row, i, i + 1)).collect()
}

/// Fixed sinusoidal encoding, `[len × width]`.
pub fn sinusoidal(len: usize, width: usize) -> DenseArray {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
            data[pos * width + 2 * i] = (pos as f64 * freq).sin();
            data[pos * width + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    DenseArray::matrix(len, width, data).expect("positive extents")
}

/// Row sums of a `[r × c]` array.
pub fn row_sums(a: &DenseArray) -> Vec<f64> {
    (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect()
}
