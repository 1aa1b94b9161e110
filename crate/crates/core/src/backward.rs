//! Core gradients, early aggregation of duplicate rows, and the fused update.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lookup::{OpCounters, ReuseState};
use crate::scalar::Scalar;
use crate::tt::{chain_step, first_slice, slice_row, TtShape, TtTable};

/// Per-occurrence embedding gradients, `grads` is `indices.len() x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbGradBatch<T> {
    indices: Vec<usize>,
    grads: Vec<T>,
    cols: usize,
}

impl<T: Scalar> EmbGradBatch<T> {
    pub fn new(indices: Vec<usize>, grads: Vec<T>, cols: usize) -> Result<Self> {
        if cols == 0 || grads.len() != indices.len() * cols {
            return Err(Error::LengthMismatch(format!(
                "{} indices but {} gradient values at width {cols}",
                indices.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("embedding gradients".into()));
        }
        Ok(Self { indices, grads, cols })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn grads(&self) -> &[T] {
        &self.grads
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn grad(&self, i: usize) -> &[T] {
        &self.grads[i * self.cols..(i + 1) * self.cols]
    }
}

/// One summed gradient per distinct row, in first-occurrence order.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedGrads<T> {
    pub indices: Vec<usize>,
    pub grads: Vec<T>,
    pub cols: usize,
}

impl<T: Scalar> AggregatedGrads<T> {
    pub fn grad(&self, u: usize) -> &[T] {
        &self.grads[u * self.cols..(u + 1) * self.cols]
    }
}

/// Merges gradients of repeated rows, summing left to right.
pub fn unique_aggregate<T: Scalar>(batch: &EmbGradBatch<T>) -> Result<AggregatedGrads<T>> {
    if batch.indices.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    let cols = batch.cols;
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut indices = Vec::new();
    let mut grads: Vec<T> = Vec::new();
    for (occ, &row) in batch.indices.iter().enumerate() {
        let g = batch.grad(occ);
        match slot.get(&row) {
            Some(&u) => {
                for (acc, &v) in grads[u * cols..(u + 1) * cols].iter_mut().zip(g) {
                    *acc = *acc + v;
                }
            }
            None => {
                slot.insert(row, indices.len());
                indices.push(row);
                grads.extend_from_slice(g);
            }
        }
    }
    Ok(AggregatedGrads { indices, grads, cols })
}

/// Gradients congruent to a table's cores.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreGrads<T> {
    cores: Vec<Vec<T>>,
}

impl<T: Scalar> CoreGrads<T> {
    pub fn zeros(shape: &TtShape) -> Self {
        Self { cores: (0..shape.d()).map(|k| vec![T::zero(); shape.core_len(k)]).collect() }
    }

    pub fn cores(&self) -> &[Vec<T>] {
        &self.cores
    }

    pub fn core(&self, k: usize) -> &[T] {
        &self.cores[k]
    }

    fn congruent(&self, shape: &TtShape) -> bool {
        self.cores.len() == shape.d()
            && self.cores.iter().enumerate().all(|(k, c)| c.len() == shape.core_len(k))
    }
}

/// Slice products needed per distinct row by [`tt_core_grads`].
///
/// Left and right partial chains cost `d - 2` products each; the per-core
/// contraction with the embedding gradient costs two products for interior
/// cores and one for the two boundary cores. A reuse buffer supplies the left
/// chain of the last core of a three-core table for free.
pub fn mults_per_row(d: usize, with_buffer: bool) -> u64 {
    let base = (4 * d - 6) as u64;
    if with_buffer && d == 3 {
        base - 1
    } else {
        base
    }
}

/// Gradients of the cores for the given rows and their embedding gradients.
///
/// For core `k` and row digits `(i_1..i_d)` the contribution to the slice at
/// `i_k` is `L^T * g_k * R^T`, where `L` is the chained product of the slices
/// to the left, `R` of those to the right, and `g_k` the embedding gradient
/// reshaped so that column digit `j_k` is the middle axis. Contributions are
/// accumulated in 64-bit and rounded once.
pub fn tt_core_grads<T: Scalar>(
    table: &TtTable<T>,
    indices: &[usize],
    grads: &[T],
    reuse: Option<&ReuseState<T>>,
    counters: &mut OpCounters,
) -> Result<CoreGrads<T>> {
    let shape = table.shape();
    let (d, cols) = (shape.d(), shape.cols());
    if grads.len() != indices.len() * cols {
        return Err(Error::LengthMismatch(format!(
            "{} rows but {} gradient values at width {cols}",
            indices.len(),
            grads.len()
        )));
    }
    let reuse = reuse.filter(|_| d == 3);
    let mut acc: Vec<Vec<f64>> = (0..d).map(|k| vec![0.0; shape.core_len(k)]).collect();

    // products of n over the column digits to the left / right of core k
    let left_cols: Vec<usize> = (0..d).map(|k| shape.n()[..k].iter().product()).collect();
    let right_cols: Vec<usize> = (0..d).map(|k| shape.n()[k + 1..].iter().product()).collect();

    for (u, &row) in indices.iter().enumerate() {
        let digits = table.digits(row)?;
        let g = &grads[u * cols..(u + 1) * cols];

        // left[k]: left_cols[k] x R_k
        let mut left: Vec<Vec<T>> = Vec::with_capacity(d);
        left.push(vec![T::one()]);
        left.push(first_slice(shape, table.core(0), digits[0]));
        for k in 2..d {
            let next = match reuse {
                Some(state) if k == 2 => {
                    let prefix = row / shape.m()[2];
                    let slot = state.plan.slot_of(prefix).ok_or_else(|| {
                        Error::PlanMismatch(format!("row {row} prefix has no buffer slot"))
                    })?;
                    if slot >= state.buffer.len()
                        || state.buffer.slot_width() != left_cols[2] * shape.ranks()[2]
                    {
                        return Err(Error::PlanMismatch("buffer does not match the table".into()));
                    }
                    state.buffer.slot(slot).to_vec()
                }
                _ => chain_step(&left[k - 1], left_cols[k - 1], shape, table.core(k - 1), k - 1, digits[k - 1]),
            };
            left.push(next);
        }

        // right[k]: R_{k+1} x right_cols[k]
        let mut right: Vec<Vec<T>> = vec![Vec::new(); d];
        right[d - 1] = vec![T::one()];
        for k in (0..d - 1).rev() {
            let core = k + 1;
            let (r_in, _, r_out) = shape.core_dims(core);
            let (n_c, q) = (shape.n()[core], right_cols[core]);
            let mut m = vec![T::zero(); r_in * n_c * q];
            for a in 0..r_in {
                let s = slice_row(shape, table.core(core), core, digits[core], a);
                for j in 0..n_c {
                    let dst = &mut m[(a * n_c + j) * q..(a * n_c + j + 1) * q];
                    for b in 0..r_out {
                        let x = s[j * r_out + b];
                        for (o, &r) in dst.iter_mut().zip(&right[core][b * q..(b + 1) * q]) {
                            *o = *o + x * r;
                        }
                    }
                }
            }
            right[k] = m;
        }

        for k in 0..d {
            let (r_in, mid, r_out) = shape.core_dims(k);
            let (p_cnt, n_k, q_cnt) = (left_cols[k], shape.n()[k], right_cols[k]);
            // t1[p][j][b] = sum_q g[p][j][q] * right[b][q]
            let mut t1 = vec![0.0f64; p_cnt * n_k * r_out];
            for p in 0..p_cnt {
                for j in 0..n_k {
                    let gpj = &g[(p * n_k + j) * q_cnt..(p * n_k + j + 1) * q_cnt];
                    for b in 0..r_out {
                        let rb = &right[k][b * q_cnt..(b + 1) * q_cnt];
                        t1[(p * n_k + j) * r_out + b] =
                            gpj.iter().zip(rb).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum();
                    }
                }
            }
            // grad[a][i_k * n_k + j][b] += sum_p left[p][a] * t1[p][j][b]
            let base = digits[k] * n_k;
            let core_acc = &mut acc[k];
            for a in 0..r_in {
                for j in 0..n_k {
                    for b in 0..r_out {
                        let mut s = 0.0;
                        for p in 0..p_cnt {
                            s += left[k][p * r_in + a].as_f64() * t1[(p * n_k + j) * r_out + b];
                        }
                        core_acc[(a * mid + base + j) * r_out + b] += s;
                    }
                }
            }
        }
        counters.slice_mults += mults_per_row(d, reuse.is_some());
    }

    Ok(CoreGrads {
        cores: acc.into_iter().map(|c| c.into_iter().map(T::from_f64).collect()).collect(),
    })
}

/// SGD with optional momentum; the velocity buffer exists iff `momentum > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    lr: T,
    momentum: T,
    velocity: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: f64, momentum: f64, shape: &TtShape) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} not in [0, 1)")));
        }
        let velocity = (momentum > 0.0)
            .then(|| (0..shape.d()).map(|k| vec![T::zero(); shape.core_len(k)]).collect());
        Ok(Self { lr: T::from_f64(lr), momentum: T::from_f64(momentum), velocity })
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn velocity(&self) -> Option<&[Vec<T>]> {
        self.velocity.as_deref()
    }
}

/// `v = momentum * v + g; core -= lr * v` (or `core -= lr * g`), one pass per core.
pub fn fused_update<T: Scalar>(
    table: &mut TtTable<T>,
    grads: &CoreGrads<T>,
    opt: &mut OptimizerState<T>,
) -> Result<()> {
    if !grads.congruent(table.shape()) {
        return Err(Error::InvalidShape("core gradients are not congruent to the table".into()));
    }
    if grads.cores.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("core gradients".into()));
    }
    let (lr, mu) = (opt.lr, opt.momentum);
    match opt.velocity.as_mut() {
        Some(velocity) => {
            for ((core, g), v) in table.cores_mut().iter_mut().zip(&grads.cores).zip(velocity) {
                for ((w, &gi), vi) in core.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = mu * *vi + gi;
                    *w = *w - lr * *vi;
                }
            }
        }
        None => {
            for (core, g) in table.cores_mut().iter_mut().zip(&grads.cores) {
                for (w, &gi) in core.iter_mut().zip(g) {
                    *w = *w - lr * gi;
                }
            }
        }
    }
    Ok(())
}

/// Aggregate, compute core gradients and update the table in place.
///
/// With `aggregate = false` every occurrence is pushed through the core
/// gradient computation separately, which is what the aggregation saves.
pub fn backward_batch<T: Scalar>(
    table: &mut TtTable<T>,
    batch: &EmbGradBatch<T>,
    reuse: Option<&ReuseState<T>>,
    opt: &mut OptimizerState<T>,
    aggregate: bool,
) -> Result<OpCounters> {
    if batch.cols != table.cols() {
        return Err(Error::LengthMismatch(format!(
            "gradient width {} vs table width {}",
            batch.cols,
            table.cols()
        )));
    }
    let mut counters = OpCounters::default();
    let grads = if aggregate {
        let agg = unique_aggregate(batch)?;
        tt_core_grads(table, &agg.indices, &agg.grads, reuse, &mut counters)?
    } else {
        if batch.indices.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        tt_core_grads(table, &batch.indices, &batch.grads, reuse, &mut counters)?
    };
    fused_update(table, &grads, opt)?;
    Ok(counters)
}
