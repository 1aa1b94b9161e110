//! Miniature DLRM: bottom MLP, embedding layer, pairwise-dot interaction, top MLP.

mod checkpoint;
mod metrics;
mod mlp;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use metrics::{compute_metrics, Metrics};
pub use mlp::{Linear, LinearGrads, Mlp, MlpSpec, MlpTrace};

use serde::{Deserialize, Serialize};

use crate::backward::{tt_core_grads, unique_aggregate, AggregatedGrads, CoreGrads, EmbGradBatch, OptimizerState};
use crate::data::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::lookup::{forward_batch, IndexBag, OpCounters, ReuseState};
use crate::scalar::Scalar;
use crate::tt::{factorize_dims, DenseTable, TtShape, TtTable};
use mlp::MlpVelocity;

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_dense: usize,
    pub rows_per_field: Vec<usize>,
    pub embed_dim: usize,
    pub bottom_hidden: Vec<usize>,
    pub top_hidden: Vec<usize>,
    pub tt_cores: usize,
    pub tt_rank: usize,
    /// Fields with fewer rows keep an uncompressed table.
    pub tt_min_rows: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Target standard deviation of initial embedding entries.
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(n_dense: usize, rows_per_field: Vec<usize>) -> Self {
        Self {
            n_dense,
            rows_per_field,
            embed_dim: 8,
            bottom_hidden: vec![16],
            top_hidden: vec![16],
            tt_cores: 3,
            tt_rank: 8,
            tt_min_rows: 1000,
            loss: LossKind::Bce,
            seed: 0,
            init_std: 0.02,
        }
    }

    pub fn n_sparse(&self) -> usize {
        self.rows_per_field.len()
    }

    /// `D + C(s+1, 2)`.
    pub fn interaction_width(&self) -> usize {
        interaction_width(self.embed_dim, self.n_sparse())
    }

    pub fn uses_tt(&self, field: usize) -> bool {
        self.rows_per_field[field] >= self.tt_min_rows
    }

    pub fn tt_shape(&self, field: usize) -> Result<TtShape> {
        factorize_dims(self.rows_per_field[field], self.embed_dim, self.tt_cores)?.into_shape(self.tt_rank)
    }

    pub fn bottom_spec(&self) -> Result<MlpSpec> {
        let mut w = vec![self.n_dense];
        w.extend(&self.bottom_hidden);
        w.push(self.embed_dim);
        MlpSpec::new(w)
    }

    pub fn top_spec(&self) -> Result<MlpSpec> {
        let mut w = vec![self.interaction_width()];
        w.extend(&self.top_hidden);
        w.push(1);
        MlpSpec::new(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.tt_rank == 0 {
            return Err(Error::InvalidArgument("embedding dimension and rank must be positive".into()));
        }
        if self.rows_per_field.contains(&0) {
            return Err(Error::InvalidArgument("every field needs at least one row".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("init_std {}", self.init_std)));
        }
        self.bottom_spec()?;
        self.top_spec()?;
        for f in 0..self.n_sparse() {
            if self.uses_tt(f) {
                self.tt_shape(f)?;
            }
        }
        Ok(())
    }
}

pub fn interaction_width(embed_dim: usize, n_sparse: usize) -> usize {
    embed_dim + (n_sparse + 1) * n_sparse / 2
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingTable<T> {
    Tt(TtTable<T>),
    Dense(DenseTable<T>),
    /// Rows live outside the model (the pipeline's host store).
    Host { rows: usize },
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn rows(&self) -> usize {
        match self {
            Self::Tt(t) => t.rows(),
            Self::Dense(t) => t.rows(),
            Self::Host { rows } => *rows,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Tt(t) => t.cores().iter().map(Vec::len).sum(),
            Self::Dense(t) => t.data().len(),
            Self::Host { .. } => 0,
        }
    }
}

/// `[x, <v_i, v_j> for i < j]` over `v = (x, e_1, .., e_s)`.
pub fn feature_interaction<T: Scalar>(dense: &[T], embs: &[&[T]]) -> Result<Vec<T>> {
    let d = dense.len();
    if let Some(bad) = embs.iter().find(|e| e.len() != d) {
        return Err(Error::LengthMismatch(format!("embedding of width {} vs dense width {d}", bad.len())));
    }
    let mut out = Vec::with_capacity(interaction_width(d, embs.len()));
    out.extend_from_slice(dense);
    let vecs: Vec<&[T]> = std::iter::once(dense).chain(embs.iter().copied()).collect();
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            out.push(dot(vecs[i], vecs[j]));
        }
    }
    Ok(out)
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// One batch in model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch<T> {
    /// `batch x n_dense`.
    pub dense: Vec<T>,
    /// `bags[field][sample]`.
    pub bags: Vec<Vec<IndexBag>>,
    pub labels: Vec<f64>,
}

impl<T: Scalar> MiniBatch<T> {
    pub fn from_dataset(dataset: &Dataset, ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut dense = Vec::with_capacity(ids.len() * dataset.n_dense);
        let mut bags: Vec<Vec<IndexBag>> = vec![Vec::with_capacity(ids.len()); dataset.n_sparse()];
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            let s = dataset
                .samples
                .get(id)
                .ok_or(Error::IndexOutOfRange { index: id, len: dataset.len() })?;
            dense.extend(s.dense.iter().map(|&v| T::from_f64(v)));
            for (f, bag) in s.sparse.iter().enumerate() {
                bags[f].push(IndexBag::new(bag.clone())?);
            }
            labels.push(s.label);
        }
        Ok(Self { dense, bags, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gradient of one field's table.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldGrads<T> {
    Tt(CoreGrads<T>),
    Rows(AggregatedGrads<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub bottom: Vec<LinearGrads<T>>,
    pub top: Vec<LinearGrads<T>>,
    pub fields: Vec<FieldGrads<T>>,
}

/// Pooled embeddings of one batch, `pooled[field]` is `batch x D`.
#[derive(Debug, Clone)]
pub struct Embedded<T> {
    pub pooled: Vec<Vec<T>>,
    pub reuse: Vec<Option<ReuseState<T>>>,
    pub counters: OpCounters,
}

/// Everything the dense part of the model produces for one batch.
#[derive(Debug, Clone)]
pub struct HeadOutput<T> {
    /// Probabilities (BCE) or raw outputs (MSE).
    pub predictions: Vec<f64>,
    pub loss: f64,
    pub bottom: Vec<LinearGrads<T>>,
    pub top: Vec<LinearGrads<T>>,
    /// Gradient of the loss w.r.t. each field's pooled embeddings.
    pub d_pooled: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepOutput {
    pub metrics: Metrics,
    pub counters: OpCounters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DlrmModel<T> {
    config: ModelConfig,
    bottom: Mlp<T>,
    top: Mlp<T>,
    tables: Vec<EmbeddingTable<T>>,
}

/// Plain SGD on one row; shared by the model and the pipeline's host store
/// so both paths round identically.
pub fn sgd_row<T: Scalar>(row: &mut [T], grad: &[T], lr: T) {
    for (w, &g) in row.iter_mut().zip(grad) {
        *w = *w - lr * g;
    }
}

pub fn sgd_rows<T: Scalar>(table: &mut DenseTable<T>, grads: &AggregatedGrads<T>, lr: T) -> Result<()> {
    if grads.cols != table.cols() {
        return Err(Error::LengthMismatch(format!("gradient width {} vs table width {}", grads.cols, table.cols())));
    }
    for (u, &i) in grads.indices.iter().enumerate() {
        if i >= table.rows() {
            return Err(Error::IndexOutOfRange { index: i, len: table.rows() });
        }
        sgd_row(table.row_mut(i), grads.grad(u), lr);
    }
    Ok(())
}

/// Sum-pools rows of a dense table for each bag.
pub fn pool_dense<T: Scalar>(table: &DenseTable<T>, bags: &[IndexBag]) -> Result<Vec<T>> {
    let d = table.cols();
    let mut out = vec![T::zero(); bags.len() * d];
    for (b, bag) in bags.iter().enumerate() {
        bag.check_range(table.rows())?;
        pool_into(&mut out[b * d..(b + 1) * d], bag, |i| table.row(i));
    }
    Ok(out)
}

/// Adds the rows of `bag` (looked up by `row`) into `dst`, left to right.
pub fn pool_into<'a, T: Scalar + 'a>(dst: &mut [T], bag: &IndexBag, row: impl Fn(usize) -> &'a [T]) {
    for &i in bag.indices() {
        for (o, &v) in dst.iter_mut().zip(row(i)) {
            *o = *o + v;
        }
    }
}

impl<T: Scalar> DlrmModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let bottom = Mlp::init(&config.bottom_spec()?, derive_seed(config.seed, 1));
        let top = Mlp::init(&config.top_spec()?, derive_seed(config.seed, 2));
        let tables = (0..config.n_sparse())
            .map(|f| {
                let seed = derive_seed(config.seed, 1000 + f as u64);
                if config.uses_tt(f) {
                    Ok(EmbeddingTable::Tt(TtTable::init_random(config.tt_shape(f)?, seed, config.init_std)?))
                } else {
                    Ok(EmbeddingTable::Dense(DenseTable::init_random(
                        config.rows_per_field[f],
                        config.embed_dim,
                        seed,
                        config.init_std,
                    )?))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, bottom, top, tables })
    }

    pub fn from_parts(config: ModelConfig, bottom: Mlp<T>, top: Mlp<T>, tables: Vec<EmbeddingTable<T>>) -> Result<Self> {
        config.validate()?;
        let (bs, ts) = (config.bottom_spec()?, config.top_spec()?);
        let widths = |m: &Mlp<T>| -> Vec<usize> {
            std::iter::once(m.input()).chain(m.layers().iter().map(|l| l.outputs)).collect()
        };
        if widths(&bottom) != bs.widths || widths(&top) != ts.widths {
            return Err(Error::InvalidShape("mlp widths do not match the config".into()));
        }
        if tables.len() != config.n_sparse() {
            return Err(Error::InvalidShape(format!("{} tables for {} fields", tables.len(), config.n_sparse())));
        }
        for (f, t) in tables.iter().enumerate() {
            let width_ok = match t {
                EmbeddingTable::Tt(t) => t.cols() == config.embed_dim,
                EmbeddingTable::Dense(t) => t.cols() == config.embed_dim,
                EmbeddingTable::Host { .. } => true,
            };
            if !width_ok || t.rows() != config.rows_per_field[f] {
                return Err(Error::InvalidShape(format!("table {f} does not match the config")));
            }
        }
        Ok(Self { config, bottom, top, tables })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bottom(&self) -> &Mlp<T> {
        &self.bottom
    }

    pub fn top(&self) -> &Mlp<T> {
        &self.top
    }

    pub fn tables(&self) -> &[EmbeddingTable<T>] {
        &self.tables
    }

    pub fn zero_weights(&mut self) {
        self.bottom.zero_weights();
        self.top.zero_weights();
    }

    /// Same model with every TT table replaced by its dense reconstruction.
    pub fn with_dense_tables(&self) -> Result<Self> {
        let tables = self
            .tables
            .iter()
            .map(|t| match t {
                EmbeddingTable::Tt(tt) => Ok(EmbeddingTable::Dense(tt.reconstruct_full()?)),
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tables, ..self.clone() })
    }

    /// Moves every dense table out of the model, leaving `Host` placeholders.
    pub fn take_dense_tables(&mut self) -> Vec<Option<DenseTable<T>>> {
        self.tables
            .iter_mut()
            .map(|t| match t {
                EmbeddingTable::Dense(_) => {
                    let rows = t.rows();
                    match std::mem::replace(t, EmbeddingTable::Host { rows }) {
                        EmbeddingTable::Dense(d) => Some(d),
                        _ => unreachable!(),
                    }
                }
                _ => None,
            })
            .collect()
    }

    /// Puts tables taken by [`Self::take_dense_tables`] back.
    pub fn restore_dense_tables(&mut self, tables: Vec<Option<DenseTable<T>>>) {
        for (slot, t) in self.tables.iter_mut().zip(tables) {
            if let Some(t) = t {
                *slot = EmbeddingTable::Dense(t);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mlp = |m: &Mlp<T>| m.layers().iter().map(|l| l.w.len() + l.b.len()).sum::<usize>();
        mlp(&self.bottom) + mlp(&self.top) + self.tables.iter().map(EmbeddingTable::param_count).sum::<usize>()
    }

    fn check_batch(&self, batch: &MiniBatch<T>) -> Result<()> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        if batch.dense.len() != b * self.config.n_dense {
            return Err(Error::LengthMismatch(format!(
                "{} dense values for {b} samples of width {}",
                batch.dense.len(),
                self.config.n_dense
            )));
        }
        if batch.bags.len() != self.config.n_sparse() || batch.bags.iter().any(|f| f.len() != b) {
            return Err(Error::LengthMismatch("bags do not match the sparse fields".into()));
        }
        if let Some(k) = batch.dense.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dense feature {} of sample {}", k % self.config.n_dense, k / self.config.n_dense)));
        }
        Ok(())
    }

    /// Pooled embeddings for every field. `host[f]`, when given, supplies the
    /// pooled values of a host-resident field.
    pub fn embed(&self, batch: &MiniBatch<T>, reuse: bool, host: &[Option<Vec<T>>]) -> Result<Embedded<T>> {
        self.check_batch(batch)?;
        let mut counters = OpCounters::default();
        let mut pooled = Vec::with_capacity(self.tables.len());
        let mut states = Vec::with_capacity(self.tables.len());
        for (f, table) in self.tables.iter().enumerate() {
            let bags = &batch.bags[f];
            match (table, host.get(f).and_then(Option::as_ref)) {
                (_, Some(values)) => {
                    if values.len() != bags.len() * self.config.embed_dim {
                        return Err(Error::LengthMismatch(format!("host embeddings for field {f}")));
                    }
                    pooled.push(values.clone());
                    states.push(None);
                }
                (EmbeddingTable::Tt(t), None) => {
                    let out = forward_batch(t, bags, reuse)?;
                    counters += out.counters;
                    pooled.push(out.embeddings);
                    states.push(out.reuse);
                }
                (EmbeddingTable::Dense(t), None) => {
                    pooled.push(pool_dense(t, bags)?);
                    states.push(None);
                }
                (EmbeddingTable::Host { .. }, None) => {
                    return Err(Error::InvalidArgument(format!("field {f} is host-resident but no values were supplied")));
                }
            }
        }
        Ok(Embedded { pooled, reuse: states, counters })
    }

    /// Forward through MLPs and interaction given pooled embeddings; with
    /// `grads` also the backward pass down to the pooled embeddings.
    pub fn head(&self, batch: &MiniBatch<T>, pooled: &[Vec<T>], grads: bool) -> Result<HeadOutput<T>> {
        let b = batch.len();
        let d = self.config.embed_dim;
        let s = self.config.n_sparse();
        let width = self.config.interaction_width();

        let bottom_trace = self.bottom.forward(batch.dense.clone(), b);
        let x = bottom_trace.output();
        let mut z = Vec::with_capacity(b * width);
        for r in 0..b {
            let embs: Vec<&[T]> = pooled.iter().map(|p| &p[r * d..(r + 1) * d]).collect();
            z.extend(feature_interaction(&x[r * d..(r + 1) * d], &embs)?);
        }
        let top_trace = self.top.forward(z, b);
        let out = top_trace.output();

        let mut predictions = Vec::with_capacity(b);
        let mut loss = 0.0;
        let mut d_logit = Vec::with_capacity(b);
        for (r, &o) in out.iter().enumerate() {
            let o = o.as_f64();
            if !o.is_finite() {
                return Err(Error::NonFinite(format!("model output for sample {r}")));
            }
            let y = batch.labels[r];
            match self.config.loss {
                LossKind::Bce => {
                    let p = 1.0 / (1.0 + (-o).exp());
                    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
                    predictions.push(p);
                    d_logit.push(T::from_f64((p - y) / b as f64));
                }
                LossKind::Mse => {
                    loss += (o - y) * (o - y);
                    predictions.push(o);
                    d_logit.push(T::from_f64(2.0 * (o - y) / b as f64));
                }
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if !grads {
            return Ok(HeadOutput { predictions, loss, bottom: Vec::new(), top: Vec::new(), d_pooled: Vec::new() });
        }

        let (top_grads, dz) = self.top.backward(&top_trace, d_logit, b);
        let mut dx = vec![T::zero(); b * d];
        let mut d_pooled = vec![vec![T::zero(); b * d]; s];
        for r in 0..b {
            let dzr = &dz[r * width..(r + 1) * width];
            let xr = &x[r * d..(r + 1) * d];
            let (dxr, mut k) = (r * d, d);
            for (o, &g) in dx[dxr..dxr + d].iter_mut().zip(&dzr[..d]) {
                *o = *o + g;
            }
            // pair (i, j) over v = (x, e_1, .., e_s): dv_i += g v_j, dv_j += g v_i
            let v = |i: usize| -> &[T] {
                if i == 0 {
                    xr
                } else {
                    &pooled[i - 1][r * d..(r + 1) * d]
                }
            };
            for i in 0..=s {
                for j in i + 1..=s {
                    let g = dzr[k];
                    k += 1;
                    let (vi, vj) = (v(i), v(j));
                    for c in 0..d {
                        let gi = g * vj[c];
                        let gj = g * vi[c];
                        if i == 0 {
                            dx[dxr + c] = dx[dxr + c] + gi;
                        } else {
                            d_pooled[i - 1][r * d + c] = d_pooled[i - 1][r * d + c] + gi;
                        }
                        d_pooled[j - 1][r * d + c] = d_pooled[j - 1][r * d + c] + gj;
                    }
                }
            }
        }
        let (bottom_grads, _) = self.bottom.backward(&bottom_trace, dx, b);
        Ok(HeadOutput { predictions, loss, bottom: bottom_grads, top: top_grads, d_pooled })
    }

    /// Row gradients of one field: every index of a bag receives the bag's
    /// pooled gradient; duplicates are merged.
    pub fn row_grads(&self, batch: &MiniBatch<T>, field: usize, d_pooled: &[T]) -> Result<AggregatedGrads<T>> {
        let d = self.config.embed_dim;
        let mut indices = Vec::new();
        let mut grads = Vec::new();
        for (b, bag) in batch.bags[field].iter().enumerate() {
            for &i in bag.indices() {
                indices.push(i);
                grads.extend_from_slice(&d_pooled[b * d..(b + 1) * d]);
            }
        }
        unique_aggregate(&EmbGradBatch::new(indices, grads, d)?)
    }

    /// Loss, predictions and every parameter gradient for one batch.
    pub fn loss_and_grads(&self, batch: &MiniBatch<T>, reuse: bool) -> Result<(HeadOutput<T>, ModelGrads<T>, OpCounters)> {
        self.loss_and_grads_with(batch, reuse, &[])
    }

    /// [`Self::loss_and_grads`] with pooled values for host-resident fields.
    pub fn loss_and_grads_with(
        &self,
        batch: &MiniBatch<T>,
        reuse: bool,
        host: &[Option<Vec<T>>],
    ) -> Result<(HeadOutput<T>, ModelGrads<T>, OpCounters)> {
        let emb = self.embed(batch, reuse, host)?;
        let mut counters = emb.counters;
        let mut head = self.head(batch, &emb.pooled, true)?;
        let mut fields = Vec::with_capacity(self.tables.len());
        for (f, table) in self.tables.iter().enumerate() {
            let agg = self.row_grads(batch, f, &head.d_pooled[f])?;
            fields.push(match table {
                EmbeddingTable::Tt(t) => FieldGrads::Tt(tt_core_grads(
                    t,
                    &agg.indices,
                    &agg.grads,
                    emb.reuse[f].as_ref(),
                    &mut counters,
                )?),
                _ => FieldGrads::Rows(agg),
            });
        }
        let grads = ModelGrads {
            bottom: std::mem::take(&mut head.bottom),
            top: std::mem::take(&mut head.top),
            fields,
        };
        Ok((head, grads, counters))
    }

    /// Applies MLP and TT gradients with momentum; dense rows get plain SGD.
    pub fn apply_grads(&mut self, grads: &ModelGrads<T>, opt: &mut ModelOptimizer<T>) -> Result<()> {
        if grads.fields.len() != self.tables.len() {
            return Err(Error::LengthMismatch("field gradient count".into()));
        }
        let (lr, mu) = (opt.lr, opt.momentum);
        opt.bottom.apply(&mut self.bottom, &grads.bottom, lr, mu);
        opt.top.apply(&mut self.top, &grads.top, lr, mu);
        for (f, (table, g)) in self.tables.iter_mut().zip(&grads.fields).enumerate() {
            match (table, g) {
                (EmbeddingTable::Tt(t), FieldGrads::Tt(cg)) => {
                    let state = opt.tt[f]
                        .as_mut()
                        .ok_or_else(|| Error::Internal(format!("no optimizer state for TT field {f}")))?;
                    crate::backward::fused_update(t, cg, state)?;
                }
                (EmbeddingTable::Dense(t), FieldGrads::Rows(rg)) => sgd_rows(t, rg, lr)?,
                (EmbeddingTable::Host { .. }, FieldGrads::Rows(_)) => {}
                _ => return Err(Error::InvalidArgument(format!("gradient kind does not match table {f}"))),
            }
        }
        Ok(())
    }

    /// Forward, backward and one update. Metrics use threshold 0.5.
    pub fn train_step(&mut self, batch: &MiniBatch<T>, opt: &mut ModelOptimizer<T>, reuse: bool) -> Result<StepOutput> {
        let (head, grads, counters) = self.loss_and_grads(batch, reuse)?;
        self.apply_grads(&grads, opt)?;
        let mut metrics = compute_metrics(&head.predictions, &batch.labels, 0.5)?;
        metrics.loss = head.loss;
        Ok(StepOutput { metrics, counters })
    }

    pub fn predict(&self, batch: &MiniBatch<T>, reuse: bool) -> Result<Vec<f64>> {
        let emb = self.embed(batch, reuse, &[])?;
        Ok(self.head(batch, &emb.pooled, false)?.predictions)
    }

    /// Loss and metrics on `ids`, evaluated in chunks of `batch_size`.
    pub fn evaluate(&self, dataset: &Dataset, ids: &[usize], batch_size: usize) -> Result<Metrics> {
        if ids.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut preds = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        let mut loss = 0.0;
        for chunk in ids.chunks(batch_size.max(1)) {
            let batch = MiniBatch::from_dataset(dataset, chunk)?;
            let emb = self.embed(&batch, false, &[])?;
            let head = self.head(&batch, &emb.pooled, false)?;
            loss += head.loss * chunk.len() as f64;
            preds.extend(head.predictions);
            labels.extend(batch.labels);
        }
        let mut m = compute_metrics(&preds, &labels, 0.5)?;
        m.loss = loss / ids.len() as f64;
        Ok(m)
    }

    /// Every parameter in a fixed order: bottom, tables, top.
    pub fn params_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        for l in self.bottom.layers_mut() {
            out.extend(l.w.iter_mut());
            out.extend(l.b.iter_mut());
        }
        for t in &mut self.tables {
            match t {
                EmbeddingTable::Tt(t) => out.extend(t.params_mut().flat_map(|c| c.iter_mut())),
                EmbeddingTable::Dense(t) => out.extend(t.data_mut().iter_mut()),
                EmbeddingTable::Host { .. } => {}
            }
        }
        for l in self.top.layers_mut() {
            out.extend(l.w.iter_mut());
            out.extend(l.b.iter_mut());
        }
        out
    }

    /// `grads` flattened in the order of [`Self::params_mut`].
    pub fn flatten_grads(&self, grads: &ModelGrads<T>) -> Vec<T> {
        let mut out = Vec::new();
        for g in &grads.bottom {
            out.extend(&g.w);
            out.extend(&g.b);
        }
        for (t, g) in self.tables.iter().zip(&grads.fields) {
            match (t, g) {
                (EmbeddingTable::Tt(_), FieldGrads::Tt(cg)) => out.extend(cg.cores().iter().flatten()),
                (EmbeddingTable::Dense(dt), FieldGrads::Rows(rg)) => {
                    let mut full = vec![T::zero(); dt.data().len()];
                    let d = dt.cols();
                    for (u, &i) in rg.indices.iter().enumerate() {
                        for (o, &v) in full[i * d..(i + 1) * d].iter_mut().zip(rg.grad(u)) {
                            *o = *o + v;
                        }
                    }
                    out.extend(full);
                }
                _ => {}
            }
        }
        for g in &grads.top {
            out.extend(&g.w);
            out.extend(&g.b);
        }
        out
    }
}

/// Optimizer state for the whole model.
#[derive(Debug, Clone)]
pub struct ModelOptimizer<T> {
    lr: T,
    momentum: T,
    bottom: MlpVelocity<T>,
    top: MlpVelocity<T>,
    tt: Vec<Option<OptimizerState<T>>>,
}

impl<T: Scalar> ModelOptimizer<T> {
    pub fn new(model: &DlrmModel<T>, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} not in [0, 1)")));
        }
        let tt = model
            .tables
            .iter()
            .map(|t| match t {
                EmbeddingTable::Tt(t) => OptimizerState::new(lr, momentum, t.shape()).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lr: T::from_f64(lr),
            momentum: T::from_f64(momentum),
            bottom: MlpVelocity::new(&model.bottom, momentum),
            top: MlpVelocity::new(&model.top, momentum),
            tt,
        })
    }

    pub fn lr(&self) -> T {
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn tiny_config(loss: LossKind) -> ModelConfig {
        ModelConfig {
            n_dense: 3,
            rows_per_field: vec![27, 5],
            embed_dim: 4,
            bottom_hidden: vec![5],
            top_hidden: vec![4],
            tt_cores: 3,
            tt_rank: 2,
            tt_min_rows: 10,
            loss,
            seed: 7,
            init_std: 0.5,
        }
    }

    fn tiny_dataset() -> Dataset {
        let samples = (0..6)
            .map(|k| Sample {
                label: (k % 2) as f64,
                dense: vec![0.1 * k as f64, 0.5, 1.0 - 0.1 * k as f64],
                sparse: vec![vec![k * 4 % 27, (k * 7 + 1) % 27], vec![k % 5]],
            })
            .collect();
        Dataset { n_dense: 3, rows_per_field: vec![27, 5], samples }
    }

    #[test]
    fn interaction_examples() {
        assert_eq!(feature_interaction(&[1.0, 0.0], &[&[0.0, 1.0]]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(feature_interaction(&[1.0, 2.0], &[]).unwrap(), vec![1.0, 2.0]);
        let out = feature_interaction(&[1.0, 2.0], &[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 11.0, 17.0, 39.0]);
        assert!(feature_interaction(&[1.0, 2.0], &[&[3.0]]).is_err());
        for s in 0..6 {
            assert_eq!(interaction_width(4, s), 4 + (s + 1) * s / 2);
        }
    }

    #[test]
    fn zero_weights_predict_half_or_zero() {
        let ds = tiny_dataset();
        let batch = MiniBatch::<f64>::from_dataset(&ds, &[0, 1, 2]).unwrap();
        let mut m = DlrmModel::<f64>::new(tiny_config(LossKind::Bce)).unwrap();
        m.zero_weights();
        assert_eq!(m.predict(&batch, true).unwrap(), vec![0.5; 3]);
        let mut m = DlrmModel::<f64>::new(tiny_config(LossKind::Mse)).unwrap();
        m.zero_weights();
        assert_eq!(m.predict(&batch, true).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn tt_and_dense_models_agree() {
        let ds = tiny_dataset();
        let batch = MiniBatch::<f64>::from_dataset(&ds, &[0, 1, 2, 3, 4, 5]).unwrap();
        let m = DlrmModel::<f64>::new(tiny_config(LossKind::Bce)).unwrap();
        assert!(matches!(m.tables()[0], EmbeddingTable::Tt(_)));
        assert!(matches!(m.tables()[1], EmbeddingTable::Dense(_)));
        let dense = m.with_dense_tables().unwrap();
        for (a, b) in m.predict(&batch, true).unwrap().iter().zip(dense.predict(&batch, false).unwrap()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradient_check() {
        let ds = tiny_dataset();
        let batch = MiniBatch::<f64>::from_dataset(&ds, &[0, 1, 2, 3, 4, 5]).unwrap();
        for loss in [LossKind::Bce, LossKind::Mse] {
            let mut m = DlrmModel::<f64>::new(tiny_config(loss)).unwrap();
            let (_, grads, _) = m.loss_and_grads(&batch, true).unwrap();
            let analytic = m.flatten_grads(&grads);
            let n = m.params_mut().len();
            assert_eq!(analytic.len(), n);
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for (p, &an) in analytic.iter().enumerate() {
                let orig = *m.params_mut()[p];
                *m.params_mut()[p] = orig + h;
                let lp = m.loss_and_grads(&batch, false).unwrap().0.loss;
                *m.params_mut()[p] = orig - h;
                let lm = m.loss_and_grads(&batch, false).unwrap().0.loss;
                *m.params_mut()[p] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(err);
            }
            assert!(worst < 1e-6, "{loss:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn lr_zero_leaves_parameters() {
        let ds = tiny_dataset();
        let batch = MiniBatch::<f64>::from_dataset(&ds, &[0, 1, 2]).unwrap();
        let mut m = DlrmModel::<f64>::new(tiny_config(LossKind::Bce)).unwrap();
        let before = m.clone();
        let mut opt = ModelOptimizer::new(&m, 0.0, 0.9).unwrap();
        let out = m.train_step(&batch, &mut opt, true).unwrap();
        assert!(out.metrics.loss.is_finite());
        assert_eq!(m, before);
    }

    #[test]
    fn training_reduces_loss() {
        let ds = tiny_dataset();
        let ids: Vec<usize> = (0..6).collect();
        let batch = MiniBatch::<f64>::from_dataset(&ds, &ids).unwrap();
        // the gradcheck init saturates ReLUs at this width
        let mut c = tiny_config(LossKind::Bce);
        c.bottom_hidden = vec![8];
        c.top_hidden = vec![8];
        c.init_std = 0.1;
        let mut m = DlrmModel::<f64>::new(c).unwrap();
        let mut opt = ModelOptimizer::new(&m, 0.05, 0.9).unwrap();
        let first = m.train_step(&batch, &mut opt, true).unwrap().metrics.loss;
        let mut last = first;
        for _ in 0..300 {
            last = m.train_step(&batch, &mut opt, true).unwrap().metrics.loss;
        }
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn host_fields_need_values() {
        let ds = tiny_dataset();
        let batch = MiniBatch::<f64>::from_dataset(&ds, &[0, 1]).unwrap();
        let mut m = DlrmModel::<f64>::new(tiny_config(LossKind::Bce)).unwrap();
        let reference = m.predict(&batch, false).unwrap();
        let taken = m.take_dense_tables();
        assert!(m.embed(&batch, false, &[]).is_err());
        let host = pool_dense(taken[1].as_ref().unwrap(), &batch.bags[1]).unwrap();
        let emb = m.embed(&batch, false, &[None, Some(host)]).unwrap();
        assert_eq!(m.head(&batch, &emb.pooled, false).unwrap().predictions, reference);
        m.restore_dense_tables(taken);
        assert_eq!(m.predict(&batch, false).unwrap(), reference);
    }

    #[test]
    fn nan_is_reported() {
        let ds = tiny_dataset();
        let mut batch = MiniBatch::<f64>::from_dataset(&ds, &[0]).unwrap();
        batch.dense[0] = f64::NAN;
        let m = DlrmModel::<f64>::new(tiny_config(LossKind::Bce)).unwrap();
        assert!(matches!(m.predict(&batch, false), Err(Error::NonFinite(_))));
    }
}
