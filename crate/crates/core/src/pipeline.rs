//! Discrete-tick simulator of pipelined parameter-server training.
//!
//! Uncompressed (dense) tables live in a [`HostStore`] owned by the server.
//! TT tables and MLPs live with the worker and are updated locally. Each tick
//! runs, in order: one server update, one worker step (preceded by
//! [`cache_sync`]) and one prefetch. At most `lc` batches are in flight
//! between prefetch and server update, so `lc = 1` degenerates to sequential
//! execution. The worker writes its post-update host rows into a versioned
//! [`EmbCache`]; cache_sync lets a later batch see those values before the
//! server has applied them.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backward::{tt_core_grads, AggregatedGrads};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::model::{compute_metrics, pool_into, sgd_row, DlrmModel, FieldGrads, MiniBatch, ModelGrads, ModelOptimizer, StepOutput};
use crate::scalar::Scalar;
use crate::tt::DenseTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Load capacity: queue bound, in-flight bound and cache entry lifetime.
    pub lc: usize,
    pub cache_sync: bool,
    pub lr: f64,
    pub momentum: f64,
    pub reuse: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lc == 0 {
            return Err(Error::InvalidArgument("lc must be at least 1".into()));
        }
        Ok(())
    }
}

/// `steps` batches of sample ids, reshuffling once per pass over the data.
pub fn schedule_batches(n_samples: usize, batch_size: usize, steps: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_samples == 0 {
        return Err(Error::Empty("dataset"));
    }
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    while out.len() < steps {
        let shuffle = crate::data::derive_seed(seed, epoch);
        for b in batch_iter(n_samples, batch_size, Some(shuffle))? {
            if out.len() == steps {
                break;
            }
            out.push(b);
        }
        epoch += 1;
    }
    Ok(out)
}

/// Host-resident tables with a version (update count) per row.
#[derive(Debug, Clone, PartialEq)]
pub struct HostStore<T> {
    tables: Vec<Option<DenseTable<T>>>,
    versions: Vec<Vec<u64>>,
}

impl<T: Scalar> HostStore<T> {
    pub fn new(tables: Vec<Option<DenseTable<T>>>) -> Self {
        let versions = tables.iter().map(|t| vec![0; t.as_ref().map_or(0, DenseTable::rows)]).collect();
        Self { tables, versions }
    }

    pub fn is_host(&self, field: usize) -> bool {
        self.tables.get(field).is_some_and(Option::is_some)
    }

    pub fn row(&self, field: usize, row: usize) -> (&[T], u64) {
        let t = self.tables[field].as_ref().expect("host field");
        (t.row(row), self.versions[field][row])
    }

    pub fn version(&self, field: usize, row: usize) -> u64 {
        self.versions[field][row]
    }

    pub fn into_tables(self) -> Vec<Option<DenseTable<T>>> {
        self.tables
    }
}

/// A row key: `(field, row)`.
pub type RowKey = (usize, usize);

/// Row values and versions for one batch, in first-occurrence order.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSet<T> {
    pub keys: Vec<RowKey>,
    pub values: Vec<Vec<T>>,
    pub versions: Vec<u64>,
}

impl<T> RowSet<T> {
    fn position(&self) -> HashMap<RowKey, usize> {
        self.keys.iter().enumerate().map(|(k, &key)| (key, k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry<T> {
    pub value: Vec<T>,
    pub lc_remaining: usize,
    pub version: u64,
}

/// Versioned cache of rows written by the worker and not yet known to be
/// applied on the host. Entries live for `lc` worker steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbCache<T> {
    entries: BTreeMap<RowKey, CacheEntry<T>>,
    capacity: usize,
}

impl<T: Scalar> EmbCache<T> {
    pub fn new(capacity: usize) -> Self {
        Self { entries: BTreeMap::new(), capacity }
    }

    pub fn get(&self, key: RowKey) -> Option<&CacheEntry<T>> {
        self.entries.get(&key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One worker step elapsed: decrement every entry, evicting those at 0.
    pub fn tick(&mut self) {
        self.entries.retain(|_, e| {
            e.lc_remaining -= 1;
            e.lc_remaining > 0
        });
    }

    pub fn insert(&mut self, key: RowKey, value: Vec<T>, version: u64, lc: usize) -> Result<()> {
        if lc == 0 {
            return Err(Error::InvalidArgument("cache entries need a positive lifetime".into()));
        }
        if let Some(old) = self.entries.get(&key) {
            if old.version > version {
                return Err(Error::Internal(format!("cache version regression on row {key:?}")));
            }
        }
        self.entries.insert(key, CacheEntry { value, lc_remaining: lc, version });
        if self.entries.len() > self.capacity {
            return Err(Error::Internal(format!("cache holds {} entries, capacity {}", self.entries.len(), self.capacity)));
        }
        Ok(())
    }
}

/// Replaces prefetched rows with fresher cached ones. Returns the synced set
/// and the keys that were replaced.
pub fn cache_sync<T: Scalar>(cache: &EmbCache<T>, prefetched: &RowSet<T>) -> Result<(RowSet<T>, Vec<RowKey>)> {
    let mut out = prefetched.clone();
    let mut replaced = Vec::new();
    for (k, &key) in prefetched.keys.iter().enumerate() {
        if let Some(e) = cache.get(key) {
            if e.version > prefetched.versions[k] {
                out.values[k] = e.value.clone();
                out.versions[k] = e.version;
                replaced.push(key);
            }
        }
    }
    Ok((out, replaced))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefetch,
    CacheSync,
    WorkerFwdBwd,
    ServerUpdate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prefetch => "prefetch",
            Stage::CacheSync => "cache_sync",
            Stage::WorkerFwdBwd => "worker_fwd_bwd",
            Stage::ServerUpdate => "server_update",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Stage::Prefetch, Stage::CacheSync, Stage::WorkerFwdBwd, Stage::ServerUpdate]
            .into_iter()
            .find(|st| st.name() == s)
    }
}

/// One stage execution. `rows`/`versions`: prefetch records what was read
/// from the host, cache_sync the rows it replaced and their new versions,
/// the worker what it consumed, the server what it wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineEvent {
    pub tick: u64,
    pub stage: Stage,
    pub batch: usize,
    pub rows: Vec<RowKey>,
    pub versions: Vec<u64>,
}

impl fmt::Display for PipelineEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = if self.rows.is_empty() {
            "-".to_string()
        } else {
            self.rows.iter().map(|(fl, r)| format!("{fl}:{r}")).collect::<Vec<_>>().join(",")
        };
        let versions = if self.versions.is_empty() {
            "-".to_string()
        } else {
            self.versions.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        };
        write!(f, "{} {} {} {} {}", self.tick, self.stage.name(), self.batch, rows, versions)
    }
}

impl std::str::FromStr for PipelineEvent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad event line `{s}`"));
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let rows = if parts[3] == "-" {
            Vec::new()
        } else {
            parts[3]
                .split(',')
                .map(|t| {
                    let (a, b) = t.split_once(':').ok_or_else(bad)?;
                    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let versions = if parts[4] == "-" {
            Vec::new()
        } else {
            parts[4].split(',').map(|t| t.parse().map_err(|_| bad())).collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            tick: parts[0].parse().map_err(|_| bad())?,
            stage: Stage::parse(parts[1]).ok_or_else(bad)?,
            batch: parts[2].parse().map_err(|_| bad())?,
            rows,
            versions,
        })
    }
}

/// A worker consumed a row at a lower version than the number of earlier
/// batches that updated it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StaleRead {
    pub batch: usize,
    pub row: RowKey,
    pub consumed: u64,
    pub expected: u64,
}

/// Checks every worker consumption against the batch order.
pub fn audit_raw(events: &[PipelineEvent]) -> Vec<StaleRead> {
    let mut workers: Vec<&PipelineEvent> = events.iter().filter(|e| e.stage == Stage::WorkerFwdBwd).collect();
    workers.sort_by_key(|e| e.batch);
    let mut touched: HashMap<RowKey, u64> = HashMap::new();
    let mut stale = Vec::new();
    for e in workers {
        for (&row, &consumed) in e.rows.iter().zip(&e.versions) {
            let expected = touched.get(&row).copied().unwrap_or(0);
            if consumed < expected {
                stale.push(StaleRead { batch: e.batch, row, consumed, expected });
            }
        }
        for &row in &e.rows {
            *touched.entry(row).or_default() += 1;
        }
    }
    stale
}

#[derive(Debug, Clone)]
pub struct PipelineOutput<T> {
    pub model: DlrmModel<T>,
    pub events: Vec<PipelineEvent>,
    pub steps: Vec<StepOutput>,
    pub max_prefetch_queue: usize,
    pub max_grad_queue: usize,
}

impl<T> PipelineOutput<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.metrics.loss).collect()
    }

    pub fn event_log(&self) -> String {
        self.events.iter().map(|e| format!("{e}\n")).collect()
    }
}

fn distinct_rows<T: Scalar>(batch: &MiniBatch<T>, host: &HostStore<T>) -> Vec<RowKey> {
    let mut seen = std::collections::HashSet::new();
    let mut keys = Vec::new();
    for (f, bags) in batch.bags.iter().enumerate() {
        if !host.is_host(f) {
            continue;
        }
        for bag in bags {
            for &i in bag.indices() {
                if seen.insert((f, i)) {
                    keys.push((f, i));
                }
            }
        }
    }
    keys
}

struct Sim<T> {
    cfg: PipelineConfig,
    model: DlrmModel<T>,
    opt: ModelOptimizer<T>,
    host: HostStore<T>,
    cache: EmbCache<T>,
    batches: Vec<MiniBatch<T>>,
    prefetch_q: VecDeque<(usize, RowSet<T>)>,
    grad_q: VecDeque<(usize, Vec<Option<AggregatedGrads<T>>>)>,
    next_prefetch: usize,
    applied: usize,
    events: Vec<PipelineEvent>,
    steps: Vec<StepOutput>,
    max_pq: usize,
    max_gq: usize,
}

impl<T: Scalar> Sim<T> {
    fn log(&mut self, tick: u64, stage: Stage, batch: usize, rows: Vec<RowKey>, versions: Vec<u64>) {
        self.events.push(PipelineEvent { tick, stage, batch, rows, versions });
    }

    fn server_step(&mut self, tick: u64) -> Result<()> {
        let Some((id, grads)) = self.grad_q.pop_front() else { return Ok(()) };
        let lr = self.opt.lr();
        let mut rows = Vec::new();
        let mut versions = Vec::new();
        for (f, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let table = self.host.tables[f].as_mut().ok_or_else(|| Error::Internal(format!("field {f} is not on the host")))?;
            for (u, &i) in g.indices.iter().enumerate() {
                sgd_row(table.row_mut(i), g.grad(u), lr);
                self.host.versions[f][i] += 1;
                rows.push((f, i));
                versions.push(self.host.versions[f][i]);
            }
        }
        self.applied += 1;
        self.log(tick, Stage::ServerUpdate, id, rows, versions);
        Ok(())
    }

    fn worker_step(&mut self, tick: u64) -> Result<()> {
        if self.grad_q.len() >= self.cfg.lc {
            return Ok(()); // backpressure
        }
        let Some((id, prefetched)) = self.prefetch_q.pop_front() else { return Ok(()) };
        self.cache.tick();
        let (rows, replaced) = if self.cfg.cache_sync {
            let (synced, replaced) = cache_sync(&self.cache, &prefetched)?;
            let pos = synced.position();
            let versions = replaced.iter().map(|k| synced.versions[pos[k]]).collect();
            (synced, (replaced, versions))
        } else {
            (prefetched, (Vec::new(), Vec::new()))
        };
        self.log(tick, Stage::CacheSync, id, replaced.0, replaced.1);

        let batch = &self.batches[id];
        let pos = rows.position();
        let d = self.model.config().embed_dim;
        let host_pooled: Vec<Option<Vec<T>>> = (0..batch.bags.len())
            .map(|f| {
                self.host.is_host(f).then(|| {
                    let mut out = vec![T::zero(); batch.len() * d];
                    for (b, bag) in batch.bags[f].iter().enumerate() {
                        pool_into(&mut out[b * d..(b + 1) * d], bag, |i| &rows.values[pos[&(f, i)]]);
                    }
                    out
                })
            })
            .collect();

        let emb = self.model.embed(batch, self.cfg.reuse, &host_pooled)?;
        let mut counters = emb.counters;
        let head = self.model.head(batch, &emb.pooled, true)?;
        let mut fields = Vec::with_capacity(batch.bags.len());
        let mut host_grads = Vec::with_capacity(batch.bags.len());
        for f in 0..batch.bags.len() {
            let agg = self.model.row_grads(batch, f, &head.d_pooled[f])?;
            match &self.model.tables()[f] {
                crate::model::EmbeddingTable::Tt(t) => {
                    fields.push(FieldGrads::Tt(tt_core_grads(t, &agg.indices, &agg.grads, emb.reuse[f].as_ref(), &mut counters)?));
                    host_grads.push(None);
                }
                _ => {
                    fields.push(FieldGrads::Rows(agg.clone()));
                    host_grads.push(Some(agg));
                }
            }
        }
        let grads = ModelGrads { bottom: head.bottom, top: head.top, fields };
        self.model.apply_grads(&grads, &mut self.opt)?;

        // post-update host values become visible to later batches via the cache
        let lr = self.opt.lr();
        for (f, g) in host_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            for (u, &i) in g.indices.iter().enumerate() {
                let k = pos[&(f, i)];
                let mut value = rows.values[k].clone();
                sgd_row(&mut value, g.grad(u), lr);
                self.cache.insert((f, i), value, rows.versions[k] + 1, self.cfg.lc)?;
            }
        }
        self.grad_q.push_back((id, host_grads));
        self.max_gq = self.max_gq.max(self.grad_q.len());
        let mut metrics = compute_metrics(&head.predictions, &batch.labels, 0.5)?;
        metrics.loss = head.loss;
        self.steps.push(StepOutput { metrics, counters });
        self.log(tick, Stage::WorkerFwdBwd, id, rows.keys, rows.versions);
        Ok(())
    }

    fn prefetch_step(&mut self, tick: u64) {
        let in_flight = self.next_prefetch - self.applied;
        if self.next_prefetch >= self.batches.len() || in_flight >= self.cfg.lc || self.prefetch_q.len() >= self.cfg.lc {
            return;
        }
        let id = self.next_prefetch;
        let keys = distinct_rows(&self.batches[id], &self.host);
        let mut values = Vec::with_capacity(keys.len());
        let mut versions = Vec::with_capacity(keys.len());
        for &(f, i) in &keys {
            let (v, ver) = self.host.row(f, i);
            values.push(v.to_vec());
            versions.push(ver);
        }
        self.log(tick, Stage::Prefetch, id, keys.clone(), versions.clone());
        self.prefetch_q.push_back((id, RowSet { keys, values, versions }));
        self.max_pq = self.max_pq.max(self.prefetch_q.len());
        self.next_prefetch += 1;
    }
}

/// Trains `model` on `batches` (sample ids into `dataset`) through the
/// simulated pipeline.
pub fn run_pipeline<T: Scalar>(
    model: &DlrmModel<T>,
    dataset: &Dataset,
    batches: &[Vec<usize>],
    cfg: &PipelineConfig,
) -> Result<PipelineOutput<T>> {
    cfg.validate()?;
    let mut model = model.clone();
    let opt = ModelOptimizer::new(&model, cfg.lr, cfg.momentum)?;
    let host = HostStore::new(model.take_dense_tables());
    let batches = batches.iter().map(|ids| MiniBatch::from_dataset(dataset, ids)).collect::<Result<Vec<_>>>()?;
    let max_rows = batches.iter().map(|b| distinct_rows(b, &host).len()).max().unwrap_or(0);
    let mut sim = Sim {
        cfg: *cfg,
        model,
        opt,
        cache: EmbCache::new(4 * cfg.lc * max_rows.max(1)),
        host,
        batches,
        prefetch_q: VecDeque::new(),
        grad_q: VecDeque::new(),
        next_prefetch: 0,
        applied: 0,
        events: Vec::new(),
        steps: Vec::new(),
        max_pq: 0,
        max_gq: 0,
    };
    let total = sim.batches.len();
    let mut tick = 0u64;
    while sim.applied < total {
        sim.server_step(tick)?;
        sim.worker_step(tick)?;
        sim.prefetch_step(tick);
        if sim.prefetch_q.len() > cfg.lc || sim.grad_q.len() > cfg.lc {
            return Err(Error::Internal("queue exceeded its load capacity".into()));
        }
        tick += 1;
        if tick > 4 * (total as u64 + 2) {
            return Err(Error::Internal("pipeline made no progress".into()));
        }
    }
    let Sim { mut model, host, events, steps, max_pq, max_gq, .. } = sim;
    model.restore_dense_tables(host.into_tables());
    Ok(PipelineOutput { model, events, steps, max_prefetch_queue: max_pq, max_grad_queue: max_gq })
}

#[derive(Debug, Clone)]
pub struct SequentialOutput<T> {
    pub model: DlrmModel<T>,
    pub steps: Vec<StepOutput>,
}

impl<T> SequentialOutput<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.metrics.loss).collect()
    }
}

/// Reference loop: each batch is fully processed (including the dense-row
/// update) before the next one starts.
pub fn run_sequential<T: Scalar>(
    model: &DlrmModel<T>,
    dataset: &Dataset,
    batches: &[Vec<usize>],
    cfg: &PipelineConfig,
) -> Result<SequentialOutput<T>> {
    let mut model = model.clone();
    let mut opt = ModelOptimizer::new(&model, cfg.lr, cfg.momentum)?;
    let mut steps = Vec::with_capacity(batches.len());
    for (k, ids) in batches.iter().enumerate() {
        let batch = MiniBatch::from_dataset(dataset, ids)?;
        match model.train_step(&batch, &mut opt, cfg.reuse) {
            Ok(out) => steps.push(out),
            Err(Error::NonFinite(what)) => {
                return Err(Error::NonFinite(format!("{what} at step {k} (last good step {})", k as i64 - 1)))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SequentialOutput { model, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::model::{LossKind, ModelConfig};

    fn overlapping_dataset() -> Dataset {
        let samples = (0..16)
            .map(|k| Sample {
                label: (k % 3 == 0) as u8 as f64,
                dense: vec![0.1 * (k % 5) as f64, 1.0 - 0.05 * k as f64],
                sparse: vec![vec![k % 4, 0], vec![(k * 5) % 1100]],
            })
            .collect();
        Dataset { n_dense: 2, rows_per_field: vec![6, 1100], samples }
    }

    fn model() -> DlrmModel<f64> {
        let mut c = ModelConfig::new(2, vec![6, 1100]);
        c.embed_dim = 4;
        c.tt_rank = 2;
        c.seed = 3;
        c.init_std = 0.3;
        DlrmModel::new(c).unwrap()
    }

    fn cfg(lc: usize, cache_sync: bool) -> PipelineConfig {
        PipelineConfig { lc, cache_sync, lr: 0.05, momentum: 0.5, reuse: true }
    }

    #[test]
    fn lc1_is_bit_identical_to_sequential() {
        let ds = overlapping_dataset();
        let batches = schedule_batches(ds.len(), 4, 12, 1).unwrap();
        let p = run_pipeline(&model(), &ds, &batches, &cfg(1, true)).unwrap();
        let s = run_sequential(&model(), &ds, &batches, &cfg(1, true)).unwrap();
        assert_eq!(p.model, s.model);
        assert_eq!(p.losses(), s.losses());
        assert_eq!((p.max_prefetch_queue, p.max_grad_queue), (1, 1));
        assert!(audit_raw(&p.events).is_empty());
    }

    #[test]
    fn synced_pipeline_matches_sequential() {
        let ds = overlapping_dataset();
        let batches = schedule_batches(ds.len(), 4, 12, 2).unwrap();
        let s = run_sequential(&model(), &ds, &batches, &cfg(1, true)).unwrap();
        for lc in [2, 4, 8] {
            let p = run_pipeline(&model(), &ds, &batches, &cfg(lc, true)).unwrap();
            assert_eq!(p.model, s.model, "lc={lc}");
            assert!(audit_raw(&p.events).is_empty());
            assert!(p.max_prefetch_queue <= lc && p.max_grad_queue <= lc);
        }
    }

    #[test]
    fn unsynced_pipeline_reads_stale_rows() {
        let ds = overlapping_dataset();
        let batches = schedule_batches(ds.len(), 4, 12, 2).unwrap();
        let s = run_sequential(&model(), &ds, &batches, &cfg(1, true)).unwrap();
        let p = run_pipeline(&model(), &ds, &batches, &cfg(4, false)).unwrap();
        assert!(!audit_raw(&p.events).is_empty());
        assert_ne!(p.model, s.model);
    }

    #[test]
    fn event_log_order_and_round_trip() {
        let ds = overlapping_dataset();
        let batches = schedule_batches(ds.len(), 4, 6, 0).unwrap();
        let p = run_pipeline(&model(), &ds, &batches, &cfg(2, true)).unwrap();
        let again = run_pipeline(&model(), &ds, &batches, &cfg(2, true)).unwrap();
        assert_eq!(p.event_log(), again.event_log());
        for id in 0..batches.len() {
            let stages: Vec<Stage> = p.events.iter().filter(|e| e.batch == id).map(|e| e.stage).collect();
            assert_eq!(stages, vec![Stage::Prefetch, Stage::CacheSync, Stage::WorkerFwdBwd, Stage::ServerUpdate]);
        }
        for line in p.event_log().lines() {
            let e: PipelineEvent = line.parse().unwrap();
            assert_eq!(e.to_string(), line);
        }
    }

    #[test]
    fn cache_sync_prefers_newer_versions() {
        let mut cache = EmbCache::new(8);
        let pre = RowSet { keys: vec![(0, 1), (0, 2)], values: vec![vec![1.0], vec![2.0]], versions: vec![0, 0] };
        let (out, replaced) = cache_sync(&cache, &pre).unwrap();
        assert_eq!(out, pre);
        assert!(replaced.is_empty());
        cache.insert((0, 2), vec![1.5], 1, 2).unwrap();
        let (out, replaced) = cache_sync(&cache, &pre).unwrap();
        assert_eq!(out.values, vec![vec![1.0], vec![1.5]]);
        assert_eq!(out.versions, vec![0, 1]);
        assert_eq!(replaced, vec![(0, 2)]);
    }

    #[test]
    fn cache_entries_expire_after_lc_steps() {
        let mut cache = EmbCache::new(4);
        cache.insert((0, 0), vec![1.0f64], 1, 2).unwrap();
        cache.tick();
        assert_eq!(cache.get((0, 0)).unwrap().lc_remaining, 1);
        cache.tick();
        assert!(cache.get((0, 0)).is_none());
        cache.insert((0, 0), vec![1.0], 3, 2).unwrap();
        assert!(cache.insert((0, 0), vec![1.0], 2, 2).is_err());
    }

    #[test]
    fn server_applies_fifo_sgd() {
        let mut c = ModelConfig::new(1, vec![3]);
        c.embed_dim = 2;
        c.loss = LossKind::Mse;
        let ds = Dataset {
            n_dense: 1,
            rows_per_field: vec![3],
            samples: vec![Sample { label: 1.0, dense: vec![0.5], sparse: vec![vec![1]] }],
        };
        let m = DlrmModel::<f64>::new(c).unwrap();
        let p = run_pipeline(&m, &ds, &[vec![0], vec![0]], &cfg(2, true)).unwrap();
        let server: Vec<&PipelineEvent> = p.events.iter().filter(|e| e.stage == Stage::ServerUpdate).collect();
        assert_eq!(server[0].rows, vec![(0, 1)]);
        assert_eq!(server[0].versions, vec![1]);
        assert_eq!(server[1].versions, vec![2]);
    }

    #[test]
    fn schedule_covers_epochs() {
        let b = schedule_batches(10, 4, 7, 0).unwrap();
        assert_eq!(b.len(), 7);
        assert_eq!(b[2].len(), 2);
        assert!(PipelineConfig { lc: 0, ..cfg(1, true) }.validate().is_err());
    }
}
