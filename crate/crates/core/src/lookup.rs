//! Reuse-optimized forward path.
//!
//! For three-core tables, rows whose first two digits agree share the product
//! of the first two core slices (the "prefix product"). A [`ReusePlan`] assigns
//! each distinct prefix one buffer slot in first-occurrence order, which is the
//! deterministic serialization of a claim-once scheme: exactly one index per
//! prefix triggers the computation, every later index is a buffer hit.
//!
//! Within a bag, indices that share a prefix are folded before the final
//! multiplication: `P x (S_a + S_b)` instead of `P x S_a + P x S_b`.

use std::collections::HashMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tt::{chain_step, chain_with, first_slice, slice_row, TtShape, TtTable};

/// Multiset of row ids whose embeddings are sum-pooled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexBag(Vec<usize>);

impl IndexBag {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("index bag"));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_range(&self, rows: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= rows) {
            Some(&index) => Err(Error::IndexOutOfRange { index, len: rows }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<usize>> for IndexBag {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub slice_mults: u64,
    pub row_adds: u64,
    pub buffer_hits: u64,
    pub buffer_misses: u64,
}

impl AddAssign for OpCounters {
    fn add_assign(&mut self, o: Self) {
        self.slice_mults += o.slice_mults;
        self.row_adds += o.row_adds;
        self.buffer_hits += o.buffer_hits;
        self.buffer_misses += o.buffer_misses;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkItem {
    pub prefix_key: usize,
    pub core1_digit: usize,
    pub core2_digit: usize,
    pub buffer_slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReusePlan {
    shape: TtShape,
    work: Vec<WorkItem>,
    slot_of: HashMap<usize, usize>,
    indices_seen: usize,
}

impl ReusePlan {
    pub fn work(&self) -> &[WorkItem] {
        &self.work
    }

    pub fn buf_len(&self) -> usize {
        self.work.len()
    }

    pub fn slot_of(&self, prefix_key: usize) -> Option<usize> {
        self.slot_of.get(&prefix_key).copied()
    }

    pub fn prefix_key(&self, index: usize) -> usize {
        index / self.shape.m()[2]
    }

    /// Indices that found their prefix already claimed.
    pub fn hits(&self) -> u64 {
        (self.indices_seen - self.work.len()) as u64
    }

    pub fn misses(&self) -> u64 {
        self.work.len() as u64
    }
}

/// Builds the deduplicated prefix work list for a bag or a whole batch.
pub fn prepare_reuse_plan(indices: &[usize], shape: &TtShape) -> Result<ReusePlan> {
    if shape.d() != 3 {
        return Err(Error::UnsupportedCores(shape.d()));
    }
    let (rows, m2, m3) = (shape.rows(), shape.m()[1], shape.m()[2]);
    let mut work = Vec::new();
    let mut slot_of = HashMap::new();
    for &index in indices {
        if index >= rows {
            return Err(Error::IndexOutOfRange { index, len: rows });
        }
        let prefix_key = index / m3;
        slot_of.entry(prefix_key).or_insert_with(|| {
            let slot = work.len();
            work.push(WorkItem {
                prefix_key,
                core1_digit: prefix_key / m2,
                core2_digit: prefix_key % m2,
                buffer_slot: slot,
            });
            slot
        });
    }
    Ok(ReusePlan { shape: shape.clone(), work, slot_of, indices_seen: indices.len() })
}

/// Prefix products, one `(n_1 * n_2) x R_2` matrix per plan slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ReuseBuffer<T> {
    slot_width: usize,
    data: Vec<T>,
}

impl<T: Scalar> ReuseBuffer<T> {
    pub fn len(&self) -> usize {
        self.data.len() / self.slot_width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slot_width(&self) -> usize {
        self.slot_width
    }

    pub fn slot(&self, s: usize) -> &[T] {
        &self.data[s * self.slot_width..(s + 1) * self.slot_width]
    }
}

/// Computes every slot of the plan. Each work entry is one slice product.
pub fn execute_prefix_products<T: Scalar>(
    plan: &ReusePlan,
    table: &TtTable<T>,
    counters: &mut OpCounters,
) -> Result<ReuseBuffer<T>> {
    if plan.work.is_empty() {
        return Err(Error::Empty("reuse plan"));
    }
    let shape = table.shape();
    if *shape != plan.shape {
        return Err(Error::PlanMismatch("plan was built for a different shape".into()));
    }
    let slot_width = shape.n()[0] * shape.n()[1] * shape.ranks()[2];
    let mut data = Vec::with_capacity(plan.work.len() * slot_width);
    // slots are independent; this loop is the batched product
    for item in &plan.work {
        let left = first_slice(shape, table.core(0), item.core1_digit);
        data.extend(chain_step(&left, shape.n()[0], shape, table.core(1), 1, item.core2_digit));
    }
    counters.slice_mults += plan.work.len() as u64;
    Ok(ReuseBuffer { slot_width, data })
}

/// A plan together with the buffer computed from it.
#[derive(Debug, Clone)]
pub struct ReuseState<T> {
    pub plan: ReusePlan,
    pub buffer: ReuseBuffer<T>,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Sum-pooled embedding of `bag`.
///
/// Without `reuse`, every row is reconstructed independently (`d - 1` slice
/// products each). With `reuse`, rows sharing a prefix first sum their last-core
/// slices and then take one product with the buffered prefix.
pub fn lookup_bag<T: Scalar>(
    table: &TtTable<T>,
    bag: &IndexBag,
    reuse: Option<&ReuseState<T>>,
    counters: &mut OpCounters,
) -> Result<Vec<T>> {
    let shape = table.shape();
    bag.check_range(table.rows())?;
    let Some(state) = reuse else {
        let mut out: Option<Vec<T>> = None;
        for &i in bag.indices() {
            let row = table.reconstruct_digits(&table.digits(i)?);
            counters.slice_mults += (shape.d() - 1) as u64;
            match out.as_mut() {
                None => out = Some(row),
                Some(acc) => {
                    add_into(acc, &row);
                    counters.row_adds += 1;
                }
            }
        }
        return Ok(out.expect("bag is non-empty"));
    };

    if state.plan.shape != *shape {
        return Err(Error::PlanMismatch("plan was built for a different shape".into()));
    }
    let m3 = shape.m()[2];
    let r2 = shape.ranks()[2];
    let block = shape.n()[2];
    let prefix_rows = shape.n()[0] * shape.n()[1];
    if state.buffer.slot_width() != prefix_rows * r2 {
        return Err(Error::PlanMismatch("buffer slot width does not match the table".into()));
    }

    // group by prefix in first-occurrence order; fold sibling last-core slices
    let mut groups: Vec<(usize, Vec<T>)> = Vec::new();
    let mut group_of: HashMap<usize, usize> = HashMap::new();
    for &i in bag.indices() {
        let (prefix, i3) = (i / m3, i % m3);
        match group_of.get(&prefix) {
            Some(&g) => {
                let folded = &mut groups[g].1;
                for a in 0..r2 {
                    add_into(&mut folded[a * block..(a + 1) * block], slice_row(shape, table.core(2), 2, i3, a));
                }
                counters.row_adds += 1;
            }
            None => {
                let mut folded = Vec::with_capacity(r2 * block);
                for a in 0..r2 {
                    folded.extend_from_slice(slice_row(shape, table.core(2), 2, i3, a));
                }
                group_of.insert(prefix, groups.len());
                groups.push((prefix, folded));
            }
        }
    }

    let mut out: Option<Vec<T>> = None;
    for (prefix, folded) in &groups {
        let slot = state.plan.slot_of(*prefix).ok_or_else(|| {
            Error::PlanMismatch(format!("prefix {prefix} has no buffer slot"))
        })?;
        if slot >= state.buffer.len() {
            return Err(Error::PlanMismatch(format!("slot {slot} beyond buffer")));
        }
        let row = chain_with(state.buffer.slot(slot), prefix_rows, r2, block, |a| {
            &folded[a * block..(a + 1) * block]
        });
        counters.slice_mults += 1;
        match out.as_mut() {
            None => out = Some(row),
            Some(acc) => {
                add_into(acc, &row);
                counters.row_adds += 1;
            }
        }
    }
    Ok(out.expect("bag is non-empty"))
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `batch x cols`, row-major.
    pub embeddings: Vec<T>,
    pub counters: OpCounters,
    /// Present when the reuse path ran; backward can reuse its prefix products.
    pub reuse: Option<ReuseState<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn row(&self, b: usize, cols: usize) -> &[T] {
        &self.embeddings[b * cols..(b + 1) * cols]
    }
}

/// Looks up a batch of bags, sharing one plan and buffer across the batch.
///
/// `reuse` is ignored for tables that are not three-core.
pub fn forward_batch<T: Scalar>(
    table: &TtTable<T>,
    batch: &[IndexBag],
    reuse: bool,
) -> Result<ForwardOutput<T>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for bag in batch {
        bag.check_range(table.rows())?;
    }
    let mut counters = OpCounters::default();
    let state = if reuse && table.shape().d() == 3 {
        let all: Vec<usize> = batch.iter().flat_map(|b| b.indices().iter().copied()).collect();
        let plan = prepare_reuse_plan(&all, table.shape())?;
        counters.buffer_hits += plan.hits();
        counters.buffer_misses += plan.misses();
        let buffer = execute_prefix_products(&plan, table, &mut counters)?;
        Some(ReuseState { plan, buffer })
    } else {
        None
    };
    let cols = table.cols();
    let mut embeddings = Vec::with_capacity(batch.len() * cols);
    for bag in batch {
        embeddings.extend(lookup_bag(table, bag, state.as_ref(), &mut counters)?);
    }
    Ok(ForwardOutput { embeddings, counters, reuse: state })
}
