//! Locality-improving index bijection.
//!
//! Rows are ranked by access frequency; the most frequent ("hot") rows keep
//! their ids. The remaining cold rows are clustered by co-occurrence within
//! batches (greedy modularity maximization) and each cluster is laid out
//! contiguously, so ids that appear together tend to share TT prefixes.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lookup::prepare_reuse_plan;
use crate::tt::TtShape;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqOrder {
    /// Row index to frequency rank (0 = most accessed).
    pub rank_of: Vec<usize>,
    /// Rank to row index.
    pub index_at: Vec<usize>,
    /// Per-row access counts.
    pub counts: Vec<u64>,
}

impl FreqOrder {
    pub fn table_len(&self) -> usize {
        self.counts.len()
    }
}

fn check_batches(batches: &[Vec<usize>], table_len: usize) -> Result<()> {
    for b in batches {
        if let Some(&i) = b.iter().find(|&&i| i >= table_len) {
            return Err(Error::IndexOutOfRange { index: i, len: table_len });
        }
    }
    Ok(())
}

/// Counts occurrences; ranks by descending count, ties by ascending index.
pub fn count_frequencies(batches: &[Vec<usize>], table_len: usize) -> Result<FreqOrder> {
    check_batches(batches, table_len)?;
    let mut counts = vec![0u64; table_len];
    for &i in batches.iter().flatten() {
        counts[i] += 1;
    }
    let mut index_at: Vec<usize> = (0..table_len).collect();
    index_at.sort_by_key(|&i| (Reverse(counts[i]), i));
    let mut rank_of = vec![0; table_len];
    for (r, &i) in index_at.iter().enumerate() {
        rank_of[i] = r;
    }
    Ok(FreqOrder { rank_of, index_at, counts })
}

/// `floor(table_len * hot_ratio)`.
pub fn hot_threshold(table_len: usize, hot_ratio: f64) -> Result<usize> {
    if !(hot_ratio > 0.0 && hot_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("hot_ratio {hot_ratio} not in (0, 1)")));
    }
    Ok((table_len as f64 * hot_ratio).floor() as usize)
}

/// Co-occurrence graph over cold ranks; node `v` is rank `threshold + v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGraph {
    pub threshold: usize,
    pub nodes: usize,
    /// `(u, v, weight)` with `u < v`, sorted.
    pub edges: Vec<(usize, usize, u64)>,
    pub m_total: u64,
}

impl IndexGraph {
    pub fn from_edges(threshold: usize, nodes: usize, edges: impl IntoIterator<Item = (usize, usize, u64)>) -> Result<Self> {
        let mut acc: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for (u, v, w) in edges {
            if u == v || u >= nodes || v >= nodes || w == 0 {
                return Err(Error::InvalidArgument(format!("edge ({u}, {v}, {w})")));
            }
            *acc.entry((u.min(v), u.max(v))).or_default() += w;
        }
        let edges: Vec<_> = acc.into_iter().map(|((u, v), w)| (u, v, w)).collect();
        let m_total = edges.iter().map(|e| e.2).sum();
        Ok(Self { threshold, nodes, edges, m_total })
    }
}

/// Adds one unit of weight for every unordered pair of distinct cold ranks
/// present in each batch. Hot ranks are left out of the graph.
pub fn build_index_graph(batches: &[Vec<usize>], freq: &FreqOrder, hot_ratio: f64) -> Result<IndexGraph> {
    let table_len = freq.table_len();
    let threshold = hot_threshold(table_len, hot_ratio)?;
    check_batches(batches, table_len)?;
    let mut acc: HashMap<(usize, usize), u64> = HashMap::new();
    for batch in batches {
        let mut cold: Vec<usize> = batch
            .iter()
            .map(|&i| freq.rank_of[i])
            .filter(|&r| r >= threshold)
            .map(|r| r - threshold)
            .collect();
        cold.sort_unstable();
        cold.dedup();
        for (a, &u) in cold.iter().enumerate() {
            for &v in &cold[a + 1..] {
                *acc.entry((u, v)).or_default() += 1;
            }
        }
    }
    let mut edges: Vec<(usize, usize, u64)> = acc.into_iter().map(|((u, v), w)| (u, v, w)).collect();
    edges.sort_unstable();
    let m_total = edges.iter().map(|e| e.2).sum();
    Ok(IndexGraph { threshold, nodes: table_len - threshold, edges, m_total })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommunityAssignment {
    pub community_of: Vec<usize>,
    pub q: f64,
}

impl CommunityAssignment {
    pub fn communities(&self) -> usize {
        self.community_of.iter().max().map_or(0, |&c| c + 1)
    }

    /// Members of each community, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.communities()];
        for (v, &c) in self.community_of.iter().enumerate() {
            out[c].push(v);
        }
        out
    }
}

/// Newman modularity `sum_c [w_in(c)/m - (deg(c)/2m)^2]`.
pub fn modularity(graph: &IndexGraph, community_of: &[usize]) -> Result<f64> {
    if graph.m_total == 0 {
        return Err(Error::Empty("graph without edges"));
    }
    if community_of.len() != graph.nodes {
        return Err(Error::LengthMismatch(format!(
            "assignment covers {} of {} nodes",
            community_of.len(),
            graph.nodes
        )));
    }
    let mut w_in: HashMap<usize, u64> = HashMap::new();
    let mut deg: HashMap<usize, u64> = HashMap::new();
    for &(u, v, w) in &graph.edges {
        let (cu, cv) = (community_of[u], community_of[v]);
        if cu == cv {
            *w_in.entry(cu).or_default() += w;
        }
        *deg.entry(cu).or_default() += w;
        *deg.entry(cv).or_default() += w;
    }
    let m = graph.m_total as f64;
    let mut keys: Vec<usize> = deg.keys().copied().collect();
    keys.sort_unstable();
    Ok(keys
        .into_iter()
        .map(|c| {
            let win = w_in.get(&c).copied().unwrap_or(0) as f64;
            let d = deg[&c] as f64 / (2.0 * m);
            win / m - d * d
        })
        .sum())
}

/// Greedy agglomerative modularity maximization.
///
/// Starts from singletons and repeatedly merges the adjacent pair with the
/// largest gain (ties: smallest id pair), stopping when no merge gains.
/// Gains are compared exactly as the integer `2m*w_ij - d_i*d_j`, which is
/// `dQ * 2m^2`. Community ids in the result are dense, ordered by their
/// smallest node.
pub fn detect_communities(graph: &IndexGraph) -> CommunityAssignment {
    let n = graph.nodes;
    if graph.m_total == 0 {
        return CommunityAssignment { community_of: (0..n).collect(), q: 0.0 };
    }
    let two_m = 2 * graph.m_total as i128;
    let mut adj: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); n];
    let mut deg = vec![0i128; n];
    for &(u, v, w) in &graph.edges {
        *adj[u].entry(v).or_default() += w;
        *adj[v].entry(u).or_default() += w;
        deg[u] += w as i128;
        deg[v] += w as i128;
    }
    let gain = |adj: &[BTreeMap<usize, u64>], deg: &[i128], i: usize, j: usize| -> i128 {
        two_m * adj[i].get(&j).copied().unwrap_or(0) as i128 - deg[i] * deg[j]
    };
    let mut heap: BinaryHeap<(i128, Reverse<(usize, usize)>)> = BinaryHeap::new();
    for &(u, v, _) in &graph.edges {
        heap.push((gain(&adj, &deg, u, v), Reverse((u, v))));
    }
    let mut alive = vec![true; n];
    let mut parent: Vec<usize> = (0..n).collect();
    while let Some((g, Reverse((i, j)))) = heap.pop() {
        if !alive[i] || !alive[j] || !adj[i].contains_key(&j) || gain(&adj, &deg, i, j) != g {
            continue;
        }
        if g <= 0 {
            break;
        }
        // merge j into i (i < j)
        alive[j] = false;
        parent[j] = i;
        let moved = std::mem::take(&mut adj[j]);
        for (k, w) in moved {
            adj[k].remove(&j);
            if k != i {
                *adj[i].entry(k).or_default() += w;
                *adj[k].entry(i).or_default() += w;
            }
        }
        adj[i].remove(&j);
        deg[i] += deg[j];
        for &k in adj[i].keys() {
            let pair = (i.min(k), i.max(k));
            heap.push((gain(&adj, &deg, pair.0, pair.1), Reverse(pair)));
        }
    }
    let root = |mut v: usize| {
        while parent[v] != v {
            v = parent[v];
        }
        v
    };
    let mut dense_id: HashMap<usize, usize> = HashMap::new();
    let community_of: Vec<usize> = (0..n)
        .map(|v| {
            let r = root(v);
            let next = dense_id.len();
            *dense_id.entry(r).or_insert(next)
        })
        .collect();
    let q = modularity(graph, &community_of).expect("graph has edges");
    CommunityAssignment { community_of, q }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexBijection {
    pub forward: Vec<usize>,
    pub inverse: Vec<usize>,
}

impl IndexBijection {
    pub fn identity(n: usize) -> Self {
        Self { forward: (0..n).collect(), inverse: (0..n).collect() }
    }

    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (old, &new) in forward.iter().enumerate() {
            if new >= n || inverse[new] != usize::MAX {
                return Err(Error::Internal(format!("position {new} assigned twice or out of range")));
            }
            inverse[new] = old;
        }
        Ok(Self { forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn fixed_points(&self) -> usize {
        self.forward.iter().enumerate().filter(|(i, &f)| *i == f).count()
    }

    /// `old new` per line, sorted by `old`.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.forward.len() * 12);
        for (old, new) in self.forward.iter().enumerate() {
            writeln!(s, "{old} {new}").expect("string write");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut forward = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let err = |msg: &str| Error::Parse { line: n + 1, msg: msg.into() };
            let mut it = line.split_whitespace();
            let old: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| err("expected `old new`"))?;
            let new: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| err("expected `old new`"))?;
            if old != forward.len() {
                return Err(err("lines must be sorted by old index without gaps"));
            }
            forward.push(new);
        }
        Self::from_forward(forward)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Hot rows stay in place. Cold rows fill the remaining positions in
/// ascending order, grouped by community: communities by descending total
/// count (ties: smallest member index), members by descending count (ties:
/// ascending index).
pub fn build_bijection(assignment: &CommunityAssignment, graph: &IndexGraph, freq: &FreqOrder) -> Result<IndexBijection> {
    let table_len = freq.table_len();
    let t = graph.threshold;
    if assignment.community_of.len() != table_len - t || graph.nodes != table_len - t {
        return Err(Error::LengthMismatch(format!(
            "assignment covers {} cold nodes, expected {}",
            assignment.community_of.len(),
            table_len - t
        )));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); assignment.communities()];
    for (v, &c) in assignment.community_of.iter().enumerate() {
        groups[c].push(freq.index_at[t + v]);
    }
    for g in &mut groups {
        g.sort_by_key(|&i| (Reverse(freq.counts[i]), i));
    }
    let key = |g: &Vec<usize>| {
        let total: u64 = g.iter().map(|&i| freq.counts[i]).sum();
        (Reverse(total), g.iter().copied().min().unwrap_or(usize::MAX))
    };
    groups.retain(|g| !g.is_empty());
    groups.sort_by_cached_key(key);

    let mut forward = vec![usize::MAX; table_len];
    let mut is_hot = vec![false; table_len];
    for &i in &freq.index_at[..t] {
        forward[i] = i;
        is_hot[i] = true;
    }
    let mut free = (0..table_len).filter(|&p| !is_hot[p]);
    for &i in groups.iter().flatten() {
        let p = free.next().ok_or_else(|| Error::Internal("more cold rows than free positions".into()))?;
        forward[i] = p;
    }
    if free.next().is_some() {
        return Err(Error::Internal("free positions left after placing cold rows".into()));
    }
    IndexBijection::from_forward(forward)
}

pub fn apply_bijection(bijection: &IndexBijection, batches: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    check_batches(batches, bijection.len())?;
    Ok(batches.iter().map(|b| b.iter().map(|&i| bijection.forward[i]).collect()).collect())
}

/// Mean number of distinct prefixes (reuse-buffer slots) per batch.
pub fn mean_distinct_prefixes(batches: &[Vec<usize>], shape: &TtShape) -> Result<f64> {
    let non_empty: Vec<&Vec<usize>> = batches.iter().filter(|b| !b.is_empty()).collect();
    if non_empty.is_empty() {
        return Err(Error::Empty("batches"));
    }
    let mut total = 0usize;
    for b in &non_empty {
        total += prepare_reuse_plan(b, shape)?.buf_len();
    }
    Ok(total as f64 / non_empty.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReorderResult {
    pub bijection: IndexBijection,
    pub assignment: CommunityAssignment,
    pub threshold: usize,
}

impl ReorderResult {
    /// Communities with more than one member.
    pub fn clusters(&self) -> usize {
        self.assignment.members().iter().filter(|m| m.len() > 1).count()
    }
}

/// Frequency ranking, co-occurrence graph, communities and bijection in one pass.
pub fn learn_bijection(batches: &[Vec<usize>], table_len: usize, hot_ratio: f64) -> Result<ReorderResult> {
    let freq = count_frequencies(batches, table_len)?;
    let graph = build_index_graph(batches, &freq, hot_ratio)?;
    let assignment = detect_communities(&graph);
    let bijection = build_bijection(&assignment, &graph, &freq)?;
    Ok(ReorderResult { bijection, assignment, threshold: graph.threshold })
}
