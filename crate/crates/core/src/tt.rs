//! TT table representation, index arithmetic and the dense oracle.
//!
//! A table of `M x N` rows is stored as `d` cores. Core `k` has extent
//! `R_{k-1} x (m_k * n_k) x R_k` with the `(i_k, j_k)` pair flattened as
//! `i_k * n_k + j_k` on the middle axis, row-major overall. Fixing `i_k` gives
//! an `R_{k-1} x (n_k * R_k)` matrix view: the unit of the chained products
//! used by both lookup and backward.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Magic prefix of the binary table container.
pub const TABLE_MAGIC: &[u8; 7] = b"TTEMB1\n";

/// Largest `rows * cols` that [`TtTable::reconstruct_full`] will materialize.
pub const DENSE_GUARD: usize = 1 << 24;

const MAX_SERIALIZED_CORES: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtShape {
    m: Vec<usize>,
    n: Vec<usize>,
    ranks: Vec<usize>,
}

impl TtShape {
    pub fn new(m: Vec<usize>, n: Vec<usize>, ranks: Vec<usize>) -> Result<Self> {
        let d = m.len();
        if d < 2 {
            return Err(Error::InvalidShape(format!("need at least 2 cores, got {d}")));
        }
        if n.len() != d || ranks.len() != d + 1 {
            return Err(Error::InvalidShape(format!(
                "len(m)={}, len(n)={}, len(ranks)={} (expected d, d, d+1)",
                d,
                n.len(),
                ranks.len()
            )));
        }
        if m.iter().chain(&n).chain(&ranks).any(|&v| v == 0) {
            return Err(Error::InvalidShape("all factors and ranks must be positive".into()));
        }
        if ranks[0] != 1 || ranks[d] != 1 {
            return Err(Error::InvalidShape(format!(
                "boundary ranks must be 1, got R_0={} R_d={}",
                ranks[0], ranks[d]
            )));
        }
        let shape = Self { m, n, ranks };
        shape.rows_checked()?;
        shape.cols_checked()?;
        Ok(shape)
    }

    /// Shape with every internal rank equal to `rank`.
    pub fn with_rank(m: Vec<usize>, n: Vec<usize>, rank: usize) -> Result<Self> {
        let d = m.len();
        let mut ranks = vec![rank; d + 1];
        ranks[0] = 1;
        if let Some(last) = ranks.last_mut() {
            *last = 1;
        }
        Self::new(m, n, ranks)
    }

    fn rows_checked(&self) -> Result<usize> {
        self.m
            .iter()
            .try_fold(1usize, |acc, &v| acc.checked_mul(v))
            .ok_or_else(|| Error::InvalidShape("row count overflows".into()))
    }

    fn cols_checked(&self) -> Result<usize> {
        self.n
            .iter()
            .try_fold(1usize, |acc, &v| acc.checked_mul(v))
            .ok_or_else(|| Error::InvalidShape("column count overflows".into()))
    }

    pub fn d(&self) -> usize {
        self.m.len()
    }

    pub fn m(&self) -> &[usize] {
        &self.m
    }

    pub fn n(&self) -> &[usize] {
        &self.n
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// Padded row count, the product of `m`.
    pub fn rows(&self) -> usize {
        self.m.iter().product()
    }

    /// Embedding width, the product of `n`.
    pub fn cols(&self) -> usize {
        self.n.iter().product()
    }

    /// `(R_{k-1}, m_k * n_k, R_k)` for core `k` (0-based).
    pub fn core_dims(&self, k: usize) -> (usize, usize, usize) {
        (self.ranks[k], self.m[k] * self.n[k], self.ranks[k + 1])
    }

    pub fn core_len(&self, k: usize) -> usize {
        let (a, mid, b) = self.core_dims(k);
        a * mid * b
    }
}

/// Row and column factorizations produced by [`factorize_dims`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factorization {
    pub m: Vec<usize>,
    pub n: Vec<usize>,
}

impl Factorization {
    pub fn into_shape(self, rank: usize) -> Result<TtShape> {
        TtShape::with_rank(self.m, self.n, rank)
    }
}

/// Chooses `m` (covering `rows`, padding allowed) and `n` (exactly `cols`).
///
/// `m` minimizes the padded product among non-decreasing tuples whose factors
/// lie within 2x of `rows^(1/d)`; `n` is the most balanced exact factorization
/// with factors >= 2 (factors of 1 are allowed only when `cols < 2^d`). Ties go
/// to the smaller max/min ratio, then to the lexicographically smaller tuple.
pub fn factorize_dims(rows: usize, cols: usize, d: usize) -> Result<Factorization> {
    if !(2..=3).contains(&d) {
        return Err(Error::UnsupportedCores(d));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "rows and cols must be positive, got {rows}x{cols}"
        )));
    }
    Ok(Factorization {
        m: balanced_cover(rows, d),
        n: exact_factorization(cols, d)?,
    })
}

fn balance_cmp(a: &[usize], b: &[usize]) -> Ordering {
    // max_a / min_a vs max_b / min_b without floating point
    let (amax, amin) = (a.iter().max().unwrap(), a.iter().min().unwrap());
    let (bmax, bmin) = (b.iter().max().unwrap(), b.iter().min().unwrap());
    (amax * bmin).cmp(&(bmax * amin)).then_with(|| a.cmp(b))
}

fn balanced_cover(rows: usize, d: usize) -> Vec<usize> {
    let root = (rows as f64).powf(1.0 / d as f64);
    let lo = ((root / 2.0).ceil() as usize).max(1);
    let hi = ((2.0 * root).floor() as usize).max(lo).max(root.ceil() as usize);

    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut prefix = Vec::with_capacity(d);
    cover_search(rows, d, lo, hi, &mut prefix, &mut best);
    best.expect("ceil(root)^d always covers rows").1
}

fn cover_search(
    rows: usize,
    d: usize,
    lo: usize,
    hi: usize,
    prefix: &mut Vec<usize>,
    best: &mut Option<(usize, Vec<usize>)>,
) {
    let start = prefix.last().copied().unwrap_or(lo);
    let prod: usize = prefix.iter().product();
    if prefix.len() + 1 == d {
        // smallest last factor that covers `rows` for this prefix
        let last = rows.div_ceil(prod).max(start);
        if last > hi {
            return;
        }
        let mut cand = prefix.clone();
        cand.push(last);
        let total = prod * last;
        let better = match best {
            None => true,
            Some((bt, bv)) => total < *bt || (total == *bt && balance_cmp(&cand, bv).is_lt()),
        };
        if better {
            *best = Some((total, cand));
        }
        return;
    }
    for f in start..=hi {
        prefix.push(f);
        cover_search(rows, d, lo, hi, prefix, best);
        prefix.pop();
    }
}

fn exact_factorization(cols: usize, d: usize) -> Result<Vec<usize>> {
    let min_factor = if cols < (1usize << d) { 1 } else { 2 };
    let mut best: Option<Vec<usize>> = None;
    let mut prefix = Vec::with_capacity(d);
    exact_search(cols, d, min_factor, &mut prefix, &mut best);
    best.ok_or_else(|| {
        Error::InvalidShape(format!(
            "{cols} has no {d}-way factorization with all factors >= 2"
        ))
    })
}

fn exact_search(
    remaining: usize,
    d: usize,
    min_factor: usize,
    prefix: &mut Vec<usize>,
    best: &mut Option<Vec<usize>>,
) {
    let start = prefix.last().copied().unwrap_or(min_factor);
    if prefix.len() + 1 == d {
        if remaining >= start {
            let mut cand = prefix.clone();
            cand.push(remaining);
            if best.as_ref().is_none_or(|b| balance_cmp(&cand, b).is_lt()) {
                *best = Some(cand);
            }
        }
        return;
    }
    // the remaining slots are all >= f, so f^slots must not exceed what is left
    let slots = (d - prefix.len()) as u32;
    let mut f = start;
    while f.checked_pow(slots).is_some_and(|p| p <= remaining) {
        if remaining.is_multiple_of(f) {
            prefix.push(f);
            exact_search(remaining / f, d, min_factor, prefix, best);
            prefix.pop();
        }
        f += 1;
    }
}

/// Mixed-radix big-endian digits of `index` in radices `m`.
pub fn linear_index_to_tt_index(index: usize, m: &[usize]) -> Result<Vec<usize>> {
    let len: usize = m.iter().product();
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    let mut digits = vec![0; m.len()];
    let mut rest = index;
    for (digit, &radix) in digits.iter_mut().zip(m).rev() {
        *digit = rest % radix;
        rest /= radix;
    }
    Ok(digits)
}

/// Inverse of [`linear_index_to_tt_index`] (Horner evaluation).
pub fn tt_index_to_linear(digits: &[usize], m: &[usize]) -> usize {
    digits.iter().zip(m).fold(0, |acc, (&dgt, &radix)| acc * radix + dgt)
}

/// Row `a` of the `R_{k-1} x (n_k * R_k)` slice of core `k` at row digit `i_k`.
#[inline]
pub(crate) fn slice_row<'a, T: Scalar>(
    shape: &TtShape,
    core: &'a [T],
    k: usize,
    i_k: usize,
    a: usize,
) -> &'a [T] {
    let (_, mid, r_out) = shape.core_dims(k);
    let block = shape.n[k] * r_out;
    let start = a * mid * r_out + i_k * block;
    &core[start..start + block]
}

/// `acc (prefix x r_in) * slice (r_in x block)`, row-major, accumulating over
/// `r_in` in ascending order. Every contraction in the crate goes through here
/// so that equal inputs give bit-equal outputs regardless of the caller.
pub(crate) fn chain_with<'a, T: Scalar + 'a>(
    acc: &[T],
    prefix: usize,
    r_in: usize,
    block: usize,
    slice: impl Fn(usize) -> &'a [T],
) -> Vec<T> {
    let mut out = vec![T::zero(); prefix * block];
    for p in 0..prefix {
        let dst = &mut out[p * block..(p + 1) * block];
        for a in 0..r_in {
            let x = acc[p * r_in + a];
            for (o, &c) in dst.iter_mut().zip(slice(a)) {
                *o = *o + x * c;
            }
        }
    }
    out
}

/// One left-to-right contraction step.
///
/// `acc` is a `prefix x R_{k-1}` row-major matrix; the result is the
/// `(prefix * n_k) x R_k` product with the slice of core `k` at row digit `i_k`.
pub(crate) fn chain_step<T: Scalar>(
    acc: &[T],
    prefix: usize,
    shape: &TtShape,
    core: &[T],
    k: usize,
    i_k: usize,
) -> Vec<T> {
    let (r_in, _, r_out) = shape.core_dims(k);
    let block = shape.n[k] * r_out;
    chain_with(acc, prefix, r_in, block, |a| slice_row(shape, core, k, i_k, a))
}

/// The `1 x (n_1 * R_1)` slice of the first core at row digit `i_1`.
pub(crate) fn first_slice<T: Scalar>(shape: &TtShape, core: &[T], i_1: usize) -> Vec<T> {
    let block = shape.n[0] * shape.ranks[1];
    core[i_1 * block..(i_1 + 1) * block].to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtTable<T> {
    shape: TtShape,
    cores: Vec<Vec<T>>,
}

impl<T: Scalar> TtTable<T> {
    pub fn from_cores(shape: TtShape, cores: Vec<Vec<T>>) -> Result<Self> {
        if cores.len() != shape.d() {
            return Err(Error::InvalidShape(format!(
                "expected {} cores, got {}",
                shape.d(),
                cores.len()
            )));
        }
        for (k, core) in cores.iter().enumerate() {
            if core.len() != shape.core_len(k) {
                return Err(Error::InvalidShape(format!(
                    "core {k} has {} entries, expected {:?}",
                    core.len(),
                    shape.core_dims(k)
                )));
            }
            if core.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("core {k}")));
            }
        }
        Ok(Self { shape, cores })
    }

    pub fn zeros(shape: TtShape) -> Self {
        let cores = (0..shape.d()).map(|k| vec![T::zero(); shape.core_len(k)]).collect();
        Self { shape, cores }
    }

    /// Gaussian cores scaled so reconstructed entries have roughly `target_row_std`.
    pub fn init_random(shape: TtShape, seed: u64, target_row_std: f64) -> Result<Self> {
        if !(target_row_std > 0.0 && target_row_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "target_row_std must be positive, got {target_row_std}"
            )));
        }
        let d = shape.d() as f64;
        let inner = &shape.ranks[1..shape.d()];
        let mean_rank = inner.iter().sum::<usize>() as f64 / inner.len() as f64;
        let std = target_row_std.powf(1.0 / d) / mean_rank.powf((d - 1.0) / (2.0 * d));
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("normal({std}): {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cores = (0..shape.d())
            .map(|k| {
                (0..shape.core_len(k))
                    .map(|_| T::from_f64(normal.sample(&mut rng)))
                    .collect()
            })
            .collect();
        Ok(Self { shape, cores })
    }

    pub fn shape(&self) -> &TtShape {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows()
    }

    pub fn cols(&self) -> usize {
        self.shape.cols()
    }

    pub fn cores(&self) -> &[Vec<T>] {
        &self.cores
    }

    pub fn core(&self, k: usize) -> &[T] {
        &self.cores[k]
    }

    pub(crate) fn cores_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.cores
    }

    /// Raw parameter slices, in core order. Used by gradient checks.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.cores.iter_mut().map(Vec::as_mut_slice)
    }

    pub fn convert<U: Scalar>(&self) -> TtTable<U> {
        TtTable {
            shape: self.shape.clone(),
            cores: self
                .cores
                .iter()
                .map(|c| c.iter().map(|v| U::from_f64(v.as_f64())).collect())
                .collect(),
        }
    }

    pub fn digits(&self, index: usize) -> Result<Vec<usize>> {
        linear_index_to_tt_index(index, &self.shape.m)
    }

    /// Row `index` by strict left-to-right contraction over the cores.
    pub fn reconstruct_row(&self, index: usize) -> Result<Vec<T>> {
        let digits = self.digits(index)?;
        Ok(self.reconstruct_digits(&digits))
    }

    #[allow(clippy::needless_range_loop)]
    pub(crate) fn reconstruct_digits(&self, digits: &[usize]) -> Vec<T> {
        let mut acc = first_slice(&self.shape, &self.cores[0], digits[0]);
        let mut prefix = self.shape.n[0];
        for k in 1..self.shape.d() {
            acc = chain_step(&acc, prefix, &self.shape, &self.cores[k], k, digits[k]);
            prefix *= self.shape.n[k];
        }
        acc
    }

    pub fn reconstruct_full(&self) -> Result<DenseTable<T>> {
        let (rows, cols) = (self.rows(), self.cols());
        if rows.saturating_mul(cols) > DENSE_GUARD {
            return Err(Error::TooLarge { rows, cols });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(self.reconstruct_row(i)?);
        }
        Ok(DenseTable { rows, cols, data })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TABLE_MAGIC)?;
        let d = self.shape.d();
        w.write_all(&(d as u64).to_le_bytes())?;
        for &v in self.shape.m.iter().chain(&self.shape.n).chain(&self.shape.ranks) {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for core in &self.cores {
            for v in core {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::Format("bad table magic".into()));
        }
        let d = read_u64(&mut r)?;
        if !(2..=MAX_SERIALIZED_CORES).contains(&d) {
            return Err(Error::Format(format!("implausible core count {d}")));
        }
        let d = d as usize;
        let mut dims = Vec::with_capacity(3 * d + 1);
        for _ in 0..3 * d + 1 {
            dims.push(usize::try_from(read_u64(&mut r)?).map_err(|_| {
                Error::Format("dimension does not fit in usize".into())
            })?);
        }
        let ranks = dims.split_off(2 * d);
        let n = dims.split_off(d);
        let shape = TtShape::new(dims, n, ranks)?;
        let mut cores = Vec::with_capacity(d);
        for k in 0..d {
            let len = shape.core_len(k);
            let mut bytes = vec![0u8; len * 4];
            r.read_exact(&mut bytes)?;
            cores.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                    .collect(),
            );
        }
        Self::from_cores(shape, cores)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Uncompressed `rows x cols` table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTable<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseTable<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch(format!(
                "{} values for a {rows}x{cols} table",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn init_random(rows: usize, cols: usize, seed: u64, std: f64) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("normal({std}): {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamStats {
    pub tt_params: usize,
    pub dense_params: usize,
    pub ratio: f64,
}

/// Parameter counts of a TT shape against an uncompressed `rows x cols` table.
pub fn param_stats(shape: &TtShape, rows: usize, cols: usize) -> ParamStats {
    let tt_params: usize = (0..shape.d()).map(|k| shape.core_len(k)).sum();
    let dense_params = rows * cols;
    ParamStats { tt_params, dense_params, ratio: dense_params as f64 / tt_params as f64 }
}
