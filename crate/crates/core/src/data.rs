//! Synthetic datasets, min-max normalization, CSV I/O and batching.
//!
//! The generator mirrors the schema of a small power-grid intrusion dataset:
//! a handful of dense measurements, several categorical fields whose ids
//! follow a power law, and a minority "attacked" class. Labels come from a
//! hidden linear scorer over the standardized dense features plus membership
//! of each field's bag in a planted set of attacked ids.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample count of the default dataset.
pub const DEFAULT_SAMPLES: usize = 24_800;
/// Positive (attacked) samples in the default dataset.
pub const DEFAULT_POSITIVES: usize = 4_800;

const MAX_BAG: usize = 3;
const ATTACKED_POOL: usize = 40;
const ATTACKED_PER_FIELD: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub n_dense: usize,
    pub n_sparse: usize,
    pub rows_per_field: Vec<usize>,
    pub zipf_s: f64,
    pub attack_fraction: f64,
    pub seed: u64,
    /// Planted co-occurrence clusters; 0 disables them. With `k > 0` the
    /// samples come in consecutive segments, each drawing most of its sparse
    /// ids from one cluster's (scattered) id set.
    pub clusters: usize,
}

impl DatasetSpec {
    /// 6 dense and 7 sparse fields, 24,800 samples of which 4,800 are attacked.
    pub fn ieee118_like(seed: u64) -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            n_dense: 6,
            n_sparse: 7,
            rows_per_field: vec![100_000, 50_000, 20_000, 10_000, 5_000, 500, 64],
            zipf_s: 1.05,
            attack_fraction: DEFAULT_POSITIVES as f64 / DEFAULT_SAMPLES as f64,
            seed,
            clusters: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_dense == 0 {
            return Err(Error::InvalidArgument("sample and dense counts must be positive".into()));
        }
        if self.rows_per_field.len() != self.n_sparse {
            return Err(Error::InvalidArgument(format!(
                "{} row counts for {} sparse fields",
                self.rows_per_field.len(),
                self.n_sparse
            )));
        }
        if self.rows_per_field.contains(&0) {
            return Err(Error::InvalidArgument("every sparse field needs at least one row".into()));
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return Err(Error::InvalidArgument(format!("zipf exponent {}", self.zipf_s)));
        }
        if !(self.attack_fraction > 0.0 && self.attack_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "attack fraction {} not in (0, 1)",
                self.attack_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: f64,
    pub dense: Vec<f64>,
    pub sparse: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_dense: usize,
    pub rows_per_field: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn n_sparse(&self) -> usize {
        self.rows_per_field.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label >= 0.5).count()
    }

    /// Concatenated ids of `field` for each batch of sample ids.
    pub fn field_batches(&self, batches: &[Vec<usize>], field: usize) -> Vec<Vec<usize>> {
        batches
            .iter()
            .map(|b| b.iter().flat_map(|&s| self.samples[s].sparse[field].iter().copied()).collect())
            .collect()
    }
}

/// Zipf(s) over `rows` ranks, returned 0-based (rank 0 is the most popular).
#[derive(Debug, Clone, Copy)]
pub struct ZipfSampler {
    inner: Zipf<f64>,
}

impl ZipfSampler {
    pub fn new(rows: usize, s: f64) -> Result<Self> {
        let inner = Zipf::new(rows as f64, s)
            .map_err(|e| Error::InvalidArgument(format!("zipf({rows}, {s}): {e}")))?;
        Ok(Self { inner })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.inner.sample(rng) as usize - 1
    }
}

/// Rounds to 9 significant decimal digits so CSV output round-trips exactly.
pub fn round_sig9(x: f64) -> f64 {
    fmt_sig9(x).parse().expect("formatted float parses")
}

fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding can carry into a new leading digit (9.99999999996 -> 10.00000000)
    let digits = s.chars().filter(char::is_ascii_digit).skip_while(|&c| c == '0').count();
    if digits > 9 && decimals > 0 {
        let decimals = decimals - 1;
        format!("{x:.decimals$}")
    } else {
        s
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for component `tag` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Per-field scattered id assignment: Zipf rank `r` maps to id `perm[r]`.
fn field_permutation(rows: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let offsets: Vec<f64> = (0..spec.n_dense).map(|_| rng.random_range(-5.0..5.0)).collect();
    let scales: Vec<f64> = (0..spec.n_dense).map(|_| rng.random_range(0.5..3.0)).collect();
    let weights: Vec<f64> = (0..spec.n_dense).map(|_| std_normal.sample(&mut rng)).collect();
    let dense_norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    let sparse_weight = 3.0 * dense_norm;

    let samplers = spec
        .rows_per_field
        .iter()
        .map(|&r| ZipfSampler::new(r, spec.zipf_s))
        .collect::<Result<Vec<_>>>()?;
    let perms: Vec<Vec<usize>> = spec
        .rows_per_field
        .iter()
        .enumerate()
        .map(|(f, &r)| field_permutation(r, derive_seed(spec.seed, 100 + f as u64)))
        .collect();
    // attacked ids: a few of the most popular ranks of each field
    let attacked: Vec<Vec<bool>> = spec
        .rows_per_field
        .iter()
        .enumerate()
        .map(|(f, &rows)| {
            let pool = rows.min(ATTACKED_POOL);
            let mut ranks: Vec<usize> = (0..pool).collect();
            ranks.shuffle(&mut rng);
            let mut flags = vec![false; rows];
            for &r in ranks.iter().take(ATTACKED_PER_FIELD.min(pool.div_ceil(4))) {
                flags[perms[f][r]] = true;
            }
            flags
        })
        .collect();
    let cluster_members = cluster_sets(spec, &perms, &mut rng);

    let segment = if spec.clusters > 0 { spec.n_samples.div_ceil(spec.clusters * 8).max(1) } else { 1 };
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut scores = Vec::with_capacity(spec.n_samples);
    for t in 0..spec.n_samples {
        let dense: Vec<f64> = (0..spec.n_dense)
            .map(|i| round_sig9(offsets[i] + scales[i] * std_normal.sample(&mut rng)))
            .collect();
        let cluster = (spec.clusters > 0).then(|| (t / segment) % spec.clusters);
        let sparse: Vec<Vec<usize>> = (0..spec.n_sparse)
            .map(|f| {
                let len = rng.random_range(1..=MAX_BAG);
                (0..len)
                    .map(|_| match cluster {
                        Some(c) if rng.random_bool(0.7) => {
                            let members = &cluster_members[f][c];
                            members[rng.random_range(0..members.len())]
                        }
                        _ => perms[f][samplers[f].sample(&mut rng)],
                    })
                    .collect()
            })
            .collect();
        let mut score: f64 = (0..spec.n_dense)
            .map(|i| weights[i] * (dense[i] - offsets[i]) / scales[i])
            .sum();
        for (f, bag) in sparse.iter().enumerate() {
            score += sparse_weight * bag.iter().filter(|&&i| attacked[f][i]).count() as f64;
        }
        scores.push(score);
        samples.push(Sample { label: 0.0, dense, sparse });
    }

    let positives = ((spec.attack_fraction * spec.n_samples as f64).round() as usize).clamp(1, spec.n_samples - 1);
    let mut order: Vec<usize> = (0..spec.n_samples).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &s in order.iter().take(positives) {
        samples[s].label = 1.0;
    }
    Ok(Dataset { n_dense: spec.n_dense, rows_per_field: spec.rows_per_field.clone(), samples })
}

/// Id sets of the planted clusters, drawn from the cold tail of each field.
fn cluster_sets(spec: &DatasetSpec, perms: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<usize>>> {
    if spec.clusters == 0 {
        return vec![Vec::new(); spec.n_sparse];
    }
    spec.rows_per_field
        .iter()
        .enumerate()
        .map(|(f, &rows)| {
            let cold_start = (rows / 10).min(rows - 1);
            let mut cold: Vec<usize> = perms[f][cold_start..].to_vec();
            cold.shuffle(rng);
            let size = (cold.len() / spec.clusters).clamp(1, 32);
            (0..spec.clusters)
                .map(|c| {
                    let start = (c * size) % cold.len();
                    (0..size).map(|k| cold[(start + k) % cold.len()]).collect()
                })
                .collect()
        })
        .collect()
}

/// Per-feature minimum and maximum of the dense features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit(dataset: &Dataset) -> Self {
        let mut min = vec![f64::INFINITY; dataset.n_dense];
        let mut max = vec![f64::NEG_INFINITY; dataset.n_dense];
        for s in &dataset.samples {
            for (i, &v) in s.dense.iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Self { min, max }
    }

    /// `(x - min) / (max - min)`; features with `max <= min` map to 0.
    pub fn apply(&self, dataset: &mut Dataset) {
        for s in &mut dataset.samples {
            for (i, v) in s.dense.iter_mut().enumerate() {
                let range = self.max[i] - self.min[i];
                *v = if range > 0.0 { (*v - self.min[i]) / range } else { 0.0 };
            }
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (lo, hi) in self.min.iter().zip(&self.max) {
            writeln!(out, "{lo:?} {hi:?}").expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let (mut min, mut max) = (Vec::new(), Vec::new());
        for (n, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<f64> {
                tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
                    line: n + 1,
                    msg: "expected `min max`".into(),
                })
            };
            min.push(parse(it.next())?);
            max.push(parse(it.next())?);
        }
        Ok(Self { min, max })
    }
}

/// Min-max normalizes the dense features in place of a copy; returns the stats.
pub fn normalize_dense(dataset: &Dataset) -> (Dataset, NormStats) {
    let stats = NormStats::fit(dataset);
    let mut out = dataset.clone();
    stats.apply(&mut out);
    (out, stats)
}

fn header(dataset: &Dataset) -> String {
    let mut cols = vec!["label".to_string()];
    cols.extend((0..dataset.n_dense).map(|i| format!("d{i}")));
    cols.extend(dataset.rows_per_field.iter().enumerate().map(|(f, r)| format!("s{f}:{r}")));
    cols.join(",")
}

pub fn write_csv_to<W: Write>(dataset: &Dataset, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{}", header(dataset))?;
    let mut line = String::new();
    for s in &dataset.samples {
        line.clear();
        write!(line, "{}", s.label).expect("string write");
        for &v in &s.dense {
            line.push(',');
            line.push_str(&fmt_sig9(v));
        }
        for bag in &s.sparse {
            line.push(',');
            for (k, i) in bag.iter().enumerate() {
                if k > 0 {
                    line.push('|');
                }
                write!(line, "{i}").expect("string write");
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv_to(dataset, std::fs::File::create(path)?)
}

/// Parses the CSV format. Sparse header columns may carry their row count as
/// `s<k>:<rows>`; without it the count is inferred as `max id + 1`.
pub fn read_csv_from<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let head = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })??;
    let cols: Vec<&str> = head.trim_end().split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(Error::Parse { line: 1, msg: "first column must be `label`".into() });
    }
    let n_dense = cols.iter().filter(|c| c.starts_with('d')).count();
    let mut declared: Vec<Option<usize>> = Vec::new();
    for (k, c) in cols.iter().enumerate().skip(1) {
        let expect_dense = k <= n_dense;
        match (expect_dense, c.strip_prefix('s')) {
            (true, _) if c.starts_with('d') => {}
            (false, Some(rest)) => {
                let rows = match rest.split_once(':') {
                    Some((_, r)) => Some(r.parse::<usize>().map_err(|_| Error::Parse {
                        line: 1,
                        msg: format!("bad row count in column `{c}`"),
                    })?),
                    None => None,
                };
                declared.push(rows);
            }
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("unexpected column `{c}` (dense columns must precede sparse ones)"),
                })
            }
        }
    }
    let n_sparse = declared.len();

    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 1 + n_dense + n_sparse {
            return Err(err(format!("expected {} fields, got {}", 1 + n_dense + n_sparse, fields.len())));
        }
        let label: f64 = fields[0].parse().map_err(|_| err(format!("bad label `{}`", fields[0])))?;
        let dense = fields[1..=n_dense]
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad dense value `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sparse = Vec::with_capacity(n_sparse);
        for (f, tok) in fields[1 + n_dense..].iter().enumerate() {
            let bag = tok
                .split('|')
                .map(|t| t.parse::<usize>().map_err(|_| err(format!("bad sparse id `{t}` in field {f}"))))
                .collect::<Result<Vec<_>>>()?;
            if let (Some(rows), Some(&bad)) = (declared[f], bag.iter().find(|&&i| Some(i) >= declared[f])) {
                return Err(err(format!("sparse id {bad} out of range for field {f} with {rows} rows")));
            }
            sparse.push(bag);
        }
        samples.push(Sample { label, dense, sparse });
    }
    let rows_per_field = declared
        .iter()
        .enumerate()
        .map(|(f, d)| {
            d.unwrap_or_else(|| samples.iter().flat_map(|s| s.sparse[f].iter()).max().map_or(1, |m| m + 1))
        })
        .collect();
    Ok(Dataset { n_dense, rows_per_field, samples })
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv_from(BufReader::new(std::fs::File::open(path)?))
}

/// Shuffled batches of sample ids; the last batch may be short.
pub fn batch_iter(n_samples: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut ids: Vec<usize> = (0..n_samples).collect();
    if let Some(seed) = shuffle_seed {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(ids.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// 80/20 split by a hash of the sample id: `(train, test)`.
pub fn train_test_split(n_samples: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n_samples).partition(|&i| !splitmix64(i as u64).is_multiple_of(5))
}

/// Restricts `dataset` to the given sample ids, in order.
pub fn subset(dataset: &Dataset, ids: &[usize]) -> Dataset {
    Dataset {
        n_dense: dataset.n_dense,
        rows_per_field: dataset.rows_per_field.clone(),
        samples: ids.iter().map(|&i| dataset.samples[i].clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_samples: 500,
            n_dense: 3,
            n_sparse: 2,
            rows_per_field: vec![200, 30],
            zipf_s: 1.05,
            attack_fraction: 0.2,
            seed,
            clusters: 0,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_synthetic(&small_spec(1)).unwrap(), gen_synthetic(&small_spec(1)).unwrap());
        assert_ne!(gen_synthetic(&small_spec(1)).unwrap(), gen_synthetic(&small_spec(2)).unwrap());
    }

    #[test]
    fn positives_hit_fraction() {
        let ds = gen_synthetic(&small_spec(3)).unwrap();
        assert_eq!(ds.positives(), 100);
        for s in &ds.samples {
            assert!(s.sparse.iter().all(|b| (1..=MAX_BAG).contains(&b.len())));
            assert!(s.sparse[0].iter().all(|&i| i < 200) && s.sparse[1].iter().all(|&i| i < 30));
        }
    }

    #[test]
    fn uniform_when_exponent_zero() {
        let z = ZipfSampler::new(10, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[z.sample(&mut rng)] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 9 degrees of freedom, 99.9th percentile is 27.9
        assert!(chi2 < 27.9, "chi2={chi2}");
    }

    #[test]
    fn skewed_head() {
        let z = ZipfSampler::new(4096, 1.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let mut counts = vec![0usize; 4096];
        for _ in 0..draws {
            counts[z.sample(&mut rng)] += 1;
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: usize = counts[..41].iter().sum();
        assert!(top as f64 >= 0.2 * draws as f64, "top 1% got {top}");
    }

    #[test]
    fn normalization() {
        let mut ds = Dataset {
            n_dense: 2,
            rows_per_field: vec![],
            samples: [0.0, 5.0, 10.0]
                .iter()
                .map(|&v| Sample { label: 0.0, dense: vec![v, 3.0], sparse: vec![] })
                .collect(),
        };
        let (norm, stats) = normalize_dense(&ds);
        let col0: Vec<f64> = norm.samples.iter().map(|s| s.dense[0]).collect();
        assert_eq!(col0, vec![0.0, 0.5, 1.0]);
        assert!(norm.samples.iter().all(|s| s.dense[1] == 0.0));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.txt");
        stats.write(&p).unwrap();
        let back = NormStats::read(&p).unwrap();
        assert_eq!(back, stats);
        back.apply(&mut ds);
        assert_eq!(ds, norm);
    }

    #[test]
    fn csv_example_row() {
        let ds = read_csv_from("label,d0,s0\n1,0.5,3|7\n".as_bytes()).unwrap();
        assert_eq!(ds.samples[0], Sample { label: 1.0, dense: vec![0.5], sparse: vec![vec![3, 7]] });
        assert_eq!(ds.rows_per_field, vec![8]);
    }

    #[test]
    fn csv_errors_name_line() {
        let e = read_csv_from("label,d0,s0:5\n1,0.5,3\n0,0.1,9\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = read_csv_from("label,d0,s0\n1,zz,3\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        assert!(read_csv_from("".as_bytes()).is_err());
        assert!(read_csv_from("label,d0,s0\n1,0.5\n".as_bytes()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_synthetic(&small_spec(4)).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&ds, &mut buf).unwrap();
        let back = read_csv_from(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.5), "0.500000000");
        assert_eq!(fmt_sig9(-1234.56789012), "-1234.56789");
        assert_eq!(fmt_sig9(9.999999999), "10.0000000");
        for x in [1e-3, 3.24159265358979, -2.618281828459, 123456789.5, 0.0] {
            let r = round_sig9(x);
            assert_eq!(round_sig9(r), r);
            assert_eq!(fmt_sig9(r).parse::<f64>().unwrap(), r);
        }
    }

    #[test]
    fn batching() {
        assert_eq!(batch_iter(10, 10, Some(1)).unwrap().len(), 1);
        assert_eq!(batch_iter(10, 3, Some(7)).unwrap(), batch_iter(10, 3, Some(7)).unwrap());
        let batches = batch_iter(103, 10, Some(5)).unwrap();
        assert_eq!(batches.len(), 11);
        assert_eq!(batches.last().unwrap().len(), 3);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert!(batch_iter(10, 0, None).is_err());
    }

    #[test]
    fn split_is_roughly_80_20() {
        let (train, test) = train_test_split(10_000);
        assert_eq!(train.len() + test.len(), 10_000);
        assert!((1800..2200).contains(&test.len()));
    }

    #[test]
    fn invalid_specs() {
        let mut s = small_spec(0);
        s.attack_fraction = 1.0;
        assert!(gen_synthetic(&s).is_err());
        let mut s = small_spec(0);
        s.rows_per_field = vec![10];
        assert!(gen_synthetic(&s).is_err());
    }
}
