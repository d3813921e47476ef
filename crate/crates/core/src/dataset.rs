//! Sample schema, CSV I/O, grid classing and per-class balancing.
//!
//! Each sample carries the measured currents at `k` and `k+1`, the angle at
//! `k` and the elementary vectors applied at `k` and `k-1`. Datasets are
//! partitioned by `n_k` into seven subsets; within each subset, samples are
//! assigned to cells of a `(i_d, i_q, eps)` grid using the values at `k`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::normalize_angle;
use crate::NUM_SUBSETS;

/// One recorded transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub i_d_k: f64,
    pub i_q_k: f64,
    /// Electrical angle at `k`, in `(-pi, pi]`.
    pub eps_k: f64,
    pub n_k: u8,
    pub n_k_prev: u8,
    pub i_d_k1: f64,
    pub i_q_k1: f64,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        for n in [self.n_k, self.n_k_prev] {
            if !(1..=NUM_SUBSETS as u8).contains(&n) {
                return Err(Error::Validation(format!(
                    "sample vector index must be in 1..=7, got {n}"
                )));
            }
        }
        let values = [self.i_d_k, self.i_q_k, self.eps_k, self.i_d_k1, self.i_q_k1];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value in sample {self:?}")));
        }
        Ok(())
    }
}

/// Collection of samples, partitioned by `n_k` on demand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            s.validate()?;
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices of each subset; entry `n - 1` holds subset `n`.
    pub fn partitions(&self) -> [Vec<usize>; NUM_SUBSETS] {
        let mut parts: [Vec<usize>; NUM_SUBSETS] = Default::default();
        for (i, s) in self.samples.iter().enumerate() {
            parts[usize::from(s.n_k - 1)].push(i);
        }
        parts
    }

    pub fn subset(&self, n: u8) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.n_k == n)
    }

    pub fn subset_counts(&self) -> [usize; NUM_SUBSETS] {
        let mut counts = [0; NUM_SUBSETS];
        for s in &self.samples {
            counts[usize::from(s.n_k - 1)] += 1;
        }
        counts
    }

    /// Seeded random split; the second part holds `round(fraction * len)` samples.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let (first, second) = split_indices(self.len(), fraction, seed);
        (
            Dataset {
                samples: first.iter().map(|&i| self.samples[i]).collect(),
            },
            Dataset {
                samples: second.iter().map(|&i| self.samples[i]).collect(),
            },
        )
    }

    pub fn shuffle(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.samples.shuffle(&mut rng);
    }
}

/// Shuffled index split into `(len - m, m)` parts with `m = round(fraction * len)`.
pub fn split_indices(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let m = ((fraction.clamp(0.0, 1.0) * len as f64).round() as usize).min(len);
    let second = idx.split_off(len - m);
    (idx, second)
}

// ---------------------------------------------------------------------------
// CSV schema

pub const CSV_HEADER: [&str; 7] = [
    "i_d_k", "i_q_k", "epsilon_k", "n_k", "n_k_prev", "i_d_k1", "i_q_k1",
];

/// Column names to read each sample field from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMapping {
    pub i_d_k: String,
    pub i_q_k: String,
    pub epsilon_k: String,
    pub n_k: String,
    pub n_k_prev: String,
    pub i_d_k1: String,
    pub i_q_k1: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        let [a, b, c, d, e, f, g] = CSV_HEADER.map(String::from);
        Self {
            i_d_k: a,
            i_q_k: b,
            epsilon_k: c,
            n_k: d,
            n_k_prev: e,
            i_d_k1: f,
            i_q_k1: g,
        }
    }
}

impl ColumnMapping {
    /// Column names of the published measurement file.
    pub fn kaggle() -> Self {
        Self {
            i_d_k: "id_k".into(),
            i_q_k: "iq_k".into(),
            epsilon_k: "epsilon_k".into(),
            n_k: "n_k".into(),
            n_k_prev: "n_1k".into(),
            i_d_k1: "id_k1".into(),
            i_q_k1: "iq_k1".into(),
        }
    }

    /// Applies `field=column` overrides separated by commas, e.g.
    /// `i_d_k=id_k,n_k_prev=n_1k`.
    pub fn with_overrides(mut self, spec: &str) -> Result<Self> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (field, column) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("column mapping entry `{part}` lacks `=`")))?;
            let column = column.trim().to_string();
            match field.trim() {
                "i_d_k" => self.i_d_k = column,
                "i_q_k" => self.i_q_k = column,
                "epsilon_k" => self.epsilon_k = column,
                "n_k" => self.n_k = column,
                "n_k_prev" => self.n_k_prev = column,
                "i_d_k1" => self.i_d_k1 = column,
                "i_q_k1" => self.i_q_k1 = column,
                other => {
                    return Err(Error::Config(format!("unknown sample field `{other}` in column mapping")))
                }
            }
        }
        Ok(self)
    }

    fn names(&self) -> [&str; 7] {
        [
            &self.i_d_k,
            &self.i_q_k,
            &self.epsilon_k,
            &self.n_k,
            &self.n_k_prev,
            &self.i_d_k1,
            &self.i_q_k1,
        ]
    }
}

/// Writes the dataset in the canonical schema with 17 significant digits.
pub fn write_csv<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for s in &d.samples {
        w.write_record([
            format!("{:.16e}", s.i_d_k),
            format!("{:.16e}", s.i_q_k),
            format!("{:.16e}", s.eps_k),
            s.n_k.to_string(),
            s.n_k_prev.to_string(),
            format!("{:.16e}", s.i_d_k1),
            format!("{:.16e}", s.i_q_k1),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_csv_file(d: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(d, std::io::BufWriter::new(file))
}

/// Reads samples, locating columns by name through `mapping`.
///
/// Extra columns are ignored. Angles are wrapped into `(-pi, pi]`; vector
/// indices outside `1..=7` are rejected with the offending line number.
pub fn read_csv<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut positions = [0usize; 7];
    for (slot, name) in positions.iter_mut().zip(mapping.names()) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}` in header {:?}", headers.iter().collect::<Vec<_>>()),
        })?;
    }
    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |k: usize| -> Result<&str> {
            record.get(positions[k]).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field `{}`", mapping.names()[k]),
            })
        };
        let float = |k: usize| -> Result<f64> {
            let raw = field(k)?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{raw}` in column `{}` is not a number", mapping.names()[k]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value in column `{}`", mapping.names()[k]),
                });
            }
            Ok(v)
        };
        let index = |k: usize| -> Result<u8> {
            let raw = field(k)?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{raw}` in column `{}` is not an integer", mapping.names()[k]),
            })?;
            if v.fract() != 0.0 || !(1.0..=NUM_SUBSETS as f64).contains(&v) {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "vector index `{raw}` in column `{}` outside 1..=7",
                        mapping.names()[k]
                    ),
                });
            }
            Ok(v as u8)
        };
        samples.push(Sample {
            i_d_k: float(0)?,
            i_q_k: float(1)?,
            eps_k: normalize_angle(float(2)?),
            n_k: index(3)?,
            n_k_prev: index(4)?,
            i_d_k1: float(5)?,
            i_q_k1: float(6)?,
        });
    }
    Ok(Dataset { samples })
}

pub fn read_csv_file(path: &Path, mapping: &ColumnMapping) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), mapping)
}

// ---------------------------------------------------------------------------
// Grid classing

/// One grid dimension covering `[lo, hi]` with equal steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn bins(&self) -> usize {
        ((self.hi - self.lo) / self.step).round() as usize
    }

    fn validate(&self, name: &str) -> Result<()> {
        let span = self.hi - self.lo;
        if !(self.step > 0.0 && span > 0.0) {
            return Err(Error::Validation(format!("grid axis {name} must have hi > lo and step > 0")));
        }
        let bins = self.bins() as f64;
        if (bins * self.step - span).abs() > 1e-9 * span {
            return Err(Error::Validation(format!(
                "grid step {} does not divide the {name} range [{}, {}]",
                self.step, self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Half-open bins with the upper edge folded into the last bin.
    fn bin(&self, value: f64) -> Option<usize> {
        let tol = 1e-9 * self.step;
        if !(value >= self.lo - tol && value <= self.hi + tol) {
            return None;
        }
        let b = ((value - self.lo) / self.step).floor();
        Some((b.max(0.0) as usize).min(self.bins() - 1))
    }

    fn edges(&self, b: usize) -> (f64, f64) {
        (
            self.lo + b as f64 * self.step,
            self.lo + (b + 1) as f64 * self.step,
        )
    }
}

/// Classing grid over `(i_d, i_q, eps)` and the current-vector limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub i_d: GridAxis,
    pub i_q: GridAxis,
    pub eps: GridAxis,
    pub i_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            i_d: GridAxis {
                lo: -240.0,
                hi: 0.0,
                step: 10.0,
            },
            i_q: GridAxis {
                lo: -240.0,
                hi: 0.0,
                step: 10.0,
            },
            eps: GridAxis {
                lo: -PI,
                hi: PI,
                step: PI / 18.0,
            },
            i_max: 240.0,
        }
    }
}

/// Cell of the classing grid; bins count upward from the lower range edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassIndex {
    pub d_bin: usize,
    pub q_bin: usize,
    pub eps_bin: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        self.i_d.validate("i_d")?;
        self.i_q.validate("i_q")?;
        self.eps.validate("eps")?;
        if !(self.i_max >= 0.0) {
            return Err(Error::Validation("i_max must be non-negative".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.i_d.bins(), self.i_q.bins(), self.eps.bins())
    }

    pub fn num_cells(&self) -> usize {
        let (a, b, c) = self.dims();
        a * b * c
    }

    pub fn flat_index(&self, c: &ClassIndex) -> usize {
        let (_, nq, ne) = self.dims();
        (c.d_bin * nq + c.q_bin) * ne + c.eps_bin
    }

    pub fn from_flat(&self, flat: usize) -> ClassIndex {
        let (_, nq, ne) = self.dims();
        ClassIndex {
            d_bin: flat / (nq * ne),
            q_bin: (flat / ne) % nq,
            eps_bin: flat % ne,
        }
    }

    /// Whether dq-cell `(d_bin, q_bin)` overlaps the quarter disc
    /// `{i_d <= 0, i_q <= 0, |i| <= i_max}` with positive area, i.e. its
    /// corner closest to the origin lies strictly inside the disc.
    pub fn is_valid_dq_cell(&self, d_bin: usize, q_bin: usize) -> bool {
        let (d_lo, d_hi) = self.i_d.edges(d_bin);
        let (q_lo, q_hi) = self.i_q.edges(q_bin);
        let (d_hi, q_hi) = (d_hi.min(0.0), q_hi.min(0.0));
        if d_hi <= d_lo || q_hi <= q_lo {
            return false;
        }
        let closest = |lo: f64, hi: f64| lo.abs().min(hi.abs());
        closest(d_lo, d_hi).hypot(closest(q_lo, q_hi)) < self.i_max
    }

    pub fn valid_dq_cells(&self) -> Vec<(usize, usize)> {
        let (nd, nq, _) = self.dims();
        (0..nd)
            .flat_map(|d| (0..nq).map(move |q| (d, q)))
            .filter(|&(d, q)| self.is_valid_dq_cell(d, q))
            .collect()
    }

    /// Per flat index: does the class belong to a valid dq-cell.
    pub fn validity_mask(&self) -> Vec<bool> {
        let (nd, nq, ne) = self.dims();
        let mut mask = vec![false; nd * nq * ne];
        for (d, q) in self.valid_dq_cells() {
            let base = (d * nq + q) * ne;
            mask[base..base + ne].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

/// Class of a sample from its values at `k` only.
pub fn class_of(s: &Sample, g: &GridSpec) -> Result<ClassIndex> {
    let d_bin = g.i_d.bin(s.i_d_k).ok_or_else(|| {
        Error::Classification(format!("i_d_k = {} outside [{}, {}]", s.i_d_k, g.i_d.lo, g.i_d.hi))
    })?;
    let q_bin = g.i_q.bin(s.i_q_k).ok_or_else(|| {
        Error::Classification(format!("i_q_k = {} outside [{}, {}]", s.i_q_k, g.i_q.lo, g.i_q.hi))
    })?;
    let eps_bin = g.eps.bin(s.eps_k).ok_or_else(|| {
        Error::Classification(format!("eps_k = {} outside [{}, {}]", s.eps_k, g.eps.lo, g.eps.hi))
    })?;
    Ok(ClassIndex {
        d_bin,
        q_bin,
        eps_bin,
    })
}

/// Every valid class: valid dq-cells crossed with all angle bins, sorted.
pub fn valid_classes(g: &GridSpec) -> Vec<ClassIndex> {
    let (_, _, ne) = g.dims();
    g.valid_dq_cells()
        .into_iter()
        .flat_map(|(d_bin, q_bin)| {
            (0..ne).map(move |eps_bin| ClassIndex {
                d_bin,
                q_bin,
                eps_bin,
            })
        })
        .collect()
}

/// Sample counts per subset and class; samples outside the grid or in
/// invalid cells are counted as rejects.
#[derive(Debug, Clone)]
pub struct ClassCounts {
    pub counts: Vec<Vec<u32>>,
    pub rejects: usize,
    valid: Vec<bool>,
}

/// Routing of one sample: `Some(flat valid class)` or reject.
fn route(s: &Sample, g: &GridSpec, valid: &[bool]) -> Option<usize> {
    let class = class_of(s, g).ok()?;
    let flat = g.flat_index(&class);
    valid[flat].then_some(flat)
}

pub fn class_counts(d: &Dataset, g: &GridSpec) -> ClassCounts {
    let valid = g.validity_mask();
    let mut counts = vec![vec![0u32; g.num_cells()]; NUM_SUBSETS];
    let mut rejects = 0;
    for s in &d.samples {
        match route(s, g, &valid) {
            Some(flat) => counts[usize::from(s.n_k - 1)][flat] += 1,
            None => rejects += 1,
        }
    }
    ClassCounts {
        counts,
        rejects,
        valid,
    }
}

impl ClassCounts {
    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Fraction of valid classes of each subset holding at least `cap` samples.
    pub fn homogeneity(&self, cap: usize) -> [f64; NUM_SUBSETS] {
        let total = self.num_valid();
        let mut out = [0.0; NUM_SUBSETS];
        if total == 0 {
            return out;
        }
        for (n, counts) in self.counts.iter().enumerate() {
            let meeting = counts
                .iter()
                .zip(&self.valid)
                .filter(|(c, v)| **v && **c as usize >= cap)
                .count();
            out[n] = meeting as f64 / total as f64;
        }
        out
    }
}

pub fn homogeneity(d: &Dataset, g: &GridSpec, cap: usize) -> [f64; NUM_SUBSETS] {
    class_counts(d, g).homogeneity(cap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneityRow {
    pub cap: usize,
    pub fractions: [f64; NUM_SUBSETS],
}

pub fn homogeneity_curve(d: &Dataset, g: &GridSpec, caps: &[usize]) -> Vec<HomogeneityRow> {
    let counts = class_counts(d, g);
    caps.iter()
        .map(|&cap| HomogeneityRow {
            cap,
            fractions: counts.homogeneity(cap),
        })
        .collect()
}

/// Caps `1, 2, 4, ..., 1024`.
pub fn default_caps() -> Vec<usize> {
    (0..=10).map(|e| 1usize << e).collect()
}

pub fn homogeneity_csv(rows: &[HomogeneityRow]) -> String {
    let mut out = String::from("cap");
    for n in 1..=NUM_SUBSETS {
        let _ = write!(out, ",fraction_n{n}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{}", row.cap);
        for f in row.fractions {
            let _ = write!(out, ",{f:.9}");
        }
        out.push('\n');
    }
    out
}

/// Output of [`balance`]; every input sample lands in exactly one part.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BalanceOutcome {
    pub balanced: Dataset,
    pub remainder: Dataset,
    pub rejects: Dataset,
}

/// Caps every (subset, valid class) cell at `cap` samples.
///
/// Surplus samples are chosen uniformly at random per cell (seeded) and moved
/// to `remainder`; samples outside the grid or in invalid cells go to
/// `rejects`. All three parts keep the input order.
pub fn balance(d: &Dataset, g: &GridSpec, cap: usize, seed: u64) -> Result<BalanceOutcome> {
    if cap < 1 {
        return Err(Error::Validation("balancing cap must be at least 1".into()));
    }
    let valid = g.validity_mask();
    let num_cells = g.num_cells();
    let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut rejected = vec![false; d.len()];
    for (i, s) in d.samples.iter().enumerate() {
        match route(s, g, &valid) {
            Some(flat) => cells
                .entry(usize::from(s.n_k - 1) * num_cells + flat)
                .or_default()
                .push(i),
            None => rejected[i] = true,
        }
    }
    let mut keep = vec![true; d.len()];
    for (key, members) in &cells {
        if members.len() <= cap {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(*key as u64);
        let chosen = rand::seq::index::sample(&mut rng, members.len(), cap);
        let mut surplus = vec![true; members.len()];
        for c in chosen.iter() {
            surplus[c] = false;
        }
        for (&i, drop) in members.iter().zip(surplus) {
            if drop {
                keep[i] = false;
            }
        }
    }
    let mut out = BalanceOutcome::default();
    for (i, s) in d.samples.iter().enumerate() {
        let part = if rejected[i] {
            &mut out.rejects
        } else if keep[i] {
            &mut out.balanced
        } else {
            &mut out.remainder
        };
        part.samples.push(*s);
    }
    Ok(out)
}

/// Per-subset sample counts and class coverage of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub total: usize,
    pub rejects: usize,
    pub subset_counts: [usize; NUM_SUBSETS],
    /// Fraction of valid classes holding at least one sample.
    pub coverage: [f64; NUM_SUBSETS],
}

pub fn stats(d: &Dataset, g: &GridSpec) -> DatasetStats {
    let counts = class_counts(d, g);
    DatasetStats {
        total: d.len(),
        rejects: counts.rejects,
        subset_counts: d.subset_counts(),
        coverage: counts.homogeneity(1),
    }
}

impl DatasetStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,samples,class_coverage\n");
        for n in 0..NUM_SUBSETS {
            let _ = writeln!(out, "{},{},{:.9}", n + 1, self.subset_counts[n], self.coverage[n]);
        }
        let _ = writeln!(out, "total,{},", self.total);
        let _ = writeln!(out, "rejects,{},", self.rejects);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i_d: f64, i_q: f64, eps: f64, n: u8) -> Sample {
        Sample {
            i_d_k: i_d,
            i_q_k: i_q,
            eps_k: eps,
            n_k: n,
            n_k_prev: 1,
            i_d_k1: i_d,
            i_q_k1: i_q,
        }
    }

    #[test]
    fn class_examples() {
        let g = GridSpec::default();
        let c = class_of(&sample(-235.0, -5.0, -PI + 0.01, 2), &g).unwrap();
        assert_eq!((c.d_bin, c.q_bin, c.eps_bin), (0, 23, 0));
        let c = class_of(&sample(0.0, 0.0, PI, 2), &g).unwrap();
        assert_eq!((c.d_bin, c.q_bin, c.eps_bin), (23, 23, 35));
        assert_eq!(class_of(&sample(-230.0, -100.0, 0.0, 2), &g).unwrap().d_bin, 1);
        assert!(matches!(
            class_of(&sample(-250.0, -5.0, 0.0, 2), &g),
            Err(Error::Classification(_))
        ));
        assert!(class_of(&sample(5.0, -5.0, 0.0, 2), &g).is_err());
    }

    #[test]
    fn class_ignores_targets() {
        let g = GridSpec::default();
        let mut s = sample(-100.0, -50.0, 0.3, 3);
        let c = class_of(&s, &g).unwrap();
        s.i_d_k1 = 1e6;
        s.i_q_k1 = -1e6;
        assert_eq!(class_of(&s, &g).unwrap(), c);
    }

    #[test]
    fn valid_class_counts() {
        let g = GridSpec::default();
        g.validate().unwrap();
        assert_eq!(g.valid_dq_cells().len(), 471);
        assert_eq!(valid_classes(&g).len(), 16956);
        let none = GridSpec { i_max: 0.0, ..g };
        assert!(valid_classes(&none).is_empty());
    }

    #[test]
    fn flat_index_round_trip() {
        let g = GridSpec::default();
        for flat in [0, 1, 35, 36, 20735, 12345] {
            assert_eq!(g.flat_index(&g.from_flat(flat)), flat);
        }
    }

    #[test]
    fn uneven_grid_rejected() {
        let mut g = GridSpec::default();
        g.i_d.step = 7.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn toy_balance() {
        let g = GridSpec::default();
        let a = |e: f64| sample(-15.0, -15.0, e, 2);
        let b = sample(-55.0, -15.0, 0.05, 2);
        let d = Dataset::new(vec![a(0.01), a(0.02), b, a(0.03)]).unwrap();
        let out = balance(&d, &g, 2, 9).unwrap();
        assert_eq!(out.balanced.len(), 3);
        assert_eq!(out.remainder.len(), 1);
        assert_eq!(out.remainder.samples[0].i_d_k, -15.0);
        assert!(out.rejects.is_empty());
        let all = balance(&d, &g, usize::MAX, 9).unwrap();
        assert_eq!(all.balanced, d);
        assert!(all.remainder.is_empty());
        assert!(balance(&d, &g, 0, 9).is_err());
    }

    #[test]
    fn rejects_out_of_range_and_invalid_cells() {
        let g = GridSpec::default();
        let d = Dataset::new(vec![
            sample(-300.0, -5.0, 0.0, 2),
            sample(-235.0, -235.0, 0.0, 2),
            sample(-5.0, -5.0, 0.0, 2),
        ])
        .unwrap();
        let out = balance(&d, &g, 5, 0).unwrap();
        assert_eq!(out.rejects.len(), 2);
        assert_eq!(out.balanced.len(), 1);
    }

    #[test]
    fn homogeneity_step_function() {
        let g = GridSpec::default();
        assert_eq!(homogeneity(&Dataset::default(), &g, 1), [0.0; 7]);
        // three samples in every valid class of subset 4
        let (_, _, ne) = g.dims();
        let mut samples = Vec::new();
        for (d, q) in g.valid_dq_cells() {
            for e in 0..ne {
                let (id, iq) = (-240.0 + d as f64 * 10.0 + 5.0, -240.0 + q as f64 * 10.0 + 5.0);
                let eps = -PI + (e as f64 + 0.5) * PI / 18.0;
                for _ in 0..3 {
                    samples.push(sample(id, iq, eps, 4));
                }
            }
        }
        let d = Dataset::new(samples).unwrap();
        for cap in 1..=3 {
            assert_eq!(homogeneity(&d, &g, cap)[3], 1.0);
        }
        assert_eq!(homogeneity(&d, &g, 4)[3], 0.0);
        assert_eq!(homogeneity(&d, &g, 1)[0], 0.0);
    }

    #[test]
    fn csv_round_trip_and_mapping() {
        let d = Dataset::new(vec![sample(-1.5, -2.25, 0.5, 3), sample(-100.0, -3.0, -1.0, 7)]).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i_d_k,i_q_k,epsilon_k,n_k,n_k_prev,i_d_k1,i_q_k1\n"));
        assert_eq!(read_csv(&buf[..], &ColumnMapping::default()).unwrap(), d);

        let kaggle = "n_k,n_1k,id_k,iq_k,epsilon_k,id_k1,iq_k1\n3,1,-1.5,-2.25,0.5,-1.5,-2.25\n";
        let parsed = read_csv(kaggle.as_bytes(), &ColumnMapping::kaggle()).unwrap();
        assert_eq!(parsed.samples[0], d.samples[0]);

        let custom = ColumnMapping::default().with_overrides("i_d_k=a, i_q_k=b").unwrap();
        assert_eq!(custom.i_d_k, "a");
        assert!(ColumnMapping::default().with_overrides("bogus=x").is_err());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let bad = "i_d_k,i_q_k,epsilon_k,n_k,n_k_prev,i_d_k1,i_q_k1\n1,2,0,3,1,1,2\n1,2,0,8,1,1,2\n";
        match read_csv(bad.as_bytes(), &ColumnMapping::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = "a,b\n1,2\n";
        assert!(matches!(
            read_csv(missing.as_bytes(), &ColumnMapping::default()),
            Err(Error::Parse { line: 1, .. })
        ));
        let nan = "i_d_k,i_q_k,epsilon_k,n_k,n_k_prev,i_d_k1,i_q_k1\nx,2,0,3,1,1,2\n";
        assert!(matches!(
            read_csv(nan.as_bytes(), &ColumnMapping::default()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn sample_validation() {
        assert!(Dataset::new(vec![sample(0.0, 0.0, 0.0, 8)]).is_err());
        assert!(Dataset::new(vec![sample(f64::NAN, 0.0, 0.0, 2)]).is_err());
    }

    #[test]
    fn split_sizes() {
        let d = Dataset::new((0..10).map(|i| sample(-(i as f64), -1.0, 0.0, 2)).collect()).unwrap();
        let (a, b) = d.split(0.3, 1);
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(d.split(0.3, 1), (a, b));
    }
}
