//! Feature datasets: file ingestion, synthetic clusters, task splitting and
//! classwise normalization statistics.
//!
//! Binary layout (`.fvf`): the magic `FVF1`, a little-endian `u32` record
//! count `n`, a `u32` dimension `d`, then `n` records of one `u32` label
//! followed by `d` little-endian `f32` features. CSV layout: one record per
//! line, `label,f_1,...,f_d`, no header.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{hash_index, rng_for};

pub const FVF_MAGIC: &[u8; 4] = b"FVF1";
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub label: u32,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Binary,
    Csv,
}

impl FileFormat {
    /// Guesses the format from the file extension; anything but `.csv` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

/// A set of records sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            check_dim("dataset record", dim, r.features.len())?;
            if let Some(j) = r.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    record: i,
                    feature: j,
                });
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Features as a `len × dim` matrix.
    pub fn matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.dim));
        for (mut row, r) in m.rows_mut().into_iter().zip(&self.records) {
            for (dst, &v) in row.iter_mut().zip(&r.features) {
                *dst = f64::from(v);
            }
        }
        m
    }

    pub fn filter_classes(&self, classes: &BTreeSet<u32>) -> Dataset {
        Dataset {
            dim: self.dim,
            records: self
                .records
                .iter()
                .filter(|r| classes.contains(&r.label))
                .cloned()
                .collect(),
        }
    }

    /// Concatenates datasets of equal dimension.
    pub fn concat<'a>(dim: usize, parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let mut records = Vec::new();
        for p in parts {
            check_dim("dataset concat", dim, p.dim)?;
            records.extend(p.records.iter().cloned());
        }
        Ok(Dataset { dim, records })
    }

    /// Deterministic per-class holdout: within each class, records are ranked
    /// by a seeded hash of their index and the first `round(fraction * n)` go
    /// to the test split. Relative order is preserved in both halves.
    pub fn holdout_split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!("holdout fraction {fraction} not in [0,1)")));
        }
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            by_class.entry(r.label).or_default().push(i);
        }
        let mut is_test = vec![false; self.len()];
        for idx in by_class.values() {
            let mut ranked: Vec<(u64, usize)> =
                idx.iter().map(|&i| (hash_index(seed, i as u64), i)).collect();
            ranked.sort_unstable();
            let n_test = (fraction * idx.len() as f64).round() as usize;
            for &(_, i) in ranked.iter().take(n_test) {
                is_test[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (r, t) in self.records.iter().zip(is_test) {
            if t {
                test.push(r.clone());
            } else {
                train.push(r.clone());
            }
        }
        Ok((
            Dataset {
                dim: self.dim,
                records: train,
            },
            Dataset {
                dim: self.dim,
                records: test,
            },
        ))
    }
}

pub fn load_feature_dataset(path: &Path, format: FileFormat) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    match format {
        FileFormat::Binary => decode_binary(&bytes),
        FileFormat::Csv => decode_csv(std::str::from_utf8(&bytes).map_err(|e| {
            Error::Malformed(format!("csv is not utf-8: {e}"))
        })?),
    }
}

pub fn write_feature_dataset(path: &Path, dataset: &Dataset, format: FileFormat) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    match format {
        FileFormat::Binary => w.write_all(&encode_binary(dataset))?,
        FileFormat::Csv => {
            for r in &dataset.records {
                write!(w, "{}", r.label)?;
                for v in &r.features {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn encode_binary(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + dataset.len() * (4 + 4 * dataset.dim));
    out.extend_from_slice(FVF_MAGIC);
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.dim as u32).to_le_bytes());
    for r in &dataset.records {
        out.extend_from_slice(&r.label.to_le_bytes());
        for v in &r.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!("header needs 12 bytes, got {}", bytes.len())));
    }
    if &bytes[..4] != FVF_MAGIC {
        return Err(Error::UnknownFormat(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rec_len = 4 + 4 * dim;
    let need = 12 + n * rec_len;
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            "{n} records of dimension {dim} need {need} bytes, got {}",
            bytes.len()
        )));
    }
    if bytes.len() > need {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - need)));
    }
    let mut records = Vec::with_capacity(n);
    for chunk in bytes[12..].chunks_exact(rec_len) {
        let label = u32::from_le_bytes(chunk[..4].try_into().unwrap());
        let features = chunk[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(FeatureRecord { label, features });
    }
    Dataset::new(dim, records)
}

pub fn decode_csv(text: &str) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: u32 = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|e| Error::Malformed(format!("line {}: bad label: {e}", lineno + 1)))?;
        let features = fields
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .map_err(|e| Error::Malformed(format!("line {}: bad feature {f:?}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(features.len()),
            Some(d) => check_dim("csv row", d, features.len())?,
        }
        records.push(FeatureRecord { label, features });
    }
    let dim = dim.ok_or_else(|| Error::Malformed("empty csv".into()))?;
    if dim == 0 {
        return Err(Error::Malformed("csv rows carry no features".into()));
    }
    Dataset::new(dim, records)
}

/// Ordered tasks with pairwise-disjoint label spaces.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Dataset>,
    pub label_spaces: Vec<BTreeSet<u32>>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task index owning `class`, if any.
    pub fn task_of(&self, class: u32) -> Option<usize> {
        self.label_spaces.iter().position(|s| s.contains(&class))
    }
}

/// Splits a dataset along a class schedule. Records keep their original order.
pub fn split_tasks(dataset: &Dataset, schedule: &[BTreeSet<u32>]) -> Result<TaskStream> {
    let present = dataset.classes();
    let mut seen = BTreeSet::new();
    for set in schedule {
        if set.is_empty() {
            return Err(Error::invalid("empty task in schedule"));
        }
        for &c in set {
            if !seen.insert(c) {
                return Err(Error::OverlappingSchedule(c));
            }
            if !present.contains(&c) {
                return Err(Error::UnknownClass(c));
            }
        }
    }
    Ok(TaskStream {
        tasks: schedule.iter().map(|s| dataset.filter_classes(s)).collect(),
        label_spaces: schedule.to_vec(),
    })
}

/// Chunks sorted class ids into `n_tasks` groups of `ceil(K / n_tasks)`,
/// the last group taking the remainder.
pub fn uniform_schedule(classes: &BTreeSet<u32>, n_tasks: usize) -> Result<Vec<BTreeSet<u32>>> {
    if n_tasks == 0 || n_tasks > classes.len() {
        return Err(Error::invalid(format!(
            "cannot split {} classes into {n_tasks} tasks",
            classes.len()
        )));
    }
    let per = classes.len().div_ceil(n_tasks);
    let ids: Vec<u32> = classes.iter().copied().collect();
    let schedule: Vec<BTreeSet<u32>> = ids.chunks(per).map(|c| c.iter().copied().collect()).collect();
    if schedule.len() != n_tasks {
        return Err(Error::invalid(format!(
            "{} classes do not split into {n_tasks} tasks of {per}",
            classes.len()
        )));
    }
    Ok(schedule)
}

/// Seeded isotropic gaussian clusters around standard-normal centers.
#[derive(Debug, Clone)]
pub struct SynthClusters {
    pub dataset: Dataset,
    pub centers: Array2<f64>,
}

pub fn synth_clusters(
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<SynthClusters> {
    if n_classes == 0 || dim < 2 || n_per_class == 0 {
        return Err(Error::invalid(format!(
            "synth_clusters needs K >= 1, d >= 2, n >= 1 (got {n_classes}, {dim}, {n_per_class})"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be positive, got {spread}")));
    }
    let mut rng = rng_for(seed, "synth-centers", 0);
    let centers = Array2::from_shape_fn((n_classes, dim), |_| StandardNormal.sample(&mut rng));
    let mut records = Vec::with_capacity(n_classes * n_per_class);
    for k in 0..n_classes {
        let mut rng = rng_for(seed, "synth-class", k as u64);
        for _ in 0..n_per_class {
            let features = (0..dim)
                .map(|j| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (centers[[k, j]] + spread * e) as f32
                })
                .collect();
            records.push(FeatureRecord {
                label: k as u32,
                features,
            });
        }
    }
    Ok(SynthClusters {
        dataset: Dataset::new(dim, records)?,
        centers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

/// Per-class mean and standard deviation, frozen at first registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseStats {
    dim: usize,
    std_floor: f64,
    classes: BTreeMap<u32, ClassStats>,
}

impl ClasswiseStats {
    pub fn new(dim: usize) -> Self {
        Self::with_floor(dim, STD_FLOOR)
    }

    pub fn with_floor(dim: usize, std_floor: f64) -> Self {
        assert!(std_floor > 0.0, "std floor must be positive");
        Self {
            dim,
            std_floor,
            classes: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn std_floor(&self) -> f64 {
        self.std_floor
    }

    pub fn get(&self, class: u32) -> Option<&ClassStats> {
        self.classes.get(&class)
    }

    pub fn contains(&self, class: u32) -> bool {
        self.classes.contains_key(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn insert(&mut self, class: u32, stats: ClassStats) -> Result<()> {
        check_dim("class stats", self.dim, stats.mean.len())?;
        check_dim("class stats", self.dim, stats.std.len())?;
        if self.classes.contains_key(&class) {
            return Err(Error::DuplicateClass(class));
        }
        self.classes.insert(class, stats);
        Ok(())
    }

    /// Registers every class of `task_data`; fails without modification if
    /// any of them is already known.
    pub fn update(&mut self, task_data: &Dataset) -> Result<()> {
        check_dim("classwise stats", self.dim, task_data.dim())?;
        let classes = task_data.classes();
        if let Some(&c) = classes.iter().find(|c| self.classes.contains_key(c)) {
            return Err(Error::DuplicateClass(c));
        }
        for c in classes {
            let rows: Vec<&FeatureRecord> = task_data.records().iter().filter(|r| r.label == c).collect();
            let n = rows.len() as f64;
            let mut mean = Array1::<f64>::zeros(self.dim);
            for r in &rows {
                for (m, &v) in mean.iter_mut().zip(&r.features) {
                    *m += f64::from(v);
                }
            }
            mean /= n;
            let mut var = Array1::<f64>::zeros(self.dim);
            for r in &rows {
                for ((s, &v), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                    let dlt = f64::from(v) - m;
                    *s += dlt * dlt;
                }
            }
            let std = var.mapv(|s| (s / n).sqrt().max(self.std_floor));
            self.classes.insert(c, ClassStats { mean, std });
        }
        Ok(())
    }

    pub fn normalize(&self, x: ArrayView1<f64>, class: u32) -> Result<Array1<f64>> {
        let s = self.classes.get(&class).ok_or(Error::UnknownClass(class))?;
        check_dim("normalize", self.dim, x.len())?;
        Ok((&x - &s.mean) / &s.std)
    }

    pub fn denormalize(&self, x_norm: ArrayView1<f64>, class: u32) -> Result<Array1<f64>> {
        let s = self.classes.get(&class).ok_or(Error::UnknownClass(class))?;
        check_dim("denormalize", self.dim, x_norm.len())?;
        Ok(&x_norm * &s.std + &s.mean)
    }

    /// Parameter count held for generation: mean and std per class.
    pub fn parameter_count(&self) -> usize {
        self.classes.len() * 2 * self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn rec(label: u32, f: &[f32]) -> FeatureRecord {
        FeatureRecord {
            label,
            features: f.to_vec(),
        }
    }

    #[test]
    fn csv_parses_rows() {
        let ds = decode_csv("0,1.0,2.0\n1,3.0,4.0\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.classes(), BTreeSet::from([0, 1]));
        assert_eq!(ds.records()[1].features, vec![3.0, 4.0]);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let err = decode_csv("0,1.0,2.0\n1,3.0\n").unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }), "{err}");
    }

    #[test]
    fn csv_rejects_non_finite() {
        let err = decode_csv("0,1.0,NaN\n").unwrap_err();
        assert!(matches!(err, Error::NonFinite { record: 0, feature: 1 }));
    }

    #[test]
    fn binary_rejects_bad_magic_and_truncation() {
        let ds = Dataset::new(2, vec![rec(3, &[1.0, -2.5])]).unwrap();
        let mut bytes = encode_binary(&ds);
        assert_eq!(decode_binary(&bytes).unwrap(), ds);
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_binary(short), Err(Error::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_binary(&bytes), Err(Error::UnknownFormat(_))));
        assert!(matches!(decode_binary(b"FVF1"), Err(Error::Truncated(_))));
    }

    #[test]
    fn binary_rejects_non_finite() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FVF_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_binary(&bytes), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn file_round_trips_both_formats() {
        let data = synth_clusters(3, 5, 4, 0.3, 11).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("a.fvf", FileFormat::Binary), ("a.csv", FileFormat::Csv)] {
            let p = dir.path().join(name);
            write_feature_dataset(&p, &data, fmt).unwrap();
            assert_eq!(FileFormat::from_path(&p), fmt);
            let back = load_feature_dataset(&p, fmt).unwrap();
            assert_eq!(back, data);
        }
    }

    #[test]
    fn split_uniform_ten_tasks() {
        let classes: BTreeSet<u32> = (0..100).collect();
        let s = uniform_schedule(&classes, 10).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|t| t.len() == 10));
    }

    #[test]
    fn split_cars_like_remainder() {
        let classes: BTreeSet<u32> = (0..196).collect();
        let sizes: Vec<usize> = uniform_schedule(&classes, 10).unwrap().iter().map(|s| s.len()).collect();
        assert_eq!(sizes, [vec![20; 9], vec![16]].concat());
    }

    #[test]
    fn split_rejects_overlap_and_missing() {
        let ds = synth_clusters(3, 2, 2, 0.1, 0).unwrap().dataset;
        let overlap = vec![BTreeSet::from([0, 1]), BTreeSet::from([1, 2])];
        assert!(matches!(split_tasks(&ds, &overlap), Err(Error::OverlappingSchedule(1))));
        let missing = vec![BTreeSet::from([0]), BTreeSet::from([7])];
        assert!(matches!(split_tasks(&ds, &missing), Err(Error::UnknownClass(7))));
    }

    #[test]
    fn split_tasks_keeps_order_and_disjointness() {
        let ds = synth_clusters(6, 2, 3, 0.1, 0).unwrap().dataset;
        let schedule = vec![BTreeSet::from([4, 0]), BTreeSet::from([1, 5]), BTreeSet::from([2, 3])];
        let ts = split_tasks(&ds, &schedule).unwrap();
        assert_eq!(ts.tasks[0].labels(), vec![0, 0, 0, 4, 4, 4]);
        for i in 0..ts.len() {
            for j in i + 1..ts.len() {
                assert!(ts.tasks[i].classes().is_disjoint(&ts.tasks[j].classes()));
            }
        }
        assert_eq!(ts.task_of(5), Some(1));
    }

    #[test]
    fn synth_is_seeded() {
        let a = synth_clusters(2, 2, 100, 0.1, 7).unwrap();
        let b = synth_clusters(2, 2, 100, 0.1, 7).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(encode_binary(&a.dataset), encode_binary(&b.dataset));
        assert!(synth_clusters(2, 2, 100, 0.0, 7).is_err());
        assert!(synth_clusters(2, 1, 100, 0.1, 7).is_err());
    }

    #[test]
    fn synth_class_means_near_centers() {
        let s = synth_clusters(3, 8, 50, 0.2, 1).unwrap();
        let bound = 5.0 * 0.2 / 50f64.sqrt();
        for k in 0..3u32 {
            let m = s.dataset.filter_classes(&BTreeSet::from([k])).matrix();
            let mean = m.mean_axis(ndarray::Axis(0)).unwrap();
            for j in 0..8 {
                assert!((mean[j] - s.centers[[k as usize, j]]).abs() <= bound);
            }
        }
    }

    #[test]
    fn holdout_is_exact_per_class() {
        let ds = synth_clusters(4, 2, 250, 0.1, 3).unwrap().dataset;
        let (train, test) = ds.holdout_split(0.2, 9).unwrap();
        for c in 0..4u32 {
            assert_eq!(test.records().iter().filter(|r| r.label == c).count(), 50);
            assert_eq!(train.records().iter().filter(|r| r.label == c).count(), 200);
        }
        assert_eq!(ds.holdout_split(0.2, 9).unwrap().1, test);
    }

    #[test]
    fn stats_two_points_with_floor() {
        let ds = Dataset::new(2, vec![rec(0, &[0.0, 0.0]), rec(0, &[2.0, 0.0])]).unwrap();
        let mut st = ClasswiseStats::new(2);
        st.update(&ds).unwrap();
        let s = st.get(0).unwrap();
        assert_eq!(s.mean, array![1.0, 0.0]);
        assert_eq!(s.std, array![1.0, STD_FLOOR]);
        assert!(matches!(st.update(&ds), Err(Error::DuplicateClass(0))));
    }

    #[test]
    fn stats_single_record_is_floored() {
        let ds = Dataset::new(3, vec![rec(4, &[1.0, 2.0, 3.0])]).unwrap();
        let mut st = ClasswiseStats::new(3);
        st.update(&ds).unwrap();
        assert_eq!(st.get(4).unwrap().std, array![STD_FLOOR, STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn normalize_centers_and_rejects_unknown() {
        let ds = synth_clusters(2, 3, 20, 0.5, 2).unwrap().dataset;
        let mut st = ClasswiseStats::new(3);
        st.update(&ds).unwrap();
        let mean = st.get(1).unwrap().mean.clone();
        let z = st.normalize(mean.view(), 1).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(st.normalize(mean.view(), 9), Err(Error::UnknownClass(9))));
        assert!(matches!(st.denormalize(mean.view(), 9), Err(Error::UnknownClass(9))));
    }

    proptest! {
        #[test]
        fn normalize_round_trip(xs in proptest::collection::vec(-1e3f64..1e3, 4), seed in 0u64..50) {
            let ds = synth_clusters(2, 4, 10, 0.7, seed).unwrap().dataset;
            let mut st = ClasswiseStats::new(4);
            st.update(&ds).unwrap();
            let x = Array1::from(xs);
            let back = st.denormalize(st.normalize(x.view(), 0).unwrap().view(), 0).unwrap();
            for (a, b) in x.iter().zip(back.iter()) {
                prop_assert!((a - b).abs() <= 1e-9);
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn csv_and_binary_agree(labels in proptest::collection::vec(0u32..5, 1..20), seed in 0u64..100) {
            let mut rng = rng_for(seed, "prop", 0);
            let recs: Vec<FeatureRecord> = labels.iter().map(|&l| FeatureRecord {
                label: l,
                features: (0..3).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); v as f32 }).collect(),
            }).collect();
            let ds = Dataset::new(3, recs).unwrap();
            let text = {
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("x.csv");
                write_feature_dataset(&p, &ds, FileFormat::Csv).unwrap();
                std::fs::read_to_string(p).unwrap()
            };
            prop_assert_eq!(decode_csv(&text).unwrap(), decode_binary(&encode_binary(&ds)).unwrap());
        }
    }
}
