//! Two-modality datasets: synthetic generation with controllable
//! per-modality signal strength, CSV ingestion and export, stratified
//! splitting, and seeded mini-batch plans.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, shape, Error, Result};
use crate::numerics::{sample_gaussian, Matrix, RngState};
use crate::Modality;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: [Matrix; 2],
    labels: Vec<usize>,
    num_classes: usize,
    names: [String; 2],
}

impl Dataset {
    pub fn new(xa: Matrix, xv: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if xa.rows() != xv.rows() || xa.rows() != labels.len() {
            return Err(shape(format!(
                "row counts differ: features_a has {}, features_v has {}, labels has {}",
                xa.rows(),
                xv.rows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(invalid("class count must be positive"));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(invalid(format!("label {y} at row {i} is not below K={num_classes}")));
        }
        Ok(Dataset {
            features: [xa, xv],
            labels,
            num_classes,
            names: ["a".to_string(), "v".to_string()],
        })
    }

    pub fn with_names(mut self, a: &str, v: &str) -> Self {
        self.names = [a.to_string(), v.to_string()];
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, m: Modality) -> &Matrix {
        &self.features[m.index()]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn name(&self, m: Modality) -> &str {
        &self.names[m.index()]
    }

    /// Rows `idx`, in order. Keeps the class count of the parent.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: [
                self.features[0].select_rows(idx),
                self.features[1].select_rows(idx),
            ],
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            names: self.names.clone(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            xa: self.features[0].select_rows(idx),
            xv: self.features[1].select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The whole dataset as a single batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            xa: self.features[0].clone(),
            xv: self.features[1].clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn write_csv(&self, features_a: &Path, features_v: &Path, labels: &Path) -> Result<()> {
        write_file(features_a, &matrix_to_csv(&self.features[0]))?;
        write_file(features_v, &matrix_to_csv(&self.features[1]))?;
        let mut s = String::with_capacity(self.labels.len() * 2);
        for y in &self.labels {
            writeln!(s, "{y}").unwrap();
        }
        write_file(labels, &s)
    }
}

/// One mini-batch of paired features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub xa: Matrix,
    pub xv: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn features(&self, m: Modality) -> &Matrix {
        match m {
            Modality::A => &self.xa,
            Modality::V => &self.xv,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub k: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub snr_a: f64,
    pub snr_v: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            k: 4,
            d_a: 16,
            d_v: 16,
            snr_a: 2.0,
            snr_v: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n < self.k {
            return Err(invalid(format!(
                "need N >= K >= 1, got N={} K={}",
                self.n, self.k
            )));
        }
        if self.d_a == 0 || self.d_v == 0 {
            return Err(invalid("feature dimensions must be at least 1"));
        }
        for (name, snr) in [("snr_a", self.snr_a), ("snr_v", self.snr_v)] {
            if !(snr > 0.0 && snr.is_finite()) {
                return Err(invalid(format!("{name} must be a positive finite real, got {snr}")));
            }
        }
        Ok(())
    }
}

/// Class-conditional Gaussian features: `x = snr_m · μ_y^m + N(0, I)` with
/// unit-norm class means drawn once per modality. Labels are round-robin.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.k).collect();
    let mut feats = Vec::with_capacity(2);
    for (m, (dim, snr)) in [(cfg.d_a, cfg.snr_a), (cfg.d_v, cfg.snr_v)].into_iter().enumerate() {
        let mut mean_rng = root.fork(m as u64);
        let means = unit_rows(&mut mean_rng, cfg.k, dim)?;
        let mut noise_rng = root.fork(100 + m as u64);
        let noise = sample_gaussian(&mut noise_rng, cfg.n, dim, 1.0)?;
        let mut data = noise.into_vec();
        for (row, &y) in data.chunks_exact_mut(dim).zip(&labels) {
            for (x, mu) in row.iter_mut().zip(means.row(y)) {
                *x += snr * mu;
            }
        }
        feats.push(Matrix::from_vec(cfg.n, dim, data)?);
    }
    let xv = feats.pop().unwrap();
    let xa = feats.pop().unwrap();
    Dataset::new(xa, xv, labels, cfg.k)
}

/// Rows drawn uniformly on the unit sphere.
fn unit_rows(rng: &mut RngState, rows: usize, dim: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        let mut n = crate::numerics::norm(&v);
        while n < 1e-12 {
            v = (0..dim).map(|_| rng.gaussian()).collect();
            n = crate::numerics::norm(&v);
        }
        data.extend(v.iter().map(|x| x / n));
    }
    Matrix::from_vec(rows, dim, data)
}

fn matrix_to_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for row in m.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn parse_feature_csv(path: &Path) -> Result<Matrix> {
    let text = read_file(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut n = 0;
        for (j, cell) in line.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Load(format!(
                    "{}: non-numeric cell {:?} at row {}, column {}",
                    path.display(),
                    cell,
                    i + 1,
                    j + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Load(format!(
                    "{}: non-finite cell at row {}, column {}",
                    path.display(),
                    i + 1,
                    j + 1
                )));
            }
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(Error::Load(format!(
                    "{}: row {} has {n} columns, expected {c}",
                    path.display(),
                    i + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Load(format!("{}: empty file", path.display())))?;
    Matrix::from_vec(rows, cols, data)
}

fn parse_label_csv(path: &Path) -> Result<Vec<usize>> {
    let text = read_file(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.trim();
        if cell.is_empty() {
            continue;
        }
        let y: usize = cell.parse().map_err(|_| {
            Error::Load(format!(
                "{}: label {:?} at row {} is not a non-negative integer",
                path.display(),
                cell,
                i + 1
            ))
        })?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::Load(format!("{}: empty file", path.display())));
    }
    Ok(labels)
}

/// Loads a dataset from three headerless CSV files. `K` is `max label + 1`.
pub fn load_csv(features_a: &Path, features_v: &Path, labels: &Path) -> Result<Dataset> {
    let xa = parse_feature_csv(features_a)?;
    let xv = parse_feature_csv(features_v)?;
    let y = parse_label_csv(labels)?;
    for (p, rows) in [(features_v, xv.rows()), (labels, y.len())] {
        if rows != xa.rows() {
            return Err(Error::Load(format!(
                "row count mismatch: {} has {} rows but {} has {} rows",
                features_a.display(),
                xa.rows(),
                p.display(),
                rows
            )));
        }
    }
    let k = y.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(xa, xv, y, k)
}

/// Stratified, seeded partition of `0..N` into sorted (train, test) index lists.
///
/// The train size is `round(fraction · N)`, allocated across classes by
/// largest remainder. Classes with at least two members keep one sample on
/// each side.
pub fn split_indices(labels: &[usize], num_classes: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let target = (train_fraction * labels.len() as f64).round() as usize;
    let exact: Vec<f64> = by_class.iter().map(|c| train_fraction * c.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut assigned: usize = quota.iter().sum();
    for &c in order.iter().cycle().take(num_classes * 2) {
        if assigned >= target {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            assigned += 1;
        }
    }
    for (q, c) in quota.iter_mut().zip(&by_class) {
        if c.len() >= 2 {
            *q = (*q).clamp(1, c.len() - 1);
        }
    }

    let root = RngState::new(seed).fork(0x5317);
    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(labels.len() - target);
    for (c, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        root.fork(c as u64).shuffle(&mut shuffled);
        train.extend_from_slice(&shuffled[..quota[c]]);
        test.extend_from_slice(&shuffled[quota[c]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset.labels(), dataset.num_classes(), train_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Ordered mini-batch index slices for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub seed: u64,
    pub epoch: usize,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    RngState::new(seed).fork(0xBA7C).fork(epoch as u64).shuffle(&mut perm);
    Ok(BatchPlan {
        batches: perm.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        seed,
        epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_labels() {
        let cfg = SynthConfig { n: 8, k: 4, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn generation_is_pure() {
        let cfg = SynthConfig { n: 50, seed: 3, ..Default::default() };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 4, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn invalid_synth_configs() {
        let bad = [
            SynthConfig { snr_a: 0.0, ..Default::default() },
            SynthConfig { snr_v: -1.0, ..Default::default() },
            SynthConfig { d_a: 0, ..Default::default() },
            SynthConfig { n: 3, k: 4, ..Default::default() },
        ];
        for cfg in bad {
            assert!(generate_synthetic(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn stratified_split_arithmetic() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let (train, test) = split_indices(&labels, 4, 0.9, 1).unwrap();
        assert_eq!(train.len(), 90);
        for c in 0..4 {
            let count = train.iter().filter(|&&i| labels[i] == c).count();
            assert!(count >= 22, "class {c}: {count}");
        }
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(&labels, 4, 0.9, 1).unwrap(), (train, test));
    }

    #[test]
    fn split_keeps_every_class_on_both_sides() {
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        for frac in [0.05, 0.5, 0.95] {
            let (train, test) = split_indices(&labels, 4, frac, 9).unwrap();
            for c in 0..4 {
                assert!(train.iter().any(|&i| labels[i] == c));
                assert!(test.iter().any(|&i| labels[i] == c));
            }
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let labels = vec![0, 1, 0, 1];
        for f in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(split_indices(&labels, 2, f, 0).is_err());
        }
    }

    #[test]
    fn batch_plan_sizes_and_permutation() {
        let plan = make_batches(10, 4, 7, 0).unwrap();
        let sizes: Vec<usize> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = plan.batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let next = make_batches(10, 4, 7, 1).unwrap();
        assert_ne!(plan.batches, next.batches);
        assert_eq!(plan, make_batches(10, 4, 7, 0).unwrap());
        assert!(make_batches(10, 0, 7, 0).is_err());
    }

    #[test]
    fn load_reports_row_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let v = dir.path().join("v.csv");
        let y = dir.path().join("y.csv");
        fs::write(&a, "1,2\n3,4\n5,6\n").unwrap();
        fs::write(&v, "1\n2\n3\n4\n").unwrap();
        fs::write(&y, "0\n1\n0\n").unwrap();
        let msg = load_csv(&a, &v, &y).unwrap_err().to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn load_toy_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let v = dir.path().join("v.csv");
        let y = dir.path().join("y.csv");
        fs::write(&a, "1,2\n3,4\n5,6\n").unwrap();
        fs::write(&v, "0.5\n-1\n2e-3\n").unwrap();
        fs::write(&y, "0\n2\n1\n").unwrap();
        let ds = load_csv(&a, &v, &y).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.features(Modality::A).shape(), (3, 2));
        assert_eq!(ds.features(Modality::V).shape(), (3, 1));

        fs::write(&v, "0.5\nabc\n1\n").unwrap();
        let msg = load_csv(&a, &v, &y).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("column 1"), "{msg}");

        fs::write(&v, "").unwrap();
        assert!(load_csv(&a, &v, &y).unwrap_err().to_string().contains("empty"));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let paths = ["a.csv", "v.csv", "y.csv"].map(|f| dir.path().join(f));
        let ds = generate_synthetic(&SynthConfig { n: 40, d_a: 3, d_v: 5, ..Default::default() }).unwrap();
        ds.write_csv(&paths[0], &paths[1], &paths[2]).unwrap();
        let back = load_csv(&paths[0], &paths[1], &paths[2]).unwrap();
        for m in Modality::ALL {
            for (x, y) in ds.features(m).as_slice().iter().zip(back.features(m).as_slice()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert_eq!(ds.labels(), back.labels());
    }
}
