//! Datasets: synthetic generators, splitting and CSV persistence.
//!
//! Labels are `0..K` for known classes; [`OOD_LABEL`] marks out-of-distribution
//! rows, which only evaluation sets may contain.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

pub const OOD_LABEL: i64 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<i64>,
    num_known_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<i64>, num_known_classes: usize) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(Error::Input("dataset has no samples".into()));
        }
        if d == 0 {
            return Err(Error::Input("dataset has no feature columns".into()));
        }
        if num_known_classes == 0 {
            return Err(Error::param("num_known_classes", "must be at least 1"));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), n)));
        }
        if let Some(row) = features.rows().into_iter().position(|r| !r.iter().all(|v| v.is_finite())) {
            return Err(Error::Input(format!("row {row} has a non-finite feature")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l != OOD_LABEL && !(0..num_known_classes as i64).contains(&l)) {
            return Err(Error::Label { label, num_classes: num_known_classes });
        }
        Ok(Self { features, labels, num_known_classes })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn num_known_classes(&self) -> usize {
        self.num_known_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Same data with a different number of known classes.
    pub fn with_num_known_classes(self, k: usize) -> Result<Self> {
        Self::new(self.features, self.labels, k)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.num_known_classes)
    }

    /// Fails unless every label is a known class; training sets must satisfy this.
    pub fn ensure_known_labels(&self) -> Result<()> {
        match self.labels.iter().find(|&&l| l == OOD_LABEL) {
            Some(&label) => Err(Error::Label { label, num_classes: self.num_known_classes }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Mixture of isotropic Gaussians with means evenly spaced on a circle in
/// the first two coordinates. Rows are grouped by class (class 0 first).
pub fn gen_gaussian_mixture(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    radius: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 1 {
        return Err(Error::param("num_classes", "must be at least 1"));
    }
    if per_class < 1 {
        return Err(Error::param("per_class", "must be at least 1"));
    }
    if dim < 2 {
        return Err(Error::param("dim", "must be at least 2"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::param("spread", format!("must be positive, got {spread}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::param("radius", format!("must be positive, got {radius}")));
    }

    let mut stream = Stream::new(seed);
    let n = num_classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        let mean = class_mean(class, num_classes, radius);
        for i in 0..per_class {
            let mut row = features.row_mut(class * per_class + i);
            for (j, x) in row.iter_mut().enumerate() {
                let centre = if j < 2 { mean[j] } else { 0.0 };
                *x = centre + spread * stream.normal();
            }
            labels.push(class as i64);
        }
    }
    Dataset::new(features, labels, num_classes)
}

/// Generating mean of `class` in the first two coordinates.
pub fn class_mean(class: usize, num_classes: usize, radius: f64) -> [f64; 2] {
    let angle = std::f64::consts::TAU * class as f64 / num_classes as f64;
    [radius * angle.cos(), radius * angle.sin()]
}

/// Points on an annulus in the first two coordinates, all labelled OOD.
/// Per row the angle is drawn before the radius.
pub fn gen_ood_ring(count: usize, dim: usize, inner_radius: f64, outer_radius: f64, seed: u64) -> Result<Dataset> {
    if count < 1 {
        return Err(Error::param("count", "must be at least 1"));
    }
    if dim < 2 {
        return Err(Error::param("dim", "must be at least 2"));
    }
    if !(inner_radius > 0.0) {
        return Err(Error::param("inner_radius", "must be positive"));
    }
    if !(inner_radius < outer_radius && outer_radius.is_finite()) {
        return Err(Error::param(
            "outer_radius",
            format!("must exceed inner_radius ({inner_radius}), got {outer_radius}"),
        ));
    }

    let mut stream = Stream::new(seed);
    let mut features = Array2::zeros((count, dim));
    for mut row in features.rows_mut() {
        let angle = stream.uniform_in(0.0, std::f64::consts::TAU);
        let r = stream.uniform_in(inner_radius, outer_radius);
        row[0] = r * angle.cos();
        row[1] = r * angle.sin();
    }
    // K is irrelevant for an all-OOD set; 1 keeps the type invariant.
    Dataset::new(features, vec![OOD_LABEL; count], 1)
}

fn train_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param("train_fraction", format!("must lie in (0, 1), got {fraction}")));
    }
    let n_train = (fraction * n as f64).floor() as usize;
    if n_train < 1 || n_train > n.saturating_sub(1) {
        return Err(Error::param("train_fraction", format!("{fraction} of {n} samples leaves one side empty")));
    }
    Ok(n_train)
}

/// Seeded random partition into `(train, rest)` with `floor(fraction * n)`
/// training rows.
pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let n_train = train_count(ds.len(), spec.train_fraction)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    Stream::new(spec.seed).shuffle(&mut order);
    Ok((ds.select(&order[..n_train])?, ds.select(&order[n_train..])?))
}

/// Splits each class separately so that every class contributes
/// `floor(fraction * n_class)` training rows. OOD rows are not allowed.
pub fn split_stratified(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    ds.ensure_known_labels()?;
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for class in 0..ds.num_known_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class as i64).collect();
        if members.is_empty() {
            continue;
        }
        let n_train = train_count(members.len(), spec.train_fraction)?;
        Stream::new(derive_seed(spec.seed, class as u64)).shuffle(&mut members);
        train.extend_from_slice(&members[..n_train]);
        rest.extend_from_slice(&members[n_train..]);
    }
    Ok((ds.select(&train)?, ds.select(&rest)?))
}

/// Formats a real with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        let header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
        writeln!(out, "{}", header.join(","))?;
        for (row, label) in ds.features.rows().into_iter().zip(&ds.labels) {
            for x in row {
                write!(out, "{},", fmt_real(*x))?;
            }
            writeln!(out, "{label}")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`save_csv`]. The number of known classes is
/// taken as one more than the largest label (at least 1); use
/// [`Dataset::with_num_known_classes`] to override it.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let format_err = |line: u64, reason: String| Error::Format { path: path.to_path_buf(), line, reason };

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| format_err(1, e.to_string()))?.clone();
    let dim = header.len().saturating_sub(1);
    let expected = (0..dim).map(|j| format!("f{j}")).chain(["label".to_string()]);
    if dim == 0 || !header.iter().eq(expected) {
        return Err(format_err(1, format!("malformed header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            let reason = match e.kind() {
                csv::ErrorKind::UnequalLengths { len, expected_len, .. } => {
                    format!("expected {expected_len} fields, found {len}")
                }
                _ => e.to_string(),
            };
            format_err(line, reason)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().take(dim).enumerate() {
            let x: f64 = cell
                .trim()
                .parse()
                .map_err(|_| format_err(line, format!("non-numeric value `{cell}` in column f{j}")))?;
            if !x.is_finite() {
                return Err(format_err(line, format!("non-finite value `{cell}` in column f{j}")));
            }
            values.push(x);
        }
        let cell = &record[dim];
        let label: i64 = cell.trim().parse().map_err(|_| format_err(line, format!("non-integer label `{cell}`")))?;
        if label < OOD_LABEL {
            return Err(format_err(line, format!("invalid label {label}")));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::NoSamples { path: path.to_path_buf() });
    }
    let k = labels.iter().copied().max().map_or(1, |m| (m + 1).max(1) as usize);
    let features = Array2::from_shape_vec((labels.len(), dim), values).expect("row lengths checked");
    Dataset::new(features, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn degenerate_spread_collapses_to_mean() {
        let ds = gen_gaussian_mixture(1, 100, 2, 1e-12, 1.0, 7).unwrap();
        for row in ds.features().rows() {
            assert!((row[0] - 1.0).abs() < 1e-9);
            assert!(row[1].abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_means_are_close_to_generating_means() {
        let (k, per, spread) = (4, 500, 0.5);
        let ds = gen_gaussian_mixture(k, per, 2, spread, 3.0, 1).unwrap();
        let tol = 3.0 * spread / (per as f64).sqrt();
        for class in 0..k {
            let mut sum = [0.0; 2];
            for i in 0..ds.len() {
                if ds.labels()[i] == class as i64 {
                    sum[0] += ds.row(i)[0];
                    sum[1] += ds.row(i)[1];
                }
            }
            let mean = class_mean(class, k, 3.0);
            for c in 0..2 {
                assert!((sum[c] / per as f64 - mean[c]).abs() < tol, "class {class} coord {c}");
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_gaussian_mixture(4, 50, 3, 0.5, 3.0, 1).unwrap();
        let b = gen_gaussian_mixture(4, 50, 3, 0.5, 3.0, 1).unwrap();
        assert!(a.features().iter().zip(b.features()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.labels(), b.labels());
        let c = gen_ood_ring(20, 2, 5.0, 6.0, 3).unwrap();
        let d = gen_ood_ring(20, 2, 5.0, 6.0, 3).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn extra_dimensions_are_centred_noise() {
        let ds = gen_gaussian_mixture(2, 2000, 4, 0.5, 3.0, 11).unwrap();
        let mean3 = ds.features().column(3).sum() / ds.len() as f64;
        assert!(mean3.abs() < 0.05);
    }

    #[test]
    fn ring_norms_and_labels() {
        let ds = gen_ood_ring(1000, 2, 5.0, 6.0, 3).unwrap();
        let mut total = 0.0;
        for row in ds.features().rows() {
            let norm = row.dot(&row).sqrt();
            assert!((5.0 - 1e-12..=6.0 + 1e-12).contains(&norm), "{norm}");
            total += norm;
        }
        assert!(ds.labels().iter().all(|&l| l == OOD_LABEL));
        assert!((total / 1000.0 - 5.5).abs() < 0.05);
    }

    #[test]
    fn parameter_errors() {
        assert!(matches!(gen_ood_ring(10, 2, 6.0, 5.0, 0), Err(Error::Parameter { .. })));
        assert!(matches!(gen_ood_ring(10, 2, 5.0, 5.0, 0), Err(Error::Parameter { .. })));
        assert!(matches!(gen_gaussian_mixture(0, 1, 2, 1.0, 1.0, 0), Err(Error::Parameter { .. })));
        assert!(matches!(gen_gaussian_mixture(2, 1, 1, 1.0, 1.0, 0), Err(Error::Parameter { .. })));
        assert!(matches!(gen_gaussian_mixture(2, 1, 2, 0.0, 1.0, 0), Err(Error::Parameter { .. })));
    }

    fn ten_rows() -> Dataset {
        let features = Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64);
        Dataset::new(features, (0..10).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = ten_rows();
        let spec = SplitSpec { train_fraction: 0.8, seed: 4 };
        let (a, b) = split(&ds, spec).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (c, d) = split(&ds, spec).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
    }

    #[test]
    fn split_is_a_partition() {
        let ds = ten_rows();
        let (a, b) = split(&ds, SplitSpec { train_fraction: 0.3, seed: 9 }).unwrap();
        let mut firsts: Vec<i64> =
            a.features().column(0).iter().chain(b.features().column(0).iter()).map(|&x| x as i64).collect();
        firsts.sort_unstable();
        assert_eq!(firsts, (0..10).map(|i| 2 * i).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_empty_sides() {
        let ds = ten_rows();
        assert!(split(&ds, SplitSpec { train_fraction: 0.05, seed: 0 }).is_err());
        let (a, b) = split(&ds, SplitSpec { train_fraction: 0.95, seed: 0 }).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
        assert!(split(&ds, SplitSpec { train_fraction: 1.0, seed: 0 }).is_err());
    }

    #[test]
    fn stratified_split_counts() {
        let ds = gen_gaussian_mixture(3, 30, 2, 0.5, 3.0, 2).unwrap();
        let (a, b) = split_stratified(&ds, SplitSpec { train_fraction: 0.7, seed: 1 }).unwrap();
        for class in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == class).count(), 21);
            assert_eq!(b.labels().iter().filter(|&&l| l == class).count(), 9);
        }
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = Dataset::new(array![[0.1, -2.5e-300], [1.0 / 3.0, 7.0], [-0.0, 1e300]], vec![0, 1, -1], 2).unwrap();
        save_csv(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("f0,f1,label\n"));
        assert_eq!(load_csv(&path).unwrap(), ds);
    }

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn csv_bad_label_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "f0,f1,label\n1,2,0\n3,4,abc\n");
        match load_csv(&path) {
            Err(Error::Format { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_other_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(&dir, "f0,f1,label\n");
        assert!(matches!(load_csv(&empty), Err(Error::NoSamples { .. })));
        let msg = load_csv(&empty).unwrap_err().to_string();
        assert!(msg.contains("no samples"));

        let header = write(&dir, "x,y,label\n1,2,0\n");
        assert!(matches!(load_csv(&header), Err(Error::Format { line: 1, .. })));

        let ragged = write(&dir, "f0,f1,label\n1,2,0\n1,0\n");
        assert!(matches!(load_csv(&ragged), Err(Error::Format { line: 3, .. })));

        let cell = write(&dir, "f0,f1,label\n1,zz,0\n");
        assert!(matches!(load_csv(&cell), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn training_label_check() {
        let ds = Dataset::new(array![[0.0], [1.0]], vec![0, OOD_LABEL], 1).unwrap();
        assert!(ds.ensure_known_labels().is_err());
        assert!(Dataset::new(array![[0.0]], vec![3], 2).is_err());
    }
}
