//! Datasets: synthetic Gaussian inputs, MNIST IDX files, label encoding and
//! the Forster transformation.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::SymmetricEigen;

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "NGD_DATA_ROOT";

/// Dataset root: `$NGD_DATA_ROOT` if set, otherwise `fallback`.
pub fn data_root(fallback: &Path) -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| fallback.to_path_buf())
}

/// `(images, labels)` paths of the MNIST training split under `root/mnist`.
pub fn mnist_train_paths(root: &Path) -> (PathBuf, PathBuf) {
    let dir = root.join("mnist");
    (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Train and test samples with targets.
///
/// Targets are `N × C`; `labels` holds the raw class of each row when the
/// data come from a labelled source (empty otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_test: Array2<f64>,
    pub y_test: Array2<f64>,
    pub labels: Vec<u8>,
    pub test_labels: Vec<u8>,
    pub classes: Vec<u8>,
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.y.ncols()
    }

    /// Unit-norm rows and pairwise distinct training rows.
    pub fn check(&self) -> Result<()> {
        for (name, m) in [("train", &self.x), ("test", &self.x_test)] {
            for (i, r) in m.rows().into_iter().enumerate() {
                let norm = r.dot(&r).sqrt();
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidConfig(format!("{name} row {i} has norm {norm}")));
                }
            }
        }
        let mut seen = HashSet::new();
        for (i, r) in self.x.rows().into_iter().enumerate() {
            let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::InvalidConfig(format!("training row {i} duplicates an earlier row")));
            }
        }
        if self.y.nrows() != self.n_train() || self.y_test.nrows() != self.n_test() {
            return Err(Error::ShapeMismatch("targets and inputs disagree in sample count".into()));
        }
        Ok(())
    }

    /// Replaces the targets with i.i.d. `±1` values (single output).
    pub fn with_sign_targets(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a29);
        let mut draw = |n: usize| Array2::from_shape_simple_fn((n, 1), || if rand::Rng::random::<bool>(&mut rng) { 1.0 } else { -1.0 });
        self.y = draw(self.n_train());
        self.y_test = draw(self.n_test());
        self
    }
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(x: &mut Array2<f64>) -> Result<()> {
    for (i, mut r) in x.rows_mut().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidConfig(format!("row {i} cannot be normalized (norm {norm})")));
        }
        r /= norm;
    }
    Ok(())
}

/// `N` train and `np` test rows drawn i.i.d. from `N(0, I)` and normalized.
/// Targets are empty (`N × 0`).
pub fn synthetic_gaussian(n: usize, np: usize, m0: usize, seed: u64) -> Result<Dataset> {
    if n + np == 0 || m0 == 0 {
        return Err(Error::InvalidConfig("need at least one sample and one input dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Array2::<f64>::from_shape_simple_fn((n + np, m0), || StandardNormal.sample(&mut rng));
    normalize_rows(&mut all)?;
    Ok(Dataset {
        x: all.slice(s![..n, ..]).to_owned(),
        y: Array2::zeros((n, 0)),
        x_test: all.slice(s![n.., ..]).to_owned(),
        y_test: Array2::zeros((np, 0)),
        labels: Vec::new(),
        test_labels: Vec::new(),
        classes: Vec::new(),
    })
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile { path: path.to_path_buf() })
}

/// Raw IDX image file: `(rows, cols, pixels)` with one `rows·cols` slice
/// per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: IMAGE_MAGIC, found: magic });
    }
    let count = read_u32(&bytes, 4, path)? as usize;
    let rows = read_u32(&bytes, 8, path)? as usize;
    let cols = read_u32(&bytes, 12, path)? as usize;
    let end = 16 + count * rows * cols;
    if bytes.len() < end {
        return Err(Error::TruncatedFile { path: path.to_path_buf() });
    }
    Ok(IdxImages { rows, cols, pixels: bytes[16..end].to_vec() })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: LABEL_MAGIC, found: magic });
    }
    let count = read_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::TruncatedFile { path: path.to_path_buf() });
    }
    Ok(bytes[8..8 + count].to_vec())
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Selects `n` train and `np` test images of the given classes (disjoint,
/// shuffled by `seed`), scales pixels by 1/255 and normalizes each row.
/// Duplicate images are skipped. Targets follow [`encode_labels`] with one
/// output for two classes and one output per class otherwise.
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: &[u8], n: usize, np: usize, seed: u64) -> Result<Dataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != images.count() {
        return Err(Error::ShapeMismatch(format!("{} images but {} labels", images.count(), labels.len())));
    }
    if classes.len() < 2 {
        return Err(Error::ArityMismatch("need at least two classes".into()));
    }
    for &c in classes {
        if !labels.contains(&c) {
            return Err(Error::ClassNotFound(c));
        }
    }
    let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| classes.contains(&labels[i])).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut seen = HashSet::new();
    let picked: Vec<usize> = idx
        .into_iter()
        .filter(|&i| images.image(i).iter().any(|&p| p != 0) && seen.insert(images.image(i).to_vec()))
        .take(n + np)
        .collect();
    if picked.len() < n + np {
        return Err(Error::InvalidConfig(format!("requested {} samples but only {} are available", n + np, picked.len())));
    }
    let dim = images.rows * images.cols;
    let mut all = Array2::from_shape_fn((n + np, dim), |(r, c)| images.image(picked[r])[c] as f64 / 255.0);
    normalize_rows(&mut all)?;
    let raw: Vec<u8> = picked.iter().map(|&i| labels[i]).collect();
    let outputs = if classes.len() == 2 { 1 } else { classes.len() };
    let targets = encode_labels(&raw, classes, outputs)?;
    Ok(Dataset {
        x: all.slice(s![..n, ..]).to_owned(),
        y: targets.slice(s![..n, ..]).to_owned(),
        x_test: all.slice(s![n.., ..]).to_owned(),
        y_test: targets.slice(s![n.., ..]).to_owned(),
        labels: raw[..n].to_vec(),
        test_labels: raw[n..].to_vec(),
        classes: classes.to_vec(),
    })
}

/// `C = 1`: first class ↦ +1, second ↦ −1. `C > 1`: one-hot over `classes`.
pub fn encode_labels(labels: &[u8], classes: &[u8], outputs: usize) -> Result<Array2<f64>> {
    let position = |l: u8| {
        classes
            .iter()
            .position(|&c| c == l)
            .ok_or_else(|| Error::ArityMismatch(format!("label {l} is not one of {classes:?}")))
    };
    match outputs {
        1 if classes.len() == 2 => {
            let mut y = Array2::zeros((labels.len(), 1));
            for (i, &l) in labels.iter().enumerate() {
                y[[i, 0]] = if position(l)? == 0 { 1.0 } else { -1.0 };
            }
            Ok(y)
        }
        c if c > 1 && c == classes.len() => {
            let mut y = Array2::zeros((labels.len(), c));
            for (i, &l) in labels.iter().enumerate() {
                y[[i, position(l)?]] = 1.0;
            }
            Ok(y)
        }
        _ => Err(Error::ArityMismatch(format!("{outputs} outputs for {} classes", classes.len()))),
    }
}

/// Decision rule matching [`encode_labels`]: sign for one output (ties go to
/// the first class), argmax otherwise.
pub fn decide(pred: ArrayView2<'_, f64>, classes: &[u8]) -> Vec<u8> {
    pred.rows()
        .into_iter()
        .map(|r| {
            if r.len() == 1 {
                if r[0] >= 0.0 {
                    classes[0]
                } else {
                    classes[1]
                }
            } else {
                let k = r.iter().enumerate().fold(0, |best, (k, &v)| if v > r[best] { k } else { best });
                classes[k]
            }
        })
        .collect()
}

/// Fraction of rows whose decision equals the label.
pub fn accuracy(pred: ArrayView2<'_, f64>, labels: &[u8], classes: &[u8]) -> f64 {
    let hits = decide(pred, classes).iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

fn forster_residual(x: &Array2<f64>) -> f64 {
    let (n, m0) = x.dim();
    let target = n as f64 / m0 as f64;
    let mut g = x.t().dot(x);
    for i in 0..m0 {
        g[[i, i]] -= target;
    }
    g.iter().map(|v| v * v).sum::<f64>().sqrt() / target
}

/// Alternates whitening `X ← X(XᵀX)^{-1/2}·√(N/M_0)` and row normalization
/// until `‖XᵀX − (N/M_0)I‖_F ≤ tol·N/M_0` with unit-norm rows.
pub fn forster_transform(x: ArrayView2<'_, f64>, tol: f64, max_iter: usize) -> Result<Array2<f64>> {
    let (n, m0) = x.dim();
    if n <= m0 {
        return Err(Error::InvalidConfig(format!("Forster transform needs N > M_0 (N = {n}, M_0 = {m0})")));
    }
    let mut out = x.to_owned();
    normalize_rows(&mut out)?;
    let scale = (n as f64 / m0 as f64).sqrt();
    let mut residual = forster_residual(&out);
    for _ in 0..max_iter {
        if residual <= tol {
            return Ok(out);
        }
        let eig = SymmetricEigen::new(&out.t().dot(&out))?;
        if eig.lambda_min() <= eig.tolerance() {
            return Err(Error::NotConverged { iterations: 0, residual });
        }
        let inv_sqrt = eig.map_spectrum(|l| scale / l.sqrt());
        out = out.dot(&inv_sqrt);
        normalize_rows(&mut out)?;
        residual = forster_residual(&out);
    }
    if residual <= tol {
        Ok(out)
    } else {
        Err(Error::NotConverged { iterations: max_iter, residual })
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a dataset as CSV: `split,label,y0..,x0..` with 17 significant
/// digits. Unlabelled rows have an empty label field.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let mut header = vec!["split".to_string(), "label".to_string()];
    header.extend((0..data.outputs()).map(|k| format!("y{k}")));
    header.extend((0..data.input_dim()).map(|k| format!("x{k}")));
    writeln!(f, "{}", header.join(","))?;
    let splits = [("train", &data.x, &data.y, &data.labels), ("test", &data.x_test, &data.y_test, &data.test_labels)];
    for (name, x, y, labels) in splits {
        for i in 0..x.nrows() {
            let mut fields = vec![name.to_string(), labels.get(i).map_or(String::new(), |l| l.to_string())];
            fields.extend(y.row(i).iter().map(|&v| fmt17(v)));
            fields.extend(x.row(i).iter().map(|&v| fmt17(v)));
            writeln!(f, "{}", fields.join(","))?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`]. `classes` is rebuilt from the
/// labels in order of first appearance.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let bad = |msg: String| Error::InvalidConfig(format!("{}: {msg}", path.display()));
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "split" || cols[1] != "label" {
        return Err(bad("unexpected header".into()));
    }
    let c = cols.iter().filter(|h| h.starts_with('y')).count();
    let m0 = cols.iter().filter(|h| h.starts_with('x')).count();
    let (mut train, mut test): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (Vec::new(), Vec::new());
    let (mut labels, mut test_labels, mut classes) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines {
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + c + m0 {
            return Err(bad(format!("row has {} fields, expected {}", fields.len(), 2 + c + m0)));
        }
        let values = fields[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        let label = if fields[1].is_empty() { None } else { Some(fields[1].parse::<u8>().map_err(|e| bad(e.to_string()))?) };
        if let Some(l) = label {
            if !classes.contains(&l) {
                classes.push(l);
            }
        }
        match fields[0] {
            "train" => {
                train.push(values);
                labels.extend(label);
            }
            "test" => {
                test.push(values);
                test_labels.extend(label);
            }
            other => return Err(bad(format!("unknown split {other}"))),
        }
    }
    let to_arrays = |rows: &[Vec<f64>]| {
        let flat: Array1<f64> = rows.iter().flatten().copied().collect();
        let all = flat.into_shape_with_order((rows.len(), c + m0)).expect("row lengths checked");
        (all.slice(s![.., ..c]).to_owned(), all.slice(s![.., c..]).to_owned())
    };
    let (y, x) = to_arrays(&train);
    let (y_test, x_test) = to_arrays(&test);
    Ok(Dataset { x, y, x_test, y_test, labels, test_labels, classes })
}

/// Row-stacks train and test inputs.
pub fn union_inputs(data: &Dataset) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[data.x.view(), data.x_test.view()]).expect("same input dimension")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_rows_are_unit_norm_and_reproducible() {
        let a = synthetic_gaussian(20, 5, 7, 3).unwrap();
        a.check().unwrap();
        assert_eq!(a, synthetic_gaussian(20, 5, 7, 3).unwrap());
        assert_ne!(a.x, synthetic_gaussian(20, 5, 7, 4).unwrap().x);
    }

    #[test]
    fn synthetic_gram_off_diagonals_are_small() {
        let d = synthetic_gaussian(80, 0, 100, 1).unwrap();
        let g = d.x.dot(&d.x.t());
        let mut sum = 0.0;
        for i in 0..80 {
            for j in 0..80 {
                if i != j {
                    sum += g[[i, j]];
                }
            }
        }
        assert!((sum / (80.0 * 79.0)).abs() <= 0.05);
    }

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = IdxImages { rows: 2, cols: 2, pixels: vec![0, 255, 10, 20, 3, 4, 0, 0, 7, 7, 7, 7] };
        let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
        write_idx_images(&ip, &images).unwrap();
        write_idx_labels(&lp, &[0, 7, 0]).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip_matches_fixture_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let bytes = fs::read(&ip).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 3]);
        let d = load_idx(&ip, &lp, &[0, 7], 2, 0, 0).unwrap();
        d.check().unwrap();
        let mut rows: Vec<(u8, Vec<f64>)> = d.labels.iter().copied().zip(d.x.rows().into_iter().map(|r| r.to_vec())).collect();
        rows.sort_by(|a, b| a.1[0].total_cmp(&b.1[0]));
        let expect = |px: [f64; 4]| {
            let v: Vec<f64> = px.iter().map(|p| p / 255.0).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / n).collect::<Vec<f64>>()
        };
        let candidates = [expect([0.0, 255.0, 10.0, 20.0]), expect([3.0, 4.0, 0.0, 0.0]), expect([7.0, 7.0, 7.0, 7.0])];
        for (label, row) in &rows {
            let hit = candidates.iter().position(|c| c.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-15)).unwrap();
            assert_eq!(*label, [0, 7, 0][hit]);
        }
        for (label, y) in d.labels.iter().zip(d.y.column(0)) {
            assert_eq!(*y, if *label == 0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        assert!(matches!(load_idx(&ip, &lp, &[0, 3], 1, 0, 0), Err(Error::ClassNotFound(3))));
        assert!(matches!(read_idx_images(&lp), Err(Error::BadMagic { .. })));
        let bytes = fs::read(&ip).unwrap();
        let cut = dir.path().join("cut.idx");
        fs::write(&cut, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_idx_images(&cut), Err(Error::TruncatedFile { .. })));
        fs::write(&cut, &bytes[..6]).unwrap();
        assert!(matches!(read_idx_images(&cut), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn label_encodings_and_decisions() {
        let y = encode_labels(&[0, 7, 7], &[0, 7], 1).unwrap();
        assert_eq!(y.column(0).to_vec(), vec![1.0, -1.0, -1.0]);
        assert_eq!(decide(y.view(), &[0, 7]), vec![0, 7, 7]);
        let labels: Vec<u8> = (0..10).collect();
        let y = encode_labels(&labels, &labels, 10).unwrap();
        assert!(y.rows().into_iter().all(|r| r.sum() == 1.0));
        assert_eq!(decide(y.view(), &labels), labels);
        assert_eq!(accuracy(y.view(), &labels, &labels), 1.0);
        assert!(matches!(encode_labels(&[0, 1, 2], &[0, 1, 2], 1), Err(Error::ArityMismatch(_))));
        assert!(matches!(encode_labels(&[0, 1], &[0, 1], 3), Err(Error::ArityMismatch(_))));
    }

    #[test]
    fn forster_fixed_point_is_unchanged() {
        // rows ±e_i for i < M_0: XᵀX = 2I = (N/M_0)I
        let m0 = 3;
        let mut x = Array2::zeros((2 * m0, m0));
        for i in 0..m0 {
            x[[2 * i, i]] = 1.0;
            x[[2 * i + 1, i]] = -1.0;
        }
        let out = forster_transform(x.view(), 1e-10, 10).unwrap();
        assert!((&out - &x).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn forster_gaussian_meets_post_conditions_and_is_idempotent() {
        let d = synthetic_gaussian(200, 0, 50, 2).unwrap();
        let out = forster_transform(d.x.view(), 1e-6, 500).unwrap();
        assert!(forster_residual(&out) <= 1e-6);
        for r in out.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-10);
        }
        let again = forster_transform(out.view(), 1e-6, 500).unwrap();
        assert!((&again - &out).iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn forster_rejects_too_few_rows() {
        let d = synthetic_gaussian(5, 0, 8, 2).unwrap();
        assert!(matches!(forster_transform(d.x.view(), 1e-6, 10), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let d = load_idx(&ip, &lp, &[0, 7], 2, 1, 5).unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&path, &d).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.x, d.x);
        assert_eq!(back.y, d.y);
        assert_eq!(back.x_test, d.x_test);
        assert_eq!(back.labels, d.labels);
        let s = synthetic_gaussian(4, 2, 3, 9).unwrap();
        write_csv(&path, &s).unwrap();
        assert_eq!(read_csv(&path).unwrap(), s);
    }

    proptest! {
        #[test]
        fn normalized_rows_have_unit_norm(seed in 0u64..1000, n in 1usize..20, d in 1usize..12) {
            let data = synthetic_gaussian(n, 1, d, seed).unwrap();
            for r in data.x.rows().into_iter().chain(data.x_test.rows()) {
                prop_assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }
}
