//! Datasets: synthetic generation, loaders, min-max normalization and splits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{open_file, GrffError, Result};
use crate::generator::streams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `n×d`, or `n×C×H×W` for images.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
    /// Original label text of each class index.
    pub classes: Vec<String>,
    pub source: String,
    pub normalization: Option<MinMax>,
}

impl Dataset {
    pub fn new(name: &str, x: Tensor, y: Vec<usize>, classes: Vec<String>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(GrffError::Consistency(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        let num_classes = classes.len();
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(GrffError::Label(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Dataset {
            name: name.to_string(),
            x,
            y,
            num_classes,
            classes,
            source: String::new(),
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Features per sample (`C·H·W` for images).
    pub fn dim(&self) -> usize {
        self.x.row_len()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: Tensor::zeros(&[0]),
            y: Vec::new(),
            num_classes: self.num_classes,
            classes: self.classes.clone(),
            source: self.source.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// ±1 targets for binary tasks (class 0 → −1, class 1 → +1).
    pub fn signed_labels(&self) -> Result<Vec<f64>> {
        if self.num_classes != 2 {
            return Err(GrffError::Label(format!(
                "±1 labels need a binary task, {} has {} classes",
                self.name, self.num_classes
            )));
        }
        Ok(self.y.iter().map(|&c| if c == 1 { 1.0 } else { -1.0 }).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }
}

fn binary_classes() -> Vec<String> {
    vec!["-1".into(), "+1".into()]
}

/// `x ~ N(0, I_d)`, label `+1` (class 1) when `‖x‖² > √d`, else `−1` (class 0).
pub fn make_synthetic(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(GrffError::Config("synthetic data needs n ≥ 1 and d ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::DATA);
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let x = Tensor::new(vec![n, d], data)?;
    let y = (0..n).map(|i| synthetic_label(x.row(i))).collect();
    let mut ds = Dataset::new(&format!("synthetic-d{d}"), x, y, binary_classes())?;
    ds.source = format!("synthetic(n={n}, d={d}, seed={seed})");
    Ok(ds)
}

pub fn synthetic_label(x: &[f64]) -> usize {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    usize::from(sq > (x.len() as f64).sqrt())
}

/// Per-feature minimum and maximum of a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.rows() == 0 {
            return Err(GrffError::Config("cannot normalize with an empty training set".into()));
        }
        let d = x.row_len();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in x.data().chunks(d) {
            for ((lo, hi), &v) in min.iter_mut().zip(max.iter_mut()).zip(row) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        Ok(MinMax { min, max })
    }

    /// Maps into `[0,1]`, clipping values outside the recorded range;
    /// constant features map to 0.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.min.len();
        if x.row_len() != d {
            return Err(GrffError::dim("minmax", x.shape(), &[d]));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, &lo), &hi) in row.iter_mut().zip(&self.min).zip(&self.max) {
                *v = if hi > lo { ((*v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
            }
        }
        Ok(out)
    }
}

/// Fits min/max on `train` only and applies it to `train` and every other set.
pub fn minmax_normalize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, MinMax)> {
    let mm = MinMax::fit(&train.x)?;
    let norm = |ds: &Dataset| -> Result<Dataset> {
        let mut out = ds.clone();
        out.x = mm.apply(&ds.x)?;
        out.normalization = Some(mm.clone());
        Ok(out)
    };
    let tr = norm(train)?;
    let rest = others.iter().map(|d| norm(d)).collect::<Result<Vec<_>>>()?;
    Ok((tr, rest, mm))
}

/// Class text → index, ordered numerically when every label parses as a
/// number and lexically otherwise.
fn class_index(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut uniq: Vec<String> = labels.to_vec();
    uniq.sort();
    uniq.dedup();
    let numeric: Option<Vec<f64>> = uniq.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(vals) = numeric {
        let mut pairs: Vec<(f64, String)> = vals.into_iter().zip(uniq).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.dedup_by(|a, b| a.0 == b.0);
        uniq = pairs.into_iter().map(|p| p.1).collect();
    }
    let lookup = |s: &String| -> usize {
        match s.parse::<f64>() {
            Ok(v) => uniq.iter().position(|u| u.parse::<f64>().ok() == Some(v)).expect("present"),
            Err(_) => uniq.iter().position(|u| u == s).expect("present"),
        }
    };
    let y = labels.iter().map(lookup).collect();
    (y, uniq)
}

fn dataset_name(path: &Path) -> String {
    let mut name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    for ext in [".gz", ".libsvm", ".svm", ".txt", ".csv", ".t", ".train", ".test"] {
        if let Some(stripped) = name.strip_suffix(ext) {
            name = stripped.to_string();
        }
    }
    name
}

/// Reads a file, transparently gunzipping when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    open_file(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| GrffError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Sparse `label idx:val idx:val …` text with 1-based indices.
pub fn load_sparse_text(path: &Path, dim: Option<usize>) -> Result<Dataset> {
    let bytes = read_maybe_gz(path)?;
    let text = String::from_utf8(bytes).map_err(|_| GrffError::Format(format!("{} is not UTF-8", path.display())))?;
    parse_sparse_text(&text, dim, &dataset_name(path)).map(|mut ds| {
        ds.source = path.display().to_string();
        ds
    })
}

pub fn parse_sparse_text(text: &str, dim: Option<usize>, name: &str) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_idx = 0;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label = tokens.next().expect("non-empty line");
        label.parse::<f64>().map_err(|_| GrffError::Parse {
            line: line_no,
            msg: format!("label {label:?} is not numeric"),
        })?;
        let mut row = Vec::new();
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| GrffError::Parse {
                line: line_no,
                msg: format!("expected index:value, got {tok:?}"),
            })?;
            let i: usize = i.parse().map_err(|_| GrffError::Parse {
                line: line_no,
                msg: format!("bad feature index {i:?}"),
            })?;
            if i == 0 {
                return Err(GrffError::Parse {
                    line: line_no,
                    msg: "feature indices are 1-based".into(),
                });
            }
            let v: f64 = v.parse().map_err(|_| GrffError::Parse {
                line: line_no,
                msg: format!("non-numeric value {v:?}"),
            })?;
            max_idx = max_idx.max(i);
            row.push((i - 1, v));
        }
        labels.push(label.to_string());
        rows.push(row);
    }
    let d = match dim {
        Some(d) if d < max_idx => {
            return Err(GrffError::Consistency(format!(
                "declared dimension {d} but index {max_idx} present"
            )))
        }
        Some(d) => d,
        None => max_idx,
    };
    let mut data = vec![0.0; rows.len() * d];
    for (r, row) in rows.iter().enumerate() {
        for &(i, v) in row {
            data[r * d + i] = v;
        }
    }
    let (y, classes) = class_index(&labels);
    Dataset::new(name, Tensor::new(vec![rows.len(), d], data)?, y, classes)
}

/// Writes the sparse text format; zero features are omitted. Values use the
/// shortest representation that parses back to the same bits.
pub fn write_sparse_text(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..ds.len() {
        write!(w, "{}", ds.classes[ds.y[i]])?;
        for (j, &v) in ds.x.row(i).iter().enumerate() {
            if v != 0.0 {
                write!(w, " {}:{:?}", j + 1, v)?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with a header row; the column named `label` holds the class.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let bytes = read_maybe_gz(path)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(&bytes[..]);
    let headers = rdr
        .headers()
        .map_err(|e| GrffError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| GrffError::Format(format!("{}: no \"label\" column", path.display())))?;
    let d = headers.len() - 1;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| GrffError::Parse { line, msg: e.to_string() })?;
        if rec.len() != headers.len() {
            return Err(GrffError::Parse {
                line,
                msg: format!("{} fields, header has {}", rec.len(), headers.len()),
            });
        }
        for (c, field) in rec.iter().enumerate() {
            if c == label_col {
                labels.push(field.trim().to_string());
            } else {
                data.push(field.trim().parse::<f64>().map_err(|_| GrffError::Parse {
                    line,
                    msg: format!("non-numeric value {field:?}"),
                })?);
            }
        }
    }
    let n = labels.len();
    let (y, classes) = class_index(&labels);
    let mut ds = Dataset::new(&dataset_name(path), Tensor::new(vec![n, d], data)?, y, classes)?;
    ds.source = path.display().to_string();
    Ok(ds)
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| GrffError::Io(e.into()))?;
    let d = ds.dim();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| GrffError::Io(e.into()))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.classes[ds.y[i]].clone());
        w.write_record(&rec).map_err(|e| GrffError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Parsed IDX file: dimensions and values.
struct Idx {
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn parse_idx(bytes: &[u8], expected_magic: u32, what: &str) -> Result<Idx> {
    if bytes.len() < 4 {
        return Err(GrffError::Format(format!("{what}: file shorter than the IDX header")));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    let ndim = (magic & 0xff) as usize;
    let dtype = (magic >> 8) & 0xff;
    if magic >> 16 != 0 || ndim != (expected_magic & 0xff) as usize {
        return Err(GrffError::Format(format!(
            "{what}: magic {magic:#010x}, expected {expected_magic:#010x}"
        )));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(GrffError::Format(format!("{what}: truncated IDX header")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let body = &bytes[header..];
    let values: Vec<f64> = match dtype {
        0x08 => body.get(..n).map(|b| b.iter().map(|&v| v as f64).collect()),
        0x0D => body
            .get(..4 * n)
            .map(|b| b.chunks(4).map(|c| f32::from_be_bytes(c.try_into().expect("4")) as f64).collect()),
        0x0E => body
            .get(..8 * n)
            .map(|b| b.chunks(8).map(|c| f64::from_be_bytes(c.try_into().expect("8"))).collect()),
        other => {
            return Err(GrffError::Format(format!("{what}: unsupported IDX element type {other:#04x}")))
        }
    }
    .ok_or_else(|| GrffError::Format(format!("{what}: IDX body shorter than {dims:?}")))?;
    Ok(Idx { dims, values })
}

/// MNIST-style IDX image and label files (optionally gzipped). Pixels stay
/// in `[0,255]`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx(&read_maybe_gz(images)?, IDX_IMAGES, &images.display().to_string())?;
    let lab = parse_idx(&read_maybe_gz(labels)?, IDX_LABELS, &labels.display().to_string())?;
    if img.dims[0] != lab.dims[0] {
        return Err(GrffError::Consistency(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    let y: Vec<usize> = lab
        .values
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..10.0).contains(&v) {
                Ok(v as usize)
            } else {
                Err(GrffError::Label(format!("MNIST label {v} outside 0-9")))
            }
        })
        .collect::<Result<_>>()?;
    let classes = (0..10).map(|c| c.to_string()).collect();
    let mut ds = Dataset::new("mnist", Tensor::new(vec![n, 1, h, w], img.values)?, y, classes)?;
    ds.source = images.display().to_string();
    Ok(ds)
}

fn write_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        crate::io::write_atomic(path, &enc.finish()?)
    } else {
        crate::io::write_atomic(path, bytes)
    }
}

/// Writes images as IDX: unsigned bytes when every value is an integer in
/// `[0,255]`, big-endian doubles otherwise. Gzipped when the path ends in `.gz`.
pub fn write_idx_images(images: &Tensor, path: &Path) -> Result<()> {
    let shape = images.shape();
    let (n, h, w) = match shape {
        [n, 1, h, w] | [n, h, w] => (*n, *h, *w),
        _ => return Err(GrffError::Shape(format!("IDX images need n×1×H×W, got {shape:?}"))),
    };
    let bytes_ok = images.data().iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v));
    let dtype: u32 = if bytes_ok { 0x08 } else { 0x0E };
    let mut out = Vec::new();
    out.extend_from_slice(&((dtype << 8) | 3).to_be_bytes());
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in images.data() {
        if bytes_ok {
            out.push(v as u8);
        } else {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    write_gz(path, &out)
}

pub fn write_idx_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| GrffError::Label(format!("label {l} does not fit a byte")))?);
    }
    write_gz(path, &out)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::SHUFFLE);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Seeded shuffle then contiguous `(train, val, test)` partition.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(GrffError::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = ds.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(GrffError::Config(format!(
            "split of {n} samples by {ratios:?} leaves an empty partition ({n_train}/{n_val}/{n_test})"
        )));
    }
    let idx = shuffled(n, seed);
    Ok((
        ds.subset(&idx[..n_train]),
        ds.subset(&idx[n_train..n_train + n_val]),
        ds.subset(&idx[n_train + n_val..]),
    ))
}

/// Seeded `(train, validation)` carve of an already divided training set.
pub fn carve_validation(train: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(GrffError::Config(format!("validation fraction {fraction} outside [0,1)")));
    }
    let n = train.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(GrffError::Config(format!(
            "validation carve of {fraction} from {n} samples leaves an empty partition"
        )));
    }
    let idx = shuffled(n, seed);
    Ok((train.subset(&idx[n_val..]), train.subset(&idx[..n_val])))
}

/// The MONK's problems: six nominal attributes and a logical target rule.
pub mod monks {
    use super::*;

    /// Attribute domains `a1 … a6`.
    pub const DOMAINS: [usize; 6] = [3, 3, 2, 3, 4, 2];

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Problem {
        One,
        Two,
        Three,
    }

    pub fn target(problem: Problem, a: &[usize; 6]) -> bool {
        match problem {
            Problem::One => a[0] == a[1] || a[4] == 1,
            Problem::Two => a.iter().zip(DOMAINS).filter(|(&v, _)| v == 1).count() == 2,
            Problem::Three => (a[4] == 3 && a[3] == 1) || (a[4] != 4 && a[1] != 3),
        }
    }

    /// All 432 attribute combinations in lexicographic order.
    pub fn all_instances() -> Vec<[usize; 6]> {
        let mut out = Vec::with_capacity(432);
        let mut a = [1usize; 6];
        loop {
            out.push(a);
            let mut k = 5;
            loop {
                a[k] += 1;
                if a[k] <= DOMAINS[k] {
                    break;
                }
                a[k] = 1;
                if k == 0 {
                    return out;
                }
                k -= 1;
            }
        }
    }

    /// `(train, test)`: test is every instance, train a seeded sample of
    /// `n_train` instances with `noise` of their labels flipped.
    pub fn generate(problem: Problem, n_train: usize, noise: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let all = all_instances();
        let to_ds = |rows: &[[usize; 6]], labels: Vec<usize>, name: &str| -> Result<Dataset> {
            let data = rows.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect();
            Dataset::new(name, Tensor::new(vec![rows.len(), 6], data)?, labels, vec!["0".into(), "1".into()])
        };
        let test_y = all.iter().map(|a| usize::from(target(problem, a))).collect();
        let test = to_ds(&all, test_y, "monks-test")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..all.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n_train);
        idx.sort_unstable();
        let rows: Vec<[usize; 6]> = idx.iter().map(|&i| all[i]).collect();
        let n_flip = (noise * n_train as f64).round() as usize;
        let mut flip: Vec<usize> = (0..n_train).collect();
        flip.shuffle(&mut rng);
        let flip: std::collections::BTreeSet<usize> = flip[..n_flip].iter().copied().collect();
        let y = rows
            .iter()
            .enumerate()
            .map(|(i, a)| usize::from(target(problem, a) ^ flip.contains(&i)))
            .collect();
        Ok((to_ds(&rows, y, "monks-train")?, test))
    }
}

/// Reads an `n×d` dataset by file extension: `.csv` as CSV, otherwise sparse text.
pub fn load_table(path: &Path) -> Result<Dataset> {
    let name = path.to_string_lossy();
    if name.ends_with(".csv") || name.ends_with(".csv.gz") {
        load_csv(path)
    } else {
        load_sparse_text(path, None)
    }
}

/// Label histogram as fractions.
pub fn class_fractions(ds: &Dataset) -> BTreeMap<usize, f64> {
    ds.class_counts()
        .into_iter()
        .enumerate()
        .map(|(c, k)| (c, k as f64 / ds.len() as f64))
        .collect()
}

/// Line-oriented reader shared by tools that stream text files.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    BufReader::new(open_file(path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert_eq, proptest};

    #[test]
    fn synthetic_labels() {
        assert_eq!(synthetic_label(&[3.0, 0.0]), 1);
        assert_eq!(synthetic_label(&[1.0, 0.0]), 0);
        let ds = make_synthetic(100_000, 2, 1).unwrap();
        let pos = ds.y.iter().filter(|&&c| c == 1).count() as f64 / 1e5;
        // P(χ²₂ > √2) = exp(−√2/2)
        assert!((pos - (-(2f64.sqrt()) / 2.0).exp()).abs() < 0.01, "{pos}");
        assert_eq!(make_synthetic(50, 3, 9).unwrap(), make_synthetic(50, 3, 9).unwrap());
        for i in 0..ds.len().min(1000) {
            assert_eq!(ds.y[i], synthetic_label(ds.x.row(i)));
        }
    }

    #[test]
    fn minmax_rules() {
        let train = Dataset::new(
            "t",
            Tensor::from_rows(&[vec![2.0, 5.0], vec![4.0, 5.0]]).unwrap(),
            vec![0, 1],
            binary_classes(),
        )
        .unwrap();
        let test = Dataset::new(
            "u",
            Tensor::from_rows(&[vec![3.0, 7.0], vec![10.0, 5.0], vec![-1.0, 1.0]]).unwrap(),
            vec![0, 1, 0],
            binary_classes(),
        )
        .unwrap();
        let (tr, rest, mm) = minmax_normalize(&train, &[&test]).unwrap();
        assert_eq!(tr.x.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(rest[0].x.data(), &[0.5, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(mm.min, vec![2.0, 5.0]);
        // permuting the test rows does not touch the record
        let perm = test.subset(&[2, 0, 1]);
        assert_eq!(minmax_normalize(&train, &[&perm]).unwrap().2, mm);
    }

    #[test]
    fn sparse_text_examples() {
        let ds = parse_sparse_text("+1 1:0.5 3:1.0\n-1\n", Some(3), "x").unwrap();
        assert_eq!(ds.x.row(0), &[0.5, 0.0, 1.0]);
        assert_eq!(ds.x.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(ds.y, vec![1, 0]);
        assert_eq!(ds.classes, vec!["-1", "+1"]);
        let err = parse_sparse_text("1 1:0.5\n1 2:abc\n", None, "x").unwrap_err();
        assert!(matches!(err, GrffError::Parse { line: 2, .. }), "{err}");
        assert!(matches!(parse_sparse_text("1 1-0.5\n", None, "x"), Err(GrffError::Parse { line: 1, .. })));
        assert!(matches!(parse_sparse_text("1 0:0.5\n", None, "x"), Err(GrffError::Parse { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let ds = make_synthetic(20, 4, 3).unwrap();
        write_csv(&ds, &p).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(load_csv(&p), Err(GrffError::Format(_))));
    }

    #[test]
    fn idx_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = Tensor::new(vec![3, 1, 2, 2], (0..12).map(|v| (v * 20) as f64).collect()).unwrap();
        let (pi, pl) = (dir.path().join("i.idx.gz"), dir.path().join("l.idx"));
        write_idx_images(&imgs, &pi).unwrap();
        write_idx_labels(&[0, 9, 4], &pl).unwrap();
        let ds = load_mnist_idx(&pi, &pl).unwrap();
        assert_eq!(ds.x, imgs);
        assert_eq!(ds.y, vec![0, 9, 4]);
        write_idx_labels(&[0, 9], &pl).unwrap();
        assert!(matches!(load_mnist_idx(&pi, &pl), Err(GrffError::Consistency(_))));
        assert!(matches!(load_mnist_idx(&pl, &pi), Err(GrffError::Format(_))));
        let frac = imgs.map(|v| v + 0.25);
        write_idx_images(&frac, &pi).unwrap();
        write_idx_labels(&[0, 9, 4], &pl).unwrap();
        assert_eq!(load_mnist_idx(&pi, &pl).unwrap().x, frac);
    }

    #[test]
    fn idx_header_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.idx");
        write_idx_images(&Tensor::zeros(&[2, 1, 28, 28]), &p).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert_eq!(&b[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28]);
        assert_eq!(b.len(), 16 + 2 * 784);
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = make_synthetic(100, 2, 1).unwrap();
        let (a, b, c) = split(&ds, (0.4, 0.1, 0.5), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (40, 10, 50));
        let (a2, _, _) = split(&ds, (0.4, 0.1, 0.5), 7).unwrap();
        assert_eq!(a, a2);
        let mut all: Vec<Vec<u64>> = [&a, &b, &c]
            .iter()
            .flat_map(|d| (0..d.len()).map(|i| d.x.row(i).iter().map(|v| v.to_bits()).collect()).collect::<Vec<_>>())
            .collect();
        let mut orig: Vec<Vec<u64>> = (0..100).map(|i| ds.x.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(matches!(split(&ds, (0.5, 0.0, 0.5), 1), Err(GrffError::Config(_))));
        assert!(matches!(split(&ds, (0.5, 0.2, 0.5), 1), Err(GrffError::Config(_))));
        let (t, v) = carve_validation(&ds, 0.2, 3).unwrap();
        assert_eq!((t.len(), v.len()), (80, 20));
    }

    #[test]
    fn monks_rules() {
        let all = monks::all_instances();
        assert_eq!(all.len(), 432);
        assert!(monks::target(monks::Problem::One, &[2, 2, 1, 1, 3, 1]));
        assert!(monks::target(monks::Problem::One, &[1, 2, 1, 1, 1, 1]));
        assert!(!monks::target(monks::Problem::One, &[1, 2, 1, 1, 2, 1]));
        let pos1 = all.iter().filter(|a| monks::target(monks::Problem::One, a)).count();
        assert_eq!(pos1, 216);
        let (train, test) = monks::generate(monks::Problem::Three, 122, 0.05, 1).unwrap();
        assert_eq!((train.len(), test.len()), (122, 432));
        let wrong = (0..122)
            .filter(|&i| {
                let a: [usize; 6] = std::array::from_fn(|k| train.x.row(i)[k] as usize);
                usize::from(monks::target(monks::Problem::Three, &a)) != train.y[i]
            })
            .count();
        assert_eq!(wrong, 6);
    }

    proptest! {
        #[test]
        fn sparse_text_round_trip(seed in 0u64..300, n in 1usize..20, d in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..n * d)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.sample::<f64, _>(StandardNormal) * 1e3 })
                .collect();
            let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            y[0] = 0;
            if n > 1 { y[1] = 1; }
            let classes = if n > 1 { binary_classes() } else { vec!["-1".into()] };
            let ds = Dataset::new("r", Tensor::new(vec![n, d], data).unwrap(), y, classes).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.txt");
            write_sparse_text(&ds, &p).unwrap();
            let back = load_sparse_text(&p, Some(d)).unwrap();
            prop_assert_eq!(back.x, ds.x);
            prop_assert_eq!(back.y, ds.y);
        }
    }
}
