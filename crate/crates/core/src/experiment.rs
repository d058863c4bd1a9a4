//! Config-driven experiment runs.
//!
//! A run reads a TOML config, resolves every default (recording where each
//! value came from), executes the requested repetitions and writes
//!
//! - `manifest.json`: resolved config, seed and its source, input file hashes
//! - `metrics.csv`: one row per (setting, method, repetition, metric)
//! - `summary.csv` and `summary.txt`: mean ± sample std per group
//! - `curves/`, `models/`, `pca/`, `adversarial/`: per-repetition artifacts
//!
//! Every file except the manifest depends only on the resolved config and
//! seed, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::baselines::{
    default_gamma_grid, fit_mlp_baseline, select_aligned_ridge, select_ridge_rff, Mlp, DEFAULT_LAMBDA_GRID,
    DEFAULT_POOL_FACTOR,
};
use crate::data::{
    carve_validation, load_csv, load_mnist_idx, load_sparse_text, make_synthetic, minmax_normalize, Dataset, MinMax,
};
use crate::error::{GrffError, Result};
use crate::generator::{derive_seed, DEFAULT_NOISE_DIM};
use crate::io::{csv_bytes, write_atomic};
use crate::model::{accuracy, GrffNetwork, NetworkSpec, Variant};
use crate::parallel;
use crate::pca::pca_top_components;
use crate::robustness::{iteration_count, robustness_protocol, write_adversarial_dump, AttackConfig};
use crate::serialize::{save_model, FORMAT_VERSION};
use crate::trainer::{
    train_progressive, EpochRecord, PhaseSchedule, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_VALIDATION_FRACTION,
};

pub const DEFAULT_REPETITIONS: usize = 5;
pub const DEFAULT_RFF_FEATURES: usize = 256;
pub const DEFAULT_SYNTHETIC_TRAIN: usize = 10_000;
pub const DEFAULT_SYNTHETIC_TEST: usize = 1_000;
pub const DEFAULT_EPSILONS: [f64; 4] = [4.0, 8.0, 12.0, 16.0];
pub const IMAGE_D_LIST: [usize; 2] = [16, 8];
pub const IMAGE_EPOCHS: [usize; 2] = [5, 40];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SyntheticSweep,
    Benchmark,
    LayersStudy,
    Robustness,
    TrainSingle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Grff,
    Rff,
    RffAligned,
    Mlp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Grff => "grff",
            Method::Rff => "rff",
            Method::RffAligned => "rff-aligned",
            Method::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Synthetic,
    Libsvm,
    Csv,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub repetitions: Option<usize>,
    pub methods: Option<Vec<Method>>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub format: DataFormat,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// IDX label files.
    pub train_labels: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Declared sparse-text dimension.
    pub dim: Option<usize>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    /// Synthetic dimensions; one setting per entry in a sweep.
    pub dims: Option<Vec<usize>>,
    /// Keep only the first `n` training (and test) rows.
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
    pub normalize: Option<bool>,
    pub validation_fraction: Option<f64>,
    /// Held-out share when no test file is given.
    pub test_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub d_list: Option<Vec<usize>>,
    pub epochs: Option<Vec<usize>>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub noise_dim: Option<usize>,
    pub hidden: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub gammas: Option<Vec<f64>>,
    pub lambdas: Option<Vec<f64>>,
    pub features: Option<usize>,
    pub pool_factor: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilons: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    /// Overrides the derived iteration count for every ε.
    pub iterations: Option<usize>,
    /// Resampled draws voted over for the second accuracy (1 = single draw).
    pub ensemble: Option<usize>,
    pub max_examples: Option<usize>,
    pub dump: Option<bool>,
    /// Attack a saved model instead of training one per repetition.
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayersSection {
    pub depths: Option<Vec<usize>>,
    pub d_lists: Option<Vec<Vec<usize>>>,
    pub epochs: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub curves: Option<bool>,
    pub models: Option<bool>,
    pub pca_layers: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub layers: LayersSection,
    #[serde(default)]
    pub outputs: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Config,
    Paper,
    Decided,
    Env,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub field: String,
    pub source: Source,
}

fn fill<T>(slot: &mut Option<T>, field: &str, default: impl FnOnce() -> T, source: Source, prov: &mut Vec<Provenance>) {
    let source = if slot.is_some() {
        Source::Config
    } else {
        *slot = Some(default());
        source
    };
    prov.push(Provenance {
        field: field.into(),
        source,
    });
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> GrffError {
    GrffError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Reads a TOML config, or the `config` object of a run manifest when
    /// the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| GrffError::MissingFile {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            let manifest: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| config_err(&path.display().to_string(), e))?;
            serde_json::from_value(manifest.get("config").cloned().unwrap_or_default())
                .map_err(|e| config_err(&path.display().to_string(), e))?
        } else {
            toml::from_str(&text).map_err(|e| config_err(&path.display().to_string(), e))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err("config", e))
    }

    /// Makes relative paths relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.experiment.output);
        for p in [
            &mut self.data.train,
            &mut self.data.test,
            &mut self.data.train_labels,
            &mut self.data.test_labels,
            &mut self.attack.model,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Fills every default and validates. Returns the provenance of each
    /// defaultable field.
    pub fn resolve(&mut self) -> Result<Vec<Provenance>> {
        let mut prov = Vec::new();
        let kind = self.experiment.kind;
        let image = self.data.format == DataFormat::Idx;
        fill(
            &mut self.experiment.repetitions,
            "experiment.repetitions",
            || if kind == ExperimentKind::TrainSingle { 1 } else { DEFAULT_REPETITIONS },
            if kind == ExperimentKind::TrainSingle { Source::Decided } else { Source::Paper },
            &mut prov,
        );
        let (methods, msrc) = match kind {
            ExperimentKind::Benchmark | ExperimentKind::SyntheticSweep if !image => {
                (vec![Method::Rff, Method::RffAligned, Method::Mlp, Method::Grff], Source::Paper)
            }
            ExperimentKind::LayersStudy => (vec![Method::Rff, Method::RffAligned, Method::Grff], Source::Paper),
            _ => (vec![Method::Grff], Source::Decided),
        };
        fill(&mut self.experiment.methods, "experiment.methods", || methods, msrc, &mut prov);

        let d = &mut self.data;
        fill(&mut d.normalize, "data.normalize", || matches!(d.format, DataFormat::Libsvm | DataFormat::Csv), Source::Paper, &mut prov);
        fill(&mut d.validation_fraction, "data.validation_fraction", || DEFAULT_VALIDATION_FRACTION, Source::Paper, &mut prov);
        fill(&mut d.test_fraction, "data.test_fraction", || 0.5, Source::Paper, &mut prov);
        if d.format == DataFormat::Synthetic {
            fill(&mut d.n_train, "data.n_train", || DEFAULT_SYNTHETIC_TRAIN, Source::Paper, &mut prov);
            fill(&mut d.n_test, "data.n_test", || DEFAULT_SYNTHETIC_TEST, Source::Paper, &mut prov);
            fill(&mut d.dims, "data.dims", || (2..=20).step_by(2).collect(), Source::Paper, &mut prov);
        }

        let t = &mut self.train;
        fill(&mut t.d_list, "train.d_list", || if image { IMAGE_D_LIST.to_vec() } else { vec![256, 64] }, Source::Paper, &mut prov);
        fill(
            &mut t.epochs,
            "train.epochs",
            || if image { IMAGE_EPOCHS.to_vec() } else { vec![200, 1000] },
            if image { Source::Decided } else { Source::Paper },
            &mut prov,
        );
        fill(&mut t.batch_size, "train.batch_size", || DEFAULT_BATCH_SIZE, Source::Decided, &mut prov);
        let adam = AdamConfig::default();
        fill(&mut t.lr, "train.lr", || adam.lr, Source::Decided, &mut prov);
        fill(&mut t.beta1, "train.beta1", || adam.beta1, Source::Decided, &mut prov);
        fill(&mut t.beta2, "train.beta2", || adam.beta2, Source::Decided, &mut prov);
        fill(&mut t.eps, "train.eps", || adam.eps, Source::Decided, &mut prov);
        fill(&mut t.noise_dim, "train.noise_dim", || DEFAULT_NOISE_DIM, Source::Paper, &mut prov);

        let b = &mut self.baseline;
        fill(&mut b.gammas, "baseline.gammas", default_gamma_grid, Source::Paper, &mut prov);
        fill(&mut b.lambdas, "baseline.lambdas", || DEFAULT_LAMBDA_GRID.to_vec(), Source::Decided, &mut prov);
        fill(&mut b.features, "baseline.features", || DEFAULT_RFF_FEATURES, Source::Paper, &mut prov);
        fill(&mut b.pool_factor, "baseline.pool_factor", || DEFAULT_POOL_FACTOR, Source::Decided, &mut prov);

        if kind == ExperimentKind::Robustness {
            let a = &mut self.attack;
            fill(&mut a.epsilons, "attack.epsilons", || DEFAULT_EPSILONS.to_vec(), Source::Paper, &mut prov);
            fill(&mut a.alpha, "attack.alpha", || 1.0, Source::Paper, &mut prov);
            fill(&mut a.ensemble, "attack.ensemble", || 1, Source::Decided, &mut prov);
            fill(&mut a.dump, "attack.dump", || true, Source::Decided, &mut prov);
        }
        if kind == ExperimentKind::LayersStudy {
            let l = &mut self.layers;
            fill(&mut l.depths, "layers.depths", || vec![1, 2, 3, 4], Source::Paper, &mut prov);
            let depths = l.depths.clone().unwrap_or_default();
            let table: Result<Vec<TrainConfig>> = depths.iter().map(|&k| TrainConfig::for_layers(k, 0)).collect();
            let table = table.map_err(|e| config_err("layers.depths", e))?;
            fill(&mut l.d_lists, "layers.d_lists", || table.iter().map(|c| c.d_list.clone()).collect(), Source::Paper, &mut prov);
            fill(&mut l.epochs, "layers.epochs", || table.iter().map(|c| c.schedule.epochs.clone()).collect(), Source::Paper, &mut prov);
        }
        let o = &mut self.outputs;
        fill(&mut o.curves, "outputs.curves", || true, Source::Decided, &mut prov);
        fill(
            &mut o.models,
            "outputs.models",
            || matches!(kind, ExperimentKind::TrainSingle | ExperimentKind::Robustness),
            Source::Decided,
            &mut prov,
        );
        fill(&mut o.pca_layers, "outputs.pca_layers", Vec::new, Source::Decided, &mut prov);
        self.validate()?;
        Ok(prov)
    }

    fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.repetitions == Some(0) {
            return Err(config_err("experiment.repetitions", "must be at least 1"));
        }
        if e.methods.as_ref().is_some_and(|m| m.is_empty()) {
            return Err(config_err("experiment.methods", "must not be empty"));
        }
        let d = &self.data;
        match d.format {
            DataFormat::Synthetic => {
                if d.dims.as_ref().is_some_and(|v| v.is_empty() || v.contains(&0)) {
                    return Err(config_err("data.dims", "must be non-empty and positive"));
                }
                if d.n_train.is_some_and(|n| n < 5) || d.n_test == Some(0) {
                    return Err(config_err("data.n_train", "needs at least 5 training and 1 test sample"));
                }
            }
            DataFormat::Libsvm | DataFormat::Csv => {
                if d.train.is_none() {
                    return Err(config_err("data.train", "required for file data"));
                }
            }
            DataFormat::Idx => {
                for (name, p) in [
                    ("data.train", &d.train),
                    ("data.train_labels", &d.train_labels),
                    ("data.test", &d.test),
                    ("data.test_labels", &d.test_labels),
                ] {
                    if p.is_none() {
                        return Err(config_err(name, "required for IDX data"));
                    }
                }
            }
        }
        for (name, v) in [("data.validation_fraction", d.validation_fraction), ("data.test_fraction", d.test_fraction)] {
            if v.is_some_and(|f| !(f > 0.0 && f < 1.0)) {
                return Err(config_err(name, "must lie strictly between 0 and 1"));
            }
        }
        let t = &self.train;
        if let (Some(dl), Some(ep)) = (&t.d_list, &t.epochs) {
            if dl.len() != ep.len() {
                return Err(config_err("train.epochs", format!("{} phases for {} layers in train.d_list", ep.len(), dl.len())));
            }
            if dl.is_empty() || dl.contains(&0) {
                return Err(config_err("train.d_list", "must be non-empty and positive"));
            }
            PhaseSchedule::new(ep).map_err(|e| config_err("train.epochs", e))?;
        }
        if let Some(h) = &t.hidden {
            if t.d_list.as_ref().is_some_and(|d| d.len() != h.len()) {
                return Err(config_err("train.hidden", "needs one width list per layer"));
            }
        }
        if t.batch_size == Some(0) {
            return Err(config_err("train.batch_size", "must be at least 1"));
        }
        if t.lr.is_some_and(|v| !(v > 0.0)) {
            return Err(config_err("train.lr", "must be positive"));
        }
        for (name, v) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if v.is_some_and(|b| !(0.0..1.0).contains(&b)) {
                return Err(config_err(name, "must lie in [0,1)"));
            }
        }
        if t.noise_dim == Some(0) {
            return Err(config_err("train.noise_dim", "must be at least 1"));
        }
        let b = &self.baseline;
        if b.gammas.as_ref().is_some_and(|g| g.is_empty() || g.iter().any(|&v| !(v > 0.0))) {
            return Err(config_err("baseline.gammas", "must be non-empty and positive"));
        }
        if b.lambdas.as_ref().is_some_and(|g| g.is_empty() || g.iter().any(|&v| !(v > 0.0))) {
            return Err(config_err("baseline.lambdas", "must be non-empty and positive"));
        }
        if b.features == Some(0) || b.pool_factor == Some(0) {
            return Err(config_err("baseline.features", "feature and pool counts must be positive"));
        }
        let a = &self.attack;
        if let Some(eps) = &a.epsilons {
            if eps.is_empty() || eps.iter().any(|&v| !(v >= 0.0)) {
                return Err(config_err("attack.epsilons", "must be non-empty and non-negative"));
            }
        }
        if a.alpha.is_some_and(|v| !(v > 0.0)) {
            return Err(config_err("attack.alpha", "must be positive"));
        }
        if a.iterations == Some(0) {
            return Err(config_err("attack.iterations", "must be at least 1"));
        }
        if e.kind == ExperimentKind::Robustness && d.format != DataFormat::Idx {
            return Err(config_err("data.format", "the robustness experiment needs image (idx) data"));
        }
        let l = &self.layers;
        if let Some(depths) = &l.depths {
            for (name, v) in [("layers.d_lists", &l.d_lists), ("layers.epochs", &l.epochs)] {
                if let Some(v) = v {
                    if v.len() != depths.len() || v.iter().zip(depths).any(|(x, &k)| x.len() != k) {
                        return Err(config_err(name, "needs one list of K entries per depth"));
                    }
                }
            }
        }
        if image_methods_invalid(self) {
            return Err(config_err("experiment.methods", "baselines need vector data"));
        }
        Ok(())
    }
}

fn image_methods_invalid(cfg: &ExperimentConfig) -> bool {
    cfg.data.format == DataFormat::Idx
        && cfg
            .experiment
            .methods
            .as_ref()
            .is_some_and(|m| m.iter().any(|&x| x != Method::Grff))
}

/// One (repetition, setting) data bundle. Vector data is already normalized.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalization: Option<MinMax>,
}

impl Prepared {
    fn variant(&self) -> Variant {
        match self.train.x.shape() {
            [_, c, h, w] => Variant::Image {
                channels: *c,
                height: *h,
                width: *w,
            },
            _ => Variant::Vector { dim: self.train.dim() },
        }
    }
}

/// Loads a labelled file by extension: CSV, IDX (images file whose name
/// contains `images`, labels found by substituting `labels`), otherwise
/// sparse text.
pub fn load_data_file(path: &Path, dim: Option<usize>) -> Result<Dataset> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if name.ends_with(".csv") {
        load_csv(path)
    } else if name.contains(".idx") || name.contains("-ubyte") {
        if !name.contains("images") {
            return Err(GrffError::Config(format!(
                "{}: IDX data is named by its images file (…images…), labels are found by substituting `labels`",
                path.display()
            )));
        }
        load_mnist_idx(path, &path.with_file_name(name.replacen("images", "labels", 1)))
    } else {
        load_sparse_text(path, dim)
    }
}

fn truncate(ds: Dataset, max: Option<usize>) -> Dataset {
    match max {
        Some(m) if m < ds.len() => ds.subset(&(0..m).collect::<Vec<_>>()),
        _ => ds,
    }
}

/// Files read once per run.
struct Loaded {
    train: Dataset,
    test: Option<Dataset>,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Option<Loaded>> {
    let d = &cfg.data;
    let Some(train_path) = &d.train else { return Ok(None) };
    let (train, test) = match d.format {
        DataFormat::Synthetic => return Ok(None),
        DataFormat::Idx => {
            let train = load_mnist_idx(train_path, d.train_labels.as_ref().expect("validated"))?;
            let test = load_mnist_idx(d.test.as_ref().expect("validated"), d.test_labels.as_ref().expect("validated"))?;
            (train, Some(test))
        }
        DataFormat::Csv => (load_csv(train_path)?, d.test.as_deref().map(load_csv).transpose()?),
        DataFormat::Libsvm => {
            let train = load_sparse_text(train_path, d.dim)?;
            let dim = train.dim();
            let test = d.test.as_deref().map(|p| load_sparse_text(p, Some(dim))).transpose()?;
            (train, test)
        }
    };
    if let Some(t) = &test {
        if t.x.shape()[1..] != train.x.shape()[1..] {
            return Err(GrffError::Consistency(format!(
                "train rows {:?} and test rows {:?} differ in shape",
                &train.x.shape()[1..],
                &t.x.shape()[1..]
            )));
        }
    }
    Ok(Some(Loaded {
        train: truncate(train, d.max_train),
        test: test.map(|t| truncate(t, d.max_test)),
    }))
}

fn prepare(cfg: &ExperimentConfig, loaded: Option<&Loaded>, synthetic_dim: Option<usize>, rep_seed: u64) -> Result<Prepared> {
    let d = &cfg.data;
    let (train_full, test) = match (loaded, synthetic_dim) {
        (_, Some(dim)) => (
            make_synthetic(d.n_train.expect("resolved"), dim, derive_seed(rep_seed, 2 * dim as u64))?,
            make_synthetic(d.n_test.expect("resolved"), dim, derive_seed(rep_seed, 2 * dim as u64 + 1))?,
        ),
        (Some(l), None) => match &l.test {
            Some(t) => (l.train.clone(), t.clone()),
            None => {
                let (rest, test) = carve_validation(&l.train, d.test_fraction.expect("resolved"), derive_seed(rep_seed, 1))?;
                (rest, test)
            }
        },
        (None, None) => return Err(GrffError::Config("data: no input data".into())),
    };
    let (train, val) = carve_validation(&train_full, d.validation_fraction.expect("resolved"), derive_seed(rep_seed, 2))?;
    if d.normalize == Some(true) {
        let (train, mut others, mm) = minmax_normalize(&train, &[&val, &test])?;
        let test = others.pop().expect("two");
        let val = others.pop().expect("one");
        return Ok(Prepared {
            train,
            val,
            test,
            normalization: Some(mm),
        });
    }
    Ok(Prepared {
        train,
        val,
        test,
        normalization: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub setting: String,
    pub method: String,
    pub repetition: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub setting: String,
    pub method: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

fn is_rate(metric: &str) -> bool {
    metric.ends_with("_acc") || metric.ends_with("_error") || metric.starts_with("acc")
}

impl SummaryRow {
    /// `mean±std`, rates in percent, two decimals.
    pub fn formatted(&self) -> String {
        let s = if is_rate(&self.metric) { 100.0 } else { 1.0 };
        format!("{:.2}±{:.2}", self.mean * s, self.std * s)
    }
}

/// Mean and sample standard deviation per (setting, method, metric), in
/// first-appearance order.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.setting.clone(), r.method.clone(), r.metric.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.value);
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                setting: key.0,
                method: key.1,
                metric: key.2,
                n,
                mean,
                std,
            }
        })
        .collect()
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["setting", "method", "repetition", "seed", "metric", "value"],
        rows.iter().map(|r| {
            [
                r.setting.clone(),
                r.method.clone(),
                r.repetition.to_string(),
                r.seed.to_string(),
                r.metric.clone(),
                r.value.to_string(),
            ]
        }),
    )
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["setting", "method", "metric", "n", "mean", "std", "formatted"],
        rows.iter().map(|r| {
            [
                r.setting.clone(),
                r.method.clone(),
                r.metric.clone(),
                r.n.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                r.formatted(),
            ]
        }),
    )
}

/// Aligned plain-text table of the summary.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| [r.setting.clone(), r.method.clone(), r.metric.clone(), r.formatted()])
        .collect();
    let header = ["setting", "method", "metric", "mean±std"];
    let mut width = header.map(|h| h.chars().count());
    for c in &cells {
        for (w, s) in width.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |c: &[&str]| {
        let padded: Vec<String> = c
            .iter()
            .zip(width)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header);
    for c in &cells {
        line(&c.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Training curves: `epoch,phase,train_loss,train_acc,val_loss,val_acc`.
pub fn emit_curves(history: &[EpochRecord]) -> Result<Vec<u8>> {
    if history.is_empty() {
        return Err(GrffError::Contract("no epochs to write".into()));
    }
    csv_bytes(
        &["epoch", "phase", "train_loss", "train_acc", "val_loss", "val_acc"],
        history.iter().map(|h| {
            [
                h.epoch.to_string(),
                h.phase.to_string(),
                h.train_loss.to_string(),
                h.train_acc.to_string(),
                h.val_loss.to_string(),
                h.val_acc.to_string(),
            ]
        }),
    )
}

/// Top-3 principal components of layer `layer` features (1-based) under the
/// model's prediction noise, with labels: `c1,c2,c3,label`.
pub fn emit_pca(net: &GrffNetwork, data: &Dataset, layer: usize, seed: u64) -> Result<Vec<u8>> {
    if layer == 0 || layer > net.layers() {
        return Err(GrffError::Config(format!("layer index {layer} outside 1..={}", net.layers())));
    }
    let w = net.weights(&net.predict_noise(seed))?;
    let feats = net.layer_features(&data.x, layer, &w)?;
    let p = pca_top_components(&feats, 3)?;
    csv_bytes(
        &["c1", "c2", "c3", "label"],
        (0..data.len()).map(|i| {
            let r = p.projected.row(i);
            [r[0].to_string(), r[1].to_string(), r[2].to_string(), data.classes[data.y[i]].clone()]
        }),
    )
}

/// Applies a model's stored normalization to raw vector inputs.
pub fn apply_model_normalization(net: &GrffNetwork, data: &Dataset) -> Result<Dataset> {
    match &net.normalization {
        Some(mm) => {
            let mut out = data.clone();
            out.x = mm.apply(&data.x)?;
            out.normalization = Some(mm.clone());
            Ok(out)
        }
        None => Ok(data.clone()),
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
}

impl Ctx<'_> {
    fn train_config(&self, d_list: &[usize], epochs: &[usize], seed: u64) -> Result<TrainConfig> {
        let t = &self.cfg.train;
        let mut c = TrainConfig::new(d_list, epochs, seed)?;
        c.batch_size = t.batch_size.expect("resolved");
        c.adam = AdamConfig {
            lr: t.lr.expect("resolved"),
            beta1: t.beta1.expect("resolved"),
            beta2: t.beta2.expect("resolved"),
            eps: t.eps.expect("resolved"),
        };
        c.validation_fraction = self.cfg.data.validation_fraction.expect("resolved");
        c.validate()?;
        Ok(c)
    }

    fn tag(setting: &str, method: &str, rep: usize) -> String {
        let s: String = setting.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        format!("{s}-{method}-rep{rep}")
    }

    /// Trains one GRFF network and records its metrics and artifacts.
    fn grff(
        &self,
        data: &Prepared,
        d_list: &[usize],
        epochs: &[usize],
        setting: &str,
        rep: usize,
        seed: u64,
        rows: &mut Vec<MetricRow>,
    ) -> Result<GrffNetwork> {
        let mut spec = match data.variant() {
            Variant::Vector { dim } => NetworkSpec::vector(dim, d_list, data.train.num_classes),
            Variant::Image { channels, height, width } => {
                NetworkSpec::image(channels, height, width, d_list, data.train.num_classes)
            }
        };
        spec.noise_dim = self.cfg.train.noise_dim.expect("resolved");
        spec.hidden = self.cfg.train.hidden.clone();
        let net = GrffNetwork::build(&spec, seed)?;
        let tc = self.train_config(d_list, epochs, seed)?;
        let out = train_progressive(net, &data.train, &data.val, &tc)?;
        let mut best = out.best;
        best.freeze_noise(seed);
        best.normalization = data.normalization.clone();
        let tag = Self::tag(setting, "grff", rep);
        if self.cfg.outputs.curves == Some(true) {
            write_atomic(&self.out.join("curves").join(format!("{tag}.csv")), &emit_curves(&out.history)?)?;
        }
        if self.cfg.outputs.models == Some(true) {
            save_model(&best, &self.out.join("models").join(format!("{tag}.grff")))?;
        }
        for &layer in self.cfg.outputs.pca_layers.as_deref().unwrap_or(&[]) {
            let bytes = emit_pca(&best, &data.test, layer, seed)?;
            write_atomic(&self.out.join("pca").join(format!("{tag}-layer{layer}.csv")), &bytes)?;
        }
        let mut push = |metric: &str, value: f64| {
            rows.push(MetricRow {
                setting: setting.into(),
                method: "grff".into(),
                repetition: rep,
                seed,
                metric: metric.into(),
                value,
            })
        };
        let acc = |ds: &Dataset| -> Result<f64> { Ok(accuracy(&best.predict(&ds.x, seed)?, &ds.y)) };
        let test_acc = acc(&data.test)?;
        push("train_acc", acc(&data.train)?);
        push("val_acc", acc(&data.val)?);
        push("test_acc", test_acc);
        push("test_error", 1.0 - test_acc);
        push("best_epoch", out.best_epoch as f64);
        Ok(best)
    }

    fn baseline(&self, method: Method, data: &Prepared, setting: &str, rep: usize, seed: u64, rows: &mut Vec<MetricRow>) -> Result<()> {
        let b = &self.cfg.baseline;
        let gammas = b.gammas.as_deref().expect("resolved");
        let lambdas = b.lambdas.as_deref().expect("resolved");
        let features = b.features.expect("resolved");
        let mut metrics: Vec<(&str, f64)> = Vec::new();
        let (tr, va, te) = (&data.train, &data.val, &data.test);
        match method {
            Method::Rff | Method::RffAligned => {
                let choice = if method == Method::Rff {
                    select_ridge_rff(tr, va, gammas, lambdas, features, seed)?
                } else {
                    let pool = features * b.pool_factor.expect("resolved");
                    select_aligned_ridge(tr, va, gammas, lambdas, features, pool, seed)?
                };
                let m = &choice.model;
                let test_acc = accuracy(&m.predict(&te.x)?, &te.y);
                metrics.extend([
                    ("train_acc", accuracy(&m.predict(&tr.x)?, &tr.y)),
                    ("val_acc", choice.val_acc),
                    ("test_acc", test_acc),
                    ("test_error", 1.0 - test_acc),
                    ("gamma", choice.gamma),
                    ("lambda", choice.lambda),
                ]);
            }
            Method::Mlp => {
                let d_list = self.cfg.train.d_list.as_deref().expect("resolved");
                let epochs = self.cfg.train.epochs.as_deref().expect("resolved");
                let tc = self.train_config(d_list, epochs, seed)?;
                let widths = Mlp::matching_widths(tr.dim(), d_list, tr.num_classes);
                let out = fit_mlp_baseline(tr, va, &widths, &tc)?;
                let test_acc = accuracy(&out.best.predict(&te.x)?, &te.y);
                metrics.extend([
                    ("train_acc", accuracy(&out.best.predict(&tr.x)?, &tr.y)),
                    ("val_acc", out.history[out.best_epoch].val_acc),
                    ("test_acc", test_acc),
                    ("test_error", 1.0 - test_acc),
                    ("best_epoch", out.best_epoch as f64),
                ]);
            }
            Method::Grff => unreachable!("handled by grff()"),
        }
        rows.extend(metrics.into_iter().map(|(metric, value)| MetricRow {
            setting: setting.into(),
            method: method.name().into(),
            repetition: rep,
            seed,
            metric: metric.into(),
            value,
        }));
        Ok(())
    }

    fn methods(&self, data: &Prepared, setting: &str, rep: usize, seed: u64, rows: &mut Vec<MetricRow>) -> Result<()> {
        for &m in self.cfg.experiment.methods.as_deref().expect("resolved") {
            if m == Method::Grff {
                let d_list = self.cfg.train.d_list.as_deref().expect("resolved");
                let epochs = self.cfg.train.epochs.as_deref().expect("resolved");
                self.grff(data, d_list, epochs, setting, rep, seed, rows)?;
            } else {
                self.baseline(m, data, setting, rep, seed, rows)?;
            }
        }
        Ok(())
    }

    fn repetition(&self, loaded: Option<&Loaded>, rep: usize) -> Result<Vec<MetricRow>> {
        let cfg = self.cfg;
        let seed = derive_seed(cfg.experiment.seed, rep as u64);
        let mut rows = Vec::new();
        match cfg.experiment.kind {
            ExperimentKind::SyntheticSweep => {
                for &dim in cfg.data.dims.as_deref().expect("resolved") {
                    let data = prepare(cfg, None, Some(dim), seed)?;
                    self.methods(&data, &format!("d={dim}"), rep, seed, &mut rows)?;
                }
            }
            ExperimentKind::Benchmark | ExperimentKind::TrainSingle => {
                let data = self.single_data(loaded, seed)?;
                self.methods(&data, &cfg.experiment.name, rep, seed, &mut rows)?;
            }
            ExperimentKind::LayersStudy => {
                let data = self.single_data(loaded, seed)?;
                let l = &cfg.layers;
                for &m in cfg.experiment.methods.as_deref().expect("resolved") {
                    if m != Method::Grff {
                        self.baseline(m, &data, "baseline", rep, seed, &mut rows)?;
                        continue;
                    }
                    let depths = l.depths.as_deref().expect("resolved");
                    for (i, &k) in depths.iter().enumerate() {
                        let d_list = &l.d_lists.as_ref().expect("resolved")[i];
                        let epochs = &l.epochs.as_ref().expect("resolved")[i];
                        self.grff(&data, d_list, epochs, &format!("K={k}"), rep, seed, &mut rows)?;
                    }
                }
            }
            ExperimentKind::Robustness => self.robustness(loaded, rep, seed, &mut rows)?,
        }
        Ok(rows)
    }

    fn single_data(&self, loaded: Option<&Loaded>, seed: u64) -> Result<Prepared> {
        match self.cfg.data.format {
            DataFormat::Synthetic => {
                let dims = self.cfg.data.dims.as_deref().expect("resolved");
                if dims.len() != 1 {
                    return Err(config_err("data.dims", "this experiment kind takes exactly one dimension"));
                }
                prepare(self.cfg, None, Some(dims[0]), seed)
            }
            _ => prepare(self.cfg, loaded, None, seed),
        }
    }

    fn robustness(&self, loaded: Option<&Loaded>, rep: usize, seed: u64, rows: &mut Vec<MetricRow>) -> Result<()> {
        let cfg = self.cfg;
        let a = &cfg.attack;
        let data = self.single_data(loaded, seed)?;
        let net = match &a.model {
            Some(path) => crate::serialize::load_model(path)?,
            None => {
                let d_list = cfg.train.d_list.as_deref().expect("resolved");
                let epochs = cfg.train.epochs.as_deref().expect("resolved");
                self.grff(&data, d_list, epochs, "clean", rep, seed, rows)?
            }
        };
        let test = truncate(data.test.clone(), a.max_examples);
        for &eps in a.epsilons.as_deref().expect("resolved") {
            let mut ac = AttackConfig::new(eps)?;
            ac.alpha = a.alpha.expect("resolved");
            ac.iterations = a.iterations.unwrap_or_else(|| iteration_count(eps));
            let report = robustness_protocol(&net, &test.x, &test.y, &ac, seed, a.ensemble.expect("resolved"))?;
            let setting = format!("eps={eps}");
            if a.dump == Some(true) {
                write_adversarial_dump(&self.out.join("adversarial"), &Self::tag(&setting, "grff", rep), &report, &test.y)?;
            }
            for (metric, value) in [
                ("acc0", report.acc_clean),
                ("acc1", report.acc_fixed),
                ("acc2", report.acc_resampled),
                ("iterations", report.iterations as f64),
            ] {
                rows.push(MetricRow {
                    setting: setting.clone(),
                    method: "grff".into(),
                    repetition: rep,
                    seed,
                    metric: metric.into(),
                    value,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub model_format_version: u32,
    pub seed: u64,
    pub seed_source: Source,
    pub config: ExperimentConfig,
    pub provenance: Vec<Provenance>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub output_dir: PathBuf,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| GrffError::MissingFile {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loads, resolves and runs the config at `path`. `seed_override` replaces
/// the configured master seed (the CLI passes `GRFF_SEED`).
pub fn run_experiment(path: &Path, seed_override: Option<u64>) -> Result<RunOutput> {
    let cfg = ExperimentConfig::load(path)?;
    run_config(cfg, seed_override)
}

pub fn run_config(mut cfg: ExperimentConfig, seed_override: Option<u64>) -> Result<RunOutput> {
    let mut provenance = cfg.resolve()?;
    let seed_source = match seed_override {
        Some(s) => {
            cfg.experiment.seed = s;
            Source::Env
        }
        None => Source::Config,
    };
    provenance.push(Provenance {
        field: "experiment.seed".into(),
        source: seed_source,
    });
    let loaded = load_inputs(&cfg)?;
    let mut inputs = BTreeMap::new();
    let d = &cfg.data;
    for p in [&d.train, &d.train_labels, &d.test, &d.test_labels, &cfg.attack.model].into_iter().flatten() {
        inputs.insert(p.display().to_string(), file_digest(p)?);
    }
    let out = cfg.experiment.output.clone();
    std::fs::create_dir_all(&out)?;
    let manifest = Manifest {
        tool: "grff".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        model_format_version: FORMAT_VERSION,
        seed: cfg.experiment.seed,
        seed_source,
        config: cfg.clone(),
        provenance,
        inputs,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| GrffError::Format(e.to_string()))?;
    write_atomic(&out.join("manifest.json"), &json)?;

    let ctx = Ctx { cfg: &cfg, out: &out };
    let reps = cfg.experiment.repetitions.expect("resolved");
    let per_rep = parallel::map_indexed(reps, |r| ctx.repetition(loaded.as_ref(), r));
    let mut rows = Vec::new();
    for r in per_rep {
        rows.extend(r?);
    }
    let summary = summarize(&rows);
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&rows)?)?;
    write_atomic(&out.join("summary.csv"), &summary_csv(&summary)?)?;
    write_atomic(&out.join("summary.txt"), summary_table(&summary).as_bytes())?;
    Ok(RunOutput {
        output_dir: out,
        rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sweep(out: &Path) -> String {
        format!(
            r#"
[experiment]
kind = "synthetic-sweep"
seed = 3
repetitions = 2
methods = ["grff", "rff", "mlp"]
output = "{}"

[data]
format = "synthetic"
n_train = 120
n_test = 40
dims = [2, 3]

[train]
d_list = [8, 4]
epochs = [2, 2]
batch_size = 32
noise_dim = 6
hidden = [[8], [8]]

[baseline]
gammas = [0.5, 1.0]
lambdas = [0.1]
features = 16
"#,
            out.display()
        )
    }

    fn run_toml(text: &str) -> Result<RunOutput> {
        run_config(ExperimentConfig::from_toml(text)?, None)
    }

    #[test]
    fn sweep_writes_every_artifact_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a");
        let res = run_toml(&tiny_sweep(&out)).unwrap();
        for f in ["manifest.json", "metrics.csv", "summary.csv", "summary.txt"] {
            assert!(out.join(f).exists(), "{f}");
        }
        assert!(out.join("curves/d_2-grff-rep1.csv").exists());
        let first = std::fs::read(out.join("metrics.csv")).unwrap();
        let summary = std::fs::read(out.join("summary.csv")).unwrap();
        run_toml(&tiny_sweep(&out)).unwrap();
        assert_eq!(first, std::fs::read(out.join("metrics.csv")).unwrap());
        assert_eq!(summary, std::fs::read(out.join("summary.csv")).unwrap());
        // two dims × three methods
        let settings: std::collections::BTreeSet<_> = res.rows.iter().map(|r| (&r.setting, &r.method)).collect();
        assert_eq!(settings.len(), 6);
        let curves = std::fs::read_to_string(out.join("curves/d_3-grff-rep0.csv")).unwrap();
        assert_eq!(curves.lines().next().unwrap(), "epoch,phase,train_loss,train_acc,val_loss,val_acc");
        assert_eq!(curves.lines().count(), 5);
    }

    #[test]
    fn summary_matches_recomputation() {
        let rows: Vec<MetricRow> = [0.91, 0.95, 0.97, 0.99, 0.93]
            .iter()
            .enumerate()
            .map(|(i, &v)| MetricRow {
                setting: "monks1".into(),
                method: "grff".into(),
                repetition: i,
                seed: i as u64,
                metric: "test_acc".into(),
                value: v,
            })
            .collect();
        let s = &summarize(&rows)[0];
        let mean = 0.95;
        let var = [0.91f64, 0.95, 0.97, 0.99, 0.93].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((s.mean - mean).abs() < 1e-9 && (s.std - var.sqrt()).abs() < 1e-9);
        assert_eq!(s.formatted(), "95.00±3.16");
        let t = summary_table(&summarize(&rows));
        assert!(t.lines().nth(1).unwrap().ends_with("95.00±3.16"));
    }

    #[test]
    fn defaults_carry_provenance() {
        let mut cfg = ExperimentConfig::from_toml(
            "[experiment]\nkind = \"benchmark\"\n[data]\nformat = \"libsvm\"\ntrain = \"x\"\n[train]\nbatch_size = 64\n",
        )
        .unwrap();
        let prov = cfg.resolve().unwrap();
        let src = |f: &str| prov.iter().find(|p| p.field == f).unwrap().source;
        assert_eq!(src("experiment.repetitions"), Source::Paper);
        assert_eq!(src("train.batch_size"), Source::Config);
        assert_eq!(src("train.lr"), Source::Decided);
        assert_eq!(cfg.train.d_list, Some(vec![256, 64]));
        assert_eq!(cfg.train.epochs, Some(vec![200, 1000]));
        assert_eq!(cfg.experiment.repetitions, Some(5));
    }

    #[test]
    fn field_level_config_errors() {
        let bad = ExperimentConfig::from_toml("[experiment]\nkind = \"benchmark\"\nsed = 1\n[data]\nformat = \"csv\"\n");
        assert!(matches!(&bad, Err(GrffError::Config(m)) if m.contains("sed")));
        let mut c = ExperimentConfig::from_toml(
            "[experiment]\nkind = \"benchmark\"\n[data]\nformat = \"csv\"\ntrain = \"t.csv\"\n[train]\nd_list = [4]\nepochs = [1, 2]\n",
        )
        .unwrap();
        assert!(matches!(c.resolve(), Err(GrffError::Config(m)) if m.starts_with("train.epochs")));
        let mut c = ExperimentConfig::from_toml("[experiment]\nkind = \"robustness\"\n[data]\nformat = \"synthetic\"\n").unwrap();
        assert!(matches!(c.resolve(), Err(GrffError::Config(m)) if m.starts_with("data.format")));
    }

    #[test]
    fn missing_dataset_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "[experiment]\nkind = \"benchmark\"\noutput = \"{}\"\n[data]\nformat = \"libsvm\"\ntrain = \"/no/such/monks.train\"\n",
            dir.path().display()
        );
        let err = run_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("/no/such/monks.train"));
    }

    #[test]
    fn manifest_reruns_the_experiment() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m");
        let text = tiny_sweep(&out).replace("repetitions = 2", "repetitions = 1").replace("dims = [2, 3]", "dims = [2]");
        run_toml(&text).unwrap();
        let first = std::fs::read(out.join("metrics.csv")).unwrap();
        let copy = dir.path().join("manifest.json");
        std::fs::copy(out.join("manifest.json"), &copy).unwrap();
        std::fs::remove_file(out.join("metrics.csv")).unwrap();
        run_experiment(&copy, None).unwrap();
        assert_eq!(first, std::fs::read(out.join("metrics.csv")).unwrap());
        let res = run_experiment(&copy, Some(99)).unwrap();
        assert!(res.rows.iter().all(|r| r.seed == derive_seed(99, 0)));
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["seed_source"], "env");
    }

    #[test]
    fn pca_export_rows_and_orthogonality() {
        let data = make_synthetic(60, 4, 1).unwrap();
        let net = GrffNetwork::build(&NetworkSpec::vector(4, &[8, 4], 2), 2).unwrap();
        let csv = String::from_utf8(emit_pca(&net, &data, 2, 0).unwrap()).unwrap();
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').take(3).map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 60);
        for a in 0..3 {
            for b in (a + 1)..3 {
                let dot: f64 = rows.iter().map(|r| r[a] * r[b]).sum();
                assert!(dot.abs() < 1e-6, "{a},{b}: {dot}");
            }
        }
        assert!(matches!(emit_pca(&net, &data, 3, 0), Err(GrffError::Config(_))));
    }
}
