//! Declarative end-to-end pipeline: data, classifier, anomalous inputs,
//! features, detectors and reports.
//!
//! Every artifact is written under `out_dir` with a name that embeds the
//! digest of the configuration that produced it, so an interrupted run
//! picks up whatever is already on disk and unchanged inputs are never
//! recomputed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError, AttackKind};
use crate::container::{Container, ContainerError, DATASET_MAGIC};
use crate::data::{self, DataError, Dataset, OodKind, SourceKind};
use crate::detector::{
    assemble_detection_sets, msp_scores, train_detector, DetectorConfig, DetectorError,
};
use crate::features::{self, CsvError};
use crate::gradfeat::{
    self, ConfoundingLabel, FeatureError, FeatureMode, FeatureTable, LabelKind, Quartiles,
};
use crate::metrics::{self, MetricError, MetricReport, Metrics, ReportRow, ScoredSample};
use crate::nn::{ArchSpec, Classifier, EpochStats, NnError, Normalization, TrainConfig};
use crate::seed;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Path { path: PathBuf, reason: String },
    #[error("invariant check failed: {0}")]
    Gate(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Path {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Glyphs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Glyph training samples.
    pub train_count: usize,
    /// Glyph validation samples.
    pub val_count: usize,
    /// Test samples (glyphs generated, IDX truncated to this many).
    pub test_count: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Glyphs,
            train_count: 2000,
            val_count: 500,
            test_count: 5000,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    SmallCnn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchKind,
    /// Hidden width of the MLP architecture.
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: ArchKind::SmallCnn,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub kinds: Vec<AttackKind>,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub cw_c: f64,
    pub cw_iterations: usize,
    pub cw_lr: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            kinds: AttackKind::ALL.to_vec(),
            epsilon: a.epsilon,
            step_size: a.step_size,
            iterations: a.iterations,
            cw_c: a.cw_c,
            cw_iterations: a.cw_iterations,
            cw_lr: a.cw_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSection {
    pub kinds: Vec<OodKind>,
    /// Samples per OOD source; defaults to the test-set size.
    pub count: Option<usize>,
}

impl Default for OodSection {
    fn default() -> Self {
        Self {
            kinds: OodKind::ALL.to_vec(),
            count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    /// Mode used by `extract-features` when none is given.
    pub mode: FeatureMode,
    pub label: LabelKind,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            mode: FeatureMode::Gradient,
            label: LabelKind::AllOnes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
        }
    }
}

/// Full experiment description. Every stochastic choice derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attacks: AttackSection,
    pub ood: OodSection,
    pub features: FeatureSection,
    pub detector: DetectorSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attacks: AttackSection::default(),
            ood: OodSection::default(),
            features: FeatureSection::default(),
            detector: DetectorSection::default(),
        }
    }
}

fn digest_json(value: &serde_json::Value) -> String {
    seed::short_digest(value.to_string().as_bytes())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            ExperimentError::Config(msg) => ExperimentError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.data.test_count == 0 {
            return bad("data.test_count must be positive");
        }
        match self.data.source {
            DataSource::Glyphs => {
                if self.data.train_count == 0 || self.data.val_count == 0 {
                    return bad("data.train_count and data.val_count must be positive");
                }
            }
            DataSource::Idx => {
                for (name, p) in [
                    ("train_images", &self.data.train_images),
                    ("train_labels", &self.data.train_labels),
                    ("test_images", &self.data.test_images),
                    ("test_labels", &self.data.test_labels),
                ] {
                    if p.is_none() {
                        return Err(ExperimentError::Config(format!("data.{name} is required for idx data")));
                    }
                }
            }
        }
        if self.model.hidden == 0 {
            return bad("model.hidden must be positive");
        }
        self.train_config().validate()?;
        self.attack_config().validate()?;
        if let LabelKind::KHot { k, .. } = self.features.label {
            if k < 2 {
                return bad("features.label k-hot needs k >= 2");
            }
        }
        if self.ood.count == Some(0) {
            return bad("ood.count must be positive");
        }
        self.detector_config().validate()?;
        Ok(())
    }

    /// Digest of everything except `out_dir`.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        digest_json(&serde_json::to_value(&c).expect("config serializes"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seed: seed::derive(self.seed, "train"),
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.attacks.epsilon,
            step_size: self.attacks.step_size,
            iterations: self.attacks.iterations,
            cw_c: self.attacks.cw_c,
            cw_iterations: self.attacks.cw_iterations,
            cw_lr: self.attacks.cw_lr,
            seed: seed::derive(self.seed, "attacks"),
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            hidden: self.detector.hidden,
            learning_rate: self.detector.learning_rate,
            momentum: self.detector.momentum,
            batch_size: self.detector.batch_size,
            max_epochs: self.detector.max_epochs,
            patience: self.detector.patience,
            seed: seed::derive(self.seed, "detector"),
        }
    }

    pub fn ood_count(&self) -> usize {
        self.ood.count.unwrap_or(self.data.test_count)
    }

    fn data_digest(&self) -> String {
        digest_json(&json!({ "seed": self.seed, "data": self.data }))
    }

    /// Digest of everything that determines the trained classifier.
    pub fn model_digest(&self) -> String {
        digest_json(&json!({
            "data": self.data_digest(),
            "model": self.model,
            "train": self.train,
        }))
    }

    fn ensure_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))
    }

    fn artifact(&self, name: String) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ExperimentError::Path {
            path: path.to_path_buf(),
            reason: "file not found".into(),
        })
    }
}

/// Train, validation and test sets described by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Glyphs => Ok((
            data::gen_glyphs(d.train_count, seed::derive(cfg.seed, "data.train"))?,
            data::gen_glyphs(d.val_count, seed::derive(cfg.seed, "data.val"))?,
            data::gen_glyphs(d.test_count, seed::derive(cfg.seed, "data.test"))?,
        )),
        DataSource::Idx => {
            let paths = [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels]
                .map(|p| p.clone().expect("validated"));
            for p in &paths {
                require_file(p)?;
            }
            let full = data::load_idx(&paths[0], &paths[1])?;
            let mut parts = data::split(&full, &[0.9, 0.1], seed::derive(cfg.seed, "data.val"))?;
            let val = parts.pop().expect("two parts");
            let train = parts.pop().expect("two parts");
            let test = data::load_idx(&paths[2], &paths[3])?.head(d.test_count)?;
            Ok((train, val, test))
        }
    }
}

fn build_arch(cfg: &ExperimentConfig, sample_shape: &[usize], classes: usize) -> Result<ArchSpec> {
    let input: [usize; 3] = sample_shape
        .try_into()
        .map_err(|_| ExperimentError::Config(format!("unsupported sample shape {sample_shape:?}")))?;
    Ok(match cfg.model.arch {
        ArchKind::SmallCnn => ArchSpec::small_cnn(input, classes),
        ArchKind::Mlp => ArchSpec::mlp(input, cfg.model.hidden, classes),
    })
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub model: Classifier,
    pub history: Vec<EpochStats>,
    pub cached: bool,
}

fn history_text(history: &[EpochStats]) -> String {
    let mut s = String::new();
    for e in history {
        let _ = writeln!(
            s,
            "epoch={} train_loss={:?} train_accuracy={:?} val_accuracy={:?}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy
        );
    }
    s
}

/// Trains the classifier, or reloads it if this config already produced one.
pub fn train_stage(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.ensure_out_dir()?;
    let digest = cfg.model_digest();
    let checkpoint = cfg.artifact(format!("model-{digest}.ggate"));
    if checkpoint.is_file() {
        if let Ok(model) = Classifier::load(&checkpoint) {
            info!("reusing {}", checkpoint.display());
            return Ok(TrainOutput {
                checkpoint,
                model,
                history: Vec::new(),
                cached: true,
            });
        }
    }
    let (train, val, _) = load_data(cfg)?;
    let classes = train
        .class_labels()?
        .into_iter()
        .chain(val.class_labels()?)
        .max()
        .map_or(0, |m| m + 1)
        .max(2);
    let arch = build_arch(cfg, train.sample_shape(), classes)?;
    let mut model = Classifier::build(arch, seed::derive(cfg.seed, "model.init"))?;
    model.norm = Normalization::fit(&train.images);
    info!("training classifier on {} samples", train.len());
    let (model, history) = crate::nn::train_classifier(model, &train, &val, &cfg.train_config())?;
    model.save(&checkpoint)?;
    let hist_path = cfg.artifact(format!("history-{digest}.txt"));
    fs::write(&hist_path, history_text(&history)).map_err(io_err(&hist_path))?;
    Ok(TrainOutput {
        checkpoint,
        model,
        history,
        cached: false,
    })
}

/// One persisted input source: the clean test set, an attack or an OOD set.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceArtifact {
    /// Short name used in reports (`clean`, `fgsm`, `uniform-noise`, ...).
    pub name: String,
    pub path: PathBuf,
    pub digest: String,
    pub kind: SourceKind,
    /// Classifier accuracy on this set (labeled sets only).
    pub accuracy: Option<f64>,
    /// Attack success rate (adversarial sets only).
    pub success_rate: Option<f64>,
}

fn save_with_stats(ds: &Dataset, path: &Path, stats: &[(&str, f64)]) -> Result<()> {
    let mut c = ds.to_container();
    for (k, v) in stats {
        c.set(k, format!("{v:e}"));
    }
    c.save(path)?;
    Ok(())
}

fn load_with_stats(path: &Path) -> Result<(Dataset, Container)> {
    let c = Container::load(path, DATASET_MAGIC)?;
    Ok((Dataset::from_container(&c)?, c))
}

fn optional_stat(c: &Container, key: &str) -> Option<f64> {
    c.parse(key).ok()
}

/// Labels of a labeled set as class indices.
fn labels_of(ds: &Dataset) -> Result<Vec<usize>> {
    Ok(ds.class_labels()?)
}

/// Produces (or reloads) the clean test set, one adversarial set per
/// configured attack and one OOD set per configured kind. Every
/// adversarial set is checked against the pixel-range and epsilon
/// constraints, including sets reloaded from disk.
pub fn anomaly_stage(cfg: &ExperimentConfig, model: &Classifier, model_digest: &str) -> Result<Vec<SourceArtifact>> {
    cfg.ensure_out_dir()?;
    let mut out = Vec::new();

    let test_digest = cfg.data_digest();
    let test_path = cfg.artifact(format!("test-{test_digest}.gdata"));
    let test = match Dataset::load(&test_path) {
        Ok(ds) => ds,
        Err(_) => {
            let (_, _, test) = load_data(cfg)?;
            test.save(&test_path)?;
            test
        }
    };
    let y = labels_of(&test)?;
    out.push(SourceArtifact {
        name: "clean".into(),
        path: test_path,
        digest: test_digest.clone(),
        kind: SourceKind::InDistribution,
        accuracy: Some(model.accuracy(&test.images, &y)?),
        success_rate: None,
    });

    let acfg = cfg.attack_config();
    for &kind in &cfg.attacks.kinds {
        let digest = digest_json(&json!({
            "model": model_digest,
            "test": test_digest,
            "kind": kind,
            "attack": acfg,
        }));
        let path = cfg.artifact(format!("adv-{kind}-{digest}.gdata"));
        let cached = load_with_stats(&path).ok().filter(|(ds, _)| ds.len() == test.len());
        let (ds, accuracy, success) = match cached {
            Some((ds, c)) => {
                let acc = optional_stat(&c, "accuracy");
                let succ = optional_stat(&c, "success_rate");
                (ds, acc, succ)
            }
            None => {
                info!("running {kind} on {} samples", test.len());
                let r = attacks::run(model, kind, &test.images, &y, &acfg)?;
                let acc = model.accuracy(&r.images, &y)?;
                let ds = Dataset {
                    images: r.images.clone(),
                    labels: test.labels.clone(),
                    source_tag: format!("{kind}-{digest}"),
                    kind: SourceKind::Adversarial,
                    seed: acfg.seed,
                };
                save_with_stats(&ds, &path, &[("accuracy", acc), ("success_rate", r.success_rate())])?;
                (ds, Some(acc), Some(r.success_rate()))
            }
        };
        attacks::verify(kind, &test.images, &ds.images, acfg.epsilon)
            .map_err(|e| ExperimentError::Gate(format!("{}: {e}", path.display())))?;
        out.push(SourceArtifact {
            name: kind.to_string(),
            path,
            digest,
            kind: SourceKind::Adversarial,
            accuracy,
            success_rate: success,
        });
    }

    for &kind in &cfg.ood.kinds {
        let count = cfg.ood_count();
        let ood_seed = seed::derive(cfg.seed, &format!("ood.{kind}"));
        let digest = digest_json(&json!({ "kind": kind, "count": count, "seed": ood_seed }));
        let path = cfg.artifact(format!("ood-{kind}-{digest}.gdata"));
        let ds = match Dataset::load(&path) {
            Ok(ds) if ds.len() == count => ds,
            _ => {
                let mut ds = data::gen_ood(kind, count, ood_seed)?;
                if ds.sample_shape() != test.sample_shape() {
                    return Err(ExperimentError::Config(format!(
                        "OOD sources are {:?} but the test data is {:?}",
                        ds.sample_shape(),
                        test.sample_shape()
                    )));
                }
                ds.source_tag = format!("{kind}-{digest}");
                ds.save(&path)?;
                ds
            }
        };
        if ds.labels.iter().any(|&l| l != data::NO_LABEL) {
            return Err(ExperimentError::Gate(format!("{}: OOD labels must all be -1", path.display())));
        }
        out.push(SourceArtifact {
            name: kind.to_string(),
            path,
            digest,
            kind: SourceKind::OutOfDistribution,
            accuracy: None,
            success_rate: None,
        });
    }
    Ok(out)
}

/// Features of one dataset in the given mode.
pub fn compute_features(
    model: &Classifier,
    ds: &Dataset,
    mode: FeatureMode,
    label: LabelKind,
) -> Result<FeatureTable> {
    let values = match mode {
        FeatureMode::Gradient => {
            let y_c = ConfoundingLabel::new(model.classes(), label)?;
            gradfeat::extract_gradient_features(model, &ds.images, &y_c)?
        }
        FeatureMode::Activation => gradfeat::extract_activation_features(model, &ds.images)?,
    };
    Ok(FeatureTable::new(ds.source_tag.clone(), ds.kind.anomaly_label(), values))
}

fn feature_digest(model_digest: &str, source_digest: &str, mode: FeatureMode, label: LabelKind) -> String {
    let label = match mode {
        FeatureMode::Gradient => label.to_string(),
        FeatureMode::Activation => "none".into(),
    };
    digest_json(&json!({ "model": model_digest, "source": source_digest, "mode": mode, "label": label }))
}

/// Loads or computes the feature CSV for one dataset file.
pub fn feature_stage(
    cfg: &ExperimentConfig,
    model: &Classifier,
    model_digest: &str,
    source_name: &str,
    dataset_path: &Path,
    source_digest: &str,
    mode: FeatureMode,
) -> Result<(PathBuf, FeatureTable)> {
    cfg.ensure_out_dir()?;
    let digest = feature_digest(model_digest, source_digest, mode, cfg.features.label);
    let path = cfg.artifact(format!("features-{mode}-{source_name}-{digest}.csv"));
    if let Ok(table) = features::read_features(&path) {
        if !table.is_empty() {
            return Ok((path, table));
        }
    }
    require_file(dataset_path)?;
    let ds = Dataset::load(dataset_path)?;
    if ds.is_empty() {
        return Err(ExperimentError::Config(format!("{} is empty", dataset_path.display())));
    }
    let table = compute_features(model, &ds, mode, cfg.features.label)?;
    features::write_features(&path, &table)?;
    Ok((path, table))
}

/// Splits, trains the detector and scores the held-out part.
pub fn detect_tables(
    cfg: &ExperimentConfig,
    normal: &FeatureTable,
    anomalous: &FeatureTable,
) -> Result<(Vec<ScoredSample>, Metrics)> {
    let [train, val, test] = assemble_detection_sets(normal, anomalous, seed::derive(cfg.seed, "detector.split"))?;
    let det = train_detector(&train, &val, &cfg.detector_config())?;
    let scored = det.score_set(&test)?;
    let m = metrics::evaluate(&scored, metrics::DEFAULT_THRESHOLD)?;
    Ok((scored, m))
}

/// Scores the held-out part with a fixed score column (no training).
/// The split matches [`detect_tables`] because it depends only on the row
/// counts and the seed.
pub fn score_tables(
    cfg: &ExperimentConfig,
    normal: &FeatureTable,
    anomalous: &FeatureTable,
) -> Result<(Vec<ScoredSample>, Metrics)> {
    let [_, _, test] = assemble_detection_sets(normal, anomalous, seed::derive(cfg.seed, "detector.split"))?;
    let scored: Vec<ScoredSample> = (0..test.len())
        .map(|i| ScoredSample {
            sample_id: test.sample_ids[i],
            anomaly_label: test.labels[i],
            score: test.values[i][0],
            source_tag: test.source_tags[i].clone(),
        })
        .collect();
    let m = metrics::evaluate(&scored, metrics::DEFAULT_THRESHOLD)?;
    Ok((scored, m))
}

/// Detection on two feature CSVs; writes the scores CSV and returns it
/// with the metrics.
pub fn detect_files(cfg: &ExperimentConfig, normal_csv: &Path, anomalous_csv: &Path) -> Result<(PathBuf, MetricReport)> {
    cfg.ensure_out_dir()?;
    for p in [normal_csv, anomalous_csv] {
        require_file(p)?;
    }
    let normal = features::read_features(normal_csv)?;
    let anomalous = features::read_features(anomalous_csv)?;
    if normal.is_empty() {
        return Err(ExperimentError::Path {
            path: normal_csv.to_path_buf(),
            reason: "no feature rows".into(),
        });
    }
    if anomalous.is_empty() {
        return Err(ExperimentError::Path {
            path: anomalous_csv.to_path_buf(),
            reason: "no feature rows".into(),
        });
    }
    let (scored, m) = detect_tables(cfg, &normal, &anomalous)?;
    let digest = digest_json(&json!({
        "config": cfg.digest(),
        "normal": seed::short_digest(&fs::read(normal_csv).map_err(io_err(normal_csv))?),
        "anomalous": seed::short_digest(&fs::read(anomalous_csv).map_err(io_err(anomalous_csv))?),
    }));
    let path = cfg.artifact(format!("scores-{digest}.csv"));
    features::write_scores(&path, &scored)?;
    let mut report = MetricReport::new(digest);
    report.rows.push(ReportRow {
        source: anomalous.source_tag.clone(),
        method: "detector".into(),
        metrics: m,
        n_normal: scored.iter().filter(|s| s.anomaly_label == 0).count(),
        n_anomalous: scored.iter().filter(|s| s.anomaly_label == 1).count(),
    });
    Ok((path, report))
}

/// Per-layer separability of clean versus pooled adversarial inputs for
/// single features, and pooled detectors on the full feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerComparison {
    /// `max(A, 1 - A)` of each layer's gradient norm.
    pub gradient_layer_auroc: Vec<f64>,
    /// `max(A, 1 - A)` of each layer's activation norm.
    pub activation_layer_auroc: Vec<f64>,
    pub pooled_gradient_auroc: f64,
    pub pooled_activation_auroc: f64,
}

impl LayerComparison {
    pub fn layers_where_gradient_wins(&self) -> usize {
        self.gradient_layer_auroc
            .iter()
            .zip(&self.activation_layer_auroc)
            .filter(|(g, a)| g > a)
            .count()
    }
}

/// L2 norm of each layer's full gradient (weight and bias together) from
/// a row of per-parameter-set squared norms.
pub fn layer_gradient_norms(row: &[f64], layers: usize) -> Vec<f64> {
    let per = row.len() / layers;
    row.chunks(per).map(|c| c.iter().sum::<f64>().sqrt()).collect()
}

fn separability(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    let scores: Vec<f64> = normal.iter().chain(anomalous).cloned().collect();
    let labels: Vec<bool> = (0..normal.len()).map(|_| false).chain((0..anomalous.len()).map(|_| true)).collect();
    let a = metrics::auroc(&scores, &labels)?;
    Ok(a.max(1.0 - a))
}

fn pooled(tables: &[&FeatureTable]) -> FeatureTable {
    FeatureTable::new(
        "pooled-adversarial",
        1,
        tables.iter().flat_map(|t| t.values.iter().cloned()).collect(),
    )
}

pub fn compare_layers(
    cfg: &ExperimentConfig,
    layers: usize,
    clean: [&FeatureTable; 2],
    adversarial: &[[&FeatureTable; 2]],
) -> Result<LayerComparison> {
    let [clean_g, clean_a] = clean;
    let adv_g = pooled(&adversarial.iter().map(|p| p[0]).collect::<Vec<_>>());
    let adv_a = pooled(&adversarial.iter().map(|p| p[1]).collect::<Vec<_>>());
    let norms = |t: &FeatureTable| -> Vec<Vec<f64>> { t.values.iter().map(|r| layer_gradient_norms(r, layers)).collect() };
    let (cg, ag) = (norms(clean_g), norms(&adv_g));
    let column = |rows: &[Vec<f64>], j: usize| -> Vec<f64> { rows.iter().map(|r| r[j]).collect() };
    let mut gradient_layer_auroc = Vec::with_capacity(layers);
    let mut activation_layer_auroc = Vec::with_capacity(layers);
    for l in 0..layers {
        gradient_layer_auroc.push(separability(&column(&cg, l), &column(&ag, l))?);
        activation_layer_auroc.push(separability(&clean_a.column(l), &adv_a.column(l))?);
    }
    let (_, mg) = detect_tables(cfg, clean_g, &adv_g)?;
    let (_, ma) = detect_tables(cfg, clean_a, &adv_a)?;
    Ok(LayerComparison {
        gradient_layer_auroc,
        activation_layer_auroc,
        pooled_gradient_auroc: mg.auroc,
        pooled_activation_auroc: ma.auroc,
    })
}

/// Everything `run-experiment` produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: MetricReport,
    pub sources: Vec<SourceArtifact>,
    pub comparison: Option<LayerComparison>,
    pub kv_path: PathBuf,
    pub table_path: PathBuf,
}

impl ExperimentOutput {
    /// Key-value report including per-source classifier statistics and the
    /// layer comparison.
    pub fn to_kv(&self) -> String {
        let mut s = self.report.to_kv();
        for src in &self.sources {
            if let Some(a) = src.accuracy {
                let _ = writeln!(s, "{}.classifier_accuracy={a:?}", src.name);
            }
            if let Some(r) = src.success_rate {
                let _ = writeln!(s, "{}.attack_success_rate={r:?}", src.name);
            }
        }
        if let Some(c) = &self.comparison {
            for (l, (g, a)) in c.gradient_layer_auroc.iter().zip(&c.activation_layer_auroc).enumerate() {
                let _ = writeln!(s, "layer{l}.gradient_separability={g:?}");
                let _ = writeln!(s, "layer{l}.activation_separability={a:?}");
            }
            let _ = writeln!(s, "pooled.gradient.auroc={:?}", c.pooled_gradient_auroc);
            let _ = writeln!(s, "pooled.activation.auroc={:?}", c.pooled_activation_auroc);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = self.report.to_table();
        s.push('\n');
        let _ = writeln!(s, "{:<16}  {:>10}  {:>12}", "source", "clf acc", "attack succ");
        for src in &self.sources {
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(s, "{:<16}  {:>10}  {:>12}", src.name, pct(src.accuracy), pct(src.success_rate));
        }
        if let Some(c) = &self.comparison {
            s.push('\n');
            let _ = writeln!(s, "{:<8}  {:>10}  {:>10}", "layer", "gradient", "activation");
            for (l, (g, a)) in c.gradient_layer_auroc.iter().zip(&c.activation_layer_auroc).enumerate() {
                let _ = writeln!(s, "{:<8}  {:>10.2}  {:>10.2}", l, 100.0 * g, 100.0 * a);
            }
            let _ = writeln!(
                s,
                "{:<8}  {:>10.2}  {:>10.2}",
                "pooled",
                100.0 * c.pooled_gradient_auroc,
                100.0 * c.pooled_activation_auroc
            );
        }
        s
    }
}

/// Full pipeline: train, generate anomalies, featurize in both modes,
/// detect each anomaly source with each method, compare layers, report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    cfg.ensure_out_dir()?;
    let resolved = cfg.artifact(format!("config-{}.toml", cfg.digest()));
    fs::write(&resolved, cfg.to_toml()).map_err(io_err(&resolved))?;

    let trained = train_stage(cfg)?;
    let model = trained.model;
    let model_digest = cfg.model_digest();
    let sources = anomaly_stage(cfg, &model, &model_digest)?;

    let modes = [FeatureMode::Gradient, FeatureMode::Activation];
    let mut tables: BTreeMap<(String, FeatureMode), FeatureTable> = BTreeMap::new();
    let mut msp: BTreeMap<String, FeatureTable> = BTreeMap::new();
    for src in &sources {
        for mode in modes {
            let (_, t) = feature_stage(cfg, &model, &model_digest, &src.name, &src.path, &src.digest, mode)?;
            tables.insert((src.name.clone(), mode), t);
        }
        let ds = Dataset::load(&src.path)?;
        let scores = msp_scores(&model, &ds.images)?;
        msp.insert(
            src.name.clone(),
            FeatureTable::new(ds.source_tag.clone(), ds.kind.anomaly_label(), scores.into_iter().map(|s| vec![s]).collect()),
        );
    }

    let mut report = MetricReport::new(cfg.digest());
    for src in sources.iter().filter(|s| s.kind != SourceKind::InDistribution) {
        for mode in modes {
            let normal = &tables[&("clean".to_string(), mode)];
            let anomalous = &tables[&(src.name.clone(), mode)];
            let det_digest = digest_json(&json!({
                "features": feature_digest(&model_digest, &src.digest, mode, cfg.features.label),
                "detector": cfg.detector_config(),
                "split": seed::derive(cfg.seed, "detector.split"),
            }));
            let path = cfg.artifact(format!("scores-{mode}-{}-{det_digest}.csv", src.name));
            let scored = match features::read_scores(&path) {
                Ok(s) if !s.is_empty() => s,
                _ => {
                    let (scored, _) = detect_tables(cfg, normal, anomalous)?;
                    features::write_scores(&path, &scored)?;
                    scored
                }
            };
            report.rows.push(row(&src.name, mode.as_str(), &scored)?);
        }
        let (scored, _) = score_tables(cfg, &msp["clean"], &msp[&src.name])?;
        report.rows.push(row(&src.name, "msp", &scored)?);
    }

    let attack_pairs: Vec<[&FeatureTable; 2]> = sources
        .iter()
        .filter(|s| s.kind == SourceKind::Adversarial)
        .map(|s| {
            [
                &tables[&(s.name.clone(), FeatureMode::Gradient)],
                &tables[&(s.name.clone(), FeatureMode::Activation)],
            ]
        })
        .collect();
    let comparison = if attack_pairs.is_empty() {
        None
    } else {
        Some(compare_layers(
            cfg,
            model.layer_count(),
            [
                &tables[&("clean".to_string(), FeatureMode::Gradient)],
                &tables[&("clean".to_string(), FeatureMode::Activation)],
            ],
            &attack_pairs,
        )?)
    };

    let mut out = ExperimentOutput {
        report,
        sources,
        comparison,
        kv_path: cfg.artifact(format!("report-{}.kv", cfg.digest())),
        table_path: cfg.artifact(format!("report-{}.txt", cfg.digest())),
    };
    fs::write(&out.kv_path, out.to_kv()).map_err(io_err(&out.kv_path))?;
    fs::write(&out.table_path, out.to_table()).map_err(io_err(&out.table_path))?;
    out.kv_path = out.kv_path.clone();
    Ok(out)
}

fn row(source: &str, method: &str, scored: &[ScoredSample]) -> Result<ReportRow> {
    Ok(ReportRow {
        source: source.to_string(),
        method: method.to_string(),
        metrics: metrics::evaluate(scored, metrics::DEFAULT_THRESHOLD)?,
        n_normal: scored.iter().filter(|s| s.anomaly_label == 0).count(),
        n_anomalous: scored.iter().filter(|s| s.anomaly_label == 1).count(),
    })
}

/// Per-layer norm distributions for each dataset, in both modes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormComparison {
    /// `(mode, layer, tag -> quartiles)` blocks in mode-then-layer order.
    pub blocks: Vec<(FeatureMode, usize, BTreeMap<String, Quartiles>)>,
}

impl NormComparison {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (mode, layer, groups) in &self.blocks {
            let _ = writeln!(s, "[{mode} layer {layer}]");
            let w = groups.keys().map(String::len).max().unwrap_or(0).max(6);
            let _ = writeln!(
                s,
                "{:<w$}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}",
                "source", "min", "q1", "median", "q3", "max"
            );
            for (tag, q) in groups {
                let _ = writeln!(
                    s,
                    "{:<w$}  {:>12.5e}  {:>12.5e}  {:>12.5e}  {:>12.5e}  {:>12.5e}",
                    tag, q.min, q.q1, q.median, q.q3, q.max
                );
            }
            s.push('\n');
        }
        s
    }
}

/// Layer-wise L2 norms of gradients and activations, summarized per dataset.
pub fn compare_norms(cfg: &ExperimentConfig, model: &Classifier, datasets: &[Dataset]) -> Result<NormComparison> {
    if datasets.is_empty() {
        return Err(ExperimentError::Config("compare-norms needs at least one dataset".into()));
    }
    let layers = model.layer_count();
    let mut blocks = Vec::new();
    for mode in [FeatureMode::Gradient, FeatureMode::Activation] {
        let mut rows = Vec::new();
        let mut tags = Vec::new();
        for ds in datasets {
            if ds.is_empty() {
                return Err(ExperimentError::Config(format!("dataset `{}` is empty", ds.source_tag)));
            }
            let t = compute_features(model, ds, mode, cfg.features.label)?;
            for r in t.values {
                rows.push(match mode {
                    FeatureMode::Gradient => layer_gradient_norms(&r, layers),
                    FeatureMode::Activation => r,
                });
                tags.push(ds.source_tag.clone());
            }
        }
        let summary = gradfeat::norm_summary(&rows, &tags)?;
        for l in 0..layers {
            let per_tag = summary.iter().map(|(tag, qs)| (tag.clone(), qs[l])).collect();
            blocks.push((mode, l, per_tag));
        }
    }
    Ok(NormComparison { blocks })
}
