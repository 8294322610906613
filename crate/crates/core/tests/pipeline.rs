mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gradgate::container::{Container, CHECKPOINT_MAGIC};
use gradgate::data::{self, NO_LABEL};
use gradgate::detector::{assemble_detection_sets, train_detector, DetectorConfig};
use gradgate::experiment::{self, compare_norms, ExperimentConfig, ExperimentError};
use gradgate::features;
use gradgate::gradfeat::{extract_gradient_features, ConfoundingLabel, FeatureMode};
use gradgate::nn::{train_classifier, ArchSpec, Classifier, Normalization, TrainConfig};
use gradgate::{seed, Dataset, FeatureTable, Tensor};
use rand::Rng;
use sha2::{Digest, Sha256};

fn small_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
seed = 5
out_dir = "{}"
[data]
train_count = 600
val_count = 150
test_count = 100
[train]
epochs = 2
[attacks]
cw_iterations = 20
"#,
        dir.display()
    ))
    .unwrap()
}

#[test]
fn fixed_seed_checkpoint_digest_is_stable() {
    let m = Classifier::build(ArchSpec::small_cnn([1, 16, 16], 10), 2024).unwrap();
    let digest = hex::encode(Sha256::digest(m.to_container().to_bytes()));
    assert_eq!(digest, "86e6dbf067bb98b425fb18232b4ae64fc60f96571f0f66bd7665bfe5411dd057");
}

#[test]
fn checkpoint_round_trip_preserves_features_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ggate");
    let mut m = Classifier::build(ArchSpec::small_cnn([1, 16, 16], 10), 3).unwrap();
    m.norm = Normalization { mean: vec![0.2], std: vec![0.3] };
    m.save(&path).unwrap();
    let back = Classifier::load(&path).unwrap();
    assert_eq!(back, m);
    let x = data::gen_glyphs(20, 4).unwrap().images;
    let y = ConfoundingLabel::all_ones(10).unwrap();
    assert_eq!(
        extract_gradient_features(&m, &x, &y).unwrap(),
        extract_gradient_features(&back, &x, &y).unwrap()
    );
    assert!(Container::load(&path, CHECKPOINT_MAGIC).is_ok());
}

#[test]
fn mlp_separates_a_linearly_separable_toy_set() {
    let mut rng = seed::rng(1);
    let make = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let a: f64 = rng.gen_range(0.0..0.4);
            let b: f64 = rng.gen_range(0.0..1.0);
            xs.extend([if class == 1 { 1.0 - a } else { a }, b]);
            ys.push(class as i64);
        }
        Dataset {
            images: Tensor::new(vec![n, 1, 1, 2], xs).unwrap(),
            labels: ys,
            source_tag: "toy".into(),
            kind: data::SourceKind::InDistribution,
            seed: 0,
        }
    };
    let train = make(200, &mut rng);
    let val = make(100, &mut rng);
    let m = Classifier::build(ArchSpec::mlp([1, 1, 2], 8, 2), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        learning_rate: 0.05,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let (_, history) = train_classifier(m, &train, &val, &cfg).unwrap();
    assert_eq!(history.last().unwrap().val_accuracy, 1.0);
}

#[test]
fn zero_epochs_is_a_no_op() {
    let (train, val, _) = common::glyph_split(40, 10, 1);
    let m = Classifier::build(ArchSpec::small_cnn([1, 16, 16], 10), 2).unwrap();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let (out, history) = train_classifier(m.clone(), &train, &val, &cfg).unwrap();
    assert!(history.is_empty());
    assert_eq!(out.params, m.params);
}

#[test]
fn shuffled_labels_give_chance_level_detection() {
    for s in 0..5u64 {
        let mut rng = seed::rng(100 + s);
        let mut rows = |n| -> Vec<Vec<f64>> { (0..n).map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).collect() };
        let normal = FeatureTable::new("a", 0, rows(200));
        let anomalous = FeatureTable::new("b", 1, rows(200));
        let [train, val, _] = assemble_detection_sets(&normal, &anomalous, s).unwrap();
        let det = train_detector(&train, &val, &DetectorConfig { seed: s, ..DetectorConfig::default() }).unwrap();
        let scores = det.score(&val.values).unwrap();
        let a = gradgate::metrics::auroc(&scores, &val.bool_labels()).unwrap();
        assert!((0.35..=0.65).contains(&a), "seed {s}: {a}");
    }
}

fn dir_files(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(prefix))
        .collect();
    v.sort();
    v
}

#[test]
fn experiment_stages_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());

    let trained = experiment::train_stage(&cfg).unwrap();
    assert!(!trained.cached);
    assert_eq!(Classifier::load(&trained.checkpoint).unwrap(), trained.model);
    // Same config again: reused, not retrained.
    let again = experiment::train_stage(&cfg).unwrap();
    assert!(again.cached);
    assert_eq!(again.model, trained.model);

    let sources = experiment::anomaly_stage(&cfg, &trained.model, &cfg.model_digest()).unwrap();
    let adv = dir_files(dir.path(), "adv-");
    assert_eq!(adv.len(), 6);
    let tags: BTreeSet<String> = adv.iter().map(|p| Dataset::load(p).unwrap().source_tag).collect();
    assert_eq!(tags.len(), 6);
    for p in dir_files(dir.path(), "ood-") {
        let ds = Dataset::load(&p).unwrap();
        assert!(ds.labels.iter().all(|&l| l == NO_LABEL));
    }
    assert_eq!(sources.len(), 1 + 6 + 3);

    let clean = &sources[0];
    for (mode, dim) in [(FeatureMode::Gradient, 8), (FeatureMode::Activation, 4)] {
        let (path, table) =
            experiment::feature_stage(&cfg, &trained.model, "m", "clean", &clean.path, &clean.digest, mode).unwrap();
        assert_eq!(table.dim(), dim);
        let bytes = std::fs::read(&path).unwrap();
        let mut out = Vec::new();
        features::features_to_writer(&features::read_features(&path).unwrap(), &mut out).unwrap();
        assert_eq!(out, bytes);
    }

    let out = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(out.report.rows.len(), (6 + 3) * 3);
    for r in &out.report.rows {
        for m in [r.metrics.accuracy, r.metrics.auroc, r.metrics.aupr] {
            assert!((0.0..=1.0).contains(&m));
        }
    }
    let kv = std::fs::read_to_string(&out.kv_path).unwrap();
    assert!(kv.contains("cw.gradient.auroc="));
    assert!(kv.contains("pooled.gradient.auroc="));

    // A rerun resumes from disk and reproduces the report exactly.
    let rerun = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(rerun.report, out.report);
    assert_eq!(std::fs::read_to_string(&rerun.kv_path).unwrap(), kv);
}

#[test]
fn tampered_adversarial_file_fails_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.attacks.kinds = vec![gradgate::AttackKind::Fgsm];
    cfg.ood.kinds.clear();
    let trained = experiment::train_stage(&cfg).unwrap();
    experiment::anomaly_stage(&cfg, &trained.model, "m").unwrap();
    let path = dir_files(dir.path(), "adv-fgsm").remove(0);
    let mut ds = Dataset::load(&path).unwrap();
    let v = ds.images.data()[0];
    ds.images.data_mut()[0] = if v > 0.5 { v - 0.5 } else { v + 0.5 };
    ds.save(&path).unwrap();
    let err = experiment::anomaly_stage(&cfg, &trained.model, "m").unwrap_err();
    assert!(matches!(err, ExperimentError::Gate(_)), "{err}");
}

#[test]
fn detect_files_reports_and_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut rng = seed::rng(7);
    let mut table = |label: i8, shift: f64| {
        FeatureTable::new(
            if label == 0 { "clean" } else { "fgsm-x" },
            label,
            (0..50).map(|_| vec![rng.gen_range(0.0..1.0) + shift, rng.gen_range(0.0..1.0)]).collect(),
        )
    };
    let normal = dir.path().join("n.csv");
    let anomalous = dir.path().join("a.csv");
    features::write_features(&normal, &table(0, 0.0)).unwrap();
    features::write_features(&anomalous, &table(1, 0.5)).unwrap();
    let (scores, report) = experiment::detect_files(&cfg, &normal, &anomalous).unwrap();
    assert_eq!(features::read_scores(&scores).unwrap().len(), 20);
    let m = report.rows[0].metrics;
    assert!(m.auroc > 0.5 && m.auroc <= 1.0);
    let (_, again) = experiment::detect_files(&cfg, &normal, &anomalous).unwrap();
    assert_eq!(again, report);

    let empty = dir.path().join("e.csv");
    features::write_features(&empty, &FeatureTable::new("x", 1, vec![])).unwrap();
    assert!(experiment::detect_files(&cfg, &normal, &empty).is_err());
}

#[test]
fn compare_norms_matches_summary_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let m = Classifier::build(ArchSpec::small_cnn([1, 16, 16], 10), 9).unwrap();
    let a = data::gen_glyphs(30, 1).unwrap();
    let b = data::gen_ood(data::OodKind::UniformNoise, 25, 2).unwrap();
    let cmp = compare_norms(&cfg, &m, &[a.clone(), b.clone()]).unwrap();
    assert_eq!(cmp.blocks.len(), 2 * 4);

    // Gradient block for layer 1 against a sort-based quantile oracle.
    let y = ConfoundingLabel::all_ones(10).unwrap();
    let mut norms: Vec<f64> = extract_gradient_features(&m, &a.images, &y)
        .unwrap()
        .iter()
        .map(|r| experiment::layer_gradient_norms(r, 4)[1])
        .collect();
    norms.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mode, layer, groups) = &cmp.blocks[1];
    assert_eq!((*mode, *layer), (FeatureMode::Gradient, 1));
    let q = groups[&a.source_tag];
    let oracle = |p: f64| {
        let h = p * (norms.len() - 1) as f64;
        let lo = h.floor() as usize;
        norms[lo] + (h - lo as f64) * (norms[(lo + 1).min(norms.len() - 1)] - norms[lo])
    };
    for (got, p) in [(q.min, 0.0), (q.q1, 0.25), (q.median, 0.5), (q.q3, 0.75), (q.max, 1.0)] {
        assert!((got - oracle(p)).abs() <= 1e-12 * oracle(p).abs().max(1.0));
    }
    assert!(cmp.to_table().contains("[activation layer 3]"));

    assert!(compare_norms(&cfg, &m, &[]).is_err());
}

#[test]
fn missing_idx_files_are_path_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(&format!(
        "out_dir = \"{}\"\n[data]\nsource = \"idx\"\ntrain_images = \"/no/such/a\"\ntrain_labels = \"/no/such/b\"\ntest_images = \"/no/such/c\"\ntest_labels = \"/no/such/d\"\n",
        dir.path().display()
    ))
    .unwrap();
    let err = experiment::train_stage(&cfg).err().unwrap();
    assert!(matches!(err, ExperimentError::Path { .. }), "{err}");
}
