//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion plus
//! informational lines, and exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{aupr_oracle, auroc_oracle, classifier_gradcheck, gradcheck, random_tensor, weighted_sum};
use gradgate::attacks::{self, AttackConfig, AttackKind};
use gradgate::autodiff::{Conv2dAttrs, Reduction};
use gradgate::detector::assemble_detection_sets;
use gradgate::experiment::{self, ExperimentConfig};
use gradgate::gradfeat::{gradient_features_scaled, ConfoundingLabel};
use gradgate::metrics::{aupr, auroc};
use gradgate::nn::{ArchSpec, Classifier, TrainConfig};
use gradgate::{seed, Dataset, FeatureMode, FeatureTable, Tensor};
use rand::Rng;

const FD_MIN_COORDS: usize = 100;
const FD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: usize = 200;
const ORACLE_SIZE: usize = 50;
const MIN_CLEAN_ACCURACY: f64 = 0.95;
const MIN_ACCURACY_DROP: f64 = 0.40;
const PIPELINE_BUDGET: Duration = Duration::from_secs(600);
const MIN_ADV_AUROC: f64 = 0.85;
const MIN_NOISE_AUROC: f64 = 0.95;
const SCALING_TOL: f64 = 1e-10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn info(msg: impl AsRef<str>) {
    println!("       {}", msg.as_ref());
}

fn autodiff() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut record = |name: &str, (err, n): (f64, usize)| {
        info(format!("{name}: max rel err {err:.2e} over {n} coords"));
        worst = worst.max(err);
        checked += n;
    };

    let x = random_tensor(&[2, 2, 6, 6], -1.0, 1.0, 1);
    let k = random_tensor(&[3, 2, 3, 3], -1.0, 1.0, 2);
    let b = random_tensor(&[3], -1.0, 1.0, 3);
    record(
        "conv2d+bias (stride 2, padding 1)",
        gradcheck(&[x.clone(), k, b], 30, 4, |t, ids| {
            let c = t.conv2d(ids[0], ids[1], Conv2dAttrs { stride: 2, padding: 1 }).unwrap();
            let y = t.add_bias(c, ids[2]).unwrap();
            weighted_sum(t, y, 5)
        }),
    );
    record(
        "relu+maxpool",
        gradcheck(&[x], 30, 6, |t, ids| {
            let r = t.relu(ids[0]).unwrap();
            let p = t.maxpool2d(r, 2).unwrap();
            weighted_sum(t, p, 7)
        }),
    );
    let a = random_tensor(&[4, 6], -1.0, 1.0, 8);
    let w = random_tensor(&[6, 3], -1.0, 1.0, 9);
    record(
        "matmul+mul+add+reshape+mean",
        gradcheck(&[a.clone(), w], 24, 10, |t, ids| {
            let z = t.matmul(ids[0], ids[1]).unwrap();
            let s = t.mul(z, z).unwrap();
            let s = t.add(s, z).unwrap();
            let r = t.reshape(s, &[3, 4]).unwrap();
            t.mean(r).unwrap()
        }),
    );
    let pos = random_tensor(&[4, 6], 0.1, 2.0, 11);
    record(
        "sigmoid+log+clip+sum",
        gradcheck(&[pos], 24, 12, |t, ids| {
            let s = t.sigmoid(ids[0]).unwrap();
            let l = t.log(ids[0]).unwrap();
            let c = t.clip(l, -0.5, 0.5).unwrap();
            let y = t.add(s, c).unwrap();
            weighted_sum(t, y, 13)
        }),
    );
    record(
        "cross_entropy+bce",
        gradcheck(&[a], 24, 14, |t, ids| {
            let ce = t.cross_entropy(ids[0], &[0, 5, 2, 3], Reduction::Mean).unwrap();
            let bce = t.bce_with_logits(ids[0], &[1.0; 24]).unwrap();
            t.add(ce, bce).unwrap()
        }),
    );
    let model = Classifier::build(ArchSpec::small_cnn([1, 16, 16], 10), 15).unwrap();
    let batch = random_tensor(&[2, 1, 16, 16], 0.0, 1.0, 16);
    let label = ConfoundingLabel::all_ones(10).unwrap();
    let cnn = classifier_gradcheck(&model, &batch, 16, 17, |t, z| {
        t.bce_with_logits(z, &label.values.repeat(2)).unwrap()
    });
    let cnn_coords = cnn.1;
    record("random SmallCNN, every parameter set", cnn);

    let elapsed = start.elapsed();
    let pass = worst < common::FD_TOLERANCE && cnn_coords >= FD_MIN_COORDS && elapsed < FD_BUDGET;
    outcome(
        pass,
        format!(
            "max rel err {worst:.2e} < 1e-4, {checked} coords ({cnn_coords} in SmallCNN >= {FD_MIN_COORDS}), {:.1}s < 60s",
            elapsed.as_secs_f64()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = seed::rng(20);
    let mut worst: f64 = 0.0;
    for i in 0..ORACLE_INSTANCES {
        // Alternate continuous scores with coarse grids that force ties.
        let grid = [0, 3, 10][i % 3];
        let scores: Vec<f64> = (0..ORACLE_SIZE)
            .map(|_| {
                let v: f64 = rng.gen();
                if grid == 0 { v } else { (v * grid as f64).floor() }
            })
            .collect();
        let mut labels: Vec<bool> = (0..ORACLE_SIZE).map(|_| rng.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        worst = worst.max((auroc(&scores, &labels).unwrap() - auroc_oracle(&scores, &labels)).abs());
        worst = worst.max((aupr(&scores, &labels).unwrap() - aupr_oracle(&scores, &labels)).abs());
    }
    let labels: Vec<bool> = (0..ORACLE_SIZE).map(|i| i % 3 == 0).collect();
    let ties = auroc(&[0.7; ORACLE_SIZE], &labels).unwrap();
    let sep: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
    let (sep_roc, sep_pr) = (auroc(&sep, &labels).unwrap(), aupr(&sep, &labels).unwrap());
    let pass = worst <= ORACLE_TOL && ties == 0.5 && sep_roc == 1.0 && sep_pr == 1.0;
    outcome(
        pass,
        format!(
            "max |diff| {worst:.1e} <= 1e-12 over {ORACLE_INSTANCES} instances of {ORACLE_SIZE}; all-ties {ties}, separated {sep_roc}/{sep_pr}"
        ),
    )
}

fn attack_validity() -> Outcome {
    let (train, val, test) = common::glyph_split(2000, 1000, 30);
    // A short schedule: accurate but not robust, the setting the attack
    // budgets are meant for.
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 0.001,
        weight_decay: 1e-4,
        seed: 31,
        ..TrainConfig::default()
    };
    let model = common::trained_small_cnn(&train, &val, &cfg, 32);
    let y = test.class_labels().unwrap();
    let clean = model.accuracy(&test.images, &y).unwrap();
    let acfg = AttackConfig { seed: 33, ..AttackConfig::default() };
    let mut pass = clean >= MIN_CLEAN_ACCURACY;
    let mut parts = vec![format!("clean {clean:.3} >= {MIN_CLEAN_ACCURACY}")];
    let mut fgsm_images = None;
    for kind in [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd] {
        let r = attacks::run(&model, kind, &test.images, &y, &acfg).unwrap();
        let acc = model.accuracy(&r.images, &y).unwrap();
        let drop = clean - acc;
        let bounded = attacks::verify(kind, &test.images, &r.images, acfg.epsilon).is_ok()
            && r.linf.iter().all(|&d| d <= acfg.epsilon);
        pass &= drop >= MIN_ACCURACY_DROP && bounded;
        parts.push(format!("{kind} drop {:.1}pp{}", 100.0 * drop, if bounded { "" } else { " (L-inf violated)" }));
        if kind == AttackKind::Fgsm {
            fgsm_images = Some(r.images);
        }
    }
    let bim1 = attacks::bim(&model, &test.images, &y, acfg.epsilon, acfg.epsilon, 1).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let identical = bits(&bim1.images) == bits(fgsm_images.as_ref().unwrap());
    pass &= identical;
    parts.push(format!("BIM(T=1, a=eps) == FGSM bitwise: {identical}"));
    outcome(pass, parts.join(", "))
}

struct PipelineRun {
    cfg: ExperimentConfig,
    out: experiment::ExperimentOutput,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn run_pipeline() -> PipelineRun {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        out_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let out = experiment::run_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    for src in &out.sources {
        let acc = src.accuracy.map_or("-".into(), |a| format!("{a:.3}"));
        let succ = src.success_rate.map_or("-".into(), |a| format!("{a:.3}"));
        info(format!("{:<15} classifier accuracy {acc:>6}  attack success {succ:>6}", src.name));
    }
    for r in &out.report.rows {
        info(format!("{:<15} {:<10} auroc {:.4}", r.source, r.method, r.metrics.auroc));
    }
    PipelineRun { cfg, out, elapsed, _dir: dir }
}

fn gradient_vs_activation(run: &PipelineRun) -> Outcome {
    let c = run.out.comparison.as_ref().unwrap();
    let layers = c.gradient_layer_auroc.len();
    let wins = c.layers_where_gradient_wins();
    for (l, (g, a)) in c.gradient_layer_auroc.iter().zip(&c.activation_layer_auroc).enumerate() {
        info(format!("layer {l}: gradient {g:.4} vs activation {a:.4}"));
    }
    let pass = 2 * wins > layers
        && c.pooled_gradient_auroc > c.pooled_activation_auroc
        && run.elapsed < PIPELINE_BUDGET;
    outcome(
        pass,
        format!(
            "gradient wins {wins}/{layers} layers, pooled {:.4} > {:.4}, end-to-end {:.0}s < 600s",
            c.pooled_gradient_auroc,
            c.pooled_activation_auroc,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn gradient_auroc(run: &PipelineRun, source: &str) -> f64 {
    run.out.report.get(source, FeatureMode::Gradient.as_str()).unwrap().metrics.auroc
}

fn adversarial_detection(run: &PipelineRun) -> Outcome {
    let mut pass = true;
    let parts: Vec<String> = AttackKind::ALL
        .iter()
        .map(|k| {
            let a = gradient_auroc(run, k.as_str());
            pass &= a >= MIN_ADV_AUROC;
            format!("{k} {a:.4}")
        })
        .collect();
    outcome(pass, format!("{} (each >= {MIN_ADV_AUROC})", parts.join(", ")))
}

fn ood_detection(run: &PipelineRun) -> Outcome {
    let uniform = gradient_auroc(run, "uniform-noise");
    let gaussian = gradient_auroc(run, "gaussian-noise");
    let textures = gradient_auroc(run, "textures");
    let pass = uniform >= MIN_NOISE_AUROC && gaussian >= MIN_NOISE_AUROC && textures <= uniform;
    outcome(
        pass,
        format!("uniform {uniform:.4}, gaussian {gaussian:.4} (>= {MIN_NOISE_AUROC}); textures {textures:.4} <= uniform"),
    )
}

fn method_invariants(run: &PipelineRun) -> Outcome {
    let ckpt = experiment::train_stage(&run.cfg).unwrap();
    let model = &ckpt.model;
    let test = Dataset::load(&run.out.sources[0].path).unwrap();
    let x = test.images.slice_outer(0, 64).unwrap();
    let y = ConfoundingLabel::all_ones(model.classes()).unwrap();

    let base = gradient_features_scaled(model, &x, &y, 1.0).unwrap();
    let neg = gradient_features_scaled(model, &x, &y, -1.0).unwrap();
    let sign_neutral = base
        .iter()
        .flatten()
        .zip(neg.iter().flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut worst: f64 = 0.0;
    for k in [0.5, 3.0, -7.0] {
        let scaled = gradient_features_scaled(model, &x, &y, k).unwrap();
        for (a, b) in base.iter().flatten().zip(scaled.iter().flatten()) {
            let want = k * k * a;
            if want != 0.0 {
                worst = worst.max((b - want).abs() / want.abs());
            }
        }
    }

    let reloaded = Classifier::load(&ckpt.checkpoint).unwrap();
    let after = gradient_features_scaled(&reloaded, &x, &y, 1.0).unwrap();
    let stable = base
        .iter()
        .flatten()
        .zip(after.iter().flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let small = |dir: &std::path::Path| {
        ExperimentConfig::from_toml(&format!(
            "seed = 17\nout_dir = \"{}\"\n[data]\ntrain_count = 600\nval_count = 150\ntest_count = 200\n[train]\nepochs = 2\n[attacks]\nkinds = [\"fgsm\", \"cw\"]\ncw_iterations = 30\n[ood]\nkinds = [\"textures\"]\n",
            dir.display()
        ))
        .unwrap()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = experiment::run_experiment(&small(d1.path())).unwrap();
    let r2 = experiment::run_experiment(&small(d2.path())).unwrap();
    let deterministic = r1.report == r2.report
        && r1.report.to_kv() == r2.report.to_kv()
        && r1.comparison == r2.comparison;

    let pass = sign_neutral && worst < SCALING_TOL && stable && deterministic;
    outcome(
        pass,
        format!(
            "sign-neutral bitwise {sign_neutral}, k^2 scaling rel err {worst:.1e} < 1e-10, checkpoint round-trip bitwise {stable}, pipeline reruns identical {deterministic}"
        ),
    )
}

fn split_protocol() -> Outcome {
    let mut exact = 0;
    let mut approx = 0;
    let mut pass = true;
    let side = |n: usize, label: i8| FeatureTable::new(if label == 0 { "n" } else { "a" }, label, vec![vec![0.0]; n]);
    for n_norm in (5..=200).step_by(3) {
        for n_anom in [5, 7, 20, 33, 100, 101] {
            let sets = assemble_detection_sets(&side(n_norm, 0), &side(n_anom, 1), seed::derive(40, "split")).unwrap();
            for (positive, n) in [(false, n_norm), (true, n_anom)] {
                let counts: Vec<usize> =
                    sets.iter().map(|s| s.labels.iter().filter(|&&l| (l == 1) == positive).count()).collect();
                let targets = [0.4 * n as f64, 0.4 * n as f64, 0.2 * n as f64];
                let ok = counts.iter().sum::<usize>() == n
                    && if n % 5 == 0 {
                        exact += 1;
                        counts.iter().zip(targets).all(|(&c, t)| c as f64 == t)
                    } else {
                        approx += 1;
                        counts.iter().zip(targets).all(|(&c, t)| (c as f64 - t).abs() <= 1.0)
                    };
                pass &= ok;
            }
        }
    }
    outcome(pass, format!("{exact} divisible-by-5 classes exact, {approx} others within +-1"))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("criterion 1 autodiff correctness", autodiff());
    report("criterion 2 metric oracles", metric_oracles());
    report("criterion 3 attack validity", attack_validity());
    let run = run_pipeline();
    let clean = run.out.sources[0].accuracy.unwrap();
    let fgsm = run.out.sources.iter().find(|s| s.name == "fgsm").and_then(|s| s.accuracy).unwrap();
    info(format!(
        "pipeline classifier: clean accuracy {clean:.3}, FGSM accuracy drop {:.1}pp (informational)",
        100.0 * (clean - fgsm)
    ));
    report("criterion 4 gradient vs activation separation", gradient_vs_activation(&run));
    report("criterion 5 adversarial detection", adversarial_detection(&run));
    report("criterion 6 OOD detection", ood_detection(&run));
    report("criterion 7 method-level invariants", method_invariants(&run));
    report("criterion 8 split protocol", split_protocol());

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
