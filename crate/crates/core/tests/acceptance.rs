//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run a subset with `cargo test -p grff --test acceptance -- 1 4 9`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use grff::autodiff::{gradcheck, RunningStats, BATCHNORM_EPS, GRADCHECK_STEP};
use grff::baselines::alignment_score;
use grff::data::make_synthetic;
use grff::experiment::{run_config, run_experiment, ExperimentConfig, MetricRow};
use grff::generator::{streams, NoiseSpec, NoiseStream};
use grff::model::{loss_gradcheck, GrffNetwork, NetworkSpec, Variant};
use grff::rff::{pair_errors, rff_map, sample_rbf_weights, RbfKernelSpec, WeightBatch};
use grff::robustness::iteration_count;
use grff::trainer::{epoch_step, TrainConfig};
use grff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Verdict,
}

fn mins(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn repo_data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn mean_metric(rows: &[MetricRow], setting: &str, method: &str, metric: &str) -> (f64, usize) {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.setting == setting && r.method == method && r.metric == metric)
        .map(|r| r.value)
        .collect();
    assert!(!v.is_empty(), "no {method}/{metric} rows for {setting}");
    (v.iter().sum::<f64>() / v.len() as f64, v.len())
}

fn run_toml(text: &str, out: &Path) -> grff::experiment::RunOutput {
    let mut cfg = ExperimentConfig::from_toml(text).unwrap();
    cfg.experiment.output = out.to_path_buf();
    run_config(cfg, None).unwrap()
}

// 1
fn unit_norm() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let d = [2, 20, 123][i % 3];
        let count = rng.random_range(1..=64);
        let scale = rng.random_range(0.1..5.0);
        let x = random_tensor(&mut rng, &[1, d], 3.0);
        let w = WeightBatch::new(random_tensor(&mut rng, &[count, d], scale)).unwrap();
        let z = rff_map(&x, &w).unwrap();
        let norm = z.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((norm - 1.0).abs());
    }
    Verdict::new(worst <= 1e-9, format!("max |‖φ‖−1| = {worst:.3e} (tol 1e-9)"))
}

// 2
fn kernel_approximation() -> Verdict {
    let spec = RbfKernelSpec::new(1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let w = sample_rbf_weights(&spec, 4096, 10, &mut rng);
    let a = Tensor::new(vec![200, 10], (0..2000).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let b = Tensor::new(vec![200, 10], (0..2000).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let errs = pair_errors(&a, &b, &w, &spec).unwrap();
    let max = errs.iter().copied().fold(0.0, f64::max);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Verdict::new(
        max < 0.1 && mean < 0.02,
        format!("max err {max:.4} (< 0.1), mean err {mean:.4} (< 0.02) over 200 pairs, D=4096"),
    )
}

// 3
fn gradient_suite() -> Verdict {
    let h = GRADCHECK_STEP;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let w = uniform_tensor(&mut rng, &[3, 4]);
    let bias = uniform_tensor(&mut rng, &[4]);
    let other = uniform_tensor(&mut rng, &[2, 4]);
    let kern = uniform_tensor(&mut rng, &[2, 2, 3, 3]);
    let gamma = uniform_tensor(&mut rng, &[4]);
    let beta = uniform_tensor(&mut rng, &[4]);
    let x0 = uniform_tensor(&mut rng, &[2, 3]);
    let rows54 = uniform_tensor(&mut rng, &[5, 4]);
    let shift = uniform_tensor(&mut rng, &[2, 4]);
    let img = uniform_tensor(&mut rng, &[2, 2, 6, 5]);
    let pool_in = uniform_tensor(&mut rng, &[1, 2, 4, 4]);

    type Check<'a> = (&'a str, grff::Result<f64>);
    let checks: Vec<Check> = vec![
        ("matmul", gradcheck(|g, x| { let w = g.input(w.clone(), false); let y = g.matmul(x, w)?; let y = g.sin(y); Ok(g.sum(y)) }, &x0, h)),
        ("matmul rhs", gradcheck(|g, wv| { let x = g.input(x0.clone(), false); let y = g.matmul(x, wv)?; let y = g.cos(y); Ok(g.sum(y)) }, &w, h)),
        ("matmul_t", gradcheck(|g, o| { let x = g.input(rows54.clone(), false); let y = g.matmul_t(x, o)?; let y = g.tanh(y); Ok(g.sum(y)) }, &other, h)),
        ("add_bias", gradcheck(|g, b| { let x = g.input(other.clone(), false); let y = g.add_bias(x, b)?; let y = g.mul(y, y)?; Ok(g.sum(y)) }, &bias, h)),
        ("add/sub/mul", gradcheck(|g, a| { let b = g.input(other.clone(), false); let s = g.add(a, b)?; let d = g.sub(s, a)?; let m = g.mul(d, a)?; let m = g.mul(m, a)?; Ok(g.sum(m)) }, &other.map(|v| v + 0.1), h)),
        ("scale+tanh", gradcheck(|g, a| { let y = g.scale(a, -2.5); let y = g.tanh(y); Ok(g.sum(y)) }, &x0, h)),
        ("relu", gradcheck(|g, a| { let y = g.relu(a); let y = g.mul(y, y)?; Ok(g.sum(y)) }, &x0, h)),
        ("leaky_relu", gradcheck(|g, a| { let y = g.leaky_relu(a, 0.2); let y = g.mul(y, y)?; Ok(g.sum(y)) }, &x0, h)),
        ("fourier+reshape", gradcheck(|g, a| { let y = g.fourier(a, 0.7)?; let c = g.input(w.clone(), false); let r = g.reshape(y, &[2, 6])?; let r = g.reshape(r, &[4, 3])?; let z = g.matmul(r, c)?; let z = g.mul(z, z)?; Ok(g.sum(z)) }, &x0, h)),
        ("batchnorm train", gradcheck(|g, a| { let (gm, bt) = (g.input(gamma.clone(), false), g.input(beta.clone(), false)); let x = g.input(other.clone(), false); let x = g.add(x, a)?; let (y, _) = g.batchnorm_train(x, gm, bt, BATCHNORM_EPS)?; let y = g.sin(y); let y = g.mul(y, y)?; Ok(g.sum(y)) }, &shift, h)),
        ("batchnorm affine", gradcheck(|g, gm| { let bt = g.input(beta.clone(), false); let x = g.input(rows54.clone(), false); let (y, _) = g.batchnorm_train(x, gm, bt, BATCHNORM_EPS)?; let y = g.sin(y); Ok(g.sum(y)) }, &gamma, h)),
        ("batchnorm eval", gradcheck(|g, a| { let (gm, bt) = (g.input(gamma.clone(), false), g.input(beta.clone(), false)); let rs = RunningStats { mean: vec![0.1, -0.2, 0.3, 0.0], var: vec![0.5, 1.5, 2.0, 1.0] }; let y = g.batchnorm_eval(a, gm, bt, &rs, BATCHNORM_EPS)?; let y = g.sin(y); Ok(g.sum(y)) }, &other, h)),
        ("conv2d input", gradcheck(|g, a| { let k = g.input(kern.clone(), false); let y = g.conv2d_valid(a, k)?; let y = g.sin(y); Ok(g.sum(y)) }, &img, h)),
        ("conv2d kernels", gradcheck(|g, k| { let x = g.input(img.clone(), false); let y = g.conv2d_valid(x, k)?; let y = g.sin(y); Ok(g.sum(y)) }, &kern, h)),
        ("maxpool2", gradcheck(|g, a| { let y = g.maxpool2(a)?; let y = g.mul(y, y)?; Ok(g.sum(y)) }, &pool_in, h)),
        ("cross entropy", gradcheck(|g, a| g.softmax_cross_entropy(a, &[1, 3]), &other, h)),
        ("mean", gradcheck(|g, a| { let y = g.mul(a, a)?; Ok(g.mean(y)) }, &other, h)),
    ];
    let mut worst = (0.0, "");
    let mut failed = Vec::new();
    for (name, err) in checks {
        let err = err.unwrap();
        if !(err < 1e-4) {
            failed.push(format!("{name}={err:.2e}"));
        }
        if err > worst.0 {
            worst = (err, name);
        }
    }

    let vector = GrffNetwork::build(
        &NetworkSpec {
            hidden: Some(vec![vec![6, 5], vec![7]]),
            noise_dim: 4,
            ..NetworkSpec::vector(3, &[5, 3], 3)
        },
        11,
    )
    .unwrap();
    let x = random_tensor(&mut rng, &[6, 3], 1.0);
    let labels = [0, 1, 2, 2, 1, 0];
    let vec_err = loss_gradcheck(&vector, &x, &labels, &vector.predict_noise(5), h).unwrap();

    let image = GrffNetwork::build(
        &NetworkSpec {
            variant: Variant::Image { channels: 1, height: 16, width: 16 },
            d_list: vec![2, 2],
            num_classes: 3,
            noise_dim: 3,
            hidden: Some(vec![vec![4], vec![4]]),
        },
        12,
    )
    .unwrap();
    let xi = Tensor::new(vec![3, 1, 16, 16], (0..768).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap();
    let img_err = loss_gradcheck(&image, &xi, &[0, 2, 1], &image.predict_noise(6), h).unwrap();

    for (name, err) in [("K=2 vector GRFF loss", vec_err), ("K=2 image GRFF loss", img_err)] {
        if !(err < 1e-4) {
            failed.push(format!("{name}={err:.2e}"));
        }
    }
    Verdict::new(
        failed.is_empty(),
        format!(
            "17 primitive checks (worst {} {:.2e}), K=2 loss {vec_err:.2e} vector / {img_err:.2e} image (tol 1e-4){}",
            worst.1,
            worst.0,
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

// 4
fn alignment_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = random_tensor(&mut rng, &[200, 7], 1.0);
        let w = WeightBatch::new(random_tensor(&mut rng, &[64, 7], 1.0)).unwrap();
        let z = rff_map(&x, &w).unwrap();
        let y: Vec<f64> = (0..200).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let mut brute = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                let dot: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
                brute += y[i] * y[j] * dot;
            }
        }
        let fast = alignment_score(&z, &y).unwrap().total;
        worst = worst.max((fast - brute).abs());
    }
    Verdict::new(worst <= 1e-8, format!("max |fast − double loop| = {worst:.3e} over 5 instances (tol 1e-8)"))
}

// 5
fn progressive_freezing() -> Verdict {
    let data = make_synthetic(512, 4, 55).unwrap();
    let d_list = [64, 64, 64];
    let mut net = GrffNetwork::build(&NetworkSpec::vector(4, &d_list, 2), 5).unwrap();
    let cfg = TrainConfig::new(&d_list, &[5, 5, 5], 5).unwrap();
    let mut noise = NoiseStream::new(&NoiseSpec { noise_dim: net.noise.noise_dim, seed: 5 }, streams::TRAIN);
    let initial: Vec<Vec<f64>> = net.generators.iter().map(|g| g.snapshot()).collect();
    let mut snaps = Vec::new();
    for epoch in 0..15 {
        epoch_step(&mut net, &data, &cfg, epoch, &mut noise).unwrap();
        snaps.push(net.generators.iter().map(|g| g.snapshot()).collect::<Vec<_>>());
    }
    let g12_frozen = (0..5).all(|e| snaps[e][0] == initial[0] && snaps[e][1] == initial[1]);
    let g1_frozen = (0..10).all(|e| snaps[e][0] == initial[0]);
    let g3_moves = snaps[0][2] != initial[2];
    let g2_moves = snaps[5][1] != initial[1];
    let g1_moves = snaps[10][0] != initial[0];
    Verdict::new(
        g12_frozen && g1_frozen && g3_moves && g2_moves && g1_moves,
        format!(
            "G1,G2 unchanged through epoch 4: {g12_frozen}; G1 unchanged through epoch 9: {g1_frozen}; \
             G3/G2/G1 start moving at epochs 0/5/10: {g3_moves}/{g2_moves}/{g1_moves}"
        ),
    )
}

// 6
fn synthetic_reproduction() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let out = run_toml(
        r#"
[experiment]
kind = "synthetic-sweep"
name = "synthetic"
seed = 6
repetitions = 3
methods = ["grff", "rff"]

[data]
format = "synthetic"
dims = [10, 18]
n_train = 10000
n_test = 1000

[train]
d_list = [256, 64]
epochs = [50, 200]
"#,
        dir.path(),
    );
    let (g10, n) = mean_metric(&out.rows, "d=10", "grff", "test_error");
    let (g18, _) = mean_metric(&out.rows, "d=18", "grff", "test_error");
    let (r18, _) = mean_metric(&out.rows, "d=18", "rff", "test_error");
    let low_dim = g10 <= 0.10;
    let gap = r18 - g18;
    Verdict::new(
        low_dim && gap >= 0.05,
        format!(
            "d=10 GRFF test error {:.2}% (≤ 10%: {low_dim}); d=18 GRFF {:.2}% vs RFF {:.2}%, gap {:.2} points (≥ 5: {}); {n} seeds",
            100.0 * g10,
            100.0 * g18,
            100.0 * r18,
            100.0 * gap,
            gap >= 0.05
        ),
    )
}

// 7
fn benchmark_reproduction() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, need) in [("monks1", 0.908), ("monks3", 0.887)] {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
[experiment]
kind = "benchmark"
name = "{name}"
seed = 7
repetitions = 5
methods = ["grff"]

[data]
format = "libsvm"
train = "{}"
test = "{}"

[train]
d_list = [256, 64]
epochs = [200, 1000]
"#,
            repo_data(&format!("monks/{name}.train")).display(),
            repo_data(&format!("monks/{name}.test")).display(),
        );
        let out = run_toml(&text, dir.path());
        let (acc, n) = mean_metric(&out.rows, name, "grff", "test_acc");
        pass &= acc >= need;
        parts.push(format!("{name} {:.2}% over {n} seeds (≥ {:.1}%)", 100.0 * acc, 100.0 * need));
    }
    Verdict::new(pass, parts.join("; "))
}

// 8
fn robustness_ordering() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
[experiment]
kind = "robustness"
name = "mnist"
seed = 8
repetitions = 3

[data]
format = "idx"
train = "{}"
train_labels = "{}"
test = "{}"
test_labels = "{}"

[train]
d_list = [16, 8]

[attack]
epsilons = [4, 8, 12, 16]
"#,
        repo_data("mnist/train-images.idx.gz").display(),
        repo_data("mnist/train-labels.idx.gz").display(),
        repo_data("mnist/test-images.idx.gz").display(),
        repo_data("mnist/test-labels.idx.gz").display(),
    );
    let out = run_toml(&text, dir.path());
    let (clean, n) = mean_metric(&out.rows, "clean", "grff", "test_acc");
    let (acc1, _) = mean_metric(&out.rows, "eps=12", "grff", "acc1");
    let (acc2, _) = mean_metric(&out.rows, "eps=12", "grff", "acc2");
    let (iters, _) = mean_metric(&out.rows, "eps=12", "grff", "iterations");
    let ordered: Vec<(u32, f64, f64)> = [4, 8, 12, 16]
        .iter()
        .map(|&e| {
            let s = format!("eps={e}");
            (e, mean_metric(&out.rows, &s, "grff", "acc1").0, mean_metric(&out.rows, &s, "grff", "acc2").0)
        })
        .collect();
    let trained = clean >= 0.95;
    let fooled = acc1 < 0.10;
    let recovered = acc2 >= acc1 + 0.15;
    let monotone = ordered.iter().all(|&(_, a1, a2)| a2 >= a1);
    let curve: Vec<String> = ordered
        .iter()
        .map(|(e, a1, a2)| format!("ε={e}: {:.1}/{:.1}", 100.0 * a1, 100.0 * a2))
        .collect();
    Verdict::new(
        trained && fooled && recovered && monotone && iters == 15.0,
        format!(
            "clean {:.2}% (≥ 95%: {trained}); ε=12 ({iters} iters) acc1 {:.2}% (< 10%: {fooled}), acc2 {:.2}% (≥ acc1+15: {recovered}); \
             acc1/acc2 {} (acc2 ≥ acc1 everywhere: {monotone}); {n} seeds",
            100.0 * clean,
            100.0 * acc1,
            100.0 * acc2,
            curve.join(", ")
        ),
    )
}

// 9
fn iteration_formula() -> Verdict {
    let expected = [(2.0, 5), (4.0, 5), (8.0, 10), (12.0, 15), (16.0, 20)];
    let got: Vec<(f64, usize)> = expected.iter().map(|&(e, _)| (e, iteration_count(e))).collect();
    let mismatches: Vec<String> = expected
        .iter()
        .zip(&got)
        .filter(|(want, have)| want.1 != have.1)
        .map(|(want, have)| format!("ε={} expected {} got {}", want.0, want.1, have.1))
        .collect();
    Verdict::new(
        mismatches.is_empty(),
        format!(
            "counts {:?}{}",
            got.iter().map(|g| g.1).collect::<Vec<_>>(),
            if mismatches.is_empty() { String::new() } else { format!("; {}", mismatches.join(", ")) }
        ),
    )
}

// 10
fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let first = run_toml(
        r#"
[experiment]
kind = "benchmark"
name = "determinism"
seed = 10
repetitions = 2
methods = ["grff", "rff", "rff-aligned", "mlp"]

[data]
format = "synthetic"
dims = [6]
n_train = 600
n_test = 200

[train]
d_list = [32, 16]
epochs = [3, 6]

[baseline]
features = 32
"#,
        dir.path(),
    );
    let metrics = first.output_dir.join("metrics.csv");
    let manifest = first.output_dir.join("manifest.json");
    let a = std::fs::read(&metrics).unwrap();
    run_experiment(&manifest, None).unwrap();
    let b = std::fs::read(&metrics).unwrap();
    grff::parallel::set_parallel(false);
    let third = run_experiment(&manifest, None);
    grff::parallel::set_parallel(true);
    third.unwrap();
    let c = std::fs::read(&metrics).unwrap();
    Verdict::new(
        a == b && b == c,
        format!(
            "{} metric rows; manifest rerun identical: {}; sequential rerun identical: {}",
            first.rows.len(),
            a == b,
            b == c
        ),
    )
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "unit-norm feature map", budget: secs(1), run: unit_norm },
        Criterion { id: 2, name: "RBF kernel approximation", budget: secs(10), run: kernel_approximation },
        Criterion { id: 3, name: "gradient suite", budget: secs(30), run: gradient_suite },
        Criterion { id: 4, name: "alignment identity", budget: secs(5), run: alignment_identity },
        Criterion { id: 5, name: "progressive freezing", budget: mins(1), run: progressive_freezing },
        Criterion { id: 6, name: "synthetic reproduction", budget: mins(15), run: synthetic_reproduction },
        Criterion { id: 7, name: "monks benchmark", budget: mins(30), run: benchmark_reproduction },
        Criterion { id: 8, name: "robustness ordering", budget: mins(45), run: robustness_ordering },
        Criterion { id: 9, name: "attack iteration count", budget: secs(1), run: iteration_formula },
        Criterion { id: 10, name: "determinism", budget: None, run: determinism },
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::new(false, format!("panicked: {msg}"))
            });
        let elapsed = start.elapsed();
        let in_time = c.budget.is_none_or(|b| elapsed <= b);
        let pass = verdict.pass && in_time;
        failures += usize::from(!pass);
        let budget = c.budget.map_or("no budget".to_string(), |b| format!("budget {:.0} s", b.as_secs_f64()));
        println!(
            "criterion {:>2} {} {}: {} [{:.2} s, {budget}{}]",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            verdict.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
