//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectral_tf::construction::{build_aux_pca_with_overlap, build_pca_network, sphere_inits, verify_construction, ConstructionConfig};
use spectral_tf::datasets::{gen_gmm, gen_synthetic_pca};
use spectral_tf::gmm::bayes_cluster;
use spectral_tf::linalg::{eigh_oracle, power_method, sample_unit_sphere, symmetrize, Mat};
use spectral_tf::metrics::{ari, eigenspace_loss, gmm_loss, gmm_loss_k, nmi};
use spectral_tf::train::{grad_check_with, stream, task_loss, train_loop, GradCheckOptions, Task, TrainConfig, VecLoss};
use spectral_tf::transformer::Episode;
use spectral_tf_cli::{gradcheck_problem, run, ActivationKind, TaskKind};
use statrs::distribution::{ContinuousCDF, Normal};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("spectral-tf").chain(args.iter().copied()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// 1. Layer counts reported by `construct` over tau 1..8, k 1..3.
fn layer_counts() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let params = dir.path().join("p.bin");
    let (r, p) = (report.to_str().unwrap(), params.to_str().unwrap());
    let mut bad = Vec::new();
    let mut checked = 0;
    for tau in 1..=8usize {
        let t = tau.to_string();
        for k in 1..=3usize {
            let ks = k.to_string();
            let code = cli(&["construct", "--variant", "pca", "--d", "4", "--n", "8", "--k", &ks, "--tau", &t, "--instances", "1", "--out-report", r, "--out-params", p]);
            let got = read_json(&report)["layer_count"].as_u64();
            checked += 1;
            if code != 0 || got != Some((2 * tau + 4 * k + 1) as u64) {
                bad.push(format!("pca tau={tau} k={k}: {got:?}"));
            }
        }
        let code = cli(&["construct", "--variant", "gmm", "--d", "2", "--n", "40", "--tau", &t, "--instances", "1", "--out-report", r, "--out-params", p]);
        let got = read_json(&report)["layer_count"].as_u64();
        checked += 1;
        if code != 0 || got != Some((2 * tau + 7) as u64) {
            bad.push(format!("gmm tau={tau}: {got:?}"));
        }
    }
    outcome(bad.is_empty(), format!("{checked} builds, mismatches: {bad:?}"))
}

/// 2. Power method vs the Jacobi oracle on 50 gapped instances.
fn power_method_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_cos, mut worst_val, mut count, mut rejected) = (1.0f64, 0.0f64, 0, 0);
    while count < 50 {
        let d = rng.random_range(3..=8);
        let n = rng.random_range(d..=2 * d + 4);
        let k = 2;
        let x = gen_synthetic_pca(d, n, &mut rng);
        let o = eigh_oracle(symmetrize(x.view()).view(), k + 1).unwrap();
        if (0..k).any(|i| o.eigvals[i] - o.eigvals[i + 1] < 0.2 * o.eigvals[i]) {
            rejected += 1;
            continue;
        }
        let inits: Vec<_> = (0..k).map(|_| sample_unit_sphere(d, &mut rng)).collect();
        let pm = power_method(x.view(), 200, k, &inits).unwrap();
        for i in 0..k {
            let cos = pm.vector(i).dot(&o.vector(i)).abs();
            worst_cos = worst_cos.min(cos);
            worst_val = worst_val.max((pm.eigvals[i] - o.eigvals[i]).abs() / o.eigvals[i]);
        }
        count += 1;
    }
    outcome(
        worst_cos >= 1.0 - 1e-6 && worst_val <= 1e-6,
        format!("50 instances (k = 2, {rejected} rejected for gap), min |cos| = {worst_cos:.12}, max eigval rel err = {worst_val:.2e}"),
    )
}

/// 3. Constructed PCA network vs the power method, plus the eps sweep.
fn construction_fidelity() -> Outcome {
    let mut instances = Vec::new();
    let mut seed = 0u64;
    while instances.len() < 20 {
        let mut rng = stream(3, seed);
        seed += 1;
        let i = instances.len();
        let (d, n, k) = ([3, 4, 5, 6][i % 4], [8, 10, 12][i % 3], 1 + i % 2);
        let x = gen_synthetic_pca(d, n, &mut rng);
        let o = eigh_oracle(symmetrize(x.view()).view(), k + 1).unwrap();
        if (0..k).any(|j| o.eigvals[j] - o.eigvals[j + 1] < 0.3 * o.eigvals[j]) {
            continue;
        }
        let (p, layout) = build_aux_pca_with_overlap(x.view(), k, 0.2, &mut rng).unwrap();
        let range = [0.5 * o.eigvals[k - 1], 2.0 * o.eigvals[0]];
        instances.push((x, p, layout, k, range));
    }
    let run_eps = |eps: f64| -> Vec<f64> {
        instances
            .iter()
            .map(|(x, p, layout, k, range)| {
                let cfg = ConstructionConfig { tau: 8, eps, lambda_range: *range, ..Default::default() };
                let params = build_pca_network(x.nrows(), x.ncols(), *k, &cfg, layout).unwrap();
                let reference = power_method(x.view(), 8, *k, &sphere_inits(p, layout)).unwrap();
                let ep = Episode::new(x.view(), p.view(), Some(layout.clone())).unwrap();
                verify_construction(&params, &ep, &reference).unwrap().max_vec_error
            })
            .collect()
    };
    let sweep: Vec<(f64, f64, f64)> = [0.1, 0.03, 0.01]
        .into_iter()
        .map(|eps| {
            let e = run_eps(eps);
            (eps, e.iter().sum::<f64>() / e.len() as f64, e.iter().copied().fold(0.0, f64::max))
        })
        .collect();
    let worst = sweep[2].2;
    let monotone = sweep.windows(2).all(|w| w[1].1 <= w[0].1);
    outcome(
        worst <= 0.05 && monotone,
        format!(
            "20 instances at eps = 0.01: max error {worst:.4}; mean error by eps {}",
            sweep.iter().map(|s| format!("{}: {:.4}", s.0, s.1)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn gmm_means(dir: &Path, d: usize, n: usize, seps: &[f64], trials: usize, seed: u64) -> Vec<(f64, f64)> {
    let out = dir.join(format!("gmm_{d}_{n}.csv"));
    let sep = seps.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    let args = ["gmm", "--d", &d.to_string(), "--n", &n.to_string(), "--sep", &sep, "--trials", &trials.to_string(), "--seed", &seed.to_string(), "--out", out.to_str().unwrap()];
    assert_eq!(cli(&args), 0);
    let mut reader = csv::Reader::from_path(&out).unwrap();
    reader
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[1] == "mean")
        .map(|r| (r[3].parse().unwrap(), r[4].parse().unwrap()))
        .collect()
}

/// 4. Spectral vs Bayes misclustering and the rate shape in N.
fn gmm_vs_bayes() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let seps = [3.0, 4.0, 6.0];
    let mut worst_ratio = 0.0f64;
    let mut lines = Vec::new();
    for d in [2, 5, 10] {
        for (sep, (spectral, bayes)) in seps.iter().zip(gmm_means(dir.path(), d, 1000, &seps, 50, 4)) {
            let ratio = spectral / bayes;
            worst_ratio = worst_ratio.max(ratio);
            lines.push(format!("d={d} sep={sep}: {spectral:.4}/{bayes:.4}"));
        }
    }
    // Separation on the theory's boundary sqrt(ln(N/d)), scaled by 1.5.
    let ns = [500usize, 2000, 8000];
    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let sep = 1.5 * (n as f64 / 5.0).ln().sqrt();
            gmm_means(dir.path(), 5, n, &[sep], 100, 44)[0].0
        })
        .collect();
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 3.0, ly.iter().sum::<f64>() / 3.0);
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let in_window = errs.iter().all(|e| (0.01..=0.3).contains(e));
    outcome(
        worst_ratio <= 2.0 && (-0.55..=-0.15).contains(&slope) && in_window,
        format!(
            "max spectral/Bayes ratio {worst_ratio:.3} [{}]; errors {:?} at N = {ns:?}, slope {slope:.3}",
            lines.join(", "),
            errs.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>()
        ),
    )
}

/// 5. Bayes rule in d = 1 against the Gaussian tail.
fn bayes_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sep = 2.0;
    let inst = gen_gmm(1, 100_000, sep, 1.0, &mut rng);
    let z = bayes_cluster(inst.x.view(), inst.mu0.view(), inst.mu1.view()).unwrap();
    let err = z.labels.iter().zip(&inst.z).filter(|(a, b)| a != b).count() as f64 / 1e5;
    let phi = Normal::new(0.0, 1.0).unwrap().cdf(-sep / 2.0);
    outcome((err - phi).abs() <= 0.01, format!("empirical {err:.5} vs Phi(-1) = {phi:.5}"))
}

/// 6. Gradient checks over tasks and activations, plus the corruption hook.
fn gradient_correctness() -> Outcome {
    let tasks = [TaskKind::Eigvec, TaskKind::Eigval, TaskKind::Gmm];
    let acts = [ActivationKind::Relu, ActivationKind::Softmax];
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let (task, act) = (tasks[i as usize % 3], acts[(i as usize / 3) % 2]);
        let (cfg, params, ep, target) = gradcheck_problem(task, act, 600 + i, 1e-5).unwrap();
        let loss = |y: &Mat| task_loss(&cfg.task, y, &target).unwrap();
        let r = grad_check_with(&params, &ep, &loss, 1e-5, GradCheckOptions::default()).unwrap();
        worst = worst.max(r.max_rel_err);
    }
    let (cfg, params, ep, target) = gradcheck_problem(TaskKind::Eigvec, ActivationKind::Relu, 0, 1e-5).unwrap();
    let loss = |y: &Mat| task_loss(&cfg.task, y, &target).unwrap();
    let opts = GradCheckOptions { corrupt: Some(1.01), ..Default::default() };
    let corrupt = grad_check_with(&params, &ep, &loss, 1e-5, opts).unwrap().max_rel_err;
    outcome(worst <= 1e-4 && corrupt >= 5e-3, format!("20 triples: max rel err {worst:.2e}; corrupted x1.01: {corrupt:.2e}"))
}

/// 7. Toy eigenvector training on three seeds.
fn toy_training() -> Outcome {
    let mut finals = Vec::new();
    for seed in [0u64, 1, 2] {
        let cfg = TrainConfig {
            task: Task::EigVec { k: 1, loss: VecLoss::Cos },
            d: 4,
            n: 8,
            layers: 2,
            heads: 2,
            embed: 32,
            steps: 20_000,
            lr: 1e-3,
            seed,
            eval_every: 20_000,
            eval_size: 500,
            ..TrainConfig::default()
        };
        let out = train_loop(&cfg).unwrap();
        finals.push(out.evals.last().unwrap().1);
    }
    outcome(finals.iter().all(|&c| c >= 0.9), format!("held-out mean |cos| by seed: {finals:.4?}"))
}

/// 8. Metric identities.
fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let z: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let zh: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let flip = |v: &[u8]| v.iter().map(|x| 1 - x).collect::<Vec<u8>>();
        let base = gmm_loss(&zh, &z).unwrap();
        if base != gmm_loss(&flip(&zh), &z).unwrap() || base != gmm_loss(&zh, &flip(&z)).unwrap() {
            failures.push("complement symmetry");
        }
        let wide = |v: &[u8]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
        if gmm_loss_k(&wide(&zh), &wide(&z), 2).unwrap().to_bits() != base.to_bits() {
            failures.push("k = 2 reduction");
        }
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut rng);
        let pa: Vec<usize> = a.iter().map(|&x| perm[x] + 7).collect();
        if (ari(&a, &b).unwrap() - ari(&pa, &b).unwrap()).abs() > 1e-12 || (nmi(&a, &b).unwrap() - nmi(&pa, &b).unwrap()).abs() > 1e-12 {
            failures.push("ARI/NMI permutation invariance");
        }
    }
    let mut pairs = 0;
    for n in 2..=8usize {
        for ma in 0..(1u32 << n) {
            for mb in 0..(1u32 << n) {
                let a: Vec<usize> = (0..n).map(|i| ((ma >> i) & 1) as usize).collect();
                let b: Vec<usize> = (0..n).map(|i| ((mb >> i) & 1) as usize).collect();
                let (mut n11, mut n10, mut n01, mut n00) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in i + 1..n {
                        match (a[i] == a[j], b[i] == b[j]) {
                            (true, true) => n11 += 1.0,
                            (true, false) => n10 += 1.0,
                            (false, true) => n01 += 1.0,
                            (false, false) => n00 += 1.0,
                        }
                    }
                }
                let den: f64 = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
                let want = if den == 0.0 { 1.0 } else { 2.0 * (n00 * n11 - n01 * n10) / den };
                if (ari(&a, &b).unwrap() - want).abs() > 1e-12 {
                    failures.push("ARI pair counting");
                }
                pairs += 1;
            }
        }
    }
    let mut worst_rot = 0.0f64;
    for _ in 0..200 {
        let d = rng.random_range(3..8);
        let mut v = Array2::zeros((d, 2));
        let u1 = sample_unit_sphere(d, &mut rng);
        let mut u2 = sample_unit_sphere(d, &mut rng);
        u2 = &u2 - &(&u1 * u1.dot(&u2));
        let norm = u2.dot(&u2).sqrt();
        v.column_mut(0).assign(&u1);
        v.column_mut(1).assign(&(u2 / norm));
        let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = ndarray::array![[t.cos(), -t.sin()], [t.sin(), t.cos()]];
        worst_rot = worst_rot.max(eigenspace_loss(v.view(), v.dot(&r).view()).unwrap());
    }
    failures.dedup();
    outcome(
        failures.is_empty() && worst_rot <= 1e-10,
        format!("1000 random pairs, {pairs} exhaustive ARI pairs, rotation residual {worst_rot:.1e}; failures {failures:?}"),
    )
}

/// 9. Anti-concentration of a random unit vector against a fixed direction.
fn anti_concentration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = sample_unit_sphere(10, &mut rng);
    let draws = 100_000;
    let hits = (0..draws).filter(|_| sample_unit_sphere(10, &mut rng).dot(&x).abs() <= 0.01).count();
    let p = hits as f64 / draws as f64;
    outcome(p <= 0.05, format!("P(|v.x| <= 0.01) = {p:.5} at d = 10"))
}

/// 10. Byte-identical outputs across two invocations of the binary.
fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_spectral-tf");
    let runs: [(&str, Vec<&str>, Vec<&str>); 4] = [
        ("pca", vec!["pca", "--d", "5", "--n", "12", "--k", "2", "--trials", "8", "--seed", "3", "--out"], vec!["out.csv"]),
        ("gmm", vec!["gmm", "--d", "3", "--n", "300", "--sep", "1,3", "--trials", "6", "--seed", "3", "--plot", "plot.svg", "--out"], vec!["out.csv", "plot.svg"]),
        ("train", vec!["train", "--steps", "300", "--eval-every", "100", "--eval-size", "8", "--seed", "3", "--out-ckpt", "m.params", "--out-history"], vec!["out.csv", "out.csv.eval.csv", "m.params"]),
        ("construct", vec!["construct", "--tau", "4", "--instances", "2", "--seed", "3", "--out-params", "c.params", "--out-report"], vec!["out.csv", "c.params"]),
    ];
    let mut bad = Vec::new();
    for (name, args, files) in runs {
        let mut contents = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let status = Command::new(bin).current_dir(dir.path()).args(&args).arg("out.csv").stdout(Stdio::null()).status().unwrap();
            if !status.success() {
                bad.push(format!("{name}: exit {status}"));
            }
            contents.push(files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap_or_default()).collect::<Vec<_>>());
        }
        if contents[0] != contents[1] || contents[0].iter().any(|c| c.is_empty()) {
            bad.push(format!("{name}: outputs differ or are missing"));
        }
    }
    outcome(bad.is_empty(), format!("pca, gmm (+svg), train (+checkpoint), construct; problems: {bad:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("layer-count identities", layer_counts),
        ("power method vs oracle", power_method_oracle),
        ("construction fidelity", construction_fidelity),
        ("spectral vs Bayes clustering", gmm_vs_bayes),
        ("Bayes sanity", bayes_sanity),
        ("gradient correctness", gradient_correctness),
        ("toy training", toy_training),
        ("metric identities", metric_identities),
        ("anti-concentration", anti_concentration),
        ("CLI determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {verdict} {name} ({:.1}s): {}", i + 1, start.elapsed().as_secs_f64(), o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
