//! Release acceptance gate. Each test checks one criterion at its stated
//! tolerance and prints a single `criterion NN ...: PASS/FAIL` line.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture
//! --test-threads 1`. The tests serialize themselves on a global lock so
//! runtime budgets hold even under the default parallel harness; heavy
//! artifacts (datasets, trained runs) are built once and shared.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock, PoisonError};
use std::time::Instant;

use dear::cli;
use dear::eval;
use dear::graph::{apply_mask, super_graph_from_order, GraphMask, WeightedAdjacency};
use dear::nn::{Activation, Net, NetSpec, Role};
use dear::oracle::{gradcheck_table, LinGaussSpec};
use dear::prior::{pwl_fit, traverse, ElementwiseTransform, ScmPrior};
use dear::trainer::load_checkpoint;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

static GATE: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(PoisonError::into_inner)
}

fn ws() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("workspace tempdir")).path()
}

fn cli_ok(args: &[&str]) {
    let code = cli::run(args.iter().copied());
    assert_eq!(code, 0, "command failed: {args:?}");
}

fn s(p: &Path) -> String {
    p.to_str().expect("utf-8 path").to_owned()
}

/// Base pendulum dataset at benchmark scale, generated once.
fn base_data() -> PathBuf {
    static D: OnceLock<PathBuf> = OnceLock::new();
    D.get_or_init(|| {
        let dir = ws().join("data-base");
        cli_ok(&["dear", "gen-data", "--out", &s(&dir), "--seed", "0"]);
        dir
    })
    .clone()
}

/// The benchmark training run (defaults: lambda 5, L2, true graph), shared
/// by the disentanglement and sample-efficiency criteria.
fn disent_run() -> PathBuf {
    static D: OnceLock<PathBuf> = OnceLock::new();
    D.get_or_init(|| {
        let data = base_data();
        let out = ws().join("run-disent");
        cli_ok(&[
            "dear", "train", "--data", &s(&data), "--out", &s(&out), "--epochs", "40", "--seed",
            "0",
        ]);
        out
    })
    .clone()
}

#[derive(serde::Deserialize)]
struct DisentJson {
    per_factor_abs_spearman: Vec<f64>,
    mean_abs_spearman: f64,
    mae_uncorrupted_per_factor: Vec<f64>,
    #[allow(dead_code)]
    mae_uncorrupted_mean: f64,
}

fn eval_disent(ckpt: &Path, data: &Path, out: &Path) -> DisentJson {
    cli_ok(&["dear", "eval-disent", "--ckpt", &s(ckpt), "--data", &s(data), "--out", &s(out)]);
    serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap()
}

/// Parse a two-row (dear, raw) metrics CSV into (name -> numeric columns).
fn csv_rows(path: &Path) -> Vec<(String, Vec<f64>)> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let mut parts = line.split(',');
            let name = parts.next().unwrap().to_owned();
            (name, parts.map(|v| v.parse::<f64>().unwrap()).collect())
        })
        .collect()
}

fn col(rows: &[(String, Vec<f64>)], name: &str, idx: usize) -> f64 {
    rows.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("row {name}")).1[idx]
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random invertible elementwise transform over `m` dims; alternates between
/// linear maps with positive slopes and jittered piecewise-linear maps.
fn random_transform(rng: &mut ChaCha8Rng, m: usize, pwl: bool) -> ElementwiseTransform {
    if pwl {
        let mut f = ElementwiseTransform::pwl_identity(m, 8, -3.0, 3.0);
        let mut p = f.params_flat();
        for v in &mut p {
            *v += rng.gen_range(-0.3..0.3);
        }
        f.set_params_flat(&p).unwrap();
        f.project_invertibility(0.05);
        f
    } else {
        let w = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
        let b = (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        ElementwiseTransform::linear(w, b).unwrap()
    }
}

/// Random weighted DAG over `m` nodes: full super-graph of a random order
/// with uniform weights.
fn random_dag(rng: &mut ChaCha8Rng, m: usize) -> WeightedAdjacency {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mask = super_graph_from_order(&order).unwrap();
    let mut w = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            if mask.permits(i, j) {
                w[[i, j]] = rng.gen_range(-0.9..0.9);
            }
        }
    }
    apply_mask(w, mask).unwrap()
}

#[test]
fn criterion_01_scm_roundtrip_exactness() {
    let _g = serial();
    let t = Instant::now();
    let (k, m) = (8usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_round = 0.0f64;
    let mut max_resid = 0.0f64;
    for case in 0..1000 {
        let adj = random_dag(&mut rng, m);
        let f = random_transform(&mut rng, m, case % 2 == 0);
        let prior = ScmPrior::new(k, m, adj, f).unwrap();
        let eps = normal_vec(&mut rng, k);
        let z = prior.sample(&eps).unwrap();
        let back = prior.invert(&z).unwrap();
        let z2 = prior.sample(&back).unwrap();
        for (a, b) in z.iter().zip(&z2) {
            max_round = max_round.max((a - b).abs());
        }
        // Linear-SCM residual: (I - A^T) u = eps with u = f^{-1}(z) on the
        // causal block, and the tail must pass through unchanged.
        let u: Vec<f64> = (0..m).map(|j| prior.f().inverse_dim(j, z[j])).collect();
        for j in 0..m {
            let mut acc = u[j] - eps[j];
            for i in 0..m {
                acc -= prior.adjacency().weight(i, j) * u[i];
            }
            max_resid = max_resid.max(acc.abs());
        }
        for j in m..k {
            max_resid = max_resid.max((z[j] - eps[j]).abs());
        }
    }
    let dt = t.elapsed().as_secs_f64();
    let pass = max_round < 1e-9 && max_resid < 1e-9 && dt < 5.0;
    println!(
        "criterion 01 scm-roundtrip-exactness: {} — max roundtrip {max_round:.2e}, max residual {max_resid:.2e}, {dt:.2} s",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "roundtrip {max_round:e}, residual {max_resid:e}, {dt:.2} s");
}

#[test]
fn criterion_02_intervention_semantics() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);

    // Non-descendants of the intervened node keep bit-identical values.
    let mut bit_ok = true;
    for _ in 0..200 {
        let m = rng.gen_range(3..=6);
        let k = m + rng.gen_range(0..3) as usize;
        let adj = random_dag(&mut rng, m);
        let pwl = rng.gen_bool(0.5);
        let f = random_transform(&mut rng, m, pwl);
        let prior = ScmPrior::new(k, m, adj, f).unwrap();
        let z = prior.sample(&normal_vec(&mut rng, k)).unwrap();
        let d = rng.gen_range(0..m);
        let v = rng.gen_range(-2.0..2.0);
        let z2 = prior.intervene(&z, &[(d, v)]).unwrap();
        let desc = prior.adjacency().mask().descendants(&[d]);
        for i in 0..k {
            if i != d && !desc.contains(&i) && z[i].to_bits() != z2[i].to_bits() {
                bit_ok = false;
            }
        }
        if z2[d] != v {
            bit_ok = false;
        }
    }

    // Chain 0 -> 1 -> 2 with identity f: do(z1 = v) matches hand arithmetic.
    let mut chain_ok = true;
    for _ in 0..200 {
        let (a, b) = (rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9));
        let mask = GraphMask::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut w = Array2::zeros((3, 3));
        w[[0, 1]] = a;
        w[[1, 2]] = b;
        let adj = apply_mask(w, mask).unwrap();
        let f = ElementwiseTransform::linear(vec![1.0; 3], vec![0.0; 3]).unwrap();
        let prior = ScmPrior::new(3, 3, adj, f).unwrap();
        let eps = normal_vec(&mut rng, 3);
        let z = prior.sample(&eps).unwrap();
        let v = rng.gen_range(-2.0..2.0);
        let z2 = prior.intervene(&z, &[(1, v)]).unwrap();
        let expect = [z[0], v, eps[2] + b * v];
        for (got, want) in z2.iter().zip(expect) {
            if (got - want).abs() > 1e-12 {
                chain_ok = false;
            }
        }
    }

    // With no edges an intervention is exactly a coordinate replacement.
    let mut traverse_ok = true;
    for _ in 0..200 {
        let m = rng.gen_range(2..=5);
        let adj = WeightedAdjacency::zeros(GraphMask::empty(m));
        let f = random_transform(&mut rng, m, true);
        let prior = ScmPrior::new(m, m, adj, f).unwrap();
        let z = prior.sample(&normal_vec(&mut rng, m)).unwrap();
        let d = rng.gen_range(0..m);
        let v = rng.gen_range(-2.0..2.0);
        let by_do = prior.intervene(&z, &[(d, v)]).unwrap();
        let by_traverse = traverse(&z, d, &[v]).unwrap().remove(0);
        if by_do != by_traverse {
            traverse_ok = false;
        }
    }

    let dt = t.elapsed().as_secs_f64();
    let pass = bit_ok && chain_ok && traverse_ok && dt < 5.0;
    println!(
        "criterion 02 intervention-semantics: {} — non-descendants bit-identical {bit_ok}, chain oracle {chain_ok}, traverse-when-empty {traverse_ok}, {dt:.2} s",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

/// Reject inputs that put any pre-activation near the LeakyRelu kink, where
/// central differences disagree with the exact subgradient.
fn kink_free(net: &Net, x: &Array1<f64>) -> bool {
    let mut cur = x.clone();
    for (l, w) in net.weights.iter().enumerate() {
        let pre = w.dot(&cur) + &net.biases[l];
        if pre.iter().any(|v| v.abs() < 1e-3) {
            return false;
        }
        cur = pre.mapv(|v| net.spec.activations[l].apply(v));
    }
    true
}

#[test]
fn criterion_03_backprop_matches_finite_differences() {
    let _g = serial();
    let t = Instant::now();
    let h = 1e-5;
    let tol = 1e-4;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-6);
    let central = |f: &mut dyn FnMut(f64) -> f64, x: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let layouts: [&[usize]; 4] = [&[3, 2], &[4, 5, 3], &[3, 4, 4, 2], &[2, 3, 3, 3, 2]];
    let acts = [Activation::LeakyRelu, Activation::Tanh, Activation::Sigmoid, Activation::Identity];
    let mut worst = 0.0f64;
    let mut nets = 0;
    'outer: while nets < 100 {
        let sizes = layouts[nets % layouts.len()].to_vec();
        let act = acts[(nets / layouts.len()) % acts.len()];
        let spec = NetSpec {
            layer_sizes: sizes.clone(),
            activations: vec![act; sizes.len() - 1],
            input_role: Role::Encoder,
        };
        let mut net = Net::init(spec, rng.gen()).unwrap();
        for b in &mut net.biases {
            b.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        }
        let x = Array1::from_shape_fn(sizes[0], |_| rng.gen_range(-1.0..1.0));
        if act == Activation::LeakyRelu && !kink_free(&net, &x) {
            continue 'outer;
        }
        let u = Array1::from_shape_fn(*sizes.last().unwrap(), |_| rng.gen_range(-1.0..1.0));
        let obj = |net: &Net, x: &Array1<f64>| net.forward(x).unwrap().0.dot(&u);
        let (_, tape) = net.forward(&x).unwrap();
        let (grads, input_grad) = net.backward(&tape, &u).unwrap();
        for i in 0..x.len() {
            let fd = central(
                &mut |v| {
                    let mut xi = x.clone();
                    xi[i] = v;
                    obj(&net, &xi)
                },
                x[i],
            );
            worst = worst.max(rel(input_grad[i], fd));
        }
        for l in 0..net.weights.len() {
            let snapshot = net.weights[l].clone();
            for (idx, &w0) in snapshot.indexed_iter() {
                let fd = central(
                    &mut |v| {
                        let mut n2 = net.clone();
                        n2.weights[l][idx] = v;
                        obj(&n2, &x)
                    },
                    w0,
                );
                worst = worst.max(rel(grads.weights[l][idx], fd));
            }
            for i in 0..net.biases[l].len() {
                let fd = central(
                    &mut |v| {
                        let mut n2 = net.clone();
                        n2.biases[l][i] = v;
                        obj(&n2, &x)
                    },
                    net.biases[l][i],
                );
                worst = worst.max(rel(grads.biases[l][i], fd));
            }
        }
        nets += 1;
    }
    let dt = t.elapsed().as_secs_f64();
    let pass = worst < tol && dt < 30.0;
    println!(
        "criterion 03 backprop-finite-differences: {} — worst relative error {worst:.2e} over {nets} nets, {dt:.2} s",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "worst {worst:e} in {dt:.2} s");
}

#[test]
fn criterion_04_estimator_oracle() {
    let _g = serial();
    let t = Instant::now();
    let rows = gradcheck_table(&LinGaussSpec::reference(), 1_000_000, &[11, 12, 13], 1e-5).unwrap();
    let dt = t.elapsed().as_secs_f64();
    let failures: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0f64, f64::max);
    let pass = failures.is_empty() && dt < 300.0;
    println!(
        "criterion 04 estimator-oracle: {} — {} of {} parameters within max(2%, 0.01), worst rel err {:.3}%, {dt:.1} s",
        if pass { "PASS" } else { "FAIL" },
        rows.len() - failures.len(),
        rows.len(),
        100.0 * worst,
    );
    assert!(pass, "failing parameters: {failures:?} in {dt:.1} s");
}

#[test]
fn criterion_05_pwl_denseness() {
    let _g = serial();
    let t = Instant::now();
    let xs: Vec<f64> = (0..2000).map(|i| i as f64 / 1999.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (2.0 * std::f64::consts::PI * x).sin()).collect();
    let mut errs = Vec::new();
    for t_knots in [8usize, 16, 32, 64] {
        let (_, err) = pwl_fit(&xs, &ys, t_knots, 0.0, 1.0).unwrap();
        errs.push(err);
    }
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let dt = t.elapsed().as_secs_f64();
    let pass = decreasing && errs[3] < 0.01 && dt < 5.0;
    println!(
        "criterion 05 pwl-denseness: {} — sup errors at T=8,16,32,64: {:.4}, {:.4}, {:.4}, {:.4}, {dt:.2} s",
        if pass { "PASS" } else { "FAIL" },
        errs[0],
        errs[1],
        errs[2],
        errs[3],
    );
    assert!(pass, "errors {errs:?} in {dt:.2} s");
}

#[test]
fn criterion_06_pendulum_disentanglement() {
    let _g = serial();
    let t = Instant::now();
    let run = disent_run();
    let report = eval_disent(&run.join("ckpt_final.bin"), &base_data(), &run);
    let dt = t.elapsed().as_secs_f64();
    let max_mae = report.mae_uncorrupted_per_factor.iter().cloned().fold(0.0f64, f64::max);
    let pass = report.mean_abs_spearman >= 0.8 && max_mae <= 0.1 && dt <= 1800.0;
    println!(
        "criterion 06 pendulum-disentanglement: {} — mean |spearman| {:.4} (per factor {:.3?}), max per-factor MAE {:.4}, {dt:.0} s",
        if pass { "PASS" } else { "FAIL" },
        report.mean_abs_spearman,
        report.per_factor_abs_spearman,
        max_mae,
    );
    assert!(pass, "mean |spearman| {}, max MAE {max_mae}, {dt:.0} s", report.mean_abs_spearman);
}

#[test]
fn criterion_07_scm_prior_beats_independent() {
    let _g = serial();
    let t = Instant::now();
    let data = base_data();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in ["0", "1", "2"] {
        let mut effect = [0.0f64; 2];
        for (slot, mode) in ["scm", "independent"].iter().enumerate() {
            let out = ws().join(format!("run-ablation-{mode}-s{seed}"));
            cli_ok(&[
                "dear",
                "train",
                "--data",
                &s(&data),
                "--out",
                &s(&out),
                "--epochs",
                "40",
                "--seed",
                seed,
                "--label-fraction",
                "0.1",
                "--prior-mode",
                mode,
            ]);
            let rep = eval_disent(&out.join("ckpt_final.bin"), &data, &out);
            effect[slot] = (rep.per_factor_abs_spearman[2] + rep.per_factor_abs_spearman[3]) / 2.0;
        }
        pass &= effect[0] > effect[1];
        lines.push(format!("seed {seed}: scm {:.4} vs independent {:.4}", effect[0], effect[1]));
    }
    let dt = t.elapsed().as_secs_f64();
    println!(
        "criterion 07 scm-vs-independent-prior: {} — effect-factor mean |spearman|: {}; {dt:.0} s",
        if pass { "PASS" } else { "FAIL" },
        lines.join("; "),
    );
    assert!(pass, "{lines:?}");
}

#[test]
fn criterion_08_sample_efficiency() {
    let _g = serial();
    let t = Instant::now();
    let run = disent_run();
    let ckpt = run.join("ckpt_final.bin");
    let data = base_data();
    let mut gaps = Vec::new();
    for seed in ["0", "1", "2"] {
        let out = ws().join(format!("downstream-s{seed}"));
        cli_ok(&[
            "dear",
            "downstream",
            "--ckpt",
            &s(&ckpt),
            "--data",
            &s(&data),
            "--out",
            &s(&out),
            "--seed",
            seed,
        ]);
        let rows = csv_rows(&out.join("downstream.csv"));
        gaps.push(col(&rows, "dear", 2) - col(&rows, "raw", 2));
    }
    let dt = t.elapsed().as_secs_f64();
    let pass = gaps.iter().all(|&g| g >= 3.0);
    println!(
        "criterion 08 sample-efficiency: {} — efficiency-score gaps (dear - raw) per probe seed: {:.2}, {:.2}, {:.2} (need >= 3 on all), {dt:.0} s",
        if pass { "PASS" } else { "FAIL" },
        gaps[0],
        gaps[1],
        gaps[2],
    );
    assert!(pass, "gaps {gaps:?}");
}

#[test]
fn criterion_09_worst_group_robustness() {
    let _g = serial();
    let t = Instant::now();
    let data = ws().join("data-shift");
    cli_ok(&[
        "dear",
        "gen-data",
        "--out",
        &s(&data),
        "--seed",
        "0",
        "--corruption-rate",
        "0.5",
        "--spurious-correlation",
        "0.8",
    ]);
    let run = ws().join("run-robust");
    cli_ok(&["dear", "train", "--data", &s(&data), "--out", &s(&run), "--epochs", "40", "--seed", "0"]);
    let ckpt = run.join("ckpt_final.bin");
    let mut gaps = Vec::new();
    for seed in ["0", "1", "2"] {
        let out = ws().join(format!("robust-s{seed}"));
        cli_ok(&[
            "dear",
            "robustness",
            "--ckpt",
            &s(&ckpt),
            "--data",
            &s(&data),
            "--out",
            &s(&out),
            "--seed",
            seed,
            "--probe-epochs",
            "300",
        ]);
        let rows = csv_rows(&out.join("robustness.csv"));
        gaps.push(col(&rows, "dear", 0) - col(&rows, "raw", 0));
    }
    let dt = t.elapsed().as_secs_f64();
    let pass = gaps.iter().all(|&g| g >= 5.0);
    println!(
        "criterion 09 worst-group-robustness: {} — worst-group gaps (dear - raw) per probe seed: {:.2}, {:.2}, {:.2} (need >= 5 on all), {dt:.0} s",
        if pass { "PASS" } else { "FAIL" },
        gaps[0],
        gaps[1],
        gaps[2],
    );
    assert!(pass, "gaps {gaps:?}");
}

#[test]
fn criterion_10_efficiency_score_formula() {
    let _g = serial();
    let score = eval::efficiency_score(68.06, 79.51).unwrap();
    let pass = (85.5..=85.7).contains(&score);
    println!(
        "criterion 10 efficiency-score-formula: {} — efficiency_score(68.06, 79.51) = {score:.4}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "score {score}");
}

#[test]
fn criterion_11_structure_from_order() {
    let _g = serial();
    let t = Instant::now();
    let data = base_data();
    // Edges of the physical mechanism with signs from the standardized
    // regression of the shadow pair on the angles; entries (0,1) and (2,3)
    // are absent from the mechanism.
    let true_edges = [(0, 1, 0.0), (0, 2, 1.0), (0, 3, 1.0), (1, 2, -1.0), (1, 3, 1.0), (2, 3, 0.0)];
    let mut per_seed = Vec::new();
    for seed in ["0", "1", "2"] {
        let out = ws().join(format!("run-order-s{seed}"));
        cli_ok(&[
            "dear",
            "train",
            "--data",
            &s(&data),
            "--out",
            &s(&out),
            "--epochs",
            "40",
            "--seed",
            seed,
            "--graph",
            "order",
            "--sup-kind",
            "ce",
            "--lambda",
            "30",
        ]);
        let state = load_checkpoint(&out.join("ckpt_final.bin")).unwrap();
        let a = state.prior.adjacency().weights().clone();
        per_seed.push(a);
    }
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, j, sign) in true_edges {
        let vals: Vec<f64> = per_seed.iter().map(|a| a[[i, j]]).collect();
        let ok = if sign == 0.0 {
            vals.iter().all(|v| v.abs() < 0.1)
        } else {
            vals.iter().all(|v| v.abs() >= 0.1 && v.signum() == sign)
        };
        pass &= ok;
        detail.push(format!(
            "A[{i}{j}] {} {:+.3}/{:+.3}/{:+.3}",
            if ok { "ok" } else { "BAD" },
            vals[0],
            vals[1],
            vals[2]
        ));
    }
    let dt = t.elapsed().as_secs_f64();
    println!(
        "criterion 11 structure-from-order: {} — {}; {dt:.0} s",
        if pass { "PASS" } else { "FAIL" },
        detail.join(", "),
    );
    assert!(pass, "{detail:?}");
}

#[test]
fn criterion_12_reproducibility() {
    let _g = serial();
    let t = Instant::now();

    let dataset_files = ["meta.json"]
        .into_iter()
        .map(str::to_owned)
        .chain(["train", "val", "test"].into_iter().flat_map(|split| {
            ["images.f32", "factors.csv", "labels.csv"]
                .into_iter()
                .map(move |f| format!("{split}/{f}"))
        }))
        .collect::<Vec<_>>();
    let mut pass = true;
    let mut notes = Vec::new();

    let d1 = ws().join("repro-data-1");
    let d2 = ws().join("repro-data-2");
    for d in [&d1, &d2] {
        cli_ok(&[
            "dear", "gen-data", "--out", &s(d), "--seed", "7", "--n-train", "200", "--n-val",
            "40", "--n-test", "60",
        ]);
    }
    for f in &dataset_files {
        if fs::read(d1.join(f)).unwrap() != fs::read(d2.join(f)).unwrap() {
            pass = false;
            notes.push(format!("dataset file {f} differs"));
        }
    }

    let r1 = ws().join("repro-run-1");
    let r2 = ws().join("repro-run-2");
    for r in [&r1, &r2] {
        cli_ok(&[
            "dear", "train", "--data", &s(&d1), "--out", &s(r), "--epochs", "2", "--hidden",
            "32", "--batch-size", "32", "--seed", "5",
        ]);
    }
    for f in ["metrics.csv", "ckpt_final.bin"] {
        if fs::read(r1.join(f)).unwrap() != fs::read(r2.join(f)).unwrap() {
            pass = false;
            notes.push(format!("training artifact {f} differs"));
        }
    }

    let dt = t.elapsed().as_secs_f64();
    println!(
        "criterion 12 reproducibility: {} — {}; {dt:.0} s",
        if pass { "PASS" } else { "FAIL" },
        if notes.is_empty() { "all reruns byte-identical".to_owned() } else { notes.join(", ") },
    );
    assert!(pass, "{notes:?}");
}
