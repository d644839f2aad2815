//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p nhl-cli --test acceptance -- 1 6 7`. Failures are reported
//! but only change the exit status when `NHL_ACCEPTANCE_STRICT` is set.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Result};
use nhl::data::{Dataset, InputDist, Target};
use nhl::gradflow::{gf_rhs, integrate, numerical_rhs, residuals, GFConfig, Integrator, LossKind, ParamDelta};
use nhl::kernels::{kernel_velocity, tangent_gram_with_bias_rate, GramMatrix, KernelLadder};
use nhl::seed::{component_rng, rng_from_seed};
use nhl::{init_network, ActivationKind, InitSpec, Network};
use nhl_cli::{run, Experiment, RunConfig, Summary};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn run_preset(exp: Experiment, dir: &Path) -> Result<Summary> {
    let mut cfg = RunConfig::preset(exp);
    cfg.out = dir.to_path_buf();
    cfg.validate()?;
    Ok(run(&cfg)?.summary)
}

fn key(s: &Summary, k: &str) -> Result<f64> {
    s.f64(k).ok_or_else(|| anyhow::anyhow!("summary has no numeric `{k}`"))
}

fn tanh_problem(bias: bool, seed: u64) -> Result<(Network, Dataset<f64>)> {
    let spec = InitSpec { bias_enabled: bias, ..InitSpec::standard(3, 8, 4, ActivationKind::Tanh, seed) };
    let net = init_network::<f64>(&spec)?;
    let data = Target::Sin2x.dataset(&InputDist::Gaussian, 10, 4, &mut component_rng(seed, "data"))?;
    Ok((net, data))
}

fn flat_blocks(d: &ParamDelta<f64>) -> Vec<Vec<f64>> {
    let mut out = vec![d.dz.iter().copied().collect::<Vec<_>>()];
    out.extend(d.dw.iter().map(|w| w.iter().copied().collect()));
    out.push(d.da.to_vec());
    if let Some(db) = &d.db {
        out.extend(db.iter().map(|b| b.to_vec()));
    }
    out
}

fn gradient_consistency() -> Result<Verdict> {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        for (bias, beta) in [(false, 0.0), (true, 0.0), (true, 1.0)] {
            let (net, data) = tanh_problem(bias, seed)?;
            let exact = gf_rhs(&net, &data, LossKind::Squared, beta)?;
            let fd = numerical_rhs(&net, &data, LossKind::Squared, beta, 1e-5)?;
            for (e, f) in flat_blocks(&exact).iter().zip(flat_blocks(&fd)) {
                let scale = e.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
                let err = e.iter().zip(&f).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                worst = worst.max(err / scale);
            }
        }
    }
    verdict(worst < 1e-5, format!("worst relative error {worst:.2e} (< 1e-5)"))
}

fn kernel_flow_identity() -> Result<Verdict> {
    let (net, data) = tanh_problem(true, 7)?;
    let beta = 1.0;
    let cfg = GFConfig { dt: 1e-3, horizon: 1.0, integrator: Integrator::Rk4, beta, record_every: 1, weight_decay: 0.0 };
    let traj = integrate(&net, &data, LossKind::Squared, &cfg)?;
    let last = traj.states.len() - 2;
    let mut worst = 0.0f64;
    for j in 0..20 {
        let k = 1 + j * (last - 1) / 19;
        let before = traj.states[k - 1].predict(data.x.view())?;
        let after = traj.states[k + 1].predict(data.x.view())?;
        let dfdt = (after - before) / (traj.times[k + 1] - traj.times[k - 1]);
        let state = &traj.states[k];
        let theta = tangent_gram_with_bias_rate(state, data.x.view(), beta)?;
        let zeta = residuals(&state.predict(data.x.view())?, &data.y, LossKind::Squared);
        let velocity = kernel_velocity(&theta, zeta.view());
        for (a, b) in dfdt.iter().zip(&velocity) {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    verdict(worst < 1e-3, format!("worst relative mismatch {worst:.2e} over 20 times (< 1e-3)"))
}

fn fig2_deviation(dir: &Path) -> Result<Verdict> {
    let s = run_preset(Experiment::Fig2, dir)?;
    let (narrow, wide) = (key(&s, "sup_dev_m64")?, key(&s, "sup_dev_m2048")?);
    verdict(
        wide < 0.10 && wide < narrow,
        format!("sup relative deviation {wide:.4} at m=2048 (< 0.10), {narrow:.4} at m=64"),
    )
}

fn compression_decay(dir: &Path) -> Result<Verdict> {
    let s = run_preset(Experiment::Compress, dir)?;
    let slope = key(&s, "slope")?;
    let below = s.bool("all_below_bound").unwrap_or(false);
    verdict(
        (-1.25..=-0.75).contains(&slope) && below,
        format!("log-log slope {slope:.3} (in [-1.25, -0.75]), every mean below bound: {below}"),
    )
}

fn rademacher_check(dir: &Path) -> Result<Verdict> {
    let s = run_preset(Experiment::Rademacher, dir)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (depth, n) in [(2, 64), (3, 64), (3, 256)] {
        let est = key(&s, &format!("estimate_L{depth}_n{n}"))?;
        let bound = key(&s, &format!("bound_L{depth}_n{n}"))?;
        pass &= est > 0.0 && est <= bound;
        parts.push(format!("(L={depth}, n={n}) {est:.4} <= {bound:.4}"));
    }
    verdict(pass, parts.join(", "))
}

fn random_spec(rng: &mut impl Rng, input_dim: usize, seed: u64) -> InitSpec {
    let activation = if rng.random_bool(0.5) { ActivationKind::Relu } else { ActivationKind::Tanh };
    let depth = rng.random_range(2..=4);
    let width = rng.random_range(2..=24);
    InitSpec {
        std_a: rng.random_range(0.2..3.0),
        std_z: rng.random_range(0.2..3.0),
        std_w: rng.random_range(0.2..3.0),
        ..InitSpec::standard(depth, width, input_dim, activation, seed)
    }
}

fn bound_suite() -> Result<Verdict> {
    let mut rng = rng_from_seed(101);
    let mut worst_value = 0.0f64;
    let mut worst_lipschitz = 0.0f64;
    for k in 0..100 {
        let d = rng.random_range(1..=5);
        let net = init_network::<f64>(&random_spec(&mut rng, d, k))?;
        let c = net.complexity_upper_bound(2.0)?;
        let x = InputDist::UnitBall.sample::<f64, _>(&mut rng, 20, d);
        let x2 = InputDist::UnitBall.sample::<f64, _>(&mut rng, 20, d);
        let (f, f2) = (net.predict(x.view())?, net.predict(x2.view())?);
        for i in 0..x.nrows() {
            let norm = x.row(i).dot(&x.row(i)).sqrt();
            worst_value = worst_value.max(f[i].abs() / (c * norm).max(1e-300));
            let gap = (&x.row(i) - &x2.row(i)).mapv(|v| v * v).sum().sqrt();
            worst_lipschitz = worst_lipschitz.max((f[i] - f2[i]).abs() / (c * ActivationKind::LIPSCHITZ * gap).max(1e-300));
        }
    }
    verdict(
        worst_value <= 1.0 && worst_lipschitz <= 1.0,
        format!("max |f(x)|/(C|x|) = {worst_value:.3}, max Lipschitz ratio = {worst_lipschitz:.3} (both <= 1)"),
    )
}

fn psd_suite() -> Result<Verdict> {
    let mut rng = rng_from_seed(202);
    let mut worst = f64::INFINITY;
    for k in 0..30 {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(3..=16);
        let mut spec = random_spec(&mut rng, d, 1000 + k);
        spec.bias_enabled = rng.random_bool(0.5);
        let net = init_network::<f64>(&spec)?;
        let x = InputDist::Gaussian.sample::<f64, _>(&mut rng, n, d);
        let ladder = KernelLadder::compute(&net, x.view())?;
        let mut grams: Vec<_> = ladder.kappa.clone();
        grams.push(ladder.tangent(rng.random_range(0.0..2.0)));
        for g in grams {
            let g = GramMatrix::new("g", g)?;
            let slack = g.min_eigenvalue() / (1e-8 * g.trace().abs() / n as f64).max(1e-300);
            worst = worst.min(slack);
        }
    }
    verdict(worst >= -1.0, format!("worst min eigenvalue / (1e-8 trace / n) = {worst:.3e} (>= -1)"))
}

fn fig3_check(dir: &Path) -> Result<Verdict> {
    let s = run_preset(Experiment::Fig3, dir)?;
    let mse = key(&s, "mean_final_train_mse")?;
    let (c2_init, c2_fin, c1_fin) = (
        key(&s, "mean_initial_cka_kappa2")?,
        key(&s, "mean_final_cka_kappa2")?,
        key(&s, "mean_final_cka_kappa1")?,
    );
    let checks = [mse < 1e-2, c2_fin > c2_init, c2_fin > c1_fin];
    verdict(
        checks.iter().all(|&c| c),
        format!(
            "mean final train mse {mse:.3e} (< 1e-2: {}), cka2 {c2_init:.3} -> {c2_fin:.3} (rises: {}), final cka1 {c1_fin:.3} (below cka2: {})",
            checks[0], checks[1], checks[2]
        ),
    )
}

fn degeneracy_check(dir: &Path) -> Result<Verdict> {
    let s = run_preset(Experiment::Degeneracy, dir)?;
    let ratio = key(&s, "std_ratio")?;
    verdict((2.0..=8.0).contains(&ratio), format!("std ratio m=256 vs m=4096 is {ratio:.3} (in [2, 8], predicted 4)"))
}

fn csv_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path)?);
        }
    }
    Ok(out)
}

fn determinism(first: &Path, second: &Path) -> Result<Verdict> {
    if !first.join("manifest.json").exists() {
        run_preset(Experiment::Fig2, first)?;
    }
    run_preset(Experiment::Fig2, second)?;
    let (a, b) = (csv_files(first)?, csv_files(second)?);
    ensure!(!a.is_empty(), "first fig2 run wrote no CSVs");
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    verdict(
        differing.is_empty() && a.len() == b.len(),
        format!("{} CSVs compared, differing: {differing:?}", a.len()),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let scratch = tempfile::tempdir().expect("scratch directory");
    let dir = |name: &str| scratch.path().join(name);
    let fig2_a = dir("fig2-a");
    let fig2_b = dir("fig2-b");

    type Check<'a> = Box<dyn Fn() -> Result<Verdict> + 'a>;
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "gradient consistency", Box::new(gradient_consistency)),
        (2, "kernel-flow identity", Box::new(kernel_flow_identity)),
        (3, "linear mean-field vs particles", Box::new(|| fig2_deviation(&fig2_a))),
        (4, "compression error decay", Box::new(|| compression_decay(&dir("compress")))),
        (5, "rademacher estimate vs bound", Box::new(|| rademacher_check(&dir("rademacher")))),
        (6, "complexity bound suite", Box::new(bound_suite)),
        (7, "kernel PSD suite", Box::new(psd_suite)),
        (8, "sin(2x) feature learning", Box::new(|| fig3_check(&dir("fig3")))),
        (9, "pre-activation degeneracy", Box::new(|| degeneracy_check(&dir("degeneracy")))),
        (10, "fig2 determinism", Box::new(|| determinism(&fig2_a, &fig2_b))),
    ];

    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check) in &criteria {
        if !selected.is_empty() && !selected.contains(id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".to_string()),
        };
        failed += usize::from(!pass);
        println!("[{}] {id:>2} {name}: {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 && std::env::var_os("NHL_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
