//! The experiments behind each subcommand. Every function writes its CSVs
//! through [`Output`] and returns the summary that goes into the manifest.

use std::collections::BTreeMap;

use anyhow::{bail, ensure, Context, Result};
use ndarray::{Array1, Array2, Axis};
use nhl::complexity::{estimate_rademacher, rademacher_bound};
use nhl::data::{InputDist, Target};
use nhl::gradflow::{empirical_risk, integrate_with};
use nhl::kernels::{cka, min_norm_in_span_or_ridge, target_gram, GramMatrix, KernelLadder};
use nhl::linear_mf::{integrate_linear_mf, particle_run, sup_relative_deviation, LinearMFConfig};
use nhl::sampler::mse_decay;
use nhl::seed::rng_from_seed;
use nhl::{init_network, Data, InitSpec, Network};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::{Experiment, NetConfig, RunConfig, TargetConfig};
use crate::output::{cols, num, numbered, schema, Output, Seeds};

/// Scalar results of a run, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Summary(pub BTreeMap<String, Value>);

impl Summary {
    pub fn put(&mut self, key: impl Into<String>, value: impl Serialize) {
        self.0.insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(Value::as_f64)
    }

    pub fn bool(&self, key: &str) -> Option<bool> {
        self.0.get(key).and_then(Value::as_bool)
    }
}

pub fn dispatch(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    match cfg.experiment {
        Experiment::Train => train(cfg, seeds, out),
        Experiment::LinearMf => linear_mf(cfg, seeds, out),
        Experiment::Kernels => kernels(cfg, seeds, out),
        Experiment::Compress => compress(cfg, seeds, out),
        Experiment::Rademacher => rademacher(cfg, seeds, out),
        Experiment::DepthSep => depth_sep(cfg, seeds, out),
        Experiment::Fig2 => fig2(cfg, seeds, out),
        Experiment::Fig3 => fig3(cfg, seeds, out),
        Experiment::Lln => lln(cfg, seeds, out),
        Experiment::Degeneracy => degeneracy(cfg, seeds, out),
    }
}

fn unit_vector(d: usize, seed: u64) -> Array1<f64> {
    let g: Array2<f64> = InputDist::Gaussian.sample(&mut rng_from_seed(seed), 1, d);
    let g = g.row(0).to_owned();
    let norm = g.dot(&g).sqrt();
    g / norm
}

fn init_spec(net: &NetConfig, depth: usize, width: usize, input_dim: usize, seed: u64) -> InitSpec {
    InitSpec {
        depth,
        width,
        input_dim,
        std_a: net.std_a,
        std_z: net.std_z,
        std_w: net.std_w,
        std_b: net.std_b,
        bias_enabled: net.bias_enabled,
        activation: net.activation,
        seed,
    }
}

fn init(cfg: &RunConfig, depth: usize, width: usize, seed: u64) -> Result<Network> {
    Ok(init_network(&init_spec(&cfg.net, depth, width, cfg.data.input_dim, seed))?)
}

fn build_target(cfg: &RunConfig, seeds: &Seeds) -> Result<Target<f64>> {
    let d = cfg.data.input_dim;
    Ok(match &cfg.data.target {
        TargetConfig::Linear { v_star: Some(v) } => Target::Linear(Array1::from(v.clone())),
        TargetConfig::Linear { v_star: None } => Target::Linear(unit_vector(d, seeds.get("target"))),
        TargetConfig::Sin2x => Target::Sin2x,
        TargetConfig::Pyramid => Target::Pyramid,
        TargetConfig::RadialBump { eps0 } => Target::RadialBump(*eps0),
        TargetConfig::Teacher { width } => Target::Teacher(Box::new(init(cfg, cfg.net.depth, *width, seeds.get("teacher"))?)),
    })
}

/// Training set and, when `data.test_n > 0`, a test set; seeds are named
/// `{prefix}data/train` and `{prefix}data/test`.
fn datasets(cfg: &RunConfig, seeds: &Seeds, target: &Target<f64>, prefix: &str) -> Result<(Data, Option<Data>)> {
    let (dist, d) = (&cfg.data.dist, cfg.data.input_dim);
    let mut rng = rng_from_seed(seeds.get(&format!("{prefix}data/train")));
    let train = target.dataset(dist, cfg.data.n, d, &mut rng)?;
    let test = if cfg.data.test_n > 0 {
        let mut rng = rng_from_seed(seeds.get(&format!("{prefix}data/test")));
        Some(target.dataset(dist, cfg.data.test_n, d, &mut rng)?)
    } else {
        None
    };
    Ok((train, test))
}

fn mse(net: &Network, data: &Data) -> nhl::Result<f64> {
    let f = net.predict(data.x.view())?;
    Ok((&f - &data.y).mapv(|r| r * r).mean().unwrap_or(0.0))
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn train(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    let target = build_target(cfg, seeds)?;
    let (train, test) = datasets(cfg, seeds, &target, "")?;
    let net = init(cfg, cfg.net.depth, cfg.net.width, seeds.get("init"))?;
    let loss = cfg.flow.loss;
    let mut rows = Vec::new();
    let fin = integrate_with(&net, &train, loss, &cfg.flow.gf(), |snap| {
        let test_risk = test.as_ref().map(|t| empirical_risk(snap.state, t, loss)).transpose()?;
        rows.push(vec![
            snap.step.to_string(),
            num(snap.time),
            num(snap.risk),
            opt(test_risk),
            num(snap.state.complexity_upper_bound(2.0)?),
        ]);
        Ok(())
    })?;
    out.write_csv(
        "trajectory.csv",
        schema::TRAJECTORY,
        &cols(&["step", "t", "train_risk", "test_risk", "complexity"]),
        &rows,
    )?;

    let mut header = cols(&["split"]);
    header.extend(numbered("x", cfg.data.input_dim));
    header.extend(cols(&["y", "f"]));
    let mut pred_rows = Vec::new();
    for (split, data) in [("train", Some(&train)), ("test", test.as_ref())] {
        let Some(data) = data else { continue };
        let f = fin.predict(data.x.view())?;
        for (k, x) in data.x.rows().into_iter().enumerate() {
            let mut row = vec![split.to_string()];
            row.extend(x.iter().map(|v| num(*v)));
            row.push(num(data.y[k]));
            row.push(num(f[k]));
            pred_rows.push(row);
        }
    }
    out.write_csv("predictions.csv", schema::PREDICTIONS, &header, &pred_rows)?;

    let mut s = Summary::default();
    s.put("initial_train_risk", empirical_risk(&net, &train, loss)?);
    s.put("final_train_risk", empirical_risk(&fin, &train, loss)?);
    if let Some(t) = &test {
        s.put("final_test_risk", empirical_risk(&fin, t, loss)?);
    }
    Ok(s)
}

/// Training data, `v*` and the mean-field config shared by `linear-mf` and
/// `fig2`. The labels are exactly `x . v*`, so the particle risk gradient is
/// the mean-field one with the empirical second moment.
fn linear_setup(cfg: &RunConfig, seeds: &Seeds) -> Result<(Data, LinearMFConfig)> {
    let target = build_target(cfg, seeds)?;
    let Target::Linear(v_star) = &target else {
        bail!("{} needs a linear target", cfg.experiment);
    };
    let (train, _) = datasets(cfg, seeds, &target, "")?;
    let sigma = match &cfg.linear_mf.sigma {
        Some(rows) => {
            let d = cfg.data.input_dim;
            ensure!(rows.len() == d && rows.iter().all(|r| r.len() == d), "linear_mf.sigma must be {d} x {d}");
            Array2::from_shape_fn((d, d), |(i, j)| rows[i][j])
        }
        None => train.second_moment(),
    };
    let mf = LinearMFConfig {
        depth: cfg.net.depth,
        dt: cfg.flow.dt,
        horizon: cfg.flow.horizon,
        sigma,
        v_star: v_star.clone(),
        mem_stride: cfg.linear_mf.mem_stride,
        store_full_kernels: cfg.linear_mf.store_full_kernels,
    };
    Ok((train, mf))
}

fn linear_mf_columns(d: usize, depth: usize) -> Vec<String> {
    let mut c = cols(&["t"]);
    c.extend(numbered("v", d));
    c.extend((1..depth).map(|l| format!("c{l}")));
    c.push("risk".into());
    c
}

fn linear_mf(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    let (_, mf) = linear_setup(cfg, seeds)?;
    let traj = integrate_linear_mf(&mf)?;
    traj.write_csv(&out.register("linear_mf.csv", schema::LINEAR_MF, linear_mf_columns(mf.dim(), mf.depth)))?;
    let last = traj.v.last().context("empty trajectory")?;
    let mut s = Summary::default();
    s.put("final_risk", traj.risk.last());
    s.put("final_relative_error", (last - &mf.v_star).mapv(|x| x * x).sum().sqrt() / mf.v_star.dot(&mf.v_star).sqrt());
    Ok(s)
}

fn fig2(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    let (train, mf) = linear_setup(cfg, seeds)?;
    let traj = integrate_linear_mf(&mf)?;
    traj.write_csv(&out.register("linear_mf.csv", schema::LINEAR_MF, linear_mf_columns(mf.dim(), mf.depth)))?;

    let mut gf = cfg.flow.gf();
    gf.record_every = cfg.linear_mf.mem_stride;
    let widths = &cfg.sweep.widths;
    let particle_seeds: Vec<u64> = widths.iter().map(|m| seeds.get(&format!("particle/m{m}"))).collect();
    let runs = widths
        .par_iter()
        .zip(&particle_seeds)
        .map(|(&m, &seed)| Ok(particle_run(&train, mf.depth, m, &gf, seed)?))
        .collect::<Result<Vec<_>>>()?;

    let mut header = cols(&["width", "t"]);
    header.extend(numbered("v", mf.dim()));
    let mut rows = Vec::new();
    let mut dev_rows = Vec::new();
    let mut s = Summary::default();
    for (&m, run) in widths.iter().zip(&runs) {
        ensure!(run.times.len() == traj.times.len(), "particle and mean-field time grids differ at width {m}");
        for (t, v) in run.times.iter().zip(&run.v) {
            let mut row = vec![m.to_string(), num(*t)];
            row.extend(v.iter().map(|x| num(*x)));
            rows.push(row);
        }
        let dev = sup_relative_deviation(&run.v, &traj.v, &mf.v_star)?;
        dev_rows.push(vec![m.to_string(), num(dev)]);
        s.put(format!("sup_dev_m{m}"), dev);
    }
    out.write_csv("particles.csv", schema::PARTICLES, &header, &rows)?;
    out.write_csv("deviation.csv", schema::DEVIATION, &cols(&["width", "sup_rel_dev"]), &dev_rows)?;
    s.put("final_mf_risk", traj.risk.last());
    Ok(s)
}

fn kernels(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    let target = build_target(cfg, seeds)?;
    let (train, _) = datasets(cfg, seeds, &target, "")?;
    let net = init(cfg, cfg.net.depth, cfg.net.width, seeds.get("init"))?;
    let fin = integrate_with(&net, &train, cfg.flow.loss, &cfg.flow.gf(), |_| Ok(()))?;
    let y_gram = target_gram(train.y.view());
    let mut rows = Vec::new();
    let mut s = Summary::default();
    for (stage, state) in [("init", &net), ("final", &fin)] {
        let ladder = KernelLadder::compute(state, train.x.view())?;
        let mut grams: Vec<GramMatrix<f64>> = ladder
            .kappa
            .iter()
            .enumerate()
            .map(|(l, k)| GramMatrix::new(format!("kappa{l}_{stage}"), k.clone()))
            .collect::<nhl::Result<_>>()?;
        grams.push(GramMatrix::new(format!("theta_{stage}"), ladder.tangent(cfg.flow.beta))?);
        for g in &grams {
            g.write_csv(&out.register(&format!("{}.csv", g.label), schema::GRAM, vec![format!("{} x {} row-major entries", g.n(), g.n())]))?;
            let align = cka(g, &y_gram).ok();
            let norm = min_norm_in_span_or_ridge(g, train.y.view(), 0.0)?;
            rows.push(vec![
                stage.to_string(),
                g.label.clone(),
                num(g.trace()),
                num(g.min_eigenvalue()),
                opt(align),
                num(norm.value),
                num(norm.ridge),
            ]);
            s.put(format!("cka_{}", g.label), align);
        }
    }
    out.write_csv(
        "kernel_summary.csv",
        schema::KERNEL_SUMMARY,
        &cols(&["stage", "kernel", "trace", "min_eigenvalue", "cka_target", "min_norm", "ridge"]),
        &rows,
    )?;
    s.put("final_train_risk", empirical_risk(&fin, &train, cfg.flow.loss)?);
    Ok(s)
}

fn compress(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    let c = &cfg.compress;
    let mut teacher = init(cfg, cfg.net.depth, c.teacher_width, seeds.get("teacher"))?;
    if c.train_teacher {
        let target = build_target(cfg, seeds)?;
        let (train, _) = datasets(cfg, seeds, &target, "")?;
        teacher = integrate_with(&teacher, &train, cfg.flow.loss, &cfg.flow.gf(), |_| Ok(()))?;
    }
    let eval: Array2<f64> = cfg.data.dist.sample(&mut rng_from_seed(seeds.get("eval")), c.eval_n, cfg.data.input_dim);
    let table = mse_decay(&teacher, &c.m_out, c.trials, eval.view(), seeds.get("subsample"))?;
    table.write_csv(&out.register("decay.csv", schema::DECAY, cols(&["m_out", "trials", "mean_mse", "std_mse", "bound"])))?;
    let mut s = Summary::default();
    s.put("slope", table.slope);
    s.put("intercept", table.intercept);
    s.put("all_below_bound", table.rows.iter().all(|r| r.mean_mse <= r.bound));
    Ok(s)
}

fn rademacher(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    let r = &cfg.rademacher;
    let path = out.register(
        "rademacher.csv",
        schema::RADEMACHER,
        cols(&["L", "n", "M", "seed", "estimate", "stderr", "num_tau", "bound"]),
    );
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    let mut s = Summary::default();
    for &n in &r.sizes {
        let inputs: Array2<f64> = cfg.data.dist.sample(&mut rng_from_seed(seeds.get(&format!("inputs/n{n}"))), n, cfg.data.input_dim);
        for &depth in &r.depths {
            let seed = seeds.get(&format!("rademacher/L{depth}/n{n}"));
            let est = estimate_rademacher(depth, inputs.view(), r.norm, r.num_tau, &r.ascent, seed)?;
            est.append_csv(&path, depth, n, r.norm, seed)?;
            s.put(format!("estimate_L{depth}_n{n}"), est.estimate);
            s.put(format!("stderr_L{depth}_n{n}"), est.stderr);
            s.put(format!("bound_L{depth}_n{n}"), est.bound);
        }
    }
    Ok(s)
}

fn depth_sep(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    ensure!(
        matches!(cfg.data.target, TargetConfig::Pyramid | TargetConfig::RadialBump { .. }),
        "depth-sep needs a pyramid or radial_bump target"
    );
    let target = build_target(cfg, seeds)?;
    let (train, test) = datasets(cfg, seeds, &target, "")?;
    let members: Vec<(usize, f64, u64)> = cfg
        .depth_sep
        .depths
        .iter()
        .flat_map(|&l| {
            let seed = seeds.get(&format!("depth_sep/L{l}/init"));
            cfg.depth_sep.penalties.iter().map(move |&p| (l, p, seed))
        })
        .collect();
    let results = members
        .par_iter()
        .map(|&(depth, penalty, seed)| {
            let net = init(cfg, depth, cfg.net.width, seed)?;
            let mut gf = cfg.flow.gf();
            gf.weight_decay = penalty;
            let fin = integrate_with(&net, &train, cfg.flow.loss, &gf, |_| Ok(()))?;
            let complexity = fin.complexity_upper_bound(2.0)?;
            let test_risk = test.as_ref().map(|t| empirical_risk(&fin, t, cfg.flow.loss)).transpose()?;
            let bound = rademacher_bound(depth, train.len(), complexity, 1.0)?;
            Ok((depth, penalty, empirical_risk(&fin, &train, cfg.flow.loss)?, test_risk, complexity, bound))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|&(depth, penalty, train_risk, test_risk, complexity, bound)| {
            vec![depth.to_string(), num(penalty), num(train_risk), opt(test_risk), num(complexity), num(bound)]
        })
        .collect();
    out.write_csv(
        "frontier.csv",
        schema::FRONTIER,
        &cols(&["depth", "penalty", "train_risk", "test_risk", "complexity", "rademacher_bound"]),
        &rows,
    )?;
    let mut s = Summary::default();
    for &depth in &cfg.depth_sep.depths {
        let best = results
            .iter()
            .filter(|r| r.0 == depth)
            .filter_map(|r| r.3.or(Some(r.2)))
            .fold(f64::INFINITY, f64::min);
        s.put(format!("best_risk_L{depth}"), best);
    }
    Ok(s)
}

struct Fig3Run {
    rows: Vec<[f64; 5]>,
    init: Network,
    fin: Network,
    train: Data,
}

fn fig3(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    ensure!(cfg.net.depth >= 3, "fig3 needs depth >= 3 for the second hidden layer kernel");
    let target = build_target(cfg, seeds)?;
    let reps = cfg.sweep.replicates;
    let inputs: Vec<(Data, Option<Data>, u64)> = (0..reps)
        .map(|r| {
            let (train, test) = datasets(cfg, seeds, &target, &format!("rep{r}/"))?;
            Ok((train, test, seeds.get(&format!("rep{r}/init"))))
        })
        .collect::<Result<_>>()?;
    let runs = inputs
        .into_par_iter()
        .map(|(train, test, seed)| {
            let net = init(cfg, cfg.net.depth, cfg.net.width, seed)?;
            let y_gram = target_gram(train.y.view());
            let mut rows = Vec::new();
            let fin = integrate_with(&net, &train, cfg.flow.loss, &cfg.flow.gf(), |snap| {
                let ladder = KernelLadder::compute(snap.state, train.x.view())?;
                let align = |l: usize| -> nhl::Result<f64> { cka(&GramMatrix::new("k", ladder.kappa[l].clone())?, &y_gram) };
                let test_mse = test.as_ref().map(|t| mse(snap.state, t)).transpose()?;
                rows.push([snap.time, mse(snap.state, &train)?, test_mse.unwrap_or(f64::NAN), align(1)?, align(2)?]);
                Ok(())
            })?;
            Ok(Fig3Run { rows, init: net, fin, train })
        })
        .collect::<Result<Vec<_>>>()?;

    let header = cols(&["t", "train_mse", "test_mse", "cka_kappa1", "cka_kappa2"]);
    let fmt = |r: &[f64; 5]| r.iter().map(|v| if v.is_nan() { String::new() } else { num(*v) }).collect::<Vec<_>>();
    for (r, run) in runs.iter().enumerate() {
        out.write_csv(&format!("curves_rep{r}.csv"), schema::CURVES, &header, &run.rows.iter().map(fmt).collect::<Vec<_>>())?;
    }
    let len = runs[0].rows.len();
    let mean: Vec<[f64; 5]> = (0..len)
        .map(|k| {
            let mut acc = [0.0; 5];
            for run in &runs {
                for (a, v) in acc.iter_mut().zip(run.rows[k]) {
                    *a += v / reps as f64;
                }
            }
            acc
        })
        .collect();
    out.write_csv("curves_mean.csv", schema::CURVES, &header, &mean.iter().map(fmt).collect::<Vec<_>>())?;
    fig3_snapshots(cfg, &runs[0], out)?;

    let (first, last) = (mean[0], mean[len - 1]);
    let mut s = Summary::default();
    s.put("replicates", reps);
    s.put("mean_final_train_mse", last[1]);
    s.put("mean_final_test_mse", if last[2].is_nan() { None } else { Some(last[2]) });
    s.put("mean_initial_cka_kappa1", first[3]);
    s.put("mean_final_cka_kappa1", last[3]);
    s.put("mean_initial_cka_kappa2", first[4]);
    s.put("mean_final_cka_kappa2", last[4]);
    Ok(s)
}

/// Second-layer pre-activations on two training points, and, for scalar
/// inputs on an interval, the learned function and final `kappa(2)` on a grid.
fn fig3_snapshots(cfg: &RunConfig, run: &Fig3Run, out: &Output) -> Result<()> {
    let pair = run.train.x.slice(ndarray::s![..2.min(run.train.len()), ..]);
    let h_init = run.init.forward_batch(pair)?.h.swap_remove(1);
    let h_fin = run.fin.forward_batch(pair)?.h.swap_remove(1);
    let mut header = cols(&["neuron"]);
    for stage in ["init", "final"] {
        header.extend((1..=pair.nrows()).map(|k| format!("h2_x{k}_{stage}")));
    }
    let rows: Vec<Vec<String>> = (0..run.init.width())
        .map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(h_init.column(i).iter().chain(h_fin.column(i).iter()).map(|v| num(*v)));
            row
        })
        .collect();
    out.write_csv("preactivations.csv", schema::PREACTIVATIONS, &header, &rows)?;

    if let (InputDist::UniformInterval { lo, hi }, 1) = (cfg.data.dist, cfg.data.input_dim) {
        let grid = Array1::linspace(lo, hi, 100).insert_axis(Axis(1));
        let k2 = KernelLadder::compute(&run.fin, grid.view())?.kappa.swap_remove(2);
        let gram = GramMatrix::new("kappa2_final_grid", k2)?;
        gram.write_csv(&out.register("kappa2_final_grid.csv", schema::GRAM, vec!["100 x 100 row-major entries".into()]))?;
        let f0 = run.init.predict(grid.view())?;
        let f1 = run.fin.predict(grid.view())?;
        let target = build_target_values(cfg, &grid)?;
        let rows = (0..grid.nrows())
            .map(|k| vec![num(grid[[k, 0]]), num(target[k]), num(f0[k]), num(f1[k])])
            .collect::<Vec<_>>();
        out.write_csv("fit.csv", schema::FIT, &cols(&["x", "target", "f_init", "f_final"]), &rows)?;
    }
    Ok(())
}

fn build_target_values(cfg: &RunConfig, x: &Array2<f64>) -> Result<Array1<f64>> {
    let target = match &cfg.data.target {
        TargetConfig::Sin2x => Target::Sin2x,
        TargetConfig::Pyramid => Target::Pyramid,
        TargetConfig::RadialBump { eps0 } => Target::RadialBump(*eps0),
        other => bail!("fit grid is only written for closed-form targets, not {other:?}"),
    };
    Ok(target.eval_rows(x)?)
}

fn lln(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    let target = build_target(cfg, seeds)?;
    let (train, test) = datasets(cfg, seeds, &target, "")?;
    let eval = test.map_or_else(|| train.x.clone(), |t| t.x);
    let reference = cfg.sweep.reference_width;
    let mut widths = cfg.sweep.widths.clone();
    widths.push(reference);
    let members: Vec<(usize, usize, u64)> = (0..cfg.sweep.replicates)
        .flat_map(|r| widths.iter().map(move |&m| (r, m)).collect::<Vec<_>>())
        .map(|(r, m)| (r, m, seeds.get(&format!("rep{r}/m{m}"))))
        .collect();
    let outputs = members
        .par_iter()
        .map(|&(_, m, seed)| {
            let net = init(cfg, cfg.net.depth, m, seed)?;
            let mut f = Vec::new();
            integrate_with(&net, &train, cfg.flow.loss, &cfg.flow.gf(), |snap| {
                f.push(snap.state.predict(eval.view())?);
                Ok(())
            })?;
            Ok(f)
        })
        .collect::<Result<Vec<Vec<Array1<f64>>>>>()?;
    let per_rep = widths.len();
    let mut rows = Vec::new();
    let mut means = vec![0.0; per_rep - 1];
    for (r, chunk) in outputs.chunks(per_rep).enumerate() {
        let reference_f = &chunk[per_rep - 1];
        for (k, f) in chunk[..per_rep - 1].iter().enumerate() {
            let dev = f
                .iter()
                .zip(reference_f)
                .map(|(a, b)| (a - b).mapv(|v| v * v).mean().unwrap_or(0.0).sqrt())
                .fold(0.0, f64::max);
            rows.push(vec![widths[k].to_string(), r.to_string(), num(dev)]);
            means[k] += dev / cfg.sweep.replicates as f64;
        }
    }
    out.write_csv("lln.csv", schema::DEVIATION, &cols(&["width", "replicate", "sup_dev"]), &rows)?;
    let mut s = Summary::default();
    for (m, d) in widths.iter().zip(&means) {
        s.put(format!("mean_sup_dev_m{m}"), d);
    }
    s.put("monotone", means.windows(2).all(|w| w[1] < w[0]));
    Ok(s)
}

fn degeneracy(cfg: &RunConfig, seeds: &Seeds, out: &Output) -> Result<Summary> {
    ensure!(cfg.net.depth >= 3, "degeneracy needs depth >= 3");
    let target = build_target(cfg, seeds)?;
    let (train, test) = datasets(cfg, seeds, &target, "")?;
    let eval = test.map_or_else(|| train.x.clone(), |t| t.x);
    let widths = &cfg.sweep.widths;
    let width_seeds: Vec<u64> = widths.iter().map(|m| seeds.get(&format!("m{m}/init"))).collect();
    let spreads = widths
        .iter()
        .zip(&width_seeds)
        .map(|(&m, &seed)| {
            let net = init(cfg, cfg.net.depth, m, seed)?;
            let fin = integrate_with(&net, &train, cfg.flow.loss, &cfg.flow.gf(), |_| Ok(()))?;
            let h2 = fin.forward_batch(eval.view())?.h.swap_remove(1);
            Ok(h2.std_axis(Axis(1), 0.0))
        })
        .collect::<Result<Vec<Array1<f64>>>>()?;
    let mut rows = Vec::new();
    let mut s = Summary::default();
    for (&m, sd) in widths.iter().zip(&spreads) {
        rows.extend(sd.iter().enumerate().map(|(k, v)| vec![m.to_string(), k.to_string(), num(*v)]));
        s.put(format!("mean_std_h2_m{m}"), sd.mean());
    }
    out.write_csv("neuron_spread.csv", schema::NEURON_SPREAD, &cols(&["width", "x_index", "std_h2"]), &rows)?;
    let (first, last) = (spreads[0].mean().unwrap_or(0.0), spreads[spreads.len() - 1].mean().unwrap_or(0.0));
    s.put("std_ratio", first / last);
    s.put("predicted_ratio", (widths[widths.len() - 1] as f64 / widths[0] as f64).sqrt());
    s.put("time", cfg.flow.horizon);
    Ok(s)
}
