//! Run configuration: per-experiment presets, overlaid by a JSON file, then by
//! `--set key.path=value` pairs, then by typed flags.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nhl::complexity::AscentConfig;
use nhl::data::InputDist;
use nhl::gradflow::{GFConfig, Integrator, LossKind};
use nhl::ActivationKind;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Train,
    LinearMf,
    Kernels,
    Compress,
    Rademacher,
    DepthSep,
    Fig2,
    Fig3,
    Lln,
    Degeneracy,
}

impl Experiment {
    pub const ALL: [Experiment; 10] = [
        Experiment::Train,
        Experiment::LinearMf,
        Experiment::Kernels,
        Experiment::Compress,
        Experiment::Rademacher,
        Experiment::DepthSep,
        Experiment::Fig2,
        Experiment::Fig3,
        Experiment::Lln,
        Experiment::Degeneracy,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::LinearMf => "linear-mf",
            Experiment::Kernels => "kernels",
            Experiment::Compress => "compress",
            Experiment::Rademacher => "rademacher",
            Experiment::DepthSep => "depth-sep",
            Experiment::Fig2 => "fig2",
            Experiment::Fig3 => "fig3",
            Experiment::Lln => "lln",
            Experiment::Degeneracy => "degeneracy",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub depth: usize,
    pub width: usize,
    pub activation: ActivationKind,
    pub std_a: f64,
    pub std_z: f64,
    pub std_w: f64,
    pub std_b: f64,
    pub bias_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    /// `x . v*`; a random unit `v*` is drawn when none is given.
    Linear { v_star: Option<Vec<f64>> },
    Sin2x,
    Pyramid,
    RadialBump { eps0: f64 },
    /// A randomly initialised network with the `net` depth and activation.
    Teacher { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dist: InputDist,
    pub input_dim: usize,
    pub n: usize,
    pub test_n: usize,
    pub target: TargetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dt: f64,
    pub horizon: f64,
    pub integrator: Integrator,
    pub beta: f64,
    pub record_every: usize,
    pub weight_decay: f64,
    pub loss: LossKind,
}

impl FlowConfig {
    pub fn gf(&self) -> GFConfig {
        GFConfig {
            dt: self.dt,
            horizon: self.horizon,
            integrator: self.integrator,
            beta: self.beta,
            record_every: self.record_every,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearMfSection {
    /// Fine steps per coarse memory node.
    pub mem_stride: usize,
    pub store_full_kernels: bool,
    /// Input second moment; the training set's empirical one when absent.
    pub sigma: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressConfig {
    pub teacher_width: usize,
    /// Train the teacher by gradient flow on the dataset (using `flow`)
    /// before compressing it.
    pub train_teacher: bool,
    pub m_out: Vec<usize>,
    pub trials: usize,
    pub eval_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RademacherConfig {
    pub depths: Vec<usize>,
    pub sizes: Vec<usize>,
    pub norm: f64,
    pub num_tau: usize,
    pub ascent: AscentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthSepConfig {
    pub depths: Vec<usize>,
    pub penalties: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub widths: Vec<usize>,
    /// Width of the reference run in `lln`.
    pub reference_width: usize,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out: PathBuf,
    pub net: NetConfig,
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub linear_mf: LinearMfSection,
    pub compress: CompressConfig,
    pub rademacher: RademacherConfig,
    pub depth_sep: DepthSepConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Defaults for `experiment`.
    pub fn preset(experiment: Experiment) -> RunConfig {
        let mut cfg = RunConfig {
            experiment,
            seed: 0,
            out: PathBuf::from("out").join(experiment.tag()),
            net: NetConfig {
                depth: 3,
                width: 128,
                activation: ActivationKind::Tanh,
                std_a: 1.0,
                std_z: 1.0,
                std_w: 1.0,
                std_b: 1.0,
                bias_enabled: false,
            },
            data: DataConfig {
                dist: InputDist::Gaussian,
                input_dim: 2,
                n: 32,
                test_n: 0,
                target: TargetConfig::Sin2x,
            },
            flow: FlowConfig {
                dt: 1e-3,
                horizon: 1.0,
                integrator: Integrator::Rk4,
                beta: 0.0,
                record_every: 10,
                weight_decay: 0.0,
                loss: LossKind::Squared,
            },
            linear_mf: LinearMfSection { mem_stride: 10, store_full_kernels: false, sigma: None },
            compress: CompressConfig { teacher_width: 2048, train_teacher: true, m_out: vec![8, 16, 32, 64, 128, 256, 512], trials: 20, eval_n: 200 },
            rademacher: RademacherConfig {
                depths: vec![2, 3],
                sizes: vec![64, 256],
                norm: 1.0,
                num_tau: 64,
                ascent: AscentConfig::default(),
            },
            depth_sep: DepthSepConfig {
                depths: vec![2, 3],
                penalties: vec![0.0, 1e-3, 1e-2, 1e-1],
            },
            sweep: SweepConfig { widths: vec![64, 256, 1024], reference_width: 2048, replicates: 3 },
        };
        let euler = |flow: &mut FlowConfig, dt: f64, horizon: f64| {
            flow.integrator = Integrator::Euler;
            flow.dt = dt;
            flow.horizon = horizon;
        };
        let two_pi = 2.0 * std::f64::consts::PI;
        match experiment {
            Experiment::Train => {
                cfg.net.activation = ActivationKind::Relu;
                cfg.net.bias_enabled = true;
                cfg.data = DataConfig {
                    dist: InputDist::UniformInterval { lo: 0.0, hi: two_pi },
                    input_dim: 1,
                    n: 20,
                    test_n: 200,
                    target: TargetConfig::Sin2x,
                };
                euler(&mut cfg.flow, 0.02, 20.0);
            }
            Experiment::LinearMf | Experiment::Fig2 => {
                cfg.net.activation = ActivationKind::Identity;
                cfg.data = DataConfig {
                    dist: InputDist::Gaussian,
                    input_dim: 10,
                    n: 50,
                    test_n: 0,
                    target: TargetConfig::Linear { v_star: None },
                };
                euler(&mut cfg.flow, 1e-3, 5.0);
                cfg.flow.record_every = cfg.linear_mf.mem_stride;
                cfg.sweep.widths = vec![64, 2048];
            }
            Experiment::Kernels => {
                cfg.net.width = 256;
                cfg.flow.horizon = 1.0;
            }
            Experiment::Compress => {
                cfg.net.activation = ActivationKind::Relu;
                cfg.data.input_dim = 5;
                euler(&mut cfg.flow, 0.05, 5.0);
            }
            Experiment::Rademacher => {
                cfg.net.activation = ActivationKind::Relu;
                cfg.data.dist = InputDist::UnitBall;
                cfg.data.input_dim = 3;
            }
            Experiment::DepthSep => {
                cfg.net.activation = ActivationKind::Relu;
                cfg.net.width = 64;
                cfg.data = DataConfig {
                    dist: InputDist::UniformInterval { lo: -1.0, hi: 1.0 },
                    input_dim: 2,
                    n: 200,
                    test_n: 500,
                    target: TargetConfig::Pyramid,
                };
                euler(&mut cfg.flow, 0.01, 10.0);
                cfg.flow.record_every = 100;
            }
            Experiment::Fig3 => {
                cfg.net.activation = ActivationKind::Relu;
                cfg.net.width = 512;
                cfg.net.bias_enabled = true;
                cfg.data = DataConfig {
                    dist: InputDist::UniformInterval { lo: 0.0, hi: two_pi },
                    input_dim: 1,
                    n: 20,
                    test_n: 200,
                    target: TargetConfig::Sin2x,
                };
                euler(&mut cfg.flow, 0.02, 150.0);
                cfg.flow.record_every = 250;
                cfg.sweep.replicates = 10;
            }
            Experiment::Lln => {
                cfg.data.n = 20;
                cfg.data.test_n = 50;
                euler(&mut cfg.flow, 0.02, 2.0);
                cfg.flow.record_every = 5;
            }
            Experiment::Degeneracy => {
                cfg.net.depth = 4;
                cfg.data.n = 10;
                cfg.data.test_n = 8;
                euler(&mut cfg.flow, 0.05, 1.0);
                cfg.flow.record_every = 20;
                cfg.sweep.widths = vec![256, 4096];
            }
        }
        cfg
    }

    /// Preset, then `file`, then `set` (`key.path=json`), then `flags`.
    pub fn resolve(experiment: Experiment, file: Option<&Path>, set: &[String], flags: &[(String, Value)]) -> Result<RunConfig> {
        let mut root = serde_json::to_value(RunConfig::preset(experiment))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !patch.is_object() {
                bail!("config {} must be a JSON object", path.display());
            }
            if let Some(tag) = patch.get("experiment") {
                if tag != &Value::String(experiment.tag().into()) {
                    bail!("config {} is for experiment {tag}, not {experiment}", path.display());
                }
            }
            merge(&mut root, patch);
        }
        for item in set {
            let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got {item:?}"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key, value)?;
        }
        for (key, value) in flags {
            set_path(&mut root, key, value.clone())?;
        }
        let cfg: RunConfig = serde_json::from_value(root).context("invalid config")?;
        if cfg.experiment != experiment {
            bail!("config experiment {} does not match subcommand {experiment}", cfg.experiment);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.depth < 2 {
            bail!("net.depth must be >= 2");
        }
        if self.net.width == 0 || self.data.input_dim == 0 || self.data.n == 0 {
            bail!("net.width, data.input_dim and data.n must be positive");
        }
        if let TargetConfig::Linear { v_star: Some(v) } = &self.data.target {
            if v.len() != self.data.input_dim {
                bail!("data.target.v_star has length {}, expected {}", v.len(), self.data.input_dim);
            }
        }
        for (name, list) in [("sweep.widths", &self.sweep.widths), ("compress.m_out", &self.compress.m_out)] {
            if list.is_empty() || list.contains(&0) {
                bail!("{name} must be a non-empty list of positive widths");
            }
        }
        if self.sweep.replicates == 0 {
            bail!("sweep.replicates must be >= 1");
        }
        if self.experiment == Experiment::Lln && self.sweep.widths.iter().any(|&m| m >= self.sweep.reference_width) {
            bail!("sweep.widths must be below sweep.reference_width");
        }
        self.flow.gf().validate()?;
        Ok(())
    }
}

/// Recursive object merge. An object whose `kind` differs from the base's
/// replaces it wholesale, so switching enum variants drops stale fields.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let switches_kind = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if switches_kind {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty config key {path:?}"))?;
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(*part))
            .ok_or_else(|| anyhow!("unknown config key {:?}", parts[..=i].join(".")))?;
    }
    let obj: &mut Map<String, Value> = cur.as_object_mut().ok_or_else(|| anyhow!("config key {path:?} is not inside an object"))?;
    match obj.get_mut(leaf) {
        Some(slot) => merge(slot, value),
        None => {
            obj.insert(leaf.to_string(), value);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_round_trip_and_validate() {
        for e in Experiment::ALL {
            let cfg = RunConfig::preset(e);
            cfg.validate().unwrap();
            let back: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn flags_win_over_set_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"net": {"width": 7, "depth": 4}, "seed": 3}"#).unwrap();
        let cfg = RunConfig::resolve(
            Experiment::Train,
            Some(&path),
            &["net.width=9".into(), "flow.integrator=rk4".into()],
            &[("net.width".into(), json!(11))],
        )
        .unwrap();
        assert_eq!(cfg.net.width, 11);
        assert_eq!(cfg.net.depth, 4);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.flow.integrator, Integrator::Rk4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(Experiment::Train, None, &["net.widht=3".into()], &[]).is_err());
        assert!(RunConfig::resolve(Experiment::Train, None, &["nope.width=3".into()], &[]).is_err());
        assert!(RunConfig::resolve(Experiment::Train, None, &["flow.ascent=3".into()], &[]).is_err());
        assert!(RunConfig::resolve(Experiment::Train, None, &["data.dist.lo=x".into()], &[]).is_err());
    }

    #[test]
    fn switching_variants_drops_stale_fields() {
        let cfg = RunConfig::resolve(Experiment::Train, None, &[r#"data.target={"kind":"radial_bump","eps0":0.3}"#.into()], &[])
            .unwrap();
        assert_eq!(cfg.data.target, TargetConfig::RadialBump { eps0: 0.3 });
        let cfg = RunConfig::resolve(Experiment::Train, None, &[r#"data.dist={"kind":"gaussian"}"#.into()], &[]).unwrap();
        assert_eq!(cfg.data.dist, InputDist::Gaussian);
    }

    #[test]
    fn mismatched_experiment_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"experiment": "fig2"}"#).unwrap();
        assert!(RunConfig::resolve(Experiment::Fig3, Some(&path), &[], &[]).is_err());
        assert!(RunConfig::resolve(Experiment::Fig2, Some(&path), &[], &[]).is_ok());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::resolve(Experiment::Train, None, &[], &[("net.depth".into(), json!(1))]).is_err());
        assert!(RunConfig::resolve(Experiment::Train, None, &[], &[("flow.dt".into(), json!(-1.0))]).is_err());
        assert!(RunConfig::resolve(Experiment::Fig2, None, &["data.target.v_star=[1.0]".into()], &[]).is_err());
    }
}
