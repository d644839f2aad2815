//! Rademacher complexity of group-norm balls of ReLU networks, and the
//! depth-separation targets.
//!
//! For inputs in the unit ball, the class of `L`-layer functions whose ladder
//! complexity is at most `M` has empirical Rademacher complexity at most
//! `M (sqrt(2 L log(2 J)) + 1) / sqrt(n)`. [`estimate_rademacher`] approaches
//! the supremum from below by projected gradient ascent over finite-width
//! networks with `prod_l M(l)_{m,2} <= M`.

use std::fs::OpenOptions;
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pyramid, radial_bump};
use crate::error::{NhlError, Result};
use crate::gradflow::rhs_from_residuals;
use crate::net::{init_network, ActivationKind, InitSpec, NetworkState};
use crate::seed::{derive_seed, rng_from_seed};

/// `M (sqrt(2 L log(2 J)) + 1) / sqrt(n)`.
pub fn rademacher_bound(depth: usize, n: usize, m_norm: f64, j_sigma: f64) -> Result<f64> {
    if depth < 2 {
        return Err(NhlError::InvalidShape(format!("depth L = {depth} < 2")));
    }
    if n == 0 {
        return Err(NhlError::EmptyDataset);
    }
    if !(m_norm >= 0.0) || !m_norm.is_finite() {
        return Err(NhlError::InvalidParameter(format!("M = {m_norm} must be >= 0")));
    }
    if !(j_sigma >= 1.0) || !j_sigma.is_finite() {
        return Err(NhlError::InvalidParameter(format!("J = {j_sigma} must be >= 1")));
    }
    let root = (2.0 * depth as f64 * (2.0 * j_sigma).ln()).sqrt();
    Ok(m_norm * (root + 1.0) / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentConfig {
    pub width: usize,
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig { width: 16, steps: 100, lr: 0.2, restarts: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub num_tau: usize,
    pub bound: f64,
}

impl RadEstimate {
    /// Appends a row keyed by `(L, n, M, seed)`, writing the header when the
    /// file is new.
    pub fn append_csv(&self, path: &Path, depth: usize, n: usize, m_norm: f64, seed: u64) -> Result<()> {
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            w.write_record(["L", "n", "M", "seed", "estimate", "stderr", "num_tau", "bound"])?;
        }
        w.write_record([
            depth.to_string(),
            n.to_string(),
            m_norm.to_string(),
            seed.to_string(),
            self.estimate.to_string(),
            self.stderr.to_string(),
            self.num_tau.to_string(),
            self.bound.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Rescales every layer of a bias-free ReLU network to group norm
/// `target^(1/L)` (p = 2). Layers with zero norm are left alone. The output
/// changes by the factor `target / prod_l M(l)`, so it is unchanged whenever
/// the product already equals `target`.
pub fn balance_layers(state: &mut NetworkState<f64>, target: f64) -> Result<()> {
    if !state.activation.is_positively_homogeneous() {
        return Err(NhlError::Unsupported("a positively homogeneous activation".into()));
    }
    if state.has_bias() {
        return Err(NhlError::Unsupported("a network without biases".into()));
    }
    let depth = state.depth();
    let per_layer = target.powf(1.0 / depth as f64);
    for l in 1..=depth {
        let g = state.group_norm(l, 2.0)?;
        if g > 0.0 {
            state.scale_layer(l, per_layer / g);
        }
    }
    Ok(())
}

fn correlation(state: &NetworkState<f64>, inputs: ArrayView2<f64>, tau: &Array1<f64>) -> Result<f64> {
    Ok(state.predict(inputs)?.dot(tau) / tau.len() as f64)
}

/// Best value of `(1/n) sum_k tau_k f(x_k)` found over `cfg.restarts` ascents.
fn maximize_correlation(
    depth: usize,
    inputs: ArrayView2<f64>,
    tau: &Array1<f64>,
    m_norm: f64,
    cfg: &AscentConfig,
    seed: u64,
) -> Result<f64> {
    let residual = tau.mapv(|t| -t);
    let mut best = f64::NEG_INFINITY;
    for r in 0..cfg.restarts {
        let spec = InitSpec::standard(depth, cfg.width, inputs.ncols(), ActivationKind::Relu, derive_seed(seed, &format!("restart{r}")));
        let mut net = init_network::<f64>(&spec)?;
        balance_layers(&mut net, m_norm)?;
        best = best.max(correlation(&net, inputs, tau)?);
        for _ in 0..cfg.steps {
            // The flow field for residuals -tau ascends the correlation.
            let step = rhs_from_residuals(&net, inputs, residual.view(), 0.0)?;
            net.apply_delta(cfg.lr, &step);
            balance_layers(&mut net, m_norm)?;
            best = best.max(correlation(&net, inputs, tau)?);
        }
    }
    Ok(best)
}

/// Monte Carlo lower estimate of the empirical Rademacher complexity of the
/// ReLU class with ladder complexity at most `m_norm`, on `inputs` (rows, all
/// in the unit ball).
pub fn estimate_rademacher(
    depth: usize,
    inputs: ArrayView2<f64>,
    m_norm: f64,
    num_tau: usize,
    cfg: &AscentConfig,
    seed: u64,
) -> Result<RadEstimate> {
    let n = inputs.nrows();
    let bound = rademacher_bound(depth, n, m_norm, ActivationKind::LIPSCHITZ)?;
    if num_tau == 0 {
        return Err(NhlError::InvalidParameter("num_tau must be >= 1".into()));
    }
    if cfg.width == 0 || cfg.restarts == 0 {
        return Err(NhlError::InvalidParameter("ascent width and restarts must be >= 1".into()));
    }
    if let Some(k) = inputs.rows().into_iter().position(|x| x.dot(&x) > 1.0 + 1e-12) {
        return Err(NhlError::Precondition(format!("input {k} lies outside the unit ball")));
    }
    if m_norm == 0.0 {
        return Ok(RadEstimate { estimate: 0.0, stderr: 0.0, num_tau, bound });
    }
    let maxima = (0..num_tau)
        .into_par_iter()
        .map(|k| {
            let tau_seed = derive_seed(seed, &format!("rademacher/tau{k}"));
            let mut rng = rng_from_seed(tau_seed);
            let tau = Array1::from_shape_simple_fn(n, || if rng.random::<bool>() { 1.0 } else { -1.0 });
            maximize_correlation(depth, inputs, &tau, m_norm, cfg, tau_seed)
        })
        .collect::<Result<Vec<f64>>>()?;
    let k = maxima.len() as f64;
    let mean = maxima.iter().sum::<f64>() / k;
    let stderr = if maxima.len() > 1 {
        (maxima.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    Ok(RadEstimate { estimate: mean, stderr, num_tau, bound })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSepKind {
    /// `max{1 - |x|_1, 0}`.
    Pyramid,
    /// 1 inside radius `eps0`, falling linearly to 0 at radius 1.
    RadialBump,
}

pub fn depth_sep_target(kind: DepthSepKind, x: ArrayView1<f64>, eps0: f64) -> Result<f64> {
    match kind {
        DepthSepKind::Pyramid => Ok(pyramid(x)),
        DepthSepKind::RadialBump => radial_bump(x, eps0),
    }
}
