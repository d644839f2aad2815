//! Compression of a wide network by independent per-layer neuron sampling.
//!
//! Each hidden layer draws `m_out` neuron indices uniformly with replacement;
//! the narrow network keeps the teacher's weights between the sampled
//! neurons. Because every layer sum is a `1/m` average, the narrow network is
//! a Monte Carlo estimate of the teacher whose squared error decays as
//! `O(1/m_out)`.

use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{NhlError, Result};
use crate::net::NetworkState;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from_seed};

/// Builds the narrow network selected by `indices[l-1]`, the neuron indices of
/// hidden layer `l`.
pub fn subsample_with_indices<F: Scalar>(teacher: &NetworkState<F>, indices: &[Vec<usize>]) -> Result<NetworkState<F>> {
    let n_hidden = teacher.depth() - 1;
    if indices.len() != n_hidden {
        return Err(NhlError::DimensionMismatch { expected: n_hidden, got: indices.len() });
    }
    let m_out = indices[0].len();
    if m_out == 0 {
        return Err(NhlError::InvalidParameter("m_out must be >= 1".into()));
    }
    let m = teacher.width();
    for idx in indices {
        if idx.len() != m_out {
            return Err(NhlError::InvalidShape("index sets of unequal size".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(NhlError::InvalidParameter(format!("neuron index {bad} out of range for width {m}")));
        }
    }
    let z = teacher.z.select(Axis(0), &indices[0]);
    let w = teacher
        .w
        .iter()
        .enumerate()
        .map(|(l, wl)| wl.select(Axis(0), &indices[l + 1]).select(Axis(1), &indices[l]))
        .collect();
    let a = teacher.a.select(Axis(0), &indices[n_hidden - 1]);
    let b = teacher
        .b
        .as_ref()
        .map(|b| b.iter().zip(indices).map(|(bl, idx)| bl.select(Axis(0), idx)).collect());
    Ok(NetworkState { z, w, a, b, activation: teacher.activation })
}

/// Draws the index multisets for [`subsample_network`].
pub fn sample_indices(m_teacher: usize, m_out: usize, layers: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng_from_seed(seed);
    (0..layers).map(|_| (0..m_out).map(|_| rng.random_range(0..m_teacher)).collect()).collect()
}

/// Random width-`m_out` compression of `teacher`, layers sampled independently
/// with replacement.
pub fn subsample_network<F: Scalar>(teacher: &NetworkState<F>, m_out: usize, seed: u64) -> Result<NetworkState<F>> {
    if m_out == 0 {
        return Err(NhlError::InvalidParameter("m_out must be >= 1".into()));
    }
    let indices = sample_indices(teacher.width(), m_out, teacher.depth() - 1, seed);
    subsample_with_indices(teacher, &indices)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayRow {
    pub m_out: usize,
    pub trials: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    /// `(L-1)^2 M_nu (prod_l M(l)_{m,inf})^2 / m_out` for the teacher.
    pub bound: f64,
}

impl DecayRow {
    pub fn stderr(&self) -> f64 {
        self.std_mse / (self.trials as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayTable {
    pub rows: Vec<DecayRow>,
    /// Least-squares fit `log MSE = slope * log m + intercept`; `None` when some
    /// mean MSE is zero.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

impl DecayTable {
    /// Columns `m_out, trials, mean_mse, std_mse, bound`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["m_out", "trials", "mean_mse", "std_mse", "bound"])?;
        for r in &self.rows {
            w.write_record([
                r.m_out.to_string(),
                r.trials.to_string(),
                r.mean_mse.to_string(),
                r.std_mse.to_string(),
                r.bound.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(L-1)^2 M_nu (prod_l M(l)_{m,inf})^2 / m` with `M_nu` the mean of `|x|^2`
/// over `eval_inputs`; valid for 1-Lipschitz activations.
pub fn sampling_error_bound<F: Scalar>(teacher: &NetworkState<F>, eval_inputs: ArrayView2<F>, m_out: usize) -> Result<f64> {
    let l = teacher.depth() as f64;
    let m_nu = crate::data::mean_sq_norm(&eval_inputs.to_owned()).as_f64();
    let prod = teacher.complexity_upper_bound(f64::INFINITY)?.as_f64();
    Ok((l - 1.0).powi(2) * m_nu * prod * prod / m_out as f64)
}

/// Least-squares slope and intercept of `log y` against `log x`.
pub fn log_log_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() < 2 || x.len() != y.len() || y.iter().chain(x).any(|&v| !(v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Mean squared output error of random compressions against the teacher, for
/// each width in `m_list`. Trial `t` at width `m` uses the seed derived from
/// `seed` and `"subsample/m{m}/trial{t}"`.
pub fn mse_decay<F: Scalar>(
    teacher: &NetworkState<F>,
    m_list: &[usize],
    trials: usize,
    eval_inputs: ArrayView2<F>,
    seed: u64,
) -> Result<DecayTable> {
    if eval_inputs.nrows() == 0 {
        return Err(NhlError::EmptyDataset);
    }
    if m_list.is_empty() {
        return Err(NhlError::InvalidParameter("empty width list".into()));
    }
    if m_list.windows(2).any(|w| w[0] >= w[1]) || m_list[0] == 0 {
        return Err(NhlError::InvalidParameter("widths must be positive and strictly increasing".into()));
    }
    if trials < 2 {
        return Err(NhlError::InvalidParameter("need at least 2 trials".into()));
    }
    let reference = teacher.predict(eval_inputs)?;
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let mses = (0..trials)
            .into_par_iter()
            .map(|t| {
                let sub = subsample_network(teacher, m, derive_seed(seed, &format!("subsample/m{m}/trial{t}")))?;
                let f = sub.predict(eval_inputs)?;
                let n = f.len() as f64;
                Ok(f.iter().zip(reference.iter()).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum::<f64>() / n)
            })
            .collect::<Result<Vec<f64>>>()?;
        let k = mses.len() as f64;
        let mean = mses.iter().sum::<f64>() / k;
        let var = mses.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
        rows.push(DecayRow {
            m_out: m,
            trials,
            mean_mse: mean,
            std_mse: var.sqrt(),
            bound: sampling_error_bound(teacher, eval_inputs, m)?,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.m_out as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_mse).collect();
    let fit = log_log_fit(&xs, &ys);
    Ok(DecayTable { rows, slope: fit.map(|f| f.0), intercept: fit.map(|f| f.1) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_network, ActivationKind, InitSpec};
    use ndarray::array;

    #[test]
    fn identity_indices_reproduce_teacher() {
        let spec = InitSpec { bias_enabled: true, ..InitSpec::standard(4, 7, 2, ActivationKind::Tanh, 3) };
        let teacher = init_network::<f64>(&spec).unwrap();
        let ident: Vec<usize> = (0..7).collect();
        let sub = subsample_with_indices(&teacher, &vec![ident; 3]).unwrap();
        assert_eq!(sub, teacher);
    }

    #[test]
    fn submatrix_layout() {
        let teacher = NetworkState::new(
            array![[1.0], [2.0], [3.0]],
            vec![array![[11.0, 12.0, 13.0], [21.0, 22.0, 23.0], [31.0, 32.0, 33.0]]],
            array![-1.0, -2.0, -3.0],
            None,
            ActivationKind::Relu,
        )
        .unwrap();
        let sub = subsample_with_indices(&teacher, &[vec![2, 0], vec![1, 1]]).unwrap();
        assert_eq!(sub.z, array![[3.0], [1.0]]);
        assert_eq!(sub.w[0], array![[23.0, 21.0], [23.0, 21.0]]);
        assert_eq!(sub.a, array![-2.0, -2.0]);
    }

    #[test]
    fn rejects_bad_requests() {
        let teacher = init_network::<f64>(&InitSpec::standard(3, 5, 2, ActivationKind::Relu, 0)).unwrap();
        assert!(subsample_network(&teacher, 0, 1).is_err());
        assert!(subsample_with_indices(&teacher, &[vec![0], vec![5]]).is_err());
        assert!(subsample_with_indices(&teacher, &[vec![0]]).is_err());
        let x = array![[0.1, 0.2]];
        assert!(mse_decay(&teacher, &[4, 2], 3, x.view(), 0).is_err());
        assert!(mse_decay(&teacher, &[2, 4], 1, x.view(), 0).is_err());
        assert!(mse_decay(&teacher, &[2, 4], 3, ndarray::Array2::<f64>::zeros((0, 2)).view(), 0).is_err());
    }

    #[test]
    fn zero_teacher_has_no_error_and_no_slope() {
        let mut teacher = init_network::<f64>(&InitSpec::standard(3, 32, 2, ActivationKind::Relu, 0)).unwrap();
        teacher.a.fill(0.0);
        let x = array![[0.1, 0.2], [0.5, -0.3]];
        let table = mse_decay(&teacher, &[2, 4, 8], 3, x.view(), 9).unwrap();
        assert!(table.rows.iter().all(|r| r.mean_mse == 0.0));
        assert_eq!(table.slope, None);
    }

    #[test]
    fn log_log_fit_recovers_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.0)).collect();
        let (s, c) = log_log_fit(&x, &y).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
        assert!((c - 3f64.ln()).abs() < 1e-12);
    }
}
