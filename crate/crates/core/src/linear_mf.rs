//! Mean-field dynamics of deep linear networks trained on a linear target.
//!
//! With identity activation the output is `f_t(x) = v_t . x` and the layer
//! kernels reduce to two-time tables `K(l)_{t,s}` (`d x d`) and `c(l)_{t,s}`
//! (scalars), driven by the residual `zeta_t = Sigma (v_t - v*)`:
//!
//! ```text
//! dv/dt = -(sum_{l=1..L} c(l)_{t,t} K(l-1)_{t,t}) zeta_t,   K(0) = I, c(L) = 1
//!
//! K(l)_{t,s} = int_0^t int_0^s c(l)_{r,p} K(l-1)_{t,r} zeta_r zeta_p^T K(l-1)_{p,s}     l = 2..L-1
//! c(l)_{t,s} = int_0^t int_0^s c(l+1)_{t,r} c(l+1)_{s,p} zeta_r^T K(l)_{r,p} zeta_p     l = 1..L-2
//!
//! K(1)_{t,s}   = I + G_t^T + G_s + int_0^t int_0^s c(1)_{r,p} zeta_r zeta_p^T
//!     G_t = int_0^t g_p zeta_p^T dp,   g_p = int_0^p c(2)_{p,r} (I + G_r) zeta_r dr
//! c(L-1)_{t,s} = 1 + E_t + E_s + int_0^t int_0^s zeta_r^T K(L-1)_{r,p} zeta_p
//!     E_t = int_0^t e_p . zeta_p dp,   e_p = int_0^p (1 + E_r) K(L-2)_{p,r} zeta_r dr
//! ```
//!
//! starting from `v_0 = 0`. The boundary terms follow from writing the
//! first-layer field as `U(1)_t = Z_0 - int Q(1) zeta` and the last adjoint as
//! `Q(L-1)_t = A_0 - int U(L-1) . zeta` with standard Gaussian `Z_0, A_0`.
//! Middle layers start from zero and stay there, so for `L >= 4` the solution
//! is `v_t = 0`.
//!
//! Time is discretised on a coarse grid `t_n = n * dt * mem_stride`. Two-time
//! integrals use the composite trapezoid rule on that grid; a new grid row is
//! solved by fixed-point sweeps (its self-dependence carries a factor of the
//! coarse step). Between nodes `v` is advanced by `mem_stride` RK4 steps of size
//! `dt` with the kernel sum frozen at the left node, so the scheme is first
//! order in the coarse step.
//!
//! Only the products `K(l)_{t,s} zeta_s` (`s <= t`) and the diagonals
//! `K(l)_{t,t}` are stored, which keeps memory at `O(N^2 d)` per level for `N`
//! coarse nodes; full matrices can be kept for inspection.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{NhlError, Result};
use crate::gradflow::{integrate_with, GFConfig, LossKind};
use crate::net::{init_network, ActivationKind, InitSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMFConfig {
    pub depth: usize,
    pub dt: f64,
    pub horizon: f64,
    pub sigma: Array2<f64>,
    pub v_star: Array1<f64>,
    pub mem_stride: usize,
    /// Keep every `K(l)_{t,s}` as a full matrix (costs `O(N^2 d^2)` memory).
    #[serde(default)]
    pub store_full_kernels: bool,
}

/// Refuse to allocate grids above this size.
pub const MAX_GRID_BYTES: usize = 3 << 30;

impl LinearMFConfig {
    pub fn dim(&self) -> usize {
        self.v_star.len()
    }

    pub fn coarse_step(&self) -> f64 {
        self.dt * self.mem_stride as f64
    }

    pub fn fine_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn coarse_nodes(&self) -> usize {
        self.fine_steps() / self.mem_stride.max(1)
    }

    pub fn estimated_grid_bytes(&self) -> usize {
        let n = self.coarse_nodes() + 1;
        let d = self.dim();
        let levels = self.depth.saturating_sub(1);
        let per_entry = d + 2 + if self.store_full_kernels { d * d } else { 0 };
        levels * (n * (n + 1) / 2) * per_entry * 8 + levels * n * d * d * 8
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(NhlError::InvalidShape("d = 0".into()));
        }
        if self.depth < 3 {
            return Err(NhlError::InvalidShape(format!("depth L = {} < 3", self.depth)));
        }
        if self.sigma.dim() != (d, d) {
            return Err(NhlError::InvalidShape(format!("Sigma has shape {:?}, expected ({d}, {d})", self.sigma.dim())));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(NhlError::InvalidParameter(format!("dt = {}, T = {} must be positive", self.dt, self.horizon)));
        }
        if self.mem_stride == 0 {
            return Err(NhlError::InvalidParameter("mem_stride must be >= 1".into()));
        }
        if self.coarse_step() > self.horizon * (1.0 + 1e-12) {
            return Err(NhlError::InvalidParameter(format!(
                "dt * mem_stride = {} exceeds T = {}",
                self.coarse_step(),
                self.horizon
            )));
        }
        if (self.fine_steps() as f64 * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(NhlError::InvalidParameter(format!("T = {} is not a multiple of dt = {}", self.horizon, self.dt)));
        }
        if self.fine_steps() % self.mem_stride != 0 {
            return Err(NhlError::InvalidParameter(format!(
                "T / dt = {} is not a multiple of mem_stride = {}",
                self.fine_steps(),
                self.mem_stride
            )));
        }
        if self.sigma.iter().chain(self.v_star.iter()).any(|v| !v.is_finite()) {
            return Err(NhlError::InvalidParameter("Sigma and v* must be finite".into()));
        }
        let scale = self.sigma.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        let asym = (&self.sigma - &self.sigma.t()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if asym > 1e-12 * scale {
            return Err(NhlError::InvalidParameter("Sigma is not symmetric".into()));
        }
        let trace = self.sigma.diag().sum();
        if min_eigenvalue(&self.sigma) < -1e-10 * trace.abs().max(f64::MIN_POSITIVE) {
            return Err(NhlError::InvalidParameter("Sigma is not positive semi-definite".into()));
        }
        if self.estimated_grid_bytes() > MAX_GRID_BYTES {
            return Err(NhlError::InvalidParameter(format!(
                "memory grids would need ~{} MiB; increase mem_stride",
                self.estimated_grid_bytes() >> 20
            )));
        }
        Ok(())
    }
}

fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `zeta = Sigma (v - v*)`.
pub fn residual(v: &Array1<f64>, sigma: &Array2<f64>, v_star: &Array1<f64>) -> Result<Array1<f64>> {
    if v.len() != v_star.len() {
        return Err(NhlError::DimensionMismatch { expected: v_star.len(), got: v.len() });
    }
    if sigma.dim() != (v.len(), v.len()) {
        return Err(NhlError::DimensionMismatch { expected: v.len(), got: sigma.nrows() });
    }
    Ok(sigma.dot(&(v - v_star)))
}

/// Lower-triangular two-time table: row `n` holds entries `(n, k)` for
/// `k = 0..=n`, each a block of `width` values.
#[derive(Debug, Clone, Default)]
struct TriGrid {
    width: usize,
    rows: Vec<Vec<f64>>,
}

impl TriGrid {
    fn new(width: usize) -> Self {
        TriGrid { width, rows: Vec::new() }
    }

    #[inline]
    fn at(&self, n: usize, k: usize) -> &[f64] {
        &self.rows[n][k * self.width..(k + 1) * self.width]
    }

    /// Symmetric scalar lookup.
    #[inline]
    fn sym(&self, n: usize, k: usize) -> f64 {
        if k <= n {
            self.rows[n][k]
        } else {
            self.rows[k][n]
        }
    }
}

/// Trapezoid weight of node `r` in an integral over `[0, t_n]`.
#[inline]
fn trap(step: f64, n: usize, r: usize) -> f64 {
    if n == 0 {
        0.0
    } else if r == 0 || r == n {
        0.5 * step
    } else {
        step
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], c: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

/// Two-time kernel tables on the coarse grid.
#[derive(Debug, Clone)]
pub struct MemoryGrid {
    pub depth: usize,
    pub d: usize,
    /// Coarse step between stored nodes.
    pub step: f64,
    pub zeta: Vec<Array1<f64>>,
    /// `c[l-1]` holds `c(l)`.
    c: Vec<TriGrid>,
    /// `kz[l-1]` holds `K(l)_{t,s} zeta_s` for `s <= t`.
    kz: Vec<TriGrid>,
    /// `x[l-1]` holds `zeta_t^T K(l)_{t,s} zeta_s`.
    x: Vec<TriGrid>,
    k_diag: Vec<Vec<Array2<f64>>>,
    k_full: Option<Vec<TriGrid>>,
    // Boundary-equation auxiliaries, one entry per node.
    g: Vec<Array1<f64>>,
    big_g: Vec<Array2<f64>>,
    u: Vec<Array1<f64>>,
    e: Vec<Array1<f64>>,
    big_e: Vec<f64>,
    max_sweeps: usize,
    pub sweeps_used: Vec<usize>,
}

impl MemoryGrid {
    pub fn new(depth: usize, d: usize, step: f64, store_full_kernels: bool) -> Self {
        let levels = depth - 1;
        MemoryGrid {
            depth,
            d,
            step,
            zeta: Vec::new(),
            c: (0..levels).map(|_| TriGrid::new(1)).collect(),
            kz: (0..levels).map(|_| TriGrid::new(d)).collect(),
            x: (0..levels).map(|_| TriGrid::new(1)).collect(),
            k_diag: vec![Vec::new(); levels],
            k_full: store_full_kernels.then(|| (0..levels).map(|_| TriGrid::new(d * d)).collect()),
            g: Vec::new(),
            big_g: Vec::new(),
            u: Vec::new(),
            e: Vec::new(),
            big_e: Vec::new(),
            max_sweeps: 50,
            sweeps_used: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.zeta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zeta.is_empty()
    }

    /// `c(l)_{t,s}` at node indices, `l = 1..=L` (`c(L) = 1`).
    pub fn c(&self, l: usize, t: usize, s: usize) -> f64 {
        if l == self.depth {
            1.0
        } else {
            self.c[l - 1].sym(t, s)
        }
    }

    /// `K(l)_{t,t}`, `l = 0..=L-1` (`K(0) = I`).
    pub fn k_diag(&self, l: usize, t: usize) -> Array2<f64> {
        if l == 0 {
            Array2::eye(self.d)
        } else {
            self.k_diag[l - 1][t].clone()
        }
    }

    /// `K(l)_{t,s} zeta_s` for `s <= t`.
    pub fn k_zeta(&self, l: usize, t: usize, s: usize) -> Array1<f64> {
        assert!(s <= t);
        Array1::from(self.kz[l - 1].at(t, s).to_vec())
    }

    /// Full `K(l)_{t,s}` when the grid was built with full kernels.
    pub fn k(&self, l: usize, t: usize, s: usize) -> Option<Array2<f64>> {
        let full = self.k_full.as_ref()?;
        let d = self.d;
        let (n, k, transpose) = if s <= t { (t, s, false) } else { (s, t, true) };
        let m = Array2::from_shape_vec((d, d), full[l - 1].at(n, k).to_vec()).ok()?;
        Some(if transpose { m.t().to_owned() } else { m })
    }

    /// `sum_{l=1..L} c(l)_{t,t} K(l-1)_{t,t}`.
    pub fn drift_matrix(&self, t: usize) -> Array2<f64> {
        let mut m = Array2::zeros((self.d, self.d));
        for l in 1..=self.depth {
            m.scaled_add(self.c(l, t, t), &self.k_diag(l - 1, t));
        }
        m
    }


    fn push_initial(&mut self, zeta: Array1<f64>) {
        let d = self.d;
        let levels = self.depth - 1;
        for li in 0..levels {
            let first = li == 0;
            let last = li == levels - 1;
            let kz: Vec<f64> = if first { zeta.to_vec() } else { vec![0.0; d] };
            self.x[li].rows.push(vec![if first { zeta.dot(&zeta) } else { 0.0 }]);
            self.kz[li].rows.push(kz);
            self.c[li].rows.push(vec![if last { 1.0 } else { 0.0 }]);
            self.k_diag[li].push(if first { Array2::eye(d) } else { Array2::zeros((d, d)) });
            if let Some(full) = self.k_full.as_mut() {
                let m: Array2<f64> = if first { Array2::eye(d) } else { Array2::zeros((d, d)) };
                full[li].rows.push(m.into_raw_vec_and_offset().0);
            }
        }
        self.g.push(Array1::zeros(d));
        self.big_g.push(Array2::zeros((d, d)));
        self.u.push(zeta.clone());
        self.e.push(Array1::zeros(d));
        self.big_e.push(0.0);
        self.zeta.push(zeta);
        self.sweeps_used.push(0);
    }

    /// Appends node `n = len()` with residual `zeta` and solves its grid row.
    pub fn extend(&mut self, zeta: Array1<f64>) -> Result<()> {
        if zeta.len() != self.d {
            return Err(NhlError::DimensionMismatch { expected: self.d, got: zeta.len() });
        }
        let n = self.len();
        if n == 0 {
            self.push_initial(zeta);
            return Ok(());
        }
        let d = self.d;
        let levels = self.depth - 1;

        // Initial guess: continue the previous row.
        for li in 0..levels {
            let mut crow = self.c[li].rows[n - 1].clone();
            crow.push(*crow.last().unwrap());
            self.c[li].rows.push(crow);
            let mut krow = self.kz[li].rows[n - 1].clone();
            krow.extend(self.k_diag[li][n - 1].dot(&zeta).iter());
            let xrow = (0..=n).map(|k| dot(zeta.as_slice().unwrap(), &krow[k * d..(k + 1) * d])).collect();
            self.kz[li].rows.push(krow);
            self.x[li].rows.push(xrow);
            let prev = self.k_diag[li][n - 1].clone();
            self.k_diag[li].push(prev);
            if let Some(full) = self.k_full.as_mut() {
                full[li].rows.push(vec![0.0; (n + 1) * d * d]);
            }
        }
        self.g.push(self.g[n - 1].clone());
        self.big_g.push(self.big_g[n - 1].clone());
        self.u.push(&zeta + &self.big_g[n - 1].dot(&zeta));
        self.e.push(self.e[n - 1].clone());
        self.big_e.push(self.big_e[n - 1]);
        self.zeta.push(zeta);

        let mut sweeps = 0;
        loop {
            let before: Vec<f64> = (0..levels)
                .flat_map(|li| self.c[li].rows[n].iter().chain(self.kz[li].rows[n].iter()).copied().collect::<Vec<_>>())
                .collect();
            self.sweep(n);
            sweeps += 1;
            let mut change = 0.0f64;
            let mut scale = 1.0f64;
            let mut idx = 0;
            for li in 0..levels {
                for &v in self.c[li].rows[n].iter().chain(self.kz[li].rows[n].iter()) {
                    change = change.max((v - before[idx]).abs());
                    scale = scale.max(v.abs());
                    idx += 1;
                }
            }
            if !change.is_finite() {
                return Err(NhlError::NonFinite { step: n, what: "memory grid row".into() });
            }
            if change <= 1e-14 * scale || sweeps >= self.max_sweeps {
                break;
            }
        }
        self.sweeps_used.push(sweeps);
        Ok(())
    }

    fn sweep(&mut self, n: usize) {
        let d = self.d;
        let depth = self.depth;
        let levels = depth - 1;
        let half = 0.5 * self.step;
        let full = self.k_full.is_some();
        let step = self.step;
        let w = |n: usize, r: usize| trap(step, n, r);

        // Boundary auxiliaries of the first layer.
        {
            let c2 = &self.c[1.min(levels - 1)];
            let use_c2 = levels >= 2;
            let mut g = Array1::zeros(d);
            if use_c2 {
                for r in 0..=n {
                    g.scaled_add(w(n, r) * c2.sym(n, r), &self.u[r]);
                }
            }
            let zn = &self.zeta[n];
            let outer = |a: &Array1<f64>, b: &Array1<f64>| {
                a.view().insert_axis(ndarray::Axis(1)).dot(&b.view().insert_axis(ndarray::Axis(0)))
            };
            let mut big_g = self.big_g[n - 1].clone();
            big_g.scaled_add(half, &outer(&self.g[n - 1], &self.zeta[n - 1]));
            big_g.scaled_add(half, &outer(&g, zn));
            self.u[n] = zn + &big_g.dot(zn);
            self.g[n] = g;
            self.big_g[n] = big_g;
        }

        // K(1): boundary form.
        {
            let c1 = &self.c[0];
            let mut s = vec![0.0; (n + 1) * d];
            for p in 0..=n {
                let sp = &mut s[p * d..(p + 1) * d];
                for r in 0..=n {
                    let wr = w(n, r) * c1.sym(r, p);
                    if wr != 0.0 {
                        axpy(sp, wr, self.zeta[r].as_slice().unwrap());
                    }
                }
            }
            let gn = &self.big_g[n];
            let mut row = vec![0.0; (n + 1) * d];
            let mut xrow = vec![0.0; n + 1];
            let zn = self.zeta[n].as_slice().unwrap();
            for k in 0..=n {
                let zk = &self.zeta[k];
                let dst = &mut row[k * d..(k + 1) * d];
                // zeta_k + G_n^T zeta_k + G_k zeta_k
                let gt = gn.t().dot(zk);
                for i in 0..d {
                    dst[i] = gt[i] + self.u[k][i];
                }
                for p in 0..=k {
                    let coef = w(k, p) * dot(self.zeta[p].as_slice().unwrap(), zk.as_slice().unwrap());
                    if coef != 0.0 {
                        axpy(dst, coef, &s[p * d..(p + 1) * d]);
                    }
                }
                xrow[k] = dot(zn, dst);
            }
            let mut diag = Array2::<f64>::eye(d) + gn + &gn.t();
            for p in 0..=n {
                let wp = w(n, p);
                if wp != 0.0 {
                    for i in 0..d {
                        for j in 0..d {
                            diag[[i, j]] += wp * s[p * d + i] * self.zeta[p][j];
                        }
                    }
                }
            }
            let diag = (&diag + &diag.t()) * 0.5;
            if full {
                let mut frow = vec![0.0; (n + 1) * d * d];
                for k in 0..=n {
                    let blk = &mut frow[k * d * d..(k + 1) * d * d];
                    let base = Array2::<f64>::eye(d) + &gn.t() + &self.big_g[k];
                    blk.copy_from_slice(base.as_slice().unwrap());
                    for p in 0..=k {
                        let wp = w(k, p);
                        if wp != 0.0 {
                            for i in 0..d {
                                for j in 0..d {
                                    blk[i * d + j] += wp * s[p * d + i] * self.zeta[p][j];
                                }
                            }
                        }
                    }
                }
                self.k_full.as_mut().unwrap()[0].rows[n] = frow;
            }
            self.kz[0].rows[n] = row;
            self.x[0].rows[n] = xrow;
            self.k_diag[0][n] = diag;
        }

        // K(l), l >= 2.
        for li in 1..levels {
            let (lower, upper) = self.kz.split_at_mut(li);
            let prev = &lower[li - 1];
            let cl = &self.c[li];
            let xprev = &self.x[li - 1];
            let mut gamma = vec![0.0; (n + 1) * d];
            for p in 0..=n {
                let gp = &mut gamma[p * d..(p + 1) * d];
                for r in 0..=n {
                    let wr = w(n, r) * cl.sym(r, p);
                    if wr != 0.0 {
                        axpy(gp, wr, prev.at(n, r));
                    }
                }
            }
            let zn = self.zeta[n].as_slice().unwrap();
            let mut row = vec![0.0; (n + 1) * d];
            let mut xrow = vec![0.0; n + 1];
            for k in 0..=n {
                let dst = &mut row[k * d..(k + 1) * d];
                for p in 0..=k {
                    let coef = w(k, p) * xprev.at(k, p)[0];
                    if coef != 0.0 {
                        axpy(dst, coef, &gamma[p * d..(p + 1) * d]);
                    }
                }
                xrow[k] = dot(zn, dst);
            }
            let mut diag = Array2::<f64>::zeros((d, d));
            for p in 0..=n {
                let wp = w(n, p);
                if wp != 0.0 {
                    let a = prev.at(n, p);
                    for i in 0..d {
                        for j in 0..d {
                            diag[[i, j]] += wp * gamma[p * d + i] * a[j];
                        }
                    }
                }
            }
            if let Some(fullg) = self.k_full.as_mut() {
                let mut frow = vec![0.0; (n + 1) * d * d];
                for k in 0..=n {
                    let blk = &mut frow[k * d * d..(k + 1) * d * d];
                    for p in 0..=k {
                        let wp = w(k, p);
                        if wp != 0.0 {
                            let a = prev.at(k, p);
                            for i in 0..d {
                                for j in 0..d {
                                    blk[i * d + j] += wp * gamma[p * d + i] * a[j];
                                }
                            }
                        }
                    }
                }
                fullg[li].rows[n] = frow;
            }
            upper[0].rows[n] = row;
            self.x[li].rows[n] = xrow;
            self.k_diag[li][n] = (&diag + &diag.t()) * 0.5;
        }

        // c(L-1): boundary form.
        {
            let top = levels - 1;
            let below = &self.kz[top.saturating_sub(1)];
            // K(L-2) with L = 3 is K(1); the guard keeps the index valid.
            let mut e = Array1::zeros(d);
            for r in 0..=n {
                let wr = w(n, r) * (1.0 + self.big_e[r]);
                if wr != 0.0 {
                    axpy(e.as_slice_mut().unwrap(), wr, below.at(n, r));
                }
            }
            let big_e = self.big_e[n - 1] + half * (self.e[n - 1].dot(&self.zeta[n - 1]) + e.dot(&self.zeta[n]));
            self.e[n] = e;
            self.big_e[n] = big_e;
            let xt = &self.x[top];
            let y: Vec<f64> = (0..=n).map(|p| (0..=n).map(|r| w(n, r) * xt.sym(r, p)).sum()).collect();
            let row: Vec<f64> = (0..=n)
                .map(|k| 1.0 + big_e + self.big_e[k] + (0..=k).map(|p| w(k, p) * y[p]).sum::<f64>())
                .collect();
            self.c[top].rows[n] = row;
        }

        // c(l), l = L-2 down to 1.
        for li in (0..levels - 1).rev() {
            let (lower, upper) = self.c.split_at_mut(li + 1);
            let cup = &upper[0];
            let xl = &self.x[li];
            let y: Vec<f64> = (0..=n)
                .map(|p| (0..=n).map(|r| w(n, r) * cup.sym(n, r) * xl.sym(r, p)).sum())
                .collect();
            let row: Vec<f64> = (0..=n)
                .map(|k| (0..=k).map(|p| w(k, p) * cup.sym(k, p) * y[p]).sum())
                .collect();
            lower[li].rows[n] = row;
        }
    }
}

/// Equal-time summaries of a linear mean-field run, recorded at every coarse
/// node.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTrajectory {
    pub times: Vec<f64>,
    pub v: Vec<Array1<f64>>,
    /// `c_diag[n][l-1] = c(l)_{t_n,t_n}` for `l = 1..L-1`.
    pub c_diag: Vec<Vec<f64>>,
    /// `k_trace[n][l-1] = tr K(l)_{t_n,t_n}` for `l = 1..L-1`.
    pub k_trace: Vec<Vec<f64>>,
    /// `(1/2)(v - v*)^T Sigma (v - v*)`.
    pub risk: Vec<f64>,
}

impl LinearTrajectory {
    /// Columns `t, v_1..v_d, c1..c{L-1}, risk`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.v.first().map_or(0, |v| v.len());
        let levels = self.c_diag.first().map_or(0, |c| c.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("v_{i}")));
        header.extend((1..=levels).map(|l| format!("c{l}")));
        header.push("risk".into());
        w.write_record(&header)?;
        for n in 0..self.times.len() {
            let mut rec = vec![self.times[n].to_string()];
            rec.extend(self.v[n].iter().map(|x| x.to_string()));
            rec.extend(self.c_diag[n].iter().map(|x| x.to_string()));
            rec.push(self.risk[n].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn quadratic_risk(v: &Array1<f64>, cfg: &LinearMFConfig) -> f64 {
    let r = v - &cfg.v_star;
    0.5 * r.dot(&cfg.sigma.dot(&r))
}

/// Integrates the closed linear mean-field system from `v_0 = 0`.
pub fn integrate_linear_mf(cfg: &LinearMFConfig) -> Result<LinearTrajectory> {
    Ok(integrate_linear_mf_with_grid(cfg)?.0)
}

/// As [`integrate_linear_mf`], also returning the memory grid.
pub fn integrate_linear_mf_with_grid(cfg: &LinearMFConfig) -> Result<(LinearTrajectory, MemoryGrid)> {
    cfg.validate()?;
    let d = cfg.dim();
    let levels = cfg.depth - 1;
    let mut grid = MemoryGrid::new(cfg.depth, d, cfg.coarse_step(), cfg.store_full_kernels);
    let mut traj = LinearTrajectory { times: vec![], v: vec![], c_diag: vec![], k_trace: vec![], risk: vec![] };
    let mut v = Array1::<f64>::zeros(d);

    let record = |traj: &mut LinearTrajectory, grid: &MemoryGrid, n: usize, v: &Array1<f64>| {
        traj.times.push(n as f64 * cfg.coarse_step());
        traj.v.push(v.clone());
        traj.c_diag.push((1..=levels).map(|l| grid.c(l, n, n)).collect());
        traj.k_trace.push((1..=levels).map(|l| grid.k_diag(l, n).diag().sum()).collect());
        traj.risk.push(quadratic_risk(v, cfg));
    };

    grid.extend(residual(&v, &cfg.sigma, &cfg.v_star)?)?;
    record(&mut traj, &grid, 0, &v);
    let h = cfg.dt;
    for n in 0..cfg.coarse_nodes() {
        // dv/dt = -A (v - v*), A = M_n Sigma frozen over the interval.
        let a = grid.drift_matrix(n).dot(&cfg.sigma);
        let rhs = |v: &Array1<f64>| -a.dot(&(v - &cfg.v_star));
        for _ in 0..cfg.mem_stride {
            let k1 = rhs(&v);
            let k2 = rhs(&(&v + &(&k1 * (0.5 * h))));
            let k3 = rhs(&(&v + &(&k2 * (0.5 * h))));
            let k4 = rhs(&(&v + &(&k3 * h)));
            v = &v + &((&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (h / 6.0));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(NhlError::NonFinite { step: (n + 1) * cfg.mem_stride, what: "v".into() });
        }
        grid.extend(residual(&v, &cfg.sigma, &cfg.v_star)?)?;
        record(&mut traj, &grid, n + 1, &v);
    }
    Ok((traj, grid))
}

/// `sup_t |a_t - b_t| / |v*|` over paired samples.
pub fn sup_relative_deviation(a: &[Array1<f64>], b: &[Array1<f64>], v_star: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NhlError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let scale = v_star.dot(v_star).sqrt();
    if scale == 0.0 {
        return Err(NhlError::Degenerate("v* = 0".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).dot(&(x - y)).sqrt()).fold(0.0, f64::max) / scale)
}

/// Effective linear maps `v_t` of a finite-width linear network trained by
/// gradient flow on `data` with squared loss, under the normalisation assumed
/// by the mean-field system (unit Gaussian `a`, `z` and `W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRun {
    pub times: Vec<f64>,
    pub v: Vec<Array1<f64>>,
}

pub fn particle_run(data: &Dataset<f64>, depth: usize, width: usize, cfg: &GFConfig, seed: u64) -> Result<ParticleRun> {
    let spec = InitSpec::standard(depth, width, data.input_dim(), ActivationKind::Identity, seed);
    let state = init_network::<f64>(&spec)?;
    let mut run = ParticleRun { times: vec![], v: vec![] };
    integrate_with(&state, data, LossKind::Squared, cfg, |snap| {
        run.times.push(snap.time);
        run.v.push(snap.state.effective_linear_map()?);
        Ok(())
    })?;
    Ok(run)
}
