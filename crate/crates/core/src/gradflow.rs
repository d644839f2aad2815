//! Gradient flow on the parameters of a mean-field network.
//!
//! With `zeta(x) = d/dy l(f(x), f*(x))` and `E_x` the training average, the
//! flow is
//!
//! ```text
//! dz_i/dt    = -E_x[zeta q1_i sigma'(h1_i) x]
//! da_i/dt    = -E_x[zeta sigma(h{L-1}_i)]
//! dW(l)_ij/dt = -E_x[zeta q{l+1}_i sigma'(h{l+1}_i) sigma(hl_j)]
//! db(l)_i/dt = -beta E_x[zeta ql_i sigma'(hl_i)]
//! ```
//!
//! with adjoint fields `q{L-1}_i = a_i` and
//! `ql_j = (1/m) sum_i W(l)_ij q{l+1}_i sigma'(h{l+1}_i)`. Each right-hand side
//! is the risk gradient rescaled by `-m` (z, a), `-m^2` (W) or `-beta m` (b).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{NhlError, Result};
use crate::net::{t_dot, ActivationKind, BatchForward, NetworkState};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `(y_hat - y)^2 / 2`.
    Squared,
    /// `log(1 + exp(-y y_hat))` for labels in `{-1, +1}`.
    Logistic,
}

impl LossKind {
    pub fn value<F: Scalar>(self, y_hat: F, y: F) -> F {
        match self {
            LossKind::Squared => {
                let r = y_hat - y;
                F::lit(0.5) * r * r
            }
            LossKind::Logistic => softplus(-y * y_hat),
        }
    }

    pub fn derivative<F: Scalar>(self, y_hat: F, y: F) -> F {
        match self {
            LossKind::Squared => y_hat - y,
            LossKind::Logistic => -y * logistic(-y * y_hat),
        }
    }
}

fn softplus<F: Scalar>(u: F) -> F {
    if u > F::zero() {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn logistic<F: Scalar>(u: F) -> F {
    if u >= F::zero() {
        F::one() / (F::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (F::one() + e)
    }
}

/// Adjoint fields at one input. `q[l-1]` is the vector `q(l)` for hidden layer
/// `l`; `zeta` is present when a target was supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct BackpropTrace<F: Scalar> {
    pub q: Vec<Array1<F>>,
    pub zeta: Option<F>,
}

/// Same shapes as the trainable part of a [`NetworkState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDelta<F: Scalar> {
    pub dz: Array2<F>,
    pub dw: Vec<Array2<F>>,
    pub da: Array1<F>,
    pub db: Option<Vec<Array1<F>>>,
}

impl<F: Scalar> ParamDelta<F> {
    pub fn zeros_like(state: &NetworkState<F>) -> Self {
        ParamDelta {
            dz: Array2::zeros(state.z.raw_dim()),
            dw: state.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            da: Array1::zeros(state.a.raw_dim()),
            db: state.b.as_ref().map(|b| b.iter().map(|v| Array1::zeros(v.raw_dim())).collect()),
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: F, other: &ParamDelta<F>) {
        self.dz.scaled_add(c, &other.dz);
        for (d, o) in self.dw.iter_mut().zip(&other.dw) {
            d.scaled_add(c, o);
        }
        self.da.scaled_add(c, &other.da);
        if let (Some(d), Some(o)) = (self.db.as_mut(), other.db.as_ref()) {
            for (dv, ov) in d.iter_mut().zip(o) {
                dv.scaled_add(c, ov);
            }
        }
    }

    /// `self += c * params(state)`, biases excluded.
    pub fn add_scaled_params(&mut self, c: F, state: &NetworkState<F>) {
        self.dz.scaled_add(c, &state.z);
        for (d, w) in self.dw.iter_mut().zip(&state.w) {
            d.scaled_add(c, w);
        }
        self.da.scaled_add(c, &state.a);
    }

    pub fn max_abs(&self) -> F {
        let m = |acc: F, v: &F| acc.max(v.abs());
        let mut out = self.dz.iter().fold(F::zero(), m);
        out = self.dw.iter().fold(out, |acc, w| w.iter().fold(acc, m));
        out = self.da.iter().fold(out, m);
        if let Some(db) = &self.db {
            out = db.iter().fold(out, |acc, v| v.iter().fold(acc, m));
        }
        out
    }
}

impl<F: Scalar> NetworkState<F> {
    /// `params += c * delta`.
    pub fn apply_delta(&mut self, c: F, delta: &ParamDelta<F>) {
        self.z.scaled_add(c, &delta.dz);
        for (w, d) in self.w.iter_mut().zip(&delta.dw) {
            w.scaled_add(c, d);
        }
        self.a.scaled_add(c, &delta.da);
        if let (Some(b), Some(db)) = (self.b.as_mut(), delta.db.as_ref()) {
            for (bv, dv) in b.iter_mut().zip(db) {
                bv.scaled_add(c, dv);
            }
        }
    }
}

/// Adjoint fields for every row of a batch forward pass. Returns `q[l-1]`,
/// an `n x m` matrix for hidden layer `l`.
pub fn adjoint_fields_batch<F: Scalar>(state: &NetworkState<F>, fw: &BatchForward<F>) -> Vec<Array2<F>> {
    let n_hidden = state.depth() - 1;
    let n = fw.f.len();
    let inv_m = F::one() / F::from_usize_(state.width());
    let sigma = state.activation;
    let mut q: Vec<Array2<F>> = Vec::with_capacity(n_hidden);
    q.push(state.a.view().insert_axis(Axis(0)).broadcast((n, state.width())).unwrap().to_owned());
    for l in (1..n_hidden).rev() {
        // q(l) = (q(l+1) * sigma'(h(l+1))) W(l) / m
        let upper = q.last().unwrap();
        let g = gated(upper, &fw.h[l], sigma);
        let mut ql = g.dot(&state.w[l - 1]);
        ql.mapv_inplace(|v| v * inv_m);
        q.push(ql);
    }
    q.reverse();
    q
}

fn gated<F: Scalar>(q: &Array2<F>, h: &Array2<F>, sigma: ActivationKind) -> Array2<F> {
    let mut g = q.clone();
    if sigma != ActivationKind::Identity {
        Zip::from(&mut g).and(h).for_each(|g, &h| *g = *g * sigma.derivative(h));
    }
    g
}

/// Adjoint fields at a single input, with `zeta` attached when
/// `target = Some((y, loss))`.
pub fn backprop_fields<F: Scalar>(
    state: &NetworkState<F>,
    x: ArrayView1<F>,
    target: Option<(F, LossKind)>,
) -> Result<BackpropTrace<F>> {
    let fw = state.forward_batch(x.insert_axis(Axis(0)))?;
    let q = adjoint_fields_batch(state, &fw).into_iter().map(|ql| ql.row(0).to_owned()).collect();
    let zeta = target.map(|(y, loss)| loss.derivative(fw.f[0], y));
    Ok(BackpropTrace { q, zeta })
}

/// Residuals `zeta_k` of the current outputs.
pub fn residuals<F: Scalar>(f: &Array1<F>, y: &Array1<F>, loss: LossKind) -> Array1<F> {
    Zip::from(f).and(y).map_collect(|&fv, &yv| loss.derivative(fv, yv))
}

/// Empirical risk `E_x[l(f(x), f*(x))]`.
pub fn empirical_risk<F: Scalar>(state: &NetworkState<F>, data: &Dataset<F>, loss: LossKind) -> Result<F> {
    if data.is_empty() {
        return Err(NhlError::EmptyDataset);
    }
    let f = state.predict(data.x.view())?;
    Ok(mean_loss(&f, &data.y, loss))
}

pub fn mean_loss<F: Scalar>(f: &Array1<F>, y: &Array1<F>, loss: LossKind) -> F {
    let n = F::from_usize_(f.len());
    Zip::from(f).and(y).fold(F::zero(), |acc, &fv, &yv| acc + loss.value(fv, yv)) / n
}

/// Flow right-hand side for an arbitrary residual vector: the parameter
/// velocities obtained when `zeta_k` is the residual at input `x_k`.
pub fn rhs_from_residuals<F: Scalar>(
    state: &NetworkState<F>,
    x: ArrayView2<F>,
    zeta: ArrayView1<F>,
    beta: F,
) -> Result<ParamDelta<F>> {
    let fw = state.forward_batch(x)?;
    rhs_with_forward(state, x, &fw, zeta, beta)
}

fn rhs_with_forward<F: Scalar>(
    state: &NetworkState<F>,
    x: ArrayView2<F>,
    fw: &BatchForward<F>,
    zeta: ArrayView1<F>,
    beta: F,
) -> Result<ParamDelta<F>> {
    let n = x.nrows();
    if n == 0 {
        return Err(NhlError::EmptyDataset);
    }
    if zeta.len() != n {
        return Err(NhlError::DimensionMismatch { expected: n, got: zeta.len() });
    }
    let sigma = state.activation;
    let depth = state.depth();
    let n_f = F::from_usize_(n);
    let omega = zeta.mapv(|v| -v / n_f);
    let omega_col = omega.view().insert_axis(Axis(1));

    let q = adjoint_fields_batch(state, fw);
    // g[l-1] = q(l) * sigma'(h(l)), weighted per row by -zeta_k / n.
    let g: Vec<Array2<F>> = (0..depth - 1)
        .map(|l| {
            let mut gl = gated(&q[l], &fw.h[l], sigma);
            gl *= &omega_col;
            gl
        })
        .collect();

    let dz = g[0].t().dot(&x);
    let dw = (0..depth - 2).map(|l| g[l + 1].t().dot(&fw.s[l])).collect();
    let da = fw.s[depth - 2].t().dot(&omega);
    let db = state
        .b
        .as_ref()
        .map(|_| g.iter().map(|gl| gl.sum_axis(Axis(0)).mapv(|v| v * beta)).collect());
    Ok(ParamDelta { dz, dw, da, db })
}

/// Rank-one factors of the flow of a bias-free linear network:
/// `dz = q[0] r[0]^T`, `dW_l = q[l+1] r[l+1]^T` and `da = r[L-1]`.
struct LinearFlow<F: Scalar> {
    q: Vec<Array1<F>>,
    r: Vec<Array1<F>>,
}

fn is_linear(state: &NetworkState<impl Scalar>) -> bool {
    state.activation == ActivationKind::Identity && !state.has_bias()
}

/// Uses `h(l)_i(x) = u(l)_i . x` with `x`-independent adjoints, so only
/// matrix-vector products with the weights are needed.
fn linear_flow<F: Scalar>(state: &NetworkState<F>, data: &Dataset<F>, loss: LossKind) -> LinearFlow<F> {
    let inv_m = F::one() / F::from_usize_(state.width());
    let mut q: Vec<Array1<F>> = vec![state.a.clone()];
    for wl in state.w.iter().rev() {
        let mut next = t_dot(wl, q.last().unwrap().view());
        next.mapv_inplace(|x| x * inv_m);
        q.push(next);
    }
    q.reverse();
    let v = t_dot(&state.z, q[0].view()).mapv(|x| x * inv_m);
    let zeta = residuals(&data.x.dot(&v), &data.y, loss);
    let n = F::from_usize_(data.len());
    // -E_x[zeta x]
    let g = data.x.t().dot(&zeta).mapv(|x| -x / n);

    let mut r = vec![state.z.dot(&g)];
    for wl in &state.w {
        let mut next = wl.dot(r.last().unwrap());
        next.mapv_inplace(|x| x * inv_m);
        r.push(next);
    }
    r.insert(0, g);
    LinearFlow { q, r }
}

fn linear_rhs<F: Scalar>(state: &NetworkState<F>, data: &Dataset<F>, loss: LossKind) -> ParamDelta<F> {
    let LinearFlow { q, mut r } = linear_flow(state, data, loss);
    let outer = |col: &Array1<F>, row: &Array1<F>| Array2::from_shape_fn((col.len(), row.len()), |(i, j)| col[i] * row[j]);
    let dz = outer(&q[0], &r[0]);
    let dw = (0..state.w.len()).map(|l| outer(&q[l + 1], &r[l + 1])).collect();
    let da = r.pop().unwrap();
    ParamDelta { dz, dw, da, db: None }
}

fn rank_one_add<F: Scalar>(mat: &mut Array2<F>, c: F, col: &Array1<F>, row: &Array1<F>) {
    for (mut dst, &ci) in mat.rows_mut().into_iter().zip(col) {
        dst.scaled_add(c * ci, row);
    }
}

/// One in-place Euler step of the linear flow with weight decay `decay`.
fn linear_euler_step<F: Scalar>(state: &mut NetworkState<F>, data: &Dataset<F>, loss: LossKind, dt: F, decay: F) {
    let flow = linear_flow(state, data, loss);
    if decay > F::zero() {
        let keep = F::one() - dt * decay;
        state.z.mapv_inplace(|v| v * keep);
        state.w.iter_mut().for_each(|wl| wl.mapv_inplace(|v| v * keep));
        state.a.mapv_inplace(|v| v * keep);
    }
    rank_one_add(&mut state.z, dt, &flow.q[0], &flow.r[0]);
    for (l, wl) in state.w.iter_mut().enumerate() {
        rank_one_add(wl, dt, &flow.q[l + 1], &flow.r[l + 1]);
    }
    state.a.scaled_add(dt, &flow.r[flow.r.len() - 1]);
}

/// Right-hand side of the gradient flow on the training set.
pub fn gf_rhs<F: Scalar>(state: &NetworkState<F>, data: &Dataset<F>, loss: LossKind, beta: F) -> Result<ParamDelta<F>> {
    if data.is_empty() {
        return Err(NhlError::EmptyDataset);
    }
    if data.input_dim() != state.input_dim() {
        return Err(NhlError::DimensionMismatch { expected: state.input_dim(), got: data.input_dim() });
    }
    if is_linear(state) {
        return Ok(linear_rhs(state, data, loss));
    }
    gf_rhs_generic(state, data, loss, beta)
}

/// Batched right-hand side without the linear shortcut.
pub fn gf_rhs_generic<F: Scalar>(state: &NetworkState<F>, data: &Dataset<F>, loss: LossKind, beta: F) -> Result<ParamDelta<F>> {
    if data.is_empty() {
        return Err(NhlError::EmptyDataset);
    }
    let fw = state.forward_batch(data.x.view())?;
    let zeta = residuals(&fw.f, &data.y, loss);
    rhs_with_forward(state, data.x.view(), &fw, zeta.view(), beta)
}

/// Central finite-difference estimate of the flow field, built only from
/// [`empirical_risk`]: each parameter's risk derivative times `-m` (z, a),
/// `-m^2` (W) or `-beta m` (b).
pub fn numerical_rhs(state: &NetworkState<f64>, data: &Dataset<f64>, loss: LossKind, beta: f64, h: f64) -> Result<ParamDelta<f64>> {
    let m = state.width() as f64;
    let mut probe = state.clone();
    let mut diff = |get: &mut dyn FnMut(&mut NetworkState<f64>) -> &mut f64| -> Result<f64> {
        let orig = *get(&mut probe);
        *get(&mut probe) = orig + h;
        let up = empirical_risk(&probe, data, loss)?;
        *get(&mut probe) = orig - h;
        let down = empirical_risk(&probe, data, loss)?;
        *get(&mut probe) = orig;
        Ok((up - down) / (2.0 * h))
    };
    let mut out = ParamDelta::zeros_like(state);
    for ((i, j), v) in out.dz.indexed_iter_mut() {
        *v = -m * diff(&mut |s| &mut s.z[[i, j]])?;
    }
    for (l, dw) in out.dw.iter_mut().enumerate() {
        for ((i, j), v) in dw.indexed_iter_mut() {
            *v = -m * m * diff(&mut |s| &mut s.w[l][[i, j]])?;
        }
    }
    for (i, v) in out.da.indexed_iter_mut() {
        *v = -m * diff(&mut |s| &mut s.a[i])?;
    }
    if let Some(db) = out.db.as_mut() {
        for (l, dbl) in db.iter_mut().enumerate() {
            for (i, v) in dbl.indexed_iter_mut() {
                *v = -beta * m * diff(&mut |s| &mut s.b.as_mut().unwrap()[l][i])?;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GFConfig {
    pub dt: f64,
    pub horizon: f64,
    pub integrator: Integrator,
    /// Learning-rate ratio of the biases; 0 leaves them untrained.
    pub beta: f64,
    pub record_every: usize,
    /// Coefficient `lambda` of the penalty `(lambda / 2) sum_l (M(l)_{m,2})^2`,
    /// which enters the scaled flow as a uniform decay `-lambda * theta` on
    /// `z`, `W` and `a`. Zero by default.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for GFConfig {
    fn default() -> Self {
        GFConfig { dt: 1e-3, horizon: 1.0, integrator: Integrator::Rk4, beta: 0.0, record_every: 1, weight_decay: 0.0 }
    }
}

impl GFConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(NhlError::InvalidParameter(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(NhlError::InvalidParameter(format!("horizon = {} must be >= 0", self.horizon)));
        }
        if self.horizon > 0.0 && self.dt > self.horizon {
            return Err(NhlError::InvalidParameter(format!("dt = {} exceeds horizon {}", self.dt, self.horizon)));
        }
        if !(self.beta >= 0.0) {
            return Err(NhlError::InvalidParameter(format!("beta = {} must be >= 0", self.beta)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(NhlError::InvalidParameter(format!("weight_decay = {} must be >= 0", self.weight_decay)));
        }
        if self.record_every == 0 {
            return Err(NhlError::InvalidParameter("record_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        if self.horizon == 0.0 {
            0
        } else {
            (self.horizon / self.dt).round() as usize
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory<F: Scalar> {
    pub times: Vec<f64>,
    pub states: Vec<NetworkState<F>>,
    pub risks: Vec<F>,
}

/// What an observer sees at each recorded step.
pub struct Snapshot<'a, F: Scalar> {
    pub step: usize,
    pub time: f64,
    pub state: &'a NetworkState<F>,
    pub risk: F,
}

/// Integrates the flow and records every snapshot into a [`Trajectory`].
pub fn integrate<F: Scalar>(
    state: &NetworkState<F>,
    data: &Dataset<F>,
    loss: LossKind,
    cfg: &GFConfig,
) -> Result<Trajectory<F>> {
    let mut traj = Trajectory { times: vec![], states: vec![], risks: vec![] };
    integrate_with(state, data, loss, cfg, |snap| {
        traj.times.push(snap.time);
        traj.states.push(snap.state.clone());
        traj.risks.push(snap.risk);
        Ok(())
    })?;
    Ok(traj)
}

/// Integrates the flow, handing each recorded snapshot to `observe` instead of
/// storing it. Returns the final state.
pub fn integrate_with<F, O>(
    state: &NetworkState<F>,
    data: &Dataset<F>,
    loss: LossKind,
    cfg: &GFConfig,
    mut observe: O,
) -> Result<NetworkState<F>>
where
    F: Scalar,
    O: FnMut(Snapshot<'_, F>) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(NhlError::EmptyDataset);
    }
    let beta = F::lit(cfg.beta);
    let decay = F::lit(cfg.weight_decay);
    let dt = F::lit(cfg.dt);
    let rhs = |s: &NetworkState<F>| -> Result<ParamDelta<F>> {
        let mut d = gf_rhs(s, data, loss, beta)?;
        if cfg.weight_decay > 0.0 {
            d.add_scaled_params(-decay, s);
        }
        Ok(d)
    };

    let n_steps = cfg.num_steps();
    let mut cur = state.clone();
    for k in 0..=n_steps {
        if k % cfg.record_every == 0 || k == n_steps {
            let risk = empirical_risk(&cur, data, loss)?;
            observe(Snapshot { step: k, time: k as f64 * cfg.dt, state: &cur, risk })?;
        }
        if k == n_steps {
            break;
        }
        match cfg.integrator {
            Integrator::Euler if is_linear(&cur) => linear_euler_step(&mut cur, data, loss, dt, decay),
            Integrator::Euler => {
                let k1 = rhs(&cur)?;
                cur.apply_delta(dt, &k1);
            }
            Integrator::Rk4 => {
                let half = dt * F::lit(0.5);
                let k1 = rhs(&cur)?;
                let mut y = cur.clone();
                y.apply_delta(half, &k1);
                let k2 = rhs(&y)?;
                let mut acc = k1;
                acc.axpy(F::lit(2.0), &k2);
                y.clone_from(&cur);
                y.apply_delta(half, &k2);
                let k3 = rhs(&y)?;
                acc.axpy(F::lit(2.0), &k3);
                y.clone_from(&cur);
                y.apply_delta(dt, &k3);
                let k4 = rhs(&y)?;
                acc.axpy(F::one(), &k4);
                cur.apply_delta(dt / F::lit(6.0), &acc);
            }
        }
        if !cur.all_finite() {
            return Err(NhlError::NonFinite { step: k + 1, what: "parameters after integration step".into() });
        }
    }
    Ok(cur)
}
