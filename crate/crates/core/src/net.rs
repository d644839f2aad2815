//! Finite-width multi-layer networks under mean-field (1/m) scaling.
//!
//! An `L`-layer network of width `m` on inputs in `R^d` computes
//!
//! ```text
//! h1_i(x)     = z_i . x + b1_i
//! h{l+1}_i(x) = b{l+1}_i + (1/m) sum_j W(l)_ij sigma(hl_j(x))      l = 1..L-2
//! f(x)        = (1/m) sum_i a_i sigma(h{L-1}_i(x))
//! ```
//!
//! Biases are optional and live on hidden layers only.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NhlError, Result};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Identity,
}

impl ActivationKind {
    /// Lipschitz constant; 1 for every supported activation.
    pub const LIPSCHITZ: f64 = 1.0;

    #[inline]
    pub fn value<F: Scalar>(self, u: F) -> F {
        match self {
            ActivationKind::Relu => {
                if u > F::zero() {
                    u
                } else {
                    F::zero()
                }
            }
            ActivationKind::Tanh => u.tanh(),
            ActivationKind::Identity => u,
        }
    }

    /// Derivative; relu uses `sigma'(0) = 0`.
    #[inline]
    pub fn derivative<F: Scalar>(self, u: F) -> F {
        match self {
            ActivationKind::Relu => {
                if u > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            ActivationKind::Tanh => {
                let t = u.tanh();
                F::one() - t * t
            }
            ActivationKind::Identity => F::one(),
        }
    }

    pub fn is_positively_homogeneous(self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::Identity)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
        }
    }
}

/// Parameters of a network. `w[l-1]` holds the middle-layer matrix `W(l)`
/// and `b[l-1]` the bias of hidden layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<F: Scalar> {
    pub z: Array2<F>,
    pub w: Vec<Array2<F>>,
    pub a: Array1<F>,
    pub b: Option<Vec<Array1<F>>>,
    pub activation: ActivationKind,
}

/// Gaussian initialisation recipe; every parameter is drawn i.i.d. zero-mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub std_a: f64,
    pub std_z: f64,
    pub std_w: f64,
    pub std_b: f64,
    pub bias_enabled: bool,
    pub activation: ActivationKind,
    pub seed: u64,
}

impl InitSpec {
    /// Unit-variance Gaussians everywhere, no biases.
    pub fn standard(depth: usize, width: usize, input_dim: usize, activation: ActivationKind, seed: u64) -> Self {
        InitSpec {
            depth,
            width,
            input_dim,
            std_a: 1.0,
            std_z: 1.0,
            std_w: 1.0,
            std_b: 1.0,
            bias_enabled: false,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(NhlError::InvalidShape(format!("depth L = {} < 2", self.depth)));
        }
        if self.width < 1 {
            return Err(NhlError::InvalidShape("width m = 0".into()));
        }
        if self.input_dim < 1 {
            return Err(NhlError::InvalidShape("input dimension d = 0".into()));
        }
        for (name, s) in [("std_a", self.std_a), ("std_z", self.std_z), ("std_w", self.std_w), ("std_b", self.std_b)] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(NhlError::InvalidParameter(format!("{name} = {s} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Single-input forward pass: the output and every hidden pre-activation.
/// `h[l-1][i]` is `h(l)_i(x)` (bias included when enabled).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F: Scalar> {
    pub f: F,
    pub h: Vec<Array1<F>>,
}

/// Forward pass over a batch of inputs stored as rows. `h[l-1]` and `s[l-1]`
/// are `n x m` matrices of pre- and post-activations of hidden layer `l`.
#[derive(Debug, Clone)]
pub struct BatchForward<F: Scalar> {
    pub f: Array1<F>,
    pub h: Vec<Array2<F>>,
    pub s: Vec<Array2<F>>,
}

pub(crate) fn gaussian_matrix<F: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let u: f64 = rng.sample(StandardNormal);
        F::lit(std * u)
    })
}

pub(crate) fn gaussian_vector<F: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Array1<F> {
    Array1::from_shape_simple_fn(len, || {
        let u: f64 = rng.sample(StandardNormal);
        F::lit(std * u)
    })
}

/// Draws a network from `spec`. The stream is consumed in the fixed order
/// `z`, `W(1)..W(L-2)`, `a`, then biases, so equal seeds give identical states.
pub fn init_network<F: Scalar>(spec: &InitSpec) -> Result<NetworkState<F>> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let m = spec.width;
    let z = gaussian_matrix(&mut rng, m, spec.input_dim, spec.std_z);
    let w = (0..spec.depth - 2)
        .map(|_| gaussian_matrix(&mut rng, m, m, spec.std_w))
        .collect();
    let a = gaussian_vector(&mut rng, m, spec.std_a);
    let b = spec
        .bias_enabled
        .then(|| (0..spec.depth - 1).map(|_| gaussian_vector(&mut rng, m, spec.std_b)).collect());
    Ok(NetworkState { z, w, a, b, activation: spec.activation })
}

impl<F: Scalar> NetworkState<F> {
    /// Builds a state after checking shapes and finiteness.
    pub fn new(
        z: Array2<F>,
        w: Vec<Array2<F>>,
        a: Array1<F>,
        b: Option<Vec<Array1<F>>>,
        activation: ActivationKind,
    ) -> Result<Self> {
        let state = NetworkState { z, w, a, b, activation };
        state.validate()?;
        Ok(state)
    }

    pub fn depth(&self) -> usize {
        self.w.len() + 2
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn has_bias(&self) -> bool {
        self.b.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.width();
        if m == 0 {
            return Err(NhlError::InvalidShape("width m = 0".into()));
        }
        if self.z.nrows() != m || self.z.ncols() == 0 {
            return Err(NhlError::InvalidShape(format!("z has shape {:?}, expected ({m}, d >= 1)", self.z.dim())));
        }
        for (k, wl) in self.w.iter().enumerate() {
            if wl.dim() != (m, m) {
                return Err(NhlError::InvalidShape(format!("W({}) has shape {:?}, expected ({m}, {m})", k + 1, wl.dim())));
            }
        }
        if let Some(b) = &self.b {
            if b.len() != self.depth() - 1 {
                return Err(NhlError::InvalidShape(format!("{} bias vectors for {} hidden layers", b.len(), self.depth() - 1)));
            }
            if b.iter().any(|bl| bl.len() != m) {
                return Err(NhlError::InvalidShape("bias vector of wrong length".into()));
            }
        }
        if !self.all_finite() {
            return Err(NhlError::NonFinite { step: 0, what: "initial parameters".into() });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let fin = |x: &F| x.is_finite();
        self.z.iter().all(fin)
            && self.w.iter().all(|wl| wl.iter().all(fin))
            && self.a.iter().all(fin)
            && self.b.as_ref().is_none_or(|b| b.iter().all(|bl| bl.iter().all(fin)))
    }

    /// Pre-activations, post-activations and outputs for every row of `x`.
    pub fn forward_batch(&self, x: ArrayView2<F>) -> Result<BatchForward<F>> {
        if x.ncols() != self.input_dim() {
            return Err(NhlError::DimensionMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        let inv_m = F::one() / F::from_usize_(self.width());
        let sigma = self.activation;
        let n_hidden = self.depth() - 1;
        let mut h = Vec::with_capacity(n_hidden);
        let mut s: Vec<Array2<F>> = Vec::with_capacity(n_hidden);

        for l in 0..n_hidden {
            let mut cur = if l == 0 {
                x.dot(&self.z.t())
            } else {
                let mut c = s[l - 1].dot(&self.w[l - 1].t());
                c.mapv_inplace(|v| v * inv_m);
                c
            };
            if let Some(b) = &self.b {
                cur += &b[l].view().insert_axis(Axis(0));
            }
            let post = cur.mapv(|u| sigma.value(u));
            h.push(cur);
            s.push(post);
        }
        let mut f = s[n_hidden - 1].dot(&self.a);
        f.mapv_inplace(|v| v * inv_m);
        Ok(BatchForward { f, h, s })
    }

    pub fn forward(&self, x: ArrayView1<F>) -> Result<ForwardTrace<F>> {
        let xb = x.insert_axis(Axis(0));
        let batch = self.forward_batch(xb)?;
        Ok(ForwardTrace {
            f: batch.f[0],
            h: batch.h.into_iter().map(|hl| hl.row(0).to_owned()).collect(),
        })
    }

    /// Outputs only.
    pub fn predict(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        if self.activation == ActivationKind::Identity && !self.has_bias() {
            if x.ncols() != self.input_dim() {
                return Err(NhlError::DimensionMismatch { expected: self.input_dim(), got: x.ncols() });
            }
            return Ok(x.dot(&self.effective_linear_map()?));
        }
        Ok(self.forward_batch(x)?.f)
    }

    /// The per-neuron "row norms" whose power mean is the group norm of layer
    /// `l` (1-based, `l = 1..=L`).
    fn layer_row_norms(&self, l: usize) -> Array1<F> {
        let depth = self.depth();
        let m = F::from_usize_(self.width());
        if l == 1 {
            self.z.map_axis(Axis(1), |row| row.dot(&row).sqrt())
        } else if l == depth {
            self.a.mapv(|v| v.abs())
        } else {
            self.w[l - 2].map_axis(Axis(1), |row| (row.dot(&row) / m).sqrt())
        }
    }

    /// Group norm `M(l)_{m,p}` of layer `l` (1-based).
    ///
    /// Layer 1 uses the row norms `|z_i|`, middle layers the scaled row norms
    /// `sqrt((1/m) sum_j W_ij^2)`, each averaged in the `p`-power mean with
    /// `p = inf` meaning the maximum. The output layer is always the
    /// root-mean-square of `a`.
    pub fn group_norm(&self, l: usize, p: f64) -> Result<F> {
        let depth = self.depth();
        if l < 1 || l > depth {
            return Err(NhlError::LayerOutOfRange { index: l, lo: 1, hi: depth });
        }
        if !(p >= 2.0) {
            return Err(NhlError::InvalidExponent(p));
        }
        let rows = self.layer_row_norms(l);
        let m = F::from_usize_(rows.len());
        if l == depth {
            let ms = rows.iter().map(|&v| v * v).sum::<F>() / m;
            return Ok(ms.sqrt());
        }
        if p.is_infinite() {
            return Ok(rows.iter().fold(F::zero(), |acc, &v| acc.max(v)));
        }
        // Power mean computed relative to the largest entry to avoid overflow.
        let top = rows.iter().fold(F::zero(), |acc, &v| acc.max(v));
        if top == F::zero() {
            return Ok(F::zero());
        }
        let pf = F::lit(p);
        let mean = rows.iter().map(|&v| (v / top).powf(pf)).sum::<F>() / m;
        Ok(top * mean.powf(F::one() / pf))
    }

    /// Product of all group norms; an upper bound on the ladder complexity of
    /// the represented function.
    pub fn complexity_upper_bound(&self, p: f64) -> Result<F> {
        (1..=self.depth()).try_fold(F::one(), |acc, l| Ok(acc * self.group_norm(l, p)?))
    }

    /// For linear networks without biases, the vector `v` with `f(x) = v . x`.
    pub fn effective_linear_map(&self) -> Result<Array1<F>> {
        if self.activation != ActivationKind::Identity {
            return Err(NhlError::Unsupported("identity activation".into()));
        }
        if self.has_bias() {
            return Err(NhlError::Unsupported("a network without biases".into()));
        }
        let inv_m = F::one() / F::from_usize_(self.width());
        let mut u = self.a.mapv(|v| v * inv_m);
        for wl in self.w.iter().rev() {
            u = t_dot(wl, u.view());
            u.mapv_inplace(|v| v * inv_m);
        }
        Ok(t_dot(&self.z, u.view()))
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.z.len()
            + self.w.iter().map(|w| w.len()).sum::<usize>()
            + self.a.len()
            + self.b.as_ref().map_or(0, |b| b.iter().map(|v| v.len()).sum())
    }

    /// Multiplies the parameters of layer `l` (1-based; `L` is the output
    /// layer) by `factor`. Biases are left untouched.
    pub fn scale_layer(&mut self, l: usize, factor: F) {
        let depth = self.depth();
        if l == 1 {
            self.z.mapv_inplace(|v| v * factor);
        } else if l == depth {
            self.a.mapv_inplace(|v| v * factor);
        } else {
            self.w[l - 2].mapv_inplace(|v| v * factor);
        }
    }

    /// Converts between scalar types (e.g. `f64` to `f32`).
    pub fn cast<G: Scalar>(&self) -> NetworkState<G> {
        let c = |v: &F| G::lit(v.as_f64());
        NetworkState {
            z: self.z.map(c),
            w: self.w.iter().map(|wl| wl.map(c)).collect(),
            a: self.a.map(c),
            b: self.b.as_ref().map(|b| b.iter().map(|bl| bl.map(c)).collect()),
            activation: self.activation,
        }
    }
}

/// `w^T q`, accumulated over the rows of `w`.
pub(crate) fn t_dot<F: Scalar>(w: &Array2<F>, q: ArrayView1<F>) -> Array1<F> {
    let mut out = Array1::zeros(w.ncols());
    for (row, &qi) in w.rows().into_iter().zip(q) {
        out.scaled_add(qi, &row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array1};

    fn tiny_linear() -> NetworkState<f64> {
        NetworkState::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            vec![array![[1.0, 1.0], [1.0, 1.0]]],
            array![1.0, 1.0],
            None,
            ActivationKind::Identity,
        )
        .unwrap()
    }

    #[test]
    fn activation_conventions() {
        for act in [ActivationKind::Relu, ActivationKind::Tanh, ActivationKind::Identity] {
            assert_eq!(act.value(0.0f64), 0.0);
        }
        assert_eq!(ActivationKind::Relu.derivative(0.0f64), 0.0);
        assert_eq!(ActivationKind::Relu.derivative(1e-300f64), 1.0);
        assert_eq!(ActivationKind::Relu.derivative(-2.0f64), 0.0);
        assert_relative_eq!(ActivationKind::Tanh.derivative(0.3f64), 1.0 - 0.3f64.tanh().powi(2));
    }

    #[test]
    fn zero_std_gives_zero_function() {
        let spec = InitSpec { std_a: 0.0, std_z: 0.0, std_w: 0.0, ..InitSpec::standard(3, 5, 2, ActivationKind::Tanh, 1) };
        let net = init_network::<f64>(&spec).unwrap();
        assert!(net.z.iter().chain(net.a.iter()).all(|&v| v == 0.0));
        assert_eq!(net.forward(array![0.3, -2.0].view()).unwrap().f, 0.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = InitSpec { bias_enabled: true, ..InitSpec::standard(4, 6, 3, ActivationKind::Relu, 99) };
        let a = init_network::<f64>(&spec).unwrap();
        let b = init_network::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        let c = init_network::<f64>(&InitSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_moments_follow_the_law_of_large_numbers() {
        let m = 10_000;
        let net = init_network::<f64>(&InitSpec::standard(2, m, 1, ActivationKind::Relu, 2024)).unwrap();
        let mean = net.a.mean().unwrap();
        let var = net.a.mapv(|v| (v - mean).powi(2)).sum() / (m as f64 - 1.0);
        assert!(mean.abs() < 4.0 / (m as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn init_rejects_bad_shapes() {
        for (l, m, d) in [(1, 3, 2), (3, 0, 2), (3, 3, 0)] {
            let spec = InitSpec::standard(l, m, d, ActivationKind::Tanh, 0);
            assert!(matches!(init_network::<f64>(&spec), Err(NhlError::InvalidShape(_))));
        }
    }

    #[test]
    fn forward_hand_examples() {
        let shallow = NetworkState::new(array![[1.0, -2.0]], vec![], array![3.0], None, ActivationKind::Relu).unwrap();
        let tr = shallow.forward(array![2.0, 0.0].view()).unwrap();
        assert_eq!(tr.h[0][0], 2.0);
        assert_eq!(tr.f, 6.0);

        let tr = tiny_linear().forward(array![2.0, 4.0].view()).unwrap();
        assert_eq!(tr.h[0], array![2.0, 4.0]);
        assert_eq!(tr.h[1], array![3.0, 3.0]);
        assert_eq!(tr.f, 3.0);
    }

    #[test]
    fn forward_zero_output_weights() {
        let mut net = init_network::<f64>(&InitSpec::standard(3, 7, 2, ActivationKind::Tanh, 5)).unwrap();
        net.a.fill(0.0);
        assert_eq!(net.forward(array![1.0, 2.0].view()).unwrap().f, 0.0);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let err = tiny_linear().forward(array![1.0, 2.0, 3.0].view()).unwrap_err();
        assert_eq!(err, NhlError::DimensionMismatch { expected: 2, got: 3 });
    }

    #[test]
    fn forward_recursion_with_bias() {
        let spec = InitSpec { bias_enabled: true, ..InitSpec::standard(4, 5, 3, ActivationKind::Tanh, 3) };
        let net = init_network::<f64>(&spec).unwrap();
        let x = array![0.2, -0.7, 1.1];
        let tr = net.forward(x.view()).unwrap();
        let b = net.b.as_ref().unwrap();
        let h1 = net.z.dot(&x) + &b[0];
        for (u, v) in tr.h[0].iter().zip(h1.iter()) {
            assert_relative_eq!(u, v, max_relative = 1e-14);
        }
        for l in 0..2 {
            let expected = net.w[l].dot(&tr.h[l].mapv(f64::tanh)) / 5.0 + &b[l + 1];
            for (u, v) in tr.h[l + 1].iter().zip(expected.iter()) {
                assert_relative_eq!(u, v, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn group_norm_examples() {
        let zero = init_network::<f64>(&InitSpec { std_a: 0.0, std_z: 0.0, std_w: 0.0, ..InitSpec::standard(3, 4, 2, ActivationKind::Relu, 0) }).unwrap();
        for l in 1..=3 {
            for p in [2.0, 3.0, f64::INFINITY] {
                assert_eq!(zero.group_norm(l, p).unwrap(), 0.0);
            }
        }
        assert_eq!(zero.complexity_upper_bound(2.0).unwrap(), 0.0);

        let shallow = NetworkState::new(array![[1.0, 0.0], [0.0, 1.0]], vec![], array![3.0, 4.0], None, ActivationKind::Relu).unwrap();
        assert_relative_eq!(shallow.group_norm(2, 2.0).unwrap(), (25.0f64 / 2.0).sqrt(), max_relative = 1e-15);
        assert_relative_eq!(shallow.group_norm(2, 2.0).unwrap(), 3.535534, epsilon = 1e-6);
        assert_eq!(shallow.group_norm(1, f64::INFINITY).unwrap(), 1.0);
        assert_relative_eq!(shallow.complexity_upper_bound(2.0).unwrap(), 1.0 * (12.5f64).sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn group_norm_errors() {
        let net = tiny_linear();
        assert!(matches!(net.group_norm(0, 2.0), Err(NhlError::LayerOutOfRange { .. })));
        assert!(matches!(net.group_norm(4, 2.0), Err(NhlError::LayerOutOfRange { .. })));
        assert!(matches!(net.group_norm(1, 1.5), Err(NhlError::InvalidExponent(_))));
        assert!(net.complexity_upper_bound(1.0).is_err());
    }

    #[test]
    fn effective_map_examples() {
        let v = tiny_linear().effective_linear_map().unwrap();
        assert_eq!(v, array![0.5, 0.5]);
        assert_eq!(v.dot(&array![2.0, 4.0]), 3.0);

        let mut zero_a = tiny_linear();
        zero_a.a.fill(0.0);
        assert_eq!(zero_a.effective_linear_map().unwrap(), Array1::<f64>::zeros(2));

        let relu = init_network::<f64>(&InitSpec::standard(3, 3, 2, ActivationKind::Relu, 0)).unwrap();
        assert!(matches!(relu.effective_linear_map(), Err(NhlError::Unsupported(_))));
        let biased = init_network::<f64>(&InitSpec { bias_enabled: true, ..InitSpec::standard(3, 3, 2, ActivationKind::Identity, 0) }).unwrap();
        assert!(biased.effective_linear_map().is_err());
    }

    #[test]
    fn effective_map_matches_forward_on_random_inputs() {
        let net = init_network::<f64>(&InitSpec::standard(4, 9, 3, ActivationKind::Identity, 17)).unwrap();
        let v = net.effective_linear_map().unwrap();
        let mut rng = rng_from_seed(1);
        for _ in 0..50 {
            let x: Array1<f64> = gaussian_vector(&mut rng, 3, 1.0);
            let f = net.forward(x.view()).unwrap().f;
            let lin = v.dot(&x);
            assert!((lin - f).abs() <= 1e-12 * f.abs().max(1e-300) + 1e-15, "{lin} vs {f}");
        }
    }

    #[test]
    fn new_rejects_inconsistent_shapes() {
        let err = NetworkState::new(array![[1.0, 0.0]], vec![array![[1.0, 2.0]]], array![1.0], None, ActivationKind::Relu);
        assert!(matches!(err, Err(NhlError::InvalidShape(_))));
        let err = NetworkState::new(array![[f64::NAN]], vec![], array![1.0], None, ActivationKind::Relu);
        assert!(err.is_err());
    }

    #[test]
    fn f32_and_f64_agree_on_small_nets() {
        let net = init_network::<f64>(&InitSpec::standard(3, 16, 2, ActivationKind::Tanh, 8)).unwrap();
        let net32: NetworkState<f32> = net.cast();
        let x = array![0.3, -0.4];
        let f64v = net.forward(x.view()).unwrap().f;
        let f32v = net32.forward(x.mapv(|v| v as f32).view()).unwrap().f;
        assert!((f64v - f32v as f64).abs() < 1e-5);
    }
}
