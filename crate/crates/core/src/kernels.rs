//! Empirical kernel ladder of a finite-width network.
//!
//! For hidden layer `l` the feature kernel is
//! `kappa(l)(x, x') = (1/m) sum_i sigma(h(l)_i(x)) sigma(h(l)_i(x'))` with
//! `kappa(0)(x, x') = x . x'`; the adjoint kernel is
//! `gamma(l)(x, x') = (1/m) sum_i q(l)_i(x) q(l)_i(x') sigma'(h(l)_i(x)) sigma'(h(l)_i(x'))`
//! with `gamma(L) = 1`. The tangent kernel
//! `theta = sum_{l=1..L} kappa(l-1) * gamma(l)` (entrywise) drives the output:
//! `df(x)/dt = -E_x'[zeta(x') theta(x, x')]`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::error::{NhlError, Result};
use crate::gradflow::adjoint_fields_batch;
use crate::net::{ActivationKind, NetworkState};
use crate::scalar::Scalar;

/// Relative tolerance used by the PSD check: eigenvalues down to
/// `-PSD_RTOL * trace / n` are accepted.
pub const PSD_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<F: Scalar> {
    pub label: String,
    pub entries: Array2<F>,
}

impl<F: Scalar> GramMatrix<F> {
    pub fn new(label: impl Into<String>, entries: Array2<F>) -> Result<Self> {
        if !entries.is_square() {
            return Err(NhlError::InvalidShape(format!("Gram matrix of shape {:?}", entries.dim())));
        }
        Ok(GramMatrix { label: label.into(), entries })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> F {
        self.entries.diag().sum()
    }

    pub fn max_asymmetry(&self) -> F {
        let e = &self.entries;
        Zip::from(e).and(&e.t()).fold(F::zero(), |acc, &a, &b| acc.max((a - b).abs()))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let sym = to_dmatrix(&self.entries.view());
        let sym = (&sym + sym.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Minimum eigenvalue is at least `-PSD_RTOL * trace / n`.
    pub fn is_psd(&self) -> bool {
        let n = self.n().max(1) as f64;
        self.min_eigenvalue() >= -PSD_RTOL * self.trace().as_f64().abs() / n
    }

    /// Writes `# gram label=<label> n=<n>` followed by the rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = File::create(path)?;
        writeln!(file, "# gram label={} n={}", self.label, self.n())?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        for row in self.entries.rows() {
            w.write_record(row.iter().map(|v| v.as_f64().to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let mut label = None;
        let mut n = None;
        for tok in header.trim().strip_prefix("# gram").unwrap_or("").split_whitespace() {
            if let Some(v) = tok.strip_prefix("label=") {
                label = Some(v.to_string());
            } else if let Some(v) = tok.strip_prefix("n=") {
                n = v.parse::<usize>().ok();
            }
        }
        let (label, n) = match (label, n) {
            (Some(l), Some(n)) => (l, n),
            _ => return Err(NhlError::Io(format!("{}: missing gram header", path.display()))),
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut values = Vec::with_capacity(n * n);
        for rec in rdr.records() {
            for field in rec?.iter() {
                let v: f64 = field.trim().parse().map_err(|e| NhlError::Io(format!("bad entry {field:?}: {e}")))?;
                values.push(F::lit(v));
            }
        }
        let entries = Array2::from_shape_vec((n, n), values)
            .map_err(|e| NhlError::Io(format!("{}: {e}", path.display())))?;
        GramMatrix::new(label, entries)
    }
}

fn to_dmatrix<F: Scalar>(a: &ArrayView2<F>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]].as_f64())
}

fn scaled_outer<F: Scalar>(a: &Array2<F>, scale: F) -> Array2<F> {
    let mut g = a.dot(&a.t());
    g.mapv_inplace(|v| v * scale);
    g
}

fn check_inputs<F: Scalar>(state: &NetworkState<F>, inputs: &ArrayView2<F>) -> Result<()> {
    if inputs.nrows() == 0 {
        return Err(NhlError::EmptyDataset);
    }
    if inputs.ncols() != state.input_dim() {
        return Err(NhlError::DimensionMismatch { expected: state.input_dim(), got: inputs.ncols() });
    }
    Ok(())
}

/// All feature and adjoint Grams from a single forward/backward pass.
/// `kappa[l]` is `kappa(l)` for `l = 0..L-1`; `gamma[l-1]` is `gamma(l)` for
/// `l = 1..L`.
#[derive(Debug, Clone)]
pub struct KernelLadder<F: Scalar> {
    pub kappa: Vec<Array2<F>>,
    pub gamma: Vec<Array2<F>>,
}

impl<F: Scalar> KernelLadder<F> {
    pub fn compute(state: &NetworkState<F>, inputs: ArrayView2<F>) -> Result<Self> {
        check_inputs(state, &inputs)?;
        let n = inputs.nrows();
        let inv_m = F::one() / F::from_usize_(state.width());
        let fw = state.forward_batch(inputs)?;
        let q = adjoint_fields_batch(state, &fw);
        let mut kappa = vec![inputs.dot(&inputs.t())];
        kappa.extend(fw.s.iter().map(|s| scaled_outer(s, inv_m)));
        let mut gamma: Vec<Array2<F>> = q
            .iter()
            .zip(&fw.h)
            .map(|(ql, hl)| {
                let mut g = ql.clone();
                if state.activation != ActivationKind::Identity {
                    Zip::from(&mut g).and(hl).for_each(|g, &h| *g = *g * state.activation.derivative(h));
                }
                scaled_outer(&g, inv_m)
            })
            .collect();
        gamma.push(Array2::from_elem((n, n), F::one()));
        Ok(KernelLadder { kappa, gamma })
    }

    /// `sum_l kappa(l-1) * gamma(l) + beta * sum_{l<L} gamma(l)`.
    pub fn tangent(&self, bias_rate: F) -> Array2<F> {
        let mut theta = Array2::zeros(self.kappa[0].raw_dim());
        for (k, g) in self.kappa.iter().zip(&self.gamma) {
            Zip::from(&mut theta).and(k).and(g).for_each(|t, &k, &g| *t = *t + k * g);
        }
        if bias_rate != F::zero() {
            for g in &self.gamma[..self.gamma.len() - 1] {
                theta.scaled_add(bias_rate, g);
            }
        }
        theta
    }
}

/// Feature kernel `kappa(l)` on the rows of `inputs`, `l = 0..=L-1`. Biases,
/// when present, are inside the activation.
pub fn layer_kernel_gram<F: Scalar>(state: &NetworkState<F>, inputs: ArrayView2<F>, l: usize) -> Result<GramMatrix<F>> {
    let depth = state.depth();
    if l > depth - 1 {
        return Err(NhlError::LayerOutOfRange { index: l, lo: 0, hi: depth - 1 });
    }
    check_inputs(state, &inputs)?;
    let entries = if l == 0 {
        inputs.dot(&inputs.t())
    } else {
        let fw = state.forward_batch(inputs)?;
        scaled_outer(&fw.s[l - 1], F::one() / F::from_usize_(state.width()))
    };
    GramMatrix::new(format!("kappa{l}"), entries)
}

/// Adjoint kernel `gamma(l)`, `l = 1..=L`.
pub fn gamma_gram<F: Scalar>(state: &NetworkState<F>, inputs: ArrayView2<F>, l: usize) -> Result<GramMatrix<F>> {
    let depth = state.depth();
    if l < 1 || l > depth {
        return Err(NhlError::LayerOutOfRange { index: l, lo: 1, hi: depth });
    }
    let mut ladder = KernelLadder::compute(state, inputs)?;
    GramMatrix::new(format!("gamma{l}"), ladder.gamma.swap_remove(l - 1))
}

/// Tangent kernel `theta` for untrained biases.
pub fn tangent_gram<F: Scalar>(state: &NetworkState<F>, inputs: ArrayView2<F>) -> Result<GramMatrix<F>> {
    tangent_gram_with_bias_rate(state, inputs, F::zero())
}

/// Tangent kernel when biases move at relative rate `beta`; adds
/// `beta * sum_{l<L} gamma(l)`. Identical to [`tangent_gram`] without biases.
pub fn tangent_gram_with_bias_rate<F: Scalar>(state: &NetworkState<F>, inputs: ArrayView2<F>, beta: F) -> Result<GramMatrix<F>> {
    let beta = if state.has_bias() { beta } else { F::zero() };
    let ladder = KernelLadder::compute(state, inputs)?;
    GramMatrix::new("theta", ladder.tangent(beta))
}

/// Outer product `y y^T` of target values.
pub fn target_gram<F: Scalar>(y: ArrayView1<F>) -> GramMatrix<F> {
    let col = y.insert_axis(ndarray::Axis(1));
    GramMatrix { label: "target".into(), entries: col.dot(&col.t()) }
}

fn centered<F: Scalar>(k: &Array2<F>) -> Array2<F> {
    let n = F::from_usize_(k.nrows());
    let row_means = k.sum_axis(ndarray::Axis(1)).mapv(|v| v / n);
    let col_means = k.sum_axis(ndarray::Axis(0)).mapv(|v| v / n);
    let total = row_means.sum() / n;
    Array2::from_shape_fn(k.dim(), |(i, j)| k[[i, j]] - row_means[i] - col_means[j] + total)
}

fn frob<F: Scalar>(a: &Array2<F>) -> F {
    a.iter().map(|&v| v * v).sum::<F>().sqrt()
}

/// Centered kernel alignment `<HKH, HK*H>_F / (|HKH|_F |HK*H|_F)`.
pub fn cka<F: Scalar>(k: &GramMatrix<F>, k_star: &GramMatrix<F>) -> Result<F> {
    if k.n() != k_star.n() {
        return Err(NhlError::DimensionMismatch { expected: k.n(), got: k_star.n() });
    }
    if k.n() == 0 {
        return Err(NhlError::EmptyDataset);
    }
    let kc = centered(&k.entries);
    let sc = centered(&k_star.entries);
    let (nk, ns) = (frob(&kc), frob(&sc));
    let tiny = F::lit(1e-12);
    for (label, nc, raw) in [(&k.label, nk, frob(&k.entries)), (&k_star.label, ns, frob(&k_star.entries))] {
        if !(nc > tiny * raw) || nc == F::zero() {
            return Err(NhlError::Degenerate(format!("centered Gram '{label}' has zero norm")));
        }
    }
    let inner = Zip::from(&kc).and(&sc).fold(F::zero(), |acc, &a, &b| acc + a * b);
    Ok(inner / (nk * ns))
}

/// Result of [`min_norm_in_span_or_ridge`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinNorm {
    pub value: f64,
    /// The ridge actually used.
    pub ridge: f64,
    /// Whether the default ridge replaced a singular `lambda = 0` solve.
    pub ridge_defaulted: bool,
}

/// `sqrt(y^T (K + lambda I)^{-1} y)`, the smallest RKHS seminorm of a function
/// taking `values` on the sample.
pub fn min_norm_in_span<F: Scalar>(k: &GramMatrix<F>, values: ArrayView1<F>, ridge: f64) -> Result<F> {
    if values.len() != k.n() {
        return Err(NhlError::DimensionMismatch { expected: k.n(), got: values.len() });
    }
    if !(ridge >= 0.0) {
        return Err(NhlError::InvalidParameter(format!("ridge = {ridge} must be >= 0")));
    }
    if values.iter().all(|v| *v == F::zero()) {
        return Ok(F::zero());
    }
    let n = k.n();
    let mut a = to_dmatrix(&k.entries.view());
    a = (&a + a.transpose()) * 0.5;
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let singular = || {
        NhlError::Singular(format!("K + {ridge} I is singular; pass a ridge lambda > 0"))
    };
    let chol = a.cholesky().ok_or_else(singular)?;
    let l = chol.l();
    let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-13 * max_diag) {
        return Err(singular());
    }
    let y = DVector::from_iterator(n, values.iter().map(|v| v.as_f64()));
    let sol = chol.solve(&y);
    Ok(F::lit(y.dot(&sol).max(0.0).sqrt()))
}

/// Like [`min_norm_in_span`], but a singular solve at `lambda = 0` falls back
/// to the ridge `1e-8 * trace(K) / n`, which is reported.
pub fn min_norm_in_span_or_ridge<F: Scalar>(k: &GramMatrix<F>, values: ArrayView1<F>, ridge: f64) -> Result<MinNorm> {
    match min_norm_in_span(k, values, ridge) {
        Ok(v) => Ok(MinNorm { value: v.as_f64(), ridge, ridge_defaulted: false }),
        Err(NhlError::Singular(_)) if ridge == 0.0 => {
            let fallback = default_ridge(k);
            let v = min_norm_in_span(k, values, fallback)?;
            Ok(MinNorm { value: v.as_f64(), ridge: fallback, ridge_defaulted: true })
        }
        Err(e) => Err(e),
    }
}

pub fn default_ridge<F: Scalar>(k: &GramMatrix<F>) -> f64 {
    let t = k.trace().as_f64().abs() / k.n().max(1) as f64;
    if t > 0.0 {
        1e-8 * t
    } else {
        1e-8
    }
}

/// `-E_x'[zeta(x') theta(x, x')]` for every row `x` of the Gram.
pub fn kernel_velocity<F: Scalar>(theta: &GramMatrix<F>, zeta: ArrayView1<F>) -> Array1<F> {
    let n = F::from_usize_(zeta.len());
    theta.entries.dot(&zeta).mapv(|v| -v / n)
}
