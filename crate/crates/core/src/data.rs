//! Training sets: inputs stored as rows plus target values.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NhlError, Result};
use crate::net::NetworkState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F: Scalar> {
    pub x: Array2<F>,
    pub y: Array1<F>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(x: Array2<F>, y: Array1<F>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(NhlError::EmptyDataset);
        }
        if x.nrows() != y.len() {
            return Err(NhlError::DimensionMismatch { expected: x.nrows(), got: y.len() });
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Empirical second moment `(1/n) sum_k x_k x_k^T`.
    pub fn second_moment(&self) -> Array2<F> {
        let n = F::from_usize_(self.len());
        self.x.t().dot(&self.x).mapv(|v| v / n)
    }

    /// Mean of `|x|^2` over the inputs.
    pub fn mean_sq_norm(&self) -> F {
        mean_sq_norm(&self.x)
    }

    /// Rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Dataset { x: self.x.select(Axis(0), perm), y: self.y.select(Axis(0), perm) }
    }
}

pub fn mean_sq_norm<F: Scalar>(x: &Array2<F>) -> F {
    let n = F::from_usize_(x.nrows().max(1));
    x.rows().into_iter().map(|r| r.dot(&r)).sum::<F>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputDist {
    /// Standard Gaussian `N(0, I_d)`.
    Gaussian,
    /// Independent uniform coordinates on `[lo, hi]`.
    UniformInterval { lo: f64, hi: f64 },
    /// Uniform on the unit ball of `R^d`.
    UnitBall,
}

impl InputDist {
    pub fn sample<F: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, n: usize, d: usize) -> Array2<F> {
        match *self {
            InputDist::Gaussian => Array2::from_shape_simple_fn((n, d), || {
                let u: f64 = rng.sample(StandardNormal);
                F::lit(u)
            }),
            InputDist::UniformInterval { lo, hi } => {
                Array2::from_shape_simple_fn((n, d), || F::lit(lo + (hi - lo) * rng.random::<f64>()))
            }
            InputDist::UnitBall => {
                let mut out = Array2::zeros((n, d));
                for mut row in out.rows_mut() {
                    let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    let radius = rng.random::<f64>().powf(1.0 / d as f64);
                    for (dst, v) in row.iter_mut().zip(g) {
                        *dst = F::lit(radius * v / norm);
                    }
                }
                out
            }
        }
    }
}

/// Pyramid `max{1 - |x|_1, 0}`.
pub fn pyramid<F: Scalar>(x: ArrayView1<F>) -> F {
    let l1 = x.iter().map(|v| v.abs()).sum::<F>();
    (F::one() - l1).max(F::zero())
}

/// Radial bump: 1 inside radius `eps0`, linear decay to 0 at radius 1.
pub fn radial_bump<F: Scalar>(x: ArrayView1<F>, eps0: F) -> Result<F> {
    if !(eps0 > F::zero() && eps0 < F::one()) {
        return Err(NhlError::InvalidParameter(format!("eps0 = {eps0} must lie in (0, 1)")));
    }
    let r = x.dot(&x).sqrt();
    Ok(if r <= eps0 {
        F::one()
    } else if r <= F::one() {
        F::one() - (r - eps0) / (F::one() - eps0)
    } else {
        F::zero()
    })
}

/// Target function evaluated on sampled inputs.
#[derive(Debug, Clone)]
pub enum Target<F: Scalar> {
    Linear(Array1<F>),
    /// `sin(2 x_1)`.
    Sin2x,
    Pyramid,
    RadialBump(F),
    Teacher(Box<NetworkState<F>>),
}

impl<F: Scalar> Target<F> {
    pub fn eval(&self, x: ArrayView1<F>) -> Result<F> {
        match self {
            Target::Linear(v) => {
                if v.len() != x.len() {
                    return Err(NhlError::DimensionMismatch { expected: v.len(), got: x.len() });
                }
                Ok(v.dot(&x))
            }
            Target::Sin2x => Ok((F::lit(2.0) * x[0]).sin()),
            Target::Pyramid => Ok(pyramid(x)),
            Target::RadialBump(eps0) => radial_bump(x, *eps0),
            Target::Teacher(net) => Ok(net.forward(x)?.f),
        }
    }

    pub fn eval_rows(&self, x: &Array2<F>) -> Result<Array1<F>> {
        if let Target::Teacher(net) = self {
            return net.predict(x.view());
        }
        x.rows().into_iter().map(|r| self.eval(r)).collect::<Result<Vec<_>>>().map(Array1::from)
    }

    pub fn dataset<R: Rng + ?Sized>(&self, dist: &InputDist, n: usize, d: usize, rng: &mut R) -> Result<Dataset<F>> {
        let x = dist.sample(rng, n, d);
        let y = self.eval_rows(&x)?;
        Dataset::new(x, y)
    }
}
