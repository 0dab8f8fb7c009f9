use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::StateVec;
use crate::ocp::SmoothMap;

/// Ridge weight used when the feature matrix is rank deficient.
pub const RIDGE_FALLBACK: f64 = 1e-8;

/// Feature maps for `V(s) = w' features(s)`. Quadratic and radial-basis
/// features act on the normalized state `z = (s - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueFeatures {
    /// `[1]`
    Constant,
    /// `[1, z_i, z_i z_j (i <= j)]`
    Quadratic { center: Vec<f64>, scale: Vec<f64> },
    /// `[1, exp(-|z - c_k|^2 / (2 width^2))]`
    Rbf {
        center: Vec<f64>,
        scale: Vec<f64>,
        centers: Vec<Vec<f64>>,
        width: f64,
    },
}

impl ValueFeatures {
    /// Number of features for an `n`-dimensional state.
    pub fn len(&self, n: usize) -> usize {
        match self {
            ValueFeatures::Constant => 1,
            ValueFeatures::Quadratic { .. } => 1 + n + n * (n + 1) / 2,
            ValueFeatures::Rbf { centers, .. } => 1 + centers.len(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let check_norm = |center: &[f64], scale: &[f64]| -> Result<()> {
            if center.len() != n {
                return Err(Error::dim("feature center", n, center.len()));
            }
            if scale.len() != n {
                return Err(Error::dim("feature scale", n, scale.len()));
            }
            if scale.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                return Err(Error::InvalidArgument("feature scales must be positive".into()));
            }
            Ok(())
        };
        match self {
            ValueFeatures::Constant => Ok(()),
            ValueFeatures::Quadratic { center, scale } => check_norm(center, scale),
            ValueFeatures::Rbf {
                center,
                scale,
                centers,
                width,
            } => {
                check_norm(center, scale)?;
                if !(*width > 0.0) {
                    return Err(Error::InvalidArgument("rbf width must be positive".into()));
                }
                for c in centers {
                    if c.len() != n {
                        return Err(Error::dim("rbf center", n, c.len()));
                    }
                }
                Ok(())
            }
        }
    }

    fn normalize(center: &[f64], scale: &[f64], s: &[f64]) -> Vec<f64> {
        s.iter().zip(center).zip(scale).map(|((x, c), d)| (x - c) / d).collect()
    }

    fn rbf(z: &[f64], c: &[f64], width: f64) -> f64 {
        let d2: f64 = z.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
        (-d2 / (2.0 * width * width)).exp()
    }

    pub fn eval(&self, s: &[f64]) -> DVector<f64> {
        let n = s.len();
        let mut out = Vec::with_capacity(self.len(n));
        out.push(1.0);
        match self {
            ValueFeatures::Constant => {}
            ValueFeatures::Quadratic { center, scale } => {
                let z = Self::normalize(center, scale, s);
                out.extend_from_slice(&z);
                for i in 0..n {
                    for j in i..n {
                        out.push(z[i] * z[j]);
                    }
                }
            }
            ValueFeatures::Rbf {
                center,
                scale,
                centers,
                width,
            } => {
                let z = Self::normalize(center, scale, s);
                out.extend(centers.iter().map(|c| Self::rbf(&z, c, *width)));
            }
        }
        DVector::from_vec(out)
    }

    /// `k x n`
    pub fn jac(&self, s: &[f64]) -> DMatrix<f64> {
        let n = s.len();
        let mut j = DMatrix::zeros(self.len(n), n);
        match self {
            ValueFeatures::Constant => {}
            ValueFeatures::Quadratic { center, scale } => {
                let z = Self::normalize(center, scale, s);
                for i in 0..n {
                    j[(1 + i, i)] = 1.0 / scale[i];
                }
                let mut row = 1 + n;
                for i in 0..n {
                    for k in i..n {
                        j[(row, i)] += z[k] / scale[i];
                        j[(row, k)] += z[i] / scale[k];
                        row += 1;
                    }
                }
            }
            ValueFeatures::Rbf {
                center,
                scale,
                centers,
                width,
            } => {
                let z = Self::normalize(center, scale, s);
                let w2 = width * width;
                for (k, c) in centers.iter().enumerate() {
                    let f = Self::rbf(&z, c, *width);
                    for i in 0..n {
                        j[(1 + k, i)] = -f * (z[i] - c[i]) / (w2 * scale[i]);
                    }
                }
            }
        }
        j
    }

    /// `sum_k w_k d2 features_k / ds2`, `n x n`
    pub fn weighted_hessian(&self, s: &[f64], w: &DVector<f64>) -> DMatrix<f64> {
        let n = s.len();
        let mut h = DMatrix::zeros(n, n);
        match self {
            ValueFeatures::Constant => {}
            ValueFeatures::Quadratic { scale, .. } => {
                let mut row = 1 + n;
                for i in 0..n {
                    for k in i..n {
                        let c = w[row] / (scale[i] * scale[k]);
                        h[(i, k)] += c;
                        h[(k, i)] += c;
                        row += 1;
                    }
                }
            }
            ValueFeatures::Rbf {
                center,
                scale,
                centers,
                width,
            } => {
                let z = Self::normalize(center, scale, s);
                let w2 = width * width;
                for (k, c) in centers.iter().enumerate() {
                    let f = Self::rbf(&z, c, *width) * w[1 + k];
                    for i in 0..n {
                        for l in 0..n {
                            let mut v = (z[i] - c[i]) * (z[l] - c[l]) / (w2 * w2);
                            if i == l {
                                v -= 1.0 / w2;
                            }
                            h[(i, l)] += f * v / (scale[i] * scale[l]);
                        }
                    }
                }
            }
        }
        h
    }
}

/// Fitted `V(s) = w' features(s)` in reward units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueModel {
    pub features: ValueFeatures,
    pub weights: Vec<f64>,
    pub state_dim: usize,
}

impl ValueModel {
    pub fn new(features: ValueFeatures, weights: Vec<f64>, state_dim: usize) -> Result<Self> {
        features.validate(state_dim)?;
        if weights.len() != features.len(state_dim) {
            return Err(Error::dim("value weights", features.len(state_dim), weights.len()));
        }
        Ok(Self {
            features,
            weights,
            state_dim,
        })
    }

    fn w(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        self.features.eval(s).dot(&self.w())
    }

    pub fn gradient(&self, s: &[f64]) -> DVector<f64> {
        self.features.jac(s).transpose() * self.w()
    }

    pub fn hessian(&self, s: &[f64]) -> DMatrix<f64> {
        self.features.weighted_hessian(s, &self.w())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFit {
    pub model: ValueModel,
    /// Root-mean-square residual on the training data.
    pub rmse: f64,
    /// The ridge fallback was needed.
    pub ridge: bool,
}

/// Least-squares regression of returns on features. A rank-deficient
/// design falls back to ridge regression with weight [`RIDGE_FALLBACK`].
pub fn fit_value_function(data: &[(StateVec, f64)], features: &ValueFeatures) -> Result<ValueFit> {
    let Some((first, _)) = data.first() else {
        return Err(Error::InvalidArgument("value fit needs at least one sample".into()));
    };
    let n = first.len();
    features.validate(n)?;
    let k = features.len(n);
    let mut phi = DMatrix::zeros(data.len(), k);
    let mut g = DVector::zeros(data.len());
    for (row, (s, ret)) in data.iter().enumerate() {
        if s.len() != n {
            return Err(Error::dim("value sample state", n, s.len()));
        }
        if !ret.is_finite() {
            return Err(Error::NonFinite(format!("return of sample {row}")));
        }
        phi.set_row(row, &features.eval(s.as_slice()).transpose());
        g[row] = *ret;
    }
    let full_rank = linalg::rank(&phi, 1e-10) == k;
    let w = if full_rank {
        phi.clone()
            .svd(true, true)
            .solve(&g, 0.0)
            .map_err(|e| Error::InvalidArgument(format!("least squares failed: {e}")))?
    } else {
        log::warn!("value features are rank deficient; using ridge weight {RIDGE_FALLBACK:e}");
        let lhs = phi.transpose() * &phi + DMatrix::identity(k, k) * RIDGE_FALLBACK;
        linalg::solve_square(&lhs, &(phi.transpose() * &g))
            .ok_or_else(|| Error::InvalidArgument("ridge system is singular".into()))?
    };
    let resid = &phi * &w - &g;
    let rmse = (resid.norm_squared() / data.len() as f64).sqrt();
    Ok(ValueFit {
        model: ValueModel::new(features.clone(), w.iter().copied().collect(), n)?,
        rmse,
        ridge: !full_rank,
    })
}

/// Terminal cost `-V(center + scale * v)`: a learned value in reward units
/// turned into an OCP cost, with an affine map from OCP to environment
/// coordinates. Parameter-free.
#[derive(Debug, Clone)]
pub struct ValueTerminalCost {
    pub model: ValueModel,
    pub input_center: DVector<f64>,
    pub input_scale: DVector<f64>,
    pub n_params: usize,
}

impl ValueTerminalCost {
    /// Identity coordinates.
    pub fn new(model: ValueModel, n_params: usize) -> Self {
        let n = model.state_dim;
        Self {
            model,
            input_center: DVector::zeros(n),
            input_scale: DVector::from_element(n, 1.0),
            n_params,
        }
    }

    fn state(&self, v: &DVector<f64>) -> Vec<f64> {
        (0..v.len()).map(|i| self.input_center[i] + self.input_scale[i] * v[i]).collect()
    }
}

impl SmoothMap for ValueTerminalCost {
    fn name(&self) -> &str {
        "value_terminal_cost"
    }
    fn in_dim(&self) -> usize {
        self.model.state_dim
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, -self.model.value(&self.state(v)))
    }
    fn jac(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        let g = self.model.gradient(&self.state(v));
        DMatrix::from_fn(1, v.len(), |_, i| -g[i] * self.input_scale[i])
    }
    fn jac_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, self.n_params)
    }
    fn hess(&self, v: &DVector<f64>, _phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let h = self.model.hessian(&self.state(v));
        Some(DMatrix::from_fn(v.len(), v.len(), |i, j| {
            -w[0] * h[(i, j)] * self.input_scale[i] * self.input_scale[j]
        }))
    }
    fn hess_phi(&self, v: &DVector<f64>, _phi: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(v.len(), self.n_params))
    }
}
