//! Callback building blocks for linear-quadratic problems. Matrices are read
//! row-major from their parameter segments.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::SmoothMap;

fn mat(phi: &DVector<f64>, offset: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &phi.as_slice()[offset..offset + rows * cols])
}

/// `x'Qx + u'Ru` with `Q` and `R` taken from the parameters.
#[derive(Debug, Clone)]
pub struct QuadraticStageCost {
    pub n: usize,
    pub m: usize,
    pub q_offset: usize,
    pub r_offset: usize,
    pub n_params: usize,
}

impl QuadraticStageCost {
    fn split(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (v.rows(0, self.n).into_owned(), v.rows(self.n, self.m).into_owned())
    }
}

impl SmoothMap for QuadraticStageCost {
    fn name(&self) -> &str {
        "stage_cost"
    }
    fn in_dim(&self) -> usize {
        self.n + self.m
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        let (x, u) = self.split(v);
        let q = mat(phi, self.q_offset, self.n, self.n);
        let r = mat(phi, self.r_offset, self.m, self.m);
        DVector::from_element(1, (x.transpose() * q * &x)[0] + (u.transpose() * r * &u)[0])
    }
    fn jac(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
        let (x, u) = self.split(v);
        let q = mat(phi, self.q_offset, self.n, self.n);
        let r = mat(phi, self.r_offset, self.m, self.m);
        let gx = (&q + q.transpose()) * x;
        let gu = (&r + r.transpose()) * u;
        let mut j = DMatrix::zeros(1, self.n + self.m);
        for i in 0..self.n {
            j[(0, i)] = gx[i];
        }
        for i in 0..self.m {
            j[(0, self.n + i)] = gu[i];
        }
        j
    }
    fn jac_phi(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        let (x, u) = self.split(v);
        let mut j = DMatrix::zeros(1, self.n_params);
        for a in 0..self.n {
            for b in 0..self.n {
                j[(0, self.q_offset + a * self.n + b)] = x[a] * x[b];
            }
        }
        for a in 0..self.m {
            for b in 0..self.m {
                j[(0, self.r_offset + a * self.m + b)] = u[a] * u[b];
            }
        }
        j
    }
    fn hess(&self, _v: &DVector<f64>, phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let q = mat(phi, self.q_offset, self.n, self.n);
        let r = mat(phi, self.r_offset, self.m, self.m);
        let mut h = DMatrix::zeros(self.n + self.m, self.n + self.m);
        h.view_mut((0, 0), (self.n, self.n)).copy_from(&((&q + q.transpose()) * w[0]));
        h.view_mut((self.n, self.n), (self.m, self.m))
            .copy_from(&((&r + r.transpose()) * w[0]));
        Some(h)
    }
    fn hess_phi(&self, v: &DVector<f64>, _phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (x, u) = self.split(v);
        let mut h = DMatrix::zeros(self.n + self.m, self.n_params);
        // d/dx_c (x_a x_b) = delta_ca x_b + delta_cb x_a
        for a in 0..self.n {
            for b in 0..self.n {
                let col = self.q_offset + a * self.n + b;
                h[(a, col)] += w[0] * x[b];
                h[(b, col)] += w[0] * x[a];
            }
        }
        for a in 0..self.m {
            for b in 0..self.m {
                let col = self.r_offset + a * self.m + b;
                h[(self.n + a, col)] += w[0] * u[b];
                h[(self.n + b, col)] += w[0] * u[a];
            }
        }
        Some(h)
    }
}

/// `x'Px + c`, with `c` optional.
#[derive(Debug, Clone)]
pub struct QuadraticTerminalCost {
    pub n: usize,
    pub p_offset: usize,
    pub constant_offset: Option<usize>,
    pub n_params: usize,
}

impl SmoothMap for QuadraticTerminalCost {
    fn name(&self) -> &str {
        "terminal_cost"
    }
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        let p = mat(phi, self.p_offset, self.n, self.n);
        let c = self.constant_offset.map_or(0.0, |o| phi[o]);
        DVector::from_element(1, (x.transpose() * p * x)[0] + c)
    }
    fn jac(&self, x: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
        let p = mat(phi, self.p_offset, self.n, self.n);
        DMatrix::from_row_slice(1, self.n, ((&p + p.transpose()) * x).as_slice())
    }
    fn jac_phi(&self, x: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(1, self.n_params);
        for a in 0..self.n {
            for b in 0..self.n {
                j[(0, self.p_offset + a * self.n + b)] = x[a] * x[b];
            }
        }
        if let Some(o) = self.constant_offset {
            j[(0, o)] = 1.0;
        }
        j
    }
    fn hess(&self, _x: &DVector<f64>, phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let p = mat(phi, self.p_offset, self.n, self.n);
        Some((&p + p.transpose()) * w[0])
    }
    fn hess_phi(&self, x: &DVector<f64>, _phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.n, self.n_params);
        for a in 0..self.n {
            for b in 0..self.n {
                let col = self.p_offset + a * self.n + b;
                h[(a, col)] += w[0] * x[b];
                h[(b, col)] += w[0] * x[a];
            }
        }
        Some(h)
    }
}

/// `f(x, u) = Ax + Bu`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    pub n: usize,
    pub m: usize,
    pub a_offset: usize,
    pub b_offset: usize,
    pub n_params: usize,
}

impl SmoothMap for LinearDynamics {
    fn name(&self) -> &str {
        "dynamics"
    }
    fn in_dim(&self) -> usize {
        self.n + self.m
    }
    fn out_dim(&self) -> usize {
        self.n
    }
    fn eval(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        self.jac(v, phi) * v
    }
    fn jac(&self, _v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n, self.n + self.m);
        j.view_mut((0, 0), (self.n, self.n))
            .copy_from(&mat(phi, self.a_offset, self.n, self.n));
        j.view_mut((0, self.n), (self.n, self.m))
            .copy_from(&mat(phi, self.b_offset, self.n, self.m));
        j
    }
    fn jac_phi(&self, v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n, self.n_params);
        for i in 0..self.n {
            for c in 0..self.n {
                j[(i, self.a_offset + i * self.n + c)] = v[c];
            }
            for c in 0..self.m {
                j[(i, self.b_offset + i * self.m + c)] = v[self.n + c];
            }
        }
        j
    }
    fn hess(&self, _v: &DVector<f64>, _phi: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.n + self.m, self.n + self.m))
    }
    fn hess_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.n + self.m, self.n_params);
        for i in 0..self.n {
            for c in 0..self.n {
                h[(c, self.a_offset + i * self.n + c)] = w[i];
            }
            for c in 0..self.m {
                h[(self.n + c, self.b_offset + i * self.m + c)] = w[i];
            }
        }
        Some(h)
    }
}

/// `h(x, u) = [u - u_hi; u_lo - u] <= 0` with the bounds as parameters.
#[derive(Debug, Clone)]
pub struct InputBox {
    pub n: usize,
    pub m: usize,
    pub lo_offset: usize,
    pub hi_offset: usize,
    pub n_params: usize,
}

impl SmoothMap for InputBox {
    fn name(&self) -> &str {
        "input_bounds"
    }
    fn in_dim(&self) -> usize {
        self.n + self.m
    }
    fn out_dim(&self) -> usize {
        2 * self.m
    }
    fn eval(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(2 * self.m, |i, _| {
            if i < self.m {
                v[self.n + i] - phi[self.hi_offset + i]
            } else {
                let j = i - self.m;
                phi[self.lo_offset + j] - v[self.n + j]
            }
        })
    }
    fn jac(&self, _v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.m, self.n + self.m);
        for i in 0..self.m {
            j[(i, self.n + i)] = 1.0;
            j[(self.m + i, self.n + i)] = -1.0;
        }
        j
    }
    fn jac_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.m, self.n_params);
        for i in 0..self.m {
            j[(i, self.hi_offset + i)] = -1.0;
            j[(self.m + i, self.lo_offset + i)] = 1.0;
        }
        j
    }
    fn hess(&self, _v: &DVector<f64>, _phi: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.n + self.m, self.n + self.m))
    }
    fn hess_phi(&self, _v: &DVector<f64>, _phi: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.n + self.m, self.n_params))
    }
}

/// A stage cost plus a fixed linear term `c'u`.
#[derive(Debug, Clone)]
pub struct LinearCostPerturbation {
    pub inner: Arc<dyn SmoothMap>,
    pub n: usize,
    pub c: DVector<f64>,
}

impl SmoothMap for LinearCostPerturbation {
    fn name(&self) -> &str {
        "perturbed_stage_cost"
    }
    fn in_dim(&self) -> usize {
        self.inner.in_dim()
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        let u = v.rows(self.n, self.c.len());
        let mut y = self.inner.eval(v, phi);
        y[0] += self.c.dot(&u);
        y
    }
    fn jac(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
        let mut j = self.inner.jac(v, phi);
        for i in 0..self.c.len() {
            j[(0, self.n + i)] += self.c[i];
        }
        j
    }
    fn jac_phi(&self, v: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jac_phi(v, phi)
    }
    fn hess(&self, v: &DVector<f64>, phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner.hess(v, phi, w)
    }
    fn hess_phi(&self, v: &DVector<f64>, phi: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner.hess_phi(v, phi, w)
    }
}
