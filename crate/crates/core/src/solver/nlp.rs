//! Multiple-shooting transcription of an [`OcpSpec`].
//!
//! Decision vector `z = [x_1 .. x_H, u_0 .. u_{H-1}]`; `x_0 = s` is data.
//! Equality rows: `x_{k+1} - f(x_k, u_k)` for each `k`, then `g(x_k, u_k)`
//! for each `k`, then `u_0 - a` when the first input is pinned.
//! Inequality rows: `h(x_k, u_k)` for each `k`.

use nalgebra::{DMatrix, DVector};

use crate::ocp::{stack, weighted_hessian, weighted_mixed, OcpSpec};

pub(crate) struct Transcription<'a> {
    pub spec: &'a OcpSpec,
    pub s: &'a DVector<f64>,
    pub pin: Option<&'a DVector<f64>>,
}

/// Offsets of one stage's `(x_k, u_k)` inside `z`; `x` is `None` for `k = 0`.
#[derive(Clone, Copy)]
struct StageIndex {
    x: Option<usize>,
    u: usize,
}

impl<'a> Transcription<'a> {
    pub fn new(spec: &'a OcpSpec, s: &'a DVector<f64>, pin: Option<&'a DVector<f64>>) -> Self {
        Self { spec, s, pin }
    }

    fn n(&self) -> usize {
        self.spec.state_dim()
    }

    fn m(&self) -> usize {
        self.spec.action_dim()
    }

    fn h(&self) -> usize {
        self.spec.horizon()
    }

    fn phi(&self) -> &DVector<f64> {
        self.spec.params().values()
    }

    pub fn nz(&self) -> usize {
        self.h() * (self.n() + self.m())
    }

    /// Offset of `x_k`, `k >= 1`.
    pub fn x_offset(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.h());
        (k - 1) * self.n()
    }

    pub fn u_offset(&self, k: usize) -> usize {
        self.h() * self.n() + k * self.m()
    }

    fn stage(&self, k: usize) -> StageIndex {
        StageIndex {
            x: (k > 0).then(|| self.x_offset(k)),
            u: self.u_offset(k),
        }
    }

    pub fn state(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        if k == 0 {
            self.s.clone()
        } else {
            z.rows(self.x_offset(k), self.n()).into_owned()
        }
    }

    pub fn input(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        z.rows(self.u_offset(k), self.m()).into_owned()
    }

    fn stage_arg(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        stack(&self.state(z, k), &self.input(z, k))
    }

    pub fn n_eq(&self) -> usize {
        self.h() * (self.n() + self.spec.n_eq()) + self.pin.map_or(0, |a| a.len())
    }

    pub fn n_in(&self) -> usize {
        self.h() * self.spec.n_ineq()
    }

    fn g_row(&self, k: usize) -> usize {
        self.h() * self.n() + k * self.spec.n_eq()
    }

    fn pin_row(&self) -> usize {
        self.h() * (self.n() + self.spec.n_eq())
    }

    /// Forward simulation of the model under the given inputs (pinned input
    /// overrides `u_0`).
    pub fn simulate(&self, inputs: &[DVector<f64>]) -> DVector<f64> {
        let mut z = DVector::zeros(self.nz());
        let mut x = self.s.clone();
        for (k, u) in inputs.iter().enumerate().take(self.h()) {
            let u = match (k, self.pin) {
                (0, Some(a)) => a.clone(),
                _ => u.clone(),
            };
            z.rows_mut(self.u_offset(k), self.m()).copy_from(&u);
            x = self.spec.dynamics.eval(&stack(&x, &u), self.phi());
            z.rows_mut(self.x_offset(k + 1), self.n()).copy_from(&x);
        }
        z
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        let phi = self.phi();
        let mut total = 0.0;
        for k in 0..self.h() {
            total += self.spec.stage_weight(k) * self.spec.stage_cost.eval(&self.stage_arg(z, k), phi)[0];
        }
        total + self.spec.stage_weight(self.h()) * self.spec.terminal_cost.eval(&self.state(z, self.h()), phi)[0]
    }

    fn scatter_row(&self, out: &mut DMatrix<f64>, row: usize, idx: StageIndex, block: &DMatrix<f64>, scale: f64) {
        let (n, m) = (self.n(), self.m());
        for r in 0..block.nrows() {
            if let Some(xo) = idx.x {
                for c in 0..n {
                    out[(row + r, xo + c)] += scale * block[(r, c)];
                }
            }
            for c in 0..m {
                out[(row + r, idx.u + c)] += scale * block[(r, n + c)];
            }
        }
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let phi = self.phi();
        let mut grad = DMatrix::zeros(1, self.nz());
        for k in 0..self.h() {
            let j = self.spec.stage_cost.jac(&self.stage_arg(z, k), phi);
            self.scatter_row(&mut grad, 0, self.stage(k), &j, self.spec.stage_weight(k));
        }
        let h = self.h();
        let jt = self.spec.terminal_cost.jac(&self.state(z, h), phi);
        let xo = self.x_offset(h);
        for c in 0..self.n() {
            grad[(0, xo + c)] += self.spec.stage_weight(h) * jt[(0, c)];
        }
        grad.transpose().column(0).into_owned()
    }

    pub fn eq_values(&self, z: &DVector<f64>) -> DVector<f64> {
        let phi = self.phi();
        let n = self.n();
        let mut c = DVector::zeros(self.n_eq());
        for k in 0..self.h() {
            let v = self.stage_arg(z, k);
            let next = self.state(z, k + 1) - self.spec.dynamics.eval(&v, phi);
            c.rows_mut(k * n, n).copy_from(&next);
            if let Some(g) = &self.spec.eq_constraints {
                c.rows_mut(self.g_row(k), g.out_dim()).copy_from(&g.eval(&v, phi));
            }
        }
        if let Some(a) = self.pin {
            let row = self.pin_row();
            c.rows_mut(row, a.len()).copy_from(&(self.input(z, 0) - a));
        }
        c
    }

    pub fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let phi = self.phi();
        let n = self.n();
        let mut jac = DMatrix::zeros(self.n_eq(), self.nz());
        for k in 0..self.h() {
            let v = self.stage_arg(z, k);
            let xo = self.x_offset(k + 1);
            for i in 0..n {
                jac[(k * n + i, xo + i)] = 1.0;
            }
            self.scatter_row(&mut jac, k * n, self.stage(k), &self.spec.dynamics.jac(&v, phi), -1.0);
            if let Some(g) = &self.spec.eq_constraints {
                self.scatter_row(&mut jac, self.g_row(k), self.stage(k), &g.jac(&v, phi), 1.0);
            }
        }
        if let Some(a) = self.pin {
            let row = self.pin_row();
            for i in 0..a.len() {
                jac[(row + i, self.u_offset(0) + i)] = 1.0;
            }
        }
        jac
    }

    pub fn ineq_values(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(self.n_in());
        if let Some(h) = &self.spec.ineq_constraints {
            let nh = h.out_dim();
            for k in 0..self.h() {
                c.rows_mut(k * nh, nh).copy_from(&h.eval(&self.stage_arg(z, k), self.phi()));
            }
        }
        c
    }

    pub fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n_in(), self.nz());
        if let Some(h) = &self.spec.ineq_constraints {
            let nh = h.out_dim();
            for k in 0..self.h() {
                let j = h.jac(&self.stage_arg(z, k), self.phi());
                self.scatter_row(&mut jac, k * nh, self.stage(k), &j, 1.0);
            }
        }
        jac
    }

    fn scatter_square(&self, out: &mut DMatrix<f64>, idx: StageIndex, block: &DMatrix<f64>) {
        let (n, m) = (self.n(), self.m());
        let pos = |i: usize| -> Option<usize> {
            if i < n {
                idx.x.map(|xo| xo + i)
            } else {
                Some(idx.u + i - n)
            }
        };
        for r in 0..n + m {
            let Some(pr) = pos(r) else { continue };
            for c in 0..n + m {
                if let Some(pc) = pos(c) {
                    out[(pr, pc)] += block[(r, c)];
                }
            }
        }
    }

    fn stage_multipliers(&self, lambda: &DVector<f64>, mu: &DVector<f64>, k: usize) -> (DVector<f64>, Option<DVector<f64>>, Option<DVector<f64>>) {
        let n = self.n();
        let dyn_w = -lambda.rows(k * n, n).into_owned();
        let g_w = self
            .spec
            .eq_constraints
            .as_ref()
            .map(|g| lambda.rows(self.g_row(k), g.out_dim()).into_owned());
        let h_w = self
            .spec
            .ineq_constraints
            .as_ref()
            .map(|h| mu.rows(k * h.out_dim(), h.out_dim()).into_owned());
        (dyn_w, g_w, h_w)
    }

    /// Hessian of the Lagrangian in `z`. The flag reports whether any
    /// callback needed the finite-difference fallback.
    pub fn lagrangian_hessian(&self, z: &DVector<f64>, lambda: &DVector<f64>, mu: &DVector<f64>) -> (DMatrix<f64>, bool) {
        let phi = self.phi();
        let nz = self.nz();
        let mut hess = DMatrix::zeros(nz, nz);
        let mut approx = false;
        for k in 0..self.h() {
            let v = self.stage_arg(z, k);
            let (dyn_w, g_w, h_w) = self.stage_multipliers(lambda, mu, k);
            let w_cost = DVector::from_element(1, self.spec.stage_weight(k));
            let (mut block, a1) = weighted_hessian(self.spec.stage_cost.as_ref(), &v, phi, &w_cost);
            let (bd, a2) = weighted_hessian(self.spec.dynamics.as_ref(), &v, phi, &dyn_w);
            block += bd;
            approx |= a1 || a2;
            if let (Some(g), Some(w)) = (&self.spec.eq_constraints, g_w) {
                let (bg, a) = weighted_hessian(g.as_ref(), &v, phi, &w);
                block += bg;
                approx |= a;
            }
            if let (Some(h), Some(w)) = (&self.spec.ineq_constraints, h_w) {
                let (bh, a) = weighted_hessian(h.as_ref(), &v, phi, &w);
                block += bh;
                approx |= a;
            }
            self.scatter_square(&mut hess, self.stage(k), &block);
        }
        let h = self.h();
        let w_term = DVector::from_element(1, self.spec.stage_weight(h));
        let (bt, a) = weighted_hessian(self.spec.terminal_cost.as_ref(), &self.state(z, h), phi, &w_term);
        approx |= a;
        let xo = self.x_offset(h);
        let n = self.n();
        for r in 0..n {
            for c in 0..n {
                hess[(xo + r, xo + c)] += bt[(r, c)];
            }
        }
        (hess, approx)
    }

    /// `dL/dphi` at fixed `(z, lambda, mu)`.
    pub fn lagrangian_param_gradient(&self, z: &DVector<f64>, lambda: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        let phi = self.phi();
        let p = phi.len();
        let mut grad = DVector::zeros(p);
        for k in 0..self.h() {
            let v = self.stage_arg(z, k);
            let (dyn_w, g_w, h_w) = self.stage_multipliers(lambda, mu, k);
            grad += self.spec.stage_cost.jac_phi(&v, phi).transpose().column(0) * self.spec.stage_weight(k);
            grad += self.spec.dynamics.jac_phi(&v, phi).transpose() * dyn_w;
            if let (Some(g), Some(w)) = (&self.spec.eq_constraints, g_w) {
                grad += g.jac_phi(&v, phi).transpose() * w;
            }
            if let (Some(h), Some(w)) = (&self.spec.ineq_constraints, h_w) {
                grad += h.jac_phi(&v, phi).transpose() * w;
            }
        }
        let h = self.h();
        grad += self.spec.terminal_cost.jac_phi(&self.state(z, h), phi).transpose().column(0)
            * self.spec.stage_weight(h);
        grad
    }

    /// `d2L/dz dphi` (`nz x p`) and the finite-difference flag.
    pub fn lagrangian_mixed(&self, z: &DVector<f64>, lambda: &DVector<f64>, mu: &DVector<f64>) -> (DMatrix<f64>, bool) {
        let phi = self.phi();
        let p = phi.len();
        let (n, m) = (self.n(), self.m());
        let mut out = DMatrix::zeros(self.nz(), p);
        let mut approx = false;
        for k in 0..self.h() {
            let v = self.stage_arg(z, k);
            let (dyn_w, g_w, h_w) = self.stage_multipliers(lambda, mu, k);
            let w_cost = DVector::from_element(1, self.spec.stage_weight(k));
            let (mut block, a1) = weighted_mixed(self.spec.stage_cost.as_ref(), &v, phi, &w_cost);
            let (bd, a2) = weighted_mixed(self.spec.dynamics.as_ref(), &v, phi, &dyn_w);
            block += bd;
            approx |= a1 || a2;
            if let (Some(g), Some(w)) = (&self.spec.eq_constraints, g_w) {
                let (b, a) = weighted_mixed(g.as_ref(), &v, phi, &w);
                block += b;
                approx |= a;
            }
            if let (Some(h), Some(w)) = (&self.spec.ineq_constraints, h_w) {
                let (b, a) = weighted_mixed(h.as_ref(), &v, phi, &w);
                block += b;
                approx |= a;
            }
            let idx = self.stage(k);
            for r in 0..n + m {
                let row = if r < n {
                    match idx.x {
                        Some(xo) => xo + r,
                        None => continue,
                    }
                } else {
                    idx.u + r - n
                };
                for c in 0..p {
                    out[(row, c)] += block[(r, c)];
                }
            }
        }
        let h = self.h();
        let w_term = DVector::from_element(1, self.spec.stage_weight(h));
        let (bt, a) = weighted_mixed(self.spec.terminal_cost.as_ref(), &self.state(z, h), phi, &w_term);
        approx |= a;
        let xo = self.x_offset(h);
        for r in 0..n {
            for c in 0..p {
                out[(xo + r, c)] += bt[(r, c)];
            }
        }
        (out, approx)
    }

    /// `d c_eq / dphi` (`n_eq x p`).
    pub fn eq_param_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let phi = self.phi();
        let n = self.n();
        let mut out = DMatrix::zeros(self.n_eq(), phi.len());
        for k in 0..self.h() {
            let v = self.stage_arg(z, k);
            let fj = self.spec.dynamics.jac_phi(&v, phi);
            out.view_mut((k * n, 0), (n, phi.len())).copy_from(&(-fj));
            if let Some(g) = &self.spec.eq_constraints {
                out.view_mut((self.g_row(k), 0), (g.out_dim(), phi.len()))
                    .copy_from(&g.jac_phi(&v, phi));
            }
        }
        out
    }

    /// `d c_in / dphi` (`n_in x p`).
    pub fn ineq_param_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let phi = self.phi();
        let mut out = DMatrix::zeros(self.n_in(), phi.len());
        if let Some(h) = &self.spec.ineq_constraints {
            let nh = h.out_dim();
            for k in 0..self.h() {
                out.view_mut((k * nh, 0), (nh, phi.len()))
                    .copy_from(&h.jac_phi(&self.stage_arg(z, k), phi));
            }
        }
        out
    }
}
