//! Parameter derivatives of the MPC value and policy.
//!
//! Both are reported in cost sign. The value gradient follows from the
//! envelope theorem (`dQ/dphi = dL/dphi` at the KKT point); the policy
//! Jacobian from the linearized KKT system with the active set frozen.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{ActionVec, StateVec};
use crate::ocp::OcpSpec;
use crate::solver::nlp::Transcription;
use crate::solver::{KktPoint, SolverSettings, SqpSolver};

/// Multipliers and constraint values closer to zero than this make the
/// active set ambiguous.
pub const DEGENERACY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularity {
    Strict,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityMethod {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sensitivity {
    /// `dQ/dphi`, one entry per parameter.
    Gradient(DVector<f64>),
    /// `d u_0 / dphi`, `m x p`.
    Jacobian(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    pub value: Sensitivity,
    pub regularity: Regularity,
    pub method: SensitivityMethod,
    /// Some second derivative came from finite differences.
    pub approximate: bool,
    /// Why the result was tagged degenerate (empty when strict).
    pub notes: Vec<String>,
}

impl SensitivityResult {
    pub fn gradient(&self) -> Option<&DVector<f64>> {
        match &self.value {
            Sensitivity::Gradient(g) => Some(g),
            Sensitivity::Jacobian(_) => None,
        }
    }

    pub fn jacobian(&self) -> Option<&DMatrix<f64>> {
        match &self.value {
            Sensitivity::Jacobian(j) => Some(j),
            Sensitivity::Gradient(_) => None,
        }
    }

    pub fn is_strict(&self) -> bool {
        self.regularity == Regularity::Strict
    }
}

fn require_converged(kkt: &KktPoint) -> Result<()> {
    if kkt.is_converged() {
        Ok(())
    } else {
        Err(Error::Solver {
            status: kkt.status,
            iterations: kkt.iterations,
            kkt_residual: kkt.kkt_residual,
        })
    }
}

fn check_shape(spec: &OcpSpec, kkt: &KktPoint) -> Result<()> {
    let nz = spec.horizon() * (spec.state_dim() + spec.action_dim());
    if kkt.z.len() != nz {
        return Err(Error::dim("KKT point decision vector", nz, kkt.z.len()));
    }
    Ok(())
}

/// Strict complementarity check on the stored active set.
fn complementarity_notes(kkt: &KktPoint, h: &DVector<f64>) -> Vec<String> {
    let mut notes = Vec::new();
    for i in 0..h.len() {
        let active = kkt.active_set.contains(&i);
        if active && kkt.mu[i].abs() < DEGENERACY_TOL {
            notes.push(format!("weakly active inequality {i} (mu = {:e})", kkt.mu[i]));
        }
        if !active && h[i].abs() < DEGENERACY_TOL {
            notes.push(format!("inactive inequality {i} at h = {:e}", h[i]));
        }
    }
    notes
}

/// `dQ^MPC/dphi` at a converged solve (pinned or free).
pub fn grad_q_wrt_params(spec: &OcpSpec, kkt: &KktPoint) -> Result<SensitivityResult> {
    require_converged(kkt)?;
    check_shape(spec, kkt)?;
    let nlp = Transcription::new(spec, &kkt.s, kkt.pinned.as_ref());
    let grad = nlp.lagrangian_param_gradient(&kkt.z, &kkt.lambda, &kkt.mu);
    if !linalg::all_finite(&grad) {
        return Err(Error::NonFinite("value gradient".into()));
    }
    let notes = complementarity_notes(kkt, &nlp.ineq_values(&kkt.z));
    Ok(SensitivityResult {
        value: Sensitivity::Gradient(grad),
        regularity: if notes.is_empty() { Regularity::Strict } else { Regularity::Degenerate },
        method: SensitivityMethod::Analytic,
        approximate: false,
        notes,
    })
}

/// `d pi^MPC / dphi` at a converged free solve.
///
/// Solves
/// ```text
/// [ W    Ae'  Aa' ] [dz ]     [ d2L/dz dphi ]
/// [ Ae   0    0   ] [dl ] = - [ dc_eq/dphi  ]
/// [ Aa   0    0   ] [dmu]     [ dc_a/dphi   ]
/// ```
/// and returns the `u_0` rows of `dz`. A singular system yields the
/// minimum-norm solution tagged degenerate.
pub fn jac_policy_wrt_params(spec: &OcpSpec, kkt: &KktPoint) -> Result<SensitivityResult> {
    require_converged(kkt)?;
    check_shape(spec, kkt)?;
    if kkt.pinned.is_some() {
        return Err(Error::InvalidArgument(
            "policy sensitivity needs a free solve; the first input was pinned".into(),
        ));
    }
    let nlp = Transcription::new(spec, &kkt.s, None);
    let z = &kkt.z;
    let nz = nlp.nz();
    let p = spec.params().len();
    let h = nlp.ineq_values(z);
    let mut notes = complementarity_notes(kkt, &h);

    let (w, approx_w) = nlp.lagrangian_hessian(z, &kkt.lambda, &kkt.mu);
    let (mixed, approx_m) = nlp.lagrangian_mixed(z, &kkt.lambda, &kkt.mu);
    let a_eq = nlp.eq_jacobian(z);
    let a_in = nlp.ineq_jacobian(z);
    let ceq_phi = nlp.eq_param_jacobian(z);
    let cin_phi = nlp.ineq_param_jacobian(z);
    let active = &kkt.active_set;
    let ne = a_eq.nrows();
    let na = active.len();
    let k = nz + ne + na;

    let mut constraints = DMatrix::zeros(ne + na, nz);
    constraints.view_mut((0, 0), (ne, nz)).copy_from(&a_eq);
    for (j, &i) in active.iter().enumerate() {
        constraints.row_mut(ne + j).copy_from(&a_in.row(i));
    }
    if linalg::rank(&constraints, 1e-10) < ne + na {
        notes.push("active constraint gradients are linearly dependent".into());
    }

    let mut kkt_mat = DMatrix::zeros(k, k);
    kkt_mat.view_mut((0, 0), (nz, nz)).copy_from(&w);
    kkt_mat.view_mut((0, nz), (nz, ne + na)).copy_from(&constraints.transpose());
    kkt_mat.view_mut((nz, 0), (ne + na, nz)).copy_from(&constraints);
    let mut rhs = DMatrix::zeros(k, p);
    rhs.view_mut((0, 0), (nz, p)).copy_from(&(-&mixed));
    rhs.view_mut((nz, 0), (ne, p)).copy_from(&(-&ceq_phi));
    for (j, &i) in active.iter().enumerate() {
        rhs.row_mut(nz + ne + j).copy_from(&(-cin_phi.row(i)));
    }

    let lu_sol = kkt_mat.clone().lu().solve(&rhs).filter(|sol| {
        let scale = 1.0 + linalg::max_abs(&rhs) + linalg::max_abs(&kkt_mat) * linalg::max_abs(sol);
        sol.iter().all(|v| v.is_finite()) && linalg::max_abs(&(&kkt_mat * sol - &rhs)) <= 1e-9 * scale
    });
    let sol = match lu_sol {
        Some(sol) => sol,
        None => {
            notes.push("linearized KKT system is singular".into());
            kkt_mat
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::InvalidArgument(format!("sensitivity least squares failed: {e}")))?
        }
    };
    let jac = sol.view((nlp.u_offset(0), 0), (spec.action_dim(), p)).into_owned();
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("policy jacobian".into()));
    }
    Ok(SensitivityResult {
        value: Sensitivity::Jacobian(jac),
        regularity: if notes.is_empty() { Regularity::Strict } else { Regularity::Degenerate },
        method: SensitivityMethod::Analytic,
        approximate: approx_w || approx_m,
        notes,
    })
}

/// KKT tolerance of the perturbed solves in a finite-difference check.
pub const PROBE_TOL: f64 = 1e-12;

/// Finite-difference check settings. The step for index `i` is
/// `rel_step * (1 + |phi_i|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub rel_step: f64,
    pub solver: SolverSettings,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-6,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub index: usize,
    /// Central difference (`m` entries for the policy, 1 for the value);
    /// `None` when a perturbed solve failed.
    pub finite_difference: Option<DVector<f64>>,
    pub analytic: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    /// `max |analytic - fd| / max(|fd|_inf, |analytic|_inf, 1e-6)` over the
    /// indices whose solves succeeded.
    pub max_relative_deviation: f64,
    pub failed: Vec<usize>,
}

/// Compare analytic sensitivities with central differences of re-solves.
/// `pinned = Some(a)` checks `dQ/dphi`; `None` checks `d pi / dphi`.
pub fn finite_diff_check(
    spec: &OcpSpec,
    s: &StateVec,
    pinned: Option<&ActionVec>,
    indices: &[usize],
    options: &FdOptions,
) -> Result<FdReport> {
    let solver = SqpSolver::new(options.solver);
    let (kkt, report) = solver.solve(spec, s, pinned, None)?;
    if !kkt.is_converged() {
        return Err(Error::Solver {
            status: report.status,
            iterations: report.iterations,
            kkt_residual: report.kkt_residual,
        });
    }
    let analytic = match pinned {
        Some(_) => {
            let result = grad_q_wrt_params(spec, &kkt)?;
            let g = result.gradient().expect("value sensitivity is a gradient");
            DMatrix::from_row_slice(1, g.len(), g.as_slice())
        }
        None => jac_policy_wrt_params(spec, &kkt)?
            .jacobian()
            .expect("policy sensitivity is a jacobian")
            .clone(),
    };
    finite_diff_check_against(spec, s, pinned, indices, &analytic, options)
}

/// [`finite_diff_check`] against a caller-supplied analytic result
/// (`1 x p` for the value, `m x p` for the policy).
pub fn finite_diff_check_against(
    spec: &OcpSpec,
    s: &StateVec,
    pinned: Option<&ActionVec>,
    indices: &[usize],
    analytic: &DMatrix<f64>,
    options: &FdOptions,
) -> Result<FdReport> {
    let p = spec.params().len();
    if analytic.ncols() != p {
        return Err(Error::dim("analytic sensitivity columns", p, analytic.ncols()));
    }
    let solver = SqpSolver::new(options.solver);
    let (base, _) = solver.solve(spec, s, pinned, None)?;
    let phi = spec.params().values();
    // A warm start already inside the regular tolerance would not move, so
    // probes are solved to PROBE_TOL; stalls at the regular tolerance count.
    let probe_solver = SqpSolver::new(SolverSettings {
        kkt_tol: options.solver.kkt_tol.min(PROBE_TOL),
        ..options.solver
    });
    let probe = |values: DVector<f64>| -> Result<DVector<f64>> {
        let perturbed = spec.with_param_values(values)?;
        let (kkt, report) = probe_solver.solve(&perturbed, s, pinned, Some(&base))?;
        if !(kkt.is_converged() || (report.iterations > 0 && report.kkt_residual <= options.solver.kkt_tol)) {
            return Err(Error::Solver {
                status: report.status,
                iterations: report.iterations,
                kkt_residual: report.kkt_residual,
            });
        }
        Ok(match pinned {
            Some(_) => DVector::from_element(1, kkt.objective),
            None => kkt.u(0),
        })
    };

    let mut entries = Vec::with_capacity(indices.len());
    let mut failed = Vec::new();
    for &i in indices {
        if i >= p {
            return Err(Error::InvalidArgument(format!("parameter index {i} out of range {p}")));
        }
        let step = options.rel_step * (1.0 + phi[i].abs());
        let mut plus = phi.clone();
        plus[i] += step;
        let mut minus = phi.clone();
        minus[i] -= step;
        let fd = match (probe(plus), probe(minus)) {
            (Ok(fp), Ok(fm)) => Some((fp - fm) / (2.0 * step)),
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("finite-difference probe for parameter {i} failed: {e}");
                failed.push(i);
                None
            }
        };
        entries.push(FdEntry {
            index: i,
            finite_difference: fd,
            analytic: analytic.column(i).into_owned(),
        });
    }

    let mut max_dev = 0.0_f64;
    let mut scale = 0.0_f64;
    for e in &entries {
        if let Some(fd) = &e.finite_difference {
            max_dev = max_dev.max(linalg::max_abs_vec(&(&e.analytic - fd)));
            scale = scale.max(linalg::max_abs_vec(fd)).max(linalg::max_abs_vec(&e.analytic));
        }
    }
    Ok(FdReport {
        entries,
        max_relative_deviation: max_dev / scale.max(1e-6),
        failed,
    })
}

/// Policy Jacobian by central differences of free re-solves, the fallback
/// for degenerate points. Warm-started from `base`.
pub fn jac_policy_finite_difference(
    spec: &OcpSpec,
    base: &KktPoint,
    options: &FdOptions,
) -> Result<SensitivityResult> {
    require_converged(base)?;
    check_shape(spec, base)?;
    let solver = SqpSolver::new(SolverSettings {
        kkt_tol: options.solver.kkt_tol.min(PROBE_TOL),
        accept_max_iter: true,
        ..options.solver
    });
    let s = StateVec::new(base.s.clone())?;
    let phi = spec.params().values();
    let m = spec.action_dim();
    let mut jac = DMatrix::zeros(m, phi.len());
    for i in 0..phi.len() {
        let step = options.rel_step * (1.0 + phi[i].abs());
        let mut col = DVector::zeros(m);
        for (sign, values) in [(1.0, phi.clone()), (-1.0, phi.clone())] {
            let mut values = values;
            values[i] += sign * step;
            let (kkt, report) = solver.solve(&spec.with_param_values(values)?, &s, None, Some(base))?;
            if !(kkt.is_converged() || (report.iterations > 0 && report.kkt_residual <= options.solver.kkt_tol)) {
                return Err(Error::Solver {
                    status: report.status,
                    iterations: report.iterations,
                    kkt_residual: report.kkt_residual,
                });
            }
            col += kkt.u(0) * (sign / (2.0 * step));
        }
        jac.set_column(i, &col);
    }
    let nlp = Transcription::new(spec, &base.s, None);
    let notes = complementarity_notes(base, &nlp.ineq_values(&base.z));
    Ok(SensitivityResult {
        value: Sensitivity::Jacobian(jac),
        regularity: if notes.is_empty() { Regularity::Strict } else { Regularity::Degenerate },
        method: SensitivityMethod::FiniteDifference,
        approximate: true,
        notes,
    })
}
