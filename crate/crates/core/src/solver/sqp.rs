use nalgebra::{DMatrix, DVector};

use super::nlp::Transcription;
use super::qp::{solve_qp, QpFailure, QpProblem, QpSettings};
use super::{KktPoint, SolveReport, SolveStatus, SolverSettings, ACTIVE_TOL};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{ActionVec, StateVec};
use crate::ocp::OcpSpec;

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-10;
const SIGMA_START: f64 = 1e-8;
const SIGMA_MAX: f64 = 1e12;

/// SQP driver. Holds settings only; every solve allocates its own
/// workspace, so one solver may be used from several threads.
#[derive(Debug, Clone, Copy, Default)]
pub struct SqpSolver {
    pub settings: SolverSettings,
}

struct Iterate {
    z: DVector<f64>,
    lambda: DVector<f64>,
    mu: DVector<f64>,
}

struct Eval {
    f: f64,
    grad: DVector<f64>,
    ceq: DVector<f64>,
    jeq: DMatrix<f64>,
    cin: DVector<f64>,
    jin: DMatrix<f64>,
}

impl Eval {
    fn new(nlp: &Transcription<'_>, z: &DVector<f64>) -> Self {
        Self {
            f: nlp.objective(z),
            grad: nlp.gradient(z),
            ceq: nlp.eq_values(z),
            jeq: nlp.eq_jacobian(z),
            cin: nlp.ineq_values(z),
            jin: nlp.ineq_jacobian(z),
        }
    }

    fn finite(&self) -> bool {
        self.f.is_finite()
            && linalg::all_finite(&self.grad)
            && linalg::all_finite(&self.ceq)
            && linalg::all_finite(&self.cin)
            && self.jeq.iter().all(|v| v.is_finite())
            && self.jin.iter().all(|v| v.is_finite())
    }

    fn infeasibility_l1(&self) -> f64 {
        self.ceq.iter().map(|v| v.abs()).sum::<f64>() + self.cin.iter().map(|v| v.max(0.0)).sum::<f64>()
    }

    /// Max of stationarity, primal feasibility, dual feasibility and
    /// complementarity violations.
    fn kkt_residual(&self, lambda: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let stat = &self.grad + self.jeq.transpose() * lambda + self.jin.transpose() * mu;
        let mut r = linalg::max_abs_vec(&stat).max(linalg::max_abs_vec(&self.ceq));
        for i in 0..self.cin.len() {
            r = r.max(self.cin[i].max(0.0)).max((-mu[i]).max(0.0)).max((mu[i] * self.cin[i]).abs());
        }
        r
    }
}

fn resize(v: &DVector<f64>, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |i, _| if i < v.len() { v[i] } else { 0.0 })
}

/// Add `sigma I` (doubling from 1e-8) until the Hessian is positive
/// definite on the null space of the equality Jacobian.
fn regularize(w: &DMatrix<f64>, jeq: &DMatrix<f64>) -> DMatrix<f64> {
    let z = linalg::null_space(jeq, 1e-12);
    if z.ncols() == 0 {
        return w.clone();
    }
    let reduced = linalg::symmetrize(&(z.transpose() * w * &z));
    let scale = 1.0 + linalg::max_abs(w);
    if linalg::min_eigenvalue(&reduced) > 1e-12 * scale {
        return w.clone();
    }
    let n = w.nrows();
    let mut sigma = SIGMA_START;
    while sigma < SIGMA_MAX * scale {
        let shifted = &reduced + DMatrix::identity(reduced.nrows(), reduced.nrows()) * sigma;
        if linalg::min_eigenvalue(&shifted) > 1e-12 * scale {
            return w + DMatrix::identity(n, n) * sigma;
        }
        sigma *= 2.0;
    }
    w + DMatrix::identity(n, n) * sigma
}

impl SqpSolver {
    pub fn new(settings: SolverSettings) -> Self {
        Self { settings }
    }

    /// Solve the OCP at `s`, with `u_0` fixed to `pinned` when given.
    ///
    /// `Infeasible` and `Diverged` are errors; a stall returns the best
    /// iterate with status `MaxIter`.
    pub fn solve(
        &self,
        spec: &OcpSpec,
        s: &StateVec,
        pinned: Option<&ActionVec>,
        warm: Option<&KktPoint>,
    ) -> Result<(KktPoint, SolveReport)> {
        let (n, m, h) = (spec.state_dim(), spec.action_dim(), spec.horizon());
        if s.len() != n {
            return Err(Error::dim("state", n, s.len()));
        }
        if let Some(a) = pinned {
            if a.len() != m {
                return Err(Error::dim("pinned action", m, a.len()));
            }
        }
        let s_vec = s.as_vector();
        let a_vec = pinned.map(|a| a.as_vector());
        let nlp = Transcription::new(spec, s_vec, a_vec);
        let nz = nlp.nz();
        let (n_eq, n_in) = (nlp.n_eq(), nlp.n_in());

        let mut it = match warm.filter(|w| w.z.len() == nz) {
            Some(w) => {
                let mut z = w.z.clone();
                if let Some(a) = a_vec {
                    z.rows_mut(nlp.u_offset(0), m).copy_from(a);
                }
                let mut lambda = resize(&w.lambda, n_eq);
                let n_base = n_eq - a_vec.map_or(0, |a| a.len());
                for i in n_base..n_eq {
                    lambda[i] = 0.0;
                }
                Iterate {
                    z,
                    lambda,
                    mu: resize(&w.mu, n_in).map(|v| v.max(0.0)),
                }
            }
            None => Iterate {
                z: nlp.simulate(&vec![DVector::zeros(m); h]),
                lambda: DVector::zeros(n_eq),
                mu: DVector::zeros(n_in),
            },
        };

        let qp_settings = QpSettings {
            max_pivots: self.settings.max_pivots,
            ..QpSettings::default()
        };
        let tol = self.settings.kkt_tol;
        let mut nu = 0.0_f64;
        let mut eval = Eval::new(&nlp, &it.z);
        if !eval.finite() {
            return Err(self.fail(SolveStatus::Diverged, 0, f64::NAN));
        }
        let mut best: Option<(f64, Iterate, usize)> = None;
        let mut iterations = 0;
        loop {
            let residual = eval.kkt_residual(&it.lambda, &it.mu);
            if residual <= tol {
                return Ok(self.finish(&nlp, it, &eval, residual, SolveStatus::Converged, iterations));
            }
            if best.as_ref().is_none_or(|(r, _, _)| residual < *r) {
                best = Some((
                    residual,
                    Iterate {
                        z: it.z.clone(),
                        lambda: it.lambda.clone(),
                        mu: it.mu.clone(),
                    },
                    iterations,
                ));
            }
            if iterations >= self.settings.max_iter {
                break;
            }
            iterations += 1;

            let (hess, _) = nlp.lagrangian_hessian(&it.z, &it.lambda, &it.mu);
            let w = regularize(&linalg::symmetrize(&hess), &eval.jeq);
            let b_eq = -&eval.ceq;
            let b_in = -&eval.cin;
            let qp = solve_qp(
                &QpProblem {
                    h: &w,
                    g: &eval.grad,
                    a_eq: &eval.jeq,
                    b_eq: &b_eq,
                    a_in: &eval.jin,
                    b_in: &b_in,
                },
                &qp_settings,
            );
            let qp = match qp {
                Ok(sol) => sol,
                Err(QpFailure::Infeasible) => return Err(self.fail(SolveStatus::Infeasible, iterations, residual)),
                Err(QpFailure::Unbounded) => return Err(self.fail(SolveStatus::Diverged, iterations, residual)),
                Err(QpFailure::MaxPivots) => break,
            };
            let d = qp.x;
            let max_mult = linalg::max_abs_vec(&qp.dual_eq).max(linalg::max_abs_vec(&qp.dual_ineq));
            nu = nu.max(1.1 * max_mult + 1e-8);
            let merit0 = eval.f + nu * eval.infeasibility_l1();
            let slope = eval.grad.dot(&d) - nu * eval.infeasibility_l1();

            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= MIN_STEP {
                let z_trial = &it.z + &d * alpha;
                let trial = Eval::new(&nlp, &z_trial);
                if trial.finite() {
                    let merit = trial.f + nu * trial.infeasibility_l1();
                    let sufficient = merit <= merit0 + ARMIJO * alpha * slope.min(0.0);
                    // Roundoff guard near the solution: accept full steps whose
                    // merit change is below evaluation noise.
                    let flat = alpha == 1.0 && merit - merit0 <= 1e-12 * (1.0 + merit0.abs());
                    if sufficient || flat {
                        accepted = Some((z_trial, trial));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((z_next, eval_next)) = accepted else {
                break;
            };
            it.lambda += (&qp.dual_eq - &it.lambda) * alpha;
            it.mu += (&qp.dual_ineq - &it.mu) * alpha;
            it.mu.apply(|v| *v = v.max(0.0));
            it.z = z_next;
            eval = eval_next;
        }

        let Some((_, best_it, _)) = best else {
            return Err(self.fail(SolveStatus::Diverged, iterations, f64::NAN));
        };
        let best_eval = Eval::new(&nlp, &best_it.z);
        let residual = best_eval.kkt_residual(&best_it.lambda, &best_it.mu);
        Ok(self.finish(&nlp, best_it, &best_eval, residual, SolveStatus::MaxIter, iterations))
    }

    fn fail(&self, status: SolveStatus, iterations: usize, kkt_residual: f64) -> Error {
        Error::Solver {
            status,
            iterations,
            kkt_residual,
        }
    }

    fn finish(
        &self,
        nlp: &Transcription<'_>,
        it: Iterate,
        eval: &Eval,
        residual: f64,
        status: SolveStatus,
        iterations: usize,
    ) -> (KktPoint, SolveReport) {
        let active_set = (0..eval.cin.len()).filter(|&i| eval.cin[i] >= -ACTIVE_TOL).collect();
        let kkt = KktPoint {
            z: it.z,
            lambda: it.lambda,
            mu: it.mu,
            active_set,
            objective: eval.f,
            kkt_residual: residual,
            status,
            iterations,
            s: nlp.s.clone(),
            pinned: nlp.pin.cloned(),
            horizon: nlp.spec.horizon(),
            state_dim: nlp.spec.state_dim(),
            action_dim: nlp.spec.action_dim(),
        };
        let report = SolveReport {
            status,
            iterations,
            kkt_residual: residual,
        };
        (kkt, report)
    }

    /// Receding-horizon policy: the first input of the free solve.
    pub fn policy(&self, spec: &OcpSpec, s: &StateVec, warm: Option<&KktPoint>) -> Result<(ActionVec, KktPoint)> {
        let (kkt, report) = self.solve(spec, s, None, warm)?;
        self.require(&report)?;
        Ok((kkt.first_action(), kkt))
    }

    /// `Q^MPC(s, a)`, the optimal cost with `u_0 = a`.
    pub fn qvalue(&self, spec: &OcpSpec, s: &StateVec, a: &ActionVec, warm: Option<&KktPoint>) -> Result<(f64, KktPoint)> {
        let (kkt, report) = self.solve(spec, s, Some(a), warm)?;
        self.require(&report)?;
        Ok((kkt.objective, kkt))
    }

    fn require(&self, report: &SolveReport) -> Result<()> {
        match report.status {
            SolveStatus::Converged => Ok(()),
            SolveStatus::MaxIter if self.settings.accept_max_iter => {
                log::debug!("accepting inexact solve, kkt residual {:e}", report.kkt_residual);
                Ok(())
            }
            status => Err(self.fail(status, report.iterations, report.kkt_residual)),
        }
    }
}

/// [`SqpSolver::solve`] with default settings.
pub fn solve_ocp(
    spec: &OcpSpec,
    s: &StateVec,
    pinned: Option<&ActionVec>,
    warm: Option<&KktPoint>,
) -> Result<(KktPoint, SolveReport)> {
    SqpSolver::default().solve(spec, s, pinned, warm)
}

/// [`SqpSolver::policy`] with default settings.
pub fn mpc_policy(spec: &OcpSpec, s: &StateVec, warm: Option<&KktPoint>) -> Result<(ActionVec, KktPoint)> {
    SqpSolver::default().policy(spec, s, warm)
}

/// [`SqpSolver::qvalue`] with default settings.
pub fn mpc_qvalue(spec: &OcpSpec, s: &StateVec, a: &ActionVec, warm: Option<&KktPoint>) -> Result<f64> {
    SqpSolver::default().qvalue(spec, s, a, warm).map(|(q, _)| q)
}
