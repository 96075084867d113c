//! Constraint-preconditioned Krylov solvers.
//!
//! Every solver works on `(x, y)` pairs that keep `B x − C y = 0`, so the
//! direct entry points need `b2 = 0` and a feasible start. [`reg_cpkrylov`]
//! handles a general right-hand side by shifting it away first.
//!
//! The convergence test on the preconditioned residual is
//! `‖r_k‖ ≤ atol + rtol · ‖r_0‖`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};

use crate::error::{check_len, Error, Result};
use crate::linops::MatrixStorage;
use crate::processes::{ArnoldiState, LanczosState};
use crate::saddle::{ConstraintPreconditioner, PreconditionerOptions, SaddleSystem};
use crate::vecops::{axpy, dot, norm2};

/// Restarts allowed after the basis is exhausted without meeting the
/// tolerance.
const MAX_EXHAUSTION_RESTARTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub atol: f64,
    pub rtol: f64,
    /// `None` means `2 (n + m)`.
    pub maxit: Option<usize>,
    /// DQGMRES window.
    pub mem: usize,
    /// GMRES cycle length.
    pub restart: usize,
    pub semi_refine: bool,
    pub strict_assumption: bool,
    pub refine_tol: f64,
    pub refine_max: usize,
    /// Keep every iterate in [`SolveResult::iterates`].
    pub record_iterates: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            atol: 1e-8,
            rtol: 1e-6,
            maxit: None,
            mem: 2,
            restart: 20,
            semi_refine: false,
            strict_assumption: false,
            refine_tol: 1e-10,
            refine_max: 2,
            record_iterates: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidOptions(msg.into()));
        if !(self.atol >= 0.0) {
            return bad("atol must be nonnegative");
        }
        if !(self.rtol >= 0.0) {
            return bad("rtol must be nonnegative");
        }
        if self.maxit == Some(0) {
            return bad("maxit must be at least 1");
        }
        if self.mem < 2 {
            return bad("mem must be at least 2");
        }
        if self.restart < 1 {
            return bad("restart must be at least 1");
        }
        if !(self.refine_tol > 0.0) {
            return bad("refine_tol must be positive");
        }
        Ok(())
    }

    pub fn preconditioner_options(&self) -> PreconditionerOptions {
        PreconditionerOptions {
            refine_tol: self.refine_tol,
            refine_max: self.refine_max,
            semi_refine: self.semi_refine,
            strict_assumption: self.strict_assumption,
        }
    }

    fn maxit_for(&self, n: usize, m: usize) -> usize {
        self.maxit.unwrap_or(2 * (n + m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
    Breakdown,
    IndefiniteDetected,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Converged => "converged",
            Status::MaxIterations => "max_iterations",
            Status::Breakdown => "breakdown",
            Status::IndefiniteDetected => "indefinite_detected",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgForm {
    Lanczos,
    Traditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// CG with the residual/direction recurrences.
    Cg,
    /// CG derived from the Lanczos tridiagonal.
    CgLanczos,
    Minres,
    Symmlq,
    Gmres,
    Dqgmres,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Cg,
        Method::CgLanczos,
        Method::Minres,
        Method::Symmlq,
        Method::Gmres,
        Method::Dqgmres,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cg => "cg",
            Method::CgLanczos => "cg-lanczos",
            Method::Minres => "minres",
            Method::Symmlq => "symmlq",
            Method::Gmres => "gmres",
            Method::Dqgmres => "dqgmres",
        }
    }

    /// Methods that assume a symmetric `A`.
    pub fn needs_symmetric(self) -> bool {
        !matches!(self, Method::Gmres | Method::Dqgmres)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidOptions(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub iterations: usize,
    /// Preconditioned residual seminorms, `iterations + 1` entries.
    pub history: Vec<f64>,
    /// Parallel to `history`; set where the value is only an estimate.
    pub estimate: Vec<bool>,
    pub status: Status,
    /// `(x_k, y_k)` for `k = 0..=iterations` when requested.
    pub iterates: Vec<(Vec<f64>, Vec<f64>)>,
    /// `‖K z − rhs‖ / ‖rhs‖` of the returned pair.
    pub final_residual: f64,
    /// `‖B x − C y − b2‖`.
    pub constraint_residual: f64,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    pub fn history_is_estimate(&self) -> bool {
        self.estimate.iter().any(|&e| e)
    }
}

/// Bookkeeping shared by all solvers.
struct Run<'s> {
    sys: &'s SaddleSystem,
    atol: f64,
    rtol: f64,
    maxit: usize,
    thr: f64,
    record: bool,
    x: Vec<f64>,
    y: Vec<f64>,
    iterations: usize,
    history: Vec<f64>,
    estimate: Vec<bool>,
    iterates: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<'s> Run<'s> {
    fn new(sys: &'s SaddleSystem, opts: &SolverOptions, x0: &[f64], y0: &[f64]) -> Self {
        Self {
            sys,
            atol: opts.atol,
            rtol: opts.rtol,
            maxit: opts.maxit_for(sys.n(), sys.m()),
            thr: f64::INFINITY,
            record: opts.record_iterates,
            x: x0.to_vec(),
            y: y0.to_vec(),
            iterations: 0,
            history: Vec::new(),
            estimate: Vec::new(),
            iterates: Vec::new(),
        }
    }

    fn start(&mut self, h0: f64) {
        self.thr = self.atol + self.rtol * h0;
        self.history.push(h0);
        self.estimate.push(false);
        if self.record {
            self.iterates.push((self.x.clone(), self.y.clone()));
        }
    }

    fn started(&self) -> bool {
        !self.history.is_empty()
    }

    fn push(&mut self, h: f64, estimate: bool) {
        self.iterations += 1;
        self.history.push(h);
        self.estimate.push(estimate);
        if self.record {
            self.iterates.push((self.x.clone(), self.y.clone()));
        }
    }

    /// Replaces the newest history value.
    fn correct_last(&mut self, h: f64) {
        if let Some(v) = self.history.last_mut() {
            *v = h;
        }
        if let Some(e) = self.estimate.last_mut() {
            *e = false;
        }
    }

    fn last(&self) -> f64 {
        self.history.last().copied().unwrap_or(f64::NAN)
    }

    fn met(&self, h: f64) -> bool {
        h <= self.thr
    }

    fn out_of_budget(&self) -> bool {
        self.iterations >= self.maxit
    }

    fn finish(mut self, status: Status, pc: &ConstraintPreconditioner) -> Result<SolveResult> {
        if !self.started() {
            let h = explicit_seminorm(self.sys, pc, &self.x, &self.y).unwrap_or(f64::NAN);
            self.start(h);
        }
        let final_residual = self.sys.relative_residual(&self.x, &self.y)?;
        let mut cr = self.sys.mul_b(&self.x);
        for ((r, c), b) in cr.iter_mut().zip(self.sys.mul_c(&self.y)).zip(self.sys.b2()) {
            *r -= c + b;
        }
        debug!(
            "solve finished: {status} after {} iterations, last residual {:.3e}",
            self.iterations,
            self.last()
        );
        Ok(SolveResult {
            x: self.x,
            y: self.y,
            iterations: self.iterations,
            history: self.history,
            estimate: self.estimate,
            status,
            iterates: self.iterates,
            final_residual,
            constraint_residual: norm2(&cr),
        })
    }
}

/// `‖b1 − A x − Bᵀ y‖` in the preconditioner seminorm.
pub fn explicit_seminorm(
    sys: &SaddleSystem,
    pc: &ConstraintPreconditioner,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    let ax = sys.mul_a(x);
    let bty = sys.mul_bt(y);
    let rx: Vec<f64> = sys
        .b1()
        .iter()
        .zip(ax.iter().zip(&bty))
        .map(|(b, (a, t))| b - a - t)
        .collect();
    pc.p_seminorm(&rx)
}

/// Splits off indefiniteness so that it becomes a status.
fn soft<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Indefinite { context, value }) => {
            warn!("indefiniteness detected in {context} ({value:.3e})");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn prologue(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    y0: &[f64],
    opts: &SolverOptions,
) -> Result<()> {
    opts.validate()?;
    check_len("x0", sys.n(), x0.len())?;
    check_len("y0", sys.m(), y0.len())?;
    check_len("preconditioner n", sys.n(), pc.n())?;
    check_len("preconditioner m", sys.m(), pc.m())?;
    if sys.b2().iter().any(|&v| v != 0.0) {
        return Err(Error::NonzeroB2);
    }
    let feas = sys.constraint_residual(x0, y0);
    if feas > 1e-10 * sys.constraint_scale(x0, y0) {
        return Err(Error::InfeasibleStart { residual: feas });
    }
    if opts.strict_assumption {
        let r = pc.check_assumption();
        if !r.holds {
            return Err(Error::AssumptionViolated {
                neg_p: r.neg_p,
                neg_c: r.neg_c,
                m: r.m,
            });
        }
    }
    pc.set_semi_refine(opts.semi_refine);
    Ok(())
}

/// Starts (or restarts) a Lanczos process at the run's iterate.
///
/// `Err(status)` means the solve is over.
fn lanczos_cycle(
    run: &mut Run,
    pc: &mut ConstraintPreconditioner,
    restarts: &mut usize,
) -> Result<std::result::Result<LanczosState, Status>> {
    let first = !run.started();
    let st = match soft(LanczosState::init_from(run.sys, pc, &run.x, &run.y, first))? {
        Some(st) => st,
        None => return Ok(Err(Status::IndefiniteDetected)),
    };
    if first {
        run.start(st.beta1());
        if run.met(st.beta1()) {
            return Ok(Err(Status::Converged));
        }
    } else {
        *restarts += 1;
        debug!("restart {} at residual {:.3e}", restarts, st.beta1());
        if st.is_finished() || *restarts > MAX_EXHAUSTION_RESTARTS {
            return Ok(Err(Status::Breakdown));
        }
    }
    Ok(Ok(st))
}

/// After exhaustion the recurrence residual is unreliable: replace it by
/// the explicit one. Returns whether the tolerance is met.
fn settle_exhaustion(run: &mut Run, pc: &ConstraintPreconditioner) -> Result<Option<bool>> {
    let Some(h) = soft(explicit_seminorm(run.sys, pc, &run.x, &run.y))? else {
        return Ok(None);
    };
    run.correct_last(h);
    Ok(Some(run.met(h)))
}

fn neg(q: &[f64]) -> Vec<f64> {
    q.iter().map(|v| -v).collect()
}

pub fn solve_cp_minres(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    y0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    prologue(sys, pc, x0, y0, opts)?;
    let mut run = Run::new(sys, opts, x0, y0);
    let mut restarts = 0;
    let status = 'outer: loop {
        let mut st = match lanczos_cycle(&mut run, pc, &mut restarts)? {
            Ok(st) => st,
            Err(s) => break s,
        };
        let (n, m) = (sys.n(), sys.m());
        let mut phibar = st.beta1();
        let (mut cs, mut sn) = (-1.0f64, 0.0f64);
        let (mut dbar, mut epsln) = (0.0f64, 0.0f64);
        let (mut wx, mut wy) = (vec![0.0; n], vec![0.0; m]);
        let (mut w2x, mut w2y) = (vec![0.0; n], vec![0.0; m]);
        loop {
            if run.out_of_budget() {
                break 'outer Status::MaxIterations;
            }
            let vx = st.p().to_vec();
            let vy = neg(st.q());
            let Some(step) = soft(st.step(sys, pc))? else {
                break 'outer Status::IndefiniteDetected;
            };
            let (alpha, beta) = (step.alpha, step.beta_next);
            let oldeps = epsln;
            let delta = cs * dbar + sn * alpha;
            let gbar = sn * dbar - cs * alpha;
            epsln = sn * beta;
            dbar = -cs * beta;
            let gamma = gbar.hypot(beta);
            if gamma == 0.0 {
                run.push(phibar, false);
                break 'outer Status::Breakdown;
            }
            cs = gbar / gamma;
            sn = beta / gamma;
            let phi = cs * phibar;
            phibar *= sn;

            // w ← (v − ε w₁ − δ w₂) / γ with w₁, w₂ the two previous directions
            let w1x = std::mem::replace(&mut w2x, std::mem::take(&mut wx));
            let w1y = std::mem::replace(&mut w2y, std::mem::take(&mut wy));
            wx = vx;
            axpy(-oldeps, &w1x, &mut wx);
            axpy(-delta, &w2x, &mut wx);
            wx.iter_mut().for_each(|v| *v /= gamma);
            wy = vy;
            axpy(-oldeps, &w1y, &mut wy);
            axpy(-delta, &w2y, &mut wy);
            wy.iter_mut().for_each(|v| *v /= gamma);
            axpy(phi, &wx, &mut run.x);
            axpy(phi, &wy, &mut run.y);

            run.push(phibar.abs(), false);
            if st.is_finished() {
                match settle_exhaustion(&mut run, pc)? {
                    None => break 'outer Status::IndefiniteDetected,
                    Some(true) => break 'outer Status::Converged,
                    Some(false) => continue 'outer,
                }
            }
            if run.met(phibar.abs()) {
                break 'outer Status::Converged;
            }
        }
    };
    run.finish(status, pc)
}

pub fn solve_cp_cg(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    y0: &[f64],
    opts: &SolverOptions,
    form: CgForm,
) -> Result<SolveResult> {
    prologue(sys, pc, x0, y0, opts)?;
    match form {
        CgForm::Lanczos => cg_lanczos(sys, pc, x0, y0, opts),
        CgForm::Traditional => cg_traditional(sys, pc, x0, y0, opts),
    }
}

fn cg_lanczos(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    y0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    let mut run = Run::new(sys, opts, x0, y0);
    let mut restarts = 0;
    let status = 'outer: loop {
        let mut st = match lanczos_cycle(&mut run, pc, &mut restarts)? {
            Ok(st) => st,
            Err(s) => break s,
        };
        // T_k = L D Lᵀ; directions d_k = v_k − l_{k−1} d_{k−1}
        let (mut dx, mut dy) = (vec![0.0; sys.n()], vec![0.0; sys.m()]);
        let (mut d_prev, mut z_prev) = (0.0f64, 0.0f64);
        loop {
            if run.out_of_budget() {
                break 'outer Status::MaxIterations;
            }
            let beta_k = st.beta();
            let first = st.k() == 1;
            let vx = st.p().to_vec();
            let vy = neg(st.q());
            let Some(step) = soft(st.step(sys, pc))? else {
                break 'outer Status::IndefiniteDetected;
            };
            let (l, d, z) = if first {
                (0.0, step.alpha, beta_k)
            } else {
                let l = beta_k / d_prev;
                (l, step.alpha - l * beta_k, -l * z_prev)
            };
            if !(d > 0.0) {
                warn!("nonpositive pivot {d:.3e} in the tridiagonal factorization");
                break 'outer Status::Breakdown;
            }
            for (a, v) in dx.iter_mut().zip(&vx) {
                *a = v - l * *a;
            }
            for (a, v) in dy.iter_mut().zip(&vy) {
                *a = v - l * *a;
            }
            let c = z / d;
            axpy(c, &dx, &mut run.x);
            axpy(c, &dy, &mut run.y);
            let res = (step.beta_next * c).abs();
            run.push(res, false);
            (d_prev, z_prev) = (d, z);
            if st.is_finished() {
                match settle_exhaustion(&mut run, pc)? {
                    None => break 'outer Status::IndefiniteDetected,
                    Some(true) => break 'outer Status::Converged,
                    Some(false) => continue 'outer,
                }
            }
            if run.met(res) {
                break 'outer Status::Converged;
            }
        }
    };
    run.finish(status, pc)
}

fn cg_traditional(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    y0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    let mut run = Run::new(sys, opts, x0, y0);
    let zeros = vec![0.0; sys.m()];
    let precond = |r: &[f64]| -> Result<Option<(Vec<f64>, Vec<f64>, f64)>> {
        let (g, v) = pc.apply_cp(r, &zeros)?;
        let rho = dot(r, &g);
        if rho < -1e-10 * dot(r, r) {
            warn!("negative preconditioned residual norm {rho:.3e}");
            return Ok(None);
        }
        Ok(Some((g, v, rho.max(0.0))))
    };
    let ax = sys.mul_a(x0);
    let bty = sys.mul_bt(y0);
    let mut r: Vec<f64> = sys
        .b1()
        .iter()
        .zip(ax.iter().zip(&bty))
        .map(|(b, (a, t))| b - a - t)
        .collect();
    let Some((g, v, mut rho)) = precond(&r)? else {
        return run.finish(Status::IndefiniteDetected, pc);
    };
    run.start(rho.sqrt());
    let (mut px, mut py) = (g, v);
    let status = loop {
        if run.met(rho.sqrt()) {
            break Status::Converged;
        }
        if run.out_of_budget() {
            break Status::MaxIterations;
        }
        let apx = sys.mul_a(&px);
        let kappa = dot(&px, &apx) + dot(&py, &sys.mul_c(&py));
        if !(kappa > 0.0) {
            warn!("nonpositive curvature {kappa:.3e}");
            break Status::Breakdown;
        }
        let alpha = rho / kappa;
        axpy(alpha, &px, &mut run.x);
        axpy(alpha, &py, &mut run.y);
        let btpy = sys.mul_bt(&py);
        for ((r, a), b) in r.iter_mut().zip(&apx).zip(&btpy) {
            *r -= alpha * (a + b);
        }
        let Some((g, v, rho_next)) = precond(&r)? else {
            run.push(rho.sqrt(), false);
            break Status::IndefiniteDetected;
        };
        run.push(rho_next.sqrt(), false);
        let beta = rho_next / rho;
        rho = rho_next;
        for (p, g) in px.iter_mut().zip(&g) {
            *p = g + beta * *p;
        }
        for (p, v) in py.iter_mut().zip(&v) {
            *p = v + beta * *p;
        }
    };
    run.finish(status, pc)
}

/// SYMMLQ on the Lanczos tridiagonal.
///
/// The reported iterate at every step, including the last, is the CG point
/// `x^L_k + z̄_k w̄_k`; the history holds the CG-point residual. If the
/// tridiagonal is singular at some step the LQ point is reported instead.
pub fn solve_cp_symmlq(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    y0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    prologue(sys, pc, x0, y0, opts)?;
    let mut run = Run::new(sys, opts, x0, y0);
    let mut restarts = 0;
    let status = 'outer: loop {
        let mut st = match lanczos_cycle(&mut run, pc, &mut restarts)? {
            Ok(st) => st,
            Err(s) => break s,
        };
        let (n, m) = (sys.n(), sys.m());
        let beta1 = st.beta1();
        // LQ point, w̄ and rotation k−1
        let mut xl = run.x.clone();
        let mut yl = run.y.clone();
        let (mut wbx, mut wby) = (st.p().to_vec(), neg(st.q()));
        let (mut c_prev, mut s_prev) = (-1.0f64, 0.0f64);
        let (mut dbar, mut eps) = (0.0f64, 0.0f64);
        let (mut z1, mut z2) = (0.0f64, 0.0f64); // z_{k−1}, z_{k−2}
        loop {
            if run.out_of_budget() {
                break 'outer Status::MaxIterations;
            }
            let first = st.k() == 1;
            let Some(step) = soft(st.step(sys, pc))? else {
                break 'outer Status::IndefiniteDetected;
            };
            let (alpha, beta) = (step.alpha, step.beta_next);
            let (delta, gbar) = if first {
                (0.0, alpha)
            } else {
                (c_prev * dbar + s_prev * alpha, s_prev * dbar - c_prev * alpha)
            };
            let rhs = if first { beta1 } else { 0.0 };
            let num = rhs - eps * z2 - delta * z1;

            let res = if gbar != 0.0 {
                let zbar = num / gbar;
                run.x.copy_from_slice(&xl);
                run.y.copy_from_slice(&yl);
                axpy(zbar, &wbx, &mut run.x);
                axpy(zbar, &wby, &mut run.y);
                (beta * (s_prev * z1 - c_prev * zbar)).abs()
            } else {
                run.x.copy_from_slice(&xl);
                run.y.copy_from_slice(&yl);
                f64::NAN
            };

            let (vx, vy) = (st.p().to_vec(), neg(st.q()));
            if beta != 0.0 {
                let gamma = gbar.hypot(beta);
                let (c, s) = (gbar / gamma, beta / gamma);
                let z = num / gamma;
                let mut wx = vec![0.0; n];
                let mut wy = vec![0.0; m];
                for i in 0..n {
                    wx[i] = c * wbx[i] + s * vx[i];
                    wbx[i] = s * wbx[i] - c * vx[i];
                }
                for i in 0..m {
                    wy[i] = c * wby[i] + s * vy[i];
                    wby[i] = s * wby[i] - c * vy[i];
                }
                axpy(z, &wx, &mut xl);
                axpy(z, &wy, &mut yl);
                eps = s_prev * beta;
                dbar = -c_prev * beta;
                (c_prev, s_prev) = (c, s);
                (z2, z1) = (z1, z);
            }

            let res = if res.is_nan() {
                match soft(explicit_seminorm(sys, pc, &run.x, &run.y))? {
                    Some(h) => h,
                    None => break 'outer Status::IndefiniteDetected,
                }
            } else {
                res
            };
            run.push(res, false);
            if st.is_finished() {
                match settle_exhaustion(&mut run, pc)? {
                    None => break 'outer Status::IndefiniteDetected,
                    Some(true) => break 'outer Status::Converged,
                    Some(false) => continue 'outer,
                }
            }
            if run.met(res) {
                break 'outer Status::Converged;
            }
        }
    };
    run.finish(status, pc)
}

/// Starts an Arnoldi cycle at the run's iterate.
fn arnoldi_cycle(
    run: &mut Run,
    pc: &mut ConstraintPreconditioner,
    mem: Option<usize>,
    restarts: &mut usize,
    exhausted: bool,
) -> Result<std::result::Result<ArnoldiState, Status>> {
    let first = !run.started();
    let st = match soft(ArnoldiState::init_from(run.sys, pc, &run.x, &run.y, mem, first))? {
        Some(st) => st,
        None => return Ok(Err(Status::IndefiniteDetected)),
    };
    if first {
        run.start(st.h10());
        if run.met(st.h10()) {
            return Ok(Err(Status::Converged));
        }
    } else {
        if exhausted {
            *restarts += 1;
            if *restarts > MAX_EXHAUSTION_RESTARTS {
                return Ok(Err(Status::Breakdown));
            }
        }
        if st.is_finished() {
            return Ok(Err(Status::Breakdown));
        }
    }
    Ok(Ok(st))
}

/// Plane rotation `(a, b) → (c a + s b, −s a + c b)`.
#[derive(Debug, Clone, Copy)]
struct Givens {
    c: f64,
    s: f64,
}

impl Givens {
    fn zeroing(a: f64, b: f64) -> Option<(Self, f64)> {
        let r = a.hypot(b);
        if r == 0.0 {
            None
        } else {
            Some((Self { c: a / r, s: b / r }, r))
        }
    }

    fn apply(&self, a: &mut f64, b: &mut f64) {
        let (x, y) = (*a, *b);
        *a = self.c * x + self.s * y;
        *b = -self.s * x + self.c * y;
    }
}

/// Restarted GMRES; each cycle orthogonalizes against the whole cycle basis.
pub fn solve_cp_gmres(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    y0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    prologue(sys, pc, x0, y0, opts)?;
    let mut run = Run::new(sys, opts, x0, y0);
    let mut restarts = 0;
    let mut exhausted = false;
    let status = 'outer: loop {
        let mut st = match arnoldi_cycle(&mut run, pc, None, &mut restarts, exhausted)? {
            Ok(st) => st,
            Err(s) => break s,
        };
        exhausted = false;
        let base_x = run.x.clone();
        let base_y = run.y.clone();
        let mut basis: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut rot: Vec<Givens> = Vec::new();
        let mut r_cols: Vec<Vec<f64>> = Vec::new();
        let mut g = vec![st.h10()];
        for _ in 0..opts.restart {
            if run.out_of_budget() {
                break 'outer Status::MaxIterations;
            }
            let (vp, vq) = st.vector(st.k()).expect("current vector");
            basis.push((vp.to_vec(), neg(vq)));
            let Some(col) = soft(st.step(sys, pc))? else {
                break 'outer Status::IndefiniteDetected;
            };
            let j = col.k;
            let mut h: Vec<f64> = (1..=j + 1).map(|i| col.get(i)).collect();
            for (i, gv) in rot.iter().enumerate() {
                let (lo, hi) = h.split_at_mut(i + 1);
                gv.apply(&mut lo[i], &mut hi[0]);
            }
            let Some((gv, r)) = Givens::zeroing(h[j - 1], h[j]) else {
                break 'outer Status::Breakdown;
            };
            h[j - 1] = r;
            h.truncate(j);
            rot.push(gv);
            r_cols.push(h);
            g.push(-gv.s * g[j - 1]);
            g[j - 1] *= gv.c;

            // least-squares coefficients by back substitution
            let mut coef = g[..j].to_vec();
            for i in (0..j).rev() {
                coef[i] /= r_cols[i][i];
                let ci = coef[i];
                for k in 0..i {
                    coef[k] -= r_cols[i][k] * ci;
                }
            }
            run.x.copy_from_slice(&base_x);
            run.y.copy_from_slice(&base_y);
            for (c, (bx, by)) in coef.iter().zip(&basis) {
                axpy(*c, bx, &mut run.x);
                axpy(*c, by, &mut run.y);
            }
            let res = g[j].abs();
            run.push(res, false);
            if st.is_finished() {
                match settle_exhaustion(&mut run, pc)? {
                    None => break 'outer Status::IndefiniteDetected,
                    Some(true) => break 'outer Status::Converged,
                    Some(false) => {
                        exhausted = true;
                        continue 'outer;
                    }
                }
            }
            if run.met(res) {
                break 'outer Status::Converged;
            }
        }
    };
    run.finish(status, pc)
}

/// DQGMRES: truncated orthogonalization over the last `mem` vectors with a
/// windowed QR. The residual is the usual `|γ_{k+1}|` estimate.
pub fn solve_cp_dqgmres(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    y0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    prologue(sys, pc, x0, y0, opts)?;
    let mem = opts.mem;
    let mut run = Run::new(sys, opts, x0, y0);
    let mut restarts = 0;
    let mut exhausted = false;
    let status = 'outer: loop {
        let mut st = match arnoldi_cycle(&mut run, pc, Some(mem), &mut restarts, exhausted)? {
            Ok(st) => st,
            Err(s) => break s,
        };
        let mut gamma = st.h10();
        // (index, rotation) and (index, direction) windows
        let mut rot: VecDeque<(usize, Givens)> = VecDeque::new();
        let mut dirs: VecDeque<(usize, Vec<f64>, Vec<f64>)> = VecDeque::new();
        loop {
            if run.out_of_budget() {
                break 'outer Status::MaxIterations;
            }
            let (vp, vq) = st.vector(st.k()).expect("current vector");
            let (vx, vy) = (vp.to_vec(), neg(vq));
            let Some(col) = soft(st.step(sys, pc))? else {
                break 'outer Status::IndefiniteDetected;
            };
            let k = col.k;
            let lo = col.first.saturating_sub(1).max(1);
            // rows lo..=k+1
            let mut h: Vec<f64> = (lo..=k + 1).map(|i| col.get(i)).collect();
            for (i, gv) in rot.iter().filter(|(i, _)| *i >= lo) {
                let a = i - lo;
                let (x, y) = h.split_at_mut(a + 1);
                gv.apply(&mut x[a], &mut y[0]);
            }
            let kk = k - lo;
            let Some((gv, r)) = Givens::zeroing(h[kk], h[kk + 1]) else {
                break 'outer Status::Breakdown;
            };
            h[kk] = r;
            rot.push_back((k, gv));
            while rot.len() > mem {
                rot.pop_front();
            }
            let gk = gv.c * gamma;
            gamma *= -gv.s;

            let mut wx = vx;
            let mut wy = vy;
            for (i, dx, dy) in dirs.iter().filter(|(i, ..)| *i >= lo) {
                let hik = h[i - lo];
                axpy(-hik, dx, &mut wx);
                axpy(-hik, dy, &mut wy);
            }
            wx.iter_mut().for_each(|v| *v /= r);
            wy.iter_mut().for_each(|v| *v /= r);
            axpy(gk, &wx, &mut run.x);
            axpy(gk, &wy, &mut run.y);
            dirs.push_back((k, wx, wy));
            while dirs.len() > mem {
                dirs.pop_front();
            }

            let res = gamma.abs();
            run.push(res, true);
            if st.is_finished() {
                match settle_exhaustion(&mut run, pc)? {
                    None => break 'outer Status::IndefiniteDetected,
                    Some(true) => break 'outer Status::Converged,
                    Some(false) => {
                        exhausted = true;
                        continue 'outer;
                    }
                }
            }
            if run.met(res) {
                // guard against an optimistic estimate
                let Some(h) = soft(explicit_seminorm(sys, pc, &run.x, &run.y))? else {
                    break 'outer Status::IndefiniteDetected;
                };
                if h <= 10.0 * run.thr.max(f64::MIN_POSITIVE) {
                    break 'outer Status::Converged;
                }
                debug!("estimate {res:.3e} but explicit residual {h:.3e}; restarting");
                exhausted = true;
                continue 'outer;
            }
        }
    };
    run.finish(status, pc)
}

/// Runs `method` on a system with `b2 = 0` from a feasible start. The
/// Lanczos-based methods refuse a nonsymmetric `A`.
pub fn solve(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    method: Method,
    x0: &[f64],
    y0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveResult> {
    if method.needs_symmetric() && !sys.a_is_symmetric() {
        return Err(Error::InvalidOptions(format!("{method} needs a symmetric A; use gmres or dqgmres")));
    }
    match method {
        Method::Cg => solve_cp_cg(sys, pc, x0, y0, opts, CgForm::Traditional),
        Method::CgLanczos => solve_cp_cg(sys, pc, x0, y0, opts, CgForm::Lanczos),
        Method::Minres => solve_cp_minres(sys, pc, x0, y0, opts),
        Method::Symmlq => solve_cp_symmlq(sys, pc, x0, y0, opts),
        Method::Gmres => solve_cp_gmres(sys, pc, x0, y0, opts),
        Method::Dqgmres => solve_cp_dqgmres(sys, pc, x0, y0, opts),
    }
}

/// General right-hand side: shifts `b2` away with one preconditioner solve,
/// runs `method` from a zero start and shifts back.
///
/// A reported convergence is kept only if the preconditioned residual of
/// the returned pair is within 100 times the tolerance and the constraint
/// rows hold to `1e-8` relative.
pub fn reg_cpkrylov(
    sys: &SaddleSystem,
    g: &MatrixStorage,
    method: Method,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    opts.validate()?;
    check_len("G rows", sys.n(), g.nrows())?;
    check_len("G columns", sys.n(), g.ncols())?;
    let mut pc = ConstraintPreconditioner::for_system(sys, g, opts.preconditioner_options())?;
    reg_cpkrylov_with(sys, &mut pc, method, opts)
}

/// [`reg_cpkrylov`] with a preconditioner built by the caller.
pub fn reg_cpkrylov_with(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    method: Method,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    let (n, m) = (sys.n(), sys.m());
    let (dx, dy) = pc.apply_cp(&vec![0.0; n], sys.b2())?;
    let adx = sys.mul_a(&dx);
    let btdy = sys.mul_bt(&dy);
    let b1: Vec<f64> = sys
        .b1()
        .iter()
        .zip(adx.iter().zip(&btdy))
        .map(|(b, (a, t))| b - a - t)
        .collect();
    let shifted = sys.with_rhs(b1, vec![0.0; m])?;
    let mut res = solve(&shifted, pc, method, &vec![0.0; n], &vec![0.0; m], opts)?;

    let shift = |x: &mut Vec<f64>, y: &mut Vec<f64>| {
        axpy(1.0, &dx, x);
        axpy(1.0, &dy, y);
    };
    shift(&mut res.x, &mut res.y);
    for (x, y) in res.iterates.iter_mut() {
        shift(x, y);
    }
    res.final_residual = sys.relative_residual(&res.x, &res.y)?;
    let mut cr = sys.mul_b(&res.x);
    for ((r, c), b) in cr.iter_mut().zip(sys.mul_c(&res.y)).zip(sys.b2()) {
        *r -= c + b;
    }
    res.constraint_residual = norm2(&cr);

    if res.status == Status::Converged {
        let thr = opts.atol + opts.rtol * res.history[0];
        let h = soft(explicit_seminorm(sys, pc, &res.x, &res.y))?.unwrap_or(f64::INFINITY);
        let scale = sys.constraint_scale(&res.x, &res.y) + norm2(sys.b2());
        if h > 100.0 * thr.max(f64::MIN_POSITIVE) || res.constraint_residual > 1e-8 * scale {
            warn!(
                "converged status withdrawn: residual {h:.3e}, constraint residual {:.3e}",
                res.constraint_residual
            );
            res.status = Status::Breakdown;
        }
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::Symmetry;
    use crate::oracle::direct_solve;

    fn tiny(a: MatrixStorage, b1: Vec<f64>, b2: Vec<f64>) -> SaddleSystem {
        let b = MatrixStorage::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = MatrixStorage::identity(1);
        SaddleSystem::from_matrices(a, b, c, b1, b2).unwrap()
    }

    fn pc_for(sys: &SaddleSystem, g: &MatrixStorage) -> ConstraintPreconditioner {
        ConstraintPreconditioner::for_system(sys, g, PreconditionerOptions::default()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// A = tridiag(−1, 4, −1) plus a nonsymmetric part when `skew` ≠ 0.
    fn mid(n: usize, skew: f64, b2: bool) -> (SaddleSystem, MatrixStorage) {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0 + i as f64 * 0.1));
            if i + 1 < n {
                t.push((i, i + 1, -1.0 + skew));
                t.push((i + 1, i, -1.0 - skew));
            }
        }
        let a = MatrixStorage::from_triplets(n, n, &t, Symmetry::General).unwrap();
        let a = if skew == 0.0 { MatrixStorage::dense_symmetric(a.to_dense()).unwrap() } else { a };
        let m = 3;
        let mut bt = Vec::new();
        for r in 0..m {
            bt.push((r, r, 1.0));
            bt.push((r, r + 3, 0.5));
            bt.push((r, n - 1 - r, -0.25));
        }
        let b = MatrixStorage::from_triplets(m, n, &bt, Symmetry::General).unwrap();
        let c = MatrixStorage::diagonal(&[1e-2, 0.0, 1e-1]);
        let b1: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let rhs2 = if b2 { vec![1.0, -0.5, 0.25] } else { vec![0.0; m] };
        let g = MatrixStorage::diagonal(&(0..n).map(|i| 4.0 + i as f64 * 0.1).collect::<Vec<_>>());
        (SaddleSystem::from_matrices(a, b, c, b1, rhs2).unwrap(), g)
    }

    #[test]
    fn exact_preconditioner_one_step() {
        let a = MatrixStorage::identity(2);
        let sys = tiny(a.clone(), vec![1.0, 1.0], vec![0.0]);
        for method in Method::ALL {
            let mut pc = pc_for(&sys, &a);
            let r = solve(&sys, &mut pc, method, &[0.0; 2], &[0.0], &SolverOptions::default()).unwrap();
            assert_eq!(r.status, Status::Converged, "{method}");
            assert_eq!(r.iterations, 1, "{method}");
            assert!(close(&r.x, &[0.5, 1.0], 1e-12), "{method}: {:?}", r.x);
            assert!(close(&r.y, &[0.5], 1e-12), "{method}: {:?}", r.y);
            assert_eq!(r.history.len(), 2);
        }
    }

    #[test]
    fn zero_rhs_takes_no_iterations() {
        let a = MatrixStorage::identity(2);
        let sys = tiny(a.clone(), vec![0.0, 0.0], vec![0.0]);
        for method in Method::ALL {
            let mut pc = pc_for(&sys, &a);
            let r = solve(&sys, &mut pc, method, &[0.0; 2], &[0.0], &SolverOptions::default()).unwrap();
            assert_eq!(r.status, Status::Converged);
            assert_eq!(r.iterations, 0);
            assert_eq!(r.history, vec![0.0]);
        }
    }

    #[test]
    fn nonzero_b2_rejected_by_direct_entry() {
        let a = MatrixStorage::identity(2);
        let sys = tiny(a.clone(), vec![0.0, 0.0], vec![1.0]);
        let mut pc = pc_for(&sys, &a);
        let err = solve_cp_minres(&sys, &mut pc, &[0.0; 2], &[0.0], &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonzeroB2));
    }

    #[test]
    fn infeasible_start_rejected() {
        let a = MatrixStorage::identity(2);
        let sys = tiny(a.clone(), vec![1.0, 0.0], vec![0.0]);
        let mut pc = pc_for(&sys, &a);
        let err = solve_cp_gmres(&sys, &mut pc, &[1.0, 0.0], &[0.0], &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InfeasibleStart { .. }));
    }

    #[test]
    fn general_rhs_micro_case() {
        let a = MatrixStorage::identity(2);
        let sys = tiny(a.clone(), vec![0.0, 0.0], vec![1.0]);
        for method in Method::ALL {
            let r = reg_cpkrylov(&sys, &a, method, &SolverOptions::default()).unwrap();
            assert_eq!(r.status, Status::Converged, "{method}");
            assert!(close(&r.x, &[0.5, 0.0], 1e-12), "{method}: {:?}", r.x);
            assert!(close(&r.y, &[-0.5], 1e-12), "{method}: {:?}", r.y);
        }
    }

    #[test]
    fn bad_options_rejected() {
        for o in [
            SolverOptions { mem: 1, ..Default::default() },
            SolverOptions { restart: 0, ..Default::default() },
            SolverOptions { maxit: Some(0), ..Default::default() },
            SolverOptions { atol: -1.0, ..Default::default() },
        ] {
            assert!(o.validate().is_err());
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bicg".parse::<Method>().is_err());
    }

    #[test]
    fn all_methods_reach_direct_solution() {
        let (sys, g) = mid(14, 0.0, true);
        let exact = direct_solve(&sys).unwrap();
        let opts = SolverOptions {
            atol: 1e-12,
            rtol: 1e-12,
            ..Default::default()
        };
        for method in Method::ALL {
            let r = reg_cpkrylov(&sys, &g, method, &opts).unwrap();
            assert_eq!(r.status, Status::Converged, "{method}");
            assert!(close(&r.x, &exact.0, 1e-8), "{method}");
            assert!(close(&r.y, &exact.1, 1e-8), "{method}");
        }
    }

    #[test]
    fn history_matches_explicit_seminorm() {
        let (sys, g) = mid(16, 0.0, false);
        let opts = SolverOptions {
            atol: 1e-12,
            rtol: 1e-12,
            record_iterates: true,
            ..Default::default()
        };
        for method in [Method::Minres, Method::CgLanczos, Method::Cg, Method::Symmlq, Method::Gmres] {
            let mut pc = pc_for(&sys, &g);
            let r = solve(&sys, &mut pc, method, &[0.0; 16], &[0.0; 3], &opts).unwrap();
            assert_eq!(r.iterates.len(), r.iterations + 1);
            for (k, (x, y)) in r.iterates.iter().enumerate() {
                let h = explicit_seminorm(&sys, &pc, x, y).unwrap();
                let scale = r.history[0];
                assert!(
                    (h - r.history[k]).abs() <= 1e-6 * h.max(1e-6 * scale),
                    "{method} step {k}: {h:e} vs {:e}",
                    r.history[k]
                );
                assert!(sys.constraint_residual(x, y) <= 1e-8 * (1.0 + sys.constraint_scale(x, y)));
            }
        }
    }

    #[test]
    fn minres_like_methods_agree() {
        let (sys, g) = mid(12, 0.0, false);
        let opts = SolverOptions {
            record_iterates: true,
            atol: 1e-12,
            rtol: 0.0,
            ..Default::default()
        };
        let run = |m: Method| {
            let mut pc = pc_for(&sys, &g);
            solve(&sys, &mut pc, m, &[0.0; 12], &[0.0; 3], &opts).unwrap()
        };
        let mr = run(Method::Minres);
        let gm = run(Method::Gmres);
        let dq = run(Method::Dqgmres);
        let k = mr.iterations.min(gm.iterations).min(dq.iterations);
        for i in 0..=k {
            assert!(close(&mr.iterates[i].0, &gm.iterates[i].0, 1e-6), "gmres step {i}");
            assert!(close(&mr.iterates[i].0, &dq.iterates[i].0, 1e-6), "dqgmres step {i}");
            assert!(close(&mr.iterates[i].1, &dq.iterates[i].1, 1e-6));
        }
        for w in mr.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10));
        }
    }

    #[test]
    fn cg_forms_agree() {
        let (sys, g) = mid(12, 0.0, false);
        let opts = SolverOptions {
            record_iterates: true,
            atol: 1e-12,
            rtol: 0.0,
            ..Default::default()
        };
        let mut pc = pc_for(&sys, &g);
        let a = solve_cp_cg(&sys, &mut pc, &[0.0; 12], &[0.0; 3], &opts, CgForm::Lanczos).unwrap();
        let b = solve_cp_cg(&sys, &mut pc, &[0.0; 12], &[0.0; 3], &opts, CgForm::Traditional).unwrap();
        for i in 0..=a.iterations.min(b.iterations) {
            assert!(close(&a.iterates[i].0, &b.iterates[i].0, 1e-8), "step {i}");
            assert!(close(&a.iterates[i].1, &b.iterates[i].1, 1e-8), "step {i}");
        }
    }

    #[test]
    fn cg_reports_breakdown_for_negative_a() {
        let a = MatrixStorage::diagonal(&[-1.0, -1.0]);
        let sys = tiny(a, vec![1.0, 1.0], vec![0.0]);
        let g = MatrixStorage::identity(2);
        for form in [CgForm::Lanczos, CgForm::Traditional] {
            let mut pc = pc_for(&sys, &g);
            let r = solve_cp_cg(&sys, &mut pc, &[0.0; 2], &[0.0], &SolverOptions::default(), form).unwrap();
            assert_eq!(r.status, Status::Breakdown, "{form:?}");
            assert_eq!(r.history.len(), r.iterations + 1);
        }
    }

    #[test]
    fn nonsymmetric_gmres_and_dqgmres() {
        let (sys, g) = mid(14, 0.3, true);
        let exact = direct_solve(&sys).unwrap();
        let opts = SolverOptions {
            atol: 1e-12,
            rtol: 1e-12,
            maxit: Some(200),
            ..Default::default()
        };
        for method in [Method::Gmres, Method::Dqgmres] {
            let r = reg_cpkrylov(&sys, &g, method, &opts).unwrap();
            assert_eq!(r.status, Status::Converged, "{method}");
            assert!(close(&r.x, &exact.0, 1e-7), "{method}");
        }
        let r = reg_cpkrylov(&sys, &g, Method::Dqgmres, &opts).unwrap();
        assert!(r.history_is_estimate());
    }

    #[test]
    fn gmres_restart_one_is_nonincreasing() {
        let (sys, g) = mid(10, 0.2, false);
        let opts = SolverOptions {
            restart: 1,
            maxit: Some(60),
            ..Default::default()
        };
        let mut pc = pc_for(&sys, &g);
        let r = solve_cp_gmres(&sys, &mut pc, &[0.0; 10], &[0.0; 3], &opts).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-8));
        }
    }

    #[test]
    fn semi_refinement_gives_same_answer() {
        let (sys, g) = mid(12, 0.0, true);
        let plain = reg_cpkrylov(&sys, &g, Method::Minres, &SolverOptions::default()).unwrap();
        let semi = reg_cpkrylov(
            &sys,
            &g,
            Method::Minres,
            &SolverOptions {
                semi_refine: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(semi.converged());
        assert!(close(&plain.x, &semi.x, 1e-8));
    }
}
