//! Test problems: seeded random systems, a singular counterexample and a toy
//! interior-point method for bound-constrained QPs.

use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::factor::factorize;
use crate::linops::{materialize, write_matrix_market, write_vector, MatrixStorage};
use crate::oracle::{decompose_c, k_matrix};
use crate::saddle::{assumption_report, ConstraintPreconditioner, SaddleSystem};
use crate::solvers::{reg_cpkrylov_with, Method, SolveResult, SolverOptions, Status};
use crate::vecops::{add, dot, norm_inf};

const MAX_TRIES: u64 = 32;

/// Requested structure of a random system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemProps {
    pub c_rank: usize,
    pub c_psd: bool,
    pub a_symmetric: bool,
    /// Whether `neg(P) + neg(C) = m` should hold for the returned `G`.
    pub assumption_ok: bool,
    pub zero_b2: bool,
}

impl Default for SystemProps {
    fn default() -> Self {
        Self {
            c_rank: 0,
            c_psd: true,
            a_symmetric: true,
            assumption_ok: true,
            zero_b2: true,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gaussian(rng, n, n).qr().q()
}

fn symmetric(m: DMatrix<f64>) -> Result<MatrixStorage> {
    MatrixStorage::dense_symmetric((&m + m.transpose()) * 0.5)
}

/// Random `(sys, G)` with `G = diag(A)` (one sign flipped when the inertia
/// assumption is meant to fail).
///
/// Deterministic per seed. Candidates failing any structural check are
/// discarded and regenerated from a derived seed.
pub fn gen_random_system(
    n: usize,
    m: usize,
    seed: u64,
    props: SystemProps,
) -> Result<(SaddleSystem, MatrixStorage)> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidOptions("n and m must be positive".into()));
    }
    if props.c_rank > m {
        return Err(Error::InvalidOptions(format!("C rank {} exceeds m = {m}", props.c_rank)));
    }
    if !props.c_psd && props.c_rank == 0 {
        return Err(Error::InvalidOptions("an indefinite C needs positive rank".into()));
    }
    for attempt in 0..MAX_TRIES {
        let s = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (sys, g) = candidate(n, m, &mut rng, props)?;
        if accept(&sys, &g, props)? {
            return Ok((sys, g));
        }
        debug!("random system attempt {attempt} rejected");
    }
    Err(Error::Generation(format!(
        "no valid system after {MAX_TRIES} attempts (n = {n}, m = {m}, {props:?})"
    )))
}

fn candidate(
    n: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
    props: SystemProps,
) -> Result<(SaddleSystem, MatrixStorage)> {
    let p = props.c_rank;
    let k_neg = if props.c_psd { 0 } else { (p / 2).max(1) };

    let w = gaussian(rng, n, n);
    let mut a = (&w + w.transpose()) * (0.5 / (2.0 * n as f64).sqrt());
    for i in 0..n {
        a[(i, i)] += 2.5 + rng.random_range(0.0..1.0);
    }
    let a = if props.a_symmetric {
        symmetric(a)?
    } else {
        let v = gaussian(rng, n, n);
        MatrixStorage::dense(a + (&v - v.transpose()) * (0.3 / (2.0 * n as f64).sqrt()))
    };

    // rows of B paired with the negative part of C are zero before rotation
    let q = orthogonal(rng, m);
    let mut b0 = gaussian(rng, m, n) / (n as f64).sqrt();
    for i in 0..k_neg {
        b0.row_mut(i).fill(0.0);
    }
    let cvals: Vec<f64> = (0..m)
        .map(|i| {
            if i < k_neg {
                -rng.random_range(0.5..1.5)
            } else if i < p {
                rng.random_range(0.1..1.0)
            } else {
                0.0
            }
        })
        .collect();
    let c = &q * DMatrix::from_diagonal(&DVector::from_vec(cvals)) * q.transpose();
    let c = symmetric(c)?;
    let b = MatrixStorage::dense(&q * b0);

    let mut gd = a.diag();
    if !props.assumption_ok {
        let j = rng.random_range(0..n);
        gd[j] = -10.0 * gd[j].abs();
    }
    let g = MatrixStorage::diagonal(&gd);

    let b1 = gaussian_vec(rng, n);
    let b2 = if props.zero_b2 { vec![0.0; m] } else { gaussian_vec(rng, m) };
    Ok((SaddleSystem::from_matrices(a, b, c, b1, b2)?, g))
}

fn accept(sys: &SaddleSystem, g: &MatrixStorage, props: SystemProps) -> Result<bool> {
    if factorize(&k_matrix(sys)?)?.is_singular() {
        return Ok(false);
    }
    if decompose_c(sys.c())?.rank() != props.c_rank {
        return Ok(false);
    }
    let p = crate::linops::assemble_block_2x2(g, sys.b(), sys.c())?;
    if factorize(&p)?.is_singular() {
        return Ok(false);
    }
    Ok(assumption_report(g, sys.b(), sys.c())?.holds == props.assumption_ok)
}

/// The 3×3 example whose blocks satisfy both nullspace conditions while
/// `K` has a zero row. `b` is all ones.
pub fn counterexample_system() -> SaddleSystem {
    let a = MatrixStorage::from_rows(&[
        vec![1.0, -1.0, 0.0],
        vec![0.0, 0.0, 0.0],
        vec![1.0, 0.0, 1.0],
    ])
    .expect("fixed data");
    let b = MatrixStorage::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).expect("fixed data");
    let c = MatrixStorage::identity(2);
    SaddleSystem::from_matrices(a, b, c, vec![1.0; 3], vec![1.0; 2]).expect("fixed data")
}

/// Dense `A` of a system, tagged symmetric when the system says so.
pub fn dense_a(sys: &SaddleSystem) -> Result<MatrixStorage> {
    let a = materialize(sys.a().as_ref());
    if sys.a_is_symmetric() {
        symmetric(a)
    } else {
        Ok(MatrixStorage::dense(a))
    }
}

/// Writes `A.mtx B.mtx C.mtx G.mtx b1.mtx b2.mtx` into `dir`.
pub fn write_bundle(dir: impl AsRef<Path>, sys: &SaddleSystem, g: Option<&MatrixStorage>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_matrix_market(dir.join("A.mtx"), &dense_a(sys)?)?;
    write_matrix_market(dir.join("B.mtx"), sys.b())?;
    write_matrix_market(dir.join("C.mtx"), sys.c())?;
    if let Some(g) = g {
        write_matrix_market(dir.join("G.mtx"), g)?;
    }
    write_vector(dir.join("b1.mtx"), sys.b1())?;
    write_vector(dir.join("b2.mtx"), sys.b2())?;
    Ok(())
}

/// `min ½xᵀHx + cᵀx + ½‖D1 x‖² + ½‖r‖²  s.t.  Bx + D2 r = d,  l ≤ x ≤ u`.
#[derive(Debug, Clone)]
pub struct ToyQP {
    pub h: MatrixStorage,
    pub c: Vec<f64>,
    pub b: MatrixStorage,
    pub d: Vec<f64>,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl ToyQP {
    pub fn new(
        h: MatrixStorage,
        c: Vec<f64>,
        b: MatrixStorage,
        d: Vec<f64>,
        l: Vec<f64>,
        u: Vec<f64>,
        d1: Vec<f64>,
        d2: Vec<f64>,
    ) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n {
            return Err(Error::NotSquare("H"));
        }
        if !h.is_symmetric() {
            return Err(Error::NotSymmetric("H"));
        }
        let m = b.nrows();
        check_len("c", n, c.len())?;
        check_len("B columns", n, b.ncols())?;
        check_len("d", m, d.len())?;
        check_len("l", n, l.len())?;
        check_len("u", n, u.len())?;
        check_len("D1", n, d1.len())?;
        check_len("D2", m, d2.len())?;
        if l.iter().zip(&u).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidOptions("bounds need l < u".into()));
        }
        if d1.iter().chain(&d2).any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidOptions("regularizers must be positive".into()));
        }
        Ok(Self { h, c, b, d, l, u, d1, d2 })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn m(&self) -> usize {
        self.d.len()
    }

    /// Random convex instance with dense `H = LLᵀ/n` and a feasible interior
    /// point.
    pub fn random(n: usize, m: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lf = gaussian(&mut rng, n, n);
        let h = symmetric(&lf * lf.transpose() / n as f64)?;
        let c: Vec<f64> = gaussian_vec(&mut rng, n).into_iter().map(|v| 2.0 * v).collect();
        let bq = gaussian(&mut rng, m, n) / (n as f64).sqrt();
        let l: Vec<f64> = (0..n).map(|_| -1.0 - rng.random_range(0.0..1.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| 1.0 + rng.random_range(0.0..1.0)).collect();
        let xf: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let d = (&bq * DVector::from_vec(xf)).as_slice().to_vec();
        Self::new(h, c, MatrixStorage::dense(bq), d, l, u, vec![1e-3; n], vec![1e-3; m])
    }
}

/// Primal-dual iterate; `x1 = x − l`, `x2 = u − x`.
#[derive(Debug, Clone)]
pub struct IPState {
    pub x: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub y: Vec<f64>,
    pub mu: f64,
}

impl IPState {
    /// Bound midpoints, unit bound multipliers, zero `y`.
    pub fn initial(qp: &ToyQP) -> Self {
        let x: Vec<f64> = qp.l.iter().zip(&qp.u).map(|(l, u)| 0.5 * (l + u)).collect();
        let mut s = Self {
            x1: Vec::new(),
            x2: Vec::new(),
            z1: vec![1.0; qp.n()],
            z2: vec![1.0; qp.n()],
            y: vec![0.0; qp.m()],
            mu: 0.0,
            x,
        };
        s.sync(qp);
        s.mu = s.gap();
        s
    }

    fn sync(&mut self, qp: &ToyQP) {
        self.x1 = self.x.iter().zip(&qp.l).map(|(x, l)| x - l).collect();
        self.x2 = qp.u.iter().zip(&self.x).map(|(u, x)| u - x).collect();
    }

    /// Average complementarity.
    pub fn gap(&self) -> f64 {
        (dot(&self.x1, &self.z1) + dot(&self.x2, &self.z2)) / (2 * self.x.len()).max(1) as f64
    }

    pub fn validate(&self, qp: &ToyQP) -> Result<()> {
        check_len("x", qp.n(), self.x.len())?;
        check_len("y", qp.m(), self.y.len())?;
        for v in [&self.x1, &self.x2, &self.z1, &self.z2] {
            check_len("IP state vector", qp.n(), v.len())?;
        }
        let pos = |v: &[f64]| v.iter().all(|t| *t > 0.0);
        if !(pos(&self.x1) && pos(&self.x2) && pos(&self.z1) && pos(&self.z2)) {
            return Err(Error::InvalidState("x − l, u − x, z1 and z2 must be positive".into()));
        }
        if !(self.mu > 0.0) {
            return Err(Error::InvalidState(format!("barrier parameter {} is not positive", self.mu)));
        }
        for ((x, l), x1) in self.x.iter().zip(&qp.l).zip(&self.x1) {
            if ((x - l) - x1).abs() > 1e-12 * (1.0 + x.abs()) {
                return Err(Error::InvalidState("x1 ≠ x − l".into()));
            }
        }
        for ((x, u), x2) in self.x.iter().zip(&qp.u).zip(&self.x2) {
            if ((u - x) - x2).abs() > 1e-12 * (1.0 + x.abs()) {
                return Err(Error::InvalidState("x2 ≠ u − x".into()));
            }
        }
        Ok(())
    }
}

/// Perturbed KKT residuals at a state.
#[derive(Debug, Clone)]
pub struct KktResiduals {
    /// `(H + D1²)x + c + Bᵀy − z1 + z2`
    pub dual: Vec<f64>,
    /// `d − Bx + D2²y`
    pub primal: Vec<f64>,
    /// `μ − X1 z1`
    pub comp1: Vec<f64>,
    /// `μ − X2 z2`
    pub comp2: Vec<f64>,
}

impl KktResiduals {
    pub fn new(qp: &ToyQP, s: &IPState, mu: f64) -> Result<Self> {
        let hx = qp.h.matvec(&s.x)?;
        let bty = qp.b.matvec_t(&s.y)?;
        let dual = (0..qp.n())
            .map(|i| hx[i] + qp.d1[i] * qp.d1[i] * s.x[i] + qp.c[i] + bty[i] - s.z1[i] + s.z2[i])
            .collect();
        let bx = qp.b.matvec(&s.x)?;
        let primal = (0..qp.m())
            .map(|i| qp.d[i] - bx[i] + qp.d2[i] * qp.d2[i] * s.y[i])
            .collect();
        let comp1 = s.x1.iter().zip(&s.z1).map(|(x, z)| mu - x * z).collect();
        let comp2 = s.x2.iter().zip(&s.z2).map(|(x, z)| mu - x * z).collect();
        Ok(Self { dual, primal, comp1, comp2 })
    }

    pub fn norm_inf(&self) -> f64 {
        [&self.dual, &self.primal, &self.comp1, &self.comp2]
            .iter()
            .map(|v| norm_inf(v))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Formulation {
    K2,
    K35,
    K3p,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [Formulation::K2, Formulation::K35, Formulation::K3p];

    pub fn name(self) -> &'static str {
        match self {
            Formulation::K2 => "K2",
            Formulation::K35 => "K35",
            Formulation::K3p => "K3p",
        }
    }
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k2" => Ok(Formulation::K2),
            "k35" | "k3.5" => Ok(Formulation::K35),
            "k3p" => Ok(Formulation::K3p),
            _ => Err(Error::InvalidOptions(format!("unknown formulation '{s}'"))),
        }
    }
}

/// Newton direction in the original variables.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub dz1: Vec<f64>,
    pub dz2: Vec<f64>,
}

/// A Newton system in saddle-point form, with `G = diag` of its leading block.
#[derive(Debug, Clone)]
pub struct Formulated {
    pub kind: Formulation,
    pub sys: SaddleSystem,
    pub g: MatrixStorage,
    res: KktResiduals,
    state: IPState,
}

impl Formulated {
    /// Maps a solution `(x, y)` of `sys` back to a Newton step.
    pub fn recover(&self, x: &[f64], y: &[f64]) -> Result<NewtonStep> {
        check_len("x", self.sys.n(), x.len())?;
        check_len("y", self.sys.m(), y.len())?;
        let s = &self.state;
        let n = s.x.len();
        let m = self.res.primal.len();
        match self.kind {
            Formulation::K2 => {
                let dx = x.to_vec();
                let dz1 = (0..n).map(|i| (self.res.comp1[i] - s.z1[i] * dx[i]) / s.x1[i]).collect();
                let dz2 = (0..n).map(|i| (self.res.comp2[i] + s.z2[i] * dx[i]) / s.x2[i]).collect();
                Ok(NewtonStep { dx, dy: y.to_vec(), dz1, dz2 })
            }
            Formulation::K35 => {
                let dz1 = (0..n).map(|i| -s.z1[i].sqrt() * y[m + i]).collect();
                let dz2 = (0..n).map(|i| s.z2[i].sqrt() * y[m + n + i]).collect();
                Ok(NewtonStep { dx: x.to_vec(), dy: y[..m].to_vec(), dz1, dz2 })
            }
            Formulation::K3p => Ok(NewtonStep {
                dx: x[..n].to_vec(),
                dy: y.to_vec(),
                dz1: x[n..2 * n].iter().map(|v| -v).collect(),
                dz2: x[2 * n..].to_vec(),
            }),
        }
    }
}

/// Assembles the Newton system at `state` with barrier target `state.mu`.
///
/// K2 eliminates the bound multipliers. K35 keeps them, scaled by `Z^½`, in
/// the constraint block. K3p keeps them in a nonsymmetric leading block.
pub fn formulate(qp: &ToyQP, state: &IPState, kind: Formulation) -> Result<Formulated> {
    state.validate(qp)?;
    let (n, m) = (qp.n(), qp.m());
    let res = KktResiduals::new(qp, state, state.mu)?;
    let s = state;
    let mut hd = qp.h.to_dense();
    for i in 0..n {
        hd[(i, i)] += qp.d1[i] * qp.d1[i];
    }
    let d2sq: Vec<f64> = qp.d2.iter().map(|v| v * v).collect();
    let bd = qp.b.to_dense();
    let neg_rd: Vec<f64> = res.dual.iter().map(|v| -v).collect();

    let (a, b, c, b1, b2) = match kind {
        Formulation::K2 => {
            let mut a = hd;
            let mut b1 = neg_rd;
            for i in 0..n {
                a[(i, i)] += s.z1[i] / s.x1[i] + s.z2[i] / s.x2[i];
                b1[i] += res.comp1[i] / s.x1[i] - res.comp2[i] / s.x2[i];
            }
            let a = symmetric(a)?;
            (a, qp.b.clone(), MatrixStorage::diagonal(&d2sq), b1, res.primal.clone())
        }
        Formulation::K35 => {
            let mut bb = DMatrix::zeros(m + 2 * n, n);
            bb.view_mut((0, 0), (m, n)).copy_from(&bd);
            let mut cd = d2sq.clone();
            cd.extend_from_slice(&s.x1);
            cd.extend_from_slice(&s.x2);
            let mut b2 = res.primal.clone();
            for i in 0..n {
                bb[(m + i, i)] = s.z1[i].sqrt();
                bb[(m + n + i, i)] = s.z2[i].sqrt();
            }
            b2.extend((0..n).map(|i| res.comp1[i] / s.z1[i].sqrt()));
            b2.extend((0..n).map(|i| -res.comp2[i] / s.z2[i].sqrt()));
            (symmetric(hd)?, MatrixStorage::dense(bb), MatrixStorage::diagonal(&cd), neg_rd, b2)
        }
        Formulation::K3p => {
            let mut a = DMatrix::zeros(3 * n, 3 * n);
            a.view_mut((0, 0), (n, n)).copy_from(&hd);
            for i in 0..n {
                a[(i, n + i)] = 1.0;
                a[(i, 2 * n + i)] = 1.0;
                a[(n + i, i)] = -s.z1[i];
                a[(n + i, n + i)] = s.x1[i];
                a[(2 * n + i, i)] = -s.z2[i];
                a[(2 * n + i, 2 * n + i)] = s.x2[i];
            }
            let mut bb = DMatrix::zeros(m, 3 * n);
            bb.view_mut((0, 0), (m, n)).copy_from(&bd);
            let mut b1 = neg_rd;
            b1.extend(res.comp1.iter().map(|v| -v));
            b1.extend_from_slice(&res.comp2);
            (
                MatrixStorage::dense(a),
                MatrixStorage::dense(bb),
                MatrixStorage::diagonal(&d2sq),
                b1,
                res.primal.clone(),
            )
        }
    };
    let g = MatrixStorage::diagonal(&a.diag());
    let sys = SaddleSystem::from_matrices(a, b, c, b1, b2)?;
    Ok(Formulated { kind, sys, g, res, state: state.clone() })
}

/// Inner tolerance tied to the barrier parameter.
pub fn adaptive_atol(mu: f64) -> f64 {
    (1e-2 * mu).clamp(1e-6, 1e-2)
}

pub const KKT_TOL: f64 = 1e-6;
pub const MAX_OUTER: usize = 50;
pub const STEP_FRACTION: f64 = 0.995;
pub const MU_FACTOR: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct IpReport {
    pub outer_it: usize,
    pub inner_it_total: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    /// Barrier target and inner `atol` used at each outer iteration.
    pub mu: Vec<f64>,
    pub eps_a: Vec<f64>,
    /// Inner solver status at each outer iteration.
    pub inner_status: Vec<Status>,
    pub failure: Option<String>,
    pub state: IPState,
}

/// Basic primal-dual path following. Every Newton system is solved by
/// [`reg_cpkrylov_with`] from `P⁻¹[b1; b2]` with `rtol = 0` and the adaptive
/// `atol`.
///
/// The barrier target at each iteration is `MU_FACTOR` times the current
/// average complementarity. Primal and dual variables share one step length.
/// Inner solver errors and lost interiority end the run with `failure` set.
pub fn toy_ip_solve(qp: &ToyQP, kind: Formulation, method: Method, opts: &SolverOptions) -> Result<IpReport> {
    let mut s = IPState::initial(qp);
    let mut report = IpReport {
        outer_it: 0,
        inner_it_total: 0,
        kkt_residual: f64::INFINITY,
        converged: false,
        mu: Vec::new(),
        eps_a: Vec::new(),
        inner_status: Vec::new(),
        failure: None,
        state: s.clone(),
    };
    loop {
        report.kkt_residual = KktResiduals::new(qp, &s, 0.0)?.norm_inf();
        if report.kkt_residual <= KKT_TOL {
            report.converged = true;
            break;
        }
        if report.outer_it >= MAX_OUTER {
            report.failure = Some(format!("outer iteration cap {MAX_OUTER} reached"));
            break;
        }
        s.mu = MU_FACTOR * s.gap();
        let eps_a = adaptive_atol(s.mu);
        let inner = SolverOptions { atol: eps_a, rtol: 0.0, ..opts.clone() };
        let f = formulate(qp, &s, kind)?;
        let (r, dx, dy) = match warm_solve(&f, method, &inner) {
            Ok(v) => v,
            Err(e) => {
                report.failure = Some(format!("inner solve failed: {e}"));
                break;
            }
        };
        report.mu.push(s.mu);
        report.eps_a.push(eps_a);
        report.inner_status.push(r.status);
        report.inner_it_total += r.iterations;
        let step = f.recover(&dx, &dy)?;

        let alpha = STEP_FRACTION * max_step(&s, &step);
        if !(alpha > 1e-12) {
            report.failure = Some(format!("step length {alpha:.3e} too small"));
            break;
        }
        for i in 0..qp.n() {
            s.x[i] += alpha * step.dx[i];
            s.z1[i] += alpha * step.dz1[i];
            s.z2[i] += alpha * step.dz2[i];
        }
        for i in 0..qp.m() {
            s.y[i] += alpha * step.dy[i];
        }
        s.sync(qp);
        report.outer_it += 1;
        if s.validate(qp).is_err() {
            report.failure = Some("iterate left the interior".into());
            break;
        }
        debug!(
            "ip {kind} {} it {}: mu {:.3e} alpha {alpha:.3e} inner {} ({})",
            method, report.outer_it, s.mu, r.iterations, r.status
        );
    }
    report.state = s;
    Ok(report)
}

/// Starts the inner solve at `P⁻¹[b1; b2]` and solves for the correction.
///
/// With a zero start the solver may stop at once while the leading-block
/// residual is large in directions the seminorm barely weights (active
/// bounds), and the outer loop then stalls.
fn warm_solve(f: &Formulated, method: Method, opts: &SolverOptions) -> Result<(SolveResult, Vec<f64>, Vec<f64>)> {
    let sys = &f.sys;
    let mut pc = ConstraintPreconditioner::for_system(sys, &f.g, opts.preconditioner_options())?;
    let (x0, y0) = pc.apply_cp(sys.b1(), sys.b2())?;
    let (r1, r2) = sys.residual(&x0, &y0)?;
    let r = reg_cpkrylov_with(&sys.with_rhs(r1, r2)?, &mut pc, method, opts)?;
    let dx = add(&x0, &r.x);
    let dy = add(&y0, &r.y);
    Ok((r, dx, dy))
}

/// Largest `α ≤ 1` keeping `x1, x2, z1, z2` nonnegative.
fn max_step(s: &IPState, d: &NewtonStep) -> f64 {
    let mut a = 1.0_f64;
    let mut limit = |v: f64, dv: f64| {
        if dv < 0.0 {
            a = a.min(-v / dv);
        }
    };
    for i in 0..s.x.len() {
        limit(s.x1[i], d.dx[i]);
        limit(s.x2[i], -d.dx[i]);
        limit(s.z1[i], d.dz1[i]);
        limit(s.z2[i], d.dz2[i]);
    }
    a
}

/// `count` random QPs with sizes drawn from `n ∈ [2, 40]`, `m ∈ [1, 10]`.
pub fn toy_instances(seed: u64, count: usize) -> Result<Vec<(String, ToyQP)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n = rng.random_range(2..=40);
            let m = rng.random_range(1..=10).min(n);
            let s = rng.random::<u64>();
            Ok((format!("toy{k:02}_n{n}_m{m}"), ToyQP::random(n, m, s)?))
        })
        .collect()
}

#[cfg(test)]
#[allow(clippy::manual_clamp)]
mod tests {
    use super::*;
    use crate::oracle::{direct_solve, nonsingularity_conditions};
    use crate::vecops::rel_diff;

    #[test]
    fn random_system_is_deterministic() {
        let props = SystemProps { c_rank: 2, zero_b2: false, ..Default::default() };
        let (s1, g1) = gen_random_system(8, 4, 7, props).unwrap();
        let (s2, g2) = gen_random_system(8, 4, 7, props).unwrap();
        assert_eq!(dense_a(&s1).unwrap(), dense_a(&s2).unwrap());
        assert_eq!(s1.b(), s2.b());
        assert_eq!(s1.c(), s2.c());
        assert_eq!(g1, g2);
        assert_eq!(s1.b1(), s2.b1());
        assert_eq!(s1.b2(), s2.b2());
    }

    #[test]
    fn random_system_meets_requested_properties() {
        for (seed, p, psd, sym, ok) in [
            (1, 0, true, true, true),
            (2, 3, true, true, true),
            (3, 5, true, false, true),
            (4, 4, false, true, true),
            (5, 2, true, true, false),
        ] {
            let props = SystemProps {
                c_rank: p,
                c_psd: psd,
                a_symmetric: sym,
                assumption_ok: ok,
                zero_b2: true,
            };
            let (sys, g) = gen_random_system(12, 5, seed, props).unwrap();
            assert_eq!(decompose_c(sys.c()).unwrap().rank(), p);
            assert_eq!(assumption_report(&g, sys.b(), sys.c()).unwrap().holds, ok);
            assert_eq!(sys.a_is_symmetric(), sym);
            assert_eq!(nonsingularity_conditions(&sys).unwrap(), (true, true));
        }
    }

    #[test]
    fn impossible_requests_are_reported() {
        let props = SystemProps { c_rank: 6, ..Default::default() };
        assert!(gen_random_system(8, 4, 1, props).is_err());
        let props = SystemProps { c_psd: false, ..Default::default() };
        assert!(gen_random_system(8, 4, 1, props).is_err());
        // m > n with C = 0 cannot give a nonsingular K
        assert!(matches!(
            gen_random_system(2, 4, 1, SystemProps::default()),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn counterexample_has_zero_row_and_is_singular() {
        let sys = counterexample_system();
        let k = k_matrix(&sys).unwrap().to_dense();
        assert!(k.row(1).iter().all(|v| *v == 0.0));
        assert_eq!(nonsingularity_conditions(&sys).unwrap(), (true, true));
        assert!(matches!(direct_solve(&sys), Err(Error::Singular { .. })));
    }

    fn two_var_qp() -> ToyQP {
        // optimum of (x1 − 1)² on x1 + x2 = 1 clipped by x1 ≤ 0.8
        ToyQP::new(
            MatrixStorage::dense_symmetric(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap(),
            vec![-1.0, 0.0],
            MatrixStorage::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vec![1.0],
            vec![0.0, 0.0],
            vec![0.8, 1.0],
            vec![1e-4; 2],
            vec![1e-4],
        )
        .unwrap()
    }

    #[test]
    fn formulations_give_the_same_newton_step() {
        for seed in 0..3 {
            let qp = ToyQP::random(6, 3, seed).unwrap();
            let mut s = IPState::initial(&qp);
            s.mu = 0.1 * s.gap();
            let steps: Vec<NewtonStep> = Formulation::ALL
                .iter()
                .map(|&k| {
                    let f = formulate(&qp, &s, k).unwrap();
                    let (x, y) = direct_solve(&f.sys).unwrap();
                    f.recover(&x, &y).unwrap()
                })
                .collect();
            for st in &steps[1..] {
                assert!(rel_diff(&st.dx, &steps[0].dx) < 1e-8);
                assert!(rel_diff(&st.dy, &steps[0].dy) < 1e-8);
                assert!(rel_diff(&st.dz1, &steps[0].dz1) < 1e-8);
                assert!(rel_diff(&st.dz2, &steps[0].dz2) < 1e-8);
            }
        }
    }

    #[test]
    fn formulation_shapes_and_symmetry() {
        let qp = ToyQP::random(5, 2, 3).unwrap();
        let s = IPState::initial(&qp);
        let k2 = formulate(&qp, &s, Formulation::K2).unwrap();
        let k35 = formulate(&qp, &s, Formulation::K35).unwrap();
        let k3p = formulate(&qp, &s, Formulation::K3p).unwrap();
        assert_eq!((k2.sys.n(), k2.sys.m()), (5, 2));
        assert_eq!((k35.sys.n(), k35.sys.m()), (5, 12));
        assert_eq!((k3p.sys.n(), k3p.sys.m()), (15, 2));
        assert!(k2.sys.a_is_symmetric() && k35.sys.a_is_symmetric());
        assert!(!k3p.sys.a_is_symmetric());
        assert!(k_matrix(&k35.sys).unwrap().is_symmetric());
        assert!(!k_matrix(&k3p.sys).unwrap().is_symmetric());
        let lead = dense_a(&k2.sys).unwrap().to_dense();
        assert!(lead.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn invalid_state_is_rejected() {
        let qp = two_var_qp();
        let mut s = IPState::initial(&qp);
        s.z1[0] = -1.0;
        assert!(matches!(formulate(&qp, &s, Formulation::K2), Err(Error::InvalidState(_))));
    }

    #[test]
    fn two_variable_qp_reaches_closed_form_optimum() {
        let qp = two_var_qp();
        let mut xs = Vec::new();
        for kind in [Formulation::K2, Formulation::K35] {
            let r = toy_ip_solve(&qp, kind, Method::Minres, &SolverOptions::default()).unwrap();
            assert!(r.converged, "{kind}: {r:?}");
            assert!(r.kkt_residual <= KKT_TOL);
            assert!((r.state.x[0] - 0.8).abs() < 1e-6 && (r.state.x[1] - 0.2).abs() < 1e-6, "{:?}", r.state.x);
            for (mu, e) in r.mu.iter().zip(&r.eps_a) {
                assert_eq!(*e, (1e-2 * mu).min(1e-2).max(1e-6));
            }
            xs.push(r.state.x);
        }
        assert!(rel_diff(&xs[0], &xs[1]) < 1e-6);
    }

    #[test]
    fn adaptive_tolerance_clamps() {
        assert_eq!(adaptive_atol(10.0), 1e-2);
        assert_eq!(adaptive_atol(0.5), 5e-3);
        assert_eq!(adaptive_atol(1e-9), 1e-6);
    }
}
