//! Constraint-preconditioned Lanczos and Arnoldi basis generation.
//!
//! Both processes work on pairs `(p, q)` with `B p + C q = 0`. In full-space
//! terms the basis vector is `[p; −q]`.

use std::collections::VecDeque;

use crate::error::{check_len, Error, Result};
use crate::saddle::{ConstraintPreconditioner, SaddleSystem};
use crate::vecops::{axpy, dot, norm2, scale};

/// Relative level below which a squared normalizer is a genuine negative.
pub const NEG_TOL: f64 = 1e-10;
/// Relative level below which a squared normalizer counts as zero.
pub const ZERO_TOL: f64 = 1e-10;

/// Classifies `raw = pᵀu + qᵀt` against the magnitude of the terms it came from.
fn normalizer(raw: f64, mag: f64, context: &'static str) -> Result<f64> {
    if raw < -NEG_TOL * mag {
        return Err(Error::Indefinite { context, value: raw });
    }
    if raw <= ZERO_TOL * mag {
        Ok(0.0)
    } else {
        Ok(raw.sqrt())
    }
}

/// Second projection argument `t − (B p + C q)`, which equals `−B p` when
/// `t = C q`. Carrying the defect keeps the recurrence a full-space one;
/// with `t` alone any defect grows by roughly `α/β` per step.
fn carried(sys: &SaddleSystem, p: &[f64]) -> Vec<f64> {
    sys.mul_b(p).into_iter().map(|v| -v).collect()
}

/// `pᵀG p + qᵀC q`, the squared preconditioner norm of a feasible pair.
fn p_norm_sq(sys: &SaddleSystem, pc: &ConstraintPreconditioner, p: &[f64], q: &[f64]) -> f64 {
    let gp = pc.g().matvec(p).expect("G is n×n");
    dot(p, &gp) + dot(q, &sys.mul_c(q))
}

struct Start {
    p: Vec<f64>,
    q: Vec<f64>,
    beta: f64,
}

fn start(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    q0: &[f64],
    check_start: bool,
) -> Result<Start> {
    check_len("x0", sys.n(), x0.len())?;
    check_len("q0", sys.m(), q0.len())?;
    check_len("preconditioner size", sys.n(), pc.n())?;
    let feas = sys.constraint_residual(x0, q0);
    if check_start && feas > 1e-10 * sys.constraint_scale(x0, q0) {
        return Err(Error::InfeasibleStart { residual: feas });
    }
    pc.reset();
    let ax = sys.mul_a(x0);
    let u0: Vec<f64> = sys.b1().iter().zip(&ax).map(|(b, a)| b - a).collect();
    let t0 = sys.mul_c(q0);
    // P [p̄; z̄] = [b1 − A x0; −B x0], which is [u0; −t0] for a feasible start
    let (mut p, zbar) = pc.project_step(&u0, &sys.mul_b(x0))?;
    let mut q: Vec<f64> = q0.iter().zip(&zbar).map(|(a, z)| a - z).collect();
    let raw = dot(&p, &u0) + dot(&q, &t0);
    let mag = norm2(&p) * norm2(&u0) + norm2(&q) * norm2(&t0);
    let beta = normalizer(raw, mag, "initial normalizer")?;
    if beta != 0.0 {
        scale(1.0 / beta, &mut p);
        scale(1.0 / beta, &mut q);
    }
    Ok(Start { p, q, beta })
}

/// Tridiagonal `T_k`: `diag = (α₁..α_k)`, `offdiag = (β₂..β_{k+1})`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TridiagonalData {
    pub diag: Vec<f64>,
    pub offdiag: Vec<f64>,
}

/// Scalars produced by one Lanczos step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanczosStep {
    pub k: usize,
    pub alpha: f64,
    pub beta_next: f64,
}

#[derive(Debug, Clone)]
pub struct LanczosState {
    k: usize,
    p_prev: Vec<f64>,
    p: Vec<f64>,
    q_prev: Vec<f64>,
    q: Vec<f64>,
    u: Vec<f64>,
    t: Vec<f64>,
    alpha: f64,
    beta: f64,
    beta1: f64,
    finished: bool,
}

impl LanczosState {
    /// Builds `(p₁, q₁, β₁)` from the start `(x0, q0)`; requires `B x0 = C q0`.
    ///
    /// The previous pair used by the first step is zero, so the process is a
    /// genuine three-term Lanczos recurrence for any `q0`.
    pub fn init(
        sys: &SaddleSystem,
        pc: &mut ConstraintPreconditioner,
        x0: &[f64],
        q0: &[f64],
    ) -> Result<Self> {
        Self::init_from(sys, pc, x0, q0, true)
    }

    /// Restart entry point; skips the feasibility check on `(x0, q0)`.
    pub(crate) fn init_from(
        sys: &SaddleSystem,
        pc: &mut ConstraintPreconditioner,
        x0: &[f64],
        q0: &[f64],
        check_start: bool,
    ) -> Result<Self> {
        let s = start(sys, pc, x0, q0, check_start)?;
        let (n, m) = (sys.n(), sys.m());
        Ok(Self {
            k: 1,
            p_prev: vec![0.0; n],
            p: s.p,
            q_prev: vec![0.0; m],
            q: s.q,
            u: vec![0.0; n],
            t: vec![0.0; m],
            alpha: 0.0,
            beta: s.beta,
            beta1: s.beta,
            finished: s.beta == 0.0,
        })
    }

    /// Advances from `(p_k, q_k)` to `(p_{k+1}, q_{k+1})`.
    pub fn step(&mut self, sys: &SaddleSystem, pc: &mut ConstraintPreconditioner) -> Result<LanczosStep> {
        if self.finished {
            return Err(Error::Terminated);
        }
        self.u = sys.mul_a(&self.p);
        self.t = sys.mul_c(&self.q);
        let alpha = dot(&self.p, &self.u) + dot(&self.q, &self.t);
        let (pbar, zbar) = pc.project_step(&self.u, &carried(sys, &self.p))?;
        let mag = norm2(&pbar) * norm2(&self.u);

        // p_prev becomes p_{k+1}
        let mut p_next = pbar;
        axpy(-alpha, &self.p, &mut p_next);
        axpy(-self.beta, &self.p_prev, &mut p_next);
        // s_{k+1} overwrites z̄
        let mut s = zbar;
        for (s, q) in s.iter_mut().zip(&self.q) {
            *s = q - *s;
        }
        let mag = mag + norm2(&s) * norm2(&self.t);
        let mut q_next = s;
        axpy(-alpha, &self.q, &mut q_next);
        axpy(-self.beta, &self.q_prev, &mut q_next);

        let raw = p_norm_sq(sys, pc, &p_next, &q_next);
        let beta_next = normalizer(raw, mag, "Lanczos normalizer")?;
        if beta_next != 0.0 {
            scale(1.0 / beta_next, &mut p_next);
            scale(1.0 / beta_next, &mut q_next);
        }
        self.p_prev = std::mem::replace(&mut self.p, p_next);
        self.q_prev = std::mem::replace(&mut self.q, q_next);
        self.alpha = alpha;
        self.beta = beta_next;
        self.finished = beta_next == 0.0;
        let k = self.k;
        self.k += 1;
        Ok(LanczosStep {
            k,
            alpha,
            beta_next,
        })
    }

    /// Index of the current pair `(p_k, q_k)`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// The pair consumed by the most recent step.
    pub fn p_prev(&self) -> &[f64] {
        &self.p_prev
    }

    pub fn q_prev(&self) -> &[f64] {
        &self.q_prev
    }

    /// `A p` and `C q` of the most recent step.
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `β_k`, the normalizer of the current pair.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

/// Recorded Lanczos run, one entry per basis pair.
#[derive(Debug, Clone, Default)]
pub struct LanczosTrace {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    /// `β₁, β₂, …`; one longer than `alpha` unless the run hit `max_steps`.
    pub beta: Vec<f64>,
}

impl LanczosTrace {
    pub fn tridiagonal(&self) -> TridiagonalData {
        let k = self.alpha.len();
        TridiagonalData {
            diag: self.alpha.clone(),
            offdiag: self.beta[1..=k.min(self.beta.len() - 1)].to_vec(),
        }
    }
}

/// Runs CP-Lanczos for at most `max_steps` steps.
pub fn lanczos_trace(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    q0: &[f64],
    max_steps: usize,
) -> Result<LanczosTrace> {
    let mut st = LanczosState::init(sys, pc, x0, q0)?;
    let mut tr = LanczosTrace {
        beta: vec![st.beta1()],
        ..Default::default()
    };
    if !st.is_finished() {
        tr.p.push(st.p().to_vec());
        tr.q.push(st.q().to_vec());
    }
    while !st.is_finished() && tr.alpha.len() < max_steps {
        let s = st.step(sys, pc)?;
        tr.alpha.push(s.alpha);
        tr.beta.push(s.beta_next);
        if !st.is_finished() {
            tr.p.push(st.p().to_vec());
            tr.q.push(st.q().to_vec());
        }
    }
    Ok(tr)
}

/// One column of the Hessenberg matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ArnoldiColumn {
    pub k: usize,
    /// Row index (1-based) of `h[0]`.
    pub first: usize,
    /// `h_{first,k} … h_{k,k}`.
    pub h: Vec<f64>,
    pub h_next: f64,
}

impl ArnoldiColumn {
    /// `h_{i,k}`, zero outside the stored window.
    pub fn get(&self, i: usize) -> f64 {
        if i == self.k + 1 {
            self.h_next
        } else if i >= self.first && i <= self.k {
            self.h[i - self.first]
        } else {
            0.0
        }
    }
}

/// A stored Arnoldi pair with `G p` and `C q` kept for inner products.
#[derive(Debug, Clone)]
struct BasisPair {
    i: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    gp: Vec<f64>,
    cq: Vec<f64>,
}

impl BasisPair {
    fn new(sys: &SaddleSystem, pc: &ConstraintPreconditioner, i: usize, p: Vec<f64>, q: Vec<f64>) -> Self {
        let gp = pc.g().matvec(&p).expect("G is n×n");
        let cq = sys.mul_c(&q);
        Self { i, p, q, gp, cq }
    }

    /// Preconditioner inner product with a feasible pair.
    fn ip(&self, p: &[f64], q: &[f64]) -> f64 {
        dot(&self.gp, p) + dot(&self.cq, q)
    }
}

#[derive(Debug, Clone)]
pub struct ArnoldiState {
    k: usize,
    mem: Option<usize>,
    /// Oldest first.
    basis: VecDeque<BasisPair>,
    u: Vec<f64>,
    t: Vec<f64>,
    h_last: f64,
    h10: f64,
    finished: bool,
}

impl ArnoldiState {
    /// `mem = None` orthogonalizes against every previous vector; `Some(ℓ)`
    /// against the last `ℓ` only.
    pub fn init(
        sys: &SaddleSystem,
        pc: &mut ConstraintPreconditioner,
        x0: &[f64],
        q0: &[f64],
        mem: Option<usize>,
    ) -> Result<Self> {
        Self::init_from(sys, pc, x0, q0, mem, true)
    }

    pub(crate) fn init_from(
        sys: &SaddleSystem,
        pc: &mut ConstraintPreconditioner,
        x0: &[f64],
        q0: &[f64],
        mem: Option<usize>,
        check_start: bool,
    ) -> Result<Self> {
        if mem == Some(0) {
            return Err(Error::InvalidOptions("Arnoldi memory must be at least 1".into()));
        }
        let s = start(sys, pc, x0, q0, check_start)?;
        let mut basis = VecDeque::new();
        basis.push_back(BasisPair::new(sys, pc, 1, s.p, s.q));
        Ok(Self {
            k: 1,
            mem,
            basis,
            u: vec![0.0; sys.n()],
            t: vec![0.0; sys.m()],
            h_last: s.beta,
            h10: s.beta,
            finished: s.beta == 0.0,
        })
    }

    pub fn step(&mut self, sys: &SaddleSystem, pc: &mut ConstraintPreconditioner) -> Result<ArnoldiColumn> {
        if self.finished {
            return Err(Error::Terminated);
        }
        let k = self.k;
        let (pk, qk) = {
            let b = self.basis.back().expect("current vector");
            (b.p.clone(), b.q.clone())
        };
        self.u = sys.mul_a(&pk);
        self.t = sys.mul_c(&qk);
        let (mut p_next, zbar) = pc.project_step(&self.u, &carried(sys, &pk))?;
        let mut q_next: Vec<f64> = qk.iter().zip(&zbar).map(|(q, z)| q - z).collect();
        let mag = norm2(&p_next) * norm2(&self.u) + norm2(&q_next) * norm2(&self.t);

        let first = match self.mem {
            Some(l) => (k + 1).saturating_sub(l).max(1),
            None => 1,
        };
        // hᵢₖ = pᵢᵀuₖ + qᵢᵀtₖ equals the preconditioner inner product of pair i
        // with the projected vector. It is taken against the partially
        // orthogonalized vector, in two passes; a single pass loses
        // orthogonality in proportion to ε over the residual reduction.
        let window: Vec<&BasisPair> = self.basis.iter().filter(|b| b.i >= first).collect();
        let mut h = vec![0.0; window.len()];
        for _ in 0..2 {
            for (hik, b) in h.iter_mut().zip(&window) {
                let c = b.ip(&p_next, &q_next);
                axpy(-c, &b.p, &mut p_next);
                axpy(-c, &b.q, &mut q_next);
                *hik += c;
            }
        }
        let raw = p_norm_sq(sys, pc, &p_next, &q_next);
        let h_next = normalizer(raw, mag, "Arnoldi normalizer")?;
        if h_next != 0.0 {
            scale(1.0 / h_next, &mut p_next);
            scale(1.0 / h_next, &mut q_next);
        }
        self.basis.push_back(BasisPair::new(sys, pc, k + 1, p_next, q_next));
        if let Some(l) = self.mem {
            while self.basis.len() > l + 1 {
                self.basis.pop_front();
            }
        }
        self.h_last = h_next;
        self.finished = h_next == 0.0;
        self.k += 1;
        Ok(ArnoldiColumn {
            k,
            first,
            h,
            h_next,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mem(&self) -> Option<usize> {
        self.mem
    }

    pub fn h10(&self) -> f64 {
        self.h10
    }

    /// `h_{k,k−1}` of the current vector.
    pub fn h_last(&self) -> f64 {
        self.h_last
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn stored(&self) -> usize {
        self.basis.len()
    }

    /// Basis pair `i` (1-based) if it is still in the window.
    pub fn vector(&self, i: usize) -> Option<(&[f64], &[f64])> {
        self.basis
            .iter()
            .find(|b| b.i == i)
            .map(|b| (b.p.as_slice(), b.q.as_slice()))
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }
}

#[derive(Debug, Clone, Default)]
pub struct ArnoldiTrace {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub h10: f64,
    pub columns: Vec<ArnoldiColumn>,
}

pub fn arnoldi_trace(
    sys: &SaddleSystem,
    pc: &mut ConstraintPreconditioner,
    x0: &[f64],
    q0: &[f64],
    mem: Option<usize>,
    max_steps: usize,
) -> Result<ArnoldiTrace> {
    let mut st = ArnoldiState::init(sys, pc, x0, q0, mem)?;
    let mut tr = ArnoldiTrace {
        h10: st.h10(),
        ..Default::default()
    };
    let push = |st: &ArnoldiState, tr: &mut ArnoldiTrace| {
        let (p, q) = st.vector(st.k()).expect("current vector");
        tr.p.push(p.to_vec());
        tr.q.push(q.to_vec());
    };
    if !st.is_finished() {
        push(&st, &mut tr);
    }
    while !st.is_finished() && tr.columns.len() < max_steps {
        let col = st.step(sys, pc)?;
        tr.columns.push(col);
        if !st.is_finished() {
            push(&st, &mut tr);
        }
    }
    Ok(tr)
}

/// `‖B p + C q‖` and the scale `‖B‖‖p‖ + ‖C‖‖q‖` it is compared with.
pub fn constraint_defect(sys: &SaddleSystem, p: &[f64], q: &[f64]) -> (f64, f64) {
    let mut r = sys.mul_b(p);
    for (r, v) in r.iter_mut().zip(sys.mul_c(q)) {
        *r += v;
    }
    (norm2(&r), sys.b().norm_fro() * norm2(p) + sys.c().norm_fro() * norm2(q))
}
