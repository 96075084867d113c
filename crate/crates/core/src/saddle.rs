//! The regularized saddle-point system and its constraint preconditioner.

use std::sync::Arc;

use log::warn;

use crate::error::{check_len, Error, Result};
use crate::factor::{factorize_symmetric_indefinite, refine_solve, Factorization, Inertia};
use crate::linops::{assemble_block_2x2, LinearOperator, MatrixStorage};
use crate::vecops::{concat, dot, norm2};

/// `[A Bᵀ; B −C] [x; y] = [b1; b2]`.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    a: Arc<dyn LinearOperator>,
    b: MatrixStorage,
    c: MatrixStorage,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

impl SaddleSystem {
    pub fn new(
        a: Arc<dyn LinearOperator>,
        b: MatrixStorage,
        c: MatrixStorage,
        b1: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::NotSquare("A"));
        }
        check_len("B columns", n, b.ncols())?;
        let m = b.nrows();
        check_len("C rows", m, c.nrows())?;
        check_len("C columns", m, c.ncols())?;
        if !c.is_symmetric() {
            return Err(Error::NotSymmetric("C"));
        }
        check_len("b1", n, b1.len())?;
        check_len("b2", m, b2.len())?;
        if m == 0 {
            return Err(Error::InvalidOptions("the constraint block must have m ≥ 1 rows".into()));
        }
        Ok(Self { a, b, c, b1, b2 })
    }

    pub fn from_matrices(
        a: MatrixStorage,
        b: MatrixStorage,
        c: MatrixStorage,
        b1: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        Self::new(Arc::new(a), b, c, b1, b2)
    }

    /// Same operators, new right-hand side.
    pub fn with_rhs(&self, b1: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.c.clone(), b1, b2)
    }

    pub fn n(&self) -> usize {
        self.b.ncols()
    }

    pub fn m(&self) -> usize {
        self.b.nrows()
    }

    pub fn a(&self) -> &Arc<dyn LinearOperator> {
        &self.a
    }

    pub fn b(&self) -> &MatrixStorage {
        &self.b
    }

    pub fn c(&self) -> &MatrixStorage {
        &self.c
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    pub fn a_is_symmetric(&self) -> bool {
        self.a.is_symmetric()
    }

    pub fn mul_a(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n()];
        self.a.apply_to(x, &mut y);
        y
    }

    pub fn mul_b(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.m()];
        self.b.apply_to(x, &mut y);
        y
    }

    pub fn mul_bt(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n()];
        let _ = self.b.apply_transpose_to(y, &mut x);
        x
    }

    pub fn mul_c(&self, y: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.m()];
        self.c.apply_to(y, &mut z);
        z
    }

    /// `(A x + Bᵀ y, B x − C y)`.
    pub fn apply_k(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("x", self.n(), x.len())?;
        check_len("y", self.m(), y.len())?;
        let mut top = self.mul_a(x);
        for (t, v) in top.iter_mut().zip(self.mul_bt(y)) {
            *t += v;
        }
        let mut bot = self.mul_b(x);
        for (t, v) in bot.iter_mut().zip(self.mul_c(y)) {
            *t -= v;
        }
        Ok((top, bot))
    }

    /// `(b1 − A x − Bᵀ y, b2 − B x + C y)`.
    pub fn residual(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (kx, ky) = self.apply_k(x, y)?;
        Ok((
            self.b1.iter().zip(&kx).map(|(b, k)| b - k).collect(),
            self.b2.iter().zip(&ky).map(|(b, k)| b - k).collect(),
        ))
    }

    /// `‖[b; b2] − K [x; y]‖ / ‖[b1; b2]‖`; absolute when the right-hand side vanishes.
    pub fn relative_residual(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let (r1, r2) = self.residual(x, y)?;
        let r = norm2(&concat(&r1, &r2));
        let b = norm2(&concat(&self.b1, &self.b2));
        Ok(if b > 0.0 { r / b } else { r })
    }

    /// `‖B x − C y‖`.
    pub fn constraint_residual(&self, x: &[f64], y: &[f64]) -> f64 {
        let bx = self.mul_b(x);
        let cy = self.mul_c(y);
        norm2(&crate::vecops::sub(&bx, &cy))
    }

    /// Scale used for feasibility tolerances: `‖B‖‖x‖ + ‖C‖‖y‖`.
    pub fn constraint_scale(&self, x: &[f64], y: &[f64]) -> f64 {
        self.b.norm_fro() * norm2(x) + self.c.norm_fro() * norm2(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionerOptions {
    /// Relative residual that triggers refinement of a solve with `P`.
    pub refine_tol: f64,
    pub refine_max: usize,
    /// Modify projection right-hand sides with the previous multiplier.
    pub semi_refine: bool,
    /// Turn a failed inertia check into an error instead of a warning.
    pub strict_assumption: bool,
}

impl Default for PreconditionerOptions {
    fn default() -> Self {
        Self {
            refine_tol: 1e-10,
            refine_max: 2,
            semi_refine: false,
            strict_assumption: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssumptionReport {
    pub holds: bool,
    pub neg_p: usize,
    pub neg_c: usize,
    pub m: usize,
}

/// Inertia test `neg(P) + neg(C) = m` computed straight from the blocks.
///
/// Works when `P` is singular, in which case it usually fails.
pub fn assumption_report(g: &MatrixStorage, b: &MatrixStorage, c: &MatrixStorage) -> Result<AssumptionReport> {
    let p = assemble_block_2x2(g, b, c)?;
    let pi = factorize_symmetric_indefinite(&p)?.inertia().expect("symmetric factor");
    let ci = factorize_symmetric_indefinite(c)?.inertia().expect("symmetric factor");
    Ok(report_from(pi, ci, b.nrows()))
}

fn report_from(p: Inertia, c: Inertia, m: usize) -> AssumptionReport {
    AssumptionReport {
        holds: p.negative + c.negative == m,
        neg_p: p.negative,
        neg_c: c.negative,
        m,
    }
}

/// Lanczos CG needs `neg(K) + neg(C) = m`.
pub fn check_cg_applicability(k_inertia: Inertia, c_inertia: Inertia, m: usize) -> bool {
    k_inertia.negative + c_inertia.negative == m
}

/// `P = [G Bᵀ; B −C]`, factorized once.
#[derive(Debug, Clone)]
pub struct ConstraintPreconditioner {
    g: MatrixStorage,
    b: MatrixStorage,
    c: MatrixStorage,
    p_matrix: MatrixStorage,
    factor: Factorization,
    p_inertia: Inertia,
    c_inertia: Inertia,
    opts: PreconditionerOptions,
    zbar_prev: Vec<f64>,
}

impl ConstraintPreconditioner {
    pub fn build(
        g: &MatrixStorage,
        b: &MatrixStorage,
        c: &MatrixStorage,
        opts: PreconditionerOptions,
    ) -> Result<Self> {
        if !g.is_symmetric() {
            return Err(Error::NotSymmetric("G"));
        }
        if !(opts.refine_tol > 0.0) {
            return Err(Error::InvalidOptions("refine_tol must be positive".into()));
        }
        let p_matrix = assemble_block_2x2(g, b, c)?;
        let factor = factorize_symmetric_indefinite(&p_matrix)?.require_nonsingular()?;
        let p_inertia = factor.inertia().expect("symmetric factor");
        let c_inertia = factorize_symmetric_indefinite(c)?
            .inertia()
            .expect("symmetric factor");
        let pc = Self {
            g: g.clone(),
            b: b.clone(),
            c: c.clone(),
            p_matrix,
            factor,
            p_inertia,
            c_inertia,
            opts,
            zbar_prev: vec![0.0; b.nrows()],
        };
        let report = pc.check_assumption();
        if !report.holds {
            if opts.strict_assumption {
                return Err(Error::AssumptionViolated {
                    neg_p: report.neg_p,
                    neg_c: report.neg_c,
                    m: report.m,
                });
            }
            warn!(
                "inertia condition fails: neg(P) = {}, neg(C) = {}, m = {}",
                report.neg_p, report.neg_c, report.m
            );
        }
        Ok(pc)
    }

    pub fn for_system(sys: &SaddleSystem, g: &MatrixStorage, opts: PreconditionerOptions) -> Result<Self> {
        check_len("G rows", sys.n(), g.nrows())?;
        Self::build(g, sys.b(), sys.c(), opts)
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.nrows()
    }

    pub fn g(&self) -> &MatrixStorage {
        &self.g
    }

    pub fn matrix(&self) -> &MatrixStorage {
        &self.p_matrix
    }

    pub fn inertia(&self) -> Inertia {
        self.p_inertia
    }

    pub fn c_inertia(&self) -> Inertia {
        self.c_inertia
    }

    pub fn options(&self) -> &PreconditionerOptions {
        &self.opts
    }

    pub fn set_semi_refine(&mut self, on: bool) {
        self.opts.semi_refine = on;
    }

    pub fn zbar_prev(&self) -> &[f64] {
        &self.zbar_prev
    }

    /// Clears the semi-refinement memory; solvers call this at start.
    pub fn reset(&mut self) {
        self.zbar_prev.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn check_assumption(&self) -> AssumptionReport {
        report_from(self.p_inertia, self.c_inertia, self.m())
    }

    /// Solves `P [z1; z2] = [r1; r2]` with refinement.
    pub fn apply_cp(&self, r1: &[f64], r2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("r1", self.n(), r1.len())?;
        check_len("r2", self.m(), r2.len())?;
        let rhs = concat(r1, r2);
        let sol = refine_solve(
            &self.factor,
            &self.p_matrix,
            &rhs,
            self.opts.refine_tol,
            self.opts.refine_max,
        )?;
        let mut z1 = sol.solution;
        let z2 = z1.split_off(self.n());
        Ok((z1, z2))
    }

    /// Projection `P [p̄; z̄] = [u; −t]`.
    ///
    /// With semi-refinement the right-hand side is shifted by the previous
    /// multiplier; the returned `z̄` is the unshifted one either way.
    pub fn project_step(&mut self, u: &[f64], t: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("u", self.n(), u.len())?;
        check_len("t", self.m(), t.len())?;
        if !self.opts.semi_refine {
            let neg_t: Vec<f64> = t.iter().map(|v| -v).collect();
            return self.apply_cp(u, &neg_t);
        }
        let zp = &self.zbar_prev;
        let mut r1 = u.to_vec();
        let mut bt = vec![0.0; self.n()];
        let _ = self.b.apply_transpose_to(zp, &mut bt);
        for (r, v) in r1.iter_mut().zip(&bt) {
            *r -= v;
        }
        let mut cz = vec![0.0; self.m()];
        self.c.apply_to(zp, &mut cz);
        let r2: Vec<f64> = t.iter().zip(&cz).map(|(t, c)| c - t).collect();
        let (pbar, dz) = self.apply_cp(&r1, &r2)?;
        let zbar: Vec<f64> = dz.iter().zip(zp).map(|(d, z)| d + z).collect();
        self.zbar_prev.copy_from_slice(&zbar);
        Ok((pbar, zbar))
    }

    /// `(rxᵀ h)^½` where `P [h; l] = [rx; 0]`.
    pub fn p_seminorm(&self, rx: &[f64]) -> Result<f64> {
        let (h, _) = self.apply_cp(rx, &vec![0.0; self.m()])?;
        let q = dot(rx, &h);
        let tol_neg = 1e-10 * dot(rx, rx);
        if q < -tol_neg {
            return Err(Error::Indefinite {
                context: "seminorm quadratic form",
                value: q,
            });
        }
        Ok(q.max(0.0).sqrt())
    }

    /// Like [`Self::p_seminorm`] but also returns `h`.
    pub fn p_seminorm_with_h(&self, rx: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (h, _) = self.apply_cp(rx, &vec![0.0; self.m()])?;
        let q = dot(rx, &h);
        if q < -1e-10 * dot(rx, rx) {
            return Err(Error::Indefinite {
                context: "seminorm quadratic form",
                value: q,
            });
        }
        Ok((q.max(0.0).sqrt(), h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::factorize_symmetric_indefinite;

    fn tiny() -> (MatrixStorage, MatrixStorage, MatrixStorage) {
        (
            MatrixStorage::identity(2),
            MatrixStorage::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            MatrixStorage::identity(1),
        )
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-14)
    }

    #[test]
    fn build_small_preconditioner() {
        let (g, b, c) = tiny();
        let p = ConstraintPreconditioner::build(&g, &b, &c, Default::default()).unwrap();
        assert_eq!(
            p.inertia(),
            Inertia {
                positive: 2,
                negative: 1,
                zero: 0
            }
        );
    }

    #[test]
    fn zero_blocks_are_singular() {
        let g = MatrixStorage::zeros(1, 1);
        let b = MatrixStorage::zeros(1, 1);
        let c = MatrixStorage::identity(1);
        assert!(matches!(
            ConstraintPreconditioner::build(&g, &b, &c, Default::default()),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn assumption_holds_and_fails() {
        let (g, b, c) = tiny();
        let p = ConstraintPreconditioner::build(&g, &b, &c, Default::default()).unwrap();
        assert_eq!(
            p.check_assumption(),
            AssumptionReport {
                holds: true,
                neg_p: 1,
                neg_c: 0,
                m: 1
            }
        );
        // G = −I makes P singular; the free function still reports
        let neg = MatrixStorage::diagonal(&[-1.0, -1.0]);
        let r = assumption_report(&neg, &b, &c).unwrap();
        assert_eq!(r.neg_p, 2);
        assert!(!r.holds);
    }

    #[test]
    fn strict_mode_rejects_violation() {
        let b = MatrixStorage::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = MatrixStorage::identity(1);
        let g = MatrixStorage::diagonal(&[1.0, -1.0]);
        let opts = PreconditionerOptions {
            strict_assumption: true,
            ..Default::default()
        };
        assert!(matches!(
            ConstraintPreconditioner::build(&g, &b, &c, opts),
            Err(Error::AssumptionViolated { .. })
        ));
        assert!(ConstraintPreconditioner::build(&g, &b, &c, Default::default()).is_ok());
    }

    #[test]
    fn cg_applicability() {
        let (a, b, c) = tiny();
        let ci = factorize_symmetric_indefinite(&c).unwrap().inertia().unwrap();
        let k = assemble_block_2x2(&a, &b, &c).unwrap();
        let ki = factorize_symmetric_indefinite(&k).unwrap().inertia().unwrap();
        assert!(check_cg_applicability(ki, ci, 1));
        let k = assemble_block_2x2(&MatrixStorage::diagonal(&[-1.0, -1.0]), &b, &c).unwrap();
        let ki = factorize_symmetric_indefinite(&k).unwrap().inertia().unwrap();
        assert!(!check_cg_applicability(ki, ci, 1));
    }

    #[test]
    fn apply_cp_examples() {
        let (g, b, c) = tiny();
        let p = ConstraintPreconditioner::build(&g, &b, &c, Default::default()).unwrap();
        let (z1, z2) = p.apply_cp(&[1.0, 0.0], &[0.0]).unwrap();
        assert!(close(&z1, &[0.5, 0.0]) && close(&z2, &[0.5]));
        let (z1, z2) = p.apply_cp(&[0.0, 0.0], &[0.0]).unwrap();
        assert!(close(&z1, &[0.0, 0.0]) && close(&z2, &[0.0]));
        let (z1, z2) = p.apply_cp(&[0.0, 1.0], &[0.0]).unwrap();
        assert!(close(&z1, &[0.0, 1.0]) && close(&z2, &[0.0]));
        assert!(p.apply_cp(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn project_step_sign() {
        // p̄₁ − z̄ = 0 from the constraint row, so z̄ = +0.5
        let (g, b, c) = tiny();
        let mut p = ConstraintPreconditioner::build(&g, &b, &c, Default::default()).unwrap();
        let (pbar, zbar) = p.project_step(&[1.0, 0.0], &[0.0]).unwrap();
        assert!(close(&pbar, &[0.5, 0.0]) && close(&zbar, &[0.5]));
        let (pbar, zbar) = p.project_step(&[0.0, 0.0], &[0.0]).unwrap();
        assert!(close(&pbar, &[0.0, 0.0]) && close(&zbar, &[0.0]));
    }

    #[test]
    fn semi_refined_projection_matches_plain() {
        let (g, b, c) = tiny();
        let mut plain = ConstraintPreconditioner::build(&g, &b, &c, Default::default()).unwrap();
        let mut semi = plain.clone();
        semi.set_semi_refine(true);
        semi.reset();
        for (u, t) in [([1.0, 0.0], [0.0]), ([0.3, -2.0], [1.5]), ([4.0, 1.0], [-0.25])] {
            let a = plain.project_step(&u, &t).unwrap();
            let s = semi.project_step(&u, &t).unwrap();
            assert!(crate::vecops::rel_diff(&a.0, &s.0) < 1e-14);
            assert!(crate::vecops::rel_diff(&a.1, &s.1) < 1e-14);
            assert_eq!(semi.zbar_prev(), &s.1[..]);
        }
        semi.reset();
        assert_eq!(semi.zbar_prev(), &[0.0]);
    }

    #[test]
    fn seminorm_examples() {
        let (g, b, c) = tiny();
        let p = ConstraintPreconditioner::build(&g, &b, &c, Default::default()).unwrap();
        assert!((p.p_seminorm(&[1.0, 1.0]).unwrap() - 1.5_f64.sqrt()).abs() < 1e-15);
        assert_eq!(p.p_seminorm(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((p.p_seminorm(&[1.0, 0.0]).unwrap() - 0.5_f64.sqrt()).abs() < 1e-15);
        for alpha in [-3.0, 0.1, 7.5] {
            let s = p.p_seminorm(&[alpha, alpha]).unwrap();
            assert!((s - alpha.abs() * 1.5_f64.sqrt()).abs() < 1e-12 * s);
        }
    }

    #[test]
    fn seminorm_detects_indefiniteness() {
        let b = MatrixStorage::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = MatrixStorage::identity(1);
        let g = MatrixStorage::diagonal(&[1.0, -1.0]);
        let p = ConstraintPreconditioner::build(&g, &b, &c, Default::default()).unwrap();
        assert!(matches!(p.p_seminorm(&[0.0, 1.0]), Err(Error::Indefinite { .. })));
    }

    #[test]
    fn system_dimension_checks() {
        let (a, b, c) = tiny();
        assert!(SaddleSystem::from_matrices(a.clone(), b.clone(), c.clone(), vec![1.0], vec![0.0]).is_err());
        let bad_b = MatrixStorage::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(SaddleSystem::from_matrices(a.clone(), bad_b, c.clone(), vec![0.0; 2], vec![0.0]).is_err());
        let sys = SaddleSystem::from_matrices(a, b, c, vec![1.0, 1.0], vec![0.0]).unwrap();
        let (r1, r2) = sys.residual(&[0.5, 1.0], &[0.5]).unwrap();
        assert!(close(&r1, &[0.0, 0.0]) && close(&r2, &[0.0]));
    }
}
