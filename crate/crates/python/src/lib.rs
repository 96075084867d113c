//! Python bindings. Matrices cross the boundary as dense lists of rows.

use cpkrylov::linops::MatrixStorage;
use cpkrylov::oracle::{direct_solve as oracle_direct, k_matrix, preconditioned_spectrum};
use cpkrylov::problems::{counterexample_system, dense_a, gen_random_system, toy_ip_solve, Formulation, SystemProps, ToyQP};
use cpkrylov::saddle::{ConstraintPreconditioner, SaddleSystem};
use cpkrylov::solvers::{reg_cpkrylov_with, Method, SolverOptions};
use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: cpkrylov::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn dense(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn square(rows: &[Vec<f64>], what: &str) -> PyResult<MatrixStorage> {
    Ok(MatrixStorage::dense_auto(dense(rows, what)?))
}

fn to_rows(m: &MatrixStorage) -> Vec<Vec<f64>> {
    let d = m.to_dense();
    (0..d.nrows()).map(|i| d.row(i).iter().copied().collect()).collect()
}

/// Saddle-point system together with the preconditioner block `G`.
#[pyclass(name = "System", module = "pycpkrylov")]
struct PySystem {
    sys: SaddleSystem,
    g: MatrixStorage,
}

#[pymethods]
impl PySystem {
    /// `G` defaults to the diagonal of `A`; `b2` to zero.
    #[new]
    #[pyo3(signature = (a, b, c, b1, b2 = None, g = None))]
    fn new(
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        b1: Vec<f64>,
        b2: Option<Vec<f64>>,
        g: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Self> {
        let a = square(&a, "A")?;
        let b = MatrixStorage::dense(dense(&b, "B")?);
        let c = square(&c, "C")?;
        let g = match g {
            Some(g) => square(&g, "G")?,
            None => MatrixStorage::diagonal(&a.diag()),
        };
        let b2 = b2.unwrap_or_else(|| vec![0.0; b.nrows()]);
        let sys = SaddleSystem::from_matrices(a, b, c, b1, b2).map_err(err)?;
        Ok(Self { sys, g })
    }

    /// Seeded random system with `rank(C) = c_rank`.
    #[staticmethod]
    #[pyo3(signature = (n, m, seed, c_rank = 0, c_psd = true, a_symmetric = true, zero_b2 = true))]
    fn random(n: usize, m: usize, seed: u64, c_rank: usize, c_psd: bool, a_symmetric: bool, zero_b2: bool) -> PyResult<Self> {
        let props = SystemProps {
            c_rank,
            c_psd,
            a_symmetric,
            assumption_ok: true,
            zero_b2,
        };
        let (sys, g) = gen_random_system(n, m, seed, props).map_err(err)?;
        Ok(Self { sys, g })
    }

    /// The singular 3 × 3 example whose nullspace conditions both hold.
    #[staticmethod]
    fn counterexample() -> PyResult<Self> {
        let sys = counterexample_system();
        let g = MatrixStorage::diagonal(&dense_a(&sys).map_err(err)?.diag());
        Ok(Self { sys, g })
    }

    #[getter]
    fn n(&self) -> usize {
        self.sys.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.sys.m()
    }

    #[getter]
    fn a(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&dense_a(&self.sys).map_err(err)?))
    }

    #[getter]
    fn b(&self) -> Vec<Vec<f64>> {
        to_rows(self.sys.b())
    }

    #[getter]
    fn c(&self) -> Vec<Vec<f64>> {
        to_rows(self.sys.c())
    }

    #[getter]
    fn g(&self) -> Vec<Vec<f64>> {
        to_rows(&self.g)
    }

    #[getter]
    fn b1(&self) -> Vec<f64> {
        self.sys.b1().to_vec()
    }

    #[getter]
    fn b2(&self) -> Vec<f64> {
        self.sys.b2().to_vec()
    }

    /// `‖K z − rhs‖ / ‖rhs‖`.
    fn relative_residual(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.sys.relative_residual(&x, &y).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("System(n={}, m={})", self.sys.n(), self.sys.m())
    }
}

#[pyclass(name = "SolveResult", module = "pycpkrylov", get_all)]
struct PySolveResult {
    x: Vec<f64>,
    y: Vec<f64>,
    iterations: usize,
    status: String,
    history: Vec<f64>,
    estimate: Vec<bool>,
    final_residual: f64,
}

#[pymethods]
impl PySolveResult {
    #[getter]
    fn converged(&self) -> bool {
        self.status == "converged"
    }

    fn __repr__(&self) -> String {
        format!(
            "SolveResult(status={}, iterations={}, final_residual={:.3e})",
            self.status, self.iterations, self.final_residual
        )
    }
}

#[pyfunction]
#[pyo3(signature = (system, method = "minres", atol = 1e-8, rtol = 1e-6, maxit = None, mem = 2, restart = 20, semi_refine = false))]
#[allow(clippy::too_many_arguments)]
fn solve(
    system: &PySystem,
    method: &str,
    atol: f64,
    rtol: f64,
    maxit: Option<usize>,
    mem: usize,
    restart: usize,
    semi_refine: bool,
) -> PyResult<PySolveResult> {
    let method: Method = method.parse().map_err(err)?;
    let opts = SolverOptions {
        atol,
        rtol,
        maxit,
        mem,
        restart,
        semi_refine,
        ..Default::default()
    };
    opts.validate().map_err(err)?;
    let mut pc = ConstraintPreconditioner::for_system(&system.sys, &system.g, opts.preconditioner_options()).map_err(err)?;
    let r = reg_cpkrylov_with(&system.sys, &mut pc, method, &opts).map_err(err)?;
    Ok(PySolveResult {
        x: r.x,
        y: r.y,
        iterations: r.iterations,
        status: r.status.to_string(),
        history: r.history,
        estimate: r.estimate,
        final_residual: r.final_residual,
    })
}

/// Dense factorization solve; raises on a singular matrix.
#[pyfunction]
fn direct_solve(system: &PySystem) -> PyResult<(Vec<f64>, Vec<f64>)> {
    oracle_direct(&system.sys).map_err(err)
}

/// Eigenvalues of `P⁻¹K` as `(re, im)` pairs and the count within `1e-8` of 1.
#[pyfunction]
fn spectrum(system: &PySystem) -> PyResult<(Vec<(f64, f64)>, usize)> {
    let pc = ConstraintPreconditioner::for_system(&system.sys, &system.g, Default::default()).map_err(err)?;
    let k = k_matrix(&system.sys).map_err(err)?;
    let s = preconditioned_spectrum(pc.matrix(), &k, system.sys.n()).map_err(err)?;
    Ok((s.eigenvalues.iter().map(|z| (z.re, z.im)).collect(), s.near_one))
}

/// Toy interior-point run on a random QP. Returns
/// `(converged, outer iterations, inner iterations, final KKT residual)`.
#[pyfunction]
#[pyo3(signature = (n, m, seed, formulation = "k2", method = "minres"))]
fn toy_ip(n: usize, m: usize, seed: u64, formulation: &str, method: &str) -> PyResult<(bool, usize, usize, f64)> {
    let kind: Formulation = formulation.parse().map_err(err)?;
    let method: Method = method.parse().map_err(err)?;
    let qp = ToyQP::random(n, m, seed).map_err(err)?;
    let rep = toy_ip_solve(&qp, kind, method, &SolverOptions::default()).map_err(err)?;
    Ok((rep.converged, rep.outer_it, rep.inner_it_total, rep.kkt_residual))
}

#[pymodule]
fn pycpkrylov(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PySolveResult>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(direct_solve, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(toy_ip, m)?)?;
    Ok(())
}
