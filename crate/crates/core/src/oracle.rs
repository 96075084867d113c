//! Dense reference computations used to validate the production path.
//!
//! Everything here forms explicit matrices and is capped at `n + m ≤ 400`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::factor::{factorize_lu, factorize_symmetric_indefinite, Factorization};
use crate::linops::{materialize, MatrixStorage};
use crate::processes::{NEG_TOL, ZERO_TOL};
use crate::saddle::SaddleSystem;
use crate::vecops::{dot, norm2};

pub const SIZE_CAP: usize = 400;
/// Relative rank tolerance for eigen/singular values.
pub const RANK_TOL: f64 = 1e-10;

fn cap(size: usize) -> Result<()> {
    if size > SIZE_CAP {
        Err(Error::SizeCap { size, cap: SIZE_CAP })
    } else {
        Ok(())
    }
}

fn col(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// `C = E F Eᵀ` with `F` diagonal and nonsingular.
#[derive(Debug, Clone)]
pub struct CDecomposition {
    pub e: DMatrix<f64>,
    pub f: Vec<f64>,
}

impl CDecomposition {
    pub fn rank(&self) -> usize {
        self.f.len()
    }

    pub fn f_inv(&self) -> Vec<f64> {
        self.f.iter().map(|v| 1.0 / v).collect()
    }

    /// `F Eᵀ q`, the image of a CP vector `q` in the auxiliary variable.
    pub fn fet(&self, q: &[f64]) -> Vec<f64> {
        let etq = self.e.transpose() * col(q);
        etq.iter().zip(&self.f).map(|(a, f)| a * f).collect()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.e * DMatrix::from_diagonal(&col(&self.f)) * self.e.transpose()
    }
}

pub fn decompose_c(c: &MatrixStorage) -> Result<CDecomposition> {
    if !c.is_symmetric() {
        return Err(Error::NotSymmetric("C"));
    }
    cap(c.nrows())?;
    let m = c.nrows();
    let eig = SymmetricEigen::new(c.to_dense());
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let keep: Vec<usize> = (0..m)
        .filter(|&i| top > 0.0 && eig.eigenvalues[i].abs() > RANK_TOL * top)
        .collect();
    let mut e = DMatrix::zeros(m, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        e.set_column(j, &eig.eigenvectors.column(i));
    }
    let f = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(CDecomposition { e, f })
}

/// Numerical rank from singular values, relative to the largest.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let s = m.clone().svd(false, false).singular_values;
    let top = s.iter().fold(0.0_f64, |a, v| a.max(*v));
    s.iter().filter(|v| top > 0.0 && **v > RANK_TOL * top).count()
}

/// Orthonormal basis of `Null(N)` for `N = [B E]`.
#[derive(Debug, Clone)]
pub struct NullspaceBasis {
    pub z: DMatrix<f64>,
    pub n: usize,
}

impl NullspaceBasis {
    pub fn z1(&self) -> DMatrix<f64> {
        self.z.rows(0, self.n).into_owned()
    }

    pub fn z2(&self) -> DMatrix<f64> {
        self.z.rows(self.n, self.z.nrows() - self.n).into_owned()
    }
}

/// Basis from the left singular vectors of `[Nᵀ 0]` with zero singular value.
pub fn nullspace(b: &MatrixStorage, cd: &CDecomposition) -> Result<NullspaceBasis> {
    let (m, n, p) = (b.nrows(), b.ncols(), cd.rank());
    cap(n + p + m)?;
    let dim = n + p;
    let mut nt = DMatrix::zeros(dim, dim.max(m));
    nt.view_mut((0, 0), (n, m)).copy_from(&b.to_dense().transpose());
    nt.view_mut((n, 0), (p, m)).copy_from(&cd.e.transpose());
    let svd = nt.svd(true, false);
    let u = svd.u.expect("requested");
    let s = &svd.singular_values;
    let top = s.iter().fold(0.0_f64, |a, v| a.max(*v));
    let cols: Vec<usize> = (0..dim).filter(|&i| s[i] <= RANK_TOL * top).collect();
    let mut z = DMatrix::zeros(dim, cols.len());
    for (j, &i) in cols.iter().enumerate() {
        z.set_column(j, &u.column(i));
    }
    Ok(NullspaceBasis { z, n })
}

/// The two necessary conditions for a nonsingular `K`:
/// `Null(A) ∩ Null(B) = {0}` and `Null(Bᵀ) ∩ Null(C) = {0}`.
pub fn nonsingularity_conditions(sys: &SaddleSystem) -> Result<(bool, bool)> {
    let (n, m) = (sys.n(), sys.m());
    cap(n + m)?;
    let a = materialize(sys.a().as_ref());
    let b = sys.b().to_dense();
    let mut ab = DMatrix::zeros(n + m, n);
    ab.view_mut((0, 0), (n, n)).copy_from(&a);
    ab.view_mut((n, 0), (m, n)).copy_from(&b);
    let mut btc = DMatrix::zeros(n + m, m);
    btc.view_mut((0, 0), (n, m)).copy_from(&b.transpose());
    btc.view_mut((n, 0), (m, m)).copy_from(&sys.c().to_dense());
    Ok((rank(&ab) == n, rank(&btc) == m))
}

/// Dense `K`; tagged symmetric when `A` is.
pub fn k_matrix(sys: &SaddleSystem) -> Result<MatrixStorage> {
    cap(sys.n() + sys.m())?;
    let a = materialize(sys.a().as_ref());
    let a = if sys.a_is_symmetric() {
        MatrixStorage::dense_symmetric((&a + a.transpose()) * 0.5)?
    } else {
        MatrixStorage::dense(a)
    };
    crate::linops::assemble_block_2x2(&a, sys.b(), sys.c())
}

fn factor_any(m: &MatrixStorage) -> Result<Factorization> {
    if m.is_symmetric() {
        factorize_symmetric_indefinite(m)
    } else {
        factorize_lu(m)
    }
}

/// Dense solve of the full system.
pub fn direct_solve(sys: &SaddleSystem) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = k_matrix(sys)?;
    let f = factor_any(&k)?.require_nonsingular()?;
    let rhs: Vec<f64> = sys.b1().iter().chain(sys.b2()).copied().collect();
    let mut x = f.solve(&rhs)?;
    let y = x.split_off(sys.n());
    Ok((x, y))
}

/// Solves the reduced system `Ẑᵀ M Z x̂ = Z₁ᵀ b` and maps back to `(x, w)`.
pub fn reduced_solve(sys: &SaddleSystem, cd: &CDecomposition, ns: &NullspaceBasis) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = materialize(sys.a().as_ref());
    let z1 = ns.z1();
    let z2 = ns.z2();
    let finv = DMatrix::from_diagonal(&col(&cd.f_inv()));
    let mhat = z1.transpose() * &a * &z1 + z2.transpose() * finv * &z2;
    let bhat = z1.transpose() * col(sys.b1());
    let xhat = mhat
        .lu()
        .solve(&bhat)
        .ok_or(Error::Singular { n_zero: 1 })?;
    Ok((vec_of(&(&z1 * &xhat)), vec_of(&(&z2 * &xhat))))
}

/// `Zᵀ blkdiag(G, F⁻¹) Z`.
pub fn reduced_preconditioner(g: &MatrixStorage, cd: &CDecomposition, ns: &NullspaceBasis) -> DMatrix<f64> {
    let z1 = ns.z1();
    let z2 = ns.z2();
    let finv = DMatrix::from_diagonal(&col(&cd.f_inv()));
    z1.transpose() * g.to_dense() * &z1 + z2.transpose() * finv * &z2
}

/// Smallest eigenvalue of the reduced preconditioner; positive iff the
/// inertia condition holds.
pub fn reduced_preconditioner_min_eig(g: &MatrixStorage, cd: &CDecomposition, ns: &NullspaceBasis) -> f64 {
    let r = reduced_preconditioner(g, cd, ns);
    if r.nrows() == 0 {
        return f64::INFINITY;
    }
    let r = (&r + r.transpose()) * 0.5;
    SymmetricEigen::new(r).eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(*v))
}

/// The 3×3-block matrix `[[G, 0, Bᵀ], [0, F⁻¹, Eᵀ], [B, E, 0]]`.
pub fn projection_matrix(g: &MatrixStorage, b: &MatrixStorage, cd: &CDecomposition) -> Result<MatrixStorage> {
    let (n, m, p) = (b.ncols(), b.nrows(), cd.rank());
    cap(n + p + m)?;
    let bd = b.to_dense();
    let mut k = DMatrix::zeros(n + p + m, n + p + m);
    k.view_mut((0, 0), (n, n)).copy_from(&g.to_dense());
    for (i, v) in cd.f_inv().iter().enumerate() {
        k[(n + i, n + i)] = *v;
    }
    k.view_mut((0, n + p), (n, m)).copy_from(&bd.transpose());
    k.view_mut((n + p, 0), (m, n)).copy_from(&bd);
    k.view_mut((n, n + p), (p, m)).copy_from(&cd.e.transpose());
    k.view_mut((n + p, n), (m, p)).copy_from(&cd.e);
    MatrixStorage::dense_symmetric(k)
}

/// `P_G blkdiag(G, F⁻¹)` as a dense `(n+p)×(n+p)` matrix.
pub fn oblique_projector(g: &MatrixStorage, b: &MatrixStorage, cd: &CDecomposition) -> Result<DMatrix<f64>> {
    let (n, p) = (b.ncols(), cd.rank());
    let k = projection_matrix(g, b, cd)?;
    let f = factorize_symmetric_indefinite(&k)?.require_nonsingular()?;
    let mut d = DMatrix::zeros(n + p, n + p);
    d.view_mut((0, 0), (n, n)).copy_from(&g.to_dense());
    for (i, v) in cd.f_inv().iter().enumerate() {
        d[(n + i, n + i)] = *v;
    }
    let mut out = DMatrix::zeros(n + p, n + p);
    let mut rhs = vec![0.0; k.nrows()];
    for j in 0..n + p {
        rhs[..n + p].copy_from_slice(d.column(j).as_slice());
        let s = f.solve(&rhs)?;
        out.set_column(j, &DVector::from_column_slice(&s[..n + p]));
    }
    Ok(out)
}

fn classify(raw: f64, mag: f64) -> Result<f64> {
    if raw < -NEG_TOL * mag {
        return Err(Error::Indefinite {
            context: "oracle normalizer",
            value: raw,
        });
    }
    Ok(if raw <= ZERO_TOL * mag { 0.0 } else { raw.sqrt() })
}

/// Lanczos trace with two vector blocks per basis vector (`x` and `w` or `y`).
#[derive(Debug, Clone, Default)]
pub struct OracleLanczosTrace {
    pub vx: Vec<Vec<f64>>,
    pub v2: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct OracleArnoldiTrace {
    pub vx: Vec<Vec<f64>>,
    pub v2: Vec<Vec<f64>>,
    pub h10: f64,
    /// Column `k` holds `h_{1,k} … h_{k+1,k}`.
    pub h: Vec<Vec<f64>>,
}

/// Shared driver: `apply(v)` returns `u = M v`, `prec(u)` the preconditioned
/// vector and `ip(a, b)` the preconditioner inner product. All act on the
/// concatenated `[x; second]` vector.
struct Generic<'a> {
    nx: usize,
    apply: Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>,
    /// Second argument: the vector `u` came from, whose constraint defect
    /// is carried into the solve.
    prec: Box<dyn Fn(&[f64], Option<&[f64]>) -> Result<Vec<f64>> + 'a>,
    ip: Box<dyn Fn(&[f64], &[f64]) -> f64 + 'a>,
}

impl Generic<'_> {
    fn split(&self, v: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut a = v;
        let b = a.split_off(self.nx);
        (a, b)
    }

    fn lanczos(&self, u0: Vec<f64>, v0: Vec<f64>, max_steps: usize) -> Result<OracleLanczosTrace> {
        let mut tr = OracleLanczosTrace::default();
        let mut v = (self.prec)(&u0, None)?;
        let raw = dot(&v, &u0);
        let beta1 = classify(raw, norm2(&v) * norm2(&u0))?;
        tr.beta.push(beta1);
        if beta1 == 0.0 {
            return Ok(tr);
        }
        v.iter_mut().for_each(|e| *e /= beta1);
        let mut v_prev = v0;
        let mut beta = beta1;
        loop {
            let (a, b) = self.split(v.clone());
            tr.vx.push(a);
            tr.v2.push(b);
            if tr.alpha.len() >= max_steps {
                break;
            }
            let u = (self.apply)(&v);
            let alpha = dot(&u, &v);
            let ubar = (self.prec)(&u, Some(&v))?;
            let mag = norm2(&ubar) * norm2(&u);
            let next: Vec<f64> = (0..v.len())
                .map(|i| ubar[i] - alpha * v[i] - beta * v_prev[i])
                .collect();
            let bn = classify((self.ip)(&next, &next), mag)?;
            tr.alpha.push(alpha);
            tr.beta.push(bn);
            if bn == 0.0 {
                break;
            }
            v_prev = std::mem::replace(&mut v, next.iter().map(|e| e / bn).collect());
            beta = bn;
        }
        Ok(tr)
    }

    fn arnoldi(&self, u0: Vec<f64>, max_steps: usize) -> Result<OracleArnoldiTrace> {
        let mut tr = OracleArnoldiTrace::default();
        let mut v = (self.prec)(&u0, None)?;
        let h10 = classify(dot(&v, &u0), norm2(&v) * norm2(&u0))?;
        tr.h10 = h10;
        if h10 == 0.0 {
            return Ok(tr);
        }
        v.iter_mut().for_each(|e| *e /= h10);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        loop {
            basis.push(v.clone());
            let (a, b) = self.split(v.clone());
            tr.vx.push(a);
            tr.v2.push(b);
            if tr.h.len() >= max_steps {
                break;
            }
            let u = (self.apply)(&v);
            let mut next = (self.prec)(&u, Some(&v))?;
            let mag = norm2(&next) * norm2(&u);
            let mut hcol = Vec::with_capacity(basis.len() + 1);
            // two passes of modified Gram-Schmidt in the preconditioner inner product
            hcol.resize(basis.len(), 0.0);
            for _ in 0..2 {
                for (hik, vi) in hcol.iter_mut().zip(&basis) {
                    let h = (self.ip)(vi, &next);
                    for (e, w) in next.iter_mut().zip(vi) {
                        *e -= h * w;
                    }
                    *hik += h;
                }
            }
            let hn = classify((self.ip)(&next, &next), mag)?;
            hcol.push(hn);
            tr.h.push(hcol);
            if hn == 0.0 {
                break;
            }
            v = next.iter().map(|e| e / hn).collect();
        }
        Ok(tr)
    }
}

struct Projected {
    a: DMatrix<f64>,
    g: DMatrix<f64>,
    b: DMatrix<f64>,
    e: DMatrix<f64>,
    finv: Vec<f64>,
    f3: Factorization,
    n: usize,
    p: usize,
    m: usize,
}

fn projected_setup(sys: &SaddleSystem, g: &MatrixStorage, cd: &CDecomposition) -> Result<Projected> {
    let k3 = projection_matrix(g, sys.b(), cd)?;
    Ok(Projected {
        a: materialize(sys.a().as_ref()),
        g: g.to_dense(),
        b: sys.b().to_dense(),
        e: cd.e.clone(),
        finv: cd.f_inv(),
        f3: factorize_symmetric_indefinite(&k3)?.require_nonsingular()?,
        n: sys.n(),
        p: cd.rank(),
        m: sys.m(),
    })
}

impl Projected {
    fn generic(&self) -> Generic<'_> {
        let (n, p, m) = (self.n, self.p, self.m);
        Generic {
            nx: n,
            apply: Box::new(move |v: &[f64]| {
                let mut u = vec_of(&(&self.a * col(&v[..n])));
                u.extend(v[n..].iter().zip(&self.finv).map(|(a, f)| a * f));
                u
            }),
            prec: Box::new(move |u: &[f64], v: Option<&[f64]>| {
                let mut rhs = u.to_vec();
                match v {
                    Some(v) => {
                        let d = &self.b * col(&v[..n]) + &self.e * col(&v[n..]);
                        rhs.extend(d.iter());
                    }
                    None => rhs.extend(std::iter::repeat_n(0.0, m)),
                }
                let mut s = self.f3.solve(&rhs)?;
                s.truncate(n + p);
                Ok(s)
            }),
            ip: Box::new(move |a: &[f64], b: &[f64]| {
                let w: f64 = a[n..].iter().zip(&b[n..]).zip(&self.finv).map(|((a, b), f)| a * b * f).sum();
                (col(&a[..n]).transpose() * &self.g * col(&b[..n]))[(0, 0)] + w
            }),
        }
    }

    fn start(&self, sys: &SaddleSystem, x0: &[f64], w0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, p) = (self.n, self.p);
        if x0.len() != n || w0.len() != p {
            return Err(Error::DimensionMismatch {
                context: "oracle start",
                expected: n + p,
                found: x0.len() + w0.len(),
            });
        }
        let ax = &self.a * col(x0);
        let mut u0: Vec<f64> = sys.b1().iter().zip(ax.iter()).map(|(b, a)| b - a).collect();
        u0.extend(w0.iter().zip(&self.finv).map(|(w, f)| -w * f));
        let mut v0 = vec![0.0; n];
        v0.extend(w0.iter().map(|w| -w));
        Ok((u0, v0))
    }
}

/// Projected Lanczos on the 3×3-block formulation, from `(x0, w0)` with
/// `B x0 + E w0 = 0`.
pub fn projected_lanczos(
    sys: &SaddleSystem,
    g: &MatrixStorage,
    cd: &CDecomposition,
    x0: &[f64],
    w0: &[f64],
    max_steps: usize,
) -> Result<OracleLanczosTrace> {
    let pr = projected_setup(sys, g, cd)?;
    let (u0, v0) = pr.start(sys, x0, w0)?;
    let gen = pr.generic();
    gen.lanczos(u0, v0, max_steps)
}

pub fn projected_arnoldi(
    sys: &SaddleSystem,
    g: &MatrixStorage,
    cd: &CDecomposition,
    x0: &[f64],
    w0: &[f64],
    max_steps: usize,
) -> Result<OracleArnoldiTrace> {
    let pr = projected_setup(sys, g, cd)?;
    let (u0, _) = pr.start(sys, x0, w0)?;
    let gen = pr.generic();
    gen.arnoldi(u0, max_steps)
}

struct FullSpace {
    k: DMatrix<f64>,
    p: DMatrix<f64>,
    pf: Factorization,
    n: usize,
}

fn full_setup(sys: &SaddleSystem, g: &MatrixStorage) -> Result<FullSpace> {
    let k = k_matrix(sys)?.to_dense();
    let p = crate::linops::assemble_block_2x2(g, sys.b(), sys.c())?;
    Ok(FullSpace {
        k,
        p: p.to_dense(),
        pf: factorize_symmetric_indefinite(&p)?.require_nonsingular()?,
        n: sys.n(),
    })
}

impl FullSpace {
    fn generic(&self) -> Generic<'_> {
        Generic {
            nx: self.n,
            apply: Box::new(move |v: &[f64]| vec_of(&(&self.k * col(v)))),
            prec: Box::new(move |u: &[f64], _| self.pf.solve(u)),
            ip: Box::new(move |a: &[f64], b: &[f64]| (col(a).transpose() * &self.p * col(b))[(0, 0)]),
        }
    }

    fn start(&self, sys: &SaddleSystem, x0: &[f64], y0: &[f64]) -> Result<Vec<f64>> {
        let (kx, ky) = sys.apply_k(x0, y0)?;
        let res = norm2(&ky);
        if res > 1e-10 * sys.constraint_scale(x0, y0) {
            return Err(Error::InfeasibleStart { residual: res });
        }
        let mut r0: Vec<f64> = sys.b1().iter().zip(&kx).map(|(b, k)| b - k).collect();
        r0.extend(std::iter::repeat_n(0.0, sys.m()));
        Ok(r0)
    }
}

/// Preconditioned Lanczos applied formally to `K` with preconditioner `P`.
pub fn full_space_lanczos(
    sys: &SaddleSystem,
    g: &MatrixStorage,
    x0: &[f64],
    y0: &[f64],
    max_steps: usize,
) -> Result<OracleLanczosTrace> {
    let fs = full_setup(sys, g)?;
    let r0 = fs.start(sys, x0, y0)?;
    let v0 = vec![0.0; r0.len()];
    let gen = fs.generic();
    gen.lanczos(r0, v0, max_steps)
}

/// Preconditioned Arnoldi applied formally to `K`; `h_{i,k} = v_iᵀ u_k`.
pub fn full_space_arnoldi(
    sys: &SaddleSystem,
    g: &MatrixStorage,
    x0: &[f64],
    y0: &[f64],
    max_steps: usize,
) -> Result<OracleArnoldiTrace> {
    let fs = full_setup(sys, g)?;
    let r0 = fs.start(sys, x0, y0)?;
    let gen = fs.generic();
    gen.arnoldi(r0, max_steps)
}

/// `vxᵀ A vx + 2 vxᵀ Bᵀ vy − vyᵀ C vy`.
pub fn full_space_alpha(sys: &SaddleSystem, vx: &[f64], vy: &[f64]) -> f64 {
    dot(vx, &sys.mul_a(vx)) + 2.0 * dot(vx, &sys.mul_bt(vy)) - dot(vy, &sys.mul_c(vy))
}

/// Eigenvalues of `P⁻¹K` with the count of those within `1e-8` of 1.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
    pub near_one: usize,
    pub max_imag: f64,
}

pub const NEAR_ONE_TOL: f64 = 1e-8;

fn sort_complex(v: &mut [Complex64]) {
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
}

fn summarize(mut eigenvalues: Vec<Complex64>, exact_ones: usize) -> Spectrum {
    sort_complex(&mut eigenvalues);
    let near_one = exact_ones
        + eigenvalues
            .iter()
            .filter(|z| (**z - 1.0).norm() <= NEAR_ONE_TOL)
            .count();
    let max_imag = eigenvalues.iter().fold(0.0_f64, |a, z| a.max(z.im.abs()));
    let mut all = eigenvalues;
    all.extend(std::iter::repeat_n(Complex64::new(1.0, 0.0), exact_ones));
    sort_complex(&mut all);
    Spectrum {
        eigenvalues: all,
        near_one,
        max_imag,
    }
}

/// Spectrum of `P⁻¹K` where the two matrices share every block except the
/// leading `n × n` one.
///
/// `K = P + U Vᵀ` with `U = [A − G; 0]`, `V = [I; 0]`, so the spectrum is
/// `m` ones together with `1 + eig(X (A − G))`, `X = (P⁻¹)₁₁`. `X` is
/// symmetric; writing `X = Q Λ Qᵀ` over its numerical range leaves
/// `n − rank(X)` further exact ones and the `rank(X)` eigenvalues of
/// `1 + Λ Qᵀ (A − G) Q`. Reading the exact ones off the structure avoids the
/// loss of accuracy a general eigensolver suffers at defective eigenvalues.
pub fn preconditioned_spectrum(p: &MatrixStorage, k: &MatrixStorage, n: usize) -> Result<Spectrum> {
    let size = p.nrows();
    if p.ncols() != size || k.nrows() != size || k.ncols() != size {
        return Err(Error::NotSquare("P and K"));
    }
    if n > size {
        return Err(Error::DimensionMismatch {
            context: "leading block size",
            expected: size,
            found: n,
        });
    }
    cap(size)?;
    let m = size - n;
    let pd = p.to_dense();
    let kd = k.to_dense();
    let off = (&pd - &kd).abs().view((0, n), (size, m)).max()
        .max((&pd - &kd).abs().view((n, 0), (m, n)).max());
    if off > 0.0 {
        return Err(Error::InvalidOptions("P and K differ outside the leading block".into()));
    }
    let pf = factorize_symmetric_indefinite(p)?.require_nonsingular()?;
    let mut x = DMatrix::zeros(n, n);
    let mut e = vec![0.0; size];
    for j in 0..n {
        e[j] = 1.0;
        let s = pf.solve(&e)?;
        x.set_column(j, &DVector::from_column_slice(&s[..n]));
        e[j] = 0.0;
    }
    let x = (&x + x.transpose()) * 0.5;
    let d = kd.view((0, 0), (n, n)) - pd.view((0, 0), (n, n));
    let eig = SymmetricEigen::new(x);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let keep: Vec<usize> = (0..n)
        .filter(|&i| top > 0.0 && eig.eigenvalues[i].abs() > RANK_TOL * top)
        .collect();
    let r = keep.len();
    let mut q = DMatrix::zeros(n, r);
    for (j, &i) in keep.iter().enumerate() {
        q.set_column(j, &eig.eigenvectors.column(i));
    }
    let lam = DMatrix::from_diagonal(&DVector::from_iterator(r, keep.iter().map(|&i| eig.eigenvalues[i])));
    let small = lam * q.transpose() * d * &q;
    let mu: Vec<Complex64> = if r == 0 {
        Vec::new()
    } else {
        small.complex_eigenvalues().iter().map(|z| z + 1.0).collect()
    };
    Ok(summarize(mu, m + (n - r)))
}

/// Eigenvalues of the explicitly formed `P⁻¹K` from a general eigensolver.
pub fn preconditioned_spectrum_dense(p: &MatrixStorage, k: &MatrixStorage) -> Result<Spectrum> {
    let size = p.nrows();
    cap(size)?;
    let pf = factorize_symmetric_indefinite(p)?.require_nonsingular()?;
    let kd = k.to_dense();
    let mut pk = DMatrix::zeros(size, size);
    for j in 0..size {
        let s = pf.solve(kd.column(j).as_slice())?;
        pk.set_column(j, &DVector::from_column_slice(&s));
    }
    Ok(summarize(pk.complex_eigenvalues().iter().copied().collect(), 0))
}

/// Upper bound on the Krylov dimension, `min(n − m + p + 2, n + m)`.
pub fn krylov_bound(n: usize, m: usize, p: usize) -> usize {
    (n + p + 2).saturating_sub(m).min(n + m)
}
