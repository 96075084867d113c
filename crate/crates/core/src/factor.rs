//! Dense direct factorizations.
//!
//! The symmetric-indefinite path is a Bunch–Kaufman pivoted `P M Pᵀ = L D Lᵀ`
//! with 1×1 and 2×2 pivot blocks; its inertia is read from `D`. The general
//! path is LU with partial pivoting and reports no inertia.
//!
//! Pivots whose magnitude falls below `1e-12 · max|Mᵢⱼ|` are treated as zero.
//! A factorization with zero pivots can be inspected (inertia, `n_zero`) but
//! refuses to solve.

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};
use crate::linops::MatrixStorage;
use crate::vecops::norm2;

const DROP_TOL: f64 = 1e-12;
/// Bunch–Kaufman growth constant (1 + √17) / 8.
const BK_ALPHA: f64 = 0.640_388_203_202_208_4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

impl Inertia {
    pub fn size(&self) -> usize {
        self.positive + self.negative + self.zero
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    SymmetricIndefinite,
    LuGeneral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pivot {
    One(f64),
    /// Symmetric 2×2 block `[[a, b], [b, c]]` occupying two positions.
    Two { a: f64, b: f64, c: f64 },
    /// Second slot of a 2×2 block.
    Cont,
}

#[derive(Debug, Clone)]
enum Data {
    Ldlt {
        l: DMatrix<f64>,
        pivots: Vec<Pivot>,
        perm: Vec<usize>,
    },
    Lu {
        lu: DMatrix<f64>,
        perm: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct Factorization {
    size: usize,
    data: Data,
    n_zero: usize,
    inertia: Option<Inertia>,
}

impl Factorization {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> FactorKind {
        match self.data {
            Data::Ldlt { .. } => FactorKind::SymmetricIndefinite,
            Data::Lu { .. } => FactorKind::LuGeneral,
        }
    }

    /// Available for symmetric-indefinite factorizations only.
    pub fn inertia(&self) -> Option<Inertia> {
        self.inertia
    }

    pub fn n_zero(&self) -> usize {
        self.n_zero
    }

    pub fn is_singular(&self) -> bool {
        self.n_zero > 0
    }

    pub fn require_nonsingular(self) -> Result<Self> {
        if self.is_singular() {
            Err(Error::Singular {
                n_zero: self.n_zero,
            })
        } else {
            Ok(self)
        }
    }

    /// Solves `M z = rhs` with the stored factors.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        check_len("factor solve right-hand side", self.size, rhs.len())?;
        if self.is_singular() {
            return Err(Error::Singular {
                n_zero: self.n_zero,
            });
        }
        let n = self.size;
        match &self.data {
            Data::Ldlt { l, pivots, perm } => {
                let mut w: Vec<f64> = perm.iter().map(|&p| rhs[p]).collect();
                // L w' = w
                for j in 0..n {
                    let wj = w[j];
                    if wj != 0.0 {
                        for i in (j + 1)..n {
                            w[i] -= l[(i, j)] * wj;
                        }
                    }
                }
                // D
                let mut k = 0;
                while k < n {
                    match pivots[k] {
                        Pivot::One(d) => {
                            w[k] /= d;
                            k += 1;
                        }
                        Pivot::Two { a, b, c } => {
                            let det = a * c - b * b;
                            let (w0, w1) = (w[k], w[k + 1]);
                            w[k] = (c * w0 - b * w1) / det;
                            w[k + 1] = (a * w1 - b * w0) / det;
                            k += 2;
                        }
                        Pivot::Cont => unreachable!("continuation slot visited first"),
                    }
                }
                // Lᵀ
                for j in (0..n).rev() {
                    let mut s = w[j];
                    for i in (j + 1)..n {
                        s -= l[(i, j)] * w[i];
                    }
                    w[j] = s;
                }
                let mut z = vec![0.0; n];
                for (i, &p) in perm.iter().enumerate() {
                    z[p] = w[i];
                }
                Ok(z)
            }
            Data::Lu { lu, perm } => {
                let mut w: Vec<f64> = perm.iter().map(|&p| rhs[p]).collect();
                for j in 0..n {
                    let wj = w[j];
                    if wj != 0.0 {
                        for i in (j + 1)..n {
                            w[i] -= lu[(i, j)] * wj;
                        }
                    }
                }
                for j in (0..n).rev() {
                    let mut s = w[j];
                    for i in (j + 1)..n {
                        s -= lu[(j, i)] * w[i];
                    }
                    w[j] = s / lu[(j, j)];
                }
                Ok(w)
            }
        }
    }
}

/// Pivoted LDLᵀ of a symmetric matrix. Never fails on singular input; use
/// [`Factorization::require_nonsingular`] when a solve is needed.
pub fn factorize_symmetric_indefinite(m: &MatrixStorage) -> Result<Factorization> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare("matrix to factorize"));
    }
    if !m.is_symmetric() {
        return Err(Error::NotSymmetric("matrix to factorize"));
    }
    Ok(ldlt_dense(m.to_dense()))
}

/// LU with partial pivoting.
pub fn factorize_lu(m: &MatrixStorage) -> Result<Factorization> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare("matrix to factorize"));
    }
    Ok(lu_dense(m.to_dense()))
}

/// Symmetric-indefinite when tagged symmetric, LU otherwise.
pub fn factorize(m: &MatrixStorage) -> Result<Factorization> {
    if m.is_symmetric() {
        factorize_symmetric_indefinite(m)
    } else {
        factorize_lu(m)
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn swap_symmetric(w: &mut DMatrix<f64>, i: usize, j: usize) {
    if i != j {
        w.swap_rows(i, j);
        w.swap_columns(i, j);
    }
}

pub(crate) fn ldlt_dense(mut w: DMatrix<f64>) -> Factorization {
    let n = w.nrows();
    // largest entry or elimination term seen so far; roundoff in the
    // trailing block scales with it
    let mut scale = max_abs(&w);
    let mut l = DMatrix::<f64>::identity(n, n);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut pivots = vec![Pivot::One(0.0); n];
    let mut inertia = Inertia {
        positive: 0,
        negative: 0,
        zero: 0,
    };

    let swap_all = |w: &mut DMatrix<f64>, l: &mut DMatrix<f64>, perm: &mut Vec<usize>, k: usize, a: usize, b: usize| {
        if a == b {
            return;
        }
        swap_symmetric(w, a, b);
        perm.swap(a, b);
        for c in 0..k {
            let t = l[(a, c)];
            l[(a, c)] = l[(b, c)];
            l[(b, c)] = t;
        }
    };

    let mut k = 0;
    while k < n {
        let tol = DROP_TOL * scale;
        let absakk = w[(k, k)].abs();
        let (imax, colmax) = ((k + 1)..n)
            .map(|i| (i, w[(i, k)].abs()))
            .fold((k, 0.0_f64), |best, cur| if cur.1 > best.1 { cur } else { best });

        if absakk.max(colmax) <= tol {
            // zero column: record a null pivot and drop the column
            pivots[k] = Pivot::One(0.0);
            inertia.zero += 1;
            for i in (k + 1)..n {
                w[(i, k)] = 0.0;
                w[(k, i)] = 0.0;
            }
            k += 1;
            continue;
        }

        let two_by_two;
        if absakk >= BK_ALPHA * colmax {
            two_by_two = false;
        } else {
            let rowmax = (k..n)
                .filter(|&j| j != imax)
                .fold(0.0_f64, |a, j| a.max(w[(imax, j)].abs()));
            if absakk * rowmax >= BK_ALPHA * colmax * colmax {
                two_by_two = false;
            } else if w[(imax, imax)].abs() >= BK_ALPHA * rowmax {
                swap_all(&mut w, &mut l, &mut perm, k, k, imax);
                two_by_two = false;
            } else {
                swap_all(&mut w, &mut l, &mut perm, k, k + 1, imax);
                two_by_two = true;
            }
        }

        if !two_by_two {
            let d = w[(k, k)];
            pivots[k] = Pivot::One(d);
            if d.abs() <= tol {
                inertia.zero += 1;
            } else if d > 0.0 {
                inertia.positive += 1;
            } else {
                inertia.negative += 1;
            }
            let col: Vec<f64> = ((k + 1)..n).map(|i| w[(i, k)] / d).collect();
            for (ii, i) in ((k + 1)..n).enumerate() {
                l[(i, k)] = col[ii];
            }
            for (jj, j) in ((k + 1)..n).enumerate() {
                let wj = w[(j, k)];
                if wj == 0.0 {
                    continue;
                }
                for (ii, i) in ((k + 1)..n).enumerate() {
                    let t = col[ii] * wj;
                    scale = scale.max(t.abs());
                    w[(i, j)] -= t;
                }
                let _ = jj;
            }
            k += 1;
        } else {
            let (a, b, c) = (w[(k, k)], w[(k + 1, k)], w[(k + 1, k + 1)]);
            pivots[k] = Pivot::Two { a, b, c };
            pivots[k + 1] = Pivot::Cont;
            // eigenvalues of the 2×2 block
            let mean = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            for lam in [mean + rad, mean - rad] {
                if lam.abs() <= tol {
                    inertia.zero += 1;
                } else if lam > 0.0 {
                    inertia.positive += 1;
                } else {
                    inertia.negative += 1;
                }
            }
            let det = a * c - b * b;
            let rows: Vec<(f64, f64)> = ((k + 2)..n)
                .map(|i| {
                    let (x0, x1) = (w[(i, k)], w[(i, k + 1)]);
                    ((c * x0 - b * x1) / det, (a * x1 - b * x0) / det)
                })
                .collect();
            for (ii, i) in ((k + 2)..n).enumerate() {
                l[(i, k)] = rows[ii].0;
                l[(i, k + 1)] = rows[ii].1;
            }
            for j in (k + 2)..n {
                let (wj0, wj1) = (w[(j, k)], w[(j, k + 1)]);
                for (ii, i) in ((k + 2)..n).enumerate() {
                    let (t0, t1) = (rows[ii].0 * wj0, rows[ii].1 * wj1);
                    scale = scale.max(t0.abs()).max(t1.abs());
                    w[(i, j)] -= t0 + t1;
                }
            }
            k += 2;
        }
    }

    Factorization {
        size: n,
        n_zero: inertia.zero,
        data: Data::Ldlt { l, pivots, perm },
        inertia: Some(inertia),
    }
}

fn lu_dense(mut a: DMatrix<f64>) -> Factorization {
    let n = a.nrows();
    let mut scale = max_abs(&a);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut n_zero = 0;
    for k in 0..n {
        let tol = DROP_TOL * scale;
        let (p, pmax) = (k..n)
            .map(|i| (i, a[(i, k)].abs()))
            .fold((k, -1.0_f64), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax <= tol {
            n_zero += 1;
            continue;
        }
        if p != k {
            a.swap_rows(p, k);
            perm.swap(p, k);
        }
        let piv = a[(k, k)];
        for i in (k + 1)..n {
            let f = a[(i, k)] / piv;
            a[(i, k)] = f;
            if f != 0.0 {
                for j in (k + 1)..n {
                    let t = f * a[(k, j)];
                    scale = scale.max(t.abs());
                    a[(i, j)] -= t;
                }
            }
        }
    }
    Factorization {
        size: n,
        data: Data::Lu { lu: a, perm },
        n_zero,
        inertia: None,
    }
}

/// Checked solve with an existing factorization.
pub fn factor_solve(f: &Factorization, rhs: &[f64]) -> Result<Vec<f64>> {
    f.solve(rhs)
}

/// Result of [`refine_solve`].
#[derive(Debug, Clone)]
pub struct Refined {
    pub solution: Vec<f64>,
    /// Final relative residual `‖rhs − M z‖ / ‖rhs‖` (absolute when `rhs = 0`).
    pub residual: f64,
    pub steps: usize,
}

/// Solve followed by iterative refinement against the original matrix.
///
/// Corrections are applied while the relative residual exceeds `tol` and
/// fewer than `max_steps` corrections have been made. A correction that does
/// not reduce the residual is discarded and refinement stops.
pub fn refine_solve(
    f: &Factorization,
    m: &MatrixStorage,
    rhs: &[f64],
    tol: f64,
    max_steps: usize,
) -> Result<Refined> {
    check_len("refinement matrix", f.size(), m.nrows())?;
    let mut z = f.solve(rhs)?;
    let rnorm = norm2(rhs);
    let denom = if rnorm > 0.0 { rnorm } else { 1.0 };
    let residual_of = |z: &[f64]| -> Result<(Vec<f64>, f64)> {
        let mz = m.matvec(z)?;
        let r: Vec<f64> = rhs.iter().zip(&mz).map(|(a, b)| a - b).collect();
        let nr = norm2(&r) / denom;
        Ok((r, nr))
    };
    let (mut r, mut res) = residual_of(&z)?;
    let mut steps = 0;
    while res > tol && steps < max_steps {
        let dz = f.solve(&r)?;
        let trial: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
        let (r_new, res_new) = residual_of(&trial)?;
        steps += 1;
        if res_new >= res {
            break;
        }
        z = trial;
        r = r_new;
        res = res_new;
    }
    Ok(Refined {
        solution: z,
        residual: res,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sym(rows: &[&[f64]]) -> MatrixStorage {
        let n = rows.len();
        MatrixStorage::dense_symmetric(DMatrix::from_fn(n, n, |i, j| rows[i][j])).unwrap()
    }

    fn k3() -> MatrixStorage {
        sym(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0], &[1.0, 0.0, -1.0]])
    }

    #[test]
    fn inertia_of_small_saddle() {
        // eigenvalues 1, ±√2
        let f = factorize_symmetric_indefinite(&k3()).unwrap();
        assert_eq!(
            f.inertia(),
            Some(Inertia {
                positive: 2,
                negative: 1,
                zero: 0
            })
        );
    }

    #[test]
    fn inertia_of_identity() {
        let f = factorize_symmetric_indefinite(&MatrixStorage::identity(3)).unwrap();
        assert_eq!(f.inertia().unwrap().positive, 3);
        assert_eq!(f.solve(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_row_counts_as_zero_pivot() {
        let k = MatrixStorage::dense_symmetric(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0],
        ))
        .unwrap();
        let f = factorize_symmetric_indefinite(&k).unwrap();
        assert!(f.n_zero() >= 1);
        assert!(matches!(f.solve(&[1.0, 0.0, 0.0]), Err(Error::Singular { .. })));
        assert!(f.require_nonsingular().is_err());
    }

    #[test]
    fn lu_on_singular_counts_zero() {
        let a = MatrixStorage::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let f = factorize_lu(&a).unwrap();
        assert_eq!(f.n_zero(), 1);
        assert!(f.inertia().is_none());
    }

    #[test]
    fn solve_small_saddle_by_hand() {
        // x1 + y = 1, x2 = 0, x1 - y = 0  =>  x1 = y = 1/2
        let f = factorize_symmetric_indefinite(&k3()).unwrap();
        let z = factor_solve(&f, &[1.0, 0.0, 0.0]).unwrap();
        for (a, b) in z.iter().zip([0.5, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn solve_length_mismatch() {
        let f = factorize_symmetric_indefinite(&k3()).unwrap();
        assert!(matches!(
            f.solve(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn two_by_two_pivots_are_used() {
        // zero diagonal forces a 2×2 block
        let m = sym(&[&[0.0, 1.0, 2.0], &[1.0, 0.0, 3.0], &[2.0, 3.0, 0.0]]);
        let f = factorize_symmetric_indefinite(&m).unwrap();
        let Data::Ldlt { pivots, .. } = &f.data else { unreachable!() };
        assert!(pivots.iter().any(|p| matches!(p, Pivot::Two { .. })));
        let rhs = [1.0, -2.0, 0.5];
        let z = f.solve(&rhs).unwrap();
        let back = m.matvec(&z).unwrap();
        for (a, b) in back.iter().zip(rhs) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn lu_solves_nonsymmetric() {
        let a = MatrixStorage::from_rows(&[
            vec![0.0, 2.0, 1.0],
            vec![1.0, -1.0, 0.0],
            vec![3.0, 0.0, 1.0],
        ])
        .unwrap();
        let f = factorize_lu(&a).unwrap();
        let z = f.solve(&[1.0, 2.0, 3.0]).unwrap();
        let back = a.matvec(&z).unwrap();
        for (a, b) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn refine_exact_first_solve_takes_no_steps() {
        let m = MatrixStorage::identity(3);
        let f = factorize_symmetric_indefinite(&m).unwrap();
        let r = refine_solve(&f, &m, &[1.0, 2.0, 3.0], 1e-8, 5).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(r.residual, 0.0);
    }

    fn perturbed(m: &MatrixStorage, rel: f64) -> Factorization {
        let mut f = factorize_symmetric_indefinite(m).unwrap();
        if let Data::Ldlt { pivots, .. } = &mut f.data {
            for p in pivots.iter_mut() {
                match p {
                    Pivot::One(d) => *d *= 1.0 + rel,
                    Pivot::Two { a, c, .. } => {
                        *a *= 1.0 + rel;
                        *c *= 1.0 + rel;
                    }
                    Pivot::Cont => {}
                }
            }
        }
        f
    }

    #[test]
    fn refine_corrects_perturbed_pivots_in_one_step() {
        let m = k3();
        let f = perturbed(&m, 1e-6);
        let rhs = [1.0, -1.0, 2.0];
        let raw = f.solve(&rhs).unwrap();
        let raw_res = norm2(&crate::vecops::sub(&rhs, &m.matvec(&raw).unwrap())) / norm2(&rhs);
        assert!(raw_res > 1e-8, "perturbation must be visible: {raw_res}");
        let r = refine_solve(&f, &m, &rhs, 1e-8, 5).unwrap();
        assert_eq!(r.steps, 1);
        assert!(r.residual <= 1e-8);
    }

    #[test]
    fn refine_capped_at_zero_steps() {
        let m = k3();
        let f = perturbed(&m, 1e-6);
        let r = refine_solve(&f, &m, &[1.0, -1.0, 2.0], 1e-14, 0).unwrap();
        assert_eq!(r.steps, 0);
        assert!(r.residual > 1e-14);
    }

    #[test]
    fn refine_residual_is_nonincreasing() {
        let m = k3();
        let f = perturbed(&m, 1e-3);
        let rhs = [0.3, 1.0, -2.0];
        let mut last = f64::INFINITY;
        for steps in 0..5 {
            let r = refine_solve(&f, &m, &rhs, 0.0, steps).unwrap();
            assert!(r.residual <= last);
            last = r.residual;
        }
    }

    fn random_symmetric(n: usize, seed: u64, zero_rows: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = n - zero_rows;
        let q = DMatrix::<f64>::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let eig: Vec<f64> = (0..k)
            .map(|_| {
                let mag = rng.random_range(0.1..10.0);
                if rng.random_bool(0.5) { mag } else { -mag }
            })
            .collect();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig));
        let core = &q * d * q.transpose();
        let core = (&core + core.transpose()) * 0.5;
        // scatter the core into random positions, leaving exact zero rows/columns
        let mut slots: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            slots.swap(i, rng.random_range(0..=i));
        }
        let mut m = DMatrix::zeros(n, n);
        for i in 0..k {
            for j in 0..k {
                m[(slots[i], slots[j])] = core[(i, j)];
            }
        }
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn inertia_matches_eigenvalue_signs(n in 1usize..=30, seed in any::<u64>(), deficit in 0usize..3) {
            let deficit = deficit.min(n - 1);
            let m = random_symmetric(n, seed, deficit);
            let eig = SymmetricEigen::new(m.clone()).eigenvalues;
            let scale = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let pos = eig.iter().filter(|v| **v > 1e-9 * scale).count();
            let neg = eig.iter().filter(|v| **v < -1e-9 * scale).count();
            let f = factorize_symmetric_indefinite(&MatrixStorage::dense_symmetric(m).unwrap()).unwrap();
            let inertia = f.inertia().unwrap();
            prop_assert_eq!(inertia.size(), n);
            prop_assert_eq!(inertia.positive, pos);
            prop_assert_eq!(inertia.negative, neg);
            prop_assert_eq!(inertia.zero, n - pos - neg);
        }
    }
}
