//! Linear operators and matrix storage.
//!
//! Dense matrices are backed by [`nalgebra::DMatrix`]. Sparse matrices are
//! assembled from triplets and finalized into compressed-column form (sorted,
//! duplicates summed) before they can be applied, so every product is
//! deterministic. A symmetric sparse matrix stores its lower triangle only.

mod market;

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};

pub use market::{
    parse_matrix_market, read_matrix_market, read_vector, write_matrix_market, write_vector,
};

/// Whether a matrix is tagged symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    General,
    Symmetric,
}

/// Compressed sparse column storage.
///
/// For symmetric storage only entries with `row >= col` are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterate over stored `(row, col, value)` entries in column-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |k| (self.row_idx[k], j, self.values[k]))
        })
    }
}

/// Triplet builder. Call [`TripletBuilder::finalize`] to obtain storage.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    symmetry: Symmetry,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize, symmetry: Symmetry) -> Self {
        Self {
            nrows,
            ncols,
            symmetry,
            entries: Vec::new(),
        }
    }

    /// Adds an entry. For symmetric builders, upper-triangle entries are
    /// mirrored into the lower triangle.
    pub fn push(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if row >= self.nrows {
            return Err(Error::DimensionMismatch {
                context: "triplet row index",
                expected: self.nrows,
                found: row,
            });
        }
        if col >= self.ncols {
            return Err(Error::DimensionMismatch {
                context: "triplet column index",
                expected: self.ncols,
                found: col,
            });
        }
        let (r, c) = match self.symmetry {
            Symmetry::Symmetric if row < col => (col, row),
            _ => (row, col),
        };
        self.entries.push((r, c, value));
        Ok(())
    }

    /// Sorts by (column, row), sums duplicates and builds a CSC matrix.
    pub fn finalize(mut self) -> Result<MatrixStorage> {
        if self.symmetry == Symmetry::Symmetric && self.nrows != self.ncols {
            return Err(Error::NotSquare("symmetric matrix"));
        }
        self.entries.sort_by_key(|e| (e.1, e.0));
        let mut col_ptr = vec![0usize; self.ncols + 1];
        let mut row_idx: Vec<usize> = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            row_idx.push(r);
            values.push(v);
            col_ptr[c + 1] += 1;
            last = Some((r, c));
        }
        for j in 0..self.ncols {
            col_ptr[j + 1] += col_ptr[j];
        }
        Ok(MatrixStorage {
            nrows: self.nrows,
            ncols: self.ncols,
            symmetry: self.symmetry,
            layout: Layout::Csc(CscMatrix {
                nrows: self.nrows,
                ncols: self.ncols,
                col_ptr,
                row_idx,
                values,
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    Dense(DMatrix<f64>),
    Csc(CscMatrix),
}

/// An explicit matrix, dense or sparse, with a symmetry tag.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixStorage {
    nrows: usize,
    ncols: usize,
    symmetry: Symmetry,
    layout: Layout,
}

impl MatrixStorage {
    pub fn dense(m: DMatrix<f64>) -> Self {
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            symmetry: Symmetry::General,
            layout: Layout::Dense(m),
        }
    }

    /// Dense storage tagged symmetric. Fails unless `m` is square and
    /// symmetric to 1e-14 relative entrywise.
    pub fn dense_symmetric(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::NotSquare("symmetric matrix"));
        }
        if !is_numerically_symmetric(&m, 1e-14) {
            return Err(Error::NotSymmetric("dense matrix"));
        }
        Ok(Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            symmetry: Symmetry::Symmetric,
            layout: Layout::Dense(m),
        })
    }

    /// Dense storage whose symmetry tag is detected from the values.
    pub fn dense_auto(m: DMatrix<f64>) -> Self {
        if m.nrows() == m.ncols() && is_numerically_symmetric(&m, 1e-14) {
            Self {
                nrows: m.nrows(),
                ncols: m.ncols(),
                symmetry: Symmetry::Symmetric,
                layout: Layout::Dense(m),
            }
        } else {
            Self::dense(m)
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        for r in rows {
            check_len("matrix row length", ncols, r.len())?;
        }
        Ok(Self::dense(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])))
    }

    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        entries: &[(usize, usize, f64)],
        symmetry: Symmetry,
    ) -> Result<Self> {
        let mut b = TripletBuilder::new(nrows, ncols, symmetry);
        for &(i, j, v) in entries {
            b.push(i, j, v)?;
        }
        b.finalize()
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            symmetry: Symmetry::Symmetric,
            layout: Layout::Dense(DMatrix::identity(n, n)),
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        let symmetry = if nrows == ncols {
            Symmetry::Symmetric
        } else {
            Symmetry::General
        };
        Self {
            nrows,
            ncols,
            symmetry,
            layout: Layout::Dense(DMatrix::zeros(nrows, ncols)),
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        Self {
            nrows: d.len(),
            ncols: d.len(),
            symmetry: Symmetry::Symmetric,
            layout: Layout::Dense(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d))),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetry == Symmetry::Symmetric
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Expanded dense copy (symmetric sparse storage is mirrored).
    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.layout {
            Layout::Dense(m) => m.clone(),
            Layout::Csc(s) => {
                let mut m = DMatrix::zeros(self.nrows, self.ncols);
                for (i, j, v) in s.iter() {
                    m[(i, j)] += v;
                    if self.is_symmetric() && i != j {
                        m[(j, i)] += v;
                    }
                }
                m
            }
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.layout {
            Layout::Dense(m) => m[(i, j)],
            Layout::Csc(s) => {
                let (r, c) = if self.is_symmetric() && i < j { (j, i) } else { (i, j) };
                let range = s.col_ptr[c]..s.col_ptr[c + 1];
                s.row_idx[range.clone()]
                    .binary_search(&r)
                    .map(|k| s.values[range.start + k])
                    .unwrap_or(0.0)
            }
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        match &self.layout {
            Layout::Dense(m) => m.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
            Layout::Csc(s) => s.values.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
        }
    }

    /// Frobenius norm of the expanded matrix.
    pub fn norm_fro(&self) -> f64 {
        match &self.layout {
            Layout::Dense(m) => m.norm(),
            Layout::Csc(s) => {
                let sym = self.is_symmetric();
                s.iter()
                    .map(|(i, j, v)| if sym && i != j { 2.0 * v * v } else { v * v })
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.max_abs() == 0.0
    }

    /// y = M x
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matrix-vector product", self.ncols, x.len())?;
        let mut y = vec![0.0; self.nrows];
        self.gemv(x, &mut y, false);
        Ok(y)
    }

    /// y = Mᵀ x
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("transpose matrix-vector product", self.nrows, x.len())?;
        let mut y = vec![0.0; self.ncols];
        self.gemv(x, &mut y, true);
        Ok(y)
    }

    fn gemv(&self, x: &[f64], y: &mut [f64], transpose: bool) {
        y.iter_mut().for_each(|v| *v = 0.0);
        match &self.layout {
            Layout::Dense(m) => {
                if transpose {
                    for (j, yj) in y.iter_mut().enumerate() {
                        *yj = m.column(j).iter().zip(x).map(|(a, b)| a * b).sum();
                    }
                } else {
                    for (j, &xj) in x.iter().enumerate() {
                        if xj != 0.0 {
                            for (yi, a) in y.iter_mut().zip(m.column(j).iter()) {
                                *yi += a * xj;
                            }
                        }
                    }
                }
            }
            Layout::Csc(s) => {
                let sym = self.is_symmetric();
                for (i, j, v) in s.iter() {
                    let (r, c) = if transpose { (j, i) } else { (i, j) };
                    y[r] += v * x[c];
                    if sym && i != j {
                        y[c] += v * x[r];
                    }
                }
            }
        }
    }
}

fn is_numerically_symmetric(m: &DMatrix<f64>, rel: f64) -> bool {
    let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel * scale {
                return false;
            }
        }
    }
    true
}

/// A matrix-free linear map.
pub trait LinearOperator: Send + Sync + fmt::Debug {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;

    /// y = op(x). Lengths are checked by [`apply_operator`].
    fn apply_to(&self, x: &[f64], y: &mut [f64]);

    /// y = opᵀ(x). Symmetric operators inherit `apply_to`.
    fn apply_transpose_to(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if self.is_symmetric() {
            self.apply_to(x, y);
            Ok(())
        } else {
            Err(Error::NoTranspose)
        }
    }

    fn is_symmetric(&self) -> bool {
        false
    }
}

/// Checked application `op · v`.
pub fn apply_operator(op: &dyn LinearOperator, v: &[f64]) -> Result<Vec<f64>> {
    check_len("operator application", op.ncols(), v.len())?;
    let mut y = vec![0.0; op.nrows()];
    op.apply_to(v, &mut y);
    Ok(y)
}

/// Dense copy of an operator, obtained column by column.
pub fn materialize(op: &dyn LinearOperator) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(op.nrows(), op.ncols());
    let mut e = vec![0.0; op.ncols()];
    let mut col = vec![0.0; op.nrows()];
    for j in 0..op.ncols() {
        e[j] = 1.0;
        op.apply_to(&e, &mut col);
        m.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    m
}

impl LinearOperator for MatrixStorage {
    fn nrows(&self) -> usize {
        self.nrows
    }

    fn ncols(&self) -> usize {
        self.ncols
    }

    fn apply_to(&self, x: &[f64], y: &mut [f64]) {
        self.gemv(x, y, false);
    }

    fn apply_transpose_to(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        self.gemv(x, y, true);
        Ok(())
    }

    fn is_symmetric(&self) -> bool {
        MatrixStorage::is_symmetric(self)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Identity(pub usize);

impl LinearOperator for Identity {
    fn nrows(&self) -> usize {
        self.0
    }
    fn ncols(&self) -> usize {
        self.0
    }
    fn apply_to(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
    fn is_symmetric(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroOperator {
    pub nrows: usize,
    pub ncols: usize,
}

impl LinearOperator for ZeroOperator {
    fn nrows(&self) -> usize {
        self.nrows
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn apply_to(&self, _x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
    }
    fn is_symmetric(&self) -> bool {
        self.nrows == self.ncols
    }
}

/// Assembles `[[topleft, Bᵀ], [B, -C]]` as dense storage.
///
/// The result is tagged symmetric only when `topleft` is.
pub fn assemble_block_2x2(
    topleft: &MatrixStorage,
    b: &MatrixStorage,
    c: &MatrixStorage,
) -> Result<MatrixStorage> {
    let n = topleft.nrows();
    let m = b.nrows();
    if topleft.ncols() != n {
        return Err(Error::NotSquare("leading block"));
    }
    check_len("B columns vs leading block", n, b.ncols())?;
    check_len("C rows vs B rows", m, c.nrows())?;
    check_len("C columns", m, c.ncols())?;
    if !c.is_symmetric() {
        return Err(Error::NotSymmetric("C"));
    }
    let top = topleft.to_dense();
    let bd = b.to_dense();
    let cd = c.to_dense();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&top);
    k.view_mut((n, 0), (m, n)).copy_from(&bd);
    k.view_mut((0, n), (n, m)).copy_from(&bd.transpose());
    k.view_mut((n, n), (m, m)).copy_from(&(-cd));
    let symmetry = if topleft.is_symmetric() {
        Symmetry::Symmetric
    } else {
        Symmetry::General
    };
    Ok(MatrixStorage {
        nrows: n + m,
        ncols: n + m,
        symmetry,
        layout: Layout::Dense(k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counterexample_a() -> MatrixStorage {
        MatrixStorage::from_rows(&[
            vec![1.0, -1.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn identity_apply() {
        let y = apply_operator(&Identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn counterexample_column_two() {
        let y = apply_operator(&counterexample_a(), &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(y, vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_operator() {
        let z = ZeroOperator { nrows: 2, ncols: 2 };
        assert_eq!(apply_operator(&z, &[5.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn apply_length_mismatch() {
        assert!(matches!(
            apply_operator(&Identity(3), &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = MatrixStorage::from_triplets(
            2,
            3,
            &[(1, 2, 1.0), (0, 0, 2.0), (1, 2, 0.5), (0, 2, -1.0)],
            Symmetry::General,
        )
        .unwrap();
        let Layout::Csc(s) = m.layout() else { panic!("expected csc") };
        assert_eq!(s.col_ptr(), &[0, 1, 1, 3]);
        assert_eq!(s.row_idx(), &[0, 0, 1]);
        assert_eq!(s.values(), &[2.0, -1.0, 1.5]);
        assert_eq!(m.matvec(&[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 1.5]);
        assert_eq!(m.matvec_t(&[1.0, 2.0]).unwrap(), vec![2.0, 0.0, 2.0]);
    }

    #[test]
    fn symmetric_triplets_expand() {
        let m =
            MatrixStorage::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 3.0)], Symmetry::Symmetric)
                .unwrap();
        let d = m.to_dense();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 0.0]));
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![4.0, 3.0]);
        assert_eq!(m.get(0, 1), 3.0);
    }

    #[test]
    fn triplet_out_of_bounds() {
        assert!(MatrixStorage::from_triplets(2, 2, &[(2, 0, 1.0)], Symmetry::General).is_err());
    }

    #[test]
    fn block_assembly_small() {
        let b = MatrixStorage::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = MatrixStorage::identity(1);
        let k = assemble_block_2x2(&MatrixStorage::identity(2), &b, &c).unwrap();
        assert!(k.is_symmetric());
        assert_eq!(
            k.to_dense(),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0])
        );
    }

    #[test]
    fn block_assembly_counterexample_zero_row() {
        let b = MatrixStorage::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let k = assemble_block_2x2(&counterexample_a(), &b, &MatrixStorage::identity(2)).unwrap();
        assert_eq!(k.nrows(), 5);
        assert!(!k.is_symmetric());
        let d = k.to_dense();
        assert!(d.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn block_assembly_mismatch() {
        let b = MatrixStorage::zeros(1, 3);
        let c = MatrixStorage::identity(1);
        assert!(assemble_block_2x2(&MatrixStorage::identity(2), &b, &c).is_err());
    }

    #[test]
    fn materialize_matches_storage() {
        let a = counterexample_a();
        assert_eq!(materialize(&a), a.to_dense());
    }
}
