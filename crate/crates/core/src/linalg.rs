//! Small dense matrices for the inner loops.
//!
//! Blocks in this crate are tiny (at most 2n×2n with n a handful), so a
//! row-major buffer with inline storage beats a general-purpose matrix type
//! by avoiding heap traffic in the O(N²) sweeps. Eigen and singular value
//! work, which only runs per node, goes through nalgebra.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

type Buf = SmallVec<[f64; 16]>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatRepr", into = "Vec<Vec<f64>>")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Buf,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: SmallVec::from_elem(0.0, rows * cols) }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scalar(x: f64) -> Self {
        Mat::from_vec(1, 1, vec![x])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length does not match shape");
        Mat { rows, cols, data: SmallVec::from_vec(data) }
    }

    pub fn from_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length does not match shape");
        Mat { rows, cols, data: SmallVec::from_slice(data) }
    }

    /// Builds from nested rows; returns `None` when rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return None;
        }
        let data = rows.iter().flatten().copied().collect();
        Some(Mat { rows: r, cols: c, data })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Mat::from_slice(v.len(), 1, v)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scale(&self, k: f64) -> Mat {
        let mut m = self.clone();
        m.data.iter_mut().for_each(|x| *x *= k);
        m
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += k * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        let mut b = Mat::zeros(rows, cols);
        for i in 0..rows {
            let src = (r0 + i) * self.cols + c0;
            b.data[i * cols..(i + 1) * cols].copy_from_slice(&self.data[src..src + cols]);
        }
        b
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Mat) {
        for i in 0..b.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + b.cols].copy_from_slice(b.row(i));
        }
    }

    /// 2×2 block matrix `[a b; c d]`.
    pub fn blocks2(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Mat {
        assert_eq!(a.rows, b.rows);
        assert_eq!(c.rows, d.rows);
        assert_eq!(a.cols, c.cols);
        assert_eq!(b.cols, d.cols);
        let mut m = Mat::zeros(a.rows + c.rows, a.cols + b.cols);
        m.set_block(0, 0, a);
        m.set_block(0, a.cols, b);
        m.set_block(a.rows, 0, c);
        m.set_block(a.rows, a.cols, d);
        m
    }

    pub fn block_diag(a: &Mat, d: &Mat) -> Mat {
        let mut m = Mat::zeros(a.rows + d.rows, a.cols + d.cols);
        m.set_block(0, 0, a);
        m.set_block(a.rows, a.cols, d);
        m
    }

    pub fn vstack(top: &Mat, bottom: &Mat) -> Mat {
        assert_eq!(top.cols, bottom.cols);
        let mut m = Mat::zeros(top.rows + bottom.rows, top.cols);
        m.set_block(0, 0, top);
        m.set_block(top.rows, 0, bottom);
        m
    }

    pub fn hstack(left: &Mat, right: &Mat) -> Mat {
        assert_eq!(left.rows, right.rows);
        let mut m = Mat::zeros(left.rows, left.cols + right.cols);
        m.set_block(0, 0, left);
        m.set_block(0, left.cols, right);
        m
    }

    /// `out = self * v`
    #[inline]
    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// `out += self * v`
    #[inline]
    pub fn mul_vec_add(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    /// Quadratic form `vᵀ self v`.
    #[inline]
    pub fn quad(&self, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            acc += v[i] * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn sym_min_eigenvalue(&self) -> f64 {
        match self.rows {
            1 => return self.data[0],
            2 => {
                let (a, d) = (self.data[0], self.data[3]);
                let b = 0.5 * (self.data[1] + self.data[2]);
                return 0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt();
            }
            _ => {}
        }
        let m = self.to_dmatrix();
        let sym = (&m + m.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    pub fn min_singular_value(&self) -> f64 {
        self.to_dmatrix().singular_values().min()
    }

    pub fn lu(&self) -> Lu {
        Lu::factor(self)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{}x{}{:?}", self.rows, self.cols, self.to_rows())
    }
}

/// Accepted JSON forms: nested row-major arrays, or a bare number for 1×1.
#[derive(Deserialize)]
#[serde(untagged)]
pub enum MatRepr {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl TryFrom<MatRepr> for Mat {
    type Error = String;
    fn try_from(r: MatRepr) -> Result<Self, String> {
        match r {
            MatRepr::Scalar(x) => Ok(Mat::scalar(x)),
            MatRepr::Rows(rows) => Mat::from_rows(&rows).ok_or_else(|| "ragged matrix rows".to_string()),
        }
    }
}

impl From<Mat> for Vec<Vec<f64>> {
    fn from(m: Mat) -> Self {
        m.to_rows()
    }
}

impl Mul for &Mat {
    type Output = Mat;
    #[inline]
    fn mul(self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "shape mismatch in product");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        out
    }
}

impl Mul<Mat> for &Mat {
    type Output = Mat;
    fn mul(self, rhs: Mat) -> Mat {
        self * &rhs
    }
}

impl Mul<&Mat> for Mat {
    type Output = Mat;
    fn mul(self, rhs: &Mat) -> Mat {
        &self * rhs
    }
}

impl Mul for Mat {
    type Output = Mat;
    fn mul(self, rhs: Mat) -> Mat {
        &self * &rhs
    }
}

macro_rules! elementwise {
    ($tr:ident, $f:ident, $atr:ident, $af:ident, $op:tt) => {
        #[allow(clippy::assign_op_pattern)]
        impl $tr for &Mat {
            type Output = Mat;
            #[inline]
            fn $f(self, rhs: &Mat) -> Mat {
                assert_eq!(self.shape(), rhs.shape(), "shape mismatch");
                let mut out = self.clone();
                for (a, b) in out.data.iter_mut().zip(rhs.data.iter()) {
                    *a = *a $op *b;
                }
                out
            }
        }
        impl $tr<Mat> for &Mat {
            type Output = Mat;
            fn $f(self, rhs: Mat) -> Mat {
                self $op &rhs
            }
        }
        impl $tr<&Mat> for Mat {
            type Output = Mat;
            fn $f(self, rhs: &Mat) -> Mat {
                &self $op rhs
            }
        }
        impl $tr for Mat {
            type Output = Mat;
            fn $f(self, rhs: Mat) -> Mat {
                &self $op &rhs
            }
        }
        impl $atr<&Mat> for Mat {
            #[inline]
            fn $af(&mut self, rhs: &Mat) {
                assert_eq!(self.shape(), rhs.shape(), "shape mismatch");
                for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
                    *a = *a $op *b;
                }
            }
        }
        impl $atr<Mat> for Mat {
            fn $af(&mut self, rhs: Mat) {
                *self = &*self $op &rhs;
            }
        }
    };
}

elementwise!(Add, add, AddAssign, add_assign, +);
elementwise!(Sub, sub, SubAssign, sub_assign, -);

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

impl Neg for Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

/// LU factorization with partial pivoting.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Mat,
    perm: SmallVec<[usize; 8]>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &Mat) -> Lu {
        assert_eq!(a.rows, a.cols, "LU needs a square matrix");
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: SmallVec<[usize; 8]> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let piv = lu[(k, k)];
            if piv == 0.0 {
                continue;
            }
            for i in k + 1..n {
                let f = lu[(i, k)] / piv;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        let u = lu[(k, j)];
                        lu[(i, j)] -= f * u;
                    }
                }
            }
        }
        Lu { n, lu, perm, sign }
    }

    pub fn det(&self) -> f64 {
        (0..self.n).fold(self.sign, |d, i| d * self.lu[(i, i)])
    }

    /// Smallest absolute pivot; zero means numerically singular.
    pub fn min_pivot(&self) -> f64 {
        (0..self.n).fold(f64::INFINITY, |m, i| m.min(self.lu[(i, i)].abs()))
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Mat) -> Mat {
        assert_eq!(b.rows, self.n, "shape mismatch in solve");
        let n = self.n;
        let mut x = Mat::zeros(n, b.cols);
        for i in 0..n {
            x.data[i * b.cols..(i + 1) * b.cols].copy_from_slice(b.row(self.perm[i]));
        }
        for c in 0..b.cols {
            for i in 0..n {
                let mut acc = x[(i, c)];
                for k in 0..i {
                    acc -= self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = acc;
            }
            for i in (0..n).rev() {
                let mut acc = x[(i, c)];
                for k in i + 1..n {
                    acc -= self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = acc / self.lu[(i, i)];
            }
        }
        x
    }

    pub fn inverse(&self) -> Mat {
        self.solve(&Mat::identity(self.n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn product_and_transpose() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(&a * &b, m(&[&[2.0, 1.0], &[4.0, 3.0]]));
        assert_eq!(a.transpose(), m(&[&[1.0, 3.0], &[2.0, 4.0]]));
    }

    #[test]
    fn lu_det_and_solve() {
        let a = m(&[&[0.0, 2.0, 1.0], &[1.0, 1.0, 0.0], &[3.0, 0.0, 1.0]]);
        let lu = a.lu();
        assert_relative_eq!(lu.det(), -5.0, epsilon = 1e-14);
        let x = lu.solve(&Mat::identity(3));
        let id = &a * &x;
        assert!((&id - &Mat::identity(3)).max_abs() < 1e-14);
    }

    #[test]
    fn singular_has_zero_pivot() {
        let a = m(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(a.lu().min_pivot(), 0.0);
    }

    #[test]
    fn block_assembly() {
        let a = Mat::scalar(1.0);
        let b = Mat::scalar(2.0);
        let c = Mat::scalar(3.0);
        let d = Mat::scalar(4.0);
        let big = Mat::blocks2(&a, &b, &c, &d);
        assert_eq!(big, m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(big.block(1, 0, 1, 2), m(&[&[3.0, 4.0]]));
    }

    #[test]
    fn serde_round_trip() {
        let a = m(&[&[1.0, -2.5]]);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "[[1.0,-2.5]]");
        let back: Mat = serde_json::from_str(&s).unwrap();
        assert_eq!(back, a);
        let one: Mat = serde_json::from_str("2.5").unwrap();
        assert_eq!(one, Mat::scalar(2.5));
        assert!(serde_json::from_str::<Mat>("[[1.0],[2.0,3.0]]").is_err());
    }

    #[test]
    fn eigen_and_singular() {
        let a = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert_relative_eq!(a.sym_min_eigenvalue(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(a.min_singular_value(), 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn solve_inverts_well_conditioned(vals in prop::collection::vec(-1.0f64..1.0, 16)) {
            let mut a = Mat::from_vec(4, 4, vals);
            for i in 0..4 { a[(i, i)] += 5.0; }
            let b = Mat::from_vec(4, 1, vec![1.0, -2.0, 0.5, 3.0]);
            let x = a.lu().solve(&b);
            prop_assert!((&(&a * &x) - &b).max_abs() < 1e-12);
        }

        #[test]
        fn det_of_product_is_product_of_dets(
            va in prop::collection::vec(-2.0f64..2.0, 9),
            vb in prop::collection::vec(-2.0f64..2.0, 9),
        ) {
            let a = Mat::from_vec(3, 3, va);
            let b = Mat::from_vec(3, 3, vb);
            let lhs = (&a * &b).lu().det();
            let rhs = a.lu().det() * b.lu().det();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }
}
