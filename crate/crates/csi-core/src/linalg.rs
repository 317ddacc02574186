//! Small dense complex matrix helpers: products, unitary DFTs, linear
//! solves, and dominant eigenvectors. Sizes in this crate are desk-scale,
//! so everything is direct O(n^2)/O(n^3).

use num_complex::Complex64;
use std::f64::consts::PI;

/// Row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::ONE;
        }
        m
    }

    pub fn mul(&self, other: &CMat) -> CMat {
        assert_eq!(self.cols, other.rows, "cmat mul {}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols);
        let mut out = CMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self[(i, p)];
                if a == Complex64::ZERO {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(p, j)];
                }
            }
        }
        out
    }

    pub fn adjoint(&self) -> CMat {
        let mut out = CMat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn scale(&self, c: Complex64) -> CMat {
        CMat::from_vec(self.rows, self.cols, self.data.iter().map(|z| z * c).collect())
    }

    pub fn add(&self, other: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        )
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        )
    }

    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn col(&self, j: usize) -> Vec<Complex64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[Complex64]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Unitary G x G DFT matrix: F[a,b] = exp(-j 2 pi a b / G) / sqrt(G).
pub fn dft_matrix(g: usize) -> CMat {
    let mut m = CMat::zeros(g, g);
    let norm = 1.0 / (g as f64).sqrt();
    for a in 0..g {
        for b in 0..g {
            let phase = -2.0 * PI * (a * b) as f64 / g as f64;
            m[(a, b)] = Complex64::from_polar(norm, phase);
        }
    }
    m
}

/// Apply `(F_outer kron F_inner)` (or its adjoint) to the rows of `x`,
/// where `x` has `outer*inner` rows. Equivalent to reshaping the row axis
/// to (outer, inner) and transforming both factors.
pub fn kron_dft_rows(x: &CMat, outer: usize, inner: usize, adjoint: bool) -> CMat {
    assert_eq!(x.rows, outer * inner, "kron row count");
    let (fo, fi) = (dft_matrix(outer), dft_matrix(inner));
    let (fo, fi) = if adjoint { (fo.adjoint(), fi.adjoint()) } else { (fo, fi) };
    let mut out = CMat::zeros(x.rows, x.cols);
    // y[(a,b), c] = sum_{p,q} Fo[a,p] Fi[b,q] x[(p,q), c]
    // two-stage: inner transform, then outer transform
    let mut tmp = CMat::zeros(x.rows, x.cols);
    for p in 0..outer {
        for b in 0..inner {
            for c in 0..x.cols {
                let mut acc = Complex64::ZERO;
                for q in 0..inner {
                    acc += fi[(b, q)] * x[(p * inner + q, c)];
                }
                tmp[(p * inner + b, c)] = acc;
            }
        }
    }
    for a in 0..outer {
        for b in 0..inner {
            for c in 0..x.cols {
                let mut acc = Complex64::ZERO;
                for p in 0..outer {
                    acc += fo[(a, p)] * tmp[(p * inner + b, c)];
                }
                out[(a * inner + b, c)] = acc;
            }
        }
    }
    out
}

/// Solve A x = b by Gaussian elimination with partial pivoting.
/// `b` may have multiple columns; returns the solution matrix.
pub fn solve(a: &CMat, b: &CMat) -> Option<CMat> {
    assert_eq!(a.rows, a.cols);
    assert_eq!(a.rows, b.rows);
    let n = a.rows;
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let (piv, mag) = (col..n)
            .map(|r| (r, m[(r, col)].norm()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())?;
        if mag < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.data.swap(piv * n + j, col * n + j);
            }
            for j in 0..rhs.cols {
                rhs.data.swap(piv * rhs.cols + j, col * rhs.cols + j);
            }
        }
        let inv = Complex64::ONE / m[(col, col)];
        for r in (col + 1)..n {
            let factor = m[(r, col)] * inv;
            if factor == Complex64::ZERO {
                continue;
            }
            for j in col..n {
                let v = m[(col, j)];
                m[(r, j)] -= factor * v;
            }
            for j in 0..rhs.cols {
                let v = rhs[(col, j)];
                rhs[(r, j)] -= factor * v;
            }
        }
    }
    let mut x = CMat::zeros(n, rhs.cols);
    for j in 0..rhs.cols {
        for i in (0..n).rev() {
            let mut acc = rhs[(i, j)];
            for k in (i + 1)..n {
                acc -= m[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = acc / m[(i, i)];
        }
    }
    Some(x)
}

/// Dominant eigenvector of a Hermitian PSD matrix via power iteration.
pub fn dominant_eigenvector(a: &CMat, iters: usize) -> Vec<Complex64> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut v: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(1.0 + (i as f64) * 0.01, 0.1 * ((i % 3) as f64 - 1.0)))
        .collect();
    for _ in 0..iters {
        let mut w = vec![Complex64::ZERO; n];
        for i in 0..n {
            for j in 0..n {
                w[i] += a[(i, j)] * v[j];
            }
        }
        let norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return v;
        }
        v = w.into_iter().map(|z| z / norm).collect();
    }
    v
}

/// Dominant right singular vector of `a` (eigenvector of a^H a).
pub fn dominant_right_singular(a: &CMat, iters: usize) -> Vec<Complex64> {
    let gram = a.adjoint().mul(a);
    dominant_eigenvector(&gram, iters)
}
