//! Small dense helpers shared by the operator code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

pub(crate) type CMat = DMatrix<Complex64>;

pub(crate) fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Smallest eigenvalue of a Hermitian matrix with a unit eigenvector.
pub(crate) fn min_eigenpair(h: &CMat) -> (f64, DVector<Complex64>) {
    if h.nrows() == 1 {
        return (h[(0, 0)].re, DVector::from_element(1, Complex64::new(1.0, 0.0)));
    }
    let eig = SymmetricEigen::new(h.clone());
    let (idx, val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    (val, eig.eigenvectors.column(idx).into_owned())
}

pub(crate) fn max_eigenvalue(h: &CMat) -> f64 {
    if h.nrows() == 1 {
        return h[(0, 0)].re;
    }
    SymmetricEigen::new(h.clone()).eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn spectral_norm(m: &CMat) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].norm();
    }
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Smallest `λ` with `B*B ⪯ λ·Herm(B)`, i.e. `λ_max(H^{-1/2} B*B H^{-1/2})`.
/// `None` unless `Herm(B)` is positive definite.
pub(crate) fn relative_bound(b: &CMat) -> Option<f64> {
    let h = hermitian_part(b);
    if b.nrows() == 1 {
        let r = h[(0, 0)].re;
        return (r > 0.0).then(|| b[(0, 0)].norm_sqr() / r);
    }
    let eig = SymmetricEigen::new(h);
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return None;
    }
    let scale = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| Complex64::new(l.powf(-0.5), 0.0)));
    let inv_sqrt = &eig.eigenvectors * CMat::from_diagonal(&scale) * eig.eigenvectors.adjoint();
    let k = &inv_sqrt * b.adjoint() * b * &inv_sqrt;
    Some(max_eigenvalue(&hermitian_part(&k)))
}

pub(crate) fn vec_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Tridiagonal LU with partial pivoting (LAPACK `gttrf`/`gtts2` layout).
/// `dl[i]` is entry `(i+1, i)`, `d[i]` is `(i, i)`, `du[i]` is `(i, i+1)`.
#[derive(Clone, Debug)]
pub(crate) struct TridiagonalLu {
    dl: Vec<Complex64>,
    d: Vec<Complex64>,
    du: Vec<Complex64>,
    du2: Vec<Complex64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    pub(crate) fn factor(mut dl: Vec<Complex64>, mut d: Vec<Complex64>, mut du: Vec<Complex64>) -> Option<Self> {
        let n = d.len();
        let zero = Complex64::new(0.0, 0.0);
        let mut du2 = vec![zero; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].l1_norm() >= dl[i].l1_norm() {
                if d[i] != zero {
                    let fact = dl[i] / d[i];
                    dl[i] = fact;
                    d[i + 1] -= fact * du[i];
                }
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                swapped[i] = true;
            }
        }
        if d.contains(&zero) {
            return None;
        }
        Some(Self { dl, d, du, du2, swapped })
    }

    pub(crate) fn solve_in_place(&self, b: &mut [Complex64]) {
        let n = self.d.len();
        for i in 0..n - 1 {
            if self.swapped[i] {
                let temp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = temp - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        b[n - 1] /= self.d[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
    }
}

/// Solver for one periodic tridiagonal block: the tridiagonal part is
/// factored with pivoting and the two corner entries are folded in through a
/// 2×2 capacitance system.
#[derive(Clone, Debug)]
pub(crate) struct CyclicTridiagonalSolver {
    lu: TridiagonalLu,
    corner_cols: [Vec<Complex64>; 2],
    capacitance_inv: [[Complex64; 2]; 2],
}

impl CyclicTridiagonalSolver {
    /// `sub[i]` is entry `(i, i-1 mod m)`, `sup[i]` is `(i, i+1 mod m)`.
    pub(crate) fn new(sub: &[Complex64], diag: &[Complex64], sup: &[Complex64]) -> Option<Self> {
        let m = diag.len();
        debug_assert!(m >= 3);
        let zero = Complex64::new(0.0, 0.0);
        let lu = TridiagonalLu::factor(sub[1..].to_vec(), diag.to_vec(), sup[..m - 1].to_vec())?;
        // Corners: (0, m-1) = sub[0], (m-1, 0) = sup[m-1].
        let mut u0 = vec![zero; m];
        u0[0] = sub[0];
        let mut u1 = vec![zero; m];
        u1[m - 1] = sup[m - 1];
        lu.solve_in_place(&mut u0);
        lu.solve_in_place(&mut u1);
        // V^T Z with V = [e_{m-1}, e_0].
        let one = Complex64::new(1.0, 0.0);
        let c00 = one + u0[m - 1];
        let c01 = u1[m - 1];
        let c10 = u0[0];
        let c11 = one + u1[0];
        let det = c00 * c11 - c01 * c10;
        if det == zero || !det.is_finite() {
            return None;
        }
        let capacitance_inv = [[c11 / det, -c01 / det], [-c10 / det, c00 / det]];
        Some(Self {
            lu,
            corner_cols: [u0, u1],
            capacitance_inv,
        })
    }

    pub(crate) fn solve_in_place(&self, b: &mut [Complex64]) {
        let m = b.len();
        self.lu.solve_in_place(b);
        let v = [b[m - 1], b[0]];
        let ci = &self.capacitance_inv;
        let w0 = ci[0][0] * v[0] + ci[0][1] * v[1];
        let w1 = ci[1][0] * v[0] + ci[1][1] * v[1];
        for i in 0..m {
            b[i] -= self.corner_cols[0][i] * w0 + self.corner_cols[1][i] * w1;
        }
    }
}
