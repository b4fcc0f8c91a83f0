//! BiCGSTAB with right Jacobi preconditioning and a dense LU fallback.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;

use super::sparse::{diagonal, matvec, SparseSystem};
use super::DiscretizationError;

pub const DENSE_FALLBACK_LIMIT: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 5000, restarts: 3 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn residual(a: &CsrMatrix<f64>, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; b.len()];
    matvec(a, x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    r
}

/// One BiCGSTAB cycle from `x`; returns the iteration count.
fn bicgstab(a: &CsrMatrix<f64>, b: &[f64], x: &mut [f64], inv_diag: &[f64], target: f64, max_iter: usize) -> usize {
    let n = b.len();
    let mut r = residual(a, x, b);
    if norm(&r) <= target {
        return 0;
    }
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ph = vec![0.0; n];
    let mut sh = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            return it;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            ph[i] = inv_diag[i] * p[i];
        }
        matvec(a, &ph, &mut v);
        let den = dot(&r0, &v);
        if den == 0.0 || !den.is_finite() {
            return it;
        }
        alpha = rho / den;
        for i in 0..n {
            x[i] += alpha * ph[i];
            r[i] -= alpha * v[i];
        }
        if norm(&r) <= target {
            return it;
        }
        for i in 0..n {
            sh[i] = inv_diag[i] * r[i];
        }
        matvec(a, &sh, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return it;
        }
        omega = dot(&t, &r) / tt;
        for i in 0..n {
            x[i] += omega * sh[i];
            r[i] -= omega * t[i];
        }
        if norm(&r) <= target || omega == 0.0 {
            return it;
        }
    }
    max_iter
}

fn dense_lu(a: &CsrMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let d = DMatrix::from(a);
    let lu = d.lu();
    let x = lu.solve(&DVector::from_column_slice(b))?;
    x.iter().all(|v| v.is_finite()).then(|| x.as_slice().to_vec())
}

/// Solves `A x = b` starting from `guess`, to relative residual `opts.tol`.
pub fn solve_with_guess(
    a: &CsrMatrix<f64>,
    b: &[f64],
    guess: &[f64],
    opts: SolverOptions,
) -> Result<Vec<f64>, DiscretizationError> {
    let n = b.len();
    if a.nrows() != n || a.ncols() != n || guess.len() != n {
        return Err(DiscretizationError::DimensionMismatch(format!(
            "matrix {}×{}, rhs {}, guess {}",
            a.nrows(),
            a.ncols(),
            n,
            guess.len()
        )));
    }
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let target = opts.tol * bnorm;
    let inv_diag: Vec<f64> = diagonal(a).iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut x = guess.to_vec();
    let mut iterations = 0;
    for _ in 0..=opts.restarts {
        iterations += bicgstab(a, b, &mut x, &inv_diag, target, opts.max_iter);
        if norm(&residual(a, &x, b)) <= target {
            return Ok(x);
        }
    }
    if n <= DENSE_FALLBACK_LIMIT {
        if let Some(y) = dense_lu(a, b) {
            let res = norm(&residual(a, &y, b));
            if res <= target {
                return Ok(y);
            }
            return Err(DiscretizationError::NoConvergence { iterations, residual: res / bnorm });
        }
    }
    let res = norm(&residual(a, &x, b)) / bnorm;
    Err(DiscretizationError::NoConvergence { iterations, residual: if res.is_finite() { res } else { f64::INFINITY } })
}

/// Solves a system after applying its constraints.
pub fn solve_linear(system: &SparseSystem, opts: SolverOptions) -> Result<Vec<f64>, DiscretizationError> {
    let mut s = system.clone();
    s.apply_constraints()?;
    let guess = vec![0.0; s.dim()];
    solve_with_guess(&s.matrix, &s.rhs, &guess, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra_sparse::CooMatrix;

    fn csr(d: &DMatrix<f64>) -> CsrMatrix<f64> {
        let mut coo = CooMatrix::new(d.nrows(), d.ncols());
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                if d[(i, j)] != 0.0 {
                    coo.push(i, j, d[(i, j)]);
                }
            }
        }
        CsrMatrix::from(&coo)
    }

    #[test]
    fn identity_returns_rhs() {
        let a = csr(&DMatrix::identity(6, 6));
        let b = vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0];
        let x = solve_linear(&SparseSystem::new(a, b.clone()).unwrap(), SolverOptions::default()).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn tridiagonal_matches_closed_form_inverse() {
        let n = 5;
        let a = DMatrix::from_fn(n, n, |i, j| match (i as i64 - j as i64).abs() {
            0 => 2.0,
            1 => -1.0,
            _ => 0.0,
        });
        // (A⁻¹)ᵢⱼ = min(i,j)(n+1−max(i,j))/(n+1) with 1-based indices
        let inv = DMatrix::from_fn(n, n, |i, j| {
            let (i, j) = (i as f64 + 1.0, j as f64 + 1.0);
            i.min(j) * (n as f64 + 1.0 - i.max(j)) / (n as f64 + 1.0)
        });
        let b = DVector::from_vec(vec![1.0, 0.0, -1.0, 2.0, 0.5]);
        let x = solve_linear(&SparseSystem::new(csr(&a), b.as_slice().to_vec()).unwrap(), SolverOptions::default())
            .unwrap();
        let exact = &inv * &b;
        for i in 0..n {
            assert!((x[i] - exact[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_matrix_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = solve_linear(&SparseSystem::new(csr(&a), vec![1.0, 0.0]).unwrap(), SolverOptions::default());
        assert!(matches!(r, Err(DiscretizationError::NoConvergence { .. })));
    }

    #[test]
    fn nonsymmetric_system() {
        let n = 50;
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                4.0
            } else if j == i + 1 {
                -1.5
            } else if i == j + 1 {
                -0.5
            } else {
                0.0
            }
        });
        let xs = DVector::from_fn(n, |i, _| (i as f64).sin());
        let b = &a * &xs;
        let x = solve_with_guess(&csr(&a), b.as_slice(), &vec![0.0; n], SolverOptions { tol: 1e-13, ..Default::default() })
            .unwrap();
        for i in 0..n {
            assert!((x[i] - xs[i]).abs() < 1e-11);
        }
    }
}
