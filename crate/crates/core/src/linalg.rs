//! Structured symmetric five-point (three-point in 1D) operators and a
//! Jacobi-preconditioned conjugate gradient solver.

use crate::error::{Error, Result};

/// Symmetric M-matrix on an `nx × ny` cell grid.
///
/// `(A u)_c = diag_c u_c - Σ_neighbours T_face u_neighbour`, with `east[c]`
/// coupling `c` to `c + 1` and `north[c]` coupling `c` to `c + nx`.
#[derive(Clone, Debug)]
pub struct StencilMatrix {
    pub nx: usize,
    pub ny: usize,
    pub diag: Vec<f64>,
    pub east: Vec<f64>,
    pub north: Vec<f64>,
}

impl StencilMatrix {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        let n = nx * ny;
        Self {
            nx,
            ny,
            diag: vec![0.0; n],
            east: vec![0.0; n],
            north: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let nx = self.nx;
        for j in 0..self.ny {
            for i in 0..nx {
                let c = i + nx * j;
                let mut acc = self.diag[c] * x[c];
                if i + 1 < nx {
                    acc -= self.east[c] * x[c + 1];
                }
                if i > 0 {
                    acc -= self.east[c - 1] * x[c - 1];
                }
                if j + 1 < self.ny {
                    acc -= self.north[c] * x[c + nx];
                }
                if j > 0 {
                    acc -= self.north[c - nx] * x[c - nx];
                }
                y[c] = acc;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Default iteration cap: `50 * sqrt(n) + 1000`.
pub fn default_max_iter(n: usize) -> usize {
    (50.0 * (n as f64).sqrt()) as usize + 1000
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` to `‖b - A x‖ <= tol ‖b‖`, starting from the contents of `x`.
pub fn pcg(a: &StencilMatrix, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<CgOutcome> {
    let n = a.len();
    if b.len() != n || x.len() != n {
        return Err(Error::Dimension(format!(
            "system of size {n} given rhs {} and guess {}",
            b.len(),
            x.len()
        )));
    }
    let inv_diag: Vec<f64> = a
        .diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { f64::NAN })
        .collect();
    if let Some(c) = inv_diag.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-positive diagonal entry at row {c}")));
    }

    let b_norm = dot(b, b).sqrt();
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };

    let mut r = vec![0.0; n];
    a.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut res = dot(&r, &r).sqrt() / scale;
    let mut history = vec![res];
    if res <= tol {
        return Ok(CgOutcome {
            iterations: 0,
            relative_residual: res,
        });
    }

    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);

    for it in 1..=max_iter {
        a.apply(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::Numerical(format!(
                "conjugate gradients broke down (p·Ap = {pq:e}) at iteration {it}"
            )));
        }
        let alpha = rz / pq;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * q[k];
        }
        res = dot(&r, &r).sqrt() / scale;
        history.push(res);
        if res <= tol {
            return Ok(CgOutcome {
                iterations: it,
                relative_residual: res,
            });
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(Error::Solver {
        iterations: max_iter,
        residual: res,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> StencilMatrix {
        let mut a = StencilMatrix::zeros(n, 1);
        for c in 0..n {
            a.diag[c] = 2.0;
            if c + 1 < n {
                a.east[c] = 1.0;
            }
        }
        a
    }

    #[test]
    fn solves_tridiagonal_system() {
        let n = 50;
        let a = laplacian_1d(n);
        let exact: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut b = vec![0.0; n];
        a.apply(&exact, &mut b);
        let mut x = vec![0.0; n];
        let out = pcg(&a, &b, &mut x, 1e-12, 1000).unwrap();
        assert!(out.relative_residual <= 1e-12);
        for (xi, ei) in x.iter().zip(&exact) {
            assert!((xi - ei).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_guess_needs_no_iterations() {
        let a = laplacian_1d(8);
        let x0 = vec![1.0; 8];
        let mut b = vec![0.0; 8];
        a.apply(&x0, &mut b);
        let mut x = x0.clone();
        assert_eq!(pcg(&a, &b, &mut x, 1e-10, 10).unwrap().iterations, 0);
    }

    #[test]
    fn iteration_cap_reports_history() {
        let n = 400;
        let a = laplacian_1d(n);
        let b = vec![1.0; n];
        let mut x = vec![0.0; n];
        match pcg(&a, &b, &mut x, 1e-14, 3) {
            Err(Error::Solver { iterations, history, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(history.len(), 4);
            }
            other => panic!("expected solver error, got {other:?}"),
        }
    }
}
