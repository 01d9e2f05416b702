//! Small dense linear algebra: vectors, symmetric matrices, a cyclic Jacobi
//! eigensolver, and a semidefinite-tolerant Cholesky factorization.
//!
//! Everything here is plain `f64` with fixed evaluation order, so repeated
//! runs are bit-identical. Matrices are row-major `Vec<f64>`.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for v in x.iter_mut() {
        *v *= alpha;
    }
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Dense symmetric matrix, row-major, n x n.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from row-major data, symmetrizing as (M + M^T)/2.
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Structural(format!(
                "symmetric matrix needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        let mut m = Self { n, data };
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (m.data[i * n + j] + m.data[j * n + i]);
                m.data[i * n + j] = avg;
                m.data[j * n + i] = avg;
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn add_assign_entry(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
        if i != j {
            self.data[j * self.n + i] += v;
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        for i in 0..self.n {
            out[i] = dot(self.row(i), x);
        }
    }

    pub fn trace(&self) -> f64 {
        let mut t = 0.0;
        for i in 0..self.n {
            t += self.get(i, i);
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// A * B * A for symmetric A, B (result symmetrized against rounding).
    pub fn sandwich(&self, b: &SymMatrix) -> Result<SymMatrix> {
        if self.n != b.n {
            return Err(Error::Structural("matrix dimension mismatch".into()));
        }
        let n = self.n;
        // tmp = A * B
        let mut tmp = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                tmp[i * n + j] = dot(self.row(i), b.column(j).as_slice());
            }
        }
        // out = tmp * A
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += tmp[i * n + k] * self.get(k, j);
                }
                out[i * n + j] = acc;
            }
        }
        SymMatrix::from_rows(n, out)
    }

    fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }
}

/// Full eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// `vectors[k]` is the unit eigenvector for `values[k]`.
    pub vectors: Vec<Vec<f64>>,
}

/// Cyclic Jacobi eigendecomposition. Intended for small matrices (the
/// Gaussian-Fréchet distance and test oracles); O(n^3) per sweep.
pub fn jacobi_eigen(m: &SymMatrix, tol: f64, max_sweeps: usize) -> Result<EigenDecomposition> {
    let n = m.dim();
    let mut a = m.clone();
    // v holds accumulated rotations, columns are eigenvectors.
    let mut v = SymMatrix::identity(n).data;

    let off_norm = |a: &SymMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a.get(i, j) * a.get(i, j);
            }
        }
        (2.0 * s).sqrt()
    };

    let scale_ref = a.frobenius_norm().max(1e-300);
    let mut sweeps = 0;
    while off_norm(&a) > tol * scale_ref {
        if sweeps >= max_sweeps {
            return Err(Error::NoConvergence {
                residual: off_norm(&a),
                iterations: sweeps,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let akp = a.get(p, k);
                    let akq = a.get(q, k);
                    a.set(p, k, c * akp - s * akq);
                    a.set(q, k, s * akp + c * akq);
                }
                // Rotating both sides leaves small asymmetry; pin the pivot.
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);

                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let val = a.get(j, j);
            let vec: Vec<f64> = (0..n).map(|i| v[i * n + j]).collect();
            (val, vec)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());

    Ok(EigenDecomposition {
        values: pairs.iter().map(|p| p.0).collect(),
        vectors: pairs.into_iter().map(|p| p.1).collect(),
    })
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
pub fn sym_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let n = m.dim();
    let eig = jacobi_eigen(m, 1e-14, 100)?;
    let mut out = SymMatrix::zeros(n);
    for (lambda, vec) in eig.values.iter().zip(&eig.vectors) {
        let s = lambda.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in i..n {
                out.add_assign_entry(i, j, s * vec[i] * vec[j]);
            }
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of a PSD matrix. Tolerates exactly
/// singular directions (zero pivot gives a zero column); clearly negative
/// pivots are a config error.
pub fn cholesky_psd(m: &SymMatrix) -> Result<Vec<f64>> {
    let n = m.dim();
    let scale_ref = m.trace().abs().max(1.0);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = m.get(j, j);
        for k in 0..j {
            pivot -= l[j * n + k] * l[j * n + k];
        }
        if pivot < -1e-10 * scale_ref {
            return Err(Error::Config(format!(
                "covariance is not positive semidefinite (pivot {} at index {})",
                pivot, j
            )));
        }
        let ljj = pivot.max(0.0).sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            if ljj == 0.0 {
                l[i * n + j] = 0.0;
                continue;
            }
            let mut acc = m.get(i, j);
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = acc / ljj;
        }
    }
    Ok(l)
}
