//! Cyclic Jacobi eigenvalue solver for small dense symmetric matrices.
//!
//! Gram matrices here are at most rollouts × rollouts (8 × 8 by default), so
//! the O(n³) per-sweep cost is irrelevant and Jacobi's accuracy on tiny
//! eigenvalues is what matters.

/// Row-major square symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    acc += self.get(i, j).powi(2);
                }
            }
        }
        acc.sqrt()
    }

    fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Convergence controls for [`symmetric_eigenvalues`].
#[derive(Debug, Clone, Copy)]
pub struct JacobiConfig {
    /// Stop once the off-diagonal Frobenius norm falls below
    /// `tolerance * max(1, ‖A‖_F)`.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for JacobiConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_sweeps: 100,
        }
    }
}

/// Eigenvalues of a symmetric matrix, unsorted (diagonal order after
/// convergence).
pub fn symmetric_eigenvalues(matrix: &SymMatrix, cfg: JacobiConfig) -> Vec<f64> {
    let n = matrix.dim();
    let mut a = matrix.clone();
    let scale = a.frobenius_norm().max(1.0);
    let target = cfg.tolerance * scale;

    for _ in 0..cfg.max_sweeps {
        if a.off_diagonal_norm() <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, p, q);
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

/// One Jacobi rotation annihilating `a[p][q]`.
fn rotate(a: &mut SymMatrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let app = a.get(p, p);
    let aqq = a.get(q, q);
    let theta = (aqq - app) / (2.0 * apq);
    // smaller root of t² + 2θt − 1 = 0
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    let n = a.dim();
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        a.set(k, p, new_kp);
        a.set(p, k, new_kp);
        a.set(k, q, new_kq);
        a.set(q, k, new_kq);
    }
    a.set(p, p, app - t * apq);
    a.set(q, q, aqq + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
}
