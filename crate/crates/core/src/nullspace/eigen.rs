use ndarray::{Array1, Array2};

/// Eigenpairs of a symmetric matrix, eigenvalues ascending, eigenvectors
/// stored as columns in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
    pub sweeps: usize,
}

pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[[i, j]] * a[[i, j]];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
/// `tol · ‖A‖_F`. Returns `None` when `max_sweeps` is exhausted.
///
/// The input is symmetrized as `(A + Aᵀ)/2` first. Ties between equal
/// eigenvalues keep the diagonal position order.
pub fn sym_eigen_jacobi(a: &Array2<f64>, tol: f64, max_sweeps: usize) -> Option<SymEigen> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = (a + &a.t()) * 0.5;
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = tol * scale;

    let mut sweeps = 0;
    while off_diagonal_norm(&m) > target {
        if sweeps == max_sweeps {
            return None;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].total_cmp(&m[[j, j]]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Some(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, std_normal};
    use ndarray::array;

    #[test]
    fn diagonal_input_needs_no_rotation() {
        let e = sym_eigen_jacobi(&Array2::from_diag(&array![4.0, 1.0, 0.01]), JACOBI_TOL, JACOBI_MAX_SWEEPS).unwrap();
        assert_eq!(e.values, array![0.01, 1.0, 4.0]);
        assert_eq!(e.sweeps, 0);
        assert_eq!(e.vectors.column(0), array![0.0, 0.0, 1.0]);
    }

    #[test]
    fn reconstructs_random_symmetric() {
        for seed in 0..10 {
            let mut rng = rng_for(seed, "eig", 0);
            let n = 2 + seed as usize * 3;
            let b = Array2::from_shape_fn((n, n), |_| std_normal(&mut rng));
            let a = &b + &b.t();
            let e = sym_eigen_jacobi(&a, JACOBI_TOL, JACOBI_MAX_SWEEPS).unwrap();
            let recon = e.vectors.dot(&Array2::from_diag(&e.values)).dot(&e.vectors.t());
            let err = (&recon - &a).iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "n={n} err={err}");
            let ortho = e.vectors.t().dot(&e.vectors) - Array2::<f64>::eye(n);
            assert!(ortho.iter().all(|x| x.abs() < 1e-12));
            assert!(e.values.windows(2).into_iter().all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn sweep_cap_reports_failure() {
        let a = array![[1.0, 2.0], [2.0, -1.0]];
        assert!(sym_eigen_jacobi(&a, JACOBI_TOL, 0).is_none());
    }
}
