//! Symmetric linear algebra: moments, eigendecomposition, SPD square root.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Column means and unbiased (divisor `N - 1`) covariance of an `N×d` matrix.
///
/// Uses Welford's streaming update so each row is visited once.
pub fn mean_cov<S: Scalar>(x: &Tensor<S>) -> Result<(Vec<S>, Tensor<S>)> {
    if x.rank() != 2 {
        return Err(dim_err!("mean_cov expects a matrix, got {:?}", x.shape()));
    }
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::InsufficientData(format!("covariance needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![S::zero(); d];
    let mut m2 = vec![S::zero(); d * d];
    let mut delta = vec![S::zero(); d];
    for (k, row) in (0..n).map(|i| x.row(i)).enumerate() {
        let count = S::of((k + 1) as f64);
        for j in 0..d {
            delta[j] = row[j] - mean[j];
            mean[j] += delta[j] / count;
        }
        for i in 0..d {
            let post = row[i] - mean[i];
            for j in 0..d {
                m2[i * d + j] += delta[j] * post;
            }
        }
    }
    let denom = S::of((n - 1) as f64);
    let mut cov = Tensor::matrix(d, d, m2.into_iter().map(|v| v / denom).collect())?;
    symmetrize(&mut cov);
    Ok((mean, cov))
}

pub(crate) fn symmetrize<S: Scalar>(m: &mut Tensor<S>) {
    let d = m.rows();
    let half = S::of(0.5);
    for i in 0..d {
        for j in (i + 1)..d {
            let v = (m.at(i, j) + m.at(j, i)) * half;
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
}

fn max_abs<S: Scalar>(m: &Tensor<S>) -> S {
    m.data().iter().fold(S::zero(), |acc, x| acc.max(x.abs()))
}

/// Relative tolerance used for the symmetry and definiteness checks.
fn check_tol<S: Scalar>() -> S {
    S::of(1e-10).max(S::epsilon() * S::of(100.0))
}

/// Eigenvalues and column eigenvectors of a symmetric matrix (cyclic Jacobi).
pub fn symmetric_eigen<S: Scalar>(a: &Tensor<S>) -> Result<(Vec<S>, Tensor<S>)> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(dim_err!("eigendecomposition needs a square matrix, got {:?}", a.shape()));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Tensor::identity(n);
    let total: S = m.sum_squares();
    let eps = S::epsilon();
    for _sweep in 0..100 {
        let mut off = S::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.at(p, q) * m.at(p, q);
            }
        }
        if off <= eps * eps * total || off == S::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq == S::zero() {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (S::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m.at(k, p), m.at(k, q));
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (m.at(p, k), m.at(q, k));
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                m.set(p, q, S::zero());
                m.set(q, p, S::zero());
                for k in 0..n {
                    let (vkp, vkq) = (v.at(k, p), v.at(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let values = (0..n).map(|i| m.at(i, i)).collect();
    Ok((values, v))
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues down to `-tol * max|sigma|` are clamped to zero; anything more
/// negative, or an asymmetry beyond the same tolerance, is a domain error.
pub fn sqrtm_spd<S: Scalar>(sigma: &Tensor<S>) -> Result<Tensor<S>> {
    if sigma.rank() != 2 || sigma.rows() != sigma.cols() {
        return Err(dim_err!("sqrtm needs a square matrix, got {:?}", sigma.shape()));
    }
    let n = sigma.rows();
    let scale = max_abs(sigma).max(S::one());
    let tol = check_tol::<S>() * scale;
    for i in 0..n {
        for j in (i + 1)..n {
            if (sigma.at(i, j) - sigma.at(j, i)).abs() > tol {
                return Err(Error::Domain(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut sym = sigma.clone();
    symmetrize(&mut sym);
    let (values, vectors) = symmetric_eigen(&sym)?;
    let mut roots = Vec::with_capacity(n);
    for &lam in &values {
        if lam < -tol {
            return Err(Error::Domain(format!("matrix is indefinite: eigenvalue {lam}")));
        }
        roots.push(lam.max(S::zero()).sqrt());
    }
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let mut acc = S::zero();
            for (k, &r) in roots.iter().enumerate() {
                acc += vectors.at(i, k) * r * vectors.at(j, k);
            }
            out.set(i, j, acc);
            out.set(j, i, acc);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::matmul;

    fn random_spd(rng: &mut Rng, d: usize) -> Tensor<f64> {
        let a = rng.randn::<f64>(&[d, d + 3]);
        let mut s = matmul(&a, &a.transpose().unwrap()).unwrap();
        symmetrize(&mut s);
        s
    }

    #[test]
    fn sqrtm_trivial_cases() {
        let i = Tensor::<f64>::identity(3);
        let r = sqrtm_spd(&i).unwrap();
        assert!(r.sub(&i).unwrap().norm() < 1e-14);
        let d = Tensor::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]).unwrap();
        let r = sqrtm_spd(&d).unwrap();
        let want = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert!(r.sub(&want).unwrap().norm() < 1e-14);
    }

    #[test]
    fn sqrtm_multiplies_back() {
        let mut rng = Rng::new(11, 0);
        for d in [1, 2, 5, 16, 32] {
            let s = random_spd(&mut rng, d);
            let r = sqrtm_spd(&s).unwrap();
            let back = matmul(&r, &r).unwrap();
            let rel = back.sub(&s).unwrap().norm() / s.norm();
            assert!(rel < 1e-8, "d={d} rel={rel}");
            assert!(r.sub(&r.transpose().unwrap()).unwrap().norm() == 0.0);
        }
    }

    #[test]
    fn sqrtm_rejects_bad_inputs() {
        let asym = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sqrtm_spd(&asym), Err(Error::Domain(_))));
        let indef = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(matches!(sqrtm_spd(&indef), Err(Error::Domain(_))));
        let tiny_neg = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1e-13]]).unwrap();
        let r = sqrtm_spd(&tiny_neg).unwrap();
        assert_eq!(r.at(1, 1), 0.0);
    }

    #[test]
    fn eigen_reconstructs() {
        let mut rng = Rng::new(2, 0);
        let s = random_spd(&mut rng, 6);
        let (vals, vecs) = symmetric_eigen(&s).unwrap();
        let mut diag = Tensor::zeros(&[6, 6]);
        for (i, &v) in vals.iter().enumerate() {
            diag.set(i, i, v);
        }
        let back = matmul(&matmul(&vecs, &diag).unwrap(), &vecs.transpose().unwrap()).unwrap();
        assert!(back.sub(&s).unwrap().norm() / s.norm() < 1e-12);
    }

    #[test]
    fn mean_cov_examples() {
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let (m, c) = mean_cov(&same).unwrap();
        assert_eq!(m, vec![1.0, 2.0]);
        assert!(c.data().iter().all(|&x| x == 0.0));

        let one_d = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let (m, c) = mean_cov(&one_d).unwrap();
        assert_eq!(m, vec![1.0]);
        assert_eq!(c.data(), &[2.0]);

        let single = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(mean_cov(&single), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn mean_cov_matches_two_pass() {
        let x = Rng::new(8, 0).randn::<f64>(&[100, 4]).map(|v| 3.0 * v + 1.5);
        let (mean, cov) = mean_cov(&x).unwrap();
        let n = 100.0;
        let mut want_mean = [0.0; 4];
        for i in 0..100 {
            for j in 0..4 {
                want_mean[j] += x.at(i, j) / n;
            }
        }
        for j in 0..4 {
            assert!((mean[j] - want_mean[j]).abs() < 1e-12);
        }
        for a in 0..4 {
            for b in 0..4 {
                let mut s = 0.0;
                for i in 0..100 {
                    s += (x.at(i, a) - want_mean[a]) * (x.at(i, b) - want_mean[b]);
                }
                assert!((cov.at(a, b) - s / (n - 1.0)).abs() < 1e-12);
            }
        }
    }
}
