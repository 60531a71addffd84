//! Cyclic Jacobi eigensolver for real symmetric matrices. Forward-only.

use super::complex::HERMITIAN_TOL;
use super::{ComplexValue, Tensor};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct SymmetricEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Tensor,
}

pub fn symmetric_eig(h: &Tensor) -> Result<SymmetricEig> {
    let n = h.rows();
    if n != h.cols() {
        return Err(Error::Contract(format!("eigensolver needs a square matrix, got {:?}", h.shape())));
    }
    let asym = h.asymmetry();
    if asym > HERMITIAN_TOL {
        return Err(Error::Contract(format!(
            "eigensolver input is not symmetric (max |h_ij - h_ji| = {asym:e})"
        )));
    }
    let mut a: Vec<f64> = h.data().to_vec();
    // symmetrize exactly so rotations see one value per pair
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = Tensor::eye(n).into_data();
    let scale = h.max_abs().max(f64::MIN_POSITIVE);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::numeric(
            "symmetric_eig",
            format!("Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[x * n + x].total_cmp(&a[y * n + y]));
    let values = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, dst, v[r * n + src]);
        }
    }
    Ok(SymmetricEig { values, vectors })
}

impl SymmetricEig {
    /// `V · diag(exp(−iλt)) · Vᵀ`.
    pub fn evolution(&self, t: f64) -> ComplexValue {
        let n = self.values.len();
        let mut re = Tensor::zeros(&[n, n]);
        let mut im = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let (mut r, mut m) = (0.0, 0.0);
                for (k, &lambda) in self.values.iter().enumerate() {
                    let w = self.vectors.at(i, k) * self.vectors.at(j, k);
                    r += w * (lambda * t).cos();
                    m -= w * (lambda * t).sin();
                }
                re.set(i, j, r);
                im.set(i, j, m);
            }
        }
        ComplexValue { re, im }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_input_sorts_and_permutes() {
        let e = symmetric_eig(&Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(e.values, vec![1.0, 3.0]);
        assert_eq!(e.vectors, Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
    }

    #[test]
    fn path_laplacian() {
        let e = symmetric_eig(&Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]])).unwrap();
        assert!(e.values[0].abs() < 1e-14);
        assert!((e.values[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let e = symmetric_eig(&Tensor::eye(5)).unwrap();
        assert!(e.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(symmetric_eig(&m), Err(Error::Contract(_))));
    }
}
