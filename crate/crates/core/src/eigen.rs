//! Symmetric eigenvalues via cyclic Jacobi rotations.
//!
//! Each rotation annihilates one off-diagonal element; sweeps repeat until
//! the largest off-diagonal magnitude falls below `1e-10 * ||A||_F`. Plenty
//! for the kernel matrices this crate produces (a few hundred rows at most).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const OFF_DIAG_TOL_FACTOR: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;
/// Largest tolerated input asymmetry.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn eigen_spectrum(k: &Tensor) -> Result<Vec<f64>> {
    if k.rank() != 2 || k.shape()[0] != k.shape()[1] {
        return Err(Error::Contract(format!(
            "eigen_spectrum needs a square matrix, got {:?}",
            k.shape()
        )));
    }
    let n = k.shape()[0];
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((k.at2(i, j) - k.at2(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOL {
        return Err(Error::Contract(format!(
            "matrix asymmetry {asym:.3e} exceeds {SYMMETRY_TOL:.0e}"
        )));
    }

    let mut a: Vec<f64> = k.data().to_vec();
    // work on the symmetrized matrix so tiny asymmetries cannot bias sweeps
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = avg;
            a[j * n + i] = avg;
        }
    }
    let frob = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = OFF_DIAG_TOL_FACTOR * frob;

    if n > 1 {
        for _sweep in 0..MAX_SWEEPS {
            let mut max_off = 0.0f64;
            for p in 0..n - 1 {
                for q in p + 1..n {
                    max_off = max_off.max(a[p * n + q].abs());
                }
            }
            if max_off <= tol || frob == 0.0 {
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= tol * 1e-2 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..n {
                        let aip = a[i * n + p];
                        let aiq = a[i * n + q];
                        a[i * n + p] = c * aip - s * aiq;
                        a[i * n + q] = s * aip + c * aiq;
                    }
                    for j in 0..n {
                        let apj = a[p * n + j];
                        let aqj = a[q * n + j];
                        a[p * n + j] = c * apj - s * aqj;
                        a[q * n + j] = s * apj + c * aqj;
                    }
                }
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    Ok(eig)
}
