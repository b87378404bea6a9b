//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The rotations run on the columns of whichever orientation has fewer
//! columns, so a `785 x 32` representation matrix costs 32-column sweeps.
//! Pairs are rotated until every computed column pair is orthogonal to
//! within `sqrt(m) * eps` of the product of their norms. Column orthogonality
//! is therefore relative, which keeps the left singular vectors of small but
//! non-negligible singular values orthonormal.

use crate::error::{Error, Result};
use crate::tensor::{dot_slices, Tensor};

pub const MAX_SWEEPS: usize = 60;

/// Thin factors `a = u · diag(s) · vt` with `r = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// `m x r`, orthonormal columns.
    pub u: Tensor,
    /// Length `r`, non-negative, non-increasing.
    pub s: Vec<f64>,
    /// `r x n`, orthonormal rows.
    pub vt: Tensor,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Result<Tensor> {
        let r = self.s.len();
        let mut us = self.u.clone();
        let m = us.rows();
        for i in 0..m {
            for j in 0..r {
                let v = us.at(i, j) * self.s[j];
                us.set(i, j, v);
            }
        }
        us.matmul(&self.vt)
    }
}

pub fn thin_svd(a: &Tensor) -> Result<SvdFactors> {
    if a.ndim() != 2 {
        return Err(crate::error::shape_err("thin_svd", "2-D", a.shape()));
    }
    if a.is_empty() {
        return Err(Error::Empty { op: "thin_svd" });
    }
    a.check_finite("thin_svd")?;
    if a.rows() >= a.cols() {
        tall_svd(a)
    } else {
        let f = tall_svd(&a.transpose()?)?;
        Ok(SvdFactors {
            u: f.vt.transpose()?,
            s: f.s,
            vt: f.u.transpose()?,
        })
    }
}

fn tall_svd(a: &Tensor) -> Result<SvdFactors> {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let norm_sq = a.frobenius_norm_sq();
    let rel_tol = f64::EPSILON.max((m as f64).sqrt() * f64::EPSILON);
    // Pairs whose norm product sits below this are numerically zero columns.
    let floor = (f64::EPSILON * f64::EPSILON) * norm_sq;

    let mut converged = norm_sq == 0.0;
    let mut residual = 0.0;
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        sweep += 1;
        let mut rotated = false;
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                off += gamma * gamma;
                let scale = (alpha * beta).sqrt();
                if scale <= floor || gamma.abs() <= rel_tol * scale {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        residual = off.sqrt() / norm_sq.max(f64::MIN_POSITIVE);
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNotConverged {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot_slices(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    // Columns this small were never rotated against each other; their
    // directions come from orthonormal completion instead.
    let keep = 1e-14 * norm_sq.sqrt();
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if sigma[j] > keep {
            ucols.push(cols[j].iter().map(|v| v / sigma[j]).collect());
        } else {
            ucols.push(Vec::new());
            pending.push(slot);
        }
    }
    complete_orthonormal(&mut ucols, &pending, m);

    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    for (slot, &j) in order.iter().enumerate() {
        for (i, &x) in ucols[slot].iter().enumerate() {
            u.set(i, slot, x);
        }
        for (i, &x) in vcols[j].iter().enumerate() {
            vt.set(slot, i, x);
        }
    }
    let s = order.iter().map(|&j| sigma[j]).collect();
    Ok(SvdFactors { u, s, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the empty slots listed in `pending` with unit vectors orthogonal to
/// every other column, drawing candidates from the standard basis.
fn complete_orthonormal(ucols: &mut [Vec<f64>], pending: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in pending {
        loop {
            assert!(candidate < m, "orthonormal completion ran out of candidates");
            let mut v = vec![0.0; m];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, other) in ucols.iter().enumerate() {
                    if k == slot || other.is_empty() {
                        continue;
                    }
                    let proj = dot_slices(&v, other);
                    for (x, o) in v.iter_mut().zip(other) {
                        *x -= proj * o;
                    }
                }
            }
            let norm = dot_slices(&v, &v).sqrt();
            if norm > 1e-3 {
                v.iter_mut().for_each(|x| *x /= norm);
                ucols[slot] = v;
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn gram_error(q: &Tensor) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.sub(&Tensor::eye(g.rows())).unwrap().max_abs()
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let f = thin_svd(&Tensor::eye(3)).unwrap();
        assert_eq!(f.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_with_zero() {
        let f = thin_svd(&Tensor::diag(&[3.0, 0.0])).unwrap();
        assert_eq!(f.s, vec![3.0, 0.0]);
        assert!(gram_error(&f.u) < 1e-12);
    }

    #[test]
    fn random_reconstruction() {
        let a = SeededRng::new(6).normal(&[6, 4]);
        let f = thin_svd(&a).unwrap();
        let err = f.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn wide_input_is_handled_by_transpose() {
        let a = SeededRng::new(7).normal(&[3, 9]);
        let f = thin_svd(&a).unwrap();
        assert_eq!(f.u.shape(), &[3, 3]);
        assert_eq!(f.vt.shape(), &[3, 9]);
        assert!(gram_error(&f.u) < 1e-10);
        assert!(gram_error(&f.vt.transpose().unwrap()) < 1e-10);
    }

    #[test]
    fn rank_deficient_trailing_zeros() {
        let mut rng = SeededRng::new(8);
        let a = rng.normal(&[7, 2]).matmul(&rng.normal(&[2, 5])).unwrap();
        let f = thin_svd(&a).unwrap();
        let fro = a.frobenius_norm();
        assert!(f.s[2..].iter().all(|&s| s <= 1e-12 * fro));
        assert!(gram_error(&f.u) < 1e-10);
        let err = f.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm() / fro;
        assert!(err <= 1e-10);
    }

    #[test]
    fn zero_matrix() {
        let f = thin_svd(&Tensor::zeros(&[4, 3])).unwrap();
        assert_eq!(f.s, vec![0.0; 3]);
        assert!(gram_error(&f.u) < 1e-12);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(thin_svd(&Tensor::zeros(&[0, 3])), Err(Error::Empty { .. })));
    }

    #[test]
    fn energy_identity() {
        let a = SeededRng::new(9).normal(&[5, 8]);
        let f = thin_svd(&a).unwrap();
        let energy: f64 = f.s.iter().map(|s| s * s).sum();
        assert!((energy - a.frobenius_norm_sq()).abs() <= 1e-10 * energy);
    }
}
