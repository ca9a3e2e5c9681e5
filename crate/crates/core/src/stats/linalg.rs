//! Symmetrically pivoted Cholesky for Gram and covariance matrices.

use nalgebra::{DMatrix, DVector};

/// `P A Pᵀ = L Lᵀ` of a Jacobi-scaled symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
    perm: Vec<usize>,
    /// Diagonal scaling: `A = D S D` with `S` unit-diagonal.
    scale: Vec<f64>,
}

/// Factorises `a`, failing with the smallest relative pivot when it drops below `tol`.
///
/// Pivots are measured on the unit-diagonal rescaling of `a`, so the
/// tolerance does not depend on the units of the variables.
pub fn cholesky(a: &DMatrix<f64>, tol: f64) -> Result<Cholesky, f64> {
    let k = a.nrows();
    assert_eq!(k, a.ncols(), "cholesky needs a square matrix");
    let mut scale = Vec::with_capacity(k);
    for i in 0..k {
        let d = a[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(0.0);
        }
        scale.push(d.sqrt());
    }
    let mut w = DMatrix::from_fn(k, k, |i, j| a[(i, j)] / (scale[i] * scale[j]));
    let mut perm: Vec<usize> = (0..k).collect();
    let mut l = DMatrix::zeros(k, k);
    for c in 0..k {
        let (mut best, mut best_val) = (c, f64::NEG_INFINITY);
        for r in c..k {
            if w[(r, r)] > best_val {
                best = r;
                best_val = w[(r, r)];
            }
        }
        if !(best_val > tol) {
            return Err(best_val.max(0.0));
        }
        if best != c {
            w.swap_rows(c, best);
            w.swap_columns(c, best);
            l.swap_rows(c, best);
            perm.swap(c, best);
        }
        let piv = w[(c, c)].sqrt();
        l[(c, c)] = piv;
        for r in c + 1..k {
            l[(r, c)] = w[(r, c)] / piv;
        }
        for r in c + 1..k {
            let lr = l[(r, c)];
            for s in c + 1..=r {
                let v = w[(r, s)] - lr * l[(s, c)];
                w[(r, s)] = v;
                w[(s, r)] = v;
            }
        }
    }
    Ok(Cholesky { l, perm, scale })
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let k = self.dim();
        let mut z = DVector::from_fn(k, |i, _| b[self.perm[i]] / self.scale[self.perm[i]]);
        for i in 0..k {
            let mut v = z[i];
            for j in 0..i {
                v -= self.l[(i, j)] * z[j];
            }
            z[i] = v / self.l[(i, i)];
        }
        for i in (0..k).rev() {
            let mut v = z[i];
            for j in i + 1..k {
                v -= self.l[(j, i)] * z[j];
            }
            z[i] = v / self.l[(i, i)];
        }
        let mut x = DVector::zeros(k);
        for i in 0..k {
            x[self.perm[i]] = z[i] / self.scale[self.perm[i]];
        }
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            out.set_column(c, &self.solve(&b.column(c).into_owned()));
        }
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.dim(), self.dim()))
    }

    pub fn ln_det(&self) -> f64 {
        let scaled: f64 = (0..self.dim()).map(|i| 2.0 * self.l[(i, i)].ln()).sum();
        scaled + self.scale.iter().map(|s| 2.0 * s.ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let ch = cholesky(&a, 1e-12).unwrap();
        let x = ch.solve(&b);
        assert!((&a * &x - &b).amax() < 1e-14);
        let lu = a.clone().lu().determinant().ln();
        assert!((ch.ln_det() - lu).abs() < 1e-12);
        assert!((&a * ch.inverse() - DMatrix::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let a = &v * v.transpose() + DMatrix::from_diagonal_element(3, 3, 0.0);
        assert!(cholesky(&a, 1e-12).is_err());
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky(&a, 1e-12).is_err());
    }

    #[test]
    fn scale_invariant_tolerance() {
        let a = DMatrix::from_row_slice(2, 2, &[1e-16, 0.0, 0.0, 1e10]);
        assert!(cholesky(&a, 1e-12).is_ok());
    }
}
