//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_in_place(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Largest entry of `|m - mᵀ|`.
pub fn asymmetry(m: &Mat) -> f64 {
    max_abs_diff(m, &m.transpose())
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && asymmetry(m) <= tol * (1.0 + max_abs(m))
}

/// Square root factor `L` with `L Lᵀ = m` for a symmetric PSD matrix, via
/// the eigen-decomposition so singular covariances are accepted.
pub fn psd_sqrt(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::dims("covariance must be square"));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = 1.0 + max_abs(m);
    let mut factor = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -1e-10 * scale {
            return Err(Error::params(format!(
                "matrix is not positive semi-definite (eigenvalue {lambda:e})"
            )));
        }
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Ok(factor)
}

pub fn is_psd(m: &Mat, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = 1.0 + max_abs(m);
    eig.eigenvalues.iter().all(|&l| l >= -tol * scale)
}

pub fn is_positive_definite(m: &Mat) -> bool {
    m.is_square() && m.clone().cholesky().is_some()
}

/// Parses a row-major nested list into a matrix.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dims("ragged matrix rows"));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn mat(rows: &[&[f64]]) -> Mat {
    let ncols = rows.first().map_or(0, |r| r.len());
    Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

pub fn vector(values: &[f64]) -> Vector {
    Vector::from_column_slice(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_sqrt_reconstructs_and_accepts_singular() {
        let m = mat(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let l = psd_sqrt(&m).unwrap();
        assert!(max_abs_diff(&(&l * l.transpose()), &m) < 1e-12);
        let z = Mat::zeros(2, 2);
        assert_eq!(psd_sqrt(&z).unwrap(), Mat::zeros(2, 2));
        assert!(psd_sqrt(&mat(&[&[1.0, 0.0], &[0.0, -1.0]])).is_err());
    }

    #[test]
    fn symmetrize_in_place_matches_average() {
        let mut m = mat(&[&[1.0, 2.0], &[4.0, 3.0]]);
        let expected = symmetrize(&m);
        symmetrize_in_place(&mut m);
        assert_eq!(m, expected);
        assert_eq!(asymmetry(&m), 0.0);
    }
}
