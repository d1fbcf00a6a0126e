//! Symmetric positive semi-definite matrices and the eigenvalue-clipping
//! projection used to repair indefinite draws and Hessians.

use crate::error::Error;
use nalgebra::{DMatrix, DVector};

/// Eigenvalue floor applied by [`nearest_psd`].
pub const PSD_EIGEN_FLOOR: f64 = 1e-10;

/// A symmetric matrix with non-negative eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    m: DMatrix<f64>,
}

impl SpdMatrix {
    /// Validate symmetry and (weakly) non-negative spectrum. Eigenvalues in
    /// `[-1e-8·scale, 0)` are treated as roundoff and clipped to zero.
    pub fn new(m: DMatrix<f64>) -> Result<Self, Error> {
        check_symmetric(&m)?;
        let scale = m.amax().max(1.0);
        let eig = m.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-8 * scale) {
            return Err(Error::Domain(format!(
                "matrix is not positive semi-definite (min eigenvalue {})",
                eig.eigenvalues.min()
            )));
        }
        if eig.eigenvalues.iter().any(|&l| l < 0.0) {
            return Ok(reconstruct(&eig.eigenvectors, &eig.eigenvalues.map(|l| l.max(0.0))));
        }
        Ok(Self { m })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            m: DMatrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self, Error> {
        if diag.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::Domain("negative or non-finite diagonal".into()));
        }
        Ok(Self {
            m: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    #[inline]
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// Principal submatrix over `idx`; PSD-ness is inherited.
    pub fn principal_submatrix(&self, idx: std::ops::Range<usize>) -> SpdMatrix {
        let d = idx.len();
        let mut out = DMatrix::zeros(d, d);
        for (a, i) in idx.clone().enumerate() {
            for (b, j) in idx.clone().enumerate() {
                out[(a, b)] = self.m[(i, j)];
            }
        }
        SpdMatrix { m: out }
    }

    /// A factor F with F·Fᵀ equal to the matrix: Cholesky when possible,
    /// otherwise the symmetric eigen square root (handles singular input).
    pub fn factor(&self) -> DMatrix<f64> {
        if let Some(chol) = nalgebra::Cholesky::new(self.m.clone()) {
            return chol.l();
        }
        let eig = self.m.clone().symmetric_eigen();
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let mut f = eig.eigenvectors;
        for j in 0..f.ncols() {
            let s = sqrt[j];
            for i in 0..f.nrows() {
                f[(i, j)] *= s;
            }
        }
        f
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<(), Error> {
    if m.nrows() != m.ncols() {
        return Err(Error::Domain(format!(
            "matrix is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("matrix has non-finite entries".into()));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::Domain(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

fn reconstruct(vectors: &DMatrix<f64>, values: &DVector<f64>) -> SpdMatrix {
    let mut scaled = vectors.clone();
    for j in 0..scaled.ncols() {
        let l = values[j];
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= l;
        }
    }
    let mut m = scaled * vectors.transpose();
    // kill roundoff asymmetry from the reconstruction
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    SpdMatrix { m }
}

/// Frobenius-nearest PSD matrix with eigenvalues clipped at
/// [`PSD_EIGEN_FLOOR`]. Inputs already satisfying the floor are returned
/// unchanged, making the projection idempotent.
pub fn nearest_psd(m: &DMatrix<f64>) -> Result<SpdMatrix, Error> {
    check_symmetric(m)?;
    let eig = m.clone().symmetric_eigen();
    // the slack absorbs eigen-recomputation noise so projecting twice is a no-op
    let slack = 1e-12 * m.amax().max(1.0);
    if eig.eigenvalues.iter().all(|&l| l >= PSD_EIGEN_FLOOR - slack) {
        return Ok(SpdMatrix { m: m.clone() });
    }
    let clipped = eig.eigenvalues.map(|l| l.max(PSD_EIGEN_FLOOR));
    Ok(reconstruct(&eig.eigenvectors, &clipped))
}
