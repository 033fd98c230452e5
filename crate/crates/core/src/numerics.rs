//! Dense symmetric linear algebra shared by every other module.
//!
//! All solves go through a symmetric eigendecomposition rather than a
//! Cholesky factorization: an undamped solve against a rank-deficient Gram
//! matrix must surface as [`Error::SingularMatrix`] instead of producing
//! garbage, and the eigenvalues double as the spectral diagnostics.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use ndarray_linalg::{Eigh, FactorizeC, InverseCInto, Solve, UPLO};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`SymmetricKernel::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A square, symmetric kernel block (NTK, per-layer kernels, Θ̄, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricKernel {
    entries: Array2<f64>,
}

impl SymmetricKernel {
    /// Validates squareness and symmetry to [`SYMMETRY_TOL`] relative to the
    /// largest entry, then stores the exactly symmetrized matrix.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c {
            return Err(Error::ShapeMismatch(format!("kernel must be square, got {r}x{c}")));
        }
        let scale = entries.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let asym = entries
            .iter()
            .zip(entries.t().iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::ShapeMismatch(format!(
                "kernel is not symmetric (max asymmetry {asym:e}, scale {scale:e})"
            )));
        }
        Ok(Self::symmetrize(entries))
    }

    /// Builds `(K + Kᵀ)/2` without validation.
    pub fn symmetrize(entries: Array2<f64>) -> Self {
        let sym = (&entries + &entries.t()) * 0.5;
        Self { entries: sym }
    }

    pub fn identity(n: usize) -> Self {
        Self { entries: Array2::eye(n) }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.entries
    }

    pub fn eigen(&self) -> Result<SymmetricEigen> {
        SymmetricEigen::new(&self.entries)
    }
}

impl AsRef<Array2<f64>> for SymmetricKernel {
    fn as_ref(&self) -> &Array2<f64> {
        &self.entries
    }
}

/// Eigendecomposition `K = V diag(λ) Vᵀ` with eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl SymmetricEigen {
    pub fn new(m: &Array2<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Ok(Self { values: Array1::zeros(0), vectors: Array2::zeros((0, 0)) });
        }
        let (values, vectors) = m.eigh(UPLO::Lower)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Linalg("eigendecomposition produced non-finite values".into()));
        }
        Ok(Self { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn lambda_min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn lambda_max(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    /// Positive-definiteness tolerance `1e-10 · λ_max · n`.
    pub fn tolerance(&self) -> f64 {
        1e-10 * self.lambda_max().abs() * self.dim() as f64
    }

    pub fn is_positive_definite(&self) -> bool {
        self.dim() == 0 || self.lambda_min() > self.tolerance()
    }

    /// Fails with [`Error::SingularMatrix`] unless `rho > 0` or the matrix is
    /// certified positive definite.
    pub fn check_solvable(&self, rho: f64) -> Result<()> {
        if rho < 0.0 || !rho.is_finite() {
            return Err(Error::InvalidConfig(format!("damping must be finite and >= 0, got {rho}")));
        }
        if rho == 0.0 && !self.is_positive_definite() {
            return Err(Error::SingularMatrix {
                min_eigenvalue: self.lambda_min(),
                tolerance: self.tolerance(),
            });
        }
        Ok(())
    }

    /// `(K + ρI)^{-1} R` for a matrix of right-hand sides.
    pub fn solve_damped(&self, rho: f64, rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_solvable(rho)?;
        let mut proj = self.vectors.t().dot(&rhs);
        for (mut row, &lam) in proj.axis_iter_mut(Axis(0)).zip(self.values.iter()) {
            row /= lam + rho;
        }
        Ok(self.vectors.dot(&proj))
    }

    pub fn solve_damped_vec(&self, rho: f64, rhs: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let col = rhs.insert_axis(Axis(1));
        Ok(self.solve_damped(rho, col)?.remove_axis(Axis(1)))
    }

    /// Dense `(K + ρI)^{-1}`.
    pub fn inverse_damped(&self, rho: f64) -> Result<Array2<f64>> {
        self.check_solvable(rho)?;
        let mut scaled = self.vectors.clone();
        for (mut col, &lam) in scaled.axis_iter_mut(Axis(1)).zip(self.values.iter()) {
            col /= lam + rho;
        }
        Ok(scaled.dot(&self.vectors.t()))
    }

    /// Applies `f(λ)` spectrally: `V diag(f(λ)) Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let mut scaled = self.vectors.clone();
        for (mut col, &lam) in scaled.axis_iter_mut(Axis(1)).zip(self.values.iter()) {
            col *= f(lam);
        }
        scaled.dot(&self.vectors.t())
    }
}

/// `(K + ρI)^{-1} R`.
pub fn damped_gram_solve(k: &SymmetricKernel, rho: f64, rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if rhs.nrows() != k.dim() {
        return Err(Error::ShapeMismatch(format!(
            "right-hand side has {} rows, kernel is {}x{}",
            rhs.nrows(),
            k.dim(),
            k.dim()
        )));
    }
    k.eigen()?.solve_damped(rho, rhs)
}

/// `Jᵀ (J Jᵀ + N ρ I)^{-1} r` with `N = rows(J)`; at `ρ = 0` this is the
/// minimum-norm solution of `J Δ = r`.
pub fn pinv_apply(j: ArrayView2<'_, f64>, r: ArrayView1<'_, f64>, rho: f64) -> Result<Array1<f64>> {
    let (rows, cols) = j.dim();
    if r.len() != rows {
        return Err(Error::ShapeMismatch(format!("residual has length {}, Jacobian has {rows} rows", r.len())));
    }
    if rows > cols {
        return Err(Error::ShapeMismatch(format!(
            "pseudo-inverse route needs rows <= columns, got {rows}x{cols}"
        )));
    }
    let gram = SymmetricKernel::symmetrize(j.dot(&j.t()));
    let z = gram.eigen()?.solve_damped_vec(rows as f64 * rho, r)?;
    Ok(j.t().dot(&z))
}

/// Extremes of the spectrum of `(K + Kᵀ)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spectrum {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `λ_max / λ_min`, or `f64::INFINITY` when `λ_min <= 0`.
    pub condition_number: f64,
}

pub fn spectrum_report(k: ArrayView2<'_, f64>) -> Result<Spectrum> {
    let sym = SymmetricKernel::symmetrize(k.to_owned());
    let eig = sym.eigen()?;
    Ok(spectrum_from_eigen(&eig))
}

pub fn spectrum_from_eigen(eig: &SymmetricEigen) -> Spectrum {
    let (lambda_min, lambda_max) = (eig.lambda_min(), eig.lambda_max());
    let condition_number = if lambda_min > 0.0 { lambda_max / lambda_min } else { f64::INFINITY };
    Spectrum { lambda_min, lambda_max, condition_number }
}

/// `A⁻¹ B` for symmetric positive-definite `A` via Cholesky; reports
/// [`Error::SingularMatrix`] (with the spectrum extremes) when the
/// factorization fails.
pub fn spd_solve(a: &Array2<f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(format!("matrix has {} rows, right-hand side {}", a.nrows(), b.nrows())));
    }
    let inv = match a.factorizec(UPLO::Lower).and_then(|f| f.invc_into()) {
        Ok(inv) => inv,
        Err(_) => {
            let eig = SymmetricEigen::new(a)?;
            return Err(Error::SingularMatrix { min_eigenvalue: eig.lambda_min(), tolerance: eig.tolerance() });
        }
    };
    let out = inv.dot(&b);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix { min_eigenvalue: 0.0, tolerance: 0.0 });
    }
    Ok(out)
}

/// General (non-symmetric) dense solve `A X = B` via LU.
pub fn lu_solve(a: &Array2<f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let x = a.solve(&b.to_owned())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix { min_eigenvalue: 0.0, tolerance: 0.0 });
    }
    Ok(x)
}

pub fn frobenius(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm2(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `‖A − B‖_F / ‖B‖_F`.
pub fn relative_frobenius(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    frobenius((&a - &b).view()) / frobenius(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use ndarray_linalg::{Inverse, SVD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let k = SymmetricKernel::identity(3);
        let r = array![[1.0], [-2.0], [0.5]];
        let x = damped_gram_solve(&k, 0.0, r.view()).unwrap();
        assert!((&x - &r).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn diagonal_solve() {
        let k = SymmetricKernel::new(array![[2.0, 0.0], [0.0, 4.0]]).unwrap();
        let x = damped_gram_solve(&k, 0.0, array![[1.0], [1.0]].view()).unwrap();
        assert!((x[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((x[[1, 0]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn damped_solve_matches_dense_inverse() {
        let a = gaussian(6, 4, 1);
        let k = SymmetricKernel::symmetrize(a.dot(&a.t()));
        let r = gaussian(6, 2, 2);
        let rho = 0.1;
        let x = damped_gram_solve(&k, rho, r.view()).unwrap();
        let dense = (k.as_ref() + &(Array2::<f64>::eye(6) * rho)).inv().unwrap();
        let oracle = dense.dot(&r);
        assert!(relative_frobenius(x.view(), oracle.view()) < 1e-8);
        let residual = (k.as_ref() + &(Array2::<f64>::eye(6) * rho)).dot(&x) - &r;
        assert!(frobenius(residual.view()) <= 1e-8 * frobenius(r.view()));
    }

    #[test]
    fn undamped_rank_deficient_is_singular() {
        let a = gaussian(5, 3, 3);
        let k = SymmetricKernel::symmetrize(a.dot(&a.t()));
        let err = damped_gram_solve(&k, 0.0, Array2::ones((5, 1)).view()).unwrap_err();
        assert!(matches!(err, Error::SingularMatrix { .. }));
        assert!(damped_gram_solve(&k, 1e-6, Array2::ones((5, 1)).view()).is_ok());
    }

    #[test]
    fn asymmetric_kernel_rejected() {
        assert!(SymmetricKernel::new(array![[1.0, 2.0], [0.0, 1.0]]).is_err());
        assert!(SymmetricKernel::new(Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn pinv_single_row() {
        let j = array![[1.0, 0.0, 0.0]];
        let d = pinv_apply(j.view(), array![2.0].view(), 0.0).unwrap();
        assert_eq!(d, array![2.0, 0.0, 0.0]);
    }

    #[test]
    fn pinv_padded_identity() {
        let mut j = Array2::zeros((2, 5));
        j[[0, 0]] = 1.0;
        j[[1, 1]] = 1.0;
        let d = pinv_apply(j.view(), array![1.0, 3.0].view(), 0.0).unwrap();
        assert_eq!(d, array![1.0, 3.0, 0.0, 0.0, 0.0]);
    }

    fn svd_pinv(j: &Array2<f64>) -> Array2<f64> {
        let (u, s, vt) = j.svd(true, true).unwrap();
        let (u, vt) = (u.unwrap(), vt.unwrap());
        let cutoff = 1e-12 * s[0];
        let mut out = Array2::zeros((j.ncols(), j.nrows()));
        for (k, &sv) in s.iter().enumerate() {
            if sv > cutoff {
                let v = vt.row(k);
                let uu = u.column(k);
                for a in 0..j.ncols() {
                    for b in 0..j.nrows() {
                        out[[a, b]] += v[a] * uu[b] / sv;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pinv_matches_svd_oracle() {
        let j = gaussian(4, 10, 4);
        let r = gaussian(4, 1, 5).remove_axis(Axis(1));
        let d = pinv_apply(j.view(), r.view(), 0.0).unwrap();
        let oracle = svd_pinv(&j).dot(&r);
        let err = norm2((&d - &oracle).view()) / norm2(oracle.view());
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn both_pinv_forms_agree_when_damped() {
        let j = gaussian(5, 9, 6);
        let r = gaussian(5, 1, 7).remove_axis(Axis(1));
        let rho = 1e-2;
        let n = j.nrows() as f64;
        let d = pinv_apply(j.view(), r.view(), rho).unwrap();
        // (JᵀJ + NρI)^{-1} Jᵀ r
        let primal = (j.t().dot(&j) + Array2::<f64>::eye(9) * (n * rho)).inv().unwrap().dot(&j.t().dot(&r));
        let err = norm2((&d - &primal).view()) / norm2(primal.view());
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn spectrum_of_isotropic_matrix() {
        let s = spectrum_report((Array2::<f64>::eye(4) * 5.0).view()).unwrap();
        assert!((s.lambda_min - 5.0).abs() < 1e-12);
        assert!((s.lambda_max - 5.0).abs() < 1e-12);
        assert!((s.condition_number - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectrum_of_diagonal() {
        let s = spectrum_report(array![[1.0, 0.0], [0.0, 4.0]].view()).unwrap();
        assert!((s.lambda_min - 1.0).abs() < 1e-12);
        assert!((s.lambda_max - 4.0).abs() < 1e-12);
        assert!((s.condition_number - 4.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_spectrum_reports_sentinel() {
        let s = spectrum_report(array![[1.0, 1.0], [1.0, 1.0]].view()).unwrap();
        assert!(s.condition_number.is_infinite());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn damped_solve_reproduces_rhs(seed in 0u64..10_000, rho in 1e-4f64..10.0) {
                let a = gaussian(7, 5, seed);
                let k = SymmetricKernel::symmetrize(a.dot(&a.t()));
                let r = gaussian(7, 3, seed + 1);
                let x = damped_gram_solve(&k, rho, r.view()).unwrap();
                let back = (k.as_ref() + &(Array2::<f64>::eye(7) * rho)).dot(&x);
                prop_assert!(relative_frobenius(back.view(), r.view()) < 1e-8);
            }

            #[test]
            fn pinv_is_minimum_norm(seed in 0u64..10_000) {
                let j = gaussian(3, 8, seed);
                let r = gaussian(3, 1, seed + 7).remove_axis(Axis(1));
                let d = pinv_apply(j.view(), r.view(), 0.0).unwrap();
                // any other preimage adds a null-space component
                let z = gaussian(8, 1, seed + 13).remove_axis(Axis(1));
                let null = &z - &svd_pinv(&j).dot(&j.dot(&z));
                let other = &d + &null;
                prop_assert!(norm2((j.dot(&other) - &r).view()) < 1e-8 * norm2(r.view()).max(1.0));
                prop_assert!(norm2(d.view()) <= norm2(other.view()) + 1e-10);
            }

            #[test]
            fn spectrum_permutation_invariant(seed in 0u64..10_000) {
                let a = gaussian(6, 6, seed);
                let k = a.dot(&a.t());
                let perm = [3usize, 0, 5, 1, 4, 2];
                let p = Array2::from_shape_fn((6, 6), |(i, j)| k[[perm[i], perm[j]]]);
                let s1 = spectrum_report(k.view()).unwrap();
                let s2 = spectrum_report(p.view()).unwrap();
                prop_assert!((s1.lambda_max - s2.lambda_max).abs() < 1e-9 * s1.lambda_max);
                prop_assert!((s1.lambda_min - s2.lambda_min).abs() < 1e-9 * s1.lambda_max);
            }
        }
    }
}
