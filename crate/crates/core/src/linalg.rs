//! Dense helpers shared by the predictor, terminal design and the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Error-free transformation of a sum: `a + b = s + e` exactly.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

/// Error-free transformation of a product via fused multiply-add.
#[inline]
pub fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Dot product evaluated as if in twice the working precision.
pub fn dot2<I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let mut s = 0.0;
    let mut c = 0.0;
    for (a, b) in pairs {
        let (p, pe) = two_prod(a, b);
        let (t, se) = two_sum(s, p);
        s = t;
        c += pe + se;
    }
    s + c
}

pub fn matvec_compensated(a: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(a.nrows(), |i, _| dot2((0..a.ncols()).map(|k| (a[(i, k)], x[k]))))
}

pub fn matmul_compensated(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.ncols(), |i, j| {
        dot2((0..a.ncols()).map(|k| (a[(i, k)], b[(k, j)])))
    })
}

/// Pseudo-inverse of a row- and column-equilibrated matrix, with iterative
/// refinement against the original matrix using compensated residuals.
#[derive(Clone, Debug)]
pub struct ScaledPinv {
    matrix: DMatrix<f64>,
    col_scale: DVector<f64>,
    row_scale: DVector<f64>,
    pinv: DMatrix<f64>,
    rank: usize,
    singular_values: Vec<f64>,
}

impl ScaledPinv {
    /// `scale_rows` are extra rows that take part in the column norms only,
    /// e.g. the output block that will later be multiplied by the solution.
    pub fn new(matrix: &DMatrix<f64>, scale_rows: Option<&DMatrix<f64>>, rel_tol: f64) -> Self {
        let (r, c) = matrix.shape();
        let col_scale = DVector::from_fn(c, |j, _| {
            let mut n2 = matrix.column(j).norm_squared();
            if let Some(extra) = scale_rows {
                n2 += extra.column(j).norm_squared();
            }
            if n2 > 0.0 {
                1.0 / n2.sqrt()
            } else {
                1.0
            }
        });
        let mut scaled = matrix.clone();
        for j in 0..c {
            scaled.column_mut(j).scale_mut(col_scale[j]);
        }
        let row_scale = DVector::from_fn(r, |i, _| {
            let n = scaled.row(i).norm();
            if n > 0.0 {
                1.0 / n
            } else {
                1.0
            }
        });
        for i in 0..r {
            scaled.row_mut(i).scale_mut(row_scale[i]);
        }
        let svd = scaled.svd(true, true);
        let smax = svd.singular_values.max();
        let cutoff = rel_tol * smax;
        let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
        let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
        singular_values.sort_by(|a, b| b.total_cmp(a));
        let u = svd.u.expect("svd computed with u");
        let vt = svd.v_t.expect("svd computed with v_t");
        let mut pinv = DMatrix::zeros(c, r);
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > cutoff && s > 0.0 {
                pinv += (vt.row(k).transpose() / s) * u.column(k).transpose();
            }
        }
        Self {
            matrix: matrix.clone(),
            col_scale,
            row_scale,
            pinv,
            rank,
            singular_values,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn apply(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let scaled = rhs.component_mul(&self.row_scale);
        (&self.pinv * scaled).component_mul(&self.col_scale)
    }

    /// Minimum-norm least-squares solution with `steps` refinement sweeps.
    pub fn solve(&self, rhs: &DVector<f64>, steps: usize) -> DVector<f64> {
        let mut g = self.apply(rhs);
        for _ in 0..steps {
            let r = rhs - matvec_compensated(&self.matrix, &g);
            g += self.apply(&r);
        }
        g
    }

    pub fn residual(&self, g: &DVector<f64>, rhs: &DVector<f64>) -> DVector<f64> {
        rhs - matvec_compensated(&self.matrix, g)
    }

    /// Refined generalized inverse, one column per right-hand side unit vector.
    pub fn inverse(&self, steps: usize) -> DMatrix<f64> {
        let r = self.matrix.nrows();
        let mut out = DMatrix::zeros(self.matrix.ncols(), r);
        for i in 0..r {
            let mut e = DVector::zeros(r);
            e[i] = 1.0;
            out.set_column(i, &self.solve(&e, steps));
        }
        out
    }
}

/// Symmetric square root `U D^{1/2} Uᵀ` of a PSD matrix. Negative eigenvalues
/// are clamped to zero when their magnitude is below `tol * trace`.
pub fn symmetric_psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let trace = sym.trace().abs();
    let eig = SymmetricEigen::new(sym);
    let mut d = eig.eigenvalues.clone();
    for v in d.iter_mut() {
        if *v < 0.0 {
            if -*v > tol * trace.max(f64::MIN_POSITIVE) && -*v > 1e-300 {
                return Err(Error::Numerical(format!(
                    "negative eigenvalue {v:e} exceeds clamp tolerance (trace {trace:e})"
                )));
            }
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    let u = &eig.eigenvectors;
    Ok(u * DMatrix::from_diagonal(&d) * u.transpose())
}

/// Pseudo-inverse of a symmetric matrix, dropping eigenvalues below
/// `rel_tol * max |λ|`. Returns the zero matrix for a zero input.
pub fn symmetric_pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.amax();
    let n = m.nrows();
    if lmax == 0.0 {
        return DMatrix::zeros(n, n);
    }
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() > rel_tol * lmax { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.max()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Solves the Stein equation `Aᵀ X A − X + Q = 0` via the Kronecker form,
/// followed by one refinement step.
pub fn solve_stein(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let op = DMatrix::<f64>::identity(n * n, n * n) - at.kronecker(&at);
    let lu = op.clone().lu();
    let rhs = DVector::from_column_slice(q.as_slice());
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Stein operator singular (unit-modulus eigenvalue)".into()))?;
    let r = &rhs - &op * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Stabilizing solution of the discrete algebraic Riccati equation with stage
/// cost `xᵀQx + 2xᵀSu + uᵀRu`, computed by the structured doubling algorithm.
/// Returns `(X, K)` with the optimal feedback `u = K x`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("input weight is singular".into()))?;
    let mut ak = a - b * &r_inv * s.transpose();
    let mut gk = b * &r_inv * b.transpose();
    let mut hk = q - s * &r_inv * s.transpose();
    hk = (&hk + hk.transpose()) * 0.5;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    for _ in 0..200 {
        let w = &eye + &gk * &hk;
        let lu = w.lu();
        let wa = lu
            .solve(&ak)
            .ok_or_else(|| Error::Stabilizability("doubling step singular".into()))?;
        let wg = lu
            .solve(&gk)
            .ok_or_else(|| Error::Stabilizability("doubling step singular".into()))?;
        let a_next = &ak * &wa;
        let g_next = &gk + &ak * wg * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &wa;
        let delta = (&h_next - &hk).amax();
        let scale = h_next.amax().max(1.0);
        ak = a_next;
        gk = (&g_next + g_next.transpose()) * 0.5;
        hk = (&h_next + h_next.transpose()) * 0.5;
        if !hk.iter().all(|v| v.is_finite()) {
            break;
        }
        if delta <= 1e-14 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Stabilizability(
            "Riccati doubling iteration did not converge".into(),
        ));
    }
    let x = hk;
    let gain_lhs = r + b.transpose() * &x * b;
    let gain_rhs = b.transpose() * &x * a + s.transpose();
    let k = -gain_lhs
        .lu()
        .solve(&gain_rhs)
        .ok_or_else(|| Error::Numerical("gain system singular".into()))?;
    let rho = spectral_radius(&(a + b * &k));
    if !(rho < 1.0) {
        return Err(Error::Stabilizability(format!(
            "closed-loop spectral radius {rho} is not below one"
        )));
    }
    Ok((x, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot2_recovers_cancelled_terms() {
        let a = [1e16, 1.0, -1e16];
        let b = [1.0, 1.0, 1.0];
        assert_eq!(dot2(a.iter().copied().zip(b.iter().copied())), 1.0);
    }

    #[test]
    fn psd_sqrt_of_identity() {
        let s = symmetric_psd_sqrt(&DMatrix::identity(3, 3), 1e-10).unwrap();
        assert!((s - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(symmetric_psd_sqrt(&m, 1e-10).is_err());
    }

    #[test]
    fn stein_scalar_geometric_series() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let q = DMatrix::from_element(1, 1, 1.0);
        let x = solve_stein(&a, &q).unwrap();
        assert!((x[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn dare_scalar_matches_closed_form() {
        // x = a²x − a²b²x²/(r + b²x) + q with a=b=q=r=1 gives x = (1+√5)/2
        let one = DMatrix::from_element(1, 1, 1.0);
        let zero = DMatrix::zeros(1, 1);
        let (x, k) = solve_dare(&one, &one, &one, &one, &zero).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((x[(0, 0)] - golden).abs() < 1e-12);
        assert!((k[(0, 0)] + golden / (1.0 + golden)).abs() < 1e-12);
    }

    #[test]
    fn scaled_pinv_solves_badly_scaled_system() {
        let m = DMatrix::from_row_slice(2, 3, &[1e6, 0.0, 1.0, 0.0, 1e-6, 1.0]);
        let p = ScaledPinv::new(&m, None, 1e-12);
        let rhs = DVector::from_vec(vec![2.0, 3.0]);
        let g = p.solve(&rhs, 2);
        assert!(p.residual(&g, &rhs).amax() < 1e-12);
        assert_eq!(p.rank(), 2);
    }
}

/// Row-major `Vec<Vec<f64>>` serde representation for dense matrices.
pub mod row_major {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], ncols_if_empty: usize) -> Result<DMatrix<f64>, String> {
        let ncols = rows.first().map_or(ncols_if_empty, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows, 0).map_err(D::Error::custom)
    }
}

/// Plain `Vec<f64>` serde representation for dense vectors.
pub mod vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
