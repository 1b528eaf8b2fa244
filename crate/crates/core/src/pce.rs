//! Orthonormal polynomial chaos bases and coefficient arithmetic.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};

/// Distribution of a scalar random variable together with its orthonormal
/// polynomial family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GermFamily {
    GaussianHermite { mean: f64, std: f64 },
    UniformLegendre { lower: f64, upper: f64 },
}

/// Standardized germ: N(0,1) for Hermite, U(-1,1) for Legendre.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GermKind {
    Hermite,
    Legendre,
}

impl GermKind {
    /// Orthonormal polynomial of the given degree evaluated at a standardized
    /// germ value, by three-term recurrence.
    pub fn polynomial(self, degree: usize, xi: f64) -> f64 {
        match self {
            GermKind::Hermite => {
                let (mut prev, mut cur) = (1.0, xi);
                if degree == 0 {
                    return 1.0;
                }
                let mut norm2 = 1.0;
                for n in 1..degree {
                    let next = xi * cur - n as f64 * prev;
                    prev = cur;
                    cur = next;
                    norm2 *= (n + 1) as f64;
                }
                cur / norm2.sqrt()
            }
            GermKind::Legendre => {
                let (mut prev, mut cur) = (1.0, xi);
                if degree == 0 {
                    return 1.0;
                }
                for n in 1..degree {
                    let nf = n as f64;
                    let next = ((2.0 * nf + 1.0) * xi * cur - nf * prev) / (nf + 1.0);
                    prev = cur;
                    cur = next;
                }
                cur * ((2 * degree + 1) as f64).sqrt()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            GermKind::Hermite => StandardNormal.sample(rng),
            GermKind::Legendre => rng.gen_range(-1.0..1.0),
        }
    }

    /// Draw of the degree-one basis function.
    pub fn sample_basis<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        self.polynomial(1, self.sample(rng))
    }
}

impl GermFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GermFamily::GaussianHermite { mean, std } => {
                if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
                    return Err(param("std", format!("Gaussian germ needs std > 0, got {std}")));
                }
            }
            GermFamily::UniformLegendre { lower, upper } => {
                if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
                    return Err(param(
                        "support",
                        format!("uniform germ needs lower < upper, got [{lower}, {upper}]"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> GermKind {
        match self {
            GermFamily::GaussianHermite { .. } => GermKind::Hermite,
            GermFamily::UniformLegendre { .. } => GermKind::Legendre,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            GermFamily::GaussianHermite { mean, .. } => mean,
            GermFamily::UniformLegendre { lower, upper } => 0.5 * (lower + upper),
        }
    }

    pub fn std_dev(&self) -> f64 {
        match *self {
            GermFamily::GaussianHermite { std, .. } => std,
            GermFamily::UniformLegendre { lower, upper } => (upper - lower) / 12f64.sqrt(),
        }
    }

    /// Largest absolute deviation from the mean, infinite for Gaussians.
    pub fn half_width(&self) -> f64 {
        match *self {
            GermFamily::GaussianHermite { .. } => f64::INFINITY,
            GermFamily::UniformLegendre { lower, upper } => 0.5 * (upper - lower),
        }
    }

    /// Realization of the modeled signal: mean + std · φ₁(ξ).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.mean() + self.std_dev() * self.kind().sample_basis(rng)
    }
}

/// Position of a basis index inside the joint basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisBlock {
    Constant,
    Initial { index: usize },
    Disturbance { step: usize, component: usize },
}

/// Joint basis over the initial-condition germs and one group of germs per
/// disturbance step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PceBasis {
    l_ini: usize,
    l_w: usize,
    horizon: usize,
    kinds: Vec<GermKind>,
}

impl PceBasis {
    pub fn dimension(&self) -> usize {
        self.l_ini + self.horizon * (self.l_w - 1)
    }

    pub fn initial_dimension(&self) -> usize {
        self.l_ini
    }

    pub fn disturbance_dimension(&self) -> usize {
        self.l_w
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn disturbance_components(&self) -> usize {
        self.l_w - 1
    }

    pub fn block(&self, j: usize) -> BasisBlock {
        if j == 0 {
            BasisBlock::Constant
        } else if j < self.l_ini {
            BasisBlock::Initial { index: j - 1 }
        } else {
            let off = j - self.l_ini;
            BasisBlock::Disturbance {
                step: off / (self.l_w - 1),
                component: off % (self.l_w - 1),
            }
        }
    }

    pub fn disturbance_index(&self, step: usize, component: usize) -> usize {
        self.l_ini + step * (self.l_w - 1) + component
    }

    /// Germ kind of basis function j ≥ 1.
    pub fn kind(&self, j: usize) -> GermKind {
        self.kinds[j - 1]
    }

    /// One outcome ω: values φʲ(ω) for j = 1..L-1.
    pub fn sample_germs<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.kinds.iter().map(|k| k.sample_basis(rng)).collect()
    }
}

/// Builds the joint basis with Gaussian initial germs and degree-one
/// component-wise disturbance germs, so `L_w = 1 + n_w`.
pub fn build_joint_basis(l_ini: usize, disturbance: &[GermFamily], horizon: usize) -> Result<PceBasis> {
    if l_ini == 0 {
        return Err(param("l_ini", "must be at least 1"));
    }
    if horizon == 0 {
        return Err(param("horizon", "must be at least 1"));
    }
    if disturbance.is_empty() {
        return Err(param("n_w", "must be at least 1"));
    }
    for f in disturbance {
        f.validate()?;
    }
    let l_w = 1 + disturbance.len();
    let mut kinds = vec![GermKind::Hermite; l_ini - 1];
    for _ in 0..horizon {
        kinds.extend(disturbance.iter().map(|f| f.kind()));
    }
    Ok(PceBasis {
        l_ini,
        l_w,
        horizon,
        kinds,
    })
}

/// Initial-condition block built from `n_z` standard normal germs.
pub fn gaussian_initial_basis(n_z: usize) -> (usize, Vec<GermFamily>) {
    (n_z + 1, vec![GermFamily::GaussianHermite { mean: 0.0, std: 1.0 }; n_z])
}

/// Coefficients of a vector-valued random variable; row j multiplies φʲ.
#[derive(Clone, Debug, PartialEq)]
pub struct PceVector {
    pub coefficients: DMatrix<f64>,
}

impl PceVector {
    pub fn new(coefficients: DMatrix<f64>) -> Self {
        Self { coefficients }
    }

    pub fn zeros(l: usize, n: usize) -> Self {
        Self::new(DMatrix::zeros(l, n))
    }

    pub fn terms(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn width(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.coefficients.row(0).transpose()
    }

    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let l = self.terms();
        let tail = self.coefficients.rows(1, l - 1);
        let cov = tail.transpose() * tail;
        (self.mean(), (&cov + cov.transpose()) * 0.5)
    }

    pub fn linear_combination(a: f64, v: &PceVector, b: f64, w: &PceVector) -> Result<PceVector> {
        check_dim("linear combination terms", v.terms(), w.terms())?;
        check_dim("linear combination width", v.width(), w.width())?;
        Ok(PceVector::new(&v.coefficients * a + &w.coefficients * b))
    }
}

/// Exact two-term expansion of zero-mean disturbance step `step`.
pub fn exact_pce_of_disturbance(families: &[GermFamily], basis: &PceBasis, step: usize) -> Result<PceVector> {
    check_dim("disturbance components", basis.disturbance_components(), families.len())?;
    if step >= basis.horizon() {
        return Err(param("step", format!("{step} beyond horizon {}", basis.horizon())));
    }
    let mut out = PceVector::zeros(basis.dimension(), families.len());
    for (c, f) in families.iter().enumerate() {
        f.validate()?;
        if f.mean().abs() > 0.0 {
            return Err(param(
                "disturbance",
                format!("component {c} has mean {} but disturbances must be zero-mean", f.mean()),
            ));
        }
        let j = basis.disturbance_index(step, c);
        if basis.kind(j) != f.kind() {
            return Err(Error::Parameter {
                name: "disturbance",
                reason: format!("component {c} family differs from the basis germ"),
            });
        }
        out.coefficients[(j, c)] = f.std_dev();
    }
    Ok(out)
}

/// Evaluates the series at one outcome; `germ_draws[j-1] = φʲ(ω)`.
pub fn sample_realization(v: &PceVector, germ_draws: &[f64]) -> Result<DVector<f64>> {
    check_dim("germ draws", v.terms() - 1, germ_draws.len())?;
    let mut out = v.mean();
    for (j, &phi) in germ_draws.iter().enumerate() {
        out += v.coefficients.row(j + 1).transpose() * phi;
    }
    Ok(out)
}

/// Coefficient-wise output map yʲ = Φ zʲ + D uʲ + wʲ.
pub fn pce_dynamics_step(
    phi: &DMatrix<f64>,
    d: &DMatrix<f64>,
    z: &PceVector,
    u: &PceVector,
    w: &PceVector,
) -> Result<PceVector> {
    check_dim("extended state width", phi.ncols(), z.width())?;
    check_dim("input width", d.ncols(), u.width())?;
    check_dim("output rows", phi.nrows(), d.nrows())?;
    check_dim("disturbance width", phi.nrows(), w.width())?;
    check_dim("input terms", z.terms(), u.terms())?;
    check_dim("disturbance terms", z.terms(), w.terms())?;
    let y = &z.coefficients * phi.transpose() + &u.coefficients * d.transpose() + &w.coefficients;
    Ok(PceVector::new(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(h: f64) -> GermFamily {
        GermFamily::UniformLegendre { lower: -h, upper: h }
    }

    #[test]
    fn basis_dimensions() {
        let b = build_joint_basis(9, &[uniform(0.01), uniform(1.0), uniform(0.1)], 10).unwrap();
        assert_eq!(b.dimension(), 39);
        let b = build_joint_basis(1, &[uniform(1.0)], 1).unwrap();
        assert_eq!(b.dimension(), 2);
        let b = build_joint_basis(3, &[uniform(1.0), uniform(1.0)], 4).unwrap();
        assert_eq!(b.dimension(), 11);
    }

    #[test]
    fn block_map_partitions_indices() {
        let b = build_joint_basis(3, &[uniform(1.0), uniform(1.0)], 4).unwrap();
        assert_eq!(b.block(0), BasisBlock::Constant);
        assert_eq!(b.block(2), BasisBlock::Initial { index: 1 });
        assert_eq!(b.block(3), BasisBlock::Disturbance { step: 0, component: 0 });
        assert_eq!(b.block(10), BasisBlock::Disturbance { step: 3, component: 1 });
        for j in 3..11 {
            if let BasisBlock::Disturbance { step, component } = b.block(j) {
                assert_eq!(b.disturbance_index(step, component), j);
            } else {
                panic!("index {j} outside disturbance block");
            }
        }
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(build_joint_basis(0, &[uniform(1.0)], 1).is_err());
        assert!(build_joint_basis(1, &[], 1).is_err());
        assert!(build_joint_basis(1, &[uniform(1.0)], 0).is_err());
        assert!(GermFamily::UniformLegendre { lower: 1.0, upper: 1.0 }
            .validate()
            .is_err());
        assert!(GermFamily::GaussianHermite { mean: 0.0, std: 0.0 }.validate().is_err());
    }

    #[test]
    fn moments_of_small_vectors() {
        let v = PceVector::new(DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
        let (m, c) = v.moments();
        assert_eq!(m[0], 1.0);
        assert_eq!(c[(0, 0)], 4.0);
        let v = PceVector::new(DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / 3f64.sqrt()]));
        assert!((v.moments().1[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_disturbance_coefficients() {
        let fams = [
            uniform(1.0),
            uniform(0.01),
            GermFamily::GaussianHermite { mean: 0.0, std: 2.0 },
        ];
        let b = build_joint_basis(2, &fams, 3).unwrap();
        let v = exact_pce_of_disturbance(&fams, &b, 1).unwrap();
        assert!((v.coefficients[(b.disturbance_index(1, 0), 0)] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((v.coefficients[(b.disturbance_index(1, 1), 1)] - 0.01 / 3f64.sqrt()).abs() < 1e-17);
        assert_eq!(v.coefficients[(b.disturbance_index(1, 2), 2)], 2.0);
        assert_eq!(v.coefficients.iter().filter(|x| **x != 0.0).count(), 3);
        let shifted = [GermFamily::UniformLegendre { lower: 0.0, upper: 1.0 }];
        let b1 = build_joint_basis(1, &shifted, 1).unwrap();
        assert!(exact_pce_of_disturbance(&shifted, &b1, 0).is_err());
    }

    #[test]
    fn realization_examples() {
        let v = PceVector::new(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
        assert_eq!(sample_realization(&v, &[2.0]).unwrap()[0], 2.0);
        let v = PceVector::new(DMatrix::from_column_slice(3, 1, &[5.0, 1.0, -1.0]));
        assert_eq!(sample_realization(&v, &[0.0, 0.0]).unwrap()[0], 5.0);
        assert!(sample_realization(&v, &[0.0]).is_err());
    }

    #[test]
    fn recurrences_match_closed_forms() {
        let x: f64 = 0.37;
        let he = [1.0, x, x * x - 1.0, x.powi(3) - 3.0 * x, x.powi(4) - 6.0 * x * x + 3.0];
        let fact = [1.0, 1.0, 2.0, 6.0, 24.0f64];
        for n in 0..5 {
            let want = he[n] / fact[n].sqrt();
            assert!((GermKind::Hermite.polynomial(n, x) - want).abs() < 1e-14);
        }
        let p = [1.0, x, 0.5 * (3.0 * x * x - 1.0), 0.5 * (5.0 * x.powi(3) - 3.0 * x)];
        for n in 0..4 {
            let want = p[n] * ((2 * n + 1) as f64).sqrt();
            assert!((GermKind::Legendre.polynomial(n, x) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn gaussian_initial_block() {
        assert_eq!(gaussian_initial_basis(8).0, 9);
        assert_eq!(gaussian_initial_basis(1).0, 2);
    }

    #[test]
    fn zero_inputs_give_zero_output() {
        let phi = DMatrix::from_element(2, 3, 0.7);
        let d = DMatrix::from_element(2, 1, 0.1);
        let y = pce_dynamics_step(
            &phi,
            &d,
            &PceVector::zeros(4, 3),
            &PceVector::zeros(4, 1),
            &PceVector::zeros(4, 2),
        )
        .unwrap();
        assert_eq!(y.coefficients.amax(), 0.0);
    }
}
