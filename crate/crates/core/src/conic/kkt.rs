use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::ConicProgram;
use crate::error::{Error, Result};

/// Cholesky factor of the reduced operator P + σI + Aᵀ diag(ρ) A, reused by
/// every ADMM iteration and by re-solves that share P, A and ρ.
#[derive(Clone, Debug)]
pub struct KktFactor {
    chol: Cholesky<f64, Dyn>,
    pub regularized: bool,
}

impl KktFactor {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(rhs);
        self.chol.solve(&v).as_slice().to_vec()
    }
}

pub fn factorize_kkt(program: &ConicProgram, rho: &[f64], sigma: f64) -> Result<KktFactor> {
    let n = program.variables();
    let mut m = program.p.symmetric_dense();
    for i in 0..n {
        m[(i, i)] += sigma;
    }
    // Aᵀ diag(ρ) A column pair by column pair
    let a = &program.a;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); a.nrows];
    for (r, c, v) in a.entries() {
        rows[r].push((c, v));
    }
    for (r, entries) in rows.iter().enumerate() {
        let w = rho[r];
        for &(i, vi) in entries {
            for &(j, vj) in entries {
                m[(i, j)] += w * vi * vj;
            }
        }
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(KktFactor {
            chol,
            regularized: false,
        });
    }
    let shifted = m + DMatrix::<f64>::identity(n, n) * 1e-8;
    Cholesky::new(shifted)
        .map(|chol| KktFactor {
            chol,
            regularized: true,
        })
        .ok_or_else(|| Error::Numerical("KKT operator singular after diagonal shift".into()))
}
