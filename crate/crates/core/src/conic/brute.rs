use nalgebra::{DMatrix, DVector};

use super::{Cone, ConicProgram, ConicSolution, ConicStatus};
use crate::error::{Error, Result};

const TOL: f64 = 1e-9;

/// Exhaustive active-set enumeration for tiny QPs with zero and nonnegative
/// cones. Intended as an independent test oracle.
pub fn brute_force_qp(program: &ConicProgram) -> Result<ConicSolution> {
    program.check_shapes()?;
    let n = program.variables();
    if n > 3 {
        return Err(Error::Parameter {
            name: "program",
            reason: format!("{n} variables, enumeration limited to 3"),
        });
    }
    if program.cones.iter().any(|c| matches!(c, Cone::SecondOrder(_))) {
        return Err(Error::Parameter {
            name: "cones",
            reason: "enumeration supports zero and nonnegative cones only".into(),
        });
    }
    let p = program.p.symmetric_dense();
    let best = enumerate(program, &p, &program.q);
    if let Some(sol) = best {
        return Ok(sol);
    }
    // Distinguish infeasible from unbounded with a strictly convex probe.
    let probe = enumerate(program, &DMatrix::identity(n, n), &vec![0.0; n]);
    let status = if probe.is_some() {
        ConicStatus::Unbounded
    } else {
        ConicStatus::Infeasible
    };
    let m = program.constraints();
    Ok(ConicSolution {
        x: vec![0.0; n],
        s: vec![0.0; m],
        y: vec![0.0; m],
        objective: if status == ConicStatus::Infeasible {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        },
        status,
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
        gap: f64::NAN,
        iterations: 0,
        regularized: false,
        polished: false,
    })
}

fn enumerate(program: &ConicProgram, p: &DMatrix<f64>, q: &[f64]) -> Option<ConicSolution> {
    let n = program.variables();
    let m = program.constraints();
    let a = program.a.to_dense();
    let mut zero_rows = Vec::new();
    let mut nonneg_rows = Vec::new();
    let mut off = 0;
    for c in &program.cones {
        let rows = off..off + c.size();
        match c {
            Cone::Zero(_) => zero_rows.extend(rows),
            _ => nonneg_rows.extend(rows),
        }
        off += c.size();
    }
    let mut best: Option<ConicSolution> = None;
    for mask in 0u64..(1u64 << nonneg_rows.len()) {
        let active: Vec<usize> = zero_rows
            .iter()
            .copied()
            .chain(
                nonneg_rows
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| mask & (1 << k) != 0)
                    .map(|(_, &i)| i),
            )
            .collect();
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(p);
        let mut rhs = DVector::zeros(n + k);
        for c in 0..n {
            rhs[c] = -q[c];
        }
        for (r, &i) in active.iter().enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = a[(i, c)];
                kkt[(c, n + r)] = a[(i, c)];
            }
            rhs[n + r] = program.b[i];
        }
        let svd = kkt.clone().svd(true, true);
        let Ok(z) = svd.solve(&rhs, 1e-12) else { continue };
        if (&kkt * &z - &rhs).amax() > TOL * (1.0 + rhs.amax()) {
            continue;
        }
        let x: Vec<f64> = z.rows(0, n).iter().copied().collect();
        let ax = program.a.mul(&x);
        let mut s: Vec<f64> = (0..m).map(|i| program.b[i] - ax[i]).collect();
        let mut y = vec![0.0; m];
        for (r, &i) in active.iter().enumerate() {
            y[i] = z[n + r];
            s[i] = 0.0;
        }
        let primal_ok = nonneg_rows.iter().all(|&i| s[i] >= -TOL);
        let dual_ok = nonneg_rows.iter().all(|&i| y[i] >= -TOL);
        if !(primal_ok && dual_ok) {
            continue;
        }
        let px = p * DVector::from_column_slice(&x);
        let objective = 0.5 * x.iter().zip(px.iter()).map(|(a, b)| a * b).sum::<f64>()
            + x.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()
            + program.constant;
        if best.as_ref().map_or(true, |b| objective < b.objective) {
            let (primal_residual, dual_residual, gap) = program.residuals(&x, &s, &y);
            best = Some(ConicSolution {
                x,
                s,
                y,
                objective,
                status: ConicStatus::Optimal,
                primal_residual,
                dual_residual,
                gap,
                iterations: 0,
                regularized: false,
                polished: false,
            });
        }
    }
    best
}
