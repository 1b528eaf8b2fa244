use super::Cone;

/// Euclidean projection onto the product cone.
pub fn project_cone(v: &[f64], cones: &[Cone]) -> Vec<f64> {
    let mut out = v.to_vec();
    project_in_place(&mut out, cones);
    out
}

pub(crate) fn project_in_place(v: &mut [f64], cones: &[Cone]) {
    let mut off = 0;
    for cone in cones {
        let n = cone.size();
        let block = &mut v[off..off + n];
        match cone {
            Cone::Zero(_) => block.iter_mut().for_each(|x| *x = 0.0),
            Cone::NonNeg(_) => block.iter_mut().for_each(|x| *x = x.max(0.0)),
            Cone::SecondOrder(_) => project_soc(block),
        }
        off += n;
    }
}

fn project_soc(block: &mut [f64]) {
    let t = block[0];
    let norm = block[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= t {
        return;
    }
    if norm <= -t {
        block.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let a = 0.5 * (norm + t);
    block[0] = a;
    let scale = a / norm;
    block[1..].iter_mut().for_each(|x| *x *= scale);
}

/// ∞-norm distance from the primal cone.
pub fn primal_cone_distance(v: &[f64], cones: &[Cone]) -> f64 {
    let p = project_cone(v, cones);
    v.iter().zip(&p).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// ∞-norm distance from the dual cone (the zero cone's dual is everything).
pub fn dual_cone_distance(v: &[f64], cones: &[Cone]) -> f64 {
    let mut off = 0;
    let mut dist: f64 = 0.0;
    for cone in cones {
        let n = cone.size();
        let block = &v[off..off + n];
        if !matches!(cone, Cone::Zero(_)) {
            let p = project_cone(block, std::slice::from_ref(cone));
            dist = block.iter().zip(&p).fold(dist, |m, (a, b)| m.max((a - b).abs()));
        }
        off += n;
    }
    dist
}
