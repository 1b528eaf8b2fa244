//! Ground-truth ARX plant, extended state and offline data generation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::behavioral::{HankelStack, Predictor};
use crate::error::{check_dim, param, Result};
use crate::linalg::{dot2, row_major, vector};
use crate::pce::GermFamily;

/// Independent, reproducible random stream `stream` under a master seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// y_k = Φ z_k + D u_k + w_k with z_k the last `t_ini` inputs and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArxModel {
    #[serde(with = "row_major")]
    phi: DMatrix<f64>,
    #[serde(with = "row_major")]
    d: DMatrix<f64>,
    t_ini: usize,
    disturbance: Vec<GermFamily>,
}

#[derive(Clone, Debug)]
pub struct ExtendedMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

/// Stacked past window `[u_{k-T}, …, u_{k-1}, y_{k-T}, …, y_{k-1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedState(pub DVector<f64>);

impl ExtendedState {
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

impl ArxModel {
    pub fn new(phi: DMatrix<f64>, d: DMatrix<f64>, t_ini: usize, disturbance: Vec<GermFamily>) -> Result<Self> {
        if t_ini == 0 {
            return Err(param("t_ini", "must be at least 1"));
        }
        let n_y = phi.nrows();
        if n_y == 0 {
            return Err(param("phi", "needs at least one output row"));
        }
        check_dim("D rows", n_y, d.nrows())?;
        let n_u = d.ncols();
        if n_u == 0 {
            return Err(param("d", "needs at least one input column"));
        }
        check_dim("Phi columns", t_ini * (n_u + n_y), phi.ncols())?;
        check_dim("disturbance components", n_y, disturbance.len())?;
        for f in &disturbance {
            f.validate()?;
        }
        Ok(Self {
            phi,
            d,
            t_ini,
            disturbance,
        })
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn t_ini(&self) -> usize {
        self.t_ini
    }

    pub fn n_u(&self) -> usize {
        self.d.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_w(&self) -> usize {
        self.n_y()
    }

    pub fn n_z(&self) -> usize {
        self.t_ini * (self.n_u() + self.n_y())
    }

    pub fn disturbance(&self) -> &[GermFamily] {
        &self.disturbance
    }

    pub fn disturbance_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.n_w(),
            self.disturbance.iter().map(|f| f.std_dev().powi(2)),
        ))
    }

    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend((self.t_ini as u64).to_le_bytes());
        for v in self.phi.iter().chain(self.d.iter()) {
            bytes.extend(v.to_le_bytes());
        }
        fingerprint(&bytes)
    }

    pub fn sample_disturbance<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(self.n_w(), self.disturbance.iter().map(|f| f.sample(rng)))
    }

    /// Extended state from explicit past windows, oldest first.
    pub fn state_from_window(&self, inputs: &[DVector<f64>], outputs: &[DVector<f64>]) -> Result<ExtendedState> {
        check_dim("input window", self.t_ini, inputs.len())?;
        check_dim("output window", self.t_ini, outputs.len())?;
        let mut z = DVector::zeros(self.n_z());
        for (i, u) in inputs.iter().enumerate() {
            check_dim("input", self.n_u(), u.len())?;
            z.rows_mut(i * self.n_u(), self.n_u()).copy_from(u);
        }
        let off = self.t_ini * self.n_u();
        for (i, y) in outputs.iter().enumerate() {
            check_dim("output", self.n_y(), y.len())?;
            z.rows_mut(off + i * self.n_y(), self.n_y()).copy_from(y);
        }
        Ok(ExtendedState(z))
    }

    /// State with every past input equal to `u` and every past output to `y`.
    pub fn steady_state(&self, u: &DVector<f64>, y: &DVector<f64>) -> Result<ExtendedState> {
        self.state_from_window(&vec![u.clone(); self.t_ini], &vec![y.clone(); self.t_ini])
    }

    pub fn output(&self, z: &ExtendedState, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("extended state", self.n_z(), z.0.len())?;
        check_dim("input", self.n_u(), u.len())?;
        check_dim("disturbance", self.n_w(), w.len())?;
        Ok(&self.phi * &z.0 + &self.d * u + w)
    }

    pub fn shift(&self, z: &ExtendedState, u: &DVector<f64>, y: &DVector<f64>) -> ExtendedState {
        ExtendedState(shift_window(&z.0, u, y, self.t_ini, self.n_u(), self.n_y()))
    }

    pub fn realization_step(
        &self,
        z: &ExtendedState,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, ExtendedState)> {
        let y = self.output(z, u, w)?;
        let next = self.shift(z, u, &y);
        Ok((y, next))
    }

    /// Exact residual y − Φz − Du − w evaluated in compensated arithmetic.
    pub fn output_residual(
        &self,
        z: &ExtendedState,
        u: &DVector<f64>,
        w: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::from_fn(self.n_y(), |r, _| {
            let terms = std::iter::once((y[r], 1.0))
                .chain(std::iter::once((w[r], -1.0)))
                .chain((0..self.n_z()).map(|c| (self.phi[(r, c)], -z.0[c])))
                .chain((0..self.n_u()).map(|c| (self.d[(r, c)], -u[c])));
            dot2(terms)
        })
    }

    pub fn extended_state_matrices(&self) -> ExtendedMatrices {
        extended_matrices(&self.phi, &self.d, self.t_ini)
    }
}

/// Drops the oldest (u, y) pair of a stacked window and appends the newest.
pub fn shift_window(
    z: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
    t_ini: usize,
    nu: usize,
    ny: usize,
) -> DVector<f64> {
    let mut next = DVector::zeros(z.len());
    let yoff = t_ini * nu;
    for i in 0..t_ini - 1 {
        next.rows_mut(i * nu, nu).copy_from(&z.rows((i + 1) * nu, nu));
        next.rows_mut(yoff + i * ny, ny)
            .copy_from(&z.rows(yoff + (i + 1) * ny, ny));
    }
    next.rows_mut((t_ini - 1) * nu, nu).copy_from(u);
    next.rows_mut(yoff + (t_ini - 1) * ny, ny).copy_from(y);
    next
}

/// (Ã, B̃, Ẽ) with z_{k+1} = Ã z_k + B̃ u_k + Ẽ w_k.
pub fn extended_matrices(phi: &DMatrix<f64>, d: &DMatrix<f64>, t_ini: usize) -> ExtendedMatrices {
    let (nu, ny) = (d.ncols(), phi.nrows());
    let nz = t_ini * (nu + ny);
    let yoff = t_ini * nu;
    let mut a = DMatrix::zeros(nz, nz);
    let mut b = DMatrix::zeros(nz, nu);
    let mut e = DMatrix::zeros(nz, ny);
    for i in 0..t_ini - 1 {
        for c in 0..nu {
            a[(i * nu + c, (i + 1) * nu + c)] = 1.0;
        }
        for c in 0..ny {
            a[(yoff + i * ny + c, yoff + (i + 1) * ny + c)] = 1.0;
        }
    }
    for c in 0..nu {
        b[((t_ini - 1) * nu + c, c)] = 1.0;
    }
    let last = yoff + (t_ini - 1) * ny;
    a.rows_mut(last, ny).copy_from(phi);
    b.rows_mut(last, ny).copy_from(d);
    for c in 0..ny {
        e[(last + c, c)] = 1.0;
    }
    ExtendedMatrices { a, b, e }
}

/// The discretized aircraft model of the numerical example.
pub fn aircraft_model() -> ArxModel {
    let phi = DMatrix::from_row_slice(
        3,
        8,
        &[
            -0.019, -1.440, -0.201, 0.256, 0.050, 0.160, -0.256, 0.0860, //
            0.711, -1.800, -4.773, 3.6875, 0.650, 2.982, -2.688, 1.707, //
            1.444, -26.922, -15.746, 12.898, 2.319, 10.461, -12.897, 5.171,
        ],
    );
    let disturbance = [0.01, 1.0, 0.1]
        .iter()
        .map(|&h| GermFamily::UniformLegendre { lower: -h, upper: h })
        .collect();
    ArxModel::new(phi, DMatrix::zeros(3, 1), 2, disturbance).expect("aircraft model is well formed")
}

/// I.i.d. uniform excitation on a box; the initial output window is drawn
/// uniformly from `[-initial_output, initial_output]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub initial_output: f64,
    #[serde(default = "default_true")]
    pub disturbed: bool,
}

fn default_true() -> bool {
    true
}

impl Excitation {
    pub fn uniform(n_u: usize, half_width: f64) -> Self {
        Self {
            input_lower: vec![-half_width; n_u],
            input_upper: vec![half_width; n_u],
            initial_output: 1.0,
            disturbed: true,
        }
    }

    fn sample_input<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.input_lower.len(),
            self.input_lower
                .iter()
                .zip(&self.input_upper)
                .map(|(&lo, &hi)| if hi > lo { rng.gen_range(lo..hi) } else { lo }),
        )
    }
}

/// Recorded realization trajectories `(u, w, y)` of length `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataArchive {
    #[serde(rename = "T")]
    pub length: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub t_ini: usize,
    #[serde(with = "row_major")]
    pub u: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub w: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub y: DMatrix<f64>,
    #[serde(with = "vector")]
    pub z_init: DVector<f64>,
    pub seed: u64,
    pub model_hash: String,
}

impl DataArchive {
    pub fn n_w(&self) -> usize {
        self.w.ncols()
    }

    pub fn row(m: &DMatrix<f64>, t: usize) -> DVector<f64> {
        m.row(t).transpose()
    }

    /// Extended states z_0 … z_{T-1} preceding each recorded output.
    pub fn extended_states(&self) -> Vec<ExtendedState> {
        let mut z = self.z_init.clone();
        let mut out = Vec::with_capacity(self.length);
        for t in 0..self.length {
            out.push(ExtendedState(z.clone()));
            z = shift_window(
                &z,
                &Self::row(&self.u, t),
                &Self::row(&self.y, t),
                self.t_ini,
                self.n_u,
                self.n_y,
            );
        }
        out
    }

    /// Largest |y_t − Φ z_t − D u_t − w_t| over the archive.
    pub fn consistency_residual(&self, model: &ArxModel) -> f64 {
        self.extended_states()
            .iter()
            .enumerate()
            .map(|(t, z)| {
                model
                    .output_residual(
                        z,
                        &Self::row(&self.u, t),
                        &Self::row(&self.w, t),
                        &Self::row(&self.y, t),
                    )
                    .amax()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let head: Vec<String> = (0..self.n_u)
            .map(|c| format!("u{}", c + 1))
            .chain((0..self.n_w()).map(|c| format!("w{}", c + 1)))
            .chain((0..self.n_y).map(|c| format!("y{}", c + 1)))
            .collect();
        s.push_str(&head.join(","));
        s.push('\n');
        for t in 0..self.length {
            let row: Vec<String> = self
                .u
                .row(t)
                .iter()
                .chain(self.w.row(t).iter())
                .chain(self.y.row(t).iter())
                .map(|v| format!("{v:e}"))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Simulates the plant under random excitation. The recorded disturbance is
/// corrected by the rounding residual of each output so that the archive
/// satisfies the model equation to working precision.
pub fn collect_data(model: &ArxModel, length: usize, excitation: &Excitation, seed: u64) -> Result<DataArchive> {
    let min = model.n_z() + model.t_ini() + 1;
    if length < min {
        return Err(param("T", format!("{length} is too short, need at least {min}")));
    }
    check_dim("excitation inputs", model.n_u(), excitation.input_lower.len())?;
    check_dim("excitation inputs", model.n_u(), excitation.input_upper.len())?;
    let mut rng = rng_stream(seed, 0);
    let h = excitation.initial_output;
    let past_u: Vec<DVector<f64>> = (0..model.t_ini()).map(|_| excitation.sample_input(&mut rng)).collect();
    let past_y: Vec<DVector<f64>> = (0..model.t_ini())
        .map(|_| DVector::from_fn(model.n_y(), |_, _| if h > 0.0 { rng.gen_range(-h..h) } else { 0.0 }))
        .collect();
    let z_init = model.state_from_window(&past_u, &past_y)?;
    let mut z = z_init.clone();
    let (mut u, mut w, mut y) = (
        DMatrix::zeros(length, model.n_u()),
        DMatrix::zeros(length, model.n_w()),
        DMatrix::zeros(length, model.n_y()),
    );
    for t in 0..length {
        let ut = excitation.sample_input(&mut rng);
        let mut wt = model.sample_disturbance(&mut rng);
        if !excitation.disturbed {
            wt.fill(0.0);
        }
        let yt = model.output(&z, &ut, &wt)?;
        wt += model.output_residual(&z, &ut, &wt, &yt);
        u.set_row(t, &ut.transpose());
        w.set_row(t, &wt.transpose());
        y.set_row(t, &yt.transpose());
        z = model.shift(&z, &ut, &yt);
    }
    Ok(DataArchive {
        length,
        n_u: model.n_u(),
        n_y: model.n_y(),
        t_ini: model.t_ini(),
        u,
        w,
        y,
        z_init: z_init.0,
        seed,
        model_hash: model.fingerprint(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderEstimate {
    pub order: usize,
    pub singular_values: Vec<f64>,
    pub gap_ratio: f64,
    pub ill_conditioned: bool,
}

impl OrderEstimate {
    /// The user-supplied order wins when present.
    pub fn resolve(&self, user_override: Option<usize>) -> usize {
        user_override.unwrap_or(self.order)
    }
}

/// Numerical minimal order from the block Hankel matrix of input-to-output
/// Markov parameters, which are read off a data-based multi-step predictor.
/// Singular values below `rel_tol` times the largest are treated as zero.
pub fn minimal_order_estimate(archive: &DataArchive, rel_tol: f64) -> Result<OrderEstimate> {
    let (nu, ny, nw, t_ini) = (archive.n_u, archive.n_y, archive.n_w(), archive.t_ini);
    let cols_for = |h: usize| (archive.length + 1).saturating_sub(h + t_ini);
    let rows_for = |h: usize| t_ini * (nu + ny) + h * (nu + nw);
    let mut block = 8usize;
    while block > 1 && rows_for(2 * block) > cols_for(2 * block) {
        block -= 1;
    }
    if rows_for(2 * block) > cols_for(2 * block) {
        return Err(param("T", "archive too short for a Markov-parameter Hankel matrix"));
    }
    let horizon = 2 * block;
    let stack = HankelStack::new(archive, horizon)?;
    let predictor = Predictor::new(&stack)?;
    let theta_u = predictor.theta_u();
    // Markov parameter h_i (n_y × n_u) is the response at step i to an impulse at step 0.
    let markov = |i: usize| theta_u.view((i * ny, 0), (ny, nu)).into_owned();
    let mut h = DMatrix::zeros(block * ny, block * nu);
    for r in 0..block {
        for c in 0..block {
            h.view_mut((r * ny, c * nu), (ny, nu)).copy_from(&markov(r + c + 1));
        }
    }
    let mut sv: Vec<f64> = h.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax <= 1e-9 * (1.0 + theta_u.amax()) {
        return Ok(OrderEstimate {
            order: 0,
            singular_values: sv,
            gap_ratio: f64::INFINITY,
            ill_conditioned: false,
        });
    }
    let order = sv.iter().filter(|&&s| s > rel_tol * smax).count();
    let normalized: Vec<f64> = sv.iter().map(|s| s / smax).collect();
    let gap_ratio = if order < sv.len() && sv[order] > 0.0 {
        sv[order - 1] / sv[order]
    } else {
        f64::INFINITY
    };
    Ok(OrderEstimate {
        order,
        singular_values: normalized,
        gap_ratio,
        ill_conditioned: gap_ratio < 100.0,
    })
}
