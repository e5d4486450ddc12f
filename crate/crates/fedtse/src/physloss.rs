//! Label-free physics-informed loss over the CTM state-space model.
//!
//! The loss couples consecutive state estimates through the one-step
//! predictor and anchors them to partial measurements. Its gradient splits
//! into three terms: model consistency and the h(ŷ) measurement part are
//! host-computable, while the term carrying guest measurement vectors is
//! evaluated column-by-column as secure inner products behind the
//! `SecureTermBackend` trait (plaintext reference or inner-product
//! encryption).

use ndarray::{Array1, Array2};

use crate::ctm::{self, Network};
use crate::error::{Error, Result};
use crate::scenario::SPEED_DENSITY_FLOOR;

/// What a measurement model reads off the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    /// Selects flow entries on detector cells (the host's loop data).
    HostFlowSelector,
    /// Fleet speed q/max(k, ε) per covered cell.
    GuestSpeed,
    /// Sampled density per covered cell.
    GuestDensity,
}

/// One measurement channel: a kind, the cells it may cover, and the diagonal
/// noise variance per covered cell.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MeasurementModel {
    pub kind: MeasurementKind,
    pub cells: Vec<usize>,
    pub noise_var: Vec<f64>,
}

impl MeasurementModel {
    pub fn validate(&self, n_cells: usize) -> Result<()> {
        if self.cells.len() != self.noise_var.len() {
            return Err(Error::Dimension("noise_var must match covered cells".into()));
        }
        if self.cells.iter().any(|&c| c >= n_cells) {
            return Err(Error::Config("measurement covers unknown cell".into()));
        }
        if self.noise_var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config("noise variances must be positive".into()));
        }
        Ok(())
    }

    /// Evaluates h for one covered cell.
    fn value(&self, y: &[f64], n: usize, cell: usize) -> f64 {
        match self.kind {
            MeasurementKind::HostFlowSelector => y[n + cell],
            MeasurementKind::GuestSpeed => y[n + cell] / y[cell].max(SPEED_DENSITY_FLOOR),
            MeasurementKind::GuestDensity => y[cell],
        }
    }

    /// Sparse Jacobian row of h for one covered cell: (column, value) pairs.
    fn jacobian_row(&self, y: &[f64], n: usize, cell: usize) -> Vec<(usize, f64)> {
        match self.kind {
            MeasurementKind::HostFlowSelector => vec![(n + cell, 1.0)],
            MeasurementKind::GuestSpeed => {
                let k = y[cell];
                let kf = k.max(SPEED_DENSITY_FLOOR);
                let q = y[n + cell];
                // below the floor the denominator is constant, so the
                // density derivative vanishes
                let dk = if k > SPEED_DENSITY_FLOOR { -q / (kf * kf) } else { 0.0 };
                vec![(n + cell, 1.0 / kf), (cell, dk)]
            }
            MeasurementKind::GuestDensity => vec![(cell, 1.0)],
        }
    }

    /// Index of this cell's value in the owning party's measurement vector.
    fn value_index(&self, n: usize, cell_pos: usize, cell: usize) -> usize {
        match self.kind {
            // host measurements are packed in detector order
            MeasurementKind::HostFlowSelector => cell_pos,
            // guest measurements use the fixed (speeds, densities) layout
            MeasurementKind::GuestSpeed => cell,
            MeasurementKind::GuestDensity => n + cell,
        }
    }

    fn is_covered(&self, mask: Option<&[bool]>, n: usize, cell: usize) -> bool {
        match (self.kind, mask) {
            (MeasurementKind::HostFlowSelector, _) => true,
            (_, None) => true,
            (MeasurementKind::GuestSpeed, Some(m)) => m[cell],
            (MeasurementKind::GuestDensity, Some(m)) => m[n + cell],
        }
    }
}

/// Applies a measurement model to a state, covered cells only.
pub fn measure(model: &MeasurementModel, y: &[f64], n_cells: usize) -> Vec<f64> {
    model
        .cells
        .iter()
        .map(|&c| model.value(y, n_cells, c))
        .collect()
}

/// Dense Jacobian ∂h/∂y of a measurement model (rows in covered-cell order).
pub fn measurement_jacobian(model: &MeasurementModel, y: &[f64], n_cells: usize) -> Array2<f64> {
    let mut jac = Array2::zeros((model.cells.len(), 2 * n_cells));
    for (row, &cell) in model.cells.iter().enumerate() {
        for (col, v) in model.jacobian_row(y, n_cells, cell) {
            jac[(row, col)] = v;
        }
    }
    jac
}

/// The full loss configuration for one scenario.
#[derive(Debug, Clone)]
pub struct PhysicsSpec {
    /// Diagonal process covariance Σ_ω over the 2N state entries.
    pub sigma_w: Vec<f64>,
    /// Model-consistency rows that participate in the loss. Density rows of
    /// source cells are excluded by `default_active_rows` because the
    /// predictor cannot know exogenous demand.
    pub model_active: Vec<bool>,
    pub host: Vec<MeasurementModel>,
    pub guests: Vec<Vec<MeasurementModel>>,
}

impl PhysicsSpec {
    pub fn validate(&self, net: &Network) -> Result<()> {
        let n = net.n_cells();
        if self.sigma_w.len() != 2 * n || self.model_active.len() != 2 * n {
            return Err(Error::Dimension("sigma_w/model_active must have 2N entries".into()));
        }
        if self.sigma_w.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config("process covariance must be positive".into()));
        }
        for m in self.host.iter().chain(self.guests.iter().flatten()) {
            m.validate(n)?;
        }
        Ok(())
    }
}

/// All model-consistency rows except those of source cells. A source cell's
/// next density depends on exogenous demand the predictor cannot know, and
/// its next outflow depends on that density, so both of its rows are
/// excluded; every other row is exactly predicted by `ctm::predict` on a
/// noiseless trajectory (as long as sources sit at upstream ends, which the
/// shipped scenarios do).
pub fn default_active_rows(net: &Network) -> Vec<bool> {
    let n = net.n_cells();
    let mut active = vec![true; 2 * n];
    for i in net.sources() {
        active[i] = false;
        active[n + i] = false;
    }
    active
}

/// Measurements aligned with one consecutive state pair.
#[derive(Debug, Clone)]
pub struct PairMeasurements {
    /// Host values in detector order.
    pub host_u: Vec<f64>,
    /// Per guest: the (speeds, densities) 2N vector.
    pub guest_u: Vec<Vec<f64>>,
    /// Per guest: coverage of the 2N layout.
    pub guest_mask: Vec<Vec<bool>>,
}

/// One batch element: rows into the shared estimate matrix for t and t+1,
/// plus the measurements at t.
#[derive(Debug, Clone)]
pub struct PhysicsPair {
    /// Absolute simulation step of `y_t` (signal phases depend on it).
    pub abs_step: u64,
    /// Row of the estimate/Jacobian arrays holding ŷ_t.
    pub pos_t: usize,
    /// Row holding ŷ_{t+1}.
    pub pos_t1: usize,
    pub meas: PairMeasurements,
}

/// Covered measurement rows of one party at one state.
pub struct PartyRows {
    /// Measurement values.
    pub u: Vec<f64>,
    /// Σν⁻¹·∂h/∂y over covered rows (m × 2N).
    pub w: Array2<f64>,
    /// h(y) at covered rows.
    pub h: Vec<f64>,
    /// Σν diagonal at covered rows.
    pub var: Vec<f64>,
}

/// Assembles the covered rows of a party's measurement models at state `y`.
pub fn party_rows(
    models: &[MeasurementModel],
    y: &[f64],
    u_vec: &[f64],
    mask: Option<&[bool]>,
    n_cells: usize,
) -> PartyRows {
    let mut u = Vec::new();
    let mut h = Vec::new();
    let mut var = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    for model in models {
        for (pos, &cell) in model.cells.iter().enumerate() {
            if !model.is_covered(mask, n_cells, cell) {
                continue;
            }
            u.push(u_vec[model.value_index(n_cells, pos, cell)]);
            h.push(model.value(y, n_cells, cell));
            var.push(model.noise_var[pos]);
            rows.push(model.jacobian_row(y, n_cells, cell));
        }
    }
    let mut w = Array2::zeros((rows.len(), 2 * n_cells));
    for (i, row) in rows.iter().enumerate() {
        for &(col, v) in row {
            w[(i, col)] = v / var[i];
        }
    }
    PartyRows { u, w, h, var }
}

/// Evaluates the physics loss over a batch of consecutive pairs:
/// ½ Σ [ r_ωᵀ Σ_ω⁻¹ r_ω + Σ_k r_νᵀ Σ_ν⁻¹ r_ν ] with r_ω = ŷ_{t+1} − g(ŷ_t),
/// masked model rows and uncovered measurement rows skipped.
pub fn physics_loss(
    net: &Network,
    spec: &PhysicsSpec,
    estimates: &Array2<f64>,
    pairs: &[PhysicsPair],
) -> Result<f64> {
    let n = net.n_cells();
    let dim = 2 * n;
    if estimates.ncols() != dim {
        return Err(Error::Dimension("state vectors must have 2N entries".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        let y_t = estimates.row(pair.pos_t).to_vec();
        let y_t1 = estimates.row(pair.pos_t1);
        let g = ctm::predict(net, &y_t, pair.abs_step);
        for i in 0..dim {
            if spec.model_active[i] {
                let r = y_t1[i] - g[i];
                total += r * r / spec.sigma_w[i];
            }
        }
        let host = party_rows(&spec.host, &y_t, &pair.meas.host_u, None, n);
        for i in 0..host.u.len() {
            let r = host.u[i] - host.h[i];
            total += r * r / host.var[i];
        }
        for (k, models) in spec.guests.iter().enumerate() {
            let rows = party_rows(
                models,
                &y_t,
                &pair.meas.guest_u[k],
                Some(&pair.meas.guest_mask[k]),
                n,
            );
            for i in 0..rows.u.len() {
                let r = rows.u[i] - rows.h[i];
                total += r * r / rows.var[i];
            }
        }
    }
    Ok(0.5 * total)
}

/// Per-index Jacobians of the estimates with respect to the host parameters
/// (flattened) and each guest's sub-model output.
pub struct EstimateJacobians<'a> {
    /// Per index: 2N × P.
    pub theta: &'a [Array2<f64>],
    /// Per index, per guest: 2N × dz.
    pub z: &'a [Vec<Array2<f64>>],
}

/// Gradients of the batch loss.
#[derive(Debug, Clone)]
pub struct PhysicsGradients {
    /// ∂L/∂θ⁰, flat host-parameter layout.
    pub theta: Vec<f64>,
    /// ∂L/∂z^k accumulated per estimate row: one (n_rows × dz) matrix per
    /// guest.
    pub z: Vec<Array2<f64>>,
}

/// The host-side description of one guest's secure term: per-pair weight
/// blocks and the Jacobian factors whose columns form the query vectors
/// a_col = W_t · (∂y_t/∂·) e_j, stacked over the batch.
pub struct SecureQueryPlan<'a> {
    /// Per pair: Σν⁻¹ ∂h/∂y over covered rows (m_t × 2N).
    pub w_blocks: Vec<Array2<f64>>,
    /// Per pair: ∂y_t/∂θ⁰ (2N × P).
    pub theta_blocks: Vec<&'a Array2<f64>>,
    /// Per pair: ∂y_t/∂z^k_t (2N × dz).
    pub z_blocks: Vec<&'a Array2<f64>>,
}

impl SecureQueryPlan<'_> {
    /// Total measurement dimension over the batch.
    pub fn stacked_dim(&self) -> usize {
        self.w_blocks.iter().map(|w| w.nrows()).sum()
    }

    pub fn theta_cols(&self) -> usize {
        self.theta_blocks.first().map(|b| b.ncols()).unwrap_or(0)
    }

    pub fn z_cols(&self) -> usize {
        self.z_blocks.first().map(|b| b.ncols()).unwrap_or(0)
    }
}

/// Computes Σ_t ⟨u_t, a_col⟩ for every query column of a plan. Implementors
/// differ in where u lives and whether the columns travel encrypted.
pub trait SecureTermBackend {
    /// Returns the θ-column sums (length P) and the per-pair z-column values
    /// (pair-major, dz each).
    fn inner_products(&mut self, plan: &SecureQueryPlan<'_>) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;
}

/// Reference backend holding the guest measurements directly; evaluates the
/// same sums exactly in floating point (factored for speed).
pub struct LocalPlaintextBackend {
    /// Covered measurement values per pair.
    pub u_blocks: Vec<Vec<f64>>,
}

impl SecureTermBackend for LocalPlaintextBackend {
    fn inner_products(&mut self, plan: &SecureQueryPlan<'_>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if self.u_blocks.len() != plan.w_blocks.len() {
            return Err(Error::Dimension("plan/measurement pair counts differ".into()));
        }
        let p = plan.theta_cols();
        let mut theta = vec![0.0; p];
        let mut z_values = Vec::with_capacity(plan.w_blocks.len());
        for (i, u) in self.u_blocks.iter().enumerate() {
            if u.len() != plan.w_blocks[i].nrows() {
                return Err(Error::Dimension("measurement block size mismatch".into()));
            }
            let u_arr = Array1::from_vec(u.clone());
            // ω_t = Wᵀ u ∈ R^{2N}; then ωᵀ·(∂y/∂·) gives every column sum
            let omega = plan.w_blocks[i].t().dot(&u_arr);
            let theta_part = omega.dot(plan.theta_blocks[i]);
            for (acc, v) in theta.iter_mut().zip(theta_part.iter()) {
                *acc += v;
            }
            z_values.push(omega.dot(plan.z_blocks[i]).to_vec());
        }
        Ok((theta, z_values))
    }
}

/// Outcome of the rank-condition defense.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankCheck {
    Ok { dim: usize, rank_bound: usize },
    Refusal { dim: usize, rank_bound: usize },
}

impl RankCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, RankCheck::Ok { .. })
    }
}

/// Numerical row rank by Gaussian elimination with partial pivoting.
fn numerical_rank(m: &Array2<f64>) -> usize {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return 0;
    }
    let mut a = m.clone();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = scale * 1e-10 * (rows.max(cols) as f64);
    let mut rank = 0;
    let mut row = 0;
    for col in 0..cols {
        if row >= rows {
            break;
        }
        let mut pivot = row;
        for r in row + 1..rows {
            if a[(r, col)].abs() > a[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if a[(pivot, col)].abs() <= tol {
            continue;
        }
        if pivot != row {
            for c in 0..cols {
                let tmp = a[(row, c)];
                a[(row, c)] = a[(pivot, c)];
                a[(pivot, c)] = tmp;
            }
        }
        for r in row + 1..rows {
            let f = a[(r, col)] / a[(row, col)];
            if f != 0.0 {
                for c in col..cols {
                    a[(r, c)] -= f * a[(row, c)];
                }
            }
        }
        rank += 1;
        row += 1;
    }
    rank
}

/// The rank-condition defense: the secure computation may proceed only if
/// the stacked measurement dimension strictly exceeds the rank of the
/// stacked query matrix. The rank is bounded from above by structure —
/// min(P, Σ_t rank(W_t)) for the θ columns plus Σ_t rank(W_t · ∂y/∂z) for
/// the per-pair z columns — which is sound (never understates the rank) and
/// avoids materializing the full stacked matrix.
pub fn rank_guard(plan: &SecureQueryPlan<'_>) -> RankCheck {
    rank_guard_with_theta_cols(plan, plan.theta_cols())
}

/// The guard with an explicit θ-column count, for callers that do not
/// materialize the θ blocks.
pub fn rank_guard_with_theta_cols(plan: &SecureQueryPlan<'_>, theta_cols: usize) -> RankCheck {
    let dim = plan.stacked_dim();
    let mut w_rank_sum = 0usize;
    let mut z_rank_sum = 0usize;
    for (w, z) in plan.w_blocks.iter().zip(&plan.z_blocks) {
        w_rank_sum += numerical_rank(w);
        z_rank_sum += numerical_rank(&w.dot(*z));
    }
    let theta_rank = w_rank_sum.min(theta_cols);
    let rank_bound = theta_rank + z_rank_sum;
    if dim > rank_bound {
        RankCheck::Ok { dim, rank_bound }
    } else {
        RankCheck::Refusal { dim, rank_bound }
    }
}

/// Assembles the full gradient of the batch loss per the three-term
/// decomposition. Model-consistency and h(ŷ)-side measurement terms are
/// computed locally; the guest-measurement term comes from the secure
/// backends (one per guest), queried with the composed Jacobian columns.
/// `enforce_guard` refuses (typed error) when the rank condition fails.
pub fn physics_gradients(
    net: &Network,
    spec: &PhysicsSpec,
    estimates: &Array2<f64>,
    jacobians: &EstimateJacobians<'_>,
    pairs: &[PhysicsPair],
    backends: &mut [&mut dyn SecureTermBackend],
    enforce_guard: bool,
) -> Result<PhysicsGradients> {
    let n = net.n_cells();
    let dim = 2 * n;
    let n_rows = estimates.nrows();
    if jacobians.theta.len() != n_rows || jacobians.z.len() != n_rows {
        return Err(Error::Dimension("one Jacobian bundle per estimate row".into()));
    }
    let n_guests = spec.guests.len();
    if backends.len() != n_guests {
        return Err(Error::Dimension("one backend per guest required".into()));
    }
    let p = jacobians.theta.first().map(|j| j.ncols()).unwrap_or(0);

    let mut theta = vec![0.0; p];
    let mut z: Vec<Array2<f64>> = (0..n_guests)
        .map(|k| {
            let dz = jacobians
                .z
                .first()
                .map(|row| row[k].ncols())
                .unwrap_or(0);
            Array2::zeros((n_rows, dz))
        })
        .collect();

    // local cotangents per pair endpoint
    for pair in pairs {
        let y_t = estimates.row(pair.pos_t).to_vec();
        let y_t1 = estimates.row(pair.pos_t1);
        let g = ctm::predict(net, &y_t, pair.abs_step);
        let step_jac = ctm::step_jacobian(net, &y_t, pair.abs_step);

        // model term: d/dy_{t+1} = Σω⁻¹ r, d/dy_t = −Gᵀ Σω⁻¹ r
        let mut a = Array1::zeros(dim);
        for i in 0..dim {
            if spec.model_active[i] {
                a[i] = (y_t1[i] - g[i]) / spec.sigma_w[i];
            }
        }
        let mut d_t = -step_jac.t().dot(&a);
        let d_t1 = a;

        // host measurements: fully local, −HᵀΣ⁻¹(u − h)
        let host = party_rows(&spec.host, &y_t, &pair.meas.host_u, None, n);
        let resid = Array1::from_iter(host.u.iter().zip(&host.h).map(|(u, h)| u - h));
        d_t = d_t - host.w.t().dot(&resid);

        // guest h-side term (term 3): +HᵀΣ⁻¹ h(y)
        for (k, models) in spec.guests.iter().enumerate() {
            let rows = party_rows(
                models,
                &y_t,
                &pair.meas.guest_u[k],
                Some(&pair.meas.guest_mask[k]),
                n,
            );
            let h_arr = Array1::from_vec(rows.h.clone());
            d_t = d_t + rows.w.t().dot(&h_arr);
        }

        // chain the local cotangents through the estimate Jacobians
        let theta_part =
            d_t.dot(&jacobians.theta[pair.pos_t]) + d_t1.dot(&jacobians.theta[pair.pos_t1]);
        for (acc, v) in theta.iter_mut().zip(theta_part.iter()) {
            *acc += v;
        }
        for k in 0..n_guests {
            let zt = d_t.dot(&jacobians.z[pair.pos_t][k]);
            let mut row = z[k].row_mut(pair.pos_t);
            row += &zt;
            let zt1 = d_t1.dot(&jacobians.z[pair.pos_t1][k]);
            let mut row1 = z[k].row_mut(pair.pos_t1);
            row1 += &zt1;
        }
    }

    // guest-measurement term (term 2), secure per guest: −Σ_t uᵀΣ⁻¹H·(∂y/∂·)
    for k in 0..n_guests {
        let mut w_blocks = Vec::with_capacity(pairs.len());
        let mut theta_blocks = Vec::with_capacity(pairs.len());
        let mut z_blocks = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let y_t = estimates.row(pair.pos_t).to_vec();
            let rows = party_rows(
                &spec.guests[k],
                &y_t,
                &pair.meas.guest_u[k],
                Some(&pair.meas.guest_mask[k]),
                n,
            );
            w_blocks.push(rows.w);
            theta_blocks.push(&jacobians.theta[pair.pos_t]);
            z_blocks.push(&jacobians.z[pair.pos_t][k]);
        }
        let plan = SecureQueryPlan {
            w_blocks,
            theta_blocks,
            z_blocks,
        };
        if enforce_guard {
            if let RankCheck::Refusal { dim, rank_bound } = rank_guard(&plan) {
                return Err(Error::RankRefusal(format!(
                    "guest {k}: batch measurement dimension {dim} does not exceed query rank bound {rank_bound}"
                )));
            }
        }
        let (theta_vals, z_vals) = backends[k].inner_products(&plan)?;
        if theta_vals.len() != p {
            return Err(Error::Dimension("backend returned wrong θ length".into()));
        }
        for (acc, v) in theta.iter_mut().zip(theta_vals.iter()) {
            *acc -= v;
        }
        for (pair, zv) in pairs.iter().zip(z_vals) {
            for (acc, v) in z[k].row_mut(pair.pos_t).iter_mut().zip(zv.iter()) {
                *acc -= v;
            }
        }
    }

    Ok(PhysicsGradients { theta, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctm::testutil;
    use crate::nn::DenseNet;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn speed_model(n: usize) -> MeasurementModel {
        MeasurementModel {
            kind: MeasurementKind::GuestSpeed,
            cells: (0..n).collect(),
            noise_var: vec![4.0; n],
        }
    }

    fn density_model(n: usize) -> MeasurementModel {
        MeasurementModel {
            kind: MeasurementKind::GuestDensity,
            cells: (0..n).collect(),
            noise_var: vec![9.0; n],
        }
    }

    #[test]
    fn measure_hand_cases() {
        let n = 9;
        let mut y = vec![0.0; 2 * n];
        y[2] = 50.0; // k_2
        y[n + 2] = 900.0; // q_2
        y[n + 4] = 640.0;

        let host = MeasurementModel {
            kind: MeasurementKind::HostFlowSelector,
            cells: vec![2, 4],
            noise_var: vec![1.0, 1.0],
        };
        assert_eq!(measure(&host, &y, n), vec![900.0, 640.0]);

        let speed = speed_model(n);
        let v = measure(&speed, &y, n);
        assert_eq!(v[2], 18.0); // 900 / 50
        // empty cell: q/ε convention
        assert_eq!(v[4], 640.0 / SPEED_DENSITY_FLOOR);

        let dens = density_model(n);
        assert_eq!(measure(&dens, &y, n)[2], 50.0);
    }

    #[test]
    fn measurement_jacobian_hand_and_fd() {
        let n = 3;
        let mut y = vec![50.0, 10.0, 0.0, 900.0, 200.0, 10.0];
        let speed = speed_model(n);
        let jac = measurement_jacobian(&speed, &y, n);
        assert!((jac[(0, 3)] - 0.02).abs() < 1e-15); // ∂v/∂q = 1/50
        assert!((jac[(0, 0)] + 0.36).abs() < 1e-15); // ∂v/∂k = −900/2500

        // selector rows are 0/1 with exactly one 1
        let host = MeasurementModel {
            kind: MeasurementKind::HostFlowSelector,
            cells: vec![1],
            noise_var: vec![1.0],
        };
        let hj = measurement_jacobian(&host, &y, n);
        assert_eq!(hj.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(hj[(0, 4)], 1.0);

        // finite differences away from the floor
        let h = 1e-6;
        for col in [0usize, 3] {
            let mut plus = y.clone();
            plus[col] += h;
            let mut minus = y.clone();
            minus[col] -= h;
            let fd = (measure(&speed, &plus, n)[0] - measure(&speed, &minus, n)[0]) / (2.0 * h);
            let an = jac[(0, col)];
            assert!((fd - an).abs() / an.abs().max(1.0) < 1e-5);
        }
        // below the floor the density derivative is zero by convention
        y[2] = 0.0;
        let jac0 = measurement_jacobian(&speed, &y, n);
        assert_eq!(jac0[(2, 2)], 0.0);
    }

    /// Small instance: a chain network, a host net mapping (x0, z) to the
    /// state estimate, fixed guest outputs z as free variables.
    struct Instance {
        net: crate::ctm::Network,
        spec: PhysicsSpec,
        host_net: DenseNet,
        x0: Vec<Array1<f64>>,
        z: Vec<Array1<f64>>, // one per index (single guest)
        pairs_ix: Vec<(usize, usize)>,
        dz: usize,
    }

    impl Instance {
        fn new(seed: u64, n_cells: usize, n_pairs: usize) -> Self {
            let net = testutil::chain(n_cells);
            let n = n_cells;
            let dz = 2;
            let dx0 = 3;
            let mut host_net = DenseNet::init(&[dx0 + dz, 8, 2 * n], seed).unwrap();
            // bias the output into a plausible state region (densities near
            // 30 veh/km, flows near 500 veh/h) so the speed floor and the
            // min-kinks stay far away and finite differences are well
            // conditioned
            {
                let last = host_net.layers.last_mut().unwrap();
                for i in 0..n {
                    last.biases[i] = 30.0;
                    last.biases[n + i] = 500.0;
                }
                last.weights.mapv_inplace(|w| w * 5.0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
            let n_idx = n_pairs + 1;
            let x0 = (0..n_idx)
                .map(|_| Array1::from_shape_fn(dx0, |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let z = (0..n_idx)
                .map(|_| Array1::from_shape_fn(dz, |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let spec = PhysicsSpec {
                sigma_w: vec![2.0; 2 * n],
                model_active: default_active_rows(&net),
                host: vec![MeasurementModel {
                    kind: MeasurementKind::HostFlowSelector,
                    cells: vec![0],
                    noise_var: vec![25.0],
                }],
                guests: vec![vec![speed_model(n), density_model(n)]],
            };
            Instance {
                net,
                spec,
                host_net,
                x0,
                z,
                pairs_ix: (0..n_pairs).map(|i| (i, i + 1)).collect(),
                dz,
            }
        }

        fn estimates(&self) -> Array2<f64> {
            let dim = 2 * self.net.n_cells();
            let mut m = Array2::zeros((self.x0.len(), dim));
            for idx in 0..self.x0.len() {
                let input = ndarray::concatenate![
                    ndarray::Axis(0),
                    self.x0[idx].view(),
                    self.z[idx].view()
                ];
                let row = input
                    .into_shape_with_order((1, self.host_net.input_dim()))
                    .unwrap();
                m.row_mut(idx)
                    .assign(&self.host_net.forward(&row).unwrap().row(0));
            }
            m
        }

        fn pairs(&self, meas: &[PairMeasurements]) -> Vec<PhysicsPair> {
            self.pairs_ix
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| PhysicsPair {
                    abs_step: a as u64,
                    pos_t: a,
                    pos_t1: b,
                    meas: meas[i].clone(),
                })
                .collect()
        }

        fn measurements(&self, rng: &mut ChaCha8Rng) -> Vec<PairMeasurements> {
            let n = self.net.n_cells();
            self.pairs_ix
                .iter()
                .map(|_| PairMeasurements {
                    host_u: vec![rng.gen_range(0.0..500.0)],
                    guest_u: vec![(0..2 * n).map(|_| rng.gen_range(0.0..40.0)).collect()],
                    guest_mask: vec![vec![true; 2 * n]],
                })
                .collect()
        }

        fn jacobians(&self) -> (Vec<Array2<f64>>, Vec<Vec<Array2<f64>>>) {
            let mut theta = Vec::with_capacity(self.x0.len());
            let mut z = Vec::with_capacity(self.x0.len());
            for idx in 0..self.x0.len() {
                let input = ndarray::concatenate![
                    ndarray::Axis(0),
                    self.x0[idx].view(),
                    self.z[idx].view()
                ];
                let (tj, in_jac) = self.host_net.output_jacobians(&input).unwrap();
                theta.push(tj);
                z.push(vec![in_jac
                    .slice(ndarray::s![.., self.x0[idx].len()..])
                    .to_owned()]);
            }
            (theta, z)
        }

        fn loss(&self, meas: &[PairMeasurements]) -> f64 {
            physics_loss(&self.net, &self.spec, &self.estimates(), &self.pairs(meas)).unwrap()
        }

        fn backend(&self, meas: &[PairMeasurements]) -> LocalPlaintextBackend {
            let n = self.net.n_cells();
            let est = self.estimates();
            let u_blocks = self
                .pairs_ix
                .iter()
                .enumerate()
                .map(|(i, &(a, _))| {
                    let rows = party_rows(
                        &self.spec.guests[0],
                        &est.row(a).to_vec(),
                        &meas[i].guest_u[0],
                        Some(&meas[i].guest_mask[0]),
                        n,
                    );
                    rows.u
                })
                .collect();
            LocalPlaintextBackend { u_blocks }
        }

        fn gradients(&self, meas: &[PairMeasurements], enforce: bool) -> Result<PhysicsGradients> {
            let (theta_jacs, z_jacs) = self.jacobians();
            let mut backend = self.backend(meas);
            physics_gradients(
                &self.net,
                &self.spec,
                &self.estimates(),
                &EstimateJacobians {
                    theta: &theta_jacs,
                    z: &z_jacs,
                },
                &self.pairs(meas),
                &mut [&mut backend],
                enforce,
            )
        }
    }

    #[test]
    fn exact_fit_gives_zero_loss_and_gradient_minimum() {
        // run the true CTM and feed its states as estimates with
        // measurements equal to h(y): the loss must vanish
        let inst = Instance::new(3, 3, 2);
        let net = &inst.net;
        let demand = |_: u64, _: usize| 700.0;
        let states = crate::ctm::simulate(
            net,
            crate::ctm::TrafficState::empty(net),
            &demand,
            4,
            0.0,
            0,
        );
        let n = net.n_cells();
        let mut estimates = Array2::zeros((4, 2 * n));
        for t in 0..4 {
            estimates
                .row_mut(t)
                .assign(&Array1::from_vec(states[t].to_state_vector(net, t as u64)));
        }
        let pairs: Vec<PhysicsPair> = (0..3)
            .map(|t| {
                let y_t = estimates.row(t).to_vec();
                let host_u = measure(&inst.spec.host[0], &y_t, n);
                let mut guest_u = measure(&inst.spec.guests[0][0], &y_t, n);
                guest_u.extend(measure(&inst.spec.guests[0][1], &y_t, n));
                PhysicsPair {
                    abs_step: t as u64,
                    pos_t: t,
                    pos_t1: t + 1,
                    meas: PairMeasurements {
                        host_u,
                        guest_u: vec![guest_u],
                        guest_mask: vec![vec![true; 2 * n]],
                    },
                }
            })
            .collect();
        let loss = physics_loss(net, &inst.spec, &estimates, &pairs).unwrap();
        assert!(loss.abs() < 1e-18, "exact fit loss {loss}");
    }

    #[test]
    fn scaling_process_precision_scales_model_term() {
        // with no measurement channels the loss is the model term alone;
        // scaling Σω⁻¹ by c scales it by exactly c
        let inst = Instance::new(5, 2, 2);
        let mut spec = inst.spec.clone();
        spec.host.clear();
        spec.guests = vec![vec![]];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let meas = inst.measurements(&mut rng);
        let est = inst.estimates();
        let base = physics_loss(&inst.net, &spec, &est, &inst.pairs(&meas)).unwrap();
        assert!(base > 0.0);
        let mut spec2 = spec.clone();
        for v in &mut spec2.sigma_w {
            *v /= 3.0; // Σω⁻¹ scaled by 3
        }
        let scaled = physics_loss(&inst.net, &spec2, &est, &inst.pairs(&meas)).unwrap();
        approx::assert_relative_eq!(scaled, 3.0 * base, max_relative = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4u64 {
            let mut inst = Instance::new(seed, 2 + (seed as usize % 3), 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
            let meas = inst.measurements(&mut rng);
            let grads = inst.gradients(&meas, false).unwrap();

            // θ gradient vs central differences
            let h = 1e-5;
            let mut max_rel = 0.0f64;
            let flat_count = inst.host_net.param_count();
            for pi in (0..flat_count).step_by(flat_count / 12 + 1) {
                let orig = get_flat_param(&inst.host_net, pi);
                set_flat_param(&mut inst.host_net, pi, orig + h);
                let lp = inst.loss(&meas);
                set_flat_param(&mut inst.host_net, pi, orig - h);
                let lm = inst.loss(&meas);
                set_flat_param(&mut inst.host_net, pi, orig);
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.theta[pi];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
            // z gradients vs central differences: per estimate row
            for idx in 0..inst.z.len() {
                for j in 0..inst.dz {
                    let orig = inst.z[idx][j];
                    inst.z[idx][j] = orig + h;
                    let lp = inst.loss(&meas);
                    inst.z[idx][j] = orig - h;
                    let lm = inst.loss(&meas);
                    inst.z[idx][j] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grads.z[0][(idx, j)];
                    let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(max_rel < 1e-4, "seed {seed}: max rel err {max_rel}");
        }
    }

    fn get_flat_param(net: &DenseNet, idx: usize) -> f64 {
        let mut offset = 0;
        for layer in &net.layers {
            if idx < offset + layer.weights.len() {
                let local = idx - offset;
                let cols = layer.weights.ncols();
                return layer.weights[(local / cols, local % cols)];
            }
            offset += layer.weights.len();
            if idx < offset + layer.biases.len() {
                return layer.biases[idx - offset];
            }
            offset += layer.biases.len();
        }
        panic!("index out of range");
    }

    fn set_flat_param(net: &mut DenseNet, idx: usize, value: f64) {
        let mut offset = 0;
        for layer in &mut net.layers {
            if idx < offset + layer.weights.len() {
                let local = idx - offset;
                let cols = layer.weights.ncols();
                layer.weights[(local / cols, local % cols)] = value;
                return;
            }
            offset += layer.weights.len();
            if idx < offset + layer.biases.len() {
                layer.biases[idx - offset] = value;
                return;
            }
            offset += layer.biases.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn decomposition_matches_monolithic_gradient() {
        // assembling term1 + term2 + term3 must equal the plain chain-rule
        // gradient where the guest residual (u − h) is used directly
        let inst = Instance::new(11, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let meas = inst.measurements(&mut rng);
        let split = inst.gradients(&meas, false).unwrap();

        // monolithic: fold the guest residual into the local cotangent
        let n = inst.net.n_cells();
        let dim = 2 * n;
        let p = inst.host_net.param_count();
        let estimates = inst.estimates();
        let (theta_jacs, _) = inst.jacobians();
        let mut theta = vec![0.0; p];
        for pair in &inst.pairs(&meas) {
            let y_t = estimates.row(pair.pos_t).to_vec();
            let y_t1 = estimates.row(pair.pos_t1);
            let g = crate::ctm::predict(&inst.net, &y_t, pair.abs_step);
            let step_jac = crate::ctm::step_jacobian(&inst.net, &y_t, pair.abs_step);
            let mut a = Array1::zeros(dim);
            for i in 0..dim {
                if inst.spec.model_active[i] {
                    a[i] = (y_t1[i] - g[i]) / inst.spec.sigma_w[i];
                }
            }
            let mut d_t: Array1<f64> = -step_jac.t().dot(&a);
            let host = party_rows(&inst.spec.host, &y_t, &pair.meas.host_u, None, n);
            let resid = Array1::from_iter(host.u.iter().zip(&host.h).map(|(u, h)| u - h));
            d_t = d_t - host.w.t().dot(&resid);
            let rows = party_rows(
                &inst.spec.guests[0],
                &y_t,
                &pair.meas.guest_u[0],
                Some(&pair.meas.guest_mask[0]),
                n,
            );
            let gresid = Array1::from_iter(rows.u.iter().zip(&rows.h).map(|(u, h)| u - h));
            d_t = d_t - rows.w.t().dot(&gresid);
            let part = d_t.dot(&theta_jacs[pair.pos_t]) + a.dot(&theta_jacs[pair.pos_t1]);
            for (acc, v) in theta.iter_mut().zip(part.iter()) {
                *acc += v;
            }
        }
        for (s, m) in split.theta.iter().zip(&theta) {
            let denom = s.abs().max(m.abs()).max(1e-9);
            assert!((s - m).abs() / denom < 1e-11, "{s} vs {m}");
        }
    }

    #[test]
    fn rank_guard_cases() {
        // 1 pair, 3 measurements, 9 independent query columns: generic rank
        // is 3 = dim, so the guard must refuse
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let theta = Array2::from_shape_fn((6, 7), |_| rng.gen_range(-1.0..1.0));
        let z = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        let plan = SecureQueryPlan {
            w_blocks: vec![w.clone()],
            theta_blocks: vec![&theta],
            z_blocks: vec![&z],
        };
        assert!(!rank_guard(&plan).is_ok());

        // all-zero query matrix: rank 0, any positive dimension passes
        let z0 = Array2::zeros((6, 2));
        let theta0 = Array2::zeros((6, 7));
        let plan0 = SecureQueryPlan {
            w_blocks: vec![Array2::zeros((3, 6))],
            theta_blocks: vec![&theta0],
            z_blocks: vec![&z0],
        };
        assert!(rank_guard(&plan0).is_ok());

        // many pairs, few θ columns: Σ m_t = 48 exceeds P + Σ rank(Wz)
        let theta_small = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let z_small = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        let mut w_blocks = Vec::new();
        let mut theta_blocks = Vec::new();
        let mut z_blocks = Vec::new();
        for _ in 0..16 {
            w_blocks.push(Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0)));
            theta_blocks.push(&theta_small);
            z_blocks.push(&z_small);
        }
        let plan_big = SecureQueryPlan {
            w_blocks,
            theta_blocks,
            z_blocks,
        };
        let check = rank_guard(&plan_big);
        assert!(check.is_ok(), "{check:?}");

        // enforcement is a typed error path
        let inst = Instance::new(19, 3, 1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(23);
        let meas = inst.measurements(&mut rng2);
        match inst.gradients(&meas, true) {
            Err(Error::RankRefusal(_)) => {}
            other => panic!("expected refusal for a single under-determined pair, got {other:?}"),
        }
    }
}
