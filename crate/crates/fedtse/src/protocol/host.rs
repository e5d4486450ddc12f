//! Host (municipal authority) state machine: owns the global model and its
//! own sub-model, samples batches, computes losses and sends each guest the
//! gradient of the loss with respect to that guest's outputs — nothing else.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctm::Network;
use crate::error::{Error, Result};
use crate::nn::DenseNet;
use crate::physloss::{self, PhysicsPair, PhysicsSpec, SecureTermBackend};
use crate::secure_ip::{BsgsSolver, FixedPointCodec};

use super::model::{
    concat_columns, party_seed, supervised_loss, take_rows, BatchSampler, Standardizer,
};
use super::{PartyId, ProtocolMessage, SyncPurpose};

/// Result of the host's first gradient pass in a round.
pub struct SplitStepResult {
    pub loss: f64,
    /// ∂L/∂z^k per guest, one row per batch index.
    pub guest_grads: Vec<Array2<f64>>,
}

/// One supervised host step: computes the batch loss at the current
/// parameters, extracts the guest output-gradients from the first backward
/// pass, then performs `host_q` local updates of the sub and global models
/// with the guest outputs held fixed. Shared verbatim by the centralized
/// baselines so that one round with one local update is bit-identical to a
/// centralized SGD step.
#[allow(clippy::too_many_arguments)]
pub fn host_supervised_step(
    sub: &mut DenseNet,
    global: &mut DenseNet,
    x0: &Array2<f64>,
    z_guests: &[Array2<f64>],
    labels: &Array2<f64>,
    n_cells: usize,
    alpha: f64,
    lambda: f64,
    eta: f64,
    host_q: usize,
) -> Result<SplitStepResult> {
    let dz0 = sub.output_dim();
    let mut first: Option<SplitStepResult> = None;
    for step in 0..host_q.max(1) {
        let sub_trace = sub.forward_trace(x0)?;
        let mut parts = vec![sub_trace.output().clone()];
        parts.extend(z_guests.iter().cloned());
        let input = concat_columns(&parts)?;
        let global_trace = global.forward_trace(&input)?;
        let (loss, cot) = supervised_loss(global_trace.output(), labels, n_cells, alpha)?;
        let mut g_grads = global.backward(&global_trace, &cot)?;
        if step == 0 {
            let mut guest_grads = Vec::with_capacity(z_guests.len());
            let mut offset = dz0;
            for z in z_guests {
                let dz = z.ncols();
                guest_grads.push(g_grads.input_grad.slice(s![.., offset..offset + dz]).to_owned());
                offset += dz;
            }
            first = Some(SplitStepResult { loss, guest_grads });
        }
        let z0_cot = g_grads.input_grad.slice(s![.., ..dz0]).to_owned();
        let mut s_grads = sub.backward(&sub_trace, &z0_cot)?;
        global.add_l2_gradient(&mut g_grads, lambda);
        sub.add_l2_gradient(&mut s_grads, lambda);
        global.sgd_update(&g_grads, eta)?;
        sub.sgd_update(&s_grads, eta)?;
    }
    Ok(first.expect("host_q >= 1"))
}

/// The training objective the host runs.
pub enum Objective {
    Supervised {
        /// Standardized labels for every time step.
        labels_norm: Array2<f64>,
        /// De-normalization for metric reporting.
        label_std: Standardizer,
        alpha: f64,
    },
    Physics(Box<PhysicsObjective>),
}

/// Everything the physics-informed host needs beyond the models.
pub struct PhysicsObjective {
    pub net: Network,
    pub spec: PhysicsSpec,
    /// Host detector measurements per time step.
    pub host_u: Array2<f64>,
    /// Absolute simulation step of record 0.
    pub step_offset: u64,
    pub codec: FixedPointCodec,
    pub bsgs: BsgsSolver,
    /// Fixed session key dimension (2N · batch pairs), zero padded.
    pub key_dim: usize,
    /// Fixed affine output map ŷ = base + scale ⊙ net_out, derived from the
    /// fundamental diagrams. Keeps density and flow blocks learning at
    /// comparable relative rates under plain gradient steps.
    pub out_base: Vec<f64>,
    pub out_scale: Vec<f64>,
}

impl PhysicsObjective {
    /// Applies the output map row-wise.
    pub fn map_outputs(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut out = raw.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.out_base[j] + self.out_scale[j] * *v;
            }
        }
        out
    }
}

pub struct HostState {
    pub sub: DenseNet,
    pub global: DenseNet,
    /// Standardized host features.
    x0: Array2<f64>,
    pub objective: Objective,
    n_cells: usize,
    lambda: f64,
    eta: f64,
    host_q: usize,
    n_guests: usize,
    sampler: BatchSampler,
    round: u64,
    pub config_hash: String,
}

impl HostState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sub: DenseNet,
        global: DenseNet,
        x0: Array2<f64>,
        objective: Objective,
        n_cells: usize,
        n_guests: usize,
        lambda: f64,
        eta: f64,
        host_q: usize,
        batch_size: usize,
        train_len: usize,
        seed: u64,
        config_hash: String,
    ) -> Result<Self> {
        // physics batches sample pair starts, so the pool shrinks by one
        let pool: Vec<usize> = match &objective {
            Objective::Supervised { .. } => (0..train_len).collect(),
            Objective::Physics(_) => (0..train_len.saturating_sub(1)).collect(),
        };
        let sampler = BatchSampler::new(
            pool,
            batch_size,
            ChaCha8Rng::seed_from_u64(party_seed(seed, "batches")),
        )?;
        Ok(HostState {
            sub,
            global,
            x0,
            objective,
            n_cells,
            lambda,
            eta,
            host_q,
            n_guests,
            sampler,
            round: 0,
            config_hash,
        })
    }

    pub fn party(&self) -> PartyId {
        PartyId::Host
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn is_physics(&self) -> bool {
        matches!(self.objective, Objective::Physics(_))
    }

    /// Starts a round: samples the batch and builds the sync message.
    pub fn begin_round(&mut self) -> (Vec<usize>, Vec<usize>, ProtocolMessage) {
        self.round += 1;
        match &self.objective {
            Objective::Supervised { .. } => {
                let indices = {
                    let mut b = self.sampler.next_batch();
                    b.sort_unstable();
                    b
                };
                let msg = ProtocolMessage::BatchSync {
                    round: self.round,
                    sender: PartyId::Host,
                    purpose: SyncPurpose::Train,
                    indices: indices.clone(),
                    pair_starts: Vec::new(),
                };
                (indices, Vec::new(), msg)
            }
            Objective::Physics(_) => {
                let mut pair_starts = self.sampler.next_batch();
                pair_starts.sort_unstable();
                let mut indices: Vec<usize> = pair_starts
                    .iter()
                    .flat_map(|&t| [t, t + 1])
                    .collect();
                indices.sort_unstable();
                indices.dedup();
                let msg = ProtocolMessage::BatchSync {
                    round: self.round,
                    sender: PartyId::Host,
                    purpose: SyncPurpose::Train,
                    indices: indices.clone(),
                    pair_starts: pair_starts.clone(),
                };
                (indices, pair_starts, msg)
            }
        }
    }

    /// Forward estimates for arbitrary indices (physical units in physics
    /// mode, normalized in supervised mode).
    pub fn predict(&self, indices: &[usize], z_guests: &[Array2<f64>]) -> Result<Array2<f64>> {
        let x0 = take_rows(&self.x0, indices);
        let z0 = self.sub.forward(&x0)?;
        let mut parts = vec![z0];
        parts.extend(z_guests.iter().cloned());
        let raw = self.global.forward(&concat_columns(&parts)?)?;
        Ok(match &self.objective {
            Objective::Physics(p) => p.map_outputs(&raw),
            _ => raw,
        })
    }

    /// Supervised round: computes gradients, applies host updates and
    /// returns the per-guest output gradients.
    pub fn supervised_round(
        &mut self,
        indices: &[usize],
        z_guests: &[Array2<f64>],
    ) -> Result<SplitStepResult> {
        let (labels_norm, alpha) = match &self.objective {
            Objective::Supervised {
                labels_norm, alpha, ..
            } => (labels_norm, *alpha),
            _ => return Err(Error::Protocol("not a supervised host".into())),
        };
        let x0 = take_rows(&self.x0, indices);
        let labels = take_rows(labels_norm, indices);
        host_supervised_step(
            &mut self.sub,
            &mut self.global,
            &x0,
            z_guests,
            &labels,
            self.n_cells,
            alpha,
            self.lambda,
            self.eta,
            self.host_q,
        )
    }

    /// Physics round. With the plaintext reference backend the full
    /// measurement residual folds into one batched backward pass (the
    /// algebraic identity behind the three-term split, checked against the
    /// column-decomposed path in tests). With the encrypted backend the
    /// composed Jacobian columns are materialized and each guest term comes
    /// back as secure inner products. Updates host parameters and returns
    /// per-index guest gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn physics_round(
        &mut self,
        indices: &[usize],
        pair_starts: &[usize],
        z_guests: &[Array2<f64>],
        guest_masks: &[Vec<Vec<bool>>],
        plain_values: Option<&[Vec<Vec<f64>>]>,
        backends: &mut [&mut dyn SecureTermBackend],
        grad_clip: Option<f64>,
    ) -> Result<Vec<Array2<f64>>> {
        if self.host_q != 1 {
            return Err(Error::Config(
                "physics mode supports host_q = 1 only".into(),
            ));
        }
        let x0 = take_rows(&self.x0, indices);
        let sub_trace = self.sub.forward_trace(&x0)?;
        let mut parts = vec![sub_trace.output().clone()];
        parts.extend(z_guests.iter().cloned());
        let input = concat_columns(&parts)?;
        let global_trace = self.global.forward_trace(&input)?;
        let estimates = match &self.objective {
            Objective::Physics(p) => p.map_outputs(global_trace.output()),
            _ => return Err(Error::Protocol("not a physics host".into())),
        };

        let pos_of_index: std::collections::HashMap<usize, usize> = indices
            .iter()
            .enumerate()
            .map(|(pos, &t)| (t, pos))
            .collect();
        let pair_pos: Vec<(usize, usize)> = pair_starts
            .iter()
            .map(|&t| (pos_of_index[&t], pos_of_index[&(t + 1)]))
            .collect();

        match plain_values {
            Some(values) => self.physics_round_plain(
                indices,
                pair_starts,
                &pair_pos,
                z_guests,
                guest_masks,
                values,
                &sub_trace,
                &global_trace,
                &input,
                &estimates,
                grad_clip,
            ),
            None => self.physics_round_columns(
                indices,
                pair_starts,
                &pair_pos,
                z_guests,
                guest_masks,
                &x0,
                &input,
                &estimates,
                backends,
                grad_clip,
            ),
        }
    }

    /// Plaintext path: monolithic cotangent assembly plus batched backward.
    #[allow(clippy::too_many_arguments)]
    fn physics_round_plain(
        &mut self,
        indices: &[usize],
        pair_starts: &[usize],
        pair_pos: &[(usize, usize)],
        z_guests: &[Array2<f64>],
        guest_masks: &[Vec<Vec<bool>>],
        plain_values: &[Vec<Vec<f64>>],
        sub_trace: &crate::nn::ForwardTrace,
        global_trace: &crate::nn::ForwardTrace,
        input: &Array2<f64>,
        estimates: &Array2<f64>,
        grad_clip: Option<f64>,
    ) -> Result<Vec<Array2<f64>>> {
        let phys = match &self.objective {
            Objective::Physics(p) => p,
            _ => return Err(Error::Protocol("not a physics host".into())),
        };
        let n = self.n_cells;
        let dz0 = self.sub.output_dim();

        // rank guard: same refusal behavior as the secure path, evaluated on
        // the would-be query structure
        self.physics_rank_guard(pair_pos, guest_masks, input, estimates)?;
        let dim = 2 * n;

        let mut cot: Array2<f64> = Array2::zeros((indices.len(), dim));
        for (pi, (&t, &(pos_t, pos_t1))) in pair_starts.iter().zip(pair_pos).enumerate() {
            let abs_step = phys.step_offset + t as u64;
            let y_t = estimates.row(pos_t).to_vec();
            let y_t1 = estimates.row(pos_t1);
            let g = crate::ctm::predict(&phys.net, &y_t, abs_step);
            let step_jac = crate::ctm::step_jacobian(&phys.net, &y_t, abs_step);
            let mut a = ndarray::Array1::zeros(dim);
            for i in 0..dim {
                if phys.spec.model_active[i] {
                    a[i] = (y_t1[i] - g[i]) / phys.spec.sigma_w[i];
                }
            }
            {
                let mut row1 = cot.row_mut(pos_t1);
                row1 += &a;
            }
            let mut d_t = -step_jac.t().dot(&a);
            let host_rows = physloss::party_rows(
                &phys.spec.host,
                &y_t,
                &phys.host_u.row(t).to_vec(),
                None,
                n,
            );
            let resid = ndarray::Array1::from_iter(
                host_rows.u.iter().zip(&host_rows.h).map(|(u, h)| u - h),
            );
            d_t = d_t - host_rows.w.t().dot(&resid);
            for (k, models) in phys.spec.guests.iter().enumerate() {
                let rows = physloss::party_rows(
                    models,
                    &y_t,
                    &plain_values[k][pi],
                    Some(&guest_masks[k][pi]),
                    n,
                );
                let gresid =
                    ndarray::Array1::from_iter(rows.u.iter().zip(&rows.h).map(|(u, h)| u - h));
                d_t = d_t - rows.w.t().dot(&gresid);
            }
            let mut row = cot.row_mut(pos_t);
            row += &d_t;
        }
        // chain through the affine output map: ∂ŷ/∂raw = diag(scale)
        for mut row in cot.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= phys.out_scale[j];
            }
        }

        let mut g_grads = self.global.backward(global_trace, &cot)?;
        let z0_cot = g_grads.input_grad.slice(s![.., ..dz0]).to_owned();
        let mut s_grads = self.sub.backward(sub_trace, &z0_cot)?;
        let mut guest_grads: Vec<Array2<f64>> = {
            let mut out = Vec::with_capacity(self.n_guests);
            let mut offset = dz0;
            for z in z_guests {
                let dz = z.ncols();
                out.push(g_grads.input_grad.slice(s![.., offset..offset + dz]).to_owned());
                offset += dz;
            }
            out
        };

        if let Some(clip) = grad_clip {
            let mut sq: f64 = 0.0;
            for g in s_grads.weight_grads.iter().chain(&g_grads.weight_grads) {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
            for g in s_grads.bias_grads.iter().chain(&g_grads.bias_grads) {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
            for zg in &guest_grads {
                sq += zg.iter().map(|v| v * v).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > clip {
                let scale = clip / norm;
                s_grads.scale(scale);
                g_grads.scale(scale);
                for zg in &mut guest_grads {
                    zg.mapv_inplace(|v| v * scale);
                }
            }
        }

        self.sub.add_l2_gradient(&mut s_grads, self.lambda);
        self.global.add_l2_gradient(&mut g_grads, self.lambda);
        self.sub.sgd_update(&s_grads, self.eta)?;
        self.global.sgd_update(&g_grads, self.eta)?;
        Ok(guest_grads)
    }

    /// The rank-condition defense, shared by both physics paths.
    fn physics_rank_guard(
        &self,
        pair_pos: &[(usize, usize)],
        guest_masks: &[Vec<Vec<bool>>],
        input: &Array2<f64>,
        estimates: &Array2<f64>,
    ) -> Result<()> {
        let phys = match &self.objective {
            Objective::Physics(p) => p,
            _ => return Err(Error::Protocol("not a physics host".into())),
        };
        let n = self.n_cells;
        let dz0 = self.sub.output_dim();
        let p_total = self.sub.param_count() + self.global.param_count();
        // z-Jacobians at pair starts, through the global model
        let mut z_jacs: Vec<Vec<Array2<f64>>> = Vec::with_capacity(pair_pos.len());
        for &(pos_t, _) in pair_pos {
            let mut in_jac = self.global.input_jacobian(&input.row(pos_t).to_owned())?;
            for (i, &sc) in phys.out_scale.iter().enumerate() {
                in_jac.row_mut(i).map_inplace(|v| *v *= sc);
            }
            let mut per_guest = Vec::with_capacity(self.n_guests);
            let mut offset = dz0;
            for k in 0..self.n_guests {
                let dz = (in_jac.ncols() - dz0) / self.n_guests.max(1);
                per_guest.push(in_jac.slice(s![.., offset..offset + dz]).to_owned());
                offset += dz;
                let _ = k;
            }
            z_jacs.push(per_guest);
        }
        for (k, models) in phys.spec.guests.iter().enumerate() {
            let mut w_blocks = Vec::with_capacity(pair_pos.len());
            let mut theta_blocks = Vec::with_capacity(pair_pos.len());
            let mut z_blocks = Vec::with_capacity(pair_pos.len());
            let zero_u = vec![0.0; 2 * n];
            for (pi, &(pos_t, _)) in pair_pos.iter().enumerate() {
                let rows = physloss::party_rows(
                    models,
                    &estimates.row(pos_t).to_vec(),
                    &zero_u,
                    Some(&guest_masks[k][pi]),
                    n,
                );
                w_blocks.push(rows.w);
                z_blocks.push(&z_jacs[pi][k]);
                theta_blocks.push(&z_jacs[pi][k]); // placeholder, θ rank capped below
            }
            // the θ-column rank contribution is min(P, Σ rank W_t): reuse the
            // guard but correct its θ cap to the parameter count
            let plan = physloss::SecureQueryPlan {
                w_blocks,
                theta_blocks,
                z_blocks,
            };
            if let physloss::RankCheck::Refusal { dim, rank_bound } =
                physloss::rank_guard_with_theta_cols(&plan, p_total)
            {
                return Err(Error::RankRefusal(format!(
                    "guest {k}: batch measurement dimension {dim} does not exceed query rank bound {rank_bound}"
                )));
            }
        }
        Ok(())
    }

    /// Encrypted path: materialized Jacobian columns through
    /// `physics_gradients`.
    #[allow(clippy::too_many_arguments)]
    fn physics_round_columns(
        &mut self,
        indices: &[usize],
        pair_starts: &[usize],
        pair_pos: &[(usize, usize)],
        z_guests: &[Array2<f64>],
        guest_masks: &[Vec<Vec<bool>>],
        x0: &Array2<f64>,
        input: &Array2<f64>,
        estimates: &Array2<f64>,
        backends: &mut [&mut dyn SecureTermBackend],
        grad_clip: Option<f64>,
    ) -> Result<Vec<Array2<f64>>> {
        let phys = match &self.objective {
            Objective::Physics(p) => p,
            _ => return Err(Error::Protocol("not a physics host".into())),
        };
        let n = self.n_cells;
        let dim = 2 * n;
        let dz0 = self.sub.output_dim();
        let p_sub = self.sub.param_count();
        let p_glob = self.global.param_count();
        let mut theta_jacs: Vec<Array2<f64>> = Vec::with_capacity(indices.len());
        let mut z_jacs: Vec<Vec<Array2<f64>>> = Vec::with_capacity(indices.len());
        let out_scale = phys.out_scale.clone();
        for pos in 0..indices.len() {
            let x0_row = x0.row(pos).to_owned();
            let (sub_jac, _) = self.sub.output_jacobians(&x0_row)?;
            let in_row = input.row(pos).to_owned();
            let (glob_jac, mut in_jac) = self.global.output_jacobians(&in_row)?;
            let mut theta = Array2::zeros((dim, p_sub + p_glob));
            let through_sub = in_jac.slice(s![.., ..dz0]).dot(&sub_jac);
            theta.slice_mut(s![.., ..p_sub]).assign(&through_sub);
            theta.slice_mut(s![.., p_sub..]).assign(&glob_jac);
            // ∂ŷ/∂(θ, z) = diag(scale)·∂raw/∂(θ, z)
            for (i, &sc) in out_scale.iter().enumerate() {
                theta.row_mut(i).map_inplace(|v| *v *= sc);
                in_jac.row_mut(i).map_inplace(|v| *v *= sc);
            }
            theta_jacs.push(theta);
            let mut per_guest = Vec::with_capacity(self.n_guests);
            let mut offset = dz0;
            for z in z_guests {
                let dz = z.ncols();
                per_guest.push(in_jac.slice(s![.., offset..offset + dz]).to_owned());
                offset += dz;
            }
            z_jacs.push(per_guest);
        }

        let mut pairs = Vec::with_capacity(pair_starts.len());
        for (pi, (&t, &(pos_t, pos_t1))) in pair_starts.iter().zip(pair_pos).enumerate() {
            let guest_u = vec![vec![0.0; dim]; self.n_guests]; // values live guest-side
            let guest_mask = (0..self.n_guests)
                .map(|k| guest_masks[k][pi].clone())
                .collect();
            pairs.push(PhysicsPair {
                abs_step: phys.step_offset + t as u64,
                pos_t,
                pos_t1,
                meas: physloss::PairMeasurements {
                    host_u: phys.host_u.row(t).to_vec(),
                    guest_u,
                    guest_mask,
                },
            });
        }

        let mut grads = physloss::physics_gradients(
            &phys.net,
            &phys.spec,
            estimates,
            &physloss::EstimateJacobians {
                theta: &theta_jacs,
                z: &z_jacs,
            },
            &pairs,
            backends,
            true,
        )?;

        if let Some(clip) = grad_clip {
            let mut sq: f64 = grads.theta.iter().map(|v| v * v).sum();
            for zg in &grads.z {
                sq += zg.iter().map(|v| v * v).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > clip {
                let scale = clip / norm;
                for v in &mut grads.theta {
                    *v *= scale;
                }
                for zg in &mut grads.z {
                    zg.mapv_inplace(|v| v * scale);
                }
            }
        }

        self.apply_flat_host_gradient(&grads.theta)?;
        Ok(grads.z)
    }

    fn apply_flat_host_gradient(&mut self, theta: &[f64]) -> Result<()> {
        let p_sub = self.sub.param_count();
        let mut sub_grads = self.sub.unflatten_gradient(&theta[..p_sub])?;
        let mut glob_grads = self.global.unflatten_gradient(&theta[p_sub..])?;
        self.sub.add_l2_gradient(&mut sub_grads, self.lambda);
        self.global.add_l2_gradient(&mut glob_grads, self.lambda);
        self.sub.sgd_update(&sub_grads, self.eta)?;
        self.global.sgd_update(&glob_grads, self.eta)?;
        Ok(())
    }

    /// Host-side validation score. Supervised: density RMSE in physical
    /// units against its own labels. Physics: the host-computable loss
    /// surrogate (model consistency plus its own measurement term) per pair.
    pub fn validation_score(
        &self,
        val_indices: &[usize],
        estimates: &Array2<f64>,
    ) -> Result<ValScore> {
        match &self.objective {
            Objective::Supervised {
                labels_norm,
                label_std,
                ..
            } => {
                let n = self.n_cells;
                let mut dens_se = 0.0;
                let mut flow_se = 0.0;
                for (row, &idx) in estimates.rows().into_iter().zip(val_indices) {
                    let pred = label_std.inverse_row(&row.to_vec());
                    let truth = label_std.inverse_row(&labels_norm.row(idx).to_vec());
                    for j in 0..n {
                        dens_se += (pred[j] - truth[j]).powi(2);
                        flow_se += (pred[n + j] - truth[n + j]).powi(2);
                    }
                }
                let count = (val_indices.len() * n).max(1) as f64;
                let dens = (dens_se / count).sqrt();
                let flow = (flow_se / count).sqrt();
                Ok(ValScore {
                    score: dens,
                    density_rmse: Some(dens),
                    flow_rmse: Some(flow),
                })
            }
            Objective::Physics(phys) => {
                // consecutive pairs within the validation slice
                let mut total = 0.0;
                let mut pairs = 0usize;
                let dim = 2 * self.n_cells;
                for w in 0..val_indices.len().saturating_sub(1) {
                    let (t, t1) = (val_indices[w], val_indices[w + 1]);
                    if t1 != t + 1 {
                        continue;
                    }
                    let y_t = estimates.row(w).to_vec();
                    let y_t1 = estimates.row(w + 1).to_vec();
                    let g = crate::ctm::predict(&phys.net, &y_t, phys.step_offset + t as u64);
                    for i in 0..dim {
                        if phys.spec.model_active[i] {
                            let r = y_t1[i] - g[i];
                            total += 0.5 * r * r / phys.spec.sigma_w[i];
                        }
                    }
                    let host = physloss::party_rows(
                        &phys.spec.host,
                        &y_t,
                        &phys.host_u.row(t).to_vec(),
                        None,
                        self.n_cells,
                    );
                    for i in 0..host.u.len() {
                        let r = host.u[i] - host.h[i];
                        total += 0.5 * r * r / host.var[i];
                    }
                    pairs += 1;
                }
                Ok(ValScore {
                    score: total / pairs.max(1) as f64,
                    density_rmse: None,
                    flow_rmse: None,
                })
            }
        }
    }
}

/// Host-computable validation outcome for one evaluation pass.
#[derive(Debug, Clone, Copy)]
pub struct ValScore {
    /// The early-stopping criterion (density RMSE or physics surrogate).
    pub score: f64,
    pub density_rmse: Option<f64>,
    pub flow_rmse: Option<f64>,
}

/// Channel-backed secure backend for the encrypted path: sends quantized
/// query columns, receives a ciphertext and functional keys, decrypts each
/// column sum by bounded discrete log.
pub struct IpeChannelBackend<'a> {
    pub channel: &'a mut dyn crate::transport::Channel,
    pub round: u64,
    pub codec: FixedPointCodec,
    pub bsgs: &'a BsgsSolver,
    pub key_dim: usize,
}

impl<'a> SecureTermBackend for IpeChannelBackend<'a> {
    fn inner_products(
        &mut self,
        plan: &physloss::SecureQueryPlan,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        use super::guest::decode_u64;
        let dim = plan.stacked_dim();
        let scale = self.codec.scale();
        // each column is normalized by its sup norm before quantization and
        // the decrypted value is rescaled, which keeps the recovered
        // exponents inside the discrete-log window regardless of Jacobian
        // magnitudes
        let quantize_col = |col: &[f64]| -> (Vec<i64>, f64) {
            let kappa = col.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            let q = col.iter().map(|&v| (v / kappa * scale).round() as i64).collect();
            (q, kappa)
        };

        // materialize the stacked query columns from the plan factors
        let mut theta_cols: Vec<Vec<i64>> = Vec::with_capacity(plan.theta_cols());
        let mut theta_kappa: Vec<f64> = Vec::with_capacity(plan.theta_cols());
        for j in 0..plan.theta_cols() {
            let mut col = Vec::with_capacity(dim);
            for (w, y) in plan.w_blocks.iter().zip(&plan.theta_blocks) {
                let yj = y.column(j);
                col.extend(w.dot(&yj).into_iter());
            }
            let (q, kappa) = quantize_col(&col);
            theta_cols.push(q);
            theta_kappa.push(kappa);
        }
        let mut z_cols: Vec<Vec<i64>> = Vec::new();
        let mut z_kappa: Vec<f64> = Vec::new();
        for (pi, (w, zb)) in plan.w_blocks.iter().zip(&plan.z_blocks).enumerate() {
            for j in 0..zb.ncols() {
                let mut col = vec![0.0; dim];
                let mut offset = 0;
                for (pj, wj) in plan.w_blocks.iter().enumerate() {
                    if pj == pi {
                        let vals = w.dot(&zb.column(j));
                        col[offset..offset + vals.len()].copy_from_slice(vals.as_slice().unwrap());
                    }
                    offset += wj.nrows();
                }
                let (q, kappa) = quantize_col(&col);
                z_cols.push(q);
                z_kappa.push(kappa);
            }
        }

        self.channel.send(&ProtocolMessage::IpQueries {
            round: self.round,
            sender: PartyId::Host,
            theta_cols: theta_cols.clone(),
            z_cols: z_cols.clone(),
        })?;
        let ct_msg = self.channel.recv()?;
        let (c0, c) = match ct_msg {
            ProtocolMessage::IpCiphertext { c0, c, .. } => (decode_u64(&c0)?, c),
            ProtocolMessage::Refusal { reason, .. } => {
                return Err(Error::RankRefusal(reason));
            }
            other => {
                return Err(Error::Protocol(format!(
                    "expected ciphertext, got '{}'",
                    other.type_name()
                )))
            }
        };
        let keys_msg = self.channel.recv()?;
        let (theta_keys, z_keys) = match keys_msg {
            ProtocolMessage::IpKeys {
                theta_keys, z_keys, ..
            } => (theta_keys, z_keys),
            other => {
                return Err(Error::Protocol(format!(
                    "expected functional keys, got '{}'",
                    other.type_name()
                )))
            }
        };
        if theta_keys.len() != theta_cols.len() || z_keys.len() != z_cols.len() {
            return Err(Error::Protocol("key count mismatch".into()));
        }
        let ciphertext = crate::secure_ip::Ciphertext {
            c0,
            c: c.iter().map(|s| decode_u64(s)).collect::<Result<Vec<_>>>()?,
        };
        if ciphertext.c.len() != self.key_dim {
            return Err(Error::Protocol(format!(
                "ciphertext dimension {} does not match the session key {}",
                ciphertext.c.len(),
                self.key_dim
            )));
        }

        let dequant = scale * scale;
        let decrypt_col = |col: &Vec<i64>, key_s: &String, kappa: f64| -> Result<f64> {
            let mut padded = col.clone();
            padded.resize(self.key_dim, 0);
            let sk_a = decode_u64(key_s)?;
            let ip = crate::secure_ip::decrypt(&ciphertext, sk_a, &padded, self.bsgs)?;
            Ok(ip as f64 / dequant * kappa)
        };
        let mut theta_vals = Vec::with_capacity(theta_cols.len());
        for ((col, key), &kappa) in theta_cols.iter().zip(&theta_keys).zip(&theta_kappa) {
            theta_vals.push(decrypt_col(col, key, kappa)?);
        }
        let mut z_vals: Vec<Vec<f64>> = Vec::with_capacity(plan.w_blocks.len());
        let dz = plan.z_cols();
        for pi in 0..plan.w_blocks.len() {
            let mut vals = Vec::with_capacity(dz);
            for j in 0..dz {
                let flat = pi * dz + j;
                vals.push(decrypt_col(&z_cols[flat], &z_keys[flat], z_kappa[flat])?);
            }
            z_vals.push(vals);
        }
        Ok((theta_vals, z_vals))
    }
}
