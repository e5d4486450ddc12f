//! The training driver: runs the host loop over any transport, the guest
//! loop for remote parties, and the centralized trainer used by the
//! no-protocol baselines. One communication round with a single local update
//! is arithmetically identical between the federated and centralized paths.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctm::Network;
use crate::error::{Error, Result};
use crate::physloss::{MeasurementKind, MeasurementModel, PhysicsSpec, SecureTermBackend};
use crate::scenario::{Dataset, ScenarioConfig, SplitView};
use crate::secure_ip::{group, BsgsSolver, FixedPointCodec};
use crate::transport::Channel;

use super::guest::{decode_u64, GuestMode, GuestState};
use super::host::{
    host_supervised_step, HostState, IpeChannelBackend, Objective, PhysicsObjective, ValScore,
};
use super::model::{
    guest_features, host_features, labels_matrix, party_seed, take_rows,BatchSampler,
    ComposedModel, ModelConfig, Standardizer,
};
use super::{PartyId, ProtocolMessage, SyncPurpose};

/// Training hyperparameters shared across methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta_host: f64,
    pub eta_guest: f64,
    pub batch_size: usize,
    /// Guest local updates per communication round.
    pub q: usize,
    /// Host local updates per round (physics mode requires 1).
    pub host_q: usize,
    pub lambda: f64,
    /// Flow-term weight in the supervised loss.
    pub alpha: f64,
    pub max_rounds: usize,
    /// Early-stopping patience, counted in evaluations.
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Secure-term backend for physics mode: plaintext reference or IPE.
    pub backend_ipe: bool,
    pub codec_scale_bits: u32,
    pub codec_bound: f64,
    pub bsgs_bound: i64,
    pub record_payloads: bool,
    /// Optional density-RMSE target for rounds-to-threshold reporting.
    pub target_density_rmse: Option<f64>,
    /// Global gradient-norm clip for physics-mode updates (tames the stiff
    /// low-density region of the speed measurement).
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta_host: 3e-4,
            eta_guest: 3e-4,
            batch_size: 128,
            q: 1,
            host_q: 1,
            lambda: 1e-4,
            alpha: 1.0,
            max_rounds: 1000,
            patience: 20,
            eval_every: 1,
            seed: 0,
            model: ModelConfig::default(),
            backend_ipe: false,
            codec_scale_bits: 10,
            codec_bound: 256.0,
            bsgs_bound: 1 << 26,
            record_payloads: false,
            target_density_rmse: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q < 1 {
            return Err(Error::Config("q must be >= 1".into()));
        }
        if self.host_q < 1 {
            return Err(Error::Config("host_q must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.eta_host <= 0.0 || self.eta_guest <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// One evaluation record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoundMetric {
    pub round: u64,
    /// The early-stopping score (validation density RMSE, or the physics
    /// surrogate when labels are absent).
    pub score: f64,
    pub density_rmse: Option<f64>,
    pub flow_rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<RoundMetric>,
    pub rounds_run: u64,
    pub converged: bool,
    /// First communication round whose validation density RMSE reached the
    /// configured target.
    pub rounds_to_threshold: Option<u64>,
}

/// Runs the host side of a training session over the given guest channels.
pub fn run_host_training(
    host: &mut HostState,
    channels: &mut [Box<dyn Channel>],
    cfg: &TrainConfig,
    val: SplitView,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_guests = channels.len();
    // handshake: config digests must agree; IPE guests publish their keys
    for chan in channels.iter_mut() {
        chan.send(&ProtocolMessage::Hello {
            round: 0,
            sender: PartyId::Host,
            config_hash: host.config_hash.clone(),
        })?;
        match chan.recv()? {
            ProtocolMessage::Hello { config_hash, .. } => {
                if config_hash != host.config_hash {
                    return Err(Error::Config(format!(
                        "guest config hash {config_hash} does not match host {}",
                        host.config_hash
                    )));
                }
            }
            other => {
                return Err(Error::Protocol(format!(
                    "expected hello, got '{}'",
                    other.type_name()
                )))
            }
        }
        if host.is_physics() && cfg.backend_ipe {
            match chan.recv()? {
                ProtocolMessage::IpPublicKey { key, .. } => {
                    for k in &key {
                        let h = decode_u64(k)?;
                        if group::pow(h, group::SUBGROUP_ORDER) != 1 {
                            return Err(Error::Protocol(
                                "public key element outside the subgroup".into(),
                            ));
                        }
                    }
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "expected the guest's public key, got '{}'",
                        other.type_name()
                    )))
                }
            }
        }
    }

    let val_indices: Vec<usize> = val.indices().collect();
    let mut outcome = TrainOutcome::default();
    let mut best = f64::INFINITY;
    let mut evals_since_best = 0usize;
    let bsgs = if host.is_physics() && cfg.backend_ipe {
        Some(BsgsSolver::new(cfg.bsgs_bound)?)
    } else {
        None
    };

    for _ in 0..cfg.max_rounds {
        let (indices, pair_starts, sync) = host.begin_round();
        let round = host.round();
        for chan in channels.iter_mut() {
            chan.send(&sync)?;
        }
        let mut z_guests = Vec::with_capacity(n_guests);
        let mut masks: Vec<Vec<Vec<bool>>> = Vec::with_capacity(n_guests);
        let mut plain_values: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_guests);
        for chan in channels.iter_mut() {
            let z = expect_sub_output(chan, round, indices.len())?;
            z_guests.push(z);
            if host.is_physics() {
                match chan.recv()? {
                    ProtocolMessage::Coverage { mask, .. } => masks.push(mask),
                    other => {
                        return Err(Error::Protocol(format!(
                            "expected coverage, got '{}'",
                            other.type_name()
                        )))
                    }
                }
                if !cfg.backend_ipe {
                    match chan.recv()? {
                        ProtocolMessage::PlainMeasurements { values, .. } => {
                            plain_values.push(values)
                        }
                        other => {
                            return Err(Error::Protocol(format!(
                                "expected plaintext measurements, got '{}'",
                                other.type_name()
                            )))
                        }
                    }
                }
            }
        }

        if host.is_physics() {
            let guest_grads = if cfg.backend_ipe {
                let (codec, key_dim) = match &host.objective {
                    Objective::Physics(p) => (p.codec.clone(), p.key_dim),
                    _ => unreachable!(),
                };
                let mut backends: Vec<IpeChannelBackend> = channels
                    .iter_mut()
                    .map(|chan| IpeChannelBackend {
                        channel: chan.as_mut(),
                        round,
                        codec: codec.clone(),
                        bsgs: bsgs.as_ref().expect("solver built"),
                        key_dim,
                    })
                    .collect();
                let mut refs: Vec<&mut dyn SecureTermBackend> = backends
                    .iter_mut()
                    .map(|b| b as &mut dyn SecureTermBackend)
                    .collect();
                host.physics_round(
                    &indices,
                    &pair_starts,
                    &z_guests,
                    &masks,
                    None,
                    &mut refs,
                    cfg.grad_clip,
                )?
            } else {
                host.physics_round(
                    &indices,
                    &pair_starts,
                    &z_guests,
                    &masks,
                    Some(&plain_values),
                    &mut [],
                    cfg.grad_clip,
                )?
            };
            for (chan, grads) in channels.iter_mut().zip(&guest_grads) {
                chan.send(&ProtocolMessage::OutputGrad {
                    round,
                    sender: PartyId::Host,
                    grads: grads.rows().into_iter().map(|r| r.to_vec()).collect(),
                })?;
            }
        } else {
            let step = host.supervised_round(&indices, &z_guests)?;
            for (chan, grads) in channels.iter_mut().zip(&step.guest_grads) {
                chan.send(&ProtocolMessage::OutputGrad {
                    round,
                    sender: PartyId::Host,
                    grads: grads.rows().into_iter().map(|r| r.to_vec()).collect(),
                })?;
            }
        }
        outcome.rounds_run = round;

        if round % cfg.eval_every as u64 == 0 {
            let score = evaluate_over_channels(host, channels, &val_indices)?;
            let metric = RoundMetric {
                round,
                score: score.score,
                density_rmse: score.density_rmse,
                flow_rmse: score.flow_rmse,
            };
            outcome.history.push(metric);
            if let (Some(target), Some(dens)) = (cfg.target_density_rmse, score.density_rmse) {
                if outcome.rounds_to_threshold.is_none() && dens <= target {
                    outcome.rounds_to_threshold = Some(round);
                }
            }
            if score.score < best {
                best = score.score;
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= cfg.patience {
                    outcome.converged = true;
                    break;
                }
            }
        }
    }

    Ok(outcome)
}

/// Tells every guest the session is over. Callers send this after any
/// post-training inference passes.
pub fn finish_session(channels: &mut [Box<dyn Channel>], round: u64) -> Result<()> {
    for chan in channels.iter_mut() {
        chan.send(&ProtocolMessage::Finished {
            round,
            sender: PartyId::Host,
        })?;
    }
    Ok(())
}

fn expect_sub_output(
    chan: &mut Box<dyn Channel>,
    round: u64,
    expected_len: usize,
) -> Result<Array2<f64>> {
    match chan.recv()? {
        ProtocolMessage::SubOutput { outputs, round: r, .. } => {
            if r != round {
                return Err(Error::Protocol(format!(
                    "sub-output for round {r}, expected {round}"
                )));
            }
            if outputs.len() != expected_len {
                return Err(Error::Protocol("sub-output count mismatch".into()));
            }
            let dz = outputs.first().map(|v| v.len()).unwrap_or(0);
            let mut z = Array2::zeros((outputs.len(), dz));
            for (i, row) in outputs.iter().enumerate() {
                if row.len() != dz {
                    return Err(Error::Dimension("ragged sub-output".into()));
                }
                z.row_mut(i).assign(&ndarray::Array1::from_vec(row.clone()));
            }
            Ok(z)
        }
        other => Err(Error::Protocol(format!(
            "expected sub-output, got '{}'",
            other.type_name()
        ))),
    }
}

/// Runs an evaluation sync over the channels and scores the estimates.
pub fn evaluate_over_channels(
    host: &HostState,
    channels: &mut [Box<dyn Channel>],
    val_indices: &[usize],
) -> Result<ValScore> {
    let sync = ProtocolMessage::BatchSync {
        round: host.round(),
        sender: PartyId::Host,
        purpose: SyncPurpose::Eval,
        indices: val_indices.to_vec(),
        pair_starts: Vec::new(),
    };
    let mut z_guests = Vec::with_capacity(channels.len());
    for chan in channels.iter_mut() {
        chan.send(&sync)?;
        z_guests.push(expect_sub_output(chan, host.round(), val_indices.len())?);
    }
    let estimates = host.predict(val_indices, &z_guests)?;
    host.validation_score(val_indices, &estimates)
}

/// Protocol inference over channels: estimates for arbitrary indices (used
/// for test-set metrics after training).
pub fn predict_over_channels(
    host: &HostState,
    channels: &mut [Box<dyn Channel>],
    indices: &[usize],
) -> Result<Array2<f64>> {
    let sync = ProtocolMessage::BatchSync {
        round: host.round(),
        sender: PartyId::Host,
        purpose: SyncPurpose::Eval,
        indices: indices.to_vec(),
        pair_starts: Vec::new(),
    };
    let mut z_guests = Vec::with_capacity(channels.len());
    for chan in channels.iter_mut() {
        chan.send(&sync)?;
        z_guests.push(expect_sub_output(chan, host.round(), indices.len())?);
    }
    host.predict(indices, &z_guests)
}

/// Which measurement channels a physics guest contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysicsVariant {
    /// Speed and sampled density.
    Full,
    /// Speed only.
    SpeedOnly,
    /// Sampled density only.
    DensityOnly,
}

/// Builds the diagonal noise model for the physics loss from the scenario's
/// configured noise levels (the "calibrated a priori" assumption).
pub fn calibrate_physics_spec(
    net: &Network,
    scenario: &ScenarioConfig,
    variant: PhysicsVariant,
    n_guests: usize,
) -> PhysicsSpec {
    let n = net.n_cells();
    let v_f_max = net
        .cells()
        .iter()
        .map(|c| c.fd.free_flow_speed)
        .fold(0.0f64, f64::max);
    let k_ref = net
        .cells()
        .iter()
        .map(|c| c.fd.jam_density)
        .fold(0.0f64, f64::max)
        / 4.0;
    let sigma_k = scenario.process_noise.max(0.05);
    let mut sigma_w = vec![sigma_k * sigma_k; n];
    sigma_w.extend(vec![(v_f_max * sigma_k).powi(2); n]);

    let detector_cells: Vec<usize> = scenario
        .detector_cells
        .iter()
        .map(|id| net.cell_index(id).expect("validated"))
        .collect();
    let dt_h = net.dt_h();
    let flow_var = ((scenario.loop_noise.max(0.05)) / dt_h).powi(2);
    let host = vec![MeasurementModel {
        kind: MeasurementKind::HostFlowSelector,
        noise_var: vec![flow_var; detector_cells.len()],
        cells: detector_cells,
    }];

    let mut guests = Vec::with_capacity(n_guests);
    for (g, &p) in scenario.penetrations.iter().enumerate().take(n_guests) {
        let dx_min = net
            .cells()
            .iter()
            .map(|c| c.length_km)
            .fold(f64::INFINITY, f64::min);
        let speed_var = (scenario.speed_noise * v_f_max / 2.0).powi(2) + 1.0;
        let thinning_var = k_ref * (1.0 - p) / (p * dx_min);
        let dens_var = thinning_var + (scenario.density_noise * k_ref).powi(2) + 1.0;
        let mut models = Vec::new();
        if variant != PhysicsVariant::DensityOnly {
            models.push(MeasurementModel {
                kind: MeasurementKind::GuestSpeed,
                cells: (0..n).collect(),
                noise_var: vec![speed_var; n],
            });
        }
        if variant != PhysicsVariant::SpeedOnly {
            models.push(MeasurementModel {
                kind: MeasurementKind::GuestDensity,
                cells: (0..n).collect(),
                noise_var: vec![dens_var; n],
            });
        }
        guests.push(models);
        let _ = g;
    }

    PhysicsSpec {
        sigma_w,
        model_active: crate::physloss::default_active_rows(net),
        host,
        guests,
    }
}

/// A fully wired in-process training session.
pub struct ProtocolSetup {
    pub host: HostState,
    pub guests: Vec<GuestState>,
    pub guest_feature_dims: Vec<usize>,
}

/// Builds host and guest states for supervised federated training. The model
/// parts come from one `ComposedModel::init`, so centralized baselines with
/// the same seed start from identical parameters.
pub fn build_supervised_parties(
    ds: &Dataset,
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<ProtocolSetup> {
    cfg.validate()?;
    let (train, _, _) = ds.split()?;
    let train_rows: Vec<usize> = train.indices().collect();

    let x0 = host_features(ds);
    let x0_std = Standardizer::fit(&take_rows(&x0, &train_rows));
    let x0_norm = x0_std.transform(&x0);
    let labels = labels_matrix(ds);
    let label_std = Standardizer::fit(&take_rows(&labels, &train_rows));
    let labels_norm = label_std.transform(&labels);

    let guest_ins = vec![ds.guest_dim(); ds.n_guests];
    let model = ComposedModel::init(
        ds.host_dim(),
        &guest_ins,
        ds.n_cells,
        &cfg.model,
        cfg.seed,
    )?;

    let mut guests = Vec::with_capacity(ds.n_guests);
    let mut guest_feature_dims = Vec::with_capacity(ds.n_guests);
    for (k, net) in model.guest_subs.into_iter().enumerate() {
        let xg = guest_features(ds, k);
        let std = Standardizer::fit(&take_rows(&xg, &train_rows));
        let xg_norm = std.transform(&xg);
        guest_feature_dims.push(xg_norm.ncols());
        guests.push(GuestState::new(
            k as u32,
            net,
            xg_norm,
            GuestMode::Supervised,
            cfg.q,
            cfg.eta_guest,
            cfg.lambda,
            config_hash.to_string(),
            cfg.seed,
        ));
    }

    let host = HostState::new(
        model.host_sub,
        model.global,
        x0_norm,
        Objective::Supervised {
            labels_norm,
            label_std,
            alpha: cfg.alpha,
        },
        ds.n_cells,
        ds.n_guests,
        cfg.lambda,
        cfg.eta_host,
        cfg.host_q,
        cfg.batch_size,
        train.len(),
        cfg.seed,
        config_hash.to_string(),
    )?;

    Ok(ProtocolSetup {
        host,
        guests,
        guest_feature_dims,
    })
}

/// Builds host and guest states for label-free physics-informed training.
pub fn build_physics_parties(
    ds: &Dataset,
    net: Network,
    scenario: &ScenarioConfig,
    variant: PhysicsVariant,
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<ProtocolSetup> {
    cfg.validate()?;
    if cfg.host_q != 1 {
        return Err(Error::Config("physics mode supports host_q = 1 only".into()));
    }
    let (train, _, _) = ds.split()?;
    let train_rows: Vec<usize> = train.indices().collect();
    let n = ds.n_cells;

    let x0 = host_features(ds);
    let x0_std = Standardizer::fit(&take_rows(&x0, &train_rows));
    let x0_norm = x0_std.transform(&x0);

    let spec = calibrate_physics_spec(&net, scenario, variant, ds.n_guests);
    spec.validate(&net)?;

    // host measurement matrix in detector order
    let mut host_u = Array2::zeros((ds.len(), ds.detector_cells.len()));
    for (i, rec) in ds.records.iter().enumerate() {
        host_u
            .row_mut(i)
            .assign(&ndarray::Array1::from_vec(rec.u_host.clone()));
    }

    let guest_ins = vec![ds.guest_dim(); ds.n_guests];
    let model = ComposedModel::init(ds.host_dim(), &guest_ins, n, &cfg.model, cfg.seed)?;
    // fixed affine output map: the base starts the estimator inside the
    // state space (the speed measurement is singular at zero density) and
    // the scale whitens the state by the process-noise std, equalizing the
    // model-term curvature across density and flow blocks under plain
    // gradient steps; derived from public quantities only
    let mut out_base = Vec::with_capacity(2 * n);
    for cell in net.cells() {
        out_base.push(cell.fd.jam_density / 5.0);
    }
    for cell in net.cells() {
        out_base.push(cell.fd.capacity / 3.0);
    }
    let out_scale: Vec<f64> = spec.sigma_w.iter().map(|v| v.sqrt()).collect();

    let key_dim = 2 * n * cfg.batch_size;
    let codec = FixedPointCodec::new(cfg.codec_scale_bits, cfg.codec_bound, key_dim.max(1))?;
    let mode = if cfg.backend_ipe {
        GuestMode::PhysicsIpe
    } else {
        GuestMode::PhysicsPlain
    };

    let mut guests = Vec::with_capacity(ds.n_guests);
    let mut guest_feature_dims = Vec::with_capacity(ds.n_guests);
    for (k, gnet) in model.guest_subs.into_iter().enumerate() {
        let xg = guest_features(ds, k);
        let std = Standardizer::fit(&take_rows(&xg, &train_rows));
        let xg_norm = std.transform(&xg);
        guest_feature_dims.push(xg_norm.ncols());
        let mut guest = GuestState::new(
            k as u32,
            gnet,
            xg_norm,
            mode,
            cfg.q,
            cfg.eta_guest,
            cfg.lambda,
            config_hash.to_string(),
            cfg.seed,
        );
        let mut meas = Array2::zeros((ds.len(), 2 * n));
        let mut masks = Vec::with_capacity(ds.len());
        for (i, rec) in ds.records.iter().enumerate() {
            meas.row_mut(i)
                .assign(&ndarray::Array1::from_vec(rec.u_guest_k[k].clone()));
            masks.push(rec.mask_k[k].clone());
        }
        guest.set_measurements(meas, masks, spec.guests[k].clone());
        if cfg.backend_ipe {
            guest.set_secure_params(codec.clone(), key_dim, cfg.seed);
        }
        guests.push(guest);
    }

    let host = HostState::new(
        model.host_sub,
        model.global,
        x0_norm,
        Objective::Physics(Box::new(PhysicsObjective {
            net,
            spec,
            host_u,
            step_offset: ds.step_offset,
            codec,
            bsgs: BsgsSolver::new(cfg.bsgs_bound)?,
            key_dim,
            out_base,
            out_scale,
        })),
        n,
        ds.n_guests,
        cfg.lambda,
        cfg.eta_host,
        cfg.host_q,
        cfg.batch_size,
        train.len(),
        cfg.seed,
        config_hash.to_string(),
    )?;

    Ok(ProtocolSetup {
        host,
        guests,
        guest_feature_dims,
    })
}

/// Wires guests into in-process channels (optionally recording into a shared
/// transcript) and runs the full session on the sequential scheduler.
pub fn train_inproc(
    setup: ProtocolSetup,
    cfg: &TrainConfig,
    val: SplitView,
    transcript: Option<std::rc::Rc<std::cell::RefCell<super::Transcript>>>,
) -> Result<(HostState, Vec<GuestState>, TrainOutcome)> {
    let ProtocolSetup {
        mut host, guests, ..
    } = setup;
    let handles: Vec<_> = guests
        .into_iter()
        .map(|g| std::rc::Rc::new(std::cell::RefCell::new(g)))
        .collect();
    let mut channels: Vec<Box<dyn Channel>> = handles
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let inner: Box<dyn Channel> =
                Box::new(crate::transport::InProcChannel::new(h.clone()));
            match &transcript {
                Some(t) => Box::new(crate::transport::RecordingChannel::new(
                    inner,
                    t.clone(),
                    PartyId::Guest(k as u32),
                )) as Box<dyn Channel>,
                None => inner,
            }
        })
        .collect();
    let outcome = run_host_training(&mut host, &mut channels, cfg, val)?;
    finish_session(&mut channels, host.round() + 1)?;
    drop(channels);
    let guests = handles
        .into_iter()
        .map(|h| {
            std::rc::Rc::try_unwrap(h)
                .map(|c| c.into_inner())
                .map_err(|_| Error::Protocol("guest handle still shared".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((host, guests, outcome))
}

/// In-process inference for a finished session.
pub fn predict_inproc(
    host: &HostState,
    guests: &[GuestState],
    indices: &[usize],
) -> Result<Array2<f64>> {
    let mut z_guests = Vec::with_capacity(guests.len());
    for g in guests {
        let z = g.forward_indices(indices)?;
        z_guests.push(z);
    }
    host.predict(indices, &z_guests)
}

/// Centralized training of the composed model: the no-protocol baselines.
/// Arithmetic matches the federated path op-for-op so that `q = 1` runs are
/// bit-identical.
pub struct CentralizedSession {
    pub model: ComposedModel,
    pub x0_norm: Array2<f64>,
    pub x_guests_norm: Vec<Array2<f64>>,
    pub labels_norm: Array2<f64>,
    pub label_std: Standardizer,
    pub n_cells: usize,
}

impl CentralizedSession {
    /// Assembles a centralized session over arbitrary per-guest feature
    /// matrices (full guest features for the oracle, derived speed features
    /// for partial fusion, none for the host-only baseline).
    pub fn new(
        ds: &Dataset,
        guest_feature_mats: Vec<Array2<f64>>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let (train, _, _) = ds.split()?;
        let train_rows: Vec<usize> = train.indices().collect();
        let x0 = host_features(ds);
        let x0_std = Standardizer::fit(&take_rows(&x0, &train_rows));
        let x0_norm = x0_std.transform(&x0);
        let labels = labels_matrix(ds);
        let label_std = Standardizer::fit(&take_rows(&labels, &train_rows));
        let labels_norm = label_std.transform(&labels);
        let mut x_guests_norm = Vec::with_capacity(guest_feature_mats.len());
        let mut guest_ins = Vec::with_capacity(guest_feature_mats.len());
        for xg in guest_feature_mats {
            let std = Standardizer::fit(&take_rows(&xg, &train_rows));
            x_guests_norm.push(std.transform(&xg));
            guest_ins.push(xg.ncols());
        }
        let model = ComposedModel::init(
            ds.host_dim(),
            &guest_ins,
            ds.n_cells,
            &cfg.model,
            cfg.seed,
        )?;
        Ok(CentralizedSession {
            model,
            x0_norm,
            x_guests_norm,
            labels_norm,
            label_std,
            n_cells: ds.n_cells,
        })
    }

    pub fn predict(&self, indices: &[usize]) -> Result<Array2<f64>> {
        let x0 = take_rows(&self.x0_norm, indices);
        let xg: Vec<Array2<f64>> = self
            .x_guests_norm
            .iter()
            .map(|m| take_rows(m, indices))
            .collect();
        self.model.forward(&x0, &xg)
    }

    fn validation_score(&self, val_indices: &[usize]) -> Result<ValScore> {
        let estimates = self.predict(val_indices)?;
        let n = self.n_cells;
        let mut dens_se = 0.0;
        let mut flow_se = 0.0;
        for (row, &idx) in estimates.rows().into_iter().zip(val_indices) {
            let pred = self.label_std.inverse_row(&row.to_vec());
            let truth = self
                .label_std
                .inverse_row(&self.labels_norm.row(idx).to_vec());
            for j in 0..n {
                dens_se += (pred[j] - truth[j]).powi(2);
                flow_se += (pred[n + j] - truth[n + j]).powi(2);
            }
        }
        let count = (val_indices.len() * n).max(1) as f64;
        Ok(ValScore {
            score: (dens_se / count).sqrt(),
            density_rmse: Some((dens_se / count).sqrt()),
            flow_rmse: Some((flow_se / count).sqrt()),
        })
    }
}

/// Runs centralized training with the same sampler, loss and update order as
/// the protocol.
pub fn train_centralized(
    session: &mut CentralizedSession,
    cfg: &TrainConfig,
    train: SplitView,
    val: SplitView,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut sampler = BatchSampler::new(
        train.indices().collect(),
        cfg.batch_size,
        ChaCha8Rng::seed_from_u64(party_seed(cfg.seed, "batches")),
    )?;
    let val_indices: Vec<usize> = val.indices().collect();
    let mut outcome = TrainOutcome::default();
    let mut best = f64::INFINITY;
    let mut evals_since_best = 0usize;

    for round in 1..=cfg.max_rounds as u64 {
        let mut indices = sampler.next_batch();
        indices.sort_unstable();
        let x0 = take_rows(&session.x0_norm, &indices);
        let labels = take_rows(&session.labels_norm, &indices);
        let xg: Vec<Array2<f64>> = session
            .x_guests_norm
            .iter()
            .map(|m| take_rows(m, &indices))
            .collect();
        let z_guests: Vec<Array2<f64>> = session
            .model
            .guest_subs
            .iter()
            .zip(&xg)
            .map(|(net, x)| net.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let step = host_supervised_step(
            &mut session.model.host_sub,
            &mut session.model.global,
            &x0,
            &z_guests,
            &labels,
            session.n_cells,
            cfg.alpha,
            cfg.lambda,
            cfg.eta_host,
            cfg.host_q,
        )?;
        for (k, net) in session.model.guest_subs.iter_mut().enumerate() {
            for _ in 0..cfg.q {
                super::model::descend(
                    net,
                    &xg[k],
                    &step.guest_grads[k],
                    cfg.eta_guest,
                    cfg.lambda,
                )?;
            }
        }
        outcome.rounds_run = round;

        if round % cfg.eval_every as u64 == 0 {
            let score = session.validation_score(&val_indices)?;
            outcome.history.push(RoundMetric {
                round,
                score: score.score,
                density_rmse: score.density_rmse,
                flow_rmse: score.flow_rmse,
            });
            if let (Some(target), Some(dens)) = (cfg.target_density_rmse, score.density_rmse) {
                if outcome.rounds_to_threshold.is_none() && dens <= target {
                    outcome.rounds_to_threshold = Some(round);
                }
            }
            if score.score < best {
                best = score.score;
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= cfg.patience {
                    outcome.converged = true;
                    break;
                }
            }
        }
    }
    Ok(outcome)
}
