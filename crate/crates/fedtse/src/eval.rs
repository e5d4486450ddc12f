//! Metrics, benchmark methods and experiment sweeps.
//!
//! The benchmark set mirrors the comparison structure of the training
//! studies: a host-only baseline (no fusion), partial fusion on shared
//! speeds, a centralized oracle on full features, the federated protocol,
//! and the label-free physics variants with speed/density ablations. All
//! methods share one architecture configuration.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ctm::Network;
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::protocol::train::{
    build_physics_parties, build_supervised_parties, train_centralized, CentralizedSession,
    PhysicsVariant, TrainConfig, TrainOutcome,
};
use crate::protocol::{config_hash, Transcript};
use crate::scenario::{generate, Dataset, ScenarioConfig};

/// The registered benchmark methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Host-only training on loop data, no fusion.
    TseN,
    /// Centralized training on loop data plus shared per-link speeds.
    TseP,
    /// Centralized training on loop data plus full guest features.
    Oracle,
    /// The supervised federated protocol.
    Fedtse,
    /// Label-free physics-informed protocol, speed and density measurements.
    FedtsePi,
    /// Physics protocol, speed measurements only.
    FedtsePiV,
    /// Physics protocol, density measurements only.
    FedtsePiK,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "tse_n" => Ok(Method::TseN),
            "tse_p" => Ok(Method::TseP),
            "oracle" => Ok(Method::Oracle),
            "fedtse" => Ok(Method::Fedtse),
            "fedtse_pi" => Ok(Method::FedtsePi),
            "fedtse_pi_v" => Ok(Method::FedtsePiV),
            "fedtse_pi_k" => Ok(Method::FedtsePiK),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected one of tse_n, tse_p, oracle, fedtse, fedtse_pi, fedtse_pi_v, fedtse_pi_k)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::TseN => "tse_n",
            Method::TseP => "tse_p",
            Method::Oracle => "oracle",
            Method::Fedtse => "fedtse",
            Method::FedtsePi => "fedtse_pi",
            Method::FedtsePiV => "fedtse_pi_v",
            Method::FedtsePiK => "fedtse_pi_k",
        }
    }

    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            Method::Fedtse | Method::FedtsePi | Method::FedtsePiV | Method::FedtsePiK
        )
    }

    pub fn is_physics(&self) -> bool {
        matches!(
            self,
            Method::FedtsePi | Method::FedtsePiV | Method::FedtsePiK
        )
    }

    pub fn physics_variant(&self) -> Option<PhysicsVariant> {
        match self {
            Method::FedtsePi => Some(PhysicsVariant::Full),
            Method::FedtsePiV => Some(PhysicsVariant::SpeedOnly),
            Method::FedtsePiK => Some(PhysicsVariant::DensityOnly),
            _ => None,
        }
    }
}

/// Root mean squared error over aligned matrices.
pub fn rmse(predictions: &Array2<f64>, labels: &Array2<f64>) -> Result<f64> {
    check_aligned(predictions, labels)?;
    let n = (predictions.len()).max(1) as f64;
    let se: f64 = predictions
        .iter()
        .zip(labels.iter())
        .map(|(p, l)| (p - l) * (p - l))
        .sum();
    Ok((se / n).sqrt())
}

/// Mean absolute error over aligned matrices.
pub fn mae(predictions: &Array2<f64>, labels: &Array2<f64>) -> Result<f64> {
    check_aligned(predictions, labels)?;
    let n = (predictions.len()).max(1) as f64;
    Ok(predictions
        .iter()
        .zip(labels.iter())
        .map(|(p, l)| (p - l).abs())
        .sum::<f64>()
        / n)
}

fn check_aligned(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "metric shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// One evaluated run. Flow metrics are reported in veh/min.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub penetration: f64,
    pub q: usize,
    pub seed: u64,
    pub density_rmse: f64,
    pub density_mae: f64,
    pub flow_rmse: f64,
    pub flow_mae: f64,
    pub rounds_to_threshold: Option<u64>,
    pub rounds_run: u64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if self.density_rmse < self.density_mae || self.flow_rmse < self.flow_mae {
            return Err(Error::Config(
                "RMSE must be at least MAE for each quantity".into(),
            ));
        }
        Ok(())
    }
}

/// Final parameters of a run, savable and comparable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalParams {
    pub host_sub: Checkpoint,
    pub global: Checkpoint,
    pub guest_subs: Vec<Checkpoint>,
}

/// Everything a single benchmark run produces.
pub struct RunArtifacts {
    pub report: MetricReport,
    pub outcome: TrainOutcome,
    pub transcript: Option<Transcript>,
    pub params: FinalParams,
}

/// Splits predictions/labels into density and flow blocks and computes the
/// four headline metrics (flow converted to veh/min).
pub fn split_metrics(
    predictions: &Array2<f64>,
    labels: &Array2<f64>,
    n_cells: usize,
) -> Result<(f64, f64, f64, f64)> {
    let dens_p = predictions.slice(ndarray::s![.., ..n_cells]).to_owned();
    let dens_l = labels.slice(ndarray::s![.., ..n_cells]).to_owned();
    let flow_p = predictions
        .slice(ndarray::s![.., n_cells..])
        .mapv(|v| v / 60.0);
    let flow_l = labels.slice(ndarray::s![.., n_cells..]).mapv(|v| v / 60.0);
    Ok((
        rmse(&dens_p, &dens_l)?,
        mae(&dens_p, &dens_l)?,
        rmse(&flow_p, &flow_l)?,
        mae(&flow_p, &flow_l)?,
    ))
}

/// Digest every party must agree on before training: scenario, training
/// settings and method.
pub fn run_config_hash(
    scenario: &ScenarioConfig,
    cfg: &TrainConfig,
    method: Method,
) -> Result<String> {
    config_hash(&(scenario, cfg, method.as_str()))
}

/// Trains one benchmark method on a generated scenario and evaluates it on
/// the chronological test slice.
pub fn run_baseline(
    method: Method,
    ds: &Dataset,
    net: &Network,
    scenario: &ScenarioConfig,
    cfg: &TrainConfig,
) -> Result<RunArtifacts> {
    let (train, val, test) = ds.split()?;
    let test_indices: Vec<usize> = test.indices().collect();
    let labels_phys = crate::protocol::model::take_rows(
        &crate::protocol::model::labels_matrix(ds),
        &test_indices,
    );

    let hash = run_config_hash(scenario, cfg, method)?;

    let (predictions, outcome, transcript, params) = match method {
        Method::TseN | Method::TseP | Method::Oracle => {
            let guest_mats: Vec<Array2<f64>> = match method {
                Method::TseN => Vec::new(),
                Method::TseP => (0..ds.n_guests)
                    .map(|k| crate::protocol::model::speed_features(ds, k))
                    .collect(),
                Method::Oracle => (0..ds.n_guests)
                    .map(|k| crate::protocol::model::guest_features(ds, k))
                    .collect(),
                _ => unreachable!(),
            };
            let mut session = CentralizedSession::new(ds, guest_mats, cfg)?;
            let outcome = train_centralized(&mut session, cfg, train, val)?;
            let preds_norm = session.predict(&test_indices)?;
            let preds = denorm_rows(&preds_norm, &session.label_std);
            let params = FinalParams {
                host_sub: session.model.host_sub.to_checkpoint(),
                global: session.model.global.to_checkpoint(),
                guest_subs: session
                    .model
                    .guest_subs
                    .iter()
                    .map(|n| n.to_checkpoint())
                    .collect(),
            };
            (preds, outcome, None, params)
        }
        Method::Fedtse | Method::FedtsePi | Method::FedtsePiV | Method::FedtsePiK => {
            let setup = if let Some(variant) = method.physics_variant() {
                build_physics_parties(ds, net.clone(), scenario, variant, cfg, &hash)?
            } else {
                build_supervised_parties(ds, cfg, &hash)?
            };
            let crate::protocol::train::ProtocolSetup {
                host, guests, ..
            } = setup;
            let transcript = std::rc::Rc::new(std::cell::RefCell::new(Transcript::new(
                cfg.record_payloads,
            )));
            let handles: Vec<_> = guests
                .into_iter()
                .map(|g| std::rc::Rc::new(std::cell::RefCell::new(g)))
                .collect();
            let mut channels: Vec<Box<dyn crate::transport::Channel>> = handles
                .iter()
                .enumerate()
                .map(|(k, h)| {
                    let inner: Box<dyn crate::transport::Channel> =
                        Box::new(crate::transport::InProcChannel::new(h.clone()));
                    Box::new(crate::transport::RecordingChannel::new(
                        inner,
                        transcript.clone(),
                        crate::protocol::PartyId::Guest(k as u32),
                    )) as Box<dyn crate::transport::Channel>
                })
                .collect();
            let (host, preds, outcome) =
                run_protocol_core(host, &mut channels, ds, cfg, &test_indices)?;
            drop(channels);
            let guests: Vec<_> = handles
                .into_iter()
                .map(|h| {
                    std::rc::Rc::try_unwrap(h)
                        .map(|c| c.into_inner())
                        .map_err(|_| Error::Protocol("guest handle still shared".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let params = FinalParams {
                host_sub: host.sub.to_checkpoint(),
                global: host.global.to_checkpoint(),
                guest_subs: guests.iter().map(|g| g.net.to_checkpoint()).collect(),
            };
            let t = std::rc::Rc::try_unwrap(transcript)
                .map(|c| c.into_inner())
                .map_err(|_| Error::Protocol("transcript still shared".into()))?;
            (preds, outcome, Some(t), params)
        }
    };

    let (density_rmse, density_mae, flow_rmse, flow_mae) =
        split_metrics(&predictions, &labels_phys, ds.n_cells)?;
    let report = MetricReport {
        method: method.as_str().to_string(),
        penetration: ds.penetrations.first().copied().unwrap_or(1.0),
        q: cfg.q,
        seed: cfg.seed,
        density_rmse,
        density_mae,
        flow_rmse,
        flow_mae,
        rounds_to_threshold: if method.is_protocol() {
            outcome.rounds_to_threshold
        } else {
            None
        },
        rounds_run: outcome.rounds_run,
    };
    report.validate()?;
    Ok(RunArtifacts {
        report,
        outcome,
        transcript,
        params,
    })
}

/// Runs a protocol method with the guests on the far side of the given
/// channels (the multi-process path). Guest parameters stay remote, so the
/// returned checkpoint carries host parameters only; test metrics come from
/// protocol inference over the same channels.
fn run_protocol_core(
    mut host: crate::protocol::host::HostState,
    channels: &mut [Box<dyn crate::transport::Channel>],
    ds: &Dataset,
    cfg: &TrainConfig,
    test_indices: &[usize],
) -> Result<(crate::protocol::host::HostState, Array2<f64>, TrainOutcome)> {
    use crate::protocol::train::{finish_session, predict_over_channels, run_host_training};
    let (_, val, _) = ds.split()?;
    let outcome = run_host_training(&mut host, channels, cfg, val)?;
    let preds_raw = predict_over_channels(&host, channels, test_indices)?;
    finish_session(channels, host.round() + 1)?;
    let predictions = match &host.objective {
        crate::protocol::host::Objective::Supervised { label_std, .. } => {
            denorm_rows(&preds_raw, label_std)
        }
        _ => preds_raw,
    };
    Ok((host, predictions, outcome))
}

pub fn run_protocol_over_channels(
    method: Method,
    ds: &Dataset,
    net: &Network,
    scenario: &ScenarioConfig,
    cfg: &TrainConfig,
    channels: &mut [Box<dyn crate::transport::Channel>],
) -> Result<RunArtifacts> {
    if !method.is_protocol() {
        return Err(Error::Config(format!(
            "method '{}' does not use the protocol",
            method.as_str()
        )));
    }
    let hash = run_config_hash(scenario, cfg, method)?;
    let setup = if let Some(variant) = method.physics_variant() {
        build_physics_parties(ds, net.clone(), scenario, variant, cfg, &hash)?
    } else {
        build_supervised_parties(ds, cfg, &hash)?
    };
    let (_, _, test) = ds.split()?;
    let test_indices: Vec<usize> = test.indices().collect();
    let (host, predictions, outcome) =
        run_protocol_core(setup.host, channels, ds, cfg, &test_indices)?;
    let labels_phys = crate::protocol::model::take_rows(
        &crate::protocol::model::labels_matrix(ds),
        &test_indices,
    );
    let (density_rmse, density_mae, flow_rmse, flow_mae) =
        split_metrics(&predictions, &labels_phys, ds.n_cells)?;
    let report = MetricReport {
        method: method.as_str().to_string(),
        penetration: ds.penetrations.first().copied().unwrap_or(1.0),
        q: cfg.q,
        seed: cfg.seed,
        density_rmse,
        density_mae,
        flow_rmse,
        flow_mae,
        rounds_to_threshold: outcome.rounds_to_threshold,
        rounds_run: outcome.rounds_run,
    };
    report.validate()?;
    Ok(RunArtifacts {
        report,
        outcome,
        transcript: None,
        params: FinalParams {
            host_sub: host.sub.to_checkpoint(),
            global: host.global.to_checkpoint(),
            guest_subs: Vec::new(),
        },
    })
}

fn denorm_rows(
    rows: &Array2<f64>,
    std: &crate::protocol::model::Standardizer,
) -> Array2<f64> {
    let mut out = rows.clone();
    for mut row in out.rows_mut() {
        let inv = std.inverse_row(&row.to_vec());
        for (v, x) in row.iter_mut().zip(inv) {
            *v = x;
        }
    }
    out
}

/// A sweep over methods × penetrations × Q × seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub methods: Vec<String>,
    pub penetrations: Vec<f64>,
    pub qs: Vec<usize>,
    pub seeds: Vec<u64>,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
}

pub const CSV_HEADER: &str =
    "method,penetration,q,seed,density_rmse,density_mae,flow_rmse,flow_mae,rounds_to_threshold";

pub fn report_csv_row(r: &MetricReport, seed_label: &str) -> String {
    format!(
        "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
        r.method,
        r.penetration,
        r.q,
        seed_label,
        r.density_rmse,
        r.density_mae,
        r.flow_rmse,
        r.flow_mae,
        r.rounds_to_threshold
            .map(|v| v.to_string())
            .unwrap_or_default()
    )
}

/// Runs every cell of the grid, skipping `completed` keys (resume support),
/// and returns the per-run reports followed by seed-aggregated mean rows.
pub fn sweep(
    grid: &SweepGrid,
    completed: &std::collections::BTreeSet<String>,
    mut progress: impl FnMut(&MetricReport),
) -> Result<(Vec<MetricReport>, Vec<MetricReport>)> {
    if grid.methods.is_empty() || grid.penetrations.is_empty() || grid.qs.is_empty()
        || grid.seeds.is_empty()
    {
        return Err(Error::Config("sweep grid has an empty axis".into()));
    }
    let mut rows = Vec::new();
    for method_name in &grid.methods {
        let method = Method::parse(method_name)?;
        for &pen in &grid.penetrations {
            for &q in &grid.qs {
                for &seed in &grid.seeds {
                    let key = sweep_key(method_name, pen, q, seed);
                    if completed.contains(&key) {
                        continue;
                    }
                    let mut scenario = grid.scenario.clone();
                    scenario.penetrations = vec![pen; scenario.penetrations.len().max(1)];
                    scenario.seed = seed;
                    let mut cfg = grid.train.clone();
                    cfg.q = q;
                    cfg.seed = seed;
                    let (net, ds) = generate(&scenario)?;
                    let artifacts = run_baseline(method, &ds, &net, &scenario, &cfg)?;
                    progress(&artifacts.report);
                    rows.push(artifacts.report);
                }
            }
        }
    }
    let aggregates = aggregate_means(&rows);
    Ok((rows, aggregates))
}

pub fn sweep_key(method: &str, pen: f64, q: usize, seed: u64) -> String {
    format!("{method}|{pen}|{q}|{seed}")
}

/// Seed-mean rows per (method, penetration, q).
pub fn aggregate_means(rows: &[MetricReport]) -> Vec<MetricReport> {
    let mut groups: std::collections::BTreeMap<(String, String, usize), Vec<&MetricReport>> =
        std::collections::BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method.clone(), format!("{}", r.penetration), r.q))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, pen, q), members)| {
            let n = members.len() as f64;
            let mean = |f: fn(&MetricReport) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
            let thresholds: Vec<u64> =
                members.iter().filter_map(|r| r.rounds_to_threshold).collect();
            MetricReport {
                method,
                penetration: pen.parse().unwrap_or(0.0),
                q,
                seed: 0,
                density_rmse: mean(|r| r.density_rmse),
                density_mae: mean(|r| r.density_mae),
                flow_rmse: mean(|r| r.flow_rmse),
                flow_mae: mean(|r| r.flow_mae),
                rounds_to_threshold: if thresholds.len() == members.len() {
                    Some(
                        (thresholds.iter().sum::<u64>() as f64 / thresholds.len() as f64).round()
                            as u64,
                    )
                } else {
                    None
                },
                rounds_run: (members.iter().map(|r| r.rounds_run).sum::<u64>() as f64 / n)
                    .round() as u64,
            }
        })
        .collect()
}

/// Writes rows and aggregates to CSV, mirrored as JSON alongside.
pub fn write_sweep_outputs(
    rows: &[MetricReport],
    aggregates: &[MetricReport],
    csv_path: &std::path::Path,
    json_path: &std::path::Path,
) -> Result<()> {
    let mut csv = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    writeln!(csv, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(csv, "{}", report_csv_row(r, &r.seed.to_string()))?;
    }
    for r in aggregates {
        writeln!(csv, "{}", report_csv_row(r, "mean"))?;
    }
    csv.flush()?;
    let mut json = std::io::BufWriter::new(std::fs::File::create(json_path)?);
    serde_json::to_writer_pretty(
        &mut json,
        &serde_json::json!({ "runs": rows, "aggregates": aggregates }),
    )?;
    json.flush()?;
    Ok(())
}
