//! Command-line entry point: scenario generation, training (in-process or
//! distributed), experiment sweeps and transcript audits.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fedtse::error::Error;
use fedtse::eval::{
    run_baseline, run_config_hash, run_protocol_over_channels, sweep, sweep_key,
    write_sweep_outputs, Method, SweepGrid, CSV_HEADER,
};
use fedtse::protocol::train::TrainConfig;
use fedtse::protocol::{
    audit_transcript, config_hash, message_whitelist, AuditExpectations, PartyId, Transcript,
};
use fedtse::scenario::{generate, ScenarioConfig};
use fedtse::transport::{Channel, RecordingChannel, TcpChannel};

#[derive(Parser)]
#[command(name = "fedtse", about = "Vertical federated traffic state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic vertically-partitioned dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method in-process and write checkpoint, transcript and
    /// metrics.
    Train(TrainArgs),
    /// Run the host side of a distributed session over TCP.
    Host(HostArgs),
    /// Run one guest party: listen, serve a single training session, exit.
    Guest {
        #[arg(long)]
        config: PathBuf,
        /// Address to listen on, e.g. 127.0.0.1:7001.
        #[arg(long)]
        listen: String,
        /// Which guest of the scenario this process plays.
        #[arg(long, default_value_t = 0)]
        guest_index: u32,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a methods × penetrations × Q × seeds sweep into CSV/JSON reports.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip grid cells already present in the output CSV.
        #[arg(long)]
        resume: bool,
    },
    /// Structurally audit a transcript export.
    Audit {
        #[arg(long)]
        transcript: PathBuf,
        /// Registered guest sub-model output dimension.
        #[arg(long)]
        guest_output_dim: usize,
        /// Comma-separated raw feature dimension per guest.
        #[arg(long)]
        guest_feature_dims: String,
        /// The run used the physics objective.
        #[arg(long)]
        physics: bool,
        /// The run used the encrypted backend.
        #[arg(long)]
        ipe: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// inproc (default) or tcp (requires --guest-addr per guest).
    #[arg(long, default_value = "inproc")]
    transport: String,
    /// Guest address for tcp transport; repeat per guest.
    #[arg(long)]
    guest_addr: Vec<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct HostArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Guest address; repeat per guest.
    #[arg(long, required = true)]
    guest_addr: Vec<String>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flag overrides applied on top of the run-config file. Every party of a
/// distributed run must be started with the same overrides.
#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    penetration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// plaintext or ipe (physics methods only).
    #[arg(long)]
    backend: Option<String>,
}

/// The composite run configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    scenario: ScenarioConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    method: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("FEDTSE_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> fedtse::Result<()> {
    match cli.command {
        Command::Generate { config, out } => cmd_generate(&config, &out),
        Command::Train(args) => cmd_train(args),
        Command::Host(args) => cmd_host(args),
        Command::Guest {
            config,
            listen,
            guest_index,
            overrides,
        } => cmd_guest(&config, &listen, guest_index, &overrides),
        Command::Sweep { grid, out, resume } => cmd_sweep(&grid, &out, resume),
        Command::Audit {
            transcript,
            guest_output_dim,
            guest_feature_dims,
            physics,
            ipe,
        } => cmd_audit(&transcript, guest_output_dim, &guest_feature_dims, physics, ipe),
    }
}

fn load_run_config(path: &Path, overrides: &Overrides) -> fedtse::Result<(ScenarioConfig, TrainConfig, Method)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let rc: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    let mut scenario = rc.scenario;
    let mut train = rc.train.unwrap_or_default();
    let method_name = overrides
        .method
        .clone()
        .or(rc.method)
        .ok_or_else(|| Error::Config("no method given (config `method` or --method)".into()))?;
    let method = Method::parse(&method_name)?;
    if let Some(q) = overrides.q {
        train.q = q;
    }
    if let Some(p) = overrides.penetration {
        scenario.penetrations = vec![p; scenario.penetrations.len().max(1)];
    }
    if let Some(seed) = overrides.seed {
        scenario.seed = seed;
        train.seed = seed;
    }
    if let Some(backend) = &overrides.backend {
        train.backend_ipe = match backend.as_str() {
            "plaintext" => false,
            "ipe" => true,
            other => {
                return Err(Error::Config(format!(
                    "unknown backend '{other}' (expected plaintext or ipe)"
                )))
            }
        };
    }
    Ok((scenario, train, method))
}

fn cmd_generate(config: &Path, out: &Path) -> fedtse::Result<()> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", config.display())))?;
    // accept either a bare scenario or a full run config
    let scenario: ScenarioConfig = match serde_json::from_str::<ScenarioConfig>(&text) {
        Ok(s) => s,
        Err(_) => {
            let rc: RunConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad config: {e}")))?;
            rc.scenario
        }
    };
    let (_, ds) = generate(&scenario)?;
    std::fs::create_dir_all(out)?;
    let data_path = out.join("dataset.jsonl");
    ds.save_jsonl(&data_path)?;
    let manifest = serde_json::json!({
        "config_hash": config_hash(&scenario)?,
        "records": ds.len(),
        "n_cells": ds.n_cells,
        "n_guests": ds.n_guests,
        "host_dim": ds.host_dim(),
        "guest_dim": ds.guest_dim(),
        "label_dim": ds.label_dim(),
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("dataset: {} records -> {}", ds.len(), data_path.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> fedtse::Result<()> {
    let (scenario, train, method) = load_run_config(&args.config, &args.overrides)?;
    match args.transport.as_str() {
        "inproc" => {
            let (net, ds) = generate(&scenario)?;
            let artifacts = run_baseline(method, &ds, &net, &scenario, &train)?;
            write_artifacts(&args.out, &artifacts, &scenario, &train, method)
        }
        "tcp" => {
            if args.guest_addr.is_empty() {
                return Err(Error::Config(
                    "tcp transport requires at least one --guest-addr".into(),
                ));
            }
            run_host_over_tcp(&scenario, &train, method, &args.guest_addr, &args.out)
        }
        other => Err(Error::Config(format!(
            "unknown transport '{other}' (expected inproc or tcp)"
        ))),
    }
}

fn cmd_host(args: HostArgs) -> fedtse::Result<()> {
    let (scenario, train, method) = load_run_config(&args.config, &args.overrides)?;
    run_host_over_tcp(&scenario, &train, method, &args.guest_addr, &args.out)
}

fn run_host_over_tcp(
    scenario: &ScenarioConfig,
    train: &TrainConfig,
    method: Method,
    guest_addrs: &[String],
    out: &Path,
) -> fedtse::Result<()> {
    let (net, ds) = generate(scenario)?;
    if guest_addrs.len() != ds.n_guests {
        return Err(Error::Config(format!(
            "scenario has {} guests but {} --guest-addr given",
            ds.n_guests,
            guest_addrs.len()
        )));
    }
    let transcript = std::rc::Rc::new(std::cell::RefCell::new(Transcript::new(
        train.record_payloads,
    )));
    let mut channels: Vec<Box<dyn Channel>> = Vec::with_capacity(guest_addrs.len());
    for (k, addr) in guest_addrs.iter().enumerate() {
        let tcp = TcpChannel::connect(addr)?;
        channels.push(Box::new(RecordingChannel::new(
            Box::new(tcp),
            transcript.clone(),
            PartyId::Guest(k as u32),
        )));
    }
    let mut artifacts =
        run_protocol_over_channels(method, &ds, &net, scenario, train, &mut channels)?;
    drop(channels);
    artifacts.transcript = Some(
        std::rc::Rc::try_unwrap(transcript)
            .map(|c| c.into_inner())
            .map_err(|_| Error::Protocol("transcript still shared".into()))?,
    );
    write_artifacts(out, &artifacts, scenario, train, method)
}

fn cmd_guest(
    config: &Path,
    listen: &str,
    guest_index: u32,
    overrides: &Overrides,
) -> fedtse::Result<()> {
    let (scenario, train, method) = load_run_config(config, overrides)?;
    if !method.is_protocol() {
        return Err(Error::Config(format!(
            "method '{}' has no guest role",
            method.as_str()
        )));
    }
    let (net, ds) = generate(&scenario)?;
    let hash = run_config_hash(&scenario, &train, method)?;
    let setup = if let Some(variant) = method.physics_variant() {
        fedtse::protocol::train::build_physics_parties(&ds, net, &scenario, variant, &train, &hash)?
    } else {
        fedtse::protocol::train::build_supervised_parties(&ds, &train, &hash)?
    };
    let mut guest = setup
        .guests
        .into_iter()
        .nth(guest_index as usize)
        .ok_or_else(|| Error::Config(format!("no guest with index {guest_index}")))?;
    let listener = std::net::TcpListener::bind(listen)
        .map_err(|e| Error::Transport(format!("bind {listen}: {e}")))?;
    log::info!("guest {guest_index} listening on {listen}");
    let (stream, peer) = listener
        .accept()
        .map_err(|e| Error::Transport(format!("accept: {e}")))?;
    log::info!("host connected from {peer}");
    fedtse::transport::serve_guest(stream, &mut guest)?;
    println!("guest {guest_index}: session complete");
    Ok(())
}

fn cmd_sweep(grid_path: &Path, out: &Path, resume: bool) -> fedtse::Result<()> {
    let text = std::fs::read_to_string(grid_path)
        .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", grid_path.display())))?;
    let grid: SweepGrid =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed grid: {e}")))?;
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("sweep.csv");
    let json_path = out.join("sweep.json");

    let mut completed = std::collections::BTreeSet::new();
    let mut existing: Vec<fedtse::eval::MetricReport> = Vec::new();
    if resume && csv_path.exists() {
        existing = read_csv_reports(&csv_path)?;
        for r in &existing {
            completed.insert(sweep_key(&r.method, r.penetration, r.q, r.seed));
        }
        log::info!("resuming: {} cells already done", completed.len());
    }

    let (mut rows, _) = sweep(&grid, &completed, |r| {
        println!(
            "{} pen={} q={} seed={}: density RMSE {:.3}",
            r.method, r.penetration, r.q, r.seed, r.density_rmse
        );
    })?;
    let mut all = existing;
    all.append(&mut rows);
    let aggregates = fedtse::eval::aggregate_means(&all);
    write_sweep_outputs(&all, &aggregates, &csv_path, &json_path)?;
    println!(
        "sweep complete: {} runs, {} aggregate rows -> {}",
        all.len(),
        aggregates.len(),
        csv_path.display()
    );
    Ok(())
}

fn read_csv_reports(path: &Path) -> fedtse::Result<Vec<fedtse::eval::MetricReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != CSV_HEADER {
                return Err(Error::Config("existing CSV has a different header".into()));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 || cols[3] == "mean" {
            continue;
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(e.to_string()));
        out.push(fedtse::eval::MetricReport {
            method: cols[0].to_string(),
            penetration: parse_f(cols[1])?,
            q: cols[2].parse().map_err(|e| Error::Config(format!("{e}")))?,
            seed: cols[3].parse().map_err(|e| Error::Config(format!("{e}")))?,
            density_rmse: parse_f(cols[4])?,
            density_mae: parse_f(cols[5])?,
            flow_rmse: parse_f(cols[6])?,
            flow_mae: parse_f(cols[7])?,
            rounds_to_threshold: if cols[8].is_empty() {
                None
            } else {
                Some(cols[8].parse().map_err(|e| Error::Config(format!("{e}")))?)
            },
            rounds_run: 0,
        });
    }
    Ok(out)
}

fn cmd_audit(
    transcript_path: &Path,
    guest_output_dim: usize,
    guest_feature_dims: &str,
    physics: bool,
    ipe: bool,
) -> fedtse::Result<()> {
    let transcript = Transcript::load(transcript_path)?;
    let dims = guest_feature_dims
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad feature dim '{s}': {e}")))
        })
        .collect::<fedtse::Result<Vec<_>>>()?;
    let expect = AuditExpectations {
        whitelist: message_whitelist(physics, ipe),
        guest_output_dim,
        guest_feature_dims: dims,
    };
    let report = audit_transcript(&transcript, &expect);
    println!("messages checked: {}", report.messages_checked);
    if report.is_clean() {
        println!("no violations");
        Ok(())
    } else {
        for v in &report.violations {
            println!("violation: {v}");
        }
        Err(Error::Protocol(format!(
            "{} transcript violations",
            report.violations.len()
        )))
    }
}

fn write_artifacts(
    out: &Path,
    artifacts: &fedtse::eval::RunArtifacts,
    scenario: &ScenarioConfig,
    train: &TrainConfig,
    method: Method,
) -> fedtse::Result<()> {
    std::fs::create_dir_all(out)?;
    write_json(
        &out.join("checkpoint.json"),
        &serde_json::to_value(&artifacts.params)?,
    )?;
    write_json(
        &out.join("metrics.json"),
        &serde_json::to_value(&artifacts.outcome)?,
    )?;
    write_json(
        &out.join("report.json"),
        &serde_json::to_value(&artifacts.report)?,
    )?;
    write_json(
        &out.join("run_config.json"),
        &serde_json::json!({
            "scenario": scenario,
            "train": train,
            "method": method.as_str(),
            "config_hash": run_config_hash(scenario, train, method)?,
        }),
    )?;
    if let Some(t) = &artifacts.transcript {
        t.save(&out.join("transcript.jsonl"))?;
    }
    println!(
        "{}: test density RMSE {:.4} veh/km, flow RMSE {:.4} veh/min -> {}",
        method.as_str(),
        artifacts.report.density_rmse,
        artifacts.report.flow_rmse,
        out.display()
    );
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> fedtse::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.flush()?;
    Ok(())
}
