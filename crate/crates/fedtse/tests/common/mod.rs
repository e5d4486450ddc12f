//! Shared scenario builders for the integration and acceptance suites.

use std::collections::BTreeMap;

use fedtse::ctm::{Cell, EdgeSpec, FundamentalDiagram, NetworkSpec, SignalPhase};
use fedtse::protocol::model::ModelConfig;
use fedtse::protocol::train::TrainConfig;
use fedtse::scenario::{DemandSegment, DemandSpec, ScenarioConfig, SinusoidSpec};

pub fn standard_fd() -> FundamentalDiagram {
    FundamentalDiagram {
        free_flow_speed: 50.0,
        jam_density: 150.0,
        capacity: 1800.0,
        backward_wave_speed: 20.0,
    }
}

pub fn corridor_cell(id: &str, source: bool, sink: bool) -> Cell {
    Cell {
        id: id.into(),
        length_km: 0.15,
        fd: standard_fd(),
        is_source: source,
        is_sink: sink,
    }
}

/// The nine-cell signalized corridor used by the trend criteria: demand
/// enters at c0, a fixed-time signal sits on the c5 -> c6 edge and queues
/// spill back from it, detectors cover c1 and c6 only.
pub fn corridor_network(n: usize) -> NetworkSpec {
    let cells: Vec<Cell> = (0..n)
        .map(|i| corridor_cell(&format!("c{i}"), i == 0, i + 1 == n))
        .collect();
    let edges: Vec<EdgeSpec> = (0..n - 1)
        .map(|i| EdgeSpec {
            from: format!("c{i}"),
            to: format!("c{}", i + 1),
            turning_ratio: 1.0,
            signal: if i == 5 {
                Some(SignalPhase {
                    cycle_s: 90.0,
                    green_start_s: 0.0,
                    green_end_s: 50.0,
                })
            } else {
                None
            },
        })
        .collect();
    NetworkSpec {
        dt_s: 10.0,
        cells,
        edges,
    }
}

/// Corridor scenario: sinusoidal peak demand over a long horizon.
pub fn corridor_scenario(seed: u64, penetration: f64, horizon: usize) -> ScenarioConfig {
    let mut rates = BTreeMap::new();
    rates.insert("c0".to_string(), 900.0);
    ScenarioConfig {
        network: Some(corridor_network(9)),
        network_file: None,
        horizon,
        warmup_steps: 120,
        detector_cells: vec!["c1".into(), "c6".into()],
        penetrations: vec![penetration],
        history_window: 9,
        loop_noise: 0.5,
        speed_noise: 0.05,
        density_noise: 0.05,
        process_noise: 0.5,
        demand: DemandSpec {
            segments: vec![DemandSegment {
                from_step: 0,
                rates,
            }],
            peak: Some(SinusoidSpec {
                amplitude: 600.0,
                period_s: 3600.0,
            }),
        },
        seed,
    }
}

/// Supervised training settings shared by the comparison methods.
pub fn supervised_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        eta_host: 1e-2,
        eta_guest: 1e-2,
        batch_size: 128,
        max_rounds: 800,
        patience: 40,
        eval_every: 5,
        seed,
        model: ModelConfig {
            sub_hidden: vec![64],
            global_hidden: vec![64],
            output_dim: 9,
        },
        ..TrainConfig::default()
    }
}

/// Physics-informed training settings: a smaller dimension-reduced model and
/// a large batch so that the rank-condition defense holds at every
/// penetration and measurement ablation.
pub fn physics_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        eta_host: 2e-6,
        eta_guest: 2e-6,
        batch_size: 512,
        max_rounds: 200,
        patience: 10_000,
        eval_every: 10,
        seed,
        model: ModelConfig {
            sub_hidden: vec![16],
            global_hidden: vec![24],
            output_dim: 2,
        },
        ..TrainConfig::default()
    }
}
