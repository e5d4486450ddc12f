//! Cell Transmission Model dynamics on a directed network of cells.
//!
//! Serves two roles: the synthetic ground-truth generator behind the
//! scenario module, and the one-step predictor `g(·)` inside the
//! physics-informed loss. All quantities use km, km/h, veh/km and veh/h;
//! the step length is configured in seconds and converted internally.

mod dynamics;
mod jacobian;

pub use dynamics::{
    cell_outflows, flows, predict, receiving, sending, simulate, step, DemandFn, FlowSet,
};
pub use jacobian::{density_update_jacobian, near_kink, outflow_jacobian, step_jacobian};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Triangular fundamental diagram parameters for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundamentalDiagram {
    /// Free-flow speed v_f, km/h.
    pub free_flow_speed: f64,
    /// Jam density k_jam, veh/km.
    pub jam_density: f64,
    /// Capacity q_c, veh/h.
    pub capacity: f64,
    /// Backward wave speed w, km/h.
    pub backward_wave_speed: f64,
}

impl FundamentalDiagram {
    pub fn validate(&self) -> Result<()> {
        if !(self.free_flow_speed > 0.0
            && self.jam_density > 0.0
            && self.capacity > 0.0
            && self.backward_wave_speed > 0.0)
        {
            return Err(Error::Config(
                "fundamental diagram fields must all be strictly positive".into(),
            ));
        }
        if self.backward_wave_speed > self.free_flow_speed {
            return Err(Error::Config(format!(
                "backward wave speed {} exceeds free-flow speed {}",
                self.backward_wave_speed, self.free_flow_speed
            )));
        }
        if self.capacity > self.free_flow_speed * self.jam_density {
            return Err(Error::Config(format!(
                "capacity {} exceeds v_f * k_jam = {}",
                self.capacity,
                self.free_flow_speed * self.jam_density
            )));
        }
        Ok(())
    }
}

/// Fixed-time signal: green on [green_start, green_end) within each cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPhase {
    pub cycle_s: f64,
    pub green_start_s: f64,
    pub green_end_s: f64,
}

impl SignalPhase {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.green_start_s
            && self.green_start_s < self.green_end_s
            && self.green_end_s <= self.cycle_s)
        {
            return Err(Error::Config(format!(
                "signal phase requires 0 <= green_start < green_end <= cycle, got [{}, {}) in cycle {}",
                self.green_start_s, self.green_end_s, self.cycle_s
            )));
        }
        Ok(())
    }

    pub fn is_green(&self, time_s: f64) -> bool {
        let phase = time_s.rem_euclid(self.cycle_s);
        self.green_start_s <= phase && phase < self.green_end_s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    /// Cell length Δx, km.
    pub length_km: f64,
    pub fd: FundamentalDiagram,
    /// Source cells accept external demand.
    #[serde(default)]
    pub is_source: bool,
    /// Sink cells discharge out of the network at their sending rate.
    #[serde(default)]
    pub is_sink: bool,
}

/// Directed connection between two cells, resolved to cell indices.
#[derive(Debug, Clone)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub turning_ratio: f64,
    pub signal: Option<SignalPhase>,
}

/// A validated cell network plus step length.
#[derive(Debug, Clone)]
pub struct Network {
    cells: Vec<Cell>,
    edges: Vec<Edge>,
    dt_s: f64,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

/// Serialized form of an edge (cells referenced by id).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub turning_ratio: f64,
    #[serde(default)]
    pub signal: Option<SignalPhase>,
}

/// The network description file: `cells`, `edges`, `dt_s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub dt_s: f64,
    pub cells: Vec<Cell>,
    pub edges: Vec<EdgeSpec>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let NetworkSpec { dt_s, cells, edges } = spec;
        if !(dt_s > 0.0) {
            return Err(Error::Config("dt_s must be positive".into()));
        }
        if cells.is_empty() {
            return Err(Error::Config("network has no cells".into()));
        }
        let mut index = std::collections::HashMap::new();
        for (i, cell) in cells.iter().enumerate() {
            if index.insert(cell.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate cell id '{}'", cell.id)));
            }
            cell.fd.validate().map_err(|e| {
                Error::Config(format!("cell '{}': {e}", cell.id))
            })?;
            if !(cell.length_km > 0.0) {
                return Err(Error::Config(format!(
                    "cell '{}': length must be positive",
                    cell.id
                )));
            }
            // CFL: a vehicle at free-flow speed must not cross a whole cell
            // in one step
            let travel_km = cell.fd.free_flow_speed * dt_s / 3600.0;
            if cell.length_km <= travel_km {
                return Err(Error::Config(format!(
                    "cell '{}' violates the CFL condition: length {} km must exceed v_f*dt = {} km",
                    cell.id, cell.length_km, travel_km
                )));
            }
        }
        let mut resolved = Vec::with_capacity(edges.len());
        for e in &edges {
            let from = *index.get(&e.from).ok_or_else(|| {
                Error::Config(format!("edge references unknown cell '{}'", e.from))
            })?;
            let to = *index.get(&e.to).ok_or_else(|| {
                Error::Config(format!("edge references unknown cell '{}'", e.to))
            })?;
            if from == to {
                return Err(Error::Config(format!("self-loop on cell '{}'", e.from)));
            }
            if !(0.0..=1.0).contains(&e.turning_ratio) {
                return Err(Error::Config(format!(
                    "turning ratio {} on edge {}->{} outside [0, 1]",
                    e.turning_ratio, e.from, e.to
                )));
            }
            if let Some(sig) = &e.signal {
                sig.validate()
                    .map_err(|err| Error::Config(format!("edge {}->{}: {err}", e.from, e.to)))?;
            }
            resolved.push(Edge {
                from,
                to,
                turning_ratio: e.turning_ratio,
                signal: e.signal.clone(),
            });
        }
        let mut out_edges = vec![Vec::new(); cells.len()];
        let mut in_edges = vec![Vec::new(); cells.len()];
        for (ei, e) in resolved.iter().enumerate() {
            out_edges[e.from].push(ei);
            in_edges[e.to].push(ei);
        }
        for (ci, cell) in cells.iter().enumerate() {
            if cell.is_sink {
                if !out_edges[ci].is_empty() {
                    return Err(Error::Config(format!(
                        "sink cell '{}' must not have outgoing edges",
                        cell.id
                    )));
                }
            } else {
                let sum: f64 = out_edges[ci]
                    .iter()
                    .map(|&ei| resolved[ei].turning_ratio)
                    .sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "turning ratios leaving non-sink cell '{}' sum to {} (expected 1)",
                        cell.id, sum
                    )));
                }
            }
        }
        Ok(Network {
            cells,
            edges: resolved,
            dt_s,
            out_edges,
            in_edges,
        })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(json)?;
        Self::new(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn dt_s(&self) -> f64 {
        self.dt_s
    }

    /// Step length in hours (flows are veh/h).
    pub fn dt_h(&self) -> f64 {
        self.dt_s / 3600.0
    }

    pub fn cell_index(&self, id: &str) -> Result<usize> {
        self.cells
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| Error::Config(format!("unknown cell id '{}'", id)))
    }

    pub fn out_edges(&self, cell: usize) -> &[usize] {
        &self.out_edges[cell]
    }

    pub fn in_edges(&self, cell: usize) -> &[usize] {
        &self.in_edges[cell]
    }

    /// Indices of source cells.
    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_source)
            .map(|(i, _)| i)
    }

    /// Dimension of the state vector y = (densities, per-cell flows).
    pub fn state_dim(&self) -> usize {
        2 * self.cells.len()
    }

    /// Checks the TrafficState invariants: density bounds and transfer-flow
    /// caps.
    pub fn validate_state(&self, state: &TrafficState) -> Result<()> {
        if state.densities.len() != self.cells.len() || state.edge_flows.len() != self.edges.len()
        {
            return Err(Error::Dimension("state does not match network".into()));
        }
        for (i, (&k, cell)) in state.densities.iter().zip(&self.cells).enumerate() {
            if !(0.0..=cell.fd.jam_density).contains(&k) {
                return Err(Error::Config(format!(
                    "density {} on cell {} outside [0, {}]",
                    k, i, cell.fd.jam_density
                )));
            }
        }
        for (ei, &q) in state.edge_flows.iter().enumerate() {
            let e = &self.edges[ei];
            let cap = self.cells[e.from]
                .fd
                .capacity
                .min(self.cells[e.to].fd.capacity);
            if !(0.0..=cap).contains(&q) {
                return Err(Error::Config(format!(
                    "transfer flow {} on edge {} outside [0, {}]",
                    q, ei, cap
                )));
            }
        }
        Ok(())
    }
}

/// Traffic state at one time step.
///
/// `densities` and `edge_flows` describe the step itself (`edge_flows` are
/// recomputed from the densities, so they are the flows acting over the next
/// interval). `boundary_inflow`/`boundary_outflow` record the flows across the
/// network boundary during the transition that produced this state; both are
/// zero in an initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    /// veh/km per cell.
    pub densities: Vec<f64>,
    /// veh/h per edge.
    pub edge_flows: Vec<f64>,
    /// veh/h admitted external demand per cell (nonzero on sources only).
    pub boundary_inflow: Vec<f64>,
    /// veh/h discharged out of the network per cell (nonzero on sinks only).
    pub boundary_outflow: Vec<f64>,
}

impl TrafficState {
    /// Zero-density state with flows consistent with it.
    pub fn empty(net: &Network) -> Self {
        TrafficState {
            densities: vec![0.0; net.n_cells()],
            edge_flows: vec![0.0; net.n_edges()],
            boundary_inflow: vec![0.0; net.n_cells()],
            boundary_outflow: vec![0.0; net.n_cells()],
        }
    }

    /// State with the given densities; edge flows are derived from them at
    /// step `t`.
    pub fn from_densities(net: &Network, densities: Vec<f64>, t: u64) -> Result<Self> {
        if densities.len() != net.n_cells() {
            return Err(Error::Dimension("density vector length".into()));
        }
        let flows = dynamics::flows(net, &densities, t);
        Ok(TrafficState {
            densities,
            edge_flows: flows.edge_flows,
            boundary_inflow: vec![0.0; net.n_cells()],
            boundary_outflow: vec![0.0; net.n_cells()],
        })
    }

    /// Total vehicles in the network, Σ k_n · Δx_n.
    pub fn total_vehicles(&self, net: &Network) -> f64 {
        self.densities
            .iter()
            .zip(net.cells())
            .map(|(&k, c)| k * c.length_km)
            .sum()
    }

    /// Flattens into the estimation layout: densities then per-cell outflows.
    pub fn to_state_vector(&self, net: &Network, t: u64) -> Vec<f64> {
        let mut y = self.densities.clone();
        y.extend(dynamics::cell_outflows(net, &self.densities, t));
        y
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn fd_invariants_enforced() {
        let mut bad = fd();
        bad.backward_wave_speed = 60.0;
        assert!(bad.validate().is_err());
        let mut bad = fd();
        bad.capacity = 50.0 * 150.0 + 1.0;
        assert!(bad.validate().is_err());
        let mut bad = fd();
        bad.jam_density = 0.0;
        assert!(bad.validate().is_err());
        assert!(fd().validate().is_ok());
    }

    #[test]
    fn cfl_violation_rejected_at_construction() {
        let mut c = cell("c0", true, true);
        c.length_km = 0.1; // 50 km/h * 10 s = 0.1389 km > 0.1
        let err = Network::new(NetworkSpec {
            dt_s: 10.0,
            cells: vec![c],
            edges: vec![],
        })
        .unwrap_err();
        assert!(err.to_string().contains("CFL"));
    }

    #[test]
    fn network_validation_errors_name_the_problem() {
        // unknown edge target
        let err = Network::new(NetworkSpec {
            dt_s: 10.0,
            cells: vec![cell("a", true, true)],
            edges: vec![EdgeSpec {
                from: "a".into(),
                to: "b".into(),
                turning_ratio: 1.0,
                signal: None,
            }],
        })
        .unwrap_err();
        assert!(err.to_string().contains("unknown cell"));

        // self loop
        let err = Network::new(NetworkSpec {
            dt_s: 10.0,
            cells: vec![cell("a", true, true)],
            edges: vec![EdgeSpec {
                from: "a".into(),
                to: "a".into(),
                turning_ratio: 1.0,
                signal: None,
            }],
        })
        .unwrap_err();
        assert!(err.to_string().contains("self-loop"));

        // turning ratios that do not sum to one
        let err = Network::new(NetworkSpec {
            dt_s: 10.0,
            cells: vec![cell("a", true, false), cell("b", false, true)],
            edges: vec![EdgeSpec {
                from: "a".into(),
                to: "b".into(),
                turning_ratio: 0.5,
                signal: None,
            }],
        })
        .unwrap_err();
        assert!(err.to_string().contains("sum to"));

        // sink with an outgoing edge
        let err = Network::new(NetworkSpec {
            dt_s: 10.0,
            cells: vec![cell("a", true, true), cell("b", false, true)],
            edges: vec![EdgeSpec {
                from: "a".into(),
                to: "b".into(),
                turning_ratio: 1.0,
                signal: None,
            }],
        })
        .unwrap_err();
        assert!(err.to_string().contains("sink"));
    }

    #[test]
    fn signal_phase_validation_and_green_window() {
        let sig = SignalPhase {
            cycle_s: 60.0,
            green_start_s: 10.0,
            green_end_s: 40.0,
        };
        assert!(sig.validate().is_ok());
        assert!(!sig.is_green(5.0));
        assert!(sig.is_green(10.0));
        assert!(sig.is_green(39.9));
        assert!(!sig.is_green(40.0));
        assert!(sig.is_green(70.0)); // wraps into the next cycle

        let bad = SignalPhase {
            cycle_s: 60.0,
            green_start_s: 40.0,
            green_end_s: 40.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_roundtrip_of_network_spec() {
        let json = r#"{
            "dt_s": 10.0,
            "cells": [
                {"id": "c0", "length_km": 0.15,
                 "fd": {"free_flow_speed": 50.0, "jam_density": 150.0,
                        "capacity": 1800.0, "backward_wave_speed": 20.0},
                 "is_source": true},
                {"id": "c1", "length_km": 0.15,
                 "fd": {"free_flow_speed": 50.0, "jam_density": 150.0,
                        "capacity": 1800.0, "backward_wave_speed": 20.0},
                 "is_sink": true}
            ],
            "edges": [
                {"from": "c0", "to": "c1", "turning_ratio": 1.0}
            ]
        }"#;
        let net = Network::from_json(json).unwrap();
        assert_eq!(net.n_cells(), 2);
        assert_eq!(net.n_edges(), 1);
        assert_eq!(net.cell_index("c1").unwrap(), 1);
        assert!(net.cell_index("zz").is_err());
    }
}
