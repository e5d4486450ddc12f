//! Synthetic vertically-partitioned datasets from a CTM simulation.
//!
//! The host (municipal authority) sees noisy loop counts on detector cells
//! plus full labels; each guest (mobility provider) sees per-cell fleet
//! aggregates — total travel time and total travel distance — thinned to its
//! penetration rate, plus speed/density measurements with a coverage mask.
//! All randomness is drawn from per-purpose seeded streams so that host data
//! is bit-identical across penetration settings.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctm::{self, Network, NetworkSpec};
use crate::error::{Error, Result};

/// Density floor used when forming speeds, to avoid division by zero.
pub const SPEED_DENSITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemandSegment {
    /// Step at which this segment's rates take effect.
    pub from_step: u64,
    /// veh/h per source cell id.
    pub rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinusoidSpec {
    /// Added on top of the segment rate of every source with a nonzero base.
    pub amplitude: f64,
    pub period_s: f64,
}

/// Piecewise-constant demand rates with an optional sinusoidal peak.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemandSpec {
    pub segments: Vec<DemandSegment>,
    #[serde(default)]
    pub peak: Option<SinusoidSpec>,
}

impl DemandSpec {
    fn rate(&self, net: &Network, t: u64, cell: usize, dt_s: f64) -> f64 {
        let id = &net.cells()[cell].id;
        let mut base = 0.0;
        for seg in &self.segments {
            if seg.from_step <= t {
                base = seg.rates.get(id).copied().unwrap_or(0.0);
            }
        }
        if base > 0.0 {
            if let Some(peak) = &self.peak {
                let phase = 2.0 * std::f64::consts::PI * (t as f64 * dt_s) / peak.period_s;
                base += peak.amplitude * phase.sin();
            }
        }
        base.max(0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Inline network description; exclusive with `network_file`.
    #[serde(default)]
    pub network: Option<NetworkSpec>,
    #[serde(default)]
    pub network_file: Option<PathBuf>,
    /// Number of recorded time steps T.
    pub horizon: usize,
    /// Steps simulated and discarded before recording starts.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Cells carrying the host's loop detectors.
    pub detector_cells: Vec<String>,
    /// Penetration rate per guest, in (0, 1].
    pub penetrations: Vec<f64>,
    /// Feature history window h.
    #[serde(default = "default_history")]
    pub history_window: usize,
    /// Loop-count noise σ_c, vehicles per step.
    #[serde(default)]
    pub loop_noise: f64,
    /// Relative speed-measurement noise σ_v.
    #[serde(default)]
    pub speed_noise: f64,
    /// Relative density-measurement noise σ_k.
    #[serde(default)]
    pub density_noise: f64,
    /// Process noise σ_ω on densities, veh/km per step.
    #[serde(default)]
    pub process_noise: f64,
    pub demand: DemandSpec,
    pub seed: u64,
}

fn default_warmup() -> usize {
    60
}

fn default_history() -> usize {
    9
}

impl ScenarioConfig {
    pub fn resolve_network(&self) -> Result<Network> {
        match (&self.network, &self.network_file) {
            (Some(spec), None) => Network::new(spec.clone()),
            (None, Some(path)) => Network::load(path),
            _ => Err(Error::Config(
                "exactly one of `network` or `network_file` must be set".into(),
            )),
        }
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.history_window < 1 {
            return Err(Error::Config("history window must be >= 1".into()));
        }
        if self.horizon <= self.history_window {
            return Err(Error::Config("horizon must exceed the history window".into()));
        }
        for id in &self.detector_cells {
            net.cell_index(id)?;
        }
        for &p in &self.penetrations {
            if !(0.0 < p && p <= 1.0) {
                return Err(Error::Config(format!("penetration {p} outside (0, 1]")));
            }
        }
        if self.penetrations.is_empty() {
            return Err(Error::Config("at least one guest penetration required".into()));
        }
        if self.loop_noise < 0.0
            || self.speed_noise < 0.0
            || self.density_noise < 0.0
            || self.process_noise < 0.0
        {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One aligned sample: everything every party knows about time step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: u64,
    /// Host features: h-step window of loop counts on detector cells.
    pub x_host: Vec<f64>,
    /// Guest features: h-step window of (travel time, travel distance) per
    /// cell, one vector per guest.
    pub x_guest_k: Vec<Vec<f64>>,
    /// Ground truth: densities then per-cell flows (2N).
    pub labels: Vec<f64>,
    /// Host measurements: detector flows, veh/h.
    pub u_host: Vec<f64>,
    /// Guest measurements: speeds then densities per cell (2N), zero where
    /// uncovered.
    pub u_guest_k: Vec<Vec<f64>>,
    /// Coverage per measurement entry, same layout as `u_guest_k`.
    pub mask_k: Vec<Vec<bool>>,
}

/// A generated scenario: aligned records plus the metadata needed to
/// interpret them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub n_cells: usize,
    pub n_guests: usize,
    pub history_window: usize,
    pub detector_cells: Vec<usize>,
    /// Absolute simulation step of record 0 (signal phases depend on it).
    pub step_offset: u64,
    pub dt_s: f64,
    pub penetrations: Vec<f64>,
}

impl Dataset {
    pub fn host_dim(&self) -> usize {
        self.history_window * self.detector_cells.len()
    }

    pub fn guest_dim(&self) -> usize {
        self.history_window * 2 * self.n_cells
    }

    pub fn label_dim(&self) -> usize {
        2 * self.n_cells
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Contiguous chronological split: 70% train, 10% validation, 20% test.
    pub fn split(&self) -> Result<(SplitView, SplitView, SplitView)> {
        let t = self.len();
        if t < 40 {
            return Err(Error::Config(format!(
                "dataset too short: {t} samples, need at least 40 to split"
            )));
        }
        let n_train = t * 7 / 10;
        let n_val = t / 10;
        Ok((
            SplitView { start: 0, end: n_train },
            SplitView { start: n_train, end: n_train + n_val },
            SplitView { start: n_train + n_val, end: t },
        ))
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads records back; metadata comes from the scenario config.
    pub fn load_jsonl(path: &Path, config: &ScenarioConfig, net: &Network) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<Record>(&line)?);
        }
        let detector_cells = config
            .detector_cells
            .iter()
            .map(|id| net.cell_index(id))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            records,
            n_cells: net.n_cells(),
            n_guests: config.penetrations.len(),
            history_window: config.history_window,
            detector_cells,
            step_offset: config.warmup_steps as u64,
            dt_s: net.dt_s(),
            penetrations: config.penetrations.clone(),
        };
        ds.check_shapes()?;
        Ok(ds)
    }

    fn check_shapes(&self) -> Result<()> {
        for rec in &self.records {
            if rec.x_host.len() != self.host_dim()
                || rec.labels.len() != self.label_dim()
                || rec.x_guest_k.len() != self.n_guests
                || rec.x_guest_k.iter().any(|x| x.len() != self.guest_dim())
                || rec.u_guest_k.iter().any(|u| u.len() != self.label_dim())
                || rec.mask_k.iter().any(|m| m.len() != self.label_dim())
            {
                return Err(Error::Dimension(format!(
                    "record t={} does not match the scenario shapes",
                    rec.t
                )));
            }
        }
        Ok(())
    }
}

/// Half-open index range into a dataset's records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitView {
    pub start: usize,
    pub end: usize,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.start..self.end
    }
}

fn stream_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_be_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

/// Vehicle-mass thinning: the expected full-population mass `n_veh` observed
/// at penetration `p`. Exactly unbiased for every p; deterministic full mass
/// at p = 1.
fn thin(n_veh: f64, p: f64, rng: &mut ChaCha8Rng) -> f64 {
    if n_veh <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return n_veh;
    }
    let whole = n_veh.floor();
    let frac = n_veh - whole;
    let mut m = if whole >= 1.0 {
        Binomial::new(whole as u64, p).expect("valid p").sample(rng) as f64
    } else {
        0.0
    };
    // fractional vehicle present with probability frac, then thinned
    if rng.gen::<f64>() < frac * p {
        m += 1.0;
    }
    m
}

/// Generates the aligned dataset for one scenario. Deterministic for a fixed
/// config; host-side data does not depend on the guest penetrations.
pub fn generate(config: &ScenarioConfig) -> Result<(Network, Dataset)> {
    let net = config.resolve_network()?;
    config.validate(&net)?;
    let n = net.n_cells();
    let t_total = config.warmup_steps + config.horizon;
    let demand_spec = config.demand.clone();
    let dt_s = net.dt_s();
    let net_ref = &net;
    let demand = move |t: u64, cell: usize| demand_spec.rate(net_ref, t, cell, dt_s);

    let states = ctm::simulate(
        &net,
        crate::ctm::TrafficState::empty(&net),
        &demand,
        t_total as u64,
        config.process_noise,
        stream_seed(config.seed, "process"),
    );

    let detector_cells: Vec<usize> = config
        .detector_cells
        .iter()
        .map(|id| net.cell_index(id))
        .collect::<Result<Vec<_>>>()?;

    // labels and full-population aggregates per recorded step
    let offset = config.warmup_steps as u64;
    let t_rec = config.horizon;
    let dt_h = net.dt_h();
    let mut labels = Vec::with_capacity(t_rec);
    for t in 0..t_rec {
        let abs = offset + t as u64;
        labels.push(states[abs as usize].to_state_vector(&net, abs));
    }

    // host loop counts: one noise draw per (detector, step)
    let mut loop_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "loop"));
    let loop_noise = if config.loop_noise > 0.0 {
        Some(Normal::new(0.0, config.loop_noise).expect("nonnegative"))
    } else {
        None
    };
    let mut counts = vec![vec![0.0; detector_cells.len()]; t_rec];
    for (t, row) in counts.iter_mut().enumerate() {
        for (d, &cell) in detector_cells.iter().enumerate() {
            let flow = labels[t][n + cell];
            let mut c = flow * dt_h;
            if let Some(dist) = &loop_noise {
                c += dist.sample(&mut loop_rng);
            }
            row[d] = c.max(0.0);
        }
    }

    // guest aggregates: per (guest, cell, step) streams so that different
    // penetrations consume aligned randomness
    let n_guests = config.penetrations.len();
    let mut travel_time = vec![vec![vec![0.0; n]; t_rec]; n_guests];
    let mut travel_dist = vec![vec![vec![0.0; n]; t_rec]; n_guests];
    let mut speeds = vec![vec![vec![0.0; n]; t_rec]; n_guests];
    let mut dens_meas = vec![vec![vec![0.0; n]; t_rec]; n_guests];
    let mut masks = vec![vec![vec![false; n]; t_rec]; n_guests];
    for g in 0..n_guests {
        let p = config.penetrations[g];
        for t in 0..t_rec {
            for cell in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                    config.seed,
                    &format!("guest{g}:{cell}:{t}"),
                ));
                let k = labels[t][cell];
                let q = labels[t][n + cell];
                let v = q / k.max(SPEED_DENSITY_FLOOR);
                let n_veh = k * net.cells()[cell].length_km;
                let m_eff = thin(n_veh, p, &mut rng);
                travel_time[g][t][cell] = m_eff * dt_h;
                travel_dist[g][t][cell] = m_eff * v * dt_h;
                let covered = m_eff >= 1.0;
                masks[g][t][cell] = covered;
                if covered {
                    let eps_v: f64 = if config.speed_noise > 0.0 {
                        Normal::new(0.0, config.speed_noise).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    };
                    let eps_k: f64 = if config.density_noise > 0.0 {
                        Normal::new(0.0, config.density_noise).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    };
                    // sampled speed is distance over time, which the thinning
                    // leaves untouched; noise is relative
                    speeds[g][t][cell] = v * (1.0 + eps_v);
                    dens_meas[g][t][cell] =
                        m_eff / (p * net.cells()[cell].length_km) * (1.0 + eps_k);
                }
            }
        }
    }

    let h = config.history_window;
    let mut records = Vec::with_capacity(t_rec);
    for t in 0..t_rec {
        let mut x_host = Vec::with_capacity(h * detector_cells.len());
        for back in (0..h).rev() {
            for d in 0..detector_cells.len() {
                x_host.push(if t >= back { counts[t - back][d] } else { 0.0 });
            }
        }
        let mut x_guest_k = Vec::with_capacity(n_guests);
        let mut u_guest_k = Vec::with_capacity(n_guests);
        let mut mask_k = Vec::with_capacity(n_guests);
        for g in 0..n_guests {
            let mut x = Vec::with_capacity(h * 2 * n);
            for back in (0..h).rev() {
                for cell in 0..n {
                    if t >= back {
                        x.push(travel_time[g][t - back][cell]);
                        x.push(travel_dist[g][t - back][cell]);
                    } else {
                        x.push(0.0);
                        x.push(0.0);
                    }
                }
            }
            x_guest_k.push(x);
            let mut u = Vec::with_capacity(2 * n);
            u.extend_from_slice(&speeds[g][t]);
            u.extend_from_slice(&dens_meas[g][t]);
            u_guest_k.push(u);
            let mut m = Vec::with_capacity(2 * n);
            m.extend_from_slice(&masks[g][t]);
            m.extend_from_slice(&masks[g][t]);
            mask_k.push(m);
        }
        let u_host = detector_cells
            .iter()
            .enumerate()
            .map(|(d, _)| counts[t][d] / dt_h)
            .collect();
        records.push(Record {
            t: t as u64,
            x_host,
            x_guest_k,
            labels: labels[t].clone(),
            u_host,
            u_guest_k,
            mask_k,
        });
    }

    Ok((
        net,
        Dataset {
            records,
            n_cells: n,
            n_guests,
            history_window: h,
            detector_cells,
            step_offset: offset,
            dt_s,
            penetrations: config.penetrations.clone(),
        },
    ))
}
