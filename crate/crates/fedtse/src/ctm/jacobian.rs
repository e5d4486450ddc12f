//! Piecewise derivative of the one-step predictor.
//!
//! Each min picks the branch that is active at the evaluation point; at an
//! exact tie the first argument as written in the flow equations wins
//! (capacity for sending, the congestion term for receiving, total sending
//! for the inflow min). The result matches central finite differences away
//! from those kinks.

use ndarray::Array2;

use super::dynamics;
use super::Network;

/// Derivative of every transfer flow and sink discharge with respect to the
/// density vector, at the active branches of step `t`.
struct FlowDerivatives {
    /// dq_e/dk_m is nonzero only for m ∈ {from(e), to(e)} ∪ upstream(to(e)).
    /// Stored dense per edge: row = edge, col = cell.
    edge: Array2<f64>,
    /// d(sink discharge_n)/dk_n (diagonal by construction).
    sink: Vec<f64>,
}

fn flow_derivatives(net: &Network, densities: &[f64], t: u64) -> FlowDerivatives {
    let n_cells = net.n_cells();
    let n_edges = net.n_edges();
    let fs = dynamics::flows(net, densities, t);

    // dS_e/dk_from: active branch of green · p · min(q_c, v_f k)
    let mut d_send = vec![0.0; n_edges];
    for (ei, e) in net.edges().iter().enumerate() {
        let cell = &net.cells()[e.from];
        let green = e
            .signal
            .as_ref()
            .map_or(true, |s| s.is_green(t as f64 * net.dt_s()));
        let demanded = cell.fd.free_flow_speed * densities[e.from];
        if green && demanded < cell.fd.capacity {
            d_send[ei] = e.turning_ratio * cell.fd.free_flow_speed;
        }
    }

    // dR_n/dk_n: active branch of min(w (k_jam − k), q_c)
    let mut d_recv = vec![0.0; n_cells];
    for (n, cell) in net.cells().iter().enumerate() {
        let congestion = cell.fd.backward_wave_speed * (cell.fd.jam_density - densities[n]);
        if congestion <= cell.fd.capacity {
            d_recv[n] = -cell.fd.backward_wave_speed;
        }
    }

    let mut edge = Array2::zeros((n_edges, n_cells));
    for n in 0..n_cells {
        let in_edges = net.in_edges(n);
        if in_edges.is_empty() {
            continue;
        }
        let total_sending: f64 = in_edges.iter().map(|&ei| fs.sendings[ei]).sum();
        if total_sending <= 0.0 {
            continue; // constant-zero branch
        }
        if total_sending <= fs.receiving[n] {
            // q_e = S_e
            for &ei in in_edges {
                let from = net.edges()[ei].from;
                edge[(ei, from)] += d_send[ei];
            }
        } else {
            // q_e = S_e · R_n / ΣS
            let r = fs.receiving[n];
            for &ei in in_edges {
                let s_e = fs.sendings[ei];
                let from = net.edges()[ei].from;
                // ∂/∂k_from(e): dS_e · R/ΣS − S_e R/ΣS² · dS_e, plus the
                // cross terms from the other upstream sendings
                edge[(ei, from)] += d_send[ei] * r / total_sending;
                for &ej in in_edges {
                    let from_j = net.edges()[ej].from;
                    edge[(ei, from_j)] -=
                        s_e * r / (total_sending * total_sending) * d_send[ej];
                }
                // ∂/∂k_n through R
                edge[(ei, n)] += s_e / total_sending * d_recv[n];
            }
        }
    }

    let mut sink = vec![0.0; n_cells];
    for (i, cell) in net.cells().iter().enumerate() {
        if cell.is_sink && cell.fd.free_flow_speed * densities[i] < cell.fd.capacity {
            sink[i] = cell.fd.free_flow_speed;
        }
    }

    FlowDerivatives { edge, sink }
}

/// N×N Jacobian of the per-cell outflow vector with respect to densities.
pub fn outflow_jacobian(net: &Network, densities: &[f64], t: u64) -> Array2<f64> {
    let n_cells = net.n_cells();
    let d = flow_derivatives(net, densities, t);
    let mut jac = Array2::zeros((n_cells, n_cells));
    for n in 0..n_cells {
        for &ei in net.out_edges(n) {
            for m in 0..n_cells {
                jac[(n, m)] += d.edge[(ei, m)];
            }
        }
        jac[(n, n)] += d.sink[n];
    }
    jac
}

/// N×N Jacobian of the density update k' = k + (Δt/Δx)(inflow − outflow)
/// with respect to densities (no external demand).
pub fn density_update_jacobian(net: &Network, densities: &[f64], t: u64) -> Array2<f64> {
    let n_cells = net.n_cells();
    let d = flow_derivatives(net, densities, t);
    let dt_h = net.dt_h();
    let mut jac = Array2::eye(n_cells);
    for n in 0..n_cells {
        let c = dt_h / net.cells()[n].length_km;
        for &ei in net.in_edges(n) {
            for m in 0..n_cells {
                jac[(n, m)] += c * d.edge[(ei, m)];
            }
        }
        for &ei in net.out_edges(n) {
            for m in 0..n_cells {
                jac[(n, m)] -= c * d.edge[(ei, m)];
            }
        }
        jac[(n, n)] -= c * d.sink[n];
    }
    jac
}

/// Full 2N×2N Jacobian of the predictor `g` with respect to the flattened
/// state (densities, cell outflows). Flows are recomputed from densities, so
/// the columns for the flow half of the input are zero.
pub fn step_jacobian(net: &Network, y: &[f64], t: u64) -> Array2<f64> {
    let n = net.n_cells();
    let densities = &y[..n];
    let j_kk = density_update_jacobian(net, densities, t);
    // flow half of the output: outflow(k', t+1) chained through k'
    let fs = dynamics::flows(net, densities, t);
    let next = next_densities_no_demand(net, densities, &fs);
    let out_jac = outflow_jacobian(net, &next, t + 1);
    let j_qk = out_jac.dot(&j_kk);

    let mut jac = Array2::zeros((2 * n, 2 * n));
    jac.slice_mut(ndarray::s![..n, ..n]).assign(&j_kk);
    jac.slice_mut(ndarray::s![n.., ..n]).assign(&j_qk);
    jac
}

fn next_densities_no_demand(net: &Network, densities: &[f64], fs: &dynamics::FlowSet) -> Vec<f64> {
    let dt_h = net.dt_h();
    let outflows = super::dynamics::cell_outflows_from(net, fs);
    (0..net.n_cells())
        .map(|i| {
            let inflow: f64 = net.in_edges(i).iter().map(|&e| fs.edge_flows[e]).sum();
            densities[i] + dt_h / net.cells()[i].length_km * (inflow - outflows[i])
        })
        .collect()
}

/// True when some min in the flow equations is within `margin` (relative) of
/// its kink at this state, i.e. where the piecewise derivative is not a
/// reliable finite-difference target.
pub fn near_kink(net: &Network, densities: &[f64], t: u64, margin: f64) -> bool {
    let fs = dynamics::flows(net, densities, t);
    let close = |a: f64, b: f64| (a - b).abs() <= margin * a.abs().max(b.abs()).max(1.0);
    for (i, cell) in net.cells().iter().enumerate() {
        if close(cell.fd.free_flow_speed * densities[i], cell.fd.capacity) {
            return true;
        }
        let congestion = cell.fd.backward_wave_speed * (cell.fd.jam_density - densities[i]);
        if close(congestion, cell.fd.capacity) {
            return true;
        }
        let total_sending: f64 = net.in_edges(i).iter().map(|&e| fs.sendings[e]).sum();
        if !net.in_edges(i).is_empty() && close(total_sending, fs.receiving[i]) {
            return true;
        }
        if !net.in_edges(i).is_empty() && total_sending.abs() <= margin {
            return true;
        }
    }
    false
}
