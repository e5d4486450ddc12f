//! Tuning probes for the corridor scenario (ignored by default).

mod common;

use common::*;
use fedtse::eval::{run_baseline, Method};
use fedtse::scenario::generate;

#[test]
#[ignore]
fn probe_supervised_corridor() {
    let scenario = corridor_scenario(1, 0.2, 3000);
    let (net, ds) = generate(&scenario).unwrap();
    let label_stats: Vec<f64> = {
        let m = fedtse::protocol::model::labels_matrix(&ds);
        (0..9)
            .map(|j| {
                let col = m.column(j);
                let mean = col.sum() / col.len() as f64;
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt()
            })
            .collect()
    };
    println!("label density stds: {label_stats:?}");
    for eta in [3e-2, 6e-2] {
        for method in [Method::TseN, Method::TseP, Method::Fedtse] {
            let mut cfg = supervised_cfg(1);
            cfg.eta_host = eta;
            cfg.eta_guest = eta;
            cfg.max_rounds = 4000;
            cfg.patience = 60;
            let t0 = std::time::Instant::now();
            let run = run_baseline(method, &ds, &net, &scenario, &cfg).unwrap();
            println!(
                "eta={eta} {}: density RMSE {:.3} (rounds {} in {:.1}s, best val {:.3})",
                method.as_str(),
                run.report.density_rmse,
                run.outcome.rounds_run,
                t0.elapsed().as_secs_f64(),
                run.outcome
                    .history
                    .iter()
                    .map(|m| m.score)
                    .fold(f64::INFINITY, f64::min)
            );
        }
    }
}

#[test]
#[ignore]
fn probe_penetration_effect() {
    for pen in [0.2, 0.4, 0.6, 0.8] {
        let scenario = corridor_scenario(1, pen, 3000);
        let (net, ds) = generate(&scenario).unwrap();
        let mut cfg = supervised_cfg(1);
        cfg.eta_host = 0.05;
        cfg.eta_guest = 0.05;
        cfg.max_rounds = 4000;
        cfg.patience = 60;
        let run = run_baseline(Method::Fedtse, &ds, &net, &scenario, &cfg).unwrap();
        println!(
            "pen={pen}: fedtse density RMSE {:.3} (rounds {})",
            run.report.density_rmse, run.outcome.rounds_run
        );
    }
}

#[test]
#[ignore]
fn probe_physics_corridor() {
    let scenario = corridor_scenario(1, 0.6, 3000);
    let (net, ds) = generate(&scenario).unwrap();
    for eta in [1e-7, 1e-6, 5e-6, 2e-5] {
        let mut cfg = physics_cfg(1);
        cfg.eta_host = eta;
        cfg.eta_guest = eta;
        let t0 = std::time::Instant::now();
        match run_baseline(Method::FedtsePi, &ds, &net, &scenario, &cfg) {
            Ok(run) => {
                let hist: Vec<String> = run
                    .outcome
                    .history
                    .iter()
                    .map(|m| format!("{:.0}", m.score))
                    .collect();
                println!(
                    "eta={eta}: density RMSE {:.3} flow RMSE {:.3} ({:.1}s) surrogate: {}",
                    run.report.density_rmse,
                    run.report.flow_rmse,
                    t0.elapsed().as_secs_f64(),
                    hist.join(" ")
                );
            }
            Err(e) => println!("eta={eta}: FAILED {e}"),
        }
    }
}

#[test]
#[ignore]
fn probe_q_effect() {
    let scenario = corridor_scenario(1, 0.4, 3000);
    let (net, ds) = generate(&scenario).unwrap();
    for q in [1usize, 2, 3] {
        let mut cfg = supervised_cfg(1);
        cfg.q = q;
        cfg.eta_host = 0.05;
        cfg.eta_guest = 0.05;
        cfg.max_rounds = 2500;
        cfg.patience = 10_000;
        let run = run_baseline(Method::Fedtse, &ds, &net, &scenario, &cfg).unwrap();
        let best = run
            .outcome
            .history
            .iter()
            .map(|m| m.score)
            .fold(f64::INFINITY, f64::min);
        let hist: Vec<String> = run
            .outcome
            .history
            .iter()
            .step_by(10)
            .map(|m| format!("{:.2}", m.score))
            .collect();
        println!("q={q}: best val {best:.3}: {}", hist.join(" "));
    }
}


#[test]
#[ignore]
fn probe_physics_clipped() {
    let scenario = corridor_scenario(1, 0.6, 3000);
    let (net, ds) = generate(&scenario).unwrap();
    for (eta, clip) in [
        (1e-5, 1e3),
        (1e-4, 1e3),
        (3e-4, 1e3),
        (1e-4, 1e4),
        (3e-5, 1e4),
    ] {
        let mut cfg = physics_cfg(1);
        cfg.eta_host = eta;
        cfg.eta_guest = eta;
        cfg.grad_clip = Some(clip);
        cfg.max_rounds = 300;
        let t0 = std::time::Instant::now();
        match run_baseline(Method::FedtsePi, &ds, &net, &scenario, &cfg) {
            Ok(run) => {
                let hist: Vec<String> = run
                    .outcome
                    .history
                    .iter()
                    .step_by(3)
                    .map(|m| format!("{:.0}", m.score))
                    .collect();
                println!(
                    "eta={eta} clip={clip}: density RMSE {:.3} flow RMSE {:.3} ({:.1}s) surrogate: {}",
                    run.report.density_rmse,
                    run.report.flow_rmse,
                    t0.elapsed().as_secs_f64(),
                    hist.join(" ")
                );
            }
            Err(e) => println!("eta={eta} clip={clip}: FAILED {e}"),
        }
    }
}


#[test]
#[ignore]
fn probe_small_arch_capacity() {
    let scenario = corridor_scenario(1, 0.6, 3000);
    let (net, ds) = generate(&scenario).unwrap();
    for dz in [2usize, 4] {
        let mut cfg = supervised_cfg(1);
        cfg.model = fedtse::protocol::model::ModelConfig {
            sub_hidden: vec![16],
            global_hidden: vec![24],
            output_dim: dz,
        };
        cfg.eta_host = 0.05;
        cfg.eta_guest = 0.05;
        cfg.max_rounds = 3000;
        cfg.patience = 100;
        let run = run_baseline(Method::Fedtse, &ds, &net, &scenario, &cfg).unwrap();
        println!(
            "supervised small arch dz={dz}: density RMSE {:.3} flow RMSE {:.3} (rounds {})",
            run.report.density_rmse, run.report.flow_rmse, run.outcome.rounds_run
        );
    }
}

#[test]
#[ignore]
fn probe_physics_long() {
    let scenario = corridor_scenario(1, 0.6, 3000);
    let (net, ds) = generate(&scenario).unwrap();
    for (dz, eta, clip, sigma_scale, rounds) in [
        (2usize, 3e-4, 1e3, 1.0, 3000usize),
        (4, 3e-4, 1e3, 1.0, 3000),
        (4, 1e-3, 1e3, 1.0, 3000),
        (4, 3e-4, 1e3, 4.0, 3000),
        (4, 1e-3, 3e3, 4.0, 3000),
    ] {
        let mut cfg = physics_cfg(1);
        cfg.model.output_dim = dz;
        cfg.eta_host = eta;
        cfg.eta_guest = eta;
        cfg.grad_clip = Some(clip);
        cfg.max_rounds = rounds;
        cfg.eval_every = 100;
        // sigma_scale multiplies the process std via the scenario noise field
        let mut sc = scenario.clone();
        sc.process_noise *= sigma_scale;
        let t0 = std::time::Instant::now();
        match run_baseline(Method::FedtsePi, &ds, &net, &sc, &cfg) {
            Ok(run) => println!(
                "dz={dz} eta={eta} clip={clip} sig={sigma_scale}: density RMSE {:.3} flow RMSE {:.3} ({:.0}s, {} rounds)",
                run.report.density_rmse,
                run.report.flow_rmse,
                t0.elapsed().as_secs_f64(),
                run.outcome.rounds_run
            ),
            Err(e) => println!("dz={dz} eta={eta} clip={clip} sig={sigma_scale}: FAILED {e}"),
        }
    }
}
