//! Scratch diagnostic for acceptance scenario tuning; not part of the library.

use std::time::Instant;

use gppce::config::{ControllerKind, RunConfig};
use gppce::gppce::estimate;
use gppce::mc::{closed_loop_mc, mc_truth_all, McOptions};
use gppce::reactor::{
    constraint_namw, constraint_path, constraint_ppm, ControlInput, COOL_BOUNDS, FEED_BOUNDS,
};
use gppce::snmpc::rollout_scenarios;

fn main() {
    let cfg = RunConfig::default();
    let plant = cfg.plant.clone();
    let families = cfg.build_families().unwrap();

    // Criterion-5 shape: constant upper-bound controls.
    let horizon = cfg.ocp.horizon;
    let t_batch = cfg.mc.accuracy_t_batch;
    let dt = t_batch / horizon as f64;
    let controls =
        vec![ControlInput { feed: FEED_BOUNDS.1, t_cool: COOL_BOUNDS.1 }; horizon];

    let clock = Instant::now();
    let truth = mc_truth_all(&plant, &controls, t_batch, 100_000, 0, cfg.ocp.substeps).unwrap();
    println!("truth (1e5 samples) took {:.1} s", clock.elapsed().as_secs_f64());
    for (name, (m, v)) in ["g_path_end", "g_namw", "g_ppm"].iter().zip(truth) {
        println!("  {name}: mean {m:.6e} var {v:.6e}");
    }

    let design = families.path.config().design.clone();
    let thetas: Vec<Vec<f64>> = design.rows().map(|r| r.to_vec()).collect();
    let trajs =
        rollout_scenarios(&plant, &plant.init, &thetas, &controls, dt, cfg.ocp.substeps).unwrap();
    let mut z = [vec![], vec![], vec![]];
    for traj in &trajs {
        let last = traj.last().unwrap();
        z[0].push(constraint_path(last));
        z[1].push(constraint_namw(&plant, last).unwrap());
        z[2].push(constraint_ppm(&plant, last));
    }
    let pres = [&families.path, &families.namw, &families.ppm];
    for i in 0..3 {
        let est = estimate(pres[i], &z[i]).unwrap();
        let (mt, vt) = truth[i];
        println!(
            "  est[{i}]: mean {:.6e} (rel {:+.4})  var {:.6e} (rel {:+.4})  alpha2 {:.3e}",
            est.mean,
            (est.mean - mt) / mt.abs().max(1e-300),
            est.var_gp,
            (est.var_gp - vt) / vt.abs().max(1e-300),
            est.alpha2
        );
    }

    // Criterion-7 cost probe: one run per controller at the configured caps.
    for (kind, iters) in [
        (ControllerKind::Nominal, 160),
        (ControllerKind::Snmpc, 160),
        (ControllerKind::Unscented, 160),
    ] {
        let mut cfg_run = RunConfig::default();
        cfg_run.ocp.solver.max_iter = iters;
        let fams = if kind == ControllerKind::Snmpc { Some(families.clone()) } else { None };
        let ctrl = cfg_run.build_controller(kind, fams).unwrap();
        let opts = McOptions { n_runs: 1, master_seed: 0, controller_label: kind.as_str().into() };
        let clock = Instant::now();
        let (records, summary) = closed_loop_mc(&ctrl, &opts).unwrap();
        let r = &records[0];
        println!(
            "{} run: {:.1} s wall, batch {:.0} s, maxg {:.2}, g1n {:.1}, g2n {:.1}, failed {}, fallbacks {}",
            kind.as_str(),
            clock.elapsed().as_secs_f64(),
            r.batch_time,
            r.max_path_g,
            r.g1n,
            r.g2n,
            r.failed,
            summary.fallback_steps_total
        );
    }
}
