//! Regenerates the reactor regression fixtures: prints the golden literals
//! pasted into the unit tests and rewrites the nominal trajectory CSV used by
//! the integration tests. Run from the crate root after any intentional change
//! to the model equations:
//!
//!     cargo run -p gppce --example gen_fixtures

use std::fmt::Write as _;
use std::fs;

use gppce::reactor::{
    constraint_namw, constraint_ppm, integrate_interval, rhs, theta_to_params, ControlInput,
    PlantConstants,
};

fn main() {
    let c = PlantConstants::default();
    let p = theta_to_params(&[0.0, 0.0, 0.0]).unwrap();

    let u = ControlInput { feed: 0.1, t_cool: 298.15 };
    let d = rhs(&c, &c.init, &u, &p).unwrap();
    println!("rhs golden vector at (init, feed 0.1, coolant 298.15, theta 0):");
    for v in d {
        println!("    {v:.16e},");
    }

    let controls: Vec<ControlInput> = (0..12)
        .map(|k| ControlInput {
            feed: 0.02 + 0.005 * (k % 3) as f64,
            t_cool: 300.0 + 4.0 * k as f64,
        })
        .collect();
    let dt = 7000.0 / 12.0;
    let mut csv = String::from("k,mass,temp,water,monomer,x0,gx0,gx1\n");
    let mut x = c.init;
    for (k, uk) in controls.iter().enumerate() {
        x = integrate_interval(&c, &x, uk, dt, &p, 2000).unwrap();
        let a = x.to_array();
        writeln!(
            csv,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            k + 1,
            a[0],
            a[1],
            a[2],
            a[3],
            a[4],
            a[5],
            a[6]
        )
        .unwrap();
    }
    let namw = c.mw_po * x.gx1 / x.gx0;
    let ppm = 1e6 * c.mw_po * x.monomer / x.mass;
    println!("\nnominal 12-interval batch (dt {dt:.6} s, 2000 substeps):");
    println!("    namw = {namw:.12e}");
    println!("    ppm  = {ppm:.12e}");
    println!("    g1n  = {:.12e}", constraint_namw(&c, &x).unwrap());
    println!("    g2n  = {:.12e}", constraint_ppm(&c, &x));

    let out = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/nominal_trajectory.csv");
    fs::create_dir_all(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures")).unwrap();
    fs::write(out, csv).unwrap();
    println!("\nwrote {out}");
}
