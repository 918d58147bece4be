//! Replays the stored nominal batch trajectory and compares state by state
//! against the CSV fixture. Regenerate the fixture with the gen_fixtures
//! example after any intentional model change.

use gppce::reactor::{integrate_interval, theta_to_params, ControlInput, PlantConstants};

#[test]
fn nominal_trajectory_matches_csv_fixture() {
    let text = include_str!("fixtures/nominal_trajectory.csv");
    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("k,mass,temp,water,monomer,x0,gx0,gx1"));

    let c = PlantConstants::default();
    let p = theta_to_params(&[0.0, 0.0, 0.0]).unwrap();
    let dt = 7000.0 / 12.0;
    let mut x = c.init;
    for (k, row) in rows.enumerate() {
        let u = ControlInput {
            feed: 0.02 + 0.005 * (k % 3) as f64,
            t_cool: 300.0 + 4.0 * k as f64,
        };
        x = integrate_interval(&c, &x, &u, dt, &p, 2000).unwrap();
        let fields: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[0] as usize, k + 1);
        for (have, want) in x.to_array().iter().zip(&fields[1..]) {
            assert!(
                (have - want).abs() <= 1e-9 * (1.0 + want.abs()),
                "interval {}: state {have} vs fixture {want}",
                k + 1
            );
        }
    }
}
