//! Semi-batch propylene-oxide polymerization reactor: moment-based 7-state model
//! with temperature-dependent kinetics, three uncertain physical parameters driven
//! by a standard-normal input vector, a fixed-step RK4 integrator, and the
//! constraint and objective evaluators used by the controller and the Monte Carlo
//! harnesses.
//!
//! Units follow the model definition: kg, K, kmol, kJ, kW, seconds; volumes in m3.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feed-rate bounds in kmol/s.
pub const FEED_BOUNDS: (f64, f64) = (0.0, 0.1);
/// Coolant-temperature bounds in K.
pub const COOL_BOUNDS: (f64, f64) = (298.15, 423.15);

/// Weights of the control-move penalty, feed and coolant respectively.
pub const DU_WEIGHT_FEED: f64 = 1e-6;
pub const DU_WEIGHT_COOL: f64 = 1e-4;

/// Reactor temperature ceiling for the path constraint, K.
pub const TEMP_LIMIT: f64 = 420.0;
/// Number-average molecular weight target, kg/kmol.
pub const NAMW_TARGET: f64 = 1500.0;
/// Residual monomer ceiling, ppm by mass.
pub const PPM_LIMIT: f64 = 1000.0;

/// The seven plant states. Moments of the chain-length distribution stand in for
/// the full population balance: `x0` is unreacted methanol, `gx0` and `gx1` the
/// zeroth and first moments of the dormant plus active product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactorState {
    /// Liquid mass, kg.
    pub mass: f64,
    /// Reactor temperature, K.
    pub temp: f64,
    /// Water, kmol.
    pub water: f64,
    /// Monomer, kmol.
    pub monomer: f64,
    /// Methanol, kmol.
    pub x0: f64,
    /// Zeroth polymer moment, kmol.
    pub gx0: f64,
    /// First polymer moment, kmol.
    pub gx1: f64,
}

impl ReactorState {
    pub fn to_array(self) -> [f64; 7] {
        [self.mass, self.temp, self.water, self.monomer, self.x0, self.gx0, self.gx1]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        ReactorState {
            mass: a[0],
            temp: a[1],
            water: a[2],
            monomer: a[3],
            x0: a[4],
            gx0: a[5],
            gx1: a[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Piecewise-constant controls over one sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Monomer feed rate, kmol/s.
    pub feed: f64,
    /// Cooling water temperature, K.
    pub t_cool: f64,
}

impl ControlInput {
    /// Projects both components onto their admissible intervals.
    pub fn clamped(self) -> Self {
        ControlInput {
            feed: self.feed.clamp(FEED_BOUNDS.0, FEED_BOUNDS.1),
            t_cool: self.t_cool.clamp(COOL_BOUNDS.0, COOL_BOUNDS.1),
        }
    }
}

/// Physical parameters treated as uncertain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertainParams {
    /// Propagation pre-exponential factor, m3/kmol/s.
    pub a_p: f64,
    /// Overall heat-transfer coefficient, kW/K.
    pub ua: f64,
    /// Catalyst amount, kmol.
    pub n_c: f64,
}

/// Maps a standard-normal 3-vector to the physical uncertain parameters. The
/// composition with nonlinearities gives the parameters skewed, bounded
/// distributions: a_p > 5e6, ua in [0, 80], n_c >= 1.
pub fn theta_to_params(theta: &[f64]) -> Result<UncertainParams> {
    if theta.len() != 3 {
        return Err(Error::Dim(format!("need 3 uncertainty inputs, got {}", theta.len())));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("uncertainty inputs must be finite".into()));
    }
    let (t1, t2, t3) = (theta[0], theta[1], theta[2]);
    Ok(UncertainParams {
        a_p: (-5.0 + 0.05 * t3 + 0.05 * t2 + 0.03 * t1).exp() * 1e9 + 5e6,
        ua: 40.0 * (1.26 + 0.09 * t3 - 0.09 * t2 + 0.09 * t1).cos() + 40.0,
        n_c: (-0.05 * t3 + 0.05 * t2 - 0.05 * t1).abs() + 1.0,
    })
}

/// Selects which literal form of the temperature equation is integrated. The two
/// forms agree algebraically (the printed one carries an extra factor V in every
/// numerator term and in the denominator), so trajectories coincide up to
/// floating-point roundoff; the corrected form is the default because its terms
/// are individually dimensionally consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyBalance {
    #[default]
    Corrected,
    AsPrinted,
}

/// Fixed plant parameters and initial conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConstants {
    /// Monomer molecular weight, kg/kmol.
    pub mw_po: f64,
    /// Propagation reaction enthalpy, kJ/kmol.
    pub dh_p: f64,
    /// Hydrolysis pre-exponential factor, m3/kmol/s.
    pub a_h: f64,
    /// Initiation pre-exponential factor, m3/kmol/s.
    pub a_i: f64,
    /// Transfer pre-exponential factor, m3/kmol/s.
    pub a_t: f64,
    /// Activation energies, kJ/kmol.
    pub e_ap: f64,
    pub e_ah: f64,
    pub e_ai: f64,
    pub e_at: f64,
    /// Gas constant, kJ/kmol/K.
    pub r_gas: f64,
    /// Bulk liquid density used for V = mass / rho_bulk, kg/m3.
    pub rho_bulk: f64,
    /// Monomer feed temperature, K.
    pub t_feed: f64,
    pub energy_balance: EnergyBalance,
    pub init: ReactorState,
}

impl Default for PlantConstants {
    fn default() -> Self {
        PlantConstants {
            mw_po: 58.08,
            dh_p: -92048.0,
            a_h: 2.4e8,
            a_i: 4.0e8,
            a_t: 9.5e8,
            e_ap: 6.9e4,
            e_ah: 8.2e4,
            e_ai: 7.8e4,
            e_at: 1.05e5,
            r_gas: 8.314,
            rho_bulk: 1000.0,
            t_feed: 298.15,
            energy_balance: EnergyBalance::Corrected,
            init: ReactorState {
                mass: 1.56e3,
                temp: 400.0,
                water: 1.0,
                monomer: 10.0,
                x0: 0.0,
                gx0: 10.0,
                gx1: 10.0,
            },
        }
    }
}

/// Rate constants and heat capacities at one temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinetics {
    /// Propagation, hydrolysis, initiation, transfer rate constants, m3/kmol/s.
    pub k_p: f64,
    pub k_h: f64,
    pub k_i: f64,
    pub k_t: f64,
    /// Feed and bulk heat capacities, kJ/kg/K.
    pub c_pf: f64,
    pub c_pb: f64,
}

/// Arrhenius rate constants (propagation uses the uncertain pre-exponential
/// factor) and the heat-capacity polynomials at temperature `t`.
pub fn kinetics(c: &PlantConstants, a_p: f64, t: f64) -> Kinetics {
    let rt = c.r_gas * t;
    Kinetics {
        k_p: a_p * (-c.e_ap / rt).exp(),
        k_h: c.a_h * (-c.e_ah / rt).exp(),
        k_i: c.a_i * (-c.e_ai / rt).exp(),
        k_t: c.a_t * (-c.e_at / rt).exp(),
        c_pf: 0.92 + 8.871e-3 * t - 3.1e-5 * t * t + 4.78e-8 * t * t * t,
        c_pb: 1.1 + 2.72e-3 * t,
    }
}

/// Splits the catalyst across methanol and polymer sites in proportion to their
/// amounts. The denominator x0 + gx0 is constant in time along model
/// trajectories, so degeneracy only arises from inadmissible inputs.
pub fn active_moments(x0: f64, gx0: f64, gx1: f64, n_c: f64) -> Result<(f64, f64, f64)> {
    let total = x0 + gx0;
    if total <= 1e-12 {
        return Err(Error::Invalid(format!(
            "catalyst partition is degenerate: x0 + gx0 = {total:e}"
        )));
    }
    let scale = n_c / total;
    Ok((x0 * scale, gx0 * scale, gx1 * scale))
}

/// Catalyst split between methanol and polymer sites. A zero total means no
/// catalyst-bearing species at all, so every catalyzed rate vanishes.
pub(crate) fn catalyst_split(n_c: f64, x0: f64, gx0: f64) -> (f64, f64) {
    let total = x0 + gx0;
    if total > 0.0 {
        (n_c * x0 / total, n_c * gx0 / total)
    } else {
        (0.0, 0.0)
    }
}

fn deriv(c: &PlantConstants, p: &UncertainParams, u: &ControlInput, s: &[f64; 7]) -> [f64; 7] {
    let mass = s[0];
    let temp = s[1];
    // Amount states are clamped locally: Runge-Kutta stage states may carry
    // transient negative excursions, and a negative amount would flip the sign
    // of every rate it enters. The committed state is clamped by the integrator.
    let water = s[2].max(0.0);
    let monomer = s[3].max(0.0);
    let x0 = s[4].max(0.0);
    let gx0 = s[5].max(0.0);
    let (g0, gg0) = catalyst_split(p.n_c, x0, gx0);
    let k = kinetics(c, p.a_p, temp);
    let vol = mass / c.rho_bulk;

    let heat_gen = -c.dh_p * k.k_p * gg0 * monomer;
    let cool = p.ua * (temp - u.t_cool);
    let feed_sensible = u.feed * c.mw_po * k.c_pf * (temp - c.t_feed);
    let d_temp = match c.energy_balance {
        EnergyBalance::Corrected => {
            (heat_gen / vol - cool - feed_sensible) / (mass * k.c_pb)
        }
        EnergyBalance::AsPrinted => {
            (heat_gen - cool * vol - feed_sensible * vol) / (mass * k.c_pb * vol)
        }
    };

    [
        u.feed * c.mw_po,
        d_temp,
        -k.k_h * water * monomer / vol,
        u.feed - (k.k_h * water + k.k_i * g0 + k.k_p * gg0 + k.k_t * (gg0 + g0)) * monomer / vol,
        (2.0 * k.k_h * water - k.k_i * g0) * monomer / vol,
        k.k_i * g0 * monomer / vol,
        (k.k_i * g0 + k.k_p * gg0) * monomer / vol,
    ]
}

/// Time derivatives of the seven states under constant controls.
pub fn rhs(
    c: &PlantConstants,
    x: &ReactorState,
    u: &ControlInput,
    p: &UncertainParams,
) -> Result<[f64; 7]> {
    if !x.is_finite() || !u.feed.is_finite() || !u.t_cool.is_finite() {
        return Err(Error::NonFinite("state and controls must be finite".into()));
    }
    Ok(deriv(c, p, u, &x.to_array()))
}

/// Advances the state over `dt` seconds of constant controls with `substeps`
/// classical RK4 steps. Amount states are clamped at zero after every step;
/// tiny negative excursions appear near monomer depletion.
pub fn integrate_interval(
    c: &PlantConstants,
    x: &ReactorState,
    u: &ControlInput,
    dt: f64,
    p: &UncertainParams,
    substeps: usize,
) -> Result<ReactorState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Invalid(format!("interval length must be positive, got {dt}")));
    }
    if substeps == 0 {
        return Err(Error::Invalid("need at least one integration substep".into()));
    }
    let h = dt / substeps as f64;
    let mut s = x.to_array();
    for step in 0..substeps {
        let k1 = deriv(c, p, u, &s);
        let k2 = deriv(c, p, u, &advanced(&s, &k1, 0.5 * h));
        let k3 = deriv(c, p, u, &advanced(&s, &k2, 0.5 * h));
        let k4 = deriv(c, p, u, &advanced(&s, &k3, h));
        for i in 0..7 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        for v in &mut s[2..7] {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "state blew up {:.3} s into a {dt:.3} s interval",
                (step + 1) as f64 * h
            )));
        }
    }
    Ok(ReactorState::from_array(s))
}

fn advanced(s: &[f64; 7], k: &[f64; 7], h: f64) -> [f64; 7] {
    let mut out = *s;
    for i in 0..7 {
        out[i] += h * k[i];
    }
    out
}

/// Temperature ceiling margin; positive values violate.
pub fn constraint_path(x: &ReactorState) -> f64 {
    x.temp - TEMP_LIMIT
}

/// Molecular-weight shortfall at batch end; positive values violate.
pub fn constraint_namw(c: &PlantConstants, x: &ReactorState) -> Result<f64> {
    if x.gx0 <= 0.0 {
        return Err(Error::Invalid(format!(
            "number-average molecular weight undefined: gx0 = {}",
            x.gx0
        )));
    }
    Ok(-c.mw_po * x.gx1 / x.gx0 + NAMW_TARGET)
}

/// Residual monomer mass fraction in ppm over the limit; positive values violate.
pub fn constraint_ppm(c: &PlantConstants, x: &ReactorState) -> f64 {
    1e6 * c.mw_po * x.monomer / x.mass - PPM_LIMIT
}

/// Quadratic control-move penalty added to the batch time in the objective.
pub fn objective_increment(u: &ControlInput, u_prev: &ControlInput) -> f64 {
    let df = u.feed - u_prev.feed;
    let dc = u.t_cool - u_prev.t_cool;
    DU_WEIGHT_FEED * df * df + DU_WEIGHT_COOL * dc * dc
}
