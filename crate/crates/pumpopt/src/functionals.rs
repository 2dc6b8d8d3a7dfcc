//! Power loss, flow rate and volume of a solved channel, and the two
//! constraint residuals.

use crate::geometry::{ChannelGeometry, Wall};
use crate::periodic_bie::{forward_wall_data, section_flux, FlowSolution};

/// Prescribed flow rate and volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Targets {
    pub q0: f64,
    pub v0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FunctionalValues {
    pub j_pl: f64,
    pub q: f64,
    pub v: f64,
    pub c_q: f64,
    pub c_v: f64,
}

impl FunctionalValues {
    pub fn new(j_pl: f64, q: f64, v: f64, targets: Targets) -> Self {
        let (c_q, c_v) = constraint_values(q, v, targets);
        FunctionalValues { j_pl, q, v, c_q, c_v }
    }
}

/// `J_PL = ∮ f·(u^D + c e₁) ds` over both walls.
pub fn power_loss(fwd: &FlowSolution, geom: &ChannelGeometry) -> f64 {
    let slip = forward_wall_data(geom, fwd.c);
    let mut total = 0.0;
    for w in Wall::BOTH {
        let dw = geom.wall(w);
        let f = &fwd.wall(w).traction;
        let u = &slip[w.index()];
        for j in 0..dw.m {
            total += dw.weight(j) * (f[j][0] * (u[j][0] + fwd.c) + f[j][1] * u[j][1]);
        }
    }
    total
}

/// Flow rate per wavelength in the lab frame:
/// `Q = ∫_{Γ_L} u₁ dx₂ + (c/L)|Ω|`.
pub fn flow_rate(fwd: &FlowSolution, geom: &ChannelGeometry) -> f64 {
    section_flux(fwd, true) + fwd.c / geom.wavelength * geom.volume
}

/// `(C_Q, C_V) = (Q − Q0, V − V0)`.
pub fn constraint_values(q: f64, v: f64, targets: Targets) -> (f64, f64) {
    (q - targets.q0, v - targets.v0)
}

/// All three functionals from one forward solution.
pub fn evaluate(fwd: &FlowSolution, geom: &ChannelGeometry, targets: Targets) -> FunctionalValues {
    FunctionalValues::new(power_loss(fwd, geom), flow_rate(fwd, geom), geom.volume, targets)
}
