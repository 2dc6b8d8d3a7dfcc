//! Shape derivatives of `J_PL`, `C_Q` and `C_V` from wall data of one
//! forward and one adjoint solution.
//!
//! All three are boundary integrals in the normal velocity `θ_n`, so a full
//! design-space gradient costs two solves regardless of the parameter count.

use crate::error::Result;
use crate::functionals::{self, FunctionalValues, Targets};
use crate::geometry::{basis_perturbation, dl_star, ChannelGeometry, PerturbationField, Wall, WallShapeParams};
use crate::periodic_bie::{assemble_system, FlowSolution, SolverConfig, ADJOINT_PRESSURE_DROP};
use std::f64::consts::PI;

/// Derivatives of the three functionals with respect to every design parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub d_j: Vec<f64>,
    pub d_cq: Vec<f64>,
    pub d_cv: Vec<f64>,
}

/// `∮ θ_n ds`.
pub fn grad_cv(geom: &ChannelGeometry, theta: &PerturbationField) -> f64 {
    Wall::BOTH.iter().map(|&w| geom.wall(w).integrate(&theta.wall(w).theta_n)).sum()
}

/// Power-loss derivative:
/// `Σ± ∫ [2cℓκ f_s/L − f_s²/μ] θ_n + (2c/L)(dℓ* f_s − ℓ ∂_sθ_n p) ds`.
pub fn grad_jpl(fwd: &FlowSolution, geom: &ChannelGeometry, theta: &PerturbationField) -> f64 {
    let (c, mu, l) = (fwd.c, fwd.mu, geom.wavelength);
    let mut total = 0.0;
    for w in Wall::BOTH {
        let dw = geom.wall(w);
        let th = theta.wall(w);
        let fields = fwd.wall(w);
        let dl = dl_star(dw, &th.theta_n);
        let integrand: Vec<f64> = (0..dw.m)
            .map(|j| {
                let fs = fields.fs[j];
                (2.0 * c * dw.ell * dw.kappa[j] / l * fs - fs * fs / mu) * th.theta_n[j]
                    + 2.0 * c / l * (dl * fs - dw.ell * th.dtheta_n_ds[j] * fields.pressure[j])
            })
            .collect();
        total += dw.integrate(&integrand);
    }
    total
}

/// Flow-rate derivative:
/// `Σ± ∫ (cℓκ f̂_s/L − f_s f̂_s/μ + c/L) θ_n + (c/L)(dℓ* f̂_s − ℓ ∂_sθ_n p̂) ds
///  + [θ₂u₁](z⁺) − [θ₂u₁](z⁻)`,
/// with `u₁(z±)` taken from the slip data `(cℓ±/L)τ₁±`.
///
/// `p̂` grows by `Δp̂` per period, so it is split as `p̂ = p̃ + Δp̂ t/2π` with
/// `p̃` periodic; the trapezoidal rule handles the `p̃` part and the linear
/// part is integrated by parts exactly:
/// `∫₀^{2π} t ∂_sθ_n ds = −∫ t θ_n' dt = ∫ θ_n dt − 2π θ_n(2π)`.
pub fn grad_cq(fwd: &FlowSolution, adj: &FlowSolution, geom: &ChannelGeometry, theta: &PerturbationField) -> f64 {
    let (c, mu, l) = (fwd.c, fwd.mu, geom.wavelength);
    let mut total = 0.0;
    for w in Wall::BOTH {
        let dw = geom.wall(w);
        let th = theta.wall(w);
        let (f, fh) = (fwd.wall(w), adj.wall(w));
        let dl = dl_star(dw, &th.theta_n);
        let integrand: Vec<f64> = (0..dw.m)
            .map(|j| {
                let p_per = fh.pressure[j] - ADJOINT_PRESSURE_DROP * dw.t[j] / (2.0 * PI);
                ((c * dw.ell * dw.kappa[j] / l - f.fs[j] / mu) * fh.fs[j] + c / l) * th.theta_n[j]
                    + c / l * (dl * fh.fs[j] - dw.ell * th.dtheta_n_ds[j] * p_per)
            })
            .collect();
        total += dw.integrate(&integrand);
        let mean_theta_n = th.theta_n.iter().sum::<f64>() * dw.h;
        let t_dtheta = mean_theta_n - 2.0 * PI * th.theta_n[0];
        total -= c / l * dw.ell * ADJOINT_PRESSURE_DROP / (2.0 * PI) * t_dtheta;
    }
    // The wall endpoints at t = 2π coincide with node 0 by periodicity.
    let u1 = |w: Wall| c * geom.wall(w).ell / l * geom.wall(w).tau[0][0];
    total + theta.theta_at_zplus[1] * u1(Wall::Upper) - theta.theta_at_zminus[1] * u1(Wall::Lower)
}

/// Functional values and full gradient at one shape.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub values: FunctionalValues,
    pub gradient: GradientVector,
    pub geometry: ChannelGeometry,
    /// BIE solves spent (always 2: forward and adjoint).
    pub solves: usize,
}

/// One forward and one adjoint solve on a shared factorization, then the
/// three derivatives in every basis direction.
pub fn full_gradient(params: &WallShapeParams, cfg: &SolverConfig, targets: Targets) -> Result<Evaluation> {
    let geom = cfg.geometry(params)?;
    let sys = assemble_system(&geom, cfg)?;
    let fwd = sys.solve_forward(&geom);
    let adj = sys.solve_adjoint(&geom);
    let values = functionals::evaluate(&fwd, &geom, targets);
    let n = params.len();
    let mut gradient = GradientVector { d_j: Vec::with_capacity(n), d_cq: Vec::with_capacity(n), d_cv: Vec::with_capacity(n) };
    for k in 0..n {
        let theta = basis_perturbation(params, k, &geom);
        gradient.d_j.push(grad_jpl(&fwd, &geom, &theta));
        gradient.d_cq.push(grad_cq(&fwd, &adj, &geom, &theta));
        gradient.d_cv.push(grad_cv(&geom, &theta));
    }
    Ok(Evaluation { values, gradient, geometry: geom, solves: 2 })
}

/// Central-difference step for parameter value `xi`.
pub fn fd_step(xi: f64, base: f64) -> f64 {
    base * xi.abs().max(1.0)
}

/// Central differences of the three functionals in direction `k`, re-solving
/// the forward problem at `ξ ± h e_k`. Costs two solves.
pub fn finite_difference(
    params: &WallShapeParams,
    k: usize,
    h: f64,
    cfg: &SolverConfig,
) -> Result<[f64; 3]> {
    let eval = |sign: f64| -> Result<[f64; 3]> {
        let mut p = params.clone();
        p.xi[k] += sign * h;
        let geom = cfg.geometry(&p)?;
        let fwd = assemble_system(&geom, cfg)?.solve_forward(&geom);
        Ok([functionals::power_loss(&fwd, &geom), functionals::flow_rate(&fwd, &geom), geom.volume])
    };
    let (plus, minus) = (eval(1.0)?, eval(-1.0)?);
    Ok([0, 1, 2].map(|i| (plus[i] - minus[i]) / (2.0 * h)))
}

/// `|a − b| / max(|b|, floor)`; the floor keeps near-zero entries from
/// dominating the audit.
pub fn relative_error(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(floor)
}
