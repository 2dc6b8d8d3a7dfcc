//! Augmented Lagrangian outer loop with a BFGS inner solver.
//!
//! The multiplier, penalty and constraint-tolerance pairing is
//! `(λ₁, σ₁, ζ₁) ↔ C_Q` and `(λ₂, σ₂, ζ₂) ↔ C_V`, matching
//! `L_A = J − λ₁C_Q − λ₂C_V + σ₁C_Q²/2 + σ₂C_V²/2`.

use crate::error::{Error, Result};
use crate::functionals::{self, FunctionalValues, Targets};
use crate::geometry::{basis_perturbation, ChannelGeometry, WallShapeParams};
use crate::periodic_bie::{assemble_system, AssembledSystem, FlowSolution, SolverConfig};
use crate::shape_calculus::{grad_cq, grad_cv, grad_jpl};
use faer::linalg::solvers::{Llt, Solve};
use faer::{Mat, Side};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    /// Initial penalties; `σ₂` is raised to `sigma_v_escalated` when the
    /// starting volume misses `V0` by more than `escalate_ratio`.
    pub sigma0: [f64; 2],
    pub sigma_v_escalated: f64,
    pub escalate_ratio: f64,
    pub zeta_star: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Inner stop: `‖∇L_A‖∞ ≤ grad_tol · max(1, |L_A|)`.
    pub grad_tol: f64,
    pub armijo_c1: f64,
    pub max_halvings: usize,
    /// BFGS updates are skipped when `sᵀy` is at or below this.
    pub curvature_eps: f64,
    /// Start each subproblem from the previous subproblem's final Hessian
    /// approximation instead of `‖∇L_A‖ I`.
    pub warm_start_hessian: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            sigma0: [10.0, 10.0],
            sigma_v_escalated: 100.0,
            escalate_ratio: 0.1,
            zeta_star: 1e-3,
            max_outer: 20,
            max_inner: 50,
            grad_tol: 1e-4,
            armijo_c1: 1e-4,
            max_halvings: 30,
            curvature_eps: 1e-12,
            warm_start_hessian: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.sigma0[0],
            self.sigma0[1],
            self.sigma_v_escalated,
            self.zeta_star,
            self.grad_tol,
            self.armijo_c1,
            self.curvature_eps,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("optimizer penalties and tolerances must be positive".into()));
        }
        if self.armijo_c1 >= 1.0 {
            return Err(Error::InvalidConfig("Armijo constant must be below 1".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidConfig("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

/// `L_A = J − λ₁C_Q − λ₂C_V + (σ₁/2)C_Q² + (σ₂/2)C_V²`.
pub fn augmented_lagrangian_value(fv: &FunctionalValues, lambda: [f64; 2], sigma: [f64; 2]) -> f64 {
    fv.j_pl - lambda[0] * fv.c_q - lambda[1] * fv.c_v + 0.5 * sigma[0] * fv.c_q * fv.c_q + 0.5 * sigma[1] * fv.c_v * fv.c_v
}

/// `∇L_A = ∇J − (λ₁ − σ₁C_Q)∇C_Q − (λ₂ − σ₂C_V)∇C_V`, entrywise.
pub fn augmented_lagrangian_gradient(
    fv: &FunctionalValues,
    d_j: &[f64],
    d_cq: &[f64],
    d_cv: &[f64],
    lambda: [f64; 2],
    sigma: [f64; 2],
) -> Vec<f64> {
    let a = lambda[0] - sigma[0] * fv.c_q;
    let b = lambda[1] - sigma[1] * fv.c_v;
    (0..d_j.len()).map(|k| d_j[k] - a * d_cq[k] - b * d_cv[k]).collect()
}

/// A smooth function that may reject trial points.
pub trait Objective {
    /// Value at `x`, or `None` when `x` is outside the admissible set.
    fn value(&mut self, x: &[f64]) -> Option<f64>;
    /// Gradient at the point of the most recent successful [`Objective::value`].
    fn gradient(&mut self) -> Vec<f64>;
}

#[derive(Clone, Debug)]
pub struct BfgsState {
    /// Dense row-major Hessian approximation.
    pub b: Vec<f64>,
    pub n: usize,
    pub j: usize,
    pub last_pair: Option<(Vec<f64>, Vec<f64>)>,
    pub skipped_updates: usize,
}

impl BfgsState {
    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            b[i * n + i] = scale;
        }
        BfgsState { b, n, j: 0, last_pair: None, skipped_updates: 0 }
    }

    fn direction(&self, g: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let bm = Mat::<f64>::from_fn(n, n, |i, j| self.b[i * n + j]);
        let llt = Llt::new(bm.as_ref(), Side::Lower)
            .map_err(|_| Error::Factorization { condition: f64::INFINITY })?;
        let rhs = Mat::<f64>::from_fn(n, 1, |i, _| -g[i]);
        let p = llt.solve(&rhs);
        Ok((0..n).map(|i| p[(i, 0)]).collect())
    }

    /// BFGS update `B ← B − Bs sᵀB / sᵀBs + y yᵀ / yᵀs`; returns false when
    /// the curvature condition fails and the update is skipped.
    fn update(&mut self, s: &[f64], y: &[f64], eps: f64) -> bool {
        let n = self.n;
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        self.last_pair = Some((s.to_vec(), y.to_vec()));
        if sy <= eps {
            self.skipped_updates += 1;
            return false;
        }
        let bs: Vec<f64> = (0..n).map(|i| (0..n).map(|j| self.b[i * n + j] * s[j]).sum()).collect();
        let sbs: f64 = s.iter().zip(&bs).map(|(a, b)| a * b).sum();
        for i in 0..n {
            for j in 0..n {
                self.b[i * n + j] += y[i] * y[j] / sy - bs[i] * bs[j] / sbs;
            }
        }
        true
    }
}

/// One accepted inner iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerStep {
    pub j: usize,
    pub value: f64,
    pub grad_inf: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the Armijo search exhausted its halvings.
    pub line_search_failed: bool,
    /// Final Hessian approximation, row-major.
    pub hessian: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// Quasi-Newton minimization with Armijo backtracking (halving) from
/// `B₀ = ‖∇f(x₀)‖₂ I`. Rejected trial points count as failed steps.
/// `on_step` runs after the start point (`j = 0`, step 0) and after every
/// accepted step.
pub fn bfgs<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    cfg: &OptimizerConfig,
    on_step: impl FnMut(&InnerStep, &mut O),
) -> Result<BfgsOutcome> {
    bfgs_from(obj, x0, None, cfg, on_step)
}

/// As [`bfgs`], starting from the Hessian approximation `b0` when given.
pub fn bfgs_from<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    b0: Option<&[f64]>,
    cfg: &OptimizerConfig,
    mut on_step: impl FnMut(&InnerStep, &mut O),
) -> Result<BfgsOutcome> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut f = obj
        .value(&x)
        .ok_or_else(|| Error::InvalidGeometry("optimizer start point is not admissible".into()))?;
    let mut g = obj.gradient();
    let mut state = match b0 {
        Some(b) if b.len() == n * n => BfgsState { b: b.to_vec(), n, j: 0, last_pair: None, skipped_updates: 0 },
        _ => {
            let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            BfgsState::scaled_identity(n, if scale > 0.0 { scale } else { 1.0 })
        }
    };
    on_step(&InnerStep { j: 0, value: f, grad_inf: inf_norm(&g), step: 0.0 }, obj);
    let mut line_search_failed = false;
    let stop = |f: f64, g: &[f64]| inf_norm(g) <= cfg.grad_tol * f.abs().max(1.0);
    while !stop(f, &g) && state.j < cfg.max_inner {
        let p = state.direction(&g)?;
        let slope: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        let mut eta = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + eta * b).collect();
            if let Some(ft) = obj.value(&trial) {
                if ft <= f + cfg.armijo_c1 * eta * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            eta *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            line_search_failed = true;
            break;
        };
        let g_new = obj.gradient();
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        state.update(&s, &y, cfg.curvature_eps);
        state.j += 1;
        x = x_new;
        f = f_new;
        g = g_new;
        on_step(&InnerStep { j: state.j, value: f, grad_inf: inf_norm(&g), step: eta }, obj);
    }
    Ok(BfgsOutcome { converged: stop(f, &g), x, value: f, gradient: g, iterations: state.j, line_search_failed, hessian: state.b })
}

/// `L_A` over the free design parameters of a channel shape, counting BIE
/// solves. A value call costs one forward solve; the gradient reuses the
/// factorization for one adjoint solve.
pub struct ShapeProblem {
    pub base: WallShapeParams,
    pub free: Vec<usize>,
    pub solver: SolverConfig,
    pub targets: Targets,
    pub lambda: [f64; 2],
    pub sigma: [f64; 2],
    pub solves: usize,
    current: Option<Cached>,
}

struct Cached {
    params: WallShapeParams,
    geom: ChannelGeometry,
    sys: AssembledSystem,
    fwd: FlowSolution,
    values: FunctionalValues,
}

impl ShapeProblem {
    /// `free` lists the design-vector indices the optimizer may move.
    pub fn new(base: WallShapeParams, free: Vec<usize>, solver: SolverConfig, targets: Targets) -> Result<Self> {
        solver.validate()?;
        if free.iter().any(|&k| k >= base.len()) {
            return Err(Error::InvalidConfig("free-parameter index out of range".into()));
        }
        Ok(ShapeProblem { base, free, solver, targets, lambda: [0.0; 2], sigma: [1.0; 2], solves: 0, current: None })
    }

    pub fn free_values(&self, params: &WallShapeParams) -> Vec<f64> {
        self.free.iter().map(|&k| params.xi[k]).collect()
    }

    pub fn params_at(&self, x: &[f64]) -> WallShapeParams {
        let mut p = self.base.clone();
        for (&k, &v) in self.free.iter().zip(x) {
            p.xi[k] = v;
        }
        p
    }

    /// Functional values at the last accepted evaluation.
    pub fn values(&self) -> Option<FunctionalValues> {
        self.current.as_ref().map(|c| c.values)
    }

    pub fn current_params(&self) -> Option<&WallShapeParams> {
        self.current.as_ref().map(|c| &c.params)
    }

    /// Forward solve and functionals at `params`.
    pub fn evaluate(&mut self, params: &WallShapeParams) -> Result<FunctionalValues> {
        let geom = self.solver.geometry(params)?;
        let sys = assemble_system(&geom, &self.solver)?;
        let fwd = sys.solve_forward(&geom);
        self.solves += 1;
        let values = functionals::evaluate(&fwd, &geom, self.targets);
        self.current = Some(Cached { params: params.clone(), geom, sys, fwd, values });
        Ok(values)
    }

    /// `(∇J, ∇C_Q, ∇C_V)` over the free parameters at the cached point.
    pub fn functional_gradients(&mut self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = self.current.as_ref().expect("gradient requested before any evaluation");
        let adj = c.sys.solve_adjoint(&c.geom);
        self.solves += 1;
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for &k in &self.free {
            let theta = basis_perturbation(&c.params, k, &c.geom);
            out.0.push(grad_jpl(&c.fwd, &c.geom, &theta));
            out.1.push(grad_cq(&c.fwd, &adj, &c.geom, &theta));
            out.2.push(grad_cv(&c.geom, &theta));
        }
        out
    }
}

impl Objective for ShapeProblem {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        let p = self.params_at(x);
        let fv = self.evaluate(&p).ok()?;
        Some(augmented_lagrangian_value(&fv, self.lambda, self.sigma))
    }

    fn gradient(&mut self) -> Vec<f64> {
        let fv = self.values().expect("gradient requested before any evaluation");
        let (dj, dq, dv) = self.functional_gradients();
        augmented_lagrangian_gradient(&fv, &dj, &dq, &dv, self.lambda, self.sigma)
    }
}

/// One line of the convergence log (one per inner iteration).
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub m: usize,
    pub j: usize,
    pub j_pl: f64,
    pub c_q: f64,
    pub c_v: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub solves: usize,
}

/// Which branch of the outer update was taken after subproblem `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OuterAction {
    Converged,
    /// Constraints within `ζ`: multipliers updated, `ζ` tightened.
    MultiplierUpdate,
    /// Constraints outside `ζ`: penalties raised, `ζ` reset.
    PenaltyIncrease,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterRecord {
    pub m: usize,
    pub xi: Vec<f64>,
    pub j_pl: f64,
    pub c_q: f64,
    pub c_v: f64,
    pub grad_norm: f64,
    pub inner_iterations: usize,
    /// `λ`, `σ`, `ζ` used for subproblem `m`.
    pub lambda: [f64; 2],
    pub sigma: [f64; 2],
    pub zeta: [f64; 2],
    pub action: OuterAction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub lambda: [f64; 2],
    pub sigma: [f64; 2],
    pub zeta: [f64; 2],
    pub zeta_star: f64,
    pub m: usize,
    pub history: Vec<OuterRecord>,
}

impl OptState {
    /// `λ⁰ = 0`, `σ = σ⁰`, `ζ¹ = (σ⁰)^{-0.1}`.
    pub fn initial(sigma0: [f64; 2], zeta_star: f64) -> Self {
        OptState {
            lambda: [0.0; 2],
            sigma: sigma0,
            zeta: sigma0.map(|s| s.powf(-0.1)),
            zeta_star,
            m: 0,
            history: Vec::new(),
        }
    }

    /// Applies the outer update for constraint values `(c_q, c_v)` and
    /// returns the branch taken.
    pub fn advance(&mut self, sigma0: [f64; 2], c_q: f64, c_v: f64) -> OuterAction {
        let within = c_q.abs() < self.zeta[0] && c_v.abs() < self.zeta[1];
        if within {
            if c_q.abs() < self.zeta_star && c_v.abs() < self.zeta_star {
                return OuterAction::Converged;
            }
            self.lambda[0] -= self.sigma[0] * c_q;
            self.lambda[1] -= self.sigma[1] * c_v;
            self.zeta = [0, 1].map(|i| sigma0[i].powf(-0.9) * self.zeta[i]);
            OuterAction::MultiplierUpdate
        } else {
            self.sigma = self.sigma.map(|s| 10.0 * s);
            self.zeta = sigma0.map(|s| s.powf(-0.1));
            OuterAction::PenaltyIncrease
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    pub params: WallShapeParams,
    pub values: FunctionalValues,
    pub state: OptState,
    pub log: Vec<LogRecord>,
    pub solves: usize,
    pub converged: bool,
    pub line_search_failures: usize,
}

/// Penalties for the first subproblem: `σ₂⁰` escalates when the start is far
/// from the target volume.
pub fn initial_sigma(cfg: &OptimizerConfig, start_volume: f64, v0: f64) -> [f64; 2] {
    let mut s = cfg.sigma0;
    if ((start_volume - v0) / v0).abs() > cfg.escalate_ratio {
        s[1] = cfg.sigma_v_escalated;
    }
    s
}

/// Inner minimization of `L_A` for the current `(λ, σ)`, appending one log
/// record per accepted step.
pub fn bfgs_minimize(
    problem: &mut ShapeProblem,
    start: &WallShapeParams,
    state: &OptState,
    b0: Option<&[f64]>,
    cfg: &OptimizerConfig,
    log: &mut Vec<LogRecord>,
) -> Result<BfgsOutcome> {
    problem.lambda = state.lambda;
    problem.sigma = state.sigma;
    let x0 = problem.free_values(start);
    let m = state.m;
    bfgs_from(problem, &x0, b0, cfg, |step, p| {
        let fv = p.values().expect("evaluated");
        log.push(LogRecord {
            m,
            j: step.j,
            j_pl: fv.j_pl,
            c_q: fv.c_q,
            c_v: fv.c_v,
            grad_norm: step.grad_inf,
            step: step.step,
            solves: p.solves,
        });
    })
}

/// Augmented Lagrangian loop: subproblem, then either stop, update the
/// multipliers and tighten `ζ`, or raise the penalties and reset `ζ`.
/// Hitting `max_outer` returns the most feasible outer iterate, flagged as
/// not converged.
pub fn solve_constrained(
    start: &WallShapeParams,
    free: Vec<usize>,
    solver: &SolverConfig,
    targets: Targets,
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult> {
    cfg.validate()?;
    let mut problem = ShapeProblem::new(start.clone(), free, solver.clone(), targets)?;
    let v_start = solver.geometry(start)?.volume;
    let sigma0 = initial_sigma(cfg, v_start, targets.v0);
    let mut state = OptState::initial(sigma0, cfg.zeta_star);
    let mut log = Vec::new();
    let mut params = start.clone();
    let mut converged = false;
    let mut failures = 0;
    let mut best: Option<(f64, WallShapeParams, FunctionalValues)> = None;
    let mut values = None;
    let mut hessian: Option<Vec<f64>> = None;
    for m in 1..=cfg.max_outer {
        state.m = m;
        let out = bfgs_minimize(&mut problem, &params, &state, hessian.as_deref(), cfg, &mut log)?;
        if cfg.warm_start_hessian {
            hessian = Some(out.hessian.clone());
        }
        if out.line_search_failed {
            failures += 1;
        }
        params = problem.params_at(&out.x);
        // The cache may hold a rejected or non-accepted trial; re-evaluate
        // only if it drifted from the accepted iterate.
        let fv = match (problem.current_params(), problem.values()) {
            (Some(p), Some(v)) if p.xi == params.xi => v,
            _ => problem.evaluate(&params)?,
        };
        values = Some(fv);
        let violation = fv.c_q.abs().max(fv.c_v.abs());
        if best.as_ref().is_none_or(|b| violation < b.0) {
            best = Some((violation, params.clone(), fv));
        }
        let (lambda, sigma, zeta) = (state.lambda, state.sigma, state.zeta);
        let action = state.advance(sigma0, fv.c_q, fv.c_v);
        state.history.push(OuterRecord {
            m,
            xi: params.xi.clone(),
            j_pl: fv.j_pl,
            c_q: fv.c_q,
            c_v: fv.c_v,
            grad_norm: inf_norm(&out.gradient),
            inner_iterations: out.iterations,
            lambda,
            sigma,
            zeta,
            action,
        });
        if action == OuterAction::Converged {
            converged = true;
            break;
        }
    }
    let (params, values) = if converged {
        (params, values.expect("at least one outer iteration"))
    } else {
        let (_, p, v) = best.expect("at least one outer iteration");
        (p, v)
    };
    Ok(OptimizationResult { params, values, state, log, solves: problem.solves, converged, line_search_failures: failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Wall;
    use std::f64::consts::PI;

    /// `½ (x − x*)ᵀA(x − x*)`, minimized at `x*`.
    struct Quadratic {
        a: Vec<Vec<f64>>,
        center: Vec<f64>,
        x: Vec<f64>,
    }

    impl Quadratic {
        fn offset(&self) -> Vec<f64> {
            self.x.iter().zip(&self.center).map(|(a, b)| a - b).collect()
        }
    }

    impl Objective for Quadratic {
        fn value(&mut self, x: &[f64]) -> Option<f64> {
            self.x = x.to_vec();
            let d = self.offset();
            let mut v = 0.0;
            for i in 0..d.len() {
                for j in 0..d.len() {
                    v += 0.5 * d[i] * self.a[i][j] * d[j];
                }
            }
            Some(v)
        }

        fn gradient(&mut self) -> Vec<f64> {
            let d = self.offset();
            self.a.iter().map(|row| row.iter().zip(&d).map(|(a, b)| a * b).sum()).collect()
        }
    }

    #[test]
    fn bfgs_solves_convex_quadratic() {
        let n = 6;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 2.0 + i as f64 } else { 0.3 / (1.0 + (i + j) as f64) }).collect())
            .collect();
        let center: Vec<f64> = (0..n).map(|i| (i as f64 * 0.9).cos()).collect();
        let mut q = Quadratic { a, center: center.clone(), x: vec![] };
        let cfg = OptimizerConfig { grad_tol: 1e-11, max_inner: 100, ..Default::default() };
        let out = bfgs(&mut q, &vec![0.0; n], &cfg, |_, _| {}).unwrap();
        assert!(out.converged && !out.line_search_failed);
        assert!(out.iterations <= 2 * n, "{} iterations", out.iterations);
        assert!(out.x.iter().zip(&center).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn bfgs_inner_values_never_increase() {
        let n = 4;
        let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 + 10.0 * i as f64 } else { 0.1 }).collect()).collect();
        let mut q = Quadratic { a, center: vec![1.0; n], x: vec![] };
        let mut seen = Vec::new();
        bfgs(&mut q, &[3.0, -2.0, 1.0, 0.5], &OptimizerConfig::default(), |s, _| seen.push(s.value)).unwrap();
        assert!(seen.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejected_region_is_backtracked_out_of() {
        // f = (x − 3)², but anything beyond x = 2 is inadmissible.
        struct Fenced(f64);
        impl Objective for Fenced {
            fn value(&mut self, x: &[f64]) -> Option<f64> {
                self.0 = x[0];
                (x[0] <= 2.0).then(|| (x[0] - 3.0).powi(2))
            }
            fn gradient(&mut self) -> Vec<f64> {
                vec![2.0 * (self.0 - 3.0)]
            }
        }
        let cfg = OptimizerConfig { max_inner: 40, ..Default::default() };
        let out = bfgs(&mut Fenced(0.0), &[0.0], &cfg, |_, _| {}).unwrap();
        assert!(out.x[0] <= 2.0 && out.x[0] > 1.9);
    }

    #[test]
    fn lagrangian_arithmetic() {
        let fv = FunctionalValues { j_pl: 2.0, q: 0.0, v: 0.0, c_q: 0.0, c_v: 0.0 };
        assert_eq!(augmented_lagrangian_value(&fv, [3.0, -1.0], [10.0, 10.0]), 2.0);
        let fv = FunctionalValues { c_q: 0.1, ..fv };
        assert!((augmented_lagrangian_value(&fv, [0.0, 0.0], [10.0, 10.0]) - 2.05).abs() < 1e-15);
    }

    #[test]
    fn outer_update_branches() {
        let s0 = [10.0, 10.0];
        let mut st = OptState::initial(s0, 1e-3);
        let z1 = 10f64.powf(-0.1);
        assert!((st.zeta[0] - z1).abs() < 1e-15);
        assert_eq!(st.advance(s0, 0.9, 0.0), OuterAction::PenaltyIncrease);
        assert_eq!(st.sigma, [100.0, 100.0]);
        assert_eq!(st.lambda, [0.0, 0.0]);
        assert_eq!(st.advance(s0, 0.1, -0.2), OuterAction::MultiplierUpdate);
        assert!((st.lambda[0] + 10.0).abs() < 1e-12 && (st.lambda[1] - 20.0).abs() < 1e-12);
        assert!((st.zeta[0] - 10f64.powf(-0.9) * z1).abs() < 1e-15);
        assert_eq!(st.advance(s0, 1e-4, -1e-4), OuterAction::Converged);
    }

    #[test]
    fn sigma_escalates_for_far_volume() {
        let cfg = OptimizerConfig::default();
        assert_eq!(initial_sigma(&cfg, 1.05, 1.0), [10.0, 10.0]);
        assert_eq!(initial_sigma(&cfg, 1.2, 1.0), [10.0, 100.0]);
    }

    #[test]
    fn flat_feasible_start_stops_immediately() {
        let l = 2.0 * PI;
        let p = WallShapeParams::flat(2, l, 0.0, 1.0);
        let free: Vec<usize> = (0..p.len()).collect();
        let res = solve_constrained(
            &p,
            free,
            &SolverConfig::default(),
            Targets { q0: 0.0, v0: l },
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert!(res.converged);
        assert_eq!(res.state.history.len(), 1);
        assert_eq!(res.state.history[0].inner_iterations, 0);
        assert_eq!(res.params.xi, p.xi);
        assert!(res.solves <= 3);
    }

    #[test]
    fn lagrangian_gradient_matches_finite_differences() {
        let mut p = WallShapeParams::flat(2, 2.0 * PI, -1.0, 1.0);
        p.set_x2(Wall::Upper, 1, 0.2);
        p.set_x2(Wall::Lower, 3, 0.1);
        let targets = Targets { q0: 0.3, v0: 12.0 };
        let free: Vec<usize> = (0..p.len()).collect();
        let mut prob = ShapeProblem::new(p.clone(), free, SolverConfig::default(), targets).unwrap();
        prob.lambda = [0.4, -0.2];
        prob.sigma = [10.0, 100.0];
        let x0 = prob.free_values(&p);
        prob.value(&x0).unwrap();
        let g = prob.gradient();
        assert_eq!(prob.solves, 2);
        for k in [0, 3, p.upper_offset_index(), p.len() - 1] {
            let h = 1e-5;
            let mut xp = x0.clone();
            xp[k] += h;
            let fp = prob.value(&xp).unwrap();
            xp[k] -= 2.0 * h;
            let fm = prob.value(&xp).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-5 * fd.abs().max(1e-2), "{k}: {} vs {fd}", g[k]);
        }
    }
}
