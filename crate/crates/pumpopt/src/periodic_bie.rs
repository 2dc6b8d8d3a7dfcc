//! Periodized single-layer Stokes solver.
//!
//! The velocity in one period is represented as
//! `u(x) = Σ_{|n|≤1} ∫_Γ S(x, y + nLe₁) ρ(y) ds_y + Σ_m S(x, p_m) c_m`,
//! with a density `ρ` on both walls and point forces `c_m` on a proxy circle
//! standing in for the far periodic copies. Unknowns are fixed by the wall
//! velocity and by the velocity and traction mismatch between the two end
//! sections. The self-interaction of each wall uses Kress product
//! quadrature for the logarithm; everything else uses the trapezoidal rule.

use crate::error::{Error, Result};
use crate::geometry::{ChannelGeometry, DiscretizedWall, Point, Wall};
use crate::kernels::{mat_vec, pressure_kernel_r, stokeslet_gradient_r, stokeslet_r, traction_kernel_r, Mat2};
use crate::linalg::{self, TruncatedQr};
use crate::spectral::{gauss_legendre, kress_weights, TrigInterpolant};
use faer::Mat;
use std::f64::consts::PI;

/// Outward normal of the left end section, used for end-section tractions.
const SECTION_NORMAL: Point = [-1.0, 0.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Nodes per wall.
    pub m: usize,
    /// Proxy point count.
    pub k_proxy: usize,
    /// Collocation nodes per end section.
    pub mp: usize,
    /// Proxy circle centre; defaults to the centre of the cell's bounding box.
    pub proxy_center: Option<Point>,
    /// Proxy circle radius; defaults to `proxy_radius_factor` times the
    /// largest distance from the centre to a wall or end-section node.
    pub proxy_radius: Option<f64>,
    pub proxy_radius_factor: f64,
    pub mu: f64,
    pub c: f64,
    /// Relative pivot threshold for the rank-truncated least-squares solve.
    pub rank_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            m: 64,
            k_proxy: 64,
            mp: 32,
            proxy_center: None,
            proxy_radius: None,
            proxy_radius_factor: 2.0,
            mu: 1.0,
            c: 1.0,
            rank_tol: 1e-14,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 16 || self.m % 2 != 0 {
            return Err(Error::InvalidConfig(format!("M must be even and >= 16, got {}", self.m)));
        }
        if self.k_proxy < 16 {
            return Err(Error::InvalidConfig(format!("K must be >= 16, got {}", self.k_proxy)));
        }
        if self.mp < 8 {
            return Err(Error::InvalidConfig(format!("Mp must be >= 8, got {}", self.mp)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidConfig("viscosity must be positive".into()));
        }
        if !self.c.is_finite() {
            return Err(Error::InvalidConfig("wave speed must be finite".into()));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::InvalidConfig("rank tolerance must lie in (0, 1)".into()));
        }
        if !(self.proxy_radius_factor > 1.0) {
            return Err(Error::InvalidConfig("proxy radius factor must exceed 1".into()));
        }
        Ok(())
    }

    /// Builds the geometry with this config's node counts.
    pub fn geometry(&self, params: &crate::geometry::WallShapeParams) -> Result<ChannelGeometry> {
        ChannelGeometry::new(params, self.m, self.mp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveKind {
    Forward,
    Adjoint,
    Custom,
}

/// How the additive pressure constant is fixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PressureGauge {
    /// Zero mean over all wall nodes.
    WallMean,
    /// Zero at the given interior point.
    PinAt(Point),
}

/// Traction, pressure and tangential traction at the nodes of one wall.
#[derive(Clone, Debug)]
pub struct WallFields {
    pub traction: Vec<Point>,
    pub pressure: Vec<f64>,
    pub fs: Vec<f64>,
}

/// The assembled block matrix and its factorization.
pub struct AssembledSystem {
    pub matrix: Mat<f64>,
    factor: TruncatedQr,
    pub proxies: Vec<Point>,
    pub proxy_center: Point,
    pub proxy_radius: f64,
    m: usize,
    mp: usize,
    mu: f64,
    c: f64,
}

fn col_density(w: Wall, j: usize, comp: usize, m: usize) -> usize {
    (w.index() * m + j) * 2 + comp
}

fn add_block(a: &mut Mat<f64>, row: usize, col: usize, b: &Mat2) {
    for i in 0..2 {
        for j in 0..2 {
            a[(row + i, col + j)] += b[i][j];
        }
    }
}

fn scaled(b: &Mat2, s: f64) -> Mat2 {
    [[b[0][0] * s, b[0][1] * s], [b[1][0] * s, b[1][1] * s]]
}

fn sub(a: &Mat2, b: &Mat2) -> Mat2 {
    [[a[0][0] - b[0][0], a[0][1] - b[0][1]], [a[1][0] - b[1][0], a[1][1] - b[1][1]]]
}

fn proxy_circle(geom: &ChannelGeometry, cfg: &SolverConfig) -> (Point, f64, Vec<Point>) {
    let l = geom.wavelength;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for w in geom.walls() {
        for p in &w.x {
            lo = lo.min(p[1]);
            hi = hi.max(p[1]);
        }
    }
    let center = cfg.proxy_center.unwrap_or([0.5 * l, 0.5 * (lo + hi)]);
    let radius = cfg.proxy_radius.unwrap_or_else(|| {
        let mut rmax: f64 = 0.0;
        let dist = |p: Point| (p[0] - center[0]).hypot(p[1] - center[1]);
        for w in geom.walls() {
            for p in &w.x {
                rmax = rmax.max(dist(*p));
            }
        }
        for z in [geom.z_plus, geom.z_minus, [0.0, geom.z_plus[1]], [0.0, geom.z_minus[1]]] {
            rmax = rmax.max(dist(z));
        }
        cfg.proxy_radius_factor * rmax
    });
    let k = cfg.k_proxy;
    let proxies = (0..k)
        .map(|m| {
            let th = 2.0 * PI * m as f64 / k as f64;
            [center[0] + radius * th.cos(), center[1] + radius * th.sin()]
        })
        .collect();
    (center, radius, proxies)
}

/// Assembles the `(4M + 4Mp) × (4M + 2K)` collocation system and factors it.
pub fn assemble_system(geom: &ChannelGeometry, cfg: &SolverConfig) -> Result<AssembledSystem> {
    cfg.validate()?;
    let m = geom.m();
    if m != cfg.m || geom.section_x2.len() != cfg.mp {
        return Err(Error::InvalidConfig("geometry node counts differ from the solver config".into()));
    }
    let mp = cfg.mp;
    let k = cfg.k_proxy;
    let mu = cfg.mu;
    let l = geom.wavelength;
    let (proxy_center, proxy_radius, proxies) = proxy_circle(geom, cfg);
    let nrows = 4 * m + 4 * mp;
    let ncols = 4 * m + 2 * k;
    let mut a = Mat::<f64>::zeros(nrows, ncols);
    let kress = kress_weights(m);
    let kress_scale = -1.0 / (8.0 * PI * mu);
    let smooth_scale = 1.0 / (4.0 * PI * mu);

    for wt in Wall::BOTH {
        let tw = geom.wall(wt);
        for i in 0..m {
            let x = tw.x[i];
            let row = col_density(wt, i, 0, m);
            for ws in Wall::BOTH {
                let sw = geom.wall(ws);
                for j in 0..m {
                    let wj = sw.weight(j);
                    let mut blk = [[0.0; 2]; 2];
                    for n in [-1.0, 0.0, 1.0] {
                        if ws == wt && n == 0.0 {
                            continue;
                        }
                        let y = sw.x[j];
                        let s = stokeslet_r([x[0] - y[0] - n * l, x[1] - y[1]], mu);
                        blk = [[blk[0][0] + s[0][0], blk[0][1] + s[0][1]], [blk[1][0] + s[1][0], blk[1][1] + s[1][1]]];
                    }
                    blk = scaled(&blk, wj);
                    if ws == wt {
                        let kw = kress_scale * kress[(i + m - j) % m] * sw.g[j];
                        let (lg, rr) = if i == j {
                            let t = tw.tau[i];
                            ((tw.g[i] * tw.g[i]).ln(), [[t[0] * t[0], t[0] * t[1]], [t[1] * t[0], t[1] * t[1]]])
                        } else {
                            let y = sw.x[j];
                            let r = [x[0] - y[0], x[1] - y[1]];
                            let r2 = r[0] * r[0] + r[1] * r[1];
                            let half = 0.5 * (tw.t[i] - sw.t[j]);
                            let s2 = 4.0 * half.sin().powi(2);
                            ((r2 / s2).ln(), [[r[0] * r[0] / r2, r[0] * r[1] / r2], [r[1] * r[0] / r2, r[1] * r[1] / r2]])
                        };
                        let c = smooth_scale * wj;
                        blk[0][0] += kw + c * (-0.5 * lg + rr[0][0]);
                        blk[1][1] += kw + c * (-0.5 * lg + rr[1][1]);
                        blk[0][1] += c * rr[0][1];
                        blk[1][0] += c * rr[1][0];
                    }
                    add_block(&mut a, row, col_density(ws, j, 0, m), &blk);
                }
            }
            for (pm, p) in proxies.iter().enumerate() {
                let s = stokeslet_r([x[0] - p[0], x[1] - p[1]], mu);
                add_block(&mut a, row, 4 * m + 2 * pm, &s);
            }
        }
    }

    // Mismatch rows: f(x + Le₁) − f(x) for x on the left section. Shifting
    // the target cancels the middle copies, leaving only far copies.
    for (q, &eta) in geom.section_x2.iter().enumerate() {
        let x = [0.0, eta];
        let rv = 4 * m + 2 * q;
        let rt = 4 * m + 2 * mp + 2 * q;
        for ws in Wall::BOTH {
            let sw = geom.wall(ws);
            for j in 0..m {
                let y = sw.x[j];
                let wj = sw.weight(j);
                let r_left = [x[0] - y[0] + 2.0 * l, x[1] - y[1]];
                let r_right = [x[0] - y[0] - l, x[1] - y[1]];
                let sv = sub(&stokeslet_r(r_left, mu), &stokeslet_r(r_right, mu));
                let st = sub(
                    &traction_kernel_r(r_left, SECTION_NORMAL),
                    &traction_kernel_r(r_right, SECTION_NORMAL),
                );
                let col = col_density(ws, j, 0, m);
                add_block(&mut a, rv, col, &scaled(&sv, wj));
                add_block(&mut a, rt, col, &scaled(&st, wj));
            }
        }
        for (pm, p) in proxies.iter().enumerate() {
            let r0 = [x[0] - p[0], x[1] - p[1]];
            let r1 = [x[0] + l - p[0], x[1] - p[1]];
            let sv = sub(&stokeslet_r(r1, mu), &stokeslet_r(r0, mu));
            let st = sub(&traction_kernel_r(r1, SECTION_NORMAL), &traction_kernel_r(r0, SECTION_NORMAL));
            add_block(&mut a, rv, 4 * m + 2 * pm, &sv);
            add_block(&mut a, rt, 4 * m + 2 * pm, &st);
        }
    }

    let factor = TruncatedQr::new(a.as_ref(), cfg.rank_tol)?;
    Ok(AssembledSystem { matrix: a, factor, proxies, proxy_center, proxy_radius, m, mp, mu, c: cfg.c })
}

impl AssembledSystem {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn rank(&self) -> usize {
        self.factor.rank()
    }

    pub fn condition_estimate(&self) -> f64 {
        self.factor.condition_estimate()
    }

    /// Right-hand side from wall velocities and end-section jumps
    /// `u(x + Le₁) − u(x)` and `T(x + Le₁) − T(x)` (traction taken with
    /// normal `−e₁`) at the section nodes.
    pub fn rhs(&self, wall_velocity: [&[Point]; 2], velocity_jump: &[Point], traction_jump: &[Point]) -> Vec<f64> {
        let m = self.m;
        let mp = self.mp;
        assert!(wall_velocity[0].len() == m && wall_velocity[1].len() == m);
        assert!(velocity_jump.len() == mp && traction_jump.len() == mp);
        let mut b = vec![0.0; 4 * m + 4 * mp];
        for w in Wall::BOTH {
            for (j, v) in wall_velocity[w.index()].iter().enumerate() {
                let r = col_density(w, j, 0, m);
                b[r] = v[0];
                b[r + 1] = v[1];
            }
        }
        for q in 0..mp {
            b[4 * m + 2 * q] = velocity_jump[q][0];
            b[4 * m + 2 * q + 1] = velocity_jump[q][1];
            b[4 * m + 2 * mp + 2 * q] = traction_jump[q][0];
            b[4 * m + 2 * mp + 2 * q + 1] = traction_jump[q][1];
        }
        b
    }

    /// Solves for the given right-hand side and builds the wall fields.
    pub fn solve_rhs(&self, geom: &ChannelGeometry, b: &[f64], kind: SolveKind, gauge: PressureGauge) -> FlowSolution {
        let x = self.factor.solve(b);
        let ax = linalg::mat_vec(self.matrix.as_ref(), &x);
        let rnorm = ax.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let residual = if bnorm > 0.0 { rnorm / bnorm } else { rnorm };
        let m = self.m;
        let density = x[..4 * m].to_vec();
        let proxy_coeffs = (0..self.proxies.len()).map(|p| [x[4 * m + 2 * p], x[4 * m + 2 * p + 1]]).collect();
        FlowSolution::new(geom, kind, density, proxy_coeffs, self.proxies.clone(), self.mu, self.c, residual, gauge)
    }

    /// Slip data `(cℓ/L)τ` on both walls, periodic end sections.
    pub fn solve_forward(&self, geom: &ChannelGeometry) -> FlowSolution {
        let data = forward_wall_data(geom, self.c);
        let zero = vec![[0.0; 2]; self.mp];
        let b = self.rhs([&data[0], &data[1]], &zero, &zero);
        self.solve_rhs(geom, &b, SolveKind::Forward, PressureGauge::WallMean)
    }

    /// No-slip walls with a traction jump `Δp̂ e₁` across the period, so
    /// that `p̂(x + Le₁) = p̂(x) + Δp̂`.
    pub fn solve_adjoint(&self, geom: &ChannelGeometry) -> FlowSolution {
        let zero_wall = vec![[0.0; 2]; self.m];
        let zero = vec![[0.0; 2]; self.mp];
        let jump = vec![[ADJOINT_PRESSURE_DROP, 0.0]; self.mp];
        let b = self.rhs([&zero_wall, &zero_wall], &zero, &jump);
        let mid = [0.0, 0.5 * (geom.z_plus[1] + geom.z_minus[1])];
        self.solve_rhs(geom, &b, SolveKind::Adjoint, PressureGauge::PinAt(mid))
    }
}

/// Pressure increase of the adjoint solution over one period.
pub const ADJOINT_PRESSURE_DROP: f64 = 1.0;

/// Wall slip velocity `(cℓ±/L)τ±` at the nodes of both walls.
pub fn forward_wall_data(geom: &ChannelGeometry, c: f64) -> [Vec<Point>; 2] {
    let l = geom.wavelength;
    let f = |w: &DiscretizedWall| -> Vec<Point> {
        let s = c * w.ell / l;
        w.tau.iter().map(|t| [s * t[0], s * t[1]]).collect()
    };
    [f(&geom.upper), f(&geom.lower)]
}

pub fn solve_forward(geom: &ChannelGeometry, cfg: &SolverConfig) -> Result<FlowSolution> {
    Ok(assemble_system(geom, cfg)?.solve_forward(geom))
}

pub fn solve_adjoint(geom: &ChannelGeometry, cfg: &SolverConfig) -> Result<FlowSolution> {
    Ok(assemble_system(geom, cfg)?.solve_adjoint(geom))
}

/// Solves with arbitrary wall velocity and end-section jump data.
pub fn solve_with_data(
    geom: &ChannelGeometry,
    cfg: &SolverConfig,
    wall_velocity: [&[Point]; 2],
    velocity_jump: &[Point],
    traction_jump: &[Point],
) -> Result<FlowSolution> {
    let sys = assemble_system(geom, cfg)?;
    let b = sys.rhs(wall_velocity, velocity_jump, traction_jump);
    Ok(sys.solve_rhs(geom, &b, SolveKind::Custom, PressureGauge::WallMean))
}

/// Velocity, pressure and velocity gradient (`grad[i][k] = ∂u_i/∂x_k`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldValue {
    pub velocity: Point,
    pub pressure: f64,
    pub grad: [[f64; 2]; 2],
}

impl FieldValue {
    fn add_source(&mut self, r: Point, f: Point, mu: f64) {
        let u = mat_vec(&stokeslet_r(r, mu), f);
        let q = pressure_kernel_r(r);
        let g = stokeslet_gradient_r(r, mu);
        self.velocity[0] += u[0];
        self.velocity[1] += u[1];
        self.pressure += q[0] * f[0] + q[1] * f[1];
        for i in 0..2 {
            for k in 0..2 {
                self.grad[i][k] += g[k][i][0] * f[0] + g[k][i][1] * f[1];
            }
        }
    }

    fn axpy(&mut self, s: f64, o: &FieldValue) {
        for i in 0..2 {
            self.velocity[i] += s * o.velocity[i];
            for k in 0..2 {
                self.grad[i][k] += s * o.grad[i][k];
            }
        }
        self.pressure += s * o.pressure;
    }

    /// Traction `σ·n` from pressure and velocity gradient.
    pub fn traction(&self, n: Point, mu: f64) -> Point {
        let mut t = [0.0; 2];
        for (i, ti) in t.iter_mut().enumerate() {
            *ti = -self.pressure * n[i];
            for k in 0..2 {
                *ti += mu * (self.grad[i][k] + self.grad[k][i]) * n[k];
            }
        }
        t
    }
}

/// Point sample with a flag for targets inside the near-wall zone where
/// plain quadrature loses accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub velocity: Point,
    pub pressure: f64,
    pub near_wall: bool,
}

/// Width of the near-wall zone in units of the local node spacing.
pub const NEAR_WALL_SPACINGS: f64 = 5.0;

/// Solved density, proxy strengths and derived wall fields.
#[derive(Clone, Debug)]
pub struct FlowSolution {
    pub kind: SolveKind,
    /// `ρ` at the nodes: `[upper (x,y) × M | lower (x,y) × M]`.
    pub density: Vec<f64>,
    pub proxy_coeffs: Vec<Point>,
    pub proxies: Vec<Point>,
    pub walls: [WallFields; 2],
    /// Constant subtracted from the raw representation pressure.
    pub pressure_offset: f64,
    /// Relative residual of the discrete system.
    pub residual: f64,
    pub mu: f64,
    pub c: f64,
    geom: ChannelGeometry,
    interp: [[TrigInterpolant; 2]; 2],
}

impl FlowSolution {
    #[allow(clippy::too_many_arguments)]
    fn new(
        geom: &ChannelGeometry,
        kind: SolveKind,
        density: Vec<f64>,
        proxy_coeffs: Vec<Point>,
        proxies: Vec<Point>,
        mu: f64,
        c: f64,
        residual: f64,
        gauge: PressureGauge,
    ) -> Self {
        let m = geom.m();
        let comp = |w: Wall, c: usize| -> TrigInterpolant {
            let v: Vec<f64> = (0..m).map(|j| density[col_density(w, j, c, m)]).collect();
            TrigInterpolant::new(&v)
        };
        let interp = [[comp(Wall::Upper, 0), comp(Wall::Upper, 1)], [comp(Wall::Lower, 0), comp(Wall::Lower, 1)]];
        let mut sol = FlowSolution {
            kind,
            density,
            proxy_coeffs,
            proxies,
            walls: [
                WallFields { traction: vec![], pressure: vec![], fs: vec![] },
                WallFields { traction: vec![], pressure: vec![], fs: vec![] },
            ],
            pressure_offset: 0.0,
            residual,
            mu,
            c,
            geom: geom.clone(),
            interp,
        };
        let raw = wall_traction(&sol, geom);
        let offset = match gauge {
            PressureGauge::WallMean => {
                let total: f64 = raw.iter().flat_map(|w| w.pressure.iter()).sum();
                total / (2 * m) as f64
            }
            PressureGauge::PinAt(p) => sol.evaluate(p, false).pressure,
        };
        sol.pressure_offset = offset;
        sol.walls = raw;
        sol.shift_pressure(offset);
        sol
    }

    /// Lowers every pressure value by `dp`; tractions shift by `dp·n`.
    pub fn shift_pressure(&mut self, dp: f64) {
        for w in Wall::BOTH {
            let dw = self.geom.wall(w);
            let f = &mut self.walls[w.index()];
            for j in 0..dw.m {
                f.pressure[j] -= dp;
                f.traction[j][0] += dp * dw.normal[j][0];
                f.traction[j][1] += dp * dw.normal[j][1];
            }
        }
    }

    pub fn geometry(&self) -> &ChannelGeometry {
        &self.geom
    }

    pub fn wall(&self, w: Wall) -> &WallFields {
        &self.walls[w.index()]
    }

    pub fn density_at(&self, w: Wall, j: usize) -> Point {
        let m = self.geom.m();
        let c = col_density(w, j, 0, m);
        [self.density[c], self.density[c + 1]]
    }

    /// Field at `x` from the representation. With `refine`, targets in the
    /// near-wall zone get a local high-order correction.
    pub fn evaluate(&self, x: Point, refine: bool) -> FieldValue {
        let mut out = FieldValue::default();
        let l = self.geom.wavelength;
        for w in Wall::BOTH {
            let dw = self.geom.wall(w);
            for j in 0..dw.m {
                let rho = self.density_at(w, j);
                let wj = dw.weight(j);
                let f = [rho[0] * wj, rho[1] * wj];
                let y = dw.x[j];
                for n in [-1.0, 0.0, 1.0] {
                    out.add_source([x[0] - y[0] - n * l, x[1] - y[1]], f, self.mu);
                }
            }
            if refine {
                if let Some(corr) = self.near_wall_correction(w, x) {
                    out.axpy(1.0, &corr);
                }
            }
        }
        for (p, c) in self.proxies.iter().zip(&self.proxy_coeffs) {
            out.add_source([x[0] - p[0], x[1] - p[1]], *c, self.mu);
        }
        out.pressure -= self.pressure_offset;
        out
    }

    /// Whether `x` lies within the near-wall zone of either wall.
    pub fn is_near_wall(&self, x: Point) -> bool {
        Wall::BOTH.iter().any(|&w| self.nearest_node(w, x).2)
    }

    /// Nearest node over the three copies: (parameter, distance, inside zone).
    fn nearest_node(&self, w: Wall, x: Point) -> (f64, f64, bool) {
        let dw = self.geom.wall(w);
        let l = self.geom.wavelength;
        let mut best = (0.0, f64::INFINITY, 0usize);
        for n in [-1.0, 0.0, 1.0] {
            for j in 0..dw.m {
                let d = (x[0] - dw.x[j][0] - n * l).hypot(x[1] - dw.x[j][1]);
                if d < best.1 {
                    best = (dw.t[j] + 2.0 * PI * n, d, j);
                }
            }
        }
        let spacing = dw.h * dw.g[best.2];
        (best.0, best.1, best.1 < NEAR_WALL_SPACINGS * spacing)
    }

    /// `∫χF − Σ_coarse χF` for a smooth window `χ` around the closest wall
    /// point, with the integral done by graded Gauss–Legendre panels. The
    /// coarse sum away from the target is left untouched.
    fn near_wall_correction(&self, w: Wall, x: Point) -> Option<FieldValue> {
        let (t0, _, near) = self.nearest_node(w, x);
        if !near {
            return None;
        }
        let dw = self.geom.wall(w);
        let curve = dw.curve();
        let l = self.geom.wavelength;
        let mu = self.mu;
        // Closest point by Newton on (y(t) − x)·y'(t) = 0.
        let mut tc = t0;
        for _ in 0..20 {
            let (y, d1, d2) = curve.derivatives(tc);
            let e = [y[0] - x[0], y[1] - x[1]];
            let f = e[0] * d1[0] + e[1] * d1[1];
            let fp = d1[0] * d1[0] + d1[1] * d1[1] + e[0] * d2[0] + e[1] * d2[1];
            if fp <= 0.0 {
                break;
            }
            let step = (f / fp).clamp(-dw.h, dw.h);
            tc -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let (yc, d1c, _) = curve.derivatives(tc);
        let gc = d1c[0].hypot(d1c[1]);
        let dist = (x[0] - yc[0]).hypot(x[1] - yc[1]).max(1e-14 * l);

        let h = dw.h;
        let room = (tc + 2.0 * PI).min(4.0 * PI - h - tc);
        let b = (3.0 * h).min(room / 12.0);
        let a = 6.0 * b;
        let half_width = 12.0 * b;
        let chi = |t: f64| 0.5 * (libm::erf((t - tc + a) / b) - libm::erf((t - tc - a) / b));

        let rho = &self.interp[w.index()];
        let mut fine = FieldValue::default();
        let add_at = |t: f64, weight: f64, acc: &mut FieldValue| {
            let (y, d1, _) = curve.derivatives(t);
            let g = d1[0].hypot(d1[1]);
            let s = weight * g * chi(t);
            let f = [rho[0].eval(t) * s, rho[1].eval(t) * s];
            acc.add_source([x[0] - y[0], x[1] - y[1]], f, mu);
        };

        let (gx, gw) = gauss_legendre(16);
        let mut edges = Vec::new();
        let inner = 0.5 * dist / gc;
        let mut delta = half_width;
        while delta > inner {
            edges.push(delta);
            delta *= 0.5;
        }
        edges.push(delta);
        // Symmetric breakpoints, then split long panels to at most 2h.
        let mut breaks: Vec<f64> = edges.iter().map(|e| -e).collect();
        breaks.extend(edges.iter().rev());
        for pair in breaks.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let pieces = ((hi - lo) / (2.0 * h)).ceil().max(1.0) as usize;
            let len = (hi - lo) / pieces as f64;
            for p in 0..pieces {
                let mid = tc + lo + (p as f64 + 0.5) * len;
                for (s, wq) in gx.iter().zip(&gw) {
                    add_at(mid + 0.5 * len * s, 0.5 * len * wq, &mut fine);
                }
            }
        }

        let mut coarse = FieldValue::default();
        for n in [-1i32, 0, 1] {
            for j in 0..dw.m {
                let t = dw.t[j] + 2.0 * PI * n as f64;
                if (t - tc).abs() > half_width {
                    continue;
                }
                let rj = self.density_at(w, j);
                let s = dw.weight(j) * chi(t);
                let y = dw.x[j];
                coarse.add_source([x[0] - y[0] - n as f64 * l, x[1] - y[1]], [rj[0] * s, rj[1] * s], mu);
            }
        }
        fine.axpy(-1.0, &coarse);
        Some(fine)
    }
}

/// On-wall traction from the interior limit of the single layer:
/// `f = ½ρ + PV Σ ∫ T ρ ds + Σ T c_m`, with the smooth diagonal limit
/// `(κ/2π) τ⊗τ` on the self term. Returns raw values (no gauge applied).
pub fn wall_traction(sol: &FlowSolution, geom: &ChannelGeometry) -> [WallFields; 2] {
    let l = geom.wavelength;
    let m = geom.m();
    let compute = |wt: Wall| -> WallFields {
        let tw = geom.wall(wt);
        let mut traction = Vec::with_capacity(m);
        for i in 0..m {
            let x = tw.x[i];
            let n_i = tw.normal[i];
            let rho_i = sol.density_at(wt, i);
            let mut f = [0.5 * rho_i[0], 0.5 * rho_i[1]];
            for ws in Wall::BOTH {
                let sw = geom.wall(ws);
                for j in 0..m {
                    let rho = sol.density_at(ws, j);
                    let wj = sw.weight(j);
                    let y = sw.x[j];
                    for n in [-1.0, 0.0, 1.0] {
                        let t = if ws == wt && n == 0.0 && i == j {
                            let tau = tw.tau[i];
                            let c = tw.kappa[i] / (2.0 * PI);
                            [[c * tau[0] * tau[0], c * tau[0] * tau[1]], [c * tau[1] * tau[0], c * tau[1] * tau[1]]]
                        } else {
                            traction_kernel_r([x[0] - y[0] - n * l, x[1] - y[1]], n_i)
                        };
                        let v = mat_vec(&t, rho);
                        f[0] += wj * v[0];
                        f[1] += wj * v[1];
                    }
                }
            }
            for (p, c) in sol.proxies.iter().zip(&sol.proxy_coeffs) {
                let v = mat_vec(&traction_kernel_r([x[0] - p[0], x[1] - p[1]], n_i), *c);
                f[0] += v[0];
                f[1] += v[1];
            }
            traction.push(f);
        }
        let pressure = traction.iter().zip(&tw.normal).map(|(f, n)| -(f[0] * n[0] + f[1] * n[1])).collect();
        let fs = traction.iter().zip(&tw.tau).map(|(f, t)| f[0] * t[0] + f[1] * t[1]).collect();
        WallFields { traction, pressure, fs }
    };
    [compute(Wall::Upper), compute(Wall::Lower)]
}

/// Plain-quadrature velocity and pressure at interior points.
pub fn eval_field(sol: &FlowSolution, points: &[Point]) -> Vec<FieldSample> {
    points
        .iter()
        .map(|&p| {
            let v = sol.evaluate(p, false);
            FieldSample { velocity: v.velocity, pressure: v.pressure, near_wall: sol.is_near_wall(p) }
        })
        .collect()
}

/// Like [`eval_field`] but with the near-wall correction applied.
pub fn eval_field_refined(sol: &FlowSolution, points: &[Point]) -> Vec<FieldSample> {
    points
        .iter()
        .map(|&p| {
            let v = sol.evaluate(p, true);
            FieldSample { velocity: v.velocity, pressure: v.pressure, near_wall: sol.is_near_wall(p) }
        })
        .collect()
}

/// `∫ u₁ dx₂` over the end section at `x₁ = 0` (`right = false`) or `x₁ = L`.
pub fn section_flux(sol: &FlowSolution, right: bool) -> f64 {
    let g = &sol.geom;
    let x1 = if right { g.wavelength } else { 0.0 };
    g.section_x2
        .iter()
        .zip(&g.section_weights)
        .map(|(&eta, &w)| w * sol.evaluate([x1, eta], true).velocity[0])
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, WallShapeParams};

    fn flat_geom(h: f64, cfg: &SolverConfig) -> ChannelGeometry {
        let p = WallShapeParams::flat(2, 2.0 * PI, 0.0, h);
        cfg.geometry(&p).unwrap()
    }

    fn wavy_params() -> WallShapeParams {
        let mut p = WallShapeParams::flat(2, 2.0 * PI, -1.0, 1.0);
        p.set_x2(Wall::Upper, 1, 0.2);
        p.set_x2(Wall::Upper, 4, 0.1);
        p.set_x2(Wall::Lower, 2, 0.15);
        p.set_x1(Wall::Upper, 1, 0.1);
        p
    }

    /// Interior points at assorted distances from both walls.
    fn probe_points(geom: &ChannelGeometry) -> Vec<Point> {
        let mut pts = vec![[1.0, 0.0], [3.0, 0.3], [0.0, 0.3], [geom.wavelength, -0.2]];
        for w in Wall::BOTH {
            let c = geom.params.curve(w);
            for (t, d) in [(0.0, 0.01), (1.3, 0.3), (2.9, 0.001), (4.4, 0.05), (6.0, 1e-4)] {
                let (x, d1, d2) = c.derivatives(t);
                let fr = Frame::from_derivatives(d1, d2, w);
                pts.push([x[0] - d * fr.normal[0], x[1] - d * fr.normal[1]]);
            }
        }
        pts
    }

    const Y0: Point = [2.0, 2.6];
    const F0: Point = [0.7, -0.4];

    fn point_force_velocity(x: Point, mu: f64) -> Point {
        mat_vec(&stokeslet_r([x[0] - Y0[0], x[1] - Y0[1]], mu), F0)
    }

    /// Solve with the data of one point force placed above the channel.
    fn point_force_solution(cfg: &SolverConfig, geom: &ChannelGeometry) -> (AssembledSystem, Vec<f64>, FlowSolution) {
        let mu = cfg.mu;
        let t = |x: Point| mat_vec(&traction_kernel_r([x[0] - Y0[0], x[1] - Y0[1]], SECTION_NORMAL), F0);
        let l = geom.wavelength;
        let wall: Vec<Vec<Point>> =
            geom.walls().iter().map(|w| w.x.iter().map(|&x| point_force_velocity(x, mu)).collect()).collect();
        let mut vj = Vec::new();
        let mut tj = Vec::new();
        for &eta in &geom.section_x2 {
            let (a, b) = (point_force_velocity([l, eta], mu), point_force_velocity([0.0, eta], mu));
            vj.push([a[0] - b[0], a[1] - b[1]]);
            let (a, b) = (t([l, eta]), t([0.0, eta]));
            tj.push([a[0] - b[0], a[1] - b[1]]);
        }
        let sys = assemble_system(geom, cfg).unwrap();
        let b = sys.rhs([&wall[0], &wall[1]], &vj, &tj);
        let sol = sys.solve_rhs(geom, &b, SolveKind::Custom, PressureGauge::WallMean);
        (sys, b, sol)
    }

    #[test]
    fn system_dimensions() {
        let cfg = SolverConfig { m: 32, k_proxy: 40, mp: 16, ..Default::default() };
        let g = flat_geom(1.0, &cfg);
        let sys = assemble_system(&g, &cfg).unwrap();
        assert_eq!(sys.nrows(), 4 * 32 + 4 * 16);
        assert_eq!(sys.ncols(), 4 * 32 + 2 * 40);
        let d = SolverConfig::default();
        assert_eq!(4 * d.m + 4 * d.mp, 4 * d.m + 2 * d.k_proxy);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig { m: 30 + 1, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { k_proxy: 8, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { mp: 4, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { mu: 0.0, ..Default::default() }.validate().is_err());
        let cfg = SolverConfig::default();
        let g = ChannelGeometry::new(&wavy_params(), 32, 32).unwrap();
        assert!(assemble_system(&g, &cfg).is_err());
    }

    #[test]
    fn proxy_circle_encloses_cell() {
        let cfg = SolverConfig::default();
        let g = cfg.geometry(&wavy_params()).unwrap();
        let sys = assemble_system(&g, &cfg).unwrap();
        let c = sys.proxy_center;
        for w in g.walls() {
            for p in &w.x {
                assert!((p[0] - c[0]).hypot(p[1] - c[1]) < sys.proxy_radius / 1.4);
            }
        }
    }

    #[test]
    fn flat_channel_plug_flow() {
        let cfg = SolverConfig::default();
        let g = flat_geom(1.0, &cfg);
        let sol = solve_forward(&g, &cfg).unwrap();
        assert!(sol.residual < 1e-10);
        for p in probe_points(&flat_geom(1.0, &cfg)).into_iter().filter(|p| p[1] > 0.0 && p[1] < 1.0) {
            let v = sol.evaluate(p, true);
            assert!((v.velocity[0] + 1.0).abs() < 1e-8 && v.velocity[1].abs() < 1e-8, "{p:?}");
            for row in v.grad {
                assert!(row[0].abs() < 1e-8 && row[1].abs() < 1e-8);
            }
        }
        for w in Wall::BOTH {
            assert!(sol.wall(w).fs.iter().all(|fs| fs.abs() < 1e-8));
            assert!(sol.wall(w).pressure.iter().all(|p| p.abs() < 1e-8));
        }
    }

    #[test]
    fn flat_channel_poiseuille_adjoint() {
        let cfg = SolverConfig::default();
        let h = 1.0;
        let l = 2.0 * PI;
        let g = flat_geom(h, &cfg);
        let sol = solve_adjoint(&g, &cfg).unwrap();
        assert!(sol.residual < 1e-10);
        for p in [[0.5, 0.5], [3.0, 0.2], [6.0, 0.9], [1.0, 0.001], [6.2, 0.999]] {
            let v = sol.evaluate(p, true);
            let exact = p[1] * (p[1] - h) / (2.0 * l);
            assert!((v.velocity[0] - exact).abs() < 1e-8 && v.velocity[1].abs() < 1e-8);
            assert!((v.pressure - p[0] / l).abs() < 1e-8);
        }
        assert!((section_flux(&sol, true) + h.powi(3) / (12.0 * l)).abs() < 1e-8);
        assert!((section_flux(&sol, false) + h.powi(3) / (12.0 * l)).abs() < 1e-8);
        for w in Wall::BOTH {
            let dw = g.wall(w);
            for j in 0..dw.m {
                let f = sol.wall(w);
                assert!((f.fs[j].abs() - h / (2.0 * l)).abs() < 1e-8);
                assert!((f.pressure[j] - dw.x[j][0] / l).abs() < 1e-8);
            }
        }
        // Wall shear points against the flow on both walls (τ = −e₁, û₁ < 0).
        assert!(sol.wall(Wall::Upper).fs[0] < 0.0 && sol.wall(Wall::Lower).fs[0] < 0.0);
    }

    #[test]
    fn point_force_fixture_reproduces_field_and_traction() {
        for m in [64, 96] {
            let cfg = SolverConfig { m, mu: 1.3, ..Default::default() };
            let geom = cfg.geometry(&wavy_params()).unwrap();
            let (sys, b, sol) = point_force_solution(&cfg, &geom);
            let ax = linalg::mat_vec(sys.matrix.as_ref(), &{
                let mut x = sol.density.clone();
                x.extend(sol.proxy_coeffs.iter().flat_map(|c| [c[0], c[1]]));
                x
            });
            for r in 0..4 * m {
                assert!((ax[r] - b[r]).abs() < 1e-8);
            }
            for p in probe_points(&geom) {
                let v = sol.evaluate(p, true);
                let e = point_force_velocity(p, cfg.mu);
                assert!((v.velocity[0] - e[0]).abs() < 1e-8 && (v.velocity[1] - e[1]).abs() < 1e-8, "{p:?}");
            }
            for w in Wall::BOTH {
                let dw = geom.wall(w);
                let exact: Vec<Point> = (0..m)
                    .map(|j| {
                        let x = dw.x[j];
                        mat_vec(&traction_kernel_r([x[0] - Y0[0], x[1] - Y0[1]], dw.normal[j]), F0)
                    })
                    .collect();
                let p_exact: Vec<f64> = exact.iter().zip(&dw.normal).map(|(f, n)| -(f[0] * n[0] + f[1] * n[1])).collect();
                let p_mean = (geom.walls().iter().map(|w2| {
                    (0..m).map(|j| {
                        let x = w2.x[j];
                        let f = mat_vec(&traction_kernel_r([x[0] - Y0[0], x[1] - Y0[1]], w2.normal[j]), F0);
                        -(f[0] * w2.normal[j][0] + f[1] * w2.normal[j][1])
                    }).sum::<f64>()
                }).sum::<f64>()) / (2 * m) as f64;
                for j in 0..m {
                    let fs = exact[j][0] * dw.tau[j][0] + exact[j][1] * dw.tau[j][1];
                    assert!((fs - sol.wall(w).fs[j]).abs() < 1e-8);
                    assert!((p_exact[j] - p_mean - sol.wall(w).pressure[j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn decomposition_of_traction_holds() {
        let cfg = SolverConfig::default();
        let geom = cfg.geometry(&wavy_params()).unwrap();
        let sol = solve_forward(&geom, &cfg).unwrap();
        for w in Wall::BOTH {
            let dw = geom.wall(w);
            let f = sol.wall(w);
            for j in 0..dw.m {
                for c in 0..2 {
                    let rebuilt = -f.pressure[j] * dw.normal[j][c] + f.fs[j] * dw.tau[j][c];
                    assert!((rebuilt - f.traction[j][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn proxy_count_convergence_on_flat_channel() {
        let base = SolverConfig { k_proxy: 32, ..Default::default() };
        let fine = SolverConfig { k_proxy: 64, ..Default::default() };
        let s1 = solve_adjoint(&flat_geom(1.0, &base), &base).unwrap();
        let s2 = solve_adjoint(&flat_geom(1.0, &fine), &fine).unwrap();
        for w in Wall::BOTH {
            for (a, b) in s1.wall(w).traction.iter().zip(&s2.wall(w).traction) {
                assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn wavy_forward_is_periodic_and_conserves_mass() {
        let cfg = SolverConfig::default();
        let geom = cfg.geometry(&wavy_params()).unwrap();
        let sys = assemble_system(&geom, &cfg).unwrap();
        let sol = sys.solve_forward(&geom);
        assert!(sol.residual < 1e-10);
        for &eta in &geom.section_x2 {
            let a = sol.evaluate([0.0, eta], true);
            let b = sol.evaluate([geom.wavelength, eta], true);
            assert!((a.velocity[0] - b.velocity[0]).abs() < 1e-8 && (a.velocity[1] - b.velocity[1]).abs() < 1e-8);
        }
        assert!((section_flux(&sol, false) - section_flux(&sol, true)).abs() < 1e-8);
        let adj = sys.solve_adjoint(&geom);
        assert!(adj.residual < 1e-10);
        assert!(adj.evaluate([0.0, 0.0], false).pressure.abs() < 1e-12);
    }

    #[test]
    fn sampled_velocity_is_divergence_free() {
        let cfg = SolverConfig::default();
        let geom = cfg.geometry(&wavy_params()).unwrap();
        let sol = solve_forward(&geom, &cfg).unwrap();
        let h = 1e-4;
        for p in probe_points(&geom).into_iter().filter(|p| !sol.is_near_wall(*p)) {
            let u = |q: Point| sol.evaluate(q, false).velocity;
            let div = (u([p[0] + h, p[1]])[0] - u([p[0] - h, p[1]])[0] + u([p[0], p[1] + h])[1]
                - u([p[0], p[1] - h])[1])
                / (2.0 * h);
            assert!(div.abs() < 1e-6);
        }
        for p in probe_points(&geom) {
            let g = sol.evaluate(p, true).grad;
            assert!((g[0][0] + g[1][1]).abs() < 1e-8);
        }
    }

    #[test]
    fn near_wall_points_are_flagged() {
        let cfg = SolverConfig::default();
        let g = flat_geom(1.0, &cfg);
        let sol = solve_forward(&g, &cfg).unwrap();
        let s = eval_field(&sol, &[[3.0, 0.5], [3.0, 0.01]]);
        assert!(!s[0].near_wall && s[1].near_wall);
        let r = eval_field_refined(&sol, &[[3.0, 0.01]]);
        assert!((r[0].velocity[0] + 1.0).abs() < 1e-8);
    }
}
