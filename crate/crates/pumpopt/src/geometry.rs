//! Periodic channel geometry: trigonometric wall parametrization, nodal
//! Frenet data, cell volume and the transformation velocities induced by
//! perturbing one design parameter.
//!
//! Sign table (both walls are parametrized left to right in `t`):
//!
//! | quantity | upper wall              | lower wall              |
//! |----------|-------------------------|-------------------------|
//! | tangent  | `-x'/g`                 | `-x'/g`                 |
//! | normal   | `(-x2', x1')/g` (up)    | `(x2', -x1')/g` (down)  |
//! | `d/ds`   | `-(1/g) d/dt`           | `-(1/g) d/dt`           |
//!
//! Normals point out of the fluid and curvature is `κ = τ_s·n = x''·n/g²`.

use crate::error::{Error, Result};
use crate::spectral::{gauss_legendre, periodic_derivative, periodic_grid};
use std::f64::consts::PI;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Wall {
    Upper,
    Lower,
}

impl Wall {
    pub const BOTH: [Wall; 2] = [Wall::Upper, Wall::Lower];

    pub fn index(self) -> usize {
        match self {
            Wall::Upper => 0,
            Wall::Lower => 1,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Wall::Upper => 1.0,
            Wall::Lower => -1.0,
        }
    }
}

/// Which coordinate of which wall a design parameter moves, and the mode.
/// Mode 0 is the vertical offset of the upper wall; modes `1..=N` are
/// `cos(kt) − 1`, modes `N+1..=2N` are `sin((k−N)t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub wall: Wall,
    pub component: usize,
    pub mode: usize,
}

/// The `8N+1` design vector. Layout:
/// `[ξ⁺₁ₖ (2N) | ξ⁻₁ₖ (2N) | ξ⁺₂₀ | ξ⁺₂ₖ (2N) | ξ⁻₂ₖ (2N)]`.
/// The lower wall offset `lower_anchor` is not a design parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct WallShapeParams {
    pub n_modes: usize,
    pub wavelength: f64,
    pub lower_anchor: f64,
    pub xi: Vec<f64>,
}

impl WallShapeParams {
    pub fn new(n_modes: usize, wavelength: f64, lower_anchor: f64, xi: Vec<f64>) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::InvalidParams("mode count must be positive".into()));
        }
        if xi.len() != Self::len_for(n_modes) {
            return Err(Error::InvalidParams(format!(
                "expected {} coefficients for N = {}, got {}",
                Self::len_for(n_modes),
                n_modes,
                xi.len()
            )));
        }
        if !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(Error::InvalidParams(format!("wavelength must be positive, got {wavelength}")));
        }
        if !lower_anchor.is_finite() || xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite coefficient".into()));
        }
        Ok(WallShapeParams { n_modes, wavelength, lower_anchor, xi })
    }

    /// Straight walls at heights `lower` and `upper`.
    pub fn flat(n_modes: usize, wavelength: f64, lower: f64, upper: f64) -> Self {
        let mut p = WallShapeParams {
            n_modes,
            wavelength,
            lower_anchor: lower,
            xi: vec![0.0; Self::len_for(n_modes)],
        };
        let k = p.upper_offset_index();
        p.xi[k] = upper;
        p
    }

    pub fn len_for(n_modes: usize) -> usize {
        8 * n_modes + 1
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn upper_offset_index(&self) -> usize {
        4 * self.n_modes
    }

    /// Index of the horizontal coefficient of mode `k ∈ 1..=2N`.
    pub fn x1_index(&self, wall: Wall, k: usize) -> usize {
        let n = self.n_modes;
        assert!((1..=2 * n).contains(&k));
        match wall {
            Wall::Upper => k - 1,
            Wall::Lower => 2 * n + k - 1,
        }
    }

    /// Index of the vertical coefficient of mode `k ∈ 0..=2N`; `None` for
    /// the lower wall offset, which is fixed.
    pub fn x2_index(&self, wall: Wall, k: usize) -> Option<usize> {
        let n = self.n_modes;
        assert!(k <= 2 * n);
        match (wall, k) {
            (Wall::Upper, 0) => Some(4 * n),
            (Wall::Lower, 0) => None,
            (Wall::Upper, k) => Some(4 * n + k),
            (Wall::Lower, k) => Some(6 * n + k),
        }
    }

    pub fn set_x1(&mut self, wall: Wall, k: usize, value: f64) {
        let i = self.x1_index(wall, k);
        self.xi[i] = value;
    }

    /// Sets a vertical coefficient; panics for the fixed lower offset.
    pub fn set_x2(&mut self, wall: Wall, k: usize, value: f64) {
        let i = self.x2_index(wall, k).expect("the lower wall offset is not a design parameter");
        self.xi[i] = value;
    }

    pub fn slot(&self, idx: usize) -> ParamSlot {
        let n = self.n_modes;
        assert!(idx < self.len(), "parameter index {idx} out of range");
        let (wall, component, mode) = if idx < 2 * n {
            (Wall::Upper, 0, idx + 1)
        } else if idx < 4 * n {
            (Wall::Lower, 0, idx - 2 * n + 1)
        } else if idx < 6 * n + 1 {
            (Wall::Upper, 1, idx - 4 * n)
        } else {
            (Wall::Lower, 1, idx - 6 * n)
        };
        ParamSlot { wall, component, mode }
    }

    /// Short label such as `x2+_0` or `x1-_3` used in output tables.
    pub fn param_label(&self, idx: usize) -> String {
        let s = self.slot(idx);
        let w = match s.wall {
            Wall::Upper => '+',
            Wall::Lower => '-',
        };
        format!("x{}{}_{}", s.component + 1, w, s.mode)
    }

    /// Plain-text `key = value` form: `n_modes`, `wavelength`,
    /// `lower_anchor`, then one line per coefficient keyed by
    /// [`param_label`](Self::param_label). Values use the shortest decimal
    /// that reads back to the same `f64`.
    pub fn to_key_value(&self) -> String {
        let mut s = String::from("# pumpopt wall shape\n");
        s += &format!("n_modes = {}\nwavelength = {}\nlower_anchor = {}\n", self.n_modes, self.wavelength, self.lower_anchor);
        for (k, v) in self.xi.iter().enumerate() {
            s += &format!("{} = {}\n", self.param_label(k), v);
        }
        s
    }

    /// Inverse of [`to_key_value`](Self::to_key_value). Blank lines and
    /// `#` comments are ignored; every key must appear exactly once.
    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut entries = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            if entries.insert(k.trim().to_string(), (lineno + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key `{}`", lineno + 1, k.trim())));
            }
        }
        let mut take = |key: &str| -> Result<(usize, String)> {
            entries.remove(key).ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
        };
        let n_modes: usize = {
            let (line, v) = take("n_modes")?;
            v.parse().map_err(|_| Error::Parse(format!("line {line}: bad mode count `{v}`")))?
        };
        let mut real = |key: &str| -> Result<f64> {
            let (line, v) = take(key)?;
            v.parse().map_err(|_| Error::Parse(format!("line {line}: bad number `{v}` for `{key}`")))
        };
        let wavelength = real("wavelength")?;
        let lower_anchor = real("lower_anchor")?;
        if n_modes == 0 {
            return Err(Error::InvalidParams("mode count must be positive".into()));
        }
        let template = WallShapeParams::flat(n_modes, 1.0, 0.0, 0.0);
        let xi = (0..template.len()).map(|k| real(&template.param_label(k))).collect::<Result<Vec<_>>>()?;
        if let Some(extra) = entries.keys().min() {
            return Err(Error::Parse(format!("unknown key `{extra}`")));
        }
        WallShapeParams::new(n_modes, wavelength, lower_anchor, xi)
    }

    pub fn curve(&self, wall: Wall) -> WallCurve {
        let n = self.n_modes;
        let (a1, a2, offset) = match wall {
            Wall::Upper => (
                self.xi[0..2 * n].to_vec(),
                self.xi[4 * n + 1..6 * n + 1].to_vec(),
                self.xi[4 * n],
            ),
            Wall::Lower => (
                self.xi[2 * n..4 * n].to_vec(),
                self.xi[6 * n + 1..8 * n + 1].to_vec(),
                self.lower_anchor,
            ),
        };
        WallCurve { n_modes: n, wavelength: self.wavelength, offset, a1, a2 }
    }
}

/// One wall as an analytic curve `t ↦ x(t)`, defined for all real `t` with
/// `x(t + 2π) = x(t) + L e₁`.
#[derive(Clone, Debug)]
pub struct WallCurve {
    n_modes: usize,
    wavelength: f64,
    offset: f64,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

impl WallCurve {
    /// Position and first two t-derivatives.
    pub fn derivatives(&self, t: f64) -> (Point, Point, Point) {
        let n = self.n_modes;
        let (s1, c1) = t.sin_cos();
        let mut x = [self.wavelength * t / (2.0 * PI), self.offset];
        let mut d1 = [self.wavelength / (2.0 * PI), 0.0];
        let mut d2 = [0.0, 0.0];
        let (mut ck, mut sk) = (1.0, 0.0);
        for k in 1..=n {
            let cn = ck * c1 - sk * s1;
            sk = sk * c1 + ck * s1;
            ck = cn;
            let kf = k as f64;
            let (ac, as_) = ([self.a1[k - 1], self.a2[k - 1]], [self.a1[n + k - 1], self.a2[n + k - 1]]);
            for c in 0..2 {
                x[c] += ac[c] * (ck - 1.0) + as_[c] * sk;
                d1[c] += -ac[c] * kf * sk + as_[c] * kf * ck;
                d2[c] += -kf * kf * (ac[c] * ck + as_[c] * sk);
            }
        }
        (x, d1, d2)
    }

    pub fn point(&self, t: f64) -> Point {
        self.derivatives(t).0
    }
}

/// Point on a wall at parameter `t`.
pub fn eval_wall(params: &WallShapeParams, wall: Wall, t: f64) -> Point {
    params.curve(wall).point(t)
}

/// Unit tangent, unit normal, curvature and speed from `x'` and `x''` under
/// the sign convention of `wall`.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub speed: f64,
    pub tangent: Point,
    pub normal: Point,
    pub curvature: f64,
}

impl Frame {
    pub fn from_derivatives(d1: Point, d2: Point, wall: Wall) -> Frame {
        let g = d1[0].hypot(d1[1]);
        let tangent = [-d1[0] / g, -d1[1] / g];
        let sgn = wall.sign();
        let normal = [-sgn * d1[1] / g, sgn * d1[0] / g];
        let curvature = (d2[0] * normal[0] + d2[1] * normal[1]) / (g * g);
        Frame { speed: g, tangent, normal, curvature }
    }
}

/// Nodal data for one wall on the grid `t_j = 2πj/M`.
#[derive(Clone, Debug)]
pub struct DiscretizedWall {
    pub wall: Wall,
    pub m: usize,
    /// Grid spacing in `t`.
    pub h: f64,
    pub t: Vec<f64>,
    pub x: Vec<Point>,
    pub tau: Vec<Point>,
    pub normal: Vec<Point>,
    pub kappa: Vec<f64>,
    pub g: Vec<f64>,
    pub ell: f64,
    curve: WallCurve,
}

impl DiscretizedWall {
    pub fn curve(&self) -> &WallCurve {
        &self.curve
    }

    /// Trapezoidal weight `g_j h` of node `j`.
    pub fn weight(&self, j: usize) -> f64 {
        self.g[j] * self.h
    }

    /// Arclength derivative of nodal periodic data.
    pub fn d_ds(&self, values: &[f64]) -> Vec<f64> {
        periodic_derivative(values)
            .iter()
            .zip(&self.g)
            .map(|(d, g)| -d / g)
            .collect()
    }

    /// Trapezoidal `∫ f ds` of nodal data.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.g).map(|(v, g)| v * g).sum::<f64>() * self.h
    }
}

pub fn discretize_wall(params: &WallShapeParams, wall: Wall, m: usize) -> Result<DiscretizedWall> {
    if m < 16 || m % 2 != 0 {
        return Err(Error::InvalidParams(format!("node count must be even and >= 16, got {m}")));
    }
    let curve = params.curve(wall);
    let t = periodic_grid(m);
    let mut x = Vec::with_capacity(m);
    let mut tau = Vec::with_capacity(m);
    let mut normal = Vec::with_capacity(m);
    let mut kappa = Vec::with_capacity(m);
    let mut g = Vec::with_capacity(m);
    for &tj in &t {
        let (p, d1, d2) = curve.derivatives(tj);
        let f = Frame::from_derivatives(d1, d2, wall);
        if !(f.speed >= 1e-10) {
            return Err(Error::DegenerateWall { t: tj, speed: f.speed });
        }
        x.push(p);
        tau.push(f.tangent);
        normal.push(f.normal);
        kappa.push(f.curvature);
        g.push(f.speed);
    }
    let h = 2.0 * PI / m as f64;
    let ell = g.iter().sum::<f64>() * h;
    Ok(DiscretizedWall { wall, m, h, t, x, tau, normal, kappa, g, ell, curve })
}

/// Both walls of one period, the end-section quadrature and derived scalars.
#[derive(Clone, Debug)]
pub struct ChannelGeometry {
    pub params: WallShapeParams,
    pub upper: DiscretizedWall,
    pub lower: DiscretizedWall,
    pub wavelength: f64,
    pub volume: f64,
    /// Upper and lower corners of the right end section `x₁ = L`.
    pub z_plus: Point,
    pub z_minus: Point,
    /// Gauss–Legendre heights on the end sections (shared by `x₁ = 0` and `x₁ = L`).
    pub section_x2: Vec<f64>,
    pub section_weights: Vec<f64>,
}

impl ChannelGeometry {
    /// Discretizes both walls with `m` nodes each and the end sections with
    /// `mp` Gauss nodes, rejecting touching or inverted channels.
    pub fn new(params: &WallShapeParams, m: usize, mp: usize) -> Result<Self> {
        let upper = discretize_wall(params, Wall::Upper, m)?;
        let lower = discretize_wall(params, Wall::Lower, m)?;
        let l = params.wavelength;
        let z_plus = [l, params.xi[params.upper_offset_index()]];
        let z_minus = [l, params.lower_anchor];
        if z_plus[1] <= z_minus[1] {
            return Err(Error::InvalidGeometry("upper wall end lies below the lower wall end".into()));
        }
        let gap = min_wall_gap(&upper, &lower, l);
        if gap < 1e-3 * l {
            return Err(Error::InvalidGeometry(format!("walls too close (gap {gap:e})")));
        }
        if let Some(what) = find_crossing(params, 4 * m) {
            return Err(Error::InvalidGeometry(what.into()));
        }
        if mp < 2 {
            return Err(Error::InvalidParams("end sections need at least 2 nodes".into()));
        }
        let (s, w) = gauss_legendre(mp);
        let mid = 0.5 * (z_plus[1] + z_minus[1]);
        let half = 0.5 * (z_plus[1] - z_minus[1]);
        let section_x2 = s.iter().map(|si| mid + half * si).collect();
        let section_weights = w.iter().map(|wi| half * wi).collect();
        let volume = volume_from_walls(&upper, &lower);
        let geom = ChannelGeometry {
            params: params.clone(),
            upper,
            lower,
            wavelength: l,
            volume,
            z_plus,
            z_minus,
            section_x2,
            section_weights,
        };
        channel_volume(&geom)?;
        Ok(geom)
    }

    pub fn wall(&self, w: Wall) -> &DiscretizedWall {
        match w {
            Wall::Upper => &self.upper,
            Wall::Lower => &self.lower,
        }
    }

    pub fn walls(&self) -> [&DiscretizedWall; 2] {
        [&self.upper, &self.lower]
    }

    pub fn m(&self) -> usize {
        self.upper.m
    }

    /// Total wall length `ℓ⁺ + ℓ⁻`.
    pub fn total_length(&self) -> f64 {
        self.upper.ell + self.lower.ell
    }
}

fn min_wall_gap(a: &DiscretizedWall, b: &DiscretizedWall, l: f64) -> f64 {
    let mut best = f64::INFINITY;
    for p in &a.x {
        for q in &b.x {
            for shift in [-l, 0.0, l] {
                let d = (p[0] - q[0] - shift).hypot(p[1] - q[1]);
                best = best.min(d);
            }
        }
    }
    best
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let orient = |p: Point, q: Point, r: Point| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Checks both walls, sampled at `samples` points per period, for
/// self-intersection and for crossing each other (including neighbouring
/// periods).
fn find_crossing(params: &WallShapeParams, samples: usize) -> Option<&'static str> {
    let l = params.wavelength;
    let poly = |w: Wall| -> Vec<Point> {
        let c = params.curve(w);
        (0..=samples).map(|i| c.point(2.0 * PI * i as f64 / samples as f64)).collect()
    };
    let (up, lo) = (poly(Wall::Upper), poly(Wall::Lower));
    let shifted = |p: Point, s: f64| [p[0] + s, p[1]];
    for (a, b, same, what) in [
        (&up, &up, true, "upper wall intersects itself"),
        (&lo, &lo, true, "lower wall intersects itself"),
        (&up, &lo, false, "walls cross"),
    ] {
        for i in 0..samples {
            for shift in [-l, 0.0, l] {
                for j in 0..samples {
                    if same && shift == 0.0 && i.abs_diff(j) <= 1 {
                        continue;
                    }
                    if same && ((i == 0 && j == samples - 1 && shift == -l) || (j == 0 && i == samples - 1 && shift == l)) {
                        continue;
                    }
                    if segments_cross(a[i], a[i + 1], shifted(b[j], shift), shifted(b[j + 1], shift)) {
                        return Some(what);
                    }
                }
            }
        }
    }
    None
}

/// `|Ω| = ∮ x₂ n₂ ds`: the end sections have `n₂ = 0` and on the walls
/// `n₂ ds = ±x₁' dt`, so the integrand `x₂⁺x₁⁺' − x₂⁻x₁⁻'` is periodic and
/// the trapezoidal rule converges spectrally.
fn volume_from_walls(upper: &DiscretizedWall, lower: &DiscretizedWall) -> f64 {
    let term = |w: &DiscretizedWall| -> f64 {
        (0..w.m).map(|j| w.x[j][1] * (-w.tau[j][0] * w.g[j])).sum::<f64>() * w.h
    };
    term(upper) - term(lower)
}

/// Area of one period of the channel; a non-positive value means the walls
/// are inverted and is reported as an error.
pub fn channel_volume(geom: &ChannelGeometry) -> Result<f64> {
    let v = volume_from_walls(&geom.upper, &geom.lower);
    if v <= 0.0 {
        return Err(Error::InvalidGeometry(format!("non-positive channel volume {v}")));
    }
    Ok(v)
}

/// A transformation velocity restricted to one wall.
#[derive(Clone, Debug)]
pub struct WallPerturbation {
    pub theta: Vec<Point>,
    pub theta_s: Vec<f64>,
    pub theta_n: Vec<f64>,
    pub dtheta_n_ds: Vec<f64>,
    /// Values at `t = 0` and `t = 2π`.
    pub at_start: Point,
    pub at_end: Point,
}

impl WallPerturbation {
    fn new(wall: &DiscretizedWall, theta: Vec<Point>, at_start: Point, at_end: Point) -> Self {
        let theta_s: Vec<f64> = theta.iter().zip(&wall.tau).map(|(v, t)| v[0] * t[0] + v[1] * t[1]).collect();
        let theta_n: Vec<f64> = theta.iter().zip(&wall.normal).map(|(v, n)| v[0] * n[0] + v[1] * n[1]).collect();
        let dtheta_n_ds = wall.d_ds(&theta_n);
        WallPerturbation { theta, theta_s, theta_n, dtheta_n_ds, at_start, at_end }
    }
}

#[derive(Clone, Debug)]
pub struct PerturbationField {
    pub upper: WallPerturbation,
    pub lower: WallPerturbation,
    pub theta_at_zplus: Point,
    pub theta_at_zminus: Point,
}

impl PerturbationField {
    /// Builds a field from nodal values on both walls. Nodal data are taken
    /// as periodic, so the `t = 2π` value equals node 0.
    pub fn from_nodal(geom: &ChannelGeometry, upper: Vec<Point>, lower: Vec<Point>) -> Self {
        assert_eq!(upper.len(), geom.upper.m);
        assert_eq!(lower.len(), geom.lower.m);
        let (u0, l0) = (upper[0], lower[0]);
        PerturbationField {
            upper: WallPerturbation::new(&geom.upper, upper, u0, u0),
            lower: WallPerturbation::new(&geom.lower, lower, l0, l0),
            theta_at_zplus: u0,
            theta_at_zminus: l0,
        }
    }

    pub fn wall(&self, w: Wall) -> &WallPerturbation {
        match w {
            Wall::Upper => &self.upper,
            Wall::Lower => &self.lower,
        }
    }

    pub fn theta2_at_zplus(&self) -> f64 {
        self.theta_at_zplus[1]
    }

    /// Largest violation of the admissibility conditions: periodicity,
    /// vanishing horizontal component at the end sections, and `θ(z⁻) = 0`.
    pub fn admissibility_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for w in [&self.upper, &self.lower] {
            d = d.max((w.at_start[0] - w.at_end[0]).abs());
            d = d.max((w.at_start[1] - w.at_end[1]).abs());
            d = d.max(w.at_start[0].abs()).max(w.at_end[0].abs());
        }
        d.max(self.theta_at_zminus[0].abs()).max(self.theta_at_zminus[1].abs())
    }

    /// `αθ₁ + βθ₂` for fields on the same geometry.
    pub fn combine(geom: &ChannelGeometry, a: f64, f1: &Self, b: f64, f2: &Self) -> Self {
        let mix = |p: &[Point], q: &[Point]| -> Vec<Point> {
            p.iter().zip(q).map(|(x, y)| [a * x[0] + b * y[0], a * x[1] + b * y[1]]).collect()
        };
        let mix1 = |x: Point, y: Point| [a * x[0] + b * y[0], a * x[1] + b * y[1]];
        let up = WallPerturbation::new(
            &geom.upper,
            mix(&f1.upper.theta, &f2.upper.theta),
            mix1(f1.upper.at_start, f2.upper.at_start),
            mix1(f1.upper.at_end, f2.upper.at_end),
        );
        let lo = WallPerturbation::new(
            &geom.lower,
            mix(&f1.lower.theta, &f2.lower.theta),
            mix1(f1.lower.at_start, f2.lower.at_start),
            mix1(f1.lower.at_end, f2.lower.at_end),
        );
        PerturbationField {
            upper: up,
            lower: lo,
            theta_at_zplus: mix1(f1.theta_at_zplus, f2.theta_at_zplus),
            theta_at_zminus: mix1(f1.theta_at_zminus, f2.theta_at_zminus),
        }
    }
}

fn basis_value(n_modes: usize, mode: usize, t: f64) -> f64 {
    if mode == 0 {
        1.0
    } else if mode <= n_modes {
        (mode as f64 * t).cos() - 1.0
    } else {
        ((mode - n_modes) as f64 * t).sin()
    }
}

/// The exact field `∂x/∂ξ_k` (the parametrization is linear in ξ).
pub fn basis_perturbation(params: &WallShapeParams, k: usize, geom: &ChannelGeometry) -> PerturbationField {
    let slot = params.slot(k);
    let build = |wall: Wall| -> WallPerturbation {
        let dw = geom.wall(wall);
        let value = |t: f64| -> Point {
            let mut v = [0.0, 0.0];
            if wall == slot.wall {
                v[slot.component] = basis_value(params.n_modes, slot.mode, t);
            }
            v
        };
        let theta = dw.t.iter().map(|&t| value(t)).collect();
        // Every basis function is 2π-periodic; evaluating sin(2πk) directly
        // would leave an O(k·ε) defect at the right end.
        WallPerturbation::new(dw, theta, value(0.0), value(0.0))
    };
    let upper = build(Wall::Upper);
    let lower = build(Wall::Lower);
    let theta_at_zplus = upper.at_end;
    let theta_at_zminus = lower.at_end;
    PerturbationField { upper, lower, theta_at_zplus, theta_at_zminus }
}

/// `dℓ* = −∫ κ θ_n ds` by the trapezoidal rule.
pub fn dl_star(wall: &DiscretizedWall, theta_n: &[f64]) -> f64 {
    -(0..wall.m)
        .map(|j| wall.kappa[j] * theta_n[j] * wall.g[j])
        .sum::<f64>()
        * wall.h
}
