//! Free-space 2D Stokes kernels. All functions take `r = x − y`.

use crate::error::{Error, Result};
use crate::geometry::Point;
use std::f64::consts::PI;

pub type Mat2 = [[f64; 2]; 2];

/// Stokeslet `(1/4πμ)(−log|r| I + r⊗r/|r|²)`.
#[inline]
pub fn stokeslet_r(r: Point, mu: f64) -> Mat2 {
    let r2 = r[0] * r[0] + r[1] * r[1];
    let c = 1.0 / (4.0 * PI * mu);
    let lg = -0.5 * r2.ln();
    let a = r[0] * r[0] / r2;
    let b = r[0] * r[1] / r2;
    let d = r[1] * r[1] / r2;
    [[c * (lg + a), c * b], [c * b, c * (lg + d)]]
}

/// Pressure kernel `(1/2π) r/|r|²`.
#[inline]
pub fn pressure_kernel_r(r: Point) -> Point {
    let r2 = r[0] * r[0] + r[1] * r[1];
    let c = 1.0 / (2.0 * PI * r2);
    [c * r[0], c * r[1]]
}

/// Traction kernel `−(1/π)(r⊗r/|r|²)(r·n/|r|²)` for the target normal `n`.
#[inline]
pub fn traction_kernel_r(r: Point, n: Point) -> Mat2 {
    let r2 = r[0] * r[0] + r[1] * r[1];
    let c = -(r[0] * n[0] + r[1] * n[1]) / (PI * r2 * r2);
    [[c * r[0] * r[0], c * r[0] * r[1]], [c * r[1] * r[0], c * r[1] * r[1]]]
}

/// Target gradient of the Stokeslet: entry `[k][i][j] = ∂S_ij/∂x_k`.
#[inline]
pub fn stokeslet_gradient_r(r: Point, mu: f64) -> [Mat2; 2] {
    let r2 = r[0] * r[0] + r[1] * r[1];
    let c = 1.0 / (4.0 * PI * mu * r2);
    let mut out = [[[0.0; 2]; 2]; 2];
    for (k, ok) in out.iter_mut().enumerate() {
        for (i, oi) in ok.iter_mut().enumerate() {
            for (j, v) in oi.iter_mut().enumerate() {
                let dij = if i == j { 1.0 } else { 0.0 };
                let dik = if i == k { 1.0 } else { 0.0 };
                let djk = if j == k { 1.0 } else { 0.0 };
                *v = c * (-dij * r[k] + dik * r[j] + djk * r[i] - 2.0 * r[i] * r[j] * r[k] / r2);
            }
        }
    }
    out
}

fn diff(x: Point, y: Point) -> Result<Point> {
    let r = [x[0] - y[0], x[1] - y[1]];
    if r[0] == 0.0 && r[1] == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(r)
}

pub fn stokeslet(x: Point, y: Point, mu: f64) -> Result<Mat2> {
    Ok(stokeslet_r(diff(x, y)?, mu))
}

pub fn pressure_kernel(x: Point, y: Point) -> Result<Point> {
    Ok(pressure_kernel_r(diff(x, y)?))
}

pub fn traction_kernel(x: Point, y: Point, n_x: Point) -> Result<Mat2> {
    Ok(traction_kernel_r(diff(x, y)?, n_x))
}

#[inline]
pub fn mat_vec(a: &Mat2, v: Point) -> Point {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn stokeslet_hand_values() {
        let s = stokeslet([1.0, 0.0], [0.0, 0.0], 1.0).unwrap();
        assert!(close(s[0][0], 1.0 / (4.0 * PI), 1e-16));
        assert_eq!([s[0][1], s[1][0], s[1][1]], [0.0, 0.0, 0.0]);
        let s = stokeslet([0.0, 1.0], [0.0, 0.0], 1.0).unwrap();
        assert!(close(s[1][1], 1.0 / (4.0 * PI), 1e-16));
        assert_eq!([s[0][0], s[0][1], s[1][0]], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn pressure_and_traction_hand_values() {
        let q = pressure_kernel([1.0, 0.0], [0.0, 0.0]).unwrap();
        assert!(close(q[0], 1.0 / (2.0 * PI), 1e-16) && q[1] == 0.0);
        let q = pressure_kernel([2.0, 0.0], [0.0, 0.0]).unwrap();
        assert!(close(q[0], 1.0 / (4.0 * PI), 1e-16));
        let t = traction_kernel([1.0, 0.0], [0.0, 0.0], [1.0, 0.0]).unwrap();
        assert!(close(t[0][0], -1.0 / PI, 1e-16));
        assert_eq!([t[0][1], t[1][0], t[1][1]], [0.0, 0.0, 0.0]);
        let t = traction_kernel([1.0, 0.0], [0.0, 0.0], [0.0, 1.0]).unwrap();
        assert_eq!(t, [[0.0; 2]; 2]);
    }

    #[test]
    fn coincident_points_rejected() {
        assert!(matches!(stokeslet([1.0, 2.0], [1.0, 2.0], 1.0), Err(Error::CoincidentPoints)));
        assert!(pressure_kernel([0.0, 0.0], [0.0, 0.0]).is_err());
        assert!(traction_kernel([0.0, 0.0], [0.0, 0.0], [1.0, 0.0]).is_err());
    }

    #[test]
    fn divergence_free_and_momentum_balance() {
        let mu = 1.3;
        let h = 1e-4;
        let x = [0.4, -0.7];
        for col in 0..2 {
            let u = |p: Point| -> Point {
                let s = stokeslet_r(p, mu);
                [s[0][col], s[1][col]]
            };
            let p = |q: Point| pressure_kernel_r(q)[col];
            let dux = (u([x[0] + h, x[1]])[0] - u([x[0] - h, x[1]])[0]) / (2.0 * h);
            let duy = (u([x[0], x[1] + h])[1] - u([x[0], x[1] - h])[1]) / (2.0 * h);
            assert!((dux + duy).abs() < 1e-6);
            for i in 0..2 {
                let c = u(x)[i];
                let lap = (u([x[0] + h, x[1]])[i] + u([x[0] - h, x[1]])[i] + u([x[0], x[1] + h])[i]
                    + u([x[0], x[1] - h])[i]
                    - 4.0 * c)
                    / (h * h);
                let mut e = [0.0; 2];
                e[i] = h;
                let dp = (p([x[0] + e[0], x[1] + e[1]]) - p([x[0] - e[0], x[1] - e[1]])) / (2.0 * h);
                assert!((mu * lap - dp).abs() < 1e-5, "col {col} comp {i}: {}", mu * lap - dp);
            }
        }
    }

    #[test]
    fn gradient_kernel_matches_finite_differences() {
        let mu = 0.8;
        let r = [0.3, 0.9];
        let g = stokeslet_gradient_r(r, mu);
        let h = 1e-6;
        for k in 0..2 {
            let mut rp = r;
            let mut rm = r;
            rp[k] += h;
            rm[k] -= h;
            let (sp, sm) = (stokeslet_r(rp, mu), stokeslet_r(rm, mu));
            for i in 0..2 {
                for j in 0..2 {
                    assert!(((sp[i][j] - sm[i][j]) / (2.0 * h) - g[k][i][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn traction_kernel_is_stokeslet_stress() {
        let mu = 1.7;
        let r = [-0.4, 0.25];
        let n = [0.6, 0.8];
        let f = [0.3, -1.1];
        let g = stokeslet_gradient_r(r, mu);
        let p = pressure_kernel_r(r);
        let pf = p[0] * f[0] + p[1] * f[1];
        let grad = |i: usize, k: usize| g[k][i][0] * f[0] + g[k][i][1] * f[1];
        let t = mat_vec(&traction_kernel_r(r, n), f);
        for i in 0..2 {
            let mut s = -pf * n[i];
            for k in 0..2 {
                s += mu * (grad(i, k) + grad(k, i)) * n[k];
            }
            assert!((s - t[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn small_circle_traction_integral() {
        // ∮ T(x, y) n dS over a circle around y yields the enclosed point force.
        let y = [0.2, -0.3];
        let m = 64;
        let rad = 0.05;
        let f = [1.0, 0.0];
        let mut acc = [0.0; 2];
        for j in 0..m {
            let th = 2.0 * PI * j as f64 / m as f64;
            let n = [th.cos(), th.sin()];
            let x = [y[0] + rad * n[0], y[1] + rad * n[1]];
            let t = mat_vec(&traction_kernel(x, y, n).unwrap(), f);
            acc[0] += t[0] * rad * 2.0 * PI / m as f64;
            acc[1] += t[1] * rad * 2.0 * PI / m as f64;
        }
        assert!((acc[0] + 1.0).abs() < 1e-12 && acc[1].abs() < 1e-12);
    }
}
