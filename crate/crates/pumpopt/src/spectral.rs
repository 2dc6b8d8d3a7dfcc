//! Quadrature rules and FFT-based tools for periodic functions sampled on a
//! uniform grid `t_j = 2πj/M`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on [-1, 1], nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                let (_, d) = legendre_with_derivative(n, z);
                dp = d;
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Kress product-quadrature weights for `∫₀^{2π} log(4 sin²((t_i − τ)/2)) φ(τ) dτ`
/// on `M` equispaced nodes. Entry `d` is the weight coupling nodes with index
/// difference `(i − j) mod M = d`.
pub fn kress_weights(m: usize) -> Vec<f64> {
    assert!(m >= 2 && m % 2 == 0, "Kress weights need an even node count");
    let n = m / 2;
    let nf = n as f64;
    (0..m)
        .map(|d| {
            let tau = 2.0 * PI * d as f64 / m as f64;
            let mut s = 0.0;
            for k in 1..n {
                s += (k as f64 * tau).cos() / k as f64;
            }
            let alt = if d % 2 == 0 { 1.0 } else { -1.0 };
            -2.0 * PI / nf * s - PI / (nf * nf) * alt
        })
        .collect()
}

/// Spectral derivative d/dt of a periodic function sampled at `t_j = 2πj/M`.
pub fn periodic_derivative(values: &[f64]) -> Vec<f64> {
    let m = values.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let freq = if 2 * k < m {
            k as f64
        } else if 2 * k == m {
            0.0
        } else {
            k as f64 - m as f64
        };
        *c *= Complex64::new(0.0, freq);
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re / m as f64).collect()
}

/// Trigonometric interpolant of equispaced periodic samples, evaluable at any t.
#[derive(Clone, Debug)]
pub struct TrigInterpolant {
    cos_coeffs: Vec<f64>,
    sin_coeffs: Vec<f64>,
}

impl TrigInterpolant {
    pub fn new(values: &[f64]) -> Self {
        let m = values.len();
        assert!(m >= 2 && m % 2 == 0);
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(m);
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fwd.process(&mut buf);
        let half = m / 2;
        let mf = m as f64;
        let mut cos_coeffs = vec![0.0; half + 1];
        let mut sin_coeffs = vec![0.0; half + 1];
        cos_coeffs[0] = buf[0].re / mf;
        for k in 1..half {
            cos_coeffs[k] = 2.0 * buf[k].re / mf;
            sin_coeffs[k] = -2.0 * buf[k].im / mf;
        }
        cos_coeffs[half] = buf[half].re / mf;
        TrigInterpolant { cos_coeffs, sin_coeffs }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let (s1, c1) = t.sin_cos();
        let mut ck = 1.0;
        let mut sk = 0.0;
        let mut acc = self.cos_coeffs[0];
        for k in 1..self.cos_coeffs.len() {
            let cn = ck * c1 - sk * s1;
            sk = sk * c1 + ck * s1;
            ck = cn;
            acc += self.cos_coeffs[k] * ck + self.sin_coeffs[k] * sk;
        }
        acc
    }
}

/// Uniform periodic grid `t_j = 2πj/M`.
pub fn periodic_grid(m: usize) -> Vec<f64> {
    (0..m).map(|j| 2.0 * PI * j as f64 / m as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(7);
        for p in 0..14 {
            let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(p)).sum();
            let exact = if p % 2 == 0 { 2.0 / (p as f64 + 1.0) } else { 0.0 };
            assert!((q - exact).abs() < 1e-14, "p={p} q={q}");
        }
        let (x, w) = gauss_legendre(32);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn kress_weights_reproduce_log_integrals_of_fourier_modes() {
        let m = 32;
        let r = kress_weights(m);
        let t = periodic_grid(m);
        for mode in 0..m / 2 {
            for i in [0, 5, 17] {
                let q: f64 = (0..m)
                    .map(|j| r[(i + m - j) % m] * (mode as f64 * t[j]).cos())
                    .sum();
                let exact = if mode == 0 {
                    0.0
                } else {
                    -2.0 * PI / mode as f64 * (mode as f64 * t[i]).cos()
                };
                assert!((q - exact).abs() < 1e-12, "mode={mode} i={i}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn spectral_derivative_of_trig_polynomial() {
        let t = periodic_grid(24);
        let f: Vec<f64> = t.iter().map(|&t| (3.0 * t).sin() + 0.5 * (2.0 * t).cos()).collect();
        let d = periodic_derivative(&f);
        for (ti, di) in t.iter().zip(&d) {
            let exact = 3.0 * (3.0 * ti).cos() - (2.0 * ti).sin();
            assert!((di - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolant_matches_smooth_function_off_grid() {
        let f = |t: f64| (0.3 * t.cos()).exp() * (1.0 + 0.2 * t.sin());
        let vals: Vec<f64> = periodic_grid(64).iter().map(|&t| f(t)).collect();
        let interp = TrigInterpolant::new(&vals);
        for t in [0.013, 1.7, 3.3, 6.1, -2.0, 9.0] {
            assert!((interp.eval(t) - f(t)).abs() < 1e-13);
        }
        assert!((interp.eval(2.0 * PI * 5.0 / 64.0) - vals[5]).abs() < 1e-14);
    }
}
