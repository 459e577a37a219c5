//! Closed-form solutions and the Burgers reference solution.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::special::gauss_hermite;

pub fn tfmdwe_exact(x: f64, t: f64) -> f64 {
    t.powi(3) * x.sin()
}

pub fn heat_exact(x: f64, y: f64, t: f64, kappa: f64) -> f64 {
    (PI * x).sin() * (PI * y).sin() * (-2.0 * PI * PI * kappa * t).exp()
}

/// Taylor–Green vortex `(u, v, p)`.
pub fn taylor_green(x: f64, y: f64, t: f64, nu: f64) -> [f64; 3] {
    let e2 = (-2.0 * nu * t).exp();
    let e4 = (-4.0 * nu * t).exp();
    [
        -x.cos() * y.sin() * e2,
        x.sin() * y.cos() * e2,
        -0.25 * ((2.0 * x).cos() + (2.0 * y).cos()) * e4,
    ]
}

pub const BURGERS_NODES: usize = 64;

fn cached_rule(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static R64: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static R128: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    match n {
        64 => R64.get_or_init(|| gauss_hermite(64)),
        128 => R128.get_or_init(|| gauss_hermite(128)),
        _ => panic!("no cached rule for {n} nodes"),
    }
}

/// Viscous Burgers solution for `u(x, 0) = −sin(πx)` via the Cole–Hopf
/// representation, with the heat-kernel integrals evaluated by Gauss–Hermite
/// quadrature.
pub fn reference_burgers(x: f64, t: f64, nu: f64) -> f64 {
    reference_burgers_with(x, t, nu, BURGERS_NODES)
}

pub fn reference_burgers_with(x: f64, t: f64, nu: f64, nodes: usize) -> f64 {
    if t <= 0.0 {
        return -(PI * x).sin();
    }
    let owned;
    let (z, w) = match nodes {
        64 | 128 => {
            let r = cached_rule(nodes);
            (&r.0, &r.1)
        }
        _ => {
            owned = gauss_hermite(nodes);
            (&owned.0, &owned.1)
        }
    };
    let s = (4.0 * nu * t).sqrt();
    let c = 1.0 / (2.0 * PI * nu);
    let mut num = 0.0;
    let mut den = 0.0;
    for (zi, wi) in z.iter().zip(w) {
        let arg = PI * (x - s * zi);
        // shift the exponent by its maximum so the weights stay in [e^{-2c}, 1]
        let f = (-(arg.cos() + 1.0) * c).exp();
        num += wi * arg.sin() * f;
        den += wi * f;
    }
    -num / den
}
