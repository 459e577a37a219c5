//! Pointwise PDE residual operators on the jet graph.
//!
//! Seed directions are ordered `(t, x)` or `(t, x, y)`. Residuals read the
//! needed derivatives out of the solution jets with [`Component`] extraction,
//! so gradients with respect to network weights and PDE parameters flow
//! through them.

use crate::error::{Error, Result};
use crate::graph::{Component, Graph, VarHandle};
use crate::special::gamma;

const T: usize = 0;
const X: usize = 1;
const Y: usize = 2;

fn require_dim(g: &Graph, dim: usize, what: &str) -> Result<()> {
    if g.dim() != dim {
        return Err(Error::Arity(format!(
            "{what} needs {dim} seed directions, graph has {}",
            g.dim()
        )));
    }
    Ok(())
}

struct Derivs {
    v: VarHandle,
    t: VarHandle,
    x: VarHandle,
    xx: VarHandle,
    y: Option<VarHandle>,
    yy: Option<VarHandle>,
}

fn derivs(g: &mut Graph, u: VarHandle) -> Result<Derivs> {
    let two_d = g.dim() == 3;
    Ok(Derivs {
        v: g.extract(u, Component::Value)?,
        t: g.extract(u, Component::Grad(T))?,
        x: g.extract(u, Component::Grad(X))?,
        xx: g.extract(u, Component::Hess(X, X))?,
        y: if two_d { Some(g.extract(u, Component::Grad(Y))?) } else { None },
        yy: if two_d { Some(g.extract(u, Component::Hess(Y, Y))?) } else { None },
    })
}

/// `u_t + κ₁ u u_x − κ₂ u_xx`
pub fn residual_burgers(g: &mut Graph, u: VarHandle, kappa1: VarHandle, kappa2: VarHandle) -> Result<VarHandle> {
    require_dim(g, 2, "burgers residual")?;
    let d = derivs(g, u)?;
    let uux = g.mul(d.v, d.x)?;
    let adv = g.mul(kappa1, uux)?;
    let diff = g.mul(kappa2, d.xx)?;
    let r = g.add(d.t, adv)?;
    g.sub(r, diff)
}

/// `u_t − κ (u_xx + u_yy)`
pub fn residual_heat2d(g: &mut Graph, u: VarHandle, kappa: VarHandle) -> Result<VarHandle> {
    require_dim(g, 3, "heat residual")?;
    let d = derivs(g, u)?;
    let lap = g.add(d.xx, d.yy.expect("3 seeds"))?;
    let diff = g.mul(kappa, lap)?;
    g.sub(d.t, diff)
}

/// Momentum-x, momentum-y and divergence residuals of incompressible
/// Navier–Stokes for outputs ordered `(u, v, p)`.
pub fn residual_nse(g: &mut Graph, uvp: &[VarHandle], nu: f64) -> Result<[VarHandle; 3]> {
    require_dim(g, 3, "navier-stokes residual")?;
    if uvp.len() != 3 {
        return Err(Error::Arity(format!("navier-stokes needs (u, v, p), got {} fields", uvp.len())));
    }
    let u = derivs(g, uvp[0])?;
    let v = derivs(g, uvp[1])?;
    let px = g.extract(uvp[2], Component::Grad(X))?;
    let py = g.extract(uvp[2], Component::Grad(Y))?;
    let nu = g.constant(nu)?;

    let momentum = |g: &mut Graph, w: &Derivs, p_grad: VarHandle| -> Result<VarHandle> {
        let a = g.mul(u.v, w.x)?;
        let b = g.mul(v.v, w.y.expect("3 seeds"))?;
        let lap = g.add(w.xx, w.yy.expect("3 seeds"))?;
        let visc = g.mul(nu, lap)?;
        let s = g.sum(&[w.t, a, b, p_grad])?;
        g.sub(s, visc)
    };
    let mx = momentum(g, &u, px)?;
    let my = momentum(g, &v, py)?;
    let div = g.add(u.x, v.y.expect("3 seeds"))?;
    Ok([mx, my, div])
}

/// L1 discretization of the Caputo derivative of order `alpha` at time `t`
/// on `k_nodes` uniform sub-intervals of `[0, t]`. `u_of_t` is called once
/// per grid node in increasing `τ` and returns the graph value of `u(·, τ)`.
/// The order enters through graph operations so its gradient flows.
pub fn caputo_l1<F>(g: &mut Graph, mut u_of_t: F, t: f64, alpha: VarHandle, k_nodes: usize) -> Result<VarHandle>
where
    F: FnMut(&mut Graph, f64) -> Result<VarHandle>,
{
    if t <= 0.0 || !t.is_finite() {
        return Err(Error::Config(format!("caputo derivative needs t > 0, got {t}")));
    }
    if k_nodes == 0 {
        return Err(Error::Config("caputo derivative needs at least one sub-interval".into()));
    }
    let a = g.value(alpha)?;
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Config(format!("caputo order must lie in (0, 1), got {a}")));
    }
    let dtau = t / k_nodes as f64;
    let one = g.constant(1.0)?;
    let two = g.constant(2.0)?;
    let expo = g.sub(one, alpha)?;

    // (t - τ_k)^{1-α}, zero at the last node
    let mut powers = Vec::with_capacity(k_nodes + 1);
    for k in 0..=k_nodes {
        let base = t - k as f64 * dtau;
        if k == k_nodes || base <= 0.0 {
            powers.push(g.constant(0.0)?);
        } else {
            let b = g.constant(base)?;
            powers.push(g.pow(b, expo)?);
        }
    }
    let mut u_prev = u_of_t(g, 0.0)?;
    let mut terms = Vec::with_capacity(k_nodes);
    for k in 0..k_nodes {
        let tau_next = if k + 1 == k_nodes { t } else { (k + 1) as f64 * dtau };
        let u_next = u_of_t(g, tau_next)?;
        let du = g.sub(u_next, u_prev)?;
        let w = g.sub(powers[k], powers[k + 1])?;
        terms.push(g.mul(w, du)?);
        u_prev = u_next;
    }
    let total = g.sum(&terms)?;
    let two_minus = g.sub(two, alpha)?;
    let lg = g.lgamma(two_minus)?;
    let gam = g.exp(lg)?;
    let scaled = g.scale(total, 1.0 / dtau)?;
    g.div(scaled, gam)
}

/// Manufactured forcing `[Γ(4)/Γ(4−α) t^{3−α} + t³] sin x`.
pub fn tfmdwe_forcing(x: f64, t: f64, alpha: f64) -> f64 {
    (gamma(4.0) / gamma(4.0 - alpha) * t.powf(3.0 - alpha) + t.powi(3)) * x.sin()
}

/// `D_t^α u − u_xx − f(x, t)`. The Caputo operator uses the (possibly
/// trainable) order `alpha`; the forcing is known data built from
/// `alpha_forcing`.
#[allow(clippy::too_many_arguments)]
pub fn residual_tfmdwe<F>(
    g: &mut Graph,
    u_of_t: F,
    u_center: VarHandle,
    x: f64,
    t: f64,
    alpha: VarHandle,
    alpha_forcing: f64,
    k_nodes: usize,
) -> Result<VarHandle>
where
    F: FnMut(&mut Graph, f64) -> Result<VarHandle>,
{
    require_dim(g, 2, "tfmdwe residual")?;
    let caputo = caputo_l1(g, u_of_t, t, alpha, k_nodes)?;
    let uxx = g.extract(u_center, Component::Hess(X, X))?;
    let f = g.constant(tfmdwe_forcing(x, t, alpha_forcing))?;
    let r = g.sub(caputo, uxx)?;
    g.sub(r, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::Jet2;
    use std::f64::consts::PI;

    fn jet2(v: f64, ut: f64, ux: f64, uxx: f64) -> Jet2 {
        let mut j = Jet2::constant(2, v);
        j.grad = [ut, ux, 0.0];
        j.set_second(1, 1, uxx);
        j
    }

    #[test]
    fn burgers_examples() {
        let mut g = Graph::new(2).unwrap();
        let k1 = g.constant(1.0).unwrap();
        let k2 = g.constant(0.37).unwrap();
        let zero = g.lift_jet(Jet2::zero(2)).unwrap();
        let r = residual_burgers(&mut g, zero, k1, k2).unwrap();
        assert_eq!(g.value(r).unwrap(), 0.0);
        // u = x at x = 0.6
        let u = g.lift_jet(jet2(0.6, 0.0, 1.0, 0.0)).unwrap();
        let r = residual_burgers(&mut g, u, k1, k2).unwrap();
        assert!((g.value(r).unwrap() - 0.6).abs() < 1e-15);
        // u = e^{-t} at t = 0.3
        let e = (-0.3f64).exp();
        let u = g.lift_jet(jet2(e, -e, 0.0, 0.0)).unwrap();
        let k1 = g.constant(2.5).unwrap();
        let r = residual_burgers(&mut g, u, k1, k2).unwrap();
        assert!((g.value(r).unwrap() + e).abs() < 1e-15);

        let mut g3 = Graph::new(3).unwrap();
        let u = g3.lift_jet(Jet2::zero(3)).unwrap();
        let k = g3.constant(1.0).unwrap();
        assert!(matches!(residual_burgers(&mut g3, u, k, k), Err(Error::Arity(_))));
    }

    #[test]
    fn heat_examples() {
        let mut g = Graph::new(3).unwrap();
        let kappa = g.constant(1.0).unwrap();
        // u = x² + y²
        let mut j = Jet2::constant(3, 0.5);
        j.grad = [0.0, 1.0, 1.0];
        j.set_second(1, 1, 2.0);
        j.set_second(2, 2, 2.0);
        let u = g.lift_jet(j).unwrap();
        let r = residual_heat2d(&mut g, u, kappa).unwrap();
        assert_eq!(g.value(r).unwrap(), -4.0);
        let c = g.lift_jet(Jet2::constant(3, 3.0)).unwrap();
        let r = residual_heat2d(&mut g, c, kappa).unwrap();
        assert_eq!(g.value(r).unwrap(), 0.0);
    }

    #[test]
    fn heat_exact_solution_on_graph() {
        let nu = 0.1;
        let mut g = Graph::new(3).unwrap();
        let t = g.lift_input(0.37, 0).unwrap();
        let x = g.lift_input(0.21, 1).unwrap();
        let y = g.lift_input(0.66, 2).unwrap();
        let px = g.scale(x, PI).unwrap();
        let py = g.scale(y, PI).unwrap();
        let sx = g.sin(px).unwrap();
        let sy = g.sin(py).unwrap();
        let decay = g.scale(t, -2.0 * PI * PI * nu).unwrap();
        let e = g.exp(decay).unwrap();
        let s = g.mul(sx, sy).unwrap();
        let u = g.mul(s, e).unwrap();
        let kappa = g.constant(nu).unwrap();
        let r = residual_heat2d(&mut g, u, kappa).unwrap();
        assert!(g.value(r).unwrap().abs() < 1e-14);
    }

    #[test]
    fn nse_examples() {
        let nu = 0.01;
        let mut g = Graph::new(3).unwrap();
        let z = g.lift_jet(Jet2::zero(3)).unwrap();
        let r = residual_nse(&mut g, &[z, z, z], nu).unwrap();
        for k in r {
            assert_eq!(g.value(k).unwrap(), 0.0);
        }
        // shear flow u = y
        let mut j = Jet2::constant(3, 0.8);
        j.grad = [0.0, 0.0, 1.0];
        let u = g.lift_jet(j).unwrap();
        let r = residual_nse(&mut g, &[u, z, z], nu).unwrap();
        for k in r {
            assert_eq!(g.value(k).unwrap(), 0.0);
        }

        // Taylor-Green fields built on the graph
        let t = g.lift_input(0.4, 0).unwrap();
        let x = g.lift_input(1.3, 1).unwrap();
        let y = g.lift_input(4.1, 2).unwrap();
        let (sx, cx) = (g.sin(x).unwrap(), g.cos(x).unwrap());
        let (sy, cy) = (g.sin(y).unwrap(), g.cos(y).unwrap());
        let a = g.scale(t, -2.0 * nu).unwrap();
        let e2 = g.exp(a).unwrap();
        let b = g.scale(t, -4.0 * nu).unwrap();
        let e4 = g.exp(b).unwrap();
        let cs = g.mul(cx, sy).unwrap();
        let u0 = g.mul(cs, e2).unwrap();
        let u = g.neg(u0).unwrap();
        let sc = g.mul(sx, cy).unwrap();
        let v = g.mul(sc, e2).unwrap();
        let x2 = g.scale(x, 2.0).unwrap();
        let y2 = g.scale(y, 2.0).unwrap();
        let c2x = g.cos(x2).unwrap();
        let c2y = g.cos(y2).unwrap();
        let sum = g.add(c2x, c2y).unwrap();
        let q = g.scale(sum, -0.25).unwrap();
        let p = g.mul(q, e4).unwrap();
        let r = residual_nse(&mut g, &[u, v, p], nu).unwrap();
        for k in r {
            assert!(g.value(k).unwrap().abs() < 1e-14);
        }
    }

    fn caputo_of<F: Fn(f64) -> f64>(f: F, t: f64, alpha: f64, k: usize) -> f64 {
        let mut g = Graph::new(2).unwrap();
        let a = g.constant(alpha).unwrap();
        let r = caputo_l1(&mut g, |g, tau| g.constant(f(tau)), t, a, k).unwrap();
        g.value(r).unwrap()
    }

    #[test]
    fn caputo_constant_and_linear() {
        assert_eq!(caputo_of(|_| 2.5, 0.8, 0.5, 16), 0.0);
        let expect = 1.0 / gamma(1.5);
        for k in [1, 2, 7, 64] {
            let v = caputo_of(|t| t, 1.0, 0.5, k);
            assert!((v - expect).abs() < 1e-13, "k={k}: {v}");
        }
        assert!((expect - 1.128_379_2).abs() < 1e-7);
    }

    #[test]
    fn caputo_cubic_closed_form() {
        let x = 0.9f64;
        let exact = gamma(4.0) / gamma(3.5) * x.sin();
        let v = caputo_of(|t| t.powi(3) * x.sin(), 1.0, 0.5, 256);
        assert!(((v - exact) / exact).abs() < 1e-2);
    }

    #[test]
    fn caputo_rejects_bad_arguments() {
        let mut g = Graph::new(2).unwrap();
        let a = g.constant(0.5).unwrap();
        assert!(caputo_l1(&mut g, |g, _| g.constant(0.0), 0.0, a, 4).is_err());
        let bad = g.constant(1.0).unwrap();
        assert!(caputo_l1(&mut g, |g, _| g.constant(0.0), 1.0, bad, 4).is_err());
    }

    #[test]
    fn tfmdwe_zero_solution_gives_minus_forcing() {
        let mut g = Graph::new(2).unwrap();
        let a = g.constant(0.5).unwrap();
        let z = g.lift_jet(Jet2::zero(2)).unwrap();
        let r = residual_tfmdwe(&mut g, |g, _| g.constant(0.0), z, PI / 2.0, 1.0, a, 0.5, 32).unwrap();
        let expect = -(gamma(4.0) / gamma(3.5) + 1.0);
        assert!((g.value(r).unwrap() - expect).abs() < 1e-12);
        // x = 0: forcing vanishes
        let r = residual_tfmdwe(&mut g, |g, tau| g.constant(tau), z, 0.0, 1.0, a, 0.5, 32).unwrap();
        assert!((g.value(r).unwrap() - 1.0 / gamma(1.5)).abs() < 1e-12);
    }
}
