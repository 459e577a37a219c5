//! Scalar computational graph whose node values are [`Jet2`]s.
//!
//! Input coordinates are seeded as jets, so every node carries exact first
//! and second derivatives with respect to the inputs. The reverse sweep
//! propagates jet-shaped adjoints: slot `k` of a node adjoint holds the
//! derivative of the selected output component with respect to slot `k` of
//! that node's jet. Parameter nodes carry no input derivatives, so their
//! value-slot adjoints are the parameter gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::jet::{hess_index, Jet2, MAX_DIM};
use crate::special::{digamma, ln_gamma, tetragamma, trigamma};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarHandle {
    graph: u64,
    index: u32,
}

impl VarHandle {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

/// Which component of a jet a reduction or reverse sweep refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Value,
    Grad(usize),
    Hess(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpCode {
    Input,
    Param,
    Const,
    /// Leaf holding an externally computed jet (e.g. a batched network
    /// output) whose adjoint is read back after the sweep.
    JetLeaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Tanh,
    Sin,
    Cos,
    Exp,
    Ln,
    PowConst(f64),
    PowVar,
    Lgamma,
    /// Projects one component of the parent jet into the value slot of a
    /// new node. The result carries no input derivatives of its own.
    Extract(Component),
}

#[derive(Clone, Debug)]
struct Node {
    op: OpCode,
    parents: [u32; 2],
    jet: Jet2,
    /// First three derivatives of a unary primitive at the parent value.
    partials: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Graph {
    id: u64,
    dim: usize,
    nodes: Vec<Node>,
    params: Vec<u32>,
}

impl Graph {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::BadDimension(dim));
        }
        Ok(Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            dim,
            nodes: Vec::new(),
            params: Vec::new(),
        })
    }

    /// Drops all nodes. Handles issued before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.id = NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_handles(&self) -> Vec<VarHandle> {
        self.params.iter().map(|&i| self.handle(i as usize)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn handle(&self, index: usize) -> VarHandle {
        VarHandle {
            graph: self.id,
            index: index as u32,
        }
    }

    fn check(&self, h: VarHandle) -> Result<usize> {
        if h.graph != self.id || h.index() >= self.nodes.len() {
            return Err(Error::ForeignHandle);
        }
        Ok(h.index())
    }

    pub fn jet(&self, h: VarHandle) -> Result<&Jet2> {
        let i = self.check(h)?;
        Ok(&self.nodes[i].jet)
    }

    pub fn value(&self, h: VarHandle) -> Result<f64> {
        Ok(self.jet(h)?.value)
    }

    pub fn op(&self, h: VarHandle) -> Result<OpCode> {
        let i = self.check(h)?;
        Ok(self.nodes[i].op)
    }

    fn push(&mut self, op: OpCode, parents: [u32; 2], jet: Jet2, partials: [f64; 3]) -> Result<VarHandle> {
        let index = self.nodes.len();
        if !jet.is_finite() || partials.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op, node: index });
        }
        self.nodes.push(Node {
            op,
            parents,
            jet,
            partials,
        });
        Ok(self.handle(index))
    }

    pub fn lift_input(&mut self, value: f64, seed_index: usize) -> Result<VarHandle> {
        if seed_index >= self.dim {
            return Err(Error::SeedOutOfRange {
                index: seed_index,
                dim: self.dim,
            });
        }
        self.push(OpCode::Input, [0; 2], Jet2::seed(self.dim, value, seed_index), [0.0; 3])
    }

    pub fn lift_param(&mut self, value: f64) -> Result<VarHandle> {
        let h = self.push(OpCode::Param, [0; 2], Jet2::constant(self.dim, value), [0.0; 3])?;
        self.params.push(h.index);
        Ok(h)
    }

    pub fn lift_params(&mut self, values: &[f64]) -> Result<Vec<VarHandle>> {
        values.iter().map(|&v| self.lift_param(v)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Result<VarHandle> {
        self.push(OpCode::Const, [0; 2], Jet2::constant(self.dim, value), [0.0; 3])
    }

    pub fn lift_jet(&mut self, jet: Jet2) -> Result<VarHandle> {
        if jet.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "jet of dimension {} lifted onto graph of dimension {}",
                jet.dim(),
                self.dim
            )));
        }
        self.push(OpCode::JetLeaf, [0; 2], jet, [0.0; 3])
    }

    fn domain(&self, op: OpCode, detail: String) -> Error {
        Error::Domain {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    /// Applies a primitive. Unary opcodes take one argument, binary two.
    pub fn apply(&mut self, op: OpCode, args: &[VarHandle]) -> Result<VarHandle> {
        let arity = match op {
            OpCode::Add | OpCode::Sub | OpCode::Mul | OpCode::Div | OpCode::PowVar => 2,
            OpCode::Input | OpCode::Param | OpCode::Const | OpCode::JetLeaf => {
                return Err(Error::Arity(format!("{op:?} is a leaf, use the lift_* constructors")))
            }
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Arity(format!("{op:?} takes {arity} argument(s), got {}", args.len())));
        }
        let a = self.check(args[0])?;
        let ja = self.nodes[a].jet;
        if arity == 2 {
            let b = self.check(args[1])?;
            let jb = self.nodes[b].jet;
            let parents = [a as u32, b as u32];
            let jet = match op {
                OpCode::Add => ja.add(&jb),
                OpCode::Sub => ja.sub(&jb),
                OpCode::Mul => ja.mul(&jb),
                OpCode::Div => {
                    if jb.value == 0.0 {
                        return Err(self.domain(op, "division by zero".into()));
                    }
                    let (r, _) = recip_parts(&jb);
                    ja.mul(&r)
                }
                OpCode::PowVar => {
                    if ja.value <= 0.0 {
                        return Err(self.domain(op, format!("base {} must be positive", ja.value)));
                    }
                    pow_var_parts(&ja, &jb).exp
                }
                _ => unreachable!(),
            };
            return self.push(op, parents, jet, [0.0; 3]);
        }

        let x = ja.value;
        let parts: [f64; 4] = match op {
            OpCode::Neg => [-x, -1.0, 0.0, 0.0],
            OpCode::Tanh => {
                let s = x.tanh();
                let s1 = 1.0 - s * s;
                let s2 = -2.0 * s * s1;
                let s3 = -2.0 * (s1 * s1 + s * s2);
                [s, s1, s2, s3]
            }
            OpCode::Sin => {
                let (s, c) = x.sin_cos();
                [s, c, -s, -c]
            }
            OpCode::Cos => {
                let (s, c) = x.sin_cos();
                [c, -s, -c, s]
            }
            OpCode::Exp => {
                let e = x.exp();
                [e, e, e, e]
            }
            OpCode::Ln => {
                if x <= 0.0 {
                    return Err(self.domain(op, format!("ln of nonpositive value {x}")));
                }
                [x.ln(), 1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x)]
            }
            OpCode::PowConst(c) => {
                if x < 0.0 && c.fract() != 0.0 {
                    return Err(self.domain(op, format!("{x}^{c} is undefined")));
                }
                if x == 0.0 && c < 0.0 {
                    return Err(self.domain(op, format!("0^{c} is undefined")));
                }
                pow_const_parts(x, c)
            }
            OpCode::Lgamma => {
                if x <= 0.0 {
                    return Err(self.domain(op, format!("lgamma of nonpositive value {x}")));
                }
                [ln_gamma(x), digamma(x), trigamma(x), tetragamma(x)]
            }
            OpCode::Extract(c) => {
                let v = component_of(&ja, c, self.dim)?;
                return self.push(op, [a as u32, 0], Jet2::constant(self.dim, v), [0.0; 3]);
            }
            _ => unreachable!(),
        };
        let jet = ja.compose(parts[0], parts[1], parts[2]);
        self.push(op, [a as u32, 0], jet, [parts[1], parts[2], parts[3]])
    }

    pub fn add(&mut self, a: VarHandle, b: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Add, &[a, b])
    }
    pub fn sub(&mut self, a: VarHandle, b: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: VarHandle, b: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Mul, &[a, b])
    }
    pub fn div(&mut self, a: VarHandle, b: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Div, &[a, b])
    }
    pub fn neg(&mut self, a: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Neg, &[a])
    }
    pub fn tanh(&mut self, a: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Tanh, &[a])
    }
    pub fn sin(&mut self, a: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Sin, &[a])
    }
    pub fn cos(&mut self, a: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Cos, &[a])
    }
    pub fn exp(&mut self, a: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Exp, &[a])
    }
    pub fn ln(&mut self, a: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Ln, &[a])
    }
    pub fn powf(&mut self, a: VarHandle, c: f64) -> Result<VarHandle> {
        self.apply(OpCode::PowConst(c), &[a])
    }
    pub fn pow(&mut self, base: VarHandle, exponent: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::PowVar, &[base, exponent])
    }
    pub fn lgamma(&mut self, a: VarHandle) -> Result<VarHandle> {
        self.apply(OpCode::Lgamma, &[a])
    }
    pub fn extract(&mut self, a: VarHandle, c: Component) -> Result<VarHandle> {
        self.apply(OpCode::Extract(c), &[a])
    }
    pub fn square(&mut self, a: VarHandle) -> Result<VarHandle> {
        self.mul(a, a)
    }

    /// Left-to-right sum; a single term is returned unchanged.
    pub fn sum(&mut self, terms: &[VarHandle]) -> Result<VarHandle> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Arity("sum of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn scale(&mut self, a: VarHandle, c: f64) -> Result<VarHandle> {
        let k = self.constant(c)?;
        self.mul(k, a)
    }

    /// Jet-valued reverse sweep from `output`, seeding the adjoint at the
    /// selected component. Returns the adjoint of every node.
    pub fn adjoints(&self, output: VarHandle, which: Component) -> Result<Vec<Jet2>> {
        let out = self.check(output)?;
        let d = self.dim;
        let mut adj = vec![Jet2::zero(d); out + 1];
        match which {
            Component::Value => adj[out].value = 1.0,
            Component::Grad(i) => {
                if i >= d {
                    return Err(Error::SeedOutOfRange { index: i, dim: d });
                }
                adj[out].grad[i] = 1.0
            }
            Component::Hess(i, j) => {
                if i >= d || j >= d {
                    return Err(Error::SeedOutOfRange { index: i.max(j), dim: d });
                }
                adj[out].hess[hess_index(d, i, j)] = 1.0
            }
        }
        for k in (0..=out).rev() {
            let ybar = adj[k];
            if ybar.is_zero() {
                continue;
            }
            let node = &self.nodes[k];
            let [pa, pb] = node.parents;
            let (pa, pb) = (pa as usize, pb as usize);
            match node.op {
                OpCode::Input | OpCode::Param | OpCode::Const | OpCode::JetLeaf => {}
                OpCode::Add => {
                    adj[pa].axpy(1.0, &ybar);
                    adj[pb].axpy(1.0, &ybar);
                }
                OpCode::Sub => {
                    adj[pa].axpy(1.0, &ybar);
                    adj[pb].axpy(-1.0, &ybar);
                }
                OpCode::Mul => {
                    let ja = self.nodes[pa].jet;
                    let jb = self.nodes[pb].jet;
                    let da = Jet2::mul_adjoint(&jb, &ybar);
                    let db = Jet2::mul_adjoint(&ja, &ybar);
                    adj[pa].axpy(1.0, &da);
                    adj[pb].axpy(1.0, &db);
                }
                OpCode::Div => {
                    let ja = self.nodes[pa].jet;
                    let jb = self.nodes[pb].jet;
                    let (r, p) = recip_parts(&jb);
                    let da = Jet2::mul_adjoint(&r, &ybar);
                    let rbar = Jet2::mul_adjoint(&ja, &ybar);
                    let db = jb.compose_adjoint(p[0], p[1], p[2], &rbar);
                    adj[pa].axpy(1.0, &da);
                    adj[pb].axpy(1.0, &db);
                }
                OpCode::PowVar => {
                    let ja = self.nodes[pa].jet;
                    let jb = self.nodes[pb].jet;
                    let parts = pow_var_parts(&ja, &jb);
                    // y = exp(p), p = b * l, l = ln(a)
                    let e = parts.exp.value;
                    let pbar = parts.prod.compose_adjoint(e, e, e, &ybar);
                    let db = Jet2::mul_adjoint(&parts.log, &pbar);
                    let lbar = Jet2::mul_adjoint(&jb, &pbar);
                    let x = ja.value;
                    let da = ja.compose_adjoint(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x), &lbar);
                    adj[pa].axpy(1.0, &da);
                    adj[pb].axpy(1.0, &db);
                }
                OpCode::Extract(c) => {
                    let slot = ybar.value;
                    match c {
                        Component::Value => adj[pa].value += slot,
                        Component::Grad(i) => adj[pa].grad[i] += slot,
                        Component::Hess(i, j) => adj[pa].hess[hess_index(d, i, j)] += slot,
                    }
                }
                _ => {
                    let [f1, f2, f3] = node.partials;
                    let xa = self.nodes[pa].jet;
                    let da = xa.compose_adjoint(f1, f2, f3, &ybar);
                    adj[pa].axpy(1.0, &da);
                }
            }
        }
        Ok(adj)
    }

    /// Gradient of the selected component of `output` with respect to every
    /// parameter node, in lift order.
    pub fn backward(&self, output: VarHandle, which: Component) -> Result<Vec<f64>> {
        let adj = self.adjoints(output, which)?;
        Ok(self
            .params
            .iter()
            .map(|&p| adj.get(p as usize).map_or(0.0, |a| a.value))
            .collect())
    }
}

fn component_of(j: &Jet2, c: Component, dim: usize) -> Result<f64> {
    match c {
        Component::Value => Ok(j.value),
        Component::Grad(i) if i < dim => Ok(j.grad[i]),
        Component::Hess(i, k) if i < dim && k < dim => Ok(j.second(i, k)),
        Component::Grad(i) => Err(Error::SeedOutOfRange { index: i, dim }),
        Component::Hess(i, k) => Err(Error::SeedOutOfRange { index: i.max(k), dim }),
    }
}

fn recip_parts(b: &Jet2) -> (Jet2, [f64; 3]) {
    let x = b.value;
    let r = 1.0 / x;
    let p = [-r * r, 2.0 * r * r * r, -6.0 * r * r * r * r];
    (b.compose(r, p[0], p[1]), p)
}

fn pow_const_parts(x: f64, c: f64) -> [f64; 4] {
    let term = |coef: f64, e: f64| {
        if coef == 0.0 {
            0.0
        } else if c.fract() == 0.0 && e.fract() == 0.0 && e.abs() < i32::MAX as f64 {
            coef * x.powi(e as i32)
        } else {
            coef * x.powf(e)
        }
    };
    [
        term(1.0, c),
        term(c, c - 1.0),
        term(c * (c - 1.0), c - 2.0),
        term(c * (c - 1.0) * (c - 2.0), c - 3.0),
    ]
}

struct PowVarParts {
    log: Jet2,
    prod: Jet2,
    exp: Jet2,
}

fn pow_var_parts(a: &Jet2, b: &Jet2) -> PowVarParts {
    let x = a.value;
    let log = a.compose(x.ln(), 1.0 / x, -1.0 / (x * x));
    let prod = b.mul(&log);
    let e = prod.value.exp();
    let exp = prod.compose(e, e, e);
    PowVarParts { log, prod, exp }
}

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    /// Largest relative deviation over components whose magnitude exceeds
    /// `floor`.
    pub max_rel_err: f64,
    pub floor: f64,
    pub failures: Vec<String>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_err < tol
    }
}

/// Central-difference order used by [`gradcheck_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// (f(x+h) - f(x-h)) / 2h
    Central2,
    /// Fourth-order five-point central stencil.
    Central4,
}

/// Compares reverse-mode gradients of `f` against central finite
/// differences at `point`. `f` receives a fresh graph with the point's
/// coordinates lifted as parameters and returns the output node and the
/// component to differentiate.
pub fn gradcheck<F>(dim: usize, f: F, point: &[f64], fd_step: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[VarHandle]) -> Result<(VarHandle, Component)>,
{
    gradcheck_with(dim, f, point, fd_step, Stencil::Central2, 1e-8)
}

pub fn gradcheck_with<F>(
    dim: usize,
    f: F,
    point: &[f64],
    fd_step: f64,
    stencil: Stencil,
    floor: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[VarHandle]) -> Result<(VarHandle, Component)>,
{
    if fd_step <= 0.0 {
        return Err(Error::Config("fd_step must be positive".into()));
    }
    let eval = |p: &[f64]| -> Result<f64> {
        let mut g = Graph::new(dim)?;
        let hs = g.lift_params(p)?;
        let (out, c) = f(&mut g, &hs)?;
        component_of(g.jet(out)?, c, dim)
    };
    let mut g = Graph::new(dim)?;
    let hs = g.lift_params(point)?;
    let (out, c) = f(&mut g, &hs)?;
    let analytic = g.backward(out, c)?;

    let mut entries = Vec::with_capacity(point.len());
    let mut failures = Vec::new();
    let mut max_rel_err = 0.0f64;
    let mut p = point.to_vec();
    for i in 0..point.len() {
        let x0 = point[i];
        let mut at = |dx: f64| -> Result<f64> {
            p[i] = x0 + dx;
            let v = eval(&p);
            p[i] = x0;
            v
        };
        let numeric = match stencil {
            Stencil::Central2 => (at(fd_step)? - at(-fd_step)?) / (2.0 * fd_step),
            Stencil::Central4 => {
                let h = fd_step;
                (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h)
            }
        };
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let rel_err = if scale > 0.0 { (a - numeric).abs() / scale } else { 0.0 };
        if !numeric.is_finite() {
            failures.push(format!("param {i}: non-finite finite difference"));
        }
        if a.abs() > floor {
            max_rel_err = max_rel_err.max(rel_err);
        }
        entries.push(GradcheckEntry {
            index: i,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(GradcheckReport {
        entries,
        max_rel_err,
        floor,
        failures,
    })
}
