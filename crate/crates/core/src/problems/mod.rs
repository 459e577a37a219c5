//! The four benchmark problems: domains, samplers, pointwise losses and
//! reference solutions.

pub mod exact;
pub mod residual;

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Component, Graph, VarHandle};
use crate::mlp::{self, ChannelSet, MlpConfig, Mode, ParamLayout, ParamVector};

pub use exact::{heat_exact, reference_burgers, taylor_green, tfmdwe_exact};
pub use residual::{caputo_l1, residual_burgers, residual_heat2d, residual_nse, residual_tfmdwe, tfmdwe_forcing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemId {
    Burgers,
    Tfmdwe,
    Heat2d,
    Nse,
}

impl ProblemId {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemId::Burgers => "burgers",
            ProblemId::Tfmdwe => "tfmdwe",
            ProblemId::Heat2d => "heat2d",
            ProblemId::Nse => "nse",
        }
    }

    pub fn all() -> [ProblemId; 4] {
        [ProblemId::Burgers, ProblemId::Tfmdwe, ProblemId::Heat2d, ProblemId::Nse]
    }
}

impl std::str::FromStr for ProblemId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ProblemId::all()
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown problem '{s}'")))
    }
}

/// Loss split a collocation point belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Phy,
    Ic,
    Bc,
    Data,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Phy => "phy",
            Split::Ic => "ic",
            Split::Bc => "bc",
            Split::Data => "data",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub id: ProblemId,
    pub mode: Mode,
    /// Bounds of each spatial coordinate.
    pub space: Vec<(f64, f64)>,
    pub t_final: f64,
    /// Viscosity (Burgers, Navier–Stokes) or diffusivity (heat).
    pub nu: f64,
    /// Fractional order (TFMDWE).
    pub alpha: f64,
    pub n_ic: usize,
    pub n_bc: usize,
    pub n_f: usize,
    pub n_data: usize,
    /// Caputo quadrature sub-intervals (TFMDWE only).
    pub k_nodes: usize,
    pub net: MlpConfig,
    /// Initial values of the trainable PDE parameters (inverse mode).
    pub pde_param_init: Vec<f64>,
}

impl ProblemSpec {
    pub fn new(id: ProblemId, mode: Mode) -> Result<Self> {
        let net = |i, o, h, w| MlpConfig::new(i, o, h, w).expect("benchmark config");
        let spec = match id {
            ProblemId::Burgers => Self {
                id,
                mode,
                space: vec![(-1.0, 1.0)],
                t_final: 1.0,
                nu: 0.01 / PI,
                alpha: 0.5,
                n_ic: 100,
                n_bc: 100,
                n_f: 100,
                n_data: 100,
                k_nodes: 0,
                net: net(2, 1, 8, 20),
                pde_param_init: vec![2.0, 0.0],
            },
            ProblemId::Tfmdwe => Self {
                id,
                mode,
                space: vec![(0.0, PI)],
                t_final: 1.0,
                nu: 0.0,
                alpha: 0.5,
                n_ic: 100,
                n_bc: 100,
                n_f: 5000,
                n_data: 100,
                k_nodes: 64,
                net: net(2, 1, 3, 100),
                pde_param_init: vec![0.8],
            },
            ProblemId::Heat2d => Self {
                id,
                mode,
                space: vec![(0.0, 1.0), (0.0, 1.0)],
                t_final: 1.0,
                nu: 0.1,
                alpha: 0.5,
                n_ic: 500,
                n_bc: 500,
                n_f: 2000,
                n_data: 100,
                k_nodes: 0,
                net: net(3, 1, 6, 64),
                pde_param_init: vec![1.0],
            },
            ProblemId::Nse => Self {
                id,
                mode,
                space: vec![(0.0, 2.0 * PI), (0.0, 2.0 * PI)],
                t_final: 1.0,
                nu: 0.01,
                alpha: 0.5,
                n_ic: 500,
                n_bc: 500,
                n_f: 2000,
                n_data: 100,
                k_nodes: 0,
                net: net(3, 3, 6, 64),
                pde_param_init: vec![],
            },
        };
        let mut spec = spec;
        if mode == Mode::Forward {
            spec.pde_param_init.clear();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id == ProblemId::Nse && self.mode == Mode::Inverse {
            return Err(Error::Unsupported("navier-stokes is forward-only".into()));
        }
        let counts = [self.n_ic, self.n_bc, self.n_f];
        if counts.contains(&0) || (self.mode == Mode::Inverse && self.n_data == 0) {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.t_final <= 0.0 {
            return Err(Error::Config("time horizon must be positive".into()));
        }
        if self.space.len() + 1 != self.net.in_dim {
            return Err(Error::Config(format!(
                "network input dimension {} does not match {} space dimension(s) plus time",
                self.net.in_dim,
                self.space.len()
            )));
        }
        let out = if self.id == ProblemId::Nse { 3 } else { 1 };
        if self.net.out_dim != out {
            return Err(Error::Config(format!("{} needs {out} network output(s)", self.id.name())));
        }
        match self.id {
            ProblemId::Tfmdwe => {
                if !(self.alpha > 0.0 && self.alpha <= 1.0) {
                    return Err(Error::Config("fractional order must lie in (0, 1]".into()));
                }
                if self.k_nodes < 1 {
                    return Err(Error::Config("k_nodes must be at least 1".into()));
                }
            }
            _ => {
                if self.nu <= 0.0 {
                    return Err(Error::Config("viscosity/diffusivity must be positive".into()));
                }
            }
        }
        let want = self.num_pde_params();
        if self.pde_param_init.len() != want {
            return Err(Error::Config(format!(
                "{} {:?} mode trains {want} PDE parameter(s), got {} initial value(s)",
                self.id.name(),
                self.mode,
                self.pde_param_init.len()
            )));
        }
        self.net.validate()
    }

    pub fn space_dim(&self) -> usize {
        self.space.len()
    }

    /// Jet dimension: time plus space.
    pub fn dim(&self) -> usize {
        self.space.len() + 1
    }

    pub fn out_dim(&self) -> usize {
        self.net.out_dim
    }

    pub fn num_pde_params(&self) -> usize {
        match (self.mode, self.id) {
            (Mode::Forward, _) => 0,
            (Mode::Inverse, ProblemId::Burgers) => 2,
            (Mode::Inverse, _) => 1,
        }
    }

    pub fn pde_param_names(&self) -> Vec<&'static str> {
        match (self.mode, self.id) {
            (Mode::Forward, _) => vec![],
            (Mode::Inverse, ProblemId::Burgers) => vec!["kappa1", "kappa2"],
            (Mode::Inverse, ProblemId::Tfmdwe) => vec!["alpha"],
            (Mode::Inverse, _) => vec!["kappa"],
        }
    }

    /// Ground-truth values of the trainable PDE parameters.
    pub fn pde_param_truth(&self) -> Vec<f64> {
        match (self.mode, self.id) {
            (Mode::Forward, _) => vec![],
            (Mode::Inverse, ProblemId::Burgers) => vec![1.0, self.nu],
            (Mode::Inverse, ProblemId::Tfmdwe) => vec![self.alpha],
            (Mode::Inverse, _) => vec![self.nu],
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.net, self.num_pde_params())
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamVector> {
        self.validate()?;
        mlp::init_params(self.net, self.mode, &self.pde_param_init, seed)
    }

    /// Splits that enter the objective or constraints for this mode.
    pub fn splits(&self) -> Vec<Split> {
        match self.mode {
            Mode::Forward => vec![Split::Phy, Split::Ic, Split::Bc],
            Mode::Inverse => vec![Split::Phy, Split::Ic, Split::Bc, Split::Data],
        }
    }

    /// Channels propagated for derivative queries: first derivatives plus
    /// the spatial second derivatives the residuals use.
    pub fn jet_channels(&self) -> ChannelSet {
        let pairs = (1..self.dim()).map(|i| (i, i)).collect();
        ChannelSet::with_pairs(self.dim(), pairs)
    }

    /// Solution values at a point: exact where available, the Cole–Hopf
    /// reference for Burgers.
    pub fn solution(&self, p: &[f64; 3]) -> Vec<f64> {
        let [t, x, _] = *p;
        match self.id {
            ProblemId::Burgers => vec![reference_burgers(x, t, self.nu)],
            _ => self.exact_solution(p).expect("closed form exists"),
        }
    }

    pub fn exact_solution(&self, p: &[f64; 3]) -> Result<Vec<f64>> {
        let [t, x, y] = *p;
        match self.id {
            ProblemId::Burgers => Err(Error::Unsupported(
                "burgers has no closed form; use reference_burgers".into(),
            )),
            ProblemId::Tfmdwe => Ok(vec![tfmdwe_exact(x, t)]),
            ProblemId::Heat2d => Ok(vec![heat_exact(x, y, t, self.nu)]),
            ProblemId::Nse => Ok(taylor_green(x, y, t, self.nu)[..2].to_vec()),
        }
    }

    /// Target values imposed by the initial or boundary condition, one per
    /// constrained output channel.
    pub fn condition_target(&self, split: Split, p: &[f64; 3]) -> Vec<f64> {
        let [_, x, y] = *p;
        match (self.id, split) {
            (ProblemId::Burgers, Split::Ic) => vec![-(PI * x).sin()],
            (ProblemId::Heat2d, Split::Ic) => vec![(PI * x).sin() * (PI * y).sin()],
            (ProblemId::Nse, _) => {
                let [u, v, _] = taylor_green(x, y, p[0], self.nu);
                vec![u, v]
            }
            _ => vec![0.0],
        }
    }

    /// Network evaluations needed for one sample of `split`.
    pub fn queries(&self, split: Split, p: &[f64; 3]) -> Vec<Query> {
        match (split, self.id) {
            (Split::Phy, ProblemId::Tfmdwe) => {
                let mut q = vec![Query { point: *p, jets: true }];
                for tau in caputo_nodes(p[0], self.k_nodes) {
                    q.push(Query {
                        point: [tau, p[1], 0.0],
                        jets: false,
                    });
                }
                q
            }
            (Split::Phy, _) => vec![Query { point: *p, jets: true }],
            _ => vec![Query { point: *p, jets: false }],
        }
    }

    /// Pre-square residual terms of one sample, built from the network
    /// outputs of its [`queries`](Self::queries). `pde` holds the trainable
    /// PDE parameter nodes in inverse mode and is empty in forward mode.
    pub fn residual_terms(
        &self,
        g: &mut Graph,
        split: Split,
        p: &[f64; 3],
        data_value: Option<f64>,
        outs: &[Vec<VarHandle>],
        pde: &[VarHandle],
    ) -> Result<Vec<VarHandle>> {
        let inverse = self.mode == Mode::Inverse;
        if pde.len() != self.num_pde_params() {
            return Err(Error::Arity(format!(
                "expected {} PDE parameter handle(s), got {}",
                self.num_pde_params(),
                pde.len()
            )));
        }
        match split {
            Split::Phy => match self.id {
                ProblemId::Burgers => {
                    let (k1, k2) = if inverse {
                        (pde[0], pde[1])
                    } else {
                        (g.constant(1.0)?, g.constant(self.nu)?)
                    };
                    Ok(vec![residual_burgers(g, outs[0][0], k1, k2)?])
                }
                ProblemId::Heat2d => {
                    let k = if inverse { pde[0] } else { g.constant(self.nu)? };
                    Ok(vec![residual_heat2d(g, outs[0][0], k)?])
                }
                ProblemId::Nse => Ok(residual_nse(g, &outs[0], self.nu)?.to_vec()),
                ProblemId::Tfmdwe => {
                    let alpha = if inverse { pde[0] } else { g.constant(self.alpha)? };
                    let mut next = 1;
                    let u_of_t = |_: &mut Graph, tau: f64| -> Result<VarHandle> {
                        let h = outs
                            .get(next)
                            .ok_or_else(|| Error::Arity("missing caputo node output".into()))?[0];
                        debug_assert!((tau - caputo_nodes(p[0], self.k_nodes)[next - 1]).abs() < 1e-12);
                        next += 1;
                        Ok(h)
                    };
                    Ok(vec![residual_tfmdwe(
                        g,
                        u_of_t,
                        outs[0][0],
                        p[1],
                        p[0],
                        alpha,
                        self.alpha,
                        self.k_nodes,
                    )?])
                }
            },
            Split::Ic | Split::Bc => {
                let targets = self.condition_target(split, p);
                let mut terms = Vec::with_capacity(targets.len());
                for (c, target) in targets.into_iter().enumerate() {
                    let u = g.extract(outs[0][c], Component::Value)?;
                    let t = g.constant(target)?;
                    terms.push(g.sub(u, t)?);
                }
                Ok(terms)
            }
            Split::Data => {
                let obs = data_value.ok_or_else(|| Error::Config("data sample without observation".into()))?;
                let u = g.extract(outs[0][0], Component::Value)?;
                let t = g.constant(obs)?;
                Ok(vec![g.sub(u, t)?])
            }
        }
    }

    /// Number of residual terms per sample of `split`.
    pub fn terms_per_sample(&self, split: Split) -> usize {
        match (self.id, split) {
            (ProblemId::Nse, Split::Phy) => 3,
            (ProblemId::Nse, Split::Ic | Split::Bc) => 2,
            _ => 1,
        }
    }
}

/// Uniform Caputo grid `τ_k = k t / K`, `k = 0..=K`.
pub fn caputo_nodes(t: f64, k_nodes: usize) -> Vec<f64> {
    let dt = t / k_nodes as f64;
    (0..=k_nodes)
        .map(|k| if k == k_nodes { t } else { k as f64 * dt })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub point: [f64; 3],
    /// Whether input derivatives are needed (otherwise value only).
    pub jets: bool,
}

/// Collocation points per split, stored as `(t, x, y)` triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub phy: Vec<[f64; 3]>,
    pub ic: Vec<[f64; 3]>,
    pub bc: Vec<[f64; 3]>,
    pub data: Vec<[f64; 3]>,
    pub data_values: Vec<f64>,
}

impl SampleSet {
    pub fn points(&self, split: Split) -> &[[f64; 3]] {
        match split {
            Split::Phy => &self.phy,
            Split::Ic => &self.ic,
            Split::Bc => &self.bc,
            Split::Data => &self.data,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn open_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    loop {
        let v = rng.gen_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

/// Draws every split uniformly from its domain with a seeded RNG.
pub fn sample(spec: &ProblemSpec, seed: u64) -> Result<SampleSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = &spec.space;
    let tf = spec.t_final;
    let point = |rng: &mut ChaCha8Rng, t: f64, interior: bool| -> [f64; 3] {
        let mut p = [t, 0.0, 0.0];
        for (k, &(lo, hi)) in space.iter().enumerate() {
            p[1 + k] = if interior { open_uniform(rng, lo, hi) } else { rng.gen_range(lo..=hi) };
        }
        p
    };

    let ic = (0..spec.n_ic).map(|_| point(&mut rng, 0.0, false)).collect();
    let bc = (0..spec.n_bc)
        .map(|_| {
            let t = rng.gen_range(0.0..=tf);
            let mut p = point(&mut rng, t, false);
            // pin one spatial coordinate to a face
            let face = rng.gen_range(0..2 * space.len());
            let (k, upper) = (face / 2, face % 2 == 1);
            p[1 + k] = if upper { space[k].1 } else { space[k].0 };
            p
        })
        .collect();
    let phy = (0..spec.n_f)
        .map(|_| {
            let t = open_uniform(&mut rng, 0.0, tf);
            point(&mut rng, t, true)
        })
        .collect();
    let (data, data_values) = if spec.mode == Mode::Inverse {
        let pts: Vec<[f64; 3]> = (0..spec.n_data)
            .map(|_| {
                let t = open_uniform(&mut rng, 0.0, tf);
                point(&mut rng, t, true)
            })
            .collect();
        let vals = pts.iter().map(|p| spec.solution(p)[0]).collect();
        (pts, vals)
    } else {
        (vec![], vec![])
    };
    Ok(SampleSet {
        phy,
        ic,
        bc,
        data,
        data_values,
    })
}

/// Pointwise loss terms of one sample on a graph holding the lifted network
/// weights `net` (and PDE parameter nodes `pde` in inverse mode): squared
/// mismatches for ic/bc/data, raw residuals for phy.
pub fn pointwise_losses(
    spec: &ProblemSpec,
    g: &mut Graph,
    net: &[VarHandle],
    pde: &[VarHandle],
    p: &[f64; 3],
    split: Split,
    data_value: Option<f64>,
) -> Result<Vec<VarHandle>> {
    let layout = spec.layout();
    let mut outs = Vec::new();
    for q in spec.queries(split, p) {
        let ins = (0..spec.dim())
            .map(|i| if q.jets { g.lift_input(q.point[i], i) } else { g.constant(q.point[i]) })
            .collect::<Result<Vec<_>>>()?;
        outs.push(mlp::forward(g, &layout, net, &ins)?);
    }
    let terms = spec.residual_terms(g, split, p, data_value, &outs, pde)?;
    match split {
        Split::Phy => Ok(terms),
        _ => terms.into_iter().map(|r| g.square(r)).collect(),
    }
}
