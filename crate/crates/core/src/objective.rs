//! Objective/constraint assembly: aggregates pointwise losses into `(f, h)`
//! with exact gradients and the constraint Jacobian.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Component, Graph, VarHandle};
use crate::jet::Jet2;
use crate::mlp::{forward_batch, ChannelSet, Mode, ParamVector};
use crate::problems::{pointwise_losses, ProblemSpec, SampleSet, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub f: f64,
    pub h: Vec<f64>,
    pub grad_f: Vec<f64>,
    pub jac_h: Vec<Vec<f64>>,
    pub component_losses: BTreeMap<String, f64>,
}

impl LossBundle {
    pub fn m(&self) -> usize {
        self.h.len()
    }

    pub fn n(&self) -> usize {
        self.grad_f.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Worker threads; 0 and 1 both mean inline evaluation.
    pub workers: usize,
    /// Treat every loss as a constraint with `f ≡ 0`.
    pub all_constraints: bool,
}

/// Which split plays the objective and which the constraints.
pub fn roles(spec: &ProblemSpec, all_constraints: bool) -> (Option<Split>, Vec<Split>) {
    match (spec.mode, all_constraints) {
        (Mode::Forward, false) => (Some(Split::Phy), vec![Split::Ic, Split::Bc]),
        (Mode::Inverse, false) => (Some(Split::Data), vec![Split::Phy, Split::Ic, Split::Bc]),
        (Mode::Forward, true) => (None, vec![Split::Phy, Split::Ic, Split::Bc]),
        (Mode::Inverse, true) => (None, vec![Split::Data, Split::Phy, Split::Ic, Split::Bc]),
    }
}

/// One aggregated loss with its gradient and per-sample residual vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub residuals: Vec<Vec<f64>>,
}

struct ChunkOut {
    loss: f64,
    grad: Vec<f64>,
    residuals: Vec<Vec<f64>>,
}

/// Samples per chunk; fixed so the reduction order never depends on the
/// worker count.
fn chunk_len(queries_per_sample: usize) -> usize {
    (512 / queries_per_sample.max(1)).max(1)
}

#[allow(clippy::too_many_arguments)]
fn eval_chunk(
    spec: &ProblemSpec,
    params: &ParamVector,
    split: Split,
    points: &[[f64; 3]],
    data: &[f64],
    scale: f64,
    with_grad: bool,
) -> Result<ChunkOut> {
    let layout = &params.layout;
    let out_dim = spec.out_dim();
    let dim = spec.dim();

    // (is_jet, index into the matching batch) per query, per sample
    let mut jet_pts = Vec::new();
    let mut val_pts = Vec::new();
    let mut plan = Vec::with_capacity(points.len());
    for p in points {
        let qs = spec.queries(split, p);
        let mut idx = Vec::with_capacity(qs.len());
        for q in qs {
            if q.jets {
                idx.push((true, jet_pts.len()));
                jet_pts.push(q.point);
            } else {
                idx.push((false, val_pts.len()));
                val_pts.push(q.point);
            }
        }
        plan.push(idx);
    }
    let net = params.net();
    let jet_tape = (!jet_pts.is_empty()).then(|| forward_batch(layout, net, &jet_pts, &spec.jet_channels()));
    let val_tape = (!val_pts.is_empty()).then(|| forward_batch(layout, net, &val_pts, &ChannelSet::value_only(dim)));

    let mut jet_adj = vec![Jet2::zero(dim); jet_pts.len() * out_dim];
    let mut val_adj = vec![Jet2::zero(dim); val_pts.len() * out_dim];
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut residuals = Vec::with_capacity(points.len());
    let mut g = Graph::new(dim)?;

    for (s, p) in points.iter().enumerate() {
        g.clear();
        let pde = g.lift_params(params.pde())?;
        let mut leaves: Vec<Vec<VarHandle>> = Vec::with_capacity(plan[s].len());
        for &(is_jet, i) in &plan[s] {
            let tape = if is_jet { &jet_tape } else { &val_tape };
            let tape = tape.as_ref().expect("tape for planned query");
            let outs = (0..out_dim)
                .map(|o| g.lift_jet(tape.output_jet(i, o)))
                .collect::<Result<Vec<_>>>()?;
            leaves.push(outs);
        }
        let obs = if split == Split::Data { Some(data[s]) } else { None };
        let terms = spec.residual_terms(&mut g, split, p, obs, &leaves, &pde)?;
        residuals.push(terms.iter().map(|&r| g.value(r)).collect::<Result<Vec<_>>>()?);
        let squares = terms.iter().map(|&r| g.square(r)).collect::<Result<Vec<_>>>()?;
        let total = g.sum(&squares)?;
        loss += g.value(total)?;
        if !with_grad {
            continue;
        }
        let adj = g.adjoints(total, Component::Value)?;
        for (k, &h) in pde.iter().enumerate() {
            grad[layout.num_net + k] += scale * adj[h.index()].value;
        }
        for (q, &(is_jet, i)) in plan[s].iter().enumerate() {
            let target = if is_jet { &mut jet_adj } else { &mut val_adj };
            for o in 0..out_dim {
                target[i * out_dim + o].axpy(scale, &adj[leaves[q][o].index()]);
            }
        }
    }
    if with_grad {
        let net_grad = &mut grad[..layout.num_net];
        if let Some(t) = &jet_tape {
            t.backward(layout, net, &jet_adj, net_grad);
        }
        if let Some(t) = &val_tape {
            t.backward(layout, net, &val_adj, net_grad);
        }
    }
    Ok(ChunkOut { loss, grad, residuals })
}

/// Mean of squared residual terms over one split, with its gradient when
/// `with_grad` is set (otherwise `grad` is all zeros).
pub fn evaluate_split(
    spec: &ProblemSpec,
    params: &ParamVector,
    samples: &SampleSet,
    split: Split,
    workers: usize,
    with_grad: bool,
) -> Result<SplitEval> {
    let points = samples.points(split);
    if points.is_empty() {
        return Err(Error::Config(format!("no samples for split '{}'", split.name())));
    }
    if split == Split::Data && samples.data_values.len() != points.len() {
        return Err(Error::Config("data values do not match data points".into()));
    }
    let per_sample = spec.queries(split, &points[0]).len();
    let clen = chunk_len(per_sample);
    let scale = 1.0 / (points.len() * spec.terms_per_sample(split)) as f64;
    let starts: Vec<usize> = (0..points.len()).step_by(clen).collect();
    let run = |c: usize| {
        let lo = starts[c];
        let hi = (lo + clen).min(points.len());
        let data = if split == Split::Data { &samples.data_values[lo..hi] } else { &[][..] };
        eval_chunk(spec, params, split, &points[lo..hi], data, scale, with_grad)
    };

    let workers = workers.clamp(1, starts.len());
    let outs: Vec<Result<ChunkOut>> = if workers == 1 {
        (0..starts.len()).map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<ChunkOut>>> = (0..starts.len()).map(|_| None).collect();
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    let n = starts.len();
                    sc.spawn(move || (w..n).step_by(workers).map(|c| (c, run(c))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (c, r) in h.join().expect("evaluation worker panicked") {
                    slots[c] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
    };

    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    let mut residuals = Vec::with_capacity(points.len());
    for out in outs {
        let out = out?;
        loss += out.loss;
        for (a, b) in grad.iter_mut().zip(&out.grad) {
            *a += b;
        }
        residuals.extend(out.residuals);
    }
    Ok(SplitEval {
        loss: loss * scale,
        grad,
        residuals,
    })
}

pub fn evaluate(spec: &ProblemSpec, params: &ParamVector, samples: &SampleSet) -> Result<LossBundle> {
    evaluate_with(spec, params, samples, EvalOptions::default())
}

pub fn evaluate_with(spec: &ProblemSpec, params: &ParamVector, samples: &SampleSet, opts: EvalOptions) -> Result<LossBundle> {
    check_layout(spec, params)?;
    let (obj, cons) = roles(spec, opts.all_constraints);
    let mut evals = BTreeMap::new();
    for split in spec.splits() {
        evals.insert(split, evaluate_split(spec, params, samples, split, opts.workers, true)?);
    }
    let component_losses = evals.iter().map(|(s, e)| (s.name().to_string(), e.loss)).collect();
    let (f, grad_f) = match obj {
        Some(s) => (evals[&s].loss, evals[&s].grad.clone()),
        None => (0.0, vec![0.0; params.len()]),
    };
    Ok(LossBundle {
        f,
        h: cons.iter().map(|s| evals[s].loss).collect(),
        grad_f,
        jac_h: cons.iter().map(|s| evals[s].grad.clone()).collect(),
        component_losses,
    })
}

fn check_layout(spec: &ProblemSpec, params: &ParamVector) -> Result<()> {
    if params.layout != spec.layout() || params.values.len() != params.layout.len() {
        return Err(Error::Dimension(format!(
            "parameter vector of length {} does not fit the {} layout",
            params.values.len(),
            spec.id.name()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftWeights {
    pub phy: f64,
    pub ic: f64,
    pub bc: f64,
    pub data: f64,
}

impl Default for SoftWeights {
    fn default() -> Self {
        Self {
            phy: 1.0,
            ic: 1.0,
            bc: 1.0,
            data: 1.0,
        }
    }
}

impl SoftWeights {
    pub fn get(&self, split: Split) -> f64 {
        match split {
            Split::Phy => self.phy,
            Split::Ic => self.ic,
            Split::Bc => self.bc,
            Split::Data => self.data,
        }
    }
}

/// Weighted sum of the component losses and its gradient.
pub fn soft_objective(
    spec: &ProblemSpec,
    params: &ParamVector,
    samples: &SampleSet,
    weights: &SoftWeights,
    workers: usize,
) -> Result<(f64, Vec<f64>)> {
    check_layout(spec, params)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; params.len()];
    for split in spec.splits() {
        let w = weights.get(split);
        if !(w >= 0.0) {
            return Err(Error::Config(format!("negative weight for {}", split.name())));
        }
        if w == 0.0 {
            continue;
        }
        let e = evaluate_split(spec, params, samples, split, workers, true)?;
        value += w * e.loss;
        for (a, b) in grad.iter_mut().zip(&e.grad) {
            *a += w * b;
        }
    }
    Ok((value, grad))
}

/// Component losses recomputed through the scalar graph path. Slow, but
/// shares no code with the batched evaluator, so it serves as an oracle.
pub fn reference_losses(spec: &ProblemSpec, values: &[f64], samples: &SampleSet) -> Result<BTreeMap<Split, f64>> {
    let layout = spec.layout();
    let mut out = BTreeMap::new();
    let mut g = Graph::new(spec.dim())?;
    for split in spec.splits() {
        let points = samples.points(split);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (s, p) in points.iter().enumerate() {
            g.clear();
            let net = g.lift_params(&values[..layout.num_net])?;
            let pde = g.lift_params(&values[layout.num_net..])?;
            let obs = samples.data_values.get(s).copied();
            let terms = pointwise_losses(spec, &mut g, &net, &pde, p, split, obs)?;
            for t in terms {
                let v = g.value(t)?;
                sum += if split == Split::Phy { v * v } else { v };
                count += 1;
            }
        }
        out.insert(split, sum / count as f64);
    }
    Ok(out)
}

/// Outcome of comparing `grad_f` and every `jac_h` row with finite
/// differences of [`reference_losses`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub rows: usize,
    /// Components above the magnitude floor that were compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Fourth-order central differences with step `1e-3`; components whose
/// magnitude stays below `1e-8` on both sides are skipped.
pub fn fd_check(spec: &ProblemSpec, params: &ParamVector, samples: &SampleSet, tol: f64) -> Result<FdReport> {
    let b = evaluate(spec, params, samples)?;
    let (obj, cons) = roles(spec, false);
    let obj = obj.expect("objective split in the standard formulation");
    let mut rows = vec![(obj, &b.grad_f)];
    rows.extend(cons.iter().copied().zip(b.jac_h.iter()));
    let step = 1e-3;
    let mut rep = FdReport {
        rows: rows.len(),
        checked: 0,
        max_rel_err: 0.0,
        failures: vec![],
    };
    for k in 0..params.len() {
        let at = |d: f64| {
            let mut v = params.values.clone();
            v[k] += d * step;
            reference_losses(spec, &v, samples)
        };
        let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
        for (split, row) in &rows {
            let fd = (8.0 * (p1[split] - m1[split]) - (p2[split] - m2[split])) / (12.0 * step);
            let an = row[k];
            let scale = an.abs().max(fd.abs());
            if scale <= 1e-8 {
                continue;
            }
            rep.checked += 1;
            let rel = (an - fd).abs() / scale;
            rep.max_rel_err = rep.max_rel_err.max(rel);
            if !(rel < tol) {
                rep.failures.push(format!("{} param {k}: analytic {an:e} vs fd {fd:e}", split.name()));
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{MlpConfig, ParamVector};
    use crate::problems::{heat_exact, sample, ProblemId};

    fn small(id: ProblemId, mode: Mode) -> (ProblemSpec, ParamVector, SampleSet) {
        let mut spec = ProblemSpec::new(id, mode).unwrap();
        spec.net = MlpConfig::new(spec.dim(), spec.out_dim(), 2, 8).unwrap();
        spec.n_ic = 4;
        spec.n_bc = 4;
        spec.n_f = 4;
        spec.n_data = 4;
        spec.k_nodes = 8;
        let params = spec.init_params(7).unwrap();
        let samples = sample(&spec, 11).unwrap();
        (spec, params, samples)
    }

    #[test]
    fn bundle_shapes() {
        for id in ProblemId::all() {
            let (spec, p, s) = small(id, Mode::Forward);
            let b = evaluate(&spec, &p, &s).unwrap();
            assert_eq!(b.m(), 2);
            assert_eq!(b.n(), p.len());
            assert!(b.h.iter().all(|&h| h >= 0.0));
            if id != ProblemId::Nse {
                let (spec, p, s) = small(id, Mode::Inverse);
                let b = evaluate(&spec, &p, &s).unwrap();
                assert_eq!(b.m(), 3);
                assert_eq!(b.component_losses.len(), 4);
            }
        }
    }

    #[test]
    fn batched_values_match_graph_path() {
        for id in ProblemId::all() {
            for mode in [Mode::Forward, Mode::Inverse] {
                if id == ProblemId::Nse && mode == Mode::Inverse {
                    continue;
                }
                let (spec, p, s) = small(id, mode);
                let b = evaluate(&spec, &p, &s).unwrap();
                let r = reference_losses(&spec, &p.values, &s).unwrap();
                for (split, v) in r {
                    let got = b.component_losses[split.name()];
                    assert!((got - v).abs() <= 1e-12 * v.abs().max(1.0), "{id:?} {split:?}: {got} vs {v}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for id in ProblemId::all() {
            for mode in [Mode::Forward, Mode::Inverse] {
                if id == ProblemId::Nse && mode == Mode::Inverse {
                    continue;
                }
                let (spec, p, s) = small(id, mode);
                let rep = fd_check(&spec, &p, &s, 1e-5).unwrap();
                assert!(rep.passed(), "{id:?} {mode:?}: {:?}", rep.failures);
                assert!(rep.checked > p.len());
            }
        }
    }

    #[test]
    fn workers_do_not_change_bits() {
        let (mut spec, _, _) = small(ProblemId::Heat2d, Mode::Inverse);
        spec.n_f = 1500;
        let p = spec.init_params(1).unwrap();
        let s = sample(&spec, 2).unwrap();
        let a = evaluate(&spec, &p, &s).unwrap();
        let b = evaluate_with(&spec, &p, &s, EvalOptions { workers: 3, all_constraints: false }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_network_heat_ic_is_quarter() {
        let spec = ProblemSpec::new(ProblemId::Heat2d, Mode::Forward).unwrap();
        let mut p = spec.init_params(0).unwrap();
        p.values.iter_mut().for_each(|v| *v = 0.0);
        let s = sample(&spec, 0).unwrap();
        let b = evaluate(&spec, &p, &s).unwrap();
        // sin² sin² has mean 1/4 and standard deviation ≈ 0.23 over the square
        assert!((b.h[0] - 0.25).abs() < 3.0 * 0.23 / (500f64).sqrt(), "{}", b.h[0]);
        let direct: f64 = s
            .ic
            .iter()
            .map(|p| heat_exact(p[1], p[2], 0.0, 0.1).powi(2))
            .sum::<f64>()
            / 500.0;
        assert!((b.h[0] - direct).abs() < 1e-14);
    }

    #[test]
    fn soft_objective_sums_components() {
        let (spec, p, s) = small(ProblemId::Burgers, Mode::Forward);
        let b = evaluate(&spec, &p, &s).unwrap();
        let (v, g) = soft_objective(&spec, &p, &s, &SoftWeights::default(), 1).unwrap();
        let total: f64 = b.component_losses.values().sum();
        assert!((v - total).abs() < 1e-14);
        for k in 0..g.len() {
            let want = b.grad_f[k] + b.jac_h[0][k] + b.jac_h[1][k];
            assert!((g[k] - want).abs() < 1e-14);
        }
        let phy_only = SoftWeights { phy: 1.0, ic: 0.0, bc: 0.0, data: 0.0 };
        let (v, _) = soft_objective(&spec, &p, &s, &phy_only, 1).unwrap();
        assert_eq!(v, b.f);
    }

    #[test]
    fn all_constraints_flag() {
        let (spec, p, s) = small(ProblemId::Burgers, Mode::Inverse);
        let b = evaluate_with(&spec, &p, &s, EvalOptions { workers: 1, all_constraints: true }).unwrap();
        assert_eq!(b.f, 0.0);
        assert_eq!(b.m(), 4);
        assert!(b.grad_f.iter().all(|&g| g == 0.0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn losses_are_nonnegative_and_finite(seed in 0u64..1000, which in 0usize..7) {
            let cases = [
                (ProblemId::Burgers, Mode::Forward),
                (ProblemId::Burgers, Mode::Inverse),
                (ProblemId::Tfmdwe, Mode::Forward),
                (ProblemId::Tfmdwe, Mode::Inverse),
                (ProblemId::Heat2d, Mode::Forward),
                (ProblemId::Heat2d, Mode::Inverse),
                (ProblemId::Nse, Mode::Forward),
            ];
            let (id, mode) = cases[which];
            let (spec, _, samples) = small(id, mode);
            let params = spec.init_params(seed).unwrap();
            let b = evaluate(&spec, &params, &samples).unwrap();
            proptest::prop_assert!(b.f >= 0.0 && b.f.is_finite());
            proptest::prop_assert!(b.h.iter().all(|h| *h >= 0.0 && h.is_finite()));
            proptest::prop_assert!(b.component_losses.values().all(|v| *v >= 0.0));
        }
    }
}
