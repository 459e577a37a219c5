//! Run configuration, the training loop and the reporting helpers behind
//! the command-line tool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{constraint_error, grid_rel_l2, param_error, predict, MetricsReport};
use crate::mlp::{save_checkpoint, MlpConfig, Mode, ParamVector};
use crate::objective::{evaluate_split, evaluate_with, fd_check, roles, EvalOptions, FdReport, LossBundle, SoftWeights};
use crate::optimizers::{
    adam_step, adamflip_step, adamflip_v2_step, fl_momentum_step, fl_step, kkt_residual, GainConfig, OptimizerId, OptimizerState,
    Schedule, StepInfo,
};
use crate::problems::{exact::taylor_green, sample, ProblemId, ProblemSpec, SampleSet};
use crate::theory::{ProbeReport, TheoryProbe};

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Forward => "forward",
        Mode::Inverse => "inverse",
    }
}

/// Iteration budget used when a config does not set one.
pub fn default_iters(id: ProblemId) -> u64 {
    match id {
        ProblemId::Burgers => 5_000,
        ProblemId::Tfmdwe => 3_000,
        ProblemId::Heat2d | ProblemId::Nse => 10_000,
    }
}

/// Optional replacements for the benchmark defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_ic: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_bc: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_f: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_data: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pde_param_init: Option<Vec<f64>>,
}

/// Optimizer settings; unset fields take the per-optimizer defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_diag: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_damp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ki: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemId,
    pub mode: Mode,
    pub optimizer: OptimizerId,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<u64>,
    /// Stop once the summed component losses drop below this (0 disables).
    #[serde(default)]
    pub loss_threshold: f64,
    #[serde(default)]
    pub all_constraints: bool,
    #[serde(default)]
    pub probes: bool,
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub gains: GainOverrides,
    #[serde(default)]
    pub problem_overrides: ProblemOverrides,
    /// Loss weights for the unconstrained baseline.
    #[serde(default)]
    pub soft_weights: SoftWeights,
}

impl RunConfig {
    pub fn new(problem: ProblemId, mode: Mode, optimizer: OptimizerId, seed: u64) -> Self {
        Self {
            problem,
            mode,
            optimizer,
            seed,
            max_iters: None,
            loss_threshold: 0.0,
            all_constraints: false,
            probes: false,
            workers: 0,
            gains: GainOverrides::default(),
            problem_overrides: ProblemOverrides::default(),
            soft_weights: SoftWeights::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn iters(&self) -> u64 {
        self.max_iters.unwrap_or_else(|| default_iters(self.problem))
    }

    pub fn spec(&self) -> Result<ProblemSpec> {
        let mut s = ProblemSpec::new(self.problem, self.mode)?;
        let o = &self.problem_overrides;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = o.$f.clone() { s.$f = v; })* };
        }
        set!(nu, alpha, t_final, n_ic, n_bc, n_f, n_data, k_nodes, pde_param_init);
        if o.hidden_layers.is_some() || o.width.is_some() {
            s.net = MlpConfig::new(
                s.net.in_dim,
                s.net.out_dim,
                o.hidden_layers.unwrap_or(s.net.hidden_layers),
                o.width.unwrap_or(s.net.width),
            )?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn gain_config(&self) -> Result<GainConfig> {
        let mut g = GainConfig::default();
        if self.optimizer == OptimizerId::Adam {
            g.beta1 = 0.9;
        }
        let o = &self.gains;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = o.$f.clone() { g.$f = v; })* };
        }
        set!(kappa, eps_damp, delta, beta1, beta2, eta, schedule);
        g.kappa_diag = o.kappa_diag.clone();
        g.ki = o.ki;
        if self.optimizer == OptimizerId::AdamflipV2 && o.schedule.is_none() {
            g.schedule = Schedule::InvSqrtLog;
        }
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        let gains = self.gain_config()?;
        if self.optimizer == OptimizerId::Adam && self.all_constraints {
            return Err(Error::Config("all_constraints needs a constrained optimizer".into()));
        }
        let (_, cons) = roles(&spec, self.all_constraints);
        gains.gains(cons.len())?;
        if self.probes && self.optimizer == OptimizerId::AdamflipV2 {
            let worst = gains.eta_at(1).max(gains.eta_at(2)) * gains.max_gain();
            if worst > 1.0 + 1e-12 {
                return Err(Error::Config(format!(
                    "theory probes need eta_t * kappa <= 1, but the first step has {worst:.4}"
                )));
            }
        }
        if !(self.loss_threshold >= 0.0) {
            return Err(Error::Config("loss_threshold must be >= 0".into()));
        }
        Ok(())
    }
}

/// Seed of the collocation sampler, decorrelated from the weight init.
pub fn sample_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub f: f64,
    pub h: Vec<f64>,
    pub lambda_inf: Option<f64>,
    pub kkt: Option<f64>,
    pub losses: BTreeMap<String, f64>,
}

pub struct RunOutcome {
    pub metrics: MetricsReport,
    pub probe: Option<ProbeReport>,
    pub params: ParamVector,
    pub steps: u64,
}

fn soft_gradient(spec: &ProblemSpec, bundle: &LossBundle, w: &SoftWeights) -> Vec<f64> {
    let (obj, cons) = roles(spec, false);
    let mut g: Vec<f64> = bundle.grad_f.iter().map(|x| w.get(obj.expect("objective split")) * x).collect();
    for (split, row) in cons.iter().zip(&bundle.jac_h) {
        let wi = w.get(*split);
        for (a, b) in g.iter_mut().zip(row) {
            *a += wi * b;
        }
    }
    g
}

/// Trains per `cfg`, writing `trace.jsonl`, `metrics.json`, `metrics.csv`,
/// `checkpoint.bin`, `samples.json`, `config.toml` and, with probes on,
/// `probes.json` into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    run_with(cfg, out, |_| {})
}

/// As [`run`], calling `on_step` after every trace record is written.
pub fn run_with(cfg: &RunConfig, out: &Path, mut on_step: impl FnMut(&TraceRecord)) -> Result<RunOutcome> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let gains = cfg.gain_config()?;
    let samples = sample(&spec, sample_seed(cfg.seed))?;
    let mut params = spec.init_params(cfg.seed)?;
    let n = params.len();

    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    fs::write(out.join("samples.json"), samples.to_json()?)?;
    let mut trace = BufWriter::new(File::create(out.join("trace.jsonl"))?);

    let opts = EvalOptions {
        workers: cfg.workers,
        all_constraints: cfg.all_constraints,
    };
    let mut state = OptimizerState::new(n);
    let mut probe = cfg.probes.then(|| TheoryProbe::new(n, gains.delta));
    let started = Instant::now();
    let mut steps = 0;
    for t in 1..=cfg.iters() {
        let bundle = evaluate_with(&spec, &params, &samples, opts)?;
        let total: f64 = bundle.component_losses.values().sum();
        if cfg.loss_threshold > 0.0 && total < cfg.loss_threshold {
            break;
        }
        let info: Option<StepInfo> = match cfg.optimizer {
            OptimizerId::Adam => {
                let g = soft_gradient(&spec, &bundle, &cfg.soft_weights);
                adam_step(&mut params.values, &g, &mut state, &gains)?;
                None
            }
            OptimizerId::Fl => Some(fl_step(&mut params.values, &bundle, &gains)?),
            OptimizerId::FlMomentum => Some(fl_momentum_step(&mut params.values, &bundle, &mut state, &gains)?),
            OptimizerId::Adamflip => Some(adamflip_step(&mut params.values, &bundle, &mut state, &gains)?),
            OptimizerId::AdamflipV2 => Some(adamflip_v2_step(&mut params.values, &bundle, &mut state, &gains)?),
        };
        let metric = info.as_ref().and_then(|i| i.metric.as_deref());
        let kkt = match (&mut probe, info.as_ref()) {
            (Some(p), Some(i)) if metric.is_some() => {
                let g = crate::optimizers::combined_direction(&bundle, &i.lambda);
                p.probe_step(&bundle, metric.unwrap(), &g, &state.v_bar).ok()
            }
            (Some(p), _) => p.log_step(&bundle).ok(),
            (None, _) => kkt_residual(&bundle, metric).ok().map(|k| k.0),
        };
        let rec = TraceRecord {
            step: t,
            f: bundle.f,
            h: bundle.h.clone(),
            lambda_inf: info.as_ref().map(|i| i.lambda.iter().fold(0.0f64, |a, l| a.max(l.abs()))),
            kkt,
            losses: bundle.component_losses.clone(),
        };
        serde_json::to_writer(&mut trace, &rec)?;
        trace.write_all(b"\n")?;
        on_step(&rec);
        steps = t;
        if let Some(detail) = divergence(&spec, &params) {
            trace.flush()?;
            return Err(Error::Diverged { step: t, detail });
        }
    }
    trace.flush()?;
    let wall = started.elapsed().as_secs_f64();

    let metrics = final_metrics(cfg, &spec, &params, &samples, steps, wall)?;
    fs::write(out.join("metrics.json"), metrics.to_json()?)?;
    fs::write(out.join("metrics.csv"), metrics.to_csv())?;
    save_checkpoint(&out.join("checkpoint.bin"), &params)?;
    let probe = probe.map(|p| p.report());
    if let Some(p) = &probe {
        fs::write(out.join("probes.json"), serde_json::to_string_pretty(p)?)?;
    }
    Ok(RunOutcome {
        metrics,
        probe,
        params,
        steps,
    })
}

fn divergence(spec: &ProblemSpec, params: &ParamVector) -> Option<String> {
    if let Some(bad) = params.values.iter().position(|v| !v.is_finite()) {
        return Some(format!("parameter {bad} is not finite"));
    }
    if spec.id == ProblemId::Tfmdwe {
        if let Some(&a) = params.pde().first() {
            if !(a > 0.0 && a < 1.0) {
                return Some(format!("fractional order left (0, 1): {a}"));
            }
        }
    }
    None
}

/// Metrics of `params` on the test grid and the training points.
pub fn final_metrics(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    params: &ParamVector,
    samples: &SampleSet,
    steps: u64,
    wall_time_s: f64,
) -> Result<MetricsReport> {
    let mut ce = BTreeMap::new();
    let mut final_losses = BTreeMap::new();
    for split in spec.splits() {
        let e = evaluate_split(spec, params, samples, split, cfg.workers, false)?;
        ce.insert(split.name().to_string(), constraint_error(&e.residuals));
        final_losses.insert(split.name().to_string(), e.loss);
    }
    let names = spec.pde_param_names();
    let learned = params.pde().to_vec();
    let errs = param_error(&learned, &spec.pde_param_truth())?;
    Ok(MetricsReport {
        problem: spec.id.name().into(),
        mode: mode_name(spec.mode).into(),
        optimizer: cfg.optimizer.name().into(),
        seed: cfg.seed,
        iters: steps,
        rel_l2: grid_rel_l2(spec, params)?,
        ce,
        params: names.iter().map(|s| s.to_string()).zip(learned).collect(),
        param_err: names.iter().map(|s| s.to_string()).zip(errs).collect(),
        final_losses,
        wall_time_s,
    })
}

/// Comparison table over run directories.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Directories without a readable `metrics.json`.
    pub missing: Vec<PathBuf>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n", self.header.join(" | "));
        s.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        s
    }
}

pub fn build_table(dirs: &[PathBuf]) -> Table {
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    for d in dirs {
        match fs::read_to_string(d.join("metrics.json")).map_err(Error::from).and_then(|s| MetricsReport::from_json(&s)) {
            Ok(r) => reports.push((d.clone(), r)),
            Err(_) => missing.push(d.clone()),
        }
    }
    let err_names: BTreeSet<String> = reports
        .iter()
        .filter(|(_, r)| r.mode == "inverse")
        .flat_map(|(_, r)| r.param_err.keys().cloned())
        .collect();
    let mut header: Vec<String> = ["run", "problem", "mode", "optimizer", "seed", "Rel. L2", "CE (IC)", "CE (BC)", "CE (Phy)"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(err_names.iter().map(|k| format!("Err({k})")));
    header.push("WT (s)".into());

    let sci = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3e}"));
    let rows = reports
        .iter()
        .map(|(d, r)| {
            let mut row = vec![
                d.display().to_string(),
                r.problem.clone(),
                r.mode.clone(),
                r.optimizer.clone(),
                r.seed.to_string(),
                r.rel_l2.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join("/"),
                sci(r.ce.get("ic").map(|c| c.mse)),
                sci(r.ce.get("bc").map(|c| c.mse)),
                sci(r.ce.get("phy").map(|c| c.mse)),
            ];
            row.extend(err_names.iter().map(|k| sci(r.param_err.get(k).copied())));
            row.push(format!("{:.1}", r.wall_time_s));
            row
        })
        .collect();
    Table { header, rows, missing }
}

/// Evaluation grid for field dumps.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub times: Vec<f64>,
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// CSV of predicted and reference fields on a grid.
pub fn field_csv(spec: &ProblemSpec, params: &ParamVector, grid: &GridSpec) -> Result<String> {
    if params.layout != spec.layout() {
        return Err(Error::Checkpoint("parameters do not match the problem layout".into()));
    }
    let two_d = spec.space_dim() == 2;
    let xs = axis(spec.space[0].0, spec.space[0].1, grid.nx);
    let ys = if two_d { axis(spec.space[1].0, spec.space[1].1, grid.ny) } else { vec![0.0] };
    let mut pts = Vec::new();
    for &t in &grid.times {
        for &x in &xs {
            for &y in &ys {
                pts.push([t, x, y]);
            }
        }
    }
    let pred = predict(params, &pts);
    let nse = spec.id == ProblemId::Nse;
    let mut s = String::from(if two_d { "t,x,y," } else { "t,x," });
    s.push_str(if nse {
        "u_pred,v_pred,p_pred,u_exact,v_exact,p_exact,abs_err\n"
    } else {
        "u_pred,u_exact,abs_err\n"
    });
    for (i, p) in pts.iter().enumerate() {
        let coords = if two_d { format!("{},{},{}", p[0], p[1], p[2]) } else { format!("{},{}", p[0], p[1]) };
        if nse {
            let e = taylor_green(p[1], p[2], p[0], spec.nu);
            let (u, v, pr) = (pred[0][i], pred[1][i], pred[2][i]);
            // velocity error; pressure is only defined up to a constant
            let err = ((u - e[0]).powi(2) + (v - e[1]).powi(2)).sqrt();
            s.push_str(&format!("{coords},{u},{v},{pr},{},{},{},{err}\n", e[0], e[1], e[2]));
        } else {
            let u = pred[0][i];
            let e = spec.solution(p)[0];
            s.push_str(&format!("{coords},{u},{e},{}\n", (u - e).abs()));
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub problem: String,
    pub mode: String,
    pub report: FdReport,
}

/// Finite-difference check of every loss gradient on a width-8,
/// 2-hidden-layer network with 4 points per split, for each problem and
/// mode.
pub fn gradcheck_all(seed: u64, tol: f64) -> Result<Vec<GradcheckSummary>> {
    let mut out = Vec::new();
    for id in ProblemId::all() {
        for mode in [Mode::Forward, Mode::Inverse] {
            if id == ProblemId::Nse && mode == Mode::Inverse {
                continue;
            }
            let mut spec = ProblemSpec::new(id, mode)?;
            spec.net = MlpConfig::new(spec.dim(), spec.out_dim(), 2, 8)?;
            spec.n_ic = 4;
            spec.n_bc = 4;
            spec.n_f = 4;
            spec.n_data = 4;
            // short history grid keeps the scalar reference path quick
            spec.k_nodes = 8;
            let params = spec.init_params(seed)?;
            let samples = sample(&spec, sample_seed(seed))?;
            out.push(GradcheckSummary {
                problem: id.name().into(),
                mode: mode_name(mode).into(),
                report: fd_check(&spec, &params, &samples, tol)?,
            });
        }
    }
    Ok(out)
}
