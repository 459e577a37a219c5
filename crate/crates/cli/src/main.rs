use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use flpinn::harness::{self, build_table, field_csv, gradcheck_all, GridSpec, RunConfig};
use flpinn::mlp::{load_checkpoint, read_header};
use flpinn::theory::{run_affine_contraction_suite, run_sqp_equivalence_suite, run_toy_convergence, ToyConfig};

#[derive(Parser)]
#[command(name = "flpinn", version, about = "Constrained PINN training with feedback-linearization optimizers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<problem>-<mode>-<optimizer>-s<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        probes: Option<Switch>,
        #[arg(long)]
        workers: Option<usize>,
        /// Print a progress line every this many steps (0 = quiet).
        #[arg(long, default_value_t = 500)]
        log_every: u64,
    },
    /// Comparison table over run directories.
    Table {
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump predicted and exact fields of a checkpoint on a grid.
    Field {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        nx: usize,
        #[arg(long, default_value_t = 50)]
        ny: usize,
        /// Comma-separated times.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        times: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Contraction, SQP-equivalence and toy convergence suites.
    Theory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        /// Gains for the contraction suite.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "1,5,10")]
        kappa: Vec<f64>,
    },
    /// Print a checkpoint header, optionally checking it against a config.
    CheckpointInfo {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Run {
            config,
            seed,
            out,
            probes,
            workers,
            log_every,
        } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = probes {
                cfg.probes = matches!(p, Switch::On);
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from(format!(
                    "runs/{}-{}-{}-s{}",
                    cfg.problem.name(),
                    harness::mode_name(cfg.mode),
                    cfg.optimizer.name(),
                    cfg.seed
                ))
            });
            let res = harness::run_with(&cfg, &out, |r| {
                if log_every > 0 && r.step % log_every == 0 {
                    let total: f64 = r.losses.values().sum();
                    eprintln!("step {:>6}  loss {total:.4e}  f {:.4e}  h {:?}", r.step, r.f, r.h);
                }
            })?;
            let m = &res.metrics;
            println!("{}", out.display());
            println!("steps {}  rel_l2 {:?}  wall {:.1}s", res.steps, m.rel_l2, m.wall_time_s);
            for (k, v) in &m.params {
                println!("{k} = {v:.6}  (err {:.3e})", m.param_err[k]);
            }
            if let Some(p) = &res.probe {
                println!("probes: {}", verdict(p.passed));
                return Ok(p.passed);
            }
            Ok(true)
        }
        Cmd::Table { dirs, format, out } => {
            let t = build_table(&dirs);
            for d in &t.missing {
                eprintln!("missing metrics: {}", d.display());
            }
            let text = match format {
                Format::Csv => t.to_csv(),
                Format::Markdown => t.to_markdown(),
            };
            write_or_print(out.as_deref(), &text)?;
            Ok(t.missing.is_empty())
        }
        Cmd::Field {
            config,
            checkpoint,
            nx,
            ny,
            times,
            out,
        } => {
            let spec = RunConfig::load(&config)?.spec()?;
            let params = load_checkpoint(&checkpoint, &spec.layout())?;
            let csv = field_csv(&spec, &params, &GridSpec { nx, ny, times })?;
            write_or_print(out.as_deref(), &csv)?;
            Ok(true)
        }
        Cmd::Gradcheck { seed, tol } => {
            let mut ok = true;
            for s in gradcheck_all(seed, tol)? {
                let r = &s.report;
                println!(
                    "{:<8} {:<8} {}  checked {:>5}  max rel err {:.2e}",
                    s.problem,
                    s.mode,
                    verdict(r.passed()),
                    r.checked,
                    r.max_rel_err
                );
                for f in r.failures.iter().take(5) {
                    println!("    {f}");
                }
                ok &= r.passed();
            }
            Ok(ok)
        }
        Cmd::Theory { seed, eta, kappa } => {
            let mut ok = true;
            for rep in [run_affine_contraction_suite(seed, eta, &kappa), run_sqp_equivalence_suite(seed)] {
                println!(
                    "{:<20} {}  cases {:>4}  worst err {:.2e} (tol {:.0e})",
                    rep.name,
                    verdict(rep.passed),
                    rep.cases,
                    rep.worst_error,
                    rep.tolerance
                );
                for f in rep.failures.iter().take(5) {
                    println!("    {f}");
                }
                ok &= rep.passed;
            }
            let toy = run_toy_convergence(seed, &ToyConfig::default())?;
            println!(
                "{:<20} {}  best kkt {:.2e} from {:.2e}  hit step {:?}",
                "toy_convergence",
                verdict(toy.passed),
                toy.best_kkt,
                toy.initial_kkt,
                toy.hit_step
            );
            Ok(ok && toy.passed)
        }
        Cmd::CheckpointInfo { checkpoint, config } => {
            let h = read_header(&checkpoint)?;
            println!("version     {}", h.version);
            println!("fingerprint {:016x}", h.fingerprint);
            println!("values      {}", h.len);
            if let Some(c) = config {
                let spec = RunConfig::load(&c)?.spec()?;
                if let Err(e) = load_checkpoint(&checkpoint, &spec.layout()) {
                    bail!("{e}");
                }
                println!("compatible with {}", c.display());
            }
            Ok(true)
        }
    }
}
