//! Experiment orchestration behind the `mvfbsde` command line.
//!
//! Every subcommand reads one [`RunConfig`], writes its artifacts into the
//! output directory and stamps `summary.json` with the config hash, the seed
//! and the crate version. Summaries hold no timings or paths, so a fixed
//! `(config, seed)` reproduces them byte for byte at any worker count.

pub mod config;
pub mod experiments;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::lions::{fd_check, lions_field, PsiPoint};
use crate::paths::write_series;
use crate::solver::{continuation_solve, delta0, GeneralFbsdeProblem};
use crate::solver::{ls_slope, solve_equilibrium, solve_representative, value_v};

pub use config::{DirectionSpec, LawSpec, RunConfig, SolverMode};
pub use experiments::{
    bound_constant, contraction_diagnostic, discretization_convergence, fd_quotient, gradient_identity,
    linearity_suite, non_increasing_to_floor, validate_lq, weak_uniqueness_test, BoundReport, ContractionReport,
    ConvergenceReport, LinearityReport, OracleCheck, UniquenessReport, ValidationReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Solve,
    Lions,
    FdCheck,
    Uniqueness,
    ValidateLq,
    Convergence,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Subcommand::Solve,
        Subcommand::Lions,
        Subcommand::FdCheck,
        Subcommand::Uniqueness,
        Subcommand::ValidateLq,
        Subcommand::Convergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Solve => "solve",
            Subcommand::Lions => "lions",
            Subcommand::FdCheck => "fdcheck",
            Subcommand::Uniqueness => "uniqueness",
            Subcommand::ValidateLq => "validate-lq",
            Subcommand::Convergence => "convergence",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subcommand::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand '{s}'")))
    }
}

/// Reproducibility stamp embedded in every summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

/// Result of a completed run.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub summary: Value,
    pub artifacts: Vec<PathBuf>,
}

pub fn exit_code_for(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NO_CONVERGENCE
    } else {
        EXIT_CONFIG
    }
}

/// Machine-readable error report.
pub fn error_json(err: &Error) -> Value {
    let kind = match err {
        Error::NoConvergence { .. } => "no_convergence",
        Error::RegressionSingular { .. } => "regression_singular",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        _ => "invalid_input",
    };
    let mut v = json!({ "error": { "kind": kind, "message": err.to_string(), "exit_code": exit_code_for(err) } });
    if let Error::NoConvergence { residuals, iterations, .. } = err {
        v["error"]["iterations"] = json!(iterations);
        v["error"]["residuals"] = json!(residuals);
    }
    v
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
        text.push('\n');
        self.text(name, &text)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text)?;
        self.written.push(path);
        Ok(())
    }

    fn psi(&mut self, psi: &[PsiPoint]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in psi {
            w.serialize(p).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        self.text("psi.csv", &String::from_utf8_lossy(&bytes))
    }

    fn series(&mut self, rows: &[crate::paths::SeriesRow]) -> Result<()> {
        let mut buf = Vec::new();
        write_series(rows, &mut buf)?;
        self.text("series.csv", &String::from_utf8_lossy(&buf))
    }
}

/// Loads `config_path`, applies the seed override and runs `cmd`, writing
/// artifacts into `out_dir`.
pub fn run(cmd: Subcommand, config_path: &Path, seed: Option<u64>, out_dir: &Path) -> Result<Outcome> {
    let cfg = RunConfig::load(config_path)?;
    run_config(cmd, &cfg, seed, out_dir)
}

/// As [`run`] for an already loaded configuration.
pub fn run_config(cmd: Subcommand, cfg: &RunConfig, seed: Option<u64>, out_dir: &Path) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    let provenance = Provenance {
        config_hash: cfg.hash(),
        seed: seed.unwrap_or(cfg.mc.seed),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    cfg.mc.seed = provenance.seed;
    if cfg.solver.mode == SolverMode::General && cmd != Subcommand::Solve {
        return Err(Error::Config(format!("{cmd} needs solver.mode = \"mfg\"")));
    }
    fs::create_dir_all(out_dir)?;
    let mut art = Artifacts { dir: out_dir.to_path_buf(), written: Vec::new() };
    let (body, passed) = match cmd {
        Subcommand::Solve => (solve(&cfg, &mut art)?, true),
        Subcommand::Lions => (lions(&cfg, &mut art)?, true),
        Subcommand::FdCheck => fdcheck(&cfg, &mut art)?,
        Subcommand::Uniqueness => {
            let r = weak_uniqueness_test(&cfg, cfg.mc.seed, cfg.mc.seed.wrapping_add(1))?;
            art.json("uniqueness.json", &r)?;
            (json!({ "uniqueness": r }), r.passed)
        }
        Subcommand::ValidateLq => {
            let r = validate_lq(&cfg)?;
            art.psi(&r.psi)?;
            (json!({ "validation": r }), r.passed)
        }
        Subcommand::Convergence => {
            let r = discretization_convergence(&cfg, &cfg.experiment.n_list)?;
            art.psi(&r.psi)?;
            (json!({ "convergence": r }), r.non_increasing_to_floor)
        }
    };
    let mut summary = json!({
        "subcommand": cmd.name(),
        "provenance": provenance,
        "model": cfg.model,
        "passed": passed,
    });
    if let (Value::Object(s), Value::Object(b)) = (&mut summary, body) {
        s.extend(b);
    }
    art.json("summary.json", &summary)?;
    Ok(Outcome {
        exit_code: if passed { EXIT_OK } else { EXIT_ACCEPTANCE },
        summary,
        artifacts: art.written,
    })
}

fn solve(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let seed = cfg.mc.seed;
    let model = cfg.model.build()?;
    let scfg = cfg.solver_config(seed);
    let xi = cfg.xi_samples(seed);
    if cfg.solver.mode == SolverMode::General {
        let (kappa, ell) = (cfg.solver.kappa.unwrap_or(1.0), cfg.solver.ell.unwrap_or(1.0));
        let mut problem = GeneralFbsdeProblem::from_model(model, xi, kappa, ell)?;
        if let Some(k) = cfg.norm.k {
            delta0(kappa, k, ell)?;
            problem.k = k;
        }
        let db = crate::paths::sample_brownian_with(&scfg.grid, scfg.particles, seed, scfg.exec)?;
        let out = continuation_solve(&problem, &scfg, &db)?;
        art.series(&out.bundle.series(scfg.exec))?;
        return Ok(json!({
            "mode": "general",
            "delta0": problem.delta0(),
            "ladder": out.ladder,
            "steps": out.steps,
            "y0_slope": ls_slope(out.bundle.x.node(0), out.bundle.y.node(0)),
        }));
    }
    let eq = solve_equilibrium(model, &xi, &scfg)?;
    art.series(&eq.paths.series(scfg.exec))?;
    let reps = cfg
        .experiment
        .x
        .iter()
        .map(|&x| {
            let rep = solve_representative(x, &eq)?;
            let v = value_v(&eq, &rep)?;
            Ok(json!({
                "x": x,
                "vcal": rep.y0,
                "vcal_std_err": rep.y0_std_err,
                "value": v,
                "diagnostics": rep.diagnostics,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let y0 = eq.y0();
    Ok(json!({
        "mode": "mfg",
        "equilibrium": {
            "diagnostics": eq.diagnostics,
            "y0_slope": eq.y0_slope(),
            "mean_y0": y0.iter().sum::<f64>() / y0.len() as f64,
        },
        "representatives": reps,
    }))
}

fn lions(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let seed = cfg.mc.seed;
    let model = cfg.model.build()?;
    let scfg = cfg.solver_config(seed);
    let eq = solve_equilibrium(model, &cfg.xi_samples(seed), &scfg)?;
    let x = cfg.experiment.x.first().copied().ok_or_else(|| Error::Config("experiment.x is empty".into()))?;
    let rep = solve_representative(x, &eq)?;
    let psi = lions_field(&eq, &rep, &cfg.experiment.xtilde)?;
    art.psi(&psi)?;
    Ok(json!({ "x": x, "vcal": rep.y0, "psi": psi }))
}

fn fdcheck(cfg: &RunConfig, art: &mut Artifacts) -> Result<(Value, bool)> {
    let seed = cfg.mc.seed;
    let model = cfg.model.build()?;
    let scfg = cfg.solver_config(seed);
    let xi = cfg.xi_samples(seed);
    let eta = cfg.eta_samples(&xi, seed);
    let x = cfg.experiment.x.first().copied().ok_or_else(|| Error::Config("experiment.x is empty".into()))?;
    let report = fd_check(x, model, &xi, &eta, &cfg.experiment.deltas, &scfg, cfg.experiment.psi_points)?;
    art.json("fdcheck.json", &report)?;
    art.psi(&report.psi)?;
    let body = json!({
        "x": x,
        "rows": report.rows,
        "e_psi_eta": report.e_psi_eta,
        "floor": report.floor,
        "monotone_to_floor": report.monotone_to_floor,
    });
    Ok((body, report.monotone_to_floor))
}
