//! Experiments behind the subcommands and the acceptance suite.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::config::{sample_law, LawSpec, RunConfig};
use crate::error::{Error, Result};
use crate::lions::{
    expect_psi_eta, lions_field, solve_delta_equilibrium, solve_delta_representative, solve_nabla_at_atom, PsiPoint,
    FD_FLOOR_SIGMAS,
};
use crate::measure::{discretize_grid, wasserstein_1d, DiscretizationSpec, EmpiricalMeasure};
use crate::model::{lq_riccati, HamiltonianModel, ModelSpec};
use crate::paths::particle_rng;
use crate::solver::{
    contraction_ratio, random_frozen_input, solve_equilibrium, solve_equilibrium_with_noise, solve_representative,
    value_v, ContractionSample, EquilibriumSolution, GeneralFbsdeProblem, RepresentativeSolution,
};

/// Distances between the two runs' laws at one checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CheckpointDistances {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// `∫_0^t Z ds`.
    pub int_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub seeds: [u64; 2],
    pub particles: usize,
    pub checkpoints: Vec<f64>,
    pub w1: Vec<CheckpointDistances>,
    /// `3/√N`.
    pub tolerance: f64,
    pub passed: bool,
}

/// Laws of `(X_t, Y_t, ∫_0^t Z ds)` at the given times.
fn checkpoint_laws(eq: &EquilibriumSolution, times: &[f64]) -> Vec<[Vec<f64>; 3]> {
    let exec = eq.config.exec;
    let grid = eq.grid();
    let n = eq.paths.particles();
    let mut int_z = vec![0.0; n];
    let mut k_done = 0;
    times
        .iter()
        .map(|&t| {
            let k = grid.node_at(t);
            while k_done < k {
                let z = eq.paths.z_node(exec, k_done);
                int_z.iter_mut().zip(&z).for_each(|(a, b)| *a += b * grid.dt());
                k_done += 1;
            }
            [eq.paths.x.node(k).to_vec(), eq.paths.y_node(exec, k), int_z.clone()]
        })
        .collect()
}

fn w1(a: &[f64], b: &[f64]) -> Result<f64> {
    wasserstein_1d(1, &EmpiricalMeasure::uniform(a.to_vec())?, &EmpiricalMeasure::uniform(b.to_vec())?)
}

/// Solves the equilibrium under two noise streams, each with its own draw of
/// `ξ`, and compares the laws of `(X, Y, ∫Z ds)` at the checkpoints.
pub fn weak_uniqueness_test(cfg: &RunConfig, seed_a: u64, seed_b: u64) -> Result<UniquenessReport> {
    let model = cfg.model.build()?;
    let mut times = cfg.experiment.checkpoints.clone();
    times.sort_by(f64::total_cmp);
    let laws = |seed: u64| -> Result<Vec<[Vec<f64>; 3]>> {
        let eq = solve_equilibrium(model.clone(), &cfg.xi_samples(seed), &cfg.solver_config(seed))?;
        Ok(checkpoint_laws(&eq, &times))
    };
    let a = laws(seed_a)?;
    let b = if seed_a == seed_b { a.clone() } else { laws(seed_b)? };
    let w1s = times
        .iter()
        .zip(a.iter().zip(&b))
        .map(|(&t, (la, lb))| {
            Ok(CheckpointDistances { t, x: w1(&la[0], &lb[0])?, y: w1(&la[1], &lb[1])?, int_z: w1(&la[2], &lb[2])? })
        })
        .collect::<Result<Vec<_>>>()?;
    let tolerance = 3.0 / (cfg.mc.particles as f64).sqrt();
    let passed = w1s.iter().all(|d| d.x <= tolerance && d.y <= tolerance && d.int_z <= tolerance);
    Ok(UniquenessReport {
        seeds: [seed_a, seed_b],
        particles: cfg.mc.particles,
        checkpoints: times,
        w1: w1s,
        tolerance,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: u32,
    pub atoms: usize,
    /// `ψ_n` at the atoms that the `x̃` grid points discretize to, `None`
    /// where that atom carries no samples.
    pub psi: Vec<Option<f64>>,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub x: f64,
    pub xtilde: Vec<f64>,
    pub psi: Vec<PsiPoint>,
    pub rows: Vec<ConvergenceRow>,
    /// Gaps below this are indistinguishable from sampling and solver error.
    pub floor: f64,
    pub non_increasing_to_floor: bool,
}

/// Gap sequence shrinks, or sits below `floor`, at every refinement.
pub fn non_increasing_to_floor(gaps: &[f64], floor: f64) -> bool {
    gaps.windows(2).all(|w| w[1] <= w[0] || w[1] <= floor)
}

/// Replaces `ξ` by its grid discretizations and compares the discrete
/// `∂μ𝒱` at the induced atoms with the continuous field.
pub fn discretization_convergence(cfg: &RunConfig, n_list: &[u32]) -> Result<ConvergenceReport> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("n_list must be non-empty and increasing".into()));
    }
    let seed = cfg.mc.seed;
    let model = cfg.model.build()?;
    let scfg = cfg.solver_config(seed);
    let xi = cfg.xi_samples(seed);
    let x = first_x(cfg)?;
    let xtilde = cfg.experiment.xtilde.clone();
    let eq = solve_equilibrium(model.clone(), &xi, &scfg)?;
    let rep = solve_representative(x, &eq)?;
    let psi = lions_field(&eq, &rep, &xtilde)?;
    let mut se = psi.iter().map(|p| p.std_err).fold(0.0, f64::max);
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let spec = DiscretizationSpec::new(n)?;
        let xi_n = discretize_grid(&xi, n);
        let eq_n = solve_equilibrium_with_noise(model.clone(), &xi_n, &scfg, eq.paths.db.clone())?;
        let rep_n = solve_representative(x, &eq_n)?;
        let mut psi_n = Vec::with_capacity(xtilde.len());
        for &xt in &xtilde {
            match solve_nabla_at_atom(&eq_n, &rep_n, spec.discretize(xt)) {
                Ok(d) => {
                    se = se.max(d.nabla.total.y0_std_err);
                    psi_n.push(Some(d.dmu));
                }
                Err(Error::ZeroProbabilityAtom { .. }) => psi_n.push(None),
                Err(e) => return Err(e),
            }
        }
        if psi_n.iter().all(Option::is_none) {
            return Err(Error::Config(format!("no x̃ point maps to a charged atom at n = {n}")));
        }
        let gap = psi_n
            .iter()
            .zip(&psi)
            .filter_map(|(a, b)| a.map(|a| (a - b.psi).abs()))
            .fold(0.0, f64::max);
        let mut atoms = xi_n.clone();
        atoms.sort_by(f64::total_cmp);
        atoms.dedup();
        rows.push(ConvergenceRow { n, atoms: atoms.len(), psi: psi_n, gap });
    }
    let floor = FD_FLOOR_SIGMAS * std::f64::consts::SQRT_2 * se + scfg.picard_tol;
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    Ok(ConvergenceReport {
        x,
        xtilde,
        psi,
        non_increasing_to_floor: non_increasing_to_floor(&gaps, floor),
        rows,
        floor,
    })
}

fn first_x(cfg: &RunConfig) -> Result<f64> {
    cfg.experiment.x.first().copied().ok_or_else(|| Error::Config("experiment.x is empty".into()))
}

/// One comparison against an analytic or independently computed value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    pub oracle: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: &str, value: f64, oracle: f64, tolerance: f64) -> Self {
        let gap = (value - oracle).abs();
        Self { name: name.to_string(), value, oracle, gap, tolerance, passed: gap <= tolerance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub p: f64,
    pub q: f64,
    pub checks: Vec<OracleCheck>,
    pub psi: Vec<PsiPoint>,
    pub passed: bool,
}

/// Relative tolerances of the oracle suite.
pub const LQ_REL_TOL: f64 = 0.02;
pub const GRADIENT_REL_TOL: f64 = 0.03;
pub const FD_REL_TOL: f64 = 0.03;
pub const PSI_SIGMAS: f64 = 3.0;

/// Central difference of `V` in `x` against `𝒱(x)`, on one equilibrium.
pub fn gradient_identity(eq: &EquilibriumSolution, x: f64, h: f64) -> Result<(f64, f64)> {
    let up = value_v(eq, &solve_representative(x + h, eq)?)?.value;
    let down = value_v(eq, &solve_representative(x - h, eq)?)?.value;
    Ok(((up - down) / (2.0 * h), solve_representative(x, eq)?.y0))
}

/// Finite-difference quotient of `𝒱(x, ·)` in direction `η` at step `δ`,
/// reusing the base noise.
pub fn fd_quotient(eq: &EquilibriumSolution, x: f64, eta: &[f64], delta: f64) -> Result<f64> {
    let base = solve_representative(x, eq)?.y0;
    let shifted: Vec<f64> = eq.xi.iter().zip(eta).map(|(a, b)| a + delta * b).collect();
    let eq_d = solve_equilibrium_with_noise(eq.model.clone(), &shifted, &eq.config, eq.paths.db.clone())?;
    Ok((solve_representative(x, &eq_d)?.y0 - base) / delta)
}

/// The LQ oracle suite: equilibrium slope, `𝒱` at point masses, the
/// gradient identity, the flat Lions field, the unit-direction derivative,
/// the finite-difference identity and the two-atom relation.
pub fn validate_lq(cfg: &RunConfig) -> Result<ValidationReport> {
    let ModelSpec::Lq { alpha, beta, r } = cfg.model else {
        return Err(Error::Config("validate-lq needs an lq model".into()));
    };
    let (p, q) = lq_riccati(alpha, beta, r)?;
    let seed = cfg.mc.seed;
    let model = cfg.model.build()?;
    let scfg = cfg.solver_config(seed);
    let n = cfg.mc.particles;
    let x = first_x(cfg)?;
    let rel = |v: f64| LQ_REL_TOL * v.abs();
    let mut checks = Vec::new();

    let xi = cfg.xi_samples(seed);
    let eq = solve_equilibrium(model.clone(), &xi, &scfg)?;
    let slope = eq.y0_slope().ok_or_else(|| Error::invalid("degenerate initial law has no slope"))?;
    checks.push(OracleCheck::new("equilibrium_slope", slope, p, rel(p)));

    for (m0, oracle) in [(0.0, p * x), (1.0, p * x + q)] {
        let eq_m = solve_equilibrium(model.clone(), &vec![m0; n], &scfg)?;
        let y0 = solve_representative(x, &eq_m)?.y0;
        checks.push(OracleCheck::new(&format!("representative_at_point_mass_{m0}"), y0, oracle, rel(oracle)));
    }

    let (fd, vcal) = gradient_identity(&eq, x, cfg.experiment.fd_h)?;
    checks.push(OracleCheck::new("gradient_identity", fd, vcal, GRADIENT_REL_TOL * vcal.abs()));

    let rep = solve_representative(x, &eq)?;
    let psi = lions_field(&eq, &rep, &cfg.experiment.xtilde)?;
    let worst = psi
        .iter()
        .max_by(|a, b| {
            let band = |p: &PsiPoint| (p.psi - q).abs() - PSI_SIGMAS * p.std_err;
            band(a).total_cmp(&band(b))
        })
        .copied();
    if let Some(w) = worst {
        checks.push(OracleCheck::new("lions_field_flat", w.psi, q, rel(q) + PSI_SIGMAS * w.std_err));
    }

    let ones = vec![1.0; n];
    let d_eq = solve_delta_equilibrium(&eq, &ones)?;
    let (_, dy0) = solve_delta_representative(&eq, &rep, &d_eq)?;
    checks.push(OracleCheck::new("unit_direction_derivative", dy0, q, rel(q)));

    let delta = cfg.experiment.deltas.get(cfg.experiment.deltas.len() / 2).copied().unwrap_or(0.1);
    let quotient = fd_quotient(&eq, x, &ones, delta)?;
    let (e_psi_eta, _) = expect_psi_eta(&psi, &xi, &ones);
    checks.push(OracleCheck::new("fd_identity", quotient, e_psi_eta, FD_REL_TOL * e_psi_eta.abs()));

    let two = sample_law(&LawSpec::Atoms { values: vec![0.0, 1.0], probs: vec![0.5, 0.5] }, n, 0);
    let eq2 = solve_equilibrium(model, &two, &scfg)?;
    let rep2 = solve_representative(x, &eq2)?;
    let d = solve_nabla_at_atom(&eq2, &rep2, 0.0)?;
    checks.push(OracleCheck::new("two_atom_dmu", d.dmu, q, rel(q)));
    checks.push(OracleCheck::new(
        "two_atom_relation",
        d.indicator_dy0,
        d.probability * d.dmu,
        LQ_REL_TOL * d.indicator_dy0.abs(),
    ));

    let passed = checks.iter().all(|c| c.passed);
    Ok(ValidationReport { p, q, checks, psi, passed })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearityCheck {
    pub a: f64,
    pub b: f64,
    pub i1: usize,
    pub i2: usize,
    pub combined: f64,
    pub superposed: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearityReport {
    pub directions: usize,
    pub checks: Vec<LinearityCheck>,
    pub max_gap: f64,
}

/// Random direction `c₀ + c₁ξ + c₂ξ² + c₃·noise`.
fn random_direction(xi: &[f64], rng: &mut ChaCha8Rng, key: u64) -> Vec<f64> {
    let c: [f64; 4] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(0.0..1.0)];
    xi.iter()
        .enumerate()
        .map(|(i, x)| c[0] + c[1] * x + c[2] * x * x + c[3] * particle_rng(key, i).sample::<f64, _>(StandardNormal))
        .collect()
}

fn derivative_along(eq: &EquilibriumSolution, rep: &RepresentativeSolution, eta: &[f64]) -> Result<f64> {
    let d = solve_delta_equilibrium(eq, eta)?;
    Ok(solve_delta_representative(eq, rep, &d)?.1)
}

/// `δY_0` of `a·η₁ + b·η₂` against `a·δY_0(η₁) + b·δY_0(η₂)` for `checks`
/// random draws over a pool of `directions` random directions.
pub fn linearity_suite(cfg: &RunConfig, directions: usize, checks: usize, seed: u64) -> Result<LinearityReport> {
    let model = cfg.model.build()?;
    let scfg = cfg.solver_config(cfg.mc.seed);
    let xi = cfg.xi_samples(cfg.mc.seed);
    let eq = solve_equilibrium(model, &xi, &scfg)?;
    let rep = solve_representative(first_x(cfg)?, &eq)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Vec<f64>> = (0..directions.max(2))
        .map(|j| random_direction(&xi, &mut rng, seed.wrapping_add(j as u64 + 1)))
        .collect();
    let dys = pool.iter().map(|e| derivative_along(&eq, &rep, e)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(checks);
    for _ in 0..checks {
        let i1 = rng.random_range(0..pool.len());
        let i2 = (i1 + rng.random_range(1..pool.len())) % pool.len();
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: Vec<f64> = pool[i1].iter().zip(&pool[i2]).map(|(u, v)| a * u + b * v).collect();
        let combined = derivative_along(&eq, &rep, &mix)?;
        let superposed = a * dys[i1] + b * dys[i2];
        out.push(LinearityCheck { a, b, i1, i2, combined, superposed, gap: (combined - superposed).abs() });
    }
    let max_gap = out.iter().map(|c| c.gap).fold(0.0, f64::max);
    Ok(LinearityReport { directions: pool.len(), checks: out, max_gap })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundSample {
    pub x: f64,
    pub xi_mean: f64,
    pub xi_sd: f64,
    pub eta_norm: f64,
    pub dy0: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub seed: u64,
    pub samples: Vec<BoundSample>,
    /// `max |δY_0| / ‖η‖₂` over the family.
    pub constant: f64,
}

/// Fits `C` in `|δY_0^{x,ξ,η}| ≤ C·‖η‖₂` over a random family of starting
/// points, normal initial laws and directions. Each member pairs a constant
/// direction with a random one.
pub fn bound_constant(cfg: &RunConfig, members: usize, seed: u64) -> Result<BoundReport> {
    let model: Arc<dyn HamiltonianModel> = cfg.model.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for j in 0..members {
        let (x, mean, sd) = (rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(0.5..1.5));
        let run_seed = seed.wrapping_mul(31).wrapping_add(j as u64);
        let xi = sample_law(&LawSpec::Normal { mean, sd }, cfg.mc.particles, run_seed ^ 0x5bd1_e995);
        let eq = solve_equilibrium(model.clone(), &xi, &cfg.solver_config(run_seed))?;
        let rep = solve_representative(x, &eq)?;
        let scale = rng.random_range(0.5..2.0);
        let etas = [vec![scale; xi.len()], random_direction(&xi, &mut rng, run_seed ^ 0x2545_f491)];
        for eta in etas {
            let norm = (eta.iter().map(|e| e * e).sum::<f64>() / eta.len() as f64).sqrt();
            let dy0 = derivative_along(&eq, &rep, &eta)?;
            samples.push(BoundSample { x, xi_mean: mean, xi_sd: sd, eta_norm: norm, dy0, ratio: dy0.abs() / norm });
        }
    }
    let constant = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
    Ok(BoundReport { seed, samples, constant })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    pub delta0: f64,
    pub samples: Vec<ContractionSample>,
    pub max_ratio: f64,
}

/// Empirical contraction of the frozen-input map at step `δ₀` on the
/// general-mode cast of an LQ model, over random frozen-input pairs.
pub fn contraction_diagnostic(cfg: &RunConfig, pairs: usize, seed: u64) -> Result<ContractionReport> {
    let ModelSpec::Lq { alpha, beta, r } = cfg.model else {
        return Err(Error::Config("the contraction diagnostic needs an lq model".into()));
    };
    let scfg = cfg.solver_config(cfg.mc.seed);
    let problem = GeneralFbsdeProblem::lq_cast(alpha, beta, r, cfg.xi_samples(cfg.mc.seed))?;
    let db = crate::paths::sample_brownian_with(&scfg.grid, scfg.particles, scfg.seed, scfg.exec)?;
    let delta0 = problem.delta0();
    let samples = (0..pairs)
        .map(|j| {
            let s = seed.wrapping_add(2 * j as u64);
            let u = random_frozen_input(&problem.xi, &scfg.grid, s);
            let v = random_frozen_input(&problem.xi, &scfg.grid, s + 1);
            contraction_ratio(&problem, (&u.0, &u.1), (&v.0, &v.1), 0.0, delta0, &db, &scfg, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let max_ratio = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
    Ok(ContractionReport { delta0, samples, max_ratio })
}
