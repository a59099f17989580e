//! General-problem mode: the infinite-horizon system
//! `dX = G dt + σ dB`, `dY = −F dt + Z dB`, solved by λ-continuation from
//! the linear system `dX = −κY dt + σ dB`, `dY = −κX dt + Z dB`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{column_law, Diagnostics, PathBundle, SolverConfig};
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::model::{HamiltonianModel, LawDependence};
use crate::par::{self, Exec};
use crate::paths::{discounted_integral, path_distance_sq, Increments, PathMatrix, TimeGrid};
use crate::regression::{fit_node, Design, NodeFit};

/// Joint law of `(X_t, A_t)` at one node, as particle columns.
pub struct NodeLaw<'a> {
    pub x: &'a [f64],
    pub a: &'a [f64],
    /// Marginal law of `X_t` in the form the coefficients read.
    pub marginal: EmpiricalMeasure,
}

impl NodeLaw<'_> {
    pub fn mean_x(&self) -> f64 {
        self.marginal.mean()
    }
}

/// Coefficient `(t, x, y, a, law) ↦ value`, with `a` the particle's own `A_t`.
pub type Coefficient = Arc<dyn Fn(f64, f64, f64, f64, &NodeLaw) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct GeneralFbsdeProblem {
    pub g: Coefficient,
    pub f: Coefficient,
    pub sigma: f64,
    /// Exogenous process `A`; `None` means `A ≡ 0`.
    pub a: Option<PathMatrix>,
    pub k: f64,
    pub ell: f64,
    pub kappa: f64,
    pub xi: Vec<f64>,
    pub law_dependence: LawDependence,
}

impl fmt::Debug for GeneralFbsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralFbsdeProblem")
            .field("sigma", &self.sigma)
            .field("k", &self.k)
            .field("ell", &self.ell)
            .field("kappa", &self.kappa)
            .field("particles", &self.xi.len())
            .finish_non_exhaustive()
    }
}

impl GeneralFbsdeProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        g: Coefficient,
        f: Coefficient,
        sigma: f64,
        a: Option<PathMatrix>,
        k: f64,
        ell: f64,
        kappa: f64,
        xi: Vec<f64>,
    ) -> Result<Self> {
        delta0(kappa, k, ell)?;
        if !sigma.is_finite() {
            return Err(Error::invalid("sigma must be finite"));
        }
        if xi.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if let Some(a) = &a {
            if a.particles() != xi.len() {
                return Err(Error::invalid("A paths must have one row per initial sample"));
            }
        }
        Ok(Self { g, f, sigma, a, k, ell, kappa, xi, law_dependence: LawDependence::Full })
    }

    /// Casts the equilibrium system of `model` with `G = ∂_yH`,
    /// `F = ∂_xH − rY`, `σ = 1`, `A ≡ 0` and `K = r`.
    pub fn from_model(model: Arc<dyn HamiltonianModel>, xi: Vec<f64>, kappa: f64, ell: f64) -> Result<Self> {
        let (mg, mf) = (model.clone(), model.clone());
        let r = model.r();
        let g: Coefficient = Arc::new(move |_, x, y, _, law: &NodeLaw| mg.dh_y(x, &law.marginal, y));
        let f: Coefficient = Arc::new(move |_, x, y, _, law: &NodeLaw| mf.dh_x(x, &law.marginal, y) - r * y);
        let mut p = Self::new(g, f, 1.0, None, r, ell, kappa, xi)?;
        p.law_dependence = model.law_dependence();
        Ok(p)
    }

    /// Linear-quadratic cast with constants derived from the coefficients:
    /// `κ = min(α + min(β, 0), 1)` and `ℓ = max(α, 1 + r, |β|)`.
    pub fn lq_cast(alpha: f64, beta: f64, r: f64, xi: Vec<f64>) -> Result<Self> {
        let model = crate::model::make_lq_model(alpha, beta, r)?;
        let kappa = (alpha + beta.min(0.0)).min(1.0);
        let ell = alpha.max(1.0 + r).max(beta.abs());
        Self::from_model(Arc::new(model), xi, kappa, ell)
    }

    pub fn particles(&self) -> usize {
        self.xi.len()
    }

    pub fn delta0(&self) -> f64 {
        delta0(self.kappa, self.k, self.ell).expect("checked at construction")
    }

    fn a_node(&self, k: usize) -> Option<&[f64]> {
        self.a.as_ref().map(|a| a.node(k))
    }

    fn node_law<'a>(&self, exec: Exec, x: &'a [f64], a: &'a [f64]) -> Result<NodeLaw<'a>> {
        Ok(NodeLaw { x, a, marginal: column_law(exec, x, self.law_dependence)? })
    }
}

/// Continuation step bound `(2κ − K)/(3κ + 11ℓ)`.
pub fn delta0(kappa: f64, k: f64, ell: f64) -> Result<f64> {
    let ok = [kappa, k, ell].iter().all(|v| v.is_finite()) && 2.0 * kappa > k && ell > 0.0 && k > 0.0;
    if !ok {
        return Err(Error::InvalidConstants { kappa, k, ell });
    }
    Ok((2.0 * kappa - k) / (3.0 * kappa + 11.0 * ell))
}

/// λ values visited after 0, ending at 1.
pub fn lambda_ladder(problem: &GeneralFbsdeProblem, config: &SolverConfig) -> Result<Vec<f64>> {
    let d0 = problem.delta0();
    if let Some(steps) = &config.lambda_steps {
        let mut prev = 0.0;
        for &l in steps {
            if !(l > prev && l - prev <= d0 + 1e-12 && l <= 1.0 + 1e-12) {
                return Err(Error::invalid(format!(
                    "lambda ladder must increase to 1 in steps of at most {d0}"
                )));
            }
            prev = l;
        }
        if (prev - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("lambda ladder must end at 1"));
        }
        return Ok(steps.clone());
    }
    let n = (1.0 / d0 - 1e-12).ceil().max(1.0) as usize;
    Ok((1..=n).map(|j| j as f64 / n as f64).collect())
}

/// Output of one level solve.
#[derive(Clone, Debug)]
pub struct LevelSolution {
    pub bundle: PathBundle,
    pub fields: Vec<NodeFit>,
    pub diagnostics: Diagnostics,
}

struct Sources<'a> {
    phi: Option<&'a PathMatrix>,
    psi: Option<&'a PathMatrix>,
}

fn nonzero(m: Option<&PathMatrix>) -> Option<&PathMatrix> {
    m.filter(|m| (0..m.nodes()).any(|k| m.node(k).iter().any(|v| *v != 0.0)))
}

/// Solves the λ-level system with source processes `φ`, `ψ` by Picard
/// iteration on the field `Y_t = u_t(X_t, φ_t, ψ_t, A_t)`.
#[allow(clippy::too_many_arguments)]
pub fn solve_level(
    problem: &GeneralFbsdeProblem,
    lambda: f64,
    phi: Option<&PathMatrix>,
    psi: Option<&PathMatrix>,
    db: &Increments,
    config: &SolverConfig,
    warm: Option<&[NodeFit]>,
) -> Result<LevelSolution> {
    config.validate()?;
    if !(0.0..=1.0 + 1e-12).contains(&lambda) {
        return Err(Error::invalid("lambda must lie in [0, 1]"));
    }
    let grid = config.grid;
    let (n, m) = (problem.particles(), grid.steps());
    if db.particles() != n || db.steps() != m {
        return Err(Error::invalid("increments do not match the problem and grid"));
    }
    for s in [phi, psi].into_iter().flatten() {
        if s.particles() != n || s.nodes() != m + 1 {
            return Err(Error::invalid("source paths do not match the problem and grid"));
        }
    }
    let src = Sources { phi: nonzero(phi), psi: nonzero(psi) };
    let a_mat = nonzero(problem.a.as_ref());
    let aux_mats: Vec<&PathMatrix> = [src.phi, src.psi, a_mat].into_iter().flatten().collect();
    let n_aux = aux_mats.len();

    let exec = config.exec;
    let dt = grid.dt();
    let kappa = problem.kappa;
    let theta = config.damping;
    let zero_a = vec![0.0; n];
    let deg = config.basis_degree;
    let mut fields: Vec<NodeFit> = match warm {
        Some(w) if w.len() == m + 1 && w.iter().all(|f| f.aux.len() == n_aux) => w.to_vec(),
        _ => vec![NodeFit::zero(deg, n_aux); m + 1],
    };
    fields[m] = NodeFit::zero(deg, n_aux);
    let aux_at = |i: usize, k: usize, buf: &mut [f64; 3]| {
        for (j, a) in aux_mats.iter().enumerate() {
            buf[j] = a.get(i, k);
        }
    };

    let mut x = PathMatrix::zeros(n, m + 1);
    x.node_mut(0).copy_from_slice(&problem.xi);
    let mut residuals = Vec::new();
    let fresh = warm.is_none();
    for iter in 0..config.max_iters {
        // Forward pass with the live law of each column.
        let mut dx2 = vec![0.0; m + 1];
        for k in 0..m {
            let a = problem.a_node(k).unwrap_or(&zero_a);
            let t = grid.t(k);
            let (cur, next) = x.step_pair(k);
            let law = problem.node_law(exec, cur, a)?;
            let field = &fields[k];
            let dbk = db.node(k);
            let phik = src.phi.map(|p| p.node(k));
            dx2[k + 1] = par::update_reduce(
                exec,
                next,
                0.0,
                |off, chunk| {
                    let mut acc = 0.0;
                    let mut buf = [0.0; 3];
                    for (j, v) in chunk.iter_mut().enumerate() {
                        let i = off + j;
                        aux_at(i, k, &mut buf);
                        let y = field.y(cur[i], &buf[..n_aux]);
                        let drift = lambda * (problem.g)(t, cur[i], y, a[i], &law)
                            - kappa * (1.0 - lambda) * y
                            + phik.map_or(0.0, |p| p[i]);
                        let nv = cur[i] + drift * dt + problem.sigma * dbk[i];
                        acc += (nv - *v) * (nv - *v);
                        *v = nv;
                    }
                    acc
                },
                |a, b| a + b,
            ) / n as f64;
        }

        // Backward regression pass.
        let mut dy2 = vec![0.0; m + 1];
        let mut y_next = vec![0.0; n];
        let mut target = vec![0.0; n];
        let relax = if fresh && iter == 0 { 1.0 } else { theta };
        for k in (0..m).rev() {
            let a = problem.a_node(k).unwrap_or(&zero_a);
            let t = grid.t(k);
            let xk = x.node(k);
            let law = problem.node_law(exec, xk, a)?;
            let psik = src.psi.map(|p| p.node(k));
            par::fill(exec, &mut target, |i| {
                let y = y_next[i];
                let driver = lambda * (problem.f)(t, xk[i], y, a[i], &law)
                    + kappa * (1.0 - lambda) * xk[i]
                    + psik.map_or(0.0, |p| p[i]);
                y + dt * driver
            });
            let aux_cols: Vec<&[f64]> = aux_mats.iter().map(|a| a.node(k)).collect();
            let design = Design { x: xk, aux: &aux_cols, db: Some(db.node(k)), sqrt_dt: db.sqrt_dt(), degree: deg };
            let fit = fit_node(exec, &design, &target, k)?;
            let blended = fit.blend(&fields[k], relax);
            let old = &fields[k];
            dy2[k] = par::mean_of(exec, n, |i| {
                let mut buf = [0.0; 3];
                aux_at(i, k, &mut buf);
                (blended.y(xk[i], &buf[..n_aux]) - old.y(xk[i], &buf[..n_aux])).powi(2)
            });
            par::fill(exec, &mut y_next, |i| {
                let mut buf = [0.0; 3];
                aux_at(i, k, &mut buf);
                fit.y(xk[i], &buf[..n_aux])
            });
            fields[k] = blended;
        }
        let res = (discounted_integral(&dx2, problem.k, &grid) + discounted_integral(&dy2, problem.k, &grid)).sqrt();
        residuals.push(res);
        if !res.is_finite() {
            break;
        }
        if (iter > 0 || !fresh) && res < config.picard_tol {
            let bundle = materialize(&x, &fields, &aux_mats, db, grid, exec);
            return Ok(LevelSolution { bundle, fields, diagnostics: Diagnostics::from_residuals(residuals, true) });
        }
    }
    Err(Error::NoConvergence { stage: format!("level λ={lambda}"), iterations: residuals.len(), residuals })
}

fn materialize(
    x: &PathMatrix,
    fields: &[NodeFit],
    aux: &[&PathMatrix],
    db: &Increments,
    grid: TimeGrid,
    exec: Exec,
) -> PathBundle {
    let (n, nodes) = (x.particles(), x.nodes());
    let mut y = PathMatrix::zeros(n, nodes);
    let mut z = PathMatrix::zeros(n, nodes);
    let s = db.sqrt_dt();
    for k in 0..nodes {
        let xk = x.node(k);
        let f = &fields[k];
        let vals = |i: usize| {
            let mut buf = [0.0; 3];
            for (j, a) in aux.iter().enumerate() {
                buf[j] = a.get(i, k);
            }
            buf
        };
        par::fill(exec, y.node_mut(k), |i| f.y(xk[i], &vals(i)[..aux.len()]));
        par::fill(exec, z.node_mut(k), |i| f.z(xk[i], &vals(i)[..aux.len()], s));
    }
    PathBundle { grid, x: x.clone(), y, z, db: db.clone() }
}

/// The map `Φ: (x, y) ↦ (X, Y)`: solves the `λ0` system with the frozen
/// input entering through `δ(G(x, y) + κy)` and `δ(F(x, y) − κx)`.
#[allow(clippy::too_many_arguments)]
pub fn frozen_map_phi(
    problem: &GeneralFbsdeProblem,
    frozen: (&PathMatrix, &PathMatrix),
    lambda0: f64,
    delta: f64,
    phi: Option<&PathMatrix>,
    psi: Option<&PathMatrix>,
    db: &Increments,
    config: &SolverConfig,
    warm: Option<&[NodeFit]>,
) -> Result<LevelSolution> {
    if !(0.0..1.0).contains(&lambda0) {
        return Err(Error::invalid("lambda0 must lie in [0, 1)"));
    }
    if !(0.0..=problem.delta0() + 1e-12).contains(&delta) || lambda0 + delta > 1.0 + 1e-12 {
        return Err(Error::invalid(format!("delta must lie in [0, {}]", problem.delta0())));
    }
    let (fx, fy) = frozen;
    let (n, nodes) = (problem.particles(), config.grid.nodes());
    if fx.particles() != n || fy.particles() != n || fx.nodes() != nodes || fy.nodes() != nodes {
        return Err(Error::invalid("frozen paths do not match the problem and grid"));
    }
    let exec = config.exec;
    let zero_a = vec![0.0; n];
    let kappa = problem.kappa;
    let mut phi_s = PathMatrix::zeros(n, nodes);
    let mut psi_s = PathMatrix::zeros(n, nodes);
    for k in 0..nodes {
        let t = config.grid.t(k);
        let a = problem.a_node(k).unwrap_or(&zero_a);
        let (xk, yk) = (fx.node(k), fy.node(k));
        let law = problem.node_law(exec, xk, a)?;
        let (p0, q0) = (phi.map(|p| p.node(k)), psi.map(|p| p.node(k)));
        par::fill(exec, phi_s.node_mut(k), |i| {
            delta * ((problem.g)(t, xk[i], yk[i], a[i], &law) + kappa * yk[i]) + p0.map_or(0.0, |p| p[i])
        });
        par::fill(exec, psi_s.node_mut(k), |i| {
            delta * ((problem.f)(t, xk[i], yk[i], a[i], &law) - kappa * xk[i]) + q0.map_or(0.0, |p| p[i])
        });
    }
    solve_level(problem, lambda0, Some(&phi_s), Some(&psi_s), db, config, warm)
}

/// Explicit solution of the `λ = 0` system without sources:
/// `Y = X`, `Z = σ`, with `X` an Ornstein–Uhlenbeck process of rate `κ`.
pub fn base_solution(problem: &GeneralFbsdeProblem, db: &Increments, grid: TimeGrid) -> PathBundle {
    let (n, m) = (problem.particles(), grid.steps());
    let mut x = PathMatrix::zeros(n, m + 1);
    x.node_mut(0).copy_from_slice(&problem.xi);
    let decay = 1.0 - problem.kappa * grid.dt();
    for k in 0..m {
        let dbk = db.node(k);
        let (cur, next) = x.step_pair(k);
        for i in 0..n {
            next[i] = decay * cur[i] + problem.sigma * dbk[i];
        }
    }
    let mut z = PathMatrix::zeros(n, m + 1);
    for k in 0..=m {
        z.node_mut(k).fill(problem.sigma);
    }
    PathBundle { grid, y: x.clone(), x, z, db: db.clone() }
}

/// Per-step record of a continuation solve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuationStep {
    pub lambda: f64,
    /// `‖Φ(u_n) − u_n‖_K` per outer iteration.
    pub residuals: Vec<f64>,
    pub inner_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct ContinuationResult {
    pub bundle: PathBundle,
    pub fields: Vec<NodeFit>,
    pub ladder: Vec<f64>,
    pub steps: Vec<ContinuationStep>,
}

/// Walks the λ ladder from the explicit `λ = 0` solution to `λ = 1`,
/// iterating `Φ` to its fixed point on each step.
pub fn continuation_solve(problem: &GeneralFbsdeProblem, config: &SolverConfig, db: &Increments) -> Result<ContinuationResult> {
    config.validate()?;
    let ladder = lambda_ladder(problem, config)?;
    let grid = config.grid;
    let k_norm = problem.k;
    let mut current = base_solution(problem, db, grid);
    let mut fields: Option<Vec<NodeFit>> = None;
    let mut lambda0 = 0.0;
    let mut steps = Vec::with_capacity(ladder.len());
    for &lambda1 in &ladder {
        let delta = lambda1 - lambda0;
        let mut residuals = Vec::new();
        let mut inner = 0;
        let mut converged = false;
        for _ in 0..config.max_iters {
            let out = frozen_map_phi(
                problem,
                (&current.x, &current.y),
                lambda0,
                delta.min(problem.delta0()),
                None,
                None,
                db,
                config,
                fields.as_deref(),
            )?;
            inner += out.diagnostics.iterations;
            let d = path_distance_sq(config.exec, &out.bundle.x, &current.x, k_norm, &grid)
                + path_distance_sq(config.exec, &out.bundle.y, &current.y, k_norm, &grid);
            residuals.push(d.sqrt());
            current = out.bundle;
            fields = Some(out.fields);
            if d.sqrt() < config.picard_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                stage: format!("continuation step λ={lambda1}"),
                iterations: residuals.len(),
                residuals,
            });
        }
        steps.push(ContinuationStep { lambda: lambda1, residuals, inner_iterations: inner });
        lambda0 = lambda1;
    }
    let fields = fields.unwrap_or_default();
    Ok(ContinuationResult { bundle: current, fields, ladder, steps })
}

/// One empirical contraction measurement of `Φ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContractionSample {
    pub input_dist_sq: f64,
    pub output_dist_sq: f64,
    pub ratio: f64,
}

/// `‖Φ(u) − Φ(u′)‖²_K / ‖u − u′‖²_K` under common noise.
#[allow(clippy::too_many_arguments)]
pub fn contraction_ratio(
    problem: &GeneralFbsdeProblem,
    u: (&PathMatrix, &PathMatrix),
    u2: (&PathMatrix, &PathMatrix),
    lambda0: f64,
    delta: f64,
    db: &Increments,
    config: &SolverConfig,
    warm: Option<&[NodeFit]>,
) -> Result<ContractionSample> {
    let e = config.exec;
    let g = &config.grid;
    let k = problem.k;
    let input = path_distance_sq(e, u.0, u2.0, k, g) + path_distance_sq(e, u.1, u2.1, k, g);
    let a = frozen_map_phi(problem, u, lambda0, delta, None, None, db, config, warm)?;
    let b = frozen_map_phi(problem, u2, lambda0, delta, None, None, db, config, Some(&a.fields))?;
    let output = path_distance_sq(e, &a.bundle.x, &b.bundle.x, k, g) + path_distance_sq(e, &a.bundle.y, &b.bundle.y, k, g);
    Ok(ContractionSample { input_dist_sq: input, output_dist_sq: output, ratio: output / input })
}

/// Random frozen input built from smooth functions of `(ξ, t)`:
/// `x = a·ξ·e^{−bt} + c·sin(ωt)`, `y = d·ξ·e^{−b′t} + e·cos(ω′t)`.
pub fn random_frozen_input(xi: &[f64], grid: &TimeGrid, seed: u64) -> (PathMatrix, PathMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let (a, b, c, w) = (draw(-2.0, 2.0), draw(0.05, 1.0), draw(-1.0, 1.0), draw(0.1, 2.0));
    let (d, b2, e, w2) = (draw(-2.0, 2.0), draw(0.05, 1.0), draw(-1.0, 1.0), draw(0.1, 2.0));
    let (n, nodes) = (xi.len(), grid.nodes());
    let mut x = PathMatrix::zeros(n, nodes);
    let mut y = PathMatrix::zeros(n, nodes);
    for k in 0..nodes {
        let t = grid.t(k);
        let (ex, ey, sx, cy) = ((-b * t).exp(), (-b2 * t).exp(), c * (w * t).sin(), e * (w2 * t).cos());
        for (i, &s) in xi.iter().enumerate() {
            x.node_mut(k)[i] = a * s * ex + sx;
            y.node_mut(k)[i] = d * s * ey + cy;
        }
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lq_riccati;
    use crate::paths::{particle_rng, sample_brownian};
    use crate::solver::ls_slope;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| particle_rng(seed, i).sample(StandardNormal)).collect()
    }

    fn setup(n: usize, t: f64, dt: f64) -> (GeneralFbsdeProblem, SolverConfig, Increments) {
        let grid = TimeGrid::new(t, dt).unwrap();
        let problem = GeneralFbsdeProblem::lq_cast(1.0, 0.25, 0.1, normals(n, 11)).unwrap();
        let cfg = SolverConfig::new(grid, n, 5);
        let db = sample_brownian(&grid, n, 5).unwrap();
        (problem, cfg, db)
    }

    #[test]
    fn step_bound_examples() {
        assert!((delta0(1.0, 0.1, 0.5).unwrap() - 1.9 / 8.5).abs() < 1e-12);
        assert!((delta0(2.0, 1.0, 1.0).unwrap() - 3.0 / 17.0).abs() < 1e-12);
        assert!(matches!(delta0(0.5, 1.0, 1.0), Err(Error::InvalidConstants { .. })));
        assert!(delta0(1.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn ladder_lengths() {
        let (mut p, mut cfg, _) = setup(10, 1.0, 0.1);
        p.kappa = 10.0;
        p.ell = 0.5;
        assert_eq!(lambda_ladder(&p, &cfg).unwrap().len(), 2);
        p.ell = 1.1;
        p.kappa = 1.0;
        assert_eq!(lambda_ladder(&p, &cfg).unwrap().len(), 8);
        cfg.lambda_steps = Some(vec![0.5, 1.0]);
        assert!(lambda_ladder(&p, &cfg).is_err());
        cfg.lambda_steps = Some((1..=8).map(|j| j as f64 / 8.0).collect());
        assert_eq!(lambda_ladder(&p, &cfg).unwrap().len(), 8);
    }

    #[test]
    fn construction_checks_constants() {
        let g: Coefficient = Arc::new(|_, _, y, _, _: &NodeLaw| -y);
        let err = GeneralFbsdeProblem::new(g.clone(), g, 1.0, None, 1.0, 1.0, 0.5, vec![0.0]);
        assert!(matches!(err, Err(Error::InvalidConstants { .. })));
    }

    #[test]
    fn lq_cast_constants() {
        let p = GeneralFbsdeProblem::lq_cast(1.0, 0.25, 0.1, vec![0.0; 4]).unwrap();
        assert_eq!(p.kappa, 1.0);
        assert!((p.ell - 1.1).abs() < 1e-15);
        assert!((p.delta0() - 1.9 / 15.1).abs() < 1e-12);
    }

    #[test]
    fn base_solution_is_explicit() {
        let (p, cfg, db) = setup(500, 20.0, 0.05);
        let b = base_solution(&p, &db, cfg.grid);
        assert_eq!(b.x, b.y);
        // With Y_T = 0 the truncated solution is Y = tanh(κ(T − t))·X.
        let lvl = solve_level(&p, 0.0, None, None, &db, &cfg, None).unwrap();
        for k in [0, 100, 200] {
            let want = (p.kappa * (cfg.grid.horizon() - cfg.grid.t(k))).tanh();
            let got = ls_slope(lvl.bundle.x.node(k), lvl.bundle.y.node(k)).unwrap();
            assert!((got - want).abs() < 0.02, "node {k}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_delta_ignores_frozen_input() {
        let (p, cfg, db) = setup(300, 4.0, 0.05);
        let (x1, y1) = random_frozen_input(&p.xi, &cfg.grid, 1);
        let (x2, y2) = random_frozen_input(&p.xi, &cfg.grid, 2);
        let a = frozen_map_phi(&p, (&x1, &y1), 0.5, 0.0, None, None, &db, &cfg, None).unwrap();
        let b = frozen_map_phi(&p, (&x2, &y2), 0.5, 0.0, None, None, &db, &cfg, None).unwrap();
        let d = path_distance_sq(Exec::Parallel, &a.bundle.y, &b.bundle.y, p.k, &cfg.grid);
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn frozen_map_contracts_on_lq_cast() {
        let (p, cfg, db) = setup(400, 8.0, 0.05);
        let (x1, y1) = random_frozen_input(&p.xi, &cfg.grid, 3);
        let (x2, y2) = random_frozen_input(&p.xi, &cfg.grid, 4);
        let s = contraction_ratio(&p, (&x1, &y1), (&x2, &y2), 0.0, p.delta0(), &db, &cfg, None).unwrap();
        assert!(s.ratio < 0.5, "{s:?}");
    }

    #[test]
    fn fixed_point_is_reproduced() {
        let (p, mut cfg, db) = setup(300, 4.0, 0.05);
        cfg.picard_tol = 1e-6;
        cfg.max_iters = 200;
        let lvl = solve_level(&p, 0.5, None, None, &db, &cfg, None).unwrap();
        let out = frozen_map_phi(&p, (&lvl.bundle.x, &lvl.bundle.y), 0.5, 0.0, None, None, &db, &cfg, Some(&lvl.fields)).unwrap();
        let d = path_distance_sq(Exec::Parallel, &out.bundle.y, &lvl.bundle.y, p.k, &cfg.grid);
        assert!(d.sqrt() < 1e-4, "{d}");
    }

    #[test]
    fn continuation_recovers_riccati_slope() {
        let (p, mut cfg, db) = setup(1500, 20.0, 0.05);
        cfg.picard_tol = 1e-3;
        let out = continuation_solve(&p, &cfg, &db).unwrap();
        assert_eq!(out.ladder.len(), 8);
        let (pp, _) = lq_riccati(1.0, 0.25, 0.1).unwrap();
        let slope = ls_slope(&p.xi, out.bundle.y.node(0)).unwrap();
        assert!((slope / pp - 1.0).abs() < 0.03, "{slope} vs {pp}");
    }
}
