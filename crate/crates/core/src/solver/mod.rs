//! Equilibrium and representative-player solvers.
//!
//! Both systems are solved by Picard iteration on the decoupling field:
//! a forward Euler pass under the current field `y = u(t_k, x)`, then a
//! backward least-squares pass that refits `u` node by node. In the
//! equilibrium solve the measure flow is re-estimated from the forward
//! particles after every pass; the representative solve keeps it frozen.
//! Field and flow updates are relaxed with the damping factor θ.

mod general;

pub use general::{
    base_solution, contraction_ratio, continuation_solve, delta0, frozen_map_phi, lambda_ladder,
    random_frozen_input, solve_level, Coefficient, ContinuationResult, ContinuationStep,
    ContractionSample, GeneralFbsdeProblem, LevelSolution, NodeLaw,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::model::{HamiltonianModel, LawDependence};
use crate::par::{self, Exec};
use crate::paths::{
    discounted_integral, sample_brownian_with, Increments, PathMatrix, SeriesRow, TimeGrid,
};
use crate::regression::{chain_std_err, fit_node, Design, NodeFit};

/// How the backward pass is closed at the truncation horizon.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    /// `Y_T = 0`.
    #[default]
    Zero,
    /// Solve once with `Y_T = 0`, then re-solve with `Y_T = u(T/2, X_T)`
    /// from the first solve, emulating a stationary tail.
    Bootstrap,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverConfig {
    pub grid: TimeGrid,
    pub particles: usize,
    pub seed: u64,
    pub basis_degree: usize,
    pub picard_tol: f64,
    pub max_iters: usize,
    /// Relaxation θ ∈ (0, 1] for field and flow updates.
    pub damping: f64,
    pub lambda_steps: Option<Vec<f64>>,
    pub terminal: TerminalMode,
    /// Norm weight `K`; `None` means the model's discount `r`.
    pub norm_k: Option<f64>,
    /// Cap on the particles averaged in non-separable `Ẽ`-terms.
    pub tilde_subsample: usize,
    pub exec: Exec,
}

impl SolverConfig {
    pub fn new(grid: TimeGrid, particles: usize, seed: u64) -> Self {
        Self {
            grid,
            particles,
            seed,
            basis_degree: 3,
            picard_tol: 1e-4,
            max_iters: 60,
            damping: 0.5,
            lambda_steps: None,
            terminal: TerminalMode::Zero,
            norm_k: None,
            tilde_subsample: 10_000,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.picard_tol > 0.0) {
            return Err(Error::invalid("picard_tol must be positive"));
        }
        if self.particles < self.basis_degree + 2 {
            return Err(Error::invalid(format!(
                "need at least basis_degree + 2 = {} particles",
                self.basis_degree + 2
            )));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid("damping must lie in (0, 1]"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be positive"));
        }
        if let Some(k) = self.norm_k {
            if !(k > 0.0) {
                return Err(Error::invalid("norm weight K must be positive"));
            }
        }
        if self.tilde_subsample == 0 {
            return Err(Error::invalid("tilde_subsample must be positive"));
        }
        Ok(())
    }

    pub fn norm_weight(&self, r: f64) -> f64 {
        self.norm_k.unwrap_or(r)
    }
}

/// Per-node laws of the equilibrium state.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    laws: Vec<EmpiricalMeasure>,
}

impl Flow {
    pub fn from_laws(laws: Vec<EmpiricalMeasure>) -> Self {
        Self { laws }
    }

    /// Law of every column of `x`. First-moment models get a Dirac at the
    /// column mean, which is all they read.
    pub fn from_paths(exec: Exec, x: &PathMatrix, dep: LawDependence) -> Result<Self> {
        (0..x.nodes())
            .map(|k| column_law(exec, x.node(k), dep))
            .collect::<Result<Vec<_>>>()
            .map(Self::from_laws)
    }

    pub fn law(&self, k: usize) -> &EmpiricalMeasure {
        &self.laws[k]
    }

    pub fn len(&self) -> usize {
        self.laws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.laws.is_empty()
    }

    pub fn means(&self) -> Vec<f64> {
        self.laws.iter().map(|l| l.mean()).collect()
    }

    /// `θ·new + (1−θ)·self`, mixing quantile functions node by node.
    pub fn blend(&self, new: &Flow, theta: f64) -> Result<Flow> {
        self.laws
            .iter()
            .zip(&new.laws)
            .map(|(old, new)| comonotone_mix(old, new, theta))
            .collect::<Result<Vec<_>>>()
            .map(Self::from_laws)
    }
}

pub(crate) fn column_law(exec: Exec, col: &[f64], dep: LawDependence) -> Result<EmpiricalMeasure> {
    match dep {
        LawDependence::FirstMoment => {
            Ok(EmpiricalMeasure::dirac(par::mean_of(exec, col.len(), |i| col[i])))
        }
        LawDependence::Full => {
            let mut atoms = col.to_vec();
            atoms.sort_by(f64::total_cmp);
            EmpiricalMeasure::uniform(atoms)
        }
    }
}

/// Comonotone mixture: atoms at matching quantile levels are averaged.
pub fn comonotone_mix(old: &EmpiricalMeasure, new: &EmpiricalMeasure, theta: f64) -> Result<EmpiricalMeasure> {
    let mix = |a: f64, b: f64| theta * b + (1.0 - theta) * a;
    if old.len() == 1 && new.len() == 1 {
        return Ok(EmpiricalMeasure::dirac(mix(old.atoms()[0], new.atoms()[0])));
    }
    if old.is_uniform() && new.is_uniform() && old.len() == new.len() {
        let a = old.sorted();
        let b = new.sorted();
        return EmpiricalMeasure::uniform(a.iter().zip(&b).map(|(u, v)| mix(u.0, v.0)).collect());
    }
    let a = old.sorted();
    let b = new.sorted();
    let (mut i, mut j) = (0, 0);
    let (mut ca, mut cb) = (a[0].1, b[0].1);
    let mut u = 0.0;
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    while i < a.len() && j < b.len() {
        let next = ca.min(cb);
        if next > u {
            atoms.push(mix(a[i].0, b[j].0));
            weights.push(next - u);
        }
        u = next;
        if ca <= next {
            i += 1;
            if i < a.len() {
                ca += a[i].1;
            }
        }
        if cb <= next {
            j += 1;
            if j < b.len() {
                cb += b[j].1;
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    EmpiricalMeasure::weighted(atoms, weights)
}

/// Iteration history of a Picard solve.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub iterations: usize,
    /// `sqrt(‖ΔX‖²_K + ‖ΔY‖²_K)` per iteration.
    pub residuals: Vec<f64>,
    /// Successive residual ratios.
    pub contraction_ratios: Vec<f64>,
    /// Geometric decay rate fitted to the residuals after the first.
    pub fitted_ratio: Option<f64>,
    pub converged: bool,
}

impl Diagnostics {
    pub(crate) fn from_residuals(residuals: Vec<f64>, converged: bool) -> Self {
        let ratios = residuals
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
            .collect();
        Self {
            iterations: residuals.len(),
            fitted_ratio: geometric_rate(&residuals[residuals.len().min(1)..]),
            contraction_ratios: ratios,
            residuals,
            converged,
        }
    }

    fn append(&mut self, other: Diagnostics) {
        let mut all = std::mem::take(&mut self.residuals);
        all.extend(other.residuals);
        *self = Diagnostics::from_residuals(all, other.converged);
    }
}

/// Least-squares slope of `log r_n` against `n`, exponentiated.
pub fn geometric_rate(res: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = res
        .iter()
        .enumerate()
        .filter(|(_, r)| **r > 0.0 && r.is_finite())
        .map(|(i, r)| (i as f64, r.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

/// Dense `(X, Y, Z)` paths with their Brownian increments.
#[derive(Clone, Debug)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub x: PathMatrix,
    pub y: PathMatrix,
    pub z: PathMatrix,
    pub db: Increments,
}

impl PathBundle {
    pub fn series(&self, exec: Exec) -> Vec<SeriesRow> {
        (0..self.grid.nodes())
            .map(|k| {
                let (x, y, z) = (self.x.node(k), self.y.node(k), self.z.node(k));
                let n = x.len();
                let mx = par::mean_of(exec, n, |i| x[i]);
                SeriesRow {
                    t: self.grid.t(k),
                    mean_x: mx,
                    var_x: par::mean_of(exec, n, |i| (x[i] - mx).powi(2)),
                    mean_y: par::mean_of(exec, n, |i| y[i]),
                    mean_z: par::mean_of(exec, n, |i| z[i]),
                }
            })
            .collect()
    }
}

/// Forward paths plus fitted decoupling field; `Y` and `Z` are evaluated
/// from the field on demand rather than stored.
#[derive(Clone, Debug)]
pub struct FieldPaths {
    pub grid: TimeGrid,
    pub x: PathMatrix,
    pub fields: Vec<NodeFit>,
    pub db: Increments,
}

impl FieldPaths {
    pub fn y(&self, i: usize, k: usize) -> f64 {
        self.fields[k].y(self.x.get(i, k), &[])
    }

    pub fn z(&self, i: usize, k: usize) -> f64 {
        self.fields[k].z(self.x.get(i, k), &[], self.db.sqrt_dt())
    }

    pub fn particles(&self) -> usize {
        self.x.particles()
    }

    pub fn y_node(&self, exec: Exec, k: usize) -> Vec<f64> {
        let x = self.x.node(k);
        let f = &self.fields[k];
        let mut out = vec![0.0; x.len()];
        par::fill(exec, &mut out, |i| f.y(x[i], &[]));
        out
    }

    pub fn z_node(&self, exec: Exec, k: usize) -> Vec<f64> {
        let x = self.x.node(k);
        let f = &self.fields[k];
        let s = self.db.sqrt_dt();
        let mut out = vec![0.0; x.len()];
        par::fill(exec, &mut out, |i| f.z(x[i], &[], s));
        out
    }

    /// Materializes `Y` and `Z` (memory `3·N·(M+1)` reals).
    pub fn bundle(&self, exec: Exec) -> PathBundle {
        let (n, m) = (self.x.particles(), self.x.nodes());
        let mut y = PathMatrix::zeros(n, m);
        let mut z = PathMatrix::zeros(n, m);
        for k in 0..m {
            y.node_mut(k).copy_from_slice(&self.y_node(exec, k));
            z.node_mut(k).copy_from_slice(&self.z_node(exec, k));
        }
        PathBundle { grid: self.grid, x: self.x.clone(), y, z, db: self.db.clone() }
    }

    pub fn series(&self, exec: Exec) -> Vec<SeriesRow> {
        (0..self.grid.nodes())
            .map(|k| {
                let x = self.x.node(k);
                let n = x.len();
                let f = &self.fields[k];
                let s = self.db.sqrt_dt();
                let mx = par::mean_of(exec, n, |i| x[i]);
                SeriesRow {
                    t: self.grid.t(k),
                    mean_x: mx,
                    var_x: par::mean_of(exec, n, |i| (x[i] - mx).powi(2)),
                    mean_y: par::mean_of(exec, n, |i| f.y(x[i], &[])),
                    mean_z: par::mean_of(exec, n, |i| f.z(x[i], &[], s)),
                }
            })
            .collect()
    }

    /// Standard error of the node-0 field from the chain of regressions.
    pub fn y0_std_err(&self, r: f64) -> f64 {
        chain_std_err(&self.fields, r, self.grid.dt())
    }
}

/// Solved equilibrium system.
#[derive(Clone, Debug)]
pub struct EquilibriumSolution {
    pub paths: FieldPaths,
    pub flow: Flow,
    pub xi: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub config: SolverConfig,
    pub model: Arc<dyn HamiltonianModel>,
}

impl EquilibriumSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.paths.grid
    }

    /// `Y_0` per particle.
    pub fn y0(&self) -> Vec<f64> {
        self.paths.y_node(self.config.exec, 0)
    }

    /// Least-squares slope of `Y_0` against `X_0`.
    pub fn y0_slope(&self) -> Option<f64> {
        ls_slope(&self.xi, &self.y0())
    }

    pub fn mean_y(&self, k: usize) -> f64 {
        let y = self.paths.y_node(self.config.exec, k);
        y.iter().sum::<f64>() / y.len() as f64
    }
}

pub fn ls_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Solved representative-player system at initial point `x0`.
#[derive(Clone, Debug)]
pub struct RepresentativeSolution {
    pub x0: f64,
    pub paths: FieldPaths,
    /// `𝒱(x0, μ) = Y_0^{x0,ξ}`.
    pub y0: f64,
    pub y0_std_err: f64,
    pub diagnostics: Diagnostics,
}

struct PicardRun<'a> {
    model: &'a dyn HamiltonianModel,
    grid: TimeGrid,
    db: &'a Increments,
    cfg: &'a SolverConfig,
    frozen: Option<&'a Flow>,
    terminal: &'a NodeFit,
}

struct PicardState {
    x: PathMatrix,
    fields: Vec<NodeFit>,
    flow: Option<Flow>,
}

impl PicardRun<'_> {
    fn law<'s>(&'s self, state: &'s PicardState, live: &'s Option<EmpiricalMeasure>, k: usize) -> &'s EmpiricalMeasure {
        match (self.frozen, &state.flow, live) {
            (Some(f), _, _) => f.law(k),
            (None, Some(f), _) => f.law(k),
            (None, None, Some(l)) => l,
            _ => unreachable!("first pass always has a live law"),
        }
    }

    /// Runs Picard to convergence; `state` holds the warm start.
    fn run(&self, state: &mut PicardState, fresh_start: bool) -> Result<Diagnostics> {
        let exec = self.cfg.exec;
        let model = self.model;
        let grid = self.grid;
        let m = grid.steps();
        let dt = grid.dt();
        let r = model.r();
        let k_norm = self.cfg.norm_weight(r);
        let theta = self.cfg.damping;
        let dep = model.law_dependence();
        let mut residuals = Vec::new();
        state.fields[m] = self.terminal.clone();

        for iter in 0..self.cfg.max_iters {
            // Forward Euler under the current field.
            let mut dx2 = vec![0.0; m + 1];
            let mut new_laws = Vec::with_capacity(m + 1);
            for k in 0..m {
                let live = if self.frozen.is_none() && state.flow.is_none() {
                    Some(column_law(exec, state.x.node(k), dep)?)
                } else {
                    None
                };
                if self.frozen.is_none() {
                    new_laws.push(match &live {
                        Some(l) => l.clone(),
                        None => column_law(exec, state.x.node(k), dep)?,
                    });
                }
                let law = self.law(state, &live, k).clone();
                let field = &state.fields[k];
                let dbk = self.db.node(k);
                let (cur, next) = state.x.step_pair(k);
                dx2[k + 1] = par::update_reduce(
                    exec,
                    next,
                    0.0,
                    |off, chunk| {
                        let mut acc = 0.0;
                        for (j, v) in chunk.iter_mut().enumerate() {
                            let i = off + j;
                            let xi = cur[i];
                            let y = field.y(xi, &[]);
                            let nv = xi + model.dh_y(xi, &law, y) * dt + dbk[i];
                            acc += (nv - *v) * (nv - *v);
                            *v = nv;
                        }
                        acc
                    },
                    |a, b| a + b,
                ) / state.x.particles() as f64;
            }
            if self.frozen.is_none() {
                new_laws.push(column_law(exec, state.x.node(m), dep)?);
                let new_flow = Flow::from_laws(new_laws);
                state.flow = Some(match state.flow.take() {
                    Some(old) if !(fresh_start && iter == 0) => old.blend(&new_flow, theta)?,
                    _ => new_flow,
                });
            }

            // Backward regression pass.
            let n = state.x.particles();
            let mut dy2 = vec![0.0; m + 1];
            let mut y_next = vec![0.0; n];
            {
                let xm = state.x.node(m);
                let f = &state.fields[m];
                par::fill(exec, &mut y_next, |i| f.y(xm[i], &[]));
            }
            let mut target = vec![0.0; n];
            let relax = if fresh_start && iter == 0 { 1.0 } else { theta };
            for k in (0..m).rev() {
                let empty = None;
                let law = self.law(state, &empty, k);
                let xk = state.x.node(k);
                par::fill(exec, &mut target, |i| {
                    let y = y_next[i];
                    y + dt * (model.dh_x(xk[i], law, y) - r * y)
                });
                let design = Design {
                    x: xk,
                    aux: &[],
                    db: Some(self.db.node(k)),
                    sqrt_dt: self.db.sqrt_dt(),
                    degree: self.cfg.basis_degree,
                };
                let fit = fit_node(exec, &design, &target, k)?;
                let blended = fit.blend(&state.fields[k], relax);
                let old = &state.fields[k];
                dy2[k] = par::mean_of(exec, n, |i| (blended.y(xk[i], &[]) - old.y(xk[i], &[])).powi(2));
                par::fill(exec, &mut y_next, |i| fit.y(xk[i], &[]));
                state.fields[k] = blended;
            }

            let res = (discounted_integral(&dx2, k_norm, &grid) + discounted_integral(&dy2, k_norm, &grid)).sqrt();
            if !res.is_finite() {
                return Err(Error::NoConvergence {
                    stage: "picard".into(),
                    iterations: iter + 1,
                    residuals: { residuals.push(res); residuals },
                });
            }
            residuals.push(res);
            if (iter > 0 || !fresh_start) && res < self.cfg.picard_tol {
                return Ok(Diagnostics::from_residuals(residuals, true));
            }
        }
        Err(Error::NoConvergence {
            stage: if self.frozen.is_some() { "representative".into() } else { "equilibrium".into() },
            iterations: residuals.len(),
            residuals,
        })
    }
}

fn initial_paths(x0: &[f64], nodes: usize) -> PathMatrix {
    let mut x = PathMatrix::zeros(x0.len(), nodes);
    x.node_mut(0).copy_from_slice(x0);
    x
}

/// Solves the equilibrium system with `X_0 = ξ` (one particle per sample).
pub fn solve_equilibrium(
    model: Arc<dyn HamiltonianModel>,
    xi_samples: &[f64],
    config: &SolverConfig,
) -> Result<EquilibriumSolution> {
    config.validate()?;
    if xi_samples.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    if xi_samples.len() != config.particles {
        return Err(Error::invalid(format!(
            "{} initial samples for {} particles",
            xi_samples.len(),
            config.particles
        )));
    }
    if xi_samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial samples must be finite"));
    }
    let grid = config.grid;
    let db = sample_brownian_with(&grid, config.particles, config.seed, config.exec)?;
    solve_equilibrium_with_noise(model, xi_samples, config, db)
}

/// Same as [`solve_equilibrium`] with caller-supplied increments.
pub fn solve_equilibrium_with_noise(
    model: Arc<dyn HamiltonianModel>,
    xi_samples: &[f64],
    config: &SolverConfig,
    db: Increments,
) -> Result<EquilibriumSolution> {
    config.validate()?;
    let grid = config.grid;
    let m = grid.steps();
    let deg = config.basis_degree;
    let zero = NodeFit::zero(deg, 0);
    let mut state = PicardState {
        x: initial_paths(xi_samples, m + 1),
        fields: vec![zero.clone(); m + 1],
        flow: None,
    };
    let run = PicardRun { model: model.as_ref(), grid, db: &db, cfg: config, frozen: None, terminal: &zero };
    let mut diagnostics = run.run(&mut state, true)?;

    if config.terminal == TerminalMode::Bootstrap {
        let tail = state.fields[m / 2].clone();
        let run = PicardRun { terminal: &tail, ..run };
        diagnostics.append(run.run(&mut state, false)?);
    }

    let flow = state.flow.take().expect("equilibrium solve keeps a flow");
    Ok(EquilibriumSolution {
        paths: FieldPaths { grid, x: state.x, fields: state.fields, db },
        flow,
        xi: xi_samples.to_vec(),
        diagnostics,
        config: config.clone(),
        model,
    })
}

/// Solves the representative system from `x0` under the frozen flow of `eq`,
/// driven by the same Brownian increments.
pub fn solve_representative(x0: f64, eq: &EquilibriumSolution) -> Result<RepresentativeSolution> {
    if !x0.is_finite() {
        return Err(Error::invalid("initial point must be finite"));
    }
    let cfg = &eq.config;
    let grid = eq.paths.grid;
    let m = grid.steps();
    let n = eq.paths.particles();
    // Warm start from the equilibrium field, which solves the same
    // frozen-law backward equation.
    let mut state = PicardState {
        x: initial_paths(&vec![x0; n], m + 1),
        fields: eq.paths.fields.clone(),
        flow: None,
    };
    let terminal = eq.paths.fields[m].clone();
    let run = PicardRun {
        model: eq.model.as_ref(),
        grid,
        db: &eq.paths.db,
        cfg,
        frozen: Some(&eq.flow),
        terminal: &terminal,
    };
    let diagnostics = run.run(&mut state, false)?;
    let paths = FieldPaths { grid, x: state.x, fields: state.fields, db: eq.paths.db.clone() };
    let y0 = paths.fields[0].y(x0, &[]);
    let y0_std_err = paths.y0_std_err(eq.model.r());
    Ok(RepresentativeSolution { x0, paths, y0, y0_std_err, diagnostics })
}

/// Discounted value along representative paths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub value: f64,
    /// Quadrature over `[0, T]` only.
    pub truncated: f64,
    /// Added estimate of `∫_T^∞`, from the mean running cost on `[T/2, 3T/4]`.
    pub tail_correction: f64,
    /// `e^{−rT}/r · sup_{t ≥ T/2} |E F_t|`.
    pub tail_bound: f64,
}

/// `V(x, μ) = E∫ e^{−rt} F(X^{x,ξ}_t, ℒ_{X^ξ_t}, Y^{x,ξ}_t) dt`.
pub fn value_v(eq: &EquilibriumSolution, rep: &RepresentativeSolution) -> Result<ValueEstimate> {
    let exec = eq.config.exec;
    let model = eq.model.as_ref();
    let p = &rep.paths;
    let per_node: Vec<f64> = (0..p.grid.nodes())
        .map(|k| {
            let law = eq.flow.law(k);
            let x = p.x.node(k);
            let f = &p.fields[k];
            par::mean_of(exec, x.len(), |i| {
                let y = f.y(x[i], &[]);
                model.running_cost_f(x[i], law, y)
            })
        })
        .collect();
    Ok(discounted_with_tail(&per_node, model.r(), &p.grid))
}

/// Discounted integral of per-node means plus the stationary tail estimate.
pub fn discounted_with_tail(per_node: &[f64], r: f64, grid: &TimeGrid) -> ValueEstimate {
    let truncated = discounted_integral(per_node, r, grid);
    let m = grid.steps();
    let window = &per_node[m / 2..=(3 * m / 4).max(m / 2)];
    let level = window.iter().sum::<f64>() / window.len() as f64;
    let decay = (-r * grid.horizon()).exp() / r;
    let sup = per_node[m / 2..].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    ValueEstimate {
        value: truncated + decay * level,
        truncated,
        tail_correction: decay * level,
        tail_bound: decay * sup,
    }
}
