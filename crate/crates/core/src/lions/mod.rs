//! Derivatives in the measure argument: the variational systems along an
//! equilibrium, the discrete-atom and continuous `∇`-systems giving
//! `∂μ𝒱(x, μ, x̃)`, and finite-difference cross-checks.

mod engine;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{HamiltonianModel, MuDerivative};
use crate::par;
use crate::paths::{PathMatrix, TimeGrid};
use crate::regression::chain_std_err;
use crate::solver::{
    discounted_with_tail, solve_equilibrium, solve_representative, Diagnostics, EquilibriumSolution,
    RepresentativeSolution, SolverConfig, ValueEstimate,
};
use engine::{prepare_tilde, Component, ComponentSolution, LinearSystem, Source, SourceView, Track};

use std::sync::Arc;

/// Solution `(δX, δY, δZ)` of a linear variational system along a frozen
/// base; `δY` and `δZ` are evaluated from the fitted field.
#[derive(Clone, Debug)]
pub struct VariationalBundle {
    pub dx: PathMatrix,
    pub dy: PathMatrix,
    pub dz: PathMatrix,
    /// Initial values `δX_0`.
    pub eta: Vec<f64>,
    pub diagnostics: Diagnostics,
    /// Standard error of the node-0 field from the regression chain.
    pub y0_std_err: f64,
}

impl VariationalBundle {
    fn from_solution(sol: ComponentSolution, eq: &EquilibriumSolution, diagnostics: Diagnostics) -> Self {
        let y0_std_err = chain_std_err(&sol.fields, eq.model.r(), eq.grid().dt());
        Self { eta: sol.dx.node(0).to_vec(), dx: sol.dx, dy: sol.dy, dz: sol.dz, diagnostics, y0_std_err }
    }

    /// Mean of `δY_0`; for representative systems every particle agrees.
    pub fn dy0(&self) -> f64 {
        let y = self.dy.node(0);
        y.iter().sum::<f64>() / y.len() as f64
    }
}

fn eq_track(eq: &EquilibriumSolution) -> Track<'_> {
    Track { x: &eq.paths.x, fields: &eq.paths.fields }
}

fn rep_track(rep: &RepresentativeSolution) -> Track<'_> {
    Track { x: &rep.paths.x, fields: &rep.paths.fields }
}

fn system<'a>(eq: &'a EquilibriumSolution, components: Vec<Component<'a>>) -> LinearSystem<'a> {
    LinearSystem {
        model: eq.model.as_ref(),
        flow: &eq.flow,
        db: &eq.paths.db,
        grid: *eq.grid(),
        config: &eq.config,
        components,
    }
}

fn check_rep(eq: &EquilibriumSolution, rep: &RepresentativeSolution) -> Result<()> {
    if rep.paths.x.particles() != eq.paths.x.particles() || rep.paths.grid != *eq.grid() {
        return Err(Error::invalid("representative solution is not on the equilibrium base"));
    }
    Ok(())
}

/// Variational system of the equilibrium in direction `η` (aligned with the
/// equilibrium particles).
pub fn solve_delta_equilibrium(eq: &EquilibriumSolution, eta: &[f64]) -> Result<VariationalBundle> {
    if eta.len() != eq.paths.particles() {
        return Err(Error::invalid("direction samples must align with the equilibrium particles"));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("direction samples must be finite"));
    }
    let comp = Component {
        track: eq_track(eq),
        dx0: eta.to_vec(),
        mask: None,
        sources: vec![(Source::Internal(0), 1.0)],
    };
    let (mut sols, diag) = system(eq, vec![comp]).solve("variational equilibrium")?;
    Ok(VariationalBundle::from_solution(sols.remove(0), eq, diag))
}

/// Variational system of the representative player; returns the bundle and
/// `δY_0^{x,ξ,η}`, the derivative of `𝒱(x, ·)` in direction `η`.
pub fn solve_delta_representative(
    eq: &EquilibriumSolution,
    rep: &RepresentativeSolution,
    delta_eq: &VariationalBundle,
) -> Result<(VariationalBundle, f64)> {
    check_rep(eq, rep)?;
    let n = eq.paths.particles();
    let comp = Component {
        track: rep_track(rep),
        dx0: vec![0.0; n],
        mask: None,
        sources: vec![(Source::External { x: &eq.paths.x, dx: &delta_eq.dx }, 1.0)],
    };
    let (mut sols, diag) = system(eq, vec![comp]).solve("variational representative")?;
    let b = VariationalBundle::from_solution(sols.remove(0), eq, diag);
    let dy0 = b.dy0();
    Ok((b, dy0))
}

/// Where a `∇`-system was seeded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NablaTag {
    Atom { atom: f64, probability: f64 },
    Point { xtilde: f64 },
}

/// The pair of `∇`-systems and their composite along the representative.
#[derive(Clone, Debug)]
pub struct NablaBundle {
    pub tag: NablaTag,
    /// Own-perturbation system, `∇X_0 = 1`.
    pub own: VariationalBundle,
    /// Star (discrete) or population (continuous) system, `∇X_0 = 0`.
    pub star: VariationalBundle,
    /// Composite `(∇μX, ∇μY, ∇μZ)` along the representative at `x`.
    pub total: VariationalBundle,
}

impl NablaBundle {
    pub fn value(&self) -> f64 {
        self.total.dy0()
    }
}

/// Distinct values of `samples` with their frequencies, sorted.
pub fn atoms_of(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for v in s {
        match out.last_mut() {
            Some((a, c)) if *a == v => *c += 1.0,
            _ => out.push((v, 1.0)),
        }
    }
    out.iter_mut().for_each(|(_, c)| *c /= n);
    out
}

/// Result of the discrete-atom computation.
#[derive(Clone, Debug)]
pub struct DiscreteNabla {
    pub nabla: NablaBundle,
    pub atom: f64,
    pub probability: f64,
    /// `∂μ𝒱(x, ℒ_ξ, x_i) = ∇μY_0^{x,ξ,x_i}`.
    pub dmu: f64,
    /// `δY_0^{x,ξ,1{ξ=x_i}}` from the variational systems, which should
    /// equal `p_i·dmu`.
    pub indicator_dy0: f64,
}

impl DiscreteNabla {
    pub fn relation_gap(&self) -> f64 {
        (self.indicator_dy0 - self.probability * self.dmu).abs()
    }
}

/// `∂μ𝒱(x, ℒ_ξ, x_i)` for the `atom_index`-th atom of a discrete `ξ`.
pub fn solve_nabla_discrete(
    eq: &EquilibriumSolution,
    rep_x: &RepresentativeSolution,
    atom_index: usize,
) -> Result<DiscreteNabla> {
    let atoms = atoms_of(&eq.xi);
    let &(atom, _) = atoms
        .get(atom_index)
        .ok_or_else(|| Error::invalid(format!("atom index {atom_index} out of {} atoms", atoms.len())))?;
    solve_nabla_at_atom(eq, rep_x, atom)
}

/// As [`solve_nabla_discrete`], addressing the atom by value.
pub fn solve_nabla_at_atom(eq: &EquilibriumSolution, rep_x: &RepresentativeSolution, atom: f64) -> Result<DiscreteNabla> {
    check_rep(eq, rep_x)?;
    let p = eq.xi.iter().filter(|v| **v == atom).count() as f64 / eq.xi.len() as f64;
    if p == 0.0 {
        return Err(Error::ZeroProbabilityAtom { atom });
    }
    let n = eq.paths.particles();
    let rep_atom_owned;
    let rep_atom = if rep_x.x0 == atom {
        rep_x
    } else {
        rep_atom_owned = solve_representative(atom, eq)?;
        &rep_atom_owned
    };
    let mask: Vec<f64> = eq.xi.iter().map(|v| if *v == atom { 0.0 } else { 1.0 }).collect();
    let own = Component {
        track: rep_track(rep_atom),
        dx0: vec![1.0; n],
        mask: None,
        sources: vec![(Source::Internal(0), p), (Source::Internal(1), p)],
    };
    let star = Component {
        track: eq_track(eq),
        dx0: vec![0.0; n],
        mask: Some(mask),
        sources: vec![(Source::Internal(0), 1.0), (Source::Internal(1), 1.0)],
    };
    let (mut parts, diag) = system(eq, vec![own, star]).solve("discrete nabla pair")?;
    let star_sol = parts.remove(1);
    let own_sol = parts.remove(0);
    let (own_dx, star_dx) = (own_sol.dx.clone(), star_sol.dx.clone());
    let total = Component {
        track: rep_track(rep_x),
        dx0: vec![0.0; n],
        mask: None,
        sources: vec![
            (Source::External { x: &rep_atom.paths.x, dx: &own_dx }, 1.0),
            (Source::External { x: &eq.paths.x, dx: &star_dx }, 1.0),
        ],
    };
    let (mut tot, tdiag) = system(eq, vec![total]).solve("discrete nabla composite")?;
    let total = VariationalBundle::from_solution(tot.remove(0), eq, tdiag);
    let own = VariationalBundle::from_solution(own_sol, eq, diag.clone());
    let star = VariationalBundle::from_solution(star_sol, eq, diag);

    let indicator: Vec<f64> = eq.xi.iter().map(|v| if *v == atom { 1.0 } else { 0.0 }).collect();
    let d_eq = solve_delta_equilibrium(eq, &indicator)?;
    let (_, indicator_dy0) = solve_delta_representative(eq, rep_x, &d_eq)?;

    let dmu = total.dy0();
    Ok(DiscreteNabla {
        nabla: NablaBundle { tag: NablaTag::Atom { atom, probability: p }, own, star, total },
        atom,
        probability: p,
        dmu,
        indicator_dy0,
    })
}

/// One value of the continuous Lions field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PsiPoint {
    pub xtilde: f64,
    pub psi: f64,
    pub std_err: f64,
}

/// `ψ(x, μ, x̃) = ∇μY_0^{x,ξ,x̃}` with its `∇`-systems.
pub fn psi_point(eq: &EquilibriumSolution, rep_x: &RepresentativeSolution, xtilde: f64) -> Result<NablaBundle> {
    check_rep(eq, rep_x)?;
    if !xtilde.is_finite() {
        return Err(Error::invalid("x̃ must be finite"));
    }
    let n = eq.paths.particles();
    let rep_owned;
    let rep_xt = if rep_x.x0 == xtilde {
        rep_x
    } else {
        rep_owned = solve_representative(xtilde, eq)?;
        &rep_owned
    };
    let pa1 = Component { track: rep_track(rep_xt), dx0: vec![1.0; n], mask: None, sources: vec![] };
    let (mut s1, d1) = system(eq, vec![pa1]).solve("seeded nabla")?;
    let own_sol = s1.remove(0);
    let pa2 = Component {
        track: eq_track(eq),
        dx0: vec![0.0; n],
        mask: None,
        sources: vec![(Source::External { x: &rep_xt.paths.x, dx: &own_sol.dx }, 1.0), (Source::Internal(0), 1.0)],
    };
    let (mut s2, d2) = system(eq, vec![pa2]).solve("population nabla")?;
    let star_sol = s2.remove(0);
    let total = Component {
        track: rep_track(rep_x),
        dx0: vec![0.0; n],
        mask: None,
        sources: vec![
            (Source::External { x: &rep_xt.paths.x, dx: &own_sol.dx }, 1.0),
            (Source::External { x: &eq.paths.x, dx: &star_sol.dx }, 1.0),
        ],
    };
    let (mut s3, d3) = system(eq, vec![total]).solve("composite nabla")?;
    let total = VariationalBundle::from_solution(s3.remove(0), eq, d3);
    let own = VariationalBundle::from_solution(own_sol, eq, d1);
    let star = VariationalBundle::from_solution(star_sol, eq, d2);
    Ok(NablaBundle { tag: NablaTag::Point { xtilde }, own, star, total })
}

/// `ψ(x, ℒ_ξ, ·)` on `xtilde_grid`.
pub fn lions_field(eq: &EquilibriumSolution, rep_x: &RepresentativeSolution, xtilde_grid: &[f64]) -> Result<Vec<PsiPoint>> {
    xtilde_grid
        .iter()
        .map(|&xt| {
            let b = psi_point(eq, rep_x, xt)?;
            Ok(PsiPoint { xtilde: xt, psi: b.value(), std_err: b.total.y0_std_err })
        })
        .collect()
}

/// Piecewise-linear interpolation of `ψ` with flat extrapolation.
pub fn interpolate_psi(field: &[PsiPoint], x: f64) -> f64 {
    match field.len() {
        0 => 0.0,
        1 => field[0].psi,
        _ => {
            if x <= field[0].xtilde {
                return field[0].psi;
            }
            let last = field[field.len() - 1];
            if x >= last.xtilde {
                return last.psi;
            }
            let j = field.partition_point(|p| p.xtilde <= x);
            let (a, b) = (field[j - 1], field[j]);
            let w = (x - a.xtilde) / (b.xtilde - a.xtilde);
            a.psi + w * (b.psi - a.psi)
        }
    }
}

/// `E[ψ(x, ℒ_ξ, ξ)·η]` and its standard error.
pub fn expect_psi_eta(field: &[PsiPoint], xi: &[f64], eta: &[f64]) -> (f64, f64) {
    let n = xi.len() as f64;
    let vals: Vec<f64> = xi.iter().zip(eta).map(|(x, e)| interpolate_psi(field, *x) * e).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let abs_eta = eta.iter().map(|e| e.abs()).sum::<f64>() / n;
    let field_se = field.iter().map(|p| p.std_err).fold(0.0, f64::max) * abs_eta;
    (mean, (var / n + field_se * field_se).sqrt())
}

/// Evenly spaced quantile grid of `samples`, deduplicated.
pub fn quantile_grid(samples: &[f64], points: usize) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mut g: Vec<f64> = (0..points)
        .map(|j| {
            let u = (j as f64 + 0.5) / points as f64;
            s[((u * n as f64) as usize).min(n - 1)]
        })
        .collect();
    g.dedup();
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FdRow {
    pub delta: f64,
    pub quotient: f64,
    pub e_psi_eta: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdReport {
    pub x: f64,
    pub v0: f64,
    pub e_psi_eta: f64,
    pub e_psi_eta_se: f64,
    pub psi: Vec<PsiPoint>,
    pub rows: Vec<FdRow>,
    /// Least-squares slope of gap against δ.
    pub trend_slope: Option<f64>,
    /// Gaps below this are indistinguishable from Monte Carlo error.
    pub floor: f64,
    /// Gaps shrink with δ until they reach the floor.
    pub monotone_to_floor: bool,
    /// Perturbed solves reuse the base Brownian increments.
    pub common_random_numbers: bool,
}

/// Floor multiplier on the standard error of `E[ψη]`.
pub const FD_FLOOR_SIGMAS: f64 = 3.0;

/// Compares `(𝒱(x, ℒ_{ξ+δη}) − 𝒱(x, ℒ_ξ))/δ` with `E[ψ(x, ℒ_ξ, ξ)·η]`.
pub fn fd_check(
    x: f64,
    model: Arc<dyn HamiltonianModel>,
    xi: &[f64],
    eta: &[f64],
    deltas: &[f64],
    config: &SolverConfig,
    psi_points: usize,
) -> Result<FdReport> {
    if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0)) || deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("deltas must be positive and decreasing"));
    }
    if eta.len() != xi.len() {
        return Err(Error::invalid("direction samples must align with the initial samples"));
    }
    let eq = solve_equilibrium(model.clone(), xi, config)?;
    let rep = solve_representative(x, &eq)?;
    let eta_zero = eta.iter().all(|e| *e == 0.0);
    let psi = if eta_zero { Vec::new() } else { lions_field(&eq, &rep, &quantile_grid(xi, psi_points))? };
    let (e_psi_eta, se) = if eta_zero { (0.0, 0.0) } else { expect_psi_eta(&psi, xi, eta) };
    let mut rows = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let shifted: Vec<f64> = xi.iter().zip(eta).map(|(a, b)| a + d * b).collect();
        let quotient = if eta_zero {
            0.0
        } else {
            let eq_d = crate::solver::solve_equilibrium_with_noise(model.clone(), &shifted, config, eq.paths.db.clone())?;
            let rep_d = solve_representative(x, &eq_d)?;
            (rep_d.y0 - rep.y0) / d
        };
        rows.push(FdRow { delta: d, quotient, e_psi_eta, gap: (quotient - e_psi_eta).abs() });
    }
    let floor = FD_FLOOR_SIGMAS * se;
    let monotone_to_floor = rows.windows(2).all(|w| w[1].gap <= w[0].gap || w[1].gap <= floor);
    let d: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let g: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    Ok(FdReport {
        x,
        v0: rep.y0,
        e_psi_eta,
        e_psi_eta_se: se,
        psi,
        rows,
        trend_slope: crate::solver::ls_slope(&d, &g),
        floor,
        monotone_to_floor,
        common_random_numbers: true,
    })
}

/// Directional derivative of `V(x, ·)` in direction `η`:
/// `E∫e^{−rt}(∂xF·δX^x + ∂yF·δY^x + Ẽ[∂μF·δX̃^{ξ,η}]) dt`.
pub fn value_directional(
    eq: &EquilibriumSolution,
    rep: &RepresentativeSolution,
    delta_eq: &VariationalBundle,
    delta_rep: &VariationalBundle,
) -> Result<ValueEstimate> {
    check_rep(eq, rep)?;
    let model = eq.model.as_ref();
    let cfg = &eq.config;
    let exec = cfg.exec;
    let grid: TimeGrid = *eq.grid();
    let rank = model.mu_rank().unwrap_or(0);
    let per_node: Vec<f64> = (0..grid.nodes())
        .map(|k| {
            let law = eq.flow.law(k);
            let views = [SourceView { x: eq.paths.x.node(k), dx: delta_eq.dx.node(k), weight: 1.0 }];
            let t_mu = prepare_tilde(model, cfg, MuDerivative::Mu, law, &views);
            let t_ymu = prepare_tilde(model, cfg, MuDerivative::YMu, law, &views);
            let xk = rep.paths.x.node(k);
            let field = &rep.paths.fields[k];
            let (dxk, dyk) = (delta_rep.dx.node(k), delta_rep.dy.node(k));
            par::map_reduce(
                exec,
                xk.len(),
                0.0,
                |r| {
                    let mut left = vec![0.0; rank];
                    r.map(|i| {
                        let (x, y) = (xk[i], field.y(xk[i], &[]));
                        let fx = model.dh_x(x, law, y) - y * model.dh_xy(x, law, y);
                        let fy = -y * model.dh_yy(x, law, y);
                        let fmu = t_mu.eval(model, MuDerivative::Mu, x, law, y, &views, &mut left)
                            - y * t_ymu.eval(model, MuDerivative::YMu, x, law, y, &views, &mut left);
                        fx * dxk[i] + fy * dyk[i] + fmu
                    })
                    .sum::<f64>()
                },
                |a, b| a + b,
            ) / xk.len() as f64
        })
        .collect();
    Ok(discounted_with_tail(&per_node, model.r(), &grid))
}
