//! Picard solver for the linear McKean–Vlasov systems obtained by
//! differentiating the equilibrium along frozen base paths.
//!
//! A system is a set of components. Component `c` follows a base track
//! `(X^c, Y^c)` and solves
//!
//! ```text
//! dδX = (∂xyH·δX + ∂yyH·δY + m·Σ_s w_s Ẽ[∂yμH(X^c, X̃^s)·δX̃^s]) dt
//! dδY = −(∂xxH·δX + ∂xyH·δY − r·δY + m·Σ_s w_s Ẽ[∂xμH(X^c, X̃^s)·δX̃^s]) dt + δZ dB
//! ```
//!
//! with an optional mask `m` and sources that are either components of the
//! same system or fixed external solutions. Tilde expectations are averages
//! over the source ensemble; separable models reduce them to `O(N)` moments.
//!
//! The own-state coupling is removed first: writing `δY_k = u_k·δX_k + Q_k`,
//! the gain `u` follows a backward Riccati recursion along the track, solved
//! with the same time stepping as the equilibrium scheme, and `Q` is driven
//! only by the tilde terms. Picard then iterates on the mean-field coupling
//! alone, which is what keeps long horizons stable: `δX` is usually identical
//! across particles, so a regression on it cannot recover the gain.
//!
//! Per node, with `A, B, C` the second derivatives of `H`, `S_b, S_f` the
//! masked tilde terms and `G = (1 + dt(B − r))·E[u_{k+1} | x_k]`:
//!
//! ```text
//! u_k = (G(1 + dt·B) + dt·A) / (1 − G·dt·C)
//! Q_k = ((1 + dt(B − r))·E[Q_{k+1} | x_k, m] + dt·S_b + G·dt·S_f) / (1 − G·dt·C)
//! ```

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::model::{HamiltonianModel, MuDerivative};
use crate::par;
use crate::paths::{discounted_integral, Increments, PathMatrix, TimeGrid};
use crate::regression::{fit_node, Design, NodeFit};
use crate::solver::{Diagnostics, Flow, SolverConfig};

/// Frozen base paths with their decoupling field.
#[derive(Clone, Copy)]
pub(crate) struct Track<'a> {
    pub x: &'a PathMatrix,
    pub fields: &'a [NodeFit],
}

impl Track<'_> {
    #[inline]
    fn y(&self, i: usize, k: usize) -> f64 {
        self.fields[k].y(self.x.get(i, k), &[])
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Source<'a> {
    Internal(usize),
    External { x: &'a PathMatrix, dx: &'a PathMatrix },
}

pub(crate) struct Component<'a> {
    pub track: Track<'a>,
    pub dx0: Vec<f64>,
    /// 0/1 weights on the tilde terms.
    pub mask: Option<Vec<f64>>,
    pub sources: Vec<(Source<'a>, f64)>,
}

pub(crate) struct LinearSystem<'a> {
    pub model: &'a dyn HamiltonianModel,
    pub flow: &'a Flow,
    pub db: &'a Increments,
    pub grid: TimeGrid,
    pub config: &'a SolverConfig,
    pub components: Vec<Component<'a>>,
}

/// Solution of one component.
#[derive(Clone, Debug)]
pub(crate) struct ComponentSolution {
    pub dx: PathMatrix,
    pub dy: PathMatrix,
    pub dz: PathMatrix,
    /// Offset regressions, one per node.
    pub fields: Vec<NodeFit>,
}

/// Per-node view of a source ensemble.
pub(crate) struct SourceView<'s> {
    pub x: &'s [f64],
    pub dx: &'s [f64],
    pub weight: f64,
}

impl LinearSystem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.db.particles();
        let nodes = self.grid.nodes();
        for c in &self.components {
            if c.track.x.particles() != n || c.track.x.nodes() != nodes || c.track.fields.len() != nodes {
                return Err(Error::invalid("base track does not match the grid"));
            }
            if c.dx0.len() != n || c.mask.as_ref().is_some_and(|m| m.len() != n) {
                return Err(Error::invalid("initial values or mask have the wrong length"));
            }
            for (s, _) in &c.sources {
                match s {
                    Source::Internal(j) if *j >= self.components.len() => {
                        return Err(Error::invalid("internal source out of range"))
                    }
                    Source::External { x, dx } if x.particles() != n || dx.nodes() != nodes || x.nodes() != nodes => {
                        return Err(Error::invalid("external source does not match the grid"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn views<'s>(&'s self, c: usize, k: usize, dx: &'s [PathMatrix]) -> Vec<SourceView<'s>> {
        self.components[c]
            .sources
            .iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|(s, w)| match s {
                Source::Internal(j) => {
                    SourceView { x: self.components[*j].track.x.node(k), dx: dx[*j].node(k), weight: *w }
                }
                Source::External { x, dx } => SourceView { x: x.node(k), dx: dx.node(k), weight: *w },
            })
            .collect()
    }
}

/// Prepares `Σ_s w_s Ẽ[∂μH(x, X̃^s)·δX̃^s]` for one node: combined
/// separable moments, or the raw views for a direct double sum.
pub(crate) fn prepare_tilde(
    model: &dyn HamiltonianModel,
    config: &SolverConfig,
    kind: MuDerivative,
    law: &EmpiricalMeasure,
    views: &[SourceView],
) -> Tilde {
    if views.is_empty() {
        return Tilde::Zero;
    }
    let exec = config.exec;
    match model.mu_rank() {
        Some(rank) => {
            let mut combined = vec![0.0; rank];
            for v in views {
                let n = v.x.len();
                let moments = par::map_reduce(
                    exec,
                    n,
                    vec![0.0; rank],
                    |r| {
                        let mut acc = vec![0.0; rank];
                        let mut b = vec![0.0; rank];
                        for j in r {
                            model.mu_right(kind, v.x[j], law, &mut b);
                            for l in 0..rank {
                                acc[l] += b[l] * v.dx[j];
                            }
                        }
                        acc
                    },
                    |mut a, b| {
                        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                        a
                    },
                );
                for l in 0..rank {
                    combined[l] += v.weight * moments[l] / n as f64;
                }
            }
            if combined.iter().all(|m| *m == 0.0) {
                Tilde::Zero
            } else {
                Tilde::Separable(combined)
            }
        }
        None => Tilde::Direct(config.tilde_subsample),
    }
}

pub(crate) enum Tilde {
    Zero,
    Separable(Vec<f64>),
    /// Subsample size for the double sum.
    Direct(usize),
}

impl Tilde {
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub fn eval(
        &self,
        model: &dyn HamiltonianModel,
        kind: MuDerivative,
        x: f64,
        law: &EmpiricalMeasure,
        y: f64,
        views: &[SourceView],
        left: &mut [f64],
    ) -> f64 {
        match self {
            Tilde::Zero => 0.0,
            Tilde::Separable(m) => {
                model.mu_left(kind, x, law, y, left);
                left.iter().zip(m).map(|(a, b)| a * b).sum()
            }
            Tilde::Direct(cap) => views
                .iter()
                .map(|v| {
                    let s = v.x.len().min(*cap);
                    let sum: f64 = (0..s).map(|j| model.dmu(kind, x, law, y, v.x[j]) * v.dx[j]).sum();
                    v.weight * sum / s as f64
                })
                .sum(),
        }
    }
}

/// Riccati gain along one track.
struct Gain {
    /// `u_k` on the track.
    u: PathMatrix,
    /// `G_k` on the track.
    g: PathMatrix,
    /// Regressions of `u_{k+1}` on `x_k`, used for `δZ`.
    fits: Vec<NodeFit>,
}

#[inline]
fn aux_of(mask: Option<&[f64]>, i: usize) -> ([f64; 1], usize) {
    match mask {
        Some(mk) => ([mk[i]], 1),
        None => ([0.0], 0),
    }
}

impl LinearSystem<'_> {
    fn gain(&self, c: usize) -> Result<Gain> {
        let cfg = self.config;
        let exec = cfg.exec;
        let model = self.model;
        let (n, m) = (self.db.particles(), self.grid.steps());
        let dt = self.grid.dt();
        let r = model.r();
        let track = self.components[c].track;
        let mut fits = vec![NodeFit::zero(cfg.basis_degree, 0); m + 1];
        let mut u = PathMatrix::zeros(n, m + 1);
        let mut g = PathMatrix::zeros(n, m + 1);
        for k in (0..m).rev() {
            let law = self.flow.law(k);
            let xk = track.x.node(k);
            let design =
                Design { x: xk, aux: &[], db: Some(self.db.node(k)), sqrt_dt: self.db.sqrt_dt(), degree: cfg.basis_degree };
            let fit = fit_node(exec, &design, u.node(k + 1), k)?;
            let mut gk = vec![0.0; n];
            par::fill(exec, &mut gk, |i| {
                let (x, yb) = (xk[i], track.y(i, k));
                (1.0 + dt * (model.dh_xy(x, law, yb) - r)) * fit.y(x, &[])
            });
            let mut uk = vec![0.0; n];
            let mut bad = false;
            for i in 0..n {
                let (x, yb) = (xk[i], track.y(i, k));
                let den = 1.0 - gk[i] * dt * model.dh_yy(x, law, yb);
                bad |= !(den > 1e-3);
                uk[i] = (gk[i] * (1.0 + dt * model.dh_xy(x, law, yb)) + dt * model.dh_xx(x, law, yb)) / den;
            }
            if bad || uk.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("linearised system is unstable at node {k}; reduce dt")));
            }
            u.node_mut(k).copy_from_slice(&uk);
            g.node_mut(k).copy_from_slice(&gk);
            fits[k] = fit;
        }
        Ok(Gain { u, g, fits })
    }

    /// `(S_b, S_f)` on component `c` at node `k`, mask included.
    fn sources_at(&self, c: usize, k: usize, dx: &[PathMatrix], sb: &mut [f64], sf: &mut [f64]) {
        let cfg = self.config;
        let model = self.model;
        let rank = model.mu_rank().unwrap_or(0);
        let law = self.flow.law(k);
        let comp = &self.components[c];
        let views = self.views(c, k, dx);
        let tx = prepare_tilde(model, cfg, MuDerivative::XMu, law, &views);
        let ty = prepare_tilde(model, cfg, MuDerivative::YMu, law, &views);
        if matches!((&tx, &ty), (Tilde::Zero, Tilde::Zero)) {
            sb.fill(0.0);
            sf.fill(0.0);
            return;
        }
        let mask = comp.mask.as_deref();
        let track = comp.track;
        let xk = track.x.node(k);
        let mut pair = vec![(0.0, 0.0); sb.len()];
        par::for_each_chunk_mut(cfg.exec, &mut pair, |off, chunk| {
            let mut left = vec![0.0; rank];
            for (j, v) in chunk.iter_mut().enumerate() {
                let i = off + j;
                let w = mask.map_or(1.0, |mk| mk[i]);
                if w == 0.0 {
                    *v = (0.0, 0.0);
                    continue;
                }
                let (x, yb) = (xk[i], track.y(i, k));
                *v = (
                    w * tx.eval(model, MuDerivative::XMu, x, law, yb, &views, &mut left),
                    w * ty.eval(model, MuDerivative::YMu, x, law, yb, &views, &mut left),
                );
            }
        });
        for (i, (b, f)) in pair.into_iter().enumerate() {
            sb[i] = b;
            sf[i] = f;
        }
    }

    pub fn solve(&self, stage: &str) -> Result<(Vec<ComponentSolution>, Diagnostics)> {
        self.validate()?;
        let cfg = self.config;
        let exec = cfg.exec;
        let model = self.model;
        let grid = self.grid;
        let (n, m) = (self.db.particles(), grid.steps());
        let dt = grid.dt();
        let r = model.r();
        let k_norm = cfg.norm_weight(r);
        let nc = self.components.len();

        let gains = (0..nc).map(|c| self.gain(c)).collect::<Result<Vec<_>>>()?;
        let mut dx: Vec<PathMatrix> = self
            .components
            .iter()
            .map(|c| {
                let mut p = PathMatrix::zeros(n, m + 1);
                p.node_mut(0).copy_from_slice(&c.dx0);
                p
            })
            .collect();
        let mut dy: Vec<PathMatrix> = (0..nc).map(|_| PathMatrix::zeros(n, m + 1)).collect();
        let n_aux = |c: usize| usize::from(self.components[c].mask.is_some());
        let mut fields: Vec<Vec<NodeFit>> =
            (0..nc).map(|c| vec![NodeFit::zero(cfg.basis_degree, n_aux(c)); m + 1]).collect();
        let mut residuals = Vec::new();
        let (mut sb, mut sf) = (vec![0.0; n], vec![0.0; n]);

        // `Q_k` from the conditional part `h` and the sources.
        let offset = |c: usize, k: usize, h: &NodeFit, sb: &[f64], sf: &[f64], out: &mut [f64]| {
            let comp = &self.components[c];
            let (track, mask) = (comp.track, comp.mask.as_deref());
            let law = self.flow.law(k);
            let xk = track.x.node(k);
            let g = gains[c].g.node(k);
            par::fill(exec, out, |i| {
                let (x, yb) = (xk[i], track.y(i, k));
                let (a, na) = aux_of(mask, i);
                let carry = (1.0 + dt * (model.dh_xy(x, law, yb) - r)) * h.y(x, &a[..na]);
                (carry + dt * sb[i] + g[i] * dt * sf[i]) / (1.0 - g[i] * dt * model.dh_yy(x, law, yb))
            });
        };

        for iter in 0..cfg.max_iters {
            // Forward pass, all components in lockstep.
            let mut dx2 = vec![0.0; m + 1];
            let mut q = vec![0.0; n];
            for k in 0..m {
                let law = self.flow.law(k);
                let mut next_nodes = Vec::with_capacity(nc);
                for (c, comp) in self.components.iter().enumerate() {
                    self.sources_at(c, k, &dx, &mut sb, &mut sf);
                    offset(c, k, &fields[c][k], &sb, &sf, &mut q);
                    let cur = dx[c].node(k);
                    let u = gains[c].u.node(k);
                    let track = comp.track;
                    let xk = track.x.node(k);
                    let mut dyk = vec![0.0; n];
                    par::fill(exec, &mut dyk, |i| u[i] * cur[i] + q[i]);
                    let mut next = vec![0.0; n];
                    par::fill(exec, &mut next, |i| {
                        let (x, yb) = (xk[i], track.y(i, k));
                        cur[i] + dt * (model.dh_xy(x, law, yb) * cur[i] + model.dh_yy(x, law, yb) * dyk[i] + sf[i])
                    });
                    dy[c].node_mut(k).copy_from_slice(&dyk);
                    next_nodes.push(next);
                }
                for (c, next) in next_nodes.into_iter().enumerate() {
                    let old = dx[c].node(k + 1);
                    dx2[k + 1] += par::mean_of(exec, n, |i| (next[i] - old[i]).powi(2));
                    dx[c].node_mut(k + 1).copy_from_slice(&next);
                }
            }

            // Backward pass for the offsets, component by component.
            let mut dy2 = vec![0.0; m + 1];
            let relax = if iter == 0 { 1.0 } else { cfg.damping };
            for (c, comp) in self.components.iter().enumerate() {
                let mask = comp.mask.as_deref();
                let xs = comp.track.x;
                let mut q_next = vec![0.0; n];
                for k in (0..m).rev() {
                    let xk = xs.node(k);
                    let aux_cols: Vec<&[f64]> = mask.into_iter().collect();
                    let design = Design {
                        x: xk,
                        aux: &aux_cols,
                        db: Some(self.db.node(k)),
                        sqrt_dt: self.db.sqrt_dt(),
                        degree: cfg.basis_degree,
                    };
                    let fit = fit_node(exec, &design, &q_next, k)?;
                    let blended = fit.blend(&fields[c][k], relax);
                    let old = &fields[c][k];
                    dy2[k] += par::mean_of(exec, n, |i| {
                        let (a, na) = aux_of(mask, i);
                        (blended.y(xk[i], &a[..na]) - old.y(xk[i], &a[..na])).powi(2)
                    });
                    if k > 0 {
                        self.sources_at(c, k, &dx, &mut sb, &mut sf);
                        offset(c, k, &fit, &sb, &sf, &mut q_next);
                    }
                    fields[c][k] = blended;
                }
            }
            let res = (discounted_integral(&dx2, k_norm, &grid) + discounted_integral(&dy2, k_norm, &grid)).sqrt();
            residuals.push(res);
            if !res.is_finite() {
                break;
            }
            if iter > 0 && res < cfg.picard_tol {
                let sqrt_dt = self.db.sqrt_dt();
                let sols = dx
                    .into_iter()
                    .zip(dy)
                    .zip(fields)
                    .zip(&gains)
                    .zip(&self.components)
                    .map(|((((dx, dy), fields), gain), comp)| {
                        let mut dz = PathMatrix::zeros(n, m + 1);
                        for k in 0..m {
                            let xk = comp.track.x.node(k);
                            let (dxn, gz, h) = (dx.node(k + 1), &gain.fits[k], &fields[k]);
                            let mask = comp.mask.as_deref();
                            par::fill(exec, dz.node_mut(k), |i| {
                                let (a, na) = aux_of(mask, i);
                                gz.z(xk[i], &[], sqrt_dt) * dxn[i] + h.z(xk[i], &a[..na], sqrt_dt)
                            });
                        }
                        ComponentSolution { dx, dy, dz, fields }
                    })
                    .collect();
                return Ok((sols, Diagnostics::from_residuals(residuals, true)));
            }
        }
        Err(Error::NoConvergence { stage: stage.to_string(), iterations: residuals.len(), residuals })
    }
}
