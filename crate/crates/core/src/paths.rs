//! Time grids, Brownian increments, particle path storage and the
//! discounted norms `‖v‖²_K = E∫ e^{-Kt} |v_t|² dt`.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::{self, Exec, CHUNK};

/// Uniform grid `t_k = k·dt`, `k = 0..=M`, on the truncated horizon `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    /// `T/dt` must be an integer up to rounding; `dt` is then reset to
    /// `T/M` so that `M·dt = T` holds to machine precision.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0 && dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!(
                "grid needs T > 0 and dt > 0 (got T = {horizon}, dt = {dt})"
            )));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 {
            return Err(Error::invalid("grid needs dt <= T"));
        }
        if (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::invalid(format!("T = {horizon} is not a multiple of dt = {dt}")));
        }
        let steps = steps as usize;
        Ok(Self {
            horizon,
            dt: horizon / steps as f64,
            steps,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// Closest node to time `t`, clamped to the grid.
    pub fn node_at(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.steps)
    }

    /// Trapezoid weights for `∫_0^T e^{-Kt} f(t) dt`.
    pub fn discount_weights(&self, k_rate: f64) -> Vec<f64> {
        (0..self.nodes())
            .map(|k| {
                let w = if k == 0 || k == self.steps { 0.5 } else { 1.0 };
                w * self.dt * (-k_rate * self.t(k)).exp()
            })
            .collect()
    }
}

/// Matrix of per-particle values stored node-major: row `k` holds the
/// values of all `N` particles at node `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathMatrix {
    particles: usize,
    nodes: usize,
    data: Vec<f64>,
}

impl PathMatrix {
    pub fn zeros(particles: usize, nodes: usize) -> Self {
        Self {
            particles,
            nodes,
            data: vec![0.0; particles * nodes],
        }
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.data[k * self.particles..(k + 1) * self.particles]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.particles..(k + 1) * self.particles]
    }

    /// Node `k` for reading and node `k + 1` for writing.
    pub fn step_pair(&mut self, k: usize) -> (&[f64], &mut [f64]) {
        let (head, tail) = self.data.split_at_mut((k + 1) * self.particles);
        (&head[k * self.particles..], &mut tail[..self.particles])
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[k * self.particles + i]
    }

    /// Path of particle `i` across all nodes.
    pub fn particle(&self, i: usize) -> Vec<f64> {
        (0..self.nodes).map(|k| self.get(i, k)).collect()
    }

    pub fn node_mean(&self, exec: Exec, k: usize) -> f64 {
        let row = self.node(k);
        par::mean_of(exec, row.len(), |i| row[i])
    }
}

/// Brownian increments `dB[i][k] ~ N(0, dt)`, stored node-major and shared.
#[derive(Clone, Debug)]
pub struct Increments {
    particles: usize,
    steps: usize,
    sqrt_dt: f64,
    data: Arc<Vec<f64>>,
}

impl Increments {
    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    /// Increments over `[t_k, t_{k+1}]` for all particles.
    pub fn node(&self, k: usize) -> &[f64] {
        &self.data[k * self.particles..(k + 1) * self.particles]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[k * self.particles + i]
    }

    pub fn particle(&self, i: usize) -> Vec<f64> {
        (0..self.steps).map(|k| self.get(i, k)).collect()
    }
}

/// Deterministic per-particle stream: ChaCha8 keyed by `seed`, stream `i`.
pub fn particle_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Draws `N × M` increments. Particle `i` depends only on `(seed, i)`.
pub fn sample_brownian(grid: &TimeGrid, particles: usize, seed: u64) -> Result<Increments> {
    sample_brownian_with(grid, particles, seed, Exec::default())
}

pub fn sample_brownian_with(
    grid: &TimeGrid,
    particles: usize,
    seed: u64,
    exec: Exec,
) -> Result<Increments> {
    if particles == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    let steps = grid.steps();
    let sqrt_dt = grid.dt().sqrt();
    let chunk_ids: Vec<usize> = (0..particles.div_ceil(CHUNK)).collect();
    // Each chunk draws particle-major, then gets scattered into node-major.
    let blocks = par::map_collect(exec, &chunk_ids, |&c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(particles);
        let mut block = Vec::with_capacity((hi - lo) * steps);
        for i in lo..hi {
            let mut rng = particle_rng(seed, i);
            block.extend((0..steps).map(|_| sqrt_dt * rng.sample::<f64, _>(StandardNormal)));
        }
        block
    });
    let mut data = vec![0.0; particles * steps];
    for (c, block) in blocks.into_iter().enumerate() {
        let lo = c * CHUNK;
        for (j, path) in block.chunks_exact(steps).enumerate() {
            for (k, &v) in path.iter().enumerate() {
                data[k * particles + lo + j] = v;
            }
        }
    }
    Ok(Increments {
        particles,
        steps,
        sqrt_dt,
        data: Arc::new(data),
    })
}

/// `∫_0^T e^{-Kt} f(t) dt` by the trapezoid rule over node values `f`.
pub fn discounted_integral(f: &[f64], k_rate: f64, grid: &TimeGrid) -> f64 {
    debug_assert_eq!(f.len(), grid.nodes());
    grid.discount_weights(k_rate)
        .iter()
        .zip(f)
        .map(|(w, v)| w * v)
        .sum()
}

/// Norm estimate with the truncation tail reported separately.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NormEstimate {
    pub value: f64,
    /// `e^{-KT}·sup|v|²/K`: what the tail `[T, ∞)` would add if `|v|`
    /// stayed at its observed maximum.
    pub tail_bound: f64,
}

/// `‖v‖²_K` for a path given at the grid nodes. For random processes pass
/// the per-node second moment through [`discounted_sq_norm_of_moments`].
pub fn discounted_sq_norm(v: &[f64], k_rate: f64, grid: &TimeGrid) -> Result<NormEstimate> {
    let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    discounted_sq_norm_of_moments(&sq, k_rate, grid)
}

/// Same as [`discounted_sq_norm`] with `E|v_t|²` already supplied per node.
pub fn discounted_sq_norm_of_moments(
    second_moments: &[f64],
    k_rate: f64,
    grid: &TimeGrid,
) -> Result<NormEstimate> {
    if !(k_rate > 0.0) {
        return Err(Error::invalid(format!("norm weight K must be positive (got {k_rate})")));
    }
    if second_moments.len() != grid.nodes() {
        return Err(Error::invalid(format!(
            "path has {} values but the grid has {} nodes",
            second_moments.len(),
            grid.nodes()
        )));
    }
    let value = discounted_integral(second_moments, k_rate, grid);
    let sup = second_moments.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(NormEstimate {
        value,
        tail_bound: (-k_rate * grid.horizon()).exp() * sup / k_rate,
    })
}

/// `‖X - X'‖²_K` over particle paths.
pub fn path_distance_sq(exec: Exec, a: &PathMatrix, b: &PathMatrix, k_rate: f64, grid: &TimeGrid) -> f64 {
    let m: Vec<f64> = (0..grid.nodes())
        .map(|k| {
            let (ra, rb) = (a.node(k), b.node(k));
            par::mean_of(exec, ra.len(), |i| (ra[i] - rb[i]).powi(2))
        })
        .collect();
    discounted_integral(&m, k_rate, grid)
}

/// One row of the per-node summary export.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeriesRow {
    pub t: f64,
    pub mean_x: f64,
    pub var_x: f64,
    pub mean_y: f64,
    pub mean_z: f64,
}

pub fn write_series<W: Write>(rows: &[SeriesRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_invariants() {
        let g = TimeGrid::new(40.0, 0.01).unwrap();
        assert_eq!(g.steps(), 4000);
        assert!((g.steps() as f64 * g.dt() - g.horizon()).abs() < 1e-12);
        assert_eq!(g.t(g.steps()), 40.0);
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 2.0).is_err());
        assert!(TimeGrid::new(-1.0, 0.1).is_err());
    }

    #[test]
    fn brownian_is_reproducible_and_keyed_per_particle() {
        let g = TimeGrid::new(1.0, 0.1).unwrap();
        let a = sample_brownian(&g, 3, 9).unwrap();
        let b = sample_brownian(&g, 3, 9).unwrap();
        assert_eq!(a.data, b.data);
        let c = sample_brownian(&g, 2, 9).unwrap();
        for i in 0..2 {
            assert_eq!(a.particle(i), c.particle(i));
        }
        assert_ne!(a.particle(0), a.particle(1));
        let d = sample_brownian(&g, 3, 10).unwrap();
        assert_ne!(a.particle(0), d.particle(0));
        assert!(sample_brownian(&g, 0, 9).is_err());
    }

    #[test]
    fn brownian_matches_across_strategies() {
        let g = TimeGrid::new(0.5, 0.01).unwrap();
        let a = sample_brownian_with(&g, 1500, 4, Exec::Sequential).unwrap();
        let b = sample_brownian_with(&g, 1500, 4, Exec::Parallel).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn brownian_moments() {
        let g = TimeGrid::new(0.01, 0.01).unwrap();
        let n = 100_000;
        let inc = sample_brownian(&g, n, 2024).unwrap();
        let mean = inc.node(0).iter().sum::<f64>() / n as f64;
        let var = inc.node(0).iter().map(|v| v * v).sum::<f64>() / n as f64;
        // CLT: sd of the mean is sqrt(dt/n) ~ 3.2e-4.
        assert!(mean.abs() < 4.0 * (g.dt() / n as f64).sqrt(), "mean {mean}");
        assert!((var / g.dt() - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn norm_closed_forms() {
        let g = TimeGrid::new(40.0, 0.01).unwrap();
        let two = vec![2.0; g.nodes()];
        let n = discounted_sq_norm(&two, 0.5, &g).unwrap();
        assert!((n.value - 8.0).abs() < 1e-3, "{}", n.value);
        assert!(n.tail_bound < 1e-7);

        let e: Vec<f64> = (0..g.nodes()).map(|k| (-0.5 * g.t(k)).exp()).collect();
        let n = discounted_sq_norm(&e, 1.0, &g).unwrap();
        assert!((n.value - 0.5).abs() < 1e-3);

        let z = vec![0.0; g.nodes()];
        assert_eq!(discounted_sq_norm(&z, 1.0, &g).unwrap().value, 0.0);
        assert!(discounted_sq_norm(&z, 0.0, &g).is_err());
    }

    #[test]
    fn quadrature_is_second_order() {
        let err = |dt: f64| {
            let g = TimeGrid::new(40.0, dt).unwrap();
            let e: Vec<f64> = (0..g.nodes()).map(|k| (-0.5 * g.t(k)).exp()).collect();
            let exact = (1.0 - (-2.0f64 * 40.0).exp()) / 2.0;
            (discounted_sq_norm(&e, 1.0, &g).unwrap().value - exact).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
        let err2 = |dt: f64| {
            let g = TimeGrid::new(40.0, dt).unwrap();
            let exact = 8.0 * (1.0 - (-0.5f64 * 40.0).exp());
            (discounted_sq_norm(&vec![2.0; g.nodes()], 0.5, &g).unwrap().value - exact).abs()
        };
        let ratio = err2(0.1) / err2(0.05);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn step_pair_views() {
        let mut p = PathMatrix::zeros(3, 4);
        p.node_mut(1).copy_from_slice(&[1.0, 2.0, 3.0]);
        let (cur, next) = p.step_pair(1);
        for (n, c) in next.iter_mut().zip(cur) {
            *n = 2.0 * c;
        }
        assert_eq!(p.particle(2), vec![0.0, 3.0, 6.0, 0.0]);
    }

    #[test]
    fn series_csv_has_header() {
        let rows = [SeriesRow { t: 0.0, mean_x: 1.0, var_x: 0.5, mean_y: 0.2, mean_z: 0.0 }];
        let mut buf = Vec::new();
        write_series(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,mean_x,var_x,mean_y,mean_z\n"));
    }

    proptest! {
        #[test]
        fn norm_is_homogeneous(c in -50.0f64..50.0, seed in 0u64..1000) {
            let g = TimeGrid::new(5.0, 0.05).unwrap();
            let v: Vec<f64> = (0..g.nodes()).map(|k| ((k as f64 + seed as f64) * 0.7).sin()).collect();
            let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
            let a = discounted_sq_norm(&v, 0.3, &g).unwrap().value;
            let b = discounted_sq_norm(&cv, 0.3, &g).unwrap().value;
            prop_assert!((b - c * c * a).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
