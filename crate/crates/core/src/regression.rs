//! Least-squares regression for conditional expectations in backward passes.
//!
//! At each time node the target is regressed on a polynomial in the
//! standardized state `x̂ = (x - c)/s`, optional auxiliary features `a_j`
//! (entering as `a_j` and `a_j·x̂`) and martingale controls
//! `w·{1, x̂, a_j}` with `w = dB/√dt`. The controls have zero conditional
//! mean, so the fitted conditional expectation drops them, while their
//! coefficients identify `Z` and remove the `Z·dB` noise from the fit.
//!
//! The normal equations are solved by an in-order pivoted Cholesky
//! factorization on the equilibrated Gram matrix. Columns that are (nearly)
//! linear combinations of earlier ones are dropped and get coefficient 0.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const MAX_FEATURES: usize = 16;

/// Relative pivot below which a column counts as dependent.
pub const PIVOT_TOL: f64 = 1e-10;

/// Fitted conditional expectation (and `Z`) at one time node.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeFit {
    pub center: f64,
    pub scale: f64,
    /// Coefficients on `x̂^p`, `p = 0..=degree`.
    pub basis: Vec<f64>,
    /// Coefficients on `a_j` and `a_j·x̂`.
    pub aux: Vec<[f64; 2]>,
    /// Coefficients on `w`, `w·x̂`, `w·a_j`; `Z = (·)/√dt`.
    pub z: Vec<f64>,
    pub rss: f64,
    pub params: usize,
    pub samples: usize,
}

impl NodeFit {
    /// Identically zero field.
    pub fn zero(degree: usize, n_aux: usize) -> Self {
        Self::constant(0.0, degree, n_aux)
    }

    pub fn constant(value: f64, degree: usize, n_aux: usize) -> Self {
        let mut basis = vec![0.0; degree + 1];
        basis[0] = value;
        Self {
            center: 0.0,
            scale: 1.0,
            basis,
            aux: vec![[0.0; 2]; n_aux],
            z: vec![0.0; 2 + n_aux],
            rss: 0.0,
            params: 0,
            samples: 0,
        }
    }

    #[inline]
    fn xhat(&self, x: f64) -> f64 {
        (x - self.center) / self.scale
    }

    /// Conditional-expectation part at state `x` with auxiliary values `aux`.
    #[inline]
    pub fn y(&self, x: f64, aux: &[f64]) -> f64 {
        let xh = self.xhat(x);
        let mut v = horner(&self.basis, xh);
        for (c, a) in self.aux.iter().zip(aux) {
            v += a * (c[0] + c[1] * xh);
        }
        v
    }

    /// `Z` estimate at state `x`.
    #[inline]
    pub fn z(&self, x: f64, aux: &[f64], sqrt_dt: f64) -> f64 {
        let xh = self.xhat(x);
        let mut v = self.z[0] + self.z[1] * xh;
        for (c, a) in self.z[2..].iter().zip(aux) {
            v += c * a;
        }
        v / sqrt_dt
    }

    /// `∂/∂x` of the conditional-expectation part.
    pub fn dy_dx(&self, x: f64, aux: &[f64]) -> f64 {
        let xh = self.xhat(x);
        let mut d = 0.0;
        for p in (1..self.basis.len()).rev() {
            d = d * xh + p as f64 * self.basis[p];
        }
        let mut v = d;
        for (c, a) in self.aux.iter().zip(aux) {
            v += a * c[1];
        }
        v / self.scale
    }

    /// Residual variance over `N`: the variance contribution of this node's
    /// fit to an averaged quantity.
    pub fn mean_var(&self) -> f64 {
        if self.samples <= self.params || self.samples == 0 {
            return 0.0;
        }
        self.rss / ((self.samples - self.params) as f64 * self.samples as f64)
    }

    /// Same function expressed in the standardization `(center, scale)`.
    pub fn rebase(&self, center: f64, scale: f64) -> NodeFit {
        // Old variable in terms of the new one: x̂_old = a·x̂_new + b.
        let a = scale / self.scale;
        let b = (center - self.center) / self.scale;
        let mut out = self.clone();
        out.center = center;
        out.scale = scale;
        out.basis = compose_affine(&self.basis, a, b);
        for (o, c) in out.aux.iter_mut().zip(&self.aux) {
            *o = [c[0] + c[1] * b, c[1] * a];
        }
        out.z[0] = self.z[0] + self.z[1] * b;
        out.z[1] = self.z[1] * a;
        out
    }

    /// `theta·self + (1 - theta)·old`, in `self`'s standardization.
    pub fn blend(&self, old: &NodeFit, theta: f64) -> NodeFit {
        if theta >= 1.0 {
            return self.clone();
        }
        let old = old.rebase(self.center, self.scale);
        let mix = |n: f64, o: f64| theta * n + (1.0 - theta) * o;
        let mut out = self.clone();
        for (p, v) in out.basis.iter_mut().enumerate() {
            *v = mix(*v, old.basis.get(p).copied().unwrap_or(0.0));
        }
        for (j, v) in out.aux.iter_mut().enumerate() {
            let o = old.aux.get(j).copied().unwrap_or([0.0; 2]);
            *v = [mix(v[0], o[0]), mix(v[1], o[1])];
        }
        for (j, v) in out.z.iter_mut().enumerate() {
            *v = mix(*v, old.z.get(j).copied().unwrap_or(0.0));
        }
        out
    }
}

#[inline]
fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

/// Coefficients of `Σ c_p (a·u + b)^p` as a polynomial in `u`.
fn compose_affine(c: &[f64], a: f64, b: f64) -> Vec<f64> {
    let d = c.len();
    let mut poly = vec![0.0; d];
    for &cp in c.iter().rev() {
        // poly <- poly·(a u + b) + cp
        let mut next = vec![0.0; d];
        for (p, &v) in poly.iter().enumerate() {
            next[p] += v * b;
            if p + 1 < d {
                next[p + 1] += v * a;
            }
        }
        next[0] += cp;
        poly = next;
    }
    poly
}

/// Regressors for one node.
pub struct Design<'a> {
    pub x: &'a [f64],
    pub aux: &'a [&'a [f64]],
    /// Brownian increments for the martingale controls.
    pub db: Option<&'a [f64]>,
    pub sqrt_dt: f64,
    pub degree: usize,
}

impl Design<'_> {
    pub fn n_features(&self) -> usize {
        let n_aux = self.aux.len();
        self.degree + 1 + 2 * n_aux + if self.db.is_some() { 2 + n_aux } else { 0 }
    }
}

/// Fits `target` on the design at node `node`.
pub fn fit_node(exec: Exec, design: &Design, target: &[f64], node: usize) -> Result<NodeFit> {
    let n = design.x.len();
    let p = design.n_features();
    let n_aux = design.aux.len();
    if p > MAX_FEATURES {
        return Err(Error::invalid(format!("{p} regression features exceed {MAX_FEATURES}")));
    }
    if n == 0 || target.len() != n || design.aux.iter().any(|a| a.len() != n) {
        return Err(Error::invalid("regression inputs have mismatched lengths"));
    }

    let (sum, sumsq) = par::map_reduce(
        exec,
        n,
        (0.0, 0.0),
        |r| r.fold((0.0, 0.0), |(s, q), i| (s + design.x[i], q + design.x[i] * design.x[i])),
        |a, b| (a.0 + b.0, a.1 + b.1),
    );
    let center = sum / n as f64;
    let var = (sumsq / n as f64 - center * center).max(0.0);
    let spread = var.sqrt();
    let degenerate = !(spread > 1e-9 * center.abs().max(1.0));
    let scale = if degenerate { 1.0 } else { spread };

    let features = |i: usize, f: &mut [f64; MAX_FEATURES]| {
        let xh = if degenerate { 0.0 } else { (design.x[i] - center) / scale };
        let mut pw = 1.0;
        for slot in f.iter_mut().take(design.degree + 1) {
            *slot = pw;
            pw *= xh;
        }
        let mut j = design.degree + 1;
        for a in design.aux {
            f[j] = a[i];
            f[j + 1] = a[i] * xh;
            j += 2;
        }
        if let Some(db) = design.db {
            let w = db[i] / design.sqrt_dt;
            f[j] = w;
            f[j + 1] = w * xh;
            j += 2;
            for a in design.aux {
                f[j] = w * a[i];
                j += 1;
            }
        }
    };

    // Upper-triangular Gram, right-hand side and target energy.
    let acc = par::map_reduce(
        exec,
        n,
        vec![0.0; p * p + p + 1],
        |r| {
            let mut acc = vec![0.0; p * p + p + 1];
            let mut f = [0.0; MAX_FEATURES];
            for i in r {
                features(i, &mut f);
                let y = target[i];
                for j in 0..p {
                    let fj = f[j];
                    let row = &mut acc[j * p..(j + 1) * p];
                    for l in j..p {
                        row[l] += fj * f[l];
                    }
                    acc[p * p + j] += fj * y;
                }
                acc[p * p + p] += y * y;
            }
            acc
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            a
        },
    );
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::RegressionSingular { node });
    }
    let gram = |j: usize, l: usize| if j <= l { acc[j * p + l] } else { acc[l * p + j] };
    let rhs = &acc[p * p..p * p + p];
    let yy = acc[p * p + p];

    let (beta, kept) = solve_pivoted(p, gram, rhs).ok_or(Error::RegressionSingular { node })?;

    let fitted: f64 = beta.iter().zip(rhs).map(|(b, r)| b * r).sum();
    let rss = (yy - fitted).max(0.0);

    let d = design.degree;
    let basis = beta[..=d].to_vec();
    let aux = (0..n_aux)
        .map(|j| [beta[d + 1 + 2 * j], beta[d + 2 + 2 * j]])
        .collect();
    let z = if design.db.is_some() {
        beta[d + 1 + 2 * n_aux..].to_vec()
    } else {
        vec![0.0; 2 + n_aux]
    };
    Ok(NodeFit {
        center,
        scale,
        basis,
        aux,
        z,
        rss,
        params: kept,
        samples: n,
    })
}

/// Solves the equilibrated normal equations, dropping dependent columns in
/// order. Returns `None` when the intercept itself is unusable.
fn solve_pivoted(p: usize, gram: impl Fn(usize, usize) -> f64, rhs: &[f64]) -> Option<(Vec<f64>, usize)> {
    let diag: Vec<f64> = (0..p).map(|j| gram(j, j)).collect();
    let eq: Vec<f64> = diag
        .iter()
        .map(|&g| if g > 0.0 { 1.0 / g.sqrt() } else { 0.0 })
        .collect();
    let a = |j: usize, l: usize| gram(j, l) * eq[j] * eq[l];

    // L stored row-major over the kept set, indexed by original column.
    let mut l = vec![0.0; p * p];
    let mut kept: Vec<usize> = Vec::with_capacity(p);
    for j in 0..p {
        if eq[j] == 0.0 {
            continue;
        }
        let mut piv = a(j, j);
        for &k in &kept {
            piv -= l[j * p + k] * l[j * p + k];
        }
        if !(piv > PIVOT_TOL) {
            continue;
        }
        let ljj = piv.sqrt();
        l[j * p + j] = ljj;
        for i in (j + 1)..p {
            if eq[i] == 0.0 {
                continue;
            }
            let mut s = a(i, j);
            for &k in &kept {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / ljj;
        }
        kept.push(j);
    }
    if kept.first() != Some(&0) {
        return None;
    }
    // Forward then backward substitution on the kept columns.
    let mut v = vec![0.0; p];
    for (ki, &j) in kept.iter().enumerate() {
        let mut s = rhs[j] * eq[j];
        for &k in &kept[..ki] {
            s -= l[j * p + k] * v[k];
        }
        v[j] = s / l[j * p + j];
    }
    let mut beta = vec![0.0; p];
    for (ki, &j) in kept.iter().enumerate().rev() {
        let mut s = v[j];
        for &k in &kept[ki + 1..] {
            s -= l[k * p + j] * beta[k];
        }
        beta[j] = s / l[j * p + j];
    }
    for (b, e) in beta.iter_mut().zip(&eq) {
        *b *= e;
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return None;
    }
    Some((beta, kept.len()))
}

/// Standard error of a time-zero quantity built from a chain of node fits,
/// with the node contributions discounted at rate `r`.
pub fn chain_std_err(fits: &[NodeFit], r: f64, dt: f64) -> f64 {
    fits.iter()
        .enumerate()
        .map(|(k, f)| (-2.0 * r * k as f64 * dt).exp() * f.mean_var())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{sample_brownian, TimeGrid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn recovers_exact_cubic() {
        let x = normals(500, 1);
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v * v).collect();
        let d = Design { x: &x, aux: &[], db: None, sqrt_dt: 1.0, degree: 3 };
        let fit = fit_node(Exec::Sequential, &d, &y, 0).unwrap();
        for &v in &[-2.0, 0.0, 0.3, 1.7] {
            let want = 1.0 - 2.0 * v + 0.5 * v * v * v;
            assert!((fit.y(v, &[]) - want).abs() < 1e-9);
            assert!((fit.dy_dx(v, &[]) - (-2.0 + 1.5 * v * v)).abs() < 1e-8);
        }
        assert!(fit.rss < 1e-15);
    }

    #[test]
    fn controls_identify_z() {
        let grid = TimeGrid::new(0.01, 0.01).unwrap();
        let n = 4000;
        let x = normals(n, 2);
        let db = sample_brownian(&grid, n, 3).unwrap();
        let db0 = db.node(0);
        // Y_{k+1} = u(x) + z(x)·dB with u = x², z = 1 + x.
        let y: Vec<f64> = (0..n).map(|i| x[i] * x[i] + (1.0 + x[i]) * db0[i]).collect();
        let d = Design { x: &x, aux: &[], db: Some(db0), sqrt_dt: grid.dt().sqrt(), degree: 3 };
        let fit = fit_node(Exec::Parallel, &d, &y, 0).unwrap();
        assert!((fit.y(0.5, &[]) - 0.25).abs() < 1e-9);
        assert!((fit.z(0.5, &[], grid.dt().sqrt()) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn degenerate_state_keeps_only_intercept() {
        let x = vec![0.7; 100];
        let y: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let d = Design { x: &x, aux: &[], db: None, sqrt_dt: 1.0, degree: 3 };
        let fit = fit_node(Exec::Sequential, &d, &y, 0).unwrap();
        assert_eq!(fit.params, 1);
        assert!((fit.y(5.0, &[]) - 49.5).abs() < 1e-12);
    }

    #[test]
    fn collinear_aux_is_dropped() {
        let x = normals(300, 4);
        let ones = vec![1.0; 300];
        let zeros = vec![0.0; 300];
        let aux: [&[f64]; 2] = [&ones, &zeros];
        let y: Vec<f64> = x.iter().map(|v| 3.0 + v).collect();
        let d = Design { x: &x, aux: &aux, db: None, sqrt_dt: 1.0, degree: 2 };
        let fit = fit_node(Exec::Sequential, &d, &y, 0).unwrap();
        // 1, x̂, x̂² survive; the constant aux duplicates 1 and x̂, the zero aux is empty.
        assert_eq!(fit.params, 3);
        assert!((fit.y(1.0, &[1.0, 0.0]) - 4.0).abs() < 1e-10);
    }

    #[test]
    fn aux_linear_term() {
        let x = normals(400, 5);
        let a = normals(400, 6);
        let y: Vec<f64> = (0..400).map(|i| x[i] + 2.0 * a[i] - a[i] * x[i]).collect();
        let aux: [&[f64]; 1] = [&a];
        let d = Design { x: &x, aux: &aux, db: None, sqrt_dt: 1.0, degree: 1 };
        let fit = fit_node(Exec::Sequential, &d, &y, 0).unwrap();
        assert!((fit.y(0.4, &[-1.0]) - (0.4 - 2.0 + 0.4)).abs() < 1e-10);
    }

    #[test]
    fn nonfinite_target_is_singular() {
        let x = normals(50, 7);
        let mut y = x.clone();
        y[3] = f64::NAN;
        let d = Design { x: &x, aux: &[], db: None, sqrt_dt: 1.0, degree: 1 };
        assert!(matches!(
            fit_node(Exec::Sequential, &d, &y, 9),
            Err(Error::RegressionSingular { node: 9 })
        ));
    }

    #[test]
    fn strategies_agree_bitwise() {
        let x = normals(3000, 8);
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let d = Design { x: &x, aux: &[], db: None, sqrt_dt: 1.0, degree: 3 };
        let a = fit_node(Exec::Sequential, &d, &y, 0).unwrap();
        let b = fit_node(Exec::Parallel, &d, &y, 0).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn rebase_preserves_function(
            c in prop::collection::vec(-3.0f64..3.0, 4),
            aux in prop::array::uniform2(-2.0f64..2.0),
            z in prop::collection::vec(-2.0f64..2.0, 3),
            center in -2.0f64..2.0, scale in 0.2f64..3.0, x in -3.0f64..3.0, a in -2.0f64..2.0,
        ) {
            let fit = NodeFit {
                center: 0.3, scale: 1.4, basis: c, aux: vec![aux], z,
                rss: 0.0, params: 0, samples: 0,
            };
            let r = fit.rebase(center, scale);
            prop_assert!((r.y(x, &[a]) - fit.y(x, &[a])).abs() < 1e-9 * (1.0 + fit.y(x, &[a]).abs()));
            prop_assert!((r.z(x, &[a], 0.1) - fit.z(x, &[a], 0.1)).abs() < 1e-8 * (1.0 + fit.z(x, &[a], 0.1).abs()));
            let mid = fit.blend(&r, 0.5);
            prop_assert!((mid.y(x, &[a]) - fit.y(x, &[a])).abs() < 1e-9 * (1.0 + fit.y(x, &[a]).abs()));
        }
    }
}
