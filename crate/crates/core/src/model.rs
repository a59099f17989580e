//! Hamiltonian models and the sampling-based Assumption 4.1 verifier.
//!
//! A model supplies `H(x, μ, y)` and every derivative the equilibrium,
//! representative and variational systems consume. Measure derivatives
//! may additionally be exposed in separable form
//! `∂_{·μ}H(x, μ, y, x̃) = Σ_l a_l(x, μ, y)·b_l(x̃, μ)`, which lets the
//! particle solvers evaluate `Ẽ[∂_{·μ}H(Θ, X̃)·δX̃]` in O(N) per node.

use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

/// Which part of the measure argument a model reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawDependence {
    /// Only `mean(μ)`: solvers may pass a Dirac at the mean.
    FirstMoment,
    Full,
}

/// Selects one of the three measure derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MuDerivative {
    Mu,
    XMu,
    YMu,
}

pub trait HamiltonianModel: Send + Sync + Debug {
    fn name(&self) -> String;
    fn r(&self) -> f64;

    fn h(&self, x: f64, mu: &EmpiricalMeasure, y: f64) -> f64;
    fn dh_x(&self, x: f64, mu: &EmpiricalMeasure, y: f64) -> f64;
    fn dh_y(&self, x: f64, mu: &EmpiricalMeasure, y: f64) -> f64;
    fn dh_xx(&self, x: f64, mu: &EmpiricalMeasure, y: f64) -> f64;
    fn dh_xy(&self, x: f64, mu: &EmpiricalMeasure, y: f64) -> f64;
    fn dh_yy(&self, x: f64, mu: &EmpiricalMeasure, y: f64) -> f64;

    fn dh_mu(&self, x: f64, mu: &EmpiricalMeasure, y: f64, xt: f64) -> f64;
    fn dh_xmu(&self, x: f64, mu: &EmpiricalMeasure, y: f64, xt: f64) -> f64;
    fn dh_ymu(&self, x: f64, mu: &EmpiricalMeasure, y: f64, xt: f64) -> f64;

    /// Feedback minimizer `α̂(x, μ, y)`, when known.
    fn alpha_hat(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64) -> Option<f64> {
        None
    }

    /// Running cost `f(x, μ, a)` for dynamics `b = a`, when known.
    fn cost_f(&self, _x: f64, _mu: &EmpiricalMeasure, _a: f64) -> Option<f64> {
        None
    }

    fn law_dependence(&self) -> LawDependence {
        LawDependence::Full
    }

    /// Rank of the separable form of the measure derivatives, if any.
    fn mu_rank(&self) -> Option<usize> {
        None
    }

    /// Left factors `a_l(x, μ, y)` of `kind`; `out.len() == mu_rank()`.
    fn mu_left(&self, _kind: MuDerivative, _x: f64, _mu: &EmpiricalMeasure, _y: f64, _out: &mut [f64]) {}

    /// Right factors `b_l(x̃, μ)` of `kind`.
    fn mu_right(&self, _kind: MuDerivative, _xt: f64, _mu: &EmpiricalMeasure, _out: &mut [f64]) {}

    /// `F = H − y·∂_yH`, the running cost along the optimal feedback.
    fn running_cost_f(&self, x: f64, mu: &EmpiricalMeasure, y: f64) -> f64 {
        self.h(x, mu, y) - y * self.dh_y(x, mu, y)
    }

    fn dmu(&self, kind: MuDerivative, x: f64, mu: &EmpiricalMeasure, y: f64, xt: f64) -> f64 {
        match kind {
            MuDerivative::Mu => self.dh_mu(x, mu, y, xt),
            MuDerivative::XMu => self.dh_xmu(x, mu, y, xt),
            MuDerivative::YMu => self.dh_ymu(x, mu, y, xt),
        }
    }
}

/// `f = a²/2 + (α/2)x² + β·x·mean(μ)` with `b = a`, giving
/// `H = −y²/2 + (α/2)x² + β·x·mean(μ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqModel {
    pub alpha: f64,
    pub beta: f64,
    pub r: f64,
}

pub fn make_lq_model(alpha: f64, beta: f64, r: f64) -> Result<LqModel> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive (got {alpha})")));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("r must be positive (got {r})")));
    }
    if !beta.is_finite() {
        return Err(Error::invalid("beta must be finite"));
    }
    Ok(LqModel { alpha, beta, r })
}

impl HamiltonianModel for LqModel {
    fn name(&self) -> String {
        format!("lq(alpha={}, beta={}, r={})", self.alpha, self.beta, self.r)
    }
    fn r(&self) -> f64 {
        self.r
    }
    fn h(&self, x: f64, mu: &EmpiricalMeasure, y: f64) -> f64 {
        -0.5 * y * y + 0.5 * self.alpha * x * x + self.beta * x * mu.mean()
    }
    fn dh_x(&self, x: f64, mu: &EmpiricalMeasure, _y: f64) -> f64 {
        self.alpha * x + self.beta * mu.mean()
    }
    fn dh_y(&self, _x: f64, _mu: &EmpiricalMeasure, y: f64) -> f64 {
        -y
    }
    fn dh_xx(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64) -> f64 {
        self.alpha
    }
    fn dh_xy(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64) -> f64 {
        0.0
    }
    fn dh_yy(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64) -> f64 {
        -1.0
    }
    fn dh_mu(&self, x: f64, _mu: &EmpiricalMeasure, _y: f64, _xt: f64) -> f64 {
        self.beta * x
    }
    fn dh_xmu(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64, _xt: f64) -> f64 {
        self.beta
    }
    fn dh_ymu(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64, _xt: f64) -> f64 {
        0.0
    }
    fn alpha_hat(&self, _x: f64, _mu: &EmpiricalMeasure, y: f64) -> Option<f64> {
        Some(-y)
    }
    fn cost_f(&self, x: f64, mu: &EmpiricalMeasure, a: f64) -> Option<f64> {
        Some(0.5 * a * a + 0.5 * self.alpha * x * x + self.beta * x * mu.mean())
    }
    fn law_dependence(&self) -> LawDependence {
        LawDependence::FirstMoment
    }
    fn mu_rank(&self) -> Option<usize> {
        Some(1)
    }
    fn mu_left(&self, kind: MuDerivative, x: f64, _mu: &EmpiricalMeasure, _y: f64, out: &mut [f64]) {
        out[0] = match kind {
            MuDerivative::Mu => self.beta * x,
            MuDerivative::XMu => self.beta,
            MuDerivative::YMu => 0.0,
        };
    }
    fn mu_right(&self, _kind: MuDerivative, _xt: f64, _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = 1.0;
    }
}

/// LQ plus a smooth cubic mean-field term in the cost:
/// `H = −y²/2 + (α/2)x² + β·x·m + γ·x·m³` with `m = mean(μ)`.
///
/// The Lions derivative of `μ ↦ m³` is `3m²`, so the measure derivatives
/// stay flat in `x̃` but now depend on the law. No closed form exists.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubicMeanModel {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r: f64,
}

impl CubicMeanModel {
    pub fn new(alpha: f64, beta: f64, gamma: f64, r: f64) -> Result<Self> {
        make_lq_model(alpha, beta, r)?;
        if !gamma.is_finite() {
            return Err(Error::invalid("gamma must be finite"));
        }
        Ok(Self { alpha, beta, gamma, r })
    }

    fn coupling(&self, mu: &EmpiricalMeasure) -> f64 {
        let m = mu.mean();
        self.beta + 3.0 * self.gamma * m * m
    }
}

impl HamiltonianModel for CubicMeanModel {
    fn name(&self) -> String {
        format!(
            "cubic(alpha={}, beta={}, gamma={}, r={})",
            self.alpha, self.beta, self.gamma, self.r
        )
    }
    fn r(&self) -> f64 {
        self.r
    }
    fn h(&self, x: f64, mu: &EmpiricalMeasure, y: f64) -> f64 {
        let m = mu.mean();
        -0.5 * y * y + 0.5 * self.alpha * x * x + self.beta * x * m + self.gamma * x * m * m * m
    }
    fn dh_x(&self, x: f64, mu: &EmpiricalMeasure, _y: f64) -> f64 {
        let m = mu.mean();
        self.alpha * x + self.beta * m + self.gamma * m * m * m
    }
    fn dh_y(&self, _x: f64, _mu: &EmpiricalMeasure, y: f64) -> f64 {
        -y
    }
    fn dh_xx(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64) -> f64 {
        self.alpha
    }
    fn dh_xy(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64) -> f64 {
        0.0
    }
    fn dh_yy(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64) -> f64 {
        -1.0
    }
    fn dh_mu(&self, x: f64, mu: &EmpiricalMeasure, _y: f64, _xt: f64) -> f64 {
        x * self.coupling(mu)
    }
    fn dh_xmu(&self, _x: f64, mu: &EmpiricalMeasure, _y: f64, _xt: f64) -> f64 {
        self.coupling(mu)
    }
    fn dh_ymu(&self, _x: f64, _mu: &EmpiricalMeasure, _y: f64, _xt: f64) -> f64 {
        0.0
    }
    fn alpha_hat(&self, _x: f64, _mu: &EmpiricalMeasure, y: f64) -> Option<f64> {
        Some(-y)
    }
    fn cost_f(&self, x: f64, mu: &EmpiricalMeasure, a: f64) -> Option<f64> {
        let m = mu.mean();
        Some(0.5 * a * a + 0.5 * self.alpha * x * x + self.beta * x * m + self.gamma * x * m * m * m)
    }
    fn law_dependence(&self) -> LawDependence {
        LawDependence::FirstMoment
    }
    fn mu_rank(&self) -> Option<usize> {
        Some(1)
    }
    fn mu_left(&self, kind: MuDerivative, x: f64, mu: &EmpiricalMeasure, _y: f64, out: &mut [f64]) {
        out[0] = match kind {
            MuDerivative::Mu => x * self.coupling(mu),
            MuDerivative::XMu => self.coupling(mu),
            MuDerivative::YMu => 0.0,
        };
    }
    fn mu_right(&self, _kind: MuDerivative, _xt: f64, _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = 1.0;
    }
}

/// Stationary coefficients of `𝒱(x, μ) = p·x + q·mean(μ)` for the LQ model.
pub fn lq_riccati(alpha: f64, beta: f64, r: f64) -> Result<(f64, f64)> {
    make_lq_model(alpha, beta, r)?;
    let disc = r * r + 4.0 * alpha + 4.0 * beta;
    if disc < 0.0 {
        return Err(Error::NoRealRoot { discriminant: disc });
    }
    let s = (r * r + 4.0 * alpha).sqrt();
    // Cancellation-free forms of the positive p-root and the small q-root.
    let p = 2.0 * alpha / (r + s);
    let q = 2.0 * beta / (s + disc.sqrt());
    Ok((p, q))
}

/// Region on which Assumption 4.1 is certified.
#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionBox {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub xtilde: (f64, f64),
    pub measures: Vec<EmpiricalMeasure>,
}

impl AssumptionBox {
    fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.x, self.y, self.xtilde] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid("assumption box ranges must satisfy lo <= hi"));
            }
        }
        if self.measures.is_empty() {
            return Err(Error::invalid("assumption box needs at least one measure"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    /// `(x, y, x̃, mean(μ))`.
    pub point: [f64; 4],
    pub condition: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// `(−λ₁ + 2λ₂) + r/2`; the assumption requires it to be negative.
    pub margin: f64,
    pub passed: bool,
    pub violations: Vec<Violation>,
    pub samples: usize,
}

/// Tightest constants of Assumption 4.1 observed on the box corners plus
/// `samples` pseudo-random points per measure.
pub fn verify_assumptions(
    model: &dyn HamiltonianModel,
    bx: &AssumptionBox,
    samples: usize,
) -> Result<AssumptionReport> {
    if samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    bx.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x4153_5355_4d50);
    let lerp = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;

    let mut points = Vec::new();
    for corner in 0..8u32 {
        let pick = |(lo, hi): (f64, f64), bit: u32| if corner & bit == 0 { lo } else { hi };
        points.push((pick(bx.x, 1), pick(bx.y, 2), pick(bx.xtilde, 4)));
    }
    for _ in 0..samples {
        points.push((
            lerp(bx.x, rng.random()),
            lerp(bx.y, rng.random()),
            lerp(bx.xtilde, rng.random()),
        ));
    }

    let mut max_yy = f64::NEG_INFINITY;
    let mut min_xx = f64::INFINITY;
    let mut lambda2 = 0.0f64;
    let mut lambda3 = 0.0f64;
    let mut violations = Vec::new();
    let mut count = 0;
    for mu in &bx.measures {
        for &(x, y, xt) in &points {
            count += 1;
            let yy = model.dh_yy(x, mu, y);
            let xx = model.dh_xx(x, mu, y);
            let xy = model.dh_xy(x, mu, y);
            let xm = model.dh_xmu(x, mu, y, xt);
            let ym = model.dh_ymu(x, mu, y, xt);
            let point = [x, y, xt, mu.mean()];
            if [yy, xx, xy, xm, ym].iter().any(|v| !v.is_finite()) {
                violations.push(Violation { point, condition: "non-finite derivative".into() });
                continue;
            }
            if yy >= 0.0 {
                violations.push(Violation { point, condition: format!("d_yy H = {yy} is not negative") });
            }
            if xx <= 0.0 {
                violations.push(Violation { point, condition: format!("d_xx H = {xx} is not positive") });
            }
            max_yy = max_yy.max(yy);
            min_xx = min_xx.min(xx);
            lambda2 = lambda2.max(xm.abs()).max(ym.abs());
            lambda3 = lambda3.max(xx.abs()).max(yy.abs()).max(xy.abs());
        }
    }
    let lambda1_raw = (-max_yy).min(min_xx);
    let lambda1 = if lambda1_raw.is_finite() { lambda1_raw.max(0.0) } else { 0.0 };
    let margin = (-lambda1 + 2.0 * lambda2) + model.r() / 2.0;
    if margin >= 0.0 {
        violations.push(Violation {
            point: [f64::NAN; 4],
            condition: format!("-lambda1 + 2 lambda2 = {} is not below -r/2 = {}", -lambda1 + 2.0 * lambda2, -model.r() / 2.0),
        });
    }
    let passed = violations.is_empty() && lambda1 > 0.0;
    Ok(AssumptionReport {
        lambda1,
        lambda2,
        lambda3,
        margin,
        passed,
        violations,
        samples: count,
    })
}

/// Model selection as it appears in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Lq { alpha: f64, beta: f64, r: f64 },
    Cubic { alpha: f64, beta: f64, gamma: f64, r: f64 },
}

impl ModelSpec {
    pub fn build(&self) -> Result<Arc<dyn HamiltonianModel>> {
        Ok(match *self {
            ModelSpec::Lq { alpha, beta, r } => Arc::new(make_lq_model(alpha, beta, r)?),
            ModelSpec::Cubic { alpha, beta, gamma, r } => {
                Arc::new(CubicMeanModel::new(alpha, beta, gamma, r)?)
            }
        })
    }

    pub fn r(&self) -> f64 {
        match *self {
            ModelSpec::Lq { r, .. } | ModelSpec::Cubic { r, .. } => r,
        }
    }

    /// Same model with the mean-field coupling switched off.
    pub fn decoupled(&self) -> ModelSpec {
        match *self {
            ModelSpec::Lq { alpha, r, .. } => ModelSpec::Lq { alpha, beta: 0.0, r },
            ModelSpec::Cubic { alpha, r, .. } => ModelSpec::Cubic { alpha, beta: 0.0, gamma: 0.0, r },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lq() -> LqModel {
        make_lq_model(1.0, 0.25, 0.1).unwrap()
    }

    fn models() -> Vec<Box<dyn HamiltonianModel>> {
        vec![
            Box::new(lq()),
            Box::new(CubicMeanModel::new(1.0, 0.1, 0.1, 0.1).unwrap()),
        ]
    }

    #[test]
    fn lq_examples() {
        let m = lq();
        assert_eq!(m.h(2.0, &EmpiricalMeasure::dirac(0.0), 1.0), 1.5);
        assert_eq!(m.h(1.0, &EmpiricalMeasure::dirac(1.0), 0.0), 0.75);
        let m0 = make_lq_model(1.0, 0.0, 0.1).unwrap();
        assert_eq!(m0.dh_xmu(0.3, &EmpiricalMeasure::dirac(2.0), 1.0, -1.0), 0.0);
        assert!(make_lq_model(0.0, 0.1, 0.1).is_err());
        assert!(make_lq_model(1.0, 0.1, -0.1).is_err());
    }

    #[test]
    fn riccati_roots() {
        let (p, q) = lq_riccati(1.0, 0.25, 0.1).unwrap();
        assert!((p * p + 0.1 * p - 1.0).abs() < 1e-12);
        assert!((q * q + 4.01f64.sqrt() * q - 0.25).abs() < 1e-12);
        assert!((p - 0.95125).abs() < 1e-5 && (q - 0.11790).abs() < 1e-5);
        assert_eq!(lq_riccati(1.0, 0.0, 0.1).unwrap().1, 0.0);
        let (p, _) = lq_riccati(1.0, 0.0, 1.0).unwrap();
        assert!((p - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-14);
        assert!(matches!(lq_riccati(1.0, -1.1, 0.1), Err(Error::NoRealRoot { .. })));
    }

    fn unit_box(measures: Vec<EmpiricalMeasure>) -> AssumptionBox {
        AssumptionBox { x: (-2.0, 2.0), y: (-2.0, 2.0), xtilde: (-2.0, 2.0), measures }
    }

    #[test]
    fn assumption_examples() {
        let bx = unit_box(vec![EmpiricalMeasure::dirac(0.0), EmpiricalMeasure::dirac(1.0)]);
        let rep = verify_assumptions(&lq(), &bx, 50).unwrap();
        assert!(rep.passed);
        assert_eq!((rep.lambda1, rep.lambda2, rep.lambda3), (1.0, 0.25, 1.0));
        assert!((rep.margin + 0.45).abs() < 1e-12);
        let bad = make_lq_model(1.0, 0.6, 0.1).unwrap();
        assert!(!verify_assumptions(&bad, &bx, 50).unwrap().passed);
        let bad = make_lq_model(1.0, 0.25, 2.5).unwrap();
        assert!(!verify_assumptions(&bad, &bx, 50).unwrap().passed);
        assert!(verify_assumptions(&lq(), &bx, 0).is_err());
    }

    #[test]
    fn cubic_passes_on_its_working_box() {
        let m = CubicMeanModel::new(1.0, 0.1, 0.1, 0.1).unwrap();
        let measures = (-4..=4).map(|k| EmpiricalMeasure::dirac(k as f64 / 4.0)).collect();
        let rep = verify_assumptions(&m, &unit_box(measures), 100).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!((rep.lambda2 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn running_cost_identity_and_minimality() {
        let mu = EmpiricalMeasure::uniform(vec![-0.4, 0.9, 1.3]).unwrap();
        for m in models() {
            for &(x, y) in &[(0.0, 0.0), (1.2, -0.7), (-2.0, 3.0)] {
                let f = m.running_cost_f(x, &mu, y);
                assert_eq!(f, m.h(x, &mu, y) - y * m.dh_y(x, &mu, y));
                assert_eq!(m.running_cost_f(x, &mu, 0.0), m.h(x, &mu, 0.0));
                let a_star = m.alpha_hat(x, &mu, y).unwrap();
                let h = m.h(x, &mu, y);
                assert!((a_star * y + m.cost_f(x, &mu, a_star).unwrap() - h).abs() < 1e-12);
                for da in [-0.3, -0.01, 0.01, 0.3] {
                    let a = a_star + da;
                    assert!(h <= a * y + m.cost_f(x, &mu, a).unwrap() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn separable_factors_match_kernels() {
        let mu = EmpiricalMeasure::uniform(vec![0.2, 1.1]).unwrap();
        for m in models() {
            let rank = m.mu_rank().unwrap();
            let (mut a, mut b) = (vec![0.0; rank], vec![0.0; rank]);
            for kind in [MuDerivative::Mu, MuDerivative::XMu, MuDerivative::YMu] {
                for &(x, y, xt) in &[(0.5, -0.2, 1.0), (-1.0, 2.0, -3.0)] {
                    m.mu_left(kind, x, &mu, y, &mut a);
                    m.mu_right(kind, xt, &mu, &mut b);
                    let sep: f64 = a.iter().zip(&b).map(|(u, v)| u * v).sum();
                    assert!((sep - m.dmu(kind, x, &mu, y, xt)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn lions_derivative_of_cubic_matches_mean_perturbation() {
        // Shifting every atom by eps moves m by eps; d/d eps of H equals
        // E[∂_μH(x, μ, y, ξ)] for a translation.
        let m = CubicMeanModel::new(1.0, 0.1, 0.3, 0.1).unwrap();
        let atoms = vec![-0.5, 0.2, 0.9];
        let mu = EmpiricalMeasure::uniform(atoms.clone()).unwrap();
        let eps = 1e-5;
        let shift = |e: f64| EmpiricalMeasure::uniform(atoms.iter().map(|a| a + e).collect()).unwrap();
        let (x, y) = (0.7, 0.4);
        let fd = (m.h(x, &shift(eps), y) - m.h(x, &shift(-eps), y)) / (2.0 * eps);
        let lions = mu.expect(|xt| m.dh_mu(x, &mu, y, xt));
        assert!((fd - lions).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn finite_differences_match(x in -3.0f64..3.0, y in -3.0f64..3.0, c in -1.0f64..1.0) {
            let mu = EmpiricalMeasure::uniform(vec![c - 0.5, c + 0.5]).unwrap();
            let h = 1e-4;
            for m in models() {
                let dx = (m.h(x + h, &mu, y) - m.h(x - h, &mu, y)) / (2.0 * h);
                let dy = (m.h(x, &mu, y + h) - m.h(x, &mu, y - h)) / (2.0 * h);
                let dxy = (m.dh_x(x, &mu, y + h) - m.dh_x(x, &mu, y - h)) / (2.0 * h);
                let tol = |v: f64| 1e-4 * (1.0 + v.abs());
                prop_assert!((dx - m.dh_x(x, &mu, y)).abs() < tol(dx));
                prop_assert!((dy - m.dh_y(x, &mu, y)).abs() < tol(dy));
                prop_assert!((dxy - m.dh_xy(x, &mu, y)).abs() < tol(dxy));
                let dxx = (m.dh_x(x + h, &mu, y) - m.dh_x(x - h, &mu, y)) / (2.0 * h);
                prop_assert!((dxx - m.dh_xx(x, &mu, y)).abs() < tol(dxx));
            }
        }

        #[test]
        fn lq_measure_derivative_is_flat(x in -3.0f64..3.0, y in -3.0f64..3.0, xt in -5.0f64..5.0) {
            let m = lq();
            let mu = EmpiricalMeasure::uniform(vec![x, y]).unwrap();
            prop_assert_eq!(m.dh_mu(x, &mu, y, xt), 0.25 * x);
        }

        #[test]
        fn report_is_monotone_in_the_box(
            lo in 0.0f64..1.5, extra in 0.0f64..1.5, gamma in 0.0f64..0.3, samples in 1usize..20,
        ) {
            let m = CubicMeanModel::new(1.0, 0.1, gamma, 0.1).unwrap();
            let family = |hi: f64| {
                vec![EmpiricalMeasure::dirac(-hi), EmpiricalMeasure::dirac(0.0), EmpiricalMeasure::dirac(hi)]
            };
            let small = unit_box(family(lo));
            let mut large = unit_box(family(lo + extra));
            large.measures.extend(family(lo));
            large.x = (-3.0, 3.0);
            let a = verify_assumptions(&m, &small, samples).unwrap();
            let b = verify_assumptions(&m, &large, samples).unwrap();
            prop_assert!(!( !a.passed && b.passed));
            prop_assert!(b.margin >= a.margin);
        }
    }
}
