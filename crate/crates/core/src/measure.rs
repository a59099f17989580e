//! Atomic probability measures on the real line.
//!
//! Everything here is 1-D: Wasserstein distances are exact via the
//! co-monotone (quantile) coupling, and the grid discretization follows the
//! `ξ ↦ ξ_n` construction used for approximating absolutely continuous laws.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Weighted list of atoms. Weights are uniform unless given explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
    weights: Option<Vec<f64>>,
    mean: f64,
}

impl EmpiricalMeasure {
    pub fn uniform(atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("measure atoms must be finite"));
        }
        let mean = atoms.iter().sum::<f64>() / atoms.len() as f64;
        Ok(Self {
            atoms,
            weights: None,
            mean,
        })
    }

    pub fn weighted(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if atoms.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("measure atoms must be finite"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        let mean = atoms.iter().zip(&weights).map(|(a, w)| a * w).sum();
        Ok(Self {
            atoms,
            weights: Some(weights),
            mean,
        })
    }

    pub fn dirac(x: f64) -> Self {
        Self {
            atoms: vec![x],
            weights: None,
            mean: x,
        }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }

    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.atoms.len() as f64,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    /// Cached first moment.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Weighted `k`-th raw moment.
    pub fn moment(&self, k: u32) -> f64 {
        let k = k as i32;
        match &self.weights {
            None => self.atoms.iter().map(|a| a.powi(k)).sum::<f64>() / self.len() as f64,
            Some(w) => self.atoms.iter().zip(w).map(|(a, w)| w * a.powi(k)).sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        (self.moment(2) - self.mean * self.mean).max(0.0)
    }

    /// `E[f(X)]` under this measure.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        (0..self.len()).map(|i| self.weight(i) * f(self.atoms[i])).sum()
    }

    /// Atoms sorted ascending with their weights.
    pub fn sorted(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = (0..self.len())
            .map(|i| (self.atoms[i], self.weight(i)))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    /// Merges equal atoms, returning distinct support points and masses.
    pub fn support(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (a, w) in self.sorted() {
            match out.last_mut() {
                Some(last) if last.0 == a => last.1 += w,
                _ => out.push((a, w)),
            }
        }
        out
    }
}

/// Exact `W_p` (p = 1 or 2) between two atomic measures on ℝ.
pub fn wasserstein_1d(order: u32, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if order != 1 && order != 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let cost = |d: f64| if order == 1 { d.abs() } else { d * d };

    let total = if mu.is_uniform() && nu.is_uniform() && mu.len() == nu.len() {
        let mut a = mu.atoms.clone();
        let mut b = nu.atoms.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter().zip(&b).map(|(x, y)| cost(x - y)).sum::<f64>() / a.len() as f64
    } else {
        let a = mu.sorted();
        let b = nu.sorted();
        let (mut i, mut j) = (0, 0);
        let (mut ca, mut cb) = (a[0].1, b[0].1);
        let mut u = 0.0;
        let mut total = 0.0;
        while i < a.len() && j < b.len() {
            let next = ca.min(cb);
            total += (next - u).max(0.0) * cost(a[i].0 - b[j].0);
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
        total
    };
    Ok(if order == 1 { total } else { total.sqrt() })
}

/// Uniform grid `x_i = i/n` with cells `[i/n, (i+1)/n)`, `i ∈ [-n², n²-1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscretizationSpec {
    pub n: u32,
}

impl DiscretizationSpec {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("grid resolution n must be positive"));
        }
        Ok(Self { n })
    }

    pub fn grid_point(&self, i: i64) -> f64 {
        i as f64 / self.n as f64
    }

    pub fn cell(&self, i: i64) -> (f64, f64) {
        (self.grid_point(i), self.grid_point(i + 1))
    }

    pub fn index_range(&self) -> (i64, i64) {
        let n2 = (self.n as i64) * (self.n as i64);
        (-n2, n2 - 1)
    }

    pub fn cell_index(&self, x: f64) -> Result<i64> {
        cell_index(x, self.n)
    }

    pub fn discretize(&self, x: f64) -> f64 {
        let n = self.n as f64;
        let n2 = n * n;
        if x < -n2 {
            -n2
        } else if x >= n2 {
            n2
        } else if (-n..n).contains(&x) {
            // In range by the guard above.
            self.grid_point(cell_index(x, self.n).unwrap_or(0))
        } else {
            // [n, n²) and [-n², -n) are covered by no indicator.
            0.0
        }
    }
}

/// Index `i` of the cell `[i/n, (i+1)/n)` containing `x`.
pub fn cell_index(x: f64, n: u32) -> Result<i64> {
    let nf = n as f64;
    if n == 0 || !x.is_finite() || x < -nf || x >= nf {
        return Err(Error::OutOfRange { x, n });
    }
    let mut i = (x * nf).floor() as i64;
    // Guard against rounding in x*n at cell boundaries.
    if i as f64 / nf > x {
        i -= 1;
    } else if (i + 1) as f64 / nf <= x {
        i += 1;
    }
    Ok(i)
}

/// Applies the grid map to every sample.
pub fn discretize_grid(samples: &[f64], n: u32) -> Vec<f64> {
    let spec = DiscretizationSpec { n: n.max(1) };
    samples.iter().map(|&x| spec.discretize(x)).collect()
}

/// Weighted `k`-th moment of `mu`.
pub fn moment(mu: &EmpiricalMeasure, k: u32) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("moment order must be >= 1"));
    }
    Ok(mu.moment(k))
}

/// Reads either a single column of atoms (uniform weights) or
/// `atom,weight` pairs. Blank lines and `#` comments are skipped.
pub fn read_measure<R: Read>(reader: R) -> Result<EmpiricalMeasure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    let mut paired: Option<bool> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Config(format!("measure file: {e}")))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let is_pair = rec.len() >= 2;
        if *paired.get_or_insert(is_pair) != is_pair {
            return Err(Error::Config("measure file mixes one- and two-column rows".into()));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("measure file: cannot parse {s:?}")))
        };
        atoms.push(parse(&rec[0])?);
        if is_pair {
            weights.push(parse(&rec[1])?);
        }
    }
    match paired {
        Some(true) => EmpiricalMeasure::weighted(atoms, weights),
        _ => EmpiricalMeasure::uniform(atoms),
    }
}

pub fn write_measure<W: Write>(mu: &EmpiricalMeasure, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    for i in 0..mu.len() {
        if mu.is_uniform() {
            wtr.write_record([format!("{:e}", mu.atoms[i])]).map_err(io)?;
        } else {
            wtr.write_record([format!("{:e}", mu.atoms[i]), format!("{:e}", mu.weight(i))])
                .map_err(io)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn u(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(v.to_vec()).unwrap()
    }

    #[test]
    fn wasserstein_examples() {
        let w = wasserstein_1d(2, &EmpiricalMeasure::dirac(0.0), &EmpiricalMeasure::dirac(1.0));
        assert_eq!(w.unwrap(), 1.0);
        let w = wasserstein_1d(1, &u(&[0.0, 1.0]), &u(&[0.5, 0.5])).unwrap();
        assert!((w - 0.5).abs() < 1e-15);
        let mu = u(&[0.3, -1.0, 2.5]);
        assert_eq!(wasserstein_1d(2, &mu, &mu).unwrap(), 0.0);
        assert!(matches!(
            wasserstein_1d(3, &mu, &mu),
            Err(Error::UnsupportedOrder(3))
        ));
    }

    #[test]
    fn weighted_and_uniform_paths_agree() {
        let a = u(&[0.0, 1.0, 4.0]);
        let b = u(&[2.0, -1.0, 0.5]);
        let aw = EmpiricalMeasure::weighted(vec![0.0, 1.0, 4.0], vec![1.0 / 3.0; 3]).unwrap();
        let direct = wasserstein_1d(1, &a, &b).unwrap();
        let merged = wasserstein_1d(1, &aw, &b).unwrap();
        assert!((direct - merged).abs() < 1e-12);
        // Different support sizes go through the merge path.
        let c = EmpiricalMeasure::weighted(vec![0.0, 2.0], vec![0.5, 0.5]).unwrap();
        let d = u(&[0.0, 0.0, 2.0, 2.0]);
        assert!(wasserstein_1d(2, &c, &d).unwrap() < 1e-12);
    }

    #[test]
    fn cell_index_examples() {
        assert_eq!(cell_index(0.7, 2).unwrap(), 1);
        assert_eq!(cell_index(-0.1, 2).unwrap(), -1);
        assert_eq!(cell_index(0.0, 5).unwrap(), 0);
        assert!(matches!(cell_index(2.0, 2), Err(Error::OutOfRange { .. })));
        assert!(matches!(cell_index(-2.01, 2), Err(Error::OutOfRange { .. })));
        assert_eq!(cell_index(-2.0, 2).unwrap(), -4);
        // Exact grid points land in the cell they open.
        for n in [3u32, 7, 10] {
            for i in -(n as i64)..(n as i64) {
                let x = i as f64 / n as f64;
                assert_eq!(cell_index(x, n).unwrap(), i, "x = {x}, n = {n}");
            }
        }
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize_grid(&[0.73], 2), vec![0.5]);
        assert_eq!(discretize_grid(&[-5.0], 2), vec![-4.0]);
        assert_eq!(discretize_grid(&[0.2, 0.7, -0.9], 2), vec![0.0, 0.5, -1.0]);
        // Upper clamp and the uncovered band, taken literally.
        assert_eq!(discretize_grid(&[4.0, 9.0], 2), vec![4.0, 4.0]);
        assert_eq!(discretize_grid(&[2.5, -3.0], 2), vec![0.0, 0.0]);
    }

    #[test]
    fn moment_examples() {
        assert_eq!(moment(&u(&[0.0, 1.0]), 1).unwrap(), 0.5);
        assert_eq!(moment(&EmpiricalMeasure::dirac(1.5), 3).unwrap(), 1.5f64.powi(3));
        assert_eq!(moment(&u(&[-1.0, 1.0]), 2).unwrap(), 1.0);
        assert!(moment(&u(&[1.0]), 0).is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(EmpiricalMeasure::weighted(vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::weighted(vec![0.0, 1.0], vec![-0.5, 1.5]).is_err());
        assert!(EmpiricalMeasure::uniform(vec![]).is_err());
        assert!(EmpiricalMeasure::uniform(vec![f64::NAN]).is_err());
    }

    #[test]
    fn discretization_converges_in_l2() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f64> = (0..20_000).map(|_| rng.sample(StandardNormal)).collect();
        let rms = |n: u32| {
            let d = discretize_grid(&s, n);
            (s.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
        };
        let gaps: Vec<f64> = [2, 4, 8, 16].iter().map(|&n| rms(n)).collect();
        for w in gaps.windows(2) {
            assert!(w[1] < w[0], "{gaps:?}");
        }
        // Coupling bound: W2 of the laws never exceeds the pointwise RMS gap.
        for n in [2u32, 4, 8, 16] {
            let w2 = wasserstein_1d(2, &u(&s), &u(&discretize_grid(&s, n))).unwrap();
            assert!(w2 <= rms(n) + 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let mu = EmpiricalMeasure::weighted(vec![0.5, -2.0], vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        write_measure(&mu, &mut buf).unwrap();
        assert_eq!(read_measure(buf.as_slice()).unwrap(), mu);
        let col = read_measure("# atoms\n1.0\n\n2.0\n3.0\n".as_bytes()).unwrap();
        assert!(col.is_uniform());
        assert_eq!(col.mean(), 2.0);
        assert!(read_measure("1.0\n2.0,0.5\n".as_bytes()).is_err());
    }

    fn atoms() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..12)
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in atoms(), b in atoms(), c in atoms(), order in 1u32..=2) {
            let (a, b, c) = (u(&a), u(&b), u(&c));
            let ab = wasserstein_1d(order, &a, &b).unwrap();
            let bc = wasserstein_1d(order, &b, &c).unwrap();
            let ac = wasserstein_1d(order, &a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn symmetric(a in atoms(), b in atoms()) {
            let (a, b) = (u(&a), u(&b));
            let d1 = wasserstein_1d(2, &a, &b).unwrap();
            let d2 = wasserstein_1d(2, &b, &a).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-9);
        }
    }
}
