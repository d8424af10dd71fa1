//! Piecewise-constant functions on finitely many cells. These are the
//! "sampled functions" fed to the dyadic decomposition and the multilinear
//! transforms; all their norms and partial masses are exact cell sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{cast, Real};

/// Norm regime used for masses and normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Ordinary L^p on the half line.
    Lp,
    /// Sequence norm of per-unit-cell L^1 masses, raised to p and summed.
    LpL1,
}

/// A function constant on each cell `[xs[i], xs[i+1])`, zero outside.
#[derive(Clone, Debug)]
pub struct StepFunction<T> {
    xs: Vec<T>,
    vs: Vec<T>,
}

impl<T: Real> StepFunction<T> {
    pub fn new(xs: Vec<T>, vs: Vec<T>) -> Result<Self> {
        if xs.len() != vs.len() + 1 || vs.is_empty() {
            return Err(Error::config("step function needs n+1 breakpoints for n cells"));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("step function breakpoints must increase"));
        }
        if xs.iter().chain(vs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("step function entries must be finite"));
        }
        Ok(StepFunction { xs, vs })
    }

    /// Unit-width cells starting at `x0`.
    pub fn on_unit_cells(x0: T, values: Vec<T>) -> Result<Self> {
        let n = values.len();
        let xs = (0..=n).map(|i| x0 + cast::<T>(i as f64)).collect();
        StepFunction::new(xs, values)
    }

    /// Indicator of `[a, b)` scaled by `value`.
    pub fn indicator(a: T, b: T, value: T) -> Result<Self> {
        StepFunction::new(vec![a, b], vec![value])
    }

    pub fn breakpoints(&self) -> &[T] {
        &self.xs
    }

    pub fn values(&self) -> &[T] {
        &self.vs
    }

    pub fn support(&self) -> (T, T) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    /// Value at x; cells are right-open, so breakpoints take the value of
    /// the cell they begin.
    pub fn eval(&self, x: T) -> T {
        let n = self.vs.len();
        if x < self.xs[0] || x >= self.xs[n] {
            return T::zero();
        }
        let i = self.cell_index(x);
        self.vs[i]
    }

    fn cell_index(&self, x: T) -> usize {
        // last i with xs[i] <= x
        let mut lo = 0usize;
        let mut hi = self.xs.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.xs[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Pointwise scale by a constant.
    pub fn scaled(&self, c: T) -> Self {
        StepFunction { xs: self.xs.clone(), vs: self.vs.iter().map(|&v| v * c).collect() }
    }

    /// Zero the function outside `[a, b)`. Cells are split exactly at a
    /// and b but the breakpoint hull is preserved, so discretisations
    /// derived from the support stay aligned with the original.
    pub fn truncated(&self, a: T, b: T) -> Result<Self> {
        let mut xs = vec![self.xs[0]];
        let mut vs = Vec::new();
        for i in 0..self.vs.len() {
            let (ca, cb) = (self.xs[i], self.xs[i + 1]);
            let mut cuts = vec![ca];
            if a > ca && a < cb {
                cuts.push(a);
            }
            if b > ca && b < cb {
                cuts.push(b);
            }
            cuts.push(cb);
            for w in cuts.windows(2) {
                let mid = (w[0] + w[1]) * cast::<T>(0.5);
                let keep = mid >= a && mid < b;
                vs.push(if keep { self.vs[i] } else { T::zero() });
                xs.push(w[1]);
            }
        }
        StepFunction::new(xs, vs)
    }

    /// The tail `f - f_N`: zero below `n`, unchanged above.
    pub fn tail_above(&self, n: T) -> Result<Self> {
        let (_, hi) = self.support();
        self.truncated(n, hi)
    }

    /// int |f|^p over the whole support.
    pub fn lp_mass(&self, p: T) -> T {
        let mut s = T::zero();
        for i in 0..self.vs.len() {
            let w = self.xs[i + 1] - self.xs[i];
            s = s + self.vs[i].abs().powf(p) * w;
        }
        s
    }

    /// int over [a, b] of |f|^p (exact on cells).
    pub fn lp_mass_between(&self, a: T, b: T, p: T) -> T {
        let mut s = T::zero();
        for i in 0..self.vs.len() {
            let lo = self.xs[i].max(a);
            let hi = self.xs[i + 1].min(b);
            if hi > lo {
                s = s + self.vs[i].abs().powf(p) * (hi - lo);
            }
        }
        s
    }

    /// int over [a, b] of |f| (exact).
    pub fn l1_mass_between(&self, a: T, b: T) -> T {
        self.lp_mass_between(a, b, T::one())
    }

    /// Sum over unit cells [n, n+1) intersected with [a, b] of the per-cell
    /// L^1 mass raised to p.
    pub fn lp_l1_mass_between(&self, a: T, b: T, p: T) -> T {
        if !(b > a) {
            return T::zero();
        }
        let (slo, shi) = self.support();
        let lo = a.max(slo);
        let hi = b.min(shi);
        if !(hi > lo) {
            return T::zero();
        }
        let mut n = lo.floor();
        let mut s = T::zero();
        while n < hi {
            let ca = n.max(lo);
            let cb = (n + T::one()).min(hi);
            if cb > ca {
                let m = self.l1_mass_between(ca, cb);
                s = s + m.powf(p);
            }
            n = n + T::one();
        }
        s
    }

    /// Mass of `[a, b]` in the requested norm regime, already raised to p.
    pub fn mass_between(&self, a: T, b: T, p: T, kind: NormKind) -> T {
        match kind {
            NormKind::Lp => self.lp_mass_between(a, b, p),
            NormKind::LpL1 => self.lp_l1_mass_between(a, b, p),
        }
    }

    /// Norm (not the p-th power) in the requested regime.
    pub fn norm(&self, p: T, kind: NormKind) -> T {
        let (lo, hi) = self.support();
        self.mass_between(lo, hi, p, kind).powf(T::one() / p)
    }

    /// Rescale so the requested norm equals one.
    pub fn normalized(&self, p: T, kind: NormKind) -> Result<Self> {
        let n = self.norm(p, kind);
        if n <= T::zero() {
            return Err(Error::config("cannot normalise a zero-mass function"));
        }
        Ok(self.scaled(T::one() / n))
    }

    /// Values at a batch of points (used to tensor a grid).
    pub fn eval_many(&self, points: &[T]) -> Vec<T> {
        points.iter().map(|&x| self.eval(x)).collect()
    }

    /// Seeded test function: `cells` unit cells from x0, values uniform in
    /// [-1, 1]. Deterministic in the seed.
    pub fn seeded(x0: T, cells: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vs: Vec<T> = (0..cells).map(|_| cast::<T>(rng.gen_range(-1.0..1.0))).collect();
        StepFunction::on_unit_cells(x0, vs).expect("seeded step function is well formed")
    }

    /// Seeded nonnegative test function with strictly positive cell values.
    pub fn seeded_positive(x0: T, cells: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vs: Vec<T> = (0..cells).map(|_| cast::<T>(rng.gen_range(0.05..1.0))).collect();
        StepFunction::on_unit_cells(x0, vs).expect("seeded step function is well formed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masses_are_exact_cell_sums() {
        let f = StepFunction::new(vec![0.0, 1.0, 2.0, 4.0], vec![2.0, 0.0, 1.0]).unwrap();
        assert_eq!(f.lp_mass(1.0), 4.0);
        assert_eq!(f.lp_mass(2.0), 6.0);
        assert_eq!(f.lp_mass_between(0.5, 3.0, 1.0), 2.0);
        assert_eq!(f.eval(0.5), 2.0);
        assert_eq!(f.eval(3.9), 1.0);
        assert_eq!(f.eval(4.0), 0.0);
        assert_eq!(f.eval(4.1), 0.0);
    }

    #[test]
    fn lp_l1_equals_lp_for_p1_on_unit_cells() {
        let f = StepFunction::<f64>::seeded(0.0, 12, 7);
        let a = f.lp_mass(1.0);
        let b = f.lp_l1_mass_between(0.0, 12.0, 1.0);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn truncation_and_tail() {
        let f = StepFunction::new(vec![0.0f64, 1.0, 2.0], vec![3.0, 5.0]).unwrap();
        let t = f.tail_above(1.5).unwrap();
        assert_eq!(t.eval(1.0), 0.0);
        assert_eq!(t.eval(1.7), 5.0);
        assert!((t.lp_mass(1.0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn seeded_is_deterministic() {
        let a = StepFunction::<f64>::seeded(0.0, 8, 42);
        let b = StepFunction::<f64>::seeded(0.0, 8, 42);
        assert_eq!(a.values(), b.values());
    }
}
