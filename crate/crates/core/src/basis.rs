//! Bounded solution families theta(x, lambda) of the unperturbed equation
//! -y'' + U y = lambda y: plane waves for U = 0 and Floquet-Bloch
//! solutions for periodic U, built from the monodromy matrix over one
//! period.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::ode::{solve_sampled, Mat2};
use crate::potential::PotentialSpec;
use crate::scalar::{cast, cis, to_f64, Real};

const MONODROMY_TOL: f64 = 1e-12;
const BAND_EDGE_MARGIN: f64 = 1e-6;
/// samples of the fundamental matrix cached over one period
const PERIOD_TABLE: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    Free,
    Bloch,
}

#[derive(Clone, Debug)]
pub struct BlochData<T: Real> {
    pub period: T,
    pub monodromy: Mat2<T>,
    pub trace: T,
    /// Floquet multiplier on the unit circle
    pub multiplier: Complex<T>,
    multiplier_arg: T,
    /// (theta(0), theta'(0)) scaled so sup |theta| = 1 over a period
    init: (Complex<T>, Complex<T>),
    table: Vec<Mat2<T>>,
    u: PotentialSpec<T>,
}

#[derive(Clone, Debug)]
pub struct ThetaBasis<T: Real> {
    pub lambda: T,
    /// Im(theta conj(theta')), constant in x; negative sqrt(lambda) for the
    /// free basis
    pub imw: T,
    bloch: Option<BlochData<T>>,
}

impl<T: Real> ThetaBasis<T> {
    pub fn kind(&self) -> BasisKind {
        if self.bloch.is_some() {
            BasisKind::Bloch
        } else {
            BasisKind::Free
        }
    }

    /// Plane-wave basis exp(i sqrt(lambda) x).
    pub fn free(lambda: T) -> Result<Self> {
        if !(lambda > T::zero()) {
            return Err(Error::domain(format!("lambda must be positive, got {lambda}")));
        }
        Ok(ThetaBasis { lambda, imw: -lambda.sqrt(), bloch: None })
    }

    /// Bloch basis for a periodic potential, lambda strictly inside a band.
    pub fn bloch(u: &PotentialSpec<T>, period: T, lambda: T) -> Result<Self> {
        if !(lambda > T::zero()) {
            return Err(Error::domain(format!("lambda must be positive, got {lambda}")));
        }
        if !(period > T::zero()) {
            return Err(Error::config("period must be positive"));
        }
        let k = |x: T| u.eval(x) - lambda;
        let xs: Vec<T> = (1..=PERIOD_TABLE)
            .map(|i| period * cast::<T>(i as f64 / PERIOD_TABLE as f64))
            .collect();
        let sol = solve_sampled(&k, T::zero(), &xs, cast(MONODROMY_TOL))?;
        let mut table = Vec::with_capacity(PERIOD_TABLE + 1);
        table.push(Mat2::identity());
        table.extend(sol.mats.iter().copied());
        let m = *table.last().unwrap();
        let trace = m.trace();
        let half_tr = trace * cast::<T>(0.5);
        if half_tr.abs() > T::one() - cast(BAND_EDGE_MARGIN * 0.5) {
            return Err(Error::BandEdge { lambda: to_f64(lambda), trace: to_f64(trace) });
        }
        let s = (T::one() - half_tr * half_tr).sqrt();
        let multiplier = Complex::new(half_tr, s);
        // eigenvector of the monodromy for the multiplier
        let v: (Complex<T>, Complex<T>) = if m.b.abs() >= m.c.abs() {
            (Complex::new(m.b, T::zero()), multiplier - Complex::new(m.a, T::zero()))
        } else {
            (multiplier - Complex::new(m.d, T::zero()), Complex::new(m.c, T::zero()))
        };
        // normalise: sup of |theta| over the period table equals one
        let mut sup = T::zero();
        for mat in &table {
            let th = mat.apply_c(v).0;
            sup = sup.max(th.norm());
        }
        if !(sup > T::zero()) {
            return Err(Error::DegenerateBasis { wronskian: 0.0 });
        }
        let init = (v.0.unscale(sup), v.1.unscale(sup));
        let imw = (init.0 * init.1.conj()).im;
        let scale = init.0.norm_sqr() + init.1.norm_sqr();
        if imw.abs() < cast::<T>(1e-12) * scale {
            return Err(Error::DegenerateBasis { wronskian: to_f64(imw) });
        }
        Ok(ThetaBasis {
            lambda,
            imw,
            bloch: Some(BlochData {
                period,
                monodromy: m,
                trace,
                multiplier,
                multiplier_arg: s.atan2(half_tr),
                init,
                table,
                u: u.clone(),
            }),
        })
    }

    pub fn bloch_data(&self) -> Option<&BlochData<T>> {
        self.bloch.as_ref()
    }

    /// theta and theta' at x >= 0.
    pub fn eval(&self, x: T) -> (Complex<T>, Complex<T>) {
        match &self.bloch {
            None => {
                let w = self.lambda.sqrt();
                let th = cis(w * x);
                (th, th * Complex::new(T::zero(), w))
            }
            Some(b) => {
                let periods = (x / b.period).floor();
                let r = x - periods * b.period;
                let (r, periods) = if r < T::zero() {
                    (r + b.period, periods - T::one())
                } else {
                    (r, periods)
                };
                let phi = self.local_matrix(b, r);
                let v = phi.apply_c(b.init);
                let rot = cis(b.multiplier_arg * periods);
                (v.0 * rot, v.1 * rot)
            }
        }
    }

    /// Fundamental matrix at offset r within one period: nearest cached
    /// sample refined by short high-order steps.
    fn local_matrix(&self, b: &BlochData<T>, r: T) -> Mat2<T> {
        let n = b.table.len() - 1;
        let step = b.period / cast::<T>(n as f64);
        let idx = (to_f64(r / step).floor() as usize).min(n);
        let x_idx = step * cast::<T>(idx as f64);
        let base = b.table[idx];
        let dr = r - x_idx;
        if dr.abs() <= b.period * T::epsilon() * cast(4.0) {
            return base;
        }
        let k = |x: T| b.u.eval(x) - self.lambda;
        let h = dr * cast::<T>(0.5);
        let s1 = crate::ode::magnus4_step(&k, x_idx, h);
        let s2 = crate::ode::magnus4_step(&k, x_idx + h, h);
        s2.mul(&s1).mul(&base)
    }

    /// Sup of |theta|: both families are normalised to one.
    pub fn sup_theta(&self) -> T {
        T::one()
    }

    /// The unperturbed potential U this basis solves against (0 if free).
    pub fn unperturbed(&self, x: T) -> T {
        match &self.bloch {
            None => T::zero(),
            Some(b) => b.u.eval(x),
        }
    }

    /// Max relative Wronskian drift of this basis over a grid.
    pub fn wronskian_drift(&self, grid: &[T]) -> Result<T> {
        wronskian_drift_of(|x| self.eval(x), grid)
    }
}

/// Relative drift of Im(theta conj(theta')) over a grid for any solution
/// family handle.
pub fn wronskian_drift_of<T: Real>(
    eval: impl Fn(T) -> (Complex<T>, Complex<T>),
    grid: &[T],
) -> Result<T> {
    if grid.is_empty() {
        return Err(Error::domain("empty grid"));
    }
    let w0 = {
        let (th, dth) = eval(grid[0]);
        (th * dth.conj()).im
    };
    if w0.abs() < cast(1e-12) {
        return Err(Error::DegenerateBasis { wronskian: to_f64(w0) });
    }
    let mut drift = T::zero();
    for &x in grid.iter().skip(1) {
        let (th, dth) = eval(x);
        let w = (th * dth.conj()).im;
        drift = drift.max((w - w0).abs() / w0.abs());
    }
    Ok(drift)
}

/// Trace of the monodromy matrix of -y'' + U y = lambda y over one period.
pub fn band_trace<T: Real>(u: &PotentialSpec<T>, period: T, lambda: T) -> Result<T> {
    let k = |x: T| u.eval(x) - lambda;
    let m = crate::ode::propagate(&k, T::zero(), period, cast(MONODROMY_TOL))?;
    Ok(m.trace())
}

#[derive(Clone, Copy, Debug)]
pub struct BandPoint<T> {
    pub lambda: T,
    pub trace: T,
    pub in_band: bool,
}

/// Sample the discriminant over a lambda grid.
pub fn band_scan<T: Real>(
    u: &PotentialSpec<T>,
    period: T,
    lambdas: &[T],
) -> Result<Vec<BandPoint<T>>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let trace = band_trace(u, period, lambda)?;
            Ok(BandPoint { lambda, trace, in_band: trace.abs() < cast(2.0) })
        })
        .collect()
}

/// Locate band edges (|trace| = 2 crossings) by scanning then bisecting.
pub fn band_edges<T: Real>(
    u: &PotentialSpec<T>,
    period: T,
    lo: T,
    hi: T,
    scan_points: usize,
    bisect_tol: T,
) -> Result<Vec<T>> {
    if scan_points < 2 {
        return Err(Error::domain("need at least two scan points"));
    }
    let g = |lambda: T| -> Result<T> { Ok(band_trace(u, period, lambda)?.abs() - cast(2.0)) };
    let mut edges = Vec::new();
    let mut prev_l = lo;
    let mut prev_v = g(lo)?;
    for i in 1..scan_points {
        let l = lo + (hi - lo) * cast::<T>(i as f64 / (scan_points - 1) as f64);
        let v = g(l)?;
        if (prev_v <= T::zero()) != (v <= T::zero()) {
            let (mut a, mut b, mut fa) = (prev_l, l, prev_v);
            while (b - a).abs() > bisect_tol {
                let m = (a + b) * cast::<T>(0.5);
                let fm = g(m)?;
                if (fa <= T::zero()) == (fm <= T::zero()) {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            edges.push((a + b) * cast::<T>(0.5));
        }
        prev_l = l;
        prev_v = v;
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_basis_identities() {
        let b = ThetaBasis::free(4.0f64).unwrap();
        let (th, dth) = b.eval(0.0);
        assert!((th - Complex::new(1.0, 0.0)).norm() < 1e-15);
        assert!((dth - Complex::new(0.0, 2.0)).norm() < 1e-15);
        assert!((b.imw + 2.0).abs() < 1e-15);

        let b1 = ThetaBasis::free(1.0f64).unwrap();
        let (th_pi, _) = b1.eval(std::f64::consts::PI);
        assert!((th_pi - Complex::new(-1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn free_wronskian_exact() {
        let b = ThetaBasis::free(1.0f64).unwrap();
        let grid: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let drift = b.wronskian_drift(&grid).unwrap();
        assert!(drift < 1e-14);
    }

    #[test]
    fn lambda_domain_checked() {
        assert!(ThetaBasis::free(-1.0f64).is_err());
        assert!(ThetaBasis::free(0.0f64).is_err());
    }

    #[test]
    fn corrupted_derivative_flagged() {
        let b = ThetaBasis::free(1.0f64).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| 0.5 * i as f64).collect();
        let drift = wronskian_drift_of(
            |x| {
                let (th, dth) = b.eval(x);
                // inject a growing error into theta'
                (th, dth.scale(1.0 + 0.01 * x))
            },
            &grid,
        )
        .unwrap();
        assert!(drift > 1e-2, "corruption must show up, drift {drift}");
    }

    fn mathieu() -> PotentialSpec<f64> {
        PotentialSpec::periodic(2.0, 2.0 * std::f64::consts::PI)
    }

    #[test]
    fn bloch_mid_band_construction() {
        let u = mathieu();
        let period = 2.0 * std::f64::consts::PI;
        // find a mid-band energy by scanning
        let lambdas: Vec<f64> = (0..60).map(|i| 0.5 + 0.05 * i as f64).collect();
        let scan = band_scan(&u, period, &lambdas).unwrap();
        let mid = scan
            .iter()
            .find(|p| p.trace.abs() < 1.2)
            .expect("a mid-band point exists in [0.5, 3.5]");
        let basis = ThetaBasis::bloch(&u, period, mid.lambda).unwrap();
        assert!(basis.imw.abs() > 1e-8);

        // uniform boundedness with the chosen normalisation
        for i in 0..200 {
            let x = 0.37 * i as f64;
            let (th, _) = basis.eval(x);
            assert!(th.norm() <= 1.0 + 1e-6, "sup-normalised theta exceeded 1 at {x}");
        }

        // Wronskian drift over 50 periods
        let grid: Vec<f64> = (0..=400).map(|i| 50.0 * period * i as f64 / 400.0).collect();
        let drift = basis.wronskian_drift(&grid).unwrap();
        assert!(drift < 1e-8, "drift {drift:.3e}");

        // Floquet periodicity theta(x+T) = rho theta(x)
        let rho = basis.bloch_data().unwrap().multiplier;
        assert!((rho.norm() - 1.0).abs() < 1e-10);
        for i in 0..40 {
            let x = 1.3 * i as f64;
            let (th, _) = basis.eval(x);
            let (th_t, _) = basis.eval(x + period);
            assert!((th_t - rho * th).norm() < 1e-8, "floquet violated at {x}");
        }
    }

    #[test]
    fn band_edge_rejected() {
        let u = mathieu();
        let period = 2.0 * std::f64::consts::PI;
        let lambdas: Vec<f64> = (0..80).map(|i| 0.05 + 0.05 * i as f64).collect();
        let scan = band_scan(&u, period, &lambdas).unwrap();
        let gap = scan.iter().find(|p| p.trace.abs() > 2.5).expect("a gap point exists");
        let err = ThetaBasis::bloch(&u, period, gap.lambda).unwrap_err();
        assert!(matches!(err, Error::BandEdge { .. }), "{err}");
    }

    #[test]
    fn band_edges_bisection() {
        let u = mathieu();
        let period = 2.0 * std::f64::consts::PI;
        let edges = band_edges(&u, period, 0.05, 4.0, 80, 1e-8).unwrap();
        assert!(!edges.is_empty());
        for &e in &edges {
            let tr = band_trace(&u, period, e).unwrap();
            assert!((tr.abs() - 2.0).abs() < 1e-5, "edge {e}: |trace|-2 = {:.2e}", tr.abs() - 2.0);
        }
    }
}
