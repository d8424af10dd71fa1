//! Integration of the perturbed eigenfunction equation
//! -y'' + W y = lambda y and diagnostics for solution boundedness and
//! subordinacy across energies.

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ode::{solve_sampled, Mat2, SolveStats};
use crate::potential::PotentialSpec;
use crate::scalar::{cast, to_f64, Real};

/// One solved trajectory of the eigenfunction equation at a single energy.
#[derive(Clone, Debug)]
pub struct Trajectory<T: Real> {
    pub lambda: T,
    pub xs: Vec<T>,
    pub y: Vec<Complex<T>>,
    pub dy: Vec<Complex<T>>,
    /// |y|^2 + |y'|^2 / lambda, flat for free solutions
    pub amp: Vec<T>,
    pub init: (Complex<T>, Complex<T>),
    pub tol: T,
    pub stats: SolveStats,
}

impl<T: Real> Trajectory<T> {
    pub fn sup_amp(&self) -> T {
        self.amp.iter().fold(T::zero(), |s, &a| s.max(a))
    }

    /// Index range of samples falling inside [a, b].
    fn window_indices(&self, a: T, b: T) -> std::ops::Range<usize> {
        let lo = self.xs.partition_point(|&x| x < a);
        let hi = self.xs.partition_point(|&x| x <= b);
        lo..hi
    }
}

/// Sample grid covering dyadic windows [x_max/2^{j+1}, x_max/2^j] for
/// j = 0..windows-1, each with `per_window` uniform samples, ascending.
pub fn window_grid<T: Real>(x_max: T, windows: usize, per_window: usize) -> Vec<T> {
    let mut xs = Vec::with_capacity(windows * per_window);
    for j in (0..windows).rev() {
        let hi = x_max / cast::<T>((1u64 << j) as f64);
        let lo = hi * cast::<T>(0.5);
        for i in 0..per_window {
            let t = cast::<T>((i + 1) as f64 / per_window as f64);
            xs.push(lo + (hi - lo) * t);
        }
    }
    xs.dedup_by(|a, b| *a <= *b);
    xs
}

fn amp_of<T: Real>(lambda: T, y: Complex<T>, dy: Complex<T>) -> T {
    y.norm_sqr() + dy.norm_sqr() / lambda
}

/// Integrate -y'' + W y = lambda y from (y(0), y'(0)) over a sample grid.
///
/// The grid must increase and start above zero; x = 0 is prepended. A few
/// spans are re-integrated at a tighter tolerance to verify local
/// consistency of the solution.
pub fn integrate_eigenfunction<T: Real>(
    w: &PotentialSpec<T>,
    lambda: T,
    init: (Complex<T>, Complex<T>),
    samples: &[T],
    tol: T,
) -> Result<Trajectory<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::domain(format!("lambda must be positive, got {lambda}")));
    }
    if !(tol >= cast(1e-13) && tol <= cast(1e-6)) {
        return Err(Error::domain("tol must lie in [1e-13, 1e-6]"));
    }
    if samples.is_empty() || samples[0] <= T::zero() {
        return Err(Error::domain("sample grid must start above zero"));
    }
    if *samples.last().unwrap() >= cast(1e7) {
        return Err(Error::domain("x_max must stay below 1e7"));
    }
    let k = |x: T| w.eval(x) - lambda;
    let sol = solve_sampled(&k, T::zero(), samples, tol)?;

    let mut xs = Vec::with_capacity(samples.len() + 1);
    let mut y = Vec::with_capacity(samples.len() + 1);
    let mut dy = Vec::with_capacity(samples.len() + 1);
    xs.push(T::zero());
    y.push(init.0);
    dy.push(init.1);
    for (i, m) in sol.mats.iter().enumerate() {
        let v = m.apply_c(init);
        xs.push(samples[i]);
        y.push(v.0);
        dy.push(v.1);
    }
    let amp: Vec<T> = y.iter().zip(dy.iter()).map(|(&a, &b)| amp_of(lambda, a, b)).collect();
    let traj = Trajectory { lambda, xs, y, dy, amp, init, tol, stats: sol.stats };
    verify_local_consistency(&traj, w)?;
    Ok(traj)
}

/// Re-integrate a handful of spans at tol/100 and compare against the
/// stored samples; failure indicates the integrator did not meet its
/// tolerance on this potential.
fn verify_local_consistency<T: Real>(traj: &Trajectory<T>, w: &PotentialSpec<T>) -> Result<()> {
    let n = traj.xs.len();
    if n < 3 {
        return Ok(());
    }
    let k = |x: T| w.eval(x) - traj.lambda;
    let checks = 6.min(n - 1);
    let fine_tol = (traj.tol * cast(0.01)).max(cast(1e-13));
    for c in 0..checks {
        let i = (n - 2) * (c + 1) / checks;
        let (x0, x1) = (traj.xs[i], traj.xs[i + 1]);
        if !(x1 > x0) {
            continue;
        }
        let m = crate::ode::propagate(&k, x0, x1, fine_tol)?;
        let got = m.apply_c((traj.y[i], traj.dy[i]));
        let want = (traj.y[i + 1], traj.dy[i + 1]);
        let scale = want.0.norm() + want.1.norm() + T::epsilon();
        let diff = ((got.0 - want.0).norm() + (got.1 - want.1).norm()) / scale;
        if diff > traj.tol * cast(100.0) {
            return Err(Error::numeric(
                format!("trajectory residual check failed on [{x0}, {x1}]"),
                to_f64(diff),
            ));
        }
    }
    Ok(())
}

/// Boundedness diagnostics from the dyadic window structure of |amp|.
#[derive(Clone, Debug)]
pub struct BoundednessReport<T> {
    pub sup_amp: T,
    /// least-squares slope of log(sup window amp) against log x
    pub growth_exponent: T,
    /// adjacent window sup ratios, rightward
    pub window_ratios: Vec<T>,
    pub bounded: bool,
}

pub fn boundedness_metrics<T: Real>(traj: &Trajectory<T>) -> Result<BoundednessReport<T>> {
    let x_max = *traj.xs.last().unwrap();
    // collect sup-amp over dyadic windows while samples support them
    let mut sups = Vec::new();
    let mut mids = Vec::new();
    let mut j = 0usize;
    loop {
        let hi = x_max / cast::<T>((1u64 << j) as f64);
        let lo = hi * cast::<T>(0.5);
        let idx = traj.window_indices(lo, hi);
        if idx.len() < 4 {
            break;
        }
        let sup = traj.amp[idx].iter().fold(T::zero(), |s, &a| s.max(a));
        sups.push(sup);
        mids.push((lo * hi).sqrt());
        j += 1;
        if j > 40 {
            break;
        }
    }
    if sups.len() < 3 {
        return Err(Error::InsufficientRange { needed: 3.0, got: sups.len() as f64 });
    }
    sups.reverse();
    mids.reverse();
    let pts: Vec<(T, T)> = mids
        .iter()
        .zip(sups.iter())
        .filter(|(_, &s)| s > T::zero())
        .map(|(&m, &s)| (m.ln(), s.ln()))
        .collect();
    let slope = least_squares_slope(&pts);
    let mut ratios = Vec::new();
    for w in sups.windows(2) {
        ratios.push(w[1] / w[0].max(T::epsilon()));
    }
    let max_ratio = ratios.iter().fold(T::zero(), |s, &r| s.max(r));
    let bounded = slope < cast(0.05) && max_ratio < cast(2.0);
    Ok(BoundednessReport {
        sup_amp: traj.sup_amp(),
        growth_exponent: slope,
        window_ratios: ratios,
        bounded,
    })
}

fn least_squares_slope<T: Real>(pts: &[(T, T)]) -> T {
    let n = cast::<T>(pts.len() as f64);
    let sx = pts.iter().fold(T::zero(), |s, p| s + p.0);
    let sy = pts.iter().fold(T::zero(), |s, p| s + p.1);
    let sxx = pts.iter().fold(T::zero(), |s, p| s + p.0 * p.0);
    let sxy = pts.iter().fold(T::zero(), |s, p| s + p.0 * p.1);
    let denom = n * sxx - sx * sx;
    if denom.abs() < T::epsilon() {
        return T::zero();
    }
    (n * sxy - sx * sy) / denom
}

/// Subordinacy score of one energy for the initial-angle family
/// cos(phi) u1 + sin(phi) u2.
#[derive(Clone, Debug)]
pub struct ScanPoint<T> {
    pub lambda: T,
    /// min over initial angle of far-window amp over near-window amp
    pub score: T,
    pub best_angle: T,
    pub bounded: bool,
    /// error note when this energy failed to integrate
    pub error: Option<String>,
}

/// A cluster of adjacent sub-threshold scores, reported by its argmin.
#[derive(Clone, Debug)]
pub struct Candidate<T> {
    pub lambda: T,
    pub score: T,
}

#[derive(Clone, Debug)]
pub struct ScanReport<T> {
    pub points: Vec<ScanPoint<T>>,
    pub candidates: Vec<Candidate<T>>,
    pub threshold: T,
}

/// Scan a lambda grid for subordinate (decaying) solutions: at each energy
/// the ratio of far-window to near-window amplitude is minimised over the
/// initial angle; ratios below `threshold` mark embedded-eigenvalue
/// candidates. Window pair: [x_max/2, x_max] against the same window a
/// decade earlier.
pub fn embedded_eigenvalue_scan<T: Real>(
    w: &PotentialSpec<T>,
    lambda_grid: &[T],
    x_max: T,
    threshold: T,
    tol: T,
) -> Result<ScanReport<T>> {
    if lambda_grid.iter().any(|&l| !(l > T::zero())) {
        return Err(Error::domain("lambda grid must be positive"));
    }
    let points: Vec<ScanPoint<T>> = lambda_grid
        .par_iter()
        .map(|&lambda| match scan_one(w, lambda, x_max, tol) {
            Ok(p) => p,
            Err(e) => ScanPoint {
                lambda,
                score: T::one(),
                best_angle: T::zero(),
                bounded: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    // contiguous sub-threshold runs collapse into one candidate each
    let mut candidates = Vec::new();
    let mut best: Option<Candidate<T>> = None;
    for p in &points {
        if p.error.is_none() && p.score < threshold {
            let cand = Candidate { lambda: p.lambda, score: p.score };
            best = match best.take() {
                None => Some(cand),
                Some(b) => Some(if cand.score < b.score { cand } else { b }),
            };
        } else if let Some(b) = best.take() {
            candidates.push(b);
        }
    }
    if let Some(b) = best {
        candidates.push(b);
    }
    Ok(ScanReport { points, candidates, threshold })
}

fn scan_one<T: Real>(
    w: &PotentialSpec<T>,
    lambda: T,
    x_max: T,
    tol: T,
) -> Result<ScanPoint<T>> {
    let k = |x: T| w.eval(x) - lambda;
    // sample grid: dyadic windows for boundedness plus the near/far pair
    let per = 48usize;
    let mut grid = window_grid(x_max, 6, per);
    let near_hi = x_max / cast::<T>(10.0);
    let near_lo = near_hi * cast::<T>(0.5);
    for i in 0..per {
        let t = cast::<T>((i + 1) as f64 / per as f64);
        grid.push(near_lo + (near_hi - near_lo) * t);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| *a <= *b);
    let sol = solve_sampled(&k, T::zero(), &grid, tol)?;

    let far_range = {
        let lo = x_max * cast::<T>(0.5);
        (
            grid.partition_point(|&x| x < lo),
            grid.partition_point(|&x| x <= x_max),
        )
    };
    let near_range = {
        (
            grid.partition_point(|&x| x < near_lo),
            grid.partition_point(|&x| x <= near_hi),
        )
    };
    // coefficients of both fundamental solutions at the samples
    let cols: Vec<(Mat2<T>, T)> = sol.mats.iter().map(|m| (*m, T::zero())).collect();
    let window_amp = |range: (usize, usize), phi: T| -> T {
        let (c, s) = (phi.cos(), phi.sin());
        let mut sup = T::zero();
        for (m, _) in &cols[range.0..range.1] {
            let y = m.a * c + m.b * s;
            let dy = m.c * c + m.d * s;
            sup = sup.max(y * y + dy * dy / lambda);
        }
        sup
    };
    let ratio = |phi: T| -> T {
        let near = window_amp(near_range, phi);
        let far = window_amp(far_range, phi);
        if near <= T::zero() {
            T::one()
        } else {
            far / near
        }
    };
    // coarse angle sweep then golden-section refinement
    let n_angles = 96usize;
    let mut best_phi = T::zero();
    let mut best = T::infinity();
    for i in 0..n_angles {
        let phi = T::PI() * cast::<T>(i as f64 / n_angles as f64);
        let r = ratio(phi);
        if r < best {
            best = r;
            best_phi = phi;
        }
    }
    let dphi = T::PI() / cast::<T>(n_angles as f64);
    let (mut a, mut b) = (best_phi - dphi, best_phi + dphi);
    let gr = cast::<T>(0.618_033_988_749_894_9);
    let mut c1 = b - (b - a) * gr;
    let mut c2 = a + (b - a) * gr;
    let (mut f1, mut f2) = (ratio(c1), ratio(c2));
    for _ in 0..40 {
        if f1 < f2 {
            b = c2;
            c2 = c1;
            f2 = f1;
            c1 = b - (b - a) * gr;
            f1 = ratio(c1);
        } else {
            a = c1;
            c1 = c2;
            f1 = f2;
            c2 = a + (b - a) * gr;
            f2 = ratio(c2);
        }
    }
    let score = best.min(f1).min(f2);
    let best_angle = if f1 < f2 { c1 } else { c2 };

    // boundedness of the fundamental pair over the dyadic windows
    let mut bounded = true;
    for phi_i in [T::zero(), T::PI() * cast::<T>(0.5)] {
        let mut sups = Vec::new();
        let mut mids = Vec::new();
        for j in (0..6).rev() {
            let hi = x_max / cast::<T>((1u64 << j) as f64);
            let lo = hi * cast::<T>(0.5);
            let r = (grid.partition_point(|&x| x < lo), grid.partition_point(|&x| x <= hi));
            if r.1 - r.0 < 4 {
                continue;
            }
            sups.push(window_amp((r.0, r.1), phi_i));
            mids.push((lo * hi).sqrt());
        }
        let pts: Vec<(T, T)> = mids
            .iter()
            .zip(sups.iter())
            .filter(|(_, &s)| s > T::zero())
            .map(|(&m, &s)| (m.ln(), s.ln()))
            .collect();
        if pts.len() >= 3 && least_squares_slope(&pts) >= cast(0.05) {
            bounded = false;
        }
    }
    Ok(ScanPoint { lambda, score, best_angle, bounded, error: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::imag_unit;

    fn uniform_grid(x_max: f64, n: usize) -> Vec<f64> {
        (1..=n).map(|i| x_max * i as f64 / n as f64).collect()
    }

    #[test]
    fn free_trajectory_exact() {
        // y = e^{ix} for lambda = 1, init (1, i)
        let w = PotentialSpec::<f64>::zero();
        let init = (Complex::new(1.0, 0.0), imag_unit());
        let grid = uniform_grid(100.0, 400);
        let traj = integrate_eigenfunction(&w, 1.0, init, &grid, 1e-10).unwrap();
        let mut max_err = 0.0f64;
        for (i, &x) in traj.xs.iter().enumerate() {
            let want = Complex::new(x.cos(), x.sin());
            max_err = max_err.max((traj.y[i] - want).norm());
        }
        assert!(max_err < 1e-8, "max error {max_err:.3e}");
        // amp is exactly flat for the free solution
        for &a in &traj.amp {
            assert!((a - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn free_cosine_solution() {
        // lambda = 4, init (1, 0): y = cos(2x)
        let w = PotentialSpec::<f64>::zero();
        let grid = uniform_grid(10.0, 200);
        let traj =
            integrate_eigenfunction(&w, 4.0, (Complex::new(1.0, 0.0), Complex::new(0.0, 0.0)), &grid, 1e-10)
                .unwrap();
        for (i, &x) in traj.xs.iter().enumerate() {
            assert!((traj.y[i].re - (2.0 * x).cos()).abs() < 1e-9);
            assert!(traj.y[i].im.abs() < 1e-12, "real data must stay real");
        }
    }

    #[test]
    fn linearity_in_the_initial_data() {
        let w = PotentialSpec::power_decay(1.0f64, 0.6);
        let grid = uniform_grid(50.0, 100);
        let init = (Complex::new(0.3, 0.1), Complex::new(0.0, 0.7));
        let a = Complex::new(1.7, -0.4);
        let t1 = integrate_eigenfunction(&w, 1.3, init, &grid, 1e-11).unwrap();
        let t2 = integrate_eigenfunction(&w, 1.3, (init.0 * a, init.1 * a), &grid, 1e-11).unwrap();
        for i in 0..t1.y.len() {
            assert!((t1.y[i] * a - t2.y[i]).norm() < 1e-8);
        }
    }

    #[test]
    fn wronskian_of_two_solutions_constant() {
        let w = PotentialSpec::wigner_von_neumann(-8.0f64, 2.0);
        let grid = uniform_grid(200.0, 400);
        let t1 = integrate_eigenfunction(&w, 1.7, (Complex::new(1.0, 0.0), Complex::new(0.0, 0.0)), &grid, 1e-11)
            .unwrap();
        let t2 = integrate_eigenfunction(&w, 1.7, (Complex::new(0.0, 0.0), Complex::new(1.0, 0.0)), &grid, 1e-11)
            .unwrap();
        let w0 = t1.y[0] * t2.dy[0] - t1.dy[0] * t2.y[0];
        for i in 0..t1.y.len() {
            let wr = t1.y[i] * t2.dy[i] - t1.dy[i] * t2.y[i];
            assert!((wr - w0).norm() / w0.norm() < 1e-8);
        }
    }

    #[test]
    fn boundedness_report_free_case() {
        let w = PotentialSpec::<f64>::zero();
        let grid = window_grid(1000.0, 6, 48);
        let traj = integrate_eigenfunction(&w, 1.0, (Complex::new(1.0, 0.0), imag_unit()), &grid, 1e-10)
            .unwrap();
        let rep = boundedness_metrics(&traj).unwrap();
        assert!(rep.growth_exponent.abs() < 0.01);
        assert!(rep.bounded);
    }

    #[test]
    fn too_short_trajectory_rejected() {
        let w = PotentialSpec::<f64>::zero();
        let grid = uniform_grid(1.0, 6);
        let traj = integrate_eigenfunction(&w, 1.0, (Complex::new(1.0, 0.0), imag_unit()), &grid, 1e-10)
            .unwrap();
        assert!(matches!(boundedness_metrics(&traj), Err(Error::InsufficientRange { .. })));
    }

    #[test]
    fn growing_solution_flagged() {
        // slowly decaying barrier above the energy: classically forbidden
        // region through the whole window, so solutions grow
        let w = PotentialSpec::power_decay(1.0f64, 0.3);
        let grid = window_grid(300.0, 6, 32);
        let traj = integrate_eigenfunction(&w, 0.01, (Complex::new(1.0, 0.0), Complex::new(0.0, 0.0)), &grid, 1e-10);
        match traj {
            Ok(t) => {
                let rep = boundedness_metrics(&t).unwrap();
                assert!(rep.growth_exponent > 0.2, "slope {}", rep.growth_exponent);
                assert!(!rep.bounded);
            }
            Err(Error::GrowthOverflow { .. }) => {} // also an acceptable diagnosis
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn free_scan_has_no_candidates() {
        let w = PotentialSpec::<f64>::zero();
        let grid: Vec<f64> = (0..20).map(|i| 0.5 + 0.1 * i as f64).collect();
        let rep = embedded_eigenvalue_scan(&w, &grid, 400.0, 0.1, 1e-9).unwrap();
        assert!(rep.candidates.is_empty(), "{:?}", rep.candidates);
        for p in &rep.points {
            assert!(p.error.is_none());
            assert!(p.bounded, "free case bounded at {}", p.lambda);
        }
    }

    #[test]
    fn wigner_von_neumann_resonance_detected() {
        let w = PotentialSpec::wigner_von_neumann(-8.0f64, 2.0);
        // grid straddles lambda = 1 without containing it
        let grid: Vec<f64> = (0..40).map(|i| 0.6 + 0.8 * i as f64 / 39.0).collect();
        let rep = embedded_eigenvalue_scan(&w, &grid, 400.0, 0.1, 1e-9).unwrap();
        assert_eq!(rep.candidates.len(), 1, "{:?}", rep.candidates);
        let c = &rep.candidates[0];
        assert!((c.lambda - 1.0).abs() < 0.05, "candidate at {}", c.lambda);
    }
}
