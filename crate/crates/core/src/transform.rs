//! The variation-of-parameters chain y1 -> y2 -> y3 -> y4 for
//! -y'' + (U+V) y = lambda y, the accumulated phase p(x, lambda), WKB
//! prediction and window fits of trajectories against it.
//!
//! Conventions: w = Im(theta conj(theta')) carries its sign (negative
//! sqrt(lambda) in the free case) and p = (1/2w) int V |theta|^2. With
//! that, the y3 system has off-diagonal entries
//!     beta = (i/2w) V conj(theta)^2 exp(-2ip),    conj(beta),
//! and y3 = (1-|q|^2)^{-1/2} (I+Q) y4 gives
//!     y4' = rho [ beta conj(q) - conj(beta) q + (q conj(q)' - q' conj(q))/2 ,
//!                 beta - conj(beta) q^2 - q' ; conjugates ] y4,
//! rho = (1-|q|^2)^{-1}. The derivation fixes the relative signs; the
//! residual tests below check the matrices against derivatives computed
//! straight from the transformations, for arbitrary smooth q.

use std::cell::RefCell;

use num_complex::Complex;

use crate::basis::ThetaBasis;
use crate::error::{Error, Result};
use crate::potential::PotentialSpec;
use crate::quad::{gk_adaptive, SpikePolicy};
use crate::scalar::{cast, cis, to_f64, Real};
use crate::schrod::Trajectory;

const PHASE_REL_TOL: f64 = 1e-10;

/// A function handle q(x, lambda) with its derivative, as used by the
/// (I+Q) stage.
pub trait QFunction<T: Real> {
    fn q(&self, x: T) -> Complex<T>;
    fn q_prime(&self, x: T) -> Complex<T>;
}

/// Closure adapter for tests and synthetic q's.
pub struct FnQ<F, G> {
    pub q: F,
    pub q_prime: G,
}

impl<T: Real, F: Fn(T) -> Complex<T>, G: Fn(T) -> Complex<T>> QFunction<T> for FnQ<F, G> {
    fn q(&self, x: T) -> Complex<T> {
        (self.q)(x)
    }
    fn q_prime(&self, x: T) -> Complex<T> {
        (self.q_prime)(x)
    }
}

/// Accumulated phase p(x, lambda) = (1/2w) int_0^x V |theta|^2 dt with a
/// per-unit-cell cumulative cache.
pub struct PhaseAccumulator<T: Real> {
    basis: ThetaBasis<T>,
    v: PotentialSpec<T>,
    cum: RefCell<Vec<T>>,
}

impl<T: Real> PhaseAccumulator<T> {
    pub fn new(basis: ThetaBasis<T>, v: PotentialSpec<T>) -> Self {
        PhaseAccumulator { basis, v, cum: RefCell::new(vec![T::zero()]) }
    }

    pub fn basis(&self) -> &ThetaBasis<T> {
        &self.basis
    }

    pub fn potential(&self) -> &PotentialSpec<T> {
        &self.v
    }

    fn integrand(&self, x: T) -> T {
        let (th, _) = self.basis.eval(x);
        self.v.eval(x) * th.norm_sqr()
    }

    fn ensure_cells(&self, n: usize) -> Result<()> {
        let mut cum = self.cum.borrow_mut();
        while cum.len() <= n {
            let k = cum.len() - 1;
            let lo = cast::<T>(k as f64);
            let hi = cast::<T>((k + 1) as f64);
            let cell = gk_adaptive(
                &|x| self.integrand(x),
                lo,
                hi,
                cast(PHASE_REL_TOL),
                SpikePolicy::Extrapolate,
            )?;
            let last = *cum.last().unwrap();
            cum.push(last + cell.value);
        }
        Ok(())
    }

    /// p(x, lambda); p(0) = 0, real valued.
    pub fn phase_at(&self, x: T) -> Result<T> {
        if x < T::zero() {
            return Err(Error::domain("phase accumulator domain is x >= 0"));
        }
        let n = to_f64(x.floor()) as usize;
        self.ensure_cells(n)?;
        let base = self.cum.borrow()[n];
        let lo = cast::<T>(n as f64);
        let partial = if x > lo {
            gk_adaptive(&|t| self.integrand(t), lo, x, cast(PHASE_REL_TOL), SpikePolicy::Extrapolate)?
                .value
        } else {
            T::zero()
        };
        Ok((base + partial) / (cast::<T>(2.0) * self.basis.imw))
    }

    /// Batch phases over an increasing grid in one sweep.
    pub fn phase_on_grid(&self, grid: &[T]) -> Result<Vec<T>> {
        if grid.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::domain("phase grid must be nondecreasing"));
        }
        let mut out = Vec::with_capacity(grid.len());
        if grid.is_empty() {
            return Ok(out);
        }
        let two_w = cast::<T>(2.0) * self.basis.imw;
        let mut acc = self.phase_at(grid[0])? * two_w;
        out.push(acc / two_w);
        for i in 1..grid.len() {
            if grid[i] > grid[i - 1] {
                let piece = gk_adaptive(
                    &|t| self.integrand(t),
                    grid[i - 1],
                    grid[i],
                    cast(PHASE_REL_TOL),
                    SpikePolicy::Extrapolate,
                )?;
                acc = acc + piece.value;
            }
            out.push(acc / two_w);
        }
        Ok(out)
    }

    /// theta(x) exp(i p(x)): the WKB main-term prediction.
    pub fn wkb_predict(&self, x: T) -> Result<Complex<T>> {
        let (th, _) = self.basis.eval(x);
        Ok(th * cis(self.phase_at(x)?))
    }

    /// The convergent correction phase of the full asymptotic form:
    /// (1/2w) int_lo^hi (1-|q|^2)^{-1} V Re(theta^2 q e^{2ip}) dt,
    /// by composite Simpson on a frequency-resolving grid.
    pub fn wkb_correction(
        &self,
        q: &dyn QFunction<T>,
        lo: T,
        hi: T,
    ) -> Result<T> {
        if !(hi > lo) || lo < T::zero() {
            return Err(Error::domain("bad correction range"));
        }
        let freq = cast::<T>(2.0) * self.basis.lambda.sqrt().max(T::one());
        let h_target = cast::<T>(0.45) / freq;
        let n = (to_f64((hi - lo) / h_target).ceil() as usize).max(8);
        let n = if n % 2 == 1 { n + 1 } else { n };
        let h = (hi - lo) / cast::<T>(n as f64);
        let grid: Vec<T> = (0..=n).map(|i| lo + h * cast::<T>(i as f64)).collect();
        let phases = self.phase_on_grid(&grid)?;
        let f = |i: usize| -> T {
            let x = grid[i];
            let (th, _) = self.basis.eval(x);
            let qv = q.q(x);
            let rho = T::one() / (T::one() - qv.norm_sqr());
            let val = (th * th * qv * cis(cast::<T>(2.0) * phases[i])).re;
            rho * self.v.eval(x) * val
        };
        let mut s = f(0) + f(n);
        for i in 1..n {
            let w = if i % 2 == 1 { cast::<T>(4.0) } else { cast::<T>(2.0) };
            s = s + w * f(i);
        }
        Ok(s * h / (cast::<T>(3.0) * cast::<T>(2.0) * self.basis.imw))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Y2,
    Y3,
    Y4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// States of a transformed trajectory at the trajectory's samples.
#[derive(Clone, Debug)]
pub struct TransformedTrajectory<T: Real> {
    pub stage: Stage,
    pub lambda: T,
    pub xs: Vec<T>,
    pub states: Vec<(Complex<T>, Complex<T>)>,
}

type C2<T> = (Complex<T>, Complex<T>);
type CMat<T> = [[Complex<T>; 2]; 2];

fn apply<T: Real>(m: &CMat<T>, v: C2<T>) -> C2<T> {
    (m[0][0] * v.0 + m[0][1] * v.1, m[1][0] * v.0 + m[1][1] * v.1)
}

/// S = [[theta, conj theta], [theta', conj theta']], the variation of
/// parameters frame; det S = 2i w identically.
fn s_inverse_apply<T: Real>(basis: &ThetaBasis<T>, x: T, v: C2<T>) -> C2<T> {
    let (th, dth) = basis.eval(x);
    let det = Complex::new(T::zero(), cast::<T>(2.0) * basis.imw);
    (
        (dth.conj() * v.0 - th.conj() * v.1) / det,
        (-dth * v.0 + th * v.1) / det,
    )
}

fn s_apply<T: Real>(basis: &ThetaBasis<T>, x: T, v: C2<T>) -> C2<T> {
    let (th, dth) = basis.eval(x);
    (th * v.0 + th.conj() * v.1, dth * v.0 + dth.conj() * v.1)
}

/// Forward transform of one sample through the requested stage.
fn forward_one<T: Real>(
    acc: &PhaseAccumulator<T>,
    q: Option<&dyn QFunction<T>>,
    stage: Stage,
    x: T,
    phase: T,
    y1: C2<T>,
) -> Result<C2<T>> {
    let y2 = s_inverse_apply(&acc.basis, x, y1);
    if stage == Stage::Y2 {
        return Ok(y2);
    }
    let y3 = (y2.0 * cis(-phase), y2.1 * cis(phase));
    if stage == Stage::Y3 {
        return Ok(y3);
    }
    let qf = q.ok_or_else(|| Error::domain("stage y4 needs a q handle"))?;
    let qv = qf.q(x);
    let q2 = qv.norm_sqr();
    if q2 >= T::one() {
        return Err(Error::SingularTransform { x: to_f64(x), q_abs: to_f64(q2.sqrt()) });
    }
    let r = (T::one() - q2).sqrt().recip();
    Ok((
        (y3.0 - qv * y3.1).scale(r),
        (y3.1 - qv.conj() * y3.0).scale(r),
    ))
}

/// Backward transform of one sample down to the y1 frame.
fn backward_one<T: Real>(
    acc: &PhaseAccumulator<T>,
    q: Option<&dyn QFunction<T>>,
    stage: Stage,
    x: T,
    phase: T,
    state: C2<T>,
) -> Result<C2<T>> {
    let y3 = match stage {
        Stage::Y4 => {
            let qf = q.ok_or_else(|| Error::domain("stage y4 needs a q handle"))?;
            let qv = qf.q(x);
            let q2 = qv.norm_sqr();
            if q2 >= T::one() {
                return Err(Error::SingularTransform { x: to_f64(x), q_abs: to_f64(q2.sqrt()) });
            }
            let r = (T::one() - q2).sqrt().recip();
            ((state.0 + qv * state.1).scale(r), (qv.conj() * state.0 + state.1).scale(r))
        }
        Stage::Y3 => state,
        Stage::Y2 => {
            let y2 = state;
            return Ok(s_apply(&acc.basis, x, y2));
        }
    };
    let y2 = (y3.0 * cis(phase), y3.1 * cis(-phase));
    Ok(s_apply(&acc.basis, x, y2))
}

/// Transform a trajectory into the y2/y3/y4 frame, or back.
///
/// Forward takes the trajectory's own (y, y') samples; backward treats the
/// given states as the requested stage and reconstructs (y, y'). The q
/// handle is only needed for stage y4 and must satisfy |q| < 1 over the
/// grid.
pub fn transform_chain<T: Real>(
    xs: &[T],
    states: &[C2<T>],
    lambda: T,
    acc: &PhaseAccumulator<T>,
    q: Option<&dyn QFunction<T>>,
    stage: Stage,
    direction: Direction,
) -> Result<TransformedTrajectory<T>> {
    if xs.len() != states.len() || xs.is_empty() {
        return Err(Error::domain("xs/states length mismatch"));
    }
    let lb = acc.basis.lambda;
    if (lb - lambda).abs() > (lb.abs() + lambda.abs()) * cast(1e-12) {
        return Err(Error::domain("basis and trajectory lambda differ"));
    }
    let phases = acc.phase_on_grid(xs)?;
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let v = match direction {
            Direction::Forward => forward_one(acc, q, stage, xs[i], phases[i], states[i])?,
            Direction::Backward => backward_one(acc, q, stage, xs[i], phases[i], states[i])?,
        };
        out.push(v);
    }
    Ok(TransformedTrajectory { stage, lambda, xs: xs.to_vec(), states: out })
}

/// Convenience wrapper taking a solved trajectory.
pub fn transform_trajectory<T: Real>(
    traj: &Trajectory<T>,
    acc: &PhaseAccumulator<T>,
    q: Option<&dyn QFunction<T>>,
    stage: Stage,
) -> Result<TransformedTrajectory<T>> {
    let states: Vec<C2<T>> = traj.y.iter().zip(traj.dy.iter()).map(|(&a, &b)| (a, b)).collect();
    transform_chain(&traj.xs, &states, traj.lambda, acc, q, stage, Direction::Forward)
}

/// Coefficient matrix of the requested stage's ODE at x.
pub fn stage_matrix<T: Real>(
    acc: &PhaseAccumulator<T>,
    q: Option<&dyn QFunction<T>>,
    stage: Stage,
    x: T,
) -> Result<CMat<T>> {
    let basis = &acc.basis;
    let (th, _) = basis.eval(x);
    let v = acc.v.eval(x);
    let w2 = cast::<T>(2.0) * basis.imw;
    let c = Complex::new(T::zero(), T::one() / w2); // i / (2w)
    let zero = Complex::new(T::zero(), T::zero());
    match stage {
        Stage::Y2 => {
            let th2 = th * th;
            let abs2 = Complex::new(th.norm_sqr(), T::zero());
            Ok([
                [c.scale(v) * abs2, c.scale(v) * th2.conj()],
                [-c.scale(v) * th2, -c.scale(v) * abs2],
            ])
        }
        Stage::Y3 => {
            let p = acc.phase_at(x)?;
            let beta = c.scale(v) * th.conj() * th.conj() * cis(-cast::<T>(2.0) * p);
            Ok([[zero, beta], [beta.conj(), zero]])
        }
        Stage::Y4 => {
            let qf = q.ok_or_else(|| Error::domain("stage y4 needs a q handle"))?;
            let p = acc.phase_at(x)?;
            let beta = c.scale(v) * th.conj() * th.conj() * cis(-cast::<T>(2.0) * p);
            let qv = qf.q(x);
            let qp = qf.q_prime(x);
            let q2 = qv.norm_sqr();
            if q2 >= T::one() {
                return Err(Error::SingularTransform { x: to_f64(x), q_abs: to_f64(q2.sqrt()) });
            }
            let rho = T::one() / (T::one() - q2);
            let half = cast::<T>(0.5);
            let diag = beta * qv.conj() - beta.conj() * qv
                + (qv * qp.conj() - qp * qv.conj()).scale(half);
            let off = beta - beta.conj() * qv * qv - qp;
            Ok([
                [diag.scale(rho), off.scale(rho)],
                [off.conj().scale(rho), (-diag).scale(rho)],
            ])
        }
    }
}

/// Verify that forward-transformed states satisfy their stage ODE.
///
/// The stage derivative is computed straight from the defining change of
/// variables (using y'' = (W - lambda) y and theta'' = (U - lambda) theta)
/// and compared against the stage coefficient matrix; this checks the
/// algebra of the chain rather than finite differences.
pub fn chain_residual<T: Real>(
    traj: &Trajectory<T>,
    acc: &PhaseAccumulator<T>,
    q: Option<&dyn QFunction<T>>,
    stage: Stage,
) -> Result<T> {
    let basis = &acc.basis;
    let phases = acc.phase_on_grid(&traj.xs)?;
    let mut worst = T::zero();
    for i in 0..traj.xs.len() {
        let x = traj.xs[i];
        let y1 = (traj.y[i], traj.dy[i]);
        let u = basis.unperturbed(x);
        let v = acc.v.eval(x);
        let lambda = basis.lambda;
        let y1p = (y1.1, y1.0.scale(u + v - lambda));
        let (th, dth) = basis.eval(x);
        let ddth = th.scale(u - lambda);
        // y2 = S^{-1} y1, (S^{-1})' = -S^{-1} S' S^{-1}
        let y2 = s_inverse_apply(basis, x, y1);
        let s_y2 = (th * y2.0 + th.conj() * y2.1, dth * y2.0 + dth.conj() * y2.1);
        debug_assert!((s_y2.0 - y1.0).norm() <= cast(1e-6));
        let sp_y2 = (dth * y2.0 + dth.conj() * y2.1, ddth * y2.0 + ddth.conj() * y2.1);
        let y2p = {
            let t = (y1p.0 - sp_y2.0, y1p.1 - sp_y2.1);
            s_inverse_apply(basis, x, t)
        };
        let (state, deriv) = match stage {
            Stage::Y2 => (y2, y2p),
            Stage::Y3 | Stage::Y4 => {
                let p = phases[i];
                let pp = v * th.norm_sqr() / (cast::<T>(2.0) * basis.imw);
                let e_m = cis(-p);
                let e_p = cis(p);
                let y3 = (y2.0 * e_m, y2.1 * e_p);
                let ip = Complex::new(T::zero(), pp);
                let y3p = (
                    y2p.0 * e_m - ip * y2.0 * e_m,
                    y2p.1 * e_p + ip * y2.1 * e_p,
                );
                if stage == Stage::Y3 {
                    (y3, y3p)
                } else {
                    let qf = q.ok_or_else(|| Error::domain("stage y4 needs a q handle"))?;
                    let qv = qf.q(x);
                    let qp = qf.q_prime(x);
                    let q2 = qv.norm_sqr();
                    if q2 >= T::one() {
                        return Err(Error::SingularTransform {
                            x: to_f64(x),
                            q_abs: to_f64(q2.sqrt()),
                        });
                    }
                    let r = (T::one() - q2).sqrt().recip();
                    let rp = r * r * r * (qp * qv.conj()).re;
                    let y4 = ((y3.0 - qv * y3.1).scale(r), (y3.1 - qv.conj() * y3.0).scale(r));
                    let y4p = (
                        (y3.0 - qv * y3.1).scale(rp)
                            + (y3p.0 - qp * y3.1 - qv * y3p.1).scale(r),
                        (y3.1 - qv.conj() * y3.0).scale(rp)
                            + (y3p.1 - qp.conj() * y3.0 - qv.conj() * y3p.0).scale(r),
                    );
                    (y4, y4p)
                }
            }
        };
        let m = stage_matrix(acc, q, stage, x)?;
        let rhs = apply(&m, state);
        let scale = deriv.0.norm() + deriv.1.norm() + rhs.0.norm() + rhs.1.norm()
            + (state.0.norm() + state.1.norm()) * cast(1e-3)
            + T::epsilon();
        let res = ((deriv.0 - rhs.0).norm() + (deriv.1 - rhs.1).norm()) / scale;
        worst = worst.max(res);
    }
    Ok(worst)
}

/// One dyadic-window least-squares fit of a trajectory against the WKB
/// pair (prediction, conjugate prediction).
#[derive(Clone, Debug)]
pub struct WindowFit<T: Real> {
    pub x_lo: T,
    pub x_hi: T,
    pub c1: Complex<T>,
    pub c2: Complex<T>,
    /// rms residual relative to the rms of y over the window
    pub residual: T,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct DeviationCurve<T: Real> {
    pub windows: Vec<WindowFit<T>>,
}

impl<T: Real> DeviationCurve<T> {
    /// Relative variation of |c1| and |c2| over windows whose right edge
    /// lies in [x_hi/decade, x_hi]. Small |c2| is measured against |c1|.
    pub fn stabilization(&self, decade: T) -> Option<(T, T)> {
        let x_hi = self.windows.last()?.x_hi;
        let lo = x_hi / decade;
        let tail: Vec<&WindowFit<T>> =
            self.windows.iter().filter(|w| w.x_hi >= lo).collect();
        if tail.len() < 2 {
            return None;
        }
        let var = |get: &dyn Fn(&WindowFit<T>) -> T, floor: T| -> T {
            let vals: Vec<T> = tail.iter().map(|w| get(w)).collect();
            let mx = vals.iter().fold(T::zero(), |s, &v| s.max(v));
            let mn = vals.iter().fold(T::infinity(), |s, &v| s.min(v));
            let scale = mx.max(floor);
            if scale <= T::zero() {
                T::zero()
            } else {
                (mx - mn) / scale
            }
        };
        let c1_scale = tail.iter().map(|w| w.c1.norm()).fold(T::zero(), T::max);
        let floor = c1_scale * cast(1e-6);
        Some((var(&|w| w.c1.norm(), floor), var(&|w| w.c2.norm(), floor)))
    }

    /// Spread of arg(c1) over the same window set, in radians.
    pub fn phase_spread(&self, decade: T) -> Option<T> {
        let x_hi = self.windows.last()?.x_hi;
        let lo = x_hi / decade;
        let tail: Vec<&WindowFit<T>> =
            self.windows.iter().filter(|w| w.x_hi >= lo).collect();
        if tail.len() < 2 {
            return None;
        }
        let anchor = tail[0].c1;
        if anchor.norm() <= T::zero() {
            return None;
        }
        let mut spread = T::zero();
        for w in &tail {
            let d = (w.c1 / anchor).arg().abs();
            spread = spread.max(d);
        }
        Some(spread)
    }
}

/// Fit trajectory samples as c1 wkb + c2 conj(wkb) on dyadic windows
/// [x_max/2^{j+1}, x_max/2^j]. Windows with fewer than 32 samples are
/// skipped; an ill-conditioned fit (near band edge) is an error.
pub fn wkb_deviation<T: Real>(
    traj: &Trajectory<T>,
    acc: &PhaseAccumulator<T>,
) -> Result<DeviationCurve<T>> {
    let x_max = *traj.xs.last().unwrap();
    let phases = acc.phase_on_grid(&traj.xs)?;
    let mut windows = Vec::new();
    for j in (0..24usize).rev() {
        let hi = x_max / cast::<T>((1u64 << j) as f64);
        let lo = hi * cast::<T>(0.5);
        let i_lo = traj.xs.partition_point(|&x| x < lo);
        let i_hi = traj.xs.partition_point(|&x| x <= hi);
        if i_hi - i_lo < 32 {
            continue;
        }
        // normal equations for min sum |y - c1 u - c2 conj(u)|^2
        let mut g11 = T::zero();
        let mut g22 = T::zero();
        let mut g12 = Complex::new(T::zero(), T::zero());
        let mut b1 = Complex::new(T::zero(), T::zero());
        let mut b2 = Complex::new(T::zero(), T::zero());
        for i in i_lo..i_hi {
            let (th, _) = acc.basis.eval(traj.xs[i]);
            let u = th * cis(phases[i]);
            let v = u.conj();
            g11 = g11 + u.norm_sqr();
            g22 = g22 + v.norm_sqr();
            g12 = g12 + u.conj() * v;
            b1 = b1 + u.conj() * traj.y[i];
            b2 = b2 + v.conj() * traj.y[i];
        }
        let det = Complex::new(g11 * g22, T::zero()) - g12 * g12.conj();
        let gnorm = g11 * g22;
        if det.norm() < gnorm * cast(1e-10) {
            return Err(Error::IllConditionedFit { cond: to_f64(gnorm / det.norm().max(T::epsilon())) });
        }
        let c1 = (b1.scale(g22) - g12 * b2) / det;
        let c2 = (b2.scale(g11) - g12.conj() * b1) / det;
        let mut res = T::zero();
        let mut ref_sq = T::zero();
        for i in i_lo..i_hi {
            let (th, _) = acc.basis.eval(traj.xs[i]);
            let u = th * cis(phases[i]);
            let model = c1 * u + c2 * u.conj();
            res = res + (traj.y[i] - model).norm_sqr();
            ref_sq = ref_sq + traj.y[i].norm_sqr();
        }
        windows.push(WindowFit {
            x_lo: lo,
            x_hi: hi,
            c1,
            c2,
            residual: (res / ref_sq.max(T::epsilon())).sqrt(),
            samples: i_hi - i_lo,
        });
    }
    if windows.len() < 3 {
        return Err(Error::InsufficientRange { needed: 3.0, got: windows.len() as f64 });
    }
    Ok(DeviationCurve { windows })
}
