//! Quadrature kernels: adaptive Gauss-Kronrod on cells, with geometric
//! extrapolation at integrable spikes, and a Filon-type rule for
//! oscillatory integrands with a known phase.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{cast, cis, to_f64, Real};

/// 15-point Kronrod abscissae (positive half, including 0).
const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];

/// Kronrod weights matching `XGK`.
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];

/// 7-point Gauss weights for the odd-indexed Kronrod nodes.
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

/// One Gauss-Kronrod 7/15 panel. Returns (kronrod, |kronrod - gauss|, resabs).
fn gk15<T: Real, F: Fn(T) -> T>(f: &F, a: T, b: T) -> (T, T, T) {
    let half = cast::<T>(0.5);
    let c = (a + b) * half;
    let h = (b - a) * half;
    let mut kron = T::zero();
    let mut gauss = T::zero();
    let mut resabs = T::zero();
    for (i, (&x, &wk)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let dx = h * cast::<T>(x);
        let (fa, fb) = (f(c - dx), f(c + dx));
        let pair = if i == 7 { fa } else { fa + fb };
        kron = kron + cast::<T>(wk) * pair;
        resabs = resabs + cast::<T>(wk) * (fa.abs() + if i == 7 { T::zero() } else { fb.abs() });
        if i % 2 == 1 {
            // odd-indexed Kronrod nodes (and the centre, i = 7) are Gauss nodes
            gauss = gauss + cast::<T>(WG[i / 2]) * pair;
        }
    }
    (kron * h, (kron - gauss).abs() * h, resabs * h)
}

/// Behaviour when bisection exhausts its depth at a hot spot.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum SpikePolicy {
    /// Report the spot as a non-integrable singularity.
    Reject,
    /// Geometrically extrapolate an integrable power spike.
    Extrapolate,
}

#[derive(Debug)]
pub struct QuadValue<T> {
    pub value: T,
    /// Absolute error estimate actually achieved.
    pub err: T,
}

// bisection level at which a still-dominant panel is treated as a spike;
// leaves ~8 decades of float headroom for the classification descent
const MAX_DEPTH: usize = 26;
const MAX_PANELS: usize = 40_000;

struct Panel<T> {
    a: T,
    b: T,
    value: T,
    err: T,
    depth: usize,
}

/// Adaptive GK integration of a real integrand on [a, b].
///
/// Globally adaptive: the panel with the worst error estimate is split
/// until the total estimate meets `rel_tol` against the accumulated
/// absolute mass. Panels that refuse to converge are classified as power
/// spikes by the decay ratio of the cold halves shed while descending
/// onto the hot point; integrable spikes are geometrically extrapolated.
pub fn gk_adaptive<T: Real, F: Fn(T) -> T>(
    f: &F,
    a: T,
    b: T,
    rel_tol: T,
    policy: SpikePolicy,
) -> Result<QuadValue<T>> {
    if a == b {
        return Ok(QuadValue { value: T::zero(), err: T::zero() });
    }
    let (k0, e0, _) = gk15(f, a, b);
    let mut panels = vec![Panel { a, b, value: k0, err: e0, depth: 0 }];
    let mut resolved = QuadValue { value: T::zero(), err: T::zero() };
    // running sums over live panels; a polluted panel (quadrature node close
    // to a spike) always carries a comparably huge error estimate, so the
    // inflated scale cannot terminate the loop early
    let mut total_err = e0;
    let mut total_abs = k0.abs();
    loop {
        let scale = (total_abs + resolved.value.abs()).max(T::epsilon());
        let budget = (scale * rel_tol).max(scale * T::epsilon() * cast(4.0));
        if total_err + resolved.err <= budget {
            break;
        }
        // extrapolated spikes set an error floor no amount of further
        // splitting can lower; stop once the live panels are converged
        if total_err <= budget * cast(0.5) {
            break;
        }
        let (wi, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.err.partial_cmp(&y.1.err).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap();
        let p = panels.swap_remove(wi);
        total_err = total_err - p.err;
        total_abs = total_abs - p.value.abs();
        let width_floor = (p.a.abs() + p.b.abs() + T::one()) * T::epsilon() * cast(4.0);
        if p.depth >= MAX_DEPTH || (p.b - p.a).abs() <= width_floor {
            let spike = spike_tail(f, p.a, p.b, policy)?;
            resolved.value = resolved.value + spike.value;
            resolved.err = resolved.err + spike.err;
            continue;
        }
        if panels.len() >= MAX_PANELS {
            let achieved = to_f64((total_err + p.err) / scale);
            return Err(Error::numeric("quadrature did not converge", achieved));
        }
        let m = (p.a + p.b) * cast::<T>(0.5);
        let (kl, el, _) = gk15(f, p.a, m);
        let (kr, er, _) = gk15(f, m, p.b);
        total_err = total_err + el + er;
        total_abs = total_abs + kl.abs() + kr.abs();
        panels.push(Panel { a: p.a, b: m, value: kl, err: el, depth: p.depth + 1 });
        panels.push(Panel { a: m, b: p.b, value: kr, err: er, depth: p.depth + 1 });
    }
    let mut out = resolved;
    for p in &panels {
        out.value = out.value + p.value;
        out.err = out.err + p.err;
    }
    Ok(out)
}

/// A panel that refuses to converge: descend onto the hot point, keep the
/// cold halves, and classify the spike by the decay ratio of consecutive
/// cold masses. The hot panel itself is never trusted (a quadrature node
/// may sit arbitrarily close to the singular point).
fn spike_tail<T: Real, F: Fn(T) -> T>(
    f: &F,
    mut a: T,
    mut b: T,
    policy: SpikePolicy,
) -> Result<QuadValue<T>> {
    let mut colds: Vec<T> = Vec::new();
    let mut acc = T::zero();
    let width_floor = (a.abs() + b.abs() + T::one()) * T::epsilon() * cast(256.0);
    for _ in 0..14 {
        if (b - a).abs() <= width_floor {
            break;
        }
        let m = (a + b) * cast::<T>(0.5);
        let (kl, _, _) = gk15(f, a, m);
        let (kr, _, _) = gk15(f, m, b);
        let hot_left = kl.abs() >= kr.abs();
        let cold = if hot_left { kr } else { kl };
        acc = acc + cold;
        colds.push(cold.abs());
        if hot_left {
            b = m;
        } else {
            a = m;
        }
    }
    let n = colds.len();
    let x_hot = to_f64((a + b) * cast::<T>(0.5));
    if n < 5 {
        return Err(Error::SingularCell { x: x_hot });
    }
    let mut ratios = Vec::new();
    for i in (n - 4)..n {
        if colds[i - 1] > T::zero() {
            ratios.push(colds[i] / colds[i - 1]);
        }
    }
    if ratios.is_empty() {
        // cold halves vanished; nothing left to resolve
        return Ok(QuadValue { value: acc, err: T::zero() });
    }
    let r = ratios.iter().fold(T::zero(), |s, &v| s + v) / cast::<T>(ratios.len() as f64);
    if r >= cast(0.98) || !r.is_finite() {
        return Err(Error::SingularCell { x: x_hot });
    }
    match policy {
        SpikePolicy::Reject => Err(Error::SingularCell { x: x_hot }),
        SpikePolicy::Extrapolate => {
            // remaining hot mass is the geometric continuation of the colds
            let last = colds[n - 1];
            let signum = if acc >= T::zero() { T::one() } else { -T::one() };
            let tail = signum * last * r / (T::one() - r);
            let spread = (*ratios.last().unwrap() - ratios[0]).abs();
            let err = tail.abs() * (spread / (T::one() - r)).max(cast(1e-3));
            Ok(QuadValue { value: acc + tail, err })
        }
    }
}

/// Adaptive GK for complex integrands (no spike handling; smooth use only).
pub fn gk_adaptive_c<T: Real, F: Fn(T) -> Complex<T>>(
    f: &F,
    a: T,
    b: T,
    rel_tol: T,
) -> Result<Complex<T>> {
    fn panel<T: Real, F: Fn(T) -> Complex<T>>(f: &F, a: T, b: T) -> (Complex<T>, T) {
        let half = cast::<T>(0.5);
        let c = (a + b) * half;
        let h = (b - a) * half;
        let mut kron = Complex::new(T::zero(), T::zero());
        let mut gauss = kron;
        for (i, (&x, &wk)) in XGK.iter().zip(WGK.iter()).enumerate() {
            let dx = h * cast::<T>(x);
            let fa = f(c - dx);
            let pair = if i == 7 { fa } else { fa + f(c + dx) };
            kron = kron + pair.scale(cast(wk));
            if i % 2 == 1 {
                gauss = gauss + pair.scale(cast(WG[i / 2]));
            }
        }
        (kron.scale(h), (kron - gauss).norm() * h.abs())
    }
    fn rec_c<T: Real, F: Fn(T) -> Complex<T>>(
        f: &F,
        a: T,
        b: T,
        tol: T,
        depth: usize,
        acc: &mut Complex<T>,
        achieved: &mut T,
    ) -> Result<()> {
        let (k, e) = panel(f, a, b);
        if e <= tol || (b - a).abs() <= (a.abs() + b.abs() + T::one()) * T::epsilon() * cast(4.0) {
            *acc = *acc + k;
            *achieved = *achieved + e;
            return Ok(());
        }
        if depth >= MAX_DEPTH {
            return Err(Error::numeric("complex quadrature did not converge", to_f64(e)));
        }
        let m = (a + b) * cast::<T>(0.5);
        rec_c(f, a, m, tol * cast::<T>(0.6), depth + 1, acc, achieved)?;
        rec_c(f, m, b, tol * cast::<T>(0.6), depth + 1, acc, achieved)
    }
    if a == b {
        return Ok(Complex::new(T::zero(), T::zero()));
    }
    let (k0, _) = panel(f, a, b);
    let tol0 = (k0.norm() * rel_tol).max(T::epsilon() * (k0.norm() + T::one()));
    let mut acc = Complex::new(T::zero(), T::zero());
    let mut achieved = T::zero();
    rec_c(f, a, b, tol0, 0, &mut acc, &mut achieved)?;
    Ok(acc)
}

/// Moments I_k(z) = int_{-1}^{1} s^k e^{izs} ds for k = 0, 1, 2.
fn filon_moments<T: Real>(z: T) -> (Complex<T>, Complex<T>, Complex<T>) {
    let two = cast::<T>(2.0);
    if z.abs() < cast(0.5) {
        // power series, accurate to ~1e-17 at |z| = 0.5
        let z2 = z * z;
        let mut i0 = T::zero();
        let mut i1 = T::zero();
        let mut i2 = T::zero();
        let mut zpow = T::one(); // z^{2j}
        let mut fact = T::one(); // (2j)!
        let mut sign = T::one();
        for j in 0..8u32 {
            let tj = cast::<T>(2.0 * j as f64);
            if j > 0 {
                fact = fact * (tj - T::one()) * tj;
                zpow = zpow * z2;
            }
            i0 = i0 + sign * zpow / (fact * (tj + T::one()));
            i2 = i2 + sign * zpow / (fact * (tj + cast(3.0)));
            i1 = i1 + sign * zpow * z / (fact * (tj + T::one()) * (tj + cast(3.0)));
            sign = -sign;
        }
        (
            Complex::new(two * i0, T::zero()),
            Complex::new(T::zero(), two * i1),
            Complex::new(two * i2, T::zero()),
        )
    } else {
        let (s, c) = (z.sin(), z.cos());
        let i0 = two * s / z;
        let i1 = two * (s - z * c) / (z * z);
        let i2 = two * ((z * z - two) * s + two * z * c) / (z * z * z);
        (
            Complex::new(i0, T::zero()),
            Complex::new(T::zero(), i1),
            Complex::new(i2, T::zero()),
        )
    }
}

/// Filon panel for int_a^b g(t) e^{i phase(t)} dt with the phase treated as
/// linear across the panel plus a slow residual folded into g.
fn filon_panel<T: Real, G, P>(g: &G, phase: &P, a: T, b: T) -> Complex<T>
where
    G: Fn(T) -> Complex<T>,
    P: Fn(T) -> T,
{
    let half = cast::<T>(0.5);
    let m = (a + b) * half;
    let h = (b - a) * half;
    let (pa, pm, pb) = (phase(a), phase(m), phase(b));
    let omega = (pb - pa) / (b - a);
    let z = omega * h;
    // residual phase after removing the secant line through (a, b)
    let ra = pa - pm + z;
    let rb = pb - pm - z;
    let ga = g(a) * cis(ra);
    let gm = g(m);
    let gb = g(b) * cis(rb);
    let c0 = gm;
    let c1 = (gb - ga).scale(half);
    let c2 = (ga + gb).scale(half) - gm;
    let (i0, i1, i2) = filon_moments(z);
    (c0 * i0 + c1 * i1 + c2 * i2).scale(h) * cis(pm)
}

/// One non-adaptive Filon panel; callers guarantee g varies slowly and the
/// phase is near-linear across [a, b].
pub fn filon_cell_c<T: Real, G, P>(g: &G, phase: &P, a: T, b: T) -> Complex<T>
where
    G: Fn(T) -> Complex<T>,
    P: Fn(T) -> T,
{
    filon_panel(g, phase, a, b)
}

/// Adaptive oscillatory integral int_a^b g(t) e^{i phase(t)} dt.
///
/// `g` must be slowly varying relative to the phase; panels refine until the
/// quadratic fit of `g` and the phase linearisation are converged.
pub fn osc_adaptive<T: Real, G, P>(g: &G, phase: &P, a: T, b: T, rel_tol: T) -> Result<Complex<T>>
where
    G: Fn(T) -> Complex<T>,
    P: Fn(T) -> T,
{
    fn rec_o<T: Real, G, P>(
        g: &G,
        phase: &P,
        a: T,
        b: T,
        whole: Complex<T>,
        tol: T,
        depth: usize,
        acc: &mut Complex<T>,
    ) -> Result<()>
    where
        G: Fn(T) -> Complex<T>,
        P: Fn(T) -> T,
    {
        let m = (a + b) * cast::<T>(0.5);
        let left = filon_panel(g, phase, a, m);
        let right = filon_panel(g, phase, m, b);
        let err = (left + right - whole).norm();
        if err <= tol || (b - a).abs() <= (a.abs() + b.abs() + T::one()) * T::epsilon() * cast(8.0)
        {
            *acc = *acc + left + right;
            return Ok(());
        }
        if depth >= MAX_DEPTH {
            return Err(Error::numeric("oscillatory quadrature did not converge", to_f64(err)));
        }
        rec_o(g, phase, a, m, left, tol * cast::<T>(0.6), depth + 1, acc)?;
        rec_o(g, phase, m, b, right, tol * cast::<T>(0.6), depth + 1, acc)
    }
    if a == b {
        return Ok(Complex::new(T::zero(), T::zero()));
    }
    let whole = filon_panel(g, phase, a, b);
    // amplitude samples set the scale: compactly supported g can vanish at
    // both endpoints while the integral is merely small, not zero
    let mut g_amp = T::zero();
    for i in 0..=8 {
        let t = a + (b - a) * cast::<T>(i as f64 / 8.0);
        g_amp = g_amp.max(g(t).norm());
    }
    let scale = whole.norm() + (b - a).abs() * g_amp;
    let tol0 = (scale * rel_tol).max(T::epsilon() * (scale + T::one()));
    let mut acc = Complex::new(T::zero(), T::zero());
    rec_o(g, phase, a, b, whole, tol0, 0, &mut acc)?;
    Ok(acc)
}

/// Integral over [a, b] split at integer boundaries, each unit cell handled
/// adaptively. Returns the total.
pub fn gk_on_unit_cells<T: Real, F: Fn(T) -> T>(
    f: &F,
    a: T,
    b: T,
    rel_tol: T,
    policy: SpikePolicy,
) -> Result<QuadValue<T>> {
    let mut total = QuadValue { value: T::zero(), err: T::zero() };
    let mut lo = a;
    loop {
        let next = (lo.floor() + T::one()).min(b);
        let q = gk_adaptive(f, lo, next, rel_tol, policy)?;
        total.value = total.value + q.value;
        total.err = total.err + q.err;
        if next >= b {
            break;
        }
        lo = next;
    }
    Ok(total)
}
