//! Multilinear transforms over ordered half-line variables: kernel
//! operators and their truncations, the dense tensor-grid evaluator for
//! general pair sets, the cumulative nested evaluator for chained
//! (sigma(j) < j) constraint structures, maximal functions over
//! truncation ladders, empirical norm-constant probes, and the decay of
//! the parts-integrated spectral kernel.

use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;

use crate::basis::ThetaBasis;
use crate::error::{Error, Result};
use crate::potential::PotentialSpec;
use crate::quad::{filon_cell_c, gk_adaptive, osc_adaptive, SpikePolicy};
use crate::scalar::{cast, cis, to_f64, Real};
use crate::step_fn::{NormKind, StepFunction};
use crate::transform::PhaseAccumulator;

/// How the theta family behind a kernel is built at each energy.
#[derive(Clone, Debug)]
pub enum BasisSpec<T: Real> {
    Free,
    Bloch { u: PotentialSpec<T>, period: T },
}

impl<T: Real> BasisSpec<T> {
    fn build(&self, lambda: T) -> Result<ThetaBasis<T>> {
        match self {
            BasisSpec::Free => ThetaBasis::free(lambda),
            BasisSpec::Bloch { u, period } => ThetaBasis::bloch(u, *period, lambda),
        }
    }
}

/// Kernel k(lambda, x) of one operator slot.
#[derive(Clone)]
pub enum KernelSpec<T: Real> {
    /// theta^2 e^{2ip}: the spectral-transform kernel
    ThetaSqPhase { v: PotentialSpec<T>, basis: BasisSpec<T> },
    /// conj(theta)^2 e^{-2ip}: its conjugate, the first-order q kernel
    ConjThetaSqPhase { v: PotentialSpec<T>, basis: BasisSpec<T> },
    /// tabulated or closed-form kernel with a stated bound
    Custom { f: Arc<dyn Fn(T, T) -> Complex<T> + Send + Sync>, bound: f64 },
}

impl<T: Real> std::fmt::Debug for KernelSpec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelSpec::ThetaSqPhase { .. } => write!(f, "ThetaSqPhase"),
            KernelSpec::ConjThetaSqPhase { .. } => write!(f, "ConjThetaSqPhase"),
            KernelSpec::Custom { bound, .. } => write!(f, "Custom(bound {bound})"),
        }
    }
}

impl<T: Real> KernelSpec<T> {
    pub fn one() -> Self {
        KernelSpec::Custom {
            f: Arc::new(|_l, _x| Complex::new(T::one(), T::zero())),
            bound: 1.0,
        }
    }

    /// |k| bound: theta families are sup-normalised to one.
    pub fn bound(&self) -> f64 {
        match self {
            KernelSpec::Custom { bound, .. } => *bound,
            _ => 1.0,
        }
    }

    /// Samples of k(lambda, .) on an increasing grid.
    pub fn materialize(&self, lambda: T, xs: &[T]) -> Result<Vec<Complex<T>>> {
        match self {
            KernelSpec::Custom { f, .. } => Ok(xs.iter().map(|&x| f(lambda, x)).collect()),
            KernelSpec::ThetaSqPhase { v, basis } | KernelSpec::ConjThetaSqPhase { v, basis } => {
                let conj = matches!(self, KernelSpec::ConjThetaSqPhase { .. });
                let b = basis.build(lambda)?;
                let acc = PhaseAccumulator::new(b.clone(), v.clone());
                let phases = acc.phase_on_grid(xs)?;
                Ok(xs
                    .iter()
                    .zip(phases.iter())
                    .map(|(&x, &p)| {
                        let (th, _) = b.eval(x);
                        let k = th * th * cis(cast::<T>(2.0) * p);
                        if conj {
                            k.conj()
                        } else {
                            k
                        }
                    })
                    .collect())
            }
        }
    }

    /// Verify the stated bound on a sample grid.
    pub fn check_bound(&self, lambda: T, xs: &[T]) -> Result<()> {
        let vals = self.materialize(lambda, xs)?;
        let m = cast::<T>(self.bound() * (1.0 + 1e-9));
        for (&x, k) in xs.iter().zip(vals.iter()) {
            if k.norm() > m {
                return Err(Error::domain(format!(
                    "kernel bound violated at x={x}: |k| = {} > {m}",
                    k.norm()
                )));
            }
        }
        Ok(())
    }
}

/// Ordering constraints of the multilinear integrand. Slots are 1-based.
#[derive(Clone, Debug)]
pub enum PairSet {
    /// arbitrary pairs (i, i'): the factor chi(x_i - x_i' > 0)
    General(Vec<(usize, usize)>),
    /// chained structure: sigma[j-2] = sigma(j) < j for j = 2..=n
    ClassMn(Vec<usize>),
}

/// A multilinear transform specification.
#[derive(Clone, Debug)]
pub struct MultilinearSpec<T: Real> {
    pub kernels: Vec<KernelSpec<T>>,
    pub pairs: PairSet,
    pub p: T,
}

impl<T: Real> MultilinearSpec<T> {
    pub fn new(kernels: Vec<KernelSpec<T>>, pairs: PairSet, p: T) -> Result<Self> {
        let n = kernels.len();
        if n == 0 {
            return Err(Error::config("at least one kernel slot required"));
        }
        match &pairs {
            PairSet::General(list) => {
                for &(i, j) in list {
                    if i == 0 || j == 0 || i > n || j > n {
                        return Err(Error::config(format!("pair ({i},{j}) out of range")));
                    }
                }
            }
            PairSet::ClassMn(sigma) => {
                if sigma.len() + 1 != n {
                    return Err(Error::config("sigma must have n-1 entries"));
                }
                for (idx, &s) in sigma.iter().enumerate() {
                    let j = idx + 2;
                    if s == 0 || s >= j {
                        return Err(Error::config(format!("sigma({j}) = {s} violates sigma(j) < j")));
                    }
                }
            }
        }
        if !(p >= T::one() && p <= cast(2.0)) {
            return Err(Error::domain("p must lie in [1, 2]"));
        }
        Ok(MultilinearSpec { kernels, pairs, p })
    }

    pub fn n(&self) -> usize {
        self.kernels.len()
    }

    /// Dual exponent: 1/q = 1 - 1/p (infinity at p = 1).
    pub fn q(&self) -> T {
        if self.p <= T::one() {
            T::infinity()
        } else {
            T::one() / (T::one() - T::one() / self.p)
        }
    }

    /// Output exponent: 1/s_n = n/q.
    pub fn s_n(&self) -> T {
        let q = self.q();
        if q.is_infinite() {
            T::infinity()
        } else {
            q / cast::<T>(self.n() as f64)
        }
    }
}

/// Per-slot truncation bounds D_i (infinity = untruncated).
#[derive(Clone, Debug)]
pub struct TruncationVector<T>(pub Vec<T>);

impl<T: Real> TruncationVector<T> {
    pub fn unbounded(n: usize) -> Self {
        TruncationVector(vec![T::infinity(); n])
    }
}

/// Midpoint axis grid aligned to unit cells: `per_unit` points per unit
/// interval over [0, x_hi].
pub fn axis_grid<T: Real>(x_hi: T, min_res: usize) -> (Vec<T>, T) {
    let units = to_f64(x_hi.ceil()) as usize;
    let units = units.max(1);
    let per_unit = min_res.div_ceil(units).max(1);
    let n = per_unit * units;
    let dx = x_hi / cast::<T>(n as f64);
    let xs = (0..n).map(|m| dx * (cast::<T>(m as f64) + cast(0.5))).collect();
    (xs, dx)
}

/// Truncated one-dimensional operator values int_0^N k(lambda, x) f(x) dx
/// for each lambda, by per-cell oscillation-aware quadrature.
pub fn apply_kernel_truncated<T: Real>(
    kernel: &KernelSpec<T>,
    f: &StepFunction<T>,
    lambdas: &[T],
    n_trunc: T,
) -> Result<Vec<Complex<T>>> {
    lambdas
        .par_iter()
        .map(|&lambda| kernel_integral(kernel, f, lambda, n_trunc))
        .collect()
}

fn kernel_integral<T: Real>(
    kernel: &KernelSpec<T>,
    f: &StepFunction<T>,
    lambda: T,
    n_trunc: T,
) -> Result<Complex<T>> {
    let (lo, hi) = f.support();
    let hi = hi.min(n_trunc);
    if !(hi > lo) {
        return Ok(Complex::new(T::zero(), T::zero()));
    }
    match kernel {
        KernelSpec::Custom { f: kf, .. } => {
            // resolved adaptive panels per f-cell
            let mut total = Complex::new(T::zero(), T::zero());
            for (i, &v) in f.values().iter().enumerate() {
                let a = f.breakpoints()[i].max(T::zero());
                let b = f.breakpoints()[i + 1].min(hi);
                if !(b > a) || v == T::zero() {
                    continue;
                }
                let piece = crate::quad::gk_adaptive_c(&|x| kf(lambda, x), a, b, cast(1e-11))?;
                total = total + piece.scale(v);
            }
            Ok(total)
        }
        KernelSpec::ThetaSqPhase { v, basis } | KernelSpec::ConjThetaSqPhase { v, basis } => {
            let conj = matches!(kernel, KernelSpec::ConjThetaSqPhase { .. });
            let b = basis.build(lambda)?;
            let acc = PhaseAccumulator::new(b.clone(), v.clone());
            let free = matches!(basis, BasisSpec::Free);
            let sign: T = if conj { -T::one() } else { T::one() };
            let mut total = Complex::new(T::zero(), T::zero());
            for (i, &fv) in f.values().iter().enumerate() {
                let a = f.breakpoints()[i].max(T::zero());
                let bb = f.breakpoints()[i + 1].min(hi);
                if !(bb > a) || fv == T::zero() {
                    continue;
                }
                let piece = if free {
                    let root_l = lambda.sqrt();
                    let g = |_t: T| Complex::new(T::one(), T::zero());
                    let ph = |t: T| {
                        sign * cast::<T>(2.0) * (root_l * t + acc.phase_at(t).unwrap_or(T::zero()))
                    };
                    osc_adaptive(&g, &ph, a, bb, cast(1e-11))?
                } else {
                    crate::quad::gk_adaptive_c(
                        &|x| {
                            let (th, _) = b.eval(x);
                            let p = acc.phase_at(x).unwrap_or(T::zero());
                            let k = th * th * cis(cast::<T>(2.0) * p);
                            if conj {
                                k.conj()
                            } else {
                                k
                            }
                        },
                        a,
                        bb,
                        cast(1e-10),
                    )?
                };
                total = total + piece.scale(fv);
            }
            Ok(total)
        }
    }
}

/// Discrete surrogate of the maximal function: sup over a dyadic ladder
/// of truncation points of |int_0^N k f|, per lambda.
pub fn kernel_maximal<T: Real>(
    kernel: &KernelSpec<T>,
    f: &StepFunction<T>,
    lambdas: &[T],
    ladder: &[T],
) -> Result<Vec<T>> {
    lambdas
        .par_iter()
        .map(|&lambda| {
            let mut sup = T::zero();
            for &n_t in ladder {
                sup = sup.max(kernel_integral(kernel, f, lambda, n_t)?.norm());
            }
            Ok(sup)
        })
        .collect()
}

/// Compiled constraint table: for each slot j (0-based), the list of
/// earlier slots i with a direction; `impossible` marks an empty support.
struct Constraints {
    /// per later slot: (earlier slot, later_must_be_greater)
    per_slot: Vec<Vec<(usize, bool)>>,
    impossible: bool,
}

fn compile_pairs(n: usize, pairs: &PairSet) -> Constraints {
    let mut table: std::collections::BTreeMap<(usize, usize), (bool, bool)> =
        std::collections::BTreeMap::new();
    let mut impossible = false;
    let list: Vec<(usize, usize)> = match pairs {
        PairSet::General(l) => l.clone(),
        PairSet::ClassMn(sigma) => {
            sigma.iter().enumerate().map(|(idx, &s)| (idx + 2, s)).collect()
        }
    };
    for (i, j) in list {
        if i == j {
            // chi of (x_i - x_i) on the open half line: empty
            impossible = true;
            continue;
        }
        let (lo, hi) = (i.min(j), i.max(j));
        let later_greater = i == hi; // constraint x_i > x_j
        let e = table.entry((lo, hi)).or_insert((false, false));
        if later_greater {
            e.0 = true;
        } else {
            e.1 = true;
        }
    }
    let mut per_slot = vec![Vec::new(); n];
    for ((lo, hi), (fwd, bwd)) in table {
        if fwd && bwd {
            impossible = true;
            continue;
        }
        per_slot[hi - 1].push((lo - 1, fwd));
    }
    Constraints { per_slot, impossible }
}

/// Weight of one ordered comparison on the midpoint grid: full weight for
/// a strict inequality of cell indices, half on the shared diagonal cell
/// (the constraint cuts that cell square in half).
#[inline]
fn pair_weight<T: Real>(m_later: usize, m_earlier: usize, later_greater: bool) -> T {
    use std::cmp::Ordering::*;
    match m_later.cmp(&m_earlier) {
        Equal => cast(0.5),
        Greater => {
            if later_greater {
                T::one()
            } else {
                T::zero()
            }
        }
        Less => {
            if later_greater {
                T::zero()
            } else {
                T::one()
            }
        }
    }
}

const DENSE_COST_LIMIT: f64 = 2.0e8;

/// Dense tensor-grid midpoint evaluation of the truncated transform.
pub fn t_n_eval_dense<T: Real>(
    spec: &MultilinearSpec<T>,
    f_list: &[StepFunction<T>],
    lambda: T,
    trunc: &TruncationVector<T>,
    min_res: usize,
) -> Result<Complex<T>> {
    let n = spec.n();
    if f_list.len() != n || trunc.0.len() != n {
        return Err(Error::domain("slot count mismatch"));
    }
    if n > 4 {
        return Err(Error::domain("dense evaluator caps at n = 4"));
    }
    let cons = compile_pairs(n, &spec.pairs);
    if cons.impossible {
        return Ok(Complex::new(T::zero(), T::zero()));
    }
    let x_hi = f_list
        .iter()
        .map(|f| f.support().1)
        .fold(T::zero(), T::max);
    let (xs, dx) = axis_grid(x_hi, min_res);
    let cost = (xs.len() as f64).powi(n as i32);
    if cost > DENSE_COST_LIMIT {
        return Err(Error::ResourceLimit { cost });
    }
    // per-slot amplitude with truncation mask
    let mut amps: Vec<Vec<Complex<T>>> = Vec::with_capacity(n);
    for j in 0..n {
        let k = spec.kernels[j].materialize(lambda, &xs)?;
        let amp: Vec<Complex<T>> = xs
            .iter()
            .enumerate()
            .map(|(m, &x)| {
                if x < trunc.0[j] {
                    k[m].scale(f_list[j].eval(x))
                } else {
                    Complex::new(T::zero(), T::zero())
                }
            })
            .collect();
        amps.push(amp);
    }
    let g = xs.len();
    let mut idx = vec![0usize; n];
    let mut total = Complex::new(T::zero(), T::zero());
    // depth-first tensor loop with early pruning
    fn rec<T: Real>(
        j: usize,
        n: usize,
        g: usize,
        idx: &mut Vec<usize>,
        amps: &[Vec<Complex<T>>],
        cons: &Constraints,
        partial: Complex<T>,
        total: &mut Complex<T>,
    ) {
        if j == n {
            *total = *total + partial;
            return;
        }
        for m in 0..g {
            let mut w = T::one();
            for &(earlier, later_greater) in &cons.per_slot[j] {
                w = w * pair_weight::<T>(m, idx[earlier], later_greater);
                if w == T::zero() {
                    break;
                }
            }
            if w == T::zero() {
                continue;
            }
            let a = amps[j][m];
            if a.norm_sqr() == T::zero() {
                continue;
            }
            idx[j] = m;
            rec(j + 1, n, g, idx, amps, cons, partial * a.scale(w), total);
        }
    }
    rec(0, n, g, &mut idx, &amps, &cons, Complex::new(T::one(), T::zero()), &mut total);
    Ok(total.scale(dx.powi(n as i32)))
}

/// Nested cumulative evaluation of a class-M_n transform: one backward
/// pass per slot along the sigma tree, matching the dense evaluator's
/// discretisation (and its half-weight tie rule) exactly.
pub fn t_n_eval_nested<T: Real>(
    spec: &MultilinearSpec<T>,
    f_list: &[StepFunction<T>],
    lambda: T,
    trunc: &TruncationVector<T>,
    min_res: usize,
) -> Result<Complex<T>> {
    let n = spec.n();
    if f_list.len() != n || trunc.0.len() != n {
        return Err(Error::domain("slot count mismatch"));
    }
    if n > 8 {
        return Err(Error::domain("nested evaluator caps at n = 8"));
    }
    let sigma = match &spec.pairs {
        PairSet::ClassMn(s) => s.clone(),
        PairSet::General(_) => {
            return Err(Error::domain("nested evaluator needs a class-M_n spec"))
        }
    };
    let x_hi = f_list
        .iter()
        .map(|f| f.support().1)
        .fold(T::zero(), T::max);
    let (xs, dx) = axis_grid(x_hi, min_res);
    let g = xs.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (idx, &s) in sigma.iter().enumerate() {
        children[s].push(idx + 2);
    }
    // G factors per slot (1-based indices 2..=n)
    let zero = Complex::new(T::zero(), T::zero());
    let mut factors: Vec<Option<Vec<Complex<T>>>> = vec![None; n + 1];
    for j in (2..=n).rev() {
        let k = spec.kernels[j - 1].materialize(lambda, &xs)?;
        let mut term: Vec<Complex<T>> = (0..g)
            .map(|m| {
                if xs[m] < trunc.0[j - 1] {
                    k[m].scale(f_list[j - 1].eval(xs[m]))
                } else {
                    zero
                }
            })
            .collect();
        for &d in &children[j] {
            let f = factors[d].as_ref().expect("child factor computed first");
            for m in 0..g {
                term[m] = term[m] * f[m];
            }
        }
        let mut cum = vec![zero; g];
        let mut running = zero;
        for m in (0..g).rev() {
            cum[m] = (running + term[m].scale(cast(0.5))).scale(dx);
            running = running + term[m];
        }
        factors[j] = Some(cum);
    }
    let k1 = spec.kernels[0].materialize(lambda, &xs)?;
    let mut total = zero;
    for m in 0..g {
        if !(xs[m] < trunc.0[0]) {
            continue;
        }
        let mut t = k1[m].scale(f_list[0].eval(xs[m]));
        for &d in &children[1] {
            t = t * factors[d].as_ref().unwrap()[m];
        }
        total = total + t;
    }
    Ok(total.scale(dx))
}

/// Truncated transform value; class-M_n specs take the nested fast path.
pub fn t_n_eval<T: Real>(
    spec: &MultilinearSpec<T>,
    f_list: &[StepFunction<T>],
    lambda: T,
    trunc: &TruncationVector<T>,
    min_res: usize,
) -> Result<Complex<T>> {
    match &spec.pairs {
        PairSet::ClassMn(_) => t_n_eval_nested(spec, f_list, lambda, trunc, min_res),
        PairSet::General(_) => t_n_eval_dense(spec, f_list, lambda, trunc, min_res),
    }
}

/// Maximal truncated transform: sup over truncation vectors drawn
/// independently from the ladder. Returns the sup and its argmax vector.
pub fn t_n_maximal<T: Real>(
    spec: &MultilinearSpec<T>,
    f_list: &[StepFunction<T>],
    lambda: T,
    ladder: &[T],
    min_res: usize,
) -> Result<(T, Vec<T>)> {
    let n = spec.n();
    if ladder.is_empty() {
        return Err(Error::domain("empty truncation ladder"));
    }
    let combos = (ladder.len() as f64).powi(n as i32);
    if combos > 65536.0 {
        return Err(Error::ResourceLimit { cost: combos });
    }
    let mut idx = vec![0usize; n];
    let mut best = T::neg_infinity();
    let mut best_vec = vec![ladder[0]; n];
    loop {
        let trunc = TruncationVector(idx.iter().map(|&i| ladder[i]).collect());
        let v = t_n_eval(spec, f_list, lambda, &trunc, min_res)?.norm();
        if v > best {
            best = v;
            best_vec = trunc.0.clone();
        }
        // advance the mixed-radix counter
        let mut j = 0;
        loop {
            if j == n {
                return Ok((best, best_vec));
            }
            idx[j] += 1;
            if idx[j] < ladder.len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Summary of a seeded norm-constant probe.
#[derive(Clone, Debug)]
pub struct ProbeReport<T> {
    pub ratios: Vec<T>,
    pub max_ratio: T,
    pub median_ratio: T,
    pub s_n: T,
    pub p: T,
    pub q: T,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The s_n-quasinorm over a lambda grid: (sum |v|^{s_n} dl)^{1/s_n}, the
/// sup when s_n is infinite. No triangle inequality is assumed anywhere.
pub fn quasinorm<T: Real>(values: &[T], dl: T, s_n: T) -> T {
    if s_n.is_infinite() {
        return values.iter().fold(T::zero(), |s, &v| s.max(v));
    }
    let sum = values.iter().fold(T::zero(), |s, &v| s + v.powf(s_n));
    (sum * dl).powf(T::one() / s_n)
}

/// Empirical probe of the norm bound: seeded unit-norm test functions,
/// transform norms over a lambda grid, ratio statistics across trials.
pub fn empirical_norm_constant<T: Real>(
    spec: &MultilinearSpec<T>,
    trials: usize,
    seed: u64,
    lambdas: &[T],
    cells: usize,
    norm_kind: NormKind,
    min_res: usize,
) -> Result<ProbeReport<T>> {
    if trials < 10 {
        return Err(Error::domain("at least 10 trials required"));
    }
    if lambdas.len() < 2 {
        return Err(Error::domain("lambda grid needs at least 2 points"));
    }
    let n = spec.n();
    let s_n = spec.s_n();
    let dl = (lambdas[lambdas.len() - 1] - lambdas[0]) / cast::<T>((lambdas.len() - 1) as f64);
    let ratios: Vec<T> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<T> {
            let f = StepFunction::<T>::seeded(T::zero(), cells, splitmix64(seed ^ t as u64))
                .normalized(spec.p, norm_kind)?;
            let f_list: Vec<StepFunction<T>> = vec![f; n];
            let trunc = TruncationVector::unbounded(n);
            let vals: Vec<T> = lambdas
                .iter()
                .map(|&l| Ok(t_n_eval(spec, &f_list, l, &trunc, min_res)?.norm()))
                .collect::<Result<_>>()?;
            Ok(quasinorm(&vals, dl, s_n))
        })
        .collect::<Result<_>>()?;
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let max = *sorted.last().unwrap();
    Ok(ProbeReport { ratios, max_ratio: max, median_ratio: median, s_n, p: spec.p, q: spec.q() })
}

/// Smooth compactly supported cutoff in lambda: 1 on [a, b], 0 outside
/// [a0, b0], C-infinity ramps.
#[derive(Clone, Copy, Debug)]
pub struct CutoffSpec<T> {
    pub a0: T,
    pub a: T,
    pub b: T,
    pub b0: T,
}

impl<T: Real> CutoffSpec<T> {
    pub fn new(a0: T, a: T, b: T, b0: T) -> Result<Self> {
        if !(T::zero() < a0 && a0 < a && a < b && b < b0) {
            return Err(Error::config("cutoff needs 0 < a0 < a < b < b0"));
        }
        Ok(CutoffSpec { a0, a, b, b0 })
    }

    pub fn eval(&self, lambda: T) -> T {
        fn bump<T: Real>(t: T) -> T {
            if t <= T::zero() {
                T::zero()
            } else {
                (-T::one() / t).exp()
            }
        }
        fn ramp<T: Real>(t: T) -> T {
            let g = bump(t);
            let h = bump(T::one() - t);
            g / (g + h)
        }
        if lambda <= self.a0 || lambda >= self.b0 {
            T::zero()
        } else if lambda < self.a {
            ramp((lambda - self.a0) / (self.a - self.a0))
        } else if lambda <= self.b {
            T::one()
        } else {
            ramp((self.b0 - lambda) / (self.b0 - self.b))
        }
    }
}

/// One pair's parts-integrated kernel value and the fitted bound.
#[derive(Clone, Copy, Debug)]
pub struct ZPair<T> {
    pub x: T,
    pub y: T,
    pub z_abs: T,
    pub rhs: T,
    pub calibration: bool,
    /// quadrature was replaced by the boundary asymptotics
    pub asymptotic: bool,
}

#[derive(Clone, Debug)]
pub struct ZDecayReport<T> {
    pub pairs: Vec<ZPair<T>>,
    /// fitted envelope constant (includes the potential-norm factor)
    pub c_fitted: T,
    pub v_norm: T,
    /// decay exponent of the bound form
    pub exponent: T,
    /// measured log-log slope of |Z| over above-floor pairs
    pub slope: T,
    pub bound_ok: bool,
}

/// Z(x, y) = int phi(lambda) exp(2i sqrt(lambda)(x-y) - (i/sqrt(lambda))
/// int_y^x V) dlambda, evaluated in the u = sqrt(lambda) variable, and the
/// parts-integrated bound C min(1, |x-y|^{-N(1-1/q)}) ||V||_p with C
/// fitted on the calibration half of the pair set (interleaved by
/// separation) and verified on the rest.
pub fn z_kernel_decay<T: Real>(
    phi: &CutoffSpec<T>,
    v: &PotentialSpec<T>,
    pairs: &[(T, T)],
    n_parts: u32,
    p: T,
) -> Result<ZDecayReport<T>> {
    if pairs.len() < 4 {
        return Err(Error::domain("need at least 4 pairs"));
    }
    let q = if p <= T::one() { T::infinity() } else { T::one() / (T::one() - T::one() / p) };
    let exponent = cast::<T>(n_parts as f64) * (T::one() - T::one() / q);
    if !(exponent > T::one()) {
        return Err(Error::domain("need N (1 - 1/q) > 1"));
    }
    let u_lo = phi.a0.sqrt();
    let u_hi = phi.b0.sqrt();
    let z_of = |x: T, y: T| -> Result<(T, bool)> {
        let w = if x == y {
            T::zero()
        } else {
            let (lo, hi) = if x > y { (y, x) } else { (x, y) };
            let s = gk_adaptive(&|t| v.eval(t), lo, hi, cast(1e-10), SpikePolicy::Extrapolate)?
                .value;
            if x > y {
                s
            } else {
                -s
            }
        };
        let delta = x - y;
        if delta.abs() > cast(1e5) {
            // no stationary point and a C-infinity amplitude: boundary
            // asymptotics vanish to all orders
            return Ok((T::zero(), true));
        }
        let g = |u: T| Complex::new(cast::<T>(2.0) * u * phi.eval(u * u), T::zero());
        let ph = |u: T| cast::<T>(2.0) * u * delta - w / u;
        let z = osc_adaptive(&g, &ph, u_lo, u_hi, cast(1e-11))?;
        Ok((z.norm(), false))
    };
    let v_norm = crate::potential::weighted_norm(
        v,
        p,
        T::zero(),
        NormKind::Lp,
        cast(1e5),
    )
    .unwrap_or(T::zero());

    // sort by separation, interleave calibration and verification
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&i, &j| {
        let a = (pairs[i].0 - pairs[i].1).abs();
        let b = (pairs[j].0 - pairs[j].1).abs();
        a.partial_cmp(&b).unwrap()
    });
    let mut out = Vec::with_capacity(pairs.len());
    for (rank, &i) in order.iter().enumerate() {
        let (x, y) = pairs[i];
        let (z_abs, asymptotic) = z_of(x, y)?;
        out.push(ZPair {
            x,
            y,
            z_abs,
            rhs: T::zero(),
            calibration: rank % 2 == 0,
            asymptotic,
        });
    }
    let unit_rhs = |x: T, y: T| -> T {
        let d = (x - y).abs();
        T::one().min(d.powf(-exponent))
    };
    let mut c = T::zero();
    for pr in out.iter().filter(|p| p.calibration) {
        c = c.max(pr.z_abs / unit_rhs(pr.x, pr.y));
    }
    let c_fitted = c * cast(1.1);
    let mut bound_ok = true;
    for pr in out.iter_mut() {
        pr.rhs = c_fitted * unit_rhs(pr.x, pr.y);
        if !pr.calibration && pr.z_abs > pr.rhs {
            bound_ok = false;
        }
    }
    // slope over above-floor pairs with separation past one
    let z_max = out.iter().fold(T::zero(), |s, p| s.max(p.z_abs));
    let floor = z_max * cast(1e-12);
    let pts: Vec<(T, T)> = out
        .iter()
        .filter(|p| p.z_abs > floor && (p.x - p.y).abs() > T::one())
        .map(|p| ((p.x - p.y).abs().ln(), p.z_abs.ln()))
        .collect();
    let slope = if pts.len() >= 3 {
        let n = cast::<T>(pts.len() as f64);
        let sx = pts.iter().fold(T::zero(), |s, p| s + p.0);
        let sy = pts.iter().fold(T::zero(), |s, p| s + p.1);
        let sxx = pts.iter().fold(T::zero(), |s, p| s + p.0 * p.0);
        let sxy = pts.iter().fold(T::zero(), |s, p| s + p.0 * p.1);
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else {
        T::nan()
    };
    Ok(ZDecayReport { pairs: out, c_fitted, v_norm, exponent, slope, bound_ok })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> StepFunction<f64> {
        StepFunction::new(vec![0.0, 1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn constant_kernel_unit_box() {
        let k = KernelSpec::<f64>::one();
        let vals = apply_kernel_truncated(&k, &unit_box(), &[1.0], 1.0).unwrap();
        assert!((vals[0] - Complex::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn exponential_kernel_closed_form() {
        // k = e^{2i lambda x}: int_0^1 = (e^{2i l} - 1)/(2i l)
        let k = KernelSpec::Custom {
            f: Arc::new(|l: f64, x: f64| Complex::new(0.0, 2.0 * l * x).exp()),
            bound: 1.0,
        };
        let lambdas = [0.4, 1.0, 3.7];
        let vals = apply_kernel_truncated(&k, &unit_box(), &lambdas, 1.0).unwrap();
        for (&l, got) in lambdas.iter().zip(vals.iter()) {
            let il = Complex::new(0.0, 2.0 * l);
            let want = (il.exp() - 1.0) / il;
            assert!((got - want).norm() < 1e-10, "l={l}: {got} vs {want}");
        }
    }

    #[test]
    fn sup_mode_dominates_member() {
        let k = KernelSpec::Custom {
            f: Arc::new(|l: f64, x: f64| Complex::new(0.0, 2.0 * l * x).exp()),
            bound: 1.0,
        };
        // alternating-sign cells make partial sums overshoot
        let f = StepFunction::on_unit_cells(
            0.0,
            vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
        )
        .unwrap();
        let lambdas: Vec<f64> = (1..=12).map(|i| 0.3 * i as f64).collect();
        let ladder: Vec<f64> = (0..=8).map(|i| i as f64).collect();
        let sup = kernel_maximal(&k, &f, &lambdas, &ladder).unwrap();
        let full = apply_kernel_truncated(&k, &f, &lambdas, 8.0).unwrap();
        for (s, v) in sup.iter().zip(full.iter()) {
            assert!(*s >= v.norm() - 1e-12);
        }
    }

    #[test]
    fn factorization_without_pairs() {
        // empty pair set: T_2 = product of the one-dimensional sums on the
        // same discretisation
        let spec = MultilinearSpec::new(
            vec![KernelSpec::<f64>::one(), KernelSpec::one()],
            PairSet::General(vec![]),
            1.5,
        )
        .unwrap();
        let f1 = StepFunction::<f64>::seeded(0.0, 4, 3);
        let f2 = StepFunction::<f64>::seeded(0.0, 4, 9);
        let trunc = TruncationVector::unbounded(2);
        let got = t_n_eval(&spec, &[f1.clone(), f2.clone()], 1.0, &trunc, 64).unwrap();
        let (xs, dx) = axis_grid(4.0f64, 64);
        let s1: f64 = xs.iter().map(|&x| f1.eval(x)).sum::<f64>() * dx;
        let s2: f64 = xs.iter().map(|&x| f2.eval(x)).sum::<f64>() * dx;
        assert!((got.re - s1 * s2).abs() < 1e-10, "{} vs {}", got.re, s1 * s2);
        assert!(got.im.abs() < 1e-14);
    }

    #[test]
    fn ordered_square_is_half() {
        // n=2, constraint x2 > x1, unit kernels and indicators: the volume
        // of the ordered triangle is exactly one half
        let spec = MultilinearSpec::new(
            vec![KernelSpec::<f64>::one(), KernelSpec::one()],
            PairSet::General(vec![(2, 1)]),
            1.5,
        )
        .unwrap();
        let trunc = TruncationVector::unbounded(2);
        let got = t_n_eval(&spec, &[unit_box(), unit_box()], 1.0, &trunc, 64).unwrap();
        assert!((got.re - 0.5).abs() < 1e-12, "{got}");
    }

    #[test]
    fn contradictory_pairs_give_zero() {
        let spec = MultilinearSpec::new(
            vec![KernelSpec::<f64>::one(), KernelSpec::one(), KernelSpec::one()],
            PairSet::General(vec![(2, 1), (3, 1), (1, 3)]),
            1.5,
        )
        .unwrap();
        let trunc = TruncationVector::unbounded(3);
        let f = unit_box();
        let got = t_n_eval(&spec, &[f.clone(), f.clone(), f], 1.0, &trunc, 64).unwrap();
        assert_eq!(got, Complex::new(0.0, 0.0));
    }

    #[test]
    fn nested_matches_dense_class_mn() {
        // chained sigma structures evaluated both ways agree to roundoff
        let v = PotentialSpec::power_decay(0.7f64, 0.8);
        let mk = || KernelSpec::ConjThetaSqPhase { v: v.clone(), basis: BasisSpec::Free };
        for sigma in [vec![1usize], vec![1usize, 1], vec![1usize, 2]] {
            let n = sigma.len() + 1;
            let spec = MultilinearSpec::new(
                (0..n).map(|_| mk()).collect(),
                PairSet::ClassMn(sigma.clone()),
                1.5,
            )
            .unwrap();
            let f = StepFunction::<f64>::seeded(0.0, 6, 17);
            let fs: Vec<StepFunction<f64>> = vec![f; n];
            let trunc = TruncationVector::unbounded(n);
            let a = t_n_eval_nested(&spec, &fs, 1.3, &trunc, 64).unwrap();
            let dense_spec = MultilinearSpec::new(
                (0..n).map(|_| mk()).collect(),
                PairSet::General(
                    sigma.iter().enumerate().map(|(i, &s)| (i + 2, s)).collect(),
                ),
                1.5,
            )
            .unwrap();
            let b = t_n_eval_dense(&dense_spec, &fs, 1.3, &trunc, 64).unwrap();
            let rel = (a - b).norm() / b.norm().max(1e-300);
            assert!(rel < 1e-8, "sigma {sigma:?}: nested {a} dense {b} rel {rel:.3e}");
        }
    }

    #[test]
    fn multilinearity_in_each_slot() {
        let spec = MultilinearSpec::new(
            vec![KernelSpec::<f64>::one(), KernelSpec::one()],
            PairSet::ClassMn(vec![1]),
            1.5,
        )
        .unwrap();
        let f1 = StepFunction::<f64>::seeded(0.0, 5, 1);
        let f2 = StepFunction::<f64>::seeded(0.0, 5, 2);
        let trunc = TruncationVector::unbounded(2);
        let base = t_n_eval(&spec, &[f1.clone(), f2.clone()], 1.0, &trunc, 64).unwrap();
        let scaled = t_n_eval(&spec, &[f1.scaled(2.5), f2], 1.0, &trunc, 64).unwrap();
        assert!((scaled - base.scale(2.5)).norm() < 1e-12 * base.norm().max(1.0));
    }

    #[test]
    fn truncation_converges_on_ladder() {
        let v = PotentialSpec::power_decay(0.8f64, 0.75);
        let spec = MultilinearSpec::new(
            vec![
                KernelSpec::ConjThetaSqPhase { v: v.clone(), basis: BasisSpec::Free },
                KernelSpec::ThetaSqPhase { v: v.clone(), basis: BasisSpec::Free },
            ],
            PairSet::ClassMn(vec![1]),
            1.5,
        )
        .unwrap();
        // weighted test function: seeded signs under a decaying envelope
        let raw = StepFunction::<f64>::seeded(0.0, 32, 4);
        let vals: Vec<f64> = raw
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (1.0 + i as f64).powf(-0.8))
            .collect();
        let f = StepFunction::on_unit_cells(0.0, vals).unwrap();
        let fs = vec![f.clone(), f];
        let full = t_n_eval(&spec, &fs, 1.2, &TruncationVector::unbounded(2), 128).unwrap();
        let gap = |d: f64| {
            (t_n_eval(&spec, &fs, 1.2, &TruncationVector(vec![d, d]), 128).unwrap() - full)
                .norm()
        };
        // decreasing trend over the dyadic ladder, exact at the support edge
        let (g4, g16, g32) = (gap(4.0), gap(16.0), gap(32.0));
        assert!(g16 < g4, "trend violated: {g16} !< {g4}");
        assert!(g32 < 1e-12, "full truncation at the support edge must agree, gap {g32}");
    }

    #[test]
    fn maximal_dominates_every_truncation() {
        let spec = MultilinearSpec::new(
            vec![KernelSpec::<f64>::one(), KernelSpec::one()],
            PairSet::ClassMn(vec![1]),
            1.5,
        )
        .unwrap();
        let f = StepFunction::<f64>::seeded(0.0, 6, 12);
        let fs = vec![f.clone(), f];
        let ladder: Vec<f64> = vec![1.0, 2.0, 4.0, 6.0];
        let (sup, argmax) = t_n_maximal(&spec, &fs, 1.0, &ladder, 64).unwrap();
        for &d1 in &ladder {
            for &d2 in &ladder {
                let v = t_n_eval(&spec, &fs, 1.0, &TruncationVector(vec![d1, d2]), 64)
                    .unwrap()
                    .norm();
                assert!(sup >= v - 1e-14);
            }
        }
        assert_eq!(argmax.len(), 2);
        // refinement of the ladder can only grow the sup
        let fine: Vec<f64> = vec![0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (sup_fine, _) = t_n_maximal(&spec, &fs, 1.0, &fine, 64).unwrap();
        assert!(sup_fine >= sup - 1e-14);
    }

    #[test]
    fn telescoping_difference_identity() {
        // T(f..f) - T(f_N..f_N) equals the sum of the n mixed terms
        let spec = MultilinearSpec::new(
            vec![KernelSpec::<f64>::one(), KernelSpec::one(), KernelSpec::one()],
            PairSet::ClassMn(vec![1, 2]),
            1.5,
        )
        .unwrap();
        let f = StepFunction::<f64>::seeded(0.0, 8, 31);
        let big_n = 5.0f64;
        let f_n = f.truncated(0.0, big_n).unwrap();
        let tail = f.tail_above(big_n).unwrap();
        let trunc = TruncationVector::unbounded(3);
        let t_full = t_n_eval(&spec, &[f.clone(), f.clone(), f.clone()], 1.0, &trunc, 64).unwrap();
        let t_cut = t_n_eval(&spec, &[f_n.clone(), f_n.clone(), f_n.clone()], 1.0, &trunc, 64)
            .unwrap();
        let mut sum = Complex::new(0.0, 0.0);
        for j in 0..3 {
            let slots: Vec<StepFunction<f64>> = (0..3)
                .map(|i| {
                    if i < j {
                        f_n.clone()
                    } else if i == j {
                        tail.clone()
                    } else {
                        f.clone()
                    }
                })
                .collect();
            sum += t_n_eval(&spec, &slots, 1.0, &trunc, 64).unwrap();
        }
        assert!(
            (t_full - t_cut - sum).norm() < 1e-12 * t_full.norm().max(1.0),
            "telescoping violated: {} vs {}",
            t_full - t_cut,
            sum
        );
    }

    #[test]
    fn probe_n1_bounded_kernel() {
        // single slot with |k| <= M and p = 1: ratio <= M exactly
        let m_bound = 0.8;
        let spec = MultilinearSpec::new(
            vec![KernelSpec::Custom {
                f: Arc::new(move |l: f64, x: f64| {
                    Complex::new(0.0, (l * x).sin() * m_bound).exp() * m_bound
                        / Complex::new(0.0, (l * x).sin() * m_bound).exp().norm()
                }),
                bound: m_bound,
            }],
            PairSet::General(vec![]),
            1.0,
        )
        .unwrap();
        let lambdas: Vec<f64> = (0..16).map(|i| 0.5 + 0.1 * i as f64).collect();
        let rep = empirical_norm_constant(&spec, 12, 7, &lambdas, 8, NormKind::Lp, 64).unwrap();
        assert!(rep.s_n.is_infinite());
        assert!(rep.max_ratio <= m_bound + 1e-9, "ratio {} > {}", rep.max_ratio, m_bound);
    }

    #[test]
    fn exponent_arithmetic() {
        let spec = MultilinearSpec::new(
            vec![KernelSpec::<f64>::one(), KernelSpec::one()],
            PairSet::ClassMn(vec![1]),
            4.0 / 3.0,
        )
        .unwrap();
        assert!((spec.q() - 4.0).abs() < 1e-12);
        assert!((spec.s_n() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cutoff_is_one_on_plateau_zero_outside() {
        let phi = CutoffSpec::new(0.4f64, 0.6, 1.8, 2.2).unwrap();
        assert_eq!(phi.eval(0.3), 0.0);
        assert_eq!(phi.eval(2.3), 0.0);
        assert_eq!(phi.eval(1.0), 1.0);
        assert!(phi.eval(0.5) > 0.0 && phi.eval(0.5) < 1.0);
    }

    #[test]
    fn z_kernel_zero_potential_at_coincidence() {
        // Z(x, x) = int phi dlambda exactly
        let phi = CutoffSpec::new(0.4f64, 0.6, 1.8, 2.2).unwrap();
        let v = PotentialSpec::<f64>::zero();
        let pairs = vec![(3.0, 3.0), (5.0, 4.0), (9.0, 4.0), (20.0, 4.0)];
        let rep = z_kernel_decay(&phi, &v, &pairs, 4, 2.0).unwrap();
        let want = gk_adaptive(&|l: f64| phi.eval(l), 0.4, 2.2, 1e-11, SpikePolicy::Reject)
            .unwrap()
            .value;
        let z00 = rep.pairs.iter().find(|p| p.x == p.y).unwrap();
        assert!((z00.z_abs - want).abs() < 1e-8, "{} vs {}", z00.z_abs, want);
    }

    #[test]
    fn z_kernel_decays_fast_for_zero_potential() {
        let phi = CutoffSpec::new(0.4f64, 0.6, 1.8, 2.2).unwrap();
        let v = PotentialSpec::<f64>::zero();
        let mut pairs = vec![];
        for i in 0..12 {
            let d = 2.0f64.powi(i);
            pairs.push((1.0 + d, 1.0));
        }
        let rep = z_kernel_decay(&phi, &v, &pairs, 4, 2.0).unwrap();
        // slope at most -N + 0.2 over the resolvable window
        assert!(rep.slope <= -4.0 + 0.2, "slope {}", rep.slope);
        assert!(rep.bound_ok);
    }
}
