//! Potential families: construction, deterministic evaluation, weighted
//! L^p and l^p(L^1) norms, and the monotone-weight admissibility check.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::quad::{gk_adaptive, gk_on_unit_cells, SpikePolicy};
use crate::scalar::{cast, to_f64, Real};
use crate::step_fn::{NormKind, StepFunction};

/// Deterministic 64-bit mixer for seeded cell signs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub enum PotentialKind<T> {
    Zero,
    /// c (1+x)^{-r}
    PowerDecay { c: T, r: T },
    /// a sin(kx) / (1+x); the 1/(1+x) envelope regularises the origin
    WignerVonNeumann { a: T, k: T },
    /// a cos(2 pi x / period), exactly periodic
    Periodic { a: T, period: T },
    /// periodic part plus a power-decay part
    PeriodicPlusDecay { a: T, period: T, c: T, r: T },
    /// c (1+x)^{-r} s(x) with s a seeded +-1 sign on each unit cell
    RandomDecay { c: T, r: T, seed: u64 },
    /// base potential with zero-valued intervals spliced in; `gaps` holds
    /// (position in base coordinate, inserted length), sorted by position
    GapInserted { base: Box<PotentialSpec<T>>, gaps: Vec<(T, T)> },
    /// integrable spike |x - (n+1/2)|^{-gamma} on each unit cell, with a
    /// (1+n)^{-r} amplitude envelope
    SingularLpL1 { c: T, r: T, gamma: T },
    Tabulated { f: StepFunction<T> },
}

/// Evaluable descriptor of a potential on the half line.
#[derive(Clone, Debug)]
pub struct PotentialSpec<T> {
    pub kind: PotentialKind<T>,
    /// Evaluation beyond this point returns 0; infinity means no cutoff.
    pub support_cutoff: T,
}

impl<T: Real> PotentialSpec<T> {
    pub fn new(kind: PotentialKind<T>) -> Self {
        PotentialSpec { kind, support_cutoff: T::infinity() }
    }

    pub fn zero() -> Self {
        Self::new(PotentialKind::Zero)
    }

    pub fn power_decay(c: T, r: T) -> Self {
        Self::new(PotentialKind::PowerDecay { c, r })
    }

    pub fn wigner_von_neumann(a: T, k: T) -> Self {
        Self::new(PotentialKind::WignerVonNeumann { a, k })
    }

    pub fn periodic(a: T, period: T) -> Self {
        Self::new(PotentialKind::Periodic { a, period })
    }

    pub fn with_cutoff(mut self, x_max: T) -> Self {
        self.support_cutoff = x_max;
        self
    }

    /// Splice zero-gaps into `base`. Gap positions are given in the base
    /// coordinate and must be sorted and positive-length.
    pub fn gap_inserted(base: PotentialSpec<T>, gaps: Vec<(T, T)>) -> Result<Self> {
        if gaps.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::config("gap positions must be sorted"));
        }
        if gaps.iter().any(|&(u, l)| u < T::zero() || l <= T::zero()) {
            return Err(Error::config("gaps need nonnegative position and positive length"));
        }
        Ok(Self::new(PotentialKind::GapInserted { base: Box::new(base), gaps }))
    }

    /// Map a point of the gap-stretched coordinate back to the base
    /// coordinate. Returns `None` when `x` falls inside an inserted gap.
    /// O(log #gaps) through the prefix structure.
    pub fn gap_to_base(gaps: &[(T, T)], x: T) -> Option<T> {
        // gap i occupies [u_i + P_i, u_i + P_i + L_i) where P_i is the total
        // length of earlier gaps
        let mut lo = 0usize;
        let mut hi = gaps.len();
        let mut prefix = T::zero();
        // binary search over "gap start in stretched coordinate <= x"
        // compute prefix lengths on the fly (gaps are few; recompute per probe)
        while lo < hi {
            let mid = (lo + hi) / 2;
            let pref_mid: T = gaps[..mid].iter().fold(T::zero(), |s, &(_, l)| s + l);
            let start = gaps[mid].0 + pref_mid;
            if start <= x {
                lo = mid + 1;
                prefix = pref_mid + gaps[mid].1;
                if x < start + gaps[mid].1 {
                    return None;
                }
            } else {
                hi = mid;
            }
        }
        Some(x - prefix)
    }

    /// Deterministic point evaluation; zero beyond the support cutoff.
    pub fn eval(&self, x: T) -> T {
        if x > self.support_cutoff || x < T::zero() {
            return T::zero();
        }
        match &self.kind {
            PotentialKind::Zero => T::zero(),
            PotentialKind::PowerDecay { c, r } => *c * (T::one() + x).powf(-*r),
            PotentialKind::WignerVonNeumann { a, k } => *a * (*k * x).sin() / (T::one() + x),
            PotentialKind::Periodic { a, period } => {
                // reduce to one period before the trig call so periodicity
                // survives large x
                let u = x / *period;
                *a * (cast::<T>(2.0) * T::PI() * (u - u.floor())).cos()
            }
            PotentialKind::PeriodicPlusDecay { a, period, c, r } => {
                let u = x / *period;
                *a * (cast::<T>(2.0) * T::PI() * (u - u.floor())).cos()
                    + *c * (T::one() + x).powf(-*r)
            }
            PotentialKind::RandomDecay { c, r, seed } => {
                let cell = to_f64(x.floor()) as u64;
                let h = splitmix64(seed ^ cell.wrapping_mul(0xA24B_AED4_963E_E407));
                let sgn = if h & 1 == 0 { T::one() } else { -T::one() };
                *c * (T::one() + x).powf(-*r) * sgn
            }
            PotentialKind::GapInserted { base, gaps } => match Self::gap_to_base(gaps, x) {
                None => T::zero(),
                Some(u) => base.eval(u),
            },
            PotentialKind::SingularLpL1 { c, r, gamma } => {
                let n = x.floor();
                let d = (x - n - cast::<T>(0.5)).abs().max(cast(1e-30));
                *c * (T::one() + n).powf(-*r) * d.powf(-*gamma)
            }
            PotentialKind::Tabulated { f } => f.eval(x),
        }
    }

    /// Whether unit-cell quadrature needs the integrable-spike policy.
    fn spike_policy(&self) -> SpikePolicy {
        match self.kind {
            PotentialKind::SingularLpL1 { .. } => SpikePolicy::Extrapolate,
            _ => SpikePolicy::Reject,
        }
    }
}

/// Construct a potential from a kind name and named parameters, validating
/// required keys. This is the programmatic face of the text-block format.
pub fn make_potential<T: Real>(
    kind: &str,
    params: &BTreeMap<String, String>,
) -> Result<PotentialSpec<T>> {
    let get = |key: &str| -> Result<T> {
        let raw = params
            .get(key)
            .ok_or_else(|| Error::config(format!("kind '{kind}' requires parameter '{key}'")))?;
        let v: f64 = parse_real(raw)
            .ok_or_else(|| Error::config(format!("parameter '{key}' is not a number: {raw}")))?;
        if !v.is_finite() {
            return Err(Error::config(format!("parameter '{key}' must be finite")));
        }
        Ok(cast(v))
    };
    let get_u64 = |key: &str| -> Result<u64> {
        let raw = params
            .get(key)
            .ok_or_else(|| Error::config(format!("kind '{kind}' requires parameter '{key}'")))?;
        raw.trim()
            .parse::<u64>()
            .map_err(|_| Error::config(format!("parameter '{key}' is not an integer: {raw}")))
    };
    let mut spec = match kind {
        "zero" => PotentialSpec::zero(),
        "power_decay" => PotentialSpec::power_decay(get("c")?, get("r")?),
        "wigner_von_neumann" => PotentialSpec::wigner_von_neumann(get("a")?, get("k")?),
        "periodic" => {
            let period = get("period")?;
            if period <= T::zero() {
                return Err(Error::config("period must be positive"));
            }
            PotentialSpec::periodic(get("a")?, period)
        }
        "periodic_plus_decay" => {
            let period = get("period")?;
            if period <= T::zero() {
                return Err(Error::config("period must be positive"));
            }
            PotentialSpec::new(PotentialKind::PeriodicPlusDecay {
                a: get("a")?,
                period,
                c: get("c")?,
                r: get("r")?,
            })
        }
        "random_decay" => PotentialSpec::new(PotentialKind::RandomDecay {
            c: get("c")?,
            r: get("r")?,
            seed: get_u64("seed")?,
        }),
        "gap_inserted" => {
            let base_kind = params
                .get("base")
                .ok_or_else(|| Error::config("gap_inserted requires 'base'"))?
                .clone();
            let gaps_raw = params
                .get("gaps")
                .ok_or_else(|| Error::config("gap_inserted requires 'gaps'"))?;
            let mut gaps = Vec::new();
            for piece in gaps_raw.split(';').filter(|s| !s.trim().is_empty()) {
                let (u, l) = piece
                    .split_once(':')
                    .ok_or_else(|| Error::config(format!("bad gap entry '{piece}'")))?;
                let u: f64 = parse_real(u)
                    .ok_or_else(|| Error::config(format!("bad gap position '{u}'")))?;
                let l: f64 = parse_real(l)
                    .ok_or_else(|| Error::config(format!("bad gap length '{l}'")))?;
                gaps.push((cast::<T>(u), cast::<T>(l)));
            }
            let mut inner = params.clone();
            inner.remove("base");
            inner.remove("gaps");
            let base = make_potential::<T>(&base_kind, &inner)?;
            PotentialSpec::gap_inserted(base, gaps)?
        }
        "singular_lp_l1" => {
            let gamma = get("gamma")?;
            if gamma <= T::zero() || gamma >= T::one() {
                return Err(Error::config("gamma must lie in (0, 1) for an integrable spike"));
            }
            PotentialSpec::new(PotentialKind::SingularLpL1 { c: get("c")?, r: get("r")?, gamma })
        }
        "tabulated" => {
            let csv = params
                .get("csv")
                .ok_or_else(|| Error::config("tabulated requires inline 'csv' data"))?;
            PotentialSpec::new(PotentialKind::Tabulated { f: step_from_csv(csv)? })
        }
        other => return Err(Error::config(format!("unknown potential kind '{other}'"))),
    };
    if let Some(raw) = params.get("x_max") {
        let v = parse_real(raw).ok_or_else(|| Error::config("bad x_max"))?;
        spec.support_cutoff = cast(v);
    }
    Ok(spec)
}

fn parse_real(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
        return Some(f64::INFINITY);
    }
    t.parse::<f64>().ok()
}

/// Two-column CSV (x, V) into a left-value step function. Semicolons
/// separate rows when the data is carried inline in a key=value block.
pub fn step_from_csv<T: Real>(text: &str) -> Result<StepFunction<T>> {
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    let rows: Vec<&str> = if text.contains('\n') {
        text.lines().collect()
    } else {
        text.split(';').collect()
    };
    for (i, line) in rows.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("x,") {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected 'x,V'".into() })?;
        let x: f64 = parse_real(a)
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("bad x '{a}'") })?;
        let v: f64 = parse_real(b)
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("bad V '{b}'") })?;
        xs.push(cast::<T>(x));
        vs.push(cast::<T>(v));
    }
    if xs.len() < 2 {
        return Err(Error::config("tabulated potential needs at least two rows"));
    }
    vs.pop(); // last row only closes the final cell
    StepFunction::new(xs, vs)
}

impl<T: Real> PotentialSpec<T> {
    /// Serialise as a key=value block (the `[potential]` section format).
    pub fn to_block(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        match &self.kind {
            PotentialKind::Zero => lines.push("kind=zero".into()),
            PotentialKind::PowerDecay { c, r } => {
                lines.push("kind=power_decay".into());
                lines.push(format!("c={c}"));
                lines.push(format!("r={r}"));
            }
            PotentialKind::WignerVonNeumann { a, k } => {
                lines.push("kind=wigner_von_neumann".into());
                lines.push(format!("a={a}"));
                lines.push(format!("k={k}"));
            }
            PotentialKind::Periodic { a, period } => {
                lines.push("kind=periodic".into());
                lines.push(format!("a={a}"));
                lines.push(format!("period={period}"));
            }
            PotentialKind::PeriodicPlusDecay { a, period, c, r } => {
                lines.push("kind=periodic_plus_decay".into());
                lines.push(format!("a={a}"));
                lines.push(format!("period={period}"));
                lines.push(format!("c={c}"));
                lines.push(format!("r={r}"));
            }
            PotentialKind::RandomDecay { c, r, seed } => {
                lines.push("kind=random_decay".into());
                lines.push(format!("c={c}"));
                lines.push(format!("r={r}"));
                lines.push(format!("seed={seed}"));
            }
            PotentialKind::GapInserted { base, gaps } => {
                lines.push("kind=gap_inserted".into());
                for line in base.to_block().lines() {
                    if let Some(rest) = line.strip_prefix("kind=") {
                        lines.push(format!("base={rest}"));
                    } else if !line.starts_with("x_max=") {
                        lines.push(line.to_string());
                    }
                }
                let gaps_s: Vec<String> = gaps.iter().map(|&(u, l)| format!("{u}:{l}")).collect();
                lines.push(format!("gaps={}", gaps_s.join(";")));
            }
            PotentialKind::SingularLpL1 { c, r, gamma } => {
                lines.push("kind=singular_lp_l1".into());
                lines.push(format!("c={c}"));
                lines.push(format!("r={r}"));
                lines.push(format!("gamma={gamma}"));
            }
            PotentialKind::Tabulated { f } => {
                lines.push("kind=tabulated".into());
                let mut rows = Vec::new();
                for (i, &x) in f.breakpoints().iter().enumerate() {
                    let v = if i < f.values().len() { f.values()[i] } else { T::zero() };
                    rows.push(format!("{x},{v}"));
                }
                lines.push(format!("csv={}", rows.join(";")));
            }
        }
        if self.support_cutoff.is_finite() {
            lines.push(format!("x_max={}", self.support_cutoff));
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Parse a key=value block produced by [`Self::to_block`].
    pub fn from_block(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('[') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected key=value".into() })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let kind = map
            .get("kind")
            .ok_or_else(|| Error::config("potential block is missing 'kind'"))?
            .clone();
        make_potential(&kind, &map)
    }
}

/// Monotone weight d(x) with d > 0, d' <= 0, d -> 0.
#[derive(Clone, Debug)]
pub enum WeightSpec<T> {
    /// (1+x)^{-delta}
    Power { delta: T },
    /// sampled monotone weight, linearly interpolated, clamped at the ends
    TabulatedMonotone { xs: Vec<T>, ds: Vec<T> },
}

impl<T: Real> WeightSpec<T> {
    pub fn power(delta: T) -> Result<Self> {
        if delta <= T::zero() {
            return Err(Error::config("weight exponent must be positive"));
        }
        Ok(WeightSpec::Power { delta })
    }

    pub fn tabulated(xs: Vec<T>, ds: Vec<T>) -> Result<Self> {
        if xs.len() != ds.len() || xs.len() < 2 {
            return Err(Error::config("weight table needs matching xs/ds with >= 2 rows"));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("weight grid must increase"));
        }
        if ds.iter().any(|&d| !(d > T::zero())) {
            return Err(Error::config("weight must be strictly positive"));
        }
        if ds.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("weight must be nonincreasing"));
        }
        Ok(WeightSpec::TabulatedMonotone { xs, ds })
    }

    /// Weight adapted to a gap-inserted potential: constant across each
    /// inserted gap and power-decaying in the base coordinate elsewhere.
    /// Tabulated densely out to `x_hi`.
    pub fn gap_adapted_power(delta: T, spec: &PotentialSpec<T>, x_hi: T) -> Result<Self> {
        let gaps = match &spec.kind {
            PotentialKind::GapInserted { gaps, .. } => gaps.clone(),
            _ => return Err(Error::domain("gap-adapted weight needs a gap_inserted potential")),
        };
        let n = 4096usize;
        let mut xs = Vec::with_capacity(n + 1);
        let mut ds = Vec::with_capacity(n + 1);
        let mut last_u = T::zero();
        for i in 0..=n {
            let x = x_hi * cast::<T>(i as f64 / n as f64);
            let u = PotentialSpec::<T>::gap_to_base(&gaps, x).unwrap_or(last_u);
            let u = u.max(last_u);
            last_u = u;
            xs.push(x);
            ds.push((T::one() + u).powf(-delta));
        }
        WeightSpec::tabulated(xs, ds)
    }

    pub fn eval(&self, x: T) -> T {
        match self {
            WeightSpec::Power { delta } => (T::one() + x.max(T::zero())).powf(-*delta),
            WeightSpec::TabulatedMonotone { xs, ds } => {
                if x <= xs[0] {
                    return ds[0];
                }
                if x >= *xs.last().unwrap() {
                    return *ds.last().unwrap();
                }
                let mut lo = 0usize;
                let mut hi = xs.len() - 1;
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if xs[mid] <= x {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let t = (x - xs[lo]) / (xs[lo + 1] - xs[lo]);
                ds[lo] + (ds[lo + 1] - ds[lo]) * t
            }
        }
    }
}

const NORM_REL_TOL: f64 = 1e-10;

/// Weighted norm of a potential on [0, x_max].
///
/// `Lp` gives (int |(1+x)^eps V|^p dx)^{1/p}; infinite `x_max` is handled by
/// geometric continuation with a convergence check. `LpL1` gives the
/// appendix sequence norm over unit cells and requires finite `x_max`.
pub fn weighted_norm<T: Real>(
    spec: &PotentialSpec<T>,
    p: T,
    epsilon: T,
    norm_kind: NormKind,
    x_max: T,
) -> Result<T> {
    if p < T::one() || p > cast(2.0) {
        return Err(Error::domain(format!("p must lie in [1, 2], got {p}")));
    }
    if epsilon < T::zero() {
        return Err(Error::domain("epsilon must be nonnegative"));
    }
    match norm_kind {
        NormKind::Lp => {
            let g = |x: T| ((T::one() + x).powf(epsilon) * spec.eval(x)).abs().powf(p);
            let mass = improper_mass(&g, x_max, spec.spike_policy())?;
            Ok(mass.powf(T::one() / p))
        }
        NormKind::LpL1 => {
            if !x_max.is_finite() {
                return Err(Error::config("lp_l1 norm requires finite x_max"));
            }
            let g = |x: T| ((T::one() + x).powf(epsilon) * spec.eval(x)).abs();
            let mut total = T::zero();
            let mut n = T::zero();
            while n < x_max {
                let hi = (n + T::one()).min(x_max);
                let cell = gk_adaptive(&g, n, hi, cast(NORM_REL_TOL), SpikePolicy::Extrapolate)?;
                total = total + cell.value.powf(p);
                n = n + T::one();
            }
            Ok(total.powf(T::one() / p))
        }
    }
}

/// int_0^{x_max} g with unit cells up to 64 and geometric cells past that.
/// Infinite `x_max` keeps doubling until the cell contribution is
/// negligible; failure to decay is a numeric error.
fn improper_mass<T: Real>(
    g: &impl Fn(T) -> T,
    x_max: T,
    policy: SpikePolicy,
) -> Result<T> {
    let rel: T = cast(NORM_REL_TOL);
    let unit_hi = x_max.min(cast(64.0));
    let mut total = gk_on_unit_cells(g, T::zero(), unit_hi, rel, policy)?.value;
    if x_max <= unit_hi {
        return Ok(total);
    }
    let mut lo = unit_hi;
    let mut last = T::infinity();
    let mut stall = 0usize;
    loop {
        let hi = (lo * cast(2.0)).min(x_max);
        let cell = gk_adaptive(g, lo, hi, rel, policy)?.value;
        total = total + cell;
        if hi >= x_max {
            return Ok(total);
        }
        // infinite upper limit: demand decaying cell contributions
        if cell <= rel * total {
            return Ok(total);
        }
        if cell >= last {
            stall += 1;
            if stall >= 4 {
                return Err(Error::numeric(
                    "weighted norm does not converge as x_max grows",
                    to_f64(cell / total.max(T::epsilon())),
                ));
            }
        } else {
            stall = 0;
        }
        last = cell;
        lo = hi;
        if lo > cast(1e300) {
            return Err(Error::numeric("weighted norm tail did not stabilise", to_f64(cell)));
        }
    }
}

/// Report of the monotone-weight admissibility check.
#[derive(Clone, Debug)]
pub struct DWeightReport<T> {
    pub ok: bool,
    /// || V d^{-1} ||_p on [0, x_max]
    pub norm_vd_inv: T,
    /// || V d^N ||_1 on [0, x_max]
    pub norm_vdn: T,
    /// relative growth of each norm when x_max doubles
    pub growth_vd_inv: T,
    pub growth_vdn: T,
}

/// Check V d^{-1} in L^p (p < 2) and V d^N in L^1 on [0, x_max], with
/// stability under doubling of the range within 1%.
pub fn verify_d_weight<T: Real>(
    spec: &PotentialSpec<T>,
    d: &WeightSpec<T>,
    p: T,
    n_pow: u32,
    x_max: T,
) -> Result<DWeightReport<T>> {
    if !(p < cast(2.0)) || p < T::one() {
        return Err(Error::domain("verify_d_weight needs 1 <= p < 2"));
    }
    if n_pow < 1 {
        return Err(Error::domain("N must be at least 1"));
    }
    if !x_max.is_finite() {
        return Err(Error::domain("x_max must be finite"));
    }
    let policy = spec.spike_policy();
    let inv_mass = |hi: T| -> Result<T> {
        let g = |x: T| (spec.eval(x) / d.eval(x)).abs().powf(p);
        improper_mass_to(&g, hi, policy)
    };
    let dn_mass = |hi: T| -> Result<T> {
        let g = |x: T| (spec.eval(x) * d.eval(x).powf(cast(n_pow as f64))).abs();
        improper_mass_to(&g, hi, policy)
    };
    let (m1, m1d) = (inv_mass(x_max)?, inv_mass(x_max * cast(2.0))?);
    let (m2, m2d) = (dn_mass(x_max)?, dn_mass(x_max * cast(2.0))?);
    let norm_vd_inv = m1.powf(T::one() / p);
    let norm_vdn = m2;
    let g1 = if m1 > T::zero() { (m1d.powf(T::one() / p) - norm_vd_inv) / norm_vd_inv } else { T::zero() };
    let g2 = if m2 > T::zero() { (m2d - m2) / m2 } else { T::zero() };
    let tol = cast::<T>(0.01);
    let ok = norm_vd_inv.is_finite()
        && norm_vdn.is_finite()
        && g1.abs() <= tol
        && g2.abs() <= tol;
    Ok(DWeightReport { ok, norm_vd_inv, norm_vdn, growth_vd_inv: g1, growth_vdn: g2 })
}

/// Like `improper_mass` with a finite limit, no convergence requirement.
fn improper_mass_to<T: Real>(g: &impl Fn(T) -> T, x_max: T, policy: SpikePolicy) -> Result<T> {
    let rel: T = cast(NORM_REL_TOL);
    let unit_hi = x_max.min(cast(64.0));
    let mut total = gk_on_unit_cells(g, T::zero(), unit_hi, rel, policy)?.value;
    let mut lo = unit_hi;
    while lo < x_max {
        let hi = (lo * cast(2.0)).min(x_max);
        total = total + gk_adaptive(g, lo, hi, rel, policy)?.value;
        lo = hi;
    }
    Ok(total)
}
