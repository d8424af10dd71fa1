//! Nested interval families built by bisecting the mass of a normalising
//! function: generation m holds 2^m intervals of equal (L^p) or equalised
//! (l^p(L^1)) mass, left to right, children tiling their parent exactly.
//! The product decomposition of the ordered-pair indicator is checked
//! against this family on point grids.

use crate::error::{Error, Result};
use crate::scalar::{cast, to_f64, Real};
use crate::step_fn::{NormKind, StepFunction};

#[derive(Clone, Copy, Debug)]
pub struct Node<T> {
    /// generation
    pub m: usize,
    /// 1-based index within the generation, leftmost first
    pub l: usize,
    pub lo: T,
    pub hi: T,
    /// || f chi ||^p of the normalised f over (lo, hi]
    pub mass: T,
}

#[derive(Clone, Debug)]
pub struct DyadicTree<T: Real> {
    pub norm_kind: NormKind,
    pub p: T,
    pub depth: usize,
    pub x_max: T,
    /// levels[m-1] holds generation m (2^m nodes)
    levels: Vec<Vec<Node<T>>>,
    /// the normaliser, rescaled to unit norm
    f: StepFunction<T>,
}

const MAX_DEPTH: usize = 24;

impl<T: Real> DyadicTree<T> {
    /// Bisect [0, x_max] against f down to `depth` generations.
    pub fn build(
        f: &StepFunction<T>,
        p: T,
        depth: usize,
        norm_kind: NormKind,
        x_max: T,
    ) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::domain(format!("depth must lie in 1..={MAX_DEPTH}")));
        }
        if p < T::one() {
            return Err(Error::domain("p must be at least 1"));
        }
        let (slo, shi) = f.support();
        if slo < T::zero() || shi > x_max {
            return Err(Error::config("normaliser support must sit inside [0, x_max]"));
        }
        let total = f.mass_between(T::zero(), x_max, p, norm_kind);
        if !(total > T::zero()) {
            return Err(Error::config("zero-mass normaliser"));
        }
        let fnorm = f.scaled(T::one() / total.powf(T::one() / p));
        let mut levels: Vec<Vec<Node<T>>> = Vec::with_capacity(depth);
        let mut parents = vec![Node {
            m: 0,
            l: 1,
            lo: T::zero(),
            hi: x_max,
            mass: fnorm.mass_between(T::zero(), x_max, p, norm_kind),
        }];
        for m in 1..=depth {
            let mut level = Vec::with_capacity(1 << m);
            for parent in &parents {
                let s = split_point(&fnorm, parent.lo, parent.hi, p, norm_kind);
                let left_mass = fnorm.mass_between(parent.lo, s, p, norm_kind);
                let right_mass = fnorm.mass_between(s, parent.hi, p, norm_kind);
                level.push(Node { m, l: 2 * parent.l - 1, lo: parent.lo, hi: s, mass: left_mass });
                level.push(Node { m, l: 2 * parent.l, lo: s, hi: parent.hi, mass: right_mass });
            }
            levels.push(level.clone());
            parents = level;
        }
        Ok(DyadicTree { norm_kind, p, depth, x_max, levels, f: fnorm })
    }

    pub fn level(&self, m: usize) -> &[Node<T>] {
        &self.levels[m - 1]
    }

    pub fn normalizer(&self) -> &StepFunction<T> {
        &self.f
    }

    /// Index (1-based) of the generation-m interval containing x, with the
    /// convention that intervals are (lo, hi] and the leftmost includes 0.
    pub fn locate(&self, m: usize, x: T) -> Option<usize> {
        if x < T::zero() || x > self.x_max {
            return None;
        }
        let level = self.level(m);
        if x <= level[0].hi {
            return Some(1);
        }
        // binary search on hi
        let mut lo = 0usize;
        let mut hi = level.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if level[mid].hi < x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(level[hi].l)
    }

    /// Mass of an arbitrary dominated function over one node.
    pub fn node_mass_of(&self, node: &Node<T>, g: &StepFunction<T>) -> T {
        g.mass_between(node.lo, node.hi, self.p, self.norm_kind)
    }

    /// Nested-records dump (m, l, lo, hi, mass) for golden files.
    pub fn dump_json(&self) -> String {
        let mut s = String::from("[");
        for (mi, level) in self.levels.iter().enumerate() {
            if mi > 0 {
                s.push(',');
            }
            s.push_str("\n  [");
            for (i, n) in level.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push_str(&format!(
                    "{{\"m\":{},\"l\":{},\"lo\":{:.12e},\"hi\":{:.12e},\"mass\":{:.12e}}}",
                    n.m,
                    n.l,
                    to_f64(n.lo),
                    to_f64(n.hi),
                    to_f64(n.mass)
                ));
            }
            s.push(']');
        }
        s.push_str("\n]");
        s
    }
}

/// The split point of (lo, hi]: for L^p the leftmost point where the
/// cumulative mass reaches half the parent's; for l^p(L^1) the leftmost
/// point equalising the two children (subadditivity then keeps each child
/// at or below half).
fn split_point<T: Real>(f: &StepFunction<T>, lo: T, hi: T, p: T, kind: NormKind) -> T {
    match kind {
        NormKind::Lp => {
            let target = f.lp_mass_between(lo, hi, p) * cast::<T>(0.5);
            let mut acc = T::zero();
            let xs = f.breakpoints();
            let vs = f.values();
            // walk the pieces of [lo, hi] cut by f's cells
            let mut cursor = lo;
            for i in 0..vs.len() {
                let a = xs[i].max(lo);
                let b = xs[i + 1].min(hi);
                if !(b > a) {
                    continue;
                }
                if a > cursor {
                    // gap with f = 0: mass is flat; if the target is already
                    // met the leftmost admissible point is the gap start
                    if acc >= target {
                        return cursor;
                    }
                }
                let rate = vs[i].abs().powf(p);
                let piece = rate * (b - a);
                if acc + piece >= target && rate > T::zero() {
                    return a + (target - acc) / rate;
                }
                acc = acc + piece;
                cursor = b;
            }
            if acc >= target {
                cursor
            } else {
                hi
            }
        }
        NormKind::LpL1 => {
            // g(s) = left(s) - right(s) is nondecreasing, flat only where f
            // vanishes; bisection with the predicate g >= 0 lands on the
            // left edge of any zero plateau
            let g = |s: T| {
                f.lp_l1_mass_between(lo, s, p) - f.lp_l1_mass_between(s, hi, p)
            };
            let mut a = lo;
            let mut b = hi;
            for _ in 0..110 {
                let mid = (a + b) * cast::<T>(0.5);
                if g(mid) >= T::zero() {
                    b = mid;
                } else {
                    a = mid;
                }
                if (b - a) <= (hi - lo) * T::epsilon() * cast(2.0) {
                    break;
                }
            }
            b
        }
    }
}

/// Result of the product-decomposition identity check on a point grid.
#[derive(Clone, Debug)]
pub struct IdentityCheck<T> {
    pub max_abs_error: T,
    /// pairs skipped because their separating mass is below resolution
    pub excluded: usize,
    pub checked: usize,
}

/// Evaluate both sides of the ordered-pair product decomposition on all
/// pairs from `grid` x `grid`: the indicator of x2 > x1 times f(x1) f(x2)
/// against the sum over generations of chi_{E(m,l)}(x1) chi_{E(m,l+1)}(x2),
/// l odd, truncated at the tree depth. Pairs whose separating mass is
/// below 2^{-depth} are excluded and counted.
pub fn decomposition_identity_check<T: Real>(
    tree: &DyadicTree<T>,
    f: &StepFunction<T>,
    grid: &[T],
) -> Result<IdentityCheck<T>> {
    // the tree must have been built from this normaliser
    let total = f
        .mass_between(T::zero(), tree.x_max, tree.p, tree.norm_kind)
        .powf(T::one() / tree.p);
    if !(total > T::zero()) {
        return Err(Error::domain("zero-mass function"));
    }
    for &x in grid {
        let a = f.eval(x) / total;
        let b = tree.f.eval(x);
        if (a - b).abs() > cast::<T>(1e-10) * (a.abs() + b.abs() + T::one()) {
            return Err(Error::domain("function does not match the tree normaliser"));
        }
    }
    let fnorm = &tree.f;
    let threshold = cast::<T>((0.5f64).powi(tree.depth as i32));
    let mut out = IdentityCheck { max_abs_error: T::zero(), excluded: 0, checked: 0 };
    for &x1 in grid {
        for &x2 in grid {
            let lhs = if x2 - x1 > T::zero() { fnorm.eval(x1) * fnorm.eval(x2) } else { T::zero() };
            let mut rhs = T::zero();
            for m in 1..=tree.depth {
                let l1 = match tree.locate(m, x1) {
                    Some(l) => l,
                    None => continue,
                };
                if l1 % 2 == 1 {
                    if let Some(l2) = tree.locate(m, x2) {
                        if l2 == l1 + 1 {
                            rhs = rhs + fnorm.eval(x1) * fnorm.eval(x2);
                        }
                    }
                }
            }
            // resolution: the mass strictly between the pair
            if x2 > x1 && lhs != T::zero() {
                let sep = fnorm.mass_between(x1, x2, tree.p, tree.norm_kind);
                if sep <= threshold {
                    out.excluded += 1;
                    continue;
                }
            }
            out.checked += 1;
            out.max_abs_error = out.max_abs_error.max((lhs - rhs).abs());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indicator01() -> StepFunction<f64> {
        StepFunction::new(vec![0.0, 1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn symmetric_split_of_unit_indicator() {
        let f = indicator01();
        let tree = DyadicTree::build(&f, 1.0, 2, NormKind::Lp, 1.0).unwrap();
        let l1 = tree.level(1);
        assert_eq!(l1.len(), 2);
        assert!((l1[0].hi - 0.5).abs() < 1e-14);
        let l2 = tree.level(2);
        for (i, n) in l2.iter().enumerate() {
            assert!((n.lo - 0.25 * i as f64).abs() < 1e-14);
            assert!((n.hi - 0.25 * (i + 1) as f64).abs() < 1e-14);
            assert!((n.mass - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn p2_split_also_halves_indicator() {
        let f = indicator01();
        let tree = DyadicTree::build(&f, 2.0, 1, NormKind::Lp, 1.0).unwrap();
        assert!((tree.level(1)[0].hi - 0.5).abs() < 1e-14);
    }

    #[test]
    fn gap_split_takes_leftmost_point() {
        // f = 2 on [0,1], 1 on [2,4]: total mass 4, the half point is the
        // whole plateau [1,2]; leftmost admissible is x = 1
        let f = StepFunction::new(vec![0.0f64, 1.0, 2.0, 4.0], vec![2.0, 0.0, 1.0]).unwrap();
        let tree = DyadicTree::build(&f, 1.0, 1, NormKind::Lp, 4.0).unwrap();
        let l1 = tree.level(1);
        assert!((l1[0].hi - 1.0).abs() < 1e-14, "split at {}", l1[0].hi);
        assert!((l1[0].mass - 0.5).abs() < 1e-14);
        assert!((l1[1].mass - 0.5).abs() < 1e-14);
    }

    #[test]
    fn partition_nesting_ordering() {
        let f = StepFunction::<f64>::seeded_positive(0.0, 16, 11);
        let tree = DyadicTree::build(&f, 1.5, 6, NormKind::Lp, 16.0).unwrap();
        for m in 1..=6 {
            let level = tree.level(m);
            assert_eq!(level.len(), 1 << m);
            // partition and ordering
            assert_eq!(level[0].lo, 0.0);
            assert_eq!(level.last().unwrap().hi, 16.0);
            for w in level.windows(2) {
                assert_eq!(w[0].hi, w[1].lo);
                assert!(w[0].l + 1 == w[1].l);
            }
            // nesting: children tile the parent exactly
            if m > 1 {
                let parents = tree.level(m - 1);
                for (pi, parent) in parents.iter().enumerate() {
                    assert_eq!(level[2 * pi].lo, parent.lo);
                    assert_eq!(level[2 * pi].hi, level[2 * pi + 1].lo);
                    assert_eq!(level[2 * pi + 1].hi, parent.hi);
                }
            }
            // mass bound
            let bound = 0.5f64.powi(m as i32) + 1e-12;
            for n in level {
                assert!(n.mass <= bound, "m={m} l={} mass={}", n.l, n.mass);
            }
        }
    }

    #[test]
    fn mass_bound_for_dominated_functions() {
        // any f_i dominated by the normaliser inherits the bound
        let f = StepFunction::<f64>::seeded_positive(0.0, 32, 5);
        let tree = DyadicTree::build(&f, 2.0, 7, NormKind::Lp, 32.0).unwrap();
        // mask: zero out every third cell of the normalised f
        let fn_vals = tree.normalizer().values().to_vec();
        let masked: Vec<f64> = fn_vals
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % 3 == 0 { 0.0 } else { v })
            .collect();
        let g = StepFunction::on_unit_cells(0.0, masked).unwrap();
        for m in 1..=7 {
            let bound = 0.5f64.powi(m as i32) + 1e-12;
            for n in tree.level(m) {
                assert!(tree.node_mass_of(n, &g) <= bound);
            }
        }
    }

    #[test]
    fn lp_l1_subadditivity_on_cut_cells() {
        let f = StepFunction::<f64>::seeded_positive(0.0, 9, 3);
        let tree = DyadicTree::build(&f, 1.7, 4, NormKind::LpL1, 9.0).unwrap();
        let whole = tree.normalizer().lp_l1_mass_between(0.0, 9.0, 1.7);
        let l1 = tree.level(1);
        assert!(l1[0].mass + l1[1].mass <= whole + 1e-12);
        for m in 1..=4 {
            let bound = 0.5f64.powi(m as i32) + 1e-12;
            for n in tree.level(m) {
                assert!(n.mass <= bound, "m={m} mass {}", n.mass);
            }
        }
    }

    #[test]
    fn rectangles_pairwise_disjoint() {
        // the covering rectangles E(m,l) x E(m,l+1), l odd, never overlap
        let f = StepFunction::<f64>::seeded_positive(0.0, 12, 8);
        let tree = DyadicTree::build(&f, 1.0, 8, NormKind::Lp, 12.0).unwrap();
        let mut rects = Vec::new();
        for m in 1..=8 {
            for n in tree.level(m) {
                if n.l % 2 == 1 {
                    let right = &tree.level(m)[n.l]; // index l is l+1 (0-based l-1+1)
                    rects.push(((n.lo, n.hi), (right.lo, right.hi)));
                }
            }
        }
        let overlap = |a: (f64, f64), b: (f64, f64)| -> bool {
            a.0.max(b.0) < a.1.min(b.1)
        };
        for i in 0..rects.len() {
            for j in (i + 1)..rects.len() {
                let clash = overlap(rects[i].0, rects[j].0) && overlap(rects[i].1, rects[j].1);
                assert!(!clash, "rectangles {i} and {j} overlap: {:?} {:?}", rects[i], rects[j]);
            }
        }
    }

    #[test]
    fn identity_exact_on_step_function() {
        let f = StepFunction::<f64>::seeded_positive(0.0, 4, 21);
        let tree = DyadicTree::build(&f, 1.0, 3, NormKind::Lp, 4.0).unwrap();
        let grid: Vec<f64> = (0..40).map(|i| 0.1 * i as f64 + 0.05).collect();
        let chk = decomposition_identity_check(&tree, &f, &grid).unwrap();
        assert_eq!(chk.max_abs_error, 0.0);
        assert!(chk.checked > 0);
    }

    #[test]
    fn identity_diagonal_and_reversed_pairs_vanish() {
        let f = indicator01();
        let tree = DyadicTree::build(&f, 1.0, 3, NormKind::Lp, 1.0).unwrap();
        // evaluate by hand: equal points and reversed pairs give 0 on both
        // sides
        let grid = vec![0.3, 0.3, 0.7, 0.2];
        let chk = decomposition_identity_check(&tree, &f, &grid).unwrap();
        assert_eq!(chk.max_abs_error, 0.0);
    }

    #[test]
    fn mismatched_function_rejected() {
        let f = indicator01();
        let tree = DyadicTree::build(&f, 1.0, 2, NormKind::Lp, 1.0).unwrap();
        let other = StepFunction::new(vec![0.0, 1.0], vec![2.0]).unwrap();
        // a scaled copy still matches after normalisation
        assert!(decomposition_identity_check(&tree, &other, &[0.2, 0.8]).is_ok());
        let skew = StepFunction::new(vec![0.0, 0.5, 1.0], vec![2.0, 1.0]).unwrap();
        assert!(decomposition_identity_check(&tree, &skew, &[0.2, 0.8]).is_err());
    }

    #[test]
    fn zero_mass_rejected() {
        let f = StepFunction::new(vec![0.0, 1.0], vec![0.0]).unwrap();
        assert!(matches!(
            DyadicTree::build(&f, 1.0, 2, NormKind::Lp, 1.0),
            Err(Error::Config(_))
        ));
    }
}
