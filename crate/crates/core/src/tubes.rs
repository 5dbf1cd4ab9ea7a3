//! Exact tube geometry over a pruned slope set: intersection tests and
//! volumes, slab unions, the set of roots that can carry a tube through a
//! point, and the reference trees with their edge labels.
//!
//! A tube `P_{t,ω}` is the prism `{(r, y + rω) : y ∈ Q̃_t, 0 ≤ r ≤ 10A_0}`
//! where `Q̃_t` is the cube of side `c_d M^{-J}` centred at the centre of the
//! root cube `t`. Its cross-section at height `x_1` is `Q̃_t + x_1ω`.

use std::collections::HashMap;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::madic_tree::{Cube, Grid};
use crate::percolation::{half, ResistorNetwork};
use crate::pruning::{PrunedSlopeTree, BINARY};
use crate::scalar::{fmt_rational, ratio_to_f64};
use crate::sticky::{reference_cubes, BitSource, StickyMap};

/// Dilation constant `c_d = min(d^{-2d}, 1/(4√d))`; the minimum is `1/4` for
/// `d = 1` and `d^{-2d}` otherwise, so it is always rational.
pub fn dilation(d: u32) -> BigRational {
    if d == 1 {
        BigRational::new(BigInt::one(), BigInt::from(4))
    } else {
        BigRational::new(BigInt::one(), BigInt::from(d).pow(2 * d))
    }
}

/// A tube: root cube and index of its slope in `Ω_N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tube {
    pub root: Cube,
    pub slope: usize,
}

/// A slab `lo ≤ x_1 ≤ hi`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlabWindow {
    pub lo: BigRational,
    pub hi: BigRational,
}

impl SlabWindow {
    pub fn new(lo: BigRational, hi: BigRational) -> Result<Self> {
        if lo > hi {
            return Err(Error::validation("slab window with lo > hi"));
        }
        Ok(SlabWindow { lo, hi })
    }

    pub fn ints(lo: i64, hi: i64) -> Result<Self> {
        Self::new(
            BigRational::from_integer(lo.into()),
            BigRational::from_integer(hi.into()),
        )
    }

    /// `[M^{-R}, M^{-R+1}]`
    pub fn scale(m: u32, r: u32) -> Self {
        let lo = BigRational::new(BigInt::one(), BigInt::from(m).pow(r));
        let hi = &lo * BigInt::from(m);
        SlabWindow { lo, hi }
    }
}

/// Tubes over one pruned instance.
#[derive(Clone, Debug)]
pub struct TubeGeometry<'a> {
    pub pruned: &'a PrunedSlopeTree,
    pub a0: u32,
    /// cross-section side `c_d M^{-J}`
    pub side: BigRational,
    /// tube length `10A_0`
    pub length: BigRational,
}

fn norm2(v: &[BigRational]) -> BigRational {
    v.iter().map(|x| x * x).sum()
}

/// Polynomial coefficients, constant term first.
fn poly_mul(a: &[BigRational], b: &[BigRational]) -> Vec<BigRational> {
    let mut out = vec![BigRational::zero(); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_integral(c: &[BigRational], p: &BigRational, q: &BigRational) -> BigRational {
    let mut acc = BigRational::zero();
    let (mut pp, mut qq) = (p.clone(), q.clone());
    for (k, ck) in c.iter().enumerate() {
        acc += ck * (&qq - &pp) / BigRational::from_integer(BigInt::from(k + 1));
        pp *= p;
        qq *= q;
    }
    acc
}

/// Outcome of one rasterized pair-volume estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub estimate: f64,
    /// bound on `|estimate − exact|`
    pub error_bound: f64,
}

/// Union measure over a slab: quadrature estimate and the Cauchy–Schwarz
/// lower bound `(Σ|P_i|)² / Σ_{i,j}|P_i ∩ P_j|`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnionVolume {
    pub estimate: f64,
    pub lower_bound: BigRational,
}

impl<'a> TubeGeometry<'a> {
    pub fn new(pruned: &'a PrunedSlopeTree, a0: u32) -> Result<Self> {
        if a0 == 0 {
            return Err(Error::validation("A0 must be positive"));
        }
        let side = dilation(pruned.grid.d) * pruned.grid.side(pruned.j);
        let length = BigRational::from_integer(BigInt::from(10 * a0));
        Ok(TubeGeometry {
            pruned,
            a0,
            side,
            length,
        })
    }

    pub fn grid(&self) -> Grid {
        self.pruned.grid
    }

    pub fn d(&self) -> usize {
        self.pruned.grid.d as usize
    }

    /// Every root cube of height `J`, in address order.
    pub fn root_cubes(&self) -> Vec<Cube> {
        let j = self.pruned.j;
        (0..self.grid().bpow(j)).map(|a| Cube { h: j, a }).collect()
    }

    /// The tube family `{P_{t,σ(t)}}` of a slope assignment.
    pub fn family<B: BitSource>(&self, map: &StickyMap<'_, B>) -> Vec<Tube> {
        self.root_cubes()
            .into_iter()
            .map(|t| Tube {
                root: t,
                slope: map.slope_index(t),
            })
            .collect()
    }

    fn check(&self, t: &Tube) -> Result<()> {
        if t.root.h != self.pruned.j
            || t.slope >= self.pruned.len()
            || t.root.a >= self.grid().bpow(t.root.h)
        {
            return Err(Error::validation("tube does not belong to this instance"));
        }
        Ok(())
    }

    fn clip(&self, w: &SlabWindow) -> Option<(BigRational, BigRational)> {
        let lo = w.lo.clone().max(BigRational::zero());
        let hi = w.hi.clone().min(self.length.clone());
        (lo <= hi).then_some((lo, hi))
    }

    /// Centre of the cross-section of `t` at height `x1`.
    pub fn center_at(&self, t: &Tube, x1: &BigRational) -> Vec<BigRational> {
        let c = self.grid().center(t.root);
        c.iter()
            .zip(&self.pruned.slopes[t.slope])
            .map(|(ci, vi)| ci + x1 * vi)
            .collect()
    }

    /// Closed membership `x ∈ P_{t,ω}`; `x = (x_1, x')`.
    pub fn contains(&self, t: &Tube, x: &[BigRational]) -> bool {
        if x[0].is_negative() || x[0] > self.length {
            return false;
        }
        let half_side = &self.side / BigInt::from(2);
        let c = self.center_at(t, &x[0]);
        c.iter()
            .zip(&x[1..])
            .all(|(ci, xi)| (xi - ci).abs() <= half_side)
    }

    fn offsets(&self, a: &Tube, b: &Tube) -> (Vec<BigRational>, Vec<BigRational>) {
        let (ca, cb) = (self.grid().center(a.root), self.grid().center(b.root));
        let dc = cb.iter().zip(&ca).map(|(x, y)| x - y).collect();
        let (va, vb) = (&self.pruned.slopes[a.slope], &self.pruned.slopes[b.slope]);
        let dv = vb.iter().zip(va).map(|(x, y)| x - y).collect();
        (dc, dv)
    }

    /// The open set of heights in the window where the cross-sections
    /// overlap with positive measure, as an interval; `None` when empty.
    pub fn overlap_interval(
        &self,
        a: &Tube,
        b: &Tube,
        w: &SlabWindow,
    ) -> Result<Option<(BigRational, BigRational)>> {
        self.check(a)?;
        self.check(b)?;
        let Some((mut lo, mut hi)) = self.clip(w) else {
            return Ok(None);
        };
        let (dc, dv) = self.offsets(a, b);
        let mut open_lo = false;
        let mut open_hi = false;
        for (c, v) in dc.iter().zip(&dv) {
            if v.is_zero() {
                if c.abs() >= self.side {
                    return Ok(None);
                }
                continue;
            }
            // |c + x v| < s
            let r1 = (-&self.side - c) / v;
            let r2 = (&self.side - c) / v;
            let (l, h) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            if l >= lo {
                lo = l;
                open_lo = true;
            }
            if h <= hi {
                hi = h;
                open_hi = true;
            }
        }
        let nonempty = if open_lo || open_hi {
            lo < hi
        } else {
            lo <= hi
        };
        Ok(nonempty.then_some((lo, hi)))
    }

    /// Whether the two tubes overlap in the slab.
    pub fn intersects(&self, a: &Tube, b: &Tube, w: &SlabWindow) -> Result<bool> {
        Ok(self.overlap_interval(a, b, w)?.is_some())
    }

    /// `|cen(t') − cen(t) + x_1(v' − v)| ≤ 2c_d√d M^{-J}`, squared.
    pub fn center_inequality(&self, a: &Tube, b: &Tube, x1: &BigRational) -> bool {
        let (dc, dv) = self.offsets(a, b);
        let diff: Vec<BigRational> = dc.iter().zip(&dv).map(|(c, v)| c + x1 * v).collect();
        let d = BigRational::from_integer(BigInt::from(self.d()));
        norm2(&diff) <= &self.side * &self.side * d * BigInt::from(4)
    }

    /// `x_1|v − v'| ≥ M^{-J}/2`, squared.
    pub fn slope_gap_inequality(&self, a: &Tube, b: &Tube, x1: &BigRational) -> bool {
        let (_, dv) = self.offsets(a, b);
        let unit = self.grid().side(self.pruned.j);
        x1 * x1 * norm2(&dv) * BigInt::from(4) >= &unit * &unit
    }

    /// Exact `|P_a ∩ P_b ∩ slab|` by piecewise polynomial integration in `x_1`.
    pub fn pair_intersection_volume(
        &self,
        a: &Tube,
        b: &Tube,
        w: &SlabWindow,
    ) -> Result<BigRational> {
        let Some((lo, hi)) = self.overlap_interval(a, b, w)? else {
            return Ok(BigRational::zero());
        };
        let (dc, dv) = self.offsets(a, b);
        let s = &self.side;
        let mut cuts = vec![lo.clone(), hi.clone()];
        for (c, v) in dc.iter().zip(&dv) {
            if !v.is_zero() {
                for k in [-s.clone(), BigRational::zero(), s.clone()] {
                    let r = (k - c) / v;
                    if r > lo && r < hi {
                        cuts.push(r);
                    }
                }
            }
        }
        cuts.sort();
        cuts.dedup();
        let two = BigRational::from_integer(BigInt::from(2));
        let mut total = BigRational::zero();
        for win in cuts.windows(2) {
            let (p, q) = (&win[0], &win[1]);
            let mid = (p + q) / &two;
            let mut poly = vec![BigRational::one()];
            for (c, v) in dc.iter().zip(&dv) {
                // overlap length s − |c + x v| on this piece
                let at = c + &mid * v;
                let sign = if at.is_negative() {
                    -BigRational::one()
                } else {
                    BigRational::one()
                };
                poly = poly_mul(&poly, &[s - &sign * c, -(&sign * v)]);
            }
            total += poly_integral(&poly, p, q);
        }
        Ok(total)
    }

    /// `|P_t ∩ slab|`.
    pub fn tube_volume(&self, w: &SlabWindow) -> BigRational {
        match self.clip(w) {
            Some((lo, hi)) => num_traits::pow(self.side.clone(), self.d()) * (hi - lo),
            None => BigRational::zero(),
        }
    }

    /// Grid-sampling estimate of `|P_a ∩ P_b ∩ slab|` over the bounding box
    /// of the intersection with `cells` cells per axis; every cell whose
    /// closure meets the boundary may be misclassified, which bounds the error.
    pub fn rasterized_pair_volume(
        &self,
        a: &Tube,
        b: &Tube,
        w: &SlabWindow,
        cells: usize,
    ) -> Result<Raster> {
        let Some((lo, hi)) = self.overlap_interval(a, b, w)? else {
            return Ok(Raster {
                estimate: 0.0,
                error_bound: 0.0,
            });
        };
        let d = self.d();
        let f = |x: &BigRational| ratio_to_f64(x);
        let s = f(&self.side);
        let (l1, h1) = (f(&lo), f(&hi));
        let ca: Vec<f64> = self.grid().center(a.root).iter().map(f).collect();
        let cb: Vec<f64> = self.grid().center(b.root).iter().map(f).collect();
        let va: Vec<f64> = self.pruned.slopes[a.slope].iter().map(f).collect();
        let vb: Vec<f64> = self.pruned.slopes[b.slope].iter().map(f).collect();
        let mut boxes = vec![(l1, h1)];
        for i in 0..d {
            let ra = (ca[i] + l1.min(h1) * va[i]).min(ca[i] + h1 * va[i]) - s / 2.0;
            let rb = (cb[i] + l1 * vb[i]).min(cb[i] + h1 * vb[i]) - s / 2.0;
            let sa = (ca[i] + l1 * va[i]).max(ca[i] + h1 * va[i]) + s / 2.0;
            let sb = (cb[i] + l1 * vb[i]).max(cb[i] + h1 * vb[i]) + s / 2.0;
            boxes.push((ra.max(rb), sa.min(sb)));
        }
        if boxes.iter().any(|(l, h)| h <= l) {
            return Ok(Raster {
                estimate: 0.0,
                error_bound: 0.0,
            });
        }
        let widths: Vec<f64> = boxes.iter().map(|(l, h)| (h - l) / cells as f64).collect();
        let cell_vol: f64 = widths.iter().product();
        let total_cells = cells.pow(d as u32 + 1);
        let inside = |x: &[f64]| -> bool {
            (0..d).all(|i| {
                (x[i + 1] - ca[i] - x[0] * va[i]).abs() <= s / 2.0
                    && (x[i + 1] - cb[i] - x[0] * vb[i]).abs() <= s / 2.0
            })
        };
        let hits: usize = (0..total_cells)
            .into_par_iter()
            .filter(|&idx| {
                let mut x = vec![0.0; d + 1];
                let mut r = idx;
                for (k, xk) in x.iter_mut().enumerate() {
                    *xk = boxes[k].0 + ((r % cells) as f64 + 0.5) * widths[k];
                    r /= cells;
                }
                inside(&x)
            })
            .count();
        // the region is convex: a line parallel to an axis crosses its boundary
        // at most twice, so at most 2·(d+1)·cells^d boundary cells
        let boundary = 2 * (d + 1) * cells.pow(d as u32);
        Ok(Raster {
            estimate: hits as f64 * cell_vol,
            error_bound: boundary as f64 * cell_vol,
        })
    }

    /// Exact measure of the union of the cross-sections at height `x1`.
    pub fn slice_union_exact(&self, tubes: &[Tube], x1: &BigRational) -> BigRational {
        let half_side = &self.side / BigInt::from(2);
        let boxes: Vec<Vec<(BigRational, BigRational)>> = tubes
            .iter()
            .map(|t| {
                self.center_at(t, x1)
                    .into_iter()
                    .map(|c| (&c - &half_side, &c + &half_side))
                    .collect()
            })
            .collect();
        union_measure(&boxes)
    }

    /// Midpoint quadrature with `slices` slices of exact slice unions, and
    /// the Cauchy–Schwarz lower bound from exact pairwise volumes.
    pub fn union_volume(
        &self,
        tubes: &[Tube],
        w: &SlabWindow,
        slices: usize,
    ) -> Result<UnionVolume> {
        if tubes.is_empty() {
            return Err(Error::validation("empty tube list"));
        }
        if slices == 0 {
            return Err(Error::validation("need at least one slice"));
        }
        for t in tubes {
            self.check(t)?;
        }
        let Some((lo, hi)) = self.clip(w) else {
            return Ok(UnionVolume {
                estimate: 0.0,
                lower_bound: BigRational::zero(),
            });
        };
        let width = (&hi - &lo) / BigInt::from(slices);
        let estimate: BigRational = (0..slices)
            .into_par_iter()
            .map(|k| {
                let x1 = &lo
                    + &width
                        * (BigRational::from_integer(BigInt::from(2 * k + 1)) / BigInt::from(2));
                self.slice_union_exact(tubes, &x1) * &width
            })
            .reduce(BigRational::zero, |a, b| a + b);
        let single = self.tube_volume(w);
        let total = &single * BigInt::from(tubes.len());
        let pairs: BigRational = self.pair_sum_exact(tubes, w)?;
        let denom = &total + &pairs;
        let lower_bound = if denom.is_zero() {
            BigRational::zero()
        } else {
            &total * &total / denom
        };
        Ok(UnionVolume {
            estimate: ratio_to_f64(&estimate),
            lower_bound,
        })
    }

    /// `Σ_{i≠j} |P_i ∩ P_j ∩ slab|` over ordered pairs, exactly.
    pub fn pair_sum_exact(&self, tubes: &[Tube], w: &SlabWindow) -> Result<BigRational> {
        let n = tubes.len();
        let parts: Vec<Result<BigRational>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = BigRational::zero();
                for j in i + 1..n {
                    acc += self.pair_intersection_volume(&tubes[i], &tubes[j], w)?;
                }
                Ok(acc)
            })
            .collect();
        let mut acc = BigRational::zero();
        for p in parts {
            acc += p?;
        }
        Ok(acc * BigInt::from(2))
    }

    fn check_point(&self, x: &[BigRational]) -> Result<()> {
        if x.len() != self.d() + 1 {
            return Err(Error::validation("point must have d+1 coordinates"));
        }
        let a0 = BigRational::from_integer(BigInt::from(self.a0));
        if x[0] < a0 || x[0] > self.length {
            return Err(Error::validation("x_1 must lie in [A0, 10 A0]"));
        }
        Ok(())
    }

    /// `Poss(x) = {t : t ∩ (x − x_1Ω_N) ≠ ∅}` with the slope `v(t)`, sorted by root.
    pub fn poss(&self, x: &[BigRational]) -> Result<Vec<(Cube, usize)>> {
        self.check_point(x)?;
        let g = self.grid();
        let mut out: Vec<(Cube, usize)> = Vec::new();
        for (i, v) in self.pruned.slopes.iter().enumerate() {
            let y: Vec<BigRational> = x[1..]
                .iter()
                .zip(v)
                .map(|(xi, vi)| xi - &x[0] * vi)
                .collect();
            if y.iter()
                .all(|c| !c.is_negative() && c < &BigRational::one())
            {
                out.push((g.cube_of_point(&y, self.pruned.j)?, i));
            }
        }
        out.sort();
        for w in out.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::validation(
                    "a root cube carries two slopes through x: C0 too small for A0",
                ));
            }
        }
        Ok(out)
    }

    /// Roots `t` with `x ∈ t_c + [0,10A_0]v` for some slope `v`, where `t_c`
    /// is the closed cube of side `c·M^{-J}` centred at `cen(t)`. With
    /// `c = c_d` these are the tubes themselves.
    pub fn poss_by_tubes(&self, x: &[BigRational], c: &BigRational) -> Result<Vec<(Cube, usize)>> {
        self.check_point(x)?;
        let g = self.grid();
        let half_side = c * g.side(self.pruned.j) / BigInt::from(2);
        let mut out = Vec::new();
        for (i, v) in self.pruned.slopes.iter().enumerate() {
            let y: Vec<BigRational> = x[1..]
                .iter()
                .zip(v)
                .map(|(xi, vi)| xi - &x[0] * vi)
                .collect();
            // candidate root cubes: those whose centre is within half_side per axis
            let unit = g.side(self.pruned.j);
            let mut ranges = Vec::new();
            for yi in &y {
                let lo = ((yi - &half_side) / &unit - BigRational::new(1.into(), 2.into()))
                    .ceil()
                    .to_integer();
                let hi = ((yi + &half_side) / &unit - BigRational::new(1.into(), 2.into()))
                    .floor()
                    .to_integer();
                let max = BigInt::from(g.m).pow(self.pruned.j) - 1;
                let lo = lo.max(BigInt::zero());
                let hi = hi.min(max);
                if lo > hi {
                    ranges.clear();
                    break;
                }
                ranges.push((lo.to_u128().unwrap(), hi.to_u128().unwrap()));
            }
            if ranges.len() != y.len() {
                continue;
            }
            let mut idx: Vec<u128> = ranges.iter().map(|r| r.0).collect();
            loop {
                out.push((g.from_coords(self.pruned.j, &idx), i));
                let mut k = 0;
                while k < idx.len() {
                    if idx[k] < ranges[k].1 {
                        idx[k] += 1;
                        break;
                    }
                    idx[k] = ranges[k].0;
                    k += 1;
                }
                if k == idx.len() {
                    break;
                }
            }
        }
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Reference tree `N_x` with images `M_x` and edge labels `κ`.
    pub fn reference_tree(&self, x: &[BigRational]) -> Result<ReferenceTree> {
        let poss = self.poss(x)?;
        ReferenceTree::build(self.pruned, x.to_vec(), poss)
    }

    /// A root whose ray in `N_x` is reproduced by `σ` when `x ∈ K(σ)`.
    pub fn inclusion_check<B: BitSource>(
        &self,
        x: &[BigRational],
        map: &StickyMap<'_, B>,
    ) -> Result<Option<Cube>> {
        for (t, v) in self.poss(x)? {
            let tube = Tube { root: t, slope: v };
            if map.slope_index(t) == v && self.contains(&tube, x) {
                return Ok(Some(t));
            }
        }
        Ok(None)
    }

    /// `x ∈ K(σ)` by scanning every tube.
    pub fn in_union_bruteforce(&self, tubes: &[Tube], x: &[BigRational]) -> bool {
        tubes.iter().any(|t| self.contains(t, x))
    }

    /// `|P ∩ P'|·(M^{-J} + |v − v'|)/M^{-J(d+1)}` for an intersecting pair.
    pub fn intersection_size_ratio(&self, a: &Tube, b: &Tube, w: &SlabWindow) -> Result<f64> {
        let vol = ratio_to_f64(&self.pair_intersection_volume(a, b, w)?);
        let (_, dv) = self.offsets(a, b);
        let gap = ratio_to_f64(&norm2(&dv)).sqrt();
        let unit = ratio_to_f64(&self.grid().side(self.pruned.j));
        Ok(vol * (unit + gap) / unit.powi(self.d() as i32 + 1))
    }
}

/// Lebesgue measure of a union of axis-parallel boxes (sweep over the first
/// axis, recursion on the rest).
pub fn union_measure(boxes: &[Vec<(BigRational, BigRational)>]) -> BigRational {
    if boxes.is_empty() {
        return BigRational::zero();
    }
    let d = boxes[0].len();
    if d == 1 {
        let mut iv: Vec<&(BigRational, BigRational)> = boxes.iter().map(|b| &b[0]).collect();
        iv.sort();
        let mut total = BigRational::zero();
        let mut cur: Option<(BigRational, BigRational)> = None;
        for (l, h) in iv {
            match &mut cur {
                Some((_, ch)) if l <= ch => {
                    if h > ch {
                        *ch = h.clone();
                    }
                }
                _ => {
                    if let Some((cl, ch)) = cur.take() {
                        total += ch - cl;
                    }
                    cur = Some((l.clone(), h.clone()));
                }
            }
        }
        if let Some((cl, ch)) = cur {
            total += ch - cl;
        }
        return total;
    }
    let mut xs: Vec<BigRational> = boxes
        .iter()
        .flat_map(|b| [b[0].0.clone(), b[0].1.clone()])
        .collect();
    xs.sort();
    xs.dedup();
    let mut total = BigRational::zero();
    for w in xs.windows(2) {
        let active: Vec<Vec<(BigRational, BigRational)>> = boxes
            .iter()
            .filter(|b| b[0].0 <= w[0] && b[0].1 >= w[1])
            .map(|b| b[1..].to_vec())
            .collect();
        if !active.is_empty() {
            total += (&w[1] - &w[0]) * union_measure(&active);
        }
    }
    total
}

/// One vertex of the reference tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefNode {
    pub level: u32,
    pub parent: Option<usize>,
    /// reference cube `Q*_j` (the root hyperplane for level 0)
    pub cube: Cube,
    /// `Ψ^{-1}(Θ_j)` as a binary string of length `j`
    pub label: Cube,
    /// `κ` of the edge into this vertex
    pub kappa: Option<u8>,
}

/// `N_x` with its images in the basic slope tree.
#[derive(Clone, Debug)]
pub struct ReferenceTree {
    pub x: Vec<BigRational>,
    pub poss: Vec<(Cube, usize)>,
    pub nodes: Vec<RefNode>,
    pub children: Vec<Vec<usize>>,
    /// node at level `N` reached by each entry of `poss`
    pub leaf_of: Vec<usize>,
}

impl ReferenceTree {
    /// Builds `N_x` and checks the weak stickiness `h(D(t,t')) < λ(D(v(t),v(t')))`,
    /// consistency of `Φ_j`/`Θ_j` across representations, and that distinct
    /// edges end in distinct reference cubes.
    pub fn build(
        p: &PrunedSlopeTree,
        x: Vec<BigRational>,
        poss: Vec<(Cube, usize)>,
    ) -> Result<Self> {
        let g = p.grid;
        for (i, &(t, v)) in poss.iter().enumerate() {
            for &(t2, v2) in &poss[i + 1..] {
                let u = g.dca(t, t2);
                let w = g.dca(p.leaves[v], p.leaves[v2]);
                let lambda = p
                    .split_vertex(w)
                    .ok_or_else(|| {
                        Error::validation("common ancestor of two slopes is not a splitting vertex")
                    })?
                    .lambda;
                if u.h >= lambda {
                    return Err(Error::validation(format!(
                        "weak stickiness fails: h(u) = {} >= λ(w) = {lambda}",
                        u.h
                    )));
                }
                for j in 1..=p.n {
                    let (e1, e2) = (p.eta(v, j), p.eta(v2, j));
                    if e1 <= u.h
                        && (e2 > u.h
                            || BINARY.ancestor(p.slope_bits(v), j)
                                != BINARY.ancestor(p.slope_bits(v2), j))
                    {
                        return Err(Error::validation("reference tuples are inconsistent"));
                    }
                }
            }
        }
        let mut nodes = vec![RefNode {
            level: 0,
            parent: None,
            cube: Cube::ROOT,
            label: Cube::ROOT,
            kappa: None,
        }];
        let mut children = vec![Vec::new()];
        let mut index: HashMap<Vec<Cube>, usize> = HashMap::new();
        let mut by_cube: HashMap<(u32, Cube), usize> = HashMap::new();
        let mut leaf_of = Vec::with_capacity(poss.len());
        for &(t, v) in &poss {
            let refs = reference_cubes(p, t, v);
            let bits = p.slope_bits(v);
            let mut parent = 0;
            for j in 1..=p.n as usize {
                let key: Vec<Cube> = refs[..j].iter().map(|r| r.0).collect();
                let label = BINARY.ancestor(bits, j as u32);
                let kappa = refs[j - 1].1;
                let id = match index.get(&key) {
                    Some(&id) => {
                        if nodes[id].label != label || nodes[id].kappa != Some(kappa) {
                            return Err(Error::validation("edge label is not well defined"));
                        }
                        id
                    }
                    None => {
                        let id = nodes.len();
                        let cube = refs[j - 1].0;
                        if by_cube.insert((j as u32, cube), id).is_some() {
                            return Err(Error::validation(
                                "two edges end in the same reference cube",
                            ));
                        }
                        nodes.push(RefNode {
                            level: j as u32,
                            parent: Some(parent),
                            cube,
                            label,
                            kappa: Some(kappa),
                        });
                        children.push(Vec::new());
                        children[parent].push(id);
                        index.insert(key, id);
                        id
                    }
                };
                parent = id;
            }
            leaf_of.push(parent);
        }
        Ok(ReferenceTree {
            x,
            poss,
            nodes,
            children,
            leaf_of,
        })
    }

    /// `n_j(x)` for `j = 0..=N`.
    pub fn level_counts(&self, n: u32) -> Vec<usize> {
        let mut c = vec![0; n as usize + 1];
        for v in &self.nodes {
            c[v.level as usize] += 1;
        }
        c
    }

    /// `max_j n_j(x)/2^j`.
    pub fn growth_constant(&self, n: u32) -> f64 {
        self.level_counts(n)
            .iter()
            .enumerate()
            .map(|(j, &c)| c as f64 / 2f64.powi(j as i32))
            .fold(0.0, f64::max)
    }

    /// The tree as a resistor network with `p ≡ 1/2`; `None` when `Poss(x)` is empty.
    pub fn network(&self) -> Option<ResistorNetwork> {
        if self.poss.is_empty() {
            return None;
        }
        ResistorNetwork::from_children(self.children.clone(), half()).ok()
    }

    /// Sticky image of a `N_x` vertex under the lift of `v`.
    pub fn image(&self, node: usize, p: &PrunedSlopeTree) -> Cube {
        p.psi(self.nodes[node].label).expect("label of length ≤ N")
    }
}

/// Rational point rendered for logs.
pub fn fmt_point(x: &[BigRational]) -> String {
    x.iter().map(fmt_rational).collect::<Vec<_>>().join(",")
}

/// Fast `d = 1` evaluation of slab quantities for a full tube family,
/// using that pair volumes depend only on root offsets and slope differences.
#[derive(Clone, Debug)]
pub struct LineFamily {
    /// number of root cubes `M^J`
    pub roots: usize,
    /// `M^{-J}`
    pub unit: f64,
    /// `c_1 M^{-J}`
    pub side: f64,
    pub length: f64,
    pub slopes: Vec<f64>,
    /// slope index of each root
    pub assignment: Vec<u32>,
    /// `prefix[c][k]` = roots with index `< k` in class `c`
    prefix: Vec<Vec<u32>>,
}

/// Antiderivative of `y ↦ max(0, s − |y|)` vanishing at `−∞`.
fn tent_antiderivative(s: f64, y: f64) -> f64 {
    if y <= -s {
        0.0
    } else if y <= 0.0 {
        (y + s) * (y + s) / 2.0
    } else if y < s {
        s * s - (s - y) * (s - y) / 2.0
    } else {
        s * s
    }
}

impl LineFamily {
    pub fn new(p: &PrunedSlopeTree, a0: u32, assignment: Vec<u32>) -> Result<Self> {
        if p.grid.d != 1 {
            return Err(Error::validation("line families need d = 1"));
        }
        let roots = p.grid.bpow(p.j) as usize;
        if assignment.len() != roots {
            return Err(Error::validation("one slope per root cube required"));
        }
        let unit = 1.0 / roots as f64;
        let slopes: Vec<f64> = p.slopes.iter().map(|v| ratio_to_f64(&v[0])).collect();
        let mut prefix = vec![vec![0u32; roots + 1]; slopes.len()];
        for (c, pc) in prefix.iter_mut().enumerate() {
            for k in 0..roots {
                pc[k + 1] = pc[k] + u32::from(assignment[k] as usize == c);
            }
        }
        Ok(LineFamily {
            roots,
            unit,
            side: unit / 4.0,
            length: 10.0 * a0 as f64,
            slopes,
            assignment,
            prefix,
        })
    }

    pub fn from_map<B: BitSource>(map: &StickyMap<'_, B>, a0: u32) -> Result<Self> {
        let p = map.pruned;
        let roots = p.grid.bpow(p.j);
        let assignment = (0..roots)
            .map(|a| map.slope_index(Cube { h: p.j, a }) as u32)
            .collect();
        Self::new(p, a0, assignment)
    }

    fn count(&self, class: usize, from: i64, to: i64) -> u32 {
        // roots with index in [from, to)
        let n = self.roots as i64;
        let (a, b) = (from.clamp(0, n) as usize, to.clamp(0, n) as usize);
        if a >= b {
            0
        } else {
            self.prefix[class][b] - self.prefix[class][a]
        }
    }

    /// `Σ_{k'∈class} T(sign·(k'−k)·unit + α)`.
    fn tent_sum(&self, class: usize, k: i64, sign: i64, alpha: f64) -> f64 {
        let s = self.side;
        let lo = ((-s - alpha) / self.unit).floor() as i64 + 1;
        let hi = ((s - alpha) / self.unit).ceil() as i64;
        // offsets δ >= hi contribute s², offsets in [lo, hi) partially
        let full = if sign > 0 {
            self.count(class, k + hi, i64::MAX)
        } else {
            self.count(class, i64::MIN, k - hi + 1)
        };
        let mut acc = s * s * full as f64;
        for delta in lo..hi {
            let kp = k + sign * delta;
            if kp >= 0
                && (kp as usize) < self.roots
                && self.assignment[kp as usize] as usize == class
            {
                acc += tent_antiderivative(s, delta as f64 * self.unit + alpha);
            }
        }
        acc
    }

    /// `Σ_{t≠t'} |P_t ∩ P_t' ∩ [lo, hi] × R|` over ordered pairs.
    pub fn pair_sum(&self, lo: f64, hi: f64) -> f64 {
        let (lo, hi) = (lo.max(0.0), hi.min(self.length));
        if lo >= hi {
            return 0.0;
        }
        (0..self.roots)
            .into_par_iter()
            .map(|k| {
                let c = self.assignment[k] as usize;
                let mut acc = 0.0;
                for c2 in 0..self.slopes.len() {
                    let dv = self.slopes[c2] - self.slopes[c];
                    if c2 == c || dv == 0.0 {
                        continue;
                    }
                    let (sign, g) = if dv > 0.0 { (1, dv) } else { (-1, -dv) };
                    let upper = self.tent_sum(c2, k as i64, sign, hi * g);
                    let lower = self.tent_sum(c2, k as i64, sign, lo * g);
                    acc += (upper - lower) / g;
                }
                acc
            })
            .sum()
    }

    /// `Σ_t |P_t ∩ slab|`.
    pub fn total_volume(&self, lo: f64, hi: f64) -> f64 {
        let (lo, hi) = (lo.max(0.0), hi.min(self.length));
        if lo >= hi {
            0.0
        } else {
            self.roots as f64 * self.side * (hi - lo)
        }
    }

    /// Cauchy–Schwarz lower bound on the union volume in the slab.
    pub fn cs_lower_bound(&self, lo: f64, hi: f64) -> f64 {
        let tot = self.total_volume(lo, hi);
        if tot == 0.0 {
            return 0.0;
        }
        tot * tot / (tot + self.pair_sum(lo, hi))
    }

    /// Measure of the union of the cross-sections at height `x1`.
    pub fn slice_union(&self, x1: f64) -> f64 {
        if !(0.0..=self.length).contains(&x1) {
            return 0.0;
        }
        let mut pos: Vec<f64> = (0..self.roots)
            .map(|k| (k as f64 + 0.5) * self.unit + x1 * self.slopes[self.assignment[k] as usize])
            .collect();
        pos.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let s = self.side;
        let mut total = 0.0;
        let (mut cl, mut ch) = (pos[0] - s / 2.0, pos[0] + s / 2.0);
        for &c in &pos[1..] {
            let (l, h) = (c - s / 2.0, c + s / 2.0);
            if l <= ch {
                ch = ch.max(h);
            } else {
                total += ch - cl;
                cl = l;
                ch = h;
            }
        }
        total + ch - cl
    }

    /// Midpoint quadrature of the union volume over `[lo, hi]` with `slices` slices.
    pub fn union_quadrature(&self, lo: f64, hi: f64, slices: usize) -> f64 {
        let w = (hi - lo) / slices as f64;
        (0..slices)
            .into_par_iter()
            .map(|k| self.slice_union(lo + (k as f64 + 0.5) * w) * w)
            .sum()
    }
}

/// Modular helper for random rational points: `num/den` with `den = M^k`.
pub fn madic_rational(num: u64, m: u32, k: u32) -> BigRational {
    let den = BigInt::from(m).pow(k);
    let (q, r) = BigInt::from(num).div_rem(&den);
    BigRational::from_integer(q) + BigRational::new(r, den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::madic_tree::MadicTree;
    use crate::scalar::q;
    use crate::sticky::{sample_assignment, tiny_adjacent_instance, ExplicitBits};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cantor(n: u32) -> PrunedSlopeTree {
        let depth = 2 * n as usize + 6;
        let t = MadicTree::from_rules(
            Grid::new(3, 1).unwrap(),
            vec![vec![0, 2]; depth],
            depth as u32,
        )
        .unwrap();
        PrunedSlopeTree::prune(&t, n, 1).unwrap()
    }

    fn r(n: i64, d: i64) -> BigRational {
        q(n, d)
    }

    #[test]
    fn identical_and_parallel_tubes() {
        let p = cantor(2);
        let g = TubeGeometry::new(&p, 10).unwrap();
        let t = Tube {
            root: Cube { h: p.j, a: 5 },
            slope: 1,
        };
        let w = SlabWindow::ints(10, 11).unwrap();
        assert!(g.intersects(&t, &t, &w).unwrap());
        let s = g.side.clone();
        assert_eq!(g.pair_intersection_volume(&t, &t, &w).unwrap(), s.clone());
        let t2 = Tube {
            root: Cube { h: p.j, a: 6 },
            slope: 1,
        };
        assert!(!g.intersects(&t, &t2, &w).unwrap());
        assert!(g.pair_intersection_volume(&t, &t2, &w).unwrap().is_zero());
    }

    #[test]
    fn pair_volume_matches_raster_and_center_inequality() {
        let p = cantor(2);
        let g = TubeGeometry::new(&p, 10).unwrap();
        let w = SlabWindow::new(r(1, 9), r(1, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let roots = g.grid().bpow(p.j) as u64;
        let mut positive = 0;
        for _ in 0..40 {
            let a = Tube {
                root: Cube {
                    h: p.j,
                    a: rng.gen_range(0..roots) as u128,
                },
                slope: rng.gen_range(0..p.len()),
            };
            let sb = rng.gen_range(0..p.len());
            let x1 = r(rng.gen_range(1..=9), 9);
            let c = g.center_at(&a, &x1)[0].clone() - &x1 * &p.slopes[sb][0];
            if c.is_negative() || c >= BigRational::one() {
                continue;
            }
            let b = Tube {
                root: g.grid().cube_of_point(&[c], p.j).unwrap(),
                slope: sb,
            };
            let vol = g.pair_intersection_volume(&a, &b, &w).unwrap();
            let ras = g.rasterized_pair_volume(&a, &b, &w, 400).unwrap();
            assert!((ratio_to_f64(&vol) - ras.estimate).abs() <= ras.error_bound + 1e-15);
            if let Some((lo, hi)) = g.overlap_interval(&a, &b, &w).unwrap() {
                positive += 1;
                let mid = (lo + hi) / BigInt::from(2);
                if a.root != b.root {
                    assert!(g.center_inequality(&a, &b, &mid));
                    assert!(g.slope_gap_inequality(&a, &b, &mid));
                }
                assert!(g.intersection_size_ratio(&a, &b, &w).unwrap() <= 16.0);
            }
        }
        assert!(positive > 10);
    }

    #[test]
    fn union_of_one_and_two_tubes() {
        let p = cantor(2);
        let g = TubeGeometry::new(&p, 10).unwrap();
        let w = SlabWindow::ints(10, 11).unwrap();
        let t = Tube {
            root: Cube { h: p.j, a: 0 },
            slope: 0,
        };
        let u = g.union_volume(&[t], &w, 8).unwrap();
        assert_eq!(u.lower_bound, g.tube_volume(&w));
        assert!((u.estimate - ratio_to_f64(&g.tube_volume(&w))).abs() < 1e-15);
        let t2 = Tube {
            root: Cube { h: p.j, a: 40 },
            slope: 0,
        };
        let u = g.union_volume(&[t, t2], &w, 8).unwrap();
        assert_eq!(u.lower_bound, g.tube_volume(&w) * BigInt::from(2));
        assert!(g.union_volume(&[], &w, 8).is_err());
    }

    #[test]
    fn quadrature_converges_first_order() {
        let p = cantor(2);
        let g = TubeGeometry::new(&p, 10).unwrap();
        let map = sample_assignment(&p, 4);
        let tubes = g.family(&map);
        let w = SlabWindow::new(r(1, 3), r(1, 1)).unwrap();
        let reference = g.union_volume(&tubes, &w, 512).unwrap().estimate;
        let e16 = (g.union_volume(&tubes, &w, 16).unwrap().estimate - reference).abs();
        let e64 = (g.union_volume(&tubes, &w, 64).unwrap().estimate - reference).abs();
        assert!(e64 <= e16 / 2.0 + 1e-12, "{e16} {e64}");
        let u = g.union_volume(&tubes, &w, 64).unwrap();
        assert!(ratio_to_f64(&u.lower_bound) <= u.estimate + 1e-9);
    }

    #[test]
    fn union_measure_boxes() {
        let b = |a: (i64, i64), c: (i64, i64)| vec![(r(a.0, 1), r(a.1, 1)), (r(c.0, 1), r(c.1, 1))];
        assert_eq!(
            union_measure(&[b((0, 2), (0, 2)), b((1, 3), (1, 3))]),
            r(7, 1)
        );
        assert_eq!(
            union_measure(&[b((0, 1), (0, 1)), b((2, 3), (0, 1))]),
            r(2, 1)
        );
    }

    #[test]
    fn poss_descriptions() {
        let p = cantor(2);
        let g = TubeGeometry::new(&p, 10).unwrap();
        let t = Tube {
            root: Cube { h: p.j, a: 17 },
            slope: 2,
        };
        let x1 = r(21, 2);
        let mut x = vec![x1.clone()];
        x.extend(g.center_at(&t, &x1));
        let poss = g.poss(&x).unwrap();
        assert!(poss.contains(&(t.root, 2)));
        let far = vec![r(10, 1), r(-50, 1)];
        assert!(g.poss(&far).unwrap().is_empty());
        assert!(g.poss(&[r(1, 1), r(0, 1)]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let den = 3u64.pow(9);
        for _ in 0..200 {
            let x = vec![
                madic_rational(rng.gen_range(10 * den..11 * den), 3, 9),
                madic_rational(rng.gen_range(0..11 * den), 3, 9),
            ];
            let cubes = g.poss(&x).unwrap();
            let unit_prisms = g.poss_by_tubes(&x, &BigRational::one()).unwrap();
            let tubes = g.poss_by_tubes(&x, &dilation(1)).unwrap();
            // closed unit prisms differ from half-open cubes only on cube faces
            assert!(cubes.iter().all(|c| unit_prisms.contains(c)));
            assert!(tubes.iter().all(|c| cubes.contains(c)));
        }
    }

    #[test]
    fn reference_tree_single_ray_and_percolation_witness() {
        let p = tiny_adjacent_instance();
        let g = TubeGeometry::new(&p, 1).unwrap();
        let t = Tube {
            root: Cube { h: p.j, a: 4 },
            slope: 3,
        };
        let x1 = r(3, 2);
        let mut x = vec![x1.clone()];
        x.extend(g.center_at(&t, &x1));
        let rt = g.reference_tree(&x).unwrap();
        if rt.poss.len() == 1 {
            assert_eq!(rt.level_counts(p.n), vec![1; p.n as usize + 1]);
        }
        // force the warehouse to follow κ along the ray of t
        let mut bits = ExplicitBits::default();
        for (q, b) in reference_cubes(&p, t.root, t.slope) {
            bits.bits.insert(q, b);
        }
        let map = StickyMap::new(&p, bits);
        assert_eq!(map.slope_index(t.root), t.slope);
        assert_eq!(g.inclusion_check(&x, &map).unwrap(), Some(t.root));
    }

    #[test]
    fn membership_witness_matches_bruteforce() {
        let p = cantor(2);
        let g = TubeGeometry::new(&p, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let den = 3u64.pow(8);
        for seed in 0..30 {
            let map = sample_assignment(&p, seed);
            let tubes = g.family(&map);
            for _ in 0..20 {
                let x = if rng.gen_bool(0.5) {
                    let t = tubes[rng.gen_range(0..tubes.len())];
                    let x1 = madic_rational(rng.gen_range(10 * den..11 * den), 3, 8);
                    let mut x = vec![x1.clone()];
                    let c = g.center_at(&t, &x1);
                    x.push(&c[0] + &g.side * r(rng.gen_range(-4..=4), 10));
                    x
                } else {
                    vec![
                        madic_rational(rng.gen_range(10 * den..11 * den), 3, 8),
                        madic_rational(rng.gen_range(0..11 * den), 3, 8),
                    ]
                };
                let inside = g.in_union_bruteforce(&tubes, &x);
                let witness = g.inclusion_check(&x, &map).unwrap();
                assert_eq!(inside, witness.is_some());
                let rt = g.reference_tree(&x).unwrap();
                if let Some(w) = witness {
                    let i = rt.poss.iter().position(|e| e.0 == w).unwrap();
                    let leaf = rt.leaf_of[i];
                    assert_eq!(rt.image(leaf, &p), p.leaves[map.slope_index(w)]);
                }
            }
        }
    }

    #[test]
    fn line_family_matches_exact_pair_sum() {
        let p = cantor(2);
        let g = TubeGeometry::new(&p, 10).unwrap();
        for seed in 0..3 {
            let map = sample_assignment(&p, seed);
            let tubes = g.family(&map);
            let lf = LineFamily::from_map(&map, 10).unwrap();
            for (lo, hi) in [(r(1, 3), r(1, 1)), (r(1, 9), r(1, 3)), (r(10, 1), r(11, 1))] {
                let w = SlabWindow::new(lo.clone(), hi.clone()).unwrap();
                let exact = ratio_to_f64(&g.pair_sum_exact(&tubes, &w).unwrap());
                let fast = lf.pair_sum(ratio_to_f64(&lo), ratio_to_f64(&hi));
                assert!(
                    (exact - fast).abs() <= 1e-9 * exact.max(1e-12),
                    "{exact} {fast}"
                );
                let x1 = (&lo + &hi) / BigInt::from(2);
                let su = ratio_to_f64(&g.slice_union_exact(&tubes, &x1));
                assert!((su - lf.slice_union(ratio_to_f64(&x1))).abs() < 1e-12);
            }
        }
    }
}
