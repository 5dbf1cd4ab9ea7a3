//! Collections of sticky-admissible tube pairs, triples and quadruples that
//! intersect inside a slab `[ϱ, C_1ϱ] × R^d`, grouped by their common
//! ancestors in the root and slope trees; slope-tuple counts with prescribed
//! common ancestors; exact sums over root and slope vertices.
//!
//! Every count is reported against the corresponding bound with its
//! constant dropped, so the ratios are fitted constants.
//!
//! Pairs are ordered: `((t_1, v_1), (t_2, v_2))` and its swap are distinct
//! members. Triples are read as `(t_1, t_2, t_2')` with `t_1` shared,
//! quadruples as `(t_1, t_2, t_1', t_2')`.

use std::collections::{BTreeMap, HashMap, HashSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::madic_tree::{Cube, Grid};
use crate::pruning::PrunedSlopeTree;
use crate::scalar::{qpow, ratio_to_f64};
use crate::sticky::{is_sticky_admissible, mu, reference_cubes};
use crate::tubes::{SlabWindow, Tube, TubeGeometry};

/// Largest root grid `|Q(J)|` on which triple and quadruple scans run.
pub const QUAD_ROOT_CAP: u128 = 6561;

/// Default cap on candidate pair checks.
pub const DEFAULT_PAIR_CAP: u64 = 50_000_000;

/// The slab `[at, c1·at]` in which intersections are required.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    #[serde(with = "crate::scalar::rational_str")]
    pub at: BigRational,
    pub c1: u32,
}

impl Window {
    pub fn new(at: BigRational, c1: u32) -> Result<Self> {
        if !at.is_positive() || c1 < 1 {
            return Err(Error::validation("window needs ϱ > 0 and C1 >= 1"));
        }
        Ok(Window { at, c1 })
    }

    /// `[M^{-r}, C_1 M^{-r}]`
    pub fn scale(m: u32, r: u32, c1: u32) -> Self {
        Window {
            at: qpow(m as i64, -(r as i64)),
            c1,
        }
    }

    pub fn hi(&self) -> BigRational {
        &self.at * BigInt::from(self.c1)
    }

    pub fn slab(&self) -> SlabWindow {
        SlabWindow {
            lo: self.at.clone(),
            hi: self.hi(),
        }
    }
}

/// Anchor vertices of a collection: root-tree cubes first, slope-tree cubes
/// after.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Anchors {
    E2 {
        u: Cube,
        omega: Cube,
    },
    /// three roots of type 1
    E31 {
        u: Cube,
        u2: Cube,
        omega: Cube,
        omega2: Cube,
    },
    /// three roots of type 2; `t = D(t_2, t_2')`
    E32 {
        u: Cube,
        t: Cube,
        omega: Cube,
        omega2: Cube,
        theta: Cube,
    },
    /// four roots of type 1
    E41 {
        u: Cube,
        u2: Cube,
        z: Cube,
        omega: Cube,
        omega2: Cube,
        v: Cube,
    },
    /// four roots of type 2, `u2 ⊊ u`
    E42 {
        u: Cube,
        u2: Cube,
        t: Cube,
        omega: Cube,
        omega2: Cube,
        theta: Cube,
    },
    /// four roots of type 3, `omega2 ⊆ omega`, `s2 ⊊ u`
    E43 {
        u: Cube,
        s1: Cube,
        s2: Cube,
        omega: Cube,
        omega2: Cube,
        theta1: Cube,
        theta2: Cube,
    },
}

fn cube_label(c: Cube) -> String {
    format!("{}:{}", c.h, c.a)
}

impl Anchors {
    pub fn family(&self) -> &'static str {
        match self {
            Anchors::E2 { .. } => "E2",
            Anchors::E31 { .. } => "E31",
            Anchors::E32 { .. } => "E32",
            Anchors::E41 { .. } => "E41",
            Anchors::E42 { .. } => "E42",
            Anchors::E43 { .. } => "E43",
        }
    }

    /// Tuple size of the family.
    pub fn arity(&self) -> usize {
        match self {
            Anchors::E2 { .. } => 2,
            Anchors::E31 { .. } | Anchors::E32 { .. } => 3,
            _ => 4,
        }
    }

    pub fn root_vertices(&self) -> Vec<Cube> {
        match *self {
            Anchors::E2 { u, .. } => vec![u],
            Anchors::E31 { u, u2, .. } => vec![u, u2],
            Anchors::E32 { u, t, .. } => vec![u, t],
            Anchors::E41 { u, u2, z, .. } => vec![u, u2, z],
            Anchors::E42 { u, u2, t, .. } => vec![u, u2, t],
            Anchors::E43 { u, s1, s2, .. } => vec![u, s1, s2],
        }
    }

    pub fn slope_vertices(&self) -> Vec<Cube> {
        match *self {
            Anchors::E2 { omega, .. } => vec![omega],
            Anchors::E31 { omega, omega2, .. } => vec![omega, omega2],
            Anchors::E32 {
                omega,
                omega2,
                theta,
                ..
            } => vec![omega, omega2, theta],
            Anchors::E41 {
                omega, omega2, v, ..
            } => vec![omega, omega2, v],
            Anchors::E42 {
                omega,
                omega2,
                theta,
                ..
            } => vec![omega, omega2, theta],
            Anchors::E43 {
                omega,
                omega2,
                theta1,
                theta2,
                ..
            } => vec![omega, omega2, theta1, theta2],
        }
    }

    /// `(u, ω)` of each intersecting pair in the tuple.
    pub fn pair_anchors(&self) -> Vec<(Cube, Cube)> {
        match *self {
            Anchors::E2 { u, omega } => vec![(u, omega)],
            Anchors::E31 {
                u,
                u2,
                omega,
                omega2,
            }
            | Anchors::E41 {
                u,
                u2,
                omega,
                omega2,
                ..
            } => {
                vec![(u, omega), (u2, omega2)]
            }
            Anchors::E42 {
                u,
                u2,
                omega,
                omega2,
                ..
            } => vec![(u, omega), (u2, omega2)],
            Anchors::E32 {
                u, omega, omega2, ..
            }
            | Anchors::E43 {
                u, omega, omega2, ..
            } => {
                vec![(u, omega), (u, omega2)]
            }
        }
    }

    /// `family[root cubes; slope cubes]`, cubes written `height:address`.
    pub fn label(&self) -> String {
        let r: Vec<String> = self.root_vertices().into_iter().map(cube_label).collect();
        let s: Vec<String> = self.slope_vertices().into_iter().map(cube_label).collect();
        format!("{}[{};{}]", self.family(), r.join(","), s.join(","))
    }
}

/// A collection `E[anchors; ϱ]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleCollectionSpec {
    pub anchors: Anchors,
    pub window: Window,
}

impl TupleCollectionSpec {
    /// Height and containment relations the counting bounds place on the
    /// anchors, listed when they fail.
    pub fn relations(&self, p: &PrunedSlopeTree) -> Vec<String> {
        let g = p.grid;
        let mut bad = Vec::new();
        let mut need = |ok: bool, what: &str| {
            if !ok {
                bad.push(what.to_string());
            }
        };
        for (u, w) in self.anchors.pair_anchors() {
            need(u.h <= w.h, "h(u) <= h(ω) for each pair");
            need(p.split_vertex(w).is_some(), "ω is a splitting vertex");
        }
        match self.anchors {
            Anchors::E2 { .. } | Anchors::E31 { .. } => {}
            Anchors::E32 {
                u,
                t,
                omega,
                omega2,
                theta,
            } => {
                need(g.contains(u, t) && t != u, "t ⊊ u");
                need(t.h <= theta.h, "h(t) <= h(ϑ)");
                need(nested(&g, omega, omega2), "ω, ω' nested");
            }
            Anchors::E41 {
                u,
                u2,
                z,
                omega,
                omega2,
                v,
            } => {
                need(z == g.dca(u, u2), "z = D(u, u')");
                need(v == g.dca(omega, omega2), "v = D(ω, ω')");
                need(z.h <= v.h, "h(z) <= h(v)");
            }
            Anchors::E42 {
                u,
                u2,
                t,
                omega,
                omega2,
                theta,
            } => {
                need(g.contains(u, u2) && u != u2, "u' ⊊ u");
                need(
                    g.contains(u, t) && nested(&g, t, u2),
                    "u, u', t linearly ordered",
                );
                need(
                    nested(&g, omega, theta) && nested(&g, omega2, theta),
                    "(ω,ϑ) and (ω',ϑ) nested",
                );
                need(t.h <= theta.h, "h(t) <= h(ϑ)");
            }
            Anchors::E43 {
                u,
                s1,
                s2,
                omega,
                omega2,
                theta1,
                theta2,
            } => {
                need(g.contains(u, s1) && g.contains(u, s2), "s1, s2 ⊆ u");
                need(u.h <= s1.h && s1.h <= s2.h, "h(u) <= h(s1) <= h(s2)");
                need(g.contains(omega, omega2), "ω' ⊆ ω");
                need(
                    [theta1, theta2]
                        .iter()
                        .all(|&th| nested(&g, omega, th) && nested(&g, omega2, th)),
                    "ω, ω' meet ϑ1, ϑ2",
                );
                need(s1.h <= theta1.h && s2.h <= theta2.h, "h(s_i) <= h(ϑ_i)");
            }
        }
        bad
    }
}

fn nested(g: &Grid, a: Cube, b: Cube) -> bool {
    g.contains(a, b) || g.contains(b, a)
}

/// `ν` of a slope-tree vertex: its splitting index, or `N + 1` for a leaf
/// (so that `2^{N - ν + 1}` slopes lie below it in both cases).
pub fn nu(p: &PrunedSlopeTree, c: Cube) -> Result<u32> {
    if let Some(s) = p.split_vertex(c) {
        return Ok(s.index);
    }
    if c.h == p.j && p.leaves.binary_search(&c).is_ok() {
        return Ok(p.n + 1);
    }
    Err(Error::validation(format!(
        "cube {} is neither a splitting vertex nor a leaf",
        cube_label(c)
    )))
}

/// Exact `ρ_ω²`; zero at a leaf.
pub fn rho2(p: &PrunedSlopeTree, omega: Cube) -> Result<BigRational> {
    if p.split_vertex(omega).is_some() {
        return Ok(p.slope_metrics(omega)?.0);
    }
    nu(p, omega)?;
    Ok(BigRational::zero())
}

fn rho(p: &PrunedSlopeTree, omega: Cube) -> Result<f64> {
    Ok(ratio_to_f64(&rho2(p, omega)?).sqrt())
}

fn leaf(p: &PrunedSlopeTree, v: usize) -> Cube {
    p.leaves[v]
}

fn slope_dca(p: &PrunedSlopeTree, a: usize, b: usize) -> Cube {
    p.grid.dca(leaf(p, a), leaf(p, b))
}

/// Necessary condition `2C_1ϱρ_ω >= M^{-J}`, exact.
pub fn scales_compatible(p: &PrunedSlopeTree, omega: Cube, w: &Window) -> Result<bool> {
    let lhs = rho2(p, omega)? * w.hi() * w.hi() * BigInt::from(4);
    let unit = p.grid.side(p.j);
    Ok(lhs >= &unit * &unit)
}

// ---------------------------------------------------------------------------
// pairs

/// Per-axis reach, in units of `M^{-J}`, of a partner root: overlapping
/// cross-sections force `|Δcen_i| < c_d M^{-J} + C_1ϱ|Δv_i|`.
fn reach(geom: &TubeGeometry<'_>, w: &Window, a: usize, b: usize) -> Vec<u128> {
    let p = geom.pruned;
    let scale = BigInt::from(p.grid.m).pow(p.j);
    let hi = w.hi();
    p.slopes[a]
        .iter()
        .zip(&p.slopes[b])
        .map(|(x, y)| {
            let r = (&geom.side + &hi * (y - x).abs()) * &scale;
            r.floor().to_integer().to_u128().unwrap_or(u128::MAX / 4)
        })
        .collect()
}

fn coord_range(grid: &Grid, h: u32, within: Option<Cube>) -> Vec<(u128, u128)> {
    match within {
        None => vec![(0, (grid.m as u128).pow(h)); grid.d as usize],
        Some(u) => {
            let w = (grid.m as u128).pow(h - u.h);
            grid.coords(u)
                .into_iter()
                .map(|c| (c * w, (c + 1) * w))
                .collect()
        }
    }
}

/// Visits the box `Π [lo_i, hi_i)` of integer coordinates.
fn for_box(lo: &[u128], hi: &[u128], mut f: impl FnMut(&[u128])) {
    if lo.iter().zip(hi).any(|(a, b)| a >= b) {
        return;
    }
    let mut x = lo.to_vec();
    loop {
        f(&x);
        let mut i = 0;
        loop {
            if i == x.len() {
                return;
            }
            x[i] += 1;
            if x[i] < hi[i] {
                break;
            }
            x[i] = lo[i];
            i += 1;
        }
    }
}

/// Whether an ordered pair is a member of some `E_2`: distinct roots and
/// slopes, sticky-admissible, intersecting inside the window.
fn pair_member(geom: &TubeGeometry<'_>, a: &Tube, b: &Tube, slab: &SlabWindow) -> Result<bool> {
    if a.root == b.root || a.slope == b.slope {
        return Ok(false);
    }
    if !geom.intersects(a, b, slab)? {
        return Ok(false);
    }
    Ok(is_sticky_admissible(geom.pruned, &[a.root, b.root], &[a.slope, b.slope])?.admissible)
}

/// Ordered slope pairs `(v_1, v_2)` with `D(v_1, v_2) = ω`.
fn slope_pairs_under(p: &PrunedSlopeTree, omega: Cube) -> Result<Vec<(usize, usize)>> {
    let sv = p
        .split_vertex(omega)
        .ok_or_else(|| Error::validation("ω must be a splitting vertex"))?;
    let side = |c: Cube| -> Vec<usize> {
        (0..p.len())
            .filter(|&i| p.grid.contains(c, p.leaves[i]))
            .collect()
    };
    let (a, b) = (side(sv.children[0]), side(sv.children[1]));
    let mut out = Vec::with_capacity(2 * a.len() * b.len());
    for &x in &a {
        for &y in &b {
            out.push((x, y));
            out.push((y, x));
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Restricted scan for partners of roots in `first` (all roots of `Q(J)` when
/// `None`). Partners are searched in the per-axis reach box, inside `within`
/// when given; `accept` filters the finished pair.
fn scan_pairs(
    geom: &TubeGeometry<'_>,
    w: &Window,
    slope_pairs: &[(usize, usize)],
    first: Option<Cube>,
    within: Option<Cube>,
    cap: u64,
    accept: impl Fn(&Tube, &Tube) -> bool + Sync,
) -> Result<(Vec<[Tube; 2]>, u64)> {
    let p = geom.pruned;
    let g = p.grid;
    let j = p.j;
    let t1_range = coord_range(&g, j, first);
    let t2_range = coord_range(&g, j, within);
    let t1_count: u128 = t1_range.iter().map(|(a, b)| b - a).product();
    let reaches: Vec<Vec<u128>> = slope_pairs
        .iter()
        .map(|&(a, b)| reach(geom, w, a, b))
        .collect();
    let mut estimate: u128 = 0;
    for r in &reaches {
        let per: u128 = r
            .iter()
            .zip(&t2_range)
            .map(|(&ri, (a, b))| (2 * ri + 1).min(b - a))
            .product();
        estimate = estimate.saturating_add(per.saturating_mul(t1_count));
    }
    if estimate > cap as u128 {
        return Err(Error::infeasible(format!(
            "pair scan needs about {estimate} checks, cap is {cap}"
        )));
    }
    let slab = w.slab();
    let mut t1s = Vec::with_capacity(t1_count as usize);
    let lo: Vec<u128> = t1_range.iter().map(|r| r.0).collect();
    let hi: Vec<u128> = t1_range.iter().map(|r| r.1).collect();
    for_box(&lo, &hi, |c| t1s.push(c.to_vec()));
    let results: Vec<Result<(Vec<[Tube; 2]>, u64)>> = t1s
        .par_iter()
        .map(|c1| {
            let t1 = g.from_coords(j, c1);
            let mut out = Vec::new();
            let mut checked = 0u64;
            for (k, &(v1, v2)) in slope_pairs.iter().enumerate() {
                let r = &reaches[k];
                let lo: Vec<u128> = c1
                    .iter()
                    .zip(r)
                    .zip(&t2_range)
                    .map(|((&c, &ri), rg)| c.saturating_sub(ri).max(rg.0))
                    .collect();
                let hi: Vec<u128> = c1
                    .iter()
                    .zip(r)
                    .zip(&t2_range)
                    .map(|((&c, &ri), rg)| (c + ri + 1).min(rg.1))
                    .collect();
                let a = Tube {
                    root: t1,
                    slope: v1,
                };
                let mut err = None;
                for_box(&lo, &hi, |c2| {
                    if err.is_some() {
                        return;
                    }
                    let b = Tube {
                        root: g.from_coords(j, c2),
                        slope: v2,
                    };
                    if !accept(&a, &b) {
                        return;
                    }
                    checked += 1;
                    match pair_member(geom, &a, &b, &slab) {
                        Ok(true) => out.push([a, b]),
                        Ok(false) => {}
                        Err(e) => err = Some(e),
                    }
                });
                if let Some(e) = err {
                    return Err(e);
                }
            }
            Ok((out, checked))
        })
        .collect();
    let mut all = Vec::new();
    let mut checked = 0;
    for r in results {
        let (v, c) = r?;
        all.extend(v);
        checked += c;
    }
    all.sort_unstable();
    Ok((all, checked))
}

/// `E_2[u, ω; ϱ]` by restricted scan: `t_1` over the roots in `u`, `t_2` in
/// the reach box of `t_1` inside `u` but outside the child of `u` holding
/// `t_1`, then the exact intersection and admissibility filters.
pub fn enumerate_e2(
    geom: &TubeGeometry<'_>,
    u: Cube,
    omega: Cube,
    w: &Window,
    cap: u64,
) -> Result<Vec<[Tube; 2]>> {
    Ok(enumerate_e2_counted(geom, u, omega, w, cap)?.0)
}

/// [`enumerate_e2`] with the number of exact checks performed.
pub fn enumerate_e2_counted(
    geom: &TubeGeometry<'_>,
    u: Cube,
    omega: Cube,
    w: &Window,
    cap: u64,
) -> Result<(Vec<[Tube; 2]>, u64)> {
    if u.h > omega.h {
        return Err(Error::validation("E2 needs h(u) <= h(ω)"));
    }
    scan_e2(geom, u, omega, w, cap)
}

/// The restricted scan without the height precondition on the anchors.
pub(crate) fn scan_e2(
    geom: &TubeGeometry<'_>,
    u: Cube,
    omega: Cube,
    w: &Window,
    cap: u64,
) -> Result<(Vec<[Tube; 2]>, u64)> {
    let p = geom.pruned;
    let g = p.grid;
    if u.h > p.j || u.a >= g.bpow(u.h) {
        return Err(Error::validation(
            "u must be a root-tree cube of height <= J",
        ));
    }
    let pairs = slope_pairs_under(p, omega)?;
    if u.h == p.j || !scales_compatible(p, omega, w)? {
        return Ok((Vec::new(), 0));
    }
    scan_pairs(geom, w, &pairs, Some(u), Some(u), cap, |a, b| {
        g.dca(a.root, b.root) == u
    })
}

/// `E_2[u, ω; ϱ]` straight from the definition over all of `Q(J)² × Ω_N²`.
pub fn e2_bruteforce(
    geom: &TubeGeometry<'_>,
    u: Cube,
    omega: Cube,
    w: &Window,
    cap: u64,
) -> Result<Vec<[Tube; 2]>> {
    let p = geom.pruned;
    let g = p.grid;
    let roots = geom.root_cubes();
    let work = (roots.len() as u128).pow(2) * (p.len() as u128).pow(2);
    if work > cap as u128 {
        return Err(Error::infeasible(format!(
            "brute force needs {work} checks, cap is {cap}"
        )));
    }
    let slab = w.slab();
    let rows: Vec<Result<Vec<[Tube; 2]>>> = roots
        .par_iter()
        .map(|&t1| {
            let mut out = Vec::new();
            for &t2 in &roots {
                if t1 == t2 || g.dca(t1, t2) != u {
                    continue;
                }
                for v1 in 0..p.len() {
                    for v2 in 0..p.len() {
                        if v1 == v2 || slope_dca(p, v1, v2) != omega {
                            continue;
                        }
                        let (a, b) = (
                            Tube {
                                root: t1,
                                slope: v1,
                            },
                            Tube {
                                root: t2,
                                slope: v2,
                            },
                        );
                        if pair_member(geom, &a, &b, &slab)? {
                            out.push([a, b]);
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in rows {
        all.extend(r?);
    }
    all.sort_unstable();
    Ok(all)
}

/// Every ordered member of every `E_2[·, ·; ϱ]`, by restricted scan.
pub fn all_pairs(geom: &TubeGeometry<'_>, w: &Window, cap: u64) -> Result<Vec<[Tube; 2]>> {
    let p = geom.pruned;
    let mut sp = Vec::new();
    for a in 0..p.len() {
        for b in 0..p.len() {
            if a != b {
                sp.push((a, b));
            }
        }
    }
    Ok(scan_pairs(geom, w, &sp, None, None, cap, |_, _| true)?.0)
}

/// Anchors `(D(t_1,t_2), D(v_1,v_2))` of a pair.
pub fn pair_anchors(p: &PrunedSlopeTree, pair: &[Tube; 2]) -> (Cube, Cube) {
    (
        p.grid.dca(pair[0].root, pair[1].root),
        slope_dca(p, pair[0].slope, pair[1].slope),
    )
}

/// Counts attached to one `E_2` collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2Diagnostics {
    pub anchor: String,
    pub count: usize,
    /// `(ϱρ_ω)² 2^{2(N−ν(ω))} M^{−(d−1)h(u)+(d+1)J}`
    pub bound: f64,
    pub ratio: f64,
    /// largest `t_2`-slice for fixed `(t_1, v_1, v_2)`
    pub max_slice: usize,
    /// `ϱρ_ω M^J`
    pub slice_bound: f64,
    pub slice_ratio: f64,
    /// number of distinct `t_1`
    pub projection: usize,
    /// `ϱρ_ω M^{−(d−1)h(u)+dJ}`
    pub projection_bound: f64,
    pub projection_ratio: f64,
}

pub fn e2_diagnostics(
    p: &PrunedSlopeTree,
    u: Cube,
    omega: Cube,
    w: &Window,
    pairs: &[[Tube; 2]],
) -> Result<E2Diagnostics> {
    let (m, d, j) = (p.grid.m as f64, p.grid.d as f64, p.j as f64);
    let rr = ratio_to_f64(&w.at) * rho(p, omega)?;
    let nu_w = nu(p, omega)? as f64;
    let hu = u.h as f64;
    let bound =
        rr * rr * 2f64.powf(2.0 * (p.n as f64 - nu_w)) * m.powf(-(d - 1.0) * hu + (d + 1.0) * j);
    let mut slices: HashMap<(Cube, usize, usize), usize> = HashMap::new();
    let mut t1s = HashSet::new();
    for pr in pairs {
        *slices
            .entry((pr[0].root, pr[0].slope, pr[1].slope))
            .or_default() += 1;
        t1s.insert(pr[0].root);
    }
    let max_slice = slices.values().copied().max().unwrap_or(0);
    let slice_bound = rr * m.powf(j);
    let projection_bound = rr * m.powf(-(d - 1.0) * hu + d * j);
    Ok(E2Diagnostics {
        anchor: Anchors::E2 { u, omega }.label(),
        count: pairs.len(),
        bound,
        ratio: pairs.len() as f64 / bound,
        max_slice,
        slice_bound,
        slice_ratio: max_slice as f64 / slice_bound,
        projection: t1s.len(),
        projection_bound,
        projection_ratio: t1s.len() as f64 / projection_bound,
    })
}

// ---------------------------------------------------------------------------
// slope complexity

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComplexityKind {
    /// `m[ϖ_1, ϖ_2, ϖ_3]` for slope quadruples
    M,
    /// `m̂[ϖ_1, ϖ_2]` for slope triples
    MHat,
}

/// Canonical arrangement of prescribed common ancestors and the exponent
/// deficit they force on slope-tuple counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlopeComplexity {
    pub kind: ComplexityKind,
    /// `(ϖ_1, ϖ_2, ϖ_3)` or `(ϖ_1, ϖ_2)`
    pub ordered: Vec<Cube>,
    pub nu: Vec<u32>,
    /// `ϖ_3 ⊆ ϖ_2` (always true for `m̂`)
    pub nested: bool,
    pub value: u32,
    /// coincidences among the input vertices, e.g. `abca`
    pub pattern: String,
}

fn pattern(vs: &[Cube]) -> String {
    let mut seen: Vec<Cube> = Vec::new();
    vs.iter()
        .map(|v| {
            let i = seen.iter().position(|s| s == v).unwrap_or_else(|| {
                seen.push(*v);
                seen.len() - 1
            });
            (b'a' + i as u8) as char
        })
        .collect()
}

/// `m` from an arrangement already obeying `h(ϖ_1) ≤ h(ϖ_2) ≤ h(ϖ_3)`,
/// `ϖ_2, ϖ_3 ⊆ ϖ_1`.
pub fn m_value(p: &PrunedSlopeTree, w1: Cube, w2: Cube, w3: Cube) -> Result<(u32, bool)> {
    let (n1, n2, n3) = (nu(p, w1)?, nu(p, w2)?, nu(p, w3)?);
    let inside = p.grid.contains(w2, w3);
    Ok((
        if inside {
            2 * n3 + n2 + n1
        } else {
            2 * (n3 + n2)
        },
        inside,
    ))
}

fn arrange_three(p: &PrunedSlopeTree, vs: [Cube; 3]) -> Option<[Cube; 3]> {
    let g = p.grid;
    let mut best: Option<[Cube; 3]> = None;
    for i in 0..3 {
        let top = vs[i];
        let mut rest: Vec<Cube> = (0..3).filter(|&k| k != i).map(|k| vs[k]).collect();
        if !rest.iter().all(|&r| g.contains(top, r)) {
            continue;
        }
        rest.sort_by_key(|c| (c.h, c.a));
        let cand = [top, rest[0], rest[1]];
        if best.is_none_or(|b| top.h < b[0].h) {
            best = Some(cand);
        }
    }
    best
}

/// `m̂` for two or three slope-tree vertices with at most two distinct,
/// one containing the other.
pub fn slope_complexity_hat(p: &PrunedSlopeTree, vertices: &[Cube]) -> Result<SlopeComplexity> {
    if !(2..=3).contains(&vertices.len()) {
        return Err(Error::validation("m̂ takes two or three vertices"));
    }
    for &v in vertices {
        nu(p, v)?;
    }
    let mut distinct: Vec<Cube> = vertices.to_vec();
    distinct.sort_by_key(|c| (c.h, c.a));
    distinct.dedup();
    let (w1, w2) = match distinct.len() {
        1 => (distinct[0], distinct[0]),
        2 if p.grid.contains(distinct[0], distinct[1]) => (distinct[0], distinct[1]),
        _ => {
            return Err(Error::validation(
                "the vertices do not rearrange as ϖ_2 ⊆ ϖ_1",
            ))
        }
    };
    let (n1, n2) = (nu(p, w1)?, nu(p, w2)?);
    Ok(SlopeComplexity {
        kind: ComplexityKind::MHat,
        ordered: vec![w1, w2],
        nu: vec![n1, n2],
        nested: true,
        value: 2 * n2 + n1,
        pattern: pattern(vertices),
    })
}

/// `m̂` for two vertices, `m` for three or four. Four vertices may have at
/// most three distinct members; with exactly three the distinct ones are
/// arranged, otherwise every way of dropping one entry that leaves an
/// admissible triple is tried and the smallest `m` is kept.
pub fn slope_complexity(p: &PrunedSlopeTree, vertices: &[Cube]) -> Result<SlopeComplexity> {
    for &v in vertices {
        nu(p, v)?;
    }
    let triples: Vec<[Cube; 3]> = match vertices.len() {
        2 => return slope_complexity_hat(p, vertices),
        3 => vec![[vertices[0], vertices[1], vertices[2]]],
        4 => {
            let mut distinct: Vec<Cube> = vertices.to_vec();
            distinct.sort();
            distinct.dedup();
            if distinct.len() > 3 {
                return Err(Error::validation(
                    "at most three of the four vertices can be distinct",
                ));
            }
            if distinct.len() == 3 {
                vec![[distinct[0], distinct[1], distinct[2]]]
            } else {
                (0..4)
                    .map(|i| {
                        let r: Vec<Cube> =
                            (0..4).filter(|&k| k != i).map(|k| vertices[k]).collect();
                        [r[0], r[1], r[2]]
                    })
                    .collect()
            }
        }
        n => {
            return Err(Error::validation(format!(
                "slope complexity takes 2 to 4 vertices, got {n}"
            )))
        }
    };
    let mut best: Option<SlopeComplexity> = None;
    for t in triples {
        let Some([w1, w2, w3]) = arrange_three(p, t) else {
            continue;
        };
        let (value, nested) = m_value(p, w1, w2, w3)?;
        if best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(SlopeComplexity {
                kind: ComplexityKind::M,
                ordered: vec![w1, w2, w3],
                nu: vec![nu(p, w1)?, nu(p, w2)?, nu(p, w3)?],
                nested,
                value,
                pattern: pattern(vertices),
            });
        }
    }
    best.ok_or_else(|| Error::validation("no arrangement with ϖ_2, ϖ_3 ⊆ ϖ_1"))
}

/// One exhaustive slope-tuple count with prescribed common ancestors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeCountRow {
    /// constrained index pairs, 0-based, in the order of `vertices`
    pub pairs: Vec<(u8, u8)>,
    /// `(ϖ_1, ϖ_2, ϖ_3)` or `(ϖ_1, ϖ_2)`
    pub vertices: Vec<Cube>,
    pub count: u64,
    pub exponent: u32,
    /// `2^{4N−m}` or `2^{3N−m̂}`
    pub bound: f64,
    pub ratio: f64,
}

const SLOPE_COUNT_CAP: usize = 16;

fn dca_table(p: &PrunedSlopeTree) -> Result<(Vec<Vec<u16>>, Vec<Cube>)> {
    let k = p.len();
    if k > SLOPE_COUNT_CAP {
        return Err(Error::infeasible(format!(
            "exhaustive slope counts need |Ω_N| <= {SLOPE_COUNT_CAP}"
        )));
    }
    let mut ids: BTreeMap<Cube, u16> = BTreeMap::new();
    let mut cubes = Vec::new();
    let mut tab = vec![vec![u16::MAX; k]; k];
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let c = slope_dca(p, a, b);
            let id = *ids.entry(c).or_insert_with(|| {
                cubes.push(c);
                (cubes.len() - 1) as u16
            });
            tab[a][b] = id;
        }
    }
    Ok((tab, cubes))
}

/// Quadruples `(w_1..w_4) ∈ Ω_N^4` with `D(w_{i_k}, w_{j_k}) = ϖ_k` for
/// every ordered choice of three distinct index pairs covering `{1..4}` and
/// every `(ϖ_1, ϖ_2, ϖ_3)` obeying the height and containment relations.
pub fn slope_quadruple_counts(p: &PrunedSlopeTree) -> Result<Vec<SlopeCountRow>> {
    let (tab, cubes) = dca_table(p)?;
    let k = p.len();
    let edges: Vec<(u8, u8)> = vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let mut patterns: Vec<[(u8, u8); 3]> = Vec::new();
    for a in 0..6 {
        for b in 0..6 {
            for c in 0..6 {
                if a == b || b == c || a == c {
                    continue;
                }
                let mut cov = [false; 4];
                for e in [edges[a], edges[b], edges[c]] {
                    cov[e.0 as usize] = true;
                    cov[e.1 as usize] = true;
                }
                if cov.iter().all(|&x| x) {
                    patterns.push([edges[a], edges[b], edges[c]]);
                }
            }
        }
    }
    let g = p.grid;
    let ok = |w1: Cube, w2: Cube, w3: Cube| {
        w1.h <= w2.h && w2.h <= w3.h && g.contains(w1, w2) && g.contains(w1, w3)
    };
    let counts: HashMap<(usize, [u16; 3]), u64> = (0..k)
        .into_par_iter()
        .map(|w0| {
            let mut local: HashMap<(usize, [u16; 3]), u64> = HashMap::new();
            for w1 in 0..k {
                for w2 in 0..k {
                    for w3 in 0..k {
                        let w = [w0, w1, w2, w3];
                        for (pi, pat) in patterns.iter().enumerate() {
                            let mut key = [0u16; 3];
                            let mut valid = true;
                            for (s, &(i, j)) in pat.iter().enumerate() {
                                let id = tab[w[i as usize]][w[j as usize]];
                                if id == u16::MAX {
                                    valid = false;
                                    break;
                                }
                                key[s] = id;
                            }
                            if valid
                                && ok(
                                    cubes[key[0] as usize],
                                    cubes[key[1] as usize],
                                    cubes[key[2] as usize],
                                )
                            {
                                *local.entry((pi, key)).or_default() += 1;
                            }
                        }
                    }
                }
            }
            local
        })
        .reduce(HashMap::new, |mut a, b| {
            for (key, c) in b {
                *a.entry(key).or_default() += c;
            }
            a
        });
    let mut rows = Vec::with_capacity(counts.len());
    for ((pi, key), count) in counts {
        let vs: Vec<Cube> = key.iter().map(|&i| cubes[i as usize]).collect();
        let (m, _) = m_value(p, vs[0], vs[1], vs[2])?;
        let exponent = 4 * p.n - m.min(4 * p.n);
        let bound = 2f64.powi(4 * p.n as i32 - m as i32);
        rows.push(SlopeCountRow {
            pairs: patterns[pi].to_vec(),
            vertices: vs,
            count,
            exponent,
            bound,
            ratio: count as f64 / bound,
        });
    }
    rows.sort_by(|a, b| (&a.vertices, &a.pairs).cmp(&(&b.vertices, &b.pairs)));
    Ok(rows)
}

/// Triples `(w_1, w_2, w_3)` with `D(w_{i_1}, w_{j_1}) = ϖ_1`,
/// `D(w_{i_2}, w_{j_2}) = ϖ_2`, `ϖ_2 ⊆ ϖ_1`.
pub fn slope_triple_counts(p: &PrunedSlopeTree) -> Result<Vec<SlopeCountRow>> {
    let (tab, cubes) = dca_table(p)?;
    let k = p.len();
    let edges = [(0u8, 1u8), (0, 2), (1, 2)];
    let mut patterns = Vec::new();
    for a in 0..3 {
        for b in 0..3 {
            if a != b {
                patterns.push([edges[a], edges[b]]);
            }
        }
    }
    let g = p.grid;
    let mut counts: HashMap<(usize, [u16; 2]), u64> = HashMap::new();
    for w0 in 0..k {
        for w1 in 0..k {
            for w2 in 0..k {
                let w = [w0, w1, w2];
                for (pi, pat) in patterns.iter().enumerate() {
                    let a = tab[w[pat[0].0 as usize]][w[pat[0].1 as usize]];
                    let b = tab[w[pat[1].0 as usize]][w[pat[1].1 as usize]];
                    if a == u16::MAX
                        || b == u16::MAX
                        || !g.contains(cubes[a as usize], cubes[b as usize])
                    {
                        continue;
                    }
                    *counts.entry((pi, [a, b])).or_default() += 1;
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(counts.len());
    for ((pi, key), count) in counts {
        let vs: Vec<Cube> = key.iter().map(|&i| cubes[i as usize]).collect();
        let m = 2 * nu(p, vs[1])? + nu(p, vs[0])?;
        let bound = 2f64.powi(3 * p.n as i32 - m as i32);
        rows.push(SlopeCountRow {
            pairs: patterns[pi].to_vec(),
            vertices: vs,
            count,
            exponent: (3 * p.n).saturating_sub(m),
            bound,
            ratio: count as f64 / bound,
        });
    }
    rows.sort_by(|a, b| (&a.vertices, &a.pairs).cmp(&(&b.vertices, &b.pairs)));
    Ok(rows)
}

// ---------------------------------------------------------------------------
// triples and quadruples

/// Type of the pairing `{(t_1,t_2); (t_1',t_2')}`: 1, 2 (`u' ⊊ u`), 3, or
/// `None` when `u ⊊ u'` (the swapped pairing is type 2).
fn pairing_type(g: &Grid, t: [Cube; 4]) -> Option<u8> {
    let u = g.dca(t[0], t[1]);
    let up = g.dca(t[2], t[3]);
    if !nested(g, u, up) {
        return Some(1);
    }
    if u != up {
        return g.contains(u, up).then_some(2);
    }
    let cross = [(0, 2), (0, 3), (1, 2), (1, 3)];
    if cross.iter().all(|&(i, j)| g.dca(t[i], t[j]) == u) {
        Some(1)
    } else {
        Some(3)
    }
}

/// Anchors of a quadruple `((t_1,v_1),(t_2,v_2),(t_1',v_1'),(t_2',v_2'))`
/// read as two intersecting pairs; `None` if it belongs to no family under
/// this labelling.
pub fn quad_anchors(p: &PrunedSlopeTree, q: &[Tube; 4]) -> Option<Anchors> {
    let g = p.grid;
    let t = [q[0].root, q[1].root, q[2].root, q[3].root];
    let uniq: HashSet<Cube> = t.iter().copied().collect();
    if uniq.len() != 4 || q[0].slope == q[1].slope || q[2].slope == q[3].slope {
        return None;
    }
    let u = g.dca(t[0], t[1]);
    let u2 = g.dca(t[2], t[3]);
    let omega = slope_dca(p, q[0].slope, q[1].slope);
    let omega2 = slope_dca(p, q[2].slope, q[3].slope);
    match pairing_type(&g, t)? {
        1 => Some(Anchors::E41 {
            u,
            u2,
            z: g.dca(u, u2),
            omega,
            omega2,
            v: g.dca(omega, omega2),
        }),
        2 => Some(Anchors::E42 {
            u,
            u2,
            t: g.dca(t[1], t[3]),
            omega,
            omega2,
            theta: slope_dca(p, q[1].slope, q[3].slope),
        }),
        _ => {
            let s1 = g.dca(t[0], t[2]);
            let s2 = g.dca(t[1], t[3]);
            if s1.h > s2.h || s2 == u || !g.contains(omega, omega2) {
                return None;
            }
            Some(Anchors::E43 {
                u,
                s1,
                s2,
                omega,
                omega2,
                theta1: slope_dca(p, q[0].slope, q[2].slope),
                theta2: slope_dca(p, q[1].slope, q[3].slope),
            })
        }
    }
}

/// Anchors of a triple `((t_1,v_1),(t_2,v_2),(t_2',v_2'))`.
pub fn triple_anchors(p: &PrunedSlopeTree, tr: &[Tube; 3]) -> Option<Anchors> {
    let g = p.grid;
    let t = [tr[0].root, tr[1].root, tr[2].root];
    if t[0] == t[1]
        || t[0] == t[2]
        || t[1] == t[2]
        || tr[0].slope == tr[1].slope
        || tr[0].slope == tr[2].slope
    {
        return None;
    }
    let u = g.dca(t[0], t[1]);
    let u2 = g.dca(t[0], t[2]);
    let omega = slope_dca(p, tr[0].slope, tr[1].slope);
    let omega2 = slope_dca(p, tr[0].slope, tr[2].slope);
    let t22 = g.dca(t[1], t[2]);
    if u != u2 || t22 == u {
        Some(Anchors::E31 {
            u,
            u2,
            omega,
            omega2,
        })
    } else {
        Some(Anchors::E32 {
            u,
            t: t22,
            omega,
            omega2,
            theta: slope_dca(p, tr[1].slope, tr[2].slope),
        })
    }
}

/// Reference cubes and required bits per tube. A collection is
/// sticky-admissible exactly when no cube is asked for two different bits,
/// and the reference cubes of one tube have distinct heights, so
/// admissibility is decided pairwise.
struct RefCache<'a> {
    p: &'a PrunedSlopeTree,
    refs: HashMap<Tube, Vec<(Cube, u8)>>,
}

impl<'a> RefCache<'a> {
    fn new(p: &'a PrunedSlopeTree, tubes: impl IntoIterator<Item = Tube>) -> Self {
        let refs = tubes
            .into_iter()
            .map(|t| (t, reference_cubes(p, t.root, t.slope)))
            .collect();
        RefCache { p, refs }
    }

    fn get(&self, t: &Tube) -> Vec<(Cube, u8)> {
        self.refs
            .get(t)
            .cloned()
            .unwrap_or_else(|| reference_cubes(self.p, t.root, t.slope))
    }

    fn admissible(&self, tubes: &[Tube]) -> bool {
        let refs: Vec<Vec<(Cube, u8)>> = tubes.iter().map(|t| self.get(t)).collect();
        for i in 0..refs.len() {
            for k in i + 1..refs.len() {
                for (qa, ba) in &refs[i] {
                    if refs[k].iter().any(|(qb, bb)| qa == qb && ba != bb) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

fn root_cap(p: &PrunedSlopeTree) -> Result<()> {
    let size = p.grid.bpow(p.j);
    if size > QUAD_ROOT_CAP {
        return Err(Error::infeasible(format!(
            "|Q(J)| = {size} exceeds the tuple-scan cap {QUAD_ROOT_CAP}"
        )));
    }
    Ok(())
}

/// Anchored triple and quadruple enumeration over one instance and window,
/// memoizing the `E_2` collections it joins.
pub struct TupleEnumerator<'g> {
    geom: &'g TubeGeometry<'g>,
    window: Window,
    cap: u64,
    memo: HashMap<(Cube, Cube), Vec<[Tube; 2]>>,
}

impl<'g> TupleEnumerator<'g> {
    pub fn new(geom: &'g TubeGeometry<'g>, window: Window, cap: u64) -> Result<Self> {
        root_cap(geom.pruned)?;
        Ok(TupleEnumerator {
            geom,
            window,
            cap,
            memo: HashMap::new(),
        })
    }

    /// Members of `E_2[u, ω]` (no height precondition on the anchors).
    pub fn e2(&mut self, u: Cube, omega: Cube) -> Result<Vec<[Tube; 2]>> {
        if let Some(v) = self.memo.get(&(u, omega)) {
            return Ok(v.clone());
        }
        let v = if self.geom.pruned.split_vertex(omega).is_some() {
            scan_e2(self.geom, u, omega, &self.window, self.cap)?.0
        } else {
            Vec::new()
        };
        self.memo.insert((u, omega), v.clone());
        Ok(v)
    }

    /// Triples of a three-tube family, joined from the two `E_2`
    /// collections sharing the first tube.
    pub fn e3(&mut self, anchors: &Anchors) -> Result<Vec<[Tube; 3]>> {
        if anchors.arity() != 3 {
            return Err(Error::validation("enumerate_e3 takes E31 or E32 anchors"));
        }
        let p = self.geom.pruned;
        let pa = anchors.pair_anchors();
        let first = self.e2(pa[0].0, pa[0].1)?;
        let second = self.e2(pa[1].0, pa[1].1)?;
        let mut by_first: HashMap<Tube, Vec<Tube>> = HashMap::new();
        for pr in &second {
            by_first.entry(pr[0]).or_default().push(pr[1]);
        }
        let cache = RefCache::new(p, first.iter().chain(&second).flatten().copied());
        let mut out = Vec::new();
        for pr in &first {
            for &b in by_first.get(&pr[0]).map(|v| v.as_slice()).unwrap_or(&[]) {
                let tr = [pr[0], pr[1], b];
                if triple_anchors(p, &tr).as_ref() == Some(anchors) && cache.admissible(&tr) {
                    out.push(tr);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Quadruples of a four-tube family, joined from `E_2[u,ω] × E_2[u',ω']`.
    pub fn e4(&mut self, anchors: &Anchors) -> Result<Vec<[Tube; 4]>> {
        if anchors.arity() != 4 {
            return Err(Error::validation(
                "enumerate_e4 takes E41, E42 or E43 anchors",
            ));
        }
        let p = self.geom.pruned;
        let pa = anchors.pair_anchors();
        let first = self.e2(pa[0].0, pa[0].1)?;
        let second = self.e2(pa[1].0, pa[1].1)?;
        let cache = RefCache::new(p, first.iter().chain(&second).flatten().copied());
        let mut out = Vec::new();
        for a in &first {
            for b in &second {
                let q = [a[0], a[1], b[0], b[1]];
                if quad_anchors(p, &q).as_ref() == Some(anchors) && cache.admissible(&q) {
                    out.push(q);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Triples of a three-tube family (`E31` or `E32` anchors).
pub fn enumerate_e3(
    geom: &TubeGeometry<'_>,
    anchors: &Anchors,
    w: &Window,
    cap: u64,
) -> Result<Vec<[Tube; 3]>> {
    TupleEnumerator::new(geom, w.clone(), cap)?.e3(anchors)
}

/// Quadruples of a four-tube family (`E41`, `E42` or `E43` anchors).
pub fn enumerate_e4(
    geom: &TubeGeometry<'_>,
    anchors: &Anchors,
    w: &Window,
    cap: u64,
) -> Result<Vec<[Tube; 4]>> {
    TupleEnumerator::new(geom, w.clone(), cap)?.e4(anchors)
}

/// Every triple and quadruple built from all intersecting pairs, grouped by
/// anchors (the unrestricted scan the anchored enumerators are checked
/// against).
#[derive(Clone, Debug, Default)]
pub struct Census {
    pub pairs: Vec<[Tube; 2]>,
    pub e2: BTreeMap<Anchors, Vec<[Tube; 2]>>,
    pub e3: BTreeMap<Anchors, Vec<[Tube; 3]>>,
    pub e4: BTreeMap<Anchors, Vec<[Tube; 4]>>,
}

pub fn census(geom: &TubeGeometry<'_>, w: &Window, cap: u64) -> Result<Census> {
    let p = geom.pruned;
    root_cap(p)?;
    let pairs = all_pairs(geom, w, cap)?;
    if (pairs.len() as u128).pow(2) > cap as u128 {
        return Err(Error::infeasible(format!(
            "{} pairs exceed the quadratic join cap",
            pairs.len()
        )));
    }
    let mut e2: BTreeMap<Anchors, Vec<[Tube; 2]>> = BTreeMap::new();
    for pr in &pairs {
        let (u, omega) = pair_anchors(p, pr);
        e2.entry(Anchors::E2 { u, omega }).or_default().push(*pr);
    }
    let cache = RefCache::new(p, pairs.iter().flatten().copied());
    let quads: Vec<Vec<(Anchors, [Tube; 4])>> = pairs
        .par_iter()
        .map(|a| {
            let mut local = Vec::new();
            for b in &pairs {
                let q = [a[0], a[1], b[0], b[1]];
                if let Some(an) = quad_anchors(p, &q) {
                    if cache.admissible(&q) {
                        local.push((an, q));
                    }
                }
            }
            local
        })
        .collect();
    let mut e4: BTreeMap<Anchors, Vec<[Tube; 4]>> = BTreeMap::new();
    for r in quads {
        for (an, q) in r {
            e4.entry(an).or_default().push(q);
        }
    }
    let mut e3: BTreeMap<Anchors, Vec<[Tube; 3]>> = BTreeMap::new();
    for a in &pairs {
        for b in &pairs {
            if a[0] != b[0] {
                continue;
            }
            let tr = [a[0], a[1], b[1]];
            if let Some(an) = triple_anchors(p, &tr) {
                if cache.admissible(&tr) {
                    e3.entry(an).or_default().push(tr);
                }
            }
        }
    }
    for v in e3.values_mut() {
        v.sort_unstable();
    }
    for v in e4.values_mut() {
        v.sort_unstable();
    }
    Ok(Census { pairs, e2, e3, e4 })
}

// ---------------------------------------------------------------------------
// necessary conditions

/// Generous constant used in the boundary-distance conditions: any
/// intersecting pair has `|cen(t_2) − cen(t_1)| ≤ (4/3) C_1ϱρ_ω`.
pub fn distance_constant(w: &Window) -> BigRational {
    BigRational::from_integer(BigInt::from(4 * w.c1))
}

/// Generous constant for the cylinder conditions, `4d(1 + C_1ϱ)`.
pub fn cylinder_constant(d: u32, w: &Window) -> BigRational {
    (BigRational::one() + w.hi()) * BigInt::from(4 * d)
}

/// Distance from a cube `s ⊆ u` to the boundary of `u`.
pub fn inner_boundary_dist(g: &Grid, s: Cube, u: Cube) -> BigRational {
    let (cs, cu) = (g.corner(s), g.corner(u));
    let (ss, su) = (g.side(s.h), g.side(u.h));
    let mut best: Option<BigRational> = None;
    for i in 0..g.d as usize {
        let lo = &cs[i] - &cu[i];
        let hi = (&cu[i] + &su) - (&cs[i] + &ss);
        for x in [lo, hi] {
            if best.as_ref().is_none_or(|b| x < *b) {
                best = Some(x);
            }
        }
    }
    best.unwrap_or_else(BigRational::zero)
}

fn child_toward(g: &Grid, u: Cube, s: Cube) -> Cube {
    g.ancestor(s, u.h + 1)
}

/// `dist(s, bdry(u_*))`, `u_*` the child of `u` containing `s` (`0` if `s = u`).
fn dist_in_child(g: &Grid, s: Cube, u: Cube) -> BigRational {
    if s == u {
        BigRational::zero()
    } else {
        inner_boundary_dist(g, s, child_toward(g, u, s))
    }
}

/// `x² ≤ c² ϱ² r2`, i.e. `x ≤ cϱ√r2` for `x ≥ 0`.
fn within(x: &BigRational, c: &BigRational, w: &Window, r2: &BigRational) -> bool {
    x * x <= c * c * &w.at * &w.at * r2
}

fn sub(a: &[BigRational], b: &[BigRational]) -> Vec<BigRational> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[BigRational], b: &[BigRational]) -> BigRational {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `min_{x ∈ [lo, hi]} |a + x b|²`, exact.
fn min_dist2_on_segment(
    a: &[BigRational],
    b: &[BigRational],
    lo: &BigRational,
    hi: &BigRational,
) -> BigRational {
    let bb = dot(b, b);
    let x = if bb.is_zero() {
        lo.clone()
    } else {
        let x = -dot(a, b) / &bb;
        x.clamp(lo.clone(), hi.clone())
    };
    let v: Vec<BigRational> = a.iter().zip(b).map(|(ai, bi)| ai + &x * bi).collect();
    dot(&v, &v)
}

fn smaller(g: &Grid, a: Cube, b: Cube) -> Option<Cube> {
    if g.contains(a, b) {
        Some(b)
    } else if g.contains(b, a) {
        Some(a)
    } else {
        None
    }
}

/// Necessary conditions for membership that the geometry forces on the
/// anchors of a collection (scale compatibility for each pair, boundary
/// distances for the type 2 and type 3 families, the slab or cylinder
/// alternative for type 3). Returns the failures.
pub fn necessary_conditions(
    p: &PrunedSlopeTree,
    anchors: &Anchors,
    w: &Window,
) -> Result<Vec<String>> {
    let g = p.grid;
    let mut bad = Vec::new();
    for (_, omega) in anchors.pair_anchors() {
        if !scales_compatible(p, omega, w)? {
            bad.push(format!("2C1ϱρ_ω < M^-J at ω = {}", cube_label(omega)));
        }
    }
    let c = distance_constant(w);
    match *anchors {
        Anchors::E42 {
            u,
            u2,
            t,
            omega,
            omega2,
            ..
        } => {
            let (r, r2) = (rho2(p, omega)?, rho2(p, omega2)?);
            if !within(&dist_in_child(&g, t, u), &c, w, &r) {
                bad.push("dist(t, bdry(u*)) > Cϱρ_ω".into());
            }
            if g.contains(u2, t) && t != u2 && !within(&dist_in_child(&g, t, u2), &c, w, &r2) {
                bad.push("dist(t, bdry(u'*)) > Cϱρ_ω'".into());
            }
        }
        Anchors::E43 {
            u,
            s1,
            s2,
            omega,
            omega2,
            theta1,
            theta2,
        } => {
            let (r, r2) = (rho2(p, omega)?, rho2(p, omega2)?);
            let delta2 = r.clone().min(r2.clone());
            let sum = dist_in_child(&g, s1, u) + dist_in_child(&g, s2, u);
            if !within(&sum, &c, w, &delta2) {
                bad.push("Σ dist(s_i, bdry(u_i)) > CΔ".into());
            }
            let side1 = g.side(s1.h);
            // Δ ≤ M^{-h(s1)} compared in squares
            let small = &w.at * &w.at * &delta2 <= &side1 * &side1;
            let large = &w.at * &w.at * &delta2 >= &side1 * &side1;
            if small {
                let case1 = s1 == u
                    && g.contains(s1, s2)
                    && s2 != s1
                    && within(&dist_in_child(&g, s2, u), &c, w, &delta2);
                let disjoint = !nested(&g, s1, s2);
                let case2 = disjoint && {
                    let d2 = g.dist2(s1, s2);
                    d2 <= &c * &c * &w.at * &w.at * &delta2
                };
                if !(case1 || case2) {
                    bad.push(
                        "Δ small: s2 neither near a child boundary of s1 = u nor near s1".into(),
                    );
                }
            }
            if large {
                let cc = cylinder_constant(g.d, w);
                let bound2 = &cc * &cc * &side1 * &side1;
                let ds = sub(&g.center(s2), &g.center(s1));
                for (name, om) in [("ω", omega), ("ω'", omega2)] {
                    let (Some(a1), Some(a2)) = (smaller(&g, om, theta1), smaller(&g, om, theta2))
                    else {
                        bad.push(format!("{name} does not meet ϑ1 and ϑ2"));
                        continue;
                    };
                    let dir = sub(&g.center(a2), &g.center(a1));
                    if min_dist2_on_segment(&ds, &dir, &w.at, &w.hi()) > bound2 {
                        bad.push(format!("Δ large: cylinder condition fails for {name}"));
                    }
                }
            }
        }
        _ => {}
    }
    Ok(bad)
}

// ---------------------------------------------------------------------------
// bounds

fn mpow(p: &PrunedSlopeTree, e: f64) -> f64 {
    (p.grid.m as f64).powf(e)
}

/// Right-hand side of the size bound for a family, constant dropped.
pub fn collection_bound(p: &PrunedSlopeTree, anchors: &Anchors, w: &Window) -> Result<f64> {
    let at = ratio_to_f64(&w.at);
    let (n, d, j) = (p.n as f64, p.grid.d as f64, p.j as f64);
    let side = |c: Cube| mpow(p, -(c.h as f64));
    Ok(match *anchors {
        Anchors::E2 { u, omega } => {
            let r = at * rho(p, omega)?;
            r * r
                * 2f64.powf(2.0 * (n - nu(p, omega)? as f64))
                * mpow(p, -(d - 1.0) * u.h as f64 + (d + 1.0) * j)
        }
        Anchors::E41 {
            u,
            u2,
            omega,
            omega2,
            ..
        } => {
            let x = at * at * rho(p, omega)? * rho(p, omega2)?;
            let nus = (nu(p, omega)? + nu(p, omega2)?) as f64;
            x * x
                * 2f64.powf(4.0 * n - 2.0 * nus)
                * mpow(p, -(d - 1.0) * (u.h + u2.h) as f64 + 2.0 * (d + 1.0) * j)
        }
        Anchors::E42 {
            u2,
            t,
            omega,
            omega2,
            theta,
            ..
        } => {
            let (r, r2) = (rho(p, omega)?, rho(p, omega2)?);
            let m = slope_complexity(p, &[omega, omega2, theta])?.value as f64;
            let slopes = 2f64.powf(4.0 * n - m);
            let ct = (at * r).min(side(t));
            if p.grid.contains(t, u2) {
                at.powi(3)
                    * r2
                    * r2
                    * r
                    * ct
                    * slopes
                    * mpow(p, -(d - 1.0) * (t.h + u2.h) as f64 + 2.0 * (d + 1.0) * j)
            } else {
                let ct2 = (at * r2).min(side(t));
                at * at
                    * r
                    * r2
                    * slopes
                    * ct
                    * ct2
                    * mpow(p, -2.0 * (d - 1.0) * t.h as f64 + 2.0 * (d + 1.0) * j)
            }
        }
        Anchors::E43 {
            s1,
            s2,
            omega,
            omega2,
            theta1,
            theta2,
            ..
        } => {
            let (r, r2) = (at * rho(p, omega)?, at * rho(p, omega2)?);
            let m = slope_complexity(p, &[omega, omega2, theta1, theta2])?.value as f64;
            let f = |s: Cube| r.min(side(s)) * r2.min(side(s));
            2f64.powf(4.0 * n - m)
                * mpow(p, -2.0 * (d - 1.0) * s2.h as f64 + 2.0 * (d + 1.0) * j)
                * f(s1)
                * f(s2)
        }
        Anchors::E31 {
            u,
            u2,
            omega,
            omega2,
        } => {
            let (r, r2) = (rho(p, omega)?, rho(p, omega2)?);
            let delta = at * r.min(r2);
            let mh = slope_complexity_hat(p, &[omega, omega2])?.value as f64;
            delta
                * at
                * at
                * r
                * r2
                * 2f64.powf(3.0 * n - mh)
                * mpow(p, -(d - 1.0) * (u.h + u2.h) as f64 + (2.0 * d + 1.0) * j)
        }
        Anchors::E32 {
            t,
            omega,
            omega2,
            theta,
            ..
        } => {
            let (r, r2) = (at * rho(p, omega)?, at * rho(p, omega2)?);
            let mh = slope_complexity_hat(p, &[omega, omega2, theta])?.value as f64;
            r.min(r2)
                * r.min(side(t))
                * r2.min(side(t))
                * 2f64.powf(3.0 * n - mh)
                * mpow(p, -2.0 * (d - 1.0) * t.h as f64 + (2.0 * d + 1.0) * j)
        }
    })
}

/// One line of a diagnostic table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub family: String,
    pub anchor: String,
    pub count: usize,
    pub bound: f64,
    pub ratio: f64,
    /// anchor relations that fail, `;`-separated
    pub relations: String,
    /// necessary conditions that fail, `;`-separated
    pub violations: String,
}

pub fn diagnostic_row(
    p: &PrunedSlopeTree,
    anchors: &Anchors,
    w: &Window,
    count: usize,
) -> Result<DiagnosticRow> {
    let bound = collection_bound(p, anchors, w)?;
    let spec = TupleCollectionSpec {
        anchors: *anchors,
        window: w.clone(),
    };
    let violations = if count > 0 {
        necessary_conditions(p, anchors, w)?
    } else {
        Vec::new()
    };
    Ok(DiagnosticRow {
        family: anchors.family().to_string(),
        anchor: anchors.label(),
        count,
        bound,
        ratio: count as f64 / bound,
        relations: spec.relations(p).join(";"),
        violations: violations.join(";"),
    })
}

/// Diagnostic rows for every nonempty collection of a census.
pub fn census_rows(p: &PrunedSlopeTree, c: &Census, w: &Window) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    for (a, v) in &c.e2 {
        rows.push(diagnostic_row(p, a, w, v.len())?);
    }
    for (a, v) in &c.e3 {
        rows.push(diagnostic_row(p, a, w, v.len())?);
    }
    for (a, v) in &c.e4 {
        rows.push(diagnostic_row(p, a, w, v.len())?);
    }
    Ok(rows)
}

/// Largest count/bound ratio per family among rows whose anchors satisfy
/// the required relations.
pub fn fitted_constants(rows: &[DiagnosticRow]) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for r in rows
        .iter()
        .filter(|r| r.relations.is_empty() && r.bound > 0.0)
    {
        let e = out.entry(r.family.clone()).or_insert(0.0);
        *e = e.max(r.ratio);
    }
    out
}

// ---------------------------------------------------------------------------
// sums over vertices

/// One evaluated sum against its bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumRow {
    /// `splitting`, `splitting-height`, `root`, `root-slab-plus`, `root-slab-minus`
    pub sum: String,
    pub case: String,
    pub params: String,
    pub terms: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SummationReport {
    pub rows: Vec<SumRow>,
    /// `(ϖ_0, Σ 2^{-ν(ϖ)}, N 2^{-ν(ϖ_0)})` exactly, for every splitting `ϖ_0`
    #[serde(skip)]
    pub alpha_one: Vec<(Cube, BigRational, BigRational)>,
}

fn pow2(e: i64) -> BigRational {
    qpow(2, e)
}

fn row(
    sum: &str,
    case: &str,
    params: String,
    terms: usize,
    lhs: &BigRational,
    rhs: &BigRational,
) -> SumRow {
    let (l, r) = (ratio_to_f64(lhs), ratio_to_f64(rhs));
    SumRow {
        sum: sum.into(),
        case: case.into(),
        params,
        terms,
        lhs: l,
        rhs: r,
        ratio: if rhs.is_zero() {
            f64::INFINITY
        } else {
            ratio_to_f64(&(lhs / rhs))
        },
    }
}

/// Exact sums over splitting vertices below `ϖ_0` and over root-tree
/// vertices weighted by `2^{μ(ϖ, h(z))}`, each with its bound.
pub fn summation_diagnostics(p: &PrunedSlopeTree) -> SummationReport {
    let mut rep = SummationReport::default();
    let g = p.grid;
    let (m, d) = (g.m as i64, g.d as i64);
    let n = p.n as i64;
    for w0 in &p.splitting {
        let below: Vec<_> = p
            .splitting
            .iter()
            .filter(|s| g.contains(w0.cube, s.cube))
            .collect();
        let nu0 = w0.index as i64;
        let label = cube_label(w0.cube);
        for alpha in [2i64, 1, 0] {
            let lhs: BigRational = below.iter().map(|s| pow2(-alpha * s.index as i64)).sum();
            let (case, rhs) = match alpha.cmp(&1) {
                std::cmp::Ordering::Greater => ("alpha>1", pow2(-alpha * nu0)),
                std::cmp::Ordering::Equal => ("alpha=1", qpow(2, -nu0) * BigInt::from(n)),
                std::cmp::Ordering::Less => ("alpha<1", pow2(-alpha * nu0 + n * (1 - alpha))),
            };
            if alpha == 1 {
                rep.alpha_one.push((w0.cube, lhs.clone(), rhs.clone()));
            }
            rep.rows.push(row(
                "splitting",
                case,
                format!("ϖ0={label},α={alpha}"),
                below.len(),
                &lhs,
                &rhs,
            ));
        }
        for alpha in [1i64, 2] {
            for beta in [1i64, 2] {
                let lhs: BigRational = below
                    .iter()
                    .map(|s| qpow(m, -beta * s.cube.h as i64) * pow2(-alpha * s.index as i64))
                    .sum();
                let rhs = qpow(m, -beta * w0.cube.h as i64) * pow2(-alpha * nu0);
                rep.rows.push(row(
                    "splitting-height",
                    "alpha>=1,beta>0",
                    format!("ϖ0={label},α={alpha},β={beta}"),
                    below.len(),
                    &lhs,
                    &rhs,
                ));
            }
        }
    }
    // smallest integer β with 2M^d < M^β
    let beta_geo = (d + 1..)
        .find(|&b| 2 * m.pow(d as u32) < m.pow(b as u32))
        .unwrap();
    let mut betas = vec![(d - 1, "beta<d"), (d, "beta=d"), (d + 1, "beta>d")];
    betas.push((beta_geo, "2M^d<M^beta"));
    for w in &p.splitting {
        let hw = w.cube.h as i64;
        let nuw = w.index as i64;
        for hy in 0..=hw {
            for &(beta, case) in &betas {
                let mut lhs = BigRational::zero();
                for k in hy..=hw {
                    let count = qpow(m, d * (k - hy));
                    lhs += count * qpow(m, -beta * k) * pow2(mu(p, w.cube, k as u32) as i64);
                }
                let rhs = match case {
                    "beta<d" => pow2(nuw) * qpow(m, (d - beta) * hw - d * hy),
                    "beta=d" => pow2(nuw) * BigInt::from(hw.max(1)) * qpow(m, -d * hy),
                    "beta>d" => pow2(nuw) * qpow(m, -beta * hy),
                    _ => qpow(m, -d * hy),
                };
                let label = format!("ϖ={},h(y)={hy},β={beta}", cube_label(w.cube));
                rep.rows
                    .push(row("root", case, label, (hw - hy + 1) as usize, &lhs, &rhs));
            }
        }
    }
    if d >= 2 {
        slab_sums(p, &mut rep);
    }
    rep
}

/// Sums over root cubes meeting an axis-parallel box `R` with `d − r` sides
/// `M^{-a}` and `r` sides `M^{-b}` (`a ≤ b`), split at the scale `M^{-b}`.
fn slab_sums(p: &PrunedSlopeTree, rep: &mut SummationReport) {
    let g = p.grid;
    let (m, d) = (g.m as i64, g.d as i64);
    let j = p.j as i64;
    for w in &p.splitting {
        let hw = w.cube.h as i64;
        let nuw = w.index as i64;
        for r in 1..d {
            for a in 0..=1i64.min(j) {
                for b in a..=(a + 2).min(j) {
                    for e in 0..=hw {
                        // cubes of height k meeting R: M^{k-a} (or 1) per long side, M^{k-b} (or 1) per short side
                        let meets = |k: i64| {
                            let long = if k >= a {
                                qpow(m, (k - a) * (d - r))
                            } else {
                                BigRational::one()
                            };
                            let short = if k >= b {
                                qpow(m, (k - b) * r)
                            } else {
                                BigRational::one()
                            };
                            long * short
                        };
                        for (alpha, which) in [(d - r + 1, "plus"), (d + 1, "minus")] {
                            let mut lhs = BigRational::zero();
                            let mut terms = 0;
                            for k in e..=hw {
                                let in_range = if which == "plus" { k <= b } else { k >= b };
                                if !in_range {
                                    continue;
                                }
                                terms += 1;
                                lhs += meets(k)
                                    * qpow(m, -alpha * k)
                                    * pow2(mu(p, w.cube, k as u32) as i64);
                            }
                            if which == "plus" && e > b {
                                continue;
                            }
                            let rhs = if which == "plus" {
                                pow2(nuw) * qpow(m, -a * (d - r)) * qpow(m, -e * (alpha - d + r))
                            } else {
                                pow2(nuw)
                                    * qpow(m, -a * (d - r))
                                    * qpow(m, -b * r)
                                    * qpow(m, -e.max(b) * (alpha - d))
                            };
                            let params = format!(
                                "ϖ={},r={r},a={a},b={b},e={e},α={alpha}",
                                cube_label(w.cube)
                            );
                            rep.rows.push(row(
                                &format!("root-slab-{which}"),
                                which,
                                params,
                                terms,
                                &lhs,
                                &rhs,
                            ));
                        }
                    }
                }
            }
        }
    }
}

/// Largest ratio per `(sum, case)` among rows with at least one term.
pub fn summation_constants(rep: &SummationReport) -> BTreeMap<(String, String), f64> {
    let mut out: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in rep.rows.iter().filter(|r| r.terms > 0) {
        let e = out.entry((r.sum.clone(), r.case.clone())).or_insert(0.0);
        *e = e.max(r.ratio);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::madic_tree::MadicTree;
    use crate::scalar::q;
    use crate::sticky::{tiny_adjacent_instance, tiny_instance};

    fn line_instance(m: u32, nums: &[i64], den: i64, j: u32) -> PrunedSlopeTree {
        let pts: Vec<Vec<BigRational>> = nums.iter().map(|&k| vec![q(k, den)]).collect();
        PrunedSlopeTree::from_slopes(&pts, m, 1, j).unwrap()
    }

    /// `d = 1`, `M = 3`, `N = 2`, `J = 4`.
    fn ternary_instance() -> PrunedSlopeTree {
        line_instance(3, &[0, 2, 6, 8], 9, 4)
    }

    fn cantor_pruned(n: u32) -> PrunedSlopeTree {
        let depth = 4 * n as usize + 4;
        let t = MadicTree::from_rules(
            Grid::new(3, 1).unwrap(),
            vec![vec![0, 2]; depth],
            depth as u32,
        )
        .unwrap();
        PrunedSlopeTree::prune(&t, n, 1).unwrap()
    }

    fn root_vertices(p: &PrunedSlopeTree) -> Vec<Cube> {
        let g = p.grid;
        (0..=p.j)
            .flat_map(|h| (0..g.bpow(h)).map(move |a| Cube { h, a }))
            .collect()
    }

    #[test]
    fn empty_when_scales_incompatible() {
        let p = ternary_instance();
        let geom = TubeGeometry::new(&p, 1).unwrap();
        let omega = p.gamma1().cube;
        // ρ ≤ 1 and ϱ = 3^-6, C1 = 3: 2·3·3^-6 < 3^-4
        let w = Window::scale(3, 6, 3);
        assert!(!scales_compatible(&p, omega, &w).unwrap());
        assert!(enumerate_e2(&geom, Cube::ROOT, omega, &w, DEFAULT_PAIR_CAP)
            .unwrap()
            .is_empty());
        assert!(
            e2_bruteforce(&geom, Cube::ROOT, omega, &w, DEFAULT_PAIR_CAP)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn restricted_scan_equals_bruteforce() {
        for p in [
            ternary_instance(),
            tiny_adjacent_instance(),
            tiny_instance(),
        ] {
            let geom = TubeGeometry::new(&p, 1).unwrap();
            let m = p.grid.m;
            let mut total = 0;
            for r in 0..=3 {
                let w = Window::scale(m, r, m);
                for s in &p.splitting {
                    for u in root_vertices(&p).into_iter().filter(|u| u.h <= s.cube.h) {
                        let fast = enumerate_e2(&geom, u, s.cube, &w, DEFAULT_PAIR_CAP).unwrap();
                        let slow = e2_bruteforce(&geom, u, s.cube, &w, DEFAULT_PAIR_CAP).unwrap();
                        assert_eq!(fast, slow, "u={u:?} ω={:?} r={r}", s.cube);
                        total += fast.len();
                    }
                }
            }
            assert!(total > 0);
        }
    }

    #[test]
    fn scale_condition_is_necessary() {
        let p = ternary_instance();
        let geom = TubeGeometry::new(&p, 1).unwrap();
        for r in 0..=5 {
            let w = Window::scale(3, r, 3);
            for pr in all_pairs(&geom, &w, DEFAULT_PAIR_CAP).unwrap() {
                let (_, omega) = pair_anchors(&p, &pr);
                assert!(scales_compatible(&p, omega, &w).unwrap());
            }
        }
    }

    #[test]
    fn slice_and_projection_diagnostics() {
        let p = ternary_instance();
        let geom = TubeGeometry::new(&p, 1).unwrap();
        let w = Window::scale(3, 1, 3);
        let omega = p.gamma1().cube;
        let pairs = enumerate_e2(&geom, Cube::ROOT, omega, &w, DEFAULT_PAIR_CAP).unwrap();
        let diag = e2_diagnostics(&p, Cube::ROOT, omega, &w, &pairs).unwrap();
        assert!(diag.count > 0);
        assert!(diag.max_slice >= 1 && diag.max_slice as f64 <= 4.0 * diag.slice_bound + 1.0);
        assert!(diag.projection <= 81);
        assert!(diag.ratio.is_finite() && diag.ratio > 0.0);
    }

    #[test]
    fn m_of_a_repeated_vertex() {
        let p = cantor_pruned(3);
        for s in &p.splitting {
            let c = slope_complexity(&p, &[s.cube, s.cube, s.cube]).unwrap();
            assert_eq!(c.value, 4 * s.index);
            assert!(c.nested);
            assert_eq!(c.pattern, "aaa");
        }
    }

    #[test]
    fn m_cases() {
        let p = cantor_pruned(3);
        let g1 = p.gamma1().clone();
        let l2 = p.level(2);
        let (a, b) = (l2[0].cube, l2[1].cube);
        // disjoint ϖ2, ϖ3 below ϖ1
        let c = slope_complexity(&p, &[a, b, g1.cube]).unwrap();
        assert_eq!(c.ordered, vec![g1.cube, a, b]);
        assert!(!c.nested);
        assert_eq!(c.value, 2 * (2 + 2));
        // a chain
        let deep = p
            .level(3)
            .into_iter()
            .find(|s| p.grid.contains(a, s.cube))
            .unwrap()
            .cube;
        let c = slope_complexity(&p, &[deep, g1.cube, a]).unwrap();
        assert_eq!(c.ordered, vec![g1.cube, a, deep]);
        assert_eq!(c.value, 2 * 3 + 2 + 1);
        // m̂
        let h = slope_complexity(&p, &[a, g1.cube]).unwrap();
        assert_eq!(h.kind, ComplexityKind::MHat);
        assert_eq!(h.value, 2 * 2 + 1);
        assert!(slope_complexity(&p, &[a, b]).is_err());
        // four vertices, three distinct
        let c4 = slope_complexity(&p, &[g1.cube, a, a, b]).unwrap();
        assert_eq!(c4.pattern, "abbc");
        assert_eq!(c4.value, 8);
        let other = p
            .level(3)
            .into_iter()
            .find(|s| p.grid.contains(b, s.cube))
            .unwrap()
            .cube;
        assert!(slope_complexity(&p, &[g1.cube, a, b, other]).is_err());
    }

    #[test]
    fn slope_quadruple_counts_are_bounded() {
        let mut maxima = Vec::new();
        for n in 2..=4 {
            let p = cantor_pruned(n);
            let rows = slope_quadruple_counts(&p).unwrap();
            assert!(!rows.is_empty());
            let max = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
            maxima.push(max);
        }
        // the count is a product of per-child slope counts: the fitted
        // constant is a power of two and does not depend on N
        assert!(maxima.iter().all(|&x| x == maxima[0]), "{maxima:?}");
        assert_eq!(maxima[0], 4.0);
    }

    #[test]
    fn slope_triple_counts_exceed_by_exactly_two() {
        for n in 1..=4 {
            let p = cantor_pruned(n.max(1));
            let rows = slope_triple_counts(&p).unwrap();
            assert!(!rows.is_empty());
            for r in &rows {
                // ordered triples: 2^{N-ν_2+1} · 2^{N-ν_2} · 2^{N-ν_1} (or the
                // same count when ϖ_1 = ϖ_2)
                assert_eq!(r.ratio, 2.0, "{r:?}");
            }
        }
    }

    #[test]
    fn anchored_tuples_match_census() {
        for (p, r) in [(tiny_adjacent_instance(), 0), (ternary_instance(), 3)] {
            let geom = TubeGeometry::new(&p, 1).unwrap();
            let w = Window::scale(p.grid.m, r, p.grid.m);
            let c = census(&geom, &w, DEFAULT_PAIR_CAP).unwrap();
            assert!(!c.e4.is_empty() && !c.e3.is_empty());
            let mut en = TupleEnumerator::new(&geom, w.clone(), DEFAULT_PAIR_CAP).unwrap();
            for (a, v) in &c.e4 {
                assert_eq!(&en.e4(a).unwrap(), v, "{}", a.label());
            }
            for (a, v) in &c.e3 {
                assert_eq!(&en.e3(a).unwrap(), v, "{}", a.label());
            }
        }
    }

    #[test]
    fn type_one_quadruples_are_pairs_of_pairs() {
        let p = ternary_instance();
        let geom = TubeGeometry::new(&p, 1).unwrap();
        let w = Window::scale(3, 3, 3);
        let c = census(&geom, &w, DEFAULT_PAIR_CAP).unwrap();
        let mut seen = 0;
        for (a, quads) in c.e4.iter().filter(|(a, _)| a.family() == "E41") {
            let Anchors::E41 {
                u,
                u2,
                omega,
                omega2,
                ..
            } = *a
            else {
                unreachable!()
            };
            let e2a: HashSet<[Tube; 2]> = scan_e2(&geom, u, omega, &w, DEFAULT_PAIR_CAP)
                .unwrap()
                .0
                .into_iter()
                .collect();
            let e2b: HashSet<[Tube; 2]> = scan_e2(&geom, u2, omega2, &w, DEFAULT_PAIR_CAP)
                .unwrap()
                .0
                .into_iter()
                .collect();
            for q in quads {
                assert!(e2a.contains(&[q[0], q[1]]) && e2b.contains(&[q[2], q[3]]));
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn necessary_conditions_hold_on_adjacent_instance() {
        let p = tiny_adjacent_instance();
        let geom = TubeGeometry::new(&p, 1).unwrap();
        for r in 0..=2 {
            let w = Window::scale(3, r, 3);
            let c = census(&geom, &w, DEFAULT_PAIR_CAP).unwrap();
            let rows = census_rows(&p, &c, &w).unwrap();
            for row in &rows {
                assert!(row.violations.is_empty(), "{row:?}");
            }
        }
    }

    #[test]
    fn far_anchors_are_empty() {
        // s1 and s2 deep inside their children of u, far from every boundary
        let p = ternary_instance();
        let geom = TubeGeometry::new(&p, 1).unwrap();
        let w = Window::scale(3, 4, 3);
        let g = p.grid;
        let u = Cube::ROOT;
        let s1 = g.from_digits(&[0, 1]);
        let s2 = g.from_digits(&[2, 1]);
        let omega = p.gamma1().cube;
        let anchors = Anchors::E43 {
            u,
            s1,
            s2,
            omega,
            omega2: omega,
            theta1: omega,
            theta2: omega,
        };
        let bad = necessary_conditions(&p, &anchors, &w).unwrap();
        assert!(bad.iter().any(|b| b.starts_with("Σ dist")), "{bad:?}");
        assert!(enumerate_e4(&geom, &anchors, &w, DEFAULT_PAIR_CAP)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn alpha_one_sum_is_exact() {
        for n in 1..=5 {
            let p = cantor_pruned(n);
            let rep = summation_diagnostics(&p);
            assert_eq!(rep.alpha_one.len(), p.splitting.len());
            for (c, lhs, rhs) in &rep.alpha_one {
                assert!(lhs <= rhs);
                if *c == p.gamma1().cube {
                    assert_eq!(lhs, rhs);
                }
            }
        }
    }

    #[test]
    fn single_split_sums_have_one_term() {
        let p = line_instance(2, &[0, 1], 2, 3);
        assert_eq!(p.n, 1);
        let rep = summation_diagnostics(&p);
        for r in rep.rows.iter().filter(|r| r.sum.starts_with("splitting")) {
            assert_eq!(r.terms, 1);
        }
    }

    #[test]
    fn sum_ratios_stay_bounded() {
        let mut per_n = Vec::new();
        for n in 2..=5 {
            let rep = summation_diagnostics(&cantor_pruned(n));
            per_n.push(summation_constants(&rep));
        }
        for key in per_n[0].keys() {
            let vals: Vec<f64> = per_n.iter().map(|m| m[key]).collect();
            assert!(vals.iter().all(|v| v.is_finite()), "{key:?} {vals:?}");
        }
        // the α > 1 and β > 0 cases are geometric series
        for m in &per_n {
            assert!(m[&("splitting".to_string(), "alpha>1".to_string())] <= 2.0);
            assert!(
                m[&(
                    "splitting-height".to_string(),
                    "alpha>=1,beta>0".to_string()
                )] <= 4.0
            );
        }
    }

    #[test]
    fn slab_sums_in_the_plane() {
        let pts: Vec<Vec<BigRational>> = [0, 1, 2, 3]
            .iter()
            .map(|&x| vec![q(x, 4), q(x, 4)])
            .collect();
        let p = PrunedSlopeTree::from_slopes(&pts, 2, 1, 2).unwrap();
        let rep = summation_diagnostics(&p);
        let plus = rep
            .rows
            .iter()
            .filter(|r| r.sum == "root-slab-plus")
            .count();
        let minus = rep
            .rows
            .iter()
            .filter(|r| r.sum == "root-slab-minus")
            .count();
        assert!(plus > 0 && minus > 0);
        assert!(rep.rows.iter().all(|r| r.lhs >= 0.0 && r.rhs > 0.0));
    }

    #[test]
    fn rows_serialize() {
        let p = ternary_instance();
        let w = Window::scale(3, 0, 3);
        let a = Anchors::E2 {
            u: Cube::ROOT,
            omega: p.gamma1().cube,
        };
        let row = diagnostic_row(&p, &a, &w, 3).unwrap();
        let s = serde_json::to_string(&row).unwrap();
        assert!(s.contains("\"family\":\"E2\""));
        let spec = TupleCollectionSpec {
            anchors: a,
            window: w,
        };
        let back: TupleCollectionSpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
