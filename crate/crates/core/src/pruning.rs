//! Extraction of a binary, Euclidean-separated subset `Ω_N` of a slope set and
//! the bookkeeping attached to its tree: splitting vertices by index, first
//! splitting heights, basic slope cubes and the isomorphism `Ψ` with the full
//! binary tree.
//!
//! Binary strings are stored as cubes of the dyadic grid `(M, d) = (2, 1)`: a
//! string of length `j` is the cube of height `j` whose address is the string
//! read as a base-2 number, most significant bit first.

use std::collections::{BTreeSet, HashMap};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::madic_tree::{encode_set, Cube, Grid, MadicTree};
use crate::scalar::{fmt_rational, ratio_to_f64};

/// The binary grid on which bit strings live.
pub const BINARY: Grid = Grid { m: 2, d: 1 };

/// A splitting vertex of the pruned tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitVertex {
    pub cube: Cube,
    /// splitting index: number of splitting vertices on its ray up to and including itself
    pub index: u32,
    /// height of the first splitting vertex of the next index below it (`J` for the last index)
    pub lambda: u32,
    /// its two children, older (lexicographically smaller) first
    pub children: [Cube; 2],
    /// first splitting descendant (or leaf) under each child
    pub first_split: [Cube; 2],
    /// the two basic slope cubes: descendants of the children at height `lambda`
    pub basic: [Cube; 2],
}

/// Output of the pruning: the slope set `Ω_N` with its tree bookkeeping.
#[derive(Clone, Debug)]
pub struct PrunedSlopeTree {
    pub grid: Grid,
    pub n: u32,
    pub c0: u32,
    /// truncation height `J`
    pub j: u32,
    /// `Ω_N`, sorted by leaf address
    pub slopes: Vec<Vec<BigRational>>,
    /// leaf cubes of height `J`, parallel to `slopes`
    pub leaves: Vec<Cube>,
    pub tree: MadicTree,
    pub splitting: Vec<SplitVertex>,
    by_cube: HashMap<Cube, usize>,
    /// `levels[j]` lists the splitting vertices of index `j` (entry 0 unused)
    levels: Vec<Vec<usize>>,
    psi: HashMap<Cube, Cube>,
    psi_inv: HashMap<Cube, Cube>,
}

fn cube_dist2_units(grid: &Grid, u: Cube, v: Cube) -> u128 {
    // same-height cubes: squared gap in units of the side length
    let (a, b) = (grid.coords(u), grid.coords(v));
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let g = x.abs_diff(y).saturating_sub(1);
            g * g
        })
        .sum()
}

fn point_dist2(a: &[BigRational], b: &[BigRational]) -> BigRational {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn m_pow_neg2(m: u32, h: u32) -> BigRational {
    BigRational::new(BigInt::one(), BigInt::from(m).pow(2 * h))
}

/// `(2 C_0 + 1)^d`.
pub fn neighbour_count(c0: u32, d: u32) -> u32 {
    (2 * c0 + 1).pow(d)
}

/// Children of `v` in the lazily described subtree in which every ray below
/// a vertex tagged `r` splits at least `r` times.
fn guaranteed_children(tree: &MadicTree, v: Cube, r: u32) -> Vec<(Cube, u32)> {
    let ch = tree.children(v);
    if r == 0 {
        return ch.first().map(|&c| vec![(c, 0)]).unwrap_or_default();
    }
    let rich: Vec<Cube> = ch
        .iter()
        .copied()
        .filter(|&c| tree.split_of(c) >= r - 1)
        .collect();
    if rich.len() >= 2 {
        rich.into_iter().map(|c| (c, r - 1)).collect()
    } else {
        let c = ch
            .into_iter()
            .find(|&c| tree.split_of(c) >= r)
            .expect("a vertex of split >= r with one rich child has a child of split >= r");
        vec![(c, r)]
    }
}

/// Result of one separation step below a vertex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeparatedPair {
    /// height of the pair
    pub k: u32,
    pub v1: Cube,
    pub v2: Cube,
    /// split guarantees carried by `v1`, `v2` in the pruned subtree
    pub tags: [u32; 2],
}

/// One separation step: descend from `root` (whose subtree has every ray
/// splitting at least `needed` times) to the first height with more than
/// `(2C_0+1)^d` vertices and return a pair there at distance `>= C_0 M^{-k}`.
///
/// Among qualifying pairs the lexicographically least pair of maximal
/// separation is returned.
pub fn find_separated_pair(
    tree: &MadicTree,
    root: Cube,
    needed: u32,
    c0: u32,
) -> Result<SeparatedPair> {
    let grid = tree.grid;
    let cap = neighbour_count(c0, grid.d);
    if needed < cap {
        return Err(Error::infeasible(format!(
            "split guarantee {needed} below (2C0+1)^d = {cap}"
        )));
    }
    let have = tree.split_of(root);
    if have < needed {
        return Err(Error::infeasible(format!(
            "vertex splits only {have} times, {needed} required"
        )));
    }
    let mut level = vec![(root, needed)];
    while level.len() as u32 <= cap {
        let mut next = Vec::new();
        for &(v, r) in &level {
            next.extend(guaranteed_children(tree, v, r));
        }
        if next.is_empty() {
            return Err(Error::infeasible(
                "subtree exhausted before reaching enough vertices",
            ));
        }
        level = next;
    }
    let k = level[0].0.h;
    let mut best: Option<(u128, usize, usize)> = None;
    for i in 0..level.len() {
        for j in i + 1..level.len() {
            let dd = cube_dist2_units(&grid, level[i].0, level[j].0);
            if best.is_none_or(|(b, _, _)| dd > b) {
                best = Some((dd, i, j));
            }
        }
    }
    let (dd, i, j) = best.expect("at least two vertices");
    if dd < (c0 as u128).pow(2) {
        return Err(Error::infeasible("no pair at the required separation"));
    }
    Ok(SeparatedPair {
        k,
        v1: level[i].0,
        v2: level[j].0,
        tags: [level[i].1, level[j].1],
    })
}

impl PrunedSlopeTree {
    /// Runs the pruning on `tree` and returns `Ω_N` with its bookkeeping.
    pub fn prune(tree: &MadicTree, n: u32, c0: u32) -> Result<Self> {
        if n == 0 || c0 == 0 {
            return Err(Error::validation("N and C0 must be positive"));
        }
        let grid = tree.grid;
        let cap = neighbour_count(c0, grid.d);
        let need = (n + 1) * cap;
        let have = tree.splitting_number();
        if have <= need {
            return Err(Error::infeasible(format!(
                "split(T) = {have} but more than (N+1)(2C0+1)^d = {need} is required"
            )));
        }
        // the subtree is anchored at the root with tag (N+1)(2C0+1)^d
        let mut frontier = vec![(Cube::ROOT, need)];
        for _ in 0..n {
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for &(w, r) in &frontier {
                let pair = find_separated_pair(tree, w, r, c0)?;
                next.push((pair.v1, pair.tags[0]));
                next.push((pair.v2, pair.tags[1]));
            }
            frontier = next;
        }
        let mut slopes = Vec::with_capacity(frontier.len());
        for &(w, _) in &frontier {
            slopes.push(tree.min_point(w).expect("nonempty vertex has a point"));
        }
        let sep = crate::madic_tree::separating_height(&slopes, grid.m)?;
        let top_split = frontier.iter().map(|(w, _)| w.h).max().unwrap_or(0);
        let j = minimal_height_for_gap(&slopes, grid.m, c0)?
            .max(sep)
            .max(top_split)
            .max(n);
        Self::from_slopes(&slopes, grid.m, c0, j)
    }

    /// Bookkeeping for an explicit slope set that already has the binary
    /// splitting structure; `j` is the truncation height.
    pub fn from_slopes(slopes: &[Vec<BigRational>], m: u32, c0: u32, j: u32) -> Result<Self> {
        let tree = encode_set(slopes, m, j)?;
        let grid = tree.grid;
        let leaves = tree.level(j, 1 << 24)?;
        let count = leaves.len();
        if count < 2 || !count.is_power_of_two() || count != slopes.len() {
            return Err(Error::validation(format!(
                "{} slopes in {count} leaf cubes: need 2^N distinct leaves",
                slopes.len()
            )));
        }
        let n = count.trailing_zeros();
        let mut reps: Vec<Vec<BigRational>> = Vec::with_capacity(count);
        for &leaf in &leaves {
            reps.push(tree.min_point(leaf).unwrap());
        }

        let first_split_below = |mut c: Cube| -> Cube {
            loop {
                let ch = tree.children(c);
                if ch.len() == 1 {
                    c = ch[0];
                } else {
                    return c;
                }
            }
        };

        let mut splitting = Vec::new();
        let mut by_cube = HashMap::new();
        let mut levels = vec![Vec::new(); n as usize + 1];
        let mut stack = vec![(first_split_below(Cube::ROOT), 1u32)];
        while let Some((g, idx)) = stack.pop() {
            let ch = tree.children(g);
            if ch.len() != 2 {
                return Err(Error::validation(format!(
                    "splitting vertex at height {} has {} children",
                    g.h,
                    ch.len()
                )));
            }
            if idx > n {
                return Err(Error::validation("a ray splits more than N times"));
            }
            let fs = [first_split_below(ch[0]), first_split_below(ch[1])];
            let lambda = fs[0].h.min(fs[1].h);
            let basic = [grid.ancestor(fs[0], lambda), grid.ancestor(fs[1], lambda)];
            for &f in &fs {
                if f.h < j {
                    stack.push((f, idx + 1));
                } else if idx != n {
                    return Err(Error::validation("a ray splits fewer than N times"));
                }
            }
            by_cube.insert(g, splitting.len());
            levels[idx as usize].push(splitting.len());
            splitting.push(SplitVertex {
                cube: g,
                index: idx,
                lambda,
                children: [ch[0], ch[1]],
                first_split: fs,
                basic,
            });
        }
        for l in levels.iter_mut() {
            l.sort_by_key(|&i| splitting[i].cube);
        }

        let mut out = PrunedSlopeTree {
            grid,
            n,
            c0,
            j,
            slopes: reps,
            leaves,
            tree,
            splitting,
            by_cube,
            levels,
            psi: HashMap::new(),
            psi_inv: HashMap::new(),
        };
        out.build_psi();
        Ok(out)
    }

    fn build_psi(&mut self) {
        let g1 = self.levels[1][0];
        let root = self.splitting[g1].cube;
        self.psi.insert(Cube::ROOT, root);
        // (binary vertex, splitting vertex identified by its image)
        let mut frontier = vec![(Cube::ROOT, g1)];
        for len in 1..=self.n {
            let mut next = Vec::new();
            for &(b, gi) in &frontier {
                let g = self.splitting[gi].clone();
                for bit in 0..2u32 {
                    let theta = g.basic[bit as usize];
                    let bb = BINARY.child(b, bit);
                    self.psi.insert(bb, theta);
                    if len < self.n {
                        let f = g.first_split[bit as usize];
                        next.push((bb, self.by_cube[&f]));
                    }
                }
            }
            frontier = next;
        }
        self.psi_inv = self.psi.iter().map(|(&b, &c)| (c, b)).collect();
    }

    pub fn len(&self) -> usize {
        self.slopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slopes.is_empty()
    }

    /// The unique splitting vertex of index 1.
    pub fn gamma1(&self) -> &SplitVertex {
        &self.splitting[self.levels[1][0]]
    }

    /// Splitting vertices of index `j` (`1..=N`), in lexicographic order.
    pub fn level(&self, j: u32) -> Vec<&SplitVertex> {
        self.levels[j as usize]
            .iter()
            .map(|&i| &self.splitting[i])
            .collect()
    }

    pub fn split_vertex(&self, c: Cube) -> Option<&SplitVertex> {
        self.by_cube.get(&c).map(|&i| &self.splitting[i])
    }

    /// Basic slope cubes of index `j` (`H_0 = {γ_1}`, `H_N` the leaves).
    pub fn basic_cubes(&self, j: u32) -> Vec<Cube> {
        if j == 0 {
            return vec![self.gamma1().cube];
        }
        let mut out: Vec<Cube> = self
            .level(j)
            .iter()
            .flat_map(|g| g.basic.iter().copied())
            .collect();
        out.sort();
        out
    }

    /// All fundamental heights `λ_j(γ)` for `1 <= j <= N-1`.
    pub fn fundamental_heights(&self) -> BTreeSet<u32> {
        self.splitting
            .iter()
            .filter(|g| g.index < self.n)
            .map(|g| g.lambda)
            .collect()
    }

    /// `Ψ` applied to a bit string given as a binary cube.
    pub fn psi(&self, bits: Cube) -> Result<Cube> {
        self.psi.get(&bits).copied().ok_or_else(|| {
            Error::validation(format!("bit string of length {} not in 0..=N", bits.h))
        })
    }

    /// `Ψ` applied to a bit slice.
    pub fn psi_bits(&self, bits: &[u8]) -> Result<Cube> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::validation("bits must be 0 or 1"));
        }
        let c = BINARY.from_digits(&bits.iter().map(|&b| b as u32).collect::<Vec<_>>());
        self.psi(c)
    }

    /// `Ψ^{-1}` of a basic slope cube.
    pub fn psi_inverse(&self, cube: Cube) -> Result<Cube> {
        self.psi_inv
            .get(&cube)
            .copied()
            .ok_or_else(|| Error::validation("cube is not a basic slope cube"))
    }

    /// Index into `slopes` of the leaf with the given full-length bit string.
    pub fn slope_index(&self, bits: Cube) -> Result<usize> {
        if bits.h != self.n {
            return Err(Error::validation("slope labels have length N"));
        }
        let leaf = self.psi(bits)?;
        Ok(self.leaves.binary_search(&leaf).expect("leaf present"))
    }

    /// Full bit string of the `i`-th slope.
    pub fn slope_bits(&self, i: usize) -> Cube {
        self.psi_inv[&self.leaves[i]]
    }

    /// Height of the basic slope cube of index `j` containing the `i`-th slope.
    pub fn eta(&self, i: usize, j: u32) -> u32 {
        let bits = self.slope_bits(i);
        self.psi[&BINARY.ancestor(bits, j)].h
    }

    /// Exact squared `ρ_γ` and `δ_γ`: sup and inf of distances between slopes
    /// under the two children of a splitting vertex.
    pub fn slope_metrics(&self, gamma: Cube) -> Result<(BigRational, BigRational)> {
        let g = self
            .split_vertex(gamma)
            .ok_or_else(|| Error::validation("not a splitting vertex"))?;
        let side = |c: Cube| -> Vec<&Vec<BigRational>> {
            (0..self.len())
                .filter(|&i| self.grid.contains(c, self.leaves[i]))
                .map(|i| &self.slopes[i])
                .collect()
        };
        let (a, b) = (side(g.children[0]), side(g.children[1]));
        let mut sup = BigRational::zero();
        let mut inf: Option<BigRational> = None;
        for x in &a {
            for y in &b {
                let d2 = point_dist2(x, y);
                if d2 > sup {
                    sup = d2.clone();
                }
                if inf.as_ref().is_none_or(|m| d2 < *m) {
                    inf = Some(d2);
                }
            }
        }
        Ok((sup, inf.unwrap()))
    }

    /// JSON summary: slopes, `J`, the splitting-vertex table and the `Ψ` table.
    pub fn to_json(&self) -> serde_json::Value {
        let sv: Vec<_> = self
            .splitting
            .iter()
            .map(|g| {
                serde_json::json!({
                    "height": g.cube.h,
                    "digits": self.grid.digits(g.cube),
                    "index": g.index,
                    "lambda": g.lambda,
                    "children": g.children.iter().map(|c| self.grid.digits(*c)).collect::<Vec<_>>(),
                })
            })
            .collect();
        let mut psi: Vec<_> = self.psi.iter().collect();
        psi.sort();
        let psi: Vec<_> = psi
            .into_iter()
            .map(|(b, c)| {
                let bits: String = BINARY
                    .digits(*b)
                    .iter()
                    .map(|x| char::from(b'0' + *x as u8))
                    .collect();
                serde_json::json!({ "bits": bits, "height": c.h, "digits": self.grid.digits(*c) })
            })
            .collect();
        serde_json::json!({
            "M": self.grid.m,
            "d": self.grid.d,
            "N": self.n,
            "C0": self.c0,
            "J": self.j,
            "slopes": self.slopes.iter().map(|p| p.iter().map(fmt_rational).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "splitting_vertices": sv,
            "psi": psi,
        })
    }
}

/// Minimal `J` with `C_0 M^{-J} <= min |ω - ω'|`.
pub fn minimal_height_for_gap(points: &[Vec<BigRational>], m: u32, c0: u32) -> Result<u32> {
    let mut min: Option<BigRational> = None;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2 = point_dist2(&points[i], &points[j]);
            if d2.is_zero() {
                return Err(Error::validation("repeated slope"));
            }
            if min.as_ref().is_none_or(|x| d2 < *x) {
                min = Some(d2);
            }
        }
    }
    let min = min.ok_or_else(|| Error::validation("need at least two slopes"))?;
    let c2 = BigRational::from_integer(BigInt::from(c0 * c0));
    let mut j = 0;
    while &c2 * m_pow_neg2(m, j) > min {
        j += 1;
    }
    Ok(j)
}

/// A failed structural property of a pruned tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvariantViolation(pub String);

/// Re-derives the four structural properties of the pruned tree from the
/// slope set alone and reports every violation.
pub fn check_invariants(
    p: &PrunedSlopeTree,
    source: Option<&MadicTree>,
) -> Vec<InvariantViolation> {
    let mut bad = Vec::new();
    let t = &p.tree;
    let grid = p.grid;
    if p.slopes.len() != 1 << p.n {
        bad.push(InvariantViolation(format!(
            "|Ω_N| = {} != 2^N",
            p.slopes.len()
        )));
    }
    let verts = match t.vertices(1 << 24) {
        Ok(v) => v,
        Err(e) => return vec![InvariantViolation(e.to_string())],
    };
    // (ii) two children per split; (i) exactly N splits per ray
    let mut splits_above: HashMap<Cube, u32> = HashMap::from([(Cube::ROOT, 0)]);
    for &v in &verts {
        let ch = t.children(v);
        if ch.len() > 2 {
            bad.push(InvariantViolation(format!(
                "vertex at height {} has {} children",
                v.h,
                ch.len()
            )));
        }
        let s = splits_above[&v] + u32::from(ch.len() >= 2);
        if ch.is_empty() && s != p.n {
            bad.push(InvariantViolation(format!(
                "ray ending at height {} splits {s} times",
                v.h
            )));
        }
        for c in ch {
            splits_above.insert(c, s);
        }
    }
    // (iii) separation of first splitting descendants
    let first_below = |mut c: Cube| loop {
        let ch = t.children(c);
        if ch.len() == 1 {
            c = ch[0];
        } else {
            return c;
        }
    };
    for &v in &verts {
        let ch = t.children(v);
        if ch.len() != 2 {
            continue;
        }
        let (a, b) = (first_below(ch[0]), first_below(ch[1]));
        let h = a.h.min(b.h);
        let need = BigRational::from_integer(BigInt::from(p.c0 * p.c0)) * m_pow_neg2(grid.m, h);
        if grid.dist2(a, b) < need {
            bad.push(InvariantViolation(format!(
                "first splitting descendants below height-{} vertex closer than C0 M^-{h}",
                v.h
            )));
        }
    }
    // (iv) resolution of J
    match minimal_height_for_gap(&p.slopes, grid.m, p.c0) {
        Ok(jmin) if jmin <= p.j => {}
        Ok(jmin) => bad.push(InvariantViolation(format!(
            "J = {} below required {jmin}",
            p.j
        ))),
        Err(e) => bad.push(InvariantViolation(e.to_string())),
    }
    if let Some(src) = source {
        for s in &p.slopes {
            let inside = grid
                .cube_of_point(s, src.height)
                .map(|c| src.contains(c))
                .unwrap_or(false);
            if !inside {
                bad.push(InvariantViolation("slope not in the source set".into()));
            }
        }
    }
    bad
}

/// Checks `δ ≤ ρ ≤ (1 + 2√d/C_0) δ`, `ρ ≤ √d M^{-h(γ)}` and
/// `δ ≥ C_0 M^{-λ(γ)}` at every splitting vertex.
pub fn check_metric_comparability(p: &PrunedSlopeTree) -> Vec<InvariantViolation> {
    let mut bad = Vec::new();
    let d = p.grid.d;
    let c = 1.0 + 2.0 * (d as f64).sqrt() / p.c0 as f64;
    for g in &p.splitting {
        let (rho2, delta2) = p.slope_metrics(g.cube).expect("splitting vertex");
        let (rho, delta) = (ratio_to_f64(&rho2).sqrt(), ratio_to_f64(&delta2).sqrt());
        if delta2 > rho2 || rho > c * delta * (1.0 + 1e-12) {
            bad.push(InvariantViolation(format!(
                "ρ/δ = {} exceeds {c}",
                rho / delta
            )));
        }
        let diam2 = BigRational::from_integer(BigInt::from(d)) * m_pow_neg2(p.grid.m, g.cube.h);
        if rho2 > diam2 {
            bad.push(InvariantViolation("ρ exceeds the diameter of γ".into()));
        }
        let lo =
            BigRational::from_integer(BigInt::from(p.c0 * p.c0)) * m_pow_neg2(p.grid.m, g.lambda);
        if delta2 < lo {
            bad.push(InvariantViolation(format!(
                "δ below C0 M^-λ at height {} (λ = {})",
                g.cube.h, g.lambda
            )));
        }
    }
    bad
}

/// Bit string of a binary cube as `0`/`1` bytes.
pub fn bits_of(b: Cube) -> Vec<u8> {
    BINARY.digits(b).into_iter().map(|x| x as u8).collect()
}

/// Convenience for `u64` conversion of binary addresses.
pub fn bits_value(b: Cube) -> u64 {
    b.a.to_u64().expect("bit strings fit in 64 bits")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::q;

    fn cantor(depth: usize) -> MadicTree {
        MadicTree::from_rules(
            Grid::new(3, 1).unwrap(),
            vec![vec![0, 2]; depth],
            depth as u32,
        )
        .unwrap()
    }

    #[test]
    fn separated_pair_wide_root() {
        let g = Grid::new(6, 1).unwrap();
        let t = MadicTree::from_rules(g, vec![(0..6).collect(); 5], 5).unwrap();
        let p = find_separated_pair(&t, Cube::ROOT, 5, 2).unwrap();
        assert_eq!(p.k, 1);
        assert!(cube_dist2_units(&g, p.v1, p.v2) >= 4);
        assert_eq!((p.v1, p.v2), (Cube { h: 1, a: 0 }, Cube { h: 1, a: 5 }));
    }

    #[test]
    fn separated_pair_cantor() {
        let t = cantor(12);
        let p = find_separated_pair(&t, Cube::ROOT, 10, 2).unwrap();
        assert_eq!(p.k, 3);
        let d2 = t.grid.dist2(p.v1, p.v2);
        assert!(d2 >= q(4, 729));
        assert_eq!(d2, q(625, 729));
    }

    #[test]
    fn separated_pair_insufficient() {
        let t = cantor(3);
        assert!(find_separated_pair(&t, Cube::ROOT, 5, 2).is_err());
    }

    #[test]
    fn prune_cantor_and_dyadic() {
        let t = cantor(40);
        let p = PrunedSlopeTree::prune(&t, 3, 2).unwrap();
        assert_eq!(p.len(), 8);
        assert!(check_invariants(&p, Some(&t)).is_empty());
        assert!(check_metric_comparability(&p).is_empty());

        let g = Grid::new(2, 1).unwrap();
        let dy = MadicTree::from_rules(g, vec![vec![0, 1]; 25], 25).unwrap();
        let p = PrunedSlopeTree::prune(&dy, 2, 2).unwrap();
        assert_eq!(p.len(), 4);
        assert!(check_invariants(&p, Some(&dy)).is_empty());
    }

    #[test]
    fn prune_rejects_large_n() {
        let t = cantor(20);
        match PrunedSlopeTree::prune(&t, 4, 2) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("split(T) = 20")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn psi_roundtrip_and_levels() {
        let t = cantor(30);
        let p = PrunedSlopeTree::prune(&t, 4, 1).unwrap();
        assert_eq!(p.psi(Cube::ROOT).unwrap(), p.gamma1().cube);
        for j in 1..=p.n {
            assert_eq!(p.level(j).len(), 1 << (j - 1));
            assert_eq!(p.basic_cubes(j).len(), 1 << j);
        }
        assert_eq!(p.basic_cubes(p.n), p.leaves);
        let mut range = BTreeSet::new();
        for a in 0..(1u128 << p.n) {
            let b = Cube { h: p.n, a };
            let c = p.psi(b).unwrap();
            assert_eq!(p.psi_inverse(c).unwrap(), b);
            range.insert(c);
        }
        assert_eq!(range.len(), p.len());
        // Ψ carries lineage to lineage
        let dom: Vec<Cube> = p.psi.keys().copied().collect();
        for &b in &dom {
            if let Some(par) = BINARY.parent(b) {
                assert!(p.grid.contains(p.psi(par).unwrap(), p.psi(b).unwrap()));
            }
        }
        assert!(p.fundamental_heights().len() < 1 << (p.n - 1));
        for i in 0..p.len() {
            let etas: Vec<u32> = (0..=p.n).map(|j| p.eta(i, j)).collect();
            assert!(etas.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(etas[p.n as usize], p.j);
        }
        assert!(p.psi_bits(&[0, 1, 2]).is_err());
        assert!(p.psi(Cube { h: 9, a: 0 }).is_err());
    }

    #[test]
    fn small_explicit_instance() {
        let pts: Vec<Vec<BigRational>> = [q(0, 1), q(3, 16), q(12, 16), q(15, 16)]
            .into_iter()
            .map(|x| vec![x])
            .collect();
        let p = PrunedSlopeTree::from_slopes(&pts, 2, 1, 4).unwrap();
        assert_eq!(p.n, 2);
        assert_eq!(p.gamma1().cube, Cube::ROOT);
        assert_eq!(p.gamma1().lambda, 2);
        assert_eq!(
            p.basic_cubes(1),
            vec![Cube { h: 2, a: 0 }, Cube { h: 2, a: 3 }]
        );
        assert!(check_invariants(&p, None).is_empty());
        assert_eq!(p.slope_index(Cube { h: 2, a: 0b01 }).unwrap(), 1);
        let js = p.to_json();
        assert_eq!(js["J"], 4);
    }

    #[test]
    fn singleton_children_metrics() {
        let pts: Vec<Vec<BigRational>> = [q(0, 1), q(1, 2)].into_iter().map(|x| vec![x]).collect();
        let p = PrunedSlopeTree::from_slopes(&pts, 2, 1, 1).unwrap();
        let (rho, delta) = p.slope_metrics(Cube::ROOT).unwrap();
        assert_eq!(rho, delta);
        assert!(p.slope_metrics(Cube { h: 1, a: 0 }).is_err());
    }

    #[test]
    fn from_slopes_rejects_unbalanced() {
        let pts: Vec<Vec<BigRational>> = [q(0, 1), q(1, 8), q(1, 4), q(3, 4)]
            .into_iter()
            .map(|x| vec![x])
            .collect();
        assert!(PrunedSlopeTree::from_slopes(&pts, 2, 1, 3).is_err());
    }
}
