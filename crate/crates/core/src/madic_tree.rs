//! M-adic tree encodings of point sets in `[0,1)^d` and splitting numbers.
//!
//! A vertex at height `h` is an M-adic cube of side `M^{-h}`. It is stored as
//! the integer whose base-`M^d` digits are the combined digits
//! `φ(i_1), …, φ(i_h)` with `φ` the lexicographic enumeration of `Z_M^d`.
//! Prefixes are then integer divisions and lexicographic order of addresses is
//! numeric order.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Mutex;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{fmt_rational, parse_rational};

/// An M-adic cube: height plus packed address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cube {
    pub h: u32,
    pub a: u128,
}

impl Cube {
    pub const ROOT: Cube = Cube { h: 0, a: 0 };
}

/// Base and dimension of an M-adic tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub m: u32,
    pub d: u32,
}

impl Grid {
    pub fn new(m: u32, d: u32) -> Result<Self> {
        if m < 2 {
            return Err(Error::validation(format!("base M must be >= 2, got {m}")));
        }
        if d < 1 {
            return Err(Error::validation("dimension d must be >= 1"));
        }
        let g = Grid { m, d };
        if g.max_height() == 0 {
            return Err(Error::validation("M^d too large"));
        }
        Ok(g)
    }

    /// Number of children of a vertex of the full tree, `M^d`.
    pub fn b(&self) -> u128 {
        (self.m as u128).pow(self.d)
    }

    /// Largest height whose addresses fit in 128 bits.
    pub fn max_height(&self) -> u32 {
        let b = self.b();
        let mut h = 0u32;
        let mut p: u128 = 1;
        while let Some(n) = p.checked_mul(b) {
            p = n;
            h += 1;
        }
        h
    }

    pub fn check_height(&self, h: u32) -> Result<()> {
        if h > self.max_height() {
            Err(Error::validation(format!(
                "height {h} exceeds the supported maximum {} for M={}, d={}",
                self.max_height(),
                self.m,
                self.d
            )))
        } else {
            Ok(())
        }
    }

    /// `(M^d)^k`.
    pub fn bpow(&self, k: u32) -> u128 {
        self.b().pow(k)
    }

    pub fn parent(&self, c: Cube) -> Option<Cube> {
        if c.h == 0 {
            None
        } else {
            Some(Cube {
                h: c.h - 1,
                a: c.a / self.b(),
            })
        }
    }

    /// Ancestor of `c` at height `k <= c.h`.
    pub fn ancestor(&self, c: Cube, k: u32) -> Cube {
        assert!(k <= c.h, "ancestor height {k} above cube height {}", c.h);
        Cube {
            h: k,
            a: c.a / self.bpow(c.h - k),
        }
    }

    pub fn child(&self, c: Cube, digit: u32) -> Cube {
        Cube {
            h: c.h + 1,
            a: c.a * self.b() + digit as u128,
        }
    }

    /// Combined digit of `c` at its own level.
    pub fn last_digit(&self, c: Cube) -> u32 {
        (c.a % self.b()) as u32
    }

    /// `v ⊆ u` as cubes (equivalently `u` is an ancestor of `v` or equal).
    pub fn contains(&self, u: Cube, v: Cube) -> bool {
        u.h <= v.h && self.ancestor(v, u.h) == u
    }

    /// Youngest common ancestor `D(u, v)`: the longest common prefix.
    pub fn dca(&self, u: Cube, v: Cube) -> Cube {
        let k = u.h.min(v.h);
        let mut x = self.ancestor(u, k);
        let mut y = self.ancestor(v, k);
        while x != y {
            x = self.parent(x).unwrap();
            y = self.parent(y).unwrap();
        }
        x
    }

    /// Combined digits `φ(i_1), …, φ(i_h)`.
    pub fn digits(&self, c: Cube) -> Vec<u32> {
        let b = self.b();
        let mut out = vec![0u32; c.h as usize];
        let mut a = c.a;
        for k in (0..c.h as usize).rev() {
            out[k] = (a % b) as u32;
            a /= b;
        }
        out
    }

    pub fn from_digits(&self, digits: &[u32]) -> Cube {
        let b = self.b();
        let mut a: u128 = 0;
        for &x in digits {
            assert!((x as u128) < b, "digit {x} out of range");
            a = a * b + x as u128;
        }
        Cube {
            h: digits.len() as u32,
            a,
        }
    }

    /// Splits a combined digit into per-axis base-M digits.
    pub fn split_digit(&self, x: u32) -> Vec<u32> {
        let mut out = vec![0u32; self.d as usize];
        let mut x = x;
        for r in (0..self.d as usize).rev() {
            out[r] = x % self.m;
            x /= self.m;
        }
        out
    }

    pub fn join_digit(&self, per_axis: &[u32]) -> u32 {
        per_axis.iter().fold(0u32, |acc, &x| acc * self.m + x)
    }

    /// Integer corner coordinates `(j_1, …, j_d)` with the cube equal to
    /// `∏ [j_r M^{-h}, (j_r+1) M^{-h})`.
    pub fn coords(&self, c: Cube) -> Vec<u128> {
        if self.d == 1 {
            return vec![c.a];
        }
        let mut out = vec![0u128; self.d as usize];
        for x in self.digits(c) {
            for (r, dig) in self.split_digit(x).into_iter().enumerate() {
                out[r] = out[r] * self.m as u128 + dig as u128;
            }
        }
        out
    }

    pub fn from_coords(&self, h: u32, coords: &[u128]) -> Cube {
        assert_eq!(coords.len(), self.d as usize);
        if self.d == 1 {
            return Cube { h, a: coords[0] };
        }
        let m = self.m as u128;
        let mut digits = Vec::with_capacity(h as usize);
        for k in 0..h {
            let shift = m.pow(h - 1 - k);
            let per: Vec<u32> = coords.iter().map(|&j| ((j / shift) % m) as u32).collect();
            digits.push(self.join_digit(&per));
        }
        self.from_digits(&digits)
    }

    /// Lower corner of the cube as exact rationals.
    pub fn corner(&self, c: Cube) -> Vec<BigRational> {
        let den = BigInt::from(self.m).pow(c.h);
        self.coords(c)
            .into_iter()
            .map(|j| BigRational::new(BigInt::from(j), den.clone()))
            .collect()
    }

    /// Centre of the cube as exact rationals.
    pub fn center(&self, c: Cube) -> Vec<BigRational> {
        let den: BigInt = BigInt::from(self.m).pow(c.h) * 2u32;
        self.coords(c)
            .into_iter()
            .map(|j| BigRational::new(BigInt::from(2 * j + 1), den.clone()))
            .collect()
    }

    /// Side length `M^{-h}` as an exact rational.
    pub fn side(&self, h: u32) -> BigRational {
        BigRational::new(BigInt::one(), BigInt::from(self.m).pow(h))
    }

    /// The cube of height `h` containing `point`.
    pub fn cube_of_point(&self, point: &[BigRational], h: u32) -> Result<Cube> {
        if point.len() != self.d as usize {
            return Err(Error::validation(format!(
                "point has {} coordinates, expected {}",
                point.len(),
                self.d
            )));
        }
        self.check_height(h)?;
        let scale = BigInt::from(self.m).pow(h);
        let mut coords = Vec::with_capacity(point.len());
        for x in point {
            if x.is_negative() || *x >= BigRational::one() {
                return Err(Error::validation(format!(
                    "coordinate {} outside [0,1)",
                    fmt_rational(x)
                )));
            }
            let j = (x.numer() * &scale) / x.denom();
            coords.push(j.to_u128().expect("coordinate index fits"));
        }
        Ok(self.from_coords(h, &coords))
    }

    /// Euclidean distance squared between two cubes (closed), exact.
    pub fn dist2(&self, u: Cube, v: Cube) -> BigRational {
        let (cu, cv) = (self.corner(u), self.corner(v));
        let (su, sv) = (self.side(u.h), self.side(v.h));
        let mut acc = BigRational::zero();
        for r in 0..self.d as usize {
            let lo_u = &cu[r];
            let hi_u = lo_u + &su;
            let lo_v = &cv[r];
            let hi_v = lo_v + &sv;
            let gap = if hi_u < *lo_v {
                lo_v - &hi_u
            } else if hi_v < *lo_u {
                lo_u - &hi_v
            } else {
                BigRational::zero()
            };
            acc += &gap * &gap;
        }
        acc
    }
}

/// Point-backed encoding: sorted leaf addresses at the truncation height.
#[derive(Clone, Debug)]
pub struct PointBacking {
    leaves: Vec<u128>,
    /// lexicographically minimal point per leaf, parallel to `leaves`
    reps: Vec<Vec<BigRational>>,
}

/// Digit-rule encoding: allowed combined digits per level, then zeros.
///
/// Encodes the finite set of points whose first `rules.len()` digits are drawn
/// from the allowed sets and whose remaining digits vanish (lower corners).
#[derive(Clone, Debug)]
pub struct RuleBacking {
    rules: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub enum Backing {
    Points(PointBacking),
    Rule(RuleBacking),
    Explicit(HashSet<Cube>),
}

/// A truncated M-adic tree with lazily evaluated, memoized splitting numbers.
#[derive(Debug)]
pub struct MadicTree {
    pub grid: Grid,
    pub height: u32,
    backing: Backing,
    split_memo: Mutex<HashMap<Cube, u32>>,
}

impl Clone for MadicTree {
    fn clone(&self) -> Self {
        MadicTree {
            grid: self.grid,
            height: self.height,
            backing: self.backing.clone(),
            split_memo: Mutex::new(self.split_memo.lock().unwrap().clone()),
        }
    }
}

/// Encodes a finite point set at truncation height `j`.
pub fn encode_set(points: &[Vec<BigRational>], m: u32, j: u32) -> Result<MadicTree> {
    let d = points.first().map(|p| p.len()).unwrap_or(1).max(1) as u32;
    let grid = Grid::new(m, d)?;
    grid.check_height(j)?;
    let mut keyed: Vec<(u128, Vec<BigRational>)> = Vec::with_capacity(points.len());
    for p in points {
        let c = grid.cube_of_point(p, j)?;
        keyed.push((c.a, p.clone()));
    }
    keyed.sort();
    let mut leaves = Vec::new();
    let mut reps = Vec::new();
    for (a, p) in keyed {
        if leaves.last() != Some(&a) {
            leaves.push(a);
            reps.push(p);
        }
    }
    Ok(MadicTree::from_backing(
        grid,
        j,
        Backing::Points(PointBacking { leaves, reps }),
    ))
}

/// Smallest height at which all distinct points occupy distinct cubes.
pub fn separating_height(points: &[Vec<BigRational>], m: u32) -> Result<u32> {
    let d = points.first().map(|p| p.len()).unwrap_or(1).max(1) as u32;
    let grid = Grid::new(m, d)?;
    let mut uniq: Vec<&Vec<BigRational>> = points.iter().collect();
    uniq.sort();
    uniq.dedup();
    let mut h = 0;
    loop {
        grid.check_height(h)?;
        let mut seen = HashSet::new();
        let mut ok = true;
        for p in &uniq {
            if !seen.insert(grid.cube_of_point(p, h)?.a) {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(h);
        }
        h += 1;
    }
}

impl MadicTree {
    pub fn from_backing(grid: Grid, height: u32, backing: Backing) -> Self {
        MadicTree {
            grid,
            height,
            backing,
            split_memo: Mutex::new(HashMap::new()),
        }
    }

    /// Tree of points whose digits at levels `1..=rules.len()` lie in the given
    /// allowed sets, truncated at `height >= rules.len()`.
    pub fn from_rules(grid: Grid, rules: Vec<Vec<u32>>, height: u32) -> Result<Self> {
        grid.check_height(height)?;
        if (height as usize) < rules.len() {
            return Err(Error::validation("truncation height below rule depth"));
        }
        let mut rules = rules;
        for r in rules.iter_mut() {
            r.sort_unstable();
            r.dedup();
            if r.is_empty() || r.iter().any(|&x| x as u128 >= grid.b()) {
                return Err(Error::validation(
                    "each level needs a nonempty set of valid digits",
                ));
            }
        }
        Ok(Self::from_backing(
            grid,
            height,
            Backing::Rule(RuleBacking { rules }),
        ))
    }

    /// Tree given by an explicit, parent-closed vertex set (used by oracles).
    pub fn from_vertices(grid: Grid, vertices: impl IntoIterator<Item = Cube>) -> Result<Self> {
        let set: HashSet<Cube> = vertices.into_iter().collect();
        if !set.contains(&Cube::ROOT) {
            return Err(Error::validation("vertex set must contain the root"));
        }
        for v in &set {
            if let Some(p) = grid.parent(*v) {
                if !set.contains(&p) {
                    return Err(Error::validation("vertex set not closed under parent"));
                }
            }
        }
        let height = set.iter().map(|c| c.h).max().unwrap_or(0);
        Ok(Self::from_backing(grid, height, Backing::Explicit(set)))
    }

    pub fn backing(&self) -> &Backing {
        &self.backing
    }

    pub fn root(&self) -> Cube {
        Cube::ROOT
    }

    fn leaf_range(&self, pb: &PointBacking, v: Cube) -> (usize, usize) {
        let w = self.grid.bpow(self.height - v.h);
        let lo = v.a * w;
        let hi = (v.a + 1) * w;
        let i = pb.leaves.partition_point(|&x| x < lo);
        let j = pb.leaves.partition_point(|&x| x < hi);
        (i, j)
    }

    pub fn contains(&self, v: Cube) -> bool {
        if v.h > self.height {
            return false;
        }
        match &self.backing {
            Backing::Points(pb) => {
                let (i, j) = self.leaf_range(pb, v);
                i < j
            }
            Backing::Rule(rb) => self.grid.digits(v).iter().enumerate().all(|(k, x)| {
                rb.rules
                    .get(k)
                    .map_or(*x == 0, |r| r.binary_search(x).is_ok())
            }),
            Backing::Explicit(set) => set.contains(&v),
        }
    }

    /// Children of `v` in increasing lexicographic order.
    pub fn children(&self, v: Cube) -> Vec<Cube> {
        if v.h >= self.height {
            return Vec::new();
        }
        match &self.backing {
            Backing::Points(pb) => {
                let (mut i, j) = self.leaf_range(pb, v);
                let w = self.grid.bpow(self.height - v.h - 1);
                let mut out = Vec::new();
                while i < j {
                    let c = pb.leaves[i] / w;
                    out.push(Cube { h: v.h + 1, a: c });
                    let next = (c + 1) * w;
                    i += pb.leaves[i..j].partition_point(|&x| x < next);
                }
                out
            }
            Backing::Rule(rb) => match rb.rules.get(v.h as usize) {
                Some(r) => r.iter().map(|&x| self.grid.child(v, x)).collect(),
                None => vec![self.grid.child(v, 0)],
            },
            Backing::Explicit(set) => (0..self.grid.b() as u32)
                .map(|x| self.grid.child(v, x))
                .filter(|c| set.contains(c))
                .collect(),
        }
    }

    /// All vertices in breadth-first order (finite trees only; capped).
    pub fn vertices(&self, cap: usize) -> Result<Vec<Cube>> {
        let mut out = vec![Cube::ROOT];
        let mut i = 0;
        while i < out.len() {
            let v = out[i];
            for c in self.children(v) {
                out.push(c);
                if out.len() > cap {
                    return Err(Error::infeasible(format!(
                        "tree has more than {cap} vertices"
                    )));
                }
            }
            i += 1;
        }
        Ok(out)
    }

    /// Vertices at height `k`, in lexicographic order.
    pub fn level(&self, k: u32, cap: usize) -> Result<Vec<Cube>> {
        let mut cur = vec![Cube::ROOT];
        for _ in 0..k {
            let mut next = Vec::new();
            for v in cur {
                next.extend(self.children(v));
                if next.len() > cap {
                    return Err(Error::infeasible(format!("level exceeds {cap} vertices")));
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Lexicographically minimal backing point inside the cube `v`.
    pub fn min_point(&self, v: Cube) -> Option<Vec<BigRational>> {
        match &self.backing {
            Backing::Points(pb) => {
                let (i, j) = self.leaf_range(pb, v);
                (i < j).then(|| pb.reps[i].clone())
            }
            Backing::Rule(rb) => {
                if !self.contains(v) {
                    return None;
                }
                let mut digits = self.grid.digits(v);
                while digits.len() < rb.rules.len() {
                    digits.push(rb.rules[digits.len()][0]);
                }
                let c = self.grid.from_digits(&digits);
                Some(self.grid.corner(c))
            }
            Backing::Explicit(set) => {
                if !set.contains(&v) {
                    return None;
                }
                let mut c = v;
                loop {
                    let ch = self.children(c);
                    match ch.first() {
                        Some(&x) => c = x,
                        None => return Some(self.grid.corner(c)),
                    }
                }
            }
        }
    }

    /// `split_T(v)` via the recursion `max(max_c s(c), 1 + secondmax_c s(c))`.
    pub fn split_of(&self, v: Cube) -> u32 {
        if let Backing::Rule(rb) = &self.backing {
            // every vertex of a rule tree at height k has the same subtree shape
            return rb
                .rules
                .iter()
                .skip(v.h as usize)
                .filter(|r| r.len() >= 2)
                .count() as u32;
        }
        if let Some(&s) = self.split_memo.lock().unwrap().get(&v) {
            return s;
        }
        // iterative post-order to avoid deep recursion
        let mut stack = vec![(v, false)];
        while let Some((x, expanded)) = stack.pop() {
            if self.split_memo.lock().unwrap().contains_key(&x) {
                continue;
            }
            let ch = self.children(x);
            if expanded {
                let memo = self.split_memo.lock().unwrap();
                let mut vals: Vec<u32> = ch.iter().map(|c| memo[c]).collect();
                drop(memo);
                vals.sort_unstable_by(|a, b| b.cmp(a));
                let s = match vals.len() {
                    0 => 0,
                    1 => vals[0],
                    _ => vals[0].max(1 + vals[1]),
                };
                self.split_memo.lock().unwrap().insert(x, s);
            } else {
                stack.push((x, true));
                for c in ch {
                    stack.push((c, false));
                }
            }
        }
        self.split_memo.lock().unwrap()[&v]
    }

    /// `split(T)`, which equals the split of the root.
    pub fn splitting_number(&self) -> u32 {
        self.split_of(Cube::ROOT)
    }

    /// Per-vertex split values for an enumerable tree.
    pub fn split_table(&self, cap: usize) -> Result<HashMap<Cube, u32>> {
        let verts = self.vertices(cap)?;
        Ok(verts.into_iter().map(|v| (v, self.split_of(v))).collect())
    }

    /// Vertices attaining the maximal split, which lie on a single ray.
    pub fn max_split_ray(&self) -> Vec<Cube> {
        let n = self.splitting_number();
        let mut out = vec![Cube::ROOT];
        let mut v = Cube::ROOT;
        loop {
            let next: Vec<Cube> = self
                .children(v)
                .into_iter()
                .filter(|c| self.split_of(*c) == n)
                .collect();
            match next.len() {
                0 => return out,
                1 => {
                    v = next[0];
                    out.push(v);
                }
                _ => unreachable!(
                    "two children with maximal split contradict the single-ray property"
                ),
            }
        }
    }
}

/// Exhaustive oracle for the max-min definition of the splitting number.
///
/// Enumerates every subtree rooted at every vertex (each vertex keeps a
/// nonempty subset of its children) and maximizes the minimum number of
/// splitting vertices over its rays. Subtrees are enumerated through the set
/// of ray minima their branches can realize, so every combination of kept
/// children and child minima is visited without materializing vertex sets.
pub fn splitting_number_bruteforce(tree: &MadicTree, cap: usize) -> Result<u32> {
    let verts = tree.vertices(64)?;
    let mut best = 0;
    for v in verts {
        let vals = subtree_minima(tree, v, cap)?;
        best = best.max(vals.last().copied().unwrap_or(0));
    }
    Ok(best)
}

/// Brute-force `split_T(v)`.
pub fn split_of_bruteforce(tree: &MadicTree, v: Cube, cap: usize) -> Result<u32> {
    Ok(subtree_minima(tree, v, cap)?.last().copied().unwrap_or(0))
}

/// Every value of `min over rays of #splitting vertices` attained by some
/// subtree rooted at `v`, sorted.
fn subtree_minima(tree: &MadicTree, v: Cube, cap: usize) -> Result<Vec<u32>> {
    let ch = tree.children(v);
    if ch.is_empty() {
        return Ok(vec![0]);
    }
    let per_child: Vec<Vec<u32>> = ch
        .iter()
        .map(|&c| subtree_minima(tree, c, cap))
        .collect::<Result<_>>()?;
    let mut out = std::collections::BTreeSet::new();
    let mut visited = 0usize;
    for mask in 1u32..(1 << ch.len()) {
        let kept: Vec<&Vec<u32>> = (0..ch.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &per_child[i])
            .collect();
        let add = u32::from(kept.len() >= 2);
        let mut idx = vec![0usize; kept.len()];
        loop {
            visited += 1;
            if visited > cap {
                return Err(Error::infeasible(format!("more than {cap} subtrees")));
            }
            let m = idx.iter().zip(&kept).map(|(&i, s)| s[i]).min().unwrap();
            out.insert(m + add);
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] < kept[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Checks Def. of a sticky map: heights preserved and ancestry carried to
/// ancestry, over every (ancestor, descendant) pair inside `domain`.
pub fn is_sticky(grid: &Grid, domain: &[Cube], f: impl Fn(Cube) -> Option<Cube>) -> bool {
    let present: HashSet<Cube> = domain.iter().copied().collect();
    let mut image = HashMap::new();
    for &v in domain {
        match f(v) {
            Some(w) if w.h == v.h => {
                image.insert(v, w);
            }
            _ => return false,
        }
    }
    for &v in domain {
        let fv = image[&v];
        let mut u = v;
        while let Some(p) = grid.parent(u) {
            if present.contains(&p) && !grid.contains(image[&p], fv) {
                return false;
            }
            u = p;
        }
    }
    true
}

/// Deterministic random tree for oracle testing: every vertex above
/// `max_height` gets a uniformly random number of children in
/// `0..=max_branch` (the root at least one), placed at random distinct digits,
/// until `max_vertices` vertices exist.
pub fn random_tree(
    grid: Grid,
    max_height: u32,
    max_branch: u32,
    max_vertices: usize,
    seed: u64,
) -> MadicTree {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut verts = vec![Cube::ROOT];
    let mut queue = VecDeque::from([Cube::ROOT]);
    let b = grid.b() as u32;
    while let Some(v) = queue.pop_front() {
        if v.h >= max_height {
            continue;
        }
        let lo = u32::from(v.h == 0);
        let k = rng.gen_range(lo..=max_branch.min(b));
        let mut digits: Vec<u32> = (0..b).collect();
        digits.shuffle(&mut rng);
        for &x in digits.iter().take(k as usize) {
            if verts.len() >= max_vertices {
                break;
            }
            let c = grid.child(v, x);
            verts.push(c);
            queue.push_back(c);
        }
    }
    MadicTree::from_vertices(grid, verts).expect("generated tree is parent-closed")
}

/// JSON point-set exchange format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointSetJson {
    #[serde(rename = "M")]
    pub m: u32,
    pub d: u32,
    #[serde(rename = "J")]
    pub j: u32,
    pub points: Vec<Vec<String>>,
}

impl PointSetJson {
    pub fn parse_points(&self) -> Result<Vec<Vec<BigRational>>> {
        self.points
            .iter()
            .map(|p| {
                if p.len() != self.d as usize {
                    return Err(Error::validation("point dimension does not match d"));
                }
                p.iter()
                    .map(|s| {
                        parse_rational(s)
                            .ok_or_else(|| Error::validation(format!("not a rational: {s}")))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn from_points(m: u32, j: u32, points: &[Vec<BigRational>]) -> Self {
        PointSetJson {
            m,
            d: points.first().map(|p| p.len() as u32).unwrap_or(1),
            j,
            points: points
                .iter()
                .map(|p| p.iter().map(fmt_rational).collect())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{q, qpow};

    fn pts1(v: &[BigRational]) -> Vec<Vec<BigRational>> {
        v.iter().map(|x| vec![x.clone()]).collect()
    }

    #[test]
    fn two_halves() {
        let t = encode_set(&pts1(&[q(0, 1), q(1, 2)]), 2, 1).unwrap();
        let g = t.grid;
        assert_eq!(
            t.children(Cube::ROOT),
            vec![g.from_digits(&[0]), g.from_digits(&[1])]
        );
    }

    #[test]
    fn cantor_digits_are_zero_or_two() {
        let mut pts = Vec::new();
        for a in [0, 2] {
            for b in [0, 2] {
                for c in [0, 2] {
                    pts.push(q(a * 9 + b * 3 + c, 27));
                }
            }
        }
        let t = encode_set(&pts1(&pts), 3, 3).unwrap();
        for v in t.vertices(1000).unwrap() {
            if v.h < 3 {
                let digs: Vec<u32> = t
                    .children(v)
                    .iter()
                    .map(|c| t.grid.last_digit(*c))
                    .collect();
                assert_eq!(digs, vec![0, 2]);
            }
        }
    }

    #[test]
    fn dyadic_is_full_binary() {
        let m = 4;
        let pts: Vec<_> = (0..(1 << m)).map(|k| q(k, 1 << m)).collect();
        let t = encode_set(&pts1(&pts), 2, m as u32).unwrap();
        assert_eq!(t.vertices(1000).unwrap().len(), (1 << (m + 1)) - 1);
        assert_eq!(t.splitting_number(), m as u32);
    }

    #[test]
    fn dca_matches_prefix_scan() {
        let g = Grid::new(3, 2).unwrap();
        let u = g.from_digits(&[1, 4, 7]);
        let v = g.from_digits(&[1, 4, 2, 8]);
        assert_eq!(g.dca(u, v), g.from_digits(&[1, 4]));
        assert_eq!(g.dca(u, u), u);
        let g2 = Grid::new(2, 1).unwrap();
        assert_eq!(
            g2.dca(g2.from_digits(&[0, 1]), g2.from_digits(&[0, 0])),
            g2.from_digits(&[0])
        );
    }

    #[test]
    fn coords_roundtrip() {
        let g = Grid::new(3, 2).unwrap();
        for a in 0..81u128 {
            let c = Cube { h: 2, a };
            assert_eq!(g.from_coords(2, &g.coords(c)), c);
        }
        let c = g.from_coords(2, &[5, 1]);
        // x-index 5 = (1,2) in base 3, y-index 1 = (0,1)
        assert_eq!(g.digits(c), vec![3, 2 * 3 + 1]);
    }

    #[test]
    fn split_examples() {
        let pts: Vec<_> = (1..=12).map(|j| qpow(2, -j)).collect();
        assert_eq!(
            encode_set(&pts1(&pts), 2, 12).unwrap().splitting_number(),
            1
        );
        for n in 1..=3i64 {
            let pts: Vec<_> = (0..4i64.pow(n as u32))
                .map(|k| q(k, 4i64.pow(n as u32)))
                .collect();
            assert_eq!(
                encode_set(&pts1(&pts), 2, 2 * n as u32)
                    .unwrap()
                    .splitting_number(),
                2 * n as u32
            );
            assert_eq!(
                encode_set(&pts1(&pts), 4, n as u32)
                    .unwrap()
                    .splitting_number(),
                n as u32
            );
        }
    }

    #[test]
    fn bruteforce_small_cases() {
        let g = Grid::new(2, 1).unwrap();
        let path: Vec<Cube> = (0..=5).map(|h| Cube { h, a: 0 }).collect();
        let t = MadicTree::from_vertices(g, path).unwrap();
        assert_eq!(splitting_number_bruteforce(&t, 100_000).unwrap(), 0);
        let full: Vec<Cube> = (0..=3u32)
            .flat_map(|h| (0..(1u128 << h)).map(move |a| Cube { h, a }))
            .collect();
        let t = MadicTree::from_vertices(g, full).unwrap();
        assert_eq!(splitting_number_bruteforce(&t, 100_000).unwrap(), 3);
    }

    #[test]
    fn dp_matches_bruteforce_on_random_trees() {
        let g = Grid::new(3, 1).unwrap();
        for seed in 0..40 {
            let t = random_tree(g, 4, 3, 20, seed);
            let dp = t.splitting_number();
            let bf = splitting_number_bruteforce(&t, 200_000).unwrap();
            assert_eq!(dp, bf, "seed {seed}");
        }
    }

    #[test]
    fn monotonicity_and_single_ray() {
        let g = Grid::new(3, 1).unwrap();
        for seed in 0..30 {
            let t = random_tree(g, 5, 3, 60, seed);
            let table = t.split_table(10_000).unwrap();
            for (&v, &s) in &table {
                if let Some(p) = g.parent(v) {
                    assert!(s <= table[&p]);
                }
            }
            let n = t.splitting_number();
            let tops: Vec<Cube> = table
                .iter()
                .filter(|(_, &s)| s == n)
                .map(|(&v, _)| v)
                .collect();
            for &a in &tops {
                for &b in &tops {
                    assert!(g.contains(a, b) || g.contains(b, a));
                }
            }
            let ray = t.max_split_ray();
            assert_eq!(ray.len(), tops.len());
        }
    }

    #[test]
    fn subtree_monotonicity() {
        let g = Grid::new(2, 1).unwrap();
        for seed in 0..20 {
            let t = random_tree(g, 5, 2, 60, seed);
            let verts = t.vertices(1000).unwrap();
            // drop one random leaf-closed branch: keep vertices not under a chosen vertex
            let cut = verts[verts.len() / 2];
            if cut == Cube::ROOT {
                continue;
            }
            let kept: Vec<Cube> = verts
                .iter()
                .copied()
                .filter(|v| !g.contains(cut, *v))
                .collect();
            let s = MadicTree::from_vertices(g, kept).unwrap();
            assert!(s.splitting_number() <= t.splitting_number());
        }
    }

    #[test]
    fn encode_is_idempotent() {
        let pts: Vec<_> = [q(1, 7), q(3, 11), q(5, 9), q(2, 3)].to_vec();
        let t = encode_set(&pts1(&pts), 3, 5).unwrap();
        let leaves = t.level(5, 100).unwrap();
        let reps: Vec<Vec<BigRational>> = leaves.iter().map(|&c| t.grid.corner(c)).collect();
        let t2 = encode_set(&reps, 3, 5).unwrap();
        assert_eq!(t.vertices(1000).unwrap(), t2.vertices(1000).unwrap());
    }

    #[test]
    fn encode_rejects_out_of_range() {
        assert!(encode_set(&pts1(&[q(1, 1)]), 2, 3).is_err());
        assert!(encode_set(&pts1(&[q(-1, 3)]), 2, 3).is_err());
    }

    #[test]
    fn rule_tree_matches_point_tree() {
        let g = Grid::new(3, 1).unwrap();
        let rt = MadicTree::from_rules(g, vec![vec![0, 2]; 4], 6).unwrap();
        let pts: Vec<Vec<BigRational>> = rt
            .level(6, 1000)
            .unwrap()
            .iter()
            .map(|&c| g.corner(c))
            .collect();
        let pt = encode_set(&pts, 3, 6).unwrap();
        assert_eq!(rt.vertices(1000).unwrap(), pt.vertices(1000).unwrap());
        assert_eq!(rt.splitting_number(), 4);
        assert_eq!(pt.splitting_number(), 4);
        let v = g.from_digits(&[2]);
        assert_eq!(rt.min_point(v), pt.min_point(v));
    }

    #[test]
    fn sticky_checks() {
        let g = Grid::new(2, 1).unwrap();
        let dom: Vec<Cube> = (0..=3u32)
            .flat_map(|h| (0..(1u128 << h)).map(move |a| Cube { h, a }))
            .collect();
        assert!(is_sticky(&g, &dom, Some));
        // height-changing map
        assert!(!is_sticky(&g, &dom, |c| Some(if c.h == 2 {
            g.parent(c).unwrap()
        } else {
            c
        })));
        // reflection of the last digit breaks lineage at height 2 but keeps heights
        let flip = |c: Cube| {
            Some(if c.h == 2 {
                Cube { h: 2, a: c.a ^ 2 }
            } else {
                c
            })
        };
        assert!(!is_sticky(&g, &dom, flip));
    }

    #[test]
    fn json_roundtrip() {
        let pts = vec![vec![q(1, 3), q(1, 2)], vec![q(0, 1), q(7, 8)]];
        let js = PointSetJson::from_points(2, 4, &pts);
        let s = serde_json::to_string(&js).unwrap();
        let back: PointSetJson = serde_json::from_str(&s).unwrap();
        assert_eq!(back.parse_points().unwrap(), pts);
        assert!(s.contains("\"M\""));
    }
}
