//! One-dimensional lacunary sets of finite order.
//!
//! Witnesses mirror the recursive definition: a special sequence with its
//! limit, and for every gap `[a, b)` between consecutive partition points a
//! witness of one order less. Decompositions are built on the M-adic trie of
//! a finite set, following the ray that carries the maximal splitting number.
//!
//! Finite witnesses use the partition `P = A ∪ {α}`. The set must lie in
//! `[min P, max P]`; the point `max P` itself is always allowed (it is the
//! only point of the half-open gap obtained by extending `A` with one more
//! term), and a gap without an attached child is an order-0 leaf.

use std::collections::BTreeMap;
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::madic_tree::{encode_set, separating_height, Grid, MadicTree};
use crate::scalar::{fmt_rational, parse_rational, rational_str};

fn big_pow(m: u32, k: u64) -> BigInt {
    num_traits::pow(BigInt::from(m), k as usize)
}

fn rpow(m: u32, k: i64) -> BigRational {
    let p = BigRational::from_integer(big_pow(m, k.unsigned_abs()));
    if k >= 0 {
        p
    } else {
        p.recip()
    }
}

/// A finite lacunary sequence: terms in sequence order and their limit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LacunarySequence {
    #[serde(with = "rational_str::vec")]
    pub terms: Vec<BigRational>,
    #[serde(with = "rational_str")]
    pub limit: BigRational,
}

impl LacunarySequence {
    /// `|a_{j+1} − α| ≤ λ |a_j − α|` for every consecutive pair.
    pub fn is_lacunary(&self, lambda: &BigRational) -> bool {
        self.terms
            .windows(2)
            .all(|w| (&w[1] - &self.limit).abs() <= lambda * (&w[0] - &self.limit).abs())
    }

    /// Order-1 witness whose special sequence is the sequence itself.
    pub fn witness(&self, lambda: BigRational) -> LacunaryWitness {
        let mut a = self.terms.clone();
        a.sort();
        a.dedup();
        LacunaryWitness {
            order: 1,
            lambda,
            sequence: a,
            limit: Some(self.limit.clone()),
            gaps: Vec::new(),
        }
    }
}

/// Witness that a finite set lies in `Λ(order; λ)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LacunaryWitness {
    pub order: u32,
    #[serde(with = "rational_str")]
    pub lambda: BigRational,
    /// special sequence, strictly increasing
    #[serde(with = "rational_str::vec")]
    pub sequence: Vec<BigRational>,
    #[serde(with = "rational_str::opt", default)]
    pub limit: Option<BigRational>,
    /// children for gaps between consecutive partition points, sorted by `lo`
    #[serde(default)]
    pub gaps: Vec<GapWitness>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapWitness {
    #[serde(with = "rational_str")]
    pub lo: BigRational,
    #[serde(with = "rational_str")]
    pub hi: BigRational,
    pub witness: LacunaryWitness,
}

impl LacunaryWitness {
    pub fn leaf(lambda: BigRational) -> Self {
        LacunaryWitness {
            order: 0,
            lambda,
            sequence: Vec::new(),
            limit: None,
            gaps: Vec::new(),
        }
    }

    /// Witness of order `1 + max child order` for the partition `A ∪ {α}`.
    ///
    /// Each child is attached to the gap starting at the given left endpoint.
    fn assemble(
        lambda: BigRational,
        mut sequence: Vec<BigRational>,
        limit: BigRational,
        children: Vec<(BigRational, LacunaryWitness)>,
    ) -> Self {
        sequence.sort();
        sequence.dedup();
        let p = partition(&sequence, Some(&limit));
        let mut gaps: Vec<GapWitness> = children
            .into_iter()
            .map(|(lo, w)| {
                let k = p
                    .binary_search(&lo)
                    .expect("gap start is a partition point");
                GapWitness {
                    lo,
                    hi: p[k + 1].clone(),
                    witness: w,
                }
            })
            .collect();
        gaps.sort_by(|a, b| a.lo.cmp(&b.lo));
        let order = 1 + gaps.iter().map(|g| g.witness.order).max().unwrap_or(0);
        LacunaryWitness {
            order,
            lambda,
            sequence,
            limit: Some(limit),
            gaps,
        }
    }

    /// Depth-first count of witness nodes.
    pub fn size(&self) -> usize {
        1 + self.gaps.iter().map(|g| g.witness.size()).sum::<usize>()
    }

    /// Image under `x ↦ c1·x + c2` with `c1 > 0`.
    ///
    /// Gaps are half-open on the right, so a reflection would move points on
    /// partition points into neighbouring gaps; negative scales are rejected.
    pub fn affine_image(&self, c1: &BigRational, c2: &BigRational) -> Result<Self> {
        if !c1.is_positive() {
            return Err(Error::validation(
                "witness transport needs a positive scale",
            ));
        }
        let f = |x: &BigRational| c1 * x + c2;
        Ok(LacunaryWitness {
            order: self.order,
            lambda: self.lambda.clone(),
            sequence: self.sequence.iter().map(f).collect(),
            limit: self.limit.as_ref().map(f),
            gaps: self
                .gaps
                .iter()
                .map(|g| {
                    Ok(GapWitness {
                        lo: f(&g.lo),
                        hi: f(&g.hi),
                        witness: g.witness.affine_image(c1, c2)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda.is_positive() && self.lambda < BigRational::one()) {
            return Err(Error::validation("lacunarity constant must lie in (0, 1)"));
        }
        if self.sequence.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(
                "special sequence must be strictly increasing",
            ));
        }
        if self.order == 0 {
            if !self.sequence.is_empty() || !self.gaps.is_empty() {
                return Err(Error::validation(
                    "order-0 witness carries no sequence or gaps",
                ));
            }
            return Ok(());
        }
        let alpha = self
            .limit
            .as_ref()
            .ok_or_else(|| Error::validation("witness of positive order needs a limit"))?;
        if self.sequence.is_empty() {
            return Err(Error::validation(
                "witness of positive order needs a special sequence",
            ));
        }
        let p = partition(&self.sequence, Some(alpha));
        for w in self.gaps.windows(2) {
            if w[0].lo >= w[1].lo {
                return Err(Error::validation("gap witnesses overlap or are unsorted"));
            }
        }
        for g in &self.gaps {
            match p.binary_search(&g.lo) {
                Ok(k) if k + 1 < p.len() && p[k + 1] == g.hi => {}
                _ => {
                    return Err(Error::validation(format!(
                        "gap [{}, {}) is not between consecutive partition points",
                        fmt_rational(&g.lo),
                        fmt_rational(&g.hi)
                    )))
                }
            }
            if g.witness.order >= self.order {
                return Err(Error::validation(
                    "child witness order must drop by at least one",
                ));
            }
            g.witness.validate()?;
        }
        Ok(())
    }

    fn holds(&self, set: &[BigRational]) -> bool {
        if self.order == 0 {
            return set.len() <= 1;
        }
        let alpha = self.limit.as_ref().expect("validated");
        let mut dist: Vec<BigRational> = self.sequence.iter().map(|a| (a - alpha).abs()).collect();
        dist.sort_by(|a, b| b.cmp(a));
        if dist.windows(2).any(|w| w[1] > &self.lambda * &w[0]) {
            return false;
        }
        let p = partition(&self.sequence, Some(alpha));
        let (lo, hi) = (&p[0], &p[p.len() - 1]);
        if set.iter().any(|x| x < lo || x > hi) {
            return false;
        }
        for k in 0..p.len() - 1 {
            let i = set.partition_point(|x| x < &p[k]);
            let j = set.partition_point(|x| x < &p[k + 1]);
            let part = &set[i..j];
            if part.is_empty() {
                continue;
            }
            match self.gaps.iter().find(|g| g.lo == p[k]) {
                None => {
                    if part.len() > 1 {
                        return false;
                    }
                }
                Some(g) => {
                    if g.witness.lambda > self.lambda || !g.witness.holds(part) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

fn partition(a: &[BigRational], alpha: Option<&BigRational>) -> Vec<BigRational> {
    let mut p = a.to_vec();
    if let Some(x) = alpha {
        p.push(x.clone());
    }
    p.sort();
    p.dedup();
    p
}

/// Checks a witness against a finite set.
///
/// Structural defects of the witness (unsorted sequence, overlapping gaps,
/// gaps not spanning consecutive partition points) are errors; a well-formed
/// witness that does not fit the set yields `Ok(false)`.
pub fn verify_witness(set: &[BigRational], w: &LacunaryWitness) -> Result<bool> {
    w.validate()?;
    let mut s = set.to_vec();
    s.sort();
    s.dedup();
    Ok(w.holds(&s))
}

/// Affine frame `x = shift + scale·y` that puts a finite set into `[0, 1)`.
///
/// Prefers `shift = k·M^L`, `scale = M^L`, which keeps M-adic cubes aligned.
#[derive(Clone, Debug)]
struct Frame {
    shift: BigRational,
    scale: BigRational,
}

impl Frame {
    fn for_points(points: &[BigRational], m: u32) -> Frame {
        let (Some(min), Some(max)) = (points.iter().min(), points.iter().max()) else {
            return Frame {
                shift: BigRational::zero(),
                scale: BigRational::one(),
            };
        };
        let width = max - min;
        let mut l: i64 = 0;
        while rpow(m, l) <= width {
            l += 1;
        }
        while l > i64::MIN / 2 && rpow(m, l - 1) > width && !width.is_zero() {
            l -= 1;
        }
        // smallest aligned m-adic cube containing the points, if any
        for t in 0..64 {
            let scale = rpow(m, l + t);
            let k = (min / &scale).floor();
            if (max / &scale).floor() == k {
                return Frame {
                    shift: k * &scale,
                    scale,
                };
            }
        }
        Frame {
            shift: min.clone(),
            scale: rpow(m, l),
        }
    }

    fn to_unit(&self, x: &BigRational) -> BigRational {
        (x - &self.shift) / &self.scale
    }

    fn from_unit(&self, y: &BigRational) -> BigRational {
        &self.shift + &self.scale * y
    }
}

/// Height of the deepest M-adic interval containing both `x ≠ y` in `[0,1)`.
fn dca_height(x: &BigRational, y: &BigRational, m: u32) -> u64 {
    let same = |h: u64| {
        let p = BigRational::from_integer(big_pow(m, h));
        (x * &p).floor() == (y * &p).floor()
    };
    let mut hi = 1u64;
    while same(hi) {
        hi *= 2;
    }
    let mut lo = hi / 2;
    // same(lo) holds, same(hi) fails
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if same(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Clone, Debug)]
struct TrieNode {
    lo: usize,
    hi: usize,
    /// height of the splitting vertex (meaningless for single points)
    height: u64,
    children: Vec<usize>,
    split: u32,
}

/// Compressed M-adic trie of a finite subset of `[0, 1)`.
///
/// Only splitting vertices are stored; a node is a run of consecutive points
/// and its children are the runs separated where the common-ancestor height
/// of neighbours equals the node height.
#[derive(Clone, Debug)]
struct Trie {
    m: u32,
    pts: Vec<BigRational>,
    nodes: Vec<TrieNode>,
}

impl Trie {
    fn new(mut pts: Vec<BigRational>, m: u32) -> Trie {
        pts.sort();
        pts.dedup();
        let n = pts.len();
        let gaps: Vec<u64> = pts
            .windows(2)
            .map(|w| dca_height(&w[0], &w[1], m))
            .collect();
        let mut nodes = Vec::new();
        if n == 0 {
            return Trie { m, pts, nodes };
        }
        nodes.push(TrieNode {
            lo: 0,
            hi: n,
            height: 0,
            children: Vec::new(),
            split: 0,
        });
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let (lo, hi) = (nodes[id].lo, nodes[id].hi);
            if hi - lo < 2 {
                continue;
            }
            let h = *gaps[lo..hi - 1].iter().min().unwrap();
            nodes[id].height = h;
            let mut start = lo;
            let mut kids = Vec::new();
            for i in lo..hi {
                if i == hi - 1 || gaps[i] == h {
                    let c = nodes.len();
                    nodes.push(TrieNode {
                        lo: start,
                        hi: i + 1,
                        height: 0,
                        children: Vec::new(),
                        split: 0,
                    });
                    kids.push(c);
                    stack.push(c);
                    start = i + 1;
                }
            }
            nodes[id].children = kids;
        }
        for id in (0..nodes.len()).rev() {
            let mut s: Vec<u32> = nodes[id].children.iter().map(|&c| nodes[c].split).collect();
            s.sort_unstable_by(|a, b| b.cmp(a));
            nodes[id].split = match s.len() {
                0 => 0,
                1 => s[0],
                _ => s[0].max(1 + s[1]),
            };
        }
        Trie { m, pts, nodes }
    }

    fn is_point(&self, id: usize) -> bool {
        self.nodes[id].hi - self.nodes[id].lo == 1
    }

    /// Ray through the maximal-split vertices below `start`, continued along
    /// first maximal children down to a point; returns the off-ray branches.
    fn ray(&self, start: usize) -> (usize, Vec<Hang>) {
        let mut hangs = Vec::new();
        let mut cur = start;
        let mut ray_path = Vec::new();
        while !self.is_point(cur) {
            let node = &self.nodes[cur];
            let best = node
                .children
                .iter()
                .map(|&c| self.nodes[c].split)
                .max()
                .unwrap();
            let next = *node
                .children
                .iter()
                .find(|&&c| self.nodes[c].split == best)
                .unwrap();
            ray_path.push((cur, next));
            cur = next;
        }
        let star = self.nodes[cur].lo;
        let a_star = &self.pts[star];
        for (r, next) in ray_path {
            let node = &self.nodes[r];
            let h = node.height;
            let p = BigRational::from_integer(big_pow(self.m, h + 1));
            for &c in &node.children {
                if c == next {
                    continue;
                }
                let x = &self.pts[self.nodes[c].lo];
                let cell = (x * &p).floor();
                let digit = cell.to_integer().mod_floor(&BigInt::from(self.m));
                hangs.push(Hang {
                    node: c,
                    height: h,
                    digit: digit.try_into().unwrap_or(0),
                    above: x > a_star,
                    corner: cell / &p,
                    side: p.recip(),
                });
            }
        }
        (star, hangs)
    }
}

#[derive(Clone, Debug)]
struct Hang {
    node: usize,
    height: u64,
    digit: u32,
    above: bool,
    corner: BigRational,
    side: BigRational,
}

/// Groups branches by side of the limit and child digit, then thins each
/// group into three classes by position, giving lacunary sequences.
fn group_sequences(hangs: &[Hang]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(bool, u32), Vec<usize>> = BTreeMap::new();
    for (i, h) in hangs.iter().enumerate() {
        groups.entry((h.above, h.digit)).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut g) in groups {
        g.sort_by_key(|&i| hangs[i].height);
        debug_assert!(g
            .windows(2)
            .all(|w| hangs[w[0]].height < hangs[w[1]].height));
        for l in 0..3 {
            let cls: Vec<usize> = g.iter().skip(l).step_by(3).copied().collect();
            if !cls.is_empty() {
                out.push(cls);
            }
        }
    }
    out
}

/// Split-one decomposition of the subtree at `node`: point-index sequences
/// with the index of their common limit.
fn split_one_indices(trie: &Trie, node: usize) -> (usize, Vec<Vec<usize>>) {
    let (star, hangs) = trie.ray(node);
    let mut seqs: Vec<Vec<usize>> = group_sequences(&hangs)
        .into_iter()
        .map(|g| {
            g.into_iter()
                .map(|i| trie.nodes[hangs[i].node].lo)
                .collect()
        })
        .collect();
    match seqs.first_mut() {
        Some(s) => s.push(star),
        None => seqs.push(vec![star]),
    }
    (star, seqs)
}

/// Splitting number of the M-adic tree of a finite set of rationals, after
/// an M-adic-aligned affine normalization into `[0, 1)`.
pub fn splitting_number_1d(set: &[BigRational], m: u32) -> Result<u32> {
    Grid::new(m, 1)?;
    let frame = Frame::for_points(set, m);
    let trie = Trie::new(set.iter().map(|x| frame.to_unit(x)).collect(), m);
    Ok(trie.nodes.first().map(|n| n.split).unwrap_or(0))
}

/// Covers a set of splitting number 1 by at most `6M` lacunary sequences with
/// constant `1/M`, all converging to the point on the splitting ray.
pub fn decompose_split_one(set: &[BigRational], m: u32) -> Result<Vec<LacunarySequence>> {
    Grid::new(m, 1)?;
    let frame = Frame::for_points(set, m);
    let trie = Trie::new(set.iter().map(|x| frame.to_unit(x)).collect(), m);
    if trie.pts.is_empty() {
        return Ok(Vec::new());
    }
    let split = trie.nodes[0].split;
    if trie.pts.len() > 1 && split != 1 {
        return Err(Error::validation(format!(
            "splitting number is {split}, expected 1"
        )));
    }
    let (star, seqs) = split_one_indices(&trie, 0);
    let limit = frame.from_unit(&trie.pts[star]);
    Ok(seqs
        .into_iter()
        .map(|s| LacunarySequence {
            terms: s.iter().map(|&i| frame.from_unit(&trie.pts[i])).collect(),
            limit: limit.clone(),
        })
        .collect())
}

/// A piece of a decomposition with its witness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LacunaryPiece {
    #[serde(with = "rational_str::vec")]
    pub points: Vec<BigRational>,
    pub witness: LacunaryWitness,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LacunaryDecomposition {
    pub base: u32,
    /// splitting number of the normalized set
    pub split: u32,
    /// largest witness order among the pieces
    pub order: u32,
    pub pieces: Vec<LacunaryPiece>,
}

impl LacunaryDecomposition {
    pub fn fan_out(&self) -> usize {
        self.pieces.len()
    }
}

/// Covers a finite set by finitely many sets in `Λ(N; 1/M)` with `N` its
/// splitting number, recursing along the maximal-split ray.
pub fn decompose_lacunary_order(set: &[BigRational], m: u32) -> Result<LacunaryDecomposition> {
    Grid::new(m, 1)?;
    let frame = Frame::for_points(set, m);
    let trie = Trie::new(set.iter().map(|x| frame.to_unit(x)).collect(), m);
    let lambda = BigRational::new(BigInt::one(), BigInt::from(m));
    if trie.pts.is_empty() {
        return Ok(LacunaryDecomposition {
            base: m,
            split: 0,
            order: 0,
            pieces: Vec::new(),
        });
    }
    let raw = decompose_node(&trie, 0, &lambda);
    let mut pieces = Vec::with_capacity(raw.len());
    for (idx, w) in raw {
        let mut points: Vec<BigRational> =
            idx.iter().map(|&i| frame.from_unit(&trie.pts[i])).collect();
        points.sort();
        pieces.push(LacunaryPiece {
            points,
            witness: w.affine_image(&frame.scale, &frame.shift)?,
        });
    }
    let order = pieces.iter().map(|p| p.witness.order).max().unwrap_or(0);
    Ok(LacunaryDecomposition {
        base: m,
        split: trie.nodes[0].split,
        order,
        pieces,
    })
}

fn decompose_node(
    trie: &Trie,
    node: usize,
    lambda: &BigRational,
) -> Vec<(Vec<usize>, LacunaryWitness)> {
    let n = &trie.nodes[node];
    if n.split == 0 {
        debug_assert!(trie.is_point(node));
        return vec![(vec![n.lo], LacunaryWitness::leaf(lambda.clone()))];
    }
    if n.split == 1 {
        let (star, seqs) = split_one_indices(trie, node);
        let limit = trie.pts[star].clone();
        return seqs
            .into_iter()
            .map(|s| {
                let terms: Vec<BigRational> = s.iter().map(|&i| trie.pts[i].clone()).collect();
                let w = LacunarySequence {
                    terms,
                    limit: limit.clone(),
                }
                .witness(lambda.clone());
                (s, w)
            })
            .collect();
    }
    let (star, hangs) = trie.ray(node);
    let alpha = trie.pts[star].clone();
    let sub: Vec<Vec<(Vec<usize>, LacunaryWitness)>> = hangs
        .iter()
        .map(|h| decompose_node(trie, h.node, lambda))
        .collect();
    let mut out: Vec<(Vec<usize>, LacunaryWitness)> = Vec::new();
    let mut star_placed = false;
    for group in group_sequences(&hangs) {
        let depth = group.iter().map(|&i| sub[i].len()).max().unwrap_or(0);
        for piece in 0..depth {
            let members: Vec<usize> = group
                .iter()
                .copied()
                .filter(|&i| sub[i].len() > piece)
                .collect();
            let mut points = Vec::new();
            let mut seq = Vec::new();
            let mut children = Vec::new();
            for &i in &members {
                let (idx, w) = &sub[i][piece];
                points.extend_from_slice(idx);
                seq.push(hangs[i].corner.clone());
                children.push((hangs[i].corner.clone(), w.clone()));
            }
            let above = hangs[members[0]].above;
            if above {
                // one more term beyond the top branch so its whole cube is
                // inside a gap
                let top = members
                    .iter()
                    .max_by(|&&a, &&b| hangs[a].corner.cmp(&hangs[b].corner))
                    .unwrap();
                let (c, s) = (&hangs[*top].corner, &hangs[*top].side);
                let far = (c - &alpha) * BigRational::from_integer(BigInt::from(trie.m));
                let reach = c + s - &alpha;
                seq.push(&alpha + far.max(reach));
            }
            if !star_placed {
                points.push(star);
                if above {
                    children.push((alpha.clone(), LacunaryWitness::leaf(lambda.clone())));
                }
                star_placed = true;
            }
            let w = LacunaryWitness::assemble(lambda.clone(), seq, alpha.clone(), children);
            out.push((points, w));
        }
    }
    out
}

/// Order-2 cover of `{a^{-j} + b^{-k} : 0 ≤ j, k ≤ j_max}` for `2 ≤ a < b`,
/// split by which term dominates.
///
/// Where `b^{-k} ≥ a^{1-j}` the special sequence is `{b^{-k}}`, where
/// `b^{-k} ≤ a^{-j}` it is `{a^{-j}}`, and the remaining points (one `k` per
/// `j`) are thinned into order-1 sequences towards 0. All constants are `1/a`.
pub fn decompose_two_scale(a: u32, b: u32, j_max: u32) -> Result<Vec<LacunaryPiece>> {
    if a < 2 || b <= a {
        return Err(Error::validation("two-scale decomposition needs 2 ≤ a < b"));
    }
    let lambda = BigRational::new(BigInt::one(), BigInt::from(a));
    let ap = |j: i64| rpow(a, -j);
    let bp = |k: i64| rpow(b, -k);
    let jm = j_max as i64;
    let mut by_b: BTreeMap<i64, Vec<BigRational>> = BTreeMap::new();
    let mut by_a: BTreeMap<i64, Vec<BigRational>> = BTreeMap::new();
    let mut mixed: BTreeMap<i64, BigRational> = BTreeMap::new();
    for j in 0..=jm {
        for k in 0..=jm {
            let (x, y) = (ap(j), bp(k));
            if y >= ap(j - 1) {
                by_b.entry(k).or_default().push(x + y);
            } else if y <= x {
                by_a.entry(j).or_default().push(x + y);
            } else {
                let prev = mixed.insert(j, x + y);
                debug_assert!(prev.is_none());
            }
        }
    }
    let nested = |outer: &BTreeMap<i64, Vec<BigRational>>,
                  base: &dyn Fn(i64) -> BigRational|
     -> Option<LacunaryPiece> {
        let (&lo, _) = outer.iter().next()?;
        let (&hi, _) = outer.iter().next_back()?;
        let seq: Vec<BigRational> = (lo - 1..=hi).map(base).collect();
        let mut children = Vec::new();
        let mut points = Vec::new();
        for (&e, pts) in outer {
            let limit = base(e);
            let mut terms = pts.clone();
            terms.sort_by(|x, y| y.cmp(x));
            points.extend(terms.iter().cloned());
            children.push((
                limit.clone(),
                LacunarySequence { terms, limit }.witness(lambda.clone()),
            ));
        }
        points.sort();
        let w = LacunaryWitness::assemble(lambda.clone(), seq, BigRational::zero(), children);
        Some(LacunaryPiece { points, witness: w })
    };
    let mut out = Vec::new();
    out.extend(nested(&by_b, &bp));
    out.extend(nested(&by_a, &ap));
    // (a+1)/(2 a^s) ≤ 1/a
    let mut step = 1usize;
    while BigRational::from_integer(BigInt::from(a + 1)) * rpow(a, 1 - step as i64)
        > BigRational::from_integer(2.into())
    {
        step += 1;
    }
    let terms: Vec<BigRational> = mixed.into_values().collect();
    for r in 0..step {
        let t: Vec<BigRational> = terms.iter().skip(r).step_by(step).cloned().collect();
        if t.is_empty() {
            continue;
        }
        let seq = LacunarySequence {
            terms: t.clone(),
            limit: BigRational::zero(),
        };
        let mut points = t;
        points.sort();
        out.push(LacunaryPiece {
            points,
            witness: seq.witness(lambda.clone()),
        });
    }
    Ok(out)
}

/// Scalar projections `x·ω / |ω|²`, one per point (a multiset).
pub fn project(points: &[Vec<BigRational>], direction: &[BigRational]) -> Result<Vec<BigRational>> {
    let norm2: BigRational = direction.iter().map(|w| w * w).sum();
    if norm2.is_zero() {
        return Err(Error::validation("projection direction must be nonzero"));
    }
    points
        .iter()
        .map(|p| {
            if p.len() != direction.len() {
                return Err(Error::validation("point and direction dimensions differ"));
            }
            let dot: BigRational = p.iter().zip(direction).map(|(x, w)| x * w).sum();
            Ok(dot / &norm2)
        })
        .collect()
}

/// Intersection of the cone over `Ω` with the hyperplane `{x_axis = 1}`.
pub fn cone_section(omega: &[Vec<BigRational>], axis: usize) -> Result<Vec<Vec<BigRational>>> {
    omega
        .iter()
        .map(|w| {
            let c = w
                .get(axis)
                .ok_or_else(|| Error::validation("axis index out of range"))?;
            if c.is_zero() {
                return Err(Error::validation(
                    "direction has a zero component on the section axis",
                ));
            }
            Ok(w.iter().map(|x| x / c).collect())
        })
        .collect()
}

/// For each projected value, the lexicographically least point projecting
/// onto it along coordinate `axis`.
pub fn projection_selection(points: &[Vec<BigRational>], axis: usize) -> Vec<Vec<BigRational>> {
    let mut best: BTreeMap<BigRational, Vec<BigRational>> = BTreeMap::new();
    for p in points {
        let e = best.entry(p[axis].clone()).or_insert_with(|| p.clone());
        if p < e {
            *e = p.clone();
        }
    }
    best.into_values().collect()
}

/// Splitting numbers of `π_axis(W)` and of the selection `W_axis`, both on
/// their own M-adic trees at the separating height.
pub fn projection_split_pair(
    points: &[Vec<BigRational>],
    axis: usize,
    m: u32,
) -> Result<(u32, u32)> {
    let sel = projection_selection(points, axis);
    let proj: Vec<BigRational> = sel.iter().map(|p| p[axis].clone()).collect();
    let j = separating_height(&sel, m)?;
    let tree = encode_set(&sel, m, j)?;
    let pj = separating_height(&proj.iter().map(|x| vec![x.clone()]).collect::<Vec<_>>(), m)?;
    let ptree = encode_set(
        &proj.iter().map(|x| vec![x.clone()]).collect::<Vec<_>>(),
        m,
        pj,
    )?;
    Ok((ptree.splitting_number(), tree.splitting_number()))
}

/// Split number of one projection of a point set.
///
/// A large value along some direction is evidence of sublacunarity; finite
/// samples can never prove it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionEvidence {
    #[serde(with = "rational_str::vec")]
    pub direction: Vec<BigRational>,
    pub split: u32,
    pub distinct: usize,
}

/// Coordinate axes plus every `(1, ±1, …, ±1)`.
pub fn default_directions(n: usize) -> Vec<Vec<BigRational>> {
    let one = BigRational::one();
    let mut out = Vec::new();
    for i in 0..n {
        let mut e = vec![BigRational::zero(); n];
        e[i] = one.clone();
        out.push(e);
    }
    if n >= 2 {
        for mask in 0..(1u64 << (n - 1)) {
            let mut v = vec![one.clone()];
            for k in 0..n - 1 {
                v.push(if mask >> k & 1 == 1 {
                    -one.clone()
                } else {
                    one.clone()
                });
            }
            out.push(v);
        }
    }
    out
}

pub fn projection_evidence(
    points: &[Vec<BigRational>],
    directions: &[Vec<BigRational>],
    m: u32,
) -> Result<Vec<DirectionEvidence>> {
    directions
        .iter()
        .map(|dir| {
            let mut proj = project(points, dir)?;
            proj.sort();
            proj.dedup();
            Ok(DirectionEvidence {
                direction: dir.clone(),
                split: splitting_number_1d(&proj, m)?,
                distinct: proj.len(),
            })
        })
        .collect()
}

/// A random finite set in `[0,1)` of splitting number exactly 1 (or 0 when no
/// branch is drawn): one ray of random digits with isolated points hanging off
/// it.
pub fn random_split_one_set(m: u32, depth: u32, seed: u64) -> Vec<BigRational> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ray: Vec<u32> = (0..depth).map(|_| rng.gen_range(0..m)).collect();
    let value = |digits: &[u32]| -> BigRational {
        let mut acc = BigRational::zero();
        let mut scale = BigRational::one();
        let mq = BigRational::from_integer(BigInt::from(m));
        for &d in digits {
            scale /= &mq;
            acc += &scale * BigRational::from_integer(BigInt::from(d));
        }
        acc
    };
    let mut out = vec![value(&ray)];
    for h in 0..depth as usize {
        for digit in 0..m {
            if digit == ray[h] || !rng.gen_bool(0.5) {
                continue;
            }
            let mut ds = ray[..h].to_vec();
            ds.push(digit);
            let tail = rng.gen_range(0..4);
            for _ in 0..tail {
                ds.push(rng.gen_range(0..m));
            }
            out.push(value(&ds));
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Which of the two-sided counterexample sets to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UvPart {
    U,
    V,
    Sum,
    Product,
}

/// Parameterized example sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// base-`b` expansions of length `level` with digits in `{0, b−1}`
    Cantor {
        level: u32,
        #[serde(default = "default_cantor_base")]
        base: u32,
    },
    /// `{k / 2^m : 0 ≤ k < 2^m}`
    Dyadic { m: u32 },
    /// `{λ^j : 1 ≤ j ≤ j_max}`
    Power {
        #[serde(with = "rational_str")]
        lambda: BigRational,
        j_max: u32,
    },
    /// `{a^{-j} + b^{-k} : 0 ≤ j, k ≤ j_max}`
    TwoScale { a: u32, b: u32, j_max: u32 },
    /// `{(θ^{j m_1}, …, θ^{j m_d}) : 1 ≤ j ≤ j_max}`
    Nsw {
        exponents: Vec<u32>,
        #[serde(with = "rational_str")]
        theta: BigRational,
        j_max: u32,
    },
    /// `{(λ^{k_1}, …, λ^{k_d}) : 1 ≤ k_i ≤ k_max}`, optionally `k_1 ≤ … ≤ k_d`
    Carbery {
        #[serde(with = "rational_str")]
        lambda: BigRational,
        d: u32,
        k_max: u32,
        #[serde(default)]
        ordered: bool,
    },
    /// the sets `U`, `V` with `N_j = 2^{j²}`, `M_j = 2^j`, `j ≤ j_max`, and
    /// their sum or product
    CounterexampleUv { j_max: u32, part: UvPart },
    /// `{(q_ℓ 2^{-ℓ}, 2^{-ℓ}, 1) : 1 ≤ ℓ ≤ l_max}` with `q_ℓ` the
    /// Stern–Brocot enumeration of the rationals in `[lo, hi]`
    ParcetRogers {
        l_max: u32,
        #[serde(with = "rational_str", default = "default_pr_lo")]
        lo: BigRational,
        #[serde(with = "rational_str", default = "default_pr_hi")]
        hi: BigRational,
    },
}

fn default_cantor_base() -> u32 {
    3
}
fn default_pr_lo() -> BigRational {
    BigRational::new(1.into(), 2.into())
}
fn default_pr_hi() -> BigRational {
    BigRational::new(2.into(), 3.into())
}

/// Size limits for generated sets.
#[derive(Clone, Copy, Debug)]
pub struct GenerateLimits {
    pub max_denominator_bits: u64,
    pub max_points: usize,
}

impl Default for GenerateLimits {
    fn default() -> Self {
        GenerateLimits {
            max_denominator_bits: 512,
            max_points: 1 << 22,
        }
    }
}

impl FromStr for GeneratorSpec {
    type Err = Error;

    /// Parses `kind:key=value,key=value`, e.g. `cantor:L=6` or
    /// `nsw:exponents=1;2,theta=1/2,J=8`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for item in rest.split(',').filter(|x| !x.trim().is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("expected key=value, got {item}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |keys: &[&str]| keys.iter().find_map(|k| kv.get(*k)).cloned();
        let int = |keys: &[&str], default: Option<u32>| -> Result<u32> {
            match get(keys) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::validation(format!("{} must be an integer", keys[0]))),
                None => default
                    .ok_or_else(|| Error::validation(format!("missing parameter {}", keys[0]))),
            }
        };
        let rat = |keys: &[&str], default: Option<BigRational>| -> Result<BigRational> {
            match get(keys) {
                Some(v) => parse_rational(&v)
                    .ok_or_else(|| Error::validation(format!("{} must be rational", keys[0]))),
                None => default
                    .ok_or_else(|| Error::validation(format!("missing parameter {}", keys[0]))),
            }
        };
        let half = Some(BigRational::new(1.into(), 2.into()));
        Ok(match kind.trim() {
            "cantor" => GeneratorSpec::Cantor {
                level: int(&["L", "level"], None)?,
                base: int(&["base", "b"], Some(3))?,
            },
            "dyadic" => GeneratorSpec::Dyadic {
                m: int(&["m"], None)?,
            },
            "power" => GeneratorSpec::Power {
                lambda: rat(&["lambda"], half)?,
                j_max: int(&["J", "j_max"], None)?,
            },
            "two-scale" | "two_scale" => GeneratorSpec::TwoScale {
                a: int(&["a"], Some(2))?,
                b: int(&["b"], Some(3))?,
                j_max: int(&["J", "j_max"], None)?,
            },
            "nsw" => GeneratorSpec::Nsw {
                exponents: get(&["exponents", "m"])
                    .ok_or_else(|| Error::validation("missing parameter exponents"))?
                    .split(';')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::validation("exponents must be integers"))
                    })
                    .collect::<Result<_>>()?,
                theta: rat(&["theta", "lambda"], half)?,
                j_max: int(&["J", "j_max"], None)?,
            },
            "carbery" => GeneratorSpec::Carbery {
                lambda: rat(&["lambda"], half)?,
                d: int(&["d"], Some(2))?,
                k_max: int(&["k", "k_max"], None)?,
                ordered: matches!(get(&["ordered"]).as_deref(), Some("true" | "1")),
            },
            "uv" | "counterexample-uv" | "counterexample_uv" => GeneratorSpec::CounterexampleUv {
                j_max: int(&["j", "j_max"], None)?,
                part: match get(&["part"]).as_deref().unwrap_or("sum") {
                    "u" | "U" => UvPart::U,
                    "v" | "V" => UvPart::V,
                    "sum" => UvPart::Sum,
                    "product" => UvPart::Product,
                    other => return Err(Error::validation(format!("unknown part {other}"))),
                },
            },
            "parcet-rogers" | "parcet_rogers" => GeneratorSpec::ParcetRogers {
                l_max: int(&["l", "l_max"], None)?,
                lo: rat(&["lo"], default_pr_lo().into())?,
                hi: rat(&["hi"], default_pr_hi().into())?,
            },
            other => return Err(Error::validation(format!("unknown generator {other}"))),
        })
    }
}

/// The first `count` rationals of `[lo, hi]` in breadth-first Stern–Brocot
/// order (by tree depth, then increasing).
pub fn stern_brocot(lo: &BigRational, hi: &BigRational, count: usize) -> Vec<BigRational> {
    // node = (left bound, right bound) as (num, den) pairs; right may be 1/0
    type Frac = (BigInt, BigInt);
    let below = |a: &Frac, x: &BigRational| -> bool {
        // a < x, with a possibly infinite
        !a.1.is_zero() && BigRational::new(a.0.clone(), a.1.clone()) < *x
    };
    let mut out = Vec::new();
    let mut level: Vec<(Frac, Frac)> = vec![(
        (BigInt::zero(), BigInt::one()),
        (BigInt::one(), BigInt::zero()),
    )];
    while !level.is_empty() && out.len() < count {
        let mut next = Vec::new();
        for (l, r) in level {
            // open interval (l, r) must meet [lo, hi]
            let l_ok = below(&l, &(hi + BigRational::zero())) || l.0.is_zero() && !hi.is_negative();
            let r_ok = r.1.is_zero()
                || !below(&r, lo) && BigRational::new(r.0.clone(), r.1.clone()) != *lo;
            if !(l_ok && r_ok) {
                continue;
            }
            let med: Frac = (&l.0 + &r.0, &l.1 + &r.1);
            let mv = BigRational::new(med.0.clone(), med.1.clone());
            if &mv >= lo && &mv <= hi && out.len() < count {
                out.push(mv);
            }
            next.push((l, med.clone()));
            next.push((med, r));
        }
        level = next;
    }
    out
}

fn check_point(p: &[BigRational], lim: &GenerateLimits) -> Result<()> {
    for x in p {
        if x.denom().bits() > lim.max_denominator_bits {
            return Err(Error::validation(format!(
                "denominator of {} bits exceeds the cap of {}",
                x.denom().bits(),
                lim.max_denominator_bits
            )));
        }
    }
    Ok(())
}

impl GeneratorSpec {
    pub fn dimension(&self) -> usize {
        match self {
            GeneratorSpec::Nsw { exponents, .. } => exponents.len(),
            GeneratorSpec::Carbery { d, .. } => *d as usize,
            GeneratorSpec::CounterexampleUv {
                part: UvPart::Product,
                ..
            } => 2,
            GeneratorSpec::ParcetRogers { .. } => 3,
            _ => 1,
        }
    }

    fn expected_points(&self) -> Option<u128> {
        match self {
            GeneratorSpec::Cantor { level, .. } => 2u128.checked_pow(*level),
            GeneratorSpec::Dyadic { m } => 2u128.checked_pow(*m),
            GeneratorSpec::Carbery { d, k_max, .. } => (*k_max as u128).checked_pow(*d),
            _ => Some(0),
        }
    }

    /// Deterministic finite point set, sorted.
    pub fn generate(&self, lim: &GenerateLimits) -> Result<Vec<Vec<BigRational>>> {
        match self.expected_points() {
            Some(n) if n <= lim.max_points as u128 => {}
            _ => return Err(Error::validation("generator would exceed the point cap")),
        }
        let one = BigRational::one();
        let r = |n: i64, d: i64| BigRational::new(n.into(), d.into());
        let mut pts: Vec<Vec<BigRational>> = match self {
            GeneratorSpec::Cantor { level, base } => {
                Grid::new(*base, 1)?;
                let mut v = vec![BigRational::zero()];
                for k in 1..=*level as i64 {
                    let s = rpow(*base, -k) * BigRational::from_integer(BigInt::from(base - 1));
                    v = v.iter().flat_map(|x| [x.clone(), x + &s]).collect();
                }
                v.into_iter().map(|x| vec![x]).collect()
            }
            GeneratorSpec::Dyadic { m } => {
                let den = big_pow(2, *m as u64);
                let mut v = Vec::new();
                let mut k = BigInt::zero();
                while k < den {
                    v.push(vec![BigRational::new(k.clone(), den.clone())]);
                    k += 1;
                }
                v
            }
            GeneratorSpec::Power { lambda, j_max } => {
                let mut v = Vec::new();
                let mut x = one.clone();
                for _ in 0..*j_max {
                    x *= lambda;
                    check_point(std::slice::from_ref(&x), lim)?;
                    v.push(vec![x.clone()]);
                }
                v
            }
            GeneratorSpec::TwoScale { a, b, j_max } => {
                let mut v = Vec::new();
                for j in 0..=*j_max as i64 {
                    for k in 0..=*j_max as i64 {
                        v.push(vec![rpow(*a, -j) + rpow(*b, -k)]);
                    }
                }
                v
            }
            GeneratorSpec::Nsw {
                exponents,
                theta,
                j_max,
            } => {
                if exponents.is_empty()
                    || exponents.windows(2).any(|w| w[0] >= w[1])
                    || exponents[0] == 0
                {
                    return Err(Error::validation(
                        "exponents must be positive and increasing",
                    ));
                }
                (1..=*j_max as usize)
                    .map(|j| {
                        exponents
                            .iter()
                            .map(|&e| num_traits::pow(theta.clone(), j * e as usize))
                            .collect()
                    })
                    .collect()
            }
            GeneratorSpec::Carbery {
                lambda,
                d,
                k_max,
                ordered,
            } => {
                let mut v = Vec::new();
                let mut ks = vec![1u32; *d as usize];
                if *k_max == 0 || *d == 0 {
                    return Ok(Vec::new());
                }
                loop {
                    if !*ordered || ks.windows(2).all(|w| w[0] <= w[1]) {
                        v.push(
                            ks.iter()
                                .map(|&k| num_traits::pow(lambda.clone(), k as usize))
                                .collect(),
                        );
                    }
                    let mut i = 0;
                    loop {
                        if i == ks.len() {
                            return finish(v, lim);
                        }
                        ks[i] += 1;
                        if ks[i] <= *k_max {
                            break;
                        }
                        ks[i] = 1;
                        i += 1;
                    }
                }
            }
            GeneratorSpec::CounterexampleUv { j_max, part } => {
                let (u, v) = uv_sets(*j_max, lim)?;
                match part {
                    UvPart::U => u.into_iter().map(|x| vec![x]).collect(),
                    UvPart::V => v.into_iter().map(|x| vec![x]).collect(),
                    UvPart::Sum => {
                        if u.len() * v.len() > lim.max_points {
                            return Err(Error::validation("generator would exceed the point cap"));
                        }
                        u.iter()
                            .flat_map(|a| v.iter().map(move |b| vec![a + b]))
                            .collect()
                    }
                    UvPart::Product => {
                        if u.len() * v.len() > lim.max_points {
                            return Err(Error::validation("generator would exceed the point cap"));
                        }
                        u.iter()
                            .flat_map(|a| v.iter().map(move |b| vec![a.clone(), b.clone()]))
                            .collect()
                    }
                }
            }
            GeneratorSpec::ParcetRogers { l_max, lo, hi } => {
                if lo >= hi || lo.is_negative() {
                    return Err(Error::validation(
                        "Stern–Brocot interval must satisfy 0 ≤ lo < hi",
                    ));
                }
                let qs = stern_brocot(lo, hi, *l_max as usize);
                qs.iter()
                    .enumerate()
                    .map(|(l, q)| {
                        let s = r(1, 1) / BigRational::from_integer(big_pow(2, l as u64 + 1));
                        vec![q * &s, s, one.clone()]
                    })
                    .collect()
            }
        };
        pts.sort();
        pts.dedup();
        finish(pts, lim)
    }

    /// Tree encoding. Cantor in its own base and dyadic in base 2 are encoded
    /// by digit rules and never materialize points.
    pub fn tree(&self, m: u32, height: Option<u32>) -> Result<MadicTree> {
        match self {
            GeneratorSpec::Cantor { level, base } if *base == m => {
                let grid = Grid::new(m, 1)?;
                let rules = vec![vec![0, m - 1]; *level as usize];
                MadicTree::from_rules(grid, rules, height.unwrap_or(*level).max(*level))
            }
            GeneratorSpec::Dyadic { m: k } if m == 2 => {
                let grid = Grid::new(2, 1)?;
                MadicTree::from_rules(
                    grid,
                    vec![vec![0, 1]; *k as usize],
                    height.unwrap_or(*k).max(*k),
                )
            }
            _ => {
                let pts = self.generate(&GenerateLimits::default())?;
                let j = match height {
                    Some(h) => h,
                    None => separating_height(&pts, m)?,
                };
                encode_set(&pts, m, j)
            }
        }
    }
}

fn finish(mut pts: Vec<Vec<BigRational>>, lim: &GenerateLimits) -> Result<Vec<Vec<BigRational>>> {
    if pts.len() > lim.max_points {
        return Err(Error::validation("generator would exceed the point cap"));
    }
    pts.sort();
    pts.dedup();
    for p in &pts {
        check_point(p, lim)?;
    }
    Ok(pts)
}

/// `U = ⋃_j {2^{-N_j+k} + q_{jk}}` and `V = {−2^{-i} : i ≤ N_{j_max}}` with
/// `N_j = 2^{j²}`, `M_j = 2^j`, `q_{jk} = 2^{-N_j}(1 + k 2^{-j})`.
fn uv_sets(j_max: u32, lim: &GenerateLimits) -> Result<(Vec<BigRational>, Vec<BigRational>)> {
    if j_max == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    if j_max * j_max > 62 {
        return Err(Error::validation("j_max too large"));
    }
    let n_of = |j: u32| 1u64 << (j * j);
    if n_of(j_max) + j_max as u64 + 1 > lim.max_denominator_bits {
        return Err(Error::validation("denominators exceed the cap"));
    }
    let mut u = Vec::new();
    for j in 1..=j_max {
        let nj = n_of(j) as i64;
        for k in 1..=(1i64 << j) {
            u.push(uv_q(j, k) + rpow(2, -nj + k));
        }
    }
    let v = (1..=n_of(j_max) as i64).map(|i| -rpow(2, -i)).collect();
    Ok((u, v))
}

/// `q_{jk} = 2^{-N_j}(1 + k 2^{-j})`.
pub fn uv_q(j: u32, k: i64) -> BigRational {
    let nj = 1i64 << (j * j);
    rpow(2, -nj) * (BigRational::one() + BigRational::from_integer(k.into()) * rpow(2, -(j as i64)))
}
