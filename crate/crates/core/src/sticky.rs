//! The randomized slope assignment `σ_X` driven by a warehouse of Bernoulli
//! bits, admissibility of prescribed root–slope collections, exact
//! probabilities of prescribed assignments, the closed forms for two, three
//! and four roots, and an exhaustive enumeration oracle.
//!
//! Root cubes live in the full M-adic tree of the root hyperplane, which uses
//! the same grid as the slope tree. A root cube has height `J`.

use std::collections::{BTreeMap, HashMap, HashSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::madic_tree::{Cube, Grid};
use crate::pruning::{PrunedSlopeTree, BINARY};

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `trial` under master seed `master`:
/// `splitmix64(master ^ splitmix64(trial + 0x632BE59BD9B4E019))`.
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    splitmix64(master ^ splitmix64(trial.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Anything that realizes the Bernoulli variable `X_Q` of a root-tree cube.
pub trait BitSource: Sync {
    fn bit(&self, q: Cube) -> u8;
}

/// Warehouse realized by hashing `(seed, height, address)`; every cube gets
/// an independent fair bit and a fixed seed reproduces the realization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashWarehouse {
    pub seed: u64,
}

impl BitSource for HashWarehouse {
    fn bit(&self, q: Cube) -> u8 {
        let lo = q.a as u64;
        let hi = (q.a >> 64) as u64;
        let key = splitmix64(splitmix64(lo ^ splitmix64(hi)) ^ q.h as u64);
        (splitmix64(self.seed ^ key) & 1) as u8
    }
}

/// Explicit partial realization; unspecified cubes read `default`.
#[derive(Clone, Debug, Default)]
pub struct ExplicitBits {
    pub bits: HashMap<Cube, u8>,
    pub default: u8,
}

impl BitSource for ExplicitBits {
    fn bit(&self, q: Cube) -> u8 {
        self.bits.get(&q).copied().unwrap_or(self.default)
    }
}

/// Realization with selected cubes overridden on top of another source.
pub struct Overridden<'a, B: BitSource> {
    pub base: &'a B,
    pub overrides: &'a HashMap<Cube, u8>,
}

impl<B: BitSource> BitSource for Overridden<'_, B> {
    fn bit(&self, q: Cube) -> u8 {
        self.overrides
            .get(&q)
            .copied()
            .unwrap_or_else(|| self.base.bit(q))
    }
}

/// Chain of basic spatial cubes containing a root cube and the bits read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chain {
    /// `Q_1(t) ⊋ … ⊋ Q_N(t) = t`
    pub basic: Vec<Cube>,
    /// the bit string `(X_{Q_1}, …, X_{Q_N})` as a binary cube
    pub label: Cube,
}

/// The sticky slope assignment determined by a pruned slope tree and a
/// warehouse realization.
pub struct StickyMap<'a, B: BitSource> {
    pub pruned: &'a PrunedSlopeTree,
    pub source: B,
}

/// `σ_X` with a hash-realized warehouse.
pub fn sample_assignment(pruned: &PrunedSlopeTree, seed: u64) -> StickyMap<'_, HashWarehouse> {
    StickyMap {
        pruned,
        source: HashWarehouse { seed },
    }
}

impl<'a, B: BitSource> StickyMap<'a, B> {
    pub fn new(pruned: &'a PrunedSlopeTree, source: B) -> Self {
        StickyMap { pruned, source }
    }

    pub fn grid(&self) -> Grid {
        self.pruned.grid
    }

    /// Basic spatial cubes over `t` and the bits they receive.
    pub fn chain(&self, t: Cube) -> Chain {
        let p = self.pruned;
        assert_eq!(t.h, p.j, "root cubes have height J");
        let mut g = p.gamma1().clone();
        let mut basic = Vec::with_capacity(p.n as usize);
        let mut label = Cube::ROOT;
        for j in 1..=p.n {
            let q = p.grid.ancestor(t, g.lambda);
            let x = self.source.bit(q);
            basic.push(q);
            label = BINARY.child(label, x as u32);
            if j < p.n {
                let next = g.first_split[x as usize];
                g = p
                    .split_vertex(next)
                    .expect("first split below a basic cube")
                    .clone();
            }
        }
        Chain { basic, label }
    }

    /// `σ(t)` as a leaf cube of the slope tree.
    pub fn sigma(&self, t: Cube) -> Cube {
        self.pruned
            .psi(self.chain(t).label)
            .expect("full-length label")
    }

    /// `σ(t)` as an index into the slope list.
    pub fn slope_index(&self, t: Cube) -> usize {
        self.pruned
            .slope_index(self.chain(t).label)
            .expect("full-length label")
    }

    /// Extension of `σ` to an arbitrary root-tree cube `q`: the vertex at
    /// height `h(q)` on the ray of `σ(Q_{j̄+1})`, where `Q_{j̄+1}` is the next
    /// basic spatial cube below `q` over the lexicographically first root
    /// cube inside `q`.
    pub fn extend_sticky(&self, q: Cube) -> Cube {
        let p = self.pruned;
        let t = Cube {
            h: p.j,
            a: q.a * p.grid.bpow(p.j - q.h),
        };
        p.grid.ancestor(self.sigma(t), q.h)
    }

    /// The cubes on which `σ` is prescribed by the construction over `t`:
    /// each basic spatial cube and each spatial cube of splitting height,
    /// paired with its image.
    pub fn prescribed(&self, t: Cube) -> Vec<(Cube, Cube)> {
        let p = self.pruned;
        let ch = self.chain(t);
        let g1 = p.gamma1().cube;
        let mut out = vec![(p.grid.ancestor(t, g1.h), g1)];
        let mut g = p.gamma1().clone();
        for (j, &q) in ch.basic.iter().enumerate() {
            let bits = BINARY.ancestor(ch.label, j as u32 + 1);
            let theta = p.psi(bits).unwrap();
            out.push((q, theta));
            if (j as u32 + 1) < p.n {
                let x = BINARY.last_digit(bits) as usize;
                g = p.split_vertex(g.first_split[x]).unwrap().clone();
                out.push((p.grid.ancestor(t, g.cube.h), g.cube));
            }
        }
        out
    }
}

/// `θ(ω, k)` and `μ(ω, k)`: the basic slope cube of maximal height `≤ k`
/// containing `ω`, and the number of basic slope cubes of index `>= 1` of
/// height `≤ k` containing `ω`. `θ` is `None` when `k < h(γ_1)`.
pub fn theta_mu(p: &PrunedSlopeTree, omega: Cube, k: u32) -> (Option<Cube>, u32) {
    let w = p.grid.bpow(p.j - omega.h);
    let i = p.leaves.partition_point(|c| c.a < omega.a * w);
    assert!(
        i < p.leaves.len() && p.grid.contains(omega, p.leaves[i]),
        "ω must be a slope-tree vertex"
    );
    let cap = k.min(omega.h);
    let bits = p.slope_bits(i);
    let mut theta = None;
    let mut mu = 0;
    for j in 0..=p.n {
        let c = p.psi(BINARY.ancestor(bits, j)).unwrap();
        if c.h <= cap {
            theta = Some(c);
            if j >= 1 {
                mu += 1;
            }
        }
    }
    (theta, mu)
}

pub fn mu(p: &PrunedSlopeTree, omega: Cube, k: u32) -> u32 {
    theta_mu(p, omega, k).1
}

/// `Q_u[ω, k]`: ancestor of `u` at height `η_μ` where `μ = μ(ω, k)`, i.e. the
/// root-tree cube identifying the vertex of height `μ(ω,k)` in `N(A;α)`.
pub fn q_u(p: &PrunedSlopeTree, u: Cube, omega: Cube, k: u32) -> Option<Cube> {
    let (theta, _) = theta_mu(p, omega, k);
    theta.map(|c| p.grid.ancestor(u, c.h.min(u.h)))
}

/// Admissibility of a prescribed collection `{(t, α(t))}` with the
/// certifying partial realization and the vertex counts of `N(A;α)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Admissibility {
    pub admissible: bool,
    /// required bit for each reference cube `Q*_j(t;α)`
    pub bits: BTreeMap<Cube, u8>,
    /// non-root vertices of `N(A;α)`
    pub tree_vertices: usize,
    /// distinct reference cubes
    pub distinct_cubes: usize,
}

fn check_tuple(p: &PrunedSlopeTree, roots: &[Cube], slopes: &[usize]) -> Result<()> {
    if roots.len() != slopes.len() || roots.is_empty() {
        return Err(Error::validation("need one slope per root"));
    }
    let uniq: HashSet<&Cube> = roots.iter().collect();
    if uniq.len() != roots.len() {
        return Err(Error::validation("duplicate root cubes"));
    }
    if roots.iter().any(|t| t.h != p.j) {
        return Err(Error::validation("root cubes must have height J"));
    }
    if slopes.iter().any(|&s| s >= p.len()) {
        return Err(Error::validation("slope index out of range"));
    }
    Ok(())
}

/// Reference cubes `Q*_j(t;α)` (ancestor of `t` at height `η_j(α(t))`) and
/// required bits `π_j Ψ^{-1} α(t)`.
pub fn reference_cubes(p: &PrunedSlopeTree, t: Cube, slope: usize) -> Vec<(Cube, u8)> {
    let bits = p.slope_bits(slope);
    let digits = BINARY.digits(bits);
    (1..=p.n)
        .map(|j| {
            (
                p.grid.ancestor(t, p.eta(slope, j)),
                digits[j as usize - 1] as u8,
            )
        })
        .collect()
}

pub fn is_sticky_admissible(
    p: &PrunedSlopeTree,
    roots: &[Cube],
    slopes: &[usize],
) -> Result<Admissibility> {
    check_tuple(p, roots, slopes)?;
    let mut bits = BTreeMap::new();
    let mut admissible = true;
    let mut tuples: HashSet<Vec<Cube>> = HashSet::new();
    for (&t, &s) in roots.iter().zip(slopes) {
        let refs = reference_cubes(p, t, s);
        for j in 0..refs.len() {
            let (q, b) = refs[j];
            if let Some(&old) = bits.get(&q) {
                if old != b {
                    admissible = false;
                }
            } else {
                bits.insert(q, b);
            }
            tuples.insert(refs[..=j].iter().map(|x| x.0).collect());
        }
    }
    Ok(Admissibility {
        admissible,
        distinct_cubes: bits.len(),
        bits,
        tree_vertices: tuples.len(),
    })
}

fn pow_half(n: u32) -> BigRational {
    BigRational::new(BigInt::one(), BigInt::from(2).pow(n))
}

/// `Pr(σ_X(t) = α(t) for all t ∈ A) = 2^{-n(A;α)}`.
pub fn prob_exact(p: &PrunedSlopeTree, roots: &[Cube], slopes: &[usize]) -> Result<BigRational> {
    let a = is_sticky_admissible(p, roots, slopes)?;
    if !a.admissible {
        return Err(Error::validation("collection is not sticky-admissible"));
    }
    Ok(pow_half(a.tree_vertices as u32))
}

/// Configuration types of three and four roots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConfigType {
    Two,
    /// `u' ⊊ u`
    Three1a,
    /// `u = u' = D(t_2, t_2')`
    Three1b,
    Three2,
    /// `u ∩ u' = ∅`
    Four1a,
    /// `u = u' = D(t_i, t'_j)` for all `i, j`
    Four1b,
    /// `u' ⊊ u`
    Four2,
    /// `u = u'` and some `D(t_i, t'_j) ⊊ u`
    Four3,
}

impl ConfigType {
    pub fn type_number(self) -> u8 {
        match self {
            ConfigType::Two => 0,
            ConfigType::Three1a | ConfigType::Three1b | ConfigType::Four1a | ConfigType::Four1b => {
                1
            }
            ConfigType::Three2 | ConfigType::Four2 => 2,
            ConfigType::Four3 => 3,
        }
    }
}

/// Type of a root tuple and the canonical permutation applied to it.
///
/// Three roots are read as `(t_1, t_2, t_2')` with `t_1` shared by both
/// pairs; four roots as `(t_1, t_2, t_1', t_2')`. `order[i]` is the input
/// position of the `i`-th root after canonicalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Classified {
    pub ty: ConfigType,
    pub order: Vec<usize>,
}

pub fn classify_roots(grid: &Grid, roots: &[Cube]) -> Result<Classified> {
    let uniq: HashSet<&Cube> = roots.iter().collect();
    if uniq.len() != roots.len() {
        return Err(Error::validation("duplicate root cubes"));
    }
    let d = |a: usize, b: usize| grid.dca(roots[a], roots[b]);
    match roots.len() {
        2 => Ok(Classified {
            ty: ConfigType::Two,
            order: vec![0, 1],
        }),
        3 => {
            let (mut u, mut up) = (d(0, 1), d(0, 2));
            let mut order = vec![0, 1, 2];
            if up.h < u.h {
                std::mem::swap(&mut u, &mut up);
                order = vec![0, 2, 1];
            }
            let t22 = grid.dca(roots[order[1]], roots[order[2]]);
            let ty = if u != up {
                ConfigType::Three1a
            } else if t22 == u {
                ConfigType::Three1b
            } else {
                ConfigType::Three2
            };
            Ok(Classified { ty, order })
        }
        4 => {
            let mut order = vec![0, 1, 2, 3];
            if d(0, 1).h > d(2, 3).h {
                order = vec![2, 3, 0, 1];
            }
            let r = |i: usize| roots[order[i]];
            let u = grid.dca(r(0), r(1));
            let up = grid.dca(r(2), r(3));
            let cross: Vec<Cube> = [(0, 2), (0, 3), (1, 2), (1, 3)]
                .iter()
                .map(|&(i, j)| grid.dca(r(i), r(j)))
                .collect();
            let ty = if !grid.contains(u, up) && !grid.contains(up, u) {
                ConfigType::Four1a
            } else if u != up {
                ConfigType::Four2
            } else if cross.iter().all(|&c| c == u) {
                ConfigType::Four1b
            } else {
                ConfigType::Four3
            };
            Ok(Classified { ty, order })
        }
        n => Err(Error::validation(format!(
            "classification needs 2, 3 or 4 roots, got {n}"
        ))),
    }
}

/// Closed-form probability with the quantities entering the exponent.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedForm {
    pub classified: Classified,
    pub exponent: u32,
    pub prob: BigRational,
    /// the height relations and nesting statements accompanying the closed form
    /// that fail for this input (empty when all hold)
    pub violated_relations: Vec<String>,
}

/// Cross pair `(i_2, j_2)` maximizing `h(D(t_i, t'_j))`, ties broken
/// lexicographically.
fn deepest_cross_pair(grid: &Grid, t: &[Cube; 2], tp: &[Cube; 2]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut bh = grid.dca(t[0], tp[0]).h;
    for (i, j) in [(0, 1), (1, 0), (1, 1)] {
        let h = grid.dca(t[i], tp[j]).h;
        if h > bh {
            bh = h;
            best = (i, j);
        }
    }
    best
}

fn nested(grid: &Grid, a: Cube, b: Cube) -> bool {
    grid.contains(a, b) || grid.contains(b, a)
}

/// Probability of a prescribed assignment from the root configuration type.
pub fn prob_closed_form(
    p: &PrunedSlopeTree,
    roots: &[Cube],
    slopes: &[usize],
) -> Result<ClosedForm> {
    check_tuple(p, roots, slopes)?;
    if roots.len() > 4 {
        return Err(Error::validation(
            "closed forms exist for at most four roots",
        ));
    }
    if roots.len() == 1 {
        let cl = Classified {
            ty: ConfigType::Two,
            order: vec![0],
        };
        return Ok(ClosedForm {
            classified: cl,
            exponent: p.n,
            prob: pow_half(p.n),
            violated_relations: vec![],
        });
    }
    let adm = is_sticky_admissible(p, roots, slopes)?;
    if !adm.admissible {
        return Err(Error::validation("collection is not sticky-admissible"));
    }
    let g = p.grid;
    let n = p.n;
    let cl = classify_roots(&g, roots)?;
    let t: Vec<Cube> = cl.order.iter().map(|&i| roots[i]).collect();
    let v: Vec<Cube> = cl.order.iter().map(|&i| p.leaves[slopes[i]]).collect();
    let mut bad = Vec::new();
    let mut need = |cond: bool, what: &str| {
        if !cond {
            bad.push(what.to_string());
        }
    };
    let exponent = match cl.ty {
        ConfigType::Two => {
            let u = g.dca(t[0], t[1]);
            let w = g.dca(v[0], v[1]);
            need(u.h <= w.h, "k <= h(ω)");
            2 * n - mu(p, w, u.h)
        }
        ConfigType::Three1a | ConfigType::Three1b => {
            let (u, up) = (g.dca(t[0], t[1]), g.dca(t[0], t[2]));
            let (w, wp) = (g.dca(v[0], v[1]), g.dca(v[0], v[2]));
            need(u.h <= w.h, "k <= h(ω)");
            need(up.h <= wp.h, "k' <= h(ω')");
            3 * n - mu(p, w, u.h) - mu(p, wp, up.h)
        }
        ConfigType::Three2 => {
            let u = g.dca(t[0], t[1]);
            let s = g.dca(t[1], t[2]);
            let (w, wp) = (g.dca(v[0], v[1]), g.dca(v[0], v[2]));
            let th = g.dca(v[1], v[2]);
            need(u.h <= w.h.min(wp.h), "k <= min(h(ω), h(ω'))");
            need(s.h <= th.h, "ℓ <= h(ϑ)");
            need(mu(p, w, u.h) == mu(p, wp, u.h), "μ(ω,k) = μ(ω',k)");
            3 * n - mu(p, w, u.h) - mu(p, th, s.h)
        }
        ConfigType::Four1a | ConfigType::Four1b => {
            let (u, up) = (g.dca(t[0], t[1]), g.dca(t[2], t[3]));
            let z = g.dca(u, up);
            let (w, wp) = (g.dca(v[0], v[1]), g.dca(v[2], v[3]));
            let vv = g.dca(w, wp);
            need(u.h <= w.h, "k <= h(ω)");
            need(up.h <= wp.h, "k' <= h(ω')");
            need(z.h <= vv.h, "ℓ <= h(v)");
            4 * n - mu(p, w, u.h) - mu(p, wp, up.h) - mu(p, vv, z.h)
        }
        ConfigType::Four2 => {
            let (u, up) = (g.dca(t[0], t[1]), g.dca(t[2], t[3]));
            let (w, wp) = (g.dca(v[0], v[1]), g.dca(v[2], v[3]));
            let (i2, j2) = deepest_cross_pair(&g, &[t[0], t[1]], &[t[2], t[3]]);
            let s = g.dca(t[i2], t[2 + j2]);
            let th = g.dca(v[i2], v[2 + j2]);
            need(u.h <= w.h, "k <= h(ω)");
            need(up.h <= wp.h, "k' <= h(ω')");
            need(s.h <= th.h, "ℓ <= h(ϑ)");
            need(
                nested(&g, w, th) && nested(&g, wp, th),
                "(ω,ϑ) and (ω',ϑ) nested",
            );
            4 * n - mu(p, w, u.h) - mu(p, wp, up.h) - mu(p, th, s.h)
        }
        ConfigType::Four3 => {
            let u = g.dca(t[0], t[1]);
            let (w, wp) = (g.dca(v[0], v[1]), g.dca(v[2], v[3]));
            let (i2, j2) = deepest_cross_pair(&g, &[t[0], t[1]], &[t[2], t[3]]);
            let (i1, j1) = (1 - i2, 1 - j2);
            let s1 = g.dca(t[i1], t[2 + j1]);
            let s2 = g.dca(t[i2], t[2 + j2]);
            let th1 = g.dca(v[i1], v[2 + j1]);
            let th2 = g.dca(v[i2], v[2 + j2]);
            need(u.h <= w.h && u.h <= wp.h, "k <= h(ω), h(ω')");
            need(mu(p, w, u.h) == mu(p, wp, u.h), "μ(ω,k) = μ(ω',k)");
            need(g.contains(u, s1), "s1 ⊆ u");
            need(g.contains(u, s2) && s2 != u, "s2 ⊊ u");
            need(u.h <= s1.h && s1.h <= s2.h, "k <= ℓ1 <= ℓ2");
            need(s1.h <= th1.h && s2.h <= th2.h, "ℓi <= h(ϑi)");
            need(
                [th1, th2]
                    .iter()
                    .all(|&x| nested(&g, w, x) && nested(&g, wp, x)),
                "ω, ω' nested with ϑ1, ϑ2",
            );
            4 * n - mu(p, w, u.h) - mu(p, th1, s1.h) - mu(p, th2, s2.h)
        }
    };
    Ok(ClosedForm {
        classified: cl,
        exponent,
        prob: pow_half(exponent),
        violated_relations: bad,
    })
}

/// Exhaustive enumeration of warehouse realizations on a tiny instance.
///
/// A root reads at most `2^N − 1` variables along its binary decision tree;
/// the joint law of a few roots is obtained by enumerating every assignment
/// of the union of the variables they can read. Unread variables are
/// independent of the slopes, so frequencies equal those over all
/// `2^{|vars|}` realizations.
pub struct EnumerationOracle<'a> {
    pub pruned: &'a PrunedSlopeTree,
    /// the random variables: all cubes at the heights `λ(γ)` of splitting vertices
    pub vars: Vec<Cube>,
    pub roots: Vec<Cube>,
    /// per root, the variable read at each node of the binary decision tree
    plans: Vec<Vec<usize>>,
    slope_of_label: Vec<usize>,
}

impl<'a> EnumerationOracle<'a> {
    pub fn new(p: &'a PrunedSlopeTree, max_vars: usize) -> Result<Self> {
        let heights: std::collections::BTreeSet<u32> =
            p.splitting.iter().map(|g| g.lambda).collect();
        let b = p.grid.b();
        let count: u128 = heights.iter().map(|&h| b.pow(h)).sum();
        if count > max_vars as u128 {
            return Err(Error::infeasible(format!(
                "{count} warehouse variables exceed the cap {max_vars}"
            )));
        }
        if p.n > 3 {
            return Err(Error::infeasible("enumeration needs N ≤ 3"));
        }
        let mut vars = Vec::new();
        for &h in &heights {
            vars.extend((0..b.pow(h)).map(|a| Cube { h, a }));
        }
        let index: HashMap<Cube, usize> = vars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let roots: Vec<Cube> = (0..b.pow(p.j)).map(|a| Cube { h: p.j, a }).collect();
        let nodes = (1usize << p.n) - 1;
        let plans: Vec<Vec<usize>> = roots
            .iter()
            .map(|&t| {
                (0..nodes)
                    .map(|node| {
                        let len = usize::BITS - 1 - (node + 1).leading_zeros();
                        let prefix = Cube {
                            h: len,
                            a: (node + 1 - (1 << len)) as u128,
                        };
                        let gamma = if len == 0 {
                            p.gamma1().clone()
                        } else {
                            let theta = p.psi(prefix).unwrap();
                            let mut c = theta;
                            loop {
                                if let Some(g) = p.split_vertex(c) {
                                    break g.clone();
                                }
                                c = p.tree.children(c)[0];
                            }
                        };
                        index[&p.grid.ancestor(t, gamma.lambda)]
                    })
                    .collect()
            })
            .collect();
        let slope_of_label: Vec<usize> = (0..1u128 << p.n)
            .map(|a| p.slope_index(Cube { h: p.n, a }).unwrap())
            .collect();
        Ok(EnumerationOracle {
            pruned: p,
            vars,
            roots,
            plans,
            slope_of_label,
        })
    }

    /// `2^{|vars|}`
    pub fn realizations(&self) -> BigInt {
        BigInt::one() << self.vars.len()
    }

    /// Slope index of root `i` when variable `v` reads `x(v)`.
    pub fn slope(&self, i: usize, x: impl Fn(usize) -> usize) -> usize {
        let plan = &self.plans[i];
        let mut node = 0usize;
        let mut label = 0usize;
        for _ in 0..self.pruned.n {
            let b = x(plan[node]);
            label = 2 * label + b;
            node = 2 * node + 1 + b;
        }
        self.slope_of_label[label]
    }

    /// Joint histogram of the slopes of the roots with the given indices,
    /// indexed by the slope tuple read as a base-`#slopes` numeral, over the
    /// assignments of the variables those roots can read; the second entry
    /// is the number of such assignments.
    pub fn histogram(&self, roots: &[usize]) -> (Vec<u64>, u64) {
        let ns = self.pruned.len();
        let mut h = vec![0u64; ns.pow(roots.len() as u32)];
        let mut read: Vec<usize> = roots
            .iter()
            .flat_map(|&i| self.plans[i].iter().copied())
            .collect();
        read.sort_unstable();
        read.dedup();
        assert!(
            read.len() <= 30,
            "{} variables read by one tuple",
            read.len()
        );
        let mut slot = HashMap::new();
        for (k, &v) in read.iter().enumerate() {
            slot.insert(v, k);
        }
        let local: Vec<Vec<usize>> = roots
            .iter()
            .map(|&i| self.plans[i].iter().map(|v| slot[v]).collect())
            .collect();
        for r in 0..1usize << read.len() {
            let mut key = 0usize;
            for plan in &local {
                let mut node = 0usize;
                let mut label = 0usize;
                for _ in 0..self.pruned.n {
                    let b = (r >> plan[node]) & 1;
                    label = 2 * label + b;
                    node = 2 * node + 1 + b;
                }
                key = key * ns + self.slope_of_label[label];
            }
            h[key] += 1;
        }
        (h, 1u64 << read.len())
    }

    /// Exact frequency of a prescribed assignment.
    pub fn frequency(&self, roots: &[usize], slopes: &[usize]) -> BigRational {
        let ns = self.pruned.len();
        let key = slopes.iter().fold(0usize, |k, &s| k * ns + s);
        let (h, total) = self.histogram(roots);
        BigRational::new(BigInt::from(h[key]), BigInt::from(total))
    }
}

/// Report of a full agreement sweep over all tuples of a given size.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub tuples: usize,
    pub admissible: usize,
    pub closed_form_mismatches: usize,
    pub exact_mismatches: usize,
    pub admissibility_mismatches: usize,
    pub relation_violations: usize,
}

/// Compares closed form, exact probability and enumeration frequency for
/// every tuple of `size` distinct roots and every slope prescription. For
/// three roots every choice of shared root is tried, for four roots every
/// pairing.
pub fn agreement_sweep(oracle: &EnumerationOracle<'_>, size: usize) -> SweepReport {
    let p = oracle.pruned;
    let nroots = oracle.roots.len();
    let combos: Vec<Vec<usize>> = combinations(nroots, size);
    combos
        .par_iter()
        .map(|combo| {
            let mut rep = SweepReport::default();
            let (hist, total) = oracle.histogram(combo);
            let orderings: Vec<Vec<usize>> = match size {
                3 => vec![vec![0, 1, 2], vec![1, 0, 2], vec![2, 0, 1]],
                4 => vec![vec![0, 1, 2, 3], vec![0, 2, 1, 3], vec![0, 3, 1, 2]],
                _ => vec![(0..size).collect()],
            };
            for (key, slopes) in slope_tuples(p.len(), size).into_iter().enumerate() {
                rep.tuples += 1;
                let count = hist[key];
                let freq = BigRational::new(BigInt::from(count), BigInt::from(total));
                let roots: Vec<Cube> = combo.iter().map(|&i| oracle.roots[i]).collect();
                let adm = is_sticky_admissible(p, &roots, &slopes).unwrap();
                if adm.admissible != (count > 0) {
                    rep.admissibility_mismatches += 1;
                }
                if !adm.admissible {
                    continue;
                }
                rep.admissible += 1;
                if prob_exact(p, &roots, &slopes).unwrap() != freq {
                    rep.exact_mismatches += 1;
                }
                for ord in &orderings {
                    let r: Vec<Cube> = ord.iter().map(|&i| roots[i]).collect();
                    let s: Vec<usize> = ord.iter().map(|&i| slopes[i]).collect();
                    let cf = prob_closed_form(p, &r, &s).unwrap();
                    if cf.prob != freq {
                        rep.closed_form_mismatches += 1;
                    }
                    if !cf.violated_relations.is_empty() {
                        rep.relation_violations += 1;
                    }
                }
            }
            rep
        })
        .reduce(SweepReport::default, |a, b| SweepReport {
            tuples: a.tuples + b.tuples,
            admissible: a.admissible + b.admissible,
            closed_form_mismatches: a.closed_form_mismatches + b.closed_form_mismatches,
            exact_mismatches: a.exact_mismatches + b.exact_mismatches,
            admissibility_mismatches: a.admissibility_mismatches + b.admissibility_mismatches,
            relation_violations: a.relation_violations + b.relation_violations,
        })
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

fn slope_tuples(nslopes: usize, size: usize) -> Vec<Vec<usize>> {
    let total = nslopes.pow(size as u32);
    (0..total)
        .map(|mut x| {
            let mut v = vec![0; size];
            for s in v.iter_mut().rev() {
                *s = x % nslopes;
                x /= nslopes;
            }
            v
        })
        .collect()
}

/// The tiny instance used by the enumeration oracle: `d = 1`, `M = 2`,
/// `N = 2`, `J = 4`, slopes `{0, 3/16, 12/16, 15/16}` (20 warehouse bits).
pub fn tiny_instance() -> PrunedSlopeTree {
    let pts: Vec<Vec<BigRational>> = [0i64, 3, 12, 15]
        .iter()
        .map(|&k| vec![BigRational::new(BigInt::from(k), BigInt::from(16))])
        .collect();
    PrunedSlopeTree::from_slopes(&pts, 2, 1, 4).expect("well-formed instance")
}

/// A tiny instance whose first splitting heights sit directly below their
/// splitting vertices: `d = 1`, `M = 3`, `N = 2`, `J = 2`, slopes
/// `{0, 2/9, 6/9, 8/9}` (12 warehouse bits).
pub fn tiny_adjacent_instance() -> PrunedSlopeTree {
    let pts: Vec<Vec<BigRational>> = [0i64, 2, 6, 8]
        .iter()
        .map(|&k| vec![BigRational::new(BigInt::from(k), BigInt::from(9))])
        .collect();
    PrunedSlopeTree::from_slopes(&pts, 3, 1, 2).expect("well-formed instance")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::madic_tree::{is_sticky, MadicTree};

    fn cantor_pruned(n: u32) -> PrunedSlopeTree {
        let depth = 8 * n as usize + 6;
        let t = MadicTree::from_rules(
            Grid::new(3, 1).unwrap(),
            vec![vec![0, 2]; depth],
            depth as u32,
        )
        .unwrap();
        PrunedSlopeTree::prune(&t, n, 1).unwrap()
    }

    #[test]
    fn trial_seeds_are_distinct_and_stable() {
        let s: HashSet<u64> = (0..1000).map(|i| trial_seed(42, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_eq!(trial_seed(42, 7), trial_seed(42, 7));
    }

    #[test]
    fn bit_frequency_n1() {
        let pts: Vec<Vec<BigRational>> = [0i64, 1]
            .iter()
            .map(|&k| vec![BigRational::new(BigInt::from(k), BigInt::from(2))])
            .collect();
        let p = PrunedSlopeTree::from_slopes(&pts, 2, 1, 14).unwrap();
        let m = sample_assignment(&p, 5);
        let roots = 1u128 << 14;
        let zeros = (0..roots)
            .filter(|&a| m.chain(Cube { h: 14, a }).label.a == 0)
            .count();
        let f = zeros as f64 / roots as f64;
        assert!((f - 0.5).abs() <= 3.0 * (0.25 / roots as f64).sqrt());
    }

    #[test]
    fn reproducible_and_sticky_on_prescribed_cubes() {
        let p = cantor_pruned(3);
        let m1 = sample_assignment(&p, 99);
        let m2 = sample_assignment(&p, 99);
        let b = p.grid.bpow(p.j);
        let step = (b / 500).max(1);
        let mut pairs = HashMap::new();
        let mut a = 0;
        while a < b {
            let t = Cube { h: p.j, a };
            assert_eq!(m1.sigma(t), m2.sigma(t));
            for (q, img) in m1.prescribed(t) {
                assert_eq!(q.h, img.h);
                if let Some(old) = pairs.insert(q, img) {
                    assert_eq!(old, img);
                }
                assert_eq!(
                    m1.extend_sticky(q),
                    img,
                    "extension agrees with the construction"
                );
            }
            a += step;
        }
        let dom: Vec<Cube> = pairs.keys().copied().collect();
        assert!(is_sticky(&p.grid, &dom, |q| pairs.get(&q).copied()));
    }

    #[test]
    fn extension_is_sticky_when_first_splits_are_adjacent() {
        let p = tiny_adjacent_instance();
        let dom: Vec<Cube> = (0..=p.j)
            .flat_map(|h| (0..p.grid.bpow(h)).map(move |a| Cube { h, a }))
            .collect();
        for seed in 0..50 {
            let m = sample_assignment(&p, seed);
            assert!(is_sticky(&p.grid, &dom, |q| Some(m.extend_sticky(q))));
            assert_eq!(m.extend_sticky(Cube::ROOT), Cube::ROOT);
        }
    }

    #[test]
    fn extension_can_break_lineage_between_split_and_first_split_height() {
        // γ_1 is the root and λ_1 = 2: the two height-2 cubes under a height-1
        // cube draw independent bits, so their images may leave different
        // children of γ_1
        let p = tiny_instance();
        let dom: Vec<Cube> = (0..=p.j)
            .flat_map(|h| (0..p.grid.bpow(h)).map(move |a| Cube { h, a }))
            .collect();
        let broken = (0..50).filter(|&s| {
            let m = sample_assignment(&p, s);
            !is_sticky(&p.grid, &dom, |q| Some(m.extend_sticky(q)))
        });
        assert!(broken.count() > 0);
    }

    #[test]
    fn single_root_probability() {
        let p = tiny_instance();
        for s in 0..4 {
            assert_eq!(
                prob_exact(&p, &[Cube { h: 4, a: 9 }], &[s]).unwrap(),
                pow_half(2)
            );
        }
    }

    #[test]
    fn pair_above_slope_split_is_inadmissible_on_adjacent_instance() {
        let p = tiny_adjacent_instance();
        // roots share the height-1 cube, slopes separate at the root
        let a =
            is_sticky_admissible(&p, &[Cube { h: 2, a: 0 }, Cube { h: 2, a: 1 }], &[0, 3]).unwrap();
        assert!(!a.admissible);
        let a =
            is_sticky_admissible(&p, &[Cube { h: 2, a: 0 }, Cube { h: 2, a: 1 }], &[0, 1]).unwrap();
        assert!(a.admissible);
    }

    #[test]
    fn classification_examples() {
        let g = Grid::new(2, 1).unwrap();
        let c = |d: &[u32]| g.from_digits(d);
        let four = [c(&[0, 0]), c(&[0, 1]), c(&[1, 0]), c(&[1, 1])];
        assert_eq!(classify_roots(&g, &four).unwrap().ty, ConfigType::Four1a);
        let three = [c(&[0, 0, 0]), c(&[0, 0, 1]), c(&[1, 0, 0])];
        let cl = classify_roots(&g, &three).unwrap();
        // u = ⟨0,0⟩ and u' = root, swapped so that u' ⊊ u
        assert_eq!(cl.ty, ConfigType::Three1a);
        assert_eq!(cl.order, vec![0, 2, 1]);
        let three = [c(&[1, 0, 0]), c(&[0, 0, 0]), c(&[0, 0, 1])];
        assert_eq!(classify_roots(&g, &three).unwrap().ty, ConfigType::Three2);
        assert!(classify_roots(&g, &[four[0], four[0]]).is_err());
    }

    #[test]
    fn every_tuple_gets_one_type() {
        let g = Grid::new(4, 1).unwrap();
        let leaves: Vec<Cube> = (0..16).map(|a| Cube { h: 2, a }).collect();
        let mut seen = HashSet::new();
        for c in combinations(16, 4) {
            let r: Vec<Cube> = c.iter().map(|&i| leaves[i]).collect();
            for ord in [[0, 1, 2, 3], [0, 2, 1, 3], [0, 3, 1, 2]] {
                let rr: Vec<Cube> = ord.iter().map(|&i| r[i]).collect();
                seen.insert(classify_roots(&g, &rr).unwrap().ty);
            }
        }
        for c in combinations(16, 3) {
            for ord in [[0, 1, 2], [1, 0, 2], [2, 0, 1]] {
                let r: Vec<Cube> = ord.iter().map(|&i| leaves[c[i]]).collect();
                seen.insert(classify_roots(&g, &r).unwrap().ty);
            }
        }
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn types_are_not_preserved_by_sigma() {
        let p = tiny_adjacent_instance();
        let g = p.grid;
        let roots: Vec<Cube> = (0..9).map(|a| Cube { h: 2, a }).collect();
        let mut differ = false;
        'outer: for seed in 0..200 {
            let m = sample_assignment(&p, seed);
            for c in combinations(9, 4) {
                let r: Vec<Cube> = c.iter().map(|&i| roots[i]).collect();
                let imgs: Vec<Cube> = r.iter().map(|&t| m.sigma(t)).collect();
                let uniq: HashSet<&Cube> = imgs.iter().collect();
                if uniq.len() < 4 {
                    continue;
                }
                let a = classify_roots(&g, &r).unwrap().ty.type_number();
                let b = classify_roots(&g, &imgs).unwrap().ty.type_number();
                if a != b {
                    differ = true;
                    break 'outer;
                }
            }
        }
        assert!(differ);
    }

    #[test]
    fn oracle_agreement_on_adjacent_instance() {
        let p = tiny_adjacent_instance();
        let o = EnumerationOracle::new(&p, 20).unwrap();
        assert_eq!(o.vars.len(), 12);
        for size in 2..=4 {
            let rep = agreement_sweep(&o, size);
            assert!(rep.admissible > 0);
            assert_eq!(rep.admissibility_mismatches, 0, "{size}: {rep:?}");
            assert_eq!(rep.exact_mismatches, 0, "{size}: {rep:?}");
            assert_eq!(rep.closed_form_mismatches, 0, "{size}: {rep:?}");
            assert_eq!(rep.relation_violations, 0, "{size}: {rep:?}");
        }
    }

    #[test]
    fn oracle_agreement_on_tiny_instance() {
        let p = tiny_instance();
        let o = EnumerationOracle::new(&p, 20).unwrap();
        assert_eq!(o.realizations(), BigInt::from(1u64 << 20));
        for size in 2..=4 {
            let rep = agreement_sweep(&o, size);
            assert_eq!(rep.admissibility_mismatches, 0, "{size}: {rep:?}");
            assert_eq!(rep.exact_mismatches, 0, "{size}: {rep:?}");
            assert_eq!(rep.closed_form_mismatches, 0, "{size}: {rep:?}");
        }
    }

    #[test]
    fn local_histograms_equal_full_enumeration() {
        let p = tiny_adjacent_instance();
        let o = EnumerationOracle::new(&p, 20).unwrap();
        let total = 1usize << o.vars.len();
        for combo in [
            vec![0, 1],
            vec![0, 4, 8],
            vec![1, 2, 5, 7],
            vec![3, 4, 5, 6],
        ] {
            let ns = p.len();
            let mut full = vec![0u64; ns.pow(combo.len() as u32)];
            for r in 0..total {
                let key = combo
                    .iter()
                    .fold(0, |k, &i| k * ns + o.slope(i, |v| (r >> v) & 1));
                full[key] += 1;
            }
            let (local, n) = o.histogram(&combo);
            let scale = (total as u64) / n;
            assert_eq!(
                local.iter().map(|x| x * scale).collect::<Vec<_>>(),
                full,
                "{combo:?}"
            );
        }
        for r in (0..total).step_by(97) {
            let mut src = ExplicitBits::default();
            for (k, &v) in o.vars.iter().enumerate() {
                src.bits.insert(v, ((r >> k) & 1) as u8);
            }
            let map = StickyMap::new(&p, src);
            for (i, &t) in o.roots.iter().enumerate() {
                assert_eq!(map.slope_index(t), o.slope(i, |v| (r >> v) & 1));
            }
        }
    }

    #[test]
    fn two_root_mu_zero() {
        let p = tiny_instance();
        // roots in different halves: k = 0 < every basic cube height
        let cf =
            prob_closed_form(&p, &[Cube { h: 4, a: 0 }, Cube { h: 4, a: 15 }], &[0, 3]).unwrap();
        assert_eq!(cf.exponent, 4);
        assert_eq!(
            cf.prob,
            prob_exact(&p, &[Cube { h: 4, a: 0 }, Cube { h: 4, a: 15 }], &[0, 3]).unwrap()
        );
    }
}
