//! Electrical networks on finite rooted trees and Bernoulli edge percolation.
//!
//! Edges are identified with their lower endpoint, so edge `v` joins
//! `parent[v]` to `v`. The root is vertex 0.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::madic_tree::{Cube, MadicTree};
use crate::scalar::ratio_to_f64;
use crate::sticky::BitSource;
use crate::tubes::ReferenceTree;

/// Finite rooted tree with a retention probability on each edge.
#[derive(Clone, Debug)]
pub struct ResistorNetwork {
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    /// `p[v]` is the retention probability of the edge into `v` (unused for the root)
    pub p: Vec<BigRational>,
}

/// Result of one percolation trial.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PercolationOutcome {
    /// lower endpoints of retained edges, increasing
    pub retained: Vec<usize>,
    pub survives: bool,
}

/// Both forms of the survival upper bound.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalBound {
    pub resistance: BigRational,
    /// `2/(1+R)`
    pub from_resistance: BigRational,
    /// resistance of the network with every level shorted
    pub level_merged_resistance: BigRational,
    /// `2/(1+R_merged)`
    pub from_level_counts: BigRational,
}

impl ResistorNetwork {
    /// Builds a network from child lists with uniform retention probability.
    pub fn from_children(children: Vec<Vec<usize>>, p: BigRational) -> Result<Self> {
        let n = children.len();
        if n == 0 {
            return Err(Error::validation("empty tree"));
        }
        let mut parent = vec![None; n];
        for (v, ch) in children.iter().enumerate() {
            for &c in ch {
                if c >= n || c == 0 || parent[c].is_some() {
                    return Err(Error::validation(
                        "child lists do not describe a tree rooted at 0",
                    ));
                }
                parent[c] = Some(v);
            }
        }
        if parent.iter().skip(1).any(|x| x.is_none()) {
            return Err(Error::validation("vertex not reachable from the root"));
        }
        let net = ResistorNetwork {
            parent,
            children,
            p: vec![p; n],
        };
        // a cycle would leave some vertex unreachable by descent
        if net.order().len() != n {
            return Err(Error::validation("child lists contain a cycle"));
        }
        Ok(net)
    }

    /// Network on the vertices of an M-adic tree, `p ≡ 1/2`.
    pub fn from_madic(tree: &MadicTree, cap: usize) -> Result<(Self, Vec<Cube>)> {
        let verts = tree.vertices(cap)?;
        let index: std::collections::HashMap<Cube, usize> =
            verts.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let children = verts
            .iter()
            .map(|&v| tree.children(v).iter().map(|c| index[c]).collect())
            .collect();
        let net = Self::from_children(children, half())?;
        Ok((net, verts))
    }

    /// Full `b`-ary tree of the given height.
    pub fn full(branch: usize, height: u32) -> Self {
        let mut children: Vec<Vec<usize>> = vec![Vec::new()];
        let mut frontier = vec![0usize];
        for _ in 0..height {
            let mut next = Vec::new();
            for v in frontier {
                for _ in 0..branch {
                    let c = children.len();
                    children.push(Vec::new());
                    children[v].push(c);
                    next.push(c);
                }
            }
            frontier = next;
        }
        Self::from_children(children, half()).expect("well-formed")
    }

    pub fn path(len: u32) -> Self {
        Self::full(1, len)
    }

    /// Deterministic random tree: heights up to `height`, each vertex above
    /// the bottom draws `1..=max_branch` children uniformly (ChaCha8 stream
    /// seeded by `seed`), so every leaf sits at the full height.
    pub fn random(height: u32, max_branch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut children: Vec<Vec<usize>> = vec![Vec::new()];
        let mut frontier = vec![0usize];
        for _ in 0..height {
            let mut next = Vec::new();
            for v in frontier {
                let k = rng.gen_range(1..=max_branch);
                for _ in 0..k {
                    let c = children.len();
                    children.push(Vec::new());
                    children[v].push(c);
                    next.push(c);
                }
            }
            frontier = next;
        }
        Self::from_children(children, half()).expect("well-formed")
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Vertices in breadth-first order.
    pub fn order(&self) -> Vec<usize> {
        let mut out = vec![0];
        let mut i = 0;
        while i < out.len() && out.len() <= self.len() {
            out.extend(self.children[out[i]].iter().copied());
            i += 1;
        }
        out
    }

    pub fn heights(&self) -> Vec<u32> {
        let mut h = vec![0u32; self.len()];
        for v in self.order() {
            for &c in &self.children[v] {
                h[c] = h[v] + 1;
            }
        }
        h
    }

    /// `R_e = (1 - p_e) / ∏_{e' ≤ e} p_{e'}` for every edge (root entry zero).
    pub fn edge_resistances(&self) -> Vec<BigRational> {
        let mut prod = vec![BigRational::one(); self.len()];
        let mut r = vec![BigRational::zero(); self.len()];
        for v in self.order() {
            for &c in &self.children[v] {
                prod[c] = &prod[v] * &self.p[c];
                r[c] = (BigRational::one() - &self.p[c]) / &prod[c];
            }
        }
        r
    }

    /// Total resistance from the root to the node joined to every leaf.
    pub fn total_resistance(&self) -> Result<BigRational> {
        if self.len() <= 1 {
            return Err(Error::validation("tree has no edges"));
        }
        let re = self.edge_resistances();
        // below[v]: resistance from v to the leaf node through its subtree
        let mut below: Vec<Option<BigRational>> = vec![None; self.len()];
        for v in self.order().into_iter().rev() {
            if self.children[v].is_empty() {
                below[v] = Some(BigRational::zero());
                continue;
            }
            let mut conductance = BigRational::zero();
            let mut shorted = false;
            for &c in &self.children[v] {
                let r = &re[c] + below[c].as_ref().unwrap();
                if r.is_zero() {
                    shorted = true;
                } else {
                    conductance += BigRational::one() / r;
                }
            }
            below[v] = Some(if shorted {
                BigRational::zero()
            } else {
                BigRational::one() / conductance
            });
        }
        Ok(below[0].take().unwrap())
    }

    /// Resistance after shorting all vertices of equal height, using the
    /// levels that every root-to-leaf path crosses.
    pub fn level_merged_resistance(&self) -> BigRational {
        let h = self.heights();
        let re = self.edge_resistances();
        let min_leaf = (0..self.len())
            .filter(|&v| self.children[v].is_empty())
            .map(|v| h[v])
            .min()
            .unwrap_or(0);
        let mut cond = vec![BigRational::zero(); min_leaf as usize + 1];
        for v in 1..self.len() {
            if h[v] <= min_leaf && !re[v].is_zero() {
                cond[h[v] as usize] += BigRational::one() / &re[v];
            }
        }
        cond.iter()
            .skip(1)
            .filter(|c| !c.is_zero())
            .map(|c| BigRational::one() / c)
            .sum()
    }

    /// Number of vertices at each height `1..`.
    pub fn level_counts(&self) -> Vec<usize> {
        let h = self.heights();
        let top = h.iter().copied().max().unwrap_or(0) as usize;
        let mut n = vec![0usize; top + 1];
        for v in 1..self.len() {
            n[h[v] as usize] += 1;
        }
        n
    }

    pub fn survival_upper_bound(&self) -> Result<SurvivalBound> {
        let r = self.total_resistance()?;
        let two = BigRational::from_integer(BigInt::from(2));
        let from_resistance = &two / (BigRational::one() + &r);
        let merged = self.level_merged_resistance();
        let from_level_counts = &two / (BigRational::one() + &merged);
        Ok(SurvivalBound {
            resistance: r,
            from_resistance,
            level_merged_resistance: merged,
            from_level_counts,
        })
    }

    /// Exact survival probability by `q(v) = 1 - ∏_c (1 - p_c q(c))`.
    pub fn survival_exact(&self) -> BigRational {
        let mut q = vec![BigRational::zero(); self.len()];
        for v in self.order().into_iter().rev() {
            if self.children[v].is_empty() {
                q[v] = BigRational::one();
            } else {
                let mut all_die = BigRational::one();
                for &c in &self.children[v] {
                    all_die *= BigRational::one() - &self.p[c] * &q[c];
                }
                q[v] = BigRational::one() - all_die;
            }
        }
        q[0].clone()
    }

    /// Survival given a retained-edge indicator (indexed by lower endpoint).
    pub fn survives(&self, retained: &[bool]) -> bool {
        let mut alive = vec![false; self.len()];
        for v in self.order().into_iter().rev() {
            alive[v] = self.children[v].is_empty()
                || self.children[v].iter().any(|&c| retained[c] && alive[c]);
        }
        alive[0]
    }

    /// One trial on its own ChaCha8 stream `(seed, trial)`.
    pub fn sample(&self, seed: u64, trial: u64) -> PercolationOutcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial);
        let pf: Vec<f64> = self.p.iter().map(ratio_to_f64).collect();
        let mut retained = vec![false; self.len()];
        for v in 1..self.len() {
            retained[v] = rng.gen_bool(pf[v].clamp(0.0, 1.0));
        }
        PercolationOutcome {
            survives: self.survives(&retained),
            retained: (0..self.len()).filter(|&v| retained[v]).collect(),
        }
    }

    /// Fraction of `trials` independent trials that survive.
    pub fn survival_monte_carlo(&self, trials: u64, seed: u64) -> Result<f64> {
        if trials == 0 {
            return Err(Error::validation("trials must be positive"));
        }
        let hits: u64 = (0..trials)
            .into_par_iter()
            .map(|t| u64::from(self.sample(seed, t).survives))
            .sum();
        Ok(hits as f64 / trials as f64)
    }
}

pub fn half() -> BigRational {
    BigRational::new(BigInt::one(), BigInt::from(2))
}

/// Half-width of a three-sigma binomial interval.
pub fn three_sigma(p: f64, trials: u64) -> f64 {
    3.0 * (p * (1.0 - p) / trials as f64).sqrt()
}

/// Percolation on the reference tree driven by the warehouse: the edge into
/// a vertex is retained iff the bit of its reference cube equals `κ`.
pub fn percolate_reference<B: BitSource>(
    tree: &ReferenceTree,
    bits: &B,
) -> Result<PercolationOutcome> {
    if tree.poss.is_empty() {
        return Ok(PercolationOutcome {
            retained: Vec::new(),
            survives: false,
        });
    }
    let net = tree
        .network()
        .ok_or_else(|| Error::validation("reference tree is not a rooted tree"))?;
    let mut retained = vec![false; tree.nodes.len()];
    for (v, node) in tree.nodes.iter().enumerate().skip(1) {
        let kappa = node
            .kappa
            .ok_or_else(|| Error::validation("edge without a label"))?;
        retained[v] = bits.bit(node.cube) == kappa;
    }
    Ok(PercolationOutcome {
        survives: net.survives(&retained),
        retained: (0..retained.len()).filter(|&v| retained[v]).collect(),
    })
}
