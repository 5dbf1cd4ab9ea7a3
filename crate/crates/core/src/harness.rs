//! Experiment drivers for the random sticky construction: far-slab volume,
//! pairwise-intersection moments and the near/far volume ratio, with CSV and
//! JSON-lines persistence.
//!
//! Every sample for a given `(N, trial)` is drawn from the same warehouse
//! seed, so the three experiments measure identical tube families.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lacunarity::GeneratorSpec;
use crate::madic_tree::Cube;
use crate::pruning::PrunedSlopeTree;
use crate::scalar::ratio_to_f64;
use crate::sticky::{sample_assignment, splitmix64, trial_seed};
use crate::tubes::{LineFamily, SlabWindow, Tube, TubeGeometry};

/// Largest root count accepted for `d ≥ 2`, where every quantity is exact.
pub const EXACT_ROOT_CAP: u128 = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    pub d: u32,
    pub m: u32,
    pub n_min: u32,
    pub n_max: u32,
    pub c0: u32,
    pub a0: u32,
    /// moment windows are `[M^{-R}, c1 M^{-R}]`
    pub c1: u32,
    pub r_min: u32,
    pub r_max: u32,
    /// trials per `N`
    pub seeds: u64,
    pub master_seed: u64,
    /// quadrature slices per unit slab
    pub slices: usize,
    /// `c` in `R ∈ [c ln N, 2c ln N]`; `1/ln M` when absent
    pub log_factor: Option<f64>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generator: GeneratorSpec::Cantor { level: 40, base: 3 },
            d: 1,
            m: 3,
            n_min: 2,
            n_max: 5,
            c0: 1,
            a0: 10,
            c1: 3,
            r_min: 1,
            r_max: 2,
            seeds: 200,
            master_seed: 0x5EED,
            slices: 64,
            log_factor: None,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(m.to_string()));
        if self.generator.dimension() != self.d as usize {
            return bad("generator dimension differs from d");
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad("need 1 ≤ n_min ≤ n_max");
        }
        if self.r_min == 0 || self.r_min > self.r_max {
            return bad("need 1 ≤ r_min ≤ r_max");
        }
        if self.c0 == 0 || self.a0 == 0 {
            return bad("C0 and A0 must be positive");
        }
        if self.c1 < 2 {
            return bad("C1 must be at least 2");
        }
        if self.seeds == 0 || self.slices == 0 {
            return bad("seeds and slices must be positive");
        }
        if let Some(c) = self.log_factor {
            if !(c.is_finite() && c > 0.0) {
                return bad("log_factor must be positive");
            }
        }
        crate::madic_tree::Grid::new(self.m, self.d)?;
        Ok(())
    }

    pub fn log_factor(&self) -> f64 {
        self.log_factor.unwrap_or(1.0 / (self.m as f64).ln())
    }

    /// Scales `R` with `c ln N ≤ R ≤ 2c ln N` used for the near-slab lower bound.
    pub fn near_scales(&self, n: u32) -> Vec<u32> {
        let c = self.log_factor();
        let ln = (n as f64).ln();
        let lo = (c * ln).ceil().max(1.0) as u32;
        let hi = (2.0 * c * ln + 1e-12).floor() as u32;
        (lo..=hi).collect()
    }

    /// Hex SHA-256 of the canonical JSON of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    /// The pruned instance for `N`.
    pub fn instance(&self, n: u32) -> Result<PrunedSlopeTree> {
        let tree = self.generator.tree(self.m, None)?;
        PrunedSlopeTree::prune(&tree, n, self.c0)
    }
}

/// Warehouse seed of trial `trial` at `N`.
pub fn sample_seed(master: u64, n: u32, trial: u64) -> u64 {
    trial_seed(master ^ splitmix64(n as u64), trial)
}

/// `K_N(X)`: one tube per root cube, with slope `σ_X(t)`.
pub fn construct_kakeya(pruned: &PrunedSlopeTree, seed: u64) -> Vec<Tube> {
    let map = sample_assignment(pruned, seed);
    (0..pruned.grid.bpow(pruned.j))
        .map(|a| {
            let root = Cube { h: pruned.j, a };
            Tube {
                root,
                slope: map.slope_index(root),
            }
        })
        .collect()
}

/// A realized family with the slab measurements the experiments need.
enum Realized<'a> {
    Line(LineFamily),
    Exact {
        geom: TubeGeometry<'a>,
        tubes: Vec<Tube>,
    },
}

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite window")
}

impl<'a> Realized<'a> {
    fn new(p: &'a PrunedSlopeTree, a0: u32, tubes: Vec<Tube>) -> Result<Self> {
        if p.grid.d == 1 {
            let assignment = tubes.iter().map(|t| t.slope as u32).collect();
            Ok(Realized::Line(LineFamily::new(p, a0, assignment)?))
        } else {
            if p.grid.bpow(p.j) > EXACT_ROOT_CAP {
                return Err(Error::infeasible(format!(
                    "{} root cubes exceed the exact cap {EXACT_ROOT_CAP} for d ≥ 2",
                    p.grid.bpow(p.j)
                )));
            }
            Ok(Realized::Exact {
                geom: TubeGeometry::new(p, a0)?,
                tubes,
            })
        }
    }

    fn union(&self, lo: f64, hi: f64, slices: usize) -> Result<f64> {
        match self {
            Realized::Line(f) => Ok(f.union_quadrature(lo, hi, slices)),
            Realized::Exact { geom, tubes } => {
                let w = SlabWindow::new(rational(lo), rational(hi))?;
                Ok(geom.union_volume(tubes, &w, slices)?.estimate)
            }
        }
    }

    fn pair_sum(&self, lo: &BigRational, hi: &BigRational) -> Result<f64> {
        match self {
            Realized::Line(f) => Ok(f.pair_sum(ratio_to_f64(lo), ratio_to_f64(hi))),
            Realized::Exact { geom, tubes } => {
                let w = SlabWindow::new(lo.clone(), hi.clone())?;
                Ok(ratio_to_f64(&geom.pair_sum_exact(tubes, &w)?))
            }
        }
    }

    fn cs_lower_bound(&self, lo: &BigRational, hi: &BigRational) -> Result<f64> {
        match self {
            Realized::Line(f) => Ok(f.cs_lower_bound(ratio_to_f64(lo), ratio_to_f64(hi))),
            Realized::Exact { geom, tubes } => {
                let w = SlabWindow::new(lo.clone(), hi.clone())?;
                let single = geom.tube_volume(&w) * BigInt::from(tubes.len());
                let pairs = geom.pair_sum_exact(tubes, &w)?;
                let denom = &single + &pairs;
                Ok(if denom.is_zero() {
                    0.0
                } else {
                    ratio_to_f64(&(&single * &single / denom))
                })
            }
        }
    }
}

/// `[M^{-R}, c M^{-R}]`
fn scale_window(m: u32, r: u32, c: u32) -> (BigRational, BigRational) {
    let lo = BigRational::new(BigInt::one(), BigInt::from(m).pow(r));
    let hi = &lo * BigInt::from(c);
    (lo, hi)
}

/// Which measurements a sample carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Measure {
    pub near: bool,
    pub far: bool,
    pub moments: bool,
}

/// Measurements of one realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub n: u32,
    pub j: u32,
    pub trial: u64,
    pub seed: u64,
    pub near_est: Option<f64>,
    pub near_lb: Option<f64>,
    pub far: Option<f64>,
    /// `(R, Σ_{t≠t'} |P*_{t,R} ∩ P*_{t',R}|)`
    pub moments: Vec<(u32, f64)>,
}

/// Measures one realization of `K_N(X)`.
pub fn measure(
    cfg: &ExperimentConfig,
    pruned: &PrunedSlopeTree,
    trial: u64,
    what: Measure,
) -> Result<Sample> {
    let seed = sample_seed(cfg.master_seed, pruned.n, trial);
    let fam = Realized::new(pruned, cfg.a0, construct_kakeya(pruned, seed))?;
    let mut s = Sample {
        n: pruned.n,
        j: pruned.j,
        trial,
        seed,
        near_est: None,
        near_lb: None,
        far: None,
        moments: Vec::new(),
    };
    if what.near {
        s.near_est = Some(fam.union(0.0, 1.0, cfg.slices)?);
        let mut lb = 0.0;
        for r in cfg.near_scales(pruned.n) {
            let (lo, hi) = scale_window(cfg.m, r, cfg.m);
            lb += fam.cs_lower_bound(&lo, &hi)?;
        }
        s.near_lb = Some(lb);
    }
    if what.far {
        let a0 = cfg.a0 as f64;
        s.far = Some(fam.union(a0, a0 + 1.0, cfg.slices)?);
    }
    if what.moments {
        for r in cfg.r_min..=cfg.r_max {
            let (lo, hi) = scale_window(cfg.m, r, cfg.c1);
            s.moments.push((r, fam.pair_sum(&lo, &hi)?));
        }
    }
    Ok(s)
}

/// All samples over the `N` range, ordered by `(N, trial)`.
pub fn collect_samples(cfg: &ExperimentConfig, what: Measure) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for n in cfg.n_min..=cfg.n_max {
        let pruned = cfg.instance(n)?;
        let batch: Result<Vec<Sample>> = (0..cfg.seeds)
            .into_par_iter()
            .map(|trial| measure(cfg, &pruned, trial, what))
            .collect();
        out.extend(batch?);
    }
    Ok(out)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear-interpolated quantile, `q ∈ [0, 1]`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < s.len() {
        s[i] * (1.0 - f) + s[i + 1] * f
    } else {
        s[i]
    }
}

pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

/// Ranks with ties averaged, starting at 1.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut k = i;
        while k + 1 < idx.len() && v[idx[k + 1]] == v[idx[i]] {
            k += 1;
        }
        let avg = (i + k) as f64 / 2.0 + 1.0;
        for &j in &idx[i..=k] {
            r[j] = avg;
        }
        i = k + 1;
    }
    r
}

/// Spearman rank correlation; `NaN` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Number of strict decreases between consecutive entries.
pub fn inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] < w[0]).count()
}

fn by_n(samples: &[Sample]) -> Vec<(u32, Vec<&Sample>)> {
    let mut out: Vec<(u32, Vec<&Sample>)> = Vec::new();
    for s in samples {
        match out.last_mut() {
            Some((n, v)) if *n == s.n => v.push(s),
            _ => out.push((s.n, vec![s])),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FarSlabRow {
    pub n: u32,
    pub j: u32,
    pub mean: f64,
    pub std_err: f64,
    /// `N · mean`
    pub scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FarSlabTable {
    pub rows: Vec<FarSlabRow>,
    /// Spearman correlation of `N · mean` against `N`
    pub spearman: f64,
    pub samples: Vec<Sample>,
}

pub fn far_slab_table(samples: Vec<Sample>) -> FarSlabTable {
    let rows: Vec<FarSlabRow> = by_n(&samples)
        .into_iter()
        .map(|(n, v)| {
            let f: Vec<f64> = v.iter().filter_map(|s| s.far).collect();
            let m = mean(&f);
            let var =
                f.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (f.len().max(2) - 1) as f64;
            FarSlabRow {
                n,
                j: v[0].j,
                mean: m,
                std_err: (var / f.len() as f64).sqrt(),
                scaled: n as f64 * m,
            }
        })
        .collect();
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let sc: Vec<f64> = rows.iter().map(|r| r.scaled).collect();
    FarSlabTable {
        spearman: spearman(&ns, &sc),
        rows,
        samples,
    }
}

/// Mean far-slab volume `|K_N(X) ∩ [A_0, A_0+1] × R^d|` per `N`.
pub fn experiment_far_slab(cfg: &ExperimentConfig) -> Result<FarSlabTable> {
    let what = Measure {
        far: true,
        ..Measure::default()
    };
    Ok(far_slab_table(collect_samples(cfg, what)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub n: u32,
    pub r: u32,
    pub mean: f64,
    pub mean_square: f64,
    /// `N M^{-2R}`
    pub scale: f64,
    pub ratio1: f64,
    pub ratio2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub rows: Vec<MomentRow>,
    pub samples: Vec<Sample>,
}

pub fn moment_table(m: u32, samples: Vec<Sample>) -> MomentTable {
    let mut rows = Vec::new();
    for (n, v) in by_n(&samples) {
        let rs: Vec<u32> = v[0].moments.iter().map(|&(r, _)| r).collect();
        for (k, r) in rs.into_iter().enumerate() {
            let xs: Vec<f64> = v.iter().map(|s| s.moments[k].1).collect();
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let scale = n as f64 * (m as f64).powi(-2 * r as i32);
            let (m1, m2) = (mean(&xs), mean(&sq));
            rows.push(MomentRow {
                n,
                r,
                mean: m1,
                mean_square: m2,
                scale,
                ratio1: m1 / scale,
                ratio2: m2 / (scale * scale),
            });
        }
    }
    MomentTable { rows, samples }
}

/// Empirical first and second moments of the pairwise intersection sum at
/// each scale `R`.
pub fn experiment_moments(cfg: &ExperimentConfig) -> Result<MomentTable> {
    let what = Measure {
        moments: true,
        ..Measure::default()
    };
    Ok(moment_table(cfg.m, collect_samples(cfg, what)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub n: u32,
    pub j: u32,
    pub scales: Vec<u32>,
    pub median_ratio: f64,
    /// median of `near_lb / far`
    pub median_lb_ratio: f64,
    /// near-slab quadrature estimate at quantiles 0.25, 0.5, 0.75
    pub near_quantiles: [f64; 3],
    pub median_far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub rows: Vec<RatioRow>,
    pub log_factor: f64,
    pub inversions: usize,
    pub lb_inversions: usize,
    pub samples: Vec<Sample>,
}

pub fn ratio_table(cfg: &ExperimentConfig, samples: Vec<Sample>) -> RatioTable {
    let rows: Vec<RatioRow> = by_n(&samples)
        .into_iter()
        .map(|(n, v)| {
            let ratio: Vec<f64> = v
                .iter()
                .map(|s| s.near_est.unwrap_or(f64::NAN) / s.far.unwrap_or(f64::NAN))
                .collect();
            let lb: Vec<f64> = v
                .iter()
                .map(|s| s.near_lb.unwrap_or(f64::NAN) / s.far.unwrap_or(f64::NAN))
                .collect();
            let near: Vec<f64> = v.iter().filter_map(|s| s.near_est).collect();
            let far: Vec<f64> = v.iter().filter_map(|s| s.far).collect();
            RatioRow {
                n,
                j: v[0].j,
                scales: cfg.near_scales(n),
                median_ratio: median(&ratio),
                median_lb_ratio: median(&lb),
                near_quantiles: [
                    quantile(&near, 0.25),
                    quantile(&near, 0.5),
                    quantile(&near, 0.75),
                ],
                median_far: median(&far),
            }
        })
        .collect();
    let med: Vec<f64> = rows.iter().map(|r| r.median_ratio).collect();
    let lb: Vec<f64> = rows.iter().map(|r| r.median_lb_ratio).collect();
    RatioTable {
        log_factor: cfg.log_factor(),
        inversions: inversions(&med),
        lb_inversions: inversions(&lb),
        rows,
        samples,
    }
}

/// Near-slab volume (quadrature and Cauchy–Schwarz lower bound), far-slab
/// volume and their ratio per seed; medians per `N`.
pub fn experiment_ratio(cfg: &ExperimentConfig) -> Result<RatioTable> {
    let what = Measure {
        near: true,
        far: true,
        ..Measure::default()
    };
    Ok(ratio_table(cfg, collect_samples(cfg, what)?))
}

/// One CSV line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(rename = "N")]
    pub n: u32,
    #[serde(rename = "R")]
    pub r: Option<u32>,
    pub seed: u64,
    pub near_est: Option<f64>,
    pub near_lb: Option<f64>,
    pub far: Option<f64>,
    pub moment1: Option<f64>,
    pub moment2: Option<f64>,
}

/// CSV rows of a sample list: one per moment scale, or one if there are none.
pub fn result_rows(samples: &[Sample]) -> Vec<ResultRow> {
    let mut out = Vec::new();
    for s in samples {
        let base = ResultRow {
            n: s.n,
            r: None,
            seed: s.seed,
            near_est: s.near_est,
            near_lb: s.near_lb,
            far: s.far,
            moment1: None,
            moment2: None,
        };
        if s.moments.is_empty() {
            out.push(base.clone());
        }
        for &(r, x) in &s.moments {
            out.push(ResultRow {
                r: Some(r),
                moment1: Some(x),
                moment2: Some(x * x),
                ..base.clone()
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    FarSlab,
    Moments,
    Ratio,
}

impl Experiment {
    pub fn measure(self) -> Measure {
        match self {
            Experiment::FarSlab => Measure {
                far: true,
                ..Measure::default()
            },
            Experiment::Moments => Measure {
                moments: true,
                ..Measure::default()
            },
            Experiment::Ratio => Measure {
                near: true,
                far: true,
                ..Measure::default()
            },
        }
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: Experiment,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub rows: Vec<ResultRow>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Runs an experiment and packages its rows with the config.
pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<(RunRecord, Vec<Sample>)> {
    let started = now_ms();
    let samples = collect_samples(cfg, experiment.measure())?;
    let rec = RunRecord {
        experiment,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        rows: result_rows(&samples),
    };
    Ok((rec, samples))
}

/// Re-runs a record and checks that every row is reproduced bit for bit.
pub fn replay(rec: &RunRecord) -> Result<bool> {
    if rec.config.hash() != rec.config_hash {
        return Err(Error::validation("config hash does not match the config"));
    }
    let (again, _) = run(rec.experiment, &rec.config)?;
    Ok(again.rows == rec.rows)
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::validation(format!("i/o: {e}"))
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    for r in rows {
        w.serialize(r).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(io_err)?;
    r.deserialize().map(|x| x.map_err(io_err)).collect()
}

/// Appends one JSON line to the run log.
pub fn append_log(path: &Path, rec: &RunRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    let line = serde_json::to_string(rec).map_err(io_err)?;
    writeln!(f, "{line}").map_err(io_err)
}

pub fn read_log(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(io_err))
        .collect()
}

/// Exact `|⋃ tubes ∩ [lo, hi] × R|` for `d = 1`. The slice measure is
/// piecewise linear in `x_1` with breaks where two interval endpoints cross,
/// so the midpoint rule on each piece is exact. Quadratic in the number of
/// tubes.
pub fn line_union_exact(
    geom: &TubeGeometry<'_>,
    tubes: &[Tube],
    w: &SlabWindow,
) -> Result<BigRational> {
    if geom.d() != 1 {
        return Err(Error::validation("exact line unions need d = 1"));
    }
    let lo = w.lo.clone().max(BigRational::zero());
    let hi =
        w.hi.clone()
            .min(BigRational::from_integer(BigInt::from(10 * geom.a0)));
    if lo >= hi {
        return Ok(BigRational::zero());
    }
    let grid = geom.grid();
    let p = geom.pruned;
    let lines: Vec<(BigRational, BigRational)> = tubes
        .iter()
        .map(|t| (grid.center(t.root)[0].clone(), p.slopes[t.slope][0].clone()))
        .collect();
    let mut cuts = vec![lo.clone(), hi.clone()];
    for (i, (ci, vi)) in lines.iter().enumerate() {
        for (cj, vj) in &lines[i + 1..] {
            if vi == vj {
                continue;
            }
            // centres differ by -side, 0 or side
            for k in [-1i64, 0, 1] {
                let x = (cj - ci + &geom.side * BigInt::from(k)) / (vi - vj);
                if x > lo && x < hi {
                    cuts.push(x);
                }
            }
        }
    }
    cuts.sort();
    cuts.dedup();
    let two = BigInt::from(2);
    let mut acc = BigRational::zero();
    for c in cuts.windows(2) {
        let mid = (&c[0] + &c[1]) / &two;
        acc += geom.slice_union_exact(tubes, &mid) * (&c[1] - &c[0]);
    }
    Ok(acc)
}

/// Write CSV and log for a finished run when the config names an output
/// path: `<output>.csv` and `<output>.jsonl`.
pub fn persist(rec: &RunRecord) -> Result<Option<(PathBuf, PathBuf)>> {
    let Some(base) = &rec.config.output else {
        return Ok(None);
    };
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let csv = base.with_extension("csv");
    let log = base.with_extension("jsonl");
    write_csv(&csv, &rec.rows)?;
    append_log(&log, rec)?;
    Ok(Some((csv, log)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::q;
    use crate::sticky::{ExplicitBits, StickyMap};
    use crate::tubes::Tube;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_min: 2,
            n_max: 3,
            seeds: 6,
            slices: 16,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn one_tube_per_root_with_slopes_in_omega() {
        let cfg = small();
        for n in 2..=3 {
            let p = cfg.instance(n).unwrap();
            let k = construct_kakeya(&p, 11);
            assert_eq!(k.len() as u128, 3u128.pow(p.j));
            assert!(k.iter().all(|t| t.slope < p.len()));
            assert_eq!(k, construct_kakeya(&p, 11));
            assert_ne!(k, construct_kakeya(&p, 12));
        }
    }

    #[test]
    fn experiments_share_tube_sets() {
        let cfg = small();
        let far = experiment_far_slab(&cfg).unwrap();
        let ratio = experiment_ratio(&cfg).unwrap();
        let mom = experiment_moments(&cfg).unwrap();
        for ((a, b), c) in far.samples.iter().zip(&ratio.samples).zip(&mom.samples) {
            assert_eq!((a.n, a.seed), (b.n, b.seed));
            assert_eq!((a.n, a.seed), (c.n, c.seed));
            assert_eq!(a.far, b.far);
        }
        assert_eq!(far.rows.len(), 2);
        assert_eq!(mom.rows.len(), 4);
        assert_eq!(ratio.rows.len(), 2);
    }

    #[test]
    fn line_family_volumes_match_exact_geometry() {
        let cfg = ExperimentConfig {
            slices: 400,
            ..small()
        };
        let p = cfg.instance(2).unwrap();
        let tubes = construct_kakeya(&p, 5);
        let geom = TubeGeometry::new(&p, cfg.a0).unwrap();
        let fam = Realized::new(&p, cfg.a0, tubes.clone()).unwrap();
        for (lo, hi) in [(0, 1), (10, 11), (3, 5)] {
            let w = SlabWindow::ints(lo, hi).unwrap();
            let exact = ratio_to_f64(&line_union_exact(&geom, &tubes, &w).unwrap());
            let est = fam.union(lo as f64, hi as f64, cfg.slices).unwrap();
            assert!(
                (exact - est).abs() < 1e-3 * exact,
                "{lo} {hi}: {exact} {est}"
            );
        }
        let (lo, hi) = scale_window(3, 1, 3);
        let exact = ratio_to_f64(
            &geom
                .pair_sum_exact(&tubes, &SlabWindow::new(lo.clone(), hi.clone()).unwrap())
                .unwrap(),
        );
        let fast = fam.pair_sum(&lo, &hi).unwrap();
        assert!(
            (exact - fast).abs() <= 1e-9 * exact.max(1e-12),
            "{exact} {fast}"
        );
    }

    #[test]
    fn single_split_far_volume_is_the_average_over_realizations() {
        // Ω = {0, 1/2}, M = 2: one splitting vertex, two basic spatial cubes
        let p = PrunedSlopeTree::from_slopes(&[vec![q(0, 1)], vec![q(1, 2)]], 2, 1, 3).unwrap();
        assert_eq!(p.n, 1);
        let lam = p.gamma1().lambda;
        let geom = TubeGeometry::new(&p, 1).unwrap();
        let w = SlabWindow::ints(1, 2).unwrap();
        let cubes = p.grid.bpow(lam);
        let mut total = BigRational::zero();
        for bits in 0..(1u32 << cubes) {
            let mut src = ExplicitBits::default();
            for a in 0..cubes {
                src.bits.insert(Cube { h: lam, a }, ((bits >> a) & 1) as u8);
            }
            let map = StickyMap::new(&p, src);
            total += line_union_exact(&geom, &geom.family(&map), &w).unwrap();
        }
        let expected = total / BigInt::from(1u64 << cubes);
        // every realization sends a whole basic cube to one slope, so with
        // one basic cube the average is ½(all slope 0) + ½(all slope 1/2)
        let all = |s: usize| -> BigRational {
            let t: Vec<Tube> = geom
                .root_cubes()
                .into_iter()
                .map(|root| Tube { root, slope: s })
                .collect();
            line_union_exact(&geom, &t, &w).unwrap()
        };
        if cubes == 1 {
            assert_eq!(expected, (all(0) + all(1)) / BigInt::from(2));
        }
        // Monte Carlo over hashed warehouses stays within 4 standard errors
        let vols: Vec<f64> = (0..400)
            .map(|s| {
                let t = construct_kakeya(&p, sample_seed(1, 1, s));
                ratio_to_f64(&line_union_exact(&geom, &t, &w).unwrap())
            })
            .collect();
        let m = mean(&vols);
        let sd = (vols.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 399.0).sqrt();
        let e = ratio_to_f64(&expected);
        assert!((m - e).abs() <= 4.0 * sd / 20.0 + 1e-12, "{m} vs {e}");
    }

    #[test]
    fn single_root_moment_is_zero() {
        let p = PrunedSlopeTree::from_slopes(&[vec![q(0, 1)], vec![q(1, 2)]], 2, 1, 1).unwrap();
        let t = construct_kakeya(&p, 3);
        let geom = TubeGeometry::new(&p, 1).unwrap();
        let one = &t[..1];
        let w = SlabWindow::scale(2, 1);
        assert!(geom.pair_sum_exact(one, &w).unwrap().is_zero());
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ExperimentConfig {
                n_min: 0,
                ..small()
            },
            ExperimentConfig {
                n_min: 4,
                n_max: 3,
                ..small()
            },
            ExperimentConfig {
                r_min: 0,
                ..small()
            },
            ExperimentConfig {
                seeds: 0,
                ..small()
            },
            ExperimentConfig { c1: 1, ..small() },
            ExperimentConfig { d: 2, ..small() },
            ExperimentConfig {
                log_factor: Some(-1.0),
                ..small()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Validation(_))), "{c:?}");
        }
        let short = ExperimentConfig {
            generator: GeneratorSpec::Cantor { level: 5, base: 3 },
            ..small()
        };
        assert!(matches!(
            experiment_far_slab(&short),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn near_scales_follow_the_log_window() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.near_scales(2), vec![1]);
        assert_eq!(cfg.near_scales(3), vec![1, 2]);
        assert_eq!(cfg.near_scales(5), vec![2]);
        for n in 2..=5 {
            assert!(!cfg.near_scales(n).is_empty());
        }
    }

    #[test]
    fn statistics_helpers() {
        assert_eq!(spearman(&[1., 2., 3., 4.], &[4., 3., 2., 1.]), -1.0);
        assert!(spearman(&[1., 2., 3.], &[1., 1., 2.]) > 0.0);
        assert_eq!(inversions(&[1., 2., 1.5, 3., 2.]), 2);
        assert_eq!(median(&[3., 1., 2.]), 2.0);
        assert_eq!(quantile(&[0., 10.], 0.25), 2.5);
    }

    #[test]
    fn records_replay_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            n_max: 2,
            seeds: 3,
            output: Some(dir.path().join("run")),
            ..small()
        };
        for e in [Experiment::FarSlab, Experiment::Moments, Experiment::Ratio] {
            let (rec, _) = run(e, &cfg).unwrap();
            assert!(replay(&rec).unwrap());
            let (csv, log) = persist(&rec).unwrap().unwrap();
            assert_eq!(read_csv(&csv).unwrap(), rec.rows);
            assert_eq!(read_log(&log).unwrap().last().unwrap(), &rec);
        }
        let header = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
        assert!(header.starts_with("N,R,seed,near_est,near_lb,far,moment1,moment2"));
        assert_eq!(read_log(&dir.path().join("run.jsonl")).unwrap().len(), 3);
        let mut tampered = run(Experiment::FarSlab, &cfg).unwrap().0;
        tampered.config.seeds = 4;
        assert!(replay(&tampered).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seeds": 7}"#).unwrap();
        assert_eq!(partial.seeds, 7);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sedes": 7}"#).is_err());
    }
}
