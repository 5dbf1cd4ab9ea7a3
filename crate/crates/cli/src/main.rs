use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use num_bigint::BigInt;
use num_rational::BigRational;
use serde_json::{json, Value};

use kakeya::harness::{self, Experiment, ExperimentConfig};
use kakeya::lacunarity::{decompose_lacunary_order, verify_witness, GenerateLimits, GeneratorSpec};
use kakeya::madic_tree::{encode_set, PointSetJson};
use kakeya::percolation::{three_sigma, ResistorNetwork};
use kakeya::pruning::PrunedSlopeTree;
use kakeya::scalar::{fmt_rational, ratio_to_f64};
use kakeya::sticky::{
    agreement_sweep, is_sticky_admissible, prob_closed_form, prob_exact, EnumerationOracle,
};
use kakeya::{Error, MadicTree, Result};

const USAGE: u8 = 64;
/// Cap on vertices listed per level by `encode`.
const LEVEL_CAP: usize = 1 << 20;

#[derive(Parser)]
#[command(
    name = "kakeya",
    version,
    about = "Sticky Kakeya constructions over finite direction sets"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct SetArgs {
    /// generator, e.g. `cantor:L=6`, `dyadic:m=5`, `power:lambda=1/2,J=8`
    #[arg(long)]
    set: Option<String>,
    /// JSON point set `{"M", "d", "J", "points": [["1/3"], …]}`
    #[arg(long, conflicts_with = "set")]
    points: Option<PathBuf>,
    /// tree base `M` (default: the Cantor base, else 2)
    #[arg(long)]
    base: Option<u32>,
    /// truncation height (default: separating height)
    #[arg(long)]
    height: Option<u32>,
}

impl SetArgs {
    fn spec(&self) -> Result<Option<GeneratorSpec>> {
        self.set.as_deref().map(str::parse).transpose()
    }

    fn base(&self) -> Result<u32> {
        Ok(match (self.base, self.spec()?) {
            (Some(b), _) => b,
            (None, Some(GeneratorSpec::Cantor { base, .. })) => base,
            _ => 2,
        })
    }

    fn tree(&self) -> Result<MadicTree> {
        match (self.spec()?, &self.points) {
            (Some(spec), _) => spec.tree(self.base()?, self.height),
            (None, Some(path)) => {
                let ps: PointSetJson = read_json(path)?;
                let pts = ps.parse_points()?;
                let m = self.base.unwrap_or(ps.m);
                encode_set(&pts, m, self.height.unwrap_or(ps.j))
            }
            (None, None) => Err(Error::validation("one of --set or --points is required")),
        }
    }

    fn points(&self) -> Result<Vec<Vec<BigRational>>> {
        match (self.spec()?, &self.points) {
            (Some(spec), _) => spec.generate(&GenerateLimits::default()),
            (None, Some(path)) => read_json::<PointSetJson>(path)?.parse_points(),
            (None, None) => Err(Error::validation("one of --set or --points is required")),
        }
    }
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// JSON experiment config; missing fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long = "N-min")]
    n_min: Option<u32>,
    #[arg(long = "N-max")]
    n_max: Option<u32>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    slices: Option<usize>,
    /// writes `<output>.csv` and appends to `<output>.jsonl`
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c: ExperimentConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(x) = self.seeds {
            c.seeds = x;
        }
        if let Some(x) = self.n_min {
            c.n_min = x;
        }
        if let Some(x) = self.n_max {
            c.n_max = x;
        }
        if let Some(x) = self.master_seed {
            c.master_seed = x;
        }
        if let Some(x) = self.slices {
            c.slices = x;
        }
        if let Some(x) = &self.output {
            c.output = Some(x.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a point set as an M-adic tree and summarize it
    Encode(SetArgs),
    /// Splitting number of the encoding tree
    SplitNumber(SetArgs),
    /// Lacunary decomposition of a one-dimensional set
    Lacunarity(SetArgs),
    /// Prune the slope tree to N generations of binary splits
    Prune {
        #[command(flatten)]
        set: SetArgs,
        #[arg(long = "N")]
        n: u32,
        #[arg(long = "C0", default_value_t = 1)]
        c0: u32,
    },
    /// Sample the tube family K_N(X) for one seed
    Construct {
        #[command(flatten)]
        set: SetArgs,
        #[arg(long = "N")]
        n: u32,
        #[arg(long = "C0", default_value_t = 1)]
        c0: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Far-slab volume experiment
    Volume(ExperimentArgs),
    /// First and second moments of pairwise intersections
    Moments(ExperimentArgs),
    /// Near/far volume ratio experiment
    Ratio(ExperimentArgs),
    /// Survival probability of Bernoulli(1/2) percolation on a tree
    Percolate {
        /// full tree with this branching
        #[arg(long, requires = "depth")]
        full: Option<usize>,
        /// random tree with branching in 1..=this
        #[arg(long, requires = "depth", conflicts_with = "full")]
        random: Option<usize>,
        #[arg(long)]
        depth: Option<u32>,
        #[command(flatten)]
        set: SetArgs,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare closed-form, exact and enumerated tuple probabilities
    VerifyProb {
        #[arg(long = "N", default_value_t = 2)]
        n: u32,
        /// truncation height (default 2N)
        #[arg(long = "J")]
        j: Option<u32>,
        /// also compare against exhaustive warehouse enumeration
        #[arg(long)]
        exhaustive: bool,
        /// tuple sizes (default: those of 2, 3, 4 within the tuple budget)
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// largest number of (roots, slopes) tuples swept by default per size
        #[arg(long, default_value_t = 5_000_000)]
        budget: u128,
        #[arg(long, default_value_t = 96)]
        max_vars: usize,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn encode(a: &SetArgs) -> Result<String> {
    let tree = a.tree()?;
    let counts = (0..=tree.height)
        .map(|k| tree.level(k, LEVEL_CAP).map(|l| l.len()))
        .collect::<Result<Vec<_>>>()?;
    Ok(pretty(&json!({
        "M": tree.grid.m,
        "d": tree.grid.d,
        "J": tree.height,
        "splitting_number": tree.splitting_number(),
        "vertices_per_level": counts,
    })))
}

fn lacunarity(a: &SetArgs) -> Result<String> {
    let pts = a.points()?;
    if pts.iter().any(|p| p.len() != 1) {
        return Err(Error::validation(
            "lacunary decompositions need a one-dimensional set",
        ));
    }
    let set: Vec<BigRational> = pts.into_iter().map(|mut p| p.remove(0)).collect();
    let dec = decompose_lacunary_order(&set, a.base()?)?;
    let mut verified = true;
    for piece in &dec.pieces {
        verified &= verify_witness(&piece.points, &piece.witness)?;
    }
    let mut out = serde_json::to_value(&dec).expect("serializable");
    out["verified"] = json!(verified);
    Ok(pretty(&out))
}

fn construct(set: &SetArgs, n: u32, c0: u32, seed: u64) -> Result<String> {
    let p = PrunedSlopeTree::prune(&set.tree()?, n, c0)?;
    let tubes = harness::construct_kakeya(&p, seed);
    let list: Vec<Value> = tubes
        .iter()
        .map(|t| {
            json!({
                "root": p.grid.digits(t.root),
                "slope_index": t.slope,
                "slope": p.slopes[t.slope].iter().map(fmt_rational).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(pretty(
        &json!({ "M": p.grid.m, "d": p.grid.d, "N": p.n, "J": p.j, "seed": seed, "tubes": list }),
    ))
}

fn experiment(e: Experiment, a: &ExperimentArgs) -> Result<String> {
    let cfg = a.config()?;
    let (rec, samples) = harness::run(e, &cfg)?;
    let files = harness::persist(&rec)?;
    let mut table = match e {
        Experiment::FarSlab => {
            let mut t = harness::far_slab_table(samples);
            t.samples.clear();
            serde_json::to_value(t)
        }
        Experiment::Moments => {
            let mut t = harness::moment_table(cfg.m, samples);
            t.samples.clear();
            serde_json::to_value(t)
        }
        Experiment::Ratio => {
            let mut t = harness::ratio_table(&cfg, samples);
            t.samples.clear();
            serde_json::to_value(t)
        }
    }
    .expect("serializable");
    if let Value::Object(m) = &mut table {
        m.remove("samples");
        m.insert("config_hash".into(), json!(rec.config_hash));
        if let Some((csv, log)) = files {
            m.insert("csv".into(), json!(csv));
            m.insert("log".into(), json!(log));
        }
    }
    Ok(pretty(&table))
}

fn percolate(
    full: Option<usize>,
    random: Option<usize>,
    depth: Option<u32>,
    set: &SetArgs,
    trials: u64,
    seed: u64,
) -> Result<String> {
    let net = match (full, random, depth) {
        (Some(b), _, Some(h)) => ResistorNetwork::full(b, h),
        (_, Some(b), Some(h)) => ResistorNetwork::random(h, b, seed),
        _ => ResistorNetwork::from_madic(&set.tree()?, LEVEL_CAP)?.0,
    };
    let exact = net.survival_exact();
    let bound = net.survival_upper_bound()?;
    let mc = net.survival_monte_carlo(trials, seed)?;
    let p = ratio_to_f64(&exact);
    Ok(pretty(&json!({
        "vertices": net.len(),
        "survival_exact": fmt_rational(&exact),
        "resistance": fmt_rational(&bound.resistance),
        "bound": fmt_rational(&bound.from_resistance),
        "bound_from_level_counts": fmt_rational(&bound.from_level_counts),
        "monte_carlo": mc,
        "trials": trials,
        "within_three_sigma": (mc - p).abs() <= three_sigma(p, trials),
    })))
}

/// `Σ b_i · 3 · 4^{-i}` over all bit strings `b` of length `N`: binary digits
/// doubled, so every split is followed by one level of single children.
fn doubled_digit_slopes(n: u32) -> Vec<Vec<BigRational>> {
    (0..1u64 << n)
        .map(|bits| {
            let num: u64 = (0..n)
                .map(|i| ((bits >> (n - 1 - i)) & 1) * 3 * 4u64.pow(n - 1 - i))
                .sum();
            vec![BigRational::new(
                BigInt::from(num),
                BigInt::from(4u64.pow(n)),
            )]
        })
        .collect()
}

fn verify_prob(
    n: u32,
    j: Option<u32>,
    exhaustive: bool,
    sizes: Option<Vec<usize>>,
    budget: u128,
    max_vars: usize,
) -> Result<(String, bool)> {
    if n == 0 || n > 3 {
        return Err(Error::validation("verify-prob supports 1 ≤ N ≤ 3"));
    }
    let j = j.unwrap_or(2 * n);
    if j < 2 * n {
        return Err(Error::validation(format!(
            "J must be at least 2N = {}",
            2 * n
        )));
    }
    let p = PrunedSlopeTree::from_slopes(&doubled_digit_slopes(n), 2, 1, j)?;
    let oracle = EnumerationOracle::new(&p, max_vars)?;
    if oracle.roots.len() > 4096 {
        return Err(Error::infeasible("more than 4096 root cubes"));
    }
    let mut lines = vec![format!(
        "instance: M=2 d=1 N={n} J={j}, {} roots, {} warehouse variables",
        oracle.roots.len(),
        oracle.vars.len()
    )];
    let tuples = |size: usize| {
        binomial(oracle.roots.len() as u128, size as u128) * (p.len() as u128).pow(size as u32)
    };
    let sizes = match sizes {
        Some(s) => s,
        None => {
            let (run, skip): (Vec<usize>, Vec<usize>) = (2..=4).partition(|&s| tuples(s) <= budget);
            for s in skip {
                lines.push(format!(
                    "{s}-tuples skipped: {} exceed the budget {budget}",
                    tuples(s)
                ));
            }
            run
        }
    };
    if sizes.iter().any(|&s| !(2..=4).contains(&s)) {
        return Err(Error::validation("tuple sizes must lie in 2..=4"));
    }
    let mut ok = true;
    for &size in &sizes {
        if exhaustive {
            let r = agreement_sweep(&oracle, size);
            let bad = r.admissibility_mismatches + r.exact_mismatches + r.closed_form_mismatches;
            ok &= bad == 0;
            lines.push(format!(
                "{size}-tuples: {} admissible of {}; mismatches: admissibility {}, exact {}, closed form {}",
                r.admissible, r.tuples, r.admissibility_mismatches, r.exact_mismatches, r.closed_form_mismatches
            ));
        } else {
            let (adm, bad) = closed_form_vs_exact(&p, &oracle.roots, size)?;
            ok &= bad == 0;
            lines.push(format!(
                "{size}-tuples: {adm} admissible; closed form vs exact mismatches {bad}"
            ));
        }
    }
    lines.push(if ok {
        "all tuples agree".to_string()
    } else {
        "disagreement found".to_string()
    });
    Ok((lines.join("\n"), ok))
}

fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn closed_form_vs_exact(
    p: &PrunedSlopeTree,
    roots: &[kakeya::Cube],
    size: usize,
) -> Result<(usize, usize)> {
    let ns = p.len();
    let (mut adm, mut bad) = (0, 0);
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        let rs: Vec<_> = idx.iter().map(|&i| roots[i]).collect();
        for key in 0..ns.pow(size as u32) {
            let slopes: Vec<usize> = (0..size)
                .map(|k| key / ns.pow((size - 1 - k) as u32) % ns)
                .collect();
            if !is_sticky_admissible(p, &rs, &slopes)?.admissible {
                continue;
            }
            adm += 1;
            if prob_closed_form(p, &rs, &slopes)?.prob != prob_exact(p, &rs, &slopes)? {
                bad += 1;
            }
        }
        // next combination
        let mut k = size;
        while k > 0 && idx[k - 1] == roots.len() - size + k - 1 {
            k -= 1;
        }
        if k == 0 {
            return Ok((adm, bad));
        }
        idx[k - 1] += 1;
        for i in k..size {
            idx[i] = idx[i - 1] + 1;
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(String, bool)> {
    let done = |s: String| Ok((s, true));
    match cmd {
        Cmd::Encode(a) => done(encode(&a)?),
        Cmd::SplitNumber(a) => done(a.tree()?.splitting_number().to_string()),
        Cmd::Lacunarity(a) => done(lacunarity(&a)?),
        Cmd::Prune { set, n, c0 } => {
            let p = PrunedSlopeTree::prune(&set.tree()?, n, c0)?;
            done(pretty(&p.to_json()))
        }
        Cmd::Construct { set, n, c0, seed } => done(construct(&set, n, c0, seed)?),
        Cmd::Volume(a) => done(experiment(Experiment::FarSlab, &a)?),
        Cmd::Moments(a) => done(experiment(Experiment::Moments, &a)?),
        Cmd::Ratio(a) => done(experiment(Experiment::Ratio, &a)?),
        Cmd::Percolate {
            full,
            random,
            depth,
            set,
            trials,
            seed,
        } => done(percolate(full, random, depth, &set, trials, seed)?),
        Cmd::VerifyProb {
            n,
            j,
            exhaustive,
            sizes,
            budget,
            max_vars,
        } => verify_prob(n, j, exhaustive, sizes, budget, max_vars),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok((out, ok)) => {
            let _ = writeln!(std::io::stdout(), "{out}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Validation(_) => 2,
                Error::Infeasible(_) => 3,
            })
        }
    }
}
