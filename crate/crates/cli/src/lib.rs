//! Command-line front end for `domchar`.
//!
//! Every command resolves its configuration from defaults, an optional JSON
//! file (`--config`, which may also be a previous run's `manifest.json`) and
//! explicit flags, in that order of precedence. The resolved configuration
//! is written to `<out>/manifest.json`; passing that file back through
//! `--config` reproduces the run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use domchar::domain::characterize;
use domchar::eval::{self, BoxSummary, Posterior};
use domchar::io;
use domchar::mixture::{self, baseline_from_fit, fit_weights, noise_sweep};
use domchar::npe::{self, PairSet};
use domchar::simulator::{default_odd_regions, mix_seed, Region, FEATURE_DIM};
use domchar::{Error, Flow, FlowConfig, ObservationBag, ParamSpace, Result, Simulator, Split, SplitFractions};

#[derive(Parser, Debug)]
#[command(name = "domchar", version, about = "Characterize weather domains with conditional spline flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a dataset of weather/observation pairs.
    Generate(GenerateArgs),
    /// Train a posterior flow on a dataset.
    Train(TrainArgs),
    /// Coverage, π, PPC and corner diagnostics of a trained flow.
    Eval(EvalArgs),
    /// Characterize the domain of a bag of observations.
    Characterize(CharacterizeArgs),
    /// Fit mixture weights of source domains to a target domain.
    FitMixture(FitArgs),
    /// Noise-sweep experiment on out-of-ODD contamination.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Master seed; every random stream of the run derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// JSON config or a previous run's manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_vec<T>(slot: &mut Vec<T>, v: Vec<T>) {
    if !v.is_empty() {
        *slot = v;
    }
}

fn parse_bound(s: &str) -> std::result::Result<(String, f64, f64), String> {
    let (name, range) = s.split_once('=').ok_or("expected name=lower:upper")?;
    let (lo, hi) = range.split_once(':').ok_or("expected name=lower:upper")?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad lower bound `{lo}`"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad upper bound `{hi}`"))?;
    Ok((name.trim().to_string(), lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub n: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 6500,
            train: 10.0,
            val: 2.0,
            test: 1.0,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of records.
    #[arg(long)]
    pub n: Option<usize>,
    /// Split ratios (normalized): train, val, test.
    #[arg(long)]
    pub train: Option<f64>,
    #[arg(long)]
    pub val: Option<f64>,
    #[arg(long)]
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub data: PathBuf,
    pub flow: FlowConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let t = npe::TrainConfig::default();
        Self {
            seed: 0,
            data: PathBuf::new(),
            flow: FlowConfig::default(),
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset CSV written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Hidden widths of each conditioner, e.g. `64,64`.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunConfig {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: String,
    /// Posterior draws per test pair.
    pub samples: usize,
    /// Number of credibility levels, evenly spaced from 0 to 1.
    pub levels: usize,
    pub max_pairs: Option<usize>,
    /// Replace each ground truth by a draw from the flow itself.
    pub self_calibration: bool,
    pub ppc_records: usize,
    pub ppc_samples: usize,
    pub corner_record: usize,
    pub corner_samples: usize,
    pub resolution: usize,
    pub model: String,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            split: "test".into(),
            samples: eval::DEFAULT_HDR_SAMPLES,
            levels: 11,
            max_pairs: None,
            self_calibration: false,
            ppc_records: 20,
            ppc_samples: 100,
            corner_record: 0,
            corner_samples: 10_000,
            resolution: 64,
            model: "flow".into(),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset split to evaluate: train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long)]
    pub self_calibration: bool,
    #[arg(long)]
    pub ppc_records: Option<usize>,
    #[arg(long)]
    pub ppc_samples: Option<usize>,
    #[arg(long)]
    pub corner_record: Option<usize>,
    #[arg(long)]
    pub corner_samples: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Label written into the π summary.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizeRunConfig {
    pub seed: u64,
    pub checkpoint: PathBuf,
    /// Bag CSV; when absent a bag is simulated.
    pub bag: Option<PathBuf>,
    /// Size of the simulated bag.
    pub simulate: usize,
    /// Bounds of the simulated bag's region.
    pub region: Vec<(String, f64, f64)>,
    pub half_life: Option<f64>,
    pub samples: usize,
    pub resolution: usize,
}

impl Default for CharacterizeRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint: PathBuf::new(),
            bag: None,
            simulate: 1000,
            region: Vec::new(),
            half_life: None,
            samples: 10_000,
            resolution: 64,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct CharacterizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bag: Option<PathBuf>,
    #[arg(long)]
    pub simulate: Option<usize>,
    /// Region bound of a simulated bag, `name=lower:upper`; repeatable.
    #[arg(long, value_parser = parse_bound)]
    pub region: Vec<(String, f64, f64)>,
    /// Replace bag weights by exponential decay of the timestamps.
    #[arg(long)]
    pub half_life: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitRunConfig {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub target: PathBuf,
    pub sources: Vec<PathBuf>,
    pub points: usize,
    pub baseline_trials: usize,
}

impl Default for FitRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint: PathBuf::new(),
            target: PathBuf::new(),
            sources: Vec::new(),
            points: mixture::DEFAULT_POINTS,
            baseline_trials: 100,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Target bag CSV.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Source bag CSV; repeatable, order defines the weight index.
    #[arg(long = "source")]
    pub sources: Vec<PathBuf>,
    /// Evaluation points M.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub baseline_trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepRunConfig {
    pub seed: u64,
    pub checkpoint: PathBuf,
    /// Source bag CSVs; simulated from `source_regions` when empty.
    pub sources: Vec<PathBuf>,
    /// Out-of-ODD bag CSV; simulated from `out_region` when absent.
    pub out_bag: Option<PathBuf>,
    pub source_regions: Vec<Region>,
    pub out_region: Region,
    pub lambda: Vec<f64>,
    pub etas: Vec<f64>,
    pub reps: usize,
    pub points: usize,
    pub baseline_trials: usize,
    pub bootstrap_trials: usize,
}

impl Default for SweepRunConfig {
    fn default() -> Self {
        let (source_regions, out_region) = default_odd_regions();
        let s = mixture::SweepConfig::default();
        Self {
            seed: 0,
            checkpoint: PathBuf::new(),
            sources: Vec::new(),
            out_bag: None,
            source_regions,
            out_region,
            lambda: vec![0.2, 0.3, 0.5],
            etas: s.etas,
            reps: s.reps,
            points: s.points,
            baseline_trials: s.baseline_trials,
            bootstrap_trials: s.bootstrap_trials,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "source")]
    pub sources: Vec<PathBuf>,
    #[arg(long)]
    pub out_bag: Option<PathBuf>,
    /// True mixture weights of the in-ODD part, e.g. `0.2,0.3,0.5`.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    /// Noise proportions, e.g. `0,0.5,1`.
    #[arg(long, value_delimiter = ',')]
    pub etas: Vec<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub baseline_trials: Option<usize>,
    #[arg(long)]
    pub bootstrap_trials: Option<usize>,
}

/// Record of a run, sufficient to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Value,
    pub outputs: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)?;
    let value = match value.get("config") {
        Some(inner) if value.get("command").is_some() => {
            let recorded = value["command"].as_str().unwrap_or_default();
            if recorded != command {
                return Err(Error::InvalidArgument(format!(
                    "manifest was written by `{recorded}`, not `{command}`"
                )));
            }
            inner.clone()
        }
        _ => value,
    };
    serde_json::from_value(value).map_err(|e| Error::InvalidArgument(format!("bad config {}: {e}", path.display())))
}

fn require(path: &Path, flag: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidArgument(format!("missing --{flag}")));
    }
    Ok(())
}

fn read_input<T>(path: &Path, what: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("{what} {} does not exist", path.display())));
    }
    f(path)
}

fn load_flow(path: &Path) -> Result<Flow> {
    require(path, "checkpoint")?;
    read_input(path, "checkpoint", io::load_checkpoint)
}

fn finish<C: Serialize>(out: &Path, command: &str, config: &C, outputs: Vec<String>) -> Result<()> {
    let manifest = Manifest {
        tool: "domchar".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: serde_json::to_value(config)?,
        outputs,
    };
    io::write_json(&manifest, &out.join(MANIFEST))
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

pub fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut c: GenerateConfig = load_config(args.common.config.as_deref(), "generate")?;
    set(&mut c.seed, args.common.seed);
    set(&mut c.n, args.n);
    set(&mut c.train, args.train);
    set(&mut c.val, args.val);
    set(&mut c.test, args.test);

    let out = &args.common.out;
    fs::create_dir_all(out)?;
    let sim = Simulator::new(ParamSpace::default_space())?;
    let ds = sim.generate_dataset(c.n, c.seed, SplitFractions::from_ratios(c.train, c.val, c.test)?)?;
    io::write_dataset(&ds, &out.join("dataset.csv"))?;
    finish(out, "generate", &c, vec!["dataset.csv".into(), "dataset.meta.json".into()])
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut c: TrainRunConfig = load_config(args.common.config.as_deref(), "train")?;
    set(&mut c.seed, args.common.seed);
    set(&mut c.data, args.data);
    set(&mut c.flow.layers, args.layers);
    set(&mut c.flow.bins, args.bins);
    set_vec(&mut c.flow.hidden, args.hidden);
    set(&mut c.batch_size, args.batch_size);
    set(&mut c.learning_rate, args.lr);
    set(&mut c.max_epochs, args.epochs);
    set(&mut c.patience, args.patience);
    require(&c.data, "data")?;

    let ds = read_input(&c.data, "dataset", io::read_dataset)?;
    let train_set: PairSet<f64> = ds.pairs(Split::Train);
    let val_set: PairSet<f64> = ds.pairs(Split::Val);
    let flow = Flow::new(ds.space.clone(), FEATURE_DIM, c.flow.clone(), &mut rng(c.seed, 0))?;
    let tc = npe::TrainConfig {
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        max_epochs: c.max_epochs,
        patience: c.patience,
        seed: mix_seed(c.seed, 1),
    };
    let (flow, report) = npe::train(flow, &train_set, &val_set, &tc)?;

    let out = &args.common.out;
    fs::create_dir_all(out)?;
    io::save_checkpoint(&flow, &out.join("flow.ckpt"))?;
    io::write_train_report(&report, &out.join("train_report.csv"))?;
    io::write_json(
        &json!({
            "train_pairs": train_set.len(),
            "val_pairs": val_set.len(),
            "epochs_run": report.epochs.len(),
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
            "stopped_early": report.stopped_early,
            "parameters": flow.param_count(),
        }),
        &out.join("train_summary.json"),
    )?;
    finish(
        out,
        "train",
        &c,
        vec!["flow.ckpt".into(), "train_report.csv".into(), "train_summary.json".into()],
    )
}

fn predicted_ranges(space: &ParamSpace) -> (Vec<String>, Vec<(f64, f64)>) {
    (
        space.predicted_names(),
        space.predicted_dims().map(|d| (d.lower, d.upper)).collect(),
    )
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut c: EvalRunConfig = load_config(args.common.config.as_deref(), "eval")?;
    set(&mut c.seed, args.common.seed);
    set(&mut c.checkpoint, args.checkpoint);
    set(&mut c.data, args.data);
    set(&mut c.split, args.split);
    set(&mut c.samples, args.samples);
    set(&mut c.levels, args.levels);
    if args.max_pairs.is_some() {
        c.max_pairs = args.max_pairs;
    }
    c.self_calibration |= args.self_calibration;
    set(&mut c.ppc_records, args.ppc_records);
    set(&mut c.ppc_samples, args.ppc_samples);
    set(&mut c.corner_record, args.corner_record);
    set(&mut c.corner_samples, args.corner_samples);
    set(&mut c.resolution, args.resolution);
    set(&mut c.model, args.model);
    require(&c.data, "data")?;
    if c.levels < 2 {
        return Err(Error::InvalidArgument("need at least 2 levels".into()));
    }

    let flow = load_flow(&c.checkpoint)?;
    let ds = read_input(&c.data, "dataset", io::read_dataset)?;
    let sim = Simulator::new(ds.space.clone())?;
    let split = Split::parse(&c.split)?;
    let records: Vec<_> = ds.split(split).take(c.max_pairs.unwrap_or(usize::MAX)).collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{}` is empty", c.split)));
    }

    let mut theta = Vec::with_capacity(records.len());
    let mut context = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let ctx = r.observation.to_context::<f64>();
        theta.push(if c.self_calibration {
            flow.sample(&ctx, 1, &mut rng(c.seed, 1_000_000 + i as u64))?.remove(0)
        } else {
            ds.space.weather_of(&r.params)
        });
        context.push(ctx);
    }
    let pairs = PairSet::new(theta, context)?;
    let curve = eval::expected_coverage(&flow, &pairs, &eval::uniform_levels(c.levels - 1), c.samples, mix_seed(c.seed, 2))?;
    let pi_summary = BoxSummary::from_values(&curve.pi)?;

    let mut r = rng(c.seed, 3);
    let mut post = Vec::new();
    let mut prior = Vec::new();
    for (i, rec) in records.iter().take(c.ppc_records).enumerate() {
        post.push((i, eval::ppc(&flow, &sim, rec, c.ppc_samples, &mut r)?));
        prior.push((i, eval::prior_predictive(&sim, rec, c.ppc_samples, &mut r)?));
    }
    let median = |draws: &[(usize, Vec<eval::PpcDraw>)]| -> Option<f64> {
        let d: Vec<f64> = draws.iter().flat_map(|(_, v)| v.iter().map(|d| d.distance)).collect();
        BoxSummary::from_values(&d).ok().map(|s| s.median)
    };

    let rec = records
        .get(c.corner_record)
        .ok_or_else(|| Error::InvalidArgument(format!("corner record {} out of range", c.corner_record)))?;
    let (names, ranges) = predicted_ranges(flow.space());
    let post_density = Posterior::new(&flow, rec.observation.to_context());
    let corner = eval::corner_data(&post_density, &names, &ranges, c.resolution, c.corner_samples, &mut rng(c.seed, 4))?;

    let out = &args.common.out;
    fs::create_dir_all(out)?;
    io::write_coverage(&curve, &out.join("coverage.csv"))?;
    io::write_pi(&curve.pi, &out.join("pi.csv"))?;
    io::write_pi_summary(&c.model, &pi_summary, &out.join("pi_summary.csv"))?;
    let mut ppc_rows: Vec<(usize, &str, &[eval::PpcDraw])> = Vec::new();
    for ((i, p), (_, q)) in post.iter().zip(&prior) {
        ppc_rows.push((*i, "posterior", p));
        ppc_rows.push((*i, "prior", q));
    }
    io::write_ppc(&ppc_rows, &out.join("ppc.csv"))?;
    io::write_corner(&corner, out, "corner")?;
    io::write_json(
        &json!({
            "pairs": curve.pairs,
            "samples_per_pair": curve.samples_per_pair,
            "max_coverage_deviation": curve.max_deviation(),
            "coverage_deviation": curve.signed_deviation(),
            "monotone": curve.is_monotone(),
            "pi": pi_summary,
            "ppc_posterior_median": median(&post),
            "ppc_prior_median": median(&prior),
        }),
        &out.join("eval_summary.json"),
    )?;
    finish(
        out,
        "eval",
        &c,
        [
            "coverage.csv",
            "pi.csv",
            "pi_summary.csv",
            "ppc.csv",
            "corner_marginals.csv",
            "corner_pairs.csv",
            "corner_levels.csv",
            "eval_summary.json",
        ]
        .map(String::from)
        .to_vec(),
    )
}

fn simulated_bag(sim: &Simulator, region: &Region, seed: u64) -> Result<ObservationBag> {
    ObservationBag::uniform(sim.simulate_region(region, seed)?.into_iter().map(|r| r.observation))
}

pub fn cmd_characterize(args: CharacterizeArgs) -> Result<()> {
    let mut c: CharacterizeRunConfig = load_config(args.common.config.as_deref(), "characterize")?;
    set(&mut c.seed, args.common.seed);
    set(&mut c.checkpoint, args.checkpoint);
    if args.bag.is_some() {
        c.bag = args.bag;
    }
    set(&mut c.simulate, args.simulate);
    set_vec(&mut c.region, args.region);
    if args.half_life.is_some() {
        c.half_life = args.half_life;
    }
    set(&mut c.samples, args.samples);
    set(&mut c.resolution, args.resolution);

    let flow = load_flow(&c.checkpoint)?;
    let bag = match &c.bag {
        Some(p) => read_input(p, "bag", io::read_bag)?,
        None => {
            let sim = Simulator::new(flow.space().clone())?;
            let bounds: Vec<(&str, f64, f64)> = c.region.iter().map(|(n, l, u)| (n.as_str(), *l, *u)).collect();
            simulated_bag(&sim, &Region::new("bag", c.simulate, &bounds), mix_seed(c.seed, 1))?
        }
    };
    let bag = match c.half_life {
        Some(h) => bag.with_temporal_weights(h)?,
        None => bag,
    };
    let ch = characterize(&flow, &bag)?;
    let (names, ranges) = predicted_ranges(flow.space());
    let corner = eval::corner_data(&ch, &names, &ranges, c.resolution, c.samples, &mut rng(c.seed, 2))?;
    let means: serde_json::Map<String, Value> = corner
        .marginals
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mean: f64 = m.iter().enumerate().map(|(b, p)| p * corner.bin_center(k, b)).sum();
            (names[k].clone(), json!(mean))
        })
        .collect();

    let out = &args.common.out;
    fs::create_dir_all(out)?;
    io::write_bag(&bag, &out.join("bag.csv"))?;
    io::write_corner(&corner, out, "domain")?;
    io::write_json(
        &json!({
            "checkpoint": c.checkpoint,
            "entries": bag.len(),
            "weights": ch.weights(),
            "samples": c.samples,
            "marginal_means": means,
        }),
        &out.join("characterization.json"),
    )?;
    finish(
        out,
        "characterize",
        &c,
        [
            "bag.csv",
            "domain_marginals.csv",
            "domain_pairs.csv",
            "domain_levels.csv",
            "characterization.json",
        ]
        .map(String::from)
        .to_vec(),
    )
}

pub fn cmd_fit_mixture(args: FitArgs) -> Result<()> {
    let mut c: FitRunConfig = load_config(args.common.config.as_deref(), "fit-mixture")?;
    set(&mut c.seed, args.common.seed);
    set(&mut c.checkpoint, args.checkpoint);
    set(&mut c.target, args.target);
    set_vec(&mut c.sources, args.sources);
    set(&mut c.points, args.points);
    set(&mut c.baseline_trials, args.baseline_trials);
    require(&c.target, "target")?;
    if c.sources.is_empty() {
        return Err(Error::InvalidArgument("missing --source".into()));
    }

    let flow = load_flow(&c.checkpoint)?;
    let target_bag = read_input(&c.target, "bag", io::read_bag)?;
    let source_bags = c
        .sources
        .iter()
        .map(|p| read_input(p, "bag", io::read_bag))
        .collect::<Result<Vec<_>>>()?;
    let target = characterize(&flow, &target_bag)?;
    let sources = source_bags
        .iter()
        .map(|b| characterize(&flow, b))
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng(c.seed, 1);
    let fit = fit_weights(&target, &sources, c.points, &mut r)?;
    let baseline = baseline_from_fit(&fit, c.baseline_trials, &mut r)?;

    let out = &args.common.out;
    fs::create_dir_all(out)?;
    io::write_weights(&fit, &out.join("weights.csv"))?;
    io::write_json(
        &json!({
            "weights": fit.weights,
            "delta": fit.delta,
            "points": fit.point_count(),
            "ridged": fit.ridged,
            "baseline": { "q1": baseline.q1, "median": baseline.median, "q3": baseline.q3 },
        }),
        &out.join("fit.json"),
    )?;
    finish(out, "fit-mixture", &c, vec!["weights.csv".into(), "fit.json".into()])
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut c: SweepRunConfig = load_config(args.common.config.as_deref(), "sweep")?;
    set(&mut c.seed, args.common.seed);
    set(&mut c.checkpoint, args.checkpoint);
    set_vec(&mut c.sources, args.sources);
    if args.out_bag.is_some() {
        c.out_bag = args.out_bag;
    }
    set_vec(&mut c.lambda, args.lambda);
    set_vec(&mut c.etas, args.etas);
    set(&mut c.reps, args.reps);
    set(&mut c.points, args.points);
    set(&mut c.baseline_trials, args.baseline_trials);
    set(&mut c.bootstrap_trials, args.bootstrap_trials);

    let flow = load_flow(&c.checkpoint)?;
    let sim = Simulator::new(flow.space().clone())?;
    let out = &args.common.out;
    fs::create_dir_all(out)?;
    let mut outputs = Vec::new();

    let source_bags = if c.sources.is_empty() {
        let mut bags = Vec::new();
        for (k, region) in c.source_regions.iter().enumerate() {
            let bag = simulated_bag(&sim, region, mix_seed(c.seed, 10 + k as u64))?;
            let name = format!("bag_{}.csv", region.name);
            io::write_bag(&bag, &out.join(&name))?;
            outputs.push(name);
            bags.push(bag);
        }
        bags
    } else {
        c.sources
            .iter()
            .map(|p| read_input(p, "bag", io::read_bag))
            .collect::<Result<Vec<_>>>()?
    };
    let out_bag = match &c.out_bag {
        Some(p) => read_input(p, "bag", io::read_bag)?,
        None => {
            let bag = simulated_bag(&sim, &c.out_region, mix_seed(c.seed, 9))?;
            let name = format!("bag_{}.csv", c.out_region.name);
            io::write_bag(&bag, &out.join(&name))?;
            outputs.push(name);
            bag
        }
    };

    let sc = mixture::SweepConfig {
        etas: c.etas.clone(),
        reps: c.reps,
        points: c.points,
        baseline_trials: c.baseline_trials,
        bootstrap_trials: c.bootstrap_trials,
        seed: mix_seed(c.seed, 3),
    };
    let result = noise_sweep(&flow, &source_bags, &c.lambda, &out_bag, &sc)?;
    io::write_sweep(&result, &out.join("sweep.csv"))?;
    let per_eta: Vec<Value> = result
        .etas
        .iter()
        .enumerate()
        .map(|(i, eta)| {
            json!({
                "eta": eta,
                "median_d_E": result.median_of(i, |r| r.d_e),
                "median_delta": result.median_of(i, |r| r.delta),
                "median_baseline": result.median_of(i, |r| r.baseline_median),
                "flagged_fraction": result.flagged_fraction(i),
            })
        })
        .collect();
    io::write_json(
        &json!({
            "odd_threshold": result.odd_threshold,
            "in_odd": { "q1": result.in_odd.q1, "median": result.in_odd.median, "q3": result.in_odd.q3 },
            "per_eta": per_eta,
        }),
        &out.join("sweep_summary.json"),
    )?;
    outputs.push("sweep.csv".into());
    outputs.push("sweep_summary.json".into());
    finish(out, "sweep", &c, outputs)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Characterize(a) => cmd_characterize(a),
        Command::FitMixture(a) => cmd_fit_mixture(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// One-line JSON error report.
pub fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print a single JSON line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}
