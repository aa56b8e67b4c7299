//! Command-line surface: dataset generation, training, latent grid dumps,
//! evaluation suites, and the estimator gradient check. Training reads a
//! flat-key TOML config; flags override file values which override defaults,
//! and every artifact-producing command echoes its fully resolved parameters
//! to `config.resolved.toml` beside its outputs. Exit codes: 0 success,
//! 1 usage error, 2 runtime failure.

use crate::eval::{
    accuracy, disent_report, dump_grids, efficiency_score, encode_dataset, group_worst_acc,
    mae_per_dim, predict, train_downstream, DownstreamConfig, GridMode,
};
use crate::graph::{pendulum_true_graph, super_graph_from_order, GraphMask};
use crate::objectives::SupLossKind;
use crate::oracle::{gradcheck_table, LinGaussSpec};
use crate::pendulum::{self, inject_spurious, SpuriousMode};
use crate::trainer::{self, load_checkpoint, FMode, PriorMode, TrainConfig, TrainState};
use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "dear",
    version,
    about = "Causal generative representation learning on the pendulum benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic pendulum dataset (train/val/test splits).
    GenData(GenDataArgs),
    /// Train the generative model; writes checkpoints and a metrics CSV.
    Train(TrainCliArgs),
    /// Dump image grids that vary one latent coordinate with the rest held fixed.
    Traverse(GridArgs),
    /// Dump image grids that set one latent coordinate and recompute its descendants.
    Intervene(GridArgs),
    /// Score encoder disentanglement and factor reconstruction on the test split.
    EvalDisent(EvalDisentArgs),
    /// Train downstream classifiers on learned vs raw representations at two subset sizes.
    Downstream(DownstreamArgs),
    /// Worst-group accuracy under a spurious background correlation shift.
    Robustness(RobustnessArgs),
    /// Check the Monte-Carlo gradient estimators against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Parse argv and run the selected command, mapping outcomes to the exit
/// code contract. Callable in-process for tests.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Traverse(args) => cmd_grid(&args, GridMode::Traverse),
        Command::Intervene(args) => cmd_grid(&args, GridMode::Intervene),
        Command::EvalDisent(args) => cmd_eval_disent(&args),
        Command::Downstream(args) => cmd_downstream(&args),
        Command::Robustness(args) => cmd_robustness(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    }
}

fn write_resolved<T: Serialize>(out_dir: &Path, echo: &T) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let value = toml::Value::try_from(echo).context("serializing resolved config")?;
    let text = toml::to_string_pretty(&value).context("formatting resolved config")?;
    fs::write(out_dir.join("config.resolved.toml"), text)?;
    Ok(())
}

fn write_report<T: Serialize>(out_dir: &Path, report: &T) -> Result<PathBuf> {
    let path = out_dir.join("report.json");
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    fs::write(&path, bytes)?;
    Ok(path)
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

// ── gen-data ──

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6724)]
    n_train: usize,
    #[arg(long, default_value_t = 6724)]
    n_val: usize,
    #[arg(long, default_value_t = 6724)]
    n_test: usize,
    /// Probability that a sample's shadow pair is replaced by uniform noise.
    #[arg(long, default_value_t = 0.2)]
    corruption_rate: f64,
    /// Bake the background shift in: train backgrounds match tau with this
    /// probability, val/test backgrounds are fair coins.
    #[arg(long)]
    spurious_correlation: Option<f64>,
}

#[derive(Serialize)]
struct GenDataEcho {
    command: &'static str,
    out: String,
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    corruption_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    spurious_correlation: Option<f64>,
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.corruption_rate) {
        bail!("corruption-rate must lie in [0, 1]");
    }
    let ds = match args.spurious_correlation {
        Some(c) => {
            if !(0.0..=1.0).contains(&c) {
                bail!("spurious-correlation must lie in [0, 1]");
            }
            pendulum::make_spurious_dataset(
                args.n_train,
                args.n_val,
                args.n_test,
                args.seed,
                args.corruption_rate,
                c,
            )
        }
        None => pendulum::make_dataset(
            args.n_train,
            args.n_val,
            args.n_test,
            args.seed,
            args.corruption_rate,
        ),
    };
    pendulum::save_dataset(&ds, &args.out)?;
    write_resolved(
        &args.out,
        &GenDataEcho {
            command: "gen-data",
            out: path_str(&args.out),
            seed: args.seed,
            n_train: args.n_train,
            n_val: args.n_val,
            n_test: args.n_test,
            corruption_rate: args.corruption_rate,
            spurious_correlation: args.spurious_correlation,
        },
    )?;
    println!(
        "wrote dataset ({} train / {} val / {} test) to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        args.out.display()
    );
    Ok(())
}

// ── train ──

/// Which permitted-edge structure the latent prior gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GraphChoice {
    /// The known pendulum graph: both angles point at both shadow factors.
    True,
    /// Only the causal order: every forward edge permitted.
    Order,
}

fn parse_prior_mode(s: &str) -> Result<PriorMode, String> {
    match s {
        "scm" => Ok(PriorMode::Scm),
        "independent" => Ok(PriorMode::Independent),
        _ => Err("expected `scm` or `independent`".into()),
    }
}

fn parse_f_mode(s: &str) -> Result<FMode, String> {
    match s {
        "linear" => Ok(FMode::Linear),
        "pwl" => Ok(FMode::Pwl),
        _ => Err("expected `linear` or `pwl`".into()),
    }
}

fn parse_sup_kind(s: &str) -> Result<SupLossKind, String> {
    match s {
        "ce" => Ok(SupLossKind::CrossEntropy),
        "l2" => Ok(SupLossKind::SquaredError),
        _ => Err("expected `ce` or `l2`".into()),
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainCliArgs {
    /// TOML config file; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Freeform run tag echoed into the resolved config.
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long, value_enum)]
    pub graph: Option<GraphChoice>,
    #[arg(long)]
    pub lr_d: Option<f64>,
    #[arg(long)]
    pub lr_eg: Option<f64>,
    #[arg(long)]
    pub lr_prior_f: Option<f64>,
    #[arg(long)]
    pub lr_a: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub d_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub clamp_c: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_prior_mode)]
    pub prior_mode: Option<PriorMode>,
    #[arg(long, value_parser = parse_f_mode)]
    pub f_mode: Option<FMode>,
    #[arg(long, value_parser = parse_sup_kind)]
    pub sup_kind: Option<SupLossKind>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub img_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

/// Config-file schema: every key optional, unknown keys rejected by name.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub tag: Option<String>,
    pub graph: Option<GraphChoice>,
    pub lr_d: Option<f64>,
    pub lr_eg: Option<f64>,
    pub lr_prior_f: Option<f64>,
    pub lr_a: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub d_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub label_fraction: Option<f64>,
    pub clamp_c: Option<f64>,
    pub seed: Option<u64>,
    pub prior_mode: Option<PriorMode>,
    pub f_mode: Option<FMode>,
    pub sup_kind: Option<SupLossKind>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub img_size: Option<usize>,
    pub hidden: Option<usize>,
}

/// Fully resolved training run: defaults, then file values, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub graph: GraphChoice,
    pub data: PathBuf,
    pub out: PathBuf,
    pub tag: String,
}

macro_rules! layer {
    ($cfg:expr, $file:expr, $flags:expr; $($field:ident),+ $(,)?) => {
        $(
            if let Some(v) = $file.$field {
                $cfg.$field = v;
            }
            if let Some(v) = $flags.$field {
                $cfg.$field = v;
            }
        )+
    };
}

pub fn resolve_run_config(file: FileConfig, flags: &TrainCliArgs) -> Result<RunConfig> {
    let mut train = TrainConfig::default();
    layer!(train, file, flags;
        lr_d, lr_eg, lr_prior_f, lr_a, batch_size, lambda, d_steps, epochs,
        label_fraction, clamp_c, seed, prior_mode, f_mode, sup_kind, k, m,
        img_size, hidden,
    );
    let graph = flags.graph.or(file.graph).unwrap_or(GraphChoice::True);
    let data = flags
        .data
        .clone()
        .or(file.data)
        .context("missing required path: data (set `data` in the config or pass --data)")?;
    let out = flags
        .out
        .clone()
        .or(file.out)
        .context("missing required path: out (set `out` in the config or pass --out)")?;
    let tag = flags.tag.clone().or(file.tag).unwrap_or_else(|| "run".into());
    Ok(RunConfig { train, graph, data, out, tag })
}

pub fn load_run_config(path: Option<&Path>, flags: &TrainCliArgs) -> Result<RunConfig> {
    let file = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    resolve_run_config(file, flags)
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    command: &'static str,
    #[serde(flatten)]
    train: &'a TrainConfig,
    graph: GraphChoice,
    data: String,
    out: String,
    tag: &'a str,
}

fn graph_mask_for(choice: GraphChoice, m: usize) -> Result<GraphMask> {
    match choice {
        GraphChoice::True => {
            if m != 4 {
                bail!("graph=true is the 4-factor pendulum graph; got m={m}");
            }
            Ok(pendulum_true_graph())
        }
        GraphChoice::Order => {
            let order: Vec<usize> = (0..m).collect();
            Ok(super_graph_from_order(&order)?)
        }
    }
}

fn cmd_train(args: &TrainCliArgs) -> Result<()> {
    let rc = load_run_config(args.config.as_deref(), args)?;
    rc.train.validate()?;
    write_resolved(
        &rc.out,
        &TrainEcho {
            command: "train",
            train: &rc.train,
            graph: rc.graph,
            data: path_str(&rc.data),
            out: path_str(&rc.out),
            tag: &rc.tag,
        },
    )?;
    let ds = pendulum::load_dataset(&rc.data)?;
    let mask = graph_mask_for(rc.graph, rc.train.m)?;
    let (state, rows) = trainer::train(
        &rc.train,
        &mask,
        &ds.train.images_f64(),
        &ds.train.factors_matrix(),
        &ds.val.images_f64(),
        &ds.val.factors_matrix(),
        Some(&rc.out),
    )?;
    for row in rows.iter().filter(|r| r.val_mean_abs_spearman.is_some()) {
        println!(
            "epoch {:>4}  disc_loss {:+.4}  val_sup {:.4}  val_spearman {:.4}",
            row.epoch,
            row.disc_loss,
            row.val_sup_loss.unwrap_or(f64::NAN),
            row.val_mean_abs_spearman.unwrap_or(f64::NAN),
        );
    }
    println!(
        "finished {} epochs ({} steps); artifacts in {}",
        state.epoch,
        state.step,
        rc.out.display()
    );
    Ok(())
}

// ── traverse / intervene ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
enum GridSource {
    /// Base latent comes from encoding a test image.
    Test,
    /// Base latent is drawn from the prior.
    Scratch,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; required when --source=test.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GridSource::Test)]
    source: GridSource,
    /// Test-split image index used when --source=test.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Seed for the prior draw used when --source=scratch.
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    /// Latent coordinates to vary; defaults to all structured dimensions.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    grid_min: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    grid_max: f64,
    #[arg(long, default_value_t = 7)]
    grid_cols: usize,
}

#[derive(Serialize)]
struct GridEcho {
    command: &'static str,
    ckpt: String,
    out: String,
    data: Option<String>,
    source: GridSource,
    index: usize,
    sample_seed: u64,
    dims: Vec<usize>,
    grid_min: f64,
    grid_max: f64,
    grid_cols: usize,
}

fn base_latent(args: &GridArgs, state: &TrainState) -> Result<Vec<f64>> {
    match args.source {
        GridSource::Test => {
            let data = args
                .data
                .as_deref()
                .context("--source=test needs --data pointing at a dataset")?;
            let ds = pendulum::load_dataset(data)?;
            if args.index >= ds.test.len() {
                bail!("--index {} out of range; test split has {} samples", args.index, ds.test.len());
            }
            let images = ds.test.images_f64();
            let x = images.row(args.index).to_owned();
            let (z, _) = state.e_net.forward(&x)?;
            Ok(z.to_vec())
        }
        GridSource::Scratch => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.sample_seed);
            rng.set_stream(4);
            let eps: Vec<f64> =
                (0..state.prior.k()).map(|_| StandardNormal.sample(&mut rng)).collect();
            Ok(state.prior.sample(&eps)?)
        }
    }
}

fn cmd_grid(args: &GridArgs, mode: GridMode) -> Result<()> {
    if args.grid_cols < 2 {
        bail!("--grid-cols must be at least 2");
    }
    if !(args.grid_min < args.grid_max) {
        bail!("--grid-min must be below --grid-max");
    }
    let state = load_checkpoint(&args.ckpt)?;
    let z0 = base_latent(args, &state)?;
    let dims: Vec<usize> =
        args.dims.clone().unwrap_or_else(|| (0..state.prior.m()).collect());
    let step = (args.grid_max - args.grid_min) / (args.grid_cols - 1) as f64;
    let grid: Vec<f64> =
        (0..args.grid_cols).map(|i| args.grid_min + i as f64 * step).collect();
    fs::create_dir_all(&args.out)?;
    let index = dump_grids(&state.g_net, &state.prior, &z0, &dims, &grid, mode, &args.out)?;
    write_resolved(
        &args.out,
        &GridEcho {
            command: match mode {
                GridMode::Traverse => "traverse",
                GridMode::Intervene => "intervene",
            },
            ckpt: path_str(&args.ckpt),
            out: path_str(&args.out),
            data: args.data.as_deref().map(path_str),
            source: args.source,
            index: args.index,
            sample_seed: args.sample_seed,
            dims: dims.clone(),
            grid_min: args.grid_min,
            grid_max: args.grid_max,
            grid_cols: args.grid_cols,
        },
    )?;
    println!(
        "wrote {} tiles over {} dims to {}",
        index.rows.iter().map(|r| r.files.len()).sum::<usize>(),
        index.rows.len(),
        args.out.display()
    );
    Ok(())
}

// ── eval-disent ──

#[derive(Args, Debug)]
struct EvalDisentArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct EvalDisentEcho {
    command: &'static str,
    ckpt: String,
    data: String,
    out: String,
}

#[derive(Serialize)]
struct DisentReportJson {
    per_factor_abs_spearman: Vec<f64>,
    mean_abs_spearman: f64,
    mae_uncorrupted_per_factor: Vec<f64>,
    mae_uncorrupted_mean: f64,
}

fn cmd_eval_disent(args: &EvalDisentArgs) -> Result<()> {
    let state = load_checkpoint(&args.ckpt)?;
    let ds = pendulum::load_dataset(&args.data)?;
    let enc = encode_dataset(&state.e_net, &ds.test.images_f64())?;
    let report = disent_report(&enc, &ds.test.factors_matrix())?;
    let clean = ds.test.uncorrupted();
    let enc_clean = encode_dataset(&state.e_net, &clean.images_f64())?;
    let mae = mae_per_dim(&enc_clean, &clean.factors_matrix())?;
    let mae_mean = mae.iter().sum::<f64>() / mae.len() as f64;
    write_resolved(
        &args.out,
        &EvalDisentEcho {
            command: "eval-disent",
            ckpt: path_str(&args.ckpt),
            data: path_str(&args.data),
            out: path_str(&args.out),
        },
    )?;
    let path = write_report(
        &args.out,
        &DisentReportJson {
            per_factor_abs_spearman: report.per_factor.clone(),
            mean_abs_spearman: report.mean_abs,
            mae_uncorrupted_per_factor: mae.clone(),
            mae_uncorrupted_mean: mae_mean,
        },
    )?;
    for (i, (rho, err)) in report.per_factor.iter().zip(&mae).enumerate() {
        println!("factor {i}: |spearman| {rho:.4}  mae {err:.4}");
    }
    println!(
        "mean |spearman| {:.4}  mean mae {:.4}  report at {}",
        report.mean_abs,
        mae_mean,
        path.display()
    );
    Ok(())
}

// ── downstream ──

#[derive(Args, Debug)]
struct DownstreamArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Size of the small training subset.
    #[arg(long, default_value_t = 100)]
    small_n: usize,
    /// Epochs for the downstream classifiers.
    #[arg(long, default_value_t = 100)]
    probe_epochs: usize,
}

#[derive(Serialize)]
struct DownstreamEcho {
    command: &'static str,
    ckpt: String,
    data: String,
    out: String,
    seed: u64,
    small_n: usize,
    probe_epochs: usize,
}

#[derive(Serialize)]
struct DownstreamRow {
    representation: String,
    acc_small_pct: f64,
    acc_full_pct: f64,
    efficiency_pct: f64,
}

/// Train the probe on a subset and on the full set; returns accuracies in
/// percent plus the efficiency score.
fn probe_pair(
    reps_train: &Array2<f64>,
    labels_train: &[u8],
    reps_test: &Array2<f64>,
    labels_test: &[u8],
    subset: &[usize],
    cfg: &DownstreamConfig,
) -> Result<(f64, f64, f64)> {
    let mut small_reps = Array2::zeros((subset.len(), reps_train.ncols()));
    let mut small_labels = Vec::with_capacity(subset.len());
    for (r, &i) in subset.iter().enumerate() {
        small_reps.row_mut(r).assign(&reps_train.row(i));
        small_labels.push(labels_train[i]);
    }
    let net_small = train_downstream(&small_reps, &small_labels, cfg)?;
    let net_full = train_downstream(reps_train, labels_train, cfg)?;
    let acc_small = 100.0 * accuracy(&net_small, reps_test, labels_test)?;
    let acc_full = 100.0 * accuracy(&net_full, reps_test, labels_test)?;
    let eff = efficiency_score(acc_small, acc_full)?;
    Ok((acc_small, acc_full, eff))
}

fn seeded_subset(n: usize, size: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(size.min(n));
    idx
}

fn write_csv(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for line in lines {
        text.push_str(line);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn cmd_downstream(args: &DownstreamArgs) -> Result<()> {
    let state = load_checkpoint(&args.ckpt)?;
    let ds = pendulum::load_dataset(&args.data)?;
    let raw_train = ds.train.images_f64();
    let raw_test = ds.test.images_f64();
    let dear_train = encode_dataset(&state.e_net, &raw_train)?;
    let dear_test = encode_dataset(&state.e_net, &raw_test)?;
    let labels_train = ds.train.tau_tags();
    let labels_test = ds.test.tau_tags();
    let subset = seeded_subset(labels_train.len(), args.small_n, args.seed);
    let cfg = DownstreamConfig { seed: args.seed, epochs: args.probe_epochs, ..Default::default() };

    let mut rows = Vec::new();
    for (name, train_reps, test_reps) in [
        ("dear", &dear_train, &dear_test),
        ("raw", &raw_train, &raw_test),
    ] {
        let (acc_small, acc_full, eff) =
            probe_pair(train_reps, &labels_train, test_reps, &labels_test, &subset, &cfg)?;
        println!(
            "{name}: acc@{} {acc_small:.2}%  acc@full {acc_full:.2}%  efficiency {eff:.2}",
            subset.len()
        );
        rows.push(DownstreamRow {
            representation: name.into(),
            acc_small_pct: acc_small,
            acc_full_pct: acc_full,
            efficiency_pct: eff,
        });
    }
    write_resolved(
        &args.out,
        &DownstreamEcho {
            command: "downstream",
            ckpt: path_str(&args.ckpt),
            data: path_str(&args.data),
            out: path_str(&args.out),
            seed: args.seed,
            small_n: args.small_n,
            probe_epochs: args.probe_epochs,
        },
    )?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{}",
                r.representation, r.acc_small_pct, r.acc_full_pct, r.efficiency_pct
            )
        })
        .collect();
    write_csv(
        &args.out.join("downstream.csv"),
        "representation,acc_small_pct,acc_full_pct,efficiency_pct",
        &lines,
    )?;
    write_report(&args.out, &rows)?;
    Ok(())
}

// ── robustness ──

#[derive(Args, Debug)]
struct RobustnessArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train-split probability that the background matches the target label.
    #[arg(long, default_value_t = 0.8)]
    correlation: f64,
    /// Epochs for the downstream classifiers.
    #[arg(long, default_value_t = 100)]
    probe_epochs: usize,
}

#[derive(Serialize)]
struct RobustnessEcho {
    command: &'static str,
    ckpt: String,
    data: String,
    out: String,
    seed: u64,
    correlation: f64,
    probe_epochs: usize,
}

#[derive(Serialize)]
struct RobustnessRow {
    representation: String,
    worst_pct: f64,
    average_pct: f64,
    cells_pct: [[f64; 2]; 2],
}

fn cmd_robustness(args: &RobustnessArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.correlation) {
        bail!("correlation must lie in [0, 1]");
    }
    let state = load_checkpoint(&args.ckpt)?;
    let mut ds = pendulum::load_dataset(&args.data)?;
    match ds.meta.spurious_train_correlation {
        // The dataset already carries the shift (and the checkpoint was
        // presumably trained on it); keep its backgrounds.
        Some(c) if (c - args.correlation).abs() < 1e-12 => {}
        Some(c) => bail!(
            "dataset was generated with spurious correlation {c} but --correlation is {}; \
             pass the matching value or regenerate the dataset",
            args.correlation
        ),
        None => {
            let mut rng_train = ChaCha8Rng::seed_from_u64(args.seed);
            rng_train.set_stream(6);
            inject_spurious(&mut ds.train, args.correlation, SpuriousMode::Train, &mut rng_train);
            let mut rng_test = ChaCha8Rng::seed_from_u64(args.seed);
            rng_test.set_stream(7);
            inject_spurious(&mut ds.test, args.correlation, SpuriousMode::Test, &mut rng_test);
        }
    }

    let raw_train = ds.train.images_f64();
    let raw_test = ds.test.images_f64();
    let dear_train = encode_dataset(&state.e_net, &raw_train)?;
    let dear_test = encode_dataset(&state.e_net, &raw_test)?;
    let labels_train = ds.train.tau_tags();
    let labels_test = ds.test.tau_tags();
    let spurious_test = ds.test.spurious_tags();
    let cfg = DownstreamConfig { seed: args.seed, epochs: args.probe_epochs, ..Default::default() };

    let mut rows = Vec::new();
    for (name, train_reps, test_reps) in [
        ("dear", &dear_train, &dear_test),
        ("raw", &raw_train, &raw_test),
    ] {
        let net = train_downstream(train_reps, &labels_train, &cfg)?;
        let preds = predict(&net, test_reps)?;
        let acc = group_worst_acc(&preds, &labels_test, &spurious_test)?;
        println!(
            "{name}: worst-group {:.2}%  average {:.2}%",
            100.0 * acc.worst,
            100.0 * acc.average
        );
        rows.push(RobustnessRow {
            representation: name.into(),
            worst_pct: 100.0 * acc.worst,
            average_pct: 100.0 * acc.average,
            cells_pct: acc.cells.map(|row| row.map(|c| 100.0 * c)),
        });
    }
    write_resolved(
        &args.out,
        &RobustnessEcho {
            command: "robustness",
            ckpt: path_str(&args.ckpt),
            data: path_str(&args.data),
            out: path_str(&args.out),
            seed: args.seed,
            correlation: args.correlation,
            probe_epochs: args.probe_epochs,
        },
    )?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.representation,
                r.worst_pct,
                r.average_pct,
                r.cells_pct[0][0],
                r.cells_pct[0][1],
                r.cells_pct[1][0],
                r.cells_pct[1][1],
            )
        })
        .collect();
    write_csv(
        &args.out.join("robustness.csv"),
        "representation,worst_pct,average_pct,tau0_light_pct,tau0_dark_pct,tau1_light_pct,tau1_dark_pct",
        &lines,
    )?;
    write_report(&args.out, &rows)?;
    Ok(())
}

// ── gradcheck ──

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    out: PathBuf,
    /// Monte-Carlo samples per seed (at least 10,000).
    #[arg(long, default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(10_000..))]
    n_samples: u64,
    /// Seeds averaged before comparing against finite differences.
    #[arg(long, value_delimiter = ',', default_values_t = [11_u64, 12, 13])]
    seeds: Vec<u64>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
}

#[derive(Serialize)]
struct GradcheckEcho {
    command: &'static str,
    out: String,
    n_samples: u64,
    seeds: Vec<u64>,
    h: f64,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.seeds.is_empty() {
        bail!("--seeds needs at least one value");
    }
    let spec = LinGaussSpec::reference();
    let rows = gradcheck_table(&spec, args.n_samples as usize, &args.seeds, args.h)?;
    write_resolved(
        &args.out,
        &GradcheckEcho {
            command: "gradcheck",
            out: path_str(&args.out),
            n_samples: args.n_samples,
            seeds: args.seeds.clone(),
            h: args.h,
        },
    )?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!("{},{},{},{},{},{}", r.name, r.mc, r.fd, r.abs_err, r.rel_err, r.pass)
        })
        .collect();
    write_csv(
        &args.out.join("gradcheck.csv"),
        "param,mc,fd,abs_err,rel_err,pass",
        &lines,
    )?;
    let mut failures = 0;
    for r in &rows {
        println!(
            "{:<10} mc {:>12.6} fd {:>12.6} abs {:.2e} rel {:.2e} {}",
            r.name,
            r.mc,
            r.fd,
            r.abs_err,
            r.rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
        if !r.pass {
            failures += 1;
        }
    }
    println!("{} of {} parameters passed", rows.len() - failures, rows.len());
    Ok(())
}
