use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hdmean::collector::{calibrate, perturb_record, read_reports, write_reports, AggregateState, Estimate};
use hdmean::datasets::{self, Family, GeneratorConfig};
use hdmean::experiment::{
    benchmark_mechanisms, run_experiment, validate_framework, write_bench_csv, write_mse_csv, BenchConfig,
    ExperimentConfig, ValidationConfig,
};
use hdmean::framework::{
    berry_esseen_bound, deviation_model, supremum_probability, SupremumTolerance, ValueDistribution,
};
use hdmean::frequency::{
    enhance_frequencies, estimate_frequencies, generate_categorical, postprocess, read_categorical_csv,
    CategoricalDataset, CategoricalSchema,
};
use hdmean::hdr4me::{recalibrate, RecalibrationConfig, Regularizer};
use hdmean::mechanisms::MechanismKind;
use hdmean::mechanisms::MechanismSpec;
use hdmean::rng::seeded;

#[derive(Parser)]
#[command(name = "hdmean", version, about = "High-dimensional mean estimation under local differential privacy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. A flag overrides the same field of the
/// `--config` file.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Total per-user privacy budget.
    #[arg(long, global = true)]
    eps: Option<f64>,
    /// Dimensions reported per user.
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// laplace, piecewise or squarewave.
    #[arg(long, global = true)]
    mechanism: Option<MechanismKind>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV.
    GenData {
        /// gaussian, poisson or uniform.
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        /// Keep raw values instead of normalizing onto [-1, 1].
        #[arg(long)]
        raw: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Perturb every user's record and write `dim_index,value` reports.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        /// Min-max normalize columns onto [-1, 1] first.
        #[arg(long)]
        normalize: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Average reports into per-dimension means.
    Aggregate {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        d: usize,
        /// Value distribution JSON; with a mechanism, removes the Square Wave offset.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run repeated end-to-end experiments and compare re-calibration methods.
    Analyze {
        /// Also write a per-trial MSE table.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-calibrate an aggregated estimate.
    Recalibrate {
        /// Estimate JSON as written by `aggregate`.
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long, default_value = "l1")]
        regularizer: Regularizer,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long, default_value_t = 3.0)]
        kappa: f64,
        #[arg(long, default_value_t = 0.05)]
        clamp: f64,
        /// Apply the weights even where the threshold is not met.
        #[arg(long)]
        no_threshold: bool,
        /// Supremum tolerance to report a probability for.
        #[arg(long)]
        xi: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate supremum probabilities over a tolerance grid.
    Bench {
        /// Comma-separated tolerance grid.
        #[arg(long, value_delimiter = ',')]
        xi: Option<Vec<f64>>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo check of the deviation model for one dimension.
    Validate {
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate categorical frequencies.
    Freq {
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Category-index CSV; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Also re-calibrate with l1 or l2.
        #[arg(long)]
        enhance: Option<Regularizer>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<hdmean::Error>().map_or("cli", hdmean::Error::kind);
            report_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn report_error(kind: &str, message: &str) {
    let body = json!({ "error": kind, "message": message.trim_end() });
    eprintln!("{body}");
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { family, n, d, raw, common } => gen_data(family, n, d, raw, &common),
        Command::Perturb { data, normalize, common } => perturb(&data, normalize, &common),
        Command::Aggregate { reports, d, prior, common } => aggregate(&reports, d, prior.as_deref(), &common),
        Command::Analyze { csv, common } => analyze(csv.as_deref(), &common),
        Command::Recalibrate { estimate, regularizer, prior, kappa, clamp, no_threshold, xi, common } => {
            let config = RecalibrationConfig {
                regularizer,
                kappa,
                clamp,
                apply_threshold: !no_threshold,
                theta_bar_proxy: None,
            };
            recalibrate_cmd(&estimate, config, prior.as_deref(), xi, &common)
        }
        Command::Bench { xi, csv, common } => bench(xi, csv.as_deref(), &common),
        Command::Validate { csv, common } => validate(csv.as_deref(), &common),
        Command::Freq { schema, data, n, enhance, common } => freq(schema, data, n, enhance, &common),
    }
}

fn read_json_value(path: &Path) -> anyhow::Result<Value> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(hdmean::Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let value = read_json_value(path)?;
    from_value(value).with_context(|| format!("reading {}", path.display()))
}

fn from_value<T: for<'de> Deserialize<'de>>(value: Value) -> anyhow::Result<T> {
    Ok(serde_json::from_value(value).map_err(hdmean::Error::from)?)
}

/// The `--config` file (or `{}`) with flag overrides applied.
fn config_value(common: &Common) -> anyhow::Result<serde_json::Map<String, Value>> {
    let value = match &common.config {
        Some(path) => read_json_value(path)?,
        None => json!({}),
    };
    let Value::Object(mut map) = value else {
        return Err(hdmean::Error::Config("configuration must be a JSON object".into()).into());
    };
    let mut set = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            map.insert(key.to_string(), v);
        }
    };
    set("eps", common.eps.map(Value::from));
    set("m", common.m.map(Value::from));
    set("trials", common.trials.map(Value::from));
    set("seed", common.seed.map(Value::from));
    set("mechanism", common.mechanism.map(|k| Value::from(k.name())));
    Ok(map)
}

fn require<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    value.ok_or_else(|| hdmean::Error::Config(format!("missing required --{flag}")).into())
}

/// Writes the JSON report to `--out`, or stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(create(path)?);
            serde_json::to_writer_pretty(&mut w, value).map_err(hdmean::Error::from)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => {
            let mut w = io::stdout().lock();
            serde_json::to_writer_pretty(&mut w, value).map_err(hdmean::Error::from)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<File> {
    File::create(path)
        .map_err(hdmean::Error::from)
        .with_context(|| format!("creating {}", path.display()))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let file = File::open(path)
        .map_err(hdmean::Error::from)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(file))
}

fn gen_data(family: Option<String>, n: Option<usize>, d: Option<usize>, raw: bool, common: &Common) -> anyhow::Result<()> {
    let mut map = config_value(common)?;
    if let Some(f) = family {
        let family = match f.to_ascii_lowercase().as_str() {
            "gaussian" => Family::gaussian(),
            "poisson" => Family::poisson(),
            "uniform" => Family::Uniform,
            other => bail!(hdmean::Error::Config(format!("unknown family `{other}`"))),
        };
        let Value::Object(fields) = serde_json::to_value(family)? else { unreachable!() };
        map.retain(|k, _| matches!(k.as_str(), "n" | "d" | "seed"));
        map.extend(fields);
    }
    if let Some(n) = n {
        map.insert("n".into(), n.into());
    }
    if let Some(d) = d {
        map.insert("d".into(), d.into());
    }
    map.entry("kind").or_insert_with(|| "gaussian".into());
    let config: GeneratorConfig = from_value(Value::Object(map))?;
    let dataset = if raw { datasets::generate_raw(&config)? } else { datasets::generate(&config)? };
    match &common.out {
        Some(path) => {
            datasets::save_csv(&dataset, path)?;
            emit(&json!({ "config": config, "n": dataset.n(), "d": dataset.d(), "out": path }), None)
        }
        None => Ok(datasets::write_csv(&dataset, io::stdout().lock())?),
    }
}

fn spec_from(common: &Common, d: usize) -> anyhow::Result<(MechanismSpec, usize)> {
    let kind = require(common.mechanism, "mechanism")?;
    let eps = require(common.eps, "eps")?;
    let m = common.m.unwrap_or(d);
    Ok((MechanismSpec::for_budget(kind, eps, m)?, m))
}

fn perturb(data: &Path, normalize: bool, common: &Common) -> anyhow::Result<()> {
    let mut dataset = datasets::read_csv(open(data)?)?;
    if normalize {
        dataset = datasets::normalize(&dataset)?;
    }
    let (spec, m) = spec_from(common, dataset.d())?;
    let sampler = spec.sampler();
    let mut rng = seeded(common.seed.unwrap_or(0));
    let mut reports = Vec::with_capacity(dataset.n() * m);
    for row in dataset.rows() {
        reports.extend(perturb_record(row, &sampler, m, &mut rng)?);
    }
    match &common.out {
        Some(path) => write_reports(&reports, BufWriter::new(create(path)?))?,
        None => write_reports(&reports, io::stdout().lock())?,
    }
    Ok(())
}

fn load_priors(path: &Path) -> anyhow::Result<Vec<ValueDistribution>> {
    let value = read_json_value(path)?;
    Ok(match value {
        Value::Array(_) => from_value(value)?,
        other => vec![from_value(other)?],
    })
}

fn aggregate(reports: &Path, d: usize, prior: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let reports = read_reports(open(reports)?)?;
    let mut state = AggregateState::new(d);
    state.extend(reports)?;
    let estimate = state.estimate();
    let mut body = estimate.to_json();
    if common.mechanism.is_some() {
        let (spec, _) = spec_from(common, d)?;
        let priors = prior.map(load_priors).transpose()?;
        let calibrated = calibrate(&estimate.filled(0.0), &spec, priors.as_deref())?;
        body["spec"] = serde_json::to_value(spec)?;
        body["calibrated"] = serde_json::to_value(calibrated)?;
    }
    emit(&body, common.out.as_deref())
}

fn recalibrate_cmd(
    estimate: &Path,
    config: RecalibrationConfig,
    prior: Option<&Path>,
    xi: Option<f64>,
    common: &Common,
) -> anyhow::Result<()> {
    let estimate: Estimate = read_json(estimate)?;
    let d = estimate.theta_hat.len();
    let (spec, _) = spec_from(common, d)?;
    let priors = prior.map(load_priors).transpose()?;
    let theta_hat = estimate.filled(0.0);
    let reports: Vec<f64> = estimate.counts.iter().map(|&c| c.max(1) as f64).collect();
    let model = deviation_model(&spec, priors.as_deref(), &reports)?;
    let result = recalibrate(&theta_hat, &model, &config)?;
    let mut body = json!({ "spec": spec, "model": model, "recalibration": result });
    if let Some(xi) = xi {
        body["supremum_probability"] = supremum_probability(&model, &SupremumTolerance::uniform(xi, d)?)?.into();
        let single = priors.as_ref().map(|p| &p[0]);
        body["berry_esseen"] = berry_esseen_bound(&spec, single, reports[0])?.into();
    }
    emit(&body, common.out.as_deref())
}

fn analyze(csv: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    require(common.config.as_ref(), "config")?;
    let config: ExperimentConfig = from_value(Value::Object(config_value(common)?))?;
    let report = run_experiment(&config)?;
    if let Some(path) = csv {
        write_mse_csv(&report, BufWriter::new(create(path)?))?;
    }
    emit(&report, common.out.as_deref().or(config.out.as_deref()))
}

fn bench(xi: Option<Vec<f64>>, csv: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let mut map = config_value(common)?;
    map.remove("trials");
    map.remove("seed");
    if let Some(kind) = map.remove("mechanism") {
        map.insert("mechanisms".into(), json!([kind]));
    }
    if let Some(xi) = xi {
        map.insert("xi".into(), json!(xi));
    }
    let config: BenchConfig = from_value(Value::Object(map))?;
    let rows = benchmark_mechanisms(&config)?;
    if let Some(path) = csv {
        write_bench_csv(&rows, BufWriter::new(create(path)?))?;
    }
    emit(&json!({ "config": config, "rows": rows }), common.out.as_deref())
}

fn validate(csv: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    require(common.config.as_ref(), "config")?;
    let config: ValidationConfig = from_value(Value::Object(config_value(common)?))?;
    let report = validate_framework(&config)?;
    if let Some(path) = csv {
        let mut w = BufWriter::new(create(path)?);
        writeln!(w, "lo,hi,mass,density,model_pdf")?;
        for b in &report.histogram {
            writeln!(w, "{:?},{:?},{:?},{:?},{:?}", b.lo, b.hi, b.mass, b.density, b.model_pdf)?;
        }
        w.flush()?;
    }
    emit(&report, common.out.as_deref())
}

#[derive(Debug, Serialize, Deserialize)]
struct FreqConfig {
    schema: CategoricalSchema,
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    n: Option<usize>,
    mechanism: MechanismKind,
    eps: f64,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    enhance: Option<Regularizer>,
}

fn freq(
    schema: Option<PathBuf>,
    data: Option<PathBuf>,
    n: Option<usize>,
    enhance: Option<Regularizer>,
    common: &Common,
) -> anyhow::Result<()> {
    let mut map = config_value(common)?;
    map.remove("trials");
    if let Some(path) = schema {
        map.insert("schema".into(), read_json_value(&path)?);
    }
    if let Some(path) = data {
        map.insert("data".into(), json!(path));
    }
    if let Some(n) = n {
        map.insert("n".into(), n.into());
    }
    if let Some(r) = enhance {
        map.insert("enhance".into(), json!(r));
    }
    let config: FreqConfig = from_value(Value::Object(map))?;
    let dataset: CategoricalDataset = match (&config.data, config.n) {
        (Some(path), _) => read_categorical_csv(open(path)?, &config.schema)?,
        (None, Some(n)) => generate_categorical(&config.schema, n, config.seed)?,
        (None, None) => bail!(hdmean::Error::Config("freq needs --data or --n".into())),
    };
    let m = config.m.unwrap_or(config.schema.d());
    let mut rng = seeded(config.seed);
    let estimate = estimate_frequencies(&dataset, config.mechanism, m, config.eps, &mut rng)?;
    let truth = dataset.frequencies();
    let processed: Vec<Vec<f64>> = estimate.frequencies.iter().map(|f| postprocess(f)).collect();
    let mut body = json!({
        "config": config,
        "budget": estimate.budget,
        "truth": truth,
        "raw": estimate.frequencies,
        "postprocessed": processed,
        "mse": freq_mse(&processed, &truth)?,
    });
    if let Some(regularizer) = config.enhance {
        let enhanced =
            enhance_frequencies(&config.schema, &estimate, config.mechanism, &RecalibrationConfig::new(regularizer))?;
        let enhanced: Vec<Vec<f64>> = enhanced.iter().map(|f| postprocess(f)).collect();
        body["enhanced_mse"] = freq_mse(&enhanced, &truth)?.into();
        body["enhanced"] = json!(enhanced);
    }
    emit(&body, common.out.as_deref())
}

fn freq_mse(estimate: &[Vec<f64>], truth: &[Vec<f64>]) -> anyhow::Result<f64> {
    let a: Vec<f64> = estimate.concat();
    let b: Vec<f64> = truth.concat();
    Ok(hdmean::experiment::mse(&a, &b)?)
}
