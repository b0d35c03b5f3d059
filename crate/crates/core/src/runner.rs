//! Experiment runner behind the `csfl` binary: flat `key = value` config
//! files, data preparation, and the per-round metrics file.
//!
//! Any key can be overridden from the environment as `CSFL_<KEY>` (upper
//! case), e.g. `CSFL_SERVER_SPARSITY=0.8`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::data::{
    generate_synthetic, load_csv, partition_dirichlet, train_test_split, Dataset, Partition,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fl::{run_experiment, ExperimentConfig, Mode, RoundMetrics};
use crate::nn::{Activation, Optimizer};
use crate::wire::LedgerMode;

pub const ENV_PREFIX: &str = "CSFL_";

/// Synthetic data defaults of the reference experiment.
pub const DEFAULT_PER_CLASS: usize = 40_000;
pub const DEFAULT_SEPARATION: f64 = 3.0;

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "mode",
    "input_dim",
    "hidden",
    "classes",
    "optimizer",
    "client_lr",
    "batch_size",
    "local_epochs",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "n_clients",
    "clients_per_round",
    "rounds",
    "server_sparsity",
    "aggregation_ratio",
    "relax_ratio_bound",
    "seed",
    "dirichlet_alpha",
    "min_per_client",
    "train_fraction",
    "data_path",
    "label_column",
    "synthetic_per_class",
    "synthetic_separation",
    "output",
    "metrics_format",
    "ledger_mode",
    "eval_every",
    "execution",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { per_class: usize, separation: f64 },
    Csv { path: PathBuf, label_column: String },
}

/// File form of an experiment.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub data: DataSource,
    pub train_fraction: f64,
    pub output: PathBuf,
    pub metrics_format: MetricsFormat,
    pub eval_every: usize,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::reference(),
            data: DataSource::Synthetic {
                per_class: DEFAULT_PER_CLASS,
                separation: DEFAULT_SEPARATION,
            },
            train_fraction: 0.8,
            output: PathBuf::from("metrics.csv"),
            metrics_format: MetricsFormat::Csv,
            eval_every: 1,
            execution: Execution::Parallel,
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err(
            key,
            format!("expected true/false, got `{value}`"),
        )),
    }
}

/// Raw `key -> (value, origin)` pairs before interpretation.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, String)>,
}

impl RawConfig {
    /// Parses `key = value` lines; `#` starts a comment. Duplicate keys and
    /// lines without `=` are errors naming the line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                config_err(line, format!("line {line_no}: expected `key = value`"))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(config_err("", format!("line {line_no}: empty key")));
            }
            let origin = format!("line {line_no}");
            if let Some((_, prev)) = entries.insert(key.clone(), (value.trim().to_string(), origin))
            {
                return Err(config_err(
                    &key,
                    format!("line {line_no}: duplicate key (first set on {prev})"),
                ));
            }
        }
        Ok(Self { entries })
    }

    /// Replaces or adds `key`.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) {
        self.entries
            .insert(key.to_string(), (value.to_string(), origin.to_string()));
    }

    /// Applies `CSFL_<KEY>` variables from `vars`.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase();
                if !KEYS.contains(&key.as_str()) {
                    return Err(config_err(
                        &key,
                        format!("unknown key from environment variable {name}"),
                    ));
                }
                self.set(&key, &value, &format!("env {name}"));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Interprets the entries on top of [`RunConfig::default`].
    pub fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut per_class = DEFAULT_PER_CLASS;
        let mut separation = DEFAULT_SEPARATION;
        let mut data_path: Option<PathBuf> = None;
        let mut label_column = "label".to_string();

        for (key, (value, origin)) in &self.entries {
            let v = value.as_str();
            let with_origin = |e: Error| match e {
                Error::Config { key, reason } => Error::Config {
                    key,
                    reason: format!("{origin}: {reason}"),
                },
                other => other,
            };
            let exp = &mut cfg.experiment;
            let r: Result<()> = (|| {
                match key.as_str() {
                    "mode" => {
                        exp.mode = match v {
                            "cs" => Mode::Cs,
                            "vanilla" => Mode::Vanilla,
                            _ => {
                                return Err(config_err(
                                    key,
                                    format!("expected cs or vanilla, got `{v}`"),
                                ))
                            }
                        }
                    }
                    "input_dim" => exp.arch.input_dim = parse(key, v)?,
                    "hidden" => {
                        exp.arch.hidden = if v.is_empty() {
                            Vec::new()
                        } else {
                            v.split(',')
                                .map(|w| {
                                    parse::<usize>(key, w.trim()).map(|w| (w, Activation::Relu))
                                })
                                .collect::<Result<_>>()?
                        }
                    }
                    "classes" => exp.arch.output_classes = parse(key, v)?,
                    "optimizer" => {
                        exp.hp.optimizer = match v {
                            "sgd" => Optimizer::Sgd,
                            "adam" => Optimizer::Adam,
                            _ => {
                                return Err(config_err(
                                    key,
                                    format!("expected sgd or adam, got `{v}`"),
                                ))
                            }
                        }
                    }
                    "client_lr" => exp.hp.client_lr = parse(key, v)?,
                    "batch_size" => exp.hp.batch_size = parse(key, v)?,
                    "local_epochs" => exp.hp.local_epochs = parse(key, v)?,
                    "adam_beta1" => exp.hp.adam_beta1 = parse(key, v)?,
                    "adam_beta2" => exp.hp.adam_beta2 = parse(key, v)?,
                    "adam_epsilon" => exp.hp.adam_epsilon = parse(key, v)?,
                    "n_clients" => exp.n_clients = parse(key, v)?,
                    "clients_per_round" => exp.clients_per_round = parse(key, v)?,
                    "rounds" => exp.rounds = parse(key, v)?,
                    "server_sparsity" => exp.server_sparsity = parse(key, v)?,
                    "aggregation_ratio" => exp.aggregation_ratio = parse(key, v)?,
                    "relax_ratio_bound" => exp.relax_ratio_bound = parse_bool(key, v)?,
                    "seed" => exp.seed = parse(key, v)?,
                    "dirichlet_alpha" => exp.partition.alpha = parse(key, v)?,
                    "min_per_client" => exp.partition.min_per_client = parse(key, v)?,
                    "train_fraction" => cfg.train_fraction = parse(key, v)?,
                    "data_path" => data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
                    "label_column" => label_column = v.to_string(),
                    "synthetic_per_class" => per_class = parse(key, v)?,
                    "synthetic_separation" => separation = parse(key, v)?,
                    "output" => cfg.output = PathBuf::from(v),
                    "metrics_format" => {
                        cfg.metrics_format = match v {
                            "csv" => MetricsFormat::Csv,
                            "json" => MetricsFormat::Json,
                            _ => {
                                return Err(config_err(
                                    key,
                                    format!("expected csv or json, got `{v}`"),
                                ))
                            }
                        }
                    }
                    "ledger_mode" => {
                        exp.ledger_mode = match v {
                            "mask_sent" => LedgerMode::MaskSent,
                            "mask_derived" => LedgerMode::MaskDerived,
                            _ => {
                                return Err(config_err(
                                    key,
                                    format!("expected mask_sent or mask_derived, got `{v}`"),
                                ))
                            }
                        }
                    }
                    "eval_every" => {
                        cfg.eval_every = parse(key, v)?;
                        if cfg.eval_every == 0 {
                            return Err(config_err(key, "must be >= 1"));
                        }
                    }
                    "execution" => {
                        cfg.execution = match v {
                            "parallel" => Execution::Parallel,
                            "sequential" => Execution::Sequential,
                            _ => {
                                return Err(config_err(
                                    key,
                                    format!("expected parallel or sequential, got `{v}`"),
                                ))
                            }
                        }
                    }
                    _ => return Err(config_err(key, "unknown key")),
                }
                Ok(())
            })();
            r.map_err(with_origin)?;
        }

        if per_class == 0 {
            return Err(config_err("synthetic_per_class", "must be >= 1"));
        }
        cfg.data = match data_path {
            Some(path) => DataSource::Csv { path, label_column },
            None => DataSource::Synthetic {
                per_class,
                separation,
            },
        };
        if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
            return Err(config_err("train_fraction", "must lie in (0, 1)"));
        }
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        RawConfig::parse(text)?.build()
    }

    /// Reads `path` and applies `CSFL_*` environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_raw(path)?.build()
    }

    /// Checks that the experiment can run as configured.
    pub fn validate(&self) -> Result<()> {
        let exp = &self.experiment;
        if let DataSource::Csv { path, label_column } = &self.data {
            let dim = csv_feature_count(path, label_column)?;
            if dim != exp.arch.input_dim {
                return Err(config_err(
                    "input_dim",
                    format!(
                        "{} has {dim} feature columns, input_dim is {}",
                        path.display(),
                        exp.arch.input_dim
                    ),
                ));
            }
        }
        exp.validate()
    }
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<RawConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
    let mut raw = RawConfig::parse(&text)?;
    raw.apply_env(std::env::vars())?;
    Ok(raw)
}

fn csv_feature_count(path: &Path, label_column: &str) -> Result<usize> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| config_err("data_path", e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| config_err("data_path", e.to_string()))?;
    if !headers.iter().any(|h| h.trim() == label_column) {
        return Err(config_err(
            "label_column",
            format!("`{label_column}` not in {}", path.display()),
        ));
    }
    Ok(headers.len() - 1)
}

/// Findings of `validate`: hard errors and advisory warnings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self, strict: bool) -> bool {
        self.errors.is_empty() && (!strict || self.warnings.is_empty())
    }
}

/// Checks the aggregation-ratio bound (as a warning), participation
/// feasibility, and architecture/data consistency.
pub fn validate_config(cfg: &RunConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Some(w) = cfg.experiment.ratio_bound_warning() {
        report.warnings.push(w);
    }
    let mut relaxed = cfg.clone();
    relaxed.experiment.relax_ratio_bound = true;
    if let Err(e) = relaxed.validate() {
        report.errors.push(e.to_string());
    }
    report
}

/// Train shards per client plus a shared test set.
pub struct PreparedData {
    pub partition: Partition,
    pub test: Dataset,
}

/// Builds or loads the dataset, holds out a stratified test split, and
/// partitions the rest across clients.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let exp = &cfg.experiment;
    let ds = match &cfg.data {
        DataSource::Synthetic {
            per_class,
            separation,
        } => generate_synthetic(
            exp.arch.output_classes,
            exp.arch.input_dim,
            *per_class,
            *separation,
            exp.seed,
        )?,
        DataSource::Csv { path, label_column } => load_csv(path, label_column)?,
    };
    if ds.class_count() > exp.arch.output_classes {
        return Err(config_err(
            "classes",
            format!(
                "data has {} classes, model outputs {}",
                ds.class_count(),
                exp.arch.output_classes
            ),
        ));
    }
    let (train, test) = train_test_split(&ds, cfg.train_fraction, exp.seed.wrapping_add(1))?;
    let partition = partition_dirichlet(
        &train,
        exp.n_clients,
        exp.partition.alpha,
        exp.partition.min_per_client,
        exp.seed.wrapping_add(2),
    )?;
    Ok(PreparedData { partition, test })
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    pub acc_sparse: f64,
    pub acc_dense: f64,
    pub loss: f64,
    pub server_sparsity: f64,
    pub client_sparsity: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub cum_bytes_down: u64,
    pub cum_bytes_up: u64,
    pub flops_saved: f64,
}

pub const CSV_HEADER: &str = "round,acc_sparse,acc_dense,loss,server_sparsity,client_sparsity,bytes_down,bytes_up,cum_bytes_down,cum_bytes_up,flops_saved";

/// Rows for every `eval_every`-th round (and the last), with cumulative
/// byte totals over all rounds.
pub fn metrics_rows(metrics: &[RoundMetrics], eval_every: usize) -> Vec<MetricsRow> {
    let mut cum_down = 0;
    let mut cum_up = 0;
    let last = metrics.len().saturating_sub(1);
    let mut rows = Vec::new();
    for (i, m) in metrics.iter().enumerate() {
        cum_down += m.bytes_down;
        cum_up += m.bytes_up;
        if m.round % eval_every.max(1) == 0 || i == last {
            rows.push(MetricsRow {
                round: m.round,
                acc_sparse: m.acc_sparse,
                acc_dense: m.acc_dense,
                loss: m.loss_sparse,
                server_sparsity: m.server_sparsity.full_model,
                client_sparsity: m.client_sparsity.full_model,
                bytes_down: m.bytes_down,
                bytes_up: m.bytes_up,
                cum_bytes_down: cum_down,
                cum_bytes_up: cum_up,
                flops_saved: m.flops_saved_fraction,
            });
        }
    }
    rows
}

pub fn render_metrics(rows: &[MetricsRow], format: MetricsFormat) -> Result<Vec<u8>> {
    match format {
        MetricsFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r)
                    .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
            }
            if rows.is_empty() {
                return Ok(format!("{CSV_HEADER}\n").into_bytes());
            }
            w.into_inner()
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
        }
        MetricsFormat::Json => {
            let mut out =
                serde_json::to_vec_pretty(rows).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub output: PathBuf,
    pub best_accuracy: f64,
    pub best_round: usize,
    pub total_bytes_down: u64,
    pub total_bytes_up: u64,
    pub mean_flops_saved: f64,
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "best accuracy {:.4} (round {}), bytes down {} up {}, mean FLOPs saved {:.2}% -> {}",
            self.best_accuracy,
            self.best_round,
            self.total_bytes_down,
            self.total_bytes_up,
            100.0 * self.mean_flops_saved,
            self.output.display()
        )
    }
}

pub fn summarize(metrics: &[RoundMetrics], output: &Path) -> RunSummary {
    let (best_round, best_accuracy) = metrics
        .iter()
        .map(|m| (m.round, m.acc_sparse))
        .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
    let n = metrics.len().max(1) as f64;
    RunSummary {
        output: output.to_path_buf(),
        best_accuracy,
        best_round,
        total_bytes_down: metrics.iter().map(|m| m.bytes_down).sum(),
        total_bytes_up: metrics.iter().map(|m| m.bytes_up).sum(),
        mean_flops_saved: metrics.iter().map(|m| m.flops_saved_fraction).sum::<f64>() / n,
    }
}

/// Runs the configured experiment and writes its metrics file.
pub fn execute(cfg: &RunConfig) -> Result<(Vec<RoundMetrics>, RunSummary)> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let metrics = run_experiment(&cfg.experiment, &data.partition, &data.test, cfg.execution)?;
    let bytes = render_metrics(&metrics_rows(&metrics, cfg.eval_every), cfg.metrics_format)?;
    if let Some(dir) = cfg.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&cfg.output, bytes)?;
    let summary = summarize(&metrics, &cfg.output);
    Ok((metrics, summary))
}

/// `metrics.csv` + (`server_sparsity`, `0.5`) -> `metrics_server_sparsity-0.5.csv`.
pub fn sweep_output(base: &Path, key: &str, value: &str) -> PathBuf {
    let stem = base
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("metrics");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_{key}-{value}.{ext}"),
        None => format!("{stem}_{key}-{value}"),
    };
    base.with_file_name(name)
}

/// One run per value of `key`, sequentially, each writing its own file.
pub fn sweep(raw: &RawConfig, key: &str, values: &[String]) -> Result<Vec<RunSummary>> {
    if !KEYS.contains(&key) {
        return Err(config_err(key, "unknown sweep parameter"));
    }
    let base = raw.build()?;
    values
        .iter()
        .map(|value| {
            let mut r = raw.clone();
            r.set(key, value, "sweep");
            let mut cfg = r.build()?;
            cfg.output = sweep_output(&base.output, key, value);
            execute(&cfg).map(|(_, s)| s)
        })
        .collect()
}

/// Process exit code for a failure: 2 for configuration problems, 3 for
/// anything that went wrong while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArchitecture(_) | Error::InvalidSparsity(_) => 2,
        _ => 3,
    }
}
