//! Experiment files and the runners behind the command-line tool.
//!
//! An experiment is a TOML document. Unknown keys are rejected. Currents are
//! written in nanoamperes.
//!
//! ```toml
//! name = "noise_1na"
//! seeds = [0, 1, 2]
//!
//! [network]
//! bn_output = true
//!
//! [currents]
//! i_max_na = [1.0, 1.0, 1.0, 1.0]
//!
//! [train]
//! epochs = 250
//! lr = 0.02
//! noise = { kind = "accurate" }
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, HistogramSpec};
use crate::checkpoint;
use crate::clip::RegConfig;
use crate::data::{self, Dataset, QuantMode, Split};
use crate::error::{Error, Result};
use crate::model::{build_network, BnStats, NetworkConfig, NetworkState, LAYER_NAMES};
use crate::noise::{CurrentConfig, NoiseConfig, NoiseKind, PhysicalConstants, LAYERS, NANOAMP};
use crate::optim::AdamConfig;
use crate::rng::GENERATOR_ID;
use crate::trainer::{self, ClipSettings, EvalConfig, TrainConfig, TrainReport};

pub const DATA_DIR_ENV: &str = "MSNN_DATA_DIR";
pub const TABLE_GRID_NA: [f64; 7] = [1.0, 3.0, 5.0, 10.0, 20.0, 50.0, 100.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// CIFAR-10 when a data directory is configured, synthetic otherwise.
    Auto,
    Cifar,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Extracted `cifar-10-batches-bin`; falls back to `MSNN_DATA_DIR`.
    pub dir: Option<PathBuf>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
    pub quant_mode: QuantMode,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Auto,
            dir: None,
            train_size: None,
            test_size: None,
            synthetic_train: 2000,
            synthetic_test: 1000,
            synthetic_seed: 0,
            quant_mode: QuantMode::Round,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurrentSection {
    /// `"sec6"` selects the 1.8 / 1.4 / 5 / 40 nA budget and overrides `i_max_na`.
    pub preset: Option<String>,
    pub i_max_na: [f64; LAYERS],
    pub i_res_na: f64,
}

impl Default for CurrentSection {
    fn default() -> Self {
        CurrentSection {
            preset: None,
            i_max_na: [1.0; LAYERS],
            i_res_na: 0.1,
        }
    }
}

impl CurrentSection {
    pub fn resolve(&self) -> Result<CurrentConfig> {
        let mut c = match self.preset.as_deref() {
            None => CurrentConfig {
                i_max: self.i_max_na.map(|i| i * NANOAMP),
                i_res: 0.0,
            },
            Some("sec6") => CurrentConfig::sec6_preset(),
            Some(other) => return Err(Error::config(format!("unknown current preset {other:?}"))),
        };
        c.i_res = self.i_res_na * NANOAMP;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub scale: f64,
    pub layers: [bool; LAYERS],
}

impl NoiseSection {
    fn of(kind: NoiseKind) -> Self {
        NoiseSection {
            kind,
            scale: 1.0,
            layers: [true; LAYERS],
        }
    }

    fn build(&self, constants: PhysicalConstants, currents: CurrentConfig) -> NoiseConfig {
        NoiseConfig {
            constants,
            currents,
            kind: self.kind,
            scale: self.scale,
            layers: self.layers,
        }
    }
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self::of(NoiseKind::None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub augment: bool,
    pub adam: AdamConfig,
    pub noise: NoiseSection,
    pub program_during_training: bool,
    /// Noisy evaluation runs used to pick the retained checkpoint.
    pub select_runs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            lr_decay_every: t.lr_decay_every,
            augment: t.augment,
            adam: t.adam,
            noise: NoiseSection::default(),
            program_during_training: false,
            select_runs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub noise: NoiseSection,
    pub runs: usize,
    pub batch_size: usize,
    pub programming: bool,
    pub program_layers: [bool; LAYERS],
    pub bn_stats: Option<BnStats>,
    /// Uniform maximum currents evaluated after training, nA.
    pub i_max_grid_na: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            noise: NoiseSection::of(NoiseKind::Accurate),
            runs: 5,
            batch_size: 200,
            programming: false,
            program_layers: [true; LAYERS],
            bn_stats: None,
            i_max_grid_na: TABLE_GRID_NA.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into() }
    }
}

/// One swept parameter: a dotted path into this document and its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: String,
    pub values: Vec<toml::Value>,
    /// Also run the unmodified document as a reference row.
    #[serde(default)]
    pub reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub data: DataSection,
    pub network: NetworkConfig,
    pub constants: PhysicalConstants,
    pub currents: CurrentSection,
    pub train: TrainSection,
    pub clip: ClipSettings,
    pub reg: RegConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
    pub sweep: Option<SweepSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seeds: vec![0],
            deterministic: true,
            data: DataSection::default(),
            network: NetworkConfig::default(),
            constants: PhysicalConstants::default(),
            currents: CurrentSection::default(),
            train: TrainSection::default(),
            clip: ClipSettings::default(),
            reg: RegConfig::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        self.network.validate()?;
        self.train_config()?.validate()?;
        self.eval_config(self.currents.resolve()?)?.validate()?;
        if self.eval.i_max_grid_na.iter().any(|&i| !(i > 0.0)) {
            return Err(Error::config("i_max_grid_na entries must be positive"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::config("sweep lists no values"));
            }
        }
        Ok(())
    }

    /// Shrink widths, data and epochs to a desk-scale profile. Topology is
    /// unchanged.
    pub fn quick(mut self) -> Self {
        self.network.conv1_filters = self.network.conv1_filters.min(16);
        self.network.conv2_filters = self.network.conv2_filters.min(32);
        self.network.fc1_units = self.network.fc1_units.min(64);
        self.train.epochs = self.train.epochs.min(8);
        self.train.lr_decay_every = self.train.lr_decay_every.max(self.train.epochs);
        self.data.synthetic_train = self.data.synthetic_train.min(2000);
        self.data.synthetic_test = self.data.synthetic_test.min(1000);
        self.data.train_size = Some(self.data.train_size.unwrap_or(5000).min(5000));
        self.data.test_size = Some(self.data.test_size.unwrap_or(1000).min(1000));
        self.eval.runs = self.eval.runs.min(3);
        self
    }

    pub fn train_currents(&self) -> Result<CurrentConfig> {
        self.currents.resolve()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let currents = self.currents.resolve()?;
        let t = &self.train;
        let mut select = self.eval_config(currents)?;
        select.runs = t.select_runs;
        select.programming = false;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            lr_decay_every: t.lr_decay_every,
            adam: t.adam,
            augment: t.augment,
            noise: t.noise.build(self.constants, currents),
            program_during_training: t.program_during_training,
            clip: self.clip.clone(),
            reg: self.reg.clone(),
            select,
        })
    }

    pub fn eval_config(&self, currents: CurrentConfig) -> Result<EvalConfig> {
        let e = &self.eval;
        Ok(EvalConfig {
            noise: e.noise.build(self.constants, currents),
            programming: e.programming,
            program_layers: e.program_layers,
            runs: e.runs,
            batch_size: e.batch_size,
            bn_stats: e.bn_stats,
        })
    }

    /// Uniform currents at `i_max_na`, keeping the configured resolution.
    pub fn uniform_currents(&self, i_max_na: f64) -> CurrentConfig {
        CurrentConfig {
            i_max: [i_max_na * NANOAMP; LAYERS],
            i_res: self.currents.i_res_na * NANOAMP,
        }
    }

    /// Short description of the enabled training methods.
    pub fn method_flags(&self) -> String {
        let mut f = vec![format!("noise={}", self.train.noise.kind)];
        if self.train.noise.scale != 1.0 {
            f.push(format!("scale={}", self.train.noise.scale));
        }
        if self.network.bn_output {
            f.push("bn_out".into());
        }
        if self.clip.enabled {
            f.push(format!("clip(a={})", self.clip.alpha));
        }
        if let Some(t) = self.clip.w_clip_t {
            f.push(format!("wclip={t}"));
        }
        for (name, l) in [("e1", self.reg.lambda_e1), ("e2", self.reg.lambda_e2), ("e3", self.reg.lambda_e3)] {
            if l > 0.0 {
                f.push(format!("{name}={l}"));
            }
        }
        if let Some(c) = self.reg.grad_clip {
            f.push(format!("gclip={c}"));
        }
        if self.network.dropout.iter().any(|&p| p > 0.0) {
            f.push("dropout".into());
        }
        f.join("+")
    }

    /// The document with one dotted key replaced.
    pub fn with_value(&self, path: &str, value: &toml::Value) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        let mut node = &mut doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("sweep path {path:?} does not name a table")))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_string(), value.clone());
                break;
            }
            node = table
                .entry((*part).to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let mut out: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("sweep {path} = {value}: {e}")))?;
        out.sweep = None;
        out.validate()?;
        Ok(out)
    }
}

/// Train and test splits, quantized to the configured input precision.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    /// `"cifar10"` or `"synthetic"`.
    pub source: &'static str,
}

pub fn data_dir(cfg: &DataSection) -> Option<PathBuf> {
    cfg.dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let d = &cfg.data;
    let dir = data_dir(d);
    let use_cifar = match d.source {
        DataSource::Cifar => true,
        DataSource::Synthetic => false,
        DataSource::Auto => dir.is_some(),
    };
    let (train, test, source) = if use_cifar {
        let dir = dir.ok_or_else(|| {
            Error::data(format!("CIFAR-10 requested but neither data.dir nor {DATA_DIR_ENV} is set"))
        })?;
        let (tr, te) = data::load_cifar10(&dir)?;
        (tr, te, "cifar10")
    } else {
        let classes = cfg.network.classes;
        (
            data::synthetic_dataset(d.synthetic_train, classes, d.synthetic_seed, Split::Train),
            data::synthetic_dataset(d.synthetic_test, classes, d.synthetic_seed, Split::Test),
            "synthetic",
        )
    };
    let train = d.train_size.map_or(train.clone(), |n| train.subset(n));
    let test = d.test_size.map_or(test.clone(), |n| test.subset(n));
    let bits = cfg.network.input_bits;
    Ok(LoadedData {
        train: train.quantized(bits, d.quant_mode),
        test: test.quantized(bits, d.quant_mode),
        source,
    })
}

/// One row of the per-epoch training CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub config_hash: String,
    pub seed: u64,
    pub i_max: String,
    pub noise_kind: String,
    pub method_flags: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_std: f64,
    pub thr1: f64,
    pub thr2: f64,
    pub thr3: f64,
}

/// Accuracy of one network at one current budget.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub config_hash: String,
    pub seed: u64,
    pub method_flags: String,
    pub noise_kind: String,
    pub programming: bool,
    pub i_max_na: f64,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub seed: u64,
    pub data: String,
    pub method_flags: String,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub skipped_steps: usize,
    pub generator: String,
    pub wall_clock_s: Option<f64>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other:?}", path.display())),
    }
}

fn na_list(c: &CurrentConfig) -> String {
    c.i_max
        .iter()
        .map(|i| format!("{}", i / NANOAMP))
        .collect::<Vec<_>>()
        .join(";")
}

/// Everything produced by one seed of [`run_train`].
pub struct SeedRun {
    pub seed: u64,
    pub state: NetworkState,
    pub report: TrainReport,
    pub grid: Vec<EvalRow>,
}

pub struct TrainOutcome {
    pub hash: String,
    pub data_source: &'static str,
    pub runs: Vec<SeedRun>,
    pub epoch_rows: Vec<EpochRow>,
    pub summary: Vec<SummaryRow>,
}

/// Evaluate `state` at every current of `grid_na` under the configured eval noise.
pub fn eval_grid(
    cfg: &ExperimentConfig,
    state: &NetworkState,
    test: &Dataset,
    grid_na: &[f64],
    seed: u64,
    hash: &str,
) -> Result<Vec<EvalRow>> {
    grid_na
        .iter()
        .map(|&i| {
            let ec = cfg.eval_config(cfg.uniform_currents(i))?;
            let r = trainer::evaluate(state, test, &ec, seed)?;
            Ok(EvalRow {
                config_hash: hash.to_string(),
                seed,
                method_flags: cfg.method_flags(),
                noise_kind: ec.noise.kind.to_string(),
                programming: ec.programming,
                i_max_na: i,
                runs: ec.runs,
                mean: r.mean,
                std: r.std,
            })
        })
        .collect()
}

/// Train one network per seed, evaluate it over the current grid.
pub fn train_experiment(cfg: &ExperimentConfig, data: &LoadedData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let tc = cfg.train_config()?;
    let currents = cfg.train_currents()?;
    let mut out = TrainOutcome {
        hash: hash.clone(),
        data_source: data.source,
        runs: Vec::new(),
        epoch_rows: Vec::new(),
        summary: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let start = Instant::now();
        let mut state = build_network(&cfg.network, seed)?;
        state.meta.config_hash = hash.clone();
        let (state, report) = trainer::train(&tc, &data.train, &data.test, state, seed)?;
        for e in &report.epochs {
            out.epoch_rows.push(EpochRow {
                config_hash: hash.clone(),
                seed,
                i_max: na_list(&currents),
                noise_kind: cfg.train.noise.kind.to_string(),
                method_flags: cfg.method_flags(),
                epoch: e.epoch,
                train_loss: e.train_loss,
                train_acc: e.train_acc,
                test_acc: e.test_acc,
                test_std: e.test_std,
                thr1: e.thresholds[0],
                thr2: e.thresholds[1],
                thr3: e.thresholds[2],
            });
        }
        let grid = eval_grid(cfg, &state, &data.test, &cfg.eval.i_max_grid_na, seed, &hash)?;
        out.summary.push(SummaryRow {
            config_hash: hash.clone(),
            seed,
            data: data.source.to_string(),
            method_flags: cfg.method_flags(),
            best_epoch: report.best_epoch,
            best_test_acc: report.best_test_acc.unwrap_or(f64::NAN),
            skipped_steps: report.skipped_steps,
            generator: GENERATOR_ID.to_string(),
            wall_clock_s: (!cfg.deterministic).then(|| start.elapsed().as_secs_f64()),
        });
        out.runs.push(SeedRun {
            seed,
            state,
            report,
            grid,
        });
    }
    Ok(out)
}

/// Paths written by [`run_train`].
#[derive(Clone, Debug)]
pub struct TrainFiles {
    pub checkpoints: Vec<PathBuf>,
    pub epochs_csv: PathBuf,
    pub grid_csv: PathBuf,
    pub summary_csv: PathBuf,
}

pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainFiles> {
    let data = load_data(cfg)?;
    let outcome = train_experiment(cfg, &data)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut checkpoints = Vec::new();
    for run in &outcome.runs {
        let p = out_dir.join(format!("{}_seed{}.msnn", cfg.name, run.seed));
        checkpoint::save(&run.state, &p)?;
        checkpoints.push(p);
    }
    let grid: Vec<EvalRow> = outcome.runs.iter().flat_map(|r| r.grid.clone()).collect();
    let files = TrainFiles {
        checkpoints,
        epochs_csv: out_dir.join(format!("{}_epochs.csv", cfg.name)),
        grid_csv: out_dir.join(format!("{}_grid.csv", cfg.name)),
        summary_csv: out_dir.join(format!("{}_summary.csv", cfg.name)),
    };
    write_csv(&files.epochs_csv, &outcome.epoch_rows)?;
    write_csv(&files.grid_csv, &grid)?;
    write_csv(&files.summary_csv, &outcome.summary)?;
    fs::write(out_dir.join(format!("{}.toml", cfg.name)), cfg.to_toml()?)
        .map_err(|e| Error::io(out_dir, e))?;
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub config_hash: String,
    pub seed: u64,
    pub i_max_na: f64,
    pub mean: f64,
    pub std: f64,
    pub best_test_acc: f64,
}

/// Train and evaluate every value of the `[sweep]` section.
pub fn sweep_experiment(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("experiment has no [sweep] section"))?;
    if sweep.values.is_empty() {
        return Err(Error::config("sweep lists no values"));
    }
    let mut variants = Vec::new();
    if sweep.reference {
        let mut base = cfg.clone();
        base.sweep = None;
        variants.push(("reference".to_string(), base));
    }
    for v in &sweep.values {
        let label = match v {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        variants.push((label, cfg.with_value(&sweep.parameter, v)?));
    }
    let mut rows = Vec::new();
    for (label, variant) in variants {
        let data = load_data(&variant)?;
        let outcome = train_experiment(&variant, &data)?;
        for run in outcome.runs {
            for g in run.grid {
                rows.push(SweepRow {
                    parameter: sweep.parameter.clone(),
                    value: label.clone(),
                    config_hash: outcome.hash.clone(),
                    seed: run.seed,
                    i_max_na: g.i_max_na,
                    mean: g.mean,
                    std: g.std,
                    best_test_acc: run.report.best_test_acc.unwrap_or(f64::NAN),
                });
            }
        }
    }
    Ok(rows)
}

pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let rows = sweep_experiment(cfg)?;
    write_csv(out, &rows)?;
    Ok(rows)
}

/// Options of the `eval` command.
#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub grid_na: Vec<f64>,
    pub noise: NoiseKind,
    pub scale: f64,
    pub runs: usize,
    pub programming: bool,
    pub seed: u64,
}

pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    state: &NetworkState,
    test: &Dataset,
    req: &EvalRequest,
) -> Result<Vec<EvalRow>> {
    let mut cfg = cfg.clone();
    cfg.eval.noise.kind = req.noise;
    cfg.eval.noise.scale = req.scale;
    cfg.eval.runs = req.runs;
    cfg.eval.programming = req.programming;
    eval_grid(&cfg, state, test, &req.grid_na, req.seed, &state.meta.config_hash)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityCsv {
    pub layer: String,
    pub i_max_na: f64,
    pub clean_acc: f64,
    pub noisy_acc: f64,
    pub drop: f64,
    pub noisy_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerCsv {
    pub layer: String,
    pub current_na: f64,
    pub share_pct: f64,
    pub watts: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnrCsv {
    pub layer: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
    pub std: f64,
}

pub fn sensitivity_rows(
    cfg: &ExperimentConfig,
    state: &NetworkState,
    test: &Dataset,
    probe_na: f64,
    seed: u64,
) -> Result<Vec<SensitivityCsv>> {
    if !(probe_na > 0.0) {
        return Err(Error::config(format!("probe current must be positive, got {probe_na} nA")));
    }
    let ec = cfg.eval_config(cfg.uniform_currents(probe_na))?;
    Ok(analysis::layer_sensitivity(state, test, &ec, seed)?
        .into_iter()
        .map(|r| SensitivityCsv {
            layer: LAYER_NAMES[r.layer].into(),
            i_max_na: probe_na,
            clean_acc: r.clean_acc,
            noisy_acc: r.noisy_acc,
            drop: r.drop,
            noisy_std: r.noisy_std,
        })
        .collect())
}

pub fn power_rows(
    state: &NetworkState,
    data: &Dataset,
    currents: &CurrentConfig,
    supply_voltage: Option<f64>,
) -> Result<Vec<PowerCsv>> {
    let p = analysis::power_report(state, data, currents, 200)?;
    let mut rows: Vec<PowerCsv> = (0..LAYERS)
        .map(|l| PowerCsv {
            layer: LAYER_NAMES[l].into(),
            current_na: p.layer_current[l] / NANOAMP,
            share_pct: p.share[l],
            watts: supply_voltage.map(|v| p.layer_current[l] * v),
        })
        .collect();
    rows.push(PowerCsv {
        layer: "total".into(),
        current_na: p.total / NANOAMP,
        share_pct: p.share.iter().sum(),
        watts: supply_voltage.map(|v| p.watts(v)),
    });
    Ok(rows)
}

pub fn snr_rows(
    cfg: &ExperimentConfig,
    state: &NetworkState,
    test: &Dataset,
    i_max_na: f64,
    spec: HistogramSpec,
    seed: u64,
) -> Result<Vec<SnrCsv>> {
    let noise = cfg.eval_config(cfg.uniform_currents(i_max_na))?.noise;
    let mut rows = Vec::new();
    for (l, name) in LAYER_NAMES.iter().enumerate() {
        let s = analysis::distortion_histogram(state, test, &noise, l, spec, seed)?;
        rows.extend(s.bins.iter().map(|b| SnrCsv {
            layer: (*name).into(),
            bin_lo: b.lo,
            bin_hi: b.hi,
            count: b.count,
            std: s.std,
        }));
    }
    Ok(rows)
}
