//! Command implementations behind the `avparse` binary.
//!
//! Config files are JSON with full defaults; `--print-config` prints the
//! resolved config (the single source of truth for every unspecified
//! hyperparameter) and exits. Exit codes: 0 success, 2 config/input error,
//! 3 numeric failure, 4 gradient-check failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, GenConfig};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::semantics::{build_fixture_table, load_table, save_table};
use crate::model::{ModelDims, ModelParameters};
use crate::trainer::{
    self, evaluate_corpus, full_model_grad_check_with, train, TrainConfig, TrainError,
};

/// Relative-error bound the gradient check must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Parameter-count threshold above which `gradcheck` warns about runtime.
pub const GRADCHECK_WARN_COORDS: usize = 10_000;

#[derive(Debug)]
pub enum CliError {
    /// Configuration or input problem (exit 2).
    Config(String),
    /// Numeric failure such as a non-finite loss (exit 3).
    Numeric(String),
    /// Gradient check failed its tolerance (exit 4).
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::GradCheck(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::GradCheck(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

// ── File-level config schemas ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenFileConfig {
    pub num_videos: usize,
    pub t: usize,
    pub d: usize,
    pub c: usize,
    pub events_per_video: (usize, usize),
    pub alignment_rate: f64,
    pub pseudo_corruption_rate: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
    /// Caption-embedding width; defaults to `d`.
    pub d_text: Option<usize>,
    /// Class vocabulary; defaults to the built-in name list.
    pub class_names: Option<Vec<String>>,
}

impl Default for GenFileConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        GenFileConfig {
            num_videos: g.num_videos,
            t: g.t,
            d: g.d,
            c: g.c,
            events_per_video: g.events_per_video,
            alignment_rate: g.alignment_rate,
            pseudo_corruption_rate: g.pseudo_corruption_rate,
            feature_noise_sigma: g.feature_noise_sigma,
            seed: g.seed,
            d_text: None,
            class_names: None,
        }
    }
}

impl GenFileConfig {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            num_videos: self.num_videos,
            t: self.t,
            d: self.d,
            c: self.c,
            events_per_video: self.events_per_video,
            alignment_rate: self.alignment_rate,
            pseudo_corruption_rate: self.pseudo_corruption_rate,
            feature_noise_sigma: self.feature_noise_sigma,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFileConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: trainer::OptimizerKind,
    pub seed: u64,
    pub log_interval: usize,
    pub eval_interval: Option<usize>,
    pub include_label_loss: bool,
    pub softmax_scale: bool,
    pub reduction_ratio: usize,
    pub threshold: f64,
    /// Fraction of the dataset used for training; >= 1 trains and
    /// evaluates on the full set (overfit runs).
    pub train_fraction: f64,
    /// Seed of the split shuffle; defaults to `seed`.
    pub split_seed: Option<u64>,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainFileConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            seed: t.seed,
            log_interval: t.log_interval,
            eval_interval: t.eval_interval,
            include_label_loss: t.include_label_loss,
            softmax_scale: t.softmax_scale,
            reduction_ratio: t.reduction_ratio,
            threshold: t.threshold,
            train_fraction: 0.8,
            split_seed: None,
        }
    }
}

impl TrainFileConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed: self.seed,
            log_interval: self.log_interval,
            eval_interval: self.eval_interval,
            include_label_loss: self.include_label_loss,
            softmax_scale: self.softmax_scale,
            reduction_ratio: self.reduction_ratio,
            threshold: self.threshold,
        }
    }
}

/// Everything needed to reproduce a training run; written before the run
/// starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: TrainFileConfig,
    pub data_dir: PathBuf,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let raw = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&raw)
                .map_err(|e| CliError::Config(format!("invalid config {}: {e}", p.display())))
        }
    }
}

/// Accept either a plain train config or a previously written run manifest.
fn load_train_config(path: Option<&Path>) -> Result<TrainFileConfig, CliError> {
    let Some(p) = path else {
        return Ok(TrainFileConfig::default());
    };
    let raw = fs::read_to_string(p)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
    if let Ok(manifest) = serde_json::from_str::<RunManifest>(&raw) {
        return Ok(manifest.config);
    }
    serde_json::from_str(&raw)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", p.display())))
}

fn print_resolved<T: Serialize>(cfg: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(cfg).expect("config serializes")
    );
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Config(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, bytes)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

// ── gen ─────────────────────────────────────────────────────────────────

pub fn cmd_gen(
    config_path: Option<&Path>,
    out_dir: &Path,
    seed_override: Option<u64>,
    print_config: bool,
) -> Result<(), CliError> {
    let mut file_cfg: GenFileConfig = load_json_config(config_path)?;
    if let Some(seed) = seed_override {
        file_cfg.seed = seed;
    }
    if print_config {
        print_resolved(&file_cfg);
        return Ok(());
    }
    let cfg = file_cfg.gen_config();
    cfg.validate().map_err(config_err)?;

    let class_names = file_cfg
        .class_names
        .clone()
        .unwrap_or_else(|| dataset::default_class_names(cfg.c));
    if class_names.len() != cfg.c {
        return Err(CliError::Config(format!(
            "class_names: {} names for c = {}",
            class_names.len(),
            cfg.c
        )));
    }
    let d_text = file_cfg.d_text.unwrap_or(cfg.d);

    let (samples, stats) = dataset::generate_detailed(&cfg).map_err(config_err)?;
    let data = Dataset::new(class_names.clone(), samples);
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    dataset::save(&data, out_dir).map_err(config_err)?;
    let table = build_fixture_table(&class_names, d_text, cfg.seed).map_err(config_err)?;
    save_table(&table, out_dir).map_err(config_err)?;

    println!(
        "wrote {} videos (t={}, d={}, c={}, d_text={}) to {}",
        data.samples.len(),
        cfg.t,
        cfg.d,
        cfg.c,
        d_text,
        out_dir.display()
    );
    println!(
        "events: {} aligned, {} misaligned (alignment_rate {})",
        stats.aligned_events, stats.misaligned_events, cfg.alignment_rate
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

pub fn cmd_train(
    config_path: Option<&Path>,
    data_dir: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    print_config: bool,
) -> Result<(), CliError> {
    let mut file_cfg = load_train_config(config_path)?;
    if let Some(seed) = seed_override {
        file_cfg.seed = seed;
    }
    if print_config {
        print_resolved(&file_cfg);
        return Ok(());
    }
    if !data_dir.exists() {
        return Err(CliError::Config(format!(
            "dataset directory {} does not exist",
            data_dir.display()
        )));
    }
    let data = dataset::load(data_dir).map_err(config_err)?;
    let table = load_table(data_dir).map_err(config_err)?;
    let cfg = file_cfg.train_config();
    cfg.validate()?;

    let (train_set, eval_set) = if file_cfg.train_fraction >= 1.0 {
        (data.samples.clone(), data.samples.clone())
    } else {
        let split_seed = file_cfg.split_seed.unwrap_or(file_cfg.seed);
        dataset::split(data.samples.clone(), file_cfg.train_fraction, split_seed)
            .map_err(config_err)?
    };

    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: file_cfg.seed,
        config: file_cfg.clone(),
        data_dir: data_dir.to_path_buf(),
        checkpoint_path: out_dir.join("checkpoint.lnkp"),
        history_path: out_dir.join("history.jsonl"),
        metrics_path: out_dir.join("metrics.json"),
    };
    write_file(
        &out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .expect("manifest serializes")
            .as_bytes(),
    )?;

    let (params, history) = train(&train_set, &eval_set, &table, &cfg)?;

    save_checkpoint(&params, &manifest.checkpoint_path).map_err(config_err)?;
    let mut lines = Vec::new();
    for record in &history {
        lines.push(serde_json::to_string(record).expect("history serializes"));
    }
    write_file(&manifest.history_path, (lines.join("\n") + "\n").as_bytes())?;

    let report = evaluate_corpus(&params, &table, &eval_set, cfg.forward_options(), cfg.threshold)?;
    write_file(
        &manifest.metrics_path,
        serde_json::to_string_pretty(&report)
            .expect("report serializes")
            .as_bytes(),
    )?;

    println!(
        "trained {} steps over {} epochs on {} videos ({} eval)",
        history.last().map(|r| r.step).unwrap_or(0),
        cfg.epochs,
        train_set.len(),
        eval_set.len()
    );
    println!("checkpoint: {}", manifest.checkpoint_path.display());
    println!("history:    {}", manifest.history_path.display());
    println!("metrics:    {}", manifest.metrics_path.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

pub fn cmd_eval(
    checkpoint_path: &Path,
    data_dir: &Path,
    csv_out: &Path,
    threshold: f64,
) -> Result<(), CliError> {
    let params = load_checkpoint(checkpoint_path).map_err(config_err)?;
    let data = dataset::load(data_dir).map_err(config_err)?;
    let table = load_table(data_dir).map_err(config_err)?;

    let (t, d, c) = data.dims().ok_or_else(|| {
        CliError::Config(format!("dataset {} is empty", data_dir.display()))
    })?;
    let dims = params.dims;
    if (dims.t, dims.d, dims.c) != (t, d, c) || dims.d_text != table.d_text {
        return Err(CliError::Config(format!(
            "checkpoint dims (t={}, d={}, c={}, d_text={}) do not match dataset dims \
             (t={t}, d={d}, c={c}, d_text={})",
            dims.t, dims.d, dims.c, dims.d_text, table.d_text
        )));
    }

    let report = evaluate_corpus(
        &params,
        &table,
        &data.samples,
        crate::model::predictor::ForwardOptions::default(),
        threshold,
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    let mut csv = Vec::new();
    writeln!(csv, "{}", crate::metrics::MetricsReport::CSV_HEADER).unwrap();
    writeln!(csv, "{}", report.csv_row()).unwrap();
    write_file(csv_out, &csv)?;
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

pub struct GradCheckDims {
    pub t: usize,
    pub d: usize,
    pub c: usize,
    pub d_text: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        GradCheckDims {
            t: 4,
            d: 8,
            c: 3,
            d_text: 8,
        }
    }
}

pub fn cmd_gradcheck(dims: GradCheckDims, seed: u64, corrupt: bool) -> Result<(), CliError> {
    let gen_cfg = GenConfig {
        num_videos: 1,
        t: dims.t,
        d: dims.d,
        c: dims.c,
        events_per_video: (1, dims.c.min(2)),
        alignment_rate: 0.7,
        pseudo_corruption_rate: 0.1,
        feature_noise_sigma: 0.1,
        seed,
    };
    gen_cfg.validate().map_err(config_err)?;
    let sample = dataset::generate(&gen_cfg)
        .map_err(config_err)?
        .remove(0);
    let class_names = dataset::default_class_names(dims.c);
    let table = build_fixture_table(&class_names, dims.d_text, seed).map_err(config_err)?;
    let params = ModelParameters::init(
        ModelDims::new(dims.t, dims.d, dims.c, dims.d_text, ModelDims::DEFAULT_REDUCTION_RATIO),
        seed,
    );
    let coords = params.set.total_coords();
    if coords > GRADCHECK_WARN_COORDS {
        eprintln!(
            "warning: {coords} parameter coordinates; the finite-difference sweep will be slow"
        );
    }

    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let report = full_model_grad_check_with(&sample, &params, &table, &cfg, corrupt)?;

    println!("parameters checked: {} ({} coordinates)", params.set.len(), coords);
    println!("max relative error: {:.3e}", report.max_rel_err);
    println!("worst parameter:    {}", report.worst);
    let pass = report.max_rel_err < GRADCHECK_TOLERANCE;
    println!(
        "result: {} (tolerance {GRADCHECK_TOLERANCE:.0e})",
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::GradCheck(format!(
            "gradient check failed: max rel err {:.3e} at {}",
            report.max_rel_err, report.worst
        )))
    }
}
