//! Config-driven experiments: single runs, the seven-group coefficient sweep
//! and checkpoint re-evaluation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::data::{split_dataset, Dataset, DatasetSpec, Source, SplitSpec, Splits};
use crate::decoder::EnsembleCoefficients;
use crate::error::{Error, Result};
use crate::metrics::{render_csv, render_table, MetricReport, ReportRow};
use crate::model::{Cetc, ModelConfig};
use crate::train::{evaluate, with_threads, Evaluation, TrainConfig, Trainer};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_TXT: &str = "results.txt";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const METRICS_JSON: &str = "metrics.json";

/// The seven coefficient groups, in reporting order.
pub fn coefficient_groups() -> [EnsembleCoefficients; 7] {
    let c = |a, b, g| EnsembleCoefficients::new(a, b, g).expect("valid group");
    [
        c(0.8, 0.1, 0.1),
        c(0.6, 0.2, 0.2),
        c(0.1, 0.8, 0.1),
        c(0.2, 0.6, 0.2),
        c(0.1, 0.1, 0.8),
        c(0.2, 0.2, 0.6),
        EnsembleCoefficients::EQUAL,
    ]
}

/// Either one coefficient triple or the full sweep; written as `"A,B,G"` or `"sweep"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CoefficientMode {
    Single(EnsembleCoefficients),
    Sweep,
}

impl Default for CoefficientMode {
    fn default() -> Self {
        CoefficientMode::Single(EnsembleCoefficients::EQUAL)
    }
}

impl fmt::Display for CoefficientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefficientMode::Single(c) => c.fmt(f),
            CoefficientMode::Sweep => f.write_str("sweep"),
        }
    }
}

impl FromStr for CoefficientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "sweep" {
            Ok(CoefficientMode::Sweep)
        } else {
            Ok(CoefficientMode::Single(s.parse()?))
        }
    }
}

impl TryFrom<String> for CoefficientMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CoefficientMode> for String {
    fn from(m: CoefficientMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Single-threaded execution.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub coefficients: CoefficientMode,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The config with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.preprocess.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "train.preprocess.image_size {} must equal model.image_size {}",
                self.train.preprocess.image_size, self.model.image_size
            )));
        }
        let mut paths = Vec::new();
        if let Source::ImageFolder { path } = &self.dataset.source {
            paths.push(path);
        }
        if let SplitSpec::Ratio82ExternalTest { test_path } = &self.dataset.split {
            paths.push(test_path);
        }
        for p in paths {
            if !p.is_dir() {
                return Err(Error::Config(format!("dataset directory {} does not exist", p.display())));
            }
        }
        if let Source::Synthetic { n_per_class, image_size, .. } = &self.dataset.source {
            if *n_per_class == 0 || *image_size == 0 {
                return Err(Error::Config("synthetic dataset needs positive n_per_class and image_size".into()));
            }
        }
        Ok(())
    }
}

/// Data shared by every run of an experiment.
pub struct PreparedData {
    pub data: Dataset,
    pub splits: Splits,
    /// Separate test images for the 8:2 layout.
    pub external_test: Option<Dataset>,
}

impl PreparedData {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        let data = Dataset::open(&spec.source, spec.skip_unreadable)?;
        let splits = split_dataset(data.labels(), &spec.split, spec.seed)?;
        let external_test = match &spec.split {
            SplitSpec::Ratio82ExternalTest { test_path } => {
                Some(Dataset::image_folder(test_path, spec.skip_unreadable)?)
            }
            SplitSpec::Ratio811 => None,
        };
        Ok(Self {
            data,
            splits,
            external_test,
        })
    }

    pub fn evaluate_test(
        &self,
        model: &Cetc,
        params: &crate::params::ParamStore,
        coeffs: &EnsembleCoefficients,
        cfg: &TrainConfig,
    ) -> Result<Evaluation> {
        match &self.external_test {
            Some(test) => {
                let all: Vec<usize> = (0..test.len()).collect();
                evaluate(model, params, coeffs, test, &all, cfg)
            }
            None => evaluate(model, params, coeffs, &self.data, &self.splits.test, cfg),
        }
    }
}

/// Outcome of one trained (or re-evaluated) model.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub coefficients: EnsembleCoefficients,
    pub val: Evaluation,
    pub test: Evaluation,
    pub checkpoint: Option<PathBuf>,
    pub best_epoch: Option<usize>,
}

impl RunResult {
    pub fn report(&self) -> MetricReport {
        self.test.report()
    }

    fn metrics_json(&self) -> serde_json::Value {
        json!({
            "coefficients": self.coefficients.to_string(),
            "best_epoch": self.best_epoch,
            "checkpoint": self.checkpoint,
            "val_loss": self.val.loss,
            "val_confusion": self.val.confusion,
            "val_metrics": self.val.report(),
            "test_loss": self.test.loss,
            "test_confusion": self.test.confusion,
            "test_metrics": self.test.report(),
        })
    }
}

/// Index of the best row: highest ACC, then highest FOS, then earliest.
/// Undefined values rank below every defined one.
pub fn best_row(reports: &[MetricReport]) -> Option<usize> {
    let key = |v: Option<f64>| v.unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<usize> = None;
    for (i, r) in reports.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (ra, rb) = (key(r.acc), key(reports[b].acc));
                ra > rb || (ra == rb && key(r.fos) > key(reports[b].fos))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

fn train_one(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    model: &Cetc,
    coeffs: EnsembleCoefficients,
    out_dir: &Path,
) -> Result<RunResult> {
    let init = model.init_params(cfg.seed)?;
    let mut trainer = Trainer::new(model, coeffs, cfg.train.clone(), cfg.seed).with_output(out_dir);
    trainer.metadata.insert("dataset_seed".into(), json!(cfg.dataset.seed));
    let outcome = trainer.fit(&prepared.data, &prepared.splits.train, &prepared.splits.val, init)?;
    let test = prepared.evaluate_test(model, &outcome.best_params, &coeffs, &cfg.train)?;
    let result = RunResult {
        coefficients: coeffs,
        val: outcome.best_val,
        test,
        checkpoint: outcome.checkpoint,
        best_epoch: Some(outcome.best_epoch),
    };
    fs::write(
        out_dir.join(METRICS_JSON),
        serde_json::to_string_pretty(&result.metrics_json())?,
    )?;
    Ok(result)
}

/// Everything a run wrote, for callers that want to inspect it.
#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub results: Vec<RunResult>,
    pub rows: Vec<ReportRow>,
    pub best: Option<usize>,
    pub table: String,
    pub output_dir: PathBuf,
}

fn write_reports(out: &Path, rows: &[ReportRow], best: Option<usize>) -> Result<String> {
    fs::write(out.join(RESULTS_CSV), render_csv("coefficients", rows))?;
    let mut table = render_table("coefficients", rows);
    if let Some(b) = best {
        table.push_str(&format!("\nbest: {} (row {})\n", rows[b].label, b + 1));
    }
    fs::write(out.join(RESULTS_TXT), &table)?;
    Ok(table)
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok(())
}

/// Train and evaluate one coefficient setting.
pub fn run_single(cfg: &ExperimentConfig, coeffs: EnsembleCoefficients) -> Result<ExperimentSummary> {
    cfg.validate()?;
    prepare_output(cfg)?;
    with_threads(cfg.deterministic, || {
        let prepared = PreparedData::load(&cfg.dataset)?;
        let model = Cetc::new(cfg.model.clone())?;
        let result = train_one(cfg, &prepared, &model, coeffs, &cfg.output_dir)?;
        let rows = vec![ReportRow {
            label: coeffs.to_string(),
            report: result.report(),
            note: None,
        }];
        let table = write_reports(&cfg.output_dir, &rows, Some(0))?;
        Ok(ExperimentSummary {
            results: vec![result],
            rows,
            best: Some(0),
            table,
            output_dir: cfg.output_dir.clone(),
        })
    })?
}

/// Train one model per coefficient group on shared splits and seeds. On the
/// first failing group the completed rows plus a failure row are written and
/// the error is returned.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    prepare_output(cfg)?;
    with_threads(cfg.deterministic, || {
        let prepared = PreparedData::load(&cfg.dataset)?;
        let model = Cetc::new(cfg.model.clone())?;
        let mut results = Vec::new();
        let mut rows = Vec::new();
        for (i, coeffs) in coefficient_groups().into_iter().enumerate() {
            let dir = cfg.output_dir.join(format!("group{}", i + 1));
            fs::create_dir_all(&dir)?;
            info!("group {} of 7: coefficients {coeffs}", i + 1);
            match train_one(cfg, &prepared, &model, coeffs, &dir) {
                Ok(r) => {
                    rows.push(ReportRow {
                        label: coeffs.to_string(),
                        report: r.report(),
                        note: None,
                    });
                    results.push(r);
                }
                Err(e) => {
                    warn!("group {} failed: {e}", i + 1);
                    rows.push(ReportRow {
                        label: coeffs.to_string(),
                        report: MetricReport::default(),
                        note: Some(format!("failed: {e}")),
                    });
                    let reports: Vec<MetricReport> = results.iter().map(RunResult::report).collect();
                    write_reports(&cfg.output_dir, &rows, best_row(&reports))?;
                    return Err(e);
                }
            }
        }
        let reports: Vec<MetricReport> = results.iter().map(RunResult::report).collect();
        let best = best_row(&reports);
        let table = write_reports(&cfg.output_dir, &rows, best)?;
        Ok(ExperimentSummary {
            results,
            rows,
            best,
            table,
            output_dir: cfg.output_dir.clone(),
        })
    })?
}

/// Re-evaluate a saved checkpoint on the configured splits. The model config
/// and coefficients stored in the checkpoint take precedence unless
/// `coeffs` is given.
pub fn run_eval_only(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    coeffs: Option<EnsembleCoefficients>,
) -> Result<(ExperimentSummary, EvalCheck)> {
    cfg.validate()?;
    prepare_output(cfg)?;
    let ckpt = checkpoint::load(checkpoint_path)?;
    let model_config: ModelConfig = match ckpt.metadata.get("model_config") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => cfg.model.clone(),
    };
    let coeffs = match (coeffs, ckpt.metadata.get("coefficients").and_then(|v| v.as_str())) {
        (Some(c), _) => c,
        (None, Some(s)) => s.parse()?,
        (None, None) => match cfg.coefficients {
            CoefficientMode::Single(c) => c,
            CoefficientMode::Sweep => EnsembleCoefficients::EQUAL,
        },
    };
    let stored_val_loss = ckpt.metadata.get("val_loss").and_then(|v| v.as_f64());
    let stored_val_metrics: Option<MetricReport> = ckpt
        .metadata
        .get("val_metrics")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()?;
    with_threads(cfg.deterministic, || {
        let prepared = PreparedData::load(&cfg.dataset)?;
        let model = Cetc::new(model_config)?;
        let mut params = model.init_params(0)?;
        let loaded = params.load_from(&ckpt.params)?;
        if loaded != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {loaded} of the model's {} tensors",
                params.len()
            )));
        }
        let val = evaluate(&model, &params, &coeffs, &prepared.data, &prepared.splits.val, &cfg.train)?;
        let test = prepared.evaluate_test(&model, &params, &coeffs, &cfg.train)?;
        let check = EvalCheck {
            val_loss: val.loss,
            stored_val_loss,
            val_metrics: val.report(),
            stored_val_metrics,
        };
        let result = RunResult {
            coefficients: coeffs,
            val,
            test,
            checkpoint: Some(checkpoint_path.to_path_buf()),
            best_epoch: ckpt.metadata.get("epoch").and_then(|v| v.as_u64()).map(|e| e as usize),
        };
        let mut metrics = result.metrics_json();
        metrics["stored_val_loss"] = json!(stored_val_loss);
        metrics["val_loss_abs_diff"] = json!(check.val_loss_diff());
        fs::write(cfg.output_dir.join(METRICS_JSON), serde_json::to_string_pretty(&metrics)?)?;
        let rows = vec![ReportRow {
            label: coeffs.to_string(),
            report: result.report(),
            note: None,
        }];
        let table = write_reports(&cfg.output_dir, &rows, Some(0))?;
        Ok((
            ExperimentSummary {
                results: vec![result],
                rows,
                best: Some(0),
                table,
                output_dir: cfg.output_dir.clone(),
            },
            check,
        ))
    })?
}

/// Recomputed validation results next to the values stored at save time.
#[derive(Clone, Debug)]
pub struct EvalCheck {
    pub val_loss: f64,
    pub stored_val_loss: Option<f64>,
    pub val_metrics: MetricReport,
    pub stored_val_metrics: Option<MetricReport>,
}

impl EvalCheck {
    pub fn val_loss_diff(&self) -> Option<f64> {
        self.stored_val_loss.map(|s| (s - self.val_loss).abs())
    }
}
