//! Minibatch training with Adam, plateau scheduling and best-validation checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::Graph;
use crate::checkpoint;
use crate::data::{Dataset, PreprocessConfig, POSITIVE};
use crate::decoder::EnsembleCoefficients;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::model::Cetc;
use crate::optim::{Adam, AdamConfig, PlateauScheduler};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,train_loss,val_loss,val_acc";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const EPOCH_LOG: &str = "epoch_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.003,
            epochs: 20,
            batch_size: 64,
            plateau_factor: 0.5,
            plateau_patience: 5,
            max_steps: None,
            adam: AdamConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        let checks = [
            (self.lr0 > 0.0 && self.lr0.is_finite(), "lr0 must be positive"),
            (self.epochs > 0, "epochs must be positive"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.plateau_factor > 0.0 && self.plateau_factor < 1.0, "plateau_factor must be in (0, 1)"),
            (self.max_steps != Some(0), "max_steps must be positive when set"),
            ((0.0..=1.0).contains(&p.hflip_prob), "hflip_prob must be in [0, 1]"),
            (p.image_size > 0, "image_size must be positive"),
            (p.std.iter().all(|&s| s > 0.0), "normalization std must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(msg.to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.17e},{:.17e},{:.17e}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.val_acc
        )
    }
}

/// Mean loss, confusion matrix and raw outputs over a set of examples.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub labels: Vec<usize>,
    pub logits: Vec<f64>,
}

impl Evaluation {
    pub fn report(&self) -> MetricReport {
        self.confusion.report()
    }

    pub fn accuracy(&self) -> f64 {
        self.report().acc.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best_params: ParamStore,
    pub final_params: ParamStore,
    pub best_epoch: usize,
    pub best_val: Evaluation,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    /// Loss of the very first minibatch, before any update.
    pub initial_loss: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Run `f` on a single-threaded pool when `deterministic` is set. Kernels
/// already reduce in a fixed order, so this mainly pins scheduling.
pub fn with_threads<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> Result<T> {
    if deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        Ok(pool.install(f))
    } else {
        Ok(f())
    }
}

fn non_finite(g: &Graph) -> Error {
    match g.first_non_finite() {
        Some((node, op)) => Error::NonFinite { op, node: node.index() },
        None => Error::NonFinite {
            op: "unknown",
            node: usize::MAX,
        },
    }
}

pub fn evaluate(
    model: &Cetc,
    params: &ParamStore,
    coeffs: &EnsembleCoefficients,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut labels = Vec::with_capacity(indices.len());
    let mut logits = Vec::with_capacity(indices.len() * 2);
    for chunk in indices.chunks(cfg.batch_size) {
        let (x, y) = data.batch(chunk, &cfg.preprocess, false, &mut rng)?;
        let mut g = Graph::inference();
        let xi = g.constant(x);
        let out = model.forward(&mut g, params, xi, coeffs)?;
        let loss = g.softmax_cross_entropy(out.logits, &y)?;
        let l = g.value(loss).data()[0];
        if !l.is_finite() {
            return Err(non_finite(&g));
        }
        total += l * chunk.len() as f64;
        logits.extend_from_slice(g.value(out.logits).data());
        labels.extend(y);
    }
    let classes = model.config.transformer.num_classes;
    let confusion = ConfusionMatrix::from_logits(&labels, &logits, classes, POSITIVE)?;
    Ok(Evaluation {
        loss: total / indices.len() as f64,
        confusion,
        labels,
        logits,
    })
}

/// One forward/backward pass; returns the loss and parameter gradients.
pub fn loss_and_grads(
    model: &Cetc,
    params: &ParamStore,
    coeffs: &EnsembleCoefficients,
    x: Tensor,
    labels: &[usize],
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let mut g = Graph::new();
    let xi = g.constant(x);
    let out = model.forward(&mut g, params, xi, coeffs)?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    let l = g.value(loss).data()[0];
    if !l.is_finite() {
        return Err(non_finite(&g));
    }
    let grads = g.backward(loss)?.param_grads(&g);
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite {
            op: "backward",
            node: g.bound_params().get(name).map_or(usize::MAX, |n| n.index()),
        });
    }
    Ok((l, grads))
}

pub struct Trainer<'a> {
    pub model: &'a Cetc,
    pub coeffs: EnsembleCoefficients,
    pub config: TrainConfig,
    pub seed: u64,
    /// Where to write the epoch log and best checkpoint; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Extra entries stored in the checkpoint metadata.
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Cetc, coeffs: EnsembleCoefficients, config: TrainConfig, seed: u64) -> Self {
        Self {
            model,
            coeffs,
            config,
            seed,
            out_dir: None,
            metadata: serde_json::Map::new(),
        }
    }

    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn fit(&self, data: &Dataset, train: &[usize], val: &[usize], init: ParamStore) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        if cfg.preprocess.image_size != self.model.config.image_size {
            return Err(Error::Config(format!(
                "preprocess image_size {} differs from model image_size {}",
                cfg.preprocess.image_size, self.model.config.image_size
            )));
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training needs non-empty train and validation splits".into()));
        }
        let mut log_file = match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let mut f = fs::File::create(dir.join(EPOCH_LOG))?;
                writeln!(f, "{EPOCH_LOG_HEADER}")?;
                Some(f)
            }
            None => None,
        };

        let mut params = init;
        let mut adam = Adam::new(cfg.adam);
        let mut sched = PlateauScheduler::new(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience);
        let mut order = train.to_vec();
        let mut log = Vec::new();
        let mut best: Option<(usize, Evaluation, ParamStore)> = None;
        let mut steps = 0usize;
        let mut initial_loss = None;
        let mut checkpoint_path = None;

        'epochs: for epoch in 0..cfg.epochs {
            let lr = sched.lr;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            let (mut loss_sum, mut seen) = (0.0, 0usize);
            let mut stop = false;
            for chunk in order.chunks(cfg.batch_size) {
                let (x, y) = data.batch(chunk, &cfg.preprocess, true, &mut rng)?;
                let (l, grads) = loss_and_grads(self.model, &params, &self.coeffs, x, &y)?;
                initial_loss.get_or_insert(l);
                adam.step(&mut params, &grads, lr)?;
                params.round_to_f32();
                loss_sum += l * chunk.len() as f64;
                seen += chunk.len();
                steps += 1;
                if cfg.max_steps.is_some_and(|m| steps >= m) {
                    stop = true;
                    break;
                }
            }
            let val_eval = evaluate(self.model, &params, &self.coeffs, data, val, cfg)?;
            let entry = EpochLog {
                epoch,
                lr,
                train_loss: loss_sum / seen as f64,
                val_loss: val_eval.loss,
                val_acc: val_eval.accuracy(),
            };
            info!(
                "epoch {epoch}: lr {lr:e} train_loss {:.6} val_loss {:.6} val_acc {:.4}",
                entry.train_loss, entry.val_loss, entry.val_acc
            );
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", entry.csv_row())?;
            }
            log.push(entry);
            sched.observe(val_eval.loss);

            if best.as_ref().is_none_or(|(_, b, _)| val_eval.loss < b.loss) {
                if let Some(dir) = &self.out_dir {
                    let path = dir.join(BEST_CHECKPOINT);
                    checkpoint::save(&path, &params, &self.checkpoint_metadata(epoch, &val_eval))?;
                    checkpoint_path = Some(path);
                }
                best = Some((epoch, val_eval, params.clone()));
            }
            if stop {
                break 'epochs;
            }
        }

        let (best_epoch, best_val, best_params) = best.ok_or_else(|| Error::Data("no epoch completed".into()))?;
        Ok(TrainOutcome {
            best_params,
            final_params: params,
            best_epoch,
            best_val,
            log,
            steps,
            initial_loss: initial_loss.unwrap_or(f64::NAN),
            checkpoint: checkpoint_path,
        })
    }

    fn checkpoint_metadata(&self, epoch: usize, val: &Evaluation) -> serde_json::Map<String, serde_json::Value> {
        let mut meta = self.metadata.clone();
        meta.insert("epoch".into(), json!(epoch));
        meta.insert("seed".into(), json!(self.seed));
        meta.insert("coefficients".into(), json!(self.coeffs.to_string()));
        meta.insert("model_config".into(), json!(self.model.config));
        meta.insert("val_loss".into(), json!(val.loss));
        meta.insert("val_confusion".into(), json!(val.confusion));
        meta.insert("val_metrics".into(), json!(val.report()));
        meta
    }
}

/// Parse an epoch log written by [`Trainer::fit`].
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(EPOCH_LOG_HEADER) {
        return Err(Error::Data(format!("{} is not an epoch log", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad epoch log line: {line}")))
            };
            Ok(EpochLog {
                epoch: num(0)? as usize,
                lr: num(1)?,
                train_loss: num(2)?,
                val_loss: num(3)?,
                val_acc: num(4)?,
            })
        })
        .collect()
}
