//! Small end-to-end training runs on synthetic data.

use std::path::Path;

use cetc_core::checkpoint;
use cetc_core::data::{Dataset, PreprocessConfig};
use cetc_core::train::{evaluate, with_threads, TrainConfig, TrainOutcome, Trainer};
use cetc_core::{Cetc, EnsembleCoefficients, ModelConfig};

pub fn train_config(model: &ModelConfig, batch_size: usize, epochs: usize, max_steps: Option<usize>) -> TrainConfig {
    TrainConfig {
        batch_size,
        epochs,
        max_steps,
        preprocess: PreprocessConfig {
            image_size: model.image_size,
            ..PreprocessConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub struct OverfitRun {
    pub initial_loss: f64,
    /// Accuracy on the training images (no augmentation) after each epoch.
    pub train_acc: Vec<f64>,
    pub steps: usize,
}

impl OverfitRun {
    pub fn best_acc(&self) -> f64 {
        self.train_acc.iter().copied().fold(0.0, f64::max)
    }
}

/// Fits `n_images` synthetic images for at most `steps` steps, scoring the
/// training set itself after every epoch.
pub fn overfit(config: ModelConfig, n_images: usize, batch: usize, steps: usize, seed: u64) -> OverfitRun {
    let model = Cetc::new(config).unwrap();
    let data = Dataset::synthetic(seed, n_images / 2, model.config.image_size);
    let all: Vec<usize> = (0..data.len()).collect();
    let cfg = train_config(&model.config, batch, usize::MAX, Some(steps));
    let trainer = Trainer::new(&model, EnsembleCoefficients::EQUAL, cfg, seed);
    let out = with_threads(true, || trainer.fit(&data, &all, &all, model.init_params(seed).unwrap()))
        .unwrap()
        .unwrap();
    OverfitRun {
        initial_loss: out.initial_loss,
        train_acc: out.log.iter().map(|e| e.val_acc).collect(),
        steps: out.steps,
    }
}

/// The micro model trained for `epochs` on a fixed 24/8 split.
pub fn short_run(seed: u64, epochs: usize, out_dir: Option<&Path>) -> (Cetc, Dataset, Vec<usize>, TrainOutcome) {
    let model = Cetc::new(ModelConfig::micro()).unwrap();
    let data = Dataset::synthetic(11, 16, model.config.image_size);
    let train: Vec<usize> = (0..24).collect();
    let val: Vec<usize> = (24..32).collect();
    let cfg = train_config(&model.config, 8, epochs, None);
    let mut trainer = Trainer::new(&model, EnsembleCoefficients::EQUAL, cfg, seed);
    if let Some(dir) = out_dir {
        trainer = trainer.with_output(dir);
    }
    let out = with_threads(true, || trainer.fit(&data, &train, &val, model.init_params(seed).unwrap()))
        .unwrap()
        .unwrap();
    drop(trainer);
    (model, data, val, out)
}

/// Whether two runs produced bit-identical parameters and epoch logs.
pub fn runs_identical(a: &TrainOutcome, b: &TrainOutcome) -> bool {
    let params_eq = a.final_params.len() == b.final_params.len()
        && a.final_params.iter().zip(b.final_params.iter()).all(|((na, ta), (nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let logs_eq = a.log.len() == b.log.len()
        && a.log.iter().zip(&b.log).all(|(x, y)| {
            x.lr.to_bits() == y.lr.to_bits()
                && x.train_loss.to_bits() == y.train_loss.to_bits()
                && x.val_loss.to_bits() == y.val_loss.to_bits()
        });
    params_eq && logs_eq
}

/// Validation loss recomputed from the saved best checkpoint, and the value
/// stored in its metadata, next to the trainer's own figure.
pub struct RoundTrip {
    pub in_memory: f64,
    pub stored: f64,
    pub reloaded: f64,
}

pub fn checkpoint_round_trip(dir: &Path) -> RoundTrip {
    let (model, data, val, out) = short_run(5, 2, Some(dir));
    let ckpt = checkpoint::load(out.checkpoint.as_ref().expect("checkpoint written")).unwrap();
    let cfg = train_config(&model.config, 8, 1, None);
    let reloaded = evaluate(&model, &ckpt.params, &EnsembleCoefficients::EQUAL, &data, &val, &cfg).unwrap();
    RoundTrip {
        in_memory: out.best_val.loss,
        stored: ckpt.metadata["val_loss"].as_f64().unwrap(),
        reloaded: reloaded.loss,
    }
}
