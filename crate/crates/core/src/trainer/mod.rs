//! Adam training loop with best-validation checkpointing, and checkpoint
//! evaluation.

pub mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

pub use optim::{Adam, AdamConfig};

use crate::data::{Dataset, Sample};
use crate::error::{CtsError, Result};
use crate::metrics::{evaluate, EvalReport, LabelMap};
use crate::model::{argmax_channels, combined_loss, load_checkpoint, loss_parts, save_checkpoint, CheckpointMeta, LossConfig, SegModel};
use crate::tensor::{RngState, Tape, Tensor};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Directory for the best checkpoint and the log; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch: 8,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CtsError::config("epochs must be at least 1"));
        }
        if self.batch == 0 {
            return Err(CtsError::config("batch size must be at least 1"));
        }
        self.adam.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Checkpoint written at the end of this epoch, if val loss improved.
    pub ckpt: Option<PathBuf>,
    pub seconds: f64,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,ckpt,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.val_loss,
            self.ckpt.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.seconds
        )
    }
}

pub fn records_to_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from(TrainRecord::CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// State at the end of the best epoch.
    pub best_model: SegModel<f32>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Stacks samples into `[N, C, H, W]` and flat `[N, H, W]` labels.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| CtsError::usage("empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut labels = Vec::with_capacity(samples.len() * first.mask.labels.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(CtsError::data(format!(
                "{}: image shape {:?} differs from {:?} in the same batch",
                s.id,
                s.image.shape(),
                shape
            )));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask.labels);
    }
    let t = Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((t, labels))
}

/// Checks that the model accepts the samples and their classes.
pub fn check_compatible(model: &SegModel<f32>, classes: usize, channels: usize, samples: &[Sample]) -> Result<()> {
    let c = model.config();
    if c.classes != classes {
        return Err(CtsError::config(format!("model predicts {} classes, dataset has {}", c.classes, classes)));
    }
    if c.in_channels != channels {
        return Err(CtsError::config(format!("model takes {} input channels, dataset has {}", c.in_channels, channels)));
    }
    if let Some(s) = samples.iter().find(|s| (s.width(), s.height()) != (c.width, c.height)) {
        return Err(CtsError::config(format!(
            "model input is {}x{} but sample {} is {}x{}",
            c.width,
            c.height,
            s.id,
            s.width(),
            s.height()
        )));
    }
    Ok(())
}

/// Mean eval-mode loss per sample.
pub fn validation_loss(model: &mut SegModel<f32>, samples: &[Sample], batch: usize, loss: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(CtsError::data("validation split is empty"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = make_batch(&refs)?;
        let logits = model.predict(&x)?;
        total += loss_parts(&logits, &y, loss)?.total * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Eval-mode argmax label maps, one per sample.
pub fn predict_maps(model: &mut SegModel<f32>, samples: &[Sample], batch: usize) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = make_batch(&refs)?;
        let labels = argmax_channels(&model.predict(&x)?);
        let hw = labels.len() / chunk.len();
        for (s, l) in chunk.iter().zip(labels.chunks(hw)) {
            out.push(LabelMap { width: s.width(), height: s.height(), labels: l.to_vec() });
        }
    }
    Ok(out)
}

pub fn evaluate_model(model: &mut SegModel<f32>, samples: &[Sample], classes: usize, mask_empty: bool) -> Result<EvalReport> {
    let preds = predict_maps(model, samples, 8)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    evaluate(&ids, &preds, &gts, classes, mask_empty)
}

/// Loads a checkpoint and scores it on `samples`.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    dataset: &Dataset,
    samples: &[Sample],
    mask_empty: bool,
) -> Result<(EvalReport, CheckpointMeta)> {
    let (mut model, meta) = load_checkpoint::<f32>(ckpt)?;
    check_compatible(&model, dataset.classes, dataset.channels, samples)?;
    Ok((evaluate_model(&mut model, samples, dataset.classes, mask_empty)?, meta))
}

/// Trains `model` in place; `on_epoch` sees each record as it is produced.
pub fn train(
    model: &mut SegModel<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(CtsError::data(format!(
            "training needs nonempty train and val splits, got {} and {}",
            dataset.train.len(),
            dataset.val.len()
        )));
    }
    check_compatible(model, dataset.classes, dataset.channels, &dataset.train)?;
    check_compatible(model, dataset.classes, dataset.channels, &dataset.val)?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CtsError::io(dir, e))?;
    }

    let root = RngState::new(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, SegModel<f32>)> = None;
    let mut best_path = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut root.derive(2 * epoch as u64));
        let mut dropout_rng = root.derive(2 * epoch as u64 + 1);
        let mut sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &dataset.train[i]).collect();
            let (x, y) = make_batch(&refs)?;
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let xv = tape.constant(x);
            let out = model.forward(&mut tape, &binding, xv, true, &mut dropout_rng)?;
            let loss = combined_loss(&mut tape, out.logits, &y, &cfg.loss)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(CtsError::Numerical(format!("non-finite loss {} at epoch {}, batch {}", value, epoch, bi)));
            }
            tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate_grads(&tape, &binding);
            adam.step(&mut model.store)?;
            sum += value * idx.len() as f64;
        }
        let train_loss = sum / dataset.train.len() as f64;
        let val_loss = validation_loss(model, &dataset.val, cfg.batch, &cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(CtsError::Numerical(format!("non-finite validation loss at epoch {}", epoch)));
        }
        let improved = best.as_ref().is_none_or(|(_, v, _)| val_loss < *v);
        let mut ckpt = None;
        if improved {
            if let Some(dir) = &cfg.out_dir {
                let path = dir.join(BEST_CHECKPOINT);
                save_checkpoint(&path, model, &CheckpointMeta { epoch, val_loss, seed: cfg.seed })?;
                ckpt = Some(path.clone());
                best_path = Some(path);
            }
            best = Some((epoch, val_loss, model.clone()));
        }
        let record = TrainRecord { epoch, train_loss, val_loss, ckpt, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&record);
        records.push(record);
        if let Some(dir) = &cfg.out_dir {
            let p = dir.join(TRAIN_LOG);
            std::fs::write(&p, records_to_csv(&records)).map_err(|e| CtsError::io(&p, e))?;
        }
    }
    let (best_epoch, best_val_loss, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { records, best_epoch, best_val_loss, best_model, best_checkpoint: best_path })
}
