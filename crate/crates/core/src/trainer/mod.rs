//! Training, evaluation and prediction drivers.

mod checkpoint;
mod config;
mod metrics;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Payload, FORMAT_VERSION, MAGIC};
pub use config::{config_hash, parse_pairs, DataSource, RunConfig, KEYS};
pub use metrics::{argmax, read_records, ConfusionMatrix, EpochRecord, MetricsLog, CSV_HEADER};

use crate::data::{
    augment, batches, load_dataset, resize_bilinear, split, split_stratified, synth_dataset, Dataset, LoadOptions,
    PnmImage,
};
use crate::error::{Error, Result};
use crate::graph::NormMode;
use crate::model::Model;
use crate::optim::{lr_at, zero_grads, AdamW};
use crate::tensor::Tensor;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Loads or synthesises the corpus named by `cfg` and splits it.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let size = cfg.model.input_size;
    let full = match cfg.data_source()? {
        DataSource::Directory(root) => {
            load_dataset(&root, &LoadOptions { image_size: size, skip_bad: cfg.skip_bad_images })?
        }
        DataSource::Synthetic { per_class, classes, seed } => synth_dataset(per_class, classes, size, seed)?,
    };
    if cfg.stratified {
        split_stratified(&full, cfg.train_fraction, cfg.split_seed)
    } else {
        split(&full, cfg.train_fraction, cfg.split_seed)
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub best_test_acc: f64,
    /// 0 until an evaluation has happened.
    pub best_epoch: usize,
    pub class_names: Vec<String>,
    pub config_text: String,
}

impl TrainingState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(config_hash(&self.model.config));
        for (name, e) in self.model.params.iter() {
            ck.insert(
                format!("param/{name}"),
                Payload::F64 { shape: e.tensor.shape().to_vec(), data: e.tensor.data().to_vec() },
            );
        }
        for (name, m) in &self.optimizer.moments {
            ck.insert(format!("adam/m/{name}"), Payload::F64 { shape: vec![m.m.len()], data: m.m.clone() });
            ck.insert(format!("adam/v/{name}"), Payload::F64 { shape: vec![m.v.len()], data: m.v.clone() });
        }
        let opt = &self.optimizer;
        ck.insert("adam/t", Payload::U64(vec![opt.t]));
        ck.insert("adam/hyper", Payload::F64 { shape: vec![3], data: vec![opt.beta1, opt.beta2, opt.eps] });
        ck.insert("meta/epoch", Payload::U64(vec![self.epoch as u64]));
        ck.insert("meta/global_step", Payload::U64(vec![self.global_step]));
        ck.insert("meta/best_test_acc", Payload::F64 { shape: vec![1], data: vec![self.best_test_acc] });
        ck.insert("meta/best_epoch", Payload::U64(vec![self.best_epoch as u64]));
        ck.insert("meta/class_names", Payload::Text(self.class_names.join("\n")));
        ck.insert("meta/config", Payload::Text(self.config_text.clone()));
        ck
    }

    /// Rebuilds a state from a checkpoint. The stored config describes the
    /// architecture; its hash must match the header unless `force` is set.
    pub fn from_checkpoint(ck: &Checkpoint, force: bool) -> Result<Self> {
        let config_text = ck.text("meta/config")?.to_string();
        let run = RunConfig::from_text(&config_text)?;
        let class_names: Vec<String> = ck.text("meta/class_names")?.split('\n').map(str::to_string).collect();
        let model_cfg = run.model_for(class_names.len());
        ck.check_hash(config_hash(&model_cfg), force)?;

        let mut model = Model::new(model_cfg)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let (shape, data) = ck.f64s(&format!("param/{name}"))?;
            let t = model.params.tensor_mut(name)?;
            if shape != t.shape() {
                return Err(Error::Corrupt(format!("param/{name}: shape {shape:?}, model expects {:?}", t.shape())));
            }
            t.data_mut().copy_from_slice(data);
        }
        let mut optimizer = AdamW::new(&model.params);
        let hyper = ck.f64s("adam/hyper")?.1;
        let &[beta1, beta2, eps] = hyper else {
            return Err(Error::Corrupt("adam/hyper must hold three values".into()));
        };
        (optimizer.beta1, optimizer.beta2, optimizer.eps) = (beta1, beta2, eps);
        optimizer.t = ck.u64_scalar("adam/t")?;
        for (name, m) in optimizer.moments.iter_mut() {
            for (slot, key) in [(&mut m.m, "m"), (&mut m.v, "v")] {
                let data = ck.f64s(&format!("adam/{key}/{name}"))?.1;
                if data.len() != slot.len() {
                    return Err(Error::Corrupt(format!("adam/{key}/{name} has {} values, expected {}", data.len(), slot.len())));
                }
                slot.copy_from_slice(data);
            }
        }
        Ok(Self {
            model,
            optimizer,
            epoch: ck.u64_scalar("meta/epoch")? as usize,
            global_step: ck.u64_scalar("meta/global_step")?,
            best_test_acc: ck.f64s("meta/best_test_acc")?.1.first().copied().unwrap_or(0.0),
            best_epoch: ck.u64_scalar("meta/best_epoch")? as usize,
            class_names,
            config_text,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write_atomic(path)
    }

    pub fn load(path: &Path, force: bool) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?, force)
    }

    /// The run configuration stored with the state.
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_text(&self.config_text)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of initialising.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs have completed.
    pub stop_after: Option<usize>,
    /// Accept a checkpoint whose architecture hash differs.
    pub force: bool,
    /// Poisons one gradient entry at this global step.
    #[doc(hidden)]
    pub inject_nan_at_step: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Records written by this invocation.
    pub records: Vec<EpochRecord>,
    pub state: TrainingState,
}

/// Config text stored in checkpoints. The output directory is left out so
/// checkpoints stay relocatable and identical runs match byte for byte.
fn stored_config_text(cfg: &RunConfig) -> String {
    RunConfig { out_dir: RunConfig::default().out_dir, ..cfg.clone() }.to_text()
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16] = 0xA5;
    ChaCha8Rng::from_seed(key)
}

fn check_gradients(model: &Model, epoch: usize, step: u64) -> Result<()> {
    for (name, e) in model.params.iter() {
        if let Some(g) = &e.tensor.grad {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {name}[{i}] = {} at epoch {}, step {step}",
                    g[i],
                    epoch + 1
                )));
            }
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    train_with(cfg, opts, |_| {})
}

/// Runs the training loop, calling `on_record` after each logged epoch.
pub fn train_with(cfg: &RunConfig, opts: &TrainOptions, mut on_record: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, test_set) = prepare_data(cfg)?;
    if train_set.is_empty() {
        return Err(Error::Ingest("training split is empty".into()));
    }
    let model_cfg = cfg.model_for(train_set.num_classes());
    fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join(METRICS_FILE);

    let (mut state, log) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            ck.check_hash(config_hash(&model_cfg), opts.force)?;
            let mut state = TrainingState::from_checkpoint(&ck, opts.force)?;
            if state.class_names != train_set.class_names {
                return Err(Error::ConfigMismatch { found: ck.config_hash, expected: config_hash(&model_cfg) });
            }
            state.config_text = stored_config_text(cfg);
            let log = MetricsLog::resume(&log_path, state.epoch)?;
            (state, log)
        }
        None => {
            let model = Model::new(model_cfg)?;
            let optimizer = AdamW::new(&model.params);
            let state = TrainingState {
                model,
                optimizer,
                epoch: 0,
                global_step: 0,
                best_test_acc: 0.0,
                best_epoch: 0,
                class_names: train_set.class_names.clone(),
                config_text: stored_config_text(cfg),
            };
            (state, MetricsLog::create(&log_path)?)
        }
    };

    let sched = &cfg.schedule;
    let steps_per_epoch = train_set.len().div_ceil(sched.batch_size) as u64;
    let last_epoch = opts.stop_after.map_or(sched.total_epochs, |s| s.min(sched.total_epochs));
    let mut records = Vec::new();

    while state.epoch < last_epoch {
        let started = Instant::now();
        let epoch = state.epoch;
        let mut aug_rng = epoch_rng(cfg.seed, epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);

        for (images, labels) in batches(&train_set, sched.batch_size, true, cfg.seed, epoch as u64)? {
            let images = augment(&images, cfg.augment, &mut aug_rng)?;
            let lr = lr_at(state.global_step as f64 / steps_per_epoch as f64, sched)?;
            zero_grads(&mut state.model.params);
            let out = state.model.train_step_grads(&images, &labels, NormMode::Train).map_err(|e| match e {
                Error::Numerical(m) => {
                    Error::Numerical(format!("{m} (epoch {}, step {})", epoch + 1, state.global_step))
                }
                other => other,
            })?;
            if !out.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {} at epoch {}, step {}",
                    out.loss,
                    epoch + 1,
                    state.global_step
                )));
            }
            if opts.inject_nan_at_step == Some(state.global_step) {
                if let Some((_, e)) = state.model.params.iter_mut().find(|(_, e)| e.role.trainable()) {
                    e.tensor.grad.as_mut().expect("gradients populated")[0] = f64::NAN;
                }
            }
            check_gradients(&state.model, epoch, state.global_step)?;
            state.optimizer.step(&mut state.model.params, lr, sched.weight_decay)?;
            state.global_step += 1;

            let k = state.model.config.num_classes;
            let logits = out.logits.data();
            correct += labels.iter().enumerate().filter(|(i, &y)| argmax(&logits[i * k..(i + 1) * k]) == y).count();
            loss_sum += out.loss * labels.len() as f64;
        }
        state.epoch += 1;

        let done = state.epoch;
        let evaluate_now = done % cfg.eval_every == 0 || done == last_epoch;
        if evaluate_now {
            let test_acc = if test_set.is_empty() {
                0.0
            } else {
                evaluate(&state.model, &test_set, sched.batch_size)?.accuracy
            };
            let record = EpochRecord {
                epoch: done,
                train_loss: loss_sum / train_set.len() as f64,
                train_acc: correct as f64 / train_set.len() as f64,
                test_acc,
                lr: lr_at(done as f64, sched)?,
                seconds: if cfg.log_seconds { started.elapsed().as_secs_f64() } else { 0.0 },
            };
            let improved = state.best_epoch == 0 || test_acc > state.best_test_acc;
            if improved {
                state.best_test_acc = test_acc;
                state.best_epoch = done;
            }
            state.save(&cfg.out_dir.join(LAST_CHECKPOINT))?;
            if improved {
                state.save(&cfg.out_dir.join(BEST_CHECKPOINT))?;
            }
            log.append(&record)?;
            on_record(&record);
            records.push(record);
        } else {
            state.save(&cfg.out_dir.join(LAST_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome { records, state })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Eval-mode accuracy; predictions are argmax with ties to the lowest index.
pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let k = model.config.num_classes;
    if ds.num_classes() > k {
        return Err(Error::Config(format!("dataset has {} classes, model predicts {k}", ds.num_classes())));
    }
    let mut confusion = ConfusionMatrix::new(k);
    for (images, labels) in batches(ds, batch_size, false, 0, 0)? {
        let logits = model.logits(&images)?;
        for (i, &y) in labels.iter().enumerate() {
            confusion.add(y, argmax(&logits.data()[i * k..(i + 1) * k]));
        }
    }
    Ok(Evaluation { accuracy: confusion.accuracy(), confusion })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_index: usize,
    pub class_name: String,
    pub probabilities: Vec<f64>,
}

/// Shift-stabilised softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|e| e / sum).collect()
}

pub fn predict_tensor(model: &Model, class_names: &[String], pixels: &Tensor) -> Result<Prediction> {
    let size = model.config.input_size;
    let pixels = resize_bilinear(pixels, size, size)?;
    let logits = model.logits(&pixels.reshaped([1, 3, size, size])?)?;
    let probabilities = softmax(logits.data());
    let class_index = argmax(logits.data());
    let class_name = class_names.get(class_index).cloned().unwrap_or_else(|| class_index.to_string());
    Ok(Prediction { class_index, class_name, probabilities })
}

/// Classifies one PPM/PGM file.
pub fn predict(model: &Model, class_names: &[String], image_path: &Path) -> Result<Prediction> {
    let bytes = fs::read(image_path)?;
    let img = PnmImage::decode(&bytes).map_err(|message| Error::Image { path: image_path.to_path_buf(), message })?;
    predict_tensor(model, class_names, &img.to_tensor())
}

