//! MSE training loop, optimizers, loss logging and the evaluation driver.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TrainingPair};
use crate::error::{Error, Result};
use crate::metrics::{l1_distance, renyi_entropy, DEFAULT_RENYI_ORDER};
use crate::nn::checkpoint::save_checkpoint;
use crate::nn::network::{forward_infer_with, infer, init_params, stack, Checkpoint, KlNet, NetworkSpec, MIN_INPUT_SIZE};
use crate::nn::{FeatureMap, Mode, Precision, Tensor};
use crate::signal::{MixtureSpec, Snr};
use crate::tfd::{cohen_tfd, wvd, KernelSpec, TfMatrix};

/// `mean((pred − target)²)` and its gradient `2(pred − target)/N²`.
pub fn mse_loss(pred: &TfMatrix, target: &TfMatrix) -> Result<(f64, TfMatrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(target.shape(), pred.shape()));
    }
    let cells = pred.data().len() as f64;
    let mut grad = TfMatrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / cells;
    }
    Ok((loss / cells, grad))
}

/// Batch MSE averaged over samples and cells.
pub fn mse_batch(pred: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(target.shape(), pred.shape()));
    }
    let count = pred.data.len() as f64;
    let mut grad = pred.zeros_like();
    let mut loss = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / count;
    }
    Ok((loss / count, grad))
}

/// `v ← μv + g; p ← p − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::shape(params.len(), (grads.len(), velocity.len())));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor optimizer state, in [`Checkpoint::trainable_mut`] order.
struct OptimizerState {
    kind: Optimizer,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, params: &[&mut Tensor]) -> Self {
        let zeros = || params.iter().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            kind,
            first: zeros(),
            second: match kind {
                Optimizer::Adam { .. } => zeros(),
                Optimizer::Sgd { .. } => Vec::new(),
            },
            steps: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor>, lr: f64) -> Result<()> {
        self.steps += 1;
        for (i, t) in params.into_iter().enumerate() {
            match self.kind {
                Optimizer::Sgd { momentum } => {
                    sgd_step(&mut t.data, &t.grad, &mut self.first[i], lr, momentum)?;
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.steps);
                    let c2 = 1.0 - beta2.powi(self.steps);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..t.data.len() {
                        let g = t.grad[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        t.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    /// Separate validation dataset; takes precedence over `validation_split`.
    pub validation: Option<PathBuf>,
    /// Fraction of the training dataset held out for validation.
    pub validation_split: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Arithmetic for the convolution products during training.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data/train"),
            validation: None,
            validation_split: 0.0,
            epochs: 150,
            batch_size: 16,
            learning_rate: 0.01,
            optimizer: Optimizer::default(),
            seed: 0,
            checkpoint_every: 10,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid("training config", reason));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.validation_split) {
            return fail(format!("validation split must lie in [0, 1), got {}", self.validation_split));
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                fail(format!("momentum must lie in [0, 1), got {momentum}"))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                fail("Adam needs beta1, beta2 in [0, 1) and eps > 0".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: Option<f64>,
}

pub const LOSS_LOG_HEADER: &str = "epoch,mean_train_loss,mean_val_loss";

pub fn format_loss_row(e: &EpochLoss) -> String {
    match e.val {
        Some(v) => format!("{},{},{}", e.epoch, e.train, v),
        None => format!("{},{},", e.epoch, e.train),
    }
}

pub fn format_loss_log(log: &[EpochLoss]) -> String {
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    for e in log {
        out.push_str(&format_loss_row(e));
        out.push('\n');
    }
    out
}

/// Where training artifacts go. Periodic checkpoints are written next to the
/// final one as `<stem>.epoch<NNNN>.kltf`.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

fn periodic_path(final_path: &Path, epoch: usize) -> PathBuf {
    let stem = final_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    final_path.with_file_name(format!("{stem}.epoch{epoch:04}.kltf"))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLoss>,
}

fn batch_maps(pairs: &[TrainingPair], idx: &[usize]) -> Result<(FeatureMap, FeatureMap)> {
    let inputs: Vec<&TfMatrix> = idx.iter().map(|&i| &pairs[i].input).collect();
    let targets: Vec<&TfMatrix> = idx.iter().map(|&i| &pairs[i].target).collect();
    Ok((stack(&inputs)?, stack(&targets)?))
}

/// Mean inference-mode loss over `pairs`.
pub fn validation_loss(
    ckpt: &Checkpoint,
    pairs: &[TrainingPair],
    batch_size: usize,
    precision: Precision,
) -> Result<f64> {
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = batch_maps(pairs, chunk)?;
        let pred = forward_infer_with(ckpt, &x, precision)?;
        total += mse_batch(&pred, &y)?.0 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains from pre-loaded pairs. `on_epoch` runs after every epoch with the
/// current checkpoint and the loss log so far.
pub fn train_pairs(
    config: &TrainConfig,
    spec: &NetworkSpec,
    train: &[TrainingPair],
    val: &[TrainingPair],
    mut on_epoch: impl FnMut(&Checkpoint, &[EpochLoss]) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("dataset", "no training pairs"));
    }
    let shape = train[0].input.shape();
    if shape.0 < MIN_INPUT_SIZE || shape.0 != shape.1 {
        return Err(Error::invalid(
            "dataset",
            format!("pairs must be square with N >= {MIN_INPUT_SIZE}, got {shape:?}"),
        ));
    }
    if let Some(p) = train.iter().chain(val).find(|p| p.input.shape() != shape || p.target.shape() != shape) {
        return Err(Error::shape(shape, p.input.shape()));
    }

    let mut ckpt = init_params(spec, config.seed)?;
    ckpt.meta.train_pairs = train.len();
    ckpt.meta.val_pairs = val.len();
    ckpt.meta.batch_size = config.batch_size;
    ckpt.meta.learning_rate = config.learning_rate;
    ckpt.meta.optimizer = Some(config.optimizer);
    let mut net = KlNet::new(ckpt)?.with_precision(config.precision);
    let mut opt = OptimizerState::new(config.optimizer, &net.checkpoint_mut().trainable_mut());
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = batch_maps(train, idx)?;
            net.checkpoint_mut().zero_grad();
            let pred = net.forward(&x, Mode::Train)?;
            let (loss, grad) = mse_batch(&pred, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            net.backward(&grad)?;
            opt.step(net.checkpoint_mut().trainable_mut(), config.learning_rate)?;
            total += loss * idx.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(validation_loss(net.checkpoint(), val, config.batch_size, config.precision)?)
        };
        let entry = EpochLoss {
            epoch,
            train: train_loss,
            val: val_loss,
        };
        log.push(entry);
        let ckpt = net.checkpoint_mut();
        ckpt.meta.epoch = epoch;
        ckpt.meta.steps += order.len().div_ceil(config.batch_size) as u64;
        ckpt.meta.loss_history.push(train_loss);
        if let Some(v) = val_loss {
            ckpt.meta.val_history.push(v);
        }
        log::info!(
            "epoch {epoch}/{}: train {train_loss:.6e} val {} ({:.1}s)",
            config.epochs,
            val_loss.map_or("-".into(), |v| format!("{v:.6e}")),
            started.elapsed().as_secs_f64()
        );
        on_epoch(net.checkpoint(), &log)?;
    }
    Ok(TrainReport {
        checkpoint: net.into_checkpoint(),
        log,
    })
}

/// Loads the configured dataset, trains, and writes the loss log after every
/// epoch plus periodic and final checkpoints.
pub fn train_model(config: &TrainConfig, spec: &NetworkSpec, outputs: &TrainOutputs) -> Result<TrainReport> {
    config.validate()?;
    spec.validate()?;
    let dataset = Dataset::open(&config.dataset)?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", format!("{} has no pairs", config.dataset.display())));
    }
    let mut train = dataset.load_pairs()?;
    let val = match &config.validation {
        Some(dir) => Dataset::open(dir)?.load_pairs()?,
        None => {
            let held_out = (train.len() as f64 * config.validation_split).round() as usize;
            if held_out >= train.len() {
                return Err(Error::invalid("training config", "validation split leaves no training pairs"));
            }
            train.split_off(train.len() - held_out)
        }
    };
    let on_epoch = |ckpt: &Checkpoint, log: &[EpochLoss]| -> Result<()> {
        if let Some(path) = &outputs.loss_log {
            write_atomic(path, format_loss_log(log).as_bytes())?;
        }
        let epoch = ckpt.meta.epoch;
        if let Some(path) = &outputs.checkpoint {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch < config.epochs {
                save_checkpoint(&periodic_path(path, epoch), ckpt)?;
            }
        }
        Ok(())
    };
    let report = train_pairs(config, spec, &train, &val, on_epoch)?;
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(path, &report.checkpoint)?;
    }
    Ok(report)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snrs: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub kernels: Vec<KernelSpec>,
    pub renyi_order: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snrs: vec![45.0, 35.0, 25.0, 15.0, 5.0, 0.0],
            trials: 100,
            seed: 0,
            kernels: vec![KernelSpec::AllPass, KernelSpec::cwd(), KernelSpec::ckd(), KernelSpec::bd()],
            renyi_order: DEFAULT_RENYI_ORDER,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snrs.is_empty() || self.snrs.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("evaluation", "SNR list must be non-empty and free of NaN"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("evaluation", "trials must be at least 1"));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        if !(self.renyi_order > 0.0) || self.renyi_order == 1.0 {
            return Err(Error::invalid("evaluation", "Renyi order must be positive and not 1"));
        }
        Ok(())
    }
}

pub const KL_METHOD: &str = "kl-tfd";

/// Report name of a baseline kernel; the all-pass kernel is the WVD itself.
pub fn method_name(k: &KernelSpec) -> &'static str {
    match k {
        KernelSpec::AllPass => "wvd",
        other => other.name(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub renyi_mean: f64,
    pub renyi_std: f64,
}

impl MethodStats {
    fn from_samples(l1: &[f64], renyi: &[f64]) -> Self {
        let (mean, std) = mean_std(l1);
        let (renyi_mean, renyi_std) = mean_std(renyi);
        MethodStats {
            mean,
            std,
            trials: l1.len(),
            renyi_mean,
            renyi_std,
        }
    }

    pub fn standard_error(&self) -> f64 {
        self.std / (self.trials as f64).sqrt()
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Method → SNR (dB, as a string key) → statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalReport(pub BTreeMap<String, BTreeMap<String, MethodStats>>);

pub fn snr_key(db: f64) -> String {
    format!("{db}")
}

impl EvalReport {
    pub fn get(&self, method: &str, snr_db: f64) -> Option<&MethodStats> {
        self.0.get(method)?.get(&snr_key(snr_db))
    }

    pub fn methods(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// Noise seed of trial `trial` at grid position `snr_index`.
pub fn trial_seed(master: u64, snr_index: usize, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((snr_index as u64) << 32) | trial as u64);
    rand::Rng::random(&mut rng)
}

struct TrialScores {
    l1: Vec<f64>,
    renyi: Vec<f64>,
}

fn score_trial(
    mixture: &MixtureSpec,
    snr: Snr,
    seed: u64,
    config: &EvalConfig,
    ckpt: Option<&Checkpoint>,
) -> Result<TrialScores> {
    let noisy = MixtureSpec {
        snr,
        seed,
        ..mixture.clone()
    };
    let model = noisy.ideal_tfd()?;
    let z = noisy.synthesize()?;
    let w = wvd(&z)?;
    let mut tfds = Vec::with_capacity(config.kernels.len() + 1);
    for k in &config.kernels {
        tfds.push(match k {
            KernelSpec::AllPass => w.clone(),
            other => cohen_tfd(&z, other)?,
        });
    }
    if let Some(ckpt) = ckpt {
        tfds.push(infer(ckpt, &w)?);
    }
    let mut scores = TrialScores {
        l1: Vec::with_capacity(tfds.len()),
        renyi: Vec::with_capacity(tfds.len()),
    };
    for t in &tfds {
        scores.l1.push(l1_distance(t, &model)?);
        scores.renyi.push(renyi_entropy(t, config.renyi_order)?);
    }
    Ok(scores)
}

/// Re-noises the test mixtures at every SNR of the grid and scores each
/// baseline kernel plus, when given, the trained network. Trial `t` uses
/// mixture `t mod len` with its own noise seed.
pub fn evaluate_model(ckpt: Option<&Checkpoint>, testset: &[MixtureSpec], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if testset.is_empty() {
        return Err(Error::invalid("evaluation", "empty test set"));
    }
    if let Some(ckpt) = ckpt {
        ckpt.validate()?;
        let n = testset[0].n;
        if n < MIN_INPUT_SIZE {
            return Err(Error::invalid(
                "evaluation",
                format!("test signals of length {n} are below the network minimum {MIN_INPUT_SIZE}"),
            ));
        }
        if ckpt.blocks.first().is_some_and(|b| b.bn.updates == 0) {
            return Err(Error::UntrainedBatchNorm);
        }
    }
    let mut names: Vec<&str> = config.kernels.iter().map(method_name).collect();
    if ckpt.is_some() {
        names.push(KL_METHOD);
    }
    let mut report = EvalReport::default();
    for (si, &db) in config.snrs.iter().enumerate() {
        let snr = Snr::from_db(db);
        let trials = (0..config.trials)
            .into_par_iter()
            .map(|t| score_trial(&testset[t % testset.len()], snr, trial_seed(config.seed, si, t), config, ckpt))
            .collect::<Result<Vec<_>>>()?;
        for (m, name) in names.iter().enumerate() {
            let l1: Vec<f64> = trials.iter().map(|s| s.l1[m]).collect();
            let renyi: Vec<f64> = trials.iter().map(|s| s.renyi[m]).collect();
            report
                .0
                .entry(name.to_string())
                .or_default()
                .insert(snr_key(db), MethodStats::from_samples(&l1, &renyi));
        }
    }
    Ok(report)
}
