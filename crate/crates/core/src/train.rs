//! Training loop: joint cascade optimisation, epoch history, early
//! stopping, dataset splitting and k-fold cross-validation.
//!
//! Each sample records its own tape; gradients are averaged over the
//! batch before one optimizer step, and the batch-norm statistics queued
//! during the forwards are folded into the running estimates afterwards,
//! in recording order. With the seed fixed, initialisation, shuffling
//! and dropout all draw from counter-derived streams, so two runs of the
//! same configuration produce byte-identical checkpoints.
//!
//! The history is a flat list of per-epoch records — one `train` and one
//! `val` line per epoch — rendering to the plain-text key-value format
//! the CLI appends to `history.txt`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::loss::{cascade_loss, segmentation_loss};
use crate::metrics::{Counts, MetricsReport, METRIC_THRESHOLD};
use crate::network::{Mode, Model, ModelKind, NetworkConfig};
use crate::norm::update_running;
use crate::optim::{GradAccum, Optimizer, OptimizerKind};
use crate::params::ParamStore;
use crate::rng;
use crate::synth::SegmentationSample;
use crate::tape::{BnUpdate, Grads, Reduction, Tape};
use crate::tensor::{Real, Tensor};

/// Optimisation schedule and sampling options.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    pub loss_reduction: Reduction,
    /// Monte-Carlo forward passes per uncertainty map.
    pub mc_samples: usize,
    /// Training-time dropout rate (sampling-time dropout lives in the
    /// network configuration).
    pub dropout_rate: Real,
    pub kfold: Option<usize>,
    pub optimizer: OptimizerKind,
    pub val_fraction: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-3,
            early_stop_patience: None,
            seed: 0,
            loss_reduction: Reduction::Mean,
            mc_samples: 20,
            dropout_rate: 0.0,
            kfold: None,
            optimizer: OptimizerKind::Adam,
            val_fraction: 0.3,
        }
    }
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::Sum => "sum",
    }
}

fn parse_reduction(v: &str) -> Result<Reduction> {
    match v {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        other => Err(CoreError::config(format!(
            "loss_reduction: expected mean|sum, got '{other}'"
        ))),
    }
}

fn parse_optional(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "none" {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| CoreError::config(format!("{key}: expected an integer or 'none', got '{v}'")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::config(
                "epochs and batch_size must be positive",
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(CoreError::config(format!(
                "learning_rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.mc_samples < 2 {
            return Err(CoreError::config(format!(
                "mc_samples must be >= 2, got {}",
                self.mc_samples
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::config(format!(
                "dropout_rate {} must lie in [0,1)",
                self.dropout_rate
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CoreError::config(format!(
                "val_fraction {} must lie in (0,1)",
                self.val_fraction
            )));
        }
        if let Some(p) = self.early_stop_patience {
            if p == 0 {
                return Err(CoreError::config("early_stop_patience must be >= 1"));
            }
        }
        if let Some(k) = self.kfold {
            if k < 2 {
                return Err(CoreError::config(format!("kfold must be >= 2, got {k}")));
            }
        }
        Ok(())
    }

    /// Set one field from its textual key; unknown keys error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| CoreError::config(format!("{key}: expected an integer, got '{v}'")))
        };
        let real = |v: &str| {
            v.parse::<Real>()
                .map_err(|_| CoreError::config(format!("{key}: expected a number, got '{v}'")))
        };
        match key {
            "epochs" => self.epochs = int(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "learning_rate" => self.learning_rate = real(value)?,
            "early_stop_patience" => self.early_stop_patience = parse_optional(key, value)?,
            "seed" => {
                self.seed = value.parse().map_err(|_| {
                    CoreError::config(format!("seed: expected an integer, got '{value}'"))
                })?
            }
            "loss_reduction" => self.loss_reduction = parse_reduction(value)?,
            "mc_samples" => self.mc_samples = int(value)?,
            "train_dropout" => self.dropout_rate = real(value)?,
            "kfold" => self.kfold = parse_optional(key, value)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(value)?,
            "val_fraction" => self.val_fraction = real(value)?,
            other => {
                return Err(CoreError::config(format!(
                    "unknown training configuration key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Stable key/value listing (used for the config echo).
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<usize>| match v {
            Some(n) => n.to_string(),
            None => String::from("none"),
        };
        use alloc::string::ToString;
        alloc::vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{}", self.learning_rate)),
            ("early_stop_patience", opt(self.early_stop_patience)),
            ("seed", self.seed.to_string()),
            ("loss_reduction", reduction_name(self.loss_reduction).to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("train_dropout", format!("{}", self.dropout_rate)),
            ("kfold", opt(self.kfold)),
            ("optimizer", self.optimizer.name().to_string()),
            ("val_fraction", format!("{}", self.val_fraction)),
        ]
    }
}

/// Which pass a history record describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One history line: loss and infection-head metrics for one split of
/// one epoch, plus the lung-head dice when the cascade is training.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: Real,
    pub metrics: MetricsReport,
    pub lung_dice: Option<Real>,
}

impl EpochRecord {
    /// Render as one `key=value` line.
    pub fn render(&self) -> String {
        let m = &self.metrics;
        let mut line = format!(
            "epoch={} split={} loss={:.6} accuracy={:.6} precision={:.6} specificity={:.6} recall={:.6} dice={:.6} jaccard={:.6}",
            self.epoch, self.split.name(), self.loss,
            m.accuracy, m.precision, m.specificity, m.recall, m.dice, m.jaccard
        );
        if let Some(d) = self.lung_dice {
            line.push_str(&format!(" lung_dice={d:.6}"));
        }
        line
    }
}

/// All records of one run, in emission order.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// Last record of the given split.
    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

/// Stops training once the validation loss has failed to improve for
/// `patience` consecutive observations.
pub struct EarlyStopper {
    patience: usize,
    best: Real,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: Real::INFINITY,
            bad: 0,
        }
    }

    /// Feed one validation loss; returns true when training should stop.
    pub fn observe(&mut self, val_loss: Real) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad = 0;
            false
        } else {
            self.bad += 1;
            self.bad >= self.patience
        }
    }

    pub fn best(&self) -> Real {
        self.best
    }
}

/// Result of one training run.
pub struct TrainOutcome {
    pub history: History,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_val_loss: Real,
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Shuffle and split into `(train, val)` reference lists; the validation
/// share is rounded and clamped so both sides are non-empty.
pub fn split_dataset(
    samples: &[SegmentationSample],
    val_fraction: Real,
    seed: u64,
) -> Result<(Vec<&SegmentationSample>, Vec<&SegmentationSample>)> {
    let n = samples.len();
    if n < 2 {
        return Err(CoreError::contract(
            "need at least two samples to form a train/val split",
        ));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CoreError::config(format!(
            "val_fraction {val_fraction} must lie in (0,1)"
        )));
    }
    let mut r = rng::stream(seed, rng::tag::SPLIT, 0);
    let idx = shuffled_indices(n, &mut r);
    let n_val = ((n as Real * val_fraction) + 0.5) as usize;
    let n_val = n_val.clamp(1, n - 1);
    let val = idx[..n_val].iter().map(|&i| &samples[i]).collect();
    let train = idx[n_val..].iter().map(|&i| &samples[i]).collect();
    Ok((train, val))
}

struct PassOut {
    loss: Real,
    grads: Option<Grads>,
    bn_updates: Vec<BnUpdate>,
    infection_prob: Tensor,
    lung_prob: Option<Tensor>,
}

fn forward_pass(
    model: &Model,
    store: &ParamStore,
    sample: &SegmentationSample,
    mode: Mode,
    reduction: Reduction,
    rng: &mut ChaCha8Rng,
    want_grads: bool,
) -> Result<PassOut> {
    let mut tape = Tape::new(store);
    let x = tape.leaf(sample.image.clone());
    let out = model.forward(&mut tape, x, mode, rng)?;
    let loss_node = match &out.lung {
        Some(lung) => cascade_loss(
            &mut tape,
            lung.prob,
            &sample.lung_mask,
            out.infection.prob,
            &sample.infection_mask,
            reduction,
        )?,
        None => segmentation_loss(&mut tape, out.infection.prob, &sample.infection_mask, reduction)?,
    };
    let loss = tape.value(loss_node).data()[0];
    if !loss.is_finite() {
        return Err(CoreError::contract(format!(
            "training diverged: loss became {loss} on sample '{}'",
            sample.id
        )));
    }
    let grads = if want_grads {
        Some(tape.backward(loss_node)?)
    } else {
        None
    };
    let infection_prob = tape.value(out.infection.prob).clone();
    let lung_prob = out.lung.as_ref().map(|l| tape.value(l.prob).clone());
    Ok(PassOut {
        loss,
        grads,
        bn_updates: tape.take_bn_updates(),
        infection_prob,
        lung_prob,
    })
}

fn apply_bn_updates(store: &mut ParamStore, updates: Vec<BnUpdate>) {
    for u in updates {
        update_running(store.get_mut(u.mean_slot).data_mut(), &u.mean);
        update_running(store.get_mut(u.var_slot).data_mut(), &u.var);
    }
}

/// Run the training loop over pre-split sample lists.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    train_set: &[&SegmentationSample],
    val_set: &[&SegmentationSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CoreError::contract(
            "training requires non-empty train and validation sets",
        ));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut dropout_rng = rng::stream(cfg.seed, rng::tag::DROPOUT, 0);
    let mut stopper = cfg.early_stop_patience.map(EarlyStopper::new);
    let mut history = History::default();
    let mut stopped_early = false;
    let mut epochs_run = 0;
    let mut final_val_loss = Real::INFINITY;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let mut order_rng = rng::stream(cfg.seed, rng::tag::SHUFFLE, epoch as u64);
        let order = shuffled_indices(train_set.len(), &mut order_rng);

        let mut loss_sum = 0.0;
        let mut counts = Counts::default();
        let mut lung_counts = Counts::default();
        let mut saw_lung = false;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = GradAccum::new(store);
            let mut bn_all = Vec::new();
            for &i in chunk {
                let sample = train_set[i];
                let pass = forward_pass(
                    model,
                    store,
                    sample,
                    Mode::Train {
                        dropout: cfg.dropout_rate,
                    },
                    cfg.loss_reduction,
                    &mut dropout_rng,
                    true,
                )?;
                loss_sum += pass.loss;
                acc.add(pass.grads.as_ref().expect("gradients requested"));
                bn_all.extend(pass.bn_updates);
                counts.accumulate(&sample.infection_mask, &pass.infection_prob, METRIC_THRESHOLD)?;
                if let Some(lp) = &pass.lung_prob {
                    lung_counts.accumulate(&sample.lung_mask, lp, METRIC_THRESHOLD)?;
                    saw_lung = true;
                }
            }
            acc.finish_mean();
            optimizer.step(store, &acc)?;
            apply_bn_updates(store, bn_all);
        }
        history.records.push(EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / train_set.len() as Real,
            metrics: MetricsReport::from_counts(counts, METRIC_THRESHOLD),
            lung_dice: saw_lung
                .then(|| MetricsReport::from_counts(lung_counts, METRIC_THRESHOLD).dice),
        });

        let (val_loss, val_record) = evaluate(model, store, val_set, cfg.loss_reduction, epoch)?;
        final_val_loss = val_loss;
        history.records.push(val_record);

        if let Some(stopper) = &mut stopper {
            if stopper.observe(val_loss) {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        history,
        epochs_run,
        stopped_early,
        final_val_loss,
    })
}

/// One inference pass over a sample list: mean loss plus pooled metrics.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    samples: &[&SegmentationSample],
    reduction: Reduction,
    epoch: usize,
) -> Result<(Real, EpochRecord)> {
    if samples.is_empty() {
        return Err(CoreError::contract("evaluation set is empty"));
    }
    // Infer mode never consults the RNG; any stream works.
    let mut rng = rng::stream(0, rng::tag::MC_SAMPLE, u64::MAX);
    let mut loss_sum = 0.0;
    let mut counts = Counts::default();
    let mut lung_counts = Counts::default();
    let mut saw_lung = false;
    for sample in samples {
        let pass = forward_pass(model, store, sample, Mode::Infer, reduction, &mut rng, false)?;
        loss_sum += pass.loss;
        counts.accumulate(&sample.infection_mask, &pass.infection_prob, METRIC_THRESHOLD)?;
        if let Some(lp) = &pass.lung_prob {
            lung_counts.accumulate(&sample.lung_mask, lp, METRIC_THRESHOLD)?;
            saw_lung = true;
        }
    }
    let loss = loss_sum / samples.len() as Real;
    let record = EpochRecord {
        epoch,
        split: Split::Val,
        loss,
        metrics: MetricsReport::from_counts(counts, METRIC_THRESHOLD),
        lung_dice: saw_lung.then(|| MetricsReport::from_counts(lung_counts, METRIC_THRESHOLD).dice),
    };
    Ok((loss, record))
}

/// One cross-validation fold: its trained parameters and history.
pub struct FoldResult {
    pub fold: usize,
    pub outcome: TrainOutcome,
    pub store: ParamStore,
}

/// K-fold cross-validation: strided fold assignment over a shuffled
/// order, a freshly initialised model per fold.
pub fn train_kfold(
    net_cfg: &NetworkConfig,
    kind: ModelKind,
    samples: &[SegmentationSample],
    cfg: &TrainConfig,
    k: usize,
) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    if k < 2 {
        return Err(CoreError::config(format!("kfold must be >= 2, got {k}")));
    }
    if samples.len() < k {
        return Err(CoreError::contract(format!(
            "{} samples cannot fill {k} folds",
            samples.len()
        )));
    }
    let mut r = rng::stream(cfg.seed, rng::tag::SPLIT, 1);
    let order = shuffled_indices(samples.len(), &mut r);
    let mut results = Vec::with_capacity(k);
    for fold in 0..k {
        let mut train_refs = Vec::new();
        let mut val_refs = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            if pos % k == fold {
                val_refs.push(&samples[i]);
            } else {
                train_refs.push(&samples[i]);
            }
        }
        let mut store = ParamStore::new();
        let mut init = rng::stream(cfg.seed, rng::tag::INIT, fold as u64);
        let model = Model::build(&mut store, &mut init, net_cfg, kind)?;
        let outcome = train(&model, &mut store, &train_refs, &val_refs, cfg)?;
        results.push(FoldResult {
            fold,
            outcome,
            store,
        });
    }
    Ok(results)
}
