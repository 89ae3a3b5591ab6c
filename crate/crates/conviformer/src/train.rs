//! Training loop, AdamW with decoupled weight decay, cosine schedule, and
//! batched evaluation.
//!
//! A run is a pure function of (seed, config, dataset): batch order, triplet
//! mining, dropout masks, and parameter updates all draw from fixed streams,
//! so two runs produce bit-identical checkpoints.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::eval::{argmax_rows, EvalError, EvalReport};
use crate::hierarchy::HierLabel;
use crate::losses::{
    combined_loss, BatchOutputs, LossContext, LossError, LossMode, LossWeights, PhyloMatrix,
    SamplingLevel,
};
use crate::model::{Conviformer, ModelError, ParamStore};
use crate::presizer;
use crate::rng::{Stream, StreamRng};
use crate::synth::{SynthDataset, SynthError, TripletBatches};
use crate::tensor::{Element, Tape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    pub mode: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub alpha: f64,
    pub p: f64,
    pub lambda_dist: f64,
    pub sampling_level: String,
}

impl Default for LossSettings {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSettings {
            mode: "ce".into(),
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            lambda5: w.lambda5,
            alpha: w.alpha,
            p: w.p,
            lambda_dist: w.lambda_dist,
            sampling_level: "genus".into(),
        }
    }
}

impl LossSettings {
    pub fn mode(&self) -> Result<LossMode, LossError> {
        LossMode::parse(&self.mode)
    }

    pub fn level(&self) -> Result<SamplingLevel, LossError> {
        SamplingLevel::parse(&self.sampling_level)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
            lambda5: self.lambda5,
            alpha: self.alpha,
            p: self.p,
            lambda_dist: self.lambda_dist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub mode: String,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub input_res: usize,
    pub dropout: f64,
    pub cosine_schedule: bool,
    pub eval_each_epoch: bool,
    /// Stop once the train accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
    pub loss: LossSettings,
    /// Staged schedule; empty means one stage of `loss.mode` x `epochs`.
    pub stages: Vec<StageSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            seed: 0,
            input_res: 64,
            dropout: 0.0,
            cosine_schedule: true,
            eval_each_epoch: true,
            stop_at_train_accuracy: None,
            loss: LossSettings::default(),
            stages: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 && self.stages.is_empty() {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::Config("learning_rate and weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.loss.mode()?;
        self.loss.level()?;
        self.loss.weights().validate()?;
        for s in &self.stages {
            LossMode::parse(&s.mode)?;
            if s.epochs == 0 {
                return Err(TrainError::Config("stage epochs must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The staged schedule: explicit stages, or one stage from `loss.mode`.
    pub fn plan(&self) -> Result<Vec<(LossMode, usize)>, TrainError> {
        if self.stages.is_empty() {
            Ok(vec![(self.loss.mode()?, self.epochs)])
        } else {
            self.stages
                .iter()
                .map(|s| Ok((LossMode::parse(&s.mode)?, s.epochs)))
                .collect()
        }
    }
}

/// One file drives a whole run: `[model]` table for the architecture,
/// `[train]` (with `[train.loss]`) for the schedule.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: crate::model::ConviformerConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(format!("config parse: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Config(String),
    Loss(LossError),
    Model(ModelError),
    Tensor(TensorError),
    Synth(SynthError),
    Eval(EvalError),
    /// Loss went NaN/Inf; training aborts with the failing location.
    NonFiniteLoss { epoch: usize, batch: usize, mode: LossMode },
    NonFiniteGrad { param: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(d) => write!(f, "train config: {d}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Synth(e) => write!(f, "{e}"),
            TrainError::Eval(e) => write!(f, "{e}"),
            TrainError::NonFiniteLoss { epoch, batch, mode } => write!(
                f,
                "non-finite loss at epoch {epoch}, batch {batch} (mode {})",
                mode.name()
            ),
            TrainError::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient for parameter '{param}'")
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<SynthError> for TrainError {
    fn from(e: SynthError) -> Self {
        TrainError::Synth(e)
    }
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(e)
    }
}

/// Adaptive-moment optimizer with decoupled weight decay:
///
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * p )
pub struct AdamW<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: store.iter().map(|(_, _, p)| vec![T::zero(); p.numel()]).collect(),
            v: store.iter().map(|(_, _, p)| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// One update over every parameter, in store order. `grads[i]` of `None`
    /// contributes a zero gradient (weight decay still applies).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<(), TrainError> {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.weight_decay);
        let eps = T::from_f64(self.eps);

        for (i, (name, param)) in store.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let zero_grad = vec![T::zero(); param.numel()];
            let g = match &grads[i] {
                Some(g) => {
                    if !g.iter().all(|x| x.is_finite()) {
                        return Err(TrainError::NonFiniteGrad { param: name.to_string() });
                    }
                    g.as_slice()
                }
                None => zero_grad.as_slice(),
            };
            for (((p, m), v), &gi) in param.data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to 0 across `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: LossMode,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: Option<f64>,
    pub skipped_triplet_terms: usize,
    pub skipped_phylo_batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Images resized to the training resolution, flattened CHW, in dataset
/// order (restricted to `indices` when given).
pub fn prepare_inputs<T: Element>(
    dataset: &SynthDataset,
    indices: Option<&[usize]>,
    res: usize,
) -> Result<(Vec<Vec<T>>, Vec<HierLabel>), TrainError> {
    let idx: Vec<usize> = match indices {
        Some(ix) => ix.to_vec(),
        None => (0..dataset.len()).collect(),
    };
    let mut images = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in &idx {
        let sample = &dataset.samples[i];
        let img = if sample.image.height() == res {
            sample.image.clone()
        } else {
            presizer::resize(&sample.image, res)
                .map_err(|e| TrainError::Config(format!("resize to {res}: {e}")))?
        };
        images.push(img.to_chw::<T>());
        labels.push(sample.label);
    }
    Ok((images, labels))
}

fn batch_tensor<T: Element>(
    tape: &mut Tape<T>,
    images: &[Vec<T>],
    batch: &[usize],
    res: usize,
) -> Result<Tensor, TensorError> {
    let mut data = Vec::with_capacity(batch.len() * 3 * res * res);
    for &i in batch {
        data.extend_from_slice(&images[i]);
    }
    tape.leaf(data, vec![batch.len(), 3, res, res], false)
}

fn mode_needs_triplets(mode: LossMode) -> Option<SamplingLevel> {
    match mode {
        LossMode::CeTrip => Some(SamplingLevel::Taxon),
        LossMode::HierTrip => None, // level comes from config
        _ => None,
    }
}

/// Train in place. `indices` restricts the dataset (for class subsets);
/// `phylo` is required by the hier+phylo mode.
pub fn train<T: Element>(
    model: &mut Conviformer<T>,
    dataset: &SynthDataset,
    indices: Option<&[usize]>,
    cfg: &TrainConfig,
    phylo: Option<&PhyloMatrix>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let total_epochs: usize = plan.iter().map(|(_, e)| e).sum();
    let res = cfg.input_res;
    let (images, labels) = prepare_inputs::<T>(dataset, indices, res)?;
    if images.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let n = images.len();
    let n_batches = n.div_ceil(cfg.batch_size);
    let weights = cfg.loss.weights();
    let level = cfg.loss.level()?;

    // subset view for triplet batch construction
    let sub = SynthDataset {
        spec: dataset.spec.clone(),
        taxonomy: dataset.taxonomy.clone(),
        samples: match indices {
            Some(ix) => ix.iter().map(|&i| dataset.samples[i].clone()).collect(),
            None => dataset.samples.clone(),
        },
    };

    let mut optimizer = AdamW::new(&model.store, cfg.weight_decay);
    let mut history = Vec::new();
    let mut stopped_early = false;
    let batch_rng = StreamRng::new(cfg.seed, Stream::Batching);
    let mut dropout_rng = StreamRng::new(cfg.seed, Stream::Dropout);
    let mut mining_rng = StreamRng::new(cfg.seed, Stream::TripletMining);

    let mut epoch = 0usize;
    'stages: for (mode, stage_epochs) in plan {
        let trip_level = match mode {
            LossMode::HierTrip => Some(level),
            other => mode_needs_triplets(other),
        };
        for _ in 0..stage_epochs {
            let lr = if cfg.cosine_schedule {
                cosine_lr(cfg.learning_rate, epoch, total_epochs)
            } else {
                cfg.learning_rate
            };

            // batch plan for this epoch
            let batches: Vec<Vec<usize>> = match trip_level {
                Some(lvl) => TripletBatches::new(&sub, lvl, cfg.batch_size, cfg.seed ^ epoch as u64)?
                    .take(n_batches)
                    .collect(),
                None => {
                    let mut order: Vec<usize> = (0..n).collect();
                    let mut rng = batch_rng.split(epoch as u64);
                    // Fisher-Yates
                    for i in (1..order.len()).rev() {
                        let j = rand::Rng::gen_range(&mut rng, 0..=i);
                        order.swap(i, j);
                    }
                    order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
                }
            };

            let mut loss_sum = 0.0;
            let mut skipped_trip = 0;
            let mut skipped_phylo = 0;
            for (batch_no, batch) in batches.iter().enumerate() {
                let mut tape: Tape<T> = Tape::new();
                let bound = model.bind(&mut tape)?;
                let x = batch_tensor(&mut tape, &images, batch, res)?;
                let batch_labels: Vec<HierLabel> = batch.iter().map(|&i| labels[i]).collect();

                let (out_feat, _) = model.forward(&mut tape, &bound, &x, true, &mut dropout_rng)?;
                let heads = model.heads(&mut tape, &bound, &out_feat)?;
                let ctx = LossContext {
                    taxonomy: &dataset.taxonomy,
                    weights: &weights,
                    sampling_level: level,
                    phylo,
                    class_weights: None,
                };
                let outputs = BatchOutputs {
                    logits_tax: &heads.logits_tax,
                    logits_gen: &heads.logits_gen,
                    logits_fam: &heads.logits_fam,
                    emb_tax: &heads.emb_tax,
                    emb_gen: &heads.emb_gen,
                    emb_fam: &heads.emb_fam,
                };
                let report = combined_loss(&mut tape, mode, &outputs, &batch_labels, &ctx, &mut mining_rng)?;
                let loss_val = tape.scalar_value(&report.loss).to_f64();
                if !loss_val.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no, mode });
                }
                skipped_trip += report.skipped_triplet_terms;
                skipped_phylo += report.skipped_phylo as usize;
                loss_sum += loss_val;

                let grads = tape.backward(&report.loss)?;
                let per_param: Vec<Option<Vec<T>>> = model
                    .store
                    .iter()
                    .map(|(id, _, _)| grads.get(bound.get(id)).map(<[T]>::to_vec))
                    .collect();
                optimizer.step(&mut model.store, &per_param, lr)?;
            }

            let train_accuracy = if cfg.eval_each_epoch || epoch + 1 == total_epochs {
                let report = evaluate_prepared(model, &images, &labels, cfg.batch_size)?;
                Some(report.top1)
            } else {
                None
            };
            history.push(EpochRecord {
                epoch,
                mode,
                lr,
                mean_loss: loss_sum / n_batches as f64,
                train_accuracy,
                skipped_triplet_terms: skipped_trip,
                skipped_phylo_batches: skipped_phylo,
            });
            epoch += 1;

            if let (Some(target), Some(acc)) = (cfg.stop_at_train_accuracy, train_accuracy) {
                if acc >= target {
                    stopped_early = true;
                    break 'stages;
                }
            }
        }
    }

    Ok(TrainOutcome { history, stopped_early })
}

/// Taxa-level evaluation over prepared inputs. Pure: the model is borrowed
/// immutably and dropout is off.
pub fn evaluate_prepared<T: Element>(
    model: &Conviformer<T>,
    images: &[Vec<T>],
    labels: &[HierLabel],
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    if images.is_empty() {
        return Err(TrainError::Eval(EvalError::Empty));
    }
    let res = model.input_res;
    let mut rng = StreamRng::new(0, Stream::Dropout);
    let mut pairs = Vec::with_capacity(images.len());
    let order: Vec<usize> = (0..images.len()).collect();
    for batch in order.chunks(batch_size.max(1)) {
        let mut tape: Tape<T> = Tape::new();
        let bound = model.bind(&mut tape)?;
        let x = batch_tensor(&mut tape, images, batch, res)?;
        let (out_feat, _) = model.forward(&mut tape, &bound, &x, false, &mut rng)?;
        let heads = model.heads(&mut tape, &bound, &out_feat)?;
        let preds = argmax_rows(tape.value(&heads.logits_tax), model.cfg.n_taxa);
        for (&i, pred) in batch.iter().zip(preds) {
            pairs.push((labels[i].taxon, pred));
        }
    }
    Ok(EvalReport::from_pairs(model.cfg.n_taxa, pairs)?)
}

/// Resize + evaluate straight from a dataset.
pub fn evaluate<T: Element>(
    model: &Conviformer<T>,
    dataset: &SynthDataset,
    indices: Option<&[usize]>,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    let (images, labels) = prepare_inputs::<T>(dataset, indices, model.input_res)?;
    evaluate_prepared(model, &images, &labels, batch_size)
}
