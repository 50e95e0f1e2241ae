//! Two-round training: shuffled batches until validation loss plateaus, then
//! kNN-seeded batches with the false-negative mask.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignloss::{contrastive_loss, contrastive_loss_grad, AlignedBatch, NegativeMask};
use crate::datamodel::triplet::{pick_text_key, pick_view_key};
use crate::datamodel::{augment_points, AugmentConfig, Dataset, Point, ShapeRecord};
use crate::encoder::{EncoderConfig, Modality, ModelState};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mining::{build_neighbor_table, build_seeded_batches, false_negative_mask, BatchPlan, MiningConfig};
use crate::seed::{derive_seed, stable_hash};

pub use crate::encoder::{load_checkpoint, load_checkpoint_for, save_checkpoint};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;

/// Relative validation-loss improvement that resets the round-1 patience.
pub const MIN_IMPROVEMENT: f64 = 1e-3;

/// Examples per gradient chunk; fixed so the summation order does not depend
/// on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    #[default]
    Sgd,
    Adam(AdamConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Round-1 batch size `n`.
    pub batch_size: usize,
    pub lr0: f64,
    /// Per-step decay `γ` of the exponential schedule.
    pub lr_decay: f64,
    /// Epochs without a validation improvement before switching rounds.
    pub round1_patience: usize,
    /// Hard cap on round-1 epochs.
    pub round1_max_epochs: Option<usize>,
    pub max_epochs: usize,
    pub seed: u64,
    pub mining: MiningConfig,
    pub augment: AugmentConfig,
    pub mask_symmetric: bool,
    /// When false, every epoch uses shuffled batches.
    pub mining_enabled: bool,
    pub optimizer: OptimizerConfig,
    /// Percentage of shapes held out for validation, chosen by id hash.
    pub validation_percent: u64,
    /// Return the parameters with the lowest validation loss instead of the
    /// final ones.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            lr0: 1e-3,
            lr_decay: 0.9999,
            round1_patience: 3,
            round1_max_epochs: None,
            max_epochs: 30,
            seed: 0,
            mining: MiningConfig::default(),
            augment: AugmentConfig::default(),
            mask_symmetric: false,
            mining_enabled: true,
            optimizer: OptimizerConfig::Sgd,
            validation_percent: 5,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lr0 must be finite and ≥ 0, got {}",
                self.lr0
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.validation_percent >= 100 {
            return Err(Error::InvalidConfig("validation_percent must be below 100".into()));
        }
        if let OptimizerConfig::Adam(a) = self.optimizer {
            if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
                return Err(Error::InvalidConfig("adam betas must be in [0, 1) and eps > 0".into()));
            }
        }
        self.mining.validate()?;
        self.augment.validate()
    }
}

/// `lr0 · γ^step`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_decay.powf(step as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub round: u8,
    pub steps: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Temperature at the end of the epoch.
    pub tau: f64,
    /// Learning rate of the last step.
    pub lr: f64,
    pub masked_pairs: usize,
    /// |training loss − independent loss evaluation| on the first batch.
    pub spot_check_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_shapes: usize,
    pub val_shapes: usize,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochMetrics>,
    /// Number of round-1 epochs completed before switching, if a switch
    /// happened.
    pub round_switch_epoch: Option<usize>,
    /// Epoch whose parameters were returned (0 is the initialization).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub total_steps: u64,
    /// Not serialized, so seeded reports stay byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Splits record indices into (train, validation) by id hash. An empty
/// validation split falls back to validating on the training shapes.
pub fn split_indices(records: &[ShapeRecord], validation_percent: u64) -> (Vec<usize>, Vec<usize>) {
    let (val, train): (Vec<usize>, Vec<usize>) =
        (0..records.len()).partition(|&i| stable_hash(&records[i].id) % 100 < validation_percent);
    if val.is_empty() {
        let v = train.clone();
        (train, v)
    } else {
        (train, val)
    }
}

/// Splits `0..len` into `ceil(len / size)` contiguous chunks of nearly equal
/// length.
fn even_chunks(len: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let count = len.div_ceil(size).max(1);
    (0..count).map(|c| c * len / count..(c + 1) * len / count).collect()
}

/// One triplet as fed to the optimizer; `text` is `None` for text-less
/// shapes.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub points: Vec<Point>,
    pub text: Option<&'a [f32]>,
    pub image: &'a [f32],
}

struct Forward {
    shape: crate::encoder::ShapeForward,
    text: Option<(Vec<f64>, f64)>,
    image: (Vec<f64>, f64),
}

fn forward_batch(state: &ModelState, samples: &[Example]) -> Result<(Vec<Forward>, AlignedBatch)> {
    let fwd = samples
        .par_iter()
        .map(|s| {
            Ok(Forward {
                shape: state.shape_forward(&s.points)?,
                text: s.text.map(|t| state.project_raw(Modality::Text, t)).transpose()?,
                image: state.project_raw(Modality::Image, s.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = state.embed_dim();
    let n = fwd.len();
    let (mut hp, mut ht, mut hi) = (Matrix::zeros(n, d), Matrix::zeros(n, d), Matrix::zeros(n, d));
    let mut valid = Vec::with_capacity(n);
    for (r, f) in fwd.iter().enumerate() {
        hp.row_mut(r).copy_from_slice(&f.shape.unit);
        // Text-less rows are placeholders never read by the loss.
        ht.row_mut(r)
            .copy_from_slice(f.text.as_ref().map_or(&f.shape.unit, |t| &t.0));
        hi.row_mut(r).copy_from_slice(&f.image.0);
        valid.push(f.text.is_some());
    }
    Ok((fwd, AlignedBatch::new_unchecked(hp, ht, hi, valid)))
}

fn backward_batch(
    state: &ModelState,
    samples: &[Example],
    fwd: &[Forward],
    g: &crate::alignloss::LossGrad,
) -> Vec<f64> {
    let total = state.params.len();
    let partials: Vec<Vec<f64>> = (0..samples.len())
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; total];
            for &r in chunk {
                let f = &fwd[r];
                state.shape_backward(&f.shape, g.d_hp.row(r), &mut grad);
                if let (Some(raw), Some((unit, norm))) = (samples[r].text, &f.text) {
                    state.projection_backward(Modality::Text, raw, unit, *norm, g.d_ht.row(r), &mut grad);
                }
                let (unit, norm) = &f.image;
                state.projection_backward(Modality::Image, samples[r].image, unit, *norm, g.d_hi.row(r), &mut grad);
            }
            grad
        })
        .collect();
    let mut grad = vec![0.0; total];
    for p in partials {
        for (a, b) in grad.iter_mut().zip(p) {
            *a += b;
        }
    }
    grad[state.layout.log_tau] += g.d_log_tau;
    grad
}

/// Batch loss of `examples` under `mask`.
pub fn batch_loss(state: &ModelState, examples: &[Example], mask: &NegativeMask) -> Result<f64> {
    let (_, batch) = forward_batch(state, examples)?;
    contrastive_loss(&batch, state.tau(), mask)
}

/// Batch loss and its gradient with respect to every trainable parameter,
/// in the flat layout of `state.params`.
pub fn batch_loss_grad(state: &ModelState, examples: &[Example], mask: &NegativeMask) -> Result<(f64, Vec<f64>)> {
    let (fwd, batch) = forward_batch(state, examples)?;
    let g = contrastive_loss_grad(&batch, state.tau(), mask)?;
    Ok((g.loss, backward_batch(state, examples, &fwd, &g)))
}

enum Optimizer {
    Sgd,
    Adam {
        cfg: AdamConfig,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl Optimizer {
    fn new(cfg: OptimizerConfig, n: usize) -> Self {
        match cfg {
            OptimizerConfig::Sgd => Optimizer::Sgd,
            OptimizerConfig::Adam(cfg) => Optimizer::Adam {
                cfg,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { cfg, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - cfg.beta1.powi(*t);
                let c2 = 1.0 - cfg.beta2.powi(*t);
                for i in 0..params.len() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
}

/// Deterministic triplets for validation: first candidate of the first
/// non-empty category, first view, no augmentation.
fn validation_samples<'a>(dataset: &'a Dataset, indices: &[usize]) -> Vec<Example<'a>> {
    indices
        .iter()
        .map(|&i| {
            let r = &dataset.manifest.records[i];
            let text = r
                .text_candidates
                .values()
                .find_map(|v| v.first())
                .and_then(|k| dataset.cache.text(k));
            Example {
                points: r.points.clone(),
                text,
                image: dataset.cache.image(&r.image_view_keys[0]).expect("validated keys"),
            }
        })
        .collect()
}

fn validation_loss(state: &ModelState, samples: &[Example], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for range in even_chunks(samples.len(), batch_size) {
        let chunk = &samples[range];
        let (_, batch) = forward_batch(state, chunk)?;
        total += contrastive_loss(&batch, state.tau(), &NegativeMask::empty(chunk.len()))? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn training_sample<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    index: usize,
    augment: &AugmentConfig,
    rng: &mut R,
) -> Example<'a> {
    let r = &dataset.manifest.records[index];
    let text = pick_text_key(r, rng)
        .ok()
        .map(|k| dataset.cache.text(k).expect("validated keys"));
    let image = dataset.cache.image(pick_view_key(r, rng)).expect("validated keys");
    Example {
        points: augment_points(&r.points, rng, augment),
        text,
        image,
    }
}

/// Shape embeddings of `indices` with the current model.
pub fn embed_records(state: &ModelState, dataset: &Dataset, indices: &[usize]) -> Result<Matrix> {
    let rows = indices
        .par_iter()
        .map(|&i| state.embed_shape(&dataset.manifest.records[i].points))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// The seeded starting point used by [`train`].
pub fn initial_state(dataset: &Dataset, encoder: &EncoderConfig, config: &TrainConfig) -> Result<ModelState> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init"));
    ModelState::init(encoder, dataset.cache.text_dim(), dataset.cache.image_dim(), &mut rng)
}

/// Trains a freshly initialized model.
pub fn train(dataset: &Dataset, encoder: &EncoderConfig, config: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    train_from(initial_state(dataset, encoder, config)?, dataset, config, &mut |_| {})
}

/// Trains starting from `state`, calling `observer` after every epoch.
pub fn train_from(
    mut state: ModelState,
    dataset: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochMetrics),
) -> Result<(ModelState, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let records = &dataset.manifest.records;
    let (train_idx, val_idx) = split_indices(records, config.validation_percent);
    if train_idx.len() < config.batch_size.max(2) {
        return Err(Error::TooFewShapes {
            needed: config.batch_size.max(2),
            available: train_idx.len(),
        });
    }
    let train_ids: Vec<String> = train_idx.iter().map(|&i| records[i].id.clone()).collect();
    let val_samples = validation_samples(dataset, &val_idx);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batches"));
    let mut optimizer = Optimizer::new(config.optimizer, state.params.len());
    let (log_min, log_max) = (TAU_MIN.ln(), TAU_MAX.ln());

    let initial_val_loss = validation_loss(&state, &val_samples, config.batch_size)?;
    let mut best = (0usize, initial_val_loss, state.params.clone());
    let mut plateau_ref = initial_val_loss;
    let mut stale = 0usize;
    let mut round: u8 = 1;
    let mut round_switch_epoch = None;
    let mut step: u64 = 0;
    let mut epochs = Vec::with_capacity(config.max_epochs);

    for epoch in 1..=config.max_epochs {
        let plans: Vec<BatchPlan> = if round == 1 {
            let mut order: Vec<usize> = (0..train_idx.len()).collect();
            order.shuffle(&mut rng);
            even_chunks(order.len(), config.batch_size)
                .into_iter()
                .map(|r| BatchPlan::ungrouped(order[r].to_vec()))
                .collect()
        } else {
            let emb = embed_records(&state, dataset, &train_idx)?;
            let table = build_neighbor_table(&train_ids, &emb, config.mining.knn_depth)?;
            build_seeded_batches(&table, &config.mining, &mut rng, train_idx.len())?
        };
        let mut loss_sum = 0.0;
        let mut masked_pairs = 0;
        let mut spot_check_delta = 0.0;
        let mut lr = lr_at(step, config);
        for (b, plan) in plans.iter().enumerate() {
            let samples: Vec<Example> = plan
                .indices
                .iter()
                .map(|&k| training_sample(dataset, train_idx[k], &config.augment, &mut rng))
                .collect();
            let (fwd, batch) = forward_batch(&state, &samples)?;
            let mask = if round == 1 {
                NegativeMask::empty(samples.len())
            } else {
                text_valid_mask(plan, &batch, config)?
            };
            masked_pairs += mask.count();
            let tau = state.tau();
            let g = contrastive_loss_grad(&batch, tau, &mask)?;
            if b == 0 {
                spot_check_delta = (contrastive_loss(&batch, tau, &mask)? - g.loss).abs();
            }
            let grad = backward_batch(&state, &samples, &fwd, &g);
            if !g.loss.is_finite() || grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step as usize,
                    detail: format!(
                        "loss {} at tau {tau}, batch of {} starting with `{}`",
                        g.loss,
                        samples.len(),
                        train_ids[plan.indices[0]]
                    ),
                });
            }
            lr = lr_at(step, config);
            optimizer.step(&mut state.params, &grad, lr);
            let lt = state.layout.log_tau;
            state.params[lt] = state.params[lt].clamp(log_min, log_max);
            loss_sum += g.loss;
            step += 1;
        }
        let val_loss = validation_loss(&state, &val_samples, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: step as usize,
                detail: format!("validation loss {val_loss}"),
            });
        }
        if val_loss < best.1 {
            best = (epoch, val_loss, state.params.clone());
        }
        let metrics = EpochMetrics {
            epoch,
            round,
            steps: plans.len(),
            train_loss: loss_sum / plans.len() as f64,
            val_loss,
            tau: state.tau(),
            lr,
            masked_pairs,
            spot_check_delta,
        };
        log::info!(
            "epoch {epoch} round {round}: train {:.5} val {:.5} tau {:.4}",
            metrics.train_loss,
            val_loss,
            metrics.tau
        );
        observer(&metrics);
        epochs.push(metrics);

        if round == 1 && config.mining_enabled {
            if val_loss < plateau_ref * (1.0 - MIN_IMPROVEMENT) {
                plateau_ref = val_loss;
                stale = 0;
            } else {
                stale += 1;
            }
            let capped = config.round1_max_epochs.is_some_and(|cap| epoch >= cap);
            if stale >= config.round1_patience || capped {
                round = 2;
                round_switch_epoch = Some(epoch);
                log::info!("switching to mined batches after epoch {epoch}");
            }
        }
    }

    let report = TrainReport {
        train_shapes: train_idx.len(),
        val_shapes: val_idx.len(),
        initial_val_loss,
        epochs,
        round_switch_epoch,
        best_epoch: if config.keep_best { best.0 } else { config.max_epochs },
        best_val_loss: best.1,
        total_steps: step,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    if config.keep_best {
        state.params = best.2;
    }
    Ok((state, report))
}

/// False-negative mask for a mined batch; text-less rows take part in no
/// exclusion since their text row is a placeholder.
fn text_valid_mask(plan: &BatchPlan, batch: &AlignedBatch, config: &TrainConfig) -> Result<NegativeMask> {
    let raw = false_negative_mask(plan, &batch.ht, &batch.hi, config.mining.delta)?;
    let raw = if config.mask_symmetric { raw.symmetrized() } else { raw };
    if batch.text_valid.iter().all(|&v| v) {
        return Ok(raw);
    }
    let n = plan.len();
    let mut mask = NegativeMask::empty(n);
    for i in 0..n {
        for j in 0..n {
            if raw.is_excluded(i, j) && batch.text_valid[i] && batch.text_valid[j] {
                mask.exclude(i, j);
            }
        }
    }
    Ok(mask)
}
