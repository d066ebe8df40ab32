//! Training and evaluation loops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{stack, ShadowSample};
use crate::error::{Error, Result};
use crate::metrics::{binarize_logits, EvalReport};
use crate::model::{loss_and_gradients, predict_logits, ModelConfig};
use crate::optim::{sgd_momentum_step, OptimState};
use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub hflip: bool,
    pub seed: u64,
    /// Progress callback interval, in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 2000,
            batch_size: 4,
            hflip: true,
            seed: 7,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{what} must be finite and >= 0, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::Config(format!("momentum must be below 1, got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// `(step, loss)` for every step, starting at 1.
    pub losses: Vec<(usize, f64)>,
}

/// Epoch-wise shuffled batches with optional random horizontal flips.
struct BatchSampler<'a> {
    data: &'a [ShadowSample],
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    hflip: bool,
}

impl<'a> BatchSampler<'a> {
    fn new(data: &'a [ShadowSample], seed: u64, hflip: bool) -> Self {
        BatchSampler {
            data,
            order: (0..data.len()).collect(),
            cursor: data.len(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            hflip,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<ShadowSample> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let s = &self.data[self.order[self.cursor]];
                self.cursor += 1;
                if self.hflip && self.rng.gen_bool(0.5) {
                    s.hflip()
                } else {
                    s.clone()
                }
            })
            .collect()
    }
}

/// Runs `cfg.iterations` SGD steps from `params`, calling `progress(step,
/// loss)` every `cfg.log_every` steps and after the last one.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[ShadowSample],
    mut params: ModelParams,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut state = OptimState::new(&params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let mut sampler = BatchSampler::new(dataset, cfg.seed, cfg.hflip);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 1..=cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size);
        let refs: Vec<&ShadowSample> = batch.iter().collect();
        let (images, masks) = stack(&refs)?;
        let (loss, grads) = loss_and_gradients(&params, model, &images, &masks)?;
        let finite = grads.values().all(|g| g.all_finite());
        let max_grad = grads
            .values()
            .map(|g| g.max_abs())
            .fold(0.0, |m: f64, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) });
        if !loss.is_finite() || !finite {
            return Err(Error::Diverged {
                step,
                lr: cfg.learning_rate,
                max_grad,
            });
        }
        sgd_momentum_step(&mut params, &grads, &mut state)?;
        losses.push((step, loss));
        if step % cfg.log_every == 0 || step == cfg.iterations {
            progress(step, loss);
        }
    }
    Ok(TrainOutcome { params, losses })
}

/// `step,loss` lines with a header.
pub fn loss_csv(losses: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in losses {
        s.push_str(&format!("{step},{loss:.10}\n"));
    }
    s
}

pub const EVAL_BATCH: usize = 8;

/// Thresholded fused predictions `[1, H, W]` for every sample, in order.
pub fn predict_masks(params: &ModelParams, model: &ModelConfig, dataset: &[ShadowSample]) -> Result<Vec<crate::Tensor>> {
    let chunks: Vec<Vec<crate::Tensor>> = dataset
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<Vec<crate::Tensor>> {
            let refs: Vec<&ShadowSample> = chunk.iter().collect();
            let (images, _) = stack(&refs)?;
            let logits = predict_logits(params, model, &images)?;
            let [_, _, h, w] = <[usize; 4]>::try_from(logits.shape()).map_err(|_| Error::dim("logits rank"))?;
            let bin = binarize_logits(&logits);
            Ok(bin
                .data()
                .chunks_exact(h * w)
                .map(|m| crate::Tensor::new([1, h, w], m.to_vec()).expect("mask shape"))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Pooled BER and resolved percentages of the thresholded fused map.
pub fn evaluate(params: &ModelParams, model: &ModelConfig, dataset: &[ShadowSample]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    let preds = predict_masks(params, model, dataset)?;
    report_from_masks(dataset, &preds)
}

/// Report for precomputed binary predictions, one per sample.
pub fn report_from_masks(dataset: &[ShadowSample], preds: &[crate::Tensor]) -> Result<EvalReport> {
    if dataset.is_empty() || dataset.len() != preds.len() {
        return Err(Error::Parameter(format!(
            "{} samples but {} predictions",
            dataset.len(),
            preds.len()
        )));
    }
    let mut report = EvalReport::default();
    for (s, p) in dataset.iter().zip(preds) {
        report.add(p, &s.mask, s.category)?;
    }
    Ok(report)
}
