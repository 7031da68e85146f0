//! Adam optimisation over batches of masked examples.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{backward, count_correct, cross_entropy, forward, forward_with_cache};
use super::params::ModelParams;
use super::{ModelError, Real, TrainConfig};
use crate::masking::MaskedExample;

/// Token ids of one training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub encoder: Vec<u32>,
    pub decoder_input: Vec<u32>,
    pub decoder_target: Vec<u32>,
}

impl From<&MaskedExample> for EncodedExample {
    fn from(ex: &MaskedExample) -> Self {
        Self {
            encoder: ex.encoder_input.ids(),
            decoder_input: ex.decoder_input.ids(),
            decoder_target: ex.decoder_target.ids(),
        }
    }
}

impl EncodedExample {
    fn fits<R: Real>(&self, p: &ModelParams<R>) -> bool {
        !self.encoder.is_empty()
            && !self.decoder_input.is_empty()
            && self.encoder.len() <= p.config.max_encoder_len
            && self.decoder_input.len() <= p.config.max_decoder_len
    }
}

#[derive(Debug, Clone)]
pub struct Adam<R> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ModelParams<R>,
    v: ModelParams<R>,
}

impl<R: Real> Adam<R> {
    pub fn new(params: &ModelParams<R>, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<R>, grads: &ModelParams<R>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let c1 = R::of(1.0 - self.beta1.powi(t));
        let c2 = R::of(1.0 - self.beta2.powi(t));
        let lr = R::of(self.learning_rate);
        let eps = R::of(self.eps);
        let one = R::one();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl StepStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Loss (mean over every target token in the batch) and its gradient.
pub fn batch_gradient<R: Real>(
    params: &ModelParams<R>,
    batch: &[EncodedExample],
    mut dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<(StepStats, ModelParams<R>), ModelError> {
    let mut grads = params.zeros_like();
    let total: usize = batch.iter().map(|e| e.decoder_target.len()).sum();
    let mut stats = StepStats::default();
    if total == 0 {
        return Ok((stats, grads));
    }
    for ex in batch {
        if ex.decoder_target.is_empty() {
            continue;
        }
        if ex.decoder_target.len() != ex.decoder_input.len() {
            return Err(ModelError::Shape {
                what: "decoder input vs target",
                a: ex.decoder_input.len(),
                b: ex.decoder_target.len(),
            });
        }
        let enc_mask = vec![true; ex.encoder.len()];
        let dec_mask = vec![true; ex.decoder_input.len()];
        let (logits, cache) = forward_with_cache(
            params,
            &ex.encoder,
            &ex.decoder_input,
            &enc_mask,
            &dec_mask,
            dropout_rng.as_mut().map(|r| &mut **r as &mut dyn rand::RngCore),
        )?;
        let (loss, mut dlogits) = cross_entropy(&logits, &ex.decoder_target, &dec_mask);
        let weight = R::of(ex.decoder_target.len() as f64 / total as f64);
        dlogits.mapv_inplace(|v| v * weight);
        backward(params, &cache, &dlogits, &mut grads);
        stats.loss += (loss * weight).as_f64();
        let (c, t) = count_correct(&logits, &ex.decoder_target, &dec_mask);
        stats.correct += c;
        stats.total += t;
    }
    Ok((stats, grads))
}

/// One Adam update on `batch`.
pub fn train_step<R: Real>(
    params: &mut ModelParams<R>,
    adam: &mut Adam<R>,
    batch: &[EncodedExample],
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<StepStats, ModelError> {
    let (stats, grads) = batch_gradient(params, batch, dropout_rng)?;
    adam.update(params, &grads);
    Ok(stats)
}

/// Teacher-forced loss and accuracy without dropout.
pub fn evaluate<R: Real>(params: &ModelParams<R>, examples: &[EncodedExample]) -> Result<StepStats, ModelError> {
    let mut stats = StepStats::default();
    let mut loss_sum = 0.0;
    for ex in examples.iter().filter(|e| !e.decoder_target.is_empty()) {
        let enc_mask = vec![true; ex.encoder.len()];
        let dec_mask = vec![true; ex.decoder_input.len()];
        let logits = forward(params, &ex.encoder, &ex.decoder_input, &enc_mask, &dec_mask)?;
        let (loss, _) = cross_entropy(&logits, &ex.decoder_target, &dec_mask);
        loss_sum += loss.as_f64() * ex.decoder_target.len() as f64;
        let (c, t) = count_correct(&logits, &ex.decoder_target, &dec_mask);
        stats.correct += c;
        stats.total += t;
    }
    if stats.total > 0 {
        stats.loss = loss_sum / stats.total as f64;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
}

/// Training state: parameters, optimizer moments and the dropout/shuffle RNG.
pub struct Trainer<R> {
    pub params: ModelParams<R>,
    pub adam: Adam<R>,
    pub step: usize,
    rng: ChaCha8Rng,
    use_dropout: bool,
}

impl<R: Real> Trainer<R> {
    pub fn new(params: ModelParams<R>, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(&params, cfg.learning_rate);
        Self {
            params,
            adam,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            use_dropout: true,
        }
    }

    pub fn without_dropout(mut self) -> Self {
        self.use_dropout = false;
        self
    }

    pub fn step(&mut self, batch: &[EncodedExample]) -> Result<StepStats, ModelError> {
        let rng: Option<&mut dyn rand::RngCore> = if self.use_dropout { Some(&mut self.rng) } else { None };
        let stats = train_step(&mut self.params, &mut self.adam, batch, rng)?;
        self.step += 1;
        Ok(stats)
    }

    /// Shuffled epochs of minibatches; examples longer than the model's
    /// maximum lengths are skipped. Logs one JSON line per step.
    pub fn run_epochs(
        &mut self,
        examples: &[EncodedExample],
        cfg: &TrainConfig,
        epochs: usize,
        stage: &str,
        log: &mut dyn Write,
    ) -> Result<Option<StepStats>, ModelError> {
        let usable: Vec<&EncodedExample> = examples.iter().filter(|e| e.fits(&self.params)).collect();
        if usable.len() < examples.len() {
            log::warn!("skipping {} examples longer than the model limits", examples.len() - usable.len());
        }
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut last = None;
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(cfg.batch_size) {
                if cfg.max_steps.is_some_and(|m| self.step >= m) {
                    return Ok(last);
                }
                let batch: Vec<EncodedExample> = chunk.iter().map(|&i| usable[i].clone()).collect();
                let stats = self.step(&batch)?;
                let line = TrainLogLine {
                    step: self.step,
                    stage: stage.to_string(),
                    loss: stats.loss,
                };
                writeln!(log, "{}", serde_json::to_string(&line).expect("log line serializes"))?;
                last = Some(stats);
            }
        }
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            feedforward_dim: 16,
            ..ModelConfig::toy()
        }
    }

    fn batch() -> Vec<EncodedExample> {
        vec![EncodedExample {
            encoder: vec![140, 147, 151, 152, 136, 357],
            decoder_input: vec![357, 137, 0],
            decoder_target: vec![137, 0, 359],
        }]
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let p = ModelParams::<f32>::init(&tiny(), 1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(p.clone(), &cfg);
        t.step(&batch()).unwrap();
        assert_eq!(t.params, p);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut t = Trainer::new(ModelParams::<f32>::init(&tiny(), 1), &TrainConfig::default());
            (0..5).map(|_| t.step(&batch()).unwrap().loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
