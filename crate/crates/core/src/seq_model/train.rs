use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    block, embed, is_bias, sequence_loss_and_grad, softmax_rows, ModelDims, ModelParams, Result, SeqModelError, Vocabulary,
    BOS, EOS,
};
use crate::event_model::{EventCode, ParcelRecord};

/// A code sequence plus whether the journey is finished (an EOS target follows).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub codes: Vec<EventCode>,
    pub complete: bool,
}

impl From<&ParcelRecord> for TrainingSequence {
    fn from(r: &ParcelRecord) -> Self {
        Self {
            codes: r.codes(),
            complete: r.delivered,
        }
    }
}

impl TrainingSequence {
    /// `(tokens, targets)` for a causal pass; sequences longer than the
    /// positional table are cut and lose their EOS target.
    pub fn encode(&self, vocab: &Vocabulary, max_positions: usize) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        let mut tokens = vec![BOS];
        for c in self.codes.iter().take(max_positions - 1) {
            tokens.push(vocab.encode(*c)?);
        }
        let truncated = self.codes.len() > max_positions - 1;
        let mut targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).collect();
        targets.push(if self.complete && !truncated { Some(EOS) } else { None });
        Ok((tokens, targets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// Linear decay from the base rate to zero over `total_steps`.
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub total_steps: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 2,
            grad_accum_steps: 4,
            total_steps: 120,
            epochs: 1,
            schedule: Schedule::Linear,
            optimizer: AdamWConfig::default(),
            seed: 42,
            d_model: 256,
            heads: 4,
            d_ff: 512,
            max_positions: 64,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self, vocab: &Vocabulary) -> ModelDims {
        ModelDims {
            vocab_size: vocab.size(),
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.batch_size,
            self.grad_accum_steps,
            self.total_steps,
            self.epochs,
            self.d_model,
            self.heads,
            self.d_ff,
        ];
        if counts.contains(&0) {
            return Err(SeqModelError::InvalidConfig("all counts must be positive".into()));
        }
        if self.lr.is_nan() || self.lr < 0.0 || self.init_scale.is_nan() || self.init_scale <= 0.0 {
            return Err(SeqModelError::InvalidConfig("lr must be >= 0 and init_scale > 0".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    /// Learning rate used for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Linear => self.lr * (self.total_steps - step.min(self.total_steps)) as f64 / self.total_steps as f64,
        }
    }

    /// Seeded initial parameters; [`train`] starts from exactly these.
    pub fn init_params(&self, vocab: &Vocabulary) -> Result<ModelParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        ModelParams::init_uniform(self.dims(vocab), self.init_scale, &mut rng)
    }
}

/// Per-step training loss with a trailing moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub moving_avg: Vec<f64>,
    pub window: usize,
    pub val_loss: Option<f64>,
}

impl LossTrace {
    pub const WINDOW: usize = 10;

    pub fn from_losses(losses: Vec<f64>, val_loss: Option<f64>) -> Self {
        let moving_avg = moving_average(&losses, Self::WINDOW);
        Self {
            losses,
            moving_avg,
            window: Self::WINDOW,
            val_loss,
        }
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// `step,loss,moving_avg` with 1-based steps.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,moving_avg\n");
        for (i, (l, m)) in self.losses.iter().zip(&self.moving_avg).enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, l, m));
        }
        out
    }
}

/// Trailing mean over the last `window` values (fewer at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub(crate) struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub(crate) fn new(cfg: AdamWConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam update; biases are not decayed.
    pub(crate) fn step(&mut self, lr: f64, params: Vec<(String, &mut [f64])>, grads: Vec<(String, &[f64])>) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, ((name, p), (_, g))) in params.into_iter().zip(grads).enumerate() {
            let decay = if is_bias(&name) { 0.0 } else { c.weight_decay };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] -= lr * (update + decay * p[j]);
            }
        }
    }
}

/// Cycles through seeded shuffles of `0..n`.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    pub(crate) fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Trains from [`TrainConfig::init_params`]: `total_steps` optimizer steps,
/// each accumulating `grad_accum_steps` micro-batches of `batch_size`
/// sequences. The step loss is the mean cross-entropy over every next-code
/// target in the effective batch.
pub fn train(
    train_set: &[TrainingSequence],
    val_set: &[TrainingSequence],
    config: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<(ModelParams, LossTrace)> {
    if train_set.is_empty() {
        return Err(SeqModelError::EmptyTrainSet);
    }
    let mut params = config.init_params(vocab)?;
    let encoded = train_set
        .iter()
        .map(|s| s.encode(vocab, config.max_positions))
        .collect::<Result<Vec<_>>>()?;
    let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(config.optimizer, &shapes);
    let mut sampler = BatchSampler::new(encoded.len(), config.seed);
    let mut losses = Vec::with_capacity(config.total_steps);
    let mut grads = ModelParams::zeros(params.dims);

    for step in 0..config.total_steps {
        let batch: Vec<usize> = (0..config.effective_batch()).map(|_| sampler.next_index()).collect();
        let n_targets: usize = batch
            .iter()
            .map(|&i| encoded[i].1.iter().filter(|t| t.is_some()).count())
            .sum();
        let weight = 1.0 / n_targets.max(1) as f64;
        grads.tensors_mut().into_iter().for_each(|(_, g)| g.fill(0.0));
        let mut loss_sum = 0.0;
        // micro-batches only differ in bookkeeping: gradients are summed
        for micro in batch.chunks(config.batch_size) {
            for &i in micro {
                let (tokens, targets) = &encoded[i];
                loss_sum += sequence_loss_and_grad(tokens, targets, &params, weight, &mut grads).loss_sum;
            }
        }
        losses.push(loss_sum * weight);
        let lr = config.lr_at(step);
        opt.step(lr, params.tensors_mut(), grads.tensors());
    }
    let val_loss = if val_set.is_empty() {
        None
    } else {
        Some(evaluate_loss(&params, val_set, vocab)?)
    };
    Ok((params, LossTrace::from_losses(losses, val_loss)))
}

/// Mean next-code cross-entropy over every target of `set`.
pub fn evaluate_loss(params: &ModelParams, set: &[TrainingSequence], vocab: &Vocabulary) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in set {
        let (tokens, targets) = seq.encode(vocab, params.dims.max_positions)?;
        let x = embed(&tokens, params);
        let h = block(&x, params, true);
        let probs = softmax_rows(h.dot(&params.w_out) + &params.b_out);
        for (p, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                total -= probs[[p, *t]].ln();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
