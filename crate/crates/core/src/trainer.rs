//! Prompt optimization: SGD with momentum and weight decay, a per-step cosine
//! learning-rate schedule, deterministic shuffling, and a finite-difference
//! gradient check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{FrozenTextEncoder, ToyTextEncoder, Tokenizer};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights, Objective};
use crate::prompts::{init_prompt_set, PriorBank, PromptSet, PrototypeMode};
use crate::store::{EmbeddingStore, Label};
use crate::vector;

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub num_unknown: usize,
    pub context_len: usize,
    pub d_tok: usize,
    pub d_hid: usize,
    pub d_emb: usize,
    pub tau: f64,
    pub eta: f64,
    pub lambda: [f64; 4],
    pub prototype_mode: PrototypeMode,
    pub normalize_embeddings: bool,
    pub encoder_seed: u64,
    pub vocab_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            num_unknown: 12,
            context_len: 4,
            d_tok: crate::encoder::DEFAULT_D_TOK,
            d_hid: crate::encoder::DEFAULT_D_HID,
            d_emb: crate::encoder::DEFAULT_D_EMB,
            tau: 0.01,
            eta: 2.0,
            lambda: [0.5, 1.0, 1.0, 1.0],
            prototype_mode: PrototypeMode::PromptSpace,
            normalize_embeddings: true,
            encoder_seed: 0,
            vocab_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad(format!("lr_min must be in [0, lr], got {}", self.lr_min));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be ≥ 1".into());
        }
        if self.num_unknown == 0 || self.context_len == 0 {
            return bad("num_unknown and context_len must be ≥ 1".into());
        }
        if self.d_tok == 0 || self.d_hid == 0 || self.d_emb == 0 {
            return Err(Error::ZeroDim);
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            eta: self.eta,
            tau: self.tau,
        }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.vocab_seed, self.d_tok)
    }

    pub fn encoder(&self) -> Result<ToyTextEncoder> {
        Ok(ToyTextEncoder::new(self.d_tok, self.d_hid, self.d_emb, self.encoder_seed)?
            .with_normalized_output(self.normalize_embeddings))
    }

    /// `key = value` lines in sorted key order; the basis of [`TrainConfig::hash`].
    pub fn canonical_lines(&self) -> Vec<(String, String)> {
        let mut lines = vec![
            ("lr".to_owned(), fmt_f64(self.lr)),
            ("lr_min".to_owned(), fmt_f64(self.lr_min)),
            ("momentum".to_owned(), fmt_f64(self.momentum)),
            ("weight_decay".to_owned(), fmt_f64(self.weight_decay)),
            ("batch_size".to_owned(), self.batch_size.to_string()),
            ("epochs".to_owned(), self.epochs.to_string()),
            ("seed".to_owned(), self.seed.to_string()),
            ("num_unknown".to_owned(), self.num_unknown.to_string()),
            ("context_len".to_owned(), self.context_len.to_string()),
            ("d_tok".to_owned(), self.d_tok.to_string()),
            ("d_hid".to_owned(), self.d_hid.to_string()),
            ("d_emb".to_owned(), self.d_emb.to_string()),
            ("tau".to_owned(), fmt_f64(self.tau)),
            ("eta".to_owned(), fmt_f64(self.eta)),
            ("prototype_mode".to_owned(), self.prototype_mode.to_string()),
            ("normalize_embeddings".to_owned(), self.normalize_embeddings.to_string()),
            ("encoder_seed".to_owned(), self.encoder_seed.to_string()),
            ("vocab_seed".to_owned(), self.vocab_seed.to_string()),
        ];
        for (i, l) in self.lambda.iter().enumerate() {
            lines.push((format!("lambda{}", i + 1), fmt_f64(*l)));
        }
        lines.sort();
        lines
    }

    /// SHA-256 of the canonical lines, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical_lines() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Shortest round-trip representation.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Cosine-annealed learning rate at `step` of `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidParameter(format!(
            "step {step} outside [0, {total_steps}]"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Momentum buffers for the flattened prompt parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<f64>,
    step: usize,
    total_steps: usize,
}

impl OptimizerState {
    pub fn new(num_params: usize, total_steps: usize) -> Self {
        OptimizerState {
            velocity: vec![0.0; num_params],
            step: 0,
            total_steps,
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }
}

/// One SGD update: `g' = g + wd·θ`, `v ← μv + g'`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    Error::check_dim(params.len(), grads.len())?;
    Error::check_dim(params.len(), state.velocity.len())?;
    if state.step >= state.total_steps {
        return Err(Error::InvalidParameter(format!(
            "optimizer already ran {} of {} steps",
            state.step, state.total_steps
        )));
    }
    for ((theta, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let g = g + weight_decay * *theta;
        *v = momentum * *v + g;
        *theta -= lr * *v;
    }
    state.step += 1;
    Ok(())
}

/// One optimizer step as recorded in the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub dc: f64,
    pub con: f64,
    pub div: f64,
    pub gui: f64,
    pub total: f64,
}

impl StepLog {
    fn new(step: usize, lr: f64, b: &LossBreakdown) -> Self {
        StepLog {
            step,
            lr,
            dc: b.dc,
            con: b.con,
            div: b.div,
            gui: b.gui,
            total: b.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub prompts: PromptSet,
    pub log: Vec<StepLog>,
    pub steps_per_epoch: usize,
}

impl FitOutput {
    /// Mean total loss of each epoch.
    pub fn epoch_mean_totals(&self) -> Vec<f64> {
        self.log
            .chunks(self.steps_per_epoch)
            .map(|c| c.iter().map(|s| s.total).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Image embeddings as `f64`, unit-normalized when the config asks for it.
pub fn prepare_embeddings(store: &EmbeddingStore, normalize: bool) -> Result<Vec<Vec<f64>>> {
    store
        .vectors_f64()
        .into_iter()
        .map(|v| if normalize { vector::normalize(&v) } else { Ok(v) })
        .collect()
}

/// Learns the prompt set from real-only embeddings.
pub fn fit(
    config: &TrainConfig,
    reals: &EmbeddingStore,
    bank: &PriorBank,
    encoder: &dyn FrozenTextEncoder,
    tokenizer: &Tokenizer,
) -> Result<FitOutput> {
    config.validate()?;
    if reals.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(r) = reals.rows().iter().find(|r| r.meta.label != Label::Real) {
        return Err(Error::SpoofInTraining(r.meta.id.clone()));
    }
    Error::check_dim(encoder.embed_dim(), reals.dim())?;
    Error::check_dim(encoder.token_dim(), tokenizer.d_tok)?;

    let data = prepare_embeddings(reals, config.normalize_embeddings)?;
    let mut prompts = init_prompt_set(config.context_len, config.num_unknown, config.seed, tokenizer)?;
    let objective = Objective {
        encoder,
        bank,
        weights: config.weights(),
        mode: config.prototype_mode,
    };

    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut state = OptimizerState::new(prompts.num_parameters(), total_steps);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(total_steps);
    let mut params = prompts.flatten();

    for _epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let step = state.step();
            let lr = cosine_lr(step, total_steps, config.lr, config.lr_min)?;
            let (breakdown, grad) = objective.value_and_grad(&batch, &prompts)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
            sgd_step(&mut params, &grad, &mut state, lr, config.momentum, config.weight_decay)?;
            prompts.assign_flat(&params)?;
            log.push(StepLog::new(step, lr, &breakdown));
        }
    }
    Ok(FitOutput {
        prompts,
        log,
        steps_per_epoch,
    })
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    pub worst_coordinate: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-3;
/// Magnitude under which gradient coordinates are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Relative error with a denominator floor of [`GRAD_CHECK_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Checks the analytic gradient at `set` over every learnable coordinate.
pub fn grad_check_at(
    objective: &Objective<'_>,
    batch: &[Vec<f64>],
    set: &PromptSet,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective.value_and_grad(batch, set)?;
    let base = set.flatten();
    let mut probe = set.clone();
    let mut eval = |params: &[f64]| -> Result<f64> {
        probe.assign_flat(params)?;
        Ok(objective.value(batch, &probe)?.total)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: base.len(),
        worst_coordinate: 0,
    };
    let mut params = base.clone();
    for k in 0..base.len() {
        let mut at = |offset: f64| {
            params[k] = base[k] + offset * GRAD_CHECK_STEP;
            eval(&params)
        };
        // Five-point stencil, truncation error O(h⁴).
        let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
        params[k] = base[k];
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * GRAD_CHECK_STEP);
        let rel = relative_error(analytic[k], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[k] - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = k;
        }
    }
    Ok(report)
}

/// `n` random unit vectors, a stand-in image batch for gradient checks.
pub fn sample_unit_batch(n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            vector::normalize(&v)
        })
        .collect()
}

/// Gradient check at the seeded initial prompts of `config`.
pub fn grad_check(
    config: &TrainConfig,
    batch: &[Vec<f64>],
    bank: &PriorBank,
    encoder: &dyn FrozenTextEncoder,
    tokenizer: &Tokenizer,
) -> Result<GradCheckReport> {
    config.validate()?;
    let set = init_prompt_set(config.context_len, config.num_unknown, config.seed, tokenizer)?;
    let objective = Objective {
        encoder,
        bank,
        weights: config.weights(),
        mode: config.prototype_mode,
    };
    grad_check_at(&objective, batch, &set)
}
