//! Tuning modes, optimization and training.
//!
//! A [`TuningMode`] fully determines the trainable parameter set:
//!
//! * `FullFineTune` — every backbone parameter (including batch-norm affine
//!   terms, never the running statistics) plus the head,
//! * `LinearProbe` — the head only,
//! * `BiasTuning` — every bias / batch-norm shift term plus the head,
//! * `Adapter` — all adapter parameters plus the head; the backbone stays
//!   fully frozen.
//!
//! Optimization is AdamW (decoupled weight decay, applied only to rank ≥ 2
//! weight tensors — never to α, biases or batch-norm affines unless the
//! `decay_alpha` flag opts α in) under a cosine schedule with linear warmup.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::adapter::AdapterConfig;
use crate::backbone::{AttachScheme, BackboneConfig, ForwardOut, Model};
use crate::data::{augment_batch, AugmentRecipe, Dataset};
use crate::error::{Error, Result};
use crate::params::{seeded_rng, ParamSet};
use crate::tape::Tape;
use crate::tensor::Elem;

/// Batch-norm running statistics are buffers, not tunable parameters.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Selects which parameters train.
#[derive(Debug, Clone, PartialEq)]
pub enum TuningMode {
    FullFineTune,
    LinearProbe,
    BiasTuning,
    Adapter {
        scheme: AttachScheme,
        config: AdapterConfig,
    },
}

impl TuningMode {
    pub fn name(&self) -> &'static str {
        match self {
            TuningMode::FullFineTune => "full_ft",
            TuningMode::LinearProbe => "linear_probe",
            TuningMode::BiasTuning => "bias_tuning",
            TuningMode::Adapter { .. } => "adapter",
        }
    }
}

/// Names of the parameters that train under `mode`.
pub fn select_trainable<M: Model>(model: &M, mode: &TuningMode) -> Result<BTreeSet<String>> {
    if matches!(mode, TuningMode::Adapter { .. }) && !model.is_adapted() {
        return Err(Error::Config(
            "Adapter tuning mode requires a model with attached adapters".into(),
        ));
    }
    let selected = model
        .params()
        .iter()
        .filter(|p| {
            let n = p.name.as_str();
            if is_buffer(n) {
                return false;
            }
            match mode {
                TuningMode::FullFineTune => !n.starts_with("adapter."),
                TuningMode::LinearProbe => n.starts_with("head."),
                TuningMode::BiasTuning => {
                    n.starts_with("head.")
                        || (!n.starts_with("adapter.")
                            && (n.ends_with(".beta") || n.ends_with(".bias")))
                }
                TuningMode::Adapter { .. } => {
                    n.starts_with("adapter.") || n.starts_with("head.")
                }
            }
        })
        .map(|p| p.name.clone())
        .collect();
    Ok(selected)
}

/// Applies `mode` to the model's trainable flags and returns the selection.
pub fn apply_tuning_mode<M: Model>(model: &mut M, mode: &TuningMode) -> Result<BTreeSet<String>> {
    let selected = select_trainable(model, mode)?;
    model
        .params_mut()
        .set_trainable_where(|p| selected.contains(&p.name));
    Ok(selected)
}

/// Total element count of the trainable set under `mode`.
pub fn count_trainable_params<M: Model>(model: &M, mode: &TuningMode) -> Result<usize> {
    let selected = select_trainable(model, mode)?;
    Ok(model
        .params()
        .count_where(|p| selected.contains(&p.name)))
}

/// Copies tape gradients into the `grad` field of every trainable parameter.
/// Frozen parameters keep `grad == None`.
pub fn collect_grads<E: Elem>(
    tape: &Tape<E>,
    out: &ForwardOut,
    params: &mut ParamSet,
) -> Result<()> {
    for i in 0..params.len() {
        if params.at(i).trainable {
            let name = params.at(i).name.clone();
            let g = tape
                .grad_f32(out.bound[i])
                .ok_or_else(|| Error::Contract(alloc::format!(
                    "no gradient reached trainable parameter {name}"
                )))?;
            params.at_mut(i).grad = Some(g);
        } else {
            params.at_mut(i).grad = None;
        }
    }
    Ok(())
}

// ── AdamW ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Opt the scaling vector α into weight decay (excluded by default,
    /// like biases and batch-norm affines).
    pub decay_alpha: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_alpha: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    steps: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            steps: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// One update over every trainable parameter at learning rate `lr`.
    /// Gradients must be present and finite; a NaN gradient aborts with the
    /// offending parameter named.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        self.steps += 1;
        self.beta1_pow *= self.config.beta1;
        self.beta2_pow *= self.config.beta2;
        let m_corr = 1.0 - self.beta1_pow;
        let v_corr = 1.0 - self.beta2_pow;
        let c = self.config;
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::Contract(alloc::format!("missing gradient for {}", p.name))
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: alloc::format!("gradient of {}", p.name),
                });
            }
            let decay = c.weight_decay != 0.0
                && (p.tensor.rank() >= 2 || (c.decay_alpha && p.name.ends_with(".alpha")));
            let mom = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    m: alloc::vec![0.0; grad.len()],
                    v: alloc::vec![0.0; grad.len()],
                });
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] as f64;
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = mom.m[i] / m_corr;
                let v_hat = mom.v[i] / v_corr;
                let w = data[i] as f64;
                let mut update = lr * m_hat / (libm::sqrt(v_hat) + c.eps);
                if decay {
                    update += lr * c.weight_decay * w;
                }
                data[i] = (w - update) as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` followed by a cosine decay to zero.
///
/// The ramp value at `step` is `base_lr * (step + 1) / warmup_steps`; the
/// cosine phase runs `base_lr * 0.5 * (1 + cos(pi * progress))` over the
/// remaining steps.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(step < total_steps.max(1));
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentRecipe,
    pub decay_alpha: bool,
}

impl TrainConfig {
    pub fn new(lr: f64, total_epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            lr,
            weight_decay: 0.0,
            total_epochs,
            warmup_epochs: total_epochs / 10,
            batch_size,
            seed,
            augment: AugmentRecipe::None,
            decay_alpha: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(alloc::format!("lr must be > 0, got {}", self.lr)));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(alloc::format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs,
                self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    /// True when the loss went non-finite; `epochs` then holds the partial
    /// record up to the aborted epoch.
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_accuracy)
    }
}

/// Trains `model` in place. Trainable flags must already be applied (see
/// [`apply_tuning_mode`]); everything is deterministic in `cfg.seed`.
pub fn train<M: Model>(
    model: &mut M,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let n = train_data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.total_epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        decay_alpha: cfg.decay_alpha,
        ..AdamWConfig::default()
    });
    let mut outcome = TrainOutcome::default();
    let mut step = 0usize;
    for epoch in 0..cfg.total_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(cfg.seed, 2 * epoch as u64 + 2));
        let mut aug_rng = seeded_rng(cfg.seed, 2 * epoch as u64 + 3);
        let epoch_lr = cosine_warmup_lr(step, total_steps, warmup_steps, cfg.lr);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut images, labels) = train_data.batch(chunk)?;
            augment_batch(&mut images, &cfg.augment, &mut aug_rng)?;
            let lr_t = cosine_warmup_lr(step, total_steps, warmup_steps, cfg.lr);
            let mut tape = Tape::<f32>::new();
            let out = model.forward(&mut tape, &images)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let loss_value = tape.scalar(loss)?;
            if !loss_value.is_finite() {
                outcome.diverged = true;
                return Ok(outcome);
            }
            tape.backward(loss)?;
            collect_grads(&tape, &out, model.params_mut())?;
            opt.step(model.params_mut(), lr_t)?;
            loss_sum += loss_value * chunk.len() as f64;
            step += 1;
        }
        let val_accuracy = match val_data {
            Some(v) => Some(evaluate(model, v, cfg.batch_size)?),
            None => None,
        };
        outcome.epochs.push(EpochStats {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / n as f64,
            val_accuracy,
        });
    }
    Ok(outcome)
}

/// Per-sample argmax predictions (first maximum wins ties).
pub fn predict<M: Model>(model: &M, data: &Dataset, batch_size: usize) -> Result<Vec<u32>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let n = data.len();
    let mut preds = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let (images, _) = data.batch(chunk)?;
        let mut tape = Tape::<f32>::inference();
        let out = model.forward(&mut tape, &images)?;
        let logits = tape.value(out.logits);
        let k = logits.shape()[1];
        for row in 0..chunk.len() {
            let row_data = &logits.data()[row * k..(row + 1) * k];
            let mut best = 0usize;
            for (i, &v) in row_data.iter().enumerate() {
                if v > row_data[best] {
                    best = i;
                }
            }
            preds.push(best as u32);
        }
    }
    Ok(preds)
}

/// Top-1 accuracy on `data`.
pub fn evaluate<M: Model>(model: &M, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let preds = predict(model, data, batch_size)?;
    let correct = preds
        .iter()
        .enumerate()
        .filter(|(i, &p)| p == data.label(*i))
        .count();
    Ok(correct as f64 / data.len() as f64)
}

// ── Grid search ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// Compression factors to sweep; only meaningful in Adapter mode, where
    /// an empty list keeps the mode's configured γ.
    pub gammas: Vec<usize>,
}

impl Grid {
    /// The grid-search ranges used throughout: lr over
    /// {1e-3, 5e-4, 1e-4, 5e-5, 1e-5}, weight decay over {1e-2, 1e-3, 1e-4, 0}.
    pub fn standard() -> Self {
        Grid {
            lrs: alloc::vec![1e-3, 5e-4, 1e-4, 5e-5, 1e-5],
            weight_decays: alloc::vec![1e-2, 1e-3, 1e-4, 0.0],
            gammas: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: Option<usize>,
    pub val_accuracy: f64,
    pub trainable_params: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct GridSearchOutcome {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

/// `a` beats `b` on (higher accuracy, then fewer trainable parameters, then
/// smaller lr, then smaller weight decay).
pub fn trial_beats(a: &Trial, b: &Trial) -> bool {
    if a.val_accuracy != b.val_accuracy {
        return a.val_accuracy > b.val_accuracy;
    }
    if a.trainable_params != b.trainable_params {
        return a.trainable_params < b.trainable_params;
    }
    if a.lr != b.lr {
        return a.lr < b.lr;
    }
    a.weight_decay < b.weight_decay
}

/// Exhaustive grid search; `factory` builds a fresh mode-applied model for
/// each trial. Diverged trials score zero accuracy.
pub fn grid_search<M, F>(
    factory: F,
    mode: &TuningMode,
    grid: &Grid,
    train_data: &Dataset,
    val_data: &Dataset,
    base: &TrainConfig,
) -> Result<GridSearchOutcome>
where
    M: Model,
    F: Fn(&TuningMode) -> Result<M>,
{
    if grid.lrs.is_empty() || grid.weight_decays.is_empty() {
        return Err(Error::Config("grid search needs nonempty lr and wd lists".into()));
    }
    let gammas: Vec<Option<usize>> = match mode {
        TuningMode::Adapter { .. } if !grid.gammas.is_empty() => {
            grid.gammas.iter().map(|&g| Some(g)).collect()
        }
        _ => alloc::vec![None],
    };
    let mut trials = Vec::new();
    for &lr in &grid.lrs {
        for &wd in &grid.weight_decays {
            for &gamma in &gammas {
                let trial_mode = match (mode, gamma) {
                    (TuningMode::Adapter { scheme, config }, Some(g)) => TuningMode::Adapter {
                        scheme: *scheme,
                        config: AdapterConfig { gamma: g, ..*config },
                    },
                    _ => mode.clone(),
                };
                let mut model = factory(&trial_mode)?;
                apply_tuning_mode(&mut model, &trial_mode)?;
                let trainable_params = count_trainable_params(&model, &trial_mode)?;
                let cfg = TrainConfig {
                    lr,
                    weight_decay: wd,
                    ..base.clone()
                };
                let outcome = train(&mut model, train_data, None, &cfg)?;
                let val_accuracy = if outcome.diverged {
                    0.0
                } else {
                    evaluate(&model, val_data, base.batch_size)?
                };
                trials.push(Trial {
                    lr,
                    weight_decay: wd,
                    gamma,
                    val_accuracy,
                    trainable_params,
                    diverged: outcome.diverged,
                });
            }
        }
    }
    let mut best = trials[0].clone();
    for t in &trials[1..] {
        if trial_beats(t, &best) {
            best = t.clone();
        }
    }
    Ok(GridSearchOutcome { best, trials })
}

// ── Closed-form parameter accounting ─────────────────────────────────

/// Closed-form parameter counts, checked against enumeration in tests and
/// used by the `count-params` command.
pub mod counts {
    use super::*;
    use crate::adapter::adapter_param_count_opts;
    use crate::backbone::BlockDims;

    /// gamma + beta of one batch norm.
    pub fn bn_affine(c: usize) -> usize {
        2 * c
    }

    /// All tunable parameters of one block: three conv weights, their batch
    /// norm affines, and the downsample projection when present.
    pub fn block_params(dims: &BlockDims, k: usize) -> usize {
        let conv1 = dims.c_in * dims.c_mid;
        let conv2 = k * k * dims.c_mid * dims.c_mid;
        let conv3 = dims.c_mid * dims.c_out;
        let mut total = conv1 + conv2 + conv3
            + bn_affine(dims.c_mid) * 2
            + bn_affine(dims.c_out);
        if dims.has_downsample() {
            total += dims.c_in * dims.c_out + bn_affine(dims.c_out);
        }
        total
    }

    pub fn stem_params(config: &BackboneConfig) -> usize {
        let c = config.stages[0].c_in;
        config.input_channels * c * config.kernel_size * config.kernel_size + bn_affine(c)
    }

    pub fn head_params(config: &BackboneConfig) -> usize {
        config.num_classes * config.feature_dim() + config.num_classes
    }

    /// Trainable count under full fine-tuning.
    pub fn full_ft(config: &BackboneConfig, include_head: bool) -> usize {
        let mut total = stem_params(config);
        for dims in config.blocks() {
            total += block_params(&dims, config.kernel_size);
        }
        if include_head {
            total += head_params(config);
        }
        total
    }

    pub fn linear_probe(config: &BackboneConfig) -> usize {
        head_params(config)
    }

    /// Trainable count under bias tuning: batch-norm shift terms plus head.
    pub fn bias_tuning(config: &BackboneConfig, include_head: bool) -> usize {
        let mut total = config.stages[0].c_in; // stem bn beta
        for dims in config.blocks() {
            total += dims.c_mid * 2 + dims.c_out;
            if dims.has_downsample() {
                total += dims.c_out;
            }
        }
        if include_head {
            total += head_params(config);
        }
        total
    }

    /// Trainable count under an adapter scheme.
    pub fn adapter_mode(
        config: &BackboneConfig,
        scheme: AttachScheme,
        adapter: &AdapterConfig,
        include_alpha: bool,
        include_head: bool,
    ) -> Result<usize> {
        let mut total = 0;
        for dims in config.blocks() {
            let (c_in, c_out, _) = scheme.site_dims(&dims);
            total += adapter_param_count_opts(adapter, c_in, c_out, include_alpha)?;
        }
        if include_head {
            total += head_params(config);
        }
        Ok(total)
    }

    /// Trainable fraction of an adapter scheme relative to full fine-tuning.
    /// `include_head` controls both numerator and denominator; excluding it
    /// reports the backbone-only figure.
    pub fn fraction_of_full_ft(
        config: &BackboneConfig,
        scheme: AttachScheme,
        adapter: &AdapterConfig,
        include_head: bool,
    ) -> Result<f64> {
        let num = adapter_mode(config, scheme, adapter, true, include_head)?;
        let den = full_ft(config, include_head);
        Ok(num as f64 / den as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{attach_adapters, build_backbone};
    use crate::params::Parameter;
    use crate::tensor::Tensor;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn adamw_zero_grad_leaves_params() {
        let mut set = ParamSet::new();
        let mut p = Parameter::new("w", Tensor::filled(vec![2, 2], 1.5), true);
        p.grad = Some(vec![0.0; 4]);
        set.insert(p).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut set, 0.1).unwrap();
        assert!(set.get("w").unwrap().tensor.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn adamw_first_step_hand_value() {
        let mut set = ParamSet::new();
        let mut p = Parameter::new("w", Tensor::filled(vec![1], 1.0), true);
        p.grad = Some(vec![1.0]);
        set.insert(p).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut set, 0.1).unwrap();
        let w = set.get("w").unwrap().tensor.data()[0];
        assert!((w - 0.9).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn adamw_decoupled_decay_shrinks_weights() {
        let mut set = ParamSet::new();
        let mut p = Parameter::new("w", Tensor::filled(vec![2, 1], 2.0), true);
        p.grad = Some(vec![0.0, 0.0]);
        set.insert(p).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut set, 0.1).unwrap();
        for &v in set.get("w").unwrap().tensor.data() {
            assert!((v - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_skips_decay_on_rank1() {
        // alpha/bias-like tensors never decay unless opted in.
        let mut set = ParamSet::new();
        let mut p = Parameter::new("adapter.0.alpha", Tensor::filled(vec![3], 1.0), true);
        p.grad = Some(vec![0.0; 3]);
        set.insert(p).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut set, 0.1).unwrap();
        assert!(set.get("adapter.0.alpha").unwrap().tensor.data().iter().all(|&v| v == 1.0));

        let mut opt_in = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            decay_alpha: true,
            ..AdamWConfig::default()
        });
        set.get_mut("adapter.0.alpha").unwrap().grad = Some(vec![0.0; 3]);
        opt_in.step(&mut set, 0.1).unwrap();
        assert!(set.get("adapter.0.alpha").unwrap().tensor.data().iter().all(|&v| v == 0.95));
    }

    #[test]
    fn adamw_names_nan_parameter() {
        let mut set = ParamSet::new();
        let mut p = Parameter::new("stage.0.block.0.conv1.weight", Tensor::filled(vec![1, 1], 1.0), true);
        p.grad = Some(vec![f32::NAN]);
        set.insert(p).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        match opt.step(&mut set, 0.1) {
            Err(Error::NonFinite { what }) => assert!(what.contains("conv1.weight")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn schedule_ramp_and_cosine_anchor_points() {
        let base = 0.4;
        // Ramp: base*(step+1)/warmup.
        assert!((cosine_warmup_lr(0, 100, 10, base) - base * 0.1).abs() < 1e-15);
        assert!((cosine_warmup_lr(9, 100, 10, base) - base).abs() < 1e-15);
        // End of warmup is exactly base.
        assert!((cosine_warmup_lr(10, 100, 10, base) - base).abs() < 1e-15);
        // Midpoint of the cosine phase is base/2.
        assert!((cosine_warmup_lr(55, 100, 10, base) - base / 2.0).abs() < 1e-9);
    }

    #[test]
    fn linear_probe_selects_exactly_head() {
        let model = build_backbone(&BackboneConfig::tiny(3, 1), 0).unwrap();
        let set = select_trainable(&model, &TuningMode::LinearProbe).unwrap();
        assert_eq!(
            set.into_iter().collect::<Vec<_>>(),
            vec!["head.bias".to_string(), "head.weight".to_string()]
        );
    }

    #[test]
    fn bias_tuning_is_strictly_smaller_than_full_ft() {
        let model = build_backbone(&BackboneConfig::desk_default(5, 3), 0).unwrap();
        let bias = count_trainable_params(&model, &TuningMode::BiasTuning).unwrap();
        let full = count_trainable_params(&model, &TuningMode::FullFineTune).unwrap();
        assert!(bias < full);
    }

    #[test]
    fn adapter_mode_requires_adapted_model() {
        let model = build_backbone(&BackboneConfig::tiny(3, 1), 0).unwrap();
        let mode = TuningMode::Adapter {
            scheme: AttachScheme::ConvParallel,
            config: AdapterConfig::new(1, 3),
        };
        assert!(matches!(select_trainable(&model, &mode), Err(Error::Config(_))));
    }

    #[test]
    fn adapter_selection_is_adapters_plus_head() {
        let backbone = build_backbone(&BackboneConfig::tiny(3, 1), 0).unwrap();
        let cfg = AdapterConfig::new(1, 3);
        let model = attach_adapters(backbone, AttachScheme::ConvParallel, &cfg, 1).unwrap();
        let mode = TuningMode::Adapter {
            scheme: AttachScheme::ConvParallel,
            config: cfg,
        };
        let set = select_trainable(&model, &mode).unwrap();
        for name in &set {
            assert!(name.starts_with("adapter.") || name.starts_with("head."));
        }
        assert!(set.contains("adapter.0.w_down"));
        assert!(set.contains("adapter.0.w_up"));
        assert!(set.contains("adapter.0.alpha"));
        assert!(set.contains("head.weight"));
    }

    #[test]
    fn closed_form_counts_match_enumeration() {
        let config = BackboneConfig::desk_default(7, 3);
        let model = build_backbone(&config, 0).unwrap();
        assert_eq!(
            counts::full_ft(&config, true),
            count_trainable_params(&model, &TuningMode::FullFineTune).unwrap()
        );
        assert_eq!(
            counts::linear_probe(&config),
            count_trainable_params(&model, &TuningMode::LinearProbe).unwrap()
        );
        assert_eq!(
            counts::bias_tuning(&config, true),
            count_trainable_params(&model, &TuningMode::BiasTuning).unwrap()
        );
        for scheme in AttachScheme::ALL {
            let acfg = AdapterConfig::new(2, 3);
            let adapted = attach_adapters(build_backbone(&config, 0).unwrap(), scheme, &acfg, 1).unwrap();
            let mode = TuningMode::Adapter { scheme, config: acfg };
            assert_eq!(
                counts::adapter_mode(&config, scheme, &acfg, true, true).unwrap(),
                count_trainable_params(&adapted, &mode).unwrap(),
                "{}",
                scheme.name()
            );
        }
    }

    #[test]
    fn residual_parallel_counts_exceed_conv_parallel() {
        // Whenever C_in > C_mid, adapting whole blocks costs strictly more.
        let config = BackboneConfig::desk_default(7, 3);
        let acfg = AdapterConfig::new(2, 3);
        let conv = counts::adapter_mode(&config, AttachScheme::ConvParallel, &acfg, true, true).unwrap();
        let res = counts::adapter_mode(&config, AttachScheme::ResidualParallel, &acfg, true, true).unwrap();
        assert!(res > conv);
    }
}
