//! Command implementations: building models from configs, training with
//! wall-clock accounting, threaded sweeps and evaluation, parameter
//! accounting, similarity analysis, gradient checking and dataset
//! generation.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use petkit_core::adapter::AdapterConfig;
use petkit_core::analysis::{average_cka, extract_features, gaussian_mmd, Bandwidth, MmdEstimator};
use petkit_core::backbone::{
    attach_adapters, build_backbone, AttachScheme, BackboneConfig, Backbone, ForwardOut, Model,
};
use petkit_core::data::{split_train_val, Dataset, FewShotSpec};
use petkit_core::gradcheck::{check_model, check_primitives, CheckResult};
use petkit_core::params::{seeded_rng, uniform_tensor, ParamSet};
use petkit_core::synth::{make_synthetic_task, SynthKind};
use petkit_core::tensor::{Elem, Tensor};
use petkit_core::tuning::{
    self, apply_tuning_mode, count_trainable_params, evaluate, train, trial_beats, TrainConfig,
    Trial, TuningMode,
};
use petkit_core::Tape;
use serde::Serialize;

use crate::checkpoint::{load_into, param_checksum, read_checkpoint, write_checkpoint};
use crate::config::RunConfig;
use crate::container::{read_dataset, read_features, write_dataset, write_features};
use crate::metrics::{sig6, unix_timestamp, write_json, write_metrics_csv};
use crate::{Error, Result};

/// A plain or adapted model behind one `Model` facade.
#[derive(Debug, Clone)]
pub enum ModelKind {
    Plain(Backbone),
    Adapted(petkit_core::backbone::AdaptedModel),
}

impl Model for ModelKind {
    fn params(&self) -> &ParamSet {
        match self {
            ModelKind::Plain(m) => m.params(),
            ModelKind::Adapted(m) => m.params(),
        }
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            ModelKind::Plain(m) => m.params_mut(),
            ModelKind::Adapted(m) => m.params_mut(),
        }
    }
    fn config(&self) -> &BackboneConfig {
        match self {
            ModelKind::Plain(m) => m.config(),
            ModelKind::Adapted(m) => m.config(),
        }
    }
    fn is_adapted(&self) -> bool {
        matches!(self, ModelKind::Adapted(_))
    }
    fn forward_with<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        input: &Tensor,
        override_param: Option<(usize, &[E])>,
    ) -> petkit_core::Result<ForwardOut> {
        match self {
            ModelKind::Plain(m) => m.forward_with(tape, input, override_param),
            ModelKind::Adapted(m) => m.forward_with(tape, input, override_param),
        }
    }
}

/// Builds the configured model with its tuning mode applied.
pub fn build_model(backbone: &BackboneConfig, mode: &TuningMode, seed: u64) -> Result<ModelKind> {
    let base = build_backbone(backbone, seed)?;
    let mut model = match mode {
        TuningMode::Adapter { scheme, config } => {
            ModelKind::Adapted(attach_adapters(base, *scheme, config, seed)?)
        }
        _ => ModelKind::Plain(base),
    };
    apply_tuning_mode(&mut model, mode)?;
    Ok(model)
}

fn load_split(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>, Option<Dataset>)> {
    let raw = read_dataset(&cfg.data.train)?;
    let norm = cfg.data.normalize.build(raw.c);
    let train = Dataset::from_raw(&raw, &norm)?;
    let val = match &cfg.data.val {
        Some(p) => {
            let raw = read_dataset(p)?;
            Some(Dataset::from_raw(&raw, &norm)?)
        }
        None => None,
    };
    let test = match &cfg.data.test {
        Some(p) => {
            let raw = read_dataset(p)?;
            Some(Dataset::from_raw(&raw, &norm)?)
        }
        None => None,
    };
    Ok((train, val, test))
}

fn round6(v: f64) -> f64 {
    sig6(v).parse().unwrap_or(v)
}

/// Evaluates accuracy with the dataset sharded over worker threads. Each
/// shard counts correct predictions independently, so the result is
/// identical to the sequential pass.
pub fn evaluate_parallel<M: Model + Sync>(
    model: &M,
    data: &Dataset,
    batch_size: usize,
    threads: usize,
) -> Result<f64> {
    if threads <= 1 || data.len() < 2 * batch_size {
        return Ok(evaluate(model, data, batch_size)?);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let shards: Vec<&[usize]> = indices.chunks(data.len().div_ceil(threads)).collect();
    let correct = Mutex::new(0usize);
    let first_err: Mutex<Option<petkit_core::Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for shard in &shards {
            let correct = &correct;
            let first_err = &first_err;
            scope.spawn(move || {
                let mut local = 0usize;
                for chunk in shard.chunks(batch_size) {
                    let (images, labels) = match data.batch(chunk) {
                        Ok(b) => b,
                        Err(e) => {
                            first_err.lock().unwrap().get_or_insert(e);
                            return;
                        }
                    };
                    let mut tape = Tape::<f32>::inference();
                    let out = match model.forward(&mut tape, &images) {
                        Ok(o) => o,
                        Err(e) => {
                            first_err.lock().unwrap().get_or_insert(e);
                            return;
                        }
                    };
                    let logits = tape.value(out.logits);
                    let k = logits.shape()[1];
                    for (row, &label) in labels.iter().enumerate() {
                        let row_data = &logits.data()[row * k..(row + 1) * k];
                        let mut best = 0usize;
                        for (i, &v) in row_data.iter().enumerate() {
                            if v > row_data[best] {
                                best = i;
                            }
                        }
                        if best as u32 == label {
                            local += 1;
                        }
                    }
                }
                *correct.lock().unwrap() += local;
            });
        }
    });
    if let Some(e) = first_err.into_inner().unwrap() {
        return Err(e.into());
    }
    Ok(correct.into_inner().unwrap() as f64 / data.len() as f64)
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub timestamp_unix: u64,
    pub mode: String,
    pub scheme: Option<String>,
    pub seed: u64,
    pub epochs_completed: usize,
    pub diverged: bool,
    pub final_train_loss: Option<f64>,
    pub final_val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub fraction_of_full_ft: f64,
    pub wall_seconds: f64,
    pub freeze_invariant_ok: bool,
    pub checkpoint: String,
}

impl TrainSummary {
    pub fn ok(&self) -> bool {
        !self.diverged && self.freeze_invariant_ok
    }
}

pub fn cmd_train(cfg: &RunConfig, threads: usize) -> Result<TrainSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let (full_train, val, test) = load_split(cfg)?;
    let (train_set, val_set) = match val {
        Some(v) => (full_train, Some(v)),
        None if cfg.train.total_epochs > 0 => {
            let (t, v) = split_train_val(&full_train, cfg.data.val_fraction, cfg.train.seed)?;
            (t, Some(v))
        }
        None => (full_train, None),
    };
    let mut model = build_model(&cfg.backbone, &cfg.mode, cfg.train.seed)?;
    let trainable_params = count_trainable_params(&model, &cfg.mode)?;
    let total_params = model.params().count_where(|_| true);
    let full_ft = tuning::counts::full_ft(&cfg.backbone, true);
    let frozen_before = param_checksum(model.params(), |p| !p.trainable);

    let started = Instant::now();
    let outcome = train(&mut model, &train_set, val_set.as_ref(), &cfg.train)?;
    let wall_seconds = started.elapsed().as_secs_f64();

    let frozen_after = param_checksum(model.params(), |p| !p.trainable);
    let test_accuracy = match &test {
        Some(t) => Some(evaluate_parallel(&model, t, cfg.train.batch_size, threads)?),
        None => None,
    };

    let ckpt_path = cfg.out_dir.join("checkpoint.petk");
    write_checkpoint(&ckpt_path, model.params())?;
    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &outcome.epochs)?;

    let summary = TrainSummary {
        timestamp_unix: unix_timestamp(),
        mode: cfg.mode.name().to_string(),
        scheme: match &cfg.mode {
            TuningMode::Adapter { scheme, .. } => Some(scheme.name().to_string()),
            _ => None,
        },
        seed: cfg.train.seed,
        epochs_completed: outcome.epochs.len(),
        diverged: outcome.diverged,
        final_train_loss: outcome.epochs.last().map(|e| round6(e.train_loss)),
        final_val_accuracy: outcome.final_val_accuracy().map(round6),
        test_accuracy: test_accuracy.map(round6),
        trainable_params,
        total_params,
        fraction_of_full_ft: round6(trainable_params as f64 / full_ft as f64),
        wall_seconds: round6(wall_seconds),
        freeze_invariant_ok: frozen_before == frozen_after,
        checkpoint: ckpt_path.display().to_string(),
    };
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

// ── evaluate ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub timestamp_unix: u64,
    pub dataset: String,
    pub samples: usize,
    pub top1_accuracy: f64,
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    dump_features: Option<&Path>,
    threads: usize,
) -> Result<EvalSummary> {
    let mut model = build_model(&cfg.backbone, &cfg.mode, cfg.train.seed)?;
    let loaded = read_checkpoint(checkpoint)?;
    load_into(model.params_mut(), &loaded)?;

    let data_path: PathBuf = match dataset {
        Some(p) => p.to_path_buf(),
        None => cfg
            .data
            .test
            .clone()
            .unwrap_or_else(|| cfg.data.train.clone()),
    };
    let raw = read_dataset(&data_path)?;
    let norm = cfg.data.normalize.build(raw.c);
    let data = Dataset::from_raw(&raw, &norm)?;
    let top1 = evaluate_parallel(&model, &data, cfg.train.batch_size, threads)?;
    if let Some(path) = dump_features {
        let features = extract_features(&model, &data, cfg.train.batch_size)?;
        write_features(path, &features)?;
    }
    Ok(EvalSummary {
        timestamp_unix: unix_timestamp(),
        dataset: data_path.display().to_string(),
        samples: data.len(),
        top1_accuracy: round6(top1),
    })
}

// ── sweep ────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct SweepTrial {
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: Option<usize>,
    pub val_accuracy: f64,
    pub trainable_params: usize,
    pub diverged: bool,
}

#[derive(Debug, Serialize)]
pub struct SweepSummary {
    pub timestamp_unix: u64,
    pub mode: String,
    pub trials: Vec<SweepTrial>,
    pub best: SweepTrial,
}

/// Grid search over (lr, weight decay, γ) with trials fanned out to worker
/// threads. Every trial is self-contained and seeded, so the outcome is
/// independent of `threads`; the tie-break order (accuracy, then fewer
/// trainable parameters, then smaller lr, then smaller weight decay) matches
/// the in-library sequential search.
pub fn cmd_sweep(cfg: &RunConfig, threads: usize) -> Result<SweepSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let (full_train, val, _) = load_split(cfg)?;
    let (train_set, val_set) = match val {
        Some(v) => (full_train, v),
        None => split_train_val(&full_train, cfg.data.val_fraction, cfg.train.seed)?,
    };

    let gammas: Vec<Option<usize>> = match &cfg.mode {
        TuningMode::Adapter { .. } if !cfg.sweep.gammas.is_empty() => {
            cfg.sweep.gammas.iter().map(|&g| Some(g)).collect()
        }
        _ => vec![None],
    };
    let mut combos = Vec::new();
    for &lr in &cfg.sweep.lrs {
        for &wd in &cfg.sweep.weight_decays {
            for &gamma in &gammas {
                combos.push((lr, wd, gamma));
            }
        }
    }
    if combos.is_empty() {
        return Err(Error::Config {
            line: None,
            detail: "sweep grid is empty".into(),
        });
    }

    let results: Vec<Mutex<Option<Trial>>> = combos.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    let workers = threads.max(1).min(combos.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= combos.len() {
                    return;
                }
                let (lr, wd, gamma) = combos[i];
                match run_trial(cfg, &train_set, &val_set, lr, wd, gamma) {
                    Ok(trial) => *results[i].lock().unwrap() = Some(trial),
                    Err(e) => {
                        first_err.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().unwrap() {
        return Err(e);
    }
    let trials: Vec<Trial> = results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every trial ran"))
        .collect();
    let mut best = trials[0].clone();
    for t in &trials[1..] {
        if trial_beats(t, &best) {
            best = t.clone();
        }
    }
    let to_row = |t: &Trial| SweepTrial {
        lr: t.lr,
        weight_decay: t.weight_decay,
        gamma: t.gamma,
        val_accuracy: round6(t.val_accuracy),
        trainable_params: t.trainable_params,
        diverged: t.diverged,
    };
    let summary = SweepSummary {
        timestamp_unix: unix_timestamp(),
        mode: cfg.mode.name().to_string(),
        trials: trials.iter().map(to_row).collect(),
        best: to_row(&best),
    };
    let mut csv = String::from("lr,weight_decay,gamma,val_accuracy,trainable_params,diverged\n");
    for t in &summary.trials {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            sig6(t.lr),
            sig6(t.weight_decay),
            t.gamma.map(|g| g.to_string()).unwrap_or_default(),
            sig6(t.val_accuracy),
            t.trainable_params,
            t.diverged
        ));
    }
    std::fs::write(cfg.out_dir.join("trials.csv"), csv)?;
    write_json(&cfg.out_dir.join("best.json"), &summary)?;
    Ok(summary)
}

fn run_trial(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    lr: f64,
    wd: f64,
    gamma: Option<usize>,
) -> Result<Trial> {
    let mode = match (&cfg.mode, gamma) {
        (TuningMode::Adapter { scheme, config }, Some(g)) => TuningMode::Adapter {
            scheme: *scheme,
            config: AdapterConfig { gamma: g, ..*config },
        },
        _ => cfg.mode.clone(),
    };
    let mut model = build_model(&cfg.backbone, &mode, cfg.train.seed)?;
    let trainable_params = count_trainable_params(&model, &mode)?;
    let train_cfg = TrainConfig {
        lr,
        weight_decay: wd,
        ..cfg.train.clone()
    };
    let outcome = train(&mut model, train_set, None, &train_cfg)?;
    let val_accuracy = if outcome.diverged {
        0.0
    } else {
        evaluate(&model, val_set, cfg.train.batch_size)?
    };
    Ok(Trial {
        lr,
        weight_decay: wd,
        gamma,
        val_accuracy,
        trainable_params,
        diverged: outcome.diverged,
    })
}

// ── count-params ─────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct CountRow {
    pub mode: String,
    pub trainable_params: usize,
    pub fraction_of_full_ft: f64,
    /// Fraction with the head excluded from numerator and denominator.
    pub fraction_without_head: f64,
    pub closed_form_matches_enumeration: bool,
}

#[derive(Debug, Serialize)]
pub struct CountReport {
    pub timestamp_unix: u64,
    pub total_params: usize,
    pub rows: Vec<CountRow>,
}

impl CountReport {
    pub fn ok(&self) -> bool {
        self.rows.iter().all(|r| r.closed_form_matches_enumeration)
    }
}

/// Per-mode trainable counts on the configured backbone, cross-checked
/// against the closed forms.
pub fn cmd_count_params(cfg: &RunConfig) -> Result<CountReport> {
    let adapter_cfg = match &cfg.mode {
        TuningMode::Adapter { config, .. } => *config,
        _ => AdapterConfig::new(4, 3),
    };
    let bb = &cfg.backbone;
    let full = tuning::counts::full_ft(bb, true);
    let full_no_head = tuning::counts::full_ft(bb, false);
    let mut rows = Vec::new();

    let plain = build_backbone(bb, cfg.train.seed)?;
    let head = tuning::counts::head_params(bb);
    for (mode, closed) in [
        (TuningMode::FullFineTune, full),
        (TuningMode::LinearProbe, tuning::counts::linear_probe(bb)),
        (TuningMode::BiasTuning, tuning::counts::bias_tuning(bb, true)),
    ] {
        let enumerated = count_trainable_params(&plain, &mode)?;
        rows.push(CountRow {
            mode: mode.name().to_string(),
            trainable_params: enumerated,
            fraction_of_full_ft: round6(enumerated as f64 / full as f64),
            fraction_without_head: round6(
                enumerated.saturating_sub(head) as f64 / full_no_head as f64,
            ),
            closed_form_matches_enumeration: closed == enumerated,
        });
    }
    for scheme in AttachScheme::ALL {
        let mode = TuningMode::Adapter {
            scheme,
            config: adapter_cfg,
        };
        let model = build_model(bb, &mode, cfg.train.seed)?;
        let enumerated = count_trainable_params(&model, &mode)?;
        let closed = tuning::counts::adapter_mode(bb, scheme, &adapter_cfg, true, true)?;
        rows.push(CountRow {
            mode: format!("adapter/{}", scheme.name()),
            trainable_params: enumerated,
            fraction_of_full_ft: round6(enumerated as f64 / full as f64),
            fraction_without_head: round6(
                enumerated.saturating_sub(head) as f64 / full_no_head as f64,
            ),
            closed_form_matches_enumeration: closed == enumerated,
        });
    }
    Ok(CountReport {
        timestamp_unix: unix_timestamp(),
        total_params: plain.params.count_where(|_| true),
        rows,
    })
}

// ── analyze ──────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct CkaLayerRow {
    pub layer: String,
    pub cka: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct CkaSummary {
    pub timestamp_unix: u64,
    pub checkpoint_a: String,
    pub checkpoint_b: String,
    pub mean_cka: f64,
    pub layers: Vec<CkaLayerRow>,
}

pub fn cmd_analyze_cka(a: &Path, b: &Path, out_dir: &Path) -> Result<CkaSummary> {
    std::fs::create_dir_all(out_dir)?;
    let pa = read_checkpoint(a)?;
    let pb = read_checkpoint(b)?;
    let report = average_cka(&pa, &pb)?;
    let summary = CkaSummary {
        timestamp_unix: unix_timestamp(),
        checkpoint_a: a.display().to_string(),
        checkpoint_b: b.display().to_string(),
        mean_cka: round6(report.mean_cka),
        layers: report
            .layers
            .iter()
            .map(|l| CkaLayerRow {
                layer: l.layer.clone(),
                cka: l.cka.map(round6),
            })
            .collect(),
    };
    let mut csv = String::from("layer,cka\n");
    for l in &summary.layers {
        csv.push_str(&format!(
            "{},{}\n",
            l.layer,
            l.cka.map(sig6).unwrap_or_else(|| "undefined".into())
        ));
    }
    std::fs::write(out_dir.join("cka_layers.csv"), csv)?;
    write_json(&out_dir.join("report.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct MmdSummary {
    pub timestamp_unix: u64,
    pub features_p: String,
    pub features_q: String,
    pub estimator: String,
    pub bandwidth: f64,
    pub mmd: f64,
}

pub fn cmd_analyze_mmd(
    p: &Path,
    q: &Path,
    bandwidth: Bandwidth,
    estimator: MmdEstimator,
    out_dir: &Path,
) -> Result<MmdSummary> {
    std::fs::create_dir_all(out_dir)?;
    let fp = read_features(p)?;
    let fq = read_features(q)?;
    let outcome = gaussian_mmd(&fp, &fq, bandwidth, estimator)?;
    let summary = MmdSummary {
        timestamp_unix: unix_timestamp(),
        features_p: p.display().to_string(),
        features_q: q.display().to_string(),
        estimator: match estimator {
            MmdEstimator::Biased => "biased".into(),
            MmdEstimator::Unbiased => "unbiased".into(),
        },
        bandwidth: round6(outcome.bandwidth),
        mmd: round6(outcome.value),
    };
    write_json(&out_dir.join("report.json"), &summary)?;
    Ok(summary)
}

// ── gradcheck ────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct GradCheckReport {
    pub timestamp_unix: u64,
    pub seeds: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub all_passed: bool,
    pub checks: Vec<GradCheckRow>,
}

/// Finite-difference suites: every primitive, a full fine-tuned backbone
/// loss, and adapted-model losses under all four schemes.
pub fn cmd_gradcheck(num_seeds: usize, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
    let seeds: Vec<u64> = (0..num_seeds as u64).collect();
    let mut checks: Vec<CheckResult> = check_primitives(&seeds, epsilon, tolerance)?;

    let bb = BackboneConfig::tiny(4, 3);
    let random_batch = |seed: u64| {
        let mut rng = seeded_rng(seed, 95);
        uniform_tensor(vec![2, 3, 8, 8], -1.0, 1.0, &mut rng)
    };

    for &seed in seeds.iter().take(3.min(num_seeds)) {
        let mut plain = build_backbone(&bb, seed)?;
        apply_tuning_mode(&mut plain, &TuningMode::FullFineTune)?;
        checks.push(check_model(
            "model full_ft",
            &plain,
            &random_batch(seed),
            &[0, 2],
            epsilon,
            tolerance,
            6,
            seed,
        )?);
        for scheme in AttachScheme::ALL {
            let mut acfg = AdapterConfig::new(2, 3);
            acfg.init_scheme = petkit_core::adapter::InitScheme::KaimingBoth;
            let mode = TuningMode::Adapter {
                scheme,
                config: acfg,
            };
            let mut model = build_model(&bb, &mode, seed)?;
            apply_tuning_mode(&mut model, &mode)?;
            checks.push(check_model(
                &format!("model adapter/{}", scheme.name()),
                &model,
                &random_batch(seed),
                &[1, 3],
                epsilon,
                tolerance,
                5,
                seed,
            )?);
        }
    }

    // Collapse repeated model checks (one per seed) to their worst case.
    let mut rows: Vec<GradCheckRow> = Vec::new();
    for c in checks {
        match rows.iter_mut().find(|r| r.name == c.name) {
            Some(r) => {
                r.max_rel_error = r.max_rel_error.max(c.max_rel_error);
                r.passed = r.passed && c.passed;
            }
            None => rows.push(GradCheckRow {
                name: c.name,
                max_rel_error: c.max_rel_error,
                tolerance: c.tolerance,
                passed: c.passed,
            }),
        }
    }
    for r in &mut rows {
        r.max_rel_error = round6(r.max_rel_error);
    }
    Ok(GradCheckReport {
        timestamp_unix: unix_timestamp(),
        seeds: num_seeds,
        epsilon,
        tolerance,
        all_passed: rows.iter().all(|r| r.passed),
        checks: rows,
    })
}

// ── gen-data ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct GenDataSummary {
    pub timestamp_unix: u64,
    pub kind: String,
    pub classes: usize,
    pub samples: usize,
    pub image_size: usize,
    pub seed: u64,
    pub path: String,
    pub file_checksum: String,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_gen_data(
    kind: &SynthKind,
    classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
    shots: Option<usize>,
    out: &Path,
) -> Result<GenDataSummary> {
    let raw = make_synthetic_task(kind, classes, samples_per_class, image_size, seed)?;
    let raw = match shots {
        Some(shots) => subsample_raw(&raw, shots, seed)?,
        None => raw,
    };
    write_dataset(out, &raw)?;
    let checksum = crate::container::file_checksum(out)?;
    Ok(GenDataSummary {
        timestamp_unix: unix_timestamp(),
        kind: kind.name().to_string(),
        classes,
        samples: raw.len(),
        image_size,
        seed,
        path: out.display().to_string(),
        file_checksum: format!("{checksum:016x}"),
    })
}

fn subsample_raw(
    raw: &petkit_core::data::RawDataset,
    shots: usize,
    seed: u64,
) -> Result<petkit_core::data::RawDataset> {
    let picked = petkit_core::data::few_shot_indices(
        &raw.labels,
        raw.class_count,
        &FewShotSpec { shots, seed },
    )?;
    let sample = raw.c * raw.h * raw.w;
    let mut labels = Vec::with_capacity(picked.len());
    let mut pixels = Vec::with_capacity(picked.len() * sample);
    for &i in &picked {
        labels.push(raw.labels[i]);
        pixels.extend_from_slice(&raw.pixels[i * sample..(i + 1) * sample]);
    }
    petkit_core::data::RawDataset::new(raw.c, raw.h, raw.w, raw.class_count, labels, pixels)
        .map_err(Error::Core)
}
