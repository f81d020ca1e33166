// scratch calibration (deleted before finish)
use petkit_core::adapter::AdapterConfig;
use petkit_core::backbone::{AttachScheme, BackboneConfig, StageConfig};
use petkit_core::data::{Dataset, Normalize};
use petkit_core::synth::{make_synthetic_task, SynthKind, TextureFamily};
use petkit_core::tuning::{train, evaluate, TrainConfig, TuningMode};
use petkit::run::{build_model, ModelKind};
use petkit_core::params::ParamSet;
use petkit_core::tensor::Tensor;
use std::time::Instant;

fn texture(offset: f32, freq: f32, noise: f32, pj: f32, classes: usize, per_class: usize, seed: u64) -> Dataset {
    let fam = TextureFamily { orientation_offset: offset, frequency: freq, noise, phase_jitter: pj, ..TextureFamily::default() };
    let raw = make_synthetic_task(&SynthKind::Texture(fam), classes, per_class, 16, seed).unwrap();
    Dataset::from_raw(&raw, &Normalize::centered(1)).unwrap()
}
fn transfer(dst: &mut ParamSet, src: &ParamSet) {
    for i in 0..dst.len() {
        let name = dst.at(i).name.clone();
        if name.starts_with("head.") { dst.at_mut(i).tensor = Tensor::zeros(dst.at(i).tensor.shape().to_vec()); continue; }
        if let Some(s) = src.get(&name) { dst.at_mut(i).tensor = s.tensor.clone(); }
    }
}
fn pm(m: &mut ModelKind) -> &mut ParamSet { use petkit_core::backbone::Model; m.params_mut() }
fn pr(m: &ModelKind) -> &ParamSet { use petkit_core::backbone::Model; m.params() }

fn main() {
    let t0 = Instant::now();
    // Ablation backbone: C_mid divisible by 16 for the gamma sweep.
    let classes = 8;
    let bb = BackboneConfig::new(
        vec![
            StageConfig { c_in: 16, c_mid: 16, c_out: 32, num_blocks: 2, stride: 1 },
            StageConfig { c_in: 32, c_mid: 32, c_out: 64, num_blocks: 2, stride: 2 },
        ],
        classes, 1,
    );
    // Narrow pretrain (3 coarse classes on a small head count? keep 8-class space but coarse family)
    let bb_pre = BackboneConfig::new(bb.stages.clone(), 2, 1);
    let train_a = texture(0.0, 3.0, 0.1, 1.0, 2, 375, 500);
    let mut pre = build_model(&bb_pre, &TuningMode::FullFineTune, 0).unwrap();
    let mut cfg = TrainConfig::new(1e-3, 6, 32, 0);
    cfg.warmup_epochs = 1;
    train(&mut pre, &train_a, None, &cfg).unwrap();
    println!("pretrained ({:.0}s)", t0.elapsed().as_secs_f64());

    // gamma task: moderate shift, longer training so mid-capacity saturates.
    let tr_g = texture(0.12, 4.0, 0.3, 2.0, classes, 75, 600);
    let te_g = texture(0.12, 4.0, 0.3, 2.0, classes, 40, 700);
    for gamma in [1usize, 2, 4, 16] {
        let mode = TuningMode::Adapter { scheme: AttachScheme::ConvParallel, config: AdapterConfig::new(gamma, 3) };
        let mut m = build_model(&bb, &mode, 0).unwrap();
        transfer(pm(&mut m), pr(&pre));
        petkit_core::tuning::apply_tuning_mode(&mut m, &mode).unwrap();
        let mut cfg = TrainConfig::new(5e-3, 8, 32, 1);
        cfg.warmup_epochs = 1;
        train(&mut m, &tr_g, None, &cfg).unwrap();
        println!("gamma {gamma:>2}: acc {:.3}", evaluate(&m, &te_g, 32).unwrap());
    }
    // kernel task: pure orientation shift (spatial relearning).
    let tr_k = texture(0.3, 3.0, 0.25, 2.0, classes, 75, 800);
    let te_k = texture(0.3, 3.0, 0.25, 2.0, classes, 40, 900);
    for k in [1usize, 3] {
        let mut accs = vec![];
        for seed in 0..5u64 {
            let mode = TuningMode::Adapter { scheme: AttachScheme::ConvParallel, config: AdapterConfig::new(2, k) };
            let mut m = build_model(&bb, &mode, seed).unwrap();
            transfer(pm(&mut m), pr(&pre));
            petkit_core::tuning::apply_tuning_mode(&mut m, &mode).unwrap();
            let mut cfg = TrainConfig::new(5e-3, 6, 32, seed);
            cfg.warmup_epochs = 1;
            train(&mut m, &tr_k, None, &cfg).unwrap();
            accs.push(evaluate(&m, &te_k, 32).unwrap());
        }
        println!("K={k}: {:?}", accs.iter().map(|a| (a*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
