//! Scratch calibration driver for the overfit/ablation experiments.
//! Not part of the test suite; run manually, e.g.
//!   cargo run --example calib -- overfit 1e-4

use std::time::Instant;

use procanet_core::data::{
    build_patch_set, gather_inputs, gather_labels, ScenePair, EVAL_STRIDE, PATCH, TRAIN_STRIDE,
};
use procanet_core::infer::confusion_over_patchset;
use procanet_core::metrics::metrics;
use procanet_core::model::{ModelConfig, ProcaNet};
use procanet_core::optim::{AdamState, SchedulerConfig};
use procanet_core::synth::synth_scene;
use procanet_core::train::{fit, train_step, FitConfig, FitData};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("overfit");
    let lr_max: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let extra: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);

    match mode {
        "overfit" => overfit(lr_max, extra),
        "ablation" => compare(lr_max, extra, batch, true),
        "modality" => compare(lr_max, extra, batch, false),
        other => eprintln!("unknown mode {other}"),
    }
}

/// 32 train + 16 validation scenes, fixed across run seeds.
fn scene_split(dim: usize) -> (Vec<ScenePair>, Vec<ScenePair>) {
    let all: Vec<_> = (0..48).map(|i| synth_scene(100 + i, dim, dim).unwrap()).collect();
    let mut train = all;
    let val = train.split_off(32);
    (train, val)
}

fn run_fit(cfg_model: &ModelConfig, seed: u64, lr_max: f64, dim: usize, batch: usize) -> f64 {
    let (train_scenes, val_scenes) = scene_split(dim);
    let train_set = build_patch_set(&train_scenes, PATCH, TRAIN_STRIDE, true).unwrap();
    let val_set = build_patch_set(&val_scenes, PATCH, EVAL_STRIDE, false).unwrap();
    let mut model_cfg = cfg_model.clone();
    model_cfg.seed = seed;
    let mut net: ProcaNet<f32> = ProcaNet::init(&model_cfg).unwrap();
    let data = FitData {
        train_scenes: &train_scenes,
        train_set: &train_set,
        val_scenes: &val_scenes,
        val_set: &val_set,
        bands1: &model_cfg.encoder1_bands,
        bands2: model_cfg.encoder2_bands.as_deref(),
    };
    let fit_cfg = FitConfig {
        epochs: 2,
        batch,
        seed,
        lr_max,
        out_dir: None,
        ..FitConfig::default()
    };
    let report = fit(&fit_cfg, &mut net, &data).unwrap();
    report.best_val_iou
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn compare(lr_max: f64, dim: usize, batch: usize, ablation: bool) {
    let base = ModelConfig {
        base_channels: 8,
        levels: 3,
        ..ModelConfig::default()
    };
    let (cfg_a, cfg_b, names) = if ablation {
        let on = base.clone();
        let off = ModelConfig { attention: false, ..base.clone() };
        (on, off, ("attention-on", "attention-off"))
    } else {
        let nir = ModelConfig {
            encoder1_bands: vec!["NIR".into()],
            encoder2_bands: None,
            ..base.clone()
        };
        let rgb = ModelConfig {
            encoder1_bands: vec!["R".into(), "G".into(), "B".into()],
            encoder2_bands: None,
            ..base.clone()
        };
        (nir, rgb, ("nir-only", "rgb-only"))
    };

    let t0 = Instant::now();
    let mut ious_a = Vec::new();
    let mut ious_b = Vec::new();
    for seed in [11u64, 22, 33, 44, 55] {
        let a = run_fit(&cfg_a, seed, lr_max, dim, batch);
        let b = run_fit(&cfg_b, seed, lr_max, dim, batch);
        println!(
            "seed {seed}: {} {a:.4}  {} {b:.4}  ({:.0}s)",
            names.0,
            names.1,
            t0.elapsed().as_secs_f64()
        );
        ious_a.push(a);
        ious_b.push(b);
    }
    println!(
        "median {} {:.4}  median {} {:.4}  ({:.0}s total)",
        names.0,
        median(ious_a),
        names.1,
        median(ious_b),
        t0.elapsed().as_secs_f64()
    );
}

fn overfit(lr_max: f64, steps: usize) {
    let scenes: Vec<_> = (0..8).map(|i| synth_scene(i, 128, 128).unwrap()).collect();
    let set = build_patch_set(&scenes, PATCH, TRAIN_STRIDE, true).unwrap();
    println!("patches: {}", set.len());

    let cfg = ModelConfig {
        base_channels: 8,
        levels: 3,
        ..ModelConfig::default()
    };
    let mut net: ProcaNet<f32> = ProcaNet::init(&cfg).unwrap();
    let mut state = AdamState::new(&net);
    let sched = SchedulerConfig::for_total_steps(steps as u64, lr_max, 0.0);

    let indices: Vec<usize> = (0..set.len()).collect();
    let bands1 = cfg.encoder1_bands.clone();
    let bands2 = cfg.encoder2_bands.clone();
    let x1 = gather_inputs::<f32>(&scenes, &set, &indices, &bands1, 1.0).unwrap();
    let x2 = bands2
        .as_ref()
        .map(|b| gather_inputs::<f32>(&scenes, &set, &indices, b, 1.0).unwrap());
    let y = gather_labels::<f32>(&scenes, &set, &indices).unwrap();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let t0 = Instant::now();
    pool.install(|| {
        for step in 0..steps {
            let lr = sched.lr_at(step as u64);
            let lv = train_step(&mut net, &mut state, lr, &x1, x2.as_ref(), &y).unwrap();
            if step % 25 == 0 || step + 1 == steps {
                let c = confusion_over_patchset(
                    &mut net,
                    &scenes,
                    &set,
                    &bands1,
                    bands2.as_deref(),
                    1.0,
                    8,
                )
                .unwrap();
                let m = metrics(&c).unwrap();
                println!(
                    "step {step:4} lr {lr:.2e} loss {:.4} iou {:.4} ({:.1}s)",
                    lv.total,
                    m.iou,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
    });
    println!("total: {:.1}s for {steps} steps at lr_max {lr_max}", t0.elapsed().as_secs_f64());
}
