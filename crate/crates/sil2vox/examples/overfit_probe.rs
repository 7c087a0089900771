//! Scratch probe for the overfit run; not part of the shipped surface.

use sil2vox::evaluation::{binarize, voxel_iou};
use sil2vox::geometry::{build_dataset, icosphere_mesh, unit_cube_mesh, Dataset, DatasetConfig};
use sil2vox::network::NetworkSpec;
use sil2vox::training::{
    forward_volumes, samples_from_dataset, train_in_memory, Sample, TrainConfig,
};

fn iou_of<T: sil2vox::tensor::Scalar>(
    params: &sil2vox::network::StackedParams<T>,
    s: &Sample<T>,
) -> f64 {
    let out = forward_volumes(params, &s.x_rep).unwrap().pop().unwrap();
    let pred = binarize(out.values(), 16, 0.5).unwrap();
    let gt = binarize(s.gt.values(), 16, 0.5).unwrap();
    voxel_iou(&pred, &gt).unwrap()
}

fn main() {
    let t0 = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = DatasetConfig { resolution: 16, n_polar: 5, n_azimuth: 1, hard_threshold_deg: 15.0 };
    let models = vec![
        ("cube".to_string(), unit_cube_mesh()),
        ("ball".to_string(), icosphere_mesh(2)),
    ];
    build_dataset(&models, &config, dir.path()).unwrap();
    let dataset = Dataset::open(dir.path()).unwrap();
    let samples: Vec<Sample<f32>> = samples_from_dataset(&dataset).unwrap();
    println!("dataset ready: {} samples, {:.1?}", samples.len(), t0.elapsed());

    let args: Vec<String> = std::env::args().collect();
    let max_steps: usize = args.get(1).map_or(600, |s| s.parse().unwrap());
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().unwrap());
    let n_stages: usize = args.get(3).map_or(2, |s| s.parse().unwrap());
    let lr: f64 = args.get(4).map_or(1e-2, |s| s.parse().unwrap());
    let batch: usize = args.get(5).map_or(4, |s| s.parse().unwrap());

    // Fixed holdout: middle polar view (index 2) of each shape.
    let holdout = [2usize, 7usize];
    let train_set: Vec<Sample<f32>> = samples
        .iter()
        .enumerate()
        .filter(|(i, _)| !holdout.contains(i))
        .map(|(_, s)| s.clone())
        .collect();

    let mut tc = TrainConfig::for_network(NetworkSpec {
        resolution: 16,
        width_mult: 0.25,
        n_stages,
    });
    tc.lambdas = vec![1.0 / n_stages as f64; n_stages];
    tc.max_steps = max_steps;
    tc.seed = seed;
    tc.val_every = 25;
    tc.learning_rate = lr;
    tc.batch_size = batch;
    println!("config: steps {max_steps} seed {seed} stages {n_stages} lr {lr} batch {batch}");

    let t1 = std::time::Instant::now();
    let outcome = train_in_memory(&tc, &train_set).unwrap();
    let dt = t1.elapsed();
    println!(
        "trained {} steps in {:.1?} ({:.0} ms/step), best criterion {:.4} at step {}",
        outcome.state.step,
        dt,
        dt.as_secs_f64() * 1000.0 / outcome.state.step as f64,
        outcome.best.criterion,
        outcome.best.step
    );
    for (i, m) in outcome.metrics.iter().enumerate() {
        if i % 100 == 0 || i + 1 == outcome.metrics.len() {
            println!("  step {:4} loss {:.4} stages {:?}", m.step, m.loss, m.stage_losses);
        }
    }
    for (step, v) in &outcome.validations {
        if step % 200 == 0 || *step as usize >= max_steps {
            println!("  val step {:4} criterion {:.4}", step, v);
        }
    }

    let names = ["cube0", "cube1", "cube2", "cube3", "cube4", "ball0", "ball1", "ball2", "ball3", "ball4"];
    println!("per-sample IoU (H = held out of training):");
    let mut best_h = Vec::new();
    let mut final_h = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let b = iou_of(&outcome.best.params, s);
        let f = iou_of(&outcome.state.params, s);
        let tag = if holdout.contains(&i) { "H" } else { " " };
        println!("  {} {:6}  best {:.4}  final {:.4}", tag, names[i], b, f);
        if holdout.contains(&i) {
            best_h.push(b);
            final_h.push(f);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("held-out mean: best {:.4} final {:.4}", mean(&best_h), mean(&final_h));
    println!("total {:.1?}", t0.elapsed());
}
