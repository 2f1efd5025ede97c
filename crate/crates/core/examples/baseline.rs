//! Scratch baseline runs for calibrating the reference experiment config.

use std::sync::Arc;
use std::time::Instant;

use stitchlab_core::backbone::{ModelSpec, Objective};
use stitchlab_core::data::{gen_shapes, DatasetParams};
use stitchlab_core::eval::{linear_probe, probe_data_from, stitched_pooled_features, distance_report};
use stitchlab_core::stitch::{make_stitch, StitchFamily, StitchInit, StitchMode, StitchedModel};
use stitchlab_core::training::*;

fn main() {
    let t0 = Instant::now();
    let ds = gen_shapes(&DatasetParams {
        classes: 8,
        per_class_train: 200,
        per_class_test: 50,
        image_side: 32,
        seed: 17,
    })
    .unwrap();
    println!("[{:6.1}s] dataset: {} samples", t0.elapsed().as_secs_f64(), ds.len());

    let spec_sup = ModelSpec {
        depth: 8, width: 64, heads: 4, mlp_ratio: 4,
        patch: 8, image: 32, use_class_token: false, num_classes: 0,
        objective_tag: Objective::Supervised,
    };
    let mut spec_rec = spec_sup.clone();
    spec_rec.objective_tag = Objective::MaskedRecon;

    let pc = PretrainConfig {
        lr: 1e-3,
        batch: 128,
        max_epochs: 15,
        patience: 5,
        weight_decay: 0.05,
        seed: 1,
    };
    let (sup, trace_sup) = pretrain_backbone::<f32>(&spec_sup, &ds, &pc).unwrap();
    println!(
        "[{:6.1}s] sup pretrain: {} epochs, best val loss {:?}",
        t0.elapsed().as_secs_f64(),
        trace_sup.records.len(), trace_sup.best_val,
    );
    for r in &trace_sup.records {
        println!("   epoch {:2}: train {:.4} val {:.4} ({} ms)", r.epoch, r.train_loss, r.val_monitor, r.wall_ms);
    }

    let (rec, trace_rec) = pretrain_backbone::<f32>(&spec_rec, &ds, &pc).unwrap();
    println!("[{:6.1}s] rec pretrain: {} epochs", t0.elapsed().as_secs_f64(), trace_rec.records.len());
    for r in &trace_rec.records {
        println!("   epoch {:2}: train {:.5} val {:.5} ({} ms)", r.epoch, r.train_loss, r.val_monitor, r.wall_ms);
    }

    let sup = Arc::new(sup);
    let rec = Arc::new(rec);

    // Probe the raw backbones.
    let probe_cfg = TrainConfig {
        lr: 0.01,
        max_epochs: 40,
        patience: 5,
        batch: 128,
        ..TrainConfig::defaults_for(LossKind::Tlt, 0)
    };
    for (name, bb) in [("sup", &sup), ("rec", &rec)] {
        let data = probe_data_from(&ds, |idx| {
            stitchlab_core::eval::backbone_pooled_features(bb, &ds, idx)
        })
        .unwrap();
        let res = linear_probe(&data, &probe_cfg).unwrap();
        println!("[{:6.1}s] {name} linear probe: {:.4}", t0.elapsed().as_secs_f64(), res.accuracy);
    }

    // Stitch training at n=2: LFM vs FFM vs TLT vs two-stage.
    let mut store = CacheStore::new();
    for (loss, n) in [
        (LossKind::Lfm, 2usize),
        (LossKind::Ffm, 2),
        (LossKind::Tlt, 2),
        (LossKind::TwoStage, 2),
    ] {
        let t1 = Instant::now();
        let stitch = make_stitch::<f32>(StitchFamily::Mlp, 64, 64, &StitchInit::default(), 0).unwrap();
        let mut m = StitchedModel::new(rec.clone(), sup.clone(), stitch, n, StitchMode::Cross).unwrap();
        let cfg = TrainConfig {
            lr: 0.005,
            max_epochs: 30,
            patience: 5,
            ..TrainConfig::defaults_for(loss, 0)
        };
        let (trace, _) = train_stitch(&mut m, &cfg, &ds, &mut store).unwrap();
        let data = probe_data_from(&ds, |idx| stitched_pooled_features(&m, &ds, idx, &mut store)).unwrap();
        let probe = linear_probe(&data, &probe_cfg).unwrap();
        let dist = distance_report(&m, &ds, &ds.test_idx, &mut store).unwrap();
        println!(
            "[{:6.1}s] {loss} n={n}: {} epochs in {:.1}s, probe {:.4}, layer_d {:.3}, final_d {:.3}",
            t0.elapsed().as_secs_f64(),
            trace.records.len(),
            t1.elapsed().as_secs_f64(),
            probe.accuracy,
            dist.layer_distance,
            dist.final_distance,
        );
    }
    println!("[{:6.1}s] done", t0.elapsed().as_secs_f64());
}
