// quick throughput probe (not a shipped bench)
use stitchlab_core::backbone::*;
use stitchlab_core::graph::Graph;
use stitchlab_core::optim::{AdamWConfig, OptimizerState};
use stitchlab_core::rng::StreamRng;
use stitchlab_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let spec = ModelSpec {
        depth: 8, width: 64, heads: 4, mlp_ratio: 4,
        patch: 8, image: 32, use_class_token: false,
        num_classes: 8, objective_tag: Objective::Supervised,
    };
    let bb = init_backbone::<f32>(&spec, 0).unwrap();
    let mut r = StreamRng::new(1, "bench");
    let batch = 128usize;
    let x = ImageBatch::new(
        Tensor::from_fn(vec![batch, 32*32*3], |_| r.uniform(0.0, 1.0) as f32), 32).unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| r.below(8)).collect();

    // forward only
    let t0 = Instant::now();
    let iters = 10;
    for _ in 0..iters {
        let _ = bb.run_prefix(&x, 8).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    println!("no-grad forward batch128: {:.1} ms ({:.1} ms/epoch-equivalent x13)", fwd*1e3, fwd*1e3*13.0);

    // full train step (fwd + bwd all params + adamw)
    let mut bb2 = init_backbone::<f32>(&spec, 0).unwrap();
    let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.05, ..Default::default() };
    let n_params = bb2.param_tensors_mut().len();
    let mut opt: OptimizerState<f32> = OptimizerState::new(cfg, &bb2.param_tensors_mut().iter().map(|t| (**t).clone()).collect::<Vec<_>>());
    let t1 = Instant::now();
    for _ in 0..iters {
        let mut g = Graph::new();
        let nodes = bb2.register(&mut g, true);
        let tok = bb2.embed_graph(&mut g, &x, &nodes, None).unwrap();
        let h = bb2.blocks_graph(&mut g, tok, &nodes, 0, 8, batch).unwrap();
        let pooled = bb2.pool_graph(&mut g, h, batch).unwrap();
        let (hw, hb) = bb2.head.as_ref().unwrap().clone();
        let hw = g.param(hw); let hb = g.param(hb);
        let logits = g.matmul(pooled, hw).unwrap();
        let logits = g.add_bias(logits, hb).unwrap();
        let loss = g.cross_entropy(logits, labels.clone()).unwrap();
        let ids = nodes.param_list();
        let grads = g.backward(loss).unwrap();
        let gvec: Vec<Option<Tensor<f32>>> = ids.iter().map(|&id| grads.get(id).cloned()).collect();
        let mut params: Vec<Tensor<f32>> = bb2.param_tensors_mut().iter().map(|t| (**t).clone()).collect();
        opt.step(&mut params[..n_params], &gvec[..n_params]).unwrap();
        for (dst, src) in bb2.param_tensors_mut().into_iter().zip(params) { *dst = src; }
    }
    let step = t1.elapsed().as_secs_f64() / iters as f64;
    println!("train step batch128: {:.1} ms  -> epoch(1600 imgs)= {:.2} s", step*1e3, step*13.0);
    // estimate flops: fwd ~6.9 MMAC/img ~ 13.8MFLOP; step ~ 3x
    println!("approx fwd GFLOP/s: {:.2}", (batch as f64 * 13.8e6 / fwd) / 1e9);
}
