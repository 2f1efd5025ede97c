//! Evaluation: linear probing, dense per-token probing with bilinear
//! upsampling, feature-distance diagnostics, prediction partitioning, and the
//! cross/self-stitch comparison suite.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::data::{Dataset, BACKGROUND};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::stitch::{make_stitch, StitchFamily, StitchInit, StitchMode, StitchedModel};
use crate::tensor::Tensor;
use crate::training::{
    argmax_rows, run_with_sweep, BatchObjective, CacheStore, LinearHead, Monitor, TrainConfig,
    TrainingTrace,
};

// ── linear probe ─────────────────────────────────────────────────────────

/// Pooled features and labels of the three splits.
pub struct ProbeData<T> {
    pub train: Tensor<T>,
    pub train_labels: Vec<usize>,
    pub val: Tensor<T>,
    pub val_labels: Vec<usize>,
    pub test: Tensor<T>,
    pub test_labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ProbeResult<T> {
    /// Held-out accuracy (mean per-sample correctness on the test split).
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub head: LinearHead<T>,
    pub trace: TrainingTrace,
    /// Test-split predictions, for partition analysis.
    pub predictions: Vec<usize>,
}

struct HeadObjective<'a, T: Scalar> {
    feats: &'a Tensor<T>,
    labels: &'a [usize],
    val_feats: &'a Tensor<T>,
    val_labels: &'a [usize],
    head: LinearHead<T>,
}

impl<T: Scalar> HeadObjective<'_, T> {
    fn rows(src: &Tensor<T>, indices: &[u32]) -> Tensor<T> {
        let d = src.cols();
        let mut out = Tensor::zeros(vec![indices.len(), d]);
        for (row, &i) in indices.iter().enumerate() {
            out.data_mut()[row * d..(row + 1) * d]
                .copy_from_slice(&src.data()[i as usize * d..(i as usize + 1) * d]);
        }
        out
    }
}

impl<T: Scalar> BatchObjective<T> for HeadObjective<'_, T> {
    fn params(&self) -> Vec<Tensor<T>> {
        vec![self.head.weight.clone(), self.head.bias.clone()]
    }

    fn set_params(&mut self, params: Vec<Tensor<T>>) {
        self.head.weight = params[0].clone();
        self.head.bias = params[1].clone();
    }

    fn batch_loss(&mut self, g: &mut Graph<T>, ids: &[NodeId], indices: &[u32]) -> Result<NodeId> {
        let x = g.constant(Self::rows(self.feats, indices));
        let h = g.matmul(x, ids[0])?;
        let logits = g.add_bias(h, ids[1])?;
        let labels = indices.iter().map(|&i| self.labels[i as usize]).collect();
        g.cross_entropy(logits, labels)
    }

    fn validate(&mut self, monitor: Monitor, _indices: &[u32]) -> Result<f64> {
        match monitor {
            Monitor::ValAcc => {
                let preds = self.head.predict(self.val_feats)?;
                let correct = preds
                    .iter()
                    .zip(self.val_labels)
                    .filter(|(p, l)| *p == *l)
                    .count();
                Ok(correct as f64 / self.val_labels.len().max(1) as f64)
            }
            Monitor::ValLoss => {
                let mut g = Graph::new();
                let x = g.constant(self.val_feats.clone());
                let hn = self.head.register(&mut g, false);
                let logits = self.head.logits_graph(&mut g, x, &hn)?;
                let loss = g.cross_entropy(logits, self.val_labels.to_vec())?;
                Ok(g.value(loss).item().as_f64())
            }
        }
    }
}

/// Train a linear classifier on frozen pooled features and score it on the
/// held-out split.
pub fn linear_probe<T: Scalar>(data: &ProbeData<T>, cfg: &TrainConfig) -> Result<ProbeResult<T>> {
    cfg.validate()?;
    let classes = data
        .train_labels
        .iter()
        .chain(&data.val_labels)
        .chain(&data.test_labels)
        .map(|&l| l + 1)
        .max()
        .unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; classes];
        for &l in &data.train_labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Config(
            "degenerate probe: train split holds a single class".into(),
        ));
    }
    let dim = data.train.cols();
    let mut obj = HeadObjective {
        feats: &data.train,
        labels: &data.train_labels,
        val_feats: &data.val,
        val_labels: &data.val_labels,
        head: LinearHead::init(dim, classes, cfg.seed ^ 0x70_72_6f_62),
    };
    let train_idx: Vec<u32> = (0..data.train_labels.len() as u32).collect();
    let val_idx: Vec<u32> = (0..data.val_labels.len() as u32).collect();
    let mut trace = TrainingTrace::default();
    run_with_sweep(&mut obj, cfg, "probe", &train_idx, &val_idx, &mut trace)?;

    let head = obj.head.clone();
    let predictions = head.predict(&data.test)?;
    let mut correct = 0usize;
    let mut per_class_correct = vec![0usize; classes];
    let mut per_class_total = vec![0usize; classes];
    for (p, &l) in predictions.iter().zip(&data.test_labels) {
        per_class_total[l] += 1;
        if *p == l {
            correct += 1;
            per_class_correct[l] += 1;
        }
    }
    let per_class = per_class_correct
        .iter()
        .zip(&per_class_total)
        .map(|(&c, &t)| if t == 0 { f64::NAN } else { c as f64 / t as f64 })
        .collect();
    Ok(ProbeResult {
        accuracy: correct as f64 / data.test_labels.len().max(1) as f64,
        per_class,
        head,
        trace,
        predictions,
    })
}

/// Pooled features of a stitched model over dataset samples, reusing the
/// source-prefix cache.
pub fn stitched_pooled_features<T: Scalar>(
    model: &StitchedModel<T>,
    dataset: &Dataset,
    indices: &[u32],
    store: &mut CacheStore<T>,
) -> Result<Tensor<T>> {
    let cache = store.get_or_build(&model.source, model.prefix_depth(), dataset)?;
    let d = model.target.spec.width;
    let mut out = Tensor::zeros(vec![indices.len(), d]);
    for (offset, chunk) in indices.chunks(256).enumerate() {
        let mut g = Graph::new();
        let nodes = model.stitch.register(&mut g, false);
        let src = g.constant(cache.rows_for(chunk));
        let f = model.tail_graph(&mut g, src, &nodes, chunk.len())?;
        let pooled = model.target.pool_graph(&mut g, f, chunk.len())?;
        let vals = g.value(pooled).data();
        let dst = offset * 256 * d;
        out.data_mut()[dst..dst + vals.len()].copy_from_slice(vals);
    }
    Ok(out)
}

/// Pooled final-layer features of a plain backbone.
pub fn backbone_pooled_features<T: Scalar>(
    backbone: &Backbone<T>,
    dataset: &Dataset,
    indices: &[u32],
) -> Result<Tensor<T>> {
    let d = backbone.spec.width;
    let mut out = Tensor::zeros(vec![indices.len(), d]);
    for (offset, chunk) in indices.chunks(256).enumerate() {
        let fm = backbone.run_prefix(&dataset.image_batch::<T>(chunk), backbone.spec.depth)?;
        let pooled = Backbone::pool(&fm);
        let dst = offset * 256 * d;
        out.data_mut()[dst..dst + pooled.len()].copy_from_slice(pooled.data());
    }
    Ok(out)
}

/// Probe data assembled from any pooled-feature provider.
pub fn probe_data_from<T: Scalar>(
    dataset: &Dataset,
    mut pooled: impl FnMut(&[u32]) -> Result<Tensor<T>>,
) -> Result<ProbeData<T>> {
    Ok(ProbeData {
        train: pooled(&dataset.train_idx)?,
        train_labels: dataset.labels_of(&dataset.train_idx),
        val: pooled(&dataset.val_idx)?,
        val_labels: dataset.labels_of(&dataset.val_idx),
        test: pooled(&dataset.test_idx)?,
        test_labels: dataset.labels_of(&dataset.test_idx),
    })
}

// ── bilinear upsampling and dense probe ──────────────────────────────────

/// Bilinear upsampling of an `h×w×C` logit grid to `H×W×C` under the
/// half-pixel-center convention.
pub fn bilinear_upsample<T: Scalar>(
    grid: &Tensor<T>,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let c = grid.cols();
    if grid.shape() != [h * w, c] || out_h < h || out_w < w {
        return Err(Error::shape("bilinear_upsample", grid.shape(), &[h * w, c]));
    }
    let mut g = Graph::new();
    let x = g.constant(grid.clone());
    let out = g.upsample2d(x, 1, h, w, out_h, out_w)?;
    Ok(g.value(out).clone())
}

/// Map a pixel mask byte to a segmentation class (background gets the last
/// class index).
fn seg_class(mask: u8, classes: usize) -> usize {
    if mask == BACKGROUND {
        classes
    } else {
        mask as usize
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseProbeResult {
    /// Unweighted mean IoU over classes with non-empty union.
    pub miou: f64,
    /// `(class, IoU)` for every class with non-empty union; the background
    /// class sits at index `classes`.
    pub per_class_iou: Vec<(usize, f64)>,
}

/// Compute per-class IoU from per-pixel predictions and ground truth.
pub fn iou_from_predictions(
    preds: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> DenseProbeResult {
    assert_eq!(preds.len(), truth.len());
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnn = vec![0usize; num_classes];
    for (&p, &t) in preds.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let mut per_class_iou = Vec::new();
    for c in 0..num_classes {
        let union = tp[c] + fp[c] + fnn[c];
        if union > 0 {
            per_class_iou.push((c, tp[c] as f64 / union as f64));
        }
    }
    let miou = if per_class_iou.is_empty() {
        f64::NAN
    } else {
        per_class_iou.iter().map(|(_, v)| v).sum::<f64>() / per_class_iou.len() as f64
    };
    DenseProbeResult { miou, per_class_iou }
}

/// Per-token linear decoder trained with per-pixel cross-entropy through
/// bilinear upsampling, evaluated as mIoU on the test split.
///
/// `patch_features` must yield the patch-token rows (`[len·np, d]`, class
/// token excluded) of the samples at the model's final layer.
pub fn dense_probe<T: Scalar>(
    dataset: &Dataset,
    grid: (usize, usize),
    dim: usize,
    mut patch_features: impl FnMut(&[u32]) -> Result<Tensor<T>>,
    cfg: &TrainConfig,
) -> Result<DenseProbeResult> {
    cfg.validate()?;
    let (gh, gw) = grid;
    let side = dataset.side();
    let np = gh * gw;
    let seg_classes = dataset.num_classes() + 1;
    let mut head = LinearHead::<T>::init(dim, seg_classes, cfg.seed ^ 0x64_65_6e_73);

    // Per-pixel labels of one sample batch.
    let pixel_labels = |indices: &[u32]| -> Vec<usize> {
        let mut out = Vec::with_capacity(indices.len() * side * side);
        for &i in indices {
            out.extend(
                dataset
                    .mask_of(i)
                    .iter()
                    .map(|&m| seg_class(m, seg_classes - 1)),
            );
        }
        out
    };

    struct DenseObjective<'a, T: Scalar, F> {
        feats: F,
        labels: &'a dyn Fn(&[u32]) -> Vec<usize>,
        head: LinearHead<T>,
        grid: (usize, usize),
        out_side: usize,
        train_idx: &'a [u32],
        val_idx: &'a [u32],
    }

    impl<T: Scalar, F: FnMut(&[u32]) -> Result<Tensor<T>>> DenseObjective<'_, T, F> {
        fn loss_graph(
            &mut self,
            g: &mut Graph<T>,
            wid: NodeId,
            bid: NodeId,
            indices: &[u32],
        ) -> Result<NodeId> {
            let x = (self.feats)(indices)?;
            let xn = g.constant(x);
            let h = g.matmul(xn, wid)?;
            let logits = g.add_bias(h, bid)?;
            let up = g.upsample2d(
                logits,
                indices.len(),
                self.grid.0,
                self.grid.1,
                self.out_side,
                self.out_side,
            )?;
            g.cross_entropy(up, (self.labels)(indices))
        }
    }

    impl<T: Scalar, F: FnMut(&[u32]) -> Result<Tensor<T>>> BatchObjective<T>
        for DenseObjective<'_, T, F>
    {
        fn params(&self) -> Vec<Tensor<T>> {
            vec![self.head.weight.clone(), self.head.bias.clone()]
        }

        fn set_params(&mut self, params: Vec<Tensor<T>>) {
            self.head.weight = params[0].clone();
            self.head.bias = params[1].clone();
        }

        fn batch_loss(
            &mut self,
            g: &mut Graph<T>,
            ids: &[NodeId],
            indices: &[u32],
        ) -> Result<NodeId> {
            self.loss_graph(g, ids[0], ids[1], indices)
        }

        fn validate(&mut self, _monitor: Monitor, indices: &[u32]) -> Result<f64> {
            let mut total = 0.0;
            for chunk in indices.chunks(64) {
                let mut g = Graph::new();
                let hn = self.head.register(&mut g, false);
                let loss = self.loss_graph(&mut g, hn.weight, hn.bias, chunk)?;
                total += g.value(loss).item().as_f64() * chunk.len() as f64;
            }
            Ok(total / indices.len() as f64)
        }
    }

    let _ = np;
    let mut obj = DenseObjective {
        feats: &mut patch_features,
        labels: &pixel_labels,
        head: head.clone(),
        grid,
        out_side: side,
        train_idx: &dataset.train_idx,
        val_idx: &dataset.val_idx,
    };
    let cfg = TrainConfig {
        monitor: Monitor::ValLoss,
        ..cfg.clone()
    };
    let mut trace = TrainingTrace::default();
    let (train_idx, val_idx) = (obj.train_idx.to_vec(), obj.val_idx.to_vec());
    run_with_sweep(&mut obj, &cfg, "dense-probe", &train_idx, &val_idx, &mut trace)?;
    head = obj.head.clone();

    // Evaluate mIoU over the test split.
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for chunk in dataset.test_idx.chunks(64) {
        let x = patch_features(chunk)?;
        let logits = head.logits(&x)?;
        let mut g = Graph::new();
        let ln = g.constant(logits);
        let up = g.upsample2d(ln, chunk.len(), gh, gw, side, side)?;
        preds.extend(argmax_rows(g.value(up)));
        truth.extend(pixel_labels(chunk));
    }
    Ok(iou_from_predictions(&preds, &truth, seg_classes))
}

/// Patch-token rows (class token stripped) of a stitched model's final layer.
pub fn stitched_patch_features<T: Scalar>(
    model: &StitchedModel<T>,
    dataset: &Dataset,
    indices: &[u32],
    store: &mut CacheStore<T>,
) -> Result<Tensor<T>> {
    let cache = store.get_or_build(&model.source, model.prefix_depth(), dataset)?;
    let d = model.target.spec.width;
    let k = model.target.spec.tokens();
    let np = model.target.spec.num_patches();
    let cls = usize::from(model.target.spec.use_class_token);
    let mut out = Tensor::zeros(vec![indices.len() * np, d]);
    for (offset, chunk) in indices.chunks(256).enumerate() {
        let mut g = Graph::new();
        let nodes = model.stitch.register(&mut g, false);
        let src = g.constant(cache.rows_for(chunk));
        let f = model.tail_graph(&mut g, src, &nodes, chunk.len())?;
        let vals = g.value(f).data();
        for (s, _) in chunk.iter().enumerate() {
            let srow = (s * k + cls) * d;
            let drow = ((offset * 256 + s) * np) * d;
            out.data_mut()[drow..drow + np * d].copy_from_slice(&vals[srow..srow + np * d]);
        }
    }
    Ok(out)
}

// ── distance diagnostics ─────────────────────────────────────────────────

/// Mean layer/final feature distances of a stitched model over a split.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DistanceReport {
    pub stitch_point: usize,
    /// Mean over samples of ‖S(A^n_src) − A^n_tgt‖ (Frobenius, unsquared).
    pub layer_distance: f64,
    /// Mean over samples of ‖T^N(S(A^n_src)) − A^N_tgt‖.
    pub final_distance: f64,
}

fn mean_frobenius_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, samples: usize) -> f64 {
    let per = a.len() / samples;
    let mut total = 0.0;
    for s in 0..samples {
        let mut acc = 0.0f64;
        for (x, y) in a.data()[s * per..(s + 1) * per]
            .iter()
            .zip(&b.data()[s * per..(s + 1) * per])
        {
            let d = x.as_f64() - y.as_f64();
            acc += d * d;
        }
        total += acc.sqrt();
    }
    total / samples as f64
}

pub fn distance_report<T: Scalar>(
    model: &StitchedModel<T>,
    dataset: &Dataset,
    indices: &[u32],
    store: &mut CacheStore<T>,
) -> Result<DistanceReport> {
    if indices.is_empty() {
        return Err(Error::Config("distance_report needs a non-empty split".into()));
    }
    let cache_src = store.get_or_build(&model.source, model.prefix_depth(), dataset)?;
    let cache_tgt_n = store.get_or_build(&model.target, model.n, dataset)?;
    let cache_tgt_final =
        store.get_or_build(&model.target, model.target.spec.depth, dataset)?;

    let mut layer_total = 0.0;
    let mut final_total = 0.0;
    for chunk in indices.chunks(256) {
        let mut g = Graph::new();
        let nodes = model.stitch.register(&mut g, false);
        let src = g.constant(cache_src.rows_for(chunk));
        let stitched = model.stitch.apply_graph(
            &mut g,
            src,
            &nodes,
            chunk.len(),
            cache_src.tokens(),
        )?;
        let tnodes = model.target.register(&mut g, false);
        let fin = model.target.blocks_graph(
            &mut g,
            stitched,
            &tnodes,
            model.n,
            model.target.spec.depth,
            chunk.len(),
        )?;
        layer_total += mean_frobenius_distance(
            g.value(stitched),
            &cache_tgt_n.rows_for(chunk),
            chunk.len(),
        ) * chunk.len() as f64;
        final_total += mean_frobenius_distance(
            g.value(fin),
            &cache_tgt_final.rows_for(chunk),
            chunk.len(),
        ) * chunk.len() as f64;
    }
    Ok(DistanceReport {
        stitch_point: model.n,
        layer_distance: layer_total / indices.len() as f64,
        final_distance: final_total / indices.len() as f64,
    })
}

// ── prediction partition ─────────────────────────────────────────────────

/// Outcome buckets of (self_source, self_target, stitched) right/wrong
/// patterns; all-right and all-wrong are discarded as trivial.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionPartition {
    /// (R, W, R): source's self-stitch right, stitched keeps it.
    pub preserve_source_right: usize,
    /// (W, R, R): target's self-stitch right, stitched keeps it.
    pub preserve_target_right: usize,
    /// (W, W, R): both self-stitches wrong, stitched correct.
    pub rescue: usize,
    /// (R, R, W)
    pub interference_both_right: usize,
    /// (W, R, W)
    pub interference_target_right: usize,
    /// (R, W, W)
    pub interference_source_right: usize,
    pub discarded_all_right: usize,
    pub discarded_all_wrong: usize,
}

impl PredictionPartition {
    pub fn preserve(&self) -> usize {
        self.preserve_source_right + self.preserve_target_right
    }

    pub fn interference(&self) -> usize {
        self.interference_both_right
            + self.interference_target_right
            + self.interference_source_right
    }

    pub fn total(&self) -> usize {
        self.preserve()
            + self.rescue
            + self.interference()
            + self.discarded_all_right
            + self.discarded_all_wrong
    }
}

pub fn partition_predictions(
    pred_self_source: &[usize],
    pred_self_target: &[usize],
    pred_stitched: &[usize],
    labels: &[usize],
) -> Result<PredictionPartition> {
    let n = labels.len();
    if pred_self_source.len() != n || pred_self_target.len() != n || pred_stitched.len() != n {
        return Err(Error::Config(
            "prediction/label sequences must have equal length".into(),
        ));
    }
    let mut p = PredictionPartition::default();
    for i in 0..n {
        let s = pred_self_source[i] == labels[i];
        let t = pred_self_target[i] == labels[i];
        let f = pred_stitched[i] == labels[i];
        match (s, t, f) {
            (true, true, true) => p.discarded_all_right += 1,
            (false, false, false) => p.discarded_all_wrong += 1,
            (true, false, true) => p.preserve_source_right += 1,
            (false, true, true) => p.preserve_target_right += 1,
            (false, false, true) => p.rescue += 1,
            (true, true, false) => p.interference_both_right += 1,
            (false, true, false) => p.interference_target_right += 1,
            (true, false, false) => p.interference_source_right += 1,
        }
    }
    Ok(p)
}

// ── self-stitch suite ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteCellConfig {
    pub family: StitchFamily,
    pub stitch_point: usize,
    pub mode: StitchMode,
    pub train: TrainConfig,
}

impl SuiteCellConfig {
    /// Hex digest of the full cell configuration.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("cell config json"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug)]
pub struct SuiteCell<T: Scalar> {
    pub config: SuiteCellConfig,
    pub probe: ProbeResult<T>,
    pub trace: TrainingTrace,
    /// The trained stitch layer.
    pub stitch: crate::stitch::StitchLayer<T>,
}

impl<T: Scalar> Clone for SuiteCell<T> {
    fn clone(&self) -> Self {
        SuiteCell {
            config: self.config.clone(),
            probe: self.probe.clone(),
            trace: self.trace.clone(),
            stitch: self.stitch.clone(),
        }
    }
}

/// Train and probe cross/self_source/self_target stitched models for every
/// (family, stitch point) with an identical trainable module, loss, data, and
/// seed.
pub fn selfstitch_suite<T: Scalar>(
    source: &Arc<Backbone<T>>,
    target: &Arc<Backbone<T>>,
    families: &[StitchFamily],
    points: &[usize],
    cfg: &TrainConfig,
    probe_cfg: &TrainConfig,
    dataset: &Dataset,
    store: &mut CacheStore<T>,
) -> Result<Vec<SuiteCell<T>>> {
    let mut cells = Vec::new();
    for &family in families {
        for &n in points {
            for mode in [StitchMode::Cross, StitchMode::SelfSource, StitchMode::SelfTarget] {
                let (src, tgt) = match mode {
                    StitchMode::Cross => (source.clone(), target.clone()),
                    StitchMode::SelfSource => (source.clone(), source.clone()),
                    StitchMode::SelfTarget => (target.clone(), target.clone()),
                };
                let cell_cfg = SuiteCellConfig {
                    family,
                    stitch_point: n,
                    mode,
                    train: cfg.clone(),
                };
                let cell = run_suite_cell(&src, &tgt, &cell_cfg, probe_cfg, dataset, store)?;
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

/// One suite cell: build the stitch, train it, probe pooled features.
pub fn run_suite_cell<T: Scalar>(
    src: &Arc<Backbone<T>>,
    tgt: &Arc<Backbone<T>>,
    cell_cfg: &SuiteCellConfig,
    probe_cfg: &TrainConfig,
    dataset: &Dataset,
    store: &mut CacheStore<T>,
) -> Result<SuiteCell<T>> {
    let n = cell_cfg.stitch_point;
    let init = StitchInit {
        source_block: (cell_cfg.family == StitchFamily::LoraBlock)
            .then(|| crate::stitch::LoraSource {
                block: &src.blocks[n - 1],
                heads: src.spec.heads,
            }),
        ..StitchInit::default()
    };
    let stitch = make_stitch(
        cell_cfg.family,
        src.spec.width,
        tgt.spec.width,
        &init,
        cell_cfg.train.seed,
    )?;
    let mut model = StitchedModel::new(src.clone(), tgt.clone(), stitch, n, cell_cfg.mode)?;
    let (trace, trained_head) =
        crate::training::train_stitch(&mut model, &cell_cfg.train, dataset, store)?;

    // Probe on pooled stitched features. When TLT already trained a head
    // jointly, the probe still retrains its own (uniform protocol).
    let _ = trained_head;
    let probe_cfg = TrainConfig {
        seed: cell_cfg.train.seed,
        ..probe_cfg.clone()
    };
    let data = probe_data_from(dataset, |idx| {
        stitched_pooled_features(&model, dataset, idx, store)
    })?;
    let probe = linear_probe(&data, &probe_cfg)?;
    Ok(SuiteCell {
        config: cell_cfg.clone(),
        probe,
        trace,
        stitch: model.stitch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, ModelSpec, Objective};
    use crate::rng::StreamRng;
    use crate::data::{gen_shapes, DatasetParams};
    use crate::training::LossKind;

    fn probe_cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            max_epochs: 60,
            patience: 10,
            batch: 16,
            ..TrainConfig::defaults_for(LossKind::Tlt, 3)
        }
    }

    #[test]
    fn separable_two_class_probe_is_perfect() {
        let mut r = StreamRng::new(1, "sep");
        // class = sign of the feature-0 offset: ±2, noise well inside margin
        let mk_labels = |n: usize| -> Vec<usize> { (0..n).map(|i| i % 2).collect() };
        let mut build = |n: usize| {
            let mut t = Tensor::<f32>::zeros(vec![n, 4]);
            for i in 0..n {
                let off = if i % 2 == 0 { 2.0 } else { -2.0 };
                for j in 0..4 {
                    t.data_mut()[i * 4 + j] =
                        (r.uniform(-0.3, 0.3) + if j == 0 { off } else { 0.0 }) as f32;
                }
            }
            t
        };
        let data = ProbeData {
            train: build(40),
            train_labels: mk_labels(40),
            val: build(10),
            val_labels: mk_labels(10),
            test: build(20),
            test_labels: mk_labels(20),
        };
        let res = linear_probe(&data, &probe_cfg()).unwrap();
        assert_eq!(res.accuracy, 1.0);
    }

    #[test]
    fn shuffled_labels_probe_is_near_chance() {
        let mut r = StreamRng::new(2, "chance");
        let classes = 4usize;
        let mut build = |n: usize| Tensor::<f32>::from_fn(vec![n, 8], |_| r.uniform(-1.0, 1.0) as f32);
        let mut lr = StreamRng::new(3, "labels");
        let labels = |n: usize, lr: &mut StreamRng| -> Vec<usize> {
            (0..n).map(|_| lr.below(classes)).collect()
        };
        let n_test = 400;
        let data = ProbeData {
            train: build(200),
            train_labels: labels(200, &mut lr),
            val: build(50),
            val_labels: labels(50, &mut lr),
            test: build(n_test),
            test_labels: labels(n_test, &mut lr),
        };
        let res = linear_probe(&data, &probe_cfg()).unwrap();
        // binomial bound: p = 1/C, 3σ over n_test draws
        let p = 1.0 / classes as f64;
        let sigma = (p * (1.0 - p) / n_test as f64).sqrt();
        assert!(
            (res.accuracy - p).abs() <= 3.0 * sigma + 0.05,
            "accuracy {} vs chance {p}",
            res.accuracy
        );
    }

    #[test]
    fn degenerate_single_class_split_is_config_error() {
        let data = ProbeData {
            train: Tensor::<f32>::zeros(vec![10, 4]),
            train_labels: vec![0; 10],
            val: Tensor::<f32>::zeros(vec![4, 4]),
            val_labels: vec![0; 4],
            test: Tensor::<f32>::zeros(vec![4, 4]),
            test_labels: vec![0; 4],
        };
        assert!(linear_probe(&data, &probe_cfg()).is_err());
    }

    #[test]
    fn probe_accuracy_invariant_under_monotone_logit_rescale() {
        let mut r = StreamRng::new(5, "mono");
        let head = LinearHead::<f32>::init(6, 3, 9);
        let x = Tensor::<f32>::from_fn(vec![50, 6], |_| r.uniform(-1.0, 1.0) as f32);
        let base = head.predict(&x).unwrap();
        // strictly monotone rescale of logits: argmax unchanged
        let logits = head.logits(&x).unwrap();
        let rescaled = Tensor::<f32>::from_fn(vec![50, 3], |i| logits.data()[i] * 3.5 + 0.75);
        assert_eq!(base, argmax_rows(&rescaled));
    }

    #[test]
    fn bilinear_constant_and_identity_cases() {
        // 1×1 grid → constant output
        let g = Tensor::<f64>::new(vec![1, 1], vec![2.5]).unwrap();
        let up = bilinear_upsample(&g, 1, 1, 3, 3).unwrap();
        assert!(up.data().iter().all(|&v| v == 2.5));

        // same-size upsample → identity
        let g2 = Tensor::<f64>::from_fn(vec![9, 1], |i| i as f64);
        let same = bilinear_upsample(&g2, 3, 3, 3, 3).unwrap();
        assert_eq!(same.data(), g2.data());
    }

    /// 2×2 grid [[0,1],[2,3]] to 4×4 under the half-pixel convention: source
    /// coordinates per axis are (i+0.5)/2−0.5 clamped → {0, 0.25, 0.75, 1},
    /// and the grid value field is f(y,x) = 2y + x.
    #[test]
    fn bilinear_two_by_two_hand_values() {
        let g = Tensor::<f64>::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = bilinear_upsample(&g, 2, 2, 4, 4).unwrap();
        let coords = [0.0, 0.25, 0.75, 1.0];
        for (iy, cy) in coords.iter().enumerate() {
            for (ix, cx) in coords.iter().enumerate() {
                let want = 2.0 * cy + cx;
                let got = up.data()[iy * 4 + ix];
                assert!(
                    (got - want).abs() < 1e-12,
                    "({iy},{ix}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn iou_fixtures() {
        // perfect prediction → mIoU 1
        let truth = vec![0, 0, 1, 1];
        let perfect = iou_from_predictions(&truth, &truth, 2);
        assert_eq!(perfect.miou, 1.0);

        // collapsed predictor on a balanced 2-class mask → (0.5 + 0)/2
        let preds = vec![0, 0, 0, 0];
        let collapsed = iou_from_predictions(&preds, &truth, 2);
        assert!((collapsed.miou - 0.25).abs() < 1e-12);

        // class absent from both prediction and truth is excluded
        let r = iou_from_predictions(&[0, 1], &[0, 1], 3);
        assert_eq!(r.per_class_iou.len(), 2);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn partition_pattern_table() {
        let labels = vec![1usize; 8];
        // eight samples covering all (s, t, f) patterns
        let s = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let t = vec![1, 1, 0, 0, 1, 1, 0, 0];
        let f = vec![1, 0, 1, 0, 1, 0, 1, 0];
        let p = partition_predictions(&s, &t, &f, &labels).unwrap();
        assert_eq!(p.discarded_all_right, 1);
        assert_eq!(p.interference_both_right, 1);
        assert_eq!(p.preserve_source_right, 1);
        assert_eq!(p.interference_source_right, 1);
        assert_eq!(p.preserve_target_right, 1);
        assert_eq!(p.interference_target_right, 1);
        assert_eq!(p.rescue, 1);
        assert_eq!(p.discarded_all_wrong, 1);
        assert_eq!(p.total(), 8);
    }

    #[test]
    fn partition_rescue_is_w_w_r() {
        let p = partition_predictions(&[0], &[0], &[1], &[1]).unwrap();
        assert_eq!(p.rescue, 1);
        let p2 = partition_predictions(&[1], &[1], &[1], &[1]).unwrap();
        assert_eq!(p2.discarded_all_right, 1);
    }

    #[test]
    fn partition_matches_bruteforce_on_random_triples() {
        for seed in 0..3 {
            let mut r = StreamRng::new(seed, "part");
            let n = 500;
            let classes = 3;
            let labels: Vec<usize> = (0..n).map(|_| r.below(classes)).collect();
            let s: Vec<usize> = (0..n).map(|_| r.below(classes)).collect();
            let t: Vec<usize> = (0..n).map(|_| r.below(classes)).collect();
            let f: Vec<usize> = (0..n).map(|_| r.below(classes)).collect();
            let p = partition_predictions(&s, &t, &f, &labels).unwrap();
            // brute-force enumeration over pattern triples
            let mut buckets = [0usize; 8];
            for i in 0..n {
                let key = ((s[i] == labels[i]) as usize) << 2
                    | ((t[i] == labels[i]) as usize) << 1
                    | (f[i] == labels[i]) as usize;
                buckets[key] += 1;
            }
            assert_eq!(p.discarded_all_wrong, buckets[0b000]);
            assert_eq!(p.rescue, buckets[0b001]);
            assert_eq!(p.interference_target_right, buckets[0b010]);
            assert_eq!(p.preserve_target_right, buckets[0b011]);
            assert_eq!(p.interference_source_right, buckets[0b100]);
            assert_eq!(p.preserve_source_right, buckets[0b101]);
            assert_eq!(p.interference_both_right, buckets[0b110]);
            assert_eq!(p.preserve(), buckets[0b011] + buckets[0b101]);
            assert_eq!(p.total(), n);
        }
    }

    #[test]
    fn partition_rejects_length_mismatch() {
        assert!(partition_predictions(&[0], &[0, 1], &[0], &[0]).is_err());
    }

    #[test]
    fn distance_report_identity_self_stitch_is_zero() {
        let ds = gen_shapes(&DatasetParams {
            classes: 2,
            per_class_train: 6,
            per_class_test: 3,
            image_side: 16,
            seed: 1,
        })
        .unwrap();
        let spec = ModelSpec {
            depth: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            patch: 8,
            image: 16,
            use_class_token: false,
            num_classes: 0,
            objective_tag: Objective::Supervised,
        };
        let mut bb = init_backbone::<f32>(&spec, 4).unwrap();
        bb.freeze();
        let bb = Arc::new(bb);
        let s = make_stitch::<f32>(StitchFamily::Linear, 16, 16, &StitchInit::default(), 0).unwrap();
        let m = StitchedModel::new(bb.clone(), bb.clone(), s, 1, StitchMode::SelfTarget).unwrap();
        let mut store = CacheStore::new();
        let r = distance_report(&m, &ds, &ds.test_idx, &mut store).unwrap();
        assert_eq!(r.layer_distance, 0.0);
        assert_eq!(r.final_distance, 0.0);
    }

    #[test]
    fn distance_report_invariant_to_batch_partitioning() {
        let ds = gen_shapes(&DatasetParams {
            classes: 2,
            per_class_train: 6,
            per_class_test: 6,
            image_side: 16,
            seed: 2,
        })
        .unwrap();
        let spec = ModelSpec {
            depth: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            patch: 8,
            image: 16,
            use_class_token: false,
            num_classes: 0,
            objective_tag: Objective::Supervised,
        };
        let mut a = init_backbone::<f32>(&spec, 5).unwrap();
        let mut b = init_backbone::<f32>(&spec, 6).unwrap();
        a.freeze();
        b.freeze();
        let (a, b) = (Arc::new(a), Arc::new(b));
        let s = make_stitch::<f32>(StitchFamily::Mlp, 16, 16, &StitchInit::default(), 7).unwrap();
        let m = StitchedModel::new(a, b, s, 1, StitchMode::Cross).unwrap();
        let mut store = CacheStore::new();
        let full = distance_report(&m, &ds, &ds.test_idx, &mut store).unwrap();
        // single-pass mean oracle: per-sample distances averaged by hand
        let mut layer_sum = 0.0;
        let mut final_sum = 0.0;
        for &i in &ds.test_idx {
            let r = distance_report(&m, &ds, &[i], &mut store).unwrap();
            layer_sum += r.layer_distance;
            final_sum += r.final_distance;
        }
        let n = ds.test_idx.len() as f64;
        assert!((full.layer_distance - layer_sum / n).abs() < 1e-4);
        assert!((full.final_distance - final_sum / n).abs() < 1e-4);
    }

    /// d = k = 1 scalar pipeline: S(R) = 3, target layer value 1, suffix
    /// doubles its input: layer distance |3−1| = 2, final |6−2| = 4.
    #[test]
    fn distance_scalar_pipeline_oracle() {
        let a = Tensor::<f64>::new(vec![1, 1], vec![3.0]).unwrap();
        let tgt_n = Tensor::<f64>::new(vec![1, 1], vec![1.0]).unwrap();
        let layer = mean_frobenius_distance(&a, &tgt_n, 1);
        assert!((layer - 2.0).abs() < 1e-12);
        let fin = Tensor::<f64>::new(vec![1, 1], vec![6.0]).unwrap();
        let tgt_fin = Tensor::<f64>::new(vec![1, 1], vec![2.0]).unwrap();
        let fdist = mean_frobenius_distance(&fin, &tgt_fin, 1);
        assert!((fdist - 4.0).abs() < 1e-12);
    }

    #[test]
    fn suite_grid_shape_and_config_hashes() {
        let ds = gen_shapes(&DatasetParams {
            classes: 2,
            per_class_train: 8,
            per_class_test: 3,
            image_side: 16,
            seed: 5,
        })
        .unwrap();
        let spec = ModelSpec {
            depth: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            patch: 8,
            image: 16,
            use_class_token: false,
            num_classes: 0,
            objective_tag: Objective::Supervised,
        };
        let mut a = init_backbone::<f32>(&spec, 8).unwrap();
        let mut b = init_backbone::<f32>(&spec, 9).unwrap();
        a.freeze();
        b.freeze();
        let (a, b) = (Arc::new(a), Arc::new(b));
        let cfg = TrainConfig {
            max_epochs: 2,
            batch: 8,
            lr: 0.01,
            ..TrainConfig::defaults_for(LossKind::Lfm, 11)
        };
        let mut store = CacheStore::new();
        let probe_cfg = TrainConfig {
            lr: 0.02,
            max_epochs: 5,
            ..TrainConfig::defaults_for(LossKind::Tlt, 11)
        };
        let cells = selfstitch_suite(
            &a,
            &b,
            &[StitchFamily::Linear],
            &[1, 2],
            &cfg,
            &probe_cfg,
            &ds,
            &mut store,
        )
        .unwrap();
        assert_eq!(cells.len(), 3 * 1 * 2);
        // same (family, point): configs differ only in mode
        let c0 = &cells[0].config;
        let c1 = &cells[1].config;
        assert_ne!(c0.digest(), c1.digest());
        let mut c1_as_c0 = c1.clone();
        c1_as_c0.mode = c0.mode;
        assert_eq!(c0.digest(), c1_as_c0.digest());
    }
}
