//! The experiment stage graph.
//!
//! A [`Pipeline`] executes gen-data → pretrain → cache → stitch-train →
//! evaluate → report against an output directory. Every artifact is named by
//! a content hash of the config slice that produces it (plus upstream
//! digests), so re-running a completed config touches nothing, and deleting
//! one artifact recomputes exactly that artifact. Independent cells run
//! concurrently up to the thread cap; each cell is internally
//! single-threaded and deterministic.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::backbone::{load_checkpoint, save_checkpoint, Backbone};
use crate::config::{slice_hash, ExperimentConfig};
use crate::data::{gen_shapes, load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    distance_report, partition_predictions, run_suite_cell, PredictionPartition, SuiteCellConfig,
};
use crate::stitch::{save_stitch, StitchFamily, StitchMode};
use crate::training::{
    load_cache, pretrain_backbone, save_cache, CacheStore, LossKind, TrainConfig,
};

/// Worker-thread cap: explicit option, else `STITCHLAB_THREADS`, else all
/// available cores.
pub fn thread_cap(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| {
            std::env::var("STITCHLAB_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .max(1)
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub dry_run: bool,
    pub threads: Option<usize>,
    /// Override the config's base seed (CLI `--seed`).
    pub seed_override: Option<u64>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            dry_run: false,
            threads: None,
            seed_override: None,
        }
    }
}

/// One trainable cell of the experiment grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellDesc {
    pub loss: LossKind,
    pub family: StitchFamily,
    pub stitch_point: usize,
    pub mode: StitchMode,
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub dataset_id: String,
    pub source_digest: String,
    pub target_digest: String,
    pub train: TrainConfig,
}

impl CellDesc {
    pub fn hash(&self) -> String {
        slice_hash(self)
    }

    pub fn sort_key(&self) -> (String, String, usize, String, u64) {
        (
            self.loss.to_string(),
            self.family.to_string(),
            self.stitch_point,
            self.mode.to_string(),
            self.seed,
        )
    }
}

/// Persisted result of one cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellOutcome {
    pub desc: CellDesc,
    pub cell_hash: String,
    pub probe_accuracy: f64,
    pub probe_per_class: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase2_init_digest: Option<String>,
    /// Test-split predictions of the cell's probe.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionRow {
    pub loss: LossKind,
    pub family: StitchFamily,
    pub stitch_point: usize,
    pub seed: u64,
    pub counts: PredictionPartition,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_digest: String,
    pub dataset_id: String,
    pub cells_trained: usize,
    pub cells_reused: usize,
    pub outcomes: Vec<CellOutcome>,
    pub partitions: Vec<PartitionRow>,
    pub out_dir: PathBuf,
}

/// The planned work of a run, for `--dry-run`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: String,
    pub artifact: PathBuf,
    pub cached: bool,
}

fn mix_seed(base: u64, replicate: u64) -> u64 {
    base ^ replicate.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub type BackboneMap = HashMap<(String, u64), Arc<Backbone<f32>>>;

/// Stage-by-stage pipeline with memoized intermediate state.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    threads: usize,
    dataset: Option<Arc<Dataset>>,
    backbones: Option<Arc<BackboneMap>>,
    store: Arc<Mutex<CacheStore<f32>>>,
}

impl Pipeline {
    pub fn new(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Self> {
        let mut cfg = cfg.clone();
        if let Some(seed) = opts.seed_override {
            cfg.seed = seed;
            cfg.seeds = vec![];
        }
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            out: opts.out_dir.clone(),
            threads: thread_cap(opts.threads),
            dataset: None,
            backbones: None,
            store: Arc::new(Mutex::new(CacheStore::new())),
        })
    }

    fn dataset_path(&self) -> PathBuf {
        self.out
            .join("datasets")
            .join(format!("shapes-{}.stch1", slice_hash(&self.cfg.dataset)))
    }

    fn backbone_path(&self, name: &str, replicate: u64, hash: &str) -> PathBuf {
        self.out
            .join("backbones")
            .join(format!("{name}-s{replicate}-{hash}.stch1"))
    }

    fn cell_paths(&self, hash: &str) -> (PathBuf, PathBuf, PathBuf) {
        (
            self.out.join("stitches").join(format!("{hash}.stch1")),
            self.out.join("cells").join(format!("{hash}.json")),
            self.out.join("traces").join(format!("{hash}.csv")),
        )
    }

    /// Stage: gen-data.
    pub fn dataset(&mut self) -> Result<Arc<Dataset>> {
        if let Some(ds) = &self.dataset {
            return Ok(ds.clone());
        }
        let path = self.dataset_path();
        let ds = if path.exists() {
            load_dataset(&path).map_err(|e| stage_err("gen-data", e))?
        } else {
            let ds = gen_shapes(&self.cfg.dataset).map_err(|e| stage_err("gen-data", e))?;
            save_dataset(&ds, &path).map_err(|e| stage_err("gen-data", e))?;
            ds
        };
        let ds = Arc::new(ds);
        self.dataset = Some(ds.clone());
        Ok(ds)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    /// Stage: pretrain, parallel over backbone × replicate.
    pub fn backbones(&mut self) -> Result<Arc<BackboneMap>> {
        if let Some(b) = &self.backbones {
            return Ok(b.clone());
        }
        let dataset = self.dataset()?;
        let mut jobs = Vec::new();
        for entry in &self.cfg.backbones {
            for &replicate in &self.cfg.replicate_seeds() {
                jobs.push((entry.clone(), replicate));
            }
        }
        let out = self.out.clone();
        let pool = self.pool()?;
        let results: Vec<Result<((String, u64), Backbone<f32>)>> = pool.install(|| {
            use rayon::prelude::*;
            jobs.par_iter()
                .map(|(entry, replicate)| {
                    let h = slice_hash(&(entry, replicate, &dataset.dataset_id));
                    let path = out
                        .join("backbones")
                        .join(format!("{}-s{replicate}-{h}.stch1", entry.name));
                    let bb = if path.exists() {
                        load_checkpoint::<f32>(&path).map_err(|e| stage_err("pretrain", e))?
                    } else {
                        let mut pc = entry.pretrain.clone();
                        pc.seed = mix_seed(pc.seed, *replicate);
                        let (bb, trace) = pretrain_backbone::<f32>(&entry.spec, &dataset, &pc)
                            .map_err(|e| stage_err("pretrain", e))?;
                        save_checkpoint(&bb, &path).map_err(|e| stage_err("pretrain", e))?;
                        let tpath = out
                            .join("traces")
                            .join(format!("pretrain-{}-s{replicate}-{h}.csv", entry.name));
                        write_text(&tpath, &trace.to_csv())?;
                        bb
                    };
                    Ok(((entry.name.clone(), *replicate), bb))
                })
                .collect()
        });
        let mut map = BackboneMap::new();
        for r in results {
            let (key, bb) = r?;
            map.insert(key, Arc::new(bb));
        }
        let map = Arc::new(map);
        self.backbones = Some(map.clone());
        Ok(map)
    }

    /// Enumerate every requested cell, sorted and deduplicated.
    pub fn cells(&mut self) -> Result<Vec<CellDesc>> {
        let dataset = self.dataset()?;
        let backbones = self.backbones()?;
        let cfg = &self.cfg;
        let digest = |name: &str, replicate: u64| -> String {
            backbones
                .get(&(name.to_string(), replicate))
                .map(|b| b.param_digest())
                .unwrap_or_default()
        };
        let mut cells = Vec::new();
        for &replicate in &cfg.replicate_seeds() {
            for plan in &cfg.train.losses {
                let points = plan.points.as_ref().unwrap_or(&cfg.stitch.points);
                for &family in &cfg.stitch.families {
                    for &n in points {
                        cells.push(CellDesc {
                            loss: plan.kind,
                            family,
                            stitch_point: n,
                            mode: StitchMode::Cross,
                            seed: replicate,
                            source: cfg.stitch.source.clone(),
                            target: cfg.stitch.target.clone(),
                            dataset_id: dataset.dataset_id.clone(),
                            source_digest: digest(&cfg.stitch.source, replicate),
                            target_digest: digest(&cfg.stitch.target, replicate),
                            train: cfg.train.config_for(plan.kind, replicate),
                        });
                    }
                }
            }
            if let Some(ss) = &cfg.eval.selfstitch {
                for &family in &ss.families {
                    for &n in &ss.points {
                        for mode in
                            [StitchMode::Cross, StitchMode::SelfSource, StitchMode::SelfTarget]
                        {
                            cells.push(CellDesc {
                                loss: ss.loss,
                                family,
                                stitch_point: n,
                                mode,
                                seed: replicate,
                                source: cfg.stitch.source.clone(),
                                target: cfg.stitch.target.clone(),
                                dataset_id: dataset.dataset_id.clone(),
                                source_digest: digest(&cfg.stitch.source, replicate),
                                target_digest: digest(&cfg.stitch.target, replicate),
                                train: cfg.train.config_for(ss.loss, replicate),
                            });
                        }
                    }
                }
            }
        }
        cells.sort_by_key(|c| c.sort_key());
        cells.dedup_by_key(|c| c.hash());
        Ok(cells)
    }

    /// The (backbone, replicate, layer) cache needs of a cell set.
    fn cache_needs(&self, cells: &[CellDesc]) -> Vec<(String, u64, usize)> {
        let mut needs = std::collections::BTreeSet::new();
        for c in cells {
            let (src_name, tgt_name) = match c.mode {
                StitchMode::Cross => (c.source.clone(), c.target.clone()),
                StitchMode::SelfSource => (c.source.clone(), c.source.clone()),
                StitchMode::SelfTarget => (c.target.clone(), c.target.clone()),
            };
            let prefix = if c.family == StitchFamily::LoraBlock {
                c.stitch_point - 1
            } else {
                c.stitch_point
            };
            needs.insert((src_name.clone(), c.seed, prefix));
            match c.loss {
                LossKind::Lfm => {
                    needs.insert((tgt_name, c.seed, c.stitch_point));
                }
                LossKind::Ffm | LossKind::TwoStage => {
                    let depth = self
                        .cfg
                        .backbone(&tgt_name)
                        .map(|b| b.spec.depth)
                        .unwrap_or(0);
                    needs.insert((tgt_name, c.seed, depth));
                }
                LossKind::Tlt => {}
            }
        }
        needs.into_iter().collect()
    }

    /// Stage: cache — persist every needed feature cache and pre-seed the
    /// in-memory store. Returns (built, loaded) counts.
    pub fn persist_caches(&mut self) -> Result<(usize, usize)> {
        let dataset = self.dataset()?;
        let backbones = self.backbones()?;
        let cells = self.cells()?;
        let needs = self.cache_needs(&cells);
        let mut built = 0;
        let mut loaded = 0;
        for (name, replicate, layer) in needs {
            let bb = backbones
                .get(&(name.clone(), replicate))
                .ok_or_else(|| Error::Config(format!("missing backbone '{name}'")))?;
            let digest = bb.param_digest();
            let h = slice_hash(&(&digest, layer, &dataset.dataset_id));
            let path = self
                .out
                .join("caches")
                .join(format!("{name}-s{replicate}-L{layer}-{h}.stch1"));
            let mut store = self.store.lock().expect("cache store");
            if store.contains(&digest, layer) {
                continue;
            }
            if path.exists() {
                let cache = load_cache::<f32>(&path).map_err(|e| stage_err("cache", e))?;
                cache
                    .check_provenance(bb, &dataset)
                    .map_err(|e| stage_err("cache", e))?;
                store.insert(Arc::new(cache));
                loaded += 1;
            } else {
                let cache = store
                    .get_or_build(bb, layer, &dataset)
                    .map_err(|e| stage_err("cache", e))?;
                save_cache(&cache, &path).map_err(|e| stage_err("cache", e))?;
                built += 1;
            }
        }
        Ok((built, loaded))
    }

    /// Stage: stitch-train + probe + distance over all cells, parallel.
    /// Returns outcomes plus (trained, reused) counts.
    pub fn run_cells(&mut self) -> Result<(Vec<CellOutcome>, usize, usize)> {
        let dataset = self.dataset()?;
        let backbones = self.backbones()?;
        let cells = self.cells()?;
        self.persist_caches()?;
        let out = self.out.clone();
        let cfg = self.cfg.clone();
        let store = self.store.clone();
        let pool = self.pool()?;
        let results: Vec<Result<(CellOutcome, bool)>> = pool.install(|| {
            use rayon::prelude::*;
            cells
                .par_iter()
                .map(|desc| run_cell(&cfg, desc, &dataset, &backbones, &store, &out))
                .collect()
        });
        let mut outcomes = Vec::new();
        let mut trained = 0;
        let mut reused = 0;
        for r in results {
            let (o, was_trained) = r?;
            if was_trained {
                trained += 1;
            } else {
                reused += 1;
            }
            outcomes.push(o);
        }
        outcomes.sort_by_key(|o| o.desc.sort_key());
        Ok((outcomes, trained, reused))
    }

    /// Full stage graph with reports.
    pub fn full_run(&mut self) -> Result<RunSummary> {
        let dataset = self.dataset()?;
        let (outcomes, trained, reused) = self.run_cells()?;
        let partitions = compute_partitions(&dataset, &outcomes);
        let summary = RunSummary {
            config_digest: self.cfg.digest(),
            dataset_id: dataset.dataset_id.clone(),
            cells_trained: trained,
            cells_reused: reused,
            outcomes,
            partitions,
            out_dir: self.out.clone(),
        };
        crate::report::emit_reports(&summary, &self.out)?;
        Ok(summary)
    }

    /// Plan the stage list without side effects.
    pub fn plan(&mut self) -> Result<Vec<StagePlan>> {
        let mut plan = Vec::new();
        let ds_path = self.dataset_path();
        plan.push(StagePlan {
            stage: "gen-data".into(),
            cached: ds_path.exists(),
            artifact: ds_path.clone(),
        });
        let dataset_id = if ds_path.exists() {
            load_dataset(&ds_path)
                .map(|d| d.dataset_id)
                .unwrap_or_default()
        } else {
            String::from("(pending)")
        };
        let mut all_cached = ds_path.exists();
        for entry in &self.cfg.backbones {
            for &replicate in &self.cfg.replicate_seeds() {
                let h = slice_hash(&(entry, replicate, &dataset_id));
                let path = self.backbone_path(&entry.name, replicate, &h);
                all_cached &= path.exists();
                plan.push(StagePlan {
                    stage: "pretrain".into(),
                    cached: path.exists(),
                    artifact: path,
                });
            }
        }
        // Cell hashes depend on pretrained digests; when every upstream
        // artifact exists on disk the plan resolves them exactly, otherwise
        // cells are listed as pending.
        if all_cached {
            for desc in self.cells()? {
                let (stitch_path, cell_path, _) = self.cell_paths(&desc.hash());
                plan.push(StagePlan {
                    stage: "stitch-train".into(),
                    cached: stitch_path.exists() && cell_path.exists(),
                    artifact: cell_path,
                });
            }
        } else {
            plan.push(StagePlan {
                stage: "stitch-train".into(),
                cached: false,
                artifact: self.out.join("cells").join("(pending backbones)"),
            });
        }
        plan.push(StagePlan {
            stage: "report".into(),
            cached: false,
            artifact: self.out.join("reports").join("summary.json"),
        });
        Ok(plan)
    }
}

/// Execute the full stage graph (or print the plan with `dry_run`).
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let mut pipeline = Pipeline::new(cfg, opts)?;
    if opts.dry_run {
        for p in pipeline.plan()? {
            println!(
                "[plan] {:<12} {} ({})",
                p.stage,
                p.artifact.display(),
                if p.cached { "cached" } else { "pending" }
            );
        }
        return Ok(RunSummary {
            config_digest: pipeline.cfg.digest(),
            dataset_id: String::new(),
            cells_trained: 0,
            cells_reused: 0,
            outcomes: vec![],
            partitions: vec![],
            out_dir: opts.out_dir.clone(),
        });
    }
    pipeline.full_run()
}

fn stage_err(stage: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) if msg.starts_with("stage ") => Error::Config(msg),
        other => Error::Config(format!("stage {stage}: {other}")),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run_cell(
    cfg: &ExperimentConfig,
    desc: &CellDesc,
    dataset: &Dataset,
    backbones: &BackboneMap,
    store: &Mutex<CacheStore<f32>>,
    out: &Path,
) -> Result<(CellOutcome, bool)> {
    let hash = desc.hash();
    let stitch_path = out.join("stitches").join(format!("{hash}.stch1"));
    let cell_path = out.join("cells").join(format!("{hash}.json"));
    let trace_path = out.join("traces").join(format!("{hash}.csv"));
    if stitch_path.exists() && cell_path.exists() {
        let json = std::fs::read_to_string(&cell_path)?;
        let outcome: CellOutcome =
            serde_json::from_str(&json).map_err(|e| stage_err("stitch-train", Error::Json(e)))?;
        return Ok((outcome, false));
    }

    let src_bb = backbones
        .get(&(desc.source.clone(), desc.seed))
        .ok_or_else(|| Error::Config(format!("missing backbone '{}'", desc.source)))?;
    let tgt_bb = backbones
        .get(&(desc.target.clone(), desc.seed))
        .ok_or_else(|| Error::Config(format!("missing backbone '{}'", desc.target)))?;
    let (src, tgt) = match desc.mode {
        StitchMode::Cross => (src_bb.clone(), tgt_bb.clone()),
        StitchMode::SelfSource => (src_bb.clone(), src_bb.clone()),
        StitchMode::SelfTarget => (tgt_bb.clone(), tgt_bb.clone()),
    };

    let cell_cfg = SuiteCellConfig {
        family: desc.family,
        stitch_point: desc.stitch_point,
        mode: desc.mode,
        train: desc.train.clone(),
    };
    let probe_cfg = cfg.eval.probe_config(desc.seed);

    // The shared store is locked across the whole cell; cache reuse across
    // cells matters more than intra-cell parallelism at this scale.
    let (cell, distances) = {
        let mut store = store.lock().expect("cache store poisoned");
        let cell = run_suite_cell(&src, &tgt, &cell_cfg, &probe_cfg, dataset, &mut store)
            .map_err(|e| stage_err("stitch-train", e))?;
        let distances = if cfg.eval.distance {
            let model = crate::stitch::StitchedModel::new(
                src.clone(),
                tgt.clone(),
                cell.stitch.clone(),
                desc.stitch_point,
                desc.mode,
            )?;
            Some(
                distance_report(&model, dataset, &dataset.test_idx, &mut store)
                    .map_err(|e| stage_err("distance", e))?,
            )
        } else {
            None
        };
        (cell, distances)
    };

    let outcome = CellOutcome {
        desc: desc.clone(),
        cell_hash: hash.clone(),
        probe_accuracy: cell.probe.accuracy,
        probe_per_class: cell.probe.per_class.clone(),
        layer_distance: distances.map(|d| d.layer_distance),
        final_distance: distances.map(|d| d.final_distance),
        best_val: cell.trace.best_val,
        chosen_lr: cell.trace.chosen_lr,
        phase2_init_digest: cell.trace.phase2_init_digest.clone(),
        predictions: cell.probe.predictions.clone(),
    };

    save_stitch(&cell.stitch, &stitch_path).map_err(|e| stage_err("stitch-train", e))?;
    write_text(&trace_path, &cell.trace.to_csv())?;
    std::fs::create_dir_all(cell_path.parent().unwrap())?;
    let tmp = cell_path.with_extension("partial");
    std::fs::write(&tmp, serde_json::to_string_pretty(&outcome)?)?;
    std::fs::rename(&tmp, &cell_path)?;
    Ok((outcome, true))
}

/// Partition rows derivable from persisted outcomes (used by `report`).
pub fn partitions_from_outcomes(dataset: &Dataset, outcomes: &[CellOutcome]) -> Vec<PartitionRow> {
    compute_partitions(dataset, outcomes)
}

fn compute_partitions(dataset: &Dataset, outcomes: &[CellOutcome]) -> Vec<PartitionRow> {
    let labels = dataset.labels_of(&dataset.test_idx);
    let mut groups: HashMap<(String, String, usize, u64), [Option<usize>; 3]> = HashMap::new();
    for (i, o) in outcomes.iter().enumerate() {
        let key = (
            o.desc.loss.to_string(),
            o.desc.family.to_string(),
            o.desc.stitch_point,
            o.desc.seed,
        );
        let slot = match o.desc.mode {
            StitchMode::SelfSource => 0,
            StitchMode::SelfTarget => 1,
            StitchMode::Cross => 2,
        };
        groups.entry(key).or_default()[slot] = Some(i);
    }
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort();
    let mut rows = Vec::new();
    for key in keys {
        let [ss, st, cr] = groups[&key];
        if let (Some(ss), Some(st), Some(cr)) = (ss, st, cr) {
            let (ss, st, cr) = (&outcomes[ss], &outcomes[st], &outcomes[cr]);
            if ss.predictions.len() == labels.len()
                && st.predictions.len() == labels.len()
                && cr.predictions.len() == labels.len()
                && !labels.is_empty()
            {
                let counts = partition_predictions(
                    &ss.predictions,
                    &st.predictions,
                    &cr.predictions,
                    &labels,
                )
                .expect("partition lengths verified");
                rows.push(PartitionRow {
                    loss: cr.desc.loss,
                    family: cr.desc.family,
                    stitch_point: cr.desc.stitch_point,
                    seed: cr.desc.seed,
                    counts,
                });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_cap_resolution() {
        assert_eq!(thread_cap(Some(3)), 3);
        assert!(thread_cap(None) >= 1);
    }

    #[test]
    fn mix_seed_distinguishes_replicates() {
        assert_ne!(mix_seed(100, 0), mix_seed(100, 1));
        assert_eq!(mix_seed(100, 2), mix_seed(100, 2));
    }
}
