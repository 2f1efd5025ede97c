//! `stitchlab` — the experiment harness CLI.
//!
//! Subcommands map onto the pipeline stages (gen-data, pretrain, cache,
//! stitch-train, probe, dense-probe, distance, selfstitch, partition, run,
//! report), plus the pure stitch-tree arithmetic (vst-cost, vst-gain) and the
//! numeric verification battery (verify).

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stitchlab_core::config::ExperimentConfig;
use stitchlab_core::pipeline::{Pipeline, RunOptions};
use stitchlab_core::training::TrainConfig;
use stitchlab_core::vst::{normalized_gain, paper_cost_table, vst_extra_cost, CostQuery, MetricTriple};

#[derive(Parser)]
#[command(name = "stitchlab", version, about = "Desk-scale model-stitching laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment config (strict JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output / results directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the stage plan without side effects.
    #[arg(long)]
    dry_run: bool,
    /// Worker-thread cap (default: STITCHLAB_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output format for tables printed to stdout.
    #[arg(long, value_parser = ["csv", "json"], default_value = "csv")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or reuse) the synthetic dataset artifact.
    GenData(CommonOpts),
    /// Pretrain all configured backbones across replicate seeds.
    Pretrain(CommonOpts),
    /// Build and persist the feature caches the configured cells need.
    Cache(CommonOpts),
    /// Train every stitch cell (includes probing and distances).
    StitchTrain(CommonOpts),
    /// Print per-cell probe accuracies from persisted results.
    Probe(CommonOpts),
    /// Train a dense per-token probe and report mIoU.
    DenseProbe {
        #[command(flatten)]
        common: CommonOpts,
        /// Backbone name to probe (final-layer patch tokens).
        #[arg(long)]
        backbone: String,
    },
    /// Print layer/final feature distances from persisted results.
    Distance(CommonOpts),
    /// Run only the self-stitch control grid.
    Selfstitch(CommonOpts),
    /// Print the prediction-partition table from persisted results.
    Partition(CommonOpts),
    /// Stitch-tree extra-cost model.
    VstCost {
        /// Constituent model count B (omit to print the full reference grid).
        #[arg(long)]
        branches: Option<usize>,
        /// Effective depth L.
        #[arg(long, default_value_t = 23)]
        depth: usize,
        /// Stitch point n.
        #[arg(long)]
        point: Option<usize>,
        /// Optional CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Normalized-gain ledger from (baseline, full, vst) metric triples.
    VstGain {
        /// JSON file: [{"metric": ..., "baseline": ..., "full": ..., "vst": ...}, ...]
        #[arg(long, conflicts_with = "paper")]
        input: Option<PathBuf>,
        /// Use the built-in reference triples instead of a file.
        #[arg(long)]
        paper: bool,
        /// Which reference column to use with --paper.
        #[arg(long, value_parser = ["vst14", "vst22"], default_value = "vst22")]
        variant: String,
        /// Optional CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Full stage graph: gen-data → pretrain → cache → stitch-train → report.
    Run(CommonOpts),
    /// Regenerate reports from a results directory.
    Report {
        /// Results directory of a previous run.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the gradient-check and invariant suites.
    Verify {
        /// Randomized trials per op.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

fn load_config(opts: &CommonOpts) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&opts.config)
        .with_context(|| format!("reading config {}", opts.config.display()))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

fn pipeline_for(opts: &CommonOpts) -> Result<Pipeline> {
    let cfg = load_config(opts)?;
    let run_opts = RunOptions {
        out_dir: opts.out.clone(),
        dry_run: opts.dry_run,
        threads: opts.threads,
        seed_override: opts.seed,
    };
    Ok(Pipeline::new(&cfg, &run_opts)?)
}

fn print_plan(p: &mut Pipeline) -> Result<()> {
    for s in p.plan()? {
        println!(
            "[plan] {:<12} {} ({})",
            s.stage,
            s.artifact.display(),
            if s.cached { "cached" } else { "pending" }
        );
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(opts) => {
            let mut p = pipeline_for(&opts)?;
            if opts.dry_run {
                return print_plan(&mut p);
            }
            let ds = p.dataset()?;
            println!("dataset {} ({} samples)", ds.dataset_id, ds.len());
        }
        Command::Pretrain(opts) => {
            let mut p = pipeline_for(&opts)?;
            if opts.dry_run {
                return print_plan(&mut p);
            }
            let map = p.backbones()?;
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            for (name, seed) in keys {
                let bb = &map[&(name.clone(), *seed)];
                println!("backbone {name} seed {seed}: digest {}", &bb.param_digest()[..12]);
            }
        }
        Command::Cache(opts) => {
            let mut p = pipeline_for(&opts)?;
            if opts.dry_run {
                return print_plan(&mut p);
            }
            let (built, loaded) = p.persist_caches()?;
            println!("caches: {built} built, {loaded} loaded");
        }
        Command::StitchTrain(opts) | Command::Selfstitch(opts) => {
            let mut p = pipeline_for(&opts)?;
            if opts.dry_run {
                return print_plan(&mut p);
            }
            let (outcomes, trained, reused) = p.run_cells()?;
            println!("cells: {trained} trained, {reused} reused");
            for o in &outcomes {
                println!(
                    "{} {} n={} {} seed={} acc={:.4}",
                    o.desc.loss, o.desc.family, o.desc.stitch_point, o.desc.mode, o.desc.seed,
                    o.probe_accuracy
                );
            }
        }
        Command::Probe(opts) => {
            let mut p = pipeline_for(&opts)?;
            if opts.dry_run {
                return print_plan(&mut p);
            }
            let (outcomes, _, _) = p.run_cells()?;
            if opts.format == "json" {
                println!("{}", serde_json::to_string_pretty(&outcomes)?);
            } else {
                println!("loss,family,n,mode,seed,accuracy");
                for o in &outcomes {
                    println!(
                        "{},{},{},{},{},{}",
                        o.desc.loss,
                        o.desc.family,
                        o.desc.stitch_point,
                        o.desc.mode,
                        o.desc.seed,
                        o.probe_accuracy
                    );
                }
            }
        }
        Command::DenseProbe { common, backbone } => {
            let mut p = pipeline_for(&common)?;
            let ds = p.dataset()?;
            let map = p.backbones()?;
            let seed = common.seed.unwrap_or(0);
            let bb = map
                .get(&(backbone.clone(), seed))
                .with_context(|| format!("backbone '{backbone}' seed {seed} not pretrained"))?
                .clone();
            let grid = (bb.spec.grid(), bb.spec.grid());
            let cfg = TrainConfig {
                lr: 0.01,
                max_epochs: 30,
                ..TrainConfig::defaults_for(stitchlab_core::training::LossKind::Tlt, seed)
            };
            let bbc = bb.clone();
            let dsc = Arc::clone(&ds);
            let result = stitchlab_core::eval::dense_probe(
                &ds,
                grid,
                bb.spec.width,
                move |idx| {
                    let fm = bbc.run_prefix(&dsc.image_batch::<f32>(idx), bbc.spec.depth)?;
                    // strip the class token rows if present
                    let np = bbc.spec.num_patches();
                    let k = bbc.spec.tokens();
                    let d = bbc.spec.width;
                    let cls = usize::from(bbc.spec.use_class_token);
                    let mut out = stitchlab_core::Tensor::zeros(vec![idx.len() * np, d]);
                    for s in 0..idx.len() {
                        let src = (s * k + cls) * d;
                        out.data_mut()[s * np * d..(s + 1) * np * d]
                            .copy_from_slice(&fm.values.data()[src..src + np * d]);
                    }
                    Ok(out)
                },
                &cfg,
            )?;
            println!("mIoU {:.4}", result.miou);
            for (class, iou) in &result.per_class_iou {
                println!("class {class}: IoU {iou:.4}");
            }
        }
        Command::Distance(opts) => {
            let mut p = pipeline_for(&opts)?;
            if opts.dry_run {
                return print_plan(&mut p);
            }
            let (outcomes, _, _) = p.run_cells()?;
            println!("loss,family,n,mode,seed,layer_distance,final_distance");
            for o in &outcomes {
                if let (Some(l), Some(f)) = (o.layer_distance, o.final_distance) {
                    println!(
                        "{},{},{},{},{},{},{}",
                        o.desc.loss, o.desc.family, o.desc.stitch_point, o.desc.mode,
                        o.desc.seed, l, f
                    );
                }
            }
        }
        Command::Partition(opts) => {
            let mut p = pipeline_for(&opts)?;
            let summary = p.full_run()?;
            println!("loss,family,n,seed,preserve,rescue,interference,discarded");
            for r in &summary.partitions {
                println!(
                    "{},{},{},{},{},{},{},{}",
                    r.loss,
                    r.family,
                    r.stitch_point,
                    r.seed,
                    r.counts.preserve(),
                    r.counts.rescue,
                    r.counts.interference(),
                    r.counts.discarded_all_right + r.counts.discarded_all_wrong
                );
            }
        }
        Command::VstCost {
            branches,
            depth,
            point,
            csv,
        } => {
            let mut lines = vec!["branches,depth,point,extra_cost_pct".to_string()];
            match (branches, point) {
                (Some(b), Some(n)) => {
                    let f = vst_extra_cost(&CostQuery {
                        branches: b,
                        effective_depth: depth,
                        stitch_point: n,
                    })?;
                    println!("extra cost: {:.1}%", f * 100.0);
                    lines.push(format!("{b},{depth},{n},{:.1}", f * 100.0));
                }
                _ => {
                    println!("branches  n=6      n=14     n=22");
                    for b in 2..=5usize {
                        let row: Vec<f64> = [6usize, 14, 22]
                            .iter()
                            .map(|&n| {
                                vst_extra_cost(&CostQuery {
                                    branches: b,
                                    effective_depth: depth,
                                    stitch_point: n,
                                })
                                .unwrap()
                            })
                            .collect();
                        println!(
                            "{b:<9} {:<8.1} {:<8.1} {:<8.1}",
                            row[0] * 100.0,
                            row[1] * 100.0,
                            row[2] * 100.0
                        );
                        for (n, f) in [6usize, 14, 22].iter().zip(&row) {
                            lines.push(format!("{b},{depth},{n},{:.1}", f * 100.0));
                        }
                    }
                    let _ = paper_cost_table();
                }
            }
            if let Some(path) = csv {
                std::fs::write(&path, lines.join("\n") + "\n")?;
                println!("wrote {}", path.display());
            }
        }
        Command::VstGain {
            input,
            paper,
            variant,
            csv,
        } => {
            let triples: Vec<MetricTriple> = if paper {
                reference_gain_triples(&variant)
            } else {
                let path = input.context("--input FILE or --paper required")?;
                let text = std::fs::read_to_string(&path)?;
                serde_json::from_str(&text)?
            };
            let ledger = normalized_gain(&triples);
            let mut lines = vec!["metric,delta_max,delta_vst,normalized_pct".to_string()];
            println!("metric            Δ_max     Δ_vst     gain");
            for r in &ledger.rows {
                let g = r
                    .normalized_pct
                    .map(|v| format!("{v:.1}%"))
                    .unwrap_or_else(|| "undefined".into());
                println!("{:<17} {:<9.2} {:<9.2} {g}", r.metric, r.delta_max, r.delta_vst);
                lines.push(format!(
                    "{},{},{},{}",
                    r.metric,
                    r.delta_max,
                    r.delta_vst,
                    r.normalized_pct.map(|v| format!("{v:.1}")).unwrap_or_default()
                ));
            }
            for m in &ledger.excluded {
                eprintln!("warning: metric '{m}' has Δ_max = 0, excluded from the average");
            }
            if let Some(avg) = ledger.average_pct {
                println!("average: {avg:.1}%");
            }
            if let Some(path) = csv {
                std::fs::write(&path, lines.join("\n") + "\n")?;
                println!("wrote {}", path.display());
            }
        }
        Command::Run(opts) => {
            let cfg = load_config(&opts)?;
            let run_opts = RunOptions {
                out_dir: opts.out.clone(),
                dry_run: opts.dry_run,
                threads: opts.threads,
                seed_override: opts.seed,
            };
            let summary = stitchlab_core::pipeline::run(&cfg, &run_opts)?;
            if !opts.dry_run {
                println!(
                    "run complete: {} cells trained, {} reused; reports under {}",
                    summary.cells_trained,
                    summary.cells_reused,
                    opts.out.join("reports").display()
                );
            }
        }
        Command::Report { out } => {
            let summary = stitchlab_core::report::report_from_dir(&out)?;
            println!(
                "report regenerated: {} cells, {} partition rows",
                summary.cells.len(),
                summary.partitions.len()
            );
        }
        Command::Verify { trials } => {
            let checks = stitchlab_core::verify::run_all(trials)?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "[{}] {:<40} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                if !c.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                bail!("{failed} verification checks failed");
            }
            println!("all {} checks passed", checks.len());
        }
    }
    Ok(())
}

/// Reference metric triples for the gain ledger (classification/perception
/// scores of a two-model tree against its single-model baseline).
fn reference_gain_triples(variant: &str) -> Vec<MetricTriple> {
    let vst = |a: f64, b: f64, d22: f64, d14: f64| -> (f64, f64, f64) {
        if variant == "vst14" {
            (a, b, d14)
        } else {
            (a, b, d22)
        }
    };
    let rows = [
        ("vqa-yes-no", vst(91.75, 92.72, 92.12, 92.54)),
        ("vqa-number", vst(58.74, 61.64, 59.21, 60.69)),
        ("vqa-other", vst(69.00, 70.30, 69.15, 69.88)),
        ("mme-perception", vst(1418.5, 1460.3, 1451.6, 1474.4)),
        ("mme-cognition", vst(277.1, 311.8, 305.7, 301.8)),
    ];
    rows.iter()
        .map(|(name, (a, b, d))| MetricTriple {
            metric: name.to_string(),
            baseline: *a,
            full: *b,
            vst: *d,
        })
        .collect()
}
