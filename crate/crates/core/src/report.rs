//! Report emission: plot-ready long-format CSVs, text tables, and the
//! summary JSON. Everything here is re-derived from the persisted per-cell
//! artifacts; reports carry no state of their own.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{CellOutcome, PartitionRow, RunSummary};
use crate::stitch::StitchMode;
use crate::training::LossKind;

pub const CELLS_CSV_HEADER: &str =
    "loss,family,n,mode,seed,probe_acc,layer_distance,final_distance,chosen_lr,best_val,cell_hash";
pub const DISTANCES_CSV_HEADER: &str = "loss,family,n,seed,layer_distance,final_distance";
pub const PROBE_CSV_HEADER: &str = "loss,family,n,seed,accuracy";
pub const TWO_STAGE_CSV_HEADER: &str = "pretrain,family,n,seed,accuracy";
pub const SELFSTITCH_CSV_HEADER: &str = "mode,family,n,seed,loss,accuracy";
pub const FAMILIES_CSV_HEADER: &str = "family,n,seed,loss,accuracy";
pub const PARTITION_CSV_HEADER: &str = "loss,family,n,seed,preserve_source_right,preserve_target_right,rescue,interference_both_right,interference_target_right,interference_source_right,discarded_all_right,discarded_all_wrong";

/// Shipped summary schema (see docs/summary.schema.json).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub format_version: u32,
    pub config_digest: String,
    pub dataset_id: String,
    pub cells_trained: usize,
    pub cells_reused: usize,
    pub cells: Vec<CellLine>,
    pub partitions: Vec<PartitionRow>,
    /// Cells requested but absent from the results directory.
    pub missing_cells: Vec<String>,
}

/// Slim per-cell record inside the summary (predictions stay in the per-cell
/// artifacts).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellLine {
    pub cell_hash: String,
    pub loss: LossKind,
    pub family: crate::stitch::StitchFamily,
    pub stitch_point: usize,
    pub mode: StitchMode,
    pub seed: u64,
    pub probe_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val: Option<f64>,
}

impl CellLine {
    fn from_outcome(o: &CellOutcome) -> Self {
        CellLine {
            cell_hash: o.cell_hash.clone(),
            loss: o.desc.loss,
            family: o.desc.family,
            stitch_point: o.desc.stitch_point,
            mode: o.desc.mode,
            seed: o.desc.seed,
            probe_accuracy: o.probe_accuracy,
            layer_distance: o.layer_distance,
            final_distance: o.final_distance,
            chosen_lr: o.chosen_lr,
            best_val: o.best_val,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_report(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Emit every CSV, the text tables, and `summary.json` under
/// `<out>/reports/`.
pub fn emit_reports(summary: &RunSummary, out: &Path) -> Result<()> {
    let dir = out.join("reports");
    let outcomes = &summary.outcomes;

    // cells.csv: the full wide table.
    let mut cells = String::from(CELLS_CSV_HEADER);
    cells.push('\n');
    for o in outcomes {
        cells.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            o.desc.loss,
            o.desc.family,
            o.desc.stitch_point,
            o.desc.mode,
            o.desc.seed,
            o.probe_accuracy,
            opt(o.layer_distance),
            opt(o.final_distance),
            opt(o.chosen_lr),
            opt(o.best_val),
            o.cell_hash
        ));
    }
    write_report(&dir.join("cells.csv"), &cells)?;

    // Feature-distance diagnostics (cross cells, feature-matching losses).
    let mut dist = String::from(DISTANCES_CSV_HEADER);
    dist.push('\n');
    for o in outcomes.iter().filter(|o| {
        o.desc.mode == StitchMode::Cross
            && matches!(o.desc.loss, LossKind::Lfm | LossKind::Ffm)
            && o.layer_distance.is_some()
    }) {
        dist.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.desc.loss,
            o.desc.family,
            o.desc.stitch_point,
            o.desc.seed,
            opt(o.layer_distance),
            opt(o.final_distance)
        ));
    }
    write_report(&dir.join("fig2_distances.csv"), &dist)?;

    // Probe accuracy per feature-matching loss (cross cells).
    let mut probe = String::from(PROBE_CSV_HEADER);
    probe.push('\n');
    for o in outcomes.iter().filter(|o| {
        o.desc.mode == StitchMode::Cross && matches!(o.desc.loss, LossKind::Lfm | LossKind::Ffm)
    }) {
        probe.push_str(&format!(
            "{},{},{},{},{}\n",
            o.desc.loss, o.desc.family, o.desc.stitch_point, o.desc.seed, o.probe_accuracy
        ));
    }
    write_report(&dir.join("fig3_probe.csv"), &probe)?;

    // Naive task loss vs two-stage (cross cells).
    let mut ts = String::from(TWO_STAGE_CSV_HEADER);
    ts.push('\n');
    for o in outcomes.iter().filter(|o| {
        o.desc.mode == StitchMode::Cross
            && matches!(o.desc.loss, LossKind::Tlt | LossKind::TwoStage)
    }) {
        let pretrain = if o.desc.loss == LossKind::Tlt { "no" } else { "ffm" };
        ts.push_str(&format!(
            "{},{},{},{},{}\n",
            pretrain, o.desc.family, o.desc.stitch_point, o.desc.seed, o.probe_accuracy
        ));
    }
    write_report(&dir.join("table1_two_stage.csv"), &ts)?;

    // Cross vs self-stitch grid.
    let mut ss = String::from(SELFSTITCH_CSV_HEADER);
    ss.push('\n');
    let self_keys: BTreeSet<(String, usize, u64, String)> = outcomes
        .iter()
        .filter(|o| o.desc.mode != StitchMode::Cross)
        .map(|o| {
            (
                o.desc.family.to_string(),
                o.desc.stitch_point,
                o.desc.seed,
                o.desc.loss.to_string(),
            )
        })
        .collect();
    for o in outcomes.iter().filter(|o| {
        o.desc.mode != StitchMode::Cross
            || self_keys.contains(&(
                o.desc.family.to_string(),
                o.desc.stitch_point,
                o.desc.seed,
                o.desc.loss.to_string(),
            ))
    }) {
        ss.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.desc.mode, o.desc.family, o.desc.stitch_point, o.desc.seed, o.desc.loss, o.probe_accuracy
        ));
    }
    write_report(&dir.join("fig5_selfstitch.csv"), &ss)?;

    // Stitch-family comparison over cross cells.
    let mut fam = String::from(FAMILIES_CSV_HEADER);
    fam.push('\n');
    for o in outcomes.iter().filter(|o| o.desc.mode == StitchMode::Cross) {
        fam.push_str(&format!(
            "{},{},{},{},{}\n",
            o.desc.family, o.desc.stitch_point, o.desc.seed, o.desc.loss, o.probe_accuracy
        ));
    }
    write_report(&dir.join("table3_families.csv"), &fam)?;

    // Prediction partition counts.
    let mut part = String::from(PARTITION_CSV_HEADER);
    part.push('\n');
    for r in &summary.partitions {
        let c = &r.counts;
        part.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.loss,
            r.family,
            r.stitch_point,
            r.seed,
            c.preserve_source_right,
            c.preserve_target_right,
            c.rescue,
            c.interference_both_right,
            c.interference_target_right,
            c.interference_source_right,
            c.discarded_all_right,
            c.discarded_all_wrong
        ));
    }
    write_report(&dir.join("partition.csv"), &part)?;

    // Text tables for quick terminal reading.
    write_report(&dir.join("tables.txt"), &render_text_tables(summary))?;

    let json = Summary {
        format_version: 1,
        config_digest: summary.config_digest.clone(),
        dataset_id: summary.dataset_id.clone(),
        cells_trained: summary.cells_trained,
        cells_reused: summary.cells_reused,
        cells: outcomes.iter().map(CellLine::from_outcome).collect(),
        partitions: summary.partitions.clone(),
        missing_cells: vec![],
    };
    write_report(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&json)?,
    )?;
    Ok(())
}

/// Median of a non-empty slice (midpoint average for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn render_text_tables(summary: &RunSummary) -> String {
    let mut out = String::new();
    let outcomes = &summary.outcomes;

    // Accuracy grid: loss rows × stitch points, medians over seeds.
    let points: BTreeSet<usize> = outcomes.iter().map(|o| o.desc.stitch_point).collect();
    let losses: BTreeSet<String> = outcomes.iter().map(|o| o.desc.loss.to_string()).collect();
    out.push_str("probe accuracy (cross cells, median over seeds)\n");
    out.push_str(&format!("{:<12}", "loss"));
    for p in &points {
        out.push_str(&format!(" n={p:<6}"));
    }
    out.push('\n');
    for loss in &losses {
        out.push_str(&format!("{loss:<12}"));
        for p in &points {
            let vals: Vec<f64> = outcomes
                .iter()
                .filter(|o| {
                    o.desc.mode == StitchMode::Cross
                        && o.desc.loss.to_string() == *loss
                        && o.desc.stitch_point == *p
                })
                .map(|o| o.probe_accuracy)
                .collect();
            if vals.is_empty() {
                out.push_str(&format!(" {:<7}", "-"));
            } else {
                out.push_str(&format!(" {:<7.3}", median(&vals)));
            }
        }
        out.push('\n');
    }

    // Self-stitch grid.
    let has_self = outcomes.iter().any(|o| o.desc.mode != StitchMode::Cross);
    if has_self {
        out.push_str("\ncross vs self-stitch (median over seeds)\n");
        for mode in [StitchMode::Cross, StitchMode::SelfSource, StitchMode::SelfTarget] {
            out.push_str(&format!("{:<12}", mode.to_string()));
            for p in &points {
                let vals: Vec<f64> = outcomes
                    .iter()
                    .filter(|o| o.desc.mode == mode && o.desc.stitch_point == *p)
                    .map(|o| o.probe_accuracy)
                    .collect();
                if vals.is_empty() {
                    out.push_str(&format!(" {:<7}", "-"));
                } else {
                    out.push_str(&format!(" {:<7.3}", median(&vals)));
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Regenerate reports from the persisted per-cell artifacts in a results
/// directory. Missing cells (referenced by the plan but absent) are listed in
/// the summary; the report is still emitted.
pub fn report_from_dir(out: &Path) -> Result<Summary> {
    let cells_dir = out.join("cells");
    if !cells_dir.exists() {
        return Err(Error::Config(format!(
            "no cells directory under {}",
            out.display()
        )));
    }
    let mut outcomes = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&cells_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    for p in paths {
        let text = std::fs::read_to_string(&p)?;
        let o: CellOutcome = serde_json::from_str(&text)?;
        outcomes.push(o);
    }
    outcomes.sort_by_key(|o| {
        (
            o.desc.loss.to_string(),
            o.desc.family.to_string(),
            o.desc.stitch_point,
            o.desc.mode.to_string(),
            o.desc.seed,
        )
    });

    // Datasets: needed for partition labels.
    let partitions = match find_dataset(out)? {
        Some(ds) => crate::pipeline::partitions_from_outcomes(&ds, &outcomes),
        None => vec![],
    };

    let summary = RunSummary {
        config_digest: String::new(),
        dataset_id: outcomes
            .first()
            .map(|o| o.desc.dataset_id.clone())
            .unwrap_or_default(),
        cells_trained: 0,
        cells_reused: outcomes.len(),
        outcomes,
        partitions,
        out_dir: out.to_path_buf(),
    };
    emit_reports(&summary, out)?;
    let text = std::fs::read_to_string(out.join("reports").join("summary.json"))?;
    Ok(serde_json::from_str(&text)?)
}

use std::path::PathBuf;

fn find_dataset(out: &Path) -> Result<Option<crate::data::Dataset>> {
    let dir = out.join("datasets");
    if !dir.exists() {
        return Ok(None);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    match paths.first() {
        Some(p) => Ok(Some(crate::data::load_dataset(p)?)),
        None => Ok(None),
    }
}
