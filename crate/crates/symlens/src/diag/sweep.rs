//! End-to-end sweep orchestration: equivariance-error and influence
//! measurements over group orbits, across seeds and mini-batches, with CSV,
//! JSON and SVG outputs.
//!
//! Outputs are a pure function of (config, checkpoints, dataset): element
//! order, batch order and float formatting are all fixed, so re-runs are
//! byte-identical.

use super::{equivariance_error, svg, EquivRecord, SummaryStats};
use crate::error::Error;
use crate::loss::SmseWeights;
use crate::metric::{CgConfig, InfluenceContext, InfluenceRecord, Transition};
use crate::models::load_checkpoint;
use crate::pde::dataset::{Dataset, Split};
use crate::symmetry::{orbit_elements, OrbitSpec};
use crate::{Real, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dataset_dir: PathBuf,
    /// One trained checkpoint per seed.
    pub checkpoints: Vec<PathBuf>,
    pub group: OrbitSpec,
    pub batch_size: usize,
    /// Mini-batches per seed, taken in order from the test split.
    pub batch_count: usize,
    /// Metric regularization λ.
    pub lambda: f64,
    pub cg: CgConfig,
    pub out_dir: PathBuf,
}

/// One row of `errors_<group>.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRow {
    pub seed: usize,
    pub batch_id: usize,
    pub example_id: usize,
    pub group_element: String,
    pub smse_base: f64,
    pub smse_transformed: f64,
    pub ratio: Option<f64>,
}

/// One row of `influence_<group>.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct InfluenceRow {
    pub seed: usize,
    pub batch_id: usize,
    pub example_id: usize,
    pub group_element: String,
    pub raw: f64,
    pub standardized: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementSummary {
    pub element: String,
    /// Relative-SMSE stats over converged, non-degenerate examples.
    pub error: Option<SummaryStats>,
    /// Standardized-influence stats over converged solves.
    pub influence: Option<SummaryStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub stride: usize,
    pub offsets: Vec<usize>,
    /// `error_q3[a_idx][b_idx]` for element T(a, b).
    pub error_q3: Vec<Vec<f64>>,
    pub influence_median: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineInfo {
    pub seed: usize,
    pub batch_id: usize,
    pub baseline: f64,
    pub nonconverged_columns: usize,
}

/// Per-(seed, mini-batch, element) statistics over that batch's examples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub seed: usize,
    pub batch_id: usize,
    pub element: String,
    pub error: Option<SummaryStats>,
    pub influence: Option<SummaryStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub group: String,
    pub grid: usize,
    pub seeds: usize,
    pub batch_size: usize,
    pub batch_count: usize,
    pub lambda: f64,
    pub tol: f64,
    pub elements: Vec<ElementSummary>,
    /// Statistics per seed × mini-batch × element.
    pub cells: Vec<CellSummary>,
    pub baselines: Vec<BaselineInfo>,
    /// Conservation counters: processed = reported + excluded, per kind.
    pub error_processed: usize,
    pub error_reported: usize,
    pub error_excluded_degenerate: usize,
    pub influence_processed: usize,
    pub influence_reported: usize,
    pub influence_excluded_nonconverged: usize,
    pub heatmap: Option<HeatmapSummary>,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub summary: SweepSummary,
    pub files: Vec<PathBuf>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "nan".into())
}

fn write_error_csv(path: &Path, rows: &[ErrorRow]) -> Result<()> {
    let mut out =
        String::from("seed,batch_id,example_id,group_element,smse_base,smse_transformed,ratio\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.seed,
            r.batch_id,
            r.example_id,
            r.group_element,
            r.smse_base,
            r.smse_transformed,
            fmt_opt(r.ratio)
        )
        .expect("string write");
    }
    std::fs::write(path, out.as_bytes())?;
    Ok(())
}

fn write_influence_csv(path: &Path, rows: &[InfluenceRow]) -> Result<()> {
    let mut out = String::from(
        "seed,batch_id,example_id,group_element,raw,standardized,iterations,residual,converged\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.batch_id,
            r.example_id,
            r.group_element,
            r.raw,
            r.standardized,
            r.iterations,
            r.residual,
            r.converged
        )
        .expect("string write");
    }
    std::fs::write(path, out.as_bytes())?;
    Ok(())
}

/// Run the configured sweep and write every report artifact under
/// `out_dir`. Returns the summary plus the list of files written.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutput> {
    if cfg.checkpoints.is_empty() {
        return Err(Error::config("sweep needs at least one checkpoint"));
    }
    if cfg.batch_size < 2 || cfg.batch_count == 0 {
        return Err(Error::config(
            "sweep needs batch_size ≥ 2 (for the influence baseline) and batch_count ≥ 1",
        ));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut log: Vec<String> = Vec::new();

    let dataset = Dataset::load(&cfg.dataset_dir)?;
    let n = dataset.manifest.grid;
    let weights: SmseWeights<Real> = dataset.manifest.smse_weights()?;
    let elements = orbit_elements(cfg.group, n)?;
    let test = dataset.transitions(Split::Test);
    let needed = cfg.batch_size * cfg.batch_count;
    if test.len() < needed {
        return Err(Error::config(format!(
            "test split has {} transitions, sweep needs {needed}",
            test.len()
        )));
    }
    log.push(format!(
        "sweep group={} grid={n} seeds={} batches={}x{} lambda={} tol={}",
        cfg.group.key(),
        cfg.checkpoints.len(),
        cfg.batch_count,
        cfg.batch_size,
        cfg.lambda,
        cfg.cg.tol
    ));

    let mut error_rows: Vec<ErrorRow> = Vec::new();
    let mut influence_rows: Vec<InfluenceRow> = Vec::new();
    let mut baselines: Vec<BaselineInfo> = Vec::new();

    for (seed_idx, ckpt) in cfg.checkpoints.iter().enumerate() {
        let (model, _) = load_checkpoint(ckpt)?;
        if model.config.grid() != n {
            return Err(Error::config(format!(
                "checkpoint {} is for grid {}, dataset is {n}",
                ckpt.display(),
                model.config.grid()
            )));
        }
        log.push(format!(
            "seed {seed_idx}: {} ({} params) from {}",
            model.config.family_name(),
            model.param_count(),
            ckpt.display()
        ));
        for batch_id in 0..cfg.batch_count {
            let lo = batch_id * cfg.batch_size;
            let batch: Vec<Transition<Real>> = test[lo..lo + cfg.batch_size]
                .iter()
                .enumerate()
                .map(|(k, (x, y))| Transition {
                    id: lo + k,
                    input: x.clone(),
                    target: y.clone(),
                })
                .collect();

            for &g in &elements {
                for t in &batch {
                    let rec: EquivRecord =
                        equivariance_error(&model, &weights, g, t.id, &t.input, &t.target)?;
                    if rec.ratio.is_none() {
                        log.push(format!(
                            "excluded degenerate example {} (seed {seed_idx}, batch {batch_id}, {})",
                            t.id, rec.element
                        ));
                    }
                    error_rows.push(ErrorRow {
                        seed: seed_idx,
                        batch_id,
                        example_id: t.id,
                        group_element: rec.element,
                        smse_base: rec.smse_base,
                        smse_transformed: rec.smse_transformed,
                        ratio: rec.ratio,
                    });
                }
            }

            let ctx = InfluenceContext::build(
                &model,
                batch,
                weights.clone(),
                cfg.lambda,
                cfg.cg,
            )?;
            baselines.push(BaselineInfo {
                seed: seed_idx,
                batch_id,
                baseline: ctx.baseline(),
                nonconverged_columns: ctx.nonconverged_columns(),
            });
            for &g in &elements {
                for col in 0..ctx.batch().len() {
                    let rec: InfluenceRecord = ctx.transform_influence(col, g)?;
                    if !rec.report.converged {
                        log.push(format!(
                            "non-converged solve for example {} (seed {seed_idx}, batch {batch_id}, {})",
                            rec.example, rec.element
                        ));
                    }
                    influence_rows.push(InfluenceRow {
                        seed: seed_idx,
                        batch_id,
                        example_id: rec.example,
                        group_element: rec.element,
                        raw: rec.raw,
                        standardized: rec.standardized,
                        iterations: rec.report.iterations,
                        residual: rec.report.residual,
                        converged: rec.report.converged,
                    });
                }
            }
        }
    }

    // per-(seed, batch, element) statistics in run order
    let mut cells: Vec<CellSummary> = Vec::new();
    for seed in 0..cfg.checkpoints.len() {
        for batch_id in 0..cfg.batch_count {
            for &g in &elements {
                let name = g.name();
                let pick = |r: &ErrorRow| {
                    r.seed == seed && r.batch_id == batch_id && r.group_element == name
                };
                let ratios: Vec<f64> = error_rows
                    .iter()
                    .filter(|r| pick(r))
                    .filter_map(|r| r.ratio)
                    .collect();
                let degenerate = error_rows
                    .iter()
                    .filter(|r| pick(r) && r.ratio.is_none())
                    .count();
                let infl: Vec<f64> = influence_rows
                    .iter()
                    .filter(|r| {
                        r.seed == seed
                            && r.batch_id == batch_id
                            && r.group_element == name
                            && r.converged
                    })
                    .map(|r| r.standardized)
                    .collect();
                let nonconv = influence_rows
                    .iter()
                    .filter(|r| {
                        r.seed == seed
                            && r.batch_id == batch_id
                            && r.group_element == name
                            && !r.converged
                    })
                    .count();
                cells.push(CellSummary {
                    seed,
                    batch_id,
                    element: name,
                    error: SummaryStats::from_samples(&ratios, degenerate),
                    influence: SummaryStats::from_samples(&infl, nonconv),
                });
            }
        }
    }

    // aggregation, element order fixed by the orbit enumeration
    let mut summaries: Vec<ElementSummary> = Vec::with_capacity(elements.len());
    let mut error_reported = 0;
    let mut error_excluded = 0;
    let mut infl_reported = 0;
    let mut infl_excluded = 0;
    for &g in &elements {
        let name = g.name();
        let ratios: Vec<f64> = error_rows
            .iter()
            .filter(|r| r.group_element == name)
            .filter_map(|r| r.ratio)
            .collect();
        let degenerate = error_rows
            .iter()
            .filter(|r| r.group_element == name && r.ratio.is_none())
            .count();
        let infl: Vec<f64> = influence_rows
            .iter()
            .filter(|r| r.group_element == name && r.converged)
            .map(|r| r.standardized)
            .collect();
        let nonconv = influence_rows
            .iter()
            .filter(|r| r.group_element == name && !r.converged)
            .count();
        error_reported += ratios.len();
        error_excluded += degenerate;
        infl_reported += infl.len();
        infl_excluded += nonconv;
        summaries.push(ElementSummary {
            element: name,
            error: SummaryStats::from_samples(&ratios, degenerate),
            influence: SummaryStats::from_samples(&infl, nonconv),
        });
    }

    let influence_processed = influence_rows.len();
    if influence_processed > 0 && 2 * infl_excluded > influence_processed {
        return Err(Error::degenerate(format!(
            "{infl_excluded} of {influence_processed} influence solves failed to converge; \
             diagnostics untrustworthy — raise max_iters or loosen the tolerance"
        )));
    }

    let heatmap = if let OrbitSpec::TranslateGrid { stride } = cfg.group {
        let offsets: Vec<usize> = (0..n).step_by(stride).collect();
        let mut error_q3 = vec![vec![f64::NAN; offsets.len()]; offsets.len()];
        let mut infl_med = vec![vec![f64::NAN; offsets.len()]; offsets.len()];
        for (ai, &a) in offsets.iter().enumerate() {
            for (bi, &b) in offsets.iter().enumerate() {
                let name = format!("T({a},{b})");
                if let Some(s) = summaries.iter().find(|s| s.element == name) {
                    if let Some(e) = s.error {
                        error_q3[ai][bi] = e.q3;
                    }
                    if let Some(i) = s.influence {
                        infl_med[ai][bi] = i.median;
                    }
                }
            }
        }
        Some(HeatmapSummary {
            stride,
            offsets,
            error_q3,
            influence_median: infl_med,
        })
    } else {
        None
    };

    let summary = SweepSummary {
        group: cfg.group.key().to_string(),
        grid: n,
        seeds: cfg.checkpoints.len(),
        batch_size: cfg.batch_size,
        batch_count: cfg.batch_count,
        lambda: cfg.lambda,
        tol: cfg.cg.tol,
        elements: summaries,
        cells,
        baselines,
        error_processed: error_rows.len(),
        error_reported,
        error_excluded_degenerate: error_excluded,
        influence_processed,
        influence_reported: infl_reported,
        influence_excluded_nonconverged: infl_excluded,
        heatmap,
    };

    // artifacts
    let key = cfg.group.key();
    let mut files = Vec::new();
    let err_csv = cfg.out_dir.join(format!("errors_{key}.csv"));
    write_error_csv(&err_csv, &error_rows)?;
    files.push(err_csv);
    let inf_csv = cfg.out_dir.join(format!("influence_{key}.csv"));
    write_influence_csv(&inf_csv, &influence_rows)?;
    files.push(inf_csv);
    let summary_path = cfg.out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    files.push(summary_path);

    let rendered = svg::render_summary(&summary, &cfg.out_dir)?;
    for note in &rendered.skipped {
        log.push(format!("render skipped: {note}"));
    }
    files.extend(rendered.written);

    let log_path = cfg.out_dir.join("run.log");
    std::fs::write(&log_path, log.join("\n") + "\n")?;
    files.push(log_path);

    Ok(SweepOutput { summary, files })
}

/// Re-render SVG figures from a previously written `summary.json`.
pub fn render_from_dir(dir: &Path) -> Result<svg::RenderOutcome> {
    let summary: SweepSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json"))?)?;
    svg::render_summary(&summary, dir)
}
