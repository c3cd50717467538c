//! Batch layer tying the pieces together: loads every within-subject pair
//! from a manifest, registers each under one preset with a worker pool,
//! scores the results, and writes the analysis artifact set — `pairs.csv`,
//! `metrics.csv`, `regression.csv`, `stats.csv`, and `timing.json`.
//!
//! Output rows are ordered by pair construction order, not completion
//! order, so the CSVs are byte-identical across reruns and worker counts;
//! wall-clock values live only in `timing.json`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::cohort::{self, GroupSummary, PairRecord, ScanRecord};
use crate::error::{Error, Result};
use crate::evaluation::{compare_methods, MetricsReport, RegionTable};
use crate::nifti;
use crate::registration::{run_preset, Preset, PresetConfigs};
use crate::transforms::{warp_labels, DisplacementField};

/// Scopes the paired method comparison runs over.
mod compare_scope {
    pub const MEAN_DICE: &str = "mean_dice";
    pub const WEIGHTED_DICE: &str = "weighted_dice";
}

/// The Dice block of the metric columns — everything regressed against age
/// interval. The folding/|ln JD| columns are field diagnostics, not trend
/// responses.
fn dice_scopes(table: &RegionTable) -> Vec<String> {
    MetricsReport::csv_header(table)
        .into_iter()
        .take_while(|column| column != "negative_jd_pct")
        .collect()
}

/// Everything a cohort run needs besides the manifest.
#[derive(Debug, Clone)]
pub struct CohortRunConfig {
    pub preset: Preset,
    pub configs: PresetConfigs,
    pub table: RegionTable,
    /// Concurrent registration jobs; must be ≥ 1.
    pub workers: usize,
    /// Isotropic working resolution in mm; volumes whose spacing already
    /// matches pass through untouched. `None` keeps native grids.
    pub resample_mm: Option<f64>,
}

impl CohortRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidInput("worker count must be at least 1".into()));
        }
        if let Some(mm) = self.resample_mm {
            if !(mm > 0.0) || !mm.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "resample_mm must be positive, got {mm}"
                )));
            }
        }
        self.table.validate()
    }
}

/// Scores and timings of one successfully processed pair.
#[derive(Debug, Clone)]
pub struct PairMetrics {
    /// Overlap before any registration (identity field).
    pub initial: MetricsReport,
    /// Overlap after the preset's full registration.
    pub registered: MetricsReport,
    pub wall_seconds: f64,
    pub stage_seconds: Vec<(String, f64)>,
}

/// Outcome of one pair: metrics, or the reason it was skipped.
#[derive(Debug, Clone)]
pub enum PairStatus {
    Done(Box<PairMetrics>),
    Failed(String),
}

/// One pair with its outcome, in pair-construction order.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub pair: PairRecord,
    pub status: PairStatus,
}

/// In-memory result of a cohort run, mirroring what the artifact files
/// contain.
#[derive(Debug, Clone)]
pub struct CohortSummary {
    pub outcomes: Vec<PairOutcome>,
    pub succeeded: usize,
    pub failed: usize,
    pub total_seconds: f64,
}

/// Runs the full cohort pipeline and writes the artifact set into
/// `out_dir` (created if missing). Every scan needs a segmentation
/// (`seg_path`) for overlap scoring; pairs without one fail individually.
/// Per-pair failures are logged and flagged in `metrics.csv` without
/// aborting; the run errors only when no pair succeeds.
pub fn run_cohort(
    manifest: &[ScanRecord],
    run: &CohortRunConfig,
    out_dir: &Path,
) -> Result<CohortSummary> {
    run.validate()?;
    let pairs = cohort::make_pairs(manifest);
    if pairs.is_empty() {
        return Err(Error::InvalidInput(
            "manifest yields no registration pairs (no subject has two scans)".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let started = std::time::Instant::now();
    let slots: Mutex<Vec<Option<PairStatus>>> = Mutex::new(vec![None; pairs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..run.workers.min(pairs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= pairs.len() {
                    break;
                }
                let status = match process_pair(&pairs[i], run) {
                    Ok(metrics) => PairStatus::Done(Box::new(metrics)),
                    Err(e) => {
                        log::warn!("pair {} failed: {e}", pairs[i].key());
                        PairStatus::Failed(e.to_string())
                    }
                };
                slots.lock().expect("result slot lock")[i] = Some(status);
            });
        }
    });
    let outcomes: Vec<PairOutcome> = pairs
        .into_iter()
        .zip(slots.into_inner().expect("result slots"))
        .map(|(pair, status)| PairOutcome {
            pair,
            status: status.expect("every pair index visited"),
        })
        .collect();
    let total_seconds = started.elapsed().as_secs_f64();

    let succeeded = outcomes
        .iter()
        .filter(|o| matches!(o.status, PairStatus::Done(_)))
        .count();
    let failed = outcomes.len() - succeeded;
    if succeeded == 0 {
        return Err(Error::RegistrationFailed(
            "every pair in the cohort failed".into(),
        ));
    }

    write_pairs_csv(&outcomes, out_dir)?;
    write_metrics_csv(&outcomes, run, out_dir)?;
    write_regression_csv(&outcomes, &run.table, out_dir)?;
    write_stats_csv(&outcomes, out_dir)?;
    write_timing_json(&outcomes, total_seconds, out_dir)?;

    Ok(CohortSummary { outcomes, succeeded, failed, total_seconds })
}

/// Loads, registers, and scores one pair.
fn process_pair(pair: &PairRecord, run: &CohortRunConfig) -> Result<PairMetrics> {
    let (Some(fixed_seg_path), Some(moving_seg_path)) =
        (&pair.fixed.seg_path, &pair.moving.seg_path)
    else {
        return Err(Error::InvalidInput(
            "both scans need seg_path entries for overlap scoring".into(),
        ));
    };
    let mut fixed = nifti::load_image(&pair.fixed.path)?;
    let mut moving = nifti::load_image(&pair.moving.path)?;
    let mut fixed_seg = nifti::load_labels(fixed_seg_path)?;
    let mut moving_seg = nifti::load_labels(moving_seg_path)?;
    if let Some(mm) = run.resample_mm {
        let iso = [mm; 3];
        fixed = crate::transforms::resample_to_spacing(&fixed, iso)?;
        moving = crate::transforms::resample_to_spacing(&moving, iso)?;
        fixed_seg = crate::transforms::resample_labels_to_spacing(&fixed_seg, iso)?;
        moving_seg = crate::transforms::resample_labels_to_spacing(&moving_seg, iso)?;
    }

    let result = run_preset(&fixed, &moving, run.preset, &run.configs)?;
    let moved_seg = warp_labels(&moving_seg, &result.field)?;
    let registered = MetricsReport::compute(&fixed_seg, &moved_seg, &result.field, &run.table)?;

    let identity = DisplacementField::zeros(fixed.geometry.clone());
    let initial = MetricsReport::compute(&fixed_seg, &moving_seg, &identity, &run.table)?;

    Ok(PairMetrics {
        initial,
        registered,
        wall_seconds: result.wall_time,
        stage_seconds: result.stage_seconds,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn finish(mut writer: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    writer
        .flush()
        .map_err(|e| Error::io(path, e))
}

fn write_pairs_csv(outcomes: &[PairOutcome], out_dir: &Path) -> Result<()> {
    let path = out_dir.join("pairs.csv");
    let mut writer = csv_writer(&path)?;
    writer
        .write_record([
            "pair_key",
            "subject_id",
            "sex",
            "moving_age",
            "fixed_age",
            "age_interval",
            "moving_path",
            "fixed_path",
        ])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for outcome in outcomes {
        let p = &outcome.pair;
        writer
            .write_record([
                p.key(),
                p.moving.subject_id.clone(),
                p.moving.sex.to_string(),
                fmt(p.moving.age),
                fmt(p.fixed.age),
                fmt(p.age_interval),
                p.moving.path.display().to_string(),
                p.fixed.path.display().to_string(),
            ])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    finish(writer, &path)
}

/// Shortest-roundtrip decimal form; deterministic for a given value.
fn fmt(v: f64) -> String {
    format!("{v}")
}

/// The two scored method rows every successful pair contributes.
pub const METHOD_INITIAL: &str = "initial";
pub const METHOD_REGISTERED: &str = "registered";

fn write_metrics_csv(
    outcomes: &[PairOutcome],
    run: &CohortRunConfig,
    out_dir: &Path,
) -> Result<()> {
    let path = out_dir.join("metrics.csv");
    let mut writer = csv_writer(&path)?;
    let mut header = vec![
        "pair_key".to_string(),
        "subject_id".to_string(),
        "sex".to_string(),
        "age_interval".to_string(),
        "preset".to_string(),
        "method".to_string(),
        "status".to_string(),
    ];
    header.extend(MetricsReport::csv_header(&run.table));
    writer
        .write_record(&header)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let metric_cols = header.len() - 7;
    for outcome in outcomes {
        let p = &outcome.pair;
        let prefix = |method: &str, status: &str| {
            vec![
                p.key(),
                p.moving.subject_id.clone(),
                p.moving.sex.to_string(),
                fmt(p.age_interval),
                run.preset.name().to_string(),
                method.to_string(),
                status.to_string(),
            ]
        };
        match &outcome.status {
            PairStatus::Done(metrics) => {
                for (method, report) in [
                    (METHOD_INITIAL, &metrics.initial),
                    (METHOD_REGISTERED, &metrics.registered),
                ] {
                    let mut row = prefix(method, "ok");
                    row.extend(report.csv_row().into_iter().map(fmt));
                    writer
                        .write_record(&row)
                        .map_err(|e| Error::InvalidInput(e.to_string()))?;
                }
            }
            PairStatus::Failed(reason) => {
                let mut row = prefix("-", &format!("failed: {reason}"));
                row.extend(std::iter::repeat(String::new()).take(metric_cols));
                writer
                    .write_record(&row)
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
            }
        }
    }
    finish(writer, &path)
}

fn write_regression_csv(
    outcomes: &[PairOutcome],
    table: &RegionTable,
    out_dir: &Path,
) -> Result<()> {
    let path = out_dir.join("regression.csv");
    let mut writer = csv_writer(&path)?;
    writer
        .write_record(["method", "group", "scope", "slope", "intercept", "r_squared", "n"])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for row in regression_rows(outcomes, table) {
        writer
            .write_record([
                row.method,
                row.group,
                row.scope,
                fmt(row.fit.slope),
                fmt(row.fit.intercept),
                fmt(row.fit.r_squared),
                row.fit.n.to_string(),
            ])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    finish(writer, &path)
}

/// One fitted trend: a method's Dice scope against age interval within a
/// group.
pub struct RegressionRow {
    pub method: String,
    pub group: String,
    pub scope: String,
    pub fit: cohort::RegressionFit,
}

/// Fits every Dice scope against age interval, per method, pooled ("all")
/// and per sex. Groups an OLS fit rejects (too few pairs, constant
/// interval) are omitted.
pub fn regression_rows(outcomes: &[PairOutcome], table: &RegionTable) -> Vec<RegressionRow> {
    let scopes = dice_scopes(table);
    let mut rows = Vec::new();
    for (method, pick) in method_accessors() {
        for (scope_idx, scope) in scopes.iter().enumerate() {
            let mut triples: Vec<(String, f64, f64)> = Vec::new();
            for outcome in outcomes {
                let PairStatus::Done(metrics) = &outcome.status else { continue };
                let y = pick(metrics).csv_row()[scope_idx];
                let x = outcome.pair.age_interval;
                triples.push(("all".to_string(), x, y));
                triples.push((outcome.pair.moving.sex.to_string(), x, y));
            }
            for GroupSummary { group, fit, .. } in cohort::stratified_regression(&triples) {
                rows.push(RegressionRow {
                    method: method.to_string(),
                    group,
                    scope: scope.clone(),
                    fit,
                });
            }
        }
    }
    rows
}

type ReportPick = fn(&PairMetrics) -> &MetricsReport;

fn method_accessors() -> [(&'static str, ReportPick); 2] {
    [
        (METHOD_INITIAL, |m: &PairMetrics| &m.initial),
        (METHOD_REGISTERED, |m: &PairMetrics| &m.registered),
    ]
}

fn write_stats_csv(outcomes: &[PairOutcome], out_dir: &Path) -> Result<()> {
    let path = out_dir.join("stats.csv");
    let mut writer = csv_writer(&path)?;
    writer
        .write_record(["test", "comparison", "scope", "n", "statistic", "p_value", "ties", "exact"])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for scope in [compare_scope::MEAN_DICE, compare_scope::WEIGHTED_DICE] {
        let mut initial: BTreeMap<String, f64> = BTreeMap::new();
        let mut registered: BTreeMap<String, f64> = BTreeMap::new();
        for outcome in outcomes {
            let PairStatus::Done(metrics) = &outcome.status else { continue };
            let key = outcome.pair.key();
            initial.insert(key.clone(), scope_value(&metrics.initial, scope));
            registered.insert(key, scope_value(&metrics.registered, scope));
        }
        if initial.is_empty() {
            continue;
        }
        let reg: Vec<f64> = registered.values().copied().collect();
        let init: Vec<f64> = initial.values().copied().collect();
        match cohort::wilcoxon_signed_rank(&reg, &init) {
            Ok(test) => {
                writer
                    .write_record([
                        "wilcoxon_signed_rank".to_string(),
                        "registered_vs_initial".to_string(),
                        scope.to_string(),
                        test.n.to_string(),
                        fmt(test.w),
                        fmt(test.p),
                        String::new(),
                        test.exact.to_string(),
                    ])
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
            }
            Err(e) => log::warn!("wilcoxon on {scope} skipped: {e}"),
        }
        match compare_methods(&registered, &initial) {
            Ok(cmp) => {
                writer
                    .write_record([
                        "win_fraction".to_string(),
                        "registered_vs_initial".to_string(),
                        scope.to_string(),
                        cmp.total.to_string(),
                        fmt(cmp.win_fraction_a),
                        String::new(),
                        cmp.ties.to_string(),
                        String::new(),
                    ])
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
            }
            Err(e) => log::warn!("win fraction on {scope} skipped: {e}"),
        }
    }
    finish(writer, &path)
}

fn scope_value(report: &MetricsReport, scope: &str) -> f64 {
    match scope {
        compare_scope::MEAN_DICE => report.mean_dice,
        compare_scope::WEIGHTED_DICE => report.weighted_dice,
        other => unreachable!("unknown comparison scope {other}"),
    }
}

fn write_timing_json(
    outcomes: &[PairOutcome],
    total_seconds: f64,
    out_dir: &Path,
) -> Result<()> {
    let path = out_dir.join("timing.json");
    let mut walls = Vec::new();
    let mut stages: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for outcome in outcomes {
        let PairStatus::Done(metrics) = &outcome.status else { continue };
        walls.push(metrics.wall_seconds);
        for (stage, seconds) in &metrics.stage_seconds {
            stages.entry(stage.clone()).or_default().push(*seconds);
        }
    }
    let stats = |values: &[f64]| {
        let s = cohort::summary_stats(values).expect("non-empty timing list");
        serde_json::json!({ "mean": s.mean, "sd": s.sd, "median": s.median, "n": s.n })
    };
    let stage_json: serde_json::Map<String, serde_json::Value> = stages
        .iter()
        .map(|(stage, values)| (stage.clone(), stats(values)))
        .collect();
    let body = serde_json::json!({
        "pair_count": outcomes.len(),
        "succeeded": walls.len(),
        "failed": outcomes.len() - walls.len(),
        "total_seconds": total_seconds,
        "prorated_seconds_per_pair": cohort::prorate_time(total_seconds, outcomes.len())?,
        "registration_wall": stats(&walls),
        "stages": stage_json,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body).expect("timing json"))
        .map_err(|e| Error::io(&path, e))
}
