use std::fs;
use std::io::Write as _;
use std::path::Path;

use driftscape::analysis::{correlate_cd_cf, export_landscape, find_bump, read_curve, read_landscape, BumpReport, CorrelationResult};
use driftscape::corruptions::{calibrate_transform, cf_feasibility_check, measured_drop, CorruptionKind, CorruptionSpec, FeasibilityReport};
use driftscape::experiments::{
    run_ablation, run_cd, run_cf, run_joint, AblationEntry, Axis, CellEvent, Document, OrderedProgress, CSV_HEADER,
};
use driftscape::federation::Federation;
use driftscape::io::to_json_bytes;
use driftscape::rng::StreamKey;
use driftscape::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::AnalyzeArgs;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = to_json_bytes(value).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    write_file(path, &bytes)
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.run.out.as_path();
    fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    Ok(out)
}

fn in_pool<T: Send>(cfg: &RunConfig, job: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {} workers: {e}", cfg.run.workers)))?;
    pool.install(job)
}

fn progress() -> OrderedProgress<impl FnMut(&CellEvent) + Send> {
    OrderedProgress::new(|e: &CellEvent| {
        let _ = writeln!(
            std::io::stderr().lock(),
            "[{}/{}] seed {} ratio_idx {} severity {} metric {:.4}",
            e.index + 1,
            e.total,
            e.cell.seed,
            e.cell.ratio_idx,
            e.cell.severity_idx,
            e.final_metric
        );
    })
}

fn csv(rows: &str) -> Vec<u8> {
    format!("{CSV_HEADER}\n{rows}").into_bytes()
}

pub fn cd(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let fed = &cfg.federation;
    let curve = in_pool(cfg, || run_cd(fed, &cfg.run.seeds, &progress()))?;
    write_file(&out.join("cd.csv"), &csv(&curve.csv_rows("cd", f64::from(fed.cd_level))))?;
    write_json(&out.join("cd.json"), &Document::new("cd", fed, curve))
}

pub fn cf(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let fed = &cfg.federation;
    let curve = in_pool(cfg, || run_cf(fed, &cfg.run.seeds, &progress()))?;
    write_file(&out.join("cf.csv"), &csv(&curve.csv_rows("cf", 0.0)))?;
    write_json(&out.join("cf.json"), &Document::new("cf", fed, curve))
}

pub fn joint(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let fed = &cfg.federation;
    let grid = in_pool(cfg, || run_joint(fed, &cfg.run.seeds, &progress()))?;
    write_file(&out.join("grid.csv"), &csv(&grid.csv_rows("joint")))?;
    export_landscape(&Document::new("joint", fed, grid), &out.join("grid.json"))
}

pub fn ablation(cfg: &RunConfig, explicit_kinds: bool) -> Result<()> {
    let out = prepare_out(cfg)?;
    let fed = &cfg.federation;
    let kinds: Vec<CorruptionKind> = if explicit_kinds {
        fed.shift.kinds.clone()
    } else {
        CorruptionKind::ALL.to_vec()
    };
    let entries: Vec<AblationEntry> =
        in_pool(cfg, || run_ablation(fed, &cfg.run.seeds, &kinds, cfg.ablation, &progress()))?;
    let mut rows = String::new();
    for e in &entries {
        rows.push_str(&e.cd.csv_rows(&format!("ablation_cd:{}", e.kind), f64::from(cfg.ablation.level)));
        rows.push_str(&e.cf.csv_rows(&format!("ablation_cf:{}", e.kind), 0.0));
    }
    write_file(&out.join("ablation.csv"), &csv(&rows))?;
    write_json(&out.join("ablation.json"), &Document::new("ablation", fed, entries))
}

#[derive(Serialize)]
struct CalibrationOutput {
    clean_metric: f64,
    calibrated: CorruptionSpec,
    measured_drop: f64,
    check_transform: CorruptionSpec,
    feasibility: FeasibilityReport,
}

pub fn calibrate(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let fed_cfg = &cfg.federation;
    let c = &cfg.calibration;
    let report = in_pool(cfg, || {
        let data = fed_cfg.task.generate()?;
        let fed = Federation::new(fed_cfg.clone(), data, c.seed)?;
        let init = fed.init_model()?;
        let key = StreamKey::root(c.seed).child("calibration", 0);
        let (model, _) = fed.run(&fed.plan(0.0, driftscape::corruptions::Severity::Level(0))?, fed_cfg.rounds_cd, &init, key)?;
        let test = &fed.data().test;
        let clean_metric = test.evaluate(&model)?;
        let calibrated = calibrate_transform(&model, test, c.kind, c.target_drop, c.tolerance, c.salt)?;
        let drop = measured_drop(&model, test, clean_metric, &calibrated)?;
        let check_transform = CorruptionSpec::level(c.check_kind, c.check_level).with_salt(c.salt);
        let feasibility = cf_feasibility_check(fed_cfg, &check_transform, c.seed)?;
        Ok(CalibrationOutput { clean_metric, calibrated, measured_drop: drop, check_transform, feasibility })
    })?;
    let doc = Document::new("calibrate", fed_cfg, report);
    write_json(&out.join("calibration.json"), &doc)?;
    let bytes = to_json_bytes(&doc.result).map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::io::stdout().write_all(&bytes).map_err(|source| Error::Io { path: "<stdout>".into(), source })
}

#[derive(Serialize)]
struct AnalysisOutput {
    schema: u32,
    tool_version: String,
    correlation: CorrelationResult,
    bump: Option<BumpReport>,
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let cd = read_curve(&args.cd, "cd", Axis::Ratio)?;
    let cf = read_curve(&args.cf, "cf", Axis::Severity)?;
    let correlation = correlate_cd_cf(&cd, &cf)?;
    let bump = args
        .grid
        .as_deref()
        .map(|p| read_landscape(p).and_then(|doc| find_bump(&doc.result)))
        .transpose()?;
    let report = AnalysisOutput {
        schema: driftscape::experiments::SCHEMA_VERSION,
        tool_version: driftscape::TOOL_VERSION.to_string(),
        correlation,
        bump,
    };
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|source| Error::Io { path: out.clone(), source })?;
        write_json(&out.join("analysis.json"), &report)?;
    }
    let bytes = to_json_bytes(&report).map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::io::stdout().write_all(&bytes).map_err(|source| Error::Io { path: "<stdout>".into(), source })
}
