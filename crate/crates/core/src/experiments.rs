//! Experiment protocols: client-drift sweep, forgetting sweep, the joint
//! drift x forgetting grid, per-kind ablation and their rehearsal variants.
//!
//! Every cell draws its randomness from keys derived from the seed alone, so
//! results do not depend on scheduling. All cells of one seed share the same
//! streams (`root.child("phase1", 0)` and `root.child("phase2", 0)`), so cells
//! differ only in their shift plan. The forgetting sweep is therefore the
//! ratio-0 column of the joint grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruptions::{CorruptionKind, Severity, MAX_LEVEL};
use crate::error::{CellId, Error, Result};
use crate::federation::{Federation, FederationConfig, TaskData};
use crate::io::fmt_f64;
use crate::nn::ModelParams;
use crate::rng::StreamKey;

pub const RATIO_STEPS: usize = 10;
pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "experiment,seed,ratio,severity,final_metric,delta_rel,delta_abs";

/// The 11 shifted-client ratios `0.0, 0.1, ..., 1.0`.
pub fn ratio_grid() -> Vec<f64> {
    (0..=RATIO_STEPS).map(ratio_at).collect()
}

pub fn ratio_at(idx: usize) -> f64 {
    idx as f64 / RATIO_STEPS as f64
}

/// The 6 severity levels `0..=5`.
pub fn severity_grid() -> Vec<u8> {
    (0..=MAX_LEVEL).collect()
}

/// A point of the drift x forgetting plane for one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftScenario {
    pub ratio: f64,
    pub severity: u8,
    pub seed: u64,
}

impl ShiftScenario {
    pub fn new(ratio_idx: usize, severity: u8, seed: u64) -> Result<Self> {
        if ratio_idx > RATIO_STEPS || severity > MAX_LEVEL {
            return Err(Error::InvalidConfig(format!(
                "scenario ({ratio_idx}, {severity}) is off the {}x{} grid",
                RATIO_STEPS + 1,
                MAX_LEVEL + 1
            )));
        }
        Ok(ShiftScenario { ratio: ratio_at(ratio_idx), severity, seed })
    }

    /// Normalized forgetting strength in `[0, 1]`.
    pub fn alpha(&self) -> f64 {
        f64::from(self.severity) / f64::from(MAX_LEVEL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Ratio,
    Severity,
}

/// Final metrics along one axis, per seed, with drops against the `x = 0` point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropCurve {
    pub axis: Axis,
    pub x: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `[seed][point]`.
    pub per_seed_final_metric: Vec<Vec<f64>>,
    pub per_seed_delta_rel: Vec<Vec<f64>>,
    pub per_seed_delta_abs: Vec<Vec<f64>>,
    /// Seed means.
    pub delta_rel: Vec<f64>,
    pub delta_abs: Vec<f64>,
}

impl DropCurve {
    /// Builds the curve from raw metrics; the first point of every seed is its baseline.
    pub fn from_metrics(axis: Axis, x: Vec<f64>, seeds: Vec<u64>, metrics: Vec<Vec<f64>>) -> Result<Self> {
        if seeds.is_empty() || seeds.len() != metrics.len() || metrics.iter().any(|m| m.len() != x.len()) {
            return Err(Error::Shape(format!(
                "{} seeds with metric rows {:?} do not fit {} points",
                seeds.len(),
                metrics.iter().map(Vec::len).collect::<Vec<_>>(),
                x.len()
            )));
        }
        if x.first() != Some(&0.0) {
            return Err(Error::InvalidInput("drop curves start at x = 0".into()));
        }
        let (rel, abs): (Vec<_>, Vec<_>) = metrics.iter().map(|row| drops(row, row[0])).unzip();
        Ok(DropCurve {
            axis,
            delta_rel: column_mean(&rel),
            delta_abs: column_mean(&abs),
            x,
            seeds,
            per_seed_final_metric: metrics,
            per_seed_delta_rel: rel,
            per_seed_delta_abs: abs,
        })
    }

    pub fn mean_final_metric(&self) -> Vec<f64> {
        column_mean(&self.per_seed_final_metric)
    }

    /// CSV rows (no header). `other` fills the coordinate not on this curve's axis.
    pub fn csv_rows(&self, experiment: &str, other: f64) -> String {
        let mut out = String::new();
        for (s, seed) in self.seeds.iter().enumerate() {
            for (p, &x) in self.x.iter().enumerate() {
                let (ratio, severity) = match self.axis {
                    Axis::Ratio => (x, other),
                    Axis::Severity => (other, x),
                };
                push_row(
                    &mut out,
                    experiment,
                    *seed,
                    ratio,
                    severity,
                    [
                        self.per_seed_final_metric[s][p],
                        self.per_seed_delta_rel[s][p],
                        self.per_seed_delta_abs[s][p],
                    ],
                );
            }
        }
        out
    }
}

/// Raw and derived values of one seed over the full grid, indexed `[ratio][severity]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedGrid {
    pub seed: u64,
    pub final_metric: Vec<Vec<f64>>,
    pub delta_rel: Vec<Vec<f64>>,
    pub delta_abs: Vec<Vec<f64>>,
}

/// The joint landscape: drops against cell `(0, 0)` of the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub ratios: Vec<f64>,
    pub severities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedGrid>,
    pub mean_final_metric: Vec<Vec<f64>>,
    pub mean_delta_rel: Vec<Vec<f64>>,
    pub mean_delta_abs: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    /// `metrics` is indexed `[seed][ratio][severity]`.
    pub fn from_metrics(ratios: Vec<f64>, severities: Vec<f64>, seeds: Vec<u64>, metrics: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let fits = seeds.len() == metrics.len()
            && metrics
                .iter()
                .all(|m| m.len() == ratios.len() && m.iter().all(|row| row.len() == severities.len()));
        if seeds.is_empty() || ratios.is_empty() || severities.is_empty() || !fits {
            return Err(Error::Shape(format!(
                "metric tensor does not fit {} seeds x {} ratios x {} severities",
                seeds.len(),
                ratios.len(),
                severities.len()
            )));
        }
        let per_seed: Vec<SeedGrid> = seeds
            .iter()
            .zip(metrics)
            .map(|(&seed, m)| {
                let base = m[0][0];
                let (delta_rel, delta_abs) = m.iter().map(|row| drops(row, base)).unzip();
                SeedGrid { seed, final_metric: m, delta_rel, delta_abs }
            })
            .collect();
        let mean = |f: fn(&SeedGrid) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..ratios.len())
                .map(|r| column_mean(&per_seed.iter().map(|g| f(g)[r].clone()).collect::<Vec<_>>()))
                .collect()
        };
        Ok(LandscapeGrid {
            mean_final_metric: mean(|g| &g.final_metric),
            mean_delta_rel: mean(|g| &g.delta_rel),
            mean_delta_abs: mean(|g| &g.delta_abs),
            ratios,
            severities,
            seeds,
            per_seed,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ratios.len(), self.severities.len())
    }

    /// The severity curve of ratio row `ratio_idx`, with drops against its own first cell.
    pub fn row_curve(&self, ratio_idx: usize) -> Result<DropCurve> {
        DropCurve::from_metrics(
            Axis::Severity,
            self.severities.clone(),
            self.seeds.clone(),
            self.per_seed.iter().map(|g| g.final_metric[ratio_idx].clone()).collect(),
        )
    }

    pub fn csv_rows(&self, experiment: &str) -> String {
        let mut out = String::new();
        for g in &self.per_seed {
            for (r, &ratio) in self.ratios.iter().enumerate() {
                for (s, &severity) in self.severities.iter().enumerate() {
                    push_row(
                        &mut out,
                        experiment,
                        g.seed,
                        ratio,
                        severity,
                        [g.final_metric[r][s], g.delta_rel[r][s], g.delta_abs[r][s]],
                    );
                }
            }
        }
        out
    }
}

fn drops(row: &[f64], base: f64) -> (Vec<f64>, Vec<f64>) {
    row.iter()
        .map(|&v| {
            let abs = base - v;
            let rel = if base == 0.0 { 0.0 } else { abs / base };
            (rel, abs)
        })
        .unzip()
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows.first().map_or(0, Vec::len))
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect()
}

fn push_row(out: &mut String, experiment: &str, seed: u64, ratio: f64, severity: f64, v: [f64; 3]) {
    let _ = writeln!(
        out,
        "{experiment},{seed},{},{},{},{},{}",
        fmt_f64(ratio),
        fmt_f64(severity),
        fmt_f64(v[0]),
        fmt_f64(v[1]),
        fmt_f64(v[2])
    );
}

/// One finished cell, reported to a [`Progress`] sink.
#[derive(Debug, Clone, PartialEq)]
pub struct CellEvent {
    /// Position in the canonical (seed, ratio, severity) order.
    pub index: usize,
    pub total: usize,
    pub cell: CellId,
    pub final_metric: f64,
}

pub trait Progress: Sync {
    fn cell_done(&self, event: CellEvent);
}

pub struct NoProgress;

impl Progress for NoProgress {
    fn cell_done(&self, _: CellEvent) {}
}

/// Buffers events and forwards them in canonical order, whatever the completion order.
pub struct OrderedProgress<F> {
    state: Mutex<(usize, BTreeMap<usize, CellEvent>, F)>,
}

impl<F: FnMut(&CellEvent) + Send> OrderedProgress<F> {
    pub fn new(sink: F) -> Self {
        OrderedProgress { state: Mutex::new((0, BTreeMap::new(), sink)) }
    }
}

impl<F: FnMut(&CellEvent) + Send> Progress for OrderedProgress<F> {
    fn cell_done(&self, event: CellEvent) {
        let mut guard = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let (next, pending, sink) = &mut *guard;
        pending.insert(event.index, event);
        while let Some(ev) = pending.remove(next) {
            sink(&ev);
            *next += 1;
        }
    }
}

/// Round budgets and strength used by [`run_ablation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub rounds_cd: usize,
    pub rounds_cf: usize,
    /// Level used for both the drift clients and the forgetting phase.
    pub level: u8,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings { rounds_cd: 40, rounds_cf: 20, level: MAX_LEVEL }
    }
}

/// Seed-mean drops of one corruption kind at full drift and full forgetting strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub kind: CorruptionKind,
    pub cd_delta_rel: f64,
    pub cf_delta_rel: f64,
    pub cd: DropCurve,
    pub cf: DropCurve,
}

/// Everything a runner needs for one seed.
struct SeedRun {
    fed: Federation,
    key: StreamKey,
    init: ModelParams,
}

impl SeedRun {
    fn new(cfg: &FederationConfig, data: &TaskData, seed: u64) -> Result<Self> {
        let fed = Federation::new(cfg.clone(), data.clone(), seed)?;
        let init = fed.init_model()?;
        Ok(SeedRun { key: fed.key(), fed, init })
    }

    fn phase1(&self, ratio_idx: usize) -> Result<ModelParams> {
        let cfg = self.fed.config();
        let plan = self.fed.plan(ratio_at(ratio_idx), Severity::Level(cfg.cd_level))?;
        let (params, _) = self.fed.run(&plan, cfg.rounds_cd, &self.init, self.key.child("phase1", 0))?;
        Ok(params)
    }

    fn phase2(&self, start: &ModelParams, level: u8) -> Result<f64> {
        let plan = self.fed.plan(1.0, Severity::Level(level))?;
        let stream = self.key.child("phase2", 0);
        let (_, history) = self.fed.run(&plan, self.fed.config().rounds_cf, start, stream)?;
        history
            .final_metric()
            .ok_or_else(|| Error::InvalidConfig("rounds_cf must be >= 1".into()))
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig(format!("duplicate seeds in {seeds:?}")));
    }
    Ok(())
}

fn prepare(cfg: &FederationConfig, seeds: &[u64]) -> Result<TaskData> {
    cfg.validate()?;
    check_seeds(seeds)?;
    cfg.task.generate()
}

fn cell_context(cell: CellId, err: Error) -> Error {
    err.context(format!(
        "seed {}, ratio {}, severity {}",
        cell.seed,
        ratio_at(cell.ratio_idx),
        cell.severity_idx
    ))
}

/// Client-drift sweep: `rounds_cd` rounds with the given share of clients at
/// `cd_level`, one curve point per ratio index.
fn cd_sweep(cfg: &FederationConfig, data: &TaskData, seeds: &[u64], ratio_idx: &[usize], progress: &dyn Progress) -> Result<DropCurve> {
    let total = seeds.len() * ratio_idx.len();
    let metrics = seeds
        .par_iter()
        .enumerate()
        .map(|(s, &seed)| {
            let run = SeedRun::new(cfg, data, seed)?;
            ratio_idx
                .par_iter()
                .enumerate()
                .map(|(p, &ri)| {
                    let cell = CellId { seed, ratio_idx: ri, severity_idx: usize::from(cfg.cd_level) };
                    let metric = run
                        .phase1(ri)
                        .and_then(|m| run.fed.evaluate(&m))
                        .map_err(|e| cell_context(cell, e))?;
                    progress.cell_done(CellEvent { index: s * ratio_idx.len() + p, total, cell, final_metric: metric });
                    Ok(metric)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    DropCurve::from_metrics(Axis::Ratio, ratio_idx.iter().map(|&i| ratio_at(i)).collect(), seeds.to_vec(), metrics)
}

/// Forgetting sweep: clean pretraining shared by all levels, then `rounds_cf`
/// rounds with every client shifted.
fn cf_sweep(cfg: &FederationConfig, data: &TaskData, seeds: &[u64], levels: &[u8], progress: &dyn Progress) -> Result<DropCurve> {
    let total = seeds.len() * levels.len();
    let metrics = seeds
        .par_iter()
        .enumerate()
        .map(|(s, &seed)| {
            let run = SeedRun::new(cfg, data, seed)?;
            let pre_cell = CellId { seed, ratio_idx: 0, severity_idx: 0 };
            let pretrained = run.phase1(0).map_err(|e| cell_context(pre_cell, e))?;
            levels
                .par_iter()
                .enumerate()
                .map(|(p, &level)| {
                    let cell = CellId { seed, ratio_idx: 0, severity_idx: usize::from(level) };
                    let metric = run.phase2(&pretrained, level).map_err(|e| cell_context(cell, e))?;
                    progress.cell_done(CellEvent { index: s * levels.len() + p, total, cell, final_metric: metric });
                    Ok(metric)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    DropCurve::from_metrics(Axis::Severity, levels.iter().map(|&l| f64::from(l)).collect(), seeds.to_vec(), metrics)
}

/// Client-drift sweep over the 11 ratios.
pub fn run_cd(cfg: &FederationConfig, seeds: &[u64], progress: &dyn Progress) -> Result<DropCurve> {
    let data = prepare(cfg, seeds)?;
    cd_sweep(cfg, &data, seeds, &(0..=RATIO_STEPS).collect::<Vec<_>>(), progress)
}

/// Forgetting sweep over the 6 severity levels.
pub fn run_cf(cfg: &FederationConfig, seeds: &[u64], progress: &dyn Progress) -> Result<DropCurve> {
    let data = prepare(cfg, seeds)?;
    cf_sweep(cfg, &data, seeds, &severity_grid(), progress)
}

/// The full 11 x 6 grid. Phase 1 runs once per (seed, ratio) and is shared by
/// the six phase-2 continuations. Any failing cell aborts the grid; the error
/// lists the cells that did complete.
pub fn run_joint(cfg: &FederationConfig, seeds: &[u64], progress: &dyn Progress) -> Result<LandscapeGrid> {
    let data = prepare(cfg, seeds)?;
    let levels = severity_grid();
    let rows = RATIO_STEPS + 1;
    let total = seeds.len() * rows * levels.len();
    let jobs: Vec<(usize, u64, usize)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(s, &seed)| (0..rows).map(move |r| (s, seed, r)))
        .collect();
    let runs = seeds
        .par_iter()
        .map(|&seed| SeedRun::new(cfg, &data, seed))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<Vec<(CellId, Result<f64>)>> = jobs
        .par_iter()
        .map(|&(s, seed, r)| {
            let run = &runs[s];
            let cell_of = |level: u8| CellId { seed, ratio_idx: r, severity_idx: usize::from(level) };
            match run.phase1(r) {
                Err(e) => {
                    let e = cell_context(cell_of(0), e);
                    let mut out = vec![(cell_of(0), Err(e))];
                    out.extend(levels[1..].iter().map(|&l| {
                        (cell_of(l), Err(Error::InvalidInput("phase 1 failed".into())))
                    }));
                    out
                }
                Ok(start) => levels
                    .par_iter()
                    .map(|&level| {
                        let cell = cell_of(level);
                        let res = run.phase2(&start, level).map_err(|e| cell_context(cell, e));
                        if let Ok(metric) = res {
                            let index = (s * rows + r) * levels.len() + usize::from(level);
                            progress.cell_done(CellEvent { index, total, cell, final_metric: metric });
                        }
                        (cell, res)
                    })
                    .collect(),
            }
        })
        .collect();

    let mut completed = Vec::new();
    let mut first_err = None;
    let mut metrics = vec![vec![vec![0.0; levels.len()]; rows]; seeds.len()];
    for (&(s, _, r), row) in jobs.iter().zip(outcomes) {
        for (cell, res) in row {
            match res {
                Ok(m) => {
                    metrics[s][r][cell.severity_idx] = m;
                    completed.push(cell);
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
    }
    if let Some(source) = first_err {
        return Err(Error::GridAborted { completed, source: Box::new(source) });
    }
    LandscapeGrid::from_metrics(
        ratio_grid(),
        levels.iter().map(|&l| f64::from(l)).collect(),
        seeds.to_vec(),
        metrics,
    )
}

/// Per-kind drift (ratios 0 and 1) and forgetting (levels 0 and `settings.level`)
/// with the shift restricted to that kind and the ablation round budgets.
pub fn run_ablation(
    cfg: &FederationConfig,
    seeds: &[u64],
    kinds: &[CorruptionKind],
    settings: AblationSettings,
    progress: &dyn Progress,
) -> Result<Vec<AblationEntry>> {
    if kinds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one corruption kind".into()));
    }
    if settings.level > MAX_LEVEL {
        return Err(Error::InvalidConfig(format!("ablation level {} exceeds {MAX_LEVEL}", settings.level)));
    }
    let mut base = cfg.clone();
    base.rounds_cd = settings.rounds_cd;
    base.rounds_cf = settings.rounds_cf;
    base.cd_level = settings.level;
    let data = prepare(&base, seeds)?;
    kinds
        .iter()
        .map(|&kind| {
            let mut kcfg = base.clone();
            kcfg.shift.kinds = vec![kind];
            let cd = cd_sweep(&kcfg, &data, seeds, &[0, RATIO_STEPS], progress)
                .map_err(|e| e.context(format!("ablation {kind}")))?;
            let cf = cf_sweep(&kcfg, &data, seeds, &[0, settings.level], progress)
                .map_err(|e| e.context(format!("ablation {kind}")))?;
            Ok(AblationEntry {
                kind,
                cd_delta_rel: *cd.delta_rel.last().expect("two points"),
                cf_delta_rel: *cf.delta_rel.last().expect("two points"),
                cd,
                cf,
            })
        })
        .collect()
}

/// Self-describing JSON output of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub schema: u32,
    pub tool_version: String,
    pub experiment: String,
    pub config: FederationConfig,
    pub result: T,
}

impl<T> Document<T> {
    pub fn new(experiment: &str, config: &FederationConfig, result: T) -> Self {
        Document {
            schema: SCHEMA_VERSION,
            tool_version: crate::TOOL_VERSION.to_string(),
            experiment: experiment.to_string(),
            config: config.clone(),
            result,
        }
    }
}
