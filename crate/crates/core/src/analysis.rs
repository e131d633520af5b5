//! Correlation of drift and forgetting curves, landscape bump detection and
//! landscape / CSV persistence.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::experiments::{Axis, Document, DropCurve, LandscapeGrid, CSV_HEADER, SCHEMA_VERSION};
use crate::io::{fmt_f64, to_json_bytes};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("series contain non-finite values".into()));
    }
    Ok(())
}

fn centred(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (dx, dy) = (centred(x), centred(y));
    let sxx: f64 = dx.iter().map(|a| a * a).sum();
    let syy: f64 = dy.iter().map(|b| b * b).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series".into()));
    }
    let sxy: f64 = dx.iter().zip(&dy).map(|(a, b)| a * b).sum();
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Piecewise-linear interpolation without extrapolation; knots are returned exactly.
pub fn interpolate_linear(levels: &[f64], values: &[f64], queries: &[f64]) -> Result<Vec<f64>> {
    if levels.len() != values.len() || levels.is_empty() {
        return Err(Error::Shape(format!(
            "{} levels for {} values",
            levels.len(),
            values.len()
        )));
    }
    if levels.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::InvalidInput("levels must be strictly increasing".into()));
    }
    let (min, max) = (levels[0], levels[levels.len() - 1]);
    queries
        .iter()
        .map(|&q| {
            if !(min..=max).contains(&q) {
                return Err(Error::OutOfRange { query: q, min, max });
            }
            let hi = levels.partition_point(|&l| l < q);
            if levels[hi] == q {
                return Ok(values[hi]);
            }
            let lo = hi - 1;
            let t = (q - levels[lo]) / (levels[hi] - levels[lo]);
            Ok(values[lo] + t * (values[hi] - values[lo]))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pearson: f64,
    pub spearman: f64,
    /// Least-squares fit `delta_cd = slope * delta_cf + intercept`.
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    /// Common normalized axis and the two drop series on it.
    pub x: Vec<f64>,
    pub cd: Vec<f64>,
    pub cf: Vec<f64>,
}

fn normalized(x: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = (x[0], x[x.len() - 1]);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidInput("curve axis must be increasing".into()));
    }
    Ok(x.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Correlates the seed-mean relative drops of a drift curve and a forgetting
/// curve after resampling the latter onto the drift curve's normalized axis.
pub fn correlate_cd_cf(cd: &DropCurve, cf: &DropCurve) -> Result<CorrelationResult> {
    if cd.axis != Axis::Ratio || cf.axis != Axis::Severity {
        return Err(Error::InvalidInput("expected a ratio curve and a severity curve".into()));
    }
    if cd.x.len() < 3 || cf.x.len() < 2 {
        return Err(Error::UndefinedCorrelation("curves are too short".into()));
    }
    let x = normalized(&cd.x)?;
    let cf_on_x = interpolate_linear(&normalized(&cf.x)?, &cf.delta_rel, &x)?;
    let all_zero = |v: &[f64]| v.iter().all(|d| *d == 0.0);
    if all_zero(&cd.delta_rel) || all_zero(&cf_on_x) {
        return Err(Error::UndefinedCorrelation("a drop curve is identically zero".into()));
    }
    let r = pearson(&cd.delta_rel, &cf_on_x)?;
    let rho = spearman(&cd.delta_rel, &cf_on_x)?;
    let (dcf, dcd) = (centred(&cf_on_x), centred(&cd.delta_rel));
    let slope = dcf.iter().zip(&dcd).map(|(a, b)| a * b).sum::<f64>() / dcf.iter().map(|a| a * a).sum::<f64>();
    let n = x.len() as f64;
    let intercept = cd.delta_rel.iter().sum::<f64>() / n - slope * cf_on_x.iter().sum::<f64>() / n;
    Ok(CorrelationResult {
        pearson: r,
        spearman: rho,
        slope,
        intercept,
        n: x.len(),
        x,
        cd: cd.delta_rel.clone(),
        cf: cf_on_x,
    })
}

/// Whether the bump cell also stands out in one seed's own grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedBump {
    pub seed: u64,
    pub qualifies: bool,
    pub improvement_vs_pure_cd: f64,
    pub improvement_vs_pure_cf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpReport {
    pub found: bool,
    pub peak_ratio: Option<f64>,
    pub peak_severity: Option<f64>,
    pub peak_ratio_idx: Option<usize>,
    pub peak_severity_idx: Option<usize>,
    pub peak_metric: Option<f64>,
    /// Percent improvement over the same-ratio cell without forgetting.
    pub improvement_vs_pure_cd: Option<f64>,
    /// Percent improvement over the same-severity cell without drift.
    pub improvement_vs_pure_cf: Option<f64>,
    pub per_seed: Vec<SeedBump>,
}

fn improvement(peak: f64, edge: f64) -> f64 {
    100.0 * (peak - edge) / edge
}

fn check_complete(grid: &LandscapeGrid) -> Result<()> {
    let (nr, ns) = grid.shape();
    let square = |m: &Vec<Vec<f64>>| m.len() == nr && m.iter().all(|row| row.len() == ns);
    let ok = nr >= 3
        && ns >= 3
        && square(&grid.mean_final_metric)
        && grid.per_seed.len() == grid.seeds.len()
        && grid.per_seed.iter().all(|g| square(&g.final_metric))
        && grid.mean_final_metric.iter().flatten().all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput("landscape grid is incomplete".into()))
    }
}

/// Finds the interior cell with the highest seed-mean metric among those that
/// beat both their pure-drift edge `(r, 0)` and their pure-forgetting edge `(0, s)`.
pub fn find_bump(grid: &LandscapeGrid) -> Result<BumpReport> {
    check_complete(grid)?;
    let (nr, ns) = grid.shape();
    let m = &grid.mean_final_metric;
    let mut best: Option<(usize, usize)> = None;
    for r in 1..nr - 1 {
        for s in 1..ns - 1 {
            let v = m[r][s];
            if v > m[r][0] && v > m[0][s] && best.is_none_or(|(br, bs)| v > m[br][bs]) {
                best = Some((r, s));
            }
        }
    }
    let Some((r, s)) = best else {
        return Ok(BumpReport {
            found: false,
            peak_ratio: None,
            peak_severity: None,
            peak_ratio_idx: None,
            peak_severity_idx: None,
            peak_metric: None,
            improvement_vs_pure_cd: None,
            improvement_vs_pure_cf: None,
            per_seed: Vec::new(),
        });
    };
    let per_seed = grid
        .per_seed
        .iter()
        .map(|g| {
            let f = &g.final_metric;
            SeedBump {
                seed: g.seed,
                qualifies: f[r][s] > f[r][0] && f[r][s] > f[0][s],
                improvement_vs_pure_cd: improvement(f[r][s], f[r][0]),
                improvement_vs_pure_cf: improvement(f[r][s], f[0][s]),
            }
        })
        .collect();
    Ok(BumpReport {
        found: true,
        peak_ratio: Some(grid.ratios[r]),
        peak_severity: Some(grid.severities[s]),
        peak_ratio_idx: Some(r),
        peak_severity_idx: Some(s),
        peak_metric: Some(m[r][s]),
        improvement_vs_pure_cd: Some(improvement(m[r][s], m[r][0])),
        improvement_vs_pure_cf: Some(improvement(m[r][s], m[0][s])),
        per_seed,
    })
}

/// Path of the long-format table written next to a landscape JSON file.
pub fn long_table_path(json_path: &Path) -> PathBuf {
    let stem = json_path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid");
    json_path.with_file_name(format!("{stem}_long.csv"))
}

/// Long-format table: one `ratio,severity,mean_delta` row per cell.
pub fn long_table(grid: &LandscapeGrid) -> String {
    let mut out = String::from("ratio,severity,mean_delta\n");
    for (r, ratio) in grid.ratios.iter().enumerate() {
        for (s, sev) in grid.severities.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_f64(*ratio),
                fmt_f64(*sev),
                fmt_f64(grid.mean_delta_rel[r][s])
            ));
        }
    }
    out
}

/// Writes `doc` as JSON to `path` and the long-format table alongside it.
pub fn export_landscape(doc: &Document<LandscapeGrid>, path: &Path) -> Result<()> {
    check_complete(&doc.result)?;
    let bytes = to_json_bytes(doc).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, bytes).map_err(io_err(path))?;
    let long = long_table_path(path);
    fs::write(&long, long_table(&doc.result)).map_err(io_err(long))
}

/// Reads a landscape JSON document written by [`export_landscape`].
pub fn read_landscape(path: &Path) -> Result<Document<LandscapeGrid>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: Document<LandscapeGrid> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if doc.schema != SCHEMA_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported schema {}", doc.schema),
        });
    }
    Ok(doc)
}

/// One parsed row of a results CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub ratio: f64,
    pub severity: f64,
    pub final_metric: f64,
}

pub fn parse_result_csv(text: &str, path: &Path) -> Result<Vec<ResultRow>> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(bad(format!("line 1: expected header `{CSV_HEADER}`")));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(|e| bad(e.to_string())))
        .collect()
}

/// Rebuilds a drop curve from result rows of one experiment, with `axis`
/// selecting which coordinate varies.
pub fn curve_from_rows(rows: &[ResultRow], axis: Axis) -> Result<DropCurve> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let coord = |r: &ResultRow| match axis {
        Axis::Ratio => r.ratio,
        Axis::Severity => r.severity,
    };
    let mut x: Vec<f64> = rows.iter().map(coord).collect();
    x.sort_by(f64::total_cmp);
    x.dedup();
    let mut metrics = vec![vec![f64::NAN; x.len()]; seeds.len()];
    for row in rows {
        let s = seeds.binary_search(&row.seed).expect("seed collected above");
        let p = x.binary_search_by(|v| v.total_cmp(&coord(row))).expect("x collected above");
        metrics[s][p] = row.final_metric;
    }
    if metrics.iter().flatten().any(|v| v.is_nan()) || rows.len() != seeds.len() * x.len() {
        return Err(Error::InvalidInput("results do not form a complete seed x point table".into()));
    }
    DropCurve::from_metrics(axis, x, seeds, metrics)
}

/// Reads a results CSV and rebuilds the curve of rows whose experiment is `experiment`.
pub fn read_curve(path: &Path, experiment: &str, axis: Axis) -> Result<DropCurve> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rows: Vec<ResultRow> = parse_result_csv(&text, path)?
        .into_iter()
        .filter(|r| r.experiment == experiment)
        .collect();
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("no `{experiment}` rows"),
        });
    }
    curve_from_rows(&rows, axis).map_err(|e| e.context(path.display().to_string()))
}
