//! End-to-end acceptance checks. Each criterion writes one PASS/FAIL line to
//! stderr (uncaptured) and then asserts.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use driftscape::analysis::{correlate_cd_cf, find_bump, pearson, spearman};
use driftscape::corruptions::{
    calibrate_transform, cf_feasibility_check, measured_drop, CorruptionKind, CorruptionSpec, Severity,
};
use driftscape::experiments::{
    ratio_grid, run_cd, run_cf, run_joint, DropCurve, Document, LandscapeGrid, NoProgress, CSV_HEADER,
};
use driftscape::federation::{Federation, FederationConfig};
use driftscape::io::to_json_bytes;
use driftscape::nn::{init_params, loss_and_grad, Batch, ModelParams};
use driftscape::rng::StreamKey;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const JOINT_SEEDS: [u64; 3] = [1, 2, 3];

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[acceptance {id:>2}] {verdict} {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

struct Sweeps {
    cd: DropCurve,
    cf: DropCurve,
}

fn sweeps(rehearsal: f64) -> Sweeps {
    let cfg = FederationConfig {
        rehearsal_fraction: rehearsal,
        ..FederationConfig::default()
    };
    Sweeps {
        cd: run_cd(&cfg, &SEEDS, &NoProgress).unwrap(),
        cf: run_cf(&cfg, &SEEDS, &NoProgress).unwrap(),
    }
}

fn desk() -> &'static Sweeps {
    static CELL: OnceLock<Sweeps> = OnceLock::new();
    CELL.get_or_init(|| sweeps(0.0))
}

fn desk_rehearsal() -> &'static Sweeps {
    static CELL: OnceLock<Sweeps> = OnceLock::new();
    CELL.get_or_init(|| sweeps(0.2))
}

fn joint() -> &'static (LandscapeGrid, Duration) {
    static CELL: OnceLock<(LandscapeGrid, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let grid = run_joint(&FederationConfig::default(), &JOINT_SEEDS, &NoProgress).unwrap();
        (grid, start.elapsed())
    })
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect()
}

// ---------------------------------------------------------------- oracles

/// Independent forward pass: ReLU MLP, softmax cross-entropy averaged over rows.
fn oracle_loss(params: &ModelParams, batch: &Batch) -> f64 {
    let layers = params.layers();
    let mut total = 0.0;
    for n in 0..batch.len() {
        let mut act = batch.row(n).to_vec();
        for (li, layer) in layers.iter().enumerate() {
            let mut next = vec![0.0; layer.fan_out];
            for (j, z) in next.iter_mut().enumerate() {
                *z = layer.bias[j] + (0..layer.fan_in).map(|i| act[i] * layer.weight(i, j)).sum::<f64>();
                if li + 1 < layers.len() {
                    *z = z.max(0.0);
                }
            }
            act = next;
        }
        let max = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + act.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - act[batch.labels[n]];
    }
    total / batch.len() as f64
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 1e-9 || vy <= 1e-9 {
        return None;
    }
    Some((n * sxy - sx * sy) / (vx * vy).sqrt())
}

fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|a| {
            let below = v.iter().filter(|b| *b < a).count() as f64;
            let equal = v.iter().filter(|b| *b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, tied: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if tied {
                f64::from(rng.random_range(0..5u8))
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect()
}

fn grid_from(cells: Vec<Vec<Vec<f64>>>) -> LandscapeGrid {
    let (nr, ns) = (cells[0].len(), cells[0][0].len());
    let seeds = (1..=cells.len() as u64).collect();
    LandscapeGrid::from_metrics(
        (0..nr).map(|r| r as f64 / (nr - 1) as f64).collect(),
        (0..ns).map(|s| s as f64).collect(),
        seeds,
        cells,
    )
    .unwrap()
}

fn monotone_violations(values: &[f64]) -> (usize, f64) {
    let drops: Vec<f64> = values.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    (drops.len(), drops.iter().cloned().fold(0.0, f64::max))
}

fn trend_ok(values: &[f64]) -> bool {
    let (count, worst) = monotone_violations(values);
    count == 0 || (count == 1 && worst < 0.005)
}

fn clean_run(cfg: &FederationConfig, seed: u64) -> (Federation, ModelParams) {
    let fed = Federation::new(cfg.clone(), cfg.task.generate().unwrap(), seed).unwrap();
    let init = fed.init_model().unwrap();
    let plan = fed.plan(0.0, Severity::Level(0)).unwrap();
    let (model, _) = fed.run(&plan, cfg.rounds_cd, &init, StreamKey::root(seed).child("clean", 0)).unwrap();
    (fed, model)
}

// ---------------------------------------------------------------- criteria

#[test]
fn c01_gradient_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut probes, mut worst) = (0usize, 0.0f64);
    let h = 1e-5;
    for net in 0..4u64 {
        let dims = [10, 7, 5, 3];
        let params = init_params(&dims, 100 + net).unwrap();
        let rows = 6;
        let inputs: Vec<f64> = (0..rows * dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..dims[3])).collect();
        let batch = Batch::new(inputs, labels, dims[0]).unwrap();
        let (loss, grads) = loss_and_grad(&params, &batch).unwrap();
        assert!((loss - oracle_loss(&params, &batch)).abs() < 1e-12);
        let analytic: Vec<f64> = grads.iter().copied().collect();
        for _ in 0..30 {
            let k = rng.random_range(0..params.num_params());
            let shifted = |delta: f64| {
                let mut p = params.clone();
                *p.iter_mut().nth(k).unwrap() += delta;
                oracle_loss(&p, &batch)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            probes += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        "gradient oracle",
        probes >= 100 && worst <= 1e-4 && elapsed < Duration::from_secs(10),
        &format!("{probes} probes, max rel err {worst:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn c02_learnability_floor() {
    let mut lines = Vec::new();
    let mut pass = true;
    for (cfg, floor) in [(FederationConfig::default(), 0.95), (FederationConfig::segmentation(), 0.85)] {
        for seed in SEEDS {
            let start = Instant::now();
            let (fed, model) = clean_run(&cfg, seed);
            let metric = fed.evaluate(&model).unwrap();
            let elapsed = start.elapsed();
            pass &= metric >= floor && elapsed < Duration::from_secs(60);
            lines.push(format!("{} seed {seed} {metric:.4} in {elapsed:.1?}", cfg.task.kind.as_str()));
        }
    }
    report(2, "learnability floor", pass, &lines.join("; "));
}

#[test]
fn c03_exact_zeros() {
    let d = desk();
    let (grid, _) = joint();
    let cd_zero = d.cd.per_seed_delta_rel.iter().chain(&d.cd.per_seed_delta_abs).all(|r| r[0] == 0.0);
    let cf_zero = d.cf.per_seed_delta_rel.iter().chain(&d.cf.per_seed_delta_abs).all(|r| r[0] == 0.0);
    let joint_zero = grid.per_seed.iter().all(|g| g.delta_rel[0][0] == 0.0 && g.delta_abs[0][0] == 0.0);
    report(
        3,
        "exact zeros",
        cd_zero && cf_zero && joint_zero,
        &format!("cd {cd_zero}, cf {cf_zero}, joint (0,0) {joint_zero}"),
    );
}

#[test]
fn c04_column_equivalence() {
    let d = desk();
    let (grid, _) = joint();
    let mut mismatches = 0;
    for g in &grid.per_seed {
        let i = d.cf.seeds.iter().position(|&s| s == g.seed).unwrap();
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same(&g.final_metric[0], &d.cf.per_seed_final_metric[i]) || !same(&g.delta_rel[0], &d.cf.per_seed_delta_rel[i]) {
            mismatches += 1;
        }
    }
    report(4, "column equivalence", mismatches == 0, &format!("{mismatches} of {} seeds differ", grid.per_seed.len()));
}

#[test]
fn c05_monotone_trend() {
    let d = desk();
    let (cd_ok, cf_ok) = (trend_ok(&d.cd.delta_rel), trend_ok(&d.cf.delta_rel));
    report(
        5,
        "monotone trend",
        cd_ok && cf_ok,
        &format!("cd {:.4?} ({cd_ok}); cf {:.4?} ({cf_ok})", d.cd.delta_rel, d.cf.delta_rel),
    );
}

#[test]
fn c06_cd_cf_correlation() {
    let d = desk();
    let detail;
    let pass = match correlate_cd_cf(&d.cd, &d.cf) {
        Ok(c) => {
            detail = format!("spearman {:.4}, pearson {:.4}, slope {:.4}", c.spearman, c.pearson, c.slope);
            c.spearman >= 0.8 && c.pearson >= 0.7
        }
        Err(e) => {
            detail = format!("correlation undefined: {e}");
            false
        }
    };
    report(6, "cd/cf correlation", pass, &detail);
}

#[test]
fn c07_rehearsal_mitigation() {
    let (base, reh) = (desk(), desk_rehearsal());
    let last_cf = base.cf.delta_rel.len() - 1;
    let last_cd = base.cd.delta_rel.len() - 1;
    let (cf0, cf1) = (base.cf.delta_rel[last_cf], reh.cf.delta_rel[last_cf]);
    let (cd0, cd1) = (base.cd.delta_rel[last_cd], reh.cd.delta_rel[last_cd]);
    let cf_ok = cf1 <= 0.7 * cf0;
    let cd_ok = cd1 < cd0;
    report(
        7,
        "rehearsal mitigation",
        cf_ok && cd_ok,
        &format!("cf drop {cf0:.4} -> {cf1:.4} ({cf_ok}); cd drop {cd0:.4} -> {cd1:.4} ({cd_ok})"),
    );
}

#[test]
fn c08_calibration_and_feasibility() {
    let cfg = FederationConfig::segmentation();
    let (fed, model) = clean_run(&cfg, 1);
    let test = &fed.data().test;
    let clean = test.evaluate(&model).unwrap();
    let (cal_ok, cal_detail) = match calibrate_transform(&model, test, CorruptionKind::OcclusionOverlay, 0.20, 0.02, 0) {
        Ok(spec) => {
            let drop = measured_drop(&model, test, clean, &spec).unwrap();
            ((drop - 0.20).abs() <= 0.02, format!("occlusion drop {drop:.4}"))
        }
        Err(e) => (false, format!("calibration failed: {e}")),
    };
    let spec = CorruptionSpec::level(CorruptionKind::GaussianNoise, 5);
    let mut feas_ok = true;
    let mut feas = Vec::new();
    for seed in JOINT_SEEDS {
        let r = cf_feasibility_check(&FederationConfig::default(), &spec, seed).unwrap();
        feas_ok &= r.drop_after_retrain >= 0.05 && r.order_switched;
        feas.push(format!(
            "seed {seed} drop {:.4} clean {:.4}->{:.4} noisy {:.4}->{:.4} switched {}",
            r.drop_after_retrain, r.clean_before, r.clean_after, r.transformed_before, r.transformed_after, r.order_switched
        ));
    }
    report(
        8,
        "calibration and feasibility",
        cal_ok && feas_ok,
        &format!("{cal_detail} ({cal_ok}); {} ({feas_ok})", feas.join("; ")),
    );
}

#[test]
fn c09_determinism_across_workers() {
    let cfg = FederationConfig::default();
    let seeds = [1, 2];
    let outputs: Vec<Vec<u8>> = [1usize, 4, 16]
        .iter()
        .map(|&workers| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
            pool.install(|| {
                let cd = run_cd(&cfg, &seeds, &NoProgress).unwrap();
                let cf = run_cf(&cfg, &seeds, &NoProgress).unwrap();
                let mut bytes = format!("{CSV_HEADER}\n{}{}", cd.csv_rows("cd", 5.0), cf.csv_rows("cf", 0.0)).into_bytes();
                bytes.extend(to_json_bytes(&Document::new("cd", &cfg, cd)).unwrap());
                bytes.extend(to_json_bytes(&Document::new("cf", &cfg, cf)).unwrap());
                bytes
            })
        })
        .collect();
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    report(
        9,
        "determinism across workers",
        identical,
        &format!("{} bytes at 1/4/16 workers, identical {identical}", outputs[0].len()),
    );
}

#[test]
fn c10_statistics_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for trial in 0..1000 {
        let n = rng.random_range(3..40);
        let tied = trial % 3 == 0;
        let x = random_vector(&mut rng, n, tied);
        let y = random_vector(&mut rng, n, tied);
        for (got, want) in [
            (pearson(&x, &y), oracle_pearson(&x, &y)),
            (spearman(&x, &y), oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y))),
        ] {
            match (got, want) {
                (Ok(g), Some(w)) => {
                    worst = worst.max((g - w).abs());
                    compared += 1;
                }
                (Err(_), None) => {}
                (g, w) => panic!("library {g:?} vs oracle {w:?} on {x:?} / {y:?}"),
            }
        }
    }

    let base = |r: usize, s: usize| 0.9 - 0.01 * r as f64 - 0.02 * s as f64;
    let mut planted_ok = true;
    for r in 1..10 {
        for s in 1..5 {
            let mut cells: Vec<Vec<f64>> = (0..11).map(|i| (0..6).map(|j| base(i, j)).collect()).collect();
            cells[r][s] = base(r, 0).max(base(0, s)) + 0.005;
            let b = find_bump(&grid_from(vec![cells])).unwrap();
            planted_ok &= b.found && b.peak_ratio_idx == Some(r) && b.peak_severity_idx == Some(s);
        }
    }
    let mut fixture: Vec<Vec<f64>> = vec![vec![0.90; 3]; 3];
    fixture[1][1] = 0.91;
    let b = find_bump(&grid_from(vec![fixture])).unwrap();
    planted_ok &= b.found && (b.improvement_vs_pure_cd.unwrap() - 100.0 / 90.0).abs() < 1e-9;

    let mut monotone_ok = true;
    for _ in 0..200 {
        let dr: Vec<f64> = (0..11).map(|_| rng.random_range(0.0..0.02)).collect();
        let ds: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..0.02)).collect();
        let cells: Vec<Vec<f64>> = (0..11)
            .map(|i| (0..6).map(|j| 0.95 - dr[..=i].iter().sum::<f64>() - ds[..=j].iter().sum::<f64>()).collect())
            .collect();
        monotone_ok &= !find_bump(&grid_from(vec![cells])).unwrap().found;
    }
    report(
        10,
        "statistics oracles",
        worst <= 1e-12 && planted_ok && monotone_ok,
        &format!("{compared} correlations, max err {worst:.2e}; planted {planted_ok}; monotone {monotone_ok}"),
    );
}

#[test]
fn c11_joint_grid_budget() {
    let (grid, elapsed) = joint();
    let shape_ok = grid.shape() == (ratio_grid().len(), 6) && grid.seeds == JOINT_SEEDS;
    let means = mean_rows(&grid.mean_delta_rel);
    report(
        11,
        "joint grid budget",
        shape_ok && *elapsed < Duration::from_secs(30 * 60),
        &format!("11x6 x {} seeds in {elapsed:.1?}, column-mean drop {means:.4?}", grid.seeds.len()),
    );
}
