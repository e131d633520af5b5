//! Severity-controlled image corruptions.
//!
//! Each kind has a 6-entry level table (level 0 is the identity) and, except
//! for box blur, a continuous knob `t ∈ [0, 1]` that interpolates from the
//! identity to the level-5 strength. For occlusion the knob is the covered
//! area fraction.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{Federation, FederationConfig};
use crate::nn::ModelParams;
use crate::rng::{mix, StreamKey};
use crate::tasks::{Image, Sample, TaskDataset};

pub const MAX_LEVEL: u8 = 5;

const NOISE_SIGMA: [f64; 6] = [0.0, 0.05, 0.10, 0.18, 0.26, 0.38];
const BRIGHTNESS_SHIFT: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
const CONTRAST_SCALE: [f64; 6] = [1.0, 0.75, 0.6, 0.45, 0.3, 0.2];
const BLUR_KERNEL: [usize; 6] = [1, 3, 3, 5, 5, 7];
const BLUR_PASSES: [usize; 6] = [1, 1, 2, 2, 3, 3];
/// Occluder intensity; overlays are dark patches.
const OCCLUDER_FILL: f64 = 0.0;

const KIND_TAG: u64 = 0x4B49_4E44;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Brightness,
    Contrast,
    BoxBlur,
    OcclusionOverlay,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::BoxBlur,
        CorruptionKind::OcclusionOverlay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::OcclusionOverlay => "occlusion_overlay",
        }
    }

    pub fn has_continuous_knob(self) -> bool {
        self != CorruptionKind::BoxBlur
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Severity {
    Level(u8),
    /// Normalized strength in `[0, 1]`; the covered area for occlusion.
    Continuous(f64),
}

impl Severity {
    pub fn is_identity(self) -> bool {
        match self {
            Severity::Level(l) => l == 0,
            Severity::Continuous(t) => t == 0.0,
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Severity::Level(l) if l > MAX_LEVEL => Err(Error::InvalidConfig(format!(
                "severity level {l} exceeds {MAX_LEVEL}"
            ))),
            Severity::Continuous(t) if !(0.0..=1.0).contains(&t) => Err(Error::InvalidConfig(
                format!("continuous severity must be in [0, 1], got {t}"),
            )),
            _ => Ok(()),
        }
    }
}

/// One corruption kind at one strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: Severity,
    /// Overlay blend weight; only used by occlusion.
    pub opacity: f64,
    pub rng_salt: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRepr {
    kind: CorruptionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coverage: Option<f64>,
    #[serde(default = "default_opacity")]
    opacity: f64,
    #[serde(default)]
    salt: u64,
}

fn default_opacity() -> f64 {
    1.0
}

impl TryFrom<SpecRepr> for CorruptionSpec {
    type Error = Error;

    fn try_from(r: SpecRepr) -> Result<Self> {
        let severity = match (r.level, r.coverage) {
            (Some(l), None) => Severity::Level(l),
            (None, Some(c)) => Severity::Continuous(c),
            _ => {
                return Err(Error::InvalidConfig(
                    "corruption needs exactly one of `level` or `coverage`".into(),
                ))
            }
        };
        let spec = CorruptionSpec {
            kind: r.kind,
            severity,
            opacity: r.opacity,
            rng_salt: r.salt,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<CorruptionSpec> for SpecRepr {
    fn from(s: CorruptionSpec) -> Self {
        let (level, coverage) = match s.severity {
            Severity::Level(l) => (Some(l), None),
            Severity::Continuous(c) => (None, Some(c)),
        };
        SpecRepr {
            kind: s.kind,
            level,
            coverage,
            opacity: s.opacity,
            salt: s.rng_salt,
        }
    }
}

impl CorruptionSpec {
    pub fn level(kind: CorruptionKind, level: u8) -> Self {
        CorruptionSpec {
            kind,
            severity: Severity::Level(level),
            opacity: 1.0,
            rng_salt: 0,
        }
    }

    pub fn continuous(kind: CorruptionKind, t: f64) -> Self {
        CorruptionSpec {
            kind,
            severity: Severity::Continuous(t),
            opacity: 1.0,
            rng_salt: 0,
        }
    }

    pub fn with_salt(mut self, salt: u64) -> Self {
        self.rng_salt = salt;
        self
    }

    pub fn with_opacity(mut self, opacity: f64) -> Self {
        self.opacity = opacity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.severity.validate()?;
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidConfig(format!(
                "opacity must be in [0, 1], got {}",
                self.opacity
            )));
        }
        if self.kind == CorruptionKind::BoxBlur && matches!(self.severity, Severity::Continuous(_)) {
            return Err(Error::InvalidConfig(
                "box_blur only supports discrete levels".into(),
            ));
        }
        Ok(())
    }

    /// Value of the kind's level table at this severity, linear between the
    /// identity and level 5 for continuous severities.
    fn strength(&self, table: &[f64; 6]) -> f64 {
        match self.severity {
            Severity::Level(l) => table[l as usize],
            Severity::Continuous(t) => table[0] + t * (table[5] - table[0]),
        }
    }
}

/// Corrupts one image; deterministic in `(image, spec, sample_seed)`.
pub fn apply_corruption(image: &Image, spec: &CorruptionSpec, sample_seed: u64) -> Result<Image> {
    spec.validate()?;
    if !image.in_unit_range() {
        return Err(Error::InvalidInput("pixels must lie in [0, 1]".into()));
    }
    if spec.severity.is_identity() {
        return Ok(image.clone());
    }
    let mut rng = StreamKey(mix(&[spec.rng_salt, sample_seed])).rng();
    let mut out = image.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = spec.strength(&NOISE_SIGMA);
            for p in &mut out.pixels {
                let z: f64 = rng.sample(StandardNormal);
                *p += sigma * z;
            }
        }
        CorruptionKind::Brightness => {
            let shift = spec.strength(&BRIGHTNESS_SHIFT);
            out.pixels.iter_mut().for_each(|p| *p += shift);
        }
        CorruptionKind::Contrast => {
            let scale = spec.strength(&CONTRAST_SCALE);
            out.pixels.iter_mut().for_each(|p| *p = 0.5 + (*p - 0.5) * scale);
        }
        CorruptionKind::BoxBlur => {
            let Severity::Level(l) = spec.severity else {
                unreachable!("validated above")
            };
            for _ in 0..BLUR_PASSES[l as usize] {
                out = box_blur(&out, BLUR_KERNEL[l as usize]);
            }
        }
        CorruptionKind::OcclusionOverlay => {
            let coverage = match spec.severity {
                Severity::Level(l) => f64::from(l) / f64::from(MAX_LEVEL),
                Severity::Continuous(c) => c,
            };
            occlude(&mut out, coverage, spec.opacity, &mut rng);
        }
    }
    out.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(out)
}

/// Mean over the in-bounds part of a `k x k` window.
fn box_blur(image: &Image, k: usize) -> Image {
    let r = (k / 2) as isize;
    let (h, w) = (image.height as isize, image.width as isize);
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let (mut sum, mut count) = (0.0, 0usize);
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    sum += image.pixels[(yy * w + xx) as usize];
                    count += 1;
                }
            }
            pixels.push(sum / count as f64);
        }
    }
    Image {
        height: image.height,
        width: image.width,
        pixels,
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Blends a dark rectangle of area `coverage` (image fraction) at a seeded
/// position and aspect ratio. Edge pixels are blended by their fractional
/// overlap so the transform is continuous in `coverage`.
fn occlude(image: &mut Image, coverage: f64, opacity: f64, rng: &mut impl Rng) {
    let aspect = rng.random_range(-1.0f64..=1.0).exp2();
    let mut rh = (coverage * aspect).sqrt();
    let mut rw = (coverage / aspect).sqrt();
    if rh > 1.0 {
        rh = 1.0;
        rw = coverage;
    } else if rw > 1.0 {
        rw = 1.0;
        rh = coverage;
    }
    let top = rng.random_range(0.0..=1.0) * (1.0 - rh);
    let left = rng.random_range(0.0..=1.0) * (1.0 - rw);
    let (h, w) = (image.height as f64, image.width as f64);
    for r in 0..image.height {
        let fy = overlap(r as f64 / h, (r + 1) as f64 / h, top, top + rh) * h;
        if fy == 0.0 {
            continue;
        }
        for c in 0..image.width {
            let fx = overlap(c as f64 / w, (c + 1) as f64 / w, left, left + rw) * w;
            let a = opacity * fy * fx;
            let p = &mut image.pixels[r * image.width + c];
            *p = *p * (1.0 - a) + OCCLUDER_FILL * a;
        }
    }
}

/// Corruption applied to the shifted part of a federation.
///
/// With several kinds configured, each sample gets one kind: either fixed per
/// client (`per_client_kind`) or drawn uniformly from the sample's seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftCorruption {
    pub kinds: Vec<CorruptionKind>,
    pub opacity: f64,
    pub salt: u64,
    pub per_client_kind: bool,
}

impl ShiftCorruption {
    pub fn single(kind: CorruptionKind) -> Self {
        ShiftCorruption {
            kinds: vec![kind],
            opacity: 1.0,
            salt: 0,
            per_client_kind: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::InvalidConfig("at least one corruption kind is required".into()));
        }
        Ok(())
    }

    pub fn kind_for(&self, client_id: usize, sample_id: u64) -> CorruptionKind {
        let n = self.kinds.len() as u64;
        let idx = if n == 1 {
            0
        } else if self.per_client_kind {
            client_id as u64 % n
        } else {
            mix(&[self.salt, sample_id, KIND_TAG]) % n
        };
        self.kinds[idx as usize]
    }

    pub fn spec_for(&self, severity: Severity, client_id: usize, sample_id: u64) -> CorruptionSpec {
        CorruptionSpec {
            kind: self.kind_for(client_id, sample_id),
            severity,
            opacity: self.opacity,
            rng_salt: self.salt,
        }
    }
}

/// Applies `spec` to a whole dataset view, keyed by sample id.
pub fn corrupted_view<'a>(spec: &'a CorruptionSpec) -> impl Fn(&'a Sample) -> Result<Cow<'a, Image>> + 'a {
    move |s: &'a Sample| {
        if spec.severity.is_identity() {
            Ok(Cow::Borrowed(&s.image))
        } else {
            apply_corruption(&s.image, spec, s.id).map(Cow::Owned)
        }
    }
}

/// Relative metric drop of `model` on `test` when every test image is corrupted.
pub fn measured_drop(model: &ModelParams, test: &TaskDataset, clean: f64, spec: &CorruptionSpec) -> Result<f64> {
    let corrupted = test.evaluate_with(model, corrupted_view(spec))?;
    Ok((clean - corrupted) / clean)
}

pub const CALIBRATION_MAX_ITERS: usize = 30;

/// Bisects the continuous knob of `kind` until the measured relative drop on
/// corrupted test data is within `tol` of `target_rel_drop`.
pub fn calibrate_transform(
    model: &ModelParams,
    test: &TaskDataset,
    kind: CorruptionKind,
    target_rel_drop: f64,
    tol: f64,
    salt: u64,
) -> Result<CorruptionSpec> {
    if !kind.has_continuous_knob() {
        return Err(Error::InvalidConfig(format!("{kind} has no continuous severity")));
    }
    if !(0.0..1.0).contains(&target_rel_drop) || tol.is_nan() || tol < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "target drop must be in [0, 1) and tol >= 0, got {target_rel_drop} ± {tol}"
        )));
    }
    let spec_at = |t: f64| CorruptionSpec::continuous(kind, t).with_salt(salt);
    if target_rel_drop == 0.0 {
        return Ok(spec_at(0.0));
    }
    let clean = test.evaluate(model)?;
    if clean <= 0.0 {
        return Err(Error::InvalidInput("model scores zero on clean test data".into()));
    }
    let max_drop = measured_drop(model, test, clean, &spec_at(1.0))?;
    if max_drop < target_rel_drop - tol {
        return Err(Error::CalibrationInfeasible {
            reason: format!("{kind} at full strength stays below target {target_rel_drop}"),
            max_drop,
        });
    }
    if (max_drop - target_rel_drop).abs() <= tol {
        return Ok(spec_at(1.0));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = (f64::INFINITY, 1.0);
    for _ in 0..CALIBRATION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let drop = measured_drop(model, test, clean, &spec_at(mid))?;
        let miss = (drop - target_rel_drop).abs();
        if miss < best.0 {
            best = (miss, mid);
        }
        if miss <= tol {
            return Ok(spec_at(mid));
        }
        if drop < target_rel_drop {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::CalibrationInfeasible {
        reason: format!(
            "no severity within {CALIBRATION_MAX_ITERS} bisection steps hit {target_rel_drop} ± {tol} (closest knob {:.6})",
            best.1
        ),
        max_drop,
    })
}

/// Outcome of [`cf_feasibility_check`]; metrics are measured on the clean
/// and the transformed test split before and after shift training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub clean_before: f64,
    pub transformed_before: f64,
    pub clean_after: f64,
    pub transformed_after: f64,
    /// Relative clean-test drop caused by the shift training.
    pub drop_after_retrain: f64,
    pub order_switched: bool,
    pub passes: bool,
}

pub const FEASIBILITY_MIN_DROP: f64 = 0.05;

/// Pretrains a clean federation for `rounds_cd` rounds, then keeps training
/// for another `rounds_cd` rounds with every client on `transform`.
pub fn cf_feasibility_check(
    cfg: &FederationConfig,
    transform: &CorruptionSpec,
    seed: u64,
) -> Result<FeasibilityReport> {
    transform.validate()?;
    let mut cfg = cfg.clone();
    cfg.shift = ShiftCorruption {
        kinds: vec![transform.kind],
        opacity: transform.opacity,
        salt: transform.rng_salt,
        per_client_kind: false,
    };
    let data = cfg.task.generate()?;
    let fed = Federation::new(cfg, data, seed)?;
    let key = fed.key().child("feasibility", 0);
    let rounds = fed.config().rounds_cd;
    let init = fed.init_model()?;
    let (pretrained, _) = fed.run(&fed.plan(0.0, Severity::Level(0))?, rounds, &init, key.child("clean", 0))?;
    let (shifted, _) = fed.run(&fed.plan(1.0, transform.severity)?, rounds, &pretrained, key.child("shifted", 0))?;
    let test = &fed.data().test;
    let clean_before = test.evaluate(&pretrained)?;
    let transformed_before = test.evaluate_with(&pretrained, corrupted_view(transform))?;
    let clean_after = test.evaluate(&shifted)?;
    let transformed_after = test.evaluate_with(&shifted, corrupted_view(transform))?;
    let drop_after_retrain = if clean_before > 0.0 {
        (clean_before - clean_after) / clean_before
    } else {
        0.0
    };
    let order_switched = clean_before > transformed_before && transformed_after > clean_after;
    Ok(FeasibilityReport {
        clean_before,
        transformed_before,
        clean_after,
        transformed_after,
        drop_after_retrain,
        order_switched,
        passes: drop_after_retrain >= FEASIBILITY_MIN_DROP && order_switched,
    })
}
