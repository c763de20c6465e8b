//! Oracle versions of the three video tools: phase detection, feasibility
//! prediction and linear measurement. Each reads the study's ground-truth
//! channel and injects seeded, calibrated error.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    CardiacPhase, EchoStudy, FeasibilityVector, Measurement, MeasurementKind, MeasurementSource, Point,
    KIND_COUNT,
};
use crate::rng::{hash_str, substream, Stream};

/// Mean absolute error targets per evaluated kind, in cm.
pub const MEASUREMENT_MAE_TARGETS: [(MeasurementKind, f64); 7] = [
    (MeasurementKind::Ivs, 0.13),
    (MeasurementKind::Lvid, 0.31),
    (MeasurementKind::Lvpw, 0.22),
    (MeasurementKind::La, 0.29),
    (MeasurementKind::Aorta, 0.28),
    (MeasurementKind::AorticRoot, 0.27),
    (MeasurementKind::RvBase, 0.28),
];

/// Frame MAE targets for end-diastole and end-systole.
pub const PHASE_MAE_TARGETS: (f64, f64) = (1.95, 4.25);

/// Micro-averaged precision and recall targets for the feasibility screen.
pub const FEASIBILITY_PRECISION: f64 = 0.84;
pub const FEASIBILITY_RECALL: f64 = 0.87;

/// Nominal caliper canvas when a study has no pixel payload.
const CANVAS: (f64, f64) = (640.0, 480.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VisionError {
    #[error("study has no complete cardiac cycle ({frames} frames, period {period})")]
    NoCycle { frames: u32, period: u32 },
    #[error("frame {frame} is outside [0, {frame_count})")]
    BadFrame { frame: i64, frame_count: u32 },
    #[error("{kind} is not measurable at frame {frame}")]
    NotMeasurable { kind: MeasurementKind, frame: u32 },
    #[error("{0} has no measurement model")]
    UnsupportedKind(MeasurementKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlipRates {
    pub false_negative: f64,
    pub false_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub seed: u64,
    pub phase_sigma_ed: f64,
    pub phase_sigma_es: f64,
    /// Indexed by kind id.
    pub flips: [FlipRates; KIND_COUNT],
    pub measure_sigma: BTreeMap<MeasurementKind, f64>,
}

impl NoiseProfile {
    /// Exact oracles.
    pub fn zero(seed: u64) -> Self {
        Self {
            seed,
            phase_sigma_ed: 0.0,
            phase_sigma_es: 0.0,
            flips: [FlipRates::default(); KIND_COUNT],
            measure_sigma: BTreeMap::new(),
        }
    }

    /// Error levels matched to the published tool results. Flip rates are
    /// solved against the label prevalence of `split`.
    pub fn calibrated(seed: u64, split: &[FeasibilityVector]) -> Self {
        Self {
            seed,
            phase_sigma_ed: phase_sigma_for_mae(PHASE_MAE_TARGETS.0),
            phase_sigma_es: phase_sigma_for_mae(PHASE_MAE_TARGETS.1),
            flips: flip_rates_for(split, FEASIBILITY_PRECISION, FEASIBILITY_RECALL),
            measure_sigma: MEASUREMENT_MAE_TARGETS
                .iter()
                .map(|(k, mae)| (*k, measurement_sigma_for_mae(*mae)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.phase_sigma_ed) || !ok(self.phase_sigma_es) || !self.measure_sigma.values().all(|s| ok(*s)) {
            return Err("noise deviations must be finite and non-negative".into());
        }
        let rate = |x: f64| (0.0..=1.0).contains(&x);
        if !self.flips.iter().all(|f| rate(f.false_negative) && rate(f.false_positive)) {
            return Err("flip rates must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn phase_sigma(&self, phase: CardiacPhase) -> f64 {
        match phase {
            CardiacPhase::EndDiastole => self.phase_sigma_ed,
            CardiacPhase::EndSystole => self.phase_sigma_es,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.phase_sigma_ed == 0.0
            && self.phase_sigma_es == 0.0
            && self.flips.iter().all(|f| *f == FlipRates::default())
            && self.measure_sigma.values().all(|s| *s == 0.0)
    }
}

fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    }
}

fn check_frame(study: &EchoStudy, frame: i64) -> Result<u32, VisionError> {
    if frame < 0 || frame >= study.frame_count as i64 {
        Err(VisionError::BadFrame { frame, frame_count: study.frame_count })
    } else {
        Ok(frame as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub ed_frames: Vec<u32>,
    pub es_frames: Vec<u32>,
}

impl PhaseResult {
    pub fn frames(&self, phase: CardiacPhase) -> &[u32] {
        match phase {
            CardiacPhase::EndDiastole => &self.ed_frames,
            CardiacPhase::EndSystole => &self.es_frames,
        }
    }
}

/// The integer shift applied to one ground-truth phase frame.
pub fn phase_shift(study_id: &str, noise: &NoiseProfile, phase: CardiacPhase, gt_frame: u32) -> i64 {
    let sigma = noise.phase_sigma(phase);
    if sigma == 0.0 {
        return 0;
    }
    let mut rng = substream(noise.seed, Stream::Phase, &[hash_str(study_id), phase as u64, gt_frame as u64]);
    libm::round(gaussian(&mut rng, sigma)) as i64
}

pub fn detect_phases(study: &EchoStudy, noise: &NoiseProfile) -> Result<PhaseResult, VisionError> {
    let period = study.cycle.period_frames;
    if study.frame_count < 2 || study.frame_count < period || period == 0 {
        return Err(VisionError::NoCycle { frames: study.frame_count, period });
    }
    let last = study.frame_count as i64 - 1;
    let predict = |phase| {
        let mut out: Vec<u32> = study
            .phase_frames(phase)
            .into_iter()
            .map(|g| (g as i64 + phase_shift(&study.study_id, noise, phase, g)).clamp(0, last) as u32)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    };
    Ok(PhaseResult { ed_frames: predict(CardiacPhase::EndDiastole), es_frames: predict(CardiacPhase::EndSystole) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityResult {
    pub frame: u32,
    pub predicted: FeasibilityVector,
    /// Probability of "measurable" per kind id.
    pub confidence: [f64; KIND_COUNT],
}

pub fn predict_feasibility(study: &EchoStudy, frame: i64, noise: &NoiseProfile) -> Result<FeasibilityResult, VisionError> {
    let frame = check_frame(study, frame)?;
    let truth = study.feasibility_at(frame);
    let mut rng = substream(noise.seed, Stream::Feasibility, &[hash_str(&study.study_id), frame as u64]);
    let mut predicted = FeasibilityVector::EMPTY;
    let mut confidence = [0.0; KIND_COUNT];
    for kind in MeasurementKind::ALL {
        let rates = noise.flips[kind.id()];
        let u: f64 = rng.random();
        let on = if truth.get(kind) { u >= rates.false_negative } else { u < rates.false_positive };
        predicted = predicted.with(kind, on);
        confidence[kind.id()] = if on { 1.0 - rates.false_positive / 2.0 } else { rates.false_negative / 2.0 };
    }
    Ok(FeasibilityResult { frame, predicted, confidence })
}

pub fn measurement_noise(study_id: &str, noise: &NoiseProfile, frame: u32, kind: MeasurementKind) -> f64 {
    let sigma = noise.measure_sigma.get(&kind).copied().unwrap_or(0.0);
    if sigma == 0.0 {
        return 0.0;
    }
    let mut rng = substream(noise.seed, Stream::Measure, &[hash_str(study_id), frame as u64, kind.id() as u64]);
    gaussian(&mut rng, sigma)
}

pub fn measure(study: &EchoStudy, frame: i64, kind: MeasurementKind, noise: &NoiseProfile) -> Result<Measurement, VisionError> {
    let frame = check_frame(study, frame)?;
    let truth = study.true_value(kind, frame).ok_or(VisionError::UnsupportedKind(kind))?;
    if !study.feasibility_at(frame).get(kind) {
        return Err(VisionError::NotMeasurable { kind, frame });
    }
    let value_cm = (truth + measurement_noise(&study.study_id, noise, frame, kind)).max(0.0);
    let (w, h) = study.pixels.as_ref().map_or(CANVAS, |p| (p.width as f64, p.height as f64));
    let len_px = value_cm / study.pixel_scale;
    let top = ((h - len_px) / 2.0).max(0.0);
    let x = libm::floor(w / 2.0);
    Ok(Measurement {
        kind,
        frame,
        endpoints: Some([Point::new(x, top), Point::new(x, top + len_px)]),
        value_cm,
        source: MeasurementSource::Oracle,
    })
}

/// Mean of `|round(N(0, σ))|`, i.e. `Σ_{k≥1} P(|K| ≥ k)`.
pub fn discretized_mae(sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut k = 1.0;
    loop {
        let term = libm::erfc((k - 0.5) / (sigma * core::f64::consts::SQRT_2));
        total += term;
        if term < 1e-15 {
            return total;
        }
        k += 1.0;
    }
}

/// Inverts [`discretized_mae`] by bisection.
pub fn phase_sigma_for_mae(target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while discretized_mae(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if discretized_mae(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) / 2.0
}

/// The folded normal has mean `σ·√(2/π)`.
pub fn measurement_sigma_for_mae(mae: f64) -> f64 {
    mae * libm::sqrt(core::f64::consts::FRAC_PI_2)
}

/// Per-kind flip rates giving the requested precision and recall in
/// expectation on `split`: recall fixes the miss rate, and precision
/// `TP/(TP+FP)` with `TP = r·π·N`, `FP = fpr·(1−π)·N` fixes the false-alarm rate.
pub fn flip_rates_for(split: &[FeasibilityVector], precision: f64, recall: f64) -> [FlipRates; KIND_COUNT] {
    let n = split.len().max(1) as f64;
    let mut out = [FlipRates::default(); KIND_COUNT];
    for kind in MeasurementKind::ALL {
        let pi = split.iter().filter(|y| y.get(kind)).count() as f64 / n;
        let fpr = if pi > 0.0 && pi < 1.0 {
            (pi * recall * (1.0 - precision) / (precision * (1.0 - pi))).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out[kind.id()] = FlipRates { false_negative: 1.0 - recall, false_positive: fpr };
    }
    out
}

/// Ground-truth ED/ES frames that carry at least one measurable kind: the
/// population the feasibility screen is scored on.
pub fn phase_frame_labels(study: &EchoStudy) -> Vec<(u32, FeasibilityVector)> {
    let mut frames: Vec<u32> = CardiacPhase::BOTH.iter().flat_map(|p| study.phase_frames(*p)).collect();
    frames.sort_unstable();
    frames
        .into_iter()
        .map(|f| (f, study.feasibility_at(f)))
        .filter(|(_, y)| !y.is_empty())
        .collect()
}
