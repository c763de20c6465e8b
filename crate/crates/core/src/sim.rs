//! Synthetic echo studies with an analytic ground truth, and benchmark cases
//! generated from them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    CardiacPhase, CycleParams, DegradedWindow, EchoStudy, EchoView, FeasibilityVector, KindFamily,
    MeasurementKind, PhaseValues, PixelRef, QualityFlags, SchemaTag,
};
use crate::guidelines::reference_range;
use crate::quantity::{round_to, Unit};
use crate::rng::{substream, SimRng, Stream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("{kind} is not feasible in study {study_id}")]
    NotFeasible { study_id: String, kind: MeasurementKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut SimRng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn valid(&self) -> bool {
        self.lo > 0.0 && self.lo <= self.hi && self.hi.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindRange {
    pub ed_cm: ValueRange,
    pub es_cm: ValueRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub studies: usize,
    pub view_weights: BTreeMap<EchoView, f64>,
    pub values: BTreeMap<MeasurementKind, KindRange>,
    /// Inclusive range; only even periods are drawn.
    pub period_frames: (u32, u32),
    /// Clip length in cardiac cycles.
    pub cycles: (f64, f64),
    pub frame_rate: f64,
    pub pixel_scale: ValueRange,
    /// Probability a supported kind is invisible for the whole clip.
    pub visibility_dropout: f64,
    /// Per-kind probability of one randomly placed degraded window.
    pub degradation: BTreeMap<MeasurementKind, f64>,
    /// Probability that a window hides a cavity kind around its first ED or ES frame.
    pub trap_probability: f64,
    pub pixels: bool,
    pub pixel_size: (u32, u32),
}

impl Default for SimConfig {
    fn default() -> Self {
        use MeasurementKind::*;
        let r = |a, b, c, d| KindRange { ed_cm: ValueRange::new(a, b), es_cm: ValueRange::new(c, d) };
        let values = BTreeMap::from([
            (Ivs, r(0.7, 1.4, 1.45, 1.9)),
            (Lvid, r(3.9, 6.2, 2.3, 3.8)),
            (Lvpw, r(0.7, 1.3, 1.35, 1.8)),
            (La, r(2.9, 4.6, 2.3, 2.85)),
            (Aorta, r(2.2, 3.9, 2.3, 4.0)),
            (AorticRoot, r(2.6, 4.0, 2.7, 4.1)),
            (RvBase, r(2.6, 4.6, 1.8, 2.55)),
        ]);
        let view_weights = EchoView::ALL
            .iter()
            .map(|v| {
                let w = match v {
                    EchoView::Plax => 4.0,
                    EchoView::A4c => 2.0,
                    EchoView::PsaxAv | EchoView::PsaxMv | EchoView::PsaxPm => 1.0,
                    EchoView::PlaxZoom | EchoView::Subcostal4c => 0.75,
                    _ => 0.25,
                };
                (*v, w)
            })
            .collect();
        Self {
            seed: 7,
            studies: 120,
            view_weights,
            values,
            period_frames: (24, 40),
            cycles: (2.2, 3.0),
            frame_rate: 50.0,
            pixel_scale: ValueRange::new(0.035, 0.06),
            visibility_dropout: 0.05,
            degradation: MeasurementKind::ALL.iter().map(|k| (*k, 0.1)).collect(),
            trap_probability: 0.3,
            pixels: false,
            pixel_size: (160, 200),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Config(m));
        for (name, p) in [("visibility_dropout", self.visibility_dropout), ("trap_probability", self.trap_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} {p} outside [0, 1]"));
            }
        }
        for (k, p) in &self.degradation {
            if !(0.0..=1.0).contains(p) {
                return err(format!("degradation probability for {k} outside [0, 1]"));
            }
        }
        let (lo, hi) = self.period_frames;
        if lo < 4 || lo > hi || (lo == hi && lo % 2 == 1) {
            return err(format!("period range ({lo}, {hi}) must hold an even period >= 4"));
        }
        if !(self.cycles.0 >= 1.0 && self.cycles.0 <= self.cycles.1) {
            return err(format!("cycle range {:?} must start at >= 1", self.cycles));
        }
        if !(self.frame_rate > 0.0) || !self.pixel_scale.valid() {
            return err("frame rate and pixel scale must be positive".into());
        }
        if self.view_weights.values().any(|w| !(*w >= 0.0)) || self.view_weights.values().sum::<f64>() <= 0.0 {
            return err("view weights must be non-negative with a positive sum".into());
        }
        for kind in MeasurementKind::EVALUATED {
            let Some(r) = self.values.get(&kind) else {
                return err(format!("missing value range for {kind}"));
            };
            if !r.ed_cm.valid() || !r.es_cm.valid() {
                return err(format!("value ranges for {kind} must be non-empty and positive"));
            }
            match kind.family() {
                KindFamily::Cavity if r.ed_cm.lo < r.es_cm.hi => {
                    return err(format!("{kind}: ed range must lie above es range (ed >= es)"))
                }
                KindFamily::Wall if r.es_cm.lo < r.ed_cm.hi => {
                    return err(format!("{kind}: es range must lie above ed range (es >= ed)"))
                }
                _ => {}
            }
        }
        if self.pixels && (self.pixel_size.0 == 0 || self.pixel_size.1 == 0) {
            return err("pixel size must be non-zero".into());
        }
        Ok(())
    }
}

pub fn study_id(index: u64) -> String {
    format!("study-{index:05}")
}

/// Everything an oracle may know about a study, derived from its ground-truth channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub study_id: String,
    pub ed_frames: Vec<u32>,
    pub es_frames: Vec<u32>,
    pub values: BTreeMap<MeasurementKind, PhaseValues>,
    pub feasibility: Vec<FeasibilityVector>,
}

impl GroundTruth {
    pub fn from_study(study: &EchoStudy) -> Self {
        Self {
            study_id: study.study_id.clone(),
            ed_frames: study.phase_frames(CardiacPhase::EndDiastole),
            es_frames: study.phase_frames(CardiacPhase::EndSystole),
            values: study.cycle.values.clone(),
            feasibility: (0..study.frame_count).map(|f| study.feasibility_at(f)).collect(),
        }
    }

    pub fn phase_frames(&self, phase: CardiacPhase) -> &[u32] {
        match phase {
            CardiacPhase::EndDiastole => &self.ed_frames,
            CardiacPhase::EndSystole => &self.es_frames,
        }
    }

    pub fn is_feasible_anywhere(&self, kind: MeasurementKind) -> bool {
        self.feasibility.iter().any(|y| y.get(kind))
    }

    /// Whether some frame at `phase` supports measuring `kind`.
    pub fn askable(&self, kind: MeasurementKind, phase: CardiacPhase) -> bool {
        self.phase_frames(phase).iter().any(|f| self.feasibility[*f as usize].get(kind))
    }

    /// Askable, but not on the first frame of that phase.
    pub fn is_trap(&self, kind: MeasurementKind, phase: CardiacPhase) -> bool {
        let frames = self.phase_frames(phase);
        self.askable(kind, phase) && frames.first().is_some_and(|f| !self.feasibility[*f as usize].get(kind))
    }

    /// The configured per-phase value of a kind.
    pub fn measurement(&self, kind: MeasurementKind, phase: CardiacPhase) -> Result<f64, SimError> {
        match self.values.get(&kind) {
            Some(v) if self.is_feasible_anywhere(kind) => Ok(v.at(phase)),
            _ => Err(SimError::NotFeasible { study_id: self.study_id.clone(), kind }),
        }
    }
}

fn pick_weighted<T: Copy>(rng: &mut SimRng, items: &[(T, f64)]) -> T {
    let total: f64 = items.iter().map(|(_, w)| *w).sum();
    let mut x = rng.random_range(0.0..total);
    for (item, w) in items {
        if x < *w {
            return *item;
        }
        x -= *w;
    }
    items[items.len() - 1].0
}

/// Builds one study. Pure in `(config.seed, index)`.
pub fn generate_study(config: &SimConfig, index: u64) -> Result<(EchoStudy, GroundTruth), SimError> {
    config.validate()?;
    let mut rng = substream(config.seed, Stream::Study, &[index]);
    let views: Vec<(EchoView, f64)> =
        config.view_weights.iter().filter(|(_, w)| **w > 0.0).map(|(v, w)| (*v, *w)).collect();
    let view = pick_weighted(&mut rng, &views);

    let (plo, phi) = config.period_frames;
    let evens: Vec<u32> = (plo..=phi).filter(|p| p % 2 == 0).collect();
    let period = evens[rng.random_range(0..evens.len())];
    let offset = rng.random_range(0..period);
    let cycles = if config.cycles.1 > config.cycles.0 {
        rng.random_range(config.cycles.0..=config.cycles.1)
    } else {
        config.cycles.0
    };
    let frame_count = libm::ceil(cycles * period as f64) as u32;
    let pixel_scale = round_to(config.pixel_scale.sample(&mut rng), 5);

    let mut values = BTreeMap::new();
    for kind in MeasurementKind::EVALUATED {
        let r = config.values[&kind];
        let ed = round_to(r.ed_cm.sample(&mut rng), 2);
        let es = round_to(r.es_cm.sample(&mut rng), 2);
        values.insert(kind, PhaseValues { ed_cm: ed, es_cm: es });
    }
    let cycle = CycleParams { period_frames: period, phase_offset_frames: offset, values };

    let supported = view.supported_kinds();
    let mut visible = FeasibilityVector::FULL;
    for kind in supported.kinds() {
        if rng.random_bool(config.visibility_dropout) {
            visible = visible.with(kind, false);
        }
    }
    let mut degraded = Vec::new();
    for kind in supported.and(visible).kinds() {
        let p = config.degradation.get(&kind).copied().unwrap_or(0.0);
        if rng.random_bool(p) {
            let len = rng.random_range((period / 6).max(1)..=(period / 2).max(1));
            let start = rng.random_range(0..frame_count.saturating_sub(len).max(1));
            degraded.push(DegradedWindow { kind, start, end: (start + len).min(frame_count) });
        }
    }
    if rng.random_bool(config.trap_probability) {
        let cavities: Vec<MeasurementKind> = supported
            .and(visible)
            .kinds()
            .filter(|k| k.family() == KindFamily::Cavity)
            .collect();
        if !cavities.is_empty() {
            let kind = cavities[rng.random_range(0..cavities.len())];
            let phase = if rng.random_bool(0.5) { CardiacPhase::EndDiastole } else { CardiacPhase::EndSystole };
            let first = cycle.phase_frames(phase, frame_count)[0];
            let half = period / 4;
            degraded.push(DegradedWindow {
                kind,
                start: first.saturating_sub(half),
                end: (first + half + 1).min(frame_count),
            });
        }
    }

    let id = study_id(index);
    let pixels = config.pixels.then(|| PixelRef {
        path: format!("{id}.raw"),
        width: config.pixel_size.0,
        height: config.pixel_size.1,
    });
    let study = EchoStudy {
        schema: SchemaTag,
        study_id: id,
        view,
        frame_count,
        frame_rate: config.frame_rate,
        pixel_scale,
        cycle,
        quality: QualityFlags { visible, degraded },
        pixels,
    };
    let truth = GroundTruth::from_study(&study);
    Ok((study, truth))
}

/// Generates `config.studies` studies in index order.
pub fn generate_dataset(config: &SimConfig) -> Result<Vec<(EchoStudy, GroundTruth)>, SimError> {
    (0..config.studies as u64).map(|i| generate_study(config, i)).collect()
}

/// Schematic grayscale frames (`T × H × W`, row-major): septum, cavity and
/// posterior wall drawn as horizontal bands whose heights follow the ground truth.
pub fn render_frames(study: &EchoStudy) -> Option<Vec<u8>> {
    let px = study.pixels.as_ref()?;
    let (w, h) = (px.width as usize, px.height as usize);
    let mut out = vec![12u8; study.frame_count as usize * w * h];
    let to_px = |cm: f64| (cm / study.pixel_scale) as usize;
    for f in 0..study.frame_count {
        let frame = &mut out[f as usize * w * h..(f as usize + 1) * w * h];
        let ivs = to_px(study.true_value(MeasurementKind::Ivs, f).unwrap_or(1.0));
        let lvid = to_px(study.true_value(MeasurementKind::Lvid, f).unwrap_or(4.5));
        let lvpw = to_px(study.true_value(MeasurementKind::Lvpw, f).unwrap_or(1.0));
        let bands = [(ivs, 190u8), (lvid, 28u8), (lvpw, 210u8)];
        let mut y = h / 10;
        for (height, shade) in bands {
            for row in y..(y + height).min(h) {
                frame[row * w + w / 8..row * w + w - w / 8].fill(shade);
            }
            y += height;
        }
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Difficult,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Self::Easy, Self::Medium, Self::Difficult];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Medium => "medium",
            Self::Difficult => "difficult",
        }
    }
}

/// What a benchmark question asks for. Questions are rendered from and parsed
/// back into this type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    Single { kind: MeasurementKind, phase: CardiacPhase },
    Multiple { items: Vec<(MeasurementKind, CardiacPhase)> },
    RelativeWallThickness,
    LaAortaRatio,
    Classify { kind: MeasurementKind, phase: CardiacPhase },
}

fn item_label(kind: MeasurementKind) -> String {
    match kind.family() {
        KindFamily::Wall => format!("{} thickness", kind.name()),
        KindFamily::Vessel | KindFamily::Cavity if kind == MeasurementKind::Lvid => kind.name().to_string(),
        KindFamily::Vessel | KindFamily::Cavity if kind == MeasurementKind::RvBase => format!("{} dimension", kind.name()),
        _ => format!("{} diameter", kind.name()),
    }
}

fn item_text(kind: MeasurementKind, phase: CardiacPhase) -> String {
    format!("{} at {}", item_label(kind), phase.long_name())
}

fn parse_item(text: &str) -> Option<(MeasurementKind, CardiacPhase)> {
    MeasurementKind::EVALUATED
        .iter()
        .flat_map(|k| CardiacPhase::BOTH.iter().map(move |p| (*k, *p)))
        .find(|(k, p)| item_text(*k, *p) == text)
}

const MULTI_PREFIX: &str = "Report the following measurements: ";
const RWT_QUESTION: &str =
    "Calculate the relative wall thickness (RWT) from the end-diastolic LVPW and LVID.";
const LA_AO_QUESTION: &str = "Calculate the LA/Aorta ratio at end-systole.";
const CLASSIFY_PREFIX: &str = "According to guideline reference ranges, is the ";
const CLASSIFY_SUFFIX: &str = " normal, increased, or reduced?";

impl Task {
    pub fn difficulty(&self) -> Difficulty {
        match self {
            Task::Single { .. } => Difficulty::Easy,
            Task::Multiple { .. } => Difficulty::Medium,
            _ => Difficulty::Difficult,
        }
    }

    pub fn question(&self) -> String {
        match self {
            Task::Single { kind, phase } => format!("What is the {}?", item_text(*kind, *phase)),
            Task::Multiple { items } => {
                let parts: Vec<String> = items.iter().map(|(k, p)| item_text(*k, *p)).collect();
                format!("{MULTI_PREFIX}{}.", parts.join("; "))
            }
            Task::RelativeWallThickness => RWT_QUESTION.to_string(),
            Task::LaAortaRatio => LA_AO_QUESTION.to_string(),
            Task::Classify { kind, phase } => {
                format!("{CLASSIFY_PREFIX}{}{CLASSIFY_SUFFIX}", item_text(*kind, *phase))
            }
        }
    }

    /// Inverse of [`Task::question`]; trailing context after a blank line is ignored.
    pub fn parse(question: &str) -> Option<Task> {
        let q = question.trim();
        if q == RWT_QUESTION {
            return Some(Task::RelativeWallThickness);
        }
        if q == LA_AO_QUESTION {
            return Some(Task::LaAortaRatio);
        }
        if let Some(rest) = q.strip_prefix("What is the ").and_then(|r| r.strip_suffix('?')) {
            let (kind, phase) = parse_item(rest)?;
            return Some(Task::Single { kind, phase });
        }
        if let Some(rest) = q.strip_prefix(MULTI_PREFIX).and_then(|r| r.strip_suffix('.')) {
            let items: Option<Vec<_>> = rest.split("; ").map(parse_item).collect();
            return items.filter(|i| i.len() >= 2).map(|items| Task::Multiple { items });
        }
        if let Some(rest) = q.strip_prefix(CLASSIFY_PREFIX).and_then(|r| r.strip_suffix(CLASSIFY_SUFFIX)) {
            let (kind, phase) = parse_item(rest)?;
            return Some(Task::Classify { kind, phase });
        }
        None
    }

    /// The measurements needed to answer.
    pub fn required_items(&self) -> Vec<(MeasurementKind, CardiacPhase)> {
        use CardiacPhase::*;
        use MeasurementKind::*;
        match self {
            Task::Single { kind, phase } | Task::Classify { kind, phase } => vec![(*kind, *phase)],
            Task::Multiple { items } => items.clone(),
            Task::RelativeWallThickness => vec![(Lvpw, EndDiastole), (Lvid, EndDiastole)],
            Task::LaAortaRatio => vec![(La, EndSystole), (Aorta, EndSystole)],
        }
    }
}

/// Answer category for guideline-threshold questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Normal,
    Increased,
    Reduced,
}

impl Category {
    pub const ALL: [Category; 3] = [Self::Normal, Self::Increased, Self::Reduced];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Increased => "increased",
            Self::Reduced => "reduced",
        }
    }

    pub fn classify(value: f64, lo: f64, hi: f64) -> Self {
        if value > hi {
            Self::Increased
        } else if value < lo {
            Self::Reduced
        } else {
            Self::Normal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Tolerance {
    pub const LENGTH: Tolerance = Tolerance { abs: 0.2, rel: 0.1 };
    pub const RATIO: Tolerance = Tolerance { abs: 0.05, rel: 0.1 };

    /// Allowed deviation around `gold`: the larger of the two bounds.
    pub fn allowed(&self, gold: f64) -> f64 {
        self.abs.max(self.rel * libm::fabs(gold))
    }

    pub fn accepts(&self, gold: f64, candidate: f64) -> bool {
        libm::fabs(candidate - gold) <= self.allowed(gold) + 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldValue {
    pub value: f64,
    /// `None` for dimensionless ratios.
    pub unit: Option<Unit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<GoldValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Category>,
}

/// One line of the benchmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub case_id: String,
    pub study_id: String,
    pub question: String,
    pub gold_answer: GoldAnswer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<Tolerance>,
    pub difficulty: Difficulty,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyMix {
    pub easy: usize,
    pub medium: usize,
    pub difficult: usize,
}

impl Default for DifficultyMix {
    /// 60 cases; the split across tiers is a choice, only the total mirrors the
    /// size of the reference benchmark.
    fn default() -> Self {
        Self { easy: 25, medium: 21, difficult: 14 }
    }
}

impl DifficultyMix {
    pub fn total(&self) -> usize {
        self.easy + self.medium + self.difficult
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Single,
    Multiple,
    RelativeWallThickness,
    LaAortaRatio,
    Classify,
}

impl Template {
    pub const ALL: [Template; 5] =
        [Self::Single, Self::Multiple, Self::RelativeWallThickness, Self::LaAortaRatio, Self::Classify];

    pub fn difficulty(self) -> Difficulty {
        match self {
            Self::Single => Difficulty::Easy,
            Self::Multiple => Difficulty::Medium,
            _ => Difficulty::Difficult,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkSet {
    pub cases: Vec<BenchmarkCase>,
    pub warnings: Vec<String>,
}

const RWT_NOTE: &str = "RWT = 2 * LVPW(end-diastole) / LVID(end-diastole), dimensionless";
const LA_AO_NOTE: &str = "LA/Aorta = LA(end-systole) / Aorta(end-systole), dimensionless";

fn fmt_cm(v: f64) -> String {
    format!("{v:.2} cm")
}

/// Whether `value` is at least a length tolerance away from both reference
/// bounds for the item.
pub fn clear_category(value: f64, kind: MeasurementKind, phase: CardiacPhase) -> bool {
    let Some((lo, hi)) = reference_range(kind, phase) else { return false };
    let tol = Tolerance::LENGTH;
    libm::fabs(value - lo) >= tol.allowed(lo) && libm::fabs(value - hi) >= tol.allowed(hi)
}

/// Builds the case for `template` on `study`, or explains why it cannot.
pub fn instantiate(
    template: Template,
    study: &EchoStudy,
    truth: &GroundTruth,
    rng: &mut SimRng,
) -> Result<(Task, GoldAnswer, Option<Tolerance>, String), String> {
    let askable: Vec<(MeasurementKind, CardiacPhase)> = MeasurementKind::EVALUATED
        .iter()
        .flat_map(|k| CardiacPhase::BOTH.iter().map(move |p| (*k, *p)))
        .filter(|(k, p)| truth.askable(*k, *p))
        .collect();
    let traps: Vec<_> = askable.iter().copied().filter(|(k, p)| truth.is_trap(*k, *p)).collect();
    let value = |k: MeasurementKind, p: CardiacPhase| study.phase_value(k, p).unwrap_or(0.0);
    let need = |items: &[(MeasurementKind, CardiacPhase)]| -> Result<(), String> {
        match items.iter().find(|it| !askable.contains(it)) {
            Some((k, p)) => Err(format!("{k} at {} is not measurable in {}", p.long_name(), study.study_id)),
            None => Ok(()),
        }
    };
    let pick_one = |rng: &mut SimRng| -> Result<(MeasurementKind, CardiacPhase), String> {
        if let Some(t) = traps.first() {
            return Ok(*t);
        }
        if askable.is_empty() {
            return Err(format!("no evaluated kind is measurable in {}", study.study_id));
        }
        Ok(askable[rng.random_range(0..askable.len())])
    };
    match template {
        Template::Single => {
            let (kind, phase) = pick_one(rng)?;
            let v = value(kind, phase);
            Ok((
                Task::Single { kind, phase },
                GoldAnswer { text: fmt_cm(v), values: vec![GoldValue { value: v, unit: Some(Unit::Cm) }], label: None },
                Some(Tolerance::LENGTH),
                String::new(),
            ))
        }
        Template::Multiple => {
            if askable.len() < 2 {
                return Err(format!("fewer than two measurable items in {}", study.study_id));
            }
            let want = if askable.len() >= 3 && rng.random_bool(0.4) { 3 } else { 2 };
            let mut pool = askable.clone();
            let mut items = Vec::new();
            if let Some(t) = traps.first() {
                items.push(*t);
                pool.retain(|x| x != t);
            }
            while items.len() < want {
                let i = rng.random_range(0..pool.len());
                let it = pool.remove(i);
                if !items.iter().any(|(k, _)| *k == it.0) {
                    items.push(it);
                }
                if pool.is_empty() {
                    break;
                }
            }
            if items.len() < 2 {
                return Err(format!("could not pick two distinct kinds in {}", study.study_id));
            }
            let values: Vec<GoldValue> =
                items.iter().map(|(k, p)| GoldValue { value: value(*k, *p), unit: Some(Unit::Cm) }).collect();
            let text = items
                .iter()
                .zip(&values)
                .map(|((k, p), g)| format!("{} {}: {}", k.name(), p.abbrev(), fmt_cm(g.value)))
                .collect::<Vec<_>>()
                .join("; ");
            Ok((Task::Multiple { items }, GoldAnswer { text, values, label: None }, Some(Tolerance::LENGTH), String::new()))
        }
        Template::RelativeWallThickness => {
            let task = Task::RelativeWallThickness;
            need(&task.required_items())?;
            let rwt = round_to(
                2.0 * value(MeasurementKind::Lvpw, CardiacPhase::EndDiastole)
                    / value(MeasurementKind::Lvid, CardiacPhase::EndDiastole),
                2,
            );
            let text = format!("RWT {rwt:.2}");
            Ok((task, GoldAnswer { text, values: vec![GoldValue { value: rwt, unit: None }], label: None }, Some(Tolerance::RATIO), RWT_NOTE.into()))
        }
        Template::LaAortaRatio => {
            let task = Task::LaAortaRatio;
            need(&task.required_items())?;
            let ratio = round_to(
                value(MeasurementKind::La, CardiacPhase::EndSystole)
                    / value(MeasurementKind::Aorta, CardiacPhase::EndSystole),
                2,
            );
            let text = format!("LA/Aorta {ratio:.2}");
            Ok((task, GoldAnswer { text, values: vec![GoldValue { value: ratio, unit: None }], label: None }, Some(Tolerance::RATIO), LA_AO_NOTE.into()))
        }
        Template::Classify => {
            // Prefer items whose category survives tool error: a question about
            // a value sitting on a bound tests the noise, not the reasoning.
            let clear: Vec<_> = askable.iter().copied().filter(|(k, p)| clear_category(value(*k, *p), *k, *p)).collect();
            let (kind, phase) = match (clear.iter().find(|it| traps.contains(it)), clear.is_empty()) {
                (Some(it), _) => *it,
                (None, false) => clear[rng.random_range(0..clear.len())],
                (None, true) => pick_one(rng)?,
            };
            let (lo, hi) = reference_range(kind, phase).ok_or_else(|| format!("no reference range for {kind}"))?;
            let v = value(kind, phase);
            let cat = Category::classify(v, lo, hi);
            let text = format!("{} ({} {}, reference {lo:.1}–{hi:.1} cm)", cat.as_str(), kind.name(), fmt_cm(v));
            Ok((
                Task::Classify { kind, phase },
                GoldAnswer { text, values: vec![], label: Some(cat) },
                None,
                format!("categories from the bundled reference pack: {lo:.1}–{hi:.1} cm at {}", phase.long_name()),
            ))
        }
    }
}

/// Draws `mix` cases over `studies`, cycling through studies. A template that
/// needs something a study cannot provide is skipped with a warning and the
/// next study is tried.
pub fn generate_benchmark(
    studies: &[(EchoStudy, GroundTruth)],
    templates: &[Template],
    mix: DifficultyMix,
    seed: u64,
) -> BenchmarkSet {
    let mut set = BenchmarkSet::default();
    if studies.is_empty() {
        if mix.total() > 0 {
            set.warnings.push("no studies to draw cases from".into());
        }
        return set;
    }
    let slots = [(Difficulty::Easy, mix.easy), (Difficulty::Medium, mix.medium), (Difficulty::Difficult, mix.difficult)];
    let mut cursor = 0usize;
    let mut slot_no = 0u64;
    for (difficulty, count) in slots {
        let pool: Vec<Template> = templates.iter().copied().filter(|t| t.difficulty() == difficulty).collect();
        if pool.is_empty() && count > 0 {
            set.warnings.push(format!("no {} templates enabled; {count} cases not generated", difficulty.as_str()));
            continue;
        }
        for _ in 0..count {
            let mut rng = substream(seed, Stream::Benchmark, &[slot_no]);
            let template = pool[(slot_no as usize) % pool.len()];
            slot_no += 1;
            let mut placed = false;
            for _ in 0..studies.len() {
                let (study, truth) = &studies[cursor % studies.len()];
                cursor += 1;
                match instantiate(template, study, truth, &mut rng) {
                    Ok((task, gold, tolerance, note)) => {
                        set.cases.push(BenchmarkCase {
                            case_id: format!("case-{:03}", set.cases.len()),
                            study_id: study.study_id.clone(),
                            question: task.question(),
                            gold_answer: gold,
                            tolerance,
                            difficulty,
                            note,
                        });
                        placed = true;
                        break;
                    }
                    Err(why) => set.warnings.push(format!("skipped {template:?}: {why}")),
                }
            }
            if !placed {
                set.warnings.push(format!("no study supports {template:?}"));
            }
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{tests::sample_study, validate_study};

    #[test]
    fn cosine_extrema_example() {
        let s = sample_study();
        let gt = GroundTruth::from_study(&s);
        assert_eq!(gt.ed_frames, vec![0, 30]);
        assert_eq!(gt.es_frames, vec![15, 45]);
        assert_eq!(gt.measurement(MeasurementKind::Lvid, CardiacPhase::EndDiastole).unwrap(), 4.6);
        assert_eq!(gt.measurement(MeasurementKind::Lvid, CardiacPhase::EndSystole).unwrap(), 3.0);
        assert!(matches!(
            gt.measurement(MeasurementKind::RvBase, CardiacPhase::EndDiastole),
            Err(SimError::NotFeasible { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimConfig::default();
        let a = generate_study(&cfg, 3).unwrap();
        let b = generate_study(&cfg, 3).unwrap();
        assert_eq!(serde_json::to_string(&a.0).unwrap(), serde_json::to_string(&b.0).unwrap());
        assert_eq!(a.1, b.1);
        assert_ne!(a.0, generate_study(&cfg, 4).unwrap().0);
    }

    #[test]
    fn inverted_cavity_config_is_rejected() {
        let mut cfg = SimConfig::default();
        cfg.values.insert(
            MeasurementKind::Lvid,
            KindRange { ed_cm: ValueRange::new(4.0, 4.0), es_cm: ValueRange::new(5.0, 5.0) },
        );
        assert!(matches!(generate_study(&cfg, 0), Err(SimError::Config(_))));
        let mut cfg = SimConfig::default();
        cfg.trap_probability = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn generated_studies_validate() {
        let cfg = SimConfig { studies: 200, ..SimConfig::default() };
        for (s, _) in generate_dataset(&cfg).unwrap() {
            let r = validate_study(&s);
            assert!(r.is_ok(), "{}: {:?}", s.study_id, r.violations);
            assert!(s.frame_count >= 2 * s.cycle.period_frames);
        }
    }

    #[test]
    fn questions_round_trip() {
        use CardiacPhase::*;
        use MeasurementKind::*;
        let tasks = [
            Task::Single { kind: Ivs, phase: EndDiastole },
            Task::Multiple { items: vec![(Lvid, EndSystole), (AorticRoot, EndDiastole), (RvBase, EndDiastole)] },
            Task::RelativeWallThickness,
            Task::LaAortaRatio,
            Task::Classify { kind: La, phase: EndSystole },
        ];
        for t in tasks {
            assert_eq!(Task::parse(&t.question()), Some(t.clone()), "{}", t.question());
        }
        assert_eq!(Task::Single { kind: Ivs, phase: EndDiastole }.question(), "What is the IVS thickness at end-diastole?");
        assert_eq!(Task::parse("How is the weather?"), None);
    }

    #[test]
    fn easy_case_on_known_study() {
        let mut s = sample_study();
        s.view = EchoView::PsaxMv;
        for k in [MeasurementKind::Lvid, MeasurementKind::Lvpw] {
            s.quality.visible = s.quality.visible.with(k, false);
        }
        let gt = GroundTruth::from_study(&s);
        let mut rng = substream(1, Stream::Benchmark, &[0]);
        let (task, gold, tol, _) = instantiate(Template::Single, &s, &gt, &mut rng).unwrap();
        let Task::Single { kind, phase } = task else { panic!() };
        assert_eq!(kind, MeasurementKind::Ivs);
        let expect = if phase == CardiacPhase::EndDiastole { 1.0 } else { 1.4 };
        assert_eq!(gold.values[0].value, expect);
        assert_eq!(tol, Some(Tolerance::LENGTH));
    }

    #[test]
    fn rwt_gold_from_ground_truth() {
        let mut s = sample_study();
        s.cycle.values.insert(MeasurementKind::Lvpw, PhaseValues { ed_cm: 1.1, es_cm: 1.5 });
        s.cycle.values.insert(MeasurementKind::Lvid, PhaseValues { ed_cm: 4.4, es_cm: 3.0 });
        let gt = GroundTruth::from_study(&s);
        let mut rng = substream(1, Stream::Benchmark, &[0]);
        let (_, gold, _, note) = instantiate(Template::RelativeWallThickness, &s, &gt, &mut rng).unwrap();
        // brute-force arithmetic: 2 * 1.1 / 4.4
        assert_eq!(gold.values[0].value, 0.5);
        assert!(note.contains("RWT"));
    }

    #[test]
    fn template_needing_absent_kind_is_skipped_with_warning() {
        let mut s = sample_study();
        s.view = EchoView::SubcostalIvc;
        let gt = GroundTruth::from_study(&s);
        let set = generate_benchmark(&[(s, gt)], &[Template::RelativeWallThickness], DifficultyMix { easy: 0, medium: 0, difficult: 1 }, 1);
        assert!(set.cases.is_empty());
        assert!(set.warnings.iter().any(|w| w.contains("skipped")));
    }

    #[test]
    fn default_mix_yields_sixty_cases() {
        let cfg = SimConfig::default();
        let data = generate_dataset(&cfg).unwrap();
        let set = generate_benchmark(&data, &Template::ALL, DifficultyMix::default(), 11);
        assert_eq!(set.cases.len(), 60);
        let count = |d| set.cases.iter().filter(|c| c.difficulty == d).count();
        assert_eq!((count(Difficulty::Easy), count(Difficulty::Medium), count(Difficulty::Difficult)), (25, 21, 14));
        for c in &set.cases {
            assert!(Task::parse(&c.question).is_some(), "{}", c.question);
        }
    }

    #[test]
    fn gold_answers_recompute_from_ground_truth() {
        let cfg = SimConfig::default();
        let data = generate_dataset(&cfg).unwrap();
        let set = generate_benchmark(&data, &Template::ALL, DifficultyMix::default(), 11);
        for c in &set.cases {
            let (study, truth) = data.iter().find(|(s, _)| s.study_id == c.study_id).unwrap();
            let task = Task::parse(&c.question).unwrap();
            let v = |k, p| truth.measurement(k, p).unwrap();
            match task {
                Task::Single { kind, phase } => assert_eq!(c.gold_answer.values[0].value, v(kind, phase)),
                Task::Multiple { items } => {
                    for ((k, p), g) in items.iter().zip(&c.gold_answer.values) {
                        assert_eq!(g.value, v(*k, *p));
                    }
                }
                Task::RelativeWallThickness => {
                    let want = 2.0 * v(MeasurementKind::Lvpw, CardiacPhase::EndDiastole)
                        / v(MeasurementKind::Lvid, CardiacPhase::EndDiastole);
                    assert!((c.gold_answer.values[0].value - want).abs() <= 0.005 + 1e-12);
                }
                Task::LaAortaRatio => {
                    let want = v(MeasurementKind::La, CardiacPhase::EndSystole)
                        / v(MeasurementKind::Aorta, CardiacPhase::EndSystole);
                    assert!((c.gold_answer.values[0].value - want).abs() <= 0.005 + 1e-12);
                }
                Task::Classify { kind, phase } => {
                    let (lo, hi) = reference_range(kind, phase).unwrap();
                    let x = study.phase_value(kind, phase).unwrap();
                    let want = if x > hi { Category::Increased } else if x < lo { Category::Reduced } else { Category::Normal };
                    assert_eq!(c.gold_answer.label, Some(want));
                }
            }
        }
    }

    #[test]
    fn schematic_frames_have_declared_size() {
        let cfg = SimConfig { pixels: true, pixel_size: (32, 40), ..SimConfig::default() };
        let (s, _) = generate_study(&cfg, 0).unwrap();
        let px = render_frames(&s).unwrap();
        assert_eq!(px.len(), s.frame_count as usize * 32 * 40);
        assert!(render_frames(&sample_study()).is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn extrema_match_declared_phase_frames(seed in any::<u64>(), index in 0u64..1000) {
                let cfg = SimConfig { seed, ..SimConfig::default() };
                let (study, truth) = generate_study(&cfg, index).unwrap();
                let curve: Vec<f64> = (0..study.frame_count)
                    .map(|f| study.true_value(MeasurementKind::Lvid, f).unwrap())
                    .collect();
                let max = curve.iter().cloned().fold(f64::MIN, f64::max);
                let min = curve.iter().cloned().fold(f64::MAX, f64::min);
                let argmax: Vec<u32> = (0..study.frame_count).filter(|f| curve[*f as usize] == max).collect();
                let argmin: Vec<u32> = (0..study.frame_count).filter(|f| curve[*f as usize] == min).collect();
                prop_assert_eq!(argmax, truth.ed_frames.clone());
                prop_assert_eq!(argmin, truth.es_frames.clone());
            }

            #[test]
            fn feasible_kinds_belong_to_the_view(seed in any::<u64>(), index in 0u64..1000) {
                let cfg = SimConfig { seed, ..SimConfig::default() };
                let (study, truth) = generate_study(&cfg, index).unwrap();
                let supported = study.view.supported_kinds();
                for y in &truth.feasibility {
                    prop_assert_eq!(y.and(supported), *y);
                }
            }
        }
    }
}
