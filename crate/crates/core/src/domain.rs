//! Shared vocabulary: measurement kinds, views, cardiac phases, studies and
//! measurements. Lengths are in centimetres everywhere.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

/// Number of linear measurement kinds known to the feasibility model.
pub const KIND_COUNT: usize = 16;
/// Number of kinds covered by the measurement tool and the benchmark.
pub const EVALUATED_KIND_COUNT: usize = 7;
/// Number of standard echocardiographic views.
pub const VIEW_COUNT: usize = 13;

/// Schema tag written into every serialized study document.
pub const STUDY_SCHEMA: &str = "echostudy/1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("invalid scale {0}: must be positive")]
    InvalidScale(f64),
    #[error("unknown measurement kind '{0}'")]
    UnknownKind(String),
    #[error("unknown view '{0}'")]
    UnknownView(String),
    #[error("unknown cardiac phase '{0}'")]
    UnknownPhase(String),
}

/// Broad physiologic family of a measurement; decides how it moves over the cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindFamily {
    /// Chamber dimensions, largest at end-diastole.
    Cavity,
    /// Wall thicknesses, thickest at end-systole.
    Wall,
    /// Great-vessel diameters; no ordering constraint.
    Vessel,
    /// Measurements outside the evaluated set.
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MeasurementKind {
    Ivs = 0,
    Lvid = 1,
    Lvpw = 2,
    La = 3,
    Aorta = 4,
    AorticRoot = 5,
    RvBase = 6,
    LvotDiameter = 7,
    Rvot = 8,
    Tapse = 9,
    Ivc = 10,
    Pa = 11,
    LaLength = 12,
    RaDimension = 13,
    AscendingAorta = 14,
    SinotubularJunction = 15,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; KIND_COUNT] = [
        Self::Ivs,
        Self::Lvid,
        Self::Lvpw,
        Self::La,
        Self::Aorta,
        Self::AorticRoot,
        Self::RvBase,
        Self::LvotDiameter,
        Self::Rvot,
        Self::Tapse,
        Self::Ivc,
        Self::Pa,
        Self::LaLength,
        Self::RaDimension,
        Self::AscendingAorta,
        Self::SinotubularJunction,
    ];

    /// The seven kinds with a linear-measurement model behind them.
    pub const EVALUATED: [MeasurementKind; EVALUATED_KIND_COUNT] = [
        Self::Ivs,
        Self::Lvid,
        Self::Lvpw,
        Self::La,
        Self::Aorta,
        Self::AorticRoot,
        Self::RvBase,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ivs => "IVS",
            Self::Lvid => "LVID",
            Self::Lvpw => "LVPW",
            Self::La => "LA",
            Self::Aorta => "Aorta",
            Self::AorticRoot => "Aortic root",
            Self::RvBase => "RV base",
            Self::LvotDiameter => "LVOT diameter",
            Self::Rvot => "RVOT",
            Self::Tapse => "TAPSE",
            Self::Ivc => "IVC",
            Self::Pa => "PA",
            Self::LaLength => "LA length",
            Self::RaDimension => "RA dimension",
            Self::AscendingAorta => "Asc. aorta",
            Self::SinotubularJunction => "Sinotubular junction",
        }
    }

    /// Human-readable description used in benchmark questions.
    pub fn description(self) -> &'static str {
        match self {
            Self::Ivs => "interventricular septal thickness",
            Self::Lvid => "left ventricular internal dimension",
            Self::Lvpw => "left ventricular posterior wall thickness",
            Self::La => "left atrial diameter",
            Self::Aorta => "aortic diameter",
            Self::AorticRoot => "aortic root diameter",
            Self::RvBase => "right ventricular basal dimension",
            Self::LvotDiameter => "left ventricular outflow tract diameter",
            Self::Rvot => "right ventricular outflow tract diameter",
            Self::Tapse => "tricuspid annular plane systolic excursion",
            Self::Ivc => "inferior vena cava diameter",
            Self::Pa => "main pulmonary artery diameter",
            Self::LaLength => "left atrial length",
            Self::RaDimension => "right atrial dimension",
            Self::AscendingAorta => "ascending aorta diameter",
            Self::SinotubularJunction => "sinotubular junction diameter",
        }
    }

    pub fn is_evaluated(self) -> bool {
        self.id() < EVALUATED_KIND_COUNT
    }

    pub fn family(self) -> KindFamily {
        match self {
            Self::Lvid | Self::La | Self::RvBase => KindFamily::Cavity,
            Self::Ivs | Self::Lvpw => KindFamily::Wall,
            Self::Aorta | Self::AorticRoot => KindFamily::Vessel,
            _ => KindFamily::Other,
        }
    }

    /// Case-insensitive lookup; spaces, dots, dashes and underscores are ignored.
    pub fn from_name(name: &str) -> Result<Self, DomainError> {
        let wanted = normalize_label(name);
        Self::ALL
            .iter()
            .copied()
            .find(|k| normalize_label(k.name()) == wanted)
            .ok_or_else(|| DomainError::UnknownKind(name.to_string()))
    }
}

impl fmt::Display for MeasurementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for MeasurementKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MeasurementKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_name(&s).map_err(de::Error::custom)
    }
}

/// Lowercases and strips separators so "Aortic_root", "aortic root" and
/// "AORTIC-ROOT" compare equal.
pub fn normalize_label(s: &str) -> String {
    s.chars()
        .filter(|c| !matches!(c, ' ' | '_' | '-' | '.' | '\t'))
        .flat_map(|c| c.to_lowercase())
        .collect()
}

/// Bit-set over the 16 measurement kinds. Bit `j` set means kind `j` is feasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct FeasibilityVector(u16);

impl FeasibilityVector {
    pub const EMPTY: Self = Self(0);
    pub const FULL: Self = Self(u16::MAX);

    pub fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn from_kinds<I: IntoIterator<Item = MeasurementKind>>(kinds: I) -> Self {
        kinds.into_iter().fold(Self::EMPTY, |v, k| v.with(k, true))
    }

    pub fn get(self, kind: MeasurementKind) -> bool {
        self.0 & (1 << kind.id()) != 0
    }

    #[must_use]
    pub fn with(self, kind: MeasurementKind, on: bool) -> Self {
        if on {
            Self(self.0 | (1 << kind.id()))
        } else {
            Self(self.0 & !(1 << kind.id()))
        }
    }

    pub fn and(self, other: Self) -> Self {
        Self(self.0 & other.0)
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn kinds(self) -> impl Iterator<Item = MeasurementKind> {
        MeasurementKind::ALL.into_iter().filter(move |k| self.get(*k))
    }

    /// The vector as `m` zeros and ones, ordered by kind id.
    pub fn to_binary(self) -> [u8; KIND_COUNT] {
        let mut out = [0u8; KIND_COUNT];
        for k in MeasurementKind::ALL {
            out[k.id()] = self.get(k) as u8;
        }
        out
    }

    pub fn from_binary(bits: &[u8]) -> Option<Self> {
        if bits.len() != KIND_COUNT {
            return None;
        }
        let mut v = Self::EMPTY;
        for (i, b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => v = v.with(MeasurementKind::ALL[i], true),
                _ => return None,
            }
        }
        Some(v)
    }
}

impl Serialize for FeasibilityVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_binary().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeasibilityVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bits = Vec::<u8>::deserialize(d)?;
        Self::from_binary(&bits)
            .ok_or_else(|| de::Error::custom("feasibility vector must hold 16 binary entries"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EchoView {
    Plax,
    PsaxAv,
    PsaxMv,
    PsaxPm,
    A4c,
    A2c,
    A3c,
    A5c,
    Subcostal4c,
    SubcostalIvc,
    Suprasternal,
    RvInflow,
    PlaxZoom,
}

impl EchoView {
    pub const ALL: [EchoView; VIEW_COUNT] = [
        Self::Plax,
        Self::PsaxAv,
        Self::PsaxMv,
        Self::PsaxPm,
        Self::A4c,
        Self::A2c,
        Self::A3c,
        Self::A5c,
        Self::Subcostal4c,
        Self::SubcostalIvc,
        Self::Suprasternal,
        Self::RvInflow,
        Self::PlaxZoom,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Plax => "PLAX",
            Self::PsaxAv => "PSAX-AV",
            Self::PsaxMv => "PSAX-MV",
            Self::PsaxPm => "PSAX-PM",
            Self::A4c => "A4C",
            Self::A2c => "A2C",
            Self::A3c => "A3C",
            Self::A5c => "A5C",
            Self::Subcostal4c => "Subcostal-4C",
            Self::SubcostalIvc => "Subcostal-IVC",
            Self::Suprasternal => "Suprasternal",
            Self::RvInflow => "RV-inflow",
            Self::PlaxZoom => "PLAX-zoom",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, DomainError> {
        let wanted = normalize_label(name);
        Self::ALL
            .iter()
            .copied()
            .find(|v| normalize_label(v.name()) == wanted)
            .ok_or_else(|| DomainError::UnknownView(name.to_string()))
    }

    /// Kinds that can in principle be measured on this view.
    pub fn supported_kinds(self) -> FeasibilityVector {
        use MeasurementKind::*;
        let kinds: &[MeasurementKind] = match self {
            Self::Plax => &[Ivs, Lvid, Lvpw, La, Aorta, AorticRoot, LvotDiameter, Rvot],
            Self::PsaxAv => &[La, Aorta, Rvot, Pa],
            Self::PsaxMv => &[Ivs, Lvid, Lvpw],
            Self::PsaxPm => &[Ivs, Lvid, Lvpw],
            Self::A4c => &[RvBase, Tapse, LaLength, RaDimension, Lvid],
            Self::A2c => &[LaLength],
            Self::A3c => &[LvotDiameter],
            Self::A5c => &[LvotDiameter],
            Self::Subcostal4c => &[RvBase, Ivs],
            Self::SubcostalIvc => &[Ivc],
            Self::Suprasternal => &[AscendingAorta],
            Self::RvInflow => &[RaDimension],
            Self::PlaxZoom => &[Aorta, AorticRoot, LvotDiameter, SinotubularJunction, AscendingAorta],
        };
        FeasibilityVector::from_kinds(kinds.iter().copied())
    }
}

impl fmt::Display for EchoView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for EchoView {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for EchoView {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_name(&s).map_err(de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CardiacPhase {
    #[serde(rename = "ED")]
    EndDiastole,
    #[serde(rename = "ES")]
    EndSystole,
}

impl CardiacPhase {
    pub const BOTH: [CardiacPhase; 2] = [Self::EndDiastole, Self::EndSystole];

    pub fn abbrev(self) -> &'static str {
        match self {
            Self::EndDiastole => "ED",
            Self::EndSystole => "ES",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            Self::EndDiastole => "end-diastole",
            Self::EndSystole => "end-systole",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DomainError> {
        match normalize_label(s).as_str() {
            "ed" | "enddiastole" | "enddiastolic" | "diastole" => Ok(Self::EndDiastole),
            "es" | "endsystole" | "endsystolic" | "systole" => Ok(Self::EndSystole),
            _ => Err(DomainError::UnknownPhase(s.to_string())),
        }
    }
}

impl fmt::Display for CardiacPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

/// True end-diastolic and end-systolic values of one measurement kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseValues {
    pub ed_cm: f64,
    pub es_cm: f64,
}

impl PhaseValues {
    pub fn at(&self, phase: CardiacPhase) -> f64 {
        match phase {
            CardiacPhase::EndDiastole => self.ed_cm,
            CardiacPhase::EndSystole => self.es_cm,
        }
    }
}

/// Ground-truth cardiac cycle. Every kind follows
/// `es + (ed - es) * (1 + cos(2π (t - offset) / period)) / 2`,
/// so end-diastole sits at `offset + n·period` and end-systole half a period later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleParams {
    pub period_frames: u32,
    pub phase_offset_frames: u32,
    pub values: BTreeMap<MeasurementKind, PhaseValues>,
}

impl CycleParams {
    pub fn value_at(&self, kind: MeasurementKind, frame: f64) -> Option<f64> {
        let v = self.values.get(&kind)?;
        let period = self.period_frames as f64;
        let angle = 2.0 * core::f64::consts::PI * (frame - self.phase_offset_frames as f64) / period;
        // weighted form so the extrema return the configured values exactly
        let w = (1.0 + libm::cos(angle)) / 2.0;
        Some(v.ed_cm * w + v.es_cm * (1.0 - w))
    }

    /// Frames in `[0, frame_count)` at the given phase, ascending.
    pub fn phase_frames(&self, phase: CardiacPhase, frame_count: u32) -> Vec<u32> {
        let period = self.period_frames as i64;
        if period == 0 {
            return Vec::new();
        }
        let mut first = self.phase_offset_frames as i64;
        if phase == CardiacPhase::EndSystole {
            first += period / 2;
        }
        first = first.rem_euclid(period);
        (0..)
            .map(|n| first + n * period)
            .take_while(|f| *f < frame_count as i64)
            .map(|f| f as u32)
            .collect()
    }
}

/// A contiguous frame window `[start, end)` where one kind is not measurable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradedWindow {
    pub kind: MeasurementKind,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityFlags {
    /// Kinds visible for the clip as a whole before frame-level degradation.
    pub visible: FeasibilityVector,
    #[serde(default)]
    pub degraded: Vec<DegradedWindow>,
}

/// Reference to a raw grayscale payload: `frame_count × height × width` bytes,
/// row-major, stored next to the study document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRef {
    pub path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchemaTag;

impl Serialize for SchemaTag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(STUDY_SCHEMA)
    }
}

impl<'de> Deserialize<'de> for SchemaTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == STUDY_SCHEMA {
            Ok(SchemaTag)
        } else {
            Err(de::Error::custom(format!(
                "unsupported study schema '{s}', expected '{STUDY_SCHEMA}'"
            )))
        }
    }
}

/// One echo clip with its ground-truth channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoStudy {
    pub schema: SchemaTag,
    pub study_id: String,
    pub view: EchoView,
    pub frame_count: u32,
    pub frame_rate: f64,
    /// Centimetres per pixel.
    pub pixel_scale: f64,
    pub cycle: CycleParams,
    pub quality: QualityFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels: Option<PixelRef>,
}

impl EchoStudy {
    pub fn phase_frames(&self, phase: CardiacPhase) -> Vec<u32> {
        self.cycle.phase_frames(phase, self.frame_count)
    }

    /// Ground-truth feasibility vector `y` at a frame.
    pub fn feasibility_at(&self, frame: u32) -> FeasibilityVector {
        let mut y = self.view.supported_kinds().and(self.quality.visible);
        for w in &self.quality.degraded {
            if frame >= w.start && frame < w.end {
                y = y.with(w.kind, false);
            }
        }
        y
    }

    pub fn true_value(&self, kind: MeasurementKind, frame: u32) -> Option<f64> {
        self.cycle.value_at(kind, frame as f64)
    }

    pub fn phase_value(&self, kind: MeasurementKind, phase: CardiacPhase) -> Option<f64> {
        self.cycle.values.get(&kind).map(|v| v.at(phase))
    }

    /// Ground-truth phase whose nearest frame is closest to `frame`.
    pub fn nearest_phase(&self, frame: u32) -> CardiacPhase {
        let dist = |phase| {
            self.phase_frames(phase)
                .into_iter()
                .map(|f| f.abs_diff(frame))
                .min()
                .unwrap_or(u32::MAX)
        };
        if dist(CardiacPhase::EndSystole) < dist(CardiacPhase::EndDiastole) {
            CardiacPhase::EndSystole
        } else {
            CardiacPhase::EndDiastole
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementSource {
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub frame: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoints: Option<[Point; 2]>,
    pub value_cm: f64,
    pub source: MeasurementSource,
}

/// Caliper length in centimetres.
pub fn pixels_to_cm(p1: Point, p2: Point, scale: f64) -> Result<f64, DomainError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(DomainError::InvalidScale(scale));
    }
    Ok(libm::hypot(p2.x - p1.x, p2.y - p1.y) * scale)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

/// Lists every violated study invariant. Never fails.
pub fn validate_study(study: &EchoStudy) -> ValidationReport {
    let mut v = Vec::new();
    if study.frame_count < 2 {
        v.push(format!("frame_count < 2 (got {})", study.frame_count));
    }
    if !(study.pixel_scale > 0.0) || !study.pixel_scale.is_finite() {
        v.push(format!("pixel_scale must be positive (got {})", study.pixel_scale));
    }
    if !(study.frame_rate > 0.0) || !study.frame_rate.is_finite() {
        v.push(format!("frame_rate must be positive (got {})", study.frame_rate));
    }
    let cycle = &study.cycle;
    if cycle.period_frames < 4 {
        v.push(format!("cycle period < 4 frames (got {})", cycle.period_frames));
    }
    if cycle.period_frames % 2 != 0 {
        v.push(format!("cycle period must be even (got {})", cycle.period_frames));
    }
    if cycle.period_frames > 0 && cycle.phase_offset_frames >= cycle.period_frames {
        v.push(format!(
            "phase offset {} outside period {}",
            cycle.phase_offset_frames, cycle.period_frames
        ));
    }
    for kind in MeasurementKind::EVALUATED {
        let Some(pv) = cycle.values.get(&kind) else {
            v.push(format!("missing cycle values for {kind}"));
            continue;
        };
        if !(pv.ed_cm > 0.0) || !(pv.es_cm > 0.0) {
            v.push(format!("non-positive value for {kind}"));
        }
        match kind.family() {
            KindFamily::Cavity if pv.es_cm > pv.ed_cm => v.push(format!(
                "cavity dimension ordering: {kind} es {} > ed {}",
                pv.es_cm, pv.ed_cm
            )),
            KindFamily::Wall if pv.ed_cm > pv.es_cm => v.push(format!(
                "wall thickness ordering: {kind} ed {} > es {}",
                pv.ed_cm, pv.es_cm
            )),
            _ => {}
        }
    }
    for kind in cycle.values.keys() {
        if !kind.is_evaluated() {
            v.push(format!("cycle values given for non-evaluated kind {kind}"));
        }
    }
    for w in &study.quality.degraded {
        if w.start >= w.end || w.end > study.frame_count {
            v.push(format!(
                "degraded window [{}, {}) for {} out of range",
                w.start, w.end, w.kind
            ));
        }
    }
    if let Some(px) = &study.pixels {
        if px.width == 0 || px.height == 0 {
            v.push("pixel payload has zero size".to_string());
        }
    }
    ValidationReport { violations: v }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn sample_study() -> EchoStudy {
        let mut values = BTreeMap::new();
        let table = [
            (MeasurementKind::Ivs, 1.0, 1.4),
            (MeasurementKind::Lvid, 4.6, 3.0),
            (MeasurementKind::Lvpw, 1.1, 1.5),
            (MeasurementKind::La, 3.6, 3.1),
            (MeasurementKind::Aorta, 3.0, 3.1),
            (MeasurementKind::AorticRoot, 3.2, 3.3),
            (MeasurementKind::RvBase, 3.5, 2.6),
        ];
        for (k, ed, es) in table {
            values.insert(k, PhaseValues { ed_cm: ed, es_cm: es });
        }
        EchoStudy {
            schema: SchemaTag,
            study_id: "study-0000".into(),
            view: EchoView::Plax,
            frame_count: 60,
            frame_rate: 50.0,
            pixel_scale: 0.046,
            cycle: CycleParams { period_frames: 30, phase_offset_frames: 0, values },
            quality: QualityFlags { visible: FeasibilityVector::FULL, degraded: vec![] },
            pixels: None,
        }
    }

    #[test]
    fn kind_table_is_closed() {
        assert_eq!(MeasurementKind::ALL.len(), 16);
        assert_eq!(MeasurementKind::ALL.iter().filter(|k| k.is_evaluated()).count(), 7);
        for (i, k) in MeasurementKind::ALL.iter().enumerate() {
            assert_eq!(k.id(), i);
            assert_eq!(MeasurementKind::from_id(i), Some(*k));
            assert_eq!(MeasurementKind::from_name(k.name()).unwrap(), *k);
        }
        let mut names: Vec<_> = MeasurementKind::ALL.iter().map(|k| k.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 16);
        assert_eq!(MeasurementKind::from_id(16), None);
    }

    #[test]
    fn every_kind_has_a_view() {
        assert_eq!(EchoView::ALL.len(), 13);
        for k in MeasurementKind::ALL {
            assert!(EchoView::ALL.iter().any(|v| v.supported_kinds().get(k)), "{k}");
        }
    }

    #[test]
    fn kind_lookup_is_forgiving_about_case_and_separators() {
        assert_eq!(MeasurementKind::from_name("aortic_root").unwrap(), MeasurementKind::AorticRoot);
        assert_eq!(MeasurementKind::from_name("rv BASE").unwrap(), MeasurementKind::RvBase);
        assert!(MeasurementKind::from_name("Mitral annulus").is_err());
    }

    #[test]
    fn pixels_to_cm_examples() {
        let d = pixels_to_cm(Point::new(0.0, 0.0), Point::new(0.0, 100.0), 0.046).unwrap();
        assert!((d - 4.6).abs() < 1e-12);
        assert_eq!(pixels_to_cm(Point::new(5.0, 5.0), Point::new(5.0, 5.0), 0.3).unwrap(), 0.0);
        assert_eq!(pixels_to_cm(Point::new(0.0, 0.0), Point::new(3.0, 4.0), 1.0).unwrap(), 5.0);
        assert_eq!(
            pixels_to_cm(Point::new(0.0, 0.0), Point::new(3.0, 4.0), 0.0),
            Err(DomainError::InvalidScale(0.0))
        );
        assert!(pixels_to_cm(Point::new(0.0, 0.0), Point::new(3.0, 4.0), -1.0).is_err());
    }

    #[test]
    fn well_formed_study_validates() {
        assert!(validate_study(&sample_study()).is_ok());
    }

    #[test]
    fn single_frame_study_is_flagged() {
        let mut s = sample_study();
        s.frame_count = 1;
        assert!(validate_study(&s).mentions("frame_count < 2"));
    }

    #[test]
    fn inverted_cavity_values_are_flagged() {
        let mut s = sample_study();
        s.cycle.values.insert(MeasurementKind::Lvid, PhaseValues { ed_cm: 4.0, es_cm: 5.0 });
        let r = validate_study(&s);
        assert!(r.mentions("cavity dimension ordering"));
        assert_eq!(r, validate_study(&s));
    }

    #[test]
    fn phase_frames_follow_cosine_extrema() {
        let s = sample_study();
        assert_eq!(s.phase_frames(CardiacPhase::EndDiastole), vec![0, 30]);
        assert_eq!(s.phase_frames(CardiacPhase::EndSystole), vec![15, 45]);
        let mut shifted = s.clone();
        shifted.cycle.phase_offset_frames = 20;
        assert_eq!(shifted.phase_frames(CardiacPhase::EndDiastole), vec![20, 50]);
        assert_eq!(shifted.phase_frames(CardiacPhase::EndSystole), vec![5, 35]);
    }

    #[test]
    fn feasibility_respects_view_and_windows() {
        let mut s = sample_study();
        s.quality.degraded.push(DegradedWindow { kind: MeasurementKind::Lvid, start: 0, end: 5 });
        let y0 = s.feasibility_at(0);
        assert!(!y0.get(MeasurementKind::Lvid));
        assert!(y0.get(MeasurementKind::Ivs));
        assert!(!y0.get(MeasurementKind::RvBase), "RV base is not a PLAX kind");
        assert!(s.feasibility_at(5).get(MeasurementKind::Lvid));
    }

    #[test]
    fn study_round_trips_through_json_with_schema_tag() {
        let s = sample_study();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"schema\":\"echostudy/1\""));
        let back: EchoStudy = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bad = text.replace("echostudy/1", "echostudy/9");
        assert!(serde_json::from_str::<EchoStudy>(&bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn caliper_length_is_symmetric_and_linear(
                ax in -500.0..500.0f64, ay in -500.0..500.0f64,
                bx in -500.0..500.0f64, by in -500.0..500.0f64,
                s in 0.001..1.0f64, m in 0.1..10.0f64,
            ) {
                let a = Point::new(ax, ay);
                let b = Point::new(bx, by);
                let ab = pixels_to_cm(a, b, s).unwrap();
                prop_assert_eq!(ab, pixels_to_cm(b, a, s).unwrap());
                let scaled = pixels_to_cm(a, b, s * m).unwrap();
                prop_assert!((scaled - ab * m).abs() <= 1e-9 * (1.0 + scaled.abs()));
            }

            #[test]
            fn feasibility_binary_round_trip(bits in any::<u16>()) {
                let v = FeasibilityVector::from_bits(bits);
                prop_assert_eq!(FeasibilityVector::from_binary(&v.to_binary()), Some(v));
            }
        }
    }
}
