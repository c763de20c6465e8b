//! Benchmark harness: judging, failure taxonomy, tool metrics, the case
//! runner and the ablation grid.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::agent::{HistoryEntry, Session, SessionEnv, SessionError, SessionStatus, TraceEvent};
use crate::domain::{CardiacPhase, EchoStudy, FeasibilityVector, MeasurementKind, KIND_COUNT};
use crate::gateway::{hex, prompt_hash, Backend, BackendError, ChatMessage, PROMPT_VERSION};
use crate::guidelines::GuidelineIndex;
use crate::protocol::ToolRegistry;
use crate::quantity::extract_quantities;
use crate::sim::{BenchmarkCase, Category, Difficulty, GoldAnswer, GoldValue, Tolerance};
use crate::tools::{oracle_registry, ToolFlags, MEASURE};
use crate::vision::{detect_phases, measure, phase_frame_labels, predict_feasibility, NoiseProfile};

// ---------------------------------------------------------------------------
// Judging

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Rule,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    pub judge: JudgeKind,
    pub rationale: String,
}

impl Verdict {
    fn rule(correct: bool, rationale: impl Into<String>) -> Self {
        Self { correct, judge: JudgeKind::Rule, rationale: rationale.into() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JudgeError {
    #[error("case has neither a numeric nor a categorical gold answer")]
    NoGold,
    #[error("numeric gold without a tolerance")]
    MissingTolerance,
    #[error("unparseable judge output: {0}")]
    Unparseable(String),
    #[error("judge backend failed: {0}")]
    Backend(BackendError),
}

fn describe_gold(g: &GoldValue) -> String {
    match g.unit {
        Some(u) => format!("{} {}", g.value, u.symbol()),
        None => format!("{}", g.value),
    }
}

/// Kuhn's augmenting path over the gold/candidate compatibility matrix.
fn augment(g: usize, ok: &[Vec<bool>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
    for c in 0..seen.len() {
        if ok[g][c] && !seen[c] {
            seen[c] = true;
            if owner[c].is_none_or(|other| augment(other, ok, seen, owner)) {
                owner[c] = Some(g);
                return true;
            }
        }
    }
    false
}

/// Every gold value must be matched by a distinct, unit-compatible number in
/// the answer. Lengths match lengths in cm or mm; dimensionless golds match
/// bare numbers only.
pub fn judge_numeric(answer: &str, gold: &[GoldValue], tolerance: Tolerance) -> Verdict {
    let candidates = extract_quantities(answer);
    if candidates.is_empty() {
        return Verdict::rule(false, "no numeric claim");
    }
    let ok: Vec<Vec<bool>> = gold
        .iter()
        .map(|g| {
            candidates
                .iter()
                .map(|q| match (g.unit, q.cm()) {
                    (Some(u), Some(cm)) => tolerance.accepts(u.to_cm(g.value), cm),
                    (None, None) => tolerance.accepts(g.value, q.value),
                    _ => false,
                })
                .collect()
        })
        .collect();
    let mut owner = vec![None; candidates.len()];
    let mut missing = Vec::new();
    for g in 0..gold.len() {
        let mut seen = vec![false; candidates.len()];
        if !augment(g, &ok, &mut seen, &mut owner) {
            missing.push(describe_gold(&gold[g]));
        }
    }
    if missing.is_empty() {
        let mut matched: Vec<String> = owner
            .iter()
            .enumerate()
            .filter_map(|(c, g)| g.map(|g| (g, c)))
            .map(|(g, c)| format!("{} ~ {}", &answer[candidates[c].offset..].split_whitespace().next().unwrap_or(""), describe_gold(&gold[g])))
            .collect();
        matched.sort();
        Verdict::rule(true, format!("all {} values within tolerance ({})", gold.len(), matched.join(", ")))
    } else {
        Verdict::rule(false, format!("no claim within tolerance of {}", missing.join(", ")))
    }
}

fn category_word(word: &str) -> Option<Category> {
    match word {
        "normal" => Some(Category::Normal),
        "increased" => Some(Category::Increased),
        "reduced" => Some(Category::Reduced),
        _ => None,
    }
}

/// Reads a category from the answer. An explicit "classification:" label
/// wins; otherwise exactly one distinct category word must appear.
pub fn judge_label(answer: &str, gold: Category) -> Verdict {
    let lower = answer.to_ascii_lowercase();
    let words = |s: &str| -> Vec<Category> {
        s.split(|c: char| !c.is_ascii_alphabetic()).filter_map(category_word).collect()
    };
    let stated = match lower.rfind("classification") {
        Some(at) => words(&lower[at..]).first().copied(),
        None => {
            let mut found = words(&lower);
            found.sort_by_key(|c| c.as_str());
            found.dedup();
            match found.as_slice() {
                [] => return Verdict::rule(false, "no category stated"),
                [one] => Some(*one),
                _ => return Verdict::rule(false, "ambiguous: several categories stated"),
            }
        }
    };
    match stated {
        Some(c) if c == gold => Verdict::rule(true, format!("category {} matches", c.as_str())),
        Some(c) => Verdict::rule(false, format!("category {} but gold is {}", c.as_str(), gold.as_str())),
        None => Verdict::rule(false, "no category stated"),
    }
}

pub fn judge_rule(answer: &str, case: &BenchmarkCase) -> Result<Verdict, JudgeError> {
    let gold = &case.gold_answer;
    if let Some(label) = gold.label {
        return Ok(judge_label(answer, label));
    }
    if gold.values.is_empty() {
        return Err(JudgeError::NoGold);
    }
    let tol = case.tolerance.ok_or(JudgeError::MissingTolerance)?;
    Ok(judge_numeric(answer, &gold.values, tol))
}

pub const JUDGE_RUBRIC_VERSION: &str = "echoagent-judge/1";

const JUDGE_RUBRIC: &str = "You grade answers to echocardiography questions. \
Compare the candidate answer with the reference answer. Numeric values are \
correct when they agree within the stated tolerance; a category is correct \
only if it is the same category. Ignore style. Reply with a short rationale \
followed by a final line of exactly `VERDICT: correct` or `VERDICT: incorrect`.";

/// The rubric conversation: question, reference and final answer only.
pub fn judge_messages(question: &str, gold: &GoldAnswer, tolerance: Option<Tolerance>, answer: &str) -> Vec<ChatMessage> {
    let tol = match tolerance {
        Some(t) => format!("±max({}, {}% of the reference)", t.abs, t.rel * 100.0),
        None => "exact category".into(),
    };
    vec![
        ChatMessage::system(JUDGE_RUBRIC),
        ChatMessage::user(format!(
            "Question: {question}\nReference answer: {}\nTolerance: {tol}\nCandidate answer: {answer}",
            gold.text
        )),
    ]
}

pub fn judge_model(answer: &str, case: &BenchmarkCase, backend: &dyn Backend) -> Result<Verdict, JudgeError> {
    let out = backend
        .complete(&judge_messages(&case.question, &case.gold_answer, case.tolerance, answer))
        .map_err(JudgeError::Backend)?;
    let verdict = out.lines().rev().find_map(|line| {
        let l = line.trim().to_ascii_lowercase();
        let rest = l.strip_prefix("verdict:")?.trim();
        match rest {
            "correct" => Some(true),
            "incorrect" => Some(false),
            _ => None,
        }
    });
    match verdict {
        Some(correct) => {
            let rationale: Vec<&str> =
                out.lines().filter(|l| !l.trim().to_ascii_lowercase().starts_with("verdict:")).collect();
            Ok(Verdict { correct, judge: JudgeKind::Model, rationale: rationale.join("\n").trim().to_string() })
        }
        None => Err(JudgeError::Unparseable(out.chars().take(200).collect())),
    }
}

#[derive(Clone, Copy)]
pub enum Judge<'a> {
    Rule,
    Model(&'a dyn Backend),
}

impl Judge<'_> {
    pub fn judge(&self, answer: &str, case: &BenchmarkCase) -> Result<Verdict, JudgeError> {
        match self {
            Judge::Rule => judge_rule(answer, case),
            Judge::Model(b) => judge_model(answer, case, *b),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Judge::Rule => "rule".into(),
            Judge::Model(b) => format!("model:{}:{JUDGE_RUBRIC_VERSION}", b.describe()),
        }
    }
}

// ---------------------------------------------------------------------------
// Failure taxonomy

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    None,
    ToolCalling,
    ToolMeasurement,
    FinalConclusion,
}

impl FailureClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::ToolCalling => "tool_calling",
            Self::ToolMeasurement => "tool_measurement",
            Self::FinalConclusion => "final_conclusion",
        }
    }
}

/// Measurements in the history that miss the truth at the nearest phase
/// by more than `tolerance`.
pub fn erroneous_measurements(history: &[HistoryEntry], study: &EchoStudy, tolerance: Tolerance) -> Vec<usize> {
    history
        .iter()
        .enumerate()
        .filter(|(_, e)| e.action.tool_name == MEASURE && e.result.is_ok())
        .filter_map(|(i, e)| {
            let p = &e.result.payload;
            let kind = MeasurementKind::from_name(p["kind"].as_str()?).ok()?;
            let frame = u32::try_from(p["frame"].as_u64()?).ok()?;
            let value = p["value_cm"].as_f64()?;
            let truth = study.phase_value(kind, study.nearest_phase(frame))?;
            (!tolerance.accepts(truth, value)).then_some(i)
        })
        .collect()
}

/// Tolerance used for deciding whether a tool measurement was wrong; ratio
/// and category cases fall back to the length tolerance.
pub fn measurement_tolerance(case: &BenchmarkCase) -> Tolerance {
    match (case.tolerance, case.gold_answer.values.first()) {
        (Some(t), Some(GoldValue { unit: Some(_), .. })) => t,
        _ => Tolerance::LENGTH,
    }
}

pub fn classify_failure(history: &[HistoryEntry], study: &EchoStudy, tolerance: Tolerance, verdict: &Verdict) -> FailureClass {
    if verdict.correct {
        return FailureClass::None;
    }
    if history.iter().any(|e| e.result.error_class().is_some_and(|c| c.is_call_error())) {
        return FailureClass::ToolCalling;
    }
    if !erroneous_measurements(history, study, tolerance).is_empty() {
        return FailureClass::ToolMeasurement;
    }
    FailureClass::FinalConclusion
}

// ---------------------------------------------------------------------------
// Tool metrics

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{field}: {predicted} predictions for {truths} truths")]
    LengthMismatch { field: &'static str, predicted: usize, truths: usize },
    #[error("measurement {index}: predicted kind {predicted} but truth is {truth}")]
    KindMismatch { index: usize, predicted: MeasurementKind, truth: MeasurementKind },
    #[error("clip {clip}: truth frames but no predicted {phase} frame")]
    NoPrediction { clip: usize, phase: &'static str },
}

/// Tool outputs (or their ground truth), aligned element by element.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ToolSamples {
    pub measurements: Vec<(MeasurementKind, f64)>,
    pub feasibility: Vec<FeasibilityVector>,
    /// Per clip.
    pub ed_frames: Vec<Vec<u32>>,
    pub es_frames: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Empty denominators count as perfect when nothing was missed.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64, other_err: u64| {
            if den == 0 {
                if other_err == 0 { 1.0 } else { 0.0 }
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp, fn_);
        let recall = ratio(tp, tp + fn_, fp);
        // 2TP / (2TP + FP + FN) is the harmonic mean without the rounding.
        let f1 = if tp + fp + fn_ == 0 { 1.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMetrics {
    pub frames: usize,
    pub micro: Prf,
    pub macro_avg: Prf,
    /// Classes with any positive in either set.
    pub macro_classes: usize,
    pub per_kind: BTreeMap<MeasurementKind, Counts>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindError {
    pub count: usize,
    pub mae_cm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub count: usize,
    pub mae_frames: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolMetrics {
    pub measurement: BTreeMap<MeasurementKind, KindError>,
    pub feasibility: FeasibilityMetrics,
    pub ed: Option<FrameError>,
    pub es: Option<FrameError>,
}

fn check_len(field: &'static str, predicted: usize, truths: usize) -> Result<(), MetricsError> {
    if predicted == truths {
        Ok(())
    } else {
        Err(MetricsError::LengthMismatch { field, predicted, truths })
    }
}

/// Mean over truth frames of the distance to the closest predicted frame.
pub fn frame_mae(predicted: &[Vec<u32>], truths: &[Vec<u32>], phase: &'static str) -> Result<Option<FrameError>, MetricsError> {
    let mut total = 0u64;
    let mut count = 0usize;
    for (clip, (pred, truth)) in predicted.iter().zip(truths).enumerate() {
        if truth.is_empty() {
            continue;
        }
        if pred.is_empty() {
            return Err(MetricsError::NoPrediction { clip, phase });
        }
        for t in truth {
            total += pred.iter().map(|p| p.abs_diff(*t) as u64).min().unwrap_or(0);
            count += 1;
        }
    }
    Ok((count > 0).then(|| FrameError { count, mae_frames: total as f64 / count as f64 }))
}

pub fn feasibility_metrics(predicted: &[FeasibilityVector], truths: &[FeasibilityVector]) -> FeasibilityMetrics {
    let mut per = [Counts::default(); KIND_COUNT];
    for (p, t) in predicted.iter().zip(truths) {
        for kind in MeasurementKind::ALL {
            let c = &mut per[kind.id()];
            match (p.get(kind), t.get(kind)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let (tp, fp, fn_) = per.iter().fold((0, 0, 0), |(a, b, c), k| (a + k.tp, b + k.fp, c + k.fn_));
    let micro = Prf::from_counts(tp, fp, fn_);
    let active: Vec<Prf> =
        per.iter().filter(|c| c.tp + c.fp + c.fn_ > 0).map(|c| Prf::from_counts(c.tp, c.fp, c.fn_)).collect();
    let macro_avg = if active.is_empty() {
        Prf { precision: 1.0, recall: 1.0, f1: 1.0 }
    } else {
        let n = active.len() as f64;
        Prf {
            precision: active.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: active.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: active.iter().map(|p| p.f1).sum::<f64>() / n,
        }
    };
    FeasibilityMetrics {
        frames: truths.len(),
        micro,
        macro_avg,
        macro_classes: active.len(),
        per_kind: MeasurementKind::ALL.iter().map(|k| (*k, per[k.id()])).filter(|(_, c)| c.tp + c.fp + c.fn_ > 0).collect(),
    }
}

pub fn tool_metrics(predicted: &ToolSamples, truths: &ToolSamples) -> Result<ToolMetrics, MetricsError> {
    check_len("measurements", predicted.measurements.len(), truths.measurements.len())?;
    check_len("feasibility", predicted.feasibility.len(), truths.feasibility.len())?;
    check_len("ed_frames", predicted.ed_frames.len(), truths.ed_frames.len())?;
    check_len("es_frames", predicted.es_frames.len(), truths.es_frames.len())?;
    let mut sums: BTreeMap<MeasurementKind, (usize, f64)> = BTreeMap::new();
    for (index, ((pk, pv), (tk, tv))) in predicted.measurements.iter().zip(&truths.measurements).enumerate() {
        if pk != tk {
            return Err(MetricsError::KindMismatch { index, predicted: *pk, truth: *tk });
        }
        let e = sums.entry(*pk).or_default();
        e.0 += 1;
        e.1 += libm::fabs(pv - tv);
    }
    Ok(ToolMetrics {
        measurement: sums.into_iter().map(|(k, (n, s))| (k, KindError { count: n, mae_cm: s / n as f64 })).collect(),
        feasibility: feasibility_metrics(&predicted.feasibility, &truths.feasibility),
        ed: frame_mae(&predicted.ed_frames, &truths.ed_frames, "ED")?,
        es: frame_mae(&predicted.es_frames, &truths.es_frames, "ES")?,
    })
}

/// The interior ground-truth frame closest to the middle of the clip: one
/// cycle per clip, away from the clamped edges.
pub fn reference_phase_frame(study: &EchoStudy, phase: CardiacPhase) -> Option<u32> {
    let frames = study.phase_frames(phase);
    let last = study.frame_count.saturating_sub(1);
    let middle = study.frame_count / 2;
    frames.iter().copied().filter(|f| *f > 0 && *f < last).min_by_key(|f| (f.abs_diff(middle), *f))
}

/// Runs the oracle tools over `studies` and pairs each output with its truth:
/// measurements at every ground-truth phase frame where the kind is feasible,
/// feasibility on labelled phase frames, and phase detection against one
/// reference frame per clip.
pub fn collect_tool_samples(studies: &[EchoStudy], noise: &NoiseProfile) -> (ToolSamples, ToolSamples) {
    let mut pred = ToolSamples::default();
    let mut truth = ToolSamples::default();
    for study in studies {
        for kind in MeasurementKind::EVALUATED {
            for phase in CardiacPhase::BOTH {
                for frame in study.phase_frames(phase) {
                    if !study.feasibility_at(frame).get(kind) {
                        continue;
                    }
                    let (Ok(m), Some(t)) = (measure(study, frame as i64, kind, noise), study.true_value(kind, frame)) else {
                        continue;
                    };
                    pred.measurements.push((kind, m.value_cm));
                    truth.measurements.push((kind, t));
                }
            }
        }
        for (frame, y) in phase_frame_labels(study) {
            if let Ok(r) = predict_feasibility(study, frame as i64, noise) {
                pred.feasibility.push(r.predicted);
                truth.feasibility.push(y);
            }
        }
        if let Ok(r) = detect_phases(study, noise) {
            let pick = |p: CardiacPhase| reference_phase_frame(study, p).map(|f| vec![f]).unwrap_or_default();
            pred.ed_frames.push(r.ed_frames.clone());
            truth.ed_frames.push(pick(CardiacPhase::EndDiastole));
            pred.es_frames.push(r.es_frames.clone());
            truth.es_frames.push(pick(CardiacPhase::EndSystole));
        }
    }
    (pred, truth)
}

pub fn evaluate_tools(studies: &[EchoStudy], noise: &NoiseProfile) -> Result<ToolMetrics, MetricsError> {
    let (pred, truth) = collect_tool_samples(studies, noise);
    tool_metrics(&pred, &truth)
}

// ---------------------------------------------------------------------------
// Runner

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub budget: u32,
    pub flags: ToolFlags,
    pub noise: NoiseProfile,
}

/// Everything a report's numbers depend on. Its hash is the report fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prompt_version: String,
    pub prompt_hash: String,
    pub backend: String,
    pub judge: String,
    pub budget: u32,
    pub flags: ToolFlags,
    pub noise: NoiseProfile,
    pub seeds: BTreeMap<String, u64>,
}

impl RunConfig {
    pub fn new(agent: &AgentConfig, backend: &dyn Backend, judge: &Judge<'_>, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            prompt_version: PROMPT_VERSION.into(),
            prompt_hash: prompt_hash(),
            backend: backend.describe(),
            judge: judge.describe(),
            budget: agent.budget,
            flags: agent.flags,
            noise: agent.noise.clone(),
            seeds,
        }
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        hex(&Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseOutcome {
    Judged,
    StudyMissing,
    JudgeError,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub study_id: String,
    pub difficulty: Difficulty,
    pub question: String,
    pub outcome: CaseOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_status: Option<SessionStatus>,
    pub steps: u32,
    pub round_trips: u32,
    /// Call-level protocol errors in the history, by class.
    pub protocol_errors: BTreeMap<String, usize>,
    pub ungrounded_values: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Trace with tool latency zeroed.
    pub trace: Vec<TraceEvent>,
}

impl CaseRecord {
    fn empty(case: &BenchmarkCase, outcome: CaseOutcome) -> Self {
        Self {
            case_id: case.case_id.clone(),
            study_id: case.study_id.clone(),
            difficulty: case.difficulty,
            question: case.question.clone(),
            outcome,
            answer: None,
            verdict: None,
            failure: None,
            session_status: None,
            steps: 0,
            round_trips: 0,
            protocol_errors: BTreeMap::new(),
            ungrounded_values: 0,
            error: None,
            trace: Vec::new(),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.verdict.as_ref().is_some_and(|v| v.correct)
    }
}

/// One case in its own session. Never fails: problems are recorded on the case.
pub fn run_case(
    case: &BenchmarkCase,
    study: Option<&EchoStudy>,
    guidelines: Option<&GuidelineIndex>,
    registry: &ToolRegistry,
    backend: &dyn Backend,
    judge: &Judge<'_>,
    budget: u32,
) -> CaseRecord {
    let Some(study) = study else {
        let mut r = CaseRecord::empty(case, CaseOutcome::StudyMissing);
        r.error = Some(format!("study {} not found", case.study_id));
        return r;
    };
    let env = SessionEnv { study, guidelines, registry, backend };
    let state = match Session::new(case.case_id.clone(), case.question.clone(), budget, env) {
        Ok(mut s) => match s.run() {
            Ok(_) => Ok(s.into_state()),
            Err(SessionError::Backend { source, state }) => Err((source.to_string(), Some(*state))),
            Err(e) => Err((e.to_string(), Some(s.into_state()))),
        },
        Err(e) => Err((e.to_string(), None)),
    };
    let state = match state {
        Ok(s) => s,
        Err((msg, s)) => {
            let mut r = CaseRecord::empty(case, CaseOutcome::BackendError);
            r.error = Some(msg);
            if let Some(s) = s {
                r.session_status = Some(s.status);
                r.steps = s.step;
                r.round_trips = s.round_trips;
                r.trace = s.events.iter().map(TraceEvent::without_timing).collect();
            }
            return r;
        }
    };
    let mut r = CaseRecord::empty(case, CaseOutcome::Judged);
    r.session_status = Some(state.status);
    r.steps = state.step;
    r.round_trips = state.round_trips;
    for e in &state.history {
        if let Some(c) = e.result.error_class().filter(|c| c.is_call_error()) {
            *r.protocol_errors.entry(c.as_str().to_string()).or_default() += 1;
        }
    }
    r.trace = state.events.iter().map(TraceEvent::without_timing).collect();
    let answer = state.answer.clone().unwrap_or_else(|| crate::agent::ground_answer(String::new(), &state.history));
    r.ungrounded_values = answer.ungrounded.len();
    match judge.judge(&answer.text, case) {
        Ok(v) => {
            r.failure = Some(classify_failure(&state.history, study, measurement_tolerance(case), &v));
            r.verdict = Some(v);
        }
        Err(e) => {
            r.outcome = CaseOutcome::JudgeError;
            r.error = Some(e.to_string());
        }
    }
    r.answer = Some(answer.text);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Stratum {
    pub cases: usize,
    pub judged: usize,
    pub correct: usize,
}

impl Stratum {
    /// `None` when nothing was judged.
    pub fn accuracy(&self) -> Option<f64> {
        (self.judged > 0).then(|| self.correct as f64 / self.judged as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fingerprint: String,
    pub config: RunConfig,
    pub overall: Stratum,
    pub accuracy: Option<f64>,
    pub by_difficulty: BTreeMap<Difficulty, Stratum>,
    /// One class per judged incorrect case.
    pub failures: BTreeMap<FailureClass, usize>,
    /// Call-level protocol errors summed over every step of every case.
    pub protocol_errors: BTreeMap<String, usize>,
    pub study_missing: usize,
    pub judge_errors: usize,
    pub backend_errors: usize,
    pub ungrounded_answers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_metrics: Option<ToolMetrics>,
    pub cases: Vec<CaseRecord>,
}

/// Aggregates case records, ordered by case id.
pub fn assemble_report(config: RunConfig, mut cases: Vec<CaseRecord>, tool_metrics: Option<ToolMetrics>) -> RunReport {
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut overall = Stratum::default();
    let mut by_difficulty: BTreeMap<Difficulty, Stratum> = Difficulty::ALL.iter().map(|d| (*d, Stratum::default())).collect();
    let mut failures: BTreeMap<FailureClass, usize> =
        [FailureClass::ToolCalling, FailureClass::ToolMeasurement, FailureClass::FinalConclusion].iter().map(|f| (*f, 0)).collect();
    let mut protocol_errors = BTreeMap::new();
    let (mut study_missing, mut judge_errors, mut backend_errors, mut ungrounded_answers) = (0, 0, 0, 0);
    for c in &cases {
        let judged = c.outcome == CaseOutcome::Judged;
        let correct = judged && c.is_correct();
        for s in [&mut overall, by_difficulty.entry(c.difficulty).or_default()] {
            s.cases += 1;
            s.judged += judged as usize;
            s.correct += correct as usize;
        }
        match c.outcome {
            CaseOutcome::Judged => {}
            CaseOutcome::StudyMissing => study_missing += 1,
            CaseOutcome::JudgeError => judge_errors += 1,
            CaseOutcome::BackendError => backend_errors += 1,
        }
        if let Some(f) = c.failure.filter(|f| *f != FailureClass::None) {
            *failures.entry(f).or_default() += 1;
        }
        for (k, n) in &c.protocol_errors {
            *protocol_errors.entry(k.clone()).or_default() += n;
        }
        ungrounded_answers += (c.ungrounded_values > 0) as usize;
    }
    RunReport {
        fingerprint: config.fingerprint(),
        accuracy: overall.accuracy(),
        config,
        overall,
        by_difficulty,
        failures,
        protocol_errors,
        study_missing,
        judge_errors,
        backend_errors,
        ungrounded_answers,
        tool_metrics,
        cases,
    }
}

/// Sequential runner. Each case gets a fresh session over a shared, stateless
/// registry.
pub fn run_benchmark(
    cases: &[BenchmarkCase],
    studies: &BTreeMap<String, EchoStudy>,
    guidelines: Option<&GuidelineIndex>,
    backend: &dyn Backend,
    agent: &AgentConfig,
    judge: &Judge<'_>,
    seeds: BTreeMap<String, u64>,
) -> RunReport {
    let registry = oracle_registry(&agent.noise, agent.flags);
    let records = cases
        .iter()
        .map(|c| run_case(c, studies.get(&c.study_id), guidelines, &registry, backend, judge, agent.budget))
        .collect();
    assemble_report(RunConfig::new(agent, backend, judge, seeds), records, None)
}

/// One report per flag combination, in table order (neither, retrieval only,
/// feasibility only, full).
pub fn ablation_run(
    cases: &[BenchmarkCase],
    studies: &BTreeMap<String, EchoStudy>,
    guidelines: Option<&GuidelineIndex>,
    backend: &dyn Backend,
    agent: &AgentConfig,
    judge: &Judge<'_>,
    seeds: BTreeMap<String, u64>,
) -> Vec<RunReport> {
    ToolFlags::GRID
        .iter()
        .map(|flags| {
            let cfg = AgentConfig { flags: *flags, ..agent.clone() };
            run_benchmark(cases, studies, guidelines, backend, &cfg, judge, seeds.clone())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tables

fn acc(s: Option<&Stratum>) -> String {
    match s.and_then(Stratum::accuracy) {
        Some(a) => format!("{a:.2}"),
        None => "n/a".into(),
    }
}

/// Accuracy by difficulty and failure counts, one row per report.
pub fn accuracy_table(reports: &[(&str, &RunReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<22} {:>7} {:>6} {:>6} {:>9} {:>8} {:>8}", "run", "overall", "easy", "medium", "difficult", "toolcall", "final");
    for (name, r) in reports {
        let _ = writeln!(
            out,
            "{:<22} {:>7} {:>6} {:>6} {:>9} {:>8} {:>8}",
            name,
            acc(Some(&r.overall)),
            acc(r.by_difficulty.get(&Difficulty::Easy)),
            acc(r.by_difficulty.get(&Difficulty::Medium)),
            acc(r.by_difficulty.get(&Difficulty::Difficult)),
            r.failures.get(&FailureClass::ToolCalling).copied().unwrap_or(0),
            r.failures.get(&FailureClass::FinalConclusion).copied().unwrap_or(0),
        );
    }
    out
}

pub fn ablation_table(reports: &[RunReport]) -> String {
    let mut out = String::new();
    let mark = |b: bool| if b { "yes" } else { "no" };
    let _ = writeln!(out, "{:<12} {:<10} {:>7} {:>6} {:>6} {:>9}", "feasibility", "retrieval", "overall", "easy", "medium", "difficult");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<12} {:<10} {:>7} {:>6} {:>6} {:>9}",
            mark(r.config.flags.feasibility),
            mark(r.config.flags.retrieval),
            acc(Some(&r.overall)),
            acc(r.by_difficulty.get(&Difficulty::Easy)),
            acc(r.by_difficulty.get(&Difficulty::Medium)),
            acc(r.by_difficulty.get(&Difficulty::Difficult)),
        );
    }
    out
}

pub fn metrics_table(m: &ToolMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Measurement MAE (cm)");
    for (k, e) in &m.measurement {
        let _ = writeln!(out, "  {:<12} {:>6.3}  (n={})", k.name(), e.mae_cm, e.count);
    }
    let f = &m.feasibility;
    let _ = writeln!(out, "Feasibility ({} frames)  precision recall f1", f.frames);
    let _ = writeln!(out, "  micro                {:>9.2} {:>6.2} {:>4.2}", f.micro.precision, f.micro.recall, f.micro.f1);
    let _ = writeln!(out, "  macro                {:>9.2} {:>6.2} {:>4.2}", f.macro_avg.precision, f.macro_avg.recall, f.macro_avg.f1);
    let _ = writeln!(out, "Phase frame MAE");
    for (name, e) in [("ED", m.ed), ("ES", m.es)] {
        match e {
            Some(e) => {
                let _ = writeln!(out, "  {name}  {:>6.2}  (n={})", e.mae_frames, e.count);
            }
            None => {
                let _ = writeln!(out, "  {name}  n/a");
            }
        }
    }
    out
}

/// Canonical report bytes: stable key order, no timing.
pub fn report_json(report: &RunReport) -> String {
    let v: Value = serde_json::to_value(report).unwrap_or(Value::Null);
    serde_json::to_string_pretty(&v).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::HistoryEntry;
    use crate::domain::tests::sample_study;
    use crate::gateway::ScriptedBackend;
    use crate::guidelines::reference_index;
    use crate::policy::OptimalPolicy;
    use crate::protocol::{ProtocolError, ToolCall, ToolResult};
    use crate::quantity::Unit;
    use serde_json::json;

    fn cm(v: f64) -> GoldValue {
        GoldValue { value: v, unit: Some(Unit::Cm) }
    }

    fn case(id: &str, question: &str, gold: GoldAnswer, tolerance: Option<Tolerance>) -> BenchmarkCase {
        BenchmarkCase {
            case_id: id.into(),
            study_id: "study-00000".into(),
            question: question.into(),
            gold_answer: gold,
            tolerance,
            difficulty: Difficulty::Easy,
            note: String::new(),
        }
    }

    fn length_case(id: &str, question: &str, v: f64) -> BenchmarkCase {
        case(id, question, GoldAnswer { text: format!("{v} cm"), values: vec![cm(v)], label: None }, Some(Tolerance::LENGTH))
    }

    #[test]
    fn numeric_judge_examples() {
        let tol = Tolerance { abs: 0.2, rel: 0.0 };
        assert!(judge_numeric("IVS is 1.1 cm", &[cm(1.0)], tol).correct);
        assert!(!judge_numeric("IVS is 1.4 cm", &[cm(1.0)], tol).correct);
        let v = judge_numeric("mildly thickened septum", &[cm(1.0)], tol);
        assert!(!v.correct);
        assert_eq!(v.rationale, "no numeric claim");
        assert_eq!(v.judge, JudgeKind::Rule);
    }

    #[test]
    fn numeric_judge_respects_units_and_distinct_matches() {
        let tol = Tolerance::LENGTH;
        assert!(judge_numeric("LVIDd 46 mm", &[cm(4.6)], tol).correct);
        // a bare number is not a length
        assert!(!judge_numeric("LVIDd 4.6", &[cm(4.6)], tol).correct);
        let ratio = [GoldValue { value: 0.48, unit: None }];
        assert!(judge_numeric("RWT = 0.47", &ratio, Tolerance::RATIO).correct);
        assert!(!judge_numeric("RWT 0.48 cm", &ratio, Tolerance::RATIO).correct);
        // one claim cannot satisfy two golds
        assert!(!judge_numeric("both are 1.0 cm", &[cm(1.0), cm(1.05)], tol).correct);
        assert!(judge_numeric("1.0 cm and 1.1 cm", &[cm(1.05), cm(1.0)], Tolerance { abs: 0.06, rel: 0.0 }).correct);
    }

    #[test]
    fn label_judge() {
        assert!(judge_label("The IVS is 1.3 cm. Classification: increased.", Category::Increased).correct);
        assert!(judge_label("Septal thickness is normal.", Category::Normal).correct);
        assert!(!judge_label("Not increased; normal.", Category::Normal).correct);
        assert!(judge_label("Reference says normal up to 1.0; Classification: increased", Category::Increased).correct);
        assert!(!judge_label("cannot say", Category::Normal).correct);
    }

    #[test]
    fn model_judge_parses_constrained_output() {
        let c = length_case("c", "q", 1.0);
        let yes = ScriptedBackend::repeating("close enough\nVERDICT: correct", "");
        let v = judge_model("1.0 cm", &c, &yes).unwrap();
        assert!(v.correct);
        assert_eq!(v.judge, JudgeKind::Model);
        let bad = ScriptedBackend::repeating("looks fine to me", "");
        assert!(matches!(judge_model("1.0 cm", &c, &bad), Err(JudgeError::Unparseable(_))));
        let msgs = judge_messages(&c.question, &c.gold_answer, c.tolerance, "ANSWER-TEXT");
        assert!(msgs[1].content.contains("ANSWER-TEXT") && msgs[1].content.contains("1 cm"));
    }

    fn entry(name: &str, result: ToolResult) -> HistoryEntry {
        HistoryEntry { thought: String::new(), action: ToolCall::new(name, Default::default()), result }
    }

    #[test]
    fn failure_taxonomy() {
        let s = sample_study();
        let wrong = Verdict::rule(false, "x");
        let right = Verdict::rule(true, "x");
        let good_measure = entry(MEASURE, ToolResult::ok(json!({"kind": "LVID", "frame": 0, "value_cm": 4.6})));
        let bad_measure = entry(MEASURE, ToolResult::ok(json!({"kind": "LVID", "frame": 0, "value_cm": 5.6})));
        let hallucinated = entry("segment_mitral", ToolResult::error(ProtocolError::unknown_tool("segment_mitral")));
        let tol = Tolerance::LENGTH;
        assert_eq!(classify_failure(&[good_measure.clone()], &s, tol, &right), FailureClass::None);
        assert_eq!(classify_failure(&[hallucinated, bad_measure.clone()], &s, tol, &wrong), FailureClass::ToolCalling);
        assert_eq!(classify_failure(&[bad_measure], &s, tol, &wrong), FailureClass::ToolMeasurement);
        assert_eq!(classify_failure(&[good_measure], &s, tol, &wrong), FailureClass::FinalConclusion);
        let failed_tool = entry(MEASURE, ToolResult::error(ProtocolError::execution("not measurable")));
        assert_eq!(classify_failure(&[failed_tool], &s, tol, &wrong), FailureClass::FinalConclusion);
    }

    #[test]
    fn frame_mae_closest_rule() {
        let e = frame_mae(&[vec![7, 13]], &[vec![10]], "ED").unwrap().unwrap();
        assert_eq!((e.count, e.mae_frames), (1, 3.0));
        // (2 + 3 + 4) / 3
        let e = frame_mae(&[vec![12, 37], vec![9]], &[vec![10, 40], vec![5]], "ED").unwrap().unwrap();
        assert_eq!(e.mae_frames, 3.0);
        assert!(matches!(frame_mae(&[vec![]], &[vec![3]], "ES"), Err(MetricsError::NoPrediction { clip: 0, .. })));
        assert_eq!(frame_mae(&[vec![]], &[vec![]], "ES").unwrap(), None);
    }

    fn fv(kinds: &[MeasurementKind]) -> FeasibilityVector {
        FeasibilityVector::from_kinds(kinds.iter().copied())
    }

    #[test]
    fn feasibility_counts_arithmetic() {
        use MeasurementKind::*;
        // 2 positives, 2 negatives; one FP and one FN
        let truth = [fv(&[Ivs]), fv(&[]), fv(&[Ivs]), fv(&[])];
        let pred = [fv(&[Ivs]), fv(&[Ivs]), fv(&[]), fv(&[])];
        let m = feasibility_metrics(&pred, &truth);
        assert_eq!(m.micro, Prf { precision: 0.5, recall: 0.5, f1: 0.5 });
    }

    #[test]
    fn micro_and_macro_diverge_on_imbalanced_classes() {
        use MeasurementKind::*;
        let truth = [fv(&[Ivs, Lvid]), fv(&[Ivs]), fv(&[Ivs]), fv(&[Ivs])];
        let pred = [fv(&[Ivs]), fv(&[Ivs, Lvid]), fv(&[Ivs]), fv(&[Ivs])];
        let m = feasibility_metrics(&pred, &truth);
        // micro: tp 4, fp 1, fn 1
        assert_eq!(m.micro, Prf { precision: 0.8, recall: 0.8, f1: 0.8 });
        // macro: IVS perfect, LVID all wrong
        assert_eq!(m.macro_avg, Prf { precision: 0.5, recall: 0.5, f1: 0.5 });
        assert_eq!(m.macro_classes, 2);
    }

    #[test]
    fn metric_shapes_and_errors() {
        use MeasurementKind::*;
        let pred = ToolSamples { measurements: vec![(Ivs, 1.1), (Ivs, 0.9), (Lvid, 5.0)], ..Default::default() };
        let truth = ToolSamples { measurements: vec![(Ivs, 1.0), (Ivs, 1.0), (Lvid, 4.5)], ..Default::default() };
        let m = tool_metrics(&pred, &truth).unwrap();
        assert!((m.measurement[&Ivs].mae_cm - 0.1).abs() < 1e-12);
        assert_eq!(m.measurement[&Lvid].mae_cm, 0.5);
        let short = ToolSamples { measurements: vec![(Ivs, 1.0)], ..Default::default() };
        assert!(matches!(tool_metrics(&pred, &short), Err(MetricsError::LengthMismatch { field: "measurements", .. })));
        let swapped = ToolSamples { measurements: vec![(Ivs, 1.0), (Ivs, 1.0), (La, 4.5)], ..Default::default() };
        assert!(matches!(tool_metrics(&pred, &swapped), Err(MetricsError::KindMismatch { index: 2, .. })));
    }

    #[test]
    fn zero_noise_tools_score_perfectly() {
        let s = sample_study();
        let m = evaluate_tools(&[s], &NoiseProfile::zero(1)).unwrap();
        assert!(m.measurement.values().all(|e| e.mae_cm < 1e-9));
        assert_eq!(m.feasibility.micro.f1, 1.0);
        assert_eq!(m.ed.unwrap().mae_frames, 0.0);
        assert_eq!(m.es.unwrap().mae_frames, 0.0);
    }

    fn studies() -> BTreeMap<String, EchoStudy> {
        let s = sample_study();
        BTreeMap::from([(s.study_id.clone(), s)])
    }

    fn agent(flags: ToolFlags) -> AgentConfig {
        AgentConfig { budget: 15, flags, noise: NoiseProfile::zero(3) }
    }

    #[test]
    fn empty_run_has_undefined_accuracy() {
        let g = reference_index();
        let r = run_benchmark(&[], &studies(), Some(&g), &OptimalPolicy, &agent(ToolFlags::FULL), &Judge::Rule, BTreeMap::new());
        assert_eq!(r.overall.cases, 0);
        assert_eq!(r.accuracy, None);
    }

    #[test]
    fn missing_study_is_an_error_entry_and_the_run_continues() {
        let g = reference_index();
        let sid = sample_study().study_id;
        let mut ok = length_case("case-000", "What is the IVS thickness at end-diastole?", 1.0);
        ok.study_id = sid;
        let mut lost = length_case("case-001", "What is the IVS thickness at end-diastole?", 1.0);
        lost.study_id = "study-99999".into();
        let r = run_benchmark(&[lost, ok], &studies(), Some(&g), &OptimalPolicy, &agent(ToolFlags::FULL), &Judge::Rule, BTreeMap::new());
        assert_eq!(r.study_missing, 1);
        assert_eq!((r.overall.cases, r.overall.judged, r.overall.correct), (2, 1, 1));
        assert_eq!(r.accuracy, Some(1.0));
        assert_eq!(r.cases[0].case_id, "case-000");
        assert_eq!(r.cases[1].outcome, CaseOutcome::StudyMissing);
    }

    #[test]
    fn wrong_answers_are_classified_and_counted() {
        let g = reference_index();
        let mut c = length_case("case-000", "What is the IVS thickness at end-diastole?", 1.0);
        c.study_id = sample_study().study_id;
        let liar = ScriptedBackend::steps([r#"{"name":"measure_everything","arguments":{}}"#], "It is 2.0 cm.");
        let r = run_benchmark(&[c], &studies(), Some(&g), &liar, &agent(ToolFlags::FULL), &Judge::Rule, BTreeMap::new());
        assert_eq!(r.accuracy, Some(0.0));
        assert_eq!(r.failures[&FailureClass::ToolCalling], 1);
        assert_eq!(r.protocol_errors["UnknownTool"], 1);
        assert_eq!(r.ungrounded_answers, 1);
    }

    #[test]
    fn judge_errors_are_excluded_from_accuracy() {
        let g = reference_index();
        let mut c = length_case("case-000", "What is the IVS thickness at end-diastole?", 1.0);
        c.study_id = sample_study().study_id;
        let mumbler = ScriptedBackend::repeating("hmm", "");
        let r = run_benchmark(&[c], &studies(), Some(&g), &OptimalPolicy, &agent(ToolFlags::FULL), &Judge::Model(&mumbler), BTreeMap::new());
        assert_eq!(r.judge_errors, 1);
        assert_eq!(r.accuracy, None);
        assert!(r.config.judge.starts_with("model:"));
    }

    #[test]
    fn ablation_grid_shape() {
        let g = reference_index();
        let mut c = length_case("case-000", "What is the LVID at end-systole?", 3.0);
        c.study_id = sample_study().study_id;
        let rows = ablation_run(&[c], &studies(), Some(&g), &OptimalPolicy, &agent(ToolFlags::FULL), &Judge::Rule, BTreeMap::new());
        assert_eq!(rows.len(), 4);
        let mut fps: Vec<&str> = rows.iter().map(|r| r.fingerprint.as_str()).collect();
        fps.sort();
        fps.dedup();
        assert_eq!(fps.len(), 4);
        assert!(rows.iter().all(|r| r.accuracy == Some(1.0)));
        let t = ablation_table(&rows);
        assert_eq!(t.lines().count(), 5);
    }
}
