//! The agent's tool set: descriptors plus handlers wired to the oracles and
//! the guideline index.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{MeasurementKind, KIND_COUNT};
use crate::guidelines::DEFAULT_TOP_K;
use crate::protocol::{
    ParamSpec, ParamType, ResultField, ToolDescriptor, ToolFailure, ToolHandler, ToolInput, ToolRegistry,
    ToolTarget, ValidatedCall,
};
use crate::vision::{detect_phases, measure, predict_feasibility, NoiseProfile};

pub const DETECT_PHASES: &str = "detect_phases";
pub const PREDICT_FEASIBILITY: &str = "predict_feasibility";
pub const MEASURE: &str = "measure";
pub const SEARCH_GUIDELINE: &str = "search_guideline";

/// Which optional tools a session gets. Disabled tools are not registered at
/// all, so they are absent from the prompt too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ToolFlags {
    pub feasibility: bool,
    pub retrieval: bool,
}

impl ToolFlags {
    pub const FULL: ToolFlags = ToolFlags { feasibility: true, retrieval: true };
    pub const NEITHER: ToolFlags = ToolFlags { feasibility: false, retrieval: false };

    /// The ablation grid in table order: neither, retrieval only, feasibility only, both.
    pub const GRID: [ToolFlags; 4] = [
        ToolFlags::NEITHER,
        ToolFlags { feasibility: false, retrieval: true },
        ToolFlags { feasibility: true, retrieval: false },
        ToolFlags::FULL,
    ];

    pub fn label(self) -> &'static str {
        match (self.feasibility, self.retrieval) {
            (true, true) => "full",
            (true, false) => "feasibility-only",
            (false, true) => "retrieval-only",
            (false, false) => "neither",
        }
    }
}

impl Default for ToolFlags {
    fn default() -> Self {
        Self::FULL
    }
}

fn frame_param() -> ParamSpec {
    ParamSpec::required("frame", "Zero-based frame index.", ParamType::Integer { min: Some(0), max: None })
}

fn field(name: &str, description: &str) -> ResultField {
    ResultField { name: name.into(), description: description.into() }
}

pub fn detect_phases_descriptor() -> ToolDescriptor {
    ToolDescriptor {
        name: DETECT_PHASES.into(),
        description: "Find the end-diastolic (ED) and end-systolic (ES) frame indices of the clip.".into(),
        params: vec![],
        result: vec![field("ed_frames", "ED frame indices"), field("es_frames", "ES frame indices")],
        target: ToolTarget::Study,
    }
}

pub fn predict_feasibility_descriptor() -> ToolDescriptor {
    ToolDescriptor {
        name: PREDICT_FEASIBILITY.into(),
        description: "Predict which of the 16 linear measurements can be reliably taken on a frame.".into(),
        params: vec![frame_param()],
        result: vec![
            field("feasible", "names of measurable kinds"),
            field("vector", "16-entry 0/1 vector in kind-id order"),
            field("confidence", "per-kind probability of being measurable"),
        ],
        target: ToolTarget::Study,
    }
}

pub fn measure_descriptor() -> ToolDescriptor {
    ToolDescriptor {
        name: MEASURE.into(),
        description: "Take one linear measurement on a frame; returns caliper endpoints and the value in cm.".into(),
        params: vec![
            ParamSpec::required(
                "kind",
                "Measurement name.",
                ParamType::Enum { values: MeasurementKind::EVALUATED.iter().map(|k| k.name().to_string()).collect() },
            ),
            frame_param(),
        ],
        result: vec![field("value_cm", "length in cm"), field("endpoints", "two [x, y] pixel points")],
        target: ToolTarget::Study,
    }
}

pub fn search_guideline_descriptor() -> ToolDescriptor {
    ToolDescriptor {
        name: SEARCH_GUIDELINE.into(),
        description: "Search the clinical guideline passages; returns the top-k passages.".into(),
        params: vec![
            ParamSpec::required("query", "Free-text search query.", ParamType::Text),
            ParamSpec::optional(
                "k",
                "Number of passages to return.",
                ParamType::Integer { min: Some(1), max: Some(20) },
                Some(json!(DEFAULT_TOP_K)),
            ),
        ],
        result: vec![field("hits", "ranked passages with passage_id, title, text and score")],
        target: ToolTarget::Guidelines,
    }
}

fn study_only<'a>(input: ToolInput<'a>) -> Result<&'a crate::domain::EchoStudy, ToolFailure> {
    match input {
        ToolInput::Study(s) => Ok(s),
        ToolInput::Guidelines(_) => Err(ToolFailure::new("tool routed to the wrong context")),
    }
}

fn detect_handler(noise: NoiseProfile) -> ToolHandler {
    Box::new(move |_call, input| {
        let study = study_only(input)?;
        let r = detect_phases(study, &noise).map_err(|e| ToolFailure::new(e.to_string()))?;
        Ok(json!({
            "ed_frames": r.ed_frames,
            "es_frames": r.es_frames,
            "frame_count": study.frame_count,
        }))
    })
}

fn feasibility_handler(noise: NoiseProfile) -> ToolHandler {
    Box::new(move |call: &ValidatedCall, input| {
        let study = study_only(input)?;
        let frame = call.int_arg("frame").unwrap_or(-1);
        let r = predict_feasibility(study, frame, &noise).map_err(|e| ToolFailure::new(e.to_string()))?;
        let feasible: Vec<&str> = r.predicted.kinds().map(|k| k.name()).collect();
        let confidence: serde_json::Map<String, Value> = MeasurementKind::ALL
            .iter()
            .map(|k| (k.name().to_string(), json!(crate::quantity::round_to(r.confidence[k.id()], 3))))
            .collect();
        debug_assert_eq!(confidence.len(), KIND_COUNT);
        Ok(json!({
            "frame": r.frame,
            "feasible": feasible,
            "vector": r.predicted.to_binary().to_vec(),
            "confidence": confidence,
        }))
    })
}

fn measure_handler(noise: NoiseProfile) -> ToolHandler {
    Box::new(move |call: &ValidatedCall, input| {
        let study = study_only(input)?;
        let kind = call
            .str_arg("kind")
            .and_then(|k| MeasurementKind::from_name(k).ok())
            .ok_or_else(|| ToolFailure::new("missing kind"))?;
        let frame = call.int_arg("frame").unwrap_or(-1);
        let m = measure(study, frame, kind, &noise).map_err(|e| ToolFailure::new(e.to_string()))?;
        Ok(json!({
            "kind": m.kind,
            "frame": m.frame,
            "value_cm": m.value_cm,
            "endpoints": m.endpoints.map(|[a, b]| vec![[a.x, a.y], [b.x, b.y]]),
            "source": m.source,
        }))
    })
}

pub fn search_handler() -> ToolHandler {
    Box::new(|call: &ValidatedCall, input| {
        let ToolInput::Guidelines(index) = input else {
            return Err(ToolFailure::new("tool routed to the wrong context"));
        };
        let query = call.str_arg("query").unwrap_or_default();
        let k = call.int_arg("k").unwrap_or(DEFAULT_TOP_K as i64).max(1) as usize;
        let hits = index.search(query, k).map_err(|e| ToolFailure::new(e.to_string()))?;
        let hits: Vec<Value> = hits
            .into_iter()
            .map(|h| {
                json!({
                    "rank": h.rank,
                    "passage_id": h.passage_id,
                    "title": h.title,
                    "text": h.text,
                    "score": crate::quantity::round_to(h.score, 4),
                })
            })
            .collect();
        Ok(json!({ "hits": hits }))
    })
}

/// The standard tool set over the oracle tools.
pub fn oracle_registry(noise: &NoiseProfile, flags: ToolFlags) -> ToolRegistry {
    let mut r = ToolRegistry::new();
    let mut add = |d: ToolDescriptor, h: ToolHandler| {
        let name = d.name.clone();
        r.register(d, h).unwrap_or_else(|e| panic!("registering {name}: {e}"));
    };
    add(detect_phases_descriptor(), detect_handler(noise.clone()));
    if flags.feasibility {
        add(predict_feasibility_descriptor(), feasibility_handler(noise.clone()));
    }
    add(measure_descriptor(), measure_handler(noise.clone()));
    if flags.retrieval {
        add(search_guideline_descriptor(), search_handler());
    }
    r
}

/// Descriptor names for the flag set, in registration order.
pub fn tool_names(flags: ToolFlags) -> Vec<String> {
    oracle_registry(&NoiseProfile::zero(0), flags).names().into_iter().map(String::from).collect()
}
