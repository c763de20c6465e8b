//! Vision tools backed by external model services instead of the oracles.
//!
//! Wire format: `POST {endpoint}/{tool}` with a body of raw 8-bit grayscale
//! pixels (frames concatenated, row-major) and the geometry in headers:
//!
//! | header           | meaning                                  |
//! |------------------|------------------------------------------|
//! | `x-echo-study`   | study id                                 |
//! | `x-echo-width`   | width of each frame in the body          |
//! | `x-echo-height`  | height of each frame in the body         |
//! | `x-echo-frames`  | number of frames in the body             |
//! | `x-echo-frame`   | source frame index (single-frame tools)  |
//! | `x-echo-kind`    | measurement name (`measure` only)        |
//!
//! Phase and feasibility models get 224×224 frames; measurement models get
//! 640 wide by 480 high. Expected JSON replies:
//!
//! * `detect_phases`: `{"ed_frames": [int], "es_frames": [int]}`
//! * `predict_feasibility`: `{"vector": [0|1; 16], "confidence": [float; 16]?}`
//! * `measure`: `{"value_cm": float, "endpoints": [[x, y], [x, y]]?}` with
//!   endpoints in request-image pixels.

use std::path::PathBuf;
use std::time::Duration;

use image::imageops::{resize, FilterType};
use image::GrayImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use echoagent_core::domain::{EchoStudy, FeasibilityVector, MeasurementKind, KIND_COUNT};
use echoagent_core::protocol::{ToolFailure, ToolHandler, ToolInput, ToolRegistry, ValidatedCall};
use echoagent_core::tools::{
    detect_phases_descriptor, measure_descriptor, predict_feasibility_descriptor, search_guideline_descriptor, search_handler,
    ToolFlags,
};

/// Model input size for phase detection and feasibility, `(width, height)`.
pub const SCREEN_SIZE: (u32, u32) = (224, 224);
/// Model input size for measurement, `(width, height)`: 480 rows of 640.
pub const MEASURE_SIZE: (u32, u32) = (640, 480);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Directory the studies' pixel paths are relative to.
    pub pixel_dir: PathBuf,
}

fn default_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdapterError {
    #[error("study {0} has no pixel payload")]
    NoPixels(String),
    #[error("adapter unreachable: {0}")]
    Unreachable(String),
    #[error("AdapterProtocolError: {0}")]
    Protocol(String),
}

impl From<AdapterError> for ToolFailure {
    fn from(e: AdapterError) -> Self {
        ToolFailure::new(e.to_string())
    }
}

/// Bilinear resample of one grayscale frame.
pub fn resize_frame(pixels: &[u8], width: u32, height: u32, to: (u32, u32)) -> Vec<u8> {
    match GrayImage::from_raw(width, height, pixels.to_vec()) {
        Some(img) if (width, height) == to => img.into_raw(),
        Some(img) => resize(&img, to.0, to.1, FilterType::Triangle).into_raw(),
        None => vec![0; (to.0 * to.1) as usize],
    }
}

#[derive(Clone)]
struct Client {
    config: AdapterConfig,
    agent: ureq::Agent,
}

struct Request<'a> {
    tool: &'a str,
    study: &'a EchoStudy,
    size: (u32, u32),
    frames: Vec<u8>,
    count: u32,
    frame: Option<u32>,
    kind: Option<MeasurementKind>,
}

impl Client {
    fn new(config: AdapterConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn pixels(&self, study: &EchoStudy) -> Result<Vec<u8>, AdapterError> {
        let px = study.pixels.as_ref().ok_or_else(|| AdapterError::NoPixels(study.study_id.clone()))?;
        let path = self.config.pixel_dir.join(&px.path);
        let bytes = std::fs::read(&path).map_err(|e| AdapterError::NoPixels(format!("{}: {e}", path.display())))?;
        let want = study.frame_count as usize * px.width as usize * px.height as usize;
        if bytes.len() != want {
            return Err(AdapterError::NoPixels(format!("{}: {} bytes, expected {want}", path.display(), bytes.len())));
        }
        Ok(bytes)
    }

    fn frame(&self, study: &EchoStudy, all: &[u8], frame: u32, to: (u32, u32)) -> Vec<u8> {
        let px = study.pixels.as_ref().expect("pixels checked by caller");
        let n = (px.width * px.height) as usize;
        let start = frame as usize * n;
        resize_frame(&all[start..start + n], px.width, px.height, to)
    }

    fn post(&self, r: Request<'_>) -> Result<Value, AdapterError> {
        let url = format!("{}/{}", self.config.endpoint.trim_end_matches('/'), r.tool);
        let mut req = self
            .agent
            .post(&url)
            .header("content-type", "application/octet-stream")
            .header("x-echo-study", &r.study.study_id)
            .header("x-echo-width", &r.size.0.to_string())
            .header("x-echo-height", &r.size.1.to_string())
            .header("x-echo-frames", &r.count.to_string());
        if let Some(f) = r.frame {
            req = req.header("x-echo-frame", &f.to_string());
        }
        if let Some(k) = r.kind {
            req = req.header("x-echo-kind", k.name());
        }
        let mut resp = req.send(&r.frames[..]).map_err(|e| AdapterError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| AdapterError::Unreachable(e.to_string()))?;
        if status != 200 {
            return Err(AdapterError::Unreachable(format!("HTTP {status}")));
        }
        serde_json::from_str(&text).map_err(|e| AdapterError::Protocol(format!("body is not JSON: {e}")))
    }

    fn frame_arg(call: &ValidatedCall, study: &EchoStudy) -> Result<u32, AdapterError> {
        let f = call.int_arg("frame").unwrap_or(-1);
        if f < 0 || f >= study.frame_count as i64 {
            return Err(AdapterError::Protocol(format!("frame {f} outside [0, {})", study.frame_count)));
        }
        Ok(f as u32)
    }

    fn detect(&self, study: &EchoStudy) -> Result<Value, AdapterError> {
        let all = self.pixels(study)?;
        let frames: Vec<u8> = (0..study.frame_count).flat_map(|f| self.frame(study, &all, f, SCREEN_SIZE)).collect();
        let v = self.post(Request {
            tool: "detect_phases",
            study,
            size: SCREEN_SIZE,
            frames,
            count: study.frame_count,
            frame: None,
            kind: None,
        })?;
        let list = |key: &str| -> Result<Vec<u32>, AdapterError> {
            let arr = v[key].as_array().ok_or_else(|| AdapterError::Protocol(format!("missing {key}")))?;
            let mut out = Vec::new();
            for x in arr {
                match x.as_u64() {
                    Some(f) if f < study.frame_count as u64 => out.push(f as u32),
                    _ => return Err(AdapterError::Protocol(format!("{key} holds {x}, not a frame index"))),
                }
            }
            out.sort_unstable();
            out.dedup();
            Ok(out)
        };
        Ok(json!({"ed_frames": list("ed_frames")?, "es_frames": list("es_frames")?, "frame_count": study.frame_count}))
    }

    fn feasibility(&self, call: &ValidatedCall, study: &EchoStudy) -> Result<Value, AdapterError> {
        let frame = Self::frame_arg(call, study)?;
        let all = self.pixels(study)?;
        let v = self.post(Request {
            tool: "predict_feasibility",
            study,
            size: SCREEN_SIZE,
            frames: self.frame(study, &all, frame, SCREEN_SIZE),
            count: 1,
            frame: Some(frame),
            kind: None,
        })?;
        let bits: Vec<u8> = v["vector"]
            .as_array()
            .filter(|a| a.len() == KIND_COUNT)
            .and_then(|a| a.iter().map(|b| b.as_u64().filter(|b| *b <= 1).map(|b| b as u8)).collect())
            .ok_or_else(|| AdapterError::Protocol(format!("vector must hold {KIND_COUNT} bits")))?;
        let predicted = FeasibilityVector::from_binary(&bits).ok_or_else(|| AdapterError::Protocol("bad vector".into()))?;
        let confidence: serde_json::Map<String, Value> = MeasurementKind::ALL
            .iter()
            .map(|k| {
                let c = v["confidence"][k.id()].as_f64().unwrap_or(if predicted.get(*k) { 1.0 } else { 0.0 });
                (k.name().to_string(), json!(c))
            })
            .collect();
        Ok(json!({
            "frame": frame,
            "feasible": predicted.kinds().map(|k| k.name()).collect::<Vec<_>>(),
            "vector": bits,
            "confidence": confidence,
        }))
    }

    fn measure(&self, call: &ValidatedCall, study: &EchoStudy) -> Result<Value, AdapterError> {
        let frame = Self::frame_arg(call, study)?;
        let kind = call
            .str_arg("kind")
            .and_then(|k| MeasurementKind::from_name(k).ok())
            .ok_or_else(|| AdapterError::Protocol("missing kind".into()))?;
        let all = self.pixels(study)?;
        let v = self.post(Request {
            tool: "measure",
            study,
            size: MEASURE_SIZE,
            frames: self.frame(study, &all, frame, MEASURE_SIZE),
            count: 1,
            frame: Some(frame),
            kind: Some(kind),
        })?;
        let value = v["value_cm"]
            .as_f64()
            .filter(|x| x.is_finite() && *x > 0.0)
            .ok_or_else(|| AdapterError::Protocol("value_cm must be a positive number".into()))?;
        // Endpoints come back in request pixels; map them onto the stored frame.
        let px = study.pixels.as_ref().expect("pixels checked above");
        let sx = px.width as f64 / MEASURE_SIZE.0 as f64;
        let sy = px.height as f64 / MEASURE_SIZE.1 as f64;
        let endpoints = match v.get("endpoints") {
            None | Some(Value::Null) => Value::Null,
            Some(e) => {
                let pts: Option<Vec<[f64; 2]>> = e.as_array().filter(|a| a.len() == 2).and_then(|a| {
                    a.iter().map(|p| Some([p.get(0)?.as_f64()? * sx, p.get(1)?.as_f64()? * sy])).collect()
                });
                json!(pts.ok_or_else(|| AdapterError::Protocol("endpoints must be two [x, y] points".into()))?)
            }
        };
        Ok(json!({"kind": kind, "frame": frame, "value_cm": value, "endpoints": endpoints, "source": "adapter"}))
    }
}

fn with_study<F>(client: Client, f: F) -> ToolHandler
where
    F: Fn(&Client, &ValidatedCall, &EchoStudy) -> Result<Value, AdapterError> + Send + Sync + 'static,
{
    Box::new(move |call, input| match input {
        ToolInput::Study(s) => f(&client, call, s).map_err(ToolFailure::from),
        ToolInput::Guidelines(_) => Err(ToolFailure::new("tool routed to the wrong context")),
    })
}

/// The standard tool set with the three video tools served by the adapter.
pub fn adapter_registry(config: AdapterConfig, flags: ToolFlags) -> ToolRegistry {
    let client = Client::new(config);
    let mut r = ToolRegistry::new();
    let mut add = |d, h| r.register(d, h).expect("tool names are distinct");
    add(detect_phases_descriptor(), with_study(client.clone(), |c, _, s| c.detect(s)));
    if flags.feasibility {
        add(predict_feasibility_descriptor(), with_study(client.clone(), |c, call, s| c.feasibility(call, s)));
    }
    add(measure_descriptor(), with_study(client, |c, call, s| c.measure(call, s)));
    if flags.retrieval {
        add(search_guideline_descriptor(), search_handler());
    }
    r
}
