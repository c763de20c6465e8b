mod common;

use std::collections::BTreeMap;

use echoagent::adapter::{adapter_registry, resize_frame, AdapterConfig, MEASURE_SIZE, SCREEN_SIZE};
use echoagent::store::{write_dataset, STUDY_DIR};
use echoagent_core::domain::EchoStudy;
use echoagent_core::protocol::{ProtocolErrorClass, ToolCall, ToolContext, ToolRegistry, ToolResult};
use echoagent_core::sim::{generate_dataset, SimConfig};
use echoagent_core::tools::ToolFlags;
use serde_json::{json, Value};

struct Fixture {
    _dir: tempfile::TempDir,
    pixel_dir: std::path::PathBuf,
    study: EchoStudy,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig { studies: 1, pixels: true, pixel_size: (40, 30), ..SimConfig::default() };
    let data = generate_dataset(&cfg).unwrap();
    write_dataset(dir.path(), &cfg, &data).unwrap();
    Fixture { pixel_dir: dir.path().join(STUDY_DIR), study: data[0].0.clone(), _dir: dir }
}

fn registry(url: &str, fx: &Fixture) -> ToolRegistry {
    let cfg = AdapterConfig { endpoint: url.into(), timeout_secs: 5, pixel_dir: fx.pixel_dir.clone() };
    adapter_registry(cfg, ToolFlags::FULL)
}

fn call(reg: &ToolRegistry, study: &EchoStudy, name: &str, args: Value) -> ToolResult {
    let args: BTreeMap<String, Value> = serde_json::from_value(args).unwrap();
    reg.execute(&ToolCall::new(name, args), &ToolContext { study, guidelines: None })
}

fn header(r: &common::Recorded, k: &str) -> usize {
    r.headers[k].parse().unwrap()
}

#[test]
fn measure_sends_640_by_480_frames() {
    let fx = fixture();
    let stub = common::serve(|_, _| (200, json!({"value_cm": 1.1, "endpoints": [[320, 100], [320, 140]]}).to_string()));
    let reg = registry(&stub.url, &fx);
    let r = call(&reg, &fx.study, "measure", json!({"kind": "IVS", "frame": 3}));
    assert!(r.is_ok(), "{r:?}");
    let req = stub.last();
    assert_eq!(req.path, "/measure");
    assert_eq!((header(&req, "x-echo-width"), header(&req, "x-echo-height")), (640, 480));
    assert_eq!(req.body.len(), 480 * 640);
    assert_eq!(req.headers["x-echo-kind"], "IVS");
    assert_eq!(header(&req, "x-echo-frame"), 3);
    assert_eq!(r.payload["value_cm"], 1.1);
    // 640 → 40 wide and 480 → 30 high: both scale by 1/16.
    assert_eq!(r.payload["endpoints"], json!([[20.0, 6.25], [20.0, 8.75]]));
}

#[test]
fn phase_and_feasibility_send_224_square_frames() {
    let fx = fixture();
    let n = fx.study.frame_count as usize;
    let stub = common::serve(|req, _| match req.path.as_str() {
        "/detect_phases" => (200, json!({"ed_frames": [4, 1], "es_frames": [9]}).to_string()),
        _ => (200, json!({"vector": [1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]}).to_string()),
    });
    let reg = registry(&stub.url, &fx);

    let r = call(&reg, &fx.study, "detect_phases", json!({}));
    assert!(r.is_ok(), "{r:?}");
    let req = stub.last();
    assert_eq!((header(&req, "x-echo-width"), header(&req, "x-echo-height")), (224, 224));
    assert_eq!(header(&req, "x-echo-frames"), n);
    assert_eq!(req.body.len(), n * 224 * 224);
    assert_eq!(r.payload["ed_frames"], json!([1, 4]));

    let r = call(&reg, &fx.study, "predict_feasibility", json!({"frame": 2}));
    assert!(r.is_ok(), "{r:?}");
    assert_eq!(stub.last().body.len(), 224 * 224);
    assert_eq!(r.payload["feasible"], json!(["IVS", "LVID", "LVPW"]));
}

#[test]
fn malformed_reply_is_an_adapter_protocol_error() {
    let fx = fixture();
    let stub = common::serve(|_, _| (200, json!({"value": "thick"}).to_string()));
    let reg = registry(&stub.url, &fx);
    let r = call(&reg, &fx.study, "measure", json!({"kind": "IVS", "frame": 0}));
    assert_eq!(r.error_class(), Some(ProtocolErrorClass::ExecutionFailure));
    assert!(r.error.unwrap().detail.contains("AdapterProtocolError"));

    let stub = common::serve(|_, _| (200, "not json".into()));
    let r = call(&registry(&stub.url, &fx), &fx.study, "detect_phases", json!({}));
    assert!(r.error.unwrap().detail.contains("AdapterProtocolError"));

    let stub = common::serve(|_, _| (200, json!({"vector": [1, 0]}).to_string()));
    let r = call(&registry(&stub.url, &fx), &fx.study, "predict_feasibility", json!({"frame": 0}));
    assert!(r.error.unwrap().detail.contains("AdapterProtocolError"));
}

#[test]
fn unreachable_adapter_is_an_execution_failure() {
    let fx = fixture();
    let reg = registry(&common::dead_endpoint(), &fx);
    let r = call(&reg, &fx.study, "measure", json!({"kind": "IVS", "frame": 0}));
    assert_eq!(r.error_class(), Some(ProtocolErrorClass::ExecutionFailure));
    assert!(r.error.unwrap().detail.contains("unreachable"));
}

#[test]
fn study_without_pixels_fails_without_a_request() {
    let fx = fixture();
    let stub = common::serve(|_, _| (200, "{}".into()));
    let mut study = fx.study.clone();
    study.pixels = None;
    let r = call(&registry(&stub.url, &fx), &study, "detect_phases", json!({}));
    assert_eq!(r.error_class(), Some(ProtocolErrorClass::ExecutionFailure));
    assert_eq!(stub.count(), 0);
}

#[test]
fn disabled_tools_are_absent() {
    let cfg = AdapterConfig { endpoint: "http://unused".into(), timeout_secs: 1, pixel_dir: ".".into() };
    let reg = adapter_registry(cfg, ToolFlags::NEITHER);
    assert_eq!(reg.names(), ["detect_phases", "measure"]);
}

#[test]
fn resize_keeps_dimensions() {
    let src: Vec<u8> = (0..40 * 30).map(|i| (i % 251) as u8).collect();
    assert_eq!(resize_frame(&src, 40, 30, MEASURE_SIZE).len(), 640 * 480);
    assert_eq!(resize_frame(&src, 40, 30, SCREEN_SIZE).len(), 224 * 224);
    assert_eq!(resize_frame(&src, 40, 30, (40, 30)), src);
}
