mod common;

use std::time::Duration;

use echoagent::remote::{BackendConfig, RemoteBackend};
use echoagent_core::gateway::{Backend, BackendError, ChatMessage};
use serde_json::{json, Value};

fn fast(url: &str) -> RemoteBackend {
    let mut b = RemoteBackend::new(url, "stub-model");
    b.backoff = Duration::from_millis(1);
    b.timeout = Duration::from_secs(5);
    b
}

fn completion(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn messages() -> Vec<ChatMessage> {
    vec![ChatMessage::system("sys"), ChatMessage::user("What is the IVS?")]
}

#[test]
fn three_503s_with_two_retries_is_unavailable() {
    let stub = common::serve(|_, _| (503, "{}".into()));
    let b = fast(&stub.url);
    let err = b.complete(&messages()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable(_)), "{err:?}");
    assert_eq!(stub.count(), 3);
}

#[test]
fn echo_stub_completion_is_returned_verbatim() {
    let text = "Thought: measure.\n{\"name\":\"detect_phases\",\"arguments\":{}}";
    let stub = common::serve(move |_, _| (200, completion(text)));
    let b = fast(&stub.url);
    assert_eq!(b.complete(&messages()).unwrap(), text);
    assert_eq!(stub.count(), 1);
    let req = stub.last();
    assert_eq!(req.path, "/chat/completions");
    let body: Value = serde_json::from_slice(&req.body).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][1], json!({"role": "user", "content": "What is the IVS?"}));
}

#[test]
fn recovers_after_transient_failure() {
    let stub = common::serve(|_, i| if i == 0 { (500, "oops".into()) } else { (200, completion("ok")) });
    assert_eq!(fast(&stub.url).complete(&messages()).unwrap(), "ok");
    assert_eq!(stub.count(), 2);
}

#[test]
fn malformed_success_body_is_retried() {
    let stub = common::serve(|_, _| (200, "{\"choices\": []}".into()));
    let err = fast(&stub.url).complete(&messages()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable(ref m) if m.contains("choices")), "{err:?}");
    assert_eq!(stub.count(), 3);
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let err = fast(&common::dead_endpoint()).complete(&messages()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable(_)));
}

#[test]
fn api_key_sent_as_bearer() {
    let stub = common::serve(|_, _| (200, completion("x")));
    let mut b = fast(&stub.url);
    b.api_key = Some("sk-test".into());
    b.complete(&messages()).unwrap();
    assert_eq!(stub.last().headers["authorization"], "Bearer sk-test");
}

#[test]
fn config_requires_endpoint_and_model() {
    let cfg: BackendConfig = serde_json::from_value(json!({"kind": "remote", "endpoint": "", "model": "m"})).unwrap();
    assert!(cfg.validate().is_err());
    let cfg: BackendConfig = serde_json::from_value(json!({"kind": "remote", "endpoint": "http://x", "model": "m"})).unwrap();
    assert!(matches!(cfg, BackendConfig::Remote { retries: 2, timeout_secs: 60, .. }));
    assert!(cfg.validate().is_ok());
    let cfg: BackendConfig = serde_json::from_value(json!({"kind": "script", "path": ""})).unwrap();
    assert!(cfg.build().is_err());
}

#[test]
fn script_file_backend() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(&path, json!({"steps": ["FINISH"], "answer": "done", "name": "file-script"}).to_string()).unwrap();
    let b = BackendConfig::Script { path }.build().unwrap();
    assert_eq!(b.describe(), "file-script");
}
