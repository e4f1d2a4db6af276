mod common;

use std::time::Duration;

use common::{chat_reply, MockServer};
use glta::assets::{generate_assets, Provenance, TextCache, UserHistory};
use glta::config::{GenerationMode, RunConfig};
use glta::llm::{chat_complete, ChatClient, LlmError, API_KEY_VAR};

const TIMEOUT: Duration = Duration::from_secs(5);

fn client(server: &MockServer) -> ChatClient {
    ChatClient::new(&server.url, "secret", "mock-model", TIMEOUT)
        .unwrap()
        .with_backoff(Duration::from_millis(1))
}

fn histories() -> Vec<UserHistory> {
    vec![
        UserHistory {
            user_id: "u1".into(),
            descriptions: vec!["red fox".into(), "blue whale".into()],
        },
        UserHistory {
            user_id: "u2".into(),
            descriptions: vec!["green tea".into()],
        },
        UserHistory {
            user_id: "u3".into(),
            descriptions: vec![],
        },
    ]
}

#[test]
fn completion_sends_chat_request() {
    let server = MockServer::start(vec![(200, chat_reply("ok"))]);
    assert_eq!(client(&server).complete("hello").unwrap(), "ok");
    let reqs = server.requests.lock().unwrap();
    assert!(reqs[0].headers.to_ascii_lowercase().contains("authorization: bearer secret"));
    let body: serde_json::Value = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(body["model"], "mock-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "hello");
    drop(reqs);
    assert_eq!(chat_complete(&server.url, "k", "hi", TIMEOUT).unwrap(), "ok");
}

#[test]
fn auth_failures_are_not_retried() {
    let server = MockServer::start(vec![(401, "{\"error\": \"bad key\"}".into())]);
    match client(&server).complete("x") {
        Err(LlmError::Auth { status, body }) => {
            assert_eq!(status, 401);
            assert!(body.contains("bad key"));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(server.hits(), 1);
}

#[test]
fn server_errors_are_retried() {
    let server = MockServer::start(vec![(500, "oops".into()), (200, chat_reply("fine"))]);
    assert_eq!(client(&server).complete("x").unwrap(), "fine");
    assert_eq!(server.hits(), 2);

    let down = MockServer::start(vec![(503, "x".repeat(1000))]);
    match client(&down).complete("x") {
        Err(LlmError::Status { status, body }) => {
            assert_eq!(status, 503);
            assert_eq!(body.len(), 200);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(down.hits(), 3);
}

#[test]
fn malformed_reply_is_reported() {
    let server = MockServer::start(vec![(200, "{\"choices\": []}".into())]);
    assert!(matches!(client(&server).complete("x"), Err(LlmError::Malformed(_))));
}

#[test]
fn api_key_comes_from_the_environment() {
    std::env::remove_var(API_KEY_VAR);
    assert!(matches!(
        ChatClient::from_env("http://127.0.0.1:1/", "m", TIMEOUT),
        Err(LlmError::MissingKey)
    ));
    let server = MockServer::start(vec![(200, chat_reply("ok"))]);
    std::env::set_var(API_KEY_VAR, "from-env");
    let c = ChatClient::from_env(&server.url, "m", TIMEOUT).unwrap();
    std::env::remove_var(API_KEY_VAR);
    c.complete("x").unwrap();
    let reqs = server.requests.lock().unwrap();
    assert!(reqs[0].headers.to_ascii_lowercase().contains("bearer from-env"));
}

#[test]
fn offline_texts_are_cached_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("texts.jsonl");
    let cfg = RunConfig::default().generation;
    let mut cache = TextCache::open(&path).unwrap();
    let first = generate_assets(&cfg, &histories(), &mut cache, None).unwrap();
    assert_eq!(first[0].provenance, Provenance::Offline);
    assert_eq!(cache.len(), 4);
    let bytes = std::fs::read(&path).unwrap();

    let mut reopened = TextCache::open(&path).unwrap();
    let second = generate_assets(&cfg, &histories(), &mut reopened, None).unwrap();
    assert_eq!(second[0].provenance, Provenance::Cached);
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.profile_text.as_bytes(), b.profile_text.as_bytes());
        assert_eq!(a.prediction_text.as_bytes(), b.prediction_text.as_bytes());
    }
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn external_texts_come_from_the_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let server = MockServer::start(vec![(200, chat_reply("  likes nature  "))]);
    let mut cfg = RunConfig::default().generation;
    cfg.mode = GenerationMode::External;
    let mut cache = TextCache::open(&dir.path().join("t.jsonl")).unwrap();
    let c = client(&server);
    let out = generate_assets(&cfg, &histories(), &mut cache, Some(&c)).unwrap();
    assert_eq!(out[0].profile_text, "likes nature");
    assert_eq!(out[0].provenance, Provenance::External);
    assert_eq!(out[0].model_name.as_deref(), Some("mock-model"));
    // Two users with history, two requests each; the empty history needs none.
    assert_eq!(server.hits(), 4);
    let again = generate_assets(&cfg, &histories(), &mut cache, Some(&c)).unwrap();
    assert_eq!(again[1].provenance, Provenance::Cached);
    assert_eq!(server.hits(), 4);
}

#[test]
fn failed_generation_falls_back_offline_without_caching() {
    let dir = tempfile::tempdir().unwrap();
    let server = MockServer::start(vec![(500, "down".into())]);
    let mut cfg = RunConfig::default().generation;
    cfg.mode = GenerationMode::External;
    let mut cache = TextCache::open(&dir.path().join("t.jsonl")).unwrap();
    let c = client(&server);
    let out = generate_assets(&cfg, &histories(), &mut cache, Some(&c)).unwrap();
    assert_eq!(out[0].provenance, Provenance::Offline);
    assert!(!out[0].profile_text.is_empty());
    assert!(cache.is_empty());

    cfg.fallback_offline = false;
    assert!(generate_assets(&cfg, &histories(), &mut cache, Some(&c)).is_err());
}
