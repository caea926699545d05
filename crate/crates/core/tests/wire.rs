//! Wire-backend conformance against a local HTTP server: request body shape,
//! bearer auth, error classification, and retry behavior.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use sdsd_core::gateway::{
    complete, ChatMessage, ChatRole, CompletionBackend, CompletionRequest, ErrorClass,
    FinishReason, GatewayError, HttpBackend, HttpBackendConfig, RetryPolicy, WorkerRole,
};

/// Serve `responses` one per connection, closing each connection afterwards.
/// Returns the bound URL and a receiver yielding each raw request.
fn serve(responses: Vec<String>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for response in responses {
            let Ok((mut stream, _)) = listener.accept() else {
                return;
            };
            stream
                .set_read_timeout(Some(Duration::from_secs(5)))
                .unwrap();
            let mut raw = Vec::new();
            let mut buf = [0u8; 4096];
            // Read headers, then exactly content-length body bytes.
            let mut body_expected = 0usize;
            let mut header_end = 0usize;
            loop {
                let n = match stream.read(&mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => n,
                };
                raw.extend_from_slice(&buf[..n]);
                if header_end == 0 {
                    if let Some(pos) = find_subslice(&raw, b"\r\n\r\n") {
                        header_end = pos + 4;
                        let headers = String::from_utf8_lossy(&raw[..pos]).to_lowercase();
                        for line in headers.lines() {
                            if let Some(value) = line.strip_prefix("content-length:") {
                                body_expected = value.trim().parse().unwrap_or(0);
                            }
                        }
                    }
                }
                if header_end > 0 && raw.len() >= header_end + body_expected {
                    break;
                }
            }
            let _ = tx.send(String::from_utf8_lossy(&raw).to_string());
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (format!("http://{addr}"), rx)
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn http_response(status: &str, body: &str) -> String {
    format!(
        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    )
}

fn ok_completion(content: &str, finish: &str) -> String {
    http_response(
        "200 OK",
        &format!(
            r#"{{"choices":[{{"message":{{"role":"assistant","content":"{content}"}},"finish_reason":"{finish}"}}]}}"#
        ),
    )
}

fn request(tag: &str) -> CompletionRequest {
    CompletionRequest {
        model: "test-model".into(),
        system_prompt: Some("system text".into()),
        messages: vec![ChatMessage {
            role: ChatRole::User,
            content: "hello there".into(),
        }],
        max_tokens: 64,
        temperature: 0.25,
        stop_sequences: vec!["HALT".into()],
        request_tag: tag.into(),
        json_mode: false,
    }
}

fn backend_for(url: &str, key_env: Option<&str>) -> HttpBackend {
    HttpBackend::new(
        &HttpBackendConfig {
            base_url: url.to_string(),
            model: "test-model".into(),
            api_key_env: key_env.map(|s| s.to_string()),
            timeout_secs: 5,
        },
        WorkerRole::Generator,
    )
}

fn fast_policy(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        base_backoff: Duration::ZERO,
        ..RetryPolicy::default()
    }
}

#[test]
fn posts_openai_compatible_body_with_bearer() {
    std::env::set_var("SDSD_WIRE_TEST_KEY", "sekrit-token");
    let (url, requests) = serve(vec![ok_completion("fine answer", "stop")]);
    let backend = backend_for(&url, Some("SDSD_WIRE_TEST_KEY"));
    let result = complete(&backend, &request("t1"), &fast_policy(1)).unwrap();
    assert_eq!(result.text, "fine answer");
    assert_eq!(result.finish_reason, FinishReason::Stop);

    let raw = requests.recv_timeout(Duration::from_secs(5)).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    assert!(head.starts_with("POST /chat/completions HTTP/1.1"));
    assert!(head.to_lowercase().contains("authorization: bearer sekrit-token"));
    let parsed: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(parsed["model"], "test-model");
    assert_eq!(parsed["max_tokens"], 64);
    assert_eq!(parsed["temperature"], 0.25);
    assert_eq!(parsed["stop"][0], "HALT");
    assert_eq!(parsed["messages"][0]["role"], "system");
    assert_eq!(parsed["messages"][0]["content"], "system text");
    assert_eq!(parsed["messages"][1]["role"], "user");
    assert_eq!(parsed["messages"][1]["content"], "hello there");
}

#[test]
fn rate_limit_retries_then_succeeds() {
    let (url, _requests) = serve(vec![
        http_response("429 Too Many Requests", "{}"),
        ok_completion("after backoff", "stop"),
    ]);
    let backend = backend_for(&url, None);
    let result = complete(&backend, &request("t2"), &fast_policy(3)).unwrap();
    assert_eq!(result.text, "after backoff");
    assert_eq!(result.attempt_count, 2);
}

#[test]
fn auth_failure_is_terminal() {
    let (url, _requests) = serve(vec![http_response("401 Unauthorized", "{}")]);
    let backend = backend_for(&url, None);
    let err = complete(&backend, &request("t3"), &fast_policy(3)).unwrap_err();
    match err {
        GatewayError::Terminal { attempts, source } => {
            assert_eq!(attempts, 1);
            assert_eq!(source.class, ErrorClass::Auth);
        }
        other => panic!("expected terminal auth error, got {other:?}"),
    }
}

#[test]
fn malformed_body_is_terminal() {
    let (url, _requests) = serve(vec![http_response("200 OK", "not json at all")]);
    let backend = backend_for(&url, None);
    let err = complete(&backend, &request("t4"), &fast_policy(3)).unwrap_err();
    match err {
        GatewayError::Terminal { source, .. } => {
            assert_eq!(source.class, ErrorClass::MalformedResponse);
        }
        other => panic!("expected malformed-response error, got {other:?}"),
    }
}

#[test]
fn server_errors_exhaust_retries() {
    let (url, _requests) = serve(vec![
        http_response("500 Internal Server Error", "{}"),
        http_response("500 Internal Server Error", "{}"),
    ]);
    let backend = backend_for(&url, None);
    let err = complete(&backend, &request("t5"), &fast_policy(2)).unwrap_err();
    match err {
        GatewayError::Exhausted { attempts, last } => {
            assert_eq!(attempts, 2);
            assert_eq!(last.class, ErrorClass::Transport);
        }
        other => panic!("expected exhaustion, got {other:?}"),
    }
}

#[test]
fn unreachable_host_classifies_as_transport() {
    // Port 1 on localhost refuses connections.
    let backend = backend_for("http://127.0.0.1:1", None);
    let err = backend.attempt(&request("t6")).unwrap_err();
    assert!(matches!(err.class, ErrorClass::Transport | ErrorClass::Timeout));
}

#[test]
fn length_finish_reason_survives_the_wire() {
    let (url, _requests) = serve(vec![ok_completion("truncated tex", "length")]);
    let backend = backend_for(&url, None);
    let mut req = request("t7");
    req.stop_sequences.clear();
    let result = complete(&backend, &req, &fast_policy(1)).unwrap();
    assert_eq!(result.finish_reason, FinishReason::Length);
}
