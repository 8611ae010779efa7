use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use coevo_core::gateway::{
    generate, render_code_prompt, render_test_prompt, ChatProvider, Completion, HttpChatProvider, ProviderConfig,
    ProviderError, SamplingConfig,
};
use coevo_core::parse::ThinkDelimiters;
use coevo_core::{CandidateKind, Error, Task, TestCase};

fn task() -> Task {
    Task {
        id: "t1".into(),
        description: "Read n and print n squared.".into(),
        gt_tests: vec![TestCase::new("3", "9")],
        gt_code: None,
    }
}

fn config(max_retries: u32, limit: usize) -> ProviderConfig {
    ProviderConfig {
        max_retries,
        concurrent_request_limit: limit,
        backoff_base_ms: 0,
        ..ProviderConfig::default()
    }
}

/// Replies with `text`, or with a fixed error, and records call statistics.
struct Mock {
    reply: Result<String, ProviderError>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    delay: Duration,
}

impl Mock {
    fn new(reply: Result<String, ProviderError>) -> Self {
        Self {
            reply,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            delay: Duration::ZERO,
        }
    }
}

impl ChatProvider for Mock {
    fn complete(&self, _prompt: &str, _sampling: &SamplingConfig) -> Result<Completion, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(self.delay);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.reply.clone().map(|text| Completion {
            text,
            completion_tokens: None,
        })
    }
}

const CODE_REPLY: &str = "Sure.\n```python\nn = int(input())\nprint(n * n)\n```";

#[test]
fn sixteen_identical_valid_candidates_by_default() {
    let mock = Mock::new(Ok(CODE_REPLY.into()));
    let sampling = SamplingConfig::default();
    let out = generate(&task(), CandidateKind::Code, &sampling, &mock, &config(3, 4), &ThinkDelimiters::default())
        .unwrap();
    assert!(out.is_complete());
    assert_eq!(out.records.len(), 16);
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.index, i);
        assert_eq!(r.task_id, "t1");
        assert_eq!(r.code(), Some("n = int(input())\nprint(n * n)"));
        // No provider token count: whitespace units of the raw text.
        assert_eq!(r.length_units, 9);
    }
    assert_eq!(mock.calls.load(Ordering::SeqCst), 16);
}

#[test]
fn malformed_responses_become_invalid_records() {
    let mock = Mock::new(Ok("I could not find an answer.".into()));
    let sampling = SamplingConfig {
        num_samples: 4,
        ..SamplingConfig::default()
    };
    let out = generate(&task(), CandidateKind::Test, &sampling, &mock, &config(3, 2), &ThinkDelimiters::default())
        .unwrap();
    assert_eq!(out.records.len(), 4);
    assert!(out.records.iter().all(|r| !r.valid() && r.kind == CandidateKind::Test));
}

#[test]
fn transient_failures_are_retried_then_reported() {
    let mock = Mock::new(Err(ProviderError::Transient("HTTP 503".into())));
    let sampling = SamplingConfig {
        num_samples: 3,
        ..SamplingConfig::default()
    };
    let out = generate(&task(), CandidateKind::Code, &sampling, &mock, &config(2, 2), &ThinkDelimiters::default())
        .unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.failures.iter().map(|f| f.index).collect::<Vec<_>>(), [0, 1, 2]);
    // One try plus two retries per sample.
    assert_eq!(mock.calls.load(Ordering::SeqCst), 9);
}

#[test]
fn concurrency_limit_is_respected() {
    let mut mock = Mock::new(Ok(CODE_REPLY.into()));
    mock.delay = Duration::from_millis(20);
    let sampling = SamplingConfig {
        num_samples: 12,
        ..SamplingConfig::default()
    };
    generate(&task(), CandidateKind::Code, &sampling, &mock, &config(0, 3), &ThinkDelimiters::default()).unwrap();
    let peak = mock.peak.load(Ordering::SeqCst);
    assert!((1..=3).contains(&peak), "peak {peak}");
}

#[test]
fn auth_failure_aborts_the_batch() {
    let mock = Mock::new(Err(ProviderError::Auth("HTTP 401".into())));
    let sampling = SamplingConfig::default();
    let err = generate(&task(), CandidateKind::Code, &sampling, &mock, &config(5, 1), &ThinkDelimiters::default())
        .unwrap_err();
    assert!(matches!(err, Error::Auth(_)));
    assert_eq!(mock.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn prompts_embed_the_description() {
    let code = render_code_prompt(&task()).unwrap();
    let test = render_test_prompt(&task()).unwrap();
    assert!(code.contains("Read n and print n squared."));
    assert!(test.contains("Read n and print n squared."));
    assert!(test.contains("**Test Input:**") && test.contains("**Test Output:**"));
}

struct Captured {
    request_line: String,
    headers: Vec<String>,
    body: String,
}

/// One-request-per-connection HTTP server. Each connection is answered
/// with the next (status, body) pair from `replies`.
fn serve(replies: Vec<(&'static str, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for (stream, (status, payload)) in listener.incoming().zip(replies) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Captured {
                request_line: request_line.trim_end().into(),
                headers,
                body: String::from_utf8(body).unwrap(),
            });
            write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn chat_body(content: &str) -> String {
    format!(
        r#"{{"choices":[{{"message":{{"role":"assistant","content":{content:?}}}}}],"usage":{{"completion_tokens":7}}}}"#
    )
}

#[test]
fn http_provider_speaks_chat_completions() {
    let (url, seen) = serve(vec![("200 OK", chat_body(CODE_REPLY))]);
    std::env::set_var("COEVO_TEST_KEY_A", "secret-a");
    let cfg = ProviderConfig {
        base_url: url,
        model_name: "tiny".into(),
        api_key_env: "COEVO_TEST_KEY_A".into(),
        ..config(0, 1)
    };
    let provider = HttpChatProvider::new(&cfg).unwrap();
    let sampling = SamplingConfig {
        temperature: 0.8,
        max_tokens: Some(64),
        ..SamplingConfig::default()
    };
    let reply = provider.complete("hello prompt", &sampling).unwrap();
    assert_eq!(reply.text, CODE_REPLY);
    assert_eq!(reply.completion_tokens, Some(7));

    let seen = seen.lock().unwrap();
    let req = &seen[0];
    assert_eq!(req.request_line, "POST /v1/chat/completions HTTP/1.1");
    assert!(req.headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer secret-a")));
    let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
    assert_eq!(body["model"], "tiny");
    assert_eq!(body["n"], 1);
    assert_eq!(body["temperature"], 0.8);
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "hello prompt");
}

#[test]
fn http_status_codes_map_to_error_kinds() {
    let (url, _) = serve(vec![
        ("401 Unauthorized", "{}".into()),
        ("429 Too Many Requests", "{}".into()),
        ("503 Service Unavailable", "{}".into()),
        ("400 Bad Request", "{\"error\":\"bad\"}".into()),
        ("200 OK", "not json".into()),
    ]);
    let cfg = ProviderConfig {
        base_url: url,
        api_key_env: String::new(),
        ..config(0, 1)
    };
    let provider = HttpChatProvider::new(&cfg).unwrap();
    let s = SamplingConfig::default();
    assert!(matches!(provider.complete("p", &s), Err(ProviderError::Auth(_))));
    assert!(matches!(provider.complete("p", &s), Err(ProviderError::Transient(_))));
    assert!(matches!(provider.complete("p", &s), Err(ProviderError::Transient(_))));
    assert!(matches!(provider.complete("p", &s), Err(ProviderError::Fatal(_))));
    assert!(matches!(provider.complete("p", &s), Err(ProviderError::Fatal(_))));
}

#[test]
fn retries_recover_from_a_server_error() {
    let (url, seen) = serve(vec![
        ("500 Internal Server Error", "{}".into()),
        ("200 OK", chat_body(CODE_REPLY)),
    ]);
    let cfg = ProviderConfig {
        base_url: url,
        api_key_env: String::new(),
        ..config(1, 1)
    };
    let provider = HttpChatProvider::new(&cfg).unwrap();
    let sampling = SamplingConfig {
        num_samples: 1,
        ..SamplingConfig::default()
    };
    let out = generate(&task(), CandidateKind::Code, &sampling, &provider, &cfg, &ThinkDelimiters::default()).unwrap();
    assert!(out.is_complete());
    assert_eq!(out.records[0].length_units, 7);
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn missing_key_variable_is_an_auth_error() {
    let cfg = ProviderConfig {
        api_key_env: "COEVO_TEST_KEY_THAT_IS_NOT_SET".into(),
        ..ProviderConfig::default()
    };
    assert!(matches!(HttpChatProvider::new(&cfg), Err(Error::Auth(_))));
}
