//! Chat-completion backend over HTTP.

use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{RewardShaper, ShaperContext, ShaperError, ShaperOutput};
use crate::feedback::{fill, render_prompt};
use crate::shaping::ShapingReward;

pub const DEFAULT_API_KEY_ENV: &str = "VORTEX_LLM_API_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    /// Attempts per request on network failure or a retryable status.
    pub max_attempts: usize,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "default".into(),
            temperature: 0.0,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_attempts: 3,
            backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

/// One request/response pair, kept for the run transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub k: usize,
    pub request: Value,
    pub completion: String,
}

pub struct RemoteShaper {
    cfg: RemoteConfig,
    api_key: String,
    r_max: f64,
    agent: ureq::Agent,
    transcript: Vec<Exchange>,
}

impl RemoteShaper {
    /// Reads the credential from the configured environment variable.
    pub fn new(cfg: RemoteConfig, r_max: f64) -> Result<Self, ShaperError> {
        let key = std::env::var(&cfg.api_key_env)
            .map_err(|_| ShaperError::MissingCredential(cfg.api_key_env.clone()))?;
        Ok(Self::with_api_key(cfg, key, r_max))
    }

    pub fn with_api_key(cfg: RemoteConfig, api_key: String, r_max: f64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            cfg,
            api_key,
            r_max,
            agent,
            transcript: Vec::new(),
        }
    }

    fn post_once(&self, body: &str) -> Result<String, Attempt> {
        let resp = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(ShaperError::Http { status, body: text })),
        }
    }

    /// Sends one request with bounded exponential backoff.
    fn post(&self, body: &Value) -> Result<String, ShaperError> {
        let text = body.to_string();
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                let delay = self.cfg.backoff_ms.saturating_mul(1 << (i - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.post_once(&text) {
                Ok(t) => return Ok(t),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    warn!("remote attempt {} of {attempts} failed: {msg}", i + 1);
                    last = msg;
                }
            }
        }
        Err(ShaperError::Network {
            attempts,
            message: last,
        })
    }

    fn request(&self, messages: &[(String, String)]) -> Value {
        json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": messages
                .iter()
                .map(|(role, content)| json!({"role": role, "content": content}))
                .collect::<Vec<_>>(),
        })
    }
}

enum Attempt {
    Retry(String),
    Fatal(ShaperError),
}

/// Completion text from common chat response shapes, or the body itself.
fn completion_text(body: &str) -> String {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return body.to_string();
    };
    let candidates = [
        v.pointer("/choices/0/message/content"),
        v.pointer("/choices/0/text"),
        v.pointer("/content/0/text"),
        v.pointer("/message/content"),
        v.get("content"),
    ];
    let found = candidates
        .into_iter()
        .flatten()
        .find_map(|c| c.as_str().map(str::to_string));
    found.unwrap_or_else(|| body.to_string())
}

/// The first balanced `{...}` in `text` that parses as a JSON object.
pub fn extract_first_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        let mut end = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match (escaped, b) {
                    (true, _) => escaped = false,
                    (false, b'\\') => escaped = true,
                    (false, b'"') => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        let Some(end) = end else { return None };
        if let Ok(Value::Object(map)) = serde_json::from_str(&text[open..=end]) {
            return Some(map);
        }
        start = open + 1;
    }
    None
}

struct Parsed {
    shaping: ShapingReward,
    warnings: Vec<String>,
}

fn parse_shaping(text: &str, n: usize, r_max: f64) -> Result<Parsed, ShaperError> {
    let mut map = extract_first_object(text)
        .ok_or_else(|| ShaperError::Parse("no JSON object in completion".into()))?;
    for key in ["shaping", "reward", "rewards"] {
        if let Some(Value::Object(inner)) = map.get(key) {
            map = inner.clone();
            break;
        }
    }
    let mut values = vec![None; n];
    let mut warnings = Vec::new();
    for (key, v) in &map {
        let Ok(z) = key.trim().parse::<usize>() else {
            warnings.push(format!("ignored non-class key `{key}`"));
            continue;
        };
        if z >= n {
            warnings.push(format!("ignored unknown class {z}"));
            continue;
        }
        let x = v
            .as_f64()
            .ok_or_else(|| ShaperError::Parse(format!("class {z}: value {v} is not a number")))?;
        if !x.is_finite() {
            return Err(ShaperError::Parse(format!("class {z}: value is not finite")));
        }
        values[z] = Some(x);
    }
    let missing: Vec<usize> = (0..n).filter(|&z| values[z].is_none()).collect();
    if !missing.is_empty() {
        return Err(ShaperError::Incomplete { missing });
    }
    let mut out = Vec::with_capacity(n);
    for (z, v) in values.into_iter().enumerate() {
        let v = v.unwrap_or_default();
        let c = v.clamp(-r_max, r_max);
        if c != v {
            warnings.push(format!("class {z}: clamped {v} to {c}"));
        }
        out.push(c);
    }
    Ok(Parsed {
        shaping: ShapingReward(out),
        warnings,
    })
}

impl RewardShaper for RemoteShaper {
    fn tag(&self) -> &'static str {
        "remote"
    }

    fn transcript(&self) -> Vec<Exchange> {
        self.transcript.clone()
    }

    fn propose(&mut self, ctx: &ShaperContext<'_>) -> Result<ShaperOutput, ShaperError> {
        let n = ctx.env.n_classes();
        let mut messages = vec![("user".to_string(), render_prompt(ctx.prompt, ctx.template))];
        let mut reasked = false;
        loop {
            let request = self.request(&messages);
            let body = self.post(&request)?;
            let completion = completion_text(&body);
            self.transcript.push(Exchange {
                k: ctx.k,
                request,
                completion: completion.clone(),
            });
            match parse_shaping(&completion, n, self.r_max) {
                Ok(parsed) => {
                    for w in &parsed.warnings {
                        warn!("episode {}: {w}", ctx.k);
                    }
                    return Ok(ShaperOutput {
                        shaping: parsed.shaping,
                        rationale: Some(completion),
                        backend: self.tag().into(),
                        gradient: None,
                        warnings: parsed.warnings,
                    });
                }
                Err(ShaperError::Parse(msg)) if !reasked => {
                    warn!("episode {}: unparseable completion ({msg}); asking again", ctx.k);
                    reasked = true;
                    messages.push(("assistant".into(), completion));
                    messages.push((
                        "user".into(),
                        fill(
                            &ctx.template.format_reminder,
                            &[("last", n.saturating_sub(1).to_string())],
                        ),
                    ));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Environment;
    use crate::feedback::{FeedbackTemplate, PromptState};
    use crate::metrics::{DivergenceKind, PreferenceSpec};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves canned `(status, body)` replies in order, recording requests.
    fn mock(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<(String, String)>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push((headers, String::from_utf8(buf).unwrap()));
                let mut stream = stream;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1/chat"), seen)
    }

    fn chat(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    fn shaper(endpoint: String) -> RemoteShaper {
        let cfg = RemoteConfig {
            endpoint,
            model: "test-model".into(),
            backoff_ms: 1,
            timeout_secs: 10,
            ..RemoteConfig::default()
        };
        RemoteShaper::with_api_key(cfg, "secret-token".into(), 1.0)
    }

    fn propose(s: &mut RemoteShaper) -> Result<ShaperOutput, ShaperError> {
        let env = Environment::builtin("armman").unwrap();
        let pref = PreferenceSpec::from_directive(&env, "LI", 0.75, DivergenceKind::Kl).unwrap();
        let prompt = PromptState::new("FIXED");
        let template = FeedbackTemplate::default();
        s.propose(&ShaperContext {
            k: 0,
            prompt: &prompt,
            history: &[],
            pref: &pref,
            env: &env,
            template: &template,
        })
    }

    const FULL: &str = r#"{"0":0.3,"1":-0.1,"2":0.0,"3":0.0,"4":0.2,"5":0.0,"6":0.0,"7":0.0}"#;

    #[test]
    fn happy_path_and_request_shape() {
        let (url, seen) = mock(vec![(200, chat(&format!("Here you go: {FULL} done")))]);
        let out = propose(&mut shaper(url)).unwrap();
        assert_eq!(out.shaping.0, vec![0.3, -0.1, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0]);
        assert!(out.warnings.is_empty());
        let log = seen.lock().unwrap();
        let (headers, body) = &log[0];
        assert!(headers.to_ascii_lowercase().contains("authorization: bearer secret-token"));
        let v: Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["model"], "test-model");
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["messages"][0]["role"], "user");
        assert!(v["messages"][0]["content"].as_str().unwrap().starts_with("FIXED"));
    }

    #[test]
    fn out_of_range_clamped_with_warning() {
        let text = FULL.replace("\"1\":-0.1", "\"1\":99.0");
        let (url, _) = mock(vec![(200, chat(&text))]);
        let out = propose(&mut shaper(url)).unwrap();
        assert_eq!(out.shaping.0[1], 1.0);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn missing_class_is_typed_error() {
        let text = FULL.replace(",\"7\":0.0", "");
        let (url, _) = mock(vec![(200, chat(&text))]);
        match propose(&mut shaper(url)) {
            Err(ShaperError::Incomplete { missing }) => assert_eq!(missing, vec![7]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_twice_is_parse_error() {
        let (url, seen) = mock(vec![(200, chat("no json here")), (200, chat("{still: bad"))]);
        assert!(matches!(propose(&mut shaper(url)), Err(ShaperError::Parse(_))));
        let log = seen.lock().unwrap();
        assert_eq!(log.len(), 2);
        let second: Value = serde_json::from_str(&log[1].1).unwrap();
        assert_eq!(second["messages"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn reask_recovers() {
        let (url, _) = mock(vec![(200, chat("sorry")), (200, chat(FULL))]);
        assert!(propose(&mut shaper(url)).is_ok());
    }

    #[test]
    fn server_errors_retried() {
        let (url, seen) = mock(vec![(503, "busy".into()), (500, "oops".into()), (200, chat(FULL))]);
        assert!(propose(&mut shaper(url)).is_ok());
        assert_eq!(seen.lock().unwrap().len(), 3);

        let (url, _) = mock(vec![(503, "a".into()), (503, "b".into()), (503, "c".into())]);
        assert!(matches!(
            propose(&mut shaper(url)),
            Err(ShaperError::Network { attempts: 3, .. })
        ));
    }

    #[test]
    fn client_error_not_retried() {
        let (url, seen) = mock(vec![(401, "denied".into())]);
        assert!(matches!(
            propose(&mut shaper(url)),
            Err(ShaperError::Http { status: 401, .. })
        ));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn unreachable_endpoint() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut s = shaper(format!("http://127.0.0.1:{port}/"));
        assert!(matches!(propose(&mut s), Err(ShaperError::Network { attempts: 3, .. })));
    }

    #[test]
    fn missing_credential() {
        let cfg = RemoteConfig {
            api_key_env: "VORTEX_TEST_UNSET_CREDENTIAL".into(),
            ..RemoteConfig::default()
        };
        assert!(matches!(
            RemoteShaper::new(cfg, 1.0),
            Err(ShaperError::MissingCredential(_))
        ));
    }

    #[test]
    fn object_extraction() {
        let m = extract_first_object(r#"text {"a": "}{", "b": {"c": 1}} tail {"d": 2}"#).unwrap();
        assert_eq!(m["b"]["c"], 1);
        assert!(extract_first_object("{ not json } {\"x\": 1}").unwrap().contains_key("x"));
        assert!(extract_first_object("nothing").is_none());
    }
}
