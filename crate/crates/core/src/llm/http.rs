use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatRequest, LlmProvider, ProviderError};

pub(crate) const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub(crate) const DEFAULT_MODEL: &str = "gpt-4o-2024-05-13";

/// Generic chat-completion endpoint (`POST {base}/chat/completions`, reply in
/// `choices[0].message.content`).
pub struct HttpProvider {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
    model: String,
}

impl HttpProvider {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        model: impl Into<String>,
    ) -> Self {
        HttpProvider {
            agent: agent(),
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key,
            model: model.into(),
        }
    }
}

impl LlmProvider for HttpProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.model,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
        });
        let url = format!("{}/chat/completions", self.base_url);
        let reply = post_json(&self.agent, &url, self.api_key.as_deref(), &body)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| {
                ProviderError::Rejected("response has no choices[0].message.content".into())
            })
    }
}

pub(crate) fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(120)))
        .http_status_as_error(false)
        .build()
        .into()
}

/// POST a JSON body; 429 and 5xx map to retryable transport errors.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
) -> Result<Value, ProviderError> {
    let mut request = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        request = request.header("Authorization", format!("Bearer {key}"));
    }
    let mut response = request
        .send_json(body)
        .map_err(|e| ProviderError::Transport(e.to_string()))?;
    let status = response.status().as_u16();
    if status == 429 || status >= 500 {
        return Err(ProviderError::Transport(format!("HTTP {status}")));
    }
    if !(200..300).contains(&status) {
        let text = response.body_mut().read_to_string().unwrap_or_default();
        return Err(ProviderError::Rejected(format!("HTTP {status}: {text}")));
    }
    response
        .body_mut()
        .read_json::<Value>()
        .map_err(|e| ProviderError::Transport(format!("unreadable response body: {e}")))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Serve one canned HTTP response per entry, returning the captured request bodies.
    pub(crate) fn serve(
        responses: Vec<(u16, String)>,
    ) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (addr, handle)
    }

    #[test]
    fn speaks_chat_completion_contract() {
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"0.8"}}]}"#;
        let (addr, server) = serve(vec![(200, reply.into())]);
        let p = HttpProvider::new(addr, Some("k".into()), "m");
        let out = p
            .chat(&ChatRequest::new("rerank", "sys", "user text"))
            .unwrap();
        assert_eq!(out, "0.8");
        let sent: Value = serde_json::from_str(&server.join().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["messages"][1]["content"], "user text");
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn server_errors_are_transport_and_client_errors_rejections() {
        let (addr, server) = serve(vec![
            (503, "{}".into()),
            (400, "{\"error\":\"bad\"}".into()),
        ]);
        let p = HttpProvider::new(addr, None, "m");
        let r = ChatRequest::new("x", "s", "u");
        assert!(matches!(p.chat(&r), Err(ProviderError::Transport(_))));
        assert!(matches!(p.chat(&r), Err(ProviderError::Rejected(_))));
        server.join().unwrap();
    }

    #[test]
    fn unreachable_host_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let p = HttpProvider::new(addr, None, "m");
        assert!(matches!(
            p.chat(&ChatRequest::new("x", "s", "u")),
            Err(ProviderError::Transport(_))
        ));
    }
}
