//! Blocking JSON-over-HTTP client for the external generation, reranking
//! and query-mapping services, with bounded retry on transport failure.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub attempts: u32,
    /// Sleep before retry `r` (1-based) is `base_backoff * 2^(r-1)`.
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug)]
pub struct ServiceClient {
    base: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    retries: AtomicU64,
}

impl ServiceClient {
    pub fn new(endpoint: &str) -> Self {
        Self::with_timeout(endpoint, Duration::from_secs(60))
    }

    pub fn with_timeout(endpoint: &str, timeout: Duration) -> Self {
        ServiceClient {
            base: endpoint.trim_end_matches('/').to_owned(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            retry: RetryPolicy::default(),
            retries: AtomicU64::new(0),
        }
    }

    pub fn retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    /// Retries performed so far across all calls.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    /// POSTs `body` to `base + path`. Non-2xx statuses and network errors are
    /// transport failures and are retried; an undecodable body is a protocol error.
    pub fn post_json<Req, Resp>(&self, path: &str, body: &Req) -> Result<Resp>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let url = format!("{}{}", self.base, path);
        let attempts = self.retry.attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.post_once(&url, body) {
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let wait = self.retry.base_backoff * 2u32.saturating_pow(attempt - 1);
                    log::warn!("{url}: {e}; retry {attempt}/{} in {wait:?}", attempts - 1);
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(Error::Transport(format!(
                        "{url}: giving up after {attempts} attempts: {e}"
                    )))
                }
                other => return other,
            }
        }
    }

    fn post_once<Req, Resp>(&self, url: &str, body: &Req) -> Result<Resp>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let value = serde_json::to_value(body).expect("request serialization is infallible");
        match self.agent.post(url).send_json(value) {
            Ok(resp) => resp
                .into_json()
                .map_err(|e| Error::Protocol(format!("{url}: undecodable response: {e}"))),
            Err(ureq::Error::Status(code, _)) => Err(Error::Transport(format!("{url}: HTTP {code}"))),
            Err(e) => Err(Error::Transport(format!("{url}: {e}"))),
        }
    }
}

/// Minimal scripted HTTP server for exercising the clients in tests.
#[cfg(test)]
pub(crate) mod mock {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;
    use std::time::Duration;

    pub struct Reply {
        pub status: u16,
        pub body: String,
        pub delay: Duration,
    }

    impl Reply {
        pub fn json(body: serde_json::Value) -> Self {
            Reply {
                status: 200,
                body: body.to_string(),
                delay: Duration::ZERO,
            }
        }

        pub fn status(status: u16) -> Self {
            Reply {
                status,
                body: "{}".into(),
                delay: Duration::ZERO,
            }
        }
    }

    /// Serves until the process exits. The handler sees `(path, json body)`.
    pub fn serve<F>(handler: F) -> String
    where
        F: Fn(&str, serde_json::Value) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handler = Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut request_line = String::new();
                    if reader.read_line(&mut request_line).is_err() {
                        return;
                    }
                    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_owned();
                    let mut len = 0usize;
                    loop {
                        let mut h = String::new();
                        if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
                            break;
                        }
                        let lower = h.to_ascii_lowercase();
                        if let Some(v) = lower.strip_prefix("content-length:") {
                            len = v.trim().parse().unwrap_or(0);
                        }
                    }
                    let mut body = vec![0; len];
                    let _ = reader.read_exact(&mut body);
                    let json = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
                    let reply = handler(&path, json);
                    std::thread::sleep(reply.delay);
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                        reply.status,
                        reply.body.len(),
                        reply.body
                    );
                });
            }
        });
        format!("http://{addr}")
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{serve, Reply};
    use super::*;
    use serde_json::json;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_backoff: Duration::from_millis(5),
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let hits = Arc::new(AtomicUsize::new(0));
        let h = Arc::clone(&hits);
        let url = serve(move |_, _| {
            if h.fetch_add(1, Ordering::SeqCst) < 2 {
                Reply::status(503)
            } else {
                Reply::json(json!({"ok": true}))
            }
        });
        let client = ServiceClient::new(&url).retry_policy(fast_retry());
        let v: serde_json::Value = client.post_json("/x", &json!({})).unwrap();
        assert_eq!(v, json!({"ok": true}));
        assert_eq!(client.retries(), 2);
    }

    #[test]
    fn gives_up_after_bounded_attempts() {
        let url = serve(|_, _| Reply::status(500));
        let client = ServiceClient::new(&url).retry_policy(fast_retry());
        let err = client.post_json::<_, serde_json::Value>("/x", &json!({})).unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
        assert_eq!(client.retries(), 2);
    }

    #[test]
    fn garbage_body_is_protocol_error() {
        let url = serve(|_, _| Reply {
            status: 200,
            body: "not json".into(),
            delay: Duration::ZERO,
        });
        let client = ServiceClient::new(&url).retry_policy(fast_retry());
        let err = client.post_json::<_, serde_json::Value>("/x", &json!({})).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert_eq!(client.retries(), 0);
    }
}
