//! Minimal remote completion client.
//!
//! Wire format: `POST <url>` with `{"prompt", "max_tokens", "temperature", "seed"?}`
//! and a `{"text"}` response body. Transport errors and 5xx responses are
//! retried with exponential backoff; anything else fails immediately.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, GenRequest, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub url: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_in_flight: usize,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            initial_backoff: Duration::from_millis(250),
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    text: String,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    slots: Slots,
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            slots: Slots::new(config.max_in_flight),
            config,
            agent,
        }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<String, Attempt> {
        let mut resp = self
            .agent
            .post(&self.config.url)
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(Attempt::Retry(format!("server returned {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(BackendError::Unavailable(format!(
                "server returned {status}"
            ))));
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::MalformedResponse(e.to_string())))?;
        Ok(parsed.text)
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &GenRequest, _role: Role) -> Result<String, BackendError> {
        let _slot = self.slots.acquire();
        let body = WireRequest {
            prompt: &req.prompt,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            seed: req.seed,
        };
        let mut backoff = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("completion request failed (attempt {}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(BackendError::Unavailable(last))
    }
}
