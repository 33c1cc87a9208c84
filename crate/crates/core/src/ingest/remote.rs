//! Remote caption sources behind a content-addressed disk cache.
//!
//! Every response is stored under `{cache}/{kind}/{sha256(request)}.json`;
//! a cached entry is always preferred, so runs are replayable offline.

use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tilegrid::LonLat;

pub const DEFAULT_GEOSEARCH_RADIUS_M: f64 = 500.0;

#[derive(Debug, Clone)]
pub struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir }
    }

    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn key(request: &str) -> String {
        hex::encode(Sha256::digest(request.as_bytes()))
    }

    fn path(&self, kind: &str, request: &str) -> Option<PathBuf> {
        Some(self.dir.as_ref()?.join(kind).join(format!("{}.json", Self::key(request))))
    }

    pub fn get(&self, kind: &str, request: &str) -> Result<Option<Value>> {
        let Some(p) = self.path(kind, request) else { return Ok(None) };
        match std::fs::read_to_string(&p) {
            Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(p, e)),
        }
    }

    pub fn put(&self, kind: &str, request: &str, value: &Value) -> Result<()> {
        let Some(p) = self.path(kind, request) else { return Ok(()) };
        let dir = p.parent().expect("cache entries live in a directory");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // Write-then-rename so concurrent readers never see partial files.
        let tmp = p.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct RemoteConfig {
    /// MediaWiki API endpoint, e.g. `https://en.wikipedia.org/w/api.php`.
    pub wiki_url: Option<String>,
    /// OpenAI-compatible chat-completions endpoint.
    pub llm_url: Option<String>,
    #[serde(skip_serializing)]
    pub llm_key: Option<String>,
    pub llm_model: String,
    pub max_attempts: u32,
    pub max_in_flight: usize,
    pub timeout_s: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            wiki_url: None,
            llm_url: None,
            llm_key: None,
            llm_model: "gpt-4o-mini".into(),
            max_attempts: 3,
            max_in_flight: 4,
            timeout_s: 30,
        }
    }
}

impl RemoteConfig {
    /// Fills endpoints from `GEOFORGE_WIKI_URL`, `GEOFORGE_LLM_URL` and
    /// `GEOFORGE_LLM_KEY` when set.
    pub fn with_env(mut self) -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        self.wiki_url = var("GEOFORGE_WIKI_URL").or(self.wiki_url);
        self.llm_url = var("GEOFORGE_LLM_URL").or(self.llm_url);
        self.llm_key = var("GEOFORGE_LLM_KEY").or(self.llm_key);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WikiEntry {
    pub title: String,
    pub extract: String,
    pub dist_m: f64,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Shared client for the GeoSearch and LLM endpoints. Safe to use from
/// several worker threads; at most `max_in_flight` requests run at once.
pub struct Remote {
    pub config: RemoteConfig,
    pub cache: Cache,
    agent: ureq::Agent,
    slots: Semaphore,
}

impl Remote {
    pub fn new(config: RemoteConfig, cache: Cache) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .build()
            .into();
        let slots = Semaphore {
            free: Mutex::new(config.max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        Self { config, cache, agent, slots }
    }

    pub fn offline(cache: Cache) -> Self {
        Self::new(RemoteConfig::default(), cache)
    }

    fn with_retries<T>(&self, what: &str, mut call: impl FnMut() -> std::result::Result<T, String>) -> Result<T> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for k in 0..attempts {
            if k > 0 {
                std::thread::sleep(Duration::from_millis(200 << (k - 1).min(4)));
            }
            let _permit = self.slots.acquire();
            match call() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("{what}: attempt {} of {attempts} failed: {e}", k + 1);
                    last = e;
                }
            }
        }
        Err(Error::Remote { attempts, message: format!("{what}: {last}") })
    }

    fn get_json(&self, url: &str, query: &[(&str, String)]) -> std::result::Result<Value, String> {
        let mut req = self.agent.get(url);
        for (k, v) in query {
            req = req.query(*k, v);
        }
        let mut resp = req.call().map_err(|e| e.to_string())?;
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        serde_json::from_str(&body).map_err(|e| e.to_string())
    }

    /// Wikipedia articles within `radius_m` of `center`, nearest first.
    pub fn geosearch(&self, center: LonLat, radius_m: f64) -> Result<Vec<WikiEntry>> {
        if radius_m <= 0.0 {
            return Ok(Vec::new());
        }
        let request = format!("geosearch {:.6},{:.6} r={radius_m}", center.lat, center.lon);
        if let Some(v) = self.cache.get("geosearch", &request)? {
            return Ok(serde_json::from_value(v)?);
        }
        let Some(url) = self.config.wiki_url.clone() else {
            return Err(Error::Remote {
                attempts: 0,
                message: "GEOFORGE_WIKI_URL is not set and the response is not cached".into(),
            });
        };
        let hits = self.with_retries("geosearch", || {
            self.get_json(
                &url,
                &[
                    ("action", "query".into()),
                    ("list", "geosearch".into()),
                    ("gscoord", format!("{:.6}|{:.6}", center.lat, center.lon)),
                    ("gsradius", format!("{}", radius_m.clamp(10.0, 10_000.0).round())),
                    ("gslimit", "20".into()),
                    ("format", "json".into()),
                ],
            )
        })?;
        let mut entries: Vec<(u64, WikiEntry)> = hits["query"]["geosearch"]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|h| {
                        Some((
                            h["pageid"].as_u64()?,
                            WikiEntry {
                                title: h["title"].as_str()?.to_string(),
                                extract: String::new(),
                                dist_m: h["dist"].as_f64().unwrap_or(f64::INFINITY),
                            },
                        ))
                    })
                    .collect()
            })
            .unwrap_or_default();
        if !entries.is_empty() {
            let ids: Vec<String> = entries.iter().map(|(id, _)| id.to_string()).collect();
            let pages = self.with_retries("extracts", || {
                self.get_json(
                    &url,
                    &[
                        ("action", "query".into()),
                        ("prop", "extracts".into()),
                        ("explaintext", "1".into()),
                        ("exintro", "1".into()),
                        ("pageids", ids.join("|")),
                        ("format", "json".into()),
                    ],
                )
            })?;
            for (id, e) in &mut entries {
                if let Some(x) = pages["query"]["pages"][id.to_string()]["extract"].as_str() {
                    e.extract = x.to_string();
                }
            }
        }
        let mut entries: Vec<WikiEntry> = entries.into_iter().map(|(_, e)| e).collect();
        entries.sort_by(|a, b| a.dist_m.total_cmp(&b.dist_m).then_with(|| a.title.cmp(&b.title)));
        self.cache.put("geosearch", &request, &serde_json::to_value(&entries)?)?;
        Ok(entries)
    }

    /// Chat completion for `prompt`, served from cache when possible.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let request = format!("{}\n{prompt}", self.config.llm_model);
        if let Some(v) = self.cache.get("llm", &request)? {
            return v
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Parse("cached completion is not a string".into()));
        }
        let Some(url) = self.config.llm_url.clone() else {
            return Err(Error::Remote {
                attempts: 0,
                message: "GEOFORGE_LLM_URL is not set and the response is not cached".into(),
            });
        };
        let body = json!({
            "model": self.config.llm_model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let text = self.with_retries("recaption", || {
            let mut req = self.agent.post(&url);
            if let Some(key) = &self.config.llm_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
            let v: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
            v["choices"][0]["message"]["content"]
                .as_str()
                .map(|s| s.trim().to_string())
                .ok_or_else(|| "response has no message content".to_string())
        })?;
        self.cache.put("llm", &request, &Value::String(text.clone()))?;
        Ok(text)
    }
}

/// Copies a cache fixture file into place for `request`; used by tests and
/// by users seeding a cache by hand.
pub fn seed_cache(cache_dir: &Path, kind: &str, request: &str, value: &Value) -> Result<()> {
    Cache::new(Some(cache_dir.to_path_buf())).put(kind, request, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cached_geosearch_replays_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let center = LonLat { lon: 13.4, lat: 52.5 };
        let fixture = json!([
            {"title": "Alpha Tower", "extract": "A tower.", "dist_m": 12.5},
            {"title": "Beta Hall", "extract": "A hall.", "dist_m": 230.0}
        ]);
        seed_cache(dir.path(), "geosearch", "geosearch 52.500000,13.400000 r=500", &fixture).unwrap();
        let remote = Remote::offline(Cache::new(Some(dir.path().to_path_buf())));
        let got = remote.geosearch(center, DEFAULT_GEOSEARCH_RADIUS_M).unwrap();
        assert_eq!(serde_json::to_value(&got).unwrap(), fixture);
        assert!(remote.geosearch(center, 0.0).unwrap().is_empty());
        let miss = remote.geosearch(LonLat { lon: 0.0, lat: 0.0 }, 500.0);
        assert!(matches!(miss, Err(Error::Remote { .. })));
    }

    #[test]
    fn unreachable_endpoint_fails_after_bounded_retries() {
        let cfg = RemoteConfig {
            wiki_url: Some("http://127.0.0.1:9/api.php".into()),
            max_attempts: 2,
            timeout_s: 2,
            ..RemoteConfig::default()
        };
        let remote = Remote::new(cfg, Cache::disabled());
        match remote.geosearch(LonLat { lon: 1.0, lat: 1.0 }, 500.0) {
            Err(Error::Remote { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("expected a remote error, got {other:?}"),
        }
    }

    #[test]
    fn cached_completion_replays() {
        let dir = tempfile::tempdir().unwrap();
        let remote = Remote::offline(Cache::new(Some(dir.path().to_path_buf())));
        let req = format!("{}\nsummarize", remote.config.llm_model);
        seed_cache(dir.path(), "llm", &req, &json!("a quiet residential tile")).unwrap();
        assert_eq!(remote.complete("summarize").unwrap(), "a quiet residential tile");
        assert!(remote.complete("other").is_err());
    }
}
