//! Classifier-confidence oracles for region-removal localization.
//!
//! A query names an image and a set of boxes to blank out; the answer is the
//! classifier's confidence for the target class plus its top class on the
//! modified image.
//!
//! Canonical key format, shared by the file oracle and the HTTP memo:
//!
//! ```text
//! <image_id>|x,y,w,h;x,y,w,h;...
//! ```
//!
//! Boxes are sorted by `(x, y, w, h)` with duplicates removed and every
//! number printed in its shortest round-trip decimal form (`10`, `12.5`).
//! The empty set is `<image_id>|`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

pub const DEFAULT_PATCH_COLOR: [u8; 3] = [128, 128, 128];
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("oracle does not know image for query {key}")]
    UnknownImage { key: String },
    #[error("oracle table has no entry for {key}")]
    MissingEntry { key: String },
    #[error("oracle transport error for {key}: {message}")]
    Transport { key: String, message: String },
    #[error("oracle request for {key} timed out")]
    Timeout { key: String },
    #[error("oracle protocol error for {key}: {message}")]
    Protocol { key: String, message: String },
    #[error("cannot load oracle table {}: {message}", path.display())]
    Load { path: PathBuf, message: String },
}

/// Image, set of removed boxes, and the class whose confidence is wanted.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleQuery {
    pub image_id: u64,
    removed_boxes: Vec<BBox>,
    pub target_class: u64,
}

impl OracleQuery {
    pub fn new(image_id: u64, removed: impl IntoIterator<Item = BBox>, target_class: u64) -> Self {
        let mut boxes: Vec<BBox> = removed.into_iter().collect();
        boxes.sort_by(BBox::canonical_cmp);
        boxes.dedup_by(|a, b| a.canonical_cmp(b).is_eq());
        Self { image_id, removed_boxes: boxes, target_class }
    }

    /// Removed boxes in canonical order.
    pub fn removed_boxes(&self) -> &[BBox] {
        &self.removed_boxes
    }

    pub fn canonical_key(&self) -> String {
        canonical_key(self.image_id, &self.removed_boxes)
    }
}

fn format_number(v: f64) -> String {
    // -0 and 0 are the same coordinate
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v}")
    }
}

/// Key for an already canonically ordered box list.
pub fn canonical_key(image_id: u64, sorted_boxes: &[BBox]) -> String {
    let boxes: Vec<String> = sorted_boxes
        .iter()
        .map(|b| b.to_array().iter().map(|&v| format_number(v)).collect::<Vec<_>>().join(","))
        .collect();
    format!("{image_id}|{}", boxes.join(";"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleAnswer {
    pub target_confidence: f64,
    pub top_class: u64,
}

pub trait ConfidenceOracle: Send + Sync {
    fn confidence(&self, query: &OracleQuery) -> Result<OracleAnswer, OracleError>;
}

impl<T: ConfidenceOracle + ?Sized> ConfidenceOracle for &T {
    fn confidence(&self, query: &OracleQuery) -> Result<OracleAnswer, OracleError> {
        (**self).confidence(query)
    }
}

impl<T: ConfidenceOracle + ?Sized> ConfidenceOracle for Box<T> {
    fn confidence(&self, query: &OracleQuery) -> Result<OracleAnswer, OracleError> {
        (**self).confidence(query)
    }
}

/// Value stored per canonical key in a file oracle table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub confidence: f64,
    pub top_class: u64,
}

/// Lookup-table oracle backed by a JSON object `{canonical_key: TableEntry}`.
#[derive(Debug, Clone, Default)]
pub struct FileOracle {
    table: HashMap<String, TableEntry>,
    images: HashSet<u64>,
}

impl FileOracle {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, TableEntry)>) -> Result<Self, String> {
        let mut table = HashMap::new();
        let mut images = HashSet::new();
        for (key, entry) in entries {
            let image = key
                .split_once('|')
                .and_then(|(id, _)| id.parse::<u64>().ok())
                .ok_or_else(|| format!("key {key:?} does not start with '<image_id>|'"))?;
            if !(0.0..=1.0).contains(&entry.confidence) {
                return Err(format!("key {key:?}: confidence {} outside [0, 1]", entry.confidence));
            }
            images.insert(image);
            table.insert(key, entry);
        }
        Ok(Self { table, images })
    }

    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let load_err = |message: String| OracleError::Load { path: path.to_path_buf(), message };
        let text = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let raw: BTreeMap<String, TableEntry> = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        Self::from_entries(raw).map_err(load_err)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl ConfidenceOracle for FileOracle {
    fn confidence(&self, query: &OracleQuery) -> Result<OracleAnswer, OracleError> {
        let key = query.canonical_key();
        if !self.images.contains(&query.image_id) {
            return Err(OracleError::UnknownImage { key });
        }
        match self.table.get(&key) {
            Some(e) => Ok(OracleAnswer { target_confidence: e.confidence, top_class: e.top_class }),
            None => Err(OracleError::MissingEntry { key }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpOracleConfig {
    /// Service root; requests go to `<base_url>/classify`.
    pub base_url: String,
    pub timeout: Duration,
    /// Extra attempts after a transport failure. Zero by default because
    /// removal order depends on every answer.
    pub retries: u32,
    pub patch_color: [u8; 3],
    pub bearer_token: Option<String>,
    pub memoize: bool,
}

impl HttpOracleConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: DEFAULT_TIMEOUT,
            retries: 0,
            patch_color: DEFAULT_PATCH_COLOR,
            bearer_token: None,
            memoize: true,
        }
    }
}

/// Request body of `POST /classify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image_id: u64,
    pub removed_boxes: Vec<[f64; 4]>,
    pub patch_color: [u8; 3],
}

/// Response body of `POST /classify`. Keys are decimal class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub confidences: BTreeMap<String, f64>,
}

/// Client for an external classifier service.
pub struct HttpOracle {
    config: HttpOracleConfig,
    agent: ureq::Agent,
    memo: Mutex<HashMap<String, BTreeMap<u64, f64>>>,
    requests: AtomicUsize,
}

impl HttpOracle {
    pub fn new(config: HttpOracleConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self { config, agent, memo: Mutex::new(HashMap::new()), requests: AtomicUsize::new(0) }
    }

    pub fn config(&self) -> &HttpOracleConfig {
        &self.config
    }

    /// Requests actually sent, memo hits excluded.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn endpoint(&self) -> String {
        format!("{}/classify", self.config.base_url.trim_end_matches('/'))
    }

    fn fetch(&self, query: &OracleQuery, key: &str) -> Result<BTreeMap<u64, f64>, OracleError> {
        let body = ClassifyRequest {
            image_id: query.image_id,
            removed_boxes: query.removed_boxes().iter().map(|b| b.to_array()).collect(),
            patch_color: self.config.patch_color,
        };
        let mut attempt = 0;
        loop {
            self.requests.fetch_add(1, Ordering::SeqCst);
            let mut req = self.agent.post(&self.endpoint());
            if let Some(token) = &self.config.bearer_token {
                req = req.set("Authorization", &format!("Bearer {token}"));
            }
            match req.send_json(&body) {
                Ok(resp) => return parse_response(resp, key),
                Err(ureq::Error::Status(code, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    return Err(OracleError::Protocol {
                        key: key.to_string(),
                        message: format!("HTTP {code}: {text}"),
                    });
                }
                Err(ureq::Error::Transport(t)) => {
                    if attempt < self.config.retries {
                        attempt += 1;
                        continue;
                    }
                    if is_timeout(&t) {
                        return Err(OracleError::Timeout { key: key.to_string() });
                    }
                    return Err(OracleError::Transport { key: key.to_string(), message: t.to_string() });
                }
            }
        }
    }
}

fn is_timeout(t: &ureq::Transport) -> bool {
    let mut source: Option<&(dyn std::error::Error + 'static)> = std::error::Error::source(t);
    while let Some(err) = source {
        if let Some(io) = err.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = err.source();
    }
    false
}

fn parse_response(resp: ureq::Response, key: &str) -> Result<BTreeMap<u64, f64>, OracleError> {
    let protocol = |message: String| OracleError::Protocol { key: key.to_string(), message };
    let body: ClassifyResponse = resp.into_json().map_err(|e| protocol(format!("bad response body: {e}")))?;
    if body.confidences.is_empty() {
        return Err(protocol("empty confidences".into()));
    }
    body.confidences
        .into_iter()
        .map(|(k, v)| {
            let class = k.parse::<u64>().map_err(|_| protocol(format!("class id {k:?} is not an integer")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(protocol(format!("confidence {v} for class {class} outside [0, 1]")));
            }
            Ok((class, v))
        })
        .collect()
}

/// Target confidence (0 when absent) and arg-max class, ties to the lower id.
pub fn answer_from_confidences(confidences: &BTreeMap<u64, f64>, target_class: u64) -> Option<OracleAnswer> {
    let mut best: Option<(u64, f64)> = None;
    for (&c, &p) in confidences {
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((c, p));
        }
    }
    best.map(|(top_class, _)| OracleAnswer {
        target_confidence: confidences.get(&target_class).copied().unwrap_or(0.0),
        top_class,
    })
}

impl ConfidenceOracle for HttpOracle {
    fn confidence(&self, query: &OracleQuery) -> Result<OracleAnswer, OracleError> {
        let key = query.canonical_key();
        if self.config.memoize {
            if let Some(hit) = self.memo.lock().expect("memo lock").get(&key) {
                return Ok(answer_from_confidences(hit, query.target_class).expect("memo entries are non-empty"));
            }
        }
        let confidences = self.fetch(query, &key)?;
        let answer = answer_from_confidences(&confidences, query.target_class).expect("checked non-empty");
        if self.config.memoize {
            self.memo.lock().expect("memo lock").insert(key, confidences);
        }
        Ok(answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn key_format() {
        let q = OracleQuery::new(7, [bb(20.0, 0.0, 5.5, 5.0), bb(0.0, 10.0, 3.0, 4.0)], 1);
        assert_eq!(q.canonical_key(), "7|0,10,3,4;20,0,5.5,5");
        assert_eq!(OracleQuery::new(7, [], 1).canonical_key(), "7|");
    }

    #[test]
    fn key_is_set_based() {
        let a = bb(1.0, 2.0, 3.0, 4.0);
        let b = bb(0.25, 2.0, 3.0, 4.0);
        let k1 = OracleQuery::new(1, [a, b], 0).canonical_key();
        let k2 = OracleQuery::new(1, [b, a, b], 0).canonical_key();
        assert_eq!(k1, k2);
    }

    #[test]
    fn file_oracle_lookup_and_errors() {
        let oracle =
            FileOracle::from_entries([("3|".to_string(), TableEntry { confidence: 0.95, top_class: 5 })]).unwrap();
        let ans = oracle.confidence(&OracleQuery::new(3, [], 5)).unwrap();
        assert_eq!(ans, OracleAnswer { target_confidence: 0.95, top_class: 5 });

        let missing = oracle.confidence(&OracleQuery::new(3, [bb(0.0, 0.0, 1.0, 1.0)], 5));
        assert_eq!(missing, Err(OracleError::MissingEntry { key: "3|0,0,1,1".into() }));
        assert!(matches!(oracle.confidence(&OracleQuery::new(4, [], 5)), Err(OracleError::UnknownImage { .. })));
    }

    #[test]
    fn file_oracle_rejects_bad_tables() {
        assert!(FileOracle::from_entries([("x".to_string(), TableEntry { confidence: 0.5, top_class: 1 })]).is_err());
        assert!(FileOracle::from_entries([("1|".to_string(), TableEntry { confidence: 1.5, top_class: 1 })]).is_err());
    }

    #[test]
    fn argmax_ties_to_lower_class() {
        let c: BTreeMap<u64, f64> = [(4, 0.4), (2, 0.4), (9, 0.2)].into();
        let a = answer_from_confidences(&c, 9).unwrap();
        assert_eq!(a.top_class, 2);
        assert_eq!(a.target_confidence, 0.2);
        assert_eq!(answer_from_confidences(&c, 77).unwrap().target_confidence, 0.0);
    }
}
