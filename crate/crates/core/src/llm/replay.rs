//! Record/replay cassettes.
//!
//! A cassette is JSONL, one [`CassetteRecord`] per line. Records are keyed
//! by `(stream, canonical request hash)`; the n-th identical request on a
//! stream gets the n-th recording, so loops that legitimately repeat a
//! request still replay faithfully.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::{canonical_request_hash, ChatBackend, ChatRequest, ChatResponse, LlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteRecord {
    pub hash: String,
    #[serde(default)]
    pub stream: u64,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

struct State {
    records: HashMap<(u64, String), Vec<ChatResponse>>,
    cursor: HashMap<(u64, String), usize>,
}

pub struct ReplayBackend {
    path: PathBuf,
    stream: u64,
    delegate: Option<Arc<dyn ChatBackend>>,
    state: Mutex<State>,
}

fn append_lock(path: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    LOCKS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(path.to_path_buf())
        .or_default()
        .clone()
}

pub fn read_cassette(path: &Path) -> Result<Vec<CassetteRecord>, LlmError> {
    let err = |message: String| LlmError::Load {
        context: format!("cassette {}", path.display()),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(format!("line {}: {e}", i + 1))))
        .collect()
}

impl ReplayBackend {
    /// Opens `path`. Without a delegate the cassette must exist; with one a
    /// missing cassette starts empty.
    pub fn open(
        path: &Path,
        stream: u64,
        delegate: Option<Arc<dyn ChatBackend>>,
    ) -> Result<Self, LlmError> {
        let records = if delegate.is_some() && !path.exists() {
            Vec::new()
        } else {
            read_cassette(path)?
        };
        let mut map: HashMap<(u64, String), Vec<ChatResponse>> = HashMap::new();
        for r in records {
            map.entry((r.stream, r.hash)).or_default().push(r.response);
        }
        Ok(Self {
            path: path.to_path_buf(),
            stream,
            delegate,
            state: Mutex::new(State {
                records: map,
                cursor: HashMap::new(),
            }),
        })
    }

    fn record(&self, rec: &CassetteRecord) -> Result<(), LlmError> {
        let err = |e: std::io::Error| LlmError::Load {
            context: format!("cassette {}", self.path.display()),
            message: e.to_string(),
        };
        let lock = append_lock(&self.path);
        let _guard = lock.lock().unwrap();
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(err)?;
        }
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(err)
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> String {
        format!("replay:{}", self.path.display())
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let hash = canonical_request_hash(request);
        let key = (self.stream, hash.clone());
        {
            let mut state = self.state.lock().unwrap();
            let n = state.cursor.get(&key).copied().unwrap_or(0);
            let hit = state.records.get(&key).and_then(|v| v.get(n)).cloned();
            if let Some(mut resp) = hit {
                state.cursor.insert(key, n + 1);
                resp.latency = 0.0;
                return Ok(resp);
            }
        }
        let Some(delegate) = &self.delegate else {
            return Err(LlmError::CassetteMiss(hash));
        };
        let response = delegate.complete(request)?;
        self.record(&CassetteRecord {
            hash,
            stream: self.stream,
            request: request.clone(),
            response: response.clone(),
        })?;
        let mut state = self.state.lock().unwrap();
        let slot = state.records.entry(key.clone()).or_default();
        slot.push(response.clone());
        let len = slot.len();
        state.cursor.insert(key, len);
        Ok(response)
    }
}
