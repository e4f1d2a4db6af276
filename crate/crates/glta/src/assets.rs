//! Profile and prediction texts per user, generated offline or by an
//! external model, and cached in a JSON-lines file.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use glta_core::checksum::Checksum;
use glta_core::textgen::{
    offline_prediction, offline_profile, prediction_prompt, profile_prompt, DEFAULT_TEXT,
};
use serde::{Deserialize, Serialize};

use crate::config::{GenerationMode, GenerationSection};
use crate::error::{io_err, Error, Result};
use crate::llm::ChatClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    External,
    Offline,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserTextAssets {
    pub user_id: String,
    pub profile_text: String,
    pub prediction_text: String,
    pub provenance: Provenance,
    pub model_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub user_id: String,
    pub mode: String,
    pub template_hash: String,
    pub text: String,
    #[serde(default)]
    pub model: Option<String>,
}

type Key = (String, String, String, Option<String>);

fn key(r: &CacheRecord) -> Key {
    (
        r.user_id.clone(),
        r.mode.clone(),
        r.template_hash.clone(),
        r.model.clone(),
    )
}

/// Append-only cache keyed on user, mode, template hash and model.
#[derive(Debug)]
pub struct TextCache {
    path: PathBuf,
    records: HashMap<Key, String>,
}

impl TextCache {
    /// Opens the cache; a missing file is an empty cache.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = HashMap::new();
        match std::fs::read_to_string(path) {
            Ok(text) => {
                for (n, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let r: CacheRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: n + 1,
                        msg: e.to_string(),
                    })?;
                    records.insert(key(&r), r.text);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(path)(e)),
        }
        Ok(Self {
            path: path.to_path_buf(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, user_id: &str, mode: &str, template_hash: &str, model: Option<&str>) -> Option<&str> {
        let k = (
            user_id.to_string(),
            mode.to_string(),
            template_hash.to_string(),
            model.map(str::to_string),
        );
        self.records.get(&k).map(String::as_str)
    }

    /// Appends records to the file and the in-memory map.
    pub fn extend(&mut self, records: &[CacheRecord]) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r)?);
            buf.push('\n');
            self.records.insert(key(r), r.text.clone());
        }
        f.write_all(buf.as_bytes()).map_err(io_err(&self.path))
    }
}

/// The two generation requests made for every user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Profile,
    Prediction,
}

/// Hash of everything that determines a generated text besides the user
/// and model: the request kind, generation settings and filled template.
fn template_hash(kind: Kind, settings: &str, filled: &str) -> String {
    let mut h = Checksum::new();
    h.update_bytes(format!("{kind:?}\n{settings}\n").as_bytes());
    h.update_bytes(filled.as_bytes());
    h.hex()
}

/// One user's interacted-item descriptions, oldest first.
#[derive(Debug, Clone)]
pub struct UserHistory {
    pub user_id: String,
    pub descriptions: Vec<String>,
}

struct Pending {
    user: usize,
    kind: Kind,
    hash: String,
    prompt: String,
}

/// Texts for every user. Cached entries are reused; the rest are generated
/// and appended to the cache. External requests run at most
/// `max_in_flight` at a time.
pub fn generate_assets(
    cfg: &GenerationSection,
    histories: &[UserHistory],
    cache: &mut TextCache,
    client: Option<&ChatClient>,
) -> Result<Vec<UserTextAssets>> {
    let mode = cfg.mode.name();
    let model = match cfg.mode {
        GenerationMode::External => Some(
            client
                .ok_or_else(|| Error::Config(String::from("external generation needs a client")))?
                .model()
                .to_string(),
        ),
        GenerationMode::Offline => None,
    };
    let settings = match cfg.mode {
        GenerationMode::Offline => format!("terms={} recency={}", cfg.terms, cfg.recency),
        GenerationMode::External => String::new(),
    };
    let mut out: Vec<UserTextAssets> = histories
        .iter()
        .map(|h| UserTextAssets {
            user_id: h.user_id.clone(),
            profile_text: String::new(),
            prediction_text: String::new(),
            provenance: Provenance::Cached,
            model_name: model.clone(),
        })
        .collect();
    let mut fresh = Vec::new();
    let mut hits = 0;
    // Profiles first: external prediction prompts contain the profile.
    for kind in [Kind::Profile, Kind::Prediction] {
        let mut pending = Vec::new();
        for (u, h) in histories.iter().enumerate() {
            let filled = match kind {
                Kind::Profile => profile_prompt(&h.descriptions),
                Kind::Prediction => prediction_prompt(&h.descriptions, &out[u].profile_text),
            };
            let hash = template_hash(kind, &settings, &filled);
            let text = if h.descriptions.is_empty() {
                Some(DEFAULT_TEXT.to_string())
            } else {
                cache
                    .get(&h.user_id, mode, &hash, model.as_deref())
                    .map(str::to_string)
            };
            match text {
                Some(t) => {
                    hits += usize::from(!h.descriptions.is_empty());
                    set_text(&mut out[u], kind, t);
                }
                None => pending.push(Pending {
                    user: u,
                    kind,
                    hash,
                    prompt: filled,
                }),
            }
        }
        let texts = match (cfg.mode, client) {
            (GenerationMode::External, Some(c)) => {
                run_external(c, cfg, histories, &pending, &mut out)?
            }
            _ => pending
                .iter()
                .map(|p| {
                    out[p.user].provenance = Provenance::Offline;
                    (offline_text(cfg, &histories[p.user].descriptions, p.kind), true)
                })
                .collect(),
        };
        for (p, (text, cacheable)) in pending.iter().zip(texts) {
            set_text(&mut out[p.user], p.kind, text.clone());
            if !cacheable {
                continue;
            }
            fresh.push(CacheRecord {
                user_id: histories[p.user].user_id.clone(),
                mode: mode.to_string(),
                template_hash: p.hash.clone(),
                text,
                model: model.clone(),
            });
        }
    }
    if hits > 0 {
        log::info!("reused {hits} cached texts, generated {}", fresh.len());
    }
    cache.extend(&fresh)?;
    Ok(out)
}

fn set_text(a: &mut UserTextAssets, kind: Kind, text: String) {
    match kind {
        Kind::Profile => a.profile_text = text,
        Kind::Prediction => a.prediction_text = text,
    }
}

fn offline_text(cfg: &GenerationSection, history: &[String], kind: Kind) -> String {
    match kind {
        Kind::Profile => offline_profile(history, cfg.terms),
        Kind::Prediction => offline_prediction(history, cfg.terms, cfg.recency),
    }
}

fn run_external(
    client: &ChatClient,
    cfg: &GenerationSection,
    histories: &[UserHistory],
    pending: &[Pending],
    out: &mut [UserTextAssets],
) -> Result<Vec<(String, bool)>> {
    let mut texts = Vec::with_capacity(pending.len());
    for chunk in pending.chunks(cfg.max_in_flight) {
        let replies: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|p| s.spawn(|| client.complete(&p.prompt)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("request thread panicked"))
                .collect()
        });
        for (p, reply) in chunk.iter().zip(replies) {
            let text = match reply {
                Ok(t) if !t.trim().is_empty() => {
                    out[p.user].provenance = Provenance::External;
                    (t.trim().to_string(), true)
                }
                Ok(_) if cfg.fallback_offline => {
                    log::warn!("empty reply for user {}; using offline text", histories[p.user].user_id);
                    out[p.user].provenance = Provenance::Offline;
                    (offline_text(cfg, &histories[p.user].descriptions, p.kind), false)
                }
                Err(e) if cfg.fallback_offline => {
                    log::warn!("generation for user {} failed ({e}); using offline text", histories[p.user].user_id);
                    out[p.user].provenance = Provenance::Offline;
                    (offline_text(cfg, &histories[p.user].descriptions, p.kind), false)
                }
                Ok(_) => {
                    return Err(Error::Config(format!(
                        "empty reply for user {}",
                        histories[p.user].user_id
                    )))
                }
                Err(e) => return Err(e.into()),
            };
            texts.push(text);
        }
    }
    Ok(texts)
}
