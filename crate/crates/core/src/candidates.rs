//! Candidate-name generation: the two-message prompt, language-model clients and
//! validation of the returned name lists.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::ContextNames;
use crate::error::{Error, Result};
use crate::store::{read_json, write_json, ClassEntry};

pub const MIN_CANDIDATES: usize = 5;
pub const MAX_CANDIDATES: usize = 10;

pub const SYSTEM_MESSAGE: &str = "You are a helpful assistant aiding in renaming dataset classes. \
Each class has an inadequate original name and a set of context names derived from related captions \
(with their frequencies sorted and listed in brackets). These context names provide insights into the \
category's essence. When renaming, you may: 1. Use synonyms or subcategories of the original class name \
(e.g., 'grass' can be renamed as 'lawn, turf'). 2. Provide a short context to address polysemy \
(e.g., 'fan' can be renamed as 'ceiling fan, floor fan'). Please generate new names for each class in \
lower case, listed in a row. Ensure the new names logically connect to the original class, using it as \
the head noun. Avoid arbitrary noun concatenations and nonsensical names. For instance, the class 'sky' \
should not yield names like 'person under sky'. Ready to proceed with naming? Kindly provide the original \
class names and context names.";

/// System message for the ablation without context names.
pub const SYSTEM_MESSAGE_NO_CONTEXT: &str = "You are a helpful assistant aiding in renaming dataset \
classes. Each class has an inadequate original name. When renaming, you may: 1. Use synonyms or \
subcategories of the original class name (e.g., 'grass' can be renamed as 'lawn, turf'). 2. Provide a \
short context to address polysemy (e.g., 'fan' can be renamed as 'ceiling fan, floor fan'). Please \
generate new names for each class in lower case, listed in a row. Ensure the new names logically connect \
to the original class, using it as the head noun. Avoid arbitrary noun concatenations and nonsensical \
names. For instance, the class 'sky' should not yield names like 'person under sky'. Ready to proceed \
with naming? Kindly provide the original class names.";

const USER_TAIL: &str = "What are the new names? Only provide 5-10 names. And make sure you generate at \
least 3 reasonable synonyms or subcategories.";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPair {
    pub system_message: String,
    pub user_message: String,
}

impl PromptPair {
    /// Hex SHA-256 of `system || 0x00 || user`; keys recorded responses.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_message.as_bytes());
        h.update([0u8]);
        h.update(self.user_message.as_bytes());
        hex::encode(h.finalize())
    }
}

pub fn format_context(context: &ContextNames) -> String {
    context
        .entries
        .iter()
        .map(|(noun, count)| format!("{noun} ({count})"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn build_prompt(class: &ClassEntry, context: &ContextNames, use_context: bool) -> PromptPair {
    let original = class.original_names.join(", ");
    if use_context {
        PromptPair {
            system_message: SYSTEM_MESSAGE.to_string(),
            user_message: format!(
                "Original name: {original}, context names (with frequencies) are {}. {USER_TAIL}",
                format_context(context)
            ),
        }
    } else {
        PromptPair {
            system_message: SYSTEM_MESSAGE_NO_CONTEXT.to_string(),
            user_message: format!("Original name: {original}. {USER_TAIL}"),
        }
    }
}

pub trait LanguageModelClient: Send + Sync {
    fn complete(&self, prompt: &PromptPair) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recording {
    pub digest: String,
    /// Free-form note, usually the class name.
    #[serde(default)]
    pub label: String,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingSet {
    pub recordings: Vec<Recording>,
}

impl RecordingSet {
    pub fn push(&mut self, prompt: &PromptPair, label: &str, response: &str) {
        self.recordings.push(Recording {
            digest: prompt.digest(),
            label: label.to_string(),
            response: response.to_string(),
        });
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Replays recorded responses keyed by prompt digest.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    responses: HashMap<String, String>,
}

impl FixtureClient {
    pub fn from_recordings(set: RecordingSet) -> Self {
        FixtureClient {
            responses: set
                .recordings
                .into_iter()
                .map(|r| (r.digest, r.response))
                .collect(),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::from_recordings(read_json(path)?))
    }
}

impl LanguageModelClient for FixtureClient {
    fn complete(&self, prompt: &PromptPair) -> Result<String> {
        let digest = prompt.digest();
        self.responses
            .get(&digest)
            .cloned()
            .ok_or(Error::FixtureMiss(digest))
    }
}

pub const API_KEY_ENV: &str = "SEGRENAME_LLM_API_KEY";

/// Chat-completions client for an OpenAI-compatible endpoint. The key comes from
/// `SEGRENAME_LLM_API_KEY`.
pub struct LiveClient {
    endpoint: String,
    model: String,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl LiveClient {
    pub fn from_env(endpoint: &str, model: &str) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Config(format!("{API_KEY_ENV} is not set")))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(LiveClient {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            http,
        })
    }
}

impl LanguageModelClient for LiveClient {
    fn complete(&self, prompt: &PromptPair) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": prompt.system_message},
                {"role": "user", "content": prompt.user_message},
            ],
        });
        let resp = self
            .http
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Error::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Client(format!("HTTP {}", resp.status())));
        }
        let value: serde_json::Value = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Client("response has no message content".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Llm,
    Fixture,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub class_id: u32,
    pub candidates: Vec<String>,
    pub provenance: Provenance,
}

impl CandidatePool {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.candidates {
            if c.trim().is_empty() || *c != c.to_lowercase() || !seen.insert(c) {
                return Err(Error::Invariant(format!(
                    "class {}: candidate {c:?} is empty, not lowercase or repeated",
                    self.class_id
                )));
            }
        }
        let n = self.candidates.len();
        if self.provenance != Provenance::Manual && !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&n)
        {
            return Err(Error::Invariant(format!(
                "class {}: {n} candidates, expected {MIN_CANDIDATES}-{MAX_CANDIDATES}",
                self.class_id
            )));
        }
        Ok(())
    }
}

fn strip_list_marker(item: &str) -> &str {
    let item = item.trim();
    let digits = item.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &item[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    item.strip_prefix(['-', '*', '•'])
        .map(str::trim_start)
        .unwrap_or(item)
}

/// Split a free-form response into cleaned, lowercase, de-duplicated names.
pub fn parse_candidates(raw: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in raw.split([',', '\n', ';']) {
        let item = strip_list_marker(item);
        let cleaned = item
            .trim_matches(|c: char| c.is_whitespace() || "\"'`.“”‘’".contains(c))
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        if !cleaned.is_empty() && !out.contains(&cleaned) {
            out.push(cleaned);
        }
    }
    out
}

pub fn validate_response(class_id: u32, raw: &str, provenance: Provenance) -> Result<CandidatePool> {
    let candidates = parse_candidates(raw);
    if !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&candidates.len()) {
        return Err(Error::CandidateValidation {
            count: candidates.len(),
            raw: raw.to_string(),
        });
    }
    let pool = CandidatePool {
        class_id,
        candidates,
        provenance,
    };
    pool.validate()?;
    Ok(pool)
}

/// Ask the client for names, retrying transient client failures up to `attempts` times.
pub fn generate_candidates(
    class_id: u32,
    prompt: &PromptPair,
    client: &dyn LanguageModelClient,
    provenance: Provenance,
    attempts: usize,
) -> Result<CandidatePool> {
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        match client.complete(prompt) {
            Ok(raw) => return validate_response(class_id, &raw, provenance),
            Err(Error::Client(msg)) => {
                log::warn!("class {class_id}: client attempt {} failed: {msg}", attempt + 1);
                last = Some(Error::Client(msg));
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Client("no attempts made".into())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub original_names: Vec<String>,
    #[serde(default)]
    pub context: Vec<(String, u32)>,
    pub candidates: Vec<String>,
    pub provenance: Provenance,
}

/// Per-dataset candidate document: `class_id -> {original_names, context, candidates, provenance}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateStore {
    pub classes: BTreeMap<u32, CandidateEntry>,
}

impl CandidateStore {
    pub fn insert(&mut self, class: &ClassEntry, context: Option<&ContextNames>, pool: CandidatePool) {
        self.classes.insert(
            pool.class_id,
            CandidateEntry {
                original_names: class.original_names.clone(),
                context: context.map(|c| c.entries.clone()).unwrap_or_default(),
                candidates: pool.candidates,
                provenance: pool.provenance,
            },
        );
    }

    pub fn pool(&self, class_id: u32) -> Option<CandidatePool> {
        self.classes.get(&class_id).map(|e| CandidatePool {
            class_id,
            candidates: e.candidates.clone(),
            provenance: e.provenance,
        })
    }

    pub fn pools(&self) -> BTreeMap<u32, Vec<String>> {
        self.classes
            .iter()
            .map(|(id, e)| (*id, e.candidates.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for id in self.classes.keys() {
            self.pool(*id).expect("present").validate()?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let store: CandidateStore = read_json(path)?;
        store.validate()?;
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_json(path, self)
    }
}
