//! Content-addressed response cache layered over any backend.
//!
//! Entries live at `<store>/sha256/<first 2 hex>/<digest>.json` and hold the
//! request and the response verbatim. Unreadable or mismatching entries are
//! treated as misses and overwritten.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{cache_key, ChatBackend, ChatRequest, ChatResponse, FinishReason, LlmError};

#[derive(Serialize, Deserialize)]
struct Entry {
    request: ChatRequest,
    response: ChatResponse,
}

pub struct CachedBackend<B> {
    inner: B,
    store: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

/// Wraps `inner` with a cache rooted at `store`, creating the directory and
/// checking that it is writable.
pub fn with_cache<B: ChatBackend>(inner: B, store: impl AsRef<Path>) -> Result<CachedBackend<B>, LlmError> {
    let store = store.as_ref().to_path_buf();
    let root = store.join("sha256");
    fs::create_dir_all(&root).map_err(|e| LlmError::Config(format!("cache store {}: {e}", store.display())))?;
    let probe = root.join(format!(".probe-{}", std::process::id()));
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| LlmError::Config(format!("cache store {} is not writable: {e}", store.display())))?;
    Ok(CachedBackend { inner, store, hits: AtomicU64::new(0), misses: AtomicU64::new(0) })
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl<B> CachedBackend<B> {
    pub fn entry_path(&self, digest: &str) -> PathBuf {
        self.store.join("sha256").join(&digest[..2]).join(format!("{digest}.json"))
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn read(&self, path: &Path, request: &ChatRequest) -> Option<ChatResponse> {
        let text = fs::read_to_string(path).ok()?;
        let entry: Entry = serde_json::from_str(&text).ok()?;
        (entry.request == *request).then_some(entry.response)
    }

    fn write(&self, path: &Path, request: &ChatRequest, response: &ChatResponse) -> Result<(), LlmError> {
        let dir = path.parent().expect("entry has a parent");
        fs::create_dir_all(dir).map_err(|e| LlmError::Cache(e.to_string()))?;
        let body = serde_json::to_string_pretty(&Entry { request: request.clone(), response: response.clone() })
            .expect("cache entry serializes");
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::SeqCst)
        ));
        let mut file = fs::File::create(&tmp).map_err(|e| LlmError::Cache(e.to_string()))?;
        file.write_all(body.as_bytes())
            .and_then(|_| file.sync_all())
            .map_err(|e| LlmError::Cache(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| LlmError::Cache(e.to_string()))
    }
}

impl<B: ChatBackend> ChatBackend for CachedBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let path = self.entry_path(&cache_key(request));
        if let Some(hit) = self.read(&path, request) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(request)?;
        // Failed or truncated replies are returned but never pinned.
        if response.finish_reason == FinishReason::Stop {
            self.write(&path, request, &response)?;
        }
        Ok(response)
    }

    fn identity(&self) -> String {
        format!("cache({})", self.inner.identity())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockScript, ScriptedBackend};

    fn scripted(req: &ChatRequest, reply: &str) -> ScriptedBackend {
        let mut script = MockScript::default();
        script.register(req, reply);
        ScriptedBackend::new(script)
    }

    #[test]
    fn second_call_is_a_hit() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::user("m", "hello");
        let cached = with_cache(scripted(&req, "world"), dir.path()).unwrap();
        assert_eq!(cached.complete(&req).unwrap().content, "world");
        assert_eq!(cached.complete(&req).unwrap().content, "world");
        assert_eq!(cached.inner().calls(), 1);
        assert_eq!((cached.hits(), cached.misses()), (1, 1));
    }

    #[test]
    fn layout_on_cold_store() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::user("m", "hello");
        let cached = with_cache(scripted(&req, "world"), dir.path()).unwrap();
        cached.complete(&req).unwrap();
        let digest = cache_key(&req);
        let path = dir.path().join("sha256").join(&digest[..2]).join(format!("{digest}.json"));
        let stored: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(stored["request"]["messages"][0]["content"], "hello");
        assert_eq!(stored["response"]["content"], "world");
    }

    #[test]
    fn corrupted_entry_is_refetched() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::user("m", "hello");
        let cached = with_cache(scripted(&req, "world"), dir.path()).unwrap();
        let path = cached.entry_path(&cache_key(&req));
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, "{ truncated").unwrap();
        assert_eq!(cached.complete(&req).unwrap().content, "world");
        assert_eq!(cached.inner().calls(), 1);
        assert!(serde_json::from_str::<serde_json::Value>(&fs::read_to_string(&path).unwrap()).is_ok());
    }

    #[test]
    fn unwritable_store_fails_at_construction() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("not-a-dir");
        fs::write(&file, "x").unwrap();
        let req = ChatRequest::user("m", "hello");
        assert!(matches!(with_cache(scripted(&req, "w"), &file), Err(LlmError::Config(_))));
    }

    #[test]
    fn misses_propagate_inner_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cached = with_cache(ScriptedBackend::new(MockScript::default()), dir.path()).unwrap();
        assert!(matches!(cached.complete(&ChatRequest::user("m", "x")), Err(LlmError::MissingScript { .. })));
    }
}
