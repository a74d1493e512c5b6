//! Scripted replay backend and a recorder that produces scripts.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{cache_key, ChatBackend, ChatRequest, ChatResponse, LlmError};

/// Reply table for [`ScriptedBackend`].
///
/// Lookup tries the request digest first, then literal substrings of the
/// prompt text; a substring lookup must match exactly one entry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub by_digest: BTreeMap<String, String>,
    #[serde(default)]
    pub by_substring: BTreeMap<String, String>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("cannot read mock script {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("malformed mock script {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    pub fn register(&mut self, request: &ChatRequest, reply: impl Into<String>) {
        self.by_digest.insert(cache_key(request), reply.into());
    }

    pub fn register_substring(&mut self, needle: impl Into<String>, reply: impl Into<String>) {
        self.by_substring.insert(needle.into(), reply.into());
    }

    pub fn lookup(&self, request: &ChatRequest) -> Result<&str, LlmError> {
        let digest = cache_key(request);
        if let Some(reply) = self.by_digest.get(&digest) {
            return Ok(reply);
        }
        let text = request.prompt_text();
        let hits: Vec<&String> =
            self.by_substring.iter().filter(|(needle, _)| text.contains(needle.as_str())).map(|(_, r)| r).collect();
        match hits.len() {
            0 => Err(LlmError::MissingScript { digest }),
            1 => Ok(hits[0]),
            count => Err(LlmError::AmbiguousScript { digest, count }),
        }
    }
}

/// Deterministic backend answering from a [`MockScript`]. Unknown prompts are
/// an error, never a default reply.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    script: MockScript,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(script: MockScript) -> Self {
        ScriptedBackend { script, calls: AtomicUsize::new(0) }
    }

    /// Number of `complete` calls served, including failed lookups.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let reply = self.script.lookup(request)?;
        Ok(ChatResponse::offline(request, reply))
    }

    fn identity(&self) -> String {
        format!("mock(digests={}, substrings={})", self.script.by_digest.len(), self.script.by_substring.len())
    }
}

/// Passes requests through and remembers every successful reply by digest.
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<MockScript>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend { inner, recorded: Mutex::new(MockScript::default()) }
    }

    pub fn script(&self) -> MockScript {
        self.recorded.lock().expect("recorder lock").clone()
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let response = self.inner.complete(request)?;
        self.recorded.lock().expect("recorder lock").register(request, response.content.clone());
        Ok(response)
    }

    fn identity(&self) -> String {
        format!("record({})", self.inner.identity())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registered_digest_replies_verbatim() {
        let req = ChatRequest::user("gpt-4", "predict tomorrow");
        let mut script = MockScript::default();
        script.register(&req, "[pickup] 500 [dropoff] 300 [reasoning] test");
        let backend = ScriptedBackend::new(script);
        assert_eq!(backend.complete(&req).unwrap().content, "[pickup] 500 [dropoff] 300 [reasoning] test");
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn unknown_prompt_is_refused() {
        let backend = ScriptedBackend::new(MockScript::default());
        let err = backend.complete(&ChatRequest::user("gpt-4", "anything")).unwrap_err();
        assert!(matches!(err, LlmError::MissingScript { .. }));
    }

    #[test]
    fn substring_matching_must_be_unique() {
        let mut script = MockScript::default();
        script.register_substring("Nets", "[Category] NBA Basketball Game [Summary] x");
        script.register_substring("Mavericks", "[Category] Other [Summary] y");
        let backend = ScriptedBackend::new(script);
        let ok = backend.complete(&ChatRequest::user("m", "Brooklyn Nets tonight")).unwrap();
        assert!(ok.content.starts_with("[Category] NBA"));
        let err = backend.complete(&ChatRequest::user("m", "Brooklyn Nets vs. Dallas Mavericks")).unwrap_err();
        assert!(matches!(err, LlmError::AmbiguousScript { count: 2, .. }));
    }

    #[test]
    fn recorder_produces_replayable_script() {
        let mut script = MockScript::default();
        script.register_substring("hello", "world");
        let recorder = RecordingBackend::new(ScriptedBackend::new(script));
        let req = ChatRequest::user("m", "hello there");
        recorder.complete(&req).unwrap();
        let replay = ScriptedBackend::new(recorder.script());
        assert_eq!(replay.complete(&req).unwrap().content, "world");
        let parsed: MockScript = serde_json::from_str(&recorder.script().to_json()).unwrap();
        assert_eq!(parsed, recorder.script());
    }
}
