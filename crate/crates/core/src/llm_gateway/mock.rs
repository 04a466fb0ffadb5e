use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::{Capabilities, GatewayError, GenerationBackend, GenerationRequest, TemplateId};
use crate::embedder::fnv1a;

/// Lookup key for a rendered user prompt.
pub fn prompt_key(template: TemplateId, user_prompt: &str) -> String {
    format!("{}|{:016x}", template, fnv1a(user_prompt.as_bytes()))
}

/// Context entries the mock reads when it has no table entry.
pub mod context {
    pub const GT_CAPTION: &str = "gt_caption";
    pub const CANDIDATE_IDS: &str = "candidate_ids";
    pub const PRE_QUERY: &str = "pre_query";
    pub const CUR_ANSWER: &str = "cur_answer";
}

pub const DEFAULT_LEVEL0: &str =
    "Could you describe the main subject's appearance, activities, or the events taking place?";
pub const DEFAULT_LEVEL2: &str = "What other objects, colors, or locations are visible in the video?";

/// Table-driven backend.
///
/// A request resolves against the table by trying, in order,
/// `<template>|<key>` for each of its explicit keys, then
/// `<template>|<prompt hash>` (see [`prompt_key`]), then `<template>`.
/// Without a match a strict mock refuses; a lenient one falls back to a
/// template-specific default built from the request context.
pub struct MockBackend {
    table: HashMap<String, String>,
    strict: bool,
    delay: Option<Duration>,
    capabilities: Capabilities,
    log: Mutex<Vec<GenerationRequest>>,
}

impl MockBackend {
    pub fn new(table: HashMap<String, String>) -> Self {
        Self {
            table,
            strict: false,
            delay: None,
            capabilities: Capabilities {
                text_only: false,
                accepts_frame_attachments: true,
            },
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::MockTable(format!("{}: {e}", path.display())))?;
        let table: HashMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| GatewayError::MockTable(format!("{}: {e}", path.display())))?;
        Ok(Self::new(table))
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn text_only(mut self) -> Self {
        self.capabilities = Capabilities {
            text_only: true,
            accepts_frame_attachments: false,
        };
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.table.insert(key.into(), value.into());
    }

    /// Every request received so far, oldest first.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    fn lookup(&self, req: &GenerationRequest) -> Option<&String> {
        let t = req.template;
        req.keys
            .iter()
            .map(|k| format!("{t}|{k}"))
            .chain([prompt_key(t, &req.user), t.to_string()])
            .find_map(|k| self.table.get(&k))
    }

    fn fallback(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        let ctx = |k: &str| req.context.get(k).map(String::as_str).unwrap_or("");
        match req.template {
            TemplateId::Refine => Ok(format!("{} {}", ctx(context::PRE_QUERY), ctx(context::CUR_ANSWER))),
            TemplateId::QLevel0 => Ok(DEFAULT_LEVEL0.to_string()),
            TemplateId::QLevel1 => Ok(format!(
                "What visual detail distinguishes your video from candidates {}?",
                ctx(context::CANDIDATE_IDS)
            )),
            TemplateId::QLevel2 => Ok(DEFAULT_LEVEL2.to_string()),
            TemplateId::SimAnswer => match req.context.get(context::GT_CAPTION) {
                Some(c) => Ok(c.clone()),
                None => Err(GatewayError::BackendRefusal(
                    "no answer configured and no ground-truth caption in context".into(),
                )),
            },
            TemplateId::Caption | TemplateId::MainObjects | TemplateId::SceneType => Err(
                GatewayError::BackendRefusal(format!("no {} configured", req.template)),
            ),
        }
    }
}

impl GenerationBackend for MockBackend {
    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        self.log.lock().expect("mock log poisoned").push(req.clone());
        if let Some(d) = self.delay {
            thread::sleep(d);
        }
        match self.lookup(req) {
            Some(v) => Ok(v.clone()),
            None if self.strict => Err(GatewayError::BackendRefusal(format!(
                "no mock entry for {}",
                req.template
            ))),
            None => self.fallback(req),
        }
    }
}
