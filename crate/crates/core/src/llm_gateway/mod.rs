//! Generation-dependent steps behind one backend contract: video
//! description, clarifying questions, simulated answers, and query
//! refinement.
//!
//! [`Gateway`] renders the fixed prompt templates, sends them to a
//! [`GenerationBackend`] under a deadline, and validates the output (length
//! caps, list parsing, question prefix checks).

mod http;
mod mock;
mod templates;

use std::collections::BTreeMap;
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{context, prompt_key, MockBackend, DEFAULT_LEVEL0, DEFAULT_LEVEL2};
pub use templates::{
    render, template, Bindings, PromptTemplate, RenderedPrompt, TemplateId, MAX_NEW_TOKENS,
    PLACEHOLDERS,
};

use crate::embedding_store::VideoRecord;
use crate::tqfs::Frame;
use crate::uncertainty::Level;

pub const CAPTION_WORD_LIMIT: usize = 80;
pub const QUERY_WORD_LIMIT: usize = 60;
pub const LIST_LIMIT: usize = 5;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("template placeholder {{{0}}} has no binding")]
    UnboundPlaceholder(String),
    #[error("backend did not answer within {0:?}")]
    BackendTimeout(Duration),
    #[error("backend refused: {0}")]
    BackendRefusal(String),
    #[error("could not parse backend output: {raw:?}")]
    ParseFailure { raw: String },
    #[error("backend returned an empty generation")]
    EmptyGeneration,
    #[error("unsupported by this backend: {0}")]
    Unsupported(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("mock table: {0}")]
    MockTable(String),
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub text_only: bool,
    pub accepts_frame_attachments: bool,
}

/// A fully rendered generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub template: TemplateId,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// PNG-encoded frames.
    #[serde(skip)]
    pub attachments: Vec<Vec<u8>>,
    pub bindings: Bindings,
    /// Explicit lookup keys for table-driven backends, most specific first.
    pub keys: Vec<String>,
    /// Side information some backends use when they have no better answer.
    pub context: BTreeMap<String, String>,
    pub seed: Option<u64>,
}

pub trait GenerationBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;
    fn generate(&self, request: &GenerationRequest) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub timeout: Duration,
    /// Candidates whose meta-information goes into a level-1 prompt.
    pub level1_candidates: usize,
    pub temperature_overrides: BTreeMap<TemplateId, f64>,
    pub seed: Option<u64>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            level1_candidates: 5,
            temperature_overrides: BTreeMap::new(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoDescription {
    pub caption: String,
    pub objects: Vec<String>,
    pub scene_keywords: Vec<String>,
}

/// Whitespace-delimited word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// The first `limit` words of `text`, as a slice of the original string.
pub fn truncate_words(text: &str, limit: usize) -> &str {
    let text = text.trim();
    let mut words = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                in_word = false;
                if words == limit {
                    return &text[..i];
                }
            }
        } else if !in_word {
            in_word = true;
            words += 1;
        }
    }
    if limit == 0 {
        ""
    } else {
        text
    }
}

/// Items from a list-style generation: one per line, or comma-separated when
/// the output is a single line. Bullets, numbering, and quotes are stripped.
pub fn parse_list(raw: &str) -> Vec<String> {
    let lines: Vec<&str> = raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let pieces: Vec<&str> = if lines.len() > 1 {
        lines
    } else {
        raw.split([',', ';']).collect()
    };
    let mut out: Vec<String> = Vec::new();
    for p in pieces {
        let mut s = p.trim();
        s = s.trim_start_matches(['-', '*', '\u{2022}', ' ']);
        let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 && s[digits..].starts_with(['.', ')']) {
            s = &s[digits + 1..];
        }
        let s = s
            .trim()
            .trim_matches(['\'', '"', '`'])
            .trim_end_matches('.')
            .trim();
        if !s.is_empty() && !out.iter().any(|o| o.eq_ignore_ascii_case(s)) {
            out.push(s.to_string());
        }
        if out.len() == LIST_LIMIT {
            break;
        }
    }
    out
}

/// True when the text opens with "What", "Where", or "Who".
pub fn starts_with_wh(text: &str) -> bool {
    let first: String = text
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    matches!(first.as_str(), "what" | "where" | "who")
}

/// One numbered line per candidate.
pub fn format_meta_list(candidates: &[VideoRecord]) -> String {
    candidates
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{}. [{}] {}", i + 1, v.id, v.meta_text()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct Gateway {
    backend: Arc<dyn GenerationBackend>,
    config: GatewayConfig,
}

impl Gateway {
    pub fn new(backend: Arc<dyn GenerationBackend>) -> Self {
        Self {
            backend,
            config: GatewayConfig::default(),
        }
    }

    pub fn with_config(mut self, config: GatewayConfig) -> Self {
        self.config = config;
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn backend(&self) -> &Arc<dyn GenerationBackend> {
        &self.backend
    }

    /// Renders `id` with `bindings` into a request.
    pub fn build_request(
        &self,
        id: TemplateId,
        bindings: Bindings,
        keys: Vec<String>,
        context: BTreeMap<String, String>,
        attachments: Vec<Vec<u8>>,
    ) -> Result<GenerationRequest> {
        let t = template(id);
        let prompt = t.render(&bindings)?;
        Ok(GenerationRequest {
            template: id,
            system: prompt.system,
            user: prompt.user,
            temperature: self
                .config
                .temperature_overrides
                .get(&id)
                .copied()
                .unwrap_or(t.temperature),
            max_tokens: t.max_new_tokens,
            attachments,
            bindings,
            keys,
            context,
            seed: self.config.seed,
        })
    }

    /// Sends a request and returns the trimmed, non-empty output. Gives up
    /// after the configured timeout; the backend call may still finish in
    /// the background.
    pub fn execute(&self, request: GenerationRequest) -> Result<String> {
        let (tx, rx) = mpsc::channel();
        let backend = Arc::clone(&self.backend);
        thread::Builder::new()
            .name("umivr-generate".into())
            .spawn(move || {
                let _ = tx.send(backend.generate(&request));
            })
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let out = match rx.recv_timeout(self.config.timeout) {
            Ok(r) => r?,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                return Err(GatewayError::BackendTimeout(self.config.timeout))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(GatewayError::Transport("generation thread exited".into()))
            }
        };
        let out = out.trim();
        if out.is_empty() {
            return Err(GatewayError::EmptyGeneration);
        }
        Ok(out.to_string())
    }

    /// Caption (at most 80 words), objects, and scene keywords (at most 5
    /// each) for a video.
    pub fn describe_video(&self, video_id: &str, frames: &[Frame]) -> Result<VideoDescription> {
        if !self.backend.capabilities().accepts_frame_attachments {
            return Err(GatewayError::Unsupported(
                "describing a video needs a backend that accepts frames".into(),
            ));
        }
        let attachments = frames
            .iter()
            .map(Frame::to_png)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| GatewayError::InvalidInput(e.to_string()))?;
        let bindings: Bindings = [("video_features".to_string(), String::new())].into();
        let keys = vec![video_id.to_string()];
        let call = |id| {
            self.execute(self.build_request(
                id,
                bindings.clone(),
                keys.clone(),
                BTreeMap::new(),
                attachments.clone(),
            )?)
        };
        let caption = call(TemplateId::Caption)?;
        let caption = truncate_words(&caption, CAPTION_WORD_LIMIT).to_string();
        let list = |id| -> Result<Vec<String>> {
            let raw = call(id)?;
            let items = parse_list(&raw);
            if items.is_empty() {
                return Err(GatewayError::ParseFailure { raw });
            }
            Ok(items)
        };
        Ok(VideoDescription {
            caption,
            objects: list(TemplateId::MainObjects)?,
            scene_keywords: list(TemplateId::SceneType)?,
        })
    }

    /// A clarifying question for the given level. Level 1 uses the
    /// meta-information of the leading candidates.
    pub fn gen_question(&self, level: Level, query: &str, candidates: &[VideoRecord]) -> Result<String> {
        let mut bindings: Bindings = [("text_query".to_string(), query.to_string())].into();
        let mut ctx = BTreeMap::new();
        let id = match level {
            Level::Level0 => TemplateId::QLevel0,
            Level::Level2 => TemplateId::QLevel2,
            Level::Level1 => {
                if candidates.is_empty() {
                    return Err(GatewayError::InvalidInput(
                        "a distinguishing question needs candidate videos".into(),
                    ));
                }
                let shown = &candidates[..candidates.len().min(self.config.level1_candidates.max(1))];
                bindings.insert("video_meta_info_list".into(), format_meta_list(shown));
                let ids: Vec<&str> = shown.iter().map(|v| v.id.as_str()).collect();
                ctx.insert(context::CANDIDATE_IDS.to_string(), ids.join(", "));
                TemplateId::QLevel1
            }
        };
        let request = self.build_request(id, bindings, Vec::new(), ctx, Vec::new())?;
        let first = self.execute(request.clone())?;
        if id != TemplateId::QLevel1 || starts_with_wh(&first) {
            return Ok(first);
        }
        let second = self.execute(request)?;
        if !starts_with_wh(&second) {
            tracing::warn!(question = %second, "distinguishing question does not start with What/Where/Who");
        }
        Ok(second)
    }

    /// Answer to `question` on behalf of a user looking for `target`.
    pub fn simulate_answer(
        &self,
        target: &VideoRecord,
        frames: Option<&[Frame]>,
        question: &str,
        round: usize,
    ) -> Result<String> {
        let attach = self.backend.capabilities().accepts_frame_attachments;
        let (features, attachments) = match frames {
            Some(f) if attach && !f.is_empty() => (
                String::new(),
                f.iter()
                    .map(Frame::to_png)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| GatewayError::InvalidInput(e.to_string()))?,
            ),
            _ => (target.meta_text(), Vec::new()),
        };
        let bindings: Bindings = [
            ("video_features".to_string(), features),
            ("question".to_string(), question.to_string()),
        ]
        .into();
        let keys = vec![
            format!("{}|{}", target.id, round),
            format!("{}|{}", target.id, question),
            target.id.clone(),
        ];
        let ctx = [(context::GT_CAPTION.to_string(), target.caption.clone())].into();
        self.execute(self.build_request(TemplateId::SimAnswer, bindings, keys, ctx, attachments)?)
    }

    /// Previous query merged with the latest answer, at most 60 words.
    pub fn refine_query(&self, pre_query: &str, cur_answer: &str) -> Result<String> {
        if pre_query.trim().is_empty() || cur_answer.trim().is_empty() {
            return Err(GatewayError::InvalidInput(
                "refinement needs a previous query and an answer".into(),
            ));
        }
        let bindings: Bindings = [
            ("pre_query".to_string(), pre_query.to_string()),
            ("cur_answer".to_string(), cur_answer.to_string()),
        ]
        .into();
        let ctx = [
            (context::PRE_QUERY.to_string(), pre_query.trim().to_string()),
            (context::CUR_ANSWER.to_string(), cur_answer.trim().to_string()),
        ]
        .into();
        let out = self.execute(self.build_request(TemplateId::Refine, bindings, Vec::new(), ctx, Vec::new())?)?;
        Ok(truncate_words(&out, QUERY_WORD_LIMIT).to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::time::Instant;

    fn mock(pairs: &[(&str, &str)]) -> MockBackend {
        MockBackend::new(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }

    fn gateway(m: MockBackend) -> (Gateway, Arc<MockBackend>) {
        let m = Arc::new(m);
        (Gateway::new(m.clone()), m)
    }

    fn record(id: &str, caption: &str) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            caption: caption.into(),
            objects: vec!["dog".into()],
            scene_keywords: vec!["park".into()],
            frame_timestamps: vec![],
        }
    }

    fn frames() -> Vec<Frame> {
        vec![Frame::new(0.0, 3, 3, vec![9; 9]).unwrap()]
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn truncation_oracle() {
        let t = words(90);
        let cut = truncate_words(&t, 80);
        assert_eq!(cut.split_whitespace().collect::<Vec<_>>(), t.split_whitespace().take(80).collect::<Vec<_>>());
        assert_eq!(truncate_words("  a  b\tc ", 2), "a  b");
        assert_eq!(truncate_words("a b", 5), "a b");
        assert_eq!(truncate_words("a b", 0), "");
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list("man, tree, couch"), vec!["man", "tree", "couch"]);
        assert_eq!(
            parse_list("1. 'man'\n2) tree.\n- couch\n* lamp\n\u{2022} dog\n6. cat"),
            vec!["man", "tree", "couch", "lamp", "dog"]
        );
        assert!(parse_list("  \n ").is_empty());
    }

    #[test]
    fn wh_prefix() {
        assert!(starts_with_wh("What color?"));
        assert!(starts_with_wh("  where is it"));
        assert!(starts_with_wh("WHO"));
        assert!(!starts_with_wh("Whatever"));
        assert!(!starts_with_wh("It depends"));
    }

    #[test]
    fn describe_uses_configured_entries() {
        let (g, m) = gateway(mock(&[
            ("caption|v1", "A dog runs in a park."),
            ("main_objects|v1", "1. dog\n2. ball"),
            ("scene_type|v1", "park, outdoor, sunny"),
        ]));
        let d = g.describe_video("v1", &frames()).unwrap();
        assert_eq!(d.caption, "A dog runs in a park.");
        assert_eq!(d.objects, vec!["dog", "ball"]);
        assert_eq!(d.scene_keywords, vec!["park", "outdoor", "sunny"]);
        let reqs = m.requests();
        assert_eq!(reqs.len(), 3);
        assert!(reqs.iter().all(|r| r.attachments.len() == 1 && r.temperature == 0.1));
    }

    #[test]
    fn describe_caps_caption_and_rejects_empty_lists() {
        let long = words(90);
        let (g, _) = gateway(mock(&[
            ("caption|v1", &long),
            ("main_objects|v1", " , ,"),
            ("scene_type|v1", "x"),
        ]));
        let err = g.describe_video("v1", &frames()).unwrap_err();
        assert_eq!(err, GatewayError::ParseFailure { raw: ", ,".into() });

        let (g, _) = gateway(mock(&[
            ("caption|v1", &long),
            ("main_objects|v1", "a"),
            ("scene_type|v1", "b"),
        ]));
        assert_eq!(word_count(&g.describe_video("v1", &frames()).unwrap().caption), 80);
    }

    #[test]
    fn describe_needs_frame_support() {
        let (g, _) = gateway(mock(&[]).text_only());
        assert!(matches!(g.describe_video("v", &frames()), Err(GatewayError::Unsupported(_))));
        let (g, _) = gateway(mock(&[]));
        assert!(matches!(g.describe_video("v", &frames()), Err(GatewayError::BackendRefusal(_))));
    }

    #[test]
    fn timeout_fires_at_deadline() {
        let m = Arc::new(mock(&[("q_level0", "Who?")]).with_delay(Duration::from_millis(500)));
        let g = Gateway::new(m).with_config(GatewayConfig {
            timeout: Duration::from_millis(50),
            ..GatewayConfig::default()
        });
        let start = Instant::now();
        let err = g.gen_question(Level::Level0, "q", &[]).unwrap_err();
        assert_eq!(err, GatewayError::BackendTimeout(Duration::from_millis(50)));
        assert!(start.elapsed() < Duration::from_millis(400));
    }

    #[test]
    fn level0_and_level2_questions() {
        let (g, m) = gateway(mock(&[("q_level0", "What is the person wearing?")]));
        assert_eq!(g.gen_question(Level::Level0, "a person", &[]).unwrap(), "What is the person wearing?");
        assert_eq!(g.gen_question(Level::Level2, "a person", &[]).unwrap(), DEFAULT_LEVEL2);
        let reqs = m.requests();
        assert!(reqs[0].user.contains("Query: a person\n"));
        assert!(reqs[1].user.contains("User Query: a person\n"));
    }

    #[test]
    fn level1_embeds_candidates_in_order() {
        let (g, m) = gateway(mock(&[("q_level1", "Where is the dog?")]));
        let cands = vec![record("a", "first clip"), record("b", "second clip"), record("c", "third clip")];
        g.gen_question(Level::Level1, "a dog", &cands).unwrap();
        let user = &m.requests()[0].user;
        let pos: Vec<usize> = cands.iter().map(|c| user.find(&c.meta_text()).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            g.gen_question(Level::Level1, "a dog", &[]),
            Err(GatewayError::InvalidInput(_))
        ));
    }

    #[test]
    fn level1_candidate_cap() {
        let (g, m) = gateway(mock(&[]));
        let cands: Vec<_> = (0..8).map(|i| record(&format!("v{i}"), &format!("clip {i}"))).collect();
        let q = g.gen_question(Level::Level1, "q", &cands).unwrap();
        assert!(starts_with_wh(&q));
        let user = &m.requests()[0].user;
        assert!(user.contains("[v4]") && !user.contains("[v5]"));
    }

    #[test]
    fn level1_retries_once_then_accepts() {
        let (g, m) = gateway(mock(&[("q_level1", "It depends")]));
        let q = g.gen_question(Level::Level1, "q", &[record("a", "c")]).unwrap();
        assert_eq!(q, "It depends");
        assert_eq!(m.requests().len(), 2);
    }

    #[test]
    fn simulated_answer_lookup_order() {
        let target = record("v7", "a brown dog");
        let (g, m) = gateway(mock(&[
            ("sim_answer|v7|2", "by round"),
            ("sim_answer|v7|What color?", "by question"),
            ("sim_answer|v7", "by video"),
        ]));
        assert_eq!(g.simulate_answer(&target, None, "What color?", 2).unwrap(), "by round");
        assert_eq!(g.simulate_answer(&target, None, "What color?", 3).unwrap(), "by question");
        assert_eq!(g.simulate_answer(&target, None, "Who?", 3).unwrap(), "by video");
        let reqs = m.requests();
        assert!(reqs.iter().all(|r| r.temperature == 0.7));
        assert!(reqs[0].user.starts_with(&target.meta_text()));
        assert!(reqs[0].user.contains("Question: What color?\n"));
    }

    #[test]
    fn strict_mock_refuses_unknown_keys() {
        let (g, _) = gateway(mock(&[]).strict(true));
        assert!(matches!(
            g.simulate_answer(&record("v", "c"), None, "q", 0),
            Err(GatewayError::BackendRefusal(_))
        ));
        let (g, _) = gateway(mock(&[]));
        assert_eq!(g.simulate_answer(&record("v", "gt caption"), None, "q", 0).unwrap(), "gt caption");
    }

    #[test]
    fn prompt_hash_key_matches() {
        let g = Gateway::new(Arc::new(mock(&[])));
        let req = g
            .build_request(
                TemplateId::QLevel0,
                [("text_query".to_string(), "x".to_string())].into(),
                vec![],
                BTreeMap::new(),
                vec![],
            )
            .unwrap();
        let key = prompt_key(TemplateId::QLevel0, &req.user);
        let (g, _) = gateway(MockBackend::new(HashMap::from([(key, "Where?".to_string())])));
        assert_eq!(g.gen_question(Level::Level0, "x", &[]).unwrap(), "Where?");
        assert_eq!(g.gen_question(Level::Level0, "y", &[]).unwrap(), DEFAULT_LEVEL0);
    }

    #[test]
    fn refine_echo_and_caps() {
        let (g, _) = gateway(mock(&[]));
        assert_eq!(g.refine_query("a dog", "it is brown").unwrap(), "a dog it is brown");
        let long = words(50);
        let out = g.refine_query(&long, &long).unwrap();
        assert_eq!(word_count(&out), 60);

        let (g, _) = gateway(mock(&[("refine", &words(75))]));
        assert_eq!(g.refine_query("a", "b").unwrap(), words(60));

        let (g, _) = gateway(mock(&[("refine", "   ")]));
        assert_eq!(g.refine_query("a", "b").unwrap_err(), GatewayError::EmptyGeneration);
        assert!(matches!(g.refine_query("", "b"), Err(GatewayError::InvalidInput(_))));
    }

    #[test]
    fn temperature_override_and_seed() {
        let m = Arc::new(mock(&[]));
        let g = Gateway::new(m.clone()).with_config(GatewayConfig {
            temperature_overrides: [(TemplateId::Refine, 0.3)].into(),
            seed: Some(4),
            ..GatewayConfig::default()
        });
        g.refine_query("a", "b").unwrap();
        let r = &m.requests()[0];
        assert_eq!((r.temperature, r.seed, r.max_tokens), (0.3, Some(4), 1024));
    }

    #[test]
    fn http_body_shape() {
        let g = Gateway::new(Arc::new(mock(&[])));
        let mut req = g
            .build_request(
                TemplateId::Caption,
                [("video_features".to_string(), String::new())].into(),
                vec![],
                BTreeMap::new(),
                vec![vec![1, 2, 3]],
            )
            .unwrap();
        let plain = HttpBackend::new("http://x", "m").request_body(&req);
        assert!(plain["messages"][1]["content"].is_string());
        let with_frames = HttpBackend::new("http://x", "m").with_frame_attachments(true);
        let body = with_frames.request_body(&req);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
        assert_eq!(body["max_tokens"], 1024);
        assert!(body.get("seed").is_none());
        req.seed = Some(9);
        assert_eq!(with_frames.request_body(&req)["seed"], 9);
    }
}
