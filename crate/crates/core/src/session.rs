//! Interactive retrieval sessions.
//!
//! A session retrieves for the current query, scores its uncertainty, routes
//! a clarifying-question level, takes an answer (typed by a person or
//! simulated against a known target), refines the query, and repeats until
//! it stops early or runs out of rounds.
//!
//! Operations take the current [`SessionState`] by reference and return a
//! new one, so a failed step leaves the caller's state untouched.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{EmbedError, TextEmbedder};
use crate::embedding_store::{EmbeddingIndex, SimilarityList, StoreError, VideoRecord};
use crate::llm_gateway::{Gateway, GatewayError};
use crate::uncertainty::{assess, Level, TasConfig, UncertaintyConfig, UncertaintyError, UncertaintyReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("session is {actual}, expected {expected}")]
    WrongStatus {
        expected: SessionStatus,
        actual: SessionStatus,
    },
    #[error("an answer is required in human answer mode")]
    MissingAnswer,
    #[error("target video {0:?} is not in the index")]
    MissingTarget(String),
    #[error("simulated answers need a target video")]
    NoTarget,
    #[error("unknown session {0:?}")]
    NotFound(String),
    #[error("snapshot schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("malformed snapshot: {0}")]
    Snapshot(#[from] serde_json::Error),
    #[error(transparent)]
    Embed(EmbedError),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<EmbedError> for SessionError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::EmptyText => SessionError::EmptyQuery,
            other => SessionError::Embed(other),
        }
    }
}

impl From<StoreError> for SessionError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::EmptyIndex => SessionError::EmptyIndex,
            other => SessionError::Store(other),
        }
    }
}

pub type Result<T, E = SessionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    Human,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub max_rounds: usize,
    pub early_stop: bool,
    pub alpha_stop: f64,
    pub beta_stop: f64,
    pub k_mus: usize,
    pub k_tas: usize,
    pub tau: f64,
    /// Candidates kept in each ranking snapshot.
    pub display_k: usize,
    pub answer_mode: AnswerMode,
    pub tas: TasConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.2,
            max_rounds: 10,
            early_stop: false,
            alpha_stop: 0.4,
            beta_stop: 0.2,
            k_mus: 10,
            k_tas: 20,
            tau: 0.85,
            display_k: 10,
            answer_mode: AnswerMode::Human,
            tas: TasConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SessionError::InvalidConfig(m));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha_stop", self.alpha_stop),
            ("beta_stop", self.beta_stop),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(1..=50).contains(&self.max_rounds) {
            return bad(format!("max_rounds must lie in 1..=50, got {}", self.max_rounds));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        for (name, v) in [("k_mus", self.k_mus), ("k_tas", self.k_tas), ("display_k", self.display_k)] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.tas.gamma >= 0.0 && self.tas.t0 > 0.0) {
            return bad("tas.gamma must be >= 0 and tas.t0 > 0".into());
        }
        Ok(())
    }

    pub fn uncertainty(&self) -> UncertaintyConfig {
        UncertaintyConfig {
            k_tas: self.k_tas,
            k_mus: self.k_mus,
            tau: self.tau,
            tas: self.tas.clone(),
        }
    }

    fn should_stop(&self, report: &UncertaintyReport) -> bool {
        self.early_stop && report.tas < self.alpha_stop && report.mus < self.beta_stop
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingAnswer,
    StoppedEarly,
    Exhausted,
    /// Closed by the user.
    Completed,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        self != SessionStatus::AwaitingAnswer
    }
}

impl std::fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SessionStatus::AwaitingAnswer => "awaiting_answer",
            SessionStatus::StoppedEarly => "stopped_early",
            SessionStatus::Exhausted => "exhausted",
            SessionStatus::Completed => "completed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub level: Level,
}

/// One completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub question: String,
    pub level: Level,
    pub answer: String,
    pub refined_query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub schema_version: u32,
    pub session_id: String,
    pub round: usize,
    pub initial_query: String,
    pub current_query: String,
    pub history: Vec<Exchange>,
    /// One report per retrieval, round 0 first.
    pub reports: Vec<UncertaintyReport>,
    /// Leading candidates of each retrieval.
    pub ranks: Vec<SimilarityList>,
    pub target_id: Option<String>,
    /// 1-based rank of the target after each retrieval.
    pub target_ranks: Vec<usize>,
    pub pending_question: Option<Question>,
    pub status: SessionStatus,
    pub config: SessionConfig,
}

impl SessionState {
    pub fn latest_report(&self) -> &UncertaintyReport {
        self.reports.last().expect("a session always has its round-0 report")
    }

    pub fn latest_ranking(&self) -> &SimilarityList {
        self.ranks.last().expect("a session always has its round-0 ranking")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(SessionError::SchemaVersion { found });
        }
        Ok(serde_json::from_value(value)?)
    }

    fn expect_awaiting(&self) -> Result<()> {
        if self.status != SessionStatus::AwaitingAnswer {
            return Err(SessionError::WrongStatus {
                expected: SessionStatus::AwaitingAnswer,
                actual: self.status,
            });
        }
        Ok(())
    }
}

/// Everything a session step needs: the index, the query embedder, and the
/// generation gateway.
#[derive(Clone)]
pub struct Engine {
    pub index: Arc<EmbeddingIndex>,
    pub embedder: Arc<dyn TextEmbedder>,
    pub gateway: Arc<Gateway>,
}

/// Ranking plus its uncertainty report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub ranking: SimilarityList,
    pub report: UncertaintyReport,
}

impl Engine {
    pub fn new(index: Arc<EmbeddingIndex>, embedder: Arc<dyn TextEmbedder>, gateway: Arc<Gateway>) -> Self {
        Self {
            index,
            embedder,
            gateway,
        }
    }

    /// Full ranking of the index against `query`.
    pub fn retrieve(&self, query: &str) -> Result<SimilarityList> {
        if query.trim().is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        if self.index.is_empty() {
            return Err(SessionError::EmptyIndex);
        }
        let q = self.embedder.embed(query)?;
        Ok(self.index.rank_all(&q)?)
    }

    /// One-shot retrieval and uncertainty scoring, truncated to `k` results.
    pub fn search(&self, query: &str, k: usize, config: &SessionConfig) -> Result<SearchResult> {
        config.validate()?;
        if k == 0 {
            return Err(StoreError::InvalidK.into());
        }
        let ranking = self.retrieve(query)?;
        let report = assess(
            &self.index,
            &ranking,
            query,
            &config.uncertainty(),
            config.alpha,
            config.beta,
            0,
        )?;
        Ok(SearchResult {
            ranking: ranking.truncated(k),
            report,
        })
    }

    fn observe(&self, config: &SessionConfig, query: &str, round: usize) -> Result<(SimilarityList, UncertaintyReport)> {
        let ranking = self.retrieve(query)?;
        let report = assess(
            &self.index,
            &ranking,
            query,
            &config.uncertainty(),
            config.alpha,
            config.beta,
            round,
        )?;
        Ok((ranking, report))
    }

    fn snapshot_len(config: &SessionConfig) -> usize {
        config.display_k.max(config.k_mus)
    }

    /// Round-0 retrieval and routing. `target_id` is needed for simulated
    /// answers and for rank tracking.
    pub fn start(
        &self,
        session_id: impl Into<String>,
        config: SessionConfig,
        query: &str,
        target_id: Option<&str>,
    ) -> Result<SessionState> {
        config.validate()?;
        let query = query.trim();
        if query.is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        if let Some(t) = target_id {
            if self.index.get(t).is_none() {
                return Err(SessionError::MissingTarget(t.to_string()));
            }
        }
        if config.answer_mode == AnswerMode::Simulated && target_id.is_none() {
            return Err(SessionError::NoTarget);
        }
        let (ranking, report) = self.observe(&config, query, 0)?;
        let status = if config.should_stop(&report) {
            SessionStatus::StoppedEarly
        } else {
            SessionStatus::AwaitingAnswer
        };
        let target_ranks = target_id
            .and_then(|t| ranking.rank_of(t))
            .into_iter()
            .collect();
        Ok(SessionState {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.into(),
            round: 0,
            initial_query: query.to_string(),
            current_query: query.to_string(),
            history: Vec::new(),
            reports: vec![report],
            ranks: vec![ranking.truncated(Self::snapshot_len(&config))],
            target_id: target_id.map(str::to_string),
            target_ranks,
            pending_question: None,
            status,
            config,
        })
    }

    fn candidates(&self, state: &SessionState) -> Vec<VideoRecord> {
        state
            .latest_ranking()
            .entries()
            .iter()
            .filter_map(|s| self.index.get(&s.id).cloned())
            .collect()
    }

    /// The clarifying question for the current round, generated once and
    /// then reused.
    pub fn question(&self, state: &SessionState) -> Result<SessionState> {
        state.expect_awaiting()?;
        if state.pending_question.is_some() {
            return Ok(state.clone());
        }
        let level = state.latest_report().level;
        let candidates = if level == Level::Level1 {
            self.candidates(state)
        } else {
            Vec::new()
        };
        let text = self.gateway.gen_question(level, &state.current_query, &candidates)?;
        let mut next = state.clone();
        next.pending_question = Some(Question { text, level });
        Ok(next)
    }

    /// Takes the answer to the pending question (asking it first if
    /// needed), refines the query, and retrieves again.
    pub fn answer(&self, state: &SessionState, user_answer: Option<&str>) -> Result<SessionState> {
        state.expect_awaiting()?;
        let asked = self.question(state)?;
        let question = asked.pending_question.clone().expect("question() sets it");

        let answer = match state.config.answer_mode {
            AnswerMode::Human => match user_answer.map(str::trim) {
                Some(a) if !a.is_empty() => a.to_string(),
                _ => return Err(SessionError::MissingAnswer),
            },
            AnswerMode::Simulated => {
                let target_id = state.target_id.as_deref().ok_or(SessionError::NoTarget)?;
                let target = self
                    .index
                    .get(target_id)
                    .ok_or_else(|| SessionError::MissingTarget(target_id.to_string()))?;
                self.gateway
                    .simulate_answer(target, None, &question.text, state.round)?
            }
        };

        let refined = self.gateway.refine_query(&state.current_query, &answer)?;
        let round = state.round + 1;
        let (ranking, report) = self.observe(&state.config, &refined, round)?;

        let mut next = asked;
        if let Some(t) = &next.target_id {
            next.target_ranks.extend(ranking.rank_of(t));
        }
        next.history.push(Exchange {
            question: question.text,
            level: question.level,
            answer,
            refined_query: refined.clone(),
        });
        next.round = round;
        next.current_query = refined;
        next.status = if next.config.should_stop(&report) {
            SessionStatus::StoppedEarly
        } else if round >= next.config.max_rounds {
            SessionStatus::Exhausted
        } else {
            SessionStatus::AwaitingAnswer
        };
        next.reports.push(report);
        next.ranks.push(ranking.truncated(Self::snapshot_len(&next.config)));
        next.pending_question = None;
        Ok(next)
    }

    /// Closes an open session at the user's request.
    pub fn finish(&self, state: &SessionState) -> Result<SessionState> {
        state.expect_awaiting()?;
        let mut next = state.clone();
        next.status = SessionStatus::Completed;
        next.pending_question = None;
        Ok(next)
    }

    /// Runs simulated rounds until the session reaches a terminal status.
    pub fn run_simulated(&self, state: &SessionState) -> Result<SessionState> {
        let mut s = state.clone();
        while s.status == SessionStatus::AwaitingAnswer {
            s = self.answer(&s, None)?;
        }
        Ok(s)
    }
}

/// Session snapshots stored as `<session_id>.json` files in one directory.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> Result<PathBuf> {
        let valid = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(SessionError::NotFound(id.to_string()));
        }
        Ok(self.dir.join(format!("{id}.json")))
    }

    pub fn save(&self, state: &SessionState) -> Result<()> {
        let path = self.path(&state.session_id)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, state.to_json())?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<SessionState> {
        let path = self.path(id)?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(SessionError::NotFound(id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        SessionState::from_json(&text)
    }

    pub fn ids(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.push(stem.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::HashEmbedder;
    use crate::embedding_store::normalize;
    use crate::llm_gateway::{MockBackend, DEFAULT_LEVEL0, DEFAULT_LEVEL2};
    use std::collections::HashMap;

    /// Fixed embedder for tests: known texts map to given vectors.
    struct TableEmbedder {
        dim: usize,
        table: HashMap<String, Vec<f64>>,
    }

    impl TextEmbedder for TableEmbedder {
        fn dim(&self) -> usize {
            self.dim
        }

        fn embed(&self, text: &str) -> Result<crate::embedding_store::Embedding, EmbedError> {
            match self.table.get(text) {
                Some(v) => Ok(normalize(v, self.dim)?),
                None => Err(EmbedError::Backend(format!("unknown text {text:?}"))),
            }
        }
    }

    fn record(id: &str, caption: &str) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            caption: caption.into(),
            objects: vec![],
            scene_keywords: vec![],
            frame_timestamps: vec![],
        }
    }

    fn orthogonal_engine(mock: MockBackend) -> (Engine, Arc<MockBackend>) {
        let dim = 6;
        let mut index = EmbeddingIndex::new(dim);
        let mut table = HashMap::new();
        for i in 0..dim {
            let mut v = vec![0.0; dim];
            v[i] = 1.0;
            let caption = format!("caption {i}");
            index
                .insert(record(&format!("v{i}"), &caption), &normalize(&v, dim).unwrap())
                .unwrap();
            table.insert(caption, v);
        }
        let mock = Arc::new(mock);
        let engine = Engine::new(
            Arc::new(index),
            Arc::new(TableEmbedder { dim, table }),
            Arc::new(Gateway::new(mock.clone())),
        );
        (engine, mock)
    }

    #[test]
    fn exact_caption_query_is_rank_one_with_certain_mapping() {
        let (engine, _) = orthogonal_engine(MockBackend::new(HashMap::new()));
        let s = engine
            .start("s", SessionConfig::default(), "caption 3", Some("v3"))
            .unwrap();
        assert_eq!(s.latest_ranking().entries()[0].id, "v3");
        assert_eq!(s.target_ranks, vec![1]);
        assert!(s.latest_report().mus.abs() < 1e-12);
        assert_eq!(s.latest_report().tas, 0.0);
        assert_eq!(s.latest_report().level, Level::Level2);
        assert_eq!(s.status, SessionStatus::AwaitingAnswer);
        assert_eq!(s.reports.len(), 1);
    }

    #[test]
    fn search_truncates_and_rejects_zero_k() {
        let (engine, _) = orthogonal_engine(MockBackend::new(HashMap::new()));
        let cfg = SessionConfig::default();
        let r = engine.search("caption 4", 2, &cfg).unwrap();
        assert_eq!(r.ranking.ids(), vec!["v4", "v0"]);
        assert_eq!(r.report.round, 0);
        assert!(matches!(
            engine.search("caption 4", 0, &cfg),
            Err(SessionError::Store(StoreError::InvalidK))
        ));
    }

    #[test]
    fn start_errors() {
        let (engine, _) = orthogonal_engine(MockBackend::new(HashMap::new()));
        let cfg = SessionConfig::default();
        assert!(matches!(engine.start("s", cfg.clone(), "  ", None), Err(SessionError::EmptyQuery)));
        assert!(matches!(
            engine.start("s", cfg.clone(), "caption 1", Some("nope")),
            Err(SessionError::MissingTarget(_))
        ));
        let sim = SessionConfig {
            answer_mode: AnswerMode::Simulated,
            ..cfg.clone()
        };
        assert!(matches!(engine.start("s", sim, "caption 1", None), Err(SessionError::NoTarget)));
        let bad = SessionConfig {
            max_rounds: 51,
            ..cfg.clone()
        };
        assert!(matches!(engine.start("s", bad, "caption 1", None), Err(SessionError::InvalidConfig(_))));

        let empty = Engine::new(
            Arc::new(EmbeddingIndex::new(4)),
            Arc::new(HashEmbedder::new(4)),
            engine.gateway.clone(),
        );
        assert!(matches!(empty.start("s", cfg, "anything", None), Err(SessionError::EmptyIndex)));
    }

    #[test]
    fn config_validation_bounds() {
        let ok = SessionConfig::default();
        ok.validate().unwrap();
        for c in [
            SessionConfig { alpha: 1.1, ..ok.clone() },
            SessionConfig { beta: -0.1, ..ok.clone() },
            SessionConfig { max_rounds: 0, ..ok.clone() },
            SessionConfig { tau: 1.0, ..ok.clone() },
            SessionConfig { k_mus: 0, ..ok.clone() },
        ] {
            assert!(c.validate().is_err());
        }
        SessionConfig { max_rounds: 50, ..ok }.validate().unwrap();
    }

    #[test]
    fn partial_config_overrides_deserialize() {
        let c: SessionConfig = serde_json::from_str(r#"{"alpha": 0.6, "answer_mode": "simulated"}"#).unwrap();
        assert_eq!(c.alpha, 0.6);
        assert_eq!(c.answer_mode, AnswerMode::Simulated);
        assert_eq!(c.max_rounds, 10);
        assert!(serde_json::from_str::<SessionConfig>(r#"{"alpah": 0.6}"#).is_err());
    }

    #[test]
    fn question_per_level() {
        let (engine, _) = orthogonal_engine(MockBackend::new(HashMap::new()));
        let s = engine.start("s", SessionConfig::default(), "caption 0", None).unwrap();
        let q = engine.question(&s).unwrap();
        assert_eq!(q.pending_question.as_ref().unwrap().text, DEFAULT_LEVEL2);
        // Asking again reuses the question.
        assert_eq!(engine.question(&q).unwrap(), q);

        let mut l0 = s.clone();
        l0.reports[0].level = Level::Level0;
        assert_eq!(engine.question(&l0).unwrap().pending_question.unwrap().text, DEFAULT_LEVEL0);

        let mut l1 = s.clone();
        l1.reports[0].level = Level::Level1;
        let text = engine.question(&l1).unwrap().pending_question.unwrap().text;
        assert!(text.starts_with("What") && text.contains("v0"));
    }

    fn text_engine(mock: MockBackend) -> (Engine, Arc<MockBackend>) {
        let embedder = HashEmbedder::new(1024);
        let mut index = EmbeddingIndex::new(1024);
        let captions = [
            ("a", "red kettle kitchen counter"),
            ("b", "red kettle garden table"),
            ("c", "blue surfboard ocean wave"),
        ];
        for (id, cap) in captions {
            index.insert(record(id, cap), &embedder.embed(cap).unwrap()).unwrap();
        }
        let mock = Arc::new(mock);
        (
            Engine::new(Arc::new(index), Arc::new(embedder), Arc::new(Gateway::new(mock.clone()))),
            mock,
        )
    }

    #[test]
    fn discriminative_answer_moves_target_to_top() {
        let mut mock = MockBackend::new(HashMap::new());
        mock.insert("sim_answer|b|0", "garden table");
        let (engine, _) = text_engine(mock);
        let cfg = SessionConfig {
            answer_mode: AnswerMode::Simulated,
            ..SessionConfig::default()
        };
        let s = engine.start("s", cfg, "red kettle", Some("b")).unwrap();
        let next = engine.answer(&s, None).unwrap();
        assert_eq!(next.round, 1);
        assert_eq!(next.current_query, "red kettle garden table");
        assert_eq!(next.target_ranks, vec![s.target_ranks[0], 1]);
        assert_eq!(next.reports.len(), 2);
        assert_eq!(next.history.len(), 1);
        assert_eq!(next.reports[1].round, 1);
    }

    #[test]
    fn human_mode_requires_answer_and_keeps_state_on_error() {
        let (engine, _) = text_engine(MockBackend::new(HashMap::new()));
        let s = engine.start("s", SessionConfig::default(), "red kettle", None).unwrap();
        assert!(matches!(engine.answer(&s, None), Err(SessionError::MissingAnswer)));
        assert!(matches!(engine.answer(&s, Some("  ")), Err(SessionError::MissingAnswer)));

        let mut m = MockBackend::new(HashMap::new());
        m.insert("refine", " ");
        let (failing, _) = text_engine(m);
        let before = s.clone();
        assert!(matches!(
            failing.answer(&s, Some("in a garden")),
            Err(SessionError::Gateway(GatewayError::EmptyGeneration))
        ));
        assert_eq!(s, before);
    }

    #[test]
    fn early_stop_and_exhaustion() {
        let (engine, _) = orthogonal_engine(MockBackend::new(HashMap::from([(
            "refine".to_string(),
            "caption 2".to_string(),
        )])));
        let cfg = SessionConfig {
            early_stop: true,
            ..SessionConfig::default()
        };
        // Round 0 already certain: stopped before any question.
        let s = engine.start("s", cfg.clone(), "caption 2", None).unwrap();
        assert_eq!(s.status, SessionStatus::StoppedEarly);
        assert!(matches!(engine.answer(&s, Some("x")), Err(SessionError::WrongStatus { .. })));

        let one = SessionConfig {
            max_rounds: 1,
            ..SessionConfig::default()
        };
        let s = engine.start("s", one, "caption 2", None).unwrap();
        let s = engine.answer(&s, Some("x")).unwrap();
        assert_eq!(s.status, SessionStatus::Exhausted);
        assert_eq!(s.round, 1);
    }

    #[test]
    fn early_stop_after_a_round() {
        let mut table = HashMap::new();
        table.insert("refine".to_string(), "caption 4".to_string());
        let (engine, _) = orthogonal_engine(MockBackend::new(table));
        // Blend query: two equal matches, so the mapping is uncertain.
        let mut blend_engine = engine.clone();
        let mut t = HashMap::new();
        t.insert("caption 4 or 5".to_string(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        t.insert("caption 4".to_string(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        blend_engine.embedder = Arc::new(TableEmbedder { dim: 6, table: t });
        let cfg = SessionConfig {
            early_stop: true,
            ..SessionConfig::default()
        };
        let s = blend_engine.start("s", cfg, "caption 4 or 5", None).unwrap();
        assert_eq!(s.status, SessionStatus::AwaitingAnswer);
        assert!(s.latest_report().mus >= 0.2);
        let s = blend_engine.answer(&s, Some("the first")).unwrap();
        assert!(s.latest_report().tas < 0.4 && s.latest_report().mus < 0.2);
        assert_eq!(s.status, SessionStatus::StoppedEarly);
    }

    #[test]
    fn finish_marks_completed() {
        let (engine, _) = text_engine(MockBackend::new(HashMap::new()));
        let s = engine.start("s", SessionConfig::default(), "red kettle", None).unwrap();
        let done = engine.finish(&s).unwrap();
        assert_eq!(done.status, SessionStatus::Completed);
        assert!(engine.finish(&done).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let (engine, _) = text_engine(MockBackend::new(HashMap::new()));
        let cfg = SessionConfig {
            answer_mode: AnswerMode::Simulated,
            max_rounds: 3,
            ..SessionConfig::default()
        };
        let fresh = engine.start("abc", cfg, "red kettle", Some("a")).unwrap();
        assert_eq!(SessionState::from_json(&fresh.to_json()).unwrap(), fresh);

        let done = engine.run_simulated(&fresh).unwrap();
        assert_eq!(done.round, 3);
        assert_eq!(done.status, SessionStatus::Exhausted);
        assert_eq!(SessionState::from_json(&done.to_json()).unwrap(), done);

        assert!(matches!(SessionState::from_json("{not json"), Err(SessionError::Snapshot(_))));
        let mut v: serde_json::Value = serde_json::from_str(&done.to_json()).unwrap();
        v["schema_version"] = 9.into();
        assert!(matches!(
            SessionState::from_json(&v.to_string()),
            Err(SessionError::SchemaVersion { found: 9 })
        ));
        v["schema_version"] = 1.into();
        v["round"] = "x".into();
        assert!(matches!(SessionState::from_json(&v.to_string()), Err(SessionError::Snapshot(_))));
    }

    #[test]
    fn store_saves_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path().join("sessions")).unwrap();
        let (engine, _) = text_engine(MockBackend::new(HashMap::new()));
        let s = engine.start("s-1", SessionConfig::default(), "red kettle", None).unwrap();
        store.save(&s).unwrap();
        assert_eq!(store.load("s-1").unwrap(), s);
        assert_eq!(store.ids().unwrap(), vec!["s-1"]);
        assert!(matches!(store.load("missing"), Err(SessionError::NotFound(_))));
        assert!(matches!(store.load("../etc"), Err(SessionError::NotFound(_))));
    }

    #[test]
    fn stored_reports_follow_routing_rule() {
        let (engine, _) = text_engine(MockBackend::new(HashMap::new()));
        let cfg = SessionConfig {
            answer_mode: AnswerMode::Simulated,
            ..SessionConfig::default()
        };
        let s = engine.start("s", cfg.clone(), "kettle", Some("a")).unwrap();
        let s = engine.run_simulated(&s).unwrap();
        assert!(s.round <= cfg.max_rounds);
        for r in &s.reports {
            assert_eq!(r.level, crate::uncertainty::classify_level(r.tas, r.mus, cfg.alpha, cfg.beta));
        }
        assert_eq!(s.reports.len(), s.round + 1);
        assert_eq!(s.history.len(), s.round);
        assert_eq!(s.target_ranks.len(), s.round + 1);
    }
}
