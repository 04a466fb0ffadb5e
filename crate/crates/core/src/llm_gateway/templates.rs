use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Caption,
    MainObjects,
    SceneType,
    QLevel0,
    QLevel1,
    QLevel2,
    SimAnswer,
    Refine,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::Caption,
        TemplateId::MainObjects,
        TemplateId::SceneType,
        TemplateId::QLevel0,
        TemplateId::QLevel1,
        TemplateId::QLevel2,
        TemplateId::SimAnswer,
        TemplateId::Refine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Caption => "caption",
            TemplateId::MainObjects => "main_objects",
            TemplateId::SceneType => "scene_type",
            TemplateId::QLevel0 => "q_level0",
            TemplateId::QLevel1 => "q_level1",
            TemplateId::QLevel2 => "q_level2",
            TemplateId::SimAnswer => "sim_answer",
            TemplateId::Refine => "refine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const PLACEHOLDERS: [&str; 6] = [
    "text_query",
    "video_meta_info_list",
    "pre_query",
    "cur_answer",
    "question",
    "video_features",
];

pub const MAX_NEW_TOKENS: u32 = 1024;

const DESCRIBE_SYSTEM: &str = "A conversation between a curious human and an AI assistant. \
The assistant is specialized in analyzing video content and provides detailed, precise, and \
evidence-based descriptions. Follow these guidelines strictly:
- **Precision**: Describe only what is directly observable from the video.
- **Detail**: Include all readily visible details while keeping responses focused.
- **No Speculation**: If any part of the content is uncertain, explicitly state the uncertainty \
instead of guessing.";

const CAPTION_USER: &str = "{video_features}
Please provide a detailed and highly accurate caption that fully describes the overall scene or \
main activity in this video. Make sure your caption includes all relevant visual details and does \
not exceed 80 words. Do not add any information that is not clearly supported by the video \
content.";

const MAIN_OBJECTS_USER: &str = "{video_features}Based solely on the visible content of the \
video, list up to five primary objects or characters you can clearly identify. Each item should \
be provided as a single word or a brief noun phrase (e.g., 'man', 'tree', 'couch'). Only include \
items that are explicitly visible and avoid any speculation.";

const SCENE_TYPE_USER: &str = "{video_features}
Based on the visual content of the video, identify the primary setting, scene type, or dominant \
visual theme by listing up to five concise keywords (e.g., 'underwater', 'indoor', 'black'). Only \
include keywords that are directly evident from the video, and do not include any speculative \
information.";

const LEVEL0_SYSTEM: &str = "You are an advanced AI specialized in asking clarifying questions \
for vague queries. Your task is to extract details\u{2014}such as appearance, activities, or \
events\u{2014}to enable precise retrieval.";

const LEVEL0_USER: &str = "Query: {text_query}
Ask one open-ended clarifying question focusing on the subject's appearance, activities, or \
events.Return ONLY the question.";

const LEVEL1_SYSTEM: &str = "You are a clarifying question generator for text-video retrieval. \
Given a user query and multiple video info, your task is to generate one question that focuses \
on visual differences.";

const LEVEL1_USER: &str = "Query: {text_query}
Videos: {video_meta_info_list}

Ask one question starting with What, Where, or Who to distinguish these videos based on visual \
details.
Return ONLY the question.";

const LEVEL2_SYSTEM: &str = "You are an advanced AI specialized in asking clarifying questions \
for queries. Your task is to extract details\u{2014}such as appearance, activities, or \
events\u{2014}to enable precise retrieval.";

const LEVEL2_USER: &str = "You need to ask a question based on a user query.
1. First you need to evaluate whether the user's query includes sufficient visual details (such \
as characters, colors, objects, or locations).
User Query: {text_query}

2. Ask a question
    - If details are missing, generate one question to gather them.
    - If the query is already detailed, generate a clarifying question to further enrich the \
description (e.g., 'What other objects are present?', 'What is the main color?', or 'Where is \
the event taking place?').


Return ONLY the question, nothing else.";

const SIM_ANSWER_SYSTEM: &str = "You are a video question answering assistant. When provided \
with a video and a question, your task is to provide a concise, one-sentence answer. Your answer \
should clearly state the key visual details such as people, objects, scenes, and events. Keep it \
clear, direct, and focused on essential information.";

const SIM_ANSWER_USER: &str = "{video_features}

Question: {question}

Provide a one-sentence answer that clearly identifies the key visual details in the video, such \
as people, objects, scenes, and events.";

const REFINE_SYSTEM: &str = "You are an expert in query refinement for interactive text-video \
retrieval. Your task is to synthesize and update a previous query with new details from the \
current answer. Ensure the new query includes key information (e.g., characters, events, \
objects, colors, locations) and does not exceed 60 words.)";

const REFINE_USER: &str = "Previous Query: {pre_query}

Current Answer (includes new information to enhance video retrieval):
{cur_answer}

Combine the above into one concise, positive declarative sentence that includes key details \
(characters, events, objects, colors, locations, etc.). Ensure the new query leverages the new \
information from the current answer for better retrieval and is no longer than 60 words.

Only return the refined query, nothing else.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub system: &'static str,
    pub user: &'static str,
    pub temperature: f64,
    pub max_new_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

pub type Bindings = BTreeMap<String, String>;

pub fn template(id: TemplateId) -> PromptTemplate {
    let (system, user) = match id {
        TemplateId::Caption => (DESCRIBE_SYSTEM, CAPTION_USER),
        TemplateId::MainObjects => (DESCRIBE_SYSTEM, MAIN_OBJECTS_USER),
        TemplateId::SceneType => (DESCRIBE_SYSTEM, SCENE_TYPE_USER),
        TemplateId::QLevel0 => (LEVEL0_SYSTEM, LEVEL0_USER),
        TemplateId::QLevel1 => (LEVEL1_SYSTEM, LEVEL1_USER),
        TemplateId::QLevel2 => (LEVEL2_SYSTEM, LEVEL2_USER),
        TemplateId::SimAnswer => (SIM_ANSWER_SYSTEM, SIM_ANSWER_USER),
        TemplateId::Refine => (REFINE_SYSTEM, REFINE_USER),
    };
    PromptTemplate {
        id,
        system,
        user,
        temperature: if id == TemplateId::SimAnswer { 0.7 } else { 0.1 },
        max_new_tokens: MAX_NEW_TOKENS,
    }
}

impl PromptTemplate {
    pub fn render(&self, bindings: &Bindings) -> Result<RenderedPrompt, GatewayError> {
        Ok(RenderedPrompt {
            system: render(self.system, bindings)?,
            user: render(self.user, bindings)?,
        })
    }

    /// Placeholder names used by this template, in order of first use.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for text in [self.system, self.user] {
            for name in PLACEHOLDERS {
                if text.contains(&format!("{{{name}}}")) && !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }
}

/// Single-pass substitution of `{name}` for known placeholder names. Bound
/// values are inserted as-is and never rescanned; other braces pass through.
pub fn render(text: &str, bindings: &Bindings) -> Result<String, GatewayError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let name = tail
            .find('}')
            .map(|close| &tail[..close])
            .filter(|n| PLACEHOLDERS.contains(n));
        match name {
            Some(name) => {
                let value = bindings
                    .get(name)
                    .ok_or_else(|| GatewayError::UnboundPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &tail[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}
