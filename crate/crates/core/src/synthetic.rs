//! A small constructed benchmark with a known answer.
//!
//! Twenty videos fall into four groups of five. Every caption carries its
//! group's two tokens plus three tokens no other caption uses. Queries name
//! only the group, so round 0 cannot tell group members apart; each
//! simulated answer reveals one more of the target's own tokens.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::embedder::{EmbedError, HashEmbedder, TextEmbedder};
use crate::embedding_store::{EmbeddingIndex, StoreError, VideoRecord};
use crate::eval::BenchQuery;
use crate::llm_gateway::{Gateway, MockBackend};
use crate::session::Engine;
use crate::tqfs::Frame;

pub const DEFAULT_DIM: usize = 1024;
pub const VIDEOS: usize = 20;
pub const GROUP_SIZE: usize = 5;

const GROUPS: [(&str, &str); 4] = [
    ("cooking", "kitchen"),
    ("surfing", "beach"),
    ("cycling", "street"),
    ("hiking", "forest"),
];

const TOKENS: [[&str; 3]; VIDEOS] = [
    ["kettle", "crimson", "window"],
    ["skillet", "apron", "tiles"],
    ["blender", "lemons", "clock"],
    ["oven", "gloves", "bread"],
    ["wok", "noodles", "steam"],
    ["surfboard", "wetsuit", "pier"],
    ["lifeguard", "tower", "flag"],
    ["dolphins", "sunset", "spray"],
    ["umbrella", "towel", "sandcastle"],
    ["kayak", "paddle", "cliffs"],
    ["helmet", "traffic", "bus"],
    ["tandem", "bakery", "awning"],
    ["courier", "backpack", "crosswalk"],
    ["tram", "rails", "neon"],
    ["puddle", "raincoat", "lamppost"],
    ["waterfall", "moss", "bridge"],
    ["deer", "meadow", "fog"],
    ["tent", "campfire", "lantern"],
    ["boulder", "rope", "summit"],
    ["mushrooms", "basket", "stream"],
];

/// Video ids `v00`..`v19`.
pub fn video_id(i: usize) -> String {
    format!("v{i:02}")
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub dim: usize,
    pub records: Vec<VideoRecord>,
    pub queries: Vec<BenchQuery>,
    /// Mock backend table: one simulated answer per (target, round).
    pub mock_table: BTreeMap<String, String>,
}

impl SyntheticBenchmark {
    /// Corpus plus `queries` queries (at most 20) whose targets are spread
    /// over the groups.
    pub fn new(queries: usize) -> Self {
        let records: Vec<VideoRecord> = (0..VIDEOS)
            .map(|i| {
                let (action, place) = GROUPS[i / GROUP_SIZE];
                let [a, b, c] = TOKENS[i];
                VideoRecord {
                    id: video_id(i),
                    caption: format!("someone {action} in the {place} with {a} {b} and {c}"),
                    objects: vec![a.into(), b.into(), c.into()],
                    scene_keywords: vec![place.into()],
                    frame_timestamps: Vec::new(),
                }
            })
            .collect();

        let targets: Vec<usize> = (0..VIDEOS)
            .step_by(2)
            .chain((1..VIDEOS).step_by(2))
            .take(queries.min(VIDEOS))
            .collect();
        let queries = targets
            .iter()
            .enumerate()
            .map(|(n, &i)| {
                let (action, place) = GROUPS[i / GROUP_SIZE];
                BenchQuery {
                    query_id: format!("q{n:02}"),
                    text: format!("someone {action} in the {place}"),
                    target_id: video_id(i),
                }
            })
            .collect();

        let mut mock_table = BTreeMap::new();
        for (i, tokens) in TOKENS.iter().enumerate() {
            for (round, token) in tokens.iter().enumerate() {
                mock_table.insert(
                    format!("sim_answer|{}|{round}", video_id(i)),
                    format!("the video shows {token} clearly visible in the frame"),
                );
            }
        }

        Self {
            dim: DEFAULT_DIM,
            records,
            queries,
            mock_table,
        }
    }

    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.dim)
    }

    pub fn index(&self, embedder: &dyn TextEmbedder) -> Result<EmbeddingIndex, EmbedError> {
        let mut index = EmbeddingIndex::new(embedder.dim());
        for r in &self.records {
            let e = embedder.embed(&r.caption)?;
            index.insert(r.clone(), &e).map_err(EmbedError::Vector)?;
        }
        Ok(index)
    }

    pub fn mock(&self) -> MockBackend {
        let table: HashMap<String, String> = self.mock_table.clone().into_iter().collect();
        MockBackend::new(table)
    }

    /// Engine over the hash-embedded corpus with the mock backend.
    pub fn engine(&self) -> Engine {
        let embedder = self.embedder();
        let index = self.index(&embedder).expect("synthetic captions embed");
        Engine::new(
            Arc::new(index),
            Arc::new(embedder),
            Arc::new(Gateway::new(Arc::new(self.mock()))),
        )
    }

    /// Writes `records.jsonl`, `bench.jsonl`, and `mock.json` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let jsonl = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
        fs::write(
            dir.join("records.jsonl"),
            jsonl(self.records.iter().map(|r| serde_json::to_string(r).expect("serializes")).collect()),
        )?;
        fs::write(
            dir.join("bench.jsonl"),
            jsonl(self.queries.iter().map(|q| serde_json::to_string(q).expect("serializes")).collect()),
        )?;
        fs::write(
            dir.join("mock.json"),
            serde_json::to_string_pretty(&self.mock_table).expect("serializes") + "\n",
        )?;
        Ok(())
    }
}

/// Eight 4-second scenes sampled at 2 fps. Each scene lights a different
/// block of the frame; exactly one frame per scene carries a fine checker
/// texture and is therefore the sharpest. Returns the frames and the
/// positions of the textured ones.
pub fn planted_scenes() -> (Vec<Frame>, Vec<usize>) {
    const SCENES: usize = 8;
    const PER_SCENE: usize = 8;
    let mut frames = Vec::new();
    let mut planted = Vec::new();
    for scene in 0..SCENES {
        for k in 0..PER_SCENE {
            let i = scene * PER_SCENE + k;
            let sharp = k == (scene * 3) % PER_SCENE;
            if sharp {
                planted.push(i);
            }
            frames.push(scene_frame(i as f64 * 0.5, scene, sharp));
        }
    }
    (frames, planted)
}

fn scene_frame(timestamp: f64, scene: usize, sharp: bool) -> Frame {
    let (w, h) = (16u32, 16u32);
    let bx = (scene % 4) as u32;
    let by = (scene / 4) as u32 * 2;
    let mut px = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let lit = x / 4 == bx && y / 4 == by;
            let base: u8 = if lit { 220 } else { 40 };
            let texture = if sharp && (x + y) % 2 == 0 { 30 } else { 0 };
            px.push(base + texture);
        }
    }
    Frame::new(timestamp, w, h, px).expect("16x16 frame")
}

/// Persists the benchmark's index at `path` (plus its metadata file).
pub fn write_index(bench: &SyntheticBenchmark, path: &Path) -> Result<(), StoreError> {
    let embedder = bench.embedder();
    let index = bench.index(&embedder).map_err(|e| match e {
        EmbedError::Vector(s) => s,
        other => StoreError::Io(std::io::Error::other(other.to_string())),
    })?;
    index.persist(path)
}
