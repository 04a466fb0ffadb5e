//! Adding video records to an index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use umivr_core::embedder::TextEmbedder;
use umivr_core::embedding_store::{EmbeddingIndex, VideoRecord};
use umivr_core::llm_gateway::Gateway;
use umivr_core::tqfs::{read_pgm_dir, select_frames, ProjectionEmbedder, TqfsConfig, Video};

use crate::error::AppError;

/// Dimension of the frame embeddings used for frame de-duplication.
pub const FRAME_EMBED_DIM: usize = 64;

/// One input line: a record plus an optional directory of `<millis>.pgm`
/// frames.
#[derive(Debug, Clone, Deserialize)]
pub struct IngestItem {
    #[serde(flatten)]
    pub record: VideoRecord,
    #[serde(default)]
    pub frames: Option<PathBuf>,
}

pub fn read_items(path: &Path) -> Result<Vec<IngestItem>, AppError> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| AppError::validation("invalid_record", format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Fills the record's caption, objects, and scene keywords from its
/// frames. Items without frames pass through unchanged.
pub fn describe(item: IngestItem, gateway: &Gateway, tqfs: &TqfsConfig) -> Result<VideoRecord, AppError> {
    let Some(dir) = item.frames else {
        return Ok(item.record);
    };
    let video = Video::from_timestamped(read_pgm_dir(&dir)?)?;
    let sel = select_frames(&video, tqfs, &ProjectionEmbedder::new(FRAME_EMBED_DIM, tqfs.seed))?;
    let frames: Vec<_> = sel.indices.iter().map(|&i| video.frames()[i].clone()).collect();
    let d = gateway.describe_video(&item.record.id, &frames)?;
    Ok(VideoRecord {
        caption: d.caption,
        objects: d.objects,
        scene_keywords: d.scene_keywords,
        frame_timestamps: sel.timestamps,
        ..item.record
    })
}

/// A copy of `base` with `records` added, each embedded by its caption.
/// Nothing is added unless every record is accepted.
pub fn add_records(
    base: &EmbeddingIndex,
    embedder: &dyn TextEmbedder,
    records: Vec<VideoRecord>,
) -> Result<EmbeddingIndex, AppError> {
    if records.is_empty() {
        return Err(AppError::validation("no_records", "no records to ingest"));
    }
    let mut index = base.clone();
    for r in records {
        if r.caption.trim().is_empty() {
            return Err(AppError::validation("missing_caption", format!("record `{}` has no caption", r.id)));
        }
        let e = embedder.embed(&r.caption)?;
        index.insert(r, &e)?;
    }
    Ok(index)
}

/// The index at `path`, or an empty one of dimension `dim` if the file
/// does not exist.
pub fn open_or_create(path: &Path, dim: usize) -> Result<EmbeddingIndex, AppError> {
    if path.exists() {
        Ok(EmbeddingIndex::load(path)?)
    } else {
        Ok(EmbeddingIndex::new(dim))
    }
}
