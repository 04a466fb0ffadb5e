//! Temporal quality-based frame sampling.
//!
//! Pipeline: subsample to a lower rate, score every frame by Laplacian
//! variance, keep the sharpest frame per equal-width time bin, cluster the
//! survivors by embedding with k-means, keep the sharpest frame per cluster,
//! and return those in chronological order.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::{normalize, Embedding, StoreError};

#[derive(Debug, Error)]
pub enum TqfsError {
    #[error("frame is {width}x{height}; need at least 3x3")]
    FrameTooSmall { width: u32, height: u32 },
    #[error("frame has {actual} pixels, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("timestamps must be finite and strictly increasing (at frame {index})")]
    NonMonotonicTimestamps { index: usize },
    #[error("video has no frames")]
    EmptyVideo,
    #[error("invalid rate: fps {fps}, target {r_prime}")]
    InvalidRate { fps: f64, r_prime: f64 },
    #[error("bin count must be at least 1")]
    InvalidBins,
    #[error("cluster count must be at least 1")]
    InvalidK,
    #[error("k-means needs at least {k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("quality list has {actual} entries for {expected} frames")]
    QualityCount { expected: usize, actual: usize },
    #[error("frame embedding: {0}")]
    Embed(String),
    #[error(transparent)]
    Vector(#[from] StoreError),
    #[error("bad frame file {path}: {message}")]
    Decode { path: String, message: String },
    #[error("truncated frame stream")]
    TruncatedStream,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = TqfsError> = std::result::Result<T, E>;

/// 8-bit grayscale frame with a timestamp in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(timestamp: f64, width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width < 3 || height < 3 {
            return Err(TqfsError::FrameTooSmall { width, height });
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(TqfsError::PixelCount {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            timestamp,
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    /// PNG encoding, for sending frames to multimodal backends.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = image::GrayImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("pixel count checked at construction");
        let mut out = io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| TqfsError::Decode {
                path: "<png>".into(),
                message: e.to_string(),
            })?;
        Ok(out.into_inner())
    }
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_variance(frame: &Frame) -> f64 {
    let (w, h) = (frame.width, frame.height);
    let count = ((w - 2) * (h - 2)) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut responses = Vec::with_capacity(count as usize);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = i32::from(frame.pixel(x, y));
            let r = i32::from(frame.pixel(x - 1, y))
                + i32::from(frame.pixel(x + 1, y))
                + i32::from(frame.pixel(x, y - 1))
                + i32::from(frame.pixel(x, y + 1))
                - 4 * c;
            let r = f64::from(r);
            sum += r;
            responses.push(r);
        }
    }
    let mean = sum / count;
    for r in responses {
        sum_sq += (r - mean) * (r - mean);
    }
    sum_sq / count
}

/// 3x3 mean filter with edge replication, rounded to the nearest intensity.
pub fn box_blur(frame: &Frame) -> Frame {
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut out = Vec::with_capacity(frame.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0u32;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let xx = (x + dx).clamp(0, w - 1) as u32;
                    let yy = (y + dy).clamp(0, h - 1) as u32;
                    acc += u32::from(frame.pixel(xx, yy));
                }
            }
            out.push(((f64::from(acc) / 9.0).round()) as u8);
        }
    }
    Frame {
        timestamp: frame.timestamp,
        width: frame.width,
        height: frame.height,
        pixels: out,
    }
}

/// Frames sampled at a constant rate.
#[derive(Debug, Clone)]
pub struct Video {
    frames: Vec<Frame>,
    fps: f64,
}

impl Video {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(TqfsError::EmptyVideo);
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(TqfsError::InvalidRate { fps, r_prime: 0.0 });
        }
        for (i, f) in frames.iter().enumerate() {
            if !f.timestamp.is_finite() || (i > 0 && f.timestamp <= frames[i - 1].timestamp) {
                return Err(TqfsError::NonMonotonicTimestamps { index: i });
            }
        }
        Ok(Self { frames, fps })
    }

    /// Rate inferred from the average timestamp spacing; 1 fps for a single
    /// frame.
    pub fn from_timestamped(frames: Vec<Frame>) -> Result<Self> {
        let n = frames.len();
        let fps = if n >= 2 {
            let span = frames[n - 1].timestamp - frames[0].timestamp;
            (n - 1) as f64 / span
        } else {
            1.0
        };
        if n >= 2 && !(fps.is_finite() && fps > 0.0) {
            return Err(TqfsError::NonMonotonicTimestamps { index: n - 1 });
        }
        Self::new(frames, fps)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }
}

/// Indices of the frames nearest to times `0, 1/r', 2/r', ...` before the
/// end of the video.
pub fn subsample(video: &Video, r_prime: f64) -> Result<Vec<usize>> {
    let n = video.frames.len();
    let fps = video.fps;
    if !(r_prime.is_finite() && r_prime > 0.0 && r_prime <= fps) {
        return Err(TqfsError::InvalidRate { fps, r_prime });
    }
    let duration = video.duration();
    let mut out: Vec<usize> = Vec::new();
    let mut j = 0u64;
    loop {
        let t = j as f64 / r_prime;
        if t >= duration {
            break;
        }
        let idx = ((j as f64 * fps / r_prime).round() as usize).min(n - 1);
        if out.last() != Some(&idx) {
            out.push(idx);
        }
        j += 1;
    }
    Ok(out)
}

/// Position of the best-quality frame in each non-empty time bin.
///
/// `timestamps` must be ascending. Bins split `[t_first, t_last]` into `m`
/// equal widths; the last bin is closed on the right. Ties keep the earliest
/// frame.
pub fn bin_select(timestamps: &[f64], qualities: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(TqfsError::InvalidBins);
    }
    if timestamps.is_empty() {
        return Err(TqfsError::EmptyVideo);
    }
    if qualities.len() != timestamps.len() {
        return Err(TqfsError::QualityCount {
            expected: timestamps.len(),
            actual: qualities.len(),
        });
    }
    let first = timestamps[0];
    let span = timestamps[timestamps.len() - 1] - first;
    let mut best: Vec<Option<usize>> = vec![None; m];
    for (i, &t) in timestamps.iter().enumerate() {
        let bin = if span > 0.0 {
            (((t - first) * m as f64 / span).floor() as usize).min(m - 1)
        } else {
            0
        };
        match best[bin] {
            Some(b) if qualities[b] >= qualities[i] => {}
            _ => best[bin] = Some(i),
        }
    }
    Ok(best.into_iter().flatten().collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn kmeans_pp_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[next] = true;
        let c = points[next].to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Cluster labels from Lloyd's algorithm with k-means++ seeding.
///
/// At most 100 iterations; stops once the summed centroid movement falls
/// below 1e-6. Empty clusters keep their previous centroid and distance ties
/// go to the lowest cluster index.
pub fn kmeans(points: &[Embedding], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(TqfsError::InvalidK);
    }
    if k > points.len() {
        return Err(TqfsError::TooFewPoints { k, n: points.len() });
    }
    let pts: Vec<&[f64]> = points.iter().map(|e| e.values()).collect();
    let dim = pts[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&pts, k, &mut rng);
    let mut labels: Vec<usize> = pts.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..100 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in pts.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut movement = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            movement += sq_dist(&updated, &centroids[c]).sqrt();
            centroids[c] = updated;
        }
        labels = pts.iter().map(|p| nearest(p, &centroids)).collect();
        if movement < 1e-6 {
            break;
        }
    }
    Ok(labels)
}

pub trait FrameEmbedder: Send + Sync {
    fn embed_frame(&self, frame: &Frame) -> Result<Embedding>;
}

impl<F> FrameEmbedder for F
where
    F: Fn(&Frame) -> Result<Embedding> + Send + Sync,
{
    fn embed_frame(&self, frame: &Frame) -> Result<Embedding> {
        self(frame)
    }
}

/// Deterministic stand-in for a visual encoder: 4x4 grid block means plus a
/// bias term, mapped through a fixed Gaussian projection and normalized.
#[derive(Debug, Clone)]
pub struct ProjectionEmbedder {
    dim: usize,
    projection: Vec<f64>,
}

const GRID: u32 = 4;
const FEATURES: usize = (GRID * GRID) as usize + 1;

impl ProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * FEATURES)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { dim, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn features(frame: &Frame) -> [f64; FEATURES] {
        let mut f = [0.0; FEATURES];
        let span = |i: u32, len: u32| {
            let lo = i * len / GRID;
            let hi = ((i + 1) * len / GRID).max(lo + 1).min(len);
            (lo.min(len - 1), hi)
        };
        for by in 0..GRID {
            let (y0, y1) = span(by, frame.height);
            for bx in 0..GRID {
                let (x0, x1) = span(bx, frame.width);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += f64::from(frame.pixel(x, y));
                    }
                }
                let area = f64::from((y1 - y0) * (x1 - x0));
                f[(by * GRID + bx) as usize] = acc / area / 255.0 - 0.5;
            }
        }
        f[FEATURES - 1] = 1.0;
        f
    }
}

impl FrameEmbedder for ProjectionEmbedder {
    fn embed_frame(&self, frame: &Frame) -> Result<Embedding> {
        let f = Self::features(frame);
        let raw: Vec<f64> = self
            .projection
            .chunks_exact(FEATURES)
            .map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
            .collect();
        Ok(normalize(&raw, self.dim)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TqfsConfig {
    /// Target sampling rate in frames per second.
    pub r_prime: f64,
    /// Temporal bins.
    pub m: usize,
    /// Frames to keep.
    pub k: usize,
    pub seed: u64,
}

impl Default for TqfsConfig {
    fn default() -> Self {
        Self {
            r_prime: 2.0,
            m: 16,
            k: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSelection {
    /// Positions in the input frame sequence.
    pub indices: Vec<usize>,
    pub timestamps: Vec<f64>,
    /// Laplacian variance of each selected frame.
    pub quality: Vec<f64>,
}

pub fn score_frames(frames: &[Frame]) -> Vec<f64> {
    frames.par_iter().map(laplacian_variance).collect()
}

/// Picks up to `k` sharp, mutually distinct frames in chronological order.
pub fn select_frames(
    video: &Video,
    config: &TqfsConfig,
    embedder: &dyn FrameEmbedder,
) -> Result<FrameSelection> {
    if config.k == 0 {
        return Err(TqfsError::InvalidK);
    }
    let sampled = subsample(video, config.r_prime)?;
    let frames: Vec<Frame> = sampled.iter().map(|&i| video.frames[i].clone()).collect();
    let quality = score_frames(&frames);
    let timestamps: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    let candidates = bin_select(&timestamps, &quality, config.m)?;

    let mut keep: Vec<usize> = if candidates.len() < config.k {
        candidates
    } else {
        let embeddings = candidates
            .iter()
            .map(|&c| embedder.embed_frame(&frames[c]))
            .collect::<Result<Vec<_>>>()?;
        let labels = kmeans(&embeddings, config.k, config.seed)?;
        let mut best: Vec<Option<usize>> = vec![None; config.k];
        for (&c, &l) in candidates.iter().zip(&labels) {
            match best[l] {
                Some(b) if quality[b] > quality[c] || (quality[b] == quality[c] && b < c) => {}
                _ => best[l] = Some(c),
            }
        }
        best.into_iter().flatten().collect()
    };
    keep.sort_unstable();

    Ok(FrameSelection {
        indices: keep.iter().map(|&s| sampled[s]).collect(),
        timestamps: keep.iter().map(|&s| timestamps[s]).collect(),
        quality: keep.iter().map(|&s| quality[s]).collect(),
    })
}

/// Frames from a directory of binary PGM files named `<millis>.pgm`, ordered
/// by timestamp.
pub fn read_pgm_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        let millis: u64 = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TqfsError::Decode {
                path: path.display().to_string(),
                message: "file name is not <millis>.pgm".into(),
            })?;
        entries.push((millis, path));
    }
    entries.sort();
    entries
        .into_iter()
        .map(|(millis, path)| {
            let img = image::ImageReader::open(&path)?
                .with_guessed_format()?
                .decode()
                .map_err(|e| TqfsError::Decode {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?
                .into_luma8();
            let (w, h) = img.dimensions();
            Frame::new(millis as f64 / 1000.0, w, h, img.into_raw())
        })
        .collect()
}

pub fn write_pgm(frame: &Frame, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.pixels);
    fs::write(path, out)?;
    Ok(())
}

fn read_record<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(TqfsError::TruncatedStream),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

/// Frames from a stream of records: little-endian `u32` width, `u32` height,
/// `u64` timestamp in milliseconds, then `width * height` bytes.
pub fn read_frame_stream<R: Read>(mut reader: R) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    let mut header = [0u8; 16];
    while read_record(&mut reader, &mut header)? {
        let w = u32::from_le_bytes(header[0..4].try_into().expect("4 bytes"));
        let h = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        let ts = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
        if w < 3 || h < 3 {
            return Err(TqfsError::FrameTooSmall {
                width: w,
                height: h,
            });
        }
        let mut pixels = vec![0u8; w as usize * h as usize];
        if !read_record(&mut reader, &mut pixels)? {
            return Err(TqfsError::TruncatedStream);
        }
        frames.push(Frame::new(ts as f64 / 1000.0, w, h, pixels)?);
    }
    Ok(frames)
}

pub fn write_frame_stream<W: io::Write>(frames: &[Frame], mut out: W) -> Result<()> {
    for f in frames {
        out.write_all(&f.width.to_le_bytes())?;
        out.write_all(&f.height.to_le_bytes())?;
        out.write_all(&((f.timestamp * 1000.0).round() as u64).to_le_bytes())?;
        out.write_all(&f.pixels)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn constant(v: u8, w: u32, h: u32) -> Frame {
        Frame::new(0.0, w, h, vec![v; (w * h) as usize]).unwrap()
    }

    fn checkerboard(w: u32, h: u32) -> Frame {
        let px = (0..h)
            .flat_map(|y| (0..w).map(move |x| if (x + y) % 2 == 0 { 0 } else { 255 }))
            .collect();
        Frame::new(0.0, w, h, px).unwrap()
    }

    // Direct 2D convolution with an explicit kernel table.
    fn oracle_laplacian_variance(f: &Frame) -> f64 {
        let k = [[0, 1, 0], [1, -4, 1], [0, 1, 0]];
        let mut r = Vec::new();
        for y in 1..f.height() - 1 {
            for x in 1..f.width() - 1 {
                let mut acc = 0i64;
                for (ky, row) in k.iter().enumerate() {
                    for (kx, &kv) in row.iter().enumerate() {
                        acc += kv * i64::from(f.pixel(x + kx as u32 - 1, y + ky as u32 - 1));
                    }
                }
                r.push(acc as f64);
            }
        }
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64
    }

    fn video(n: usize, fps: f64) -> Video {
        let frames = (0..n)
            .map(|i| {
                let mut f = constant((i % 256) as u8, 3, 3);
                f.timestamp = i as f64 / fps;
                f
            })
            .collect();
        Video::new(frames, fps).unwrap()
    }

    #[test]
    fn frame_validation() {
        assert!(matches!(
            Frame::new(0.0, 2, 5, vec![0; 10]),
            Err(TqfsError::FrameTooSmall { .. })
        ));
        assert!(matches!(
            Frame::new(0.0, 3, 3, vec![0; 8]),
            Err(TqfsError::PixelCount { expected: 9, actual: 8 })
        ));
    }

    #[test]
    fn laplacian_cases() {
        assert_eq!(laplacian_variance(&constant(77, 8, 5)), 0.0);
        let cb = checkerboard(10, 8);
        let v = laplacian_variance(&cb);
        assert_eq!(v, oracle_laplacian_variance(&cb));
        assert_eq!(v, 1020.0 * 1020.0);
        let blurred = box_blur(&cb);
        let b = laplacian_variance(&blurred);
        assert_eq!(b, oracle_laplacian_variance(&blurred));
        assert!(v > 4.0 * b);
    }

    #[test]
    fn subsample_cases() {
        let v = video(300, 30.0);
        let idx = subsample(&v, 1.0).unwrap();
        assert_eq!(idx, (0..10).map(|i| i * 30).collect::<Vec<_>>());

        let v = video(40, 8.0);
        assert_eq!(subsample(&v, 8.0).unwrap(), (0..40).collect::<Vec<_>>());

        // 7.3 s at 24 fps: nearest frame to each 0.5 s mark.
        let n = (7.3f64 * 24.0).round() as usize;
        let v = video(n, 24.0);
        let expect: Vec<usize> = (0..)
            .map(|j| j as f64 * 0.5)
            .take_while(|&t| t < n as f64 / 24.0)
            .map(|t| {
                (0..n)
                    .min_by(|&a, &b| {
                        let da = (a as f64 / 24.0 - t).abs();
                        let db = (b as f64 / 24.0 - t).abs();
                        da.total_cmp(&db)
                    })
                    .unwrap()
            })
            .collect();
        assert_eq!(subsample(&v, 2.0).unwrap(), expect);
        assert_eq!(expect.len(), 15);

        assert!(matches!(subsample(&v, 0.0), Err(TqfsError::InvalidRate { .. })));
        assert!(matches!(subsample(&v, 30.0), Err(TqfsError::InvalidRate { .. })));
        assert!(matches!(Video::new(vec![], 1.0), Err(TqfsError::EmptyVideo)));
    }

    #[test]
    fn video_rejects_unordered_timestamps() {
        let mut a = constant(1, 3, 3);
        let mut b = constant(2, 3, 3);
        a.timestamp = 1.0;
        b.timestamp = 1.0;
        assert!(matches!(
            Video::new(vec![a, b], 1.0),
            Err(TqfsError::NonMonotonicTimestamps { index: 1 })
        ));
    }

    fn oracle_bins(ts: &[f64], q: &[f64], m: usize) -> Vec<usize> {
        let (lo, hi) = (ts[0], ts[ts.len() - 1]);
        let width = (hi - lo) / m as f64;
        let mut out = Vec::new();
        for b in 0..m {
            let members: Vec<usize> = (0..ts.len())
                .filter(|&i| {
                    let start = lo + b as f64 * width;
                    let end = lo + (b + 1) as f64 * width;
                    if b == m - 1 {
                        ts[i] >= start
                    } else {
                        ts[i] >= start && ts[i] < end
                    }
                })
                .collect();
            let mut best: Option<usize> = None;
            for i in members {
                if best.is_none_or(|j| q[i] > q[j]) {
                    best = Some(i);
                }
            }
            out.extend(best);
        }
        out
    }

    #[test]
    fn bin_select_cases() {
        let ts: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let q = [3.0, 9.0, 1.0, 4.0, 4.0, 2.0, 0.5, 8.0, 8.0, 7.0, 6.0, 7.5];
        let got = bin_select(&ts, &q, 4).unwrap();
        assert_eq!(got, oracle_bins(&ts, &q, 4));
        assert_eq!(bin_select(&ts, &q, 1).unwrap(), vec![1]);
        assert_eq!(bin_select(&ts, &q, 12).unwrap(), (0..12).collect::<Vec<_>>());

        let sparse = [0.0, 0.1, 9.9, 10.0];
        assert_eq!(bin_select(&sparse, &[1.0, 2.0, 3.0, 1.0], 5).unwrap(), vec![1, 2]);
        assert!(matches!(bin_select(&ts, &q, 0), Err(TqfsError::InvalidBins)));
        assert!(matches!(bin_select(&[], &[], 3), Err(TqfsError::EmptyVideo)));
    }

    fn emb(v: &[f64]) -> Embedding {
        normalize(v, v.len()).unwrap()
    }

    #[test]
    fn kmeans_cases() {
        let pts: Vec<_> = (0..5).map(|i| emb(&[1.0, i as f64, 0.3])).collect();
        let mut labels = kmeans(&pts, 5, 3).unwrap();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bundle = Vec::new();
        let mut truth = Vec::new();
        for i in 0..20 {
            let side = i % 2;
            let base = if side == 0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let jitter: Vec<f64> = (0..3).map(|_| rng.random_range(-0.01..0.01)).collect();
            bundle.push(emb(&[base[0] + jitter[0], base[1] + jitter[1], base[2] + jitter[2]]));
            truth.push(side);
        }
        for seed in 0..10 {
            let labels = kmeans(&bundle, 2, seed).unwrap();
            for i in 0..20 {
                for j in 0..20 {
                    assert_eq!(labels[i] == labels[j], truth[i] == truth[j]);
                }
            }
            assert_eq!(labels, kmeans(&bundle, 2, seed).unwrap());
        }

        assert!(matches!(kmeans(&pts, 6, 0), Err(TqfsError::TooFewPoints { k: 6, n: 5 })));
        assert!(matches!(kmeans(&pts, 0, 0), Err(TqfsError::InvalidK)));
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let pts = vec![emb(&[1.0, 0.0]); 4];
        let mut labels = kmeans(&pts, 3, 0).unwrap();
        labels.sort();
        assert_eq!(labels.len(), 4);
        assert!(labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn planted_sharp_frames_are_selected() {
        let (frames, planted) = crate::synthetic::planted_scenes();
        let v = Video::new(frames, 2.0).unwrap();
        let sel = select_frames(&v, &TqfsConfig::default(), &ProjectionEmbedder::new(64, 0)).unwrap();
        assert_eq!(sel.indices, planted);
        assert!(sel.timestamps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn identical_candidates_with_one_cluster() {
        let frames: Vec<Frame> = (0..10)
            .map(|i| {
                let mut f = checkerboard(6, 6);
                if i != 6 {
                    f = box_blur(&f);
                }
                f.timestamp = i as f64;
                f
            })
            .collect();
        let v = Video::new(frames, 1.0).unwrap();
        let same = |_: &Frame| -> Result<Embedding> { Ok(emb(&[1.0, 0.0])) };
        let cfg = TqfsConfig {
            r_prime: 1.0,
            m: 10,
            k: 1,
            seed: 0,
        };
        let sel = select_frames(&v, &cfg, &same).unwrap();
        assert_eq!(sel.indices, vec![6]);
    }

    #[test]
    fn fewer_candidates_than_k_returns_all() {
        let v = video(3, 1.0);
        let cfg = TqfsConfig {
            r_prime: 1.0,
            ..TqfsConfig::default()
        };
        let sel = select_frames(&v, &cfg, &ProjectionEmbedder::new(8, 0)).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2]);
    }

    #[test]
    fn pgm_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Frame> = (0..3)
            .map(|i| {
                let mut f = checkerboard(5, 4);
                f.timestamp = [2.5, 0.0, 1.25][i];
                f
            })
            .collect();
        for f in &frames {
            let name = format!("{}.pgm", (f.timestamp * 1000.0) as u64);
            write_pgm(f, &dir.path().join(name)).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let back = read_pgm_dir(dir.path()).unwrap();
        let ts: Vec<f64> = back.iter().map(|f| f.timestamp).collect();
        assert_eq!(ts, vec![0.0, 1.25, 2.5]);
        assert_eq!(back[0].pixels(), frames[0].pixels());
    }

    #[test]
    fn stream_round_trip_and_truncation() {
        let frames: Vec<Frame> = (0..3)
            .map(|i| {
                let mut f = constant(i as u8 * 40, 4, 3);
                f.timestamp = i as f64 * 0.5;
                f
            })
            .collect();
        let mut buf = Vec::new();
        write_frame_stream(&frames, &mut buf).unwrap();
        assert_eq!(read_frame_stream(&buf[..]).unwrap(), frames);
        assert!(read_frame_stream(&[][..]).unwrap().is_empty());
        assert!(matches!(
            read_frame_stream(&buf[..buf.len() - 1]),
            Err(TqfsError::TruncatedStream)
        ));
        assert!(matches!(read_frame_stream(&buf[..10]), Err(TqfsError::TruncatedStream)));
    }

    #[test]
    fn png_encoding_decodes_back() {
        let f = checkerboard(5, 5);
        let png = f.to_png().unwrap();
        let img = image::load_from_memory(&png).unwrap().into_luma8();
        assert_eq!(img.into_raw(), f.pixels());
    }

    #[test]
    fn projection_embedder_is_deterministic() {
        let e = ProjectionEmbedder::new(32, 5);
        let f = checkerboard(7, 9);
        assert_eq!(e.embed_frame(&f).unwrap(), e.embed_frame(&f).unwrap());
        let other = ProjectionEmbedder::new(32, 6).embed_frame(&f).unwrap();
        assert_ne!(e.embed_frame(&f).unwrap(), other);
        assert_eq!(e.embed_frame(&constant(0, 3, 3)).unwrap().dim(), 32);
    }

    fn random_frame() -> impl Strategy<Value = Frame> {
        (3u32..12, 3u32..12).prop_flat_map(|(w, h)| {
            prop::collection::vec(any::<u8>(), (w * h) as usize)
                .prop_map(move |px| Frame::new(0.0, w, h, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn laplacian_matches_oracle(f in random_frame()) {
            let v = laplacian_variance(&f);
            prop_assert!((v - oracle_laplacian_variance(&f)).abs() <= 1e-9 * v.max(1.0));
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn selection_is_chronological_and_bounded(n in 1usize..40, k in 1usize..6, m in 1usize..10, seed in any::<u64>()) {
            let frames: Vec<Frame> = (0..n).map(|i| {
                let px: Vec<u8> = (0..25).map(|p| ((p * 37 + i * 91 + (i * i) % 7) % 256) as u8).collect();
                Frame::new(i as f64, 5, 5, px).unwrap()
            }).collect();
            let v = Video::new(frames, 1.0).unwrap();
            let cfg = TqfsConfig { r_prime: 1.0, m, k, seed };
            let e = ProjectionEmbedder::new(16, 1);
            let sel = select_frames(&v, &cfg, &e).unwrap();
            prop_assert!(sel.indices.len() <= k);
            prop_assert!(!sel.indices.is_empty());
            prop_assert!(sel.timestamps.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(&sel, &select_frames(&v, &cfg, &e).unwrap());
        }
    }
}
