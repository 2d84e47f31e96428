//! Seeded two-modality feature sequences with planted action segments.
//!
//! Every video carries one action class. Inside its segments the class's
//! preferred modality gains `amplitude · pattern[class]`, a fixed unit
//! direction; the other modality and all background frames are pure noise.
//!
//! Feature files use the SACF layout: `b"SACF"`, `u32` LE version (1), `u32`
//! LE `D`, `u32` LE `T`, then `T·D` `f32` LE appearance values frame-major,
//! then `T·D` `f32` LE motion values frame-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{GroundTruth, Segment};
use crate::rng::SplitMix64;
use crate::sac::FeatureSequence;
use crate::tensor::Tensor;

pub const SACF_MAGIC: &[u8; 4] = b"SACF";
pub const SACF_VERSION: u32 = 1;
pub const FRAME_RATE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Appearance,
    Motion,
}

impl Modality {
    pub fn row(self) -> usize {
        match self {
            Modality::Appearance => 0,
            Modality::Motion => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Appearance => "appearance",
            Modality::Motion => "motion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "a" | "appearance" => Ok(Modality::Appearance),
            "m" | "motion" => Ok(Modality::Motion),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub actions: (usize, usize),
    pub action_len: (usize, usize),
    /// Preferred modality of classes `1..=classes`, in order.
    pub preference: Vec<Modality>,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_videos: 200,
            test_videos: 100,
            frames: 64,
            dim: 8,
            classes: 4,
            actions: (1, 3),
            action_len: (6, 16),
            preference: vec![
                Modality::Appearance,
                Modality::Appearance,
                Modality::Motion,
                Modality::Motion,
            ],
            amplitude: 2.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.preference.len() != self.classes {
            return bad(format!(
                "{} classes need {} preferences, got {}",
                self.classes,
                self.classes,
                self.preference.len()
            ));
        }
        if self.frames < 2 || self.dim == 0 {
            return bad("need at least two frames and one feature channel".into());
        }
        let (a0, a1) = self.actions;
        let (l0, l1) = self.action_len;
        if a0 == 0 || a0 > a1 || l0 == 0 || l0 > l1 {
            return bad(format!("bad ranges: actions {a0}..={a1}, length {l0}..={l1}"));
        }
        if !(self.noise >= 0.0) || !(self.amplitude >= 0.0) {
            return bad("amplitude and noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn preferred(&self, label: usize) -> Modality {
        self.preference[label - 1]
    }
}

/// One generated or loaded video.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub split: Split,
    pub features: FeatureSequence,
    pub annotations: Vec<Segment>,
}

impl Video {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.annotations
            .iter()
            .map(|s| GroundTruth {
                video: self.id.clone(),
                start: s.start,
                end: s.end,
                label: s.label,
            })
            .collect()
    }

    /// The single action class of a synthetic video, if it has any actions.
    pub fn label(&self) -> Option<usize> {
        self.annotations.first().map(|s| s.label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub classes: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| v.split == split)
    }
}

/// Unit class directions; orthonormal (Gram–Schmidt) while `classes ≤ dim`.
pub fn class_patterns(cfg: &SynthConfig, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        let mut v: Vec<f64> = (0..cfg.dim).map(|_| rng.gaussian()).collect();
        if out.len() < cfg.dim {
            for p in &out {
                let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    out
}

/// Non-overlapping segments separated by at least one background frame.
fn place_segments(cfg: &SynthConfig, label: usize, rng: &mut SplitMix64) -> Result<Vec<Segment>> {
    let n = rng.int_in(cfg.actions.0, cfg.actions.1);
    let lens: Vec<usize> = (0..n)
        .map(|_| rng.int_in(cfg.action_len.0, cfg.action_len.1))
        .collect();
    let occupied = lens.iter().sum::<usize>() + n - 1;
    if occupied > cfg.frames {
        return Err(Error::Infeasible(format!(
            "{n} actions of lengths {lens:?} do not fit in {} frames",
            cfg.frames
        )));
    }
    // split the slack into n + 1 gaps by sorted cut points
    let slack = cfg.frames - occupied;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.int_in(0, slack)).collect();
    cuts.sort_unstable();
    let mut segs = Vec::with_capacity(n);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (k, (&len, &cut)) in lens.iter().zip(&cuts).enumerate() {
        pos += cut - prev_cut + usize::from(k > 0);
        prev_cut = cut;
        segs.push(Segment::new(pos, pos + len - 1, label, 1.0));
        pos += len;
    }
    Ok(segs)
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Generate one video of class `label`. Values are rounded to `f32` so the
/// in-memory copy equals what a SACF file stores.
pub fn generate_video(
    cfg: &SynthConfig,
    patterns: &[Vec<f64>],
    label: usize,
    rng: &mut SplitMix64,
) -> Result<(FeatureSequence, Vec<Segment>)> {
    cfg.validate()?;
    let (d, t) = (cfg.dim, cfg.frames);
    let segments = place_segments(cfg, label, rng)?;
    let mut mods = [vec![0.0; d * t], vec![0.0; d * t]];
    // frame-major draw order, appearance then motion per frame
    for frame in 0..t {
        for m in &mut mods {
            for ch in 0..d {
                m[ch * t + frame] = cfg.noise * rng.gaussian();
            }
        }
    }
    let row = cfg.preferred(label).row();
    for s in &segments {
        for frame in s.start..=s.end {
            for ch in 0..d {
                mods[row][ch * t + frame] += cfg.amplitude * patterns[label - 1][ch];
            }
        }
    }
    let [a, m] = mods;
    let features = FeatureSequence::new(
        Tensor::matrix(d, t, a.into_iter().map(round_f32).collect())?,
        Tensor::matrix(d, t, m.into_iter().map(round_f32).collect())?,
        FRAME_RATE,
    )?;
    Ok((features, segments))
}

/// Whole dataset in memory: train videos first, then test videos.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let master = SplitMix64::new(cfg.seed);
    let patterns = class_patterns(cfg, &mut master.split(0));
    let mut videos = Vec::with_capacity(cfg.train_videos + cfg.test_videos);
    let splits = std::iter::repeat_n(Split::Train, cfg.train_videos)
        .chain(std::iter::repeat_n(Split::Test, cfg.test_videos));
    for (i, split) in splits.enumerate() {
        let mut rng = master.split(1 + i as u64);
        let label = rng.int_in(1, cfg.classes);
        let (features, annotations) = generate_video(cfg, &patterns, label, &mut rng)?;
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let local = if split == Split::Train { i } else { i - cfg.train_videos };
        videos.push(Video {
            id: format!("{prefix}_{local:04}"),
            split,
            features,
            annotations,
        });
    }
    Ok(Dataset {
        videos,
        classes: cfg.classes,
    })
}

pub fn encode_sacf(f: &FeatureSequence) -> Vec<u8> {
    let (d, t) = (f.dim(), f.frames());
    let mut out = Vec::with_capacity(16 + 8 * d * t);
    out.extend_from_slice(SACF_MAGIC);
    out.extend_from_slice(&SACF_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    for m in [&f.appearance, &f.motion] {
        for frame in 0..t {
            for ch in 0..d {
                out.extend_from_slice(&(m.at(ch, frame) as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_sacf(bytes: &[u8]) -> Result<FeatureSequence> {
    let bad = |m: &str| Error::Format(format!("SACF: {m}"));
    if bytes.len() < 16 || &bytes[..4] != SACF_MAGIC {
        return Err(bad("missing magic"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
    let (version, d, t) = (word(4), word(8), word(12));
    if version != SACF_VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    if bytes.len() != 16 + 8 * d * t {
        return Err(bad(&format!("expected {} bytes for D={d}, T={t}, got {}", 16 + 8 * d * t, bytes.len())));
    }
    let mut mods = [vec![0.0; d * t], vec![0.0; d * t]];
    let mut off = 16;
    for m in &mut mods {
        for frame in 0..t {
            for ch in 0..d {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
                m[ch * t + frame] = v as f64;
                off += 4;
            }
        }
    }
    let [a, m] = mods;
    FeatureSequence::new(Tensor::matrix(d, t, a)?, Tensor::matrix(d, t, m)?, FRAME_RATE)
        .map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: String,
    pub split: Split,
    pub annotations: Vec<AnnotationEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Write `features/<id>.sacf` for every video plus `manifest.json` under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("features"))?;
    let mut manifest = Vec::with_capacity(ds.videos.len());
    for v in &ds.videos {
        let rel = format!("features/{}.sacf", v.id);
        fs::write(dir.join(&rel), encode_sacf(&v.features))?;
        manifest.push(ManifestEntry {
            id: v.id.clone(),
            feature_path: rel,
            split: v.split,
            annotations: v
                .annotations
                .iter()
                .map(|s| AnnotationEntry {
                    start: s.start,
                    end: s.end,
                    label: s.label,
                })
                .collect(),
        });
    }
    let path = dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    write_dataset(&generate(cfg)?, dir)
}

/// Load a manifest; feature paths are resolved relative to the manifest's directory.
/// `classes` defaults to the largest label present.
pub fn load_dataset(manifest: &Path, classes: Option<usize>) -> Result<Dataset> {
    let entries: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(manifest)?)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut videos = Vec::with_capacity(entries.len());
    let mut max_label = 0;
    for e in entries {
        let features = decode_sacf(&fs::read(root.join(&e.feature_path))?)?;
        let t = features.frames();
        let annotations: Vec<Segment> = e
            .annotations
            .iter()
            .map(|a| Segment::new(a.start, a.end, a.label, 1.0))
            .collect();
        if let Some(bad) = annotations.iter().find(|s| s.start > s.end || s.end >= t || s.label == 0) {
            return Err(Error::Format(format!("video {}: invalid annotation {bad:?}", e.id)));
        }
        max_label = annotations.iter().map(|s| s.label).fold(max_label, usize::max);
        videos.push(Video {
            id: e.id,
            split: e.split,
            features,
            annotations,
        });
    }
    Ok(Dataset {
        videos,
        classes: classes.unwrap_or(max_label).max(1),
    })
}
