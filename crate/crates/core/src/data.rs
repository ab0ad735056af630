//! Dataset manifests and feature files.
//!
//! A manifest is a JSON document listing videos, each with an ordered list of
//! clips. Feature paths are resolved relative to the manifest's directory.
//! Feature files are either text (one row of floats per line) or a binary
//! `TKGF` file: 4 magic bytes, `u32` rows, `u32` cols, 4 zero bytes, then
//! `rows × cols` little-endian `f32` values.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"TKGF";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub video_id: String,
    pub clips: Vec<ClipEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub clip_id: String,
    pub appearance: PathBuf,
    pub motion: PathBuf,
    #[serde(default)]
    pub regions: Vec<RegionEntry>,
    #[serde(default)]
    pub transcript: Vec<String>,
    #[serde(default)]
    pub captions: Vec<Vec<String>>,
}

/// One detection. Features are given inline or as a one-row feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionEntry {
    pub frame: usize,
    pub category: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
}

/// A clip with every referenced file loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub video_id: String,
    pub clip_id: String,
    pub appearance: Tensor,
    pub motion: Tensor,
    pub region_features: Tensor,
    pub region_categories: Vec<String>,
    pub region_frames: Vec<usize>,
    pub transcript: Vec<String>,
    pub captions: Vec<Vec<String>>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl DatasetManifest {
    pub fn clip_count(&self) -> usize {
        self.videos.iter().map(|v| v.clips.len()).sum()
    }

    /// `(video_id, clip)` pairs in manifest order.
    pub fn clips(&self) -> impl Iterator<Item = (&str, &ClipEntry)> {
        self.videos
            .iter()
            .flat_map(|v| v.clips.iter().map(move |c| (v.video_id.as_str(), c)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

impl Dataset {
    /// Parses and validates a manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let ds = Dataset { root, manifest };
        ds.validate()?;
        Ok(ds)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Checks ids, region entries and file references. Every missing file is
    /// reported, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut missing = BTreeSet::new();
        let mut problems = Vec::new();
        let mut ids = BTreeSet::new();
        for (vid, clip) in self.manifest.clips() {
            if !ids.insert((vid, clip.clip_id.as_str())) {
                problems.push(format!("duplicate clip {vid}/{}", clip.clip_id));
            }
            for p in [&clip.appearance, &clip.motion] {
                let full = self.resolve(p);
                if !full.is_file() {
                    missing.insert(full.display().to_string());
                }
            }
            let mut last: Option<(usize, f64)> = None;
            for (i, r) in clip.regions.iter().enumerate() {
                match (&r.features, &r.feature_path) {
                    (Some(_), None) => {}
                    (None, Some(p)) => {
                        let full = self.resolve(p);
                        if !full.is_file() {
                            missing.insert(full.display().to_string());
                        }
                    }
                    _ => problems.push(format!(
                        "{vid}/{} region {i}: give exactly one of features or feature_path",
                        clip.clip_id
                    )),
                }
                if let Some((f, c)) = last {
                    if f == r.frame && r.confidence > c {
                        problems.push(format!(
                            "{vid}/{} region {i}: confidences not sorted descending within frame {f}",
                            clip.clip_id
                        ));
                    }
                }
                last = Some((r.frame, r.confidence));
            }
        }
        if !missing.is_empty() {
            problems.push(format!(
                "missing files: {}",
                missing.into_iter().collect::<Vec<_>>().join(", ")
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(problems.join("; ")))
        }
    }

    /// Loads one clip's features. `dims` is `(appearance, motion, region)`.
    pub fn load_clip(&self, video_id: &str, clip: &ClipEntry, dims: (usize, usize, usize)) -> Result<ClipRecord> {
        let appearance = read_features(&self.resolve(&clip.appearance), dims.0)?;
        let motion = read_features(&self.resolve(&clip.motion), dims.1)?;
        let mut rows = Vec::with_capacity(clip.regions.len());
        for r in &clip.regions {
            let row = match (&r.features, &r.feature_path) {
                (Some(v), _) => v.clone(),
                (None, Some(p)) => {
                    let t = read_features(&self.resolve(p), dims.2)?;
                    if t.rows() != 1 {
                        return Err(Error::Data(format!("{}: expected one feature row", p.display())));
                    }
                    t.into_data()
                }
                (None, None) => unreachable!("validated"),
            };
            if row.len() != dims.2 {
                return Err(Error::Data(format!(
                    "{video_id}/{}: region feature has {} values, expected {}",
                    clip.clip_id,
                    row.len(),
                    dims.2
                )));
            }
            rows.push(row);
        }
        Ok(ClipRecord {
            video_id: video_id.to_string(),
            clip_id: clip.clip_id.clone(),
            appearance,
            motion,
            region_features: Tensor::from_rows(&rows, dims.2)?,
            region_categories: clip.regions.iter().map(|r| r.category.clone()).collect(),
            region_frames: clip.regions.iter().map(|r| r.frame).collect(),
            transcript: clip.transcript.clone(),
            captions: clip.captions.clone(),
        })
    }

    pub fn load_all(&self, dims: (usize, usize, usize)) -> Result<Vec<ClipRecord>> {
        self.manifest
            .clips()
            .map(|(v, c)| self.load_clip(v, c, dims))
            .collect()
    }
}

/// Reads a text or binary feature file with `cols` columns.
pub fn read_features(path: &Path, cols: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = if bytes.starts_with(FEATURE_MAGIC) {
        decode_binary_features(&bytes).map_err(|e| Error::parse(path, 0, e.to_string()))?
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::parse(path, 0, "not UTF-8 text"))?;
        parse_text_features(&text, cols, path)?
    };
    if t.cols() != cols {
        return Err(Error::Data(format!(
            "{}: {} columns, expected {cols}",
            path.display(),
            t.cols()
        )));
    }
    Ok(t)
}

pub fn parse_text_features(text: &str, cols: usize, origin: &Path) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(origin, i + 1, "non-finite value"));
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::parse(
                origin,
                i + 1,
                format!("{} values, expected {cols}", data.len() - before),
            ));
        }
        rows += 1;
    }
    Tensor::matrix(rows, cols, data)
}

pub fn format_text_features(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn encode_binary_features(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_binary_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Data("not a TKGF feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let n = rows
        .checked_mul(cols)
        .filter(|n| bytes.len() == 16 + n * 4)
        .ok_or_else(|| Error::Data(format!("TKGF payload does not hold {rows}x{cols} values")))?;
    let data = bytes[16..]
        .chunks_exact(4)
        .take(n)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::matrix(rows, cols, data)
}
