//! Deterministic toy cooking world for desk-scale experiments.
//!
//! Every clip shows one object being handled with one verb. Transcripts name
//! the object, a size adjective and an adverb; the caption is
//! `<verb> the <color> <object>`. Colors never occur in any transcript: the
//! only place an object's color can be looked up is the `has_color` triple in
//! the general knowledge graph. Held-out clips use objects that no training
//! caption mentions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{PathsConfig, RunConfig};
use crate::data::{format_text_features, ClipEntry, DatasetManifest, RegionEntry, VideoEntry};
use crate::embeddings::{write_word_vectors, EmbeddingTable};
use crate::error::{Error, Result};
use crate::kg::{KgSource, KnowledgeGraph, KnowledgeTriple, PosLexicon, PosTag};
use crate::numeric::Tensor;
use crate::tokens::ModalityConfig;
use crate::training::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HELDOUT_FILE: &str = "heldout.json";
pub const GENERAL_KG_FILE: &str = "general_kg.tsv";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const VECTORS_FILE: &str = "vectors.txt";
pub const META_FILE: &str = "synthetic.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const COLOR_RELATION: &str = "has_color";

const OBJECTS: &[&str] = &[
    "onion", "carrot", "potato", "tomato", "pepper", "garlic", "lemon", "apple", "cabbage", "celery",
    "ginger", "radish", "turnip", "leek", "squash", "mango", "peach", "pear", "plum", "melon", "banana",
    "cherry", "grape", "olive", "bean", "pea", "corn", "egg", "cheese", "bread", "fish", "shrimp",
    "chicken", "beef", "tofu", "noodle", "basil", "mint", "kale", "spinach", "lettuce", "cucumber",
    "zucchini", "eggplant", "beet", "fig", "lime", "date",
];
const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const MAX_OBJECTS: usize = 1000;

/// The named objects followed by made-up two-syllable ones.
fn object_names(n: usize) -> Vec<String> {
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let made_up = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .filter(|w| !OBJECTS.contains(&w.as_str()));
    OBJECTS.iter().map(|s| s.to_string()).chain(made_up).take(n).collect()
}

const COLORS: &[&str] = &[
    "red", "green", "yellow", "orange", "purple", "brown", "white", "black", "pink", "golden", "silver",
    "blue",
];
const VERBS: &[&str] = &["slice", "chop", "peel", "wash", "dice", "grate", "mash", "stir"];
const SIZES: &[&str] = &["big", "small", "whole", "fresh"];
const ADVERBS: &[&str] = &["carefully", "gently", "quickly"];
const LOCATIONS: &[&str] = &["kitchen", "fridge", "pantry", "market", "garden"];
const CLASSES: &[&str] = &["vegetable", "fruit", "ingredient", "food"];
const FILLERS: &[&str] = &["first", "take", "the", "then", "."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    pub videos: usize,
    pub clips_per_video: usize,
    /// Single-clip held-out videos, each about an unseen object.
    pub heldout_clips: usize,
    pub frames: usize,
    pub train_objects: usize,
    pub novel_objects: usize,
    pub colors: usize,
    /// Width of appearance, motion and region features.
    pub feature_dim: usize,
    pub word_dim: usize,
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            videos: 4,
            clips_per_video: 2,
            heldout_clips: 16,
            frames: 4,
            train_objects: 24,
            novel_objects: 16,
            colors: 8,
            feature_dim: 8,
            word_dim: 16,
            noise: 0.1,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.train_objects + self.novel_objects > MAX_OBJECTS {
            return bad(format!("at most {MAX_OBJECTS} objects are available"));
        }
        if self.train_objects == 0 || self.frames == 0 || self.feature_dim == 0 || self.word_dim == 0 {
            return bad("train_objects, frames and dimensions must be positive".into());
        }
        if self.heldout_clips > 0 && self.novel_objects == 0 {
            return bad("held-out clips need novel objects".into());
        }
        if self.colors == 0 || self.colors > COLORS.len() {
            return bad(format!("colors must be in 1..={}", COLORS.len()));
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }
}

/// Ground truth of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub params: SynthParams,
    /// The KG-only attribute words.
    pub planted_words: Vec<String>,
    pub object_colors: BTreeMap<String, String>,
    pub train_objects: Vec<String>,
    pub novel_objects: Vec<String>,
    /// Caption word index of the attribute.
    pub attribute_position: usize,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub meta: SynthMeta,
    pub manifest: DatasetManifest,
    pub heldout: DatasetManifest,
    /// `(relative path, contents)` of every feature file.
    pub feature_files: Vec<(PathBuf, String)>,
    pub general_kg: KnowledgeGraph,
    pub lexicon: PosLexicon,
    pub vectors: EmbeddingTable,
    pub config: RunConfig,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Rounds to 6 decimals so the text files are short and stable.
fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

struct World {
    verb_app: Vec<Vec<f64>>,
    verb_mot: Vec<Vec<f64>>,
    object_proto: BTreeMap<String, Vec<f64>>,
    colors: BTreeMap<String, String>,
}

struct ClipSpec<'a> {
    video_id: String,
    clip_id: String,
    object: &'a str,
}

pub fn generate(params: &SynthParams) -> Result<SynthCorpus> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_objects = params.train_objects + params.novel_objects;
    let mut names = object_names(n_objects.max(OBJECTS.len()));
    names.shuffle(&mut rng);
    let objects: Vec<&str> = names[..n_objects].iter().map(String::as_str).collect();
    let train_objects = &objects[..params.train_objects];
    let novel_objects = &objects[params.train_objects..];
    let palette = &COLORS[..params.colors];

    // Colors cycle within each split so every color is equally common.
    let mut colors = BTreeMap::new();
    for split in [train_objects, novel_objects] {
        for (i, o) in split.iter().enumerate() {
            colors.insert(o.to_string(), palette[i % palette.len()].to_string());
        }
    }
    let d = params.feature_dim;
    let world = World {
        verb_app: VERBS.iter().map(|_| gaussian(&mut rng, d)).collect(),
        verb_mot: VERBS.iter().map(|_| gaussian(&mut rng, d)).collect(),
        object_proto: train_objects
            .iter()
            .chain(novel_objects)
            .map(|o| (o.to_string(), gaussian(&mut rng, d)))
            .collect(),
        colors,
    };

    let mut general_kg = KnowledgeGraph::new();
    for o in train_objects.iter().chain(novel_objects) {
        let triples = [
            (COLOR_RELATION, world.colors[*o].clone()),
            ("at_location", LOCATIONS[rng.random_range(0..LOCATIONS.len())].to_string()),
            ("is_a", CLASSES[rng.random_range(0..CLASSES.len())].to_string()),
        ];
        for (r, t) in triples {
            general_kg.insert(KnowledgeTriple::new(*o, r, t, KgSource::General))?;
        }
    }

    let mut feature_files = Vec::new();
    let mut build = |specs: Vec<ClipSpec>, rng: &mut ChaCha8Rng| -> DatasetManifest {
        let mut videos: Vec<VideoEntry> = Vec::new();
        for s in specs {
            let (entry, files) = make_clip(&s, &world, params, rng);
            feature_files.extend(files);
            match videos.last_mut() {
                Some(v) if v.video_id == s.video_id => v.clips.push(entry),
                _ => videos.push(VideoEntry {
                    video_id: s.video_id.clone(),
                    clips: vec![entry],
                }),
            }
        }
        DatasetManifest { videos }
    };
    let train_specs = (0..params.videos * params.clips_per_video)
        .map(|k| ClipSpec {
            video_id: format!("vid{:03}", k / params.clips_per_video),
            clip_id: format!("clip{:02}", k % params.clips_per_video),
            object: train_objects[k % train_objects.len()],
        })
        .collect();
    let manifest = build(train_specs, &mut rng);
    let heldout_specs = (0..params.heldout_clips)
        .map(|k| ClipSpec {
            video_id: format!("novel{k:03}"),
            clip_id: "clip00".into(),
            object: novel_objects[k % novel_objects.len()],
        })
        .collect();
    let heldout = build(heldout_specs, &mut rng);

    let mut lexicon = PosLexicon::new();
    let tagged: [(&[&str], PosTag); 8] = [
        (&objects, PosTag::Noun),
        (LOCATIONS, PosTag::Noun),
        (CLASSES, PosTag::Noun),
        (COLORS, PosTag::Adjective),
        (SIZES, PosTag::Adjective),
        (VERBS, PosTag::Verb),
        (ADVERBS, PosTag::Adverb),
        (FILLERS, PosTag::Other),
    ];
    let mut vectors = EmbeddingTable::new(params.word_dim);
    for (words, tag) in tagged {
        for w in words {
            lexicon.insert(*w, tag);
        }
    }
    let mut all_words: Vec<&str> = tagged.iter().flat_map(|(w, _)| w.iter().copied()).collect();
    all_words.sort_unstable();
    for w in all_words {
        let v = gaussian(&mut rng, params.word_dim).into_iter().map(round6).collect();
        vectors.insert(w, v)?;
    }

    let meta = SynthMeta {
        params: params.clone(),
        planted_words: palette.iter().map(|s| s.to_string()).collect(),
        object_colors: world.colors.clone(),
        train_objects: train_objects.iter().map(|s| s.to_string()).collect(),
        novel_objects: novel_objects.iter().map(|s| s.to_string()).collect(),
        attribute_position: 2,
    };
    Ok(SynthCorpus {
        meta,
        manifest,
        heldout,
        feature_files,
        general_kg,
        lexicon,
        vectors,
        config: synthetic_run_config(params),
    })
}

fn make_clip(s: &ClipSpec, world: &World, params: &SynthParams, rng: &mut ChaCha8Rng) -> (ClipEntry, Vec<(PathBuf, String)>) {
    let v = rng.random_range(0..VERBS.len());
    let size = SIZES[rng.random_range(0..SIZES.len())];
    let adverb = ADVERBS[rng.random_range(0..ADVERBS.len())];
    let mut noisy = |proto: &[f64]| -> Vec<f64> {
        proto.iter().map(|p| round6(p + params.noise * Distribution::<f64>::sample(&StandardNormal, rng))).collect::<Vec<f64>>()
    };
    let frames = params.frames;
    let app: Vec<Vec<f64>> = (0..frames).map(|_| noisy(&world.verb_app[v])).collect();
    let mot: Vec<Vec<f64>> = (0..frames).map(|_| noisy(&world.verb_mot[v])).collect();
    let proto = &world.object_proto[s.object];
    let region_features: Vec<Vec<f64>> = (0..frames).map(|_| noisy(proto)).collect();
    let regions = region_features
        .into_iter()
        .enumerate()
        .map(|(f, features)| RegionEntry {
            frame: f,
            category: s.object.to_string(),
            confidence: round6(rng.random_range(0.5..1.0)),
            features: Some(features),
            feature_path: None,
        })
        .collect();
    let stem = format!("features/{}_{}", s.video_id, s.clip_id);
    let app_path = PathBuf::from(format!("{stem}.app.txt"));
    let mot_path = PathBuf::from(format!("{stem}.mot.txt"));
    let text = |rows: &[Vec<f64>]| format_text_features(&Tensor::from_rows(rows, params.feature_dim).expect("rows"));
    let files = vec![(app_path.clone(), text(&app)), (mot_path.clone(), text(&mot))];
    let words = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    let transcript = words(&format!(
        "first take the {size} {obj} . then {adverb} {verb} the {obj} .",
        obj = s.object,
        verb = VERBS[v]
    ));
    let caption = words(&format!("{} the {} {}", VERBS[v], world.colors[s.object], s.object));
    let entry = ClipEntry {
        clip_id: s.clip_id.clone(),
        appearance: app_path,
        motion: mot_path,
        regions,
        transcript,
        captions: vec![caption],
    };
    (entry, files)
}

/// A small model and an overfitting recipe sized for the generated corpus.
pub fn synthetic_run_config(params: &SynthParams) -> RunConfig {
    let modality = ModalityConfig {
        d_model: 64,
        heads: 4,
        n_blocks: 2,
        appearance_dim: params.feature_dim,
        motion_dim: params.feature_dim,
        region_dim: params.feature_dim,
        word_dim: params.word_dim,
        max_frames: params.frames.max(1),
        max_knowledge: 16,
        max_transcript: 32,
        max_caption: 8,
        ..ModalityConfig::default()
    };
    let train = TrainConfig {
        base_lr: 1e-3,
        weight_decay: 0.0,
        batch_size: 1,
        epochs: 250,
        seed: params.seed,
        ..TrainConfig::default()
    };
    RunConfig {
        modality,
        train,
        paths: PathsConfig {
            manifest: Some(MANIFEST_FILE.into()),
            word_vectors: Some(VECTORS_FILE.into()),
            general_kg: Some(GENERAL_KG_FILE.into()),
            pos_lexicon: Some(LEXICON_FILE.into()),
            out_dir: "run".into(),
        },
        ..RunConfig::default()
    }
}

impl SynthCorpus {
    /// Writes the corpus under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let write = |rel: &Path, text: &str| -> Result<()> {
            let p = dir.join(rel);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        for (rel, text) in &self.feature_files {
            write(rel, text)?;
        }
        write(Path::new(MANIFEST_FILE), &self.manifest.to_json())?;
        write(Path::new(HELDOUT_FILE), &self.heldout.to_json())?;
        write(Path::new(GENERAL_KG_FILE), &self.general_kg.to_tsv())?;
        write(Path::new(LEXICON_FILE), &self.lexicon.to_tsv())?;
        write_word_vectors(&self.vectors, &dir.join(VECTORS_FILE))?;
        write(
            Path::new(META_FILE),
            &serde_json::to_string_pretty(&self.meta).expect("metadata serializes"),
        )?;
        write(Path::new(CONFIG_FILE), &self.config.to_toml())
    }
}
