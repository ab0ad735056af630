//! The two-stream transformer.
//!
//! Each block runs, for both streams, masked self-attention, then
//! cross-attention against the other stream's post-self-attention rows, then a
//! feed-forward sublayer. Caption rows of the last block feed one vocabulary
//! head per stream.

mod attention;
mod checkpoint;
mod mask;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingTable, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::kg::KnowledgeItem;
use crate::numeric::{Graph, ParamStore, Tensor, Var};
use crate::tokens::{
    assemble_external, assemble_internal, make_caption_tokens, make_knowledge_tokens, make_region_tokens,
    make_text_tokens, make_video_tokens, Linear, ModalityConfig, RelationIndex, SegmentKind, StreamInput,
    StreamKind, TokenParams,
};

pub use attention::{attention_sublayer, feed_forward, AttentionOutput, AttentionParams, BlockParams, FeedForwardParams};
pub use checkpoint::{decode_params, encode_params, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use mask::{build_cross_mask, build_external_mask, build_internal_mask, build_self_mask, BlockReason, MaskMatrix};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const RELATIONS_FILE: &str = "relations.txt";
pub const MODEL_CONFIG_FILE: &str = "model.toml";

/// Weights of the external and internal distributions in the fused prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionWeights {
    pub ext: f64,
    pub int: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { ext: 0.8, int: 0.2 }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.ext >= 0.0 && self.int >= 0.0 && self.ext + self.int > 0.0) {
            return Err(Error::Config(format!(
                "fusion weights ({}, {}) must be non-negative and not both zero",
                self.ext, self.int
            )));
        }
        Ok(())
    }
}

/// Everything a clip contributes besides its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    /// One row per sampled frame.
    pub appearance: Tensor,
    pub motion: Tensor,
    /// Detections, sorted by confidence within each frame.
    pub region_features: Tensor,
    pub region_categories: Vec<String>,
    pub region_frames: Vec<usize>,
    pub transcript: Vec<String>,
    pub knowledge: Vec<KnowledgeItem>,
}

impl ClipFeatures {
    /// A clip with no context at all.
    pub fn empty(cfg: &ModalityConfig) -> Self {
        ClipFeatures {
            appearance: Tensor::zeros(vec![0, cfg.appearance_dim]),
            motion: Tensor::zeros(vec![0, cfg.motion_dim]),
            region_features: Tensor::zeros(vec![0, cfg.region_dim]),
            region_categories: Vec::new(),
            region_frames: Vec::new(),
            transcript: Vec::new(),
            knowledge: Vec::new(),
        }
    }
}

/// Attention weights of one head of one sublayer.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub block: usize,
    pub query_stream: StreamKind,
    pub key_stream: StreamKind,
    pub head: usize,
    pub weights: Var,
    /// Stream row of each row of `weights`.
    pub query_rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Caption rows × vocabulary, external stream.
    pub z_ext: Var,
    pub z_int: Var,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodeState {
    pub words: Vec<usize>,
    pub finished: bool,
}

impl DecodeState {
    pub fn to_words(&self, vocab: &Vocabulary) -> Vec<String> {
        self.words.iter().map(|&i| vocab.word(i).to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    modality: ModalityConfig,
    fusion: FusionWeights,
}

#[derive(Clone, Debug)]
pub struct TextKGModel {
    pub config: ModalityConfig,
    pub fusion: FusionWeights,
    pub vocab: Vocabulary,
    pub relations: RelationIndex,
    pub store: ParamStore,
    pub tokens: TokenParams,
    pub ext_blocks: Vec<BlockParams>,
    pub int_blocks: Vec<BlockParams>,
    pub head_ext: Linear,
    pub head_int: Linear,
}

impl TextKGModel {
    pub fn new(
        config: ModalityConfig,
        vocab: Vocabulary,
        relations: RelationIndex,
        fusion: FusionWeights,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        fusion.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tokens = TokenParams::new(&mut store, &config, &relations, &mut rng);
        let mut stack = |name: &str, store: &mut ParamStore| {
            (0..config.n_blocks)
                .map(|b| BlockParams::new(store, &format!("{name}.block{b}"), d, config.ff_mult, &mut rng))
                .collect::<Vec<_>>()
        };
        let ext_blocks = stack("ext", &mut store);
        let int_blocks = stack("int", &mut store);
        let head_ext = Linear::new(&mut store, "ext.head", d, vocab.len(), &mut rng);
        let head_int = Linear::new(&mut store, "int.head", d, vocab.len(), &mut rng);
        Ok(TextKGModel {
            config,
            fusion,
            vocab,
            relations,
            store,
            tokens,
            ext_blocks,
            int_blocks,
            head_ext,
            head_int,
        })
    }

    /// Both stream inputs for a clip and a caption prefix (words after BOS).
    pub fn build_streams<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        clip: &ClipFeatures,
        table: &EmbeddingTable,
        prefix: &[S],
    ) -> Result<(StreamInput, StreamInput)> {
        let cfg = &self.config;
        let s = &self.store;
        let p = &self.tokens;
        let video = make_video_tokens(g, s, &clip.appearance, &clip.motion, &p.video_proj)?;
        let regions = make_region_tokens(
            g,
            s,
            &clip.region_features,
            &clip.region_categories,
            &clip.region_frames,
            cfg.n_r,
            &p.region_proj,
        )?;
        let knowledge = &clip.knowledge[..clip.knowledge.len().min(cfg.max_knowledge)];
        let knowledge = make_knowledge_tokens(g, s, knowledge, table, &self.relations, p)?;
        let transcript = make_text_tokens(g, s, &clip.transcript, table, cfg.max_transcript, &p.word_proj)?;
        let caption = make_caption_tokens(g, s, p, prefix, table, cfg.max_caption)?;
        let ext = assemble_external(g, s, p, cfg, regions, knowledge, transcript, caption)?;
        let int = assemble_internal(g, s, p, cfg, transcript, caption, video)?;
        Ok((ext, int))
    }

    pub fn forward(&self, g: &mut Graph, ext: &StreamInput, int: &StreamInput) -> Result<ForwardOutput> {
        if ext.segmap.stream != StreamKind::External || int.segmap.stream != StreamKind::Internal {
            return Err(Error::InvalidArgument("streams passed in the wrong order".into()));
        }
        let caption_len = ext.segmap.caption_len();
        if int.segmap.caption_len() != caption_len {
            return Err(Error::Shape(format!(
                "caption segments differ: {caption_len} external vs {} internal rows",
                int.segmap.caption_len()
            )));
        }
        let heads = self.config.heads;
        let ext_mask = build_external_mask(&ext.segmap);
        let int_mask = build_internal_mask(&int.segmap);
        let ext_cross = build_cross_mask(&ext.segmap, &int.segmap);
        let int_cross = build_cross_mask(&int.segmap, &ext.segmap);

        let mut attention = Vec::new();
        let mut record = |block, q: StreamKind, k: StreamKind, out: &AttentionOutput| {
            for (head, &w) in out.weights.iter().enumerate() {
                attention.push(AttentionRecord {
                    block,
                    query_stream: q,
                    key_stream: k,
                    head,
                    weights: w,
                    query_rows: out.query_rows.clone(),
                });
            }
        };
        let (mut xe, mut xi) = (ext.tokens, int.tokens);
        let (e, i) = (StreamKind::External, StreamKind::Internal);
        for (b, (pe, pi)) in self.ext_blocks.iter().zip(&self.int_blocks).enumerate() {
            let se = attention_sublayer(g, &self.store, xe, xe, &ext_mask, &pe.self_attn, heads)?;
            record(b, e, e, &se);
            let si = attention_sublayer(g, &self.store, xi, xi, &int_mask, &pi.self_attn, heads)?;
            record(b, i, i, &si);
            let ce = attention_sublayer(g, &self.store, se.out, si.out, &ext_cross, &pe.cross_attn, heads)?;
            record(b, e, i, &ce);
            let ci = attention_sublayer(g, &self.store, si.out, se.out, &int_cross, &pi.cross_attn, heads)?;
            record(b, i, e, &ci);
            xe = feed_forward(g, &self.store, ce.out, &pe.ff)?;
            xi = feed_forward(g, &self.store, ci.out, &pi.ff)?;
        }
        let z_ext = self.head(g, xe, ext, &self.head_ext)?;
        let z_int = self.head(g, xi, int, &self.head_int)?;
        Ok(ForwardOutput {
            z_ext,
            z_int,
            attention,
        })
    }

    fn head(&self, g: &mut Graph, x: Var, stream: &StreamInput, head: &Linear) -> Result<Var> {
        let range = stream.segmap.range(SegmentKind::Caption);
        let rows = g.slice_rows(x, range.start, range.len())?;
        let logits = head.forward(g, &self.store, rows)?;
        g.softmax(logits)
    }

    /// Runs the model on a clip with the given caption prefix.
    pub fn forward_clip<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        clip: &ClipFeatures,
        table: &EmbeddingTable,
        prefix: &[S],
    ) -> Result<(ForwardOutput, StreamInput, StreamInput)> {
        let (ext, int) = self.build_streams(g, clip, table, prefix)?;
        let out = self.forward(g, &ext, &int)?;
        Ok((out, ext, int))
    }

    /// Greedy decoding with full recomputation at every step.
    pub fn greedy_decode(&self, clip: &ClipFeatures, table: &EmbeddingTable, max_caption: usize) -> Result<DecodeState> {
        let mut state = DecodeState::default();
        let mut prefix: Vec<String> = Vec::new();
        while state.words.len() < max_caption {
            let mut g = Graph::new();
            let (out, _, _) = self.forward_clip(&mut g, clip, table, &prefix)?;
            let last = g.rows(out.z_ext) - 1;
            let (_, y) = fuse_and_argmax(
                g.value(out.z_ext).row(last),
                g.value(out.z_int).row(last),
                self.fusion.ext,
                self.fusion.int,
            )?;
            if y == EOS {
                state.finished = true;
                break;
            }
            state.words.push(y);
            prefix.push(self.vocab.word(y).to_string());
        }
        Ok(state)
    }

    pub fn decode_words(&self, clip: &ClipFeatures, table: &EmbeddingTable) -> Result<Vec<String>> {
        Ok(self
            .greedy_decode(clip, table, self.config.max_caption)?
            .to_words(&self.vocab))
    }

    /// Writes the checkpoint and its sidecar files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_checkpoint(&self.store, &dir.join(CHECKPOINT_FILE))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(VOCAB_FILE, self.vocab.to_text())?;
        write(RELATIONS_FILE, self.relations.to_text())?;
        let meta = ModelMeta {
            modality: self.config.clone(),
            fusion: self.fusion,
        };
        write(
            MODEL_CONFIG_FILE,
            toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?,
        )
    }

    /// Loads a model saved with [`TextKGModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let meta: ModelMeta = toml::from_str(&read(MODEL_CONFIG_FILE)?)
            .map_err(|e| Error::Config(format!("{}: {e}", dir.join(MODEL_CONFIG_FILE).display())))?;
        let vocab = Vocabulary::from_text(&read(VOCAB_FILE)?)?;
        let relations = RelationIndex::from_text(&read(RELATIONS_FILE)?);
        let mut model = TextKGModel::new(meta.modality, vocab, relations, meta.fusion, 0)?;
        let path = dir.join(CHECKPOINT_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let entries = decode_params(&bytes)?;
        let head = model.store.get(model.head_ext.weight);
        if let Some((_, shape, _)) = entries.iter().find(|(n, _, _)| *n == head.name) {
            if shape != head.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "vocabulary mismatch: checkpoint head is {:?}, vocabulary has {} entries",
                    shape,
                    model.vocab.len()
                )));
            }
        }
        read_checkpoint(&mut model.store, &entries)?;
        Ok(model)
    }
}

/// `p = ω_ext·z_ext + ω_int·z_int` and its argmax.
///
/// Entries within a relative `1e-12` of the maximum count as ties, and ties
/// go to the lowest index.
pub fn fuse_and_argmax(z_ext: &[f64], z_int: &[f64], w_ext: f64, w_int: f64) -> Result<(Vec<f64>, usize)> {
    if z_ext.len() != z_int.len() || z_ext.is_empty() {
        return Err(Error::Shape(format!(
            "cannot fuse rows of length {} and {}",
            z_ext.len(),
            z_int.len()
        )));
    }
    let p: Vec<f64> = z_ext.iter().zip(z_int).map(|(a, b)| w_ext * a + w_int * b).collect();
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * max.abs();
    let y = p.iter().position(|&v| v >= max - tol).unwrap_or(0);
    Ok((p, y))
}
