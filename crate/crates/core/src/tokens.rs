//! Turning a clip's raw inputs into the two stream input matrices.
//!
//! External stream rows are `[region, knowledge, transcript, caption]`,
//! internal stream rows are `[transcript, caption, video]`. Every row gets a
//! learned per-kind position embedding and a learned per-stream type embedding.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingTable, BOS};
use crate::error::{Error, Result};
use crate::kg::KnowledgeItem;
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityConfig {
    pub d_model: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub n_r: usize,
    pub n_k: usize,
    pub max_caption: usize,
    pub max_transcript: usize,
    pub frames_per_second_sampled: usize,
    pub appearance_dim: usize,
    pub motion_dim: usize,
    pub region_dim: usize,
    pub word_dim: usize,
    /// Longest video (in sampled frames) the position tables cover.
    pub max_frames: usize,
    /// Most knowledge tokens one clip may carry.
    pub max_knowledge: usize,
    pub ff_mult: usize,
    /// Not implemented beyond 0; kept so configs can state it.
    pub dropout: f64,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        ModalityConfig {
            d_model: 768,
            heads: 12,
            n_blocks: 2,
            n_r: 6,
            n_k: 5,
            max_caption: 20,
            max_transcript: 300,
            frames_per_second_sampled: 2,
            appearance_dim: 2048,
            motion_dim: 1024,
            region_dim: 2048,
            word_dim: 300,
            max_frames: 128,
            max_knowledge: 64,
            ff_mult: 4,
            dropout: 0.0,
        }
    }
}

impl ModalityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        let caps = [
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_r", self.n_r),
            ("n_k", self.n_k),
            ("max_caption", self.max_caption),
            ("max_transcript", self.max_transcript),
            ("frames_per_second_sampled", self.frames_per_second_sampled),
            ("appearance_dim", self.appearance_dim),
            ("motion_dim", self.motion_dim),
            ("region_dim", self.region_dim),
            ("word_dim", self.word_dim),
            ("max_frames", self.max_frames),
            ("max_knowledge", self.max_knowledge),
            ("ff_mult", self.ff_mult),
        ];
        if let Some((name, _)) = caps.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout other than 0 is not supported".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn position_capacity(&self, kind: SegmentKind) -> usize {
        match kind {
            SegmentKind::Region => self.max_frames * self.n_r,
            SegmentKind::Knowledge => self.max_knowledge,
            SegmentKind::Transcript => self.max_transcript,
            SegmentKind::Caption => self.max_caption + 1,
            SegmentKind::Video => self.max_frames,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentKind {
    Region,
    Knowledge,
    Transcript,
    Caption,
    Video,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::Region,
        SegmentKind::Knowledge,
        SegmentKind::Transcript,
        SegmentKind::Caption,
        SegmentKind::Video,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::Region => "region",
            SegmentKind::Knowledge => "knowledge",
            SegmentKind::Transcript => "transcript",
            SegmentKind::Caption => "caption",
            SegmentKind::Video => "video",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamKind {
    External,
    Internal,
}

impl StreamKind {
    pub fn order(self) -> &'static [SegmentKind] {
        match self {
            StreamKind::External => &[
                SegmentKind::Region,
                SegmentKind::Knowledge,
                SegmentKind::Transcript,
                SegmentKind::Caption,
            ],
            StreamKind::Internal => &[
                SegmentKind::Transcript,
                SegmentKind::Caption,
                SegmentKind::Video,
            ],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::External => "ext",
            StreamKind::Internal => "int",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// Row layout of one stream: contiguous segments in the stream's fixed kind
/// order, plus category annotations for region and knowledge rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMap {
    pub stream: StreamKind,
    segments: Vec<Segment>,
    /// Category of each region row, in row order.
    pub region_categories: Vec<String>,
    /// Source category of each knowledge row, in row order.
    pub knowledge_categories: Vec<String>,
}

impl SegmentMap {
    /// `lengths` follows `stream.order()`.
    pub fn new(
        stream: StreamKind,
        lengths: &[usize],
        region_categories: Vec<String>,
        knowledge_categories: Vec<String>,
    ) -> Result<Self> {
        let order = stream.order();
        if lengths.len() != order.len() {
            return Err(Error::InvalidArgument(format!(
                "{} segment lengths for a {}-segment stream",
                lengths.len(),
                order.len()
            )));
        }
        let mut start = 0;
        let mut segments = Vec::with_capacity(order.len());
        for (&kind, &len) in order.iter().zip(lengths) {
            segments.push(Segment { kind, start, len });
            start += len;
        }
        let map = SegmentMap {
            stream,
            segments,
            region_categories,
            knowledge_categories,
        };
        let (r, k) = (map.len_of(SegmentKind::Region), map.len_of(SegmentKind::Knowledge));
        if map.region_categories.len() != r || map.knowledge_categories.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{} region / {} knowledge annotations for {r} / {k} rows",
                map.region_categories.len(),
                map.knowledge_categories.len()
            )));
        }
        Ok(map)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn len_of(&self, kind: SegmentKind) -> usize {
        self.segment(kind).map_or(0, |s| s.len)
    }

    pub fn range(&self, kind: SegmentKind) -> std::ops::Range<usize> {
        self.segment(kind)
            .map_or(0..0, |s| s.start..s.start + s.len)
    }

    /// Kind and in-segment offset of `row`.
    pub fn locate(&self, row: usize) -> Option<(SegmentKind, usize)> {
        self.segments
            .iter()
            .find(|s| row >= s.start && row < s.start + s.len)
            .map(|s| (s.kind, row - s.start))
    }

    /// Category annotation of a region or knowledge row.
    pub fn category(&self, row: usize) -> Option<&str> {
        match self.locate(row)? {
            (SegmentKind::Region, i) => Some(&self.region_categories[i]),
            (SegmentKind::Knowledge, i) => Some(&self.knowledge_categories[i]),
            _ => None,
        }
    }

    /// Number of caption rows in this stream.
    pub fn caption_len(&self) -> usize {
        self.len_of(SegmentKind::Caption)
    }
}

/// A stream's token matrix (in a graph) and its row layout.
#[derive(Clone, Debug)]
pub struct StreamInput {
    pub tokens: Var,
    pub segmap: SegmentMap,
}

/// `x · W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.add_weight(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.add_bias(format!("{name}.bias"), fan_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Relation label → row of the relation embedding table; unseen labels map to
/// the trailing `rel_unk` row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelationIndex {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelationIndex {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        let mut r = RelationIndex::default();
        for l in labels {
            let l = l.into();
            if !r.index.contains_key(&l) {
                r.index.insert(l.clone(), r.labels.len());
                r.labels.push(l);
            }
        }
        r
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Table rows including `rel_unk`.
    pub fn table_rows(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn unk(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, label: &str) -> usize {
        self.index.get(label).copied().unwrap_or(self.unk())
    }

    pub fn to_text(&self) -> String {
        self.labels.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn from_text(text: &str) -> Self {
        RelationIndex::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}

/// Every learned parameter on the token side of the model.
#[derive(Clone, Debug)]
pub struct TokenParams {
    pub video_proj: Linear,
    pub region_proj: Linear,
    pub word_proj: Linear,
    pub knowledge_proj: Linear,
    /// `relations.table_rows() × word_dim`.
    pub relation_emb: ParamId,
    /// PAD, BOS, EOS rows of width `d_model`.
    pub special: ParamId,
    positions: [ParamId; 5],
    type_ext: ParamId,
    type_int: ParamId,
}

fn kind_slot(kind: SegmentKind) -> usize {
    SegmentKind::ALL.iter().position(|&k| k == kind).expect("kind listed")
}

impl TokenParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModalityConfig, relations: &RelationIndex, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let video_proj = Linear::new(store, "tok.video_proj", cfg.appearance_dim + cfg.motion_dim, d, rng);
        let region_proj = Linear::new(store, "tok.region_proj", cfg.region_dim, d, rng);
        let word_proj = Linear::new(store, "tok.word_proj", cfg.word_dim, d, rng);
        let knowledge_proj = Linear::new(store, "tok.knowledge_proj", cfg.word_dim, d, rng);
        let relation_emb = store.add_embedding("tok.relation_emb", relations.table_rows(), cfg.word_dim, 0.1, rng);
        let special = store.add_embedding("tok.special", 3, d, 0.1, rng);
        let positions = SegmentKind::ALL.map(|k| {
            store.add_embedding(
                format!("tok.pos.{}", k.name()),
                cfg.position_capacity(k),
                d,
                0.02,
                rng,
            )
        });
        let type_ext = store.add_embedding("tok.type.ext", StreamKind::External.order().len(), d, 0.02, rng);
        let type_int = store.add_embedding("tok.type.int", StreamKind::Internal.order().len(), d, 0.02, rng);
        TokenParams {
            video_proj,
            region_proj,
            word_proj,
            knowledge_proj,
            relation_emb,
            special,
            positions,
            type_ext,
            type_int,
        }
    }

    pub fn position_table(&self, kind: SegmentKind) -> ParamId {
        self.positions[kind_slot(kind)]
    }

    pub fn type_table(&self, stream: StreamKind) -> ParamId {
        match stream {
            StreamKind::External => self.type_ext,
            StreamKind::Internal => self.type_int,
        }
    }
}

fn empty_rows(g: &mut Graph, d: usize) -> Var {
    g.constant(Tensor::zeros(vec![0, d]))
}

/// One token per sampled frame: `proj(appearance ‖ motion)`.
pub fn make_video_tokens(
    g: &mut Graph,
    store: &ParamStore,
    appearance: &Tensor,
    motion: &Tensor,
    proj: &Linear,
) -> Result<Var> {
    let frames = appearance.rows();
    if motion.rows() != frames {
        return Err(Error::Data(format!(
            "{frames} appearance frames but {} motion frames",
            motion.rows()
        )));
    }
    let (a, m) = (appearance.cols(), motion.cols());
    let mut data = Vec::with_capacity(frames * (a + m));
    for t in 0..frames {
        data.extend_from_slice(appearance.row(t));
        data.extend_from_slice(motion.row(t));
    }
    let x = g.constant(Tensor::matrix(frames, a + m, data)?);
    proj.forward(g, store, x)
}

/// Indices of the detections kept for each frame: the first `n_r` of every
/// frame group, since detections arrive sorted by confidence within a frame.
pub fn top_regions_per_frame(frames: &[usize], n_r: usize) -> Vec<usize> {
    let mut taken: HashMap<usize, usize> = HashMap::new();
    let mut keep = Vec::new();
    for (i, &f) in frames.iter().enumerate() {
        let c = taken.entry(f).or_default();
        if *c < n_r {
            *c += 1;
            keep.push(i);
        }
    }
    keep
}

/// Region tokens for the top `n_r` detections of every frame, with their
/// categories in row order.
pub fn make_region_tokens(
    g: &mut Graph,
    store: &ParamStore,
    features: &Tensor,
    categories: &[String],
    frames: &[usize],
    n_r: usize,
    proj: &Linear,
) -> Result<(Var, Vec<String>)> {
    let r = features.rows();
    if categories.len() != r || frames.len() != r {
        return Err(Error::Data(format!(
            "{r} region features but {} categories and {} frame ids",
            categories.len(),
            frames.len()
        )));
    }
    let keep = top_regions_per_frame(frames, n_r);
    let rows: Vec<&[f64]> = keep.iter().map(|&i| features.row(i)).collect();
    let x = g.constant(Tensor::from_rows(&rows, features.cols())?);
    let tokens = proj.forward(g, store, x)?;
    let cats = keep.iter().map(|&i| categories[i].clone()).collect();
    Ok((tokens, cats))
}

/// Word tokens for the first `cap` words (shared by transcripts and captions).
pub fn make_text_tokens<S: AsRef<str>>(
    g: &mut Graph,
    store: &ParamStore,
    words: &[S],
    table: &EmbeddingTable,
    cap: usize,
    proj: &Linear,
) -> Result<Var> {
    let words = &words[..words.len().min(cap)];
    let rows = table.embed_words(words);
    let x = g.constant(Tensor::from_rows(&rows, table.dim())?);
    proj.forward(g, store, x)
}

/// Caption segment for a teacher-forced or decoded prefix: the learned BOS
/// row followed by word tokens for at most `max_caption` words.
pub fn make_caption_tokens<S: AsRef<str>>(
    g: &mut Graph,
    store: &ParamStore,
    params: &TokenParams,
    prefix: &[S],
    table: &EmbeddingTable,
    max_caption: usize,
) -> Result<Var> {
    let special = g.param(store, params.special);
    let bos = g.gather_rows(special, &[BOS])?;
    let words = make_text_tokens(g, store, prefix, table, max_caption, &params.word_proj)?;
    g.concat_rows(&[bos, words])
}

/// `proj(embed(node) + relation_emb[relation])` per knowledge item.
pub fn make_knowledge_tokens(
    g: &mut Graph,
    store: &ParamStore,
    items: &[KnowledgeItem],
    table: &EmbeddingTable,
    relations: &RelationIndex,
    params: &TokenParams,
) -> Result<(Var, Vec<String>)> {
    let nodes: Vec<Vec<f64>> = items.iter().map(|k| table.embed_word(&k.node)).collect();
    let words = g.constant(Tensor::from_rows(&nodes, table.dim())?);
    let rel_ids: Vec<usize> = items.iter().map(|k| relations.get(&k.triple.relation)).collect();
    let rel_table = g.param(store, params.relation_emb);
    let rels = g.gather_rows(rel_table, &rel_ids)?;
    let summed = g.add(words, rels)?;
    let tokens = params.knowledge_proj.forward(g, store, summed)?;
    Ok((tokens, items.iter().map(|k| k.category.clone()).collect()))
}

fn assemble(
    g: &mut Graph,
    store: &ParamStore,
    params: &TokenParams,
    cfg: &ModalityConfig,
    stream: StreamKind,
    parts: &[Var],
    region_categories: Vec<String>,
    knowledge_categories: Vec<String>,
) -> Result<StreamInput> {
    let d = cfg.d_model;
    for &p in parts {
        if g.cols(p) != d {
            return Err(Error::Shape(format!(
                "{} token width {} differs from d_model {d}",
                stream.name(),
                g.cols(p)
            )));
        }
    }
    let lengths: Vec<usize> = parts.iter().map(|&p| g.rows(p)).collect();
    let segmap = SegmentMap::new(stream, &lengths, region_categories, knowledge_categories)?;
    let tokens = g.concat_rows(parts)?;

    let type_table = g.param(store, params.type_table(stream));
    let mut extras = Vec::with_capacity(parts.len());
    for (slot, seg) in segmap.segments().iter().enumerate() {
        let cap = cfg.position_capacity(seg.kind);
        if seg.len > cap {
            return Err(Error::Data(format!(
                "{} segment has {} rows, position table holds {cap}",
                seg.kind.name(),
                seg.len
            )));
        }
        let pos_table = g.param(store, params.position_table(seg.kind));
        let idx: Vec<usize> = (0..seg.len).collect();
        let pos = g.gather_rows(pos_table, &idx)?;
        let ty = g.gather_rows(type_table, &vec![slot; seg.len])?;
        extras.push(g.add(pos, ty)?);
    }
    let extra = if extras.is_empty() {
        empty_rows(g, d)
    } else {
        g.concat_rows(&extras)?
    };
    let tokens = g.add(tokens, extra)?;
    Ok(StreamInput { tokens, segmap })
}

/// External stream: `[region, knowledge, transcript, caption]`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_external(
    g: &mut Graph,
    store: &ParamStore,
    params: &TokenParams,
    cfg: &ModalityConfig,
    regions: (Var, Vec<String>),
    knowledge: (Var, Vec<String>),
    transcript: Var,
    caption: Var,
) -> Result<StreamInput> {
    assemble(
        g,
        store,
        params,
        cfg,
        StreamKind::External,
        &[regions.0, knowledge.0, transcript, caption],
        regions.1,
        knowledge.1,
    )
}

/// Internal stream: `[transcript, caption, video]`.
pub fn assemble_internal(
    g: &mut Graph,
    store: &ParamStore,
    params: &TokenParams,
    cfg: &ModalityConfig,
    transcript: Var,
    caption: Var,
    video: Var,
) -> Result<StreamInput> {
    assemble(
        g,
        store,
        params,
        cfg,
        StreamKind::Internal,
        &[transcript, caption, video],
        Vec::new(),
        Vec::new(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{KgSource, KnowledgeTriple};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModalityConfig {
        ModalityConfig {
            d_model: 8,
            heads: 2,
            appearance_dim: 3,
            motion_dim: 2,
            region_dim: 4,
            word_dim: 5,
            max_frames: 8,
            max_knowledge: 10,
            max_transcript: 300,
            ..ModalityConfig::default()
        }
    }

    fn setup() -> (ParamStore, TokenParams, ModalityConfig, RelationIndex) {
        let cfg = small_cfg();
        let rel = RelationIndex::new(["has_property", "used to"]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = TokenParams::new(&mut store, &cfg, &rel, &mut rng);
        (store, p, cfg, rel)
    }

    fn rows(g: &Graph, v: Var) -> usize {
        g.rows(v)
    }

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ModalityConfig::default();
        assert_eq!((c.d_model, c.heads, c.n_r, c.n_k, c.max_caption, c.max_transcript), (768, 12, 6, 5, 20, 300));
        assert_eq!(c.word_dim, 300);
        c.validate().unwrap();
        assert!(ModalityConfig { heads: 5, ..c.clone() }.validate().is_err());
        assert!(ModalityConfig { n_k: 0, ..c.clone() }.validate().is_err());
        assert!(ModalityConfig { dropout: 0.1, ..c }.validate().is_err());
    }

    #[test]
    fn video_tokens_shapes() {
        let (store, p, cfg, _) = setup();
        let mut g = Graph::new();
        let z = make_video_tokens(&mut g, &store, &Tensor::zeros(vec![0, 3]), &Tensor::zeros(vec![0, 2]), &p.video_proj).unwrap();
        assert_eq!(rows(&g, z), 0);
        let v = make_video_tokens(&mut g, &store, &Tensor::zeros(vec![4, 3]), &Tensor::zeros(vec![4, 2]), &p.video_proj).unwrap();
        assert_eq!(g.shape(v), &[4, cfg.d_model]);
        assert!(make_video_tokens(&mut g, &store, &Tensor::zeros(vec![4, 3]), &Tensor::zeros(vec![3, 2]), &p.video_proj).is_err());
    }

    #[test]
    fn video_tokens_with_identity_projection_are_concatenations() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = Linear::new(&mut store, "id", 5, 5, &mut rng);
        let eye: Vec<f64> = (0..25).map(|i| if i % 6 == 0 { 1.0 } else { 0.0 }).collect();
        store.get_mut(proj.weight).value = Tensor::matrix(5, 5, eye).unwrap();
        let app = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mot = Tensor::matrix(2, 2, vec![7.0, 8.0, 9.0, 10.0]).unwrap();
        let mut g = Graph::new();
        let v = make_video_tokens(&mut g, &store, &app, &mot, &proj).unwrap();
        assert_eq!(g.value(v).data(), &[1.0, 2.0, 3.0, 7.0, 8.0, 4.0, 5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn region_tokens_keep_top_per_frame() {
        let (store, p, _, _) = setup();
        let mut g = Graph::new();
        let cats: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
        let (v, kept) = make_region_tokens(&mut g, &store, &Tensor::zeros(vec![8, 4]), &cats, &[0; 8], 6, &p.region_proj).unwrap();
        assert_eq!(rows(&g, v), 6);
        assert_eq!(kept, cats[..6]);
        let (v, kept) = make_region_tokens(&mut g, &store, &Tensor::zeros(vec![2, 4]), &cats[..2], &[0, 0], 6, &p.region_proj).unwrap();
        assert_eq!(rows(&g, v), 2);
        assert_eq!(kept, ["c0", "c1"]);
        assert!(make_region_tokens(&mut g, &store, &Tensor::zeros(vec![2, 4]), &cats[..1], &[0, 0], 6, &p.region_proj).is_err());
    }

    #[test]
    fn per_frame_selection() {
        assert_eq!(top_regions_per_frame(&[0, 0, 0, 1, 1, 0], 2), [0, 1, 3, 4]);
    }

    #[test]
    fn text_tokens_truncate() {
        let (store, p, _, _) = setup();
        let table = EmbeddingTable::new(5);
        let mut g = Graph::new();
        let cap = make_caption_tokens(&mut g, &store, &p, &words(25), &table, 20).unwrap();
        assert_eq!(rows(&g, cap), 21, "BOS + 20 words");
        let tr = make_text_tokens(&mut g, &store, &words(350), &table, 300, &p.word_proj).unwrap();
        assert_eq!(rows(&g, tr), 300);
        let none = make_text_tokens::<String>(&mut g, &store, &[], &table, 300, &p.word_proj).unwrap();
        assert_eq!(rows(&g, none), 0);
    }

    fn item(h: &str, r: &str, t: &str) -> KnowledgeItem {
        KnowledgeItem {
            triple: KnowledgeTriple::new(h, r, t, KgSource::General),
            category: h.into(),
            node: t.into(),
            score: None,
        }
    }

    #[test]
    fn knowledge_token_is_projected_sum() {
        let (mut store, p, _, rel) = setup();
        let mut table = EmbeddingTable::new(5);
        table.insert("hard", vec![1.0, 0.0, -1.0, 0.5, 2.0]).unwrap();
        let mut g = Graph::new();
        let (v, cats) = make_knowledge_tokens(&mut g, &store, &[item("knife", "has_property", "hard")], &table, &rel, &p).unwrap();
        assert_eq!(cats, ["knife"]);

        // hand evaluation of proj(embed("hard") + E[has_property])
        let e = store.get(p.relation_emb).value.row(rel.get("has_property")).to_vec();
        let x: Vec<f64> = table.embed_word("hard").iter().zip(&e).map(|(a, b)| a + b).collect();
        let w = &store.get(p.knowledge_proj.weight).value;
        let b = &store.get(p.knowledge_proj.bias).value;
        for c in 0..8 {
            let want: f64 = (0..5).map(|k| x[k] * w.get(k, c)).sum::<f64>() + b.data()[c];
            assert!((g.value(v).get(0, c) - want).abs() < 1e-12);
        }

        // zeroing the relation table leaves proj(embed(tail))
        store.get_mut(p.relation_emb).value.data_mut().fill(0.0);
        let mut g2 = Graph::new();
        let (v2, _) = make_knowledge_tokens(&mut g2, &store, &[item("knife", "has_property", "hard")], &table, &rel, &p).unwrap();
        let mut g3 = Graph::new();
        let plain = make_text_tokens(&mut g3, &store, &["hard"], &table, 1, &p.knowledge_proj).unwrap();
        assert_eq!(g2.value(v2), g3.value(plain));
    }

    #[test]
    fn knowledge_tokens_differ_by_relation() {
        let (store, p, _, rel) = setup();
        let table = EmbeddingTable::new(5);
        let mut g = Graph::new();
        let items = [item("knife", "has_property", "hard"), item("knife", "used to", "hard"), item("knife", "never seen", "hard")];
        let (v, _) = make_knowledge_tokens(&mut g, &store, &items, &table, &rel, &p).unwrap();
        let t = g.value(v);
        assert_ne!(t.row(0), t.row(1));
        assert_eq!(rel.get("never seen"), rel.unk());
        assert_ne!(t.row(2), t.row(0));
    }

    fn block(g: &mut Graph, n: usize, d: usize, fill: f64) -> Var {
        g.constant(Tensor::filled(vec![n, d], fill))
    }

    #[test]
    fn external_assembly_layout() {
        let (store, p, cfg, _) = setup();
        let mut g = Graph::new();
        let r = block(&mut g, 6, 8, 0.0);
        let k = block(&mut g, 5, 8, 0.0);
        let s = block(&mut g, 10, 8, 0.0);
        let c = block(&mut g, 20, 8, 0.0);
        let cats = vec!["x".to_string(); 6];
        let kc = vec!["x".to_string(); 5];
        let ext = assemble_external(&mut g, &store, &p, &cfg, (r, cats), (k, kc), s, c).unwrap();
        assert_eq!(ext.segmap.total_len(), 41);
        let kinds: Vec<_> = ext.segmap.segments().iter().map(|s| s.kind).collect();
        assert_eq!(kinds, StreamKind::External.order());
        assert_eq!(g.rows(ext.tokens), 41);

        let empty_k = block(&mut g, 0, 8, 0.0);
        let ext = assemble_external(&mut g, &store, &p, &cfg, (r, vec!["x".into(); 6]), (empty_k, vec![]), s, c).unwrap();
        assert_eq!(ext.segmap.len_of(SegmentKind::Knowledge), 0);
        assert_eq!(ext.segmap.total_len(), 36);

        let bad = block(&mut g, 2, 7, 0.0);
        assert!(assemble_external(&mut g, &store, &p, &cfg, (r, vec!["x".into(); 6]), (empty_k, vec![]), bad, c).is_err());
    }

    #[test]
    fn internal_assembly_layout() {
        let (store, p, cfg, _) = setup();
        let mut g = Graph::new();
        let s = block(&mut g, 10, 8, 0.0);
        let c = block(&mut g, 20, 8, 0.0);
        let v = block(&mut g, 4, 8, 0.0);
        let int = assemble_internal(&mut g, &store, &p, &cfg, s, c, v).unwrap();
        assert_eq!(int.segmap.total_len(), 34);
        assert_eq!(int.segmap.segments().len(), 3);
        let e = block(&mut g, 0, 8, 0.0);
        let only_caption = assemble_internal(&mut g, &store, &p, &cfg, e, c, e).unwrap();
        let populated: Vec<_> = only_caption.segmap.segments().iter().filter(|s| s.len > 0).collect();
        assert_eq!(populated.len(), 1);
    }

    #[test]
    fn position_depends_only_on_offset_and_kind() {
        let (store, p, cfg, _) = setup();
        let mut g = Graph::new();
        let e = block(&mut g, 0, 8, 0.0);
        let s3 = block(&mut g, 3, 8, 0.0);
        let s7 = block(&mut g, 7, 8, 0.0);
        let c = block(&mut g, 4, 8, 0.0);
        let a = assemble_internal(&mut g, &store, &p, &cfg, s3, c, e).unwrap();
        let b = assemble_internal(&mut g, &store, &p, &cfg, s7, c, e).unwrap();
        // caption row k sits at different absolute rows yet gets the same additive term
        for k in 0..4 {
            let ra = g.value(a.tokens).row(a.segmap.range(SegmentKind::Caption).start + k).to_vec();
            let rb = g.value(b.tokens).row(b.segmap.range(SegmentKind::Caption).start + k).to_vec();
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn caption_rows_differ_across_streams_only_by_type_term() {
        let (store, p, cfg, _) = setup();
        let table = EmbeddingTable::new(5);
        let mut g = Graph::new();
        let cap = make_caption_tokens(&mut g, &store, &p, &words(3), &table, 20).unwrap();
        let e = block(&mut g, 0, 8, 0.0);
        let ext = assemble_external(&mut g, &store, &p, &cfg, (e, vec![]), (e, vec![]), e, cap).unwrap();
        let int = assemble_internal(&mut g, &store, &p, &cfg, e, cap, e).unwrap();
        let te = store.get(p.type_table(StreamKind::External)).value.row(3).to_vec();
        let ti = store.get(p.type_table(StreamKind::Internal)).value.row(1).to_vec();
        for k in 0..4 {
            let re = g.value(ext.tokens).row(k);
            let ri = g.value(int.tokens).row(k);
            for c in 0..8 {
                assert!(((re[c] - te[c]) - (ri[c] - ti[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_map_locates_rows() {
        let m = SegmentMap::new(StreamKind::External, &[2, 1, 0, 3], vec!["a".into(), "b".into()], vec!["a".into()]).unwrap();
        assert_eq!(m.locate(0), Some((SegmentKind::Region, 0)));
        assert_eq!(m.locate(2), Some((SegmentKind::Knowledge, 0)));
        assert_eq!(m.locate(5), Some((SegmentKind::Caption, 2)));
        assert_eq!(m.locate(6), None);
        assert_eq!(m.category(1), Some("b"));
        assert_eq!(m.category(3), None);
        assert!(SegmentMap::new(StreamKind::External, &[2, 1, 0, 3], vec![], vec![]).is_err());
    }

    #[test]
    fn relation_index_round_trip() {
        let r = RelationIndex::new(["a", "b", "a"]);
        assert_eq!(r.labels(), ["a", "b"]);
        assert_eq!(RelationIndex::from_text(&r.to_text()), r);
        assert_eq!(r.get("zzz"), 2);
    }

    proptest::proptest! {
        #[test]
        fn segment_maps_partition_rows(lengths in proptest::collection::vec(0usize..6, 4)) {
            let m = SegmentMap::new(
                StreamKind::External,
                &lengths,
                vec!["c".into(); lengths[0]],
                vec!["c".into(); lengths[1]],
            ).unwrap();
            let total: usize = lengths.iter().sum();
            proptest::prop_assert_eq!(m.total_len(), total);
            let mut next = 0;
            for s in m.segments() {
                proptest::prop_assert_eq!(s.start, next);
                next += s.len;
            }
            for row in 0..total {
                proptest::prop_assert!(m.locate(row).is_some());
            }
        }
    }
}
