//! The operations behind each CLI subcommand.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{ClipRecord, Dataset, DatasetManifest};
use crate::embeddings::{load_word_vectors, EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::kg::{
    build_specific_kg, load_general_kg, load_pos_lexicon, merge_graphs, split_sentences, KgSource, KnowledgeGraph,
    KnowledgeItem, KnowledgeTriple,
};
use crate::metrics::{evaluate, EvalClip, EvalMode, EvalReport, Predictions};
use crate::model::{ClipFeatures, TextKGModel};
use crate::numeric::graph::BackwardFault;
use crate::numeric::Tensor;
use crate::synth::{generate, SynthCorpus, SynthParams};
use crate::tokens::{ModalityConfig, RelationIndex};
use crate::training::{
    grad_check, knowledge_graph_for, prepare_clip, train, training_examples, AblationSwitches, GradCheckReport,
    TrainReport, TrainingExample,
};

pub const KG_FILE: &str = "kg.tsv";
pub const KG_STATS_FILE: &str = "kg_stats.tsv";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const RUN_CONFIG_FILE: &str = "run.toml";

/// Central-difference step of the gradient check.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
pub const GRAD_CHECK_MAX_D_MODEL: usize = 32;

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// General and mined triples, each present only when its switch is on.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeSources {
    pub general: Option<KnowledgeGraph>,
    pub specific: Option<KnowledgeGraph>,
}

impl KnowledgeSources {
    pub fn load(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Self> {
        let sw = &cfg.train.ablation;
        let general = match (&cfg.paths.general_kg, sw.use_general_kg) {
            (Some(p), true) => Some(load_general_kg(&cfg.resolve(p))?.0),
            _ => None,
        };
        let specific = if sw.use_specific_kg {
            let lex = cfg.paths.pos_lexicon.as_deref().ok_or_else(|| {
                Error::Config("paths.pos_lexicon is required to mine specific knowledge (or pass --no-specific-kg)".into())
            })?;
            let lexicon = load_pos_lexicon(&cfg.resolve(lex))?;
            let sentences: Vec<Vec<String>> = manifest.clips().flat_map(|(_, c)| split_sentences(&c.transcript)).collect();
            Some(build_specific_kg(&sentences, &lexicon))
        } else {
            None
        };
        Ok(KnowledgeSources { general, specific })
    }

    pub fn merged(&self, switches: &AblationSwitches) -> KnowledgeGraph {
        knowledge_graph_for(self.general.as_ref(), self.specific.as_ref(), switches)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KgStats {
    pub general: usize,
    pub specific: usize,
    pub merged: usize,
    pub relations: usize,
}

impl KgStats {
    pub fn to_text(&self) -> String {
        format!(
            "general\t{}\nspecific\t{}\nmerged\t{}\nrelations\t{}\n",
            self.general, self.specific, self.merged, self.relations
        )
    }
}

/// Mines the specific graph, merges it with the general one and writes
/// `kg.tsv` and `kg_stats.tsv` to the output directory.
pub fn cmd_build_kg(cfg: &RunConfig) -> Result<(KnowledgeGraph, KgStats)> {
    let ds = Dataset::load(&cfg.manifest_path()?)?;
    let has_text = ds.manifest.clips().any(|(_, c)| !c.transcript.is_empty());
    let sources = KnowledgeSources::load(cfg, &ds.manifest)?;
    if sources.general.is_none() && !has_text {
        return Err(Error::Data(
            "nothing to build from: no transcripts and no general knowledge graph".into(),
        ));
    }
    let kg = merge_graphs(sources.general.as_ref(), sources.specific.as_ref());
    let stats = KgStats {
        general: sources.general.as_ref().map_or(0, KnowledgeGraph::len),
        specific: sources.specific.as_ref().map_or(0, KnowledgeGraph::len),
        merged: kg.len(),
        relations: kg.relation_set().len(),
    };
    let out = cfg.out_dir();
    write_file(&out.join(KG_FILE), &kg.to_tsv())?;
    write_file(&out.join(KG_STATS_FILE), &stats.to_text())?;
    Ok((kg, stats))
}

/// A manifest with its clips, word vectors and knowledge loaded.
pub struct LoadedCorpus {
    pub dataset: Dataset,
    pub records: Vec<ClipRecord>,
    pub table: EmbeddingTable,
    pub kg: KnowledgeGraph,
}

pub fn load_corpus(cfg: &RunConfig, manifest: &Path, modality: &ModalityConfig) -> Result<LoadedCorpus> {
    let dataset = Dataset::load(manifest)?;
    let records = dataset.load_all((modality.appearance_dim, modality.motion_dim, modality.region_dim))?;
    let vectors = cfg
        .paths
        .word_vectors
        .as_deref()
        .ok_or_else(|| Error::Config("paths.word_vectors is not set".into()))?;
    let (table, _) = load_word_vectors(&cfg.resolve(vectors), modality.word_dim)?;
    let kg = KnowledgeSources::load(cfg, &dataset.manifest)?.merged(&cfg.train.ablation);
    Ok(LoadedCorpus {
        dataset,
        records,
        table,
        kg,
    })
}

/// Output vocabulary: every caption and transcript word of the corpus.
pub fn corpus_vocabulary(records: &[ClipRecord]) -> Vocabulary {
    let sentences = records
        .iter()
        .flat_map(|r| r.captions.iter().chain(std::iter::once(&r.transcript)))
        .map(Vec::as_slice);
    Vocabulary::build(sentences, 1)
}

/// Trains a fresh model and writes it, its log and the effective config to
/// the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<(TextKGModel, TrainReport)> {
    cfg.validate()?;
    let corpus = load_corpus(cfg, &cfg.manifest_path()?, &cfg.modality)?;
    let examples = training_examples(&corpus.records, &corpus.kg, &corpus.table, &cfg.modality, &cfg.train.ablation)?;
    let mut model = TextKGModel::new(
        cfg.modality.clone(),
        corpus_vocabulary(&corpus.records),
        RelationIndex::new(corpus.kg.relation_set().iter().cloned()),
        cfg.fusion,
        cfg.train.seed,
    )?;
    let out = cfg.out_dir();
    let report = train(&mut model, &examples, &corpus.table, &cfg.train, Some(&out))?;
    write_file(&out.join(RUN_CONFIG_FILE), &cfg.to_toml())?;
    Ok((model, report))
}

pub fn format_prediction(video_id: &str, clip_id: &str, words: &[String]) -> String {
    format!("{video_id}\t{clip_id}\t{}\n", words.join(" "))
}

/// Greedy captions for every clip of `manifest`, one
/// `video_id\tclip_id\twords` line each, in manifest order.
pub fn cmd_caption(cfg: &RunConfig, checkpoint_dir: &Path, manifest: &Path) -> Result<(PathBuf, String)> {
    let mut model = TextKGModel::load(checkpoint_dir)?;
    cfg.fusion.validate()?;
    model.fusion = cfg.fusion;
    let corpus = load_corpus(cfg, manifest, &model.config)?;
    let mut text = String::new();
    for r in &corpus.records {
        let clip = prepare_clip(r, &corpus.kg, &corpus.table, &model.config, &cfg.train.ablation)?;
        let words = model.decode_words(&clip, &corpus.table)?;
        text.push_str(&format_prediction(&r.video_id, &r.clip_id, &words));
    }
    let path = cfg.out_dir().join(PREDICTIONS_FILE);
    write_file(&path, &text)?;
    Ok((path, text))
}

pub fn parse_predictions(text: &str, origin: &Path) -> Result<Predictions> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(v), Some(c)) = (parts.next(), parts.next()) else {
            return Err(Error::parse(origin, i + 1, "expected video_id<TAB>clip_id<TAB>caption"));
        };
        let caption = parts.next().unwrap_or("").to_string();
        if out.insert((v.to_string(), c.to_string()), caption).is_some() {
            return Err(Error::parse(origin, i + 1, format!("duplicate prediction for {v}/{c}")));
        }
    }
    Ok(out)
}

pub fn eval_clips(manifest: &DatasetManifest) -> Vec<EvalClip> {
    manifest
        .clips()
        .map(|(v, c)| EvalClip {
            video_id: v.to_string(),
            clip_id: c.clip_id.clone(),
            references: c.captions.iter().map(|w| w.join(" ")).collect(),
        })
        .collect()
}

/// Scores a predictions file and writes `eval_<mode>.txt` (table) and
/// `eval_<mode>.tsv` (`metric\tmode\tvalue`) to `out_dir`.
pub fn cmd_evaluate(predictions: &Path, manifest: &Path, mode: EvalMode, out_dir: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(predictions).map_err(|e| Error::io(predictions, e))?;
    let preds = parse_predictions(&text, predictions)?;
    let ds = Dataset::load(manifest)?;
    let report = evaluate(mode, &preds, &eval_clips(&ds.manifest))?;
    write_file(&out_dir.join(format!("eval_{mode}.txt")), &report.to_table())?;
    write_file(&out_dir.join(format!("eval_{mode}.tsv")), &report.to_lines())?;
    Ok(report)
}

pub fn cmd_gen_synthetic(params: &SynthParams, out_dir: &Path) -> Result<SynthCorpus> {
    let corpus = generate(params)?;
    corpus.write(out_dir)?;
    Ok(corpus)
}

/// Fraction of clips whose caption word at `position` is the fused argmax
/// given the true caption prefix before it.
pub fn attribute_probe(
    model: &TextKGModel,
    records: &[ClipRecord],
    kg: &KnowledgeGraph,
    table: &EmbeddingTable,
    switches: &AblationSwitches,
    position: usize,
) -> Result<(usize, usize)> {
    let mut correct = 0;
    let mut total = 0;
    for r in records {
        let clip = prepare_clip(r, kg, table, &model.config, switches)?;
        for caption in r.captions.iter().filter(|c| c.len() > position) {
            let mut g = crate::numeric::Graph::new();
            let (out, _, _) = model.forward_clip(&mut g, &clip, table, &caption[..position])?;
            let last = g.rows(out.z_ext) - 1;
            let (_, y) = crate::model::fuse_and_argmax(
                g.value(out.z_ext).row(last),
                g.value(out.z_int).row(last),
                model.fusion.ext,
                model.fusion.int,
            )?;
            total += 1;
            if y == model.vocab.index(&caption[position]) {
                correct += 1;
            }
        }
    }
    Ok((correct, total))
}

/// A random model and example for the finite-difference check: the given
/// widths, `vocab_size` output words and small position tables.
pub fn grad_check_fixture(
    modality: &ModalityConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<(TextKGModel, TrainingExample, EmbeddingTable)> {
    if vocab_size < 8 {
        return Err(Error::InvalidArgument("grad-check vocabulary needs at least 8 entries".into()));
    }
    let cfg = ModalityConfig {
        max_frames: modality.max_frames.min(3),
        max_knowledge: modality.max_knowledge.min(4),
        max_transcript: modality.max_transcript.min(6),
        max_caption: modality.max_caption.min(4),
        ..modality.clone()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..vocab_size - 4).map(|i| format!("w{i:02}")).collect();
    let vocab = Vocabulary::from_words(words.iter().cloned())?;
    let mut table = EmbeddingTable::new(cfg.word_dim);
    let normal = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    for w in words.iter().map(String::as_str).chain(["apple", "knife", "red", "sharp"]) {
        table.insert(w, normal(cfg.word_dim, &mut rng))?;
    }
    let relations = RelationIndex::new(["has_property", "used_for"]);
    let model = TextKGModel::new(cfg.clone(), vocab, relations, Default::default(), seed)?;

    let frames = cfg.max_frames.min(2);
    let matrix = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Tensor::matrix(rows, cols, normal(rows * cols, rng)).expect("sized")
    };
    let item = |h: &str, r: &str, t: &str, cat: &str, node: &str| KnowledgeItem {
        triple: KnowledgeTriple::new(h, r, t, KgSource::General),
        category: cat.into(),
        node: node.into(),
        score: None,
    };
    let features = ClipFeatures {
        appearance: matrix(frames, cfg.appearance_dim, &mut rng),
        motion: matrix(frames, cfg.motion_dim, &mut rng),
        region_features: matrix(3, cfg.region_dim, &mut rng),
        region_categories: vec!["apple".into(), "knife".into(), "apple".into()],
        region_frames: vec![0, 0, frames - 1],
        transcript: words[..cfg.max_transcript.min(4)].to_vec(),
        knowledge: vec![
            item("apple", "has_property", "red", "apple", "red"),
            item("knife", "has_property", "sharp", "knife", "sharp"),
            item("knife", "used_for", "apple", "knife", "apple"),
        ],
    };
    let caption = words[4..4 + cfg.max_caption.min(3)].to_vec();
    let example = TrainingExample {
        id: "grad-check".into(),
        features,
        caption,
    };
    Ok((model, example, table))
}

/// Finite-difference check of every parameter on a fresh tiny model.
pub fn cmd_grad_check(cfg: &RunConfig, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    if cfg.modality.d_model > GRAD_CHECK_MAX_D_MODEL {
        return Err(Error::Config(format!(
            "grad-check needs d_model <= {GRAD_CHECK_MAX_D_MODEL}, config has {}",
            cfg.modality.d_model
        )));
    }
    let (mut model, example, table) = grad_check_fixture(&cfg.modality, 30, cfg.train.seed)?;
    grad_check(
        &mut model,
        &example,
        &table,
        (cfg.train.lambda_ext, cfg.train.lambda_int),
        GRAD_CHECK_STEP,
        GRAD_CHECK_TOLERANCE,
        fault,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PathsConfig;

    fn tiny_modality() -> ModalityConfig {
        ModalityConfig {
            d_model: 8,
            heads: 2,
            appearance_dim: 3,
            motion_dim: 2,
            region_dim: 4,
            word_dim: 5,
            ..ModalityConfig::default()
        }
    }

    #[test]
    fn prediction_lines_round_trip() {
        let line = format_prediction("v1", "c2", &["cut".into(), "it".into()]);
        assert_eq!(line, "v1\tc2\tcut it\n");
        let p = parse_predictions(&(line + "v1\tc3\t\n"), Path::new("p")).unwrap();
        assert_eq!(p[&("v1".into(), "c2".into())], "cut it");
        assert_eq!(p[&("v1".into(), "c3".into())], "");
        assert!(parse_predictions("v1\tc2\ta\nv1\tc2\tb\n", Path::new("p")).is_err());
        assert!(parse_predictions("oops\n", Path::new("p")).is_err());
    }

    #[test]
    fn fixture_has_thirty_word_vocabulary() {
        let (m, ex, _) = grad_check_fixture(&tiny_modality(), 30, 1).unwrap();
        assert_eq!(m.vocab.len(), 30);
        assert!(ex.caption.len() <= m.config.max_caption);
    }

    #[test]
    fn grad_check_command_passes_and_lists_each_group_once() {
        let cfg = RunConfig {
            modality: tiny_modality(),
            ..RunConfig::default()
        };
        let r = cmd_grad_check(&cfg, None).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        let mut names: Vec<_> = r.groups.iter().map(|g| g.name.clone()).collect();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
        let fixture = grad_check_fixture(&cfg.modality, 30, 0).unwrap().0;
        assert_eq!(n, fixture.store.len());
    }

    #[test]
    fn grad_check_rejects_wide_models() {
        assert!(cmd_grad_check(&RunConfig::default(), None).is_err());
    }

    #[test]
    fn build_kg_requires_some_source() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.json"), "{\"videos\": []}").unwrap();
        let mut cfg = RunConfig {
            paths: PathsConfig {
                manifest: Some("m.json".into()),
                ..PathsConfig::default()
            },
            base_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let err = cmd_build_kg(&cfg).unwrap_err().to_string();
        assert!(err.contains("pos_lexicon"), "{err}");
        cfg.train.ablation.use_specific_kg = false;
        let err = cmd_build_kg(&cfg).unwrap_err().to_string();
        assert!(err.contains("nothing to build"), "{err}");
    }
}
