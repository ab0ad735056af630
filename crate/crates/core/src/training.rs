//! Teacher-forced training of [`TextKGModel`] and the finite-difference
//! gradient checker.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClipRecord;
use crate::embeddings::{EmbeddingTable, EOS, PAD};
use crate::error::{Error, Result};
use crate::kg::{merge_graphs, select_clip_knowledge, KgSource, KnowledgeGraph};
use crate::model::{ClipFeatures, TextKGModel};
use crate::numeric::graph::BackwardFault;
use crate::numeric::{adam_step, AdamState, Graph, LrSchedule, Var};
use crate::tokens::{top_regions_per_frame, ModalityConfig};

pub const TRAIN_LOG_FILE: &str = "train_log.tsv";

/// Input switches; everything on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSwitches {
    pub use_video: bool,
    pub use_regions: bool,
    pub use_text: bool,
    pub use_general_kg: bool,
    pub use_specific_kg: bool,
    pub use_knowledge_selection: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            use_video: true,
            use_regions: true,
            use_text: true,
            use_general_kg: true,
            use_specific_kg: true,
            use_knowledge_selection: true,
        }
    }
}

impl AblationSwitches {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_video || self.use_regions || self.use_text || self.use_general_kg || self.use_specific_kg) {
            return Err(Error::Config("every input modality is disabled".into()));
        }
        Ok(())
    }

    pub fn uses_knowledge(&self) -> bool {
        self.use_general_kg || self.use_specific_kg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_ext: f64,
    pub lambda_int: f64,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Clips per optimizer step (gradients are accumulated).
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: AblationSwitches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_ext: 0.5,
            lambda_int: 0.5,
            base_lr: 1e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            batch_size: 6,
            epochs: 10,
            seed: 0,
            ablation: AblationSwitches::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ext >= 0.0 && self.lambda_int >= 0.0 && self.lambda_ext + self.lambda_int > 0.0) {
            return Err(Error::Config("loss weights must be non-negative with a positive sum".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be >= 0".into()));
        }
        self.ablation.validate()
    }

    pub fn steps_per_epoch(&self, examples: usize) -> u64 {
        examples.div_ceil(self.batch_size) as u64
    }
}

/// One caption of one clip, ready for teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub features: ClipFeatures,
    pub caption: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-example loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// `(step, lr)` of every optimizer update.
    pub lr_trace: Vec<(u64, f64)>,
    pub steps: u64,
    pub wall_time: Duration,
    pub checkpoint: Option<PathBuf>,
}

/// The knowledge graph the enabled sources contribute.
pub fn knowledge_graph_for(
    general: Option<&KnowledgeGraph>,
    specific: Option<&KnowledgeGraph>,
    switches: &AblationSwitches,
) -> KnowledgeGraph {
    merge_graphs(
        general.filter(|_| switches.use_general_kg),
        specific.filter(|_| switches.use_specific_kg),
    )
}

/// Empties the segments of disabled modalities.
pub fn apply_ablation(clip: &ClipFeatures, switches: &AblationSwitches) -> Result<ClipFeatures> {
    switches.validate()?;
    let mut out = clip.clone();
    if !switches.use_video {
        out.appearance = out.appearance.slice_rows(0, 0);
        out.motion = out.motion.slice_rows(0, 0);
    }
    if !switches.use_regions {
        out.region_features = out.region_features.slice_rows(0, 0);
        out.region_categories.clear();
        out.region_frames.clear();
    }
    if !switches.use_text {
        out.transcript.clear();
    }
    out.knowledge.retain(|k| match k.triple.source {
        KgSource::General => switches.use_general_kg,
        KgSource::Specific => switches.use_specific_kg,
    });
    Ok(out)
}

/// Retrieves knowledge for a loaded clip and applies the ablation switches.
///
/// Retrieval keys are the categories of the detections the model keeps
/// (top `n_r` per frame), and ranking uses the clip transcript.
pub fn prepare_clip(
    record: &ClipRecord,
    kg: &KnowledgeGraph,
    table: &EmbeddingTable,
    cfg: &ModalityConfig,
    switches: &AblationSwitches,
) -> Result<ClipFeatures> {
    let kept = top_regions_per_frame(&record.region_frames, cfg.n_r);
    let categories: Vec<&str> = kept.iter().map(|&i| record.region_categories[i].as_str()).collect();
    let transcript: Vec<&str> = record.transcript.iter().map(String::as_str).collect();
    let knowledge = if switches.uses_knowledge() {
        select_clip_knowledge(kg, &categories, &transcript, table, cfg.n_k, switches.use_knowledge_selection)?
    } else {
        Vec::new()
    };
    let features = ClipFeatures {
        appearance: record.appearance.clone(),
        motion: record.motion.clone(),
        region_features: record.region_features.clone(),
        region_categories: record.region_categories.clone(),
        region_frames: record.region_frames.clone(),
        transcript: record.transcript.clone(),
        knowledge,
    };
    apply_ablation(&features, switches)
}

/// One example per reference caption.
pub fn training_examples(
    records: &[ClipRecord],
    kg: &KnowledgeGraph,
    table: &EmbeddingTable,
    cfg: &ModalityConfig,
    switches: &AblationSwitches,
) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for r in records {
        let features = prepare_clip(r, kg, table, cfg, switches)?;
        for (i, caption) in r.captions.iter().enumerate() {
            out.push(TrainingExample {
                id: format!("{}/{}#{i}", r.video_id, r.clip_id),
                features: features.clone(),
                caption: caption.clone(),
            });
        }
    }
    Ok(out)
}

/// `-Σ_i (λ_ext ln z_ext[i, t_i] + λ_int ln z_int[i, t_i])` over non-PAD targets.
pub fn two_stream_loss(
    g: &mut Graph,
    z_ext: Var,
    z_int: Var,
    targets: &[usize],
    lambda_ext: f64,
    lambda_int: f64,
) -> Result<Var> {
    for z in [z_ext, z_int] {
        if g.rows(z) != targets.len() {
            return Err(Error::Shape(format!(
                "{} targets for {} caption rows",
                targets.len(),
                g.rows(z)
            )));
        }
    }
    let keep: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != PAD).collect();
    let (z_ext, z_int, targets) = if keep.len() == targets.len() {
        (z_ext, z_int, targets.to_vec())
    } else {
        (
            g.gather_rows(z_ext, &keep)?,
            g.gather_rows(z_int, &keep)?,
            keep.iter().map(|&i| targets[i]).collect(),
        )
    };
    let a = g.weighted_nll(z_ext, &targets, lambda_ext)?;
    let b = g.weighted_nll(z_int, &targets, lambda_int)?;
    g.add(a, b)
}

/// Caption input words (after BOS) and next-word targets ending in EOS.
pub fn teacher_forcing(model: &TextKGModel, caption: &[String]) -> (Vec<String>, Vec<usize>) {
    let words = &caption[..caption.len().min(model.config.max_caption)];
    let mut targets: Vec<usize> = words.iter().map(|w| model.vocab.index(w)).collect();
    targets.push(EOS);
    (words.to_vec(), targets)
}

/// Builds the forward pass and loss of one example in `g`.
pub fn example_loss(
    g: &mut Graph,
    model: &TextKGModel,
    example: &TrainingExample,
    table: &EmbeddingTable,
    lambda_ext: f64,
    lambda_int: f64,
) -> Result<Var> {
    let (inputs, targets) = teacher_forcing(model, &example.caption);
    let (out, _, _) = model.forward_clip(g, &example.features, table, &inputs)?;
    two_stream_loss(g, out.z_ext, out.z_int, &targets, lambda_ext, lambda_int)
}

/// Trains `model` in place. With `out_dir` set, writes the checkpoint and a
/// `epoch\tloss\tlr` log there.
pub fn train(
    model: &mut TextKGModel,
    examples: &[TrainingExample],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut report = TrainReport::default();
    let total = cfg.steps_per_epoch(examples.len()) * cfg.epochs as u64;
    if cfg.epochs > 0 && examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let mut log = String::new();
    if total > 0 {
        let schedule = LrSchedule::with_warmup(cfg.base_lr, total, cfg.warmup_fraction)?;
        let mut adam = AdamState::with_hyper(&model.store, 0.9, 0.999, 1e-8, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut lr = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                model.store.zero_grad();
                for &i in batch {
                    let ex = &examples[i];
                    let mut g = Graph::new();
                    let loss = example_loss(&mut g, model, ex, table, cfg.lambda_ext, cfg.lambda_int)
                        .map_err(|e| match e {
                            Error::NonFinite(m) => Error::NonFinite(format!("{m} on clip {}", ex.id)),
                            other => other,
                        })?;
                    let value = g.value(loss).item();
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!("loss {value} on clip {}", ex.id)));
                    }
                    epoch_loss += value;
                    g.backward(loss, &mut model.store)?;
                }
                lr = schedule.lr_at(adam.step)?;
                report.lr_trace.push((adam.step, lr));
                adam_step(&mut model.store, &mut adam, lr)?;
            }
            let mean = epoch_loss / examples.len() as f64;
            report.epoch_losses.push(mean);
            log.push_str(&format!("{}\t{mean}\t{lr}\n", epoch + 1));
        }
        report.steps = adam.step;
    }
    if let Some(dir) = out_dir {
        model.save(dir)?;
        let p = dir.join(TRAIN_LOG_FILE);
        let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        f.write_all(log.as_bytes()).map_err(|e| Error::io(&p, e))?;
        report.checkpoint = Some(dir.join(crate::model::CHECKPOINT_FILE));
    }
    report.wall_time = started.elapsed();
    Ok(report)
}

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckGroup {
    pub name: String,
    pub values: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!("{}\t{}\t{:.3e}\n", g.name, g.values, g.max_rel_error));
        }
        s.push_str(&format!(
            "max\t{:.3e}\t{}\n",
            self.max_rel_error(),
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares backprop gradients of the example loss with central finite
/// differences for every value of every parameter.
pub fn grad_check(
    model: &mut TextKGModel,
    example: &TrainingExample,
    table: &EmbeddingTable,
    lambdas: (f64, f64),
    step: f64,
    tolerance: f64,
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport> {
    let loss_at = |model: &TextKGModel| -> Result<f64> {
        let mut g = Graph::new();
        let l = example_loss(&mut g, model, example, table, lambdas.0, lambdas.1)?;
        Ok(g.value(l).item())
    };
    model.store.zero_grad();
    let mut g = Graph::new();
    g.set_backward_fault(fault);
    let loss = example_loss(&mut g, model, example, table, lambdas.0, lambdas.1)?;
    g.backward(loss, &mut model.store)?;

    let ids: Vec<_> = model.store.ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.store.get(id).value.len();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let orig = model.store.get(id).value.data()[j];
            model.store.get_mut(id).value.data_mut()[j] = orig + step;
            let up = loss_at(model)?;
            model.store.get_mut(id).value.data_mut()[j] = orig - step;
            let down = loss_at(model)?;
            model.store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = model.store.get(id).grad.data()[j];
            worst = worst.max(relative_error(analytic, numeric));
        }
        let p = model.store.get(id);
        groups.push(GradCheckGroup {
            name: p.name.clone(),
            values: n,
            max_rel_error: worst,
        });
    }
    model.store.zero_grad();
    Ok(GradCheckReport { groups, tolerance })
}
