use std::fs;

use textkg::commands::{cmd_build_kg, cmd_caption, cmd_evaluate, cmd_gen_synthetic, cmd_train, KG_FILE, PREDICTIONS_FILE};
use textkg::config::RunConfig;
use textkg::data::Dataset;
use textkg::metrics::EvalMode;
use textkg::model::TextKGModel;
use textkg::synth::{SynthParams, CONFIG_FILE, HELDOUT_FILE, MANIFEST_FILE};

fn small_config(dir: &std::path::Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::load(&dir.join(CONFIG_FILE)).unwrap();
    cfg.train.epochs = epochs;
    cfg.modality.d_model = 16;
    cfg.modality.heads = 2;
    cfg
}

#[test]
fn generate_train_caption_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    cmd_gen_synthetic(&SynthParams { seed: 2, ..SynthParams::default() }, tmp.path()).unwrap();
    let cfg = small_config(tmp.path(), 2);

    let (kg, stats) = cmd_build_kg(&cfg).unwrap();
    assert_eq!(stats.merged, kg.len());
    assert!(cfg.out_dir().join(KG_FILE).exists());

    let (model, report) = cmd_train(&cfg).unwrap();
    assert_eq!(report.epoch_losses.len(), 2);
    assert!(report.epoch_losses.iter().all(|l| l.is_finite() && *l > 0.0));
    let reloaded = TextKGModel::load(&cfg.out_dir()).unwrap();
    assert_eq!(reloaded.vocab, model.vocab);

    // captions for the held-out manifest, which the model never saw
    let heldout = tmp.path().join(HELDOUT_FILE);
    let (path, text) = cmd_caption(&cfg, &cfg.out_dir(), &heldout).unwrap();
    assert_eq!(path, cfg.out_dir().join(PREDICTIONS_FILE));
    assert_eq!(text.lines().count(), Dataset::load(&heldout).unwrap().manifest.clip_count());
    for mode in [EvalMode::Micro, EvalMode::Paragraph] {
        let r = cmd_evaluate(&path, &heldout, mode, &cfg.out_dir()).unwrap();
        assert!((0.0..=1.0).contains(&r.bleu4));
        assert!(r.cider >= 0.0);
    }
}

#[test]
fn config_file_round_trip_keeps_run_settings() {
    let tmp = tempfile::tempdir().unwrap();
    cmd_gen_synthetic(&SynthParams::default(), tmp.path()).unwrap();
    let mut cfg = small_config(tmp.path(), 7);
    cfg.train.ablation.use_regions = false;
    let copy = tmp.path().join("copy.toml");
    cfg.save(&copy).unwrap();
    let back = RunConfig::load(&copy).unwrap();
    assert_eq!(back.train, cfg.train);
    assert_eq!(back.modality, cfg.modality);
    assert_eq!(back.manifest_path().unwrap(), tmp.path().join(MANIFEST_FILE));
}

#[test]
fn missing_feature_files_are_all_reported() {
    let tmp = tempfile::tempdir().unwrap();
    cmd_gen_synthetic(&SynthParams::default(), tmp.path()).unwrap();
    let features = tmp.path().join("features");
    let mut removed: Vec<String> = fs::read_dir(&features)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("vid"))
        .take(3)
        .map(|p| {
            fs::remove_file(&p).unwrap();
            p.file_name().unwrap().to_string_lossy().into_owned()
        })
        .collect();
    removed.sort();
    let err = Dataset::load(&tmp.path().join(MANIFEST_FILE)).unwrap_err().to_string();
    for name in &removed {
        assert!(err.contains(name.as_str()), "{name} not in {err}");
    }
}
