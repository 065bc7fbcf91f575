use compvid::datagen::{generate_dataset, generate_sequence, DatasetParams};
use compvid::evalkit::{evaluate, nn_baseline};
use compvid::training::load_checkpoint;
use compvid::{DatasetManifest, EvalOptions, FrameMetrics, ModelConfig, RunDir, VideoSequence};
use proptest::prelude::*;

fn params() -> DatasetParams {
    DatasetParams {
        n_train: 3,
        n_val: 1,
        n_test: 2,
        horizon: 3,
        canvas: 32,
        test_blocks: vec![3, 4],
        ..DatasetParams::default()
    }
}

#[test]
fn generate_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&dir.path().join("data"), &params()).unwrap();
    let reloaded = DatasetManifest::load(&dir.path().join("data")).unwrap();
    reloaded.validate().unwrap();
    assert_eq!(reloaded.split_paths("test").unwrap(), manifest.split_paths("test").unwrap());

    let cfg = ModelConfig {
        steps: 4,
        checkpoint_every: 2,
        ..ModelConfig::small()
    };
    let run = RunDir::new(dir.path().join("run"));
    let ckpt = compvid::train(&cfg, &reloaded, &run).unwrap();
    let (model, state) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(state.step, 4);
    assert_eq!(model.config, cfg);

    // The test split mixes entity counts; the factorized model handles both.
    let test = reloaded.load_split("test").unwrap();
    assert_eq!(test.iter().map(|s| s.n_entities).collect::<Vec<_>>(), vec![3, 4]);
    let opts = EvalOptions {
        k: 4,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &test, &opts, &FrameMetrics::new()).unwrap();
    assert_eq!(report.results.len(), 2);
    assert!(report.results.iter().all(|r| r.is_finite() && r.steps() == 3));
    let out = dir.path().join("eval");
    report.write(&out).unwrap();
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3 + 1);

    let query = test[0].frame_chw::<f32>(0);
    let nearest = nn_baseline(&model, &query, &reloaded).unwrap();
    assert!(reloaded.load_split("train").unwrap().contains(&nearest));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn sequences_round_trip_through_files(seed in 0u64..1_000_000, n in 1usize..6, horizon in 1usize..6) {
        let seq = generate_sequence(seed, n, horizon, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.safetensors");
        seq.save(&path).unwrap();
        let back = VideoSequence::load(&path).unwrap();
        prop_assert_eq!(&back, &seq);
        prop_assert_eq!(back.centers.len(), (horizon + 1) * n * 2);
        prop_assert!(seq.centers.iter().all(|c| c.is_finite()));
    }
}
