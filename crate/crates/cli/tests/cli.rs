use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compvid::training::{load_checkpoint, save_checkpoint};

const SMALL: &str = "\
canvas = 32
horizon = 3
latent_dim = 4
appearance_dim = 8
crop_extent = 10
patch_size = 8
feature_channels = 8
refine_width = 8
refine_units = 2
predictor_hidden = 16
predictor_blocks = 2
decoder_width = 8
batch_size = 2
steps = 6
checkpoint_every = 3
";

fn compvid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compvid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = compvid(&[
        "generate", "--out", s(&data), "--train", "4", "--val", "1", "--test", "2", "--blocks", "3", "--horizon", "3",
        "--canvas", "32", "--seed", "0",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn train(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = dir.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let run = dir.join(name);
    let mut args = vec!["train", "--data", s(data), "--out", s(&run), "--config", s(&cfg)];
    args.extend_from_slice(extra);
    let out = compvid(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    run
}

fn test_sequence(data: &Path) -> PathBuf {
    let mut files: Vec<PathBuf> = std::fs::read_dir(data.join("test")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.remove(0)
}

#[test]
fn generate_is_deterministic_and_requires_out() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path());
    let out = compvid(&["generate", "--out", s(&dir.path().join("again")), "--train", "4", "--val", "1", "--test", "2", "--horizon", "3", "--canvas", "32"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).trim().ends_with("manifest.txt"));
    for split in ["train", "val", "test"] {
        let mut names: Vec<_> = std::fs::read_dir(a.join(split)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            let x = std::fs::read(a.join(split).join(&n)).unwrap();
            let y = std::fs::read(dir.path().join("again").join(split).join(&n)).unwrap();
            assert_eq!(x, y, "{split}/{n:?} differs");
        }
    }

    let missing = compvid(&["generate", "--train", "2"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));
}

#[test]
fn pipeline_train_eval_sample_plot_masks() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let run = train(dir.path(), &data, "run", &["--set", "seed=3"]);
    let ckpt = run.join("checkpoints/final.ckpt");
    for f in ["config.txt", "logs/metrics.csv", "checkpoints/step_000003.ckpt", "run_train.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(std::fs::read_to_string(run.join("logs/metrics.csv")).unwrap().lines().count(), 7);

    let out = compvid(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--k", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(run.join("eval/summary.csv")).unwrap();
    assert!(summary.starts_with("timestep,loc_best,loc_mean,loc_sigma,frame_best,frame_mean,top5_mean,top5_sigma"));
    assert!(run.join("eval/seq_0001.csv").exists());
    let again = dir.path().join("eval2");
    let out = compvid(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--k", "7", "--out", s(&again)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(again.join("summary.csv")).unwrap(), summary);

    let seq = test_sequence(&data);
    let out = compvid(&["sample", "--ckpt", s(&ckpt), "--seq", s(&seq), "--k", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let samples = run.join("samples").join(seq.file_stem().unwrap());
    for k in 0..5 {
        assert!(samples.join(format!("overlay_{k:03}.png")).exists());
    }
    assert!(samples.join("grid.png").exists());
    // Every sampled trajectory is different under the stochastic latent.
    let centers = std::fs::read_to_string(samples.join("centers.csv")).unwrap();
    let mut finals: Vec<String> = centers
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some("3"))
        .map(|l| l.split(',').skip(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(finals.len(), 5 * 3);
    finals.sort();
    finals.dedup();
    assert_eq!(finals.len(), 15);

    let figs = dir.path().join("fig");
    let out = compvid(&["plot", "--metrics", s(&run.join("logs/metrics.csv")), "--out", s(&figs)]);
    assert_eq!(out.status.code(), Some(0));
    for m in ["l_pred_frame", "l_pred_loc", "l_dec", "l_enc", "total"] {
        assert!(figs.join(format!("{m}.png")).exists(), "no figure for {m}");
    }
    let img = image::open(figs.join("total.png")).unwrap();
    assert_eq!((img.width(), img.height()), (640, 400));

    let out = compvid(&["masks", "--ckpt", s(&ckpt), "--seq", s(&seq)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("figures").join(format!("masks_{}.png", seq.file_stem().unwrap().to_str().unwrap())).exists());
}

#[test]
fn config_precedence_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let a = train(dir.path(), &data, "a", &["--steps", "4", "--set", "refine_units=3"]);
    let cfg = std::fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(cfg.contains("steps = 4"), "{cfg}");
    assert!(cfg.contains("refine_units = 3"));
    assert!(cfg.contains("canvas = 32"));
    assert_eq!(std::fs::read_to_string(a.join("logs/metrics.csv")).unwrap().lines().count(), 5);

    // Retraining from the recorded config reproduces the checkpoint bit for bit.
    let b = dir.path().join("b");
    let out = compvid(&["train", "--data", s(&data), "--out", s(&b), "--config", s(&a.join("config.txt"))]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read(a.join("checkpoints/final.ckpt")).unwrap(),
        std::fs::read(b.join("checkpoints/final.ckpt")).unwrap()
    );
}

#[test]
fn usage_and_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let missing = compvid(&["eval", "--ckpt", s(&dir.path().join("none.ckpt")), "--data", s(&data)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("checkpoint"));

    let bad_key = compvid(&["train", "--data", s(&data), "--out", s(&dir.path().join("x")), "--set", "bogus=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_pair = compvid(&["train", "--data", s(&data), "--out", s(&dir.path().join("x")), "--set", "steps"]);
    assert_eq!(bad_pair.status.code(), Some(2));
    let no_data = compvid(&["train", "--data", s(&dir.path().join("nothing")), "--out", s(&dir.path().join("x"))]);
    assert_eq!(no_data.status.code(), Some(2));
    let no_csv = compvid(&["plot", "--metrics", s(&dir.path().join("m.csv")), "--out", s(dir.path())]);
    assert_eq!(no_csv.status.code(), Some(2));

    let run = train(dir.path(), &data, "run", &["--steps", "1"]);
    let ckpt = run.join("checkpoints/final.ckpt");
    let unknown = compvid(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--k", "2", "--metric", "lpips"]);
    assert_eq!(unknown.status.code(), Some(2));

    // A poisoned parameter makes evaluation fail at run time with a diagnostic.
    let (mut model, state) = load_checkpoint(&ckpt).unwrap();
    let id = model.params.find("predictor.head_b.b").unwrap();
    model.params.get_mut(id).data_mut()[0] = f32::NAN;
    let poisoned = dir.path().join("nan.ckpt");
    save_checkpoint(&poisoned, &model, &state).unwrap();
    let nan = compvid(&["eval", "--ckpt", s(&poisoned), "--data", s(&data), "--k", "2"]);
    assert_eq!(nan.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&nan.stderr).contains("non-finite"));
}

#[test]
fn help_lists_every_command() {
    let out = compvid(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for c in ["generate", "train", "eval", "sample", "plot", "masks"] {
        assert!(text.contains(c), "help lacks {c}");
    }
}
