use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn specvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specvae")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
    v.sort();
    v.into_iter().map(|f| (f.file_name().unwrap().into(), fs::read(&f).unwrap())).collect()
}

const SMALL: &[&str] = &["--classes", "tone,chirp", "--n", "2", "--dims", "32x32"];

#[test]
fn synth_is_deterministic_and_validates_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = specvae(&[&["synth", "--seed", "1", "--out", p(dir)], SMALL].concat());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    assert_eq!(fa.iter().filter(|f| f.0.extension().is_some_and(|e| e == "spec")).count(), 2 * 2 * 5);
    let resolved = fs::read_to_string(a.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("command = \"synth\"") && resolved.contains("32x32"), "{resolved}");

    let o = specvae(&["synth", "--dims", "4x4", "--out", p(&tmp.path().join("c"))]);
    assert_eq!(code(&o), 2);
    let o = specvae(&["synth", "--classes", "laser", "--out", p(&tmp.path().join("c"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlatent = 3\n").unwrap();
    let o = specvae(&["train", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("latent"));
    let o = specvae(&["train", "--latent-dim", "0", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 2);
    fs::write(&cfg, "[bench]\nlatent_dims = []\n").unwrap();
    let o = specvae(&["bench", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(code(&o), 2);
    let o = specvae(&["compress", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 2, "missing model path");
}

#[test]
fn train_compress_augment_traverse_histogram() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&specvae(&[&["synth", "--seed", "2", "--out", p(&data)], SMALL].concat())), 0);

    let run = tmp.path().join("train");
    let o = specvae(&["train", "--data", p(&data), "--latent-dim", "4", "--epochs", "2", "--batch-size", "8", "--seed", "3", "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert!(loss.starts_with("epoch,recon,kl,tc,total,disc"));
    let ckpt = run.join("model.ckpt");
    assert!(fs::read(&ckpt).unwrap().starts_with(b"VCKP"));

    let again = tmp.path().join("train2");
    specvae(&["train", "--data", p(&data), "--latent-dim", "4", "--epochs", "2", "--batch-size", "8", "--seed", "3", "--out", p(&again)]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
    assert_eq!(loss, fs::read_to_string(again.join("loss.csv")).unwrap());

    let comp = tmp.path().join("comp");
    let o = specvae(&["compress", "--model", p(&ckpt), "--data", p(&data), "--mode", "mu_concat_sigma", "--out", p(&comp)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stream = fs::read(comp.join("codes.latc")).unwrap();
    assert_eq!(stream.len(), 20 * (20 + 4 * 8));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(comp.join("compress_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["compression_rate"], 128.0);

    let aug = tmp.path().join("aug");
    let o = specvae(&["augment", "--model", p(&ckpt), "--data", p(&data), "--lo", "-20", "--hi", "-5", "--steps", "3", "--out", p(&aug)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let index = fs::read_to_string(aug.join("augmented/index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 2 * 2 * 3);
    assert!(aug.join("interpolation.svg").exists());
    let o = specvae(&["augment", "--model", p(&ckpt), "--data", p(&data), "--lo", "-19", "--hi", "-5", "--out", p(&aug)]);
    assert_eq!(code(&o), 4, "missing endpoint bin");

    let tr = tmp.path().join("trav");
    let o = specvae(&["traverse", "--model", p(&ckpt), "--data", p(&data), "--dim", "1", "--steps", "3", "--out", p(&tr)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tr.join("traverse_dim001.svg").exists());
    assert_eq!(fs::read_to_string(tr.join("sensitivity.csv")).unwrap().lines().count(), 5);

    let h = tmp.path().join("hist");
    let o = specvae(&["histogram", "--data", p(&data), "--index", "3", "--out", p(&h)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let inr: serde_json::Value = serde_json::from_slice(&fs::read(h.join("inr.json")).unwrap()).unwrap();
    assert!(inr["delta"].as_f64().unwrap() > 0.0);
    assert!(h.join("inr.svg").exists() && h.join("inr.csv").exists());
}

#[test]
fn bench_reports_partial_failure_with_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bench.toml");
    fs::write(
        &cfg,
        r#"
seed = 5
[bench]
latent_dims = [2]
n_layers = [1, 4]
hidden_widths = [8]
repetitions = 1
timing_reps = 1
[bench.dataset]
dims = "32x32"
n_per_class = 5
class_set = ["tone", "chirp"]
[bench.vae]
epochs = 1
batch_size = 8
[bench.dense]
epochs = 2
[bench.cnn]
epochs = 1
"#,
    )
    .unwrap();
    let out = tmp.path().join("bench");
    let o = specvae(&["bench", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().contains(",512,"), "{csv}");
    assert!(csv.lines().nth(2).unwrap().contains("n_layers"), "{csv}");
    for f in ["sweep.json", "timing.json", "sweep_accuracy.svg", "compression_rate.svg", "resolved_config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
}
