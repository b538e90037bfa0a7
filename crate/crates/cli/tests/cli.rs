use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "\
# three speakers, short utterances
toy.speakers = 3
toy.utterances_per_speaker = 4
toy.phonemes_per_utterance = 2,3
toy.duration_frames = 2,3
";

const SMALL: &[&str] = &[
    "--set",
    "arch.channels=8",
    "--set",
    "arch.latent=4",
    "--set",
    "arch.vocoder_channels=4",
    "--set",
    "arch.vocoder_skip=4",
    "--set",
    "arch.vocoder_dilations=1,2,4",
    "--set",
    "stage.train_epochs=2",
    "--set",
    "stage.vocoder_epochs=1",
    "--set",
    "stage.adapt_acoustic_epochs=1",
    "--set",
    "stage.adapt_vocoder_epochs=1",
    "--set",
    "stage.weld_epochs=1",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nautilus"))
        .args(args)
        .env_remove("NAUTILUS_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn prepare(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.txt");
    fs::write(&spec, TOY).unwrap();
    let corpus = dir.join("corpus");
    ok(&[
        "prepare-data",
        "--toy-spec",
        p(&spec),
        "--out",
        p(&corpus),
        "--seed",
        "3",
    ]);
    corpus
}

fn manifest_paths(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .map(|l| l.split_once("  ").unwrap().1.to_string())
        .collect()
}

#[test]
fn usage_errors_exit_with_code_two() {
    assert_eq!(run(&["train", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(&["prepare-data"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn importing_an_empty_corpus_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["prepare-data", "--import", p(dir.path())]);
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn toy_corpora_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = prepare(a.path());
    let cb = prepare(b.path());
    let ma = fs::read_to_string(ca.join("manifest.txt")).unwrap();
    assert_eq!(ma, fs::read_to_string(cb.join("manifest.txt")).unwrap());
    assert!(ma.lines().count() >= 3 * 4 * 3);
    let summary = ok(&["prepare-data", "--import", p(&ca)]);
    assert!(
        summary.contains("3 speakers") && summary.contains("12 utterances"),
        "{summary}"
    );
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = prepare(dir.path());
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "").unwrap();
    let o = run(&["train", "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(out.join(".lock").exists());
}

#[test]
fn full_pipeline_runs_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = prepare(d);
    let run_dir = d.join("run");
    let mut args = vec![
        "train",
        "--corpus",
        p(&corpus),
        "--out",
        p(&run_dir),
        "--speakers",
        "spk00,spk01",
    ];
    args.extend_from_slice(SMALL);
    ok(&args);
    let listed = manifest_paths(&run_dir);
    for f in [
        "config.txt",
        "architecture.txt",
        "model.ckpt",
        "vocoder.ckpt",
        "curves.txt",
        "phonemes.txt",
    ] {
        assert!(listed.iter().any(|l| l == f), "{f} not in manifest");
    }
    assert!(!run_dir.join(".lock").exists());
    let cfg = fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(cfg.contains("arch.channels = 8"), "{cfg}");

    let target = ["--corpus", p(&corpus), "--target", "spk02"];
    let weld_early = d.join("weld_early");
    let mut args = vec!["weld", "--model", p(&run_dir), "--out", p(&weld_early)];
    args.extend_from_slice(&target);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ADAPTED_AC"));

    let adapted = d.join("adapted");
    let mut args = vec!["adapt", "--mode", "unsup", "--model", p(&run_dir), "--out", p(&adapted)];
    args.extend_from_slice(&target);
    ok(&args);
    let o = run(&[
        "tts",
        "--model",
        p(&adapted),
        "--transcript",
        "x.lab",
        "--out",
        p(&d.join("t0")),
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("WELDED"));

    let welded = d.join("welded");
    let mut args = vec!["weld", "--model", p(&adapted), "--out", p(&welded)];
    args.extend_from_slice(&target);
    ok(&args);
    assert!(welded.join("weld_curves.txt").exists());

    let lab = corpus.join("spk00").join("spk00_0000.lab");
    for out in ["t1", "t2"] {
        ok(&[
            "tts",
            "--model",
            p(&welded),
            "--transcript",
            p(&lab),
            "--out",
            p(&d.join(out)),
            "--seed",
            "4",
        ]);
    }
    for f in ["tts.mel", "tts.wav.codes", "tts.wav"] {
        assert_eq!(
            fs::read(d.join("t1").join(f)).unwrap(),
            fs::read(d.join("t2").join(f)).unwrap(),
            "{f}"
        );
    }
    let mel = corpus.join("spk00").join("spk00_0001.mel");
    ok(&[
        "vc",
        "--model",
        p(&welded),
        "--source",
        p(&mel),
        "--out",
        p(&d.join("v")),
    ]);
    assert!(d.join("v").join("vc.wav").exists());

    let diag = d.join("diag");
    ok(&["diagnose", "--curves", "--model", p(&welded), "--out", p(&diag)]);
    ok(&[
        "diagnose",
        "--dump-lle",
        "--model",
        p(&welded),
        "--corpus",
        p(&corpus),
        "--utterance",
        "spk02_0000",
        "--out",
        p(&diag),
    ]);
    assert!(diag.join("spk02_0000.speech.lle").exists());
    assert!(diag.join("spk02_0000.text.lle").exists());
    ok(&[
        "diagnose",
        "--per",
        "--model",
        p(&run_dir),
        "--corpus",
        p(&corpus),
        "--out",
        p(&d.join("per")),
    ]);
    let per = fs::read_to_string(d.join("per").join("per.txt")).unwrap();
    assert!(!per.trim().is_empty());
}
