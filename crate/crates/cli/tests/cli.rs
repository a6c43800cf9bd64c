use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in\n{text}"))
        .parse()
        .unwrap()
}

fn generate(dir: &Path, name: &str) {
    let o = msa(
        dir,
        &["generate", "--data-dir", name, "--num-train", "6", "--num-val", "4", "--seed", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "a");
    generate(tmp.path(), "b");
    for rel in [
        "dataset.cfg",
        "train/annotations.txt",
        "val/annotations.txt",
        "train/images/000005.ppm",
        "val/images/000000.ppm",
    ] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(rel)).unwrap(),
            fs::read(tmp.path().join("b").join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn ground_truth_predictions_score_one_and_empty_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "d");
    // prediction record = annotation record with a person score and a
    // confidence appended to every keypoint triple
    let anns = fs::read_to_string(tmp.path().join("d/val/annotations.txt")).unwrap();
    let preds: String = anns
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let mut out = f[..5].join(" ") + " 1.0";
            for kp in f[5..].chunks(3) {
                out += &format!(" {} {} 2 1.0", kp[0], kp[1]);
            }
            out + "\n"
        })
        .collect();
    fs::write(tmp.path().join("gt.txt"), preds).unwrap();
    fs::write(tmp.path().join("empty.txt"), "").unwrap();

    let o = msa(
        tmp.path(),
        &["eval", "--data-dir", "d", "--out-dir", "e1", "--predictions", "gt.txt"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(report_value(&stdout(&o), "AP"), 1.0);
    let json = fs::read_to_string(tmp.path().join("e1/report.json")).unwrap();
    assert_eq!(json.lines().count(), 1);
    assert!(json.contains("\"AP\":1"), "{json}");

    let o = msa(
        tmp.path(),
        &["eval", "--data-dir", "d", "--out-dir", "e2", "--predictions", "empty.txt"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(report_value(&stdout(&o), "AP"), 0.0);
}

#[test]
fn train_eval_dump_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "d");
    fs::write(
        tmp.path().join("run.cfg"),
        "data_dir=d\nout_dir=r\nepochs=3\nbatch_size=2\n# flags below win\n",
    )
    .unwrap();
    let o = msa(tmp.path(), &["train", "--config", "run.cfg", "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("epoch ").count(), 1, "flag overrides file");
    for f in ["model.ckpt", "model.cfg", "epoch000.ckpt", "train.log", "run.cfg"] {
        assert!(tmp.path().join("r").join(f).exists(), "{f}");
    }

    let o = msa(tmp.path(), &["eval", "--config", "run.cfg"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ap = report_value(&stdout(&o), "AP");
    assert!((0.0..=1.0).contains(&ap));
    assert!(tmp.path().join("r/predictions.txt").exists());

    let o = msa(tmp.path(), &["dump-heatmaps", "--config", "run.cfg", "--image-id", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = fs::read_dir(tmp.path().join("r/heatmaps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"overlay.ppm".to_string()));
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count() % 5, 0);
}

#[test]
fn mismatched_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "d");
    let o = msa(
        tmp.path(),
        &["train", "--data-dir", "d", "--out-dir", "r", "--epochs", "1", "--head", "baseline"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(tmp.path().join("other.cfg"), "head=ms_kpsnet\n").unwrap();
    let o = msa(
        tmp.path(),
        &[
            "eval",
            "--data-dir",
            "d",
            "--checkpoint",
            "r/model.ckpt",
            "--model-config",
            "other.cfg",
        ],
    );
    assert_ne!(code(&o), 0);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("kps_head"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&msa(tmp.path(), &["train", "--batch-size", "0"])), 2);
    assert_eq!(code(&msa(tmp.path(), &["train", "--no-such-flag", "1"])), 2);
    assert_eq!(code(&msa(tmp.path(), &["train", "--roi-policy", "nearest"])), 2);
    assert_eq!(code(&msa(tmp.path(), &["train", "--data-dir", "missing"])), 3);
    fs::write(tmp.path().join("bad.txt"), "0 1 2 3\n").unwrap();
    generate(tmp.path(), "d");
    assert_eq!(code(&msa(tmp.path(), &["eval", "--data-dir", "d", "--predictions", "bad.txt"])), 3);
}

#[test]
fn grad_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = msa(tmp.path(), &["grad-check", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("gradient checks passed"));
}
