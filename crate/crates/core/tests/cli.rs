use std::path::Path;
use std::process::{Command, Output};

fn evstr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evstr")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Desk object preset shrunk to 4 train and 2 test samples per class.
fn write_small_config(dir: &Path, epochs: usize) -> String {
    let out = evstr(&["--preset", "desk-object", "info", "--print-config"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let toml = &text[text.find("seed = ").unwrap()..];
    let toml: Vec<String> = toml
        .lines()
        .map(|l| match l.split(" = ").next().unwrap() {
            "epochs" => format!("epochs = {epochs}"),
            "batch_size" => "batch_size = 4".into(),
            "data_dir" => "data_dir = \"data\"".into(),
            "train_per_class" => "train_per_class = 4".into(),
            "test_per_class" => "test_per_class = 2".into(),
            _ => l.to_string(),
        })
        .collect();
    let path = dir.join("run.toml");
    std::fs::write(&path, toml.join("\n")).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&evstr(&["--help"])), 0);
    assert_eq!(code(&evstr(&["frobnicate"])), 1);
    assert_eq!(code(&evstr(&["gradcheck", "conv"])), 1);
    assert_eq!(code(&evstr(&["--config", "/nonexistent/run.toml", "info"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "epochs = \"many\"\n").unwrap();
    assert_eq!(code(&evstr(&["--config", bad.to_str().unwrap(), "info"])), 1);
    std::fs::write(&bad, "epoch = 3\n").unwrap();
    assert_eq!(code(&evstr(&["--config", bad.to_str().unwrap(), "info"])), 1);
}

#[test]
fn gradcheck_exit_codes() {
    let ok = evstr(&["gradcheck", "linear"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert_eq!(code(&evstr(&["gradcheck", "bn", "--corrupt"])), 4);
}

#[test]
fn info_reports_reference_values() {
    let out = evstr(&["--preset", "reference", "info"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("1024/768/576/432/432"), "{text}");
    assert!(text.contains("reference (N-Caltech101 object model): 0.93 M params, 0.34 G MACs"));
}

#[test]
fn synth_convert_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path(), 3);
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();

    let out = evstr(&["--config", &cfg, "synth", "--out", data_s]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(data.join("train.txt")).unwrap().lines().count(), 12);
    assert_eq!(code(&evstr(&["--config", &cfg, "synth", "--out", data_s])), 1);
    assert_eq!(code(&evstr(&["--config", &cfg, "synth", "--out", data_s, "--force"])), 0);

    let evx = dir.path().join("one.evx");
    let input = data.join("events/train_00000.evs");
    let out = evstr(&["--config", &cfg, "convert", input.to_str().unwrap(), "--out", evx.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("wrote 256 voxels (16 values per patch)"), "{}", stdout(&out));
    assert!(std::fs::read(&evx).unwrap().starts_with(b"EVX1"));

    let run = dir.path().join("run");
    let out = evstr(&["--config", &cfg, "train", "--out", run.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "best.evck", "last.evck", "confusion.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "epoch,lr,train_loss,test_acc");
    assert_eq!(rows.len(), 4);
    for (e, row) in rows[1..].iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], e.to_string());
        let lr: f64 = cols[1].parse().unwrap();
        let want = 1e-6 + 0.5 * (3e-2 - 1e-6) * (1.0 + (std::f64::consts::PI * e as f64 / 3.0).cos());
        assert!((lr - want).abs() <= 1e-12 * want, "epoch {e}: {lr} vs {want}");
    }

    // evaluating the final checkpoint reproduces the last epoch's accuracy
    let last = run.join("last.evck");
    let eval = |extra: &[&str]| {
        let mut args = vec!["--config", &cfg, "eval", "--checkpoint", last.to_str().unwrap()];
        args.extend_from_slice(extra);
        evstr(&args)
    };
    let first = eval(&[]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(stdout(&first), stdout(&eval(&[])));
    let acc: f64 = rows[3].split(',').nth(3).unwrap().parse().unwrap();
    assert!(stdout(&first).contains(&format!("accuracy {acc:.4} over 6 samples")), "{}", stdout(&first));
    assert_eq!(
        std::fs::read_to_string(run.join("confusion.csv")).unwrap(),
        stdout(&first).lines().take(4).map(|l| format!("{l}\n")).collect::<String>()
    );

    let train_manifest = data.join("train.txt");
    let on_train = eval(&["--manifest", train_manifest.to_str().unwrap()]);
    assert_eq!(code(&on_train), 0);
    assert!(stdout(&on_train).contains("over 12 samples"));

    // a checkpoint from another model configuration is rejected
    let other = std::fs::read_to_string(&cfg).unwrap().replace("neighbors = 12", "neighbors = 8");
    let other_cfg = dir.path().join("other.toml");
    std::fs::write(&other_cfg, other).unwrap();
    let out = evstr(&["--config", other_cfg.to_str().unwrap(), "eval", "--checkpoint", last.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
