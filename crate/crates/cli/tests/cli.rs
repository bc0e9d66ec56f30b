use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

/// Two classes of 28×28 images (bright left or right half) as plain IDX files.
fn write_idx(dir: &Path, stem: &str, n: usize, seed: u32) {
    let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
    let mut noise = move || {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        (state % 50) as u8
    };
    let mut img = Vec::new();
    img.extend(0x0803u32.to_be_bytes());
    for v in [n as u32, 28, 28] {
        img.extend(v.to_be_bytes());
    }
    let mut lab = Vec::new();
    lab.extend(0x0801u32.to_be_bytes());
    lab.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let c = i % 2;
        for _ in 0..28 {
            for x in 0..28 {
                let on = (x < 14) == (c == 0);
                img.push(if on { 150 } else { 20 } + noise());
            }
        }
        lab.push(c as u8);
    }
    fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), img).unwrap();
    fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), lab).unwrap();
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    fs::create_dir_all(&data).unwrap();
    write_idx(&data, "train", 48, 1);
    write_idx(&data, "t10k", 24, 2);
    let config = root.join("config.json");
    let doc = serde_json::json!({
        "network": {"channel_scale": 4.0 / 96.0},
        "goodness": {"n_copies": 3, "projection_dims": [3, 8, 16]},
        "phase1_epochs": 1,
        "phase2_epochs": 2,
        "batch_size": 16,
        "data": {"dir": data, "augment": {"crop_padding": 0, "hflip": false}},
    });
    fs::write(&config, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    Fixture { _tmp: tmp, root, config }
}

fn sff(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sff"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn train(f: &Fixture, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--config", s(&f.config), "--output-dir", s(out)];
    args.extend(extra);
    ok(sff(&args, &[]));
}

#[test]
fn pipeline_writes_every_artifact() {
    let f = fixture();
    let out = f.root.join("run");
    let o = s(&out);
    ok(sff(&["prepare-data", "--config", s(&f.config), "--output-dir", o], &[]));
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("data_summary.json"))).unwrap();
    assert_eq!(summary["train"]["items"], 48);
    assert_eq!(summary["val"]["class_counts"][1], 12);

    train(&f, &out, &[]);
    let metrics = read(&out.join("metrics.csv"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,phase,block,loss,lr,val_acc");
    // three phase-1 units, two classifier epochs
    assert_eq!(lines.len(), 6, "{metrics}");
    assert!(lines[4].contains(",phase2,") && !lines[5].ends_with(','));
    let resolved: serde_json::Value = serde_json::from_str(&read(&out.join("resolved_config.json"))).unwrap();
    assert_eq!(resolved["batch_size"], 16);
    assert_eq!(resolved["seeds"], serde_json::from_str::<serde_json::Value>(&read(&out.join("seeds.json"))).unwrap());
    assert!(out.join("checkpoint.sffc").exists() && out.join("checkpoint.meta.json").exists());
    let best = serde_json::from_str::<serde_json::Value>(&read(&out.join("summary.json"))).unwrap()["best_val_acc"]
        .as_f64()
        .unwrap();
    assert!((0.0..=1.0).contains(&best));

    ok(sff(&["eval", "--output-dir", o], &[]));
    let eval = read(&out.join("eval.csv"));
    assert_eq!(eval.lines().next(), Some("strategy,accuracy"));
    assert_eq!(eval.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect::<Vec<_>>(), ["mean_square", "mean", "direct"]);
    assert!(out.join("scores.sffc").exists());

    ok(sff(&["analyze-ed", "--output-dir", o], &[]));
    let ed = read(&out.join("ed_profile.csv"));
    assert_eq!(ed.lines().count(), 4);
    assert!(ed.starts_with("block,ed_d,ed_c_mean,ed_c_std,ratio"));

    ok(sff(&["probe", "--output-dir", o, "--blocks", "1,3"], &[]));
    let probe = read(&out.join("probe.csv"));
    assert_eq!(probe.lines().map(|l| l.split(',').next().unwrap()).collect::<Vec<_>>(), ["block", "1", "3"]);

    // block 2 has no stored probe yet and is trained on demand
    ok(sff(&["analyze-info", "--output-dir", o, "--mc-samples", "2000"], &[]));
    let info = read(&out.join("info.csv"));
    let rows: Vec<&str> = info.lines().collect();
    assert!(rows[0].starts_with("block,i_tot,i_lin_absorbed,i_cor,se"));
    assert_eq!(rows.len(), 4);
    for r in &rows[1..] {
        let v: Vec<f64> = r.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite()), "{r}");
        assert!((v[1] - v[2] - v[3]).abs() < 1e-9, "I_tot = I_lin + I_cor: {r}");
    }
    assert_eq!(read(&out.join("probe.csv")).lines().count(), 4);
}

#[test]
fn training_is_reproducible_and_resume_is_idempotent() {
    let f = fixture();
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    train(&f, &a, &[]);
    train(&f, &b, &[]);
    let bytes = |d: &Path| fs::read(d.join("checkpoint.sffc")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));

    let before = (bytes(&a), read(&a.join("metrics.csv")));
    ok(sff(&["train", "--resume", "--output-dir", s(&a)], &[]));
    assert_eq!((bytes(&a), read(&a.join("metrics.csv"))), before);
}

#[test]
fn thread_cap_does_not_change_results() {
    let f = fixture();
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    let args = |d: &Path| vec!["train".to_string(), "--config".into(), s(&f.config).into(), "--output-dir".into(), s(d).into()];
    let run = |d: &Path, threads: &str| {
        let a = args(d);
        ok(sff(&a.iter().map(String::as_str).collect::<Vec<_>>(), &[("SFF_THREADS", threads)]));
    };
    run(&a, "1");
    run(&b, "3");
    assert_eq!(fs::read(a.join("checkpoint.sffc")).unwrap(), fs::read(b.join("checkpoint.sffc")).unwrap());
    let meta: serde_json::Value = serde_json::from_str(&read(&b.join("run_train.json"))).unwrap();
    assert_eq!(meta["threads"], 3);
}

#[test]
fn sweep_and_noisy_grid() {
    let f = fixture();
    let out = f.root.join("sweep");
    let o = s(&out);
    ok(sff(&["sweep-alpha", "--config", s(&f.config), "--output-dir", o, "--grid", "0.2:1:0.8", "--block", "1"], &[]));
    let csv = read(&out.join("sweep_alpha.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "alpha,cos,kernel_std,loss,ed_c,ed_d");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0.2,") && rows[2].starts_with("1,"));

    ok(sff(&["dump-noisy", "--config", s(&f.config), "--output-dir", o, "--p-grid", "0:0.5:0.25", "--count", "2", "--scale", "1"], &[]));
    let png = fs::read(out.join("noisy_grid.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    // IHDR width and height: three columns and two rows of 29-pixel cells plus a border
    assert_eq!(u32::from_be_bytes(png[16..20].try_into().unwrap()), 3 * 29 + 1);
    assert_eq!(u32::from_be_bytes(png[20..24].try_into().unwrap()), 2 * 29 + 1);
}

#[test]
fn exit_codes() {
    let f = fixture();
    let o = f.root.join("x");
    let code = |args: &[&str], env: &[(&str, &str)]| sff(args, env).status.code();
    let cfg = s(&f.config);
    assert_eq!(code(&["prepare-data", "--config", cfg, "--output-dir", s(&o), "--overrides", "no_such_key=1"], &[]), Some(2));
    assert_eq!(code(&["prepare-data", "--config", cfg, "--output-dir", s(&o), "--overrides", "goodness.alpha=1.5"], &[]), Some(2));
    assert_eq!(code(&["prepare-data", "--config", cfg, "--output-dir", s(&o)], &[("SFF_THREADS", "zero")]), Some(2));
    assert_eq!(code(&["sweep-alpha", "--config", cfg, "--output-dir", s(&o), "--grid", "0:2:1"], &[]), Some(2));
    let missing = format!("data.dir={}", f.root.join("nowhere").display());
    assert_eq!(code(&["prepare-data", "--config", cfg, "--output-dir", s(&o), "--overrides", &missing], &[]), Some(3));
    fs::write(f.root.join("data/t10k-labels-idx1-ubyte"), [0u8, 0, 8, 1, 0, 0, 0, 5]).unwrap();
    assert_eq!(code(&["prepare-data", "--config", cfg, "--output-dir", s(&o)], &[]), Some(3));
}

#[test]
fn divergence_exits_with_nan_code() {
    let f = fixture();
    let o = f.root.join("nan");
    let out = sff(&["train", "--config", s(&f.config), "--output-dir", s(&o), "--overrides", "optimizer.lr=1e30"], &[]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
