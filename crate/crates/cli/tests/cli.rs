use std::path::Path;
use std::process::{Command, Output};

use vf_core::volume::load_volume;
use vf_core::{LabelVolume, Volume};

const PHANTOM: &str = r#"
dims = [32, 32, 32]
num_trees = 2
branch_depth = 2
radius_root = 2.0
seed = 4
"#;

fn config(data: &Path) -> String {
    format!(
        r#"
[data]
dir = "{}"
train = 2
val = 1
test = 1

[model]
input_dims = [16, 16, 16]
age_reduction = 4

[model.vit]
patch_size = 4
embed_dim = 8
depth = 3
heads = 2
trainable_tail = 1
mlp_ratio = 2

[model.cnn]
base_channels = 4
norm_groups = 2

[model.eur]
fusion_width = 4
sab_kernel = 3

[train]
epochs = 1
lr = 0.001
batch = 1
crop = [16, 16, 16]
seed = 3
"#,
        data.display()
    )
}

fn vf(args: &[&str]) -> Output {
    vf_env(args, &[])
}

fn vf_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vf"));
    c.args(args).env_remove("VF_SEED");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn ps(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

/// Generates the small dataset and trains one epoch into `<root>/run`.
fn trained(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("data");
    let spec = root.join("phantom.toml");
    std::fs::write(&spec, PHANTOM).unwrap();
    assert!(vf(&["phantom-gen", "--spec", ps(&spec), "--count", "4", "--out", ps(&data)]).status.success());
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, config(&data)).unwrap();
    let run = root.join("run");
    let o = vf(&["train", "--config", ps(&cfg), "--out", ps(&run)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    (data, run)
}

#[test]
fn gradcheck_lists_each_case_once_and_passes() {
    let o = vf(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stdout));
    let out = text(&o.stdout);
    let names: Vec<&str> = out
        .lines()
        .filter(|l| l.contains("max_rel_err"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(names.len(), vf_core::gradsuite::cases().len());
    for c in vf_core::gradsuite::cases() {
        assert_eq!(names.iter().filter(|n| **n == c.name).count(), 1, "{}", c.name);
    }
    assert!(out.lines().all(|l| !l.contains("FAIL")));
    assert_eq!(vf(&["gradcheck", "--filter", "no-such-op"]).status.code(), Some(2));
}

#[test]
fn phantom_gen_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("p.toml");
    std::fs::write(&spec, PHANTOM).unwrap();
    let empty = dir.path().join("empty");
    assert!(vf(&["phantom-gen", "--spec", ps(&spec), "--count", "0", "--out", ps(&empty)]).status.success());
    assert_eq!(files(&empty), vec!["dataset.toml"]);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(vf(&["phantom-gen", "--spec", ps(&spec), "--count", "2", "--out", ps(d)]).status.success());
    }
    let names = files(&a);
    assert_eq!(
        names,
        vec!["case_0000_img.vvf", "case_0000_lbl.vvf", "case_0001_img.vvf", "case_0001_lbl.vvf", "dataset.toml"]
    );
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n}");
    }

    std::fs::write(&spec, "dims = [32, 32, 32]\nnum_tres = 2\n").unwrap();
    let o = vf(&["phantom-gen", "--spec", ps(&spec), "--count", "1", "--out", ps(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("num_tres"), "{}", text(&o.stderr));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(vf(&[]).status.code(), Some(1));
    assert_eq!(vf(&["train", "--config"]).status.code(), Some(1));
    assert_eq!(vf(&["bogus"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nepochs = 2\nlearning_rate = 0.1\n").unwrap();
    let o = vf(&["train", "--config", ps(&cfg), "--out", ps(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 3"), "{err}");

    let missing = dir.path().join("nodata");
    std::fs::write(&cfg, config(&missing)).unwrap();
    let o = vf(&["train", "--config", ps(&cfg), "--out", ps(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("case_0000_img.vvf"), "{}", text(&o.stderr));

    let o = vf(&["train", "--config", ps(&cfg), "--ablation", "net7", "--out", ps(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = vf_env(&["train", "--config", ps(&cfg), "--out", ps(dir.path())], &[("VF_SEED", "abc")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path());
    for f in ["best.ckpt", "last.ckpt", "metrics.csv", "run.toml", "finished.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let manifest = std::fs::read_to_string(run.join("run.toml")).unwrap();
    assert!(manifest.contains("seed = 3") && manifest.contains("code_version"));

    let report = dir.path().join("report.csv");
    let o = vf(&["eval", "--checkpoint", ps(&run.join("best.ckpt")), "--data", ps(&data), "--first", "3", "--out", ps(&report)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("case_0003,"));
    assert!(lines[2].starts_with("mean±std,"));
    let dsc: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    let mean: f64 = lines[2].split(',').nth(1).unwrap().split('±').next().unwrap().parse().unwrap();
    assert!((dsc - mean).abs() <= 1e-12);

    let out = dir.path().join("pred");
    let img = data.join("case_0003_img.vvf");
    let o = vf(&["infer", "--checkpoint", ps(&run.join("last.ckpt")), "--volume", ps(&img), "--out", ps(&out)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let v: Volume = load_volume(&img).unwrap();
    let p: Volume = load_volume(&out.join("prob.vvf")).unwrap();
    let m: LabelVolume = load_volume(&out.join("mask.vvf")).unwrap();
    let u: Volume = load_volume(&out.join("uncertainty.vvf")).unwrap();
    assert!(p.dims == v.dims && m.dims == v.dims && u.dims == v.dims);
    for i in 0..v.len() {
        assert_eq!(m.data[i], (p.data[i] > 1.0 - p.data[i]) as u8);
        assert!(u.data[i] > 0.0 && u.data[i] <= 1.0);
    }

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint at all").unwrap();
    let o = vf(&["infer", "--checkpoint", ps(&bad), "--volume", ps(&img), "--out", ps(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_override_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path());
    let cfg = dir.path().join("run.toml");
    let mut outs = Vec::new();
    for name in ["s1", "s2"] {
        let out = dir.path().join(name);
        let o = vf_env(&["train", "--config", ps(&cfg), "--ablation", "net3", "--out", ps(&out)], &[("VF_SEED", "11")]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        assert!(std::fs::read_to_string(out.join("run.toml")).unwrap().contains("seed = 11"));
        outs.push((std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("last.ckpt")).unwrap()));
    }
    assert_eq!(outs[0], outs[1]);
    assert_ne!(outs[0].1, std::fs::read(run.join("last.ckpt")).unwrap());
}
