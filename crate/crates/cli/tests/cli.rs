//! The binary end to end: exit codes, env overrides and the file pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uniadapter"));
    c.env("RUST_LOG", "warn");
    for var in ["UNIADAPTER_DATA", "UNIADAPTER_CONFIG", "UNIADAPTER_METRICS", "UNIADAPTER_BACKBONE"] {
        c.env_remove(var);
    }
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn params_reports_and_checks_expectations() {
    for (file, exact, rounded) in [
        ("uniadapter_r512", "18874368", "18.9M"),
        ("uniadapter_r128", "4718592", "4.8M"),
        ("adapter_v_r512", "9437184", "9.5M"),
        ("adapter_vtc_r128", "7077888", "7.1M"),
        ("uniadapter_layers_5_12", "12582912", "12.6M"),
    ] {
        let cfg = configs().join(format!("audit/{file}.conf"));
        let o = run(bin().args(["params", "--config"]).arg(&cfg).args(["--expect", exact]));
        assert!(o.status.success(), "{file}: {}", text(&o));
        assert!(text(&o).starts_with(&format!("{exact} ({rounded})")), "{}", text(&o));
        let o = run(bin().args(["params", "--config"]).arg(&cfg).args(["--expect", rounded]));
        assert!(o.status.success(), "{file}: {}", text(&o));
    }
    let cfg = configs().join("audit/uniadapter_r512.conf");
    let o = run(bin().args(["params", "--config"]).arg(&cfg).args(["--expect", "18874369"]));
    assert!(!o.status.success());
    assert!(text(&o).contains("18874368"), "{}", text(&o));
}

#[test]
fn audit_flag_swaps_in_the_base_backbone() {
    let cfg = configs().join("desk/uniadapter.conf");
    let o = run(bin().args(["params", "--audit", "--config"]).arg(&cfg));
    assert!(o.status.success(), "{}", text(&o));
    // one shared down plus three ups, 768 × 16 each, in 12 layers
    assert!(text(&o).starts_with("589824 "), "{}", text(&o));
}

#[test]
fn bad_configs_are_rejected_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.conf");
    std::fs::write(&p, "[adaptation]\nsharing = share_dwon\n").unwrap();
    let o = run(bin().args(["params", "--config"]).arg(&p));
    assert!(!o.status.success());
    assert!(text(&o).contains("line 2") && text(&o).contains("share_dwon"), "{}", text(&o));
    std::fs::write(&p, "[adaptation]\nshraing = share_down\n").unwrap();
    let o = run(bin().args(["params", "--config"]).arg(&p));
    assert!(text(&o).contains("unknown key"), "{}", text(&o));
}

#[test]
fn gradcheck_gate_and_negative_control() {
    let cfg = configs().join("gradcheck.conf");
    let o = run(bin().args(["gradcheck", "--seed", "3", "--config"]).arg(&cfg));
    assert!(o.status.success(), "{}", text(&o));
    assert!(!text(&o).contains("FAIL"), "{}", text(&o));
    let o = run(bin().args(["gradcheck", "--corrupt-backward", "layer_norm"]));
    assert!(!o.status.success());
    let t = text(&o);
    assert!(t.contains("`layer_norm` deliberately corrupted") && t.contains("FAIL"), "{t}");
}

const TINY: &str = "
[backbone]
hidden = 16
heads = 2
visual_depth = 1
text_depth = 1
fusion_depth = 1
decoder_depth = 1

[adaptation]
variant = uniadapter
bottleneck = 4

[task]
batch_size = 16
epochs = 1
";

#[test]
fn pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let spec = p("spec.json");
    let mut world: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("data/image_small.json")).unwrap()).unwrap();
    world["sizes"] = serde_json::json!({"pretrain": 64, "downstream": 48, "test": 20});
    std::fs::write(&spec, world.to_string()).unwrap();
    std::fs::write(p("run.conf"), TINY).unwrap();

    let o = run(bin().args(["gen-data", "--spec"]).arg(&spec).arg("--out").arg(p("data")));
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).lines().any(|l| l.split_whitespace().eq(["test", "20", "records"])), "{}", text(&o));
    let again = run(bin().args(["gen-data", "--spec"]).arg(&spec).arg("--out").arg(p("again")));
    assert!(again.status.success());
    for f in ["pretrain.bin", "downstream.bin", "test.bin", "manifest.json"] {
        assert_eq!(std::fs::read(p("data").join(f)).unwrap(), std::fs::read(p("again").join(f)).unwrap(), "{f}");
    }

    // data and metrics paths from the environment
    let o = run(bin()
        .env("UNIADAPTER_DATA", p("data"))
        .env("UNIADAPTER_METRICS", p("m.csv"))
        .args(["pretrain", "--config"])
        .arg(p("run.conf"))
        .arg("--out")
        .arg(p("backbone.ckpt")));
    assert!(o.status.success(), "{}", text(&o));
    let o = run(bin()
        .env("UNIADAPTER_DATA", p("data"))
        .env("UNIADAPTER_METRICS", p("m.csv"))
        .args(["adapt", "--config"])
        .arg(p("run.conf"))
        .arg("--backbone-ckpt")
        .arg(p("backbone.ckpt"))
        .arg("--out")
        .arg(p("uni.ckpt")));
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("backbone unchanged"), "{}", text(&o));

    let eval = |extra: &[&str]| {
        let mut c = bin();
        c.args(["eval", "--config"])
            .arg(p("run.conf"))
            .arg("--ckpt")
            .arg(p("uni.ckpt"))
            .arg("--data")
            .arg(p("data"))
            .args(extra);
        run(&mut c)
    };
    let bb = p("backbone.ckpt");
    let bb = bb.to_str().unwrap();
    let first = eval(&["--backbone-ckpt", bb, "--metrics", p("m.csv").to_str().unwrap()]);
    assert!(first.status.success(), "{}", text(&first));
    assert!(text(&first).contains("R@1"), "{}", text(&first));
    let second = eval(&["--backbone-ckpt", bb]);
    assert_eq!(first.stdout, second.stdout);
    let csv = std::fs::read_to_string(p("m.csv")).unwrap();
    assert!(csv.starts_with("step,split,task,loss,r1,r5,r10,mdr,rmean,acc\n"));
    assert_eq!(csv.lines().filter(|l| l.contains(",test,")).count(), 1);

    let missing = eval(&[]);
    assert!(!missing.status.success());
    assert!(text(&missing).contains("backbone"), "{}", text(&missing));
    let bad_split = eval(&["--backbone-ckpt", bb, "--split", "train"]);
    assert!(text(&bad_split).contains("unknown split"), "{}", text(&bad_split));
}

#[test]
fn unwritable_output_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("data");
    let o = run(bin().args(["gen-data", "--spec", "image", "--out"]).arg(&out));
    assert!(!o.status.success());
    assert!(text(&o).contains(out.to_str().unwrap()), "{}", text(&o));
}
