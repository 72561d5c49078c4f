use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phasenet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn phasenet")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("phasenet-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: [&str; 10] = ["--depth", "2", "--base-channels", "2", "--patch", "8", "--iters", "3", "--seed", "1"];

#[test]
fn end_to_end_pipeline() {
    let dir = scratch("e2e");
    let data = dir.join("data");
    ok(&run(&["phantom-gen", "--seed", "4", "--cases", "3", "--dims", "16", "--out", s(&data)]));
    let manifest = data.join("manifest.tsv");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 3);

    let run_dir = dir.join("run");
    let mut args = vec!["train", "--mode", "hpn", "--manifest", s(&manifest), "--test-fold", "0", "--out", s(&run_dir)];
    args.extend(TINY);
    ok(&run(&args));
    for f in ["model.cfg", "member0.mpv", "member1.mpv", "loss.csv", "loss_member1.csv"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }

    let pred_dir = dir.join("pred");
    ok(&run(&[
        "infer", "--checkpoint", s(&run_dir), "--manifest", s(&manifest), "--case", "case000", "--stride", "4", "--out",
        s(&pred_dir),
    ]));
    let pred = pred_dir.join("case000_pred.mpv");
    let text = ok(&run(&["eval", "--pred", s(&pred), "--truth", s(&data.join("case000_labels.mpv"))]));
    let names: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["abnormal pancreas", "PDAC mass", "pancreatic duct"]);

    let self_dsc = ok(&run(&["eval", "--pred", s(&data.join("case001_labels.mpv")), "--truth", s(&data.join("case001_labels.mpv"))]));
    assert!(self_dsc.lines().all(|l| l.ends_with("1.0000")), "{self_dsc}");

    let xv = dir.join("xval");
    let mut args = vec!["xval", "--manifest", s(&manifest), "--mode", "single-a,single-b", "--out", s(&xv)];
    args.extend(TINY);
    let table = ok(&run(&args));
    assert!(table.starts_with("method"));
    assert!(table.contains("fusion"));
    let report = ok(&run(&[
        "report",
        "--in",
        s(&xv.join("single-a.csv")),
        s(&xv.join("single-b.csv")),
        s(&xv.join("fusion.csv")),
    ]));
    assert!(report.contains("permutation p-values against fusion"));
    assert_eq!(std::fs::read_to_string(xv.join("report.txt")).unwrap(), table);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn xval_report_is_deterministic() {
    let dir = scratch("det");
    let data = dir.join("data");
    ok(&run(&["phantom-gen", "--seed", "2", "--cases", "3", "--dims", "16", "--out", s(&data)]));
    let manifest = data.join("manifest.tsv");
    let mut texts = Vec::new();
    for k in 0..2 {
        let out = dir.join(format!("x{k}"));
        let mut args = vec!["xval", "--manifest", s(&manifest), "--mode", "hyper", "--out", s(&out)];
        args.extend(TINY);
        texts.push(ok(&run(&args)));
    }
    assert_eq!(texts[0], texts[1]);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn configuration_errors_exit_2() {
    let dir = scratch("cfg");
    let data = dir.join("data");
    ok(&run(&["phantom-gen", "--cases", "3", "--dims", "16", "--out", s(&data)]));
    let manifest = data.join("manifest.tsv");
    let out = dir.join("run");
    for bad in [["--lr", "-1"], ["--patch", "7"], ["--alpha-mixup", "0"]] {
        let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&out), "--depth", "2", "--iters", "1"];
        args.extend(bad);
        assert_eq!(run(&args).status.code(), Some(2), "{bad:?}");
    }
    assert_eq!(run(&["phantom-gen", "--dims", "4", "--cases", "1", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn io_and_format_errors_exit_3() {
    let dir = scratch("io");
    std::fs::create_dir_all(&dir).unwrap();
    let missing = dir.join("nope.tsv");
    assert_eq!(
        run(&["xval", "--manifest", s(&missing), "--out", s(&dir.join("x"))]).status.code(),
        Some(3)
    );
    let junk = dir.join("junk.mpv");
    std::fs::write(&junk, b"NOTMPV\n").unwrap();
    assert_eq!(run(&["eval", "--pred", s(&junk), "--truth", s(&junk)]).status.code(), Some(3));
    std::fs::remove_dir_all(&dir).unwrap();
}
