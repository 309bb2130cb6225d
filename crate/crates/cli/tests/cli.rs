use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bialign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bialign")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt, vis, cfg) =
        (tmp.path().join("data"), tmp.path().join("m.ckpt"), tmp.path().join("vis"), tmp.path().join("run.cfg"));

    let out = bialign(&["gen-data", "--out", p(&data), "--count", "4", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(data.join("train/00003_img.ppm").exists() && data.join("train/00003_lab.pgm").exists());
    assert_eq!(fs::read_dir(data.join("train")).unwrap().count(), 8);
    assert_eq!(fs::read_dir(data.join("val")).unwrap().count(), 2);

    fs::write(&cfg, "# quick run\ntotal_iters = 3\nbatch_size = 2\neval_every = 1\n").unwrap();
    let out = bialign(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt)]);
    assert_eq!(code(&out), 0, "{out:?}");
    let log = fs::read_to_string(tmp.path().join("m.ckpt.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,lr,loss_total,loss_bce,loss_hard,loss_ohem,val_miou");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 7 && !l.ends_with(',')));

    let out = bialign(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("mIoU"), "{}", stdout(&out));

    let sample = fs::read_dir(data.join("val"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("_img.ppm"))
        .unwrap();
    let out = bialign(&["dump-visuals", "--ckpt", p(&ckpt), "--sample", p(&sample), "--out", p(&vis)]);
    assert_eq!(code(&out), 0, "{out:?}");
    for name in [
        "prediction.ppm",
        "flow_cp_to_sp.ppm",
        "flow_sp_to_cp.ppm",
        "gate_cp_to_sp.pgm",
        "gate_sp_to_cp.pgm",
        "indicator.pgm",
    ] {
        assert!(vis.join(name).exists(), "{name} missing");
    }
}

#[test]
fn gradcheck_single_op() {
    let out = bialign(&["gradcheck", "--op", "warp"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    assert!(
        !text.is_empty() && text.lines().all(|l| l.starts_with("PASS") && l.split_whitespace().nth(1) == Some("warp")),
        "{text}"
    );
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&bialign(&[])), 1);
    assert_eq!(code(&bialign(&["train"])), 1);
    assert_eq!(code(&bialign(&["gradcheck", "--op", "no_such_op"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    let out = bialign(&["gen-data", "--out", p(tmp.path()), "--count", "1", "--size", "64by64"]);
    assert_eq!(code(&out), 1);

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = bialign(&["train", "--data", p(tmp.path()), "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 1, "{out:?}");
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(code(&bialign(&["eval", "--ckpt", p(&missing), "--data", p(tmp.path())])), 2);

    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = bialign(&["eval", "--ckpt", p(&junk), "--data", p(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = bialign(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("m"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergent_training_exits_3_and_keeps_last_good_state() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt, cfg) = (tmp.path().join("data"), tmp.path().join("m.ckpt"), tmp.path().join("run.cfg"));
    assert_eq!(code(&bialign(&["gen-data", "--out", p(&data), "--count", "2"])), 0);
    fs::write(&cfg, "total_iters = 20\nbatch_size = 2\nbase_lr = 1e30\n").unwrap();
    let out = bialign(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt)]);
    assert_eq!(code(&out), 3, "{out:?}");
    assert!(ckpt.exists());
    let out = bialign(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert_eq!(code(&out), 0, "{out:?}");
}
