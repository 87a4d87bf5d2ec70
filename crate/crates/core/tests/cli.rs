use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gid")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "gid.window=16\ngid.model_dim=16\ngid.ffn_hidden=16\ngid.expert_hidden=16\ngid.refine_dim=16\n\
pose.model_dim=16\npose.ffn_hidden=16\npose.layers=1\ntrain.max_epochs=1\n";

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gid(&["--seed", "7", "gen-data", "--minutes", "0.1", "--clip-seconds", "3", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3 + 2 * 3);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let c = dir.path().join("c");
    gid(&["--seed", "8", "gen-data", "--minutes", "0.1", "--clip-seconds", "3", "--out", s(&c)]);
    assert_ne!(fs::read(a.join("clip000.pose")).unwrap(), fs::read(c.join("clip000.pose")).unwrap());
}

#[test]
fn usage_and_validation_exit_codes() {
    assert_eq!(gid(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gid(&["gen-data", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(gid(&["--precision", "16", "grad-check"]).status.code(), Some(2));
    let o = gid(&["eval", "--data", "/no/such/dir", "--gid", "passthrough", "--pose", "p", "--report", "r"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = gid(&["gen-data", "--minutes=-1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=config msg="), "{err}");

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "gid.colour=blue\n").unwrap();
    gid(&["gen-data", "--minutes", "0.1", "--clip-seconds", "3", "--out", s(&out)]);
    let o = gid(&["train-gid", "--config", s(&cfg), "--data", s(&out), "--out", s(&dir.path().join("g"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=config"));
}

#[test]
fn train_eval_denoise_stream_round() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = p("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let ok = |args: &[&str]| {
        let o = gid(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    ok(&["gen-data", "--minutes", "0.2", "--clip-seconds", "4", "--out", s(&p("train"))]);
    ok(&["--seed", "5", "gen-data", "--minutes", "0.1", "--clip-seconds", "3", "--out", s(&p("test"))]);
    ok(&["train-gid", "--config", s(&cfg), "--data", s(&p("train")), "--out", s(&p("g.gid"))]);
    ok(&["train-pose", "--config", s(&cfg), "--data", s(&p("train")), "--out", s(&p("p.pose"))]);
    ok(&["train-direct", "--config", s(&cfg), "--data", s(&p("train")), "--out", s(&p("d.pose"))]);
    assert!(p("g.gid.train.csv").is_file());

    ok(&["eval", "--data", s(&p("test")), "--gid", s(&p("g.gid")), "--pose", s(&p("p.pose")), "--report", s(&p("with.csv"))]);
    ok(&["eval", "--data", s(&p("test")), "--gid", "passthrough", "--pose", s(&p("p.pose")), "--report", s(&p("pass.csv"))]);
    let with = gid::metrics::EvalReport::from_json(&fs::read_to_string(p("with.json")).unwrap()).unwrap();
    let pass = gid::metrics::EvalReport::from_json(&fs::read_to_string(p("pass.json")).unwrap()).unwrap();
    // the passthrough run's columns equal the without-denoiser column of the real run
    for tag in ["with_gid", "without_gid"] {
        assert_eq!(pass.row(tag).unwrap().ang_deg, with.row("without_gid").unwrap().ang_deg);
        assert_eq!(pass.row(tag).unwrap().imu_mae, with.row("without_gid").unwrap().imu_mae);
    }

    ok(&["denoise", "--in", s(&p("test/clip000.loose.imu")), "--gid", s(&p("g.gid")), "--out", s(&p("den.imu"))]);
    let den = gid::pipeline::ImuSequenceFile::load(&p("den.imu")).unwrap();
    assert_eq!(den.provenance, gid::trainer::Provenance::Denoised);
    let o = gid(&["denoise", "--in", s(&p("test/clip000.tight.imu")), "--gid", s(&p("g.gid")), "--out", s(&p("x.imu"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=provenance"));

    let out = ok(&[
        "stream", "--in", s(&p("test/clip001.loose.imu")), "--gid", s(&p("g.gid")), "--pose", s(&p("p.pose")),
        "--unpaced", "--out", s(&p("s.pose")),
    ]);
    assert!(out.contains("frames=120"), "{out}");
    let dev: f64 = out.split("max_offline_deviation=").nth(1).unwrap().trim().parse().unwrap();
    assert!(dev < 1e-4);
    assert_eq!(gid::pipeline::PoseSequenceFile::load(&p("s.pose")).unwrap().frames.len(), 120);

    // a mismatched checkpoint kind is a checkpoint error, not a crash
    let o = gid(&["eval", "--data", s(&p("test")), "--gid", s(&p("p.pose")), "--pose", s(&p("p.pose")), "--report", s(&p("r.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=checkpoint"));
}

#[test]
fn ablate_emits_four_tagged_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = p("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let o = gid(&["gen-data", "--minutes", "0.25", "--clip-seconds", "3", "--out", s(&p("data"))]);
    assert!(o.status.success());
    let o = gid(&["ablate", "--data", s(&p("data")), "--config", s(&cfg), "--out", s(&p("abl"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = gid::metrics::rows_from_csv(&fs::read_to_string(p("abl/ablation.csv")).unwrap()).unwrap();
    let tags: Vec<&str> = rows.iter().map(|r| r.tag.as_str()).collect();
    assert_eq!(tags, ["full", "no_lsd", "no_acf", "no_fps"]);
    for f in ["full.gid", "no_lsd.gid", "no_acf.gid", "predictor.pose", "no_fps.pose"] {
        assert!(p("abl").join(f).is_file(), "{f}");
    }
}

#[test]
fn grad_check_subcommand_passes() {
    let o = gid(&["grad-check"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 30);
    assert!(out.lines().all(|l| l.ends_with("PASS")));
}
