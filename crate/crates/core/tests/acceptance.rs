//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion; training
//! progress goes to stderr. Expect roughly 30 minutes on one core.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gid::garmentnoise::default_profiles;
use gid::gidnet::{Gid, GidConfig};
use gid::kinematics::{normalize_root_relative, PoseFrame, Skeleton};
use gid::metrics::{evaluate, evaluate_path, jitter_of_positions, positional_error, EvalReport};
use gid::numerics::gradcheck::{kernel_suite, network_suite, MIN_PROBES, TOL_COMPOSITE, TOL_ELEMENTWISE};
use gid::numerics::Tensor;
use gid::pipeline::stream::max_deviation;
use gid::pipeline::{ablation_rows, load_dataset, offline_reference, stream_replay, AblationModels, StreamConfig};
use gid::posenet::Predictor;
use gid::rotmath::{geodesic_angle_deg, AxisAngle, RotationMatrix};
use gid::trainer::{
    train_direct, train_gid, train_predictor, ClipFeatures, Dataset, EpochLog, PoseExample, RunConfig, Split, Variant,
};
use gid::pipeline::ablation::train_val_features;
use nalgebra::Vector3;
use rand::SeedableRng;

// Same allocator as the `gid` binary, since streaming runs in this process.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
use rand_chacha::ChaCha8Rng;

const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 1001;
const TRAIN_MINUTES: &str = "10";
const TEST_MINUTES: &str = "2";
const PERTURB_SEEDS: [u64; 3] = [11, 12, 13];

fn line(id: usize, pass: bool, detail: String) -> bool {
    println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn gen_data(out: &Path, seed: u64, minutes: &str, profile: Option<&Path>) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gid"));
    cmd.args(["--seed", &seed.to_string(), "gen-data", "--minutes", minutes, "--out"]).arg(out);
    if let Some(p) = profile {
        cmd.arg("--profile").arg(p);
    }
    let o = cmd.output().expect("gid binary runs");
    assert!(o.status.success(), "gen-data failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn progress(tag: &'static str) -> impl FnMut(&EpochLog) {
    move |e| eprintln!("[{tag}] epoch {:>2} train {:.5} val {:.5} {:.0}s", e.epoch, e.train_loss, e.val_loss, e.wallclock_s)
}

/// Denoised-to-raw imu_mae ratio on `clips`.
fn denoise_ratio(clips: &[ClipFeatures], gid: &Gid, pred: &Predictor, data: &Dataset) -> f64 {
    let with = evaluate_path("with", clips, Some(gid), pred, &data.skeleton, data.rate_hz).unwrap().0;
    let raw = evaluate_path("raw", clips, None, pred, &data.skeleton, data.rate_hz).unwrap().0;
    with.imu_mae / raw.imu_mae
}

struct Headline {
    ratio: f64,
    train_s: f64,
    eval: EvalReport,
    perturbed: Vec<f64>,
    gid: Gid,
    predictor: Predictor,
}

/// Generates the training data, trains the full denoiser and the tight-only
/// predictor, and measures criteria 3, 4 and 6.
fn headline(root: &Path, run: &RunConfig, test: &[ClipFeatures], perturbed: &[Vec<ClipFeatures>]) -> (Headline, Dataset) {
    let t0 = Instant::now();
    gen_data(&root.join("train"), TRAIN_SEED, TRAIN_MINUTES, None);
    let data = load_dataset(&root.join("train")).unwrap();
    let (tr, va) = train_val_features(&data).unwrap();
    let (gid, _) = train_gid(&run.gid, Variant::Full, &tr, &va, &run.train, Some(&mut progress("full"))).unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    let tt: Vec<PoseExample> = tr.iter().map(PoseExample::tight).collect();
    let tv: Vec<PoseExample> = va.iter().map(PoseExample::tight).collect();
    let (predictor, _) =
        train_predictor(&run.pose, &tt, &tv, &data.skeleton, &run.train, Some(&mut progress("predictor"))).unwrap();
    let ratio = denoise_ratio(test, &gid, &predictor, &data);
    let eval = evaluate(test, Some(&gid), &predictor, &data.skeleton, data.rate_hz).unwrap();
    let perturbed = perturbed.iter().map(|p| denoise_ratio(p, &gid, &predictor, &data)).collect();
    (
        Headline {
            ratio,
            train_s,
            eval,
            perturbed,
            gid,
            predictor,
        },
        data,
    )
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let run = RunConfig::default();
    let mut passed = 0;

    // 1. gradient suite
    let t = Instant::now();
    let mut reports = kernel_suite(1).unwrap();
    reports.extend(network_suite(1).unwrap());
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let tol_ok = reports
        .iter()
        .all(|r| r.tolerance == TOL_ELEMENTWISE || r.tolerance == TOL_COMPOSITE);
    let min_probes = reports.iter().map(|r| r.probes).min().unwrap_or(0);
    passed += line(
        1,
        failing.is_empty() && tol_ok && min_probes >= MIN_PROBES && secs < 120.0,
        format!(
            "{} checks (networks included), min probes {min_probes}, worst rel err {worst:.2e}, failing {failing:?}, {secs:.1}s",
            reports.len()
        ),
    ) as usize;

    // 2. identity at init
    let cfg = GidConfig::default();
    let fresh = Gid::new(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact = 0;
    for _ in 0..10 {
        let x = Tensor::<f32>::randn(&[10, cfg.window, cfg.sensors, cfg.channels], 1.0, &mut rng);
        let y = fresh.forward_windows(&x, false).unwrap();
        exact += x
            .data()
            .chunks(cfg.window * cfg.sensors * cfg.channels)
            .zip(y.data().chunks(cfg.window * cfg.sensors * cfg.channels))
            .filter(|(a, b)| a == b)
            .count();
    }
    passed += line(2, exact == 100, format!("{exact}/100 windows reproduced bit-exactly")) as usize;

    // held-out and perturbed test sets
    gen_data(&root.join("test"), TEST_SEED, TEST_MINUTES, None);
    let test_data = load_dataset(&root.join("test")).unwrap();
    let test = test_data.features().unwrap();
    let perturbed: Vec<Vec<ClipFeatures>> = PERTURB_SEEDS
        .iter()
        .map(|&s| {
            let prof = root.join(format!("perturbed{s}.txt"));
            fs::write(&prof, default_profiles().perturbed(0.25, s).to_text()).unwrap();
            let dir = root.join(format!("perturbed{s}"));
            gen_data(&dir, TEST_SEED, TEST_MINUTES, Some(&prof));
            load_dataset(&dir).unwrap().features().unwrap()
        })
        .collect();

    // 3. headline run
    let (h, data) = headline(root, &run, &test, &perturbed);
    let split_ok = Split::new(&data, &test_data).is_ok();
    passed += line(
        3,
        split_ok && h.ratio <= 0.5 && h.train_s <= 1800.0 && run.train.max_epochs <= 30,
        format!(
            "imu_mae ratio {:.3} (limit 0.5), data + training {:.0}s (limit 1800), {} epochs max, disjoint seeds {split_ok}",
            h.ratio, h.train_s, run.train.max_epochs
        ),
    ) as usize;

    // 4. downstream delta
    let w = h.eval.row("with_gid").unwrap();
    let wo = h.eval.row("without_gid").unwrap();
    passed += line(
        4,
        w.ang_deg <= 0.8 * wo.ang_deg && w.pos_cm < wo.pos_cm,
        format!(
            "angular {:.2}° vs {:.2}° (ratio {:.3}, limit 0.8), positional {:.2} cm vs {:.2} cm",
            w.ang_deg,
            wo.ang_deg,
            w.ang_deg / wo.ang_deg,
            w.pos_cm,
            wo.pos_cm
        ),
    ) as usize;

    // 5. ablation ordering
    let (tr, va) = train_val_features(&data).unwrap();
    let mut gids = vec![(Variant::Full, h.gid.clone())];
    for (v, tag) in [(Variant::NoLsd, "no_lsd"), (Variant::NoAcf, "no_acf")] {
        let (g, _) = train_gid(&run.gid, v, &tr, &va, &run.train, Some(&mut progress(tag))).unwrap();
        gids.push((v, g));
    }
    let lt: Vec<PoseExample> = tr.iter().map(PoseExample::loose).collect();
    let lv: Vec<PoseExample> = va.iter().map(PoseExample::loose).collect();
    let (direct, _) = train_direct(&run.pose, &lt, &lv, &data.skeleton, &run.train, Some(&mut progress("no_fps"))).unwrap();
    let models = AblationModels {
        gids,
        predictor: h.predictor.clone(),
        direct,
        logs: Vec::new(),
    };
    let rows = ablation_rows(&test, &models, &data).unwrap();
    let get = |t: &str| rows.iter().find(|r| r.tag == t).unwrap();
    let (full, lsd, acf, fps) = (get("full"), get("no_lsd"), get("no_acf"), get("no_fps"));
    passed += line(
        5,
        full.imu_mae < lsd.imu_mae && full.imu_mae < acf.imu_mae && fps.ang_deg > full.ang_deg,
        format!(
            "imu_mae full {:.6} no_lsd {:.6} no_acf {:.6}; angular full {:.2}° no_fps {:.2}°",
            full.imu_mae, lsd.imu_mae, acf.imu_mae, full.ang_deg, fps.ang_deg
        ),
    ) as usize;

    // 6. perturbed noise profiles
    let worst6 = h.perturbed.iter().copied().fold(0.0, f64::max);
    passed += line(
        6,
        worst6 <= 0.7,
        format!("imu_mae ratios {:.3?} under ±25% profile draws (limit 0.7)", h.perturbed),
    ) as usize;

    // 7. metric oracles
    let geo = geodesic_angle_deg(&RotationMatrix::identity(), &RotationMatrix::rot_z(PI / 2.0));
    let track = |f: fn(f64) -> Vector3<f64>| -> Vec<Vec<Vector3<f64>>> {
        (0..40).map(|i| vec![f(i as f64 / 40.0)]).collect()
    };
    let cubic = jitter_of_positions(&track(|t| Vector3::new(t * t * t, 0.0, 0.0)), 40.0).unwrap();
    let quad = jitter_of_positions(&track(|t| Vector3::new(1.5 * t * t, -4.905 * t * t, 0.2)), 40.0).unwrap();
    let chain = Skeleton::parse("0 root -1 0 0 0\n1 wrist 0 0.5 0 0\n", Path::new("chain")).unwrap();
    // rotating the root by φ moves the wrist, 0.5 m out, by 2·0.5·sin(φ/2) = 5 cm
    let phi = 2.0 * (0.05f64 / 1.0).asin();
    let frame = |z: f64| PoseFrame {
        t: 0.0,
        theta: vec![AxisAngle::new(0.0, 0.0, z), AxisAngle::zero()],
        root: Vector3::zeros(),
    };
    let hand = positional_error(&[frame(0.0)], &[frame(phi)], &chain).unwrap();
    passed += line(
        7,
        (geo - 90.0).abs() < 1e-9 && (cubic - 6.0).abs() < 1e-6 && quad.abs() < 1e-9 && (hand - 2.5).abs() < 1e-9,
        format!("geodesic {geo:.12}°, cubic jerk {cubic:.9}, quadratic jerk {quad:.2e}, hand chain {hand:.9} cm"),
    ) as usize;

    // 8. real-time streaming
    let clip = &test_data.clips[0];
    let cfg8 = StreamConfig {
        rate_hz: test_data.rate_hz,
        paced: true,
    };
    let rep = stream_replay(&clip.loose, &test_data.layout, Some(&h.gid), &h.predictor, &cfg8).unwrap();
    let x = normalize_root_relative(&clip.loose, &test_data.layout).unwrap();
    let (den, poses) = offline_reference(&x, Some(&h.gid), &h.predictor, test_data.rate_hz).unwrap();
    let dev = max_deviation(&rep, &den, &poses).unwrap();
    passed += line(
        8,
        rep.frames == clip.loose.len() && rep.p99_ms < 25.0 && dev < 1e-4,
        format!(
            "{} frames at 40 Hz, p50 {:.2} ms, p99 {:.2} ms (limit 25), overruns {}, max deviation {dev:.2e} (limit 1e-4)",
            rep.frames, rep.p50_ms, rep.p99_ms, rep.overruns
        ),
    ) as usize;

    // 9. reproducibility: regenerate and retrain from scratch
    let root2 = root.join("rerun");
    let (h2, _) = headline(&root2, &run, &test, &perturbed);
    let same_files = ["manifest.txt", "clip000.loose.imu", "clip019.pose"]
        .iter()
        .all(|f| fs::read(root.join("train").join(f)).unwrap() == fs::read(root2.join("train").join(f)).unwrap());
    let w2 = h2.eval.row("with_gid").unwrap();
    let wo2 = h2.eval.row("without_gid").unwrap();
    let pairs = [
        ("ratio", h.ratio, h2.ratio),
        ("ang_with", w.ang_deg, w2.ang_deg),
        ("ang_without", wo.ang_deg, wo2.ang_deg),
        ("pos_with", w.pos_cm, w2.pos_cm),
        ("perturbed_worst", worst6, h2.perturbed.iter().copied().fold(0.0, f64::max)),
    ];
    let worst9 = pairs
        .iter()
        .map(|(_, a, b)| (a - b).abs() / a.abs().max(b.abs()))
        .fold(0.0, f64::max);
    passed += line(
        9,
        same_files && pairs.iter().all(|(_, a, b)| rel_close(*a, *b, 0.05)),
        format!("data files identical {same_files}, largest relative change {worst9:.2e} over {} values (limit 5%)", pairs.len()),
    ) as usize;

    println!("acceptance: {passed}/9 criteria passed");
}
