//! End-to-end checks of the `idmatch` binary: exit codes, printed summary
//! lines, output file shapes, and byte-level determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use idmatch::formats::write_pgm;
use idmatch::tensor::Tensor;
use tempfile::TempDir;

fn idmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idmatch"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout should be utf-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr should be utf-8")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process should exit, not be signalled")
}

#[test]
fn help_and_version_succeed_while_usage_errors_exit_one() {
    assert_eq!(code(&idmatch(&["--help"])), 0);
    assert_eq!(code(&idmatch(&["--version"])), 0);
    assert_eq!(code(&idmatch(&["img-score", "--help"])), 0);

    // No subcommand, unknown flag, and a malformed value parser argument are
    // all usage errors.
    assert_eq!(code(&idmatch(&[])), 1);
    assert_eq!(code(&idmatch(&["synth-gen", "--nonsense"])), 1);
    assert_eq!(code(&idmatch(&["ieg-render", "--poses", "p", "--assign", "a", "--size", "64", "--out", "o"])), 1);
    let bad_mode = idmatch(&["img-score", "--features-ref", "x", "--features-gen", "x", "--masks-ref", "x", "--masks-gen", "x", "--matching", "x", "--mode", "bogus"]);
    assert_eq!(code(&bad_mode), 1);
}

#[test]
fn missing_input_file_exits_two_and_names_the_path() {
    let out = idmatch(&["img-score", "--features-ref", "/nonexistent/f.tsr", "--features-gen", "/nonexistent/f.tsr", "--masks-ref", "/nonexistent", "--masks-gen", "/nonexistent", "--matching", "/nonexistent/m.json"]);
    assert_eq!(code(&out), 2);
    let err = stderr_of(&out);
    assert!(err.starts_with("error:"), "stderr should lead with error: {err}");
    assert!(err.contains("/nonexistent"), "stderr should name the path: {err}");
}

/// Two characters occupying the left and right halves of the frame, with
/// identical reference and generated features. Returns the fixture dir.
fn identical_halves_fixture() -> TempDir {
    let dir = TempDir::new().expect("tempdir");
    let (h, w, c) = (4usize, 8usize, 4usize);
    let features = Tensor::from_fn(&[c, h, w], |flat| {
        let (ch, x) = (flat / (h * w), flat % w);
        let id = if x < w / 2 { 0 } else { 1 };
        if ch == id { 5.0 } else { 0.1 * ch as f64 }
    });
    features.save_tsr(dir.path().join("f_ref.tsr")).expect("save");
    features.save_tsr(dir.path().join("f_gen.tsr")).expect("save");

    for side in ["ref", "gen"] {
        let mdir = dir.path().join(format!("masks_{side}"));
        fs::create_dir(&mdir).expect("mask dir");
        for id in 0..2usize {
            let pixels: Vec<u8> = (0..h * w)
                .map(|p| {
                    let left = p % w < w / 2;
                    if left == (id == 0) { 255 } else { 0 }
                })
                .collect();
            write_pgm(mdir.join(format!("{id}.pgm")), w, h, &pixels).expect("pgm");
        }
    }
    fs::write(
        dir.path().join("matching.json"),
        r#"{"pairs":[{"gen":0,"ref":0},{"gen":1,"ref":1}]}"#,
    )
    .expect("matching");
    dir
}

#[test]
fn img_score_on_identical_features_is_high_and_deterministic() {
    let dir = identical_halves_fixture();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let args = [
        "img-score",
        "--features-ref",
        &p("f_ref.tsr"),
        "--features-gen",
        &p("f_gen.tsr"),
        "--masks-ref",
        &p("masks_ref"),
        "--masks-gen",
        &p("masks_gen"),
        "--matching",
        &p("matching.json"),
        "--out",
        &p("weights.csv"),
    ];
    let out = idmatch(&args.iter().map(|s| &**s).collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let line = stdout_of(&out);
    let value: f64 = line
        .trim()
        .strip_prefix("C,")
        .expect("summary line should start with C,")
        .parse()
        .expect("score should parse");
    assert!(value > 0.95, "identical features should score near 1, got {value}");

    let csv = fs::read_to_string(dir.path().join("weights.csv")).expect("weights csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("gen,ref,weight"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4, "2x2 identity grid");
    for g in 0..2 {
        let total: f64 = rows
            .iter()
            .filter(|r| r[0] == g.to_string())
            .map(|r| r[2].parse::<f64>().expect("weight"))
            .sum();
        assert!(total > 0.99 && total <= 1.0 + 1e-12, "weights for gen {g} should nearly sum to 1, got {total}");
    }

    let again = idmatch(&args.iter().map(|s| &**s).collect::<Vec<_>>());
    assert_eq!(out.stdout, again.stdout, "same flags and seed must reproduce the same score");
}

#[test]
fn pcs_plan_with_rho_one_draws_only_swap_pairs() {
    let dir = TempDir::new().expect("tempdir");
    // Six frames of two characters; positions swap at the midpoint, so every
    // pair crossing the midpoint is a swap pair: 18 of the 30 ordered pairs.
    let mut frames = Vec::new();
    for i in 0..6u32 {
        let (a, b) = if i < 3 { (10.0, 90.0) } else { (90.0, 10.0) };
        frames.push(format!(
            r#"{{"index":{i},"chars":[{{"id":0,"cx":{a}}},{{"id":1,"cx":{b}}}]}}"#
        ));
    }
    let doc = format!(r#"{{"frames":[{}]}}"#, frames.join(","));
    let positions = dir.path().join("positions.json");
    fs::write(&positions, doc).expect("positions");
    let out_csv = dir.path().join("plan.csv");

    let out = idmatch(&[
        "pcs-plan",
        "--positions",
        positions.to_str().unwrap(),
        "--rho",
        "1.0",
        "--draws",
        "500",
        "--seed",
        "11",
        "--out",
        out_csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));

    let csv = fs::read_to_string(&out_csv).expect("plan csv");
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("draws,swap_draws,swap_fraction,swap_pairs,all_pairs,excluded_frames")
    );
    let row: Vec<&str> = lines.next().expect("stats row").split(',').collect();
    assert_eq!(row[0], "500");
    assert_eq!(row[1], "500", "rho=1 must draw from the swap pool every time");
    assert_eq!(row[2].parse::<f64>().expect("fraction"), 1.0);
    assert_eq!(row[3], "18");
    assert_eq!(row[4], "30");
    assert_eq!(row[5], "0");
}

#[test]
fn synth_gen_reproduces_the_bundled_demo_dataset() {
    let dir = TempDir::new().expect("tempdir");
    let out = idmatch(&[
        "synth-gen",
        "--chars",
        "2",
        "--count",
        "10",
        "--swap-share",
        "0.5",
        "--channels",
        "16",
        "--corrupt",
        "0",
        "--seed",
        "201",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out).trim(), format!("wrote 10 scenes under {}", dir.path().display()));

    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/demo");
    let same = |rel: &str| {
        let ours = fs::read(dir.path().join(rel)).unwrap_or_else(|_| panic!("missing generated {rel}"));
        let theirs = fs::read(bundled.join(rel)).unwrap_or_else(|_| panic!("missing bundled {rel}"));
        assert_eq!(ours, theirs, "{rel} should be byte-identical to the bundled copy");
    };
    same("manifest.ndjson");
    for scene in 0..10 {
        for file in [
            "f_ref.tsr",
            "cue.tsr",
            "target.tsr",
            "matching.json",
            "ref_0.pgm",
            "ref_1.pgm",
            "gen_0.pgm",
            "gen_1.pgm",
        ] {
            same(&format!("scene_{scene:04}/{file}"));
        }
    }
}

#[test]
fn train_demo_and_evaluate_round_trip() {
    let dir = TempDir::new().expect("tempdir");
    let data = dir.path().join("data");
    let gen = idmatch(&[
        "synth-gen",
        "--chars",
        "2",
        "--count",
        "2",
        "--swap-share",
        "0.5",
        "--height",
        "8",
        "--width",
        "8",
        "--corrupt",
        "0",
        "--seed",
        "5",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&gen), 0, "stderr: {}", stderr_of(&gen));

    let cfg = data.join("run.cfg");
    fs::write(
        &cfg,
        "lambda=0.2\nrho=0.3\nlayers=2\nsteps=30\nlr=0.05\nseed=1\nmanifest=manifest.ndjson\nbackground_mask=false\nmode=fast\n",
    )
    .expect("config");

    let metrics = dir.path().join("metrics.csv");
    let model = dir.path().join("model.tsr");
    let train_args = [
        "train-demo",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
        "--model-out",
        model.to_str().unwrap(),
    ];
    let out = idmatch(&train_args.iter().map(|s| &**s).collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let line = stdout_of(&out);
    assert!(line.starts_with("c_mean,"), "summary line: {line}");

    let csv = fs::read_to_string(&metrics).expect("metrics csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,l_diff,l_match,l_total,c_mean,c_l1,c_l2"));
    assert_eq!(lines.count(), 30, "one row per step");

    // Same flags, same bytes; a different seed changes the trajectory.
    let metrics2 = dir.path().join("metrics2.csv");
    let rerun = idmatch(&[
        "train-demo",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        metrics2.to_str().unwrap(),
    ]);
    assert_eq!(code(&rerun), 0);
    assert_eq!(fs::read(&metrics).unwrap(), fs::read(&metrics2).unwrap());
    let metrics3 = dir.path().join("metrics3.csv");
    let reseeded = idmatch(&[
        "train-demo",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        metrics3.to_str().unwrap(),
    ]);
    assert_eq!(code(&reseeded), 0);
    assert_ne!(fs::read(&metrics).unwrap(), fs::read(&metrics3).unwrap());

    let eval = dir.path().join("eval.csv");
    let out = idmatch(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).starts_with("mean_c,"));

    let csv = fs::read_to_string(&eval).expect("eval csv");
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "scene,c_l1,c_l2,c_mean");
    assert_eq!(rows.len(), 4, "two scene rows plus the mean row");
    assert!(rows[3].starts_with("mean,"));
}

#[test]
fn gradcheck_reports_a_tiny_relative_error() {
    let out = idmatch(&["gradcheck", "--scene", "3"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let line = stdout_of(&out);
    let worst: f64 = line
        .trim()
        .strip_prefix("max_rel_err,")
        .expect("summary line should start with max_rel_err,")
        .parse()
        .expect("error should parse");
    assert!(worst <= 1e-4, "tape and finite differences disagree: {worst}");
}

fn person_json(cx: f64, cy: f64) -> String {
    let kps: Vec<String> = (0..17)
        .map(|i| format!("[{},{},0.9]", cx + (i % 5) as f64, cy + (i / 5) as f64))
        .collect();
    format!(r#"{{"keypoints":[{}]}}"#, kps.join(","))
}

#[test]
fn ieg_assign_then_render_produces_a_ppm() {
    let dir = TempDir::new().expect("tempdir");
    let poses = dir.path().join("poses.json");
    let doc = format!(
        r#"{{"frames":[{{"index":0,"persons":[{},{}],"boxes":[{{"id":0,"x0":0,"y0":0,"x1":30,"y1":30}},{{"id":1,"x0":60,"y0":0,"x1":100,"y1":30}}]}}]}}"#,
        person_json(10.0, 10.0),
        person_json(80.0, 10.0),
    );
    fs::write(&poses, doc).expect("poses");

    let assign = dir.path().join("assign.json");
    let out = idmatch(&[
        "ieg-assign",
        "--poses",
        poses.to_str().unwrap(),
        "--out",
        assign.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&assign).expect("assignment")).expect("json");
    let matches = parsed["frames"][0]["matches"].as_array().expect("matches");
    assert_eq!(matches.len(), 2);
    assert_eq!(matches[0]["person"], 0);
    assert_eq!(matches[0]["id"], 0);
    assert_eq!(matches[1]["person"], 1);
    assert_eq!(matches[1]["id"], 1);

    let ppm = dir.path().join("frame.ppm");
    let render = |path: &Path| {
        idmatch(&[
            "ieg-render",
            "--poses",
            poses.to_str().unwrap(),
            "--assign",
            assign.to_str().unwrap(),
            "--size",
            "64x48",
            "--out",
            path.to_str().unwrap(),
        ])
    };
    let out = render(&ppm);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let bytes = fs::read(&ppm).expect("ppm");
    let header = b"P6\n64 48\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 64 * 48 * 3);

    let ppm2 = dir.path().join("frame2.ppm");
    render(&ppm2);
    assert_eq!(bytes, fs::read(&ppm2).expect("ppm2"), "rendering must be deterministic");

    // Asking for a frame the pose file does not contain is a data error.
    let missing = idmatch(&[
        "ieg-render",
        "--poses",
        poses.to_str().unwrap(),
        "--assign",
        assign.to_str().unwrap(),
        "--frame",
        "7",
        "--out",
        ppm.to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 2);
    assert!(stderr_of(&missing).contains("no frame 7"));
}
