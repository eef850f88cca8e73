use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spikewatch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

// Small shape so every command finishes in seconds.
const TINY: &str = "\
input_size = 32
channels = [2, 4, 4, 8]
depths = [1, 1, 1, 1]
template_slots = 2
mlp_ratio = 1
head_mid = 2
";

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

/// A bright square drifting right over a dark field, one PNG per frame.
fn synth_frames(dir: &Path, n: usize) {
    for i in 0..n {
        let mut img = image::RgbImage::from_pixel(48, 48, image::Rgb([30, 30, 30]));
        let x0 = 16 + (i as u32 % 8);
        for y in 18..30 {
            for x in x0..x0 + 12 {
                img.put_pixel(x, y, image::Rgb([250, 240, 40]));
            }
        }
        img.save(dir.join(format!("frame_{i:03}.png"))).unwrap();
    }
}

fn init_box_file(dir: &Path) -> PathBuf {
    let p = dir.join("init.txt");
    fs::write(&p, "16,18,12,12\n").unwrap();
    p
}

struct TrackSetup {
    _tmp: TempDir,
    config: PathBuf,
    frames: PathBuf,
    init: PathBuf,
    dir: PathBuf,
}

fn track_setup(n_frames: usize) -> TrackSetup {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().to_path_buf();
    let frames = dir.join("frames");
    fs::create_dir(&frames).unwrap();
    synth_frames(&frames, n_frames);
    TrackSetup {
        config: tiny_config(&dir),
        init: init_box_file(&dir),
        frames,
        dir,
        _tmp: tmp,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn track_writes_one_line_per_frame() {
    let t = track_setup(10);
    let out_path = t.dir.join("boxes.txt");
    let out = run(&[
        "track",
        "--config", s(&t.config),
        "--frames", s(&t.frames),
        "--init-box", s(&t.init),
        "--out", s(&out_path),
        "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = fs::read_to_string(&out_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    assert!(lines[0].starts_with("0 16.00 18.00 12.00 12.00 1.0000"));
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 6, "bad line: {line}");
        assert_eq!(fields[0], i.to_string());
        for f in &fields[1..] {
            f.parse::<f64>().unwrap();
        }
    }
}

#[test]
fn track_is_byte_identical_under_a_fixed_seed() {
    let t = track_setup(6);
    let (a, b) = (t.dir.join("a.txt"), t.dir.join("b.txt"));
    for p in [&a, &b] {
        let out = run(&[
            "track",
            "--config", s(&t.config),
            "--frames", s(&t.frames),
            "--init-box", s(&t.init),
            "--out", s(p),
            "--seed", "7",
        ]);
        assert!(out.status.success(), "{}", stderr_of(&out));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn track_fails_on_an_empty_frame_dir() {
    let t = track_setup(1);
    let empty = t.dir.join("empty");
    fs::create_dir(&empty).unwrap();
    let out = run(&[
        "track",
        "--config", s(&t.config),
        "--frames", s(&empty),
        "--init-box", s(&t.init),
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("no .png frames"), "{}", stderr_of(&out));
}

#[test]
fn track_rejects_a_malformed_init_box() {
    let t = track_setup(2);
    let bad = t.dir.join("bad.txt");
    fs::write(&bad, "16,18,oops,12").unwrap();
    let out = run(&[
        "track",
        "--config", s(&t.config),
        "--frames", s(&t.frames),
        "--init-box", s(&bad),
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("bad box field"), "{}", stderr_of(&out));
}

#[test]
fn track_emits_a_consistent_energy_report() {
    let t = track_setup(4);
    let report_path = t.dir.join("energy.json");
    let out = run(&[
        "track",
        "--config", s(&t.config),
        "--frames", s(&t.frames),
        "--init-box", s(&t.init),
        "--out", s(&t.dir.join("boxes.txt")),
        "--energy-report", s(&report_path),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(!v["rows"].as_array().unwrap().is_empty());
    let (total, tpl, search) = (
        v["total_b_pj"].as_f64().unwrap(),
        v["template_b_pj"].as_f64().unwrap(),
        v["search_b_pj"].as_f64().unwrap(),
    );
    assert!(total > 0.0);
    assert!((total - (tpl + search)).abs() <= 1e-6 * total);
    let per_frame = v["per_frame_b_pj"].as_f64().unwrap();
    let interval = v["update_interval"].as_f64().unwrap();
    assert!((per_frame - (search + tpl / interval)).abs() <= 1e-9 * per_frame);
}

#[test]
fn gen_weights_round_trips_through_track_and_profile() {
    let t = track_setup(5);
    let weights = t.dir.join("w.bin");
    let out = run(&[
        "gen-weights",
        "--config", s(&t.config),
        "--seed", "1",
        "--out", s(&weights),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let boxes = t.dir.join("boxes.txt");
    let out = run(&[
        "track",
        "--config", s(&t.config),
        "--weights", s(&weights),
        "--frames", s(&t.frames),
        "--init-box", s(&t.init),
        "--out", s(&boxes),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert_eq!(fs::read_to_string(&boxes).unwrap().lines().count(), 5);

    let out = run(&[
        "profile",
        "--config", s(&t.config),
        "--weights", s(&weights),
        "--frames", s(&t.frames),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("E_a (pJ)") && text.contains("E_b (pJ)"), "{text}");
    assert!(text.contains("rate readings"), "{text}");
    assert!(text.contains("per frame at template interval 25"), "{text}");
}

#[test]
fn profile_without_weights_fails() {
    let t = track_setup(1);
    let out = run(&["profile", "--config", s(&t.config), "--frames", s(&t.frames)]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("--weights"), "{}", stderr_of(&out));
}

#[test]
fn zero_weights_price_less_than_live_weights() {
    use spikewatch::backbone::{init_store, ModelConfig};

    let t = track_setup(1);
    let cfg = ModelConfig {
        input_size: 32,
        channels: vec![2, 4, 4, 8],
        depths: vec![1, 1, 1, 1],
        template_slots: 2,
        mlp_ratio: 1,
        head_mid: 2,
        ..ModelConfig::desk()
    };
    let mut zero = init_store(&cfg, 0).unwrap();
    let names: Vec<String> = zero.names().map(|s| s.to_string()).collect();
    for n in &names {
        for v in &mut zero.get_mut(n).unwrap().data {
            *v = 0.0;
        }
    }
    let zero_path = t.dir.join("zero.bin");
    zero.save(&zero_path).unwrap();
    let live_path = t.dir.join("live.bin");
    init_store(&cfg, 1).unwrap().save(&live_path).unwrap();

    let mut totals = Vec::new();
    for (w, name) in [(&zero_path, "z.json"), (&live_path, "l.json")] {
        let report = t.dir.join(name);
        let out = run(&[
            "profile",
            "--config", s(&t.config),
            "--weights", s(w),
            "--frames", s(&t.frames),
            "--out", s(&report),
        ]);
        assert!(out.status.success(), "{}", stderr_of(&out));
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        totals.push(v["total_b_pj"].as_f64().unwrap());
    }
    // Zero weights silence every spike-driven layer; only the dense stem
    // (priced on input activity) remains.
    assert!(totals[0] > 0.0);
    assert!(totals[0] < 0.05 * totals[1], "zero {} vs live {}", totals[0], totals[1]);
}

#[test]
fn profile_prices_an_imported_table_without_weights() {
    let t = track_setup(1);
    let table = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/assets/sfr_b256_t3_template.tsv");
    let report = t.dir.join("table.json");
    let out = run(&[
        "profile",
        "--sfr-table", s(&table),
        "--out", s(&report),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 125);
    assert_eq!(v["search_b_pj"].as_f64().unwrap(), 0.0);
    assert!(v["total_b_pj"].as_f64().unwrap() > 0.0);
    assert_eq!(v["update_interval"].as_f64().unwrap(), 25.0);
}

#[test]
fn selftest_passes_and_names_each_check() {
    let out = run(&["selftest", "--seed", "5"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for name in ["neuron-conservation", "attention-orders", "tracker-protocol", "energy-pricing"] {
        assert!(text.contains(&format!("ok {name}:")), "{text}");
    }
    assert!(text.contains("all checks passed"));
}

#[test]
fn train_toy_reports_loss_and_iou() {
    let t = track_setup(1);
    let weights = t.dir.join("trained.bin");
    let out = run(&[
        "train-toy",
        "--config", s(&t.config),
        "--steps", "2",
        "--seed", "1",
        "--out", s(&weights),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("loss"), "{text}");
    assert!(text.contains("mean IoU"), "{text}");
    assert!(weights.exists());
}
