//! Command-line front end for the tracking engine.
//!
//! Subcommands: `track` runs the tracker over a directory of PNG frames,
//! `profile` prices a template + search pass (or an imported firing-rate
//! table), `train-toy` overfits the synthetic sequence, `selftest` runs the
//! library's invariant checks, and `gen-weights` writes a seeded random
//! weight container. Every command is deterministic under a fixed seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use spikewatch::backbone::{init_store, Model, ModelConfig};
use spikewatch::energy::{parse_sfr_table, report_from_table, EnergyModel, EnergyReport};
use spikewatch::selftest::all_checks;
use spikewatch::tensor::DenseTensor;
use spikewatch::tracker::{PixelBox, Prediction, Tracker, TrackerConfig};
use spikewatch::train::{toy_train, TrainConfig};
use spikewatch::weights::ParamStore;

#[derive(Parser)]
#[command(name = "spikewatch", version, about = "Spike-driven single-object tracker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Track one target through a directory of frames.
    Track(TrackArgs),
    /// Price a template + search pass, or an imported firing-rate table.
    Profile(ProfileArgs),
    /// Overfit the synthetic sequence and report loss and IoU.
    TrainToy(TrainToyArgs),
    /// Run the library invariant checks; exits nonzero on the first failure.
    Selftest(SelftestArgs),
    /// Write a randomly initialized weight container for a config.
    GenWeights(GenWeightsArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Refresh every 25 frames when confidence clears 0.7.
    Default,
    /// Slower refresh (40) with a stricter gate (0.8).
    Lasot,
}

#[derive(Args)]
struct TrackArgs {
    /// Model/tracker config file (TOML); defaults to the desk-scale shape.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight container; omitted = random init from --seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Directory of 8-bit RGB PNG frames, tracked in filename order.
    #[arg(long)]
    frames: PathBuf,
    /// File holding the first-frame target box as "x,y,w,h" in pixels.
    #[arg(long)]
    init_box: PathBuf,
    /// Per-frame output file ("frame_idx x y w h score"); default stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an energy report (.json for machine-readable).
    #[arg(long)]
    energy_report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight container to price (required unless --sfr-table is given).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Directory holding at least one sample frame.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Price an imported firing-rate table instead of running the network.
    #[arg(long)]
    sfr_table: Option<PathBuf>,
    /// Report file (.json for machine-readable); default stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Model config; defaults to the fast toy shape.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    /// Write the trained weights here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenWeightsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Config file schema. Every key is optional; omitted keys keep the
/// desk-scale defaults (`spikewatch track --help` documents the flags,
/// the README documents this schema).
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    input_size: Option<usize>,
    in_channels: Option<usize>,
    channels: Option<Vec<usize>>,
    depths: Option<Vec<usize>>,
    gamma: Option<usize>,
    d_cap: Option<u32>,
    template_slots: Option<usize>,
    mlp_ratio: Option<usize>,
    head_mid: Option<usize>,
    mrm_loops: Option<usize>,
    mrm_layerscale: Option<bool>,
    /// Optional fifth stage as [channels, depth].
    stage5: Option<(usize, usize)>,
    #[serde(default)]
    tracker: TrackerFileConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackerFileConfig {
    crop_expansion: Option<f64>,
    update_interval: Option<u32>,
    update_threshold: Option<f64>,
    hanning: Option<bool>,
    window_weight: Option<f64>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    fn model(&self, base: ModelConfig) -> Result<ModelConfig> {
        let mut m = base;
        if let Some(v) = self.input_size {
            m.input_size = v;
        }
        if let Some(v) = self.in_channels {
            m.in_channels = v;
        }
        if let Some(v) = &self.channels {
            m.channels = v.clone();
        }
        if let Some(v) = &self.depths {
            m.depths = v.clone();
        }
        if let Some(v) = self.gamma {
            m.gamma = v;
        }
        if let Some(v) = self.d_cap {
            m.d_cap = v;
        }
        if let Some(v) = self.template_slots {
            m.template_slots = v;
        }
        if let Some(v) = self.mlp_ratio {
            m.mlp_ratio = v;
        }
        if let Some(v) = self.head_mid {
            m.head_mid = v;
        }
        if let Some(v) = self.mrm_loops {
            m.mrm_loops = v;
        }
        if let Some(v) = self.mrm_layerscale {
            m.mrm_layerscale = v;
        }
        if let Some(v) = self.stage5 {
            m.stage5 = Some(v);
        }
        m.validate()?;
        Ok(m)
    }

    /// Preset first, explicit file keys win.
    fn tracker(&self, model: &ModelConfig, preset: Preset) -> Result<TrackerConfig> {
        let mut t = match preset {
            Preset::Default => TrackerConfig::for_model(model),
            Preset::Lasot => TrackerConfig::lasot(model),
        };
        let f = &self.tracker;
        if let Some(v) = f.crop_expansion {
            t.crop_expansion = v;
        }
        if let Some(v) = f.update_interval {
            t.update_interval = v;
        }
        if let Some(v) = f.update_threshold {
            t.update_threshold = v;
        }
        if let Some(v) = f.hanning {
            t.hanning = v;
        }
        if let Some(v) = f.window_weight {
            t.window_weight = v;
        }
        t.validate()?;
        Ok(t)
    }
}

/// Load one 8-bit RGB PNG as [3, H, W] in [0, 1].
fn load_png(path: &Path) -> Result<DenseTensor> {
    let img = image::open(path)
        .with_context(|| format!("reading frame {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(DenseTensor::new(vec![3, h, w], data)?)
}

/// PNG paths in a directory, lexicographic by filename.
fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading frame directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map_or(false, |e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .png frames in {}", dir.display());
    }
    Ok(paths)
}

fn load_model(cfg: &ModelConfig, weights: Option<&Path>, seed: u64) -> Result<Model> {
    match weights {
        Some(p) => {
            let store = ParamStore::load(p)
                .with_context(|| format!("loading weights {}", p.display()))?;
            Ok(Model::from_store(cfg.clone(), &store)?)
        }
        None => Ok(Model::init(cfg, seed)?),
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn render_report(report: &EnergyReport, path: Option<&Path>) -> String {
    let json = path
        .and_then(|p| p.extension())
        .and_then(|e| e.to_str())
        .map_or(false, |e| e.eq_ignore_ascii_case("json"));
    if json {
        report.to_json()
    } else {
        report.to_text()
    }
}

fn cmd_track(a: &TrackArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let model_cfg = file.model(ModelConfig::desk())?;
    let mut tracker_cfg = file.tracker(&model_cfg, a.preset)?;
    tracker_cfg.tracing = a.energy_report.is_some();

    let model = load_model(&model_cfg, a.weights.as_deref(), a.seed)?;
    let box_text = fs::read_to_string(&a.init_box)
        .with_context(|| format!("reading init box {}", a.init_box.display()))?;
    let init = PixelBox::parse(&box_text)?;
    let paths = frame_paths(&a.frames)?;

    let first = load_png(&paths[0])?;
    let mut tracker = Tracker::init(model, &first, &init, tracker_cfg)?;
    let mut lines = vec![Prediction { frame_idx: 0, bbox: init, score: 1.0 }.report_line()];
    for p in &paths[1..] {
        let frame = load_png(p)?;
        lines.push(tracker.track(&frame)?.report_line());
    }
    lines.push(String::new());
    write_or_print(a.out.as_deref(), &lines.join("\n"))?;

    if let Some(p) = &a.energy_report {
        let report = tracker.energy_report();
        fs::write(p, render_report(&report, Some(p)))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_profile(a: &ProfileArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let model_cfg = file.model(ModelConfig::desk())?;
    let mut tracker_cfg = file.tracker(&model_cfg, a.preset)?;

    let report = if let Some(table) = &a.sfr_table {
        let text = fs::read_to_string(table)
            .with_context(|| format!("reading firing-rate table {}", table.display()))?;
        let rows = parse_sfr_table(&text)?;
        report_from_table(&EnergyModel::default(), &rows, tracker_cfg.update_interval)
    } else {
        let weights = a
            .weights
            .as_deref()
            .context("profile needs --weights (or --sfr-table for table mode)")?;
        let frames = a
            .frames
            .as_deref()
            .context("profile needs --frames with at least one sample frame")?;
        let model = load_model(&model_cfg, Some(weights), 0)?;
        let sample = load_png(&frame_paths(frames)?[0])?;
        let (h, w) = (sample.shape[1] as f64, sample.shape[2] as f64);
        let target = PixelBox::from_center(w / 2.0, h / 2.0, w / 2.0, h / 2.0);
        tracker_cfg.tracing = true;
        let mut tracker = Tracker::init(model, &sample, &target, tracker_cfg)?;
        tracker.track(&sample)?;
        tracker.energy_report()
    };
    write_or_print(a.out.as_deref(), &render_report(&report, a.out.as_deref()))
}

fn cmd_train_toy(a: &TrainToyArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let cfg = file.model(ModelConfig::toy())?;
    let tc = TrainConfig { seed: a.seed, steps: a.steps, ..TrainConfig::default() };
    let report = toy_train(&cfg, &tc)?;
    let first = report.loss_history.first().copied().unwrap_or(f64::NAN);
    let last = report.loss_history.last().copied().unwrap_or(f64::NAN);
    println!("steps {}  loss {:.4} -> {:.4} ({:.3}x)", tc.steps, first, last, last / first);
    println!("mean IoU over the sequence: {:.3}", report.mean_iou);
    if let Some(p) = &a.out {
        report.store.save(p)?;
        println!("weights written to {}", p.display());
    }
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs) -> Result<()> {
    for check in all_checks() {
        match (check.run)(a.seed) {
            Ok(detail) => println!("ok {}: {detail}", check.name),
            Err(e) => bail!("selftest {} failed: {e}", check.name),
        }
    }
    println!("all checks passed (seed {})", a.seed);
    Ok(())
}

fn cmd_gen_weights(a: &GenWeightsArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let cfg = file.model(ModelConfig::desk())?;
    let store = init_store(&cfg, a.seed)?;
    store.save(&a.out)?;
    println!("wrote {} tensors to {}", store.len(), a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Track(a) => cmd_track(a),
        Cmd::Profile(a) => cmd_profile(a),
        Cmd::TrainToy(a) => cmd_train_toy(a),
        Cmd::Selftest(a) => cmd_selftest(a),
        Cmd::GenWeights(a) => cmd_gen_weights(a),
    }
}
