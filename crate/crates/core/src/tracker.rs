//! Tracking protocol: crop extraction, template queue, per-frame loop.
//!
//! The tracker is asymmetric. Initialization crops the target, fills every
//! template slot with that crop, runs the template branch once, and caches
//! the memory bank. Each frame then costs one search pass: crop around the
//! previous prediction, run the search branch against the cached bank,
//! decode under an optional Hanning penalty, and map the box back to image
//! coordinates. Every `update_interval` frames, if the confidence clears the
//! threshold, the current crop enters the queue (slot 0 stays pinned to the
//! initial template), the template branch reruns, and the bank is rebuilt.
//!
//! Crops are square with side `expansion * sqrt(w * h)`, zero-padded where
//! they leave the frame, and resized bilinearly (align-corners false, so
//! output pixel u samples source coordinate x0 + (u + 0.5) * side / out).
//! Template and search crops share one expansion and one resolution, which
//! is what lets an updated search crop serve directly as a template.

use crate::attention::ProductOrder;
use crate::backbone::{Model, ModelConfig};
use crate::blocks::split_time;
use crate::energy::{build_report, Branch, EnergyModel, EnergyReport, Probe};
use crate::error::{Error, Result};
use crate::head::{decode_box, head_forward, BoxCxCyWh, WindowCfg, WindowMode};
use crate::mrm::MemoryBank;
use crate::nnops::{hanning_2d, PathKind};
use crate::tensor::DenseTensor;

/// Axis-aligned box in image pixels: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelBox {
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        PixelBox { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.x, self.y, self.w, self.h] {
            if !v.is_finite() {
                return Err(Error::Value(format!("box field {v} is not finite")));
            }
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Value(format!(
                "degenerate box: {} x {}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    /// Parse "x,y,w,h" (commas and/or whitespace), the init-box file format.
    pub fn parse(text: &str) -> Result<Self> {
        let fields: Vec<f64> = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad box field '{f}': {e}")))
            })
            .collect::<Result<_>>()?;
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "init box needs 4 fields x,y,w,h, got {}",
                fields.len()
            )));
        }
        let b = PixelBox { x: fields[0], y: fields[1], w: fields[2], h: fields[3] };
        b.validate()?;
        Ok(b)
    }
}

/// Mapping between frame pixels and one square crop window.
///
/// The window covers `[x0, x0 + side) x [y0, y0 + side)` in frame pixels and
/// is resampled to an `out x out` image, so one frame pixel spans
/// `out / side` crop pixels. Box mapping works on the normalized crop
/// coordinates the decoder emits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out: usize,
}

impl Affine {
    /// Crop pixels per frame pixel.
    pub fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    pub fn point_to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) * self.scale(), (y - self.y0) * self.scale())
    }

    pub fn point_to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        (self.x0 + u / self.scale(), self.y0 + v / self.scale())
    }

    /// Frame-pixel box -> normalized crop box.
    pub fn box_to_crop(&self, b: &PixelBox) -> BoxCxCyWh {
        let (cx, cy) = b.center();
        BoxCxCyWh {
            cx: (cx - self.x0) / self.side,
            cy: (cy - self.y0) / self.side,
            w: b.w / self.side,
            h: b.h / self.side,
        }
    }

    /// Normalized crop box (decoder output) -> frame-pixel box.
    pub fn box_to_frame(&self, b: &BoxCxCyWh) -> PixelBox {
        PixelBox::from_center(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }
}

/// Square crop of side `expansion * sqrt(w * h)` centered on the box, zero
/// padded outside the frame, bilinearly resized to `out_size`. Returns the
/// crop `[C, out, out]` and the affine mapping for decoding back.
pub fn crop(
    frame: &DenseTensor,
    b: &PixelBox,
    expansion: f64,
    out_size: usize,
) -> Result<(DenseTensor, Affine)> {
    if frame.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "crop expects a [C, H, W] frame, got {:?}",
            frame.shape
        )));
    }
    if out_size == 0 {
        return Err(Error::Config("crop output size must be positive".into()));
    }
    if !(expansion > 0.0 && expansion.is_finite()) {
        return Err(Error::Config(format!("crop expansion must be positive, got {expansion}")));
    }
    b.validate()?;
    let side = expansion * (b.w * b.h).sqrt();
    let (cx, cy) = b.center();
    let aff = Affine { x0: cx - 0.5 * side, y0: cy - 0.5 * side, side, out: out_size };

    let (c, h, w) = (frame.shape[0], frame.shape[1], frame.shape[2]);
    let step = side / out_size as f64;
    let mut data = vec![0.0; c * out_size * out_size];
    // pixel index i has its center at i + 0.5, hence the half-pixel shifts
    let pick = |ch: usize, yi: isize, xi: isize| -> f64 {
        if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
            0.0
        } else {
            frame.data[(ch * h + yi as usize) * w + xi as usize]
        }
    };
    for v in 0..out_size {
        let sy = aff.y0 + (v as f64 + 0.5) * step - 0.5;
        let y_lo = sy.floor();
        let fy = sy - y_lo;
        let yi = y_lo as isize;
        for u in 0..out_size {
            let sx = aff.x0 + (u as f64 + 0.5) * step - 0.5;
            let x_lo = sx.floor();
            let fx = sx - x_lo;
            let xi = x_lo as isize;
            for ch in 0..c {
                let p00 = pick(ch, yi, xi);
                let p01 = pick(ch, yi, xi + 1);
                let p10 = pick(ch, yi + 1, xi);
                let p11 = pick(ch, yi + 1, xi + 1);
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                data[(ch * out_size + v) * out_size + u] = top + (bot - top) * fy;
            }
        }
    }
    Ok((DenseTensor::new(vec![c, out_size, out_size], data)?, aff))
}

/// Template crops in slot order. Slot 0 holds the initial template and never
/// changes; updates evict the oldest of the remaining slots. With one slot
/// the pinned template is all there is and pushes are dropped.
#[derive(Debug, Clone)]
pub struct TemplateQueue {
    slots: Vec<DenseTensor>,
}

impl TemplateQueue {
    /// Fill every slot with the initial crop.
    pub fn filled(initial: DenseTensor, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("template queue needs at least one slot".into()));
        }
        Ok(TemplateQueue { slots: vec![initial; capacity] })
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn planes(&self) -> &[DenseTensor] {
        &self.slots
    }

    pub fn pinned(&self) -> &DenseTensor {
        &self.slots[0]
    }

    /// FIFO update: drop the oldest non-pinned slot, append the new crop.
    pub fn push(&mut self, crop: DenseTensor) -> Result<()> {
        if crop.shape != self.slots[0].shape {
            return Err(Error::Shape(format!(
                "template crop {:?} does not match slot shape {:?}",
                crop.shape, self.slots[0].shape
            )));
        }
        if self.slots.len() > 1 {
            self.slots.remove(1);
            self.slots.push(crop);
        }
        Ok(())
    }
}

/// Protocol knobs. `resolution` and `template_slots` must agree with the
/// model the tracker wraps; `for_model` fills them in.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub crop_expansion: f64,
    /// Frames between template refresh attempts.
    pub update_interval: u32,
    /// Confidence a refresh must clear.
    pub update_threshold: f64,
    /// Square side of both template and search crops.
    pub resolution: usize,
    /// Template queue capacity, one crop per backbone timestep.
    pub template_slots: usize,
    /// Apply a Hanning penalty to the score map before the argmax.
    pub hanning: bool,
    /// Blend weight of the penalty: (1 - w) * score + w * window.
    pub window_weight: f64,
    pub order: ProductOrder,
    pub path: PathKind,
    /// Keep per-layer probe records for energy reports.
    pub tracing: bool,
}

impl TrackerConfig {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        TrackerConfig {
            crop_expansion: 4.0,
            update_interval: 25,
            update_threshold: 0.7,
            resolution: cfg.input_size,
            template_slots: cfg.template_slots,
            hanning: true,
            window_weight: 0.3,
            order: ProductOrder::Linear,
            path: PathKind::Ac,
            tracing: false,
        }
    }

    /// Per-dataset preset with a slower refresh and a stricter gate.
    pub fn lasot(cfg: &ModelConfig) -> Self {
        TrackerConfig {
            update_interval: 40,
            update_threshold: 0.8,
            ..TrackerConfig::for_model(cfg)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.update_interval < 1 {
            return Err(Error::Config("update interval must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.update_threshold) {
            return Err(Error::Config(format!(
                "update threshold must lie in [0,1], got {}",
                self.update_threshold
            )));
        }
        if !(self.crop_expansion > 0.0 && self.crop_expansion.is_finite()) {
            return Err(Error::Config("crop expansion must be positive".into()));
        }
        if self.resolution == 0 || self.template_slots == 0 {
            return Err(Error::Config("resolution and template slots must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.window_weight) {
            return Err(Error::Config("window weight must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Where the update gate reads its confidence. `Fixed` substitutes a
/// constant for the head score, which makes protocol behavior testable
/// independently of the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConfidenceSource {
    Head,
    Fixed(f64),
}

/// One frame's output, already in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub frame_idx: u64,
    pub bbox: PixelBox,
    pub score: f64,
}

impl Prediction {
    /// The per-frame output line: "frame_idx x y w h score".
    pub fn report_line(&self) -> String {
        format!(
            "{} {:.2} {:.2} {:.2} {:.2} {:.4}",
            self.frame_idx, self.bbox.x, self.bbox.y, self.bbox.w, self.bbox.h, self.score
        )
    }
}

/// Single-target tracker state. One instance per video; frame 0 initializes,
/// each later frame costs one search pass.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub confidence: ConfidenceSource,
    pub template_probe: Probe,
    pub search_probe: Probe,
    model: Model,
    queue: TemplateQueue,
    bank: MemoryBank,
    window: Option<DenseTensor>,
    prev: PixelBox,
    frame_idx: u64,
    template_passes: u32,
}

impl Tracker {
    /// Crop the target, fill the queue, run the template branch, cache the
    /// bank. Counts as template pass number one.
    pub fn init(
        model: Model,
        frame: &DenseTensor,
        init_box: &PixelBox,
        cfg: TrackerConfig,
    ) -> Result<Tracker> {
        cfg.validate()?;
        if cfg.resolution != model.cfg.input_size {
            return Err(Error::Config(format!(
                "tracker resolution {} does not match the model input size {}",
                cfg.resolution, model.cfg.input_size
            )));
        }
        if cfg.template_slots != model.cfg.template_slots {
            return Err(Error::Config(format!(
                "tracker wants {} template slots, the model has {}",
                cfg.template_slots, model.cfg.template_slots
            )));
        }
        init_box.validate()?;
        if frame.shape.len() != 3 {
            return Err(Error::Shape(format!("frame must be [C, H, W], got {:?}", frame.shape)));
        }
        let (fh, fw) = (frame.shape[1] as f64, frame.shape[2] as f64);
        if init_box.x >= fw || init_box.y >= fh || init_box.x + init_box.w <= 0.0 || init_box.y + init_box.h <= 0.0 {
            return Err(Error::Value("init box lies outside the frame".into()));
        }
        let (tmpl, _) = crop(frame, init_box, cfg.crop_expansion, cfg.resolution)?;
        let queue = TemplateQueue::filled(tmpl, cfg.template_slots)?;
        let mut template_probe = Probe { tracing: cfg.tracing, ..Probe::tracing(Branch::Template) };
        let taps = model.template_features(queue.planes(), cfg.order, cfg.path, &mut template_probe)?;
        let bank = model.build_bank(&taps, &mut template_probe)?;
        let window = if cfg.hanning {
            Some(hanning_2d(model.cfg.final_extent())?)
        } else {
            None
        };
        let search_probe = Probe { tracing: cfg.tracing, ..Probe::tracing(Branch::Search) };
        Ok(Tracker {
            cfg,
            confidence: ConfidenceSource::Head,
            template_probe,
            search_probe,
            model,
            queue,
            bank,
            window,
            prev: *init_box,
            frame_idx: 0,
            template_passes: 1,
        })
    }

    /// Track one frame: crop around the previous box, run the search branch,
    /// decode, map back. Never fails on content; a lost target still yields
    /// the best-scoring box. Refreshes the template when the interval
    /// elapses and the confidence clears the threshold.
    pub fn track(&mut self, frame: &DenseTensor) -> Result<Prediction> {
        self.frame_idx += 1;
        let (search, aff) = crop(frame, &self.prev, self.cfg.crop_expansion, self.cfg.resolution)?;
        let out = self.model.search_features(
            &search,
            Some(&self.bank),
            self.cfg.order,
            self.cfg.path,
            &mut self.search_probe,
        )?;
        let plane = split_time(&out.final_feature).swap_remove(0);
        let maps = head_forward(&plane, &self.model.head, self.cfg.path, &mut self.search_probe)?;
        let win_cfg = WindowCfg { mode: WindowMode::WeightedSum, weight: self.cfg.window_weight };
        let (crop_box, head_score) = decode_box(&maps, self.window.as_ref().map(|w| (w, win_cfg)))?;
        let score = match self.confidence {
            ConfidenceSource::Head => head_score,
            ConfidenceSource::Fixed(v) => v,
        };
        let bbox = aff.box_to_frame(&crop_box);
        self.prev = bbox;
        if self.frame_idx % self.cfg.update_interval as u64 == 0 && score > self.cfg.update_threshold {
            self.refresh_template(frame)?;
        }
        Ok(Prediction { frame_idx: self.frame_idx, bbox, score })
    }

    /// Push a crop of the current prediction and rerun the template branch.
    fn refresh_template(&mut self, frame: &DenseTensor) -> Result<()> {
        let (tmpl, _) = crop(frame, &self.prev, self.cfg.crop_expansion, self.cfg.resolution)?;
        self.queue.push(tmpl)?;
        let taps = self.model.template_features(
            self.queue.planes(),
            self.cfg.order,
            self.cfg.path,
            &mut self.template_probe,
        )?;
        self.bank = self.model.build_bank(&taps, &mut self.template_probe)?;
        self.template_passes += 1;
        Ok(())
    }

    pub fn queue(&self) -> &TemplateQueue {
        &self.queue
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    /// Last prediction (or the init box) in image pixels.
    pub fn current_box(&self) -> PixelBox {
        self.prev
    }

    /// Template branch executions so far, initialization included.
    pub fn template_passes(&self) -> u32 {
        self.template_passes
    }

    /// Total ops spent in the template branch (forward plus bank building).
    pub fn template_ops(&self) -> u64 {
        self.template_probe.total_mac_ops
    }

    /// Total ops spent in search passes and the head.
    pub fn search_ops(&self) -> u64 {
        self.search_probe.total_mac_ops
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.template_probe.tracing = on;
        self.search_probe.tracing = on;
    }

    /// Price everything the probes recorded (requires tracing). Amortizes
    /// the template branch over the configured update interval.
    pub fn energy_report(&self) -> EnergyReport {
        let mut records = self.template_probe.records.clone();
        records.extend(self.search_probe.records.iter().cloned());
        build_report(&EnergyModel::default(), &records, self.cfg.update_interval)
    }
}
