//! Staged backbone, tap plumbing, and model assembly.
//!
//! The stream enters through a dense 7x7 stride-2 stem (the only multiply
//! layer in the network), then alternates neuron-fed downsamplers and block
//! stages: two convolutional stages, then transformer stages. The tensor
//! between layers is the dense membrane stream `[T, C, H, W]`; the leading
//! axis carries the template slots (T planes) or the single search frame.
//!
//! Five taps are snapshotted along the way, in stream order:
//!
//!   0  after the stage-2 downsampler   (input/4)
//!   1  after the stage-3 downsampler   (input/8)
//!   2  stage-3 midpoint, after floor(depth/2) blocks (input/8)
//!   3  after the stage-4 downsampler   (input/16)
//!   4  after the last stage-4 block    (input/16)
//!
//! A template pass just collects the taps. A search pass additionally runs
//! memory retrieval at each tap and adds the retrieved delta onto the stream
//! before continuing, so retrieval feeds every later stage and the head.
//! Both branches run through the same model object; sharing is structural.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::attention::{EsdsaSpec, ProductOrder};
use crate::blocks::{
    cnn_block, split_time, stack_time, transformer_block, ChannelConvSpec, ChannelMlpSpec,
    CnnBlockSpec, SpikingConv, SsConvSpec, TransformerBlockSpec,
};
use crate::energy::{LayerClass, Probe};
use crate::error::{Error, Result};
use crate::head::{HeadSpec, Tower};
use crate::mrm::{retrieve, FusionSpec, MemoryBank, MrmTapSpec};
use crate::neuron::NiLifParams;
use crate::nnops::{conv2d_dense, ConvKind, ConvSpec, LinearSpec, PathKind};
use crate::tensor::{DenseTensor, FiringStats};
use crate::weights::ParamStore;

pub const TAP_COUNT: usize = 5;

/// Tap names in stream order; the index doubles as the bank slot.
pub const TAP_NAMES: [&str; TAP_COUNT] =
    ["ds2", "ds3", "stage3_mid", "ds4", "stage4_final"];

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Cnn(CnnBlockSpec),
    Transformer(TransformerBlockSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stem: ConvSpec,
    pub downsamplers: Vec<SpikingConv>,
    pub stages: Vec<Vec<Block>>,
}

impl Backbone {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 4 {
            return Err(Error::Config("backbone needs at least four stages".into()));
        }
        if self.downsamplers.len() != self.stages.len() - 1 {
            return Err(Error::Config("each stage after the first needs a downsampler".into()));
        }
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                let ok = if s < 2 {
                    matches!(b, Block::Cnn(_))
                } else {
                    matches!(b, Block::Transformer(_))
                };
                if !ok {
                    return Err(Error::Config(format!(
                        "stage {} holds the wrong block kind",
                        s + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Side length of the final stage output for a square input.
    pub fn final_extent(&self, input: usize) -> Result<usize> {
        let mut e = self.stem.out_dim(input)?;
        for ds in &self.downsamplers {
            e = ds.conv.out_dim(e)?;
        }
        Ok(e)
    }
}

/// Everything a forward pass produces: the five pre-injection tap snapshots
/// (each `[T, C, H, W]`) and the final stage output.
#[derive(Debug, Clone)]
pub struct StreamOutput {
    pub taps: Vec<DenseTensor>,
    pub final_feature: DenseTensor,
}

fn inject_at_tap(
    stream: &mut [DenseTensor],
    spec: &MrmTapSpec,
    m: &DenseTensor,
    final_hw: (usize, usize),
    path: PathKind,
    probe: &mut Probe,
    name: &str,
) -> Result<()> {
    for u_t in stream.iter_mut() {
        let delta = retrieve(spec, u_t, m, final_hw, path, probe, name)?;
        *u_t = u_t.add(&delta)?;
    }
    Ok(())
}

/// Run the stream. `retrieval` carries the per-tap operators and the memory
/// bank; pass `None` for a plain (template or probe-only) pass.
pub fn backbone_forward(
    bb: &Backbone,
    frames: &[DenseTensor],
    retrieval: Option<(&[MrmTapSpec], &MemoryBank)>,
    order: ProductOrder,
    path: PathKind,
    probe: &mut Probe,
) -> Result<StreamOutput> {
    if frames.is_empty() {
        return Err(Error::Shape("backbone needs at least one input plane".into()));
    }
    for f in frames {
        if f.shape.len() != 3 || f.shape != frames[0].shape {
            return Err(Error::Shape("input planes must share a [C, H, W] shape".into()));
        }
    }
    if let Some((specs, bank)) = retrieval {
        if specs.len() != TAP_COUNT || bank.entries.len() != TAP_COUNT {
            return Err(Error::Config(format!(
                "retrieval needs {TAP_COUNT} tap operators and bank entries"
            )));
        }
    }
    let final_e = bb.final_extent(frames[0].shape[1])?;
    let final_hw = (final_e, final_e);

    // Dense stem, the single multiply-path layer.
    let mut stream: Vec<DenseTensor> = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let oh = bb.stem.out_dim(f.shape[1])?;
        let ow = bb.stem.out_dim(f.shape[2])?;
        probe.record(
            "stage1.downsample.conv",
            LayerClass::FirstConvMac,
            t,
            bb.stem.mac_ops(oh, ow),
            FiringStats::of_dense(f),
            1,
        );
        stream.push(conv2d_dense(f, &bb.stem)?);
    }

    let mut taps: Vec<DenseTensor> = Vec::with_capacity(TAP_COUNT);
    let snapshot = |stream: &mut Vec<DenseTensor>,
                        taps: &mut Vec<DenseTensor>,
                        probe: &mut Probe|
     -> Result<()> {
        let idx = taps.len();
        taps.push(stack_time(stream));
        if let Some((specs, bank)) = retrieval {
            inject_at_tap(
                stream,
                &specs[idx],
                &bank.entries[idx],
                final_hw,
                path,
                probe,
                &format!("mrm.{}", TAP_NAMES[idx]),
            )?;
        }
        Ok(())
    };

    for s in 0..bb.stages.len() {
        let stage_no = s + 1;
        if s > 0 {
            stream = bb.downsamplers[s - 1].forward(
                &stream,
                path,
                probe,
                &format!("stage{stage_no}.downsample.conv"),
                LayerClass::ConvAc,
            )?;
            if (2..=4).contains(&stage_no) {
                snapshot(&mut stream, &mut taps, probe)?;
            }
        }
        let mid = if stage_no == 3 { Some(bb.stages[s].len() / 2) } else { None };
        for (j, block) in bb.stages[s].iter().enumerate() {
            if mid == Some(j) {
                snapshot(&mut stream, &mut taps, probe)?;
            }
            let stacked = stack_time(&stream);
            let name = format!("stage{stage_no}.block{j}");
            let out = match block {
                Block::Cnn(spec) => cnn_block(&stacked, spec, path, probe, &name)?,
                Block::Transformer(spec) => {
                    transformer_block(&stacked, spec, order, path, probe, &name)?
                }
            };
            stream = split_time(&out);
        }
        if stage_no == 4 {
            snapshot(&mut stream, &mut taps, probe)?;
        }
    }

    Ok(StreamOutput { taps, final_feature: stack_time(&stream) })
}

/// Full model shape: all widths and depths derive from this.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square side of both branch inputs.
    pub input_size: usize,
    pub in_channels: usize,
    /// Stage widths, length 4.
    pub channels: Vec<usize>,
    /// Blocks per stage, length 4.
    pub depths: Vec<usize>,
    /// Attention value expansion.
    pub gamma: usize,
    pub d_cap: u32,
    /// Template slots; also every shared neuron's timestep count.
    pub template_slots: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the head towers.
    pub head_mid: usize,
    pub mrm_loops: usize,
    pub mrm_layerscale: bool,
    /// Optional fifth stage: (channels, depth) at input/32.
    pub stage5: Option<(usize, usize)>,
}

impl ModelConfig {
    /// Desk-scale shape: big enough to exercise every operator.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 64,
            in_channels: 3,
            channels: vec![16, 32, 64, 128],
            depths: vec![1, 1, 2, 2],
            gamma: 2,
            d_cap: 4,
            template_slots: 3,
            mlp_ratio: 2,
            head_mid: 32,
            mrm_loops: 1,
            mrm_layerscale: false,
            stage5: None,
        }
    }

    /// Small shape for fast training runs and tests.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: 64,
            in_channels: 3,
            channels: vec![4, 8, 16, 32],
            depths: vec![1, 1, 2, 1],
            gamma: 2,
            d_cap: 4,
            template_slots: 2,
            mlp_ratio: 2,
            head_mid: 16,
            mrm_loops: 1,
            mrm_layerscale: false,
            stage5: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 || self.depths.len() != 4 {
            return Err(Error::Config("channels and depths must list four stages".into()));
        }
        if self.depths.iter().any(|d| *d == 0) || self.channels.iter().any(|c| *c == 0) {
            return Err(Error::Config("stage widths and depths must be positive".into()));
        }
        let div = if self.stage5.is_some() { 32 } else { 16 };
        if self.input_size == 0 || self.input_size % (2 * div) != 0 {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of {}",
                2 * div
            )));
        }
        if self.gamma == 0 || self.d_cap == 0 || self.template_slots == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("gamma, d_cap, template_slots, mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }

    /// Side length of the final stage feature.
    pub fn final_extent(&self) -> usize {
        self.input_size / if self.stage5.is_some() { 32 } else { 16 }
    }

    /// Channel width at each tap, in stream order.
    pub fn tap_channels(&self) -> [usize; TAP_COUNT] {
        [
            self.channels[1],
            self.channels[2],
            self.channels[2],
            self.channels[3],
            self.channels[3],
        ]
    }

    /// Square side at each tap, in stream order.
    pub fn tap_extents(&self) -> [usize; TAP_COUNT] {
        let i = self.input_size;
        [i / 4, i / 8, i / 8, i / 16, i / 16]
    }

    fn last_channels(&self) -> usize {
        self.stage5.map(|(c, _)| c).unwrap_or(self.channels[3])
    }
}

/// What a parameter is for, so the initializer can scale it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    Weight { fan_in: usize, gain: f64 },
    Bias,
    Theta,
    Layerscale,
}

fn conv_params(
    f: &mut dyn FnMut(String, Vec<usize>, ParamKind),
    prefix: &str,
    shape: Vec<usize>,
    c_out: usize,
    with_neuron: Option<usize>,
) {
    let fan_in: usize = shape[1..].iter().product();
    if let Some(steps) = with_neuron {
        f(format!("{prefix}.neuron.theta"), vec![steps], ParamKind::Theta);
    }
    f(format!("{prefix}.conv.weight"), shape, ParamKind::Weight { fan_in, gain: 1.0 });
    f(format!("{prefix}.conv.bias"), vec![c_out], ParamKind::Bias);
}

fn linear_params(
    f: &mut dyn FnMut(String, Vec<usize>, ParamKind),
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
) {
    linear_params_gain(f, prefix, out_dim, in_dim, 1.0);
}

fn linear_params_gain(
    f: &mut dyn FnMut(String, Vec<usize>, ParamKind),
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
    gain: f64,
) {
    f(
        format!("{prefix}.weight"),
        vec![out_dim, in_dim],
        ParamKind::Weight { fan_in: in_dim, gain },
    );
    f(format!("{prefix}.bias"), vec![out_dim], ParamKind::Bias);
}

fn ssconv_params(f: &mut dyn FnMut(String, Vec<usize>, ParamKind), prefix: &str, c: usize, steps: usize) {
    conv_params(f, &format!("{prefix}.pw1"), vec![c, c, 1, 1], c, Some(steps));
    conv_params(f, &format!("{prefix}.dw"), vec![c, 1, 3, 3], c, Some(steps));
    conv_params(f, &format!("{prefix}.pw2"), vec![c, c, 1, 1], c, Some(steps));
}

fn block_params(
    f: &mut dyn FnMut(String, Vec<usize>, ParamKind),
    cfg: &ModelConfig,
    name: &str,
    c: usize,
    transformer: bool,
) {
    let steps = cfg.template_slots;
    ssconv_params(f, &format!("{name}.ssconv"), c, steps);
    if transformer {
        let gc = cfg.gamma * c;
        f(format!("{name}.esdsa.head_neuron.theta"), vec![steps], ParamKind::Theta);
        for p in ["q_proj", "k_proj"] {
            linear_params(f, &format!("{name}.esdsa.{p}"), c, c);
            f(
                format!("{name}.esdsa.{}_neuron.theta", &p[..1]),
                vec![steps],
                ParamKind::Theta,
            );
        }
        linear_params(f, &format!("{name}.esdsa.v_proj"), gc, c);
        f(format!("{name}.esdsa.v_neuron.theta"), vec![steps], ParamKind::Theta);
        f(format!("{name}.esdsa.post_neuron.theta"), vec![steps], ParamKind::Theta);
        linear_params(f, &format!("{name}.esdsa.out_proj"), c, gc);
        let hidden = cfg.mlp_ratio * c;
        f(format!("{name}.mlp.neuron1.theta"), vec![steps], ParamKind::Theta);
        linear_params(f, &format!("{name}.mlp.linear1"), hidden, c);
        f(format!("{name}.mlp.neuron2.theta"), vec![steps], ParamKind::Theta);
        linear_params(f, &format!("{name}.mlp.linear2"), c, hidden);
    } else {
        conv_params(f, &format!("{name}.channelconv.conv1"), vec![c, c, 3, 3], c, Some(steps));
        conv_params(f, &format!("{name}.channelconv.conv2"), vec![c, c, 3, 3], c, Some(steps));
    }
}

fn mrm_tap_params(f: &mut dyn FnMut(String, Vec<usize>, ParamKind), cfg: &ModelConfig, i: usize, c: usize) {
    let steps = cfg.template_slots;
    let gc = cfg.gamma * c;
    let p = format!("mrm.{}", TAP_NAMES[i]);
    f(format!("{p}.kv_head.neuron.theta"), vec![steps], ParamKind::Theta);
    linear_params_gain(f, &format!("{p}.k_proj"), c, c, 2.0);
    f(format!("{p}.k_neuron.theta"), vec![steps], ParamKind::Theta);
    linear_params_gain(f, &format!("{p}.v_proj"), gc, c, 2.0);
    f(format!("{p}.v_neuron.theta"), vec![steps], ParamKind::Theta);
    f(format!("{p}.q_head.neuron.theta"), vec![1], ParamKind::Theta);
    linear_params_gain(f, &format!("{p}.q_proj"), c, c, 4.0);
    for t in 0..steps {
        ssconv_params(f, &format!("{p}.conv_stack{t}"), gc, 1);
    }
    f(format!("{p}.post_neuron.theta"), vec![steps], ParamKind::Theta);
    linear_params(f, &format!("{p}.project"), c, gc);
    if cfg.mrm_layerscale {
        f(format!("{p}.layerscale"), vec![c], ParamKind::Layerscale);
    }
    f(format!("{p}.fusion.neuron1.theta"), vec![steps], ParamKind::Theta);
    linear_params(f, &format!("{p}.fusion.mlp1"), c, c);
    f(format!("{p}.fusion.neuron2.theta"), vec![steps], ParamKind::Theta);
    linear_params(f, &format!("{p}.fusion.mlp2"), c, c);
    linear_params(f, &format!("{p}.fusion.project"), c, c);
}

/// Enumerate every parameter (name, shape, kind) in assembly order.
pub fn for_each_param(cfg: &ModelConfig, f: &mut dyn FnMut(String, Vec<usize>, ParamKind)) {
    let steps = cfg.template_slots;
    conv_params(
        f,
        "stage1.downsample",
        vec![cfg.channels[0], cfg.in_channels, 7, 7],
        cfg.channels[0],
        None,
    );
    for j in 0..cfg.depths[0] {
        block_params(f, cfg, &format!("stage1.block{j}"), cfg.channels[0], false);
    }
    let mut widths: Vec<(usize, usize, bool)> = vec![
        (2, cfg.channels[1], false),
        (3, cfg.channels[2], true),
        (4, cfg.channels[3], true),
    ];
    if let Some((c5, _)) = cfg.stage5 {
        widths.push((5, c5, true));
    }
    let mut prev = cfg.channels[0];
    for (stage_no, c, transformer) in widths {
        f(
            format!("stage{stage_no}.downsample.neuron.theta"),
            vec![steps],
            ParamKind::Theta,
        );
        f(
            format!("stage{stage_no}.downsample.conv.weight"),
            vec![c, prev, 3, 3],
            ParamKind::Weight { fan_in: prev * 9, gain: 1.0 },
        );
        f(format!("stage{stage_no}.downsample.conv.bias"), vec![c], ParamKind::Bias);
        let depth = if stage_no == 5 {
            cfg.stage5.unwrap().1
        } else {
            cfg.depths[stage_no - 1]
        };
        for j in 0..depth {
            block_params(f, cfg, &format!("stage{stage_no}.block{j}"), c, transformer);
        }
        prev = c;
    }
    let tap_c = cfg.tap_channels();
    for i in 0..TAP_COUNT {
        mrm_tap_params(f, cfg, i, tap_c[i]);
    }
    let c_last = cfg.last_channels();
    for (tower, out) in [("score", 1usize), ("offset", 2), ("size", 2)] {
        conv_params(
            f,
            &format!("head.{tower}.conv0"),
            vec![cfg.head_mid, c_last, 3, 3],
            cfg.head_mid,
            Some(1),
        );
        conv_params(
            f,
            &format!("head.{tower}.conv1"),
            vec![out, cfg.head_mid, 3, 3],
            out,
            Some(1),
        );
    }
}

/// Seeded random store covering every parameter; values are f32-quantized so
/// the container round-trips exactly.
pub fn init_store(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut err = None;
    for_each_param(cfg, &mut |name, shape, kind| {
        if err.is_some() {
            return;
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match kind {
            ParamKind::Weight { fan_in, gain } => {
                // Wider than He: spike values average well under 1, so the
                // usual bound starves the integer neurons (|U| < 0.5 rounds
                // to zero) and activity dies a few layers in.
                let b = gain * (24.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-b..b)).collect()
            }
            ParamKind::Bias => vec![0.0; n],
            ParamKind::Theta => vec![0.0; n],
            ParamKind::Layerscale => vec![0.1; n],
        };
        let t = match DenseTensor::new(shape, data) {
            Ok(t) => t,
            Err(e) => {
                err = Some(e);
                return;
            }
        };
        if let Err(e) = store.insert(&name, t) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    store.quantize_f32();
    Ok(store)
}

/// Tracks which names were consumed so assembly can prove full coverage.
struct Reader<'a> {
    store: &'a ParamStore,
    used: std::collections::HashSet<String>,
}

impl<'a> Reader<'a> {
    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<DenseTensor> {
        self.used.insert(name.to_string());
        self.store.take(name, shape)
    }

    fn vec(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.tensor(name, &[len])?.data)
    }

    fn neuron(&mut self, name: &str, steps: usize, d_cap: u32) -> Result<NiLifParams> {
        Ok(NiLifParams { theta: self.vec(&format!("{name}.theta"), steps)?, d_cap })
    }

    fn conv(
        &mut self,
        prefix: &str,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<ConvSpec> {
        let shape = match kind {
            ConvKind::Depthwise => vec![c_out, 1, k, k],
            _ => vec![c_out, c_in, k, k],
        };
        let w = self.tensor(&format!("{prefix}.weight"), &shape)?;
        let b = self.vec(&format!("{prefix}.bias"), c_out)?;
        ConvSpec::new(kind, c_in, c_out, k, stride, padding, w, Some(b))
    }

    fn spiking_conv(
        &mut self,
        prefix: &str,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        steps: usize,
        d_cap: u32,
    ) -> Result<SpikingConv> {
        Ok(SpikingConv {
            neuron: self.neuron(&format!("{prefix}.neuron"), steps, d_cap)?,
            conv: self.conv(&format!("{prefix}.conv"), kind, c_in, c_out, k, stride, padding)?,
        })
    }

    fn linear(&mut self, prefix: &str, in_dim: usize, out_dim: usize) -> Result<LinearSpec> {
        Ok(LinearSpec {
            in_dim,
            out_dim,
            weights: self.tensor(&format!("{prefix}.weight"), &[out_dim, in_dim])?,
            bias: Some(self.vec(&format!("{prefix}.bias"), out_dim)?),
        })
    }

    fn ssconv(&mut self, prefix: &str, c: usize, steps: usize, d_cap: u32) -> Result<SsConvSpec> {
        Ok(SsConvSpec {
            pw1: self.spiking_conv(&format!("{prefix}.pw1"), ConvKind::Pointwise, c, c, 1, 1, 0, steps, d_cap)?,
            dw: self.spiking_conv(&format!("{prefix}.dw"), ConvKind::Depthwise, c, c, 3, 1, 1, steps, d_cap)?,
            pw2: self.spiking_conv(&format!("{prefix}.pw2"), ConvKind::Pointwise, c, c, 1, 1, 0, steps, d_cap)?,
        })
    }
}

/// The complete engine: backbone, per-tap retrieval operators, head.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub mrm: Vec<MrmTapSpec>,
    pub head: HeadSpec,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        let store = init_store(cfg, seed)?;
        Model::from_store(cfg.clone(), &store)
    }

    pub fn from_store(cfg: ModelConfig, store: &ParamStore) -> Result<Model> {
        cfg.validate()?;
        let steps = cfg.template_slots;
        let d = cfg.d_cap;
        let mut r = Reader { store, used: std::collections::HashSet::new() };

        let stem = r.conv(
            "stage1.downsample.conv",
            ConvKind::Full,
            cfg.in_channels,
            cfg.channels[0],
            7,
            2,
            3,
        )?;

        let make_block = |r: &mut Reader, name: &str, c: usize, transformer: bool| -> Result<Block> {
            let ssconv = r.ssconv(&format!("{name}.ssconv"), c, steps, d)?;
            if transformer {
                let gc = cfg.gamma * c;
                let esdsa = EsdsaSpec {
                    dim: c,
                    gamma: cfg.gamma,
                    q_proj: r.linear(&format!("{name}.esdsa.q_proj"), c, c)?,
                    k_proj: r.linear(&format!("{name}.esdsa.k_proj"), c, c)?,
                    v_proj: r.linear(&format!("{name}.esdsa.v_proj"), c, gc)?,
                    out_proj: r.linear(&format!("{name}.esdsa.out_proj"), gc, c)?,
                    q_neuron: r.neuron(&format!("{name}.esdsa.q_neuron"), steps, d)?,
                    k_neuron: r.neuron(&format!("{name}.esdsa.k_neuron"), steps, d)?,
                    v_neuron: r.neuron(&format!("{name}.esdsa.v_neuron"), steps, d)?,
                    post_neuron: r.neuron(&format!("{name}.esdsa.post_neuron"), steps, d)?,
                    scale: EsdsaSpec::default_scale(c),
                };
                esdsa.validate()?;
                Ok(Block::Transformer(TransformerBlockSpec {
                    channels: c,
                    ssconv,
                    head_neuron: r.neuron(&format!("{name}.esdsa.head_neuron"), steps, d)?,
                    esdsa,
                    mlp: ChannelMlpSpec {
                        n1: r.neuron(&format!("{name}.mlp.neuron1"), steps, d)?,
                        l1: r.linear(&format!("{name}.mlp.linear1"), c, cfg.mlp_ratio * c)?,
                        n2: r.neuron(&format!("{name}.mlp.neuron2"), steps, d)?,
                        l2: r.linear(&format!("{name}.mlp.linear2"), cfg.mlp_ratio * c, c)?,
                    },
                }))
            } else {
                Ok(Block::Cnn(CnnBlockSpec {
                    channels: c,
                    ssconv,
                    channel_conv: ChannelConvSpec {
                        conv1: r.spiking_conv(&format!("{name}.channelconv.conv1"), ConvKind::Full, c, c, 3, 1, 1, steps, d)?,
                        conv2: r.spiking_conv(&format!("{name}.channelconv.conv2"), ConvKind::Full, c, c, 3, 1, 1, steps, d)?,
                    },
                }))
            }
        };

        let mut stages: Vec<Vec<Block>> = Vec::new();
        let mut downsamplers: Vec<SpikingConv> = Vec::new();
        let mut stage_plan: Vec<(usize, usize, usize, bool)> = vec![
            (1, cfg.channels[0], cfg.depths[0], false),
            (2, cfg.channels[1], cfg.depths[1], false),
            (3, cfg.channels[2], cfg.depths[2], true),
            (4, cfg.channels[3], cfg.depths[3], true),
        ];
        if let Some((c5, d5)) = cfg.stage5 {
            stage_plan.push((5, c5, d5, true));
        }
        let mut prev = cfg.channels[0];
        for (stage_no, c, depth, transformer) in stage_plan {
            if stage_no > 1 {
                downsamplers.push(r.spiking_conv(
                    &format!("stage{stage_no}.downsample"),
                    ConvKind::Full,
                    prev,
                    c,
                    3,
                    2,
                    1,
                    steps,
                    d,
                )?);
            }
            let mut blocks = Vec::with_capacity(depth);
            for j in 0..depth {
                blocks.push(make_block(&mut r, &format!("stage{stage_no}.block{j}"), c, transformer)?);
            }
            stages.push(blocks);
            prev = c;
        }

        let tap_c = cfg.tap_channels();
        let mut mrm = Vec::with_capacity(TAP_COUNT);
        for i in 0..TAP_COUNT {
            let c = tap_c[i];
            let gc = cfg.gamma * c;
            let p = format!("mrm.{}", TAP_NAMES[i]);
            let mut conv_stacks = Vec::with_capacity(steps);
            for t in 0..steps {
                conv_stacks.push(r.ssconv(&format!("{p}.conv_stack{t}"), gc, 1, d)?);
            }
            let spec = MrmTapSpec {
                channels: c,
                gamma: cfg.gamma,
                planes: steps,
                loops: cfg.mrm_loops,
                scale: MrmTapSpec::default_scale(c),
                kv_head_neuron: r.neuron(&format!("{p}.kv_head.neuron"), steps, d)?,
                k_proj: r.linear(&format!("{p}.k_proj"), c, c)?,
                k_neuron: r.neuron(&format!("{p}.k_neuron"), steps, d)?,
                v_proj: r.linear(&format!("{p}.v_proj"), c, gc)?,
                v_neuron: r.neuron(&format!("{p}.v_neuron"), steps, d)?,
                q_head_neuron: r.neuron(&format!("{p}.q_head.neuron"), 1, d)?,
                q_proj: r.linear(&format!("{p}.q_proj"), c, c)?,
                conv_stacks,
                post_neuron: r.neuron(&format!("{p}.post_neuron"), steps, d)?,
                project: r.linear(&format!("{p}.project"), gc, c)?,
                layerscale: if cfg.mrm_layerscale {
                    Some(r.vec(&format!("{p}.layerscale"), c)?)
                } else {
                    None
                },
                fusion: FusionSpec {
                    n1: r.neuron(&format!("{p}.fusion.neuron1"), steps, d)?,
                    mlp1: r.linear(&format!("{p}.fusion.mlp1"), c, c)?,
                    n2: r.neuron(&format!("{p}.fusion.neuron2"), steps, d)?,
                    mlp2: r.linear(&format!("{p}.fusion.mlp2"), c, c)?,
                    project: r.linear(&format!("{p}.fusion.project"), c, c)?,
                },
            };
            spec.validate()?;
            mrm.push(spec);
        }

        let c_last = cfg.last_channels();
        let tower = |r: &mut Reader, t: &str, out: usize| -> Result<Tower> {
            Ok(Tower {
                layers: vec![
                    r.spiking_conv(&format!("head.{t}.conv0"), ConvKind::Full, c_last, cfg.head_mid, 3, 1, 1, 1, d)?,
                    r.spiking_conv(&format!("head.{t}.conv1"), ConvKind::Full, cfg.head_mid, out, 3, 1, 1, 1, d)?,
                ],
            })
        };
        let head = HeadSpec {
            score: tower(&mut r, "score", 1)?,
            offset: tower(&mut r, "offset", 2)?,
            size: tower(&mut r, "size", 2)?,
        };
        head.validate(c_last)?;

        let unused: Vec<&str> = store.names().filter(|n| !r.used.contains(*n)).collect();
        if !unused.is_empty() {
            return Err(Error::Weights(format!(
                "store holds {} parameters the model does not use, e.g. {}",
                unused.len(),
                unused[0]
            )));
        }

        let backbone = Backbone { stem, downsamplers, stages };
        backbone.validate()?;
        Ok(Model { cfg, backbone, mrm, head })
    }

    /// Template pass: collect the five tap features from the slot planes.
    pub fn template_features(
        &self,
        frames: &[DenseTensor],
        order: ProductOrder,
        path: PathKind,
        probe: &mut Probe,
    ) -> Result<Vec<DenseTensor>> {
        if frames.len() != self.cfg.template_slots {
            return Err(Error::Shape(format!(
                "template pass needs {} slot planes, got {}",
                self.cfg.template_slots,
                frames.len()
            )));
        }
        Ok(backbone_forward(&self.backbone, frames, None, order, path, probe)?.taps)
    }

    /// Build the per-tap memory bank from collected template features.
    pub fn build_bank(&self, taps: &[DenseTensor], probe: &mut Probe) -> Result<MemoryBank> {
        if taps.len() != TAP_COUNT {
            return Err(Error::Shape(format!("need {TAP_COUNT} tap features, got {}", taps.len())));
        }
        let e = self.cfg.final_extent();
        let mut entries = Vec::with_capacity(TAP_COUNT);
        for (i, spec) in self.mrm.iter().enumerate() {
            entries.push(crate::mrm::build_memory(
                spec,
                &taps[i],
                (e, e),
                probe,
                &format!("mrm.{}", TAP_NAMES[i]),
            )?);
        }
        Ok(MemoryBank { entries })
    }

    /// Search pass with optional retrieval against a bank.
    pub fn search_features(
        &self,
        frame: &DenseTensor,
        bank: Option<&MemoryBank>,
        order: ProductOrder,
        path: PathKind,
        probe: &mut Probe,
    ) -> Result<StreamOutput> {
        let frames = std::slice::from_ref(frame);
        match bank {
            Some(b) => backbone_forward(
                &self.backbone,
                frames,
                Some((&self.mrm, b)),
                order,
                path,
                probe,
            ),
            None => backbone_forward(&self.backbone, frames, None, order, path, probe),
        }
    }
}
