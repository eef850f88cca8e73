//! Template memory and retrieval.
//!
//! Each backbone tap owns one memory matrix. Building it pools the template
//! feature at that tap down to the final-stage resolution, projects the
//! pooled tokens through spiking key/value heads, and accumulates the
//! key-transpose-times-value outer product over the template planes:
//!
//!   M = sum_t K_S[t]^T V_S[t]            with shape [C, gC]
//!
//! Retrieval pools the search feature the same way, forms a dense query per
//! plane, then runs a fixed number of refinement loops. One loop per plane t:
//!
//!   z[t]  = Q[t] * M * scale                     (dense product, [N, gC])
//!   Q2[t] = conv_stack_t(z[t])                   (leading neuron spikes z)
//!   Qn[t] = project(SN_post(z[t] + Q2[t]))       ([N, C])
//!
//! With a layerscale vector the loop is gated: Q <- Q + ls .* Qn, so a zero
//! vector freezes the query and the loop count stops mattering. Without it
//! the loop output replaces the query.
//!
//! After the loops a per-plane scalar-per-channel weight is produced by a
//! small spiking MLP over the channel means, the planes are blended with
//! those sigmoid weights, projected back to the tap width, and upsampled to
//! the tap resolution. Every projection bias defaults to zero so an all-zero
//! memory yields an exactly-zero retrieval delta: the search stream then
//! matches a plain backbone pass bit for bit.

use crate::attention::kv_memory;
use crate::blocks::{chw_to_tokens, tokens_to_chw, SsConvSpec};
use crate::energy::{LayerClass, Probe};
use crate::error::{Error, Result};
use crate::neuron::{nilif_step, NeuronState, NiLifParams};
use crate::nnops::{
    avg_pool_to, linear, linear_dense, matmul, upsample_nearest_to, LinearSpec, PathKind,
};
use crate::tensor::{sfr_measure, DenseTensor, FiringStats};

/// Per-plane blend weights come from this two-layer spiking MLP over the
/// channel means of the refined query, followed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSpec {
    pub n1: NiLifParams,
    pub mlp1: LinearSpec,
    pub n2: NiLifParams,
    pub mlp2: LinearSpec,
    /// Final projection applied to the blended planes, [C -> C].
    pub project: LinearSpec,
}

/// Memory and retrieval operators for a single backbone tap.
#[derive(Debug, Clone, PartialEq)]
pub struct MrmTapSpec {
    /// Channel width at the tap.
    pub channels: usize,
    /// Value expansion factor; memory is [C, gamma * C].
    pub gamma: usize,
    /// Temporal planes, equal to the template slot count.
    pub planes: usize,
    /// Refinement loop count N (0 skips straight to fusion).
    pub loops: usize,
    /// Scale applied to the query-memory product.
    pub scale: f64,
    pub kv_head_neuron: NiLifParams,
    pub k_proj: LinearSpec,
    pub k_neuron: NiLifParams,
    pub v_proj: LinearSpec,
    pub v_neuron: NiLifParams,
    pub q_head_neuron: NiLifParams,
    pub q_proj: LinearSpec,
    /// One conv stack per plane, operating on [gC, h, w] at final resolution.
    pub conv_stacks: Vec<SsConvSpec>,
    /// Neuron over z + conv output, carried across planes.
    pub post_neuron: NiLifParams,
    /// Projection back to tap width, [gC -> C].
    pub project: LinearSpec,
    /// Optional residual gate; zero vector makes retrieval loop-invariant.
    pub layerscale: Option<Vec<f64>>,
    pub fusion: FusionSpec,
}

impl MrmTapSpec {
    pub fn default_scale(channels: usize) -> f64 {
        1.0 / (channels as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let gc = self.gamma * c;
        if self.gamma == 0 || self.planes == 0 {
            return Err(Error::Config("retrieval needs gamma >= 1 and planes >= 1".into()));
        }
        if self.k_proj.in_dim != c
            || self.k_proj.out_dim != c
            || self.v_proj.in_dim != c
            || self.v_proj.out_dim != gc
            || self.q_proj.in_dim != c
            || self.q_proj.out_dim != c
            || self.project.in_dim != gc
            || self.project.out_dim != c
        {
            return Err(Error::Config("retrieval projection shapes are inconsistent".into()));
        }
        if self.conv_stacks.len() != self.planes {
            return Err(Error::Config(format!(
                "expected {} per-plane conv stacks, got {}",
                self.planes,
                self.conv_stacks.len()
            )));
        }
        for stack in &self.conv_stacks {
            stack.validate(gc)?;
        }
        if let Some(ls) = &self.layerscale {
            if ls.len() != c {
                return Err(Error::Config("layerscale length must equal tap channels".into()));
            }
        }
        if self.fusion.mlp1.in_dim != c
            || self.fusion.mlp2.out_dim != c
            || self.fusion.mlp1.out_dim != self.fusion.mlp2.in_dim
            || self.fusion.project.in_dim != c
            || self.fusion.project.out_dim != c
        {
            return Err(Error::Config("fusion MLP shapes are inconsistent".into()));
        }
        Ok(())
    }
}

/// One memory matrix per tap, in tap order.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub entries: Vec<DenseTensor>,
}

impl MemoryBank {
    /// All-zero bank with the right shapes; retrieval through it is a no-op.
    pub fn zeros(specs: &[MrmTapSpec]) -> Self {
        MemoryBank {
            entries: specs
                .iter()
                .map(|s| DenseTensor::zeros(vec![s.channels, s.gamma * s.channels]))
                .collect(),
        }
    }
}

/// Pool a [C, H, W] feature to the final resolution and flatten to tokens.
fn pool_tokens(x: &DenseTensor, final_hw: (usize, usize)) -> Result<DenseTensor> {
    chw_to_tokens(&avg_pool_to(x, final_hw)?)
}

/// Accumulate the memory matrix for one tap from its template feature
/// `[T, C, H, W]`. Head and key/value neurons carry state across planes.
pub fn build_memory(
    spec: &MrmTapSpec,
    template_tap: &DenseTensor,
    final_hw: (usize, usize),
    probe: &mut Probe,
    name: &str,
) -> Result<DenseTensor> {
    if template_tap.shape.len() != 4 || template_tap.shape[0] != spec.planes {
        return Err(Error::Shape(format!(
            "memory build expects [{}, C, H, W], got {:?}",
            spec.planes, template_tap.shape
        )));
    }
    let c = spec.channels;
    let gc = spec.gamma * c;
    let mut head_state = NeuronState::fresh();
    let mut k_state = NeuronState::fresh();
    let mut v_state = NeuronState::fresh();
    let mut m = DenseTensor::zeros(vec![c, gc]);
    for t in 0..spec.planes {
        let plane = slice_plane(template_tap, t)?;
        let g = pool_tokens(&plane, final_hw)?;
        let n_tok = g.shape[0];
        let s = nilif_step(&mut head_state, &g, spec.kv_head_neuron.theta[t], spec.kv_head_neuron.d_cap)?;
        let stats = sfr_measure(&s);
        probe.record(
            &format!("{name}.k_proj"),
            LayerClass::AttentionQkv,
            t,
            spec.k_proj.mac_ops(n_tok),
            stats.clone(),
            s.d_cap,
        );
        probe.record(
            &format!("{name}.v_proj"),
            LayerClass::AttentionQkv,
            t,
            spec.v_proj.mac_ops(n_tok),
            stats,
            s.d_cap,
        );
        let k_pre = linear(&s, &spec.k_proj, PathKind::Ac)?;
        let v_pre = linear(&s, &spec.v_proj, PathKind::Ac)?;
        let k_s = nilif_step(&mut k_state, &k_pre, spec.k_neuron.theta[t], spec.k_neuron.d_cap)?;
        let v_s = nilif_step(&mut v_state, &v_pre, spec.v_neuron.theta[t], spec.v_neuron.d_cap)?;
        let mut ops = 0u64;
        let kv_stats = sfr_measure(&k_s).merge(&sfr_measure(&v_s));
        let outer = kv_memory(&k_s, &v_s, Some(&mut ops))?;
        probe.record(&format!("{name}.kv_product"), LayerClass::AttentionProduct, t, ops, kv_stats, spec.k_neuron.d_cap);
        m = m.add(&outer)?;
    }
    Ok(m)
}

fn slice_plane(x: &DenseTensor, t: usize) -> Result<DenseTensor> {
    let plane_shape: Vec<usize> = x.shape[1..].to_vec();
    let len: usize = plane_shape.iter().product();
    DenseTensor::new(plane_shape, x.data[t * len..(t + 1) * len].to_vec())
}

/// Elementwise a + b for same-shape token tensors is DenseTensor::add.
/// Broadcast channel weights over token rows: out[n, c] = w[c] * x[n, c].
fn scale_channels(x: &DenseTensor, w: &[f64]) -> Result<DenseTensor> {
    if x.shape.len() != 2 || x.shape[1] != w.len() {
        return Err(Error::Shape(format!(
            "channel scale expects [N, {}], got {:?}",
            w.len(),
            x.shape
        )));
    }
    let mut out = x.clone();
    for n in 0..x.shape[0] {
        for c in 0..x.shape[1] {
            out.data[n * x.shape[1] + c] *= w[c];
        }
    }
    Ok(out)
}

/// Mean over token rows: [N, C] -> [1, C].
fn channel_means(x: &DenseTensor) -> Result<DenseTensor> {
    if x.shape.len() != 2 || x.shape[0] == 0 {
        return Err(Error::Shape(format!("channel mean expects nonempty [N, C], got {:?}", x.shape)));
    }
    let (n, c) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; c];
    for row in 0..n {
        for col in 0..c {
            out[col] += x.data[row * c + col];
        }
    }
    for v in &mut out {
        *v /= n as f64;
    }
    DenseTensor::new(vec![1, c], out)
}

fn sigmoid_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| crate::neuron::sigmoid(*v)).collect()
}

/// Retrieve a delta for one search feature `[C, H, W]` against memory `m`.
/// Returns a same-shape tensor the caller adds onto the search stream.
pub fn retrieve(
    spec: &MrmTapSpec,
    search_tap: &DenseTensor,
    m: &DenseTensor,
    final_hw: (usize, usize),
    path: PathKind,
    probe: &mut Probe,
    name: &str,
) -> Result<DenseTensor> {
    if search_tap.shape.len() != 3 || search_tap.shape[0] != spec.channels {
        return Err(Error::Shape(format!(
            "retrieval expects [{}, H, W], got {:?}",
            spec.channels, search_tap.shape
        )));
    }
    let c = spec.channels;
    let gc = spec.gamma * c;
    if m.shape != [c, gc] {
        return Err(Error::Shape(format!("memory must be [{c}, {gc}], got {:?}", m.shape)));
    }
    let (fh, fw) = final_hw;

    // Dense query, one copy per plane so the per-plane operators line up.
    let g = pool_tokens(search_tap, final_hw)?;
    let n_tok = g.shape[0];
    let mut q_head_state = NeuronState::fresh();
    let s = nilif_step(&mut q_head_state, &g, spec.q_head_neuron.theta[0], spec.q_head_neuron.d_cap)?;
    probe.record(
        &format!("{name}.q_proj"),
        LayerClass::AttentionQkv,
        0,
        spec.q_proj.mac_ops(n_tok),
        sfr_measure(&s),
        s.d_cap,
    );
    let p = linear(&s, &spec.q_proj, path)?;
    let mut q: Vec<DenseTensor> = vec![p; spec.planes];

    for _ in 0..spec.loops {
        let mut post_state = NeuronState::fresh();
        let mut next = Vec::with_capacity(spec.planes);
        for t in 0..spec.planes {
            let mut ops = 0u64;
            let z = matmul(&q[t], m, Some(&mut ops))?.scale(spec.scale);
            probe.record(
                &format!("{name}.retrieve_product"),
                LayerClass::AttentionProduct,
                t,
                ops,
                FiringStats::of_dense(&q[t]),
                spec.post_neuron.d_cap,
            );
            let z_chw = tokens_to_chw(&z, fh, fw)?;
            let conv_out = spec.conv_stacks[t]
                .forward(std::slice::from_ref(&z_chw), path, probe, &format!("{name}.conv_stack{t}"))?;
            let q2 = chw_to_tokens(&conv_out[0])?;
            let r = z.add(&q2)?;
            let s3 = nilif_step(&mut post_state, &r, spec.post_neuron.theta[t], spec.post_neuron.d_cap)?;
            probe.record(
                &format!("{name}.project"),
                LayerClass::LinearAc,
                t,
                spec.project.mac_ops(n_tok),
                sfr_measure(&s3),
                s3.d_cap,
            );
            let qn = linear(&s3, &spec.project, path)?;
            let stepped = match &spec.layerscale {
                Some(ls) => q[t].add(&scale_channels(&qn, ls)?)?,
                None => qn,
            };
            next.push(stepped);
        }
        q = next;
    }

    // Blend planes with sigmoid weights from the channel-mean MLP.
    let mut f1_state = NeuronState::fresh();
    let mut f2_state = NeuronState::fresh();
    let mut fused = DenseTensor::zeros(vec![n_tok, c]);
    for t in 0..spec.planes {
        let gap = channel_means(&q[t])?;
        let a = nilif_step(&mut f1_state, &gap, spec.fusion.n1.theta[t], spec.fusion.n1.d_cap)?;
        probe.record(
            &format!("{name}.fusion.mlp1"),
            LayerClass::LinearAc,
            t,
            spec.fusion.mlp1.mac_ops(1),
            sfr_measure(&a),
            a.d_cap,
        );
        let h = linear(&a, &spec.fusion.mlp1, path)?;
        let b = nilif_step(&mut f2_state, &h, spec.fusion.n2.theta[t], spec.fusion.n2.d_cap)?;
        probe.record(
            &format!("{name}.fusion.mlp2"),
            LayerClass::LinearAc,
            t,
            spec.fusion.mlp2.mac_ops(1),
            sfr_measure(&b),
            b.d_cap,
        );
        let w_raw = linear(&b, &spec.fusion.mlp2, path)?;
        let w = sigmoid_vec(&w_raw.data);
        fused = fused.add(&scale_channels(&q[t], &w)?)?;
    }
    probe.record(
        &format!("{name}.fusion.project"),
        LayerClass::LinearAc,
        0,
        spec.fusion.project.mac_ops(n_tok),
        FiringStats::of_dense(&fused),
        spec.post_neuron.d_cap,
    );
    let out_tokens = linear_dense(&fused, &spec.fusion.project)?;
    let out_chw = tokens_to_chw(&out_tokens, fh, fw)?;
    upsample_nearest_to(&out_chw, (search_tap.shape[1], search_tap.shape[2]))
}
