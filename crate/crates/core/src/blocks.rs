//! Backbone building blocks.
//!
//! Both block kinds keep a dense membrane-domain residual stream: every
//! sub-operator starts by spiking the stream through its own neuron, runs
//! spike-fed linear ops, and its dense output is added back. With zero
//! weights and no biases each sub-operator vanishes and the block is the
//! identity.
//!
//! CNN block:          u' = u + SSConv(u); u'' = u' + ChannelConv(u')
//! Transformer block:  u' = u + SSConv(u); u'' = u' + Attn(SN(u'));
//!                     u''' = u'' + ChannelMLP(u'')
//!
//! SSConv is pointwise -> depthwise -> pointwise, each conv behind a neuron.
//! Tensors are `[T, C, H, W]`; neuron state flows along the leading axis.

use crate::attention::{esdsa_forward, EsdsaSpec, ProductOrder};
use crate::energy::{LayerClass, Probe};
use crate::error::{Error, Result};
use crate::neuron::{nilif_step, NeuronState, NiLifParams};
use crate::nnops::{conv2d, linear, ConvKind, ConvSpec, LinearSpec, PathKind};
use crate::tensor::{sfr_measure, DenseTensor, SpikeTensor};

/// Split a `[T, ...]` dense tensor into per-timestep tensors.
pub(crate) fn split_time(x: &DenseTensor) -> Vec<DenseTensor> {
    let t_len = x.shape[0];
    let step: usize = x.shape[1..].iter().product();
    (0..t_len)
        .map(|t| DenseTensor {
            shape: x.shape[1..].to_vec(),
            data: x.data[t * step..(t + 1) * step].to_vec(),
        })
        .collect()
}

/// Stack per-timestep tensors back onto a leading time axis.
pub(crate) fn stack_time(parts: &[DenseTensor]) -> DenseTensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&parts[0].shape);
    let mut data = Vec::with_capacity(parts.len() * parts[0].data.len());
    for p in parts {
        debug_assert_eq!(p.shape, parts[0].shape);
        data.extend_from_slice(&p.data);
    }
    DenseTensor { shape, data }
}

/// `[C, H, W]` -> `[H*W, C]` token matrix (row-major spatial order).
pub fn chw_to_tokens(x: &DenseTensor) -> Result<DenseTensor> {
    if x.shape.len() != 3 {
        return Err(Error::Shape(format!("chw_to_tokens expects [C,H,W], got {:?}", x.shape)));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let n = h * w;
    let mut data = vec![0.0f64; n * c];
    for ch in 0..c {
        for i in 0..n {
            data[i * c + ch] = x.data[ch * n + i];
        }
    }
    DenseTensor::new(vec![n, c], data)
}

/// `[N, C]` tokens -> `[C, H, W]` with `N = H*W`.
pub fn tokens_to_chw(x: &DenseTensor, h: usize, w: usize) -> Result<DenseTensor> {
    if x.shape.len() != 2 || x.shape[0] != h * w {
        return Err(Error::Shape(format!(
            "tokens_to_chw expects [{}, C], got {:?}",
            h * w,
            x.shape
        )));
    }
    let (n, c) = (x.shape[0], x.shape[1]);
    let mut data = vec![0.0f64; c * n];
    for i in 0..n {
        for ch in 0..c {
            data[ch * n + i] = x.data[i * c + ch];
        }
    }
    DenseTensor::new(vec![c, h, w], data)
}

fn spike_chw_to_tokens(s: &SpikeTensor) -> SpikeTensor {
    let (c, h, w) = (s.shape[0], s.shape[1], s.shape[2]);
    let n = h * w;
    let mut counts = vec![0u32; n * c];
    for ch in 0..c {
        for i in 0..n {
            counts[i * c + ch] = s.counts[ch * n + i];
        }
    }
    SpikeTensor { shape: vec![n, c], counts, d_cap: s.d_cap }
}

/// Neuron-then-conv applied per timestep with carried state.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingConv {
    pub neuron: NiLifParams,
    pub conv: ConvSpec,
}

impl SpikingConv {
    /// Forward over per-timestep dense inputs; returns per-timestep outputs.
    pub(crate) fn forward(
        &self,
        u: &[DenseTensor],
        path: PathKind,
        probe: &mut Probe,
        name: &str,
        class: LayerClass,
    ) -> Result<Vec<DenseTensor>> {
        let mut state = NeuronState::fresh();
        let mut out = Vec::with_capacity(u.len());
        for (t, u_t) in u.iter().enumerate() {
            let s = nilif_step(&mut state, u_t, self.neuron.theta[t], self.neuron.d_cap)?;
            let oh = self.conv.out_dim(u_t.shape[1])?;
            let ow = self.conv.out_dim(u_t.shape[2])?;
            probe.record(name, class, t, self.conv.mac_ops(oh, ow), sfr_measure(&s), s.d_cap);
            out.push(conv2d(&s, &self.conv, path)?);
        }
        Ok(out)
    }
}

/// Separable conv stack: pointwise, depthwise, pointwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SsConvSpec {
    pub pw1: SpikingConv,
    pub dw: SpikingConv,
    pub pw2: SpikingConv,
}

impl SsConvSpec {
    pub fn validate(&self, c: usize) -> Result<()> {
        if self.pw1.conv.kind != ConvKind::Pointwise
            || self.pw2.conv.kind != ConvKind::Pointwise
            || self.dw.conv.kind != ConvKind::Depthwise
        {
            return Err(Error::Config("ssconv needs pointwise/depthwise/pointwise".into()));
        }
        if self.pw1.conv.c_in != c
            || self.dw.conv.c_in != self.pw1.conv.c_out
            || self.pw2.conv.c_in != self.dw.conv.c_out
            || self.pw2.conv.c_out != c
        {
            return Err(Error::Config("ssconv channel chain is inconsistent".into()));
        }
        Ok(())
    }

    pub(crate) fn forward(
        &self,
        u: &[DenseTensor],
        path: PathKind,
        probe: &mut Probe,
        name: &str,
    ) -> Result<Vec<DenseTensor>> {
        let a = self
            .pw1
            .forward(u, path, probe, &format!("{name}.pw1"), LayerClass::ConvAc)?;
        let b = self
            .dw
            .forward(&a, path, probe, &format!("{name}.dw"), LayerClass::ConvAc)?;
        self.pw2
            .forward(&b, path, probe, &format!("{name}.pw2"), LayerClass::ConvAc)
    }
}

/// Two full 3x3 convolutions, each behind a neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConvSpec {
    pub conv1: SpikingConv,
    pub conv2: SpikingConv,
}

impl ChannelConvSpec {
    fn forward(
        &self,
        u: &[DenseTensor],
        path: PathKind,
        probe: &mut Probe,
        name: &str,
    ) -> Result<Vec<DenseTensor>> {
        let a = self
            .conv1
            .forward(u, path, probe, &format!("{name}.conv1"), LayerClass::ConvAc)?;
        self.conv2
            .forward(&a, path, probe, &format!("{name}.conv2"), LayerClass::ConvAc)
    }
}

/// Two token-space linears, each behind a neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMlpSpec {
    pub n1: NiLifParams,
    pub l1: LinearSpec,
    pub n2: NiLifParams,
    pub l2: LinearSpec,
}

impl ChannelMlpSpec {
    /// Forward over `[N, C]` token tensors per timestep.
    fn forward(
        &self,
        u: &[DenseTensor],
        path: PathKind,
        probe: &mut Probe,
        name: &str,
    ) -> Result<Vec<DenseTensor>> {
        let mut s1 = NeuronState::fresh();
        let mut s2 = NeuronState::fresh();
        let mut out = Vec::with_capacity(u.len());
        for (t, u_t) in u.iter().enumerate() {
            let n = u_t.shape[0];
            let a = nilif_step(&mut s1, u_t, self.n1.theta[t], self.n1.d_cap)?;
            probe.record(
                &format!("{name}.linear1"),
                LayerClass::LinearAc,
                t,
                self.l1.mac_ops(n),
                sfr_measure(&a),
                a.d_cap,
            );
            let h = linear(&a, &self.l1, path)?;
            let b = nilif_step(&mut s2, &h, self.n2.theta[t], self.n2.d_cap)?;
            probe.record(
                &format!("{name}.linear2"),
                LayerClass::LinearAc,
                t,
                self.l2.mac_ops(n),
                sfr_measure(&b),
                b.d_cap,
            );
            out.push(linear(&b, &self.l2, path)?);
        }
        Ok(out)
    }
}

/// Convolutional block: separable stack plus channel convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnBlockSpec {
    pub channels: usize,
    pub ssconv: SsConvSpec,
    pub channel_conv: ChannelConvSpec,
}

/// Transformer block: separable stack, spike attention, channel MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockSpec {
    pub channels: usize,
    pub ssconv: SsConvSpec,
    /// Neuron that spikes the residual stream for attention input.
    pub head_neuron: NiLifParams,
    pub esdsa: EsdsaSpec,
    pub mlp: ChannelMlpSpec,
}

fn add_residual(base: &[DenseTensor], delta: &[DenseTensor]) -> Result<Vec<DenseTensor>> {
    base.iter().zip(delta).map(|(b, d)| b.add(d)).collect()
}

/// CNN block forward over `[T, C, H, W]`.
pub fn cnn_block(
    u: &DenseTensor,
    spec: &CnnBlockSpec,
    path: PathKind,
    probe: &mut Probe,
    name: &str,
) -> Result<DenseTensor> {
    if u.shape.len() != 4 || u.shape[1] != spec.channels {
        return Err(Error::Shape(format!(
            "cnn_block expects [T, {}, H, W], got {:?}",
            spec.channels, u.shape
        )));
    }
    let u0 = split_time(u);
    let ss = spec.ssconv.forward(&u0, path, probe, &format!("{name}.ssconv"))?;
    let u1 = add_residual(&u0, &ss)?;
    let cc = spec
        .channel_conv
        .forward(&u1, path, probe, &format!("{name}.channelconv"))?;
    let u2 = add_residual(&u1, &cc)?;
    Ok(stack_time(&u2))
}

/// Transformer block forward over `[T, C, H, W]`.
pub fn transformer_block(
    u: &DenseTensor,
    spec: &TransformerBlockSpec,
    order: ProductOrder,
    path: PathKind,
    probe: &mut Probe,
    name: &str,
) -> Result<DenseTensor> {
    if u.shape.len() != 4 || u.shape[1] != spec.channels {
        return Err(Error::Shape(format!(
            "transformer_block expects [T, {}, H, W], got {:?}",
            spec.channels, u.shape
        )));
    }
    let (h, w) = (u.shape[2], u.shape[3]);
    let u0 = split_time(u);
    let ss = spec.ssconv.forward(&u0, path, probe, &format!("{name}.ssconv"))?;
    let u1 = add_residual(&u0, &ss)?;

    // Spike the stream and run attention in token space.
    let mut head_state = NeuronState::fresh();
    let mut tok_counts = Vec::new();
    let n = h * w;
    for (t, u_t) in u1.iter().enumerate() {
        let s = nilif_step(&mut head_state, u_t, spec.head_neuron.theta[t], spec.head_neuron.d_cap)?;
        tok_counts.extend_from_slice(&spike_chw_to_tokens(&s).counts);
    }
    let toks = SpikeTensor::new(
        vec![u1.len(), n, spec.channels],
        tok_counts,
        spec.head_neuron.d_cap,
    )?;
    let attn = esdsa_forward(&toks, &spec.esdsa, order, probe, &format!("{name}.esdsa"))?;
    let attn_spatial: Vec<DenseTensor> = split_time(&attn)
        .iter()
        .map(|tk| tokens_to_chw(tk, h, w))
        .collect::<Result<_>>()?;
    let u2 = add_residual(&u1, &attn_spatial)?;

    // Channel MLP in token space.
    let u2_tokens: Vec<DenseTensor> =
        u2.iter().map(chw_to_tokens).collect::<Result<_>>()?;
    let mlp_tok = spec.mlp.forward(&u2_tokens, path, probe, &format!("{name}.mlp"))?;
    let mlp_spatial: Vec<DenseTensor> = mlp_tok
        .iter()
        .map(|tk| tokens_to_chw(tk, h, w))
        .collect::<Result<_>>()?;
    let u3 = add_residual(&u2, &mlp_spatial)?;
    Ok(stack_time(&u3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::numel;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_dense(rng: &mut StdRng, shape: Vec<usize>, lo: f64, hi: f64) -> DenseTensor {
        let n = numel(&shape);
        DenseTensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn conv(rng: &mut StdRng, kind: ConvKind, cin: usize, cout: usize, k: usize, zero: bool) -> ConvSpec {
        let shape = match kind {
            ConvKind::Depthwise => vec![cout, 1, k, k],
            _ => vec![cout, cin, k, k],
        };
        let w = if zero {
            DenseTensor::zeros(shape)
        } else {
            rand_dense(rng, shape, -0.4, 0.4)
        };
        ConvSpec::new(kind, cin, cout, k, 1, k / 2, w, None).unwrap()
    }

    fn sconv(rng: &mut StdRng, kind: ConvKind, cin: usize, cout: usize, k: usize, t: usize, zero: bool) -> SpikingConv {
        SpikingConv { neuron: NiLifParams::new(4, t), conv: conv(rng, kind, cin, cout, k, zero) }
    }

    fn cnn_spec(rng: &mut StdRng, c: usize, t: usize, zero: bool) -> CnnBlockSpec {
        CnnBlockSpec {
            channels: c,
            ssconv: SsConvSpec {
                pw1: sconv(rng, ConvKind::Pointwise, c, c, 1, t, zero),
                dw: sconv(rng, ConvKind::Depthwise, c, c, 3, t, zero),
                pw2: sconv(rng, ConvKind::Pointwise, c, c, 1, t, zero),
            },
            channel_conv: ChannelConvSpec {
                conv1: sconv(rng, ConvKind::Full, c, c, 3, t, zero),
                conv2: sconv(rng, ConvKind::Full, c, c, 3, t, zero),
            },
        }
    }

    fn linear_spec(rng: &mut StdRng, i: usize, o: usize) -> LinearSpec {
        LinearSpec::new(i, o, rand_dense(rng, vec![o, i], -0.4, 0.4), None).unwrap()
    }

    fn transformer_spec(rng: &mut StdRng, c: usize, t: usize, zero: bool) -> TransformerBlockSpec {
        let gamma = 2;
        let hidden = 2 * c;
        TransformerBlockSpec {
            channels: c,
            ssconv: SsConvSpec {
                pw1: sconv(rng, ConvKind::Pointwise, c, c, 1, t, zero),
                dw: sconv(rng, ConvKind::Depthwise, c, c, 3, t, zero),
                pw2: sconv(rng, ConvKind::Pointwise, c, c, 1, t, zero),
            },
            head_neuron: NiLifParams::new(4, t),
            esdsa: EsdsaSpec {
                dim: c,
                gamma,
                q_proj: if zero { zero_linear(c, c) } else { linear_spec(rng, c, c) },
                k_proj: if zero { zero_linear(c, c) } else { linear_spec(rng, c, c) },
                v_proj: if zero { zero_linear(c, gamma * c) } else { linear_spec(rng, c, gamma * c) },
                out_proj: if zero { zero_linear(gamma * c, c) } else { linear_spec(rng, gamma * c, c) },
                q_neuron: NiLifParams::new(4, t),
                k_neuron: NiLifParams::new(4, t),
                v_neuron: NiLifParams::new(4, t),
                post_neuron: NiLifParams::new(4, t),
                scale: EsdsaSpec::default_scale(c),
            },
            mlp: ChannelMlpSpec {
                n1: NiLifParams::new(4, t),
                l1: if zero { zero_linear(c, hidden) } else { linear_spec(rng, c, hidden) },
                n2: NiLifParams::new(4, t),
                l2: if zero { zero_linear(hidden, c) } else { linear_spec(rng, hidden, c) },
            },
        }
    }

    fn zero_linear(i: usize, o: usize) -> LinearSpec {
        LinearSpec::new(i, o, DenseTensor::zeros(vec![o, i]), None).unwrap()
    }

    #[test]
    fn zero_weights_make_blocks_identity() {
        let mut rng = StdRng::seed_from_u64(51);
        let u = rand_dense(&mut rng, vec![2, 3, 4, 4], -1.0, 2.0);
        let cspec = cnn_spec(&mut rng, 3, 2, true);
        let out = cnn_block(&u, &cspec, PathKind::Ac, &mut Probe::off(), "b").unwrap();
        assert_eq!(out.data, u.data);
        let tspec = transformer_spec(&mut rng, 3, 2, true);
        let out = transformer_block(&u, &tspec, ProductOrder::Linear, PathKind::Ac, &mut Probe::off(), "b")
            .unwrap();
        assert_eq!(out.data, u.data);
    }

    #[test]
    fn cnn_block_matches_straight_line_composition() {
        // Independent wiring oracle: compose the sub-ops by hand in the test.
        let mut rng = StdRng::seed_from_u64(53);
        let c = 3;
        let spec = cnn_spec(&mut rng, c, 1, false);
        let u = rand_dense(&mut rng, vec![1, c, 5, 5], -1.0, 1.0);
        let got = cnn_block(&u, &spec, PathKind::Ac, &mut Probe::off(), "b").unwrap();

        let step = |x: &DenseTensor, sc: &SpikingConv| -> DenseTensor {
            let mut st = NeuronState::fresh();
            let s = nilif_step(&mut st, x, sc.neuron.theta[0], 4).unwrap();
            conv2d(&s, &sc.conv, PathKind::Mac).unwrap()
        };
        let u0 = split_time(&u).remove(0);
        let ss = step(&step(&step(&u0, &spec.ssconv.pw1), &spec.ssconv.dw), &spec.ssconv.pw2);
        let u1 = u0.add(&ss).unwrap();
        let cc = step(&step(&u1, &spec.channel_conv.conv1), &spec.channel_conv.conv2);
        let u2 = u1.add(&cc).unwrap();
        assert!(got.max_abs_diff(&stack_time(&[u2])) < 1e-9);
    }

    #[test]
    fn transformer_block_orders_agree() {
        let mut rng = StdRng::seed_from_u64(59);
        let spec = transformer_spec(&mut rng, 4, 2, false);
        let u = rand_dense(&mut rng, vec![2, 4, 4, 4], -0.5, 1.5);
        let a = transformer_block(&u, &spec, ProductOrder::Quadratic, PathKind::Ac, &mut Probe::off(), "b")
            .unwrap();
        let b = transformer_block(&u, &spec, ProductOrder::Linear, PathKind::Ac, &mut Probe::off(), "b")
            .unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn mac_and_ac_paths_agree_through_blocks() {
        let mut rng = StdRng::seed_from_u64(61);
        let cspec = cnn_spec(&mut rng, 3, 2, false);
        let u = rand_dense(&mut rng, vec![2, 3, 6, 6], -1.0, 1.0);
        let a = cnn_block(&u, &cspec, PathKind::Ac, &mut Probe::off(), "b").unwrap();
        let m = cnn_block(&u, &cspec, PathKind::Mac, &mut Probe::off(), "b").unwrap();
        assert!(a.max_abs_diff(&m) < 1e-9);
    }

    #[test]
    fn token_roundtrip() {
        let mut rng = StdRng::seed_from_u64(67);
        let x = rand_dense(&mut rng, vec![3, 4, 5], -1.0, 1.0);
        let toks = chw_to_tokens(&x).unwrap();
        assert_eq!(toks.shape, vec![20, 3]);
        assert_eq!(toks.at(&[7, 2]), x.at(&[2, 1, 2]));
        let back = tokens_to_chw(&toks, 4, 5).unwrap();
        assert_eq!(back.data, x.data);
    }

    #[test]
    fn probe_sees_all_sublayers() {
        let mut rng = StdRng::seed_from_u64(71);
        let spec = transformer_spec(&mut rng, 4, 1, false);
        let u = rand_dense(&mut rng, vec![1, 4, 4, 4], -0.5, 1.5);
        let mut probe = Probe::tracing(crate::energy::Branch::Template);
        transformer_block(&u, &spec, ProductOrder::Linear, PathKind::Ac, &mut probe, "s3.b0")
            .unwrap();
        let names: Vec<&str> = probe.records.iter().map(|r| r.name.as_str()).collect();
        for expect in [
            "s3.b0.ssconv.pw1",
            "s3.b0.ssconv.dw",
            "s3.b0.ssconv.pw2",
            "s3.b0.esdsa.q_proj",
            "s3.b0.esdsa.product",
            "s3.b0.mlp.linear1",
            "s3.b0.mlp.linear2",
        ] {
            assert!(names.contains(&expect), "missing {expect}");
        }
    }
}
