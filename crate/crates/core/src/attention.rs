//! Spike-driven self-attention with interchangeable product order.
//!
//! Query, key and value are spike tensors: each projection of the incoming
//! spikes is re-spiked by its own neuron. The attention product
//! `(Q K^T) V * scale` contains no softmax, so matrix multiplication is
//! associative and the engine can evaluate `Q (K^T V) * scale` instead,
//! trading O(N^2 C) work for O(N C^2 gamma) work at identical values. The
//! scaled product is re-spiked and projected back from the gamma-expanded
//! width. Value expansion by `gamma` and output reduction by `1/gamma`
//! mirror each other.

use crate::energy::{LayerClass, Probe};
use crate::error::{Error, Result};
use crate::neuron::{nilif_step, NeuronState, NiLifParams};
use crate::nnops::{linear, matmul, matmul_a_bt, matmul_at_b, LinearSpec, PathKind};
use crate::tensor::{sfr_measure, spike_to_dense, DenseTensor, SpikeTensor};

/// Association order of the attention product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProductOrder {
    /// `(Q K^T) V`: token-token similarity first, O(N^2) in tokens.
    Quadratic,
    /// `Q (K^T V)`: channel-channel memory first, O(N) in tokens.
    Linear,
}

/// One attention layer: three projections + re-spiking neurons, the scaled
/// product, a post-product neuron, and the reducing output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EsdsaSpec {
    pub dim: usize,
    pub gamma: usize,
    pub q_proj: LinearSpec,
    pub k_proj: LinearSpec,
    pub v_proj: LinearSpec,
    pub out_proj: LinearSpec,
    pub q_neuron: NiLifParams,
    pub k_neuron: NiLifParams,
    pub v_neuron: NiLifParams,
    pub post_neuron: NiLifParams,
    /// Product scaling; folded after the full product on either order.
    pub scale: f64,
}

impl EsdsaSpec {
    /// Default product scale for a channel width.
    pub fn default_scale(dim: usize) -> f64 {
        1.0 / (dim as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.dim;
        let g = self.gamma * c;
        if self.q_proj.in_dim != c
            || self.q_proj.out_dim != c
            || self.k_proj.in_dim != c
            || self.k_proj.out_dim != c
            || self.v_proj.in_dim != c
            || self.v_proj.out_dim != g
            || self.out_proj.in_dim != g
            || self.out_proj.out_dim != c
        {
            return Err(Error::Config(format!(
                "attention projections inconsistent with dim {c}, gamma {}",
                self.gamma
            )));
        }
        if self.gamma == 0 || !self.scale.is_finite() {
            return Err(Error::Config("gamma must be >= 1 and scale finite".into()));
        }
        Ok(())
    }
}

fn slice_t(s: &SpikeTensor, t: usize) -> SpikeTensor {
    let step: usize = s.shape[1..].iter().product();
    SpikeTensor {
        shape: s.shape[1..].to_vec(),
        counts: s.counts[t * step..(t + 1) * step].to_vec(),
        d_cap: s.d_cap,
    }
}

/// Forward pass over `[T, N, C]` spikes; returns dense `[T, N, C]`.
///
/// The four internal neurons carry state across the leading time axis within
/// this call. Both orders yield the same values; only the op count differs.
pub fn esdsa_forward(
    u: &SpikeTensor,
    spec: &EsdsaSpec,
    order: ProductOrder,
    probe: &mut Probe,
    name: &str,
) -> Result<DenseTensor> {
    spec.validate()?;
    if u.shape.len() != 3 || u.shape[2] != spec.dim {
        return Err(Error::Shape(format!(
            "attention expects [T, N, {}], got {:?}",
            spec.dim, u.shape
        )));
    }
    let (t_len, n, c) = (u.shape[0], u.shape[1], u.shape[2]);
    let gc = spec.gamma * c;
    let d_cap = u.d_cap;
    let mut q_state = NeuronState::fresh();
    let mut k_state = NeuronState::fresh();
    let mut v_state = NeuronState::fresh();
    let mut post_state = NeuronState::fresh();
    let mut out = Vec::with_capacity(t_len * n * c);
    for t in 0..t_len {
        let u_t = slice_t(u, t);
        let in_stats = sfr_measure(&u_t);
        probe.record(
            &format!("{name}.q_proj"),
            LayerClass::AttentionQkv,
            t,
            spec.q_proj.mac_ops(n),
            in_stats,
            d_cap,
        );
        probe.record(
            &format!("{name}.k_proj"),
            LayerClass::AttentionQkv,
            t,
            spec.k_proj.mac_ops(n),
            in_stats,
            d_cap,
        );
        probe.record(
            &format!("{name}.v_proj"),
            LayerClass::AttentionQkv,
            t,
            spec.v_proj.mac_ops(n),
            in_stats,
            d_cap,
        );
        let q_pre = linear(&u_t, &spec.q_proj, PathKind::Ac)?;
        let k_pre = linear(&u_t, &spec.k_proj, PathKind::Ac)?;
        let v_pre = linear(&u_t, &spec.v_proj, PathKind::Ac)?;
        let q_s = nilif_step(&mut q_state, &q_pre, spec.q_neuron.theta[t], d_cap)?;
        let k_s = nilif_step(&mut k_state, &k_pre, spec.k_neuron.theta[t], d_cap)?;
        let v_s = nilif_step(&mut v_state, &v_pre, spec.v_neuron.theta[t], d_cap)?;

        let qd = spike_to_dense(&q_s);
        let kd = spike_to_dense(&k_s);
        let vd = spike_to_dense(&v_s);
        let mut ops = 0u64;
        let prod = match order {
            ProductOrder::Quadratic => {
                let attn = matmul_a_bt(&qd, &kd, Some(&mut ops))?;
                matmul(&attn, &vd, Some(&mut ops))?
            }
            ProductOrder::Linear => {
                let mem = matmul_at_b(&kd, &vd, Some(&mut ops))?;
                matmul(&qd, &mem, Some(&mut ops))?
            }
        };
        probe.attn_product_ops += ops;
        let qkv_stats = sfr_measure(&q_s)
            .merge(&sfr_measure(&k_s))
            .merge(&sfr_measure(&v_s));
        probe.record(
            &format!("{name}.product"),
            LayerClass::AttentionProduct,
            t,
            ops,
            qkv_stats,
            d_cap,
        );
        probe.record(
            &format!("{name}.scale"),
            LayerClass::ScaleAbsent,
            t,
            0,
            qkv_stats,
            d_cap,
        );
        probe.record(
            &format!("{name}.softmax"),
            LayerClass::SoftmaxAbsent,
            t,
            0,
            qkv_stats,
            d_cap,
        );
        let z = prod.scale(spec.scale);
        let a_s = nilif_step(&mut post_state, &z, spec.post_neuron.theta[t], d_cap)?;
        probe.record(
            &format!("{name}.out_proj"),
            LayerClass::LinearAc,
            t,
            spec.out_proj.mac_ops(n),
            sfr_measure(&a_s),
            d_cap,
        );
        let o = linear(&a_s, &spec.out_proj, PathKind::Ac)?;
        debug_assert_eq!(o.shape, vec![n, c]);
        let _ = gc;
        out.extend_from_slice(&o.data);
    }
    DenseTensor::new(vec![t_len, n, c], out)
}

/// Channel-channel memory of a key/value token set: `K^T V -> [C, gamma C]`.
pub fn kv_memory(k: &SpikeTensor, v: &SpikeTensor, ops: Option<&mut u64>) -> Result<DenseTensor> {
    if k.shape.len() != 2 || v.shape.len() != 2 || k.shape[0] != v.shape[0] {
        return Err(Error::Shape(format!(
            "kv_memory expects [N, C] and [N, gC] with equal N, got {:?} and {:?}",
            k.shape, v.shape
        )));
    }
    matmul_at_b(&spike_to_dense(k), &spike_to_dense(v), ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::numel;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_linear(rng: &mut StdRng, i: usize, o: usize, bias: bool) -> LinearSpec {
        let w = DenseTensor::new(
            vec![o, i],
            (0..i * o).map(|_| rng.gen_range(-0.8..0.8)).collect(),
        )
        .unwrap();
        let b = bias.then(|| (0..o).map(|_| rng.gen_range(-0.2..0.2)).collect());
        LinearSpec::new(i, o, w, b).unwrap()
    }

    fn rand_spec(rng: &mut StdRng, c: usize, gamma: usize, t: usize, bias: bool) -> EsdsaSpec {
        EsdsaSpec {
            dim: c,
            gamma,
            q_proj: rand_linear(rng, c, c, bias),
            k_proj: rand_linear(rng, c, c, bias),
            v_proj: rand_linear(rng, c, gamma * c, bias),
            out_proj: rand_linear(rng, gamma * c, c, bias),
            q_neuron: NiLifParams::new(4, t),
            k_neuron: NiLifParams::new(4, t),
            v_neuron: NiLifParams::new(4, t),
            post_neuron: NiLifParams::new(4, t),
            scale: EsdsaSpec::default_scale(c),
        }
    }

    fn rand_spikes(rng: &mut StdRng, shape: Vec<usize>) -> SpikeTensor {
        let n = numel(&shape);
        SpikeTensor::new(shape, (0..n).map(|_| rng.gen_range(0..=4)).collect(), 4).unwrap()
    }

    #[test]
    fn orders_agree_on_random_cases() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..40 {
            let c = rng.gen_range(2..=6);
            let gamma = rng.gen_range(1..=2);
            let n = rng.gen_range(1..=12);
            let t = rng.gen_range(1..=3);
            let spec = rand_spec(&mut rng, c, gamma, t, true);
            let u = rand_spikes(&mut rng, vec![t, n, c]);
            let a = esdsa_forward(&u, &spec, ProductOrder::Quadratic, &mut Probe::off(), "a")
                .unwrap();
            let b =
                esdsa_forward(&u, &spec, ProductOrder::Linear, &mut Probe::off(), "a").unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn hand_checked_single_token() {
        // d_cap 4, one token, one channel, gamma 1, no biases, scale 32.
        // input count 4 -> value 1.0
        // q_pre = 1.0*1.0 = 1.0 -> count 1 -> 0.25
        // k_pre = 3.0      -> count 3 -> 0.75
        // v_pre = 0.5      -> count 1 (round half away from zero) -> 0.25
        // product = 0.25*0.75*0.25 = 0.046875; x32 = 1.5 -> count 2 -> 0.5
        // out = 2.0 * 0.5 = 1.0
        let one = |v: f64| {
            LinearSpec::new(1, 1, DenseTensor::new(vec![1, 1], vec![v]).unwrap(), None).unwrap()
        };
        let spec = EsdsaSpec {
            dim: 1,
            gamma: 1,
            q_proj: one(1.0),
            k_proj: one(3.0),
            v_proj: one(0.5),
            out_proj: one(2.0),
            q_neuron: NiLifParams::new(4, 1),
            k_neuron: NiLifParams::new(4, 1),
            v_neuron: NiLifParams::new(4, 1),
            post_neuron: NiLifParams::new(4, 1),
            scale: 32.0,
        };
        let u = SpikeTensor::new(vec![1, 1, 1], vec![4], 4).unwrap();
        for order in [ProductOrder::Quadratic, ProductOrder::Linear] {
            let out = esdsa_forward(&u, &spec, order, &mut Probe::off(), "a").unwrap();
            assert_eq!(out.data, vec![1.0]);
        }
    }

    #[test]
    fn zero_spikes_zero_output_without_bias() {
        let mut rng = StdRng::seed_from_u64(37);
        let spec = rand_spec(&mut rng, 4, 2, 1, false);
        let u = SpikeTensor::zeros(vec![1, 6, 4], 4);
        let out =
            esdsa_forward(&u, &spec, ProductOrder::Linear, &mut Probe::off(), "a").unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn neuron_state_carries_across_timesteps() {
        // Pinned single-channel trace with full-count input at both steps:
        //   q_pre = 0.6 each step. t0: count 1, remainder -0.4.
        //   t1: U = 0.5*(-0.4) + 0.6 = 0.4 -> count 0 (a fresh run emits 1).
        //   k_pre = 3.0 -> count 3 (0.75); v_pre = 2.0 -> count 2 (0.5).
        //   t0 product = 0.25*0.75*0.5 = 0.09375, x16 = 1.5 -> count 2 -> 0.5.
        //   t1 product = 0 (q silent); post membrane -0.5 decays, stays 0.
        let one = |v: f64| {
            LinearSpec::new(1, 1, DenseTensor::new(vec![1, 1], vec![v]).unwrap(), None).unwrap()
        };
        let spec = EsdsaSpec {
            dim: 1,
            gamma: 1,
            q_proj: one(0.6),
            k_proj: one(3.0),
            v_proj: one(2.0),
            out_proj: one(1.0),
            q_neuron: NiLifParams::new(4, 2),
            k_neuron: NiLifParams::new(4, 2),
            v_neuron: NiLifParams::new(4, 2),
            post_neuron: NiLifParams::new(4, 2),
            scale: 16.0,
        };
        let u2 = SpikeTensor::new(vec![2, 1, 1], vec![4, 4], 4).unwrap();
        let u1 = SpikeTensor::new(vec![1, 1, 1], vec![4], 4).unwrap();
        let two =
            esdsa_forward(&u2, &spec, ProductOrder::Linear, &mut Probe::off(), "a").unwrap();
        let one_t =
            esdsa_forward(&u1, &spec, ProductOrder::Linear, &mut Probe::off(), "a").unwrap();
        assert_eq!(two.data[0], 0.5);
        assert_eq!(two.data[1], 0.0);
        // A fresh single-step run repeats the t0 value: the difference at t1
        // comes only from carried membrane state.
        assert_eq!(one_t.data[0], 0.5);
    }

    #[test]
    fn product_op_counts_scale_by_order() {
        let mut rng = StdRng::seed_from_u64(43);
        let c = 4;
        let gamma = 2;
        let spec = rand_spec(&mut rng, c, gamma, 1, true);
        let mut count_ops = |n: usize, order: ProductOrder| {
            let u = rand_spikes(&mut rng, vec![1, n, c]);
            let mut probe = Probe::off();
            esdsa_forward(&u, &spec, order, &mut probe, "a").unwrap();
            probe.attn_product_ops
        };
        for n in [8usize, 16, 32] {
            // quadratic: N^2 C + N^2 gC; linear: 2 N C gC
            assert_eq!(
                count_ops(n, ProductOrder::Quadratic),
                (n * n * c + n * n * gamma * c) as u64
            );
            assert_eq!(
                count_ops(n, ProductOrder::Linear),
                (2 * n * c * gamma * c) as u64
            );
        }
    }

    #[test]
    fn probe_includes_zero_cost_rows() {
        let mut rng = StdRng::seed_from_u64(47);
        let spec = rand_spec(&mut rng, 3, 2, 1, true);
        let u = rand_spikes(&mut rng, vec![1, 5, 3]);
        let mut probe = Probe::tracing(crate::energy::Branch::Search);
        esdsa_forward(&u, &spec, ProductOrder::Linear, &mut probe, "blk").unwrap();
        let names: Vec<&str> = probe.records.iter().map(|r| r.name.as_str()).collect();
        assert!(names.contains(&"blk.scale"));
        assert!(names.contains(&"blk.softmax"));
        assert!(names.contains(&"blk.q_proj"));
        let zero_rows: Vec<_> = probe
            .records
            .iter()
            .filter(|r| matches!(r.class, LayerClass::ScaleAbsent | LayerClass::SoftmaxAbsent))
            .collect();
        assert!(zero_rows.iter().all(|r| r.mac_ops == 0));
    }

    #[test]
    fn kv_memory_binary_hand_case() {
        // K = [1, 0], V = [0, 1] over one token: M = K^T V = [[0,1],[0,0]].
        let k = SpikeTensor::new(vec![1, 2], vec![1, 0], 1).unwrap();
        let v = SpikeTensor::new(vec![1, 2], vec![0, 1], 1).unwrap();
        let m = kv_memory(&k, &v, None).unwrap();
        assert_eq!(m.shape, vec![2, 2]);
        assert_eq!(m.data, vec![0.0, 1.0, 0.0, 0.0]);
    }
}
