//! Normalized-integer leaky integrate-and-fire neuron.
//!
//! Per timestep: `U = beta_t * H_prev + Y`, where `beta_t = sigmoid(theta_t)`
//! and `theta_t` is a learnable per-timestep logit. The neuron emits an
//! integer count `clip(round(U), 0, d_cap)` whose real value is
//! `count / d_cap`, and keeps the quantization remainder `H = U - count` as
//! membrane state for the next timestep. Emission therefore conserves charge:
//! `U = count + H` at every step, and negative residue decays through beta.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, SpikeTensor};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-layer neuron parameters: one leak logit per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NiLifParams {
    /// Leak logits; `beta_t = sigmoid(theta[t])`. Length bounds the number of
    /// timesteps the layer can run.
    pub theta: Vec<f64>,
    pub d_cap: u32,
}

impl NiLifParams {
    /// Zero logits (beta = 0.5 at every timestep).
    pub fn new(d_cap: u32, timesteps: usize) -> Self {
        Self { theta: vec![0.0; timesteps.max(1)], d_cap }
    }

    /// Logits so negative that beta is exactly 0.0 in f64: the neuron becomes
    /// stateless (each step sees only its own input).
    pub fn stateless(d_cap: u32, timesteps: usize) -> Self {
        Self { theta: vec![-1000.0; timesteps.max(1)], d_cap }
    }
}

/// Carry-over membrane charge between timesteps. `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct NeuronState {
    pub h: Option<DenseTensor>,
}

impl NeuronState {
    pub fn fresh() -> Self {
        Self { h: None }
    }
}

/// One integrate-quantize-emit step over a dense drive tensor.
///
/// Mutates `state` to the post-emission membrane and returns the emitted
/// integer counts.
pub fn nilif_step(
    state: &mut NeuronState,
    y: &DenseTensor,
    theta_t: f64,
    d_cap: u32,
) -> Result<SpikeTensor> {
    if d_cap == 0 {
        return Err(Error::Value("d_cap must be >= 1".into()));
    }
    if let Some(h) = &state.h {
        if h.shape != y.shape {
            return Err(Error::Shape(format!(
                "neuron state {:?} vs drive {:?}",
                h.shape, y.shape
            )));
        }
    }
    let beta = sigmoid(theta_t);
    let d = d_cap as f64;
    let n = y.data.len();
    let mut counts = vec![0u32; n];
    let mut h_next = vec![0.0f64; n];
    for i in 0..n {
        let h_prev = state.h.as_ref().map_or(0.0, |h| h.data[i]);
        let u = beta * h_prev + y.data[i];
        let c = u.round().clamp(0.0, d);
        counts[i] = c as u32;
        h_next[i] = u - c;
    }
    state.h = Some(DenseTensor::new(y.shape.clone(), h_next)?);
    SpikeTensor::new(y.shape.clone(), counts, d_cap)
}

/// Run a fresh neuron over a `[T, ...]` drive tensor; returns `[T, ...]`
/// counts. State flows across the leading axis and starts at zero.
pub fn nilif_sequence(y_seq: &DenseTensor, params: &NiLifParams) -> Result<SpikeTensor> {
    if y_seq.shape.is_empty() {
        return Err(Error::Shape("sequence tensor needs a leading time axis".into()));
    }
    let t_len = y_seq.shape[0];
    if t_len > params.theta.len() {
        return Err(Error::Config(format!(
            "{} timesteps but only {} theta entries",
            t_len,
            params.theta.len()
        )));
    }
    let step_shape: Vec<usize> = y_seq.shape[1..].to_vec();
    let step_n = crate::tensor::numel(&step_shape);
    let mut state = NeuronState::fresh();
    let mut counts = Vec::with_capacity(y_seq.data.len());
    for t in 0..t_len {
        let slice = &y_seq.data[t * step_n..(t + 1) * step_n];
        let y = DenseTensor::new(step_shape.clone(), slice.to_vec())?;
        let s = nilif_step(&mut state, &y, params.theta[t], params.d_cap)?;
        counts.extend_from_slice(&s.counts);
    }
    SpikeTensor::new(y_seq.shape.clone(), counts, params.d_cap)
}

/// Straight-through gradient of the emission w.r.t. its membrane input:
/// `1/d_cap` where round-then-clip acts as a scaled identity
/// (`-0.5 <= u <= d_cap + 0.5`), zero outside.
pub fn straight_through_grad(u: &DenseTensor, d_cap: u32) -> DenseTensor {
    let d = d_cap as f64;
    DenseTensor {
        shape: u.shape.clone(),
        data: u
            .data
            .iter()
            .map(|&v| if (-0.5..=d + 0.5).contains(&v) { 1.0 / d } else { 0.0 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Scalar reference fold, independent of the tensor implementation.
    fn scalar_trace(ys: &[f64], thetas: &[f64], d_cap: u32) -> (Vec<u32>, Vec<f64>) {
        let d = d_cap as f64;
        let mut h = 0.0f64;
        let mut counts = Vec::new();
        let mut membranes = Vec::new();
        for (t, &y) in ys.iter().enumerate() {
            let u = sigmoid(thetas[t]) * h + y;
            let c = u.round().clamp(0.0, d);
            h = u - c;
            counts.push(c as u32);
            membranes.push(h);
        }
        (counts, membranes)
    }

    #[test]
    fn step_integrates_and_keeps_remainder() {
        // theta=0 -> beta=0.5. U = 0.5*1.0 + 1.3 = 1.8, round 2, H = -0.2.
        let mut st = NeuronState {
            h: Some(DenseTensor::new(vec![1], vec![1.0]).unwrap()),
        };
        let y = DenseTensor::new(vec![1], vec![1.3]).unwrap();
        let s = nilif_step(&mut st, &y, 0.0, 4).unwrap();
        assert_eq!(s.counts, vec![2]);
        let h = st.h.unwrap();
        assert!((h.data[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn step_clips_at_cap_and_banks_excess() {
        // U = 100: emit cap 4, keep 96 in the membrane.
        let mut st = NeuronState::fresh();
        let y = DenseTensor::new(vec![1], vec![100.0]).unwrap();
        let s = nilif_step(&mut st, &y, 0.0, 4).unwrap();
        assert_eq!(s.counts, vec![4]);
        assert_eq!(st.h.unwrap().data[0], 96.0);
    }

    #[test]
    fn negative_drive_emits_nothing_but_charges_membrane() {
        let mut st = NeuronState::fresh();
        let y = DenseTensor::new(vec![1], vec![-0.7]).unwrap();
        let s = nilif_step(&mut st, &y, 0.0, 4).unwrap();
        assert_eq!(s.counts, vec![0]);
        assert!((st.h.unwrap().data[0] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn sequence_matches_scalar_trace() {
        // Two steps of y=0.6 at beta=0.5:
        //   t1: U = 0.6           -> round 1, H = -0.4
        //   t2: U = 0.5*(-0.4)+0.6 = 0.4 -> round 0, H = 0.4
        let y = DenseTensor::new(vec![2, 1], vec![0.6, 0.6]).unwrap();
        let p = NiLifParams::new(4, 2);
        let s = nilif_sequence(&y, &p).unwrap();
        assert_eq!(s.counts, vec![1, 0]);
        let (oracle, membranes) = scalar_trace(&[0.6, 0.6], &[0.0, 0.0], 4);
        assert_eq!(s.counts, oracle);
        assert!((membranes[0] + 0.4).abs() < 1e-12);
        assert!((membranes[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn sequence_matches_scalar_trace_randomized() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let t = rng.gen_range(1..=5);
            let ys: Vec<f64> = (0..t).map(|_| rng.gen_range(-3.0..6.0)).collect();
            let thetas: Vec<f64> = (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = NiLifParams { theta: thetas.clone(), d_cap: 4 };
            let y = DenseTensor::new(vec![t, 1], ys.clone()).unwrap();
            let s = nilif_sequence(&y, &p).unwrap();
            let (oracle, _) = scalar_trace(&ys, &thetas, 4);
            assert_eq!(s.counts, oracle, "ys={ys:?} thetas={thetas:?}");
        }
    }

    #[test]
    fn charge_is_conserved_each_step() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut state = NeuronState::fresh();
        for _ in 0..1000 {
            let y = DenseTensor::new(vec![4], (0..4).map(|_| rng.gen_range(-5.0..9.0)).collect())
                .unwrap();
            let h_prev: Vec<f64> = state
                .h
                .as_ref()
                .map_or(vec![0.0; 4], |h| h.data.clone());
            let theta = rng.gen_range(-3.0..3.0);
            let s = nilif_step(&mut state, &y, theta, 4).unwrap();
            let h = state.h.as_ref().unwrap();
            let beta = sigmoid(theta);
            for i in 0..4 {
                let u = beta * h_prev[i] + y.data[i];
                assert!((u - (s.counts[i] as f64 + h.data[i])).abs() < 1e-9);
                assert!(s.counts[i] <= 4);
            }
        }
    }

    #[test]
    fn beta_zero_is_stateless() {
        let p = NiLifParams::stateless(4, 3);
        assert_eq!(sigmoid(p.theta[0]), 0.0);
        let ys = vec![0.6, 2.3, 1.4];
        let y = DenseTensor::new(vec![3, 1], ys.clone()).unwrap();
        let seq = nilif_sequence(&y, &p).unwrap();
        for (t, &v) in ys.iter().enumerate() {
            let mut st = NeuronState::fresh();
            let lone =
                nilif_step(&mut st, &DenseTensor::new(vec![1], vec![v]).unwrap(), -1000.0, 4)
                    .unwrap();
            assert_eq!(seq.counts[t], lone.counts[0]);
        }
    }

    #[test]
    fn straight_through_window() {
        let u = DenseTensor::new(vec![4], vec![1.2, 10.0, -0.4, -0.6]).unwrap();
        let g = straight_through_grad(&u, 4);
        assert_eq!(g.data, vec![0.25, 0.0, 0.25, 0.0]);
    }
}
