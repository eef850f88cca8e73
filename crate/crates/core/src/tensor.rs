//! Dense and spike tensors.
//!
//! A `SpikeTensor` carries integer spike counts in `0..=d_cap`; its real value
//! is `counts / d_cap`. A `DenseTensor` carries finite f64 values. Both are
//! row-major; for temporal tensors the timestep axis is always axis 0, so
//! `[T, C, H, W]` never `[C, T, H, W]`.

use crate::error::{Error, Result};

/// Number of elements implied by a shape. The empty shape is a scalar (1).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Dense f64 tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    /// Build from shape and data; every value must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite value {v} in tensor")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat index of a multi-index.
    pub fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let st = strides(&self.shape);
        idx.iter().zip(&st).map(|(i, s)| i * s).sum()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let f = self.flat(idx);
        self.data[f] = v;
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        DenseTensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, c: f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Integer spike-count tensor. Real value of an element is `count / d_cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTensor {
    pub shape: Vec<usize>,
    pub counts: Vec<u32>,
    /// Largest integer a neuron may emit per step; counts stay in `0..=d_cap`.
    pub d_cap: u32,
}

impl SpikeTensor {
    pub fn new(shape: Vec<usize>, counts: Vec<u32>, d_cap: u32) -> Result<Self> {
        if d_cap == 0 {
            return Err(Error::Value("d_cap must be >= 1".into()));
        }
        if numel(&shape) != counts.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                counts.len()
            )));
        }
        if let Some(c) = counts.iter().find(|c| **c > d_cap) {
            return Err(Error::Value(format!("count {c} exceeds d_cap {d_cap}")));
        }
        Ok(Self { shape, counts, d_cap })
    }

    pub fn zeros(shape: Vec<usize>, d_cap: u32) -> Self {
        let n = numel(&shape);
        Self { shape, counts: vec![0; n], d_cap }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Firing-rate statistics of a spike tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiringStats {
    /// Fraction of elements with a nonzero count.
    pub nonzero_fraction: f64,
    /// Mean integer count per element.
    pub mean_integer: f64,
    pub element_count: usize,
    pub timestep_count: usize,
}

impl FiringStats {
    /// Stats of a dense-driven op: the activity reading is the nonzero
    /// fraction under both rate interpretations (no integer counts exist).
    pub fn of_dense(x: &DenseTensor) -> Self {
        let n = x.data.len();
        if n == 0 {
            return FiringStats::zero();
        }
        let nz = x.data.iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
        FiringStats {
            nonzero_fraction: nz,
            mean_integer: nz,
            element_count: n,
            timestep_count: 1,
        }
    }

    pub fn zero() -> Self {
        FiringStats {
            nonzero_fraction: 0.0,
            mean_integer: 0.0,
            element_count: 0,
            timestep_count: 0,
        }
    }

    /// Element-weighted merge, as if the two tensors were concatenated.
    pub fn merge(&self, other: &FiringStats) -> FiringStats {
        let n = self.element_count + other.element_count;
        if n == 0 {
            return FiringStats::zero();
        }
        let wa = self.element_count as f64;
        let wb = other.element_count as f64;
        FiringStats {
            nonzero_fraction: (self.nonzero_fraction * wa + other.nonzero_fraction * wb)
                / n as f64,
            mean_integer: (self.mean_integer * wa + other.mean_integer * wb) / n as f64,
            element_count: n,
            timestep_count: self.timestep_count.max(other.timestep_count),
        }
    }
}

/// Measure firing statistics. Empty tensors yield all-zero stats.
pub fn sfr_measure(s: &SpikeTensor) -> FiringStats {
    let n = s.counts.len();
    if n == 0 {
        return FiringStats::zero();
    }
    let nonzero = s.counts.iter().filter(|c| **c > 0).count();
    let total: u64 = s.counts.iter().map(|c| *c as u64).sum();
    FiringStats {
        nonzero_fraction: nonzero as f64 / n as f64,
        mean_integer: total as f64 / n as f64,
        element_count: n,
        timestep_count: 1,
    }
}

/// Real value of a spike tensor: counts / d_cap, elementwise.
pub fn spike_to_dense(s: &SpikeTensor) -> DenseTensor {
    let d = s.d_cap as f64;
    DenseTensor {
        shape: s.shape.clone(),
        data: s.counts.iter().map(|c| *c as f64 / d).collect(),
    }
}

/// Decompose integer counts into `d_cap` binary plane tensors.
///
/// Plane k (1-based) holds 1 where `counts >= k`, so the planes sum back to
/// the original counts and each plane is a valid unit-spike train.
pub fn unit_spike_expand(s: &SpikeTensor) -> Vec<SpikeTensor> {
    (1..=s.d_cap)
        .map(|k| SpikeTensor {
            shape: s.shape.clone(),
            counts: s.counts.iter().map(|c| u32::from(*c >= k)).collect(),
            d_cap: s.d_cap,
        })
        .collect()
}
