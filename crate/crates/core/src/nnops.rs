//! Convolution, linear, pooling, upsampling and window primitives.
//!
//! Spike-consuming ops run on either of two evaluation paths that must agree:
//! `Mac` performs dense dot products on the real values `counts / d_cap`;
//! `Ac` walks only nonzero counts and accumulates `count * weight / d_cap`
//! per event, which is the accumulate-only arithmetic a spike-driven device
//! would execute. Feature maps are `[C, H, W]`; token matrices are `[N, C]`.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, SpikeTensor};

/// Evaluation path for spike-consuming linear operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    /// Dense multiply-accumulate on real values.
    Mac,
    /// Event-driven accumulate over nonzero counts only.
    Ac,
}

/// Convolution structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Full,
    /// One filter per channel; weights carry a singleton input-channel axis.
    Depthwise,
    /// 1x1 full convolution.
    Pointwise,
}

/// A 2-D convolution with its weights.
///
/// Weight layout: `[c_out, c_in, kh, kw]` for full/pointwise and
/// `[c, 1, kh, kw]` for depthwise. Bias is per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: DenseTensor,
    pub bias: Option<Vec<f64>>,
}

impl ConvSpec {
    pub fn new(
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weights: DenseTensor,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let expect = match kind {
            ConvKind::Full => vec![c_out, c_in, kernel, kernel],
            ConvKind::Depthwise => {
                if c_in != c_out {
                    return Err(Error::Config("depthwise conv needs c_in == c_out".into()));
                }
                vec![c_out, 1, kernel, kernel]
            }
            ConvKind::Pointwise => {
                if kernel != 1 {
                    return Err(Error::Config("pointwise conv needs kernel == 1".into()));
                }
                vec![c_out, c_in, 1, 1]
            }
        };
        if weights.shape != expect {
            return Err(Error::Shape(format!(
                "conv weights {:?}, expected {:?}",
                weights.shape, expect
            )));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(Error::Shape(format!(
                    "conv bias {} entries, expected {}",
                    b.len(),
                    c_out
                )));
            }
        }
        if stride == 0 || kernel == 0 {
            return Err(Error::Config("kernel and stride must be >= 1".into()));
        }
        Ok(Self { kind, c_in, c_out, kernel, stride, padding, weights, bias })
    }

    /// Output extent for one spatial axis: floor((in + 2p - k)/s) + 1.
    pub fn out_dim(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "input {input} too small for kernel {} with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Multiply-accumulate count for one application at the given output size.
    pub fn mac_ops(&self, oh: usize, ow: usize) -> u64 {
        let fan_in = match self.kind {
            ConvKind::Depthwise => self.kernel * self.kernel,
            _ => self.kernel * self.kernel * self.c_in,
        };
        (fan_in * self.c_out * oh * ow) as u64
    }
}

/// A dense linear map with its weights: `y = x W^T + b`, weights `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: DenseTensor,
    pub bias: Option<Vec<f64>>,
}

impl LinearSpec {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: DenseTensor,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if weights.shape != vec![out_dim, in_dim] {
            return Err(Error::Shape(format!(
                "linear weights {:?}, expected [{out_dim}, {in_dim}]",
                weights.shape
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_dim {
                return Err(Error::Shape("linear bias length mismatch".into()));
            }
        }
        Ok(Self { in_dim, out_dim, weights, bias })
    }

    pub fn mac_ops(&self, rows: usize) -> u64 {
        (rows * self.in_dim * self.out_dim) as u64
    }
}

/// Per-channel affine (a folded batch norm): `y[c] = scale[c] * x[c] + shift[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnFold {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl BnFold {
    pub fn apply(&self, x: &DenseTensor) -> Result<DenseTensor> {
        if x.shape.len() != 3 || x.shape[0] != self.scale.len() {
            return Err(Error::Shape("bn apply expects [C,H,W] matching channels".into()));
        }
        let hw = x.shape[1] * x.shape[2];
        let mut data = x.data.clone();
        for c in 0..self.scale.len() {
            for i in 0..hw {
                data[c * hw + i] = self.scale[c] * data[c * hw + i] + self.shift[c];
            }
        }
        DenseTensor::new(x.shape.clone(), data)
    }
}

/// Fold a per-channel affine into the preceding convolution's weights/bias.
pub fn fold_bn(conv: &ConvSpec, bn: &BnFold) -> Result<ConvSpec> {
    if bn.scale.len() != conv.c_out || bn.shift.len() != conv.c_out {
        return Err(Error::Shape("bn channels do not match conv output".into()));
    }
    let mut folded = conv.clone();
    let per_oc = folded.weights.data.len() / conv.c_out;
    for oc in 0..conv.c_out {
        for i in 0..per_oc {
            folded.weights.data[oc * per_oc + i] *= bn.scale[oc];
        }
    }
    let old_bias = conv.bias.clone().unwrap_or_else(|| vec![0.0; conv.c_out]);
    folded.bias = Some(
        (0..conv.c_out)
            .map(|oc| bn.scale[oc] * old_bias[oc] + bn.shift[oc])
            .collect(),
    );
    Ok(folded)
}

fn check_chw(shape: &[usize], c: usize, what: &str) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[0] != c {
        return Err(Error::Shape(format!(
            "{what} expects [{c}, H, W], got {shape:?}"
        )));
    }
    Ok((shape[1], shape[2]))
}

/// Dense convolution over a `[C, H, W]` tensor.
pub fn conv2d_dense(x: &DenseTensor, spec: &ConvSpec) -> Result<DenseTensor> {
    let (h, w) = check_chw(&x.shape, spec.c_in, "conv2d")?;
    let oh = spec.out_dim(h)?;
    let ow = spec.out_dim(w)?;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;
    let mut out = vec![0.0f64; spec.c_out * oh * ow];
    let depthwise = spec.kind == ConvKind::Depthwise;
    let wk = k * k;
    let w_per_oc = if depthwise { wk } else { spec.c_in * wk };
    for oc in 0..spec.c_out {
        let wbase = oc * w_per_oc;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                let ic_range = if depthwise { oc..oc + 1 } else { 0..spec.c_in };
                for ic in ic_range {
                    let wc = if depthwise { wbase } else { wbase + ic * wk };
                    let xc = ic * h * w;
                    for ky in 0..k {
                        let iy = (oy * s) as isize - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s) as isize - p + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x.data[xc + iy as usize * w + ix as usize]
                                * spec.weights.data[wc + ky * k + kx];
                        }
                    }
                }
                if let Some(b) = &spec.bias {
                    acc += b[oc];
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    DenseTensor::new(vec![spec.c_out, oh, ow], out)
}

/// Spike-consuming convolution on the chosen evaluation path.
pub fn conv2d(x: &SpikeTensor, spec: &ConvSpec, path: PathKind) -> Result<DenseTensor> {
    match path {
        PathKind::Mac => conv2d_dense(&crate::tensor::spike_to_dense(x), spec),
        PathKind::Ac => conv2d_ac(x, spec),
    }
}

/// Event-driven convolution: each nonzero count `c` contributes one
/// accumulation of `c * weight / d_cap` to every output it reaches.
fn conv2d_ac(x: &SpikeTensor, spec: &ConvSpec) -> Result<DenseTensor> {
    let (h, w) = check_chw(&x.shape, spec.c_in, "conv2d")?;
    let oh = spec.out_dim(h)?;
    let ow = spec.out_dim(w)?;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;
    let inv_d = 1.0 / x.d_cap as f64;
    let depthwise = spec.kind == ConvKind::Depthwise;
    let wk = k * k;
    let w_per_oc = if depthwise { wk } else { spec.c_in * wk };
    let mut out = vec![0.0f64; spec.c_out * oh * ow];
    for ic in 0..spec.c_in {
        let xc = ic * h * w;
        for iy in 0..h {
            for ix in 0..w {
                let c = x.counts[xc + iy * w + ix];
                if c == 0 {
                    continue;
                }
                let ev = c as f64 * inv_d;
                // Output rows reached by this input under stride/padding.
                for ky in 0..k {
                    let num_y = iy as isize + p - ky as isize;
                    if num_y < 0 || num_y % s as isize != 0 {
                        continue;
                    }
                    let oy = (num_y / s as isize) as usize;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..k {
                        let num_x = ix as isize + p - kx as isize;
                        if num_x < 0 || num_x % s as isize != 0 {
                            continue;
                        }
                        let ox = (num_x / s as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        if depthwise {
                            let oc = ic;
                            out[(oc * oh + oy) * ow + ox] +=
                                ev * spec.weights.data[oc * w_per_oc + ky * k + kx];
                        } else {
                            for oc in 0..spec.c_out {
                                out[(oc * oh + oy) * ow + ox] += ev
                                    * spec.weights.data[oc * w_per_oc + ic * wk + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = &spec.bias {
        let plane = oh * ow;
        for oc in 0..spec.c_out {
            for i in 0..plane {
                out[oc * plane + i] += b[oc];
            }
        }
    }
    DenseTensor::new(vec![spec.c_out, oh, ow], out)
}

/// Dense linear map over `[N, in]` rows.
pub fn linear_dense(x: &DenseTensor, spec: &LinearSpec) -> Result<DenseTensor> {
    if x.shape.len() != 2 || x.shape[1] != spec.in_dim {
        return Err(Error::Shape(format!(
            "linear expects [N, {}], got {:?}",
            spec.in_dim, x.shape
        )));
    }
    let n = x.shape[0];
    let mut out = vec![0.0f64; n * spec.out_dim];
    for r in 0..n {
        for o in 0..spec.out_dim {
            let mut acc = 0.0;
            for i in 0..spec.in_dim {
                acc += x.data[r * spec.in_dim + i] * spec.weights.data[o * spec.in_dim + i];
            }
            if let Some(b) = &spec.bias {
                acc += b[o];
            }
            out[r * spec.out_dim + o] = acc;
        }
    }
    DenseTensor::new(vec![n, spec.out_dim], out)
}

/// Spike-consuming linear map on the chosen evaluation path.
pub fn linear(x: &SpikeTensor, spec: &LinearSpec, path: PathKind) -> Result<DenseTensor> {
    match path {
        PathKind::Mac => linear_dense(&crate::tensor::spike_to_dense(x), spec),
        PathKind::Ac => {
            if x.shape.len() != 2 || x.shape[1] != spec.in_dim {
                return Err(Error::Shape(format!(
                    "linear expects [N, {}], got {:?}",
                    spec.in_dim, x.shape
                )));
            }
            let n = x.shape[0];
            let inv_d = 1.0 / x.d_cap as f64;
            let mut out = vec![0.0f64; n * spec.out_dim];
            for r in 0..n {
                for i in 0..spec.in_dim {
                    let c = x.counts[r * spec.in_dim + i];
                    if c == 0 {
                        continue;
                    }
                    let ev = c as f64 * inv_d;
                    for o in 0..spec.out_dim {
                        out[r * spec.out_dim + o] += ev * spec.weights.data[o * spec.in_dim + i];
                    }
                }
                if let Some(b) = &spec.bias {
                    for o in 0..spec.out_dim {
                        out[r * spec.out_dim + o] += b[o];
                    }
                }
            }
            DenseTensor::new(vec![n, spec.out_dim], out)
        }
    }
}

/// Average-pool a `[C, H, W]` tensor down to an exact target extent.
/// Source extents must be integer multiples of the target.
pub fn avg_pool_to(x: &DenseTensor, target_hw: (usize, usize)) -> Result<DenseTensor> {
    if x.shape.len() != 3 {
        return Err(Error::Shape(format!("avg_pool_to expects [C,H,W], got {:?}", x.shape)));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Shape(format!(
            "cannot pool {h}x{w} to {th}x{tw}: extents must divide evenly"
        )));
    }
    let (fy, fx) = (h / th, w / tw);
    let area = (fy * fx) as f64;
    let mut out = vec![0.0f64; c * th * tw];
    for ch in 0..c {
        for oy in 0..th {
            for ox in 0..tw {
                let mut acc = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        acc += x.data[(ch * h + oy * fy + dy) * w + ox * fx + dx];
                    }
                }
                out[(ch * th + oy) * tw + ox] = acc / area;
            }
        }
    }
    DenseTensor::new(vec![c, th, tw], out)
}

/// Nearest-neighbour upsample of a `[C, h, w]` tensor to an exact multiple.
pub fn upsample_nearest_to(x: &DenseTensor, target_hw: (usize, usize)) -> Result<DenseTensor> {
    if x.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "upsample_nearest_to expects [C,h,w], got {:?}",
            x.shape
        )));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 || th % h != 0 || tw % w != 0 {
        return Err(Error::Shape(format!(
            "cannot upsample {h}x{w} to {th}x{tw}: target must be a multiple"
        )));
    }
    let (fy, fx) = (th / h, tw / w);
    let mut out = vec![0.0f64; c * th * tw];
    for ch in 0..c {
        for oy in 0..th {
            for ox in 0..tw {
                out[(ch * th + oy) * tw + ox] = x.data[(ch * h + oy / fy) * w + ox / fx];
            }
        }
    }
    DenseTensor::new(vec![c, th, tw], out)
}

/// Separable 2-D Hanning window, `[n, n]`. The 1-D window is
/// `0.5 - 0.5 cos(2 pi k / (n-1))`; n = 1 degenerates to `[1.0]`.
pub fn hanning_2d(n: usize) -> Result<DenseTensor> {
    if n == 0 {
        return Err(Error::Config("hanning window needs n >= 1".into()));
    }
    let line: Vec<f64> = if n == 1 {
        vec![1.0]
    } else {
        (0..n)
            .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
            .collect()
    };
    let mut out = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = line[y] * line[x];
        }
    }
    DenseTensor::new(vec![n, n], out)
}

/// 2-D matmul: `[m, k] x [k, n] -> [m, n]`. Optionally counts MAC ops.
pub fn matmul(a: &DenseTensor, b: &DenseTensor, ops: Option<&mut u64>) -> Result<DenseTensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!(
            "matmul: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a.data[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.data[kk * n + j];
            }
        }
    }
    if let Some(ops) = ops {
        *ops += (m * k * n) as u64;
    }
    DenseTensor::new(vec![m, n], out)
}

/// `[m, k]` transposed against `[m, n]`: `a^T b -> [k, n]`.
pub fn matmul_at_b(a: &DenseTensor, b: &DenseTensor, ops: Option<&mut u64>) -> Result<DenseTensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
        return Err(Error::Shape(format!(
            "matmul_at_b: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f64; k * n];
    for r in 0..m {
        for i in 0..k {
            let av = a.data[r * k + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.data[r * n + j];
            }
        }
    }
    if let Some(ops) = ops {
        *ops += (m * k * n) as u64;
    }
    DenseTensor::new(vec![k, n], out)
}

/// `[m, k]` against `[n, k]` transposed: `a b^T -> [m, n]`.
pub fn matmul_a_bt(a: &DenseTensor, b: &DenseTensor, ops: Option<&mut u64>) -> Result<DenseTensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::Shape(format!(
            "matmul_a_bt: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a.data[i * k + kk] * b.data[j * k + kk];
            }
            out[i * n + j] = acc;
        }
    }
    if let Some(ops) = ops {
        *ops += (m * k * n) as u64;
    }
    DenseTensor::new(vec![m, n], out)
}
