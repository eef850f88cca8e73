//! Prediction head and box coding.
//!
//! Three small conv towers read the final search feature: a 1-channel
//! score map, a 2-channel within-cell offset map, and a 2-channel size map.
//! Every tower layer is a neuron-then-conv pair, so the head stays on the
//! accumulate-only path; the last conv produces dense logits and a sigmoid
//! maps everything into [0, 1].
//!
//! Boxes are normalized center/size tuples. A score cell (row r, col c) on an
//! n x n map decodes to cx = (c + off_x) / n, cy = (r + off_y) / n. The
//! reported confidence is always the raw score at the chosen cell, even when
//! a window biased the argmax.

use crate::blocks::SpikingConv;
use crate::energy::{LayerClass, Probe};
use crate::error::{Error, Result};
use crate::neuron::sigmoid;
use crate::nnops::PathKind;
use crate::tensor::DenseTensor;

/// Normalized box: center and size, all in [0, 1] image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxCyWh {
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }
}

/// A chain of neuron-then-conv layers; the last layer sets the output width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub layers: Vec<SpikingConv>,
}

impl Tower {
    fn forward(
        &self,
        u: &DenseTensor,
        path: PathKind,
        probe: &mut Probe,
        name: &str,
    ) -> Result<DenseTensor> {
        let mut x = u.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(
                std::slice::from_ref(&x),
                path,
                probe,
                &format!("{name}.conv{i}"),
                LayerClass::ConvAc,
            )?;
            x = out.into_iter().next().unwrap();
        }
        Ok(x)
    }

    fn validate(&self, c_in: usize, c_out: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("tower needs at least one layer".into()));
        }
        let mut c = c_in;
        for layer in &self.layers {
            if layer.conv.c_in != c {
                return Err(Error::Config("tower channel chain is inconsistent".into()));
            }
            c = layer.conv.c_out;
        }
        if c != c_out {
            return Err(Error::Config(format!("tower must end at {c_out} channels, ends at {c}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub score: Tower,
    pub offset: Tower,
    pub size: Tower,
}

impl HeadSpec {
    pub fn validate(&self, c_in: usize) -> Result<()> {
        self.score.validate(c_in, 1)?;
        self.offset.validate(c_in, 2)?;
        self.size.validate(c_in, 2)
    }
}

/// Post-sigmoid maps. Score is [n, n]; offset and size are [2, n, n] with
/// channel 0 = x and channel 1 = y (offsets) or width and height (sizes).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub score: DenseTensor,
    pub offset: DenseTensor,
    pub size: DenseTensor,
}

fn sigmoid_all(x: DenseTensor) -> DenseTensor {
    DenseTensor {
        shape: x.shape,
        data: x.data.into_iter().map(sigmoid).collect(),
    }
}

/// Run the three towers over the final search feature `[C, n, n]`.
pub fn head_forward(
    u: &DenseTensor,
    spec: &HeadSpec,
    path: PathKind,
    probe: &mut Probe,
) -> Result<HeadMaps> {
    if u.shape.len() != 3 || u.shape[1] != u.shape[2] {
        return Err(Error::Shape(format!("head expects a square [C, n, n] input, got {:?}", u.shape)));
    }
    let n = u.shape[1];
    let score = sigmoid_all(spec.score.forward(u, path, probe, "head.score")?);
    let offset = sigmoid_all(spec.offset.forward(u, path, probe, "head.offset")?);
    let size = sigmoid_all(spec.size.forward(u, path, probe, "head.size")?);
    let score = DenseTensor::new(vec![n, n], score.data)?;
    Ok(HeadMaps { score, offset, size })
}

/// How a window reshapes the score map before the argmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowMode {
    /// score .* window
    Multiplicative,
    /// (1 - weight) * score + weight * window
    WeightedSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowCfg {
    pub mode: WindowMode,
    pub weight: f64,
}

fn biased_score(score: &DenseTensor, window: Option<(&DenseTensor, WindowCfg)>) -> Result<DenseTensor> {
    match window {
        None => Ok(score.clone()),
        Some((w, cfg)) => {
            if w.shape != score.shape {
                return Err(Error::Shape(format!("window {:?} vs score {:?}", w.shape, score.shape)));
            }
            let data = score
                .data
                .iter()
                .zip(&w.data)
                .map(|(s, p)| match cfg.mode {
                    WindowMode::Multiplicative => s * p,
                    WindowMode::WeightedSum => (1.0 - cfg.weight) * s + cfg.weight * p,
                })
                .collect();
            DenseTensor::new(score.shape.clone(), data)
        }
    }
}

/// Pick the best cell (first in row-major order on ties) and decode its box.
/// Returns the box and the raw, unbiased score at the chosen cell.
pub fn decode_box(
    maps: &HeadMaps,
    window: Option<(&DenseTensor, WindowCfg)>,
) -> Result<(BoxCxCyWh, f64)> {
    let n = maps.score.shape[0];
    if maps.score.shape != [n, n] || maps.offset.shape != [2, n, n] || maps.size.shape != [2, n, n] {
        return Err(Error::Shape("head map shapes are inconsistent".into()));
    }
    let ranked = biased_score(&maps.score, window)?;
    let mut best = 0usize;
    for (i, v) in ranked.data.iter().enumerate() {
        if *v > ranked.data[best] {
            best = i;
        }
    }
    let (row, col) = (best / n, best % n);
    let off_x = maps.offset.data[row * n + col];
    let off_y = maps.offset.data[n * n + row * n + col];
    let b = BoxCxCyWh {
        cx: (col as f64 + off_x) / n as f64,
        cy: (row as f64 + off_y) / n as f64,
        w: maps.size.data[row * n + col],
        h: maps.size.data[n * n + row * n + col],
    };
    Ok((b, maps.score.data[row * n + col]))
}

/// Training targets for one box on an n x n grid: the positive cell, exact
/// offsets and sizes there, and a Gaussian-bumped heatmap for the focal term.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub row: usize,
    pub col: usize,
    pub offset: [f64; 2],
    pub size: [f64; 2],
    pub heatmap: DenseTensor,
}

pub fn encode_targets(b: &BoxCxCyWh, n: usize) -> Result<TargetMaps> {
    if n == 0 {
        return Err(Error::Config("grid must be nonempty".into()));
    }
    for v in [b.cx, b.cy, b.w, b.h] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Value(format!("box fields must lie in [0,1], got {v}")));
        }
    }
    let col = ((b.cx * n as f64).floor() as usize).min(n - 1);
    let row = ((b.cy * n as f64).floor() as usize).min(n - 1);
    let off_x = b.cx * n as f64 - col as f64;
    let off_y = b.cy * n as f64 - row as f64;
    // Gaussian spread tied to the box footprint on the grid; the positive
    // cell is exactly 1 so the focal loss sees a clean positive.
    let sigma = (b.w.min(b.h) * n as f64 / 6.0).max(0.5);
    let mut heat = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let d2 = (r as f64 - row as f64).powi(2) + (c as f64 - col as f64).powi(2);
            heat[r * n + c] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    heat[row * n + col] = 1.0;
    Ok(TargetMaps {
        row,
        col,
        offset: [off_x, off_y],
        size: [b.w, b.h],
        heatmap: DenseTensor::new(vec![n, n], heat)?,
    })
}

/// Rebuild the box a target encodes; decode_box on ideal maps matches this.
pub fn decode_targets(t: &TargetMaps) -> BoxCxCyWh {
    let n = t.heatmap.shape[0] as f64;
    BoxCxCyWh {
        cx: (t.col as f64 + t.offset[0]) / n,
        cy: (t.row as f64 + t.offset[1]) / n,
        w: t.size[0],
        h: t.size[1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::NiLifParams;
    use crate::nnops::{hanning_2d, ConvKind, ConvSpec};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const D: u32 = 4;

    fn conv3(rng: &mut StdRng, c_in: usize, c_out: usize) -> SpikingConv {
        let w: Vec<f64> = (0..c_out * c_in * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        SpikingConv {
            neuron: NiLifParams::new(D, 1),
            conv: ConvSpec::new(
                ConvKind::Full,
                c_in,
                c_out,
                3,
                1,
                1,
                DenseTensor::new(vec![c_out, c_in, 3, 3], w).unwrap(),
                Some(vec![0.0; c_out]),
            )
            .unwrap(),
        }
    }

    fn spec(rng: &mut StdRng, c_in: usize, mid: usize) -> HeadSpec {
        HeadSpec {
            score: Tower { layers: vec![conv3(rng, c_in, mid), conv3(rng, mid, 1)] },
            offset: Tower { layers: vec![conv3(rng, c_in, mid), conv3(rng, mid, 2)] },
            size: Tower { layers: vec![conv3(rng, c_in, mid), conv3(rng, mid, 2)] },
        }
    }

    fn maps_for(n: usize, score: Vec<f64>, off: [f64; 2], size: [f64; 2], cell: (usize, usize)) -> HeadMaps {
        let mut offset = vec![0.0; 2 * n * n];
        let mut sz = vec![0.0; 2 * n * n];
        let (r, c) = cell;
        offset[r * n + c] = off[0];
        offset[n * n + r * n + c] = off[1];
        sz[r * n + c] = size[0];
        sz[n * n + r * n + c] = size[1];
        HeadMaps {
            score: DenseTensor::new(vec![n, n], score).unwrap(),
            offset: DenseTensor::new(vec![2, n, n], offset).unwrap(),
            size: DenseTensor::new(vec![2, n, n], sz).unwrap(),
        }
    }

    // Worked example: 8x8 grid, peak at row 2 col 3, offsets 0.5.
    //   cx = (3 + 0.5) / 8 = 0.4375, cy = (2 + 0.5) / 8 = 0.3125
    #[test]
    fn decode_matches_hand_example() {
        let n = 8;
        let mut score = vec![0.1; n * n];
        score[2 * n + 3] = 0.9;
        let maps = maps_for(n, score, [0.5, 0.5], [0.25, 0.125], (2, 3));
        let (b, conf) = decode_box(&maps, None).unwrap();
        assert_eq!(b.cx, 0.4375);
        assert_eq!(b.cy, 0.3125);
        assert_eq!(b.w, 0.25);
        assert_eq!(b.h, 0.125);
        assert_eq!(conf, 0.9);
    }

    #[test]
    fn confidence_ignores_window_bias() {
        // The window drags the argmax to a different cell; the returned
        // confidence must be the raw score of that cell, not the biased one.
        let n = 9;
        let mut score = vec![0.3; n * n];
        score[0] = 0.8; // strong corner response
        let maps = maps_for(n, score, [0.5, 0.5], [0.2, 0.2], (4, 4));
        let win = hanning_2d(n).unwrap();
        let cfg = WindowCfg { mode: WindowMode::Multiplicative, weight: 1.0 };
        let (b, conf) = decode_box(&maps, Some((&win, cfg))).unwrap();
        // corner window value is 0, so 0.8 * 0 loses to the center cells
        assert_eq!(conf, 0.3);
        assert!((b.cx - 0.5).abs() < 0.06 && (b.cy - 0.5).abs() < 0.06);
    }

    #[test]
    fn uniform_score_with_window_picks_the_peak() {
        let n = 9;
        let maps = maps_for(n, vec![0.5; n * n], [0.5, 0.5], [0.1, 0.1], (4, 4));
        let win = hanning_2d(n).unwrap();
        let cfg = WindowCfg { mode: WindowMode::Multiplicative, weight: 1.0 };
        let (b, _) = decode_box(&maps, Some((&win, cfg))).unwrap();
        // odd n: unique peak at the exact center cell
        assert_eq!(b.cx, (4.0 + 0.5) / 9.0);
        assert_eq!(b.cy, (4.0 + 0.5) / 9.0);
    }

    #[test]
    fn weighted_sum_window_also_centers() {
        let n = 9;
        let maps = maps_for(n, vec![0.5; n * n], [0.5, 0.5], [0.1, 0.1], (4, 4));
        let win = hanning_2d(n).unwrap();
        let cfg = WindowCfg { mode: WindowMode::WeightedSum, weight: 0.4 };
        let (b, _) = decode_box(&maps, Some((&win, cfg))).unwrap();
        assert_eq!(b.cx, 0.5);
        assert_eq!(b.cy, 0.5);
    }

    #[test]
    fn argmax_is_invariant_to_positive_scaling() {
        let mut rng = StdRng::seed_from_u64(4);
        let n = 8;
        for _ in 0..50 {
            let score: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let maps1 = maps_for(n, score.clone(), [0.3, 0.7], [0.2, 0.2], (1, 1));
            let scaled: Vec<f64> = score.iter().map(|v| v * 7.5).collect();
            let mut maps2 = maps1.clone();
            maps2.score = DenseTensor::new(vec![n, n], scaled).unwrap();
            let (b1, _) = decode_box(&maps1, None).unwrap();
            let (b2, _) = decode_box(&maps2, None).unwrap();
            assert_eq!(b1.cx, b2.cx);
            assert_eq!(b1.cy, b2.cy);
        }
    }

    #[test]
    fn encode_decode_roundtrip_is_tight() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..2000 {
            let n = *[4usize, 8, 16].iter().nth(rng.gen_range(0..3)).unwrap();
            let b = BoxCxCyWh {
                cx: rng.gen_range(0.05..0.95),
                cy: rng.gen_range(0.05..0.95),
                w: rng.gen_range(0.01..0.5),
                h: rng.gen_range(0.01..0.5),
            };
            let t = encode_targets(&b, n).unwrap();
            assert!(t.offset[0] >= 0.0 && t.offset[0] <= 1.0);
            let back = decode_targets(&t);
            assert!((back.cx - b.cx).abs() <= 1e-9);
            assert!((back.cy - b.cy).abs() <= 1e-9);
            assert_eq!(back.w, b.w);
            assert_eq!(back.h, b.h);
        }
    }

    #[test]
    fn target_heatmap_peaks_at_the_positive_cell() {
        let b = BoxCxCyWh { cx: 0.3, cy: 0.62, w: 0.2, h: 0.3 };
        let t = encode_targets(&b, 8).unwrap();
        assert_eq!((t.row, t.col), (4, 2));
        assert_eq!(t.heatmap.data[t.row * 8 + t.col], 1.0);
        for v in &t.heatmap.data {
            assert!(*v >= 0.0 && *v <= 1.0);
        }
    }

    #[test]
    fn head_towers_run_and_stay_in_range() {
        let mut rng = StdRng::seed_from_u64(2);
        let spec = spec(&mut rng, 8, 16);
        spec.validate(8).unwrap();
        let u = DenseTensor::new(
            vec![8, 4, 4],
            (0..8 * 16).map(|_| rng.gen_range(-1.0..2.0)).collect(),
        )
        .unwrap();
        let mut probe = crate::energy::Probe::tracing(crate::energy::Branch::Search);
        let maps = head_forward(&u, &spec, PathKind::Ac, &mut probe).unwrap();
        assert_eq!(maps.score.shape, vec![4, 4]);
        assert_eq!(maps.offset.shape, vec![2, 4, 4]);
        for v in maps.score.data.iter().chain(&maps.offset.data).chain(&maps.size.data) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        let names: Vec<&str> = probe.records.iter().map(|r| r.name.as_str()).collect();
        assert!(names.contains(&"head.score.conv0"));
        assert!(names.contains(&"head.size.conv1"));
        // head must never touch the multiply path
        assert!(probe.records.iter().all(|r| !r.class.is_mac()));
    }

    #[test]
    fn head_paths_agree() {
        let mut rng = StdRng::seed_from_u64(6);
        let spec = spec(&mut rng, 8, 16);
        let u = DenseTensor::new(
            vec![8, 4, 4],
            (0..8 * 16).map(|_| rng.gen_range(-1.0..2.0)).collect(),
        )
        .unwrap();
        let mut pa = crate::energy::Probe::off();
        let mut pb = crate::energy::Probe::off();
        let a = head_forward(&u, &spec, PathKind::Ac, &mut pa).unwrap();
        let b = head_forward(&u, &spec, PathKind::Mac, &mut pb).unwrap();
        assert!(a.score.max_abs_diff(&b.score) <= 1e-9);
        assert!(a.offset.max_abs_diff(&b.offset) <= 1e-9);
        assert!(a.size.max_abs_diff(&b.size) <= 1e-9);
    }
}
