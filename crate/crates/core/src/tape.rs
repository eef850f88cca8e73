//! Reverse-mode differentiation tape over the engine's operator set.
//!
//! Nodes live in an index arena and evaluate eagerly as the graph is built,
//! so insertion order is a topological order and `backward` is a single
//! reverse sweep that visits each node exactly once. Spike emission is not
//! differentiable, so the tape offers two relaxations:
//!
//! * `Integer` keeps the true quantized forward (round, clamp) and routes
//!   gradients straight through the rounding with slope `1/D` inside the
//!   active window. Training runs in this mode, and its forward matches the
//!   inference engine.
//! * `Surrogate` replaces emission with the clipped ramp `clamp(U,0,D)/D`,
//!   whose backward is exact. Finite differences of a surrogate-mode forward
//!   agree with the analytic gradients, which is how the tape is validated.
//!
//! Membrane reset has its own node (`spike_residual`) computing `U - c`
//! directly from the membrane rather than re-scaling the emitted value, so
//! the residual is bit-equal to the inference engine for any `D`.

use crate::error::{Error, Result};
use crate::loss::{focal_from_logits, GIOU_EPS};
use crate::nnops::{self, ConvKind, ConvSpec, LinearSpec};
use crate::tensor::{numel, DenseTensor};

pub type NodeId = usize;

/// How spike emission behaves on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Quantized forward, straight-through backward on `[-0.5, D + 0.5]`.
    Integer,
    /// Clipped-ramp forward, exact backward on `(0, D)`.
    Surrogate,
}

/// Which axis of the right operand broadcasts in `mul`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    /// Same shape.
    Elem,
    /// Right operand is a single value.
    Scalar,
    /// Left is `[R, C]`, right is length `C`, applied per row.
    Row,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId, Bcast),
    Div(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    DivConst(NodeId, f64),
    Min(NodeId, NodeId),
    Max(NodeId, NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Sigmoid(NodeId),
    Spike(NodeId, u32),
    SpikeResidual(NodeId, u32),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        kind: ConvKind,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Matmul(NodeId, NodeId),
    /// `a^T b` for `a [m, k]`, `b [m, n]`.
    MatmulAtB(NodeId, NodeId),
    Transpose2d(NodeId),
    Reshape(NodeId),
    AvgPoolTo(NodeId, (usize, usize)),
    UpsampleNearestTo(NodeId, (usize, usize)),
    /// `[N, C] -> [1, C]` mean over rows.
    ColMeans(NodeId),
    SumAll(NodeId),
    Gather(NodeId, usize),
    FocalLogits { x: NodeId, target: DenseTensor },
}

struct Node {
    op: Op,
    value: DenseTensor,
}

/// Per-node gradients produced by one backward sweep.
pub struct Grads(Vec<Option<DenseTensor>>);

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&DenseTensor> {
        self.0.get(id).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, id: NodeId, shape: &[usize], add: impl FnOnce(&mut [f64])) {
        let slot = &mut self.0[id];
        if slot.is_none() {
            *slot = Some(DenseTensor::zeros(shape.to_vec()));
        }
        add(&mut slot.as_mut().unwrap().data);
    }
}

pub struct Tape {
    mode: SpikeMode,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(mode: SpikeMode) -> Self {
        Tape { mode, nodes: Vec::new() }
    }

    pub fn mode(&self) -> SpikeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        &self.nodes[id].value
    }

    /// Short op label, handy when tracing a graph by node id.
    pub fn op_kind(&self, id: NodeId) -> &'static str {
        match self.nodes[id].op {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ScaleConst(..) => "scale_const",
            Op::AddConst(..) => "add_const",
            Op::DivConst(..) => "div_const",
            Op::Min(..) => "min",
            Op::Max(..) => "max",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Sigmoid(..) => "sigmoid",
            Op::Spike(..) => "spike",
            Op::SpikeResidual(..) => "spike_residual",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Matmul(..) => "matmul",
            Op::MatmulAtB(..) => "matmul_at_b",
            Op::Transpose2d(..) => "transpose2d",
            Op::Reshape(..) => "reshape",
            Op::AvgPoolTo(..) => "avg_pool_to",
            Op::UpsampleNearestTo(..) => "upsample_nearest_to",
            Op::ColMeans(..) => "col_means",
            Op::SumAll(..) => "sum_all",
            Op::Gather(..) => "gather",
            Op::FocalLogits { .. } => "focal_logits",
        }
    }

    fn push(&mut self, op: Op, value: DenseTensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: DenseTensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(DenseTensor { shape: vec![1], data: vec![v] })
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a].value.shape != self.nodes[b].value.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a].value.shape, self.nodes[b].value.shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let v = DenseTensor { shape: self.nodes[a].value.shape.clone(), data };
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let bcast = if bv.data.len() == 1 {
            Bcast::Scalar
        } else if av.shape == bv.shape {
            Bcast::Elem
        } else if av.shape.len() == 2 && bv.data.len() == av.shape[1] {
            Bcast::Row
        } else {
            return Err(Error::Shape(format!(
                "mul cannot broadcast {:?} with {:?}",
                av.shape, bv.shape
            )));
        };
        let data: Vec<f64> = match bcast {
            Bcast::Elem => av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
            Bcast::Scalar => av.data.iter().map(|x| x * bv.data[0]).collect(),
            Bcast::Row => {
                let c = av.shape[1];
                av.data
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * bv.data[i % c])
                    .collect()
            }
        };
        let v = DenseTensor { shape: av.shape.clone(), data };
        Ok(self.push(Op::Mul(a, b, bcast), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if bv.data.len() != 1 && av.shape != bv.shape {
            return Err(Error::Shape(format!(
                "div cannot broadcast {:?} with {:?}",
                av.shape, bv.shape
            )));
        }
        let data: Vec<f64> = if bv.data.len() == 1 {
            av.data.iter().map(|x| x / bv.data[0]).collect()
        } else {
            av.data.iter().zip(&bv.data).map(|(x, y)| x / y).collect()
        };
        let v = DenseTensor { shape: av.shape.clone(), data };
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|x| x * c).collect();
        let v = DenseTensor { shape: self.nodes[a].value.shape.clone(), data };
        self.push(Op::ScaleConst(a, c), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|x| x + c).collect();
        let v = DenseTensor { shape: self.nodes[a].value.shape.clone(), data };
        self.push(Op::AddConst(a), v)
    }

    pub fn div_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|x| x / c).collect();
        let v = DenseTensor { shape: self.nodes[a].value.shape.clone(), data };
        self.push(Op::DivConst(a, c), v)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "min")?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x.min(*y))
            .collect();
        let v = DenseTensor { shape: self.nodes[a].value.shape.clone(), data };
        Ok(self.push(Op::Min(a, b), v))
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "max")?;
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x.max(*y))
            .collect();
        let v = DenseTensor { shape: self.nodes[a].value.shape.clone(), data };
        Ok(self.push(Op::Max(a, b), v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|x| x.max(0.0)).collect();
        let v = DenseTensor { shape: self.nodes[a].value.shape.clone(), data };
        self.push(Op::Relu(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].value.data.iter().map(|x| x.abs()).collect();
        let v = DenseTensor { shape: self.nodes[a].value.shape.clone(), data };
        self.push(Op::Abs(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self
            .nodes[a]
            .value
            .data
            .iter()
            .map(|x| crate::neuron::sigmoid(*x))
            .collect();
        let v = DenseTensor { shape: self.nodes[a].value.shape.clone(), data };
        self.push(Op::Sigmoid(a), v)
    }

    /// Emit spike values `counts / D` from a membrane tensor.
    pub fn spike(&mut self, u: NodeId, d_cap: u32) -> Result<NodeId> {
        if d_cap == 0 {
            return Err(Error::Value("d_cap must be >= 1".into()));
        }
        let d = d_cap as f64;
        let data: Vec<f64> = match self.mode {
            SpikeMode::Integer => self
                .nodes[u]
                .value
                .data
                .iter()
                .map(|x| x.round().clamp(0.0, d) / d)
                .collect(),
            SpikeMode::Surrogate => self
                .nodes[u]
                .value
                .data
                .iter()
                .map(|x| x.clamp(0.0, d) / d)
                .collect(),
        };
        let v = DenseTensor { shape: self.nodes[u].value.shape.clone(), data };
        Ok(self.push(Op::Spike(u, d_cap), v))
    }

    /// Post-emission membrane `U - counts`, computed from the membrane so the
    /// value matches the inference engine bit for bit.
    pub fn spike_residual(&mut self, u: NodeId, d_cap: u32) -> Result<NodeId> {
        if d_cap == 0 {
            return Err(Error::Value("d_cap must be >= 1".into()));
        }
        let d = d_cap as f64;
        let data: Vec<f64> = match self.mode {
            SpikeMode::Integer => self
                .nodes[u]
                .value
                .data
                .iter()
                .map(|x| x - x.round().clamp(0.0, d))
                .collect(),
            SpikeMode::Surrogate => self
                .nodes[u]
                .value
                .data
                .iter()
                .map(|x| x - x.clamp(0.0, d))
                .collect(),
        };
        let v = DenseTensor { shape: self.nodes[u].value.shape.clone(), data };
        Ok(self.push(Op::SpikeResidual(u, d_cap), v))
    }

    fn conv_spec(&self, w: NodeId, b: Option<NodeId>, kind: ConvKind, stride: usize, padding: usize) -> Result<ConvSpec> {
        let ws = &self.nodes[w].value;
        if ws.shape.len() != 4 {
            return Err(Error::Shape(format!("conv weight must be 4-d, got {:?}", ws.shape)));
        }
        let (c_out, k) = (ws.shape[0], ws.shape[2]);
        let c_in = match kind {
            ConvKind::Depthwise => c_out,
            _ => ws.shape[1],
        };
        let bias = match b {
            Some(id) => Some(self.nodes[id].value.data.clone()),
            None => None,
        };
        ConvSpec::new(kind, c_in, c_out, k, stride, padding, ws.clone(), bias)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        kind: ConvKind,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let spec = self.conv_spec(w, b, kind, stride, padding)?;
        let v = nnops::conv2d_dense(&self.nodes[x].value, &spec)?;
        Ok(self.push(Op::Conv2d { x, w, b, kind, stride, padding }, v))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let ws = &self.nodes[w].value;
        if ws.shape.len() != 2 {
            return Err(Error::Shape(format!("linear weight must be 2-d, got {:?}", ws.shape)));
        }
        let (out_dim, in_dim) = (ws.shape[0], ws.shape[1]);
        let bias = b.map(|id| self.nodes[id].value.data.clone());
        let spec = LinearSpec::new(in_dim, out_dim, ws.clone(), bias)?;
        let v = nnops::linear_dense(&self.nodes[x].value, &spec)?;
        Ok(self.push(Op::Linear { x, w, b }, v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = nnops::matmul(&self.nodes[a].value, &self.nodes[b].value, None)?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn matmul_at_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = nnops::matmul_at_b(&self.nodes[a].value, &self.nodes[b].value, None)?;
        Ok(self.push(Op::MatmulAtB(a, b), v))
    }

    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if av.shape.len() != 2 {
            return Err(Error::Shape(format!("transpose expects 2-d, got {:?}", av.shape)));
        }
        let (r, c) = (av.shape[0], av.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av.data[i * c + j];
            }
        }
        let v = DenseTensor { shape: vec![c, r], data };
        Ok(self.push(Op::Transpose2d(a), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if numel(&shape) != av.data.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                av.shape, shape
            )));
        }
        let v = DenseTensor { shape, data: av.data.clone() };
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn avg_pool_to(&mut self, a: NodeId, target_hw: (usize, usize)) -> Result<NodeId> {
        let v = nnops::avg_pool_to(&self.nodes[a].value, target_hw)?;
        Ok(self.push(Op::AvgPoolTo(a, target_hw), v))
    }

    pub fn upsample_nearest_to(&mut self, a: NodeId, target_hw: (usize, usize)) -> Result<NodeId> {
        let v = nnops::upsample_nearest_to(&self.nodes[a].value, target_hw)?;
        Ok(self.push(Op::UpsampleNearestTo(a, target_hw), v))
    }

    /// `[N, C] -> [1, C]` mean over the row axis.
    pub fn col_means(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if av.shape.len() != 2 || av.shape[0] == 0 {
            return Err(Error::Shape(format!("col_means expects nonempty [N, C], got {:?}", av.shape)));
        }
        let (n, c) = (av.shape[0], av.shape[1]);
        let mut out = vec![0.0; c];
        for row in 0..n {
            for col in 0..c {
                out[col] += av.data[row * c + col];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let v = DenseTensor { shape: vec![1, c], data: out };
        Ok(self.push(Op::ColMeans(a), v))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        self.push(Op::SumAll(a), DenseTensor { shape: vec![1], data: vec![s] })
    }

    /// Pick one element by flat index; the result is a `[1]` scalar.
    pub fn gather(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if idx >= av.data.len() {
            return Err(Error::Shape(format!(
                "gather index {idx} out of {} elements",
                av.data.len()
            )));
        }
        let v = DenseTensor { shape: vec![1], data: vec![av.data[idx]] };
        Ok(self.push(Op::Gather(a, idx), v))
    }

    /// Focal score loss from logits against a fixed heatmap target.
    pub fn focal_logits(&mut self, x: NodeId, target: &DenseTensor) -> Result<NodeId> {
        let val = focal_from_logits(&self.nodes[x].value, target)?;
        Ok(self.push(
            Op::FocalLogits { x, target: target.clone() },
            DenseTensor { shape: vec![1], data: vec![val] },
        ))
    }

    /// Generalized-IoU loss `1 - GIoU` between two boxes given as
    /// `(cx, cy, w, h)` scalar nodes. Mirrors the closed-form evaluation.
    pub fn giou_loss_nodes(&mut self, a: [NodeId; 4], b: [NodeId; 4]) -> Result<NodeId> {
        let corners = |tape: &mut Tape, bx: [NodeId; 4]| -> Result<[NodeId; 4]> {
            let half_w = tape.scale_const(bx[2], 0.5);
            let half_h = tape.scale_const(bx[3], 0.5);
            Ok([
                tape.sub(bx[0], half_w)?,
                tape.sub(bx[1], half_h)?,
                tape.add(bx[0], half_w)?,
                tape.add(bx[1], half_h)?,
            ])
        };
        let [ax0, ay0, ax1, ay1] = corners(self, a)?;
        let [bx0, by0, bx1, by1] = corners(self, b)?;
        let ix1 = self.min(ax1, bx1)?;
        let ix0 = self.max(ax0, bx0)?;
        let iy1 = self.min(ay1, by1)?;
        let iy0 = self.max(ay0, by0)?;
        let iw_raw = self.sub(ix1, ix0)?;
        let iw = self.relu(iw_raw);
        let ih_raw = self.sub(iy1, iy0)?;
        let ih = self.relu(ih_raw);
        let inter = self.mul(iw, ih)?;
        let area_a = self.mul(a[2], a[3])?;
        let area_b = self.mul(b[2], b[3])?;
        let areas = self.add(area_a, area_b)?;
        let union = self.sub(areas, inter)?;
        let union_eps = self.add_const(union, GIOU_EPS);
        let iou = self.div(inter, union_eps)?;
        let cx1 = self.max(ax1, bx1)?;
        let cx0 = self.min(ax0, bx0)?;
        let cy1 = self.max(ay1, by1)?;
        let cy0 = self.min(ay0, by0)?;
        let cw = self.sub(cx1, cx0)?;
        let ch = self.sub(cy1, cy0)?;
        let hull = self.mul(cw, ch)?;
        let excess = self.sub(hull, union)?;
        let hull_eps = self.add_const(hull, GIOU_EPS);
        let penalty = self.div(excess, hull_eps)?;
        let giou = self.sub(iou, penalty)?;
        let neg = self.scale_const(giou, -1.0);
        Ok(self.add_const(neg, 1.0))
    }

    /// Mean absolute error over four scalar nodes against fixed targets.
    pub fn l1_mean4(&mut self, pred: [NodeId; 4], target: [f64; 4]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for (p, t) in pred.iter().zip(target) {
            let d = self.add_const(*p, -t);
            let a = self.abs(d);
            acc = Some(match acc {
                None => a,
                Some(prev) => self.add(prev, a)?,
            });
        }
        Ok(self.div_const(acc.unwrap(), 4.0))
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        if root >= self.nodes.len() {
            return Err(Error::Value(format!("no node {root}")));
        }
        if self.nodes[root].value.data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.nodes[root].value.shape
            )));
        }
        let mut grads = Grads(vec![None; self.nodes.len()]);
        grads.0[root] = Some(DenseTensor {
            shape: self.nodes[root].value.shape.clone(),
            data: vec![1.0],
        });
        for id in (0..=root).rev() {
            let g = match grads.0[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_back(id, &g, &mut grads)?;
            grads.0[id] = Some(g);
        }
        Ok(grads)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    fn step_back(&self, id: NodeId, g: &DenseTensor, grads: &mut Grads) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                grads.accumulate(*a, self.shape_of(*a), |ga| {
                    for (x, y) in ga.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
                grads.accumulate(*b, self.shape_of(*b), |gb| {
                    for (x, y) in gb.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                grads.accumulate(*a, self.shape_of(*a), |ga| {
                    for (x, y) in ga.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
                grads.accumulate(*b, self.shape_of(*b), |gb| {
                    for (x, y) in gb.iter_mut().zip(&g.data) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b, bcast) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                match bcast {
                    Bcast::Elem => {
                        grads.accumulate(*a, &av.shape, |ga| {
                            for i in 0..ga.len() {
                                ga[i] += g.data[i] * bv.data[i];
                            }
                        });
                        grads.accumulate(*b, &bv.shape, |gb| {
                            for i in 0..gb.len() {
                                gb[i] += g.data[i] * av.data[i];
                            }
                        });
                    }
                    Bcast::Scalar => {
                        grads.accumulate(*a, &av.shape, |ga| {
                            for i in 0..ga.len() {
                                ga[i] += g.data[i] * bv.data[0];
                            }
                        });
                        grads.accumulate(*b, &bv.shape, |gb| {
                            for i in 0..g.data.len() {
                                gb[0] += g.data[i] * av.data[i];
                            }
                        });
                    }
                    Bcast::Row => {
                        let c = av.shape[1];
                        grads.accumulate(*a, &av.shape, |ga| {
                            for i in 0..ga.len() {
                                ga[i] += g.data[i] * bv.data[i % c];
                            }
                        });
                        grads.accumulate(*b, &bv.shape, |gb| {
                            for i in 0..g.data.len() {
                                gb[i % c] += g.data[i] * av.data[i];
                            }
                        });
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let scalar = bv.data.len() == 1;
                grads.accumulate(*a, &av.shape, |ga| {
                    for i in 0..ga.len() {
                        let d = if scalar { bv.data[0] } else { bv.data[i] };
                        ga[i] += g.data[i] / d;
                    }
                });
                grads.accumulate(*b, &bv.shape, |gb| {
                    for i in 0..g.data.len() {
                        let d = if scalar { bv.data[0] } else { bv.data[i] };
                        let j = if scalar { 0 } else { i };
                        gb[j] -= g.data[i] * av.data[i] / (d * d);
                    }
                });
            }
            Op::ScaleConst(a, c) => {
                grads.accumulate(*a, self.shape_of(*a), |ga| {
                    for (x, y) in ga.iter_mut().zip(&g.data) {
                        *x += c * y;
                    }
                });
            }
            Op::AddConst(a) => {
                grads.accumulate(*a, self.shape_of(*a), |ga| {
                    for (x, y) in ga.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
            }
            Op::DivConst(a, c) => {
                grads.accumulate(*a, self.shape_of(*a), |ga| {
                    for (x, y) in ga.iter_mut().zip(&g.data) {
                        *x += y / c;
                    }
                });
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                // Ties send the gradient to the left operand.
                let is_min = matches!(self.nodes[id].op, Op::Min(..));
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                grads.accumulate(*a, &av.shape, |ga| {
                    for i in 0..ga.len() {
                        let left = if is_min { av.data[i] <= bv.data[i] } else { av.data[i] >= bv.data[i] };
                        if left {
                            ga[i] += g.data[i];
                        }
                    }
                });
                grads.accumulate(*b, &bv.shape, |gb| {
                    for i in 0..gb.len() {
                        let left = if is_min { av.data[i] <= bv.data[i] } else { av.data[i] >= bv.data[i] };
                        if !left {
                            gb[i] += g.data[i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                grads.accumulate(*a, &av.shape, |ga| {
                    for i in 0..ga.len() {
                        if av.data[i] > 0.0 {
                            ga[i] += g.data[i];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = &self.nodes[*a].value;
                grads.accumulate(*a, &av.shape, |ga| {
                    for i in 0..ga.len() {
                        if av.data[i] > 0.0 {
                            ga[i] += g.data[i];
                        } else if av.data[i] < 0.0 {
                            ga[i] -= g.data[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[id].value;
                grads.accumulate(*a, self.shape_of(*a), |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g.data[i] * yv.data[i] * (1.0 - yv.data[i]);
                    }
                });
            }
            Op::Spike(u, d_cap) => {
                let uv = &self.nodes[*u].value;
                let d = *d_cap as f64;
                let slope = 1.0 / d;
                let mode = self.mode;
                grads.accumulate(*u, &uv.shape, |gu| {
                    for i in 0..gu.len() {
                        let x = uv.data[i];
                        let live = match mode {
                            SpikeMode::Integer => (-0.5..=d + 0.5).contains(&x),
                            SpikeMode::Surrogate => x > 0.0 && x < d,
                        };
                        if live {
                            gu[i] += g.data[i] * slope;
                        }
                    }
                });
            }
            Op::SpikeResidual(u, d_cap) => {
                let uv = &self.nodes[*u].value;
                let d = *d_cap as f64;
                let mode = self.mode;
                grads.accumulate(*u, &uv.shape, |gu| {
                    for i in 0..gu.len() {
                        let x = uv.data[i];
                        let live = match mode {
                            SpikeMode::Integer => (-0.5..=d + 0.5).contains(&x),
                            SpikeMode::Surrogate => x > 0.0 && x < d,
                        };
                        if !live {
                            gu[i] += g.data[i];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, kind, stride, padding } => {
                self.conv2d_back(*x, *w, *b, *kind, *stride, *padding, g, grads)?;
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (out_dim, in_dim) = (wv.shape[0], wv.shape[1]);
                let n = xv.shape[0];
                grads.accumulate(*x, &xv.shape, |gx| {
                    for r in 0..n {
                        for o in 0..out_dim {
                            let go = g.data[r * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            for i in 0..in_dim {
                                gx[r * in_dim + i] += go * wv.data[o * in_dim + i];
                            }
                        }
                    }
                });
                grads.accumulate(*w, &wv.shape, |gw| {
                    for r in 0..n {
                        for o in 0..out_dim {
                            let go = g.data[r * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            for i in 0..in_dim {
                                gw[o * in_dim + i] += go * xv.data[r * in_dim + i];
                            }
                        }
                    }
                });
                if let Some(bid) = b {
                    grads.accumulate(*bid, self.shape_of(*bid), |gb| {
                        for r in 0..n {
                            for o in 0..out_dim {
                                gb[o] += g.data[r * out_dim + o];
                            }
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                grads.accumulate(*a, &av.shape, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let go = g.data[i * n + j];
                            if go == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                ga[i * k + kk] += go * bv.data[kk * n + j];
                            }
                        }
                    }
                });
                grads.accumulate(*b, &bv.shape, |gb| {
                    for i in 0..m {
                        for kk in 0..k {
                            let a_ik = av.data[i * k + kk];
                            if a_ik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[kk * n + j] += a_ik * g.data[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatmulAtB(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                grads.accumulate(*a, &av.shape, |ga| {
                    for r in 0..m {
                        for i in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g.data[i * n + j] * bv.data[r * n + j];
                            }
                            ga[r * k + i] += acc;
                        }
                    }
                });
                grads.accumulate(*b, &bv.shape, |gb| {
                    for r in 0..m {
                        for i in 0..k {
                            let a_ri = av.data[r * k + i];
                            if a_ri == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[r * n + j] += a_ri * g.data[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose2d(a) => {
                let av = &self.nodes[*a].value;
                let (r, c) = (av.shape[0], av.shape[1]);
                grads.accumulate(*a, &av.shape, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g.data[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                grads.accumulate(*a, self.shape_of(*a), |ga| {
                    for (x, y) in ga.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
            }
            Op::AvgPoolTo(a, (th, tw)) => {
                let av = &self.nodes[*a].value;
                let (c, h, w) = (av.shape[0], av.shape[1], av.shape[2]);
                let (fy, fx) = (h / th, w / tw);
                let inv_area = 1.0 / (fy * fx) as f64;
                grads.accumulate(*a, &av.shape, |ga| {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let go = g.data[(ch * th + y / fy) * tw + x / fx];
                                ga[(ch * h + y) * w + x] += go * inv_area;
                            }
                        }
                    }
                });
            }
            Op::UpsampleNearestTo(a, (th, tw)) => {
                let av = &self.nodes[*a].value;
                let (c, h, w) = (av.shape[0], av.shape[1], av.shape[2]);
                let (fy, fx) = (th / h, tw / w);
                grads.accumulate(*a, &av.shape, |ga| {
                    for ch in 0..c {
                        for oy in 0..*th {
                            for ox in 0..*tw {
                                ga[(ch * h + oy / fy) * w + ox / fx] +=
                                    g.data[(ch * th + oy) * tw + ox];
                            }
                        }
                    }
                });
            }
            Op::ColMeans(a) => {
                let av = &self.nodes[*a].value;
                let (n, c) = (av.shape[0], av.shape[1]);
                let inv_n = 1.0 / n as f64;
                grads.accumulate(*a, &av.shape, |ga| {
                    for r in 0..n {
                        for col in 0..c {
                            ga[r * c + col] += g.data[col] * inv_n;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                grads.accumulate(*a, self.shape_of(*a), |ga| {
                    for x in ga.iter_mut() {
                        *x += g.data[0];
                    }
                });
            }
            Op::Gather(a, idx) => {
                let idx = *idx;
                grads.accumulate(*a, self.shape_of(*a), |ga| {
                    ga[idx] += g.data[0];
                });
            }
            Op::FocalLogits { x, target } => {
                let xv = &self.nodes[*x].value;
                let pos = target.data.iter().filter(|y| **y == 1.0).count().max(1) as f64;
                grads.accumulate(*x, &xv.shape, |gx| {
                    for i in 0..gx.len() {
                        let l = xv.data[i];
                        let p = crate::neuron::sigmoid(l);
                        let log_p = crate::loss::log_sigmoid(l);
                        let log_1p = crate::loss::log_sigmoid(-l);
                        let y = target.data[i];
                        let dl = if y == 1.0 {
                            2.0 * p * (1.0 - p) * (1.0 - p) * log_p - (1.0 - p).powi(3)
                        } else {
                            let w = (1.0 - y).powi(4);
                            -w * (2.0 * p * p * (1.0 - p) * log_1p - p * p * p)
                        };
                        gx[i] += g.data[0] * dl / pos;
                    }
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_back(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        kind: ConvKind,
        stride: usize,
        padding: usize,
        g: &DenseTensor,
        grads: &mut Grads,
    ) -> Result<()> {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        let (c_in, h, win) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let (c_out, k) = (wv.shape[0], wv.shape[2]);
        let (oh, ow) = (g.shape[1], g.shape[2]);
        let s = stride;
        let p = padding as isize;
        let depthwise = kind == ConvKind::Depthwise;
        let wk = k * k;
        let w_per_oc = if depthwise { wk } else { c_in * wk };
        let mut gx = vec![0.0; xv.data.len()];
        let mut gw = vec![0.0; wv.data.len()];
        for oc in 0..c_out {
            let wbase = oc * w_per_oc;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g.data[(oc * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    let ic_range = if depthwise { oc..oc + 1 } else { 0..c_in };
                    for ic in ic_range {
                        let wc = if depthwise { wbase } else { wbase + ic * wk };
                        let xc = ic * h * win;
                        for ky in 0..k {
                            let iy = (oy * s) as isize - p + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s) as isize - p + kx as isize;
                                if ix < 0 || ix >= win as isize {
                                    continue;
                                }
                                let xi = xc + iy as usize * win + ix as usize;
                                let wi = wc + ky * k + kx;
                                gx[xi] += go * wv.data[wi];
                                gw[wi] += go * xv.data[xi];
                            }
                        }
                    }
                }
            }
        }
        grads.accumulate(x, &xv.shape, |dst| {
            for (d, v) in dst.iter_mut().zip(&gx) {
                *d += v;
            }
        });
        grads.accumulate(w, &wv.shape, |dst| {
            for (d, v) in dst.iter_mut().zip(&gw) {
                *d += v;
            }
        });
        if let Some(bid) = b {
            grads.accumulate(bid, self.shape_of(bid), |gb| {
                for oc in 0..c_out {
                    for i in 0..oh * ow {
                        gb[oc] += g.data[oc * oh * ow + i];
                    }
                }
            });
        }
        Ok(())
    }
}

/// A neuron instance on the tape: per-timestep leak logits plus carried
/// membrane. Mirrors the inference recurrence node for node.
pub struct TapeNeuron {
    pub theta: NodeId,
    pub d_cap: u32,
    h: Option<NodeId>,
}

impl TapeNeuron {
    pub fn fresh(theta: NodeId, d_cap: u32) -> Self {
        TapeNeuron { theta, d_cap, h: None }
    }

    /// One integrate-quantize-emit step; returns the emitted spike values.
    pub fn step(&mut self, tape: &mut Tape, y: NodeId, t: usize) -> Result<NodeId> {
        let u = match self.h {
            None => y,
            Some(h) => {
                let theta_t = tape.gather(self.theta, t)?;
                let beta = tape.sigmoid(theta_t);
                let leaked = tape.mul(h, beta)?;
                tape.add(leaked, y)?
            }
        };
        let s = tape.spike(u, self.d_cap)?;
        self.h = Some(tape.spike_residual(u, self.d_cap)?);
        Ok(s)
    }
}

/// `[C, H, W]` node -> `[H*W, C]` token node.
pub fn chw_to_tokens_node(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape.clone();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W], got {shape:?}")));
    }
    let flat = tape.reshape(x, vec![shape[0], shape[1] * shape[2]])?;
    tape.transpose2d(flat)
}

/// `[N, C]` token node -> `[C, h, w]` node with `N = h*w`.
pub fn tokens_to_chw_node(tape: &mut Tape, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let shape = tape.value(x).shape.clone();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::Shape(format!("expected [{}, C], got {shape:?}", h * w)));
    }
    let t = tape.transpose2d(x)?;
    tape.reshape(t, vec![shape[1], h, w])
}
