//! Reverse-mode differentiation over a recorded tape of tensor operations.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::{self, AxisSpec, ConvGeometry};
use crate::params::{ParamId, ParamStore, StoreTag};
use crate::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// An operation whose forward value is computed by the caller and whose
/// backward pass is supplied here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in order. Entries for inputs with
    /// `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        needs: &[bool],
        output: &Tensor,
        grad: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param,
    WeightNorm { norms: Vec<f32> },
    Conv { geom: ConvGeometry },
    ConvTranspose { geom: ConvGeometry },
    ReflectPad1d { left: usize },
    LeakyRelu(f32),
    Tanh,
    Gau,
    Add,
    AvgPool1d { kernel: usize, stride: usize, padding: usize },
    Mean,
    MeanSquaredFrom(f32),
    WeightedSum(Vec<f32>),
    Custom(Box<dyn CustomOp>),
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Handle to a value produced on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    id: Option<usize>,
    requires_grad: bool,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{:?}({:?})", self.id, self.value)
    }
}

/// 1-d convolution settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

/// 2-d convolution settings, `(height, width)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

/// Records operations for a later [`Tape::backward`]. An inference tape
/// computes the same values without keeping any history.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<(StoreTag, ParamId), Var>>,
    param_nodes: RefCell<Vec<(StoreTag, ParamId, usize)>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Index into `[0, len)` for position `j` of a signal mirrored at both ends
/// without repeating the edge sample. Valid for any `j` when `len >= 2`.
pub fn reflect_index(j: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = j.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

fn expect_rank(x: &Tensor, rank: usize, what: &str) -> Result<()> {
    if x.rank() != rank {
        return Err(TensorError::Shape(format!(
            "{what} expects rank {rank}, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            param_nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates without recording; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: &[&Var], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        let value = Arc::new(value);
        if !self.recording {
            return Var {
                id: None,
                requires_grad: false,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs: inputs
                .iter()
                .map(|v| v.id.expect("var from an inference tape used on a recording tape"))
                .collect(),
            value: Arc::clone(&value),
            requires_grad,
        });
        Var {
            id: Some(id),
            requires_grad,
            value,
        }
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        if !self.recording {
            return Var {
                id: None,
                requires_grad: false,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs: Vec::new(),
            value: Arc::clone(&value),
            requires_grad,
        });
        Var {
            id: Some(id),
            requires_grad,
            value,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false, Op::Leaf)
    }

    /// A leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true, Op::Leaf)
    }

    /// Same value as `x`, cut off from the graph.
    pub fn detach(&self, x: &Var) -> Var {
        self.leaf(Arc::clone(&x.value), false, Op::Leaf)
    }

    /// Leaf for a stored parameter. Repeated requests share one leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id);
        if let Some(v) = self.params.borrow().get(&key) {
            return v.clone();
        }
        let var = self.leaf(store.shared(id), true, Op::Param);
        if let Some(node) = var.id {
            self.param_nodes.borrow_mut().push((key.0, key.1, node));
        }
        self.params.borrow_mut().insert(key, var.clone());
        var
    }

    /// Current value of a stored parameter as a leaf that takes no gradient.
    /// Never cached, so it reflects updates made after earlier requests.
    pub fn frozen_param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.leaf(store.shared(id), false, Op::Leaf)
    }

    /// `g * v / ||v||`, normalized per slice along axis 0.
    pub fn weight_norm(&self, v: &Var, g: &Var) -> Result<Var> {
        let vt = v.value();
        let rows = vt.dim(0);
        if g.value().numel() != rows {
            return Err(TensorError::Shape(format!(
                "weight norm gain has {} entries for {rows} slices",
                g.value().numel()
            )));
        }
        let per = vt.numel() / rows;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; vt.numel()];
        for r in 0..rows {
            let slice = &vt.data()[r * per..(r + 1) * per];
            let norm = slice.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            let scale = g.value().data()[r] / norm;
            for (o, x) in out[r * per..(r + 1) * per].iter_mut().zip(slice) {
                *o = x * scale;
            }
            norms.push(norm);
        }
        Ok(self.push(
            Op::WeightNorm { norms },
            &[v, g],
            Tensor::new(vt.shape().to_vec(), out),
        ))
    }

    /// `x: (B, C_in, L)`, `w: (C_out, C_in / groups, K)`, `b: (C_out)`.
    pub fn conv1d(&self, x: &Var, w: &Var, b: Option<&Var>, spec: Conv1dSpec) -> Result<Var> {
        expect_rank(x.value(), 3, "conv1d input")?;
        expect_rank(w.value(), 3, "conv1d weight")?;
        let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin_g, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if cin_g * spec.groups != cin {
            return Err(TensorError::Shape(format!(
                "conv1d weight {:?} does not fit {cin} input channels in {} groups",
                w.shape(),
                spec.groups
            )));
        }
        let geom = ConvGeometry::new(
            batch,
            (cin, cout, spec.groups),
            (1, len),
            AxisSpec::new(1, 1, 0, 1),
            AxisSpec::new(k, spec.stride, spec.padding, spec.dilation),
        )?;
        self.conv_common(x, w, b, geom, vec![batch, cout, geom.out_w])
    }

    /// `x: (B, C_in, H, W)`, `w: (C_out, C_in / groups, KH, KW)`.
    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, spec: Conv2dSpec) -> Result<Var> {
        expect_rank(x.value(), 4, "conv2d input")?;
        expect_rank(w.value(), 4, "conv2d weight")?;
        let s = x.shape();
        let (batch, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let ws = w.shape();
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin_g * spec.groups != cin {
            return Err(TensorError::Shape(format!(
                "conv2d weight {ws:?} does not fit {cin} input channels in {} groups",
                spec.groups
            )));
        }
        let geom = ConvGeometry::new(
            batch,
            (cin, cout, spec.groups),
            (h, wd),
            AxisSpec::new(kh, spec.stride.0, spec.padding.0, spec.dilation.0),
            AxisSpec::new(kw, spec.stride.1, spec.padding.1, spec.dilation.1),
        )?;
        self.conv_common(x, w, b, geom, vec![batch, cout, geom.out_h, geom.out_w])
    }

    fn conv_common(
        &self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        geom: ConvGeometry,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        if let Some(b) = b {
            if b.value().numel() != geom.out_channels {
                return Err(TensorError::Shape(format!(
                    "bias has {} entries for {} channels",
                    b.value().numel(),
                    geom.out_channels
                )));
            }
        }
        let y = conv::conv_forward(
            &geom,
            x.value().data(),
            w.value().data(),
            b.map(|b| b.value().data()),
        );
        let inputs: Vec<&Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Op::Conv { geom }, &inputs, Tensor::new(out_shape, y)))
    }

    /// `x: (B, C_in, L)`, `w: (C_in, C_out, K)`; output length is
    /// `(L - 1) * stride - 2 * padding + K + output_padding`.
    pub fn conv_transpose1d(
        &self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        expect_rank(x.value(), 3, "conv_transpose1d input")?;
        expect_rank(w.value(), 3, "conv_transpose1d weight")?;
        let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (w_in, cout, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if w_in != cin {
            return Err(TensorError::Shape(format!(
                "conv_transpose1d weight {:?} does not fit {cin} input channels",
                w.shape()
            )));
        }
        if output_padding >= stride || len == 0 {
            return Err(TensorError::Shape("output padding must be below the stride".into()));
        }
        let full = (len - 1) * stride + k + output_padding;
        if full < 2 * padding + 1 {
            return Err(TensorError::Shape("transposed convolution output is empty".into()));
        }
        let out_len = full - 2 * padding;
        // The adjoint convolution maps (B, C_out, out_len) back to (B, C_in, len).
        let geom = ConvGeometry::new(
            batch,
            (cout, cin, 1),
            (1, out_len),
            AxisSpec::new(1, 1, 0, 1),
            AxisSpec::new(k, stride, padding, 1),
        )?;
        debug_assert_eq!(geom.out_w, len);
        let mut y = conv::conv_backward_input(&geom, x.value().data(), w.value().data());
        if let Some(b) = b {
            if b.value().numel() != cout {
                return Err(TensorError::Shape(format!(
                    "bias has {} entries for {cout} channels",
                    b.value().numel()
                )));
            }
            for (i, chunk) in y.chunks_mut(out_len).enumerate() {
                let bv = b.value().data()[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let inputs: Vec<&Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Op::ConvTranspose { geom },
            &inputs,
            Tensor::new(vec![batch, cout, out_len], y),
        ))
    }

    /// Mirror padding on the last axis of `(B, C, L)`.
    pub fn reflect_pad1d(&self, x: &Var, left: usize, right: usize) -> Result<Var> {
        expect_rank(x.value(), 3, "reflect_pad1d input")?;
        let len = x.shape()[2];
        if len == 0 {
            return Err(TensorError::Shape("cannot pad an empty signal".into()));
        }
        let out_len = len + left + right;
        let rows = x.value().numel() / len;
        let mut out = vec![0.0; rows * out_len];
        for (src, dst) in x.value().data().chunks(len).zip(out.chunks_mut(out_len)) {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[reflect_index(j as isize - left as isize, len)];
            }
        }
        let shape = vec![x.shape()[0], x.shape()[1], out_len];
        Ok(self.push(Op::ReflectPad1d { left }, &[x], Tensor::new(shape, out)))
    }

    pub fn leaky_relu(&self, x: &Var, slope: f32) -> Var {
        let y = x.value().map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu(slope), &[x], y)
    }

    pub fn tanh(&self, x: &Var) -> Var {
        let y = x.value().map(f32::tanh);
        self.push(Op::Tanh, &[x], y)
    }

    /// Gated activation: splits axis 1 into halves `(a, b)` and returns
    /// `tanh(a) * sigmoid(b)`.
    pub fn gau(&self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() < 2 || s[1] % 2 != 0 {
            return Err(TensorError::Shape(format!(
                "gated activation needs an even channel count, got shape {s:?}"
            )));
        }
        let half = s[1] / 2;
        let inner: usize = s[2..].iter().product();
        let mut shape = s.to_vec();
        shape[1] = half;
        let data = x.value().data();
        let mut out = vec![0.0; data.len() / 2];
        for b in 0..s[0] {
            let a_off = b * s[1] * inner;
            let g_off = a_off + half * inner;
            let o_off = b * half * inner;
            for i in 0..half * inner {
                out[o_off + i] = data[a_off + i].tanh() * sigmoid(data[g_off + i]);
            }
        }
        Ok(self.push(Op::Gau, &[x], Tensor::new(shape, out)))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(TensorError::Shape(format!(
                "add of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add, &[a, b], Tensor::new(a.shape().to_vec(), data)))
    }

    /// Average pooling on the last axis of `(B, C, L)`; padded positions are
    /// excluded from each window's count.
    pub fn avg_pool1d(&self, x: &Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        expect_rank(x.value(), 3, "avg_pool1d input")?;
        let len = x.shape()[2];
        let Some(out_len) = conv::conv_out_len(len, kernel, stride, padding, 1) else {
            return Err(TensorError::Shape(format!(
                "avg_pool1d input of length {len} is shorter than the window"
            )));
        };
        let rows = x.value().numel() / len;
        let mut out = vec![0.0; rows * out_len];
        for (src, dst) in x.value().data().chunks(len).zip(out.chunks_mut(out_len)) {
            for (o, d) in dst.iter_mut().enumerate() {
                let (lo, hi) = pool_window(o, kernel, stride, padding, len);
                *d = src[lo..hi].iter().sum::<f32>() / (hi - lo) as f32;
            }
        }
        let shape = vec![x.shape()[0], x.shape()[1], out_len];
        Ok(self.push(
            Op::AvgPool1d {
                kernel,
                stride,
                padding,
            },
            &[x],
            Tensor::new(shape, out),
        ))
    }

    /// Arithmetic mean of every element.
    pub fn mean(&self, x: &Var) -> Var {
        let n = x.value().numel() as f64;
        let m = x.value().data().iter().map(|&v| v as f64).sum::<f64>() / n;
        self.push(Op::Mean, &[x], Tensor::scalar(m as f32))
    }

    /// `mean((x - target)^2)` over every element.
    pub fn mean_squared_from(&self, x: &Var, target: f32) -> Var {
        let n = x.value().numel() as f64;
        let m = x
            .value()
            .data()
            .iter()
            .map(|&v| {
                let d = (v - target) as f64;
                d * d
            })
            .sum::<f64>()
            / n;
        self.push(Op::MeanSquaredFrom(target), &[x], Tensor::scalar(m as f32))
    }

    /// `sum_i weight_i * term_i` over scalar terms, accumulated in order.
    pub fn weighted_sum(&self, terms: &[(&Var, f32)]) -> Result<Var> {
        let mut total = 0.0f32;
        for (v, w) in terms {
            if v.value().numel() != 1 {
                return Err(TensorError::Shape(format!(
                    "weighted_sum term of shape {:?} is not a scalar",
                    v.shape()
                )));
            }
            total += w * v.value().item();
        }
        let inputs: Vec<&Var> = terms.iter().map(|(v, _)| *v).collect();
        let weights = terms.iter().map(|(_, w)| *w).collect();
        Ok(self.push(Op::WeightedSum(weights), &inputs, Tensor::scalar(total)))
    }

    /// Records a caller-computed value with a custom backward rule.
    pub fn custom(&self, inputs: &[&Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(Op::Custom(op), inputs, value)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        let Some(root) = loss.id else {
            return Err(TensorError::NotRecorded);
        };
        if loss.value().numel() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::new(loss.shape().to_vec(), vec![1.0]));
        let mut leaves = HashMap::new();
        for i in (0..=root).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.inputs.is_empty() {
                leaves.insert(i, grad);
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &*nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| nodes[j].requires_grad).collect();
            let input_grads = backward_op(&node.op, &inputs, &needs, &node.value, &grad);
            for ((&j, need), g) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(g)) = (*need, g) else { continue };
                debug_assert_eq!(g.shape(), nodes[j].value.shape());
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: self.param_nodes.borrow().clone(),
        })
    }
}

fn pool_window(o: usize, kernel: usize, stride: usize, padding: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - padding as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + kernel as isize).max(0) as usize).min(len);
    (lo, hi.max(lo + 1).min(len))
}

fn backward_op(
    op: &Op,
    inputs: &[&Tensor],
    needs: &[bool],
    output: &Tensor,
    grad: &Tensor,
) -> Vec<Option<Tensor>> {
    match op {
        Op::Leaf | Op::Param => Vec::new(),
        Op::WeightNorm { norms } => {
            let (v, gain) = (inputs[0], inputs[1]);
            let rows = v.dim(0);
            let per = v.numel() / rows;
            let mut gv = vec![0.0; v.numel()];
            let mut gg = vec![0.0; rows];
            for r in 0..rows {
                let vs = &v.data()[r * per..(r + 1) * per];
                let gs = &grad.data()[r * per..(r + 1) * per];
                let n = norms[r];
                // dot(grad, v / n)
                let proj = vs.iter().zip(gs).map(|(a, b)| a * b).sum::<f32>() / n;
                gg[r] = proj;
                let scale = gain.data()[r] / n;
                for ((o, a), b) in gv[r * per..(r + 1) * per].iter_mut().zip(vs).zip(gs) {
                    *o = scale * (b - a / n * proj);
                }
            }
            vec![
                Some(Tensor::new(v.shape().to_vec(), gv)),
                Some(Tensor::new(gain.shape().to_vec(), gg)),
            ]
        }
        Op::Conv { geom } => {
            let (x, w) = (inputs[0], inputs[1]);
            let mut out = vec![
                needs[0].then(|| {
                    Tensor::new(x.shape().to_vec(), conv::conv_backward_input(geom, grad.data(), w.data()))
                }),
                needs[1].then(|| {
                    Tensor::new(w.shape().to_vec(), conv::conv_backward_weight(geom, grad.data(), x.data()))
                }),
            ];
            if inputs.len() == 3 {
                out.push(needs[2].then(|| {
                    Tensor::new(inputs[2].shape().to_vec(), conv::conv_backward_bias(geom, grad.data()))
                }));
            }
            out
        }
        Op::ConvTranspose { geom } => {
            let (x, w) = (inputs[0], inputs[1]);
            let mut out = vec![
                needs[0].then(|| {
                    Tensor::new(x.shape().to_vec(), conv::conv_forward(geom, grad.data(), w.data(), None))
                }),
                needs[1].then(|| {
                    Tensor::new(w.shape().to_vec(), conv::conv_backward_weight(geom, x.data(), grad.data()))
                }),
            ];
            if inputs.len() == 3 {
                let cout = output.dim(1);
                let len = output.dim(2);
                out.push(needs[2].then(|| {
                    let mut gb = vec![0.0; cout];
                    for (i, chunk) in grad.data().chunks(len).enumerate() {
                        gb[i % cout] += chunk.iter().sum::<f32>();
                    }
                    Tensor::new(vec![cout], gb)
                }));
            }
            out
        }
        Op::ReflectPad1d { left, .. } => {
            let x = inputs[0];
            let len = x.dim(2);
            let out_len = output.dim(2);
            let mut gx = vec![0.0; x.numel()];
            for (dst, src) in gx.chunks_mut(len).zip(grad.data().chunks(out_len)) {
                for (j, g) in src.iter().enumerate() {
                    dst[reflect_index(j as isize - *left as isize, len)] += g;
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), gx))]
        }
        Op::LeakyRelu(slope) => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data))]
        }
        Op::Tanh => {
            let data = output
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&y, &g)| g * (1.0 - y * y))
                .collect();
            vec![Some(Tensor::new(output.shape().to_vec(), data))]
        }
        Op::Gau => {
            let x = inputs[0];
            let s = x.shape();
            let half = s[1] / 2;
            let inner: usize = s[2..].iter().product();
            let mut gx = vec![0.0; x.numel()];
            for b in 0..s[0] {
                let a_off = b * s[1] * inner;
                let g_off = a_off + half * inner;
                let o_off = b * half * inner;
                for i in 0..half * inner {
                    let t = x.data()[a_off + i].tanh();
                    let sg = sigmoid(x.data()[g_off + i]);
                    let go = grad.data()[o_off + i];
                    gx[a_off + i] = go * sg * (1.0 - t * t);
                    gx[g_off + i] = go * t * sg * (1.0 - sg);
                }
            }
            vec![Some(Tensor::new(s.to_vec(), gx))]
        }
        Op::Add => vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ],
        Op::AvgPool1d {
            kernel,
            stride,
            padding,
        } => {
            let x = inputs[0];
            let len = x.dim(2);
            let out_len = output.dim(2);
            let mut gx = vec![0.0; x.numel()];
            for (dst, src) in gx.chunks_mut(len).zip(grad.data().chunks(out_len)) {
                for (o, g) in src.iter().enumerate() {
                    let (lo, hi) = pool_window(o, *kernel, *stride, *padding, len);
                    let share = g / (hi - lo) as f32;
                    dst[lo..hi].iter_mut().for_each(|d| *d += share);
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), gx))]
        }
        Op::Mean => {
            let x = inputs[0];
            let g = grad.item() / x.numel() as f32;
            vec![Some(Tensor::full(x.shape().to_vec(), g))]
        }
        Op::MeanSquaredFrom(target) => {
            let x = inputs[0];
            let scale = 2.0 * grad.item() / x.numel() as f32;
            vec![Some(x.map(|v| scale * (v - target)))]
        }
        Op::WeightedSum(weights) => {
            let g = grad.item();
            weights
                .iter()
                .zip(needs)
                .zip(inputs)
                .map(|((w, need), x)| need.then(|| Tensor::new(x.shape().to_vec(), vec![w * g])))
                .collect()
        }
        Op::Custom(op) => op.backward(inputs, needs, output, grad),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(StoreTag, ParamId, usize)>,
}

impl Gradients {
    /// Gradient of an input leaf, if the loss depends on it.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|id| self.leaves.get(&id))
    }

    /// Per-parameter gradients for `store`, indexed by [`ParamId`]; `None`
    /// where the loss does not depend on the parameter.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for &(tag, id, node) in &self.params {
            if tag == store.tag() {
                out[id.index()] = self.leaves.get(&node).cloned();
            }
        }
        out
    }
}
