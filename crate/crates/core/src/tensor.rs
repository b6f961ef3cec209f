//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every executed operation on a tape; [`Graph::backward`]
//! replays the tape in reverse, accumulating gradients into every tensor that
//! requires them. Layout is row-major everywhere, convolution uses zero
//! padding 1 / stride 1 with 3x3 kernels, and max-pooling is 2x2 / stride 2
//! with first-occurrence tie-breaking, so results are bit-reproducible.

use crate::error::{Error, Result};

const NORM_EPSILON: f64 = 1e-12;

/// Dense n-dimensional float64 array with an optional gradient slot.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor, validating shape/data agreement and finiteness.
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![v], vec![1])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        Tensor::new(data, vec![len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to raw values. Callers must keep data finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Add `delta` into the gradient slot, allocating zeros first if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Copy of the value without gradient slot or tracking flag.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Bitwise equality of the stored values (shape and data).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} produced NaN/Inf")));
    }
    Ok(())
}

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Conv2d { x: TensorId, kernels: TensorId, bias: TensorId },
    MaxPool2d { x: TensorId, argmax: Vec<usize> },
    Relu { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    MulScalar { x: TensorId, s: f64 },
    AddScalar { x: TensorId },
    ReduceSum { x: TensorId },
    Dot { a: TensorId, b: TensorId },
    L2Normalize { x: TensorId, norm: f64 },
    Concat { parts: Vec<TensorId> },
    Reshape { x: TensorId },
    /// Cross-entropy of softmax(z/tau) against a one-hot target index.
    SoftmaxXent { z: TensorId, target: usize, tau: f64, softmax: Vec<f64> },
    /// T^2-scaled cross-entropy of softened old logits vs. new logits.
    DistillXent { z: TensorId, p_old: Vec<f64>, temp: f64, q_new: Vec<f64> },
    /// sum_i w_i * (x_i - t_i)^2 against constant targets and weights.
    WeightedSqDiff { x: TensorId, target: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of executed operations, topologically ordered by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor; gradient tracking follows its `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Insert a tracked leaf from an external tensor (e.g. a network parameter).
    pub fn param(&mut self, t: &Tensor) -> TensorId {
        let mut copy = t.detached();
        copy.requires_grad = true;
        self.leaf(copy)
    }

    /// Insert an untracked constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.leaf(t.detached())
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn emit(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool, what: &str) -> Result<TensorId> {
        ensure_finite(&data, what)?;
        let mut t = Tensor::new(data, shape)?;
        t.requires_grad = needs_grad;
        Ok(self.push(t, op, needs_grad))
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// C[m,n] = A[m,k] * B[k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ashape, bshape) = (self.value(a).shape(), self.value(b).shape());
        if ashape.len() != 2 || bshape.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-d operands, got {ashape:?} and {bshape:?}"
            )));
        }
        let (m, k) = (ashape[0], ashape[1]);
        let n = bshape[1];
        if bshape[0] != k {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {ashape:?} vs {bshape:?}"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.emit(out, vec![m, n], Op::MatMul { a, b, m, k, n }, needs, "matmul")
    }

    /// 3x3 cross-correlation with zero padding 1, stride 1, plus bias.
    pub fn conv2d(&mut self, x: TensorId, kernels: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("conv2d input must be [c,h,w], got {xs:?}")));
        }
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::Dimension(format!("conv2d kernels must be [c_out,c_in,3,3], got {ks:?}")));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let c_out = ks[0];
        if ks[1] != c_in {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {c_in}, kernels expect {}",
                ks[1]
            )));
        }
        if bs != [c_out] {
            return Err(Error::Dimension(format!("conv2d bias must be [{c_out}], got {bs:?}")));
        }
        if h < 3 || w < 3 {
            return Err(Error::Dimension(format!("conv2d needs spatial dims >= 3, got {h}x{w}")));
        }
        let xd = self.value(x).data();
        let kd = self.value(kernels).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bd[o];
                    for ci in 0..c_in {
                        for di in 0..3 {
                            let si = i + di;
                            if si < 1 || si > h {
                                continue;
                            }
                            let si = si - 1;
                            for dj in 0..3 {
                                let sj = j + dj;
                                if sj < 1 || sj > w {
                                    continue;
                                }
                                let sj = sj - 1;
                                acc += xd[(ci * h + si) * w + sj] * kd[((o * c_in + ci) * 3 + di) * 3 + dj];
                            }
                        }
                    }
                    out[(o * h + i) * w + j] = acc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(kernels) || self.needs(bias);
        self.emit(out, vec![c_out, h, w], Op::Conv2d { x, kernels, bias }, needs, "conv2d")
    }

    /// 2x2 max-pooling with stride 2; ties resolve to the first window cell.
    pub fn maxpool2d(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("maxpool2d input must be [c,h,w], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!("maxpool2d needs spatial dims >= 2, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(ch * oh + i) * ow + j] = best;
                    argmax[(ch * oh + i) * ow + j] = best_idx;
                }
            }
        }
        let needs = self.needs(x);
        self.emit(out, vec![c, oh, ow], Op::MaxPool2d { x, argmax }, needs, "maxpool2d")
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.emit(data, shape, Op::Relu { x }, needs, "relu")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, |x, y| x + y, |a, b| Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, |x, y| x - y, |a, b| Op::Sub { a, b }, "sub")
    }

    fn elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(TensorId, TensorId) -> Op,
        what: &str,
    ) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.emit(data, shape, op(a, b), needs, what)
    }

    pub fn mul_scalar(&mut self, x: TensorId, s: f64) -> Result<TensorId> {
        if !s.is_finite() {
            return Err(Error::NonFinite("mul_scalar received non-finite scalar".into()));
        }
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v * s).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.emit(data, shape, Op::MulScalar { x, s }, needs, "mul_scalar")
    }

    pub fn add_scalar(&mut self, x: TensorId, s: f64) -> Result<TensorId> {
        if !s.is_finite() {
            return Err(Error::NonFinite("add_scalar received non-finite scalar".into()));
        }
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v + s).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.emit(data, shape, Op::AddScalar { x }, needs, "add_scalar")
    }

    /// Sum all elements into a scalar.
    pub fn reduce_sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.emit(vec![s], vec![1], Op::ReduceSum { x }, needs, "reduce_sum")
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ashape, bshape) = (self.value(a).shape(), self.value(b).shape());
        if ashape.len() != 1 || bshape.len() != 1 || ashape[0] != bshape[0] {
            return Err(Error::Dimension(format!(
                "dot expects equal-length vectors, got {ashape:?} and {bshape:?}"
            )));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        let needs = self.needs(a) || self.needs(b);
        self.emit(vec![s], vec![1], Op::Dot { a, b }, needs, "dot")
    }

    /// x / ||x||_2 for a vector with norm above 1e-12.
    pub fn l2_normalize(&mut self, x: TensorId) -> Result<TensorId> {
        if self.value(x).shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "l2_normalize expects a vector, got {:?}",
                self.value(x).shape()
            )));
        }
        let norm = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= NORM_EPSILON {
            return Err(Error::DegenerateInput(format!(
                "l2_normalize: norm {norm:e} below {NORM_EPSILON:e}"
            )));
        }
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v / norm).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.emit(data, shape, Op::L2Normalize { x, norm }, needs, "l2_normalize")
    }

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            if self.value(p).shape().len() != 1 {
                return Err(Error::Dimension(format!(
                    "concat expects vectors, got {:?}",
                    self.value(p).shape()
                )));
            }
            data.extend_from_slice(self.value(p).data());
            needs |= self.needs(p);
        }
        let len = data.len();
        self.emit(data, vec![len], Op::Concat { parts: parts.to_vec() }, needs, "concat")
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.value(x).shape()
            )));
        }
        let data = self.value(x).data().to_vec();
        let needs = self.needs(x);
        self.emit(data, shape, Op::Reshape { x }, needs, "reshape")
    }

    /// -log softmax(z/tau)[target], numerically stabilised.
    pub fn softmax_xent(&mut self, z: TensorId, target: usize, tau: f64) -> Result<TensorId> {
        if self.value(z).shape().len() != 1 {
            return Err(Error::Dimension("softmax_xent expects a logit vector".into()));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Contract(format!("softmax_xent requires tau > 0, got {tau}")));
        }
        let zd = self.value(z).data();
        if target >= zd.len() {
            return Err(Error::Contract(format!(
                "softmax_xent target {target} out of range for {} logits",
                zd.len()
            )));
        }
        let scaled: Vec<f64> = zd.iter().map(|&v| v / tau).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let softmax: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let loss = sum.ln() + max - scaled[target];
        let needs = self.needs(z);
        self.emit(vec![loss], vec![1], Op::SoftmaxXent { z, target, tau, softmax }, needs, "softmax_xent")
    }

    /// T^2 * CrossEntropy(softmax(z_old/T), softmax(z_new/T)) with constant z_old.
    pub fn distill_xent(&mut self, z_new: TensorId, z_old: &[f64], temp: f64) -> Result<TensorId> {
        let zd = self.value(z_new).data();
        if zd.len() != z_old.len() {
            return Err(Error::Dimension(format!(
                "distill_xent logit length mismatch: {} vs {}",
                zd.len(),
                z_old.len()
            )));
        }
        if temp <= 0.0 || !temp.is_finite() {
            return Err(Error::Contract(format!("distill_xent requires T > 0, got {temp}")));
        }
        ensure_finite(z_old, "distill_xent old logits")?;
        let p_old = softmax_scaled(z_old, temp);
        let q_new = softmax_scaled(zd, temp);
        // CE(p, q) = lse(z/T) - sum_j p_j z_j / T
        let scaled: Vec<f64> = zd.iter().map(|&v| v / temp).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = scaled.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        let dot: f64 = p_old.iter().zip(&scaled).map(|(&p, &s)| p * s).sum();
        let loss = temp * temp * (lse - dot);
        let needs = self.needs(z_new);
        self.emit(vec![loss], vec![1], Op::DistillXent { z: z_new, p_old, temp, q_new }, needs, "distill_xent")
    }

    /// sum_i weights[i] * (x[i] - target[i])^2 with constant target and weights.
    pub fn weighted_sq_diff(&mut self, x: TensorId, target: &[f64], weights: &[f64]) -> Result<TensorId> {
        let xd = self.value(x).data();
        if xd.len() != target.len() || xd.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "weighted_sq_diff length mismatch: x={} target={} weights={}",
                xd.len(),
                target.len(),
                weights.len()
            )));
        }
        ensure_finite(target, "weighted_sq_diff target")?;
        ensure_finite(weights, "weighted_sq_diff weights")?;
        let s: f64 = xd
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&x, &t), &w)| w * (x - t) * (x - t))
            .sum();
        let needs = self.needs(x);
        self.emit(
            vec![s],
            vec![1],
            Op::WeightedSqDiff { x, target: target.to_vec(), weights: weights.to_vec() },
            needs,
            "weighted_sq_diff",
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradients of every tracked tensor reachable from `loss`.
    ///
    /// Gradients accumulate (+=) across multiple uses of the same tensor.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            match self.nodes[i].op.clone() {
                Op::Leaf => {
                    self.nodes[i].value.accumulate_grad(&grad);
                    continue;
                }
                Op::MatMul { a, b, m, k, n } => {
                    if self.needs(a) {
                        // dA = dC * B^T
                        let bd = self.nodes[b.0].value.data();
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            for c in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += grad[r * n + j] * bd[c * n + j];
                                }
                                da[r * k + c] = acc;
                            }
                        }
                        accumulate(&mut grads, a, &da, self.nodes[a.0].value.len());
                    }
                    if self.needs(b) {
                        // dB = A^T * dC
                        let ad = self.nodes[a.0].value.data();
                        let mut db = vec![0.0; k * n];
                        for r in 0..k {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += ad[j * k + r] * grad[j * n + c];
                                }
                                db[r * n + c] = acc;
                            }
                        }
                        accumulate(&mut grads, b, &db, self.nodes[b.0].value.len());
                    }
                }
                Op::Conv2d { x, kernels, bias } => {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let ks = self.nodes[kernels.0].value.shape().to_vec();
                    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
                    let c_out = ks[0];
                    if self.needs(bias) {
                        let mut db = vec![0.0; c_out];
                        for o in 0..c_out {
                            for i in 0..h {
                                for j in 0..w {
                                    db[o] += grad[(o * h + i) * w + j];
                                }
                            }
                        }
                        accumulate(&mut grads, bias, &db, c_out);
                    }
                    if self.needs(kernels) {
                        let xd = self.nodes[x.0].value.data();
                        let mut dk = vec![0.0; c_out * c_in * 9];
                        for o in 0..c_out {
                            for ci in 0..c_in {
                                for di in 0..3 {
                                    for dj in 0..3 {
                                        let mut acc = 0.0;
                                        for i in 0..h {
                                            let si = i + di;
                                            if si < 1 || si > h {
                                                continue;
                                            }
                                            for j in 0..w {
                                                let sj = j + dj;
                                                if sj < 1 || sj > w {
                                                    continue;
                                                }
                                                acc += grad[(o * h + i) * w + j]
                                                    * xd[(ci * h + si - 1) * w + sj - 1];
                                            }
                                        }
                                        dk[((o * c_in + ci) * 3 + di) * 3 + dj] = acc;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, kernels, &dk, c_out * c_in * 9);
                    }
                    if self.needs(x) {
                        let kd = self.nodes[kernels.0].value.data();
                        let mut dx = vec![0.0; c_in * h * w];
                        for o in 0..c_out {
                            for i in 0..h {
                                for j in 0..w {
                                    let g = grad[(o * h + i) * w + j];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for di in 0..3 {
                                            let si = i + di;
                                            if si < 1 || si > h {
                                                continue;
                                            }
                                            for dj in 0..3 {
                                                let sj = j + dj;
                                                if sj < 1 || sj > w {
                                                    continue;
                                                }
                                                dx[(ci * h + si - 1) * w + sj - 1] +=
                                                    g * kd[((o * c_in + ci) * 3 + di) * 3 + dj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, x, &dx, c_in * h * w);
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    if self.needs(x) {
                        let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                        for (out_idx, &src) in argmax.iter().enumerate() {
                            dx[src] += grad[out_idx];
                        }
                        accumulate(&mut grads, x, &dx, dx.len());
                    }
                }
                Op::Relu { x } => {
                    if self.needs(x) {
                        let xd = self.nodes[x.0].value.data();
                        let dx: Vec<f64> = grad
                            .iter()
                            .zip(xd)
                            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, x, &dx, dx.len());
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, &grad, self.nodes[a.0].value.len());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, &grad, self.nodes[b.0].value.len());
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, &grad, self.nodes[a.0].value.len());
                    }
                    if self.needs(b) {
                        let neg: Vec<f64> = grad.iter().map(|&g| -g).collect();
                        accumulate(&mut grads, b, &neg, self.nodes[b.0].value.len());
                    }
                }
                Op::MulScalar { x, s } => {
                    if self.needs(x) {
                        let dx: Vec<f64> = grad.iter().map(|&g| g * s).collect();
                        accumulate(&mut grads, x, &dx, dx.len());
                    }
                }
                Op::AddScalar { x } => {
                    if self.needs(x) {
                        accumulate(&mut grads, x, &grad, self.nodes[x.0].value.len());
                    }
                }
                Op::ReduceSum { x } => {
                    if self.needs(x) {
                        let dx = vec![grad[0]; self.nodes[x.0].value.len()];
                        accumulate(&mut grads, x, &dx, dx.len());
                    }
                }
                Op::Dot { a, b } => {
                    if self.needs(a) {
                        let dx: Vec<f64> =
                            self.nodes[b.0].value.data().iter().map(|&v| grad[0] * v).collect();
                        accumulate(&mut grads, a, &dx, dx.len());
                    }
                    if self.needs(b) {
                        let dx: Vec<f64> =
                            self.nodes[a.0].value.data().iter().map(|&v| grad[0] * v).collect();
                        accumulate(&mut grads, b, &dx, dx.len());
                    }
                }
                Op::L2Normalize { x, norm } => {
                    if self.needs(x) {
                        let xd = self.nodes[x.0].value.data();
                        let xg: f64 = xd.iter().zip(&grad).map(|(&v, &g)| v * g).sum();
                        let n3 = norm * norm * norm;
                        let dx: Vec<f64> = xd
                            .iter()
                            .zip(&grad)
                            .map(|(&v, &g)| g / norm - v * xg / n3)
                            .collect();
                        accumulate(&mut grads, x, &dx, dx.len());
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        if self.needs(p) {
                            accumulate(&mut grads, p, &grad[offset..offset + len], len);
                        }
                        offset += len;
                    }
                }
                Op::Reshape { x } => {
                    if self.needs(x) {
                        accumulate(&mut grads, x, &grad, self.nodes[x.0].value.len());
                    }
                }
                Op::SoftmaxXent { z, target, tau, softmax } => {
                    if self.needs(z) {
                        let dz: Vec<f64> = softmax
                            .iter()
                            .enumerate()
                            .map(|(j, &p)| {
                                let delta = if j == target { 1.0 } else { 0.0 };
                                grad[0] * (p - delta) / tau
                            })
                            .collect();
                        accumulate(&mut grads, z, &dz, dz.len());
                    }
                }
                Op::DistillXent { z, p_old, temp, q_new } => {
                    if self.needs(z) {
                        let dz: Vec<f64> = q_new
                            .iter()
                            .zip(&p_old)
                            .map(|(&q, &p)| grad[0] * temp * (q - p))
                            .collect();
                        accumulate(&mut grads, z, &dz, dz.len());
                    }
                }
                Op::WeightedSqDiff { x, target, weights } => {
                    if self.needs(x) {
                        let xd = self.nodes[x.0].value.data();
                        let dx: Vec<f64> = xd
                            .iter()
                            .zip(&target)
                            .zip(&weights)
                            .map(|((&v, &t), &w)| grad[0] * 2.0 * w * (v - t))
                            .collect();
                        accumulate(&mut grads, x, &dx, dx.len());
                    }
                }
            }
            // Interior node: expose the gradient on its tensor as well.
            self.nodes[i].value.accumulate_grad(&grad);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64], len: usize) {
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
    for (g, d) in slot.iter_mut().zip(delta) {
        *g += d;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

pub(crate) fn softmax_scaled(z: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|&v| v / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

// ── Gradient checking ───────────────────────────────────────────────────

/// Central finite-difference check of reverse-mode gradients.
///
/// Builds `f` once with tracked leaves to obtain analytic gradients, then
/// perturbs every coordinate of every input by +/- h and compares. Returns
/// the maximum over coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    let mut graph = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| {
            let mut leaf = t.detached();
            leaf.set_requires_grad(true);
            graph.leaf(leaf)
        })
        .collect();
    let loss = f(&mut graph, &ids)?;
    if graph.value(loss).len() != 1 {
        return Err(Error::Contract("grad_check requires a scalar-valued function".into()));
    }
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| graph.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = xs.iter().map(|t| g.leaf(t.detached())).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[i][j];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}


impl Graph {
    /// Convenience: squared L2 norm of a vector as a scalar.
    pub fn dot_self(&mut self, x: TensorId) -> Result<TensorId> {
        let flat = if self.value(x).shape().len() == 1 {
            x
        } else {
            let numel = self.value(x).len();
            self.reshape(x, vec![numel])?
        };
        self.dot(flat, flat)
    }
}
