//! Reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values its backward rule needs. Nodes are appended in evaluation order, so
//! a single reverse sweep over the node list visits every operation after all
//! of its consumers. A tape is single-use: [`Tape::backward`] consumes it.

use crate::conv::{self, ConvGeometry};
use crate::error::{shape_err, Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Lower/upper clamp applied to probabilities before taking logarithms in [`Tape::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

/// Normalization epsilon for [`Tape::batch_norm2d`].
pub const BN_EPS: f64 = 1e-5;

/// Entries of [`Tape::pow_sum`] below this magnitude receive zero gradient.
pub const POW_GRAD_FLOOR: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Batch statistics computed by a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with externally supplied running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    BiasChannels {
        input: Var,
        bias: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    TopKMean {
        input: Var,
        m: usize,
        selected: Vec<usize>,
    },
    PowSum {
        input: Var,
        exponent: T,
    },
    Bce {
        input: Var,
        targets: Vec<T>,
    },
    Softmax(Var),
    BagWeightedSum {
        weights: Var,
        instances: Var,
    },
    Reshape(Var),
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-use record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(op, format!("{a:?} vs {b:?}"));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Constant, &[])
    }

    /// Records a learnable leaf; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push("param", store.value(id).clone(), Op::Param(id), &[])
    }

    /// Cross-correlation of `input: [N, Cin, H, W]` with `kernel: [Cout, Cin, kh, kw]`.
    ///
    /// Output spatial size is `(H + 2 pad - kh) / stride + 1` with floor division.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, w) = self.value(input).dims4("conv2d")?;
        let (c_out, kc_in, kh, kw) = self.value(kernel).dims4("conv2d")?;
        if kc_in != c_in {
            return shape_err(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc_in}"),
            );
        }
        let Some(geom) = ConvGeometry::new((c_in, h, w), (c_out, kh, kw), stride, pad) else {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{w}"),
            );
        };
        let out = conv::forward(&geom, n, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new([n, c_out, geom.h_out, geom.w_out], out)?;
        self.push("conv2d", value, Op::Conv2d { input, kernel, geom }, &[input, kernel])
    }

    /// Adds `bias: [C]` to every spatial position of channel `c` of `input: [N, C, ...]`.
    pub fn bias_channels(&mut self, input: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return shape_err(
                "bias_channels",
                format!("input {shape:?} with bias {:?}", self.shape(bias)),
            );
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bc);
        }
        self.push("bias_channels", out, Op::BiasChannels { input, bias }, &[input, bias])
    }

    /// Affine map `input [N, Din] -> [N, Dout]` with `weight: [Dout, Din]` and optional `bias: [Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.value(input).dims2("linear")?;
        let (d_out, w_in) = self.value(weight).dims2("linear")?;
        if w_in != d_in {
            return shape_err("linear", format!("input width {d_in}, weight expects {w_in}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return shape_err("linear", format!("bias {:?} for {d_out} outputs", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = bias {
            let b = self.value(b).data();
            out.chunks_mut(d_out).for_each(|row| row.copy_from_slice(b));
        }
        T::gemm(
            n,
            d_in,
            d_out,
            T::one(),
            self.value(input).data(),
            (d_in as isize, 1),
            self.value(weight).data(),
            (1, d_in as isize),
            if bias.is_some() { T::one() } else { T::zero() },
            &mut out,
            d_out as isize,
        );
        let value = Tensor::new([n, d_out], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("linear", value, Op::Linear { input, weight, bias }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * v;
        }
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let out = self.value(x).map(|v| v * f);
        self.push("scale", out, Op::Scale(x, f), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Per-channel normalization of `x: [N, C, H, W]` followed by `gamma * x̂ + beta`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running estimates.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm2d", format!("affine parameters must have shape [{c}]"));
        }
        let hw = h * w;
        let count = n * hw;
        let data = self.value(x).data();
        let eps = BN_EPS;
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return shape_err("batch_norm2d", "training mode needs N*H*W >= 2");
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += data[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut q = 0.0;
                    for i in 0..n {
                        q += data[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / count as f64;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batch_norm2d", "running statistics length mismatch");
                }
                (
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                    false,
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for (plane, ((xh, o), src)) in xhat
            .chunks_mut(hw)
            .zip(out.chunks_mut(hw))
            .zip(data.chunks(hw))
            .enumerate()
        {
            let ch = plane % c;
            let (mu, is, gc, bc) = (mean_t[ch], inv_std[ch], g[ch], b[ch]);
            for ((xh, o), &v) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
                *xh = (v - mu) * is;
                *o = gc * *xh + bc;
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        let stats = batch_stats.then(|| BatchStats {
            mean: mean_t.clone(),
            var: var.iter().map(|&v| T::from_f64(v)).collect(),
            count,
        });
        let var = self.push(
            "batch_norm2d",
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )?;
        Ok((var, stats))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|s| s.iter().copied().sum::<T>() * inv)
            .collect();
        self.push("global_avg_pool", Tensor::new([n, c], out)?, Op::GlobalAvgPool(x), &[x])
    }

    /// `[N, C, H, W] -> [N, C]`: mean of the `m` largest entries of every spatial map.
    ///
    /// Ties at the selection threshold go to the earlier row-major position, so
    /// exactly `m` cells are selected.
    pub fn top_k_mean(&mut self, x: Var, m: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("top_k_mean")?;
        let hw = h * w;
        if m == 0 || m > hw {
            return shape_err("top_k_mean", format!("m = {m} outside 1..={hw}"));
        }
        let data = self.value(x).data();
        let mut selected = Vec::with_capacity(n * c * m);
        let mut out = Vec::with_capacity(n * c);
        let mut order: Vec<usize> = Vec::with_capacity(hw);
        for (map_idx, map) in data.chunks(hw).enumerate() {
            order.clear();
            order.extend(0..hw);
            let cmp = |a: &usize, b: &usize| {
                map[*b]
                    .partial_cmp(&map[*a])
                    .expect("finite values")
                    .then(a.cmp(b))
            };
            if m < hw {
                order.select_nth_unstable_by(m - 1, cmp);
            }
            let top = &mut order[..m];
            top.sort_unstable();
            let mut s = 0.0f64;
            for &i in top.iter() {
                s += map[i].as_f64();
                selected.push(map_idx * hw + i);
            }
            out.push(T::from_f64(s / m as f64));
        }
        self.push(
            "top_k_mean",
            Tensor::new([n, c], out)?,
            Op::TopKMean { input: x, m, selected },
            &[x],
        )
    }

    /// `[N, C, H, W] -> [N, C]`: `sum |x|^exponent` over every spatial map.
    pub fn pow_sum(&mut self, x: Var, exponent: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("pow_sum")?;
        if exponent <= 0.0 {
            return shape_err("pow_sum", format!("exponent must be positive, got {exponent}"));
        }
        let e = T::from_f64(exponent);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|s| s.iter().map(|v| v.abs().powf(e)).sum::<T>())
            .collect();
        self.push(
            "pow_sum",
            Tensor::new([n, c], out)?,
            Op::PowSum { input: x, exponent: e },
            &[x],
        )
    }

    /// Elementwise binary cross-entropy of probabilities `p` against fixed `targets`.
    ///
    /// `p` is clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`; clamped entries get zero gradient.
    pub fn bce(&mut self, p: Var, targets: &[T]) -> Result<Var> {
        if self.value(p).numel() != targets.len() {
            return shape_err(
                "bce",
                format!("{} predictions vs {} targets", self.value(p).numel(), targets.len()),
            );
        }
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::one() - lo;
        let mut out = self.value(p).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(targets) {
            let q = o.max(lo).min(hi);
            *o = -(y * q.ln() + (T::one() - y) * (T::one() - q).ln());
        }
        self.push(
            "bce",
            out,
            Op::Bce {
                input: p,
                targets: targets.to_vec(),
            },
            &[p],
        )
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.value(x).dims2("softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(k) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// `z[b] = sum_k weights[b, k] * instances[b*K + k]` for `weights: [B, K]`, `instances: [B*K, L]`.
    pub fn bag_weighted_sum(&mut self, weights: Var, instances: Var) -> Result<Var> {
        let (b, k) = self.value(weights).dims2("bag_weighted_sum")?;
        let (rows, l) = self.value(instances).dims2("bag_weighted_sum")?;
        if rows != b * k {
            return shape_err(
                "bag_weighted_sum",
                format!("{rows} instances for {b} bags of {k}"),
            );
        }
        let wv = self.value(weights).data();
        let hv = self.value(instances).data();
        let mut out = vec![T::zero(); b * l];
        for bi in 0..b {
            let z = &mut out[bi * l..(bi + 1) * l];
            for ki in 0..k {
                let a = wv[bi * k + ki];
                let h = &hv[(bi * k + ki) * l..(bi * k + ki + 1) * l];
                for (zv, &hv) in z.iter_mut().zip(h) {
                    *zv = *zv + a * hv;
                }
            }
        }
        self.push(
            "bag_weighted_sum",
            Tensor::new([b, l], out)?,
            Op::BagWeightedSum { weights, instances },
            &[weights, instances],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push("sum_all", Tensor::scalar(T::from_f64(s)), Op::SumAll(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    ///
    /// Returns the gradient of every parameter reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        let mut out = Grads::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match self.nodes[idx].op {
                Op::Param(id) => {
                    out.accumulate(id, g);
                    continue;
                }
                Op::Constant => continue,
                _ if !self.nodes[idx].requires_grad => continue,
                _ => {}
            }
            for (input, grad) in self.node_backward(idx, g)? {
                match grads[input.0].as_mut() {
                    Some(existing) => existing.add_assign(&grad),
                    None => grads[input.0] = Some(grad),
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients flowing from node `idx` into its inputs.
    fn node_backward(&self, idx: usize, g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut res = Vec::with_capacity(3);
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Conv2d { input, kernel, geom } => {
                let n = self.shape(*input)[0];
                let (dx, dk) = conv::backward(
                    geom,
                    n,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(dx) = dx {
                    res.push((*input, Tensor::new(self.shape(*input).to_vec(), dx)?));
                }
                if let Some(dk) = dk {
                    res.push((*kernel, Tensor::new(self.shape(*kernel).to_vec(), dk)?));
                }
            }
            Op::BiasChannels { input, bias } => {
                if self.wants(*bias) {
                    let shape = self.shape(*input);
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db[i % c] = db[i % c] + chunk.iter().copied().sum::<T>();
                    }
                    res.push((*bias, Tensor::new([c], db)?));
                }
                if self.wants(*input) {
                    res.push((*input, g));
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, d_in) = self.value(*input).dims2("linear")?;
                let d_out = self.shape(*weight)[0];
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n * d_in];
                    T::gemm(
                        n,
                        d_out,
                        d_in,
                        T::one(),
                        g.data(),
                        (d_out as isize, 1),
                        self.value(*weight).data(),
                        (d_in as isize, 1),
                        T::zero(),
                        &mut dx,
                        d_in as isize,
                    );
                    res.push((*input, Tensor::new([n, d_in], dx)?));
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    T::gemm(
                        d_out,
                        n,
                        d_in,
                        T::one(),
                        g.data(),
                        (1, d_out as isize),
                        self.value(*input).data(),
                        (d_in as isize, 1),
                        T::zero(),
                        &mut dw,
                        d_in as isize,
                    );
                    res.push((*weight, Tensor::new([d_out, d_in], dw)?));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); d_out];
                        for row in g.data().chunks(d_out) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        res.push((*b, Tensor::new([d_out], db)?));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    res.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    res.push((*b, g));
                }
            }
            Op::Mul(a, b) => {
                let zip_mul = |other: Var| {
                    let mut t = g.clone();
                    for (v, &o) in t.data_mut().iter_mut().zip(self.value(other).data()) {
                        *v = *v * o;
                    }
                    t
                };
                if self.wants(*a) {
                    res.push((*a, zip_mul(*b)));
                }
                if self.wants(*b) {
                    res.push((*b, zip_mul(*a)));
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                res.push((*x, g.map(|v| v * f)));
            }
            Op::Sigmoid(x) => {
                let mut t = g;
                for (v, &y) in t.data_mut().iter_mut().zip(node.value.data()) {
                    *v = *v * y * (T::one() - y);
                }
                res.push((*x, t));
            }
            Op::Tanh(x) => {
                let mut t = g;
                for (v, &y) in t.data_mut().iter_mut().zip(node.value.data()) {
                    *v = *v * (T::one() - y * y);
                }
                res.push((*x, t));
            }
            Op::Relu(x) => {
                let mut t = g;
                for (v, &y) in t.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *v = T::zero();
                    }
                }
                res.push((*x, t));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*input).dims4("batch_norm2d")?;
                let hw = h * w;
                let count = (n * hw) as f64;
                let dy = g.data();
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (plane, (d, xh)) in dy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = plane % c;
                    let (mut s, mut sx) = (0.0f64, 0.0f64);
                    for (&d, &xh) in d.iter().zip(xh) {
                        s += d.as_f64();
                        sx += (d * xh).as_f64();
                    }
                    sum_dy[ch] += s;
                    sum_dy_xhat[ch] += sx;
                }
                if self.wants(*input) {
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); dy.len()];
                    for (plane, (o, (d, xh))) in dx.chunks_mut(hw).zip(dy.chunks(hw).zip(xhat.chunks(hw))).enumerate() {
                        let ch = plane % c;
                        let scale = gm[ch] * inv_std[ch];
                        if *batch_stats {
                            let mean_dy = T::from_f64(sum_dy[ch] / count);
                            let mean_dy_xhat = T::from_f64(sum_dy_xhat[ch] / count);
                            for (o, (&d, &xh)) in o.iter_mut().zip(d.iter().zip(xh)) {
                                *o = scale * (d - mean_dy - xh * mean_dy_xhat);
                            }
                        } else {
                            for (o, &d) in o.iter_mut().zip(d) {
                                *o = scale * d;
                            }
                        }
                    }
                    res.push((*input, Tensor::new([n, c, h, w], dx)?));
                }
                if self.wants(*gamma) {
                    let dg = sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect();
                    res.push((*gamma, Tensor::new([c], dg)?));
                }
                if self.wants(*beta) {
                    let db = sum_dy.iter().map(|&v| T::from_f64(v)).collect();
                    res.push((*beta, Tensor::new([c], db)?));
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x).to_vec();
                let hw = shape[2] * shape[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(hw * g.numel());
                for &v in g.data() {
                    dx.extend(std::iter::repeat_n(v * inv, hw));
                }
                res.push((*x, Tensor::new(shape, dx)?));
            }
            Op::TopKMean { input, m, selected } => {
                let mut dx = Tensor::zeros(self.shape(*input).to_vec());
                let inv = T::from_f64(1.0 / *m as f64);
                for (map_idx, chunk) in selected.chunks(*m).enumerate() {
                    let gv = g.data()[map_idx] * inv;
                    for &i in chunk {
                        dx.data_mut()[i] = gv;
                    }
                }
                res.push((*input, dx));
            }
            Op::PowSum { input, exponent } => {
                let shape = self.shape(*input).to_vec();
                let hw = shape[2] * shape[3];
                let floor = T::from_f64(POW_GRAD_FLOOR);
                let e = *exponent;
                let mut dx = self.value(*input).clone();
                for (i, v) in dx.data_mut().iter_mut().enumerate() {
                    let a = v.abs();
                    *v = if a < floor {
                        T::zero()
                    } else {
                        g.data()[i / hw] * e * a.powf(e - T::one()) * v.signum()
                    };
                }
                res.push((*input, dx));
            }
            Op::Bce { input, targets } => {
                let lo = T::from_f64(BCE_CLAMP);
                let hi = T::one() - lo;
                let mut dx = self.value(*input).clone();
                for ((v, &y), &gv) in dx.data_mut().iter_mut().zip(targets).zip(g.data()) {
                    let p = *v;
                    *v = if p < lo || p > hi {
                        T::zero()
                    } else {
                        gv * (p - y) / (p * (T::one() - p))
                    };
                }
                res.push((*input, dx));
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let mut dx = g;
                for (drow, yrow) in dx.data_mut().chunks_mut(k).zip(node.value.data().chunks(k)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                res.push((*x, dx));
            }
            Op::BagWeightedSum { weights, instances } => {
                let (b, k) = self.value(*weights).dims2("bag_weighted_sum")?;
                let l = self.shape(*instances)[1];
                let wv = self.value(*weights).data();
                let hv = self.value(*instances).data();
                let gz = g.data();
                if self.wants(*weights) {
                    let mut dw = vec![T::zero(); b * k];
                    for bi in 0..b {
                        for ki in 0..k {
                            let h = &hv[(bi * k + ki) * l..(bi * k + ki + 1) * l];
                            dw[bi * k + ki] =
                                h.iter().zip(&gz[bi * l..(bi + 1) * l]).map(|(&a, &c)| a * c).sum();
                        }
                    }
                    res.push((*weights, Tensor::new([b, k], dw)?));
                }
                if self.wants(*instances) {
                    let mut dh = vec![T::zero(); b * k * l];
                    for bi in 0..b {
                        for ki in 0..k {
                            let a = wv[bi * k + ki];
                            let row = &mut dh[(bi * k + ki) * l..(bi * k + ki + 1) * l];
                            for (d, &gv) in row.iter_mut().zip(&gz[bi * l..(bi + 1) * l]) {
                                *d = a * gv;
                            }
                        }
                    }
                    res.push((*instances, Tensor::new([b * k, l], dh)?));
                }
            }
            Op::Reshape(x) => {
                res.push((*x, g.reshape(self.shape(*x).to_vec())?));
            }
            Op::SumAll(x) => {
                res.push((*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0])));
            }
        }
        Ok(res
            .into_iter()
            .filter(|(v, _)| self.wants(*v))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_ones_times_two() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), [1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4])).unwrap();
        let k = tape.constant(Tensor::zeros([1, 3, 3, 3])).unwrap();
        assert!(matches!(tape.conv2d(x, k, 1, 1), Err(Error::InvalidShape { .. })));
        let big = tape.constant(Tensor::zeros([1, 2, 7, 7])).unwrap();
        assert!(tape.conv2d(x, big, 1, 1).is_err());
    }

    #[test]
    fn linear_hand_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = tape.constant(t(&[1, 2], &[3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[1], &[5.0])).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), [16.0]);
    }

    #[test]
    fn linear_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0])).unwrap();
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let w = tape.constant(eye).unwrap();
        let b = tape.constant(Tensor::zeros([3])).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn sigmoid_and_its_slope_at_zero() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", Tensor::scalar(0.0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(id).unwrap().data()[0], 0.25);
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), [0.0, 0.0, 2.0]);
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn bce_reference_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t(&[3], &[0.5, 0.0, 0.9])).unwrap();
        let l = tape.bce(p, &[1.0, 0.0, 1.0]).unwrap();
        let v = tape.value(l).data();
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(v[1] >= 0.0 && v[1] < 1e-6);
        assert!((v[2] - 0.105_360_515_657_826_3).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([2, 1, 2, 2], 3.0)).unwrap();
        let g = tape.constant(t(&[1], &[1.0])).unwrap();
        let b = tape.constant(t(&[1], &[0.7])).unwrap();
        let (y, stats) = tape.batch_norm2d(x, g, b, BatchNormMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let stats = stats.unwrap();
        assert_eq!(stats.mean, [3.0]);
        assert_eq!(stats.var, [0.0]);
        assert_eq!(stats.count, 8);
    }

    #[test]
    fn batch_norm_standardized_input_is_nearly_unchanged() {
        let mut tape = Tape::<f64>::new();
        let data = [-1.0, 1.0, -1.0, 1.0];
        let x = tape.constant(t(&[1, 1, 2, 2], &data)).unwrap();
        let g = tape.constant(t(&[1], &[1.0])).unwrap();
        let b = tape.constant(t(&[1], &[0.0])).unwrap();
        let (y, _) = tape.batch_norm2d(x, g, b, BatchNormMode::Train).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(data) {
            assert!((o - i).abs() < 1e-5);
        }
    }

    #[test]
    fn top_k_mean_breaks_ties_row_major() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("a", t(&[1, 1, 2, 2], &[0.5, 0.5, 0.5, 0.1])).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id).unwrap();
        let y = tape.top_k_mean(a, 2).unwrap();
        assert_eq!(tape.value(y).data(), [0.5]);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), [0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id).unwrap();
        let y = tape.tanh(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", t(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[1e300])).unwrap();
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id).unwrap();
        let b = tape.param(&store, id).unwrap();
        let y = tape.mul(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), [6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", t(&[1, 2], &[1.0, 1.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[2.0, 3.0])).unwrap();
        let w = tape.param(&store, id).unwrap();
        let y = tape.linear(x, w, None).unwrap();
        assert!(!tape.requires_grad(x));
        assert!(tape.requires_grad(y));
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(id).unwrap().data(), [2.0, 3.0]);
    }
}
