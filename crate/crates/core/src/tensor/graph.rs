use super::kernels::{self, ConvGeom, PoolGeom};
use super::{c, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

/// Batch statistics computed by a training-mode batch norm. `var` is the
/// biased (population) variance.
#[derive(Debug, Clone)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        geom: PoolGeom,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
        relu: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    PadReflectEnd {
        input: Var,
        axis: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SquaredDistance {
        a: Var,
        b: Var,
        scale: T,
    },
    Gram(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::PadReflectEnd { .. } => "pad_reflect",
            Op::Upsample { .. } => "upsample2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::SquaredDistance { .. } => "squared_distance",
            Op::Gram(_) => "gram_matrix",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only tape of tensor operations. Node ids are assigned in creation
/// order, which is a topological order of the computation.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Leaves with `requires_grad` receive gradients on
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
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

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation of `[B, C, H, W]` input with a `[C', C, kh, kw]`
    /// kernel, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let geom = ConvGeom::new(x, w, stride, pad)?;
        let bias_data = match bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [geom.out_ch] {
                    return Err(Error::shape("conv2d bias", w.shape(), bt.shape()));
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), bias_data);
        let value = Tensor::from_parts(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], out);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn pool2d(&mut self, input: Var, mode: PoolMode, window: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let geom = PoolGeom::new(x, window, stride)?;
        let shape = vec![x.shape()[0], x.shape()[1], geom.out_h, geom.out_w];
        let rg = self.requires_grad(input);
        match mode {
            PoolMode::Max => {
                let (out, argmax) = kernels::max_pool_forward(&geom, x.data());
                self.push(
                    Tensor::from_parts(shape, out),
                    Op::MaxPool {
                        input,
                        geom,
                        argmax,
                    },
                    rg,
                )
            }
            PoolMode::Average => {
                let out = kernels::avg_pool_forward(&geom, x.data());
                self.push(Tensor::from_parts(shape, out), Op::AvgPool { input, geom }, rg)
            }
        }
    }

    fn check_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<usize> {
        let (_, ch, _, _) = self.value(input).dims4("batch_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(Error::shape("batch_norm", self.shape(input), self.shape(p)));
            }
        }
        Ok(ch)
    }

    /// Training-mode batch normalization over `(batch, height, width)`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchNormStats)> {
        self.batch_norm_impl(input, gamma, beta, eps, false)
    }

    /// Training-mode batch normalization fused with a relu. Only the output
    /// is stored; the pre-activation is never materialized.
    pub fn batch_norm_relu(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchNormStats)> {
        self.batch_norm_impl(input, gamma, beta, eps, true)
    }

    fn batch_norm_impl(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        relu: bool,
    ) -> Result<(Var, BatchNormStats)> {
        self.check_affine(input, gamma, beta)?;
        let x = self.value(input);
        let (mean, var) = kernels::channel_moments(x)?;
        let s = x.shape();
        let count = s[0] * s[2] * s[3];
        let mean_t: Vec<T> = mean.iter().map(|&m| c(m)).collect();
        let inv_std: Vec<T> = var.iter().map(|&v| c(1.0 / (v + eps).sqrt())).collect();
        let mut out = kernels::affine_normalize(
            x,
            &mean_t,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        if relu {
            relu_in_place(&mut out);
        }
        let value = Tensor::from_parts(s.to_vec(), out);
        let rg = self.any_grad(&[input, gamma, beta]);
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean_t,
                inv_std,
                batch_stats: true,
                relu,
            },
            rg,
        )?;
        Ok((var_out, BatchNormStats { mean, var, count }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        self.batch_norm_infer_impl(input, gamma, beta, running_mean, running_var, eps, false)
    }

    /// Inference-mode batch normalization fused with a relu.
    pub fn batch_norm_relu_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        self.batch_norm_infer_impl(input, gamma, beta, running_mean, running_var, eps, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_infer_impl(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
        relu: bool,
    ) -> Result<Var> {
        let ch = self.check_affine(input, gamma, beta)?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(Error::invalid(
                "batch_norm",
                format!(
                    "running stats of length {}/{} for {ch} channels",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| c(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let mean = running_mean.to_vec();
        let x = self.value(input);
        let mut out = kernels::affine_normalize(
            x,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        if relu {
            relu_in_place(&mut out);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.any_grad(&[input, gamma, beta]);
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: false,
                relu,
            },
            rg,
        )
    }

    /// Concatenate along `axis`; inputs keep their order.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::cat(&parts, axis)?;
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Channel concatenation of rank-4 tensors: `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        self.concat(&[a, b], 1)
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).narrow(axis, start, len)?;
        let rg = self.requires_grad(input);
        self.push(value, Op::Narrow { input, axis, start }, rg)
    }

    /// Append one reflected element at the end of `axis` (`x[n-2]`; the edge
    /// element is repeated when the axis has length 1).
    pub fn pad_reflect_end(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.rank() || x.shape()[axis] == 0 {
            return Err(Error::invalid("pad_reflect", format!("bad axis {axis} for {:?}", x.shape())));
        }
        let n = x.shape()[axis];
        let src = n.saturating_sub(2);
        let extra = x.narrow(axis, src, 1)?;
        let value = Tensor::cat(&[x, &extra], axis)?;
        let rg = self.requires_grad(input);
        self.push(value, Op::PadReflectEnd { input, axis }, rg)
    }

    /// Nearest-neighbour upsampling of both spatial axes by `factor`.
    pub fn upsample2d(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample2d", "factor must be at least 1"));
        }
        let value = kernels::upsample_forward(self.value(input), factor)?;
        let rg = self.requires_grad(input);
        self.push(value, Op::Upsample { input, factor }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let f: T = c(factor);
        let value = self.value(input).map(|v| v * f);
        let rg = self.requires_grad(input);
        self.push(value, Op::Scale(input, f), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.requires_grad(input);
        self.push(value, Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len().max(1);
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `scale * sum((a - b)^2)` as a scalar.
    pub fn squared_distance(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("squared_distance", ta.shape(), tb.shape()));
        }
        let s: T = c(scale);
        let total: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(total * s), Op::SquaredDistance { a, b, scale: s }, rg)
    }

    /// Batched Gram matrices: `[B, C, H, W] -> [B, C, C]`, normalized by `C*H*W`.
    pub fn gram(&mut self, input: Var) -> Result<Var> {
        let value = kernels::gram_forward(self.value(input))?;
        let rg = self.requires_grad(input);
        self.push(value, Op::Gram(input), rg)
    }

    /// Reverse-mode accumulation from a scalar. Gradients from any previous
    /// call are discarded. Afterwards every leaf with `requires_grad` holds a
    /// gradient (zeros when it does not influence `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            self.fill_leaf_grads();
            return Ok(());
        }
        let seed_shape = self.shape(loss).to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(seed_shape, T::one()));

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g)?;
            for (v, d) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if !d.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("{} backward", self.nodes[i].op.name()),
                    });
                }
                accumulate(&mut self.nodes[v.0].grad, d);
            }
        }
        self.fill_leaf_grads();
        Ok(())
    }

    fn fill_leaf_grads(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(self.shape(v).to_vec(), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gd,
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                    bias.is_some_and(|b| self.requires_grad(b)),
                );
                if let Some(dx) = grads.input {
                    out.push((*input, like(*input, dx)));
                }
                if let Some(dw) = grads.kernel {
                    out.push((*kernel, like(*kernel, dw)));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    out.push((*b, like(*b, db)));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, like(*x, d)));
            }
            Op::MaxPool {
                input,
                geom,
                argmax,
            } => {
                out.push((*input, like(*input, kernels::max_pool_backward(geom, argmax, gd))));
            }
            Op::AvgPool { input, geom } => {
                out.push((*input, like(*input, kernels::avg_pool_backward(geom, gd))));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
                relu,
            } => {
                let masked: Vec<T>;
                let upstream = if *relu {
                    masked = gd
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                        .collect();
                    &masked[..]
                } else {
                    gd
                };
                let grads = kernels::batch_norm_backward(
                    self.value(*input),
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                    upstream,
                    *batch_stats,
                );
                out.push((*input, like(*input, grads.input)));
                out.push((*gamma, like(*gamma, grads.gamma)));
                out.push((*beta, like(*beta, grads.beta)));
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        out.push((v, g.narrow(*axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let shape = self.shape(*input);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let (extent, len) = (shape[*axis], g.shape()[*axis]);
                let mut d = vec![T::zero(); self.value(*input).len()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                out.push((*input, like(*input, d)));
            }
            Op::PadReflectEnd { input, axis } => {
                let n = self.shape(*input)[*axis];
                let mut d = g.narrow(*axis, 0, n)?;
                let extra = g.narrow(*axis, n, 1)?;
                let src = n.saturating_sub(2);
                let shape = d.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let data = d.data_mut();
                for o in 0..outer {
                    for k in 0..inner {
                        data[(o * n + src) * inner + k] += extra.data()[o * inner + k];
                    }
                }
                out.push((*input, d));
            }
            Op::Upsample { input, factor } => {
                let d = kernels::upsample_backward(self.shape(*input), *factor, gd);
                out.push((*input, like(*input, d)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                out.push((*a, like(*a, da)));
                out.push((*b, like(*b, db)));
            }
            Op::Scale(x, f) => {
                out.push((*x, g.map(|v| v * *f)));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.shape(*x).to_vec(), gd[0])));
            }
            Op::SquaredDistance { a, b, scale } => {
                let k = c::<T>(2.0) * *scale * gd[0];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| k * (x - y)).collect();
                if self.requires_grad(*b) {
                    out.push((*b, like(*b, da.iter().map(|&v| -v).collect())));
                }
                out.push((*a, like(*a, da)));
            }
            Op::Gram(x) => {
                out.push((*x, like(*x, kernels::gram_backward(self.value(*x), gd))));
            }
        }
        Ok(out)
    }
}

fn relu_in_place<T: Real>(data: &mut [T]) {
    for v in data {
        if *v <= T::zero() {
            *v = T::zero();
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, d: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += *v;
            }
        }
        None => *slot = Some(d),
    }
}
