use std::collections::{HashMap, HashSet};

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<E>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    MulConst {
        x: Var,
        c: Vec<E>,
    },
    SubConst {
        x: Var,
    },
    Scale {
        x: Var,
        s: E,
    },
    DivConst {
        x: Var,
        d: E,
    },
    Shift {
        x: Var,
    },
    DivScalar {
        x: Var,
        s: Var,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: E,
        hi: E,
    },
    Exp {
        x: Var,
    },
    Square {
        x: Var,
    },
    Huber {
        x: Var,
        delta: E,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MeanNonzero {
        x: Var,
        count: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Select {
        x: Var,
        index: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<E>,
        targets: Vec<E>,
    },
    StraightThrough {
        x: Var,
    },
    PairwiseDistance {
        x: Var,
    },
    NormalizeColumns {
        x: Var,
        norms: Vec<E>,
    },
    ColumnSqDistance {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Batch-normalization statistics mode.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, E> {
    /// Normalize with batch statistics.
    Train { eps: E },
    /// Normalize with externally supplied running statistics.
    Eval { mean: &'a [E], var: &'a [E], eps: E },
}

/// Per-channel batch statistics produced by a training-mode batch norm:
/// the batch mean and the unbiased batch variance.
#[derive(Debug, Clone)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

/// Tape of operations recorded during one forward pass.
///
/// Node ids increase in creation order, so inputs always precede outputs and
/// reverse id order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
    consumed: HashSet<usize>,
}

/// Gradients of one scalar root with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients<E> {
    grads: HashMap<usize, Vec<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: Var) -> Option<&[E]> {
        self.grads.get(&var.0).map(Vec::as_slice)
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<E>> {
        self.grads.remove(&var.0)
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, mut value: Tensor<E>) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor<E>) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.node(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.node(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, x: Var, data: Vec<E>, op: Op<E>) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let value = Tensor::new(shape, data).expect("unary op preserves shape");
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {} and {} differ",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul of {} by {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        gemm_nn(m, k, n, self.node(a).data(), self.node(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// Cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || stride == 0 {
            return Err(Error::dim(format!(
                "conv2d of input {} with kernel {}",
                shape_str(&si),
                shape_str(&sk)
            )));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d kernel {} larger than padded input {}",
                shape_str(&sk),
                shape_str(&si)
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![E::zero(); n * rows * ncols];
        let mut out = vec![E::zero(); n * f * ncols];
        let img_len = c * h * w;
        {
            let x = self.node(input).data();
            let kdata = self.node(kernel).data();
            for s in 0..n {
                let col = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
                im2col(&geom, &x[s * img_len..(s + 1) * img_len], col);
                gemm_nn(
                    f,
                    rows,
                    ncols,
                    kdata,
                    col,
                    &mut out[s * f * ncols..(s + 1) * f * ncols],
                );
            }
        }
        let rg = self.rg(input) || self.rg(kernel);
        let value = Tensor::new(vec![n, f, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .node(a)
            .data()
            .iter()
            .zip(self.node(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .node(a)
            .data()
            .iter()
            .zip(self.node(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub { a, b }, rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .node(a)
            .data()
            .iter()
            .zip(self.node(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    /// Adds `bias[c]` to every element of channel `c` (dimension 1).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 || self.node(bias).numel() != sx[1] {
            return Err(Error::dim(format!(
                "bias {} does not match channels of {}",
                shape_str(self.shape(bias)),
                shape_str(sx)
            )));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.node(bias).data();
        let data = self
            .node(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % channels])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias }, rg))
    }

    /// Element-wise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<E>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim(format!(
                "mul_const: shapes {} and {} differ",
                shape_str(self.shape(x)),
                shape_str(c.shape())
            )));
        }
        let data = self
            .node(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(self.unary(
            x,
            data,
            Op::MulConst {
                x,
                c: c.data().to_vec(),
            },
        ))
    }

    /// `x - c` for a constant tensor `c`.
    pub fn sub_const(&mut self, x: Var, c: &Tensor<E>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim(format!(
                "sub_const: shapes {} and {} differ",
                shape_str(self.shape(x)),
                shape_str(c.shape())
            )));
        }
        let data = self
            .node(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(self.unary(x, data, Op::SubConst { x }))
    }

    pub fn scale(&mut self, x: Var, s: E) -> Var {
        let data = self.node(x).data().iter().map(|&v| v * s).collect();
        self.unary(x, data, Op::Scale { x, s })
    }

    /// `x / d` for a nonzero constant `d`, divided exactly rather than
    /// multiplied by a rounded reciprocal.
    pub fn div_const(&mut self, x: Var, d: E) -> Var {
        let data = self.node(x).data().iter().map(|&v| v / d).collect();
        self.unary(x, data, Op::DivConst { x, d })
    }

    pub fn shift(&mut self, x: Var, s: E) -> Var {
        let data = self.node(x).data().iter().map(|&v| v + s).collect();
        self.unary(x, data, Op::Shift { x })
    }

    /// `x / s` for a one-element `s`. A zero divisor yields zeros.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.node(s).numel() != 1 {
            return Err(Error::dim(format!(
                "div_scalar divisor has shape {}",
                shape_str(self.shape(s))
            )));
        }
        let d = self.node(s).data()[0];
        let data = self
            .node(x)
            .data()
            .iter()
            .map(|&v| if d == E::zero() { E::zero() } else { v / d })
            .collect();
        let rg = self.rg(x) || self.rg(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::DivScalar { x, s }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .node(x)
            .data()
            .iter()
            .map(|&v| v.max(E::zero()))
            .collect();
        self.unary(x, data, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.node(x).data().iter().map(|&v| v.tanh()).collect();
        self.unary(x, data, Op::Tanh { x })
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: E, hi: E) -> Var {
        let data = self
            .node(x)
            .data()
            .iter()
            .map(|&v| v.max(lo).min(hi))
            .collect();
        self.unary(x, data, Op::Clamp { x, lo, hi })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.node(x).data().iter().map(|&v| v.exp()).collect();
        self.unary(x, data, Op::Exp { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let data = self.node(x).data().iter().map(|&v| v * v).collect();
        self.unary(x, data, Op::Square { x })
    }

    /// Element-wise Huber function with threshold `delta`.
    pub fn huber(&mut self, x: Var, delta: E) -> Var {
        let half = E::from_f64_lossy(0.5);
        let data = self
            .node(x)
            .data()
            .iter()
            .map(|&v| {
                if v.abs() <= delta {
                    half * v * v
                } else {
                    delta * (v.abs() - half * delta)
                }
            })
            .collect();
        self.unary(x, data, Op::Huber { x, delta })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.node(x);
        let m = t.sum() / E::from_usize(t.numel()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// Mean over the nonzero entries, treating their count as a constant.
    /// Zero when every entry is zero.
    pub fn mean_nonzero(&mut self, x: Var) -> Var {
        let t = self.node(x);
        let count = t.data().iter().filter(|v| **v != E::zero()).count();
        let m = if count == 0 {
            E::zero()
        } else {
            t.sum() / E::from_usize(count).unwrap()
        };
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanNonzero { x, count }, rg)
    }

    fn planes(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 3 {
            return Err(Error::dim(format!(
                "{what} needs a spatial tensor, got {}",
                shape_str(s)
            )));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((s[..s.len() - 2].iter().product(), h, w))
    }

    /// 2×2 max pooling with stride 2 over the last two dimensions.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.planes(x, "max_pool2")?;
        if h < 2 || w < 2 {
            return Err(Error::dim(format!(
                "max_pool2 on {}x{} map",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.node(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Non-overlapping average pooling by an integer factor over the last two
    /// dimensions, which must be divisible by it.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (planes, h, w) = self.planes(x, "avg_pool")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::dim(format!(
                "avg_pool factor {factor} does not divide {h}x{w}"
            )));
        }
        if factor == 1 {
            let data = self.node(x).data().to_vec();
            return Ok(self.unary(x, data, Op::AvgPool { x, factor }));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = E::one() / E::from_usize(factor * factor).unwrap();
        let src = self.node(x).data();
        let mut out = vec![E::zero(); planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    let o = p * oh * ow + (y / factor) * ow + xx / factor;
                    out[o] = out[o] + src[p * h * w + y * w + xx] * inv;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPool { x, factor }, rg))
    }

    /// N×C×H×W → N×C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!(
                "global_avg_pool needs N×C×H×W, got {}",
                shape_str(&s)
            )));
        }
        let hw = s[2] * s[3];
        let inv = E::one() / E::from_usize(hw).unwrap();
        let data = self
            .node(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<E>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1]], data)?,
            Op::GlobalAvgPool { x },
            rg,
        ))
    }

    /// Batch normalization over every dimension except 1 (channels).
    ///
    /// In training mode the returned [`BatchStats`] carry the batch mean and
    /// unbiased variance for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, E>,
    ) -> Result<(Var, Option<BatchStats<E>>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim(format!(
                "batch_norm needs at least N×C, got {}",
                shape_str(&s)
            )));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.node(gamma).numel() != c || self.node(beta).numel() != c {
            return Err(Error::dim(format!(
                "batch_norm affine parameters do not match {c} channels"
            )));
        }
        let m = n * inner;
        let src = self.node(x).data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        mean[ch] = mean[ch] + src[off..off + inner].iter().copied().sum::<E>();
                    }
                }
                let mf = E::from_usize(m).unwrap();
                for v in mean.iter_mut() {
                    *v = *v / mf;
                }
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        let mu = mean[ch];
                        var[ch] = var[ch]
                            + src[off..off + inner]
                                .iter()
                                .map(|&v| (v - mu) * (v - mu))
                                .sum::<E>();
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / mf;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("running statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let g = self.node(gamma).data();
        let bt = self.node(beta).data();
        let mut xhat = vec![E::zero(); src.len()];
        let mut out = vec![E::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let stats = train.then(|| {
            let correction = if m > 1 {
                E::from_usize(m).unwrap() / E::from_usize(m - 1).unwrap()
            } else {
                E::one()
            };
            BatchStats {
                var: var.iter().map(|&v| v * correction).collect(),
                mean,
            }
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(s, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.node(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Collapse everything after the leading dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let lead = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, vec![lead, rest])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!(
                "transpose needs a matrix, got {}",
                shape_str(&s)
            )));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.node(x).data();
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, rg))
    }

    /// Slice along the leading dimension.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let value = self.node(x).select(index)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Select { x, index }, rg))
    }

    /// Mean over rows of `-Σ target · log softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<E>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(Error::dim(format!(
                "cross entropy of logits {} against targets {}",
                shape_str(&s),
                shape_str(targets.shape())
            )));
        }
        let (n, c) = (s[0], s[1]);
        let tol = E::from_f64_lossy(1e-5);
        for (row, t) in targets.data().chunks(c).enumerate() {
            let total: E = t.iter().copied().sum();
            if (total - E::one()).abs() > tol || t.iter().any(|v| *v < E::zero()) {
                return Err(Error::Validation(format!(
                    "target row {row} is not a probability distribution (sum {total:?})"
                )));
            }
        }
        let mut probs = vec![E::zero(); n * c];
        let mut loss = E::zero();
        for (i, row) in self.node(logits).data().chunks(c).enumerate() {
            let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
            let z: E = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
                let t = targets.data()[i * c + j];
                if t != E::zero() {
                    loss = loss - t * (row[j] - lse);
                }
            }
        }
        loss = loss / E::from_usize(n).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Forward value given explicitly, gradient passed through unchanged.
    pub fn straight_through(&mut self, x: Var, forward: Vec<E>) -> Result<Var> {
        if forward.len() != self.node(x).numel() {
            return Err(Error::dim("straight-through value has the wrong length"));
        }
        Ok(self.unary(x, forward, Op::StraightThrough { x }))
    }

    /// N×D rows → N×N matrix of Euclidean distances (zero diagonal).
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!(
                "pairwise_distance needs N×D, got {}",
                shape_str(&s)
            )));
        }
        let (n, d) = (s[0], s[1]);
        let src = self.node(x).data();
        let mut out = vec![E::zero(); n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dist = src[i * d..(i + 1) * d]
                    .iter()
                    .zip(&src[j * d..(j + 1) * d])
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<E>()
                    .sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, n], out)?, Op::PairwiseDistance { x }, rg))
    }

    /// Scale every column of an m×k matrix to unit length. Columns with
    /// vanishing norm become zero.
    pub fn normalize_columns(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!(
                "normalize_columns needs a matrix, got {}",
                shape_str(&s)
            )));
        }
        let (m, k) = (s[0], s[1]);
        let src = self.node(x).data();
        let tiny = E::from_f64_lossy(1e-12);
        let norms: Vec<E> = (0..k)
            .map(|j| (0..m).map(|i| src[i * k + j] * src[i * k + j]).sum::<E>().sqrt())
            .collect();
        let out = src
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let nrm = norms[idx % k];
                if nrm > tiny {
                    v / nrm
                } else {
                    E::zero()
                }
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::NormalizeColumns { x, norms },
            rg,
        ))
    }

    /// For a: m×k1 and b: m×k2, the k1×k2 matrix of squared distances between
    /// columns of `a` and columns of `b`.
    pub fn column_sq_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim(format!(
                "column_sq_distance of {} and {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let (m, k1, k2) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.node(a).data(), self.node(b).data());
        let mut out = vec![E::zero(); k1 * k2];
        for r in 0..k1 {
            for c in 0..k2 {
                out[r * k2 + c] = (0..m)
                    .map(|i| {
                        let d = da[i * k1 + r] - db[i * k2 + c];
                        d * d
                    })
                    .sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![k1, k2], out)?,
            Op::ColumnSqDistance { a, b },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar root. Each root may be
    /// back-propagated once per recorded forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not recorded on this graph".into()));
        }
        if self.node(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Usage(
                "backward on a tensor detached from every parameter".into(),
            ));
        }
        if !self.consumed.insert(loss.0) {
            return Err(Error::Usage(
                "backward already ran for this loss; record a new forward pass".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<E>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        let mut leaves = HashMap::new();

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, gout);
                continue;
            }
            self.backward_node(id, &gout, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<E>>], v: Var) -> Option<&'g mut Vec<E>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.node(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![E::zero(); n]))
    }

    fn backward_node(&self, id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.buf(grads, *a) {
                    gemm_nt(m, n, k, g, self.node(*b).data(), ga);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gemm_tn(k, m, n, self.node(*a).data(), g, gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let n = self.shape(*input)[0];
                let f = self.shape(*kernel)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                if let Some(gk) = self.buf(grads, *kernel) {
                    for s in 0..n {
                        gemm_nt(
                            f,
                            ncols,
                            rows,
                            &g[s * f * ncols..(s + 1) * f * ncols],
                            &cols[s * rows * ncols..(s + 1) * rows * ncols],
                            gk,
                        );
                    }
                }
                if self.rg(*input) {
                    let kdata = self.node(*kernel).data();
                    let img_len = geom.channels * geom.height * geom.width;
                    let mut dcols = vec![E::zero(); rows * ncols];
                    let gi = self.buf(grads, *input).unwrap();
                    for s in 0..n {
                        dcols.iter_mut().for_each(|v| *v = E::zero());
                        gemm_tn(
                            rows,
                            f,
                            ncols,
                            kdata,
                            &g[s * f * ncols..(s + 1) * f * ncols],
                            &mut dcols,
                        );
                        col2im(geom, &dcols, &mut gi[s * img_len..(s + 1) * img_len]);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(buf) = self.buf(grads, v) {
                        buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(buf) = self.buf(grads, *a) {
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
                if let Some(buf) = self.buf(grads, *b) {
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
                }
            }
            Op::Mul { a, b } => {
                let other_b = self.node(*b).data().to_vec();
                let other_a = self.node(*a).data().to_vec();
                if let Some(buf) = self.buf(grads, *a) {
                    for ((d, &s), &o) in buf.iter_mut().zip(g).zip(&other_b) {
                        *d = *d + s * o;
                    }
                }
                if let Some(buf) = self.buf(grads, *b) {
                    for ((d, &s), &o) in buf.iter_mut().zip(g).zip(&other_a) {
                        *d = *d + s * o;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
                let sx = self.shape(*x);
                let channels = sx[1];
                let inner: usize = sx[2..].iter().product();
                if let Some(buf) = self.buf(grads, *bias) {
                    for (i, &s) in g.iter().enumerate() {
                        let ch = (i / inner) % channels;
                        buf[ch] = buf[ch] + s;
                    }
                }
            }
            Op::MulConst { x, c } => {
                if let Some(buf) = self.buf(grads, *x) {
                    for ((d, &s), &k) in buf.iter_mut().zip(g).zip(c) {
                        *d = *d + s * k;
                    }
                }
            }
            Op::SubConst { x } | Op::Shift { x } | Op::StraightThrough { x } | Op::Reshape { x } => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::Scale { x, s } => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *s);
                }
            }
            Op::DivConst { x, d } => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v / *d);
                }
            }
            Op::DivScalar { x, s } => {
                let d = self.node(*s).data()[0];
                if d == E::zero() {
                    return;
                }
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v / d);
                }
                let xs = self.node(*x).data();
                let dot: E = g.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                if let Some(buf) = self.buf(grads, *s) {
                    buf[0] = buf[0] - dot / (d * d);
                }
            }
            Op::Relu { x } => {
                let xs = self.node(*x).data().to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((d, &s), &v) in buf.iter_mut().zip(g).zip(&xs) {
                        if v > E::zero() {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(buf) = self.buf(grads, *x) {
                    for ((d, &s), &y) in buf.iter_mut().zip(g).zip(out) {
                        *d = *d + s * (E::one() - y * y);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xs = self.node(*x).data().to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((d, &s), &v) in buf.iter_mut().zip(g).zip(&xs) {
                        if v >= *lo && v <= *hi {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Exp { x } => {
                if let Some(buf) = self.buf(grads, *x) {
                    for ((d, &s), &y) in buf.iter_mut().zip(g).zip(out) {
                        *d = *d + s * y;
                    }
                }
            }
            Op::Square { x } => {
                let xs = self.node(*x).data().to_vec();
                let two = E::from_f64_lossy(2.0);
                if let Some(buf) = self.buf(grads, *x) {
                    for ((d, &s), &v) in buf.iter_mut().zip(g).zip(&xs) {
                        *d = *d + two * s * v;
                    }
                }
            }
            Op::Huber { x, delta } => {
                let xs = self.node(*x).data().to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((d, &s), &v) in buf.iter_mut().zip(g).zip(&xs) {
                        let slope = if v.abs() <= *delta {
                            v
                        } else {
                            *delta * v.signum()
                        };
                        *d = *d + s * slope;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean { x } => {
                let n = E::from_usize(self.node(*x).numel()).unwrap();
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().for_each(|d| *d = *d + g[0] / n);
                }
            }
            Op::MeanNonzero { x, count } => {
                if *count == 0 {
                    return;
                }
                let n = E::from_usize(*count).unwrap();
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().for_each(|d| *d = *d + g[0] / n);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(buf) = self.buf(grads, *x) {
                    for (&idx, &s) in argmax.iter().zip(g) {
                        buf[idx] = buf[idx] + s;
                    }
                }
            }
            Op::AvgPool { x, factor } => {
                let (planes, h, w) = self.planes(*x, "avg_pool").unwrap();
                let (oh, ow) = (h / factor, w / factor);
                let inv = E::one() / E::from_usize(factor * factor).unwrap();
                if let Some(buf) = self.buf(grads, *x) {
                    for p in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                let o = p * oh * ow + (y / factor) * ow + xx / factor;
                                let i = p * h * w + y * w + xx;
                                buf[i] = buf[i] + g[o] * inv;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = E::one() / E::from_usize(hw).unwrap();
                if let Some(buf) = self.buf(grads, *x) {
                    for (plane, &gv) in buf.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|d| *d = *d + gv * inv);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut sum_g = vec![E::zero(); c];
                let mut sum_gx = vec![E::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            sum_g[ch] = sum_g[ch] + g[i];
                            sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                        }
                    }
                }
                if let Some(buf) = self.buf(grads, *beta) {
                    buf.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d = *d + v);
                }
                if let Some(buf) = self.buf(grads, *gamma) {
                    buf.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d = *d + v);
                }
                let gam = self.node(*gamma).data().to_vec();
                let m = E::from_usize(n * inner).unwrap();
                if let Some(buf) = self.buf(grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + inner {
                                let d = if *train {
                                    k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    k * g[i]
                                };
                                buf[i] = buf[i] + d;
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(buf) = self.buf(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] = buf[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Select { x, index } => {
                let stride = node.value.numel();
                if let Some(buf) = self.buf(grads, *x) {
                    let dst = &mut buf[index * stride..(index + 1) * stride];
                    dst.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let n = E::from_usize(self.shape(*logits)[0]).unwrap();
                if let Some(buf) = self.buf(grads, *logits) {
                    for ((d, &p), &t) in buf.iter_mut().zip(probs).zip(targets) {
                        *d = *d + g[0] * (p - t) / n;
                    }
                }
            }
            Op::PairwiseDistance { x } => {
                let s = self.shape(*x);
                let (n, d) = (s[0], s[1]);
                let xs = self.node(*x).data().to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    for i in 0..n {
                        for j in 0..n {
                            let dist = out[i * n + j];
                            if i == j || dist <= E::zero() {
                                continue;
                            }
                            let w = g[i * n + j] / dist;
                            for t in 0..d {
                                let diff = xs[i * d + t] - xs[j * d + t];
                                buf[i * d + t] = buf[i * d + t] + w * diff;
                                buf[j * d + t] = buf[j * d + t] - w * diff;
                            }
                        }
                    }
                }
            }
            Op::NormalizeColumns { x, norms } => {
                let s = self.shape(*x);
                let (m, k) = (s[0], s[1]);
                let tiny = E::from_f64_lossy(1e-12);
                if let Some(buf) = self.buf(grads, *x) {
                    for j in 0..k {
                        if norms[j] <= tiny {
                            continue;
                        }
                        let dot: E = (0..m).map(|i| out[i * k + j] * g[i * k + j]).sum();
                        for i in 0..m {
                            let idx = i * k + j;
                            buf[idx] = buf[idx] + (g[idx] - out[idx] * dot) / norms[j];
                        }
                    }
                }
            }
            Op::ColumnSqDistance { a, b } => {
                let (m, k1) = (self.shape(*a)[0], self.shape(*a)[1]);
                let k2 = self.shape(*b)[1];
                let da = self.node(*a).data().to_vec();
                let db = self.node(*b).data().to_vec();
                let two = E::from_f64_lossy(2.0);
                if let Some(buf) = self.buf(grads, *a) {
                    for i in 0..m {
                        for r in 0..k1 {
                            let mut acc = E::zero();
                            for c in 0..k2 {
                                acc = acc + g[r * k2 + c] * (da[i * k1 + r] - db[i * k2 + c]);
                            }
                            buf[i * k1 + r] = buf[i * k1 + r] + two * acc;
                        }
                    }
                }
                if let Some(buf) = self.buf(grads, *b) {
                    for i in 0..m {
                        for c in 0..k2 {
                            let mut acc = E::zero();
                            for r in 0..k1 {
                                acc = acc + g[r * k2 + c] * (da[i * k1 + r] - db[i * k2 + c]);
                            }
                            buf[i * k2 + c] = buf[i * k2 + c] - two * acc;
                        }
                    }
                }
            }
        }
    }
}
