//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value, whether it needs a gradient, and the saved
//! state its backward rule consumes. Nodes are appended after their inputs, so
//! the node order is already topological and [`Tape::backward`] walks it once
//! in reverse.
//!
//! Operations whose inputs all have `requires_grad = false` record no backward
//! state at all, which keeps evaluation passes cheap.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, PoolGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the relaxed-score gradient is formed from the effective-weight gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteRule {
    /// `dL/dscores = dL/dE ⊙ w` (edge-popup).
    #[default]
    WeightScaled,
    /// `dL/dscores = dL/dE`, the ablation that drops the weight factor.
    Identity,
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeometry, cols: Vec<F> },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    Sum { x: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<F>, labels: Vec<usize> },
    MaskedWeight { weight: Var, scores: Option<Var>, mask: Vec<bool>, rule: SteRule },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F> },
    ChannelAffine { x: Var, scale: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Per-channel batch statistics produced by a train-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance of the batch.
    pub var: Vec<F>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by consuming a tape. Only nodes with
/// `requires_grad = true` ever own a buffer.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("expected [B, C, ...], got {:?}", shape)));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// `[M,K] · [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {:?} and {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b }))
    }

    /// `x[B,I] · w[O,I]ᵀ`, the weight layout used by linear layers.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim(format!("linear input {:?} with weight {:?}", sx, sw)));
        }
        let (b, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![F::zero(); b * o];
        F::gemm(
            b,
            i,
            o,
            F::one(),
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            1,
            i as isize,
            F::zero(),
            &mut out,
            o as isize,
            1,
        );
        let rg = self.requires_grad(x) || self.requires_grad(w);
        Ok(self.push(Tensor::new(vec![b, o], out)?, rg, Op::Linear { x, w }))
    }

    /// Cross-correlation with zero padding; `input[B,Cin,H,W]`, `weight[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::dim(format!("conv2d input {:?} with kernel {:?}", sx, sw)));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if sw[2] > sx[2] + 2 * padding || sw[3] > sx[3] + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d kernel {:?} larger than padded input {:?} (padding {})",
                sw, sx, padding
            )));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        let (out, cols) = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let shape = vec![geom.batch, geom.out_channels, geom.out_h(), geom.out_w()];
        let rg = self.requires_grad(x) || self.requires_grad(w);
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Conv2d { x, w, geom, cols }))
    }

    /// Adds `b[C]` along dimension 1 of `x[B,C,...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, spatial) = channel_dims(self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(Error::dim(format!("bias {:?} for input {:?}", self.shape(b), self.shape(x))));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bias[(i / spatial) % c];
        }
        let rg = self.requires_grad(x) || self.requires_grad(b);
        Ok(self.push(out, rg, Op::AddBias { x, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        add_into(out.data_mut(), self.value(b).data());
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * v;
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Relu { x })
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || kernel == 0 || stride == 0 || kernel > s[2] || kernel > s[3] {
            return Err(Error::dim(format!("maxpool kernel {} stride {} on {:?}", kernel, stride, s)));
        }
        let geom = PoolGeometry { planes: s[0] * s[1], height: s[2], width: s[3], kernel, stride };
        let shape = vec![s[0], s[1], geom.out_h(), geom.out_w()];
        let (out, argmax) = kernels::maxpool_forward(&geom, self.value(x).data());
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MaxPool { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// `[B, ...]` → `[B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::dim("cannot flatten a scalar"));
        }
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(F::zero(), |a, &b| a + b);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }

    /// Mean cross-entropy over the batch via a stable log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::dim(format!(
                "logits {:?} with {} labels",
                s,
                labels.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {} out of range for {} classes", bad, c)));
        }
        let probs = softmax_rows(self.value(logits).data(), c);
        let mut loss = 0.0f64;
        for (row, &label) in labels.iter().enumerate() {
            let z = &self.value(logits).data()[row * c..(row + 1) * c];
            let max = z.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            loss += (lse - z[label]).as_f64();
        }
        let loss = F::from_f64_lossy(loss / b as f64);
        let rg = self.requires_grad(logits);
        let op = Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() };
        Ok(self.push(Tensor::scalar(loss), rg, op))
    }

    /// Effective weight `mask ⊙ w`.
    ///
    /// Backward: `dL/dw = dL/dE ⊙ mask` when the weight is trainable, and the
    /// straight-through score gradient `dL/dscores = dL/dE ⊙ w` (or `dL/dE`
    /// under [`SteRule::Identity`]) for every entry, pruned ones included.
    pub fn masked_weight(&mut self, weight: Var, scores: Option<Var>, mask: &[bool], rule: SteRule) -> Result<Var> {
        let w = self.value(weight);
        if w.len() != mask.len() {
            return Err(Error::dim(format!("mask of {} entries for weight {:?}", mask.len(), w.shape())));
        }
        if let Some(s) = scores {
            if self.shape(s) != w.shape() {
                return Err(Error::dim(format!("scores {:?} for weight {:?}", self.shape(s), w.shape())));
            }
        }
        let mut out = w.clone();
        for (v, &keep) in out.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = F::zero();
            }
        }
        let rg = self.requires_grad(weight) || scores.is_some_and(|s| self.requires_grad(s));
        let op = Op::MaskedWeight { weight, scores, mask: mask.to_vec(), rule };
        Ok(self.push(out, rg, op))
    }

    /// Train-mode batch normalisation over `x[B,C,...]` using batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<(Var, BatchStats<F>)> {
        let (b, c, spatial) = channel_dims(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!("batch norm affine params for {} channels", c)));
        }
        let n = b * spatial;
        let xv = self.value(x).data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for bi in 0..b {
                acc += xv[(bi * c + ch) * spatial..][..spatial].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = acc / n as f64;
            let mut sq = 0.0f64;
            for bi in 0..b {
                sq += xv[(bi * c + ch) * spatial..][..spatial]
                    .iter()
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = F::from_f64_lossy(m);
            var[ch] = F::from_f64_lossy(sq / n as f64);
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for (i, (&v, (h, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / spatial) % c;
            *h = (v - mean[ch]) * inv_std[ch];
            *o = *h * g[ch] + bt[ch];
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std };
        let v = self.push(Tensor::new(shape, out)?, rg, op);
        Ok((v, BatchStats { mean, var, count: n }))
    }

    /// `x * scale[c] + shift[c]` with constant per-channel coefficients
    /// (eval-mode batch norm folded into an affine map).
    pub fn channel_affine(&mut self, x: Var, scale: &[F], shift: &[F]) -> Result<Var> {
        let (_, c, spatial) = channel_dims(self.shape(x))?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::dim(format!("channel affine of width {} on {:?}", scale.len(), self.shape(x))));
        }
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / spatial) % c;
            *v = *v * scale[ch] + shift[ch];
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::ChannelAffine { x, scale: scale.to_vec() }))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{} of {:?} and {:?}", what, self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let mut send = |v: Var, contribution: Vec<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    F::gemm(m, n, k, F::one(), g, n as isize, 1, self.value(*b).data(), 1, n as isize, F::zero(), &mut ga, k as isize, 1);
                    send(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    F::gemm(k, m, n, F::one(), self.value(*a).data(), 1, k as isize, g, n as isize, 1, F::zero(), &mut gb, n as isize, 1);
                    send(*b, gb);
                }
            }
            Op::Linear { x, w } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bsz, i, o) = (sx[0], sx[1], sw[0]);
                if rg(*x) {
                    let mut gx = vec![F::zero(); bsz * i];
                    F::gemm(bsz, o, i, F::one(), g, o as isize, 1, self.value(*w).data(), i as isize, 1, F::zero(), &mut gx, i as isize, 1);
                    send(*x, gx);
                }
                if rg(*w) {
                    let mut gw = vec![F::zero(); o * i];
                    F::gemm(o, bsz, i, F::one(), g, 1, o as isize, self.value(*x).data(), i as isize, 1, F::zero(), &mut gw, i as isize, 1);
                    send(*w, gw);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let gmat = kernels::batch_major_to_channel_major(g, geom.batch, geom.out_channels, geom.out_h() * geom.out_w());
                if rg(*w) {
                    send(*w, kernels::conv2d_weight_grad(geom, &gmat, cols));
                }
                if rg(*x) {
                    send(*x, kernels::conv2d_input_grad(geom, &gmat, self.value(*w).data()));
                }
            }
            Op::AddBias { x, b } => {
                if rg(*b) {
                    let (_, c, spatial) = channel_dims(self.shape(*x)).expect("checked in forward");
                    let mut gb = vec![F::zero(); c];
                    for (i, &v) in g.iter().enumerate() {
                        let ch = (i / spatial) % c;
                        gb[ch] = gb[ch] + v;
                    }
                    send(*b, gb);
                }
                send(*x, g.to_vec());
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    send(*a, g.iter().zip(self.value(*b).data()).map(|(&u, &v)| u * v).collect());
                }
                if rg(*b) {
                    send(*b, g.iter().zip(self.value(*a).data()).map(|(&u, &v)| u * v).collect());
                }
            }
            Op::Scale { x, c } => send(*x, g.iter().map(|&u| u * *c).collect()),
            Op::Relu { x } => send(
                *x,
                g.iter()
                    .zip(self.value(*x).data())
                    .map(|(&u, &v)| if v > F::zero() { u } else { F::zero() })
                    .collect(),
            ),
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![F::zero(); self.value(*x).len()];
                for (&u, &src) in g.iter().zip(argmax) {
                    gx[src] = gx[src] + u;
                }
                send(*x, gx);
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Sum { x } => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / F::from_usize(labels.len()).expect("batch size");
                let mut gl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    gl[row * c + label] = gl[row * c + label] - scale;
                }
                send(*logits, gl);
            }
            Op::MaskedWeight { weight, scores, mask, rule } => {
                if rg(*weight) {
                    send(
                        *weight,
                        g.iter().zip(mask).map(|(&u, &m)| if m { u } else { F::zero() }).collect(),
                    );
                }
                if let Some(s) = scores {
                    let gs = match rule {
                        SteRule::WeightScaled => g.iter().zip(self.value(*weight).data()).map(|(&u, &w)| u * w).collect(),
                        SteRule::Identity => g.to_vec(),
                    };
                    send(*s, gs);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (b, c, spatial) = channel_dims(self.shape(*x)).expect("checked in forward");
                let n = F::from_usize(b * spatial).expect("count");
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for (i, (&u, &h)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / spatial) % c;
                    sum_g[ch] = sum_g[ch] + u;
                    sum_gx[ch] = sum_gx[ch] + u * h;
                }
                if rg(*x) {
                    let gam = self.value(*gamma).data();
                    let gx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&u, &h))| {
                            let ch = (i / spatial) % c;
                            gam[ch] * inv_std[ch] / n * (n * u - sum_g[ch] - h * sum_gx[ch])
                        })
                        .collect();
                    send(*x, gx);
                }
                send(*gamma, sum_gx);
                send(*beta, sum_g);
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, spatial) = channel_dims(self.shape(*x)).expect("checked in forward");
                send(*x, g.iter().enumerate().map(|(i, &u)| u * scale[(i / spatial) % c]).collect());
            }
        }
    }
}

/// Row-wise softmax of a `[rows, classes]` buffer.
pub fn softmax_rows<F: Scalar>(logits: &[F], classes: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(logits.len());
    for z in logits.chunks(classes) {
        let max = z.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
        let exps: Vec<F> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let x = tape.constant(t(&[1, 1], &[2.0]));
        let y = tape.constant(t(&[1, 1], &[3.0]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.starts_with("dimension error"), "{err}");
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0f64));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.25 - 3.0).collect();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        // per-channel identity: weight[c_out, c_in] = delta
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = tape.constant(t(&[3, 3, 1, 1], &w));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_kernel_larger_than_padded_input_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 6, 6]));
        assert!(matches!(tape.conv2d(x, w, 1, 1), Err(Error::Dimension(_))));
        assert!(tape.conv2d(x, w, 1, 2).is_ok());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.softmax_cross_entropy(z, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[0.3, -2.0, 7.0, 1.0]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gradient_is_x() {
        let vals = [0.3, -2.0, 7.0, 1.0];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &vals), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &vals);
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = [1.0f64, 2.0, 3.0, -500.0, 0.0, 500.0];
        let p = softmax_rows(&z, 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_normalises_each_channel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..4 * 3 * 5).map(|i| ((i * 7919) % 31) as f64 * 0.3 + (i % 3) as f64).collect();
        let x = tape.constant(t(&[4, 3, 5], &data));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batch_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(stats.count, 20);
        let yv = tape.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|bi| yv[(bi * 3 + ch) * 5..][..5].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 20.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-3, "ch {ch}: {mean} {var}");
        }
    }
}
