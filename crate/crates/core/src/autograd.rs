//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Each node keeps
//! its value plus whatever the backward rule needs (im2col buffers, batch-norm
//! normalised activations, softmax probabilities). [`Graph::backward`] then
//! walks the tape once in reverse and returns [`Gradients`] for every node
//! that requires them.
//!
//! The op set is exactly what the encoder, projector, classifier and both
//! losses need; it is not a general tensor library.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::{self, ContrastiveKernel};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanTime {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        members: usize,
        heads: usize,
        weights: Vec<T>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Contrastive {
        reps: Var,
        kernel: ContrastiveKernel<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Probe {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-average updates.
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= kernel, "conv/pool window larger than padded input");
    (len + 2 * pad - kernel) / stride + 1
}

/// `[N, C, L]` view of a rank-2 or rank-3 tensor.
fn ncl(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [n, c] => (*n, *c, 1),
        [n, c, l] => (*n, *c, *l),
        _ => panic!("expected rank-2 or rank-3 tensor, got {shape:?}"),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise-linear branch taken so far (ReLU signs,
    /// max-pool and group-max winners). Two forward passes with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool1d { argmax, .. } | Op::GroupMax { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that shares storage with a parameter store entry.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// 1D convolution without bias. `x: [N, Cin, L]`, `w: [Cout, Cin, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, len) = ncl(xv.shape());
        let (cout, wcin, k) = match wv.shape() {
            [a, b, c] => (*a, *b, *c),
            s => panic!("conv weight must be rank 3, got {s:?}"),
        };
        assert_eq!(cin, wcin, "conv1d input channels");
        let lout = conv_out_len(len, k, stride, pad);
        let rows = cin * k;
        let ncols = n * lout;
        let mut cols = vec![T::zero(); rows * ncols];
        let xd = xv.data();
        for ci in 0..cin {
            for kk in 0..k {
                let row = &mut cols[(ci * k + kk) * ncols..(ci * k + kk + 1) * ncols];
                for b in 0..n {
                    let src = &xd[(b * cin + ci) * len..(b * cin + ci + 1) * len];
                    for t in 0..lout {
                        let pos = (t * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < len {
                            row[b * lout + t] = src[pos as usize];
                        }
                    }
                }
            }
        }
        let mut tmp = vec![T::zero(); cout * ncols];
        gemm(false, false, cout, ncols, rows, wv.data(), &cols, T::zero(), &mut tmp);
        let mut out = vec![T::zero(); n * cout * lout];
        for co in 0..cout {
            for b in 0..n {
                out[(b * cout + co) * lout..(b * cout + co + 1) * lout]
                    .copy_from_slice(&tmp[co * ncols + b * lout..co * ncols + (b + 1) * lout]);
            }
        }
        let requires = self.rg(x) || self.rg(w);
        let cols = if self.rg(w) { cols } else { Vec::new() };
        let value = Tensor::new(vec![n, cout, lout], out).expect("conv output shape");
        self.push(
            value,
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                cols,
            },
            requires,
        )
    }

    /// Train-mode batch norm: statistics over batch (and time, for rank 3).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, BatchStats<T>) {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (n, c, l) = ncl(&shape);
        let xd = xv.data();
        let m = n * l;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * l..(b * c + ch + 1) * l] {
                    s += v;
                }
            }
            let mu = s / T::of(m as f64);
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * l..(b * c + ch + 1) * l] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / T::of(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for t in 0..l {
                    let i = (b * c + ch) * l + t;
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let unbiased = if m > 1 {
            var.iter()
                .map(|&v| v * T::of(m as f64 / (m - 1) as f64))
                .collect()
        } else {
            var.clone()
        };
        let requires = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(shape, out).expect("bn shape");
        let var_out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            requires,
        );
        (
            var_out,
            BatchStats {
                mean,
                var: unbiased,
            },
        )
    }

    /// Eval-mode batch norm against fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (n, c, l) = ncl(&shape);
        assert_eq!(running_mean.len(), c);
        let xd = xv.data();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for t in 0..l {
                    let i = (b * c + ch) * l + t;
                    let h = (xd[i] - running_mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let requires = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(shape, out).expect("bn shape");
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            requires,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<T> = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("relu shape");
        let requires = self.rg(x);
        self.push(value, Op::Relu { x }, requires)
    }

    /// Max pooling along time with implicit `-inf` padding.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        assert!(pad < kernel, "pool padding must be smaller than kernel");
        let xv = self.value(x);
        let (n, c, len) = ncl(xv.shape());
        let lout = conv_out_len(len, kernel, stride, pad);
        let xd = xv.data();
        let mut out = vec![T::zero(); n * c * lout];
        let mut argmax = vec![0usize; n * c * lout];
        for row in 0..n * c {
            let src = &xd[row * len..(row + 1) * len];
            for t in 0..lout {
                let start = (t * stride) as isize - pad as isize;
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for kk in 0..kernel {
                    let pos = start + kk as isize;
                    if pos >= 0 && (pos as usize) < len && src[pos as usize] > best {
                        best = src[pos as usize];
                        best_i = pos as usize;
                    }
                }
                out[row * lout + t] = best;
                argmax[row * lout + t] = row * len + best_i;
            }
        }
        let value = Tensor::new(vec![n, c, lout], out).expect("pool shape");
        let requires = self.rg(x);
        self.push(value, Op::MaxPool1d { x, argmax }, requires)
    }

    /// `[N, C, L] -> [N, C]` average over time.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, len) = ncl(xv.shape());
        let inv = T::one() / T::of(len as f64);
        let out: Vec<T> = xv
            .data()
            .chunks(len)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out).expect("mean shape");
        let requires = self.rg(x);
        self.push(value, Op::MeanTime { x }, requires)
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` → `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, fin) = match xv.shape() {
            [n, f] => (*n, *f),
            s => panic!("linear input must be rank 2, got {s:?}"),
        };
        let (fout, win) = match wv.shape() {
            [o, i] => (*o, *i),
            s => panic!("linear weight must be rank 2, got {s:?}"),
        };
        assert_eq!(fin, win, "linear input width");
        let mut out = vec![T::zero(); n * fout];
        gemm(false, true, n, fout, fin, xv.data(), wv.data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let requires = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, fout], out).expect("linear shape");
        self.push(value, Op::Linear { x, w, b }, requires)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add operands");
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), out).expect("add shape");
        let requires = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, requires)
    }

    /// Inverted dropout; each element kept with probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        let xv = self.value(x);
        let scale = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("dropout shape");
        let requires = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, requires)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = (*self.nodes[x.0].value).clone().reshaped(shape).expect("reshape");
        let requires = self.rg(x);
        self.push(value, Op::Reshape { x }, requires)
    }

    /// Multi-head scaled dot-product self-attention within groups.
    ///
    /// `q`, `k`, `v` are `[G·members, H]`; rows `g·members..(g+1)·members`
    /// form one group and only attend to each other. Returns the
    /// concatenated head outputs, `[G·members, H]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, members: usize, heads: usize) -> Var {
        let (rows, width) = match self.value(q).shape() {
            [r, w] => (*r, *w),
            s => panic!("attention input must be rank 2, got {s:?}"),
        };
        assert_eq!(self.value(k).shape(), &[rows, width]);
        assert_eq!(self.value(v).shape(), &[rows, width]);
        assert!(members > 0 && rows % members == 0, "rows must split into groups");
        assert!(heads > 0 && width % heads == 0, "width must split into heads");
        let groups = rows / members;
        let dh = width / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut weights = vec![T::zero(); groups * heads * members * members];
        let mut out = vec![T::zero(); rows * width];
        for g in 0..groups {
            for h in 0..heads {
                let w = &mut weights[(g * heads + h) * members * members..][..members * members];
                for i in 0..members {
                    let qi = &qd[(g * members + i) * width + h * dh..][..dh];
                    let row = &mut w[i * members..(i + 1) * members];
                    for j in 0..members {
                        let kj = &kd[(g * members + j) * width + h * dh..][..dh];
                        row[j] = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r = *r / z;
                    }
                    let o = &mut out[(g * members + i) * width + h * dh..][..dh];
                    for j in 0..members {
                        let a = row[j];
                        let vj = &vd[(g * members + j) * width + h * dh..][..dh];
                        for (oo, &vv) in o.iter_mut().zip(vj) {
                            *oo += a * vv;
                        }
                    }
                }
            }
        }
        let requires = self.rg(q) || self.rg(k) || self.rg(v);
        let value = Tensor::new(vec![rows, width], out).expect("attention shape");
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                members,
                heads,
                weights,
            },
            requires,
        )
    }

    /// Attention weights recorded by an attention node, `[G, heads, Q, Q]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Element-wise maximum over the members of each group:
    /// `[G·members, H] -> [G, H]`.
    pub fn group_max(&mut self, x: Var, members: usize) -> Var {
        let xv = self.value(x);
        let (rows, width) = match xv.shape() {
            [r, w] => (*r, *w),
            s => panic!("group_max input must be rank 2, got {s:?}"),
        };
        assert!(members > 0 && rows % members == 0);
        let groups = rows / members;
        let xd = xv.data();
        let mut out = vec![T::zero(); groups * width];
        let mut argmax = vec![0usize; groups * width];
        for g in 0..groups {
            for f in 0..width {
                let mut best = xd[(g * members) * width + f];
                let mut bi = (g * members) * width + f;
                for m in 1..members {
                    let idx = (g * members + m) * width + f;
                    if xd[idx] > best {
                        best = xd[idx];
                        bi = idx;
                    }
                }
                out[g * width + f] = best;
                argmax[g * width + f] = bi;
            }
        }
        let value = Tensor::new(vec![groups, width], out).expect("group max shape");
        let requires = self.rg(x);
        self.push(value, Op::GroupMax { x, argmax }, requires)
    }

    /// Group contrastive loss over `reps: [2P, H]` (rows `0..P` are side A,
    /// `P..2P` side B, row `i` and `i + P` form the positive pair).
    pub fn contrastive_loss(&mut self, reps: Var, tau: f64) -> Result<Var> {
        let rv = self.value(reps);
        let (rows, width) = match rv.shape() {
            [r, w] => (*r, *w),
            s => return Err(Error::Shape(format!("contrastive reps must be rank 2, got {s:?}"))),
        };
        let kernel = ContrastiveKernel::forward(rv.data(), rows, width, tau)?;
        let value = Tensor::new(vec![1], vec![kernel.total]).expect("scalar");
        let requires = self.rg(reps);
        Ok(self.push(value, Op::Contrastive { reps, kernel }, requires))
    }

    /// Mean cross-entropy of `logits: [N, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = match lv.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::Shape(format!("logits must be rank 2, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
        }
        let (total, probs) = loss::softmax_cross_entropy(lv.data(), n, k, labels)?;
        let value = Tensor::new(vec![1], vec![total]).expect("scalar");
        let requires = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            requires,
        ))
    }

    /// Scalar probe `Σ wᵢ xᵢ`, used to reduce a tensor for gradient checks.
    pub fn probe(&mut self, x: Var, weights: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "probe weights");
        let s: T = xv.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let value = Tensor::new(vec![1], vec![s]).expect("scalar");
        let requires = self.rg(x);
        self.push(value, Op::Probe { x, weights }, requires)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, cin, len) = ncl(xv.shape());
                let (cout, _, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let lout = node.value.shape()[2];
                let ncols = n * lout;
                let rows = cin * k;
                // dy [N, Cout, Lout] -> [Cout, N·Lout]
                let mut dyt = vec![T::zero(); cout * ncols];
                for b in 0..n {
                    for co in 0..cout {
                        dyt[co * ncols + b * lout..co * ncols + (b + 1) * lout]
                            .copy_from_slice(&dy[(b * cout + co) * lout..(b * cout + co + 1) * lout]);
                    }
                }
                if self.rg(*w) {
                    self.acc(grads, *w, |gw| {
                        gemm(false, true, cout, rows, ncols, &dyt, cols, T::one(), gw);
                    });
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); rows * ncols];
                    gemm(true, false, rows, ncols, cout, wv.data(), &dyt, T::zero(), &mut dcols);
                    let (stride, pad) = (*stride, *pad);
                    self.acc(grads, *x, |gx| {
                        for ci in 0..cin {
                            for kk in 0..k {
                                let row = &dcols[(ci * k + kk) * ncols..(ci * k + kk + 1) * ncols];
                                for b in 0..n {
                                    let dst = &mut gx[(b * cin + ci) * len..(b * cin + ci + 1) * len];
                                    for t in 0..lout {
                                        let pos = (t * stride + kk) as isize - pad as isize;
                                        if pos >= 0 && (pos as usize) < len {
                                            dst[pos as usize] += row[b * lout + t];
                                        }
                                    }
                                }
                            }
                        }
                    });
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
                let (n, c, l) = ncl(node.value.shape());
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for t in 0..l {
                            let i = (b * c + ch) * l + t;
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let m = T::of((n * l) as f64);
                    self.acc(grads, *x, |gx| {
                        for b in 0..n {
                            for ch in 0..c {
                                for t in 0..l {
                                    let i = (b * c + ch) * l + t;
                                    let d = if *train {
                                        // dbeta = Σ dy, dgamma = Σ dy·x̂ (pre-scaling by γ)
                                        g[ch] * inv_std[ch] / m
                                            * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                    } else {
                                        g[ch] * inv_std[ch] * dy[i]
                                    };
                                    gx[i] += d;
                                }
                            }
                        }
                    });
                }
                self.acc(grads, *gamma, |gg| {
                    for (a, b) in gg.iter_mut().zip(&dgamma) {
                        *a += *b;
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for (a, b) in gb.iter_mut().zip(&dbeta) {
                        *a += *b;
                    }
                });
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(xd) {
                        if v > T::zero() {
                            *g += d;
                        }
                    }
                });
            }
            Op::MaxPool1d { x, argmax } => {
                self.acc(grads, *x, |gx| {
                    for (&src, &d) in argmax.iter().zip(dy) {
                        gx[src] += d;
                    }
                });
            }
            Op::MeanTime { x } => {
                let (_, _, len) = ncl(self.value(*x).shape());
                let inv = T::one() / T::of(len as f64);
                self.acc(grads, *x, |gx| {
                    for (row, &d) in gx.chunks_mut(len).zip(dy) {
                        for g in row {
                            *g += d * inv;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                self.acc(grads, *x, |gx| {
                    gemm(false, false, n, fin, fout, dy, wv.data(), T::one(), gx);
                });
                self.acc(grads, *w, |gw| {
                    gemm(true, false, fout, fin, n, dy, xv.data(), T::one(), gw);
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |gb| {
                        for row in dy.chunks(fout) {
                            for (g, &d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    self.acc(grads, v, |g| {
                        for (gg, &d) in g.iter_mut().zip(dy) {
                            *gg += d;
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |gx| {
                    for ((g, &d), &m) in gx.iter_mut().zip(dy).zip(mask) {
                        *g += d * m;
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(grads, *x, |gx| {
                    for (g, &d) in gx.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                members,
                heads,
                weights,
            } => {
                let (members, heads) = (*members, *heads);
                let (rows, width) = (node.value.shape()[0], node.value.shape()[1]);
                let groups = rows / members;
                let dh = width / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let vd = self.value(*v).data();
                let mut dq = vec![T::zero(); rows * width];
                let mut dk = vec![T::zero(); rows * width];
                let mut dv = vec![T::zero(); rows * width];
                let mut da = vec![T::zero(); members];
                for g in 0..groups {
                    for h in 0..heads {
                        let w = &weights[(g * heads + h) * members * members..][..members * members];
                        for i in 0..members {
                            let doi = &dy[(g * members + i) * width + h * dh..][..dh];
                            let arow = &w[i * members..(i + 1) * members];
                            // dA_ij = dO_i · V_j ; dV_j += A_ij dO_i
                            for j in 0..members {
                                let off = (g * members + j) * width + h * dh;
                                let vj = &vd[off..off + dh];
                                da[j] = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                                for (dvv, &d) in dv[off..off + dh].iter_mut().zip(doi) {
                                    *dvv += arow[j] * d;
                                }
                            }
                            let dot: T = arow.iter().zip(&da).map(|(&a, &b)| a * b).sum();
                            let qoff = (g * members + i) * width + h * dh;
                            for j in 0..members {
                                let ds = arow[j] * (da[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let koff = (g * members + j) * width + h * dh;
                                for e in 0..dh {
                                    dq[qoff + e] += ds * kd[koff + e];
                                    dk[koff + e] += ds * qd[qoff + e];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    self.acc(grads, var, |g| {
                        for (gg, d) in g.iter_mut().zip(buf) {
                            *gg += d;
                        }
                    });
                }
            }
            Op::GroupMax { x, argmax } => {
                self.acc(grads, *x, |gx| {
                    for (&src, &d) in argmax.iter().zip(dy) {
                        gx[src] += d;
                    }
                });
            }
            Op::Contrastive { reps, kernel } => {
                let rd = self.value(*reps).data();
                let dr = kernel.backward(rd, dy[0]);
                self.acc(grads, *reps, |g| {
                    for (gg, d) in g.iter_mut().zip(dr) {
                        *gg += d;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let n = labels.len();
                let scale = dy[0] / T::of(n as f64);
                self.acc(grads, *logits, |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let target = if c == label { T::one() } else { T::zero() };
                            g[r * k + c] += (probs[r * k + c] - target) * scale;
                        }
                    }
                });
            }
            Op::Probe { x, weights } => {
                self.acc(grads, *x, |g| {
                    for (gg, &w) in g.iter_mut().zip(weights) {
                        *gg += w * dy[0];
                    }
                });
            }
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
