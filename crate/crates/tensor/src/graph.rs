//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation recorded on a [`Graph`] appends one node holding its
//! forward value, its operands and whatever it saved for the backward rule.
//! Nodes only reference earlier nodes, so creation order is a valid
//! topological order and [`Graph::backward`] is a single reverse sweep.

use rand::Rng;

use crate::error::{config_err, Result, TensorError};
use crate::kernels::conv::{self, BoxShape, ConvShape};
use crate::kernels::pool::{self, PoolShape};
use crate::kernels::Window;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined operation whose forward value is computed by the caller and
/// whose vector-Jacobian product is supplied here.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// Returns one gradient per input (`None` where `needs_grad` is false).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Per-channel batch statistics computed by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for running-statistic updates.
    pub var_unbiased: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Tanh(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, shape: ConvShape },
    BoxSum { x: Var, shape: BoxShape },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, shape: PoolShape },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Dropout { x: Var, mask: Vec<T> },
    SoftmaxCe { logits: Var, probs: Vec<T>, labels: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording tape. One graph per forward pass; drop it after backward.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(config_err!("{what}: shape {a:?} does not match {b:?}"));
    }
    Ok(())
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(config_err!("expected at least [N, C], got {shape:?}"));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        #[cfg(debug_assertions)]
        if value.has_nan() && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            panic!("NaN produced from finite operands (node {})", self.nodes.len());
        }
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant input that never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Copies a parameter onto the tape; its gradient flows back into the
    /// store on [`Graph::backward_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.is_scalar_like() {
            let s = vb.data()[0];
            va.map(|x| f(x, s))
        } else if va.is_scalar_like() {
            let s = va.data()[0];
            vb.map(|y| f(s, y))
        } else {
            return Err(config_err!(
                "{what}: shapes {:?} and {:?} are neither equal nor scalar-with-tensor",
                va.shape(),
                vb.shape()
            ));
        };
        Ok(self.push(value, op, &[a, b]))
    }

    /// Elementwise sum; one operand may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product; one operand may be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| -x);
        self.push(value, Op::Neg(a), &[a])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let n = T::from_f64(t.numel().max(1) as f64);
        let value = Tensor::scalar(t.sum() / n);
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = permute_tensor(&self.nodes[a.0].value, axes)?;
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(config_err!("matmul: incompatible shapes {sa:?} x {sb:?}")),
        };
        let mut out = vec![T::zero(); m * n];
        crate::gemm::gemm(
            T::one(),
            crate::gemm::MatRef::row_major(ta.data(), m, k),
            crate::gemm::MatRef::row_major(tb.data(), k, n),
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b), &[a, b]))
    }

    /// Fully connected map `x[N, F] * w[O, F]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (n, f, o) = match (tx.shape(), tw.shape()) {
            ([n, f], [o, f2]) if f == f2 => (*n, *f, *o),
            (sx, sw) => return Err(config_err!("linear: input {sx:?} incompatible with weight {sw:?}")),
        };
        let mut out = vec![T::zero(); n * o];
        crate::gemm::gemm(
            T::one(),
            crate::gemm::MatRef::row_major(tx.data(), n, f),
            crate::gemm::MatRef::transposed(tw.data(), o, f),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            if tb.shape() != [o] {
                return Err(config_err!("linear: bias shape {:?}, expected [{o}]", tb.shape()));
            }
            for row in out.chunks_mut(o.max(1)) {
                for (v, &bb) in row.iter_mut().zip(tb.data()) {
                    *v += bb;
                }
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// 2-D cross-correlation of `x[N, C_in, H, W]` with `k[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, win: Window) -> Result<Var> {
        let shape = {
            let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
            let [n, c_in, h, w] = tx.dims4()?;
            let [c_out, kc, kh, kw] = tk.dims4()?;
            if kc != c_in {
                return Err(config_err!("conv2d: kernel expects {kc} input channels, input has {c_in}"));
            }
            let oh = win.out_len(h, kh, "height")?;
            let ow = win.out_len(w, kw, "width")?;
            ConvShape { n, c_in, h, w, c_out, kh, kw, oh, ow, win }
        };
        let out = conv::conv2d_forward(self.nodes[x.0].value.data(), self.nodes[k.0].value.data(), &shape);
        let value = Tensor::new(vec![shape.n, shape.c_out, shape.oh, shape.ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, shape }, &[x, k]))
    }

    /// Depthwise convolution with a fixed all-ones `k x k` kernel.
    pub fn box_sum(&mut self, x: Var, k: usize, win: Window) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let [n, c, h, w] = tx.dims4()?;
        let oh = win.out_len(h, k, "height")?;
        let ow = win.out_len(w, k, "width")?;
        let shape = BoxShape { planes: n * c, h, w, k, oh, ow, win };
        let value = Tensor::new(vec![n, c, oh, ow], conv::box_sum_forward(tx.data(), &shape))?;
        Ok(self.push(value, Op::BoxSum { x, shape }, &[x]))
    }

    fn pool_shape(&self, x: Var, k: usize, win: Window) -> Result<(PoolShape, [usize; 2])> {
        let [n, c, h, w] = self.nodes[x.0].value.dims4()?;
        let oh = win.out_len(h, k, "height")?;
        let ow = win.out_len(w, k, "width")?;
        Ok((PoolShape { planes: n * c, h, w, k, oh, ow, win }, [n, c]))
    }

    /// Max pooling; padded cells never win. Ties go to the first index in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, win: Window) -> Result<Var> {
        let (shape, [n, c]) = self.pool_shape(x, k, win)?;
        let (out, argmax) = pool::max_pool_forward(self.nodes[x.0].value.data(), &shape);
        let value = Tensor::new(vec![n, c, shape.oh, shape.ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, win: Window) -> Result<Var> {
        let (shape, [n, c]) = self.pool_shape(x, k, win)?;
        let out = pool::avg_pool_forward(self.nodes[x.0].value.data(), &shape);
        let value = Tensor::new(vec![n, c, shape.oh, shape.ow], out)?;
        Ok(self.push(value, Op::AvgPool { x, shape }, &[x]))
    }

    /// Mean over all trailing axes: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, c, inner) = channel_layout(t.shape())?;
        if inner == 0 {
            return Err(config_err!("global_avg_pool over empty spatial extent"));
        }
        let inv = T::one() / T::from_f64(inner as f64);
        let data = t.data().chunks(inner).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Train-mode batch normalization over every axis except axis 1.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let t = &self.nodes[x.0].value;
        let (n, c, inner) = channel_layout(t.shape())?;
        let m = n * inner;
        if m < 2 {
            return Err(TensorError::Runtime(format!(
                "batch_norm in train mode needs at least 2 values per channel, got {m}"
            )));
        }
        self.check_affine(gamma, beta, c)?;
        let data = t.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mf = T::from_f64(m as f64);
        for ci in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                s += data[(ni * c + ci) * inner..(ni * c + ci + 1) * inner].iter().copied().sum::<T>();
            }
            mean[ci] = s / mf;
            let mut q = T::zero();
            for ni in 0..n {
                for &v in &data[(ni * c + ci) * inner..(ni * c + ci + 1) * inner] {
                    let d = v - mean[ci];
                    q += d * d;
                }
            }
            var[ci] = q / mf;
        }
        let epsv = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
        let (g, b) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * inner..(ni * c + ci + 1) * inner;
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&data[r]) {
                    *xh = (v - mean[ci]) * inv_std[ci];
                    *o = g[ci] * *xh + b[ci];
                }
            }
        }
        let unbias = mf / T::from_f64((m - 1) as f64);
        let stats = BatchStats { mean, var_unbiased: var.iter().map(|&v| v * unbias).collect() };
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let var_out = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true }, &[x, gamma, beta]);
        Ok((var_out, stats))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, c, inner) = channel_layout(t.shape())?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(config_err!("batch_norm: running statistics must have {c} entries"));
        }
        let epsv = T::from_f64(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
        let (g, b) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        let data = t.data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * inner..(ni * c + ci + 1) * inner;
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&data[r]) {
                    *xh = (v - running_mean[ci]) * inv_std[ci];
                    *o = g[ci] * *xh + b[ci];
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        same_shape(self.nodes[gamma.0].value.shape(), &[c], "batch_norm gamma")?;
        same_shape(self.nodes[beta.0].value.shape(), &[c], "batch_norm beta")
    }

    /// Inverted dropout. In eval mode (or at rate 0) this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(config_err!("dropout rate must lie in [0, 1), got {rate}"));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let t = &self.nodes[x.0].value;
        let mask: Vec<T> =
            (0..t.numel()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let (n, k) = match t.shape() {
            [n, k] => (*n, *k),
            s => return Err(config_err!("softmax_cross_entropy expects [N, K] logits, got {s:?}")),
        };
        if labels.len() != n {
            return Err(config_err!("softmax_cross_entropy: {} labels for batch of {n}", labels.len()));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(TensorError::Data(format!("label {l} of sample {i} outside [0, {k})")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (i, row) in t.data().chunks(k).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            loss += -(row[labels[i]] - mx - z.ln());
        }
        let value = Tensor::scalar(loss / T::from_f64(n.max(1) as f64));
        Ok(self.push(value, Op::SoftmaxCe { logits, probs, labels: labels.to_vec() }, &[logits]))
    }

    /// Records an operation whose forward value the caller computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    /// Reverse sweep from a scalar root. Gradients accumulate across
    /// multiple uses of the same node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rt = &self.nodes[root.0].value;
        if rt.numel() != 1 {
            return Err(TensorError::Usage(format!("backward root must be scalar, got shape {:?}", rt.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rt.shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// [`Graph::backward`] followed by accumulation into the parameter store.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(root)?;
        grads.accumulate_into(self, store);
        Ok(grads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.needs(v) {
                        accumulate(grads, v, reduce_to(g, val(v)));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (&v, &o) in [(a, b), (b, a)] {
                    if self.needs(v) {
                        let prod = broadcast_mul(g, val(o));
                        accumulate(grads, v, reduce_to(&prod, val(v)));
                    }
                }
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|v| v * c))
            }
            Op::Tanh(a) => {
                let data = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * (T::one() - y * y)).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Silu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::full(val(*a).shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let gv = g.data()[0] / T::from_f64(t.numel().max(1) as f64);
                accumulate(grads, *a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.clone().reshape(val(*a).shape().to_vec())?);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                accumulate(grads, *a, permute_tensor(g, &inverse)?);
            }
            Op::Matmul(a, b) => {
                use crate::gemm::{gemm, MatRef};
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(T::one(), MatRef::row_major(g.data(), m, n), MatRef::transposed(tb.data(), k, n), T::zero(), &mut ga);
                    accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(T::one(), MatRef::transposed(ta.data(), m, k), MatRef::row_major(g.data(), m, n), T::zero(), &mut gb);
                    accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Linear { x, w, b } => {
                use crate::gemm::{gemm, MatRef};
                let (tx, tw) = (val(*x), val(*w));
                let (n, f, o) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * f];
                    gemm(T::one(), MatRef::row_major(g.data(), n, o), MatRef::row_major(tw.data(), o, f), T::zero(), &mut gx);
                    accumulate(grads, *x, Tensor::new(vec![n, f], gx)?);
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); o * f];
                    gemm(T::one(), MatRef::transposed(g.data(), n, o), MatRef::row_major(tx.data(), n, f), T::zero(), &mut gw);
                    accumulate(grads, *w, Tensor::new(vec![o, f], gw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); o];
                        for row in g.data().chunks(o.max(1)) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(grads, *b, Tensor::new(vec![o], gb)?);
                    }
                }
            }
            Op::Conv2d { x, k, shape } => {
                let (gx, gk) =
                    conv::conv2d_backward(val(*x).data(), val(*k).data(), g.data(), shape, self.needs(*x), self.needs(*k));
                if let Some(gx) = gx {
                    accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx)?);
                }
                if let Some(gk) = gk {
                    accumulate(grads, *k, Tensor::new(val(*k).shape().to_vec(), gk)?);
                }
            }
            Op::BoxSum { x, shape } => {
                let gx = conv::box_sum_backward(g.data(), shape);
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx)?);
            }
            Op::MaxPool { x, argmax } => {
                let gx = pool::max_pool_backward(g.data(), argmax, val(*x).numel());
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx)?);
            }
            Op::AvgPool { x, shape } => {
                let gx = pool::avg_pool_backward(g.data(), shape);
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx)?);
            }
            Op::GlobalAvgPool(x) => {
                let t = val(*x);
                let (_, _, inner) = channel_layout(t.shape())?;
                let inv = T::one() / T::from_f64(inner as f64);
                let mut gx = Vec::with_capacity(t.numel());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat(gv * inv).take(inner));
                }
                accumulate(grads, *x, Tensor::new(t.shape().to_vec(), gx)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let t = val(*x);
                let (n, c, inner) = channel_layout(t.shape())?;
                let gd = g.data();
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let r = (ni * c + ci) * inner..(ni * c + ci + 1) * inner;
                        for (&gv, &xh) in gd[r.clone()].iter().zip(&xhat[r]) {
                            dgamma[ci] += gv * xh;
                            dbeta[ci] += gv;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); t.numel()];
                    let mf = T::from_f64((n * inner) as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let r = (ni * c + ci) * inner..(ni * c + ci + 1) * inner;
                            if !train {
                                // fixed statistics: plain per-channel scaling
                                let s = gam[ci] * inv_std[ci];
                                for (o, &gv) in gx[r.clone()].iter_mut().zip(&gd[r]) {
                                    *o = gv * s;
                                }
                            } else {
                                let s = gam[ci] * inv_std[ci] / mf;
                                for ((o, &gv), &xh) in gx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xhat[r]) {
                                    *o = s * (mf * gv - dbeta[ci] - xh * dgamma[ci]);
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(t.shape().to_vec(), gx)?);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let t = val(*logits);
                let (n, k) = (t.shape()[0], t.shape()[1]);
                let scale = g.data()[0] / T::from_f64(n.max(1) as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= scale;
                }
                accumulate(grads, *logits, Tensor::new(vec![n, k], gl)?);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let gs = op.backward(&ins, out, g, &needs)?;
                if gs.len() != inputs.len() {
                    return Err(TensorError::Runtime(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let (true, Some(gv)) = (self.needs(v), gv) {
                        same_shape(gv.shape(), val(v).shape(), op.name())?;
                        accumulate(grads, v, gv);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a gradient down to a one-element operand when it was broadcast.
fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::full(target.shape().to_vec(), g.sum())
    }
}

fn broadcast_mul<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if g.shape() == other.shape() {
        let data = g.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Tensor::new(g.shape().to_vec(), data).expect("same shape")
    } else {
        let s = other.data()[0];
        g.map(|v| v * s)
    }
}

/// Materialized axis permutation.
pub fn permute_tensor<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let nd = t.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(config_err!("permute: {axes:?} is not a permutation of {nd} axes"));
    }
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; nd];
    let src = t.data();
    for _ in 0..t.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter leaf's gradient into the store (`+=`).
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) {
        for (i, node) in graph.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Some(id), Some(g)) = (node.param, &self.grads[i]) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
