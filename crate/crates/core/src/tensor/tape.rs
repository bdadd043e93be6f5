use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Deliberate backward-rule corruption, used by the gradcheck mutation
/// fixture to prove the battery catches a wrong rule.
#[derive(Clone, Copy, Debug)]
pub enum BackwardFault {
    /// Scale the swish input-gradient by the given factor.
    SwishScale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Relu { a: usize },
    Swish { a: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Sqrt { a: usize },
    Abs { a: usize },
    Softplus { a: usize },
    Powf { a: usize, p: f64 },
    Sum { a: usize },
    Mean { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Reshape { a: usize },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    BiasChannel { x: usize, b: usize },
    BiasLast { x: usize, b: usize },
    DepthwiseReflect { x: usize, k: usize },
    Dft2 { a: usize, imag: bool },
    GroupNorm1 { x: usize, gamma: usize, beta: usize, eps: f64 },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Embed { table: usize, ids: Vec<usize> },
    SoftmaxLast { a: usize },
    CrossEntropyMean { logits: usize, targets: Vec<usize> },
    UpsampleNearest2 { a: usize },
    Detach,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires: bool,
}

/// Define-by-run recording of tensor operations with reverse-mode replay.
///
/// Leaves created before [`Tape::mark_persistent`] survive [`Tape::reset`],
/// which is how model parameters live across training steps while the
/// rest of the graph is rebuilt each step.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    persistent: usize,
    fault: Option<BackwardFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), persistent: 0, fault: None }
    }

    /// Install a deliberately wrong backward rule (testing hook).
    pub fn set_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    /// New leaf participating in gradient computation.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// New leaf excluded from gradient computation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric("leaf holds non-finite values".into()));
        }
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Everything recorded so far survives future `reset` calls.
    pub fn mark_persistent(&mut self) {
        self.persistent = self.nodes.len();
    }

    /// Drop all non-persistent nodes. Persistent grads are kept as-is;
    /// clear them with [`Tape::zero_grad`].
    pub fn reset(&mut self) {
        self.nodes.truncate(self.persistent);
    }

    pub fn zero_grad(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Overwrite a leaf's value (optimizer updates, checkpoint restore).
    pub fn set_value(&mut self, v: Var, value: Tensor) -> Result<()> {
        if value.shape() != self.nodes[v.0].value.shape() {
            return Err(Error::Shape(format!(
                "set_value shape {:?} != existing {:?}",
                value.shape(),
                self.nodes[v.0].value.shape()
            )));
        }
        self.nodes[v.0].value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, v: Var) -> &mut Tensor {
        &mut self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn assert_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} holds NaN/Inf")))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary_shape(&self, a: Var, b: Var, opname: &str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if nb == 1 {
            return Ok(sa.to_vec());
        }
        if na == 1 {
            return Ok(sb.to_vec());
        }
        Err(Error::Shape(format!(
            "{opname}: shapes {sa:?} and {sb:?} are neither equal nor scalar-broadcastable"
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (val, req) = self.ew_forward(a, b, "add", |x, y| x + y)?;
        Ok(self.push(val, Op::Add { a: a.0, b: b.0 }, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (val, req) = self.ew_forward(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(val, Op::Sub { a: a.0, b: b.0 }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (val, req) = self.ew_forward(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(val, Op::Mul { a: a.0, b: b.0 }, req))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (val, req) = self.ew_forward(a, b, "div", |x, y| x / y)?;
        Ok(self.push(val, Op::Div { a: a.0, b: b.0 }, req))
    }

    fn ew_forward(
        &mut self,
        a: Var,
        b: Var,
        opname: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let shape = self.binary_shape(a, b, opname)?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let data: Vec<f64> = if av.len() == 1 && bv.len() != 1 {
            let x = av[0];
            bv.iter().map(|&y| f(x, y)).collect()
        } else if bv.len() == 1 && av.len() != 1 {
            let y = bv[0];
            av.iter().map(|&x| f(x, y)).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok((Tensor { shape, data }, self.req(a) || self.req(b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let val = self.nodes[a.0].value.map(|x| x * c);
        let req = self.req(a);
        self.push(val, Op::Scale { a: a.0, c }, req)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let val = self.nodes[a.0].value.map(|x| x + c);
        let req = self.req(a);
        self.push(val, Op::AddScalar { a: a.0 }, req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.map(|x| x.max(0.0));
        let req = self.req(a);
        self.push(val, Op::Relu { a: a.0 }, req)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        let req = self.req(a);
        self.push(val, Op::Swish { a: a.0 }, req)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.map(gelu_tanh);
        let req = self.req(a);
        self.push(val, Op::Gelu { a: a.0 }, req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.map(sigmoid);
        let req = self.req(a);
        self.push(val, Op::Sigmoid { a: a.0 }, req)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.map(f64::exp);
        let req = self.req(a);
        self.push(val, Op::Exp { a: a.0 }, req)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.map(f64::ln);
        let req = self.req(a);
        self.push(val, Op::Ln { a: a.0 }, req)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.map(f64::sqrt);
        let req = self.req(a);
        self.push(val, Op::Sqrt { a: a.0 }, req)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.map(f64::abs);
        let req = self.req(a);
        self.push(val, Op::Abs { a: a.0 }, req)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.map(softplus);
        let req = self.req(a);
        self.push(val, Op::Softplus { a: a.0 }, req)
    }

    /// Elementwise `x^p` for non-negative inputs when `p` is fractional.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let val = self.nodes[a.0].value.map(|x| x.powf(p));
        let req = self.req(a);
        self.push(val, Op::Powf { a: a.0, p }, req)
    }

    /// Stop-gradient: forward identity, backward blocked.
    pub fn detach(&mut self, a: Var) -> Var {
        let val = self.nodes[a.0].value.clone();
        { let _ = a; self.push(val, Op::Detach, false) }
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let req = self.req(a);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, req)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let req = self.req(a);
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, req)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        if sb[0] != k {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {}", sb[0])));
        }
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        matmul_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, m, k, n);
        let req = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::Matmul { a: a.0, b: b.0, m, k, n },
            req,
        ))
    }

    /// Batched matmul over identical leading dims: `[..,M,K] · [..,K,N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::Shape(format!("bmm shapes {sa:?} and {sb:?}")));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(Error::Shape(format!("bmm inner dims {k} vs {}", sb[sb.len() - 2])));
        }
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        for t in 0..batch {
            matmul_nn(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let req = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Bmm { a: a.0, b: b.0, batch, m, k, n },
            req,
        ))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Shape(format!("transpose_last2 needs ≥2 dims, got {sa:?}")));
        }
        let m = sa[sa.len() - 2];
        let n = sa[sa.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; av.len()];
        for t in 0..batch {
            let src = &av[t * m * n..(t + 1) * m * n];
            let dst = &mut out[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(n);
        shape.push(m);
        let req = self.req(a);
        Ok(self.push(Tensor { shape, data: out }, Op::TransposeLast2 { a: a.0 }, req))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axes.len() != sa.len() {
            return Err(Error::Shape(format!("permute axes {axes:?} for shape {sa:?}")));
        }
        let mut seen = vec![false; sa.len()];
        for &ax in axes {
            if ax >= sa.len() || seen[ax] {
                return Err(Error::Shape(format!("invalid permutation {axes:?}")));
            }
            seen[ax] = true;
        }
        let out = permute_data(self.nodes[a.0].value.data(), &sa, axes);
        let shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
        let req = self.req(a);
        Ok(self.push(Tensor { shape, data: out }, Op::Permute { a: a.0, axes: axes.to_vec() }, req))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let val = Tensor { shape: shape.to_vec(), data: self.nodes[a.0].value.data().to_vec() };
        let req = self.req(a);
        Ok(self.push(val, Op::Reshape { a: a.0 }, req))
    }

    // ── Convolution and friends ─────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::Shape(format!("conv2d needs 4-D x and w, got {sx:?}, {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (bs, c, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, cw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if c != cw {
            return Err(Error::Shape(format!("conv2d channels {c} vs weight channels {cw}")));
        }
        if kh != kw {
            return Err(Error::Shape("conv2d kernel must be square".into()));
        }
        if kh > h + 2 * pad || kw > wdt + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh} exceeds padded input {}x{}",
                h + 2 * pad,
                wdt + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let out = conv2d_forward(xv, wv, bs, c, h, wdt, o, kh, stride, pad, ho, wo);
        let req = self.req(x) || self.req(w);
        Ok(self.push(
            Tensor { shape: vec![bs, o, ho, wo], data: out },
            Op::Conv2d { x: x.0, w: w.0, stride, pad },
            req,
        ))
    }

    /// `x[B,C,H,W] + b[C]` broadcast over batch and space.
    pub fn bias_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape(format!("bias_channel x {sx:?} b {sb:?}")));
        }
        let (bs, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = xv.to_vec();
        for bi in 0..bs {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let add = bv[ci];
                for v in &mut out[base..base + h * w] {
                    *v += add;
                }
            }
        }
        let req = self.req(x) || self.req(b);
        Ok(self.push(Tensor { shape: sx, data: out }, Op::BiasChannel { x: x.0, b: b.0 }, req))
    }

    /// `x[..,D] + b[D]` broadcast over leading dims.
    pub fn bias_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.is_empty() || sb.len() != 1 || sb[0] != *sx.last().unwrap() {
            return Err(Error::Shape(format!("bias_last x {sx:?} b {sb:?}")));
        }
        let d = sb[0];
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = xv.to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv[i % d];
        }
        let req = self.req(x) || self.req(b);
        Ok(self.push(Tensor { shape: sx, data: out }, Op::BiasLast { x: x.0, b: b.0 }, req))
    }

    /// Depthwise convolution of `x[..,M,N]` with a single shared `k[μ,μ]`
    /// kernel, reflect padding so the output shape equals the input shape.
    /// Differentiable in both `x` and `k`.
    pub fn depthwise_reflect(&mut self, x: Var, k: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sx.len() < 2 {
            return Err(Error::Shape(format!("depthwise_reflect input {sx:?}")));
        }
        if sk.len() != 2 || sk[0] != sk[1] {
            return Err(Error::Shape(format!("kernel must be square 2-D, got {sk:?}")));
        }
        if sk[0] % 2 == 0 {
            return Err(Error::Contract(format!("kernel size {} must be odd", sk[0])));
        }
        let m = sx[sx.len() - 2];
        let n = sx[sx.len() - 1];
        let planes: usize = sx[..sx.len() - 2].iter().product();
        let mu = sk[0];
        let xv = self.nodes[x.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let mut out = vec![0.0; xv.len()];
        for p in 0..planes {
            depthwise_reflect_plane(
                &xv[p * m * n..(p + 1) * m * n],
                kv,
                &mut out[p * m * n..(p + 1) * m * n],
                m,
                n,
                mu,
            );
        }
        let req = self.req(x) || self.req(k);
        Ok(self.push(Tensor { shape: sx, data: out }, Op::DepthwiseReflect { x: x.0, k: k.0 }, req))
    }

    // ── Spectral ────────────────────────────────────────────────────

    /// Real plane of the unnormalized 2-D DFT over the last two dims.
    pub fn dft2_re(&mut self, a: Var) -> Result<Var> {
        self.dft2_part(a, false)
    }

    /// Imaginary plane of the unnormalized 2-D DFT over the last two dims.
    pub fn dft2_im(&mut self, a: Var) -> Result<Var> {
        self.dft2_part(a, true)
    }

    fn dft2_part(&mut self, a: Var, imag: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Shape(format!("dft2 needs ≥2 dims, got {sa:?}")));
        }
        let m = sa[sa.len() - 2];
        let n = sa[sa.len() - 1];
        let planes: usize = sa[..sa.len() - 2].iter().product();
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; av.len()];
        for p in 0..planes {
            let src = &av[p * m * n..(p + 1) * m * n];
            let dst = &mut out[p * m * n..(p + 1) * m * n];
            let plane = if imag { dft_im_map(src, m, n) } else { dft_re_map(src, m, n) };
            dst.copy_from_slice(&plane);
        }
        let req = self.req(a);
        Ok(self.push(Tensor { shape: sa, data: out }, Op::Dft2 { a: a.0, imag }, req))
    }

    // ── Normalization ───────────────────────────────────────────────

    /// Group normalization with a single group: per-sample statistics over
    /// (C,H,W), per-channel affine.
    pub fn group_norm1(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("group_norm1 needs 4-D input, got {sx:?}")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape("group_norm1 affine params must be [C]".into()));
        }
        let (bs, ch, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let nper = ch * h * w;
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..bs {
            let xs = &xv[b * nper..(b + 1) * nper];
            let mean = xs.iter().sum::<f64>() / nper as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nper as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for ci in 0..ch {
                for s in 0..h * w {
                    let idx = b * nper + ci * h * w + s;
                    out[idx] = (xv[idx] - mean) * inv_std * gv[ci] + bv[ci];
                }
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Tensor { shape: sx, data: out },
            Op::GroupNorm1 { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            req,
        ))
    }

    /// Layer normalization over the last dim with affine params `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::Shape("layer_norm on 0-D".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape("layer_norm affine params must be [D]".into()));
        }
        let rows = self.nodes[x.0].value.numel() / d;
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xs = &xv[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (xs[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Tensor { shape: sx, data: out },
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            req,
        ))
    }

    // ── Lookup / classification ─────────────────────────────────────

    /// Gather rows of `table[V,D]` by index: output `[ids.len(), D]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Shape(format!("embed table must be 2-D, got {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("embed index {bad} out of vocab {v}")));
        }
        let tv = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let req = self.req(table);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data: out },
            Op::Embed { table: table.0, ids: ids.to_vec() },
            req,
        ))
    }

    /// Numerically stable softmax over the last dim.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| Error::Shape("softmax on 0-D".into()))?;
        let rows = self.nodes[a.0].value.numel() / d;
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; av.len()];
        for r in 0..rows {
            let xs = &av[r * d..(r + 1) * d];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (xs[j] - mx).exp();
                out[r * d + j] = e;
                z += e;
            }
            for j in 0..d {
                out[r * d + j] /= z;
            }
        }
        let req = self.req(a);
        Ok(self.push(Tensor { shape: sa, data: out }, Op::SoftmaxLast { a: a.0 }, req))
    }

    /// Mean softmax cross-entropy of `logits[N,V]` against class indices.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(Error::Shape(format!("cross_entropy logits must be 2-D, got {sl:?}")));
        }
        let (nr, v) = (sl[0], sl[1]);
        if targets.len() != nr {
            return Err(Error::Shape(format!("{} targets for {} rows", targets.len(), nr)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(format!("target {bad} out of vocab {v}")));
        }
        let lv = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for r in 0..nr {
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
            total -= row[targets[r]] - lse;
        }
        total /= nr as f64;
        let req = self.req(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropyMean { logits: logits.0, targets: targets.to_vec() },
            req,
        ))
    }

    /// Nearest-neighbor 2× upsampling of the last two dims.
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Shape(format!("upsample needs ≥2 dims, got {sa:?}")));
        }
        let m = sa[sa.len() - 2];
        let n = sa[sa.len() - 1];
        let planes: usize = sa[..sa.len() - 2].iter().product();
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; planes * 4 * m * n];
        for p in 0..planes {
            let src = &av[p * m * n..(p + 1) * m * n];
            let dst = &mut out[p * 4 * m * n..(p + 1) * 4 * m * n];
            for i in 0..m {
                for j in 0..n {
                    let v = src[i * n + j];
                    dst[(2 * i) * 2 * n + 2 * j] = v;
                    dst[(2 * i) * 2 * n + 2 * j + 1] = v;
                    dst[(2 * i + 1) * 2 * n + 2 * j] = v;
                    dst[(2 * i + 1) * 2 * n + 2 * j + 1] = v;
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(2 * m);
        shape.push(2 * n);
        let req = self.req(a);
        Ok(self.push(Tensor { shape, data: out }, Op::UpsampleNearest2 { a: a.0 }, req))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode replay from a scalar loss.
    ///
    /// Gradients accumulate into every `requires_grad` leaf reachable from
    /// `loss`; a second backward without [`Tape::zero_grad`] sums leaf
    /// gradients (detectable double-accumulation).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut scratch: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires || scratch[i].is_none() {
                continue;
            }
            let g = scratch[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.backward_node(i, &g, &op, &mut scratch);
            scratch[i] = Some(g);
        }
        for (i, s) in scratch.into_iter().enumerate() {
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if !is_leaf || !self.nodes[i].requires {
                continue;
            }
            if let Some(s) = s {
                match self.nodes[i].grad.as_mut() {
                    Some(g) => {
                        for (a, b) in g.data_mut().iter_mut().zip(s.data()) {
                            *a += b;
                        }
                    }
                    None => self.nodes[i].grad = Some(s),
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, idx: usize, contribution: Tensor, scratch: &mut [Option<Tensor>]) {
        if !self.nodes[idx].requires {
            return;
        }
        match scratch[idx].as_mut() {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *a += b;
                }
            }
            None => scratch[idx] = Some(contribution),
        }
    }

    /// Gradient reduced to an input's shape: scalar inputs receive the
    /// summed gradient, matching the exact-or-scalar broadcast rule.
    fn acc_reduced(&self, idx: usize, grad: Vec<f64>, scratch: &mut [Option<Tensor>]) {
        if !self.nodes[idx].requires {
            return;
        }
        let shape = self.nodes[idx].value.shape().to_vec();
        let numel = self.nodes[idx].value.numel();
        let t = if numel == 1 && grad.len() != 1 {
            Tensor { shape, data: vec![grad.iter().sum()] }
        } else {
            Tensor { shape, data: grad }
        };
        self.accumulate(idx, t, scratch);
    }

    fn backward_node(&self, i: usize, g: &Tensor, op: &Op, scratch: &mut [Option<Tensor>]) {
        let gd = g.data();
        match *op {
            Op::Leaf | Op::Detach => {}

            Op::Add { a, b } => {
                self.acc_reduced(a, gd.to_vec(), scratch);
                self.acc_reduced(b, gd.to_vec(), scratch);
            }
            Op::Sub { a, b } => {
                self.acc_reduced(a, gd.to_vec(), scratch);
                self.acc_reduced(b, gd.iter().map(|&v| -v).collect(), scratch);
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let da = ew_grad(gd, bv);
                let db = ew_grad(gd, av);
                self.acc_reduced(a, da, scratch);
                self.acc_reduced(b, db, scratch);
            }
            Op::Div { a, b } => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let da: Vec<f64> =
                    gd.iter().enumerate().map(|(j, &gv)| gv / pick(bv, j)).collect();
                let db: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(j, &gv)| {
                        let bj = pick(bv, j);
                        -gv * pick(av, j) / (bj * bj)
                    })
                    .collect();
                self.acc_reduced(a, da, scratch);
                self.acc_reduced(b, db, scratch);
            }
            Op::Scale { a, c } => {
                self.acc_reduced(a, gd.iter().map(|&v| v * c).collect(), scratch);
            }
            Op::AddScalar { a } => {
                self.acc_reduced(a, gd.to_vec(), scratch);
            }
            Op::Relu { a } => {
                let av = self.nodes[a].value.data();
                let da = gd
                    .iter()
                    .zip(av)
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Swish { a } => {
                let factor = match self.fault {
                    Some(BackwardFault::SwishScale(f)) => f,
                    None => 1.0,
                };
                let av = self.nodes[a].value.data();
                let da = gd
                    .iter()
                    .zip(av)
                    .map(|(&gv, &x)| {
                        let s = sigmoid(x);
                        factor * gv * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Gelu { a } => {
                let av = self.nodes[a].value.data();
                let da = gd.iter().zip(av).map(|(&gv, &x)| gv * gelu_tanh_grad(x)).collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Sigmoid { a } => {
                let ov = self.nodes[i].value.data();
                let da = gd.iter().zip(ov).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Exp { a } => {
                let ov = self.nodes[i].value.data();
                let da = gd.iter().zip(ov).map(|(&gv, &e)| gv * e).collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Ln { a } => {
                let av = self.nodes[a].value.data();
                let da = gd.iter().zip(av).map(|(&gv, &x)| gv / x).collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Sqrt { a } => {
                let ov = self.nodes[i].value.data();
                let da = gd.iter().zip(ov).map(|(&gv, &s)| gv / (2.0 * s)).collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Abs { a } => {
                let av = self.nodes[a].value.data();
                let da = gd
                    .iter()
                    .zip(av)
                    .map(|(&gv, &x)| gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Softplus { a } => {
                let av = self.nodes[a].value.data();
                let da = gd.iter().zip(av).map(|(&gv, &x)| gv * sigmoid(x)).collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Powf { a, p } => {
                let av = self.nodes[a].value.data();
                let da = gd
                    .iter()
                    .zip(av)
                    .map(|(&gv, &x)| {
                        let d = p * x.powf(p - 1.0);
                        if d.is_finite() { gv * d } else { 0.0 }
                    })
                    .collect();
                self.acc_reduced(a, da, scratch);
            }
            Op::Sum { a } => {
                let n = self.nodes[a].value.numel();
                self.acc_reduced(a, vec![gd[0]; n], scratch);
            }
            Op::Mean { a } => {
                let n = self.nodes[a].value.numel();
                self.acc_reduced(a, vec![gd[0] / n as f64; n], scratch);
            }
            Op::Matmul { a, b, m, k, n } => {
                let av = self.nodes[a].value.data().to_vec();
                let bv = self.nodes[b].value.data().to_vec();
                if self.nodes[a].requires {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(gd, &bv, &mut da, m, n, k);
                    self.acc_reduced(a, da, scratch);
                }
                if self.nodes[b].requires {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(&av, gd, &mut db, m, k, n);
                    self.acc_reduced(b, db, scratch);
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let av = self.nodes[a].value.data().to_vec();
                let bv = self.nodes[b].value.data().to_vec();
                if self.nodes[a].requires {
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        matmul_nt(
                            &gd[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.acc_reduced(a, da, scratch);
                }
                if self.nodes[b].requires {
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        matmul_tn(
                            &av[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.acc_reduced(b, db, scratch);
                }
            }
            Op::TransposeLast2 { a } => {
                let so = self.nodes[i].value.shape().to_vec();
                let n = so[so.len() - 2];
                let m = so[so.len() - 1];
                let batch: usize = so[..so.len() - 2].iter().product();
                let mut da = vec![0.0; gd.len()];
                for t in 0..batch {
                    let src = &gd[t * m * n..(t + 1) * m * n];
                    let dst = &mut da[t * m * n..(t + 1) * m * n];
                    for r in 0..n {
                        for cc in 0..m {
                            dst[cc * n + r] = src[r * m + cc];
                        }
                    }
                }
                self.acc_reduced(a, da, scratch);
            }
            Op::Permute { a, ref axes } => {
                let so = self.nodes[i].value.shape().to_vec();
                let mut inverse = vec![0usize; axes.len()];
                for (pos, &ax) in axes.iter().enumerate() {
                    inverse[ax] = pos;
                }
                let da = permute_data(gd, &so, &inverse);
                self.acc_reduced(a, da, scratch);
            }
            Op::Reshape { a } => {
                self.acc_reduced(a, gd.to_vec(), scratch);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.nodes[x].value.shape().to_vec();
                let sw = self.nodes[w].value.shape().to_vec();
                let so = self.nodes[i].value.shape().to_vec();
                let (bs, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, _, kh, _) = (sw[0], sw[1], sw[2], sw[3]);
                let (ho, wo) = (so[2], so[3]);
                let xv = self.nodes[x].value.data().to_vec();
                let wv = self.nodes[w].value.data().to_vec();
                if self.nodes[x].requires {
                    let da =
                        conv2d_backward_input(gd, &wv, bs, c, h, wd, o, kh, stride, pad, ho, wo);
                    self.acc_reduced(x, da, scratch);
                }
                if self.nodes[w].requires {
                    let dw =
                        conv2d_backward_weight(gd, &xv, bs, c, h, wd, o, kh, stride, pad, ho, wo);
                    self.acc_reduced(w, dw, scratch);
                }
            }
            Op::BiasChannel { x, b } => {
                self.acc_reduced(x, gd.to_vec(), scratch);
                if self.nodes[b].requires {
                    let sx = self.nodes[x].value.shape().to_vec();
                    let (bs, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let mut db = vec![0.0; c];
                    for bi in 0..bs {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            db[ci] += gd[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    self.acc_reduced(b, db, scratch);
                }
            }
            Op::BiasLast { x, b } => {
                self.acc_reduced(x, gd.to_vec(), scratch);
                if self.nodes[b].requires {
                    let d = self.nodes[b].value.numel();
                    let mut db = vec![0.0; d];
                    for (j, &gv) in gd.iter().enumerate() {
                        db[j % d] += gv;
                    }
                    self.acc_reduced(b, db, scratch);
                }
            }
            Op::DepthwiseReflect { x, k } => {
                let sx = self.nodes[x].value.shape().to_vec();
                let m = sx[sx.len() - 2];
                let n = sx[sx.len() - 1];
                let planes: usize = sx[..sx.len() - 2].iter().product();
                let mu = self.nodes[k].value.shape()[0];
                let kv = self.nodes[k].value.data().to_vec();
                let xv = self.nodes[x].value.data().to_vec();
                let r = (mu - 1) / 2;
                if self.nodes[x].requires {
                    let mut dx = vec![0.0; xv.len()];
                    for p in 0..planes {
                        let gp = &gd[p * m * n..(p + 1) * m * n];
                        let dxp = &mut dx[p * m * n..(p + 1) * m * n];
                        for ii in 0..m {
                            for jj in 0..n {
                                let gv = gp[ii * n + jj];
                                for u in 0..mu {
                                    let yy = reflect_index(ii as isize + u as isize - r as isize, m);
                                    for v in 0..mu {
                                        let xx =
                                            reflect_index(jj as isize + v as isize - r as isize, n);
                                        dxp[yy * n + xx] += gv * kv[u * mu + v];
                                    }
                                }
                            }
                        }
                    }
                    self.acc_reduced(x, dx, scratch);
                }
                if self.nodes[k].requires {
                    let mut dk = vec![0.0; mu * mu];
                    for p in 0..planes {
                        let gp = &gd[p * m * n..(p + 1) * m * n];
                        let xp = &xv[p * m * n..(p + 1) * m * n];
                        for ii in 0..m {
                            for jj in 0..n {
                                let gv = gp[ii * n + jj];
                                for u in 0..mu {
                                    let yy = reflect_index(ii as isize + u as isize - r as isize, m);
                                    for v in 0..mu {
                                        let xx =
                                            reflect_index(jj as isize + v as isize - r as isize, n);
                                        dk[u * mu + v] += gv * xp[yy * n + xx];
                                    }
                                }
                            }
                        }
                    }
                    self.acc_reduced(k, dk, scratch);
                }
            }
            Op::Dft2 { a, imag } => {
                // Symmetric bases make the adjoint the same plane map.
                let sa = self.nodes[a].value.shape().to_vec();
                let m = sa[sa.len() - 2];
                let n = sa[sa.len() - 1];
                let planes: usize = sa[..sa.len() - 2].iter().product();
                let mut da = vec![0.0; gd.len()];
                for p in 0..planes {
                    let src = &gd[p * m * n..(p + 1) * m * n];
                    let plane = if imag { dft_im_map(src, m, n) } else { dft_re_map(src, m, n) };
                    da[p * m * n..(p + 1) * m * n].copy_from_slice(&plane);
                }
                self.acc_reduced(a, da, scratch);
            }
            Op::GroupNorm1 { x, gamma, beta, eps } => {
                let sx = self.nodes[x].value.shape().to_vec();
                let (bs, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let nper = c * h * w;
                let xv = self.nodes[x].value.data().to_vec();
                let gv = self.nodes[gamma].value.data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..bs {
                    let xs = &xv[b * nper..(b + 1) * nper];
                    let gs = &gd[b * nper..(b + 1) * nper];
                    let mean = xs.iter().sum::<f64>() / nper as f64;
                    let var =
                        xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nper as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for ci in 0..c {
                        for s in 0..h * w {
                            let j = ci * h * w + s;
                            let xhat = (xs[j] - mean) * inv_std;
                            let dxhat = gs[j] * gv[ci];
                            dgamma[ci] += gs[j] * xhat;
                            dbeta[ci] += gs[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    let nf = nper as f64;
                    for ci in 0..c {
                        for s in 0..h * w {
                            let j = ci * h * w + s;
                            let xhat = (xs[j] - mean) * inv_std;
                            let dxhat = gs[j] * gv[ci];
                            dx[b * nper + j] = inv_std
                                * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                        }
                    }
                }
                self.acc_reduced(x, dx, scratch);
                self.acc_reduced(gamma, dgamma, scratch);
                self.acc_reduced(beta, dbeta, scratch);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let sx = self.nodes[x].value.shape().to_vec();
                let d = *sx.last().unwrap();
                let rows = self.nodes[x].value.numel() / d;
                let xv = self.nodes[x].value.data().to_vec();
                let gv = self.nodes[gamma].value.data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xs = &xv[r * d..(r + 1) * d];
                    let gs = &gd[r * d..(r + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xs[j] - mean) * inv_std;
                        let dxhat = gs[j] * gv[j];
                        dgamma[j] += gs[j] * xhat;
                        dbeta[j] += gs[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let nf = d as f64;
                    for j in 0..d {
                        let xhat = (xs[j] - mean) * inv_std;
                        let dxhat = gs[j] * gv[j];
                        dx[r * d + j] =
                            inv_std * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                    }
                }
                self.acc_reduced(x, dx, scratch);
                self.acc_reduced(gamma, dgamma, scratch);
                self.acc_reduced(beta, dbeta, scratch);
            }
            Op::Embed { table, ref ids } => {
                if self.nodes[table].requires {
                    let st = self.nodes[table].value.shape().to_vec();
                    let d = st[1];
                    let mut dt = vec![0.0; st[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += gd[r * d + j];
                        }
                    }
                    self.acc_reduced(table, dt, scratch);
                }
            }
            Op::SoftmaxLast { a } => {
                let so = self.nodes[i].value.shape().to_vec();
                let d = *so.last().unwrap();
                let rows = gd.len() / d;
                let ov = self.nodes[i].value.data().to_vec();
                let mut da = vec![0.0; gd.len()];
                for r in 0..rows {
                    let s = &ov[r * d..(r + 1) * d];
                    let gs = &gd[r * d..(r + 1) * d];
                    let dot: f64 = s.iter().zip(gs).map(|(&sv, &gv)| sv * gv).sum();
                    for j in 0..d {
                        da[r * d + j] = s[j] * (gs[j] - dot);
                    }
                }
                self.acc_reduced(a, da, scratch);
            }
            Op::CrossEntropyMean { logits, ref targets } => {
                if self.nodes[logits].requires {
                    let sl = self.nodes[logits].value.shape().to_vec();
                    let (nr, v) = (sl[0], sl[1]);
                    let lv = self.nodes[logits].value.data().to_vec();
                    let mut dl = vec![0.0; nr * v];
                    let g0 = gd[0] / nr as f64;
                    for r in 0..nr {
                        let row = &lv[r * v..(r + 1) * v];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - mx).exp() / z;
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            dl[r * v + j] = g0 * (p - onehot);
                        }
                    }
                    self.acc_reduced(logits, dl, scratch);
                }
            }
            Op::UpsampleNearest2 { a } => {
                let sa = self.nodes[a].value.shape().to_vec();
                let m = sa[sa.len() - 2];
                let n = sa[sa.len() - 1];
                let planes: usize = sa[..sa.len() - 2].iter().product();
                let mut da = vec![0.0; planes * m * n];
                for p in 0..planes {
                    let gp = &gd[p * 4 * m * n..(p + 1) * 4 * m * n];
                    let dp = &mut da[p * m * n..(p + 1) * m * n];
                    for ii in 0..m {
                        for jj in 0..n {
                            dp[ii * n + jj] = gp[(2 * ii) * 2 * n + 2 * jj]
                                + gp[(2 * ii) * 2 * n + 2 * jj + 1]
                                + gp[(2 * ii + 1) * 2 * n + 2 * jj]
                                + gp[(2 * ii + 1) * 2 * n + 2 * jj + 1];
                        }
                    }
                }
                self.acc_reduced(a, da, scratch);
            }
        }
    }
}

// ── Scalar math ─────────────────────────────────────────────────────

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

fn pick(v: &[f64], j: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[j]
    }
}

fn ew_grad(g: &[f64], other: &[f64]) -> Vec<f64> {
    if other.len() == 1 {
        let o = other[0];
        g.iter().map(|&gv| gv * o).collect()
    } else {
        g.iter().zip(other).map(|(&gv, &ov)| gv * ov).collect()
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let ndim = shape.len();
    let mut in_strides = vec![1usize; ndim];
    for d in (0..ndim.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; ndim];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for d in (0..ndim).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0;
        for d in 0..ndim {
            src += coords[d] * in_strides[axes[d]];
        }
        *slot = data[src];
    }
    out
}

/// Mirror an out-of-range index without repeating the border sample.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i % period;
    if j < 0 {
        j += period;
    }
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn depthwise_reflect_plane(x: &[f64], k: &[f64], out: &mut [f64], m: usize, n: usize, mu: usize) {
    let r = (mu - 1) / 2;
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for u in 0..mu {
                let yy = reflect_index(i as isize + u as isize - r as isize, m);
                let row = &x[yy * n..(yy + 1) * n];
                for v in 0..mu {
                    let xx = reflect_index(j as isize + v as isize - r as isize, n);
                    acc += row[xx] * k[u * mu + v];
                }
            }
            out[i * n + j] = acc;
        }
    }
}

// ── Convolution kernels ─────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bs: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; bs * o * ho * wo];
    for b in 0..bs {
        for oc in 0..o {
            for i in 0..ho {
                let orow = &mut out[((b * o + oc) * ho + i) * wo..((b * o + oc) * ho + i + 1) * wo];
                for ci in 0..c {
                    for u in 0..k {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let xrow = &x[((b * c + ci) * h + y as usize) * wd
                            ..((b * c + ci) * h + y as usize + 1) * wd];
                        let wrow = &w[((oc * c + ci) * k + u) * k..((oc * c + ci) * k + u + 1) * k];
                        for (j, oj) in orow.iter_mut().enumerate() {
                            let x0 = (j * stride) as isize - pad as isize;
                            let mut acc = 0.0;
                            for (v, &wv) in wrow.iter().enumerate() {
                                let xx = x0 + v as isize;
                                if xx >= 0 && xx < wd as isize {
                                    acc += xrow[xx as usize] * wv;
                                }
                            }
                            *oj += acc;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    g: &[f64],
    w: &[f64],
    bs: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; bs * c * h * wd];
    for b in 0..bs {
        for oc in 0..o {
            for i in 0..ho {
                let grow = &g[((b * o + oc) * ho + i) * wo..((b * o + oc) * ho + i + 1) * wo];
                for ci in 0..c {
                    for u in 0..k {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let dxrow = &mut dx[((b * c + ci) * h + y as usize) * wd
                            ..((b * c + ci) * h + y as usize + 1) * wd];
                        let wrow = &w[((oc * c + ci) * k + u) * k..((oc * c + ci) * k + u + 1) * k];
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let x0 = (j * stride) as isize - pad as isize;
                            for (v, &wv) in wrow.iter().enumerate() {
                                let xx = x0 + v as isize;
                                if xx >= 0 && xx < wd as isize {
                                    dxrow[xx as usize] += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    g: &[f64],
    x: &[f64],
    bs: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; o * c * k * k];
    for b in 0..bs {
        for oc in 0..o {
            for i in 0..ho {
                let grow = &g[((b * o + oc) * ho + i) * wo..((b * o + oc) * ho + i + 1) * wo];
                for ci in 0..c {
                    for u in 0..k {
                        let y = (i * stride + u) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let xrow = &x[((b * c + ci) * h + y as usize) * wd
                            ..((b * c + ci) * h + y as usize + 1) * wd];
                        let dwrow =
                            &mut dw[((oc * c + ci) * k + u) * k..((oc * c + ci) * k + u + 1) * k];
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let x0 = (j * stride) as isize - pad as isize;
                            for (v, dwv) in dwrow.iter_mut().enumerate() {
                                let xx = x0 + v as isize;
                                if xx >= 0 && xx < wd as isize {
                                    *dwv += gv * xrow[xx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

// ── DFT plane maps (Eq. 5 structure, matrix form) ───────────────────

fn fourier_basis(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut cosb = vec![0.0; n * n];
    let mut sinb = vec![0.0; n * n];
    for u in 0..n {
        for x in 0..n {
            // Reduce the phase mod n before the trig call for accuracy.
            let phase = 2.0 * std::f64::consts::PI * ((u * x) % n) as f64 / n as f64;
            cosb[u * n + x] = phase.cos();
            sinb[u * n + x] = phase.sin();
        }
    }
    (cosb, sinb)
}

/// Real part of the unnormalized 2-D DFT of one `[m,n]` plane.
pub(crate) fn dft_re_map(f: &[f64], m: usize, n: usize) -> Vec<f64> {
    let (cm, sm) = fourier_basis(m);
    let (cn, sn) = fourier_basis(n);
    let mut p = vec![0.0; m * n];
    let mut q = vec![0.0; m * n];
    matmul_nn(&cm, f, &mut p, m, m, n);
    matmul_nn(&sm, f, &mut q, m, m, n);
    let mut re = vec![0.0; m * n];
    matmul_nn(&p, &cn, &mut re, m, n, n);
    let mut qs = vec![0.0; m * n];
    matmul_nn(&q, &sn, &mut qs, m, n, n);
    for (r, s) in re.iter_mut().zip(&qs) {
        *r -= s;
    }
    re
}

/// Imaginary part of the unnormalized 2-D DFT of one `[m,n]` plane.
pub(crate) fn dft_im_map(f: &[f64], m: usize, n: usize) -> Vec<f64> {
    let (cm, sm) = fourier_basis(m);
    let (cn, sn) = fourier_basis(n);
    let mut p = vec![0.0; m * n];
    let mut q = vec![0.0; m * n];
    matmul_nn(&cm, f, &mut p, m, m, n);
    matmul_nn(&sm, f, &mut q, m, m, n);
    let mut im = vec![0.0; m * n];
    matmul_nn(&q, &cn, &mut im, m, n, n);
    let mut ps = vec![0.0; m * n];
    matmul_nn(&p, &sn, &mut ps, m, n, n);
    for (r, s) in im.iter_mut().zip(&ps) {
        *r = -(*r + s);
    }
    im
}

/// Real part of the inverse 2-D DFT given real/imag planes.
pub(crate) fn idft2_real(re: &[f64], im: &[f64], m: usize, n: usize) -> Vec<f64> {
    let (cm, sm) = fourier_basis(m);
    let (cn, sn) = fourier_basis(n);
    // A F = (Cm R − Sm I) + i(Sm R + Cm I) = P + iQ; f_re = (P Cn − Q Sn)/MN
    let mut p = vec![0.0; m * n];
    let mut q = vec![0.0; m * n];
    matmul_nn(&cm, re, &mut p, m, m, n);
    let mut t = vec![0.0; m * n];
    matmul_nn(&sm, im, &mut t, m, m, n);
    for (a, b) in p.iter_mut().zip(&t) {
        *a -= b;
    }
    matmul_nn(&sm, re, &mut q, m, m, n);
    t.iter_mut().for_each(|v| *v = 0.0);
    matmul_nn(&cm, im, &mut t, m, m, n);
    for (a, b) in q.iter_mut().zip(&t) {
        *a += b;
    }
    let mut out = vec![0.0; m * n];
    matmul_nn(&p, &cn, &mut out, m, n, n);
    t.iter_mut().for_each(|v| *v = 0.0);
    matmul_nn(&q, &sn, &mut t, m, n, n);
    let scale = 1.0 / (m * n) as f64;
    for (a, b) in out.iter_mut().zip(&t) {
        *a = (*a - b) * scale;
    }
    out
}
