use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding that keeps `H, W` at stride 1 (odd kernels only).
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    TransposeConv { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<u32> },
    Dense { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Concat { a: Var, b: Var },
    SumAll { x: Var },
    SumPerItem { x: Var },
    Reshape { x: Var },
    Dot { x: Var, weights: Tensor<T> },
    Bce { t: Var, labels: Vec<T> },
    Mse { pred: Var, target: Tensor<T> },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// A tape belongs to one thread of execution. Values are kept until
/// [`Tape::clear`]; gradients are produced once per recording.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or zeros of its shape when `v` did not contribute.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn check_finite<T: Real>(t: Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
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
        Tape {
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

    /// Drops every recorded value and re-arms the tape.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf value. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Distance of the recorded point from the nearest non-differentiable
    /// point: the smallest `|x|` fed to a ReLU and the smallest gap between the
    /// largest and second-largest entry of a max-pool window. Infinite when
    /// neither primitive was recorded.
    pub fn kink_margin(&self) -> T {
        let mut margin = T::infinity();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool { x, .. } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.dims4().expect("max-pool input is rank 4");
                    let d = xv.data();
                    for plane in 0..n * c {
                        let base = plane * h * w;
                        for i in (0..h).step_by(2) {
                            for j in (0..w).step_by(2) {
                                let mut win = [
                                    d[base + i * w + j],
                                    d[base + i * w + j + 1],
                                    d[base + (i + 1) * w + j],
                                    d[base + (i + 1) * w + j + 1],
                                ];
                                win.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));
                                margin = margin.min(win[0] - win[1]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be at least 1"));
        }
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels but weight {:?} expects {wcin}",
                self.value(w).shape()
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?} does not match {cout} output channels",
                self.value(b).shape()
            )));
        }
        let pad = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
                    return Err(Error::arg(format!(
                        "same padding needs an odd square kernel, got {kh}x{kw}"
                    )));
                }
                (kh - 1) / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            pad,
            stride,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let out = check_finite(Tensor::new(vec![n, cout, oh, ow], out)?, "conv2d")?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2 (exact spatial doubling).
    pub fn transpose_conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Result<Var> {
        if kernel != 2 || stride != 2 {
            return Err(Error::arg(format!(
                "transpose_conv2d supports only kernel 2 and stride 2, got kernel {kernel} stride {stride}"
            )));
        }
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != 2 || kw != 2 {
            return Err(Error::shape(format!(
                "transpose_conv2d weight {:?} incompatible with {cin} input channels",
                self.value(w).shape()
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::shape(format!(
                "transpose_conv2d bias shape {:?} does not match {cout} output channels",
                self.value(b).shape()
            )));
        }
        let out = kernels::tconv_forward(
            self.value(x).data(),
            n,
            cin,
            h,
            wd,
            self.value(w).data(),
            self.value(b).data(),
        );
        let out = check_finite(Tensor::new(vec![n, cout, 2 * h, 2 * wd], out)?, "transpose_conv2d")?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::TransposeConv { x, w, b }, rg))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::arg(format!(
                "maxpool2x2 needs even spatial dimensions, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), n, c, h, w);
        let out = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// `y = x·W + b` with `x: [N, D]`, `W: [D, M]`, `b: [M]`.
    ///
    /// Each output accumulates sequentially over `d` before adding the bias, so
    /// an all-ones weight with zero bias reproduces [`Tape::sum_per_item`] exactly.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let [n, d] = xv.shape()[..] else {
            return Err(Error::shape(format!(
                "dense input must be [N, D], got {:?}",
                xv.shape()
            )));
        };
        let [wd, m] = wv.shape()[..] else {
            return Err(Error::shape(format!(
                "dense weight must be [D, M], got {:?}",
                wv.shape()
            )));
        };
        if wd != d || bv.shape() != [m] {
            return Err(Error::shape(format!(
                "dense input {:?} incompatible with weight {:?} and bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (xs, ws, bs) = (xv.data(), wv.data(), bv.data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            for j in 0..m {
                let mut acc = T::zero();
                for (k, &xk) in row.iter().enumerate() {
                    acc = acc + ws[k * m + j] * xk;
                }
                out.push(acc + bs[j]);
            }
        }
        let out = check_finite(Tensor::new(vec![n, m], out)?, "dense")?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Channel concatenation `[N, Ca, H, W] ++ [N, Cb, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels needs matching N, H, W: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&self.value(b).data()[i * lb..(i + 1) * lb]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Raster-order sequential sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = check_finite(Tensor::scalar(self.value(x).sum()), "sum_all")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SumAll { x }, rg))
    }

    /// Raster-order sum of each leading-axis item: `[N, ...] -> [N, 1]`.
    pub fn sum_per_item(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.len_outer();
        let out: Vec<T> = (0..n)
            .map(|i| {
                let mut acc = T::zero();
                for &v in xv.outer(i) {
                    acc = acc + v;
                }
                acc
            })
            .collect();
        let out = check_finite(Tensor::new(vec![n, 1], out)?, "sum_per_item")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SumPerItem { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Flattens `[N, ...]` into `[N, D]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = [v.len_outer(), v.item_len()];
        self.reshape(x, &shape)
    }

    /// Inner product with a constant tensor of the same shape, as a scalar.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(Error::shape(format!(
                "dot_const weights {:?} do not match value {:?}",
                weights.shape(),
                self.value(x).shape()
            )));
        }
        let mut acc = T::zero();
        for (&a, &b) in self.value(x).data().iter().zip(weights.data()) {
            acc = acc + a * b;
        }
        let out = check_finite(Tensor::scalar(acc), "dot_const")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Dot { x, weights }, rg))
    }

    /// Mean binary cross-entropy of logits `t: [N, 1]` against 0/1 labels,
    /// computed in the overflow-free softplus form.
    pub fn bce_loss(&mut self, t: Var, labels: &[T]) -> Result<Var> {
        let tv = self.value(t);
        if tv.numel() != labels.len() || tv.len_outer() != labels.len() {
            return Err(Error::shape(format!(
                "bce_loss logits {:?} vs {} labels",
                tv.shape(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::arg(format!("label {bad:?} is not 0 or 1")));
        }
        let mut acc = T::zero();
        for (&x, &y) in tv.data().iter().zip(labels) {
            let relu = if x > T::zero() { x } else { T::zero() };
            acc = acc + relu - x * y + (-x.abs()).exp().ln_1p();
        }
        let n = T::of_f64(labels.len() as f64);
        let out = check_finite(Tensor::scalar(acc / n), "bce_loss")?;
        let rg = self.any_grad(&[t]);
        Ok(self.push(
            out,
            Op::Bce {
                t,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared difference over every element.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(format!(
                "mse_loss prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let mut acc = T::zero();
        for (&p, &q) in pv.data().iter().zip(target.data()) {
            let d = p - q;
            acc = acc + d * d;
        }
        let n = T::of_f64(target.numel() as f64);
        let out = check_finite(Tensor::scalar(acc / n), "mse_loss")?;
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            out,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from the one-element value `loss`.
    ///
    /// Fails if this recording was already differentiated; call
    /// [`Tape::clear`] and record a new forward pass first.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this recording; clear the tape and run a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a one-element loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let len = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..len).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.value(*x).len_outer();
                let r = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                    self.needs(*b),
                );
                self.scatter_conv(grads, r, *x, *w, *b)?;
            }
            Op::TransposeConv { x, w, b } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let cout = self.value(*b).numel();
                let r = kernels::tconv_backward(
                    self.value(*x).data(),
                    n,
                    cin,
                    h,
                    wd,
                    self.value(*w).data(),
                    cout,
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                    self.needs(*b),
                );
                self.scatter_conv(grads, r, *x, *w, *b)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&gi, &src) in g.data().iter().zip(argmax) {
                    d[src as usize] = d[src as usize] + gi;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let m = wv.shape()[1];
                let gd = g.data();
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    let dxs = dx.data_mut();
                    for r in 0..n {
                        for k in 0..d {
                            let mut acc = T::zero();
                            for j in 0..m {
                                acc = acc + gd[r * m + j] * wv.data()[k * m + j];
                            }
                            dxs[r * d + k] = acc;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    let dws = dw.data_mut();
                    for r in 0..n {
                        let row = &xv.data()[r * d..(r + 1) * d];
                        for (k, &xk) in row.iter().enumerate() {
                            for j in 0..m {
                                dws[k * m + j] = dws[k * m + j] + xk * gd[r * m + j];
                            }
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[m]);
                    for r in 0..n {
                        for j in 0..m {
                            db.data_mut()[j] = db.data()[j] + gd[r * m + j];
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu { x } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    if yv <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d = *d * yv * (T::one() - yv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let gd = g.data();
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(n * la);
                    for r in 0..n {
                        da.extend_from_slice(&gd[r * (la + lb)..r * (la + lb) + la]);
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], da)?);
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(n * lb);
                    for r in 0..n {
                        db.extend_from_slice(&gd[r * (la + lb) + la..(r + 1) * (la + lb)]);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], db)?);
                }
            }
            Op::SumAll { x } => {
                let dx = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, dx);
            }
            Op::SumPerItem { x } => {
                let xv = self.value(*x);
                let k = xv.item_len();
                let dx = Tensor::from_fn(xv.shape(), |j| g.data()[j / k]);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Dot { x, weights } => {
                let s = g.item();
                self.accumulate(grads, *x, weights.map(|w| w * s));
            }
            Op::Bce { t, labels } => {
                let tv = self.value(*t);
                let n = T::of_f64(labels.len() as f64);
                let s = g.item();
                let mut dt = tv.clone();
                for (d, &y) in dt.data_mut().iter_mut().zip(labels) {
                    *d = (sigmoid(*d) - y) / n * s;
                }
                self.accumulate(grads, *t, dt);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let n = T::of_f64(target.numel() as f64);
                let two = T::of_f64(2.0);
                let s = g.item();
                let mut dp = pv.clone();
                for (d, &q) in dp.data_mut().iter_mut().zip(target.data()) {
                    *d = two * (*d - q) / n * s;
                }
                self.accumulate(grads, *pred, dp);
            }
        }
        Ok(())
    }

    fn scatter_conv(
        &self,
        grads: &mut [Option<Tensor<T>>],
        r: kernels::ConvGrads<T>,
        x: Var,
        w: Var,
        b: Var,
    ) -> Result<()> {
        if let Some(dx) = r.dx {
            self.accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
        }
        if let Some(dw) = r.dw {
            self.accumulate(grads, w, Tensor::new(self.value(w).shape().to_vec(), dw)?);
        }
        if let Some(db) = r.db {
            self.accumulate(grads, b, Tensor::new(self.value(b).shape().to_vec(), db)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_counts_overlap() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, Padding::Same, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_kernel_is_bit_exact() {
        let mut tape = Tape::<f32>::new();
        let data = Tensor::from_fn(&[2, 1, 5, 4], |i| (i as f32 * 0.731).sin() * 3.3);
        let x = tape.constant(data.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, Padding::Same, 1).unwrap();
        assert_eq!(tape.value(y).to_le_bytes(), data.to_le_bytes());
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b, Padding::Same, 1), Err(Error::Shape(_))));
        let w2 = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w2, b, Padding::Same, 0),
            Err(Error::Argument(_))
        ));
        let w3 = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(
            tape.conv2d(x, w3, b, Padding::Same, 1),
            Err(Error::Argument(_))
        ));
        let y = tape.conv2d(x, w3, b, Padding::Valid, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        let y = tape.conv2d(x, w2, b, Padding::Valid, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn transpose_conv_tiles_without_overlap() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.transpose_conv2d(x, w, b, 2, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));

        let z = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32));
        let b = tape.constant(t(&[2], &[0.5, -2.0]));
        let y = tape.transpose_conv2d(z, w, b, 2, 2).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 2, 6, 6]);
        assert!(v.data()[..36].iter().all(|&q| q == 0.5));
        assert!(v.data()[36..].iter().all(|&q| q == -2.0));

        assert!(tape.transpose_conv2d(x, w, b, 3, 2).is_err());
        assert!(tape.transpose_conv2d(x, w, b, 2, 1).is_err());
    }

    #[test]
    fn maxpool_values_and_tie_rule() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 7.0), true);
        let y = tape.maxpool2x2(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap().wrt(x);
        let expect: Vec<f32> = (0..16)
            .map(|i| if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(g.data(), &expect[..]);

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(tape.maxpool2x2(x), Err(Error::Argument(_))));
    }

    #[test]
    fn dense_matches_hadamard_sum_and_sum_all() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let w = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).item(), 6.0);

        let data = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i * 7919) % 13) as f32 * 0.37 - 2.0);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(data);
        let flat = tape.flatten(x).unwrap();
        let w = tape.constant(Tensor::full(&[16, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let d = tape.dense(flat, w, b).unwrap();
        let s = tape.sum_per_item(x).unwrap();
        assert_eq!(tape.value(d).to_le_bytes(), tape.value(s).to_le_bytes());

        let bad = tape.constant(Tensor::full(&[15, 1], 1.0));
        assert!(matches!(tape.dense(flat, bad, b), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_and_concat() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);

        let a = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let b = tape.constant(Tensor::zeros(&[1, 5, 8, 8]));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 8, 8, 8]);
        let d = tape.constant(Tensor::zeros(&[1, 5, 4, 8]));
        assert!(matches!(tape.concat_channels(a, d), Err(Error::Shape(_))));
    }

    #[test]
    fn kink_margin_sees_relu_inputs_and_pool_gaps() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.kink_margin().is_infinite());
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.5, -0.25, 0.4, 0.3]).unwrap());
        tape.relu(x);
        assert_eq!(tape.kink_margin(), 0.25);
        tape.maxpool2x2(x).unwrap();
        assert!((tape.kink_margin() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sum_all_gradient_is_all_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), true);
        let s = tape.sum_all(x).unwrap();
        assert_eq!(tape.value(s).item(), 4.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 4]);
    }

    #[test]
    fn losses() {
        let mut tape = Tape::<f64>::new();
        let t0 = tape.leaf(Tensor::zeros(&[1, 1]), true);
        let l = tape.bce_loss(t0, &[1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert!((g.wrt(t0).item() + 0.5).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[1, 1], 2.0));
        let l = tape.mse_loss(p, &Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);

        let mut tape = Tape::<f64>::new();
        let t0 = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(tape.bce_loss(t0, &[1.0, 0.5]), Err(Error::Argument(_))));
        let big = tape.constant(Tensor::full(&[1, 1], 1000.0));
        let l = tape.bce_loss(big, &[0.0]).unwrap();
        assert!((tape.value(l).item() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn backward_twice_is_an_error_and_unused_leaves_get_zeros() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0), true);
        let unused = tape.leaf(Tensor::full(&[2], 5.0), true);
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
        tape.clear();
        assert!(tape.is_empty());
        let x = tape.leaf(Tensor::full(&[3], 2.0), true);
        let s = tape.sum_all(x).unwrap();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn non_finite_forward_is_detected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 2], f32::MAX));
        let w = tape.constant(Tensor::full(&[2, 1], f32::MAX));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.dense(x, w, b), Err(Error::NonFinite { .. })));
    }
}
