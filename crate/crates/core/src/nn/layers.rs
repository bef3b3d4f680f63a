use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    /// He-normal initialisation, `N(0, 2 / fan_in)`.
    pub fn he(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..shape.iter().product()).map(|_| normal.sample(rng)).collect();
        Self::new(Tensor::from_vec(shape, data).expect("shape product"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Visitor over named parameters.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Param) + 'a;

/// A differentiable layer. `forward` caches what `backward` needs, and
/// `backward` accumulates parameter gradients and returns the input gradient.
pub trait Layer: Send {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor>;
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_>) {}
    fn name(&self) -> &'static str;
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Unpacks an `[n, c, h, w]` shape.
fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::ShapeMismatch {
            expected: vec![x.batch(), 0, 0, 0],
            actual: x.shape().to_vec(),
        }),
    }
}

/// 2-D convolution over `[n, c, h, w]` with square kernels, lowered to a
/// matrix product per batch item.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: Vec<Vec<f64>>,
    in_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::he(&[cout, cin * k * k], cin * k * k, rng),
            bias: Param::new(Tensor::zeros(&[cout])),
            cin,
            cout,
            k,
            stride,
            pad,
            cols: Vec::new(),
            in_dims: (0, 0, 0, 0),
            out_hw: (0, 0),
        }
    }

    /// Same-size 3×3-style convolution (`pad = k / 2`, stride 1).
    pub fn same(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self::new(cin, cout, k, 1, k / 2, rng)
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, img: &[f64], h: usize, w: usize, col: &mut [f64]) {
        let (ho, wo) = self.out_size(h, w);
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for c in 0..self.cin {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * ho * wo;
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, img: &mut [f64]) {
        let (ho, wo) = self.out_size(h, w);
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for c in 0..self.cin {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * ho * wo;
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += col[row + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(x)?;
        if c != self.cin || h + 2 * self.pad < self.k || w + 2 * self.pad < self.k {
            return Err(Error::ShapeMismatch {
                expected: vec![n, self.cin, h.max(self.k), w.max(self.k)],
                actual: x.shape().to_vec(),
            });
        }
        let (ho, wo) = self.out_size(h, w);
        let ckk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros(&[n, self.cout, ho, wo]);
        self.cols = Vec::with_capacity(n);
        let bias = self.bias.value.data().to_vec();
        for i in 0..n {
            let mut col = vec![0.0; ckk * ho * wo];
            self.im2col(&x.data()[i * c * h * w..(i + 1) * c * h * w], h, w, &mut col);
            let o = &mut out.data_mut()[i * self.cout * ho * wo..(i + 1) * self.cout * ho * wo];
            for (co, plane) in o.chunks_mut(ho * wo).enumerate() {
                plane.fill(bias[co]);
            }
            gemm(self.cout, ckk, ho * wo, self.weight.value.data(), false, &col, false, 1.0, o);
            self.cols.push(col);
        }
        self.in_dims = (n, c, h, w);
        self.out_hw = (ho, wo);
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, c, h, w) = self.in_dims;
        let (ho, wo) = self.out_hw;
        let ckk = self.cin * self.k * self.k;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let mut dcol = vec![0.0; ckk * ho * wo];
        for i in 0..n {
            let g = &grad.data()[i * self.cout * ho * wo..(i + 1) * self.cout * ho * wo];
            gemm(self.cout, ho * wo, ckk, g, false, &self.cols[i], true, 1.0, self.weight.grad.data_mut());
            for (co, plane) in g.chunks(ho * wo).enumerate() {
                self.bias.grad.data_mut()[co] += plane.iter().sum::<f64>();
            }
            gemm(ckk, self.cout, ho * wo, self.weight.value.data(), true, g, false, 0.0, &mut dcol);
            self.col2im(&dcol, h, w, &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w]);
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }
}

/// Fully connected layer on `[n, in]`.
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    input: Tensor,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::he(&[outputs, inputs], inputs, rng),
            bias: Param::new(Tensor::zeros(&[outputs])),
            input: Tensor::zeros(&[0]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl Layer for Dense {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (i, o) = (self.inputs(), self.outputs());
        if x.shape().len() != 2 || x.shape()[1] != i {
            return Err(Error::ShapeMismatch {
                expected: vec![x.batch(), i],
                actual: x.shape().to_vec(),
            });
        }
        let n = x.batch();
        let mut out = Tensor::zeros(&[n, o]);
        for row in out.data_mut().chunks_mut(o) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(n, i, o, x.data(), false, self.weight.value.data(), true, 1.0, out.data_mut());
        self.input = x.clone();
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (i, o, n) = (self.inputs(), self.outputs(), self.input.batch());
        gemm(o, n, i, grad.data(), true, self.input.data(), false, 1.0, self.weight.grad.data_mut());
        for row in grad.data().chunks(o) {
            for (b, g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, i]);
        gemm(n, o, i, grad.data(), false, self.weight.value.data(), false, 0.0, dx.data_mut());
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn name(&self) -> &'static str {
        "dense"
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        self.mask = x.data().iter().map(|&v| v > 0.0).collect();
        for (v, &m) in out.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut dx = grad.clone();
        for (v, &m) in dx.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
        dx
    }

    fn name(&self) -> &'static str {
        "relu"
    }
}

/// Max pooling with a square window; partial windows at the border are dropped.
pub struct MaxPool2d {
    k: usize,
    stride: usize,
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize) -> Self {
        Self {
            k,
            stride,
            argmax: Vec::new(),
            in_shape: Vec::new(),
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(x)?;
        if h < self.k || w < self.k {
            return Err(Error::ShapeMismatch {
                expected: vec![n, c, self.k, self.k],
                actual: x.shape().to_vec(),
            });
        }
        let (ho, wo) = ((h - self.k) / self.stride + 1, (w - self.k) / self.stride + 1);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        self.argmax = vec![0; n * c * ho * wo];
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * self.stride * w + ox * self.stride;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let idx = base + (oy * self.stride + ky) * w + ox * self.stride + kx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data_mut()[o] = xd[best];
                    self.argmax[o] = best;
                }
            }
        }
        self.in_shape = x.shape().to_vec();
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(&self.in_shape);
        for (&i, &g) in self.argmax.iter().zip(grad.data()) {
            dx.data_mut()[i] += g;
        }
        dx
    }

    fn name(&self) -> &'static str {
        "maxpool2d"
    }
}

/// Non-overlapping `k×k` average pooling.
pub struct AvgPool2d {
    k: usize,
    in_shape: Vec<usize>,
}

impl AvgPool2d {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            in_shape: Vec::new(),
        }
    }
}

impl Layer for AvgPool2d {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(x)?;
        let k = self.k;
        if h < k || w < k {
            return Err(Error::ShapeMismatch {
                expected: vec![n, c, k, k],
                actual: x.shape().to_vec(),
            });
        }
        let (ho, wo) = (h / k, w / k);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let scale = 1.0 / (k * k) as f64;
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ky in 0..k {
                        let row = plane * h * w + (oy * k + ky) * w + ox * k;
                        s += x.data()[row..row + k].iter().sum::<f64>();
                    }
                    out.data_mut()[(plane * ho + oy) * wo + ox] = s * scale;
                }
            }
        }
        self.in_shape = x.shape().to_vec();
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (h, w) = (self.in_shape[2], self.in_shape[3]);
        let k = self.k;
        let (ho, wo) = (h / k, w / k);
        let scale = 1.0 / (k * k) as f64;
        let mut dx = Tensor::zeros(&self.in_shape);
        for plane in 0..self.in_shape[0] * self.in_shape[1] {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = grad.data()[(plane * ho + oy) * wo + ox] * scale;
                    for ky in 0..k {
                        let row = plane * h * w + (oy * k + ky) * w + ox * k;
                        for v in &mut dx.data_mut()[row..row + k] {
                            *v += g;
                        }
                    }
                }
            }
        }
        dx
    }

    fn name(&self) -> &'static str {
        "avgpool2d"
    }
}

/// `[n, c, h, w] -> [n, c]` spatial mean.
#[derive(Default)]
pub struct GlobalAvgPool {
    in_shape: Vec<usize>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(x)?;
        let hw = h * w;
        let data = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.in_shape = x.shape().to_vec();
        Tensor::from_vec(&[n, c], data)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let hw = self.in_shape[2] * self.in_shape[3];
        let mut dx = Tensor::zeros(&self.in_shape);
        for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
            plane.fill(g / hw as f64);
        }
        dx
    }

    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
}

pub struct Identity;

impl Layer for Identity {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        grad.clone()
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn name(&self) -> &'static str {
        "sequential"
    }
}

/// `y = x + f(x)`; `f` must preserve shape.
pub struct Residual {
    inner: Box<dyn Layer>,
}

impl Residual {
    pub fn new(inner: impl Layer + 'static) -> Self {
        Self { inner: Box::new(inner) }
    }
}

impl Layer for Residual {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.inner.forward(x)?;
        y.check_shape(x.shape())?;
        for (a, b) in y.data_mut().iter_mut().zip(x.data()) {
            *a += b;
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut dx = self.inner.backward(grad);
        for (a, b) in dx.data_mut().iter_mut().zip(grad.data()) {
            *a += b;
        }
        dx
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.inner.visit_params(&join(prefix, "inner"), f);
    }

    fn name(&self) -> &'static str {
        "residual"
    }
}

/// Runs every branch on the same input and concatenates the results along
/// the channel axis (axis 1). Branch outputs must agree on all other axes.
pub struct Concat {
    branches: Vec<Box<dyn Layer>>,
    widths: Vec<usize>,
    inner: usize,
}

impl Concat {
    pub fn new(branches: Vec<Box<dyn Layer>>) -> Self {
        Self {
            branches,
            widths: Vec::new(),
            inner: 0,
        }
    }
}

impl Layer for Concat {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let first = outs[0].shape().to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        for o in &outs {
            if o.shape()[0] != n || o.shape()[2..] != first[2..] {
                return Err(Error::ShapeMismatch {
                    expected: first.clone(),
                    actual: o.shape().to_vec(),
                });
            }
        }
        self.widths = outs.iter().map(|o| o.shape()[1]).collect();
        self.inner = inner;
        let total: usize = self.widths.iter().sum();
        let mut shape = first.clone();
        shape[1] = total;
        let mut data = Vec::with_capacity(n * total * inner);
        for i in 0..n {
            for (o, &c) in outs.iter().zip(&self.widths) {
                data.extend_from_slice(&o.data()[i * c * inner..(i + 1) * c * inner]);
            }
        }
        Tensor::from_vec(&shape, data)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let n = grad.batch();
        let total: usize = self.widths.iter().sum();
        let mut dx: Option<Tensor> = None;
        let mut offset = 0;
        for (b, &c) in self.branches.iter_mut().zip(&self.widths) {
            let mut shape = grad.shape().to_vec();
            shape[1] = c;
            let mut data = Vec::with_capacity(n * c * self.inner);
            for i in 0..n {
                let start = (i * total + offset) * self.inner;
                data.extend_from_slice(&grad.data()[start..start + c * self.inner]);
            }
            offset += c;
            let g = b.backward(&Tensor::from_vec(&shape, data).expect("branch slice"));
            match dx.as_mut() {
                None => dx = Some(g),
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
        }
        dx.expect("at least one branch")
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("branch{i}")), f);
        }
    }

    fn name(&self) -> &'static str {
        "concat"
    }
}
