//! A small define-by-run reverse-mode autodiff tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! tape in reverse. The op set is exactly what the registration networks and
//! losses need: convolutions, pooling, fully connected layers, nearest
//! upsampling, channel concat, differentiable image sampling, box filters,
//! forward differences and a singular-value penalty.
//!
//! Activations are laid out channel-first without a batch axis (training
//! batches are single pairs).

pub mod check;
pub mod conv;
pub mod loss;
pub mod real;
pub mod sample;

use crate::geometry::svd;
use crate::nd::NdArray;
use real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var, T),
    Square(Var),
    LeakyRelu(Var, T),
    Relu(Var),
    SumAll(Var),
    /// sum(w .* x) with constant weights.
    WeightedSumAll(Var, NdArray<T>),
    Reshape(Var),
    /// Concatenate along axis 0 (channels); spatial shapes must match.
    ConcatC(Vec<Var>),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        /// im2col buffer kept from the forward pass for the weight gradient.
        col: Option<Box<[T]>>,
    },
    Gap(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    UpsampleNearest(Var),
    /// theta: flat [n*(n+1)] top rows of a homogeneous matrix; pts: [n, N].
    AffinePoints {
        theta: Var,
        pts: Var,
    },
    /// Multilinear sampling of a single-channel image at [n, N] coordinates.
    SampleImage {
        img: Var,
        coords: Var,
    },
    /// Zero-padded box filter of odd width j over all axes.
    BoxSum(Var, usize),
    /// Forward difference along spatial `axis` of a [C, spatial...] array,
    /// zero on the trailing slice.
    DiffAxis(Var, usize),
    /// sum_i |sigma_i - 1| of the linear block encoded in a theta vector.
    ScalingPenalty {
        theta: Var,
        n: usize,
    },
}

pub(crate) struct Node<T: Real> {
    pub value: NdArray<T>,
    pub needs_grad: bool,
    pub op: Op<T>,
}

pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data[0].to_f64()
    }

    fn push(&mut self, value: NdArray<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: NdArray<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, g, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, g, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, g, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x / y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, g, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * c);
        let g = self.ng(x);
        self.push(value, g, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| v + c);
        let g = self.ng(x);
        self.push(value, g, Op::Offset(x, c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * v);
        let g = self.ng(x);
        self.push(value, g, Op::Square(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.nodes[x.0]
            .value
            .map(|v| if v > T::ZERO { v } else { v * slope });
        let g = self.ng(x);
        self.push(value, g, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(T::ZERO));
        let g = self.ng(x);
        self.push(value, g, Op::Relu(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in &self.nodes[x.0].value.data {
            acc += v;
        }
        let g = self.ng(x);
        self.push(NdArray::scalar(acc), g, Op::SumAll(x))
    }

    pub fn weighted_sum_all(&mut self, x: Var, w: NdArray<T>) -> Var {
        assert_eq!(self.nodes[x.0].value.len(), w.len());
        let mut acc = T::ZERO;
        for (&v, &wv) in self.nodes[x.0].value.data.iter().zip(&w.data) {
            acc += v * wv;
        }
        let g = self.ng(x);
        self.push(NdArray::scalar(acc), g, Op::WeightedSumAll(x, w))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.len(), shape.iter().product::<usize>());
        let value = NdArray {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let g = self.ng(x);
        self.push(value, g, Op::Reshape(x))
    }

    pub fn concat_c(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let spatial = self.nodes[xs[0].0].value.shape[1..].to_vec();
        let mut channels = 0;
        for &v in xs {
            let s = &self.nodes[v.0].value.shape;
            assert_eq!(&s[1..], &spatial[..], "concat spatial mismatch");
            channels += s[0];
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&spatial);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &v in xs {
            data.extend_from_slice(&self.nodes[v.0].value.data);
        }
        let g = xs.iter().any(|&v| self.ng(v));
        self.push(NdArray::from_vec(&shape, data), g, Op::ConcatC(xs.to_vec()))
    }

    pub fn gap(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let c = v.shape[0];
        let spatial: usize = v.shape[1..].iter().product();
        let inv = T::from_f64(1.0 / spatial as f64);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let mut acc = T::ZERO;
            for &x in &v.data[ch * spatial..(ch + 1) * spatial] {
                acc += x;
            }
            out.push(acc * inv);
        }
        let g = self.ng(x);
        self.push(NdArray::from_vec(&[c], out), g, Op::Gap(x))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (out_dim, in_dim) = (wv.shape[0], wv.shape[1]);
        assert_eq!(xv.len(), in_dim);
        assert_eq!(bv.len(), out_dim);
        let mut out = bv.data.clone();
        for o in 0..out_dim {
            let row = &wv.data[o * in_dim..(o + 1) * in_dim];
            let mut acc = T::ZERO;
            for (rw, xv) in row.iter().zip(&xv.data) {
                acc += *rw * *xv;
            }
            out[o] += acc;
        }
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(NdArray::from_vec(&[out_dim], out), g, Op::Linear { x, w, b })
    }

    pub fn upsample_nearest(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let value = conv::upsample_nearest_fwd(v);
        let g = self.ng(x);
        self.push(value, g, Op::UpsampleNearest(x))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let keep_col = self.ng(w);
        let (value, col) = conv::conv_fwd_keep(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            keep_col,
        );
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(value, g, Op::Conv { x, w, b, stride, col })
    }

    pub fn affine_points(&mut self, theta: Var, pts: Var) -> Var {
        let value = sample::affine_points_fwd(&self.nodes[theta.0].value, &self.nodes[pts.0].value);
        let g = self.ng(theta) || self.ng(pts);
        self.push(value, g, Op::AffinePoints { theta, pts })
    }

    pub fn sample_image(&mut self, img: Var, coords: Var) -> Var {
        let value = sample::sample_image_fwd(&self.nodes[img.0].value, &self.nodes[coords.0].value);
        let g = self.ng(img) || self.ng(coords);
        self.push(value, g, Op::SampleImage { img, coords })
    }

    pub fn box_sum(&mut self, x: Var, j: usize) -> Var {
        assert!(j % 2 == 1 && j >= 3);
        let value = loss::box_sum_fwd(&self.nodes[x.0].value, j);
        let g = self.ng(x);
        self.push(value, g, Op::BoxSum(x, j))
    }

    pub fn diff_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = loss::diff_axis_fwd(&self.nodes[x.0].value, axis);
        let g = self.ng(x);
        self.push(value, g, Op::DiffAxis(x, axis))
    }

    pub fn scaling_penalty(&mut self, theta: Var, n: usize) -> Var {
        let th = &self.nodes[theta.0].value;
        assert_eq!(th.len(), n * (n + 1));
        let mut lin = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                lin[i * n + j] = th.data[i * (n + 1) + j].to_f64();
            }
        }
        let p: f64 = svd::svd_small(&lin, n)
            .sigma
            .iter()
            .map(|s| (s - 1.0).abs())
            .sum();
        let g = self.ng(theta);
        self.push(
            NdArray::scalar(T::from_f64(p)),
            g,
            Op::ScalingPenalty { theta, n },
        )
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> NdArray<T> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape, bv.shape, "elementwise shape mismatch");
        NdArray {
            shape: av.shape.clone(),
            data: av
                .data
                .iter()
                .zip(&bv.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node
    /// (None for nodes that do not require or receive gradient).
    pub fn backward(&self, loss: Var) -> Vec<Option<NdArray<T>>> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<NdArray<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(NdArray::scalar(T::ONE));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<NdArray<T>>], v: Var, add: impl FnOnce(&mut NdArray<T>)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(NdArray::zeros(&self.nodes[v.0].value.shape));
        }
        add(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, id: usize, gout: &NdArray<T>, grads: &mut [Option<NdArray<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |g| {
                    for (gd, &go) in g.data.iter_mut().zip(&gout.data) {
                        *gd += go;
                    }
                });
                self.accum(grads, *b, |g| {
                    for (gd, &go) in g.data.iter_mut().zip(&gout.data) {
                        *gd += go;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |g| {
                    for (gd, &go) in g.data.iter_mut().zip(&gout.data) {
                        *gd += go;
                    }
                });
                self.accum(grads, *b, |g| {
                    for (gd, &go) in g.data.iter_mut().zip(&gout.data) {
                        *gd -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accum(grads, *a, |g| {
                    for ((gd, &go), &y) in g.data.iter_mut().zip(&gout.data).zip(&bv.data) {
                        *gd += go * y;
                    }
                });
                self.accum(grads, *b, |g| {
                    for ((gd, &go), &x) in g.data.iter_mut().zip(&gout.data).zip(&av.data) {
                        *gd += go * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accum(grads, *a, |g| {
                    for ((gd, &go), &y) in g.data.iter_mut().zip(&gout.data).zip(&bv.data) {
                        *gd += go / y;
                    }
                });
                self.accum(grads, *b, |g| {
                    for (i, gd) in g.data.iter_mut().enumerate() {
                        let y = bv.data[i];
                        *gd -= gout.data[i] * av.data[i] / (y * y);
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, |g| {
                    for (gd, &go) in g.data.iter_mut().zip(&gout.data) {
                        *gd += go * c;
                    }
                });
            }
            Op::Offset(x, _) => {
                self.accum(grads, *x, |g| {
                    for (gd, &go) in g.data.iter_mut().zip(&gout.data) {
                        *gd += go;
                    }
                });
            }
            Op::Square(x) => {
                let xv = &self.nodes[x.0].value;
                let two = T::from_f64(2.0);
                self.accum(grads, *x, |g| {
                    for ((gd, &go), &v) in g.data.iter_mut().zip(&gout.data).zip(&xv.data) {
                        *gd += go * two * v;
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.nodes[x.0].value;
                let slope = *slope;
                self.accum(grads, *x, |g| {
                    for ((gd, &go), &v) in g.data.iter_mut().zip(&gout.data).zip(&xv.data) {
                        *gd += if v > T::ZERO { go } else { go * slope };
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                self.accum(grads, *x, |g| {
                    for ((gd, &go), &v) in g.data.iter_mut().zip(&gout.data).zip(&xv.data) {
                        if v > T::ZERO {
                            *gd += go;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let go = gout.data[0];
                self.accum(grads, *x, |g| {
                    for gd in g.data.iter_mut() {
                        *gd += go;
                    }
                });
            }
            Op::WeightedSumAll(x, w) => {
                let go = gout.data[0];
                self.accum(grads, *x, |g| {
                    for (gd, &wv) in g.data.iter_mut().zip(&w.data) {
                        *gd += go * wv;
                    }
                });
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, |g| {
                    for (gd, &go) in g.data.iter_mut().zip(&gout.data) {
                        *gd += go;
                    }
                });
            }
            Op::ConcatC(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.len();
                    self.accum(grads, v, |g| {
                        for (gd, &go) in g.data.iter_mut().zip(&gout.data[offset..offset + len]) {
                            *gd += go;
                        }
                    });
                    offset += len;
                }
            }
            Op::Conv {
                x,
                w,
                b,
                stride,
                col,
            } => {
                conv::conv_bwd(self, *x, *w, *b, *stride, col.as_deref(), gout, grads);
            }
            Op::Gap(x) => {
                let v = &self.nodes[x.0].value;
                let c = v.shape[0];
                let spatial: usize = v.shape[1..].iter().product();
                let inv = T::from_f64(1.0 / spatial as f64);
                self.accum(grads, *x, |g| {
                    for ch in 0..c {
                        let go = gout.data[ch] * inv;
                        for gd in &mut g.data[ch * spatial..(ch + 1) * spatial] {
                            *gd += go;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (out_dim, in_dim) = (wv.shape[0], wv.shape[1]);
                self.accum(grads, *b, |g| {
                    for (gd, &go) in g.data.iter_mut().zip(&gout.data) {
                        *gd += go;
                    }
                });
                self.accum(grads, *w, |g| {
                    for o in 0..out_dim {
                        let go = gout.data[o];
                        let row = &mut g.data[o * in_dim..(o + 1) * in_dim];
                        for (gd, &xi) in row.iter_mut().zip(&xv.data) {
                            *gd += go * xi;
                        }
                    }
                });
                self.accum(grads, *x, |g| {
                    for o in 0..out_dim {
                        let go = gout.data[o];
                        let row = &wv.data[o * in_dim..(o + 1) * in_dim];
                        for (gd, &wi) in g.data.iter_mut().zip(row) {
                            *gd += go * wi;
                        }
                    }
                });
            }
            Op::UpsampleNearest(x) => {
                let in_shape = self.nodes[x.0].value.shape.clone();
                self.accum(grads, *x, |g| {
                    conv::upsample_nearest_bwd(gout, &in_shape, g);
                });
            }
            Op::AffinePoints { theta, pts } => {
                sample::affine_points_bwd(self, *theta, *pts, gout, grads);
            }
            Op::SampleImage { img, coords } => {
                sample::sample_image_bwd(self, *img, *coords, gout, grads);
            }
            Op::BoxSum(x, j) => {
                let j = *j;
                self.accum(grads, *x, |g| {
                    let gb = loss::box_sum_fwd(gout, j);
                    for (gd, &go) in g.data.iter_mut().zip(&gb.data) {
                        *gd += go;
                    }
                });
            }
            Op::DiffAxis(x, axis) => {
                let shape = self.nodes[x.0].value.shape.clone();
                self.accum(grads, *x, |g| {
                    loss::diff_axis_bwd(gout, &shape, *axis, g);
                });
            }
            Op::ScalingPenalty { theta, n } => {
                let n = *n;
                let th = &self.nodes[theta.0].value;
                let mut lin = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        lin[i * n + j] = th.data[i * (n + 1) + j].to_f64();
                    }
                }
                let grad = svd::scaling_penalty_grad(&lin, n);
                let go = gout.data[0];
                self.accum(grads, *theta, |g| {
                    for i in 0..n {
                        for j in 0..n {
                            g.data[i * (n + 1) + j] += go * T::from_f64(grad[i * n + j]);
                        }
                    }
                });
            }
        }
    }
}
