//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns
//! gradients for every node that (transitively) depends on a leaf created
//! with `requires_grad = true`. Leaves created with `requires_grad = false`
//! are constants: gradients still flow *through* operations that consume
//! them, but never *into* them.

use std::cell::RefCell;
use std::sync::Arc;

use super::conv;
use super::params::ParamStore;
use super::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    /// Gradient by tape position (see [`Var::node_id`]).
    pub fn get_node(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: BackwardFn) -> Var<'_> {
        self.push_arc(Arc::new(value), parents, backward)
    }

    fn push_arc(&self, value: Arc<Tensor>, parents: Vec<usize>, backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var { id, graph: self }
    }

    fn leaf_arc(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var { id, graph: self }
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_arc(Arc::new(value), requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Bind every tensor of `store` as a leaf, in store order.
    pub fn bind(&self, store: &ParamStore, trainable: bool) -> Vec<Var<'_>> {
        store
            .arcs()
            .map(|t| self.leaf_arc(Arc::clone(t), trainable))
            .collect()
    }

    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward() needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
            let need: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &need);
            grads[id] = Some(g);
            for ((&p, pg), needed) in node.parents.iter().zip(parent_grads).zip(need) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn value(&self) -> Arc<Tensor> {
        Arc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Position of this node on the tape.
    pub fn node_id(&self) -> usize {
        self.id
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf_arc(self.value(), false)
    }

    fn unary(self, value: Tensor, backward: BackwardFn) -> Var<'g> {
        self.graph.push(value, vec![self.id], backward)
    }

    fn elementwise(
        self,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Var<'g> {
        // `df(x, y)` is dy/dx given input x and output y.
        let x = self.value();
        let y = Arc::new(x.map(f));
        let ys = Arc::clone(&y);
        self.graph.push_arc(
            y,
            vec![self.id],
            Box::new(move |g, _| {
                let mut out = g.clone();
                for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(ys.data()) {
                    *o *= df(xv, yv);
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(|g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(|g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                    need[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
                ]
            }),
        )
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x / y);
        self.graph.push(
            v,
            vec![self.id, other.id],
            Box::new(move |g, need| {
                let da = need[0].then(|| g.zip_map(&b, |gv, bv| gv / bv));
                let db = need[1].then(|| {
                    let mut out = g.clone();
                    for ((o, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *o *= -av / (bv * bv);
                    }
                    out
                });
                vec![da, db]
            }),
        )
    }

    pub fn scale(self, k: f32) -> Var<'g> {
        self.unary(
            self.value().map(|v| v * k),
            Box::new(move |g, _| vec![Some(g.map(|v| v * k))]),
        )
    }

    pub fn add_scalar(self, k: f32) -> Var<'g> {
        self.unary(
            self.value().map(|v| v + k),
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, c: &Tensor) -> Var<'g> {
        let c = Arc::new(c.clone());
        let v = self.value().zip_map(&c, |a, b| a * b);
        self.unary(
            v,
            Box::new(move |g, _| vec![Some(g.zip_map(&c, |a, b| a * b))]),
        )
    }

    pub fn abs(self) -> Var<'g> {
        self.elementwise(f32::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'g> {
        self.elementwise(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(self) -> Var<'g> {
        self.elementwise(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'g> {
        self.elementwise(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'g> {
        self.elementwise(f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.elementwise(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g> {
        self.elementwise(softplus, |x, _| stable_sigmoid(x))
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where clamped.
    pub fn ln_clamped(self, floor: f32) -> Var<'g> {
        self.elementwise(
            move |x| x.max(floor).ln(),
            move |x, _| if x > floor { 1.0 / x } else { 0.0 },
        )
    }

    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(
            Tensor::scalar(x.sum() as f32),
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(self) -> Var<'g> {
        let x = self.value();
        let n = x.numel() as f32;
        let shape = x.shape().to_vec();
        self.unary(
            Tensor::scalar(x.mean() as f32),
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))]),
        )
    }

    /// Sum over every axis except the leading one: `N×… → N`.
    pub fn sum_per_sample(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape[0];
        let per = x.numel() / n;
        let sums: Vec<f32> = x
            .data()
            .chunks(per)
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        self.unary(
            Tensor::new(&[n], sums),
            Box::new(move |g, _| {
                let mut out = Tensor::zeros(&shape);
                for (chunk, &gv) in out.data_mut().chunks_mut(per).zip(g.data()) {
                    chunk.fill(gv);
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn mean_per_sample(self) -> Var<'g> {
        let shape = self.shape();
        let per = shape[1..].iter().product::<usize>() as f32;
        self.sum_per_sample().scale(1.0 / per)
    }

    /// Mean over the spatial axes: `N×C×H×W → N×C`.
    pub fn mean_spatial(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let means: Vec<f32> = x
            .data()
            .chunks(plane)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        self.unary(
            Tensor::new(&[n, c], means),
            Box::new(move |g, _| {
                let mut out = Tensor::zeros(&[n, c, h, w]);
                for (chunk, &gv) in out.data_mut().chunks_mut(plane).zip(g.data()) {
                    chunk.fill(gv / plane as f32);
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let old = self.shape();
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, Box::new(move |g, _| vec![Some(g.clone().reshape(&old))]))
    }

    pub fn conv2d(self, w: Var<'g>, b: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let (xv, wv) = (self.value(), w.value());
        let out = conv::conv2d(&xv, &wv, b.map(|b| b.value()).as_deref(), stride, pad);
        let mut parents = vec![self.id, w.id];
        parents.extend(b.map(|b| b.id));
        self.graph.push(
            out,
            parents,
            Box::new(move |g, need| {
                let nb = need.get(2).copied().unwrap_or(false);
                let r = conv::conv2d_backward(&xv, &wv, g, stride, pad, [need[0], need[1], nb]);
                vec![r.dx, r.dw, r.db]
            }),
        )
    }

    pub fn conv_transpose2d(
        self,
        w: Var<'g>,
        b: Option<Var<'g>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var<'g> {
        let (xv, wv) = (self.value(), w.value());
        let out = conv::conv_transpose2d(
            &xv,
            &wv,
            b.map(|b| b.value()).as_deref(),
            stride,
            pad,
            out_pad,
        );
        let mut parents = vec![self.id, w.id];
        parents.extend(b.map(|b| b.id));
        self.graph.push(
            out,
            parents,
            Box::new(move |g, need| {
                let nb = need.get(2).copied().unwrap_or(false);
                let r = conv::conv_transpose2d_backward(
                    &xv,
                    &wv,
                    g,
                    stride,
                    pad,
                    [need[0], need[1], nb],
                );
                vec![r.dx, r.dw, r.db]
            }),
        )
    }

    /// Reflection padding of the two spatial axes (edge pixel not repeated).
    pub fn reflect_pad(self, p: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(p < h && p < w, "reflection pad {p} too large for {h}x{w}");
        let (oh, ow) = (h + 2 * p, w + 2 * p);
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let j = if i < 0 {
                -i
            } else if i >= len {
                2 * len - 2 - i
            } else {
                i
            };
            j as usize
        };
        let rows: Vec<usize> = (0..oh)
            .map(|i| reflect(i as isize - p as isize, h))
            .collect();
        let cols: Vec<usize> = (0..ow)
            .map(|i| reflect(i as isize - p as isize, w))
            .collect();
        let mut out = vec![0f32; n * c * oh * ow];
        for (plane, src) in out.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
            for (oy, &iy) in rows.iter().enumerate() {
                let srow = &src[iy * w..(iy + 1) * w];
                for (d, &ix) in plane[oy * ow..(oy + 1) * ow].iter_mut().zip(&cols) {
                    *d = srow[ix];
                }
            }
        }
        self.unary(
            Tensor::new(&[n, c, oh, ow], out),
            Box::new(move |g, _| {
                let mut dx = vec![0f32; n * c * h * w];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for (oy, &iy) in rows.iter().enumerate() {
                        for (ox, &ix) in cols.iter().enumerate() {
                            dplane[iy * w + ix] += gplane[oy * ow + ox];
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance
    /// (no affine parameters).
    pub fn instance_norm(self, eps: f32) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut xhat = vec![0f32; x.numel()];
        let mut inv_std = vec![0f32; n * c];
        for ((src, dst), istd) in x
            .data()
            .chunks(plane)
            .zip(xhat.chunks_mut(plane))
            .zip(inv_std.iter_mut())
        {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            *istd = is as f32;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ((s as f64 - mean) * is) as f32;
            }
        }
        let y = Arc::new(Tensor::new(&[n, c, h, w], xhat));
        let ys = Arc::clone(&y);
        self.graph.push_arc(
            y,
            vec![self.id],
            Box::new(move |g, _| {
                let mut dx = vec![0f32; g.numel()];
                let planes = g.data().chunks(plane).zip(ys.data().chunks(plane));
                for (((gp, yp), dp), &is) in planes.zip(dx.chunks_mut(plane)).zip(&inv_std) {
                    let mg = gp.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                    let mgy = gp
                        .iter()
                        .zip(yp)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        / plane as f64;
                    for ((d, &gv), &yv) in dp.iter_mut().zip(gp).zip(yp) {
                        *d = ((gv as f64 - mg - yv as f64 * mgy) * is as f64) as f32;
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx))]
            }),
        )
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0f32; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = src[best];
                    arg[o] = p * h * w + best;
                }
            }
        }
        self.unary(
            Tensor::new(&[n, c, oh, ow], out),
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    dx.data_mut()[a] += gv;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shape mismatch");
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for s in 0..n {
            out.extend_from_slice(&a.data()[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&b.data()[s * pb..(s + 1) * pb]);
        }
        self.graph.push(
            Tensor::new(&[n, ca + cb, h, w], out),
            vec![self.id, other.id],
            Box::new(move |g, need| {
                let split = |first: bool| {
                    let (off, len) = if first { (0, pa) } else { (pa, pb) };
                    let mut d = Vec::with_capacity(n * len);
                    for s in 0..n {
                        let base = s * (pa + pb) + off;
                        d.extend_from_slice(&g.data()[base..base + len]);
                    }
                    Tensor::new(&[n, if first { ca } else { cb }, h, w], d)
                };
                vec![need[0].then(|| split(true)), need[1].then(|| split(false))]
            }),
        )
    }

    /// Channel `ch` of an `N×C×H×W` tensor, as `N×1×H×W`.
    pub fn select_channel(self, ch: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(ch < c);
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        for s in 0..n {
            let off = (s * c + ch) * plane;
            out.extend_from_slice(&x.data()[off..off + plane]);
        }
        self.unary(
            Tensor::new(&[n, 1, h, w], out),
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for s in 0..n {
                    let off = (s * c + ch) * plane;
                    dx.data_mut()[off..off + plane]
                        .copy_from_slice(&g.data()[s * plane..(s + 1) * plane]);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(self) -> Var<'g> {
        let x = self.value();
        let y = Arc::new(softmax_channels(&x));
        let ys = Arc::clone(&y);
        self.graph.push_arc(
            y,
            vec![self.id],
            Box::new(move |g, _| {
                let (n, c, h, w) = ys.dims4();
                let plane = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for s in 0..n {
                    let base = s * c * plane;
                    for p in 0..plane {
                        let dot: f32 = (0..c)
                            .map(|k| {
                                g.data()[base + k * plane + p] * ys.data()[base + k * plane + p]
                            })
                            .sum();
                        for k in 0..c {
                            let i = base + k * plane + p;
                            dx.data_mut()[i] = ys.data()[i] * (g.data()[i] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Log-softmax across the channel axis at every pixel.
    pub fn log_softmax_channels(self) -> Var<'g> {
        let x = self.value();
        let sm = Arc::new(softmax_channels(&x));
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        for s in 0..n {
            let base = s * c * plane;
            for p in 0..plane {
                let m = (0..c)
                    .map(|k| x.data()[base + k * plane + p])
                    .fold(f32::NEG_INFINITY, f32::max);
                let lse = m
                    + (0..c)
                        .map(|k| (x.data()[base + k * plane + p] - m).exp())
                        .sum::<f32>()
                        .ln();
                for k in 0..c {
                    out.data_mut()[base + k * plane + p] = x.data()[base + k * plane + p] - lse;
                }
            }
        }
        self.unary(
            out,
            Box::new(move |g, _| {
                let mut dx = g.clone();
                for s in 0..n {
                    let base = s * c * plane;
                    for p in 0..plane {
                        let gs: f32 = (0..c).map(|k| g.data()[base + k * plane + p]).sum();
                        for k in 0..c {
                            let i = base + k * plane + p;
                            dx.data_mut()[i] -= sm.data()[i] * gs;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

pub(crate) fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for s in 0..n {
        let base = s * c * plane;
        for p in 0..plane {
            let m = (0..c)
                .map(|k| x.data()[base + k * plane + p])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (x.data()[base + k * plane + p] - m).exp();
                out.data_mut()[base + k * plane + p] = e;
                z += e;
            }
            for k in 0..c {
                out.data_mut()[base + k * plane + p] /= z;
            }
        }
    }
    out
}
