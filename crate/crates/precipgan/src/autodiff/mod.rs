//! Minimal reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a per-step tape: forward values are computed eagerly as
//! nodes are pushed, `backward` walks the tape in reverse, and parameter
//! gradients are exported into the owning [`ParamStore`](crate::nn::ParamStore)
//! afterwards. The op set is exactly what the generator/discriminator pair
//! needs; everything runs single-threaded and deterministically, which is
//! what makes bit-identical training reruns and checkpoint resume possible.
//!
//! Spectral weight normalization is a first-class op: the power-iteration
//! vectors are held constant within a step, for which the closed-form
//! gradient `dW = (g - (g . What) u v^T) / sigma` is exact.

pub mod conv;

use ndarray::{Array1, Array4, ArrayD, ArrayViewD, Ix4, IxDyn};

use crate::nn::{ParamId, ParamStore};

pub type NodeId = usize;

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    SpectralNorm {
        w: NodeId,
        u: Array1<f64>,
        v: Array1<f64>,
        sigma: f64,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulChannel {
        x: NodeId,
        scale: NodeId,
    },
    AffineScalar {
        x: NodeId,
        mul: f64,
        add: f64,
    },
    BatchNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    NearestResize {
        x: NodeId,
        in_h: usize,
        in_w: usize,
    },
    AvgPool2(NodeId),
    ConcatChannels(Vec<NodeId>),
    Abs(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Epsilon inside normalization square roots.
pub const NORM_EPS: f64 = 1e-5;
/// Guard against division by a vanishing spectral norm.
const SIGMA_FLOOR: f64 = 1e-12;

pub struct Graph {
    nodes: Vec<Node>,
    /// Power iteration runs (and buffers update) only in train mode.
    pub train_mode: bool,
    param_cache: std::collections::HashMap<(ParamId, bool), NodeId>,
    sn_cache: std::collections::HashMap<NodeId, NodeId>,
}

impl Graph {
    pub fn new(train_mode: bool) -> Graph {
        Graph {
            nodes: Vec::with_capacity(256),
            train_mode,
            param_cache: std::collections::HashMap::new(),
            sn_cache: std::collections::HashMap::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        *self.nodes[id].value.iter().next().unwrap()
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.nodes[id].grad.as_ref()
    }

    fn value4(&self, id: NodeId) -> ndarray::ArrayView4<'_, f64> {
        self.nodes[id]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected a 4D tensor")
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn constant4(&mut self, value: Array4<f64>) -> NodeId {
        self.push(value.into_dyn(), false, Op::Leaf)
    }

    /// Trainable parameter leaf (cached per graph; reuse accumulates
    /// gradients correctly through the shared node).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.param_node(store, id, true)
    }

    /// Parameter used as a constant (e.g. discriminator weights inside the
    /// generator update): gradients flow through it but are not exported.
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.param_node(store, id, false)
    }

    fn param_node(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> NodeId {
        if let Some(&n) = self.param_cache.get(&(id, trainable)) {
            return n;
        }
        let value = store.value(id).clone();
        let node = if trainable {
            self.push(value, true, Op::Param(id))
        } else {
            self.push(value, false, Op::Leaf)
        };
        self.param_cache.insert((id, trainable), node);
        node
    }

    /// Spectrally normalized weight `w / sigma`, with `sigma = |W^T u|` for
    /// the supplied left vector `u` (held constant within the step). Cached
    /// per weight node so repeated layer applications share one node.
    pub fn spectral_norm(&mut self, w: NodeId, u: &[f64]) -> NodeId {
        if let Some(&n) = self.sn_cache.get(&w) {
            return n;
        }
        let wv = &self.nodes[w].value;
        let cout = wv.shape()[0];
        let rest: usize = wv.len() / cout;
        debug_assert_eq!(u.len(), cout);
        let ws = wv.as_slice().expect("weight must be contiguous");

        // v = normalize(W^T u); sigma = |W^T u|.
        let mut v = vec![0.0; rest];
        for o in 0..cout {
            let row = &ws[o * rest..(o + 1) * rest];
            let uo = u[o];
            for (vj, wj) in v.iter_mut().zip(row) {
                *vj += uo * wj;
            }
        }
        let sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(SIGMA_FLOOR);
        for vj in v.iter_mut() {
            *vj /= sigma;
        }

        let value = wv.mapv(|x| x / sigma);
        let needs = self.nodes[w].needs_grad;
        let node = self.push(
            value,
            needs,
            Op::SpectralNorm {
                w,
                u: Array1::from_vec(u.to_vec()),
                v: Array1::from_vec(v),
                sigma,
            },
        );
        self.sn_cache.insert(w, node);
        node
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let b_arr = bias.map(|b| {
            self.nodes[b]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("bias must be 1D")
                .to_owned()
        });
        let out = conv::conv2d_forward(&self.value4(x), &self.value4(w), b_arr.as_ref(), stride, pad);
        let needs = self.nodes[x].needs_grad
            || self.nodes[w].needs_grad
            || bias.is_some_and(|b| self.nodes[b].needs_grad);
        self.push(
            out.into_dyn(),
            needs,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.nodes[x].needs_grad;
        self.push(value, needs, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let needs = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(value, needs, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let value = &self.nodes[a].value * &self.nodes[b].value;
        let needs = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(value, needs, Op::Mul(a, b))
    }

    /// Broadcast multiply of a `(n, c, h, w)` tensor by a per-channel
    /// scale of shape `(c,)`.
    pub fn mul_channel(&mut self, x: NodeId, scale: NodeId) -> NodeId {
        let xs = self.value4(x);
        let (n, c, h, w) = xs.dim();
        let sc = &self.nodes[scale].value;
        assert_eq!(sc.len(), c, "per-channel scale length mismatch");
        let mut value = xs.to_owned();
        {
            let s = sc.as_slice().unwrap();
            let vs = value.as_slice_mut().unwrap();
            let plane = h * w;
            for i in 0..n {
                for ch in 0..c {
                    let factor = s[ch];
                    for v in vs[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter_mut() {
                        *v *= factor;
                    }
                }
            }
        }
        let needs = self.nodes[x].needs_grad || self.nodes[scale].needs_grad;
        self.push(value.into_dyn(), needs, Op::MulChannel { x, scale })
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| mul * v + add);
        let needs = self.nodes[x].needs_grad;
        self.push(value, needs, Op::AffineScalar { x, mul, add })
    }

    /// Parameter-free batch normalization: per channel over `(n, h, w)`.
    pub fn batch_norm(&mut self, x: NodeId) -> NodeId {
        let xs = self.value4(x);
        let (n, c, h, w) = xs.dim();
        let plane = h * w;
        let count = (n * plane) as f64;
        let x_slice = xs.as_slice().unwrap();
        let mut value = vec![0.0; n * c * plane];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for i in 0..n {
                for v in &x_slice[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let mean = sum / count;
            let var = (sum_sq / count - mean * mean).max(0.0);
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let src = &x_slice[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                let dst = &mut value[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = (s - mean) * is;
                }
            }
        }
        let needs = self.nodes[x].needs_grad;
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), value).unwrap();
        self.push(value, needs, Op::BatchNorm { x, inv_std })
    }

    /// Parameter-free instance normalization: per `(n, c)` over `(h, w)`.
    pub fn instance_norm(&mut self, x: NodeId) -> NodeId {
        let xs = self.value4(x);
        let (n, c, h, w) = xs.dim();
        let plane = h * w;
        let count = plane as f64;
        let x_slice = xs.as_slice().unwrap();
        let mut value = vec![0.0; n * c * plane];
        let mut inv_std = vec![0.0; n * c];
        for i in 0..n * c {
            let src = &x_slice[i * plane..(i + 1) * plane];
            let sum: f64 = src.iter().sum();
            let sum_sq: f64 = src.iter().map(|v| v * v).sum();
            let mean = sum / count;
            let var = (sum_sq / count - mean * mean).max(0.0);
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[i] = is;
            let dst = &mut value[i * plane..(i + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let needs = self.nodes[x].needs_grad;
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), value).unwrap();
        self.push(value, needs, Op::InstanceNorm { x, inv_std })
    }

    /// Nearest-neighbor resize to `(out_h, out_w)`: source index
    /// `floor(i * in / out)`. Covers both the exact x2 pyramid steps and the
    /// snap between non-power-of-two full resolution and the level-1 grid.
    pub fn nearest_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let xs = self.value4(x);
        let (n, c, in_h, in_w) = xs.dim();
        if (in_h, in_w) == (out_h, out_w) {
            return x;
        }
        let x_slice = xs.as_slice().unwrap();
        let mut value = vec![0.0; n * c * out_h * out_w];
        let row_map: Vec<usize> = (0..out_h).map(|i| i * in_h / out_h).collect();
        let col_map: Vec<usize> = (0..out_w).map(|j| j * in_w / out_w).collect();
        for p in 0..n * c {
            let src = &x_slice[p * in_h * in_w..(p + 1) * in_h * in_w];
            let dst = &mut value[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &iy) in row_map.iter().enumerate() {
                let src_row = &src[iy * in_w..(iy + 1) * in_w];
                let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                for (d, &ix) in dst_row.iter_mut().zip(col_map.iter()) {
                    *d = src_row[ix];
                }
            }
        }
        let needs = self.nodes[x].needs_grad;
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, out_h, out_w]), value).unwrap();
        self.push(value, needs, Op::NearestResize { x, in_h, in_w })
    }

    /// Non-overlapping 2x2 mean pooling (spatial dims must be even).
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xs = self.value4(x);
        let (n, c, h, w) = xs.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let x_slice = xs.as_slice().unwrap();
        let mut value = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x_slice[p * h * w..(p + 1) * h * w];
            let dst = &mut value[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
                let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
                for ox in 0..ow {
                    dst[oy * ow + ox] =
                        0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
                }
            }
        }
        let needs = self.nodes[x].needs_grad;
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), value).unwrap();
        self.push(value, needs, Op::AvgPool2(x))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value4(parts[0]).dim();
        let c_total: usize = parts.iter().map(|&p| self.value4(p).dim().1).sum();
        let mut value = ArrayD::zeros(IxDyn(&[n, c_total, h, w]));
        let mut offset = 0usize;
        for &p in parts {
            let pv = self.value4(p);
            let (pn, pc, ph, pw) = pv.dim();
            assert_eq!((pn, ph, pw), (n, h, w), "concat spatial/batch mismatch");
            value
                .slice_mut(ndarray::s![.., offset..offset + pc, .., ..])
                .assign(&pv);
            offset += pc;
        }
        let needs = parts.iter().any(|&p| self.nodes[p].needs_grad);
        self.push(value, needs, Op::ConcatChannels(parts.to_vec()))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(f64::abs);
        let needs = self.nodes[x].needs_grad;
        self.push(value, needs, Op::Abs(x))
    }

    /// Mean over all elements; result is a 0-d tensor.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len() as f64;
        let mean = self.nodes[x].value.iter().sum::<f64>() / n;
        let needs = self.nodes[x].needs_grad;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), mean),
            needs,
            Op::MeanAll(x),
        )
    }

    /// `mean(|a - b|)` as a 0-d tensor.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let neg_b = self.affine(b, -1.0, 0.0);
        let diff = self.add(a, neg_b);
        let ad = self.abs(diff);
        self.mean_all(ad)
    }

    fn add_grad(&mut self, id: NodeId, delta: ArrayViewD<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match self.nodes[id].grad.as_mut() {
            Some(g) => *g += &delta,
            None => self.nodes[id].grad = Some(delta.to_owned()),
        }
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        assert!(self.nodes[loss].needs_grad, "loss does not depend on any parameter");
        let shape = self.nodes[loss].value.raw_dim();
        self.nodes[loss].grad = Some(ArrayD::from_elem(shape, 1.0));

        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let grad = self.nodes[id].grad.clone().unwrap();
            self.backward_node(id, grad);
        }
    }

    fn backward_node(&mut self, id: NodeId, grad: ArrayD<f64>) {
        // Ops are matched by moving the context out temporarily to appease
        // the borrow checker; Leaf/Param have nothing to do.
        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let need_dx = self.nodes[x].needs_grad;
                let need_dw = self.nodes[w].needs_grad;
                let need_db = bias.is_some_and(|b| self.nodes[b].needs_grad);
                let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                let grads = conv::conv2d_backward(
                    &self.value4(x),
                    &self.value4(w),
                    &g4,
                    stride,
                    pad,
                    need_dx,
                    need_dw,
                    need_db,
                );
                if let Some(dx) = grads.dx {
                    self.add_grad(x, dx.into_dyn().view());
                }
                if let Some(dw) = grads.dw {
                    self.add_grad(w, dw.into_dyn().view());
                }
                if let (Some(db), Some(b)) = (grads.db, bias) {
                    self.add_grad(b, db.into_dyn().view());
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let (w, sigma) = (*w, *sigma);
                // dW = (g - <g, What> u v^T) / sigma with u, v constant.
                let what = &self.nodes[id].value;
                let dot: f64 = grad.iter().zip(what.iter()).map(|(a, b)| a * b).sum();
                let cout = u.len();
                let rest = v.len();
                let mut dw = grad.clone();
                {
                    let ds = dw.as_slice_mut().unwrap();
                    for o in 0..cout {
                        let uo = u[o];
                        let row = &mut ds[o * rest..(o + 1) * rest];
                        for (r, vj) in row.iter_mut().zip(v.iter()) {
                            *r = (*r - dot * uo * vj) / sigma;
                        }
                    }
                }
                self.add_grad(w, dw.view());
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = &self.nodes[x].value;
                let mut dx = grad;
                for (d, &v) in dx.iter_mut().zip(xv.iter()) {
                    if v <= 0.0 {
                        *d *= slope;
                    }
                }
                self.add_grad(x, dx.view());
            }
            &Op::Add(a, b) => {
                self.add_grad(a, grad.view());
                self.add_grad(b, grad.view());
            }
            &Op::Mul(a, b) => {
                let da = &grad * &self.nodes[b].value;
                let db = &grad * &self.nodes[a].value;
                self.add_grad(a, da.view());
                self.add_grad(b, db.view());
            }
            &Op::MulChannel { x, scale } => {
                let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w_) = g4.dim();
                let plane = h * w_;
                let gs = g4.as_slice().unwrap();
                let sc = self.nodes[scale].value.as_slice().unwrap().to_vec();
                if self.nodes[x].needs_grad {
                    let mut dx = grad.clone();
                    let ds = dx.as_slice_mut().unwrap();
                    for i in 0..n {
                        for ch in 0..c {
                            let f = sc[ch];
                            for v in ds[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter_mut()
                            {
                                *v *= f;
                            }
                        }
                    }
                    self.add_grad(x, dx.view());
                }
                if self.nodes[scale].needs_grad {
                    let xv = self.nodes[x].value.as_slice().unwrap();
                    let mut dscale = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            let mut acc = 0.0;
                            for k in 0..plane {
                                acc += gs[base + k] * xv[base + k];
                            }
                            dscale[ch] += acc;
                        }
                    }
                    let dscale = ArrayD::from_shape_vec(IxDyn(&[c]), dscale).unwrap();
                    self.add_grad(scale, dscale.view());
                }
            }
            &Op::AffineScalar { x, mul, .. } => {
                let dx = grad.mapv(|g| g * mul);
                self.add_grad(x, dx.view());
            }
            Op::BatchNorm { x, inv_std } => {
                let x = *x;
                let inv_std = inv_std.clone();
                let y = self.nodes[id].value.clone();
                let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w_) = g4.dim();
                let plane = h * w_;
                let count = (n * plane) as f64;
                let gs = g4.as_slice().unwrap();
                let ys = y.as_slice().unwrap();
                let mut dx = vec![0.0; n * c * plane];
                for ch in 0..c {
                    let mut mean_g = 0.0;
                    let mut mean_gy = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for k in 0..plane {
                            mean_g += gs[base + k];
                            mean_gy += gs[base + k] * ys[base + k];
                        }
                    }
                    mean_g /= count;
                    mean_gy /= count;
                    let is = inv_std[ch];
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for k in 0..plane {
                            dx[base + k] =
                                is * (gs[base + k] - mean_g - ys[base + k] * mean_gy);
                        }
                    }
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w_]), dx).unwrap();
                self.add_grad(x, dx.view());
            }
            Op::InstanceNorm { x, inv_std } => {
                let x = *x;
                let inv_std = inv_std.clone();
                let y = self.nodes[id].value.clone();
                let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w_) = g4.dim();
                let plane = h * w_;
                let count = plane as f64;
                let gs = g4.as_slice().unwrap();
                let ys = y.as_slice().unwrap();
                let mut dx = vec![0.0; n * c * plane];
                for p in 0..n * c {
                    let base = p * plane;
                    let mut mean_g = 0.0;
                    let mut mean_gy = 0.0;
                    for k in 0..plane {
                        mean_g += gs[base + k];
                        mean_gy += gs[base + k] * ys[base + k];
                    }
                    mean_g /= count;
                    mean_gy /= count;
                    let is = inv_std[p];
                    for k in 0..plane {
                        dx[base + k] = is * (gs[base + k] - mean_g - ys[base + k] * mean_gy);
                    }
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w_]), dx).unwrap();
                self.add_grad(x, dx.view());
            }
            &Op::NearestResize { x, in_h, in_w } => {
                let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, oh, ow) = g4.dim();
                let gs = g4.as_slice().unwrap();
                let row_map: Vec<usize> = (0..oh).map(|i| i * in_h / oh).collect();
                let col_map: Vec<usize> = (0..ow).map(|j| j * in_w / ow).collect();
                let mut dx = vec![0.0; n * c * in_h * in_w];
                for p in 0..n * c {
                    let src = &gs[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
                    for (oy, &iy) in row_map.iter().enumerate() {
                        for (ox, &ix) in col_map.iter().enumerate() {
                            dst[iy * in_w + ix] += src[oy * ow + ox];
                        }
                    }
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&[n, c, in_h, in_w]), dx).unwrap();
                self.add_grad(x, dx.view());
            }
            &Op::AvgPool2(x) => {
                let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, oh, ow) = g4.dim();
                let gs = g4.as_slice().unwrap();
                let (h, w_) = (oh * 2, ow * 2);
                let mut dx = vec![0.0; n * c * h * w_];
                for p in 0..n * c {
                    let src = &gs[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx[p * h * w_..(p + 1) * h * w_];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = 0.25 * src[oy * ow + ox];
                            dst[2 * oy * w_ + 2 * ox] += g;
                            dst[2 * oy * w_ + 2 * ox + 1] += g;
                            dst[(2 * oy + 1) * w_ + 2 * ox] += g;
                            dst[(2 * oy + 1) * w_ + 2 * ox + 1] += g;
                        }
                    }
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w_]), dx).unwrap();
                self.add_grad(x, dx.view());
            }
            Op::ConcatChannels(parts) => {
                let parts = parts.clone();
                let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut offset = 0usize;
                for p in parts {
                    let pc = self.value4(p).dim().1;
                    let slice = g4
                        .slice(ndarray::s![.., offset..offset + pc, .., ..])
                        .to_owned();
                    self.add_grad(p, slice.into_dyn().view());
                    offset += pc;
                }
            }
            &Op::Abs(x) => {
                let xv = &self.nodes[x].value;
                let mut dx = grad;
                for (d, &v) in dx.iter_mut().zip(xv.iter()) {
                    *d *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                self.add_grad(x, dx.view());
            }
            &Op::MeanAll(x) => {
                let n = self.nodes[x].value.len() as f64;
                let g = *grad.iter().next().unwrap() / n;
                let shape = self.nodes[x].value.raw_dim();
                let dx = ArrayD::from_elem(shape, g);
                self.add_grad(x, dx.view());
            }
        }
    }

    /// Adds accumulated parameter gradients into the store.
    pub fn export_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Op::Param(pid), Some(grad)) = (&node.op, &node.grad) {
                store.accumulate_grad(*pid, grad);
            }
        }
    }
}

/// One power-iteration step for the spectral norm buffers:
/// `v = normalize(W^T u)`, `u' = normalize(W v)`. Returns the new `u`.
pub fn power_iteration(weight: &ArrayD<f64>, u: &[f64]) -> Vec<f64> {
    let cout = weight.shape()[0];
    let rest = weight.len() / cout;
    let ws = weight.as_slice().expect("weight must be contiguous");
    let mut v = vec![0.0; rest];
    for o in 0..cout {
        let row = &ws[o * rest..(o + 1) * rest];
        let uo = u[o];
        for (vj, wj) in v.iter_mut().zip(row) {
            *vj += uo * wj;
        }
    }
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(SIGMA_FLOOR);
    for vj in v.iter_mut() {
        *vj /= vn;
    }
    let mut u_new = vec![0.0; cout];
    for (o, un) in u_new.iter_mut().enumerate() {
        let row = &ws[o * rest..(o + 1) * rest];
        *un = row.iter().zip(v.iter()).map(|(w, v)| w * v).sum();
    }
    let un = u_new.iter().map(|x| x * x).sum::<f64>().sqrt().max(SIGMA_FLOOR);
    for x in u_new.iter_mut() {
        *x /= un;
    }
    u_new
}
