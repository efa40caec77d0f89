//! Define-by-run reverse-mode autodiff over the fixed operator set the
//! dynamics model and planner need: linear, conv2d, nonlinearity, concat,
//! reshape, bilinear warps/upsampling, spatial gradient, elementwise ops and
//! MSE reduction.
//!
//! Every op evaluates eagerly on construction; `backward` walks the tape in
//! reverse. Gradients flow to values *and*, for the warp ops, to the pose
//! parameters through the bilinear sample coordinates, which is what lets
//! the planner differentiate an objective with respect to action parameters.

use serde::{Deserialize, Serialize};

use crate::field::{warp_field_to_patch_coords, PatchGeometry, Pose};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Silu,
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    /// (x[n], w[m,n], b[m]) -> [m]
    Linear,
    /// (x[C,H,W], w[O,C,k,k], b[O]) -> [O,H,W], stride 1, zero pad k/2
    Conv2d,
    Act(Nonlinearity),
    /// N inputs [Ci,H,W] -> [sum Ci, H, W]
    ConcatChannels,
    Reshape,
    /// [C,h,w] -> [C,H,W], align-corners bilinear
    Upsample,
    /// [H,W] -> [2,H,W]: central differences times `factor`, one-sided at borders
    Grad2d { factor: f64 },
    /// (field[H,W], pose[3]) -> [P,P]; border-replicated sampling
    WarpToPatch { geom: PatchGeometry },
    /// (patch[P,P], pose[3]) -> [H,W]; zero outside the patch footprint
    WarpToField { geom: PatchGeometry },
    Add,
    Sub,
    Scale { k: f64 },
    /// out[i] = in[idx[i]] * scale[i] + offset[i]; the offset is baked
    /// into the forward value and does not affect the adjoint.
    AffineSelect { idx: Vec<usize>, scale: Vec<f64> },
    /// (a, b) -> scalar mean((a-b)^2)
    Mse,
    /// scalar inputs -> sum w_i * x_i
    WeightedSum { weights: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Forward by-products reused by backward when caching is on.
    aux: Aux,
}

enum Aux {
    None,
    /// im2col matrix of a conv input.
    Cols(Vec<f64>),
    /// Sigmoid (silu) or tanh values of an activation input.
    Act(Vec<f64>),
}

/// Accumulated gradients, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    cache_backward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps conv im2col matrices and activation by-products alive for the
    /// backward pass. Worth it for small per-sample training graphs; long
    /// rollouts should stay on the recompute path to bound memory.
    pub fn with_backward_cache() -> Self {
        Self {
            nodes: Vec::new(),
            cache_backward: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.push_aux(op, inputs, value, Aux::None)
    }

    fn push_aux(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, aux: Aux) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        debug_assert_eq!(xv.len(), n);
        debug_assert_eq!(bv.len(), m);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wv.data()[i * n..(i + 1) * n];
            let mut acc = bv.data()[i];
            for (wk, xk) in row.iter().zip(xv.data()) {
                acc += wk * xk;
            }
            out[i] = acc;
        }
        self.push(
            Op::Linear,
            vec![x, w, b],
            Tensor::new(vec![m], out).expect("shape"),
        )
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (c, h, wd) = chw(xv);
        let o = wv.shape()[0];
        let k = wv.shape()[2];
        debug_assert_eq!(wv.shape()[1], c);
        debug_assert_eq!(wv.shape()[3], k);
        debug_assert_eq!(bv.len(), o);
        let pad = k / 2;
        let mut cols = vec![0.0; c * k * k * h * wd];
        im2col(xv.data(), c, h, wd, k, pad, &mut cols);
        let value = conv2d_from_cols(&cols, h, wd, wv.data(), o, c * k * k, bv.data());
        let aux = if self.cache_backward {
            Aux::Cols(cols)
        } else {
            Aux::None
        };
        self.push_aux(
            Op::Conv2d,
            vec![x, w, b],
            Tensor::new(vec![o, h, wd], value).expect("shape"),
            aux,
        )
    }

    pub fn activation(&mut self, x: NodeId, kind: Nonlinearity) -> NodeId {
        let xv = self.value(x).data();
        let n = xv.len();
        let mut out = vec![0.0; n];
        let mut inner = if self.cache_backward && !matches!(kind, Nonlinearity::Relu) {
            vec![0.0; n]
        } else {
            Vec::new()
        };
        match kind {
            Nonlinearity::Silu => {
                for i in 0..n {
                    let s = 1.0 / (1.0 + (-xv[i]).exp());
                    out[i] = xv[i] * s;
                    if !inner.is_empty() {
                        inner[i] = s;
                    }
                }
            }
            Nonlinearity::Relu => {
                for i in 0..n {
                    out[i] = xv[i].max(0.0);
                }
            }
            Nonlinearity::Tanh => {
                for i in 0..n {
                    let t = xv[i].tanh();
                    out[i] = t;
                    if !inner.is_empty() {
                        inner[i] = t;
                    }
                }
            }
        }
        let aux = if inner.is_empty() {
            Aux::None
        } else {
            Aux::Act(inner)
        };
        let shape = self.value(x).shape().to_vec();
        self.push_aux(
            Op::Act(kind),
            vec![x],
            Tensor::new(shape, out).expect("shape"),
            aux,
        )
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, h, w) = chw(self.value(parts[0]));
        let mut total_c = 0;
        for &p in parts {
            let (c, ph, pw) = chw(self.value(p));
            assert_eq!((ph, pw), (h, w), "concat spatial dims");
            total_c += c;
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Op::ConcatChannels,
            parts.to_vec(),
            Tensor::new(vec![total_c, h, w], data).expect("shape"),
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let value = self.value(x).reshaped(shape).expect("element count");
        self.push(Op::Reshape, vec![x], value)
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let (c, h, w) = chw(self.value(x));
        let mut out = vec![0.0; c * out_h * out_w];
        let data = self.value(x).data();
        for ch in 0..c {
            let src = &data[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for oy in 0..out_h {
                let sy = grid_coord(oy, out_h, h);
                for ox in 0..out_w {
                    let sx = grid_coord(ox, out_w, w);
                    dst[oy * out_w + ox] =
                        crate::field::sample_bilinear_clamped(src, w, h, sx, sy);
                }
            }
        }
        self.push(
            Op::Upsample,
            vec![x],
            Tensor::new(vec![c, out_h, out_w], out).expect("shape"),
        )
    }

    /// `factor` scales the raw central differences (per cell index); pass
    /// `1/cell_size` for physical slopes.
    pub fn grad2d(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let (h, w) = match shape.as_slice() {
            [h, w] => (*h, *w),
            [1, h, w] => (*h, *w),
            other => panic!("grad2d expects [H,W], got {other:?}"),
        };
        let mut dx = vec![0.0; h * w];
        let mut dy = vec![0.0; h * w];
        crate::field::gradient_into(self.value(x).data(), w, h, 1.0 / factor, &mut dx, &mut dy);
        let mut data = dx;
        data.extend_from_slice(&dy);
        self.push(
            Op::Grad2d { factor },
            vec![x],
            Tensor::new(vec![2, h, w], data).expect("shape"),
        )
    }

    /// Pose tensor layout: `[start_x_cells, start_y_cells, theta]`.
    pub fn warp_to_patch(&mut self, field: NodeId, pose: NodeId, geom: PatchGeometry) -> NodeId {
        let fv = self.value(field);
        let (h, w) = hw(fv);
        let p = pose_of(self.value(pose));
        let side = geom.side;
        let mut out = vec![0.0; side * side];
        crate::field::to_canonical_kernel(fv.data(), w, h, &geom, &p, &mut out);
        self.push(
            Op::WarpToPatch { geom },
            vec![field, pose],
            Tensor::new(vec![side, side], out).expect("shape"),
        )
    }

    pub fn warp_to_field(
        &mut self,
        patch: NodeId,
        pose: NodeId,
        geom: PatchGeometry,
        out_h: usize,
        out_w: usize,
    ) -> NodeId {
        let pv = self.value(patch);
        debug_assert_eq!(pv.len(), geom.side * geom.side);
        let p = pose_of(self.value(pose));
        let mut out = vec![0.0; out_h * out_w];
        crate::field::from_canonical_kernel(pv.data(), &geom, &p, out_w, out_h, &mut out);
        self.push(
            Op::WarpToField { geom },
            vec![patch, pose],
            Tensor::new(vec![out_h, out_w], out).expect("shape"),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape, self.value(b).shape());
        self.push(Op::Add, vec![a, b], Tensor::new(shape, out).expect("shape"))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape, self.value(b).shape());
        self.push(Op::Sub, vec![a, b], Tensor::new(shape, out).expect("shape"))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * k).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(
            Op::Scale { k },
            vec![x],
            Tensor::new(shape, out).expect("shape"),
        )
    }

    pub fn affine_select(
        &mut self,
        x: NodeId,
        idx: Vec<usize>,
        scale: Vec<f64>,
        offset: Vec<f64>,
    ) -> NodeId {
        assert_eq!(idx.len(), scale.len());
        assert_eq!(idx.len(), offset.len());
        let data = self.value(x).data();
        let out: Vec<f64> = idx
            .iter()
            .zip(scale.iter().zip(&offset))
            .map(|(&i, (s, o))| data[i] * s + o)
            .collect();
        let n = out.len();
        self.push(
            Op::AffineSelect { idx, scale },
            vec![x],
            Tensor::new(vec![n], out).expect("shape"),
        )
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let n = av.len() as f64;
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Op::Mse, vec![a, b], Tensor::scalar(sum / n))
    }

    pub fn weighted_sum(&mut self, parts: &[NodeId], weights: &[f64]) -> NodeId {
        assert_eq!(parts.len(), weights.len());
        let total: f64 = parts
            .iter()
            .zip(weights)
            .map(|(&p, w)| self.value(p).item() * w)
            .sum();
        self.push(
            Op::WeightedSum {
                weights: weights.to_vec(),
            },
            parts.to_vec(),
            Tensor::scalar(total),
        )
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Input) {
                let contribs = self.backward_node(node, &g);
                for (input_id, contrib) in contribs {
                    match &mut grads[input_id.0] {
                        Some(acc) => {
                            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                                *a += c;
                            }
                        }
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        match &node.op {
            Op::Input => vec![],
            Op::Linear => {
                let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xv = self.value(x);
                let wv = self.value(w);
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                let mut dx = vec![0.0; n];
                let mut dw = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    let row = &wv.data()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dx[j] += gi * row[j];
                        dw[i * n + j] = gi * xv.data()[j];
                    }
                }
                vec![
                    (x, Tensor::new(vec![n], dx).expect("shape")),
                    (w, Tensor::new(vec![m, n], dw).expect("shape")),
                    (b, Tensor::new(vec![m], g.data().to_vec()).expect("shape")),
                ]
            }
            Op::Conv2d => {
                let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xv = self.value(x);
                let wv = self.value(w);
                let (c, h, wd) = chw(xv);
                let o = wv.shape()[0];
                let k = wv.shape()[2];
                let cached = match &node.aux {
                    Aux::Cols(cols) => Some(cols.as_slice()),
                    _ => None,
                };
                let (dx, dw, db) =
                    conv2d_backward(xv.data(), c, h, wd, wv.data(), o, k, g.data(), cached);
                vec![
                    (x, Tensor::new(vec![c, h, wd], dx).expect("shape")),
                    (w, Tensor::new(vec![o, c, k, k], dw).expect("shape")),
                    (b, Tensor::new(vec![o], db).expect("shape")),
                ]
            }
            Op::Act(kind) => {
                let x = node.inputs[0];
                let xv = self.value(x);
                let dx: Vec<f64> = match (&node.aux, kind) {
                    (Aux::Act(s), Nonlinearity::Silu) => xv
                        .data()
                        .iter()
                        .zip(s.iter())
                        .zip(g.data())
                        .map(|((&v, &si), &gi)| gi * si * (1.0 + v * (1.0 - si)))
                        .collect(),
                    (Aux::Act(t), Nonlinearity::Tanh) => t
                        .iter()
                        .zip(g.data())
                        .map(|(&ti, &gi)| gi * (1.0 - ti * ti))
                        .collect(),
                    _ => xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gi)| gi * act_deriv(*kind, v))
                        .collect(),
                };
                vec![(x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"))]
            }
            Op::ConcatChannels => {
                let mut out = Vec::with_capacity(node.inputs.len());
                let mut offset = 0;
                for &p in &node.inputs {
                    let len = self.value(p).len();
                    let slice = g.data()[offset..offset + len].to_vec();
                    out.push((
                        p,
                        Tensor::new(self.value(p).shape().to_vec(), slice).expect("shape"),
                    ));
                    offset += len;
                }
                out
            }
            Op::Reshape => {
                let x = node.inputs[0];
                let t = Tensor::new(self.value(x).shape().to_vec(), g.data().to_vec())
                    .expect("shape");
                vec![(x, t)]
            }
            Op::Upsample => {
                let x = node.inputs[0];
                let (c, h, w) = chw(self.value(x));
                let out_h = node.value.shape()[1];
                let out_w = node.value.shape()[2];
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let dsrc = &mut dx[ch * h * w..(ch + 1) * h * w];
                    let gout = &g.data()[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                    for oy in 0..out_h {
                        let sy = grid_coord(oy, out_h, h);
                        for ox in 0..out_w {
                            let sx = grid_coord(ox, out_w, w);
                            scatter_bilinear_clamped(dsrc, w, h, sx, sy, gout[oy * out_w + ox]);
                        }
                    }
                }
                vec![(x, Tensor::new(vec![c, h, w], dx).expect("shape"))]
            }
            Op::Grad2d { factor } => {
                let x = node.inputs[0];
                let shape = self.value(x).shape().to_vec();
                let (h, w) = match shape.as_slice() {
                    [h, w] => (*h, *w),
                    [1, h, w] => (*h, *w),
                    _ => unreachable!(),
                };
                let n = h * w;
                let (gdx, gdy) = g.data().split_at(n);
                let mut dx = vec![0.0; n];
                let f = *factor;
                for r in 0..h {
                    for c in 0..w {
                        let i = r * w + c;
                        // adjoint of the x-differences
                        if w > 1 {
                            if c == 0 {
                                dx[i + 1] += gdx[i] * f;
                                dx[i] -= gdx[i] * f;
                            } else if c == w - 1 {
                                dx[i] += gdx[i] * f;
                                dx[i - 1] -= gdx[i] * f;
                            } else {
                                dx[i + 1] += gdx[i] * 0.5 * f;
                                dx[i - 1] -= gdx[i] * 0.5 * f;
                            }
                        }
                        if h > 1 {
                            if r == 0 {
                                dx[i + w] += gdy[i] * f;
                                dx[i] -= gdy[i] * f;
                            } else if r == h - 1 {
                                dx[i] += gdy[i] * f;
                                dx[i - w] -= gdy[i] * f;
                            } else {
                                dx[i + w] += gdy[i] * 0.5 * f;
                                dx[i - w] -= gdy[i] * 0.5 * f;
                            }
                        }
                    }
                }
                vec![(x, Tensor::new(shape, dx).expect("shape"))]
            }
            Op::WarpToPatch { geom } => {
                let (field, pose) = (node.inputs[0], node.inputs[1]);
                let fv = self.value(field);
                let (h, w) = hw(fv);
                let p = pose_of(self.value(pose));
                let (s, c) = p.theta.sin_cos();
                let mut dfield = vec![0.0; h * w];
                let mut dpose = [0.0; 3];
                for pr in 0..geom.side {
                    for pc in 0..geom.side {
                        let gi = g.data()[pr * geom.side + pc];
                        if gi == 0.0 {
                            continue;
                        }
                        let u = pc as f64 - geom.anchor_x;
                        let v = pr as f64 - geom.anchor_y;
                        let fx = p.start_x + u * c - v * s;
                        let fy = p.start_y + u * s + v * c;
                        scatter_bilinear_clamped(&mut dfield, w, h, fx, fy, gi);
                        // coordinate gradients vanish where the sample clamps
                        let (dv_dx, dv_dy) =
                            bilinear_coord_grad_clamped(fv.data(), w, h, fx, fy);
                        // d fx / d theta = -u sin - v cos; d fy / d theta = u cos - v sin
                        dpose[0] += gi * dv_dx;
                        dpose[1] += gi * dv_dy;
                        dpose[2] += gi * (dv_dx * (-u * s - v * c) + dv_dy * (u * c - v * s));
                    }
                }
                vec![
                    (field, Tensor::new(vec![h, w], dfield).expect("shape")),
                    (pose, Tensor::new(vec![3], dpose.to_vec()).expect("shape")),
                ]
            }
            Op::WarpToField { geom } => {
                let (patch, pose) = (node.inputs[0], node.inputs[1]);
                let pv = self.value(patch);
                let p = pose_of(self.value(pose));
                let out_h = node.value.shape()[0];
                let out_w = node.value.shape()[1];
                let side = geom.side;
                let mut dpatch = vec![0.0; side * side];
                let mut dpose = [0.0; 3];
                let (s, c) = p.theta.sin_cos();
                for fr in 0..out_h {
                    for fc in 0..out_w {
                        let gi = g.data()[fr * out_w + fc];
                        if gi == 0.0 {
                            continue;
                        }
                        let (px, py) =
                            warp_field_to_patch_coords(geom, &p, fc as f64, fr as f64);
                        scatter_bilinear_zero(&mut dpatch, side, side, px, py, gi);
                        let (dv_dx, dv_dy) = bilinear_coord_grad_zero(pv.data(), side, side, px, py);
                        let dx = fc as f64 - p.start_x;
                        let dy = fr as f64 - p.start_y;
                        // px = ax + dx c + dy s; py = ay - dx s + dy c
                        let dpx_dsx = -c;
                        let dpx_dsy = -s;
                        let dpy_dsx = s;
                        let dpy_dsy = -c;
                        let dpx_dth = -dx * s + dy * c;
                        let dpy_dth = -dx * c - dy * s;
                        dpose[0] += gi * (dv_dx * dpx_dsx + dv_dy * dpy_dsx);
                        dpose[1] += gi * (dv_dx * dpx_dsy + dv_dy * dpy_dsy);
                        dpose[2] += gi * (dv_dx * dpx_dth + dv_dy * dpy_dth);
                    }
                }
                vec![
                    (patch, Tensor::new(vec![side, side], dpatch).expect("shape")),
                    (pose, Tensor::new(vec![3], dpose.to_vec()).expect("shape")),
                ]
            }
            Op::Add => {
                vec![(node.inputs[0], g.clone()), (node.inputs[1], g.clone())]
            }
            Op::Sub => {
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                vec![
                    (node.inputs[0], g.clone()),
                    (
                        node.inputs[1],
                        Tensor::new(g.shape().to_vec(), neg).expect("shape"),
                    ),
                ]
            }
            Op::Scale { k } => {
                let dx: Vec<f64> = g.data().iter().map(|v| v * k).collect();
                vec![(
                    node.inputs[0],
                    Tensor::new(g.shape().to_vec(), dx).expect("shape"),
                )]
            }
            Op::AffineSelect { idx, scale } => {
                let x = node.inputs[0];
                let mut dx = vec![0.0; self.value(x).len()];
                for ((&i, s), gi) in idx.iter().zip(scale).zip(g.data()) {
                    dx[i] += gi * s;
                }
                vec![(
                    x,
                    Tensor::new(self.value(x).shape().to_vec(), dx).expect("shape"),
                )]
            }
            Op::Mse => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (self.value(a), self.value(b));
                let n = av.len() as f64;
                let gi = g.item() * 2.0 / n;
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| gi * (x - y))
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                vec![
                    (a, Tensor::new(av.shape().to_vec(), da).expect("shape")),
                    (b, Tensor::new(bv.shape().to_vec(), db).expect("shape")),
                ]
            }
            Op::WeightedSum { weights } => node
                .inputs
                .iter()
                .zip(weights)
                .map(|(&p, w)| (p, Tensor::scalar(g.item() * w)))
                .collect(),
        }
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    match t.shape() {
        [c, h, w] => (*c, *h, *w),
        other => panic!("expected [C,H,W], got {other:?}"),
    }
}

fn hw(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [h, w] => (*h, *w),
        other => panic!("expected [H,W], got {other:?}"),
    }
}

fn pose_of(t: &Tensor) -> Pose {
    debug_assert_eq!(t.len(), 3);
    Pose {
        start_x: t.data()[0],
        start_y: t.data()[1],
        theta: t.data()[2],
    }
}

/// Align-corners source coordinate for 1D bilinear resampling.
#[inline]
fn grid_coord(out_i: usize, out_n: usize, in_n: usize) -> f64 {
    if out_n <= 1 {
        0.0
    } else {
        out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
    }
}

fn act_deriv(kind: Nonlinearity, x: f64) -> f64 {
    match kind {
        Nonlinearity::Silu => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        }
        Nonlinearity::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Nonlinearity::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
    }
}

// ---- conv kernels ------------------------------------------------------

fn im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as i64 + ky as i64 - pad as i64;
                    if sy < 0 || sy >= h as i64 {
                        dst[y * w..(y + 1) * w].fill(0.0);
                        continue;
                    }
                    let src_row = &input[ch * hw + sy as usize * w..ch * hw + (sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as i64 + kx as i64 - pad as i64;
                        dst[y * w + x] = if sx < 0 || sx >= w as i64 {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    out: &mut [f64],
) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as i64 + ky as i64 - pad as i64;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as i64 + kx as i64 - pad as i64;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        out[ch * hw + sy as usize * w + sx as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
}

fn conv2d_from_cols(
    cols: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    o: usize,
    ck2: usize,
    bias: &[f64],
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; o * hw];
    unsafe {
        matrixmultiply::dgemm(
            o,
            ck2,
            hw,
            1.0,
            weight.as_ptr(),
            ck2 as isize,
            1,
            cols.as_ptr(),
            hw as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    for oc in 0..o {
        let b = bias[oc];
        for v in &mut out[oc * hw..(oc + 1) * hw] {
            *v += b;
        }
    }
    out
}

#[cfg(test)]
fn conv2d_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    o: usize,
    k: usize,
    bias: &[f64],
) -> Vec<f64> {
    let pad = k / 2;
    let ck2 = c * k * k;
    let mut cols = vec![0.0; ck2 * h * w];
    im2col(input, c, h, w, k, pad, &mut cols);
    conv2d_from_cols(&cols, h, w, weight, o, ck2, bias)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    o: usize,
    k: usize,
    grad_out: &[f64],
    cached_cols: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pad = k / 2;
    let hw = h * w;
    let ck2 = c * k * k;
    // bias grad: sum over spatial
    let mut db = vec![0.0; o];
    for oc in 0..o {
        db[oc] = grad_out[oc * hw..(oc + 1) * hw].iter().sum();
    }
    // weight grad: g [O,HW] x cols^T [HW,CK2]
    let mut recomputed;
    let cols: &[f64] = match cached_cols {
        Some(c) => c,
        None => {
            recomputed = vec![0.0; ck2 * hw];
            im2col(input, c, h, w, k, pad, &mut recomputed);
            &recomputed
        }
    };
    let mut dw = vec![0.0; o * ck2];
    unsafe {
        matrixmultiply::dgemm(
            o,
            hw,
            ck2,
            1.0,
            grad_out.as_ptr(),
            hw as isize,
            1,
            cols.as_ptr(),
            1,
            hw as isize,
            0.0,
            dw.as_mut_ptr(),
            ck2 as isize,
            1,
        );
    }
    // input grad: W^T [CK2,O] x g [O,HW] -> dcols, then col2im
    let mut dcols = vec![0.0; ck2 * hw];
    unsafe {
        matrixmultiply::dgemm(
            ck2,
            o,
            hw,
            1.0,
            weight.as_ptr(),
            1,
            ck2 as isize,
            grad_out.as_ptr(),
            hw as isize,
            1,
            0.0,
            dcols.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    let mut dx = vec![0.0; c * hw];
    col2im_add(&dcols, c, h, w, k, pad, &mut dx);
    (dx, dw, db)
}

// ---- bilinear helpers ----------------------------------------------------

/// Scatter-add the adjoint of a border-clamped bilinear sample.
fn scatter_bilinear_clamped(dst: &mut [f64], width: usize, height: usize, x: f64, y: f64, g: f64) {
    let xc = x.clamp(0.0, (width - 1) as f64);
    let yc = y.clamp(0.0, (height - 1) as f64);
    let x0 = (xc.floor() as usize).min(width - 1);
    let y0 = (yc.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    dst[y0 * width + x0] += g * (1.0 - fy) * (1.0 - fx);
    dst[y0 * width + x1] += g * (1.0 - fy) * fx;
    dst[y1 * width + x0] += g * fy * (1.0 - fx);
    dst[y1 * width + x1] += g * fy * fx;
}

/// d(sample)/d(x,y) of a border-clamped bilinear sample; zero in a clamped
/// axis (moving the raw coordinate there does not change the value).
fn bilinear_coord_grad_clamped(
    values: &[f64],
    width: usize,
    height: usize,
    x: f64,
    y: f64,
) -> (f64, f64) {
    let x_in = (0.0..=(width - 1) as f64).contains(&x);
    let y_in = (0.0..=(height - 1) as f64).contains(&y);
    let xc = x.clamp(0.0, (width - 1) as f64);
    let yc = y.clamp(0.0, (height - 1) as f64);
    let x0 = (xc.floor() as usize).min(width.saturating_sub(2));
    let y0 = (yc.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let v00 = values[y0 * width + x0];
    let v01 = values[y0 * width + x1];
    let v10 = values[y1 * width + x0];
    let v11 = values[y1 * width + x1];
    let dv_dx = if x_in {
        (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    } else {
        0.0
    };
    let dv_dy = if y_in {
        (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    } else {
        0.0
    };
    (dv_dx, dv_dy)
}

/// Scatter-add the adjoint of a zero-padded bilinear sample.
fn scatter_bilinear_zero(dst: &mut [f64], width: usize, height: usize, x: f64, y: f64, g: f64) {
    if x <= -1.0 || y <= -1.0 || x >= width as f64 || y >= height as f64 {
        return;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        let yy = y0 as i64 + dy;
        if yy < 0 || yy >= height as i64 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xx = x0 as i64 + dx;
            if xx < 0 || xx >= width as i64 {
                continue;
            }
            dst[yy as usize * width + xx as usize] += g * wy * wx;
        }
    }
}

/// d(sample)/d(x,y) of a zero-padded bilinear sample (missing taps are 0).
fn bilinear_coord_grad_zero(
    values: &[f64],
    width: usize,
    height: usize,
    x: f64,
    y: f64,
) -> (f64, f64) {
    if x <= -1.0 || y <= -1.0 || x >= width as f64 || y >= height as f64 {
        return (0.0, 0.0);
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let tap = |dx: i64, dy: i64| -> f64 {
        let xx = x0 as i64 + dx;
        let yy = y0 as i64 + dy;
        if xx < 0 || xx >= width as i64 || yy < 0 || yy >= height as i64 {
            0.0
        } else {
            values[yy as usize * width + xx as usize]
        }
    };
    let (v00, v01, v10, v11) = (tap(0, 0), tap(1, 0), tap(0, 1), tap(1, 1));
    (
        (1.0 - fy) * (v01 - v00) + fy * (v11 - v10),
        (1.0 - fx) * (v10 - v00) + fx * (v11 - v01),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{anchor_for, ActionKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient check of a graph-building closure.
    fn check_grads<F>(inputs: &[Tensor], build: F, rtol: f64, atol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let eval = |tensors: &[Tensor]| -> (f64, Vec<NodeId>, Graph) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| g.input(t.clone())).collect();
            let root = build(&mut g, &ids);
            (g.value(root).item(), ids, g)
        };
        let (_, ids, graph) = eval(inputs);
        let root = NodeId(graph.nodes.len() - 1);
        let grads = graph.backward(root);
        let h = 1e-5;
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[ti])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[j] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic.data()[j];
                let denom = a.abs().max(numeric.abs()).max(atol / rtol);
                assert!(
                    (a - numeric).abs() <= rtol * denom + atol,
                    "input {ti} elem {j}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn rnd(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rnd(vec![5], &mut rng);
        let w = rnd(vec![4, 5], &mut rng);
        let b = rnd(vec![4], &mut rng);
        let t = rnd(vec![4], &mut rng);
        check_grads(
            &[x, w, b, t],
            |g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2]);
                g.mse(y, ids[3])
            },
            1e-6,
            1e-9,
        );
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, h, w, o, k) = (3, 6, 5, 4, 3);
        let x = rnd(vec![c, h, w], &mut rng);
        let wt = rnd(vec![o, c, k, k], &mut rng);
        let b = rnd(vec![o], &mut rng);
        let out = conv2d_forward(x.data(), c, h, w, wt.data(), o, k, b.data());
        // direct convolution
        let pad = (k / 2) as i64;
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as i64 + ky as i64 - pad;
                                let sx = xx as i64 + kx as i64 - pad;
                                if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                let wv = wt.data()[((oc * c + ic) * k + ky) * k + kx];
                                acc += wv * x.data()[ic * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    let got = out[oc * h * w + y * w + xx];
                    assert!((got - acc).abs() < 1e-10, "({oc},{y},{xx})");
                }
            }
        }
    }

    #[test]
    fn conv2d_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rnd(vec![2, 5, 4], &mut rng);
        let w = rnd(vec![3, 2, 3, 3], &mut rng);
        let b = rnd(vec![3], &mut rng);
        let t = rnd(vec![3, 5, 4], &mut rng);
        check_grads(
            &[x, w, b, t],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2]);
                g.mse(y, ids[3])
            },
            1e-6,
            1e-9,
        );
    }

    #[test]
    fn activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [Nonlinearity::Silu, Nonlinearity::Tanh] {
            let x = rnd(vec![2, 3, 3], &mut rng);
            let t = rnd(vec![2, 3, 3], &mut rng);
            check_grads(
                &[x, t],
                |g, ids| {
                    let y = g.activation(ids[0], kind);
                    g.mse(y, ids[1])
                },
                1e-6,
                1e-9,
            );
        }
    }

    #[test]
    fn concat_reshape_upsample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rnd(vec![1, 4, 4], &mut rng);
        let b = rnd(vec![2, 4, 4], &mut rng);
        let t = rnd(vec![3, 8, 8], &mut rng);
        check_grads(
            &[a, b, t],
            |g, ids| {
                let cat = g.concat_channels(&[ids[0], ids[1]]);
                let up = g.upsample_bilinear(cat, 8, 8);
                g.mse(up, ids[2])
            },
            1e-6,
            1e-9,
        );
    }

    #[test]
    fn grad2d_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rnd(vec![5, 6], &mut rng);
        let t = rnd(vec![2, 5, 6], &mut rng);
        check_grads(
            &[x, t],
            |g, ids| {
                let gr = g.grad2d(ids[0], 2.5);
                g.mse(gr, ids[1])
            },
            1e-6,
            1e-9,
        );
    }

    #[test]
    fn warp_to_patch_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // smooth field so coordinate gradients are meaningful
        let mut field = Tensor::zeros(vec![12, 12]);
        for r in 0..12 {
            for c in 0..12 {
                field.data_mut()[r * 12 + c] =
                    (c as f64 * 0.5).sin() + (r as f64 * 0.35).cos() + rng.gen_range(-0.02..0.02);
            }
        }
        let pose = Tensor::new(vec![3], vec![5.3, 6.1, 0.8]).unwrap();
        let geom = anchor_for(6, ActionKind::Push);
        let t = rnd(vec![6, 6], &mut rng);
        check_grads(
            &[field, pose, t],
            move |g, ids| {
                let p = g.warp_to_patch(ids[0], ids[1], geom);
                g.mse(p, ids[2])
            },
            2e-4,
            1e-7,
        );
    }

    #[test]
    fn warp_to_field_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut patch = Tensor::zeros(vec![6, 6]);
        for r in 0..6 {
            for c in 0..6 {
                patch.data_mut()[r * 6 + c] = (c as f64 * 0.7).cos() * (r as f64 * 0.4).sin();
            }
        }
        let pose = Tensor::new(vec![3], vec![4.6, 5.2, 2.1]).unwrap();
        let geom = anchor_for(6, ActionKind::Push);
        let t = rnd(vec![10, 10], &mut rng);
        check_grads(
            &[patch, pose, t],
            move |g, ids| {
                let f = g.warp_to_field(ids[0], ids[1], geom, 10, 10);
                g.mse(f, ids[2])
            },
            2e-4,
            1e-7,
        );
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rnd(vec![7], &mut rng);
        let b = rnd(vec![7], &mut rng);
        let t = rnd(vec![7], &mut rng);
        check_grads(
            &[a, b, t],
            |g, ids| {
                let s = g.add(ids[0], ids[1]);
                let d = g.sub(s, ids[2]);
                let sc = g.scale(d, 1.7);
                let m1 = g.mse(sc, ids[2]);
                let m2 = g.mse(ids[0], ids[1]);
                g.weighted_sum(&[m1, m2], &[0.6, 1.4])
            },
            1e-6,
            1e-9,
        );
    }

    #[test]
    fn affine_select_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rnd(vec![5], &mut rng);
        let t = rnd(vec![3], &mut rng);
        check_grads(
            &[x, t],
            |g, ids| {
                let sel = g.affine_select(
                    ids[0],
                    vec![0, 1, 2],
                    vec![2.0, -1.5, 3.0],
                    vec![0.1, 0.0, -0.2],
                );
                g.mse(sel, ids[1])
            },
            1e-6,
            1e-9,
        );
    }

    #[test]
    fn fan_out_accumulates() {
        // same node consumed twice: gradients must sum
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let t = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        check_grads(
            &[x, t],
            |g, ids| {
                let doubled = g.add(ids[0], ids[0]);
                g.mse(doubled, ids[1])
            },
            1e-6,
            1e-9,
        );
    }

    #[test]
    fn graph_warp_matches_plain_to_canonical() {
        use crate::field::{to_canonical, Action, HeightField, PushAction};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let depths: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(20.0..60.0)).collect();
        let f = HeightField::new(32, 32, 2.0, 80.0, depths).unwrap();
        let a = Action::Push(PushAction {
            x: 0.4,
            y: 0.6,
            theta: 1.3,
            length_mm: 20.0,
            depth_mm: 3.0,
        });
        let plain = to_canonical(&f, &a, 16);
        let mut g = Graph::new();
        let field_id = g.input(Tensor::new(vec![32, 32], f.depths().to_vec()).unwrap());
        let pose = a.pose(&f);
        let pose_id = g.input(Tensor::new(vec![3], vec![pose.start_x, pose.start_y, pose.theta]).unwrap());
        let geom = anchor_for(16, ActionKind::Push);
        let patch_id = g.warp_to_patch(field_id, pose_id, geom);
        for (a, b) in g.value(patch_id).data().iter().zip(plain.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
