use super::kernels::{self, ConvGeom, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Additive constant inside `ln` of the soft-label cross-entropy.
pub const CE_EPSILON: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Upsample2x(Var),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<f64>,
    },
    L1Mean {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool2x2 { .. } => "maxpool2x2",
            Op::Dense { .. } => "dense",
            Op::Upsample2x(_) => "bicubic_upsample2x",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "ce_soft_labels",
            Op::L1Mean { .. } => "l1_mean",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A node requires a gradient iff it is a trainable leaf or any of its
/// inputs requires one; backward skips everything else.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Node ids in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }

    /// Moves the gradient for `var` into `tensor.grad`, if the tensor is
    /// trainable. Frozen tensors are left untouched.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) {
        if !tensor.requires_grad() {
            return;
        }
        tensor.grad = Some(
            self.get(var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tensor.numel()]),
        );
    }
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid_shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].value.requires_grad()
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        let mut value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    /// Records a copy of `tensor` as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let mut value = tensor.clone();
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution, NCHW input, OIKK kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        check_rank("conv2d", x, 4)?;
        check_rank("conv2d", k, 4)?;
        if k.shape()[1] != x.shape()[1] || k.shape()[2] != k.shape()[3] {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        if b.shape() != [k.shape()[0]] {
            return Err(Error::shape("conv2d", k.shape(), b.shape()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d: stride must be positive".into(),
            ));
        }
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (o, ks) = (k.shape()[0], k.shape()[2]);
        if h + 2 * padding < ks || w + 2 * padding < ks {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            ksize: ks,
            stride,
            padding,
            out_h: (h + 2 * padding - ks) / stride + 1,
            out_w: (w + 2 * padding - ks) / stride + 1,
        };
        let ncols = geom.col_cols();
        let mut out = vec![0.0; n * o * ncols];
        for (j, plane) in out.chunks_mut(ncols).enumerate() {
            plane.fill(b.data()[j % o]);
        }
        kernels::conv_accumulate(x.data(), n, &geom, k.data(), o, &mut out, &mut Vec::new());
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            out,
            vec![n, o, geom.out_h, geom.out_w],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(&[input]);
        self.push(data, shape, Op::Relu(input), rg)
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major scan order.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        check_rank("maxpool2x2", x, 4)?;
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid_shape(
                "maxpool2x2",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for idx in [
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ] {
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            vec![n, c, oh, ow],
            Op::MaxPool2x2 { input, argmax },
            rg,
        ))
    }

    /// Affine map `x W + b` with `x: N x D`, `W: D x M`, `b: M`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        check_rank("dense", x, 2)?;
        check_rank("dense", wt, 2)?;
        if x.shape()[1] != wt.shape()[0] {
            return Err(Error::shape("dense", x.shape(), wt.shape()));
        }
        if b.shape() != [wt.shape()[1]] {
            return Err(Error::shape("dense", wt.shape(), b.shape()));
        }
        let (n, d, m) = (x.shape()[0], x.shape()[1], wt.shape()[1]);
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        kernels::gemm(n, d, m, x.data(), false, wt.data(), false, 1.0, &mut out);
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            out,
            vec![n, m],
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Separable Catmull-Rom 2x upsampling with replicate edges.
    pub fn bicubic_upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        check_rank("bicubic_upsample2x", x, 4)?;
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if h < 2 || w < 2 {
            return Err(Error::invalid_shape(
                "bicubic_upsample2x",
                format!("spatial dims must be at least 2, got {h}x{w}"),
            ));
        }
        let (rows, cols) = (kernels::upsample_taps(h), kernels::upsample_taps(w));
        let mut tmp = vec![0.0; 2 * h * w];
        let mut out = vec![0.0; n * c * 4 * h * w];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            kernels::upsample_plane(src, h, w, &rows, &cols, &mut tmp, dst);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(out, vec![n, c, 2 * h, 2 * w], Op::Upsample2x(input), rg))
    }

    /// Row-wise softmax over `N x C` logits, max-subtracted.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        check_rank("softmax", x, 2)?;
        let cls = x.shape()[1];
        if cls < 2 {
            return Err(Error::invalid_shape("softmax", "need at least 2 classes"));
        }
        let out = softmax_rows(x.data(), cls);
        let shape = x.shape().to_vec();
        let rg = self.rg(&[logits]);
        Ok(self.push(out, shape, Op::Softmax(logits), rg))
    }

    /// Batch mean of `-sum_c label_c * ln(prob_c + eps)`.
    pub fn ce_soft_labels(&mut self, probs: Var, labels: &Tensor) -> Result<Var> {
        let p = self.value(probs);
        check_rank("ce_soft_labels", p, 2)?;
        if labels.shape() != p.shape() {
            return Err(Error::shape("ce_soft_labels", p.shape(), labels.shape()));
        }
        let n = p.shape()[0];
        let total: f64 = p
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&pr, &l)| {
                if l == 0.0 {
                    0.0
                } else {
                    -l * (pr + CE_EPSILON).ln()
                }
            })
            .sum();
        let rg = self.rg(&[probs]);
        Ok(self.push(
            vec![total / n as f64],
            vec![],
            Op::CrossEntropy {
                probs,
                labels: labels.data().to_vec(),
            },
            rg,
        ))
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("l1_mean", x.shape(), y.shape()));
        }
        let sum: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q).abs())
            .sum();
        let mean = sum / x.numel().max(1) as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![mean], vec![], Op::L1Mean { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, shape, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(&[input]);
        self.push(data, shape, Op::Scale(input, factor), rg)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * v).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(&[input]);
        self.push(data, shape, Op::Square(input), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.rg(&[input]);
        self.push(vec![s], vec![], Op::Sum(input), rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let data = x.data().to_vec();
        let rg = self.rg(&[input]);
        Ok(self.push(data, shape.to_vec(), Op::Reshape(input), rg))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every node
    /// that requires one; nodes that do not are never visited.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid_shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        if !lv.requires_grad() {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited.push(id);
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[var.0].value.requires_grad() {
                return;
            }
            let buf = grads[var.0].get_or_insert_with(|| vec![0.0; nodes[var.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (o, rows, ncols) = (k.shape()[0], geom.col_rows(), geom.col_cols());
                let n = x.shape()[0];
                let img = geom.channels * geom.height * geom.width;
                acc(*bias, &mut |db| {
                    for gi in g.chunks(o * ncols) {
                        for (oc, plane) in gi.chunks(ncols).enumerate() {
                            db[oc] += plane.iter().sum::<f64>();
                        }
                    }
                });
                let need_k = self.requires_grad(*kernel);
                let need_x = self.requires_grad(*input);
                let mut cols = Vec::new();
                if need_k {
                    acc(*kernel, &mut |dk| {
                        for i in 0..n {
                            let gi = &g[i * o * ncols..(i + 1) * o * ncols];
                            for tile in geom.row_tiles() {
                                let tn = (tile.1 - tile.0) * geom.out_w;
                                cols.resize(rows * tn, 0.0);
                                kernels::im2col(
                                    &x.data()[i * img..(i + 1) * img],
                                    geom,
                                    tile,
                                    &mut cols,
                                );
                                kernels::gemm_strided(
                                    o,
                                    tn,
                                    rows,
                                    &gi[tile.0 * geom.out_w..],
                                    Layout::row_major(ncols),
                                    &cols,
                                    Layout::row_major(tn).transposed(),
                                    1.0,
                                    dk,
                                    Layout::row_major(rows),
                                );
                            }
                        }
                    });
                }
                if need_x {
                    let c = geom.channels;
                    if let Some(tg) = geom.input_grad_geom(o).filter(|_| c >= o.min(8)) {
                        let flipped = kernels::flip_kernel(k.data(), o, c, geom.ksize);
                        acc(*input, &mut |dx| {
                            kernels::conv_accumulate(g, n, &tg, &flipped, c, dx, &mut cols);
                        });
                    } else {
                        acc(*input, &mut |dx| {
                            for i in 0..n {
                                let gi = &g[i * o * ncols..(i + 1) * o * ncols];
                                for tile in geom.row_tiles() {
                                    let tn = (tile.1 - tile.0) * geom.out_w;
                                    cols.resize(rows * tn, 0.0);
                                    kernels::gemm_strided(
                                        rows,
                                        o,
                                        tn,
                                        k.data(),
                                        Layout::row_major(rows).transposed(),
                                        &gi[tile.0 * geom.out_w..],
                                        Layout::row_major(ncols),
                                        0.0,
                                        &mut cols,
                                        Layout::row_major(tn),
                                    );
                                    kernels::col2im_add(
                                        &cols,
                                        geom,
                                        tile,
                                        &mut dx[i * img..(i + 1) * img],
                                    );
                                }
                            }
                        });
                    }
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                acc(*input, &mut |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MaxPool2x2 { input, argmax } => {
                acc(*input, &mut |dx| {
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        dx[idx] += gv;
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, d, m) = (x.shape()[0], x.shape()[1], wt.shape()[1]);
                acc(*bias, &mut |db| {
                    for row in g.chunks(m) {
                        for (b, gv) in db.iter_mut().zip(row) {
                            *b += gv;
                        }
                    }
                });
                acc(*weight, &mut |dw| {
                    kernels::gemm(d, n, m, x.data(), true, g, false, 1.0, dw);
                });
                acc(*input, &mut |dx| {
                    kernels::gemm(n, m, d, g, false, wt.data(), true, 1.0, dx);
                });
            }
            Op::Upsample2x(input) => {
                let x = self.value(*input);
                let [h, w] = [x.shape()[2], x.shape()[3]];
                let (rows, cols) = (kernels::upsample_taps(h), kernels::upsample_taps(w));
                let mut tmp = vec![0.0; 2 * h * w];
                acc(*input, &mut |dx| {
                    for (gp, dp) in g.chunks(4 * h * w).zip(dx.chunks_mut(h * w)) {
                        kernels::upsample_plane_adjoint(gp, h, w, &rows, &cols, &mut tmp, dp);
                    }
                });
            }
            Op::Softmax(input) => {
                let y = node.value.data();
                let cls = node.value.shape()[1];
                acc(*input, &mut |dx| {
                    for ((yr, gr), dr) in y.chunks(cls).zip(g.chunks(cls)).zip(dx.chunks_mut(cls)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let scale = g[0] / p.shape()[0] as f64;
                acc(*probs, &mut |dp| {
                    for ((d, &pv), &l) in dp.iter_mut().zip(p.data()).zip(labels) {
                        if l != 0.0 {
                            *d -= scale * l / (pv + CE_EPSILON);
                        }
                    }
                });
            }
            Op::L1Mean { a, b } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let scale = g[0] / x.numel().max(1) as f64;
                let sign = |p: f64, q: f64| {
                    if p > q {
                        1.0
                    } else if p < q {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &mut |da| {
                    for ((d, &p), &q) in da.iter_mut().zip(x.data()).zip(y.data()) {
                        *d += scale * sign(p, q);
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &p), &q) in db.iter_mut().zip(x.data()).zip(y.data()) {
                        *d -= scale * sign(p, q);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| {
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    });
                }
            }
            Op::Scale(input, factor) => {
                acc(*input, &mut |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += factor * gv;
                    }
                });
            }
            Op::Square(input) => {
                let x = self.value(*input).data();
                acc(*input, &mut |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x) {
                        *dv += 2.0 * xv * gv;
                    }
                });
            }
            Op::Sum(input) => {
                acc(*input, &mut |d| {
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                });
            }
            Op::Reshape(input) => {
                acc(*input, &mut |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
        }
    }
}

/// Max-subtracted row softmax over a flat `rows x cls` buffer.
pub fn softmax_rows(data: &[f64], cls: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cls) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    out
}
