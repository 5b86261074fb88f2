use super::conv::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    ConvTranspose2d { input: Var, kernel: Var, geom: ConvGeom },
    AddBias { input: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    StopGradient,
    StraightThrough(Var),
    GatherRows { table: Var, indices: Vec<usize>, spatial: usize },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    DiscretizedLogistic { params: Var, target: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::AddBias { .. } => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough(_) => "straight_through",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::DiscretizedLogistic { .. } => "discretized_logistic_nll",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape belongs to exactly one forward pass. Values are immutable once
/// recorded; [`Tape::backward`] walks the nodes in reverse and returns the
/// gradients without mutating the tape, so several losses recorded on the
/// same tape can be differentiated independently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `d loss / d var`, or `None` if no gradient reached `var`.
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor> {
        let g = self.get(var)?;
        Tensor::new(self.shapes[var.0].clone(), g.to_vec()).ok()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient => false,
            Op::Conv2d { input, kernel, .. } | Op::ConvTranspose2d { input, kernel, .. } => {
                self.requires_grad(*input) || self.requires_grad(*kernel)
            }
            Op::AddBias { input, bias } => self.requires_grad(*input) || self.requires_grad(*bias),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::MulScalar(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::StraightThrough(a) => self.requires_grad(*a),
            Op::GatherRows { table, .. } => self.requires_grad(*table),
            Op::CrossEntropy { logits, .. } => self.requires_grad(*logits),
            Op::DiscretizedLogistic { params, .. } => self.requires_grad(*params),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        image: (usize, usize, usize, usize),
        feature_channels: usize,
        feature_hw: (usize, usize),
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let (batch, c, h, w) = image;
        let (ko, kc, kh, kw) = self.value(kernel).dims4(op)?;
        if ko != feature_channels || kc != c {
            return Err(shape_err(
                op,
                format!(
                    "kernel {:?} incompatible with {c} image channels and {feature_channels} feature channels",
                    self.value(kernel).shape()
                ),
            ));
        }
        Ok(ConvGeom {
            batch,
            c,
            h,
            w,
            o: ko,
            oh: feature_hw.0,
            ow: feature_hw.1,
            kh,
            kw,
            stride,
            pad,
        })
    }

    /// 2-D cross-correlation. `input`: N×C×H×W, `kernel`: O×C×kh×kw.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        let (o, kc, kh, kw) = self.value(kernel).dims4(OP)?;
        if kc != c {
            return Err(shape_err(
                OP,
                format!("input has {c} channels but kernel expects {kc}"),
            ));
        }
        let (oh, ow) = match (
            conv::conv2d_output_size(h, kh, stride, pad),
            conv::conv2d_output_size(w, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(shape_err(
                    OP,
                    format!(
                        "spatial {h}×{w} with padding {pad} is smaller than kernel {kh}×{kw} (stride {stride})"
                    ),
                ))
            }
        };
        let geom = self.conv_geom(OP, (n, c, h, w), o, (oh, ow), kernel, stride, pad)?;
        let y = conv::conv_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        self.push(
            Tensor::new([n, o, oh, ow], y)?,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
        )
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// kernel tensor. `input`: N×O×H×W, `kernel`: O×C×kh×kw → N×C×H'×W'.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, o, h, w) = self.value(input).dims4(OP)?;
        let (ko, c, kh, kw) = self.value(kernel).dims4(OP)?;
        if ko != o {
            return Err(shape_err(
                OP,
                format!("input has {o} channels but kernel expects {ko}"),
            ));
        }
        let (oh, ow) = match (
            conv::conv_transpose2d_output_size(h, kh, stride, pad),
            conv::conv_transpose2d_output_size(w, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(shape_err(
                    OP,
                    format!("input {h}×{w} with kernel {kh}×{kw}, stride {stride}, padding {pad} yields an empty output"),
                ))
            }
        };
        let geom = self.conv_geom(OP, (n, c, oh, ow), o, (h, w), kernel, stride, pad)?;
        let x = conv::conv_adjoint(self.value(input).data(), self.value(kernel).data(), &geom);
        self.push(
            Tensor::new([n, c, oh, ow], x)?,
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
            },
        )
    }

    /// Adds a per-channel bias (length C) to an N×C×H×W tensor.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("add_bias")?;
        let b = self.value(bias);
        if b.numel() != c {
            return Err(shape_err(
                "add_bias",
                format!("bias has {} elements for {c} channels", b.numel()),
            ));
        }
        let mut out = self.value(input).clone();
        let b = b.data().to_vec();
        let hw = h * w;
        for ni in 0..n {
            for (ci, &bv) in b.iter().enumerate() {
                for v in &mut out.data_mut()[(ni * c + ci) * hw..][..hw] {
                    *v += bv;
                }
            }
        }
        self.push(out, Op::AddBias { input, bias })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: av.shape().to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let av = self.value(a);
        Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.map(a, |x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let s = s as f32;
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = (t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64) as f32;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Identity in the forward pass; blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient)
    }

    /// Emits `forward_value` but routes the incoming gradient unchanged to
    /// `a`. This is the straight-through estimator for a non-differentiable
    /// map `a ↦ forward_value`.
    pub fn straight_through(&mut self, a: Var, forward_value: Tensor) -> Result<Var> {
        if forward_value.shape() != self.value(a).shape() {
            return Err(shape_err(
                "straight_through",
                format!(
                    "{:?} vs {:?}",
                    forward_value.shape(),
                    self.value(a).shape()
                ),
            ));
        }
        self.push(forward_value, Op::StraightThrough(a))
    }

    /// Looks up rows of a `K×D` table for every entry of a `B×H×W` index
    /// grid, producing a `B×D×H×W` tensor.
    pub fn gather_rows(
        &mut self,
        table: Var,
        indices: &[usize],
        grid: (usize, usize, usize),
    ) -> Result<Var> {
        let (b, h, w) = grid;
        let t = self.value(table);
        let (rows, d) = match t.shape() {
            [k, d] => (*k, *d),
            s => {
                return Err(shape_err(
                    "gather_rows",
                    format!("table must be K×D, got {s:?}"),
                ))
            }
        };
        if indices.len() != b * h * w {
            return Err(shape_err(
                "gather_rows",
                format!("{} indices for a {b}×{h}×{w} grid", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { index: bad, rows });
        }
        let spatial = h * w;
        let mut out = vec![0.0f32; b * d * spatial];
        for bi in 0..b {
            for p in 0..spatial {
                let row = &t.data()[indices[bi * spatial + p] * d..][..d];
                for (di, &v) in row.iter().enumerate() {
                    out[(bi * d + di) * spatial + p] = v;
                }
            }
        }
        self.push(
            Tensor::new([b, d, h, w], out)?,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
                spatial,
            },
        )
    }

    /// Summed categorical negative log-likelihood (nats) of `targets` under
    /// softmax over the channel axis of `logits` (N×K×H×W).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4("cross_entropy")?;
        let hw = h * w;
        if targets.len() != n * hw {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {n}×{h}×{w} positions", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Index { index: bad, rows: k });
        }
        let l = self.value(logits).data();
        let mut total = 0.0f64;
        for ni in 0..n {
            for p in 0..hw {
                let at = |ki: usize| l[(ni * k + ki) * hw + p] as f64;
                let lse = log_sum_exp((0..k).map(at));
                total += lse - at(targets[ni * hw + p]);
            }
        }
        self.push(
            Tensor::scalar(total as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Per-pixel negative log-likelihood (nats, N×C×H×W) of 8-bit data under
    /// a discretised logistic. `params` is N×2C×H×W holding means in the
    /// first C channels and log-scales in the last C; `target` is N×C×H×W in
    /// [−0.5, 0.5].
    pub fn discretized_logistic_nll(&mut self, params: Var, target: &Tensor) -> Result<Var> {
        const OP: &str = "discretized_logistic_nll";
        let (n, c2, h, w) = self.value(params).dims4(OP)?;
        let (tn, tc, th, tw) = target.dims4(OP)?;
        if c2 != 2 * tc || tn != n || th != h || tw != w {
            return Err(shape_err(
                OP,
                format!(
                    "params {:?} do not match target {:?}",
                    self.value(params).shape(),
                    target.shape()
                ),
            ));
        }
        let p = self.value(params).data();
        let hw = h * w;
        let mut out = vec![0.0f32; target.numel()];
        for ni in 0..n {
            for ci in 0..tc {
                for q in 0..hw {
                    let t = (ni * tc + ci) * hw + q;
                    let mu = p[(ni * c2 + ci) * hw + q];
                    let ls = p[(ni * c2 + tc + ci) * hw + q];
                    out[t] = super::logistic::bin_nll(target.data()[t], mu, ls).0 as f32;
                }
            }
        }
        self.push(
            Tensor::new(target.shape().to_vec(), out)?,
            Op::DiscretizedLogistic {
                params,
                target: target.clone(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient buffer,
    /// zero-filled if the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !lv.all_finite() {
            return Err(TensorError::NonFinite { op: self.nodes[loss.0].op.name() });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let name = node.op.name();
        let mut send = |var: Var, contribution: Vec<f32>| -> Result<()> {
            if !self.requires_grad(var) {
                return Ok(());
            }
            if contribution.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient { op: name });
            }
            match &mut grads[var.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contribution),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                if self.requires_grad(*kernel) {
                    send(
                        *kernel,
                        conv::conv_kernel_grad(self.value(*input).data(), g, geom),
                    )?;
                }
                if self.requires_grad(*input) {
                    send(
                        *input,
                        conv::conv_adjoint(g, self.value(*kernel).data(), geom),
                    )?;
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
            } => {
                let kv = self.value(*kernel).data();
                match (self.requires_grad(*input), self.requires_grad(*kernel)) {
                    (true, true) => {
                        let (dx, dk) =
                            conv::image_pass(g, kv, Some(self.value(*input).data()), geom);
                        send(*kernel, dk)?;
                        send(*input, dx)?;
                    }
                    (true, false) => send(*input, conv::conv_forward(g, kv, geom))?,
                    (false, true) => send(
                        *kernel,
                        conv::conv_kernel_grad(g, self.value(*input).data(), geom),
                    )?,
                    (false, false) => {}
                }
            }
            Op::AddBias { input, bias } => {
                if self.requires_grad(*bias) {
                    let (n, c, h, w) = node.value.dims4(name)?;
                    let hw = h * w;
                    let mut db = vec![0.0f32; c];
                    for ni in 0..n {
                        for (ci, d) in db.iter_mut().enumerate() {
                            *d += g[(ni * c + ci) * hw..][..hw].iter().sum::<f32>();
                        }
                    }
                    send(*bias, db)?;
                }
                send(*input, g.to_vec())?;
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec())?;
                send(*b, g.to_vec())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec())?;
                send(*b, g.iter().map(|v| -v).collect())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect())?;
                }
                if self.requires_grad(*b) {
                    send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect())?;
                }
            }
            Op::MulScalar(a, s) => send(*a, g.iter().map(|v| v * s).collect())?,
            Op::AddScalar(a) | Op::StraightThrough(a) => send(*a, g.to_vec())?,
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                )?
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                send(*a, g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect())?
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()])?,
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n as f32; n])?
            }
            Op::GatherRows {
                table,
                indices,
                spatial,
            } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut dt = vec![0.0f32; t.numel()];
                for (pos, &row) in indices.iter().enumerate() {
                    let (bi, p) = (pos / spatial, pos % spatial);
                    for di in 0..d {
                        dt[row * d + di] += g[(bi * d + di) * spatial + p];
                    }
                }
                send(*table, dt)?;
            }
            Op::CrossEntropy { logits, targets } => {
                let lt = self.value(*logits);
                let (n, k, h, w) = lt.dims4(name)?;
                let hw = h * w;
                let l = lt.data();
                let mut dl = vec![0.0f32; l.len()];
                let scale = g[0] as f64;
                for ni in 0..n {
                    for p in 0..hw {
                        let idx = |ki: usize| (ni * k + ki) * hw + p;
                        let lse = log_sum_exp((0..k).map(|ki| l[idx(ki)] as f64));
                        for ki in 0..k {
                            let prob = (l[idx(ki)] as f64 - lse).exp();
                            let onehot = if ki == targets[ni * hw + p] { 1.0 } else { 0.0 };
                            dl[idx(ki)] = (scale * (prob - onehot)) as f32;
                        }
                    }
                }
                send(*logits, dl)?;
            }
            Op::DiscretizedLogistic { params, target } => {
                let pt = self.value(*params);
                let (n, c2, h, w) = pt.dims4(name)?;
                let tc = c2 / 2;
                let hw = h * w;
                let p = pt.data();
                let mut dp = vec![0.0f32; p.len()];
                for ni in 0..n {
                    for ci in 0..tc {
                        for q in 0..hw {
                            let t = (ni * tc + ci) * hw + q;
                            let mi = (ni * c2 + ci) * hw + q;
                            let si = (ni * c2 + tc + ci) * hw + q;
                            let (_, dmu, dls) =
                                super::logistic::bin_nll(target.data()[t], p[mi], p[si]);
                            dp[mi] = (g[t] as f64 * dmu) as f32;
                            dp[si] = (g[t] as f64 * dls) as f32;
                        }
                    }
                }
                send(*params, dp)?;
            }
        }
        Ok(())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}
