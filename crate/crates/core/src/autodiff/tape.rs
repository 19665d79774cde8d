use std::str::FromStr;

use super::{AutodiffError, Real, Result, Tensor, LOG_GUARD};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Caller-chosen identifier for a trainable leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// The closed primitive set. See the module docs for the derivative table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv2d,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sum,
    Mean,
    MaxReduce,
    Softmax,
    SquaredL2,
    Concat,
    Reshape(Vec<usize>),
}

impl PrimitiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Div => "div",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Conv2d => "conv2d",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Exp => "exp",
            PrimitiveKind::Log => "log",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::MaxReduce => "max_reduce",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::SquaredL2 => "squared_l2",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Reshape(_) => "reshape",
        }
    }
}

impl FromStr for PrimitiveKind {
    type Err = AutodiffError;

    /// Parses a primitive name. Reshape is written `reshape:2,3`.
    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "add" => PrimitiveKind::Add,
            "sub" => PrimitiveKind::Sub,
            "mul" => PrimitiveKind::Mul,
            "div" => PrimitiveKind::Div,
            "matmul" => PrimitiveKind::MatMul,
            "conv2d" => PrimitiveKind::Conv2d,
            "relu" => PrimitiveKind::Relu,
            "sigmoid" => PrimitiveKind::Sigmoid,
            "exp" => PrimitiveKind::Exp,
            "log" => PrimitiveKind::Log,
            "sum" => PrimitiveKind::Sum,
            "mean" => PrimitiveKind::Mean,
            "max_reduce" => PrimitiveKind::MaxReduce,
            "softmax" => PrimitiveKind::Softmax,
            "squared_l2" => PrimitiveKind::SquaredL2,
            "concat" => PrimitiveKind::Concat,
            other => {
                let dims = other
                    .strip_prefix("reshape:")
                    .map(|rest| {
                        rest.split(',')
                            .map(|d| d.trim().parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                    })
                    .and_then(|r| r.ok());
                match dims {
                    Some(dims) => PrimitiveKind::Reshape(dims),
                    None => return Err(AutodiffError::UnsupportedPrimitive(other.to_string())),
                }
            }
        };
        Ok(kind)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Conv2d(usize, usize, Option<usize>),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    MaxReduce { src: usize, argmax: Vec<u32> },
    Softmax(usize),
    SquaredL2(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    StopGrad,
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications with eager forward values.
///
/// A tape can replay stop-gradient values captured from an earlier tape
/// (see [`Tape::replaying_stops`]); the gradient checker uses this to hold
/// detached quantities fixed while perturbing inputs.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, usize)>,
    stop_record: Vec<Tensor<T>>,
    stop_replay: Option<Vec<Tensor<T>>>,
    stop_cursor: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            stop_record: Vec::new(),
            stop_replay: None,
            stop_cursor: 0,
        }
    }

    /// A tape whose `stop_gradient` calls return `values` in order instead of
    /// their operand's value.
    pub fn replaying_stops(values: Vec<Tensor<T>>) -> Self {
        Self {
            stop_replay: Some(values),
            ..Self::new()
        }
    }

    /// Values produced by `stop_gradient` on this tape, in call order.
    pub fn recorded_stops(&self) -> &[Tensor<T>] {
        &self.stop_record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite {
                node: self.nodes.len(),
                op: name,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        // Leaves are accepted as given; finiteness is checked on the first op.
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::of(value)))
    }

    /// Anonymous differentiable leaf; its gradient is read with [`Gradients::wrt`].
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Differentiable leaf registered under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.leaf(value, true);
        self.params.push((id, v.0));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value as f64.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item().as_f64()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Identity on values, constant for the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = match &self.stop_replay {
            Some(replay) => {
                let v = replay
                    .get(self.stop_cursor)
                    .cloned()
                    .ok_or(AutodiffError::ReplayExhausted(replay.len()))?;
                if v.shape() != self.shape(x) {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "stop_gradient",
                        lhs: self.shape(x).to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                self.stop_cursor += 1;
                v
            }
            None => self.value(x).clone(),
        };
        self.stop_record.push(value.clone());
        self.push(value, Op::StopGrad, false, "stop_gradient")
    }

    /// Applies one primitive to `operands`.
    pub fn apply(&mut self, kind: PrimitiveKind, operands: &[Var]) -> Result<Var> {
        let arity = |expected: &'static str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(AutodiffError::Arity {
                    op: kind.name(),
                    expected,
                    got: operands.len(),
                })
            }
        };
        match &kind {
            PrimitiveKind::Add
            | PrimitiveKind::Sub
            | PrimitiveKind::Mul
            | PrimitiveKind::Div
            | PrimitiveKind::MatMul => arity("2", operands.len() == 2)?,
            PrimitiveKind::Conv2d => arity("2 or 3", matches!(operands.len(), 2 | 3))?,
            PrimitiveKind::Concat => arity("at least 1", !operands.is_empty())?,
            _ => arity("1", operands.len() == 1)?,
        }
        let o = operands;
        match kind {
            PrimitiveKind::Add => self.add(o[0], o[1]),
            PrimitiveKind::Sub => self.sub(o[0], o[1]),
            PrimitiveKind::Mul => self.mul(o[0], o[1]),
            PrimitiveKind::Div => self.div(o[0], o[1]),
            PrimitiveKind::MatMul => self.matmul(o[0], o[1]),
            PrimitiveKind::Conv2d => self.conv2d(o[0], o[1], o.get(2).copied()),
            PrimitiveKind::Relu => self.relu(o[0]),
            PrimitiveKind::Sigmoid => self.sigmoid(o[0]),
            PrimitiveKind::Exp => self.exp(o[0]),
            PrimitiveKind::Log => self.log(o[0]),
            PrimitiveKind::Sum => self.sum(o[0]),
            PrimitiveKind::Mean => self.mean(o[0]),
            PrimitiveKind::MaxReduce => self.max_reduce(o[0]),
            PrimitiveKind::Softmax => self.softmax(o[0]),
            PrimitiveKind::SquaredL2 => self.squared_l2(o[0]),
            PrimitiveKind::Concat => self.concat(o),
            PrimitiveKind::Reshape(shape) => self.reshape(o[0], &shape),
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let y = vb.item();
            let data = va.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.is_scalar() {
            let x = va.item();
            let data = vb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(vb.shape().to_vec(), data)?
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// `x * c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(x, s)
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(x, s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let geom = ConvGeom {
            cin: sx[0],
            cout: sw[0],
            h: sx[1],
            w: sx[2],
        };
        let mut out = vec![T::zero(); geom.cout * geom.h * geom.w];
        if let Some(b) = bias {
            let vb = &self.nodes[b.0].value;
            if vb.shape() != [geom.cout] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![geom.cout],
                    rhs: vb.shape().to_vec(),
                });
            }
            let hw = geom.h * geom.w;
            for (co, &bv) in vb.data().iter().enumerate() {
                out[co * hw..(co + 1) * hw].fill(bv);
            }
        }
        conv_forward(vx.data(), vw.data(), &mut out, geom);
        let mut ids = vec![x.0, w.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.rg(&ids);
        let shape = vec![geom.cout, geom.h, geom.w];
        self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d(x.0, w.0, bias.map(|b| b.0)),
            rg,
            "conv2d",
        )
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        self.push(value, op, rg, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x.0))
    }

    /// `ln(max(x, 1e-12))`.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let guard = T::of(LOG_GUARD);
        self.unary("log", x, move |v| v.max(guard).ln(), Op::Log(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(m), Op::Mean(x.0), rg, "mean")
    }

    /// Maximum over the leading axis. Ties resolve to the lowest index.
    pub fn max_reduce(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        if shape.is_empty() || shape[0] == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "max_reduce",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let n = shape[0];
        let inner = v.numel() / n;
        let data = v.data();
        let mut out = data[..inner].to_vec();
        let mut argmax = vec![0u32; inner];
        for r in 1..n {
            let row = &data[r * inner..(r + 1) * inner];
            for ((o, a), &val) in out.iter_mut().zip(argmax.iter_mut()).zip(row) {
                if val > *o {
                    *o = val;
                    *a = r as u32;
                }
            }
        }
        let out_shape = shape[1..].to_vec();
        let rg = self.rg(&[x.0]);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::MaxReduce { src: x.0, argmax },
            rg,
            "max_reduce",
        )
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let last = v.shape().last().copied().unwrap_or(1).max(1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(last) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z = z + *e;
            }
            for e in row.iter_mut() {
                *e = *e / z;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0]);
        self.push(value, Op::Softmax(x.0), rg, "softmax")
    }

    /// Sum of squares.
    pub fn squared_l2(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().map(|&e| e * e).sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::SquaredL2(x.0), rg, "squared_l2")
    }

    /// Concatenation along the leading axis; scalars count as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let norm = |s: &[usize]| -> Vec<usize> {
            if s.is_empty() {
                vec![1]
            } else {
                s.to_vec()
            }
        };
        let first = norm(self.shape(parts[0]));
        let tail = first[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = norm(self.shape(p));
            if s[1..] != tail[..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(Tensor::new(shape, data)?, Op::Concat(ids), rg, "concat")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = v.clone().with_shape(shape.to_vec());
        let rg = self.rg(&[x.0]);
        self.push(value, Op::Reshape(x.0), rg, "reshape")
    }

    /// Reverse pass from a scalar root.
    ///
    /// Visits recorded nodes from `root` down to the first node exactly once.
    /// The tape is not consumed, so repeated calls yield identical results.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient { node: i });
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|&(id, node)| {
                let g = grads
                    .get(node)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![T::zero(); self.nodes[node].value.numel()]);
                (id, g)
            })
            .collect();
        Ok(Gradients { by_node: grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![T::zero(); self.nodes[j].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_broadcast(ga, g, |x| x));
                acc(b, &mut |gb| add_broadcast(gb, g, |x| x));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_broadcast(ga, g, |x| x));
                acc(b, &mut |gb| add_broadcast(gb, g, |x| -x));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| add_product(ga, g, vb, |gi, bi| gi * bi));
                acc(b, &mut |gb| add_product(gb, g, va, |gi, ai| gi * ai));
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| add_product(ga, g, vb, |gi, bi| gi / bi));
                // d(a/b)/db = -a/b², evaluated per output element
                let n = g.len();
                let pick = |v: &[T], k: usize| if v.len() == 1 { v[0] } else { v[k] };
                acc(b, &mut |gb| {
                    if gb.len() == n {
                        for k in 0..n {
                            let (ak, bk) = (pick(va, k), pick(vb, k));
                            gb[k] = gb[k] - g[k] * ak / (bk * bk);
                        }
                    } else {
                        let mut s = T::zero();
                        for k in 0..n {
                            let (ak, bk) = (pick(va, k), pick(vb, k));
                            s = s - g[k] * ak / (bk * bk);
                        }
                        gb[0] = gb[0] + s;
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(a), val(b));
                acc(a, &mut |ga| {
                    // ga[m,k] += g[m,n] · bᵀ
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &vb[c * n..(c + 1) * n];
                            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            ga[r * k + c] = ga[r * k + c] + dot;
                        }
                    }
                });
                acc(b, &mut |gb| {
                    // gb[k,n] += aᵀ · g
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let av = va[r * k + c];
                            if av == T::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[c * n..(c + 1) * n].iter_mut().zip(grow) {
                                *o = *o + av * gv;
                            }
                        }
                    }
                });
            }
            &Op::Conv2d(x, w, bias) => {
                let sx = self.nodes[x].value.shape();
                let geom = ConvGeom {
                    cin: sx[0],
                    cout: self.nodes[w].value.shape()[0],
                    h: sx[1],
                    w: sx[2],
                };
                let (vx, vw) = (val(x), val(w));
                acc(x, &mut |gx| conv_backward_input(g, vw, gx, geom));
                acc(w, &mut |gw| conv_backward_weight(g, vx, gw, geom));
                if let Some(b) = bias {
                    let hw = geom.h * geom.w;
                    acc(b, &mut |gb| {
                        for (co, o) in gb.iter_mut().enumerate() {
                            *o = *o + g[co * hw..(co + 1) * hw].iter().copied().sum();
                        }
                    });
                }
            }
            &Op::Relu(x) => {
                let vx = val(x);
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        if vx[k] > T::zero() {
                            gx[k] = gx[k] + g[k];
                        }
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] = gx[k] + g[k] * y[k] * (T::one() - y[k]);
                    }
                });
            }
            &Op::Exp(x) => {
                let y = node.value.data();
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] = gx[k] + g[k] * y[k];
                    }
                });
            }
            &Op::Log(x) => {
                let vx = val(x);
                let guard = T::of(LOG_GUARD);
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        if vx[k] > guard {
                            gx[k] = gx[k] + g[k] / vx[k];
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|e| *e = *e + g[0])),
            &Op::Mean(x) => {
                let n = T::of(self.nodes[x].value.numel() as f64);
                acc(x, &mut |gx| gx.iter_mut().for_each(|e| *e = *e + g[0] / n));
            }
            Op::MaxReduce { src, argmax } => {
                let inner = argmax.len();
                acc(*src, &mut |gx| {
                    for (k, &r) in argmax.iter().enumerate() {
                        let idx = r as usize * inner + k;
                        gx[idx] = gx[idx] + g[k];
                    }
                });
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let last = node.value.shape().last().copied().unwrap_or(1).max(1);
                acc(x, &mut |gx| {
                    for ((gr, yr), gxr) in g.chunks(last).zip(y.chunks(last)).zip(gx.chunks_mut(last)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for k in 0..last {
                            gxr[k] = gxr[k] + yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            &Op::SquaredL2(x) => {
                let vx = val(x);
                let two = T::of(2.0);
                acc(x, &mut |gx| {
                    for k in 0..vx.len() {
                        gx[k] = gx[k] + two * vx[k] * g[0];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    let slice = &g[off..off + n];
                    acc(p, &mut |gp| {
                        for (o, &s) in gp.iter_mut().zip(slice) {
                            *o = *o + s;
                        }
                    });
                    off += n;
                }
            }
            &Op::Reshape(x) => acc(x, &mut |gx| {
                for (o, &s) in gx.iter_mut().zip(g) {
                    *o = *o + s;
                }
            }),
        }
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Accumulates `g` into `dst`, summing when `dst` is a broadcast scalar.
fn add_broadcast<T: Real>(dst: &mut [T], g: &[T], f: impl Fn(T) -> T) {
    if dst.len() == g.len() {
        for (d, &x) in dst.iter_mut().zip(g) {
            *d = *d + f(x);
        }
    } else {
        let s: T = g.iter().map(|&x| f(x)).sum();
        dst[0] = dst[0] + s;
    }
}

/// `dst += f(g, other)` with scalar broadcasting on either `dst` or `other`.
fn add_product<T: Real>(dst: &mut [T], g: &[T], other: &[T], f: impl Fn(T, T) -> T) {
    let pick = |k: usize| if other.len() == 1 { other[0] } else { other[k] };
    if dst.len() == g.len() {
        for k in 0..g.len() {
            dst[k] = dst[k] + f(g[k], pick(k));
        }
    } else {
        let s: T = (0..g.len()).map(|k| f(g[k], pick(k))).sum();
        dst[0] = dst[0] + s;
    }
}

fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

/// Valid row/column ranges for a tap offset `d ∈ {-1,0,1}` over extent `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n.saturating_sub(1) } else { n };
    (lo, hi)
}

fn conv_forward<T: Real>(x: &[T], w: &[T], out: &mut [T], g: ConvGeom) {
    let hw = g.h * g.w;
    for co in 0..g.cout {
        let oplane = &mut out[co * hw..(co + 1) * hw];
        for ci in 0..g.cin {
            let iplane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (ylo, yhi) = tap_range(dy, g.h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = tap_range(dx, g.w);
                    let wv = w[((co * g.cin + ci) * 3 + ky) * 3 + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut oplane[y * g.w + xlo..y * g.w + xhi];
                        let start = (sy * g.w + xlo) as isize + dx;
                        let irow = &iplane[start as usize..start as usize + (xhi - xlo)];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o = *o + wv * i;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input<T: Real>(gout: &[T], w: &[T], gx: &mut [T], g: ConvGeom) {
    let hw = g.h * g.w;
    for co in 0..g.cout {
        let gplane = &gout[co * hw..(co + 1) * hw];
        for ci in 0..g.cin {
            let xplane = &mut gx[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (ylo, yhi) = tap_range(dy, g.h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = tap_range(dx, g.w);
                    let wv = w[((co * g.cin + ci) * 3 + ky) * 3 + kx];
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gplane[y * g.w + xlo..y * g.w + xhi];
                        let start = ((sy * g.w + xlo) as isize + dx) as usize;
                        let xrow = &mut xplane[start..start + (xhi - xlo)];
                        for (o, &gv) in xrow.iter_mut().zip(grow) {
                            *o = *o + wv * gv;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight<T: Real>(gout: &[T], x: &[T], gw: &mut [T], g: ConvGeom) {
    let hw = g.h * g.w;
    for co in 0..g.cout {
        let gplane = &gout[co * hw..(co + 1) * hw];
        for ci in 0..g.cin {
            let xplane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (ylo, yhi) = tap_range(dy, g.h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = tap_range(dx, g.w);
                    let mut s = T::zero();
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gplane[y * g.w + xlo..y * g.w + xhi];
                        let start = ((sy * g.w + xlo) as isize + dx) as usize;
                        let xrow = &xplane[start..start + (xhi - xlo)];
                        s = s + grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    let idx = ((co * g.cin + ci) * 3 + ky) * 3 + kx;
                    gw[idx] = gw[idx] + s;
                }
            }
        }
    }
}

/// Result of a reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient buffer for `v`, if any gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros when nothing reached it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).numel()])
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Vec<T>)> {
        self.params
    }

    /// L2 norm over all registered parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
