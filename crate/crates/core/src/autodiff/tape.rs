use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `x · Wᵀ + b`, with `W` stored row-major as `out × in` at `weight`
    /// and `b` stored at `bias`, both inside the tape's parameter slice.
    Linear {
        x: NodeId,
        weight: usize,
        bias: usize,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Sum(NodeId),
    /// Column vector reduced by log-sum-exp over consecutive groups of rows.
    SegmentLogSumExp {
        x: NodeId,
        group: usize,
    },
    /// Elementwise `log(exp(c_r) + exp(x_r))` with one constant per row.
    LogAddExpConst {
        x: NodeId,
    },
    ConcatRows(Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Append-only record of a computation over one parameter vector.
///
/// Nodes can only reference earlier nodes, so the node order is already a
/// topological order and the backward pass is a single reverse sweep.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
pub struct Gradients {
    params: Vec<f64>,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to every entry of the parameter vector.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Gradient with respect to an intermediate or leaf node, if the
    /// output depends on it.
    pub fn wrt(&self, node: NodeId) -> Option<&Matrix> {
        self.nodes.get(node.0).and_then(|g| g.as_ref())
    }
}

pub(crate) fn linear_forward(
    params: &[f64],
    weight: usize,
    bias: usize,
    x: &Matrix,
    out: usize,
) -> Matrix {
    let inp = x.cols();
    let w = &params[weight..weight + inp * out];
    let b = &params[bias..bias + out];
    let mut y = Matrix::zeros(x.rows(), out);
    let yd = y.data_mut();
    for r in 0..x.rows() {
        let xr = x.row(r);
        let yr = &mut yd[r * out..(r + 1) * out];
        for (o, slot) in yr.iter_mut().enumerate() {
            let wo = &w[o * inp..(o + 1) * inp];
            let mut acc = b[o];
            for (xi, wi) in xr.iter().zip(wo) {
                acc += xi * wi;
            }
            *slot = acc;
        }
    }
    y
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Usage(format!("{context}: shape {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Input or constant leaf.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn linear(&mut self, x: NodeId, weight: usize, bias: usize, out: usize) -> Result<NodeId> {
        let inp = self.value(x).cols();
        if weight + inp * out > self.params.len() || bias + out > self.params.len() {
            return Err(Error::Usage(format!(
                "linear layer {inp}x{out} at offsets ({weight}, {bias}) exceeds parameter vector of length {}",
                self.params.len()
            )));
        }
        let y = linear_forward(self.params, weight, bias, self.value(x), out);
        Ok(self.push(y, Op::Linear { x, weight, bias }))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(f64::exp);
        self.push(y, Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(f64::ln);
        self.push(y, Op::Log(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let y = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let y = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let y = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddConst(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    pub fn segment_logsumexp(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.cols() != 1 || group == 0 || !v.rows().is_multiple_of(group) {
            return Err(Error::Usage(format!(
                "segment_logsumexp: shape {:?} is not a column divisible into groups of {group}",
                v.shape()
            )));
        }
        let out = v.data().chunks(group).map(logsumexp).collect::<Vec<_>>();
        Ok(self.push(Matrix::column(out), Op::SegmentLogSumExp { x, group }))
    }

    pub fn log_add_exp_const(&mut self, x: NodeId, consts: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x);
        if v.cols() != 1 || v.rows() != consts.len() {
            return Err(Error::Usage(format!(
                "log_add_exp_const: shape {:?} with {} constants",
                v.shape(),
                consts.len()
            )));
        }
        let out = v
            .data()
            .iter()
            .zip(&consts)
            .map(|(&x, &c)| log_add_exp(c, x))
            .collect();
        Ok(self.push(Matrix::column(out), Op::LogAddExpConst { x }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(Error::Usage("concat_rows of nothing".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Usage(format!(
                    "concat_rows: {} vs {} columns",
                    v.cols(),
                    cols
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let m = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(m, Op::ConcatRows(parts.to_vec())))
    }

    /// Reverse sweep from a scalar output, scaled by `seed`.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Gradients> {
        let out = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::Usage(format!("node {} is not on this tape", output.0)))?;
        if !out.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a single scalar output, node {} has shape {:?}",
                output.0,
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut pgrad = vec![0.0; self.params.len()];
        grads[output.0] = Some(Matrix::scalar(seed));
        for i in (0..=output.0).rev() {
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads, &mut pgrad);
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            params: pgrad,
            nodes: grads,
        })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>], pgrad: &mut [f64]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |id: NodeId, m: Matrix| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, weight, bias } => {
                let xv = self.value(*x);
                let (rows, inp, out) = (xv.rows(), xv.cols(), y.cols());
                let w = &self.params[*weight..*weight + inp * out];
                let mut dx = Matrix::zeros(rows, inp);
                {
                    let dxd = dx.data_mut();
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        let dxr = &mut dxd[r * inp..(r + 1) * inp];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            pgrad[*bias + o] += go;
                            let wo = &w[o * inp..(o + 1) * inp];
                            let pw = &mut pgrad[*weight + o * inp..*weight + (o + 1) * inp];
                            for k in 0..inp {
                                dxr[k] += go * wo[k];
                                pw[k] += go * xr[k];
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Tanh(x) => acc(*x, g.zip(y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Relu(x) => acc(
                *x,
                g.zip(self.value(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
            ),
            Op::Exp(x) => acc(*x, g.zip(y, |gi, yi| gi * yi)),
            Op::Log(x) => acc(*x, g.zip(self.value(*x), |gi, xi| gi / xi)),
            Op::Square(x) => acc(*x, g.zip(self.value(*x), |gi, xi| 2.0 * gi * xi)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip(bv, |gi, bi| gi * bi));
                acc(*b, g.zip(av, |gi, ai| gi * ai));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddConst(x) => acc(*x, g.clone()),
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(
                    *x,
                    Matrix::from_vec(r, c, vec![g.get(0, 0); r * c]).expect("shape"),
                );
            }
            Op::SegmentLogSumExp { x, group } => {
                let xv = self.value(*x);
                let dx: Vec<f64> = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(r, &xr)| {
                        let s = r / group;
                        g.data()[s] * (xr - y.data()[s]).exp()
                    })
                    .collect();
                acc(*x, Matrix::column(dx));
            }
            Op::LogAddExpConst { x } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xr, &yr), &gr)| {
                        if xr == f64::NEG_INFINITY {
                            0.0
                        } else {
                            gr * (xr - yr).exp()
                        }
                    })
                    .collect();
                acc(*x, Matrix::column(dx));
            }
            Op::ConcatRows(parts) => {
                let cols = y.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = g.data()[start * cols..(start + rows) * cols].to_vec();
                    acc(p, Matrix::from_vec(rows, cols, slice).expect("shape"));
                    start += rows;
                }
            }
        }
    }
}

/// Numerically stable `log Σ exp(x)`; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
