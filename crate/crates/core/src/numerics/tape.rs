//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op is evaluated eagerly when pushed. The same `eval` routine is
//! used by [`Tape::replay`], so replaying a tape on identical leaves
//! reproduces every intermediate bit for bit.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::kernels::{
    self, gelu, gelu_grad, layer_norm_forward, max_pool2x2, rotary_logits, rotary_logits_backward,
    Mask, RowMix,
};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Softmax {
        x: Var,
        mask: Option<Arc<Mask>>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape {
        x: Var,
        shape: Vec<usize>,
    },
    RowMix {
        x: Var,
        plan: Arc<RowMix>,
    },
    MaxPool {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Rotary {
        q: Var,
        k: Var,
        pos_q: Arc<Vec<i64>>,
        pos_k: Arc<Vec<i64>>,
        base: f64,
        mask: Option<Arc<Mask>>,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation graph in topological (push) order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one output with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input. Leaves receive gradients like any other value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<Mask>>) -> Result<Var> {
        self.push(Op::Softmax { x, mask })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::ConcatRows(parts))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.push(Op::Reshape {
            x,
            shape: shape.into(),
        })
    }

    pub fn row_mix(&mut self, x: Var, plan: Arc<RowMix>) -> Result<Var> {
        self.push(Op::RowMix { x, plan })
    }

    pub fn max_pool2x2(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        self.push(Op::MaxPool { x, rows, cols })
    }

    pub fn rotary_logits(
        &mut self,
        q: Var,
        k: Var,
        pos_q: Arc<Vec<i64>>,
        pos_k: Arc<Vec<i64>>,
        base: f64,
        mask: Option<Arc<Mask>>,
    ) -> Result<Var> {
        self.push(Op::Rotary {
            q,
            k,
            pos_q,
            pos_k,
            base,
            mask,
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// Re-evaluates every recorded op, optionally substituting new leaf
    /// values, and returns the resulting tape.
    pub fn replay(&self, leaves: &[(Var, Tensor)]) -> Result<Tape> {
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Leaf => leaves
                    .iter()
                    .find(|(v, _)| v.0 == i)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| node.value.clone()),
                _ => eval(&node.op, &out.nodes)?,
            };
            out.nodes.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(out)
    }

    /// Reverse pass seeded with ones, i.e. gradients of `Σ output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(self.shape(output).to_vec()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(val(*b))?);
                acc(*b, val(*a).matmul_tn(g)?);
            }
            Op::MatMulNt(a, b) => {
                acc(*a, g.matmul(val(*b))?);
                acc(*b, g.matmul_tn(val(*a))?);
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*bias, Tensor::new(val(*bias).shape().to_vec(), db)?);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Gelu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad(xv))
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xv, gm) = (val(*x), val(*gamma));
                let (_, stats) = layer_norm_forward(xv, gm, val(*beta))?;
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let nr = stats.normalized.row(r);
                    let mut mean_dn = 0.0;
                    let mut mean_dn_n = 0.0;
                    let dn: Vec<f64> = (0..cols).map(|j| gr[j] * gm.data()[j]).collect();
                    for j in 0..cols {
                        dgamma[j] += gr[j] * nr[j];
                        dbeta[j] += gr[j];
                        mean_dn += dn[j];
                        mean_dn_n += dn[j] * nr[j];
                    }
                    mean_dn /= cols as f64;
                    mean_dn_n /= cols as f64;
                    for j in 0..cols {
                        dx[r * cols + j] = stats.rstd[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                acc(*gamma, Tensor::new(gm.shape().to_vec(), dgamma)?);
                acc(*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta)?);
            }
            Op::Softmax { x, .. } => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - inner);
                    }
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
            }
            Op::SliceCols { x, start, len } => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    let mut dp = Vec::with_capacity(pv.len());
                    for r in 0..pv.rows() {
                        dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    acc(p, Tensor::new(pv.shape().to_vec(), dp)?);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    let gp = g.slice_rows(offset, rows)?;
                    acc(p, gp.reshape(val(p).shape().to_vec())?);
                    offset += rows;
                }
            }
            Op::Reshape { x, .. } => acc(*x, g.clone().reshape(val(*x).shape().to_vec())?),
            Op::RowMix { x, plan } => acc(*x, plan.backward(g)),
            Op::MaxPool { x, rows, cols } => {
                let xv = val(*x);
                let (_, argmax) = max_pool2x2(xv, *rows, *cols)?;
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src * d + o % d] += g.data()[o];
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Rotary {
                q,
                k,
                pos_q,
                pos_k,
                base,
                mask,
            } => {
                let (dq, dk) = rotary_logits_backward(
                    val(*q),
                    val(*k),
                    pos_q,
                    pos_k,
                    *base,
                    mask.as_deref(),
                    g,
                )?;
                acc(*q, dq);
                acc(*k, dk);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.shape().to_vec(), g.data()[0]));
            }
        }
        Ok(())
    }
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: &Var| -> Result<&Tensor> {
        nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::OutOfRange(format!("tape variable {}", v.0)))
    };
    match op {
        Op::Leaf => Err(Error::Contract("leaves are not evaluated".into())),
        Op::MatMul(a, b) => val(a)?.matmul(val(b)?),
        Op::MatMulNt(a, b) => val(a)?.matmul_nt(val(b)?),
        Op::Transpose(a) => val(a)?.transpose(),
        Op::Add(a, b) => val(a)?.add(val(b)?),
        Op::AddRow(a, bias) => {
            let (a, bias) = (val(a)?, val(bias)?);
            if bias.len() != a.cols() || a.rank() != 2 {
                return Err(Error::DimensionMismatch {
                    op: "add_row",
                    lhs: a.shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                });
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
            Ok(out)
        }
        Op::Scale(a, s) => Ok(val(a)?.scale(*s)),
        Op::Gelu(a) => Ok(val(a)?.map(gelu)),
        Op::LayerNorm { x, gamma, beta } => kernels::layer_norm(val(x)?, val(gamma)?, val(beta)?),
        Op::Softmax { x, mask } => kernels::softmax_rows(val(x)?, mask.as_deref()),
        Op::SliceCols { x, start, len } => {
            let x = val(x)?;
            if start + len > x.cols() || x.rank() != 2 {
                return Err(Error::OutOfRange(format!(
                    "columns {start}..{} of {:?}",
                    start + len,
                    x.shape()
                )));
            }
            let mut out = Vec::with_capacity(x.rows() * len);
            for r in 0..x.rows() {
                out.extend_from_slice(&x.row(r)[*start..start + len]);
            }
            Tensor::new([x.rows(), *len], out)
        }
        Op::ConcatCols(parts) => {
            let tensors = parts.iter().map(val).collect::<Result<Vec<_>>>()?;
            let Some(first) = tensors.first() else {
                return Err(Error::EmptyInput("concat_cols needs at least one tensor"));
            };
            let rows = first.rows();
            if let Some(bad) = tensors.iter().find(|t| t.rows() != rows || t.rank() != 2) {
                return Err(Error::DimensionMismatch {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: bad.shape().to_vec(),
                });
            }
            let cols: usize = tensors.iter().map(|t| t.cols()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in &tensors {
                    out.extend_from_slice(t.row(r));
                }
            }
            Tensor::new([rows, cols], out)
        }
        Op::ConcatRows(parts) => {
            let tensors = parts.iter().map(val).collect::<Result<Vec<_>>>()?;
            Tensor::concat_rows(&tensors)
        }
        Op::Reshape { x, shape } => val(x)?.clone().reshape(shape.clone()),
        Op::RowMix { x, plan } => plan.apply(val(x)?),
        Op::MaxPool { x, rows, cols } => max_pool2x2(val(x)?, *rows, *cols).map(|(t, _)| t),
        Op::Rotary {
            q,
            k,
            pos_q,
            pos_k,
            base,
            mask,
        } => rotary_logits(val(q)?, val(k)?, pos_q, pos_k, *base, mask.as_deref()),
        Op::Sum(x) => Ok(Tensor::scalar(val(x)?.sum())),
    }
}
