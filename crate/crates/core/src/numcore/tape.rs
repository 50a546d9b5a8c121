//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it executes. Parameters are read by
//! reference from a [`ParamStore`]; the backward pass returns [`Gradients`]
//! which the caller folds into the store with [`ParamStore::accumulate`].

use super::kernels;
use super::param::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Softmax(Var),
    /// Weighted sum over rows of `-ln softmax(logits)[target]`; the softmax is
    /// cached in the node's auxiliary slot.
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    /// Row `r` of the output is `mask[r]·new[r] + (1-mask[r])·old[r]`.
    RowBlend {
        new: Var,
        old: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    aux: Option<Tensor>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what}")))
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::invalid(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Number of recorded ops.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("value-less node"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        self.nodes.push(Node {
            value: Some(value),
            aux: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Parameter leaf; repeated calls for one id return the same var.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return Ok(v);
        }
        let p = self.store.get(id);
        check_finite(&p.value, &p.name)?;
        self.nodes.push(Node {
            value: None,
            aux: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    fn zip_same(&self, a: Var, b: Var, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Broadcast-add a bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = kernels::add_row(self.value(a), self.value(bias))?;
        self.push(out, Op::AddRow(a, bias), "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_cols(&tensors)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_rows(&tensors)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = kernels::slice_cols(self.value(a), start, end)?;
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_matrix() {
            return Err(Error::invalid("softmax needs a matrix"));
        }
        let out = kernels::softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a), "softmax")
    }

    /// `Σ_r weights[r] · −ln softmax(logits_r)[targets[r]]`, a scalar.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let l = self.value(logits);
        if !l.is_matrix() || targets.len() != l.rows() || weights.len() != l.rows() {
            return Err(Error::invalid(format!(
                "softmax_xent: logits {:?}, {} targets, {} weights",
                l.shape(),
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= l.cols()) {
            return Err(Error::invalid(format!("target {t} outside {} classes", l.cols())));
        }
        let probs = kernels::softmax_rows(l);
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                let row = l.row(r);
                loss += w * (kernels::log_sum_exp(row) - row[t]);
            }
        }
        let v = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            "softmax_xent",
        )?;
        self.nodes[v.0].aux = Some(probs);
        Ok(v)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = kernels::embedding_rows(self.value(table), ids)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn row_blend(&mut self, new: Var, old: Var, mask: &[f64]) -> Result<Var> {
        let (tn, to) = (self.value(new), self.value(old));
        if !tn.same_shape(to) || !tn.is_matrix() || mask.len() != tn.rows() {
            return Err(shape_err("row_blend", tn, to));
        }
        let cols = tn.cols();
        let mut data = Vec::with_capacity(tn.len());
        for (r, &m) in mask.iter().enumerate() {
            for c in 0..cols {
                data.push(m * tn.row(r)[c] + (1.0 - m) * to.row(r)[c]);
            }
        }
        let out = Tensor::matrix(tn.rows(), cols, data)?;
        self.push(
            out,
            Op::RowBlend {
                new,
                old,
                mask: mask.to_vec(),
            },
            "row_blend",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.store.len()];

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match &mut param_grads[id.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let da = kernels::gemm(&g, false, self.value(*b), true)?;
                    let db = kernels::gemm(self.value(*a), true, &g, false)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let bshape = self.value(*bias).shape().to_vec();
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *bias, Tensor::new(bshape, db)?);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = zip(&g, tb, |x, y| x * y);
                    let db = zip(&g, ta, |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    acc(&mut grads, *a, zip(&g, y, |gv, yv| gv * yv * (1.0 - yv)));
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    acc(&mut grads, *a, zip(&g, y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(&mut grads, *p, kernels::slice_cols(&g, start, start + w)?);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut start = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        let data = g.data()[start * cols..(start + r) * cols].to_vec();
                        acc(&mut grads, *p, Tensor::matrix(r, cols, data)?);
                        start += r;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Tensor::zeros(src.shape());
                    let (cols, w) = (src.cols(), g.cols());
                    for r in 0..src.rows() {
                        da.data_mut()[r * cols + start..r * cols + start + w]
                            .copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let cols = y.cols();
                    let mut da = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            da.data_mut()[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    weights,
                } => {
                    let gs = g.item();
                    let mut d = node.aux.clone().unwrap();
                    let cols = d.cols();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let row = &mut d.data_mut()[r * cols..(r + 1) * cols];
                        row[t] -= 1.0;
                        let k = gs * w;
                        row.iter_mut().for_each(|v| *v *= k);
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::Embedding { table, ids } => {
                    let tshape = self.value(*table).shape().to_vec();
                    let dim = tshape[1];
                    let mut dt = Tensor::zeros(&tshape);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * dim..(id + 1) * dim];
                        for (d, v) in dst.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::full(&shape, g.item()));
                }
                Op::RowBlend { new, old, mask } => {
                    let cols = g.cols();
                    let mut dn = g.clone();
                    let mut dold = g;
                    for (r, &m) in mask.iter().enumerate() {
                        dn.data_mut()[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .for_each(|v| *v *= m);
                        dold.data_mut()[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .for_each(|v| *v *= 1.0 - m);
                    }
                    acc(&mut grads, *new, dn);
                    acc(&mut grads, *old, dold);
                }
            }
        }
        Ok(Gradients { grads: param_grads })
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Free-function form of [`Tape::backward`]. Fold the result into the
/// store with [`ParamStore::accumulate`] once the tape is dropped.
pub fn backward(tape: &Tape<'_>, loss: Var) -> Result<Gradients> {
    tape.backward(loss)
}
