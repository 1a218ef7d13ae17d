//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its forward value and whatever it needs for
//! the backward pass. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients; [`Tape::accumulate_into`] then adds the gradients of
//! bound parameters into their [`ParamSet`].
//!
//! Ops check their inputs' shapes and reject non-finite outputs, so a
//! diverging run surfaces as [`Error::Numeric`] at the op that blew up.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    MulConst {
        a: Var,
        factors: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedSqMean {
        pred: Var,
        target: Tensor,
        mask: Vec<bool>,
        scale: f64,
        count: usize,
    },
    MaskedCosine {
        pred: Var,
        target: Tensor,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<(u64, ParamId), Var>,
    backward_done: bool,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.bound.clear();
        self.backward_done = false;
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

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input that is not a parameter.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// A constant: gradients are never propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Binds a parameter to this tape. Binding the same parameter twice
    /// returns the same node.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let key = (set.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let p = set.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
            param: Some(key),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(key, v);
        v
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta);
        let (br, bc) = dims2(tb);
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}{}",
                ta.shape(),
                tb.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), m, k, false, tb.data(), br, bc, trans_b, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_rows(m, n, out)?,
            Op::MatMul { a, b, trans_b },
            rg,
            "matmul",
        )
    }

    /// Adds a rank-1 bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(Error::Dimension(format!(
                "bias {:?} does not broadcast over {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(bias);
        self.push(Tensor::new(shape, out)?, Op::AddRow { a, bias }, rg, "add_row")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub { a, b }, rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * c).collect(),
        )?;
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, c }, rg, "scale")
    }

    /// Elementwise product with fixed factors (dropout masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if factors.len() != ta.len() {
            return Err(Error::Dimension(format!(
                "mul_const: {} factors for {:?}",
                factors.len(),
                ta.shape()
            )));
        }
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(&factors).map(|(x, f)| x * f).collect(),
        )?;
        let rg = self.rg(a);
        self.push(out, Op::MulConst { a, factors }, rg, "mul_const")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg, "mean")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Softmax { a }, rg, "softmax")
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = dims2(tx);
        if tg.len() != c || tb.len() != c {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias {:?}/{:?} for width {c}",
                tg.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Gelu { a }, rg, "gelu")
    }

    /// 1-D convolution over time. `x` is `T × C_in`, `w` is
    /// `(kernel·C_in) × C_out` (tap-major), `b` has `C_out` entries.
    /// Padding is symmetric zero padding.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (t_in, c_in) = dims2(tx);
        let (wr, c_out) = dims2(tw);
        if wr != kernel * c_in || tb.len() != c_out {
            return Err(Error::Dimension(format!(
                "conv1d weight {:?} / bias {:?} for kernel {kernel} and {c_in} input channels",
                tw.shape(),
                tb.shape()
            )));
        }
        let t_out = conv_out_len(t_in, kernel, stride, pad).ok_or(Error::InputLength {
            len: t_in,
            min: kernel.saturating_sub(2 * pad).max(1),
        })?;
        let kc = kernel * c_in;
        let mut cols = vec![0.0; t_out * kc];
        for t in 0..t_out {
            for j in 0..kernel {
                let src = (t * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    let s = src as usize;
                    cols[t * kc + j * c_in..t * kc + (j + 1) * c_in]
                        .copy_from_slice(&tx.data()[s * c_in..(s + 1) * c_in]);
                }
            }
        }
        let mut out = vec![0.0; t_out * c_out];
        for row in out.chunks_mut(c_out) {
            row.copy_from_slice(tb.data());
        }
        gemm(&cols, t_out, kc, false, tw.data(), kc, c_out, false, &mut out, 1.0);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::from_rows(t_out, c_out, out)?,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            },
            rg,
            "conv1d",
        )
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q`, `k`, `v` (each `T × D`). Heads split the feature axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = dims2(tq);
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(Error::Dimension(format!(
                "attention q/k/v shapes {:?} {:?} {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut qh = vec![0.0; t * dh];
        let mut kh = vec![0.0; t * dh];
        let mut vh = vec![0.0; t * dh];
        let mut oh = vec![0.0; t * dh];
        for h in 0..heads {
            gather_head(tq.data(), d, h, dh, &mut qh);
            gather_head(tk.data(), d, h, dh, &mut kh);
            gather_head(tv.data(), d, h, dh, &mut vh);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(&qh, t, dh, false, &kh, t, dh, true, p, 0.0);
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let visible = if causal { i + 1 } else { t };
                row[..visible].iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(&mut row[..visible]);
                row[visible..].iter_mut().for_each(|s| *s = 0.0);
            }
            gemm(p, t, t, false, &vh, t, dh, false, &mut oh, 0.0);
            scatter_head(&oh, d, h, dh, &mut out);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::from_rows(t, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Stacks matrices with equal widths along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::Dimension(format!(
                    "concat_rows width {} vs {c}",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_rows(rows, c, data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
            "concat_rows",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.rows() {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {end}) of {:?}",
                ta.shape()
            )));
        }
        let out = ta.slice_rows(start, end);
        let rg = self.rg(a);
        self.push(out, Op::SliceRows { a, start }, rg, "slice_rows")
    }

    /// Looks up rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, c) = dims2(tt);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= v {
                return Err(Error::Range(format!("row {i} outside table of {v} rows")));
            }
            data.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::from_rows(ids.len(), c, data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// Mean token-level cross entropy of `logits` (`N × V`) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = dims2(tl);
        if n != targets.len() || n == 0 {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} logit rows for {} targets",
                targets.len()
            )));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let t = targets[i];
            if t >= v {
                return Err(Error::Range(format!("target {t} outside vocabulary of {v}")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Mean over masked rows and all columns of `(scale · (pred − target))²`.
    /// Zero when the mask selects nothing.
    pub fn masked_sq_mean(
        &mut self,
        pred: Var,
        target: &Tensor,
        mask: &[bool],
        scale: f64,
    ) -> Result<Var> {
        let tp = self.value(pred);
        let (r, c) = dims2(tp);
        if target.shape() != tp.shape() || mask.len() != r {
            return Err(Error::Dimension(format!(
                "masked_sq_mean: pred {:?}, target {:?}, mask {}",
                tp.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let rows = mask.iter().filter(|m| **m).count();
        let count = rows * c;
        let mut acc = 0.0;
        for i in (0..r).filter(|&i| mask[i]) {
            for (p, t) in tp.row(i).iter().zip(target.row(i)) {
                let e = scale * (p - t);
                acc += e * e;
            }
        }
        let value = if count == 0 { 0.0 } else { acc / count as f64 };
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(value),
            Op::MaskedSqMean {
                pred,
                target: target.clone(),
                mask: mask.to_vec(),
                scale,
                count,
            },
            rg,
            "masked_sq_mean",
        )
    }

    /// Mean cosine similarity between rows of `pred` and `target` over masked
    /// rows. A row where either vector has zero norm contributes 0.
    /// Returns the node and the number of zero-norm rows.
    pub fn masked_cosine(
        &mut self,
        pred: Var,
        target: &Tensor,
        mask: &[bool],
    ) -> Result<(Var, usize)> {
        let tp = self.value(pred);
        let r = tp.rows();
        if target.shape() != tp.shape() || mask.len() != r {
            return Err(Error::Dimension(format!(
                "masked_cosine: pred {:?}, target {:?}, mask {}",
                tp.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let rows = mask.iter().filter(|m| **m).count();
        let mut acc = 0.0;
        let mut zero = 0;
        for i in (0..r).filter(|&i| mask[i]) {
            match cosine(tp.row(i), target.row(i)) {
                Some((cos, _, _)) => acc += cos,
                None => zero += 1,
            }
        }
        let value = if rows == 0 { 0.0 } else { acc / rows as f64 };
        let rg = self.rg(pred);
        let v = self.push(
            Tensor::scalar(value),
            Op::MaskedCosine {
                pred,
                target: target.clone(),
                mask: mask.to_vec(),
            },
            rg,
            "masked_cosine",
        )?;
        Ok((v, zero))
    }

    // ---- backward ----------------------------------------------------

    /// Back-propagates from the scalar `loss`. Gradients stay on the tape
    /// until [`Tape::accumulate_into`] or [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        for g in self.grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite gradient"));
            }
        }
        Ok(())
    }

    /// Adds gradients of parameters bound from `set` into `set`. Trainable
    /// parameters no gradient reached receive zeros.
    pub fn accumulate_into(&self, set: &mut ParamSet) {
        let uid = set.uid();
        for p in set.iter_mut().filter(|p| p.requires_grad) {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let Some((owner, id)) = node.param else {
                continue;
            };
            if owner != uid {
                continue;
            }
            let p = set.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            if let (Some(src), Some(dst)) = (self.grads.get(i).and_then(|g| g.as_ref()), p.grad.as_mut())
            {
                for (d, s) in dst.data_mut().iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    fn accum(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Ops are small; taking the op out avoids fighting the borrow checker
        // while parents' gradients are accumulated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims2(self.value(*a));
                let (br, bc) = dims2(self.value(*b));
                let n = if *trans_b { br } else { bc };
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g, m, n, false, self.value(*b).data(), br, bc, !*trans_b, &mut da, 0.0);
                    self.accum(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; br * bc];
                    if *trans_b {
                        gemm(g, m, n, true, self.value(*a).data(), m, k, false, &mut db, 0.0);
                    } else {
                        gemm(self.value(*a).data(), m, k, true, g, m, n, false, &mut db, 0.0);
                    }
                    self.accum(*b, db);
                }
            }
            Op::AddRow { a, bias } => {
                let c = self.value(*bias).len();
                if self.rg(*bias) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accum(*bias, db);
                }
                self.accum(*a, g.to_vec());
            }
            Op::Add { a, b } => {
                self.accum(*a, g.to_vec());
                self.accum(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accum(*a, g.to_vec());
                self.accum(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.accum(*a, d);
                }
                if self.rg(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accum(*b, d);
                }
            }
            Op::Scale { a, c } => {
                self.accum(*a, g.iter().map(|x| x * c).collect());
            }
            Op::MulConst { a, factors } => {
                self.accum(*a, g.iter().zip(factors).map(|(x, f)| x * f).collect());
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                self.accum(*a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                self.accum(*a, vec![g[0] / n as f64; n]);
            }
            Op::Softmax { a } => {
                let y = self.nodes[i].value.data();
                let c = self.nodes[i].value.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data().to_vec();
                if self.rg(*beta) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(*beta, db);
                }
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; c];
                    for (row, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += row[j] * hr[j];
                        }
                    }
                    self.accum(*gamma, dg);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dr[j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    self.accum(*x, dx);
                }
            }
            Op::Gelu { a } => {
                let d = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accum(*a, d);
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let (t_in, c_in) = dims2(self.value(*x));
                let (kc, c_out) = dims2(self.value(*w));
                let t_out = g.len() / c_out;
                if self.rg(*b) {
                    let mut db = vec![0.0; c_out];
                    for row in g.chunks(c_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(*b, db);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; kc * c_out];
                    gemm(cols, t_out, kc, true, g, t_out, c_out, false, &mut dw, 0.0);
                    self.accum(*w, dw);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; t_out * kc];
                    gemm(g, t_out, c_out, false, self.value(*w).data(), kc, c_out, true, &mut dcols, 0.0);
                    let mut dx = vec![0.0; t_in * c_in];
                    for t in 0..t_out {
                        for j in 0..*kernel {
                            let src = (t * stride + j) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t_in {
                                let s = src as usize;
                                let from = &dcols[t * kc + j * c_in..t * kc + (j + 1) * c_in];
                                for (d, v) in dx[s * c_in..(s + 1) * c_in].iter_mut().zip(from) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    self.accum(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (t, d) = dims2(self.value(*q));
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut qh = vec![0.0; t * dh];
                let mut kh = vec![0.0; t * dh];
                let mut vh = vec![0.0; t * dh];
                let mut goh = vec![0.0; t * dh];
                let mut dp = vec![0.0; t * t];
                let mut tmp = vec![0.0; t * dh];
                for h in 0..*heads {
                    gather_head(self.value(*q).data(), d, h, dh, &mut qh);
                    gather_head(self.value(*k).data(), d, h, dh, &mut kh);
                    gather_head(self.value(*v).data(), d, h, dh, &mut vh);
                    gather_head(g, d, h, dh, &mut goh);
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    // dV = Pᵀ dO
                    gemm(p, t, t, true, &goh, t, dh, false, &mut tmp, 0.0);
                    scatter_head(&tmp, d, h, dh, &mut dv);
                    // dP = dO Vᵀ, then softmax backward
                    gemm(&goh, t, dh, false, &vh, t, dh, true, &mut dp, 0.0);
                    for r in 0..t {
                        let pr = &p[r * t..(r + 1) * t];
                        let dr = &mut dp[r * t..(r + 1) * t];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..t {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    gemm(&dp, t, t, false, &kh, t, dh, false, &mut tmp, 0.0);
                    scatter_head(&tmp, d, h, dh, &mut dq);
                    gemm(&dp, t, t, true, &qh, t, dh, false, &mut tmp, 0.0);
                    scatter_head(&tmp, d, h, dh, &mut dk);
                }
                self.accum(*q, dq);
                self.accum(*k, dk);
                self.accum(*v, dv);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accum(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut d = vec![0.0; ta.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                self.accum(*a, d);
            }
            Op::Gather { table, ids } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut d = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, src) in d[id * c..(id + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *dst += src;
                    }
                }
                self.accum(*table, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let v = probs.len() / n;
                let s = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= s;
                }
                self.accum(*logits, d);
            }
            Op::MaskedSqMean {
                pred,
                target,
                mask,
                scale,
                count,
            } => {
                let tp = self.value(*pred);
                let c = tp.cols();
                let mut d = vec![0.0; tp.len()];
                if *count > 0 {
                    let f = g[0] * 2.0 * scale * scale / *count as f64;
                    for r in (0..mask.len()).filter(|&r| mask[r]) {
                        for j in 0..c {
                            d[r * c + j] = f * (tp.data()[r * c + j] - target.data()[r * c + j]);
                        }
                    }
                }
                self.accum(*pred, d);
            }
            Op::MaskedCosine { pred, target, mask } => {
                let tp = self.value(*pred);
                let c = tp.cols();
                let rows = mask.iter().filter(|m| **m).count();
                let mut d = vec![0.0; tp.len()];
                if rows > 0 {
                    let f = g[0] / rows as f64;
                    for r in (0..mask.len()).filter(|&r| mask[r]) {
                        let (p, t) = (tp.row(r), target.row(r));
                        if let Some((cos, pn, tn)) = cosine(p, t) {
                            for j in 0..c {
                                d[r * c + j] = f * (t[j] / (pn * tn) - cos * p[j] / (pn * pn));
                            }
                        }
                    }
                }
                self.accum(*pred, d);
            }
        }
        self.nodes[i].op = op;
    }
}

/// Output length of a 1-D convolution, or `None` if the input is too short.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = t + 2 * pad;
    if t == 0 || padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Cosine similarity plus both norms; `None` if either norm is zero.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Option<(f64, f64, f64)> {
    let an = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let bn = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if an == 0.0 || bn == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (an * bn), an, bn))
}

fn gather_head(src: &[f64], d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for (r, out) in dst.chunks_mut(dh).enumerate() {
        out.copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
}

fn scatter_head(src: &[f64], d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for (r, inp) in src.chunks(dh).enumerate() {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(inp);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_rows(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_is_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3)).unwrap();
        let a = tape
            .constant(t(3, 3, &[1.0, -2.0, 3.5, 0.0, 4.0, 1.0, 9.0, 8.0, -7.0]))
            .unwrap();
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 2, &[0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 2, &[1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_param_grads() {
        let mut set = ParamSet::new();
        let w = set.add("w", t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let mut tape = Tape::new();
        let _ = tape.param(&set, w);
        let c = tape.constant(Tensor::scalar(3.0)).unwrap();
        tape.backward(c).unwrap();
        tape.accumulate_into(&mut set);
        assert!(set.get(w).grad.as_ref().unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn second_backward_without_reset_is_a_state_error() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 1, &[3.0])).unwrap();
        let y = tape.sum(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::State(_))));
        tape.reset();
        let x = tape.input(t(1, 1, &[3.0])).unwrap();
        let y = tape.sum(x).unwrap();
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn non_finite_output_is_a_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 1, &[1e200])).unwrap();
        assert!(matches!(tape.mul(x, x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.input(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
        let c = tape.input(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(tape.add(a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_output_length_formula() {
        assert_eq!(conv_out_len(100, 6, 2, 2), Some(50));
        assert_eq!(conv_out_len(2, 6, 2, 2), Some(1));
        assert_eq!(conv_out_len(1, 6, 2, 2), None);
        for t in 2..500 {
            assert_eq!(conv_out_len(t, 6, 2, 2), Some((t - 2) / 2 + 1));
        }
    }

    #[test]
    fn conv1d_forward_matches_direct_sum() {
        let mut tape = Tape::new();
        let xdata: Vec<f64> = (0..10).map(|v| v as f64 * 0.3 - 1.0).collect(); // 5x2
        let wdata: Vec<f64> = (0..18).map(|v| (v as f64).sin()).collect(); // (3*2)x3
        let x = tape.input(t(5, 2, &xdata)).unwrap();
        let w = tape.input(t(6, 3, &wdata)).unwrap();
        let b = tape.input(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let y = tape.conv1d(x, w, b, 3, 2, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[3, 3]);
        for to in 0..3 {
            for o in 0..3 {
                let mut s = [0.1, 0.2, 0.3][o];
                for j in 0..3 {
                    let src = (to * 2 + j) as isize - 1;
                    if (0..5).contains(&src) {
                        for c in 0..2 {
                            s += xdata[src as usize * 2 + c] * wdata[(j * 2 + c) * 3 + o];
                        }
                    }
                }
                assert!((out.data()[to * 3 + o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let mut tape = Tape::new();
        let q = tape.input(t(3, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0])).unwrap();
        let v = tape.input(t(3, 2, &[7.0, -1.0, 2.0, 2.0, 0.0, 5.0])).unwrap();
        let y = tape.attention(q, q, v, 1, true).unwrap();
        assert_eq!(tape.value(y).row(0), &[7.0, -1.0]);
    }
}
