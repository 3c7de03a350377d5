//! Define-by-run reverse-mode tape.
//!
//! Forward builders compute values immediately through the shared
//! [`kernels`](super::kernels) and push one node per op; `backward` walks the
//! node list in reverse. Parameters enter as leaf nodes that borrow their
//! values from the [`ParamStore`], so building a tape copies no weights.
//! Gradients only propagate through subgraphs that reach a trainable
//! parameter; with the base model frozen, its blocks run at evaluation cost.

use super::kernels as k;
use super::params::{GradStore, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use std::collections::HashMap;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Param(usize),
    Constant,
    /// bias (broadcast per row) + sum of x_i * W_i, in term order.
    AffineSum {
        terms: Vec<(Var, Var)>,
        bias: Option<Var>,
    },
    /// Sparse-input embedding: row t = bias + sum of W rows at indices[t].
    EmbedRows {
        w: Var,
        bias: Var,
        indices: Vec<Vec<u32>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(F, F)>, // (mean, rstd) per row
    },
    /// Multi-head causal self-attention with learned relative-offset biases.
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        bias: Var, // [heads, n_off]
        heads: usize,
        probs: Vec<F>, // [heads, T, T], lower-triangular
    },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Clamp {
        x: Var,
        lo: F,
        hi: F,
    },
    AffineConst {
        x: Var,
        mul: F,
    },
    /// Broadcast scalar node times tensor node.
    MulScalar {
        s: Var,
        x: Var,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        c0: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        r0: usize,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Per-row -log softmax(logits)[target]; output [T,1].
    SoftmaxXent {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<F>,
    },
    /// Per-row sum of Bernoulli cross-entropies against sparse targets.
    BernoulliXent {
        logits: Var,
        active: Vec<Vec<u32>>,
    },
}

struct Node<F> {
    op: Op<F>,
    rows: usize,
    cols: usize,
    val: Vec<F>, // empty for Param nodes (values live in the store)
    requires_grad: bool,
}

pub struct Tape<'s, F: Scalar> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<usize, Var>,
}

impl<'s, F: Scalar> Tape<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, v: Var) -> &[F] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(slot) => &self.store.tensor(ParamId(slot)).data,
            _ => &n.val,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<F> {
        let (r, c) = self.shape(v);
        Tensor::from_vec(r, c, self.val(v).to_vec())
    }

    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.val(v)[0]
    }

    fn push(&mut self, op: Op<F>, rows: usize, cols: usize, val: Vec<F>, rg: bool) -> Var {
        // Param nodes carry no values of their own (they live in the store).
        debug_assert!(val.is_empty() || val.len() == rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            val,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves ------------------------------------------------------

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        let t = self.store.tensor(id);
        let rg = self.store.is_trainable(id);
        let v = self.push(Op::Param(id.0), t.rows, t.cols, Vec::new(), rg);
        self.param_vars.insert(id.0, v);
        v
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let (r, c) = (t.rows, t.cols);
        self.push(Op::Constant, r, c, t.data, false)
    }

    pub fn constant_row(&mut self, data: Vec<F>) -> Var {
        let c = data.len();
        self.push(Op::Constant, 1, c, data, false)
    }

    pub fn scalar_const(&mut self, x: F) -> Var {
        self.push(Op::Constant, 1, 1, vec![x], false)
    }

    // ---- ops ---------------------------------------------------------

    /// y = bias + sum_i x_i * W_i (bias broadcast across rows).
    pub fn affine_sum(&mut self, terms: &[(Var, Var)], bias: Option<Var>) -> Var {
        assert!(!terms.is_empty());
        let rows = self.shape(terms[0].0).0;
        let n = self.shape(terms[0].1).1;
        let mut kernel_terms = Vec::with_capacity(terms.len());
        for &(x, w) in terms {
            let (xr, xc) = self.shape(x);
            let (wr, wc) = self.shape(w);
            assert_eq!(xr, rows, "affine_sum: row mismatch");
            assert_eq!(xc, wr, "affine_sum: inner-dim mismatch ({xc} vs {wr})");
            assert_eq!(wc, n, "affine_sum: output-dim mismatch");
            kernel_terms.push((self.val(x), self.val(w), xc));
        }
        let bias_slice = bias.map(|b| {
            assert_eq!(self.shape(b), (1, n), "affine_sum: bias shape");
            self.val(b)
        });
        let mut out = vec![F::zero(); rows * n];
        k::affine_sum_into(&mut out, rows, n, bias_slice, &kernel_terms);
        let rg = terms.iter().any(|&(x, w)| self.rg(x) || self.rg(w))
            || bias.map(|b| self.rg(b)).unwrap_or(false);
        self.push(
            Op::AffineSum {
                terms: terms.to_vec(),
                bias,
            },
            rows,
            n,
            out,
            rg,
        )
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.affine_sum(&[(x, w)], Some(b))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        self.affine_sum(&[(x, w)], None)
    }

    /// Sparse one-hot rows times W plus bias: the observation embedding.
    pub fn embed_rows(&mut self, w: Var, bias: Var, indices: Vec<Vec<u32>>) -> Var {
        let (in_dim, n) = self.shape(w);
        assert_eq!(self.shape(bias), (1, n));
        let rows = indices.len();
        let mut out = vec![F::zero(); rows * n];
        {
            let wv = self.val(w);
            let bv = self.val(bias);
            for (t, idx) in indices.iter().enumerate() {
                let row = &mut out[t * n..(t + 1) * n];
                row.copy_from_slice(bv);
                for &i in idx {
                    let i = i as usize;
                    assert!(i < in_dim, "embed index out of range");
                    let wrow = &wv[i * n..(i + 1) * n];
                    for j in 0..n {
                        row[j] += wrow[j];
                    }
                }
            }
        }
        let rg = self.rg(w) || self.rg(bias);
        self.push(Op::EmbedRows { w, bias, indices }, rows, n, out, rg)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let (rows, n) = self.shape(x);
        assert_eq!(self.shape(gain), (1, n));
        assert_eq!(self.shape(bias), (1, n));
        let mut out = vec![F::zero(); rows * n];
        let mut stats = Vec::with_capacity(rows);
        {
            let xv = self.val(x);
            let gv = self.val(gain);
            let bv = self.val(bias);
            for r in 0..rows {
                let s = k::layernorm_row(
                    &xv[r * n..(r + 1) * n],
                    gv,
                    bv,
                    eps,
                    &mut out[r * n..(r + 1) * n],
                );
                stats.push(s);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rows,
            n,
            out,
            rg,
        )
    }

    /// Multi-head causal self-attention. `q`,`k`,`v`: [T, d]; `bias`:
    /// [heads, n_off] relative-offset score biases; position t attends to
    /// s <= t only.
    pub fn causal_attention(&mut self, q: Var, kk: Var, v: Var, bias: Var, heads: usize) -> Var {
        let (t_len, d) = self.shape(q);
        assert_eq!(self.shape(kk), (t_len, d));
        assert_eq!(self.shape(v), (t_len, d));
        assert_eq!(d % heads, 0, "heads must divide model width");
        let dh = d / heads;
        let (bh, _n_off) = self.shape(bias);
        assert_eq!(bh, heads, "bias table rows must equal heads");
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![F::zero(); t_len * d];
        let mut probs = vec![F::zero(); heads * t_len * t_len];
        {
            let qv = self.val(q);
            let kv = self.val(kk);
            let vv = self.val(v);
            let bv = self.val(bias);
            let n_off = self.shape(bias).1;
            for h in 0..heads {
                let off = h * dh;
                let btab = &bv[h * n_off..(h + 1) * n_off];
                for t in 0..t_len {
                    let qrow = &qv[t * d + off..t * d + off + dh];
                    let prow = &mut probs[h * t_len * t_len + t * t_len..][..t + 1];
                    let orow = &mut out[t * d + off..t * d + off + dh];
                    k::attn_head_row(qrow, kv, vv, d, off, t, dh, scale, btab, prow, orow);
                }
            }
        }
        let rg = self.rg(q) || self.rg(kk) || self.rg(v) || self.rg(bias);
        self.push(
            Op::CausalAttention {
                q,
                k: kk,
                v,
                bias,
                heads,
                probs,
            },
            t_len,
            d,
            out,
            rg,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: impl Fn(Var) -> Op<F>) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<F> = self.val(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(op(x), r, c, out, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, k::gelu, Op::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, k::sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, k::softplus, Op::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "elementwise shape mismatch");
        let out: Vec<F> = self
            .val(a)
            .iter()
            .zip(self.val(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(op, r, c, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), |x| Op::Clamp { x, lo, hi })
    }

    pub fn affine_const(&mut self, x: Var, mul: F, add: F) -> Var {
        self.unary(x, |v| v * mul + add, |x| Op::AffineConst { x, mul })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine_const(x, -F::one(), F::zero())
    }

    /// Broadcast multiply by a [1,1] scalar node.
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let (r, c) = self.shape(x);
        let sv = self.val(s)[0];
        let out: Vec<F> = self.val(x).iter().map(|&v| sv * v).collect();
        let rg = self.rg(s) || self.rg(x);
        self.push(Op::MulScalar { s, x }, r, c, out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = vec![F::zero(); rows * total];
        let mut c0 = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, rows, "concat_cols: row mismatch");
            let pv = self.val(p);
            for r in 0..rows {
                out[r * total + c0..r * total + c0 + pc]
                    .copy_from_slice(&pv[r * pc..(r + 1) * pc]);
            }
            c0 += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), rows, total, out, rg)
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(x);
        assert!(c0 + len <= cols);
        let xv = self.val(x);
        let mut out = vec![F::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&xv[r * cols + c0..r * cols + c0 + len]);
        }
        let rg = self.rg(x);
        self.push(Op::SliceCols { x, c0 }, rows, len, out, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            assert_eq!(self.shape(p).1, cols, "concat_rows: col mismatch");
            out.extend_from_slice(self.val(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), rows, cols, out, rg)
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(x);
        assert!(r0 + len <= rows);
        let out = self.val(x)[r0 * cols..(r0 + len) * cols].to_vec();
        let rg = self.rg(x);
        self.push(Op::SliceRows { x, r0 }, len, cols, out, rg)
    }

    pub fn row(&mut self, x: Var, r: usize) -> Var {
        self.slice_rows(x, r, 1)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r * c, rows * cols, "reshape numel mismatch");
        let out = self.val(x).to_vec();
        let rg = self.rg(x);
        self.push(Op::Reshape(x), rows, cols, out, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.val(x) {
            acc += v;
        }
        let rg = self.rg(x);
        self.push(Op::SumAll(x), 1, 1, vec![acc], rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let numel = self.val(x).len();
        let mut acc = F::zero();
        for &v in self.val(x) {
            acc += v;
        }
        let rg = self.rg(x);
        self.push(
            Op::MeanAll(x),
            1,
            1,
            vec![acc / F::from_f64(numel as f64)],
            rg,
        )
    }

    /// Per-row categorical cross-entropy: out[t] = -log softmax(logits[t])[target[t]].
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<u32>) -> Var {
        let (rows, c) = self.shape(logits);
        assert_eq!(targets.len(), rows);
        let mut probs = vec![F::zero(); rows * c];
        let mut out = vec![F::zero(); rows];
        {
            let lv = self.val(logits);
            for r in 0..rows {
                let row = &mut probs[r * c..(r + 1) * c];
                row.copy_from_slice(&lv[r * c..(r + 1) * c]);
                k::log_softmax_row(row);
                out[r] = -row[targets[r] as usize];
                for p in row.iter_mut() {
                    *p = p.exp();
                }
            }
        }
        let rg = self.rg(logits);
        self.push(
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
            rows,
            1,
            out,
            rg,
        )
    }

    /// Per-row summed Bernoulli cross-entropy against sparse binary targets:
    /// out[t] = sum_d softplus(x) - x * y, with y the indicator of
    /// `active[t]`.
    pub fn bernoulli_xent(&mut self, logits: Var, active: Vec<Vec<u32>>) -> Var {
        let (rows, c) = self.shape(logits);
        assert_eq!(active.len(), rows);
        let mut out = vec![F::zero(); rows];
        {
            let lv = self.val(logits);
            for r in 0..rows {
                let row = &lv[r * c..(r + 1) * c];
                let mut acc = F::zero();
                for &x in row {
                    acc += k::softplus(x);
                }
                for &i in &active[r] {
                    acc -= row[i as usize];
                }
                out[r] = acc;
            }
        }
        let rg = self.rg(logits);
        self.push(Op::BernoulliXent { logits, active }, rows, 1, out, rg)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar loss. Returns parameter gradients keyed by
    /// store slot; non-trainable subgraphs are skipped entirely.
    pub fn backward(&mut self, loss: Var) -> GradStore<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = GradStore::new(self.store.len());

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            // Param leaves: hand the accumulated gradient to the result.
            if let Op::Param(slot) = self.nodes[i].op {
                let (r, c) = (self.nodes[i].rows, self.nodes[i].cols);
                out.accumulate(slot, Tensor::from_vec(r, c, dy));
                continue;
            }
            self.backprop_node(i, &dy, &mut grads);
        }
        out
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut [Option<Vec<F>>],
        v: Var,
    ) -> Option<&'a mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); r * c]))
    }

    #[allow(clippy::needless_range_loop)]
    fn backprop_node(&self, i: usize, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::AffineSum { terms, bias } => {
                for &(x, w) in terms {
                    let (xr, xc) = self.shape(x);
                    let (_, wc) = self.shape(w);
                    if self.nodes[x.0].requires_grad {
                        let wv = self.val(w).to_vec();
                        let gx = self.grad_buf(grads, x).unwrap();
                        k::matmul_a_bt_acc(gx, dy, &wv, xr, wc, xc);
                    }
                    if self.nodes[w.0].requires_grad {
                        let xv = self.val(x).to_vec();
                        let gw = self.grad_buf(grads, w).unwrap();
                        k::matmul_at_b_acc(gw, &xv, dy, xr, xc, wc);
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.grad_buf(grads, *b) {
                        for r in 0..rows {
                            for j in 0..cols {
                                gb[j] += dy[r * cols + j];
                            }
                        }
                    }
                }
            }
            Op::EmbedRows { w, bias, indices } => {
                if self.nodes[w.0].requires_grad {
                    let gw = self.grad_buf(grads, *w).unwrap();
                    for (t, idx) in indices.iter().enumerate() {
                        for &iw in idx {
                            let iw = iw as usize;
                            for j in 0..cols {
                                gw[iw * cols + j] += dy[t * cols + j];
                            }
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for t in 0..rows {
                        for j in 0..cols {
                            gb[j] += dy[t * cols + j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let xv = self.val(*x).to_vec();
                let gv = self.val(*gain).to_vec();
                let n = F::from_f64(cols as f64);
                if self.nodes[x.0].requires_grad {
                    let gx = self.grad_buf(grads, *x).unwrap();
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let xrow = &xv[r * cols..(r + 1) * cols];
                        let dyrow = &dy[r * cols..(r + 1) * cols];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..cols {
                            let a = gv[j] * dyrow[j];
                            let xhat = (xrow[j] - mean) * rstd;
                            m1 += a;
                            m2 += a * xhat;
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        let grow = &mut gx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let a = gv[j] * dyrow[j];
                            let xhat = (xrow[j] - mean) * rstd;
                            grow[j] += rstd * (a - m1 - xhat * m2);
                        }
                    }
                }
                if self.nodes[gain.0].requires_grad {
                    let gg = self.grad_buf(grads, *gain).unwrap();
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        for j in 0..cols {
                            let xhat = (xv[r * cols + j] - mean) * rstd;
                            gg[j] += dy[r * cols + j] * xhat;
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..cols {
                            gb[j] += dy[r * cols + j];
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k: kk,
                v,
                bias,
                heads,
                probs,
            } => {
                let t_len = rows;
                let d = cols;
                let heads = *heads;
                let dh = d / heads;
                let scale = F::from_f64(1.0 / (dh as f64).sqrt());
                let n_off = self.shape(*bias).1;
                let qv = self.val(*q).to_vec();
                let kv = self.val(*kk).to_vec();
                let vv = self.val(*v).to_vec();
                let mut gq = vec![F::zero(); t_len * d];
                let mut gk = vec![F::zero(); t_len * d];
                let mut gv_ = vec![F::zero(); t_len * d];
                let mut gb = vec![F::zero(); heads * n_off];
                for h in 0..heads {
                    let off = h * dh;
                    let pbase = h * t_len * t_len;
                    for t in 0..t_len {
                        let prow = &probs[pbase + t * t_len..][..t + 1];
                        let dout = &dy[t * d + off..t * d + off + dh];
                        // dV and dp
                        let mut dp = vec![F::zero(); t + 1];
                        for s in 0..=t {
                            let p = prow[s];
                            let vrow = &vv[s * d + off..s * d + off + dh];
                            let gvrow = &mut gv_[s * d + off..s * d + off + dh];
                            let mut acc = F::zero();
                            for j in 0..dh {
                                gvrow[j] += p * dout[j];
                                acc += dout[j] * vrow[j];
                            }
                            dp[s] = acc;
                        }
                        // softmax backward: dscore = p * (dp - sum p*dp)
                        let mut pdp = F::zero();
                        for s in 0..=t {
                            pdp += prow[s] * dp[s];
                        }
                        for s in 0..=t {
                            let dscore = prow[s] * (dp[s] - pdp);
                            let qrow = &qv[t * d + off..t * d + off + dh];
                            let krow = &kv[s * d + off..s * d + off + dh];
                            let gqrow = &mut gq[t * d + off..t * d + off + dh];
                            for j in 0..dh {
                                gqrow[j] += dscore * krow[j] * scale;
                            }
                            let gkrow = &mut gk[s * d + off..s * d + off + dh];
                            for j in 0..dh {
                                gkrow[j] += dscore * qrow[j] * scale;
                            }
                            gb[h * n_off + (t - s).min(n_off - 1)] += dscore;
                        }
                    }
                }
                if let Some(g) = self.grad_buf(grads, *q) {
                    for (a, b) in g.iter_mut().zip(gq) {
                        *a += b;
                    }
                }
                if let Some(g) = self.grad_buf(grads, *kk) {
                    for (a, b) in g.iter_mut().zip(gk) {
                        *a += b;
                    }
                }
                if let Some(g) = self.grad_buf(grads, *v) {
                    for (a, b) in g.iter_mut().zip(gv_) {
                        *a += b;
                    }
                }
                if let Some(g) = self.grad_buf(grads, *bias) {
                    for (a, b) in g.iter_mut().zip(gb) {
                        *a += b;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).to_vec();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..xv.len() {
                        g[j] += dy[j] * k::gelu_grad(xv[j]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.val.clone();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..yv.len() {
                        g[j] += dy[j] * yv[j] * (F::one() - yv[j]);
                    }
                }
            }
            Op::Tanh(x) => {
                let yv = node.val.clone();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..yv.len() {
                        g[j] += dy[j] * (F::one() - yv[j] * yv[j]);
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.val(*x).to_vec();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..xv.len() {
                        g[j] += dy[j] * k::sigmoid(xv[j]);
                    }
                }
            }
            Op::Exp(x) => {
                let yv = node.val.clone();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..yv.len() {
                        g[j] += dy[j] * yv[j];
                    }
                }
            }
            Op::Ln(x) => {
                let xv = self.val(*x).to_vec();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..xv.len() {
                        g[j] += dy[j] / xv[j];
                    }
                }
            }
            Op::Sqrt(x) => {
                let yv = node.val.clone();
                if let Some(g) = self.grad_buf(grads, *x) {
                    let two = F::from_f64(2.0);
                    for j in 0..yv.len() {
                        g[j] += dy[j] / (two * yv[j]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.grad_buf(grads, *v) {
                        for j in 0..dy.len() {
                            g[j] += dy[j];
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.grad_buf(grads, *a) {
                    for j in 0..dy.len() {
                        g[j] += dy[j];
                    }
                }
                if let Some(g) = self.grad_buf(grads, *b) {
                    for j in 0..dy.len() {
                        g[j] -= dy[j];
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.val(*a).to_vec();
                let bv = self.val(*b).to_vec();
                if let Some(g) = self.grad_buf(grads, *a) {
                    for j in 0..dy.len() {
                        g[j] += dy[j] * bv[j];
                    }
                }
                if let Some(g) = self.grad_buf(grads, *b) {
                    for j in 0..dy.len() {
                        g[j] += dy[j] * av[j];
                    }
                }
            }
            Op::Min(a, b) => {
                let av = self.val(*a).to_vec();
                let bv = self.val(*b).to_vec();
                if let Some(g) = self.grad_buf(grads, *a) {
                    for j in 0..dy.len() {
                        if av[j] <= bv[j] {
                            g[j] += dy[j];
                        }
                    }
                }
                if let Some(g) = self.grad_buf(grads, *b) {
                    for j in 0..dy.len() {
                        if av[j] > bv[j] {
                            g[j] += dy[j];
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.val(*x).to_vec();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..xv.len() {
                        if xv[j] > *lo && xv[j] < *hi {
                            g[j] += dy[j];
                        }
                    }
                }
            }
            Op::AffineConst { x, mul } => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..dy.len() {
                        g[j] += dy[j] * *mul;
                    }
                }
            }
            Op::MulScalar { s, x } => {
                let sv = self.val(*s)[0];
                let xv = self.val(*x).to_vec();
                if let Some(g) = self.grad_buf(grads, *s) {
                    let mut acc = F::zero();
                    for j in 0..dy.len() {
                        acc += dy[j] * xv[j];
                    }
                    g[0] += acc;
                }
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..dy.len() {
                        g[j] += dy[j] * sv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if let Some(g) = self.grad_buf(grads, p) {
                        for r in 0..pr {
                            for j in 0..pc {
                                g[r * pc + j] += dy[r * cols + c0 + j];
                            }
                        }
                    }
                    c0 += pc;
                }
            }
            Op::SliceCols { x, c0 } => {
                let (_, xc) = self.shape(*x);
                if let Some(g) = self.grad_buf(grads, *x) {
                    for r in 0..rows {
                        for j in 0..cols {
                            g[r * xc + c0 + j] += dy[r * cols + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if let Some(g) = self.grad_buf(grads, p) {
                        for j in 0..pr * pc {
                            g[j] += dy[r0 * cols + j];
                        }
                    }
                    r0 += pr;
                }
            }
            Op::SliceRows { x, r0 } => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..rows * cols {
                        g[r0 * cols + j] += dy[j];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    for j in 0..dy.len() {
                        g[j] += dy[j];
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    for v in g.iter_mut() {
                        *v += dy[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                let numel = self.val(*x).len();
                let scale = dy[0] / F::from_f64(numel as f64);
                if let Some(g) = self.grad_buf(grads, *x) {
                    for v in g.iter_mut() {
                        *v += scale;
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let (_, c) = self.shape(*logits);
                if let Some(g) = self.grad_buf(grads, *logits) {
                    for r in 0..rows {
                        let d = dy[r];
                        for j in 0..c {
                            g[r * c + j] += d * probs[r * c + j];
                        }
                        g[r * c + targets[r] as usize] -= d;
                    }
                }
            }
            Op::BernoulliXent { logits, active } => {
                let (_, c) = self.shape(*logits);
                let lv = self.val(*logits).to_vec();
                if let Some(g) = self.grad_buf(grads, *logits) {
                    for r in 0..rows {
                        let d = dy[r];
                        for j in 0..c {
                            g[r * c + j] += d * k::sigmoid(lv[r * c + j]);
                        }
                        for &ia in &active[r] {
                            g[r * c + ia as usize] -= d;
                        }
                    }
                }
            }
        }
    }
}

/// Central finite-difference gradient check at f64 precision.
///
/// Rebuilds the loss through `f` after perturbing each parameter component
/// and compares against the tape gradient. Returns the worst relative error
/// (scaled by max(1, |analytic|, |numeric|)).
pub fn finite_diff_check<Build>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    f: Build,
) -> f64
where
    Build: Fn(&mut Tape<'_, f64>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape);
        tape.backward(loss)
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.tensor(id).numel();
        for j in 0..n {
            let orig = store.tensor(id).data[j];
            store.tensor_mut(id).data[j] = orig + h;
            let lp = {
                let mut tape = Tape::new(store);
                let l = f(&mut tape);
                tape.scalar_value(l)
            };
            store.tensor_mut(id).data[j] = orig - h;
            let lm = {
                let mut tape = Tape::new(store);
                let l = f(&mut tape);
                tape.scalar_value(l)
            };
            store.tensor_mut(id).data[j] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic
                .get(id)
                .map(|t| t.data[j])
                .unwrap_or(0.0);
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
