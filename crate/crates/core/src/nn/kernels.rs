//! Shared low-level kernels.
//!
//! Every function here is the single authority for its accumulation order:
//! the training tape and the incremental (closed-loop) evaluator both call
//! these, which is what makes teacher-forced and step-by-step forwards agree
//! bit for bit. Reductions run in index order; the compiler cannot
//! re-associate float additions, so results are reproducible across runs and
//! thread counts.

use super::tensor::Scalar;

/// C += A * B with A `[m,k]`, B `[k,n]`, C `[m,n]`, ikj loop order.
///
/// Per output element, terms accumulate in increasing k order; with m = 1
/// this is the row-vector matvec used by the incremental evaluator.
pub fn matmul_acc<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A^T * B with A `[m,k]`, B `[m,n]`, C `[k,n]` (weight gradients).
pub fn matmul_at_b_acc<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A * B^T with A `[m,n]`, B `[k,n]`, C `[m,k]` (input gradients).
///
/// B is transposed into scratch first so the inner loop runs over
/// independent output lanes and vectorizes; per-element accumulation order
/// over n is unchanged.
pub fn matmul_a_bt_acc<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let mut bt = vec![F::zero(); n * k];
    for kk in 0..k {
        for j in 0..n {
            bt[j * k + kk] = b[kk * n + j];
        }
    }
    matmul_acc(c, a, &bt, m, n, k);
}

/// out = bias (broadcast per row), then out += sum_i x_i * W_i, accumulated
/// term by term in argument order. The one affine entry point shared by the
/// tape and the evaluator.
pub fn affine_sum_into<F: Scalar>(
    out: &mut [F],
    rows: usize,
    n: usize,
    bias: Option<&[F]>,
    terms: &[(&[F], &[F], usize)], // (x [rows,k], w [k,n], k)
) {
    match bias {
        Some(b) => {
            debug_assert_eq!(b.len(), n);
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(b);
            }
        }
        None => out.iter_mut().for_each(|v| *v = F::zero()),
    }
    for &(x, w, k) in terms {
        matmul_acc(out, x, w, rows, k, n);
    }
}

/// Scalar dot product in index order.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// LayerNorm of one row: returns (mean, rstd) for the backward pass.
pub fn layernorm_row<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
) -> (F, F) {
    let n = F::from_f64(x.len() as f64);
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean = mean / n;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    let rstd = (var + eps).sqrt().recip();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// tanh-approximation GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4);
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// ln(1 + e^x), stable in both tails.
pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One causal attention row for one head.
///
/// `q` is the head's slice of the query row at time `t`; `k_all`/`v_all` are
/// row-major caches with `row_stride` columns per row and the head's columns
/// at `off..off+dh`; `bias` is the head's relative-offset table (entry
/// `min(t-s, len-1)` is added to the score against position `s`). Writes the
/// attention probabilities over `s = 0..=t` into `probs` and accumulates the
/// weighted value sum into `out` (caller zeroes it).
#[allow(clippy::too_many_arguments)]
pub fn attn_head_row<F: Scalar>(
    q: &[F],
    k_all: &[F],
    v_all: &[F],
    row_stride: usize,
    off: usize,
    t: usize,
    dh: usize,
    scale: F,
    bias: &[F],
    probs: &mut [F],
    out: &mut [F],
) {
    debug_assert_eq!(q.len(), dh);
    debug_assert_eq!(probs.len(), t + 1);
    let n_off = bias.len();
    let mut max = F::neg_infinity();
    for s in 0..=t {
        let k = &k_all[s * row_stride + off..s * row_stride + off + dh];
        let o = (t - s).min(n_off - 1);
        let score = dot(q, k) * scale + bias[o];
        probs[s] = score;
        if score > max {
            max = score;
        }
    }
    let mut denom = F::zero();
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        denom += *p;
    }
    let rdenom = denom.recip();
    for p in probs.iter_mut() {
        *p = *p * rdenom;
    }
    for (s, &p) in probs.iter().enumerate() {
        let v = &v_all[s * row_stride + off..s * row_stride + off + dh];
        for j in 0..dh {
            out[j] += p * v[j];
        }
    }
}

/// Numerically stable log-softmax of one row (in place).
pub fn log_softmax_row<F: Scalar>(row: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut denom = F::zero();
    for &v in row.iter() {
        denom += (v - max).exp();
    }
    let lse = max + denom.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

/// Categorical sample from logits.
pub fn sample_categorical<F: Scalar>(logits: &[F], rng: &mut crate::util::Rng) -> usize {
    use rand::Rng as _;
    let mut row: Vec<F> = logits.to_vec();
    log_softmax_row(&mut row);
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &lp) in row.iter().enumerate() {
        acc += lp.as_f64().exp();
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}
