//! Reusable layer parameter bundles with tape and evaluation paths.
//!
//! Each layer exposes a tape builder (training) and an `_eval` twin that
//! calls the same kernels with the same op grouping, so both paths produce
//! bit-identical values.

use super::kernels as k;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::util::Rng;

/// y = x W + b.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut Rng,
    ) -> Linear {
        let std = 1.0 / (n_in as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.w"), Tensor::randn(n_in, n_out, std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, n_out)),
            n_in,
            n_out,
        }
    }

    /// Zero-initialized variant (hypernetwork output heads, policy means).
    pub fn init_zero<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Linear {
        Linear {
            w: store.add(format!("{name}.w"), Tensor::zeros(n_in, n_out)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, n_out)),
            n_in,
            n_out,
        }
    }

    pub fn apply<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.affine(x, w, b)
    }

    pub fn eval<F: Scalar>(&self, store: &ParamStore<F>, x: &[F], out: &mut [F]) {
        debug_assert_eq!(x.len(), self.n_in);
        debug_assert_eq!(out.len(), self.n_out);
        k::affine_sum_into(
            out,
            1,
            self.n_out,
            Some(&store.tensor(self.b).data),
            &[(x, &store.tensor(self.w).data, self.n_in)],
        );
    }
}

/// Gated recurrent cell, write-gate convention:
///   z = sigmoid(x Wxz + h Whz + bz)   (how much of the new candidate to write)
///   r = sigmoid(x Wxr + h Whr + br)
///   n = tanh(x Wxn + r * (h Whn) + bn)
///   h' = z * n + (1 - z) * h
///
/// A saturated-low z keeps the previous state. Gate blocks are packed as
/// [z | r | n] in one fused affine per input.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub n_in: usize,
    pub n_h: usize,
}

impl GruCell {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        n_in: usize,
        n_h: usize,
        rng: &mut Rng,
    ) -> GruCell {
        let sx = 1.0 / (n_in as f64).sqrt();
        let sh = 1.0 / (n_h as f64).sqrt();
        GruCell {
            wx: store.add(format!("{name}.wx"), Tensor::randn(n_in, 3 * n_h, sx, rng)),
            wh: store.add(format!("{name}.wh"), Tensor::randn(n_h, 3 * n_h, sh, rng)),
            bx: store.add(format!("{name}.bx"), Tensor::zeros(1, 3 * n_h)),
            bh: store.add(format!("{name}.bh"), Tensor::zeros(1, 3 * n_h)),
            n_in,
            n_h,
        }
    }

    pub fn step<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var, h: Var) -> Var {
        let n_h = self.n_h;
        let wx = tape.param(self.wx);
        let wh = tape.param(self.wh);
        let bx = tape.param(self.bx);
        let bh = tape.param(self.bh);
        let px = tape.affine(x, wx, bx);
        let ph = tape.affine(h, wh, bh);
        let xz = tape.slice_cols(px, 0, n_h);
        let xr = tape.slice_cols(px, n_h, n_h);
        let xn = tape.slice_cols(px, 2 * n_h, n_h);
        let hz = tape.slice_cols(ph, 0, n_h);
        let hr = tape.slice_cols(ph, n_h, n_h);
        let hn = tape.slice_cols(ph, 2 * n_h, n_h);
        let z_pre = tape.add(xz, hz);
        let z = tape.sigmoid(z_pre);
        let r_pre = tape.add(xr, hr);
        let r = tape.sigmoid(r_pre);
        let gated = tape.mul(r, hn);
        let n_pre = tape.add(xn, gated);
        let n = tape.tanh(n_pre);
        let zn = tape.mul(z, n);
        let omz = tape.affine_const(z, -F::one(), F::one());
        let keep = tape.mul(omz, h);
        tape.add(zn, keep)
    }

    /// Evaluation twin of [`GruCell::step`]: identical op grouping.
    pub fn step_eval<F: Scalar>(&self, store: &ParamStore<F>, x: &[F], h: &[F], h_out: &mut [F]) {
        let n_h = self.n_h;
        let mut px = vec![F::zero(); 3 * n_h];
        let mut ph = vec![F::zero(); 3 * n_h];
        k::affine_sum_into(
            &mut px,
            1,
            3 * n_h,
            Some(&store.tensor(self.bx).data),
            &[(x, &store.tensor(self.wx).data, self.n_in)],
        );
        k::affine_sum_into(
            &mut ph,
            1,
            3 * n_h,
            Some(&store.tensor(self.bh).data),
            &[(h, &store.tensor(self.wh).data, n_h)],
        );
        for j in 0..n_h {
            let z = k::sigmoid(px[j] + ph[j]);
            let r = k::sigmoid(px[n_h + j] + ph[n_h + j]);
            let n = (px[2 * n_h + j] + r * ph[2 * n_h + j]).tanh();
            h_out[j] = z * n + (F::one() - z) * h[j];
        }
    }
}

/// Two-layer perceptron with tanh hidden activation.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        n_in: usize,
        n_hidden: usize,
        n_out: usize,
        rng: &mut Rng,
    ) -> Mlp2 {
        Mlp2 {
            l1: Linear::init(store, &format!("{name}.l1"), n_in, n_hidden, rng),
            l2: Linear::init(store, &format!("{name}.l2"), n_hidden, n_out, rng),
        }
    }

    /// Like [`Mlp2::init`] but with a zero-initialized output layer.
    pub fn init_zero_head<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        n_in: usize,
        n_hidden: usize,
        n_out: usize,
        rng: &mut Rng,
    ) -> Mlp2 {
        Mlp2 {
            l1: Linear::init(store, &format!("{name}.l1"), n_in, n_hidden, rng),
            l2: Linear::init_zero(store, &format!("{name}.l2"), n_hidden, n_out),
        }
    }

    pub fn apply<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let h = self.l1.apply(tape, x);
        let h = tape.tanh(h);
        self.l2.apply(tape, h)
    }

    pub fn eval<F: Scalar>(&self, store: &ParamStore<F>, x: &[F], out: &mut [F]) {
        let mut h = vec![F::zero(); self.l1.n_out];
        self.l1.eval(store, x, &mut h);
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        self.l2.eval(store, &h, out);
    }
}
