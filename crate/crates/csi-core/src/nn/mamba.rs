//! Selective state-space (Mamba) layer: ZOH discretization, the recurrent
//! and prefix-scan convolutional forms, and the gated layer wrapper.

use super::{Binding, FflParams, LayerNormParams, LinearParams, ModelParams, ParamId};
use crate::tensor::{ParamInit, Tape, Tensor, Var};

/// ZOH discretization of a diagonal continuous pair (a, b) at step d:
/// abar_i = exp(d a_i), bbar_i = (exp(d a_i) - 1)/a_i * b_i, with the
/// analytic limit bbar_i = d b_i at a_i = 0.
pub fn ssm_discretize(a: &[f64], b: &[f64], d: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(d > 0.0, "step must be positive, got {d}");
    assert_eq!(a.len(), b.len());
    let mut abar = Vec::with_capacity(a.len());
    let mut bbar = Vec::with_capacity(a.len());
    for (&ai, &bi) in a.iter().zip(b) {
        let e = (d * ai).exp();
        abar.push(e);
        bbar.push(if ai.abs() < 1e-12 { d * bi } else { (e - 1.0) / ai * bi });
    }
    (abar, bbar)
}

/// Per-step discretized scan parameters for one channel: abar/bbar/c are
/// [T][N_H] and drive s_t = abar_t (.) s_{t-1} + bbar_t h_t, y_t = c_t . s_t.
#[derive(Debug, Clone)]
pub struct ScanParams {
    pub abar: Vec<Vec<f64>>,
    pub bbar: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

/// Sequential (recurrent) evaluation of the scan.
pub fn ssm_recurrent(p: &ScanParams, h: &[f64]) -> Vec<f64> {
    let t_len = h.len();
    assert_eq!(p.abar.len(), t_len);
    let n = if t_len == 0 { 0 } else { p.abar[0].len() };
    let mut s = vec![0.0; n];
    let mut y = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut acc = 0.0;
        for i in 0..n {
            s[i] = p.abar[t][i] * s[i] + p.bbar[t][i] * h[t];
            acc += p.c[t][i] * s[i];
        }
        y.push(acc);
    }
    y
}

/// Parallelizable form: an inclusive associative scan over per-step pairs
/// (abar, bbar h) with compose((a1,u1),(a2,u2)) = (a1 a2, a2 u1 + u2),
/// evaluated as a divide-and-conquer prefix-product scan.
pub fn ssm_convolutional(p: &ScanParams, h: &[f64]) -> Vec<f64> {
    let t_len = h.len();
    if t_len == 0 {
        return vec![];
    }
    let n = p.abar[0].len();
    // element type: per-state (a, u) pair vectors
    type Elem = (Vec<f64>, Vec<f64>);
    fn compose(x: &Elem, y: &Elem) -> Elem {
        let a = x.0.iter().zip(&y.0).map(|(a1, a2)| a1 * a2).collect();
        let u = x
            .1
            .iter()
            .zip(&y.0)
            .zip(&y.1)
            .map(|((u1, a2), u2)| a2 * u1 + u2)
            .collect();
        (a, u)
    }
    fn scan(items: &mut [Elem]) {
        // inclusive prefix scan by recursive halving
        let n = items.len();
        if n <= 1 {
            return;
        }
        let mid = n / 2;
        let (lo, hi) = items.split_at_mut(mid);
        scan(lo);
        scan(hi);
        let carry = lo[mid - 1].clone();
        for e in hi.iter_mut() {
            *e = compose(&carry, e);
        }
    }
    let mut items: Vec<Elem> = (0..t_len)
        .map(|t| {
            (
                p.abar[t].clone(),
                (0..n).map(|i| p.bbar[t][i] * h[t]).collect(),
            )
        })
        .collect();
    scan(&mut items);
    (0..t_len)
        .map(|t| (0..n).map(|i| p.c[t][i] * items[t].1[i]).sum())
        .collect()
}

/// One selective-SSM layer: input expansion, short causal depthwise
/// convolution, input-conditioned (B, C, step), the fused scan, a
/// SiLU-gated parallel branch, and the output projection.
#[derive(Debug, Clone, Copy)]
pub struct MambaLayerParams {
    pub d_model: usize,
    pub d_f: usize,
    pub n_h: usize,
    pub conv_width: usize,
    pub in_proj: LinearParams,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// Continuous diagonal state matrix, [d_f x n_h].
    pub a: ParamId,
    pub w_b: LinearParams,
    pub w_c: LinearParams,
    /// Rank-1 step projection [d_f x 1] plus bias vector [1 x d_f].
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub out_proj: LinearParams,
}

impl MambaLayerParams {
    pub fn new(
        params: &mut ModelParams,
        init: &mut ParamInit,
        name: &str,
        d_model: usize,
        d_f: usize,
        n_h: usize,
    ) -> Self {
        let conv_width = 4;
        // stable S4D-style init: [a]_i = -(i+1), shared across features
        let a_init = Tensor::matrix(
            d_f,
            n_h,
            (0..d_f * n_h).map(|j| -((j % n_h + 1) as f64)).collect(),
        );
        MambaLayerParams {
            d_model,
            d_f,
            n_h,
            conv_width,
            in_proj: LinearParams::new(params, init, &format!("{name}.in_proj"), d_model, 2 * d_f),
            conv_w: params.add(
                &format!("{name}.conv.w"),
                init.uniform(&[conv_width, d_f], conv_width),
            ),
            conv_b: params.add(&format!("{name}.conv.b"), init.zeros(&[1, d_f])),
            a: params.add(&format!("{name}.a"), a_init),
            w_b: LinearParams::new(params, init, &format!("{name}.w_b"), d_f, n_h),
            w_c: LinearParams::new(params, init, &format!("{name}.w_c"), d_f, n_h),
            w_delta: params.add(&format!("{name}.w_delta"), init.uniform(&[d_f, 1], d_f)),
            b_delta: params.add(&format!("{name}.b_delta"), init.zeros(&[1, d_f])),
            out_proj: LinearParams::new(params, init, &format!("{name}.out_proj"), d_f, d_model),
        }
    }

    /// Convolved branch input plus the input-conditioned scan parameters
    /// (B, C, step) for a `[T x d_model]` input.
    pub fn scan_inputs(&self, tape: &Tape, bind: &Binding, x: Var) -> (Var, Var, Var, Var, Var) {
        let xz = self.in_proj.forward(tape, bind, x);
        let h = tape.slice_cols(xz, 0, self.d_f);
        let z = tape.slice_cols(xz, self.d_f, self.d_f);
        let hc = tape.silu(tape.causal_depthwise_conv(h, bind.var(self.conv_w), bind.var(self.conv_b)));
        let b = self.w_b.forward(tape, bind, hc);
        let c = self.w_c.forward(tape, bind, hc);
        let draw = tape.matmul(hc, bind.var(self.w_delta)); // [T x 1]
        let ones = tape.leaf(Tensor::filled(&[1, self.d_f], 1.0));
        let broad = tape.matmul(draw, ones);
        let step = tape.softplus(tape.add_row_broadcast(broad, bind.var(self.b_delta)));
        (hc, b, c, step, z)
    }

    pub fn forward(&self, tape: &Tape, bind: &Binding, x: Var) -> Var {
        let (hc, b, c, step, z) = self.scan_inputs(tape, bind, x);
        let y = tape.selective_scan(bind.var(self.a), b, c, step, hc);
        let gated = tape.mul(y, tape.silu(z));
        self.out_proj.forward(tape, bind, gated)
    }
}

/// Residual Mamba block: x + layer(LN(x)), then + FFL(LN(.)).
#[derive(Debug, Clone, Copy)]
pub struct MambaBlockParams {
    pub ln1: LayerNormParams,
    pub layer: MambaLayerParams,
    pub ln2: LayerNormParams,
    pub ffl: FflParams,
}

impl MambaBlockParams {
    pub fn new(
        params: &mut ModelParams,
        init: &mut ParamInit,
        name: &str,
        d_model: usize,
        d_f: usize,
        n_h: usize,
        d_ff: usize,
    ) -> Self {
        MambaBlockParams {
            ln1: LayerNormParams::new(params, init, &format!("{name}.ln1"), d_model),
            layer: MambaLayerParams::new(params, init, &format!("{name}.mamba"), d_model, d_f, n_h),
            ln2: LayerNormParams::new(params, init, &format!("{name}.ln2"), d_model),
            ffl: FflParams::new(params, init, &format!("{name}.ffl"), d_model, d_ff),
        }
    }

    pub fn forward(&self, tape: &Tape, bind: &Binding, x: Var) -> Var {
        let h = tape.add(x, self.layer.forward(tape, bind, self.ln1.forward(tape, bind, x)));
        tape.add(h, self.ffl.forward(tape, bind, self.ln2.forward(tape, bind, h)))
    }
}
