//! Multi-head self-attention over `[T x d_h]` token matrices.

use super::{Binding, ModelParams, ParamId};
use crate::tensor::{ParamInit, Tape, Var};

/// Per-head projections plus a shared output projection; d_k = d_v = d_h/N_m.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub d_h: usize,
    pub n_heads: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
}

impl MhaParams {
    pub fn new(
        params: &mut ModelParams,
        init: &mut ParamInit,
        name: &str,
        d_h: usize,
        n_heads: usize,
    ) -> Self {
        assert!(n_heads >= 1 && d_h % n_heads == 0, "n_heads must divide d_h");
        let d_k = d_h / n_heads;
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for i in 0..n_heads {
            wq.push(params.add(&format!("{name}.wq.{i}"), init.uniform(&[d_h, d_k], d_h)));
            wk.push(params.add(&format!("{name}.wk.{i}"), init.uniform(&[d_h, d_k], d_h)));
            wv.push(params.add(&format!("{name}.wv.{i}"), init.uniform(&[d_h, d_k], d_h)));
        }
        let wo = params.add(&format!("{name}.wo"), init.uniform(&[d_h, d_h], d_h));
        MhaParams { d_h, n_heads, wq, wk, wv, wo }
    }

    /// Optionally applies a causal mask (token t attends to 0..=t).
    pub fn forward(&self, tape: &Tape, bind: &Binding, h: Var, causal: bool) -> Var {
        let d_k = self.d_h / self.n_heads;
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut heads: Option<Var> = None;
        for i in 0..self.n_heads {
            let q = tape.matmul(h, bind.var(self.wq[i]));
            let k = tape.matmul(h, bind.var(self.wk[i]));
            let v = tape.matmul(h, bind.var(self.wv[i]));
            let mut logits = tape.scale(tape.matmul(q, tape.transpose(k)), scale);
            if causal {
                logits = apply_causal_mask(tape, logits);
            }
            let attn = tape.softmax_rows(logits);
            let out = tape.matmul(attn, v);
            heads = Some(match heads {
                None => out,
                Some(acc) => tape.concat_cols(acc, out),
            });
        }
        tape.matmul(heads.unwrap(), bind.var(self.wo))
    }
}

/// Adds a large negative constant to the strictly-upper-triangular logits.
fn apply_causal_mask(tape: &Tape, logits: Var) -> Var {
    let shape = tape.shape_of(logits);
    let (t, t2) = (shape[0], shape[1]);
    assert_eq!(t, t2);
    let mut mask = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            mask[i * t + j] = -1e30;
        }
    }
    let m = tape.leaf(crate::tensor::Tensor::matrix(t, t, mask));
    tape.add(logits, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    fn tiny_params() -> (ModelParams, MhaParams) {
        let mut init = ParamInit::new(11);
        let mut p = ModelParams::new();
        let mha = MhaParams::new(&mut p, &mut init, "attn", 4, 2);
        (p, mha)
    }

    #[test]
    fn single_token_is_value_projection() {
        let (p, mha) = tiny_params();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let h = tape.leaf(Tensor::matrix(1, 4, vec![0.3, -0.7, 1.1, 0.2]));
        let y = mha.forward(&tape, &bind, h, false);
        // softmax over one logit is 1, so output = [HWv0 | HWv1] Wo
        let v0 = tape.matmul(h, bind.var(mha.wv[0]));
        let v1 = tape.matmul(h, bind.var(mha.wv[1]));
        let want = tape.matmul(tape.concat_cols(v0, v1), bind.var(mha.wo));
        let (yv, wv) = (tape.value_cloned(y), tape.value_cloned(want));
        for (a, b) in yv.data().iter().zip(wv.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let (p, mha) = tiny_params();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let row = [0.5, -0.1, 0.9, -0.4];
        let h = tape.leaf(Tensor::matrix(3, 4, row.repeat(3)));
        let y = tape.value_cloned(mha.forward(&tape, &bind, h, false));
        for t in 1..3 {
            for c in 0..4 {
                assert!((y.data()[t * 4 + c] - y.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_case_matches_direct_evaluation() {
        // T=2, d_h=4, N_m=2 with hand-set projections
        let mut p = ModelParams::new();
        let mut init = ParamInit::new(0);
        let mha = MhaParams::new(&mut p, &mut init, "a", 4, 2);
        // wq/wk/wv head 0: pick coords 0..2; head 1: coords 2..4
        let pick = |lo: usize| {
            let mut m = vec![0.0; 8];
            m[lo * 2] = 1.0;
            m[(lo + 1) * 2 + 1] = 1.0;
            Tensor::matrix(4, 2, m)
        };
        for i in 0..2 {
            *p.get_mut(mha.wq[i]) = pick(2 * i);
            *p.get_mut(mha.wk[i]) = pick(2 * i);
            *p.get_mut(mha.wv[i]) = pick(2 * i);
        }
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        *p.get_mut(mha.wo) = Tensor::matrix(4, 4, eye);
        let h = [[1.0, 0.0, 0.5, -0.5], [0.0, 1.0, -0.5, 0.5]];
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let hv = tape.leaf(Tensor::matrix(2, 4, h.concat()));
        let y = tape.value_cloned(mha.forward(&tape, &bind, hv, false));
        // direct oracle per head on 2x2 sub-blocks
        let sqrt2 = std::f64::consts::SQRT_2;
        for head in 0..2 {
            let q = [
                [h[0][2 * head], h[0][2 * head + 1]],
                [h[1][2 * head], h[1][2 * head + 1]],
            ];
            for t in 0..2 {
                let l0 = (q[t][0] * q[0][0] + q[t][1] * q[0][1]) / sqrt2;
                let l1 = (q[t][0] * q[1][0] + q[t][1] * q[1][1]) / sqrt2;
                let m = l0.max(l1);
                let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                let z = e0 + e1;
                for c in 0..2 {
                    let want = (e0 * q[0][c] + e1 * q[1][c]) / z;
                    let got = y.data()[t * 4 + 2 * head + c];
                    assert!((got - want).abs() < 1e-12, "head {head} t {t} c {c}");
                }
            }
        }
    }

    #[test]
    fn logit_shift_invariance_through_block() {
        // scaling all keys of one token equally shifts logits per row only
        // through the softmax, which is shift invariant; verify the full
        // block is finite and stable for large-magnitude inputs
        let (p, mha) = tiny_params();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let h = tape.leaf(Tensor::matrix(2, 4, vec![100.0, -50.0, 75.0, -25.0, 60.0, 80.0, -90.0, 10.0]));
        let y = tape.value_cloned(mha.forward(&tape, &bind, h, false));
        assert!(y.all_finite());
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        let (p, mha) = tiny_params();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let mut base = vec![0.1, -0.2, 0.3, 0.4, 0.0, 0.5, -0.5, 0.2, 0.7, 0.1, 0.2, -0.3];
        let h1 = tape.leaf(Tensor::matrix(3, 4, base.clone()));
        let y1 = tape.value_cloned(mha.forward(&tape, &bind, h1, true));
        base[2 * 4] += 10.0; // perturb token 2
        let h2 = tape.leaf(Tensor::matrix(3, 4, base));
        let y2 = tape.value_cloned(mha.forward(&tape, &bind, h2, true));
        for t in 0..2 {
            for c in 0..4 {
                assert!((y1.data()[t * 4 + c] - y2.data()[t * 4 + c]).abs() < 1e-12);
            }
        }
        // unmasked attention does leak the perturbation backwards
        let h3 = tape.leaf(tape.value_cloned(h1));
        let h4 = tape.leaf(tape.value_cloned(h2));
        let u1 = tape.value_cloned(mha.forward(&tape, &bind, h3, false));
        let u2 = tape.value_cloned(mha.forward(&tape, &bind, h4, false));
        let diff: f64 = (0..8).map(|i| (u1.data()[i] - u2.data()[i]).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn backward_passes_grad_check() {
        let (p, mha) = tiny_params();
        let x = Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect());
        let err = grad_check(
            |tape, v| {
                let bind = Binding::new(tape, &p);
                let y = mha.forward(tape, &bind, v, false);
                tape.sum(tape.mul(y, y))
            },
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "grad err {err}");
    }
}
