//! Transpose feed-forward layer: mixes along both token and feature axes
//! by concatenating projections of a square intermediate and its transpose.

use rand::Rng;

use super::{Binding, LinearParams, ModelParams};
use crate::tensor::{ParamInit, Tape, Var};

/// H^S = H W1 + b1 is [2N_d x 2N_d]; the two half-projections map H^S and
/// its transpose to d_f/2 columns each; W4 maps the concat back to d_h.
#[derive(Debug, Clone, Copy)]
pub struct TfflParams {
    pub n_tokens: usize,
    pub d_h: usize,
    pub d_f: usize,
    pub g1: LinearParams,
    pub g2: LinearParams,
    pub g3: LinearParams,
    pub g4: LinearParams,
    pub dropout_p: f64,
}

impl TfflParams {
    pub fn new(
        params: &mut ModelParams,
        init: &mut ParamInit,
        name: &str,
        n_tokens: usize,
        d_h: usize,
        d_f: usize,
        dropout_p: f64,
    ) -> Self {
        assert!(d_f % 2 == 0, "d_f must be even");
        TfflParams {
            n_tokens,
            d_h,
            d_f,
            g1: LinearParams::new(params, init, &format!("{name}.g1"), d_h, n_tokens),
            g2: LinearParams::new(params, init, &format!("{name}.g2"), n_tokens, d_f / 2),
            g3: LinearParams::new(params, init, &format!("{name}.g3"), n_tokens, d_f / 2),
            g4: LinearParams::new(params, init, &format!("{name}.g4"), d_f, d_h),
            dropout_p,
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bind: &Binding,
        x: Var,
        training: bool,
        rng: &mut impl Rng,
    ) -> Var {
        let hs = self.g1.forward(tape, bind, x);
        let left = self.g2.forward(tape, bind, hs);
        let right = self.g3.forward(tape, bind, tape.transpose(hs));
        let hsc = tape.concat_cols(left, right);
        let act = tape.dropout(tape.relu(hsc), self.dropout_p, training, rng);
        self.g4.forward(tape, bind, act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn build(n_tokens: usize, d_h: usize, d_f: usize) -> (ModelParams, TfflParams) {
        let mut init = ParamInit::new(21);
        let mut p = ModelParams::new();
        let t = TfflParams::new(&mut p, &mut init, "tffl", n_tokens, d_h, d_f, 0.1);
        (p, t)
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let (p, t) = build(4, 3, 4);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let x = tape.leaf(Tensor::zeros(&[4, 3]));
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let y = tape.value_cloned(t.forward(&tape, &bind, x, false, &mut rng));
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[4, 3]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (p, t) = build(4, 3, 4);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let data: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let x1 = tape.leaf(Tensor::matrix(4, 3, data.clone()));
        let x2 = tape.leaf(Tensor::matrix(4, 3, data));
        let mut r1 = ChaCha12Rng::seed_from_u64(1);
        let mut r2 = ChaCha12Rng::seed_from_u64(2);
        let y1 = tape.value_cloned(t.forward(&tape, &bind, x1, false, &mut r1));
        let y2 = tape.value_cloned(t.forward(&tape, &bind, x2, false, &mut r2));
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn training_mode_dropout_changes_output() {
        let (p, t) = build(6, 4, 8);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = tape.leaf(Tensor::matrix(6, 4, data));
        let mut r1 = ChaCha12Rng::seed_from_u64(1);
        let mut r2 = ChaCha12Rng::seed_from_u64(99);
        let y1 = tape.value_cloned(t.forward(&tape, &bind, x, true, &mut r1));
        let y2 = tape.value_cloned(t.forward(&tape, &bind, x, true, &mut r2));
        assert_ne!(y1.data(), y2.data());
    }

    #[test]
    fn hand_case_matches_direct_evaluation() {
        // N_d = 2 tokens... n_tokens=2, d_h=3, d_f=4; identity-ish params
        let mut p = ModelParams::new();
        let mut init = ParamInit::new(0);
        let t = TfflParams::new(&mut p, &mut init, "t", 2, 3, 4, 0.0);
        *p.get_mut(t.g1.w) = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0]);
        *p.get_mut(t.g1.b) = Tensor::matrix(1, 2, vec![0.1, -0.1]);
        *p.get_mut(t.g2.w) = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 1.0]);
        *p.get_mut(t.g2.b) = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        *p.get_mut(t.g3.w) = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 1.0]);
        *p.get_mut(t.g3.b) = Tensor::matrix(1, 2, vec![0.05, 0.05]);
        *p.get_mut(t.g4.w) = Tensor::matrix(4, 3, (1..=12).map(|i| i as f64 * 0.1).collect());
        *p.get_mut(t.g4.b) = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]);
        let x_data = [[0.5, -0.3, 0.2], [0.0, 1.0, -1.0]];
        // manual forward
        let g1w = [[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]];
        let mut hs = [[0.0f64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                hs[i][j] = (0..3).map(|k| x_data[i][k] * g1w[k][j]).sum::<f64>()
                    + [0.1, -0.1][j];
            }
        }
        let g2w = [[1.0, 2.0], [0.0, 1.0]];
        let g3w = [[1.0, 0.0], [1.0, 1.0]];
        let mut hsc = [[0.0f64; 4]; 2];
        for i in 0..2 {
            for j in 0..2 {
                hsc[i][j] = (0..2).map(|k| hs[i][k] * g2w[k][j]).sum::<f64>();
                hsc[i][2 + j] =
                    (0..2).map(|k| hs[k][i] * g3w[k][j]).sum::<f64>() + 0.05;
            }
        }
        let g4w: Vec<f64> = (1..=12).map(|i| i as f64 * 0.1).collect();
        let mut want = [[0.0f64; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                want[i][j] =
                    (0..4).map(|k| hsc[i][k].max(0.0) * g4w[k * 3 + j]).sum::<f64>();
            }
        }
        let tape = Tape::new();
        let bind = Binding::new(&tape, &p);
        let x = tape.leaf(Tensor::matrix(2, 3, x_data.concat()));
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let y = tape.value_cloned(t.forward(&tape, &bind, x, false, &mut rng));
        for i in 0..2 {
            for j in 0..3 {
                assert!(
                    (y.data()[i * 3 + j] - want[i][j]).abs() < 1e-12,
                    "({i},{j}): {} vs {}",
                    y.data()[i * 3 + j],
                    want[i][j]
                );
            }
        }
    }

    #[test]
    fn backward_passes_grad_check() {
        let (p, t) = build(4, 3, 4);
        let x = Tensor::matrix(4, 3, (0..12).map(|i| 0.2 * i as f64 - 1.0).collect());
        let err = grad_check(
            |tape, v| {
                let bind = Binding::new(tape, &p);
                let mut rng = ChaCha12Rng::seed_from_u64(0);
                let y = t.forward(tape, &bind, v, false, &mut rng);
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
