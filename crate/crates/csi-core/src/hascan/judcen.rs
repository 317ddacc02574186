//! Fusion of the lifted downlink feedback with the uplink sounding rows.
//!
//! Rows are (k, l, n); the trunk output columns are (c, tx, rx). After the
//! trunk, every (row, tx, rx) antenna pair becomes one token whose two
//! features are the real/imaginary parts, all tokens of a sample batched
//! into one `[K*L*N*N_Tx*N_Rx x d_f]` matrix for the attention blocks.

use super::HascanConfig;
use crate::nn::{Binding, LinearParams, ModelParams, ParamId, SabParams};
use crate::tensor::{ParamInit, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

pub struct Judcen {
    d_in: usize,
    d_mid: usize,
    n_kln: usize,
    d_f: usize,
    pub trunk: LinearParams,
    /// Batch-norm over the (c, tx, rx) trunk columns. The running
    /// statistics live in the registry but are bound as constants, so the
    /// optimizer never touches them; only gain/bias are learnable.
    pub bn_gain: ParamId,
    pub bn_bias: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub token_lift: LinearParams,
    pub sabs: Vec<SabParams>,
    pub token_out: LinearParams,
}

impl Judcen {
    pub fn new(cfg: &HascanConfig, params: &mut ModelParams, init: &mut ParamInit) -> Self {
        let width = cfg.grid.n_tx * cfg.grid.n_rx;
        let d_mid = 2 * width;
        let d_in = 2 * d_mid; // DL rows and UL rows are both 2*N_Tx*N_Rx wide
        assert_eq!(cfg.grid.n_rx, cfg.pilot.m_s, "UL rows must match DL width");
        Judcen {
            d_in,
            d_mid,
            n_kln: cfg.n_kln(),
            d_f: cfg.d_f,
            trunk: LinearParams::new(params, init, "judcen.trunk", d_in, d_mid),
            bn_gain: params.add("judcen.bn.gain", init.ones(&[1, d_mid])),
            bn_bias: params.add("judcen.bn.bias", init.zeros(&[1, d_mid])),
            bn_mean: params.add("judcen.bn.mean", init.zeros(&[1, d_mid])),
            bn_var: params.add("judcen.bn.var", init.ones(&[1, d_mid])),
            token_lift: LinearParams::new(params, init, "judcen.token_lift", 2, cfg.d_f),
            sabs: (0..cfg.n_sa)
                .map(|i| {
                    SabParams::new(params, init, &format!("judcen.sab.{i}"), cfg.d_f, cfg.d_f)
                })
                .collect(),
            token_out: LinearParams::new(params, init, "judcen.token_out", cfg.d_f, 2),
        }
    }

    fn batch_norm(&self, tape: &Tape, bind: &Binding, params: &ModelParams, x: Var) -> Var {
        let mean = params.get(self.bn_mean);
        let var = params.get(self.bn_var);
        let neg_mean = Tensor::matrix(1, self.d_mid, mean.data().iter().map(|m| -m).collect());
        let inv_std = Tensor::matrix(
            1,
            self.d_mid,
            var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
        );
        let xc = tape.add_row_broadcast(x, tape.leaf(neg_mean));
        let xn = tape.mul_row_broadcast(xc, tape.leaf(inv_std));
        let scaled = tape.mul_row_broadcast(xn, bind.var(self.bn_gain));
        tape.add_row_broadcast(scaled, bind.var(self.bn_bias))
    }

    /// The trunk activations before normalization, exposed so the trainer
    /// can refresh the running statistics off tape.
    pub fn trunk_pre_bn(
        &self,
        tape: &Tape,
        bind: &Binding,
        dl_rows: Var,
        ul_rows: Var,
    ) -> Var {
        let x = tape.concat_cols(dl_rows, ul_rows);
        debug_assert_eq!(tape.value_cloned(x).shape(), &[self.n_kln, self.d_in]);
        self.trunk.forward(tape, bind, x)
    }

    /// Exponential-moving-average update of the frozen statistics from a
    /// batch of trunk activations.
    pub fn update_stats(&self, params: &mut ModelParams, pre_bn: &Tensor, momentum: f64) {
        let (rows, cols) = pre_bn.dims2();
        assert_eq!(cols, self.d_mid);
        for j in 0..cols {
            let mut mean = 0.0;
            for i in 0..rows {
                mean += pre_bn.data()[i * cols + j];
            }
            mean /= rows as f64;
            let mut var = 0.0;
            for i in 0..rows {
                let d = pre_bn.data()[i * cols + j] - mean;
                var += d * d;
            }
            var /= rows as f64;
            let m = &mut params.get_mut(self.bn_mean).data_mut()[j];
            *m = (1.0 - momentum) * *m + momentum * mean;
            let v = &mut params.get_mut(self.bn_var).data_mut()[j];
            *v = (1.0 - momentum) * *v + momentum * var;
        }
    }

    /// Fuse the lifted DL rows with the UL rows; both `[K*L*N x 2*W]`.
    /// Returns the refined rows `[K*L*N x 2*W]` with W = N_Tx*N_Rx.
    pub fn forward_on_tape(
        &self,
        tape: &Tape,
        bind: &Binding,
        params: &ModelParams,
        dl_rows: Var,
        ul_rows: Var,
    ) -> Var {
        self.forward_with_prebn(tape, bind, params, dl_rows, ul_rows).0
    }

    /// As [`Self::forward_on_tape`], also returning the pre-normalization
    /// trunk activations for running-statistics updates.
    pub fn forward_with_prebn(
        &self,
        tape: &Tape,
        bind: &Binding,
        params: &ModelParams,
        dl_rows: Var,
        ul_rows: Var,
    ) -> (Var, Var) {
        let trunk = self.trunk_pre_bn(tape, bind, dl_rows, ul_rows);
        let act = tape.selu(self.batch_norm(tape, bind, params, trunk));
        // regroup: token (row, tx, rx) with features (re, im)
        let width = self.d_mid / 2;
        let n_tokens = self.n_kln * width;
        let mut idx = Vec::with_capacity(n_tokens * 2);
        for row in 0..self.n_kln {
            for w in 0..width {
                for c in 0..2 {
                    idx.push(row * self.d_mid + c * width + w);
                }
            }
        }
        let tokens = tape.gather(act, idx, &[n_tokens, 2]);
        let mut h = self.token_lift.forward(tape, bind, tokens);
        for sab in &self.sabs {
            h = sab.forward(tape, bind, h);
        }
        let out_tokens = self.token_out.forward(tape, bind, h); // [n_tokens x 2]
        let mut back = Vec::with_capacity(self.n_kln * self.d_mid);
        for row in 0..self.n_kln {
            for c in 0..2 {
                for w in 0..width {
                    back.push((row * width + w) * 2 + c);
                }
            }
        }
        (tape.gather(out_tokens, back, &[self.n_kln, self.d_mid]), trunk)
    }
}
