//! Spatial-frequency attention block: a per-token sigmoid gate computed
//! from avg/max pooling over the feature axis, followed by an FFL and two
//! layer norms with residual links.

use super::{Binding, FflParams, LayerNormParams, ModelParams, ParamId};
use crate::tensor::{ParamInit, Tape, Var};

/// Tokens are the flattened (rx, tx) plane, features the d_f columns.
#[derive(Debug, Clone, Copy)]
pub struct SabParams {
    pub d_f: usize,
    /// 1x1 conv over the 2 pooled maps: [1 x 2] weights.
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ffl: FflParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl SabParams {
    pub fn new(
        params: &mut ModelParams,
        init: &mut ParamInit,
        name: &str,
        d_f: usize,
        d_ff: usize,
    ) -> Self {
        SabParams {
            d_f,
            conv_w: params.add(&format!("{name}.conv.w"), init.uniform(&[1, 2], 2)),
            conv_b: params.add(&format!("{name}.conv.b"), init.zeros(&[1, 1])),
            ffl: FflParams::new(params, init, &format!("{name}.ffl"), d_f, d_ff),
            ln1: LayerNormParams::new(params, init, &format!("{name}.ln1"), d_f),
            ln2: LayerNormParams::new(params, init, &format!("{name}.ln2"), d_f),
        }
    }

    /// Per-token gate P in (0,1): sigmoid of the 1x1 conv over the pooled
    /// (avg, max) statistics. Depends on x only through those statistics.
    pub fn gate(&self, tape: &Tape, bind: &Binding, x: Var) -> Var {
        let avg = tape.row_mean(x);
        let max = tape.row_max(x);
        let pooled = tape.concat_cols(avg, max); // [S x 2]
        let logits = tape.matmul(pooled, tape.transpose(bind.var(self.conv_w)));
        tape.sigmoid(tape.add_row_broadcast(logits, bind.var(self.conv_b)))
    }

    pub fn forward(&self, tape: &Tape, bind: &Binding, x: Var) -> Var {
        let p = self.gate(tape, bind, x);
        let gated = tape.mul_col_broadcast(x, p);
        let r1 = self.ln1.forward(tape, bind, tape.add(x, gated));
        let f = self.ffl.forward(tape, bind, r1);
        self.ln2.forward(tape, bind, tape.add(r1, f))
    }
}
