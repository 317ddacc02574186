//! Prediction across slots in a doubly transformed domain.
//!
//! The fused rows are regrouped into a sequence with the complex axis
//! outermost, then mapped to the delay/angle domain by two unitary DFTs:
//! a block-diagonal one over the frequency bins of each sounding (left)
//! and a Kronecker one over the antenna pairs (right). The state-space
//! blocks run over that sequence and a learnable left matrix maps the
//! K-sounding sequence onto the N_tr predicted slots. Both transforms are
//! unitary, so a mean-square or cosine loss in this domain equals the one
//! in the raw domain; the inverses are applied off tape at inference.

use num_complex::Complex64;

use super::bridge::{complex_right_mul, realify_left, rowswap_neg};
use super::HascanConfig;
use crate::linalg::{dft_matrix, CMat};
use crate::nn::{Binding, MambaBlockParams, ModelParams, ParamId};
use crate::tensor::{ParamInit, Tape, Tensor, Var};

/// Block-diagonal DFT over `blocks` groups of `g` rows each.
fn blockdiag_dft(blocks: usize, g: usize, adjoint: bool) -> CMat {
    let f = if adjoint { dft_matrix(g).adjoint() } else { dft_matrix(g) };
    let n = blocks * g;
    let mut out = CMat::zeros(n, n);
    for b in 0..blocks {
        for i in 0..g {
            for j in 0..g {
                out[(b * g + i, b * g + j)] = f[(i, j)];
            }
        }
    }
    out
}

/// Spatial transform over the (tx, rx) column pairs.
fn spatial_dft(n_tx: usize, n_rx: usize, adjoint: bool) -> CMat {
    let ft = if adjoint { dft_matrix(n_tx).adjoint() } else { dft_matrix(n_tx) };
    let fr = if adjoint { dft_matrix(n_rx).adjoint() } else { dft_matrix(n_rx) };
    let w = n_tx * n_rx;
    let mut out = CMat::zeros(w, w);
    for a in 0..n_tx {
        for b in 0..n_rx {
            for c in 0..n_tx {
                for d in 0..n_rx {
                    out[(a * n_rx + b, c * n_rx + d)] = ft[(a, c)] * fr[(b, d)];
                }
            }
        }
    }
    out
}

pub struct Mcpn {
    n_kln: usize,
    n_out_rows: usize,
    width: usize,
    blocks: Vec<MambaBlockParams>,
    pub head: ParamId,
    freq_in: Tensor,
    spatial: CMat,
}

impl Mcpn {
    pub fn new(cfg: &HascanConfig, params: &mut ModelParams, init: &mut ParamInit) -> Self {
        let width = cfg.grid.n_tx * cfg.grid.n_rx;
        let d_f = 2 * width;
        let g = cfg.pilot.l_subbands * cfg.pilot.n_comb();
        let n_out_rows = cfg.pilot.n_tr * g;
        let blocks = (0..cfg.n_ma)
            .map(|i| {
                MambaBlockParams::new(
                    params,
                    init,
                    &format!("mcpn.block.{i}"),
                    width,
                    d_f,
                    cfg.n_h,
                    d_f,
                )
            })
            .collect();
        let head = params.add(
            "mcpn.head.w",
            init.uniform(&[2 * n_out_rows, cfg.n_sq()], cfg.n_sq()),
        );
        Mcpn {
            n_kln: cfg.n_kln(),
            n_out_rows,
            width,
            blocks,
            head,
            freq_in: realify_left(&blockdiag_dft(cfg.pilot.k_soundings, g, false)),
            spatial: spatial_dft(cfg.grid.n_tx, cfg.grid.n_rx, false),
        }
    }

    /// Fused rows `[K*L*N x 2*W]` to the transform-domain prediction
    /// `[2*N_tr*L*N x W]`.
    pub fn forward_on_tape(&self, tape: &Tape, bind: &Binding, fused: Var) -> Var {
        // regroup to the sequence: rows (c, k, l, n), cols (tx, rx)
        let mut idx = Vec::with_capacity(2 * self.n_kln * self.width);
        for c in 0..2 {
            for row in 0..self.n_kln {
                for w in 0..self.width {
                    idx.push(row * 2 * self.width + c * self.width + w);
                }
            }
        }
        let seq = tape.gather(fused, idx, &[2 * self.n_kln, self.width]);
        let swap = tape.leaf(rowswap_neg(self.n_kln));
        let f = tape.matmul(tape.leaf(self.freq_in.clone()), seq);
        let mut h = complex_right_mul(tape, f, &self.spatial, swap);
        for b in &self.blocks {
            h = b.forward(tape, bind, h);
        }
        tape.matmul(bind.var(self.head), h)
    }
}

/// Off-tape transform of the truth grids into the prediction domain.
/// `truth[(i*L + l)*N + n]` is the `[N_Tx x N_Rx]` channel at predicted
/// slot i, subband l, comb bin n.
pub fn transform_target(truth: &[CMat], cfg: &HascanConfig) -> Tensor {
    let g = cfg.pilot.l_subbands * cfg.pilot.n_comb();
    let rows = cfg.pilot.n_tr * g;
    assert_eq!(truth.len(), rows);
    let width = cfg.grid.n_tx * cfg.grid.n_rx;
    let mut x = CMat::zeros(rows, width);
    for (i, m) in truth.iter().enumerate() {
        for tx in 0..cfg.grid.n_tx {
            for rx in 0..cfg.grid.n_rx {
                x[(i, tx * cfg.grid.n_rx + rx)] = m[(tx, rx)];
            }
        }
    }
    let y = blockdiag_dft(cfg.pilot.n_tr, g, false)
        .mul(&x)
        .mul(&spatial_dft(cfg.grid.n_tx, cfg.grid.n_rx, false));
    let mut data = Vec::with_capacity(2 * rows * width);
    for c in 0..2 {
        for i in 0..rows {
            for j in 0..width {
                let z = y[(i, j)];
                data.push(if c == 0 { z.re } else { z.im });
            }
        }
    }
    Tensor::matrix(2 * rows, width, data)
}

/// Inverse of the output transforms: the network output back to per-row
/// `[N_Tx x N_Rx]` grids indexed (predicted slot, subband, comb).
pub fn untransform_prediction(pred: &Tensor, cfg: &HascanConfig) -> Vec<CMat> {
    let g = cfg.pilot.l_subbands * cfg.pilot.n_comb();
    let rows = cfg.pilot.n_tr * g;
    let width = cfg.grid.n_tx * cfg.grid.n_rx;
    assert_eq!(pred.shape(), &[2 * rows, width]);
    let mut y = CMat::zeros(rows, width);
    for i in 0..rows {
        for j in 0..width {
            y[(i, j)] = Complex64::new(
                pred.data()[i * width + j],
                pred.data()[(rows + i) * width + j],
            );
        }
    }
    let x = blockdiag_dft(cfg.pilot.n_tr, g, true)
        .mul(&y)
        .mul(&spatial_dft(cfg.grid.n_tx, cfg.grid.n_rx, true));
    (0..rows)
        .map(|i| {
            let data = (0..width).map(|j| x[(i, j)]).collect();
            CMat::from_vec(cfg.grid.n_tx, cfg.grid.n_rx, data)
        })
        .collect()
}
