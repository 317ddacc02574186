//! The three networks and their composition.
//!
//! Canonical layouts used throughout (all real-packed with the complex
//! axis outermost: real block stacked over imaginary block):
//! - TMCFN slot, sparse domain: `[2 N_d x d_h]`, rows (c, delay),
//!   cols (port, rx).
//! - Fused row space: `[K*L*N x 2*N_Tx*N_Rx]`, rows (k, l, n),
//!   cols (c, tx, rx).
//! - Prediction sequence: `[2*K*L*N x N_Tx*N_Rx]`, rows (c, k, l, n),
//!   cols (tx, rx).

pub mod bridge;
pub mod judcen;
pub mod mcpn;
pub mod tmcfn;

pub use bridge::{shape_match, ShapeMatchMap};
pub use judcen::Judcen;
pub use mcpn::Mcpn;
pub use tmcfn::Tmcfn;

use crate::channel::GridConfig;
use crate::linalg::CMat;
use crate::nn::{Binding, ModelParams};
use crate::pilot::PilotConfig;
use crate::tensor::{ParamInit, Tape, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HascanError {
    #[error("hascan config error: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
}

/// Network hyper-parameters on top of the grid/pilot configuration.
#[derive(Debug, Clone)]
pub struct HascanConfig {
    pub grid: GridConfig,
    pub pilot: PilotConfig,
    /// Feedback budget per slot.
    pub n_bit: u32,
    /// Codeword length M; B = n_bit / m_codeword bits per element.
    pub m_codeword: usize,
    /// Attention heads in TMCFN.
    pub n_heads: usize,
    pub tmcfn_enc_blocks: usize,
    pub tmcfn_dec_blocks: usize,
    /// Causal mask in the decoder attention (ablation flag; default off).
    pub causal_decoder: bool,
    /// TFFL inner width.
    pub d_f_tmcfn: usize,
    pub dropout_p: f64,
    /// SAB count and width in JUDCEN.
    pub n_sa: usize,
    pub d_f: usize,
    /// Mamba block count, SSM feature width, and state size in MCPN.
    pub n_ma: usize,
    pub n_h: usize,
}

impl HascanConfig {
    pub fn desk(grid: GridConfig, pilot: PilotConfig) -> Self {
        HascanConfig {
            grid,
            pilot,
            n_bit: 400,
            m_codeword: 100,
            n_heads: 2,
            tmcfn_enc_blocks: 1,
            tmcfn_dec_blocks: 1,
            causal_decoder: false,
            d_f_tmcfn: 32,
            dropout_p: 0.1,
            n_sa: 1,
            d_f: 64,
            n_ma: 2,
            n_h: 16,
        }
    }

    pub fn n_d(&self) -> usize {
        self.pilot.n_rb
    }

    pub fn d_h(&self) -> usize {
        self.pilot.m_c * self.grid.n_rx
    }

    /// Fused-feature row count K*L*N.
    pub fn n_kln(&self) -> usize {
        self.pilot.k_soundings * self.pilot.l_subbands * self.pilot.n_comb()
    }

    /// Prediction sequence length N_sq = 2*K*L*N.
    pub fn n_sq(&self) -> usize {
        2 * self.n_kln()
    }

    pub fn validate(&self) -> Result<(), HascanError> {
        self.pilot.validate(&self.grid).map_err(|e| HascanError::Config(e.to_string()))?;
        if self.m_codeword == 0 || self.n_bit as usize % self.m_codeword != 0 {
            return Err(HascanError::Config(format!(
                "m_codeword {} does not divide n_bit {}",
                self.m_codeword, self.n_bit
            )));
        }
        if self.d_h() % self.n_heads != 0 {
            return Err(HascanError::Config(format!(
                "n_heads {} does not divide d_h {}",
                self.n_heads,
                self.d_h()
            )));
        }
        if self.d_f % 2 != 0 {
            return Err(HascanError::Config(format!("d_f {} must be even", self.d_f)));
        }
        Ok(())
    }
}

/// The assembled model: all three networks sharing one parameter registry.
pub struct Hascan {
    pub cfg: HascanConfig,
    pub tmcfn: Tmcfn,
    pub judcen: Judcen,
    pub mcpn: Mcpn,
    pub bridge: ShapeMatchMap,
}

impl Hascan {
    pub fn new(cfg: HascanConfig, params: &mut ModelParams, init: &mut ParamInit) -> Self {
        cfg.validate().expect("invalid hascan config");
        let tmcfn = Tmcfn::new(&cfg, params, init);
        let judcen = Judcen::new(&cfg, params, init);
        let mcpn = Mcpn::new(&cfg, params, init);
        let bridge = ShapeMatchMap::new(&cfg);
        Hascan { cfg, tmcfn, judcen, mcpn, bridge }
    }

    /// End-to-end forward on one sample's tape: per-slot feedback through
    /// TMCFN, the shape-match bridge, fusion, and prediction. Returns the
    /// transform-domain prediction `[2*N_tr*L*N x N_Tx*N_Rx]`.
    ///
    /// `dl_sparse`: per-slot sparse-domain real packs (leaves);
    /// `ul_rows`: the constant UL feature rows `[K*L*N x 2*N_Tx*M_s]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &Tape,
        bind: &Binding,
        params: &ModelParams,
        dl_sparse: &[Var],
        ul_rows: Var,
        bypass_quantizer: bool,
        zero_dl: bool,
        zero_ul: bool,
    ) -> Var {
        let fb: Vec<Var> = dl_sparse
            .iter()
            .map(|&x| self.tmcfn.feedback_on_tape(tape, bind, x, bypass_quantizer))
            .collect();
        let mut dl_rows = self.bridge.lift_on_tape(tape, &fb);
        if zero_dl {
            dl_rows = tape.scale(dl_rows, 0.0);
        }
        let ul = if zero_ul { tape.scale(ul_rows, 0.0) } else { ul_rows };
        let fused = self.judcen.forward_on_tape(tape, bind, params, dl_rows, ul);
        self.mcpn.forward_on_tape(tape, bind, fused)
    }

    /// Plain complex-domain inference for one sample. Returns the
    /// predicted grids per (predicted slot, subband, comb) as
    /// `[N_Tx x N_Rx]` matrices.
    pub fn predict(
        &self,
        params: &ModelParams,
        dl: &crate::estimators::DlFeature,
        ul: &crate::estimators::UlFeature,
        zero_dl: bool,
        zero_ul: bool,
    ) -> Vec<CMat> {
        let tape = Tape::new();
        let bind = Binding::new(&tape, params);
        let dl_sparse: Vec<Var> = dl
            .slots
            .iter()
            .map(|s| tape.leaf(tmcfn::slot_to_sparse_pack(s, &self.cfg)))
            .collect();
        let ul_rows = tape.leaf(bridge::ul_feature_rows(ul, &self.cfg));
        let out = self.forward_on_tape(
            &tape,
            &bind,
            params,
            &dl_sparse,
            ul_rows,
            false,
            zero_dl,
            zero_ul,
        );
        mcpn::untransform_prediction(&tape.value_cloned(out), &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// A deliberately small geometry that still exercises every layout rule.
    fn tiny_cfg() -> HascanConfig {
        let grid = GridConfig {
            n_tx: 4,
            n_rx: 2,
            n_c: 8,
            delta_f: 60e3,
            delta_t: 2.5e-3,
            srs_interval: 2,
            f_c: 12e9,
            spacing: 0.5,
        };
        let pilot = PilotConfig {
            m_c: 2,
            m_s: 2,
            n_rb: 2,
            m_sc: 4,
            l_subbands: 2,
            n_tc: 2,
            k_soundings: 2,
            n_dt: 4,
            n_tr: 1,
            csirs_stride: 2,
            beam_seed: 0,
        };
        let mut cfg = HascanConfig::desk(grid, pilot);
        cfg.n_bit = 16;
        cfg.m_codeword = 8;
        cfg.n_heads = 2;
        cfg.d_f_tmcfn = 8;
        cfg.n_sa = 1;
        cfg.d_f = 8;
        cfg.n_ma = 1;
        cfg.n_h = 4;
        cfg
    }

    fn random_inputs(cfg: &HascanConfig, seed: u64) -> (Vec<Tensor>, Tensor) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dl = (0..cfg.pilot.n_dt)
            .map(|_| {
                Tensor::matrix(
                    2 * cfg.n_d(),
                    cfg.d_h(),
                    (0..2 * cfg.n_d() * cfg.d_h())
                        .map(|_| rng.gen::<f64>() - 0.5)
                        .collect(),
                )
            })
            .collect();
        let width = 2 * cfg.grid.n_tx * cfg.pilot.m_s;
        let ul = Tensor::matrix(
            cfg.n_kln(),
            width,
            (0..cfg.n_kln() * width).map(|_| rng.gen::<f64>() - 0.5).collect(),
        );
        (dl, ul)
    }

    fn forward_value(
        model: &Hascan,
        params: &ModelParams,
        dl: &[Tensor],
        ul: &Tensor,
        bypass: bool,
    ) -> Tensor {
        let tape = Tape::new();
        let bind = Binding::new(&tape, params);
        let dl_vars: Vec<Var> = dl.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = model.forward_on_tape(
            &tape,
            &bind,
            params,
            &dl_vars,
            tape.leaf(ul.clone()),
            bypass,
            false,
            false,
        );
        tape.value_cloned(out)
    }

    #[test]
    fn end_to_end_shapes_and_determinism() {
        let cfg = tiny_cfg();
        let mut init = crate::tensor::ParamInit::new(1);
        let mut params = ModelParams::new();
        let model = Hascan::new(cfg.clone(), &mut params, &mut init);
        let (dl, ul) = random_inputs(&cfg, 2);
        let a = forward_value(&model, &params, &dl, &ul, false);
        let rows = 2 * cfg.pilot.n_tr * cfg.pilot.l_subbands * cfg.pilot.n_comb();
        assert_eq!(a.shape(), &[rows, cfg.grid.n_tx * cfg.grid.n_rx]);
        let b = forward_value(&model, &params, &dl, &ul, false);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn every_learnable_parameter_receives_gradient() {
        let cfg = tiny_cfg();
        let mut init = crate::tensor::ParamInit::new(3);
        let mut params = ModelParams::new();
        let model = Hascan::new(cfg.clone(), &mut params, &mut init);
        let (dl, ul) = random_inputs(&cfg, 4);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &params);
        let dl_vars: Vec<Var> = dl.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = model.forward_on_tape(
            &tape,
            &bind,
            &params,
            &dl_vars,
            tape.leaf(ul.clone()),
            false,
            false,
            false,
        );
        tape.backward(tape.sum(tape.mul(out, out)));
        let frozen = ["judcen.bn.mean", "judcen.bn.var"];
        for (name, grad) in params.names().zip(bind.grads(&tape)) {
            if frozen.contains(&name) {
                continue;
            }
            let g = grad.unwrap_or_else(|| panic!("no grad slot for {name}"));
            assert!(
                g.data().iter().any(|v| v.abs() > 0.0),
                "parameter {name} received no gradient"
            );
        }
    }

    #[test]
    fn full_model_gradient_check_with_quantizer_bypassed() {
        let cfg = tiny_cfg();
        let mut init = crate::tensor::ParamInit::new(5);
        let mut params = ModelParams::new();
        let model = Hascan::new(cfg.clone(), &mut params, &mut init);
        let (dl, ul) = random_inputs(&cfg, 6);
        // analytic input gradient via the tape
        let loss = |params: &ModelParams, dl: &[Tensor]| -> (f64, Tensor) {
            let tape = Tape::new();
            let bind = Binding::new(&tape, params);
            let dl_vars: Vec<Var> = dl.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = model.forward_on_tape(
                &tape,
                &bind,
                params,
                &dl_vars,
                tape.leaf(ul.clone()),
                true,
                false,
                false,
            );
            let l = tape.sum(tape.mul(out, out));
            tape.backward(l);
            let v = tape.value_cloned(l).item();
            (v, tape.grad(dl_vars[1]).unwrap())
        };
        let (_, grad) = loss(&params, &dl);
        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for &i in &[0usize, 3, 7, 11] {
            let mut up = dl.clone();
            up[1].data_mut()[i] += eps;
            let mut dn = dl.clone();
            dn[1].data_mut()[i] -= eps;
            let num = (loss(&params, &up).0 - loss(&params, &dn).0) / (2.0 * eps);
            let ana = grad.data()[i];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "input grad rel err {max_rel}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut init = crate::tensor::ParamInit::new(7);
        let mut params = ModelParams::new();
        let model = Hascan::new(cfg.clone(), &mut params, &mut init);
        let (dl, ul) = random_inputs(&cfg, 8);
        let loss = |params: &ModelParams| -> f64 {
            let tape = Tape::new();
            let bind = Binding::new(&tape, params);
            let dl_vars: Vec<Var> = dl.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = model.forward_on_tape(
                &tape,
                &bind,
                params,
                &dl_vars,
                tape.leaf(ul.clone()),
                true,
                false,
                false,
            );
            tape.value_cloned(tape.sum(tape.mul(out, out))).item()
        };
        // analytic grads for every binding slot
        let tape = Tape::new();
        let bind = Binding::new(&tape, &params);
        let dl_vars: Vec<Var> = dl.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = model.forward_on_tape(
            &tape,
            &bind,
            &params,
            &dl_vars,
            tape.leaf(ul.clone()),
            true,
            false,
            false,
        );
        tape.backward(tape.sum(tape.mul(out, out)));
        // one representative parameter from each network
        let probes = [
            "tmcfn.enc.0.attn.wq.0",
            "tmcfn.fc_code.w",
            "judcen.trunk.w",
            "judcen.sab.0.ffl.l1.w",
            "mcpn.block.0.mamba.a",
            "mcpn.head.w",
        ];
        let eps = 1e-6;
        for name in probes {
            let id = params.id_of(name).unwrap_or_else(|| panic!("missing {name}"));
            let ana = tape.grad(bind.var(id)).unwrap();
            let coord = ana
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap()
                .0;
            let mut p = params.get(id).clone();
            let base = p.data()[coord];
            let mut perturbed = |v: f64, params: &mut ModelParams| {
                p.data_mut()[coord] = v;
                *params.get_mut(id) = p.clone();
                loss(params)
            };
            let mut scratch = clone_params(&params);
            let up = perturbed(base + eps, &mut scratch);
            let dn = perturbed(base - eps, &mut scratch);
            let num = (up - dn) / (2.0 * eps);
            let a = ana.data()[coord];
            let rel = (num - a).abs() / num.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-4, "{name}[{coord}] rel err {rel}");
        }
    }

    fn clone_params(src: &ModelParams) -> ModelParams {
        let mut out = ModelParams::new();
        for name in src.names() {
            let id = src.id_of(name).unwrap();
            out.add(name, src.get(id).clone());
        }
        out
    }

    #[test]
    fn ablation_flags_change_output() {
        let cfg = tiny_cfg();
        let mut init = crate::tensor::ParamInit::new(9);
        let mut params = ModelParams::new();
        let model = Hascan::new(cfg.clone(), &mut params, &mut init);
        let (dl, ul) = random_inputs(&cfg, 10);
        let eval = |zero_dl: bool, zero_ul: bool| {
            let tape = Tape::new();
            let bind = Binding::new(&tape, &params);
            let dl_vars: Vec<Var> = dl.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = model.forward_on_tape(
                &tape,
                &bind,
                &params,
                &dl_vars,
                tape.leaf(ul.clone()),
                false,
                zero_dl,
                zero_ul,
            );
            tape.value_cloned(out)
        };
        let full = eval(false, false);
        let no_dl = eval(true, false);
        let no_ul = eval(false, true);
        assert_ne!(full.data(), no_dl.data());
        assert_ne!(full.data(), no_ul.data());
        assert_ne!(no_dl.data(), no_ul.data());
    }

    #[test]
    fn save_load_round_trip_preserves_prediction() {
        let cfg = tiny_cfg();
        let mut init = crate::tensor::ParamInit::new(11);
        let mut params = ModelParams::new();
        let model = Hascan::new(cfg.clone(), &mut params, &mut init);
        let (dl, ul) = random_inputs(&cfg, 12);
        let want = forward_value(&model, &params, &dl, &ul, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fcsl");
        params.save(&path).unwrap();
        let mut init2 = crate::tensor::ParamInit::new(999);
        let mut params2 = ModelParams::new();
        let model2 = Hascan::new(cfg, &mut params2, &mut init2);
        let loaded = params2.load(&path).unwrap();
        assert_eq!(loaded, params2.len());
        let got = forward_value(&model2, &params2, &dl, &ul, false);
        assert_eq!(want.data(), got.data());
    }
}
