//! Feedback compression network: per-slot transformer encoder, uniform
//! quantizer, and transformer decoder over the sparse-domain real pack.

use rand::{Rng, SeedableRng};

use super::HascanConfig;
use crate::codec::{dequantize, desparsify, quantize, sparsify, BitFrame};
use crate::estimators::DlFeature;
use crate::linalg::CMat;
use crate::nn::{
    Binding, LayerNormParams, LinearParams, MhaParams, ModelParams, TfflParams,
};
use crate::tensor::{complexpack, ParamInit, Tape, Tensor, Var};

/// Port-domain slot slice -> sparse-domain real pack `[2 N_d x d_h]`.
pub fn slot_to_sparse_pack(slot: &CMat, cfg: &HascanConfig) -> Tensor {
    let h_ad = sparsify(slot, cfg.pilot.n_rb, cfg.pilot.m_c).expect("slot shape");
    complexpack::pack(h_ad.rows, h_ad.cols, &h_ad.data)
}

/// Inverse of [`slot_to_sparse_pack`].
pub fn sparse_pack_to_slot(pack: &Tensor, cfg: &HascanConfig) -> CMat {
    let (rows, cols, data) = complexpack::unpack(pack);
    let h_ad = CMat::from_vec(rows, cols, data);
    desparsify(&h_ad, cfg.pilot.n_rb, cfg.pilot.m_c).expect("pack shape")
}

struct EncoderBlock {
    attn: MhaParams,
    ln1: LayerNormParams,
    tffl: TfflParams,
    ln2: LayerNormParams,
}

impl EncoderBlock {
    fn new(
        params: &mut ModelParams,
        init: &mut ParamInit,
        name: &str,
        cfg: &HascanConfig,
    ) -> Self {
        let tokens = 2 * cfg.n_d();
        EncoderBlock {
            attn: MhaParams::new(params, init, &format!("{name}.attn"), cfg.d_h(), cfg.n_heads),
            ln1: LayerNormParams::new(params, init, &format!("{name}.ln1"), cfg.d_h()),
            tffl: TfflParams::new(
                params,
                init,
                &format!("{name}.tffl"),
                tokens,
                cfg.d_h(),
                cfg.d_f_tmcfn,
                cfg.dropout_p,
            ),
            ln2: LayerNormParams::new(params, init, &format!("{name}.ln2"), cfg.d_h()),
        }
    }

    fn forward(
        &self,
        tape: &Tape,
        bind: &Binding,
        x: Var,
        causal: bool,
        training: bool,
        rng: &mut impl Rng,
    ) -> Var {
        let h = self.ln1.forward(tape, bind, tape.add(x, self.attn.forward(tape, bind, x, causal)));
        let f = self.tffl.forward(tape, bind, h, training, rng);
        self.ln2.forward(tape, bind, tape.add(h, f))
    }
}

pub struct Tmcfn {
    n_bit: u32,
    m: usize,
    n_d: usize,
    d_h: usize,
    causal_decoder: bool,
    enc: Vec<EncoderBlock>,
    fc_code: LinearParams,
    fc_expand: LinearParams,
    dec: Vec<EncoderBlock>,
    fc_out: LinearParams,
}

impl Tmcfn {
    pub fn new(cfg: &HascanConfig, params: &mut ModelParams, init: &mut ParamInit) -> Self {
        let flat = 2 * cfg.n_d() * cfg.d_h();
        Tmcfn {
            n_bit: cfg.n_bit,
            m: cfg.m_codeword,
            n_d: cfg.n_d(),
            d_h: cfg.d_h(),
            causal_decoder: cfg.causal_decoder,
            enc: (0..cfg.tmcfn_enc_blocks)
                .map(|i| EncoderBlock::new(params, init, &format!("tmcfn.enc.{i}"), cfg))
                .collect(),
            fc_code: LinearParams::new(params, init, "tmcfn.fc_code", flat, cfg.m_codeword),
            fc_expand: LinearParams::new(params, init, "tmcfn.fc_expand", cfg.m_codeword, flat),
            dec: (0..cfg.tmcfn_dec_blocks)
                .map(|i| EncoderBlock::new(params, init, &format!("tmcfn.dec.{i}"), cfg))
                .collect(),
            fc_out: LinearParams::new(params, init, "tmcfn.fc_out", cfg.d_h(), cfg.d_h()),
        }
    }

    /// Sparse-domain pack `[2 N_d x d_h]` -> codeword `[1 x M]`.
    pub fn encode_on_tape(
        &self,
        tape: &Tape,
        bind: &Binding,
        x: Var,
        training: bool,
        rng: &mut impl Rng,
    ) -> Var {
        let mut h = x;
        for block in &self.enc {
            h = block.forward(tape, bind, h, false, training, rng);
        }
        let flat = tape.reshape(h, &[1, 2 * self.n_d * self.d_h]);
        self.fc_code.forward(tape, bind, flat)
    }

    /// Quantize+dequantize as a straight-through node (identity backward).
    pub fn quantize_on_tape(&self, tape: &Tape, code: Var) -> Var {
        let n_bit = self.n_bit;
        tape.straight_through(code, move |vals| {
            let frame = quantize(vals, n_bit).expect("codeword quantization");
            dequantize(&frame).expect("frame consistency")
        })
    }

    /// Codeword `[1 x M]` -> sparse-domain pack `[2 N_d x d_h]`.
    pub fn decode_on_tape(
        &self,
        tape: &Tape,
        bind: &Binding,
        code: Var,
        training: bool,
        rng: &mut impl Rng,
    ) -> Var {
        let flat = self.fc_expand.forward(tape, bind, code);
        let mut h = tape.reshape(flat, &[2 * self.n_d, self.d_h]);
        for block in &self.dec {
            h = block.forward(tape, bind, h, self.causal_decoder, training, rng);
        }
        self.fc_out.forward(tape, bind, h)
    }

    /// Full feedback path in eval mode; `bypass_quantizer` replaces the
    /// quantizer with identity (perfect-feedback and gradient checks).
    pub fn feedback_on_tape(&self, tape: &Tape, bind: &Binding, x: Var, bypass_quantizer: bool) -> Var {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        self.feedback_on_tape_with(tape, bind, x, bypass_quantizer, false, &mut rng)
    }

    pub fn feedback_on_tape_with(
        &self,
        tape: &Tape,
        bind: &Binding,
        x: Var,
        bypass_quantizer: bool,
        training: bool,
        rng: &mut impl Rng,
    ) -> Var {
        let code = self.encode_on_tape(tape, bind, x, training, rng);
        let q = if bypass_quantizer { code } else { self.quantize_on_tape(tape, code) };
        self.decode_on_tape(tape, bind, q, training, rng)
    }

    /// Compress one port-domain slot slice to its wire frame.
    pub fn encode_frame(&self, params: &ModelParams, cfg: &HascanConfig, slot: &CMat) -> BitFrame {
        let tape = Tape::new();
        let bind = Binding::new(&tape, params);
        let x = tape.leaf(slot_to_sparse_pack(slot, cfg));
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let code = self.encode_on_tape(&tape, &bind, x, false, &mut rng);
        let frame = quantize(tape.val(code).data(), self.n_bit).expect("codeword quantization");
        frame
    }

    /// Reconstruct a port-domain slot slice from a wire frame.
    pub fn decode_frame(
        &self,
        params: &ModelParams,
        cfg: &HascanConfig,
        frame: &BitFrame,
    ) -> Result<CMat, crate::codec::CodecError> {
        let v = dequantize(frame)?;
        if v.len() != self.m {
            return Err(crate::codec::CodecError::Frame(format!(
                "codeword length {} != M = {}",
                v.len(),
                self.m
            )));
        }
        let tape = Tape::new();
        let bind = Binding::new(&tape, params);
        let code = tape.leaf(Tensor::matrix(1, self.m, v));
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let out = self.decode_on_tape(&tape, &bind, code, false, &mut rng);
        Ok(sparse_pack_to_slot(&tape.value_cloned(out), cfg))
    }

    /// Slot-wise feedback of a full DL feature, in eval mode.
    pub fn feedback_slots(
        &self,
        params: &ModelParams,
        cfg: &HascanConfig,
        dl: &DlFeature,
    ) -> Vec<CMat> {
        dl.slots
            .iter()
            .map(|slot| {
                let tape = Tape::new();
                let bind = Binding::new(&tape, params);
                let x = tape.leaf(slot_to_sparse_pack(slot, cfg));
                let y = self.feedback_on_tape(&tape, &bind, x, false);
                sparse_pack_to_slot(&tape.value_cloned(y), cfg)
            })
            .collect()
    }
}
