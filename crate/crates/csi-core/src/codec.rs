//! Feedback codec: angle-delay sparsification and the uniform bit-frame
//! quantizer with its wire format.

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{dft_matrix, kron_dft_rows, CMat};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("codec config error: {0}")]
    Config(String),
    #[error("frame error: {0}")]
    Frame(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Angle-delay transform of a port-domain slice [n_rb*m_c x n_rx]:
/// (F_nrb kron F_mc) x F_nrx, reshaped to [n_rb x m_c*n_rx].
pub fn sparsify(x: &CMat, n_rb: usize, m_c: usize) -> Result<CMat, CodecError> {
    if x.rows != n_rb * m_c {
        return Err(CodecError::Config(format!(
            "sparsify: {} rows, expected n_rb*m_c = {}",
            x.rows,
            n_rb * m_c
        )));
    }
    let n_rx = x.cols;
    let rows = kron_dft_rows(x, n_rb, m_c, false);
    let y = rows.mul(&dft_matrix(n_rx));
    let mut out = CMat::zeros(n_rb, m_c * n_rx);
    for d in 0..n_rb {
        for a in 0..m_c {
            for r in 0..n_rx {
                out[(d, a * n_rx + r)] = y[(d * m_c + a, r)];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`sparsify`]; returns the port-domain [n_rb*m_c x n_rx] slice.
pub fn desparsify(h_ad: &CMat, n_rb: usize, m_c: usize) -> Result<CMat, CodecError> {
    if h_ad.rows != n_rb {
        return Err(CodecError::Config(format!(
            "desparsify: {} rows, expected n_rb = {}",
            h_ad.rows, n_rb
        )));
    }
    if h_ad.cols % m_c != 0 {
        return Err(CodecError::Config(format!(
            "desparsify: {} cols not divisible by m_c = {}",
            h_ad.cols, m_c
        )));
    }
    let n_rx = h_ad.cols / m_c;
    let mut y = CMat::zeros(n_rb * m_c, n_rx);
    for d in 0..n_rb {
        for a in 0..m_c {
            for r in 0..n_rx {
                y[(d * m_c + a, r)] = h_ad[(d, a * n_rx + r)];
            }
        }
    }
    let rows = kron_dft_rows(&y, n_rb, m_c, true);
    Ok(rows.mul(&dft_matrix(n_rx).adjoint()))
}

/// Quantized feedback payload: packed indices plus scalar side info.
///
/// Side info is carried as f32 (two 32-bit floats on the wire, outside the
/// N_bit budget); quantization indices are computed against the f32-rounded
/// values so the midpoint bound |v - v_hat| <= rho/2 holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct BitFrame {
    pub n_bit: u32,
    pub m: u32,
    pub v_min: f32,
    pub z: f32,
    /// ceil(n_bit/8) bytes, big-endian bit order within each element group.
    pub bits: Vec<u8>,
}

impl BitFrame {
    pub fn bits_per_element(&self) -> u32 {
        self.n_bit / self.m
    }

    /// Unpacked quantization index of element i.
    pub fn index(&self, i: usize) -> u32 {
        let b = self.bits_per_element() as usize;
        let mut idx = 0u32;
        for k in 0..b {
            let bit_pos = i * b + k;
            let byte = self.bits[bit_pos / 8];
            let bit = (byte >> (7 - bit_pos % 8)) & 1;
            idx = (idx << 1) | bit as u32;
        }
        idx
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.bits.len());
        out.write_u32::<LittleEndian>(self.n_bit).unwrap();
        out.write_u32::<LittleEndian>(self.m).unwrap();
        out.write_f32::<BigEndian>(self.v_min).unwrap();
        out.write_f32::<BigEndian>(self.z).unwrap();
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CodecError> {
        let mut r = std::io::Cursor::new(buf);
        let n_bit = r.read_u32::<LittleEndian>()?;
        let m = r.read_u32::<LittleEndian>()?;
        let v_min = r.read_f32::<BigEndian>()?;
        let z = r.read_f32::<BigEndian>()?;
        if m == 0 || n_bit % m != 0 || n_bit / m == 0 {
            return Err(CodecError::Frame(format!("bad frame header: n_bit={n_bit} m={m}")));
        }
        let n_bytes = n_bit.div_ceil(8) as usize;
        let rest = &buf[16..];
        if rest.len() != n_bytes {
            return Err(CodecError::Frame(format!(
                "payload length {} != ceil(n_bit/8) = {}",
                rest.len(),
                n_bytes
            )));
        }
        Ok(BitFrame { n_bit, m, v_min, z, bits: rest.to_vec() })
    }
}

/// Next f32 at or below x.
fn f32_down(x: f64) -> f32 {
    let y = x as f32;
    if (y as f64) > x {
        y.next_down()
    } else {
        y
    }
}

/// Next f32 at or above x.
fn f32_up(x: f64) -> f32 {
    let y = x as f32;
    if (y as f64) < x {
        y.next_up()
    } else {
        y
    }
}

/// Uniform quantization of a codeword to an N_bit frame with B = n_bit/M
/// bits per element: index = floor((v - v_min)/rho), rho = Z * 2^-B,
/// clamped to [0, 2^B - 1].
pub fn quantize(v: &[f64], n_bit: u32) -> Result<BitFrame, CodecError> {
    let m = v.len() as u32;
    if m == 0 {
        return Err(CodecError::Config("empty codeword".into()));
    }
    if n_bit % m != 0 {
        return Err(CodecError::Config(format!(
            "codeword length {m} does not divide n_bit = {n_bit}"
        )));
    }
    let b = n_bit / m;
    if b == 0 {
        return Err(CodecError::Config(format!("B = n_bit/M = {n_bit}/{m} = 0")));
    }
    if b > 31 {
        return Err(CodecError::Config(format!("B = {b} exceeds 31 bits/element")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CodecError::Config("non-finite codeword entry".into()));
    }
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // directed rounding keeps [v_min, v_min + z] covering all inputs;
    // constant input degenerates to z = 0 with the value in v_min
    let (v_min, z) = if hi == lo {
        (lo as f32, 0.0f32)
    } else {
        let v_min = f32_down(lo);
        (v_min, f32_up(hi - v_min as f64).max(0.0))
    };
    quantize_with(v, n_bit, v_min, z)
}

/// Quantize against externally supplied side info. Indices of values
/// already on the midpoint grid of (v_min, z, B) are a fixed point.
pub fn quantize_with(v: &[f64], n_bit: u32, v_min: f32, z: f32) -> Result<BitFrame, CodecError> {
    let m = v.len() as u32;
    if m == 0 || n_bit % m != 0 || n_bit / m == 0 {
        return Err(CodecError::Config(format!("bad split: n_bit={n_bit} m={m}")));
    }
    let b = n_bit / m;
    let rho = z as f64 * 0.5f64.powi(b as i32);
    let levels = (1u64 << b) - 1;
    let mut bits = vec![0u8; (n_bit as usize).div_ceil(8)];
    for (i, &x) in v.iter().enumerate() {
        let idx = if rho == 0.0 {
            0u64
        } else {
            (((x - v_min as f64) / rho).floor() as i64).clamp(0, levels as i64) as u64
        };
        for k in 0..b as usize {
            let bit = ((idx >> (b as usize - 1 - k)) & 1) as u8;
            let pos = i * b as usize + k;
            bits[pos / 8] |= bit << (7 - pos % 8);
        }
    }
    Ok(BitFrame { n_bit, m, v_min, z, bits })
}

/// Midpoint reconstruction v_hat = v_min + (index + 0.5) * rho.
pub fn dequantize(frame: &BitFrame) -> Result<Vec<f64>, CodecError> {
    let b = frame.n_bit / frame.m.max(1);
    if frame.m == 0 || b == 0 || frame.n_bit % frame.m != 0 {
        return Err(CodecError::Frame("inconsistent side info".into()));
    }
    if frame.bits.len() != (frame.n_bit as usize).div_ceil(8) {
        return Err(CodecError::Frame(format!(
            "bit length mismatch: {} bytes for {} bits",
            frame.bits.len(),
            frame.n_bit
        )));
    }
    let rho = frame.z as f64 * 0.5f64.powi(b as i32);
    Ok((0..frame.m as usize)
        .map(|i| frame.v_min as f64 + (frame.index(i) as f64 + 0.5) * rho)
        .collect())
}
