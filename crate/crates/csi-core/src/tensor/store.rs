//! Binary parameter store.
//!
//! Layout: magic `FCSL`, version u16 (little-endian), then repeated records:
//! name length u16, UTF-8 name, rank u8, dims u32 each, payload of
//! little-endian IEEE-754 f64.

use std::io::{Read, Write};

use super::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"FCSL";
const VERSION: u16 = 1;

pub fn write_param_store<W: Write>(
    mut w: W,
    entries: &[(String, Tensor)],
) -> Result<(), TensorError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in entries {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(TensorError::Store(format!("name too long: {name}")));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        if t.shape().len() > u8::MAX as usize {
            return Err(TensorError::Store(format!("rank too large for {name}")));
        }
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_param_store<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Store(format!("bad magic {magic:?}")));
    }
    let mut v2 = [0u8; 2];
    r.read_exact(&mut v2)?;
    let version = u16::from_le_bytes(v2);
    if version != VERSION {
        return Err(TensorError::Store(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    loop {
        let mut len2 = [0u8; 2];
        match r.read_exact(&mut len2) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| TensorError::Store(format!("bad name utf8: {e}")))?;
        let mut rank1 = [0u8; 1];
        r.read_exact(&mut rank1)?;
        let mut shape = Vec::with_capacity(rank1[0] as usize);
        for _ in 0..rank1[0] {
            let mut d4 = [0u8; 4];
            r.read_exact(&mut d4)?;
            shape.push(u32::from_le_bytes(d4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut f8)?;
            data.push(f64::from_le_bytes(f8));
        }
        entries.push((name, Tensor::new(&shape, data)));
    }
    Ok(entries)
}
