//! Packing between complex matrices and real tensors.
//!
//! Convention used throughout the crate: a complex `[m x n]` matrix packs
//! into a real `[2m x n]` tensor with the real part in rows `0..m` and the
//! imaginary part in rows `m..2m` (leading real/imag axis).

use num_complex::Complex64;

use super::Tensor;

pub fn pack(rows: usize, cols: usize, data: &[Complex64]) -> Tensor {
    assert_eq!(data.len(), rows * cols);
    let mut out = vec![0.0; 2 * rows * cols];
    for (i, z) in data.iter().enumerate() {
        out[i] = z.re;
        out[rows * cols + i] = z.im;
    }
    Tensor::matrix(2 * rows, cols, out)
}

pub fn unpack(t: &Tensor) -> (usize, usize, Vec<Complex64>) {
    let (r2, cols) = t.dims2();
    assert_eq!(r2 % 2, 0, "packed tensor must have even row count");
    let rows = r2 / 2;
    let half = rows * cols;
    let data = (0..half)
        .map(|i| Complex64::new(t.data()[i], t.data()[half + i]))
        .collect();
    (rows, cols, data)
}
