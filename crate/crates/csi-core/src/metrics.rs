//! Evaluation metrics and the CSV report format.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::linalg::{dominant_eigenvector, solve, CMat};
use crate::tensor::TensorError;

/// Reported NMSE is clipped here; an exact reconstruction reads -100 dB.
pub const NMSE_FLOOR_DB: f64 = -100.0;

/// Normalized mean-square error in dB over a set of grids.
pub fn nmse_db(est: &[CMat], truth: &[CMat]) -> f64 {
    assert_eq!(est.len(), truth.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, t) in est.iter().zip(truth) {
        num += e.sub(t).fro_norm().powi(2);
        den += t.fro_norm().powi(2);
    }
    if den == 0.0 {
        return NMSE_FLOOR_DB;
    }
    let ratio = num / den;
    if ratio <= 10f64.powf(NMSE_FLOOR_DB / 10.0) {
        NMSE_FLOOR_DB
    } else {
        10.0 * ratio.log10()
    }
}

/// Mean magnitude of the normalized inner product between matching grids.
/// Grids whose truth (or estimate) is all zero are skipped.
pub fn cosine_similarity(est: &[CMat], truth: &[CMat]) -> f64 {
    assert_eq!(est.len(), truth.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, t) in est.iter().zip(truth) {
        let ne = e.fro_norm();
        let nt = t.fro_norm();
        if ne == 0.0 || nt == 0.0 {
            continue;
        }
        let inner: Complex64 = e
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| a.conj() * b)
            .sum();
        sum += inner.norm() / (ne * nt);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

const POWER_ITERS: usize = 60;

/// Sum spectral efficiency of eigen zero-forcing precoding built from the
/// estimated channels, measured against the true ones.
///
/// Per user the receive combiner is the dominant eigendirection of the
/// estimated channel's receive covariance; the zero-forcing precoder is the
/// regularized pseudo-inverse of the stacked estimated effective rows with
/// equal per-user power. The SINR uses the true effective rows, so
/// estimation error shows up as residual inter-user interference and
/// beamforming loss.
pub fn ezf_spectral_efficiency(est: &[CMat], truth: &[CMat], snr_linear: f64) -> f64 {
    assert_eq!(est.len(), truth.len());
    let n_ue = est.len();
    assert!(n_ue > 0);
    let n_tx = est[0].rows;
    // effective rows a_u = c_u^H H_u^T, combiner from the estimate
    let mut a_est = CMat::zeros(n_ue, n_tx);
    let mut a_true = CMat::zeros(n_ue, n_tx);
    for u in 0..n_ue {
        let m_est = transpose(&est[u]);
        let m_true = transpose(&truth[u]);
        let cov = m_est.mul(&m_est.adjoint());
        let c = dominant_eigenvector(&cov, POWER_ITERS);
        for j in 0..n_tx {
            let mut ze = Complex64::ZERO;
            let mut zt = Complex64::ZERO;
            for r in 0..m_est.rows {
                ze += c[r].conj() * m_est[(r, j)];
                zt += c[r].conj() * m_true[(r, j)];
            }
            a_est[(u, j)] = ze;
            a_true[(u, j)] = zt;
        }
    }
    // W = A^H (A A^H)^-1, columns rescaled to equal power snr/n_ue
    let gram = a_est.mul(&a_est.adjoint());
    let mut reg = gram.clone();
    let inv = loop {
        if let Some(x) = solve(&reg, &CMat::eye(n_ue)) {
            break x;
        }
        let tr: f64 = (0..n_ue).map(|i| reg[(i, i)].re).sum();
        let eps = (tr / n_ue as f64).max(1e-12) * 1e-6;
        for i in 0..n_ue {
            reg[(i, i)] += Complex64::new(eps, 0.0);
        }
    };
    let mut w = a_est.adjoint().mul(&inv);
    let p_ue = snr_linear / n_ue as f64;
    for u in 0..n_ue {
        let norm: f64 = (0..n_tx).map(|j| w[(j, u)].norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            let s = p_ue.sqrt() / norm;
            for j in 0..n_tx {
                w[(j, u)] *= s;
            }
        }
    }
    let gains = a_true.mul(&w); // [u, v]: true row u through column v
    let mut se = 0.0;
    for u in 0..n_ue {
        let sig = gains[(u, u)].norm_sqr();
        let intf: f64 = (0..n_ue)
            .filter(|&v| v != u)
            .map(|v| gains[(u, v)].norm_sqr())
            .sum();
        se += (1.0 + sig / (intf + 1.0)).log2();
    }
    se
}

fn transpose(a: &CMat) -> CMat {
    let mut out = CMat::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out[(j, i)] = a[(i, j)];
        }
    }
    out
}

/// Normalized autocorrelation of a grid sequence at the given lag.
pub fn autocorrelation(seq: &[CMat], lag: usize) -> Complex64 {
    assert!(lag < seq.len());
    let mut num = Complex64::ZERO;
    let mut e0 = 0.0;
    let mut e1 = 0.0;
    for t in 0..seq.len() - lag {
        for (a, b) in seq[t].data.iter().zip(&seq[t + lag].data) {
            num += a.conj() * b;
        }
        e0 += seq[t].fro_norm().powi(2);
        e1 += seq[t + lag].fro_norm().powi(2);
    }
    let den = (e0 * e1).sqrt();
    if den == 0.0 {
        Complex64::ZERO
    } else {
        num / den
    }
}

/// One evaluated operating point in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub experiment_id: String,
    pub snr_db: f64,
    pub n_bit: u32,
    pub f_c_hz: f64,
    pub method: String,
    pub nmse_db: f64,
    pub cosine_sim: f64,
    pub se_bps_hz: f64,
    pub wall_seconds: f64,
}

pub const REPORT_HEADER: &str =
    "experiment_id,snr_db,n_bit,f_c_hz,method,nmse_db,cosine_sim,se_bps_hz,wall_seconds";

pub fn write_report(path: &Path, rows: &[MetricsRow]) -> Result<(), TensorError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.experiment_id,
            r.snr_db,
            r.n_bit,
            r.f_c_hz,
            r.method,
            r.nmse_db,
            r.cosine_sim,
            r.se_bps_hz,
            r.wall_seconds
        )?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<MetricsRow>, TensorError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        other => {
            return Err(TensorError::Store(format!(
                "bad report header: {other:?}"
            )))
        }
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(TensorError::Store(format!("bad report row: {line}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| TensorError::Store(format!("bad number {s} in: {line}")))
            };
            Ok(MetricsRow {
                experiment_id: f[0].to_string(),
                snr_db: num(f[1])?,
                n_bit: f[2]
                    .parse()
                    .map_err(|_| TensorError::Store(format!("bad n_bit in: {line}")))?,
                f_c_hz: num(f[3])?,
                method: f[4].to_string(),
                nmse_db: num(f[5])?,
                cosine_sim: num(f[6])?,
                se_bps_hz: num(f[7])?,
                wall_seconds: num(f[8])?,
            })
        })
        .collect()
}
