//! Classical channel estimation: LS inversion, delay/angle-domain DN
//! refinement, and the LCE / MMSE Type-II prediction baselines.

use num_complex::Complex64;
use thiserror::Error;

use crate::channel::GridConfig;
use crate::linalg::{dft_matrix, kron_dft_rows, solve, CMat};
use crate::pilot::{pilot_matrix, ObservationKind, PilotConfig, PilotObservation};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("singular pilot matrix of size {0}")]
    SingularPilot(usize),
    #[error("estimator input error: {0}")]
    Input(String),
}

/// Per-sample DL feature: for each training slot, the stacked LS/DN port
/// observations [n_rb*m_c x n_rx].
#[derive(Debug, Clone)]
pub struct DlFeature {
    pub n_dt: usize,
    pub n_rb: usize,
    pub m_c: usize,
    pub n_rx: usize,
    pub slots: Vec<CMat>,
}

/// Per-sample UL feature: for each sounding (k, l), the stacked comb
/// observations [n_comb*n_tx x m_s], comb index outer.
#[derive(Debug, Clone)]
pub struct UlFeature {
    pub k_soundings: usize,
    pub l_subbands: usize,
    pub n_comb: usize,
    pub n_tx: usize,
    pub m_s: usize,
    pub blocks: Vec<CMat>,
}

impl UlFeature {
    pub fn block(&self, k: usize, l: usize) -> &CMat {
        &self.blocks[k * self.l_subbands + l]
    }

    /// [n_tx x m_s] slice at comb position n within sounding (k, l).
    pub fn at(&self, k: usize, l: usize, n: usize) -> CMat {
        let b = self.block(k, l);
        let mut out = CMat::zeros(self.n_tx, self.m_s);
        for i in 0..self.n_tx {
            for j in 0..self.m_s {
                out[(i, j)] = b[(n * self.n_tx + i, j)];
            }
        }
        out
    }
}

fn invert(x: &CMat) -> Result<CMat, EstimatorError> {
    let n = x.rows;
    solve(x, &CMat::eye(n)).ok_or(EstimatorError::SingularPilot(n))
}

/// Undo the pilot mixing of a single observation.
/// DL: G = X_d^{-1} Y; UL: H = Y X_u^{-1}.
pub fn ls_estimate(obs: &PilotObservation, cfg: &PilotConfig) -> Result<CMat, EstimatorError> {
    match obs.kind {
        ObservationKind::DlCsiRs => {
            let x_inv = invert(&pilot_matrix(cfg.m_c))?;
            Ok(x_inv.mul(&obs.payload))
        }
        ObservationKind::UlSrs => {
            let x_inv = invert(&pilot_matrix(cfg.m_s))?;
            Ok(obs.payload.mul(&x_inv))
        }
    }
}

/// Hard-threshold denoiser: zero every entry with |x| <= kappa * sigma.
pub fn denoise(x: &CMat, sigma: f64, kappa: f64) -> CMat {
    let mut out = x.clone();
    let thr = kappa * sigma;
    for z in &mut out.data {
        if z.norm() <= thr {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    out
}

/// DN refinement of a stacked DL slot [n_rb*m_c x n_rx]: transform rows to
/// the delay/port domain with the unitary kron(F_nrb, F_mc) adjoint,
/// threshold, transform back. Sigma is the per-entry noise std, preserved
/// by the unitary map.
pub fn dn_refine_dl(x: &CMat, cfg: &PilotConfig, sigma: f64, kappa: f64) -> CMat {
    let sparse = kron_dft_rows(x, cfg.n_rb, cfg.m_c, false);
    let kept = denoise(&sparse, sigma, kappa);
    kron_dft_rows(&kept, cfg.n_rb, cfg.m_c, true)
}

/// DN refinement of a stacked UL sounding block [n_comb*n_tx x m_s] in the
/// delay/angle domain via kron(F_ncomb, F_ntx).
pub fn dn_refine_ul(x: &CMat, cfg: &PilotConfig, n_tx: usize, sigma: f64, kappa: f64) -> CMat {
    let _ = n_tx;
    let n = cfg.n_comb();
    let inner = x.rows / n;
    let sparse = kron_dft_rows(x, n, inner, false);
    let kept = denoise(&sparse, sigma, kappa);
    kron_dft_rows(&kept, n, inner, true)
}

/// Run LS (+ optional DN with threshold kappa) over a full observation set
/// and assemble the per-sample features.
pub fn build_features(
    obs: &[PilotObservation],
    cfg: &PilotConfig,
    grid: &GridConfig,
    kappa: Option<f64>,
) -> Result<(DlFeature, UlFeature), EstimatorError> {
    let mut dl = DlFeature {
        n_dt: cfg.n_dt,
        n_rb: cfg.n_rb,
        m_c: cfg.m_c,
        n_rx: grid.n_rx,
        slots: vec![CMat::zeros(cfg.n_rb * cfg.m_c, grid.n_rx); cfg.n_dt],
    };
    let n = cfg.n_comb();
    let mut ul = UlFeature {
        k_soundings: cfg.k_soundings,
        l_subbands: cfg.l_subbands,
        n_comb: n,
        n_tx: grid.n_tx,
        m_s: cfg.m_s,
        blocks: vec![CMat::zeros(n * grid.n_tx, cfg.m_s); cfg.k_soundings * cfg.l_subbands],
    };
    let mut dl_sigma = 0.0f64;
    let mut ul_sigma = 0.0f64;
    for o in obs {
        let ls = ls_estimate(o, cfg)?;
        match o.kind {
            ObservationKind::DlCsiRs => {
                let (s, r, _) = o.coords;
                dl_sigma = o.noise_var.sqrt();
                let slot = &mut dl.slots[s];
                for i in 0..cfg.m_c {
                    for j in 0..grid.n_rx {
                        slot[(r * cfg.m_c + i, j)] = ls[(i, j)];
                    }
                }
            }
            ObservationKind::UlSrs => {
                let (k, l, nn) = o.coords;
                ul_sigma = o.noise_var.sqrt();
                let block = &mut ul.blocks[k * cfg.l_subbands + l];
                for i in 0..grid.n_tx {
                    for j in 0..cfg.m_s {
                        block[(nn * grid.n_tx + i, j)] = ls[(i, j)];
                    }
                }
            }
        }
    }
    if let Some(kappa) = kappa {
        for slot in &mut dl.slots {
            *slot = dn_refine_dl(slot, cfg, dl_sigma, kappa);
        }
        for block in &mut ul.blocks {
            *block = dn_refine_ul(block, cfg, grid.n_tx, ul_sigma, kappa);
        }
    }
    Ok((dl, ul))
}

/// Predicted DL grid over the n_tr transmission slots:
/// [n_tr][subband l][comb n] -> [n_tx x n_rx].
#[derive(Debug, Clone)]
pub struct PredictedCombGrid {
    pub n_tr: usize,
    pub l_subbands: usize,
    pub n_comb: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub mats: Vec<CMat>,
}

impl PredictedCombGrid {
    pub fn at(&self, i: usize, l: usize, n: usize) -> &CMat {
        &self.mats[(i * self.l_subbands + l) * self.n_comb + n]
    }
}

/// Per-row angle-domain completion from the observed leading m_s UE
/// antennas to all n_rx: project onto the n_rx-point DFT basis restricted
/// to the observed entries, keep the m_s strongest components, LS-fit,
/// reconstruct the full row. With m_s == n_rx this is exact.
fn complete_rx_row(observed: &[Complex64], n_rx: usize) -> Vec<Complex64> {
    let m_s = observed.len();
    if m_s == n_rx {
        return observed.to_vec();
    }
    let f = dft_matrix(n_rx);
    // correlation of each basis column against the observed slice
    let mut ranked: Vec<(usize, f64)> = (0..n_rx)
        .map(|c| {
            let corr: Complex64 =
                (0..m_s).map(|i| f[(i, c)].conj() * observed[i]).sum();
            (c, corr.norm())
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let picked: Vec<usize> = ranked.iter().take(m_s).map(|&(c, _)| c).collect();
    // LS fit on the observed sub-rows
    let mut b = CMat::zeros(m_s, m_s);
    for i in 0..m_s {
        for (j, &c) in picked.iter().enumerate() {
            b[(i, j)] = f[(i, c)];
        }
    }
    let mut y = CMat::zeros(m_s, 1);
    for i in 0..m_s {
        y[(i, 0)] = observed[i];
    }
    let coeffs = match solve(&b, &y) {
        Some(c) => c,
        None => {
            // degenerate subset: fall back to zero-padding
            let mut row = vec![Complex64::new(0.0, 0.0); n_rx];
            row[..m_s].copy_from_slice(observed);
            return row;
        }
    };
    (0..n_rx)
        .map(|r| picked.iter().enumerate().map(|(j, &c)| f[(r, c)] * coeffs[(j, 0)]).sum())
        .collect()
}

/// Per-entry linear fit over the k sounding times, evaluated at the
/// predicted times. With k == 1 the single sample is held.
fn linear_extrapolate(times: &[f64], vals: &[Complex64], t: f64) -> Complex64 {
    let k = times.len();
    if k == 1 {
        return vals[0];
    }
    let tm: f64 = times.iter().sum::<f64>() / k as f64;
    let vm: Complex64 = vals.iter().sum::<Complex64>() / k as f64;
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for (ti, vi) in times.iter().zip(vals) {
        num += (vi - vm) * (ti - tm);
        den += (ti - tm) * (ti - tm);
    }
    if den == 0.0 {
        return vm;
    }
    let slope = num / den;
    vm + slope * (t - tm)
}

fn extrapolate_and_complete(
    ul_at: impl Fn(usize, usize, usize) -> CMat,
    cfg: &PilotConfig,
    grid: &GridConfig,
) -> PredictedCombGrid {
    let n = cfg.n_comb();
    let pred_slots = cfg.predicted_slots(grid);
    let mut mats = Vec::with_capacity(cfg.n_tr * cfg.l_subbands * n);
    for &pslot in &pred_slots {
        let t_pred = pslot as f64 * grid.delta_t;
        for l in 0..cfg.l_subbands {
            let times: Vec<f64> = (0..cfg.k_soundings)
                .map(|k| cfg.srs_slot(grid, k, l) as f64 * grid.delta_t)
                .collect();
            for nn in 0..n {
                let samples: Vec<CMat> =
                    (0..cfg.k_soundings).map(|k| ul_at(k, l, nn)).collect();
                // extrapolate the observed m_s columns entry-wise
                let mut obs_part = CMat::zeros(grid.n_tx, cfg.m_s);
                for i in 0..grid.n_tx {
                    for j in 0..cfg.m_s {
                        let vals: Vec<Complex64> =
                            samples.iter().map(|m| m[(i, j)]).collect();
                        obs_part[(i, j)] = linear_extrapolate(&times, &vals, t_pred);
                    }
                }
                // complete each Tx row to all UE antennas
                let mut full = CMat::zeros(grid.n_tx, grid.n_rx);
                for i in 0..grid.n_tx {
                    let row: Vec<Complex64> =
                        (0..cfg.m_s).map(|j| obs_part[(i, j)]).collect();
                    let filled = complete_rx_row(&row, grid.n_rx);
                    for (j, v) in filled.into_iter().enumerate() {
                        full[(i, j)] = v;
                    }
                }
                mats.push(full);
            }
        }
    }
    PredictedCombGrid {
        n_tr: cfg.n_tr,
        l_subbands: cfg.l_subbands,
        n_comb: n,
        n_tx: grid.n_tx,
        n_rx: grid.n_rx,
        mats,
    }
}

/// Linear channel extrapolation baseline: per-entry linear fit across the
/// sounding times, then angle-domain completion to all UE antennas.
pub fn lce_baseline(ul: &UlFeature, cfg: &PilotConfig, grid: &GridConfig) -> PredictedCombGrid {
    extrapolate_and_complete(|k, l, n| ul.at(k, l, n), cfg, grid)
}

/// MMSE with Type-II style feedback: build a Tx covariance from the fed
/// back dominant eigen-directions, LMMSE-denoise the UL soundings along
/// the Tx axis, then extrapolate as in LCE. Falls back to LCE when the
/// feedback carries no energy.
pub fn mmse_type2_baseline(
    ul: &UlFeature,
    fed_back_dirs: &[Vec<Complex64>],
    sigma_ul: f64,
    cfg: &PilotConfig,
    grid: &GridConfig,
) -> PredictedCombGrid {
    let n_tx = grid.n_tx;
    let energy: f64 = fed_back_dirs
        .iter()
        .flat_map(|u| u.iter())
        .map(|z| z.norm_sqr())
        .sum();
    if energy < 1e-12 {
        return lce_baseline(ul, cfg, grid);
    }
    let mut r_hat = CMat::zeros(n_tx, n_tx);
    for u in fed_back_dirs {
        assert_eq!(u.len(), n_tx, "feedback direction has wrong length");
        for i in 0..n_tx {
            for j in 0..n_tx {
                r_hat[(i, j)] += u[i] * u[j].conj();
            }
        }
    }
    let trace: f64 = (0..n_tx).map(|i| r_hat[(i, i)].re).sum();
    let eps = 1e-3 * trace / n_tx as f64;
    for i in 0..n_tx {
        r_hat[(i, i)] += Complex64::new(eps, 0.0);
    }
    // W = R (R + sigma^2 I)^{-1}, applied to each Tx column vector
    let mut reg = r_hat.clone();
    let s2 = sigma_ul * sigma_ul;
    for i in 0..n_tx {
        reg[(i, i)] += Complex64::new(s2, 0.0);
    }
    let w = match solve(&reg, &r_hat) {
        // solve gives (R + s2 I)^{-1} R; LMMSE weight is its adjoint-free
        // symmetric form since both R and the regularizer are Hermitian
        Some(x) => x,
        None => return lce_baseline(ul, cfg, grid),
    };
    extrapolate_and_complete(
        |k, l, n| {
            let y = ul.at(k, l, n);
            w.adjoint().mul(&y)
        },
        cfg,
        grid,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_grid, Path, PathSet, SampledChannelGrid};
    use crate::pilot::{build_spatial_filter, dl_receive, ul_receive};

    fn desk_grid() -> GridConfig {
        GridConfig {
            n_tx: 16,
            n_rx: 2,
            n_c: 96,
            delta_f: 60e3,
            delta_t: 2.5e-3,
            srs_interval: 2,
            f_c: 12e9,
            spacing: 0.5,
        }
    }

    fn desk_pilot() -> PilotConfig {
        PilotConfig {
            m_c: 8,
            m_s: 2,
            n_rb: 8,
            m_sc: 12,
            l_subbands: 2,
            n_tc: 2,
            k_soundings: 2,
            n_dt: 4,
            n_tr: 2,
            csirs_stride: 2,
            beam_seed: 0,
        }
    }

    /// Static 3-path channel: exactly reconstructable, zero Doppler.
    fn static_paths() -> PathSet {
        PathSet {
            paths: vec![
                Path { gain: Complex64::new(0.8, 0.1), delay_s: 0.0, doppler_hz: 0.0, aod_rad: 0.3, aoa_rad: -0.2 },
                Path { gain: Complex64::new(-0.3, 0.4), delay_s: 0.4e-6, doppler_hz: 0.0, aod_rad: -0.7, aoa_rad: 0.5 },
                Path { gain: Complex64::new(0.1, -0.2), delay_s: 1.1e-6, doppler_hz: 0.0, aod_rad: 1.0, aoa_rad: 0.9 },
            ],
        }
    }

    fn static_desk() -> SampledChannelGrid {
        let grid = desk_grid();
        let cfg = desk_pilot();
        sample_grid(&static_paths(), &grid, cfg.required_slots(&grid))
    }

    #[test]
    fn ls_inverts_noiseless_pilots() {
        let grid_cfg = desk_grid();
        let cfg = desk_pilot();
        let grid = static_desk();
        let filters: Vec<_> =
            (0..cfg.n_dt).map(|s| build_spatial_filter(&cfg, &grid_cfg, s).unwrap()).collect();
        let obs = dl_receive(&grid, &filters, &grid_cfg, &cfg, 300.0, 0).unwrap();
        let o = &obs[5];
        let ls = ls_estimate(o, &cfg).unwrap();
        let h = crate::pilot::rb_channel(&grid_cfg, &grid, &cfg, o.slot, o.coords.1);
        let want = filters[o.coords.0].f.mul(&h);
        let err: f64 = ls.data.iter().zip(&want.data).map(|(a, b)| (a - b).norm()).sum();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn denoise_thresholds_by_magnitude() {
        let x = CMat::from_vec(
            1,
            3,
            vec![
                Complex64::new(0.05, 0.0),
                Complex64::new(0.0, 0.5),
                Complex64::new(0.3, 0.4),
            ],
        );
        let y = denoise(&x, 0.1, 2.0);
        assert_eq!(y[(0, 0)], Complex64::new(0.0, 0.0));
        assert_eq!(y[(0, 1)], Complex64::new(0.0, 0.5));
        assert_eq!(y[(0, 2)], Complex64::new(0.3, 0.4));
        // sigma = 0 keeps everything nonzero
        let id = denoise(&x, 0.0, 2.0);
        assert_eq!(id.data, x.data);
    }

    #[test]
    fn dn_refine_reduces_noise_on_sparse_channel() {
        let grid_cfg = desk_grid();
        let cfg = desk_pilot();
        let grid = static_desk();
        let filters: Vec<_> =
            (0..cfg.n_dt).map(|s| build_spatial_filter(&cfg, &grid_cfg, s).unwrap()).collect();
        let clean = dl_receive(&grid, &filters, &grid_cfg, &cfg, 300.0, 0).unwrap();
        let noisy = dl_receive(&grid, &filters, &grid_cfg, &cfg, 5.0, 1).unwrap();
        let (dl_clean, _) = build_features(&clean, &cfg, &grid_cfg, None).unwrap();
        let (dl_ls, _) = build_features(&noisy, &cfg, &grid_cfg, None).unwrap();
        let (dl_dn, _) = build_features(&noisy, &cfg, &grid_cfg, Some(2.0)).unwrap();
        let mut err_ls = 0.0;
        let mut err_dn = 0.0;
        for s in 0..cfg.n_dt {
            for (a, b) in dl_ls.slots[s].data.iter().zip(&dl_clean.slots[s].data) {
                err_ls += (a - b).norm_sqr();
            }
            for (a, b) in dl_dn.slots[s].data.iter().zip(&dl_clean.slots[s].data) {
                err_dn += (a - b).norm_sqr();
            }
        }
        assert!(err_dn < err_ls, "dn {err_dn} !< ls {err_ls}");
    }

    #[test]
    fn dn_refine_is_identity_at_zero_sigma() {
        let grid_cfg = desk_grid();
        let cfg = desk_pilot();
        let grid = static_desk();
        let filters: Vec<_> =
            (0..cfg.n_dt).map(|s| build_spatial_filter(&cfg, &grid_cfg, s).unwrap()).collect();
        let obs = dl_receive(&grid, &filters, &grid_cfg, &cfg, 300.0, 0).unwrap();
        let (dl, _) = build_features(&obs, &cfg, &grid_cfg, None).unwrap();
        let refined = dn_refine_dl(&dl.slots[0], &cfg, 0.0, 2.0);
        let err: f64 =
            refined.data.iter().zip(&dl.slots[0].data).map(|(a, b)| (a - b).norm()).sum();
        assert!(err < 1e-9, "round-trip err {err}");
    }

    #[test]
    fn lce_exact_on_static_noiseless_channel() {
        let grid_cfg = desk_grid();
        let cfg = desk_pilot();
        let grid = static_desk();
        let obs = ul_receive(&grid, &grid_cfg, &cfg, 300.0, 0).unwrap();
        let (_, ul) = build_features(&obs, &cfg, &grid_cfg, None).unwrap();
        let pred = lce_baseline(&ul, &cfg, &grid_cfg);
        // observed antennas (m_s = n_rx here) match truth at predicted slots
        let pred_slots = cfg.predicted_slots(&grid_cfg);
        for (i, &slot) in pred_slots.iter().enumerate() {
            for l in 0..cfg.l_subbands {
                for n in 0..cfg.n_comb() {
                    let truth = grid.matrix_at(slot, cfg.comb_subcarrier(l, n));
                    let got = pred.at(i, l, n);
                    for a in 0..grid_cfg.n_tx {
                        for b in 0..cfg.m_s {
                            let d = (got[(a, b)] - truth[(a, b)]).norm();
                            assert!(d < 1e-6, "({i},{l},{n},{a},{b}) err {d}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rx_completion_exact_when_all_antennas_observed() {
        let row = vec![Complex64::new(0.4, -0.3), Complex64::new(-0.1, 0.8)];
        let full = complete_rx_row(&row, 2);
        assert_eq!(full, row);
    }

    #[test]
    fn rx_completion_reconstructs_single_beam() {
        // row drawn from one 4-point DFT column, two observed entries
        let f = dft_matrix(4);
        let c = 2usize;
        let coef = Complex64::new(1.3, -0.4);
        let truth: Vec<Complex64> = (0..4).map(|r| f[(r, c)] * coef).collect();
        let full = complete_rx_row(&truth[..2], 4);
        for (a, b) in full.iter().zip(&truth) {
            assert!((a - b).norm() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn mmse_falls_back_to_lce_on_empty_feedback() {
        let grid_cfg = desk_grid();
        let cfg = desk_pilot();
        let grid = static_desk();
        let obs = ul_receive(&grid, &grid_cfg, &cfg, 10.0, 3).unwrap();
        let (_, ul) = build_features(&obs, &cfg, &grid_cfg, None).unwrap();
        let zero_dirs = vec![vec![Complex64::new(0.0, 0.0); grid_cfg.n_tx]; cfg.n_dt];
        let a = mmse_type2_baseline(&ul, &zero_dirs, 0.1, &cfg, &grid_cfg);
        let b = lce_baseline(&ul, &cfg, &grid_cfg);
        for (x, y) in a.mats.iter().zip(&b.mats) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn mmse_denoising_beats_lce_with_good_feedback() {
        let grid_cfg = desk_grid();
        let cfg = desk_pilot();
        let grid = static_desk();
        let snr_db = 0.0;
        let obs = ul_receive(&grid, &grid_cfg, &cfg, snr_db, 5).unwrap();
        let sigma_ul = obs[0].noise_var.sqrt();
        let (_, ul) = build_features(&obs, &cfg, &grid_cfg, None).unwrap();
        // oracle feedback: dominant Tx direction of the true channel per
        // training slot, scaled to unit norm
        let mut dirs = Vec::new();
        for s in 0..cfg.n_dt {
            let slot = cfg.csirs_slot(s);
            let mut acc = CMat::zeros(grid_cfg.n_tx, grid_cfg.n_tx);
            for sc in (0..grid_cfg.n_c).step_by(8) {
                let h = grid.matrix_at(slot, sc);
                let hh = h.mul(&h.adjoint());
                acc = acc.add(&hh);
            }
            let u = crate::linalg::dominant_eigenvector(&acc, 50);
            dirs.push(u);
        }
        let mmse = mmse_type2_baseline(&ul, &dirs, sigma_ul, &cfg, &grid_cfg);
        let lce = lce_baseline(&ul, &cfg, &grid_cfg);
        let mut err_mmse = 0.0;
        let mut err_lce = 0.0;
        let pred_slots = cfg.predicted_slots(&grid_cfg);
        for (i, &slot) in pred_slots.iter().enumerate() {
            for l in 0..cfg.l_subbands {
                for n in 0..cfg.n_comb() {
                    let truth = grid.matrix_at(slot, cfg.comb_subcarrier(l, n));
                    for a in 0..grid_cfg.n_tx {
                        for b in 0..grid_cfg.n_rx {
                            err_mmse += (mmse.at(i, l, n)[(a, b)] - truth[(a, b)]).norm_sqr();
                            err_lce += (lce.at(i, l, n)[(a, b)] - truth[(a, b)]).norm_sqr();
                        }
                    }
                }
            }
        }
        assert!(err_mmse < err_lce, "mmse {err_mmse} !< lce {err_lce}");
    }
}
