//! CSI-RS / SRS schedules and received pilot synthesis.
//!
//! DL CSI-RS: per slot s and resource block r,
//! `Y = X_d F_s H_{s,r} + N` with a deterministic unitary DFT pilot `X_d`
//! and an orthonormal spatial filter `F_s` drawn from the DFT basis over
//! (subcarrier-within-RB x Tx antenna).
//!
//! UL SRS: per sounding (k, l) and comb subcarrier n,
//! `Y = H W_u X_u + N` where `W_u` selects the leading `m_s` UE antennas.
//!
//! Comb position m = l*N + n maps to physical subcarrier m * n_tc.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::channel::{GridConfig, SampledChannelGrid};
use crate::linalg::{dft_matrix, CMat};

#[derive(Debug, Error)]
pub enum PilotError {
    #[error("pilot config error: {0}")]
    Config(String),
    #[error("grid too short: slot {required} required but grid has {available} slots")]
    GridTooShort { required: usize, available: usize },
}

/// Pilot and schedule configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotConfig {
    /// CSI-RS ports.
    pub m_c: usize,
    /// SRS ports.
    pub m_s: usize,
    pub n_rb: usize,
    /// Subcarriers per RB.
    pub m_sc: usize,
    /// Frequency-hopped subbands.
    pub l_subbands: usize,
    /// Transmission combs.
    pub n_tc: usize,
    /// Full-band soundings.
    pub k_soundings: usize,
    /// DL training slots.
    pub n_dt: usize,
    /// Prediction slots.
    pub n_tr: usize,
    /// CSI-RS schedule stride in grid slots.
    pub csirs_stride: usize,
    /// Beam subset rotation offset.
    pub beam_seed: u64,
}

impl PilotConfig {
    pub fn n_c(&self) -> usize {
        self.n_rb * self.m_sc
    }

    /// Comb subcarriers per subband per symbol: N = N_c / (L * N_tc).
    pub fn n_comb(&self) -> usize {
        self.n_c() / (self.l_subbands * self.n_tc)
    }

    pub fn validate(&self, grid: &GridConfig) -> Result<(), PilotError> {
        if self.m_c > self.m_sc * grid.n_tx {
            return Err(PilotError::Config(format!(
                "m_c = {} exceeds beam budget m_sc*n_tx = {}",
                self.m_c,
                self.m_sc * grid.n_tx
            )));
        }
        if self.m_s > grid.n_rx {
            return Err(PilotError::Config(format!(
                "m_s = {} exceeds n_rx = {}",
                self.m_s, grid.n_rx
            )));
        }
        if grid.n_c != self.n_c() {
            return Err(PilotError::Config(format!(
                "n_c mismatch: grid {} vs n_rb*m_sc = {}",
                grid.n_c,
                self.n_c()
            )));
        }
        if self.n_c() % (self.l_subbands * self.n_tc) != 0 {
            return Err(PilotError::Config(format!(
                "l*n_tc = {} does not divide n_c = {}",
                self.l_subbands * self.n_tc,
                self.n_c()
            )));
        }
        Ok(())
    }

    /// Absolute grid slot of SRS sounding (k, l).
    pub fn srs_slot(&self, grid: &GridConfig, k: usize, l: usize) -> usize {
        grid.srs_interval * (k * self.l_subbands + l)
    }

    /// Absolute grid slot of CSI-RS slot s.
    pub fn csirs_slot(&self, s: usize) -> usize {
        s * self.csirs_stride
    }

    /// Physical subcarrier of comb position (l, n).
    pub fn comb_subcarrier(&self, l: usize, n: usize) -> usize {
        (l * self.n_comb() + n) * self.n_tc
    }

    /// Absolute grid slots of the predicted DL transmission slots.
    pub fn predicted_slots(&self, grid: &GridConfig) -> Vec<usize> {
        (0..self.n_tr)
            .map(|i| grid.srs_interval * (self.k_soundings * self.l_subbands + i))
            .collect()
    }

    /// Number of grid slots needed to cover training plus prediction.
    pub fn required_slots(&self, grid: &GridConfig) -> usize {
        let srs_max = self.srs_slot(grid, self.k_soundings - 1, self.l_subbands - 1);
        let csirs_max = self.csirs_slot(self.n_dt - 1);
        let pred_max = *self.predicted_slots(grid).last().unwrap();
        srs_max.max(csirs_max).max(pred_max) + 1
    }
}

/// Orthonormal beam rows for one DL slot.
#[derive(Debug, Clone)]
pub struct SpatialFilter {
    pub slot: usize,
    /// [m_c x m_sc*n_tx]
    pub f: CMat,
    /// Global DFT-beam indices of the selected rows.
    pub beam_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    DlCsiRs,
    UlSrs,
}

/// One received pilot measurement plus its schedule coordinates.
#[derive(Debug, Clone)]
pub struct PilotObservation {
    pub kind: ObservationKind,
    /// DL: (s, r, 0); UL: (k, l, n).
    pub coords: (usize, usize, usize),
    /// Absolute grid slot.
    pub slot: usize,
    /// Physical subcarriers covered.
    pub subcarriers: Vec<usize>,
    /// DL: [m_c x n_rx]; UL: [n_tx x m_s].
    pub payload: CMat,
    pub noise_var: f64,
}

/// Deterministic unitary pilot matrix (normalized DFT).
pub fn pilot_matrix(n: usize) -> CMat {
    dft_matrix(n)
}

/// Build the spatial filter for DL slot `s`.
///
/// Beams are Kronecker DFT pairs over (subcarrier-within-RB, Tx antenna);
/// the global beam index advances by m_c per slot so consecutive slots
/// select disjoint subsets and the union sweeps Tx directions first.
pub fn build_spatial_filter(
    cfg: &PilotConfig,
    grid: &GridConfig,
    s: usize,
) -> Result<SpatialFilter, PilotError> {
    let dim = cfg.m_sc * grid.n_tx;
    if cfg.m_c > dim {
        return Err(PilotError::Config(format!("m_c = {} > beam space {}", cfg.m_c, dim)));
    }
    let offset = (cfg.beam_seed as usize) % dim;
    let norm = 1.0 / (dim as f64).sqrt();
    let mut f = CMat::zeros(cfg.m_c, dim);
    let mut beam_indices = Vec::with_capacity(cfg.m_c);
    for i in 0..cfg.m_c {
        let g = (offset + s * cfg.m_c + i) % dim;
        beam_indices.push(g);
        let (u, w) = (g / grid.n_tx, g % grid.n_tx);
        for j in 0..cfg.m_sc {
            for a in 0..grid.n_tx {
                let phase = -2.0
                    * std::f64::consts::PI
                    * ((u * j) as f64 / cfg.m_sc as f64 + (w * a) as f64 / grid.n_tx as f64);
                f[(i, j * grid.n_tx + a)] = Complex64::from_polar(norm, phase);
            }
        }
    }
    Ok(SpatialFilter { slot: s, f, beam_indices })
}

/// Stacked per-RB channel [m_sc*n_tx x n_rx] at (absolute slot, RB r).
pub fn rb_channel(grid_cfg: &GridConfig, grid: &SampledChannelGrid, cfg: &PilotConfig, slot: usize, r: usize) -> CMat {
    let mut h = CMat::zeros(cfg.m_sc * grid_cfg.n_tx, grid_cfg.n_rx);
    for j in 0..cfg.m_sc {
        let sc = r * cfg.m_sc + j;
        for a in 0..grid_cfg.n_tx {
            for b in 0..grid_cfg.n_rx {
                h[(j * grid_cfg.n_tx + a, b)] = grid.at(slot, sc, a, b);
            }
        }
    }
    h
}

fn noise_rng(seed: u64, kind: u64, c0: usize, c1: usize, c2: usize) -> ChaCha12Rng {
    // per-observation stream derived from (seed, coordinates)
    let mix = seed
        ^ kind.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (c0 as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (c1 as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
        ^ (c2 as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    ChaCha12Rng::seed_from_u64(mix)
}

fn add_noise(m: &mut CMat, var: f64, rng: &mut ChaCha12Rng) {
    let std = (var / 2.0).sqrt();
    for z in &mut m.data {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *z += Complex64::new(std * re, std * im);
    }
}

/// Synthesize all DL CSI-RS observations over the n_dt training slots.
pub fn dl_receive(
    grid: &SampledChannelGrid,
    filters: &[SpatialFilter],
    grid_cfg: &GridConfig,
    cfg: &PilotConfig,
    snr_db: f64,
    noise_seed: u64,
) -> Result<Vec<PilotObservation>, PilotError> {
    if !snr_db.is_finite() {
        return Err(PilotError::Config(format!("non-finite SNR {snr_db}")));
    }
    assert_eq!(filters.len(), cfg.n_dt);
    let required = cfg.csirs_slot(cfg.n_dt - 1) + 1;
    if grid.n_slots < required {
        return Err(PilotError::GridTooShort { required: required - 1, available: grid.n_slots });
    }
    let x_d = pilot_matrix(cfg.m_c);
    // clean payloads first, to calibrate noise against mean signal power
    let mut clean = Vec::with_capacity(cfg.n_dt * cfg.n_rb);
    let mut power = 0.0;
    let mut count = 0usize;
    for s in 0..cfg.n_dt {
        let slot = cfg.csirs_slot(s);
        for r in 0..cfg.n_rb {
            let h = rb_channel(grid_cfg, grid, cfg, slot, r);
            let y = x_d.mul(&filters[s].f).mul(&h);
            power += y.data.iter().map(|z| z.norm_sqr()).sum::<f64>();
            count += y.data.len();
            clean.push((s, r, slot, y));
        }
    }
    let mean_power = power / count.max(1) as f64;
    let noise_var = mean_power * 10f64.powf(-snr_db / 10.0);
    Ok(clean
        .into_iter()
        .map(|(s, r, slot, mut y)| {
            let mut rng = noise_rng(noise_seed, 0, s, r, 0);
            add_noise(&mut y, noise_var, &mut rng);
            PilotObservation {
                kind: ObservationKind::DlCsiRs,
                coords: (s, r, 0),
                slot,
                subcarriers: (r * cfg.m_sc..(r + 1) * cfg.m_sc).collect(),
                payload: y,
                noise_var,
            }
        })
        .collect())
}

/// Synthesize all UL SRS observations over the K*L*N comb positions.
pub fn ul_receive(
    grid: &SampledChannelGrid,
    grid_cfg: &GridConfig,
    cfg: &PilotConfig,
    snr_db: f64,
    noise_seed: u64,
) -> Result<Vec<PilotObservation>, PilotError> {
    if !snr_db.is_finite() {
        return Err(PilotError::Config(format!("non-finite SNR {snr_db}")));
    }
    let required = cfg.srs_slot(grid_cfg, cfg.k_soundings - 1, cfg.l_subbands - 1);
    if grid.n_slots <= required {
        return Err(PilotError::GridTooShort { required, available: grid.n_slots });
    }
    let x_u = pilot_matrix(cfg.m_s);
    let n = cfg.n_comb();
    let mut clean = Vec::new();
    let mut power = 0.0;
    let mut count = 0usize;
    for k in 0..cfg.k_soundings {
        for l in 0..cfg.l_subbands {
            let slot = cfg.srs_slot(grid_cfg, k, l);
            for nn in 0..n {
                let sc = cfg.comb_subcarrier(l, nn);
                let h = grid.matrix_at(slot, sc);
                // H W_u: leading m_s columns
                let mut hw = CMat::zeros(grid_cfg.n_tx, cfg.m_s);
                for i in 0..grid_cfg.n_tx {
                    for j in 0..cfg.m_s {
                        hw[(i, j)] = h[(i, j)];
                    }
                }
                let y = hw.mul(&x_u);
                power += y.data.iter().map(|z| z.norm_sqr()).sum::<f64>();
                count += y.data.len();
                clean.push((k, l, nn, slot, sc, y));
            }
        }
    }
    let mean_power = power / count.max(1) as f64;
    let noise_var = mean_power * 10f64.powf(-snr_db / 10.0);
    Ok(clean
        .into_iter()
        .map(|(k, l, nn, slot, sc, mut y)| {
            let mut rng = noise_rng(noise_seed, 1, k, l, nn);
            add_noise(&mut y, noise_var, &mut rng);
            PilotObservation {
                kind: ObservationKind::UlSrs,
                coords: (k, l, nn),
                slot,
                subcarriers: vec![sc],
                payload: y,
                noise_var,
            }
        })
        .collect())
}

/// Timetable entry: kind, coordinates, absolute slot, subcarriers.
#[derive(Debug, Clone)]
pub struct ScheduleEntry {
    pub kind: ObservationKind,
    pub coords: (usize, usize, usize),
    pub slot: usize,
    pub subcarriers: Vec<usize>,
}

/// Full observation timetable, in schedule order per signal kind.
pub fn schedule_map(cfg: &PilotConfig, grid: &GridConfig) -> Vec<ScheduleEntry> {
    let mut entries = Vec::new();
    for s in 0..cfg.n_dt {
        entries.push(ScheduleEntry {
            kind: ObservationKind::DlCsiRs,
            coords: (s, 0, 0),
            slot: cfg.csirs_slot(s),
            subcarriers: (0..cfg.n_c()).collect(),
        });
    }
    for k in 0..cfg.k_soundings {
        for l in 0..cfg.l_subbands {
            entries.push(ScheduleEntry {
                kind: ObservationKind::UlSrs,
                coords: (k, l, 0),
                slot: cfg.srs_slot(grid, k, l),
                subcarriers: (0..cfg.n_comb()).map(|n| cfg.comb_subcarrier(l, n)).collect(),
            });
        }
    }
    entries
}
