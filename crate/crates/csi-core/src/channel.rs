//! Parametric time-varying multipath MIMO channel on a slot/subcarrier grid.
//!
//! Uniform linear arrays with configurable element spacing at both ends.
//! Subcarrier k maps to baseband offset k*delta_f; the carrier phase is
//! absorbed into the path gains, so only relative frequency structure
//! appears downstream. UL and DL read the same grid (TDD reciprocity by
//! construction).

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use std::f64::consts::PI;
use thiserror::Error;

use crate::linalg::CMat;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid path profile: {0}")]
    Config(String),
    #[error("path delay {delay}s outside delay grid [{min}, {max}]s")]
    DelayOutOfRange { delay: f64, min: f64, max: f64 },
}

/// One propagation path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub aod_rad: f64,
    pub aoa_rad: f64,
}

/// A multipath drop: gains normalized so E[sum |alpha_p|^2] = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

/// Sampling grid configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_c: usize,
    /// Subcarrier spacing in Hz.
    pub delta_f: f64,
    /// CSI-RS slot spacing in seconds.
    pub delta_t: f64,
    /// SRS interval in units of delta_t.
    pub srs_interval: usize,
    /// Carrier frequency in Hz.
    pub f_c: f64,
    /// Antenna element spacing in wavelengths.
    pub spacing: f64,
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.n_tx < 1 || self.n_rx < 1 || self.n_c < 1 || self.srs_interval < 1 {
            return Err(ChannelError::Config("all counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ground-truth channel tensor over (slot, subcarrier, tx, rx).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledChannelGrid {
    pub n_slots: usize,
    pub n_sc: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    data: Vec<Complex64>,
}

impl SampledChannelGrid {
    pub fn at(&self, slot: usize, sc: usize, tx: usize, rx: usize) -> Complex64 {
        self.data[((slot * self.n_sc + sc) * self.n_tx + tx) * self.n_rx + rx]
    }

    /// The full [n_tx x n_rx] matrix at one (slot, subcarrier).
    pub fn matrix_at(&self, slot: usize, sc: usize) -> CMat {
        let base = (slot * self.n_sc + sc) * self.n_tx * self.n_rx;
        CMat::from_vec(self.n_tx, self.n_rx, self.data[base..base + self.n_tx * self.n_rx].to_vec())
    }

    pub fn raw(&self) -> &[Complex64] {
        &self.data
    }

    pub fn from_raw(
        n_slots: usize,
        n_sc: usize,
        n_tx: usize,
        n_rx: usize,
        data: Vec<Complex64>,
    ) -> Self {
        assert_eq!(data.len(), n_slots * n_sc * n_tx * n_rx);
        Self { n_slots, n_sc, n_tx, n_rx, data }
    }
}

/// ULA steering vector: element i = exp(j 2 pi spacing i sin(theta)).
pub fn steering(theta: f64, count: usize, spacing: f64) -> Vec<Complex64> {
    assert!(count >= 1);
    (0..count)
        .map(|i| Complex64::from_polar(1.0, 2.0 * PI * spacing * i as f64 * theta.sin()))
        .collect()
}

/// Channel frequency response H(t, f), summed over paths:
/// H = sum_p alpha_p e^{j2pi nu_p t} e^{-j2pi tau_p f} a_T(aod) a_R^H(aoa).
pub fn cfr(paths: &PathSet, t: f64, f: f64, cfg: &GridConfig) -> CMat {
    let mut h = CMat::zeros(cfg.n_tx, cfg.n_rx);
    for p in &paths.paths {
        let phase = Complex64::from_polar(1.0, 2.0 * PI * (p.doppler_hz * t - p.delay_s * f));
        let coeff = p.gain * phase;
        let at = steering(p.aod_rad, cfg.n_tx, cfg.spacing);
        let ar = steering(p.aoa_rad, cfg.n_rx, cfg.spacing);
        for i in 0..cfg.n_tx {
            for j in 0..cfg.n_rx {
                h[(i, j)] += coeff * at[i] * ar[j].conj();
            }
        }
    }
    h
}

/// Channel impulse response on a delay grid at time t.
/// Each path's energy is assigned to the nearest grid tap.
pub fn cir(
    paths: &PathSet,
    t: f64,
    delay_grid: &[f64],
    cfg: &GridConfig,
) -> Result<Vec<CMat>, ChannelError> {
    assert!(delay_grid.windows(2).all(|w| w[0] < w[1]), "delay grid must be monotone");
    let step = if delay_grid.len() > 1 { delay_grid[1] - delay_grid[0] } else { f64::INFINITY };
    let (min, max) = (delay_grid[0], *delay_grid.last().unwrap());
    let mut taps = vec![CMat::zeros(cfg.n_tx, cfg.n_rx); delay_grid.len()];
    for p in &paths.paths {
        if p.delay_s < min - step / 2.0 || p.delay_s > max + step / 2.0 {
            return Err(ChannelError::DelayOutOfRange { delay: p.delay_s, min, max });
        }
        let idx = delay_grid
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - p.delay_s).abs().partial_cmp(&(b.1 - p.delay_s).abs()).unwrap()
            })
            .unwrap()
            .0;
        let coeff = p.gain * Complex64::from_polar(1.0, 2.0 * PI * p.doppler_hz * t);
        let at = steering(p.aod_rad, cfg.n_tx, cfg.spacing);
        let ar = steering(p.aoa_rad, cfg.n_rx, cfg.spacing);
        for i in 0..cfg.n_tx {
            for j in 0..cfg.n_rx {
                taps[idx][(i, j)] += coeff * at[i] * ar[j].conj();
            }
        }
    }
    Ok(taps)
}

/// Sample the grid: H{n,k} = cfr(paths, n*delta_t, k*delta_f).
pub fn sample_grid(paths: &PathSet, cfg: &GridConfig, n_slots: usize) -> SampledChannelGrid {
    assert!(n_slots >= 1);
    let mut data = Vec::with_capacity(n_slots * cfg.n_c * cfg.n_tx * cfg.n_rx);
    for n in 0..n_slots {
        let t = n as f64 * cfg.delta_t;
        for k in 0..cfg.n_c {
            let h = cfr(paths, t, k as f64 * cfg.delta_f, cfg);
            data.extend_from_slice(&h.data);
        }
    }
    SampledChannelGrid::from_raw(n_slots, cfg.n_c, cfg.n_tx, cfg.n_rx, data)
}

/// Statistical profile for random channel drops.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProfile {
    pub p_min: usize,
    pub p_max: usize,
    /// Mean of the exponential power-delay profile, seconds.
    pub delay_spread_s: f64,
    /// Hard cap on path delays, seconds.
    pub max_delay_s: f64,
    /// UE speed in m/s; Doppler bound = speed * f_c / c.
    pub ue_speed_mps: f64,
    pub f_c_hz: f64,
}

impl PathProfile {
    pub fn doppler_bound_hz(&self) -> f64 {
        self.ue_speed_mps * self.f_c_hz / SPEED_OF_LIGHT
    }
}

/// Draw a reproducible random PathSet.
pub fn draw_paths(rng_seed: u64, profile: &PathProfile) -> Result<PathSet, ChannelError> {
    if profile.p_min < 1 || profile.p_max < profile.p_min {
        return Err(ChannelError::Config(format!(
            "empty path-count range [{}, {}]",
            profile.p_min, profile.p_max
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let p = rng.gen_range(profile.p_min..=profile.p_max);
    let exp = Exp::new(1.0 / profile.delay_spread_s.max(1e-12))
        .map_err(|e| ChannelError::Config(format!("bad delay spread: {e}")))?;
    let nu_max = profile.doppler_bound_hz();

    let delays: Vec<f64> = (0..p)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                loop {
                    let d = exp.sample(&mut rng);
                    if d <= profile.max_delay_s {
                        break d;
                    }
                }
            }
        })
        .collect();
    // exponential PDP; powers normalized so E[sum |alpha|^2] = 1
    let weights: Vec<f64> = delays.iter().map(|d| (-d / profile.delay_spread_s.max(1e-12)).exp()).collect();
    let wsum: f64 = weights.iter().sum();
    let paths = delays
        .iter()
        .zip(&weights)
        .map(|(&delay_s, &w)| {
            let amp = (w / wsum / 2.0).sqrt();
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Path {
                gain: Complex64::new(amp * re, amp * im),
                delay_s,
                doppler_hz: nu_max * (rng.gen::<f64>() * 2.0 - 1.0),
                aod_rad: rng.gen_range(-PI / 2.0..PI / 2.0),
                aoa_rad: rng.gen_range(-PI / 2.0..PI / 2.0),
            }
        })
        .collect();
    Ok(PathSet { paths })
}
