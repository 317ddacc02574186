//! Drop synthesis and the FCDG on-disk dataset container.
//!
//! A dataset stores, per drop, the ground-truth grid and the raw pilot
//! observations; features are rebuilt on load so estimator changes never
//! invalidate stored data. Samples are read back one at a time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_complex::Complex64;
use thiserror::Error;

use crate::channel::{draw_paths, sample_grid, GridConfig, PathProfile, SampledChannelGrid};
use crate::estimators::{build_features, DlFeature, UlFeature};
use crate::linalg::CMat;
use crate::pilot::{
    build_spatial_filter, dl_receive, rb_channel, ul_receive, ObservationKind, PilotConfig,
    PilotObservation,
};

const MAGIC: &[u8; 4] = b"FCDG";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("drop synthesis error: {0}")]
    Synthesis(String),
}

/// Everything needed to synthesize a drop reproducibly.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub grid: GridConfig,
    pub pilot: PilotConfig,
    pub profile: PathProfile,
    pub dl_snr_db: f64,
    pub ul_snr_db: f64,
    /// DN threshold; None keeps plain LS features.
    pub kappa: Option<f64>,
}

impl Scenario {
    /// Grid length covering the schedule and the predicted slots.
    pub fn n_slots(&self) -> usize {
        let pred = *self.pilot.predicted_slots(&self.grid).last().unwrap();
        self.pilot.required_slots(&self.grid).max(pred + 1)
    }
}

/// One synthesized drop as stored on disk.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub grid: SampledChannelGrid,
    pub obs: Vec<PilotObservation>,
}

/// One drop after feature extraction.
#[derive(Debug, Clone)]
pub struct Sample {
    pub dl: DlFeature,
    pub ul: UlFeature,
    /// Noiseless port-domain DL slots [n_rb*m_c x n_rx], the feedback
    /// target under perfect estimation.
    pub clean_dl: Vec<CMat>,
    /// True channels at (predicted slot i, subband l, comb n).
    pub truth: Vec<CMat>,
    pub dl_noise_var: f64,
    pub ul_noise_var: f64,
}

/// Synthesize one drop; `seed` fixes both the channel and the noise.
pub fn synthesize(scenario: &Scenario, seed: u64) -> Result<RawSample, DatasetError> {
    let paths = draw_paths(seed, &scenario.profile)
        .map_err(|e| DatasetError::Synthesis(e.to_string()))?;
    let grid = sample_grid(&paths, &scenario.grid, scenario.n_slots());
    let filters: Vec<_> = (0..scenario.pilot.n_dt)
        .map(|s| build_spatial_filter(&scenario.pilot, &scenario.grid, s))
        .collect::<Result<_, _>>()
        .map_err(|e| DatasetError::Synthesis(e.to_string()))?;
    let mut obs = dl_receive(
        &grid,
        &filters,
        &scenario.grid,
        &scenario.pilot,
        scenario.dl_snr_db,
        seed,
    )
    .map_err(|e| DatasetError::Synthesis(e.to_string()))?;
    obs.extend(
        ul_receive(&grid, &scenario.grid, &scenario.pilot, scenario.ul_snr_db, seed)
            .map_err(|e| DatasetError::Synthesis(e.to_string()))?,
    );
    Ok(RawSample { grid, obs })
}

/// Rebuild the model-facing sample from a stored drop.
pub fn prepare(raw: &RawSample, scenario: &Scenario) -> Result<Sample, DatasetError> {
    let (dl, ul) = build_features(&raw.obs, &scenario.pilot, &scenario.grid, scenario.kappa)
        .map_err(|e| DatasetError::Synthesis(e.to_string()))?;
    let mut dl_noise_var = 0.0;
    let mut ul_noise_var = 0.0;
    for o in &raw.obs {
        match o.kind {
            ObservationKind::DlCsiRs => dl_noise_var = o.noise_var,
            ObservationKind::UlSrs => ul_noise_var = o.noise_var,
        }
    }
    let p = &scenario.pilot;
    let mut clean_dl = Vec::with_capacity(p.n_dt);
    for s in 0..p.n_dt {
        let f = build_spatial_filter(p, &scenario.grid, s)
            .map_err(|e| DatasetError::Synthesis(e.to_string()))?;
        let slot = p.csirs_slot(s);
        let mut m = CMat::zeros(p.n_rb * p.m_c, scenario.grid.n_rx);
        for r in 0..p.n_rb {
            let ports = f.f.mul(&rb_channel(&scenario.grid, &raw.grid, p, slot, r));
            for i in 0..p.m_c {
                for j in 0..scenario.grid.n_rx {
                    m[(r * p.m_c + i, j)] = ports[(i, j)];
                }
            }
        }
        clean_dl.push(m);
    }
    let mut truth = Vec::new();
    for &slot in &p.predicted_slots(&scenario.grid) {
        for l in 0..p.l_subbands {
            for n in 0..p.n_comb() {
                truth.push(raw.grid.matrix_at(slot, p.comb_subcarrier(l, n)));
            }
        }
    }
    Ok(Sample { dl, ul, clean_dl, truth, dl_noise_var, ul_noise_var })
}

fn write_cmat<W: Write>(w: &mut W, m: &CMat) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(m.rows as u32)?;
    w.write_u32::<LittleEndian>(m.cols as u32)?;
    for z in &m.data {
        w.write_f64::<LittleEndian>(z.re)?;
        w.write_f64::<LittleEndian>(z.im)?;
    }
    Ok(())
}

fn read_cmat<R: Read>(r: &mut R) -> Result<CMat, DatasetError> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    if rows * cols > 1 << 28 {
        return Err(DatasetError::Format(format!("matrix {rows}x{cols} too large")));
    }
    let data = (0..rows * cols)
        .map(|_| {
            let re = r.read_f64::<LittleEndian>()?;
            let im = r.read_f64::<LittleEndian>()?;
            Ok(Complex64::new(re, im))
        })
        .collect::<Result<_, std::io::Error>>()?;
    Ok(CMat::from_vec(rows, cols, data))
}

/// Streaming dataset writer; the header fixes the scenario.
pub struct DatasetWriter {
    w: BufWriter<File>,
    scenario: Scenario,
    declared: u32,
    written: u32,
}

impl DatasetWriter {
    pub fn create(path: &Path, scenario: &Scenario, n_samples: u32) -> Result<Self, DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let g = &scenario.grid;
        for v in [g.n_tx, g.n_rx, g.n_c, g.srs_interval] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        for v in [g.delta_f, g.delta_t, g.f_c, g.spacing] {
            w.write_f64::<LittleEndian>(v)?;
        }
        let p = &scenario.pilot;
        for v in [
            p.m_c,
            p.m_s,
            p.n_rb,
            p.m_sc,
            p.l_subbands,
            p.n_tc,
            p.k_soundings,
            p.n_dt,
            p.n_tr,
            p.csirs_stride,
        ] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        w.write_u64::<LittleEndian>(p.beam_seed)?;
        let pr = &scenario.profile;
        w.write_u32::<LittleEndian>(pr.p_min as u32)?;
        w.write_u32::<LittleEndian>(pr.p_max as u32)?;
        for v in [pr.delay_spread_s, pr.max_delay_s, pr.ue_speed_mps, pr.f_c_hz] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_f64::<LittleEndian>(scenario.dl_snr_db)?;
        w.write_f64::<LittleEndian>(scenario.ul_snr_db)?;
        w.write_f64::<LittleEndian>(scenario.kappa.unwrap_or(f64::NAN))?;
        w.write_u32::<LittleEndian>(n_samples)?;
        Ok(DatasetWriter { w, scenario: scenario.clone(), declared: n_samples, written: 0 })
    }

    pub fn append(&mut self, raw: &RawSample) -> Result<(), DatasetError> {
        if self.written == self.declared {
            return Err(DatasetError::Format(format!(
                "dataset already holds the declared {} samples",
                self.declared
            )));
        }
        let g = &raw.grid;
        self.w.write_u32::<LittleEndian>(g.n_slots as u32)?;
        for z in g.raw() {
            self.w.write_f64::<LittleEndian>(z.re)?;
            self.w.write_f64::<LittleEndian>(z.im)?;
        }
        self.w.write_u32::<LittleEndian>(raw.obs.len() as u32)?;
        for o in &raw.obs {
            let kind = match o.kind {
                ObservationKind::DlCsiRs => 0u8,
                ObservationKind::UlSrs => 1u8,
            };
            self.w.write_u8(kind)?;
            for c in [o.coords.0, o.coords.1, o.coords.2, o.slot] {
                self.w.write_u32::<LittleEndian>(c as u32)?;
            }
            self.w.write_u32::<LittleEndian>(o.subcarriers.len() as u32)?;
            for &sc in &o.subcarriers {
                self.w.write_u32::<LittleEndian>(sc as u32)?;
            }
            write_cmat(&mut self.w, &o.payload)?;
            self.w.write_f64::<LittleEndian>(o.noise_var)?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), DatasetError> {
        if self.written != self.declared {
            return Err(DatasetError::Format(format!(
                "dataset declared {} samples but {} were written",
                self.declared, self.written
            )));
        }
        self.w.flush()?;
        Ok(())
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
}

/// Streaming dataset reader.
pub struct DatasetReader {
    r: BufReader<File>,
    pub scenario: Scenario,
    pub n_samples: u32,
    read: u32,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DatasetError::Format(format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(DatasetError::Format(format!("unsupported version {version}")));
        }
        let mut u = || -> Result<usize, std::io::Error> {
            Ok(r.read_u32::<LittleEndian>()? as usize)
        };
        let (n_tx, n_rx, n_c, srs_interval) = (u()?, u()?, u()?, u()?);
        let mut f = || -> Result<f64, std::io::Error> { r.read_f64::<LittleEndian>() };
        let (delta_f, delta_t, f_c, spacing) = (f()?, f()?, f()?, f()?);
        let grid = GridConfig { n_tx, n_rx, n_c, delta_f, delta_t, srs_interval, f_c, spacing };
        let mut u = || -> Result<usize, std::io::Error> {
            Ok(r.read_u32::<LittleEndian>()? as usize)
        };
        let pilot = PilotConfig {
            m_c: u()?,
            m_s: u()?,
            n_rb: u()?,
            m_sc: u()?,
            l_subbands: u()?,
            n_tc: u()?,
            k_soundings: u()?,
            n_dt: u()?,
            n_tr: u()?,
            csirs_stride: u()?,
            beam_seed: r.read_u64::<LittleEndian>()?,
        };
        let p_min = r.read_u32::<LittleEndian>()? as usize;
        let p_max = r.read_u32::<LittleEndian>()? as usize;
        let mut f = || -> Result<f64, std::io::Error> { r.read_f64::<LittleEndian>() };
        let profile = PathProfile {
            p_min,
            p_max,
            delay_spread_s: f()?,
            max_delay_s: f()?,
            ue_speed_mps: f()?,
            f_c_hz: f()?,
        };
        let dl_snr_db = f()?;
        let ul_snr_db = f()?;
        let kappa_raw = f()?;
        let kappa = if kappa_raw.is_nan() { None } else { Some(kappa_raw) };
        let n_samples = r.read_u32::<LittleEndian>()?;
        Ok(DatasetReader {
            r,
            scenario: Scenario { grid, pilot, profile, dl_snr_db, ul_snr_db, kappa },
            n_samples,
            read: 0,
        })
    }

    pub fn next_raw(&mut self) -> Result<Option<RawSample>, DatasetError> {
        if self.read == self.n_samples {
            return Ok(None);
        }
        let g = &self.scenario.grid;
        let n_slots = self.r.read_u32::<LittleEndian>()? as usize;
        let count = n_slots * g.n_c * g.n_tx * g.n_rx;
        if count > 1 << 28 {
            return Err(DatasetError::Format(format!("grid of {n_slots} slots too large")));
        }
        let data = (0..count)
            .map(|_| {
                let re = self.r.read_f64::<LittleEndian>()?;
                let im = self.r.read_f64::<LittleEndian>()?;
                Ok(Complex64::new(re, im))
            })
            .collect::<Result<_, std::io::Error>>()?;
        let grid = SampledChannelGrid::from_raw(n_slots, g.n_c, g.n_tx, g.n_rx, data);
        let n_obs = self.r.read_u32::<LittleEndian>()? as usize;
        let mut obs = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let kind = match self.r.read_u8()? {
                0 => ObservationKind::DlCsiRs,
                1 => ObservationKind::UlSrs,
                k => return Err(DatasetError::Format(format!("bad observation kind {k}"))),
            };
            let mut u = || -> Result<usize, std::io::Error> {
                Ok(self.r.read_u32::<LittleEndian>()? as usize)
            };
            let coords = (u()?, u()?, u()?);
            let slot = u()?;
            let n_sc = u()?;
            let subcarriers = (0..n_sc).map(|_| u()).collect::<Result<_, _>>()?;
            let payload = read_cmat(&mut self.r)?;
            let noise_var = self.r.read_f64::<LittleEndian>()?;
            obs.push(PilotObservation { kind, coords, slot, subcarriers, payload, noise_var });
        }
        self.read += 1;
        Ok(Some(RawSample { grid, obs }))
    }

    pub fn next_sample(&mut self) -> Result<Option<Sample>, DatasetError> {
        let scenario = self.scenario.clone();
        match self.next_raw()? {
            Some(raw) => Ok(Some(prepare(&raw, &scenario)?)),
            None => Ok(None),
        }
    }
}
