//! Method-level evaluation: run a predictor over a sample set and score it.

use std::time::Instant;

use num_complex::Complex64;

use crate::dataset::{Sample, Scenario};
use crate::estimators::{lce_baseline, mmse_type2_baseline};
use crate::hascan::{Hascan, HascanConfig};
use crate::linalg::{dominant_eigenvector, CMat};
use crate::metrics::{cosine_similarity, ezf_spectral_efficiency, nmse_db};
use crate::nn::ModelParams;
use crate::tensor::ParamInit;

/// Everything `evaluate` can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Hascan,
    /// Uplink-only ablation: the feedback branch is zeroed.
    HascanU,
    /// Downlink-only ablation: the sounding branch is zeroed.
    HascanD,
    Lce,
    MmseType2,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Hascan => "hascan",
            Method::HascanU => "hascan_u",
            Method::HascanD => "hascan_d",
            Method::Lce => "lce",
            Method::MmseType2 => "mmse_type2",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "hascan" => Some(Method::Hascan),
            "hascan_u" => Some(Method::HascanU),
            "hascan_d" => Some(Method::HascanD),
            "lce" => Some(Method::Lce),
            "mmse_type2" => Some(Method::MmseType2),
            _ => None,
        }
    }

    pub fn needs_model(&self) -> bool {
        matches!(self, Method::Hascan | Method::HascanU | Method::HascanD)
    }
}

/// Rebuild the model wrapper at a different feedback budget. Parameter
/// shapes do not depend on the budget, so the trained registry plugs in
/// unchanged; only the quantizer resolution moves.
pub fn with_bit_budget(cfg: &HascanConfig, n_bit: u32) -> Hascan {
    let mut cfg = cfg.clone();
    cfg.n_bit = n_bit;
    let mut scratch = ModelParams::new();
    let mut init = ParamInit::new(0);
    Hascan::new(cfg, &mut scratch, &mut init)
}

/// Per-slot dominant Tx directions recovered from the DL feature, the
/// Type-II style feedback consumed by the MMSE baseline.
pub fn fed_back_directions(model: &Hascan, sample: &Sample) -> Vec<Vec<Complex64>> {
    let p = &model.cfg.pilot;
    let n_tx = model.cfg.grid.n_tx;
    (0..p.n_dt)
        .map(|s| {
            let mut cov = CMat::zeros(n_tx, n_tx);
            for rb in 0..p.n_rb {
                let mut ports = CMat::zeros(p.m_c, model.cfg.grid.n_rx);
                for i in 0..p.m_c {
                    for j in 0..model.cfg.grid.n_rx {
                        ports[(i, j)] = sample.dl.slots[s][(rb * p.m_c + i, j)];
                    }
                }
                let lifted = model.bridge.e_mats[s].mul(&ports);
                cov = cov.add(&lifted.mul(&lifted.adjoint()));
            }
            dominant_eigenvector(&cov, 40)
        })
        .collect()
}

/// Predicted grids per (predicted slot, subband, comb) for one sample.
pub fn predictions(
    method: Method,
    model: &Hascan,
    params: &ModelParams,
    scenario: &Scenario,
    sample: &Sample,
) -> Vec<CMat> {
    match method {
        Method::Hascan => model.predict(params, &sample.dl, &sample.ul, false, false),
        Method::HascanU => model.predict(params, &sample.dl, &sample.ul, true, false),
        Method::HascanD => model.predict(params, &sample.dl, &sample.ul, false, true),
        Method::Lce => lce_baseline(&sample.ul, &scenario.pilot, &scenario.grid).mats,
        Method::MmseType2 => {
            let dirs = fed_back_directions(model, sample);
            mmse_type2_baseline(
                &sample.ul,
                &dirs,
                sample.ul_noise_var.sqrt(),
                &scenario.pilot,
                &scenario.grid,
            )
            .mats
        }
    }
}

/// Scores of one method on one sample set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub nmse_db: f64,
    pub cosine: f64,
    pub wall_seconds: f64,
    /// Per-sample predicted grids, kept for SE scoring.
    pub est: Vec<Vec<CMat>>,
}

pub fn evaluate(
    method: Method,
    model: &Hascan,
    params: &ModelParams,
    scenario: &Scenario,
    samples: &[Sample],
) -> Evaluation {
    let start = Instant::now();
    let est: Vec<Vec<CMat>> = samples
        .iter()
        .map(|s| predictions(method, model, params, scenario, s))
        .collect();
    let wall_seconds = start.elapsed().as_secs_f64();
    let all_est: Vec<CMat> = est.iter().flatten().cloned().collect();
    let all_truth: Vec<CMat> = samples.iter().flat_map(|s| s.truth.clone()).collect();
    Evaluation {
        nmse_db: nmse_db(&all_est, &all_truth),
        cosine: cosine_similarity(&all_est, &all_truth),
        wall_seconds,
        est,
    }
}

/// Mean EZF sum spectral efficiency over drops formed by grouping `n_ue`
/// consecutive samples as co-scheduled users and treating each of the
/// first `n_positions` (slot, subband, comb) bins as one drop.
pub fn mean_se_over_drops(
    est: &[Vec<CMat>],
    truth: &[Vec<CMat>],
    n_ue: usize,
    n_positions: usize,
    snr_linear: f64,
) -> (f64, usize) {
    assert_eq!(est.len(), truth.len());
    let mut total = 0.0;
    let mut drops = 0usize;
    for group in (0..est.len() / n_ue).map(|g| g * n_ue) {
        for pos in 0..n_positions.min(truth[group].len()) {
            let e: Vec<CMat> = (0..n_ue).map(|u| est[group + u][pos].clone()).collect();
            let t: Vec<CMat> = (0..n_ue).map(|u| truth[group + u][pos].clone()).collect();
            total += ezf_spectral_efficiency(&e, &t, snr_linear);
            drops += 1;
        }
    }
    (total / drops.max(1) as f64, drops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{GridConfig, PathProfile};
    use crate::dataset::{prepare, synthesize};
    use crate::pilot::PilotConfig;

    fn tiny_scenario() -> Scenario {
        Scenario {
            grid: GridConfig {
                n_tx: 4,
                n_rx: 2,
                n_c: 8,
                delta_f: 60e3,
                delta_t: 2.5e-3,
                srs_interval: 2,
                f_c: 12e9,
                spacing: 0.5,
            },
            pilot: PilotConfig {
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
            },
            profile: PathProfile {
                p_min: 2,
                p_max: 4,
                delay_spread_s: 100e-9,
                max_delay_s: 400e-9,
                ue_speed_mps: 10.0,
                f_c_hz: 12e9,
            },
            dl_snr_db: 10.0,
            ul_snr_db: 10.0,
            kappa: Some(2.0),
        }
    }

    fn tiny_model(sc: &Scenario) -> (Hascan, ModelParams) {
        let mut cfg = HascanConfig::desk(sc.grid.clone(), sc.pilot.clone());
        cfg.n_bit = 16;
        cfg.m_codeword = 8;
        cfg.n_heads = 2;
        cfg.d_f_tmcfn = 8;
        cfg.n_sa = 1;
        cfg.d_f = 8;
        cfg.n_ma = 1;
        cfg.n_h = 4;
        let mut init = ParamInit::new(1);
        let mut params = ModelParams::new();
        let model = Hascan::new(cfg, &mut params, &mut init);
        (model, params)
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Hascan,
            Method::HascanU,
            Method::HascanD,
            Method::Lce,
            Method::MmseType2,
        ] {
            assert_eq!(Method::parse(m.as_str()), Some(m));
        }
        assert_eq!(Method::parse("nope"), None);
    }

    #[test]
    fn every_method_produces_full_grids() {
        let sc = tiny_scenario();
        let (model, params) = tiny_model(&sc);
        let samples: Vec<_> = (0..4)
            .map(|s| prepare(&synthesize(&sc, s).unwrap(), &sc).unwrap())
            .collect();
        let want = sc.pilot.n_tr * sc.pilot.l_subbands * sc.pilot.n_comb();
        for m in [
            Method::Hascan,
            Method::HascanU,
            Method::HascanD,
            Method::Lce,
            Method::MmseType2,
        ] {
            let ev = evaluate(m, &model, &params, &sc, &samples);
            assert_eq!(ev.est.len(), samples.len());
            for e in &ev.est {
                assert_eq!(e.len(), want);
                for g in e {
                    assert_eq!((g.rows, g.cols), (sc.grid.n_tx, sc.grid.n_rx));
                }
            }
            assert!(ev.nmse_db.is_finite(), "{m:?}");
        }
    }

    #[test]
    fn bit_budget_swap_preserves_parameters() {
        let sc = tiny_scenario();
        let (model, params) = tiny_model(&sc);
        let coarse = with_bit_budget(&model.cfg, 8);
        let sample = prepare(&synthesize(&sc, 3).unwrap(), &sc).unwrap();
        // both models accept the same registry; the coarser budget changes
        // the prediction (quantization error), the identical budget does not
        let a = model.predict(&params, &sample.dl, &sample.ul, false, false);
        let same = with_bit_budget(&model.cfg, model.cfg.n_bit)
            .predict(&params, &sample.dl, &sample.ul, false, false);
        for (x, y) in a.iter().zip(&same) {
            assert_eq!(x.data, y.data);
        }
        let b = coarse.predict(&params, &sample.dl, &sample.ul, false, false);
        assert!(a.iter().zip(&b).any(|(x, y)| x.data != y.data));
    }

    #[test]
    fn se_drop_grouping_counts() {
        let sc = tiny_scenario();
        let (model, params) = tiny_model(&sc);
        let samples: Vec<_> = (0..6)
            .map(|s| prepare(&synthesize(&sc, s).unwrap(), &sc).unwrap())
            .collect();
        let ev = evaluate(Method::Lce, &model, &params, &sc, &samples);
        let truth: Vec<Vec<CMat>> = samples.iter().map(|s| s.truth.clone()).collect();
        let (se, drops) = mean_se_over_drops(&ev.est, &truth, 2, 3, 10.0);
        assert_eq!(drops, 3 * 3); // 3 groups of 2 UEs x 3 positions
        assert!(se.is_finite() && se > 0.0);
    }
}
