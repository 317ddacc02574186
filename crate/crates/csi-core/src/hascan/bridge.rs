//! Shape matching between the feedback and sounding geometries: frequency
//! duplication per RB, nearest-slot time assignment, and the port-to-antenna
//! lift through the known beam map.

use num_complex::Complex64;

use super::{HascanConfig, HascanError};
use crate::estimators::UlFeature;
use crate::linalg::{dft_matrix, CMat};
use crate::pilot::build_spatial_filter;
use crate::tensor::{Tape, Tensor, Var};

/// Port-to-antenna lift policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lift {
    /// Adjoint of the slot's beam map, evaluated at within-RB offset 0.
    BeamAdjoint,
    /// Ports copied into the leading Tx slots, zero elsewhere.
    ZeroFill,
}

/// Realified left-multiplication of a complex matrix: acts on real packs
/// whose rows stack (real block; imaginary block).
pub fn realify_left(a: &CMat) -> Tensor {
    let (m, n) = (a.rows, a.cols);
    let mut data = vec![0.0; 4 * m * n];
    for i in 0..m {
        for j in 0..n {
            let z = a[(i, j)];
            data[i * 2 * n + j] = z.re;
            data[i * 2 * n + n + j] = -z.im;
            data[(m + i) * 2 * n + j] = z.im;
            data[(m + i) * 2 * n + n + j] = z.re;
        }
    }
    Tensor::matrix(2 * m, 2 * n, data)
}

/// Sign-swap constant for complex right-multiplication: maps a real pack
/// [re; im] to [-im; re].
pub fn rowswap_neg(half_rows: usize) -> Tensor {
    let n = 2 * half_rows;
    let mut data = vec![0.0; n * n];
    for i in 0..half_rows {
        data[i * n + half_rows + i] = -1.0;
        data[(half_rows + i) * n + i] = 1.0;
    }
    Tensor::matrix(n, n, data)
}

/// Right-multiply a real pack `x` (rows = [re; im]) by the complex matrix
/// `b`, using `x*Re(b) + rowswap(x)*Im(b)`.
pub fn complex_right_mul(tape: &Tape, x: Var, b: &CMat, swap: Var) -> Var {
    let re = Tensor::matrix(b.rows, b.cols, b.data.iter().map(|z| z.re).collect());
    let im = Tensor::matrix(b.rows, b.cols, b.data.iter().map(|z| z.im).collect());
    let lhs = tape.matmul(x, tape.leaf(re));
    let rhs = tape.matmul(tape.matmul(swap, x), tape.leaf(im));
    tape.add(lhs, rhs)
}

/// The precomputed bridge: per-(k,l,n) slot/RB assignment and the per-slot
/// linear map from the sparse-domain pack to lifted `[rb x (tx, rx)]` rows.
pub struct ShapeMatchMap {
    pub lift: Lift,
    n_dt: usize,
    n_d: usize,
    n_tx: usize,
    n_rx: usize,
    n_kln: usize,
    /// (slot index, rb) per (k, l, n) row.
    pub assignment: Vec<(usize, usize)>,
    /// Per slot: the N_Tx x M_c adjoint beam block at within-RB offset 0.
    pub e_mats: Vec<CMat>,
    /// Row transform (inverse delay DFT), realified [2N_d x 2N_d].
    row_op: Tensor,
    /// Per-slot column transform [(a, r) x (tx, rx)] complex.
    col_ops: Vec<CMat>,
}

impl ShapeMatchMap {
    pub fn new(cfg: &HascanConfig) -> Self {
        Self::with_lift(cfg, Lift::BeamAdjoint).expect("desk config divisibility")
    }

    pub fn with_lift(cfg: &HascanConfig, lift: Lift) -> Result<Self, HascanError> {
        let p = &cfg.pilot;
        let dup = p.m_sc / p.n_tc;
        if p.m_sc % p.n_tc != 0 || p.n_rb * dup != p.l_subbands * p.n_comb() {
            return Err(HascanError::Config(format!(
                "frequency duplication mismatch: n_rb*{dup} != L*N = {}",
                p.l_subbands * p.n_comb()
            )));
        }
        let n = p.n_comb();
        let mut assignment = Vec::with_capacity(cfg.n_kln());
        for k in 0..p.k_soundings {
            for l in 0..p.l_subbands {
                let t_srs = p.srs_slot(&cfg.grid, k, l) as i64;
                let slot = (0..p.n_dt)
                    .min_by_key(|&s| (p.csirs_slot(s) as i64 - t_srs).abs())
                    .unwrap();
                for nn in 0..n {
                    let rb = p.comb_subcarrier(l, nn) / p.m_sc;
                    assignment.push((slot, rb));
                }
            }
        }
        let mut e_mats = Vec::with_capacity(p.n_dt);
        for s in 0..p.n_dt {
            let e = match lift {
                Lift::BeamAdjoint => {
                    let f = build_spatial_filter(p, &cfg.grid, s)
                        .map_err(|e| HascanError::Config(e.to_string()))?;
                    let fh = f.f.adjoint();
                    // rows (j, a); keep the j = 0 block
                    let mut e = CMat::zeros(cfg.grid.n_tx, p.m_c);
                    for a in 0..cfg.grid.n_tx {
                        for i in 0..p.m_c {
                            e[(a, i)] = fh[(a, i)];
                        }
                    }
                    e
                }
                Lift::ZeroFill => {
                    let mut e = CMat::zeros(cfg.grid.n_tx, p.m_c);
                    for i in 0..p.m_c.min(cfg.grid.n_tx) {
                        e[(i, i)] = Complex64::new(1.0, 0.0);
                    }
                    e
                }
            };
            e_mats.push(e);
        }
        // column transform per slot: (a, r) -> (tx, rx) via
        // (E_s F_mc^H)[tx, a] * F_nrx^H[rx, r]
        let fmc_h = dft_matrix(p.m_c).adjoint();
        let frx_h = dft_matrix(cfg.grid.n_rx).adjoint();
        let col_ops = e_mats
            .iter()
            .map(|e| {
                let ef = e.mul(&fmc_h);
                let mut b = CMat::zeros(p.m_c * cfg.grid.n_rx, cfg.grid.n_tx * cfg.grid.n_rx);
                for a in 0..p.m_c {
                    for r in 0..cfg.grid.n_rx {
                        for tx in 0..cfg.grid.n_tx {
                            for rx in 0..cfg.grid.n_rx {
                                b[(a * cfg.grid.n_rx + r, tx * cfg.grid.n_rx + rx)] =
                                    ef[(tx, a)] * frx_h[(rx, r)];
                            }
                        }
                    }
                }
                b
            })
            .collect();
        Ok(ShapeMatchMap {
            lift,
            n_dt: p.n_dt,
            n_d: cfg.n_d(),
            n_tx: cfg.grid.n_tx,
            n_rx: cfg.grid.n_rx,
            n_kln: cfg.n_kln(),
            assignment,
            e_mats,
            row_op: realify_left(&dft_matrix(p.n_rb).adjoint()),
            col_ops,
        })
    }

    /// On-tape lift of per-slot sparse-domain packs `[2N_d x d_h]` to the
    /// fused DL rows `[K*L*N x 2*N_Tx*N_Rx]`.
    pub fn lift_on_tape(&self, tape: &Tape, fb_sparse: &[Var]) -> Var {
        assert_eq!(fb_sparse.len(), self.n_dt);
        let row_op = tape.leaf(self.row_op.clone());
        let swap = tape.leaf(rowswap_neg(self.n_d));
        let lifted: Vec<Var> = (0..self.n_dt)
            .map(|s| {
                // rows (c, rb), cols (tx, rx)
                let rb_domain = tape.matmul(row_op, fb_sparse[s]);
                complex_right_mul(tape, rb_domain, &self.col_ops[s], swap)
            })
            .collect();
        let mut cat = lifted[0];
        for &v in &lifted[1..] {
            cat = tape.concat_rows(cat, v);
        }
        // cat: [n_dt * 2 n_d x n_tx*n_rx]; pick (slot, c, rb) rows per (k,l,n)
        let width = self.n_tx * self.n_rx;
        let mut idx = Vec::with_capacity(self.n_kln * 2 * width);
        for &(slot, rb) in &self.assignment {
            for c in 0..2 {
                let src_row = slot * 2 * self.n_d + c * self.n_d + rb;
                for w in 0..width {
                    idx.push(src_row * width + w);
                }
            }
        }
        tape.gather(cat, idx, &[self.n_kln, 2 * width])
    }
}

/// Plain complex-domain shape matching of port-domain feedback slots
/// `[N_RB*M_c x N_Rx]` into per-(k,l,n) lifted `[N_Tx x N_Rx]` matrices.
pub fn shape_match(
    map: &ShapeMatchMap,
    cfg: &HascanConfig,
    fb_slots: &[CMat],
) -> Vec<CMat> {
    let p = &cfg.pilot;
    assert_eq!(fb_slots.len(), p.n_dt);
    map.assignment
        .iter()
        .map(|&(slot, rb)| {
            let mut port = CMat::zeros(p.m_c, cfg.grid.n_rx);
            for i in 0..p.m_c {
                for r in 0..cfg.grid.n_rx {
                    port[(i, r)] = fb_slots[slot][(rb * p.m_c + i, r)];
                }
            }
            map.e_mats[slot].mul(&port)
        })
        .collect()
}

/// Fused-row real pack of per-(k,l,n) complex matrices `[N_Tx x cols]`.
pub fn mats_to_rows(mats: &[CMat]) -> Tensor {
    let (n_tx, cols) = (mats[0].rows, mats[0].cols);
    let width = n_tx * cols;
    let mut data = Vec::with_capacity(mats.len() * 2 * width);
    for m in mats {
        for c in 0..2 {
            for tx in 0..n_tx {
                for j in 0..cols {
                    let z = m[(tx, j)];
                    data.push(if c == 0 { z.re } else { z.im });
                }
            }
        }
    }
    Tensor::matrix(mats.len(), 2 * width, data)
}

/// Inverse of [`mats_to_rows`].
pub fn rows_to_mats(rows: &Tensor, n_tx: usize, cols: usize) -> Vec<CMat> {
    let (n_rows, width2) = rows.dims2();
    assert_eq!(width2, 2 * n_tx * cols);
    let width = n_tx * cols;
    (0..n_rows)
        .map(|i| {
            let base = i * width2;
            let data = (0..width)
                .map(|w| Complex64::new(rows.data()[base + w], rows.data()[base + width + w]))
                .collect();
            CMat::from_vec(n_tx, cols, data)
        })
        .collect()
}

/// Constant UL feature rows `[K*L*N x 2*N_Tx*M_s]` from the sounding blocks.
pub fn ul_feature_rows(ul: &UlFeature, cfg: &HascanConfig) -> Tensor {
    let mats: Vec<CMat> = (0..ul.k_soundings)
        .flat_map(|k| {
            (0..ul.l_subbands)
                .flat_map(move |l| (0..ul.n_comb).map(move |n| (k, l, n)))
                .collect::<Vec<_>>()
        })
        .map(|(k, l, n)| ul.at(k, l, n))
        .collect();
    assert_eq!(mats.len(), cfg.n_kln());
    mats_to_rows(&mats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::GridConfig;
    use crate::nn::ModelParams;
    use crate::pilot::PilotConfig;
    use crate::tensor::ParamInit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn desk_cfg() -> HascanConfig {
        let grid = GridConfig {
            n_tx: 16,
            n_rx: 2,
            n_c: 96,
            delta_f: 60e3,
            delta_t: 2.5e-3,
            srs_interval: 2,
            f_c: 12e9,
            spacing: 0.5,
        };
        let pilot = PilotConfig {
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
        };
        HascanConfig::desk(grid, pilot)
    }

    fn random_slots(cfg: &HascanConfig, seed: u64) -> Vec<CMat> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..cfg.pilot.n_dt)
            .map(|_| {
                let rows = cfg.pilot.n_rb * cfg.pilot.m_c;
                CMat::from_vec(
                    rows,
                    cfg.grid.n_rx,
                    (0..rows * cfg.grid.n_rx)
                        .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn frequency_duplication_counts() {
        let cfg = desk_cfg();
        let map = ShapeMatchMap::new(&cfg);
        // every RB appears m_sc/n_tc = 6 times per sounding
        let dup = cfg.pilot.m_sc / cfg.pilot.n_tc;
        for k in 0..cfg.pilot.k_soundings {
            for l in 0..cfg.pilot.l_subbands {
                let base = (k * cfg.pilot.l_subbands + l) * cfg.pilot.n_comb();
                let mut counts = vec![0usize; cfg.pilot.n_rb];
                for n in 0..cfg.pilot.n_comb() {
                    counts[map.assignment[base + n].1] += 1;
                }
                for (rb, &c) in counts.iter().enumerate() {
                    assert!(c == 0 || c == dup, "rb {rb} duplicated {c} times");
                }
                assert_eq!(counts.iter().sum::<usize>(), cfg.pilot.n_comb());
            }
        }
        // index-map audit: each output row originates from exactly one
        // (slot, rb) input block
        assert_eq!(map.assignment.len(), cfg.n_kln());
    }

    #[test]
    fn hand_enumeration_small_config() {
        // N_RB=2, M_sc=4, N_tc=2, L=2 => N = n_c/(L n_tc) = 2
        let grid = GridConfig {
            n_tx: 4,
            n_rx: 2,
            n_c: 8,
            delta_f: 60e3,
            delta_t: 2.5e-3,
            srs_interval: 2,
            f_c: 12e9,
            spacing: 0.5,
        };
        let pilot = PilotConfig {
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
        };
        let mut cfg = HascanConfig::desk(grid, pilot);
        cfg.n_heads = 1;
        let map = ShapeMatchMap::new(&cfg);
        // comb subcarriers: (l,n) -> (l*2+n)*2 in 0..8; rb = sc/4
        // (0,0)->sc0 rb0; (0,1)->sc2 rb0; (1,0)->sc4 rb1; (1,1)->sc6 rb1
        // srs slots: (k,l) -> 2(2k+l) = 0,2,4,6 matching csi-rs slots 0..3
        let want = [
            (0, 0),
            (0, 0),
            (1, 1),
            (1, 1),
            (2, 0),
            (2, 0),
            (3, 1),
            (3, 1),
        ];
        assert_eq!(map.assignment, want);
    }

    #[test]
    fn zero_fill_lift_preserves_port_values() {
        let cfg = desk_cfg();
        let map = ShapeMatchMap::with_lift(&cfg, Lift::ZeroFill).unwrap();
        let slots = random_slots(&cfg, 3);
        let mats = shape_match(&map, &cfg, &slots);
        for (row, &(slot, rb)) in map.assignment.iter().enumerate() {
            for i in 0..cfg.pilot.m_c {
                for r in 0..cfg.grid.n_rx {
                    let want = slots[slot][(rb * cfg.pilot.m_c + i, r)];
                    assert_eq!(mats[row][(i, r)], want);
                }
            }
            // zero elsewhere
            for tx in cfg.pilot.m_c..cfg.grid.n_tx {
                for r in 0..cfg.grid.n_rx {
                    assert_eq!(mats[row][(tx, r)], Complex64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn beam_adjoint_lift_recovers_in_beam_channel() {
        // if the true per-RB channel lies in the slot's beam subspace at
        // offset 0, lifting the ports G = F_s H recovers the (0, tx) block
        let cfg = desk_cfg();
        let map = ShapeMatchMap::new(&cfg);
        let s = 1usize;
        let f = build_spatial_filter(&cfg.pilot, &cfg.grid, s).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        // channel = F_s^H coeff, coeff random
        let coeff = CMat::from_vec(
            cfg.pilot.m_c,
            cfg.grid.n_rx,
            (0..cfg.pilot.m_c * cfg.grid.n_rx)
                .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                .collect(),
        );
        let h = f.f.adjoint().mul(&coeff); // [m_sc*n_tx x n_rx]
        let ports = f.f.mul(&h); // = coeff by orthonormality
        let lifted = map.e_mats[s].mul(&ports);
        for tx in 0..cfg.grid.n_tx {
            for r in 0..cfg.grid.n_rx {
                let want = h[(tx, r)]; // j = 0 block of (j, a) rows
                assert!((lifted[(tx, r)] - want).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn on_tape_lift_matches_complex_reference() {
        let cfg = desk_cfg();
        let map = ShapeMatchMap::new(&cfg);
        let slots = random_slots(&cfg, 5);
        // reference: desparsified port slices -> shape_match -> rows
        let want = mats_to_rows(&shape_match(&map, &cfg, &slots));
        // on tape: sparse packs -> lift
        let tape = Tape::new();
        let packs: Vec<Var> = slots
            .iter()
            .map(|s| tape.leaf(super::super::tmcfn::slot_to_sparse_pack(s, &cfg)))
            .collect();
        let got = tape.value_cloned(map.lift_on_tape(&tape, &packs));
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn lift_backward_passes_grad_check() {
        let cfg = desk_cfg();
        let map = ShapeMatchMap::new(&cfg);
        let slots = random_slots(&cfg, 6);
        let packs: Vec<Tensor> = slots
            .iter()
            .map(|s| super::super::tmcfn::slot_to_sparse_pack(s, &cfg))
            .collect();
        let err = crate::tensor::grad_check(
            |tape, v| {
                let vars: Vec<Var> = packs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == 1 { v } else { tape.leaf(t.clone()) })
                    .collect();
                let rows = map.lift_on_tape(tape, &vars);
                tape.sum(tape.mul(rows, rows))
            },
            &packs[1],
            1e-5,
            Some(&[0, 5, 17, 100, 255]),
        )
        .unwrap();
        assert!(err < 1e-6, "grad err {err}");
    }

    #[test]
    fn rows_round_trip() {
        let cfg = desk_cfg();
        let map = ShapeMatchMap::new(&cfg);
        let slots = random_slots(&cfg, 8);
        let mats = shape_match(&map, &cfg, &slots);
        let rows = mats_to_rows(&mats);
        assert_eq!(rows.shape(), &[cfg.n_kln(), 2 * cfg.grid.n_tx * cfg.grid.n_rx]);
        let back = rows_to_mats(&rows, cfg.grid.n_tx, cfg.grid.n_rx);
        for (a, b) in back.iter().zip(&mats) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn divisibility_violation_is_config_error() {
        let mut cfg = desk_cfg();
        cfg.pilot.n_tc = 5; // m_sc = 12 not divisible
        assert!(ShapeMatchMap::with_lift(&cfg, Lift::BeamAdjoint).is_err());
    }
}
