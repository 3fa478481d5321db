//! Per-dimension sparsifying dictionaries.
//!
//! Dimension order is fixed everywhere: rx-x, rx-y, tx-x, tx-y, delay. A
//! support index is a 5-tuple of zero-based column indices in that order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{steering_unchecked, PulseShape, UraGeometry};
use crate::{Error, Result, C64};

/// A support index `(j1, .., j5)`.
pub type MultiIndex = [usize; 5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DictionaryConfig {
    /// Atoms per dimension divided by the dimension size.
    pub k_res: f64,
    pub d_taps: usize,
    pub sample_period_s: f64,
    pub rx_geom: UraGeometry,
    pub tx_geom: UraGeometry,
}

impl DictionaryConfig {
    /// `N_k^s` for each dimension.
    pub fn sizes(&self) -> [usize; 5] {
        [
            self.rx_geom.nx,
            self.rx_geom.ny,
            self.tx_geom.nx,
            self.tx_geom.ny,
            self.d_taps,
        ]
    }

    /// `N_k^a = round(K_res N_k^s)`.
    pub fn atom_counts(&self) -> [usize; 5] {
        self.sizes().map(|n| atom_count(self.k_res, n))
    }
}

pub fn atom_count(k_res: f64, n: usize) -> usize {
    ((k_res * n as f64).round() as usize).max(n)
}

/// Physical meaning of one support index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomParams {
    pub aoa_xy: [f64; 2],
    pub aod_xy: [f64; 2],
    /// Delay relative to the clock offset.
    pub delay_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySet {
    /// `Ψ_k`, `N_k^s x N_k^a`.
    pub psi: [DMatrix<C64>; 5],
    /// Grid values: direction components for k < 4, delay in seconds for k = 4.
    pub grids: [Vec<f64>; 5],
    pub sample_period_s: f64,
}

/// Uniform grid over `[-1, 1)`.
pub fn angular_grid(n_atoms: usize) -> Vec<f64> {
    (0..n_atoms)
        .map(|j| -1.0 + 2.0 * j as f64 / n_atoms as f64)
        .collect()
}

/// Delay grid over `[0, D)` in sample periods.
pub fn delay_grid_samples(d_taps: usize, n_atoms: usize) -> Vec<f64> {
    (0..n_atoms)
        .map(|j| (j * d_taps) as f64 / n_atoms as f64)
        .collect()
}

fn steering_dictionary(n: usize, spacing: f64, grid: &[f64], conjugate: bool) -> DMatrix<C64> {
    let mut psi = DMatrix::zeros(n, grid.len());
    for (j, &g) in grid.iter().enumerate() {
        for (k, v) in steering_unchecked(n, g, spacing).into_iter().enumerate() {
            psi[(k, j)] = if conjugate { v.conj() } else { v };
        }
    }
    psi
}

/// Sampled-pulse column for a delay of `tau_samples`.
pub fn delay_atom(pulse: &PulseShape, d_taps: usize, tau_samples: f64) -> Vec<C64> {
    (0..d_taps)
        .map(|d| C64::new(pulse.eval_truncated(d as f64 - tau_samples, d_taps as f64), 0.0))
        .collect()
}

pub fn build_dictionaries(cfg: &DictionaryConfig, pulse: &PulseShape) -> Result<DictionarySet> {
    if !(cfg.k_res.is_finite() && cfg.k_res >= 1.0) {
        return Err(Error::Config(format!("k_res must be >= 1, got {}", cfg.k_res)));
    }
    if cfg.d_taps == 0 {
        return Err(Error::Config("dictionary needs at least one delay tap".into()));
    }
    cfg.rx_geom.validate()?;
    cfg.tx_geom.validate()?;
    pulse.validate()?;
    let counts = cfg.atom_counts();
    let grids_ang: Vec<Vec<f64>> = counts[..4].iter().map(|&n| angular_grid(n)).collect();
    let tau_samples = delay_grid_samples(cfg.d_taps, counts[4]);
    let mut psi5 = DMatrix::zeros(cfg.d_taps, counts[4]);
    for (j, &t) in tau_samples.iter().enumerate() {
        for (d, v) in delay_atom(pulse, cfg.d_taps, t).into_iter().enumerate() {
            psi5[(d, j)] = v;
        }
    }
    let (rx, tx) = (&cfg.rx_geom, &cfg.tx_geom);
    let psi = [
        steering_dictionary(rx.nx, rx.spacing_wavelengths, &grids_ang[0], false),
        steering_dictionary(rx.ny, rx.spacing_wavelengths, &grids_ang[1], false),
        steering_dictionary(tx.nx, tx.spacing_wavelengths, &grids_ang[2], true),
        steering_dictionary(tx.ny, tx.spacing_wavelengths, &grids_ang[3], true),
        psi5,
    ];
    let ts = pulse.sample_period_s;
    let grids = [
        grids_ang[0].clone(),
        grids_ang[1].clone(),
        grids_ang[2].clone(),
        grids_ang[3].clone(),
        tau_samples.iter().map(|t| t * ts).collect(),
    ];
    Ok(DictionarySet {
        psi,
        grids,
        sample_period_s: ts,
    })
}

impl DictionarySet {
    pub fn atom_counts(&self) -> [usize; 5] {
        [0, 1, 2, 3, 4].map(|k| self.psi[k].ncols())
    }

    pub fn sizes(&self) -> [usize; 5] {
        [0, 1, 2, 3, 4].map(|k| self.psi[k].nrows())
    }

    /// `|J|`, the number of 5-way atoms.
    pub fn total_atoms(&self) -> u128 {
        self.atom_counts().iter().map(|&n| n as u128).product()
    }

    pub fn check_index(&self, j: &MultiIndex) -> Result<()> {
        let counts = self.atom_counts();
        if j.iter().zip(counts).any(|(&a, n)| a >= n) {
            return Err(Error::Index(format!("atom {j:?} outside grid {counts:?}")));
        }
        Ok(())
    }

    pub fn params(&self, j: &MultiIndex) -> Result<AtomParams> {
        self.check_index(j)?;
        Ok(AtomParams {
            aoa_xy: [self.grids[0][j[0]], self.grids[1][j[1]]],
            aod_xy: [self.grids[2][j[2]], self.grids[3][j[3]]],
            delay_s: self.grids[4][j[4]],
        })
    }

    /// Grid values and the five columns `Ψ_k[:, j_k]`.
    pub fn atom(&self, j: &MultiIndex) -> Result<(AtomParams, [Vec<C64>; 5])> {
        let params = self.params(j)?;
        let cols = [0, 1, 2, 3, 4].map(|k| self.psi[k].column(j[k]).iter().copied().collect());
        Ok((params, cols))
    }

    /// Index of the grid point of dimension `k` nearest to `value`.
    ///
    /// Angular grids wrap around (the steering phase is periodic in the component).
    pub fn nearest(&self, k: usize, value: f64) -> usize {
        let g = &self.grids[k];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, &v) in g.iter().enumerate() {
            let mut d = (v - value).abs();
            if k < 4 {
                d = d.min(2.0 - d);
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    /// Relabels atoms: new column `i` of dimension `k` is old column `perm[k][i]`.
    pub fn permuted(&self, perm: &[Vec<usize>; 5]) -> Result<Self> {
        let counts = self.atom_counts();
        for k in 0..5 {
            let mut seen = vec![false; counts[k]];
            if perm[k].len() != counts[k] {
                return Err(Error::Index(format!("permutation {k} has wrong length")));
            }
            for &p in &perm[k] {
                if p >= counts[k] || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::Index(format!("permutation {k} is not a bijection")));
                }
            }
        }
        let psi = [0, 1, 2, 3, 4].map(|k| self.psi[k].select_columns(perm[k].iter()));
        let grids = [0, 1, 2, 3, 4].map(|k| perm[k].iter().map(|&p| self.grids[k][p]).collect());
        Ok(Self {
            psi,
            grids,
            sample_period_s: self.sample_period_s,
        })
    }

    /// Grids as JSON, for debugging.
    pub fn grids_json(&self) -> Result<String> {
        let names = ["rx_x", "rx_y", "tx_x", "tx_y", "delay_s"];
        let map: serde_json::Map<String, serde_json::Value> = names
            .iter()
            .zip(&self.grids)
            .map(|(n, g)| (n.to_string(), serde_json::json!(g)))
            .collect();
        Ok(serde_json::to_string(&map)?)
    }
}

/// Channel tensor of a single atom with coefficient `c`:
/// `H_d[i1 N2 + i2, i3 N4 + i4] = c Ψ1[i1] Ψ2[i2] Ψ3[i3] Ψ4[i4] Ψ5[d]`.
pub fn atom_channel(set: &DictionarySet, j: &MultiIndex, c: C64) -> Result<crate::channel::ChannelTensor> {
    let (_, cols) = set.atom(j)?;
    let rx = crate::channel::kron(&cols[0], &cols[1]);
    let tx = crate::channel::kron(&cols[2], &cols[3]);
    let outer = &rx * tx.transpose();
    Ok(crate::channel::ChannelTensor {
        taps: cols[4].iter().map(|&p| &outer * (c * p)).collect(),
        sample_period_s: set.sample_period_s,
    })
}
