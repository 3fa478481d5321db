//! Greedy sparse recovery over the factored dictionaries.
//!
//! Three selection rules share one orthogonal matching pursuit loop:
//!
//! * `Exhaustive` MOMP forms every measured atom `q_j` from memoized
//!   per-dimension factors and scores it explicitly.
//! * `Alternating` MOMP scores a coarse lattice with one atom per DFT bin in
//!   every dimension, then refines one dimension at a time on the fine grid
//!   (delay, rx-x, rx-y, tx-x, tx-y), holding the other four fixed.
//! * The OMP baseline scores every column of the flattened dictionary.
//!
//! Per frame the measured atom is rank one: `q_j` restricted to frame `m` is
//! `u_m z_m^T` with `u_m = G_m (ψ1 ⊗ ψ2)` and
//! `z_m[q] = Σ_d ψ5[d] ((ψ3 ⊗ ψ4)^T B_m)[q + D − 1 − d]`.
//!
//! Ties in every argmax go to the lexicographically lowest multi-index.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{Path, UnitDirection};
use crate::dictionaries::{DictionarySet, MultiIndex};
use crate::training::{Observation, SensingTensor};
use crate::{Error, Result, C64};

/// Largest flattened dictionary the OMP baseline will score.
pub const OMP_MAX_ATOMS: u128 = 1 << 26;
/// Memory ceiling for the cached per-frame factor tables.
pub const TABLE_BUDGET_BYTES: u128 = 1 << 30;
/// New atoms whose component orthogonal to the support is below this
/// fraction of their norm count as dependent.
const DEPENDENCE_TOL: f64 = 1e-10;

/// Local searches per coordinate step.
const REFINE_STARTS: usize = 3;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    Alternating,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub n_paths_max: usize,
    pub refine_sweeps: usize,
    pub mode: SolveMode,
    pub residual_stop_ratio: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_paths_max: 10,
            refine_sweeps: 2,
            mode: SolveMode::Alternating,
            residual_stop_ratio: 0.01,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths_max == 0 || self.refine_sweeps == 0 {
            return Err(Error::Config("n_paths_max and refine_sweeps must be >= 1".into()));
        }
        if !(self.residual_stop_ratio >= 0.0) {
            return Err(Error::Config("residual_stop_ratio must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEstimate {
    pub support: Vec<MultiIndex>,
    pub coeffs: Vec<C64>,
    pub residual_energy: f64,
    /// The loop stopped because the next atom was dependent on the support.
    pub rank_deficient: bool,
}

#[derive(Serialize, Deserialize)]
struct CoeffRecord {
    re: f64,
    im: f64,
}

#[derive(Serialize, Deserialize)]
struct EstimateRecord {
    support: Vec<MultiIndex>,
    coeffs: Vec<CoeffRecord>,
    residual_energy: f64,
}

impl SparseEstimate {
    pub fn empty(residual_energy: f64) -> Self {
        Self {
            support: Vec::new(),
            coeffs: Vec::new(),
            residual_energy,
            rank_deficient: false,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = EstimateRecord {
            support: self.support.clone(),
            coeffs: self.coeffs.iter().map(|c| CoeffRecord { re: c.re, im: c.im }).collect(),
            residual_energy: self.residual_energy,
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: EstimateRecord = serde_json::from_str(s)?;
        if rec.support.len() != rec.coeffs.len() {
            return Err(Error::Shape("support and coeffs differ in length".into()));
        }
        Ok(Self {
            support: rec.support,
            coeffs: rec.coeffs.iter().map(|c| C64::new(c.re, c.im)).collect(),
            residual_energy: rec.residual_energy,
            rank_deficient: false,
        })
    }
}

fn check_dims(phi: &SensingTensor, set: &DictionarySet) -> Result<()> {
    let want = [phi.rx.nx, phi.rx.ny, phi.tx.nx, phi.tx.ny, phi.d_taps];
    if set.sizes() != want {
        return Err(Error::Shape(format!(
            "dictionary sizes {:?} do not match the sensing operator {want:?}",
            set.sizes()
        )));
    }
    Ok(())
}

fn check_obs(y: &Observation, phi: &SensingTensor) -> Result<()> {
    if y.m_frames != phi.n_frames() || y.m_rx != phi.m_rx || y.q != phi.q {
        return Err(Error::Shape(format!(
            "observation ({}, {}, {}) does not match the sensing operator ({}, {}, {})",
            y.m_frames,
            y.m_rx,
            y.q,
            phi.n_frames(),
            phi.m_rx,
            phi.q
        )));
    }
    if !y.is_finite() {
        return Err(Error::NonFiniteObservation);
    }
    Ok(())
}

fn kron(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect()
}

fn col(m: &DMatrix<C64>, j: usize) -> &[C64] {
    let n = m.nrows();
    &m.as_slice()[j * n..(j + 1) * n]
}

/// `g a`.
fn apply_rx(g: &DMatrix<C64>, a: &[C64]) -> Vec<C64> {
    let mut u = vec![ZERO; g.nrows()];
    for (i, &ai) in a.iter().enumerate() {
        for (ur, &gr) in u.iter_mut().zip(col(g, i)) {
            *ur += gr * ai;
        }
    }
    u
}

/// `t^T B`, one entry per pilot column.
fn project_tx(b: &DMatrix<C64>, t: &[C64]) -> Vec<C64> {
    (0..b.ncols())
        .map(|s| col(b, s).iter().zip(t).map(|(&x, &y)| x * y).sum())
        .collect()
}

/// `z[q] = Σ_d ψ5[d] b[q + D − 1 − d]` for `q < Q`.
fn convolve(psi5: &[C64], b: &[C64], q_len: usize) -> Vec<C64> {
    let d_taps = psi5.len();
    let mut z = vec![ZERO; q_len];
    for (d, &p) in psi5.iter().enumerate() {
        if p == ZERO {
            continue;
        }
        let s = &b[d_taps - 1 - d..d_taps - 1 - d + q_len];
        for (zq, &bq) in z.iter_mut().zip(s) {
            *zq += p * bq;
        }
    }
    z
}

fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

fn frame_slice(r: &Observation, m: usize) -> &[C64] {
    let n = r.m_rx * r.q;
    &r.y[m * n..(m + 1) * n]
}

/// Image of dictionary atom `j` in the whitened observation domain.
pub fn measured_atom(phi: &SensingTensor, set: &DictionarySet, j: &MultiIndex) -> Result<Vec<C64>> {
    check_dims(phi, set)?;
    set.check_index(j)?;
    let a = kron(col(&set.psi[0], j[0]), col(&set.psi[1], j[1]));
    let t = kron(col(&set.psi[2], j[2]), col(&set.psi[3], j[3]));
    let psi5 = col(&set.psi[4], j[4]);
    let mut out = Vec::with_capacity(phi.n_obs());
    for f in &phi.frames {
        let u = apply_rx(&f.g, &a);
        let z = convolve(psi5, &project_tx(&f.b, &t), phi.q);
        for &ur in &u {
            out.extend(z.iter().map(|&zq| ur * zq));
        }
    }
    Ok(out)
}

/// Candidate ordering: higher score, then lower multi-index.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    key: MultiIndex,
}

impl Candidate {
    fn better(self, other: Self) -> Self {
        if self.score > other.score || (self.score == other.score && self.key < other.key) {
            self
        } else {
            other
        }
    }
}

fn best_of(a: Option<Candidate>, b: Option<Candidate>) -> Option<Candidate> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.better(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

fn score(num: C64, nrm: f64) -> Option<f64> {
    let s = num.norm_sqr() / nrm;
    (nrm > 0.0 && s.is_finite()).then_some(s)
}

/// Per-frame factors `u_m` and `z_m` for a subset of dictionary columns.
struct FactorTables {
    cols: [Vec<usize>; 5],
    n12: usize,
    n345: usize,
    m_rx: usize,
    q: usize,
    n_frames: usize,
    /// `u[(m n12 + j12) M_R + r]`.
    u: Vec<C64>,
    /// `z[(m n345 + j345) Q + q]`.
    z: Vec<C64>,
    un: Vec<f64>,
    zn: Vec<f64>,
}

impl FactorTables {
    fn bytes(phi: &SensingTensor, n: [usize; 5]) -> u128 {
        let n12 = (n[0] * n[1]) as u128;
        let n345 = (n[2] * n[3] * n[4]) as u128;
        let m = phi.n_frames() as u128;
        m * (n12 * (phi.m_rx as u128 * 16 + 8) + n345 * (phi.q as u128 * 16 + 8))
    }

    fn build(phi: &SensingTensor, set: &DictionarySet, cols: [Vec<usize>; 5]) -> Result<Self> {
        let n = [0, 1, 2, 3, 4].map(|k| cols[k].len());
        let bytes = Self::bytes(phi, n);
        if bytes > TABLE_BUDGET_BYTES {
            return Err(Error::Capacity {
                atoms: n.iter().map(|&v| v as u128).product(),
                reason: format!("factor tables need {bytes} bytes"),
            });
        }
        let (n12, n345) = (n[0] * n[1], n[2] * n[3] * n[4]);
        let (m_rx, q) = (phi.m_rx, phi.q);
        let rx: Vec<Vec<C64>> = cols[0]
            .iter()
            .flat_map(|&j1| cols[1].iter().map(move |&j2| (j1, j2)))
            .map(|(j1, j2)| kron(col(&set.psi[0], j1), col(&set.psi[1], j2)))
            .collect();
        let tx: Vec<Vec<C64>> = cols[2]
            .iter()
            .flat_map(|&j3| cols[3].iter().map(move |&j4| (j3, j4)))
            .map(|(j3, j4)| kron(col(&set.psi[2], j3), col(&set.psi[3], j4)))
            .collect();
        let per_frame: Vec<(Vec<C64>, Vec<C64>)> = phi
            .frames
            .par_iter()
            .map(|f| {
                let mut u = Vec::with_capacity(n12 * m_rx);
                for a in &rx {
                    u.extend(apply_rx(&f.g, a));
                }
                let mut z = Vec::with_capacity(n345 * q);
                for t in &tx {
                    let b = project_tx(&f.b, t);
                    for &j5 in &cols[4] {
                        z.extend(convolve(col(&set.psi[4], j5), &b, q));
                    }
                }
                (u, z)
            })
            .collect();
        let mut u = Vec::with_capacity(per_frame.len() * n12 * m_rx);
        let mut z = Vec::with_capacity(per_frame.len() * n345 * q);
        for (fu, fz) in per_frame {
            u.extend(fu);
            z.extend(fz);
        }
        let un = u.chunks(m_rx).map(norm_sqr).collect();
        let zn = z.chunks(q).map(norm_sqr).collect();
        Ok(Self {
            cols,
            n12,
            n345,
            m_rx,
            q,
            n_frames: phi.n_frames(),
            u,
            z,
            un,
            zn,
        })
    }

    fn key(&self, j12: usize, j345: usize) -> MultiIndex {
        let n = [0, 1, 2, 3, 4].map(|k| self.cols[k].len());
        let (j1, j2) = (j12 / n[1], j12 % n[1]);
        let (j34, j5) = (j345 / n[4], j345 % n[4]);
        let (j3, j4) = (j34 / n[3], j34 % n[3]);
        [
            self.cols[0][j1],
            self.cols[1][j2],
            self.cols[2][j3],
            self.cols[3][j4],
            self.cols[4][j5],
        ]
    }

    fn u(&self, m: usize, j12: usize) -> &[C64] {
        let o = (m * self.n12 + j12) * self.m_rx;
        &self.u[o..o + self.m_rx]
    }

    fn z(&self, m: usize, j345: usize) -> &[C64] {
        let o = (m * self.n345 + j345) * self.q;
        &self.z[o..o + self.q]
    }

    /// Separable scoring: `⟨q_j, r⟩ = Σ_m u_m^H (R_m conj z_m)`.
    fn best_separable(&self, r: &Observation) -> Option<Candidate> {
        (0..self.n345)
            .into_par_iter()
            .map(|j345| {
                let mut num = vec![ZERO; self.n12];
                let mut nrm = vec![0.0; self.n12];
                let mut w = vec![ZERO; self.m_rx];
                for m in 0..self.n_frames {
                    let z = self.z(m, j345);
                    let rm = frame_slice(r, m);
                    for (row, wr) in rm.chunks(self.q).zip(w.iter_mut()) {
                        *wr = row.iter().zip(z).map(|(&x, &y)| x * y.conj()).sum();
                    }
                    let zn = self.zn[m * self.n345 + j345];
                    for j12 in 0..self.n12 {
                        let u = self.u(m, j12);
                        num[j12] += u.iter().zip(&w).map(|(a, &b)| a.conj() * b).sum::<C64>();
                        nrm[j12] += self.un[m * self.n12 + j12] * zn;
                    }
                }
                let mut best: Option<Candidate> = None;
                for j12 in 0..self.n12 {
                    if let Some(s) = score(num[j12], nrm[j12]) {
                        best = best_of(best, Some(Candidate { score: s, key: self.key(j12, j345) }));
                    }
                }
                best
            })
            .reduce(|| None, best_of)
    }

    /// Explicit scoring: every `q_j` is materialized and correlated with `r`.
    fn best_explicit(&self, r: &Observation) -> Option<Candidate> {
        let n_obs = self.n_frames * self.m_rx * self.q;
        (0..self.n345)
            .into_par_iter()
            .map(|j345| {
                let mut qj = vec![ZERO; n_obs];
                let mut best: Option<Candidate> = None;
                for j12 in 0..self.n12 {
                    for m in 0..self.n_frames {
                        let z = self.z(m, j345);
                        let base = m * self.m_rx * self.q;
                        for (rr, &ur) in self.u(m, j12).iter().enumerate() {
                            let o = base + rr * self.q;
                            for (dst, &zq) in qj[o..o + self.q].iter_mut().zip(z) {
                                *dst = ur * zq;
                            }
                        }
                    }
                    let num: C64 = qj.iter().zip(&r.y).map(|(a, &b)| a.conj() * b).sum();
                    if let Some(s) = score(num, norm_sqr(&qj)) {
                        best = best_of(best, Some(Candidate { score: s, key: self.key(j12, j345) }));
                    }
                }
                best
            })
            .reduce(|| None, best_of)
    }
}

/// Incremental QR of the selected measured atoms (modified Gram-Schmidt with
/// one re-orthogonalization pass).
struct Basis {
    q: Vec<Vec<C64>>,
    r: Vec<Vec<C64>>,
    proj: Vec<C64>,
    residual: Vec<C64>,
}

impl Basis {
    fn new(y: &[C64]) -> Self {
        Self {
            q: Vec::new(),
            r: Vec::new(),
            proj: Vec::new(),
            residual: y.to_vec(),
        }
    }

    fn dot(a: &[C64], b: &[C64]) -> C64 {
        a.iter().zip(b).map(|(x, &y)| x.conj() * y).sum()
    }

    /// Adds `a` to the basis; `false` if it is numerically dependent.
    fn push(&mut self, a: Vec<C64>) -> bool {
        let a_norm = norm_sqr(&a).sqrt();
        if a_norm == 0.0 || !a_norm.is_finite() {
            return false;
        }
        let mut v = a;
        let mut rcol = vec![ZERO; self.q.len() + 1];
        for _ in 0..2 {
            for (k, qk) in self.q.iter().enumerate() {
                let c = Self::dot(qk, &v);
                for (vi, &qi) in v.iter_mut().zip(qk) {
                    *vi -= c * qi;
                }
                rcol[k] += c;
            }
        }
        let nv = norm_sqr(&v).sqrt();
        if nv < DEPENDENCE_TOL * a_norm {
            return false;
        }
        for vi in v.iter_mut() {
            *vi /= nv;
        }
        rcol[self.q.len()] = C64::new(nv, 0.0);
        let p = Self::dot(&v, &self.residual);
        for (ri, &vi) in self.residual.iter_mut().zip(&v) {
            *ri -= p * vi;
        }
        self.q.push(v);
        self.r.push(rcol);
        self.proj.push(p);
        true
    }

    /// Solves `R x = Q^H y` by back substitution.
    fn coeffs(&self) -> Vec<C64> {
        let n = self.q.len();
        let mut x = vec![ZERO; n];
        for i in (0..n).rev() {
            let mut s = self.proj[i];
            for (k, xk) in x.iter().enumerate().skip(i + 1) {
                s -= self.r[k][i] * xk;
            }
            x[i] = s / self.r[i][i];
        }
        x
    }
}

/// Shared greedy loop; `select` proposes the next atom for a residual.
fn greedy<F>(y: &Observation, phi: &SensingTensor, set: &DictionarySet, cfg: &SolverConfig, mut select: F) -> Result<SparseEstimate>
where
    F: FnMut(&Observation) -> Result<Option<MultiIndex>>,
{
    let y_energy = y.energy();
    let mut est = SparseEstimate::empty(y_energy);
    if y_energy == 0.0 {
        return Ok(est);
    }
    let mut basis = Basis::new(&y.y);
    let mut residual = y.clone();
    while est.support.len() < cfg.n_paths_max && est.residual_energy >= cfg.residual_stop_ratio * y_energy {
        let Some(j) = select(&residual)? else { break };
        if est.support.contains(&j) {
            est.rank_deficient = true;
            break;
        }
        if !basis.push(measured_atom(phi, set, &j)?) {
            est.rank_deficient = true;
            break;
        }
        est.support.push(j);
        residual.y.clone_from(&basis.residual);
        est.residual_energy = residual.energy();
    }
    est.coeffs = basis.coeffs();
    Ok(est)
}

fn all_columns(set: &DictionarySet) -> [Vec<usize>; 5] {
    set.atom_counts().map(|n| (0..n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    Exhaustive,
    Alternating,
    Flattened,
}

/// A solver with its per-frame factor tables cached.
///
/// The tables depend only on the sensing operator and the dictionaries, so one
/// prepared solver can serve many observations.
pub struct PreparedSolver<'a> {
    phi: &'a SensingTensor,
    set: &'a DictionarySet,
    cfg: SolverConfig,
    rule: Rule,
    tables: FactorTables,
}

impl<'a> PreparedSolver<'a> {
    /// MOMP in the mode given by `cfg.mode`.
    pub fn momp(phi: &'a SensingTensor, set: &'a DictionarySet, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        check_dims(phi, set)?;
        let (rule, cols) = match cfg.mode {
            SolveMode::Exhaustive => (Rule::Exhaustive, all_columns(set)),
            SolveMode::Alternating => (Rule::Alternating, coarse_lattice(set)),
        };
        Ok(Self {
            phi,
            set,
            cfg: *cfg,
            rule,
            tables: FactorTables::build(phi, set, cols)?,
        })
    }

    /// OMP over the flattened dictionary; `cfg.mode` is ignored.
    pub fn omp(phi: &'a SensingTensor, set: &'a DictionarySet, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        check_dims(phi, set)?;
        let total = set.total_atoms();
        if total > OMP_MAX_ATOMS {
            return Err(Error::Capacity {
                atoms: total,
                reason: format!("flattened dictionary exceeds {OMP_MAX_ATOMS} atoms"),
            });
        }
        Ok(Self {
            phi,
            set,
            cfg: *cfg,
            rule: Rule::Flattened,
            tables: FactorTables::build(phi, set, all_columns(set))?,
        })
    }

    pub fn solve(&self, y: &Observation) -> Result<SparseEstimate> {
        check_obs(y, self.phi)?;
        let (phi, set, cfg) = (self.phi, self.set, &self.cfg);
        match self.rule {
            Rule::Exhaustive => greedy(y, phi, set, cfg, |r| Ok(self.tables.best_explicit(r).map(|c| c.key))),
            Rule::Flattened => greedy(y, phi, set, cfg, |r| Ok(self.tables.best_separable(r).map(|c| c.key))),
            Rule::Alternating => {
                let refiner = Refiner { phi, set };
                greedy(y, phi, set, cfg, |r| {
                    let Some(start) = self.tables.best_separable(r) else {
                        return Ok(None);
                    };
                    let mut j = start.key;
                    refiner.refine(r, &mut j, cfg.refine_sweeps);
                    Ok(Some(j))
                })
            }
        }
    }
}

/// Multidimensional orthogonal matching pursuit.
pub fn momp_solve(y: &Observation, phi: &SensingTensor, set: &DictionarySet, cfg: &SolverConfig) -> Result<SparseEstimate> {
    check_obs(y, phi)?;
    PreparedSolver::momp(phi, set, cfg)?.solve(y)
}

/// Kronecker-flattened OMP baseline.
pub fn omp_solve(y: &Observation, phi: &SensingTensor, set: &DictionarySet, cfg: &SolverConfig) -> Result<SparseEstimate> {
    PreparedSolver::omp(phi, set, cfg)?.solve(y)
}

/// One fine-grid column per unit-resolution grid point, in every dimension.
fn coarse_lattice(set: &DictionarySet) -> [Vec<usize>; 5] {
    let n_a = set.atom_counts();
    let n_s = set.sizes();
    [0, 1, 2, 3, 4].map(|k| {
        let mut v: Vec<usize> = (0..n_s[k]).map(|c| lattice_point(c, n_s[k], n_a[k])).collect();
        v.dedup();
        v
    })
}

fn lattice_point(c: usize, n_s: usize, n_a: usize) -> usize {
    ((c * n_a) as f64 / n_s as f64).round() as usize % n_a
}

/// Coordinate-wise maximization of `|ψ_k^H c_k|² / ψ_k^H G_k ψ_k` on the fine grid.
struct Refiner<'a> {
    phi: &'a SensingTensor,
    set: &'a DictionarySet,
}

impl Refiner<'_> {
    fn refine(&self, r: &Observation, j: &mut MultiIndex, sweeps: usize) {
        for _ in 0..sweeps {
            for k in [4, 0, 1, 2, 3] {
                let (c, g) = self.linear_form(r, j, k);
                let mut best: Option<Candidate> = None;
                for start in self.starts(k, j[k], &c, &g) {
                    let (jk, score) = self.climb(k, start, &c, &g);
                    best = best_of(best, Some(Candidate { score, key: [jk, 0, 0, 0, 0] }));
                }
                if let Some(b) = best {
                    j[k] = b.key[0];
                }
            }
        }
    }

    fn score(&self, k: usize, jk: usize, c: &[C64], g: &DMatrix<C64>) -> f64 {
        let psi = col(&self.set.psi[k], jk);
        let num: C64 = psi.iter().zip(c).map(|(p, &ci)| p.conj() * ci).sum();
        let mut den = ZERO;
        for (b, &pb) in psi.iter().enumerate() {
            let gb = col(g, b);
            let s: C64 = psi.iter().zip(gb).map(|(pa, &x)| pa.conj() * x).sum();
            den += s * pb;
        }
        score(num, den.re).unwrap_or(f64::NEG_INFINITY)
    }

    /// Starting points for dimension `k`: the best few of the current index
    /// and the unit-resolution lattice.
    fn starts(&self, k: usize, cur: usize, c: &[C64], g: &DMatrix<C64>) -> Vec<usize> {
        let n_a = self.set.psi[k].ncols();
        let n_s = self.set.psi[k].nrows();
        let mut cands: Vec<Candidate> = std::iter::once(cur)
            .chain((0..n_s).map(|i| lattice_point(i, n_s, n_a)))
            .map(|jk| Candidate {
                score: self.score(k, jk, c, g),
                key: [jk, 0, 0, 0, 0],
            })
            .collect();
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.key.cmp(&b.key)));
        let mut out: Vec<usize> = Vec::with_capacity(REFINE_STARTS);
        for cand in cands {
            if !out.contains(&cand.key[0]) {
                out.push(cand.key[0]);
            }
            if out.len() == REFINE_STARTS {
                break;
            }
        }
        out
    }

    /// Pattern search starting half a coarse bin wide, halving on failure.
    fn climb(&self, k: usize, start: usize, c: &[C64], g: &DMatrix<C64>) -> (usize, f64) {
        let n_a = self.set.psi[k].ncols();
        let n_s = self.set.psi[k].nrows();
        let circular = k < 4;
        let mut step = ((n_a as f64 / n_s as f64 / 2.0).round() as usize).max(1);
        let mut cur = start;
        let mut cur_score = self.score(k, cur, c, g);
        while step >= 1 {
            let mut cands = Vec::with_capacity(2);
            if circular {
                cands.push((cur + n_a - step % n_a) % n_a);
                cands.push((cur + step) % n_a);
            } else {
                if cur >= step {
                    cands.push(cur - step);
                }
                if cur + step < n_a {
                    cands.push(cur + step);
                }
            }
            cands.sort_unstable();
            let mut moved = false;
            for cand in cands {
                let s = self.score(k, cand, c, g);
                if s > cur_score {
                    cur_score = s;
                    cur = cand;
                    moved = true;
                }
            }
            if !moved {
                step /= 2;
            }
        }
        (cur, cur_score)
    }

    /// `c_k = T_k^H r` and `G_k = T_k^H T_k`, where `T_k ψ_k` is the measured
    /// atom with every dimension but `k` fixed at `j`.
    fn linear_form(&self, r: &Observation, j: &MultiIndex, k: usize) -> (Vec<C64>, DMatrix<C64>) {
        let set = self.set;
        let phi = self.phi;
        let (q_len, d_taps) = (phi.q, phi.d_taps);
        let psi: [&[C64]; 5] = [0, 1, 2, 3, 4].map(|i| col(&set.psi[i], j[i]));
        let n = set.sizes()[k];
        let mut c = vec![ZERO; n];
        let mut g = DMatrix::zeros(n, n);
        match k {
            4 => {
                let a = kron(psi[0], psi[1]);
                let t = kron(psi[2], psi[3]);
                for (m, f) in phi.frames.iter().enumerate() {
                    let u = apply_rx(&f.g, &a);
                    let b = project_tx(&f.b, &t);
                    let v = left_combine(&u, frame_slice(r, m), q_len);
                    for (d, cd) in c.iter_mut().enumerate() {
                        let s = &b[d_taps - 1 - d..d_taps - 1 - d + q_len];
                        *cd += s.iter().zip(&v).map(|(x, &y)| x.conj() * y).sum::<C64>();
                    }
                    let kk = shifted_gram(&b, q_len, d_taps);
                    let un = norm_sqr(&u);
                    for d in 0..d_taps {
                        for e in 0..d_taps {
                            g[(d, e)] += kk[(d_taps - 1 - d, d_taps - 1 - e)] * un;
                        }
                    }
                }
            }
            0 | 1 => {
                let t = kron(psi[2], psi[3]);
                let (n1, n2) = (phi.rx.nx, phi.rx.ny);
                for (m, f) in phi.frames.iter().enumerate() {
                    let z = convolve(psi[4], &project_tx(&f.b, &t), q_len);
                    let zn = norm_sqr(&z);
                    let w: Vec<C64> = frame_slice(r, m)
                        .chunks(q_len)
                        .map(|row| row.iter().zip(&z).map(|(&x, y)| x * y.conj()).sum())
                        .collect();
                    // reduced combiner: M_R x n with the other rx dimension collapsed
                    let red = DMatrix::from_fn(phi.m_rx, n, |row, i| {
                        if k == 0 {
                            (0..n2).map(|i2| f.g[(row, i * n2 + i2)] * psi[1][i2]).sum()
                        } else {
                            (0..n1).map(|i1| f.g[(row, i1 * n2 + i)] * psi[0][i1]).sum()
                        }
                    });
                    for (i, ci) in c.iter_mut().enumerate() {
                        *ci += col(&red, i).iter().zip(&w).map(|(x, &y)| x.conj() * y).sum::<C64>();
                    }
                    g += red.adjoint() * &red * C64::new(zn, 0.0);
                }
            }
            _ => {
                let a = kron(psi[0], psi[1]);
                let (n3, n4) = (phi.tx.nx, phi.tx.ny);
                for (m, f) in phi.frames.iter().enumerate() {
                    let u = apply_rx(&f.g, &a);
                    let un = norm_sqr(&u);
                    let v = left_combine(&u, frame_slice(r, m), q_len);
                    let zs: Vec<Vec<C64>> = (0..n)
                        .map(|i| {
                            let e: Vec<C64> = (0..f.b.ncols())
                                .map(|s| {
                                    if k == 2 {
                                        (0..n4).map(|i4| f.b[(i * n4 + i4, s)] * psi[3][i4]).sum()
                                    } else {
                                        (0..n3).map(|i3| f.b[(i3 * n4 + i, s)] * psi[2][i3]).sum()
                                    }
                                })
                                .collect();
                            convolve(psi[4], &e, q_len)
                        })
                        .collect();
                    for (i, zi) in zs.iter().enumerate() {
                        c[i] += zi.iter().zip(&v).map(|(x, &y)| x.conj() * y).sum::<C64>();
                        for (e, ze) in zs.iter().enumerate() {
                            g[(i, e)] += zi.iter().zip(ze).map(|(x, &y)| x.conj() * y).sum::<C64>() * un;
                        }
                    }
                }
            }
        }
        (c, g)
    }
}

/// `v[q] = Σ_r conj(u[r]) R[r, q]`.
fn left_combine(u: &[C64], rm: &[C64], q_len: usize) -> Vec<C64> {
    let mut v = vec![ZERO; q_len];
    for (row, &ur) in rm.chunks(q_len).zip(u) {
        let cu = ur.conj();
        for (vq, &x) in v.iter_mut().zip(row) {
            *vq += cu * x;
        }
    }
    v
}

/// `K[s, s'] = Σ_{q < Q} conj(b[q + s]) b[q + s']` for `s, s' < D`.
fn shifted_gram(b: &[C64], q_len: usize, d_taps: usize) -> DMatrix<C64> {
    let mut k = DMatrix::zeros(d_taps, d_taps);
    for s in 0..d_taps {
        let v: C64 = (0..q_len).map(|q| b[q].conj() * b[q + s]).sum();
        k[(0, s)] = v;
        k[(s, 0)] = v.conj();
    }
    for s in 0..d_taps - 1 {
        for t in 0..d_taps - 1 {
            k[(s + 1, t + 1)] = k[(s, t)] - b[s].conj() * b[t] + b[q_len + s].conj() * b[q_len + t];
        }
    }
    k
}

/// Extracted path plus whether its grid components fell outside the unit disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractedPath {
    pub path: Path,
    pub clamped: bool,
}

/// Physical parameters of every support entry; delays are relative to the clock offset.
pub fn extract_paths_flagged(est: &SparseEstimate, set: &DictionarySet) -> Result<Vec<ExtractedPath>> {
    est.support
        .iter()
        .zip(&est.coeffs)
        .map(|(j, &gain)| {
            let p = set.params(j)?;
            let (aoa, c1) = UnitDirection::from_xy_upper(p.aoa_xy[0], p.aoa_xy[1]);
            let (aod, c2) = UnitDirection::from_xy_upper(p.aod_xy[0], p.aod_xy[1]);
            Ok(ExtractedPath {
                path: Path {
                    gain,
                    delay_s: p.delay_s,
                    aoa,
                    aod,
                },
                clamped: c1 || c2,
            })
        })
        .collect()
}

pub fn extract_paths(est: &SparseEstimate, set: &DictionarySet) -> Result<Vec<Path>> {
    Ok(extract_paths_flagged(est, set)?.into_iter().map(|e| e.path).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{PulseShape, UraGeometry};
    use crate::dictionaries::{atom_channel, build_dictionaries, DictionaryConfig};
    use crate::training::{build_sensing, make_frames, make_pilots, observe, substream, TrainingConfig};
    use rand::Rng;

    struct Tiny {
        phi: SensingTensor,
        set: DictionarySet,
        cfg: TrainingConfig,
        frames: Vec<crate::training::TrainingFrame>,
    }

    fn tiny(k_res: f64) -> Tiny {
        let rx = UraGeometry::half_wave(2, 2);
        let tx = UraGeometry::half_wave(2, 2);
        let cfg = TrainingConfig {
            m_frames: 4,
            m_tx_chains: 2,
            m_rx_chains: 2,
            q_symbols: 8,
            d_taps: 4,
            tx_power_w: 1.0,
            noise_power_w: 0.0,
            rng_seed: 1,
        };
        let pilot = make_pilots(&cfg, 4, 0).unwrap();
        let frames = make_frames(&cfg, &tx, &rx, &pilot).unwrap();
        let phi = build_sensing(&frames, &cfg, &tx, &rx).unwrap();
        let dcfg = DictionaryConfig {
            k_res,
            d_taps: 4,
            sample_period_s: 1.0,
            rx_geom: rx,
            tx_geom: tx,
        };
        let set = build_dictionaries(&dcfg, &PulseShape::sinc(1.0)).unwrap();
        Tiny { phi, set, cfg, frames }
    }

    fn exhaustive() -> SolverConfig {
        SolverConfig {
            mode: SolveMode::Exhaustive,
            residual_stop_ratio: 1e-12,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn measured_atom_matches_dense_operator() {
        let t = tiny(1.5);
        let dense = t.phi.dense().unwrap();
        let j = [1, 2, 0, 2, 3];
        let h = atom_channel(&t.set, &j, C64::new(1.0, 0.0)).unwrap();
        let want = &dense * nalgebra::DVector::from_vec(t.phi.flatten_channel(&h));
        let got = measured_atom(&t.phi, &t.set, &j).unwrap();
        let err: f64 = got.iter().zip(want.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!(err.sqrt() < 1e-10 * norm_sqr(&got).sqrt());
        let via_pipeline = observe(&h, &t.frames, &t.cfg, 0).unwrap();
        let err: f64 = got.iter().zip(&via_pipeline.y).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!(err.sqrt() < 1e-10 * norm_sqr(&got).sqrt());
    }

    #[test]
    fn shifted_gram_matches_direct() {
        let mut rng = substream(3, 3);
        let b: Vec<C64> = (0..13).map(|_| C64::new(rng.random(), rng.random())).collect();
        let k = shifted_gram(&b, 8, 5);
        for s in 0..5 {
            for t in 0..5 {
                let want: C64 = (0..8).map(|q| b[q + s].conj() * b[q + t]).sum();
                assert!((k[(s, t)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn single_atom_recovered_exactly() {
        let t = tiny(2.0);
        let j = [3, 1, 2, 0, 5];
        let alpha = C64::new(0.8, -0.3);
        let h = atom_channel(&t.set, &j, alpha).unwrap();
        let y = t.phi.apply(&h).unwrap();
        for est in [
            momp_solve(&y, &t.phi, &t.set, &exhaustive()).unwrap(),
            omp_solve(&y, &t.phi, &t.set, &exhaustive()).unwrap(),
            momp_solve(&y, &t.phi, &t.set, &SolverConfig { residual_stop_ratio: 1e-12, ..Default::default() }).unwrap(),
        ] {
            assert_eq!(est.support, vec![j]);
            assert!((est.coeffs[0] - alpha).norm() < 1e-8);
            assert!(est.residual_energy < 1e-20 * y.energy());
        }
    }

    #[test]
    fn zero_observation_gives_empty_support() {
        let t = tiny(1.0);
        let y = Observation::zeros(t.phi.n_frames(), t.phi.m_rx, t.phi.q);
        assert!(momp_solve(&y, &t.phi, &t.set, &exhaustive()).unwrap().support.is_empty());
        assert!(omp_solve(&y, &t.phi, &t.set, &exhaustive()).unwrap().support.is_empty());
    }

    #[test]
    fn non_finite_observation_rejected() {
        let t = tiny(1.0);
        let mut y = Observation::zeros(t.phi.n_frames(), t.phi.m_rx, t.phi.q);
        y.y[3] = C64::new(f64::NAN, 0.0);
        assert!(matches!(
            momp_solve(&y, &t.phi, &t.set, &exhaustive()),
            Err(Error::NonFiniteObservation)
        ));
    }

    #[test]
    fn residual_is_orthogonal_and_monotone() {
        let t = tiny(2.0);
        let mut rng = substream(4, 4);
        let mut y = Observation::zeros(t.phi.n_frames(), t.phi.m_rx, t.phi.q);
        for v in y.y.iter_mut() {
            *v = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let mut last = f64::INFINITY;
        for n in 1..=5 {
            let cfg = SolverConfig { n_paths_max: n, ..exhaustive() };
            let est = momp_solve(&y, &t.phi, &t.set, &cfg).unwrap();
            assert!(est.residual_energy <= last * (1.0 + 1e-12));
            last = est.residual_energy;
            let mut r = y.y.clone();
            for (j, c) in est.support.iter().zip(&est.coeffs) {
                for (ri, qi) in r.iter_mut().zip(measured_atom(&t.phi, &t.set, j).unwrap()) {
                    *ri -= c * qi;
                }
            }
            assert!((norm_sqr(&r) - est.residual_energy).abs() < 1e-9 * y.energy());
            let ny = y.energy().sqrt();
            for j in &est.support {
                let q = measured_atom(&t.phi, &t.set, j).unwrap();
                let ip: C64 = q.iter().zip(&r).map(|(a, &b)| a.conj() * b).sum();
                assert!(ip.norm() < 1e-8 * ny * norm_sqr(&q).sqrt());
            }
        }
    }

    #[test]
    fn estimate_json_shape() {
        let est = SparseEstimate {
            support: vec![[0, 1, 2, 3, 4]],
            coeffs: vec![C64::new(1.5, -0.5)],
            residual_energy: 0.25,
            rank_deficient: false,
        };
        let s = est.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["support"][0][4], 4);
        assert_eq!(v["coeffs"][0]["re"], 1.5);
        assert_eq!(v["residual_energy"], 0.25);
        assert_eq!(SparseEstimate::from_json(&s).unwrap(), est);
    }

    #[test]
    fn extraction_completes_z() {
        let t = tiny(2.0);
        let est = SparseEstimate {
            support: vec![[2, 2, 0, 0, 2]],
            coeffs: vec![C64::new(2.0, 0.0)],
            residual_energy: 0.0,
            rank_deficient: false,
        };
        let p = extract_paths_flagged(&est, &t.set).unwrap();
        assert_eq!(t.set.grids[0][2], 0.0);
        assert_eq!(p[0].path.aoa, UnitDirection::boresight());
        assert_eq!(p[0].path.delay_s, 1.0);
        // (−1, −1) lies outside the unit disk
        assert!(p[0].clamped);
        assert!(p[0].path.aod.norm_error() < 1e-12);
    }

    #[test]
    fn omp_capacity_guard() {
        let t = tiny(1.0);
        let dcfg = DictionaryConfig {
            k_res: 200.0,
            d_taps: 4,
            sample_period_s: 1.0,
            rx_geom: t.phi.rx,
            tx_geom: t.phi.tx,
        };
        let big = build_dictionaries(&dcfg, &PulseShape::sinc(1.0)).unwrap();
        let y = Observation::zeros(t.phi.n_frames(), t.phi.m_rx, t.phi.q);
        assert!(matches!(omp_solve(&y, &t.phi, &big, &exhaustive()), Err(Error::Capacity { .. })));
    }
}
