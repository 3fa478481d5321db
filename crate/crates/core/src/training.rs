//! Training codebooks, pilots, received-block simulation, whitening and the
//! factored sensing operator.
//!
//! Per frame `m` the whitened observation block is
//! `L_m⁻¹ Y_m = √P Σ_d L_m⁻¹ W_m^H H_d F_m S_m[:, q + D − 1 − d] + L_m⁻¹ W_m^H N_m`
//! (zero-based `d` and `q`). The sensing operator keeps two factors per frame:
//! the whitened combiner `G_m = √P L_m⁻¹ W_m^H` (`M_R x N_R`) and the precoded
//! pilot `B_m = F_m S_m` (`N_T x (Q + D)`). Any entry of the dense operator is
//! `G_m[m_R, i_rx] · B_m[i_tx, q + D − 1 − i_d]`.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelTensor, UraGeometry};
use crate::{Error, Result, C64};

/// Training schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Number of training frames `M`.
    pub m_frames: usize,
    /// Transmit RF chains `M_T`; also the number of pilot streams.
    pub m_tx_chains: usize,
    /// Receive RF chains `M_R`.
    pub m_rx_chains: usize,
    /// Observed symbols per frame `Q`.
    pub q_symbols: usize,
    /// Channel taps `D`.
    pub d_taps: usize,
    /// Transmit power `P` in watts.
    pub tx_power_w: f64,
    /// Per-entry noise power `σ²` in watts.
    pub noise_power_w: f64,
    pub rng_seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("m_frames", self.m_frames),
            ("m_tx_chains", self.m_tx_chains),
            ("m_rx_chains", self.m_rx_chains),
            ("q_symbols", self.q_symbols),
            ("d_taps", self.d_taps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.tx_power_w.is_finite() && self.tx_power_w >= 0.0) {
            return Err(Error::Config("transmit power must be finite and >= 0".into()));
        }
        if self.noise_power_w.is_nan() || self.noise_power_w < 0.0 {
            return Err(Error::Config("noise power must be >= 0".into()));
        }
        Ok(())
    }

    pub fn pilot_len(&self) -> usize {
        self.q_symbols + self.d_taps
    }

    pub fn n_obs(&self) -> usize {
        self.m_frames * self.m_rx_chains * self.q_symbols
    }
}

/// Sylvester Hadamard matrix of the given power-of-two order.
pub fn hadamard(order: usize) -> Result<DMatrix<f64>> {
    if order == 0 || !order.is_power_of_two() {
        return Err(Error::Config(format!(
            "Hadamard order must be a power of two, got {order}"
        )));
    }
    let mut h = DMatrix::from_element(1, 1, 1.0);
    while h.nrows() < order {
        let n = h.nrows();
        let mut next = DMatrix::zeros(2 * n, 2 * n);
        next.view_mut((0, 0), (n, n)).copy_from(&h);
        next.view_mut((0, n), (n, n)).copy_from(&h);
        next.view_mut((n, 0), (n, n)).copy_from(&h);
        next.view_mut((n, n), (n, n)).copy_from(&(-&h));
        h = next;
    }
    Ok(h)
}

/// Pilot matrix `[0_{pad_left}, first M_T Hadamard rows, 0_{pad_right}]`.
///
/// The Hadamard order is whatever remains of the `Q + D` columns after padding.
pub fn make_pilots(cfg: &TrainingConfig, pad_left: usize, pad_right: usize) -> Result<DMatrix<C64>> {
    let total = cfg.pilot_len();
    let order = total
        .checked_sub(pad_left + pad_right)
        .filter(|&o| o > 0)
        .ok_or_else(|| {
            Error::Config(format!(
                "padding {pad_left}+{pad_right} leaves no room in {total} pilot columns"
            ))
        })?;
    let had = hadamard(order)?;
    if cfg.m_tx_chains > order {
        return Err(Error::Config(format!(
            "{} pilot streams exceed Hadamard order {order}",
            cfg.m_tx_chains
        )));
    }
    let mut s = DMatrix::zeros(cfg.m_tx_chains, total);
    for r in 0..cfg.m_tx_chains {
        for c in 0..order {
            s[(r, pad_left + c)] = C64::new(had[(r, c)], 0.0);
        }
    }
    Ok(s)
}

/// `N`-point DFT matrix with entries `exp(−j 2π k n / N)`.
pub fn dft_matrix(n: usize) -> DMatrix<C64> {
    DMatrix::from_fn(n, n, |r, c| {
        let phase = -2.0 * std::f64::consts::PI * ((r * c) % n) as f64 / n as f64;
        C64::from_polar(1.0, phase)
    })
}

/// `DFT_{nx} ⊗ DFT_{ny}`.
pub fn kron_dft(nx: usize, ny: usize) -> DMatrix<C64> {
    dft_matrix(nx).kronecker(&dft_matrix(ny))
}

/// Round-robin codebook selection for a 1-based frame index.
///
/// Transmit column groups advance fastest; each group is `M_T` (resp. `M_R`)
/// consecutive columns of the Kronecker DFT, wrapping modulo the array size.
pub fn make_codebooks(
    cfg: &TrainingConfig,
    n_tx: (usize, usize),
    n_rx: (usize, usize),
    frame_index: usize,
) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    if frame_index == 0 {
        return Err(Error::Index("frame indices start at 1".into()));
    }
    let nt = n_tx.0 * n_tx.1;
    let nr = n_rx.0 * n_rx.1;
    if cfg.m_tx_chains > nt || cfg.m_rx_chains > nr {
        return Err(Error::Config(format!(
            "RF chains ({}, {}) exceed antennas ({nt}, {nr})",
            cfg.m_tx_chains, cfg.m_rx_chains
        )));
    }
    let (tx_group, rx_group) = codebook_groups(cfg, nt, nr, frame_index);
    let ft = kron_dft(n_tx.0, n_tx.1);
    let fr = kron_dft(n_rx.0, n_rx.1);
    let precoder = select_columns(&ft, tx_group * cfg.m_tx_chains, cfg.m_tx_chains);
    let combiner = select_columns(&fr, rx_group * cfg.m_rx_chains, cfg.m_rx_chains);
    Ok((precoder, combiner))
}

fn codebook_groups(cfg: &TrainingConfig, nt: usize, nr: usize, frame_index: usize) -> (usize, usize) {
    let tx_groups = nt.div_ceil(cfg.m_tx_chains);
    let rx_groups = nr.div_ceil(cfg.m_rx_chains);
    let f = frame_index - 1;
    (f % tx_groups, (f / tx_groups) % rx_groups)
}

fn select_columns(m: &DMatrix<C64>, first: usize, count: usize) -> DMatrix<C64> {
    let n = m.ncols();
    DMatrix::from_fn(m.nrows(), count, |r, c| m[(r, (first + c) % n)])
}

/// One training frame: hybrid precoder, hybrid combiner, pilot and whitening factor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingFrame {
    /// `F_m`, `N_T x M_T`.
    pub precoder: DMatrix<C64>,
    /// `W_m`, `N_R x M_R`.
    pub combiner: DMatrix<C64>,
    /// `S_m`, `M_T x (Q + D)`.
    pub pilot: DMatrix<C64>,
    /// Lower-triangular `L_m` with `L_m L_m^H = W_m^H W_m`.
    pub whitener: DMatrix<C64>,
}

impl TrainingFrame {
    pub fn new(
        precoder: DMatrix<C64>,
        combiner: DMatrix<C64>,
        pilot: DMatrix<C64>,
        frame: usize,
    ) -> Result<Self> {
        if precoder.ncols() != pilot.nrows() {
            return Err(Error::Shape(format!(
                "precoder has {} columns but pilot has {} rows",
                precoder.ncols(),
                pilot.nrows()
            )));
        }
        let gram = combiner.adjoint() * &combiner;
        let whitener = gram
            .cholesky()
            .ok_or(Error::DegenerateCombiner { frame })?
            .unpack();
        if whitener.diagonal().iter().any(|d| !(d.re > 1e-12)) {
            return Err(Error::DegenerateCombiner { frame });
        }
        Ok(Self {
            precoder,
            combiner,
            pilot,
            whitener,
        })
    }
}

/// Builds `M` frames from the round-robin DFT codebooks and a shared pilot.
pub fn make_frames(
    cfg: &TrainingConfig,
    tx: &UraGeometry,
    rx: &UraGeometry,
    pilot: &DMatrix<C64>,
) -> Result<Vec<TrainingFrame>> {
    cfg.validate()?;
    (1..=cfg.m_frames)
        .map(|f| {
            let (p, w) = make_codebooks(cfg, (tx.nx, tx.ny), (rx.nx, rx.ny), f)?;
            TrainingFrame::new(p, w, pilot.clone(), f)
        })
        .collect()
}

/// Deterministic RNG substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes two identifiers into one stream id.
pub fn stream_id(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ b
}

fn check_frame_shapes(channel: &ChannelTensor, frame: &TrainingFrame, cfg: &TrainingConfig) -> Result<()> {
    let d = cfg.d_taps;
    if channel.d_taps() != d {
        return Err(Error::Shape(format!(
            "channel has {} taps, config expects {d}",
            channel.d_taps()
        )));
    }
    if frame.pilot.ncols() != cfg.pilot_len() {
        return Err(Error::Shape(format!(
            "pilot has {} columns, expected Q + D = {}",
            frame.pilot.ncols(),
            cfg.pilot_len()
        )));
    }
    if frame.combiner.nrows() != channel.n_rx() || frame.precoder.nrows() != channel.n_tx() {
        return Err(Error::Shape(format!(
            "codebooks ({}, {}) do not match channel ({}, {})",
            frame.combiner.nrows(),
            frame.precoder.nrows(),
            channel.n_rx(),
            channel.n_tx()
        )));
    }
    if frame.combiner.ncols() != cfg.m_rx_chains || frame.precoder.ncols() != cfg.m_tx_chains {
        return Err(Error::Shape("codebook widths do not match RF chain counts".into()));
    }
    Ok(())
}

/// Noiseless part of the received block, `M_R x Q`.
pub fn received_signal(channel: &ChannelTensor, frame: &TrainingFrame, cfg: &TrainingConfig) -> Result<DMatrix<C64>> {
    check_frame_shapes(channel, frame, cfg)?;
    let d_taps = cfg.d_taps;
    let q_len = cfg.q_symbols;
    let wh = frame.combiner.adjoint();
    let sqrt_p = C64::new(cfg.tx_power_w.sqrt(), 0.0);
    let mut y = DMatrix::zeros(cfg.m_rx_chains, q_len);
    for (d, h) in channel.taps.iter().enumerate() {
        let a = &wh * h * &frame.precoder;
        let shifted = frame.pilot.columns(d_taps - 1 - d, q_len);
        y += a * shifted;
    }
    Ok(y * sqrt_p)
}

/// Received block `Y_m` including combined noise `W_m^H N_m`, `N_m ~ CN(0, σ² I)`.
pub fn simulate_rx<R: Rng + ?Sized>(
    channel: &ChannelTensor,
    frame: &TrainingFrame,
    cfg: &TrainingConfig,
    rng: &mut R,
) -> Result<DMatrix<C64>> {
    let mut y = received_signal(channel, frame, cfg)?;
    if cfg.noise_power_w > 0.0 {
        let n = complex_gaussian(channel.n_rx(), cfg.q_symbols, cfg.noise_power_w, rng);
        y += frame.combiner.adjoint() * n;
    }
    Ok(y)
}

/// `rows x cols` matrix of i.i.d. `CN(0, variance)` samples.
pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, variance: f64, rng: &mut R) -> DMatrix<C64> {
    let s = (variance / 2.0).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(s * re, s * im)
    })
}

/// `L_m⁻¹ Y_m` by forward substitution.
pub fn whiten(frame: &TrainingFrame, y_m: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    if y_m.nrows() != frame.whitener.nrows() {
        return Err(Error::Shape(format!(
            "block has {} rows, whitener is {}x{}",
            y_m.nrows(),
            frame.whitener.nrows(),
            frame.whitener.ncols()
        )));
    }
    frame
        .whitener
        .solve_lower_triangular(y_m)
        .ok_or(Error::DegenerateCombiner { frame: 0 })
}

/// Stacked whitened observation; entry `(m, m_R, q)` lives at `m·M_R·Q + m_R·Q + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: Vec<C64>,
    pub m_frames: usize,
    pub m_rx: usize,
    pub q: usize,
}

impl Observation {
    pub fn zeros(m_frames: usize, m_rx: usize, q: usize) -> Self {
        Self {
            y: vec![C64::new(0.0, 0.0); m_frames * m_rx * q],
            m_frames,
            m_rx,
            q,
        }
    }

    pub fn index(&self, m: usize, m_r: usize, q: usize) -> usize {
        (m * self.m_rx + m_r) * self.q + q
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.y.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Frame `m` as an `M_R x Q` matrix.
    pub fn block(&self, m: usize) -> DMatrix<C64> {
        let off = m * self.m_rx * self.q;
        DMatrix::from_row_slice(self.m_rx, self.q, &self.y[off..off + self.m_rx * self.q])
    }

    /// Inverse of [`assemble_observation`].
    pub fn split(&self) -> Vec<DMatrix<C64>> {
        (0..self.m_frames).map(|m| self.block(m)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.y.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Writes the binary dump: `u32` LE header length, JSON header, then
    /// little-endian interleaved `f32` real/imaginary pairs.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = ObservationHeader {
            m: self.m_frames,
            m_r: self.m_rx,
            q: self.q,
            layout: OBSERVATION_LAYOUT.to_string(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for c in &self.y {
            w.write_all(&(c.re as f32).to_le_bytes())?;
            w.write_all(&(c.im as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: ObservationHeader = serde_json::from_slice(&header)?;
        if header.layout != OBSERVATION_LAYOUT {
            return Err(Error::Shape(format!("unknown observation layout {:?}", header.layout)));
        }
        let n = header.m * header.m_r * header.q;
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let y = buf
            .chunks_exact(8)
            .map(|b| {
                let re = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                let im = f32::from_le_bytes([b[4], b[5], b[6], b[7]]);
                C64::new(re as f64, im as f64)
            })
            .collect();
        Ok(Self {
            y,
            m_frames: header.m,
            m_rx: header.m_r,
            q: header.q,
        })
    }
}

pub const OBSERVATION_LAYOUT: &str = "frame_rx_symbol";

#[derive(Debug, Serialize, Deserialize)]
struct ObservationHeader {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "M_R")]
    m_r: usize,
    #[serde(rename = "Q")]
    q: usize,
    layout: String,
}

/// Stacks whitened `M_R x Q` blocks frame-major.
pub fn assemble_observation(frames: &[TrainingFrame], received: &[DMatrix<C64>]) -> Result<Observation> {
    if frames.len() != received.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} received blocks",
            frames.len(),
            received.len()
        )));
    }
    let Some(first) = received.first() else {
        return Ok(Observation::zeros(0, 0, 0));
    };
    let (m_rx, q) = first.shape();
    let mut obs = Observation::zeros(received.len(), m_rx, q);
    for (m, (frame, block)) in frames.iter().zip(received).enumerate() {
        if block.shape() != (m_rx, q) || frame.combiner.ncols() != m_rx {
            return Err(Error::Shape(format!(
                "block {m} is {:?}, expected ({m_rx}, {q})",
                block.shape()
            )));
        }
        for r in 0..m_rx {
            for c in 0..q {
                let i = obs.index(m, r, c);
                obs.y[i] = block[(r, c)];
            }
        }
    }
    Ok(obs)
}

/// Simulates, whitens and stacks all frames. Frame `m` draws its noise from
/// substream `stream_id(stream, m)` of `cfg.rng_seed`.
pub fn observe(
    channel: &ChannelTensor,
    frames: &[TrainingFrame],
    cfg: &TrainingConfig,
    stream: u64,
) -> Result<Observation> {
    let blocks = frames
        .iter()
        .enumerate()
        .map(|(m, frame)| {
            let mut rng = substream(cfg.rng_seed, stream_id(stream, m as u64));
            let y = simulate_rx(channel, frame, cfg, &mut rng)?;
            whiten(frame, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_observation(frames, &blocks)
}

/// Per-frame factors of the sensing operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingFrame {
    /// `√P L_m⁻¹ W_m^H`, `M_R x N_R`.
    pub g: DMatrix<C64>,
    /// `F_m S_m`, `N_T x (Q + D)`.
    pub b: DMatrix<C64>,
}

/// Factored sensing operator mapping a channel tensor to the whitened observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingTensor {
    pub frames: Vec<SensingFrame>,
    pub rx: UraGeometry,
    pub tx: UraGeometry,
    pub d_taps: usize,
    pub q: usize,
    pub m_rx: usize,
}

/// Largest operator [`SensingTensor::dense`] will build (complex entries).
pub const DENSE_LIMIT: usize = 1 << 24;

pub fn build_sensing(
    frames: &[TrainingFrame],
    cfg: &TrainingConfig,
    n_tx: &UraGeometry,
    n_rx: &UraGeometry,
) -> Result<SensingTensor> {
    let sqrt_p = C64::new(cfg.tx_power_w.sqrt(), 0.0);
    let sensing = frames
        .iter()
        .enumerate()
        .map(|(m, f)| {
            if f.combiner.nrows() != n_rx.n_elements() || f.precoder.nrows() != n_tx.n_elements() {
                return Err(Error::Shape(format!("frame {m} codebooks do not match the arrays")));
            }
            if f.pilot.ncols() != cfg.pilot_len() || f.combiner.ncols() != cfg.m_rx_chains {
                return Err(Error::Shape(format!("frame {m} pilot/combiner width mismatch")));
            }
            let g = f
                .whitener
                .solve_lower_triangular(&f.combiner.adjoint())
                .ok_or(Error::DegenerateCombiner { frame: m })?
                * sqrt_p;
            let b = &f.precoder * &f.pilot;
            Ok(SensingFrame { g, b })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensingTensor {
        frames: sensing,
        rx: *n_rx,
        tx: *n_tx,
        d_taps: cfg.d_taps,
        q: cfg.q_symbols,
        m_rx: cfg.m_rx_chains,
    })
}

impl SensingTensor {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_obs(&self) -> usize {
        self.frames.len() * self.m_rx * self.q
    }

    pub fn n_rx(&self) -> usize {
        self.rx.n_elements()
    }

    pub fn n_tx(&self) -> usize {
        self.tx.n_elements()
    }

    /// Number of channel coefficients `N_R · N_T · D`.
    pub fn n_channel(&self) -> usize {
        self.n_rx() * self.n_tx() * self.d_taps
    }

    /// Column index of channel entry `(i_rx, i_tx, d)` in [`Self::dense`].
    pub fn channel_index(&self, i_rx: usize, i_tx: usize, d: usize) -> usize {
        (i_rx * self.n_tx() + i_tx) * self.d_taps + d
    }

    /// Noiseless whitened observation of `h`.
    pub fn apply(&self, h: &ChannelTensor) -> Result<Observation> {
        if h.n_rx() != self.n_rx() || h.n_tx() != self.n_tx() || h.d_taps() != self.d_taps {
            return Err(Error::Shape("channel does not match the sensing operator".into()));
        }
        let mut obs = Observation::zeros(self.n_frames(), self.m_rx, self.q);
        for (m, f) in self.frames.iter().enumerate() {
            let mut block = DMatrix::zeros(self.m_rx, self.q);
            for (d, hd) in h.taps.iter().enumerate() {
                let gh = &f.g * hd;
                block += gh * f.b.columns(self.d_taps - 1 - d, self.q);
            }
            for r in 0..self.m_rx {
                for q in 0..self.q {
                    let i = obs.index(m, r, q);
                    obs.y[i] = block[(r, q)];
                }
            }
        }
        Ok(obs)
    }

    /// Adjoint map `Φ^H r`, returned in channel-tensor layout.
    pub fn adjoint(&self, r: &Observation) -> Result<ChannelTensor> {
        if r.m_frames != self.n_frames() || r.m_rx != self.m_rx || r.q != self.q {
            return Err(Error::Shape("observation does not match the sensing operator".into()));
        }
        let mut out = ChannelTensor::zeros(self.n_rx(), self.n_tx(), self.d_taps, 0.0);
        for (m, f) in self.frames.iter().enumerate() {
            let x = f.g.adjoint() * r.block(m);
            for (d, hd) in out.taps.iter_mut().enumerate() {
                let shifted = f.b.columns(self.d_taps - 1 - d, self.q);
                *hd += &x * shifted.adjoint();
            }
        }
        Ok(out)
    }

    /// Column `Φ[:, (i_rx, i_tx, d)]`.
    pub fn column(&self, i_rx: usize, i_tx: usize, d: usize) -> Result<Vec<C64>> {
        if i_rx >= self.n_rx() || i_tx >= self.n_tx() || d >= self.d_taps {
            return Err(Error::Index(format!("channel entry ({i_rx}, {i_tx}, {d})")));
        }
        let mut col = Vec::with_capacity(self.n_obs());
        for f in &self.frames {
            for r in 0..self.m_rx {
                let g = f.g[(r, i_rx)];
                for q in 0..self.q {
                    col.push(g * f.b[(i_tx, q + self.d_taps - 1 - d)]);
                }
            }
        }
        Ok(col)
    }

    /// Dense `n_obs x (N_R N_T D)` operator; small instances only.
    pub fn dense(&self) -> Result<DMatrix<C64>> {
        let n = self.n_obs() * self.n_channel();
        if n > DENSE_LIMIT {
            return Err(Error::Capacity {
                atoms: n as u128,
                reason: "dense sensing operator".into(),
            });
        }
        let mut phi = DMatrix::zeros(self.n_obs(), self.n_channel());
        for i_rx in 0..self.n_rx() {
            for i_tx in 0..self.n_tx() {
                for d in 0..self.d_taps {
                    let col = self.column(i_rx, i_tx, d)?;
                    let c = self.channel_index(i_rx, i_tx, d);
                    for (k, v) in col.into_iter().enumerate() {
                        phi[(k, c)] = v;
                    }
                }
            }
        }
        Ok(phi)
    }

    /// Flattens a channel tensor in [`Self::channel_index`] order.
    pub fn flatten_channel(&self, h: &ChannelTensor) -> Vec<C64> {
        let mut v = vec![C64::new(0.0, 0.0); self.n_channel()];
        for (d, hd) in h.taps.iter().enumerate() {
            for i_rx in 0..self.n_rx() {
                for i_tx in 0..self.n_tx() {
                    v[self.channel_index(i_rx, i_tx, d)] = hd[(i_rx, i_tx)];
                }
            }
        }
        v
    }
}
