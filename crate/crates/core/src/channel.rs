//! Array geometry, pulse shaping and the multi-tap geometric MIMO channel.
//!
//! Array vectors are flattened with the x element index varying slowest:
//! element `(n_x, n_y)` lives at `n_x * ny + n_y`, so a full URA response is the
//! Kronecker product `a_x ⊗ a_y`. The sensing operator, dictionaries and both
//! solvers rely on this layout.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

/// Slack allowed on `|component| <= 1` before a direction is rejected.
const COMPONENT_SLACK: f64 = 1e-12;

/// A 3D unit vector describing an arrival or departure direction in an array frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitDirection {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitDirection {
    /// Normalizes `v` to unit length.
    pub fn from_vector(v: [f64; 3]) -> Result<Self> {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::InvalidDirection(format!("cannot normalize {v:?}")));
        }
        Ok(Self {
            x: v[0] / n,
            y: v[1] / n,
            z: v[2] / n,
        })
    }

    /// Builds a direction from its two in-plane components, completing `z >= 0`.
    ///
    /// Components outside the unit disk are scaled back onto the unit circle
    /// (`z = 0`); the returned flag reports when that happened.
    pub fn from_xy_upper(x: f64, y: f64) -> (Self, bool) {
        let r2 = x * x + y * y;
        if r2 > 1.0 {
            let r = r2.sqrt();
            (
                Self {
                    x: x / r,
                    y: y / r,
                    z: 0.0,
                },
                true,
            )
        } else {
            (
                Self {
                    x,
                    y,
                    z: (1.0 - r2).sqrt(),
                },
                false,
            )
        }
    }

    pub const fn boresight() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_error(&self) -> f64 {
        (self.dot(self) - 1.0).abs()
    }

    /// Mirror image through the origin.
    pub fn negated(&self) -> Self {
        Self {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    /// Complex amplitude.
    pub gain: C64,
    /// Delay in seconds. Absolute for ground truth, relative to the clock offset for estimates.
    pub delay_s: f64,
    /// Direction of arrival in the receive array frame.
    pub aoa: UnitDirection,
    /// Direction of departure in the transmit array frame.
    pub aod: UnitDirection,
}

impl Path {
    pub fn power(&self) -> f64 {
        self.gain.norm_sqr()
    }
}

/// Wire form of a [`Path`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PathRecord {
    gain_re: f64,
    gain_im: f64,
    delay_s: f64,
    aoa: [f64; 3],
    aod: [f64; 3],
}

impl Serialize for Path {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PathRecord {
            gain_re: self.gain.re,
            gain_im: self.gain.im,
            delay_s: self.delay_s,
            aoa: self.aoa.as_array(),
            aod: self.aod.as_array(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = PathRecord::deserialize(d)?;
        if r.delay_s < 0.0 {
            return Err(D::Error::custom("delay_s must be non-negative"));
        }
        let aoa = UnitDirection::from_vector(r.aoa).map_err(D::Error::custom)?;
        let aod = UnitDirection::from_vector(r.aod).map_err(D::Error::custom)?;
        Ok(Path {
            gain: C64::new(r.gain_re, r.gain_im),
            delay_s: r.delay_s,
            aoa,
            aod,
        })
    }
}

pub fn paths_to_json(paths: &[Path]) -> Result<String> {
    Ok(serde_json::to_string_pretty(paths)?)
}

pub fn paths_from_json(s: &str) -> Result<Vec<Path>> {
    Ok(serde_json::from_str(s)?)
}

/// Planar uniform rectangular array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UraGeometry {
    pub nx: usize,
    pub ny: usize,
    /// Element pitch in carrier wavelengths.
    #[serde(default = "half_wavelength")]
    pub spacing_wavelengths: f64,
}

fn half_wavelength() -> f64 {
    0.5
}

impl UraGeometry {
    pub fn new(nx: usize, ny: usize, spacing_wavelengths: f64) -> Result<Self> {
        let g = Self {
            nx,
            ny,
            spacing_wavelengths,
        };
        g.validate()?;
        Ok(g)
    }

    /// Half-wavelength array.
    pub fn half_wave(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            spacing_wavelengths: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Config(format!(
                "array must have at least one element per side, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.spacing_wavelengths.is_finite() && self.spacing_wavelengths > 0.0) {
            return Err(Error::Config("element spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }
}

/// Response of a uniform linear sub-array: entry `k` is `exp(j 2π s k c)`.
pub fn steering_component(n: usize, component: f64, spacing_wavelengths: f64) -> Result<Vec<C64>> {
    if !component.is_finite() || component.abs() > 1.0 + COMPONENT_SLACK {
        return Err(Error::InvalidDirection(format!(
            "direction component {component} outside [-1, 1]"
        )));
    }
    Ok(steering_unchecked(n, component, spacing_wavelengths))
}

/// Same as [`steering_component`] without the range check; grids may use it directly.
pub(crate) fn steering_unchecked(n: usize, component: f64, spacing_wavelengths: f64) -> Vec<C64> {
    let phase = 2.0 * PI * spacing_wavelengths * component;
    (0..n).map(|k| C64::from_polar(1.0, phase * k as f64)).collect()
}

/// Full array response `a_x(dir.x) ⊗ a_y(dir.y)`.
pub fn ura_response(geom: &UraGeometry, dir: &UnitDirection) -> Result<DVector<C64>> {
    if dir.norm_error() > 1e-9 {
        return Err(Error::InvalidDirection(format!(
            "direction {:?} is not unit norm",
            dir.as_array()
        )));
    }
    let ax = steering_component(geom.nx, dir.x, geom.spacing_wavelengths)?;
    let ay = steering_component(geom.ny, dir.y, geom.spacing_wavelengths)?;
    Ok(kron(&ax, &ay))
}

pub(crate) fn kron(a: &[C64], b: &[C64]) -> DVector<C64> {
    DVector::from_iterator(
        a.len() * b.len(),
        a.iter().flat_map(|&ai| b.iter().map(move |&bj| ai * bj)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PulseKind {
    Sinc,
    RaisedCosine,
}

/// Band-limited pulse `p(t)` including transmit and receive filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseShape {
    pub kind: PulseKind,
    pub sample_period_s: f64,
    /// Roll-off factor, raised cosine only.
    #[serde(default)]
    pub rolloff: f64,
}

impl PulseShape {
    pub fn sinc(sample_period_s: f64) -> Self {
        Self {
            kind: PulseKind::Sinc,
            sample_period_s,
            rolloff: 0.0,
        }
    }

    pub fn raised_cosine(sample_period_s: f64, rolloff: f64) -> Self {
        Self {
            kind: PulseKind::RaisedCosine,
            sample_period_s,
            rolloff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_period_s.is_finite() && self.sample_period_s > 0.0) {
            return Err(Error::Config("sample period must be positive".into()));
        }
        if self.kind == PulseKind::RaisedCosine && !(0.0..=1.0).contains(&self.rolloff) {
            return Err(Error::Config("raised-cosine roll-off must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn eval(&self, t_s: f64) -> f64 {
        self.eval_samples(t_s / self.sample_period_s)
    }

    /// Pulse value at `x` sample periods.
    ///
    /// Arguments within 1e-12 of an integer are treated as that integer so that
    /// on-grid delays produce exact zero crossings.
    pub fn eval_samples(&self, x: f64) -> f64 {
        let k = x.round();
        let x = if (x - k).abs() < 1e-12 { k } else { x };
        match self.kind {
            PulseKind::Sinc => sinc(x),
            PulseKind::RaisedCosine => {
                let b = self.rolloff;
                if b == 0.0 {
                    return sinc(x);
                }
                let denom = 1.0 - (2.0 * b * x).powi(2);
                if denom.abs() < 1e-12 {
                    PI / 4.0 * sinc(1.0 / (2.0 * b))
                } else {
                    sinc(x) * (PI * b * x).cos() / denom
                }
            }
        }
    }

    /// Pulse value truncated to `|x| <= support` samples.
    pub fn eval_truncated(&self, x: f64, support: f64) -> f64 {
        if x.abs() > support {
            0.0
        } else {
            self.eval_samples(x)
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x == x.round() {
        0.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// The D-tap MIMO channel, one `N_R x N_T` matrix per delay tap.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    pub taps: Vec<DMatrix<C64>>,
    pub sample_period_s: f64,
}

impl ChannelTensor {
    pub fn zeros(n_rx: usize, n_tx: usize, d_taps: usize, sample_period_s: f64) -> Self {
        Self {
            taps: vec![DMatrix::zeros(n_rx, n_tx); d_taps],
            sample_period_s,
        }
    }

    pub fn n_rx(&self) -> usize {
        self.taps.first().map_or(0, |h| h.nrows())
    }

    pub fn n_tx(&self) -> usize {
        self.taps.first().map_or(0, |h| h.ncols())
    }

    pub fn d_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|h| h.norm_squared()).sum()
    }
}

/// Synthesizes `H_d = Σ_l α_l a_R(θ_l) a_T(φ_l)^H p(d T_s + τ_0 − τ_l)` for `d = 0..D`.
///
/// The pulse is truncated to `|t| <= D T_s`.
pub fn build_channel(
    paths: &[Path],
    geom_rx: &UraGeometry,
    geom_tx: &UraGeometry,
    pulse: &PulseShape,
    d_taps: usize,
    clock_offset_s: f64,
) -> Result<ChannelTensor> {
    if d_taps == 0 {
        return Err(Error::Config("channel needs at least one delay tap".into()));
    }
    geom_rx.validate()?;
    geom_tx.validate()?;
    pulse.validate()?;
    let ts = pulse.sample_period_s;
    let mut h = ChannelTensor::zeros(geom_rx.n_elements(), geom_tx.n_elements(), d_taps, ts);
    let support = d_taps as f64;
    for path in paths {
        if !(path.delay_s >= 0.0) {
            return Err(Error::Config(format!("negative path delay {}", path.delay_s)));
        }
        let a_r = ura_response(geom_rx, &path.aoa)?;
        let a_t = ura_response(geom_tx, &path.aod)?;
        let outer = &a_r * a_t.adjoint();
        let shift = (clock_offset_s - path.delay_s) / ts;
        for (d, tap) in h.taps.iter_mut().enumerate() {
            let p = pulse.eval_truncated(d as f64 + shift, support);
            if p != 0.0 {
                *tap += &outer * (path.gain * p);
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn close(a: C64, b: C64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn steering_examples() {
        let v = steering_component(2, 0.0, 0.5).unwrap();
        assert!(close(v[0], C64::new(1.0, 0.0)) && close(v[1], C64::new(1.0, 0.0)));
        let v = steering_component(2, 1.0, 0.5).unwrap();
        assert!(close(v[1], C64::new(-1.0, 0.0)));
        let v = steering_component(4, 0.5, 0.5).unwrap();
        let want = [
            C64::new(1.0, 0.0),
            C64::new(0.0, 1.0),
            C64::new(-1.0, 0.0),
            C64::new(0.0, -1.0),
        ];
        for (a, b) in v.iter().zip(want) {
            assert!(close(*a, b), "{a} vs {b}");
        }
        assert!(matches!(
            steering_component(3, 1.2, 0.5),
            Err(Error::InvalidDirection(_))
        ));
    }

    #[test]
    fn ura_examples() {
        let g = UraGeometry::half_wave(2, 2);
        let v = ura_response(&g, &UnitDirection::boresight()).unwrap();
        assert!(v.iter().all(|c| close(*c, C64::new(1.0, 0.0))));
        let dir = UnitDirection::from_vector([1.0, 0.0, 0.0]).unwrap();
        let v = ura_response(&g, &dir).unwrap();
        let want = [1.0, 1.0, -1.0, -1.0];
        for (a, b) in v.iter().zip(want) {
            assert!(close(*a, C64::new(b, 0.0)));
        }
    }

    #[test]
    fn xy_completion_clamps_outside_disk() {
        let (d, clamped) = UnitDirection::from_xy_upper(0.3, 0.4);
        assert!(!clamped);
        assert_abs_diff_eq!(d.z, 0.75f64.sqrt(), epsilon = 1e-15);
        let (d, clamped) = UnitDirection::from_xy_upper(0.9, 0.9);
        assert!(clamped);
        assert_abs_diff_eq!(d.norm_error(), 0.0, epsilon = 1e-12);
        assert_eq!(d.z, 0.0);
    }

    #[test]
    fn sinc_nulls_and_raised_cosine_nyquist() {
        let p = PulseShape::sinc(1e-9);
        assert_eq!(p.eval_samples(0.0), 1.0);
        for k in 1..10 {
            assert_eq!(p.eval_samples(k as f64), 0.0);
            assert_eq!(p.eval_samples(-(k as f64)), 0.0);
        }
        let rc = PulseShape::raised_cosine(1e-9, 0.25);
        assert_eq!(rc.eval_samples(0.0), 1.0);
        for k in 1..10 {
            assert_eq!(rc.eval_samples(k as f64), 0.0);
        }
        // removable singularity at t = T/(2β)
        let near = rc.eval_samples(2.0 - 1e-7);
        let at = rc.eval_samples(2.0);
        assert!((near - at).abs() < 1e-6);
    }

    fn test_path(gain: C64, delay_s: f64) -> Path {
        Path {
            gain,
            delay_s,
            aoa: UnitDirection::from_vector([0.3, -0.2, 0.9]).unwrap(),
            aod: UnitDirection::from_vector([-0.5, 0.1, 0.7]).unwrap(),
        }
    }

    #[test]
    fn on_grid_path_hits_one_tap() {
        let ts = 1e-9;
        let rx = UraGeometry::half_wave(2, 3);
        let tx = UraGeometry::half_wave(2, 2);
        let tau0 = 2.5e-9;
        let d0 = 3;
        let alpha = C64::new(0.7, -0.2);
        let path = test_path(alpha, tau0 + d0 as f64 * ts);
        let h = build_channel(&[path], &rx, &tx, &PulseShape::sinc(ts), 8, tau0).unwrap();
        let expect = ura_response(&rx, &path.aoa).unwrap()
            * ura_response(&tx, &path.aod).unwrap().adjoint()
            * alpha;
        for (d, tap) in h.taps.iter().enumerate() {
            if d == d0 {
                assert!((tap - &expect).norm() < 1e-12);
            } else {
                assert!(tap.iter().all(|c| *c == C64::new(0.0, 0.0)), "tap {d} not zero");
            }
        }
    }

    #[test]
    fn off_grid_path_matches_scalar_evaluation() {
        let ts = 1e-9;
        let rx = UraGeometry::half_wave(2, 2);
        let tx = UraGeometry::half_wave(1, 2);
        let d0 = 2.0;
        let path = test_path(C64::new(1.0, 0.5), (d0 - 0.5) * ts);
        let pulse = PulseShape::sinc(ts);
        let h = build_channel(&[path], &rx, &tx, &pulse, 6, 0.0).unwrap();
        let outer = ura_response(&rx, &path.aoa).unwrap()
            * ura_response(&tx, &path.aod).unwrap().adjoint()
            * path.gain;
        for (d, tap) in h.taps.iter().enumerate() {
            let x = (d as f64 - d0 + 0.5) * std::f64::consts::PI;
            let p = x.sin() / x;
            assert!((tap - &outer * C64::new(p, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn empty_path_list_gives_zero_channel() {
        let g = UraGeometry::half_wave(2, 2);
        let h = build_channel(&[], &g, &g, &PulseShape::sinc(1e-9), 4, 0.0).unwrap();
        assert_eq!(h.energy(), 0.0);
        assert_eq!(h.d_taps(), 4);
    }

    #[test]
    fn path_json_shape() {
        let p = test_path(C64::new(1.0, -2.0), 3e-9);
        let s = paths_to_json(&[p]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        let rec = &v[0];
        assert_eq!(rec["gain_re"], 1.0);
        assert_eq!(rec["gain_im"], -2.0);
        assert_eq!(rec["aoa"].as_array().unwrap().len(), 3);
        let back = paths_from_json(&s).unwrap();
        assert!((back[0].gain - p.gain).norm() == 0.0);
        assert!((back[0].aoa.x - p.aoa.x).abs() < 1e-15);
    }

    fn dir_strategy() -> impl Strategy<Value = UnitDirection> {
        (-1.0f64..1.0, -1.0f64..1.0, 0.01f64..1.0)
            .prop_map(|(x, y, z)| UnitDirection::from_vector([x, y, z]).unwrap())
    }

    proptest! {
        #[test]
        fn ura_is_kronecker_and_conjugate_symmetric(
            dir in dir_strategy(), nx in 1usize..5, ny in 1usize..5, s in 0.3f64..0.7
        ) {
            let g = UraGeometry::new(nx, ny, s).unwrap();
            let v = ura_response(&g, &dir).unwrap();
            let ax = steering_component(nx, dir.x, s).unwrap();
            let ay = steering_component(ny, dir.y, s).unwrap();
            for i in 0..nx {
                for j in 0..ny {
                    prop_assert_eq!(v[i * ny + j], ax[i] * ay[j]);
                }
            }
            let mirrored = UnitDirection { x: -dir.x, y: -dir.y, z: dir.z };
            let w = ura_response(&g, &mirrored).unwrap();
            for (a, b) in v.iter().zip(w.iter()) {
                prop_assert!((a.conj() - b).norm() < 1e-12);
            }
        }

        #[test]
        fn channel_is_linear_in_paths(
            g1 in (-1.0f64..1.0, -1.0f64..1.0), g2 in (-1.0f64..1.0, -1.0f64..1.0),
            t1 in 0.0f64..6.0, t2 in 0.0f64..6.0, d1 in dir_strategy(), d2 in dir_strategy(),
            scale in -3.0f64..3.0,
        ) {
            let ts = 1e-9;
            let rx = UraGeometry::half_wave(2, 2);
            let tx = UraGeometry::half_wave(2, 1);
            let pulse = PulseShape::sinc(ts);
            let p1 = Path { gain: C64::new(g1.0, g1.1), delay_s: t1 * ts, aoa: d1, aod: d2 };
            let p2 = Path { gain: C64::new(g2.0, g2.1), delay_s: t2 * ts, aoa: d2, aod: d1 };
            let h1 = build_channel(&[p1], &rx, &tx, &pulse, 5, 0.0).unwrap();
            let h2 = build_channel(&[p2], &rx, &tx, &pulse, 5, 0.0).unwrap();
            let h12 = build_channel(&[p1, p2], &rx, &tx, &pulse, 5, 0.0).unwrap();
            let scaled = Path { gain: p1.gain * scale, ..p1 };
            let hs = build_channel(&[scaled], &rx, &tx, &pulse, 5, 0.0).unwrap();
            let norm = h12.energy().sqrt().max(1e-300);
            for d in 0..5 {
                let diff = (&h12.taps[d] - &h1.taps[d] - &h2.taps[d]).norm();
                prop_assert!(diff <= 1e-12 * norm.max(1.0));
                let diff = (&hs.taps[d] - &h1.taps[d] * C64::new(scale, 0.0)).norm();
                prop_assert!(diff <= 1e-12 * h1.energy().sqrt().max(1.0));
            }
        }
    }
}
