//! Synthetic indoor scenes with first-order image-source propagation.
//!
//! Coordinates are meters in a global z-up frame. Every array has a pose given
//! by its local axes expressed in global coordinates; the local z axis is the
//! array normal.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Path, UnitDirection};
use crate::localization::PathLabel;
use crate::{Error, Result, C64, SPEED_OF_LIGHT};

const EPS: f64 = 1e-9;

/// Axis-aligned room.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl RoomBox {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - EPS && p[k] <= self.max[k] + EPS)
    }

    /// The six faces as `(axis, coordinate)`, walls first, then floor and ceiling.
    fn faces(&self) -> [(usize, f64); 6] {
        [
            (0, self.min[0]),
            (0, self.max[0]),
            (1, self.min[1]),
            (1, self.max[1]),
            (2, self.min[2]),
            (2, self.max[2]),
        ]
    }

    fn face_contains(&self, axis: usize, p: &[f64; 3]) -> bool {
        (0..3)
            .filter(|&k| k != axis)
            .all(|k| p[k] >= self.min[k] - EPS && p[k] <= self.max[k] + EPS)
    }
}

/// Rectangular hole in the plane `x_axis = coord`, e.g. a doorway.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Opening {
    pub axis: usize,
    pub coord: f64,
    /// Bounds of the two remaining coordinates, in increasing axis order.
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Opening {
    fn contains(&self, axis: usize, p: &[f64; 3]) -> bool {
        if axis != self.axis || (p[axis] - self.coord).abs() > EPS {
            return false;
        }
        let others: Vec<usize> = (0..3).filter(|&k| k != axis).collect();
        others
            .iter()
            .enumerate()
            .all(|(i, &k)| p[k] >= self.lo[i] - EPS && p[k] <= self.hi[i] + EPS)
    }
}

/// Local array axes in global coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub x_axis: [f64; 3],
    pub y_axis: [f64; 3],
    pub z_axis: [f64; 3],
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

impl Orientation {
    pub const IDENTITY: Self = Self {
        x_axis: [1.0, 0.0, 0.0],
        y_axis: [0.0, 1.0, 0.0],
        z_axis: [0.0, 0.0, 1.0],
    };

    /// Wall-mounted vertical array whose normal is `normal` (horizontal).
    pub fn wall_facing(normal: [f64; 2]) -> Result<Self> {
        let n = (normal[0] * normal[0] + normal[1] * normal[1]).sqrt();
        if !(n > 0.0) {
            return Err(Error::Config("wall normal must be non-zero".into()));
        }
        let (nx, ny) = (normal[0] / n, normal[1] / n);
        Ok(Self {
            x_axis: [-ny, nx, 0.0],
            y_axis: [0.0, 0.0, 1.0],
            z_axis: [nx, ny, 0.0],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [self.x_axis, self.y_axis, self.z_axis];
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot3(&axes[i], &axes[j]) - want).abs() > 1e-9 {
                    return Err(Error::Config("orientation axes must be orthonormal".into()));
                }
            }
        }
        let x = self.x_axis;
        let y = self.y_axis;
        let cross = [x[1] * y[2] - x[2] * y[1], x[2] * y[0] - x[0] * y[2], x[0] * y[1] - x[1] * y[0]];
        if dot3(&cross, &self.z_axis) < 0.0 {
            return Err(Error::Config("orientation must be right-handed".into()));
        }
        Ok(())
    }

    pub fn to_local(&self, v: &[f64; 3]) -> [f64; 3] {
        [dot3(v, &self.x_axis), dot3(v, &self.y_axis), dot3(v, &self.z_axis)]
    }

    pub fn to_global(&self, d: &UnitDirection) -> UnitDirection {
        let v: [f64; 3] = std::array::from_fn(|k| d.x * self.x_axis[k] + d.y * self.y_axis[k] + d.z * self.z_axis[k]);
        UnitDirection { x: v[0], y: v[1], z: v[2] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub position: [f64; 3],
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomScene {
    pub rooms: Vec<RoomBox>,
    #[serde(default)]
    pub openings: Vec<Opening>,
    pub aps: Vec<AccessPoint>,
    pub carrier_wavelength_m: f64,
    pub reflection_loss_db: f64,
    pub users: Vec<[f64; 3]>,
    #[serde(default = "default_user_orientation")]
    pub user_orientation: Orientation,
    /// Drop paths arriving or departing behind an array.
    #[serde(default = "default_true")]
    pub backside_culling: bool,
    /// Random extra paths standing in for higher-order reflections.
    #[serde(default)]
    pub clutter_paths: usize,
    /// Clutter power relative to the strongest traced path, dB.
    #[serde(default = "default_clutter_db")]
    pub clutter_rel_db: f64,
}

fn default_user_orientation() -> Orientation {
    Orientation::IDENTITY
}

fn default_true() -> bool {
    true
}

fn default_clutter_db() -> f64 {
    -20.0
}

/// One traced path with its global geometry and type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricPath {
    pub kind: PathLabel,
    pub length_m: f64,
    pub bounces: u32,
    /// Arrival direction at the AP, global frame.
    pub aoa_global: [f64; 3],
    /// Departure direction at the user, global frame.
    pub aod_global: [f64; 3],
}

/// A traced path in array-local frames plus its label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracedPath {
    pub path: Path,
    pub kind: PathLabel,
}

/// Everything known about one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub user: usize,
    pub ap: usize,
    pub position: [f64; 3],
    pub clock_offset_s: f64,
    /// Absolute delays, array-local directions.
    pub paths: Vec<Path>,
    pub labels: Vec<PathLabel>,
}

impl RoomScene {
    pub fn validate(&self) -> Result<()> {
        if self.rooms.is_empty() || self.aps.is_empty() {
            return Err(Error::Config("scene needs at least one room and one access point".into()));
        }
        for r in &self.rooms {
            if (0..3).any(|k| !(r.max[k] > r.min[k])) {
                return Err(Error::Config(format!("degenerate room {r:?}")));
            }
        }
        if !(self.carrier_wavelength_m > 0.0) {
            return Err(Error::Config("carrier wavelength must be positive".into()));
        }
        self.user_orientation.validate()?;
        for (i, ap) in self.aps.iter().enumerate() {
            ap.orientation.validate()?;
            if self.room_of(&ap.position).is_none() {
                return Err(Error::Config(format!("access point {i} is outside every room")));
            }
        }
        for (i, u) in self.users.iter().enumerate() {
            if self.room_of(u).is_none() {
                return Err(Error::Config(format!("user {i} is outside every room")));
            }
        }
        Ok(())
    }

    pub fn room_of(&self, p: &[f64; 3]) -> Option<usize> {
        self.rooms.iter().position(|r| r.contains(p))
    }

    fn in_opening(&self, axis: usize, p: &[f64; 3]) -> bool {
        self.openings.iter().any(|o| o.contains(axis, p))
    }

    /// True when the open segment `a → b` passes through no solid face.
    pub fn segment_clear(&self, a: &[f64; 3], b: &[f64; 3]) -> bool {
        for room in &self.rooms {
            for (axis, c) in room.faces() {
                let (da, db) = (a[axis] - c, b[axis] - c);
                if (da > EPS && db < -EPS) || (da < -EPS && db > EPS) {
                    let t = da / (da - db);
                    let x: [f64; 3] = std::array::from_fn(|k| a[k] + t * (b[k] - a[k]));
                    if room.face_contains(axis, &x) && !self.in_opening(axis, &x) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// LoS plus first-order reflections off the faces of the user's room.
    pub fn geometric_paths(&self, ap: usize, user: usize) -> Result<Vec<GeometricPath>> {
        let a = self.aps.get(ap).ok_or_else(|| Error::Index(format!("access point {ap}")))?;
        let u = *self.users.get(user).ok_or_else(|| Error::Index(format!("user {user}")))?;
        let room = self
            .room_of(&u)
            .map(|r| self.rooms[r])
            .ok_or_else(|| Error::Config(format!("user {user} is outside every room")))?;
        let p = a.position;
        let mut out = Vec::new();
        if self.segment_clear(&p, &u) {
            let d = sub3(&u, &p);
            let len = norm3(&d);
            if len > 0.0 {
                out.push(GeometricPath {
                    kind: PathLabel::LoS,
                    length_m: len,
                    bounces: 0,
                    aoa_global: d.map(|v| v / len),
                    aod_global: d.map(|v| -v / len),
                });
            }
        }
        for (axis, c) in room.faces() {
            let (dp, du) = (p[axis] - c, u[axis] - c);
            if !((dp > EPS && du > EPS) || (dp < -EPS && du < -EPS)) {
                continue;
            }
            let mut image = u;
            image[axis] = 2.0 * c - u[axis];
            let t = dp / (dp + du);
            let x: [f64; 3] = std::array::from_fn(|k| p[k] + t * (image[k] - p[k]));
            if !room.face_contains(axis, &x) || self.in_opening(axis, &x) {
                continue;
            }
            if !self.segment_clear(&p, &x) || !self.segment_clear(&x, &u) {
                continue;
            }
            let d = sub3(&image, &p);
            let len = norm3(&d);
            let back = sub3(&x, &u);
            let back_len = norm3(&back);
            out.push(GeometricPath {
                kind: if axis == 2 { PathLabel::FloorCeiling } else { PathLabel::Wall },
                length_m: len,
                bounces: 1,
                aoa_global: d.map(|v| v / len),
                aod_global: back.map(|v| v / back_len),
            });
        }
        if self.backside_culling {
            out.retain(|g| {
                self.aps[ap].orientation.to_local(&g.aoa_global)[2] >= 0.0
                    && self.user_orientation.to_local(&g.aod_global)[2] >= 0.0
            });
        }
        out.sort_by(|x, y| x.length_m.total_cmp(&y.length_m));
        Ok(out)
    }

    fn amplitude(&self, g: &GeometricPath) -> f64 {
        self.carrier_wavelength_m / (4.0 * PI * g.length_m)
            * 10f64.powf(-self.reflection_loss_db * g.bounces as f64 / 20.0)
    }

    /// Paths between access point `ap` and user `user` in array-local frames,
    /// sorted by delay. Phases and clutter are drawn from `rng`.
    pub fn trace_paths<R: Rng + ?Sized>(&self, ap: usize, user: usize, rng: &mut R) -> Result<Vec<TracedPath>> {
        let geo = self.geometric_paths(ap, user)?;
        let ap_or = self.aps[ap].orientation;
        let mut out = Vec::with_capacity(geo.len() + self.clutter_paths);
        for g in &geo {
            let aoa = UnitDirection::from_vector(ap_or.to_local(&g.aoa_global))?;
            let aod = UnitDirection::from_vector(self.user_orientation.to_local(&g.aod_global))?;
            let phase = rng.random_range(0.0..2.0 * PI);
            out.push(TracedPath {
                path: Path {
                    gain: C64::from_polar(self.amplitude(g), phase),
                    delay_s: g.length_m / SPEED_OF_LIGHT,
                    aoa,
                    aod,
                },
                kind: g.kind,
            });
        }
        if self.clutter_paths > 0 && !geo.is_empty() {
            let strongest = geo.iter().map(|g| self.amplitude(g)).fold(0.0, f64::max);
            let amp = strongest * 10f64.powf(self.clutter_rel_db / 20.0);
            let shortest = geo[0].length_m;
            for _ in 0..self.clutter_paths {
                let len = shortest * rng.random_range(1.2..2.5);
                let aoa = random_front(rng);
                let aod = random_front(rng);
                let phase = rng.random_range(0.0..2.0 * PI);
                out.push(TracedPath {
                    path: Path {
                        gain: C64::from_polar(amp, phase),
                        delay_s: len / SPEED_OF_LIGHT,
                        aoa,
                        aod,
                    },
                    kind: PathLabel::Spurious,
                });
            }
        }
        out.sort_by(|x, y| x.path.delay_s.total_cmp(&y.path.delay_s));
        Ok(out)
    }

    /// Total traced power from `ap` to `user`, excluding clutter.
    pub fn received_power(&self, ap: usize, user: usize) -> Result<f64> {
        Ok(self
            .geometric_paths(ap, user)?
            .iter()
            .map(|g| self.amplitude(g).powi(2))
            .sum())
    }

    /// Access point with the highest received power; ties go to the lowest index.
    pub fn associate_ap(&self, user: usize) -> Result<usize> {
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for ap in 0..self.aps.len() {
            let p = self.received_power(ap, user)?;
            if p > best_p {
                best_p = p;
                best = ap;
            }
        }
        Ok(best)
    }
}

fn random_front<R: Rng + ?Sized>(rng: &mut R) -> UnitDirection {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.05..1.0),
        ];
        let n = norm3(&v);
        if n <= 1.0 {
            return UnitDirection { x: v[0] / n, y: v[1] / n, z: v[2] / n };
        }
    }
}

/// Uniform clock offset in `[0, range_s)`.
pub fn sample_clock_offset<R: Rng + ?Sized>(rng: &mut R, range_s: f64) -> Result<f64> {
    if !(range_s.is_finite() && range_s > 0.0) {
        return Err(Error::Config(format!("clock offset range must be positive, got {range_s}")));
    }
    Ok(rng.random_range(0.0..range_s))
}

/// `count` points evenly spaced by arc length along a polyline, endpoints included.
pub fn polyline_points(vertices: &[[f64; 3]], count: usize) -> Vec<[f64; 3]> {
    if vertices.is_empty() || count == 0 {
        return Vec::new();
    }
    if count == 1 || vertices.len() == 1 {
        return vec![vertices[0]; count.min(1)];
    }
    let seg: Vec<f64> = vertices.windows(2).map(|w| norm3(&sub3(&w[1], &w[0]))).collect();
    let total: f64 = seg.iter().sum();
    (0..count)
        .map(|i| {
            let mut s = total * i as f64 / (count - 1) as f64;
            for (k, &len) in seg.iter().enumerate() {
                if s <= len || k == seg.len() - 1 {
                    let t = if len > 0.0 { (s / len).min(1.0) } else { 0.0 };
                    let (a, b) = (vertices[k], vertices[k + 1]);
                    return std::array::from_fn(|j| a[j] + t * (b[j] - a[j]));
                }
                s -= len;
            }
            unreachable!()
        })
        .collect()
}

pub const DEFAULT_USER_COUNT: usize = 218;

/// Two rooms (6 x 5 x 3 m and 4 x 5 x 3 m) joined by a doorway in the wall at
/// x = 6, one wall-mounted access point per room at 2 m height, and 218 users
/// at 1 m height along a path through both rooms.
pub fn default_scene() -> RoomScene {
    let vertices = [
        [1.0, 1.0, 1.0],
        [4.5, 1.0, 1.0],
        [5.0, 2.5, 1.0],
        [7.0, 2.5, 1.0],
        [9.0, 4.0, 1.0],
    ];
    RoomScene {
        rooms: vec![
            RoomBox {
                min: [0.0, 0.0, 0.0],
                max: [6.0, 5.0, 3.0],
            },
            RoomBox {
                min: [6.0, 0.0, 0.0],
                max: [10.0, 5.0, 3.0],
            },
        ],
        openings: vec![Opening {
            axis: 0,
            coord: 6.0,
            lo: [2.0, 0.0],
            hi: [3.0, 2.1],
        }],
        aps: vec![
            AccessPoint {
                position: [0.05, 2.5, 2.0],
                orientation: Orientation::wall_facing([1.0, 0.0]).expect("non-zero normal"),
            },
            AccessPoint {
                position: [9.95, 2.5, 2.0],
                orientation: Orientation::wall_facing([-1.0, 0.0]).expect("non-zero normal"),
            },
        ],
        carrier_wavelength_m: SPEED_OF_LIGHT / 60e9,
        reflection_loss_db: 6.0,
        users: polyline_points(&vertices, DEFAULT_USER_COUNT),
        user_orientation: Orientation::IDENTITY,
        backside_culling: true,
        clutter_paths: 0,
        clutter_rel_db: -20.0,
    }
}
