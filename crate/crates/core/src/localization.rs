//! Path classification and closed-form position / clock-offset estimation.
//!
//! Directions are expected in a z-up frame centered on the access point. Each
//! non-spurious path gives a linear constraint on `z = [u; c τ0]`:
//! `χ_l (u − θ_l (Δr_l + c τ0)) = 0`, with `Δr_l = c Δτ_l` and `χ_l` selecting
//! all axes (LoS), x and y (floor/ceiling) or z (wall). The weighted sum of
//! squared residuals is `z^T A z − 2 b^T z + c` and is minimized by `A⁻¹ b`.

use nalgebra::{Matrix4, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::channel::{Path, UnitDirection};
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Solves with a reciprocal condition number below this are rejected.
pub const MIN_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub r_az: f64,
    pub r_el: f64,
    /// Swap the elevation tests of LoS and floor/ceiling paths.
    #[serde(default)]
    pub alternate_mapping: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            r_az: 0.12,
            r_el: 0.12,
            alternate_mapping: false,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_az > 0.0 && self.r_az <= 2.0 && self.r_el > 0.0 && self.r_el <= 1.0) {
            return Err(Error::Config(format!(
                "classifier thresholds out of range: r_az={}, r_el={}",
                self.r_az, self.r_el
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathLabel {
    LoS,
    Wall,
    FloorCeiling,
    Spurious,
}

/// `(azimuth, elevation)` in radians; the azimuth of a vertical vector is 0.
pub fn to_spherical(dir: &UnitDirection) -> (f64, f64) {
    let az = if dir.x == 0.0 && dir.y == 0.0 {
        0.0
    } else {
        let a = dir.y.atan2(dir.x);
        if a <= -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            a
        }
    };
    (az, dir.z.clamp(-1.0, 1.0).asin())
}

pub fn classify(path: &Path, cfg: &ClassifierConfig) -> PathLabel {
    let (aoa_az, aoa_el) = to_spherical(&path.aoa);
    let (aod_az, aod_el) = to_spherical(&path.aod);
    let sum_el = (aoa_el + aod_el).sin().abs() < cfg.r_el;
    let diff_el = (aoa_el - aod_el).sin().abs() < cfg.r_el;
    let opposed = (aoa_az - aod_az).cos() < cfg.r_az - 1.0;
    let (los_el, fc_el) = if cfg.alternate_mapping {
        (diff_el, sum_el)
    } else {
        (sum_el, diff_el)
    };
    if los_el && opposed {
        PathLabel::LoS
    } else if fc_el && opposed {
        PathLabel::FloorCeiling
    } else if sum_el {
        PathLabel::Wall
    } else {
        PathLabel::Spurious
    }
}

/// `w_l = |α_l|²`.
pub fn weights_from_gains(paths: &[Path]) -> Vec<f64> {
    paths.iter().map(Path::power).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionFix {
    /// Position relative to the access point, meters.
    pub u: [f64; 3],
    /// `c τ0`, meters.
    pub clock_offset_m: f64,
    pub condition_number: f64,
    pub labels: Vec<PathLabel>,
    pub weights: Vec<f64>,
    /// Value of the weighted quadratic at the solution.
    #[serde(skip)]
    pub cost: f64,
}

fn selector(label: PathLabel) -> &'static [usize] {
    match label {
        PathLabel::LoS => &[0, 1, 2],
        PathLabel::FloorCeiling => &[0, 1],
        PathLabel::Wall => &[2],
        PathLabel::Spurious => &[],
    }
}

/// Accumulates `(A, b, c)` of the weighted quadratic.
pub fn normal_equations(paths: &[Path], labels: &[PathLabel], weights: &[f64]) -> Result<(Matrix4<f64>, Vector4<f64>, f64)> {
    if paths.len() != labels.len() || paths.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} paths, {} labels, {} weights",
            paths.len(),
            labels.len(),
            weights.len()
        )));
    }
    let mut a = Matrix4::zeros();
    let mut b = Vector4::zeros();
    let mut c = 0.0;
    for ((p, &label), &w) in paths.iter().zip(labels).zip(weights) {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Config(format!("path weight {w} must be finite and >= 0")));
        }
        let theta = Vector3::new(p.aoa.x, p.aoa.y, p.aoa.z);
        let dr = p.delay_s * SPEED_OF_LIGHT;
        for &axis in selector(label) {
            // row of χ U: e_axis^T [I3, −θ]
            let mut row = Vector4::zeros();
            row[axis] = 1.0;
            row[3] = -theta[axis];
            let rhs = dr * theta[axis];
            a += row * row.transpose() * w;
            b += row * (rhs * w);
            c += w * rhs * rhs;
        }
    }
    Ok((a, b, c))
}

pub fn solve_position(paths: &[Path], labels: &[PathLabel], weights: &[f64]) -> Result<PositionFix> {
    let (a, b, c) = normal_equations(paths, labels, weights)?;
    let eig = SymmetricEigen::new(a);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    debug_assert!(lmin >= -1e-9 * lmax.abs().max(1.0), "A must be PSD");
    if !(lmax > 0.0) || lmin / lmax < MIN_RCOND {
        let names = ["x", "y", "z", "offset"];
        let null: Vec<String> = (0..4)
            .filter(|&i| !(lmax > 0.0) || eig.eigenvalues[i] / lmax < MIN_RCOND)
            .map(|i| {
                let v = eig.eigenvectors.column(i);
                let parts: Vec<String> = (0..4)
                    .filter(|&k| v[k].abs() > 1e-6)
                    .map(|k| format!("{:+.3}·{}", v[k], names[k]))
                    .collect();
                parts.join(" ")
            })
            .collect();
        return Err(Error::Unlocalizable(format!(
            "no constraint along [{}]",
            null.join("], [")
        )));
    }
    let z = eig.eigenvectors * eig.eigenvalues.map(|l| 1.0 / l).component_mul(&(eig.eigenvectors.transpose() * b));
    let cost = (c - b.dot(&z)).max(0.0);
    Ok(PositionFix {
        u: [z[0], z[1], z[2]],
        clock_offset_m: z[3],
        condition_number: lmax / lmin,
        labels: labels.to_vec(),
        weights: weights.to_vec(),
        cost,
    })
}

/// Classifies, weights by power and solves in one step.
pub fn localize(paths: &[Path], cfg: &ClassifierConfig) -> Result<PositionFix> {
    let labels: Vec<PathLabel> = paths.iter().map(|p| classify(p, cfg)).collect();
    solve_position(paths, &labels, &weights_from_gains(paths))
}
