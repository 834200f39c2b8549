//! Point-cloud perturbations used for training augmentation and for the
//! robustness harness.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointSetBatch;

pub const JITTER_SIGMA: f64 = 0.01;
pub const JITTER_CLIP: f64 = 0.05;

/// One deterministic or random change of point positions. Features and
/// labels are carried over unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    None,
    /// Rotation about the z axis by `angle` radians.
    RotateZ { angle: f64 },
    /// `offset` added to every coordinate.
    Shift { offset: f64 },
    /// Isotropic scaling about the origin.
    Scale { factor: f64 },
    /// Per-coordinate Gaussian noise clipped to `±clip`.
    Jitter { sigma: f64, clip: f64 },
}

impl Perturbation {
    pub fn label(&self) -> String {
        match self {
            Perturbation::None => "none".into(),
            Perturbation::RotateZ { angle } => format!("rotate_z_{:.0}deg", angle.to_degrees()),
            Perturbation::Shift { offset } => format!("shift_{offset:+}"),
            Perturbation::Scale { factor } => format!("scale_x{factor}"),
            Perturbation::Jitter { .. } => "jitter".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Perturbation::None => true,
            Perturbation::RotateZ { angle } => angle.is_finite(),
            Perturbation::Shift { offset } => offset.is_finite(),
            Perturbation::Scale { factor } => factor > 0.0 && factor.is_finite(),
            Perturbation::Jitter { sigma, clip } => sigma >= 0.0 && clip >= 0.0 && sigma.is_finite() && clip.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid perturbation {self:?}")))
        }
    }
}

/// The nine robustness columns: none, three z-rotations, two shifts, two
/// scales and jitter.
pub fn robustness_suite() -> Vec<Perturbation> {
    vec![
        Perturbation::None,
        Perturbation::RotateZ { angle: FRAC_PI_2 },
        Perturbation::RotateZ { angle: PI },
        Perturbation::RotateZ { angle: 3.0 * FRAC_PI_2 },
        Perturbation::Shift { offset: 0.2 },
        Perturbation::Shift { offset: -0.2 },
        Perturbation::Scale { factor: 0.8 },
        Perturbation::Scale { factor: 1.2 },
        Perturbation::Jitter {
            sigma: JITTER_SIGMA,
            clip: JITTER_CLIP,
        },
    ]
}

pub fn rotate_z(positions: &mut [f64], angle: f64) {
    let (s, c) = angle.sin_cos();
    for p in positions.chunks_exact_mut(3) {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
}

/// Applies `p` to every cloud of `cloud`. Only jitter draws from `rng`.
pub fn augment(cloud: &PointSetBatch, p: &Perturbation, rng: &mut impl Rng) -> Result<PointSetBatch> {
    p.validate()?;
    let mut pos = cloud.positions().to_vec();
    match *p {
        Perturbation::None => {}
        Perturbation::RotateZ { angle } => rotate_z(&mut pos, angle),
        Perturbation::Shift { offset } => pos.iter_mut().for_each(|v| *v += offset),
        Perturbation::Scale { factor } => pos.iter_mut().for_each(|v| *v *= factor),
        Perturbation::Jitter { sigma, clip } => {
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                for v in pos.iter_mut() {
                    *v += normal.sample(rng).clamp(-clip, clip);
                }
            }
        }
    }
    PointSetBatch::new(
        cloud.batch(),
        cloud.points(),
        cloud.channels(),
        pos,
        cloud.features().to_vec(),
        cloud.labels().map(<[usize]>::to_vec),
    )
}

/// Random training-time augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Uniform random rotation about z.
    pub rotate_z: bool,
    /// Uniform isotropic scale range.
    pub scale: Option<(f64, f64)>,
    /// Uniform shift in `±shift` per axis.
    pub shift: Option<f64>,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_z: true,
            scale: Some((0.9, 1.1)),
            shift: None,
            jitter_sigma: JITTER_SIGMA,
            jitter_clip: JITTER_CLIP,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotate_z: false,
            scale: None,
            shift: None,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.scale {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Config(format!("invalid scale range ({lo}, {hi})")));
            }
        }
        if let Some(s) = self.shift {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("invalid shift {s}")));
            }
        }
        Perturbation::Jitter {
            sigma: self.jitter_sigma,
            clip: self.jitter_clip,
        }
        .validate()
    }

    /// Draws and applies one random augmentation per cloud.
    pub fn apply(&self, cloud: &PointSetBatch, rng: &mut impl Rng) -> Result<PointSetBatch> {
        let mut pos = cloud.positions().to_vec();
        let normal = (self.jitter_sigma > 0.0)
            .then(|| Normal::new(0.0, self.jitter_sigma))
            .transpose()
            .map_err(|e| Error::Config(e.to_string()))?;
        for chunk in pos.chunks_exact_mut(cloud.points() * 3) {
            if self.rotate_z {
                rotate_z(chunk, rng.random_range(0.0..2.0 * PI));
            }
            if let Some((lo, hi)) = self.scale {
                let f = if hi > lo { rng.random_range(lo..hi) } else { lo };
                chunk.iter_mut().for_each(|v| *v *= f);
            }
            if let Some(s) = self.shift.filter(|&s| s > 0.0) {
                let d = [rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)];
                for p in chunk.chunks_exact_mut(3) {
                    for (v, dv) in p.iter_mut().zip(d) {
                        *v += dv;
                    }
                }
            }
            if let Some(n) = &normal {
                for v in chunk.iter_mut() {
                    *v += n.sample(rng).clamp(-self.jitter_clip, self.jitter_clip);
                }
            }
        }
        PointSetBatch::new(
            cloud.batch(),
            cloud.points(),
            cloud.channels(),
            pos,
            cloud.features().to_vec(),
            cloud.labels().map(<[usize]>::to_vec),
        )
    }
}
