//! Synthetic labeled point clouds and plain-text point I/O.
//!
//! Scenes are made of randomly posed planes, spheres and open cylinders.
//! Each point is labeled with the index of its primitive's kind in the
//! requested kind list.

mod text;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointSetBatch;
use crate::train::{Dataset, Sample};

pub use text::{
    format_points, load_manifest_dataset, load_manifest_split, parse_points, read_manifest, read_points, write_manifest, write_points,
    ManifestEntry,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Plane,
    Sphere,
    Cylinder,
}

impl Primitive {
    pub const ALL: [Primitive; 3] = [Primitive::Plane, Primitive::Sphere, Primitive::Cylinder];
}

/// Parameters of one synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub num_points: usize,
    pub num_primitives: usize,
    pub kinds: Vec<Primitive>,
    /// Standard deviation of the per-coordinate Gaussian noise. Each noise
    /// vector is clipped to length `3 * noise`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_points: 512,
            num_primitives: 3,
            kinds: Primitive::ALL.to_vec(),
            noise: 0.005,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::Config("scene needs at least one primitive kind".into()));
        }
        if self.num_primitives == 0 || self.num_points < self.num_primitives {
            return Err(Error::Config(format!(
                "need num_points >= num_primitives >= 1, got {} and {}",
                self.num_points, self.num_primitives
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// A posed primitive. `axis` is the plane normal or the cylinder axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrimitiveInstance {
    pub kind: Primitive,
    pub class: usize,
    pub center: [f64; 3],
    pub axis: [f64; 3],
    /// Plane side, sphere radius or cylinder radius.
    pub size: f64,
    /// Cylinder height; unused otherwise.
    pub height: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(v);
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Two unit vectors orthogonal to `a` and to each other.
fn tangent_basis(a: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let d = dot(helper, a);
    let u = sub(helper, [a[0] * d, a[1] * d, a[2] * d]);
    let n = norm(u);
    let u = [u[0] / n, u[1] / n, u[2] / n];
    let v = [
        a[1] * u[2] - a[2] * u[1],
        a[2] * u[0] - a[0] * u[2],
        a[0] * u[1] - a[1] * u[0],
    ];
    (u, v)
}

impl PrimitiveInstance {
    fn random(kind: Primitive, class: usize, center: [f64; 3], rng: &mut impl Rng) -> Self {
        let axis = unit_vector(rng);
        let (size, height) = match kind {
            Primitive::Plane => (rng.random_range(0.8..1.2), 0.0),
            Primitive::Sphere => (rng.random_range(0.25..0.4), 0.0),
            Primitive::Cylinder => (rng.random_range(0.15..0.25), rng.random_range(0.6..1.0)),
        };
        Self {
            kind,
            class,
            center,
            axis,
            size,
            height,
        }
    }

    /// A uniformly distributed point on the surface.
    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        let c = self.center;
        let (u, v) = tangent_basis(self.axis);
        let combine = |a: f64, b: f64, h: f64| {
            [0, 1, 2].map(|d| c[d] + a * u[d] + b * v[d] + h * self.axis[d])
        };
        match self.kind {
            Primitive::Plane => {
                let half = self.size / 2.0;
                combine(rng.random_range(-half..=half), rng.random_range(-half..=half), 0.0)
            }
            Primitive::Sphere => {
                let d = unit_vector(rng);
                [0, 1, 2].map(|i| c[i] + self.size * d[i])
            }
            Primitive::Cylinder => {
                let t = rng.random_range(0.0..2.0 * PI);
                let h = rng.random_range(-self.height / 2.0..=self.height / 2.0);
                combine(self.size * t.cos(), self.size * t.sin(), h)
            }
        }
    }

    /// Euclidean distance from `p` to the surface.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let r = sub(p, self.center);
        match self.kind {
            Primitive::Sphere => (norm(r) - self.size).abs(),
            Primitive::Plane => {
                let (u, v) = tangent_basis(self.axis);
                let half = self.size / 2.0;
                let a = (dot(r, u).abs() - half).max(0.0);
                let b = (dot(r, v).abs() - half).max(0.0);
                (a * a + b * b + dot(r, self.axis).powi(2)).sqrt()
            }
            Primitive::Cylinder => {
                let h = dot(r, self.axis);
                let radial = norm(sub(r, [0, 1, 2].map(|d| h * self.axis[d])));
                let dh = (h.abs() - self.height / 2.0).max(0.0);
                ((radial - self.size).powi(2) + dh * dh).sqrt()
            }
        }
    }
}

/// A generated scene together with the primitives it was sampled from.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: PointSetBatch,
    pub primitives: Vec<PrimitiveInstance>,
}

fn noise_vector(sigma: f64, rng: &mut impl Rng) -> [f64; 3] {
    if sigma == 0.0 {
        return [0.0; 3];
    }
    let v: [f64; 3] = [0, 1, 2].map(|_| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    });
    let n = norm(v);
    let cap = 3.0 * sigma;
    if n > cap {
        v.map(|x| x * cap / n)
    } else {
        v
    }
}

/// Centers at least `MIN_SEPARATION` apart where possible.
fn place_centers(count: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    const MIN_SEPARATION: f64 = 1.0;
    let extent = 0.6 * (count as f64).sqrt();
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best = None;
        for _ in 0..200 {
            let c = [
                rng.random_range(-extent..=extent),
                rng.random_range(-extent..=extent),
                rng.random_range(-0.2..=0.2),
            ];
            let gap = out.iter().map(|o| norm(sub(c, *o))).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(g, _)| gap > g) {
                best = Some((gap, c));
            }
            if gap >= MIN_SEPARATION {
                break;
            }
        }
        out.push(best.expect("at least one attempt").1);
    }
    out
}

/// Samples a scene. Primitive `i` has kind `kinds[(i + offset) % kinds.len()]`
/// for a random offset, and points are split evenly across primitives with
/// the remainder going to the first ones.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offset = rng.random_range(0..spec.kinds.len());
    let centers = place_centers(spec.num_primitives, &mut rng);
    let primitives: Vec<PrimitiveInstance> = centers
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let class = (i + offset) % spec.kinds.len();
            PrimitiveInstance::random(spec.kinds[class], class, c, &mut rng)
        })
        .collect();
    let mut pos = Vec::with_capacity(spec.num_points * 3);
    let mut labels = Vec::with_capacity(spec.num_points);
    for (i, prim) in primitives.iter().enumerate() {
        let share = spec.num_points / spec.num_primitives + usize::from(i < spec.num_points % spec.num_primitives);
        for _ in 0..share {
            let p = prim.sample(&mut rng);
            let e = noise_vector(spec.noise, &mut rng);
            pos.extend([p[0] + e[0], p[1] + e[1], p[2] + e[2]]);
            labels.push(prim.class);
        }
    }
    let cloud = PointSetBatch::from_positions(1, spec.num_points, pos, Some(labels))?;
    Ok(Scene { cloud, primitives })
}

pub fn gen_segmentation_scene(spec: &SceneSpec) -> Result<PointSetBatch> {
    Ok(gen_scene(spec)?.cloud)
}

/// Parameters of a classification set: one centered primitive per cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassificationSpec {
    pub num_clouds: usize,
    pub num_points: usize,
    pub kinds: Vec<Primitive>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            num_clouds: 64,
            num_points: 128,
            kinds: Primitive::ALL.to_vec(),
            noise: 0.005,
            seed: 0,
        }
    }
}

/// Cloud `i` shows `kinds[i % kinds.len()]` and is labeled with that index
/// on every point.
pub fn gen_classification_set(spec: &ClassificationSpec) -> Result<Vec<(PointSetBatch, usize)>> {
    SceneSpec {
        num_points: spec.num_points,
        num_primitives: 1,
        kinds: spec.kinds.clone(),
        noise: spec.noise,
        seed: spec.seed,
    }
    .validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.num_clouds)
        .map(|i| {
            let class = i % spec.kinds.len();
            let prim = PrimitiveInstance::random(spec.kinds[class], class, [0.0; 3], &mut rng);
            let mut pos = Vec::with_capacity(spec.num_points * 3);
            for _ in 0..spec.num_points {
                let p = prim.sample(&mut rng);
                let e = noise_vector(spec.noise, &mut rng);
                pos.extend([p[0] + e[0], p[1] + e[1], p[2] + e[2]]);
            }
            let cloud = PointSetBatch::from_positions(1, spec.num_points, pos, Some(vec![class; spec.num_points]))?;
            Ok((cloud, class))
        })
        .collect()
}

/// Seeds for `count` scenes drawn from one base seed.
pub fn scene_seeds(base: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..count).map(|_| rng.random()).collect()
}

/// Train and validation scenes built from `template` with per-scene seeds
/// derived from `template.seed`.
pub fn segmentation_dataset(template: &SceneSpec, train: usize, val: usize) -> Result<Dataset> {
    let scenes = scene_seeds(template.seed, train + val)
        .into_iter()
        .map(|seed| {
            gen_segmentation_scene(&SceneSpec {
                seed,
                ..template.clone()
            })
            .map(Sample::segmentation)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scenes = scenes.into_iter();
    Ok(Dataset {
        train: scenes.by_ref().take(train).collect(),
        val: scenes.collect(),
    })
}

/// Train and validation clouds for classification; the validation set uses
/// a seed derived from `spec.seed`.
pub fn classification_dataset(spec: &ClassificationSpec, val: usize) -> Result<Dataset> {
    let to_samples = |v: Vec<(PointSetBatch, usize)>| {
        v.into_iter()
            .map(|(c, y)| Sample::classification(c, y))
            .collect::<Vec<_>>()
    };
    let train = to_samples(gen_classification_set(spec)?);
    let val = to_samples(gen_classification_set(&ClassificationSpec {
        num_clouds: val,
        seed: scene_seeds(spec.seed, 1)[0],
        ..spec.clone()
    })?);
    Ok(Dataset { train, val })
}

#[cfg(test)]
mod tests;
