//! Scalar-to-vector feature encoders.
//!
//! Each encoder maps mixed relative features `fp: [rows, C]` to a vector
//! field `[rows, C*m]` laid out channel-major (`c*m + d`). The rotation
//! encoder lifts every scalar `zx` to `(0, zx, 0)` and turns it with
//! `Rot_z(alpha) * Rot_x(beta)`, where the x-rotation matrix is
//! `[[1, 0, 0], [0, sin b, -cos b], [0, cos b, sin b]]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::{
    in_layer, Activation, BackwardCtx, GradTape, Linear, LinearBnAct, Mode, Op, ParamStore,
    Tensor, Var,
};

pub const DIRECTION_EPS: f64 = 1e-8;

/// Closed form of `Rot_z(alpha) Rot_x(beta) (0, zx, 0)`.
pub fn rotate3d(zx: f64, alpha: f64, beta: f64) -> [f64; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    [-zx * sa * sb, zx * ca * sb, zx * cb]
}

/// One-angle analogue: `Rot_z(alpha) (0, zx)`.
pub fn rotate2d(zx: f64, alpha: f64) -> [f64; 2] {
    let (sa, ca) = alpha.sin_cos();
    [-zx * sa, zx * ca]
}

/// The matrix `Rot_z(alpha) Rot_x(beta)` applied by [`rotate3d`].
pub fn rotation_matrix(alpha: f64, beta: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let rz = [[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, sb, -cb], [0.0, cb, sb]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|t| rz[i][t] * rx[t][j]).sum();
        }
    }
    r
}

/// Per-neighbor, per-channel `m`-vectors, `[rows][channels][m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub values: Vec<f64>,
    pub channels: usize,
    pub m: usize,
}

impl VectorField {
    pub fn from_tensor(t: &Tensor, m: usize) -> Result<Self> {
        if m == 0 || !t.cols().is_multiple_of(m) {
            return Err(Error::Size(format!("width {} is not a multiple of m={m}", t.cols())));
        }
        Ok(Self {
            values: t.data().to_vec(),
            channels: t.cols() / m,
            m,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.len() / (self.channels * self.m).max(1)
    }

    pub fn vector(&self, row: usize, channel: usize) -> &[f64] {
        &self.values[(row * self.channels + channel) * self.m..][..self.m]
    }

    pub fn norm(&self, row: usize, channel: usize) -> f64 {
        self.vector(row, channel).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn check_vector_dim(m: usize) -> Result<()> {
    if (1..=3).contains(&m) {
        Ok(())
    } else {
        Err(Error::Config(format!("vector dimension must be 1, 2 or 3, got {m}")))
    }
}

struct RotateExpandOp {
    m: usize,
    /// `(sin, cos)` of every angle from the forward pass.
    trig: Vec<(f64, f64)>,
}

impl Op for RotateExpandOp {
    fn name(&self) -> &'static str {
        "rotate_expand"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let zx = ctx.inputs[0];
        let c = zx.cols();
        let rows = zx.rows();
        let g = ctx.grad.data();
        if self.m == 1 {
            return Ok(vec![Some(ctx.grad.clone().reshape(zx.shape().to_vec())?)]);
        }
        let na = self.m - 1;
        let mut dz = vec![0.0; rows * c];
        let mut da = vec![0.0; rows * c * na];
        for r in 0..rows {
            for ch in 0..c {
                let z = zx.data()[r * c + ch];
                let (sa, ca) = self.trig[r * c * na + ch];
                let go = &g[(r * c + ch) * self.m..][..self.m];
                if self.m == 2 {
                    dz[r * c + ch] = -go[0] * sa + go[1] * ca;
                    da[r * c * na + ch] = -go[0] * z * ca - go[1] * z * sa;
                } else {
                    let (sb, cb) = self.trig[r * c * na + c + ch];
                    dz[r * c + ch] = -go[0] * sa * sb + go[1] * ca * sb + go[2] * cb;
                    da[r * c * na + ch] = -go[0] * z * ca * sb - go[1] * z * sa * sb;
                    da[r * c * na + c + ch] =
                        -go[0] * z * sa * cb + go[1] * z * ca * cb - go[2] * z * sb;
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(zx.shape().to_vec(), dz)?),
            Some(Tensor::new(ctx.inputs[1].shape().to_vec(), da)?),
        ])
    }
}

struct DirectionFieldOp {
    m: usize,
}

impl Op for DirectionFieldOp {
    fn name(&self) -> &'static str {
        "direction_field"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (modulus, raw) = (ctx.inputs[0], ctx.inputs[1]);
        let m = self.m;
        let g = ctx.grad.data();
        let mut dmod = vec![0.0; modulus.numel()];
        let mut draw = vec![0.0; raw.numel()];
        for (e, &s) in modulus.data().iter().enumerate() {
            let d = &raw.data()[e * m..(e + 1) * m];
            let go = &g[e * m..(e + 1) * m];
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = n + DIRECTION_EPS;
            dmod[e] = d.iter().zip(go).map(|(d, g)| d * g).sum::<f64>() / denom;
            // u = d / (|d| + eps); d/dd of s*u
            let dot: f64 = d.iter().zip(go).map(|(d, g)| d * g).sum();
            for t in 0..m {
                let mut v = s * go[t] / denom;
                if n > 0.0 {
                    v -= s * d[t] * dot / (n * denom * denom);
                }
                draw[e * m + t] = v;
            }
        }
        Ok(vec![
            Some(Tensor::new(modulus.shape().to_vec(), dmod)?),
            Some(Tensor::new(raw.shape().to_vec(), draw)?),
        ])
    }
}

impl GradTape {
    /// Expands each `zx` scalar into an `m`-vector. `angles` holds `m - 1`
    /// blocks of `C` columns (`alpha`, then `beta`); it is ignored for `m = 1`.
    pub fn rotate_expand(&mut self, zx: Var, angles: Option<Var>, m: usize) -> Result<Var> {
        check_vector_dim(m)?;
        let zt = self.value(zx);
        let (rows, c) = (zt.rows(), zt.cols());
        if m == 1 {
            let out = zt.clone().reshape(vec![rows, c])?;
            return self.record(Box::new(RotateExpandOp { m, trig: Vec::new() }), &[zx], out);
        }
        let angles = angles.ok_or_else(|| Error::Config(format!("m={m} needs rotation angles")))?;
        let at = self.value(angles);
        let na = m - 1;
        if at.rows() != rows || at.cols() != c * na {
            return Err(Error::Size(format!(
                "expected {rows} x {} angles, got {:?}",
                c * na,
                at.shape()
            )));
        }
        let trig: Vec<(f64, f64)> = at.data().iter().map(|a| a.sin_cos()).collect();
        let mut out = Vec::with_capacity(rows * c * m);
        for r in 0..rows {
            for ch in 0..c {
                let z = zt.data()[r * c + ch];
                let (sa, ca) = trig[r * c * na + ch];
                if m == 2 {
                    out.extend_from_slice(&[-z * sa, z * ca]);
                } else {
                    let (sb, cb) = trig[r * c * na + c + ch];
                    out.extend_from_slice(&[-z * sa * sb, z * ca * sb, z * cb]);
                }
            }
        }
        let out = Tensor::new(vec![rows, c * m], out)?;
        self.record(Box::new(RotateExpandOp { m, trig }), &[zx, angles], out)
    }

    /// `modulus * raw / (|raw| + eps)` per channel.
    pub fn direction_field(&mut self, modulus: Var, raw: Var, m: usize) -> Result<Var> {
        let (mt, rt) = (self.value(modulus), self.value(raw));
        if rt.numel() != mt.numel() * m {
            return Err(Error::Size("direction_field: width mismatch".into()));
        }
        let mut out = Vec::with_capacity(rt.numel());
        for (s, d) in mt.data().iter().zip(rt.data().chunks_exact(m)) {
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt() + DIRECTION_EPS;
            out.extend(d.iter().map(|v| s * v / n));
        }
        let out = Tensor::new(vec![mt.rows(), mt.cols() * m], out)?;
        self.record(Box::new(DirectionFieldOp { m }), &[modulus, raw], out)
    }
}

/// `fp = relu(rel_feat + linear(rel_pos))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixFeatures {
    pub pos: Linear,
}

impl MixFeatures {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            pos: Linear::new(format!("{prefix}.pos"), 3, channels, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.pos.init(store, rng);
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        rel_feat: Var,
        rel_pos: Var,
    ) -> Result<Var> {
        let p = self.pos.forward(tape, store, rel_pos)?;
        let s = in_layer(&self.pos.prefix, tape.add(rel_feat, p))?;
        in_layer(&self.pos.prefix, tape.relu(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Linear modulus and two (or one) ReLU(BN(Linear)) angles, then rotation.
    Rotation,
    /// Linear → BN → ReLU → Linear producing `C*m` values.
    Mlp,
    /// Linear modulus times an MLP-predicted unit direction.
    Direction,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Mlp, EncoderKind::Direction, EncoderKind::Rotation];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Rotation => "rotation",
            EncoderKind::Mlp => "mlp",
            EncoderKind::Direction => "direction",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum EncoderLayers {
    Rotation {
        zx: Linear,
        angles: Option<LinearBnAct>,
    },
    Mlp {
        hidden: LinearBnAct,
        out: Linear,
    },
    Direction {
        modulus: Linear,
        hidden: LinearBnAct,
        out: Linear,
    },
}

/// Vector encoder `H_v` over `channels` channels producing `m`-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorEncoder {
    pub kind: EncoderKind,
    pub channels: usize,
    pub m: usize,
    layers: EncoderLayers,
}

impl VectorEncoder {
    pub fn new(prefix: &str, kind: EncoderKind, channels: usize, m: usize) -> Result<Self> {
        check_vector_dim(m)?;
        let c = channels;
        let relu = Some(Activation::Relu);
        let layers = match kind {
            EncoderKind::Rotation => EncoderLayers::Rotation {
                zx: Linear::new(format!("{prefix}.zx"), c, c, true),
                angles: (m > 1)
                    .then(|| LinearBnAct::new(&format!("{prefix}.angles"), c, c * (m - 1), relu)),
            },
            EncoderKind::Mlp => EncoderLayers::Mlp {
                hidden: LinearBnAct::new(&format!("{prefix}.hidden"), c, c, relu),
                out: Linear::new(format!("{prefix}.out"), c, c * m, true),
            },
            EncoderKind::Direction => EncoderLayers::Direction {
                modulus: Linear::new(format!("{prefix}.modulus"), c, c, true),
                hidden: LinearBnAct::new(&format!("{prefix}.hidden"), c, c, relu),
                out: Linear::new(format!("{prefix}.out"), c, c * m, true),
            },
        };
        Ok(Self {
            kind,
            channels,
            m,
            layers,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        match &self.layers {
            EncoderLayers::Rotation { zx, angles } => {
                zx.init(store, rng);
                if let Some(a) = angles {
                    a.init(store, rng);
                }
            }
            EncoderLayers::Mlp { hidden, out } => {
                hidden.init(store, rng);
                out.init(store, rng);
            }
            EncoderLayers::Direction {
                modulus,
                hidden,
                out,
            } => {
                modulus.init(store, rng);
                hidden.init(store, rng);
                out.init(store, rng);
            }
        }
    }

    /// Name of the linear whose output scales the field (zx or modulus); the
    /// final linear for the MLP encoder.
    pub fn magnitude_layer(&self) -> &Linear {
        match &self.layers {
            EncoderLayers::Rotation { zx, .. } => zx,
            EncoderLayers::Mlp { out, .. } => out,
            EncoderLayers::Direction { modulus, .. } => modulus,
        }
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        fp: Var,
        mode: Mode,
    ) -> Result<Var> {
        match &self.layers {
            EncoderLayers::Rotation { zx, angles } => {
                let z = zx.forward(tape, store, fp)?;
                let a = match angles {
                    Some(a) => Some(a.forward(tape, store, fp, mode)?),
                    None => None,
                };
                in_layer(&zx.prefix, tape.rotate_expand(z, a, self.m))
            }
            EncoderLayers::Mlp { hidden, out } => {
                let h = hidden.forward(tape, store, fp, mode)?;
                out.forward(tape, store, h)
            }
            EncoderLayers::Direction {
                modulus,
                hidden,
                out,
            } => {
                let s = modulus.forward(tape, store, fp)?;
                let h = hidden.forward(tape, store, fp, mode)?;
                let d = out.forward(tape, store, h)?;
                in_layer(&modulus.prefix, tape.direction_field(s, d, self.m))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rotate3d_examples() {
        assert!(close(&rotate3d(1.0, 0.0, 0.0), &[0.0, 0.0, 1.0], 1e-15));
        assert!(close(&rotate3d(1.0, 0.0, FRAC_PI_2), &[0.0, 1.0, 0.0], 1e-15));
        assert!(close(&rotate3d(2.0, FRAC_PI_2, FRAC_PI_2), &[-2.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn rotate2d_examples() {
        assert!(close(&rotate2d(1.0, 0.0), &[0.0, 1.0], 1e-15));
        assert!(close(&rotate2d(1.0, FRAC_PI_2), &[-1.0, 0.0], 1e-15));
    }

    #[test]
    fn rotation_matrix_maps_y_axis_like_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (z, a, b) = (
                rng.random_range(-3.0..3.0),
                rng.random_range(-7.0..7.0),
                rng.random_range(-7.0..7.0),
            );
            let r = rotation_matrix(a, b);
            let via_matrix = [r[0][1] * z, r[1][1] * z, r[2][1] * z];
            assert!(close(&via_matrix, &rotate3d(z, a, b), 1e-12));
        }
    }

    #[test]
    fn invalid_vector_dim_is_config_error() {
        assert!(matches!(
            VectorEncoder::new("e", EncoderKind::Rotation, 4, 4),
            Err(Error::Config(_))
        ));
        assert!(matches!(check_vector_dim(0), Err(Error::Config(_))));
    }

    #[test]
    fn direction_field_normalizes() {
        let mut tape = GradTape::new();
        let s = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let d = tape.constant(Tensor::new(vec![1, 3], vec![3.0, 0.0, 0.0]).unwrap());
        let v = tape.direction_field(s, d, 3).unwrap();
        assert!(close(tape.value(v).data(), &[2.0, 0.0, 0.0], 1e-8));
    }
}
