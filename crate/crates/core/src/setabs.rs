//! Set-abstraction blocks: the max-pooled shared-MLP block, the
//! vector-oriented block with its aggregation variants, and inverse-distance
//! feature propagation.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, NeighborIndex, PointSetBatch};
use crate::nnops::{
    in_layer, Activation, BackwardCtx, BatchNorm, GradTape, Linear, LinearBnAct, Mode, Op,
    ParamStore, Reduction, Tensor, Var,
};
use crate::vecenc::{check_vector_dim, EncoderKind, MixFeatures, VectorEncoder};

pub const INTERP_EPS: f64 = 1e-8;
pub const INTERP_NEIGHBORS: usize = 3;

/// How the per-neighbor vector field is turned into per-center scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum over neighbors, per-channel `m -> 1` projection, channel mixing.
    SumGroupconv,
    /// Max over neighbors, per-channel projection, channel mixing.
    MaxGroupconv,
    /// Sum over neighbors, dense linear on the flattened `C*m` vector.
    SumFc,
    /// Max over neighbors, dense linear on the flattened `C*m` vector.
    MaxFc,
    /// Dense kernel over all neighbor slots and channels.
    Conv,
    /// Per-channel kernel with an independent `m`-vector per neighbor slot,
    /// then channel mixing.
    Groupconv,
}

impl Aggregation {
    pub const ALL: [Aggregation; 6] = [
        Aggregation::MaxFc,
        Aggregation::Conv,
        Aggregation::Groupconv,
        Aggregation::SumFc,
        Aggregation::MaxGroupconv,
        Aggregation::SumGroupconv,
    ];

    pub fn reduction(self) -> Option<Reduction> {
        match self {
            Aggregation::SumGroupconv | Aggregation::SumFc => Some(Reduction::Sum),
            Aggregation::MaxGroupconv | Aggregation::MaxFc => Some(Reduction::Max),
            Aggregation::Conv | Aggregation::Groupconv => None,
        }
    }

    /// Variants with a fixed kernel per neighbor slot.
    pub fn uses_slots(self) -> bool {
        matches!(self, Aggregation::Conv | Aggregation::Groupconv)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::SumGroupconv => "sum_groupconv",
            Aggregation::MaxGroupconv => "max_groupconv",
            Aggregation::SumFc => "sum_fc",
            Aggregation::MaxFc => "max_fc",
            Aggregation::Conv => "conv",
            Aggregation::Groupconv => "groupconv",
        }
    }

    pub fn for_reduction(r: Reduction) -> Self {
        match r {
            Reduction::Sum => Aggregation::SumGroupconv,
            Reduction::Max => Aggregation::MaxGroupconv,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub k_neighbors: usize,
    /// Ball-query radius; k-nearest neighbors when absent.
    pub radius: Option<f64>,
    /// 1 keeps every point; otherwise farthest point sampling keeps
    /// `ceil(n / stride)`.
    pub stride: usize,
    pub vector_dim: usize,
    pub encoder: EncoderKind,
    pub aggregation: Aggregation,
    /// Bias on the per-channel projection.
    pub projection_bias: bool,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize, k_neighbors: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            k_neighbors,
            radius: None,
            stride: 1,
            vector_dim: 3,
            encoder: EncoderKind::Rotation,
            aggregation: Aggregation::SumGroupconv,
            projection_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("radius must be positive, got {r}")));
            }
        }
        check_vector_dim(self.vector_dim)
    }

    pub fn reduction(&self) -> Option<Reduction> {
        self.aggregation.reduction()
    }
}

/// Precomputed sampling and grouping for one block on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouping {
    pub batch: usize,
    /// Source points per cloud.
    pub n_src: usize,
    /// Centers per cloud.
    pub m: usize,
    pub k: usize,
    /// `[B*m]` rows into the flattened source.
    pub centers: Arc<[usize]>,
    /// `[B*m*k]` rows into the flattened source.
    pub nbr: Arc<[usize]>,
    pub pad: Option<Arc<[bool]>>,
    /// `[B*m*k, 3]` relative positions, divided by the position scale.
    pub rel_pos: Tensor,
    /// `[B*m*3]` center coordinates.
    pub center_positions: Vec<f64>,
}

/// Options that affect geometry only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeomOptions {
    /// Ball-query radii are multiplied by this factor and relative positions
    /// divided by it.
    pub position_scale: f64,
    /// Sort each neighborhood by distance so slot `s` is the `s`-th nearest.
    pub canonical_order: bool,
}

impl Default for GeomOptions {
    fn default() -> Self {
        Self {
            position_scale: 1.0,
            canonical_order: false,
        }
    }
}

impl Grouping {
    /// Samples centers with stride `stride` and groups `k` neighbors around
    /// each. Short neighborhoods are padded with their first neighbor.
    pub fn build(
        positions: &[f64],
        batch: usize,
        n: usize,
        stride: usize,
        k: usize,
        radius: Option<f64>,
        opts: GeomOptions,
    ) -> Result<Self> {
        if positions.len() != batch * n * 3 {
            return Err(Error::Size("position buffer does not match batch layout".into()));
        }
        if stride == 0 || k == 0 {
            return Err(Error::Config("stride and k must be >= 1".into()));
        }
        let m = n.div_ceil(stride);
        let mut centers = Vec::with_capacity(batch * m);
        let mut nbr = Vec::with_capacity(batch * m * k);
        let mut pad = Vec::with_capacity(batch * m * k);
        let mut center_positions = Vec::with_capacity(batch * m * 3);
        for b in 0..batch {
            let pos = &positions[b * n * 3..(b + 1) * n * 3];
            let local = if stride == 1 {
                (0..n).collect()
            } else {
                geometry::fps_cloud(pos, m, 0)?
            };
            let queries = geometry::gather_positions(pos, &local)?;
            let (idx, p) = match radius {
                Some(r) => geometry::ball_query_cloud(pos, &queries, r * opts.position_scale, k)?,
                None => {
                    let ke = k.min(n);
                    let (idx, _) = geometry::knn_cloud(pos, &queries, ke)?;
                    let mut full = Vec::with_capacity(m * k);
                    let mut p = Vec::with_capacity(m * k);
                    for row in idx.chunks_exact(ke) {
                        full.extend_from_slice(row);
                        p.extend(std::iter::repeat_n(false, ke));
                        full.extend(std::iter::repeat_n(row[0], k - ke));
                        p.extend(std::iter::repeat_n(true, k - ke));
                    }
                    (full, p)
                }
            };
            let mut table = NeighborIndex {
                batch: 1,
                m,
                k,
                indices: idx,
                pad_mask: p,
                centers: local.clone(),
            };
            if opts.canonical_order && radius.is_some() {
                let cloud = PointSetBatch::new(1, n, 1, pos.to_vec(), vec![0.0; n], None)?;
                geometry::sort_by_distance(&mut table, &cloud);
            }
            centers.extend(local.iter().map(|&i| b * n + i));
            nbr.extend(table.indices.iter().map(|&j| b * n + j));
            pad.extend(table.pad_mask);
            center_positions.extend(queries);
        }
        Self::assemble(batch, n, m, k, centers, nbr, pad, positions, center_positions, opts)
    }

    /// Groups every point of each cloud around its centroid.
    pub fn group_all(positions: &[f64], batch: usize, n: usize, opts: GeomOptions) -> Result<Self> {
        if positions.len() != batch * n * 3 || n == 0 {
            return Err(Error::Size("position buffer does not match batch layout".into()));
        }
        let mut centroids = Vec::with_capacity(batch * 3);
        for b in 0..batch {
            let pos = &positions[b * n * 3..(b + 1) * n * 3];
            for d in 0..3 {
                centroids.push(pos.iter().skip(d).step_by(3).sum::<f64>() / n as f64);
            }
        }
        let centers: Vec<usize> = (0..batch).map(|b| b * n).collect();
        let nbr: Vec<usize> = (0..batch * n).collect();
        let mut rel = Vec::with_capacity(batch * n * 3);
        for b in 0..batch {
            for i in 0..n {
                for d in 0..3 {
                    rel.push((positions[(b * n + i) * 3 + d] - centroids[b * 3 + d]) / opts.position_scale);
                }
            }
        }
        Ok(Self {
            batch,
            n_src: n,
            m: 1,
            k: n,
            centers: centers.into(),
            nbr: nbr.into(),
            pad: None,
            rel_pos: Tensor::new(vec![batch * n, 3], rel)?,
            center_positions: centroids,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        batch: usize,
        n: usize,
        m: usize,
        k: usize,
        centers: Vec<usize>,
        nbr: Vec<usize>,
        pad: Vec<bool>,
        positions: &[f64],
        center_positions: Vec<f64>,
        opts: GeomOptions,
    ) -> Result<Self> {
        let mut rel = Vec::with_capacity(nbr.len() * 3);
        for (e, &j) in nbr.iter().enumerate() {
            let i = centers[e / k];
            for d in 0..3 {
                rel.push((positions[j * 3 + d] - positions[i * 3 + d]) / opts.position_scale);
            }
        }
        let has_pad = pad.iter().any(|&p| p);
        Ok(Self {
            batch,
            n_src: n,
            m,
            k,
            centers: centers.into(),
            nbr: nbr.into(),
            pad: has_pad.then(|| pad.into()),
            rel_pos: Tensor::new(vec![batch * m * k, 3], rel)?,
            center_positions,
        })
    }

    /// Stacks single- or multi-cloud groupings built on equally sized sources.
    pub fn concat(parts: &[&Grouping]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Size("cannot concatenate zero groupings".into()))?;
        let (n, m, k) = (first.n_src, first.m, first.k);
        let mut batch = 0;
        let mut centers = Vec::new();
        let mut nbr = Vec::new();
        let mut pad = Vec::new();
        let mut rel = Vec::new();
        let mut cpos = Vec::new();
        for g in parts {
            if (g.n_src, g.m, g.k) != (n, m, k) {
                return Err(Error::Size("groupings differ in layout".into()));
            }
            let off = batch * n;
            centers.extend(g.centers.iter().map(|&i| i + off));
            nbr.extend(g.nbr.iter().map(|&j| j + off));
            match &g.pad {
                Some(p) => pad.extend(p.iter().copied()),
                None => pad.extend(std::iter::repeat_n(false, g.nbr.len())),
            }
            rel.extend_from_slice(g.rel_pos.data());
            cpos.extend_from_slice(&g.center_positions);
            batch += g.batch;
        }
        let has_pad = pad.iter().any(|&p| p);
        Ok(Self {
            batch,
            n_src: n,
            m,
            k,
            centers: centers.into(),
            nbr: nbr.into(),
            pad: has_pad.then(|| pad.into()),
            rel_pos: Tensor::new(vec![batch * m * k, 3], rel)?,
            center_positions: cpos,
        })
    }
}

// ---------------------------------------------------------------------------
// grouped convolution with an independent kernel per neighbor slot

struct SlotGroupConvOp {
    k: usize,
    m: usize,
    pad: Option<Arc<[bool]>>,
}

impl Op for SlotGroupConvOp {
    fn name(&self) -> &'static str {
        "slot_groupconv"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (k, m) = (self.k, self.m);
        let c = w.shape()[0];
        let dy = ctx.grad.data();
        let mut dx = vec![0.0; x.numel()];
        let mut dw = vec![0.0; w.numel()];
        for (row, xr) in x.data().chunks_exact(c * m).enumerate() {
            if self.pad.as_ref().is_some_and(|p| p[row]) {
                continue;
            }
            let (g, s) = (row / k, row % k);
            for ch in 0..c {
                let gy = dy[g * c + ch];
                for d in 0..m {
                    let wi = (ch * k + s) * m + d;
                    dx[row * c * m + ch * m + d] = gy * w.data()[wi];
                    dw[wi] += gy * xr[ch * m + d];
                }
            }
        }
        let mut db = vec![0.0; c];
        for row in dy.chunks_exact(c) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), dx)?),
            Some(Tensor::new(w.shape().to_vec(), dw)?),
            Some(Tensor::new(vec![c], db)?),
        ])
    }
}

impl GradTape {
    /// `out[g, c] = sum_{s, d} x[g*k + s, c*m + d] * w[c, s, d] + b[c]` with
    /// padded slots skipped.
    pub fn slot_groupconv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        pad: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if wt.shape().len() != 3 || wt.shape()[1] != k {
            return Err(Error::Size(format!(
                "slot kernel must be [c, {k}, m], got {:?}",
                wt.shape()
            )));
        }
        let (c, m) = (wt.shape()[0], wt.shape()[2]);
        if xt.cols() != c * m || xt.rows() % k != 0 || bt.numel() != c {
            return Err(Error::Size("slot_groupconv: input layout mismatch".into()));
        }
        let groups = xt.rows() / k;
        let mut out = Vec::with_capacity(groups * c);
        for g in 0..groups {
            for ch in 0..c {
                let mut acc = bt.data()[ch];
                for s in 0..k {
                    let row = g * k + s;
                    if pad.as_ref().is_some_and(|p| p[row]) {
                        continue;
                    }
                    let xr = &xt.row(row)[ch * m..(ch + 1) * m];
                    let wr = &wt.data()[(ch * k + s) * m..][..m];
                    acc += xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                }
                out.push(acc);
            }
        }
        let out = Tensor::new(vec![groups, c], out)?;
        self.record(Box::new(SlotGroupConvOp { k, m, pad }), &[x, w, b], out)
    }
}

// ---------------------------------------------------------------------------
// SA block

/// Farthest-point downsampling, grouping, shared MLP on `[f_j, p_j - p_i]`
/// and max reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct SaBlock {
    pub prefix: String,
    pub cfg: BlockConfig,
    pub mlp: Vec<LinearBnAct>,
}

impl SaBlock {
    pub fn new(prefix: &str, cfg: BlockConfig, layers: usize) -> Result<Self> {
        cfg.validate()?;
        let mut mlp = Vec::with_capacity(layers.max(1));
        let mut cin = cfg.in_channels + 3;
        for l in 0..layers.max(1) {
            mlp.push(LinearBnAct::new(
                &format!("{prefix}.mlp{l}"),
                cin,
                cfg.out_channels,
                Some(Activation::Relu),
            ));
            cin = cfg.out_channels;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            cfg,
            mlp,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.mlp {
            l.init(store, rng);
        }
    }

    pub fn grouping(&self, positions: &[f64], batch: usize, n: usize, opts: GeomOptions) -> Result<Grouping> {
        Grouping::build(
            positions,
            batch,
            n,
            self.cfg.stride,
            self.cfg.k_neighbors,
            self.cfg.radius,
            opts,
        )
    }

    /// `feats: [B*n_src, C_in]` → `[B*m, C_out]`.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        feats: Var,
        g: &Grouping,
        mode: Mode,
    ) -> Result<Var> {
        let fj = in_layer(&self.prefix, tape.gather_rows(feats, g.nbr.clone()))?;
        let dp = tape.constant(g.rel_pos.clone());
        let mut h = in_layer(&self.prefix, tape.concat_cols(fj, dp))?;
        for l in &self.mlp {
            h = l.forward(tape, store, h, mode)?;
        }
        in_layer(&self.prefix, tape.neighbor_reduce(h, g.k, Reduction::Max, g.pad.clone()))
    }

    /// Runs the block on plain data.
    pub fn apply(&self, store: &ParamStore, x: &PointSetBatch, mode: Mode) -> Result<PointSetBatch> {
        if x.channels() != self.cfg.in_channels {
            return Err(Error::Size(format!(
                "{} expects {} channels, got {}",
                self.prefix,
                self.cfg.in_channels,
                x.channels()
            )));
        }
        let g = self.grouping(x.positions(), x.batch(), x.points(), GeomOptions::default())?;
        let mut tape = GradTape::new();
        let f = tape.constant(Tensor::new(vec![x.batch() * x.points(), x.channels()], x.features().to_vec())?);
        let out = self.forward(&mut tape, store, f, &g, mode)?;
        PointSetBatch::new(
            x.batch(),
            g.m,
            self.cfg.out_channels,
            g.center_positions.clone(),
            tape.value(out).data().to_vec(),
            None,
        )
    }
}

// ---------------------------------------------------------------------------
// VPSA block

#[derive(Clone, Debug, PartialEq)]
enum Aggregator {
    Projection {
        reduction: Reduction,
        proj_prefix: String,
        hc: Linear,
    },
    Slots {
        prefix: String,
        hc: Linear,
    },
    Fc {
        reduction: Reduction,
        fc: Linear,
        norm: BatchNorm,
    },
    Conv {
        conv: Linear,
        norm: BatchNorm,
    },
}

/// Vector-oriented set abstraction:
/// `relu(eta(f_i) + H_c(H_p(R{H_v(fp_j)})))`.
#[derive(Clone, Debug, PartialEq)]
pub struct VpsaBlock {
    pub prefix: String,
    pub cfg: BlockConfig,
    pub mix: MixFeatures,
    pub encoder: VectorEncoder,
    pub eta: Linear,
    agg: Aggregator,
}

impl VpsaBlock {
    pub fn new(prefix: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, co, m, k) = (cfg.in_channels, cfg.out_channels, cfg.vector_dim, cfg.k_neighbors);
        let hc = || Linear::new(format!("{prefix}.hc"), c, co, true);
        let agg = match cfg.aggregation {
            Aggregation::SumGroupconv | Aggregation::MaxGroupconv => Aggregator::Projection {
                reduction: cfg.aggregation.reduction().expect("reducing variant"),
                proj_prefix: format!("{prefix}.hp"),
                hc: hc(),
            },
            Aggregation::Groupconv => Aggregator::Slots {
                prefix: format!("{prefix}.slots"),
                hc: hc(),
            },
            Aggregation::SumFc | Aggregation::MaxFc => Aggregator::Fc {
                reduction: cfg.aggregation.reduction().expect("reducing variant"),
                fc: Linear::new(format!("{prefix}.fc"), c * m, co, true),
                norm: BatchNorm::new(format!("{prefix}.fc_norm"), co),
            },
            Aggregation::Conv => Aggregator::Conv {
                conv: Linear::new(format!("{prefix}.conv"), k * c * m, co, true),
                norm: BatchNorm::new(format!("{prefix}.conv_norm"), co),
            },
        };
        Ok(Self {
            prefix: prefix.to_string(),
            mix: MixFeatures::new(&format!("{prefix}.mix"), c),
            encoder: VectorEncoder::new(&format!("{prefix}.encoder"), cfg.encoder, c, m)?,
            eta: Linear::new(format!("{prefix}.eta"), c, co, true),
            agg,
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (c, m, k) = (self.cfg.in_channels, self.cfg.vector_dim, self.cfg.k_neighbors);
        self.mix.init(store, rng);
        self.encoder.init(store, rng);
        match &self.agg {
            Aggregator::Projection { proj_prefix, hc, .. } => {
                let bound = (1.0 / m as f64).sqrt();
                let w = (0..c * m).map(|_| rng.random_range(-bound..=bound)).collect();
                store.insert(format!("{proj_prefix}.weight"), Tensor::new(vec![c, m], w).expect("shape"));
                if self.cfg.projection_bias {
                    store.insert(format!("{proj_prefix}.bias"), Tensor::zeros(&[c]));
                }
                hc.init(store, rng);
            }
            Aggregator::Slots { prefix, hc } => {
                let bound = (1.0 / (k * m) as f64).sqrt();
                let w = (0..c * k * m).map(|_| rng.random_range(-bound..=bound)).collect();
                store.insert(format!("{prefix}.weight"), Tensor::new(vec![c, k, m], w).expect("shape"));
                store.insert(format!("{prefix}.bias"), Tensor::zeros(&[c]));
                hc.init(store, rng);
            }
            Aggregator::Fc { fc, norm, .. } => {
                fc.init(store, rng);
                norm.init(store);
            }
            Aggregator::Conv { conv, norm } => {
                conv.init(store, rng);
                norm.init(store);
            }
        }
        self.eta.init(store, rng);
    }

    pub fn grouping(&self, positions: &[f64], batch: usize, n: usize, opts: GeomOptions) -> Result<Grouping> {
        let opts = GeomOptions {
            canonical_order: self.cfg.aggregation.uses_slots(),
            ..opts
        };
        Grouping::build(
            positions,
            batch,
            n,
            self.cfg.stride,
            self.cfg.k_neighbors,
            self.cfg.radius,
            opts,
        )
    }

    /// Mixed relative features and the vector field, `[B*m*k, C*m]`.
    pub fn vector_field(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        feats: Var,
        g: &Grouping,
        mode: Mode,
    ) -> Result<Var> {
        let rel = in_layer(
            &self.prefix,
            tape.group_relative(feats, g.nbr.clone(), g.centers.clone(), g.k),
        )?;
        let dp = tape.constant(g.rel_pos.clone());
        let fp = self.mix.forward(tape, store, rel, dp)?;
        self.encoder.forward(tape, store, fp, mode)
    }

    /// Turns the `[B*m*k, C*m]` field into `[B*m, C_out]` according to the
    /// configured aggregation. For the dense variants (FC, Conv) this is the
    /// linear output before its normalization and activation.
    pub fn aggregation_variant(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        v: Var,
        g: &Grouping,
    ) -> Result<Var> {
        let p = &self.prefix;
        match &self.agg {
            Aggregator::Projection {
                reduction,
                proj_prefix,
                hc,
            } => {
                let r = in_layer(p, tape.neighbor_reduce(v, g.k, *reduction, g.pad.clone()))?;
                let w = tape.param(store, &format!("{proj_prefix}.weight"))?;
                let b = if self.cfg.projection_bias {
                    Some(tape.param(store, &format!("{proj_prefix}.bias"))?)
                } else {
                    None
                };
                let s = in_layer(proj_prefix, tape.grouped_projection(r, w, b))?;
                hc.forward(tape, store, s)
            }
            Aggregator::Slots { prefix, hc } => {
                let w = tape.param(store, &format!("{prefix}.weight"))?;
                let b = tape.param(store, &format!("{prefix}.bias"))?;
                let s = in_layer(prefix, tape.slot_groupconv(v, w, b, g.k, g.pad.clone()))?;
                hc.forward(tape, store, s)
            }
            Aggregator::Fc { reduction, fc, .. } => {
                let r = in_layer(p, tape.neighbor_reduce(v, g.k, *reduction, g.pad.clone()))?;
                fc.forward(tape, store, r)
            }
            Aggregator::Conv { conv, .. } => {
                let v = match &g.pad {
                    Some(pad) => in_layer(p, tape.mask_rows(v, pad.clone()))?,
                    None => v,
                };
                let width = tape.value(v).cols() * g.k;
                let rows = tape.value(v).rows() / g.k;
                let flat = in_layer(p, tape.reshape(v, vec![rows, width]))?;
                conv.forward(tape, store, flat)
            }
        }
    }

    /// Main path: aggregation plus, for the dense variants, BN and ReLU.
    pub fn main_path(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        v: Var,
        g: &Grouping,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.aggregation_variant(tape, store, v, g)?;
        match &self.agg {
            Aggregator::Fc { norm, .. } | Aggregator::Conv { norm, .. } => {
                let h = norm.forward(tape, store, h, mode)?;
                in_layer(&norm.prefix, tape.relu(h))
            }
            _ => Ok(h),
        }
    }

    /// `feats: [B*n_src, C_in]` → `[B*m, C_out]`.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        feats: Var,
        g: &Grouping,
        mode: Mode,
    ) -> Result<Var> {
        if tape.value(feats).cols() != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "{} expects {} input channels, got {}",
                self.prefix,
                self.cfg.in_channels,
                tape.value(feats).cols()
            )));
        }
        let v = self.vector_field(tape, store, feats, g, mode)?;
        let main = self.main_path(tape, store, v, g, mode)?;
        let fi = in_layer(&self.prefix, tape.gather_rows(feats, g.centers.clone()))?;
        let skip = self.eta.forward(tape, store, fi)?;
        if tape.value(skip).shape() != tape.value(main).shape() {
            return Err(Error::Config(format!(
                "{}: residual width {:?} differs from main path {:?}",
                self.prefix,
                tape.value(skip).shape(),
                tape.value(main).shape()
            )));
        }
        in_layer(&self.prefix, tape.residual_fuse(main, skip))
    }

    /// Runs the block on plain data.
    pub fn apply(&self, store: &ParamStore, x: &PointSetBatch, mode: Mode) -> Result<PointSetBatch> {
        let g = self.grouping(x.positions(), x.batch(), x.points(), GeomOptions::default())?;
        let mut tape = GradTape::new();
        let f = tape.constant(Tensor::new(vec![x.batch() * x.points(), x.channels()], x.features().to_vec())?);
        let out = self.forward(&mut tape, store, f, &g, mode)?;
        PointSetBatch::new(
            x.batch(),
            g.m,
            self.cfg.out_channels,
            g.center_positions.clone(),
            tape.value(out).data().to_vec(),
            None,
        )
    }
}

// ---------------------------------------------------------------------------
// feature propagation

/// Inverse-squared-distance weights from each fine point to its nearest
/// coarse points.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    pub per_row: usize,
    pub idx: Arc<[usize]>,
    pub weights: Arc<[f64]>,
}

impl Interpolation {
    pub fn build(
        coarse: &[f64],
        fine: &[f64],
        batch: usize,
        n_coarse: usize,
        n_fine: usize,
    ) -> Result<Self> {
        if n_coarse == 0 {
            return Err(Error::Size("feature propagation from an empty coarse set".into()));
        }
        if coarse.len() != batch * n_coarse * 3 || fine.len() != batch * n_fine * 3 {
            return Err(Error::Size("position buffers do not match batch layout".into()));
        }
        let per = INTERP_NEIGHBORS.min(n_coarse);
        let mut idx = Vec::with_capacity(batch * n_fine * per);
        let mut weights = Vec::with_capacity(batch * n_fine * per);
        for b in 0..batch {
            let cpos = &coarse[b * n_coarse * 3..(b + 1) * n_coarse * 3];
            let fpos = &fine[b * n_fine * 3..(b + 1) * n_fine * 3];
            let (nn, d2) = geometry::knn_cloud(cpos, fpos, per)?;
            for (row_i, row_d) in nn.chunks_exact(per).zip(d2.chunks_exact(per)) {
                let w: Vec<f64> = row_d.iter().map(|d| 1.0 / (d + INTERP_EPS)).collect();
                let total: f64 = w.iter().sum();
                idx.extend(row_i.iter().map(|&j| b * n_coarse + j));
                weights.extend(w.iter().map(|w| w / total));
            }
        }
        Ok(Self {
            per_row: per,
            idx: idx.into(),
            weights: weights.into(),
        })
    }

    pub fn concat(parts: &[&Interpolation], n_coarse: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Size("cannot concatenate zero interpolations".into()))?;
        let mut idx = Vec::new();
        let mut weights = Vec::new();
        let mut offset = 0;
        for p in parts {
            if p.per_row != first.per_row {
                return Err(Error::Size("interpolations differ in neighbor count".into()));
            }
            let clouds = p.idx.iter().map(|&i| i / n_coarse).max().map_or(0, |c| c + 1);
            idx.extend(p.idx.iter().map(|&i| i + offset));
            weights.extend_from_slice(&p.weights);
            offset += clouds * n_coarse;
        }
        Ok(Self {
            per_row: first.per_row,
            idx: idx.into(),
            weights: weights.into(),
        })
    }
}

/// Interpolates coarse features to fine points, concatenates the fine skip
/// features and applies a shared MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct FpBlock {
    pub prefix: String,
    pub mlp: Vec<LinearBnAct>,
}

impl FpBlock {
    pub fn new(prefix: &str, coarse_channels: usize, skip_channels: usize, widths: &[usize]) -> Self {
        let mut cin = coarse_channels + skip_channels;
        let mlp = widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let layer = LinearBnAct::new(&format!("{prefix}.mlp{l}"), cin, w, Some(Activation::Relu));
                cin = w;
                layer
            })
            .collect();
        Self {
            prefix: prefix.to_string(),
            mlp,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.mlp {
            l.init(store, rng);
        }
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        coarse: Var,
        skip: Option<Var>,
        interp: &Interpolation,
        mode: Mode,
    ) -> Result<Var> {
        let up = in_layer(
            &self.prefix,
            tape.interpolate_rows(coarse, interp.idx.clone(), interp.weights.clone(), interp.per_row),
        )?;
        let mut h = match skip {
            Some(s) => in_layer(&self.prefix, tape.concat_cols(up, s))?,
            None => up,
        };
        for l in &self.mlp {
            h = l.forward(tape, store, h, mode)?;
        }
        Ok(h)
    }

    /// Plain-data feature propagation onto `fine_positions`
    /// (`[B][n_fine][3]`) with `skip_features` (`[B][n_fine][C_skip]`).
    pub fn apply(
        &self,
        store: &ParamStore,
        coarse: &PointSetBatch,
        fine_positions: &[f64],
        skip_features: Option<(&[f64], usize)>,
        mode: Mode,
    ) -> Result<Tensor> {
        let b = coarse.batch();
        let n_fine = fine_positions.len() / (3 * b);
        let interp = Interpolation::build(coarse.positions(), fine_positions, b, coarse.points(), n_fine)?;
        let mut tape = GradTape::new();
        let c = tape.constant(Tensor::new(
            vec![b * coarse.points(), coarse.channels()],
            coarse.features().to_vec(),
        )?);
        let skip = match skip_features {
            Some((f, ch)) => Some(tape.constant(Tensor::new(vec![b * n_fine, ch], f.to_vec())?)),
            None => None,
        };
        let out = self.forward(&mut tape, store, c, skip, &interp, mode)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests;
