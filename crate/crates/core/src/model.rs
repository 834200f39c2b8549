//! Hierarchical point-cloud networks assembled from SA, VPSA and feature
//! propagation blocks: named presets, forward passes for segmentation and
//! classification, and a checkpoint container.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{position_features, PointSetBatch};
use crate::nnops::{
    in_layer, Activation, GradTape, Linear, LinearBnAct, Mode, ParamStore, Reduction, Tensor, Var,
};
use crate::setabs::{
    Aggregation, BlockConfig, FpBlock, GeomOptions, Grouping, Interpolation, SaBlock, VpsaBlock,
};
use crate::vecenc::EncoderKind;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Classification,
}

/// Where the network's input features come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFeatures {
    /// `(x, y, z, z - min z)` derived from positions.
    PositionHeight,
    /// The batch's own feature channels.
    Provided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub task: Task,
    pub num_classes: usize,
    pub input: InputFeatures,
    /// Input channels when `input` is `provided`.
    pub in_channels: usize,
    /// Width `C` of the embedding MLP; stage `i` has width `C * 2^(i+1)`.
    pub embed_channels: usize,
    pub sa_per_stage: Vec<usize>,
    pub vpsa_per_stage: Vec<usize>,
    pub strides: Vec<usize>,
    pub k_sa: usize,
    pub k_vpsa: usize,
    /// Ball-query radius of the first stage's SA blocks, doubled per stage.
    /// K-nearest neighbors when absent.
    pub sa_radius: Option<f64>,
    /// Same for VPSA blocks.
    pub vpsa_radius: Option<f64>,
    pub encoder: EncoderKind,
    pub vector_dim: usize,
    /// Overrides the task's default reduction (sum for segmentation, max for
    /// classification).
    pub reduction: Option<Reduction>,
    /// Overrides the aggregation variant; must agree with `reduction`.
    pub aggregation: Option<Aggregation>,
    pub projection_bias: bool,
    /// Linear-BN-ReLU layers inside each SA block.
    pub sa_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(Task::Segmentation, 3)
    }
}

impl ModelConfig {
    /// Two-stage desk-scale network used by tests and the CLI defaults.
    pub fn toy(task: Task, num_classes: usize) -> Self {
        Self {
            task,
            num_classes,
            input: InputFeatures::PositionHeight,
            in_channels: 4,
            embed_channels: 16,
            sa_per_stage: vec![1, 1],
            vpsa_per_stage: vec![1, 1],
            strides: vec![2, 2],
            k_sa: 16,
            k_vpsa: 8,
            sa_radius: Some(0.2),
            vpsa_radius: None,
            encoder: EncoderKind::Rotation,
            vector_dim: 3,
            reduction: None,
            aggregation: None,
            projection_bias: true,
            sa_layers: 1,
        }
    }

    fn native(task: Task, num_classes: usize, c: usize, s: Vec<usize>, v: Vec<usize>) -> Self {
        Self {
            embed_channels: c,
            sa_per_stage: s,
            vpsa_per_stage: v,
            strides: vec![4, 4, 4, 4],
            k_sa: 32,
            k_vpsa: 8,
            sa_radius: Some(0.1),
            ..Self::toy(task, num_classes)
        }
    }

    /// `C=32, S=[0,0,0,0], V=[1,1,1,1]`.
    pub fn small(task: Task, num_classes: usize) -> Self {
        Self::native(task, num_classes, 32, vec![0; 4], vec![1; 4])
    }

    /// `C=32, S=[1,1,1,1], V=[2,4,2,2]`.
    pub fn large(task: Task, num_classes: usize) -> Self {
        Self::native(task, num_classes, 32, vec![1; 4], vec![2, 4, 2, 2])
    }

    /// `C=64, S=[1,1,1,1], V=[3,6,3,3]`.
    pub fn extra_large(task: Task, num_classes: usize) -> Self {
        Self::native(task, num_classes, 64, vec![1; 4], vec![3, 6, 3, 3])
    }

    /// Looks up a preset by name: `toy`, `s`, `l` or `xl`.
    pub fn preset(name: &str, task: Task, num_classes: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "toy" => Ok(Self::toy(task, num_classes)),
            "s" => Ok(Self::small(task, num_classes)),
            "l" => Ok(Self::large(task, num_classes)),
            "xl" => Ok(Self::extra_large(task, num_classes)),
            other => Err(Error::Config(format!("unknown preset `{other}` (toy, s, l, xl)"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.strides.len()
    }

    pub fn input_channels(&self) -> usize {
        match self.input {
            InputFeatures::PositionHeight => 4,
            InputFeatures::Provided => self.in_channels,
        }
    }

    /// Width after stage `i`; `None` is the embedding width.
    pub fn stage_width(&self, stage: Option<usize>) -> usize {
        match stage {
            None => self.embed_channels,
            Some(i) => self.embed_channels << (i + 1),
        }
    }

    /// The aggregation used by every VPSA block.
    pub fn resolved_aggregation(&self) -> Result<Aggregation> {
        match (self.aggregation, self.reduction) {
            (Some(a), Some(r)) if a.reduction().is_some_and(|ar| ar != r) => Err(Error::Config(format!(
                "aggregation `{}` conflicts with reduction `{r:?}`",
                a.as_str()
            ))),
            (Some(a), _) => Ok(a),
            (None, Some(r)) => Ok(Aggregation::for_reduction(r)),
            (None, None) => Ok(Aggregation::for_reduction(match self.task {
                Task::Segmentation => Reduction::Sum,
                Task::Classification => Reduction::Max,
            })),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.strides.len();
        if self.sa_per_stage.len() != n || self.vpsa_per_stage.len() != n {
            return Err(Error::Config(format!(
                "stage lists differ in length: strides {n}, sa {}, vpsa {}",
                self.sa_per_stage.len(),
                self.vpsa_per_stage.len()
            )));
        }
        if n == 0 {
            return Err(Error::Config("a model needs at least one stage".into()));
        }
        if self.embed_channels == 0 {
            return Err(Error::Config("embed_channels must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.input_channels() == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.k_sa == 0 || self.k_vpsa == 0 {
            return Err(Error::Config("neighbor counts must be >= 1".into()));
        }
        if self.sa_layers == 0 {
            return Err(Error::Config("sa_layers must be >= 1".into()));
        }
        if let Some(i) = self.strides.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("stage {i} has stride 0")));
        }
        for (i, (s, v)) in self.sa_per_stage.iter().zip(&self.vpsa_per_stage).enumerate() {
            if s + v == 0 {
                return Err(Error::Config(format!("stage {i} has no blocks")));
            }
        }
        for r in [self.sa_radius, self.vpsa_radius].into_iter().flatten() {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("radius must be positive, got {r}")));
            }
        }
        crate::vecenc::check_vector_dim(self.vector_dim)?;
        self.resolved_aggregation().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Block {
    Sa(SaBlock),
    Vpsa(VpsaBlock),
}

impl Block {
    fn prefix(&self) -> &str {
        match self {
            Block::Sa(b) => &b.prefix,
            Block::Vpsa(b) => &b.prefix,
        }
    }

    fn cfg(&self) -> &BlockConfig {
        match self {
            Block::Sa(b) => &b.cfg,
            Block::Vpsa(b) => &b.cfg,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        match self {
            Block::Sa(b) => b.init(store, rng),
            Block::Vpsa(b) => b.init(store, rng),
        }
    }

    fn grouping(&self, positions: &[f64], batch: usize, n: usize, opts: GeomOptions) -> Result<Grouping> {
        match self {
            Block::Sa(b) => b.grouping(positions, batch, n, opts),
            Block::Vpsa(b) => b.grouping(positions, batch, n, opts),
        }
    }

    fn forward(&self, tape: &mut GradTape, store: &ParamStore, x: Var, g: &Grouping, mode: Mode) -> Result<Var> {
        let out = match self {
            Block::Sa(b) => b.forward(tape, store, x, g, mode),
            Block::Vpsa(b) => b.forward(tape, store, x, g, mode),
        };
        in_layer(self.prefix(), out)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Segmentation {
        decoder: Vec<FpBlock>,
        hidden: LinearBnAct,
        out: Linear,
    },
    Classification {
        global: SaBlock,
        hidden: LinearBnAct,
        out: Linear,
    },
}

/// An assembled network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    stem: LinearBnAct,
    stages: Vec<Vec<Block>>,
    head: Head,
}

/// Sampling, grouping and interpolation tables for one batch of positions.
/// Depends on positions only, so it can be reused across steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryPlan {
    pub batch: usize,
    pub points: usize,
    pub position_scale: f64,
    /// One grouping per block, stage by stage.
    pub groupings: Vec<Vec<Grouping>>,
    /// Decoder interpolations, `interps[i]` from stage `i` onto the level
    /// below it.
    pub interps: Vec<Interpolation>,
    pub global: Option<Grouping>,
}

impl GeometryPlan {
    /// Neighbor tables of every block, for membership comparisons.
    pub fn neighbor_tables(&self) -> Vec<(&[usize], Option<&[bool]>)> {
        self.groupings
            .iter()
            .flatten()
            .map(|g| (&g.nbr[..], g.pad.as_deref()))
            .collect()
    }
}

/// Forward-pass switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOpts {
    pub mode: Mode,
    /// Radii are multiplied and position inputs divided by this factor.
    pub position_scale: f64,
}

impl ForwardOpts {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            position_scale: 1.0,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            position_scale: 1.0,
        }
    }
}

pub fn build_model(cfg: ModelConfig) -> Result<Model> {
    Model::new(cfg)
}

/// Exact number of learnable scalars.
pub fn param_count(store: &ParamStore) -> usize {
    store.num_scalars()
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let aggregation = cfg.resolved_aggregation()?;
        let stem = LinearBnAct::new("stem", cfg.input_channels(), cfg.embed_channels, Some(Activation::Relu));
        let mut stages = Vec::with_capacity(cfg.stages());
        let mut cin = cfg.embed_channels;
        for i in 0..cfg.stages() {
            let width = cfg.stage_width(Some(i));
            let scale = (1u64 << i) as f64;
            let mut blocks = Vec::new();
            // classification downsamples with VPSA blocks instead of SA
            let downs = cfg.sa_per_stage[i];
            for j in 0..downs {
                let stride = if j == 0 { cfg.strides[i] } else { 1 };
                let block = match cfg.task {
                    Task::Segmentation => {
                        let mut bc = BlockConfig::new(cin, width, cfg.k_sa);
                        bc.stride = stride;
                        bc.radius = cfg.sa_radius.map(|r| r * scale);
                        Block::Sa(SaBlock::new(&format!("stage{i}.sa{j}"), bc, cfg.sa_layers)?)
                    }
                    Task::Classification => {
                        let mut bc = vpsa_config(&cfg, aggregation, cin, width, cfg.k_sa, scale);
                        bc.radius = cfg.sa_radius.map(|r| r * scale);
                        bc.stride = stride;
                        Block::Vpsa(VpsaBlock::new(&format!("stage{i}.down{j}"), bc)?)
                    }
                };
                cin = width;
                blocks.push(block);
            }
            for j in 0..cfg.vpsa_per_stage[i] {
                let mut bc = vpsa_config(&cfg, aggregation, cin, width, cfg.k_vpsa, scale);
                if downs == 0 && j == 0 {
                    bc.stride = cfg.strides[i];
                }
                blocks.push(Block::Vpsa(VpsaBlock::new(&format!("stage{i}.vpsa{j}"), bc)?));
                cin = width;
            }
            stages.push(blocks);
        }
        let relu = Some(Activation::Relu);
        let head = match cfg.task {
            Task::Segmentation => {
                let decoder = (0..cfg.stages())
                    .map(|i| {
                        let coarse = cfg.stage_width(Some(i));
                        let skip = cfg.stage_width(i.checked_sub(1));
                        FpBlock::new(&format!("decoder{i}"), coarse, skip, &[skip, skip])
                    })
                    .collect();
                let c = cfg.embed_channels;
                Head::Segmentation {
                    decoder,
                    hidden: LinearBnAct::new("head.hidden", c, c, relu),
                    out: Linear::new("head.out", c, cfg.num_classes, true),
                }
            }
            Task::Classification => {
                let c = cfg.stage_width(Some(cfg.stages() - 1));
                let global = SaBlock::new("head.global", BlockConfig::new(c, c, 1), 1)?;
                Head::Classification {
                    global,
                    hidden: LinearBnAct::new("head.hidden", c, c, relu),
                    out: Linear::new("head.out", c, cfg.num_classes, true),
                }
            }
        };
        Ok(Self {
            cfg,
            stem,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Block name prefixes in execution order.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = vec![self.stem.linear.prefix.clone()];
        names.extend(self.stages.iter().flatten().map(|b| b.prefix().to_string()));
        names
    }

    /// Block name prefixes grouped by stage.
    pub fn stage_blocks(&self) -> Vec<Vec<String>> {
        self.stages
            .iter()
            .map(|bs| bs.iter().map(|b| b.prefix().to_string()).collect())
            .collect()
    }

    /// Fresh parameters drawn from `rng`.
    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.stem.init(&mut store, rng);
        for b in self.stages.iter().flatten() {
            b.init(&mut store, rng);
        }
        match &self.head {
            Head::Segmentation { decoder, hidden, out } => {
                for d in decoder {
                    d.init(&mut store, rng);
                }
                hidden.init(&mut store, rng);
                out.init(&mut store, rng);
            }
            Head::Classification { global, hidden, out } => {
                global.init(&mut store, rng);
                hidden.init(&mut store, rng);
                out.init(&mut store, rng);
            }
        }
        store
    }

    /// Builds every block's neighborhoods for `batch` clouds of `n` points.
    pub fn plan(&self, positions: &[f64], batch: usize, n: usize, position_scale: f64) -> Result<GeometryPlan> {
        if !(position_scale > 0.0 && position_scale.is_finite()) {
            return Err(Error::Config(format!("position scale must be positive, got {position_scale}")));
        }
        let opts = GeomOptions {
            position_scale,
            canonical_order: false,
        };
        let mut levels: Vec<(Vec<f64>, usize)> = vec![(positions.to_vec(), n)];
        let mut groupings = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            let (mut pos, mut np) = levels.last().expect("input level").clone();
            // stride-1 blocks with the same neighborhood rule on the same
            // level share a table
            let mut cache: Vec<(NeighborhoodKey, usize)> = Vec::new();
            let mut gs: Vec<Grouping> = Vec::with_capacity(blocks.len());
            for b in blocks {
                let key = NeighborhoodKey::of(b);
                let g = match cache.iter().find(|(k, _)| b.cfg().stride == 1 && *k == key) {
                    Some(&(_, at)) => gs[at].clone(),
                    None => b.grouping(&pos, batch, np, opts)?,
                };
                if b.cfg().stride > 1 {
                    pos = g.center_positions.clone();
                    np = g.m;
                    cache.clear();
                } else {
                    cache.push((key, gs.len()));
                }
                gs.push(g);
            }
            groupings.push(gs);
            levels.push((pos, np));
        }
        let (interps, global) = match &self.head {
            Head::Segmentation { .. } => {
                let interps = (0..self.stages.len())
                    .map(|i| {
                        let (coarse, nc) = &levels[i + 1];
                        let (fine, nf) = &levels[i];
                        Interpolation::build(coarse, fine, batch, *nc, *nf)
                    })
                    .collect::<Result<_>>()?;
                (interps, None)
            }
            Head::Classification { .. } => {
                let (pos, np) = levels.last().expect("input level");
                (Vec::new(), Some(Grouping::group_all(pos, batch, *np, opts)?))
            }
        };
        Ok(GeometryPlan {
            batch,
            points: n,
            position_scale,
            groupings,
            interps,
            global,
        })
    }

    /// Network input `[B*N, C_in]` for `batch`.
    pub fn input_features(&self, batch: &PointSetBatch, position_scale: f64) -> Result<Tensor> {
        let rows = batch.batch() * batch.points();
        match self.cfg.input {
            InputFeatures::PositionHeight => Tensor::new(
                vec![rows, 4],
                position_features(batch.positions(), batch.batch(), batch.points(), position_scale),
            ),
            InputFeatures::Provided => {
                if batch.channels() != self.cfg.in_channels {
                    return Err(Error::Size(format!(
                        "model expects {} input channels, batch has {}",
                        self.cfg.in_channels,
                        batch.channels()
                    )));
                }
                Tensor::new(vec![rows, batch.channels()], batch.features().to_vec())
            }
        }
    }

    /// Logits from input features and a plan: `[B*N, K]` for segmentation,
    /// `[B, K]` for classification.
    pub fn forward_planned(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        input: Var,
        plan: &GeometryPlan,
        mode: Mode,
    ) -> Result<Var> {
        let mut h = self.stem.forward(tape, store, input, mode)?;
        let mut skips = vec![h];
        for (blocks, gs) in self.stages.iter().zip(&plan.groupings) {
            for (b, g) in blocks.iter().zip(gs) {
                h = b.forward(tape, store, h, g, mode)?;
            }
            skips.push(h);
        }
        match &self.head {
            Head::Segmentation { decoder, hidden, out } => {
                for i in (0..decoder.len()).rev() {
                    h = in_layer(
                        &decoder[i].prefix,
                        decoder[i].forward(tape, store, h, Some(skips[i]), &plan.interps[i], mode),
                    )?;
                }
                let h = hidden.forward(tape, store, h, mode)?;
                out.forward(tape, store, h)
            }
            Head::Classification { global, hidden, out } => {
                let g = plan
                    .global
                    .as_ref()
                    .ok_or_else(|| Error::Config("classification plan lacks global grouping".into()))?;
                let h = in_layer(&global.prefix, global.forward(tape, store, h, g, mode))?;
                let h = hidden.forward(tape, store, h, mode)?;
                out.forward(tape, store, h)
            }
        }
    }

    /// Task logits for `batch`, computing geometry on the fly.
    pub fn forward(&self, tape: &mut GradTape, store: &ParamStore, batch: &PointSetBatch, opts: ForwardOpts) -> Result<Var> {
        let plan = self.plan(batch.positions(), batch.batch(), batch.points(), opts.position_scale)?;
        let x = tape.constant(self.input_features(batch, opts.position_scale)?);
        self.forward_planned(tape, store, x, &plan, opts.mode)
    }

    /// Per-point logits `[B*N, K]`.
    pub fn forward_seg(&self, tape: &mut GradTape, store: &ParamStore, batch: &PointSetBatch, opts: ForwardOpts) -> Result<Var> {
        if self.cfg.task != Task::Segmentation {
            return Err(Error::Config("forward_seg on a classification model".into()));
        }
        self.forward(tape, store, batch, opts)
    }

    /// Per-cloud logits `[B, K]`.
    pub fn forward_cls(&self, tape: &mut GradTape, store: &ParamStore, batch: &PointSetBatch, opts: ForwardOpts) -> Result<Var> {
        if self.cfg.task != Task::Classification {
            return Err(Error::Config("forward_cls on a segmentation model".into()));
        }
        self.forward(tape, store, batch, opts)
    }

    /// Logits without keeping the tape.
    pub fn predict(&self, store: &ParamStore, batch: &PointSetBatch, opts: ForwardOpts) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let out = self.forward(&mut tape, store, batch, opts)?;
        Ok(tape.value(out).clone())
    }

    /// Checks that `store` holds exactly the tensors this model expects.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let expected = self.init(&mut ChaCha8Rng::seed_from_u64(0));
        let same = |a: Vec<(&String, &Tensor)>, b: Vec<(&String, &Tensor)>| {
            a.len() == b.len()
                && a.iter().all(|(n, t)| b.iter().any(|(m, u)| m == n && u.shape() == t.shape()))
        };
        if same(expected.params().collect(), store.params().collect())
            && same(expected.buffers().collect(), store.buffers().collect())
        {
            return Ok(());
        }
        for (name, t) in expected.params() {
            match store.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(u) if u.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, model expects {:?}",
                        u.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Err(Error::Checkpoint("parameter set differs from the model".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct NeighborhoodKey {
    vpsa: bool,
    k: usize,
    radius: Option<f64>,
    canonical: bool,
}

impl NeighborhoodKey {
    fn of(b: &Block) -> Self {
        Self {
            vpsa: matches!(b, Block::Vpsa(_)),
            k: b.cfg().k_neighbors,
            radius: b.cfg().radius,
            canonical: b.cfg().aggregation.uses_slots(),
        }
    }
}

fn vpsa_config(cfg: &ModelConfig, aggregation: Aggregation, cin: usize, cout: usize, k: usize, scale: f64) -> BlockConfig {
    let mut bc = BlockConfig::new(cin, cout, k);
    bc.radius = cfg.vpsa_radius.map(|r| r * scale);
    bc.vector_dim = cfg.vector_dim;
    bc.encoder = cfg.encoder;
    bc.aggregation = aggregation;
    bc.projection_bias = cfg.projection_bias;
    bc
}
