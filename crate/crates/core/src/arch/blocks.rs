//! Building blocks: conv-BN-ReLU layers, conv units, adaption units and
//! basic units, each as a plain config plus a built form holding parameter
//! ids into a [`ParamSet`].

use std::fmt;

use rand::{Rng, RngCore};

use crate::arch::spec::{Connection, Merge};
use crate::autodiff::{Graph, NodeId, ParamId, ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::ops::{self, ConvConfig, Mode, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Float, Tensor};

/// `(N, C, H, W)`.
pub type Shape4 = [usize; 4];

/// One entry of a shape trace: a block name (dotted for nested blocks) and
/// the shape it produces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn trace_err(block: &str, detail: impl Into<String>) -> Error {
    Error::Trace {
        block: block.to_string(),
        detail: detail.into(),
    }
}

fn push(out: &mut Vec<TraceEntry>, name: &str, shape: &[usize]) {
    out.push(TraceEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
    });
}

/// A single conv → BN → ReLU layer. Padding is `k/2`, stride 1, no bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBnCfg {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl ConvBnCfg {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, groups: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            groups,
        }
    }

    pub fn conv_config(&self) -> ConvConfig {
        ConvConfig::same(self.kernel, self.groups)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.groups.max(1), self.kernel, self.kernel]
    }

    pub fn weight_count(&self) -> Result<usize> {
        ops::count_conv_params(self.kernel, self.in_ch, self.out_ch, self.groups, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("conv kernel must be odd, got {}", self.kernel)));
        }
        self.weight_count().map(|_| ())
    }

    pub fn trace(&self, block: &str, s: Shape4) -> Result<Shape4> {
        self.validate().map_err(|e| trace_err(block, e.to_string()))?;
        if s[1] != self.in_ch {
            return Err(trace_err(
                block,
                format!("expects {} input channels, got shape {s:?}", self.in_ch),
            ));
        }
        let cfg = self.conv_config();
        let oh = ops::conv_output_size(s[2], self.kernel, cfg.stride, cfg.padding)
            .map_err(|e| trace_err(block, e.to_string()))?;
        let ow = ops::conv_output_size(s[3], self.kernel, cfg.stride, cfg.padding)
            .map_err(|e| trace_err(block, e.to_string()))?;
        Ok([s[0], self.out_ch, oh, ow])
    }
}

/// 1×1 bottleneck conv followed by a grouped 3×3 conv, each with BN-ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvUnitCfg {
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub groups_3x3: usize,
    /// Groups of the 1×1 conv; 1 keeps it a full channel-mixing conv.
    pub groups_1x1: usize,
}

impl ConvUnitCfg {
    /// Bottleneck width `out/2`, ungrouped 1×1.
    pub fn new(in_ch: usize, out_ch: usize, groups_3x3: usize) -> Self {
        Self {
            in_ch,
            mid_ch: out_ch / 2,
            out_ch,
            groups_3x3,
            groups_1x1: 1,
        }
    }

    pub fn reduce(&self) -> ConvBnCfg {
        ConvBnCfg::new(self.in_ch, self.mid_ch, 1, self.groups_1x1)
    }

    pub fn conv(&self) -> ConvBnCfg {
        ConvBnCfg::new(self.mid_ch, self.out_ch, 3, self.groups_3x3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mid_ch == 0 {
            return Err(Error::invalid("conv unit: bottleneck width must be >= 1"));
        }
        self.reduce().validate()?;
        self.conv().validate()
    }

    pub fn trace(&self, block: &str, s: Shape4) -> Result<Shape4> {
        let s = self.reduce().trace(&format!("{block}.conv1x1"), s)?;
        self.conv().trace(&format!("{block}.conv3x3"), s)
    }
}

/// Conv-BN-ReLU followed by 2×2 average pooling with stride 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptionUnitCfg {
    pub in_ch: usize,
    pub out_ch: usize,
    /// 1 or 3.
    pub kernel: usize,
    pub groups: usize,
}

impl AdaptionUnitCfg {
    pub fn conv(&self) -> ConvBnCfg {
        ConvBnCfg::new(self.in_ch, self.out_ch, self.kernel, self.groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 1 && self.kernel != 3 {
            return Err(Error::invalid(format!(
                "adaption unit kernel must be 1 or 3, got {}",
                self.kernel
            )));
        }
        self.conv().validate()
    }

    pub fn trace(&self, block: &str, s: Shape4) -> Result<Shape4> {
        self.validate().map_err(|e| trace_err(block, e.to_string()))?;
        let s = self.conv().trace(&format!("{block}.conv"), s)?;
        if s[2] < 2 || s[3] < 2 {
            return Err(trace_err(block, format!("cannot pool 2x2 over {s:?}")));
        }
        Ok([s[0], s[1], s[2] / 2, s[3] / 2])
    }
}

/// One of the three sequential stages of a basic unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageCfg {
    Unit(ConvUnitCfg),
    /// A lone conv-BN-ReLU, as in BU_s's channel-wise 3×3 stages.
    Single(ConvBnCfg),
}

impl StageCfg {
    fn out_ch(&self) -> usize {
        match self {
            StageCfg::Unit(c) => c.out_ch,
            StageCfg::Single(c) => c.out_ch,
        }
    }

    fn trace(&self, block: &str, s: Shape4) -> Result<Shape4> {
        match self {
            StageCfg::Unit(c) => c.trace(block, s),
            StageCfg::Single(c) => c.trace(block, s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    Input,
    Full,
    Single,
    End,
    Middle,
}

impl UnitKind {
    /// Conventional block name: `bu_i`, `bu_f`, `bu_s`, `bu_e`, `bu_m`.
    pub fn block_name(self) -> &'static str {
        match self {
            UnitKind::Input => "bu_i",
            UnitKind::Full => "bu_f",
            UnitKind::Single => "bu_s",
            UnitKind::End => "bu_e",
            UnitKind::Middle => "bu_m",
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnitKind::Input => "BU_i",
            UnitKind::Full => "BU_f",
            UnitKind::Single => "BU_s",
            UnitKind::End => "BU_e",
            UnitKind::Middle => "BU_m",
        })
    }
}

/// Optional entry conv, three joined stages, then optional 1×1 tail,
/// adaption unit and dropout, in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicUnitCfg {
    pub kind: UnitKind,
    pub connection: Connection,
    pub entry: Option<ConvBnCfg>,
    pub stages: Vec<StageCfg>,
    pub tail: Option<ConvBnCfg>,
    pub adaption: Option<AdaptionUnitCfg>,
    pub dropout_keep: Option<f64>,
}

impl BasicUnitCfg {
    /// Stage names in order: `cu1..` for conv units, `dw1..` for
    /// channel-wise singles, `conv1..` for other singles.
    pub fn stage_names(&self) -> Vec<String> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| match s {
                StageCfg::Unit(_) => format!("cu{}", i + 1),
                StageCfg::Single(c) if c.groups == c.in_ch && c.groups == c.out_ch => format!("dw{}", i + 1),
                StageCfg::Single(_) => format!("conv{}", i + 1),
            })
            .collect()
    }

    /// Check the configuration, including that every connection joins
    /// equally shaped tensors, by tracing a 4×4 probe of the right width.
    pub fn validate(&self) -> Result<()> {
        let in_ch = match (&self.entry, self.stages.first()) {
            (Some(e), _) => e.in_ch,
            (None, Some(StageCfg::Unit(c))) => c.in_ch,
            (None, Some(StageCfg::Single(c))) => c.in_ch,
            (None, None) => return Err(Error::invalid("basic unit needs at least one stage")),
        };
        self.trace(self.kind.block_name(), [1, in_ch, 4, 4], &mut Vec::new()).map(|_| ())
    }

    pub fn trace(&self, name: &str, s: Shape4, out: &mut Vec<TraceEntry>) -> Result<Shape4> {
        if self.stages.is_empty() {
            return Err(trace_err(name, "basic unit needs at least one stage"));
        }
        if let Some(k) = self.dropout_keep {
            if !(k > 0.0 && k <= 1.0) {
                return Err(trace_err(name, format!("dropout keep {k} outside (0, 1]")));
            }
        }
        let mut s = s;
        if let Some(e) = &self.entry {
            let n = format!("{name}.entry");
            s = e.trace(&n, s)?;
            push(out, &n, &s);
        }
        let names = self.stage_names();
        let mut outs: Vec<Shape4> = Vec::new();
        for (i, (stage, sn)) in self.stages.iter().zip(&names).enumerate() {
            let n = format!("{name}.{sn}");
            if i > 0 {
                s = match self.connection {
                    Connection::Dense => join_shapes(&n, &outs)?,
                    _ => outs[i - 1],
                };
            }
            let o = stage.trace(&n, s)?;
            push(out, &n, &o);
            outs.push(o);
        }
        s = match self.connection {
            Connection::Dense => join_shapes(name, &outs)?,
            Connection::Straight if outs.len() > 1 => join_shapes(name, &[outs[0], outs[outs.len() - 1]])?,
            _ => outs[outs.len() - 1],
        };
        if let Some(t) = &self.tail {
            let n = format!("{name}.tail");
            s = t.trace(&n, s)?;
            push(out, &n, &s);
        }
        if let Some(a) = &self.adaption {
            let n = format!("{name}.adaption");
            s = a.trace(&n, s)?;
            push(out, &n, &s);
        }
        push(out, name, &s);
        Ok(s)
    }

    /// Output channels of the last stage.
    pub fn stage_out_ch(&self) -> usize {
        self.stages.last().map(StageCfg::out_ch).unwrap_or(0)
    }
}

fn join_shapes(block: &str, shapes: &[Shape4]) -> Result<Shape4> {
    let first = shapes[0];
    if let Some(bad) = shapes.iter().find(|s| **s != first) {
        return Err(trace_err(
            block,
            format!("connection joins mismatched shapes {first:?} and {bad:?}"),
        ));
    }
    Ok(first)
}

/// Channel-dimension merge of the two GM-Net paths.
pub fn trace_merge(merge: Merge, a: Shape4, b: Shape4) -> Result<Shape4> {
    match merge {
        Merge::Sum if a == b => Ok(a),
        Merge::Concat if a[0] == b[0] && a[2..] == b[2..] => Ok([a[0], a[1] + b[1], a[2], a[3]]),
        _ => Err(trace_err("merge", format!("cannot {merge} paths of shapes {a:?} and {b:?}"))),
    }
}

/// Everything a forward pass needs besides the input.
pub struct Ctx<'a, T: Float> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a ParamSet<T>,
    pub mode: Mode,
    /// Dropout is active only when this is set and `mode` is train.
    pub dropout: bool,
    pub rng: &'a mut dyn RngCore,
    /// Output of every named block, in execution order.
    pub outputs: Vec<(String, NodeId)>,
    /// New BN running statistics produced in train mode.
    pub stat_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Float> Ctx<'_, T> {
    fn record(&mut self, name: &str, node: NodeId) {
        self.outputs.push((name.to_string(), node));
    }
}

pub(crate) fn kaiming<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Parameter ids of one BN layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub name: String,
    pub cfg: ConvBnCfg,
    pub weight: ParamId,
    pub bn: BnIds,
}

impl ConvBn {
    /// Allocates `<name>.weight` and `<name>.bn.{gamma,beta,running_mean,running_var}`.
    pub fn build<T: Float, R: Rng + ?Sized>(
        name: &str,
        cfg: ConvBnCfg,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let c = cfg.out_ch;
        let weight = params.insert(format!("{name}.weight"), kaiming(&shape, fan_in, rng)?, ParamKind::Weight)?;
        let bn = BnIds {
            gamma: params.insert(format!("{name}.bn.gamma"), Tensor::ones(&[c])?, ParamKind::Affine)?,
            beta: params.insert(format!("{name}.bn.beta"), Tensor::zeros(&[c])?, ParamKind::Affine)?,
            running_mean: params.insert(format!("{name}.bn.running_mean"), Tensor::zeros(&[c])?, ParamKind::Buffer)?,
            running_var: params.insert(format!("{name}.bn.running_var"), Tensor::ones(&[c])?, ParamKind::Buffer)?,
        };
        Ok(Self {
            name: name.to_string(),
            cfg,
            weight,
            bn,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = ctx.graph.param(ctx.params, self.weight);
        let y = ops::conv2d(ctx.graph, x, w, None, self.cfg.conv_config())?;
        let gamma = ctx.graph.param(ctx.params, self.bn.gamma);
        let beta = ctx.graph.param(ctx.params, self.bn.beta);
        let mut mean = ctx.params.get(self.bn.running_mean).value.clone();
        let mut var = ctx.params.get(self.bn.running_var).value.clone();
        let y = ops::batch_norm(ctx.graph, y, gamma, beta, &mut mean, &mut var, BN_EPS, BN_MOMENTUM, ctx.mode)?;
        if ctx.mode == Mode::Train {
            ctx.stat_updates.push((self.bn.running_mean, mean));
            ctx.stat_updates.push((self.bn.running_var, var));
        }
        Ok(ops::relu(ctx.graph, y))
    }

    fn for_each_conv(&self, f: &mut dyn FnMut(&str, &ConvBnCfg, ParamId)) {
        f(&self.name, &self.cfg, self.weight);
    }
}

#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub name: String,
    pub cfg: ConvUnitCfg,
    pub reduce: ConvBn,
    pub conv: ConvBn,
}

impl ConvUnit {
    pub fn build<T: Float, R: Rng + ?Sized>(
        name: &str,
        cfg: ConvUnitCfg,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            name: name.to_string(),
            cfg,
            reduce: ConvBn::build(&format!("{name}.conv1x1"), cfg.reduce(), params, rng)?,
            conv: ConvBn::build(&format!("{name}.conv3x3"), cfg.conv(), params, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.reduce.forward(ctx, x)?;
        self.conv.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
pub struct AdaptionUnit {
    pub name: String,
    pub cfg: AdaptionUnitCfg,
    pub conv: ConvBn,
}

impl AdaptionUnit {
    pub fn build<T: Float, R: Rng + ?Sized>(
        name: &str,
        cfg: AdaptionUnitCfg,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            name: name.to_string(),
            cfg,
            conv: ConvBn::build(&format!("{name}.conv"), cfg.conv(), params, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(ctx, x)?;
        ops::avg_pool2d(ctx.graph, y, 2, 2)
    }
}

#[derive(Clone, Debug)]
pub enum Stage {
    Unit(ConvUnit),
    Single(ConvBn),
}

impl Stage {
    fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        match self {
            Stage::Unit(u) => u.forward(ctx, x),
            Stage::Single(c) => c.forward(ctx, x),
        }
    }

    fn name(&self) -> &str {
        match self {
            Stage::Unit(u) => &u.name,
            Stage::Single(c) => &c.name,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BasicUnit {
    pub name: String,
    pub cfg: BasicUnitCfg,
    pub entry: Option<ConvBn>,
    pub stages: Vec<Stage>,
    pub tail: Option<ConvBn>,
    pub adaption: Option<AdaptionUnit>,
}

impl BasicUnit {
    pub fn build<T: Float, R: Rng + ?Sized>(
        name: &str,
        cfg: BasicUnitCfg,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let entry = match &cfg.entry {
            Some(e) => Some(ConvBn::build(&format!("{name}.entry"), *e, params, rng)?),
            None => None,
        };
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (stage, sn) in cfg.stages.iter().zip(cfg.stage_names()) {
            let n = format!("{name}.{sn}");
            stages.push(match stage {
                StageCfg::Unit(c) => Stage::Unit(ConvUnit::build(&n, *c, params, rng)?),
                StageCfg::Single(c) => Stage::Single(ConvBn::build(&n, *c, params, rng)?),
            });
        }
        let tail = match &cfg.tail {
            Some(t) => Some(ConvBn::build(&format!("{name}.tail"), *t, params, rng)?),
            None => None,
        };
        let adaption = match &cfg.adaption {
            Some(a) => Some(AdaptionUnit::build(&format!("{name}.adaption"), *a, params, rng)?),
            None => None,
        };
        Ok(Self {
            name: name.to_string(),
            cfg,
            entry,
            stages,
            tail,
            adaption,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let mut x = x;
        if let Some(e) = &self.entry {
            x = e.forward(ctx, x)?;
            ctx.record(&e.name, x);
        }
        let mut outs: Vec<NodeId> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let input = match (i, self.cfg.connection) {
                (0, _) => x,
                (_, Connection::Dense) => ops::sum_many(ctx.graph, &outs)?,
                _ => outs[i - 1],
            };
            let y = stage.forward(ctx, input)?;
            ctx.record(stage.name(), y);
            outs.push(y);
        }
        let last = outs[outs.len() - 1];
        let mut y = match self.cfg.connection {
            Connection::Dense => ops::sum_many(ctx.graph, &outs)?,
            Connection::Straight if outs.len() > 1 => ops::elementwise_sum(ctx.graph, last, outs[0])?,
            _ => last,
        };
        if let Some(t) = &self.tail {
            y = t.forward(ctx, y)?;
            ctx.record(&t.name, y);
        }
        if let Some(a) = &self.adaption {
            y = a.forward(ctx, y)?;
            ctx.record(&a.name, y);
        }
        if let Some(keep) = self.cfg.dropout_keep {
            let mode = if ctx.dropout { ctx.mode } else { Mode::Eval };
            y = ops::dropout(ctx.graph, y, keep, mode, &mut *ctx.rng)?;
        }
        ctx.record(&self.name, y);
        Ok(y)
    }

    fn for_each_conv(&self, f: &mut dyn FnMut(&str, &ConvBnCfg, ParamId)) {
        self.entry.iter().for_each(|c| c.for_each_conv(f));
        for s in &self.stages {
            match s {
                Stage::Unit(u) => {
                    u.reduce.for_each_conv(f);
                    u.conv.for_each_conv(f);
                }
                Stage::Single(c) => c.for_each_conv(f),
            }
        }
        self.tail.iter().for_each(|c| c.for_each_conv(f));
        self.adaption.iter().for_each(|a| a.conv.for_each_conv(f));
    }
}

/// Parallel BU_f / BU_s paths joined by sum or channel concatenation.
#[derive(Clone, Debug)]
pub struct TwoPath {
    pub full: BasicUnit,
    pub single: BasicUnit,
    pub merge: Merge,
}

impl TwoPath {
    pub fn trace(full: &BasicUnitCfg, single: &BasicUnitCfg, merge: Merge, s: Shape4, out: &mut Vec<TraceEntry>) -> Result<Shape4> {
        let a = full.trace(full.kind.block_name(), s, out)?;
        let b = single.trace(single.kind.block_name(), s, out)?;
        let m = trace_merge(merge, a, b)?;
        push(out, "merge", &m);
        Ok(m)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let a = self.full.forward(ctx, x)?;
        let b = self.single.forward(ctx, x)?;
        let m = match self.merge {
            Merge::Sum => ops::elementwise_sum(ctx.graph, a, b)?,
            Merge::Concat => ops::concat_channels(ctx.graph, a, b)?,
        };
        ctx.record("merge", m);
        Ok(m)
    }
}

/// Fully connected classifier layer with bias.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn build<T: Float, R: Rng + ?Sized>(
        name: &str,
        in_features: usize,
        out_features: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let w = kaiming(&[out_features, in_features], in_features, rng)?;
        Ok(Self {
            name: name.to_string(),
            in_features,
            out_features,
            weight: params.insert(format!("{name}.weight"), w, ParamKind::Weight)?,
            bias: params.insert(format!("{name}.bias"), Tensor::zeros(&[out_features])?, ParamKind::Affine)?,
        })
    }
}

/// A top-level layer of a model, or a standalone block.
#[derive(Clone, Debug)]
pub enum Layer {
    ConvBn(ConvBn),
    ConvUnit(ConvUnit),
    Adaption(AdaptionUnit),
    Basic(BasicUnit),
    TwoPath(TwoPath),
    GlobalPool { name: String },
    Dense(DenseLayer),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::ConvBn(c) => &c.name,
            Layer::ConvUnit(u) => &u.name,
            Layer::Adaption(a) => &a.name,
            Layer::Basic(b) => &b.name,
            Layer::TwoPath(_) => "merge",
            Layer::GlobalPool { name } => name,
            Layer::Dense(d) => &d.name,
        }
    }

    /// Symbolic output shape, appending one entry per named (sub)block.
    pub fn trace(&self, input: &[usize], out: &mut Vec<TraceEntry>) -> Result<Vec<usize>> {
        let s4 = || -> Result<Shape4> {
            <Shape4>::try_from(input)
                .map_err(|_| trace_err(self.name(), format!("expects a rank-4 input, got {input:?}")))
        };
        let shape: Vec<usize> = match self {
            Layer::ConvBn(c) => c.cfg.trace(&c.name, s4()?)?.to_vec(),
            Layer::ConvUnit(u) => u.cfg.trace(&u.name, s4()?)?.to_vec(),
            Layer::Adaption(a) => a.cfg.trace(&a.name, s4()?)?.to_vec(),
            Layer::Basic(b) => return Ok(b.cfg.trace(&b.name, s4()?, out)?.to_vec()),
            Layer::TwoPath(t) => return Ok(TwoPath::trace(&t.full.cfg, &t.single.cfg, t.merge, s4()?, out)?.to_vec()),
            Layer::GlobalPool { .. } => {
                let s = s4()?;
                vec![s[0], s[1]]
            }
            Layer::Dense(d) => match input {
                [n, f] if *f == d.in_features => vec![*n, d.out_features],
                _ => {
                    return Err(trace_err(
                        &d.name,
                        format!("expects (N, {}) input, got {input:?}", d.in_features),
                    ))
                }
            },
        };
        push(out, self.name(), &shape);
        Ok(shape)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = match self {
            Layer::ConvBn(c) => c.forward(ctx, x)?,
            Layer::ConvUnit(u) => u.forward(ctx, x)?,
            Layer::Adaption(a) => a.forward(ctx, x)?,
            Layer::Basic(b) => return b.forward(ctx, x),
            Layer::TwoPath(t) => return t.forward(ctx, x),
            Layer::GlobalPool { .. } => ops::global_avg_pool(ctx.graph, x)?,
            Layer::Dense(d) => {
                let w = ctx.graph.param(ctx.params, d.weight);
                let b = ctx.graph.param(ctx.params, d.bias);
                ops::linear(ctx.graph, x, w, b)?
            }
        };
        ctx.record(self.name(), y);
        Ok(y)
    }

    /// Visit every convolution as `(layer name, config, weight id)`.
    pub fn for_each_conv(&self, f: &mut dyn FnMut(&str, &ConvBnCfg, ParamId)) {
        match self {
            Layer::ConvBn(c) => c.for_each_conv(f),
            Layer::ConvUnit(u) => {
                u.reduce.for_each_conv(f);
                u.conv.for_each_conv(f);
            }
            Layer::Adaption(a) => a.conv.for_each_conv(f),
            Layer::Basic(b) => b.for_each_conv(f),
            Layer::TwoPath(t) => {
                t.full.for_each_conv(f);
                t.single.for_each_conv(f);
            }
            Layer::GlobalPool { .. } | Layer::Dense(_) => {}
        }
    }
}

/// A standalone network fragment with its own parameters.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub layer: Layer,
    pub params: ParamSet<T>,
}

impl<T: Float> Block<T> {
    /// Trainable element count.
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn trace(&self, input: &[usize]) -> Result<Vec<TraceEntry>> {
        let mut out = Vec::new();
        self.layer.trace(input, &mut out)?;
        Ok(out)
    }

    /// Run the block on `input` outside of training, in the given mode.
    /// Running statistics are not updated.
    pub fn forward(&self, input: &Tensor<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let x = graph.constant(input.clone());
        let mut ctx = Ctx {
            graph: &mut graph,
            params: &self.params,
            mode,
            dropout: false,
            rng,
            outputs: Vec::new(),
            stat_updates: Vec::new(),
        };
        let y = self.layer.forward(&mut ctx, x)?;
        Ok(graph.value(y).clone())
    }
}

pub fn build_conv_unit<T: Float, R: Rng + ?Sized>(name: &str, cfg: ConvUnitCfg, rng: &mut R) -> Result<Block<T>> {
    let mut params = ParamSet::new();
    let unit = ConvUnit::build(name, cfg, &mut params, rng)?;
    Ok(Block {
        layer: Layer::ConvUnit(unit),
        params,
    })
}

pub fn build_adaption_unit<T: Float, R: Rng + ?Sized>(
    name: &str,
    cfg: AdaptionUnitCfg,
    rng: &mut R,
) -> Result<Block<T>> {
    let mut params = ParamSet::new();
    let unit = AdaptionUnit::build(name, cfg, &mut params, rng)?;
    Ok(Block {
        layer: Layer::Adaption(unit),
        params,
    })
}

pub fn build_basic_unit<T: Float, R: Rng + ?Sized>(name: &str, cfg: BasicUnitCfg, rng: &mut R) -> Result<Block<T>> {
    let mut params = ParamSet::new();
    let unit = BasicUnit::build(name, cfg, &mut params, rng)?;
    Ok(Block {
        layer: Layer::Basic(unit),
        params,
    })
}
