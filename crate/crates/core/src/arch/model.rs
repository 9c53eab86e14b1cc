//! Whole-network construction, parameter accounting, shape tracing and
//! feature-map taps.

use rand::{Rng, RngCore, SeedableRng};

use crate::arch::blocks::{
    AdaptionUnit, AdaptionUnitCfg, BasicUnit, BasicUnitCfg, ConvBn, ConvBnCfg, ConvUnitCfg, Ctx, DenseLayer, Layer,
    Shape4, StageCfg, TraceEntry, TwoPath, UnitKind,
};
use crate::arch::spec::{Bottleneck, Connection, Groups, Merge, ModelSpec, Variant};
use crate::autodiff::{Graph, NodeId, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Float, Tensor};

/// Layer configuration of a model before any parameter is allocated.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerPlan {
    ConvBn { name: String, cfg: ConvBnCfg },
    Basic { name: String, cfg: BasicUnitCfg },
    TwoPath { full: BasicUnitCfg, single: BasicUnitCfg, merge: Merge },
    Adaption { name: String, cfg: AdaptionUnitCfg },
    GlobalPool { name: String },
    Dense { name: String, in_features: usize, out_features: usize },
}

impl LayerPlan {
    fn trace(&self, input: &[usize], out: &mut Vec<TraceEntry>) -> Result<Vec<usize>> {
        let s4 = |name: &str| -> Result<Shape4> {
            <Shape4>::try_from(input).map_err(|_| Error::Trace {
                block: name.to_string(),
                detail: format!("expects a rank-4 input, got {input:?}"),
            })
        };
        let (name, shape): (&str, Vec<usize>) = match self {
            LayerPlan::ConvBn { name, cfg } => (name, cfg.trace(name, s4(name)?)?.to_vec()),
            LayerPlan::Adaption { name, cfg } => (name, cfg.trace(name, s4(name)?)?.to_vec()),
            LayerPlan::Basic { name, cfg } => return Ok(cfg.trace(name, s4(name)?, out)?.to_vec()),
            LayerPlan::TwoPath { full, single, merge } => {
                return Ok(TwoPath::trace(full, single, *merge, s4("merge")?, out)?.to_vec())
            }
            LayerPlan::GlobalPool { name } => {
                let s = s4(name)?;
                (name, vec![s[0], s[1]])
            }
            LayerPlan::Dense {
                name,
                in_features,
                out_features,
            } => match input {
                [n, f] if f == in_features => (name, vec![*n, *out_features]),
                _ => {
                    return Err(Error::Trace {
                        block: name.clone(),
                        detail: format!("expects (N, {in_features}) input, got {input:?}"),
                    })
                }
            },
        };
        out.push(TraceEntry {
            name: name.to_string(),
            shape: shape.clone(),
        });
        Ok(shape)
    }
}

struct Planner<'a> {
    spec: &'a ModelSpec,
}

impl Planner<'_> {
    fn ch(&self, base: usize) -> usize {
        self.spec.channels(base)
    }

    fn groups(&self, g: Groups, channels: usize) -> Result<usize> {
        g.resolve(channels)
    }

    fn conv_unit(&self, in_ch: usize, out_ch: usize, g: usize) -> ConvUnitCfg {
        let mut cu = ConvUnitCfg::new(in_ch, out_ch, g);
        if self.spec.bottleneck == Bottleneck::Grouped {
            // the largest divisor of g that also divides both 1×1 widths
            cu.groups_1x1 = gcd(g, gcd(in_ch, cu.mid_ch));
        }
        cu
    }

    fn three_units(&self, in_ch: usize, out_ch: usize, g: usize) -> Vec<StageCfg> {
        (0..3)
            .map(|i| StageCfg::Unit(self.conv_unit(if i == 0 { in_ch } else { out_ch }, out_ch, g)))
            .collect()
    }

    fn unit(&self, kind: UnitKind, stages: Vec<StageCfg>) -> BasicUnitCfg {
        BasicUnitCfg {
            kind,
            connection: self.spec.connection,
            entry: None,
            stages,
            tail: None,
            adaption: None,
            dropout_keep: None,
        }
    }

    fn adaption(&self, channels: usize, g: Groups) -> Result<AdaptionUnitCfg> {
        Ok(AdaptionUnitCfg {
            in_ch: channels,
            out_ch: channels,
            kernel: 3,
            groups: self.groups(g, channels)?,
        })
    }

    fn bu_i(&self) -> Result<BasicUnitCfg> {
        let (c64, c128) = (self.ch(64), self.ch(128));
        let g = self.groups(self.spec.groups.bu_i, c128)?;
        let mut u = self.unit(UnitKind::Input, self.three_units(c64, c128, g));
        u.adaption = Some(self.adaption(c128, self.spec.groups.au_i)?);
        u.dropout_keep = Some(self.spec.dropout_keep);
        Ok(u)
    }

    fn bu_e(&self, in_ch: usize) -> Result<BasicUnitCfg> {
        let c384 = self.ch(384);
        let g = self.groups(self.spec.groups.bu_e, c384)?;
        let mut u = self.unit(UnitKind::End, self.three_units(in_ch, c384, g));
        u.tail = Some(ConvBnCfg::new(c384, c384, 1, self.groups(self.spec.groups.tail, c384)?));
        u.dropout_keep = Some(self.spec.dropout_keep);
        Ok(u)
    }

    fn plan(&self) -> Result<Vec<LayerPlan>> {
        let spec = self.spec;
        spec.validate()?;
        let (c64, c128, c256) = (self.ch(64), self.ch(128), self.ch(256));
        let mut layers = vec![
            LayerPlan::ConvBn {
                name: "stem".into(),
                cfg: ConvBnCfg::new(spec.in_channels, c64, 3, 1),
            },
            LayerPlan::Basic {
                name: "bu_i".into(),
                cfg: self.bu_i()?,
            },
        ];
        let e_in = match spec.variant {
            Variant::GmNet => {
                let full = self.unit(UnitKind::Full, self.three_units(c128, c256, 1));
                let mut single = self.unit(
                    UnitKind::Single,
                    (0..3)
                        .map(|_| StageCfg::Single(ConvBnCfg::new(c256, c256, 3, c256)))
                        .collect(),
                );
                single.entry = Some(ConvBnCfg::new(c128, c256, 1, 1));
                let merged = match spec.merge {
                    Merge::Sum => c256,
                    Merge::Concat => 2 * c256,
                };
                layers.push(LayerPlan::TwoPath {
                    full,
                    single,
                    merge: spec.merge,
                });
                layers.push(LayerPlan::Adaption {
                    name: "adaption".into(),
                    cfg: self.adaption(merged, spec.groups.au_merge)?,
                });
                merged
            }
            Variant::Baseline => {
                let g = self.groups(spec.groups.bu_m, c256)?;
                let mut m = self.unit(UnitKind::Middle, self.three_units(c128, c256, g));
                m.adaption = Some(self.adaption(c256, spec.groups.au_m)?);
                layers.push(LayerPlan::Basic {
                    name: "bu_m".into(),
                    cfg: m,
                });
                c256
            }
        };
        let e = self.bu_e(e_in)?;
        let c384 = e.stage_out_ch();
        layers.push(LayerPlan::Basic {
            name: "bu_e".into(),
            cfg: e,
        });
        layers.push(LayerPlan::GlobalPool { name: "gap".into() });
        layers.push(LayerPlan::Dense {
            name: "fc".into(),
            in_features: c384,
            out_features: spec.num_classes,
        });
        Ok(layers)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// The layer plan a spec expands to.
pub fn plan(spec: &ModelSpec) -> Result<Vec<LayerPlan>> {
    Planner { spec }.plan()
}

fn trace_plan(layers: &[LayerPlan], input_shape: &[usize]) -> Result<Vec<TraceEntry>> {
    let mut out = Vec::new();
    let mut s = input_shape.to_vec();
    for l in layers {
        s = l.trace(&s, &mut out).map_err(|e| with_trace(e, &out))?;
    }
    Ok(out)
}

fn with_trace(e: Error, so_far: &[TraceEntry]) -> Error {
    match e {
        Error::Trace { block, detail } => {
            let trace: Vec<String> = so_far.iter().map(|t| format!("{} {:?}", t.name, t.shape)).collect();
            Error::Trace {
                block,
                detail: format!("{detail}; traced so far: [{}]", trace.join(", ")),
            }
        }
        other => other,
    }
}

/// Symbolic shape propagation of `spec` over `input_shape` without building
/// parameters or activations. Entries cover every named block, nested blocks
/// first, in execution order.
pub fn forward_trace(spec: &ModelSpec, input_shape: &[usize]) -> Result<Vec<TraceEntry>> {
    trace_plan(&plan(spec)?, input_shape)
}

/// Names of the top-level blocks, in the order they appear in a trace.
pub fn top_level(trace: &[TraceEntry]) -> Vec<&TraceEntry> {
    trace.iter().filter(|t| !t.name.contains('.')).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Apply dropout in train mode. Gradient checks turn this off to keep
    /// the loss deterministic.
    pub dropout: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            dropout: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: false,
        }
    }
}

pub struct ForwardPass<T> {
    pub logits: NodeId,
    /// Output node of every named block in execution order.
    pub outputs: Vec<(String, NodeId)>,
    /// Running statistics computed in train mode, applied with
    /// [`Model::apply_stat_updates`].
    pub stat_updates: Vec<(ParamId, Tensor<T>)>,
}

/// Parameter totals: trainable element count overall and per top-level block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub blocks: Vec<(String, usize)>,
}

/// A convolution layer as built, for accounting checks.
#[derive(Clone, Debug)]
pub struct ConvInfo {
    pub name: String,
    pub cfg: ConvBnCfg,
    pub stored: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
    pub layers: Vec<Layer>,
}

impl<T: Float> Model<T> {
    /// Build the network described by `spec`, drawing initial weights from
    /// `rng`.
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let plan = plan(spec)?;
        trace_plan(&plan, &[1, spec.in_channels, spec.input_size, spec.input_size])?;
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(plan.len());
        for l in plan {
            layers.push(match l {
                LayerPlan::ConvBn { name, cfg } => Layer::ConvBn(ConvBn::build(&name, cfg, &mut params, rng)?),
                LayerPlan::Basic { name, cfg } => Layer::Basic(BasicUnit::build(&name, cfg, &mut params, rng)?),
                LayerPlan::TwoPath { full, single, merge } => Layer::TwoPath(TwoPath {
                    full: BasicUnit::build(full.kind.block_name(), full, &mut params, rng)?,
                    single: BasicUnit::build(single.kind.block_name(), single, &mut params, rng)?,
                    merge,
                }),
                LayerPlan::Adaption { name, cfg } => {
                    Layer::Adaption(AdaptionUnit::build(&name, cfg, &mut params, rng)?)
                }
                LayerPlan::GlobalPool { name } => Layer::GlobalPool { name },
                LayerPlan::Dense {
                    name,
                    in_features,
                    out_features,
                } => Layer::Dense(DenseLayer::build(&name, in_features, out_features, &mut params, rng)?),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            params,
            layers,
        })
    }

    /// Record a forward pass of `input` onto `graph` using the model's own
    /// parameters.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        input: NodeId,
        opts: ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardPass<T>> {
        self.forward_with(&self.params, graph, input, opts, rng)
    }

    /// As [`Model::forward`], reading parameter values from `params`, which
    /// must share this model's layout.
    pub fn forward_with(
        &self,
        params: &ParamSet<T>,
        graph: &mut Graph<T>,
        input: NodeId,
        opts: ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardPass<T>> {
        let mut ctx = Ctx {
            graph,
            params,
            mode: opts.mode,
            dropout: opts.dropout,
            rng,
            outputs: Vec::new(),
            stat_updates: Vec::new(),
        };
        let mut x = input;
        for l in &self.layers {
            x = l.forward(&mut ctx, x)?;
        }
        Ok(ForwardPass {
            logits: x,
            outputs: ctx.outputs,
            stat_updates: ctx.stat_updates,
        })
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, value) in updates {
            self.params.get_mut(id).value = value;
        }
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let x = graph.constant(input.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut graph, x, ForwardOptions::eval(), &mut rng)?;
        Ok(graph.value(pass.logits).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Trainable totals grouped by the first component of each parameter
    /// name (`stem`, `bu_i`, `bu_f`, ...). BN running statistics are excluded.
    pub fn count_params(&self) -> ParamCount {
        let mut blocks: Vec<(String, usize)> = Vec::new();
        for (_, name, p) in self.params.iter() {
            if !p.trainable() {
                continue;
            }
            let block = name.split('.').next().unwrap_or(name);
            match blocks.iter_mut().find(|(b, _)| b == block) {
                Some((_, n)) => *n += p.value.numel(),
                None => blocks.push((block.to_string(), p.value.numel())),
            }
        }
        ParamCount {
            total: blocks.iter().map(|(_, n)| n).sum(),
            blocks,
        }
    }

    /// Every convolution with its config and stored weight element count.
    pub fn conv_layers(&self) -> Vec<ConvInfo> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.for_each_conv(&mut |name, cfg, id| {
                out.push(ConvInfo {
                    name: name.to_string(),
                    cfg: *cfg,
                    stored: self.params.get(id).value.numel(),
                })
            });
        }
        out
    }

    /// Number of convolution plus fully connected layers, counting both
    /// parallel paths.
    pub fn depth(&self) -> usize {
        self.conv_layers().len() + self.layers.iter().filter(|l| matches!(l, Layer::Dense(_))).count()
    }

    pub fn trace(&self, input_shape: &[usize]) -> Result<Vec<TraceEntry>> {
        let mut out = Vec::new();
        let mut s = input_shape.to_vec();
        for l in &self.layers {
            s = l.trace(&s, &mut out).map_err(|e| with_trace(e, &out))?;
        }
        Ok(out)
    }

    /// Every block name that can be tapped.
    pub fn tap_names(&self) -> Vec<String> {
        let shape = [1, self.spec.in_channels, self.spec.input_size, self.spec.input_size];
        self.trace(&shape)
            .map(|t| t.into_iter().map(|e| e.name).collect())
            .unwrap_or_default()
    }

    /// The four canonical taps for GM-Net (end of BU_s, end of BU_f, the
    /// post-merge adaption unit, the last conv layer); the baseline uses the
    /// ends of BU_i and BU_m and the last conv layer.
    pub fn default_taps(&self) -> Vec<String> {
        let names: &[&str] = match self.spec.variant {
            Variant::GmNet => &["bu_s", "bu_f", "adaption", "bu_e.tail"],
            Variant::Baseline => &["bu_i", "bu_m", "bu_e.tail"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

/// Eval-mode activations at the named blocks. Unknown names are rejected
/// with the list of valid ones.
pub fn extract_feature_maps<T: Float>(
    model: &Model<T>,
    input: &Tensor<T>,
    taps: &[String],
) -> Result<Vec<(String, Tensor<T>)>> {
    let available = model.tap_names();
    if let Some(bad) = taps.iter().find(|t| !available.contains(t)) {
        return Err(Error::UnknownTap {
            name: bad.clone(),
            available: available.join(", "),
        });
    }
    let mut graph = Graph::new();
    let x = graph.constant(input.clone());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let pass = model.forward(&mut graph, x, ForwardOptions::eval(), &mut rng)?;
    Ok(taps
        .iter()
        .map(|t| {
            let id = pass.outputs.iter().find(|(n, _)| n == t).map(|(_, id)| *id).unwrap_or(pass.logits);
            (t.clone(), graph.value(id).clone())
        })
        .collect())
}

/// Per-block and total trainable parameter counts.
pub fn count_params<T: Float>(model: &Model<T>) -> ParamCount {
    model.count_params()
}

pub fn build_gmnet<T: Float, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model<T>> {
    let spec = ModelSpec {
        variant: Variant::GmNet,
        ..spec.clone()
    };
    Model::build(&spec, rng)
}

pub fn build_baseline<T: Float, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model<T>> {
    let spec = ModelSpec {
        variant: Variant::Baseline,
        ..spec.clone()
    };
    Model::build(&spec, rng)
}

/// All connection modes, for grid sweeps.
pub const CONNECTIONS: [Connection; 3] = [Connection::Dense, Connection::Straight, Connection::None];
