//! GM-Net and baseline architectures.

mod blocks;
mod model;
mod spec;

pub use blocks::{
    build_adaption_unit, build_basic_unit, build_conv_unit, AdaptionUnit, AdaptionUnitCfg, BasicUnit, BasicUnitCfg,
    Block, BnIds, ConvBn, ConvBnCfg, ConvUnit, ConvUnitCfg, Ctx, DenseLayer, Layer, Shape4, Stage, StageCfg,
    TraceEntry, TwoPath, UnitKind,
};
pub use model::{
    build_baseline, build_gmnet, count_params, extract_feature_maps, forward_trace, plan, top_level, ConvInfo,
    ForwardOptions, ForwardPass, LayerPlan, Model, ParamCount, CONNECTIONS,
};
pub use spec::{Bottleneck, Connection, Dataset, GroupProfile, Groups, Merge, ModelSpec, Variant};
