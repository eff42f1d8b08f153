//! Small reference architectures.

use super::{Aggregation, ArchSpec, BodySpec, LayerSpec, ModuleSpec};
use crate::gating::{Dimension, Discretization, GatingStrategy, Ordering};

fn conv(out: usize) -> LayerSpec {
    LayerSpec::Conv {
        out,
        kernel: 3,
        stride: 1,
        pad: 1,
    }
}

fn pool() -> LayerSpec {
    LayerSpec::MaxPool { size: 2, stride: 2 }
}

fn widthwise(ordering: Ordering) -> GatingStrategy {
    GatingStrategy {
        dimension: Dimension::Widthwise,
        ordering,
    }
}

fn gated_conv(out: usize, groups: usize, ordering: Ordering) -> LayerSpec {
    LayerSpec::Gated(ModuleSpec {
        body: BodySpec::ConvGroups {
            out,
            kernel: 3,
            stride: 1,
            pad: 1,
            groups,
        },
        strategy: widthwise(ordering),
        min_active: 1,
        discretization: Discretization::Floor,
    })
}

/// Four widthwise-gated 3x3 convolutions with `groups` components each and a
/// dense classifier. Spatial size shrinks by 4.
pub fn vgg_w(input: &[usize], width: usize, groups: usize, classes: usize, ordering: Ordering) -> ArchSpec {
    ArchSpec {
        input: input.to_vec(),
        layers: vec![
            gated_conv(width, groups, ordering),
            LayerSpec::Relu,
            pool(),
            gated_conv(width, groups, ordering),
            LayerSpec::Relu,
            gated_conv(width, groups, ordering),
            LayerSpec::Relu,
            pool(),
            gated_conv(width, groups, ordering),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { out: classes },
        ],
    }
}

/// Stem convolution, then residual stages of two-conv blocks that are gated
/// depthwise (a stage may be skipped entirely), a pool between stages.
pub fn resnet_d(input: &[usize], width: usize, stages: &[usize], classes: usize) -> ArchSpec {
    let mut layers = vec![conv(width), LayerSpec::Relu];
    for (i, &blocks) in stages.iter().enumerate() {
        if i > 0 {
            layers.push(pool());
        }
        layers.push(LayerSpec::Gated(ModuleSpec {
            body: BodySpec::Residual {
                blocks: (0..blocks)
                    .map(|_| vec![conv(width), LayerSpec::Relu, conv(width)])
                    .collect(),
            },
            strategy: GatingStrategy::DEPTH_NESTED,
            min_active: 0,
            discretization: Discretization::Floor,
        }));
    }
    layers.extend([LayerSpec::Flatten, LayerSpec::Dense { out: classes }]);
    ArchSpec {
        input: input.to_vec(),
        layers,
    }
}

/// Ungated stem, one gated convolution and one gated dense layer.
pub fn c3d_w_style(input: &[usize], groups: usize, classes: usize) -> ArchSpec {
    ArchSpec {
        input: input.to_vec(),
        layers: vec![
            conv(8),
            LayerSpec::Relu,
            pool(),
            gated_conv(16, groups, Ordering::Nested),
            LayerSpec::Relu,
            pool(),
            LayerSpec::Flatten,
            LayerSpec::Gated(ModuleSpec {
                body: BodySpec::DenseGroups {
                    out: 4 * groups,
                    groups,
                },
                strategy: GatingStrategy::WIDTH_NESTED,
                min_active: 1,
                discretization: Discretization::Floor,
            }),
            LayerSpec::Relu,
            LayerSpec::Dense { out: classes },
        ],
    }
}

/// One module of parallel conv branches, aggregated by concat or sum.
pub fn branch_net(input: &[usize], branches: usize, aggregation: Aggregation, classes: usize) -> ArchSpec {
    ArchSpec {
        input: input.to_vec(),
        layers: vec![
            LayerSpec::Gated(ModuleSpec {
                body: BodySpec::Branches {
                    aggregation,
                    branches: (0..branches).map(|_| vec![conv(4), LayerSpec::Relu]).collect(),
                },
                strategy: GatingStrategy::WIDTH_NESTED,
                min_active: match aggregation {
                    Aggregation::Concat => 1,
                    Aggregation::Sum => 0,
                },
                discretization: Discretization::Floor,
            }),
            pool(),
            LayerSpec::Flatten,
            LayerSpec::Dense { out: classes },
        ],
    }
}
