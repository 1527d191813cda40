use std::fmt;

use serde::{Deserialize, Serialize};

/// Operation performed by a node of an architecture graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Input,
    Conv2d,
    Linear,
    #[serde(rename = "batchnorm")]
    BatchNorm,
    Relu,
    Silu,
    #[serde(rename = "maxpool")]
    MaxPool,
    #[serde(rename = "avgpool")]
    AvgPool,
    GlobalAvgPool,
    Add,
    Concat,
    ClassifierHead,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Input,
        OpKind::Conv2d,
        OpKind::Linear,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Silu,
        OpKind::MaxPool,
        OpKind::AvgPool,
        OpKind::GlobalAvgPool,
        OpKind::Add,
        OpKind::Concat,
        OpKind::ClassifierHead,
    ];

    pub const COUNT: usize = Self::ALL.len();

    /// Row of this op in the hypernetwork's op embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether nodes of this kind own a parameter tensor.
    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            OpKind::Conv2d | OpKind::Linear | OpKind::BatchNorm | OpKind::ClassifierHead
        )
    }

    /// Ops whose output variance the activation trace records.
    pub fn is_traced(self) -> bool {
        matches!(self, OpKind::Conv2d | OpKind::Linear)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Silu => "silu",
            OpKind::MaxPool => "maxpool",
            OpKind::AvgPool => "avgpool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::ClassifierHead => "classifier_head",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which half of a batch norm a node represents. Batch norm is split into a
/// scale node followed by a shift node so every parametric node owns exactly
/// one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnRole {
    Scale,
    Shift,
}

/// Shape of the tensor owned by a parametric node: `(o,)`, `(o, i)` or
/// `(o, i, kh, kw)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamShape(Vec<usize>);

impl ParamShape {
    pub fn new(dims: Vec<usize>) -> Option<Self> {
        let ok = matches!(dims.len(), 1 | 2 | 4) && dims.iter().all(|&d| d >= 1);
        ok.then_some(Self(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

/// Static per-node attributes. Unused fields are `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeAttrs {
    /// Output channels (conv, input), output features (linear) or classes (head).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Spatial extent of the square input image; input node only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<BnRole>,
}

impl NodeAttrs {
    pub fn channels(c: usize) -> Self {
        Self {
            channels: Some(c),
            ..Self::default()
        }
    }

    pub fn conv(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels: Some(channels),
            kernel: Some(kernel),
            stride: Some(stride),
            ..Self::default()
        }
    }

    pub fn pool(kernel: usize, stride: usize) -> Self {
        Self {
            kernel: Some(kernel),
            stride: Some(stride),
            ..Self::default()
        }
    }

    pub fn bn(role: BnRole) -> Self {
        Self {
            role: Some(role),
            ..Self::default()
        }
    }

    pub fn input(channels: usize, size: usize) -> Self {
        Self {
            channels: Some(channels),
            size: Some(size),
            ..Self::default()
        }
    }
}

/// Activation shape flowing out of a node, excluding the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActShape {
    Map { channels: usize, height: usize, width: usize },
    Vector { features: usize },
}

impl ActShape {
    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Map { channels, .. } => channels,
            ActShape::Vector { features } => features,
        }
    }

    pub fn is_map(&self) -> bool {
        matches!(self, ActShape::Map { .. })
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Map {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
            ActShape::Vector { features } => write!(f, "{features}"),
        }
    }
}
