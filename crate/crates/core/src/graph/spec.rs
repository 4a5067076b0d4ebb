use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::ops::{ConvParams, LrnParams, PoolParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerKind {
    Input,
    Conv,
    Pool,
    InnerProduct,
    Relu,
    Lrn,
    Softmax,
    Quantizer,
    Dropout,
    Moe,
}

impl LayerKind {
    /// Layers that only ever run in FP32.
    pub fn fp32_only(self) -> bool {
        matches!(self, LayerKind::Softmax | LayerKind::Lrn)
    }

    /// Layers whose output values are a subset of their input values, so
    /// the output can share the input's quantizer values.
    pub fn value_preserving(self) -> bool {
        matches!(self, LayerKind::Quantizer | LayerKind::Pool | LayerKind::Dropout)
    }

    /// Layers allowed to change type between input and output.
    pub fn converts(self) -> bool {
        matches!(self, LayerKind::Quantizer | LayerKind::Moe)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Filler {
    Constant {
        #[serde(default)]
        value: f32,
    },
    Gaussian {
        #[serde(default)]
        mean: f32,
        #[serde(default = "one")]
        std: f32,
    },
    Uniform {
        #[serde(default = "neg_one")]
        min: f32,
        #[serde(default = "one")]
        max: f32,
    },
}

fn one() -> f32 {
    1.0
}

fn neg_one() -> f32 {
    -1.0
}

fn yes() -> bool {
    true
}

impl Default for Filler {
    fn default() -> Self {
        Filler::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputParam {
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionParam {
    #[serde(flatten)]
    pub conv: ConvParams,
    #[serde(default = "yes")]
    pub bias_term: bool,
    #[serde(default)]
    pub weight_filler: Filler,
    #[serde(default)]
    pub bias_filler: Filler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerProductParam {
    pub num_output: usize,
    #[serde(default = "yes")]
    pub bias_term: bool,
    #[serde(default)]
    pub weight_filler: Filler,
    #[serde(default)]
    pub bias_filler: Filler,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReluParam {
    #[serde(default)]
    pub negative_slope: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BatchMode {
    #[default]
    PerSample,
    AllExperts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeParam {
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub batch_mode: BatchMode,
    /// Produces the gating features `x` from the layer input.
    pub gating_net: Box<GraphSpec>,
    /// Template instantiated once per expert with independent weights.
    pub expert_net: Box<GraphSpec>,
    #[serde(default)]
    pub noise: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "MoeParam::default_gate_filler")]
    pub gate_filler: Filler,
}

impl MoeParam {
    fn default_gate_filler() -> Filler {
        Filler::Gaussian { mean: 0.0, std: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: LayerKind,
    #[serde(default)]
    pub bottoms: Vec<String>,
    #[serde(default)]
    pub tops: Vec<String>,
    #[serde(default = "fp32")]
    pub bottom_data_type: DataType,
    #[serde(default = "fp32")]
    pub compute_data_type: DataType,
    #[serde(default = "fp32")]
    pub top_data_type: DataType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_param: Option<InputParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convolution_param: Option<ConvolutionParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling_param: Option<PoolParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_product_param: Option<InnerProductParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relu_param: Option<ReluParam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lrn_param: Option<LrnParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe_param: Option<MoeParam>,
}

fn fp32() -> DataType {
    DataType::Fp32
}

impl LayerSpec {
    /// A layer of `kind` with all three types FP32 and no parameters.
    pub fn new(name: &str, kind: LayerKind, bottoms: &[&str], tops: &[&str]) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            bottoms: bottoms.iter().map(|s| s.to_string()).collect(),
            tops: tops.iter().map(|s| s.to_string()).collect(),
            bottom_data_type: DataType::Fp32,
            compute_data_type: DataType::Fp32,
            top_data_type: DataType::Fp32,
            input_param: None,
            convolution_param: None,
            pooling_param: None,
            inner_product_param: None,
            relu_param: None,
            lrn_param: None,
            moe_param: None,
        }
    }

    pub fn input(name: &str, top: &str, shape: &[usize]) -> Self {
        let mut l = LayerSpec::new(name, LayerKind::Input, &[], &[top]);
        l.input_param = Some(InputParam { shape: shape.to_vec() });
        l
    }

    pub fn with_types(mut self, mi: DataType, d: DataType, mo: DataType) -> Self {
        self.bottom_data_type = mi;
        self.compute_data_type = d;
        self.top_data_type = mo;
        self
    }

    pub fn types(&self) -> (DataType, DataType, DataType) {
        (self.bottom_data_type, self.compute_data_type, self.top_data_type)
    }

    /// Names of the parameter sets this layer owns, in a fixed order.
    pub fn param_names(&self) -> Vec<String> {
        let with_bias = |bias: bool| {
            let mut v = vec![format!("{}.weight", self.name)];
            if bias {
                v.push(format!("{}.bias", self.name));
            }
            v
        };
        match self.kind {
            LayerKind::Conv => with_bias(self.convolution_param.as_ref().is_none_or(|p| p.bias_term)),
            LayerKind::InnerProduct => with_bias(self.inner_product_param.as_ref().is_none_or(|p| p.bias_term)),
            LayerKind::Moe => match &self.moe_param {
                Some(mp) => {
                    let mut v: Vec<String> = mp
                        .gating_net
                        .param_names()
                        .into_iter()
                        .map(|p| format!("{}.gating.{p}", self.name))
                        .collect();
                    for e in 0..mp.n_experts {
                        v.extend(mp.expert_net.param_names().into_iter().map(|p| format!("{}.expert{e}.{p}", self.name)));
                    }
                    v.extend(["w_a", "w_b", "w_c"].map(|w| format!("{}.{w}", self.name)));
                    v
                }
                None => Vec::new(),
            },
            _ => Vec::new(),
        }
    }
}

/// A network description: layers in declaration order plus the blobs
/// that must keep their own buffer for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inspect: Vec<String>,
}

impl GraphSpec {
    pub fn new(name: &str, layers: Vec<LayerSpec>) -> Self {
        GraphSpec { name: name.to_string(), layers, inspect: Vec::new() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        GraphSpec::from_json(&text)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// All parameter-set names, in layer order.
    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(|l| l.param_names()).collect()
    }

    /// Top blobs of INPUT layers.
    pub fn input_blobs(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Input)
            .flat_map(|l| l.tops.iter().map(String::as_str))
            .collect()
    }

    /// Blobs produced but never consumed.
    pub fn output_blobs(&self) -> Vec<&str> {
        let consumed: std::collections::HashSet<&str> =
            self.layers.iter().flat_map(|l| l.bottoms.iter().map(String::as_str)).collect();
        self.layers
            .iter()
            .flat_map(|l| l.tops.iter().map(String::as_str))
            .filter(|t| !consumed.contains(t))
            .collect()
    }
}
