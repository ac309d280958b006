//! Architecture description and its human-readable file format.
//!
//! A layer is written the way the architectures are usually quoted:
//!
//! ```text
//! 3x3x1x2x(1x4x8->8) stride 1
//! ```
//!
//! i.e. `kh x kw x in x out x (g x m x n -> p)` followed by the stride. The
//! capsule in parentheses is the input capsule `(g, m, n)` the layer reads
//! and `p` is the third dimension of its output capsule; the weight capsule
//! is therefore `(g, n, p)`. `×` and `→` are accepted as well.
//!
//! A model file is TOML:
//!
//! ```toml
//! name = "p2"
//! input = "1x28x28x(1x1x1)"
//! init_seed = 0
//! layers = ["3x3x1x1x(1x1x1->16) stride 2", "..."]
//!
//! [loss]
//! m_plus = 0.5
//! m_minus = 0.1
//! lambda = 0.5
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::infer_output_shape;
use crate::error::{Error, Result};
use crate::loss::MarginLossConfig;
use crate::tensor::{CapsuleShape, FeatureMapShape, KernelShape};

/// One capsule convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerConfig {
    pub kh: usize,
    pub kw: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub capsule_in: CapsuleShape,
    pub p: usize,
    pub stride: usize,
}

impl LayerConfig {
    pub fn kernel_shape(&self) -> KernelShape {
        KernelShape {
            kh: self.kh,
            kw: self.kw,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            capsule_in: self.capsule_in,
            p: self.p,
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel_shape().param_count()
    }

    /// Scalars feeding one output scalar: `kh * kw * in * n`.
    pub fn fan_in(&self) -> usize {
        self.kh * self.kw * self.in_channels * self.capsule_in.n
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.kh,
            self.kw,
            self.in_channels,
            self.out_channels,
            self.p,
            self.stride,
        ];
        if dims.contains(&0) {
            return Err(Error::config(format!("layer {self} has a zero extent")));
        }
        Ok(())
    }
}

impl fmt::Display for LayerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.capsule_in;
        write!(
            f,
            "{}x{}x{}x{}x({}x{}x{}->{}) stride {}",
            self.kh, self.kw, self.in_channels, self.out_channels, c.g, c.m, c.n, self.p, self.stride
        )
    }
}

fn parse_dims(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split('x')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad {what} extent {t:?}")))
        })
        .collect()
}

fn normalize(text: &str) -> String {
    text.replace('×', "x").replace('→', "->")
}

impl FromStr for LayerConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let norm = normalize(text);
        let bad = || Error::config(format!("cannot parse layer {text:?}"));
        let open = norm.find('(').ok_or_else(bad)?;
        let close = norm.find(')').ok_or_else(bad)?;
        let head = norm[..open].trim().trim_end_matches('x');
        let kernel = parse_dims(head, "kernel")?;
        let [kh, kw, in_channels, out_channels] = kernel[..] else {
            return Err(bad());
        };
        let (caps, p) = norm[open + 1..close].split_once("->").ok_or_else(bad)?;
        let caps = parse_dims(caps, "capsule")?;
        let [g, m, n] = caps[..] else {
            return Err(bad());
        };
        let p = p.trim().parse().map_err(|_| bad())?;
        let mut tail = norm[close + 1..].split_whitespace();
        let stride = match (tail.next(), tail.next(), tail.next()) {
            (None, _, _) => 1,
            (Some("stride"), Some(s), None) => s.parse().map_err(|_| bad())?,
            _ => return Err(bad()),
        };
        let layer = LayerConfig {
            kh,
            kw,
            in_channels,
            out_channels,
            capsule_in: CapsuleShape::new(g, m, n)?,
            p,
            stride,
        };
        layer.validate()?;
        Ok(layer)
    }
}

/// A feed-forward stack of capsule layers ending in one capsule per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    /// Geometry of one input item (batch extent 1).
    pub input_shape: FeatureMapShape,
    pub layers: Vec<LayerConfig>,
    pub loss: MarginLossConfig,
    pub init_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    name: String,
    input: String,
    #[serde(default)]
    init_seed: u64,
    layers: Vec<String>,
    #[serde(default)]
    loss: MarginLossConfig,
}

impl ModelConfig {
    /// Output shape of every layer for a batch of one.
    pub fn shape_chain(&self) -> Result<Vec<FeatureMapShape>> {
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        let mut shape = self.input_shape.with_batch(1);
        let mut chain = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            shape = infer_output_shape(&shape, &layer.kernel_shape(), layer.stride)
                .map_err(|e| Error::config(format!("layer {} ({layer}): {e}", idx + 1)))?;
            chain.push(shape);
        }
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let last = *self.shape_chain()?.last().expect("non-empty");
        if last.height != 1 || last.width != 1 {
            return Err(Error::config(format!(
                "final layer must end at 1x1 spatial extent, got {}x{}",
                last.height, last.width
            )));
        }
        if last.channels < 2 {
            return Err(Error::config("final layer needs at least two class channels"));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn count_parameters(&self) -> usize {
        self.layers.iter().map(LayerConfig::param_count).sum()
    }

    pub fn to_toml(&self) -> String {
        let s = self.input_shape;
        let c = s.capsule;
        let file = ConfigFile {
            name: self.name.clone(),
            input: format!("{}x{}x{}x({}x{}x{})", s.channels, s.height, s.width, c.g, c.m, c.n),
            init_seed: self.init_seed,
            layers: self.layers.iter().map(ToString::to_string).collect(),
            loss: self.loss,
        };
        toml::to_string(&file).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| Error::config(format!("model file: {e}")))?;
        let input = normalize(&file.input);
        let bad = || Error::config(format!("cannot parse input shape {:?}", file.input));
        let open = input.find('(').ok_or_else(bad)?;
        let close = input.find(')').ok_or_else(bad)?;
        let head = parse_dims(input[..open].trim().trim_end_matches('x'), "input")?;
        let [channels, height, width] = head[..] else {
            return Err(bad());
        };
        let cap = parse_dims(&input[open + 1..close], "capsule")?;
        let [g, m, n] = cap[..] else {
            return Err(bad());
        };
        let config = ModelConfig {
            name: file.name,
            input_shape: FeatureMapShape::new(1, channels, height, width, CapsuleShape::new(g, m, n)?)?,
            layers: file
                .layers
                .iter()
                .map(|l| l.parse())
                .collect::<Result<Vec<_>>>()?,
            loss: file.loss,
            init_seed: file.init_seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 of the canonical file form.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }
}
