use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

/// Local response normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnSpec {
    pub depth: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnSpec {
    /// The classic AlexNet constants.
    fn default() -> Self {
        Self {
            depth: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnSpec {
    /// `alpha = 0, k = 1`: the layer passes its input through unchanged.
    pub fn identity() -> Self {
        Self {
            depth: 1,
            k: 1.0,
            alpha: 0.0,
            beta: 0.75,
        }
    }
}

/// Convolution followed by optional ReLU, LRN and max-pooling, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
    pub lrn: Option<LrnSpec>,
    pub pool: Option<PoolSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    FullyConnected { width: usize, relu: bool },
    /// Dot product with the classifier vector `w` plus a scalar bias.
    Classifier { input_width: usize },
}

/// Declarative layer stack for the quality-scoring network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    /// Factor by which filter counts and widths were divided from the full
    /// network; 1 for the full-size architecture.
    #[serde(default = "one")]
    pub width_divisor: usize,
}

fn one() -> usize {
    1
}

/// Shape of one trainable tensor, as dictated by the architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

const DEFAULT_FILTERS: [usize; 5] = [96, 256, 384, 384, 256];
const DEFAULT_FC_WIDTH: usize = 4096;
const DEFAULT_SIDE: usize = 256;

/// The five-conv, two-FC, binary-classifier network for 3×256×256 input.
pub fn build_default_arch() -> ArchitectureSpec {
    let conv = |filters, kernel_size, stride, padding, lrn: bool, pool: bool| {
        LayerSpec::Conv(ConvSpec {
            filters,
            kernel_size,
            stride,
            padding,
            relu: true,
            lrn: lrn.then(LrnSpec::default),
            pool: pool.then_some(PoolSpec { window: 3, stride: 2 }),
        })
    };
    let [f1, f2, f3, f4, f5] = DEFAULT_FILTERS;
    ArchitectureSpec {
        input: InputShape {
            channels: 3,
            height: DEFAULT_SIDE,
            width: DEFAULT_SIDE,
        },
        layers: vec![
            conv(f1, 11, 4, 2, true, true),
            conv(f2, 5, 1, 2, true, true),
            conv(f3, 3, 1, 1, false, false),
            conv(f4, 3, 1, 1, false, false),
            conv(f5, 3, 1, 1, false, true),
            LayerSpec::FullyConnected { width: DEFAULT_FC_WIDTH, relu: true },
            LayerSpec::FullyConnected { width: DEFAULT_FC_WIDTH, relu: true },
            LayerSpec::Classifier { input_width: DEFAULT_FC_WIDTH },
        ],
        width_divisor: 1,
    }
}

/// Same topology with all widths divided by `scale` (2, 4 or 8).
pub fn build_reduced_arch(scale: usize) -> Result<ArchitectureSpec> {
    build_default_arch().reduce(scale)
}

impl ArchitectureSpec {
    /// Divides every filter count and layer width by `factor`.
    ///
    /// Once the cumulative divisor reaches 4 the input side is halved, so
    /// `reduce(2)` twice equals `reduce(4)`.
    pub fn reduce(&self, factor: usize) -> Result<Self> {
        if ![2, 4, 8].contains(&factor) {
            return Err(Error::Config(format!(
                "reduction scale must be 2, 4 or 8, got {factor}"
            )));
        }
        let divisor = self.width_divisor * factor;
        if divisor > 8 {
            return Err(Error::Config(format!(
                "cumulative reduction {divisor} exceeds 8"
            )));
        }
        let div = |w: usize| {
            if w.is_multiple_of(factor) {
                Ok(w / factor)
            } else {
                Err(Error::Config(format!("scale {factor} does not divide width {w}")))
            }
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layers.push(match layer {
                LayerSpec::Conv(c) => LayerSpec::Conv(ConvSpec {
                    filters: div(c.filters)?,
                    ..c.clone()
                }),
                LayerSpec::FullyConnected { width, relu } => LayerSpec::FullyConnected {
                    width: div(*width)?,
                    relu: *relu,
                },
                LayerSpec::Classifier { input_width } => LayerSpec::Classifier {
                    input_width: div(*input_width)?,
                },
            });
        }
        let mut input = self.input;
        if self.width_divisor < 4 && divisor >= 4 {
            input.height /= 2;
            input.width /= 2;
        }
        let spec = Self {
            input,
            layers,
            width_divisor: divisor,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn conv_filters(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv(c) => Some(c.filters),
                _ => None,
            })
            .collect()
    }

    pub fn fc_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::FullyConnected { width, .. } => Some(*width),
                _ => None,
            })
            .collect()
    }

    /// Width of the encoding the classifier consumes.
    pub fn feature_width(&self) -> Result<usize> {
        self.validate()
    }

    /// Checks that layer shapes chain and that the classifier is last.
    /// Returns the feature width.
    pub fn validate(&self) -> Result<usize> {
        self.param_shapes().map(|(_, width)| width)
    }

    /// Every parameter tensor's name and shape, in checkpoint order, plus
    /// the classifier input width.
    pub fn param_shapes(&self) -> Result<(Vec<ParamShape>, usize)> {
        let bad = |msg: String| Err(Error::Config(msg));
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return bad(format!("input shape {:?} has a zero dimension", self.input));
        }
        let Some((LayerSpec::Classifier { input_width }, body)) = self.layers.split_last() else {
            return bad("the last layer must be the classifier".into());
        };
        let (mut c, mut h, mut w) = (channels, height, width);
        let mut flat: Option<usize> = None;
        let mut shapes = Vec::new();
        let (mut n_conv, mut n_fc) = (0, 0);
        for layer in body {
            match layer {
                LayerSpec::Conv(conv) => {
                    if flat.is_some() {
                        return bad("convolution after a fully connected layer".into());
                    }
                    let k = conv.kernel_size;
                    if conv.filters == 0 || k == 0 || conv.stride == 0 {
                        return bad(format!("degenerate conv layer {conv:?}"));
                    }
                    if k > h + 2 * conv.padding || k > w + 2 * conv.padding {
                        return bad(format!(
                            "kernel {k} does not fit {h}x{w} input with padding {}",
                            conv.padding
                        ));
                    }
                    n_conv += 1;
                    shapes.push(ParamShape {
                        name: format!("conv{n_conv}.weight"),
                        shape: vec![conv.filters, c, k, k],
                        fan_in: c * k * k,
                    });
                    shapes.push(ParamShape {
                        name: format!("conv{n_conv}.bias"),
                        shape: vec![conv.filters],
                        fan_in: c * k * k,
                    });
                    h = (h + 2 * conv.padding - k) / conv.stride + 1;
                    w = (w + 2 * conv.padding - k) / conv.stride + 1;
                    c = conv.filters;
                    if let Some(lrn) = &conv.lrn {
                        if lrn.depth == 0 {
                            return bad("lrn depth must be at least 1".into());
                        }
                    }
                    if let Some(p) = &conv.pool {
                        if p.window == 0 || p.stride == 0 || p.window > h || p.window > w {
                            return bad(format!("pool {p:?} does not fit {h}x{w} feature map"));
                        }
                        h = (h - p.window) / p.stride + 1;
                        w = (w - p.window) / p.stride + 1;
                    }
                }
                LayerSpec::FullyConnected { width: out, .. } => {
                    let fan_in = flat.unwrap_or(c * h * w);
                    if *out == 0 {
                        return bad("fully connected width must be positive".into());
                    }
                    n_fc += 1;
                    shapes.push(ParamShape {
                        name: format!("fc{n_fc}.weight"),
                        shape: vec![*out, fan_in],
                        fan_in,
                    });
                    shapes.push(ParamShape {
                        name: format!("fc{n_fc}.bias"),
                        shape: vec![*out],
                        fan_in,
                    });
                    flat = Some(*out);
                }
                LayerSpec::Classifier { .. } => {
                    return bad("more than one classifier layer".into());
                }
            }
        }
        let features = flat.unwrap_or(c * h * w);
        if *input_width != features {
            return bad(format!(
                "classifier expects {input_width} inputs but the network produces {features}"
            ));
        }
        shapes.push(ParamShape {
            name: "classifier.w".into(),
            shape: vec![features],
            fan_in: features,
        });
        shapes.push(ParamShape {
            name: "classifier.bias".into(),
            shape: vec![1],
            fan_in: features,
        });
        Ok((shapes, features))
    }

    /// Flattened size of the conv stack output, i.e. the first FC fan-in.
    pub fn conv_output_width(&self) -> Result<usize> {
        let (shapes, _) = self.param_shapes()?;
        Ok(shapes
            .iter()
            .find(|p| p.name == "fc1.weight")
            .map(|p| p.shape[1])
            .unwrap_or(shapes.last().expect("classifier present").shape[0]))
    }

    /// Short human-readable description, e.g. for the model registry.
    pub fn summary(&self) -> String {
        format!(
            "{}x{}x{} conv{:?} fc{:?} /{}",
            self.input.channels,
            self.input.height,
            self.input.width,
            self.conv_filters(),
            self.fc_widths(),
            self.width_divisor
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_arch_matches_published_widths() {
        let a = build_default_arch();
        assert_eq!(a.conv_filters(), vec![96, 256, 384, 384, 256]);
        assert_eq!(a.fc_widths(), vec![4096, 4096]);
        assert_eq!(
            a.input,
            InputShape { channels: 3, height: 256, width: 256 }
        );
        assert_eq!(a.feature_width().unwrap(), 4096);
    }

    #[test]
    fn conv_stack_flattens_to_first_fc_input() {
        // 256 -> conv1 63 -> pool 31 -> conv2 31 -> pool 15 -> conv3..5 15 -> pool 7
        assert_eq!(build_default_arch().conv_output_width().unwrap(), 256 * 7 * 7);
        // 128 -> 31 -> 15 -> 15 -> 7 -> 7 -> 3
        let r = build_reduced_arch(4).unwrap();
        assert_eq!(r.conv_output_width().unwrap(), 64 * 3 * 3);
    }

    #[test]
    fn reduced_scale_four() {
        let a = build_reduced_arch(4).unwrap();
        assert_eq!(a.conv_filters(), vec![24, 64, 96, 96, 64]);
        assert_eq!(a.fc_widths(), vec![1024, 1024]);
        assert_eq!((a.input.height, a.input.width), (128, 128));
        assert_eq!(build_reduced_arch(2).unwrap().input.height, 256);
    }

    #[test]
    fn reduction_composes() {
        let twice = build_reduced_arch(2).unwrap().reduce(2).unwrap();
        assert_eq!(twice, build_reduced_arch(4).unwrap());
        let thrice = twice.reduce(2).unwrap();
        assert_eq!(thrice, build_reduced_arch(8).unwrap());
    }

    #[test]
    fn invalid_scales() {
        for s in [0, 1, 3, 5, 16] {
            assert!(matches!(build_reduced_arch(s), Err(Error::Config(_))), "{s}");
        }
        assert!(build_reduced_arch(8).unwrap().reduce(2).is_err());
    }

    #[test]
    fn classifier_must_be_last_and_unique() {
        let mut a = build_default_arch();
        a.layers.pop();
        assert!(a.validate().is_err());
        let mut b = build_default_arch();
        b.layers.insert(5, LayerSpec::Classifier { input_width: 4096 });
        assert!(b.validate().is_err());
        let mut c = build_default_arch();
        *c.layers.last_mut().unwrap() = LayerSpec::Classifier { input_width: 10 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let a = build_reduced_arch(8).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ArchitectureSpec>(&s).unwrap(), a);
    }
}
