//! Declarative network descriptions.
//!
//! An [`ArchSpec`] is an ordered list of layer descriptors. The same document
//! drives [`crate::nn::build_network`] and the static cost analyzer in
//! [`crate::flops`]. Specs serialize to a line-oriented text form:
//!
//! ```text
//! # comment
//! name = desk-classifier
//! input_channels = 3
//! outputs = 10
//! conv k=3 cin=3 cout=16 stride=1 pad=1
//! bn
//! relu
//! maxpool k=3 stride=2 pad=1
//! basic_block cin=16 cout=32 stride=2
//! bottleneck cin=64 mid=64 cout=256 stride=1
//! gap
//! dropout rate=0
//! fc din=64 dout=10
//! ```
//!
//! `conv` also accepts `kh=`/`kw=` for non-square kernels and `bias=true`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Bn,
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// Two 3×3 convs with a projection shortcut when stride or width changes.
    BasicBlock {
        cin: usize,
        cout: usize,
        stride: usize,
    },
    /// 1×1 → 3×3 (strided) → 1×1, projection shortcut when needed.
    Bottleneck {
        cin: usize,
        mid: usize,
        cout: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dropout {
        rate: f64,
    },
    Fc {
        din: usize,
        dout: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Bn => "bn",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::BasicBlock { .. } => "basic_block",
            LayerSpec::Bottleneck { .. } => "bottleneck",
            LayerSpec::GlobalAvgPool => "gap",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Fc { .. } => "fc",
        }
    }

    pub fn conv(k: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv {
            kh: k,
            kw: k,
            cin,
            cout,
            stride,
            pad,
            bias: false,
        }
    }
}

/// Activation shape flowing between layers (batch axis omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            Shape::Flat(d) => write!(f, "{d}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub input_channels: usize,
    /// Class count for a classifier, candidate count for a predictor.
    pub outputs: usize,
    pub layers: Vec<LayerSpec>,
}

pub(crate) fn conv_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (stride > 0 && k > 0 && len + 2 * pad >= k).then(|| (len + 2 * pad - k) / stride + 1)
}

impl ArchSpec {
    /// Label used in error messages and cost rows, e.g. `4:basic_block`.
    pub fn layer_label(&self, i: usize) -> String {
        format!("{i}:{}", self.layers[i].kind())
    }

    /// Propagates a `side × side` input through every layer, returning the
    /// output shape of each.
    pub fn shapes(&self, side: usize) -> Result<Vec<Shape>> {
        self.check_structure()?;
        let mut cur = Shape::Spatial {
            c: self.input_channels,
            h: side,
            w: side,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            cur = self.layer_output(i, cur)?;
            out.push(cur);
        }
        match cur {
            Shape::Flat(d) if d == self.outputs => Ok(out),
            other => Err(Error::Build(format!(
                "{}: final layer produces {other}, expected {} outputs",
                self.name, self.outputs
            ))),
        }
    }

    fn layer_output(&self, i: usize, input: Shape) -> Result<Shape> {
        let prev = if i == 0 {
            "input".to_string()
        } else {
            self.layer_label(i - 1)
        };
        let this = self.layer_label(i);
        let mismatch = |msg: String| Error::Build(format!("{}: {prev} -> {this}: {msg}", self.name));
        let spatial = |want_c: Option<usize>| -> Result<(usize, usize, usize)> {
            match input {
                Shape::Spatial { c, h, w } => {
                    if let Some(wc) = want_c {
                        if wc != c {
                            return Err(mismatch(format!("expects {wc} channels, receives {c}")));
                        }
                    }
                    Ok((c, h, w))
                }
                Shape::Flat(d) => Err(mismatch(format!("expects a spatial input, receives flat {d}"))),
            }
        };
        let too_small = |h: usize, w: usize| mismatch(format!("input {h}x{w} too small"));
        Ok(match &self.layers[i] {
            LayerSpec::Conv {
                kh,
                kw,
                cin,
                cout,
                stride,
                pad,
                ..
            } => {
                let (_, h, w) = spatial(Some(*cin))?;
                let (Some(ho), Some(wo)) = (conv_extent(h, *kh, *stride, *pad), conv_extent(w, *kw, *stride, *pad))
                else {
                    return Err(too_small(h, w));
                };
                Shape::Spatial { c: *cout, h: ho, w: wo }
            }
            LayerSpec::Bn | LayerSpec::Relu | LayerSpec::Dropout { .. } => input,
            LayerSpec::MaxPool { k, stride, pad } => {
                let (c, h, w) = spatial(None)?;
                if *pad >= *k {
                    return Err(mismatch(format!("padding {pad} must be below window {k}")));
                }
                let (Some(ho), Some(wo)) = (conv_extent(h, *k, *stride, *pad), conv_extent(w, *k, *stride, *pad))
                else {
                    return Err(too_small(h, w));
                };
                Shape::Spatial { c, h: ho, w: wo }
            }
            LayerSpec::BasicBlock { cin, cout, stride } => {
                let (_, h, w) = spatial(Some(*cin))?;
                let (Some(ho), Some(wo)) = (conv_extent(h, 3, *stride, 1), conv_extent(w, 3, *stride, 1)) else {
                    return Err(too_small(h, w));
                };
                Shape::Spatial { c: *cout, h: ho, w: wo }
            }
            LayerSpec::Bottleneck { cin, cout, stride, .. } => {
                let (_, h, w) = spatial(Some(*cin))?;
                let (Some(ho), Some(wo)) = (conv_extent(h, 3, *stride, 1), conv_extent(w, 3, *stride, 1)) else {
                    return Err(too_small(h, w));
                };
                Shape::Spatial { c: *cout, h: ho, w: wo }
            }
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = spatial(None)?;
                Shape::Flat(c)
            }
            LayerSpec::Fc { din, dout } => match input {
                Shape::Flat(d) if d == *din => Shape::Flat(*dout),
                other => return Err(mismatch(format!("expects flat {din}, receives {other}"))),
            },
        })
    }

    fn check_structure(&self) -> Result<()> {
        if self.input_channels == 0 || self.outputs == 0 {
            return Err(Error::Build(format!("{}: channel and output counts must be positive", self.name)));
        }
        let first_fc = self.layers.iter().position(|l| matches!(l, LayerSpec::Fc { .. }));
        if let Some(fc) = first_fc {
            let gaps = self.layers[..fc]
                .iter()
                .filter(|l| matches!(l, LayerSpec::GlobalAvgPool))
                .count();
            if gaps != 1 {
                return Err(Error::Build(format!(
                    "{}: exactly one gap must precede the first fc, found {gaps}",
                    self.name
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let bad = match l {
                LayerSpec::Conv { kh, kw, stride, .. } => *kh == 0 || *kw == 0 || *stride == 0,
                LayerSpec::MaxPool { k, stride, .. } => *k == 0 || *stride == 0,
                LayerSpec::BasicBlock { stride, .. } | LayerSpec::Bottleneck { stride, .. } => *stride == 0,
                LayerSpec::Dropout { rate } => !(0.0..1.0).contains(rate),
                _ => false,
            };
            if bad {
                return Err(Error::Build(format!("{}: invalid parameters on {}", self.name, self.layer_label(i))));
            }
        }
        Ok(())
    }

    /// Resolution-independent validation used when loading documents.
    pub fn validate(&self) -> Result<()> {
        self.check_structure()
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name = {}", self.name)?;
        writeln!(f, "input_channels = {}", self.input_channels)?;
        writeln!(f, "outputs = {}", self.outputs)?;
        for l in &self.layers {
            match l {
                LayerSpec::Conv {
                    kh,
                    kw,
                    cin,
                    cout,
                    stride,
                    pad,
                    bias,
                } => {
                    if kh == kw {
                        write!(f, "conv k={kh}")?;
                    } else {
                        write!(f, "conv kh={kh} kw={kw}")?;
                    }
                    write!(f, " cin={cin} cout={cout} stride={stride} pad={pad}")?;
                    if *bias {
                        write!(f, " bias=true")?;
                    }
                    writeln!(f)?;
                }
                LayerSpec::Bn => writeln!(f, "bn")?,
                LayerSpec::Relu => writeln!(f, "relu")?,
                LayerSpec::MaxPool { k, stride, pad } => writeln!(f, "maxpool k={k} stride={stride} pad={pad}")?,
                LayerSpec::BasicBlock { cin, cout, stride } => {
                    writeln!(f, "basic_block cin={cin} cout={cout} stride={stride}")?
                }
                LayerSpec::Bottleneck { cin, mid, cout, stride } => {
                    writeln!(f, "bottleneck cin={cin} mid={mid} cout={cout} stride={stride}")?
                }
                LayerSpec::GlobalAvgPool => writeln!(f, "gap")?,
                LayerSpec::Dropout { rate } => writeln!(f, "dropout rate={rate}")?,
                LayerSpec::Fc { din, dout } => writeln!(f, "fc din={din} dout={dout}")?,
            }
        }
        Ok(())
    }
}

struct Fields<'a> {
    line: usize,
    kind: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
}

impl Fields<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>().map_err(|_| {
                    Error::Config(format!("line {}: {} has invalid {key}={v}", self.line, self.kind))
                })
            })
            .transpose()
    }

    fn req<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse(key)?
            .ok_or_else(|| Error::Config(format!("line {}: {} is missing {key}=", self.line, self.kind)))
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.pairs.iter().find(|(k, _)| !allowed.contains(k)) {
            Some((k, _)) => Err(Error::Config(format!("line {}: {} has unknown key {k}", self.line, self.kind))),
            None => Ok(()),
        }
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut name = None;
        let mut input_channels = None;
        let mut outputs = None;
        let mut layers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            if let Some((k, v)) = line.split_once(" = ").or_else(|| {
                line.split_once('=')
                    .filter(|(k, _)| !k.trim().contains(char::is_whitespace))
            }) {
                let (k, v) = (k.trim(), v.trim());
                let num = || {
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("line {lineno}: {k} must be an integer")))
                };
                match k {
                    "name" => name = Some(v.to_string()),
                    "input_channels" => input_channels = Some(num()?),
                    "outputs" => outputs = Some(num()?),
                    other => return Err(Error::Config(format!("line {lineno}: unknown header key {other}"))),
                }
                continue;
            }
            let mut words = line.split_whitespace();
            let kind = words.next().expect("non-empty line");
            let pairs = words
                .map(|w| {
                    w.split_once('=')
                        .ok_or_else(|| Error::Config(format!("line {lineno}: expected key=value, got {w}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let f = Fields {
                line: lineno,
                kind,
                pairs,
            };
            let layer = match kind {
                "conv" => {
                    f.check_keys(&["k", "kh", "kw", "cin", "cout", "stride", "pad", "bias"])?;
                    let k: Option<usize> = f.parse("k")?;
                    let kh = f.parse("kh")?.or(k);
                    let kw = f.parse("kw")?.or(k);
                    let (Some(kh), Some(kw)) = (kh, kw) else {
                        return Err(Error::Config(format!("line {lineno}: conv needs k= or kh=/kw=")));
                    };
                    LayerSpec::Conv {
                        kh,
                        kw,
                        cin: f.req("cin")?,
                        cout: f.req("cout")?,
                        stride: f.parse("stride")?.unwrap_or(1),
                        pad: f.parse("pad")?.unwrap_or(0),
                        bias: f.parse("bias")?.unwrap_or(false),
                    }
                }
                "bn" => {
                    f.check_keys(&[])?;
                    LayerSpec::Bn
                }
                "relu" => {
                    f.check_keys(&[])?;
                    LayerSpec::Relu
                }
                "maxpool" => {
                    f.check_keys(&["k", "stride", "pad"])?;
                    LayerSpec::MaxPool {
                        k: f.req("k")?,
                        stride: f.parse("stride")?.unwrap_or(1),
                        pad: f.parse("pad")?.unwrap_or(0),
                    }
                }
                "basic_block" => {
                    f.check_keys(&["cin", "cout", "stride"])?;
                    LayerSpec::BasicBlock {
                        cin: f.req("cin")?,
                        cout: f.req("cout")?,
                        stride: f.parse("stride")?.unwrap_or(1),
                    }
                }
                "bottleneck" => {
                    f.check_keys(&["cin", "mid", "cout", "stride"])?;
                    LayerSpec::Bottleneck {
                        cin: f.req("cin")?,
                        mid: f.req("mid")?,
                        cout: f.req("cout")?,
                        stride: f.parse("stride")?.unwrap_or(1),
                    }
                }
                "gap" => {
                    f.check_keys(&[])?;
                    LayerSpec::GlobalAvgPool
                }
                "dropout" => {
                    f.check_keys(&["rate"])?;
                    LayerSpec::Dropout {
                        rate: f.parse("rate")?.unwrap_or(0.0),
                    }
                }
                "fc" => {
                    f.check_keys(&["din", "dout"])?;
                    LayerSpec::Fc {
                        din: f.req("din")?,
                        dout: f.req("dout")?,
                    }
                }
                other => return Err(Error::Config(format!("line {lineno}: unknown layer {other}"))),
            };
            layers.push(layer);
        }
        let spec = ArchSpec {
            name: name.unwrap_or_else(|| "unnamed".into()),
            input_channels: input_channels.ok_or_else(|| Error::Config("missing input_channels".into()))?,
            outputs: outputs.ok_or_else(|| Error::Config("missing outputs".into()))?,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Reference architectures.
pub mod presets {
    use super::{ArchSpec, LayerSpec};

    fn stem(k: usize, width: usize, stride: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(k, 3, width, stride, k / 2),
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 3, stride: 2, pad: 1 },
        ]
    }

    /// ResNet-50 (bottleneck, stride on the 3×3 conv) for a 3-channel input.
    pub fn resnet50(classes: usize) -> ArchSpec {
        let mut layers = stem(7, 64, 2);
        let mut cin = 64;
        for (stage, (blocks, mid)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
            for b in 0..blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                layers.push(LayerSpec::Bottleneck {
                    cin,
                    mid,
                    cout: mid * 4,
                    stride,
                });
                cin = mid * 4;
            }
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Fc { din: 2048, dout: classes });
        ArchSpec {
            name: "resnet50".into(),
            input_channels: 3,
            outputs: classes,
            layers,
        }
    }

    /// The four resolution-predictor variants (1-based), each ending in an
    /// `m`-way fully-connected layer.
    pub fn predictor(variant: u8, m: usize) -> Option<ArchSpec> {
        let block = |cin, cout, stride| LayerSpec::BasicBlock { cin, cout, stride };
        let mut layers = match variant {
            1 => {
                let mut l = stem(7, 64, 2);
                l.extend([block(64, 64, 1), block(64, 128, 2), block(128, 256, 2), block(256, 512, 2)]);
                l
            }
            2 | 3 => {
                let mut l = stem(7, 64, if variant == 2 { 2 } else { 4 });
                l.extend([block(64, 64, 1), block(64, 128, 2)]);
                l
            }
            4 => {
                let mut l = stem(7, 64, 2);
                l.extend([LayerSpec::conv(3, 64, 64, 1, 1), LayerSpec::Bn, LayerSpec::Relu]);
                l
            }
            _ => return None,
        };
        let width = match variant {
            1 => 512,
            2 | 3 => 128,
            _ => 64,
        };
        layers.extend([
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dropout { rate: 0.0 },
            LayerSpec::Fc { din: width, dout: m },
        ]);
        Some(ArchSpec {
            name: format!("predictor-{variant}"),
            input_channels: 3,
            outputs: m,
            layers,
        })
    }

    /// Compact residual classifier: 3×3 stem, three stages of basic blocks
    /// (widths w, 2w, 4w; stages 2 and 3 downsample), gap, fc.
    pub fn desk_classifier(classes: usize, width: usize, blocks_per_stage: usize) -> ArchSpec {
        let mut layers = vec![LayerSpec::conv(3, 3, width, 1, 1), LayerSpec::Bn, LayerSpec::Relu];
        let mut cin = width;
        for stage in 0..3 {
            let cout = width << stage;
            for b in 0..blocks_per_stage.max(1) {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                layers.push(LayerSpec::BasicBlock { cin, cout, stride });
                cin = cout;
            }
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Fc { din: cin, dout: classes });
        ArchSpec {
            name: "desk-classifier".into(),
            input_channels: 3,
            outputs: classes,
            layers,
        }
    }

    /// Two-convolution predictor sized for small inputs.
    pub fn desk_predictor(m: usize, width: usize) -> ArchSpec {
        ArchSpec {
            name: "desk-predictor".into(),
            input_channels: 3,
            outputs: m,
            layers: vec![
                LayerSpec::conv(3, 3, width, 1, 1),
                LayerSpec::Bn,
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2, pad: 0 },
                LayerSpec::conv(3, width, 2 * width, 1, 1),
                LayerSpec::Bn,
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dropout { rate: 0.0 },
                LayerSpec::Fc { din: 2 * width, dout: m },
            ],
        }
    }
}
