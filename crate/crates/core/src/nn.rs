//! Networks instantiated from an [`ArchSpec`], with resolution-aware
//! batch-norm: every normalization site keeps one bank of statistics and
//! affine parameters per candidate resolution while all convolution and
//! fully-connected weights are shared.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{ArchSpec, LayerSpec};
use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, dropout active.
    Train,
    /// Running statistics, no state changes.
    Eval,
}

/// Statistics and affine parameters of one resolution at one BN site.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBank {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl BnBank {
    fn new(prefix: &str, channels: usize) -> Self {
        BnBank {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            gamma: Parameter::new(format!("{prefix}.weight"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[channels])),
        }
    }
}

/// One normalization site with a bank per resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BnSite {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub banks: Vec<BnBank>,
    /// All resolutions read and write bank 0.
    pub shared: bool,
}

impl BnSite {
    pub fn new(name: impl Into<String>, channels: usize, bank_count: usize) -> Self {
        let name = name.into();
        let banks = (0..bank_count)
            .map(|j| BnBank::new(&format!("{name}.bank{j}"), channels))
            .collect();
        BnSite {
            name,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            banks,
            shared: false,
        }
    }

    /// Bank actually used for resolution index `j`.
    pub fn resolve(&self, j: usize) -> Result<usize> {
        if j >= self.banks.len() {
            return Err(Error::Index(format!(
                "{}: resolution index {j} outside {} banks",
                self.name,
                self.banks.len()
            )));
        }
        Ok(if self.shared { 0 } else { j })
    }
}

/// Identifies a trainable tensor inside a [`Network`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRef {
    Weight(usize),
    Gamma { site: usize, bank: usize },
    Beta { site: usize, bank: usize },
}

/// Maps parameters onto graph leaves for one forward/backward pass. A
/// parameter used by several resolution paths binds once, so its gradient
/// sums over paths.
pub struct Binder {
    vars: HashMap<ParamRef, Var>,
    trainable: bool,
}

impl Binder {
    /// Parameters become gradient-tracked leaves.
    pub fn trainable() -> Self {
        Binder {
            vars: HashMap::new(),
            trainable: true,
        }
    }

    /// Parameters become constants.
    pub fn frozen() -> Self {
        Binder {
            vars: HashMap::new(),
            trainable: false,
        }
    }

    fn bind(&mut self, g: &mut Graph, key: ParamRef, p: &Parameter) -> Var {
        let trainable = self.trainable;
        *self.vars.entry(key).or_insert_with(|| {
            if trainable {
                g.variable(p.tensor.clone())
            } else {
                g.constant(p.tensor.clone())
            }
        })
    }

    pub fn get(&self, key: ParamRef) -> Option<Var> {
        self.vars.get(&key).copied()
    }
}

/// Resolution-aware batch-norm at `site` for resolution index `j`.
///
/// Training mode normalizes with the batch statistics of `x` and folds them
/// into bank `j`'s running averages; evaluation mode normalizes with bank
/// `j`'s running statistics. Only bank `j` is read or written.
pub fn resolution_aware_bn(
    g: &mut Graph,
    binder: &mut Binder,
    site_index: usize,
    site: &mut BnSite,
    x: Var,
    j: usize,
    mode: Mode,
) -> Result<Var> {
    let b = site.resolve(j)?;
    let bank = &mut site.banks[b];
    let gamma = binder.bind(g, ParamRef::Gamma { site: site_index, bank: b }, &bank.gamma);
    let beta = binder.bind(g, ParamRef::Beta { site: site_index, bank: b }, &bank.beta);
    match mode {
        Mode::Train => {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, site.eps)?;
            let m = site.momentum;
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..site.channels {
                bank.running_mean[c] = (1.0 - m) * bank.running_mean[c] + m * stats.mean[c];
                bank.running_var[c] = (1.0 - m) * bank.running_var[c] + m * stats.var[c] * unbias;
            }
            Ok(y)
        }
        Mode::Eval => g.batch_norm_eval(x, gamma, beta, &bank.running_mean, &bank.running_var, site.eps),
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvRt {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum LayerRt {
    Conv(ConvRt),
    Bn(usize),
    Relu,
    MaxPool { k: usize, stride: usize, pad: usize },
    /// Conv/BN pairs with ReLU between them, then shortcut add and ReLU.
    Residual {
        body: Vec<(ConvRt, usize)>,
        shortcut: Option<(ConvRt, usize)>,
    },
    Gap,
    Dropout(f64),
    Fc { weight: usize, bias: usize },
}

/// A built network: parameters, BN sites and the layer program.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ArchSpec,
    weights: Vec<Parameter>,
    bn_sites: Vec<BnSite>,
    layers: Vec<LayerRt>,
    bank_count: usize,
}

struct Builder {
    weights: Vec<Parameter>,
    bn_sites: Vec<BnSite>,
    rng: ChaCha8Rng,
    banks: usize,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, kh: usize, kw: usize, cin: usize, cout: usize, stride: usize, pad: usize, bias: bool) -> ConvRt {
        let fan_in = (cin * kh * kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..cout * cin * kh * kw).map(|_| normal.sample(&mut self.rng)).collect();
        self.weights.push(Parameter::new(
            format!("{name}.weight"),
            Tensor::new(&[cout, cin, kh, kw], data).expect("extent"),
        ));
        let weight = self.weights.len() - 1;
        let bias = bias.then(|| {
            self.weights.push(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])));
            self.weights.len() - 1
        });
        ConvRt {
            weight,
            bias,
            stride,
            pad,
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> usize {
        self.bn_sites.push(BnSite::new(name, channels, self.banks));
        self.bn_sites.len() - 1
    }
}

/// Instantiates `spec` with `bn_banks` banks per BN site. Initialization is a
/// pure function of `seed`: He-normal convolutions, zero fully-connected
/// layers, unit/zero BN affine parameters.
pub fn build_network(spec: &ArchSpec, bn_banks: usize, seed: u64) -> Result<Network> {
    spec.validate()?;
    if bn_banks == 0 {
        return Err(Error::Build("at least one BN bank is required".into()));
    }
    let mut b = Builder {
        weights: Vec::new(),
        bn_sites: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        banks: bn_banks,
    };
    let mut channels = spec.input_channels;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = format!("layer{i}");
        let rt = match *layer {
            LayerSpec::Conv {
                kh,
                kw,
                cin,
                cout,
                stride,
                pad,
                bias,
            } => {
                channels = cout;
                LayerRt::Conv(b.conv(&format!("{p}.conv"), kh, kw, cin, cout, stride, pad, bias))
            }
            LayerSpec::Bn => LayerRt::Bn(b.bn(&format!("{p}.bn"), channels)),
            LayerSpec::Relu => LayerRt::Relu,
            LayerSpec::MaxPool { k, stride, pad } => LayerRt::MaxPool { k, stride, pad },
            LayerSpec::BasicBlock { cin, cout, stride } => {
                channels = cout;
                let c1 = b.conv(&format!("{p}.conv1"), 3, 3, cin, cout, stride, 1, false);
                let n1 = b.bn(&format!("{p}.bn1"), cout);
                let c2 = b.conv(&format!("{p}.conv2"), 3, 3, cout, cout, 1, 1, false);
                let n2 = b.bn(&format!("{p}.bn2"), cout);
                let shortcut = (stride != 1 || cin != cout).then(|| {
                    let c = b.conv(&format!("{p}.downsample.conv"), 1, 1, cin, cout, stride, 0, false);
                    (c, b.bn(&format!("{p}.downsample.bn"), cout))
                });
                LayerRt::Residual {
                    body: vec![(c1, n1), (c2, n2)],
                    shortcut,
                }
            }
            LayerSpec::Bottleneck { cin, mid, cout, stride } => {
                channels = cout;
                let c1 = b.conv(&format!("{p}.conv1"), 1, 1, cin, mid, 1, 0, false);
                let n1 = b.bn(&format!("{p}.bn1"), mid);
                let c2 = b.conv(&format!("{p}.conv2"), 3, 3, mid, mid, stride, 1, false);
                let n2 = b.bn(&format!("{p}.bn2"), mid);
                let c3 = b.conv(&format!("{p}.conv3"), 1, 1, mid, cout, 1, 0, false);
                let n3 = b.bn(&format!("{p}.bn3"), cout);
                let shortcut = (stride != 1 || cin != cout).then(|| {
                    let c = b.conv(&format!("{p}.downsample.conv"), 1, 1, cin, cout, stride, 0, false);
                    (c, b.bn(&format!("{p}.downsample.bn"), cout))
                });
                LayerRt::Residual {
                    body: vec![(c1, n1), (c2, n2), (c3, n3)],
                    shortcut,
                }
            }
            LayerSpec::GlobalAvgPool => LayerRt::Gap,
            LayerSpec::Dropout { rate } => LayerRt::Dropout(rate),
            LayerSpec::Fc { din, dout } => {
                channels = dout;
                b.weights.push(Parameter::new(format!("{p}.fc.weight"), Tensor::zeros(&[dout, din])));
                b.weights.push(Parameter::new(format!("{p}.fc.bias"), Tensor::zeros(&[dout])));
                let n = b.weights.len();
                LayerRt::Fc {
                    weight: n - 2,
                    bias: n - 1,
                }
            }
        };
        layers.push(rt);
    }
    Ok(Network {
        spec: spec.clone(),
        weights: b.weights,
        bn_sites: b.bn_sites,
        layers,
        bank_count: bn_banks,
    })
}

impl Network {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn bank_count(&self) -> usize {
        self.bank_count
    }

    pub fn bn_sites(&self) -> &[BnSite] {
        &self.bn_sites
    }

    pub fn bn_sites_mut(&mut self) -> &mut [BnSite] {
        &mut self.bn_sites
    }

    /// Every trainable parameter, in a fixed order.
    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.weights.iter().chain(
            self.bn_sites
                .iter()
                .flat_map(|s| s.banks.iter().flat_map(|b| [&b.gamma, &b.beta])),
        )
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.weights.iter_mut().chain(
            self.bn_sites
                .iter_mut()
                .flat_map(|s| s.banks.iter_mut().flat_map(|b| [&mut b.gamma, &mut b.beta])),
        )
    }

    fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs: Vec<ParamRef> = (0..self.weights.len()).map(ParamRef::Weight).collect();
        for (site, s) in self.bn_sites.iter().enumerate() {
            for bank in 0..s.banks.len() {
                refs.push(ParamRef::Gamma { site, bank });
                refs.push(ParamRef::Beta { site, bank });
            }
        }
        refs
    }

    pub fn set_shared_bn(&mut self, shared: bool) {
        for s in &mut self.bn_sites {
            s.shared = shared;
        }
    }

    pub fn shared_bn(&self) -> bool {
        self.bn_sites.first().is_some_and(|s| s.shared)
    }

    /// Runs the network on `x` with every BN site using bank `bank`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        bank: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if bank >= self.bank_count {
            return Err(Error::Index(format!(
                "{}: bank {bank} requested, network has {}",
                self.spec.name, self.bank_count
            )));
        }
        let mut cur = x;
        for li in 0..self.layers.len() {
            cur = match &self.layers[li] {
                LayerRt::Conv(c) => {
                    let c = c.clone();
                    self.conv(g, binder, &c, cur)?
                }
                LayerRt::Bn(site) => {
                    let site = *site;
                    resolution_aware_bn(g, binder, site, &mut self.bn_sites[site], cur, bank, mode)?
                }
                LayerRt::Relu => g.relu(cur),
                LayerRt::MaxPool { k, stride, pad } => g.max_pool2d(cur, *k, *stride, *pad)?,
                LayerRt::Residual { body, shortcut } => {
                    let (body, shortcut) = (body.clone(), shortcut.clone());
                    let mut h = cur;
                    for (i, (c, site)) in body.iter().enumerate() {
                        h = self.conv(g, binder, c, h)?;
                        h = resolution_aware_bn(g, binder, *site, &mut self.bn_sites[*site], h, bank, mode)?;
                        if i + 1 < body.len() {
                            h = g.relu(h);
                        }
                    }
                    let skip = match shortcut {
                        Some((c, site)) => {
                            let s = self.conv(g, binder, &c, cur)?;
                            resolution_aware_bn(g, binder, site, &mut self.bn_sites[site], s, bank, mode)?
                        }
                        None => cur,
                    };
                    let sum = g.add(h, skip)?;
                    g.relu(sum)
                }
                LayerRt::Gap => g.global_avg_pool(cur)?,
                LayerRt::Dropout(rate) => match mode {
                    Mode::Train if *rate > 0.0 => g.dropout(cur, *rate, rng)?,
                    _ => cur,
                },
                LayerRt::Fc { weight, bias } => {
                    let (w, b) = (*weight, *bias);
                    let wv = binder.bind(g, ParamRef::Weight(w), &self.weights[w]);
                    let bv = binder.bind(g, ParamRef::Weight(b), &self.weights[b]);
                    g.linear(cur, wv, Some(bv))?
                }
            };
        }
        Ok(cur)
    }

    fn conv(&self, g: &mut Graph, binder: &mut Binder, c: &ConvRt, x: Var) -> Result<Var> {
        let w = binder.bind(g, ParamRef::Weight(c.weight), &self.weights[c.weight]);
        let b = c.bias.map(|b| binder.bind(g, ParamRef::Weight(b), &self.weights[b]));
        g.conv2d(x, w, b, c.stride, c.pad)
    }

    /// Adds the gradients of bound parameters into their buffers and makes
    /// sure every parameter has a (possibly zero) gradient buffer.
    pub fn accumulate_grads(&mut self, binder: &Binder, grads: &Gradients) {
        let refs = self.param_refs();
        for (r, p) in refs.into_iter().zip(self.params_mut()) {
            match binder.get(r).and_then(|v| grads.get(v)) {
                Some(gv) => p.tensor.accumulate_grad(gv),
                None if p.tensor.grad.is_none() => p.tensor.grad = Some(vec![0.0; p.tensor.numel()]),
                None => {}
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.tensor.grad = None;
        }
    }

    /// Rounds every parameter, running statistic and momentum buffer to the
    /// nearest `f32`, the precision checkpoints store.
    pub fn quantize_to_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        for p in self.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(q);
            if let Some(m) = p.momentum_buffer.as_mut() {
                m.iter_mut().for_each(q);
            }
        }
        for s in &mut self.bn_sites {
            for b in &mut s.banks {
                b.running_mean.iter_mut().for_each(q);
                b.running_var.iter_mut().for_each(q);
            }
        }
    }
}
