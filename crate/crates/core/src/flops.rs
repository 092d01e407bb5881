//! Static multiply-accumulate counting over an [`ArchSpec`].
//!
//! One MAC counts as one FLOP. Convolutions cost `kh·kw·Cin·Cout·Hout·Wout`,
//! fully-connected layers `Din·Dout`; batch-norm, activations, pooling and the
//! residual additions are counted as zero.

use serde::Serialize;

use crate::arch::{conv_extent, ArchSpec, LayerSpec, Shape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub output_shape: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub resolution: usize,
    pub rows: Vec<CostRow>,
    pub total_macs: u64,
}

impl CostReport {
    pub fn total_mflops(&self) -> f64 {
        self.total_macs as f64 / 1e6
    }

    pub fn total_gflops(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    /// Fixed-width text table.
    pub fn to_text(&self, spec_name: &str) -> String {
        let mut s = format!("{spec_name} @ {0}x{0}\n", self.resolution);
        s.push_str(&format!("{:<18} {:>14} {:>16}\n", "layer", "output", "MACs"));
        for r in &self.rows {
            s.push_str(&format!("{:<18} {:>14} {:>16}\n", r.name, r.output_shape, r.macs));
        }
        s.push_str(&format!(
            "{:<18} {:>14} {:>16}\ntotal {:.4} G ({:.2} M)\n",
            "total",
            "",
            self.total_macs,
            self.total_gflops(),
            self.total_mflops()
        ));
        s
    }
}

fn conv_macs(k2: usize, cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    (k2 * cin * cout * h * w) as u64
}

/// MACs of one layer and the shape it produces.
pub fn layer_flops(layer: &LayerSpec, input: Shape) -> Result<(u64, Shape)> {
    let spatial = || match input {
        Shape::Spatial { c, h, w } => Ok((c, h, w)),
        Shape::Flat(_) => Err(Error::Dimension(format!("{} needs a spatial input, got {input}", layer.kind()))),
    };
    let channels = |want: usize, got: usize| {
        if want == got {
            Ok(())
        } else {
            Err(Error::Dimension(format!("{} expects {want} channels, got {got}", layer.kind())))
        }
    };
    let extent = |len, k, s, p| {
        conv_extent(len, k, s, p).ok_or_else(|| Error::Dimension(format!("{} does not fit input {input}", layer.kind())))
    };
    Ok(match *layer {
        LayerSpec::Conv {
            kh,
            kw,
            cin,
            cout,
            stride,
            pad,
            ..
        } => {
            let (c, h, w) = spatial()?;
            channels(cin, c)?;
            let (ho, wo) = (extent(h, kh, stride, pad)?, extent(w, kw, stride, pad)?);
            (conv_macs(kh * kw, cin, cout, ho, wo), Shape::Spatial { c: cout, h: ho, w: wo })
        }
        LayerSpec::Bn | LayerSpec::Relu | LayerSpec::Dropout { .. } => (0, input),
        LayerSpec::MaxPool { k, stride, pad } => {
            let (c, h, w) = spatial()?;
            (0, Shape::Spatial {
                c,
                h: extent(h, k, stride, pad)?,
                w: extent(w, k, stride, pad)?,
            })
        }
        LayerSpec::BasicBlock { cin, cout, stride } => {
            let (c, h, w) = spatial()?;
            channels(cin, c)?;
            let (ho, wo) = (extent(h, 3, stride, 1)?, extent(w, 3, stride, 1)?);
            let mut macs = conv_macs(9, cin, cout, ho, wo) + conv_macs(9, cout, cout, ho, wo);
            if stride != 1 || cin != cout {
                macs += conv_macs(1, cin, cout, ho, wo);
            }
            (macs, Shape::Spatial { c: cout, h: ho, w: wo })
        }
        LayerSpec::Bottleneck { cin, mid, cout, stride } => {
            let (c, h, w) = spatial()?;
            channels(cin, c)?;
            let (ho, wo) = (extent(h, 3, stride, 1)?, extent(w, 3, stride, 1)?);
            let mut macs = conv_macs(1, cin, mid, h, w) + conv_macs(9, mid, mid, ho, wo) + conv_macs(1, mid, cout, ho, wo);
            if stride != 1 || cin != cout {
                macs += conv_macs(1, cin, cout, ho, wo);
            }
            (macs, Shape::Spatial { c: cout, h: ho, w: wo })
        }
        LayerSpec::GlobalAvgPool => {
            let (c, _, _) = spatial()?;
            (0, Shape::Flat(c))
        }
        LayerSpec::Fc { din, dout } => match input {
            Shape::Flat(d) if d == din => ((din * dout) as u64, Shape::Flat(dout)),
            other => return Err(Error::Dimension(format!("fc expects flat {din}, got {other}"))),
        },
    })
}

/// Per-image cost of `spec` at `resolution × resolution`.
pub fn model_flops(spec: &ArchSpec, resolution: usize) -> Result<CostReport> {
    let shapes = spec.shapes(resolution)?;
    let mut cur = Shape::Spatial {
        c: spec.input_channels,
        h: resolution,
        w: resolution,
    };
    let mut rows = Vec::with_capacity(spec.layers.len());
    for (i, (layer, out)) in spec.layers.iter().zip(&shapes).enumerate() {
        let (macs, shape) = layer_flops(layer, cur)?;
        debug_assert_eq!(shape, *out);
        rows.push(CostRow {
            name: spec.layer_label(i),
            output_shape: shape.to_string(),
            macs,
        });
        cur = shape;
    }
    let total_macs = rows.iter().map(|r| r.macs).sum();
    Ok(CostReport {
        resolution,
        rows,
        total_macs,
    })
}

/// Classifier cost in MFLOPs at each candidate resolution.
pub fn resolution_cost_table(spec: &ArchSpec, resolutions: &[usize]) -> Result<Vec<f64>> {
    resolutions
        .iter()
        .map(|&r| {
            model_flops(spec, r)
                .map(|rep| rep.total_mflops())
                .map_err(|e| Error::Config(format!("resolution {r}: {e}")))
        })
        .collect()
}

/// `(Σ_j counts[j]·C_j) / Σ counts + predictor_cost`.
pub fn average_inference_flops(counts: &[u64], costs: &[f64], predictor_cost: f64) -> Result<f64> {
    if counts.len() != costs.len() {
        return Err(Error::Argument(format!(
            "{} histogram bins for {} costs",
            counts.len(),
            costs.len()
        )));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Argument("empty selection histogram".into()));
    }
    let weighted: f64 = counts.iter().zip(costs).map(|(&n, c)| n as f64 * c).sum();
    Ok(weighted / total as f64 + predictor_cost)
}
