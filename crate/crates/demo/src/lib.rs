//! Browser bindings for three small views of the engine: how a sample looks
//! at each candidate resolution, how Gumbel-softmax selection behaves, and
//! how classifier cost scales with input side.
//!
//! The plain functions are what the page calls through the `wasm_bindgen`
//! wrappers at the bottom; they are ordinary Rust and tested natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use drnet::arch::{presets, ArchSpec};
use drnet::flops::model_flops;
use drnet::gumbel::{gumbel_softmax_soft, sample_gumbel, select, GumbelConfig};
use drnet::image::resize_tensor;
use drnet::synthetic::{stripes, StripeSpec};
use drnet::Tensor;

const SOURCE_SIDE: usize = 32;

/// A stripes sample of the requested class and kind, resized to `side` and
/// returned as RGBA bytes.
pub fn stripe_rgba(class: usize, fine: bool, seed: u64, side: usize) -> Result<Vec<u8>, String> {
    if class >= 4 {
        return Err(format!("class {class} outside 0..4"));
    }
    // Draw a small pool and keep the first sample that matches.
    let (data, flags) = stripes(&StripeSpec {
        count: 64,
        side: SOURCE_SIDE,
        seed,
        ..Default::default()
    });
    let i = (0..data.len())
        .find(|&i| data.labels()[i] == class && flags[i] == fine)
        .ok_or("no matching sample in pool")?;
    let batch = data.batch(&[i]);
    let resized = resize_tensor(&batch.pixels, side).map_err(|e| e.to_string())?;
    Ok(to_rgba(&resized, side))
}

fn to_rgba(t: &Tensor, side: usize) -> Vec<u8> {
    let plane = side * side;
    let d = t.data();
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Selection frequencies over `draws` straight-through samples from `p`,
/// followed by one relaxed sample at temperature `tau`.
pub fn gumbel_frequencies(p: &[f64], tau: f64, draws: usize, seed: u64) -> Result<Vec<f64>, String> {
    let m = p.len();
    if m == 0 || draws == 0 {
        return Err("need at least one probability and one draw".into());
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|v| v.is_nan() || *v < 0.0) || total.is_nan() || total <= 0.0 {
        return Err("probabilities must be nonnegative with a positive sum".into());
    }
    let row: Vec<f64> = p.iter().map(|v| v / total).collect();
    let rows = Tensor::new(&[draws, m], row.iter().copied().cycle().take(draws * m).collect()).map_err(|e| e.to_string())?;
    let cfg = GumbelConfig {
        tau,
        ..GumbelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sel = select(&rows, &cfg, &mut rng).map_err(|e| e.to_string())?;
    let mut out = vec![0.0; m];
    for &j in &sel.chosen_index {
        out[j] += 1.0 / draws as f64;
    }
    let one = Tensor::new(&[1, m], row).map_err(|e| e.to_string())?;
    let noise = sample_gumbel(&[1, m], &mut rng);
    let soft = gumbel_softmax_soft(&one, &noise, tau, cfg.eps).map_err(|e| e.to_string())?;
    out.extend_from_slice(soft.data());
    Ok(out)
}

fn arch(name_or_text: &str) -> Result<ArchSpec, String> {
    Ok(match name_or_text.trim() {
        "resnet50" => presets::resnet50(1000),
        "desk" => presets::desk_classifier(10, 16, 1),
        "predictor-1" => presets::predictor(1, 3).expect("variant"),
        "predictor-2" => presets::predictor(2, 3).expect("variant"),
        text => text.parse().map_err(|e: drnet::Error| e.to_string())?,
    })
}

/// Classifier MFLOPs at each side in `sides`; sides the architecture cannot
/// take come back as NaN.
pub fn flops_curve(arch_text: &str, sides: &[usize]) -> Result<Vec<f64>, String> {
    let spec = arch(arch_text)?;
    Ok(sides
        .iter()
        .map(|&s| model_flops(&spec, s).map_or(f64::NAN, |r| r.total_mflops()))
        .collect())
}

#[wasm_bindgen(js_name = stripeRgba)]
pub fn stripe_rgba_js(class: usize, fine: bool, seed: u32, side: usize) -> Result<Vec<u8>, JsError> {
    stripe_rgba(class, fine, seed as u64, side).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = gumbelFrequencies)]
pub fn gumbel_frequencies_js(p: &[f64], tau: f64, draws: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    gumbel_frequencies(p, tau, draws, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = flopsCurve)]
pub fn flops_curve_js(arch_text: &str, sides: &[u32]) -> Result<Vec<f64>, JsError> {
    let sides: Vec<usize> = sides.iter().map(|&s| s as usize).collect();
    flops_curve(arch_text, &sides).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_has_four_bytes_per_pixel() {
        for side in [32, 24, 16] {
            let px = stripe_rgba(2, true, 0, side).unwrap();
            assert_eq!(px.len(), side * side * 4);
            assert!(px.chunks(4).all(|p| p[3] == 255));
        }
        assert!(stripe_rgba(7, false, 0, 16).is_err());
    }

    #[test]
    fn frequencies_follow_p_and_soft_sample_sums_to_one() {
        let out = gumbel_frequencies(&[5.0, 3.0, 2.0], 1.0, 20_000, 1).unwrap();
        for (f, q) in out[..3].iter().zip([0.5, 0.3, 0.2]) {
            assert!((f - q).abs() < 0.02, "{f} vs {q}");
        }
        assert!((out[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gumbel_frequencies(&[], 1.0, 10, 0).is_err());
        assert!(gumbel_frequencies(&[0.5, -0.1], 1.0, 10, 0).is_err());
    }

    #[test]
    fn flops_curve_grows_with_side() {
        let c = flops_curve("resnet50", &[128, 160, 224]).unwrap();
        assert!(c[0] < c[1] && c[1] < c[2]);
        assert!((c[2] - 4089.184256).abs() < 1e-6);
        let text = "name = t\ninput_channels = 3\noutputs = 2\nconv k=3 cin=3 cout=4 pad=1\ngap\nfc din=4 dout=2\n";
        assert_eq!(flops_curve(text, &[2]).unwrap(), vec![(9 * 3 * 4 * 4 + 8) as f64 / 1e6]);
        assert!(flops_curve("conv k=", &[8]).is_err());
    }
}
