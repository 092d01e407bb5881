//! Image batches and the per-batch transforms: corner-aligned bilinear
//! resizing, pad-and-crop/flip augmentation, and channel normalization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square images `[N, C, S, S]` with one class label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Vec<usize>) -> Result<Self> {
        let [n, _, h, w] = pixels.dims4()?;
        if h != w {
            return Err(Error::Dimension(format!("images must be square, got {h}x{w}")));
        }
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} images", labels.len())));
        }
        Ok(ImageBatch { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Side length of the square images.
    pub fn side(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        ImageBatch {
            pixels: self.pixels.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Source index pair and blend weight for one output coordinate.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Corner-aligned sampling grid: output `i` samples input coordinate
/// `i·(src−1)/(dst−1)`. A single-pixel target samples coordinate 0.
fn taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return Tap { lo: 0, hi: 0, frac: 0.0 };
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

fn blend(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        (1.0 - t) * a + t * b
    }
}

/// Resizes every channel of every image to `target × target` with
/// corner-aligned bilinear interpolation (output corners equal input corners).
pub fn bilinear_resize(batch: &ImageBatch, target: usize) -> Result<ImageBatch> {
    let pixels = resize_tensor(&batch.pixels, target)?;
    Ok(ImageBatch {
        pixels,
        labels: batch.labels.clone(),
    })
}

pub fn resize_tensor(pixels: &Tensor, target: usize) -> Result<Tensor> {
    if target == 0 {
        return Err(Error::Config("resize target must be at least 1".into()));
    }
    let [n, c, h, w] = pixels.dims4()?;
    if h == target && w == target {
        return Ok(pixels.clone());
    }
    let rows = taps(h, target);
    let cols = taps(w, target);
    let mut out = Vec::with_capacity(n * c * target * target);
    let mut tmp = vec![0.0; h * target];
    for plane in pixels.data().chunks(h * w) {
        // Horizontal pass into `tmp` (h × target), then vertical.
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (x, t) in cols.iter().enumerate() {
                tmp[y * target + x] = blend(src[t.lo], src[t.hi], t.frac);
            }
        }
        for t in &rows {
            for x in 0..target {
                out.push(blend(tmp[t.lo * target + x], tmp[t.hi * target + x], t.frac));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, target, target], out))
}

/// Crop offsets and flip decision for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        dy: 0,
        dx: 0,
        flip: false,
    };

    /// Uniform crop offsets in `[0, 2·pad]`, flip with probability 1/2.
    pub fn sample<R: Rng + ?Sized>(pad: usize, rng: &mut R) -> Self {
        AugmentDraw {
            dy: rng.gen_range(0..=2 * pad),
            dx: rng.gen_range(0..=2 * pad),
            flip: rng.gen_bool(0.5),
        }
    }
}

/// Zero-pads by `pad`, crops back to the original size at a random offset and
/// mirrors horizontally with probability 1/2, independently per image.
pub fn augment_train<R: Rng + ?Sized>(batch: &ImageBatch, pad: usize, rng: &mut R) -> ImageBatch {
    let draws: Vec<AugmentDraw> = (0..batch.len()).map(|_| AugmentDraw::sample(pad, rng)).collect();
    augment_with(batch, pad, &draws)
}

/// Applies explicit per-image draws (see [`augment_train`]).
pub fn augment_with(batch: &ImageBatch, pad: usize, draws: &[AugmentDraw]) -> ImageBatch {
    assert_eq!(draws.len(), batch.len(), "one draw per image");
    let [_, c, s, _] = batch.pixels.dims4().expect("ImageBatch is rank 4");
    let src = batch.pixels.data();
    let mut out = vec![0.0; src.len()];
    for (i, d) in draws.iter().enumerate() {
        assert!(d.dy <= 2 * pad && d.dx <= 2 * pad, "crop offset outside padded image");
        for ch in 0..c {
            let base = (i * c + ch) * s * s;
            for y in 0..s {
                let sy = (y + d.dy) as isize - pad as isize;
                if sy < 0 || sy >= s as isize {
                    continue;
                }
                for x in 0..s {
                    let sx = (x + d.dx) as isize - pad as isize;
                    if sx < 0 || sx >= s as isize {
                        continue;
                    }
                    let ox = if d.flip { s - 1 - x } else { x };
                    out[base + y * s + ox] = src[base + sy as usize * s + sx as usize];
                }
            }
        }
    }
    ImageBatch {
        pixels: Tensor::from_parts(batch.pixels.shape().to_vec(), out),
        labels: batch.labels.clone(),
    }
}

/// `(x − mean_c) / std_c` per channel.
pub fn normalize(batch: &ImageBatch, means: &[f64], stds: &[f64]) -> Result<ImageBatch> {
    Ok(ImageBatch {
        pixels: normalize_tensor(&batch.pixels, means, stds)?,
        labels: batch.labels.clone(),
    })
}

pub fn normalize_tensor(pixels: &Tensor, means: &[f64], stds: &[f64]) -> Result<Tensor> {
    let [_, c, h, w] = pixels.dims4()?;
    if means.len() != c || stds.len() != c {
        return Err(Error::Config(format!(
            "normalization needs {c} means and stds, got {} and {}",
            means.len(),
            stds.len()
        )));
    }
    if let Some(s) = stds.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Config(format!("normalization std must be positive, got {s}")));
    }
    let hw = h * w;
    let mut out = pixels.clone();
    for (k, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = k % c;
        plane.iter_mut().for_each(|v| *v = (*v - means[ch]) / stds[ch]);
    }
    Ok(out)
}

/// Per-channel mean and (population) standard deviation of a batch.
pub fn channel_stats(pixels: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = pixels.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (k, plane) in pixels.data().chunks(hw).enumerate() {
        mean[k % c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (k, plane) in pixels.data().chunks(hw).enumerate() {
        let m = mean[k % c];
        sq[k % c] += plane.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let std = sq.iter().map(|s| (s / count).sqrt()).collect();
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(side: usize, data: Vec<f64>) -> ImageBatch {
        let n = data.len() / (side * side);
        ImageBatch::new(Tensor::new(&[n, 1, side, side], data).unwrap(), vec![0; n]).unwrap()
    }

    #[test]
    fn two_by_two_to_three_by_three() {
        let b = batch(2, vec![0., 2., 4., 6.]);
        let r = bilinear_resize(&b, 3).unwrap();
        assert_eq!(r.pixels.data(), &[0., 1., 2., 2., 3., 4., 4., 5., 6.]);
    }

    #[test]
    fn same_size_is_identity() {
        let data: Vec<f64> = (0..16).map(|v| (v as f64).sin()).collect();
        let b = batch(4, data);
        assert_eq!(bilinear_resize(&b, 4).unwrap(), b);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(bilinear_resize(&batch(2, vec![0.; 4]), 0).is_err());
    }

    #[test]
    fn no_pad_no_flip_is_identity() {
        let data: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let b = batch(3, data);
        assert_eq!(augment_with(&b, 0, &[AugmentDraw::IDENTITY]), b);
    }

    #[test]
    fn double_flip_is_identity() {
        let data: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let b = batch(5, data);
        let d = [AugmentDraw {
            dy: 0,
            dx: 0,
            flip: true,
        }];
        let once = augment_with(&b, 0, &d);
        assert_ne!(once, b);
        assert_eq!(augment_with(&once, 0, &d), b);
    }

    #[test]
    fn crop_shifts_with_zero_fill() {
        let b = batch(2, vec![1., 2., 3., 4.]);
        let d = [AugmentDraw {
            dy: 0,
            dx: 0,
            flip: false,
        }];
        // pad 1, offset 0: output (y,x) reads source (y−1, x−1)
        assert_eq!(augment_with(&b, 1, &d).pixels.data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn normalize_rejects_zero_std() {
        let b = batch(2, vec![0.; 4]);
        assert!(matches!(normalize(&b, &[0.], &[0.]), Err(Error::Config(_))));
        assert!(matches!(normalize(&b, &[0., 1.], &[1., 1.]), Err(Error::Config(_))));
    }

    #[test]
    fn normalize_constant_at_mean_is_zero() {
        let b = batch(2, vec![0.3; 4]);
        let n = normalize(&b, &[0.3], &[0.2]).unwrap();
        assert!(n.pixels.data().iter().all(|v| *v == 0.0));
        assert_eq!(normalize(&b, &[0.], &[1.]).unwrap(), b);
    }
}
