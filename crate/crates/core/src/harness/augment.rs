//! Batch augmentation: padded random crops with horizontal flips, and
//! MixUp on the first half of a batch with CutMix on the rest.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn dims(images: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    match *images.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(shape_err("augment", format!("expected [B, C, H, W], got {s:?}"))),
    }
}

/// Zero-pads every image by `pad`, takes a random crop of the original size
/// and mirrors it horizontally with probability one half.
pub fn crop_flip<R: Rng + ?Sized>(images: &mut Tensor<f32>, pad: usize, rng: &mut R) -> Result<()> {
    let (b, c, h, w) = dims(images)?;
    let plane = h * w;
    let mut scratch = vec![0.0f32; c * plane];
    for i in 0..b {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        let img = &mut images.data_mut()[i * c * plane..(i + 1) * c * plane];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
                    let sx = sx0 + dx;
                    scratch[ch * plane + y * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        img[ch * plane + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&scratch);
    }
    Ok(())
}

/// Pasted rectangle `[y0, y0 + h) × [x0, x0 + w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CutBox {
    pub fn area_fraction(&self, height: usize, width: usize) -> f64 {
        (self.h * self.w) as f64 / (height * width) as f64
    }

    /// Box covering roughly `fraction` of the image around a random centre,
    /// clipped to the image.
    pub fn sample<R: Rng + ?Sized>(fraction: f64, height: usize, width: usize, rng: &mut R) -> Self {
        let r = fraction.clamp(0.0, 1.0).sqrt();
        let (ch, cw) = (
            (height as f64 * r).round() as usize,
            (width as f64 * r).round() as usize,
        );
        let cy = rng.random_range(0..height);
        let cx = rng.random_range(0..width);
        let y0 = cy.saturating_sub(ch / 2);
        let x0 = cx.saturating_sub(cw / 2);
        let y1 = (cy + ch - ch / 2).min(height);
        let x1 = (cx + cw - cw / 2).min(width);
        Self {
            y0,
            x0,
            h: y1 - y0,
            w: x1 - x0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixKind {
    MixUp { lambda: f64 },
    CutMix { cut: CutBox },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixRecord {
    pub partner: usize,
    pub kind: MixKind,
    /// Label weight kept by the example itself; the partner receives the rest.
    pub self_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub records: Vec<MixRecord>,
}

/// Number of leading examples that receive MixUp.
pub fn mixup_count(batch: usize) -> usize {
    batch.div_ceil(2)
}

/// Deterministic mixing with given partners, MixUp weight and CutMix box.
/// Partners always contribute their unmixed image and label.
pub fn mix_batch(
    images: &Tensor<f32>,
    targets: &Tensor<f32>,
    partners: &[usize],
    mixup_lambda: f64,
    cut: CutBox,
) -> Result<MixedBatch> {
    let (b, c, h, w) = dims(images)?;
    let classes = match *targets.shape() {
        [tb, k] if tb == b => k,
        ref s => return Err(shape_err("mix_batch", format!("targets {s:?} for batch {b}"))),
    };
    if partners.len() != b || partners.iter().any(|&p| p >= b) {
        return Err(shape_err("mix_batch", "partner list must index the batch"));
    }
    if cut.y0 + cut.h > h || cut.x0 + cut.w > w {
        return Err(shape_err("mix_batch", format!("{cut:?} outside {h}×{w} image")));
    }
    let n_img = c * h * w;
    let src = images.data();
    let tsrc = targets.data();
    let mut out = images.clone();
    let mut tout = targets.clone();
    let mut records = Vec::with_capacity(b);
    let cut_frac = cut.area_fraction(h, w);
    for (i, &p) in partners.iter().enumerate() {
        let (kind, self_weight) = if i < mixup_count(b) {
            let l = mixup_lambda as f32;
            let (a, bb) = (&src[i * n_img..][..n_img], &src[p * n_img..][..n_img]);
            for (o, (&x, &y)) in out.data_mut()[i * n_img..][..n_img].iter_mut().zip(a.iter().zip(bb)) {
                *o = l * x + (1.0 - l) * y;
            }
            (MixKind::MixUp { lambda: mixup_lambda }, mixup_lambda)
        } else {
            let dst = &mut out.data_mut()[i * n_img..][..n_img];
            for ch in 0..c {
                for y in cut.y0..cut.y0 + cut.h {
                    let row = ch * h * w + y * w;
                    dst[row + cut.x0..row + cut.x0 + cut.w]
                        .copy_from_slice(&src[p * n_img + row + cut.x0..p * n_img + row + cut.x0 + cut.w]);
                }
            }
            (MixKind::CutMix { cut }, 1.0 - cut_frac)
        };
        let s = self_weight as f32;
        for k in 0..classes {
            tout.data_mut()[i * classes + k] = s * tsrc[i * classes + k] + (1.0 - s) * tsrc[p * classes + k];
        }
        records.push(MixRecord {
            partner: p,
            kind,
            self_weight,
        });
    }
    Ok(MixedBatch {
        images: out,
        targets: tout,
        records,
    })
}

/// MixUp with `λ ~ Beta(α, α)` on the first `⌈B/2⌉` examples and CutMix with
/// a box of area fraction `1 − λ'` (`λ' ~ Beta(α, α)`) on the rest. Partners
/// come from a random permutation of the batch.
pub fn mixup_cutmix<R: Rng + ?Sized>(
    images: &Tensor<f32>,
    targets: &Tensor<f32>,
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    let (b, _, h, w) = dims(images)?;
    if b < 2 {
        return Err(Error::Config(format!("mixing needs at least two examples, got {b}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mix alpha {alpha}: {e}")))?;
    let mut partners: Vec<usize> = (0..b).collect();
    partners.shuffle(rng);
    let lambda = beta.sample(rng);
    let cut = CutBox::sample(1.0 - beta.sample(rng), h, w, rng);
    mix_batch(images, targets, &partners, lambda, cut)
}
