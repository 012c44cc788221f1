//! CutMix augmentation.
//!
//! A mixing ratio `lambda ~ Beta(alpha, alpha)` sizes a box of
//! `W*sqrt(1-lambda) x H*sqrt(1-lambda)` centred at a uniform point of the
//! image. Pixels inside the (clipped) box come from the second image, pixels
//! outside from the first. Labels are mixed by the realised pixel areas, so
//! clipping at the border is reflected in the label weights.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng;

/// Image with a probability vector over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageBuffer,
    pub label: Vec<f64>,
}

impl LabeledImage {
    pub fn one_hot(image: ImageBuffer, class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut label = vec![0.0; num_classes];
        label[class] = 1.0;
        Ok(Self { image, label })
    }

    /// Index of the largest label weight (lowest index on ties).
    pub fn dominant_class(&self) -> usize {
        argmax(&self.label)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutMixConfig {
    pub alpha: f64,
    pub seed: u64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        Self { alpha: 1.0, seed: 42 }
    }
}

impl CutMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "cutmix alpha must be positive, got {}",
                self.alpha
            )))
        }
    }
}

/// Half-open integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutMixBox {
    pub center_x: f64,
    pub center_y: f64,
    pub extent_w: f64,
    pub extent_h: f64,
    pub rect: PixelRect,
}

impl CutMixBox {
    /// Box with the given centre and extent, clipped to a `height x width`
    /// image. Edges are rounded to the nearest pixel boundary.
    pub fn new(center_x: f64, center_y: f64, extent_w: f64, extent_h: f64, height: usize, width: usize) -> Self {
        let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
        let rect = PixelRect {
            x0: clip(center_x - extent_w / 2.0, width),
            x1: clip(center_x + extent_w / 2.0, width),
            y0: clip(center_y - extent_h / 2.0, height),
            y1: clip(center_y + extent_h / 2.0, height),
        };
        Self {
            center_x,
            center_y,
            extent_w,
            extent_h,
            rect,
        }
    }
}

/// Draws `lambda ~ Beta(alpha, alpha)` as `g1 / (g1 + g2)` with
/// `g1, g2 ~ Gamma(alpha, 1)`.
pub fn sample_lambda(cfg: &CutMixConfig, rng: &mut impl Rng) -> Result<f64> {
    cfg.validate()?;
    let gamma = Gamma::new(cfg.alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("gamma({}): {e}", cfg.alpha)))?;
    let g1: f64 = gamma.sample(rng);
    let g2: f64 = gamma.sample(rng);
    let total = g1 + g2;
    if total > 0.0 {
        Ok((g1 / total).clamp(0.0, 1.0))
    } else {
        Ok(0.5)
    }
}

/// Uniform centre over the full image, extents `W*sqrt(1-lambda)` and
/// `H*sqrt(1-lambda)`, then clipped.
pub fn get_box(lambda: f64, height: usize, width: usize, rng: &mut impl Rng) -> Result<CutMixBox> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let cut = (1.0 - lambda).sqrt();
    let center_x = rng.random_range(0.0..width as f64);
    let center_y = rng.random_range(0.0..height as f64);
    Ok(CutMixBox::new(
        center_x,
        center_y,
        width as f64 * cut,
        height as f64 * cut,
        height,
        width,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutMixOutcome {
    pub mixed: LabeledImage,
    /// Ratio drawn from the Beta distribution.
    pub lambda: f64,
    /// `1 - area / (W * H)` of the clipped box; the weight of `a`'s label.
    pub lambda_adj: f64,
    pub cut: CutMixBox,
}

fn check_pair(a: &LabeledImage, b: &LabeledImage) -> Result<()> {
    if !a.image.same_dims(&b.image) {
        let (ah, aw, ac) = a.image.dims();
        let (bh, bw, bc) = b.image.dims();
        return Err(Error::shape("cutmix", &[ah, aw, ac], &[bh, bw, bc]));
    }
    if a.label.len() != b.label.len() {
        return Err(Error::shape("cutmix", &[a.label.len()], &[b.label.len()]));
    }
    Ok(())
}

/// Pastes `b` inside `cut.rect` over `a` and mixes labels by area.
pub fn cutmix_with_box(a: &LabeledImage, b: &LabeledImage, cut: CutMixBox) -> Result<(LabeledImage, f64)> {
    check_pair(a, b)?;
    let (h, w, c) = a.image.dims();
    let mut image = a.image.clone();
    let r = cut.rect;
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let i = image.index(y, x, 0);
            image.pixels_mut()[i..i + c].copy_from_slice(&b.image.pixels()[i..i + c]);
        }
    }
    let lambda_adj = 1.0 - r.area() as f64 / (w * h) as f64;
    let label = a
        .label
        .iter()
        .zip(&b.label)
        .map(|(x, y)| lambda_adj * x + (1.0 - lambda_adj) * y)
        .collect();
    Ok((LabeledImage { image, label }, lambda_adj))
}

pub fn cutmix(a: &LabeledImage, b: &LabeledImage, cfg: &CutMixConfig, rng: &mut impl Rng) -> Result<CutMixOutcome> {
    check_pair(a, b)?;
    let lambda = sample_lambda(cfg, rng)?;
    let (h, w, _) = a.image.dims();
    let cut = get_box(lambda, h, w, rng)?;
    let (mixed, lambda_adj) = cutmix_with_box(a, b, cut)?;
    Ok(CutMixOutcome {
        mixed,
        lambda,
        lambda_adj,
        cut,
    })
}

/// One augmented example per pair index: partners `(a, b)` and the mix are
/// drawn from the substream `(seed, "cutmix-pairs", index)`.
pub fn cutmix_pairs(items: &[LabeledImage], cfg: &CutMixConfig, pairs: usize) -> Result<Vec<(usize, usize, CutMixOutcome)>> {
    cfg.validate()?;
    if items.is_empty() {
        return if pairs == 0 {
            Ok(Vec::new())
        } else {
            Err(Error::Data("cannot mix pairs from an empty dataset".into()))
        };
    }
    (0..pairs)
        .map(|i| {
            let mut rng = rng::substream(cfg.seed, "cutmix-pairs", i as u64);
            let a = rng.random_range(0..items.len());
            let b = rng.random_range(0..items.len());
            let out = cutmix(&items[a], &items[b], cfg, &mut rng)?;
            Ok((a, b, out))
        })
        .collect()
}
