//! Image rescaling with Lanczos kernels of order 3, 4 and 5, plus bicubic
//! and bilinear baselines.
//!
//! Every kernel is evaluated as a full 2D neighbourhood sum: for an
//! interpolation point `(x, y)` in source coordinates the output is
//!
//! ```text
//! f(x, y) = (1/w) * sum_{i,j = -r+1..r} F(floor(x)+i, floor(y)+j) * L(i - frac(x)) * L(j - frac(y))
//! ```
//!
//! with `w` the sum of the same tap weights, so constant regions map to the
//! same constant. Output pixel centres map to source coordinates with
//! `src = (dst + 0.5) * in / out - 0.5`; reads outside the image replicate the
//! edge pixel.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Weight sums below this fall back to nearest-neighbour sampling.
pub const DEGENERATE_WEIGHT: f64 = 1e-12;

/// Mean squared error at or below which two images count as identical.
const PSNR_IDENTICAL_MSE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelSpec {
    Lanczos(u8),
    Bicubic,
    Bilinear,
}

impl KernelSpec {
    pub fn lanczos(order: u8) -> Result<Self> {
        if (3..=5).contains(&order) {
            Ok(KernelSpec::Lanczos(order))
        } else {
            Err(Error::InvalidArgument(format!(
                "lanczos order must be 3, 4 or 5, got {order}"
            )))
        }
    }

    /// The five kernels in quality order, reference first.
    pub fn all() -> [KernelSpec; 5] {
        [
            KernelSpec::Lanczos(5),
            KernelSpec::Lanczos(4),
            KernelSpec::Lanczos(3),
            KernelSpec::Bicubic,
            KernelSpec::Bilinear,
        ]
    }

    /// Half-width of the support; `2 * radius` taps per axis.
    pub fn radius(self) -> usize {
        match self {
            KernelSpec::Lanczos(m) => m as usize,
            KernelSpec::Bicubic => 2,
            KernelSpec::Bilinear => 1,
        }
    }

    pub fn weight(self, t: f64) -> f64 {
        match self {
            KernelSpec::Lanczos(m) => lanczos_kernel(t, m),
            KernelSpec::Bicubic => cubic(t),
            KernelSpec::Bilinear => (1.0 - t.abs()).max(0.0),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Lanczos(m) => write!(f, "lanczos{m}"),
            KernelSpec::Bicubic => f.write_str("bicubic"),
            KernelSpec::Bilinear => f.write_str("bilinear"),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bicubic" => Ok(KernelSpec::Bicubic),
            "bilinear" => Ok(KernelSpec::Bilinear),
            other => match other.strip_prefix("lanczos").map(str::parse::<u8>) {
                Some(Ok(m)) => KernelSpec::lanczos(m),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown kernel {s:?} (expected lanczos3|lanczos4|lanczos5|bicubic|bilinear)"
                ))),
            },
        }
    }
}

/// Normalised sinc, exactly 1 at the origin.
pub fn sinc(y: f64) -> f64 {
    if y == 0.0 {
        1.0
    } else {
        let p = std::f64::consts::PI * y;
        p.sin() / p
    }
}

/// `sinc(y) * sinc(y / m)` inside `|y| <= m`, zero outside.
pub fn lanczos_kernel(y: f64, m: u8) -> f64 {
    let m = f64::from(m);
    if y.abs() > m {
        0.0
    } else {
        sinc(y) * sinc(y / m)
    }
}

// Keys cubic convolution with a = -0.5.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Counters accumulated over one resample call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ResampleStats {
    /// 2D kernel taps evaluated (one per neighbourhood cell per output pixel).
    pub taps: u64,
    /// Output pixels that fell back to nearest-neighbour sampling.
    pub fallbacks: u64,
}

/// Maps an output pixel index to its source coordinate.
pub fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Resamples into unclamped 64-bit values, `out_h x out_w x C`.
pub fn resample_raw(
    img: &ImageBuffer,
    out_h: usize,
    out_w: usize,
    spec: KernelSpec,
) -> Result<(Vec<f64>, ResampleStats)> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size must be positive, got {out_h}x{out_w}"
        )));
    }
    let (h, w, c) = img.dims();
    let r = spec.radius() as isize;
    let taps = (2 * r) as usize;
    let mut out = vec![0.0f64; out_h * out_w * c];
    let row_stats: Vec<ResampleStats> = out
        .par_chunks_mut(out_w * c)
        .enumerate()
        .map(|(oy, row)| {
            let mut stats = ResampleStats::default();
            let sy = source_coord(oy, h, out_h);
            let fy = sy.floor();
            let ky: Vec<f64> = (-r + 1..=r).map(|j| spec.weight(j as f64 - (sy - fy))).collect();
            let mut weights = vec![0.0f64; taps * taps];
            let mut acc = vec![0.0f64; c];
            for ox in 0..out_w {
                let sx = source_coord(ox, w, out_w);
                let fx = sx.floor();
                let kx: Vec<f64> =
                    (-r + 1..=r).map(|i| spec.weight(i as f64 - (sx - fx))).collect();
                let mut total = 0.0;
                for (jj, wy) in ky.iter().enumerate() {
                    for (ii, wx) in kx.iter().enumerate() {
                        let wgt = wy * wx;
                        weights[jj * taps + ii] = wgt;
                        total += wgt;
                    }
                }
                stats.taps += (taps * taps) as u64;
                let dst = &mut row[ox * c..(ox + 1) * c];
                if total.abs() < DEGENERATE_WEIGHT {
                    stats.fallbacks += 1;
                    let (ny, nx) = (sy.round() as isize, sx.round() as isize);
                    for (ch, d) in dst.iter_mut().enumerate() {
                        *d = f64::from(img.get_clamped(ny, nx, ch));
                    }
                    continue;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                for jj in 0..taps {
                    let yy = fy as isize + jj as isize - r + 1;
                    for ii in 0..taps {
                        let wgt = weights[jj * taps + ii];
                        if wgt == 0.0 {
                            continue;
                        }
                        let xx = fx as isize + ii as isize - r + 1;
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += wgt * f64::from(img.get_clamped(yy, xx, ch));
                        }
                    }
                }
                for (d, a) in dst.iter_mut().zip(&acc) {
                    *d = a / total;
                }
            }
            stats
        })
        .collect();
    let stats = row_stats.iter().fold(ResampleStats::default(), |a, s| ResampleStats {
        taps: a.taps + s.taps,
        fallbacks: a.fallbacks + s.fallbacks,
    });
    Ok((out, stats))
}

/// Resamples to `out_h x out_w`, clamping the stored values to `[0, 1]`.
pub fn resample(img: &ImageBuffer, out_h: usize, out_w: usize, spec: KernelSpec) -> Result<ImageBuffer> {
    resample_with_stats(img, out_h, out_w, spec).map(|(img, _)| img)
}

pub fn resample_with_stats(
    img: &ImageBuffer,
    out_h: usize,
    out_w: usize,
    spec: KernelSpec,
) -> Result<(ImageBuffer, ResampleStats)> {
    let (raw, stats) = resample_raw(img, out_h, out_w, spec)?;
    let pixels = raw.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Ok((ImageBuffer::new(out_h, out_w, img.channels(), pixels)?, stats))
}

/// Peak signal-to-noise ratio for unit-range signals; `f64::INFINITY` when
/// the two agree to within storage precision.
pub fn psnr(candidate: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(candidate.len(), reference.len(), "psnr length mismatch");
    let mse = candidate
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (f64::from(a) - b).powi(2))
        .sum::<f64>()
        / reference.len().max(1) as f64;
    if mse <= PSNR_IDENTICAL_MSE {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelReport {
    pub kernel: KernelSpec,
    pub seconds: f64,
    /// Against the clamped 64-bit lanczos-5 reference; infinite when equal.
    pub psnr: f64,
}

/// Times each kernel on `img` and scores it against a 64-bit lanczos-5
/// reference at the same output size.
pub fn compare_kernels(
    img: &ImageBuffer,
    out_h: usize,
    out_w: usize,
    kernels: &[KernelSpec],
) -> Result<Vec<KernelReport>> {
    let (reference, _) = resample_raw(img, out_h, out_w, KernelSpec::Lanczos(5))?;
    let reference: Vec<f64> = reference.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    kernels
        .iter()
        .map(|&kernel| {
            let start = Instant::now();
            let out = resample(img, out_h, out_w, kernel)?;
            let seconds = start.elapsed().as_secs_f64();
            Ok(KernelReport {
                kernel,
                seconds,
                psnr: psnr(out.pixels(), &reference),
            })
        })
        .collect()
}

/// Smooth test image made of a few low-frequency sinusoids, well below the
/// sampling limit.
pub fn band_limited_pattern(height: usize, width: usize, channels: usize) -> Result<ImageBuffer> {
    use std::f64::consts::TAU;
    ImageBuffer::from_fn(height, width, channels, |y, x, c| {
        let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
        let phase = c as f64 * 0.7;
        let v = 0.5
            + 0.2 * (TAU * 3.0 * fx + phase).sin()
            + 0.15 * (TAU * 4.0 * fy).cos()
            + 0.1 * (TAU * (2.0 * fx + 5.0 * fy) + 0.3).sin();
        v as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_examples() {
        assert_eq!(lanczos_kernel(0.0, 5), 1.0);
        assert!(lanczos_kernel(2.0, 5).abs() < 1e-15);
        assert_eq!(lanczos_kernel(5.1, 5), 0.0);
        let pi = std::f64::consts::PI;
        let direct = ((pi * 0.5).sin() / (pi * 0.5)) * ((pi * 0.1).sin() / (pi * 0.1));
        assert!((lanczos_kernel(0.5, 5) - direct).abs() < 1e-15);
    }

    #[test]
    fn kernel_symmetry_and_support() {
        for m in 3..=5u8 {
            for i in 0..200 {
                let y = i as f64 * 0.037;
                assert_eq!(lanczos_kernel(y, m), lanczos_kernel(-y, m));
                if y > f64::from(m) {
                    assert_eq!(lanczos_kernel(y, m), 0.0);
                }
            }
        }
    }

    #[test]
    fn parse_and_display() {
        for k in KernelSpec::all() {
            assert_eq!(k.to_string().parse::<KernelSpec>().unwrap(), k);
        }
        assert!("lanczos2".parse::<KernelSpec>().is_err());
        assert!("nearest".parse::<KernelSpec>().is_err());
    }

    #[test]
    fn tap_count_is_square_of_support() {
        let img = ImageBuffer::filled(6, 6, 2, 0.3).unwrap();
        for k in KernelSpec::all() {
            let (_, stats) = resample_with_stats(&img, 7, 5, k).unwrap();
            let per = (2 * k.radius() as u64).pow(2);
            assert_eq!(stats.taps, 35 * per, "{k}");
            assert_eq!(stats.fallbacks, 0);
        }
    }

    #[test]
    fn zero_output_size_is_rejected() {
        let img = ImageBuffer::filled(2, 2, 1, 0.0).unwrap();
        assert!(resample(&img, 0, 2, KernelSpec::Bilinear).is_err());
    }

    #[test]
    fn constant_image_gives_infinite_psnr_everywhere() {
        let img = ImageBuffer::filled(9, 9, 1, 0.7).unwrap();
        let rows = compare_kernels(&img, 13, 6, &KernelSpec::all()).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.psnr.is_infinite()));
    }

    #[test]
    fn bilinear_not_better_than_lanczos3_on_band_limited_pattern() {
        let img = band_limited_pattern(32, 32, 1).unwrap();
        let rows =
            compare_kernels(&img, 77, 77, &[KernelSpec::Lanczos(3), KernelSpec::Bilinear]).unwrap();
        assert!(rows[1].psnr <= rows[0].psnr, "{rows:?}");
    }
}
