//! Images to token sequences.
//!
//! Vanilla tokenization cuts the image into non-overlapping `P x P` patches,
//! flattens them and projects each to `d` features. Shifted patch
//! tokenization (SPT) first concatenates four diagonally shifted copies of
//! the image along the channel axis and normalises each flattened patch
//! before projecting. A class token may be prepended, and a positional
//! encoding is added to every token.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::tensor::{normal_tensor, Bound, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// `(image_size / patch_size)^2`.
pub fn num_patches(image_size: usize, patch_size: usize) -> Result<usize> {
    if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
        return Err(Error::Indivisible {
            image_size,
            patch_size,
        });
    }
    let side = image_size / patch_size;
    Ok(side * side)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize, channels: usize) -> Result<Self> {
        num_patches(image_size, patch_size)?;
        if channels == 0 {
            return Err(Error::InvalidArgument("patch grid needs at least one channel".into()));
        }
        Ok(Self {
            image_size,
            patch_size,
            channels,
        })
    }

    /// Patches per row (and per column) of the grid.
    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.side() * self.side()
    }

    pub fn elements_per_patch(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Grid cell `(row, col)` of raster patch index `p`.
    pub fn cell(&self, p: usize) -> (usize, usize) {
        (p / self.side(), p % self.side())
    }

    fn check(&self, img: &ImageBuffer) -> Result<()> {
        let (h, w, c) = img.dims();
        if (h, w, c) != (self.image_size, self.image_size, self.channels) {
            return Err(Error::shape(
                "patchify",
                &[h, w, c],
                &[self.image_size, self.image_size, self.channels],
            ));
        }
        Ok(())
    }
}

/// Appends the `N x (P*P*C)` patch matrix of `img` to `out`.
fn patchify_into<T: Real>(img: &ImageBuffer, grid: &PatchGrid, out: &mut Vec<T>) {
    let (p, c, side) = (grid.patch_size, grid.channels, grid.side());
    let px = img.pixels();
    for gr in 0..side {
        for gc in 0..side {
            for y in gr * p..(gr + 1) * p {
                let start = img.index(y, gc * p, 0);
                out.extend(px[start..start + p * c].iter().map(|&v| T::from_f64_lossy(f64::from(v))));
            }
        }
    }
}

/// Raster-ordered patch rows, each the row-major `P x P x C` block with
/// channels fastest.
pub fn vanilla_patchify<T: Real>(img: &ImageBuffer, grid: &PatchGrid) -> Result<Tensor<T>> {
    grid.check(img)?;
    let mut data = Vec::with_capacity(grid.num_patches() * grid.elements_per_patch());
    patchify_into(img, grid, &mut data);
    Tensor::new(vec![grid.num_patches(), grid.elements_per_patch()], data)
}

/// Inverse of [`vanilla_patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, grid: &PatchGrid) -> Result<ImageBuffer> {
    let expected = [grid.num_patches(), grid.elements_per_patch()];
    if patches.shape() != expected {
        return Err(Error::shape("unpatchify", patches.shape(), &expected));
    }
    let (p, c, side) = (grid.patch_size, grid.channels, grid.side());
    let mut img = ImageBuffer::filled(grid.image_size, grid.image_size, c, 0.0)?;
    let src = patches.data();
    let mut k = 0;
    for gr in 0..side {
        for gc in 0..side {
            for y in gr * p..(gr + 1) * p {
                let start = img.index(y, gc * p, 0);
                for (dst, v) in img.pixels_mut()[start..start + p * c].iter_mut().zip(&src[k..k + p * c]) {
                    *dst = v.to_f64_lossy() as f32;
                }
                k += p * c;
            }
        }
    }
    Ok(img)
}

/// Content displacement `(dy, dx)` of each SPT channel group, in order
/// original, left-up, right-up, left-down, right-down.
pub fn spt_offsets(patch_size: usize) -> [(isize, isize); 5] {
    let s = (patch_size / 2) as isize;
    [(0, 0), (-s, -s), (-s, s), (s, -s), (s, s)]
}

/// Concatenates the image with its four half-patch diagonal shifts along the
/// channel axis. Vacated pixels repeat the nearest edge pixel.
pub fn spt_concat(img: &ImageBuffer, patch_size: usize) -> Result<ImageBuffer> {
    if patch_size == 0 || patch_size % 2 != 0 {
        return Err(Error::OddPatch(patch_size));
    }
    let (h, w, c) = img.dims();
    let offsets = spt_offsets(patch_size);
    let mut pixels = Vec::with_capacity(h * w * c * 5);
    for y in 0..h {
        for x in 0..w {
            for &(dy, dx) in &offsets {
                for ch in 0..c {
                    pixels.push(img.get_clamped(y as isize - dy, x as isize - dx, ch));
                }
            }
        }
    }
    ImageBuffer::new(h, w, 5 * c, pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PatchMode {
    #[default]
    Vanilla,
    Spt,
}

impl fmt::Display for PatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchMode::Vanilla => "vanilla",
            PatchMode::Spt => "spt",
        })
    }
}

impl FromStr for PatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(PatchMode::Vanilla),
            "spt" => Ok(PatchMode::Spt),
            _ => Err(Error::Config(format!("unknown patch mode `{s}` (vanilla|spt)"))),
        }
    }
}

/// Element counts of one patch: as cut from the input image, and as fed to
/// the projection (five times larger under SPT).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchElements {
    pub pre_concat: usize,
    pub post_concat: usize,
}

pub fn patch_elements(grid: &PatchGrid, mode: PatchMode) -> PatchElements {
    let pre = grid.elements_per_patch();
    PatchElements {
        pre_concat: pre,
        post_concat: match mode {
            PatchMode::Vanilla => pre,
            PatchMode::Spt => 5 * pre,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PosEncodingKind {
    /// No positional information (used to test permutation equivariance).
    None,
    #[default]
    Learnable1d,
    Learnable2dConcat,
    Sinusoidal10000,
    Sinusoidal1000,
}

impl PosEncodingKind {
    pub const ALL: [PosEncodingKind; 5] = [
        PosEncodingKind::None,
        PosEncodingKind::Learnable1d,
        PosEncodingKind::Learnable2dConcat,
        PosEncodingKind::Sinusoidal10000,
        PosEncodingKind::Sinusoidal1000,
    ];

    pub fn is_learnable(self) -> bool {
        matches!(self, PosEncodingKind::Learnable1d | PosEncodingKind::Learnable2dConcat)
    }
}

impl fmt::Display for PosEncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosEncodingKind::None => "none",
            PosEncodingKind::Learnable1d => "learnable_1d",
            PosEncodingKind::Learnable2dConcat => "learnable_2d_concat",
            PosEncodingKind::Sinusoidal10000 => "sinusoidal_10000",
            PosEncodingKind::Sinusoidal1000 => "sinusoidal_1000",
        })
    }
}

impl FromStr for PosEncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosEncodingKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown positional encoding `{s}`")))
    }
}

/// `PE(pos, 2k) = sin(pos * base^(-2k/d))`, `PE(pos, 2k+1) = cos(..)` for
/// positions `0..n`.
pub fn sinusoidal_table<T: Real>(n: usize, d: usize, base: f64) -> Result<Tensor<T>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::OddDimension {
            kind: "sinusoidal",
            dim: d,
        });
    }
    Tensor::from_f64(
        vec![n, d],
        &(0..n * d)
            .map(|i| {
                let (pos, j) = (i / d, i % d);
                let k = j / 2;
                let angle = pos as f64 * base.powf(-(2.0 * k as f64) / d as f64);
                if j % 2 == 0 {
                    angle.sin()
                } else {
                    angle.cos()
                }
            })
            .collect::<Vec<_>>(),
    )
}

/// Dense `[tokens, d]` positional table. For learnable kinds this is the
/// initial value (normal(0, 0.02)); the 2D kind places `[X[col] | Y[row]]`
/// on each patch and a separate full-width vector on the class token.
pub fn positional_encoding<T: Real>(
    kind: PosEncodingKind,
    grid_side: usize,
    cls: bool,
    d: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let n = grid_side * grid_side + usize::from(cls);
    match kind {
        PosEncodingKind::None => Ok(Tensor::zeros(vec![n, d])),
        PosEncodingKind::Sinusoidal10000 => sinusoidal_table(n, d, 10000.0),
        PosEncodingKind::Sinusoidal1000 => sinusoidal_table(n, d, 1000.0),
        PosEncodingKind::Learnable1d => Ok(normal_tensor(vec![n, d], INIT_STD, rng)),
        PosEncodingKind::Learnable2dConcat => {
            let tables = Learnable2d::init(grid_side, cls, d, rng)?;
            Ok(tables.assemble(grid_side, cls))
        }
    }
}

struct Learnable2d<T> {
    x: Tensor<T>,
    y: Tensor<T>,
    cls: Option<Tensor<T>>,
}

impl<T: Real> Learnable2d<T> {
    fn init(side: usize, cls: bool, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::OddDimension {
                kind: "learnable_2d_concat",
                dim: d,
            });
        }
        Ok(Self {
            x: normal_tensor(vec![side, d / 2], INIT_STD, rng),
            y: normal_tensor(vec![side, d / 2], INIT_STD, rng),
            cls: cls.then(|| normal_tensor(vec![1, d], INIT_STD, rng)),
        })
    }

    fn assemble(&self, side: usize, cls: bool) -> Tensor<T> {
        let half = self.x.shape()[1];
        let mut data = Vec::new();
        if let (true, Some(c)) = (cls, &self.cls) {
            data.extend_from_slice(c.data());
        }
        for p in 0..side * side {
            let (r, c) = (p / side, p % side);
            data.extend_from_slice(&self.x.data()[c * half..(c + 1) * half]);
            data.extend_from_slice(&self.y.data()[r * half..(r + 1) * half]);
        }
        let n = side * side + usize::from(cls);
        Tensor::new(vec![n, 2 * half], data).expect("assembled table shape")
    }
}

/// Projects patch rows to `d` features, optionally layer-normalising each
/// row first. `weight` is `[E, d]`, `bias` is `[d]`.
pub fn embed<T: Real>(
    g: &mut Graph<T>,
    patches: Var,
    weight: Var,
    bias: Var,
    layer_norm: Option<(Var, Var, T)>,
) -> Result<Var> {
    let x = match layer_norm {
        Some((gamma, beta, eps)) => g.layer_norm(patches, gamma, beta, eps)?,
        None => patches,
    };
    let y = g.matmul(x, weight)?;
    g.add_rows(y, bias)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedConfig {
    /// Grid of the raw input image (before any SPT concatenation).
    pub grid: PatchGrid,
    pub mode: PatchMode,
    pub pos_encoding: PosEncodingKind,
    pub class_token: bool,
    pub dim: usize,
    pub ln_eps: f64,
}

#[derive(Clone, Debug)]
enum PosParams {
    Table(ParamId),
    Split {
        x: ParamId,
        y: ParamId,
        cls: Option<ParamId>,
    },
}

/// Trainable token embedding: projection, optional LN, class token and
/// positional encoding, registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    cfg: EmbedConfig,
    ln: Option<(ParamId, ParamId)>,
    weight: ParamId,
    bias: ParamId,
    cls: Option<ParamId>,
    pos: Option<PosParams>,
    fixed_pos: Option<Vec<f64>>,
}

impl PatchEmbed {
    pub fn new<T: Real>(cfg: EmbedConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if cfg.mode == PatchMode::Spt && cfg.grid.patch_size % 2 != 0 {
            return Err(Error::OddPatch(cfg.grid.patch_size));
        }
        let e = patch_elements(&cfg.grid, cfg.mode).post_concat;
        let d = cfg.dim;
        let ln = (cfg.mode == PatchMode::Spt).then(|| {
            (
                store.add("embed.ln.gamma", Tensor::full(vec![e], T::one())),
                store.add("embed.ln.beta", Tensor::zeros(vec![e])),
            )
        });
        let weight = store.add("embed.proj.weight", normal_tensor(vec![e, d], INIT_STD, rng));
        let bias = store.add("embed.proj.bias", Tensor::zeros(vec![d]));
        let cls = cfg
            .class_token
            .then(|| store.add("embed.cls", Tensor::zeros(vec![1, d])));
        let side = cfg.grid.side();
        let n = cfg.grid.num_patches() + usize::from(cfg.class_token);
        let (pos, fixed_pos) = match cfg.pos_encoding {
            PosEncodingKind::None => (None, None),
            PosEncodingKind::Learnable1d => (
                Some(PosParams::Table(
                    store.add("embed.pos", normal_tensor(vec![n, d], INIT_STD, rng)),
                )),
                None,
            ),
            PosEncodingKind::Learnable2dConcat => {
                let t = Learnable2d::<T>::init(side, cfg.class_token, d, rng)?;
                let x = store.add("embed.pos_x", t.x);
                let y = store.add("embed.pos_y", t.y);
                let cls = t.cls.map(|c| store.add("embed.pos_cls", c));
                (Some(PosParams::Split { x, y, cls }), None)
            }
            kind => {
                let table: Tensor<f64> = positional_encoding(kind, side, cfg.class_token, d, rng)?;
                (None, Some(table.into_data()))
            }
        };
        Ok(Self {
            cfg,
            ln,
            weight,
            bias,
            cls,
            pos,
            fixed_pos,
        })
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.cfg
    }

    /// Row length of the patch matrix fed to the projection.
    pub fn input_elements(&self) -> usize {
        patch_elements(&self.cfg.grid, self.cfg.mode).post_concat
    }

    pub fn tokens_per_image(&self) -> usize {
        self.cfg.grid.num_patches() + usize::from(self.cfg.class_token)
    }

    /// Appends the projection input rows of one image to `out`.
    pub fn patch_rows_into<T: Real>(&self, img: &ImageBuffer, out: &mut Vec<T>) -> Result<()> {
        self.cfg.grid.check(img)?;
        match self.cfg.mode {
            PatchMode::Vanilla => patchify_into(img, &self.cfg.grid, out),
            PatchMode::Spt => {
                let shifted = spt_concat(img, self.cfg.grid.patch_size)?;
                let grid = PatchGrid {
                    channels: 5 * self.cfg.grid.channels,
                    ..self.cfg.grid
                };
                patchify_into(&shifted, &grid, out);
            }
        }
        Ok(())
    }

    /// `[B * N, E]` patch matrix for a batch of images.
    pub fn patch_rows<T: Real>(&self, images: &[&ImageBuffer]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(images.len() * self.cfg.grid.num_patches() * self.input_elements());
        for img in images {
            self.patch_rows_into(img, &mut out)?;
        }
        Ok(out)
    }

    /// Token embeddings `[B * tokens_per_image, d]` from a `[B * N, E]`
    /// patch matrix.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, patches: Var, batch: usize) -> Result<Var> {
        let n = self.cfg.grid.num_patches();
        if g.shape(patches) != [batch * n, self.input_elements()] {
            return Err(Error::shape("embed", g.shape(patches), &[batch * n, self.input_elements()]));
        }
        let ln = self
            .ln
            .map(|(gamma, beta)| (p[gamma], p[beta], T::from_f64_lossy(self.cfg.ln_eps)));
        let mut x = embed(g, patches, p[self.weight], p[self.bias], ln)?;
        if let Some(cls) = self.cls {
            let stacked = g.concat_rows(&[p[cls], x])?;
            let rows: Vec<usize> = (0..batch)
                .flat_map(|b| std::iter::once(0).chain(1 + b * n..1 + (b + 1) * n))
                .collect();
            x = g.select_rows(stacked, &rows)?;
        }
        let pe = match (&self.pos, &self.fixed_pos) {
            (Some(PosParams::Table(id)), _) => Some(p[*id]),
            (Some(PosParams::Split { x: px, y: py, cls }), _) => {
                let side = self.cfg.grid.side();
                let cols: Vec<usize> = (0..n).map(|i| i % side).collect();
                let rows: Vec<usize> = (0..n).map(|i| i / side).collect();
                let xs = g.select_rows(p[*px], &cols)?;
                let ys = g.select_rows(p[*py], &rows)?;
                let patch_pe = g.concat_cols(&[xs, ys])?;
                Some(match cls {
                    Some(c) => g.concat_rows(&[p[*c], patch_pe])?,
                    None => patch_pe,
                })
            }
            (None, Some(table)) => {
                let data = table.iter().map(|&v| T::from_f64_lossy(v)).collect();
                Some(g.constant(vec![self.tokens_per_image(), self.cfg.dim], data)?)
            }
            (None, None) => None,
        };
        match pe {
            Some(pe) => g.add_rows(x, pe),
            None => Ok(x),
        }
    }
}

/// Token embeddings of a batch, `[B, tokens, d]` flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<T> {
    pub batch: usize,
    pub tokens_per_image: usize,
    pub dim: usize,
    pub tokens: Tensor<T>,
}

/// Runs the embedding on a gradient-free graph.
pub fn tokenize<T: Real>(embed: &PatchEmbed, store: &ParamStore<T>, images: &[&ImageBuffer]) -> Result<TokenBatch<T>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("tokenize needs at least one image".into()));
    }
    let mut g = Graph::inference();
    let p = store.bind(&mut g);
    let rows = embed.patch_rows(images)?;
    let x = g.constant(vec![images.len() * embed.cfg.grid.num_patches(), embed.input_elements()], rows)?;
    let out = embed.forward(&mut g, &p, x, images.len())?;
    let t = g.tensor(out);
    let (b, n, d) = (images.len(), embed.tokens_per_image(), embed.cfg.dim);
    Ok(TokenBatch {
        batch: b,
        tokens_per_image: n,
        dim: d,
        tokens: t.reshape(vec![b, n, d])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn figure_grids() {
        assert_eq!(num_patches(72, 6).unwrap(), 144);
        assert_eq!(num_patches(96, 6).unwrap(), 256);
        assert_eq!(num_patches(72, 9).unwrap(), 64);
        assert_eq!(num_patches(224, 16).unwrap(), 196);
        assert_eq!(num_patches(7, 7).unwrap(), 1);
        assert!(matches!(
            num_patches(72, 7),
            Err(Error::Indivisible { image_size: 72, patch_size: 7 })
        ));
    }

    #[test]
    fn spt_rejects_odd_patch() {
        let img = ImageBuffer::filled(9, 9, 1, 0.5).unwrap();
        assert!(matches!(spt_concat(&img, 3), Err(Error::OddPatch(3))));
    }

    #[test]
    fn parse_names_round_trip() {
        for k in PosEncodingKind::ALL {
            assert_eq!(k.to_string().parse::<PosEncodingKind>().unwrap(), k);
        }
        assert_eq!("spt".parse::<PatchMode>().unwrap(), PatchMode::Spt);
        assert!("overlap".parse::<PatchMode>().is_err());
    }

    #[test]
    fn learnable_2d_table_uses_coordinates() {
        let mut rng = substream(3, "pe", 0);
        let t: Tensor<f64> = positional_encoding(PosEncodingKind::Learnable2dConcat, 3, true, 4, &mut rng).unwrap();
        assert_eq!(t.shape(), &[10, 4]);
        // Patches 1 and 4 share column 1: same X half.
        assert_eq!(t.data()[(1 + 1) * 4..(1 + 1) * 4 + 2], t.data()[(1 + 4) * 4..(1 + 4) * 4 + 2]);
        // Patches 3 and 5 share row 1: same Y half.
        assert_eq!(t.data()[(1 + 3) * 4 + 2..(1 + 3) * 4 + 4], t.data()[(1 + 5) * 4 + 2..(1 + 5) * 4 + 4]);
        assert!(positional_encoding::<f64>(PosEncodingKind::Learnable2dConcat, 3, true, 5, &mut rng).is_err());
    }
}
