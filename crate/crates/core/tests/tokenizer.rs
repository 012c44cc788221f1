use patchformer::image::ImageBuffer;
use patchformer::rng::substream;
use patchformer::tensor::{ParamStore, Tensor};
use patchformer::tokenizer::{
    num_patches, patch_elements, positional_encoding, sinusoidal_table, spt_concat, spt_offsets, tokenize,
    unpatchify, vanilla_patchify, EmbedConfig, PatchEmbed, PatchGrid, PatchMode, PosEncodingKind,
};
use patchformer::Error;
use proptest::prelude::*;
use rand::Rng;

fn noise(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
    let mut r = substream(seed, "noise", 0);
    let px = (0..h * w * c).map(|_| r.random::<f32>()).collect();
    ImageBuffer::new(h, w, c, px).unwrap()
}

#[test]
fn figure_grid_counts() {
    for (size, p, n, e) in [(72, 6, 144, 108), (96, 6, 256, 108), (72, 9, 64, 243), (224, 16, 196, 768)] {
        assert_eq!(num_patches(size, p).unwrap(), n);
        let grid = PatchGrid::new(size, p, 3).unwrap();
        assert_eq!(grid.num_patches(), n);
        assert_eq!(grid.elements_per_patch(), e);
    }
    assert_eq!(num_patches(7, 7).unwrap(), 1);
}

#[test]
fn indivisible_size_names_both_values() {
    let msg = num_patches(70, 6).unwrap_err().to_string();
    assert!(msg.contains("70") && msg.contains('6'), "{msg}");
}

#[test]
fn patchify_shape_and_round_trip() {
    let img = noise(72, 72, 3, 1);
    let grid = PatchGrid::new(72, 6, 3).unwrap();
    let t: Tensor<f32> = vanilla_patchify(&img, &grid).unwrap();
    assert_eq!(t.shape(), &[144, 108]);
    assert_eq!(unpatchify(&t, &grid).unwrap(), img);
}

#[test]
fn marker_pixel_lands_in_raster_patch() {
    let grid = PatchGrid::new(24, 4, 1).unwrap();
    for p in [0, 5, 13, 35] {
        let (r, c) = grid.cell(p);
        assert_eq!((r, c), (p / 6, p % 6));
        let mut img = ImageBuffer::filled(24, 24, 1, 0.0).unwrap();
        img.set(r * 4 + 1, c * 4 + 2, 0, 1.0);
        let t: Tensor<f64> = vanilla_patchify(&img, &grid).unwrap();
        let hot: Vec<usize> = (0..t.len()).filter(|&i| t.data()[i] != 0.0).collect();
        assert_eq!(hot, vec![p * 16 + 4 + 2]);
    }
}

#[test]
fn spt_channels_and_identity_group() {
    let img = noise(12, 12, 3, 2);
    let out = spt_concat(&img, 4).unwrap();
    assert_eq!(out.channels(), 15);
    for y in 0..12 {
        for x in 0..12 {
            for c in 0..3 {
                assert_eq!(out.get(y, x, c), img.get(y, x, c));
            }
        }
    }
    assert!(matches!(spt_concat(&img, 3), Err(Error::OddPatch(3))));
}

#[test]
fn spt_moves_a_delta_diagonally() {
    let p = 4;
    let s = 2isize;
    let (r, c) = (4isize, 3isize);
    let mut img = ImageBuffer::filled(8, 8, 1, 0.0).unwrap();
    img.set(r as usize, c as usize, 0, 1.0);
    let out = spt_concat(&img, p).unwrap();
    let expected = [(0, 0), (-s, -s), (-s, s), (s, -s), (s, s)];
    assert_eq!(spt_offsets(p), expected);
    for (group, (dy, dx)) in expected.into_iter().enumerate() {
        let hot: Vec<(usize, usize)> = (0..8)
            .flat_map(|y| (0..8).map(move |x| (y, x)))
            .filter(|&(y, x)| out.get(y, x, group) != 0.0)
            .collect();
        assert_eq!(hot, vec![((r + dy) as usize, (c + dx) as usize)], "group {group}");
    }
}

#[test]
fn spt_fills_vacated_pixels_from_edge() {
    let img = ImageBuffer::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f32).unwrap();
    let out = spt_concat(&img, 2).unwrap();
    // Right-down group shows content moved by (+1, +1); row 0 and column 0 repeat the edge.
    assert_eq!(out.get(0, 0, 4), img.get(0, 0, 0));
    assert_eq!(out.get(0, 2, 4), img.get(0, 1, 0));
    assert_eq!(out.get(3, 3, 4), img.get(2, 2, 0));
}

#[test]
fn element_counts_before_and_after_concat() {
    let grid = PatchGrid::new(72, 6, 3).unwrap();
    let v = patch_elements(&grid, PatchMode::Vanilla);
    assert_eq!((v.pre_concat, v.post_concat), (108, 108));
    let s = patch_elements(&grid, PatchMode::Spt);
    assert_eq!((s.pre_concat, s.post_concat), (108, 540));
    let grid = PatchGrid::new(70, 7, 3).unwrap();
    let s = patch_elements(&grid, PatchMode::Spt);
    assert_eq!((s.pre_concat, s.post_concat), (147, 735));
}

#[test]
fn sinusoidal_examples() {
    let t: Tensor<f64> = sinusoidal_table(5, 8, 10000.0).unwrap();
    for j in 0..8 {
        assert_eq!(t.at2(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!((t.at2(1, 0) - 1f64.sin()).abs() < 1e-15);
    assert!((t.at2(1, 1) - 1f64.cos()).abs() < 1e-15);
    let k = 2.0;
    let w = 1000f64.powf(-2.0 * k / 8.0);
    let t: Tensor<f64> = sinusoidal_table(5, 8, 1000.0).unwrap();
    assert!((t.at2(3, 4) - (3.0 * w).sin()).abs() < 1e-15);
    assert!(matches!(sinusoidal_table::<f64>(4, 7, 10000.0), Err(Error::OddDimension { dim: 7, .. })));
}

#[test]
fn sinusoidal_rows_have_fixed_norm() {
    for base in [10000.0, 1000.0] {
        let t: Tensor<f64> = sinusoidal_table(145, 64, base).unwrap();
        for r in 0..145 {
            let n: f64 = (0..64).map(|j| t.at2(r, j).powi(2)).sum::<f64>().sqrt();
            assert!((n - 32f64.sqrt()).abs() < 1e-4);
        }
    }
}

#[test]
fn positional_encoding_shapes() {
    let mut r = substream(3, "pe", 0);
    for kind in PosEncodingKind::ALL {
        let with: Tensor<f64> = positional_encoding(kind, 4, true, 16, &mut r).unwrap();
        assert_eq!(with.shape(), &[17, 16], "{kind}");
        let without: Tensor<f64> = positional_encoding(kind, 4, false, 16, &mut r).unwrap();
        assert_eq!(without.shape(), &[16, 16], "{kind}");
    }
    assert!(positional_encoding::<f64>(PosEncodingKind::Learnable2dConcat, 4, true, 15, &mut r).is_err());
}

#[test]
fn learnable_2d_shares_halves_by_row_and_column() {
    let mut r = substream(4, "pe", 0);
    let t: Tensor<f64> = positional_encoding(PosEncodingKind::Learnable2dConcat, 3, true, 8, &mut r).unwrap();
    // Token 1 + p is patch p at (p / 3, p % 3).
    let row = |p: usize| (0..8).map(|j| t.at2(1 + p, j)).collect::<Vec<_>>();
    assert_eq!(row(0)[..4], row(3)[..4]);
    assert_eq!(row(0)[4..], row(1)[4..]);
    assert_ne!(row(0)[..4], row(1)[..4]);
}

fn embedder(mode: PatchMode, pe: PosEncodingKind, cls: bool, store: &mut ParamStore<f32>) -> PatchEmbed {
    let cfg = EmbedConfig {
        grid: PatchGrid::new(72, 6, 3).unwrap(),
        mode,
        pos_encoding: pe,
        class_token: cls,
        dim: 64,
        ln_eps: 1e-6,
    };
    PatchEmbed::new(cfg, store, &mut substream(5, "init", 0)).unwrap()
}

#[test]
fn token_batch_shapes() {
    let imgs = [noise(72, 72, 3, 6), noise(72, 72, 3, 7)];
    let refs: Vec<&ImageBuffer> = imgs.iter().collect();
    let mut store = ParamStore::new();
    let e = embedder(PatchMode::Vanilla, PosEncodingKind::Learnable1d, true, &mut store);
    let tb = tokenize(&e, &store, &refs).unwrap();
    assert_eq!(tb.tokens.shape(), &[2, 145, 64]);
    assert!(tb.tokens.all_finite());

    let mut store = ParamStore::new();
    let e = embedder(PatchMode::Spt, PosEncodingKind::Sinusoidal10000, false, &mut store);
    assert_eq!(e.input_elements(), 540);
    let tb = tokenize(&e, &store, &refs).unwrap();
    assert_eq!(tb.tokens.shape(), &[2, 144, 64]);
}

#[test]
fn class_token_starts_at_zero_plus_position() {
    let img = noise(72, 72, 3, 8);
    let mut store = ParamStore::new();
    let e = embedder(PatchMode::Vanilla, PosEncodingKind::None, true, &mut store);
    let tb = tokenize(&e, &store, &[&img]).unwrap();
    assert!(tb.tokens.data()[..64].iter().all(|&v| v == 0.0));
}

#[test]
fn spt_tokens_see_half_patch_translation() {
    let p = 6;
    let mut a = ImageBuffer::filled(72, 72, 3, 0.0).unwrap();
    let mut b = a.clone();
    for c in 0..3 {
        a.set(30, 30, c, 1.0);
        b.set(30 + p / 2, 30 + p / 2, c, 1.0);
    }
    let mut store = ParamStore::new();
    let e = embedder(PatchMode::Spt, PosEncodingKind::None, false, &mut store);
    let ta = tokenize(&e, &store, &[&a]).unwrap();
    let tb = tokenize(&e, &store, &[&b]).unwrap();
    let changed = ta
        .tokens
        .data()
        .chunks(64)
        .zip(tb.tokens.data().chunks(64))
        .filter(|(x, y)| x != y)
        .count();
    assert!(changed >= 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn patchify_round_trips_bit_exactly(side in 1usize..6, p in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let size = side * p;
        let img = noise(size, size, c, seed);
        let grid = PatchGrid::new(size, p, c).unwrap();
        prop_assert_eq!(grid.num_patches(), side * side);
        let t: Tensor<f32> = vanilla_patchify(&img, &grid).unwrap();
        prop_assert_eq!(t.shape(), &[side * side, p * p * c][..]);
        prop_assert_eq!(unpatchify(&t, &grid).unwrap(), img);
    }

    #[test]
    fn spt_first_group_is_input(h in 2usize..10, w in 2usize..10, c in 1usize..4, half in 1usize..4, seed in any::<u64>()) {
        let img = noise(h, w, c, seed);
        let out = spt_concat(&img, 2 * half).unwrap();
        prop_assert_eq!(out.channels(), 5 * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    prop_assert_eq!(out.get(y, x, ch), img.get(y, x, ch));
                }
            }
        }
    }
}
