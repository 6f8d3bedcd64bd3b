//! Cross-module invariants as property tests.

mod common;

use common::*;
use ipt::degradations::{bicubic_resize, derive_seed, DegradationKind};
use ipt::eval::{dihedral, dihedral_inverse, self_ensemble_infer, tiled_restore, IdentityRestorer, Restorer};
use ipt::imaging::{extract_patches, merge_patches, ImageBuffer};
use ipt::losses::contrastive_loss;
use ipt::numerics::{conv2d, Scalar, Tape};
use proptest::prelude::*;

fn image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let t = randn(&[h * w * 3], seed);
    ImageBuffer::new(h, w, t.data().iter().map(|v| 0.5 + 0.2 * v).collect(), "p").unwrap()
}

/// Nearest-neighbour ×k upscaler; position-exact, so tiling must not show.
struct NearestUp(usize);

impl Restorer for NearestUp {
    fn output_scale(&self) -> usize {
        self.0
    }

    fn restore_patch(&self, p: &ImageBuffer) -> ipt::Result<ImageBuffer> {
        let k = self.0;
        Ok(ImageBuffer::from_fn(p.height() * k, p.width() * k, |y, x, c| p.get(y / k, x / k, c)))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn extract_then_merge_is_exact(h in 8usize..80, w in 8usize..80, patch in 4usize..16, ov in 0usize..4, seed in any::<u64>()) {
        let patch = patch.min(h).min(w);
        let ov = ov.min(patch - 1);
        let img = image(h, w, seed);
        let (grid, patches) = extract_patches(&img, patch, ov).unwrap();
        let cov = grid.coverage();
        prop_assert!(cov.iter().all(|&c| c >= 1));
        let merged = merge_patches(&grid, &patches).unwrap();
        prop_assert_eq!(merged.pixels(), img.pixels());
    }

    #[test]
    fn tiled_restore_matches_whole_image(h in 1usize..40, w in 1usize..40, k in 1usize..4, patch in 4usize..12, ov in 0usize..3, seed in any::<u64>()) {
        let img = image(h, w, seed);
        let whole = NearestUp(k).restore_patch(&img).unwrap();
        let tiled = tiled_restore(&NearestUp(k), &img, patch, ov.min(patch - 1)).unwrap();
        prop_assert_eq!(tiled.pixels(), whole.pixels());
        let same = tiled_restore(&IdentityRestorer, &img, patch, ov.min(patch - 1)).unwrap();
        prop_assert_eq!(same.pixels(), img.pixels());
    }

    #[test]
    fn dihedral_transforms_invert(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let img = image(h, w, seed);
        for t in 0..8 {
            let back = dihedral_inverse(&dihedral(&img, t), t);
            prop_assert_eq!(back.pixels(), img.pixels());
        }
    }

    #[test]
    fn self_ensemble_of_identity_is_identity(h in 2usize..20, w in 2usize..20, seed in any::<u64>()) {
        let img = image(h, w, seed);
        let out = self_ensemble_infer(&IdentityRestorer, &img, 8, 2).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_keeps_constants(h in 4usize..30, w in 4usize..30, v in 0.0f64..1.0, num in 1usize..4, den in 1usize..5) {
        prop_assume!(h * num / den > 0 && w * num / den > 0);
        let out = bicubic_resize(&ImageBuffer::filled(h, w, v as Scalar), num, den).unwrap();
        prop_assert_eq!((out.height(), out.width()), (h * num / den, w * num / den));
        prop_assert!(out.pixels().iter().all(|x| (*x as f64 - v).abs() < 1e-9));
    }

    #[test]
    fn degradations_are_seed_deterministic(seed in any::<u64>(), which in 0usize..3) {
        let kind: DegradationKind = ["sr3", "noise50", "rain"][which].parse().unwrap();
        let img = image(12, 12, 1);
        let a = kind.apply(&img, seed).unwrap();
        prop_assert_eq!(&a, &kind.apply(&img, seed).unwrap());
        if which > 0 {
            prop_assert_ne!(a, kind.apply(&img, seed ^ 1).unwrap());
        }
    }

    #[test]
    fn derived_seeds_separate_tasks_and_images(g in any::<u64>(), i in 0u64..1000) {
        prop_assert_ne!(derive_seed(g, i, "sr2"), derive_seed(g, i, "sr3"));
        prop_assert_ne!(derive_seed(g, i, "sr2"), derive_seed(g, i + 1, "sr2"));
        prop_assert_eq!(derive_seed(g, i, "rain"), derive_seed(g, i, "rain"));
    }

    #[test]
    fn contrastive_matches_direct_evaluation(b in 2usize..5, n in 1usize..4, d in 2usize..6, seed in any::<u64>()) {
        let f = randn(&[b, n, d], seed);
        let tape = Tape::inference();
        let v = contrastive_loss(&tape.constant(f.clone())).unwrap().value().item() as f64;
        prop_assert!((v - contrastive_oracle(&f)).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn conv2d_gradients_hold_for_any_geometry(
        cin in 1usize..3, cout in 1usize..3, k in 1usize..4, stride in 1usize..3, pad in 0usize..3,
        h in 3usize..7, w in 3usize..7, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let inputs = [randn(&[2, cin, h, w], seed), randn(&[cout, cin, k, k], seed ^ 1), randn(&[cout], seed ^ 2)];
        let c = check_fn("conv2d", &inputs, |_, v| conv2d(&v[0], &v[1], Some(&v[2]), stride, pad));
        prop_assert!(c.max_rel < 1e-4, "{:?}", c);
    }
}
