use hknas_core::hyperkernel::{make_masks, Candidate, HyperKernel, KernelKind, MaskSet};
use hknas_core::ndtensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

#[test]
fn core_counts_match_shell_enumeration() {
    for size in [3, 5, 7, 9, 11] {
        for dims in 1..=3 {
            let m = MaskSet::new(size, dims).unwrap();
            for c in m.all_candidates() {
                assert_eq!(
                    m.core_count(c),
                    common::core_count(size, dims, c.s()),
                    "S={size} d={dims} s={}",
                    c.s()
                );
            }
        }
    }
}

#[test]
fn nine_wide_core_counts() {
    let counts = |d| {
        let m = make_masks(9, d).unwrap();
        m.all_candidates().map(|c| m.core_count(c)).collect::<Vec<_>>()
    };
    assert_eq!(counts(1), [3, 2, 2, 2]);
    assert_eq!(counts(2), [9, 16, 24, 32]);
    assert_eq!(counts(3), [27, 98, 218, 386]);
}

#[test]
fn masks_are_nested_boxes() {
    let m = MaskSet::new(9, 2).unwrap();
    for c in m.all_candidates() {
        let mask = m.mask(c);
        for (p, &v) in mask.iter().enumerate() {
            assert_eq!(v == 1, common::ring_of(p, 9, 2) <= c.s());
        }
        let ones = mask.iter().filter(|&&v| v == 1).count();
        assert_eq!(ones, c.extent() * c.extent());
    }
}

#[test]
fn subkernel_crop_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for dims in 1..=3 {
        let k = HyperKernel::random("k", KernelKind::Standard, dims, 9, 2, 3, &mut rng).unwrap();
        for s in 1..=4 {
            let c = Candidate::new(s).unwrap();
            let got = k.crop(c).unwrap();
            let want = common::crop(k.weights.value.data(), 9, dims, c.extent());
            assert_eq!(got.data(), want.as_slice());
            let masked = k.extract_subkernel(c).unwrap();
            assert_eq!(masked.sum(), got.sum());
        }
    }
}

#[test]
fn structural_params_match_masked_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..300 {
        let dims = 1 + trial % 3;
        let size = [3, 5, 7, 9][rng.random_range(0..4)];
        let (kind, o, i) = if dims == 2 && trial % 2 == 0 {
            let c = rng.random_range(1..=4);
            (KernelKind::Depthwise, c, c)
        } else {
            (KernelKind::Standard, rng.random_range(1..=4), rng.random_range(1..=4))
        };
        let k = HyperKernel::random("k", kind, dims, size, o, i, &mut rng).unwrap();
        let got = k.structural_params().0;
        let want = common::alpha_oracle(k.weights.value.data(), size, dims);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-12, "max error {worst}");
}

#[test]
fn invalid_sizes() {
    assert!(MaskSet::new(8, 2).is_err());
    assert!(MaskSet::new(1, 2).is_err());
    assert!(MaskSet::new(9, 4).is_err());
    assert!(Candidate::new(0).is_err());
    let k = HyperKernel::from_weights("k", KernelKind::Standard, 1, Tensor::zeros(&[1, 1, 9])).unwrap();
    assert!(k.crop(Candidate::new(5).unwrap()).is_err());
}

proptest! {
    #[test]
    fn alpha_is_linear_in_weights(seed in 0u64..500, a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k1 = HyperKernel::random("a", KernelKind::Standard, 2, 9, 2, 2, &mut rng).unwrap();
        let k2 = HyperKernel::random("b", KernelKind::Standard, 2, 9, 2, 2, &mut rng).unwrap();
        let mut w = k1.weights.value.scaled(a);
        w.axpy(1.0, &k2.weights.value).unwrap();
        let mix = HyperKernel::from_weights("m", KernelKind::Standard, 2, w).unwrap();
        let lhs = mix.structural_params().0;
        let (p1, p2) = (k1.structural_params().0, k2.structural_params().0);
        for s in 0..4 {
            prop_assert!((lhs[s] - (a * p1[s] + p2[s])).abs() < 1e-12);
        }
    }

    #[test]
    fn core_masks_partition_footprint(size in (1usize..6).prop_map(|h| 2 * h + 1), dims in 1usize..=3) {
        let m = MaskSet::new(size, dims).unwrap();
        let mut cover = vec![0u32; m.footprint()];
        for c in m.all_candidates() {
            for (p, &v) in m.core_mask(c).iter().enumerate() {
                cover[p] += u32::from(v);
            }
        }
        prop_assert!(cover.iter().all(|&v| v == 1));
        prop_assert_eq!(m.candidates(), size / 2);
    }
}
