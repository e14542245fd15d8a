mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use layerfit::checkpoint;
use layerfit::codec::LatentCodec;
use layerfit::gmf::{assemble, cfg_combine, extract_slot};
use layerfit::metrics::{self, Normalization};
use layerfit::{ParamStore, Tensor};

fn norm_strategy() -> impl Strategy<Value = Normalization> {
    prop_oneof![Just(Normalization::RawSum), Just(Normalization::PerPixel)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bands_and_interiors_partition_each_layer(seed in any::<u64>(), layers in 1usize..5, radius in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = common::random_layers(12, 14, layers, &mut rng);
        let r = metrics::derive_regions(&masks, radius).unwrap();
        for ((band, interior), layer) in r.bands.iter().zip(&r.interiors).zip(&masks) {
            prop_assert_eq!(&band.or(interior).unwrap(), layer);
            prop_assert!(band.and(interior).unwrap().is_empty());
        }
        prop_assert!(r.bands[layers - 1].is_empty());
    }

    #[test]
    fn lacd_is_homogeneous_in_the_error(seed in any::<u64>(), s in 0.0f64..4.0, lambda1 in 0.0f64..6.0, norm in norm_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = common::random_layers(10, 10, 2, &mut rng);
        let gt = common::random_image(10, 10, &mut rng);
        let d = Tensor::randn(gt.shape(), &mut rng);
        let r = metrics::derive_regions(&masks, 2).unwrap();
        let one = gt.zip_with(&d, |a, b| a + b).unwrap();
        let scaled = gt.zip_with(&d, |a, b| a + s * b).unwrap();
        let base = metrics::lacd(&gt, &one, &r, lambda1, norm).unwrap().lacd;
        let got = metrics::lacd(&gt, &scaled, &r, lambda1, norm).unwrap().lacd;
        prop_assert!((got - s * base).abs() <= 1e-9 * (1.0 + base.abs() * s));
    }

    #[test]
    fn lacd_is_symmetric_and_zero_on_identity(seed in any::<u64>(), norm in norm_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = common::random_layers(10, 12, 3, &mut rng);
        let (a, b) = (common::random_image(10, 12, &mut rng), common::random_image(10, 12, &mut rng));
        let r = metrics::derive_regions(&masks, 1).unwrap();
        let ab = metrics::lacd(&a, &b, &r, 3.0, norm).unwrap().lacd;
        let ba = metrics::lacd(&b, &a, &r, 3.0, norm).unwrap().lacd;
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(metrics::lacd(&a, &a, &r, 3.0, norm).unwrap().lacd, 0.0);
    }

    #[test]
    fn lacd_is_affine_in_lambda(seed in any::<u64>(), l1 in 0.0f64..10.0, l2 in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = common::random_layers(10, 10, 2, &mut rng);
        let (a, b) = (common::random_image(10, 10, &mut rng), common::random_image(10, 10, &mut rng));
        let r = metrics::derive_regions(&masks, 2).unwrap();
        let f = |l: f64| metrics::lacd(&a, &b, &r, l, Normalization::RawSum).unwrap().lacd;
        let (f0, f1) = (f(0.0), f(1.0));
        let mid = 0.5 * (l1 + l2);
        prop_assert!((f(mid) - 0.5 * (f(l1) + f(l2))).abs() < 1e-8 * (1.0 + f1));
        prop_assert!(f1 >= f0);
    }

    #[test]
    fn guidance_is_affine_in_scale(seed in any::<u64>(), s in -2.0f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Tensor::randn(&[2, 3, 4], &mut rng);
        let c = Tensor::randn(&[2, 3, 4], &mut rng);
        let got = cfg_combine(&u, &c, s).unwrap();
        for ((g, a), b) in got.data().iter().zip(u.data()).zip(c.data()) {
            prop_assert!((g - (a + s * (b - a))).abs() < 1e-12);
        }
        prop_assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u.clone());
        prop_assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c.clone());
        prop_assert_eq!(cfg_combine(&c, &c, s).unwrap(), c);
    }

    #[test]
    fn assembled_slots_come_back_out(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, h, w], &mut rng)).collect();
        let m = Tensor::from_fn(&[1, h, w], |i| (i % 2) as f64);
        let (z, mask) = assemble(&parts[0], &parts[1], &parts[2], &m).unwrap();
        for (k, p) in parts.iter().enumerate() {
            prop_assert_eq!(&extract_slot(&z, k).unwrap(), p);
        }
        prop_assert_eq!(extract_slot(&mask, 0).unwrap(), m);
        prop_assert_eq!(extract_slot(&mask, 1).unwrap().sum(), 0.0);
    }

    #[test]
    fn codec_round_trip_is_idempotent(seed in any::<u64>(), bh in 1usize..4, bw in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = LatentCodec::fixed();
        let x = Tensor::rand_uniform(&[3, 8 * bh, 8 * bw], 0.0, 1.0, &mut rng);
        let once = codec.decode(&codec.encode(&x).unwrap()).unwrap();
        let twice = codec.decode(&codec.encode(&once).unwrap()).unwrap();
        prop_assert!(once.max_abs_diff(&twice) < 1e-10);
        let z = codec.encode(&x).unwrap();
        let z2 = codec.encode(&once).unwrap();
        prop_assert!(z.data.max_abs_diff(&z2.data) < 1e-10);
    }

    #[test]
    fn checkpoints_round_trip_exactly(seed in any::<u64>(), count in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for i in 0..count {
            let shape: Vec<usize> = (0..1 + i % 3).map(|d| 1 + (d + i) % 4).collect();
            store.insert(format!("p.{i}"), Tensor::randn(&shape, &mut rng)).unwrap();
        }
        let bytes = checkpoint::encode(&store);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&back), bytes);
        for p in store.iter() {
            prop_assert_eq!(back.get(&p.id).unwrap().tensor.data(), p.tensor.data());
        }
    }
}
