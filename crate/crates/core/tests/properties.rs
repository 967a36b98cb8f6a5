use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moirenet::checkpoint;
use moirenet::dirconv::{dac_branch_sum, dac_forward, DacParams};
use moirenet::metrics::{psnr, ssim};
use moirenet::network::{MoireNet, NetworkConfig};
use moirenet::tensor::{concat_channels, conv2d, conv_transpose2d, slice_channels, ConvGeom};
use moirenet::{Shape, Tensor};

fn rand_t(seed: u64, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn rand_f32(seed: u64, shape: Shape) -> Tensor<f32> {
    rand_t(seed, shape, 0.0, 1.0).cast()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grouped_conv_is_independent_slices(seed in any::<u64>(), groups in 1usize..4, cin_g in 1usize..3, cout_g in 1usize..3, h in 3usize..9) {
        let x = rand_t(seed, Shape::new(2, groups * cin_g, h, h + 1), -1.0, 1.0);
        let k = rand_t(seed ^ 1, Shape::new(groups * cout_g, cin_g, 3, 3), -1.0, 1.0);
        let y = conv2d(&x, &k, None, ConvGeom::same(3, groups)).unwrap();
        let parts: Vec<Tensor<f64>> = (0..groups)
            .map(|g| {
                let xs = slice_channels(&x, g * cin_g, cin_g).unwrap();
                let kd = &k.data()[g * cout_g * cin_g * 9..(g + 1) * cout_g * cin_g * 9];
                let ks = Tensor::from_vec(Shape::new(cout_g, cin_g, 3, 3), kd.to_vec()).unwrap();
                conv2d(&xs, &ks, None, ConvGeom::same(3, 1)).unwrap()
            })
            .collect();
        let want = concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap();
        prop_assert!(y.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn transposed_conv_is_the_adjoint(seed in any::<u64>(), stride in 1usize..3, padding in 0usize..2, h in 4usize..9) {
        // without output padding the transpose only covers inputs the stride tiles exactly
        prop_assume!((h + 2 * padding - 3) % stride == 0);
        let geom = ConvGeom::new(stride, padding, 1);
        let x = rand_t(seed, Shape::new(1, 3, h, h), -1.0, 1.0);
        let k = rand_t(seed ^ 2, Shape::new(2, 3, 3, 3), -1.0, 1.0);
        let y = conv2d(&x, &k, None, geom).unwrap();
        let v = rand_t(seed ^ 3, y.shape(), -1.0, 1.0);
        let back = conv_transpose2d(&v, &k, None, geom).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let (lhs, rhs) = (dot(&y, &v), dot(&x, &back));
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn fused_dac_matches_branch_sum(seed in any::<u64>(), cin in 1usize..5, cout in 1usize..5, h in 3usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DacParams {
            weights: std::array::from_fn(|i| rand_t(seed ^ (i as u64 + 10), Shape::new(cout, cin, 3, 3), -1.0, 1.0).cast::<f32>()),
            biases: std::array::from_fn(|i| rand_t(seed ^ (i as u64 + 20), Shape::new(1, cout, 1, 1), -1.0, 1.0).cast::<f32>()),
            alpha: std::array::from_fn(|_| rng.gen_range(-1.0f32..1.0)),
        };
        let x = rand_t(seed ^ 4, Shape::new(1, cin, h, h), -1.0, 1.0).cast::<f32>();
        let err = dac_forward(&x, &p).unwrap().max_abs_diff(&dac_branch_sum(&x, &p).unwrap());
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), h in 11usize..24, w in 11usize..24) {
        let a = rand_f32(seed, Shape::new(1, 3, h, w));
        let b = rand_f32(seed ^ 5, Shape::new(1, 3, h, w));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab < 1.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fresh_network_is_identity_on_any_size(seed in any::<u64>(), h in 8usize..40, w in 8usize..40) {
        let net = MoireNet::build(&NetworkConfig { seed, ..NetworkConfig::with_widths(&[8, 16, 32]) }).unwrap();
        let x = rand_f32(seed ^ 6, Shape::new(1, 3, h, w));
        let y = net.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.bit_eq(&x));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), dac in any::<bool>(), fam in any::<bool>()) {
        let cfg = NetworkConfig { seed, dac_enabled: dac, fam_enabled: fam, ..NetworkConfig::with_widths(&[8, 16]) };
        let net = MoireNet::<f32>::build(&cfg).unwrap();
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&net)).unwrap();
        prop_assert_eq!(back.config(), &cfg);
        for (a, b) in net.params().iter().zip(back.params().iter()) {
            prop_assert!(a.value.bit_eq(&b.value));
        }
    }
}
