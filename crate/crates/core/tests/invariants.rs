use laconv::laconv::{dynamic_depthwise_conv, pixel_pack, pixel_unpack};
use laconv::train::lr_schedule;
use laconv::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let n = shape.iter().product::<usize>();
    let data = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_then_unpack_is_identity(s in 1usize..=4, hc in 1usize..=3, wc in 1usize..=3, d in 1usize..=5, seed: u64) {
        let (h, w) = (s * hc, s * wc);
        let x = tensor(vec![h, w, d], seed);
        let packed = pixel_pack(&x, s).unwrap();
        prop_assert_eq!(packed.shape(), &[hc * wc, s * s * d][..]);
        let back = pixel_unpack(&packed, s, h, w).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn dyconv_is_linear_in_the_input(k in prop::sample::select(vec![1usize, 3, 5]), h in 1usize..=5, w in 1usize..=5,
                                    gi in 0usize..3, seed: u64, alpha in -2.0f64..2.0) {
        let d = 4;
        let g = [1, 2, 4][gi];
        let a = tensor(vec![h, w, d], seed);
        let b = tensor(vec![h, w, d], seed.wrapping_add(17));
        let ker = tensor(vec![h, w, k, k, g], seed.wrapping_add(31));
        let mix = Tensor::new([h, w, d], a.data().iter().zip(b.data()).map(|(x, y)| x + alpha * y).collect()).unwrap();
        let ya = dynamic_depthwise_conv(&a, &ker).unwrap();
        let yb = dynamic_depthwise_conv(&b, &ker).unwrap();
        let ym = dynamic_depthwise_conv(&mix, &ker).unwrap();
        for ((m, p), q) in ym.data().iter().zip(ya.data()).zip(yb.data()) {
            prop_assert!((m - (p + alpha * q)).abs() < 1e-9);
        }
    }

    #[test]
    fn centre_tap_kernel_scales_each_group(h in 1usize..=4, w in 1usize..=4, seed: u64) {
        let (d, g, k) = (6, 3, 3);
        let x = tensor(vec![h, w, d], seed);
        let mut ker = vec![0.0; h * w * k * k * g];
        for p in 0..h * w {
            for l in 0..g {
                ker[(p * k * k + 4) * g + l] = (l + 1) as f64;
            }
        }
        let y = dynamic_depthwise_conv(&x, &Tensor::new([h, w, k, k, g], ker).unwrap()).unwrap();
        for (i, (o, v)) in y.data().iter().zip(x.data()).enumerate() {
            let group = (i % d) / (d / g);
            prop_assert_eq!(*o, v * (group + 1) as f64);
        }
    }

    #[test]
    fn schedule_stays_in_range(total in 1usize..5000, warm_frac in 0.0f64..1.0, step_frac in 0.0f64..=1.0) {
        let warmup = (total as f64 * warm_frac) as usize;
        let step = (total as f64 * step_frac) as usize;
        let lr = lr_schedule(step, total, warmup, 1e-4);
        prop_assert!((0.0..=1e-4).contains(&lr), "lr {}", lr);
        if step > warmup {
            prop_assert!(lr_schedule(step - 1, total, warmup, 1e-4) >= lr);
        }
    }
}
