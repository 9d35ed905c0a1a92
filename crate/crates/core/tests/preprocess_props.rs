use proptest::prelude::*;

use ovafuse_core::preprocess::{denormalize, normalize, to_unit_array, PreprocessConfig, UnitArray};

const SIDE: u32 = 16;

fn small<T: num_traits::Float + num_traits::FromPrimitive>() -> PreprocessConfig<T> {
    PreprocessConfig {
        target_size: (SIDE, SIDE),
        ..PreprocessConfig::default()
    }
}

fn plane() -> usize {
    (SIDE * SIDE) as usize
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    #[test]
    fn normalized_values_stay_within_channel_bounds(pixels in prop::collection::vec(any::<[u8; 3]>(), (SIDE * SIDE) as usize)) {
        let img = image::RgbImage::from_fn(SIDE, SIDE, |x, y| image::Rgb(pixels[(y * SIDE + x) as usize]));
        let cfg = small::<f32>();
        let unit = to_unit_array::<f32>(&img);
        prop_assert!(unit.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let out = normalize(&unit, &cfg, "p").unwrap();
        prop_assert_eq!(out.shape, [3, SIDE as usize, SIDE as usize]);
        for (c, (lo, hi)) in cfg.channel_bounds().iter().enumerate() {
            prop_assert!(out.channel(c).iter().all(|v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn denormalize_inverts_normalize(values in prop::collection::vec(0.0f64..=1.0, 3 * (SIDE * SIDE) as usize)) {
        let unit64 = UnitArray { data: values.clone(), shape: [3, SIDE as usize, SIDE as usize] };
        let back64 = denormalize(&normalize(&unit64, &small::<f64>(), "p").unwrap(), &small::<f64>());
        let unit32 = UnitArray { data: values.iter().map(|&v| v as f32).collect(), shape: unit64.shape };
        let back32 = denormalize(&normalize(&unit32, &small::<f32>(), "p").unwrap(), &small::<f32>());
        for i in 0..values.len() {
            prop_assert!((back64.data[i] - unit64.data[i]).abs() <= 1e-12);
            prop_assert!((back32.data[i] - unit32.data[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn mean_valued_plane_centres_to_zero(channel in 0usize..3, other in 0.0f32..=1.0) {
        let cfg = small::<f32>();
        let mut data = vec![other; 3 * plane()];
        data[channel * plane()..(channel + 1) * plane()].fill(cfg.channel_mean[channel]);
        let out = normalize(&UnitArray { data, shape: [3, SIDE as usize, SIDE as usize] }, &cfg, "p").unwrap();
        prop_assert!(out.channel(channel).iter().all(|&v| v == 0.0));
    }
}
