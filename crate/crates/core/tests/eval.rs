use daug_nn::Tensor4;
use daugnet::data::{byte_to_unit, unit_to_byte};
use daugnet::eval::*;
use proptest::prelude::*;

fn mask_strategy(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop::bool::weighted(0.3).prop_map(|b| b as u8 as f32), len)
}

fn image_strategy(side: usize) -> impl Strategy<Value = Tensor4> {
    prop::collection::vec(any::<u8>(), 3 * side * side).prop_map(move |bytes| {
        Tensor4::from_vec([1, 3, side, side], bytes.into_iter().map(byte_to_unit).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn iou_matches_pixel_counting(p in mask_strategy(256), g in mask_strategy(256)) {
        let pred = Tensor4::from_vec([1, 1, 16, 16], p.clone()).unwrap();
        let gt = Tensor4::from_vec([1, 1, 16, 16], g.clone()).unwrap();
        let mut inter = 0u64;
        let mut union = 0u64;
        for k in 0..256 {
            if p[k] == 1.0 && g[k] == 1.0 { inter += 1; }
            if p[k] == 1.0 || g[k] == 1.0 { union += 1; }
        }
        let expected = (union > 0).then(|| inter as f64 / union as f64);
        prop_assert_eq!(iou(&pred, &gt).unwrap(), expected);
        prop_assert_eq!(iou(&gt, &pred).unwrap(), expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn report_averages_defined_classes(p in mask_strategy(3 * 64), g in mask_strategy(3 * 64)) {
        let pred = Tensor4::from_vec([1, 3, 8, 8], p).unwrap();
        let gt = Tensor4::from_vec([1, 3, 8, 8], g).unwrap();
        let r = IoUReport::from_masks("d", &pred, &gt).unwrap();
        prop_assert_eq!(r.classes.len(), 3);
        let values: Vec<Option<f64>> = r.classes.iter().map(|c| c.iou).collect();
        prop_assert_eq!(r.overall, mean_iou(&values).ok());
        for c in &r.classes {
            prop_assert!(c.intersection <= c.union);
        }
    }

    #[test]
    fn hist_match_is_monotone_per_channel(src in image_strategy(8), reference in image_strategy(8)) {
        let out = hist_match(&src, &reference).unwrap();
        for c in 0..3 {
            let mut pairs: Vec<(u8, u8)> = (0..64)
                .map(|k| (unit_to_byte(src.at(0, c, k / 8, k % 8)), unit_to_byte(out.at(0, c, k / 8, k % 8))))
                .collect();
            pairs.sort();
            prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn hist_match_to_itself_is_identity(src in image_strategy(8)) {
        prop_assert_eq!(hist_match(&src, &src).unwrap(), src);
    }

    #[test]
    fn equalization_is_monotone_and_spans_the_range(src in image_strategy(8)) {
        let out = hist_equalize(&src).unwrap();
        for c in 0..3 {
            let mut pairs: Vec<(u8, u8)> = (0..64)
                .map(|k| (unit_to_byte(src.at(0, c, k / 8, k % 8)), unit_to_byte(out.at(0, c, k / 8, k % 8))))
                .collect();
            pairs.sort();
            prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
            if pairs[0].0 != pairs[63].0 {
                prop_assert_eq!(pairs[63].1, 255);
                prop_assert_eq!(pairs[0].1, 0);
            }
        }
    }

    #[test]
    fn zscore_moments(src in image_strategy(8)) {
        if let Ok(z) = zscore(&src) {
            for c in 0..3 {
                let vals: Vec<f64> = (0..64).map(|k| z.at(0, c, k / 8, k % 8) as f64).collect();
                let m = vals.iter().sum::<f64>() / 64.0;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 64.0;
                prop_assert!(m.abs() < 1e-5);
                prop_assert!((v - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn gray_world_equalizes_unclamped_means(src in image_strategy(8)) {
        // scale down so no channel saturates after correction
        let dim = src.map(|v| (v + 1.0) / 4.0 - 1.0);
        let out = gray_world(&dim).unwrap();
        let means: Vec<f64> = (0..3)
            .map(|c| (0..64).map(|k| (out.at(0, c, k / 8, k % 8) as f64 + 1.0) / 2.0).sum::<f64>() / 64.0)
            .collect();
        prop_assume!(means.iter().all(|&m| m > 1e-3));
        let unclamped = (0..3).all(|c| (0..64).all(|k| out.at(0, c, k / 8, k % 8) < 1.0));
        prop_assume!(unclamped);
        prop_assert!((means[0] - means[1]).abs() < 1e-5 && (means[1] - means[2]).abs() < 1e-5);
    }
}

#[test]
fn standardizer_names_parse() {
    for (name, want) in [
        ("gray-world", Standardizer::GrayWorld),
        ("hist-equalize", Standardizer::HistEqualize),
        ("zscore", Standardizer::Zscore),
        ("hist-match", Standardizer::HistMatch),
    ] {
        assert_eq!(name.parse::<Standardizer>().unwrap(), want);
    }
    assert!("retinex".parse::<Standardizer>().is_err());
}
