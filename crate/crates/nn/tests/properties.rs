use daug_nn::functional::{adain, instance_norm, nn_upsample2x};
use daug_nn::{Adam, AdamConfig, Tensor4, NORM_EPS};
use proptest::prelude::*;

fn channel_moments(t: &Tensor4, n: usize, c: usize) -> (f64, f64) {
    let s = t.shape();
    let plane = &t.data()[(n * s.c + c) * s.plane()..(n * s.c + c + 1) * s.plane()];
    let m = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
    let var = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / plane.len() as f64;
    (m, var.sqrt())
}

fn tensor_strategy(c: usize, len: usize) -> impl Strategy<Value = Tensor4> {
    (prop::collection::vec(-5.0f32..5.0, c * len), 0.5f32..4.0, -3.0f32..3.0).prop_map(
        move |(data, scale, shift)| {
            let side = (len as f64).sqrt() as usize;
            Tensor4::from_vec([1, c, side, side], data.into_iter().map(|v| v * scale + shift).collect()).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn instance_norm_moments(x in tensor_strategy(4, 64)) {
        let y = instance_norm(&x, NORM_EPS).unwrap();
        for c in 0..4 {
            let (_, sx) = channel_moments(&x, 0, c);
            prop_assume!(sx * sx > 100.0 * NORM_EPS as f64);
            let (m, s) = channel_moments(&y, 0, c);
            prop_assert!(m.abs() < 1e-5, "mean {m}");
            prop_assert!((0.999..=1.001).contains(&s), "std {s}");
        }
    }

    #[test]
    fn adain_moments(x in tensor_strategy(128, 36), seed in 0u64..1000) {
        let gamma: Vec<f32> = daug_nn::gradcheck::pseudo_random(128, seed).iter().map(|v| 0.5 * (v + 1.0)).collect();
        let beta: Vec<f32> = daug_nn::gradcheck::pseudo_random(128, seed + 1).iter().map(|v| 0.5 * (v + 1.0)).collect();
        let y = adain(&x, &gamma, &beta, NORM_EPS).unwrap();
        for c in 0..128 {
            let (m, s) = channel_moments(&y, 0, c);
            prop_assert!((m - beta[c] as f64).abs() < 1e-4);
            prop_assert!((s - gamma[c] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn upsample_is_pure_replication(x in tensor_strategy(2, 16)) {
        let y = nn_upsample2x(&x);
        prop_assert_eq!(y.shape().h, 2 * x.shape().h);
        for c in 0..2 { for i in 0..8 { for j in 0..8 {
            prop_assert_eq!(y.at(0, c, i, j), x.at(0, c, i / 2, j / 2));
        }}}
        prop_assert_eq!(nn_upsample2x(&x), y);
    }
}

/// Independent scalar Adam on f(w) = (w - 3)^2 in f64.
fn scalar_adam_oracle(w0: f64, steps: usize) -> Vec<f64> {
    let (lr, b1, b2, eps) = (0.1f64, 0.5f64, 0.999f64, 1e-8f64);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * (w - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        w -= lr * mh / (vh.sqrt() + eps);
        out.push(w);
    }
    out
}

#[test]
fn adam_matches_scalar_oracle_over_ten_steps() {
    let expect = scalar_adam_oracle(0.5, 10);
    let mut p = Tensor4::scalar(0.5);
    let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, [p.shape()]);
    for e in expect {
        let g = Tensor4::scalar(2.0 * (p.data()[0] - 3.0));
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] as f64 - e).abs() < 1e-6, "{} vs {e}", p.data()[0]);
    }
}
