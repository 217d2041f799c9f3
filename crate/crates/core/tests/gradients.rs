use daug_nn::gradcheck::{check_directional, check_elementwise, pseudo_random};
use daug_nn::{Graph, Shape, Tensor4, NORM_EPS};
use daugnet::daug::Classifier;
use daugnet::losses::{classification_loss_var, d_adv_var, g_adv_var, l1_var, soft_iou_var, weighted_sum, LossWeights};
use daugnet::networks::Generator;
use daugnet::style::StyleCode;

const H: f32 = 1e-3;
// scalar losses averaged over many elements need a wider step to rise above f32 rounding
const H_WIDE: f32 = 1e-2;
const TOL: f64 = 1e-3;

fn rand_tensor(shape: impl Into<Shape>, seed: u64, scale: f32) -> Tensor4 {
    let shape = shape.into();
    let data = pseudo_random(shape.numel(), seed).into_iter().map(|v| v * scale).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

fn probs(shape: impl Into<Shape>, seed: u64) -> Tensor4 {
    rand_tensor(shape, seed, 0.4).map(|v| v + 0.5)
}

fn binary(shape: impl Into<Shape>, seed: u64) -> Tensor4 {
    rand_tensor(shape, seed, 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

#[test]
fn adversarial_losses() {
    let real = probs([4, 1, 1, 1], 1);
    let fake = probs([4, 1, 1, 1], 2);
    let err = check_elementwise(&[real, fake.clone()], |g, v| Ok(d_adv_var(g, v[0], v[1]).unwrap()), H, 3).unwrap();
    assert!(err < TOL, "discriminator loss {err:.3e}");
    let err = check_elementwise(&[fake], |g, v| Ok(g_adv_var(g, v[0])), H, 4).unwrap();
    assert!(err < TOL, "generator loss {err:.3e}");
}

#[test]
fn reconstruction_and_weighted_sum() {
    let a = rand_tensor([2, 3, 6, 6], 5, 1.0);
    // keep |a - b| clear of the absolute-value kink
    let gap = rand_tensor([2, 3, 6, 6], 6, 0.5).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
    let b = a.zip_map(&gap, |x, d| x + d).unwrap();
    let err = check_directional(&[a.clone(), b.clone()], |g, v| Ok(l1_var(g, v[0], v[1]).unwrap()), H, 8, 7).unwrap();
    assert!(err < TOL, "l1 {err:.3e}");
    let c = rand_tensor([1, 3, 6, 6], 18, 1.0);
    let d = rand_tensor([1, 3, 6, 6], 19, 1.0);
    let err = check_directional(
        &[a, b, c, d],
        |g, v| {
            let l1 = l1_var(g, v[0], v[1]).unwrap();
            let edge = g.sobel_l1(v[2], v[3])?;
            Ok(weighted_sum(g, &[(l1, 10.0), (edge, 100.0)]).unwrap().unwrap())
        },
        H,
        8,
        8,
    )
    .unwrap();
    assert!(err < TOL, "weighted sum {err:.3e}");
}

#[test]
fn classification_losses() {
    let z = rand_tensor([2, 3, 4, 4], 9, 3.0);
    let y = binary([2, 3, 4, 4], 10);
    let err = check_directional(&[z.clone()], |g, v| Ok(soft_iou_var(g, v[0], &y).unwrap()), H_WIDE, 8, 11).unwrap();
    assert!(err < TOL, "soft iou {err:.3e}");
    let w = LossWeights::default();
    let err = check_directional(&[z], |g, v| Ok(classification_loss_var(g, v[0], &y, &w).unwrap()), H_WIDE, 8, 12).unwrap();
    assert!(err < TOL, "classification {err:.3e}");
}

// ReLU kinks make finite differences through the whole stack unreliable, so
// the smooth stretches between activations are checked instead.
#[test]
fn generator_smooth_segments() {
    let gen = Generator::init(13);
    let x = rand_tensor([1, 3, 16, 16], 15, 1.0);
    let err = check_elementwise(
        &[x.clone()],
        |g, v| {
            let bound = gen.bind(g, false);
            let y = bound.encoder[0].forward(g, v[0])?;
            let y = g.instance_norm(y, NORM_EPS)?;
            let y = bound.encoder[1].forward(g, y)?;
            g.instance_norm(y, NORM_EPS)
        },
        H_WIDE,
        16,
    )
    .unwrap();
    assert!(err < TOL, "encoder head {err:.3e}");

    let emb = rand_tensor([1, 128, 4, 4], 3, 1.0);
    let err = check_elementwise(
        &[emb.clone()],
        |g, v| {
            let bound = gen.bind(g, false);
            let y = bound.encoder[3].forward(g, v[0])?;
            let y = g.instance_norm(y, NORM_EPS)?;
            bound.encoder[5].forward(g, y)
        },
        H_WIDE,
        16,
    )
    .unwrap();
    assert!(err < TOL, "encoder tail {err:.3e}");

    let code = StyleCode::random(14);
    let err = check_elementwise(&[gen.encode(&x).unwrap()], |g, v| g.adain(v[0], code.gamma(), code.beta(), NORM_EPS), H, 16)
        .unwrap();
    assert!(err < TOL, "adain on an embedding {err:.3e}");
}

#[test]
fn self_reconstruction_reaches_every_generator_layer() {
    let gen = Generator::init(17);
    let code = StyleCode::random(18);
    let x = rand_tensor([1, 3, 16, 16], 19, 1.0);
    let mut g = Graph::new();
    let bound = gen.bind(&mut g, true);
    let xv = g.constant(x);
    let y = bound.stylize(&mut g, xv, &code).unwrap();
    let loss = l1_var(&mut g, xv, y).unwrap();
    let grads = g.backward(loss).unwrap();
    for (id, name) in bound.ids().into_iter().zip(gen.tensor_names()) {
        let grad = grads.get(id).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.abs_max() > 0.0, "{name} gradient is zero");
        assert!(grad.all_finite(), "{name} gradient is not finite");
    }
}

#[test]
fn classification_loss_reaches_first_classifier_layer() {
    let clf = Classifier::init(20);
    let x = rand_tensor([1, 3, 16, 16], 21, 1.0);
    let y = binary([1, 3, 16, 16], 22);
    let mut g = Graph::new();
    let bound = clf.bind(&mut g, true);
    let xv = g.constant(x);
    let logits = bound.forward(&mut g, xv).unwrap();
    let loss = classification_loss_var(&mut g, logits, &y, &LossWeights::default()).unwrap();
    let grads = g.backward(loss).unwrap();
    let ids = bound.ids();
    let first = grads.get(ids[0]).expect("first layer weight has a gradient");
    assert!(first.abs_max() > 0.0);
    let missing = ids.iter().filter(|&&id| grads.get(id).is_none()).count();
    assert_eq!(missing, 0);
}
