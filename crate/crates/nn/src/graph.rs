//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] walks the nodes once from the loss
//! back to the leaves and accumulates gradients additively at fan-out.

use crate::error::{NnError, Result};
use crate::kernels;
use crate::tensor::{Shape, Tensor4};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(VarId),
    /// Output is the normalized value itself.
    Normalize {
        x: VarId,
        group_len: usize,
        inv_std: Vec<f32>,
    },
    AdaIn {
        x: VarId,
        gamma: Vec<f32>,
        xhat: Tensor4,
        inv_std: Vec<f32>,
    },
    Relu(VarId),
    LeakyRelu(VarId, f32),
    Tanh(VarId),
    Sigmoid(VarId),
    MaxPool2 {
        x: VarId,
        argmax: Vec<usize>,
    },
    ConcatChannels(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Scale(VarId, f32),
    AddScalar(VarId),
    Abs(VarId),
    Ln(VarId),
    Clamp(VarId, f32, f32),
    MeanAll(VarId),
    MeanPerSample(VarId),
    SumPerChannel(VarId),
    BceWithLogits {
        logits: VarId,
        targets: Tensor4,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

/// Gradients of leaf values produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    grads: Vec<Option<Tensor4>>,
}

impl Grads {
    pub fn get(&self, v: VarId) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: VarId, shape: Shape) -> Tensor4 {
        self.get(v).cloned().unwrap_or_else(|| Tensor4::zeros(shape))
    }

    pub fn take(&mut self, v: VarId) -> Option<Tensor4> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NnError::ShapeMismatch {
            op,
            expected: a.shape(),
            got: b.shape(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are only produced for leaves with
    /// `requires_grad` and for values derived from them.
    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor4) -> VarId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor4) -> VarId {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: VarId) -> VarId {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: VarId, op: Op, f: impl Fn(f32) -> f32) -> VarId {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<VarId> {
        same_shape(name, self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let value = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn upsample2x(&mut self, x: VarId) -> VarId {
        let value = kernels::upsample2x(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Upsample2x(x), rg)
    }

    /// Per-(sample, channel) normalization over H*W.
    pub fn instance_norm(&mut self, x: VarId, eps: f32) -> Result<VarId> {
        let group_len = self.value(x).shape().plane();
        self.normalize("instance_norm", x, group_len, eps)
    }

    /// Per-sample normalization over C*H*W.
    pub fn layer_norm(&mut self, x: VarId, eps: f32) -> Result<VarId> {
        let group_len = self.value(x).shape().sample();
        self.normalize("layer_norm", x, group_len, eps)
    }

    fn normalize(&mut self, op: &'static str, x: VarId, group_len: usize, eps: f32) -> Result<VarId> {
        if group_len == 0 {
            return Err(NnError::Empty(op));
        }
        let (value, inv_std) = kernels::normalize_groups(self.value(x), group_len, eps);
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Normalize {
                x,
                group_len,
                inv_std,
            },
            rg,
        ))
    }

    /// Instance-normalizes `x` then scales channel `c` by `gamma[c]` and
    /// shifts it by `beta[c]`. The style vectors are constants.
    pub fn adain(&mut self, x: VarId, gamma: &[f32], beta: &[f32], eps: f32) -> Result<VarId> {
        let shape = self.value(x).shape();
        for (axis, len) in [("gamma length", gamma.len()), ("beta length", beta.len())] {
            if len != shape.c {
                return Err(NnError::Dimension {
                    op: "adain",
                    axis,
                    left: shape.c,
                    right: len,
                });
            }
        }
        if shape.plane() == 0 {
            return Err(NnError::Empty("adain"));
        }
        let (xhat, inv_std) = kernels::normalize_groups(self.value(x), shape.plane(), eps);
        let mut value = xhat.clone();
        for (i, plane) in value.data_mut().chunks_exact_mut(shape.plane()).enumerate() {
            let c = i % shape.c;
            for v in plane {
                *v = gamma[c] * *v + beta[c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::AdaIn {
                x,
                gamma: gamma.to_vec(),
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f32) -> VarId {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v >= 0.0 { v } else { slope * v })
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        self.unary(x, Op::Tanh(x), f32::tanh)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn max_pool2(&mut self, x: VarId) -> Result<VarId> {
        let (value, argmax) = kernels::max_pool2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(NnError::ShapeMismatch {
                op: "concat_channels",
                expected: Shape::new(sa.n, sb.c, sa.h, sa.w),
                got: sb,
            });
        }
        let mut data = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.n {
            data.extend_from_slice(self.value(a).sample_data(n));
            data.extend_from_slice(self.value(b).sample_data(n));
        }
        let value = Tensor4::from_vec([sa.n, sa.c + sb.c, sa.h, sa.w], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: VarId, k: f32) -> VarId {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: VarId, k: f32) -> VarId {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        self.unary(x, Op::Abs(x), f32::abs)
    }

    pub fn ln(&mut self, x: VarId) -> VarId {
        self.unary(x, Op::Ln(x), f32::ln)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: VarId, lo: f32, hi: f32) -> VarId {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Mean of all elements as a (1,1,1,1) tensor.
    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let m = self.value(x).mean() as f32;
        let rg = self.rg(&[x]);
        self.push(Tensor4::scalar(m), Op::MeanAll(x), rg)
    }

    /// Mean of each sample as an (N,1,1,1) tensor.
    pub fn mean_per_sample(&mut self, x: VarId) -> VarId {
        let t = self.value(x);
        let s = t.shape();
        let data = (0..s.n)
            .map(|n| {
                let d = t.sample_data(n);
                (d.iter().map(|&v| v as f64).sum::<f64>() / d.len().max(1) as f64) as f32
            })
            .collect();
        let value = Tensor4::from_vec([s.n, 1, 1, 1], data).expect("sized by construction");
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanPerSample(x), rg)
    }

    /// Sum over batch and space for each channel, as a (1,C,1,1) tensor.
    pub fn sum_per_channel(&mut self, x: VarId) -> VarId {
        let t = self.value(x);
        let s = t.shape();
        let mut acc = vec![0.0f64; s.c];
        for (i, plane) in t.data().chunks_exact(s.plane().max(1)).enumerate() {
            acc[i % s.c] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        let value = Tensor4::from_vec([1, s.c, 1, 1], acc.into_iter().map(|v| v as f32).collect())
            .expect("sized by construction");
        let rg = self.rg(&[x]);
        self.push(value, Op::SumPerChannel(x), rg)
    }

    /// Mean sigmoid cross-entropy between `logits` and constant `targets`,
    /// in the overflow-free form `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: VarId, targets: &Tensor4) -> Result<VarId> {
        same_shape("bce_with_logits", self.value(logits), targets)?;
        let z = self.value(logits);
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| bce_term(z as f64, y as f64))
            .sum();
        let value = Tensor4::scalar((total / z.numel().max(1) as f64) as f32);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: VarId) -> Result<Grads> {
        self.value(loss).item()?;
        let mut grads: Vec<Option<Tensor4>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor4::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor4, grads: &mut [Option<Tensor4>]) -> Result<()> {
        let val = |v: VarId| &self.nodes[v.0].value;
        let mut acc = |v: VarId, t: Tensor4| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let wants = |v: VarId| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let want = [wants(*x), wants(*w), b.is_some_and(wants)];
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, want)?;
                if let Some(dx) = dx {
                    acc(*x, dx)?;
                }
                if let Some(dw) = dw {
                    acc(*w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, db) {
                    let shape = val(*b).shape();
                    acc(*b, db.reshape(shape)?)?;
                }
            }
            Op::Upsample2x(x) => acc(*x, kernels::upsample2x_backward(g))?,
            Op::Normalize {
                x,
                group_len,
                inv_std,
            } => {
                let dx = kernels::normalize_groups_backward(&node.value, g, inv_std, *group_len);
                acc(*x, dx)?;
            }
            Op::AdaIn {
                x,
                gamma,
                xhat,
                inv_std,
            } => {
                let s = g.shape();
                let mut gx = g.clone();
                for (i, plane) in gx.data_mut().chunks_exact_mut(s.plane()).enumerate() {
                    let k = gamma[i % s.c];
                    for v in plane {
                        *v *= k;
                    }
                }
                let dx = kernels::normalize_groups_backward(xhat, &gx, inv_std, s.plane());
                acc(*x, dx)?;
            }
            Op::Relu(x) => acc(*x, g.zip_map(val(*x), |g, x| if x > 0.0 { g } else { 0.0 })?)?,
            Op::LeakyRelu(x, slope) => {
                let k = *slope;
                acc(*x, g.zip_map(val(*x), |g, x| if x >= 0.0 { g } else { k * g })?)?
            }
            Op::Tanh(x) => acc(*x, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?)?,
            Op::Sigmoid(x) => acc(*x, g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?)?,
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor4::zeros(val(*x).shape());
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[i] += gv;
                }
                acc(*x, dx)?;
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for n in 0..sa.n {
                    let d = g.sample_data(n);
                    da.extend_from_slice(&d[..sa.sample()]);
                    db.extend_from_slice(&d[sa.sample()..]);
                }
                acc(*a, Tensor4::from_vec(sa, da)?)?;
                acc(*b, Tensor4::from_vec(sb, db)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |g, y| g * y)?)?;
                acc(*b, g.zip_map(val(*a), |g, x| g * x)?)?;
            }
            Op::Div(a, b) => {
                acc(*a, g.zip_map(val(*b), |g, y| g / y)?)?;
                let gb = g
                    .zip_map(&node.value, |g, q| g * q)?
                    .zip_map(val(*b), |gq, y| -gq / y)?;
                acc(*b, gb)?;
            }
            Op::Scale(x, k) => acc(*x, g.scale(*k))?,
            Op::AddScalar(x) => acc(*x, g.clone())?,
            Op::Abs(x) => acc(*x, g.zip_map(val(*x), |g, x| g * sign(x))?)?,
            Op::Ln(x) => acc(*x, g.zip_map(val(*x), |g, x| g / x)?)?,
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *x,
                    g.zip_map(val(*x), |g, x| if x >= lo && x <= hi { g } else { 0.0 })?,
                )?
            }
            Op::MeanAll(x) => {
                let s = val(*x).shape();
                acc(*x, Tensor4::full(s, g.data()[0] / s.numel() as f32))?
            }
            Op::MeanPerSample(x) => {
                let s = val(*x).shape();
                let per = s.sample() as f32;
                acc(*x, Tensor4::from_fn(s, |n, _, _, _| g.data()[n] / per))?
            }
            Op::SumPerChannel(x) => {
                let s = val(*x).shape();
                acc(*x, Tensor4::from_fn(s, |_, c, _, _| g.data()[c]))?
            }
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let k = g.data()[0] / z.numel() as f32;
                acc(*logits, z.zip_map(targets, |z, y| k * (sigmoid(z) - y))?)?
            }
        }
        Ok(())
    }
}

#[inline]
fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Logistic function evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_doubles_gradient_exactly() {
        let mut g = Graph::new();
        let x = g.param(Tensor4::from_vec([1, 1, 1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let a = g.tanh(x);
        let b = g.tanh(x);
        let s = g.add(a, b).unwrap();
        let loss = g.mean_all(s);
        let two = g.backward(loss).unwrap().get(x).unwrap().clone();

        let mut g1 = Graph::new();
        let x1 = g1.param(g.value(x).clone());
        let a1 = g1.tanh(x1);
        let l1 = g1.mean_all(a1);
        let one = g1.backward(l1).unwrap().get(x1).unwrap().clone();
        for (t, o) in two.data().iter().zip(one.data()) {
            assert_eq!(*t, 2.0 * o);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor4::ones([1, 1, 2, 2]));
        let p = g.param(Tensor4::ones([1, 1, 2, 2]));
        let m = g.mul(c, p).unwrap();
        let l = g.mean_all(m);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor4::from_vec([1, 1, 1, 2], vec![1.0, -1.0]).unwrap());
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[1.0, -0.2]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor4::ones([1, 1, 2, 2]));
        assert!(matches!(g.backward(x), Err(NnError::NotScalar { .. })));
    }

    #[test]
    fn saturated_bce_is_tiny() {
        let mut g = Graph::new();
        let z = g.param(Tensor4::from_vec([1, 2, 1, 1], vec![20.0, -20.0]).unwrap());
        let y = Tensor4::from_vec([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let l = g.bce_with_logits(z, &y).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-6);
    }
}
