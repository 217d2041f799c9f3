//! Parameter containers and composite operators built on [`Graph`].

use crate::error::{NnError, Result};
use crate::graph::{Graph, VarId};
use crate::tensor::{Shape, Tensor4};

/// Weights of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// (out_c, in_c, k, k)
    pub weight: Tensor4,
    /// (1, out_c, 1, 1)
    pub bias: Tensor4,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in))` and zero bias.
    /// `uniform01` must yield samples in `[0, 1)`.
    pub fn init(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        mut uniform01: impl FnMut() -> f32,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f32;
        let bound = 1.0 / fan_in.sqrt();
        let weight = Tensor4::from_fn([out_c, in_c, kernel, kernel], |_, _, _, _| {
            (2.0 * uniform01() - 1.0) * bound
        });
        Self {
            weight,
            bias: Tensor4::zeros([1, out_c, 1, 1]),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn shapes(&self) -> [Shape; 2] {
        [self.weight.shape(), self.bias.shape()]
    }

    pub fn tensors(&self) -> [&Tensor4; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor4; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Records the weights on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundConv {
        BoundConv {
            weight: g.leaf(self.weight.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// A [`Conv2d`] whose weights live on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: VarId,
    pub bias: VarId,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv {
    pub fn forward(&self, g: &mut Graph, x: VarId) -> Result<VarId> {
        g.conv2d(x, self.weight, Some(self.bias), self.stride, self.pad)
    }

    pub fn ids(&self) -> [VarId; 2] {
        [self.weight, self.bias]
    }
}

/// Horizontal and vertical Sobel kernels applied to the unweighted channel
/// mean of a 3-band image, as a (2, 3, 3, 3) convolution weight.
pub fn sobel_gray_kernel() -> Tensor4 {
    const GX: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const GY: [[f32; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    Tensor4::from_fn([2, 3, 3, 3], |o, _, y, x| {
        let k = if o == 0 { GX[y][x] } else { GY[y][x] };
        k / 3.0
    })
}

impl Graph {
    /// Edge distance between two 3-band images: gray conversion, valid 3x3
    /// Sobel filtering, then mean |gx_a - gx_b| + mean |gy_a - gy_b|.
    ///
    /// Both filters are linear, so the responses of `a - b` are filtered once.
    pub fn sobel_l1(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let s = self.value(a).shape();
        if s.c != 3 {
            return Err(NnError::Dimension {
                op: "sobel_l1",
                axis: "channels",
                left: 3,
                right: s.c,
            });
        }
        if s.h < 3 || s.w < 3 {
            return Err(NnError::TooSmall {
                op: "sobel_l1",
                h: s.h,
                w: s.w,
                min: 3,
            });
        }
        let diff = self.sub(a, b)?;
        let k = self.constant(sobel_gray_kernel());
        let resp = self.conv2d(diff, k, None, 1, 0)?;
        let abs = self.abs(resp);
        let mean = self.mean_all(abs);
        // mean over both response channels is half the sum of the two means
        Ok(self.scale(mean, 2.0))
    }
}

/// Tensor-level entry points for single forward evaluations.
pub mod functional {
    use super::*;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<VarId>) -> Result<Tensor4> {
        let mut g = Graph::new();
        let out = f(&mut g)?;
        Ok(g.value(out).clone())
    }

    pub fn conv2d(
        input: &Tensor4,
        weight: &Tensor4,
        bias: Option<&Tensor4>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor4> {
        crate::kernels::conv2d(input, weight, bias, stride, pad)
    }

    pub fn nn_upsample2x(input: &Tensor4) -> Tensor4 {
        crate::kernels::upsample2x(input)
    }

    pub fn instance_norm(x: &Tensor4, eps: f32) -> Result<Tensor4> {
        eval(|g| {
            let v = g.constant(x.clone());
            g.instance_norm(v, eps)
        })
    }

    pub fn layer_norm(x: &Tensor4, eps: f32) -> Result<Tensor4> {
        eval(|g| {
            let v = g.constant(x.clone());
            g.layer_norm(v, eps)
        })
    }

    pub fn adain(x: &Tensor4, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor4> {
        eval(|g| {
            let v = g.constant(x.clone());
            g.adain(v, gamma, beta, eps)
        })
    }

    pub fn leaky_relu(x: &Tensor4, slope: f32) -> Tensor4 {
        x.map(|v| if v >= 0.0 { v } else { slope * v })
    }

    pub fn sobel_l1(a: &Tensor4, b: &Tensor4) -> Result<f32> {
        a.expect_same_shape(b, "sobel_l1")?;
        let t = eval(|g| {
            let va = g.constant(a.clone());
            let vb = g.constant(b.clone());
            g.sobel_l1(va, vb)
        })?;
        t.item()
    }
}

#[cfg(test)]
mod tests {
    use super::functional::*;
    use super::*;

    #[test]
    fn init_is_bounded_and_deterministic() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f32 / (1u64 << 24) as f32
        };
        let c = Conv2d::init(3, 8, 3, 1, 1, &mut next);
        let bound = 1.0 / 27f32.sqrt();
        assert!(c.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(c.bias.data().iter().all(|&b| b == 0.0));
        assert_eq!(c.param_count(), 8 * 27 + 8);
    }

    #[test]
    fn instance_norm_edge_cases() {
        let y = instance_norm(&Tensor4::full([1, 2, 3, 3], 4.0), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![-1.0, 1.0]).unwrap();
        let y = instance_norm(&x, 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_matches_instance_norm_for_one_channel() {
        let x = Tensor4::from_fn([2, 1, 3, 4], |n, _, y, x| (n * 13 + y * 5 + x * 3) as f32 % 7.0);
        assert_eq!(layer_norm(&x, 1e-5).unwrap(), instance_norm(&x, 1e-5).unwrap());
        let y = layer_norm(&Tensor4::full([1, 3, 2, 2], -2.5), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adain_identity_style_and_constant_channel() {
        let x = Tensor4::from_fn([1, 128, 2, 3], |_, c, y, x| ((c * 7 + y * 3 + x) % 5) as f32);
        let ones = vec![1.0; 128];
        let zeros = vec![0.0; 128];
        assert_eq!(adain(&x, &ones, &zeros, 1e-5).unwrap(), instance_norm(&x, 1e-5).unwrap());

        let beta: Vec<f32> = (0..128).map(|i| i as f32 / 128.0).collect();
        let gamma: Vec<f32> = (0..128).map(|i| 1.0 - i as f32 / 256.0).collect();
        let y = adain(&Tensor4::full([1, 128, 2, 2], 3.0), &gamma, &beta, 1e-5).unwrap();
        for c in 0..128 {
            for i in 0..4 {
                assert_eq!(y.data()[c * 4 + i], beta[c]);
            }
        }
        assert!(matches!(
            adain(&Tensor4::zeros([1, 64, 2, 2]), &gamma, &beta, 1e-5),
            Err(NnError::Dimension { op: "adain", .. })
        ));
    }

    #[test]
    fn leaky_relu_examples() {
        let y = leaky_relu(&Tensor4::from_vec([1, 1, 1, 2], vec![1.0, -1.0]).unwrap(), 0.2);
        assert_eq!(y.data(), &[1.0, -0.2]);
    }

    #[test]
    fn sobel_identical_and_constant_images() {
        let a = Tensor4::from_fn([1, 3, 5, 5], |_, c, y, x| (c + y * x) as f32 * 0.1);
        assert_eq!(sobel_l1(&a, &a).unwrap(), 0.0);
        let c1 = Tensor4::full([1, 3, 5, 5], 0.3);
        let c2 = Tensor4::full([1, 3, 5, 5], -0.7);
        assert!(sobel_l1(&c1, &c2).unwrap().abs() < 1e-6);
        assert!(matches!(
            sobel_l1(&Tensor4::zeros([1, 3, 2, 5]), &Tensor4::zeros([1, 3, 2, 5])),
            Err(NnError::TooSmall { .. })
        ));
    }

    #[test]
    fn sobel_step_edge_matches_hand_convolution() {
        // gray image: left two columns 0, right three columns 1 (all bands equal)
        let a = Tensor4::from_fn([1, 3, 4, 5], |_, _, _, x| if x >= 2 { 1.0 } else { 0.0 });
        let flat = Tensor4::zeros([1, 3, 4, 5]);
        // valid output is 2x3. gx at columns centred on x=1,2,3: (1+2+1)*1 = 4
        // where the window straddles the edge (centres 1 and 2), 0 at centre 3.
        // gy = 0 everywhere. mean |gx| = (4+4+0)*2 / 6, mean |gy| = 0.
        let expect = 16.0 / 6.0;
        assert!((sobel_l1(&a, &flat).unwrap() - expect).abs() < 1e-6);
    }
}
