use crate::error::{NnError, Result};
use crate::tensor::{Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
///
/// Each tensor keeps its own update count so that tensors skipped by
/// [`Adam::step_sparse`] get correct bias correction when they first move.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    counts: Vec<u64>,
    m: Vec<Tensor4>,
    v: Vec<Tensor4>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = Shape>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|s| (Tensor4::zeros(s), Tensor4::zeros(s)))
            .unzip();
        Self {
            config,
            step: 0,
            counts: vec![0; m.len()],
            m,
            v,
        }
    }

    /// Rebuilds an optimizer from persisted moments.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        counts: Vec<u64>,
        m: Vec<Tensor4>,
        v: Vec<Tensor4>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.len() != counts.len() {
            return Err(NnError::ParamCount {
                params: m.len(),
                grads: v.len().min(counts.len()),
            });
        }
        for (a, b) in m.iter().zip(&v) {
            a.expect_same_shape(b, "adam state")?;
        }
        Ok(Self {
            config,
            step,
            counts,
            m,
            v,
        })
    }

    /// Appends fresh zero moments for newly added parameters.
    pub fn extend(&mut self, shapes: impl IntoIterator<Item = Shape>) {
        for s in shapes {
            self.counts.push(0);
            self.m.push(Tensor4::zeros(s));
            self.v.push(Tensor4::zeros(s));
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Per-tensor update counts.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn moments(&self) -> (&[Tensor4], &[Tensor4]) {
        (&self.m, &self.v)
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// Applies one update. A non-finite gradient rejects the whole step and
    /// leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor4], grads: &[&Tensor4]) -> Result<()> {
        let grads: Vec<Option<&Tensor4>> = grads.iter().map(|&g| Some(g)).collect();
        self.step_sparse(params, &grads)
    }

    /// Like [`Adam::step`], but tensors with a `None` gradient are skipped
    /// entirely: neither the parameter nor its moments change.
    pub fn step_sparse(&mut self, params: &mut [&mut Tensor4], grads: &[Option<&Tensor4>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NnError::ParamCount {
                params: params.len().max(self.m.len()),
                grads: grads.len(),
            });
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            p.expect_same_shape(m, "adam")?;
            if let Some(g) = g {
                p.expect_same_shape(g, "adam")?;
                if !g.all_finite() {
                    return Err(NnError::NonFiniteGradient { index: i });
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.counts[i] += 1;
            let t = self.counts[i] as i32;
            let bc1 = 1.0 - (beta1 as f64).powi(t);
            let bc2 = 1.0 - (beta2 as f64).powi(t);
            let step_size = (lr as f64 / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(self.m[i].data_mut().iter_mut().zip(self.v[i].data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in iter {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor4 {
        Tensor4::scalar(v)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor4::from_vec([1, 1, 1, 3], vec![0.5, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), [p.shape()]);
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[&Tensor4::zeros(before.shape())]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [3.0f32, -0.01, 250.0] {
            let mut p = scalar(0.0);
            let mut opt = Adam::new(AdamConfig::default(), [p.shape()]);
            opt.step(&mut [&mut p], &[&scalar(g)]).unwrap();
            let delta = p.data()[0];
            // bias-corrected: m_hat = g, v_hat = g^2 -> lr * g / (|g| + eps)
            let expect = -1e-4 * g as f64 / (g.abs() as f64 + 1e-8);
            assert!((delta as f64 - expect).abs() < 1e-10, "{delta} vs {expect}");
        }
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = scalar(1.0);
        let mut opt = Adam::new(AdamConfig::default(), [p.shape()]);
        let err = opt.step(&mut [&mut p], &[&scalar(f32::NAN)]).unwrap_err();
        assert_eq!(err, NnError::NonFiniteGradient { index: 0 });
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn sparse_step_skips_absent_gradients() {
        let mut a = scalar(1.0);
        let mut b = scalar(2.0);
        let mut opt = Adam::new(AdamConfig::default(), [a.shape(), b.shape()]);
        opt.step(&mut [&mut a, &mut b], &[&scalar(1.0), &scalar(1.0)]).unwrap();
        let b_before = b.clone();
        opt.step_sparse(&mut [&mut a, &mut b], &[Some(&scalar(1.0)), None]).unwrap();
        assert_eq!(b, b_before);
        assert_eq!(opt.counts(), &[2, 1]);
    }
}
