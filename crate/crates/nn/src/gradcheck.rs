//! Central finite-difference oracles for gradient tests.
//!
//! The scalar being differentiated is `sum_i r_i * y_i` for a fixed random
//! projection `r`, accumulated in `f64` outside the graph so untouched
//! outputs cancel exactly between the two perturbed evaluations.

use crate::error::Result;
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor4;

/// Deterministic values in `[-1, 1)` from a splitmix64 stream.
pub fn pseudo_random(len: usize, seed: u64) -> Vec<f32> {
    let mut state = seed;
    (0..len)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            ((z >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect()
}

struct Harness<'a, F> {
    inputs: &'a [Tensor4],
    build: F,
    proj: Vec<f32>,
}

impl<'a, F> Harness<'a, F>
where
    F: Fn(&mut Graph, &[VarId]) -> Result<VarId>,
{
    fn new(inputs: &'a [Tensor4], build: F, seed: u64) -> Result<Self> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let proj = pseudo_random(g.value(out).numel(), seed);
        Ok(Self {
            inputs,
            build,
            proj,
        })
    }

    fn value(&self, inputs: &[Tensor4]) -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (self.build)(&mut g, &ids)?;
        Ok(g
            .value(out)
            .data()
            .iter()
            .zip(&self.proj)
            .map(|(&y, &r)| y as f64 * r as f64)
            .sum())
    }

    fn analytic(&self) -> Result<Vec<Tensor4>> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = self.inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.build)(&mut g, &ids)?;
        let shape = g.value(out).shape();
        let r = g.constant(Tensor4::from_vec(shape, self.proj.clone())?);
        let prod = g.mul(out, r)?;
        let mean = g.mean_all(prod);
        let loss = g.scale(mean, shape.numel() as f32);
        let grads = g.backward(loss)?;
        Ok(ids
            .iter()
            .zip(self.inputs)
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect())
    }
}

/// Perturbs every input element by `±h` and returns the largest norm-wise
/// relative error `|fd - analytic| / max(|fd|, |analytic|)` over the inputs.
pub fn check_elementwise<F>(inputs: &[Tensor4], build: F, h: f32, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[VarId]) -> Result<VarId>,
{
    let harness = Harness::new(inputs, build, seed)?;
    let analytic = harness.analytic()?;
    let mut worst = 0.0f64;
    for (k, an) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut fd2 = 0.0;
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let step = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            let fd = (harness.value(&plus)? - harness.value(&minus)?) / step;
            let a = an.data()[i] as f64;
            diff2 += (fd - a) * (fd - a);
            an2 += a * a;
            fd2 += fd * fd;
        }
        let denom = an2.sqrt().max(fd2.sqrt());
        if denom > 0.0 {
            worst = worst.max(diff2.sqrt() / denom);
        }
    }
    Ok(worst)
}

/// Compares directional derivatives along `directions` random sign vectors
/// spanning all inputs. The error for one direction `v` is
/// `|fd - <g, v>| / (||g|| * ||v|| / sqrt(n))`; the largest is returned.
///
/// Suited to scalar losses and deep compositions where per-element
/// differences drown in `f32` rounding.
pub fn check_directional<F>(
    inputs: &[Tensor4],
    build: F,
    h: f32,
    directions: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[VarId]) -> Result<VarId>,
{
    let harness = Harness::new(inputs, build, seed)?;
    let analytic = harness.analytic()?;
    let n: usize = inputs.iter().map(Tensor4::numel).sum();
    let gnorm = analytic
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if gnorm == 0.0 {
        return Ok(0.0);
    }
    let mut worst = 0.0f64;
    for d in 0..directions {
        let signs = pseudo_random(n, seed ^ (0xD1CE_0000 + d as u64));
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        let mut dot = 0.0f64;
        let mut offset = 0;
        for (k, an) in analytic.iter().enumerate() {
            for i in 0..an.numel() {
                let s = if signs[offset + i] >= 0.0 { 1.0f32 } else { -1.0 };
                plus[k].data_mut()[i] += s * h;
                minus[k].data_mut()[i] -= s * h;
                dot += s as f64 * an.data()[i] as f64;
            }
            offset += an.numel();
        }
        let fd = (harness.value(&plus)? - harness.value(&minus)?) / (2.0 * h as f64);
        worst = worst.max((fd - dot).abs() / gnorm);
    }
    Ok(worst)
}
