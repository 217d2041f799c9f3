//! Training objectives for both stages.
//!
//! Each loss exists in two forms: a plain function on values (used for
//! reporting and closed-form checks) and a graph builder that records the
//! same computation for differentiation.

use daug_nn::{Graph, Tensor4, VarId};
use serde::{Deserialize, Serialize};

use crate::error::{DaugError, Result};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f32 = 1e-7;

/// Additive smoothing in the soft-IoU ratio.
pub const SOFT_IOU_SMOOTH: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Adversarial weight (generator and discriminator).
    pub adv: f32,
    pub cross: f32,
    pub self_recon: f32,
    /// Zero disables the edge term.
    pub edge: f32,
    /// Sigmoid cross-entropy weight in the classification loss.
    pub ce: f32,
    /// Soft-IoU weight in the classification loss.
    pub soft_iou: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            cross: 10.0,
            self_recon: 10.0,
            edge: 100.0,
            ce: 0.25,
            soft_iou: 0.75,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.cross, self.self_recon, self.edge, self.ce, self.soft_iou];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DaugError::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP as f64, 1.0 - PROB_CLAMP as f64)
}

/// `-[ln D(real) + ln(1 - D(fake))]` for one pair of scores.
pub fn d_adv_loss(score_real: f64, score_fake: f64) -> f64 {
    -(clamp_prob(score_real).ln() + (1.0 - clamp_prob(score_fake)).ln())
}

/// `-ln D(fake)`.
pub fn g_adv_loss(score_fake: f64) -> f64 {
    -clamp_prob(score_fake).ln()
}

/// The eight images of one two-domain exchange. `fake_a` carries A's
/// content in B's style, `self_a` is A in its own style and `cross_a` is
/// `fake_a` restyled back to A.
#[derive(Clone, Copy, Debug)]
pub struct StylePairBundle<'a> {
    pub a: &'a Tensor4,
    pub b: &'a Tensor4,
    pub fake_a: &'a Tensor4,
    pub fake_b: &'a Tensor4,
    pub self_a: &'a Tensor4,
    pub self_b: &'a Tensor4,
    pub cross_a: &'a Tensor4,
    pub cross_b: &'a Tensor4,
}

impl StylePairBundle<'_> {
    fn check(&self) -> Result<()> {
        let s = self.a.shape();
        for t in [self.b, self.fake_a, self.fake_b, self.self_a, self.self_b, self.cross_a, self.cross_b] {
            if t.shape() != s {
                return Err(daug_nn::NnError::ShapeMismatch {
                    op: "style bundle",
                    expected: s,
                    got: t.shape(),
                }
                .into());
            }
        }
        Ok(())
    }
}

fn mean_abs_diff(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    let d = a.zip_map(b, |x, y| (x - y).abs())?;
    Ok(d.mean())
}

/// mean|A - A''| + mean|B - B''|.
pub fn cross_recon_loss(bundle: &StylePairBundle) -> Result<f64> {
    bundle.check()?;
    Ok(mean_abs_diff(bundle.a, bundle.cross_a)? + mean_abs_diff(bundle.b, bundle.cross_b)?)
}

/// mean|A - A'| + mean|B - B'|.
pub fn self_recon_loss(bundle: &StylePairBundle) -> Result<f64> {
    bundle.check()?;
    Ok(mean_abs_diff(bundle.a, bundle.self_a)? + mean_abs_diff(bundle.b, bundle.self_b)?)
}

/// Sobel distance of A to fake A plus B to fake B.
pub fn edge_loss(bundle: &StylePairBundle) -> Result<f64> {
    bundle.check()?;
    let a = daug_nn::functional::sobel_l1(bundle.a, bundle.fake_a)?;
    let b = daug_nn::functional::sobel_l1(bundle.b, bundle.fake_b)?;
    Ok(a as f64 + b as f64)
}

/// Unweighted generator terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTerms {
    pub adv: f64,
    pub cross: f64,
    pub self_recon: f64,
    pub edge: f64,
}

fn finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DaugError::NonFiniteLoss { term, value })
    }
}

/// Weighted generator objective. A zero weight drops its term entirely.
pub fn generator_objective(t: &GeneratorTerms, w: &LossWeights) -> Result<f64> {
    let parts = [
        ("adversarial", t.adv, w.adv),
        ("cross reconstruction", t.cross, w.cross),
        ("self reconstruction", t.self_recon, w.self_recon),
        ("edge", t.edge, w.edge),
    ];
    let mut total = 0.0;
    for (name, value, weight) in parts {
        finite(name, value)?;
        if weight != 0.0 {
            total += weight as f64 * value;
        }
    }
    Ok(total)
}

pub fn discriminator_objective(adv_d: f64, w: &LossWeights) -> Result<f64> {
    Ok(w.adv as f64 * finite("discriminator adversarial", adv_d)?)
}

fn check_binary(op: &'static str, t: &Tensor4) -> Result<()> {
    if t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(DaugError::NonBinary { op })
    }
}

fn check_logits(logits: &Tensor4, targets: &Tensor4) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(daug_nn::NnError::ShapeMismatch {
            op: "classification_loss",
            expected: logits.shape(),
            got: targets.shape(),
        }
        .into());
    }
    check_binary("classification_loss", targets)
}

/// λ5 * mean sigmoid cross-entropy + λ6 * (1 - mean_c (Σpy + 1)/(Σ(p+y-py) + 1)).
pub fn classification_loss(logits: &Tensor4, targets: &Tensor4, w: &LossWeights) -> Result<f64> {
    check_logits(logits, targets)?;
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = classification_loss_var(&mut g, z, targets, w)?;
    Ok(g.value(l).item()? as f64)
}

// --- graph builders -------------------------------------------------------

/// Batch mean of [`d_adv_loss`] over per-sample scores, (N,1,1,1) each.
pub fn d_adv_var(g: &mut Graph, real: VarId, fake: VarId) -> Result<VarId> {
    let r = g.clamp(real, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lr = g.ln(r);
    let mr = g.mean_all(lr);
    let f = g.clamp(fake, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let nf = g.scale(f, -1.0);
    let one_minus = g.add_scalar(nf, 1.0);
    let lf = g.ln(one_minus);
    let mf = g.mean_all(lf);
    let s = g.add(mr, mf)?;
    Ok(g.scale(s, -1.0))
}

/// Batch mean of [`g_adv_loss`].
pub fn g_adv_var(g: &mut Graph, fake: VarId) -> VarId {
    let f = g.clamp(fake, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let l = g.ln(f);
    let m = g.mean_all(l);
    g.scale(m, -1.0)
}

/// mean |a - b|.
pub fn l1_var(g: &mut Graph, a: VarId, b: VarId) -> Result<VarId> {
    let d = g.sub(a, b)?;
    let abs = g.abs(d);
    Ok(g.mean_all(abs))
}

/// Sum of scalar vars weighted by coefficients; zero weights are skipped.
pub fn weighted_sum(g: &mut Graph, parts: &[(VarId, f32)]) -> Result<Option<VarId>> {
    let mut total: Option<VarId> = None;
    for &(v, w) in parts {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { v } else { g.scale(v, w) };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total)
}

pub fn soft_iou_var(g: &mut Graph, logits: VarId, targets: &Tensor4) -> Result<VarId> {
    let p = g.sigmoid(logits);
    let y = g.constant(targets.clone());
    let py = g.mul(p, y)?;
    let inter = g.sum_per_channel(py);
    let p_plus_y = g.add(p, y)?;
    let union_px = g.sub(p_plus_y, py)?;
    let union = g.sum_per_channel(union_px);
    let num = g.add_scalar(inter, SOFT_IOU_SMOOTH);
    let den = g.add_scalar(union, SOFT_IOU_SMOOTH);
    let ratio = g.div(num, den)?;
    let m = g.mean_all(ratio);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

pub fn classification_loss_var(
    g: &mut Graph,
    logits: VarId,
    targets: &Tensor4,
    w: &LossWeights,
) -> Result<VarId> {
    check_logits(g.value(logits), targets)?;
    let ce = g.bce_with_logits(logits, targets)?;
    let iou = soft_iou_var(g, logits, targets)?;
    match weighted_sum(g, &[(ce, w.ce), (iou, w.soft_iou)])? {
        Some(v) => Ok(v),
        None => Ok(g.scale(ce, 0.0)),
    }
}
