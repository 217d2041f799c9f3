//! IoU metrics and the classic colour standardization baselines.
//!
//! Standardizers take and return (1, C, H, W) images in [-1, 1]; the
//! histogram methods quantize to 8 bits first.

use daug_nn::Tensor4;
use serde::{Deserialize, Serialize};

use crate::data::{byte_to_unit, unit_to_byte, CLASSES};
use crate::error::{DaugError, Result};

fn check_pair(op: &'static str, pred: &Tensor4, gt: &Tensor4) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(daug_nn::NnError::ShapeMismatch {
            op,
            expected: gt.shape(),
            got: pred.shape(),
        }
        .into());
    }
    if pred.data().iter().chain(gt.data()).any(|&v| v != 0.0 && v != 1.0) {
        return Err(DaugError::NonBinary { op });
    }
    Ok(())
}

/// (intersection, union) pixel counts of two binary masks.
pub fn overlap_counts(pred: &Tensor4, gt: &Tensor4) -> Result<(u64, u64)> {
    check_pair("iou", pred, gt)?;
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == 1.0, g == 1.0);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

/// |pred and gt| / |pred or gt|; `None` when both masks are empty.
pub fn iou(pred: &Tensor4, gt: &Tensor4) -> Result<Option<f64>> {
    let (inter, union) = overlap_counts(pred, gt)?;
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Mean over defined values.
pub fn mean_iou(values: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(DaugError::Precondition("every class IoU is undefined".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIoU {
    pub class: String,
    pub iou: Option<f64>,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub domain: String,
    pub classes: Vec<ClassIoU>,
    pub overall: Option<f64>,
}

impl IoUReport {
    /// Scores (1, 3, H, W) masks class by class.
    pub fn from_masks(domain: &str, pred: &Tensor4, gt: &Tensor4) -> Result<Self> {
        check_pair("iou report", pred, gt)?;
        let s = gt.shape();
        let mut classes = Vec::with_capacity(s.c);
        for c in 0..s.c {
            let plane = |t: &Tensor4| Tensor4::from_fn([s.n, 1, s.h, s.w], |n, _, y, x| t.at(n, c, y, x));
            let (intersection, union) = overlap_counts(&plane(pred), &plane(gt))?;
            classes.push(ClassIoU {
                class: CLASSES.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string()),
                iou: (union > 0).then(|| intersection as f64 / union as f64),
                intersection,
                union,
            });
        }
        let values: Vec<Option<f64>> = classes.iter().map(|c| c.iou).collect();
        Ok(Self {
            domain: domain.to_string(),
            classes,
            overall: mean_iou(&values).ok(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domains: Vec<IoUReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

// --- standardization --------------------------------------------------------

fn check_single(op: &'static str, image: &Tensor4) -> Result<()> {
    if image.shape().n != 1 {
        return Err(DaugError::Precondition(format!("{op} expects one image, got {}", image.shape().n)));
    }
    Ok(())
}

fn channel(image: &Tensor4, c: usize) -> &[f32] {
    let s = image.shape();
    let start = image.offset(0, c, 0, 0);
    &image.data()[start..start + s.plane()]
}

fn channel_mut(image: &mut Tensor4, c: usize) -> &mut [f32] {
    let s = image.shape();
    let start = image.offset(0, c, 0, 0);
    &mut image.data_mut()[start..start + s.plane()]
}

/// Scales intensities (in [0, 1]) so every channel mean equals the mean
/// over all channels, then clamps. Channels with zero mean stay as they are.
pub fn gray_world(image: &Tensor4) -> Result<Tensor4> {
    check_single("gray_world", image)?;
    let c_count = image.shape().c;
    let means: Vec<f64> = (0..c_count)
        .map(|c| channel(image, c).iter().map(|&v| (v as f64 + 1.0) / 2.0).sum::<f64>() / image.shape().plane() as f64)
        .collect();
    let global = means.iter().sum::<f64>() / c_count as f64;
    let mut out = image.clone();
    for (c, &m) in means.iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        let k = global / m;
        for v in channel_mut(&mut out, c) {
            let scaled = ((*v as f64 + 1.0) / 2.0 * k).clamp(0.0, 1.0);
            *v = (scaled * 2.0 - 1.0) as f32;
        }
    }
    Ok(out)
}

fn histogram(values: &[f32]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in values {
        h[unit_to_byte(v) as usize] += 1;
    }
    h
}

fn cumulative(h: &[u64; 256]) -> [u64; 256] {
    let mut cdf = [0u64; 256];
    let mut acc = 0;
    for (i, &n) in h.iter().enumerate() {
        acc += n;
        cdf[i] = acc;
    }
    cdf
}

/// Per-channel histogram equalization on 8-bit levels. A constant channel
/// is returned unchanged.
pub fn hist_equalize(image: &Tensor4) -> Result<Tensor4> {
    check_single("hist_equalize", image)?;
    let mut out = image.clone();
    for c in 0..image.shape().c {
        let cdf = cumulative(&histogram(channel(image, c)));
        let total = cdf[255];
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        let mut lut = [0u8; 256];
        for (level, out_level) in lut.iter_mut().enumerate() {
            *out_level = if total == cdf_min {
                level as u8
            } else {
                let r = (cdf[level].saturating_sub(cdf_min)) as f64 / (total - cdf_min) as f64;
                (r * 255.0).round() as u8
            };
        }
        for v in channel_mut(&mut out, c) {
            *v = byte_to_unit(lut[unit_to_byte(*v) as usize]);
        }
    }
    Ok(out)
}

/// Per-channel `(x - mean) / std` with population statistics.
pub fn zscore(image: &Tensor4) -> Result<Tensor4> {
    check_single("zscore", image)?;
    let mut out = image.clone();
    for c in 0..image.shape().c {
        let xs = channel(image, c);
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(DaugError::Precondition(format!("zscore: channel {c} has zero variance")));
        }
        let std = var.sqrt();
        for v in channel_mut(&mut out, c) {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
    Ok(out)
}

/// Per-channel monotone remap of `src` levels so its CDF follows `reference`:
/// each level goes to the smallest reference level whose CDF reaches it.
pub fn hist_match(src: &Tensor4, reference: &Tensor4) -> Result<Tensor4> {
    check_single("hist_match", src)?;
    check_single("hist_match", reference)?;
    if src.shape().c != reference.shape().c {
        return Err(DaugError::Channels {
            op: "hist_match",
            expected: reference.shape().c,
            got: src.shape().c,
        });
    }
    let mut out = src.clone();
    for c in 0..src.shape().c {
        let cs = cumulative(&histogram(channel(src, c)));
        let cr = cumulative(&histogram(channel(reference, c)));
        let (ns, nr) = (cs[255] as u128, cr[255] as u128);
        let mut lut = [0u8; 256];
        let mut r = 0usize;
        for level in 0..256 {
            // cr[r] / nr >= cs[level] / ns, compared exactly in integers
            while r < 255 && (cr[r] as u128) * ns < (cs[level] as u128) * nr {
                r += 1;
            }
            lut[level] = r as u8;
        }
        for v in channel_mut(&mut out, c) {
            *v = byte_to_unit(lut[unit_to_byte(*v) as usize]);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Standardizer {
    GrayWorld,
    HistEqualize,
    Zscore,
    HistMatch,
}

impl std::str::FromStr for Standardizer {
    type Err = DaugError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray-world" => Ok(Self::GrayWorld),
            "hist-equalize" => Ok(Self::HistEqualize),
            "zscore" => Ok(Self::Zscore),
            "hist-match" => Ok(Self::HistMatch),
            other => Err(DaugError::Config(format!(
                "unknown standardizer {other:?} (gray-world, hist-equalize, zscore, hist-match)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[f32]) -> Tensor4 {
        Tensor4::from_vec([1, 1, 2, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = mask(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(iou(&a, &a).unwrap(), Some(1.0));
        assert_eq!(iou(&a, &mask(&[0.0, 0.0, 1.0, 1.0])).unwrap(), Some(0.0));
        assert_eq!(iou(&a, &mask(&[1.0, 0.0, 1.0, 0.0])).unwrap(), Some(1.0 / 3.0));
        assert_eq!(iou(&mask(&[0.0; 4]), &mask(&[0.0; 4])).unwrap(), None);
        assert!(matches!(iou(&mask(&[0.5, 0.0, 0.0, 0.0]), &a), Err(DaugError::NonBinary { .. })));
    }

    #[test]
    fn mean_iou_examples() {
        assert_eq!(mean_iou(&[Some(1.0), Some(1.0), Some(1.0)]).unwrap(), 1.0);
        assert!((mean_iou(&[Some(0.6), Some(0.3), Some(0.9)]).unwrap() - 0.6).abs() < 1e-12);
        assert!((mean_iou(&[Some(0.2), None, Some(0.4)]).unwrap() - 0.3).abs() < 1e-12);
        assert!(mean_iou(&[None, None, None]).is_err());
    }

    #[test]
    fn constant_channels() {
        let img = Tensor4::from_fn([1, 3, 4, 4], |_, c, y, x| if c == 0 { 0.2 } else { (y * 4 + x) as f32 / 8.0 - 1.0 });
        let eq = hist_equalize(&img).unwrap();
        let first = channel(&eq, 0);
        assert!(first.iter().all(|&v| v == first[0]));
        let reference = Tensor4::from_fn([1, 3, 4, 4], |_, c, y, x| if c == 1 { 0.5 } else { (x + y) as f32 / 6.0 - 1.0 });
        let m = hist_match(&img, &reference).unwrap();
        let second = channel(&m, 1);
        assert!(second.iter().all(|&v| v == byte_to_unit(unit_to_byte(0.5))));
        assert!(zscore(&img).is_err());
    }
}
