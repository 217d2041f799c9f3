//! Patch extraction, dihedral augmentation, PNG I/O, the on-disk dataset
//! layout and a synthetic multi-domain scene generator.

use std::path::{Path, PathBuf};

use daug_nn::Tensor4;
use image::{ColorType, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DaugError, Result};
use crate::style::{DomainRegistry, DomainRole};

/// Mask channel order.
pub const CLASSES: [&str; 3] = ["building", "road", "tree"];

pub const PATCH_SIZE: usize = 256;
pub const PATCH_OVERLAP: usize = 32;

/// Window origins along one axis: multiples of the stride, plus a final
/// window flush with the far edge when the grid falls short of it.
pub fn anchors(len: usize, size: usize, overlap: usize) -> Result<Vec<usize>> {
    if size == 0 || overlap >= size {
        return Err(DaugError::Config(format!("patch size {size} must exceed overlap {overlap}")));
    }
    let stride = size - overlap;
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&a| a + size <= len).collect();
    if let Some(&last) = out.last() {
        if last + size < len {
            out.push(len - size);
        }
    }
    Ok(out)
}

/// Crops a window from every sample and channel.
pub fn crop(t: &Tensor4, x: usize, y: usize, w: usize, h: usize) -> Tensor4 {
    let s = t.shape();
    Tensor4::from_fn([s.n, s.c, h, w], |n, c, yy, xx| t.at(n, c, y + yy, x + xx))
}

/// Overlapping square windows of `image` (N, C, H, W) with their origins.
pub fn extract_patches(image: &Tensor4, size: usize, overlap: usize) -> Result<Vec<(Tensor4, usize, usize)>> {
    let s = image.shape();
    if s.h < size || s.w < size {
        return Err(DaugError::ImageTooSmall {
            op: "extract_patches",
            h: s.h,
            w: s.w,
            size,
        });
    }
    let xs = anchors(s.w, size, overlap)?;
    let ys = anchors(s.h, size, overlap)?;
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push((crop(image, x, y, size, size), x, y));
        }
    }
    Ok(out)
}

// --- dihedral group ---------------------------------------------------------

/// One of the eight symmetries of the square: `k % 4` quarter turns,
/// preceded by a horizontal mirror when `k >= 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const IDENTITY: Self = Self(0);
    pub const ROT90: Self = Self(1);

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8).map(Self)
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self(rng.gen_range(0..8))
    }

    pub fn inverse(self) -> Self {
        if self.0 < 4 {
            Self((4 - self.0) % 4)
        } else {
            self
        }
    }

    /// Source pixel of output pixel (y, x) in an `s`-sided square.
    fn source(self, s: usize, mut y: usize, mut x: usize) -> (usize, usize) {
        for _ in 0..self.0 % 4 {
            (y, x) = (x, s - 1 - y);
        }
        if self.0 >= 4 {
            x = s - 1 - x;
        }
        (y, x)
    }

    pub fn apply(self, t: &Tensor4) -> Result<Tensor4> {
        let s = t.shape();
        if s.h != s.w {
            return Err(DaugError::NotSquare {
                op: "dihedral transform",
                h: s.h,
                w: s.w,
            });
        }
        Ok(Tensor4::from_fn(s, |n, c, y, x| {
            let (sy, sx) = self.source(s.h, y, x);
            t.at(n, c, sy, sx)
        }))
    }
}

/// Applies one uniformly drawn symmetry to both tensors.
pub fn random_flip_rotate(image: &Tensor4, mask: &Tensor4, rng: &mut impl Rng) -> Result<(Tensor4, Tensor4, Dihedral)> {
    let ms = mask.shape();
    if ms.h != ms.w {
        return Err(DaugError::NotSquare {
            op: "random_flip_rotate",
            h: ms.h,
            w: ms.w,
        });
    }
    let d = Dihedral::random(rng);
    Ok((d.apply(image)?, d.apply(mask)?, d))
}

// --- image I/O ----------------------------------------------------------------

fn image_err(path: &Path, reason: impl ToString) -> DaugError {
    DaugError::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding half up and clamping.
pub fn unit_to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn decode(path: &Path, expected: ColorType) -> Result<image::DynamicImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| DaugError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| DaugError::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    if img.color() != expected {
        return Err(image_err(path, format!("expected {expected:?} pixels, found {:?}", img.color())));
    }
    Ok(img)
}

/// 8-bit RGB PNG as (1, 3, H, W) in [-1, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let img = decode(path, ColorType::Rgb8)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor4::from_fn([1, 3, h, w], |_, c, y, x| byte_to_unit(raw[(y * w + x) * 3 + c])))
}

pub fn save_image(path: impl AsRef<Path>, image: &Tensor4) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(image_err(path, format!("expected a (1, 3, H, W) image, got {s}")));
    }
    let mut raw = vec![0u8; s.h * s.w * 3];
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                raw[(y * s.w + x) * 3 + c] = unit_to_byte(image.at(0, c, y, x));
            }
        }
    }
    let img = image::RgbImage::from_raw(s.w as u32, s.h as u32, raw).expect("buffer sized for image");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Single-band 8-bit mask with values {0, 255}, as (1, 1, H, W) in {0, 1}.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let img = decode(path, ColorType::L8)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for &b in img.as_raw() {
        data.push(match b {
            0 => 0.0,
            255 => 1.0,
            _ => return Err(image_err(path, format!("mask value {b} is neither 0 nor 255"))),
        });
    }
    Ok(Tensor4::from_vec([1, 1, h, w], data)?)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Tensor4) -> Result<()> {
    let path = path.as_ref();
    let s = mask.shape();
    if s.n != 1 || s.c != 1 {
        return Err(image_err(path, format!("expected a (1, 1, H, W) mask, got {s}")));
    }
    let mut raw = Vec::with_capacity(s.h * s.w);
    for &v in mask.data() {
        raw.push(match v {
            0.0 => 0,
            1.0 => 255,
            _ => return Err(DaugError::NonBinary { op: "save_mask" }),
        });
    }
    let img = image::GrayImage::from_raw(s.w as u32, s.h as u32, raw).expect("buffer sized for mask");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Splits a (1, 3, H, W) mask into its class planes.
pub fn class_planes(mask: &Tensor4) -> Vec<Tensor4> {
    let s = mask.shape();
    (0..s.c)
        .map(|c| Tensor4::from_fn([1, 1, s.h, s.w], |_, _, y, x| mask.at(0, c, y, x)))
        .collect()
}

pub fn merge_planes(planes: &[Tensor4]) -> Result<Tensor4> {
    let s = planes.first().ok_or(DaugError::Precondition("no mask planes".into()))?.shape();
    for p in planes {
        if p.shape() != s {
            return Err(DaugError::Precondition(format!("mask planes differ in shape: {} vs {s}", p.shape())));
        }
    }
    Ok(Tensor4::from_fn([1, planes.len(), s.h, s.w], |_, c, y, x| planes[c].at(0, 0, y, x)))
}

// --- dataset layout -------------------------------------------------------------

/// One full domain image, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainImage {
    pub name: String,
    pub role: DomainRole,
    pub image: Tensor4,
    /// (1, 3, H, W) binary masks in [`CLASSES`] order.
    pub mask: Option<Tensor4>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub role: DomainRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domains: Vec<DatasetEntry>,
}

pub const DATASET_MANIFEST: &str = "domains.json";

fn mask_path(dir: &Path, class: &str) -> PathBuf {
    dir.join(format!("mask_{class}.png"))
}

/// Writes `<root>/<domain>/image.png`, one `mask_<class>.png` per class when
/// labeled, and `<root>/domains.json`.
pub fn write_dataset(root: impl AsRef<Path>, domains: &[DomainImage]) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| DaugError::io(root, e))?;
    for d in domains {
        let dir = root.join(&d.name);
        std::fs::create_dir_all(&dir).map_err(|e| DaugError::io(&dir, e))?;
        save_image(dir.join("image.png"), &d.image)?;
        if let Some(mask) = &d.mask {
            for (class, plane) in CLASSES.iter().zip(class_planes(mask)) {
                save_mask(mask_path(&dir, class), &plane)?;
            }
        }
    }
    let manifest = DatasetManifest {
        domains: domains
            .iter()
            .map(|d| DatasetEntry {
                name: d.name.clone(),
                role: d.role,
            })
            .collect(),
    };
    let path = root.join(DATASET_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| DaugError::io(&path, e))
}

/// Reads a dataset written by [`write_dataset`]. Masks are loaded when all
/// class files exist.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<DomainImage>> {
    let root = root.as_ref();
    let path = root.join(DATASET_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| DaugError::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut out = Vec::with_capacity(manifest.domains.len());
    for entry in manifest.domains {
        let dir = root.join(&entry.name);
        let image = load_image(dir.join("image.png"))?;
        let mask = if CLASSES.iter().all(|c| mask_path(&dir, c).exists()) {
            let planes = CLASSES
                .iter()
                .map(|c| load_mask(mask_path(&dir, c)))
                .collect::<Result<Vec<_>>>()?;
            Some(merge_planes(&planes)?)
        } else {
            None
        };
        out.push(DomainImage {
            name: entry.name,
            role: entry.role,
            image,
            mask,
        });
    }
    Ok(out)
}

// --- patch sets -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// (1, 3, s, s) in [-1, 1].
    pub image: Tensor4,
    /// (1, 3, s, s) binary, absent for unlabeled domains.
    pub mask: Option<Tensor4>,
    pub domain: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patch count per domain id, for `domains` ids.
    pub fn census(&self, domains: usize) -> Vec<usize> {
        let mut counts = vec![0; domains];
        for p in &self.patches {
            if p.domain < domains {
                counts[p.domain] += 1;
            }
        }
        counts
    }

    pub fn of_domain(&self, domain: usize) -> impl Iterator<Item = &Patch> {
        self.patches.iter().filter(move |p| p.domain == domain)
    }

    /// Stacked images of one domain, (n, 3, s, s).
    pub fn pool(&self, domain: usize) -> Result<Tensor4> {
        let parts: Vec<Tensor4> = self.of_domain(domain).map(|p| p.image.clone()).collect();
        if parts.is_empty() {
            return Err(DaugError::EmptyDomain(format!("#{domain}")));
        }
        Ok(Tensor4::stack(&parts)?)
    }

    /// Stacked images per registered domain, in registry order.
    pub fn pools(&self, registry: &DomainRegistry) -> Result<Vec<Tensor4>> {
        registry
            .entries()
            .iter()
            .map(|e| self.pool(e.head_id).map_err(|_| DaugError::EmptyDomain(e.name.clone())))
            .collect()
    }

    /// Labeled patches from domains with the given role.
    pub fn labeled(&self, registry: &DomainRegistry, role: DomainRole) -> PatchSet {
        PatchSet {
            patches: self
                .patches
                .iter()
                .filter(|p| p.mask.is_some() && registry.get(p.domain).map(|e| e.role == role).unwrap_or(false))
                .cloned()
                .collect(),
        }
    }
}

/// Cuts every domain image (and its mask, in lockstep) into patches tagged
/// with the domain's registry id.
pub fn assemble_patchset(
    domains: &[DomainImage],
    registry: &DomainRegistry,
    size: usize,
    overlap: usize,
) -> Result<PatchSet> {
    let mut set = PatchSet::default();
    for d in domains {
        let id = registry.by_name(&d.name)?.head_id;
        let image_patches = extract_patches(&d.image, size, overlap)?;
        let mask_patches = match &d.mask {
            Some(m) => {
                let (is, ms) = (d.image.shape(), m.shape());
                if (is.h, is.w) != (ms.h, ms.w) {
                    return Err(DaugError::Precondition(format!(
                        "domain {:?}: image is {}x{} but mask is {}x{}",
                        d.name, is.h, is.w, ms.h, ms.w
                    )));
                }
                Some(extract_patches(m, size, overlap)?)
            }
            None => None,
        };
        for (k, (image, x, y)) in image_patches.into_iter().enumerate() {
            let mask = mask_patches.as_ref().map(|m| m[k].0.clone());
            set.patches.push(Patch {
                image,
                mask,
                domain: id,
                x,
                y,
            });
        }
    }
    Ok(set)
}

/// Registry of the dataset's domains with codes drawn from `seed`.
pub fn registry_for(domains: &[DomainImage], seed: u64) -> Result<DomainRegistry> {
    let mut r = DomainRegistry::new();
    for (i, d) in domains.iter().enumerate() {
        r.register(&d.name, d.role, crate::style::derive_seed(seed, 5, i as u64))?;
    }
    Ok(r)
}

// --- synthetic scenes --------------------------------------------------------------

/// Colors of the canonical scene in [0, 1], before any domain transform.
const BACKGROUND: [f32; 3] = [0.72, 0.64, 0.46];
const BUILDING: [f32; 3] = [0.78, 0.32, 0.26];
const ROAD: [f32; 3] = [0.40, 0.40, 0.42];
const TREE: [f32; 3] = [0.16, 0.42, 0.14];

/// Per-domain appearance: `x -> permute(clamp(M x + offset) ^ gamma)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDomainSpec {
    pub name: String,
    pub role: DomainRole,
    pub matrix: [[f32; 3]; 3],
    pub offset: [f32; 3],
    pub gamma: [f32; 3],
    /// Output channel `c` takes transformed channel `permutation[c]`.
    pub permutation: Option<[usize; 3]>,
    pub geometry_seed: u64,
}

impl SynthDomainSpec {
    pub fn identity(name: &str, role: DomainRole, geometry_seed: u64) -> Self {
        Self {
            name: name.into(),
            role,
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: [0.0; 3],
            gamma: [1.0; 3],
            permutation: None,
            geometry_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if !det.is_finite() || det.abs() < 1e-3 {
            return Err(DaugError::Config(format!("domain {:?}: color matrix is singular (det {det})", self.name)));
        }
        if self.gamma.iter().any(|g| !g.is_finite() || *g <= 0.0) {
            return Err(DaugError::Config(format!("domain {:?}: gamma must be positive", self.name)));
        }
        if let Some(p) = self.permutation {
            let mut seen = [false; 3];
            for &c in &p {
                if c >= 3 || seen[c] {
                    return Err(DaugError::Config(format!("domain {:?}: {p:?} is not a permutation", self.name)));
                }
                seen[c] = true;
            }
        }
        Ok(())
    }

    /// Maps a canonical color in [0, 1] to this domain, in [0, 1].
    pub fn transform(&self, rgb: [f32; 3]) -> [f32; 3] {
        let mut t = [0.0f32; 3];
        for (c, out) in t.iter_mut().enumerate() {
            let v: f32 = (0..3).map(|k| self.matrix[c][k] * rgb[k]).sum::<f32>() + self.offset[c];
            *out = v.clamp(0.0, 1.0).powf(self.gamma[c]);
        }
        match self.permutation {
            Some(p) => [t[p[0]], t[p[1]], t[p[2]]],
            None => t,
        }
    }
}

/// Two labeled sources and one unlabeled target whose bands are permuted,
/// so colour alone misleads a classifier trained on the sources.
pub fn preset_specs() -> Vec<SynthDomainSpec> {
    let alpha = SynthDomainSpec::identity("alpha", DomainRole::Source, 101);
    let beta = SynthDomainSpec {
        name: "beta".into(),
        role: DomainRole::Source,
        matrix: [[0.85, 0.10, 0.05], [0.10, 0.80, 0.10], [0.05, 0.15, 0.80]],
        offset: [0.10, 0.06, -0.04],
        gamma: [0.8, 1.0, 1.25],
        permutation: None,
        geometry_seed: 202,
    };
    let gamma = SynthDomainSpec {
        name: "gamma".into(),
        role: DomainRole::Target,
        matrix: [[0.90, 0.05, 0.05], [0.00, 0.85, 0.15], [0.10, 0.00, 0.90]],
        offset: [-0.04, 0.08, 0.04],
        gamma: [1.15, 0.9, 0.85],
        permutation: Some([2, 0, 1]),
        geometry_seed: 303,
    };
    vec![alpha, beta, gamma]
}

/// Scene size and class coverage targets shared by all domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthLayout {
    pub size: usize,
    pub building_fraction: (f32, f32),
    pub road_fraction: (f32, f32),
    pub tree_fraction: (f32, f32),
}

impl Default for SynthLayout {
    fn default() -> Self {
        Self {
            size: 128,
            building_fraction: (0.05, 0.20),
            road_fraction: (0.04, 0.18),
            tree_fraction: (0.10, 0.35),
        }
    }
}

struct Canvas {
    size: usize,
    /// 0 background, 1 building, 2 road, 3 tree.
    label: Vec<u8>,
}

impl Canvas {
    fn fraction(&self, class: u8) -> f32 {
        self.label.iter().filter(|&&l| l == class).count() as f32 / self.label.len() as f32
    }

    /// Paints `class` on background pixels selected by `inside`.
    fn paint(&mut self, class: u8, inside: impl Fn(usize, usize) -> bool) {
        for y in 0..self.size {
            for x in 0..self.size {
                let i = y * self.size + x;
                if self.label[i] == 0 && inside(y, x) {
                    self.label[i] = class;
                }
            }
        }
    }
}

fn target(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    // aim inside the range with margin for the last shape's overshoot
    lo + (hi - lo) * rng.gen_range(0.2..0.6)
}

fn layout(size: usize, cfg: &SynthLayout, seed: u64) -> Result<Canvas> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Canvas {
        size,
        label: vec![0; size * size],
    };
    let s = size as f32;
    let guard = 10_000;

    let goal = target(&mut rng, cfg.building_fraction);
    let mut tries = 0;
    while canvas.fraction(1) < goal && tries < guard {
        tries += 1;
        let w = rng.gen_range(s * 0.04..s * 0.10).max(3.0) as usize;
        let h = rng.gen_range(s * 0.04..s * 0.10).max(3.0) as usize;
        let x0 = rng.gen_range(0..size - w);
        let y0 = rng.gen_range(0..size - h);
        canvas.paint(1, |y, x| (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x));
    }

    let goal = target(&mut rng, cfg.road_fraction);
    while canvas.fraction(2) < goal && tries < guard {
        tries += 1;
        let half = rng.gen_range(1.0..2.5f32);
        let (px, py) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let angle = rng.gen_range(0..4) as f32 * std::f32::consts::FRAC_PI_4;
        let (dx, dy) = (angle.cos(), angle.sin());
        let len = rng.gen_range(s * 0.3..s * 0.8);
        canvas.paint(2, |y, x| {
            let (rx, ry) = (x as f32 + 0.5 - px, y as f32 + 0.5 - py);
            let along = rx * dx + ry * dy;
            let across = (rx * dy - ry * dx).abs();
            across <= half && along.abs() <= len * 0.5
        });
    }

    let goal = target(&mut rng, cfg.tree_fraction);
    while canvas.fraction(3) < goal && tries < guard {
        tries += 1;
        let r = rng.gen_range(s * 0.02..s * 0.05).max(1.5);
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        canvas.paint(3, |y, x| {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            dx * dx + dy * dy <= r * r
        });
    }
    if tries >= guard {
        return Err(DaugError::Config("class coverage targets are unreachable for this scene size".into()));
    }
    Ok(canvas)
}

/// Renders one scene per spec. Geometry comes from each spec's own seed,
/// pixel texture from `seed`; masks are exact by construction.
pub fn generate_synth_domains(layout_cfg: &SynthLayout, specs: &[SynthDomainSpec], seed: u64) -> Result<Vec<DomainImage>> {
    if specs.len() < 2 {
        return Err(DaugError::TooFewDomains {
            need: 2,
            have: specs.len(),
        });
    }
    let size = layout_cfg.size;
    if size < 32 {
        return Err(DaugError::Config(format!("synthetic scenes need at least 32 pixels per side, got {size}")));
    }
    let mut out = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let canvas = layout(size, layout_cfg, spec.geometry_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::style::derive_seed(seed, 7, k as u64));
        let mut image = Tensor4::zeros([1, 3, size, size]);
        let mut mask = Tensor4::zeros([1, 3, size, size]);
        for y in 0..size {
            for x in 0..size {
                let label = canvas.label[y * size + x];
                let (base, jitter) = match label {
                    1 => (BUILDING, 0.03),
                    2 => (ROAD, 0.03),
                    3 => (TREE, 0.08),
                    _ => (BACKGROUND, 0.05),
                };
                let shade: f32 = rng.gen_range(-jitter..jitter);
                let rgb = base.map(|v| (v + shade + rng.gen_range(-0.01..0.01)).clamp(0.0, 1.0));
                let t = spec.transform(rgb);
                for c in 0..3 {
                    image.set(0, c, y, x, t[c] * 2.0 - 1.0);
                }
                if label > 0 {
                    mask.set(0, label as usize - 1, y, x, 1.0);
                }
            }
        }
        out.push(DomainImage {
            name: spec.name.clone(),
            role: spec.role,
            image,
            mask: Some(mask),
        });
    }
    Ok(out)
}

/// Per-channel means of a (N, 3, H, W) batch.
pub fn channel_means(t: &Tensor4) -> [f64; 3] {
    let s = t.shape();
    let mut m = [0.0f64; 3];
    for n in 0..s.n {
        for (c, mc) in m.iter_mut().enumerate() {
            let start = t.offset(n, c, 0, 0);
            *mc += t.data()[start..start + s.plane()].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    m.map(|v| v / (s.n * s.plane()) as f64)
}

/// Euclidean distance between channel-mean vectors.
pub fn channel_mean_distance(a: &Tensor4, b: &Tensor4) -> f64 {
    let (ma, mb) = (channel_means(a), channel_means(b));
    (0..3).map(|c| (ma[c] - mb[c]).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_arithmetic() {
        assert_eq!(anchors(256, 256, 32).unwrap(), vec![0]);
        assert_eq!(anchors(480, 256, 32).unwrap(), vec![0, 224]);
        assert_eq!(anchors(300, 256, 32).unwrap(), vec![0, 44]);
        assert_eq!(anchors(100, 256, 32).unwrap(), Vec::<usize>::new());
        assert!(anchors(10, 4, 4).is_err());
    }

    #[test]
    fn extract_patch_positions() {
        let img = Tensor4::from_fn([1, 3, 256, 300], |_, c, y, x| (c * 1000 + y * 300 + x) as f32);
        let p = extract_patches(&img, 256, 32).unwrap();
        let origins: Vec<_> = p.iter().map(|(_, x, y)| (*x, *y)).collect();
        assert_eq!(origins, vec![(0, 0), (44, 0)]);
        assert_eq!(p[1].0.at(0, 2, 5, 0), img.at(0, 2, 5, 44));
        assert!(matches!(
            extract_patches(&Tensor4::zeros([1, 3, 100, 300]), 256, 32),
            Err(DaugError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn dihedral_group_laws() {
        let t = Tensor4::from_fn([1, 2, 5, 5], |_, c, y, x| (c * 25 + y * 5 + x) as f32);
        assert_eq!(Dihedral::IDENTITY.apply(&t).unwrap(), t);
        let mut r = t.clone();
        for _ in 0..4 {
            r = Dihedral::ROT90.apply(&r).unwrap();
        }
        assert_eq!(r, t);
        let mut seen = Vec::new();
        for d in Dihedral::all() {
            let out = d.apply(&t).unwrap();
            assert_eq!(d.inverse().apply(&out).unwrap(), t);
            assert!(!seen.contains(&out));
            seen.push(out);
        }
        assert!(Dihedral(3).apply(&Tensor4::zeros([1, 1, 2, 3])).is_err());
    }

    #[test]
    fn byte_mapping() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn singular_spec_is_rejected() {
        let mut s = SynthDomainSpec::identity("x", DomainRole::Source, 0);
        s.matrix[2] = s.matrix[1];
        assert!(s.validate().is_err());
        let mut s = SynthDomainSpec::identity("x", DomainRole::Source, 0);
        s.permutation = Some([0, 0, 1]);
        assert!(s.validate().is_err());
    }
}
