//! Stage 2: the frozen style augmentor feeding a U-net segmentation
//! classifier, plus tiled full-image prediction.

use std::path::Path;

use daug_nn::{Adam, AdamConfig, BoundConv, Conv2d, Graph, Tensor4, VarId, NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{put_adam, put_layers, take_adam, take_layers, Archive, Manifest, OptimizerRecord};
use crate::data::{anchors, crop, random_flip_rotate, PatchSet};
use crate::error::{DaugError, Result};
use crate::losses::{classification_loss_var, LossWeights};
use crate::networks::Generator;
use crate::style::{derive_seed, DomainRegistry};

pub const NUM_CLASSES: usize = 3;
pub const WIDTHS: [usize; 4] = [32, 64, 128, 256];
/// Input sides must be multiples of this.
pub const SIZE_DIVISOR: usize = 16;

/// Two 3x3 conv + IN + ReLU layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl Block {
    fn init(cin: usize, cout: usize, u: &mut impl FnMut() -> f32) -> Self {
        Self {
            first: Conv2d::init(cin, cout, 3, 1, 1, &mut *u),
            second: Conv2d::init(cout, cout, 3, 1, 1, &mut *u),
        }
    }

    fn layers(&self) -> [&Conv2d; 2] {
        [&self.first, &self.second]
    }

    fn layers_mut(&mut self) -> [&mut Conv2d; 2] {
        [&mut self.first, &mut self.second]
    }
}

/// U-net: four encoder levels (max-pool between), a bottleneck at 1/16
/// resolution, and four decoder levels of NN-upsample + conv, skip concat
/// and a block. A final 1x1 conv emits one logit per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub down: Vec<Block>,
    pub bottleneck: Block,
    pub up: Vec<Conv2d>,
    pub merge: Vec<Block>,
    pub head: Conv2d,
}

impl Classifier {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 31, 0));
        let mut u = move || rng.gen::<f32>();
        let mut down = Vec::new();
        let mut cin = 3;
        for &w in &WIDTHS {
            down.push(Block::init(cin, w, &mut u));
            cin = w;
        }
        let bottleneck = Block::init(cin, cin, &mut u);
        let mut up = Vec::new();
        let mut merge = Vec::new();
        let mut below = cin;
        for &w in WIDTHS.iter().rev() {
            up.push(Conv2d::init(below, w, 3, 1, 1, &mut u));
            merge.push(Block::init(2 * w, w, &mut u));
            below = w;
        }
        let head = Conv2d::init(WIDTHS[0], NUM_CLASSES, 1, 1, 0, &mut u);
        Self {
            down,
            bottleneck,
            up,
            merge,
            head,
        }
    }

    fn layers(&self) -> Vec<&Conv2d> {
        let mut out: Vec<&Conv2d> = self.down.iter().flat_map(Block::layers).collect();
        out.extend(self.bottleneck.layers());
        for (u, m) in self.up.iter().zip(&self.merge) {
            out.push(u);
            out.extend(m.layers());
        }
        out.push(&self.head);
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out: Vec<&mut Conv2d> = self.down.iter_mut().flat_map(Block::layers_mut).collect();
        out.extend(self.bottleneck.layers_mut());
        for (u, m) in self.up.iter_mut().zip(self.merge.iter_mut()) {
            out.push(u);
            out.extend(m.layers_mut());
        }
        out.push(&mut self.head);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor4> {
        self.layers().into_iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor4> {
        self.layers_mut().into_iter().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.layers().len())
            .flat_map(|i| [format!("classifier/layer.{i}.weight"), format!("classifier/layer.{i}.bias")])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundClassifier {
        BoundClassifier {
            layers: self.layers().into_iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }

    /// Logits (N, 3, H, W).
    pub fn forward(&self, image: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = b.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct BoundClassifier {
    /// Same order as [`Classifier::tensors`], one entry per conv.
    pub layers: Vec<BoundConv>,
}

impl BoundClassifier {
    pub fn ids(&self) -> Vec<VarId> {
        self.layers.iter().flat_map(BoundConv::ids).collect()
    }

    fn conv_in_relu(&self, g: &mut Graph, k: usize, x: VarId) -> Result<VarId> {
        let y = self.layers[k].forward(g, x)?;
        let y = g.instance_norm(y, NORM_EPS)?;
        Ok(g.relu(y))
    }

    fn block(&self, g: &mut Graph, k: usize, x: VarId) -> Result<VarId> {
        let y = self.conv_in_relu(g, k, x)?;
        self.conv_in_relu(g, k + 1, y)
    }

    pub fn forward(&self, g: &mut Graph, image: VarId) -> Result<VarId> {
        let s = g.value(image).shape();
        if s.c != 3 {
            return Err(DaugError::Channels {
                op: "classifier",
                expected: 3,
                got: s.c,
            });
        }
        if s.h == 0 || s.h % SIZE_DIVISOR != 0 || s.w % SIZE_DIVISOR != 0 {
            return Err(DaugError::IndivisibleSize {
                op: "classifier",
                h: s.h,
                w: s.w,
                divisor: SIZE_DIVISOR,
            });
        }
        let mut k = 0;
        let mut skips = Vec::with_capacity(WIDTHS.len());
        let mut x = image;
        for _ in 0..WIDTHS.len() {
            let y = self.block(g, k, x)?;
            k += 2;
            skips.push(y);
            x = g.max_pool2(y)?;
        }
        x = self.block(g, k, x)?;
        k += 2;
        for skip in skips.into_iter().rev() {
            let up = g.upsample2x(x);
            let up = self.conv_in_relu(g, k, up)?;
            let cat = g.concat_channels(up, skip)?;
            x = self.block(g, k + 1, cat)?;
            k += 3;
        }
        Ok(self.layers[k].forward(g, x)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DAugConfig {
    pub diversify_prob: f64,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub steps_per_epoch: Option<usize>,
}

impl Default for DAugConfig {
    fn default() -> Self {
        Self {
            diversify_prob: 0.9,
            epochs: 35,
            lr: 1e-4,
            batch_size: 32,
            weights: LossWeights::default(),
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl DAugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.diversify_prob) {
            return Err(DaugError::Config(format!(
                "diversify_prob must lie in [0, 1], got {}",
                self.diversify_prob
            )));
        }
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(DaugError::Config("batch_size and steps_per_epoch must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DaugError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.weights.validate()
    }
}

/// Result of one augmentor call: the batch to train on and, when the
/// augmentor fired, the domain each patch was rendered as.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub batch: Tensor4,
    pub styles: Option<Vec<usize>>,
}

/// With probability `prob`, renders every patch as an independently and
/// uniformly drawn registered domain; otherwise returns the batch as is.
pub fn augment_batch(
    batch: &Tensor4,
    registry: &DomainRegistry,
    generator: &Generator,
    rng: &mut impl Rng,
    prob: f64,
) -> Result<Augmented> {
    if registry.is_empty() {
        return Err(DaugError::TooFewDomains { need: 1, have: 0 });
    }
    if rng.gen::<f64>() >= prob {
        return Ok(Augmented {
            batch: batch.clone(),
            styles: None,
        });
    }
    let styles: Vec<usize> = (0..batch.shape().n).map(|_| rng.gen_range(0..registry.len())).collect();
    let codes = styles
        .iter()
        .map(|&d| registry.get(d).map(|e| &e.code))
        .collect::<Result<Vec<_>>>()?;
    Ok(Augmented {
        batch: generator.stylize_each(batch, &codes)?,
        styles: Some(styles),
    })
}

/// Classifier weights and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState {
    pub classifier: Classifier,
    pub opt: Adam,
    pub epoch: usize,
}

pub const CLASSIFIER_KIND: &str = "daugnet-classifier";

impl ClassifierState {
    pub fn fresh(seed: u64, lr: f32) -> Self {
        let classifier = Classifier::init(seed);
        let config = AdamConfig { lr, ..AdamConfig::default() };
        let opt = Adam::new(config, classifier.tensors().iter().map(|t| t.shape()));
        Self {
            classifier,
            opt,
            epoch: 0,
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        let c = &self.classifier;
        put_layers(&mut a, &c.tensor_names(), &c.tensors());
        let rec = put_adam(&mut a, "classifier/adam", &self.opt);
        let manifest = Manifest {
            kind: CLASSIFIER_KIND.into(),
            epoch: self.epoch,
            domains: Vec::new(),
            optimizers: vec![rec],
            new_domains: Vec::new(),
        };
        a.manifest = serde_json::to_string_pretty(&manifest)?;
        Ok(a)
    }

    pub fn from_archive(mut a: Archive) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&a.manifest)?;
        if manifest.kind != CLASSIFIER_KIND {
            return Err(DaugError::Format(format!(
                "expected a {CLASSIFIER_KIND} checkpoint, found {:?}",
                manifest.kind
            )));
        }
        let mut classifier = Classifier::init(0);
        let names = classifier.tensor_names();
        take_layers(&mut a, &names, classifier.tensors_mut())?;
        let rec: &OptimizerRecord = manifest
            .optimizers
            .first()
            .ok_or_else(|| DaugError::Format("classifier checkpoint lacks optimizer state".into()))?;
        let opt = take_adam(&mut a, rec, &classifier.tensors())?;
        a.finish()?;
        Ok(Self {
            classifier,
            opt,
            epoch: manifest.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStep {
    pub epoch: usize,
    pub loss: f64,
    pub diversified: bool,
}

/// One Adam step of the classification loss on a labeled batch.
pub fn classifier_step(state: &mut ClassifierState, images: &Tensor4, masks: &Tensor4, w: &LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let bound = state.classifier.bind(&mut g, true);
    let x = g.constant(images.clone());
    let logits = bound.forward(&mut g, x)?;
    let loss = classification_loss_var(&mut g, logits, masks, w)?;
    let value = g.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(DaugError::NonFiniteLoss {
            term: "classification",
            value,
        });
    }
    let grads = g.backward(loss)?;
    let ids = bound.ids();
    let refs: Vec<Option<&Tensor4>> = ids.iter().map(|&id| grads.get(id)).collect();
    let mut params = state.classifier.tensors_mut();
    state.opt.step_sparse(&mut params, &refs)?;
    Ok(value)
}

/// Trains (or fine-tunes) the classifier on labeled source patches. Each
/// step draws a batch, lets the frozen augmentor diversify it, applies an
/// independent random flip/rotation to every (patch, mask) pair and takes
/// one Adam step. `diversify_prob = 0` gives the plain classifier.
pub fn train_daugnet(
    sources: &PatchSet,
    registry: &DomainRegistry,
    generator: &Generator,
    cfg: &DAugConfig,
    init: Option<ClassifierState>,
    mut on_step: impl FnMut(&ClassifierStep),
) -> Result<(ClassifierState, Vec<ClassifierStep>)> {
    cfg.validate()?;
    let labeled: Vec<_> = sources.patches.iter().filter(|p| p.mask.is_some()).collect();
    if labeled.is_empty() {
        return Err(DaugError::EmptyDomain("labeled sources".into()));
    }
    for p in &labeled {
        registry.get(p.domain)?;
    }
    let mut state = init.unwrap_or_else(|| ClassifierState::fresh(derive_seed(cfg.seed, 32, 0), cfg.lr));
    state.opt.set_lr(cfg.lr);
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| labeled.len().div_ceil(cfg.batch_size));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 33, 0));
    let mut log = Vec::with_capacity(steps * cfg.epochs);
    for epoch in 0..cfg.epochs {
        for _ in 0..steps {
            let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..labeled.len())).collect();
            let images: Vec<Tensor4> = picks.iter().map(|&i| labeled[i].image.clone()).collect();
            let images = Tensor4::stack(&images)?;
            let aug = augment_batch(&images, registry, generator, &mut rng, cfg.diversify_prob)?;
            let mut xs = Vec::with_capacity(picks.len());
            let mut ys = Vec::with_capacity(picks.len());
            for (k, &i) in picks.iter().enumerate() {
                let mask = labeled[i].mask.as_ref().expect("filtered to labeled");
                let (x, y, _) = random_flip_rotate(&aug.batch.sample(k), mask, &mut rng)?;
                xs.push(x);
                ys.push(y);
            }
            let loss = classifier_step(&mut state, &Tensor4::stack(&xs)?, &Tensor4::stack(&ys)?, &cfg.weights)?;
            let rec = ClassifierStep {
                epoch,
                loss,
                diversified: aug.styles.is_some(),
            };
            on_step(&rec);
            log.push(rec);
        }
        state.epoch += 1;
    }
    Ok((state, log))
}

/// Mirror-pads (no edge repeat) the bottom/right of an image up to `h`x`w`.
pub fn reflect_pad(image: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let s = image.shape();
    let reflect = |i: usize, n: usize| {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    Tensor4::from_fn([s.n, s.c, h.max(s.h), w.max(s.w)], |n, c, y, x| {
        image.at(n, c, reflect(y, s.h), reflect(x, s.w))
    })
}

/// Averaged logits over overlapping tiles, (1, 3, H, W). Inputs smaller
/// than a tile are mirror-padded first and cropped back afterwards.
pub fn predict_logits(image: &Tensor4, classifier: &Classifier, tile: usize, overlap: usize) -> Result<Tensor4> {
    let s = image.shape();
    if s.n != 1 {
        return Err(DaugError::Precondition(format!("predict expects a single image, got batch {}", s.n)));
    }
    if tile % SIZE_DIVISOR != 0 {
        return Err(DaugError::IndivisibleSize {
            op: "predict tile",
            h: tile,
            w: tile,
            divisor: SIZE_DIVISOR,
        });
    }
    let padded = if s.h < tile || s.w < tile {
        reflect_pad(image, tile, tile)
    } else {
        image.clone()
    };
    let ps = padded.shape();
    let mut sum = Tensor4::zeros([1, NUM_CLASSES, ps.h, ps.w]);
    let mut count = vec![0u32; ps.h * ps.w];
    for &y in &anchors(ps.h, tile, overlap)? {
        for &x in &anchors(ps.w, tile, overlap)? {
            let logits = classifier.forward(&crop(&padded, x, y, tile, tile))?;
            for c in 0..NUM_CLASSES {
                for ty in 0..tile {
                    for tx in 0..tile {
                        let i = sum.offset(0, c, y + ty, x + tx);
                        sum.data_mut()[i] += logits.at(0, c, ty, tx);
                    }
                }
            }
            for ty in 0..tile {
                for tx in 0..tile {
                    count[(y + ty) * ps.w + x + tx] += 1;
                }
            }
        }
    }
    Ok(Tensor4::from_fn([1, NUM_CLASSES, s.h, s.w], |_, c, y, x| {
        sum.at(0, c, y, x) / count[y * ps.w + x] as f32
    }))
}

/// Binary class masks: sigmoid of averaged logits above 0.5.
pub fn predict_map(image: &Tensor4, classifier: &Classifier, tile: usize, overlap: usize) -> Result<Tensor4> {
    Ok(predict_logits(image, classifier, tile, overlap)?.map(|z| if z > 0.0 { 1.0 } else { 0.0 }))
}
