//! Shared encoder/decoder generator and the multi-head discriminator.
//!
//! Encoder: conv(3->32,k7,s1,p3)+IN+ReLU, conv(32->64,k4,s2,p1)+IN+ReLU,
//! conv(64->128,k4,s2,p1)+IN+ReLU, then three conv(128->128,k3,s1,p1) with
//! IN+ReLU on the first two and a linear last layer. The embedding has
//! [`STYLE_DIM`] channels at a quarter of the input resolution.
//!
//! Decoder: [2x NN upsample, conv(128->64,k5,s1,p2)+LN+ReLU],
//! [2x NN upsample, conv(64->3,k5,s1,p2)+tanh].
//!
//! Discriminator trunk: conv(3->64,k4,s2,p1)+LReLU,
//! conv(64->128,k4,s2,p1)+IN+LReLU, conv(128->256,k4,s2,p1)+IN+LReLU. Each
//! domain head is conv(256->1,k4,s1,p1)+sigmoid; its score is the map mean.

use daug_nn::{BoundConv, Conv2d, Graph, Tensor4, VarId, LEAKY_SLOPE, NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DaugError, Result};
use crate::style::{derive_seed, DomainRegistry, DomainRole, StyleCode, STYLE_DIM};

const SEED_TAG_GENERATOR: u64 = 1;
const SEED_TAG_TRUNK: u64 = 2;
const SEED_TAG_HEAD: u64 = 3;

fn uniform01(rng: &mut ChaCha8Rng) -> impl FnMut() -> f32 + '_ {
    move || rng.gen::<f32>()
}

fn check_image(op: &'static str, t: &Tensor4, divisor: usize) -> Result<()> {
    let s = t.shape();
    if s.c != 3 {
        return Err(DaugError::Channels {
            op,
            expected: 3,
            got: s.c,
        });
    }
    if s.h == 0 || s.w == 0 || s.h % divisor != 0 || s.w % divisor != 0 {
        return Err(DaugError::IndivisibleSize {
            op,
            h: s.h,
            w: s.w,
            divisor,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub encoder: Vec<Conv2d>,
    pub decoder: Vec<Conv2d>,
}

impl Generator {
    pub const ENCODER_LAYERS: usize = 6;
    pub const DECODER_LAYERS: usize = 2;

    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_TAG_GENERATOR, 0));
        let mut u = uniform01(&mut rng);
        let encoder = vec![
            Conv2d::init(3, 32, 7, 1, 3, &mut u),
            Conv2d::init(32, 64, 4, 2, 1, &mut u),
            Conv2d::init(64, STYLE_DIM, 4, 2, 1, &mut u),
            Conv2d::init(STYLE_DIM, STYLE_DIM, 3, 1, 1, &mut u),
            Conv2d::init(STYLE_DIM, STYLE_DIM, 3, 1, 1, &mut u),
            Conv2d::init(STYLE_DIM, STYLE_DIM, 3, 1, 1, &mut u),
        ];
        let decoder = vec![
            Conv2d::init(STYLE_DIM, 64, 5, 1, 2, &mut u),
            Conv2d::init(64, 3, 5, 1, 2, &mut u),
        ];
        Self { encoder, decoder }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub fn tensors(&self) -> Vec<&Tensor4> {
        self.layers().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor4> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    /// Tensor names in the order of [`Generator::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (part, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for i in 0..layers.len() {
                names.push(format!("generator/{part}.{i}.weight"));
                names.push(format!("generator/{part}.{i}.bias"));
            }
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Conv2d::param_count).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            encoder: self.encoder.iter().map(|l| l.bind(g, trainable)).collect(),
            decoder: self.decoder.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }

    /// Embedding of a batch of 3-band images, without gradients.
    pub fn encode(&self, image: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let e = b.encode(&mut g, x)?;
        Ok(g.value(e).clone())
    }

    pub fn decode(&self, embedding: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(embedding.clone());
        let y = b.decode(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Content of `image` rendered with `code`; same size as the input.
    pub fn stylize(&self, image: &Tensor4, code: &StyleCode) -> Result<Tensor4> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = b.stylize(&mut g, x, code)?;
        Ok(g.value(y).clone())
    }

    /// Stylizes each sample of `batch` with its own code.
    pub fn stylize_each(&self, batch: &Tensor4, codes: &[&StyleCode]) -> Result<Tensor4> {
        if codes.len() != batch.shape().n {
            return Err(DaugError::Precondition(format!(
                "{} style codes for a batch of {}",
                codes.len(),
                batch.shape().n
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let e = b.encode(&mut g, x)?;
        let emb = g.value(e).clone();
        let mut parts = Vec::with_capacity(codes.len());
        for (i, code) in codes.iter().enumerate() {
            let ei = g.constant(emb.sample(i));
            let s = g.adain(ei, code.gamma(), code.beta(), NORM_EPS)?;
            parts.push(g.value(s).clone());
        }
        let styled = g.constant(Tensor4::stack(&parts)?);
        let y = b.decode(&mut g, styled)?;
        Ok(g.value(y).clone())
    }
}

/// Generator weights recorded on a graph.
#[derive(Clone, Debug)]
pub struct BoundGenerator {
    pub encoder: Vec<BoundConv>,
    pub decoder: Vec<BoundConv>,
}

impl BoundGenerator {
    pub fn ids(&self) -> Vec<VarId> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(BoundConv::ids)
            .collect()
    }

    pub fn encode(&self, g: &mut Graph, image: VarId) -> Result<VarId> {
        check_image("encode", g.value(image), 4)?;
        let mut x = image;
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = g.instance_norm(x, NORM_EPS)?;
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn decode(&self, g: &mut Graph, embedding: VarId) -> Result<VarId> {
        let c = g.value(embedding).shape().c;
        if c != STYLE_DIM {
            return Err(DaugError::Channels {
                op: "decode",
                expected: STYLE_DIM,
                got: c,
            });
        }
        let up = g.upsample2x(embedding);
        let x = self.decoder[0].forward(g, up)?;
        let x = g.layer_norm(x, NORM_EPS)?;
        let x = g.relu(x);
        let up = g.upsample2x(x);
        let x = self.decoder[1].forward(g, up)?;
        Ok(g.tanh(x))
    }

    pub fn stylize(&self, g: &mut Graph, image: VarId, code: &StyleCode) -> Result<VarId> {
        let e = self.encode(g, image)?;
        self.restyle(g, e, code)
    }

    /// AdaIN with `code` on an existing embedding, then decode.
    pub fn restyle(&self, g: &mut Graph, embedding: VarId, code: &StyleCode) -> Result<VarId> {
        let s = g.adain(embedding, code.gamma(), code.beta(), NORM_EPS)?;
        self.decode(g, s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub trunk: Vec<Conv2d>,
    pub heads: Vec<Conv2d>,
}

/// Output of one discriminator head for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Judgement {
    /// Sigmoid patch map, (N, 1, h, w).
    pub map: Tensor4,
    /// Map mean per sample.
    pub scores: Vec<f32>,
}

impl Discriminator {
    pub fn init(seed: u64, heads: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_TAG_TRUNK, 0));
        let mut u = uniform01(&mut rng);
        let trunk = vec![
            Conv2d::init(3, 64, 4, 2, 1, &mut u),
            Conv2d::init(64, 128, 4, 2, 1, &mut u),
            Conv2d::init(128, 256, 4, 2, 1, &mut u),
        ];
        let heads = (0..heads).map(|i| Self::new_head(derive_seed(seed, SEED_TAG_HEAD, i as u64))).collect();
        Self { trunk, heads }
    }

    pub fn new_head(seed: u64) -> Conv2d {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Conv2d::init(256, 1, 4, 1, 1, uniform01(&mut rng))
    }

    pub fn trunk_param_count(&self) -> usize {
        self.trunk.iter().map(Conv2d::param_count).sum()
    }

    pub fn head_param_count(&self) -> usize {
        Self::new_head(0).param_count()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + self.heads.iter().map(Conv2d::param_count).sum::<usize>()
    }

    /// Trunk tensors followed by every head's tensors.
    pub fn tensors(&self) -> Vec<&Tensor4> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .flat_map(|l| l.tensors())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor4> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.trunk.len() {
            names.push(format!("discriminator/trunk.{i}.weight"));
            names.push(format!("discriminator/trunk.{i}.bias"));
        }
        for i in 0..self.heads.len() {
            names.push(format!("discriminator/head.{i}.weight"));
            names.push(format!("discriminator/head.{i}.bias"));
        }
        names
    }

    /// Binds the trunk and the listed heads; other heads stay off the graph.
    pub fn bind(&self, g: &mut Graph, heads: &[usize], trainable: bool) -> Result<BoundDiscriminator> {
        let mut bound = Vec::with_capacity(heads.len());
        for &h in heads {
            let layer = self.heads.get(h).ok_or(DaugError::UnknownHead {
                head_id: h,
                len: self.heads.len(),
            })?;
            if !bound.iter().any(|(id, _)| *id == h) {
                bound.push((h, layer.bind(g, trainable)));
            }
        }
        Ok(BoundDiscriminator {
            trunk: self.trunk.iter().map(|l| l.bind(g, trainable)).collect(),
            heads: bound,
        })
    }

    /// Patch map and scores of head `head_id` for a batch.
    pub fn discriminate(&self, image: &Tensor4, head_id: usize) -> Result<Judgement> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &[head_id], false)?;
        let x = g.constant(image.clone());
        let map = b.map(&mut g, x, head_id)?;
        let scores = g.mean_per_sample(map);
        Ok(Judgement {
            map: g.value(map).clone(),
            scores: g.value(scores).data().to_vec(),
        })
    }
}

/// Discriminator weights recorded on a graph.
#[derive(Clone, Debug)]
pub struct BoundDiscriminator {
    pub trunk: Vec<BoundConv>,
    pub heads: Vec<(usize, BoundConv)>,
}

impl BoundDiscriminator {
    /// Ids of the trunk tensors, then of each bound head as `(head_id, ids)`.
    pub fn trunk_ids(&self) -> Vec<VarId> {
        self.trunk.iter().flat_map(BoundConv::ids).collect()
    }

    pub fn head_ids(&self) -> &[(usize, BoundConv)] {
        &self.heads
    }

    pub fn features(&self, g: &mut Graph, image: VarId) -> Result<VarId> {
        check_image("discriminate", g.value(image), 1)?;
        let mut x = image;
        for (i, layer) in self.trunk.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i > 0 {
                x = g.instance_norm(x, NORM_EPS)?;
            }
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        Ok(x)
    }

    pub fn head(&self, g: &mut Graph, features: VarId, head_id: usize) -> Result<VarId> {
        let (_, layer) = self
            .heads
            .iter()
            .find(|(h, _)| *h == head_id)
            .ok_or(DaugError::UnknownHead {
                head_id,
                len: self.heads.len(),
            })?;
        let logits = layer.forward(g, features)?;
        Ok(g.sigmoid(logits))
    }

    /// Sigmoid patch map of `head_id`.
    pub fn map(&self, g: &mut Graph, image: VarId, head_id: usize) -> Result<VarId> {
        let f = self.features(g, image)?;
        self.head(g, f, head_id)
    }

    /// Per-sample realness scores, (N, 1, 1, 1).
    pub fn scores(&self, g: &mut Graph, image: VarId, head_id: usize) -> Result<VarId> {
        let m = self.map(g, image, head_id)?;
        Ok(g.mean_per_sample(m))
    }
}

/// Registry, generator and discriminator: everything stage 1 learns or fixes.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleModel {
    pub registry: DomainRegistry,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl StyleModel {
    /// Fresh parameters for `registry`; one discriminator head per domain.
    pub fn init(seed: u64, registry: DomainRegistry) -> Self {
        let heads = registry.len();
        Self {
            registry,
            generator: Generator::init(seed),
            discriminator: Discriminator::init(seed, heads),
        }
    }

    /// Registers a new domain with its own style code and a freshly
    /// initialized head, both drawn from `seed`. Nothing existing changes.
    pub fn add_domain(&mut self, name: &str, role: DomainRole, seed: u64) -> Result<usize> {
        let head_id = self
            .registry
            .register(name, role, derive_seed(seed, SEED_TAG_HEAD, u64::MAX))?;
        self.discriminator.heads.push(Discriminator::new_head(seed));
        debug_assert_eq!(self.discriminator.heads.len(), self.registry.len());
        Ok(head_id)
    }

    pub fn stylize_as(&self, image: &Tensor4, domain: usize) -> Result<Tensor4> {
        let code = &self.registry.get(domain)?.code;
        self.generator.stylize(image, code)
    }
}
