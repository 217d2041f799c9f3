//! Stage-1 training: pair sampling, alternating updates, schedule and
//! life-long extension.

use daug_nn::{Adam, AdamConfig, Graph, Tensor4, VarId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::StyleCheckpoint;
use crate::error::{DaugError, Result};
use crate::losses::{d_adv_var, g_adv_var, l1_var, weighted_sum, GeneratorTerms, LossWeights};
use crate::networks::StyleModel;
use crate::style::{derive_seed, DomainRegistry, DomainRole};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleTrainConfig {
    pub num_epochs: usize,
    pub decay_epoch: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub weights: LossWeights,
    pub seed: u64,
    /// Sample every pair with one of the checkpoint's new domains.
    pub lifelong: bool,
    /// Fixed epoch length; by default one epoch covers every patch once.
    pub steps_per_epoch: Option<usize>,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        Self {
            num_epochs: 25,
            decay_epoch: 15,
            base_lr: 1e-4,
            batch_size: 32,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            lifelong: false,
            steps_per_epoch: None,
        }
    }
}

impl StyleTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.decay_epoch && self.decay_epoch < self.num_epochs) {
            return Err(DaugError::Config(format!(
                "need 0 < decay_epoch ({}) < num_epochs ({})",
                self.decay_epoch, self.num_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(DaugError::Config("batch_size must be at least 1".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(DaugError::Config("steps_per_epoch must be at least 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(DaugError::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.base_lr as f32,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Constant rate until `decay_epoch`, then linear decay reaching zero at
/// `num_epochs`.
pub fn lr_at(epoch: usize, cfg: &StyleTrainConfig) -> Result<f64> {
    if epoch > cfg.num_epochs {
        return Err(DaugError::EpochOutOfRange {
            epoch,
            num_epochs: cfg.num_epochs,
        });
    }
    if epoch < cfg.decay_epoch {
        return Ok(cfg.base_lr);
    }
    let remaining = (cfg.num_epochs - epoch) as f64;
    let span = (cfg.num_epochs - cfg.decay_epoch) as f64;
    Ok(cfg.base_lr * (remaining / span))
}

/// Draws two distinct domains. With `new_domains`, the first comes from that
/// set and the second from all other registered domains.
pub fn sample_domain_pair(
    registry: &DomainRegistry,
    rng: &mut impl Rng,
    new_domains: Option<&[usize]>,
) -> Result<(usize, usize)> {
    let n = registry.len();
    if n < 2 {
        return Err(DaugError::TooFewDomains { need: 2, have: n });
    }
    let i = match new_domains {
        Some(set) => {
            if set.is_empty() {
                return Err(DaugError::Config("life-long sampling needs at least one new domain".into()));
            }
            let i = set[rng.gen_range(0..set.len())];
            registry.get(i)?;
            i
        }
        None => rng.gen_range(0..n),
    };
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Ok((i, j))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub pair: (usize, usize),
    pub lr: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub terms: GeneratorTerms,
}

fn finite(term: &'static str, value: f32) -> Result<f64> {
    let v = value as f64;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DaugError::NonFiniteLoss { term, value: v })
    }
}

/// Model plus both optimizers, advanced one pair-batch at a time.
pub struct StyleTrainer {
    pub state: StyleCheckpoint,
    pub weights: LossWeights,
}

impl StyleTrainer {
    pub fn new(state: StyleCheckpoint, weights: LossWeights) -> Self {
        Self { state, weights }
    }

    /// Fresh model and optimizers for `registry`.
    pub fn fresh(seed: u64, registry: DomainRegistry, cfg: &StyleTrainConfig) -> Self {
        let model = StyleModel::init(seed, registry);
        let opt_g = Adam::new(cfg.adam(), model.generator.tensors().iter().map(|t| t.shape()));
        let opt_d = Adam::new(cfg.adam(), model.discriminator.tensors().iter().map(|t| t.shape()));
        Self::new(
            StyleCheckpoint {
                model,
                opt_g,
                opt_d,
                epoch: 0,
                new_domains: Vec::new(),
            },
            cfg.weights,
        )
    }

    pub fn model(&self) -> &StyleModel {
        &self.state.model
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.opt_g.set_lr(lr as f32);
        self.state.opt_d.set_lr(lr as f32);
    }

    /// One discriminator update on detached fakes, then one generator update
    /// with the discriminator frozen. `a` belongs to domain `i`, `b` to `j`.
    pub fn train_step(&mut self, a: &Tensor4, b: &Tensor4, i: usize, j: usize) -> Result<(f64, GeneratorTerms, f64)> {
        if i == j {
            return Err(DaugError::Precondition(format!("pair ({i}, {j}) must use two distinct domains")));
        }
        let d_loss = self.discriminator_step(a, b, i, j)?;
        let (terms, g_loss) = self.generator_step(a, b, i, j)?;
        Ok((d_loss, terms, g_loss))
    }

    fn discriminator_step(&mut self, a: &Tensor4, b: &Tensor4, i: usize, j: usize) -> Result<f64> {
        let model = &self.state.model;
        let code_i = &model.registry.get(i)?.code;
        let code_j = &model.registry.get(j)?.code;
        let fake_a = model.generator.stylize(a, code_j)?;
        let fake_b = model.generator.stylize(b, code_i)?;

        let disc = &model.discriminator;
        let mut g = Graph::new();
        let bound = disc.bind(&mut g, &[i, j], true)?;
        let [a, b, fake_a, fake_b] = [a, b, &fake_a, &fake_b].map(|t| g.constant(t.clone()));
        let real_i = bound.scores(&mut g, a, i)?;
        let fake_i = bound.scores(&mut g, fake_b, i)?;
        let real_j = bound.scores(&mut g, b, j)?;
        let fake_j = bound.scores(&mut g, fake_a, j)?;
        let di = d_adv_var(&mut g, real_i, fake_i)?;
        let dj = d_adv_var(&mut g, real_j, fake_j)?;
        let sum = g.add(di, dj)?;
        let loss = g.scale(sum, self.weights.adv);
        let value = finite("discriminator adversarial", g.value(sum).item()?)?;
        if self.weights.adv == 0.0 {
            return Ok(0.0);
        }

        let grads = g.backward(loss)?;
        let mut ids: Vec<Option<VarId>> = bound.trunk_ids().into_iter().map(Some).collect();
        for h in 0..disc.heads.len() {
            match bound.head_ids().iter().find(|(id, _)| *id == h) {
                Some((_, conv)) => ids.extend(conv.ids().into_iter().map(Some)),
                None => ids.extend([None, None]),
            }
        }
        let grad_refs: Vec<Option<&Tensor4>> = ids.iter().map(|id| id.and_then(|id| grads.get(id))).collect();
        let mut params = self.state.model.discriminator.tensors_mut();
        self.state.opt_d.step_sparse(&mut params, &grad_refs)?;
        Ok(value)
    }

    fn generator_step(&mut self, a: &Tensor4, b: &Tensor4, i: usize, j: usize) -> Result<(GeneratorTerms, f64)> {
        let model = &self.state.model;
        let code_i = &model.registry.get(i)?.code;
        let code_j = &model.registry.get(j)?.code;
        let w = self.weights;

        let mut g = Graph::new();
        let gen = model.generator.bind(&mut g, true);
        let disc = model.discriminator.bind(&mut g, &[i, j], false)?;
        let a = g.constant(a.clone());
        let b = g.constant(b.clone());
        let emb_a = gen.encode(&mut g, a)?;
        let emb_b = gen.encode(&mut g, b)?;
        let fake_a = gen.restyle(&mut g, emb_a, code_j)?;
        let fake_b = gen.restyle(&mut g, emb_b, code_i)?;
        let self_a = gen.restyle(&mut g, emb_a, code_i)?;
        let self_b = gen.restyle(&mut g, emb_b, code_j)?;
        let cross_a = gen.stylize(&mut g, fake_a, code_i)?;
        let cross_b = gen.stylize(&mut g, fake_b, code_j)?;

        let score_fa = disc.scores(&mut g, fake_a, j)?;
        let score_fb = disc.scores(&mut g, fake_b, i)?;
        let adv_a = g_adv_var(&mut g, score_fa);
        let adv_b = g_adv_var(&mut g, score_fb);
        let adv = g.add(adv_a, adv_b)?;
        let ca = l1_var(&mut g, a, cross_a)?;
        let cb = l1_var(&mut g, b, cross_b)?;
        let cross = g.add(ca, cb)?;
        let sa = l1_var(&mut g, a, self_a)?;
        let sb = l1_var(&mut g, b, self_b)?;
        let self_recon = g.add(sa, sb)?;
        let ea = g.sobel_l1(a, fake_a)?;
        let eb = g.sobel_l1(b, fake_b)?;
        let edge = g.add(ea, eb)?;

        let terms = GeneratorTerms {
            adv: finite("adversarial", g.value(adv).item()?)?,
            cross: finite("cross reconstruction", g.value(cross).item()?)?,
            self_recon: finite("self reconstruction", g.value(self_recon).item()?)?,
            edge: finite("edge", g.value(edge).item()?)?,
        };
        let parts = [(adv, w.adv), (cross, w.cross), (self_recon, w.self_recon), (edge, w.edge)];
        let Some(loss) = weighted_sum(&mut g, &parts)? else {
            return Ok((terms, 0.0));
        };
        let total = finite("generator", g.value(loss).item()?)?;

        let grads = g.backward(loss)?;
        let ids = gen.ids();
        let grad_refs: Vec<Option<&Tensor4>> = ids.iter().map(|&id| grads.get(id)).collect();
        let mut params = self.state.model.generator.tensors_mut();
        self.state.opt_g.step_sparse(&mut params, &grad_refs)?;
        Ok((terms, total))
    }
}

/// Draws `count` samples (with replacement) from a stacked pool.
pub fn sample_batch(pool: &Tensor4, count: usize, rng: &mut impl Rng) -> Result<Tensor4> {
    let n = pool.shape().n;
    let picks: Vec<Tensor4> = (0..count).map(|_| pool.sample(rng.gen_range(0..n))).collect();
    Ok(Tensor4::stack(&picks)?)
}

/// Runs `cfg.num_epochs` epochs. `pools[d]` stacks every patch of domain
/// `d` (registry order) as (n, 3, s, s).
pub fn train_style(
    pools: &[Tensor4],
    trainer: &mut StyleTrainer,
    cfg: &StyleTrainConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    let registry = trainer.model().registry.clone();
    if pools.len() != registry.len() {
        return Err(DaugError::Precondition(format!(
            "{} patch pools for {} registered domains",
            pools.len(),
            registry.len()
        )));
    }
    for (pool, entry) in pools.iter().zip(registry.entries()) {
        if pool.shape().n == 0 || pool.numel() == 0 {
            return Err(DaugError::EmptyDomain(entry.name.clone()));
        }
    }
    let new_domains = trainer.state.new_domains.clone();
    let lifelong = cfg.lifelong.then_some(new_domains.as_slice());
    let total: usize = pools.iter().map(|p| p.shape().n).sum();
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| total.div_ceil(cfg.batch_size));
    trainer.weights = cfg.weights;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11, 0));
    let mut log = Vec::with_capacity(steps * cfg.num_epochs);
    for epoch in 0..cfg.num_epochs {
        let lr = lr_at(epoch, cfg)?;
        trainer.set_lr(lr);
        for _ in 0..steps {
            let (i, j) = sample_domain_pair(&registry, &mut rng, lifelong)?;
            let a = sample_batch(&pools[i], cfg.batch_size, &mut rng)?;
            let b = sample_batch(&pools[j], cfg.batch_size, &mut rng)?;
            let (d_loss, terms, g_loss) = trainer.train_step(&a, &b, i, j)?;
            let report = StepReport {
                epoch,
                pair: (i, j),
                lr,
                d_loss,
                g_loss,
                terms,
            };
            on_step(&report);
            log.push(report);
        }
        trainer.state.epoch = epoch + 1;
    }
    Ok(log)
}

/// Appends new domains (fresh codes and heads) to a trained checkpoint.
/// Old parameters and optimizer moments are kept; new heads start with
/// zero moments. Arms life-long sampling over the added domains.
pub fn extend_for_lifelong(
    mut ckpt: StyleCheckpoint,
    new_domains: &[(String, DomainRole)],
    seed: u64,
) -> Result<StyleCheckpoint> {
    for (k, (name, _)) in new_domains.iter().enumerate() {
        if ckpt.model.registry.index_of(name).is_some() || new_domains[..k].iter().any(|(n, _)| n == name) {
            return Err(DaugError::DuplicateDomain(name.clone()));
        }
    }
    let mut added = Vec::with_capacity(new_domains.len());
    for (k, (name, role)) in new_domains.iter().enumerate() {
        let id = ckpt.model.add_domain(name, *role, derive_seed(seed, 21, k as u64))?;
        let head = &ckpt.model.discriminator.heads[id];
        ckpt.opt_d.extend(head.shapes());
        added.push(id);
    }
    ckpt.new_domains = added;
    ckpt.epoch = 0;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> StyleTrainConfig {
        StyleTrainConfig::default()
    }

    #[test]
    fn schedule_values() {
        let c = cfg();
        assert_eq!(lr_at(0, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(10, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(15, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(20, &c).unwrap(), 5e-5);
        assert_eq!(lr_at(25, &c).unwrap(), 0.0);
        assert!(matches!(lr_at(26, &c), Err(DaugError::EpochOutOfRange { .. })));
    }

    #[test]
    fn config_invariants() {
        let mut c = cfg();
        c.decay_epoch = 25;
        assert!(c.validate().is_err());
        c.decay_epoch = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn pair_sampling_rules() {
        let mut r = DomainRegistry::new();
        r.register("a", DomainRole::Source, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_domain_pair(&r, &mut rng, None),
            Err(DaugError::TooFewDomains { .. })
        ));
        r.register("b", DomainRole::Target, 1).unwrap();
        for _ in 0..50 {
            let (i, j) = sample_domain_pair(&r, &mut rng, None).unwrap();
            assert_eq!(i.min(j), 0);
            assert_eq!(i.max(j), 1);
        }
        r.register("c", DomainRole::Target, 2).unwrap();
        for _ in 0..200 {
            let (i, j) = sample_domain_pair(&r, &mut rng, Some(&[2])).unwrap();
            assert_eq!(i, 2);
            assert_ne!(j, 2);
        }
    }
}
