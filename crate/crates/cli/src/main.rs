use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use daug_nn::Tensor4;
use daugnet::checkpoint::StyleCheckpoint;
use daugnet::data::{
    assemble_patchset, generate_synth_domains, preset_specs, read_dataset, registry_for, save_image, save_mask,
    write_dataset, DomainImage, PatchSet, SynthDomainSpec, SynthLayout, CLASSES,
};
use daugnet::daug::{predict_map, train_daugnet, ClassifierState, DAugConfig};
use daugnet::eval::{gray_world, hist_equalize, hist_match, zscore, EvalReport, IoUReport, Standardizer};
use daugnet::style::{derive_seed, DomainRegistry, DomainRole};
use daugnet::trainer::{extend_for_lifelong, train_style, StyleTrainConfig, StyleTrainer};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "daugnet", version, about = "Multi-domain style transfer and augmentor-driven segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed (required by the training commands unless set in --config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input checkpoint
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output path (file or directory, depending on the command)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated domain names
    #[arg(long, global = true, value_delimiter = ',')]
    domains: Vec<String>,
    /// Number of training epochs
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Disable the edge term of the generator objective
    #[arg(long, global = true)]
    no_edge_loss: bool,
    /// Probability that the augmentor restyles a batch
    #[arg(long, global = true)]
    diversify_prob: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-domain dataset
    SynthData,
    /// Cut a dataset into patches and print the per-domain census
    ExtractPatches {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the style-transfer networks on a dataset
    TrainStyle {
        #[arg(long)]
        data: PathBuf,
    },
    /// Add new domains to a style checkpoint and fine-tune on them
    ExtendDomains {
        #[arg(long)]
        data: PathBuf,
        /// Role of the added domains
        #[arg(long, default_value = "target")]
        role: DomainRole,
    },
    /// Render an image in the style of a registered domain
    Stylize {
        #[arg(long)]
        input: PathBuf,
        /// Domain whose style is applied
        #[arg(long)]
        style: String,
    },
    /// Train the segmentation classifier on diversified source batches
    TrainDaugnet {
        #[arg(long)]
        data: PathBuf,
        /// Classifier checkpoint to fine-tune from
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Predict class masks for one image
    Predict {
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a classifier on every labeled domain and write a JSON report
    Evaluate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Apply a colour standardization baseline to every domain of a dataset
    Standardize {
        #[arg(long)]
        data: PathBuf,
        /// gray-world, hist-equalize, zscore or hist-match
        #[arg(long)]
        method: Standardizer,
        /// Reference domain for hist-match
        #[arg(long)]
        reference: Option<String>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: Option<u64>,
    patch_size: usize,
    patch_overlap: usize,
    tile: usize,
    tile_overlap: usize,
    style: StyleTrainConfig,
    daug: DAugConfig,
    synth: SynthConfig,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthConfig {
    layout: SynthLayout,
    domains: Vec<SynthDomainSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            layout: SynthLayout {
                size: 512,
                ..SynthLayout::default()
            },
            domains: preset_specs(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            patch_size: daugnet::data::PATCH_SIZE,
            patch_overlap: daugnet::data::PATCH_OVERLAP,
            tile: 256,
            tile_overlap: 32,
            style: StyleTrainConfig::default(),
            daug: DAugConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} {} does not exist", path.display());
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_dir(), "{what} {} is not a directory", path.display());
    Ok(())
}

impl Global {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                require_file(path, "config")?;
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.no_edge_loss {
            cfg.style.weights.edge = 0.0;
        }
        if let Some(p) = self.diversify_prob {
            cfg.daug.diversify_prob = p;
        }
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required for this command")
    }

    fn checkpoint(&self) -> Result<&Path> {
        let p = self.checkpoint.as_deref().context("--checkpoint is required for this command")?;
        require_file(p, "checkpoint")?;
        Ok(p)
    }
}

fn seed_of(cfg: &RunConfig) -> Result<u64> {
    cfg.seed.context("training commands need --seed (or `seed` in the config)")
}

/// Applies `--epochs` to the stage-1 schedule, moving the decay start to
/// the same fraction of the run when it would no longer fit.
fn set_style_epochs(style: &mut StyleTrainConfig, epochs: usize) -> Result<()> {
    ensure!(epochs >= 2, "stage-1 training needs at least 2 epochs for its schedule, got {epochs}");
    if style.decay_epoch >= epochs {
        style.decay_epoch = (epochs * style.decay_epoch / style.num_epochs).clamp(1, epochs - 1);
    }
    style.num_epochs = epochs;
    Ok(())
}

fn select<'a>(domains: &'a [DomainImage], names: &[String]) -> Result<Vec<&'a DomainImage>> {
    if names.is_empty() {
        return Ok(domains.iter().collect());
    }
    names
        .iter()
        .map(|n| domains.iter().find(|d| &d.name == n).with_context(|| format!("dataset has no domain {n:?}")))
        .collect()
}

fn parent_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        require_dir(parent, "output directory")?;
    }
    Ok(())
}

fn progress(tag: &str, step: usize, every: usize, msg: impl FnOnce() -> String) {
    if step % every == 0 {
        eprintln!("[{tag}] step {step}: {}", msg());
    }
}

fn style_pools(set: &PatchSet, registry: &DomainRegistry) -> Result<Vec<Tensor4>> {
    Ok(set.pools(registry)?)
}

fn cmd_synth(g: &Global) -> Result<()> {
    let cfg = g.run_config()?;
    let out = g.out()?;
    let seed = seed_of(&cfg)?;
    let domains = generate_synth_domains(&cfg.synth.layout, &cfg.synth.domains, seed)?;
    write_dataset(out, &domains)?;
    eprintln!("wrote {} domains to {}", domains.len(), out.display());
    Ok(())
}

fn cmd_extract(g: &Global, data: &Path) -> Result<()> {
    require_dir(data, "dataset")?;
    let cfg = g.run_config()?;
    let domains = read_dataset(data)?;
    let registry = registry_for(&domains, 0)?;
    let set = assemble_patchset(&domains, &registry, cfg.patch_size, cfg.patch_overlap)?;
    let census: Vec<serde_json::Value> = registry
        .entries()
        .iter()
        .zip(set.census(registry.len()))
        .map(|(e, n)| serde_json::json!({ "domain": e.name, "role": e.role, "patches": n }))
        .collect();
    let text = serde_json::to_string_pretty(&census)?;
    match &g.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for p in &set.patches {
                let name = &registry.get(p.domain)?.name;
                let sub = dir.join(name);
                std::fs::create_dir_all(&sub)?;
                save_image(sub.join(format!("{}_{}.png", p.x, p.y)), &p.image)?;
            }
            std::fs::write(dir.join("census.json"), &text)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_train_style(g: &Global, data: &Path) -> Result<()> {
    require_dir(data, "dataset")?;
    let mut cfg = g.run_config()?;
    let out = g.out()?;
    parent_dir(out)?;
    let seed = seed_of(&cfg)?;
    if let Some(e) = g.epochs {
        set_style_epochs(&mut cfg.style, e)?;
    }
    cfg.style.seed = seed;
    cfg.style.lifelong = false;
    let all = read_dataset(data)?;
    let chosen: Vec<DomainImage> = select(&all, &g.domains)?.into_iter().cloned().collect();
    let registry = registry_for(&chosen, seed)?;
    let set = assemble_patchset(&chosen, &registry, cfg.patch_size, cfg.patch_overlap)?;
    let pools = style_pools(&set, &registry)?;
    let mut trainer = StyleTrainer::fresh(derive_seed(seed, 1, 0), registry, &cfg.style);
    let mut k = 0;
    train_style(&pools, &mut trainer, &cfg.style, |r| {
        k += 1;
        progress("train-style", k, 50, || {
            format!("epoch {} D {:.4} G {:.4} self {:.4}", r.epoch, r.d_loss, r.g_loss, r.terms.self_recon)
        });
    })?;
    trainer.state.save(out)?;
    eprintln!("saved style checkpoint to {}", out.display());
    Ok(())
}

fn cmd_extend(g: &Global, data: &Path, role: DomainRole) -> Result<()> {
    require_dir(data, "dataset")?;
    let mut cfg = g.run_config()?;
    let ckpt_path = g.checkpoint()?;
    let out = g.out()?;
    parent_dir(out)?;
    let seed = seed_of(&cfg)?;
    ensure!(!g.domains.is_empty(), "--domains must name the domains to add");
    if let Some(e) = g.epochs {
        set_style_epochs(&mut cfg.style, e)?;
    }
    cfg.style.seed = seed;
    cfg.style.lifelong = true;
    let ckpt = StyleCheckpoint::load(ckpt_path)?;
    let all = read_dataset(data)?;
    let new: Vec<(String, DomainRole)> = g.domains.iter().map(|n| (n.clone(), role)).collect();
    let extended = extend_for_lifelong(ckpt, &new, seed)?;
    let registry = extended.model.registry.clone();
    let names: Vec<String> = registry.names().into_iter().map(String::from).collect();
    let chosen: Vec<DomainImage> = select(&all, &names)?.into_iter().cloned().collect();
    let set = assemble_patchset(&chosen, &registry, cfg.patch_size, cfg.patch_overlap)?;
    let pools = style_pools(&set, &registry)?;
    let mut trainer = StyleTrainer::new(extended, cfg.style.weights);
    let mut k = 0;
    train_style(&pools, &mut trainer, &cfg.style, |r| {
        k += 1;
        progress("extend-domains", k, 50, || {
            format!("pair {:?} D {:.4} G {:.4}", r.pair, r.d_loss, r.g_loss)
        });
    })?;
    trainer.state.save(out)?;
    eprintln!("saved extended checkpoint ({} domains) to {}", registry.len(), out.display());
    Ok(())
}

fn cmd_stylize(g: &Global, input: &Path, style: &str) -> Result<()> {
    require_file(input, "input image")?;
    let ckpt = StyleCheckpoint::load(g.checkpoint()?)?;
    let out = g.out()?;
    parent_dir(out)?;
    let image = daugnet::data::load_image(input)?;
    let domain = ckpt.model.registry.by_name(style)?.head_id;
    let s = image.shape();
    ensure!(s.h % 4 == 0 && s.w % 4 == 0, "image sides must be multiples of 4, got {}x{}", s.h, s.w);
    save_image(out, &ckpt.model.stylize_as(&image, domain)?)?;
    Ok(())
}

fn cmd_train_daugnet(g: &Global, data: &Path, init: Option<&Path>) -> Result<()> {
    require_dir(data, "dataset")?;
    let mut cfg = g.run_config()?;
    let ckpt = StyleCheckpoint::load(g.checkpoint()?)?;
    let out = g.out()?;
    parent_dir(out)?;
    let seed = seed_of(&cfg)?;
    if let Some(p) = init {
        require_file(p, "initial classifier")?;
    }
    if let Some(e) = g.epochs {
        cfg.daug.epochs = e;
    }
    cfg.daug.seed = seed;
    let registry = &ckpt.model.registry;
    let all = read_dataset(data)?;
    let sources: Vec<DomainImage> = all
        .into_iter()
        .filter(|d| d.role == DomainRole::Source && d.mask.is_some())
        .collect();
    ensure!(!sources.is_empty(), "dataset has no labeled source domain");
    let set = assemble_patchset(&sources, registry, cfg.patch_size, cfg.patch_overlap)?;
    let init_state = init.map(ClassifierState::load).transpose()?;
    let mut k = 0;
    let (state, _) = train_daugnet(&set, registry, &ckpt.model.generator, &cfg.daug, init_state, |s| {
        k += 1;
        progress("train-daugnet", k, 25, || format!("epoch {} loss {:.4}", s.epoch, s.loss));
    })?;
    state.save(out)?;
    eprintln!("saved classifier to {}", out.display());
    Ok(())
}

fn cmd_predict(g: &Global, input: &Path) -> Result<()> {
    require_file(input, "input image")?;
    let cfg = g.run_config()?;
    let state = ClassifierState::load(g.checkpoint()?)?;
    let out = g.out()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let image = daugnet::data::load_image(input)?;
    let mask = predict_map(&image, &state.classifier, cfg.tile, cfg.tile_overlap)?;
    for (class, plane) in CLASSES.iter().zip(daugnet::data::class_planes(&mask)) {
        save_mask(out.join(format!("mask_{class}.png")), &plane)?;
    }
    Ok(())
}

fn cmd_evaluate(g: &Global, data: &Path) -> Result<()> {
    require_dir(data, "dataset")?;
    let cfg = g.run_config()?;
    let state = ClassifierState::load(g.checkpoint()?)?;
    let out = g.out()?;
    parent_dir(out)?;
    let all = read_dataset(data)?;
    let mut report = EvalReport::default();
    for d in select(&all, &g.domains)? {
        let Some(gt) = &d.mask else { continue };
        let pred = predict_map(&d.image, &state.classifier, cfg.tile, cfg.tile_overlap)?;
        let r = IoUReport::from_masks(&d.name, &pred, gt)?;
        eprintln!("{}: overall {:?}", d.name, r.overall);
        report.domains.push(r);
    }
    ensure!(!report.domains.is_empty(), "no labeled domain to evaluate");
    std::fs::write(out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_standardize(g: &Global, data: &Path, method: Standardizer, reference: Option<&str>) -> Result<()> {
    require_dir(data, "dataset")?;
    let out = g.out()?;
    let all = read_dataset(data)?;
    let reference = match method {
        Standardizer::HistMatch => {
            let name = reference.context("hist-match needs --reference <domain>")?;
            Some(all.iter().find(|d| d.name == name).with_context(|| format!("no domain {name:?}"))?.image.clone())
        }
        _ => None,
    };
    let mut converted = Vec::with_capacity(all.len());
    for d in &all {
        let image = match method {
            Standardizer::GrayWorld => gray_world(&d.image)?,
            Standardizer::HistEqualize => hist_equalize(&d.image)?,
            // z-scores are stored as z/3 so that +-3 sigma spans the 8-bit range
            Standardizer::Zscore => zscore(&d.image)?.map(|z| (z / 3.0).clamp(-1.0, 1.0)),
            Standardizer::HistMatch => hist_match(&d.image, reference.as_ref().expect("checked above"))?,
        };
        converted.push(DomainImage { image, ..d.clone() });
    }
    write_dataset(out, &converted)?;
    Ok(())
}

fn check_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DAUG_THREADS") {
        let n: usize = v.parse().with_context(|| format!("DAUG_THREADS must be a positive integer, got {v:?}"))?;
        ensure!(n >= 1, "DAUG_THREADS must be at least 1");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    check_threads()?;
    let g = &cli.global;
    match &cli.command {
        Command::SynthData => cmd_synth(g),
        Command::ExtractPatches { data } => cmd_extract(g, data),
        Command::TrainStyle { data } => cmd_train_style(g, data),
        Command::ExtendDomains { data, role } => cmd_extend(g, data, *role),
        Command::Stylize { input, style } => cmd_stylize(g, input, style),
        Command::TrainDaugnet { data, init } => cmd_train_daugnet(g, data, init.as_deref()),
        Command::Predict { input } => cmd_predict(g, input),
        Command::Evaluate { data } => cmd_evaluate(g, data),
        Command::Standardize { data, method, reference } => cmd_standardize(g, data, *method, reference.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
