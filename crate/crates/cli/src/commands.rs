//! Subcommand implementations.
//!
//! Every command resolves its full configuration (defaults, optional TOML
//! file, flag overrides), writes it with a hash into the output location
//! before doing any work, and is idempotent: completed outputs are skipped,
//! interrupted training runs are resumed from their latest checkpoint, and
//! mismatched reruns are refused.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use reldiff_core::ckpt::{config_hash, read_checkpoint, save_checkpoint, sha256_hex};
use reldiff_core::dataset::{build_dataset, load_manifest, manifest_hash, Manifest};
use reldiff_core::dit::ToyDiT;
use reldiff_core::latent::Latentizer;
use reldiff_core::probe::{ocp_accuracy, FeatureSource, ProbeConfig};
use reldiff_core::schedule::NoiseSchedule;
use reldiff_core::sim::SceneConfig;
use reldiff_core::train::{train, LossMode, TrainConfig, Trainer};
use reldiff_core::vfm::{pretrain_vfm, PretrainConfig, ToyVFM};

use crate::user_err;

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a balanced contact-prediction dataset of bouncing-ball clips
    GenData(GenDataArgs),
    /// Pretrain the video feature model by masked patch reconstruction
    PretrainVfm(PretrainArgs),
    /// Train the diffusion transformer, optionally with an alignment loss
    Train(TrainArgs),
    /// Fit the contact-prediction linear probe on frozen features
    Probe(ProbeArgs),
    /// Aggregate training runs into a markdown report with charts
    Report(ReportArgs),
}

pub fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::PretrainVfm(a) => pretrain(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Probe(a) => probe_cmd(a),
        Cmd::Report(a) => crate::report::report_cmd(a),
    }
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| user_err(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| user_err(format!("bad config {}: {e}", path.display())))
}

fn base_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> anyhow::Result<T> {
    match path {
        Some(p) => load_toml(p),
        None => Ok(T::default()),
    }
}

fn write_json_atomic(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn dataset_hash(root: &Path) -> anyhow::Result<(Manifest, String)> {
    let manifest = load_manifest(root)
        .map_err(|e| user_err(format!("dataset at {}: {e}", root.display())))?;
    let hash = manifest_hash(root)?;
    Ok((manifest, hash))
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Args)]
pub struct GenDataArgs {
    /// Output dataset directory
    #[arg(long, env = "RELDIFF_OUT")]
    out: PathBuf,
    /// Scene configuration TOML (defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target fraction of positive (contact) labels
    #[arg(long, default_value_t = 0.5)]
    balance: f64,
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let scene: SceneConfig = base_config(&a.config)?;
    if a.out.join("manifest.json").exists() {
        let (_, hash) = dataset_hash(&a.out)?;
        println!(
            "dataset already complete at {} (hash {})",
            a.out.display(),
            &hash[..12]
        );
        return Ok(());
    }
    let resolved = serde_json::json!({
        "command": "gen-data",
        "scene": scene,
        "samples": a.samples,
        "seed": a.seed,
        "balance": a.balance,
        "config_hash": config_hash(&(&scene, a.samples, a.seed, a.balance)),
    });
    write_json_atomic(&a.out.join("resolved_config.json"), &resolved)?;
    let manifest = build_dataset(&scene, a.samples, a.seed, a.balance, &a.out)?;
    let hash = manifest_hash(&a.out)?;
    println!(
        "wrote {} samples to {} (hash {})",
        manifest.samples.len(),
        a.out.display(),
        &hash[..12]
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain-vfm

#[derive(Args)]
pub struct PretrainArgs {
    /// Dataset directory produced by gen-data
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for the encoder checkpoint
    #[arg(long, env = "RELDIFF_OUT")]
    out: PathBuf,
    /// Pretraining configuration TOML (defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let ckpt_path = a.out.join("vfm.ckpt");
    if ckpt_path.exists() {
        println!("encoder already pretrained at {}", ckpt_path.display());
        return Ok(());
    }
    let (manifest, ds_hash) = dataset_hash(&a.dataset)?;
    let mut cfg: PretrainConfig = base_config(&a.config)?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.mask_ratio {
        cfg.mask_ratio = v;
    }
    if let Some(v) = a.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let (h, w) = manifest.config.resolution;
    cfg.vfm.video = (manifest.config.frames_context, 3, h, w);
    cfg.validate()?;

    let resolved = serde_json::json!({
        "command": "pretrain-vfm",
        "pretrain": cfg,
        "config_hash": config_hash(&cfg),
        "dataset_hash": ds_hash,
    });
    write_json_atomic(&a.out.join("resolved_config.json"), &resolved)?;

    let (mut vfm, rep) = pretrain_vfm(&a.dataset, &manifest, &cfg)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in rep.losses.iter().enumerate() {
        csv.push_str(&format!("{},{:.9}\n", i + 1, l));
    }
    std::fs::write(a.out.join("pretrain_metrics.csv"), csv)?;
    let header = serde_json::json!({
        "pretrain": cfg,
        "config_hash": config_hash(&cfg),
        "dataset_hash": ds_hash,
        "eval": {
            "final_train_loss": rep.final_train_loss,
            "eval_loss": rep.eval_loss,
            "baseline_loss": rep.baseline_loss,
        },
    });
    save_checkpoint(&ckpt_path, &header, &mut vfm)?;
    println!(
        "pretrained encoder: train {:.5}, held-out {:.5} vs mean-predictor {:.5} -> {}",
        rep.final_train_loss,
        rep.eval_loss,
        rep.baseline_loss,
        ckpt_path.display()
    );
    Ok(())
}

/// Rebuilds the frozen encoder from a pretrain checkpoint.
pub fn load_vfm(path: &Path) -> anyhow::Result<(ToyVFM<f32>, serde_json::Value)> {
    let (header, _) = read_checkpoint(path)
        .map_err(|e| user_err(format!("encoder checkpoint {}: {e}", path.display())))?;
    let cfg: PretrainConfig = serde_json::from_value(
        header
            .get("pretrain")
            .cloned()
            .ok_or_else(|| user_err(format!("{} is not an encoder checkpoint", path.display())))?,
    )?;
    let mut vfm = ToyVFM::new(cfg.vfm, &mut ChaCha8Rng::seed_from_u64(0))?;
    reldiff_core::ckpt::load_into(path, &mut vfm)?;
    Ok((vfm, header))
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Copy, ValueEnum)]
pub enum LossFlag {
    /// Denoising loss only
    None,
    /// Denoising + relational (pairwise-similarity) distillation
    Trd,
    /// Denoising + token-wise cosine alignment
    Repa,
}

impl From<LossFlag> for LossMode {
    fn from(f: LossFlag) -> Self {
        match f {
            LossFlag::None => LossMode::DiffOnly,
            LossFlag::Trd => LossMode::DiffTrd,
            LossFlag::Repa => LossMode::DiffRepa,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Pretrained encoder checkpoint (required unless --loss none)
    #[arg(long)]
    vfm: Option<PathBuf>,
    #[arg(long, env = "RELDIFF_OUT")]
    out: PathBuf,
    /// Training configuration TOML (defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    loss: Option<LossFlag>,
    /// Weight of the alignment term
    #[arg(long)]
    lambda: Option<f64>,
    /// Deadzone for relation differences
    #[arg(long)]
    margin: Option<f64>,
    /// 1-based transformer layer tapped for alignment
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    if a.out.join("final.ckpt").exists() {
        println!("run already complete at {}", a.out.display());
        return Ok(());
    }
    let (manifest, ds_hash) = dataset_hash(&a.dataset)?;
    let mut cfg: TrainConfig = base_config(&a.config)?;
    if let Some(v) = a.loss {
        cfg.mode = v.into();
    }
    if let Some(v) = a.lambda {
        cfg.loss.lambda = v;
    }
    if let Some(v) = a.margin {
        cfg.loss.margin = v;
    }
    if let Some(v) = a.depth {
        cfg.loss.align_depth = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    let (h, w) = manifest.config.resolution;
    let latentizer = Latentizer::default();
    cfg.dit.latent = latentizer.latent_dim((manifest.config.frames_context, 3, h, w));
    cfg.validate()?;

    let vfm = if cfg.mode.uses_vfm() {
        let path = a
            .vfm
            .as_ref()
            .ok_or_else(|| user_err("--vfm is required unless --loss none"))?;
        let (vfm, header) = load_vfm(path)?;
        if header.get("dataset_hash").and_then(|v| v.as_str()) != Some(ds_hash.as_str()) {
            eprintln!("warning: encoder was pretrained on a different dataset");
        }
        Some(vfm)
    } else {
        None
    };

    let vfm_file_hash = a
        .vfm
        .as_ref()
        .filter(|_| cfg.mode.uses_vfm())
        .map(|p| std::fs::read(p).map(|b| sha256_hex(&b)))
        .transpose()?;
    let resolved = serde_json::json!({
        "command": "train",
        "train": cfg,
        "config_hash": config_hash(&cfg),
        "dataset_hash": ds_hash,
        "vfm_checkpoint_hash": vfm_file_hash,
    });
    let resolved_path = a.out.join("resolved_config.json");
    if resolved_path.exists() {
        let prior: serde_json::Value = serde_json::from_slice(&std::fs::read(&resolved_path)?)?;
        if prior.get("config_hash") != resolved.get("config_hash")
            || prior.get("dataset_hash") != resolved.get("dataset_hash")
        {
            return Err(user_err(format!(
                "{} holds an unfinished run with a different configuration; \
                 pick a fresh output directory",
                a.out.display()
            )));
        }
    } else {
        write_json_atomic(&resolved_path, &resolved)?;
    }

    let mut trainer = Trainer::new(cfg, vfm)?;
    if let Some(ckpt) = latest_step_checkpoint(&a.out)? {
        trainer.resume(&ckpt).context("resuming from checkpoint")?;
        println!(
            "resumed from {} at step {}",
            ckpt.display(),
            trainer.step_count()
        );
    }
    let outcome = train(&mut trainer, &a.dataset, &manifest, &a.out)?;
    let last = outcome.metrics.last();
    println!(
        "trained {} steps -> {} (final l_total {:.5})",
        trainer.step_count(),
        outcome.final_checkpoint.display(),
        last.map(|m| m.l_total).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn latest_step_checkpoint(dir: &Path) -> anyhow::Result<Option<PathBuf>> {
    let mut best: Option<(usize, PathBuf)> = None;
    if dir.exists() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(step) = name
                .strip_prefix("step_")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                if best.as_ref().map_or(true, |(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

// ---------------------------------------------------------------------------
// probe

#[derive(Clone, Copy, ValueEnum)]
pub enum ProbeSource {
    /// Frozen pretrained encoder features
    Vfm,
    /// Hidden state of a trained diffusion transformer
    Dit,
    /// Hidden state of a freshly initialized transformer (baseline)
    DitUntrained,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output JSON file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    source: ProbeSource,
    /// Encoder checkpoint (vfm) or training-run final.ckpt (dit)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// 1-based transformer layer to read (dit sources)
    #[arg(long, default_value_t = 4)]
    layer: usize,
    /// Probe configuration TOML (defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_probe: Option<usize>,
    /// Initialization seed for --source dit-untrained
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

fn probe_cmd(a: ProbeArgs) -> anyhow::Result<()> {
    if a.out.exists() {
        println!("probe result already present at {}", a.out.display());
        return Ok(());
    }
    let (manifest, ds_hash) = dataset_hash(&a.dataset)?;
    let mut cfg: ProbeConfig = base_config(&a.config)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.t_probe {
        cfg.t_probe = v;
    }

    let latentizer = Latentizer::default();
    let (h, w) = manifest.config.resolution;
    let video_dim = (manifest.config.frames_context, 3, h, w);

    // owning storage for whichever model backs the feature source
    let mut checkpoint_hash = None;
    enum Backing {
        Vfm(ToyVFM<f32>),
        Dit(ToyDiT<f32>, NoiseSchedule),
    }
    let backing = match a.source {
        ProbeSource::Vfm => {
            let path = a
                .ckpt
                .as_ref()
                .ok_or_else(|| user_err("--ckpt is required for --source vfm"))?;
            checkpoint_hash = Some(sha256_hex(&std::fs::read(path)?));
            Backing::Vfm(load_vfm(path)?.0)
        }
        ProbeSource::Dit => {
            let path = a
                .ckpt
                .as_ref()
                .ok_or_else(|| user_err("--ckpt is required for --source dit"))?;
            checkpoint_hash = Some(sha256_hex(&std::fs::read(path)?));
            let (header, _) = read_checkpoint(path)?;
            let train_cfg: TrainConfig = serde_json::from_value(
                header.get("train").cloned().ok_or_else(|| {
                    user_err(format!("{} is not a training checkpoint", path.display()))
                })?,
            )?;
            let mut dit = ToyDiT::new(train_cfg.dit.clone(), &mut ChaCha8Rng::seed_from_u64(0));
            reldiff_core::ckpt::load_into(path, &mut dit)?;
            let schedule = NoiseSchedule::linear(train_cfg.dit.timesteps);
            Backing::Dit(dit, schedule)
        }
        ProbeSource::DitUntrained => {
            // mirror the trainer's initialization stream so this matches the
            // starting point of a run with the same seed
            let mut dit_cfg = reldiff_core::dit::DiTConfig::default();
            dit_cfg.latent = latentizer.latent_dim(video_dim);
            let mut rng = ChaCha8Rng::seed_from_u64(a.init_seed);
            let dit = ToyDiT::new(dit_cfg.clone(), &mut rng);
            let schedule = NoiseSchedule::linear(dit_cfg.timesteps);
            Backing::Dit(dit, schedule)
        }
    };
    let source = match &backing {
        Backing::Vfm(vfm) => FeatureSource::Vfm(vfm),
        Backing::Dit(dit, schedule) => FeatureSource::Dit {
            dit,
            latentizer: &latentizer,
            schedule,
            layer: a.layer,
        },
    };
    let label = match a.source {
        ProbeSource::DitUntrained => format!("dit-untrained-layer-{}", a.layer),
        _ => source.label(),
    };

    let result = ocp_accuracy(&a.dataset, &manifest, &source, &cfg)?;
    let out = serde_json::json!({
        "probe": result,
        "source": label,
        "dataset_hash": ds_hash,
        "checkpoint": a.ckpt.as_ref().map(|p| p.display().to_string()),
        "checkpoint_hash": checkpoint_hash,
        "probe_config": cfg,
    });
    write_json_atomic(&a.out, &out)?;
    println!(
        "{label}: accuracy {:.4} (95% CI {:.4}-{:.4}, n={}) -> {}",
        result.accuracy,
        result.ci_low,
        result.ci_high,
        result.n_test,
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    /// Output directory for report.md, summary.json, and charts
    #[arg(long, env = "RELDIFF_OUT")]
    pub out: PathBuf,
    /// Overwrite an existing report directory
    #[arg(long)]
    pub force: bool,
    /// Training run directories to aggregate
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}
