//! The operator workflows behind each subcommand. Every function here takes
//! resolved arguments and returns a result value; printing and exit codes are
//! left to the binary.

use std::fmt;
use std::path::{Path, PathBuf};

use ajepa_core::dsp::{clip_to_patches, MelConfig, PatchGrid};
use ajepa_core::jepa::{train_step, JepaModel, TrainState};
use ajepa_core::probe::{self, ClassAccuracy, EmbeddingSet, ProbeReport};
use ajepa_core::rng::{self, streams};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::embeddings::{EmbeddingFile, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRow, Split};
use crate::metrics_log::{MetricRecord, MetricsLog};
use crate::synth::{self, SynthSpec};
use crate::{fsutil, wav};

/// `--config`, `--set` and `--seed`, shared by every command that takes a
/// configuration.
#[derive(Clone, Debug, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = self.sets.clone();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        out
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }

    /// Apply only the overrides to a stored configuration.
    fn resolve_over(&self, base: &RunConfig) -> Result<RunConfig> {
        if self.config.is_some() {
            return Err(Error::Config(
                "--config cannot be combined with a checkpoint's stored configuration; use --set".into(),
            ));
        }
        RunConfig::parse(&base.echo(), &self.overrides())
    }
}

fn load_grid(manifest: &Manifest, row: &ManifestRow, mel: &MelConfig, patch_side: usize) -> Result<PatchGrid> {
    let clip = wav::read_wav(&manifest.resolve(row))?;
    Ok(clip_to_patches(&clip, mel, patch_side)?)
}

/// Seeded epoch-wise shuffling: sample `g` of the stream is position
/// `g % n` of the permutation drawn for epoch `g / n`.
struct DataOrder {
    seed: u64,
    n: usize,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl DataOrder {
    fn new(seed: u64, n: usize) -> Self {
        DataOrder {
            seed,
            n,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn index(&mut self, g: u64) -> usize {
        let epoch = g / self.n as u64;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng::stream(self.seed, streams::SHUFFLE + epoch));
            self.epoch = Some(epoch);
        }
        self.perm[(g % self.n as u64) as usize]
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainArgs {
    pub config: ConfigArgs,
    pub manifest: Option<PathBuf>,
    /// Run directory; checkpoints go to `<out>/checkpoints`, logs to
    /// `<out>/logs`. Without it the configured paths are used.
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 = silent).
    pub progress_every: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub config: RunConfig,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps_run: u64,
    pub last: Option<MetricRecord>,
}

pub fn periodic_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

pub const FINAL_NAME: &str = "final.ckpt";
pub const LOG_NAME: &str = "metrics.jsonl";

pub fn pretrain(args: &PretrainArgs) -> Result<PretrainOutcome> {
    let (cfg, mut state) = match &args.resume {
        Some(p) => {
            let ckpt = checkpoint::load_checkpoint(p)?;
            let cfg = args.config.resolve_over(&ckpt.config)?;
            if cfg.encoder_config() != ckpt.config.encoder_config()
                || cfg.predictor_config() != ckpt.config.predictor_config()
            {
                return Err(Error::Config("model shape overrides are not allowed when resuming".into()));
            }
            let mut state = ckpt.state;
            state.optimizer = cfg.optimizer_config();
            state.mask_bounds = cfg.mask_bounds();
            state.seed = cfg.seed;
            (cfg, state)
        }
        None => {
            let cfg = args.config.resolve()?;
            let model = JepaModel::new(cfg.encoder_config(), cfg.predictor_config(), cfg.seed)?;
            let state = TrainState::new(model, cfg.optimizer_config(), cfg.mask_bounds(), cfg.seed)?;
            (cfg, state)
        }
    };
    let (ckpt_dir, log_dir) = match &args.out {
        Some(o) => (o.join("checkpoints"), o.join("logs")),
        None => (PathBuf::from(&cfg.paths.checkpoint_dir), PathBuf::from(&cfg.paths.log_dir)),
    };
    let manifest_path = args
        .manifest
        .clone()
        .or_else(|| cfg.paths.manifest.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no manifest given (--manifest or paths.manifest)".into()))?;
    let manifest = Manifest::read(&manifest_path)?;
    let mel = cfg.mel_config()?;
    let grids = manifest
        .split(Split::Train)
        .map(|r| load_grid(&manifest, r, &mel, cfg.audio.patch_side))
        .collect::<Result<Vec<_>>>()?;
    if grids.is_empty() {
        return Err(Error::Config(format!("{}: no training clips", manifest_path.display())));
    }

    if args.progress_every > 0 {
        eprint!("{}", cfg.echo());
    }
    fsutil::write_atomic(&log_dir.join("config.toml"), cfg.echo().as_bytes())?;
    let log_path = log_dir.join(LOG_NAME);
    let mut log = if args.resume.is_some() {
        MetricsLog::resume(&log_path, state.step)?
    } else {
        MetricsLog::create(&log_path)?
    };

    let total = cfg.train.total_steps;
    let batch_size = cfg.train.batch_size as u64;
    let mut order = DataOrder::new(cfg.seed, grids.len());
    let mut batch = Vec::with_capacity(cfg.train.batch_size);
    let start = state.step;
    let mut last = None;
    while state.step < total {
        batch.clear();
        let base = state.step * batch_size;
        batch.extend((0..batch_size).map(|b| grids[order.index(base + b)].clone()));
        let mut step_rng = state.step_rng();
        let metrics = train_step(&mut state, &batch, &mut step_rng)?;
        let rec = MetricRecord::from(&metrics);
        log.append(&rec)?;
        if args.progress_every > 0 && (state.step % args.progress_every == 0 || state.step == total) {
            eprintln!(
                "step {:>7}/{total}  loss {:.5}  var {:.3e}  lr {:.3e}  tau {:.5}",
                state.step, rec.loss, rec.target_variance_min, rec.lr, rec.tau
            );
        }
        last = Some(rec);
        let every = cfg.train.checkpoint_every;
        if every > 0 && state.step % every == 0 && state.step < total {
            checkpoint::save_checkpoint(&ckpt_dir.join(periodic_name(state.step)), &cfg, &state)?;
        }
    }
    let final_checkpoint = ckpt_dir.join(FINAL_NAME);
    checkpoint::save_checkpoint(&final_checkpoint, &cfg, &state)?;
    Ok(PretrainOutcome {
        config: cfg,
        final_checkpoint,
        log: log_path,
        steps_run: state.step - start,
        last,
    })
}

#[derive(Clone, Debug)]
pub struct EmbedOutcome {
    pub file: EmbeddingFile,
    /// Clips that could not be embedded, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Target-encoder embeddings of every manifest row, in manifest order.
/// Unreadable clips are skipped and reported.
pub fn embed_manifest(ckpt: &Checkpoint, manifest: &Manifest) -> Result<EmbedOutcome> {
    let cfg = &ckpt.config;
    let mel = cfg.mel_config()?;
    let enc = cfg.encoder_config();
    let mut records = Vec::with_capacity(manifest.rows.len());
    let mut failures = Vec::new();
    for row in &manifest.rows {
        let vector = wav::read_wav(&manifest.resolve(row)).and_then(|clip| {
            Ok(probe::embed_clip(&ckpt.state.model.tgt, &enc, &clip, &mel, cfg.audio.patch_side)?)
        });
        match vector {
            Ok(vector) => records.push(EmbeddingRecord {
                id: row.path.clone(),
                label: row.label,
                split: row.split,
                vector,
            }),
            Err(e) => failures.push((row.path.clone(), e.to_string())),
        }
    }
    Ok(EmbedOutcome {
        file: EmbeddingFile {
            source: ckpt.id(),
            records,
        },
        failures,
    })
}

/// Embed and write the file. The file holds every clip that succeeded even
/// when some failed.
pub fn embed(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<EmbedOutcome> {
    let ckpt = checkpoint::load_checkpoint(checkpoint)?;
    let manifest = Manifest::read(manifest)?;
    let outcome = embed_manifest(&ckpt, &manifest)?;
    outcome.file.write(out)?;
    Ok(outcome)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Knn,
    Linear,
}

impl std::str::FromStr for ProbeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "knn" => Ok(ProbeMode::Knn),
            "linear" => Ok(ProbeMode::Linear),
            other => Err(format!("mode must be `knn` or `linear`, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ProbeInput {
    Embeddings(PathBuf),
    Checkpoint { checkpoint: PathBuf, manifest: PathBuf },
}

#[derive(Clone, Debug)]
pub struct ProbeArgs {
    pub input: ProbeInput,
    pub mode: ProbeMode,
    pub config: ConfigArgs,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassResult {
    pub label: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl From<&ClassAccuracy> for ClassResult {
    fn from(c: &ClassAccuracy) -> Self {
        ClassResult {
            label: c.label,
            correct: c.correct,
            total: c.total,
            accuracy: c.accuracy(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResults {
    pub mode: ProbeMode,
    pub checkpoint: String,
    pub settings: ProbeSettings,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassResult>,
    /// Full-training-set cross-entropy after each epoch (linear mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_losses: Option<Vec<f64>>,
}

impl ProbeResults {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Run a probe on labeled train/test sets.
pub fn probe_sets(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    mode: ProbeMode,
    cfg: &RunConfig,
    source: String,
) -> Result<ProbeResults> {
    let pc = cfg.probe_config()?;
    let (report, settings, epoch_losses): (ProbeReport, ProbeSettings, _) = match mode {
        ProbeMode::Knn => (
            probe::knn_evaluate(train, test, &pc)?,
            ProbeSettings {
                k: Some(pc.k),
                metric: Some(cfg.probe.metric.clone()),
                optimizer: None,
                epochs: None,
                lr: None,
                batch_size: None,
                weight_decay: None,
                seed: None,
            },
            None,
        ),
        ProbeMode::Linear => {
            let lp = probe::linear_probe_train(train, &pc)?;
            (
                probe::linear_probe_evaluate(&lp, test)?,
                ProbeSettings {
                    k: None,
                    metric: None,
                    optimizer: Some("adam(beta1=0.9, beta2=0.999, eps=1e-8)".into()),
                    epochs: Some(pc.epochs),
                    lr: Some(pc.lr),
                    batch_size: Some(pc.batch_size),
                    weight_decay: Some(pc.weight_decay),
                    seed: Some(pc.seed),
                },
                Some(lp.epoch_losses.clone()),
            )
        }
    };
    Ok(ProbeResults {
        mode,
        checkpoint: source,
        settings,
        train_size: train.len(),
        test_size: test.len(),
        accuracy: report.accuracy,
        per_class: report.per_class.iter().map(ClassResult::from).collect(),
        epoch_losses,
    })
}

pub fn probe(args: &ProbeArgs) -> Result<ProbeResults> {
    let cfg = args.config.resolve()?;
    let file = match &args.input {
        ProbeInput::Embeddings(p) => EmbeddingFile::read(p)?,
        ProbeInput::Checkpoint { checkpoint, manifest } => {
            let ckpt = checkpoint::load_checkpoint(checkpoint)?;
            let outcome = embed_manifest(&ckpt, &Manifest::read(manifest)?)?;
            if let Some((id, why)) = outcome.failures.first() {
                return Err(Error::Config(format!("cannot embed `{id}`: {why}")));
            }
            outcome.file
        }
    };
    let train = file.split_set(Split::Train)?;
    let test = file.split_set(Split::Test)?;
    probe_sets(&train, &test, args.mode, &cfg, file.source.clone())
}

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub config: ConfigArgs,
    pub out: PathBuf,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

/// Write the synthetic corpus at the configured sample rate and duration.
pub fn synth_data(args: &SynthArgs) -> Result<Manifest> {
    let cfg = args.config.resolve()?;
    let spec = SynthSpec::new(
        args.train_per_class,
        args.test_per_class,
        cfg.audio.sample_rate,
        cfg.audio.duration,
        cfg.seed,
    );
    synth::synth_dataset(&spec, &args.out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub config: RunConfig,
    pub step: Option<u64>,
    pub context_encoder: usize,
    pub target_encoder: usize,
    pub predictor: usize,
    pub mask_token: usize,
}

impl Inspection {
    pub fn trainable(&self) -> usize {
        self.context_encoder + self.predictor + self.mask_token
    }

    /// Parameters needed at inference: the target encoder alone.
    pub fn inference(&self) -> usize {
        self.target_encoder
    }
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(s) => writeln!(f, "checkpoint step: {s}")?,
            None => writeln!(f, "no checkpoint; counts derived from the configuration")?,
        }
        writeln!(f, "\n[config]")?;
        f.write_str(&self.config.echo())?;
        writeln!(f, "\n[parameters]")?;
        for (name, n) in [
            ("context encoder", self.context_encoder),
            ("target encoder", self.target_encoder),
            ("predictor", self.predictor),
            ("mask token", self.mask_token),
        ] {
            writeln!(f, "{name:<18}{n:>12}  ({})", millions(n))?;
        }
        writeln!(
            f,
            "{:<18}{:>12}  ({})  context encoder + predictor + mask token",
            "trainable",
            self.trainable(),
            millions(self.trainable())
        )?;
        writeln!(
            f,
            "{:<18}{:>12}  ({})  target encoder only",
            "inference",
            self.inference(),
            millions(self.inference())
        )
    }
}

/// Summarize a checkpoint, or a configuration when no checkpoint is given.
pub fn inspect(checkpoint: Option<&Path>, config: &ConfigArgs) -> Result<Inspection> {
    match checkpoint {
        Some(p) => {
            let ckpt = checkpoint::load_checkpoint(p)?;
            let m = &ckpt.state.model;
            Ok(Inspection {
                step: Some(ckpt.state.step),
                context_encoder: ajepa_core::vit::count_parameters(&m.ctx),
                target_encoder: ajepa_core::vit::count_parameters(&m.tgt),
                predictor: ajepa_core::vit::count_parameters(&m.pred),
                mask_token: m.mask_token.len(),
                config: ckpt.config,
            })
        }
        None => {
            let cfg = config.resolve()?;
            let enc = cfg.encoder_config().parameter_count();
            Ok(Inspection {
                step: None,
                context_encoder: enc,
                target_encoder: enc,
                predictor: cfg.predictor_config().parameter_count(),
                mask_token: cfg.predictor.embed_dim,
                config: cfg,
            })
        }
    }
}
