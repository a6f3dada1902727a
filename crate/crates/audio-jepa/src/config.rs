//! Run configuration.
//!
//! Files are TOML; every setting has a flat dotted name such as
//! `encoder.depth` or `optim.peak_lr`, and may be written either as a dotted
//! key or inside a `[section]`. Omitted keys take their defaults, command-line
//! `--set key=value` overrides win over the file, and unknown keys are
//! rejected. The resolved configuration is echoed as one `key = value` line
//! per setting, which is itself a valid config file.

use std::path::Path;

use ajepa_core::dsp::MelConfig;
use ajepa_core::jepa::OptimizerConfig;
use ajepa_core::probe::{Metric, ProbeConfig};
use ajepa_core::vit::ViTConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioSection {
    pub sample_rate: u32,
    /// Seconds; clips are cropped or zero-padded to this length.
    pub duration: f64,
    pub n_mels: usize,
    pub n_time_bins: usize,
    pub patch_side: usize,
    pub fmin: f64,
    /// Upper mel edge in Hz; Nyquist when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for AudioSection {
    fn default() -> Self {
        AudioSection {
            sample_rate: 32000,
            duration: 10.0,
            n_mels: 128,
            n_time_bins: 256,
            patch_side: 16,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSection {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl TransformerSection {
    fn encoder() -> Self {
        TransformerSection {
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
        }
    }

    fn predictor() -> Self {
        TransformerSection {
            embed_dim: 384,
            depth: 6,
            num_heads: 12,
            mlp_ratio: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub peak_lr: f64,
    pub init_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub tau_base: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        OptimSection {
            peak_lr: o.peak_lr,
            init_lr: o.init_lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            tau_base: o.tau_base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection {
            min_ratio: 0.4,
            max_ratio: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    /// Write a periodic checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 256,
            total_steps: 100_000,
            warmup_steps: 1000,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub k: usize,
    /// `cosine` or `euclidean`.
    pub metric: String,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            k: 5,
            metric: "cosine".into(),
            epochs: 50,
            lr: 1e-3,
            batch_size: 64,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    pub checkpoint_dir: String,
    pub log_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            manifest: None,
            checkpoint_dir: "checkpoints".into(),
            log_dir: "logs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub audio: AudioSection,
    pub encoder: TransformerSection,
    pub predictor: TransformerSection,
    pub optim: OptimSection,
    pub mask: MaskSection,
    pub train: TrainSection,
    pub probe: ProbeSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            audio: AudioSection::default(),
            encoder: TransformerSection::encoder(),
            predictor: TransformerSection::predictor(),
            optim: OptimSection::default(),
            mask: MaskSection::default(),
            train: TrainSection::default(),
            probe: ProbeSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Keys that may be absent from the echo because they default to "unset".
const OPTIONAL_KEYS: [&str; 2] = ["audio.fmax", "paths.manifest"];

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = RunConfig::default().flat().into_iter().map(|(k, _)| k).collect();
    keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
    keys
}

fn insert(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is a value, not a section")))?;
    }
    Err(Error::Config("empty key".into()))
}

/// Parse the right-hand side of `--set key=value`: a TOML value when it
/// parses as one, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Parse config text plus `key=value` overrides, then validate.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            insert(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let known = known_keys();
        let mut given = Vec::new();
        flatten("", &table, &mut given);
        if let Some((k, _)) = given.iter().find(|(k, _)| !known.contains(k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let mut merged = Table::try_from(RunConfig::default()).expect("config serializes to a table");
        for (k, v) in given {
            insert(&mut merged, &k, v)?;
        }
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` (or start from defaults when `None`) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(io_err(p))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Every setting as `(dotted key, value)`, sorted by key.
    pub fn flat(&self) -> Vec<(String, Value)> {
        let table = Table::try_from(self).expect("config serializes to a table");
        let mut out = Vec::new();
        flatten("", &table, &mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// One `key = value` line per setting; parses back to an equal config.
    pub fn echo(&self) -> String {
        self.flat().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn mel_config(&self) -> Result<MelConfig> {
        let a = &self.audio;
        let mut mel = MelConfig::from_geometry(a.sample_rate, a.duration, a.n_mels, a.n_time_bins)
            .map_err(|e| Error::Config(format!("audio: {e}")))?;
        mel.fmin = a.fmin;
        if let Some(f) = a.fmax {
            mel.fmax = f;
        }
        mel.log_floor = a.log_floor;
        mel.validate_for_patches(a.patch_side)
            .map_err(|e| Error::Config(format!("audio: {e}")))?;
        Ok(mel)
    }

    pub fn encoder_config(&self) -> ViTConfig {
        let e = &self.encoder;
        ViTConfig {
            input_dim: self.audio.patch_side * self.audio.patch_side,
            embed_dim: e.embed_dim,
            depth: e.depth,
            num_heads: e.num_heads,
            mlp_ratio: e.mlp_ratio,
            output_dim: None,
        }
    }

    pub fn predictor_config(&self) -> ViTConfig {
        let p = &self.predictor;
        ViTConfig {
            input_dim: self.encoder.embed_dim,
            embed_dim: p.embed_dim,
            depth: p.depth,
            num_heads: p.num_heads,
            mlp_ratio: p.mlp_ratio,
            output_dim: Some(self.encoder.embed_dim),
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optim;
        OptimizerConfig {
            peak_lr: o.peak_lr,
            init_lr: o.init_lr,
            warmup_steps: self.train.warmup_steps,
            total_steps: self.train.total_steps,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            tau_base: o.tau_base,
        }
    }

    pub fn mask_bounds(&self) -> (f64, f64) {
        (self.mask.min_ratio, self.mask.max_ratio)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let p = &self.probe;
        let metric = match p.metric.as_str() {
            "cosine" => Metric::Cosine,
            "euclidean" => Metric::Euclidean,
            other => {
                return Err(Error::Config(format!(
                    "probe.metric: must be `cosine` or `euclidean`, got `{other}`"
                )))
            }
        };
        Ok(ProbeConfig {
            k: p.k,
            metric,
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
            weight_decay: p.weight_decay,
            seed: self.seed,
        })
    }

    /// Seconds of audio per training batch.
    pub fn batch_audio_seconds(&self) -> f64 {
        self.train.batch_size as f64 * self.audio.duration
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.mel_config()?;
        for (name, cfg) in [("encoder", self.encoder_config()), ("predictor", self.predictor_config())] {
            if cfg.depth == 0 {
                return bad(format!("{name}.depth: must be at least 1"));
            }
            cfg.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        let (lo, hi) = self.mask_bounds();
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!(
                "mask.min_ratio/mask.max_ratio: need 0 < min_ratio <= max_ratio < 1, got [{lo}, {hi}]"
            ));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size: must be at least 1".into());
        }
        if self.train.warmup_steps >= self.train.total_steps {
            return bad(format!(
                "train.warmup_steps: must be below train.total_steps ({} >= {})",
                self.train.warmup_steps, self.train.total_steps
            ));
        }
        self.optimizer_config()
            .validate()
            .map_err(|e| Error::Config(format!("optim: {e}")))?;
        self.probe_config()?;
        if self.probe.k == 0 {
            return bad("probe.k: must be at least 1".into());
        }
        if self.probe.batch_size == 0 {
            return bad("probe.batch_size: must be at least 1".into());
        }
        Ok(())
    }
}
