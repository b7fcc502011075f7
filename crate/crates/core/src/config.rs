//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backbone::ChainPool;
use crate::error::{Error, Result};
use crate::memory::OperatorKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoder {
    ConvTranslational,
    BilinearDiagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Timing {
    Before,
    After,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Adaptive,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    /// Known-true objects of the same `(s, r, t)`.
    Timestamp,
    /// Known-true objects of `(s, r)` at any time.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectOn {
    All,
    Emerging,
}

/// Every tunable of a run. Precedence: defaults, then config file, then
/// command-line overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: Option<PathBuf>,
    pub has_header: bool,
    pub split: (f64, f64, f64),
    pub embeddings: Option<PathBuf>,

    pub synth_types: usize,
    pub synth_entities_per_type: usize,
    pub synth_relations_per_type: usize,
    pub synth_timestamps: usize,
    pub synth_drift: f64,
    pub synth_emerging: f64,
    pub synth_facts_per_entity: f64,
    pub synth_noise: f64,

    pub dim: usize,
    pub clusters: usize,
    pub chain_len: usize,
    pub chain_top: usize,
    pub chain_pool: ChainPool,
    pub operator: OperatorKind,
    pub heads: usize,
    pub buffer: usize,
    pub decoder: Decoder,
    pub filters: usize,
    pub kernel: usize,
    pub timing: Timing,
    pub use_prior: bool,
    pub use_memory: bool,
    pub gate: GateMode,
    pub detach: bool,
    pub lambda: f64,

    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub horizon: f64,
    pub select_on: SelectOn,

    pub filter: FilterMode,
    pub out: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: None,
            has_header: false,
            split: (0.8, 0.1, 0.1),
            embeddings: None,
            synth_types: 4,
            synth_entities_per_type: 50,
            synth_relations_per_type: 3,
            synth_timestamps: 60,
            synth_drift: 0.3,
            synth_emerging: 0.2,
            synth_facts_per_entity: 0.5,
            synth_noise: 0.05,
            dim: 32,
            clusters: 8,
            chain_len: 10,
            chain_top: 0,
            chain_pool: ChainPool::Mean,
            operator: OperatorKind::Ema(crate::memory::EmaVariant::Shared),
            heads: 4,
            buffer: 16,
            decoder: Decoder::ConvTranslational,
            filters: 32,
            kernel: 3,
            timing: Timing::Before,
            use_prior: true,
            use_memory: true,
            gate: GateMode::Adaptive,
            detach: true,
            lambda: 0.1,
            epochs: 200,
            patience: 10,
            lr: 1e-3,
            seed: 0,
            horizon: 100.0,
            select_on: SelectOn::All,
            filter: FilterMode::Timestamp,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("invalid value `{v}` for `{key}`"))
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "data",
        "has_header",
        "split",
        "embeddings",
        "synth_types",
        "synth_entities_per_type",
        "synth_relations_per_type",
        "synth_timestamps",
        "synth_drift",
        "synth_emerging",
        "synth_facts_per_entity",
        "synth_noise",
        "dim",
        "clusters",
        "chain_len",
        "chain_top",
        "chain_pool",
        "operator",
        "heads",
        "buffer",
        "decoder",
        "filters",
        "kernel",
        "timing",
        "use_prior",
        "use_memory",
        "gate",
        "detach",
        "lambda",
        "epochs",
        "patience",
        "lr",
        "seed",
        "horizon",
        "select_on",
        "filter",
        "out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "has_header" => self.has_header = parse_bool(key, v)?,
            "split" => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| parse_num::<f64>(key, p.trim()))
                    .collect::<Result<_>>()?;
                let [a, b, c] = parts[..] else {
                    return Err(bad(key, v));
                };
                self.split = (a, b, c);
            }
            "embeddings" => self.embeddings = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth_types" => self.synth_types = parse_num(key, v)?,
            "synth_entities_per_type" => self.synth_entities_per_type = parse_num(key, v)?,
            "synth_relations_per_type" => self.synth_relations_per_type = parse_num(key, v)?,
            "synth_timestamps" => self.synth_timestamps = parse_num(key, v)?,
            "synth_drift" => self.synth_drift = parse_num(key, v)?,
            "synth_emerging" => self.synth_emerging = parse_num(key, v)?,
            "synth_facts_per_entity" => self.synth_facts_per_entity = parse_num(key, v)?,
            "synth_noise" => self.synth_noise = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "clusters" => self.clusters = parse_num(key, v)?,
            "chain_len" => self.chain_len = parse_num(key, v)?,
            "chain_top" => self.chain_top = parse_num(key, v)?,
            "chain_pool" => {
                self.chain_pool = match v {
                    "mean" => ChainPool::Mean,
                    "attention" => ChainPool::Attention,
                    _ => return Err(bad(key, v)),
                }
            }
            "operator" => self.operator = OperatorKind::parse(v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "buffer" => self.buffer = parse_num(key, v)?,
            "decoder" => {
                self.decoder = match v {
                    "conv" => Decoder::ConvTranslational,
                    "bilinear" => Decoder::BilinearDiagonal,
                    _ => return Err(bad(key, v)),
                }
            }
            "filters" => self.filters = parse_num(key, v)?,
            "kernel" => self.kernel = parse_num(key, v)?,
            "timing" => {
                self.timing = match v {
                    "before" => Timing::Before,
                    "after" => Timing::After,
                    _ => return Err(bad(key, v)),
                }
            }
            "use_prior" => self.use_prior = parse_bool(key, v)?,
            "use_memory" => self.use_memory = parse_bool(key, v)?,
            "gate" => {
                self.gate = match v {
                    "adaptive" => GateMode::Adaptive,
                    "constant" => GateMode::Constant,
                    _ => return Err(bad(key, v)),
                }
            }
            "detach" => self.detach = parse_bool(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "horizon" => self.horizon = parse_num(key, v)?,
            "select_on" => {
                self.select_on = match v {
                    "all" => SelectOn::All,
                    "emerging" => SelectOn::Emerging,
                    _ => return Err(bad(key, v)),
                }
            }
            "filter" => {
                self.filter = match v {
                    "timestamp" => FilterMode::Timestamp,
                    "static" => FilterMode::Static,
                    _ => return Err(bad(key, v)),
                }
            }
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "data" => path(&self.data),
            "has_header" => self.has_header.to_string(),
            "split" => format!("{},{},{}", self.split.0, self.split.1, self.split.2),
            "embeddings" => path(&self.embeddings),
            "synth_types" => self.synth_types.to_string(),
            "synth_entities_per_type" => self.synth_entities_per_type.to_string(),
            "synth_relations_per_type" => self.synth_relations_per_type.to_string(),
            "synth_timestamps" => self.synth_timestamps.to_string(),
            "synth_drift" => self.synth_drift.to_string(),
            "synth_emerging" => self.synth_emerging.to_string(),
            "synth_facts_per_entity" => self.synth_facts_per_entity.to_string(),
            "synth_noise" => self.synth_noise.to_string(),
            "dim" => self.dim.to_string(),
            "clusters" => self.clusters.to_string(),
            "chain_len" => self.chain_len.to_string(),
            "chain_top" => self.chain_top.to_string(),
            "chain_pool" => match self.chain_pool {
                ChainPool::Mean => "mean",
                ChainPool::Attention => "attention",
            }
            .into(),
            "operator" => self.operator.name().into(),
            "heads" => self.heads.to_string(),
            "buffer" => self.buffer.to_string(),
            "decoder" => match self.decoder {
                Decoder::ConvTranslational => "conv",
                Decoder::BilinearDiagonal => "bilinear",
            }
            .into(),
            "filters" => self.filters.to_string(),
            "kernel" => self.kernel.to_string(),
            "timing" => match self.timing {
                Timing::Before => "before",
                Timing::After => "after",
            }
            .into(),
            "use_prior" => self.use_prior.to_string(),
            "use_memory" => self.use_memory.to_string(),
            "gate" => match self.gate {
                GateMode::Adaptive => "adaptive",
                GateMode::Constant => "constant",
            }
            .into(),
            "detach" => self.detach.to_string(),
            "lambda" => self.lambda.to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "lr" => self.lr.to_string(),
            "seed" => self.seed.to_string(),
            "horizon" => self.horizon.to_string(),
            "select_on" => match self.select_on {
                SelectOn::All => "all",
                SelectOn::Emerging => "emerging",
            }
            .into(),
            "filter" => match self.filter {
                FilterMode::Timestamp => "timestamp",
                FilterMode::Static => "static",
            }
            .into(),
            "out" => self.out.display().to_string(),
            _ => return None,
        })
    }

    /// Apply `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?, path)?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, Path::new("<config>"))?;
        Ok(c)
    }

    /// Fully resolved config, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).unwrap());
        }
        s
    }

    /// Keys that determine parameter shapes and model semantics.
    pub const MODEL_KEYS: &'static [&'static str] = &[
        "dim",
        "clusters",
        "chain_len",
        "chain_top",
        "chain_pool",
        "operator",
        "heads",
        "buffer",
        "decoder",
        "filters",
        "kernel",
        "timing",
        "use_prior",
        "use_memory",
        "gate",
        "detach",
        "lambda",
    ];

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for k in Self::MODEL_KEYS {
            h.update(format!("{k}={}\n", self.get(k).unwrap()));
        }
        crate::backbone::hex(&h.finalize()[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.clusters == 0 || self.chain_len == 0 {
            return fail("dim, clusters and chain_len must be positive");
        }
        if self.operator == OperatorKind::Attention && (self.buffer == 0 || self.heads == 0 || self.dim % self.heads != 0) {
            return fail("attention needs buffer > 0 and heads dividing dim");
        }
        if self.decoder == Decoder::ConvTranslational && (self.filters == 0 || self.kernel % 2 == 0) {
            return fail("conv decoder needs filters > 0 and an odd kernel width");
        }
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) {
            return fail("lr must be positive and lambda non-negative");
        }
        if !(self.horizon > 0.0 && self.horizon <= 100.0) {
            return fail("horizon must be in (0, 100]");
        }
        Ok(())
    }
}
