//! Learnable parameters, tape binding, decoders and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::backbone::{assign_all, kmeans_pp_init, name_seed, BackboneVars, ChainPool, EmbeddingMode, EmbeddingSource};
use crate::config::{Config, Decoder, GateMode};
use crate::data::{EntityId, RelationId, TkgDataset};
use crate::error::{Error, Result};
use crate::memory::{EmaVariant, Operator, OperatorKind, OperatorVars, Reader};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"TKGMCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Operator,
    Gate,
    Backbone,
    Decoder,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Operator => "operator",
            ParamGroup::Gate => "gate",
            ParamGroup::Backbone => "backbone",
            ParamGroup::Decoder => "decoder",
        }
    }

    fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("memory") => ParamGroup::Operator,
            Some("gate") => ParamGroup::Gate,
            Some("decoder") => ParamGroup::Decoder,
            _ => ParamGroup::Backbone,
        }
    }
}

/// Named learnable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParameterSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.values[i])
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        ParamGroup::of(&self.names[i])
    }

    /// Learnable scalar count per group.
    pub fn group_counts(&self) -> BTreeMap<ParamGroup, usize> {
        let mut m = BTreeMap::new();
        for (i, v) in self.values.iter().enumerate() {
            *m.entry(self.group(i)).or_insert(0) += v.len();
        }
        m
    }

    pub fn total(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn norms(&self) -> String {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| format!("{n}={:.4e}", v.norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn push(&mut self, name: &str, value: Tensor) {
        self.names.push(name.to_string());
        self.values.push(value);
    }
}

/// Parameter shapes for a config over `n` entities and `r` relations
/// (inverse relations included).
pub fn param_shapes(cfg: &Config, n: usize, r: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();
    if cfg.use_memory {
        for (name, shape) in cfg.operator.param_shapes(d, n) {
            v.push((name.to_string(), shape));
        }
        if cfg.gate == GateMode::Adaptive {
            v.push(("gate.w_g".into(), vec![d, 2 * d]));
        }
    }
    v.push(("backbone.relations".into(), vec![r, d]));
    v.push(("backbone.chain_w".into(), vec![d, 2 * d]));
    v.push(("backbone.chain_b".into(), vec![d]));
    if cfg.chain_pool == ChainPool::Attention {
        v.push(("backbone.chain_attn".into(), vec![d]));
    }
    v.push(("backbone.w1".into(), vec![d, 2 * d]));
    v.push(("backbone.w2".into(), vec![d, d]));
    if cfg.use_prior {
        v.push(("backbone.psi_w".into(), vec![d, 2 * d]));
        v.push(("backbone.psi_b".into(), vec![d]));
    }
    v.push(("backbone.codebook".into(), vec![cfg.clusters, d]));
    if cfg.decoder == Decoder::ConvTranslational {
        v.push(("decoder.kernel".into(), vec![2 * cfg.kernel, cfg.filters]));
        v.push(("decoder.kernel_b".into(), vec![cfg.filters]));
        v.push(("decoder.fc".into(), vec![d, d * cfg.filters]));
        v.push(("decoder.fc_b".into(), vec![d]));
    }
    v
}

/// Parameters bound to one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    pub backbone: BackboneVars,
    pub operator: Option<OperatorVars>,
    pub gate: Option<Var>,
    pub decoder: Option<[Var; 4]>,
}

/// Parameters plus the frozen embedding table.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub params: ParameterSet,
    embeddings: EmbeddingSource,
    num_relations: usize,
    seen_in_training: Vec<bool>,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (fan_out, fan_in) = (shape[0], shape[1]);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl Model {
    /// Fresh model for a dataset. The master seed drives embedding hashing,
    /// initialisation and codebook seeding through separate streams.
    pub fn new(cfg: &Config, dataset: &TkgDataset) -> Result<Self> {
        cfg.validate()?;
        let mode = match &cfg.embeddings {
            Some(p) => EmbeddingMode::File(p.clone()),
            None => EmbeddingMode::Hashed { seed: cfg.seed },
        };
        let embeddings = EmbeddingSource::build(&mode, dataset.entities(), cfg.dim)?;
        Self::with_embeddings(cfg, dataset, embeddings)
    }

    pub fn with_embeddings(cfg: &Config, dataset: &TkgDataset, embeddings: EmbeddingSource) -> Result<Self> {
        cfg.validate()?;
        let n = dataset.num_entities();
        let r = dataset.num_relations();
        if embeddings.table().shape() != [n, cfg.dim] {
            return Err(Error::Dimension {
                op: "embedding table",
                lhs: embeddings.table().shape().to_vec(),
                rhs: vec![n, cfg.dim],
            });
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "init"));
        let mut km_rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "kmeans"));
        let mut params = ParameterSet {
            names: vec![],
            values: vec![],
        };
        for (name, shape) in param_shapes(cfg, n, r) {
            let value = match name.as_str() {
                "memory.rho" => Tensor::zeros(&shape),
                "backbone.codebook" => kmeans_pp_init(embeddings.table(), cfg.clusters, &mut km_rng)?,
                "backbone.relations" => {
                    let s = 1.0 / (cfg.dim as f64).sqrt();
                    let data = (0..shape[0] * shape[1])
                        .map(|_| s * init_rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Tensor::new(shape.clone(), data)?
                }
                "backbone.chain_attn" => {
                    let data = (0..shape[0]).map(|_| init_rng.random_range(-0.1..0.1)).collect();
                    Tensor::new(shape.clone(), data)?
                }
                _ if shape.len() == 2 => xavier(&mut init_rng, &shape),
                _ => Tensor::zeros(&shape),
            };
            params.push(&name, value);
        }
        let mut seen = vec![false; n];
        if dataset.bounds().is_some() {
            for e in dataset.train_entities()? {
                seen[e] = true;
            }
        } else {
            seen.fill(true);
        }
        Ok(Self {
            config: cfg.clone(),
            params,
            embeddings,
            num_relations: r,
            seen_in_training: seen,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.embeddings.table().rows()
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn embeddings(&self) -> &EmbeddingSource {
        &self.embeddings
    }

    pub fn seen_in_training(&self, e: EntityId) -> bool {
        self.seen_in_training[e]
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Lookup {
            kind: "parameter",
            name: name.into(),
        })
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get("backbone.codebook").expect("codebook")
    }

    pub fn cluster_assignments(&self) -> Vec<usize> {
        assign_all(self.embeddings.table(), self.codebook())
    }

    /// Decay logit used by entities absent from training under the
    /// per-entity variant: the mean logit of training cluster mates, or the
    /// mean over all training entities for a cluster without any.
    pub fn cluster_decay(&self, assignments: &[usize]) -> Vec<f64> {
        let k = self.config.clusters;
        let Some(rho) = self.params.get("memory.rho") else {
            return vec![0.0; k];
        };
        if self.config.operator != OperatorKind::Ema(EmaVariant::PerEntity) {
            return vec![rho.data()[0]; k];
        }
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        let (mut all_s, mut all_c) = (0.0, 0usize);
        for (e, &c) in assignments.iter().enumerate() {
            if self.seen_in_training[e] {
                sum[c] += rho.data()[e];
                cnt[c] += 1;
                all_s += rho.data()[e];
                all_c += 1;
            }
        }
        let global = if all_c > 0 { all_s / all_c as f64 } else { 0.0 };
        (0..k)
            .map(|c| if cnt[c] > 0 { sum[c] / cnt[c] as f64 } else { global })
            .collect()
    }

    /// Concrete operator for value-level updates.
    pub fn operator(&self) -> Option<Operator> {
        if !self.config.use_memory {
            return None;
        }
        let params = self
            .config
            .operator
            .param_shapes(self.dim(), self.num_entities())
            .iter()
            .map(|(n, _)| self.params.get(n).unwrap().clone())
            .collect();
        Some(Operator {
            kind: self.config.operator,
            params,
            heads: self.config.heads,
        })
    }

    /// Leaves for every parameter: trainable when `grad`, constants otherwise.
    pub fn bind(&self, tape: &mut Tape, grad: bool) -> Bound {
        let vars: Vec<Var> = self
            .params
            .values()
            .iter()
            .map(|v| if grad { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        let get = |n: &str| self.params.index(n).map(|i| vars[i]);
        let backbone = BackboneVars {
            chain_w: get("backbone.chain_w").unwrap(),
            chain_b: get("backbone.chain_b").unwrap(),
            chain_attn: get("backbone.chain_attn"),
            w1: get("backbone.w1").unwrap(),
            w2: get("backbone.w2").unwrap(),
            relations: get("backbone.relations").unwrap(),
            psi_w: get("backbone.psi_w"),
            psi_b: get("backbone.psi_b"),
            codebook: get("backbone.codebook").unwrap(),
        };
        let operator = self.config.use_memory.then(|| OperatorVars {
            kind: self.config.operator,
            vars: self
                .config
                .operator
                .param_shapes(self.dim(), self.num_entities())
                .iter()
                .map(|(n, _)| get(n).unwrap())
                .collect(),
            heads: self.config.heads,
        });
        let decoder = match self.config.decoder {
            Decoder::ConvTranslational => Some([
                get("decoder.kernel").unwrap(),
                get("decoder.kernel_b").unwrap(),
                get("decoder.fc").unwrap(),
                get("decoder.fc_b").unwrap(),
            ]),
            Decoder::BilinearDiagonal => None,
        };
        Bound {
            gate: get("gate.w_g"),
            vars,
            backbone,
            operator,
            decoder,
        }
    }

    /// Query vector for subject representation `z_s` and relation `r`;
    /// candidate scores are `Z · q`.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, z_s: Var, r: RelationId) -> Result<Var> {
        let hr = tape.row(bound.backbone.relations, r)?;
        match bound.decoder {
            None => tape.mul(z_s, hr),
            Some([kernel, kernel_b, fc, fc_b]) => {
                let x = tape.stack(&[z_s, hr])?;
                let cols = tape.im2col(x, self.config.kernel)?;
                let feat = tape.matmul(cols, kernel)?;
                let feat = tape.add_row(feat, kernel_b)?;
                let feat = tape.gelu(feat);
                let flat = tape.reshape(feat, &[self.dim() * self.config.filters])?;
                let q = tape.matmul(fc, flat)?;
                tape.add(q, fc_b)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.config.to_text());
        put_str(&mut out, &self.config.fingerprint());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, v) in self.params.names.iter().zip(&self.params.values) {
            put_str(&mut out, name);
            out.extend_from_slice(&(v.ndim() as u32).to_le_bytes());
            for &s in v.shape() {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path, dataset: &TkgDataset) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, dataset)
    }

    /// Rebuild a model for `dataset` from checkpoint bytes. Refuses any
    /// parameter whose name or shape differs from the rebuilt skeleton.
    pub fn from_bytes(bytes: &[u8], dataset: &TkgDataset) -> Result<Self> {
        Self::from_bytes_with(bytes, dataset, None)
    }

    /// As [`Model::from_bytes`], with an explicit embedding table in place of
    /// the one named by the stored configuration.
    pub fn from_bytes_with(bytes: &[u8], dataset: &TkgDataset, embeddings: Option<EmbeddingSource>) -> Result<Self> {
        let header = read_checkpoint(bytes)?;
        let mut model = match embeddings {
            Some(e) => Self::with_embeddings(&header.config, dataset, e)?,
            None => Self::new(&header.config, dataset)?,
        };
        if model.params.len() != header.params.len() {
            return Err(Error::Load(format!(
                "checkpoint has {} parameters, model expects {}",
                header.params.len(),
                model.params.len()
            )));
        }
        for (i, (name, value)) in header.params.into_iter().enumerate() {
            if model.params.names[i] != name {
                return Err(Error::Load(format!("parameter {i} is `{name}`, expected `{}`", model.params.names[i])));
            }
            if model.params.values[i].shape() != value.shape() {
                return Err(Error::Load(format!(
                    "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                    value.shape(),
                    model.params.values[i].shape()
                )));
            }
            model.params.values[i] = value;
        }
        Ok(model)
    }
}

/// Decoded checkpoint contents.
pub struct CheckpointInfo {
    pub config: Config,
    pub fingerprint: String,
    pub params: Vec<(String, Tensor)>,
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<CheckpointInfo> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Load("not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {version}")));
    }
    let read_str = |r: &mut Reader<'_>| -> Result<String> {
        let n = r.u32()? as usize;
        String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Load(e.to_string()))
    };
    let text = read_str(&mut r)?;
    let fingerprint = read_str(&mut r)?;
    let config = Config::parse(&text).map_err(|e| Error::Load(format!("embedded config: {e}")))?;
    if config.fingerprint() != fingerprint {
        return Err(Error::Load("config fingerprint does not match embedded config".into()));
    }
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = read_str(&mut r)?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len)?;
        params.push((name, Tensor::new(shape, data)?));
    }
    if !r.done() {
        return Err(Error::Load("trailing bytes after checkpoint".into()));
    }
    Ok(CheckpointInfo {
        config,
        fingerprint,
        params,
    })
}
