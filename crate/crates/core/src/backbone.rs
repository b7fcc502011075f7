//! Static embeddings, type-level prior and interaction signal.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::data::{EntityId, RelationId, Timestamp, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where frozen entity vectors come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingMode {
    /// Unit-normalised Gaussian vectors seeded by a hash of the entity name.
    Hashed { seed: u64 },
    /// Name-keyed TSV: entity name, then `d` floats.
    File(std::path::PathBuf),
}

/// Frozen `[|E|, d]` table of static entity embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingSource {
    table: Tensor,
}

/// Stable 64-bit seed for a name.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub fn hashed_vector(seed: u64, name: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= n;
    }
    v
}

impl EmbeddingSource {
    pub fn build(mode: &EmbeddingMode, vocab: &Vocab, dim: usize) -> Result<Self> {
        match mode {
            EmbeddingMode::Hashed { seed } => {
                let mut data = Vec::with_capacity(vocab.len() * dim);
                for name in vocab.names() {
                    data.extend(hashed_vector(*seed, name, dim));
                }
                Ok(Self {
                    table: Tensor::matrix(vocab.len(), dim, data)?,
                })
            }
            EmbeddingMode::File(path) => Self::from_file(path, vocab, dim),
        }
    }

    fn from_file(path: &Path, vocab: &Vocab, dim: usize) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let name = cols.next().unwrap_or_default();
            let vals: Vec<f64> = cols
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if vals.len() != dim {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {dim} values, found {}", vals.len()),
                });
            }
            if let Some(id) = vocab.id(name) {
                rows[id] = Some(vals);
            }
        }
        let mut data = Vec::with_capacity(vocab.len() * dim);
        for (id, r) in rows.into_iter().enumerate() {
            let r = r.ok_or_else(|| Error::Lookup {
                kind: "embedding for entity",
                name: vocab.name(id).to_string(),
            })?;
            data.extend(r);
        }
        Ok(Self {
            table: Tensor::matrix(vocab.len(), dim, data)?,
        })
    }

    pub fn from_table(table: Tensor) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn static_embedding(&self, e: EntityId) -> Result<&[f64]> {
        if e >= self.table.rows() {
            return Err(Error::Lookup {
                kind: "entity id",
                name: e.to_string(),
            });
        }
        Ok(self.table.row(e))
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.table.data() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codebook center under squared Euclidean distance; ties go to the
/// smallest index.
pub fn assign_cluster(h: &[f64], centers: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 0);
    for k in 0..centers.rows() {
        let d = sq_dist(h, centers.row(k));
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

pub fn assign_all(table: &Tensor, centers: &Tensor) -> Vec<usize> {
    (0..table.rows()).map(|e| assign_cluster(table.row(e), centers)).collect()
}

/// k-means++ seeding followed by one Lloyd refinement pass. Empty clusters
/// are re-seeded to the embedding farthest from its assigned center.
pub fn kmeans_pp_init(points: &Tensor, k: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let n = points.rows();
    if n == 0 || k == 0 {
        return Err(Error::contract("k-means++ needs points and k > 0"));
    }
    let d = points.cols();
    let mut centers: Vec<Vec<f64>> = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            dist.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in dist.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        };
        centers.push(points.row(pick).to_vec());
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(points.row(i), centers.last().unwrap()));
        }
    }
    let mut flat: Vec<f64> = centers.concat();
    let current = Tensor::matrix(k, d, flat.clone())?;
    let assign = assign_all(points, &current);
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    let mut taken = vec![false; n];
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..d {
                flat[c * d + j] = sums[c * d + j] / counts[c] as f64;
            }
        } else {
            let far = (0..n)
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| {
                    let da = sq_dist(points.row(a), current.row(assign[a]));
                    let db = sq_dist(points.row(b), current.row(assign[b]));
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
            taken[far] = true;
            flat[c * d..(c + 1) * d].copy_from_slice(points.row(far));
        }
    }
    Tensor::matrix(k, d, flat)
}

/// Per-cluster running mean of interaction encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTable {
    dim: usize,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl PrototypeTable {
    pub fn new(clusters: usize, dim: usize) -> Self {
        Self {
            dim,
            sums: vec![0.0; clusters * dim],
            counts: vec![0; clusters],
        }
    }

    pub fn clusters(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, k: usize, enc: &[f64]) {
        for (s, x) in self.sums[k * self.dim..(k + 1) * self.dim].iter_mut().zip(enc) {
            *s += x;
        }
        self.counts[k] += 1;
    }

    /// Current prototype; zero for a cluster with no encodings yet.
    pub fn prototype(&self, k: usize) -> Vec<f64> {
        let c = self.counts[k];
        let s = &self.sums[k * self.dim..(k + 1) * self.dim];
        if c == 0 {
            vec![0.0; self.dim]
        } else {
            s.iter().map(|x| x / c as f64).collect()
        }
    }

    pub fn count(&self, k: usize) -> u64 {
        self.counts[k]
    }

    pub fn sum(&self, k: usize) -> &[f64] {
        &self.sums[k * self.dim..(k + 1) * self.dim]
    }

    pub(crate) fn raw(&self) -> (&[f64], &[u64]) {
        (&self.sums, &self.counts)
    }

    pub(crate) fn from_raw(dim: usize, sums: Vec<f64>, counts: Vec<u64>) -> Self {
        Self { dim, sums, counts }
    }
}

/// One observed fact from the point of view of the chain owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainFact {
    pub neighbor: EntityId,
    pub relation: RelationId,
    pub time: Timestamp,
}

/// Per-entity ring buffer of the most recent observed facts.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainStore {
    capacity: usize,
    chains: Vec<VecDeque<ChainFact>>,
}

impl ChainStore {
    pub fn new(entities: usize, capacity: usize) -> Self {
        Self {
            capacity,
            chains: vec![VecDeque::with_capacity(capacity); entities],
        }
    }

    pub fn push(&mut self, e: EntityId, f: ChainFact) {
        let c = &mut self.chains[e];
        if c.len() == self.capacity {
            c.pop_front();
        }
        c.push_back(f);
    }

    pub fn chain(&self, e: EntityId) -> &VecDeque<ChainFact> {
        &self.chains[e]
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entities(&self) -> usize {
        self.chains.len()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Keep the `top` chain facts whose relation is most cosine-similar to
/// `query_rel`, in time order. `top == 0` keeps the whole chain.
pub fn filter_chain(chain: &VecDeque<ChainFact>, relations: &Tensor, query_rel: RelationId, top: usize) -> Vec<ChainFact> {
    if top == 0 || chain.len() <= top {
        return chain.iter().copied().collect();
    }
    let q = relations.row(query_rel);
    let mut scored: Vec<(usize, f64)> = chain
        .iter()
        .enumerate()
        .map(|(i, f)| (i, cosine(relations.row(f.relation), q)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = scored[..top].iter().map(|(i, _)| *i).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| chain[i]).collect()
}

/// Chain pooling operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainPool {
    Mean,
    Attention,
}

/// Backbone parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    pub chain_w: Var,
    pub chain_b: Var,
    pub chain_attn: Option<Var>,
    pub w1: Var,
    pub w2: Var,
    pub relations: Var,
    pub psi_w: Option<Var>,
    pub psi_b: Option<Var>,
    pub codebook: Var,
}

/// Per-step projections shared by all chain encodings on one tape.
///
/// The per-fact encoder `GELU(W_c [h_n ‖ h_r] + b)` splits as
/// `W_a h_n + W_b h_r + b`, so the two halves are projected once per step.
#[derive(Clone, Copy, Debug)]
pub struct ChainProjections {
    entity_proj: Var,
    relation_proj: Var,
}

pub fn prepare_chain_projections(tape: &mut Tape, vars: &BackboneVars, embeddings: Var) -> Result<ChainProjections> {
    let d = tape.value(vars.chain_b).len();
    let wa = tape.slice(vars.chain_w, 0, d)?;
    let wb = tape.slice(vars.chain_w, d, 2 * d)?;
    let entity_proj = tape.matmul_t(embeddings, wa)?;
    let relation_proj = tape.matmul_t(vars.relations, wb)?;
    Ok(ChainProjections {
        entity_proj,
        relation_proj,
    })
}

/// Interaction-chain encoding `h^IC`; the zero vector for an empty chain.
pub fn encode_chain(
    tape: &mut Tape,
    vars: &BackboneVars,
    proj: &ChainProjections,
    chain: &[ChainFact],
    pool: ChainPool,
) -> Result<Var> {
    let d = tape.value(vars.chain_b).len();
    if chain.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[d])));
    }
    let nbrs: Vec<usize> = chain.iter().map(|f| f.neighbor).collect();
    let rels: Vec<usize> = chain.iter().map(|f| f.relation).collect();
    let a = tape.gather(proj.entity_proj, &nbrs)?;
    let b = tape.gather(proj.relation_proj, &rels)?;
    let pre = tape.add(a, b)?;
    let pre = tape.add_row(pre, vars.chain_b)?;
    let enc = tape.gelu(pre);
    match (pool, vars.chain_attn) {
        (ChainPool::Attention, Some(u)) => {
            let logits = tape.matmul(enc, u)?;
            let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
            let w = tape.softmax(logits)?;
            tape.matmul(w, enc)
        }
        _ => tape.mean_rows(enc),
    }
}

/// `x = W_2 · GELU(W_1 · [h^IC ‖ h_r])`.
pub fn interaction_signal(tape: &mut Tape, vars: &BackboneVars, chain_enc: Var, relation: RelationId) -> Result<Var> {
    let hr = tape.row(vars.relations, relation)?;
    let inp = tape.concat(chain_enc, hr)?;
    let hidden = tape.matmul(vars.w1, inp)?;
    let hidden = tape.gelu(hidden);
    tape.matmul(vars.w2, hidden)
}

/// Static-inductive representation for all entities:
/// `h̃ = h + ω ⊙ c`, with `ω = σ(W_Ψ [h ‖ c] + b_Ψ)`.
/// Returns `(h̃, ω)`; without Ψ parameters the prior is skipped.
pub fn inductive_prior(tape: &mut Tape, vars: &BackboneVars, embeddings: Var, prototypes: Var) -> Result<(Var, Option<Var>)> {
    match (vars.psi_w, vars.psi_b) {
        (Some(w), Some(b)) => {
            let inp = tape.concat(embeddings, prototypes)?;
            let pre = tape.matmul_t(inp, w)?;
            let pre = tape.add_row(pre, b)?;
            let omega = tape.sigmoid(pre);
            let prior = tape.mul(omega, prototypes)?;
            let ht = tape.add(embeddings, prior)?;
            Ok((ht, Some(omega)))
        }
        _ => Ok((embeddings, None)),
    }
}

/// Mean of `‖h_e − c_{π(e)}‖²` over a batch; gradient reaches the codebook
/// only. An empty batch yields a constant zero.
pub fn vq_commitment_loss(tape: &mut Tape, codebook: Var, batch: &[(&[f64], usize)]) -> Result<Var> {
    if batch.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d = batch[0].0.len();
    let mut h = Vec::with_capacity(batch.len() * d);
    for (row, _) in batch {
        h.extend_from_slice(row);
    }
    let h = tape.constant(Tensor::matrix(batch.len(), d, h)?);
    let idx: Vec<usize> = batch.iter().map(|(_, k)| *k).collect();
    let c = tape.gather(codebook, &idx)?;
    let diff = tape.sub(h, c)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / batch.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashed_embeddings_are_deterministic_and_unit() {
        let a = hashed_vector(7, "Berlin", 16);
        let b = hashed_vector(7, "Berlin", 16);
        assert_eq!(a, b);
        assert_ne!(a, hashed_vector(8, "Berlin", 16));
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn file_embeddings_join_by_name() {
        use std::io::Write;
        let mut vocab = Vocab::default();
        vocab.intern("b");
        vocab.intern("a");
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a\t1.5\t-2").unwrap();
        writeln!(f, "b\t0.25\t3").unwrap();
        let src = EmbeddingSource::build(&EmbeddingMode::File(f.path().into()), &vocab, 2).unwrap();
        assert_eq!(src.static_embedding(0).unwrap(), &[0.25, 3.0]);
        assert_eq!(src.static_embedding(1).unwrap(), &[1.5, -2.0]);
        assert!(src.static_embedding(2).is_err());
        vocab.intern("c");
        assert!(matches!(
            EmbeddingSource::build(&EmbeddingMode::File(f.path().into()), &vocab, 2),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn cluster_assignment_cases() {
        let one = Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap();
        assert_eq!(assign_cluster(&[0.0, 1.0], &one), 0);
        let c = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(assign_cluster(&[2.0, 2.0], &c), 3);
        // equidistant from centers 1 and 2
        assert_eq!(assign_cluster(&[1.0, 1.0], &c), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let centers = Tensor::matrix(8, 5, (0..40).map(|_| rng.random::<f64>()).collect()).unwrap();
            let h: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let brute = (0..8)
                .map(|k| (sq_dist(&h, centers.row(k)), k))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap()
                .1;
            assert_eq!(assign_cluster(&h, &centers), brute);
        }
    }

    #[test]
    fn kmeans_seeding_covers_every_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = Tensor::matrix(30, 3, (0..90).map(|i| (i / 30) as f64 * 10.0 + rng.random::<f64>()).collect()).unwrap();
        let c = kmeans_pp_init(&pts, 4, &mut rng).unwrap();
        assert_eq!(c.shape(), &[4, 3]);
        assert!(c.is_finite());
    }

    #[test]
    fn prototypes_running_mean() {
        let mut p = PrototypeTable::new(2, 2);
        assert_eq!(p.prototype(0), vec![0.0, 0.0]);
        p.add(1, &[1.0, 3.0]);
        assert_eq!(p.prototype(1), vec![1.0, 3.0]);
        p.add(1, &[3.0, -1.0]);
        assert_eq!(p.prototype(1), vec![2.0, 1.0]);
        assert_eq!(p.prototype(0), vec![0.0, 0.0]);
    }

    #[test]
    fn prototype_stream_equals_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let encs: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let mut p = PrototypeTable::new(1, 3);
        for (i, e) in encs.iter().enumerate() {
            p.add(0, e);
            let prefix = &encs[..=i];
            for j in 0..3 {
                let batch: f64 = prefix.iter().map(|v| v[j]).sum::<f64>() / prefix.len() as f64;
                assert!((p.prototype(0)[j] - batch).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_ring_buffer_keeps_latest() {
        let mut c = ChainStore::new(1, 3);
        for t in 0..5 {
            c.push(0, ChainFact { neighbor: t as usize, relation: 0, time: t });
        }
        let ts: Vec<_> = c.chain(0).iter().map(|f| f.time).collect();
        assert_eq!(ts, vec![2, 3, 4]);
    }

    #[test]
    fn relation_filter_keeps_most_similar_in_time_order() {
        let rels = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.9, 0.1]).unwrap();
        let mut chain = VecDeque::new();
        for (i, r) in [1usize, 2, 0, 1].iter().enumerate() {
            chain.push_back(ChainFact { neighbor: i, relation: *r, time: i as u64 });
        }
        let kept = filter_chain(&chain, &rels, 0, 2);
        assert_eq!(kept.iter().map(|f| f.time).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(filter_chain(&chain, &rels, 0, 0).len(), 4);
    }

    #[test]
    fn vq_loss_values() {
        let mut t = Tape::new();
        let cb = t.param(Tensor::matrix(2, 2, vec![1.0, 1.0, 0.5, -0.5]).unwrap());
        let h = [1.0, 1.0];
        let l = vq_commitment_loss(&mut t, cb, &[(&h, 0)]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let l2 = vq_commitment_loss(&mut t, cb, &[(&[0.5, 0.0][..], 1)]).unwrap();
        assert!((t.value(l2).item() - 0.25).abs() < 1e-15);
        let e = vq_commitment_loss(&mut t, cb, &[]).unwrap();
        assert_eq!(t.value(e).item(), 0.0);
    }
}
