//! Synthetic TKG streams with type structure and per-entity drift.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{hashed_vector, name_seed};
use crate::data::{split_counts, Quadruple, Timestamp, TkgDataset, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub types: usize,
    pub entities_per_type: usize,
    pub relations_per_type: usize,
    pub timestamps: usize,
    /// Share of non-emerging entities that switch to a personal pattern.
    pub drift: f64,
    /// Share of entities whose first appearance falls in the test window.
    pub emerging: f64,
    /// Probability that an active entity is the subject of a fact at a
    /// given timestamp.
    pub facts_per_entity: f64,
    /// Probability of a uniformly random relation and object.
    pub noise: f64,
    pub embed_dim: usize,
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            types: 4,
            entities_per_type: 50,
            relations_per_type: 3,
            timestamps: 60,
            drift: 0.3,
            emerging: 0.2,
            facts_per_entity: 0.5,
            noise: 0.05,
            embed_dim: 32,
            split: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityAnnotation {
    pub name: String,
    pub type_id: usize,
    pub drift: bool,
    pub onset: Option<Timestamp>,
    pub emerging: bool,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// Raw facts, neither split nor augmented.
    pub dataset: TkgDataset,
    /// Indexed by entity id.
    pub annotations: Vec<EntityAnnotation>,
    /// `[|E|, embed_dim]`, rows aligned with entity ids.
    pub embeddings: Tensor,
    /// Target type of each relation.
    pub relation_targets: Vec<usize>,
}

struct Profile {
    type_id: usize,
    first: Timestamp,
    onset: Option<Timestamp>,
    fav_relations: Vec<usize>,
    fav_objects: Vec<usize>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let fail = |m: &str| Err(Error::contract(format!("infeasible synthetic spec: {m}")));
    if spec.types == 0 || spec.entities_per_type == 0 || spec.relations_per_type == 0 || spec.embed_dim == 0 {
        return fail("counts must be positive");
    }
    if spec.timestamps < 3 {
        return fail("at least 3 timestamps are needed");
    }
    for (name, v) in [
        ("drift", spec.drift),
        ("emerging", spec.emerging),
        ("noise", spec.noise),
        ("facts_per_entity", spec.facts_per_entity),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return fail(&format!("{name} must lie in [0, 1]"));
        }
    }
    let n = spec.types * spec.entities_per_type;
    let n_rel = spec.types * spec.relations_per_type;
    let t_len = spec.timestamps as u64;
    let (_, b2) = split_counts(spec.timestamps, spec.split)?;
    let test_start = b2 as u64;
    let n_emerging = (spec.emerging * n as f64).round() as usize;
    if n_emerging >= n {
        return fail("at least one entity must be present before the test window");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(spec.seed, "synth"));
    let relation_targets: Vec<usize> = (0..n_rel).map(|_| rng.random_range(0..spec.types)).collect();

    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let emerging: Vec<bool> = {
        let mut v = vec![false; n];
        for &e in &ids[..n_emerging] {
            v[e] = true;
        }
        v
    };
    let stable: Vec<usize> = ids[n_emerging..].to_vec();
    let n_drift = (spec.drift * stable.len() as f64).round() as usize;
    let mut drift = vec![false; n];
    for &e in &stable[..n_drift] {
        drift[e] = true;
    }
    let mut stable_sorted = stable.clone();
    stable_sorted.sort_unstable();

    let onset_lo = t_len / 4;
    let onset_hi = (t_len / 2).max(onset_lo + 1);
    let mut profiles = Vec::with_capacity(n);
    for e in 0..n {
        let first = if emerging[e] { rng.random_range(test_start..t_len) } else { 0 };
        let (onset, fav_relations, fav_objects) = if drift[e] {
            let onset = rng.random_range(onset_lo..onset_hi);
            let rels: Vec<usize> = rand::seq::index::sample(&mut rng, n_rel, 2.min(n_rel)).into_vec();
            let pool: Vec<usize> = stable_sorted.iter().copied().filter(|&o| o != e).collect();
            let objs: Vec<usize> = pool.choose_multiple(&mut rng, 3.min(pool.len())).copied().collect();
            (Some(onset), rels, objs)
        } else {
            (None, vec![], vec![])
        };
        profiles.push(Profile {
            type_id: e / spec.entities_per_type,
            first,
            onset,
            fav_relations,
            fav_objects,
        });
    }

    let mut facts = Vec::new();
    for t in 0..t_len {
        let active: Vec<usize> = (0..n).filter(|&e| profiles[e].first <= t).collect();
        let before = facts.len();
        for &s in &active {
            let forced = emerging[s] && profiles[s].first == t;
            if forced || rng.random::<f64>() < spec.facts_per_entity {
                facts.push(draw_fact(spec, &profiles, &relation_targets, &active, s, t, &mut rng));
            }
        }
        if facts.len() == before {
            let s = *active.choose(&mut rng).unwrap();
            facts.push(draw_fact(spec, &profiles, &relation_targets, &active, s, t, &mut rng));
        }
    }

    let mut ents = Vocab::default();
    let names: Vec<String> = (0..n)
        .map(|e| format!("t{}_e{}", e / spec.entities_per_type, e % spec.entities_per_type))
        .collect();
    for name in &names {
        ents.intern(name);
    }
    let mut rels = Vocab::default();
    for r in 0..n_rel {
        rels.intern(&format!("r{}_{}", r / spec.relations_per_type, r % spec.relations_per_type));
    }
    let dataset = TkgDataset::from_facts(ents, rels, facts)?;

    let d = spec.embed_dim;
    let centroids: Vec<Vec<f64>> = (0..spec.types)
        .map(|k| hashed_vector(spec.seed, &format!("type{k}"), d))
        .collect();
    let mut emb_rng = ChaCha8Rng::seed_from_u64(name_seed(spec.seed, "synth-embeddings"));
    let noise_scale = 1.0 / (d as f64).sqrt();
    let mut table = Vec::with_capacity(n * d);
    for p in &profiles {
        let mut v: Vec<f64> = centroids[p.type_id]
            .iter()
            .map(|c| c + noise_scale * emb_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        table.extend(v);
    }

    let annotations = (0..n)
        .map(|e| EntityAnnotation {
            name: names[e].clone(),
            type_id: profiles[e].type_id,
            drift: drift[e],
            onset: profiles[e].onset,
            emerging: emerging[e],
        })
        .collect();
    Ok(SyntheticData {
        dataset,
        annotations,
        embeddings: Tensor::matrix(n, d, table)?,
        relation_targets,
    })
}

fn draw_fact(
    spec: &SyntheticSpec,
    profiles: &[Profile],
    targets: &[usize],
    active: &[usize],
    s: usize,
    t: Timestamp,
    rng: &mut ChaCha8Rng,
) -> Quadruple {
    let p = &profiles[s];
    let others = |pred: &dyn Fn(usize) -> bool| -> Vec<usize> {
        active.iter().copied().filter(|&o| o != s && pred(o)).collect()
    };
    let (relation, object) = if rng.random::<f64>() < spec.noise {
        let r = rng.random_range(0..targets.len());
        let pool = others(&|_| true);
        (r, pool.choose(rng).copied().unwrap_or(s))
    } else if p.onset.is_some_and(|on| t >= on) && !p.fav_objects.is_empty() {
        (*p.fav_relations.choose(rng).unwrap(), *p.fav_objects.choose(rng).unwrap())
    } else {
        let r = p.type_id * spec.relations_per_type + rng.random_range(0..spec.relations_per_type);
        let target = targets[r];
        let mut pool = others(&|o| profiles[o].type_id == target);
        if pool.is_empty() {
            pool = others(&|_| true);
        }
        (r, pool.choose(rng).copied().unwrap_or(s))
    };
    Quadruple {
        subject: s,
        relation,
        object,
        time: t,
    }
}

impl SyntheticData {
    /// Writes `facts.tsv`, `annotations.csv` and `embeddings.tsv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.dataset.write_tsv(&dir.join("facts.tsv"))?;
        let mut a = std::io::BufWriter::new(fs::File::create(dir.join("annotations.csv"))?);
        writeln!(a, "entity,type,drift,onset,emerging")?;
        for x in &self.annotations {
            let onset = x.onset.map(|o| o.to_string()).unwrap_or_default();
            writeln!(a, "{},{},{},{},{}", x.name, x.type_id, x.drift as u8, onset, x.emerging as u8)?;
        }
        a.flush()?;
        let mut w = std::io::BufWriter::new(fs::File::create(dir.join("embeddings.tsv"))?);
        for (e, name) in self.dataset.entities().names().iter().enumerate() {
            let row: Vec<String> = self.embeddings.row(e).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{name}\t{}", row.join("\t"))?;
        }
        w.flush()?;
        Ok(())
    }
}
