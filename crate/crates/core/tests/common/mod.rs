#![allow(dead_code)]

use tkgmem::backbone::EmbeddingSource;
use tkgmem::synth::{generate, SyntheticSpec};
use tkgmem::{Config, Model, TkgDataset};

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        types: 2,
        entities_per_type: 6,
        relations_per_type: 2,
        timestamps: 12,
        drift: 0.5,
        emerging: 0.2,
        facts_per_entity: 0.4,
        embed_dim: 8,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_config(seed: u64) -> Config {
    Config {
        dim: 8,
        clusters: 3,
        chain_len: 4,
        filters: 4,
        heads: 2,
        buffer: 3,
        seed,
        ..Config::default()
    }
}

/// Split, inverse-augmented synthetic data plus a model over its embeddings.
pub fn tiny(seed: u64, cfg: &Config) -> (TkgDataset, Model) {
    let g = generate(&tiny_spec(seed)).unwrap();
    let data = g.dataset.augment_inverse().unwrap().chronological_split((0.6, 0.2, 0.2)).unwrap();
    let model = Model::with_embeddings(cfg, &data, EmbeddingSource::from_table(g.embeddings)).unwrap();
    (data, model)
}
