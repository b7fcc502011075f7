mod common;

use tkgmem::backbone::EmbeddingSource;
use tkgmem::config::Decoder;
use tkgmem::data::{SplitBounds, Vocab};
use tkgmem::engine::StepOutput;
use tkgmem::{step, Config, Model, Quadruple, ReprMode, Split, StepOptions, StreamState, Tensor, TkgDataset, Trainer};

fn run(model: &Model, data: &TkgDataset, opts: StepOptions) -> Vec<StepOutput> {
    let mut state = StreamState::fresh(model);
    let (lo, hi) = (data.timestamps()[0], *data.timestamps().last().unwrap());
    let mut outs = Vec::new();
    for (_, facts) in data.stream(lo, hi) {
        let out = step(model, &state, facts, opts).unwrap();
        state.apply(out.commit.clone()).unwrap();
        outs.push(out);
    }
    outs
}

fn named(rows: &[(&str, &str, &str, u64)], train_end: u64, valid_end: u64) -> TkgDataset {
    TkgDataset::from_named(rows.iter().copied())
        .unwrap()
        .with_bounds(SplitBounds { train_end, valid_end })
        .unwrap()
}

fn small_model(cfg: &Config, data: &TkgDataset) -> Model {
    Model::new(cfg, data).unwrap()
}

#[test]
fn empty_memory_scores_equal_zero_gate_scores() {
    for seed in 0..5 {
        let cfg = common::tiny_config(seed);
        let (data, model) = common::tiny(seed, &cfg);
        let state = StreamState::fresh(&model);
        let (t, facts) = data.stream(0, 0).next().unwrap();
        assert_eq!(t, 0);
        let full = step(&model, &state, facts, StepOptions::eval(ReprMode::Full)).unwrap();
        let zero = step(&model, &state, facts, StepOptions::eval(ReprMode::ZeroGate)).unwrap();
        for (a, b) in full.queries.iter().zip(&zero.queries) {
            assert_eq!(a.scores, b.scores);
            assert_eq!(a.gate_mean, 0.0);
        }
    }
}

#[test]
fn future_facts_do_not_change_the_past() {
    let cfg = common::tiny_config(7);
    let (data, model) = common::tiny(7, &cfg);
    let base = run(&model, &data, StepOptions::train(0));
    let times = data.timestamps();
    for &cut in &[times[1], times[3], times[times.len() / 2], times[times.len() - 2]] {
        let kept: Vec<Quadruple> = data.facts().iter().copied().filter(|f| f.time <= cut).collect();
        let cut_data = TkgDataset::from_facts(data.entities().clone(), data.relations().clone(), kept).unwrap();
        let outs = run(&model, &cut_data, StepOptions::train(0));
        assert_eq!(outs.len(), cut as usize + 1);
        for (a, b) in outs.iter().zip(&base) {
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.grads, b.grads);
            for (qa, qb) in a.queries.iter().zip(&b.queries) {
                assert_eq!(qa.scores, qb.scores);
            }
        }
    }
}

#[test]
fn identical_epochs_give_identical_parameters() {
    let cfg = common::tiny_config(5);
    let (data, model) = common::tiny(5, &cfg);
    let mut a = Trainer::new(model.clone());
    let mut b = Trainer::new(model);
    let sa = a.train_epoch(&data).unwrap();
    let sb = b.train_epoch(&data).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(sa.final_state.checksum(), sb.final_state.checksum());
    assert_eq!(sa.mean_loss.to_bits(), sb.mean_loss.to_bits());
}

#[test]
fn one_fact_one_update() {
    let data = named(&[("a", "r", "b", 0), ("b", "r", "c", 1), ("c", "r", "a", 2)], 0, 1);
    let cfg = Config { dim: 8, clusters: 2, filters: 2, ..Config::default() };
    let mut trainer = Trainer::new(small_model(&cfg, &data));
    let out = trainer.train_epoch(&data).unwrap();
    let a = data.entities().id("a").unwrap();
    assert_eq!(out.queries, 1);
    assert_eq!(out.final_state.bank.count(a), 1);
    let total: u64 = out.final_state.bank.counts().iter().sum();
    assert_eq!(total, 1);
}

#[test]
fn epoch_starts_from_a_fresh_bank() {
    let cfg = common::tiny_config(6);
    let (data, model) = common::tiny(6, &cfg);
    let fresh = StreamState::fresh(&model).bank.checksum();
    let mut trainer = Trainer::new(model);
    let first = trainer.train_epoch(&data).unwrap();
    assert_ne!(first.final_state.bank.checksum(), fresh);
    assert_eq!(StreamState::fresh(&trainer.model).bank.checksum(), fresh);
}

#[test]
fn shuffled_replay_differs_from_chronological() {
    let rows = [("a", "r", "b", 0), ("a", "q", "c", 1), ("a", "r", "d", 2)];
    let shuffled = [("a", "r", "d", 0), ("a", "q", "c", 1), ("a", "r", "b", 2)];
    let chrono = named(&rows, 0, 1);
    let shuf = TkgDataset::from_facts(
        chrono.entities().clone(),
        chrono.relations().clone(),
        shuffled
            .iter()
            .map(|(s, r, o, t)| Quadruple {
                subject: chrono.entities().id(s).unwrap(),
                relation: chrono.relations().id(r).unwrap(),
                object: chrono.entities().id(o).unwrap(),
                time: *t,
            })
            .collect(),
    )
    .unwrap();
    let cfg = Config { dim: 8, clusters: 2, filters: 2, ..Config::default() };
    let model = small_model(&cfg, &chrono);
    let final_bank = |d: &TkgDataset| {
        let mut state = StreamState::fresh(&model);
        for (_, facts) in d.stream(0, 2) {
            let out = step(&model, &state, facts, StepOptions::replay()).unwrap();
            state.apply(out.commit).unwrap();
        }
        state.bank
    };
    let a = chrono.entities().id("a").unwrap();
    let x = final_bank(&chrono);
    let y = final_bank(&shuf);
    assert_eq!(x.count(a), 3);
    assert_eq!(y.count(a), 3);
    assert_ne!(x.memory(a), y.memory(a));
}

#[test]
fn rho_gradient_appears_once_memory_is_live() {
    let data = named(&[("a", "r", "b", 0), ("a", "r", "c", 1), ("b", "r", "c", 2)], 0, 1);
    let cfg = Config { dim: 8, clusters: 2, filters: 2, ..Config::default() };
    let model = small_model(&cfg, &data);
    let outs = run(&model, &data, StepOptions::train(0));
    let i = model.params.index("memory.rho").unwrap();
    assert!(outs[1].grads[i].data()[0] != 0.0);
    // "after" reads only committed, detached memory
    let after = Config { timing: tkgmem::config::Timing::After, ..cfg };
    let model = small_model(&after, &data);
    let outs = run(&model, &data, StepOptions::train(0));
    assert!(outs.iter().all(|o| o.grads[i].data()[0] == 0.0));
}

#[test]
fn every_parameter_receives_gradient() {
    for kind in ["ema", "gru", "attention"] {
        let mut cfg = common::tiny_config(8);
        cfg.set("operator", kind).unwrap();
        let (data, model) = common::tiny(8, &cfg);
        let outs = run(&model, &data, StepOptions::train(0));
        for (i, name) in model.params.names().iter().enumerate() {
            let live = outs.iter().any(|o| o.grads[i].data().iter().any(|&g| g != 0.0));
            assert!(live, "{kind}: {name} never receives gradient");
        }
    }
}

#[test]
fn bilinear_scores_match_hand_computation() {
    let cfg = Config {
        dim: 4,
        clusters: 2,
        decoder: Decoder::BilinearDiagonal,
        use_prior: false,
        ..Config::default()
    };
    let data = named(&[("a", "r", "b", 0), ("b", "q", "c", 0), ("c", "r", "a", 1), ("a", "q", "c", 2)], 0, 1);
    let model = small_model(&cfg, &data);
    let h = model.embeddings().table();
    let rel = model.param("backbone.relations").unwrap();
    let state = StreamState::fresh(&model);
    let (_, facts) = data.stream(0, 0).next().unwrap();
    let out = step(&model, &state, facts, StepOptions::eval(ReprMode::Full)).unwrap();
    for q in &out.queries {
        let (s, r) = (q.fact.subject, q.fact.relation);
        for o in 0..data.num_entities() {
            let want: f64 = (0..4).map(|k| h.row(s)[k] * rel.row(r)[k] * h.row(o)[k]).sum();
            assert!((q.scores[o] - want).abs() < 1e-12);
        }
        let max = q.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + q.scores.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        assert!((q.loss - (lse - q.scores[q.fact.object])).abs() < 1e-12);
    }
}

#[test]
fn relabelling_entities_permutes_scores() {
    let cfg = Config { dim: 8, clusters: 2, filters: 2, use_prior: false, ..Config::default() };
    let rows = [
        ("a", "r", "b", 0),
        ("b", "q", "c", 0),
        ("c", "r", "d", 1),
        ("a", "q", "d", 1),
        ("d", "r", "a", 2),
        ("b", "r", "a", 2),
    ];
    let data = named(&rows, 0, 1);
    let model = small_model(&cfg, &data);
    // reversed interning order
    let mut ents = Vocab::default();
    for name in ["d", "c", "b", "a"] {
        ents.intern(name);
    }
    let map: Vec<usize> = (0..4).map(|e| ents.id(data.entities().name(e)).unwrap()).collect();
    let facts = data
        .facts()
        .iter()
        .map(|f| Quadruple {
            subject: map[f.subject],
            object: map[f.object],
            ..*f
        })
        .collect();
    let perm = TkgDataset::from_facts(ents, data.relations().clone(), facts)
        .unwrap()
        .with_bounds(SplitBounds { train_end: 0, valid_end: 1 })
        .unwrap();
    let table = model.embeddings().table();
    let mut rows_p = vec![0.0; table.len()];
    for e in 0..4 {
        rows_p[map[e] * 8..map[e] * 8 + 8].copy_from_slice(table.row(e));
    }
    let mut model_p = Model::with_embeddings(&cfg, &perm, EmbeddingSource::from_table(Tensor::matrix(4, 8, rows_p).unwrap())).unwrap();
    model_p.params = model.params.clone();
    let a = run(&model, &data, StepOptions::eval(ReprMode::Full));
    let b = run(&model_p, &perm, StepOptions::eval(ReprMode::Full));
    for (x, y) in a.iter().zip(&b) {
        for (qx, qy) in x.queries.iter().zip(&y.queries) {
            assert_eq!(map[qx.fact.subject], qy.fact.subject);
            for e in 0..4 {
                assert!((qx.scores[e] - qy.scores[map[e]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn split_windows_cover_the_stream() {
    let cfg = common::tiny_config(9);
    let (data, _) = common::tiny(9, &cfg);
    let (lo, _) = data.split_window(Split::Train).unwrap();
    let (_, hi) = data.split_window(Split::Test).unwrap();
    assert_eq!(data.stream(lo, hi).map(|(_, f)| f.len()).sum::<usize>(), data.facts().len());
}
