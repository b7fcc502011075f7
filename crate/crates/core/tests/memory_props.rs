use proptest::prelude::*;
use tkgmem::memory::{fuse, EmaVariant, Operator, OperatorKind};
use tkgmem::{Error, MemoryBank, Tensor};

fn ema(rho: f64) -> Operator {
    Operator {
        kind: OperatorKind::Ema(EmaVariant::Shared),
        params: vec![Tensor::scalar(rho)],
        heads: 1,
    }
}

fn dense_op(kind: OperatorKind, d: usize, seed: u64) -> Operator {
    let mut x = seed | 1;
    let mut next = move || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let params = kind
        .param_shapes(d, 1)
        .into_iter()
        .map(|(_, shape)| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| next()).collect()).unwrap()
        })
        .collect();
    Operator { kind, params, heads: 2 }
}

fn signals(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), 1..=64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ema_recurrence_matches_unrolled_sum(xs in signals(3), rho in -4.0f64..4.0) {
        let mut bank = MemoryBank::new(1, 3, 0);
        let op = ema(rho);
        for x in &xs {
            bank.update(&op, 0, x, &[0.0; 3], None).unwrap();
        }
        let a = 1.0 / (1.0 + (-rho).exp());
        let tau = xs.len();
        for j in 0..3 {
            let closed: f64 = (1.0 - a) * xs.iter().enumerate().map(|(i, x)| a.powi((tau - 1 - i) as i32) * x[j]).sum::<f64>();
            prop_assert!((bank.memory(0)[j] - closed).abs() < 1e-10);
        }
        prop_assert_eq!(bank.count(0), tau as u64);
    }

    #[test]
    fn updates_are_isolated_per_entity(ops in prop::collection::vec((0usize..4, prop::collection::vec(-1.0f64..1.0, 2)), 1..20), kind in prop::sample::select(vec!["ema", "gru", "attention"])) {
        let kind = OperatorKind::parse(kind).unwrap();
        let op = dense_op(kind, 2, 3);
        let buffer = if kind == OperatorKind::Attention { 4 } else { 0 };
        let mut bank = MemoryBank::new(4, 2, buffer);
        for (e, x) in &ops {
            let before: Vec<Vec<f64>> = (0..4).map(|b| bank.memory(b).to_vec()).collect();
            let counts: Vec<u64> = (0..4).map(|b| bank.count(b)).collect();
            bank.update(&op, *e, x, &[0.3, -0.2], None).unwrap();
            for b in (0..4).filter(|b| b != e) {
                prop_assert_eq!(bank.memory(b), &before[b][..]);
                prop_assert_eq!(bank.count(b), counts[b]);
            }
            prop_assert_eq!(bank.count(*e), counts[*e] + 1);
        }
    }

    #[test]
    fn snapshot_round_trips_bit_exactly(ops in prop::collection::vec((0usize..5, prop::collection::vec(-1.0f64..1.0, 4)), 0..30), grow in 0usize..3) {
        let op = dense_op(OperatorKind::Attention, 4, 9);
        let mut bank = MemoryBank::new(5, 4, 4);
        for (e, x) in &ops {
            bank.update(&op, *e, x, &[0.1, 0.2, 0.3, 0.4], None).unwrap();
        }
        let blob = bank.snapshot();
        let back = MemoryBank::restore(&blob, 5).unwrap();
        prop_assert_eq!(&back, &bank);
        prop_assert_eq!(back.snapshot(), blob.clone());
        let bigger = MemoryBank::restore(&blob, 5 + grow).unwrap();
        for e in 5..5 + grow {
            prop_assert_eq!(bigger.count(e), 0);
            prop_assert!(bigger.memory(e).iter().all(|&v| v == 0.0));
        }
        for cut in [0, 4, 8, blob.len() / 2, blob.len().saturating_sub(1)] {
            if cut < blob.len() {
                prop_assert!(matches!(MemoryBank::restore(&blob[..cut], 5), Err(Error::Load(_))));
            }
        }
    }

    #[test]
    fn evicted_signals_do_not_influence_attention(xs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 5..12), bump in 0.5f64..5.0) {
        let k = 4;
        let op = dense_op(OperatorKind::Attention, 2, 17);
        let run = |xs: &[Vec<f64>]| {
            let mut bank = MemoryBank::new(1, 2, k);
            for x in xs {
                bank.update(&op, 0, x, &[0.4, -0.1], None).unwrap();
            }
            bank.memory(0).to_vec()
        };
        let base = run(&xs);
        let mut evicted = xs.clone();
        evicted[xs.len() - k - 1][0] += bump;
        prop_assert_eq!(run(&evicted), base.clone());
        let mut kept = xs.clone();
        kept[xs.len() - 1][0] += bump;
        prop_assert_ne!(run(&kept), base);
    }

    #[test]
    fn gate_is_zero_until_first_update_and_bounded_after(h in prop::collection::vec(-2.0f64..2.0, 3), x in prop::collection::vec(-2.0f64..2.0, 3), w in prop::collection::vec(-2.0f64..2.0, 18)) {
        let w_g = Tensor::matrix(3, 6, w).unwrap();
        let mut bank = MemoryBank::new(2, 3, 0);
        prop_assert_eq!(bank.gate(0, &h, &w_g).unwrap(), vec![0.0; 3]);
        bank.update(&ema(0.0), 0, &x, &[0.0; 3], None).unwrap();
        let g = bank.gate(0, &h, &w_g).unwrap();
        prop_assert!(g.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(bank.gate(1, &h, &w_g).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn fuse_interpolates(h in prop::collection::vec(-2.0f64..2.0, 4), m in prop::collection::vec(-2.0f64..2.0, 4)) {
        prop_assert_eq!(fuse(&h, &m, &[0.0; 4]), h.clone());
        prop_assert_eq!(fuse(&h, &m, &[1.0; 4]), m.clone());
        let mid = fuse(&h, &m, &[0.5; 4]);
        for i in 0..4 {
            prop_assert!((mid[i] - 0.5 * (h[i] + m[i])).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_gate_weights_give_one_half() {
    let mut bank = MemoryBank::new(1, 2, 0);
    bank.update(&ema(0.0), 0, &[1.0, -1.0], &[0.0, 0.0], None).unwrap();
    let g = bank.gate(0, &[0.3, 0.7], &Tensor::zeros(&[2, 4])).unwrap();
    assert_eq!(g, vec![0.5, 0.5]);
}

#[test]
fn reset_is_idempotent_and_matches_fresh_checksum() {
    let fresh = MemoryBank::new(3, 2, 4);
    let mut bank = fresh.clone();
    let op = dense_op(OperatorKind::Attention, 2, 5);
    bank.update(&op, 1, &[1.0, 2.0], &[0.0, 1.0], None).unwrap();
    assert_ne!(bank.checksum(), fresh.checksum());
    bank.reset_all();
    assert_eq!(bank.checksum(), fresh.checksum());
    bank.reset_all();
    assert_eq!(bank, fresh);
}

#[test]
fn ema_first_steps_by_hand() {
    let mut bank = MemoryBank::new(1, 1, 0);
    let op = ema(0.0);
    bank.update(&op, 0, &[2.0], &[0.0], None).unwrap();
    assert_eq!(bank.memory(0), &[1.0]);
    bank.update(&op, 0, &[4.0], &[0.0], None).unwrap();
    // 0.25·x1 + 0.5·x2
    assert_eq!(bank.memory(0), &[0.25 * 2.0 + 0.5 * 4.0]);
}

#[test]
fn empty_bank_round_trips() {
    let bank = MemoryBank::new(0, 4, 0);
    assert_eq!(MemoryBank::restore(&bank.snapshot(), 0).unwrap(), bank);
}

#[test]
fn snapshot_refuses_bad_header() {
    let bank = MemoryBank::new(2, 2, 0);
    let mut blob = bank.snapshot();
    blob[8] ^= 0xff;
    assert!(matches!(MemoryBank::restore(&blob, 2), Err(Error::Load(_))));
    let mut blob = bank.snapshot();
    blob[0] = b'X';
    assert!(matches!(MemoryBank::restore(&blob, 2), Err(Error::Load(_))));
    assert!(MemoryBank::restore(&bank.snapshot(), 1).is_err());
}

#[test]
fn dimension_mismatch_is_rejected() {
    let mut bank = MemoryBank::new(1, 3, 0);
    assert!(bank.update(&ema(0.0), 0, &[1.0, 2.0], &[0.0; 3], None).is_err());
}
