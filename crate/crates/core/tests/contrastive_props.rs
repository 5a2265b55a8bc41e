use pon_core::contrastive::{mcl_loss, MclVariant, MemoryBank, Projection};
use pon_core::ClassLabel;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 8;
const K: usize = 5;

fn unit(rng: &mut ChaCha8Rng) -> Projection {
    loop {
        let v: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(p) = Projection::new(v) {
            return p;
        }
    }
}

fn filled_bank(rng: &mut ChaCha8Rng, n: u64) -> (MemoryBank, Vec<(u64, Projection, ClassLabel)>) {
    let entries: Vec<_> = (0..n)
        .map(|id| {
            (
                id,
                unit(rng),
                ClassLabel::new(rng.random_range(0..K), K).unwrap(),
            )
        })
        .collect();
    let mut bank = MemoryBank::new(n as usize);
    for (id, p, l) in &entries {
        bank.update(*id, p.clone(), *l).unwrap();
    }
    (bank, entries)
}

fn mass(query: &Projection, label: ClassLabel, bank: &MemoryBank, q: usize) -> f64 {
    -mcl_loss(
        query,
        label,
        &bank.query_nearest(query, q, None),
        MclVariant::Mass,
    )
    .value
}

proptest! {
    #[test]
    fn insertion_order_does_not_change_retrieval(seed in any::<u64>(), q in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bank, mut entries) = filled_bank(&mut rng, 40);
        entries.shuffle(&mut rng);
        let mut shuffled = MemoryBank::new(40);
        for (id, p, l) in &entries {
            shuffled.update(*id, p.clone(), *l).unwrap();
        }
        let query = unit(&mut rng);
        let ids = |b: &MemoryBank| -> Vec<u64> {
            b.query_nearest(&query, q, None).iter().map(|n| n.id).collect()
        };
        prop_assert_eq!(ids(&bank), ids(&shuffled));
        prop_assert_eq!(bank, shuffled);
    }

    #[test]
    fn retrieval_is_sorted_and_bounded(seed in any::<u64>(), q in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bank, _) = filled_bank(&mut rng, 40);
        let query = unit(&mut rng);
        let nn = bank.query_nearest(&query, q, Some(3));
        prop_assert_eq!(nn.len(), q.min(39));
        prop_assert!(nn.iter().all(|n| n.id != 3));
        prop_assert!(nn.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        // nothing left out is closer than the last one kept
        if let Some(last) = nn.last() {
            let kept: Vec<u64> = nn.iter().map(|n| n.id).collect();
            for (id, e) in bank.iter() {
                if id != 3 && !kept.contains(&id) {
                    prop_assert!(query.similarity(&e.projection) <= last.similarity);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>(), qi in 0usize..3, log in any::<bool>()) {
        let q = [1, 5, 20][qi];
        let variant = if log { MclVariant::LogMass } else { MclVariant::Mass };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bank, _) = filled_bank(&mut rng, 30);
        let query = unit(&mut rng);
        let label = ClassLabel::new(rng.random_range(0..K), K).unwrap();
        let nn = bank.query_nearest(&query, q, None);
        let loss = |v: Vec<f64>| {
            let (z, _) = Projection::normalize(v).unwrap();
            mcl_loss(&z, label, &nn, variant).value
        };
        let analytic = mcl_loss(&query, label, &nn, variant).grad_query;
        let h = 1e-6;
        for j in 0..DIM {
            let mut up = query.as_slice().to_vec();
            up[j] += h;
            let mut down = query.as_slice().to_vec();
            down[j] -= h;
            let numeric = (loss(up) - loss(down)) / (2.0 * h);
            let scale = analytic[j].abs().max(numeric.abs()).max(1e-5);
            prop_assert!((analytic[j] - numeric).abs() / scale < 1e-4, "{} vs {}", analytic[j], numeric);
        }
    }

    #[test]
    fn descent_raises_same_label_mass(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bank, _) = filled_bank(&mut rng, 30);
        let query = unit(&mut rng);
        let label = ClassLabel::new(rng.random_range(0..K), K).unwrap();
        let nn = bank.query_nearest(&query, 20, None);
        let g = mcl_loss(&query, label, &nn, MclVariant::Mass).grad_query;
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let stepped: Vec<f64> = query.as_slice().iter().zip(&g).map(|(z, gi)| z - 1e-3 * gi / norm).collect();
        let (moved, _) = Projection::normalize(stepped).unwrap();
        // same contrast set so only the query moves
        let after = -mcl_loss(&moved, label, &nn, MclVariant::Mass).value;
        prop_assert!(after > mass(&query, label, &bank, 20) - 1e-15);
    }
}

#[test]
fn frozen_bank_gives_identical_loss_per_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (bank, _) = filled_bank(&mut rng, 64);
    let queries: Vec<(Projection, ClassLabel)> = (0..64)
        .map(|_| {
            (
                unit(&mut rng),
                ClassLabel::new(rng.random_range(0..K), K).unwrap(),
            )
        })
        .collect();
    let per_query = |batch: &[(Projection, ClassLabel)]| -> Vec<u64> {
        batch
            .iter()
            .map(|(z, l)| {
                mcl_loss(z, *l, &bank.query_nearest(z, 20, None), MclVariant::Mass)
                    .value
                    .to_bits()
            })
            .collect()
    };
    let full = per_query(&queries);
    for size in [1, 8, 64] {
        for (i, chunk) in queries.chunks(size).enumerate() {
            assert_eq!(per_query(chunk), full[i * size..i * size + chunk.len()]);
        }
    }
}

#[test]
fn empty_contrast_set_contributes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = unit(&mut rng);
    for variant in [MclVariant::Mass, MclVariant::LogMass] {
        let l = mcl_loss(&z, ClassLabel::new(0, K).unwrap(), &[], variant);
        assert_eq!(l.value, 0.0);
        assert!(l.grad_query.iter().all(|&g| g == 0.0));
    }
}
