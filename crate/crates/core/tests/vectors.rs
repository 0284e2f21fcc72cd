mod common;

use common::{enumerate_tail, integer_records, random_records, rational_tail};
use headlens::patching::{Metric, ScoreTable};
use headlens::rsa::VectorKind;
use headlens::tasks::{Concept, DatasetId, Format};
use headlens::toy::random_config;
use headlens::vectors::{
    head_overlap, hypergeometric_tail, per_prompt_vector, steering_vector, HeadSelection, SteeringVector, SIGNIFICANCE,
};
use headlens::HeadLocator;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tail_matches_exhaustive_enumeration() {
    for n in 1..=12u32 {
        for k in 0..=n {
            for x in 0..=k + 1 {
                let want = enumerate_tail(n, k, x);
                let got = hypergeometric_tail(n as u64, k as u64, x as u64);
                assert!((got - want).abs() < 1e-12, "N={n} K={k} x={x}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn tail_matches_exact_rational_at_scale() {
    for (n, k, x) in [(1024, 50, 12), (1024, 50, 3), (1024, 50, 1), (1024, 100, 20), (640, 25, 6)] {
        let want = rational_tail(n, k, x);
        let got = hypergeometric_tail(n, k, x);
        assert!((got - want).abs() <= 1e-12 * want.max(1e-300) + 1e-15, "{n},{k},{x}: {got} vs {want}");
    }
    assert!(hypergeometric_tail(1024, 50, 12) < SIGNIFICANCE);
}

fn selection(kind: VectorKind, heads: Vec<HeadLocator>) -> HeadSelection {
    let config = random_config();
    let table = ScoreTable::from_fn(
        match kind {
            VectorKind::Function => Metric::Aie,
            VectorKind::Concept => Metric::ConceptRsa,
        },
        "t",
        &config,
        |h| Some(heads.iter().position(|&x| x == h).map_or(-1.0, |i| 100.0 - i as f64)),
    );
    HeadSelection::top_k(kind, &table, heads.len()).unwrap()
}

#[test]
fn overlap_of_selections() {
    let a = selection(VectorKind::Function, vec![HeadLocator::new(0, 0), HeadLocator::new(1, 1)]);
    let b = selection(VectorKind::Concept, vec![HeadLocator::new(1, 1), HeadLocator::new(2, 2)]);
    let r = head_overlap(&a, &b).unwrap();
    assert_eq!(r.overlap, 1);
    assert!((r.p_value - hypergeometric_tail(32, 2, 1)).abs() < 1e-15);
    assert_eq!(r.significant, r.p_value < SIGNIFICANCE);
}

#[test]
fn mean_then_sum_equals_sum_then_mean() {
    let config = random_config();
    let all: Vec<HeadLocator> = config.heads().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let id = DatasetId::new(Concept::Antonym, Format::OpenEndedEn);
    for _ in 0..100 {
        let n = rng.gen_range(1..20);
        let records = random_records(&mut rng, n, config.d_model, &all);
        let k = rng.gen_range(1..=8);
        let heads: Vec<HeadLocator> = all.choose_multiple(&mut rng, k).copied().collect();
        let sel = selection(VectorKind::Function, heads.clone());
        let v = steering_vector(&records, &sel, id).unwrap();
        let mut want = vec![0.0f64; config.d_model];
        for r in &records {
            for (w, x) in want.iter_mut().zip(per_prompt_vector(r, &heads).unwrap()) {
                *w += x as f64 / n as f64;
            }
        }
        for (a, b) in v.values.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(v.provenance.n_prompts, n);
    }
}

#[test]
fn vector_files_round_trip() {
    let config = random_config();
    let heads: Vec<HeadLocator> = config.heads().take(3).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let recs = random_records(&mut rng, 4, config.d_model, &heads);
    let sel = selection(VectorKind::Concept, heads);
    let v = steering_vector(&recs, &sel, DatasetId::new(Concept::Causal, Format::MultipleChoice)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.f32");
    v.save(&p).unwrap();
    assert_eq!(SteeringVector::load(&p).unwrap(), v);
}

proptest! {
    #[test]
    fn per_prompt_vectors_add_over_disjoint_head_sets(seed in any::<u64>(), split in 1usize..31) {
        let config = random_config();
        let mut all: Vec<HeadLocator> = config.heads().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        let recs = integer_records(&mut rng, 1, config.d_model, &config.heads().collect::<Vec<_>>());
        let (a, b) = all.split_at(split);
        let va = per_prompt_vector(&recs[0], a).unwrap();
        let vb = per_prompt_vector(&recs[0], b).unwrap();
        let vab = per_prompt_vector(&recs[0], &all).unwrap();
        let summed: Vec<f32> = va.iter().zip(&vb).map(|(x, y)| x + y).collect();
        prop_assert_eq!(vab, summed);
    }

    #[test]
    fn steering_vectors_add_over_disjoint_head_sets(seed in any::<u64>(), split in 1usize..8, n in 1usize..6) {
        let config = random_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut all: Vec<HeadLocator> = config.heads().collect();
        all.shuffle(&mut rng);
        let heads = &all[..8];
        let recs = integer_records(&mut rng, n, config.d_model, &config.heads().collect::<Vec<_>>());
        let id = DatasetId::new(Concept::Synonym, Format::OpenEndedL2);
        let v = |hs: &[HeadLocator]| steering_vector(&recs, &selection(VectorKind::Function, hs.to_vec()), id).unwrap().values;
        let scale = n as f32;
        // Integer sums are exact; compare the n-scaled vectors.
        let whole: Vec<f32> = v(heads).iter().map(|x| (x * scale).round()).collect();
        let parts: Vec<f32> = v(&heads[..split]).iter().zip(v(&heads[split..]))
            .map(|(x, y)| (x * scale).round() + (y * scale).round())
            .collect();
        prop_assert_eq!(whole, parts);
    }
}
