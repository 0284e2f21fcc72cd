mod common;

use common::{brute_cosine, brute_spearman, planted_records};
use headlens::rsa::{
    average_ranks, build_design_matrix, build_rsm, concept_rsa_all_heads, similarity_of, spearman,
    spearman_lower_triangle, Attribute, PromptMeta,
};
use headlens::tasks::{Concept, Format};
use headlens::HeadLocator;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_meta(rng: &mut impl Rng, n: usize) -> Vec<PromptMeta> {
    (0..n)
        .map(|i| PromptMeta {
            prompt_id: format!("p{i}"),
            concept: Concept::ALL[rng.gen_range(0..3)],
            format: Format::ALL[rng.gen_range(0..3)],
        })
        .collect()
}

/// Coordinates from {-1, 0, 1} so the RSM is full of ties.
fn tie_heavy_vectors(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1i32..=1) as f32).collect();
            if v.iter().any(|&x| x != 0.0) {
                break v;
            }
        })
        .collect()
}

#[test]
fn spearman_matches_brute_force_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut defined = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(3..=12);
        let meta = random_meta(&mut rng, n);
        let ids: Vec<&str> = meta.iter().map(|m| m.prompt_id.as_str()).collect();
        let d = rng.gen_range(1..5);
        let vecs = tie_heavy_vectors(&mut rng, n, d);
        let rsm = similarity_of(&ids, &vecs).unwrap();
        for attr in [Attribute::Concept, Attribute::QuestionType] {
            let dm = build_design_matrix(&meta, attr);
            let got = spearman_lower_triangle(&rsm, &dm).unwrap();
            let want = brute_spearman(&rsm.lower_triangle(), &dm.lower_triangle());
            match (got, want) {
                (Some(a), Some(b)) => {
                    defined += 1;
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
                (None, None) => {}
                other => panic!("defined on one side only: {other:?}"),
            }
        }
    }
    assert!(defined > 1000);
}

#[test]
fn all_heads_scoring_matches_the_single_matrix_path() {
    let fx = planted_records(5, &[Concept::Antonym, Concept::Synonym, Concept::Causal], 3, 4.0);
    let scores = concept_rsa_all_heads(&fx.config, &fx.records, &fx.meta).unwrap();
    let cdm = build_design_matrix(&fx.meta, Attribute::Concept);
    let qdm = build_design_matrix(&fx.meta, Attribute::QuestionType);
    for h in fx.config.heads() {
        let rsm = build_rsm(&fx.records, &[h]).unwrap();
        let c = brute_spearman(&rsm.lower_triangle(), &cdm.lower_triangle()).unwrap();
        let q = brute_spearman(&rsm.lower_triangle(), &qdm.lower_triangle()).unwrap();
        assert!((scores.concept.get(h).unwrap() - c).abs() < 1e-12);
        assert!((scores.question_type.get(h).unwrap() - q).abs() < 1e-12);
    }
}

#[test]
fn rsm_matches_brute_force_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let heads = [HeadLocator::new(0, 0), HeadLocator::new(0, 1), HeadLocator::new(1, 0)];
    for _ in 0..50 {
        let n = rng.gen_range(2..15);
        let recs = common::random_records(&mut rng, n, 6, &heads);
        let pick: Vec<HeadLocator> = heads.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
        let pick = if pick.is_empty() { vec![heads[0]] } else { pick };
        let rsm = build_rsm(&recs, &pick).unwrap();
        let summed: Vec<Vec<f64>> = recs
            .iter()
            .map(|r| {
                let mut acc = vec![0.0f64; 6];
                for &h in &pick {
                    for (a, &b) in acc.iter_mut().zip(r.head(h).unwrap()) {
                        *a += b as f64;
                    }
                }
                acc
            })
            .collect();
        for i in 0..n {
            for k in 0..n {
                let want = brute_cosine(&summed[i], &summed[k]);
                assert!((rsm.get(i, k) - want).abs() < 1e-12, "({i},{k})");
            }
            assert_eq!(rsm.get(i, i), 1.0);
        }
    }
}

#[test]
fn zero_vector_has_no_cosine() {
    let ids = ["a", "b", "c"];
    let vecs = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]];
    let err = similarity_of(&ids, &vecs).unwrap_err();
    assert!(err.to_string().contains('b'), "{err}");
}

#[test]
fn planted_heads_are_recovered() {
    let fx = planted_records(1, &[Concept::Antonym, Concept::Synonym], 10, 100.0);
    let scores = concept_rsa_all_heads(&fx.config, &fx.records, &fx.meta).unwrap();
    assert_eq!(scores.concept.ranking()[0], fx.concept_head);
    assert!(scores.concept.get(fx.concept_head).unwrap() > 0.8);
    assert_eq!(scores.question_type.ranking()[0], fx.format_head);
}

proptest! {
    #[test]
    fn ranks_are_a_permutation_average(xs in prop::collection::vec(-5i32..5, 1..40)) {
        let x: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let r = average_ranks(&x);
        let n = x.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        prop_assert_eq!(r, common::brute_ranks(&x));
    }

    #[test]
    fn spearman_is_invariant_under_monotone_maps(
        pairs in prop::collection::vec((-20i32..20, -20i32..20), 3..40),
        shift in -100i32..100,
        scale_pow in 0u32..6,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let base = spearman(&x, &y);
        // Integer cubes and power-of-two scalings are exact, so ties are preserved.
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v + shift as f64).collect();
        let scaled: Vec<f64> = y.iter().map(|v| v * (1u64 << scale_pow) as f64).collect();
        let a = spearman(&cubed, &scaled);
        prop_assert_eq!(base.is_some(), a.is_some());
        if let (Some(b), Some(a)) = (base, a) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(b.abs() <= 1.0 + 1e-12);
            let swapped = spearman(&y, &x).unwrap();
            prop_assert!((swapped - b).abs() < 1e-12);
            let neg: Vec<f64> = y.iter().map(|v| -v).collect();
            prop_assert!((spearman(&x, &neg).unwrap() + b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_ignores_positive_scaling(
        vals in prop::collection::vec(-10i32..10, 12),
        pow in 0u32..8,
    ) {
        let v: Vec<Vec<f32>> = vals.chunks(3).map(|c| c.iter().map(|&x| x as f32 + 0.5).collect()).collect();
        let scaled: Vec<Vec<f32>> = v.iter().map(|r| r.iter().map(|x| x * (1u32 << pow) as f32).collect()).collect();
        let ids = ["a", "b", "c", "d"];
        let a = similarity_of(&ids, &v).unwrap();
        let b = similarity_of(&ids, &scaled).unwrap();
        for i in 0..4 {
            for k in 0..4 {
                prop_assert!((a.get(i, k) - b.get(i, k)).abs() < 1e-12);
                prop_assert!((a.get(i, k) - a.get(k, i)).abs() == 0.0);
            }
        }
    }
}
