mod common;

use common::softmax;
use headlens::rsa::VectorKind;
use headlens::steering::{
    grid_search, kl_divergence, steer_sweep, summarize, SteerPrompt, SweepOptions, KL_FLOOR,
};
use headlens::tasks::{Concept, DatasetId, Format};
use headlens::toy::{random_config, random_model, random_prompt};
use headlens::vectors::{Provenance, SteeringVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn kl_of_identical_distributions_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.gen_range(2..300);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let p = softmax(&logits);
        assert!(kl_divergence(&p, &p).abs() <= 1e-8);
    }
}

#[test]
fn kl_three_token_closed_form() {
    // Dyadic probabilities are exact in f32.
    let p = [0.5f32, 0.25, 0.25];
    let q = [0.25f32, 0.5, 0.25];
    let want = 0.5 * 2f64.ln() + 0.25 * 0.5f64.ln();
    assert!((kl_divergence(&p, &q) - want).abs() < 1e-12);
    let want_rev = 0.25 * 0.5f64.ln() + 0.5 * 2f64.ln();
    assert!((kl_divergence(&q, &p) - want_rev).abs() < 1e-12);

    let p = [0.75f32, 0.125, 0.125];
    let q = [0.125f32, 0.125, 0.75];
    let want = 0.75 * 6f64.ln() + 0.125 * (1.0f64 / 6.0).ln();
    assert!((kl_divergence(&p, &q) - want).abs() < 1e-12);
}

#[test]
fn kl_is_non_negative_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..10_000 {
        let n = rng.gen_range(2..64);
        let spread = rng.gen_range(0.01..30.0);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-spread..spread)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-spread..spread)).collect();
        let (mut p, mut q) = (softmax(&a), softmax(&b));
        if i % 7 == 0 {
            // exact zeros on either side
            p[0] = 0.0;
            q[n - 1] = 0.0;
        }
        let kl = kl_divergence(&p, &q);
        assert!(kl >= 0.0 && kl.is_finite(), "{kl}");
    }
}

#[test]
fn kl_floor_bounds_zero_targets() {
    let p = [1.0f32, 0.0];
    let q = [0.0f32, 1.0];
    let kl = kl_divergence(&p, &q);
    assert!((kl - (1.0 / KL_FLOOR).ln()).abs() < 1e-9);
}

#[test]
fn grid_search_prefers_smaller_settings_on_ties() {
    let g = grid_search(&[10, 5, 1], &[2.0, 1.0], |_, _| Ok(0.5)).unwrap();
    assert_eq!((g.best.k, g.best.alpha), (1, 1.0));
    assert_eq!(g.cells.len(), 6);
    let g = grid_search(&[1, 5, 10], &[1.0, 2.0, 3.0], |k, a| Ok(-((k as f64 - 5.0).powi(2)) - (a as f64 - 2.0).powi(2)))
        .unwrap();
    assert_eq!((g.best.k, g.best.alpha), (5, 2.0));
    assert!(grid_search(&[], &[1.0], |_, _| Ok(0.0)).is_err());
    assert!(grid_search(&[1], &[1.0], |_, _| Ok(f64::NAN)).is_err());
}

fn vector(values: Vec<f32>) -> SteeringVector {
    SteeringVector {
        values,
        provenance: Provenance {
            method: VectorKind::Function,
            k: 1,
            heads: vec![],
            dataset: DatasetId::new(Concept::Antonym, Format::OpenEndedEn),
            n_prompts: 1,
        },
    }
}

#[test]
fn sweep_reports_probability_differences() {
    let config = random_config();
    let model = random_model(&config, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prompts: Vec<SteerPrompt> = (0..6)
        .map(|i| SteerPrompt {
            prompt_id: format!("p{i}"),
            tokens: random_prompt(&model, &mut rng, 8),
            gold: rng.gen_range(0..config.vocab_size.min(40) as u32),
            competitor: Some(7),
        })
        .collect();
    let v = vector((0..config.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect());

    let zero = steer_sweep(&model, &prompts, &v, &SweepOptions::new(vec![0, 3], 0.0)).unwrap();
    assert!(zero.iter().all(|o| o.delta_p == 0.0 && o.competitor_delta == Some(0.0)));

    let mut opts = SweepOptions::new(vec![1, 2], 4.0);
    opts.keep_distributions = true;
    let out = steer_sweep(&model, &prompts, &v, &opts).unwrap();
    assert_eq!(out.len(), prompts.len() * 2);
    for o in &out {
        let p = prompts.iter().find(|p| p.prompt_id == o.prompt_id).unwrap();
        let after = model.forward_with_injection(&p.tokens, o.layer, &v.values, 4.0).unwrap();
        assert_eq!(o.p_after, after[p.gold as usize] as f64);
        assert_eq!(o.delta_p, o.p_after - o.p_before);
        assert_eq!(o.post.as_deref(), Some(after.as_slice()));
        let gains: Vec<f64> = o.top_deltas.iter().map(|t| t.delta).collect();
        assert!(gains.windows(2).all(|w| w[0] >= w[1]));
    }
    let s = summarize(&out);
    assert_eq!(s.len(), 2);
    for row in &s {
        let mean = out.iter().filter(|o| o.layer == row.layer).map(|o| o.delta_p).sum::<f64>() / prompts.len() as f64;
        assert!((row.mean_delta_p - mean).abs() < 1e-12);
    }
}
