//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls into the code it checks.

#![allow(dead_code)]

use headlens::rsa::PromptMeta;
use headlens::runtime::{ActivationRecord, ModelConfig};
use headlens::tasks::{Concept, Format};
use headlens::HeadLocator;
use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mid-ranks by counting: rank_i = 1 + #{x_j < x_i} + #{j != i : x_j == x_i} / 2.
pub fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &xi)| {
            let less = x.iter().filter(|&&v| v < xi).count() as f64;
            let ties = x.iter().enumerate().filter(|&(j, &v)| j != i && v == xi).count() as f64;
            1.0 + less + ties / 2.0
        })
        .collect()
}

/// Pearson correlation of the mid-ranks, two-pass. `None` when either side is constant.
pub fn brute_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let rx = brute_ranks(x);
    let ry = brute_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

pub fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Pr[|A ∩ B| >= x] for A, B drawn uniformly from the K-subsets of N items,
/// by listing every pair of subsets.
pub fn enumerate_tail(n: u32, k: u32, x: u32) -> f64 {
    let subsets: Vec<u32> = (0u32..1 << n).filter(|m| m.count_ones() == k).collect();
    let mut hits = 0u64;
    for &a in &subsets {
        for &b in &subsets {
            if (a & b).count_ones() >= x {
                hits += 1;
            }
        }
    }
    hits as f64 / (subsets.len() as f64 * subsets.len() as f64)
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Exact rational tail: sum over i >= x of C(K,i) C(N-K,K-i) / C(N,K).
pub fn rational_tail(n: u64, k: u64, x: u64) -> f64 {
    let mut num = BigUint::zero();
    for i in x..=k {
        if k - i <= n - k {
            num += binomial(k, i) * binomial(n - k, k - i);
        }
    }
    let r = BigRational::new(num.into(), binomial(n, k).into());
    r.to_f64().unwrap()
}

/// Synthetic records with a planted concept-invariant head and a planted
/// question-type head. Every other head is isotropic noise.
pub struct PlantedRecords {
    pub config: ModelConfig,
    pub records: Vec<ActivationRecord>,
    pub meta: Vec<PromptMeta>,
    pub concept_head: HeadLocator,
    pub format_head: HeadLocator,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; good enough for fixture noise.
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `concepts` x all formats x `per_cell` prompts. Signal vectors have norm
/// `snr`, noise vectors norm 1.
pub fn planted_records(seed: u64, concepts: &[Concept], per_cell: usize, snr: f64) -> PlantedRecords {
    let config = headlens::toy::random_config();
    let d = config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concept_head = HeadLocator::new(2, 5);
    let format_head = HeadLocator::new(0, 1);
    let concept_dirs: Vec<Vec<f64>> = concepts.iter().map(|_| unit(&mut rng, d)).collect();
    let oe_dir = unit(&mut rng, d);
    let mc_dir = unit(&mut rng, d);
    let heads: Vec<HeadLocator> = config.heads().collect();
    let mut records = Vec::new();
    let mut meta = Vec::new();
    for (ci, &concept) in concepts.iter().enumerate() {
        for format in Format::ALL {
            for p in 0..per_cell {
                let id = format!("{concept}/{format}/{p}");
                let mut data = Vec::with_capacity(heads.len() * d);
                for &h in &heads {
                    let noise = unit(&mut rng, d);
                    let signal: Option<&Vec<f64>> = if h == concept_head {
                        Some(&concept_dirs[ci])
                    } else if h == format_head {
                        Some(if format == Format::MultipleChoice { &mc_dir } else { &oe_dir })
                    } else {
                        None
                    };
                    for i in 0..d {
                        let s = signal.map_or(0.0, |s| snr * s[i]);
                        data.push((s + noise[i]) as f32);
                    }
                }
                records.push(ActivationRecord::new(&id, d, heads.clone(), data, None).unwrap());
                meta.push(PromptMeta {
                    prompt_id: id,
                    concept,
                    format,
                });
            }
        }
    }
    PlantedRecords {
        config,
        records,
        meta,
        concept_head,
        format_head,
    }
}

/// Records whose values are uniform in `[-1, 1]`, over the given heads.
pub fn random_records(rng: &mut impl Rng, n: usize, d: usize, heads: &[HeadLocator]) -> Vec<ActivationRecord> {
    (0..n)
        .map(|i| {
            let data = (0..heads.len() * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            ActivationRecord::new(format!("p{i}"), d, heads.to_vec(), data, None).unwrap()
        })
        .collect()
}

/// Records holding small integers, so every f32 sum of them is exact.
pub fn integer_records(rng: &mut impl Rng, n: usize, d: usize, heads: &[HeadLocator]) -> Vec<ActivationRecord> {
    (0..n)
        .map(|i| {
            let data = (0..heads.len() * d).map(|_| rng.gen_range(-1000i32..=1000) as f32).collect();
            ActivationRecord::new(format!("p{i}"), d, heads.to_vec(), data, None).unwrap()
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f32> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| (x / s) as f32).collect()
}
