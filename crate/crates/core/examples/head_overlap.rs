//! Overlap between two top-K head sets and its hypergeometric tail.

use headlens::patching::{Metric, ScoreTable};
use headlens::rsa::VectorKind;
use headlens::runtime::ModelConfig;
use headlens::toy::random_config;
use headlens::vectors::{head_overlap, hypergeometric_tail, HeadSelection};

fn main() -> headlens::Result<()> {
    // 1024 heads, 50 picked twice, 12 shared.
    println!("P[X >= 12 | N=1024, K=50] = {:.3e}", hypergeometric_tail(1024, 50, 12));
    println!("P[X >= 3  | N=1024, K=50] = {:.3e}", hypergeometric_tail(1024, 50, 3));

    let config: ModelConfig = random_config();
    let n = config.total_heads();
    // Two score tables that agree on their best heads.
    let flat = |h: headlens::HeadLocator| h.layer * config.n_heads_per_layer + h.head;
    let a = ScoreTable::from_fn(Metric::Aie, "demo", &config, |h| Some((n - flat(h)) as f64));
    let b = ScoreTable::from_fn(Metric::ConceptRsa, "demo", &config, |h| {
        let i = flat(h);
        Some(if i % 2 == 0 { (n - i) as f64 } else { -(i as f64) })
    });
    for k in [2, 4, 8] {
        let fv = HeadSelection::top_k(VectorKind::Function, &a, k)?;
        let cv = HeadSelection::top_k(VectorKind::Concept, &b, k)?;
        let r = head_overlap(&fv, &cv)?;
        println!("K={k}: overlap {} of {n} heads, p = {:.4}, significant: {}", r.overlap, r.p_value, r.significant);
    }
    Ok(())
}
