//! Random toy model: run a prompt, capture every head's final-token output
//! and check that heads plus MLPs rebuild the residual stream.

use headlens::runtime::HookSet;
use headlens::toy::{random_config, random_model, random_prompt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> headlens::Result<()> {
    let config = random_config();
    let model = random_model(&config, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = random_prompt(&model, &mut rng, 12);

    let out = model.forward(&tokens, &HookSet::new().capture_all_heads().capture_residual())?;
    let record = out.clone().into_record("demo", config.d_model)?;
    let residual = out.residual.expect("residual requested");
    println!("{} layers x {} heads, d_model {}", config.n_layers, config.n_heads_per_layer, config.d_model);

    for l in 0..config.n_layers {
        let mut rebuilt = residual.layers[l].clone();
        for j in 0..config.n_heads_per_layer {
            let h = record.require(headlens::HeadLocator::new(l, j))?;
            rebuilt.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        }
        rebuilt.iter_mut().zip(&residual.mlp[l]).for_each(|(a, b)| *a += b);
        let target = &residual.layers[l + 1];
        let err: f32 = rebuilt.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
        let norm: f32 = target.iter().map(|x| x * x).sum::<f32>().sqrt();
        println!("layer {l}: relative reconstruction error {:.2e}", err / norm);
    }

    let top = out.probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    println!("top next token id {} with p = {:.4}", top.0, top.1);
    Ok(())
}
