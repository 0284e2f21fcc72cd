//! Build the planted toy model from the bundled word pairs and write it to
//! disk in the weight format `Model::load` reads.
//!
//!     cargo run --example save_planted_model -- target/planted

use std::path::PathBuf;

use headlens::runtime::HookSet;
use headlens::tasks::bundled;
use headlens::toy::PlantedModel;
use headlens::Model;

fn main() -> headlens::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "target/planted-model".into()).into();
    let planted = PlantedModel::build(&bundled::concepts()?, &bundled::translation_table()?)?;
    planted.model.save(&dir)?;
    println!("wrote {}", dir.display());
    println!("function head {}", planted.function_head);

    let back = Model::load(&dir)?;
    let tokens = back.tokenizer().encode_prompt("hot:")?;
    let a = planted.model.forward(&tokens, &HookSet::new())?.probs;
    let b = back.forward(&tokens, &HookSet::new())?.probs;
    assert_eq!(a, b);
    println!("reloaded model gives identical output");
    Ok(())
}
