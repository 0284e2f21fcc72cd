//! Run every stage of a config into a scratch output directory.
//!
//!     cargo run --example run_pipeline -- configs/toy.json

use std::path::PathBuf;

use headlens::pipeline::{ConfigEdits, Pipeline, Stage};

fn main() -> headlens::Result<()> {
    let config: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json").into())
        .into();
    let out = std::env::temp_dir().join("headlens-example");
    let edits = ConfigEdits {
        overrides: vec![
            format!("output_dir={}", serde_json::to_string(&out).unwrap()),
            "n_prompts=6".into(),
            "steering.n_prompts=8".into(),
            "steering.k=1".into(),
            "steering.alpha=1".into(),
        ],
        exclude: vec![],
    };
    let pipeline = Pipeline::from_file(&config, &edits)?;
    println!("config hash {}", pipeline.config_hash());
    for stage in Stage::ALL {
        let t = std::time::Instant::now();
        let dir = pipeline.run_stage(stage)?;
        println!("{stage:<8} {:>6.2}s  {}", t.elapsed().as_secs_f64(), dir.display());
    }
    Ok(())
}
