//! Render one antonym prompt in each format, its corrupted twin and one
//! ambiguous prompt.

use headlens::tasks::{
    build_ambiguous_dataset, build_dataset, bundled, corrupt_prompt, distractor_pool, render_prompt, Concept,
    ConceptPairs, DatasetParams, Format,
};

fn main() -> headlens::Result<()> {
    let concepts = bundled::concepts()?;
    let table = bundled::translation_table()?;
    let (antonym, _) = bundled::concept(Concept::Antonym)?;

    for format in Format::ALL {
        let params = DatasetParams {
            n_prompts: 1,
            shots: format.default_shots(),
            seed: 3,
        };
        let spec = &build_dataset(&antonym, format, &params, Some(&table))?[0];
        let pool = distractor_pool(&concepts, Concept::Antonym, format, Some(&table))?;
        let corrupted = corrupt_prompt(spec, &pool, 11)?;
        println!("== {format} (gold {:?})\n{}", spec.gold, render_prompt(spec));
        println!("-- corrupted\n{}\n", render_prompt(&corrupted));
    }

    let translation = ConceptPairs::from_translation_table(&table, table.iter().map(|(k, _)| k))?;
    let amb = &build_ambiguous_dataset(&antonym, &translation, 1, 5)?[0];
    println!(
        "== ambiguous: {} vs {} (gold {:?}, competitor {:?})\n{}",
        amb.primary,
        amb.secondary,
        amb.gold,
        amb.competitor,
        render_prompt(&amb.to_prompt_spec())
    );
    Ok(())
}
