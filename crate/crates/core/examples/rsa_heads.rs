//! Representational similarity analysis on the planted model: score every
//! head against the concept and question-type design matrices, then compare
//! summed FV and CV head sets.

use headlens::patching::{Metric, ScoreTable};
use headlens::prompts::encode_all;
use headlens::rsa::{compare_vector_rsa, concept_rsa_all_heads, PromptMeta};
use headlens::tasks::{build_dataset, bundled, DatasetParams, Format};
use headlens::toy::PlantedModel;

fn main() -> headlens::Result<()> {
    let concepts = bundled::concepts()?;
    let table = bundled::translation_table()?;
    let planted = PlantedModel::build(&concepts, &table)?;
    let model = &planted.model;

    let mut records = Vec::new();
    let mut meta = Vec::new();
    for pairs in &concepts {
        for format in Format::ALL {
            let params = DatasetParams {
                n_prompts: 6,
                shots: format.default_shots(),
                seed: 2,
            };
            let specs = build_dataset(pairs, format, &params, Some(&table))?;
            for p in encode_all(model, &specs)? {
                records.push(model.capture(&p.prompt_id, &p.tokens, false)?);
            }
            meta.extend(specs.iter().map(PromptMeta::from));
        }
    }
    let scores = concept_rsa_all_heads(model.config(), &records, &meta)?;
    let planted_heads: Vec<String> = planted.concept_heads.iter().map(ToString::to_string).collect();
    println!("Concept-RSA top heads (planted: {}):", planted_heads.join(" "));
    for h in scores.concept.top_k(6) {
        println!(
            "  {h}: concept {:+.3}  question type {:+.3}",
            scores.concept.get(h).unwrap(),
            scores.question_type.get(h).unwrap_or(f64::NAN)
        );
    }
    let qt = scores.question_type.top_k(1)[0];
    println!("QuestionType-RSA top head: {qt} (planted: {})", planted.question_type_head);

    // A stand-in FV table that ranks the planted function head first.
    let fv = ScoreTable::from_fn(Metric::Aie, "planted", model.config(), |h| {
        Some(if h == planted.function_head { 1.0 } else { 0.0 })
    });
    let rows = compare_vector_rsa(&records, &meta, &fv, &scores.concept, &[1, 5], |_, _, _| Ok(()))?;
    println!("K  kind  concept  question-type");
    for r in rows {
        println!(
            "{:<2} {:<5} {:+.3}   {:+.3}",
            r.k,
            r.kind,
            r.concept_rsa.unwrap_or(f64::NAN),
            r.question_type_rsa.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
