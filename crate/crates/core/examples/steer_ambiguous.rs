//! Steer the planted model on ambiguous antonym/translation prompts with a
//! function vector and a concept vector, layer by layer.

use headlens::patching::{Metric, ScoreTable};
use headlens::prompts::encode_all;
use headlens::rsa::{concept_rsa_all_heads, PromptMeta, VectorKind};
use headlens::steering::{kl_consistency, steer_sweep, summarize, zero_shot_sweep, SteerPrompt, SweepOptions};
use headlens::tasks::{build_ambiguous_dataset, build_dataset, bundled, Concept, ConceptPairs, DatasetId, DatasetParams, Format};
use headlens::toy::PlantedModel;
use headlens::vectors::{steering_vector, HeadSelection};

fn main() -> headlens::Result<()> {
    let concepts = bundled::concepts()?;
    let table = bundled::translation_table()?;
    let planted = PlantedModel::build(&concepts, &table)?;
    let model = &planted.model;

    // Extraction prompts for every concept, needed for Concept-RSA.
    let mut records = Vec::new();
    let mut meta = Vec::new();
    for pairs in &concepts {
        for format in Format::ALL {
            let params = DatasetParams {
                n_prompts: 6,
                shots: format.default_shots(),
                seed: 4,
            };
            let specs = build_dataset(pairs, format, &params, Some(&table))?;
            for p in encode_all(model, &specs)? {
                records.push(model.capture(&p.prompt_id, &p.tokens, false)?);
            }
            meta.extend(specs.iter().map(PromptMeta::from));
        }
    }
    let cv_table = concept_rsa_all_heads(model.config(), &records, &meta)?.concept;
    let fv_table = ScoreTable::from_fn(Metric::Aie, "planted", model.config(), |h| {
        Some(if h == planted.function_head { 1.0 } else { 0.0 })
    });

    let antonym = &concepts[Concept::ALL.iter().position(|&c| c == Concept::Antonym).unwrap()];
    let translation = ConceptPairs::from_translation_table(&table, table.iter().map(|(k, _)| k))?;
    let amb = build_ambiguous_dataset(antonym, &translation, 20, 9)?;
    let few: Vec<_> = amb.iter().map(|a| SteerPrompt::ambiguous(model, a)).collect::<headlens::Result<_>>()?;
    let zero: Vec<_> = amb
        .iter()
        .map(|a| SteerPrompt::ambiguous_zero_shot(model, a))
        .collect::<headlens::Result<_>>()?;
    let opts = SweepOptions::new((0..model.config().n_layers).collect(), 1.0);

    let extract = |format: Format, sel: &HeadSelection| {
        let id = DatasetId::new(Concept::Antonym, format);
        let idx: Vec<usize> = (0..meta.len())
            .filter(|&i| meta[i].concept == id.concept && meta[i].format == format)
            .collect();
        let recs: Vec<_> = idx.iter().map(|&i| records[i].clone()).collect();
        steering_vector(&recs, sel, id)
    };
    for (kind, table, k) in [(VectorKind::Function, &fv_table, 1), (VectorKind::Concept, &cv_table, 6)] {
        let sel = HeadSelection::top_k(kind, table, k)?;
        let id_vec = extract(Format::OpenEndedEn, &sel)?;
        let ood_vec = extract(Format::MultipleChoice, &sel)?;
        let id_out = steer_sweep(model, &few, &id_vec, &opts)?;
        let heads: Vec<String> = sel.heads.iter().map(ToString::to_string).collect();
        println!("{kind} (K={k}, heads {})", heads.join(" "));
        for s in summarize(&id_out) {
            println!("  layer {}: mean dP {:+.3}  top-1 {:.2}", s.layer, s.mean_delta_p, s.top1_acc);
        }
        let zs = summarize(&zero_shot_sweep(model, &zero, &id_vec, &opts)?);
        let best = zs.iter().map(|s| s.mean_delta_p).fold(f64::NEG_INFINITY, f64::max);
        println!("  zero-shot best mean dP {best:+.3}");
        let kl = kl_consistency(model, &few, &id_vec, &ood_vec, &id_out, opts.alpha)?;
        println!("  KL(OE_EN vector || MC vector) over layers {:?}: {:.4}", kl.layers, kl.mean_kl);
    }
    Ok(())
}
