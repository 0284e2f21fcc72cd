//! Activation patching on the planted model: AIE of every head within
//! formats, then across formats.

use headlens::patching::{aie, cross_format_aie, MeanActivationCache, PatchDataset};
use headlens::prompts::encode_all;
use headlens::tasks::{build_dataset, bundled, corrupt_prompt, distractor_pool, DatasetId, DatasetParams, Format};
use headlens::toy::PlantedModel;

fn main() -> headlens::Result<()> {
    let concepts = bundled::concepts()?;
    let table = bundled::translation_table()?;
    let planted = PlantedModel::build(&concepts, &table)?;
    let model = &planted.model;

    let mut clean = Vec::new();
    let mut patch = Vec::new();
    for pairs in concepts.iter().take(3) {
        for format in Format::ALL {
            let id = DatasetId::new(pairs.concept, format);
            let params = DatasetParams {
                n_prompts: 8,
                shots: format.default_shots(),
                seed: 1,
            };
            let specs = build_dataset(pairs, format, &params, Some(&table))?;
            let pool = distractor_pool(&concepts, pairs.concept, format, Some(&table))?;
            let corrupted = specs
                .iter()
                .enumerate()
                .map(|(i, s)| corrupt_prompt(s, &pool, i as u64))
                .collect::<headlens::Result<Vec<_>>>()?;
            clean.push((id, encode_all(model, &specs)?));
            patch.push(PatchDataset {
                id,
                corrupted: encode_all(model, &corrupted)?,
            });
        }
    }
    let cache = MeanActivationCache::build(model, &clean)?;
    let result = aie(model, &patch, &cache, &[])?;
    println!("top heads by AIE (planted function head is {}):", planted.function_head);
    for h in result.table.top_k(5) {
        println!("  {h}: {:+.4}", result.table.get(h).unwrap());
    }

    for (src, tgt) in [(Format::OpenEndedEn, Format::MultipleChoice), (Format::MultipleChoice, Format::OpenEndedL2)] {
        let x = cross_format_aie(model, src, tgt, &patch, &cache)?;
        let top = x.table.top_k(1)[0];
        println!("{src} means into {tgt} prompts: top head {top} ({:+.4})", x.table.get(top).unwrap());
    }
    Ok(())
}
