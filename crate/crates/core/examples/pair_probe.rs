// scratch probe: do paired records get distinct image features via the gate?
use mdse_core::harness::config::RunConfig;
use mdse_core::harness::manifest::DatasetManifest;
use mdse_core::harness::synth::{generate_dataset, SynthSpec};
use mdse_core::harness::train;
use mdse_core::model;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { n_records: 8, context_pairs: true, ..SynthSpec::default() };
    let path = generate_dataset(dir.path(), &spec).unwrap();
    let (manifest, base) = DatasetManifest::load(&path).unwrap();
    for (i, r) in manifest.records.iter().enumerate() {
        println!("rec {i}: ctx={} cap='{}'", r.context_category, r.captions[0]);
    }
    let mut cfg = RunConfig::default();
    cfg.train.steps = 100;
    let out = train::train(&manifest, &base, &cfg).unwrap();
    let a = model::image_query_features(&out.model, &out.prepared[0].visual, &out.prepared[0].context, &cfg.train.ablation).unwrap();
    let b = model::image_query_features(&out.model, &out.prepared[1].visual, &out.prepared[1].context, &cfg.train.ablation).unwrap();
    println!("pair feature max-diff: {:.6}", a.max_abs_diff(&b));
    println!("ctx ids: {} vs {}", out.prepared[0].context.category_id, out.prepared[1].context.category_id);
    // text features of the two captions
    let ta = model::text_features(&out.model, &out.prepared[0].caption_ids[0]).unwrap();
    let tb = model::text_features(&out.model, &out.prepared[1].caption_ids[0]).unwrap();
    println!("text feature max-diff: {:.6}", ta.max_abs_diff(&tb));
    // cross sims
    println!("sim(a, ta)={:.4} sim(a, tb)={:.4}", model::max_query_cosine(&a, &ta), model::max_query_cosine(&a, &tb));
    println!("sim(b, ta)={:.4} sim(b, tb)={:.4}", model::max_query_cosine(&b, &ta), model::max_query_cosine(&b, &tb));
}
