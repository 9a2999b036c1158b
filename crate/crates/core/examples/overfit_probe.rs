// scratch probe: 16-record overfit run with default settings
use mdse_core::harness::config::RunConfig;
use mdse_core::harness::evalrun;
use mdse_core::harness::manifest::DatasetManifest;
use mdse_core::harness::synth::{generate_dataset, SynthSpec};
use mdse_core::harness::train;
use mdse_core::metrics;
use mdse_core::text::tokenize;
use std::time::Instant;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { n_records: 16, ..SynthSpec::default() };
    let path = generate_dataset(dir.path(), &spec).unwrap();
    let (manifest, base) = DatasetManifest::load(&path).unwrap();
    let cfg = RunConfig::default();
    let t0 = Instant::now();
    let out = train::train(&manifest, &base, &cfg).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    let first = out.trace.first().unwrap();
    let last = out.trace.last().unwrap();
    println!("train time: {train_time:.1}s");
    println!("first: total={:.4} itc={:.4} itm={:.4} itg={:.4}", first.total, first.itc, first.itm, first.itg);
    println!("last:  total={:.4} itc={:.4} itm={:.4} itg={:.4}", last.total, last.itc, last.itm, last.itg);
    println!("halved: {}", last.total < 0.5 * first.total);

    let retrieval = evalrun::retrieve(&out.model, &out.prepared, &cfg.train.ablation).unwrap();
    println!("R@1 = {}", metrics::recall_at_k(&retrieval, 1));

    let mut exact = 0;
    for rec in &out.prepared {
        let cap = evalrun::caption_record(&out.model, rec, &cfg.train.ablation).unwrap();
        let hit = tokenize(&rec.captions[0]) == tokenize(&cap);
        if hit { exact += 1; } else { println!("  miss {}: '{}' vs '{}'", rec.image_id, cap, rec.captions[0]); }
    }
    println!("exact captions: {exact}/16");
    println!("total time: {:.1}s", t0.elapsed().as_secs_f64());
}
