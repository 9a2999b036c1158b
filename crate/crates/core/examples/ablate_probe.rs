// scratch probe: ablation ordering on the context-paired 64-record set
use mdse_core::harness::config::RunConfig;
use mdse_core::harness::evalrun;
use mdse_core::harness::manifest::DatasetManifest;
use mdse_core::harness::synth::{generate_dataset, SynthSpec};
use std::time::Instant;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { n_records: 64, context_pairs: true, ..SynthSpec::default() };
    let path = generate_dataset(dir.path(), &spec).unwrap();
    let (manifest, base) = DatasetManifest::load(&path).unwrap();
    let mut cfg = RunConfig::default(); cfg.train.steps = 400;
    let t0 = Instant::now();
    let report = evalrun::ablate(&manifest, &base, &cfg).unwrap();
    for (name, res) in &report.variants {
        println!("{name:16} R@1={:.3} cider={:.3} loss={:.3} exact={}", res.r_at_1, res.cider, res.final_loss, res.exact_captions);
    }
    println!("elapsed: {:.0}s", t0.elapsed().as_secs_f64());
}
