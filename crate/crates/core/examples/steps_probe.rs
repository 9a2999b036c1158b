// scratch probe: steps needed for pair separation on the 64-record set
use mdse_core::harness::config::RunConfig;
use mdse_core::harness::evalrun;
use mdse_core::harness::manifest::DatasetManifest;
use mdse_core::harness::synth::{generate_dataset, SynthSpec};
use mdse_core::harness::train;
use mdse_core::metrics;
use std::time::Instant;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { n_records: 64, context_pairs: true, ..SynthSpec::default() };
    let path = generate_dataset(dir.path(), &spec).unwrap();
    let (manifest, base) = DatasetManifest::load(&path).unwrap();
    for steps in [400usize, 600] {
        let mut cfg = RunConfig::default();
        cfg.train.steps = steps;
        let t0 = Instant::now();
        let out = train::train(&manifest, &base, &cfg).unwrap();
        let r = evalrun::retrieve(&out.model, &out.prepared, &cfg.train.ablation).unwrap();
        println!("steps={steps}: R@1={:.3} last_loss={:.3} ({:.0}s)",
            metrics::recall_at_k(&r, 1), out.trace.last().unwrap().total, t0.elapsed().as_secs_f64());
    }
}
