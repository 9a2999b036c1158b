// scratch probe: desk-model gradcheck timing and error
use mdse_core::harness::config::RunConfig;
use mdse_core::harness::gradcheckrun::model_gradcheck;

fn main() {
    let cfg = RunConfig::default();
    let report = model_gradcheck(&cfg, mdse_core::harness::gradcheckrun::DEFAULT_FULL_BELOW, Some(mdse_core::harness::gradcheckrun::DEFAULT_SAMPLES_CAP), 42).unwrap();
    let worst = report.worst().unwrap();
    println!("coords={} max_rel_err={:.3e} elapsed={:.1}s worst={} ({} checked of {})",
        report.coords_checked, report.max_rel_err, report.elapsed_secs, worst.name, worst.checked, worst.numel);
}
