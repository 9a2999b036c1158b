//! `mdse` — train, evaluate, and poke the desk-scale captioning stack.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mdse_core::enhance::{enhance_with_stages, EnhanceStages};
use mdse_core::harness::checkpoint;
use mdse_core::harness::config::RunConfig;
use mdse_core::harness::evalrun;
use mdse_core::harness::gradcheckrun::{
    model_gradcheck, DEFAULT_FULL_BELOW, DEFAULT_SAMPLES_CAP,
};
use mdse_core::harness::manifest::DatasetManifest;
use mdse_core::harness::synth::{generate_dataset, SynthSpec};
use mdse_core::harness::train;
use mdse_core::imageio;
use mdse_core::lora;
use mdse_core::metrics;
use mdse_core::model::{caption_visual, prepare_visual, MdseModel};

#[derive(Parser)]
#[command(name = "mdse", version, about = "Desk-scale vision-language captioning stack")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone, Default)]
struct AblationArgs {
    /// Skip the enhancement front end.
    #[arg(long)]
    no_fe: bool,
    /// Zero region pathway (no masks), fusion kept.
    #[arg(long)]
    no_sam: bool,
    /// Global pathway only, no fusion.
    #[arg(long)]
    no_dual: bool,
    /// Plain cross-attention without the context gate.
    #[arg(long)]
    no_context_gate: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the enhancement pipeline over one PNG.
    Enhance {
        input: PathBuf,
        output: PathBuf,
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable the exposure-fusion stage.
        #[arg(long)]
        no_fusion: bool,
        /// Disable tone mapping / local contrast.
        #[arg(long)]
        no_tonemap: bool,
        /// Disable white balance.
        #[arg(long)]
        no_wb: bool,
        /// Disable adaptive saturation.
        #[arg(long)]
        no_sat: bool,
    },
    /// Generate a synthetic image/caption/mask dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        records: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Consecutive records share pixels but differ in context.
        #[arg(long)]
        context_pairs: bool,
    },
    /// Train on a manifest; writes checkpoint.json, vocab.txt, and
    /// loss_trace.csv under --out.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Caption one image with a trained checkpoint.
    Caption {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Context category name; defaults to the checkpoint's first one.
        #[arg(long)]
        context: Option<String>,
        /// Directory holding `<image_id>_mask_*.png`; the image id is the
        /// file stem. Missing masks fall back to the built-in proposer.
        #[arg(long)]
        mask_dir: Option<PathBuf>,
    },
    /// Rank every image against the caption pool; reports recall at k.
    Retrieve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ranks to report.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 10])]
        k: Vec<usize>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption + retrieval + category-ranking metrics report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and every single-removal variant at one seed.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sweep adapter (rank, scale) settings instead of removing
        /// components.
        #[arg(long)]
        lora_sweep: bool,
    },
    /// Verify analytic gradients of the full objective against central
    /// finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Per-tensor coordinate budget for large tensors.
        #[arg(long)]
        samples: Option<usize>,
        /// Check every coordinate of every trainable tensor.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Report trainable parameter counts.
    Paramcount {
        /// `desk` builds the configured model; `paper` evaluates the
        /// reference-scale closed-form plan.
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest to take the vocabulary from (desk preset).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?),
        None => Ok(RunConfig::default()),
    }
}

fn emit(report: &impl serde::Serialize, out: &Option<PathBuf>) -> Result<()> {
    let body = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => std::fs::write(path, body)?,
        None => println!("{body}"),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(MdseModel, RunConfig)> {
    let ck = checkpoint::load(path)?;
    let run = ck.run.clone();
    let (model, _) = checkpoint::restore(&ck)?;
    Ok((model, run))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Enhance {
            input,
            output,
            config,
            no_fusion,
            no_tonemap,
            no_wb,
            no_sat,
        } => {
            let cfg = load_config(&config)?;
            let img = imageio::load_png::<f64>(&input, None)?;
            let stages = EnhanceStages {
                fusion: !no_fusion,
                tonemap: !no_tonemap,
                white_balance: !no_wb,
                saturation: !no_sat,
            };
            let out = enhance_with_stages(&img, &cfg.enhance, stages)?;
            imageio::save_png(&out, &output)?;
            eprintln!(
                "enhanced {} -> {} (mean luminance {:.4} -> {:.4})",
                input.display(),
                output.display(),
                img.mean_luminance(),
                out.mean_luminance()
            );
        }

        Cmd::Synth {
            out,
            records,
            size,
            seed,
            context_pairs,
        } => {
            let spec = SynthSpec {
                n_records: records,
                image_size: size,
                seed,
                context_pairs,
            };
            let path = generate_dataset(&out, &spec)?;
            println!("{}", path.display());
        }

        Cmd::Train {
            manifest,
            config,
            seed,
            steps,
            out,
            ablation,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.train.ablation.no_fe |= ablation.no_fe;
            cfg.train.ablation.no_sam |= ablation.no_sam;
            cfg.train.ablation.no_dual |= ablation.no_dual;
            cfg.train.ablation.no_context_gate |= ablation.no_context_gate;

            let (manifest, base) = DatasetManifest::load(&manifest)?;
            let outcome = train::train(&manifest, &base, &cfg)?;
            std::fs::create_dir_all(&out)?;
            checkpoint::save(
                &outcome.model,
                &cfg,
                cfg.train.steps,
                &out.join("checkpoint.json"),
            )?;
            outcome.model.vocab.save(&out.join("vocab.txt"))?;
            train::write_trace_csv(&out.join("loss_trace.csv"), &outcome.trace)?;
            let first = outcome.trace.first().expect("at least one step");
            let last = outcome.trace.last().expect("at least one step");
            eprintln!(
                "trained {} steps: total {:.4} -> {:.4}; wrote {}",
                cfg.train.steps,
                first.total,
                last.total,
                out.display()
            );
        }

        Cmd::Caption {
            image,
            checkpoint: ck_path,
            context,
            mask_dir,
        } => {
            let (model, run) = load_model(&ck_path)?;
            let img = imageio::load_png::<f64>(&image, Some(run.vit.image_size))?;
            let category = match context {
                Some(c) => c,
                None => model
                    .contexts
                    .first()
                    .cloned()
                    .context("checkpoint has no context categories")?,
            };
            let ctx = model.context_signal(&category)?;
            let image_id = image
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            let visual = prepare_visual(
                &model,
                &img,
                &image_id,
                mask_dir.as_deref(),
                &run.enhance,
                &run.regions,
                &run.train.ablation,
            )?;
            let caption = caption_visual(&model, &visual, &ctx, &run.train.ablation)?;
            let report = serde_json::json!({
                "caption": caption,
                "context": category,
                "mask_source": visual.mask_source,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }

        Cmd::Retrieve {
            manifest,
            checkpoint: ck_path,
            k,
            out,
        } => {
            let (model, run) = load_model(&ck_path)?;
            let (manifest, base) = DatasetManifest::load(&manifest)?;
            let prepared = train::prepare_records(&model, &manifest, &base, &run)?;
            let retrieval = evalrun::retrieve(&model, &prepared, &run.train.ablation)?;
            let mut r_at = serde_json::Map::new();
            for &kk in &k {
                r_at.insert(
                    kk.to_string(),
                    serde_json::json!(metrics::recall_at_k(&retrieval, kk)),
                );
            }
            let report = serde_json::json!({
                "r_at": r_at,
                "ranks": retrieval.ranks,
            });
            emit(&report, &out)?;
        }

        Cmd::Eval {
            manifest,
            checkpoint: ck_path,
            out,
        } => {
            let (model, run) = load_model(&ck_path)?;
            let (manifest, base) = DatasetManifest::load(&manifest)?;
            let prepared = train::prepare_records(&model, &manifest, &base, &run)?;
            let report = evalrun::evaluate(&model, &prepared, &run.train.ablation)?;
            emit(&report, &out)?;
        }

        Cmd::Ablate {
            manifest,
            config,
            seed,
            steps,
            out,
            lora_sweep,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let (manifest, base) = DatasetManifest::load(&manifest)?;
            if lora_sweep {
                let report = evalrun::lora_sweep(&manifest, &base, &cfg)?;
                emit(&report, &out)?;
            } else {
                let report = evalrun::ablate(&manifest, &base, &cfg)?;
                emit(&report, &out)?;
            }
        }

        Cmd::Gradcheck {
            config,
            seed,
            samples,
            exhaustive,
        } => {
            let cfg = load_config(&config)?;
            let cap = if exhaustive {
                None
            } else {
                Some(samples.unwrap_or(DEFAULT_SAMPLES_CAP))
            };
            let report = model_gradcheck(&cfg, DEFAULT_FULL_BELOW, cap, seed)?;
            println!(
                "{:40} {:>8} {:>8} {:>12}",
                "tensor", "numel", "checked", "max_rel_err"
            );
            for c in &report.checks {
                println!(
                    "{:40} {:>8} {:>8} {:>12.3e}",
                    c.name, c.numel, c.checked, c.max_rel_err
                );
            }
            println!(
                "checked {} coordinates in {:.1}s; max relative error {:.3e}",
                report.coords_checked, report.elapsed_secs, report.max_rel_err
            );
            if report.max_rel_err >= 1e-4 {
                bail!("gradient check failed: {:.3e} >= 1e-4", report.max_rel_err);
            }
        }

        Cmd::Paramcount {
            preset,
            config,
            manifest,
        } => {
            match preset.as_str() {
                "paper" => {
                    let plan = lora::paper_scale_plan();
                    let adapters: usize =
                        plan.adapters.iter().map(|a| a.params()).sum();
                    println!("{:24} {:>10}", "group", "params");
                    println!("{:24} {:>10}", "lora_adapters", adapters);
                    for (name, n) in &plan.extras {
                        println!("{name:24} {n:>10}");
                    }
                    println!("{:24} {:>10}", "total", lora::count_trainable(&plan));
                }
                "desk" => {
                    let cfg = load_config(&config)?;
                    let vocab = match manifest {
                        Some(m) => {
                            let (manifest, _) = DatasetManifest::load(&m)?;
                            mdse_core::decoder::Vocab::build(manifest.all_captions())
                        }
                        None => mdse_core::decoder::Vocab::build(
                            ["red circle tunnel", "blue square shaft"].into_iter(),
                        ),
                    };
                    let contexts = vec!["tunnel".to_string(), "shaft".to_string()];
                    let arch = cfg.resolved_arch(vocab.len());
                    let model = MdseModel::build(arch, vocab, contexts)?;
                    println!("{:24} {:>10}", "group", "params");
                    let mut total = 0usize;
                    for (group, n) in model.trainable_breakdown() {
                        println!("{group:24} {n:>10}");
                        total += n;
                    }
                    println!("{:24} {:>10}", "total", total);
                }
                other => bail!("unknown preset '{other}', expected desk|paper"),
            }
        }
    }
    Ok(())
}
