use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use conviformer::checkpoint::{
    convert, load_into_store, CheckpointBundle, CheckpointMetadata, ConvertDirection,
};
use conviformer::experiment::resolution_experiment;
use conviformer::image::{read_ppm, write_ppm};
use conviformer::losses::LossMode;
use conviformer::model::{patch_count, Conviformer, ConviformerConfig};
use conviformer::presizer::{presize, PresizeConfig};
use conviformer::synth::{
    dataset_from_dir, dataset_to_dir, generate, phylo_from_dir, phylo_matrix, SynthSpec,
};
use conviformer::train::{evaluate, train, RunConfig};
use conviformer::validation::model_gradcheck;

#[derive(Parser)]
#[command(name = "conviformer", about = "Conviformer training and data tooling", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Presize every .ppm image in a directory: strip border, reflect-pad
    /// to square, resize, center-crop.
    Presize {
        #[arg(long = "in")]
        in_dir: PathBuf,
        #[arg(long = "out")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        border: usize,
        #[arg(long, default_value_t = 512)]
        resize: usize,
        #[arg(long, default_value_t = 448)]
        crop: usize,
    },
    /// Generate a synthetic dataset directory from a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the phylogenetic tree (defaults to the spec seed).
        #[arg(long)]
        phylo_seed: Option<u64>,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Exit nonzero unless the final train accuracy reaches this value.
        #[arg(long = "assert")]
        assert_accuracy: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Convert checkpoint weights between the base (no-frontend) and
    /// frontend schemas.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// base-to-conviformer | conviformer-to-base
        #[arg(long)]
        direction: String,
    },
    /// Train identical models at several resolutions and report the
    /// accuracy curve with token counts and the t_p^2 memory proxy.
    ResolutionExp {
        #[arg(long)]
        spec: PathBuf,
        /// Comma-separated ascending resolutions, e.g. 16,32,64.
        #[arg(long)]
        resolutions: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Exit nonzero unless accuracy strictly improves with resolution
        /// for every seed.
        #[arg(long = "assert", default_value_t = false)]
        assert_trend: bool,
    },
    /// Finite-difference check of every model parameter under one loss mode.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "ce")]
        mode: String,
        #[arg(long, default_value_t = 3)]
        probes: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Exit nonzero if the max relative error exceeds this.
        #[arg(long = "assert")]
        assert_tol: Option<f64>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Presize { in_dir, out_dir, border, resize, crop } => {
            let cfg = PresizeConfig { border_px: border, resize_to: resize, crop_to: crop };
            fs::create_dir_all(&out_dir)?;
            let mut done = 0usize;
            let mut entries: Vec<_> = fs::read_dir(&in_dir)?.collect::<std::io::Result<_>>()?;
            entries.sort_by_key(|e| e.path());
            for entry in entries {
                let path = entry.path();
                if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
                    continue;
                }
                let img = read_ppm(&path).with_context(|| format!("reading {}", path.display()))?;
                let out = presize(&img, &cfg).with_context(|| format!("presizing {}", path.display()))?;
                let target = out_dir.join(path.file_name().expect("file name"));
                write_ppm(&target, &out).with_context(|| format!("writing {}", target.display()))?;
                done += 1;
            }
            println!("presized {done} images -> {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }

        Cmd::GenData { spec, out, phylo_seed } => {
            let spec = SynthSpec::from_toml(&fs::read_to_string(&spec)?)?;
            let dataset = generate(&spec)?;
            let phylo = if spec.n_genus >= 2 {
                Some(phylo_matrix(&spec, phylo_seed.unwrap_or(spec.seed))?)
            } else {
                None
            };
            dataset_to_dir(&dataset, &out, phylo.as_ref())?;
            println!(
                "wrote {} samples over {} taxa / {} genera / {} families -> {}",
                dataset.len(),
                spec.n_taxa,
                spec.n_genus,
                spec.n_family,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Train { config, data, out, assert_accuracy } => {
            let cfg = RunConfig::from_toml(&fs::read_to_string(&config)?)?;
            let dataset = dataset_from_dir(&data)?;
            let phylo = phylo_from_dir(&data)?;

            let mut model_cfg = cfg.model.clone();
            model_cfg.dropout = cfg.train.dropout;
            model_cfg.n_taxa = dataset.taxonomy.n_taxa();
            model_cfg.n_genus = dataset.taxonomy.n_genus();
            model_cfg.n_family = dataset.taxonomy.n_family();
            let mut model: Conviformer<f32> =
                Conviformer::new(model_cfg.clone(), cfg.train.input_res, cfg.train.seed)?;

            let outcome = train(&mut model, &dataset, None, &cfg.train, phylo.as_ref())?;
            for r in &outcome.history {
                println!("{}", serde_json::to_string(&serde_json::json!({
                    "epoch": r.epoch,
                    "mode": r.mode.name(),
                    "lr": r.lr,
                    "loss": r.mean_loss,
                    "train_accuracy": r.train_accuracy,
                    "skipped_triplet_terms": r.skipped_triplet_terms,
                    "skipped_phylo_batches": r.skipped_phylo_batches,
                }))?);
            }
            let final_acc = outcome.history.iter().rev().find_map(|r| r.train_accuracy);

            let metadata = CheckpointMetadata {
                config: serde_json::to_value(&cfg)?,
                seed: cfg.train.seed,
                epoch: outcome.history.len() as u64,
            };
            CheckpointBundle::from_params(&model.store, metadata).save(&out)?;
            println!(
                "summary: {} epochs, final loss {:.4}, train accuracy {}, checkpoint {}",
                outcome.history.len(),
                outcome.history.last().map(|r| r.mean_loss).unwrap_or(f64::NAN),
                final_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
                out.display()
            );
            if let Some(target) = assert_accuracy {
                let reached = final_acc.map(|a| a >= target).unwrap_or(false);
                if !reached {
                    eprintln!("assertion failed: train accuracy {final_acc:?} < {target}");
                    return Ok(ExitCode::FAILURE);
                }
            }
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Eval { ckpt, data } => {
            let bundle = CheckpointBundle::load(&ckpt)?;
            let run_cfg: RunConfig = serde_json::from_value(bundle.metadata.config.clone())
                .context("checkpoint lacks a run config snapshot")?;
            let dataset = dataset_from_dir(&data)?;
            let mut model: Conviformer<f32> =
                Conviformer::new(run_cfg.model.clone(), run_cfg.train.input_res, bundle.metadata.seed)?;
            let report = load_into_store(&bundle, &mut model.store)?;
            if !report.unmatched.is_empty() {
                bail!("checkpoint entries without a model parameter: {:?}", report.unmatched);
            }
            let eval = evaluate(&model, &dataset, None, run_cfg.train.batch_size)?;
            println!("{}", serde_json::to_string(&serde_json::json!({
                "n_samples": eval.n_samples,
                "top1": eval.top1,
                "macro_f1": eval.macro_f1,
            }))?);
            println!(
                "summary: top-1 {:.4}, macro-F1 {:.4} over {} samples",
                eval.top1, eval.macro_f1, eval.n_samples
            );
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Convert { input, output, direction } => {
            let direction = ConvertDirection::parse(&direction)?;
            let bundle = CheckpointBundle::load(&input)?;
            let before = bundle.len();
            let (converted, dropped) = convert(&bundle, direction)?;
            converted.save(&output)?;
            println!("dropped {} of {before} entries:", dropped.len());
            for name in &dropped {
                println!("  - {name}");
            }
            println!("wrote {}", output.display());
            Ok(ExitCode::SUCCESS)
        }

        Cmd::ResolutionExp { spec, resolutions, seeds, config, assert_trend } => {
            let spec = SynthSpec::from_toml(&fs::read_to_string(&spec)?)?;
            let resolutions = parse_list(&resolutions).context("parsing --resolutions")?;
            let seeds = parse_list(&seeds).context("parsing --seeds")?;
            let cfg = match config {
                Some(path) => RunConfig::from_toml(&fs::read_to_string(&path)?)?,
                None => default_resolution_config(&spec, &resolutions)?,
            };
            let report = resolution_experiment(
                &spec,
                &resolutions,
                &seeds.iter().map(|&s| s as u64).collect::<Vec<_>>(),
                &cfg.model,
                &cfg.train,
            )?;
            for run in &report.runs {
                println!("{}", serde_json::to_string(run)?);
            }
            println!("summary:");
            for &res in &report.resolutions {
                let accs: Vec<f64> = report
                    .runs
                    .iter()
                    .filter(|r| r.resolution == res)
                    .map(|r| r.test_accuracy)
                    .collect();
                let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
                let sample = report.runs.iter().find(|r| r.resolution == res).expect("run exists");
                println!(
                    "  {res}px: mean test accuracy {mean:.4} (t_p {}, proxy {}; reduction pinned to 1: t_p {}, proxy {})",
                    sample.t_p, sample.attn_proxy, sample.t_p_convit, sample.attn_proxy_convit
                );
            }
            let improves = report.strictly_improves();
            println!("  accuracy strictly improves with resolution on every seed: {improves}");
            if assert_trend && !improves {
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Gradcheck { config, mode, probes, batch, assert_tol } => {
            let cfg = RunConfig::from_toml(&fs::read_to_string(&config)?)?;
            let mode = LossMode::parse(&mode)?;
            let report = model_gradcheck(
                &cfg.model,
                cfg.train.input_res,
                batch,
                mode,
                probes,
                cfg.train.seed,
                conviformer::tensor::gradcheck::FD_EPS,
            )?;
            println!(
                "checked {} coordinates, max relative error {:.3e}{}",
                report.checked,
                report.max_rel_err,
                report.worst.as_deref().map(|w| format!(" (worst: {w})")).unwrap_or_default()
            );
            if let Some(tol) = assert_tol {
                if report.max_rel_err > tol {
                    eprintln!("assertion failed: {} > {tol}", report.max_rel_err);
                    return Ok(ExitCode::FAILURE);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| anyhow::anyhow!("'{p}': {e}")))
        .collect()
}

/// A small frontend model suited to the experiment's resolution range:
/// base resolution = the lowest requested resolution, patch size scaled to
/// keep a 4x4 token grid.
fn default_resolution_config(spec: &SynthSpec, resolutions: &[usize]) -> Result<RunConfig> {
    let lowest = *resolutions.iter().min().context("empty resolutions")?;
    if lowest % 4 != 0 {
        bail!("lowest resolution {lowest} must be divisible by 4");
    }
    let mut cfg = RunConfig::default();
    cfg.model = ConviformerConfig {
        n_heads: 1,
        d_emb: 64,
        n_gpsa_layers: 1,
        n_sa_layers: 1,
        patch_size: lowest / 4,
        base_res: lowest,
        conv_channels: 16,
        ffn_expansion: 2,
        n_taxa: spec.n_taxa,
        n_genus: spec.n_genus,
        n_family: spec.n_family,
        emb_dim_taxa: 32,
        emb_dim_genus: 16,
        emb_dim_family: 16,
        head_hidden: 32,
        dropout: 0.0,
        use_frontend: true,
    };
    cfg.train.epochs = 20;
    cfg.train.batch_size = 16;
    cfg.train.learning_rate = 2e-3;
    // sanity: every resolution must be a power-of-two multiple of the base
    for &r in resolutions {
        let _ = patch_count(r, r, &cfg.model)?;
    }
    Ok(cfg)
}
