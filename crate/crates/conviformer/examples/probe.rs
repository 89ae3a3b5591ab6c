// Timing / convergence probe for the acceptance-scale runs.
use std::time::Instant;

use conviformer::losses::LossMode;
use conviformer::model::{Conviformer, ConviformerConfig};
use conviformer::synth::{generate, SynthSpec};
use conviformer::train::{train, LossSettings, TrainConfig};
use conviformer::validation::model_gradcheck;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "gradcheck".into());
    match which.as_str() {
        "gradcheck" => {
            let cfg = ConviformerConfig::tiny(6, 3, 2);
            for (mode, res, batch) in [
                (LossMode::Ce, 32usize, 2usize),
                (LossMode::HierTrip, 32, 4),
                (LossMode::CeTrip, 64, 3),
            ] {
                let t = Instant::now();
                let report = model_gradcheck(&cfg, res, batch, mode, 3, 42, 1e-5).unwrap();
                println!(
                    "{:10} res {res} batch {batch}: {} coords, max rel err {:.2e}, {:?}",
                    mode.name(),
                    report.checked,
                    report.max_rel_err,
                    t.elapsed()
                );
            }
        }
        "converge" => {
            let spec = SynthSpec::default();
            let dataset = generate(&spec).unwrap();
            let subset = dataset.subset_of_taxa(8);
            println!("subset: {} samples", subset.len());
            let cfg = ConviformerConfig::tiny(36, 12, 4);
            let mut model: Conviformer<f32> = Conviformer::new(cfg, 64, 0).unwrap();
            let tcfg = TrainConfig {
                epochs: 50,
                batch_size: 16,
                learning_rate: 1e-3,
                weight_decay: 0.01,
                seed: 0,
                input_res: 64,
                stop_at_train_accuracy: Some(0.95),
                loss: LossSettings { mode: "ce".into(), ..Default::default() },
                ..Default::default()
            };
            let t = Instant::now();
            let out = train(&mut model, &dataset, Some(&subset), &tcfg, None).unwrap();
            for r in &out.history {
                println!(
                    "epoch {:2} loss {:.4} acc {:?} ({:?} elapsed)",
                    r.epoch,
                    r.mean_loss,
                    r.train_accuracy,
                    t.elapsed()
                );
            }
        }
        "trend" => {
            let spec = SynthSpec::default();
            let dataset = generate(&spec).unwrap();
            let (train_idx, test_idx) = conviformer::experiment::split_indices(dataset.len());
            for seed in [0u64, 1, 2] {
                for res in [16usize, 64] {
                    let cfg = ConviformerConfig {
                        n_heads: 2,
                        d_emb: 128,
                        n_gpsa_layers: 1,
                        n_sa_layers: 1,
                        patch_size: 4,
                        base_res: 16,
                        conv_channels: 32,
                        ffn_expansion: 2,
                        n_taxa: 36,
                        n_genus: 12,
                        n_family: 4,
                        emb_dim_taxa: 32,
                        emb_dim_genus: 16,
                        emb_dim_family: 16,
                        head_hidden: 32,
                        dropout: 0.0,
                        use_frontend: true,
                    };
                    let mut model: Conviformer<f32> = Conviformer::new(cfg, res, seed).unwrap();
                    let tcfg = TrainConfig {
                        epochs: 15,
                        batch_size: 16,
                        learning_rate: 2e-3,
                        weight_decay: 0.01,
                        seed,
                        input_res: res,
                        eval_each_epoch: false,
                        loss: LossSettings { mode: "ce".into(), ..Default::default() },
                        ..Default::default()
                    };
                    let t = Instant::now();
                    train(&mut model, &dataset, Some(&train_idx), &tcfg, None).unwrap();
                    let report =
                        conviformer::train::evaluate(&model, &dataset, Some(&test_idx), 16).unwrap();
                    println!(
                        "seed {seed} res {res:2}: test acc {:.3} ({:?})",
                        report.top1,
                        t.elapsed()
                    );
                }
            }
        }
        other => eprintln!("unknown probe '{other}'"),
    }
}
