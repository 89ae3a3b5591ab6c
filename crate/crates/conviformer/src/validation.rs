//! End-to-end finite-difference validation: the full model forward plus a
//! chosen loss mode, differentiated against central differences for every
//! parameter tensor. Used by the validation test suites and the `gradcheck`
//! CLI command.

use crate::hierarchy::{HierLabel, Taxonomy};
use crate::losses::{combined_loss, BatchOutputs, LossContext, LossMode, LossWeights, PhyloMatrix};
use crate::model::{Conviformer, ConviformerConfig};
use crate::rng::{Stream, StreamRng};
use crate::tensor::gradcheck::{check_scalar_fn, fixture, FdReport};
use crate::tensor::Tape;
use crate::train::TrainError;

/// Labels covering several genera/families, consistent with the modulo
/// taxonomy, so triplet and phylo terms always engage.
fn case_labels(taxonomy: &Taxonomy, batch: usize) -> Vec<HierLabel> {
    (0..batch)
        .map(|i| taxonomy.label_for(i % taxonomy.n_taxa()).expect("in range"))
        .collect()
}

fn case_phylo(n_genus: usize) -> PhyloMatrix {
    let mut d = vec![0.0; n_genus * n_genus];
    for i in 0..n_genus {
        for j in 0..n_genus {
            if i != j {
                d[i * n_genus + j] = 1.0 + (i.abs_diff(j)) as f64;
            }
        }
    }
    PhyloMatrix::new(n_genus, d).expect("valid matrix")
}

/// Run the forward+loss at f64 with the given parameter buffers.
fn eval_loss(
    model: &mut Conviformer<f64>,
    param_bufs: &[Vec<f64>],
    x_data: &[f64],
    batch: usize,
    res: usize,
    labels: &[HierLabel],
    taxonomy: &Taxonomy,
    mode: LossMode,
    weights: &LossWeights,
    phylo: Option<&PhyloMatrix>,
    want_grads: bool,
) -> (f64, Option<Vec<Vec<f64>>>) {
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    for (id, buf) in ids.iter().zip(param_bufs) {
        model.store.get_mut(*id).data = buf.clone();
    }
    let mut tape: Tape<f64> = Tape::new();
    let bound = model.bind(&mut tape).expect("bind");
    let x = tape
        .leaf(x_data.to_vec(), vec![batch, 3, res, res], false)
        .expect("input");
    let mut drop_rng = StreamRng::new(7, Stream::Dropout);
    let (out_feat, _) = model
        .forward(&mut tape, &bound, &x, false, &mut drop_rng)
        .expect("forward");
    let heads = model.heads(&mut tape, &bound, &out_feat).expect("heads");
    let ctx = LossContext {
        taxonomy,
        weights,
        sampling_level: crate::losses::SamplingLevel::Genus,
        phylo,
        class_weights: None,
    };
    let outputs = BatchOutputs {
        logits_tax: &heads.logits_tax,
        logits_gen: &heads.logits_gen,
        logits_fam: &heads.logits_fam,
        emb_tax: &heads.emb_tax,
        emb_gen: &heads.emb_gen,
        emb_fam: &heads.emb_fam,
    };
    // fresh mining stream per evaluation: identical triplets every rebuild
    let mut mine_rng = StreamRng::new(11, Stream::TripletMining);
    let report = combined_loss(&mut tape, mode, &outputs, labels, &ctx, &mut mine_rng).expect("loss");
    let loss = tape.scalar_value(&report.loss);
    if !want_grads {
        return (loss, None);
    }
    let grads = tape.backward(&report.loss).expect("backward");
    let out = model
        .store
        .iter()
        .map(|(id, _, p)| {
            grads
                .get(bound.get(id))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    (loss, Some(out))
}

/// Finite-difference check of every parameter tensor of a model under one
/// loss mode, `probes` coordinates per tensor.
pub fn model_gradcheck(
    cfg: &ConviformerConfig,
    input_res: usize,
    batch: usize,
    mode: LossMode,
    probes: usize,
    seed: u64,
    eps: f64,
) -> Result<FdReport, TrainError> {
    cfg.validate()?;
    let mut model: Conviformer<f64> = Conviformer::new(cfg.clone(), input_res, seed)?;
    let taxonomy = Taxonomy::new(
        (0..cfg.n_taxa).map(|t| t % cfg.n_genus).collect(),
        (0..cfg.n_genus).map(|g| g % cfg.n_family).collect(),
        cfg.n_family,
    )
    .expect("modulo taxonomy");
    let labels = case_labels(&taxonomy, batch);
    let weights = LossWeights::default();
    let phylo = case_phylo(cfg.n_genus);
    let phylo_opt = matches!(mode, LossMode::HierPhylo).then_some(&phylo);

    // input pixels roughly in [0, 1] like normalized images
    let x_data: Vec<f64> = fixture(seed ^ 0x55aa, batch * 3 * input_res * input_res)
        .iter()
        .map(|v| 0.5 + 0.5 * v)
        .collect();

    let param_bufs: Vec<Vec<f64>> = model.store.iter().map(|(_, _, p)| p.data.clone()).collect();
    let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();

    let (_, analytic) = eval_loss(
        &mut model, &param_bufs, &x_data, batch, input_res, &labels, &taxonomy, mode, &weights,
        phylo_opt, true,
    );
    let analytic = analytic.expect("gradients");

    let report = check_scalar_fn(
        &param_bufs,
        &name_refs,
        &analytic,
        |bufs| {
            eval_loss(
                &mut model, bufs, &x_data, batch, input_res, &labels, &taxonomy, mode, &weights,
                phylo_opt, false,
            )
            .0
        },
        probes,
        seed,
        eps,
    );
    Ok(report)
}
