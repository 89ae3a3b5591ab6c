use proptest::prelude::*;

use super::*;
use crate::rng::Stream;
use crate::tensor::gradcheck::{check_op, fixture, FD_EPS};

const TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

fn toy_taxonomy() -> Taxonomy {
    // 6 taxa -> 3 genera -> 2 families
    Taxonomy::new(vec![0, 0, 1, 1, 2, 2], vec![0, 0, 1], 2).unwrap()
}

fn scalar(tape: &Tape<f64>, t: &Tensor) -> f64 {
    tape.scalar_value(t)
}

// ── cross entropy ───────────────────────────────────────────────────

#[test]
fn ce_uniform_logits_is_ln_c() {
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.constant(vec![0.0; 3 * 4], vec![3, 4]).unwrap();
    let loss = cross_entropy(&mut tape, &logits, &[0, 1, 3], None).unwrap();
    assert!((scalar(&tape, &loss) - 4.0_f64.ln()).abs() < TOL);

    // per-class weights do not move the uniform-logits value
    let loss = cross_entropy(&mut tape, &logits, &[0, 1, 3], Some(&[0.2, 1.0, 3.0, 0.5])).unwrap();
    assert!((scalar(&tape, &loss) - 4.0_f64.ln()).abs() < TOL);
}

#[test]
fn ce_saturated_correct_logit_is_near_zero() {
    let mut tape: Tape<f64> = Tape::new();
    let mut data = vec![0.0; 2 * 3];
    data[0] = 1000.0; // row 0 -> class 0
    data[3 + 2] = 1000.0; // row 1 -> class 2
    let logits = tape.constant(data, vec![2, 3]).unwrap();
    let loss = cross_entropy(&mut tape, &logits, &[0, 2], None).unwrap();
    assert!(scalar(&tape, &loss).abs() < 1e-9);
}

/// Straight-line log-sum-exp oracle.
fn ce_oracle(logits: &[f64], n: usize, c: usize, targets: &[usize], w: Option<&[f64]>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let nll = lse - row[targets[i]];
        let wi = w.map(|w| w[targets[i]]).unwrap_or(1.0);
        num += wi * nll;
        den += wi;
    }
    num / den
}

#[test]
fn ce_random_case_matches_lse_oracle() {
    let data = fixture(301, 5 * 3).iter().map(|v| v * 4.0).collect::<Vec<_>>();
    let targets = [2usize, 0, 1, 1, 2];
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.constant(data.clone(), vec![5, 3]).unwrap();

    let loss = cross_entropy(&mut tape, &logits, &targets, None).unwrap();
    assert!((scalar(&tape, &loss) - ce_oracle(&data, 5, 3, &targets, None)).abs() < TOL);

    let w = [0.5, 2.0, 1.25];
    let loss = cross_entropy(&mut tape, &logits, &targets, Some(&w)).unwrap();
    assert!((scalar(&tape, &loss) - ce_oracle(&data, 5, 3, &targets, Some(&w))).abs() < TOL);
}

#[test]
fn ce_target_out_of_range_is_label_error() {
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    assert!(matches!(
        cross_entropy(&mut tape, &logits, &[1, 3], None),
        Err(LossError::Label(LabelError::OutOfRange { .. }))
    ));
}

#[test]
fn ce_gradient_matches_finite_differences() {
    let report = check_op(
        &[(fixture(310, 4 * 5), vec![4, 5])],
        |tape, leaves| {
            cross_entropy(tape, &leaves[0], &[1, 0, 4, 2], None).map_err(|e| match e {
                LossError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        },
        20,
        3100,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < GRAD_TOL, "{report:?}");
}

// ── triplet ─────────────────────────────────────────────────────────

#[test]
fn triplet_degenerate_equals_alpha() {
    let data = fixture(320, 3 * 4);
    for squared in [true, false] {
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.constant(data.clone(), vec![3, 4]).unwrap();
        let loss = triplet_loss(&mut tape, &t, &t, &t, 0.8, squared).unwrap();
        assert!(
            (scalar(&tape, &loss) - 0.8).abs() < TOL,
            "squared={squared}: {}",
            scalar(&tape, &loss)
        );
    }
}

#[test]
fn triplet_hinge_floor() {
    // d+^2 = 0, d-^2 = alpha + 1 -> max(alpha + 0 - (alpha+1), 0) = 0
    let alpha = 0.6;
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
    let n = tape
        .constant(vec![(alpha + 1.0_f64).sqrt(), 0.0], vec![1, 2])
        .unwrap();
    let loss = triplet_loss(&mut tape, &a, &a, &n, alpha, true).unwrap();
    assert!(scalar(&tape, &loss).abs() < TOL);
}

#[test]
fn triplet_random_matches_per_sample_oracle() {
    let (n, d) = (5, 3);
    let av = fixture(321, n * d);
    let pv = fixture(322, n * d);
    let nv = fixture(323, n * d);
    let alpha = 0.4;
    for squared in [true, false] {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(av.clone(), vec![n, d]).unwrap();
        let p = tape.constant(pv.clone(), vec![n, d]).unwrap();
        let ng = tape.constant(nv.clone(), vec![n, d]).unwrap();
        let loss = triplet_loss(&mut tape, &a, &p, &ng, alpha, squared).unwrap();

        let mut expect = 0.0;
        for i in 0..n {
            let mut dp = 0.0;
            let mut dn = 0.0;
            for j in 0..d {
                dp += (av[i * d + j] - pv[i * d + j]).powi(2);
                dn += (av[i * d + j] - nv[i * d + j]).powi(2);
            }
            if !squared {
                dp = dp.sqrt();
                dn = dn.sqrt();
            }
            expect += (alpha + dp - dn).max(0.0);
        }
        expect /= n as f64;
        assert!(
            (scalar(&tape, &loss) - expect).abs() < TOL,
            "squared={squared}"
        );
    }
}

#[test]
fn triplet_shape_mismatch_errors() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let b = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
    assert!(triplet_loss(&mut tape, &a, &a, &b, 1.0, true).is_err());
}

#[test]
fn triplet_gradient_zero_when_hinge_inactive() {
    // negative far away: margin satisfied, loss = 0, all grads exactly 0
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.leaf(vec![0.1, 0.2], vec![1, 2], true).unwrap();
    let p = tape.leaf(vec![0.15, 0.18], vec![1, 2], true).unwrap();
    let n = tape.leaf(vec![50.0, -40.0], vec![1, 2], true).unwrap();
    let loss = triplet_loss(&mut tape, &a, &p, &n, 1.0, true).unwrap();
    assert_eq!(scalar(&tape, &loss), 0.0);
    let grads = tape.backward(&loss).unwrap();
    for t in [&a, &p, &n] {
        assert!(grads.get(t).unwrap().iter().all(|&g| g == 0.0));
    }
}

#[test]
fn triplet_gradient_matches_finite_differences() {
    for squared in [true, false] {
        let report = check_op(
            &[
                (fixture(324, 4 * 3), vec![4, 3]),
                (fixture(325, 4 * 3), vec![4, 3]),
                (fixture(326, 4 * 3), vec![4, 3]),
            ],
            |tape, leaves| {
                triplet_loss(tape, &leaves[0], &leaves[1], &leaves[2], 5.0, squared).map_err(|e| {
                    match e {
                        LossError::Tensor(t) => t,
                        other => panic!("{other}"),
                    }
                })
            },
            12,
            3200,
            FD_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < GRAD_TOL, "squared={squared}: {report:?}");
    }
}

// ── hierarchical CE ─────────────────────────────────────────────────

fn toy_labels(taxa: &[usize]) -> Vec<HierLabel> {
    let t = toy_taxonomy();
    taxa.iter().map(|&i| t.label_for(i).unwrap()).collect()
}

#[test]
fn hier_ce_reduces_to_taxa_ce_when_lambdas_zero() {
    let mut tape: Tape<f64> = Tape::new();
    let lt = tape.constant(fixture(330, 4 * 6), vec![4, 6]).unwrap();
    let lg = tape.constant(fixture(331, 4 * 3), vec![4, 3]).unwrap();
    let lf = tape.constant(fixture(332, 4 * 2), vec![4, 2]).unwrap();
    let labels = toy_labels(&[0, 2, 4, 5]);
    let w = LossWeights { lambda1: 0.0, lambda2: 0.0, ..LossWeights::default() };
    let hier = hierarchical_ce(&mut tape, &lt, &lg, &lf, &labels, &toy_taxonomy(), &w, None).unwrap();
    let plain = cross_entropy(&mut tape, &lt, &[0, 2, 4, 5], None).unwrap();
    assert!((scalar(&tape, &hier) - scalar(&tape, &plain)).abs() < TOL);
}

#[test]
fn hier_ce_uniform_heads_additivity() {
    // 4-class uniform heads at every level with unit lambdas: 3 * ln 4.
    let taxonomy = Taxonomy::new(vec![0, 1, 2, 3], vec![0, 1, 2, 3], 4).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let logits = tape.constant(vec![0.0; 2 * 4], vec![2, 4]).unwrap();
    let labels = vec![taxonomy.label_for(1).unwrap(), taxonomy.label_for(3).unwrap()];
    let loss = hierarchical_ce(
        &mut tape, &logits, &logits, &logits, &labels, &taxonomy, &LossWeights::default(), None,
    )
    .unwrap();
    assert!((scalar(&tape, &loss) - 3.0 * 4.0_f64.ln()).abs() < TOL);
}

#[test]
fn hier_ce_matches_sum_of_independent_ce_calls() {
    let mut tape: Tape<f64> = Tape::new();
    let lt = tape.constant(fixture(333, 5 * 6), vec![5, 6]).unwrap();
    let lg = tape.constant(fixture(334, 5 * 3), vec![5, 3]).unwrap();
    let lf = tape.constant(fixture(335, 5 * 2), vec![5, 2]).unwrap();
    let labels = toy_labels(&[1, 2, 3, 4, 0]);
    let w = LossWeights { lambda1: 0.7, lambda2: 1.3, ..LossWeights::default() };
    let hier = hierarchical_ce(&mut tape, &lt, &lg, &lf, &labels, &toy_taxonomy(), &w, None).unwrap();

    let tax: Vec<usize> = labels.iter().map(|l| l.taxon).collect();
    let gen: Vec<usize> = labels.iter().map(|l| l.genus).collect();
    let fam: Vec<usize> = labels.iter().map(|l| l.family).collect();
    let a = cross_entropy(&mut tape, &lt, &tax, None).unwrap();
    let b = cross_entropy(&mut tape, &lg, &gen, None).unwrap();
    let c = cross_entropy(&mut tape, &lf, &fam, None).unwrap();
    let expect = scalar(&tape, &a) + 0.7 * scalar(&tape, &b) + 1.3 * scalar(&tape, &c);
    assert!((scalar(&tape, &hier) - expect).abs() < TOL);
}

#[test]
fn hier_ce_rejects_inconsistent_labels() {
    let mut tape: Tape<f64> = Tape::new();
    let lt = tape.constant(vec![0.0; 6], vec![1, 6]).unwrap();
    let lg = tape.constant(vec![0.0; 3], vec![1, 3]).unwrap();
    let lf = tape.constant(vec![0.0; 2], vec![1, 2]).unwrap();
    // taxon 0 belongs to genus 0, not 2
    let labels = vec![HierLabel { taxon: 0, genus: 2, family: 1 }];
    assert!(matches!(
        hierarchical_ce(
            &mut tape, &lt, &lg, &lf, &labels, &toy_taxonomy(), &LossWeights::default(), None
        ),
        Err(LossError::Label(LabelError::Inconsistent { .. }))
    ));
}

// ── hierarchical triplet ────────────────────────────────────────────

struct HierFixture {
    tape: Tape<f64>,
    lt: Tensor,
    lg: Tensor,
    lf: Tensor,
    et: Tensor,
    eg: Tensor,
    ef: Tensor,
    labels: Vec<HierLabel>,
}

fn hier_fixture(taxa: &[usize], seed: u64) -> HierFixture {
    let n = taxa.len();
    let mut tape: Tape<f64> = Tape::new();
    let lt = tape.constant(fixture(seed, n * 6), vec![n, 6]).unwrap();
    let lg = tape.constant(fixture(seed + 1, n * 3), vec![n, 3]).unwrap();
    let lf = tape.constant(fixture(seed + 2, n * 2), vec![n, 2]).unwrap();
    let et = tape.constant(fixture(seed + 3, n * 8), vec![n, 8]).unwrap();
    let eg = tape.constant(fixture(seed + 4, n * 4), vec![n, 4]).unwrap();
    let ef = tape.constant(fixture(seed + 5, n * 4), vec![n, 4]).unwrap();
    HierFixture { tape, lt, lg, lf, et, eg, ef, labels: toy_labels(taxa) }
}

#[test]
fn hier_triplet_reduces_to_hier_ce_when_triplet_lambdas_zero() {
    let mut fx = hier_fixture(&[0, 1, 2, 3, 4, 5], 340);
    let w = LossWeights { lambda3: 0.0, lambda4: 0.0, lambda5: 0.0, ..LossWeights::default() };
    let mut rng = StreamRng::new(1, Stream::TripletMining);
    let (loss, _) = hierarchical_triplet(
        &mut fx.tape,
        (&fx.lt, &fx.lg, &fx.lf),
        (&fx.et, &fx.eg, &fx.ef),
        &fx.labels,
        &toy_taxonomy(),
        SamplingLevel::Genus,
        &w,
        None,
        &mut rng,
    )
    .unwrap();
    let base = hierarchical_ce(
        &mut fx.tape, &fx.lt, &fx.lg, &fx.lf, &fx.labels, &toy_taxonomy(), &w, None,
    )
    .unwrap();
    assert!((scalar(&fx.tape, &loss) - scalar(&fx.tape, &base)).abs() < TOL);
}

#[test]
fn hier_triplet_single_class_batch_skips_term() {
    // all four samples share genus 0 (taxa 0 and 1): no negative exists
    let mut fx = hier_fixture(&[0, 0, 1, 1], 350);
    let mut rng = StreamRng::new(2, Stream::TripletMining);
    let (loss, stats) = hierarchical_triplet(
        &mut fx.tape,
        (&fx.lt, &fx.lg, &fx.lf),
        (&fx.et, &fx.eg, &fx.ef),
        &fx.labels,
        &toy_taxonomy(),
        SamplingLevel::Genus,
        &LossWeights::default(),
        None,
        &mut rng,
    )
    .unwrap();
    assert_eq!(stats.skipped_terms, 1);
    assert_eq!(stats.skipped_anchors, 4);
    let base = hierarchical_ce(
        &mut fx.tape, &fx.lt, &fx.lg, &fx.lf, &fx.labels, &toy_taxonomy(),
        &LossWeights::default(), None,
    )
    .unwrap();
    assert!((scalar(&fx.tape, &loss) - scalar(&fx.tape, &base)).abs() < TOL);
}

#[test]
fn hier_triplet_six_sample_batch_vs_exhaustive_oracle() {
    // two samples per genus: genus classes [0,0,0,0,1,1] over taxa
    let taxa = [0usize, 0, 1, 1, 4, 5];
    let mut fx = hier_fixture(&taxa, 360);
    let w = LossWeights::default();
    let mut rng = StreamRng::new(3, Stream::TripletMining);
    let (loss, stats) = hierarchical_triplet(
        &mut fx.tape,
        (&fx.lt, &fx.lg, &fx.lf),
        (&fx.et, &fx.eg, &fx.ef),
        &fx.labels,
        &toy_taxonomy(),
        SamplingLevel::Genus,
        &w,
        None,
        &mut rng,
    )
    .unwrap();

    // Brute-force enumeration of every valid (a, p, n) at genus level.
    let genus: Vec<usize> = fx.labels.iter().map(|l| l.genus).collect();
    let mut valid = std::collections::HashSet::new();
    for a in 0..6 {
        for p in 0..6 {
            for n in 0..6 {
                if p != a && genus[p] == genus[a] && genus[n] != genus[a] {
                    valid.insert((a, p, n));
                }
            }
        }
    }
    assert!(!stats.mined.is_empty());
    for t in &stats.mined {
        assert!(valid.contains(t), "mined triple {t:?} is not valid");
    }
    // anchors with a valid positive AND negative: genus 0 has 4 members
    // and genus 1 has 2, all have positives and negatives
    assert_eq!(stats.mined.len(), 6);

    // Recompute the whole objective from raw buffers.
    let hinge_mean = |emb: &[f64], d: usize| -> f64 {
        let mut acc = 0.0;
        for &(a, p, n) in &stats.mined {
            let dist = |i: usize, j: usize| -> f64 {
                let mut s = 0.0;
                for k in 0..d {
                    s += (emb[i * d + k] - emb[j * d + k]).powi(2);
                }
                s.sqrt()
            };
            acc += (w.alpha + dist(a, p) - dist(a, n)).max(0.0);
        }
        acc / stats.mined.len() as f64
    };
    let base = hierarchical_ce(
        &mut fx.tape, &fx.lt, &fx.lg, &fx.lf, &fx.labels, &toy_taxonomy(), &w, None,
    )
    .unwrap();
    let et = fx.tape.value(&fx.et).to_vec();
    let eg = fx.tape.value(&fx.eg).to_vec();
    let ef = fx.tape.value(&fx.ef).to_vec();
    let expect = scalar(&fx.tape, &base)
        + w.lambda3 * hinge_mean(&et, 8)
        + w.lambda4 * hinge_mean(&eg, 4)
        + w.lambda5 * hinge_mean(&ef, 4);
    assert!((scalar(&fx.tape, &loss) - expect).abs() < TOL);
}

#[test]
fn family_level_positive_may_differ_in_genus() {
    // taxa 0 (genus 0) and 2 (genus 1) share family 0: valid positives at
    // family level; taxon 4 (genus 2, family 1) is the negative pool.
    let labels = toy_labels(&[0, 2, 4, 4]);
    let mut rng = StreamRng::new(7, Stream::TripletMining);
    let stats = mine_triplets(&labels, SamplingLevel::Family, &mut rng);
    let found = stats
        .mined
        .iter()
        .any(|&(a, p, _)| labels[a].genus != labels[p].genus && labels[a].family == labels[p].family);
    assert!(found, "no cross-genus same-family positive mined: {:?}", stats.mined);
}

// ── phylo distance ──────────────────────────────────────────────────

fn small_phylo() -> PhyloMatrix {
    PhyloMatrix::new(
        3,
        vec![
            0.0, 1.0, 4.0, //
            1.0, 0.0, 4.0, //
            4.0, 4.0, 0.0,
        ],
    )
    .unwrap()
}

#[test]
fn phylo_exact_match_is_zero() {
    // two samples of different genera, embedding distance = d_phy = 1
    let mut tape: Tape<f64> = Tape::new();
    let emb = tape.constant(vec![0.0, 0.0, 1.0, 0.0], vec![2, 2]).unwrap();
    let (loss, skipped) = phylo_distance_loss(&mut tape, &emb, &[0, 1], &small_phylo(), 2.0).unwrap();
    assert!(!skipped);
    assert!(scalar(&tape, &loss).abs() < 1e-9);
}

#[test]
fn phylo_zero_embedding_distance_squares_target() {
    // x = 0, d_phy = 4 -> (0 - 4)^2 = 16; with d_phy = 3 would be 9
    let phylo = PhyloMatrix::new(2, vec![0.0, 3.0, 3.0, 0.0]).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let emb = tape.constant(vec![0.5, 0.5, 0.5, 0.5], vec![2, 2]).unwrap();
    let (loss, _) = phylo_distance_loss(&mut tape, &emb, &[0, 1], &phylo, 2.0).unwrap();
    assert!((scalar(&tape, &loss) - 9.0).abs() < 1e-6);
}

#[test]
fn phylo_four_samples_vs_pair_enumeration_oracle() {
    let emb_data = fixture(370, 4 * 3);
    let genus = [0usize, 1, 2, 0];
    let phylo = small_phylo();
    for p in [2.0, 3.0] {
        let mut tape: Tape<f64> = Tape::new();
        let emb = tape.constant(emb_data.clone(), vec![4, 3]).unwrap();
        let (loss, skipped) = phylo_distance_loss(&mut tape, &emb, &genus, &phylo, p).unwrap();
        assert!(!skipped);

        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                if genus[i] == genus[j] {
                    continue;
                }
                let mut s = 0.0;
                for k in 0..3 {
                    s += (emb_data[i * 3 + k] - emb_data[j * 3 + k]).abs().powf(p);
                }
                let norm = s.powf(1.0 / p);
                acc += (norm - phylo.get(genus[i], genus[j])).powi(2);
                count += 1;
            }
        }
        assert_eq!(count, 5);
        assert!(
            (scalar(&tape, &loss) - acc / count as f64).abs() < TOL,
            "p = {p}"
        );
    }
}

#[test]
fn phylo_single_genus_batch_skips() {
    let mut tape: Tape<f64> = Tape::new();
    let emb = tape.constant(fixture(371, 3 * 2), vec![3, 2]).unwrap();
    let (loss, skipped) = phylo_distance_loss(&mut tape, &emb, &[1, 1, 1], &small_phylo(), 2.0).unwrap();
    assert!(skipped);
    assert_eq!(scalar(&tape, &loss), 0.0);
}

#[test]
fn phylo_is_symmetric_in_pair_roles() {
    let emb_data = fixture(372, 4 * 3);
    let neg: Vec<f64> = emb_data.iter().map(|v| -v).collect();
    let genus = [0usize, 1, 2, 1];
    let run = |data: Vec<f64>| {
        let mut tape: Tape<f64> = Tape::new();
        let emb = tape.constant(data, vec![4, 3]).unwrap();
        let (loss, _) = phylo_distance_loss(&mut tape, &emb, &genus, &small_phylo(), 2.0).unwrap();
        scalar(&tape, &loss)
    };
    // ||x|| = ||-x||: negating every embedding leaves the loss unchanged
    assert!((run(emb_data) - run(neg)).abs() < 1e-12);
}

#[test]
fn phylo_gradient_matches_finite_differences() {
    let phylo = small_phylo();
    let report = check_op(
        &[(fixture(373, 4 * 3), vec![4, 3])],
        |tape, leaves| {
            phylo_distance_loss(tape, &leaves[0], &[0, 1, 2, 1], &phylo, 2.0)
                .map(|(l, _)| l)
                .map_err(|e| match e {
                    LossError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
        },
        12,
        3700,
        FD_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < GRAD_TOL, "{report:?}");
}

#[test]
fn phylo_matrix_text_roundtrip_and_validation() {
    let m = small_phylo();
    let text = m.to_text();
    assert_eq!(PhyloMatrix::from_text(&text).unwrap(), m);

    assert!(PhyloMatrix::from_text("").is_err());
    assert!(PhyloMatrix::from_text("2\n0 1\n1").is_err());
    // asymmetric
    assert!(PhyloMatrix::from_text("2\n0 1\n2 0").is_err());
    // nonzero diagonal
    assert!(PhyloMatrix::new(2, vec![1.0, 0.0, 0.0, 0.0]).is_err());
}

// ── combined dispatcher ─────────────────────────────────────────────

fn combined(fx: &mut HierFixture, mode: LossMode, level: SamplingLevel, phylo: Option<&PhyloMatrix>) -> (f64, usize) {
    let taxonomy = toy_taxonomy();
    let w = LossWeights::default();
    let ctx = LossContext {
        taxonomy: &taxonomy,
        weights: &w,
        sampling_level: level,
        phylo,
        class_weights: None,
    };
    let out = BatchOutputs {
        logits_tax: &fx.lt,
        logits_gen: &fx.lg,
        logits_fam: &fx.lf,
        emb_tax: &fx.et,
        emb_gen: &fx.eg,
        emb_fam: &fx.ef,
    };
    let mut rng = StreamRng::new(11, Stream::TripletMining);
    let report = combined_loss(&mut fx.tape, mode, &out, &fx.labels.clone(), &ctx, &mut rng).unwrap();
    (fx.tape.scalar_value(&report.loss), report.skipped_triplet_terms)
}

#[test]
fn combined_ce_ignores_other_heads() {
    let mut fx1 = hier_fixture(&[0, 2, 4, 1], 380);
    let (l1, _) = combined(&mut fx1, LossMode::Ce, SamplingLevel::Genus, None);
    // same taxa logits, scrambled genus/family heads and embeddings
    let mut fx2 = hier_fixture(&[0, 2, 4, 1], 999);
    fx2.lt = {
        let data = fx1.tape.value(&fx1.lt).to_vec();
        fx2.tape.constant(data, vec![4, 6]).unwrap()
    };
    let (l2, _) = combined(&mut fx2, LossMode::Ce, SamplingLevel::Genus, None);
    assert!((l1 - l2).abs() < 1e-12);
}

#[test]
fn combined_hier_equals_hierarchical_ce_with_unit_lambdas() {
    let mut fx = hier_fixture(&[0, 1, 2, 3, 4, 5], 381);
    let (l, _) = combined(&mut fx, LossMode::Hier, SamplingLevel::Genus, None);
    let base = hierarchical_ce(
        &mut fx.tape, &fx.lt, &fx.lg, &fx.lf, &fx.labels, &toy_taxonomy(),
        &LossWeights::default(), None,
    )
    .unwrap();
    assert!((l - fx.tape.scalar_value(&base)).abs() < TOL);
}

#[test]
fn combined_hier_phylo_matches_sum_of_parts() {
    let phylo = small_phylo();
    let mut fx = hier_fixture(&[0, 2, 4, 5], 382);
    let (l, _) = combined(&mut fx, LossMode::HierPhylo, SamplingLevel::Genus, Some(&phylo));

    let base = hierarchical_ce(
        &mut fx.tape, &fx.lt, &fx.lg, &fx.lf, &fx.labels, &toy_taxonomy(),
        &LossWeights::default(), None,
    )
    .unwrap();
    let genus: Vec<usize> = fx.labels.iter().map(|x| x.genus).collect();
    let (dist, _) = phylo_distance_loss(&mut fx.tape, &fx.eg, &genus, &phylo, 2.0).unwrap();
    let expect = fx.tape.scalar_value(&base) + 0.1 * fx.tape.scalar_value(&dist);
    assert!((l - expect).abs() < TOL);
}

#[test]
fn combined_hier_phylo_without_matrix_is_config_error() {
    let mut fx = hier_fixture(&[0, 2], 383);
    let taxonomy = toy_taxonomy();
    let w = LossWeights::default();
    let ctx = LossContext {
        taxonomy: &taxonomy,
        weights: &w,
        sampling_level: SamplingLevel::Genus,
        phylo: None,
        class_weights: None,
    };
    let out = BatchOutputs {
        logits_tax: &fx.lt,
        logits_gen: &fx.lg,
        logits_fam: &fx.lf,
        emb_tax: &fx.et,
        emb_gen: &fx.eg,
        emb_fam: &fx.ef,
    };
    let mut rng = StreamRng::new(0, Stream::TripletMining);
    assert!(matches!(
        combined_loss(&mut fx.tape, LossMode::HierPhylo, &out, &fx.labels.clone(), &ctx, &mut rng),
        Err(LossError::Config { .. })
    ));
}

#[test]
fn loss_mode_parsing() {
    assert_eq!(LossMode::parse("ce").unwrap(), LossMode::Ce);
    assert_eq!(LossMode::parse("hier+trip").unwrap(), LossMode::HierTrip);
    assert!(LossMode::parse("focal").is_err());
    for mode in LossMode::all() {
        assert_eq!(LossMode::parse(mode.name()).unwrap(), mode);
    }
}

#[test]
fn all_modes_nonnegative_and_finite() {
    let phylo = small_phylo();
    for (i, mode) in LossMode::all().into_iter().enumerate() {
        let mut fx = hier_fixture(&[0, 1, 2, 3, 4, 5], 400 + i as u64);
        let (l, _) = combined(&mut fx, mode, SamplingLevel::Genus, Some(&phylo));
        assert!(l.is_finite() && l >= 0.0, "{mode:?}: {l}");
    }
}

proptest! {
    /// Cross-entropy is equivariant under batch permutation.
    #[test]
    fn ce_batch_permutation_equivariant(seed in 0u64..500) {
        let n = 6;
        let c = 4;
        let data = fixture(seed, n * c);
        let targets: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % c).collect();

        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(data.clone(), vec![n, c]).unwrap();
        let l1 = cross_entropy(&mut tape, &logits, &targets, None).unwrap();

        // rotate the batch by 2
        let mut rot = Vec::new();
        for i in 0..n {
            let src = (i + 2) % n;
            rot.extend_from_slice(&data[src * c..(src + 1) * c]);
        }
        let rot_targets: Vec<usize> = (0..n).map(|i| targets[(i + 2) % n]).collect();
        let logits2 = tape.constant(rot, vec![n, c]).unwrap();
        let l2 = cross_entropy(&mut tape, &logits2, &rot_targets, None).unwrap();
        let a = tape.scalar_value(&l1);
        let b = tape.scalar_value(&l2);
        prop_assert!((a - b).abs() < 1e-9);
    }
}
