//! The training objectives: weighted cross-entropy, triplet margin loss,
//! hierarchical cross-entropy, triplet-augmented hierarchical loss, and the
//! phylogenetic distance loss, plus the mode dispatcher that combines them.
//!
//! Every loss is a recorded tape computation, so gradients flow to the
//! logits/embeddings (and through them to the model) and every loss is
//! finite-difference checkable.

use std::fmt;

use rand::Rng;

use crate::hierarchy::{HierLabel, LabelError, Taxonomy};
use crate::rng::StreamRng;
use crate::tensor::{Element, Tape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// Triplet margin.
    pub alpha: f64,
    /// Norm order for the phylogenetic distance.
    pub p: f64,
    /// Weight of the distance term in the phylo composition.
    pub lambda_dist: f64,
}

impl Default for LossWeights {
    /// lambda_i = 1 for all i, lambda_dist = 0.1, p = 2 (euclidean).
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            alpha: 1.0,
            p: 2.0,
            lambda_dist: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5,
            self.alpha, self.lambda_dist,
        ];
        if all.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(LossError::Config { detail: "loss weights must be >= 0 and finite".into() });
        }
        if self.p < 1.0 {
            return Err(LossError::Config { detail: format!("norm order p = {} must be >= 1", self.p) });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Ce,
    CeTrip,
    Hier,
    HierTrip,
    HierPhylo,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self, LossError> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "ce+trip" => Ok(LossMode::CeTrip),
            "hier" => Ok(LossMode::Hier),
            "hier+trip" => Ok(LossMode::HierTrip),
            "hier+phylo" => Ok(LossMode::HierPhylo),
            other => Err(LossError::Config { detail: format!("unknown loss mode '{other}'") }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::CeTrip => "ce+trip",
            LossMode::Hier => "hier",
            LossMode::HierTrip => "hier+trip",
            LossMode::HierPhylo => "hier+phylo",
        }
    }

    pub fn all() -> [LossMode; 5] {
        [LossMode::Ce, LossMode::CeTrip, LossMode::Hier, LossMode::HierTrip, LossMode::HierPhylo]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingLevel {
    Taxon,
    Genus,
    Family,
}

impl SamplingLevel {
    pub fn parse(s: &str) -> Result<Self, LossError> {
        match s {
            "taxon" => Ok(SamplingLevel::Taxon),
            "genus" => Ok(SamplingLevel::Genus),
            "family" => Ok(SamplingLevel::Family),
            other => Err(LossError::Config { detail: format!("unknown sampling level '{other}'") }),
        }
    }

    pub fn class_of(&self, label: &HierLabel) -> usize {
        match self {
            SamplingLevel::Taxon => label.taxon,
            SamplingLevel::Genus => label.genus,
            SamplingLevel::Family => label.family,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    Label(LabelError),
    Tensor(TensorError),
    Config { detail: String },
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::Label(e) => write!(f, "{e}"),
            LossError::Tensor(e) => write!(f, "{e}"),
            LossError::Config { detail } => write!(f, "loss config: {detail}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<LabelError> for LossError {
    fn from(e: LabelError) -> Self {
        LossError::Label(e)
    }
}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Tensor(e)
    }
}

pub type LossResult<V> = std::result::Result<V, LossError>;

/// Symmetric pairwise distances between genera with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PhyloMatrix {
    n: usize,
    d: Vec<f64>,
}

impl PhyloMatrix {
    pub fn new(n: usize, d: Vec<f64>) -> LossResult<Self> {
        if d.len() != n * n {
            return Err(LossError::Config {
                detail: format!("{} entries for a {n}x{n} matrix", d.len()),
            });
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(LossError::Config { detail: format!("nonzero diagonal at {i}") });
            }
            for j in 0..n {
                let v = d[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(LossError::Config { detail: format!("bad distance at ({i},{j}): {v}") });
                }
                if v != d[j * n + i] {
                    return Err(LossError::Config { detail: format!("asymmetry at ({i},{j})") });
                }
            }
        }
        Ok(PhyloMatrix { n, d })
    }

    pub fn n_genus(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    /// Plain-text format: first line the genus count, then one
    /// space-separated row per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{}", self.get(i, j))).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> LossResult<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| LossError::Config { detail: "empty phylo matrix file".into() })?
            .trim()
            .parse()
            .map_err(|e| LossError::Config { detail: format!("bad genus count: {e}") })?;
        if n == 0 || n > 1 << 14 {
            return Err(LossError::Config { detail: format!("implausible genus count {n}") });
        }
        let mut d = Vec::with_capacity(n * n);
        for (i, line) in lines.take(n).enumerate() {
            let row: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            let row = row.map_err(|e| LossError::Config { detail: format!("row {i}: {e}") })?;
            if row.len() != n {
                return Err(LossError::Config {
                    detail: format!("row {i} has {} entries, expected {n}", row.len()),
                });
            }
            d.extend(row);
        }
        if d.len() != n * n {
            return Err(LossError::Config { detail: format!("expected {n} rows") });
        }
        PhyloMatrix::new(n, d)
    }
}

/// Mean over the batch of the weighted negative log-softmax of the target
/// class. With per-class weights `w`, the mean is weighted:
/// `sum_n w[y_n] * nll_n / sum_n w[y_n]`.
pub fn cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    logits: &Tensor,
    targets: &[usize],
    class_weights: Option<&[f64]>,
) -> LossResult<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(LossError::Config { detail: format!("logits must be [N,C], got {shape:?}") });
    }
    let (n, c) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(LossError::Config { detail: format!("{} targets for {n} rows", targets.len()) });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(LossError::Label(LabelError::OutOfRange { what: "target", id: bad, count: c }));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.select_columns(&logp, targets)?;
    match class_weights {
        None => {
            let mean = tape.reduce_mean(&picked, None)?;
            Ok(tape.neg(&mean)?)
        }
        Some(w) => {
            if w.len() != c {
                return Err(LossError::Config {
                    detail: format!("{} class weights for {c} classes", w.len()),
                });
            }
            let wn: Vec<T> = targets.iter().map(|&y| T::from_f64(w[y])).collect();
            let wsum: f64 = targets.iter().map(|&y| w[y]).sum();
            if wsum <= 0.0 {
                return Err(LossError::Config { detail: "target weights sum to zero".into() });
            }
            let wt = tape.leaf(wn, vec![n], false)?;
            let weighted = tape.mul(&picked, &wt)?;
            let total = tape.reduce_sum(&weighted, None)?;
            Ok(tape.affine(&total, T::from_f64(-1.0 / wsum), T::zero())?)
        }
    }
}

/// Squared (`squared = true`, the margin form of the base objective) or
/// plain euclidean distances inside the hinge
/// `max(alpha + d(a,p) - d(a,n), 0)`, averaged over the batch.
pub fn triplet_loss<T: Element>(
    tape: &mut Tape<T>,
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    alpha: f64,
    squared: bool,
) -> LossResult<Tensor> {
    if anchor.shape() != positive.shape() || anchor.shape() != negative.shape() {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "triplet_loss",
            detail: format!(
                "{:?} / {:?} / {:?}",
                anchor.shape(),
                positive.shape(),
                negative.shape()
            ),
        }));
    }
    if anchor.rank() != 2 {
        return Err(LossError::Config { detail: format!("triplets must be [N,D], got {:?}", anchor.shape()) });
    }
    let dist = |tape: &mut Tape<T>, a: &Tensor, b: &Tensor| -> LossResult<Tensor> {
        let diff = tape.sub(a, b)?;
        let sq = tape.mul(&diff, &diff)?;
        let ssq = tape.reduce_sum(&sq, Some(1))?;
        if squared {
            Ok(ssq)
        } else {
            // sqrt's backward rule already yields a zero subgradient at 0
            Ok(tape.sqrt(&ssq)?)
        }
    };
    let d_pos = dist(tape, anchor, positive)?;
    let d_neg = dist(tape, anchor, negative)?;
    let margin = tape.sub(&d_pos, &d_neg)?;
    let shifted = tape.affine(&margin, T::one(), T::from_f64(alpha))?;
    let hinge = tape.relu(&shifted)?;
    Ok(tape.reduce_mean(&hinge, None)?)
}

fn check_labels(taxonomy: &Taxonomy, labels: &[HierLabel]) -> LossResult<()> {
    for l in labels {
        taxonomy.check(l)?;
    }
    Ok(())
}

/// `L_CE_tax + lambda1 * L_CE_gen + lambda2 * L_CE_fam`.
#[allow(clippy::too_many_arguments)]
pub fn hierarchical_ce<T: Element>(
    tape: &mut Tape<T>,
    logits_tax: &Tensor,
    logits_gen: &Tensor,
    logits_fam: &Tensor,
    labels: &[HierLabel],
    taxonomy: &Taxonomy,
    w: &LossWeights,
    class_weights: Option<&[f64]>,
) -> LossResult<Tensor> {
    check_labels(taxonomy, labels)?;
    let tax: Vec<usize> = labels.iter().map(|l| l.taxon).collect();
    let gen: Vec<usize> = labels.iter().map(|l| l.genus).collect();
    let fam: Vec<usize> = labels.iter().map(|l| l.family).collect();
    let ce_tax = cross_entropy(tape, logits_tax, &tax, class_weights)?;
    let ce_gen = cross_entropy(tape, logits_gen, &gen, None)?;
    let ce_fam = cross_entropy(tape, logits_fam, &fam, None)?;
    let g = tape.affine(&ce_gen, T::from_f64(w.lambda1), T::zero())?;
    let f = tape.affine(&ce_fam, T::from_f64(w.lambda2), T::zero())?;
    let partial = tape.add(&ce_tax, &g)?;
    Ok(tape.add(&partial, &f)?)
}

/// Index triples mined for one batch, plus skip accounting.
#[derive(Debug, Clone, Default)]
pub struct TripletStats {
    /// (anchor, positive, negative) row indices, one per anchor that had
    /// both a valid positive and a valid negative.
    pub mined: Vec<(usize, usize, usize)>,
    /// Anchors skipped for lack of a positive or negative.
    pub skipped_anchors: usize,
    /// 1 when the whole term was skipped (no valid triplet in the batch).
    pub skipped_terms: usize,
}

/// Batch-random mining: per anchor, one uniformly drawn valid positive
/// (same class at `level`) and negative (different class).
pub fn mine_triplets(
    labels: &[HierLabel],
    level: SamplingLevel,
    rng: &mut StreamRng,
) -> TripletStats {
    let classes: Vec<usize> = labels.iter().map(|l| level.class_of(l)).collect();
    let mut stats = TripletStats::default();
    for a in 0..labels.len() {
        let positives: Vec<usize> = (0..labels.len())
            .filter(|&j| j != a && classes[j] == classes[a])
            .collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&j| classes[j] != classes[a]).collect();
        if positives.is_empty() || negatives.is_empty() {
            stats.skipped_anchors += 1;
            continue;
        }
        let p = positives[rng.gen_range(0..positives.len())];
        let n = negatives[rng.gen_range(0..negatives.len())];
        stats.mined.push((a, p, n));
    }
    if stats.mined.is_empty() {
        stats.skipped_terms = 1;
    }
    stats
}

fn triplet_term<T: Element>(
    tape: &mut Tape<T>,
    emb: &Tensor,
    stats: &TripletStats,
    alpha: f64,
) -> LossResult<Tensor> {
    if stats.mined.is_empty() {
        return Ok(tape.scalar(T::zero()));
    }
    let (ia, ip, ineg): (Vec<usize>, Vec<usize>, Vec<usize>) = (
        stats.mined.iter().map(|t| t.0).collect(),
        stats.mined.iter().map(|t| t.1).collect(),
        stats.mined.iter().map(|t| t.2).collect(),
    );
    let a = tape.embedding_lookup(emb, &ia)?;
    let p = tape.embedding_lookup(emb, &ip)?;
    let n = tape.embedding_lookup(emb, &ineg)?;
    // euclidean (non-squared) distance in the hierarchical composition
    triplet_loss(tape, &a, &p, &n, alpha, false)
}

/// Eq-style triplet-augmented hierarchical objective:
/// hierarchical CE plus `lambda3..5` triplet terms over the taxa / genus /
/// family embedding heads, with one shared set of triplets mined at
/// `level`. Batches without a valid triplet contribute zero to the triplet
/// terms and are counted, not errored.
#[allow(clippy::too_many_arguments)]
pub fn hierarchical_triplet<T: Element>(
    tape: &mut Tape<T>,
    logits: (&Tensor, &Tensor, &Tensor),
    embeddings: (&Tensor, &Tensor, &Tensor),
    labels: &[HierLabel],
    taxonomy: &Taxonomy,
    level: SamplingLevel,
    w: &LossWeights,
    class_weights: Option<&[f64]>,
    rng: &mut StreamRng,
) -> LossResult<(Tensor, TripletStats)> {
    let base = hierarchical_ce(
        tape, logits.0, logits.1, logits.2, labels, taxonomy, w, class_weights,
    )?;
    let stats = mine_triplets(labels, level, rng);

    let t_tax = triplet_term(tape, embeddings.0, &stats, w.alpha)?;
    let t_gen = triplet_term(tape, embeddings.1, &stats, w.alpha)?;
    let t_fam = triplet_term(tape, embeddings.2, &stats, w.alpha)?;
    let t3 = tape.affine(&t_tax, T::from_f64(w.lambda3), T::zero())?;
    let t4 = tape.affine(&t_gen, T::from_f64(w.lambda4), T::zero())?;
    let t5 = tape.affine(&t_fam, T::from_f64(w.lambda5), T::zero())?;
    let mut loss = tape.add(&base, &t3)?;
    loss = tape.add(&loss, &t4)?;
    loss = tape.add(&loss, &t5)?;
    Ok((loss, stats))
}

/// Mean over cross-genus batch pairs of `(||e_a - e_b||_p - d_phy)^2`.
/// Single-genus batches yield zero with the skip flag set.
pub fn phylo_distance_loss<T: Element>(
    tape: &mut Tape<T>,
    emb_gen: &Tensor,
    genus_ids: &[usize],
    phylo: &PhyloMatrix,
    p: f64,
) -> LossResult<(Tensor, bool)> {
    let shape = emb_gen.shape();
    if shape.len() != 2 || shape[0] != genus_ids.len() {
        return Err(LossError::Config {
            detail: format!("embeddings {shape:?} vs {} genus ids", genus_ids.len()),
        });
    }
    if let Some(&bad) = genus_ids.iter().find(|&&g| g >= phylo.n_genus()) {
        return Err(LossError::Label(LabelError::OutOfRange {
            what: "genus",
            id: bad,
            count: phylo.n_genus(),
        }));
    }
    let mut ia = Vec::new();
    let mut ib = Vec::new();
    let mut target = Vec::new();
    for i in 0..genus_ids.len() {
        for j in i + 1..genus_ids.len() {
            if genus_ids[i] != genus_ids[j] {
                ia.push(i);
                ib.push(j);
                target.push(phylo.get(genus_ids[i], genus_ids[j]));
            }
        }
    }
    if ia.is_empty() {
        return Ok((tape.scalar(T::zero()), true));
    }
    let a = tape.embedding_lookup(emb_gen, &ia)?;
    let b = tape.embedding_lookup(emb_gen, &ib)?;
    let diff = tape.sub(&a, &b)?;
    let norms = if p == 2.0 {
        let sq = tape.mul(&diff, &diff)?;
        let ssq = tape.reduce_sum(&sq, Some(1))?;
        tape.sqrt(&ssq)?
    } else {
        let mag = tape.abs(&diff)?;
        let powed = tape.pow_scalar(&mag, T::from_f64(p))?;
        let sum = tape.reduce_sum(&powed, Some(1))?;
        tape.pow_scalar(&sum, T::from_f64(1.0 / p))?
    };
    let tvec: Vec<T> = target.iter().map(|&v| T::from_f64(v)).collect();
    let t = tape.leaf(tvec, vec![target.len()], false)?;
    let resid = tape.sub(&norms, &t)?;
    let sq = tape.mul(&resid, &resid)?;
    Ok((tape.reduce_mean(&sq, None)?, false))
}

/// Everything a batch exposes to the loss dispatcher.
pub struct BatchOutputs<'a> {
    pub logits_tax: &'a Tensor,
    pub logits_gen: &'a Tensor,
    pub logits_fam: &'a Tensor,
    pub emb_tax: &'a Tensor,
    pub emb_gen: &'a Tensor,
    pub emb_fam: &'a Tensor,
}

pub struct LossContext<'a> {
    pub taxonomy: &'a Taxonomy,
    pub weights: &'a LossWeights,
    pub sampling_level: SamplingLevel,
    pub phylo: Option<&'a PhyloMatrix>,
    pub class_weights: Option<&'a [f64]>,
}

/// Loss value plus per-batch skip accounting.
pub struct LossReport {
    pub loss: Tensor,
    pub skipped_triplet_anchors: usize,
    pub skipped_triplet_terms: usize,
    pub skipped_phylo: bool,
}

/// Dispatch on the training mode.
pub fn combined_loss<T: Element>(
    tape: &mut Tape<T>,
    mode: LossMode,
    out: &BatchOutputs<'_>,
    labels: &[HierLabel],
    ctx: &LossContext<'_>,
    rng: &mut StreamRng,
) -> LossResult<LossReport> {
    ctx.weights.validate()?;
    let mut report = LossReport {
        loss: tape.scalar(T::zero()),
        skipped_triplet_anchors: 0,
        skipped_triplet_terms: 0,
        skipped_phylo: false,
    };
    match mode {
        LossMode::Ce => {
            let tax: Vec<usize> = labels.iter().map(|l| l.taxon).collect();
            report.loss = cross_entropy(tape, out.logits_tax, &tax, ctx.class_weights)?;
        }
        LossMode::CeTrip => {
            let tax: Vec<usize> = labels.iter().map(|l| l.taxon).collect();
            let ce = cross_entropy(tape, out.logits_tax, &tax, ctx.class_weights)?;
            let stats = mine_triplets(labels, SamplingLevel::Taxon, rng);
            let trip = triplet_term(tape, out.emb_tax, &stats, ctx.weights.alpha)?;
            report.loss = tape.add(&ce, &trip)?;
            report.skipped_triplet_anchors = stats.skipped_anchors;
            report.skipped_triplet_terms = stats.skipped_terms;
        }
        LossMode::Hier => {
            report.loss = hierarchical_ce(
                tape,
                out.logits_tax,
                out.logits_gen,
                out.logits_fam,
                labels,
                ctx.taxonomy,
                ctx.weights,
                ctx.class_weights,
            )?;
        }
        LossMode::HierTrip => {
            let (loss, stats) = hierarchical_triplet(
                tape,
                (out.logits_tax, out.logits_gen, out.logits_fam),
                (out.emb_tax, out.emb_gen, out.emb_fam),
                labels,
                ctx.taxonomy,
                ctx.sampling_level,
                ctx.weights,
                ctx.class_weights,
                rng,
            )?;
            report.loss = loss;
            report.skipped_triplet_anchors = stats.skipped_anchors;
            report.skipped_triplet_terms = stats.skipped_terms;
        }
        LossMode::HierPhylo => {
            let phylo = ctx.phylo.ok_or_else(|| LossError::Config {
                detail: "hier+phylo mode needs a phylogenetic distance matrix".into(),
            })?;
            let base = hierarchical_ce(
                tape,
                out.logits_tax,
                out.logits_gen,
                out.logits_fam,
                labels,
                ctx.taxonomy,
                ctx.weights,
                ctx.class_weights,
            )?;
            let genus: Vec<usize> = labels.iter().map(|l| l.genus).collect();
            let (dist, skipped) = phylo_distance_loss(tape, out.emb_gen, &genus, phylo, ctx.weights.p)?;
            let scaled = tape.affine(&dist, T::from_f64(ctx.weights.lambda_dist), T::zero())?;
            report.loss = tape.add(&base, &scaled)?;
            report.skipped_phylo = skipped;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
