//! Deterministic synthetic fine-grained dataset.
//!
//! Three visual cues at three scales, mirroring the hierarchy:
//!   - family: background sine texture frequency (blue channel),
//!   - genus: a coarse filled shape (green channel),
//!   - taxon: a 4x4-pixel glyph (red channel) whose pattern distinguishes
//!     taxa within a genus.
//!
//! Every glyph has the same number of lit cells and all taxa of a genus
//!     share the glyph position, so downsampling by 4x collapses every
//!     glyph to the same gray blot: the taxon cue lives strictly at fine
//!     scale, while genus and family cues survive. That makes accuracy a
//!     function of input resolution by construction.
//!
//! Generation is a pure function of `(spec, seed)`: the data stream is
//! split per taxon and per sample, so sibling draws never interleave.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hierarchy::{HierLabel, LabelError, Taxonomy};
use crate::image::RasterImage;
use crate::losses::{LossError, PhyloMatrix, SamplingLevel};
use crate::rng::{Stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_family: usize,
    pub n_genus: usize,
    pub n_taxa: usize,
    pub img_size: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_family: 4,
            n_genus: 12,
            n_taxa: 36,
            img_size: 64,
            samples_min: 7,
            samples_max: 100,
            zipf_exponent: 1.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |d: String| Err(SynthError::Config { detail: d });
        if self.n_family == 0 || self.n_genus < self.n_family || self.n_taxa < self.n_genus {
            return fail(format!(
                "hierarchy must satisfy taxa >= genera >= families >= 1, got {}/{}/{}",
                self.n_taxa, self.n_genus, self.n_family
            ));
        }
        if self.samples_min < 3 {
            return fail(format!("samples_min {} below the floor of 3", self.samples_min));
        }
        if self.samples_max < self.samples_min {
            return fail(format!(
                "samples_max {} below samples_min {}",
                self.samples_max, self.samples_min
            ));
        }
        if self.img_size < 16 {
            return fail(format!("img_size {} too small for the glyph layout", self.img_size));
        }
        if self.zipf_exponent <= 0.0 || !self.zipf_exponent.is_finite() {
            return fail(format!("zipf_exponent {} must be positive", self.zipf_exponent));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: SynthSpec = toml::from_str(text)
            .map_err(|e| SynthError::Config { detail: format!("spec parse: {e}") })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    /// Modulo child->parent maps: surjective whenever counts are ordered.
    pub fn taxonomy(&self) -> Taxonomy {
        let genus_of: Vec<usize> = (0..self.n_taxa).map(|t| t % self.n_genus).collect();
        let family_of: Vec<usize> = (0..self.n_genus).map(|g| g % self.n_family).collect();
        Taxonomy::new(genus_of, family_of, self.n_family).expect("modulo maps are in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    Config { detail: String },
    Label(LabelError),
    Loss(LossError),
    Io(String),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::Config { detail } => write!(f, "synth config: {detail}"),
            SynthError::Label(e) => write!(f, "{e}"),
            SynthError::Loss(e) => write!(f, "{e}"),
            SynthError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for SynthError {}

impl From<LabelError> for SynthError {
    fn from(e: LabelError) -> Self {
        SynthError::Label(e)
    }
}

impl From<LossError> for SynthError {
    fn from(e: LossError) -> Self {
        SynthError::Loss(e)
    }
}

impl From<io::Error> for SynthError {
    fn from(e: io::Error) -> Self {
        SynthError::Io(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: RasterImage,
    pub label: HierLabel,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub taxonomy: Taxonomy,
    pub samples: Vec<SynthSample>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices restricted to the first `n` taxa.
    pub fn subset_of_taxa(&self, n: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].label.taxon < n)
            .collect()
    }
}

/// Per-taxon sample counts: `clamp(round(max * (t+1)^-zipf), min, max)`.
pub fn zipf_counts(spec: &SynthSpec) -> Vec<usize> {
    (0..spec.n_taxa)
        .map(|t| {
            let w = (spec.samples_max as f64) * ((t + 1) as f64).powf(-spec.zipf_exponent);
            (w.round() as usize).clamp(spec.samples_min, spec.samples_max)
        })
        .collect()
}

const GLYPH_CELLS: usize = 4;

/// Codes ordered for wide pairwise Hamming distance among early entries,
/// so sibling taxa (which take consecutive slots) stay well separated.
const CODE_TABLE: [u8; 16] = [
    0x0, 0xF, 0x3, 0xC, 0x5, 0xA, 0x6, 0x9, 0x1, 0xE, 0x2, 0xD, 0x4, 0xB, 0x7, 0x8,
];

/// 4-bit glyph code for a taxon: the within-genus index through the code
/// table, xor-scrambled per genus (xor preserves pairwise distances).
fn glyph_code(taxon: usize, n_genus: usize) -> u8 {
    let within = taxon / n_genus;
    let genus = taxon % n_genus;
    let scramble = (genus.wrapping_mul(0x9e37) >> 3) as u8 & 0xF;
    CODE_TABLE[within % 16] ^ scramble
}

/// Snap a coordinate onto the 4k+1 lattice, clear of the image edge.
fn lattice(raw: usize, size: usize) -> usize {
    let max = (size - GLYPH_CELLS - 1) / 4 * 4 + 1;
    ((raw / 4) * 4 + 1).min(max)
}

/// Glyph anchors: three positions per genus. Anchors sit on the 4k+1
/// lattice so a half-pixel-center bilinear 4x downsample samples each
/// encoding pair as an aligned two-tap average, which the pair encoding
/// cancels.
fn glyph_origins(genus: usize, size: usize) -> [(usize, usize); 3] {
    let span = size / 2;
    [
        (
            lattice((genus.wrapping_mul(13) + 5) % span + size / 4, size),
            lattice((genus.wrapping_mul(7) + 3) % span + size / 4, size),
        ),
        (
            lattice((genus.wrapping_mul(11) + 2) % span + size / 8, size),
            lattice((genus.wrapping_mul(17) + 9) % span + size / 8, size),
        ),
        (
            lattice((genus.wrapping_mul(5) + 7) % span + size / 3, size),
            lattice((genus.wrapping_mul(3) + 11) % span + size / 5, size),
        ),
    ]
}

/// Stamp one 4x4 glyph. Each of the four bits owns a 2x2 block: a
/// horizontal [255, 0] or [0, 255] pair depending on the bit, duplicated
/// over two rows. Any aligned two-tap horizontal average of a pair is a
/// constant 127.5, so a 4x downsample erases the code exactly while the
/// full-resolution pattern separates all sixteen codes.
fn stamp_glyph(img: &mut RasterImage, code: u8, oy: usize, ox: usize) {
    for block_y in 0..2 {
        for block_x in 0..2 {
            let bit = code >> (block_y * 2 + block_x) & 1 == 1;
            let (hi, lo) = if bit { (255, 0) } else { (0, 255) };
            for dy in 0..2 {
                let y = oy + block_y * 2 + dy;
                let x = ox + block_x * 2;
                for (dx, v) in [(0usize, hi), (1, lo)] {
                    let mut px = img.get(y, x + dx);
                    px[0] = v;
                    img.set(y, x + dx, px);
                }
            }
        }
    }
}

fn draw_genus_shape(img: &mut RasterImage, genus: usize, cy: f64, cx: f64, size: usize) {
    let r = size as f64 * (0.18 + 0.03 * (genus / 8) as f64);
    let kind = genus % 8;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let inside = match kind {
                0 => dx * dx + dy * dy <= r * r,
                1 => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
                }
                2 => dx.abs() <= r && dy.abs() <= r,
                3 => dx.abs() + dy.abs() <= r,
                4 => dy.abs() <= r * 0.4 && dx.abs() <= r * 1.4,
                5 => dx.abs() <= r * 0.4 && dy.abs() <= r * 1.4,
                6 => (dx.abs() <= r * 0.35 || dy.abs() <= r * 0.35) && dx.abs().max(dy.abs()) <= r,
                _ => (dx - dy).abs() <= r * 0.5 && dx.abs().max(dy.abs()) <= r,
            };
            if inside {
                let mut px = img.get(y, x);
                px[1] = 200;
                img.set(y, x, px);
            }
        }
    }
}

fn render_sample(spec: &SynthSpec, label: HierLabel, rng: &mut StreamRng) -> RasterImage {
    let size = spec.img_size;
    // per-sample nuisance parameters, drawn in a fixed order; the texture
    // phase wobbles but stays representative of its family
    let phase_x: f64 = rng.gen_range(0.0..0.5);
    let phase_y: f64 = rng.gen_range(0.0..0.5);
    let jitter_y: f64 = rng.gen_range(-1.0..1.0);
    let jitter_x: f64 = rng.gen_range(-1.0..1.0);
    let noise_seed: u64 = rng.gen();

    let freq = (label.family + 1) as f64;
    let mut img = RasterImage::from_fn(size, size, |y, x| {
        let fy = y as f64 / size as f64;
        let fx = x as f64 / size as f64;
        let tex = (std::f64::consts::TAU * freq * fx + phase_x).sin()
            * (std::f64::consts::TAU * freq * fy + phase_y).sin();
        let b = (110.0 + 70.0 * tex) as u8;
        [20, 30, b]
    })
    .expect("size validated");

    draw_genus_shape(
        &mut img,
        label.genus,
        size as f64 / 2.0 + jitter_y,
        size as f64 / 2.0 + jitter_x,
        size,
    );

    // taxon glyph: fixed positions per genus, pattern per taxon
    let code = glyph_code(label.taxon, spec.n_genus);
    for (oy, ox) in glyph_origins(label.genus, size) {
        stamp_glyph(&mut img, code, oy, ox);
    }

    // mild uniform pixel noise over all channels
    let mut nrng = StreamRng::new(noise_seed, Stream::DataGen);
    let mut noisy = Vec::with_capacity(size * size * 3);
    for &v in img.data() {
        let delta: i16 = nrng.gen_range(-12..=12);
        noisy.push((v as i16 + delta).clamp(0, 255) as u8);
    }
    RasterImage::new(size, size, noisy).expect("noise preserves extent")
}

/// Generate the full dataset: a pure function of `(spec, spec.seed)`.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let taxonomy = spec.taxonomy();
    let counts = zipf_counts(spec);
    let base = StreamRng::new(spec.seed, Stream::DataGen);
    let mut samples = Vec::new();
    for taxon in 0..spec.n_taxa {
        let label = taxonomy.label_for(taxon)?;
        let taxon_rng = base.split(taxon as u64);
        for s in 0..counts[taxon] {
            let mut sample_rng = taxon_rng.split(s as u64);
            samples.push(SynthSample {
                image: render_sample(spec, label, &mut sample_rng),
                label,
            });
        }
    }
    Ok(SynthDataset { spec: spec.clone(), taxonomy, samples })
}

/// Ultrametric distances from a random binary merge tree over genera.
/// Same-family clusters merge first at strictly lower heights, so
/// within-family distances are strictly smaller than cross-family ones.
pub fn phylo_matrix(spec: &SynthSpec, seed: u64) -> Result<PhyloMatrix, SynthError> {
    spec.validate()?;
    let n = spec.n_genus;
    if n < 2 {
        return Err(SynthError::Config { detail: "phylo matrix needs >= 2 genera".into() });
    }
    let taxonomy = spec.taxonomy();
    let mut rng = StreamRng::new(seed, Stream::DataGen);

    // cluster = (member genera, family id or None once mixed)
    let mut clusters: Vec<(Vec<usize>, Option<usize>)> =
        (0..n).map(|g| (vec![g], Some(taxonomy.family_of_genus(g)))).collect();
    let mut dist = vec![0.0f64; n * n];
    let mut height = 0.0f64;

    // merge clusters i and j at `height`; the caller sets the new family tag
    let merge = |clusters: &mut Vec<(Vec<usize>, Option<usize>)>,
                 i: usize,
                 j: usize,
                 height: f64,
                 dist: &mut Vec<f64>| {
        let (bj, _) = clusters.swap_remove(j.max(i));
        let (bi, _) = clusters.swap_remove(j.min(i));
        for &a in &bi {
            for &b in &bj {
                dist[a * n + b] = 2.0 * height;
                dist[b * n + a] = 2.0 * height;
            }
        }
        let mut members = bi;
        members.extend(bj);
        clusters.push((members, None));
    };

    // phase 1: collapse each family
    loop {
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                if clusters[i].1.is_some() && clusters[i].1 == clusters[j].1 {
                    candidates.push((i, j));
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let (i, j) = candidates[rng.gen_range(0..candidates.len())];
        height += 1.0 + rng.gen_range(0.0..0.5);
        let fam = clusters[i].1;
        merge(&mut clusters, i, j, height, &mut dist);
        let last = clusters.len() - 1;
        clusters[last].1 = fam;
    }

    // phase 2: merge across families at strictly larger heights
    let cross_base = height + 1.0;
    let mut height = cross_base;
    while clusters.len() > 1 {
        let i = rng.gen_range(0..clusters.len());
        let mut j = rng.gen_range(0..clusters.len() - 1);
        if j >= i {
            j += 1;
        }
        height += 1.0 + rng.gen_range(0.0..0.5);
        merge(&mut clusters, i, j, height, &mut dist);
        let last = clusters.len() - 1;
        clusters[last].1 = None;
    }

    Ok(PhyloMatrix::new(n, dist)?)
}

/// Stream of index batches, each guaranteed to contain at least one anchor
/// with a valid positive and negative at `level`.
pub struct TripletBatches<'a> {
    dataset: &'a SynthDataset,
    by_class: Vec<Vec<usize>>,
    eligible: Vec<usize>,
    batch_size: usize,
    rng: StreamRng,
}

impl<'a> TripletBatches<'a> {
    pub fn new(
        dataset: &'a SynthDataset,
        level: SamplingLevel,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, SynthError> {
        if batch_size < 3 {
            return Err(SynthError::Config { detail: "triplet batches need batch_size >= 3".into() });
        }
        let n_classes = match level {
            SamplingLevel::Taxon => dataset.taxonomy.n_taxa(),
            SamplingLevel::Genus => dataset.taxonomy.n_genus(),
            SamplingLevel::Family => dataset.taxonomy.n_family(),
        };
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, s) in dataset.samples.iter().enumerate() {
            by_class[level.class_of(&s.label)].push(i);
        }
        let populated = by_class.iter().filter(|c| !c.is_empty()).count();
        let eligible: Vec<usize> = (0..n_classes).filter(|&c| by_class[c].len() >= 2).collect();
        if populated < 2 || eligible.is_empty() {
            return Err(SynthError::Config {
                detail: format!(
                    "level needs >= 2 populated classes and one with >= 2 samples ({populated} populated)"
                ),
            });
        }
        Ok(TripletBatches {
            dataset,
            by_class,
            eligible,
            batch_size,
            rng: StreamRng::new(seed, Stream::Batching),
        })
    }
}

impl Iterator for TripletBatches<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Self::Item> {
        // anchor class with >= 2 samples: take two distinct members
        let class = self.eligible[self.rng.gen_range(0..self.eligible.len())];
        let members = &self.by_class[class];
        let pos_a = self.rng.gen_range(0..members.len());
        let mut pos_p = self.rng.gen_range(0..members.len() - 1);
        if pos_p >= pos_a {
            pos_p += 1;
        }
        let mut batch = vec![members[pos_a], members[pos_p]];
        // guaranteed negative from another class
        let other: Vec<usize> = (0..self.by_class.len())
            .filter(|&c| c != class && !self.by_class[c].is_empty())
            .collect();
        let oc = other[self.rng.gen_range(0..other.len())];
        batch.push(self.by_class[oc][self.rng.gen_range(0..self.by_class[oc].len())]);
        while batch.len() < self.batch_size {
            batch.push(self.rng.gen_range(0..self.dataset.len()));
        }
        Some(batch)
    }
}

/// One record per sample: `path<TAB>family<TAB>genus<TAB>taxon`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub family: usize,
    pub genus: usize,
    pub taxon: usize,
}

pub fn manifest_to_text(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.path, e.family, e.genus, e.taxon));
    }
    out
}

pub fn manifest_from_text(text: &str) -> Result<Vec<ManifestEntry>, SynthError> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(SynthError::Config {
                detail: format!("manifest line {}: expected 4 tab-separated fields", lineno + 1),
            });
        }
        let parse = |s: &str, what: &str| -> Result<usize, SynthError> {
            s.parse().map_err(|e| SynthError::Config {
                detail: format!("manifest line {}: bad {what}: {e}", lineno + 1),
            })
        };
        entries.push(ManifestEntry {
            path: fields[0].to_string(),
            family: parse(fields[1], "family")?,
            genus: parse(fields[2], "genus")?,
            taxon: parse(fields[3], "taxon")?,
        });
    }
    Ok(entries)
}

const SPEC_FILE: &str = "spec.toml";
const MANIFEST_FILE: &str = "manifest.tsv";
const PHYLO_FILE: &str = "phylo.txt";
const IMAGE_DIR: &str = "images";

/// Write a dataset as a directory: `spec.toml`, `images/*.ppm`,
/// `manifest.tsv`, and optionally `phylo.txt`.
pub fn dataset_to_dir(
    ds: &SynthDataset,
    dir: &Path,
    phylo: Option<&PhyloMatrix>,
) -> Result<(), SynthError> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    fs::write(dir.join(SPEC_FILE), ds.spec.to_toml())?;
    let mut entries = Vec::with_capacity(ds.len());
    let mut per_taxon = vec![0usize; ds.taxonomy.n_taxa()];
    for s in &ds.samples {
        let idx = per_taxon[s.label.taxon];
        per_taxon[s.label.taxon] += 1;
        let rel = format!("{IMAGE_DIR}/t{:04}_s{:04}.ppm", s.label.taxon, idx);
        crate::image::write_ppm(&dir.join(&rel), &s.image)
            .map_err(|e| SynthError::Io(e.to_string()))?;
        entries.push(ManifestEntry {
            path: rel,
            family: s.label.family,
            genus: s.label.genus,
            taxon: s.label.taxon,
        });
    }
    fs::write(dir.join(MANIFEST_FILE), manifest_to_text(&entries))?;
    if let Some(m) = phylo {
        fs::write(dir.join(PHYLO_FILE), m.to_text())?;
    }
    Ok(())
}

/// Load a dataset directory written by [`dataset_to_dir`]. Labels in the
/// manifest are validated against the spec's taxonomy.
pub fn dataset_from_dir(dir: &Path) -> Result<SynthDataset, SynthError> {
    let spec = SynthSpec::from_toml(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
    let taxonomy = spec.taxonomy();
    let manifest = manifest_from_text(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut samples = Vec::with_capacity(manifest.len());
    for e in &manifest {
        let label = HierLabel { taxon: e.taxon, genus: e.genus, family: e.family };
        taxonomy.check(&label)?;
        let image = crate::image::read_ppm(&dir.join(&e.path))
            .map_err(|err| SynthError::Io(format!("{}: {err}", e.path)))?;
        samples.push(SynthSample { image, label });
    }
    Ok(SynthDataset { spec, taxonomy, samples })
}

/// Load `phylo.txt` from a dataset directory, if present.
pub fn phylo_from_dir(dir: &Path) -> Result<Option<PhyloMatrix>, SynthError> {
    let path = dir.join(PHYLO_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(PhyloMatrix::from_text(&fs::read_to_string(path)?)?))
}
