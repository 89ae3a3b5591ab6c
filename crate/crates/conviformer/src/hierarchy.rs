//! Hierarchical labels: taxon -> genus -> family.

use std::fmt;

/// Label triple for one sample. Consistency against a [`Taxonomy`] means
/// the taxon maps to exactly this genus and the genus to this family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierLabel {
    pub taxon: usize,
    pub genus: usize,
    pub family: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelError {
    OutOfRange { what: &'static str, id: usize, count: usize },
    Inconsistent { label: String, detail: String },
}

impl fmt::Display for LabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelError::OutOfRange { what, id, count } => {
                write!(f, "{what} id {id} out of range ({count} classes)")
            }
            LabelError::Inconsistent { label, detail } => {
                write!(f, "inconsistent label {label}: {detail}")
            }
        }
    }
}

impl std::error::Error for LabelError {}

/// Child-to-parent maps. Both maps are total functions: every taxon has
/// exactly one genus, every genus exactly one family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    genus_of_taxon: Vec<usize>,
    family_of_genus: Vec<usize>,
    n_family: usize,
}

impl Taxonomy {
    pub fn new(
        genus_of_taxon: Vec<usize>,
        family_of_genus: Vec<usize>,
        n_family: usize,
    ) -> Result<Self, LabelError> {
        let n_genus = family_of_genus.len();
        if let Some(&g) = genus_of_taxon.iter().find(|&&g| g >= n_genus) {
            return Err(LabelError::OutOfRange { what: "genus", id: g, count: n_genus });
        }
        if let Some(&f) = family_of_genus.iter().find(|&&f| f >= n_family) {
            return Err(LabelError::OutOfRange { what: "family", id: f, count: n_family });
        }
        Ok(Taxonomy { genus_of_taxon, family_of_genus, n_family })
    }

    pub fn n_taxa(&self) -> usize {
        self.genus_of_taxon.len()
    }

    pub fn n_genus(&self) -> usize {
        self.family_of_genus.len()
    }

    pub fn n_family(&self) -> usize {
        self.n_family
    }

    pub fn genus_of(&self, taxon: usize) -> usize {
        self.genus_of_taxon[taxon]
    }

    pub fn family_of_genus(&self, genus: usize) -> usize {
        self.family_of_genus[genus]
    }

    pub fn label_for(&self, taxon: usize) -> Result<HierLabel, LabelError> {
        if taxon >= self.n_taxa() {
            return Err(LabelError::OutOfRange { what: "taxon", id: taxon, count: self.n_taxa() });
        }
        let genus = self.genus_of_taxon[taxon];
        Ok(HierLabel { taxon, genus, family: self.family_of_genus[genus] })
    }

    pub fn check(&self, label: &HierLabel) -> Result<(), LabelError> {
        let expect = self.label_for(label.taxon)?;
        if expect != *label {
            return Err(LabelError::Inconsistent {
                label: format!("{label:?}"),
                detail: format!("taxonomy maps taxon {} to {expect:?}", label.taxon),
            });
        }
        Ok(())
    }
}
