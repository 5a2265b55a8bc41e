//! Memory bank of unit-norm projections and the memory-bank contrastive loss.
//!
//! The bank holds one `(projection, label)` entry per training sample. For a
//! query `z` the `q` most cosine-similar entries (excluding the query's own
//! sample) form the contrast set `M_q`, and
//!
//! `L = −Σ_{i∈M_q, y_i=y} e^{sim(p_i, z)} / Σ_{i∈M_q} e^{sim(p_i, z)}`.
//!
//! Bank entries are constants for the gradient.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PonError, Result};
use crate::poisson::ClassLabel;

const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Identifier of a training sample.
pub type SampleId = u64;

/// Projector output stored on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Projection(Vec<f64>);

impl Projection {
    /// Normalizes `v` to unit length.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        Self::normalize(v).map(|(p, _)| p)
    }

    /// Normalizes `v`, also returning its original norm.
    pub fn normalize(mut v: Vec<f64>) -> Result<(Self, f64)> {
        if v.is_empty() {
            return Err(PonError::invalid("empty projection"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PonError::invalid("non-finite projection"));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(PonError::invalid("zero-norm projection"));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok((Projection(v), norm))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity; both operands are unit vectors.
    pub fn similarity(&self, other: &Projection) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for Projection {
    type Error = PonError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.iter().any(|x| !x.is_finite()) || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(PonError::invalid(format!(
                "stored projection is not unit-norm (norm {norm})"
            )));
        }
        Ok(Projection(v))
    }
}

impl From<Projection> for Vec<f64> {
    fn from(p: Projection) -> Vec<f64> {
        p.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub projection: Projection,
    pub label: ClassLabel,
}

/// One retrieved contrast-set member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<'a> {
    pub id: SampleId,
    pub projection: &'a Projection,
    pub label: ClassLabel,
    pub similarity: f64,
}

/// Fixed-capacity store of one projection per sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    entries: BTreeMap<SampleId, BankEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity,
            entries: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: SampleId) -> Option<&BankEntry> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (SampleId, &BankEntry)> {
        self.entries.iter().map(|(&id, e)| (id, e))
    }

    /// Inserts or replaces the entry for `id`.
    pub fn update(
        &mut self,
        id: SampleId,
        projection: Projection,
        label: ClassLabel,
    ) -> Result<()> {
        if let Some((_, first)) = self.entries.iter().next() {
            if first.projection.dim() != projection.dim() {
                return Err(PonError::invalid(format!(
                    "projection dimension {} does not match bank dimension {}",
                    projection.dim(),
                    first.projection.dim()
                )));
            }
        }
        if !self.entries.contains_key(&id) && self.entries.len() >= self.capacity {
            return Err(PonError::invalid(format!(
                "memory bank is full ({} entries); cannot add sample {id}",
                self.capacity
            )));
        }
        self.entries.insert(id, BankEntry { projection, label });
        Ok(())
    }

    /// Like [`MemoryBank::update`] but normalizes a raw vector first.
    pub fn update_raw(&mut self, id: SampleId, vector: Vec<f64>, label: ClassLabel) -> Result<()> {
        let projection = Projection::new(vector)?;
        self.update(id, projection, label)
    }

    /// The `min(q, available)` entries most similar to `query`, skipping
    /// `exclude`. Sorted by descending similarity, ties by ascending id.
    pub fn query_nearest(
        &self,
        query: &Projection,
        q: usize,
        exclude: Option<SampleId>,
    ) -> Vec<Neighbor<'_>> {
        if q == 0 {
            return Vec::new();
        }
        let mut all: Vec<Neighbor<'_>> = self
            .entries
            .iter()
            .filter(|(&id, _)| Some(id) != exclude)
            .map(|(&id, e)| Neighbor {
                id,
                projection: &e.projection,
                label: e.label,
                similarity: query.similarity(&e.projection),
            })
            .collect();
        let order = |a: &Neighbor<'_>, b: &Neighbor<'_>| -> Ordering {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.id.cmp(&b.id))
        };
        if all.len() > q {
            all.select_nth_unstable_by(q - 1, order);
            all.truncate(q);
        }
        all.sort_by(order);
        all
    }
}

/// Form of the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MclVariant {
    /// Negative same-label softmax mass, in `[−1, 0]`.
    #[default]
    Mass,
    /// `−ln` of the same-label mass; queries without a same-label neighbor contribute 0.
    LogMass,
}

/// Contrastive loss with its gradient on the query.
#[derive(Debug, Clone, PartialEq)]
pub struct MclLoss {
    pub value: f64,
    /// `∂L/∂z` under cosine similarity (tangent to the sphere at `z`).
    pub grad_query: Vec<f64>,
}

/// Memory-bank contrastive loss for one query against its contrast set.
///
/// An empty contrast set yields a zero loss and zero gradient.
pub fn mcl_loss(
    query: &Projection,
    label: ClassLabel,
    neighbors: &[Neighbor<'_>],
    variant: MclVariant,
) -> MclLoss {
    let d = query.dim();
    if neighbors.is_empty() {
        return MclLoss {
            value: 0.0,
            grad_query: vec![0.0; d],
        };
    }
    let z = query.as_slice();
    // cosine similarities are bounded, so no max-shift is needed
    let weights: Vec<f64> = neighbors
        .iter()
        .map(|n| dot(n.projection.as_slice(), z).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let same: f64 = neighbors
        .iter()
        .zip(&weights)
        .filter(|(n, _)| n.label == label)
        .map(|(_, w)| w)
        .sum();
    let mass = same / total;

    // dL/ds_i for each neighbor similarity
    let (value, dsim): (f64, Vec<f64>) = match variant {
        MclVariant::Mass => (
            -mass,
            neighbors
                .iter()
                .zip(&weights)
                .map(|(n, w)| {
                    let indicator = if n.label == label { 1.0 } else { 0.0 };
                    -(w / total) * (indicator - mass)
                })
                .collect(),
        ),
        MclVariant::LogMass => {
            if same == 0.0 {
                return MclLoss {
                    value: 0.0,
                    grad_query: vec![0.0; d],
                };
            }
            (
                -mass.ln(),
                neighbors
                    .iter()
                    .zip(&weights)
                    .map(|(n, w)| {
                        let pos = if n.label == label { w / same } else { 0.0 };
                        -(pos - w / total)
                    })
                    .collect(),
            )
        }
    };

    let mut grad = vec![0.0; d];
    for (n, g) in neighbors.iter().zip(&dsim) {
        for (acc, p) in grad.iter_mut().zip(n.projection.as_slice()) {
            *acc += g * p;
        }
    }
    let radial = dot(&grad, z);
    grad.iter_mut().zip(z).for_each(|(g, zi)| *g -= radial * zi);
    MclLoss {
        value,
        grad_query: grad,
    }
}
