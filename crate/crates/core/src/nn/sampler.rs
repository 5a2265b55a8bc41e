use rand::Rng;

use crate::error::{PonError, Result};
use crate::poisson::ClassLabel;

/// Class-balanced sampler: pick a class uniformly, then a uniform member of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightedSampler {
    by_class: Vec<Vec<usize>>,
}

impl WeightedSampler {
    pub fn new(labels: &[ClassLabel], num_classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, l) in labels.iter().enumerate() {
            by_class
                .get_mut(l.index())
                .ok_or_else(|| PonError::invalid(format!("label {} out of range", l.index())))?
                .push(i);
        }
        if let Some(empty) = by_class.iter().position(Vec::is_empty) {
            return Err(PonError::Config(format!(
                "class {empty} has no training samples; the balanced sampler needs every class"
            )));
        }
        Ok(WeightedSampler { by_class })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let members = &self.by_class[rng.random_range(0..self.by_class.len())];
        members[rng.random_range(0..members.len())]
    }

    pub fn stream<R: Rng + ?Sized>(&self, draws: usize, rng: &mut R) -> Vec<usize> {
        (0..draws).map(|_| self.draw(rng)).collect()
    }
}
