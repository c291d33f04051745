use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use thiserror::Error;

/// Synthetic Gaussian-mixture classification task.
///
/// Each class has a random centre with coordinates drawn from
/// `N(0, separation^2)`; samples are the centre plus unit-variance noise.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            classes: 10,
            dim: 32,
            separation: 0.6,
        }
    }
}

/// Row-major feature matrix with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub x: Vec<f64>,
    pub y: Vec<u32>,
}

impl Dataset {
    pub fn empty(dim: usize, classes: usize) -> Self {
        Dataset {
            dim,
            classes,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64], label: u32) {
        debug_assert_eq!(row.len(), self.dim);
        self.x.extend_from_slice(row);
        self.y.push(label);
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim, self.classes);
        for &i in idx {
            out.push(self.row(i), self.y[i]);
        }
        out
    }

    /// Fraction of samples per class.
    pub fn class_proportions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.y {
            counts[l as usize] += 1;
        }
        let n = self.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

impl TaskSpec {
    pub fn centres<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.classes * self.dim)
            .map(|_| self.separation * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Draws `n` samples with labels cycling through the classes, so every
    /// class is equally represented.
    pub fn sample<R: Rng + ?Sized>(&self, centres: &[f64], n: usize, rng: &mut R) -> Dataset {
        let mut out = Dataset::empty(self.dim, self.classes);
        let mut row = vec![0.0; self.dim];
        for i in 0..n {
            let label = i % self.classes;
            let c = &centres[label * self.dim..(label + 1) * self.dim];
            for (r, m) in row.iter_mut().zip(c) {
                *r = m + rng.sample::<f64, _>(StandardNormal);
            }
            out.push(&row, label as u32);
        }
        out
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PartitionError {
    #[error("node {node} would receive no samples")]
    TooFewSamples { node: usize },
    #[error("need at least one node")]
    NoNodes,
    #[error("dirichlet concentration must be positive and finite")]
    BadAlpha,
}

/// Splits `data` across `nodes` with per-class shares drawn from a
/// symmetric Dirichlet(`alpha`). Partitions are disjoint and cover `data`.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    data: &Dataset,
    nodes: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Dataset>, PartitionError> {
    if nodes == 0 {
        return Err(PartitionError::NoNodes);
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(PartitionError::BadAlpha);
    }
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let dirichlet = if nodes > 1 {
        Some(Dirichlet::new_with_size(alpha, nodes).map_err(|_| PartitionError::BadAlpha)?)
    } else {
        None
    };
    for class in 0..data.classes as u32 {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] == class).collect();
        idx.shuffle(rng);
        let shares = match &dirichlet {
            Some(d) => d.sample(rng),
            None => vec![1.0],
        };
        let total = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (node, share) in shares.iter().enumerate() {
            cum += share;
            let end = if node + 1 == nodes {
                total
            } else {
                (libm::round(cum * total as f64) as usize).clamp(start, total)
            };
            assigned[node].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    assigned
        .into_iter()
        .enumerate()
        .map(|(node, mut idx)| {
            if idx.is_empty() {
                return Err(PartitionError::TooFewSamples { node });
            }
            idx.sort_unstable();
            Ok(data.subset(&idx))
        })
        .collect()
}
