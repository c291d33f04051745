use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use super::fragment::Fragment;
use super::model::ModelVector;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum AggregateError {
    #[error("fragment range [{start}, {end}) exceeds model dimension {n}")]
    RangeOutOfBounds { start: u32, end: u32, n: usize },
    #[error("fragment epoch {got} does not match round epoch {want}")]
    EpochMismatch { got: u32, want: u32 },
    #[error("no models to average")]
    Empty,
}

/// Per-round coverage of the received fragments.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct CoverageStats {
    /// Fraction of coordinates with at least one peer contribution.
    pub covered_fraction: f64,
    /// Mean contributor count (local model included) over covered
    /// coordinates.
    pub mean_contributors: f64,
}

/// Running per-coordinate sums and counts of peer fragments for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundAccumulator {
    epoch: u32,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl RoundAccumulator {
    pub fn new(n: usize, epoch: u32) -> Self {
        RoundAccumulator {
            epoch,
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn add(&mut self, f: &Fragment) -> Result<(), AggregateError> {
        if f.epoch != self.epoch {
            return Err(AggregateError::EpochMismatch {
                got: f.epoch,
                want: self.epoch,
            });
        }
        let n = self.sum.len();
        let (s, e) = (f.start as usize, f.end as usize);
        if s >= e || e > n || f.values.len() != e - s {
            return Err(AggregateError::RangeOutOfBounds {
                start: f.start,
                end: f.end,
                n,
            });
        }
        for (i, v) in (s..e).zip(&f.values) {
            self.sum[i] += f64::from(*v);
            self.count[i] += 1;
        }
        Ok(())
    }

    /// Every coordinate has at least `peers` contributions.
    pub fn complete(&self, peers: usize) -> bool {
        self.count.iter().all(|&c| c as usize >= peers)
    }

    /// At least `coord_share` of coordinates carry contributions from at
    /// least `ceil(peer_share * peers)` peers.
    pub fn quorum(&self, peers: usize, coord_share: f64, peer_share: f64) -> bool {
        if self.count.is_empty() {
            return true;
        }
        let need = libm::ceil(peer_share * peers as f64).max(1.0) as u32;
        let ok = self.count.iter().filter(|&&c| c >= need).count();
        ok as f64 >= coord_share * self.count.len() as f64
    }

    /// `(x_i + sum_i) / (1 + count_i)`; uncovered coordinates keep `x_i`
    /// bit for bit.
    pub fn finish(&self, local: &ModelVector) -> (ModelVector, CoverageStats) {
        let mut out = local.clone();
        let mut covered = 0usize;
        let mut contributors = 0u64;
        for (i, v) in out.values.iter_mut().enumerate() {
            let c = self.count[i];
            if c > 0 {
                *v = (*v + self.sum[i]) / f64::from(c + 1);
                covered += 1;
                contributors += u64::from(c) + 1;
            }
        }
        let n = self.count.len().max(1) as f64;
        let stats = CoverageStats {
            covered_fraction: covered as f64 / n,
            mean_contributors: if covered == 0 {
                1.0
            } else {
                contributors as f64 / covered as f64
            },
        };
        (out, stats)
    }
}

/// Fragment-based FedAvg of the local model `w` with the fragments `c`.
pub fn fragment_fedavg(
    w: &ModelVector,
    c: &[Fragment],
    epoch: u32,
) -> Result<(ModelVector, CoverageStats), AggregateError> {
    let mut acc = RoundAccumulator::new(w.len(), epoch);
    for f in c {
        acc.add(f)?;
    }
    Ok(acc.finish(w))
}

/// Coordinatewise arithmetic mean of full models (the no-mixing baseline).
pub fn plain_fedavg(models: &[&ModelVector]) -> Result<ModelVector, AggregateError> {
    let first = models.first().ok_or(AggregateError::Empty)?;
    let mut out = ModelVector::zeros(first.len());
    for m in models {
        for (o, v) in out.values.iter_mut().zip(&m.values) {
            *o += v;
        }
    }
    let k = models.len() as f64;
    out.values.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_executed_example() {
        let w = ModelVector { values: vec![2.0, 4.0] };
        let f = Fragment {
            epoch: 0,
            start: 0,
            end: 2,
            values: vec![4.0, 0.0],
        };
        let (out, stats) = fragment_fedavg(&w, &[f], 0).unwrap();
        assert_eq!(out.values, [3.0, 2.0]);
        assert_eq!(stats.covered_fraction, 1.0);
        assert_eq!(stats.mean_contributors, 2.0);
    }

    #[test]
    fn empty_set_is_identity() {
        let w = ModelVector {
            values: vec![0.1, -0.0, f64::MIN_POSITIVE],
        };
        let (out, stats) = fragment_fedavg(&w, &[], 0).unwrap();
        assert_eq!(
            out.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            w.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(stats.covered_fraction, 0.0);
    }

    #[test]
    fn range_checks() {
        let w = ModelVector::zeros(4);
        let bad = Fragment {
            epoch: 0,
            start: 2,
            end: 6,
            values: vec![0.0; 4],
        };
        assert!(matches!(
            fragment_fedavg(&w, &[bad], 0),
            Err(AggregateError::RangeOutOfBounds { .. })
        ));
        let other = Fragment {
            epoch: 1,
            start: 0,
            end: 1,
            values: vec![0.0],
        };
        assert!(matches!(
            fragment_fedavg(&w, &[other], 0),
            Err(AggregateError::EpochMismatch { .. })
        ));
    }

    #[test]
    fn quorum_thresholds() {
        let mut acc = RoundAccumulator::new(10, 0);
        let half = Fragment {
            epoch: 0,
            start: 0,
            end: 9,
            values: vec![1.0; 9],
        };
        acc.add(&half).unwrap();
        assert!(acc.quorum(2, 0.9, 0.5));
        assert!(!acc.quorum(3, 0.9, 0.5));
        assert!(!acc.complete(1));
        acc.add(&Fragment {
            epoch: 0,
            start: 9,
            end: 10,
            values: vec![1.0],
        })
        .unwrap();
        assert!(acc.complete(1));
    }
}
