use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Many-to-one assignment of source classes to target classes. A target's
/// score is the mean probability of its assigned source classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMap {
    pub n: usize,
    pub num_source: usize,
    /// `assignment[t]` lists the `n` source classes feeding target `t`.
    pub assignment: Vec<Vec<usize>>,
}

impl LabelMap {
    /// Target `t` takes source classes `[t*n, t*n + n)`.
    pub fn blocks(n: usize, num_target: usize, num_source: usize) -> Result<Self> {
        let assignment = (0..num_target).map(|t| (t * n..t * n + n).collect()).collect();
        Self::new(assignment, num_source)
    }

    pub fn new(assignment: Vec<Vec<usize>>, num_source: usize) -> Result<Self> {
        let n = assignment.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::config("adapter.label_map", "needs at least one target with one source class"));
        }
        if assignment.len() < 2 {
            return Err(Error::config("adapter.label_map", "needs at least two target classes"));
        }
        if n * assignment.len() > num_source {
            return Err(Error::config(
                "adapter.label_map",
                format!("n * K_T = {} exceeds K_S = {num_source}", n * assignment.len()),
            ));
        }
        let mut seen = vec![false; num_source];
        for (t, sources) in assignment.iter().enumerate() {
            if sources.len() != n {
                return Err(Error::config(
                    format!("adapter.label_map.assignment[{t}]"),
                    format!("has {} source classes, expected {n}", sources.len()),
                ));
            }
            for &s in sources {
                if s >= num_source {
                    return Err(Error::config(
                        format!("adapter.label_map.assignment[{t}]"),
                        format!("source index {s} is out of range for K_S = {num_source}"),
                    ));
                }
                if std::mem::replace(&mut seen[s], true) {
                    return Err(Error::config(
                        format!("adapter.label_map.assignment[{t}]"),
                        format!("source index {s} is assigned twice"),
                    ));
                }
            }
        }
        Ok(Self {
            n,
            num_source,
            assignment,
        })
    }

    pub fn num_target(&self) -> usize {
        self.assignment.len()
    }

    /// `[K_S, K_T]` matrix with `1/n` at assigned entries, so that
    /// `probs · M` is the raw mapped score.
    pub fn matrix<F: Real>(&self) -> Tensor<F> {
        let kt = self.num_target();
        let mut m = Tensor::zeros(&[self.num_source, kt]);
        let w = F::one() / F::of(self.n as f64);
        for (t, sources) in self.assignment.iter().enumerate() {
            for &s in sources {
                m.data_mut()[s * kt + t] = w;
            }
        }
        m
    }
}

/// Raw mean of the assigned source probabilities for each target class.
pub fn map_labels<F: Real>(lm: &LabelMap, source_probs: &[F]) -> Result<Vec<F>> {
    if source_probs.len() != lm.num_source {
        return Err(Error::dim(
            "map_labels",
            format!("expected {} source probabilities, got {}", lm.num_source, source_probs.len()),
        ));
    }
    let n = F::of(lm.n as f64);
    Ok(lm
        .assignment
        .iter()
        .map(|sources| sources.iter().map(|&s| source_probs[s]).sum::<F>() / n)
        .collect())
}

/// Per-class mean over chunks. Each column is summed in sorted order so the
/// result does not depend on chunk order.
pub fn chunk_average<F: Real>(per_chunk: &[Vec<F>]) -> Result<Vec<F>> {
    let first = per_chunk.first().ok_or(Error::EmptyInput("chunk_average"))?;
    let k = first.len();
    if let Some(bad) = per_chunk.iter().find(|c| c.len() != k) {
        return Err(Error::dim(
            "chunk_average",
            format!("chunks have {} and {} classes", k, bad.len()),
        ));
    }
    let count = F::of(per_chunk.len() as f64);
    let mut column = Vec::with_capacity(per_chunk.len());
    Ok((0..k)
        .map(|j| {
            column.clear();
            column.extend(per_chunk.iter().map(|c| c[j]));
            column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            column.iter().copied().sum::<F>() / count
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map_is_identity() {
        let lm = LabelMap::blocks(1, 4, 4).unwrap();
        let p = [0.1f64, 0.2, 0.3, 0.4];
        assert_eq!(map_labels(&lm, &p).unwrap(), p.to_vec());
    }

    #[test]
    fn hand_averaged_example() {
        let lm = LabelMap::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let out = map_labels(&lm, &[0.1f64, 0.3, 0.4, 0.2]).unwrap();
        assert!((out[0] - 0.2).abs() < 1e-12 && (out[1] - 0.3).abs() < 1e-12);
        assert_eq!(crate::autodiff::argmax(&out), 1);
    }

    #[test]
    fn ten_genres_from_35_words_use_20_sources() {
        let lm = LabelMap::blocks(2, 10, 35).unwrap();
        let used: usize = lm.assignment.iter().map(Vec::len).sum();
        assert_eq!(used, 20);
        assert_eq!(map_labels(&lm, &[1.0 / 35.0; 35]).unwrap().len(), 10);
    }

    #[test]
    fn matrix_agrees_with_map_labels() {
        let lm = LabelMap::new(vec![vec![4, 0], vec![2, 5]], 6).unwrap();
        let m = lm.matrix::<f64>();
        let p = [0.05, 0.1, 0.2, 0.15, 0.3, 0.2];
        let via = map_labels(&lm, &p).unwrap();
        for t in 0..2 {
            let dot: f64 = (0..6).map(|s| p[s] * m.data()[s * 2 + t]).sum();
            assert!((dot - via[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_maps_are_config_errors() {
        assert!(matches!(LabelMap::blocks(2, 10, 15), Err(Error::Config { .. })));
        assert!(matches!(LabelMap::new(vec![vec![0], vec![7]], 4), Err(Error::Config { .. })));
        assert!(matches!(LabelMap::new(vec![vec![0, 1], vec![1, 2]], 4), Err(Error::Config { .. })));
        assert!(matches!(LabelMap::new(vec![vec![0, 1], vec![2]], 4), Err(Error::Config { .. })));
    }

    #[test]
    fn wrong_probability_length_is_dimension_error() {
        let lm = LabelMap::blocks(2, 2, 4).unwrap();
        assert!(matches!(map_labels(&lm, &[0.5f32; 3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn chunk_average_cases() {
        assert_eq!(chunk_average(&[vec![0.2f64, 0.8]]).unwrap(), vec![0.2, 0.8]);
        assert_eq!(chunk_average(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(chunk_average::<f32>(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            chunk_average(&[vec![1.0f32], vec![0.5, 0.5]]),
            Err(Error::Dimension { .. })
        ));
    }
}
