//! Deterministic train/validation/test splits, by sample or by shape.

use super::DataError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    BySample,
    /// All samples of one shape land in the same split; test shapes are
    /// therefore unseen during training.
    ByShape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

fn partition_counts(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize), DataError> {
    let total = fractions.0 + fractions.1 + fractions.2;
    if (total - 1.0).abs() > 1e-9 || fractions.0 < 0.0 || fractions.1 < 0.0 || fractions.2 < 0.0 {
        return Err(DataError::Invalid(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n_train = (n as f64 * fractions.0).round() as usize;
    let n_val = (n as f64 * fractions.1).round() as usize;
    if n_train + n_val > n {
        return Err(DataError::Invalid("split fractions overflow the dataset".into()));
    }
    Ok((n_train, n_val))
}

/// Split `shape_ids.len()` samples. In `ByShape` mode the fractions apply to
/// distinct shape ids (first-appearance order before shuffling).
pub fn split_dataset(
    shape_ids: &[String],
    fractions: (f64, f64, f64),
    mode: SplitMode,
    seed: u64,
) -> Result<Split, DataError> {
    let n = shape_ids.len();
    if n == 0 {
        return Err(DataError::Invalid("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = match mode {
        SplitMode::BySample => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let (n_train, n_val) = partition_counts(n, fractions)?;
            Split {
                train: idx[..n_train].to_vec(),
                val: idx[n_train..n_train + n_val].to_vec(),
                test: idx[n_train + n_val..].to_vec(),
            }
        }
        SplitMode::ByShape => {
            let mut order: Vec<&String> = Vec::new();
            let mut members: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
            for (i, s) in shape_ids.iter().enumerate() {
                members.entry(s).or_insert_with(|| {
                    order.push(s);
                    Vec::new()
                });
                members.get_mut(s).unwrap().push(i);
            }
            order.shuffle(&mut rng);
            let (s_train, s_val) = partition_counts(order.len(), fractions)?;
            let collect = |shapes: &[&String]| -> Vec<usize> {
                shapes.iter().flat_map(|s| members[*s].iter().copied()).collect()
            };
            Split {
                train: collect(&order[..s_train]),
                val: collect(&order[s_train..s_train + s_val]),
                test: collect(&order[s_train + s_val..]),
            }
        }
    };
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(DataError::Invalid(format!(
            "split produced an empty part: sizes {:?}",
            split.sizes()
        )));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize, shapes: usize) -> Vec<String> {
        (0..n).map(|i| format!("shape_{:03}", i % shapes)).collect()
    }

    #[test]
    fn sizes_match_fractions() {
        let s = split_dataset(&ids(1200, 1200), (0.7, 0.1, 0.2), SplitMode::BySample, 0).unwrap();
        assert_eq!(s.sizes(), (840, 120, 240));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let shape_ids = ids(100, 100);
        let a = split_dataset(&shape_ids, (0.7, 0.1, 0.2), SplitMode::BySample, 42).unwrap();
        let b = split_dataset(&shape_ids, (0.7, 0.1, 0.2), SplitMode::BySample, 42).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> =
            a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let c = split_dataset(&shape_ids, (0.7, 0.1, 0.2), SplitMode::BySample, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn by_shape_keeps_shapes_whole() {
        let shape_ids = ids(60, 12);
        let s = split_dataset(&shape_ids, (0.6, 0.2, 0.2), SplitMode::ByShape, 7).unwrap();
        let shape_of = |part: &[usize]| -> std::collections::BTreeSet<&String> {
            part.iter().map(|&i| &shape_ids[i]).collect()
        };
        let (tr, va, te) = (shape_of(&s.train), shape_of(&s.val), shape_of(&s.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(tr.len() + va.len() + te.len(), 12);
    }

    #[test]
    fn empty_split_is_error() {
        assert!(split_dataset(&ids(3, 3), (1.0, 0.0, 0.0), SplitMode::BySample, 0).is_err());
    }
}
