use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// One subject-exclusive partition cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub subjects: Vec<String>,
    /// Sample indices into the source dataset, ascending.
    pub indices: Vec<usize>,
}

/// Splits subjects into `k` folds whose sizes differ by at most one subject.
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut subjects = dataset.subjects();
    if k == 0 || k > subjects.len() {
        return Err(Error::Config(format!(
            "cannot make {k} subject-exclusive folds from {} subjects",
            subjects.len()
        )));
    }
    subjects.sort();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds: Vec<Fold> = (0..k)
        .map(|_| Fold {
            subjects: Vec::new(),
            indices: Vec::new(),
        })
        .collect();
    for (i, s) in subjects.into_iter().enumerate() {
        folds[i % k].subjects.push(s);
    }
    for (idx, sample) in dataset.samples().iter().enumerate() {
        let fold = folds
            .iter_mut()
            .find(|f| f.subjects.contains(&sample.subject))
            .expect("every subject was assigned");
        fold.indices.push(idx);
    }
    Ok(folds)
}
