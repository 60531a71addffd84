use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Stratified k-fold assignment with an inner validation split per fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    /// Disjoint test index lists covering `0..N`.
    pub folds: Vec<Vec<usize>>,
    /// Per fold, indices taken from the training portion for early stopping.
    pub inner_val: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    pub fn val(&self, fold: usize) -> &[usize] {
        &self.inner_val[fold]
    }

    /// Training indices: everything outside the test and validation lists.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let n: usize = self.folds.iter().map(Vec::len).sum();
        let mut excluded = vec![false; n];
        for &i in self.folds[fold].iter().chain(&self.inner_val[fold]) {
            excluded[i] = true;
        }
        (0..n).filter(|&i| !excluded[i]).collect()
    }
}

fn by_class(labels: &[usize], indices: impl Iterator<Item = usize>, classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); classes];
    for i in indices {
        out[labels[i]].push(i);
    }
    out
}

/// Shuffles each class, concatenates the classes and deals position `p` to
/// fold `p mod k`, so every class and every fold size differs across folds
/// by at most one.
pub fn make_folds(dataset: &Dataset, k: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan> {
    let n = dataset.len();
    if k < 2 || k > n {
        return Err(Error::Config(format!("cannot make {k} folds from {n} graphs")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let labels = dataset.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = by_class(&labels, 0..n, dataset.num_classes);
    for members in &mut classes {
        members.shuffle(&mut rng);
    }
    let mut folds = vec![Vec::new(); k];
    for (p, i) in classes.into_iter().flatten().enumerate() {
        folds[p % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }

    let mut inner_val = Vec::with_capacity(k);
    for test in &folds {
        let mut in_test = vec![false; n];
        test.iter().for_each(|&i| in_test[i] = true);
        let mut val = Vec::new();
        for mut members in by_class(&labels, (0..n).filter(|&i| !in_test[i]), dataset.num_classes) {
            members.shuffle(&mut rng);
            let take = (val_fraction * members.len() as f64).ceil() as usize;
            // keep at least one training graph per class
            let take = take.min(members.len().saturating_sub(1));
            val.extend_from_slice(&members[..take]);
        }
        val.sort_unstable();
        inner_val.push(val);
    }
    Ok(FoldPlan {
        seed,
        folds,
        inner_val,
    })
}
