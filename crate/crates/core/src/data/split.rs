use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DtmlError, Result};
use crate::grid::{Mask, Volume};

/// A volume with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub volume: Volume,
    pub mask: Mask,
}

/// A volume whose ground truth is not visible to training.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledCase {
    pub id: String,
    pub volume: Volume,
}

/// Labeled, unlabeled and test partitions. Masks of unlabeled cases, when
/// known, are held apart and only reachable through
/// [`DatasetSplit::diagnostic_masks`].
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub test: Vec<LabeledCase>,
    withheld: Vec<(String, Mask)>,
}

impl DatasetSplit {
    pub fn new(
        labeled: Vec<LabeledCase>,
        unlabeled: Vec<UnlabeledCase>,
        test: Vec<LabeledCase>,
    ) -> Result<Self> {
        let split = Self {
            labeled,
            unlabeled,
            test,
            withheld: Vec::new(),
        };
        split.validate()?;
        Ok(split)
    }

    pub fn with_test(mut self, test: Vec<LabeledCase>) -> Result<Self> {
        self.test = test;
        self.validate()?;
        Ok(self)
    }

    pub(crate) fn with_withheld(mut self, withheld: Vec<(String, Mask)>) -> Self {
        self.withheld = withheld;
        self
    }

    /// Ground truth of unlabeled cases, for analysis only.
    pub fn diagnostic_masks(&self) -> &[(String, Mask)] {
        &self.withheld
    }

    /// Partitions are disjoint by id and every labeled mask has both classes.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self
            .labeled
            .iter()
            .map(|c| c.id.as_str())
            .chain(self.unlabeled.iter().map(|c| c.id.as_str()))
            .chain(self.test.iter().map(|c| c.id.as_str()))
            .collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(DtmlError::InvalidConfig(
                "a case id appears in more than one partition".into(),
            ));
        }
        if let Some(c) = self.labeled.iter().find(|c| c.mask.is_degenerate()) {
            return Err(DtmlError::DegenerateMask(format!(
                "labeled case {} has a degenerate mask",
                c.id
            )));
        }
        Ok(())
    }
}

/// Shuffles `samples` with `seed` and labels the first
/// `round(fraction · n)`. The remaining masks are withheld.
pub fn split_dataset(
    samples: Vec<LabeledCase>,
    labeled_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(DtmlError::EmptyPartition(format!(
            "labeled fraction {labeled_fraction} leaves a partition empty"
        )));
    }
    let n = samples.len();
    let n_labeled = (labeled_fraction * n as f64).round() as usize;
    if n_labeled == 0 || n_labeled == n {
        return Err(DtmlError::EmptyPartition(format!(
            "{n} samples at fraction {labeled_fraction} give {n_labeled} labeled"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<LabeledCase>> = samples.into_iter().map(Some).collect();
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(n - n_labeled);
    let mut withheld = Vec::with_capacity(n - n_labeled);
    for (rank, &i) in order.iter().enumerate() {
        let case = slots[i].take().expect("each index drawn once");
        if rank < n_labeled {
            labeled.push(case);
        } else {
            withheld.push((case.id.clone(), case.mask));
            unlabeled.push(UnlabeledCase {
                id: case.id,
                volume: case.volume,
            });
        }
    }
    Ok(DatasetSplit::new(labeled, unlabeled, Vec::new())?.with_withheld(withheld))
}

/// Shuffled partition of `n` indices into `(labeled, unlabeled)` without
/// touching volume data; same order as [`split_dataset`].
pub fn split_indices(n: usize, labeled_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(DtmlError::EmptyPartition(format!(
            "labeled fraction {labeled_fraction} leaves a partition empty"
        )));
    }
    let n_labeled = (labeled_fraction * n as f64).round() as usize;
    if n_labeled == 0 || n_labeled == n {
        return Err(DtmlError::EmptyPartition(format!(
            "{n} samples at fraction {labeled_fraction} give {n_labeled} labeled"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unlabeled = order.split_off(n_labeled);
    Ok((order, unlabeled))
}
