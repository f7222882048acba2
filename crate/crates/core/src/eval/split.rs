use rand::seq::index;
use serde::Serialize;

use crate::error::{CalipError, Result};
use crate::store::FeatureBundle;

/// Shot counts of the few-shot protocol.
pub const PROTOCOL_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];

/// Per-class train/validation partition of a bundle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FewShotSplit {
    pub shots: usize,
    pub seed: u64,
    /// `train_indices[k]` holds exactly `shots` bundle indices of class `k`.
    pub train_indices: Vec<Vec<usize>>,
    /// The remaining images of each class, in bundle order.
    pub val_indices: Vec<Vec<usize>>,
}

impl FewShotSplit {
    /// All training indices, class by class.
    pub fn train(&self) -> Vec<usize> {
        self.train_indices.iter().flatten().copied().collect()
    }

    pub fn val(&self) -> Vec<usize> {
        self.val_indices.iter().flatten().copied().collect()
    }

    pub fn train_bundle(&self, bundle: &FeatureBundle) -> Result<FeatureBundle> {
        bundle.subset(&self.train())
    }

    pub fn val_bundle(&self, bundle: &FeatureBundle) -> Result<FeatureBundle> {
        bundle.subset(&self.val())
    }
}

/// Rejects shot counts outside the protocol set.
pub fn check_protocol_shots(shots: usize) -> Result<()> {
    if PROTOCOL_SHOTS.contains(&shots) {
        Ok(())
    } else {
        Err(CalipError::param(
            "shots",
            format!("must be one of {PROTOCOL_SHOTS:?}, got {shots}"),
        ))
    }
}

/// Samples `shots` images per class uniformly without replacement.
///
/// Classes are visited in label order with a single generator seeded from
/// `seed`, so the split is a pure function of `(bundle labels, shots, seed)`.
pub fn sample_split(bundle: &FeatureBundle, shots: usize, seed: u64) -> Result<FewShotSplit> {
    if shots == 0 {
        return Err(CalipError::param("shots", "must be >= 1"));
    }
    let by_class = bundle.indices_by_class();
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < shots {
            return Err(CalipError::Protocol(format!(
                "class {:?} has {} samples, fewer than the {shots} shots requested",
                bundle.class_names()[class],
                idx.len()
            )));
        }
    }
    let mut rng = crate::synth::rng(seed);
    let mut train_indices = Vec::with_capacity(by_class.len());
    let mut val_indices = Vec::with_capacity(by_class.len());
    for idx in &by_class {
        let mut picked = vec![false; idx.len()];
        let mut train: Vec<usize> = index::sample(&mut rng, idx.len(), shots)
            .into_iter()
            .map(|i| {
                picked[i] = true;
                idx[i]
            })
            .collect();
        train.sort_unstable();
        let val = idx
            .iter()
            .zip(&picked)
            .filter(|(_, &p)| !p)
            .map(|(&i, _)| i)
            .collect();
        train_indices.push(train);
        val_indices.push(val);
    }
    Ok(FewShotSplit {
        shots,
        seed,
        train_indices,
        val_indices,
    })
}
