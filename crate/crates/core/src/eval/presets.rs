//! Per-dataset best fusion weights, for zero-shot CALIP and for CALIP-FS.
//!
//! `beta1` is 1 everywhere and the zero-shot attention temperatures are 2.

use crate::attention::CalipHyper;
use crate::error::{CalipError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub dataset: &'static str,
    /// `(beta2, beta3)` for zero-shot CALIP.
    pub zeroshot: (f32, f32),
    /// `(beta2, beta3)` for CALIP-FS.
    pub fewshot: (f32, f32),
}

pub const PRESETS: [Preset; 11] = [
    Preset { dataset: "ImageNet", zeroshot: (1.12, 0.02), fewshot: (0.12, 0.10) },
    Preset { dataset: "Caltech101", zeroshot: (5.00, 0.18), fewshot: (0.12, 0.12) },
    Preset { dataset: "SUN397", zeroshot: (0.43, 0.01), fewshot: (0.12, 0.12) },
    Preset { dataset: "Food101", zeroshot: (0.60, 0.02), fewshot: (0.08, 0.10) },
    Preset { dataset: "Flowers102", zeroshot: (0.50, 0.01), fewshot: (0.70, 0.70) },
    Preset { dataset: "StanfordCars", zeroshot: (2.80, 0.01), fewshot: (0.30, 0.40) },
    Preset { dataset: "FGVCAircraft", zeroshot: (1.30, 0.01), fewshot: (0.60, 1.00) },
    Preset { dataset: "OxfordPets", zeroshot: (0.61, 0.01), fewshot: (0.08, 0.08) },
    Preset { dataset: "DTD", zeroshot: (1.40, 0.01), fewshot: (0.30, 0.20) },
    Preset { dataset: "EuroSAT", zeroshot: (6.08, 0.06), fewshot: (0.40, 0.40) },
    Preset { dataset: "UCF101", zeroshot: (1.28, 0.01), fewshot: (0.60, 0.60) },
];

/// Case-insensitive lookup by dataset name.
pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS
        .iter()
        .find(|p| p.dataset.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|p| p.dataset).collect();
            CalipError::param("preset", format!("unknown dataset {name:?}; known: {}", known.join(", ")))
        })
}

impl Preset {
    pub fn zeroshot_hyper(&self) -> CalipHyper {
        CalipHyper::default().with_betas(1.0, self.zeroshot.0, self.zeroshot.1)
    }

    pub fn fewshot_hyper(&self) -> CalipHyper {
        CalipHyper::default().with_betas(1.0, self.fewshot.0, self.fewshot.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_case_insensitive() {
        let p = preset("caltech101").unwrap();
        assert_eq!(p.zeroshot, (5.00, 0.18));
        assert_eq!(preset("ImageNet").unwrap().zeroshot_hyper().beta2, 1.12);
        assert!(preset("mnist").is_err());
    }

    #[test]
    fn every_preset_is_valid() {
        for p in &PRESETS {
            p.zeroshot_hyper().validate().unwrap();
            p.fewshot_hyper().validate().unwrap();
        }
    }
}
