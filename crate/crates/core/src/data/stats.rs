use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Balancing {
    #[default]
    On,
    Off,
}

/// Positive ratio and positive-term loss weight per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub positive_ratio: Vec<f64>,
    pub pos_weight: Vec<f64>,
}

impl ClassStats {
    /// Unit weights for `n` classes with unknown ratios.
    pub fn uniform(n: usize) -> Self {
        Self {
            positive_ratio: vec![f64::NAN; n],
            pos_weight: vec![1.0; n],
        }
    }

    pub fn from_labels(labels: &[Vec<u8>], num_labels: usize, balancing: Balancing) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset("class statistics need at least one sample".into()));
        }
        let mut positives = vec![0usize; num_labels];
        for row in labels {
            for (p, &y) in positives.iter_mut().zip(row) {
                *p += y as usize;
            }
        }
        let m = labels.len() as f64;
        let positive_ratio: Vec<f64> = positives.iter().map(|&p| p as f64 / m).collect();
        let pos_weight = match balancing {
            Balancing::Off => vec![1.0; num_labels],
            Balancing::On => positive_ratio
                .iter()
                .enumerate()
                .map(|(j, &rho)| {
                    if rho == 0.0 {
                        Err(Error::Dataset(format!(
                            "class {j} has no positives; drop or merge it before enabling class balancing"
                        )))
                    } else {
                        Ok((1.0 - rho) / rho)
                    }
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            positive_ratio,
            pos_weight,
        })
    }
}

pub fn compute_class_stats(dataset: &Dataset, balancing: Balancing) -> Result<ClassStats> {
    ClassStats::from_labels(&dataset.labels(), dataset.num_labels(), balancing)
}
