//! Samples, datasets and everything that produces or partitions them.

mod crop;
mod folds;
mod manifest;
mod stats;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crop::{crop_patches, CropSpec};
pub use folds::{make_folds, Fold};
pub use manifest::{load_manifest, save_manifest, MANIFEST_INDEX, MANIFEST_VERSION};
pub use stats::{compute_class_stats, Balancing, ClassStats};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};

/// Height, width and channel count of one input stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PatchGeometry {
    pub fn square(side: usize, channels: usize) -> Self {
        Self {
            height: side,
            width: side,
            channels,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for PatchGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl FromStr for PatchGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Dataset(format!("bad patch geometry {s:?}")))?;
        match parts.as_slice() {
            [h, w, c] => Ok(Self {
                height: *h,
                width: *w,
                channels: *c,
            }),
            _ => Err(Error::Dataset(format!("bad patch geometry {s:?}, expected HxWxC"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: String,
    /// One `h×w×c` image per stream, values in [0, 1].
    pub patches: Vec<Tensor>,
    pub face: Option<Tensor>,
    pub labels: Vec<u8>,
}

/// A set of samples sharing label count and per-stream geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_labels: usize,
    geometry: Vec<PatchGeometry>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(num_labels: usize, geometry: Vec<PatchGeometry>) -> Self {
        Self {
            num_labels,
            geometry,
            samples: Vec::new(),
        }
    }

    pub fn from_samples(num_labels: usize, geometry: Vec<PatchGeometry>, samples: Vec<Sample>) -> Result<Self> {
        let mut ds = Self::new(num_labels, geometry);
        for s in samples {
            ds.push(s)?;
        }
        Ok(ds)
    }

    fn check(&self, s: &Sample) -> Result<()> {
        if s.labels.len() != self.num_labels {
            return Err(Error::Dataset(format!(
                "sample {} has {} labels, dataset declares {}",
                s.id,
                s.labels.len(),
                self.num_labels
            )));
        }
        if let Some(bad) = s.labels.iter().find(|&&y| y > 1) {
            return Err(Error::Dataset(format!("sample {} has non-binary label {bad}", s.id)));
        }
        if s.patches.len() != self.geometry.len() {
            return Err(Error::Dataset(format!(
                "sample {} has {} patches, dataset declares {}",
                s.id,
                s.patches.len(),
                self.geometry.len()
            )));
        }
        for (i, (p, g)) in s.patches.iter().zip(&self.geometry).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dataset(format!(
                    "sample {} patch {i} has shape {:?}, expected {g}",
                    s.id,
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        self.check(&sample)?;
        self.samples.push(sample);
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_streams(&self) -> usize {
        self.geometry.len()
    }

    pub fn geometry(&self) -> &[PatchGeometry] {
        &self.geometry
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct subjects in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for s in &self.samples {
            if !seen.contains(&s.subject) {
                seen.push(s.subject.clone());
            }
        }
        seen
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    /// A new dataset holding clones of the samples at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            num_labels: self.num_labels,
            geometry: self.geometry.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}
