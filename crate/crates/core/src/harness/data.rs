use crate::error::{Error, Result};
use crate::model::stack_images;
use crate::synthetic::Sample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// Augmentation family; originals are their own group.
    pub group: String,
    /// `[R, R]` grayscale in model units.
    pub image: Tensor,
    pub label: usize,
}

/// Labelled images held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(classes: Vec<String>, examples: Vec<Example>) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.label >= classes.len()) {
            return Err(Error::Data(format!(
                "example {} has label {} of {} classes",
                e.id,
                e.label,
                classes.len()
            )));
        }
        Ok(Self { classes, examples })
    }

    pub fn from_samples(classes: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let examples = samples
            .into_iter()
            .map(|s| Example {
                group: s.id.clone(),
                id: s.id,
                image: s.image,
                label: s.label,
            })
            .collect();
        Self::new(classes, examples)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            classes: self.classes.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// `[n, 1, R, R]` batch of the given examples.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let imgs: Vec<&Tensor> = indices.iter().map(|&i| &self.examples[i].image).collect();
        stack_images(&imgs)
    }

    /// Image side length, checked to be uniform and square.
    pub fn resolution(&self) -> Result<usize> {
        let first = self
            .examples
            .first()
            .ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let r = first.image.shape()[0];
        if self.examples.iter().any(|e| e.image.shape() != [r, r]) {
            return Err(Error::Data("images differ in size or are not square".into()));
        }
        Ok(r)
    }
}

impl Dataset {
    /// One split of a curated manifest; see [`crate::curation::load_split`].
    pub fn from_manifest(path: &std::path::Path, split: crate::curation::Split, resolution: usize) -> Result<Self> {
        crate::curation::load_split(path, split, resolution)
    }
}
