use crate::error::{Error, Result};
use crate::image::Image;

/// Images with optional class labels.
///
/// Labels are only reachable through [`Dataset::labels_for_evaluation`];
/// training consumes [`Dataset::images`] and never sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    images: Vec<Image>,
    labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: impl Into<String>,
        images: Vec<Image>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if let Some(first) = images.first() {
            if images.iter().any(|im| !im.same_shape(first)) {
                return Err(Error::param("dataset images differ in shape"));
            }
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::param(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            split: split.into(),
            images,
            labels,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(height, width, channels)` of every image, if any.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| (im.height, im.width, im.channels))
    }

    /// Ground-truth labels, for scoring only.
    pub fn labels_for_evaluation(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Keeps the first `n` instances.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        if let Some(l) = &mut self.labels {
            l.truncate(n);
        }
    }

    /// Moves the last `per_class` instances of every class into a held-out set.
    pub fn stratified_holdout(self, per_class: usize) -> Result<(Dataset, Dataset)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::param("stratified split needs labels"))?;
        let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut seen_from_end = vec![0usize; classes];
        let mut held = vec![false; labels.len()];
        for i in (0..labels.len()).rev() {
            let c = labels[i] as usize;
            if seen_from_end[c] < per_class {
                seen_from_end[c] += 1;
                held[i] = true;
            }
        }
        let (mut tr_i, mut tr_l, mut te_i, mut te_l) = (vec![], vec![], vec![], vec![]);
        for ((img, &l), h) in self.images.into_iter().zip(labels).zip(held) {
            if h {
                te_i.push(img);
                te_l.push(l);
            } else {
                tr_i.push(img);
                tr_l.push(l);
            }
        }
        Ok((
            Dataset::new(self.name.clone(), "train", tr_i, Some(tr_l))?,
            Dataset::new(self.name, "test", te_i, Some(te_l))?,
        ))
    }
}
