use std::collections::BTreeMap;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tokenizer::Modality;

/// Indices into the source dataset's `items`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub sketch: usize,
    pub positive: usize,
    pub negative: usize,
    pub label: String,
    pub negative_label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

/// Images grouped by class, plus the sketches whose class has images.
pub struct TripletSampler {
    sketches: Vec<usize>,
    images: BTreeMap<String, Vec<usize>>,
    labels: Vec<String>,
    image_total: usize,
}

impl TripletSampler {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let mut images: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, item) in ds.items.iter().enumerate() {
            if item.modality == Modality::Image {
                images.entry(item.label.clone()).or_default().push(i);
            }
        }
        if images.len() < 2 {
            return Err(Error::Sampling(format!("need images from at least 2 classes, found {}", images.len())));
        }
        let sketches: Vec<usize> = ds
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.modality == Modality::Sketch && images.contains_key(&it.label))
            .map(|(i, _)| i)
            .collect();
        if sketches.is_empty() {
            return Err(Error::Sampling("no sketch has a class with images".into()));
        }
        let labels = ds.items.iter().map(|i| i.label.clone()).collect();
        let image_total = images.values().map(Vec::len).sum();
        Ok(TripletSampler { sketches, images, labels, image_total })
    }

    /// Uniform sketch, uniform positive from its class, uniform negative
    /// over all images of the other classes.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<TripletBatch> {
        if batch == 0 {
            return Err(Error::Sampling("batch size must be at least 1".into()));
        }
        let triplets = (0..batch)
            .map(|_| {
                let sketch = self.sketches[rng.random_range(0..self.sketches.len())];
                let label = &self.labels[sketch];
                let same = &self.images[label];
                let positive = same[rng.random_range(0..same.len())];
                let mut r = rng.random_range(0..self.image_total - same.len());
                let negative = self
                    .images
                    .iter()
                    .filter(|(l, _)| *l != label)
                    .find_map(|(_, list)| {
                        if r < list.len() {
                            Some(list[r])
                        } else {
                            r -= list.len();
                            None
                        }
                    })
                    .expect("index within other-class total");
                Triplet {
                    sketch,
                    positive,
                    negative,
                    label: label.clone(),
                    negative_label: self.labels[negative].clone(),
                }
            })
            .collect();
        Ok(TripletBatch { triplets })
    }
}

pub fn sample_triplets(ds: &Dataset, batch: usize, rng: &mut impl Rng) -> Result<TripletBatch> {
    TripletSampler::new(ds)?.sample(batch, rng)
}
