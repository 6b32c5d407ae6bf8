use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel `(class, instance)` labels, row-major.
///
/// Background ("stuff") pixels carry instance id 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub class_id: Vec<usize>,
    pub instance_id: Vec<usize>,
}

impl PanopticMap {
    /// Multiplier used by [`PanopticMap::encoded`].
    pub const ID_STRIDE: usize = 1000;

    pub fn new(height: usize, width: usize, class_id: Vec<usize>, instance_id: Vec<usize>) -> Result<Self> {
        if class_id.len() != height * width || instance_id.len() != height * width {
            return Err(Error::shape("panoptic map", &[height, width], &[class_id.len(), instance_id.len()]));
        }
        Ok(Self {
            height,
            width,
            class_id,
            instance_id,
        })
    }

    /// Every pixel labelled `(class, 0)`.
    pub fn filled(height: usize, width: usize, class: usize) -> Self {
        Self {
            height,
            width,
            class_id: vec![class; height * width],
            instance_id: vec![0; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.class_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_id.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> (usize, usize) {
        let i = r * self.width + c;
        (self.class_id[i], self.instance_id[i])
    }

    pub fn set(&mut self, r: usize, c: usize, class: usize, instance: usize) {
        let i = r * self.width + c;
        self.class_id[i] = class;
        self.instance_id[i] = instance;
    }

    /// `class · 1000 + instance` per pixel.
    pub fn encoded(&self) -> Vec<usize> {
        self.class_id
            .iter()
            .zip(&self.instance_id)
            .map(|(c, i)| c * Self::ID_STRIDE + i)
            .collect()
    }

    /// Pixel count per instance id.
    pub fn instance_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for &i in &self.instance_id {
            *h.entry(i).or_insert(0) += 1;
        }
        h
    }
}
