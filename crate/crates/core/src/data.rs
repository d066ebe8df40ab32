//! Samples, categories and batching.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a cast shadow relates to the object casting it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    NonAdjacent,
    NormalAdjacent,
    /// Adjacent shadow whose object is as dark as, or darker than, the shadow.
    AmbiguousAdjacent,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::NonAdjacent, Category::NormalAdjacent, Category::AmbiguousAdjacent];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::NonAdjacent => "non-adjacent",
            Category::NormalAdjacent => "normal-adjacent",
            Category::AmbiguousAdjacent => "ambiguous-adjacent",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

/// One image with its binary shadow mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, 1 = shadow.
    pub mask: Tensor,
    /// Known for synthetic data; `None` for ingested datasets.
    pub category: Option<Category>,
    pub name: String,
}

impl ShadowSample {
    pub fn new(image: Tensor, mask: Tensor, category: Option<Category>, name: impl Into<String>) -> Result<Self> {
        let &[3, h, w] = image.shape() else {
            return Err(Error::dim(format!("sample image must be [3, H, W], got {:?}", image.shape())));
        };
        mask.expect_shape(&[1, h, w])?;
        if !image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("sample image values must lie in [0, 1]".into()));
        }
        if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Parameter("sample mask must be binary".into()));
        }
        Ok(ShadowSample {
            image,
            mask,
            category,
            name: name.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Mirror image and mask left to right.
    pub fn hflip(&self) -> ShadowSample {
        ShadowSample {
            image: flip_last(&self.image),
            mask: flip_last(&self.mask),
            category: self.category,
            name: self.name.clone(),
        }
    }
}

fn flip_last(t: &Tensor) -> Tensor {
    let w = *t.shape().last().unwrap_or(&1);
    let mut data = t.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(t.shape().to_vec(), data).expect("flip keeps the shape")
}

/// Stacks samples into `([N, 3, H, W], [N, 1, H, W])`.
pub fn stack(samples: &[&ShadowSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::dim(format!(
                "batch mixes {}x{} and {h}x{w} samples",
                s.height(),
                s.width()
            )));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    Ok((Tensor::new([n, 3, h, w], images)?, Tensor::new([n, 1, h, w], masks)?))
}
