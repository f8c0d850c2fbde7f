use thiserror::Error;

use crate::image::Image;

/// Multi-scale image stack; level 0 is the original image, each level above
/// is a blur-then-halve of the one below.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPyramid {
    levels: Vec<Image>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PyramidError {
    #[error("cannot build {requested} levels from a {width}x{height} image")]
    TooManyLevels {
        requested: usize,
        width: usize,
        height: usize,
    },
}

/// Builds an `n + 1`-level pyramid by repeated Gaussian smoothing (5x5
/// binomial kernel) and 2x decimation.
pub fn build_gaussian_pyramid(image: &Image, n: usize) -> Result<GaussianPyramid, PyramidError> {
    if image.width() < (1 << n) || image.height() < (1 << n) {
        return Err(PyramidError::TooManyLevels {
            requested: n,
            width: image.width(),
            height: image.height(),
        });
    }
    let mut levels = Vec::with_capacity(n + 1);
    levels.push(image.clone());
    for _ in 0..n {
        let next = levels.last().unwrap().blur5().decimate2();
        levels.push(next);
    }
    Ok(GaussianPyramid { levels })
}

impl GaussianPyramid {
    pub fn level(&self, l: usize) -> &Image {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn top_level(&self) -> usize {
        self.levels.len() - 1
    }
}
