//! The eight symmetries of the square (dihedral group D4) acting on images.
//!
//! Element `i` is a horizontal mirror when `i >= 4`, followed by `i % 4`
//! counter-clockwise quarter turns. Index 0 is the identity.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

pub const NUM_TRANSFORMS: usize = 8;

fn mirror<T: Scalar>(img: &Image<T>) -> Image<T> {
    let w = img.width();
    Image::from_fn(img.channels(), img.height(), w, |c, y, x| img.get(c, y, w - 1 - x))
}

fn rot90<T: Scalar>(img: &Image<T>) -> Image<T> {
    let w = img.width();
    Image::from_fn(img.channels(), w, img.height(), |c, y, x| img.get(c, x, w - 1 - y))
}

pub fn dihedral_transform<T: Scalar>(img: &Image<T>, index: usize) -> Result<Image<T>> {
    if index >= NUM_TRANSFORMS {
        return Err(Error::domain(format!(
            "dihedral index {index} outside 0..{NUM_TRANSFORMS}"
        )));
    }
    let mut out = if index >= 4 { mirror(img) } else { img.clone() };
    for _ in 0..index % 4 {
        out = rot90(&out);
    }
    Ok(out)
}

/// Index of the inverse element. Mirrored elements are involutions.
pub fn inverse_index(index: usize) -> usize {
    if index < 4 {
        (4 - index) % 4
    } else {
        index
    }
}

pub fn inverse_transform<T: Scalar>(img: &Image<T>, index: usize) -> Result<Image<T>> {
    dihedral_transform(img, inverse_index(index))
}
