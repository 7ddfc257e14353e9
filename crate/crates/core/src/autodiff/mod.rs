//! Numerical substrate: sparse kernels, a reverse-mode tape, Adam, and
//! finite-difference gradient checks. Everything runs in `f64`.

mod adam;
mod gradcheck;
mod sparse;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_difference_check, MIN_PROBES};
pub use sparse::{CsrMatrix, SparseOperand};
pub use tape::{AttentionSpec, Gradients, Mat, Tape, Var};

/// `a · b` with a shape check.
pub fn dense_matmul(a: &Mat, b: &Mat) -> crate::Result<Mat> {
    if a.ncols() != b.nrows() {
        return Err(crate::Error::Shape {
            op: "matmul",
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a.dot(b))
}

/// `max(x, 0)` that always yields `+0.0` for nonpositive input, so zeroed
/// affiliation columns are bitwise zero.
pub fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Inverted-dropout keep mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut crate::Rng) -> Mat {
    use rand::Rng;
    if rate <= 0.0 {
        return Mat::ones((rows, cols));
    }
    let keep = 1.0 / (1.0 - rate);
    Mat::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}
