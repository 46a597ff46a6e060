use thiserror::Error;

/// A vector or matrix argument has the wrong size.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{what}: expected length {expected}, got {actual}")]
pub struct ShapeError {
    pub what: &'static str,
    pub expected: usize,
    pub actual: usize,
}

impl ShapeError {
    pub fn check(what: &'static str, expected: usize, actual: usize) -> Result<(), ShapeError> {
        if expected == actual {
            Ok(())
        } else {
            Err(ShapeError { what, expected, actual })
        }
    }
}
