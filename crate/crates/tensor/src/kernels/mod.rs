//! Slice-level forward/backward kernels behind the graph operations.
//!
//! All kernels operate on row-major NCHW buffers and use a fixed summation
//! order per output element, so results do not depend on scheduling.

pub mod conv;
pub mod pool;

use crate::error::{config_err, Result};

/// Stride and zero padding of a sliding-window operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn new(stride: usize, padding: usize) -> Self {
        Window { stride, padding }
    }

    /// Output extent along one spatial axis: `floor((len + 2p - k) / s) + 1`.
    pub fn out_len(&self, len: usize, k: usize, axis: &str) -> Result<usize> {
        if self.stride == 0 {
            return Err(config_err!("stride must be positive"));
        }
        if k == 0 {
            return Err(config_err!("window size must be positive"));
        }
        let padded = len + 2 * self.padding;
        if k > padded {
            return Err(config_err!(
                "window {k} exceeds padded {axis} extent {padded} (input {len}, padding {})",
                self.padding
            ));
        }
        Ok((padded - k) / self.stride + 1)
    }
}

impl Default for Window {
    fn default() -> Self {
        Window { stride: 1, padding: 0 }
    }
}
