//! The fixed binning grid for one operating day and the centered time
//! convention shared by the generator, the binning step, and the local fits.
//!
//! Minutes since opening `t in [0, minutes_open)` map to the centered
//! coordinate `t~ = 2 t / minutes_open - 1 in [-1, 1]`. Bins are left-closed
//! `[w k, w (k+1))`; when `minutes_open` is not divisible by the bin width the
//! trailing bin is short and flagged, never dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BIN_WIDTH: u32 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinGrid {
    minutes_open: u32,
    bin_width: u32,
}

impl BinGrid {
    pub fn new(minutes_open: u32, bin_width: u32) -> Result<Self> {
        if minutes_open < 1 {
            return Err(Error::Config("minutes_open must be >= 1".into()));
        }
        if bin_width < 1 {
            return Err(Error::Config("bin_width must be >= 1".into()));
        }
        Ok(BinGrid {
            minutes_open,
            bin_width,
        })
    }

    pub fn minutes_open(&self) -> u32 {
        self.minutes_open
    }

    pub fn bin_width(&self) -> u32 {
        self.bin_width
    }

    pub fn n_bins(&self) -> usize {
        self.minutes_open.div_ceil(self.bin_width) as usize
    }

    /// True when the last bin spans fewer than `bin_width` minutes.
    pub fn has_partial_tail(&self) -> bool {
        self.minutes_open % self.bin_width != 0
    }

    /// Bin index for a minutes-since-opening timestamp in `[0, minutes_open)`.
    pub fn bin_of(&self, minute: f64) -> usize {
        let k = (minute / self.bin_width as f64).floor();
        (k as usize).min(self.n_bins() - 1)
    }

    /// Span of bin `k` in minutes since opening, `[start, end)`.
    pub fn bin_span(&self, k: usize) -> (f64, f64) {
        let start = (k as u32 * self.bin_width) as f64;
        let end = ((k as u32 + 1) * self.bin_width).min(self.minutes_open) as f64;
        (start, end)
    }

    /// Midpoint of bin `k` in minutes since opening.
    pub fn midpoint(&self, k: usize) -> f64 {
        let (start, end) = self.bin_span(k);
        0.5 * (start + end)
    }

    /// Centered time coordinate for a minutes-since-opening value.
    pub fn centered(&self, minute: f64) -> f64 {
        2.0 * minute / self.minutes_open as f64 - 1.0
    }

    /// Centered coordinates of all bin midpoints.
    pub fn centered_midpoints(&self) -> Vec<f64> {
        (0..self.n_bins())
            .map(|k| self.centered(self.midpoint(k)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_900_by_15_has_60_whole_bins() {
        let g = BinGrid::new(900, 15).unwrap();
        assert_eq!(g.n_bins(), 60);
        assert!(!g.has_partial_tail());
        assert_eq!(g.bin_span(59), (885.0, 900.0));
    }

    #[test]
    fn trailing_partial_bin_is_kept_short() {
        let g = BinGrid::new(905, 15).unwrap();
        assert_eq!(g.n_bins(), 61);
        assert!(g.has_partial_tail());
        assert_eq!(g.bin_span(60), (900.0, 905.0));
        assert_eq!(g.midpoint(60), 902.5);
    }

    #[test]
    fn centered_endpoints() {
        let g = BinGrid::new(900, 15).unwrap();
        assert_eq!(g.centered(0.0), -1.0);
        assert_eq!(g.centered(900.0), 1.0);
        assert_eq!(g.centered(450.0), 0.0);
    }

    #[test]
    fn bin_of_boundary_goes_right() {
        let g = BinGrid::new(900, 15).unwrap();
        assert_eq!(g.bin_of(14.9), 0);
        assert_eq!(g.bin_of(15.0), 1);
        assert_eq!(g.bin_of(899.9), 59);
    }

    #[test]
    fn invalid_grid_rejected() {
        assert!(BinGrid::new(0, 15).is_err());
        assert!(BinGrid::new(900, 0).is_err());
    }
}
