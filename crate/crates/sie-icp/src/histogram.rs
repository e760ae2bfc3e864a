//! Adaptive residual histograms.
//!
//! Range, bin count and smoothing all adapt to the data: the range is cut
//! where the current noise model falls below a density threshold, the bin
//! count grows linearly with the number of in-range samples (keeping the
//! per-bin sample variance roughly constant), and a Gaussian kernel whose
//! width is proportional to the histogram width smooths out the remainder.

use crate::error::{Error, Result};
use std::io::Write;

/// Bin-count clamp. The proportional rule decides within these bounds.
pub const MIN_BINS: usize = 10;
pub const MAX_BINS: usize = 1000;
/// Smallest permitted range width; blocks zero-width degenerate histograms.
pub const MIN_RANGE_WIDTH: f64 = 1e-12;
/// Smallest smoothing kernel standard deviation, in bins.
pub const MIN_KERNEL_BINS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramConfig {
    /// Density cutoff for range selection: the histogram covers the interval
    /// where the model curve exceeds `epsilon` times its peak.
    pub epsilon: f64,
    /// Bins per in-range sample (0.1 ≈ ten samples per bin on average).
    pub bins_per_sample: f64,
    /// Smoothing kernel standard deviation as a fraction of histogram width.
    pub smoothing_fraction: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self { epsilon: 1e-6, bins_per_sample: 0.1, smoothing_fraction: 0.02 }
    }
}

/// Range `mu ± w` where a curve `exp(−c·(|x−mu|/scale)^p)` has decayed to
/// `epsilon` of its peak: `w = scale·(ln(1/ε)/c)^(1/p)`.
///
/// `scale` is the effective scale (fitted scale plus regularizer) and
/// `exponent_coeff` the coefficient `c` in the exponent (0.5 for the
/// Gaussian convention, 1 otherwise). A minimum width is enforced so a
/// degenerate cutoff (`epsilon ≥ 1`) still yields a usable range.
pub fn adaptive_range(
    mu: f64,
    scale: f64,
    p: f64,
    exponent_coeff: f64,
    epsilon: f64,
) -> (f64, f64) {
    debug_assert!(scale > 0.0 && p > 0.0 && exponent_coeff > 0.0 && epsilon > 0.0);
    let log_term = (1.0 / epsilon).ln() / exponent_coeff;
    let half_width = if log_term > 0.0 {
        scale * log_term.powf(1.0 / p)
    } else {
        0.0
    };
    let half_width = half_width.max(MIN_RANGE_WIDTH / 2.0);
    (mu - half_width, mu + half_width)
}

/// A binned, optionally smoothed distribution over one residual dimension.
///
/// Bins are left-closed/right-open over `[lo, hi)`; the last bin is closed.
/// Out-of-range mass is tallied separately so normalizations can account for
/// every residual, not only in-range ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<f64>,
    total_in_range: usize,
    out_of_range: usize,
    smoothed: bool,
}

impl Histogram {
    /// Bins `values` over `range`. The bin count is
    /// `clamp(round(bins_per_sample × in-range count), 10, 1000)`.
    pub fn build(values: &[f64], range: (f64, f64), config: &HistogramConfig) -> Result<Self> {
        let (lo, hi) = range;
        if !(hi > lo && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid histogram range [{lo}, {hi}]")));
        }

        let in_range = values.iter().filter(|&&v| v >= lo && v <= hi).count();
        if in_range == 0 {
            return Err(Error::EmptyHistogram { lo, hi });
        }

        let n_bins = ((config.bins_per_sample * in_range as f64).round() as usize)
            .clamp(MIN_BINS, MAX_BINS);
        let mut counts = vec![0.0; n_bins];
        let mut out_of_range = 0usize;
        for &v in values {
            match bin_index(v, lo, hi, n_bins) {
                Some(i) => counts[i] += 1.0,
                None => out_of_range += 1,
            }
        }

        Ok(Self { lo, hi, counts, total_in_range: in_range, out_of_range, smoothed: false })
    }

    /// Assembles a histogram from precomputed bin counts, e.g. exact
    /// discretizations used as fitting references.
    pub fn from_counts(
        lo: f64,
        hi: f64,
        counts: Vec<f64>,
        total_in_range: usize,
        out_of_range: usize,
    ) -> Result<Self> {
        if !(hi > lo && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid histogram range [{lo}, {hi}]")));
        }
        if counts.len() < 2 {
            return Err(Error::InvalidArgument("histogram needs at least 2 bins".into()));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidArgument("bin counts must be finite and non-negative".into()));
        }
        Ok(Self { lo, hi, counts, total_in_range, out_of_range, smoothed: false })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.width() / self.counts.len() as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn total_in_range(&self) -> usize {
        self.total_in_range
    }

    pub fn out_of_range(&self) -> usize {
        self.out_of_range
    }

    pub fn is_smoothed(&self) -> bool {
        self.smoothed
    }

    /// Sum of bin counts (mass inside the range).
    pub fn in_range_mass(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// In-range mass plus the out-of-range tally.
    pub fn total_mass(&self) -> f64 {
        self.in_range_mass() + self.out_of_range as f64
    }

    /// Count of the bin containing `x`; 0 outside the range.
    pub fn value_at(&self, x: f64) -> f64 {
        match bin_index(x, self.lo, self.hi, self.counts.len()) {
            Some(i) => self.counts[i],
            None => 0.0,
        }
    }

    /// Index of the bin containing `x`, if in range.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        bin_index(x, self.lo, self.hi, self.counts.len())
    }

    /// Convolves with a truncated (±4 std) zero-mean Gaussian kernel of
    /// standard deviation `smoothing_fraction × width`, then rescales so the
    /// total in-range mass is preserved.
    pub fn smoothed(&self, config: &HistogramConfig) -> Histogram {
        // Kernel floor of 5 bins: with ~10 samples per bin a narrower kernel
        // leaves the peak estimate dominated by sample variance, which the
        // downstream scale fit amplifies about threefold.
        let sigma_bins = if config.smoothing_fraction > 0.0 {
            (config.smoothing_fraction * self.counts.len() as f64).max(MIN_KERNEL_BINS)
        } else {
            0.0
        };
        let radius = (4.0 * sigma_bins).ceil() as usize;
        let mut out = self.clone();
        out.smoothed = true;
        if radius == 0 || sigma_bins <= 0.0 {
            return out;
        }

        let kernel: Vec<f64> = (-(radius as isize)..=radius as isize)
            .map(|d| (-0.5 * (d as f64 / sigma_bins).powi(2)).exp())
            .collect();
        let kernel_sum: f64 = kernel.iter().sum();

        let n = self.counts.len();
        let mut smoothed = vec![0.0; n];
        for (i, &c) in self.counts.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (k, &kv) in kernel.iter().enumerate() {
                let j = i as isize + k as isize - radius as isize;
                if (0..n as isize).contains(&j) {
                    smoothed[j as usize] += c * kv / kernel_sum;
                }
            }
        }

        let before: f64 = self.counts.iter().sum();
        let after: f64 = smoothed.iter().sum();
        if after > 0.0 {
            let rescale = before / after;
            for v in &mut smoothed {
                *v *= rescale;
            }
        }
        out.counts = smoothed;
        out
    }

    /// Dumps `bin_center,count` rows for plotting.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "bin_center,count")?;
        for i in 0..self.counts.len() {
            writeln!(w, "{},{}", crate::fmt::sig9(self.bin_center(i)), crate::fmt::sig9(self.counts[i]))?;
        }
        Ok(())
    }
}

fn bin_index(x: f64, lo: f64, hi: f64, n_bins: usize) -> Option<usize> {
    if !(x >= lo && x <= hi) {
        return None;
    }
    let idx = ((x - lo) / (hi - lo) * n_bins as f64) as usize;
    Some(idx.min(n_bins - 1))
}
